//! The training loop: minibatch anchors, Adam on the path-matching loss,
//! periodic evaluation and checkpoints.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `model.cnfm` | field checkpoint |
//! | `model.cnfm.manifest` | `key = value` lines: manifold, path scales, step, seed |
//! | `model.cnfm.adam` | optimizer moments for `--resume` |
//! | `config.toml` | the effective configuration |
//! | `train.log` | one record per step (below) |
//! | `train.log.timing` | `step=N wall=SECONDS`, kept apart so the log is reproducible |
//! | `nan.json` | written instead of a step record when a step goes non-finite |
//!
//! Log records are space-separated `key=value` fields: `step`, `loss`,
//! `grad_norm`, `clipped` (0 or 1), and when present `eval_nll`, `eval_se`,
//! `gradcheck` (largest relative error over the spot-checked parameters).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{manifest_path, read_manifest, Dataset};
use crate::error::{Error, Result};
use crate::field::{Field, VectorField};
use crate::flow::{log_likelihood_batch, OdeSolverConfig};
use crate::loss::{ppd_batch, ppd_value, sample_batch, Estimate, PpdConfig};
use crate::manifold::Manifold;
use crate::paths::{Prior, TargetPath};

pub const MODEL_FILE: &str = "model.cnfm";
pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.toml";
pub const NAN_FILE: &str = "nan.json";

const ADAM_MAGIC: &[u8; 4] = b"CNFA";
const STEP_TAG: u64 = 0x5354_4550_0000_0001;
const SHUFFLE_TAG: u64 = 0x5348_5546_0000_0002;
const CHECK_TAG: u64 = 0x4752_4144_0000_0003;

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 16 * self.m.len());
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("corrupt optimizer state".into());
        if bytes.len() < 20 || &bytes[..4] != ADAM_MAGIC {
            return Err(bad());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
        let step = word(4);
        let n = word(12) as usize;
        if bytes.len() != 20 + 16 * n {
            return Err(bad());
        }
        let f = |i: usize| f64::from_le_bytes(bytes[20 + 8 * i..28 + 8 * i].try_into().unwrap());
        let mut s = Self::new(n);
        s.step = step;
        s.m = (0..n).map(f).collect();
        s.v = (n..2 * n).map(f).collect();
        Ok(s)
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves everything untouched.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != grad.len() {
        return Err(Error::Input(format!(
            "adam: {} parameters, {} gradient entries, {} moments",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry {i}: {}", grad[i])));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}

/// A trained field with the prior and path scales it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub field: VectorField,
    pub prior: Prior,
    pub info: ModelInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelInfo {
    pub step: u64,
    pub seed: u64,
    pub sigma1: f64,
    pub kappa1: f64,
    pub origin: Option<Vec<f64>>,
    pub ell: u32,
    pub divergence: String,
}

impl Model {
    pub fn manifold(&self) -> &Manifold {
        self.field.manifold()
    }

    pub fn manifest_text(&self) -> String {
        let i = &self.info;
        let mut s = String::new();
        let _ = writeln!(s, "format = cnfm-model");
        let _ = writeln!(s, "manifold = {}", self.manifold());
        let _ = writeln!(s, "step = {}", i.step);
        let _ = writeln!(s, "seed = {}", i.seed);
        let _ = writeln!(s, "sigma1 = {}", i.sigma1);
        let _ = writeln!(s, "kappa1 = {}", i.kappa1);
        let origin = match &i.origin {
            Some(o) => o.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            None => "none".into(),
        };
        let _ = writeln!(s, "origin = {origin}");
        let _ = writeln!(s, "ell = {}", i.ell);
        let _ = writeln!(s, "divergence = {}", i.divergence);
        s
    }

    /// Write the checkpoint and its manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.field.save(path)?;
        std::fs::write(manifest_path(path), self.manifest_text())?;
        Ok(())
    }

    /// Load a checkpoint. Without a manifest the prior is the standard one.
    pub fn load(path: &Path) -> Result<Self> {
        let field = VectorField::load(path)?;
        let mf = manifest_path(path);
        let mut info = ModelInfo {
            step: 0,
            seed: 0,
            sigma1: f64::NAN,
            kappa1: f64::NAN,
            origin: None,
            ell: 0,
            divergence: String::new(),
        };
        if mf.exists() {
            let parse_err = |k: &str, v: &str| Error::Parse(format!("{}: bad `{k}` value `{v}`", mf.display()));
            for (k, v) in read_manifest(&mf)? {
                match k.as_str() {
                    "step" => info.step = v.parse().map_err(|_| parse_err(&k, &v))?,
                    "seed" => info.seed = v.parse().map_err(|_| parse_err(&k, &v))?,
                    "sigma1" => info.sigma1 = v.parse().map_err(|_| parse_err(&k, &v))?,
                    "kappa1" => info.kappa1 = v.parse().map_err(|_| parse_err(&k, &v))?,
                    "ell" => info.ell = v.parse().map_err(|_| parse_err(&k, &v))?,
                    "divergence" => info.divergence = v,
                    "origin" if v != "none" => {
                        info.origin = Some(
                            v.split(',')
                                .map(|c| c.trim().parse::<f64>())
                                .collect::<std::result::Result<_, _>>()
                                .map_err(|_| parse_err(&k, &v))?,
                        )
                    }
                    "manifold" => {
                        let m: Manifold = v.parse()?;
                        if &m != field.manifold() {
                            return Err(Error::Format(format!(
                                "{}: manifest says {m}, checkpoint holds {}",
                                mf.display(),
                                field.manifold()
                            )));
                        }
                    }
                    _ => {}
                }
            }
        }
        let prior = Prior::standard(field.manifold(), info.origin.as_deref())?;
        Ok(Self { field, prior, info })
    }
}

/// One step's outcome, as written to the log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub eval: Option<Estimate>,
    pub gradcheck: Option<f64>,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "step={} loss={} grad_norm={} clipped={}",
            self.step, self.loss, self.grad_norm, self.clipped as u8
        );
        if let Some(e) = self.eval {
            let _ = write!(s, " eval_nll={} eval_se={}", e.mean, e.std_err);
        }
        if let Some(g) = self.gradcheck {
            let _ = write!(s, " gradcheck={g}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub final_eval: Option<Estimate>,
    /// True when `run.max_seconds` ended the run before the planned step count.
    pub stopped_early: bool,
    pub seconds: f64,
}

#[derive(Serialize)]
struct NanBundle<'a> {
    seed: u64,
    step: u64,
    learning_rate: f64,
    t_values: &'a [f64],
    error: String,
}

pub struct Trainer {
    config: TrainConfig,
    ppd: PpdConfig,
    train: Dataset,
    test: Option<Dataset>,
    field: VectorField,
    adam: AdamState,
    step: u64,
    prior: Prior,
    last_times: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Input("training set is empty".into()));
        }
        if let Some(t) = &test {
            if t.manifold != train.manifold {
                return Err(Error::Input(format!(
                    "test set lives on {}, training set on {}",
                    t.manifold, train.manifold
                )));
            }
        }
        let manifold = train.manifold.clone();
        let field = VectorField::init(config.mlp(), &manifold, config.seed)?;
        let prior = Prior::standard(&manifold, config.path.origin.as_deref())?;
        Ok(Self {
            ppd: config.ppd(&manifold),
            adam: AdamState::new(field.num_params()),
            config,
            train,
            test,
            field,
            step: 0,
            prior,
            last_times: Vec::new(),
        })
    }

    /// Continue from the checkpoint and optimizer state in `dir`.
    pub fn resume(config: TrainConfig, train: Dataset, test: Option<Dataset>, dir: &Path) -> Result<Self> {
        let mut t = Self::new(config, train, test)?;
        let model = Model::load(&dir.join(MODEL_FILE))?;
        if model.field.config() != t.field.config() || model.manifold() != &t.train.manifold {
            return Err(Error::Input(format!(
                "checkpoint in {} does not match the configured model or dataset",
                dir.display()
            )));
        }
        let adam = AdamState::from_bytes(&std::fs::read(adam_path(dir))?)?;
        if adam.m.len() != model.field.num_params() || adam.step != model.info.step {
            return Err(Error::Format("optimizer state does not match the checkpoint".into()));
        }
        t.field = model.field;
        t.adam = adam;
        t.step = model.info.step;
        Ok(t)
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.train.len())
    }

    pub fn model(&self) -> Model {
        Model {
            field: self.field.clone(),
            prior: self.prior.clone(),
            info: ModelInfo {
                step: self.step,
                seed: self.config.seed,
                sigma1: self.config.path.sigma1,
                kappa1: self.config.path.kappa1,
                origin: self.config.path.origin.clone(),
                ell: self.config.loss.ell,
                divergence: self.ppd.divergence.to_string(),
            },
        }
    }

    /// Indices of the anchors used at 1-based `step`: consecutive slices of a
    /// per-epoch seeded permutation.
    pub fn anchor_indices(&self, step: u64) -> Vec<usize> {
        let n = self.train.len();
        let spe = self.config.steps_per_epoch(n);
        let epoch = (step - 1) / spe;
        let k = ((step - 1) % spe) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SHUFFLE_TAG);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let b = self.config.optim.batch_size;
        perm[(k * b).min(n)..((k + 1) * b).min(n)].to_vec()
    }

    fn step_inputs(&self, step: u64) -> Result<(TargetPath, Vec<(f64, Vec<f64>)>, u64)> {
        let anchors: Vec<Vec<f64>> = self
            .anchor_indices(step)
            .into_iter()
            .map(|i| self.train.points[i].clone())
            .collect();
        let path = TargetPath::standard(
            &self.train.manifold,
            &anchors,
            self.config.path.sigma1,
            self.config.path.kappa1,
            self.config.path.origin.as_deref(),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ STEP_TAG);
        rng.set_stream(step);
        let batch = sample_batch(&path, self.config.optim.batch_size, self.ppd.time_sampling, &mut rng)?;
        let probe_seed = rng.next_u64();
        Ok((path, batch, probe_seed))
    }

    /// Mean NLL over the first `eval.eval_points` test points.
    pub fn evaluate(&self, solver: &OdeSolverConfig) -> Result<Option<Estimate>> {
        let Some(test) = &self.test else { return Ok(None) };
        let n = self.config.eval.eval_points.min(test.len());
        if n == 0 {
            return Ok(None);
        }
        let ll = log_likelihood_batch(&self.field, &self.prior, &test.points[..n], solver, self.config.run.workers)?;
        let nll: Vec<f64> = ll.iter().map(|v| -v).collect();
        Ok(Some(Estimate::from_samples(&nll)))
    }

    /// Central differences of the batch loss on 5 random parameters; returns
    /// the largest relative error against `grad`.
    fn gradcheck(&self, path: &TargetPath, batch: &[(f64, Vec<f64>)], probe_seed: u64, grad: &[f64]) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ CHECK_TAG);
        rng.set_stream(self.step + 1);
        let mut f = self.field.clone();
        let mut worst = 0.0_f64;
        for _ in 0..5 {
            let i = rng.random_range(0..f.num_params());
            let p0 = f.params().values[i];
            let h = 1e-5 * p0.abs().max(1.0);
            f.params_mut()[i] = p0 + h;
            let up = ppd_value(path, &f, batch, &self.ppd, probe_seed)?;
            f.params_mut()[i] = p0 - h;
            let down = ppd_value(path, &f, batch, &self.ppd, probe_seed)?;
            f.params_mut()[i] = p0;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    /// Times sampled for the most recent step, kept for failure reports.
    pub fn last_batch_times(&self) -> &[f64] {
        &self.last_times
    }

    /// Run one optimization step. On a numeric failure nothing is updated.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let (path, batch, probe_seed) = self.step_inputs(step)?;
        self.last_times = batch.iter().map(|(t, _)| *t).collect();
        let out = ppd_batch(&path, &self.field, &batch, &self.ppd, probe_seed, self.config.run.workers)?;
        let mut grad = out.grad;
        if !out.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", out.loss)));
        }
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let gradcheck = match self.config.run.gradcheck_every {
            0 => None,
            k if step % k == 0 => Some(self.gradcheck(&path, &batch, probe_seed, &grad)?),
            _ => None,
        };
        let clipped = grad_norm > self.config.optim.clip_norm;
        if clipped {
            let s = self.config.optim.clip_norm / grad_norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        adam_step(
            self.field.params_mut(),
            &grad,
            &mut self.adam,
            self.config.optim.learning_rate,
        )?;
        self.step = step;
        let eval = match self.config.eval.eval_every {
            0 => None,
            k if step % k == 0 => self.evaluate(&self.config.eval.solver)?,
            _ => None,
        };
        Ok(StepRecord {
            step,
            loss: out.loss,
            grad_norm,
            clipped,
            eval,
            gradcheck,
        })
    }

    /// Write the checkpoint, its manifest and the optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model().save(&dir.join(MODEL_FILE))?;
        std::fs::write(adam_path(dir), self.adam.to_bytes())?;
        Ok(())
    }

    /// Train to the configured step count (or time budget). With `out`, the
    /// run directory is populated as described in the module docs and
    /// `on_record` sees each log line as it is written.
    pub fn run(&mut self, out: Option<&Path>, mut on_record: impl FnMut(&str)) -> Result<TrainSummary> {
        let start = Instant::now();
        let total = self.total_steps();
        let mut log = None;
        let mut timing = None;
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(CONFIG_FILE), self.config.to_toml_string())?;
            let log_path = dir.join(LOG_FILE);
            truncate_log_after(&log_path, self.step)?;
            truncate_log_after(&timing_path(&log_path), self.step)?;
            let open = |p: &Path| std::fs::OpenOptions::new().create(true).append(true).open(p);
            log = Some(open(&log_path)?);
            timing = Some(open(&timing_path(&log_path))?);
        }
        let mut final_loss = f64::NAN;
        let mut last_eval = None;
        let mut stopped_early = false;
        while self.step < total {
            let rec = match self.step() {
                Ok(r) => r,
                Err(Error::Numeric(msg)) => {
                    if let Some(dir) = out {
                        let bundle = NanBundle {
                            seed: self.config.seed,
                            step: self.step + 1,
                            learning_rate: self.config.optim.learning_rate,
                            t_values: &self.last_times,
                            error: msg.clone(),
                        };
                        std::fs::write(
                            dir.join(NAN_FILE),
                            serde_json::to_string_pretty(&bundle).expect("bundle serializes"),
                        )?;
                    }
                    return Err(Error::Numeric(format!(
                        "step {} (seed {}): {msg}",
                        self.step + 1,
                        self.config.seed
                    )));
                }
                Err(e) => return Err(e),
            };
            final_loss = rec.loss;
            if rec.eval.is_some() {
                last_eval = rec.eval;
            }
            let line = rec.log_line();
            if let Some(f) = log.as_mut() {
                writeln!(f, "{line}")?;
            }
            if let Some(f) = timing.as_mut() {
                writeln!(f, "step={} wall={:.3}", rec.step, start.elapsed().as_secs_f64())?;
            }
            on_record(&line);
            if let Some(dir) = out {
                let every = self.config.run.checkpoint_every;
                if every > 0 && self.step % every == 0 {
                    self.save(dir)?;
                }
            }
            if let Some(budget) = self.config.run.max_seconds {
                if start.elapsed().as_secs_f64() > budget && self.step < total {
                    stopped_early = true;
                    break;
                }
            }
        }
        if let Some(dir) = out {
            self.save(dir)?;
        }
        Ok(TrainSummary {
            steps: self.step,
            final_loss,
            final_eval: last_eval,
            stopped_early,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

pub fn adam_path(dir: &Path) -> PathBuf {
    dir.join(format!("{MODEL_FILE}.adam"))
}

pub fn timing_path(log: &Path) -> PathBuf {
    let mut s = log.as_os_str().to_owned();
    s.push(".timing");
    PathBuf::from(s)
}

/// Drop records with `step` beyond `keep`, so a resumed run appends cleanly.
fn truncate_log_after(path: &Path, keep: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split_whitespace()
                .next()
                .and_then(|f| f.strip_prefix("step="))
                .and_then(|v| v.parse::<u64>().ok())
                .is_some_and(|s| s <= keep)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept)?;
    Ok(())
}

/// Train from scratch; a convenience over [`Trainer`].
pub fn train(config: TrainConfig, train: Dataset, test: Option<Dataset>, out: Option<&Path>) -> Result<(Model, TrainSummary)> {
    let mut t = Trainer::new(config, train, test)?;
    let summary = t.run(out, |_| {})?;
    Ok((t.model(), summary))
}
