//! `cnfm`: dataset generation, training, sampling, likelihoods, density grids
//! and self-checks from the command line.
//!
//! Exit codes: 0 success, 1 runtime or numeric failure, 2 usage error.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cnfm::config::TrainConfig;
use cnfm::data::{self, Dataset};
use cnfm::flow::{log_likelihood_batch, sample_model, OdeSolverConfig};
use cnfm::loss::Estimate;
use cnfm::train::{Model, Trainer, MODEL_FILE, NAN_FILE};
use cnfm::validate::{run_suite, Suite, ValidateOptions, SUITES};
use cnfm::{Factor, Manifold};

#[derive(Parser)]
#[command(name = "cnfm", version, about = "Continuous normalizing flows on manifolds trained by probability path matching")]
struct Cli {
    /// Worker threads for batch evaluation (results are reproducible for a fixed count).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Random seed; overrides the config file for `train`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write train/test CSV files with manifests.
    MakeData(MakeDataArgs),
    /// Train a model; writes a checkpoint, log and effective config into --out.
    Train(TrainArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Negative log-likelihood of a dataset under a model.
    Nll(NllArgs),
    /// Model log-density on a lat/lon (S^2) or rectangular (R^1, R^2) lattice.
    DensityGrid(GridArgs),
    /// Run a built-in validation suite; prints one JSON record per check.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Checkerboard2d,
    CheckerboardSphere,
    Rk,
    Poses,
    Uniform,
}

#[derive(Args)]
struct MakeDataArgs {
    #[arg(long, value_enum)]
    generator: Generator,
    /// Manifold such as `R^2`, `S^15` or `R^3 x S^1 x S^3`; each generator has a default.
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Output path; with a test split, `<out>.train.csv` and `<out>.test.csv` are written.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of points held out as the test split (0 disables splitting).
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    /// Checkerboard cells per axis (even).
    #[arg(long, default_value_t = 4)]
    cells: usize,
    /// Latitude bands for the sphere checkerboard (even).
    #[arg(long, default_value_t = 4)]
    lat_bands: usize,
    /// Longitude bands for the sphere checkerboard (even).
    #[arg(long, default_value_t = 8)]
    lon_bands: usize,
    /// Number of sign directions for `rk`.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Mixture components for `poses`.
    #[arg(long, default_value_t = 4)]
    modes: usize,
    /// Gaussian scale on Euclidean factors for `poses`.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// vMF concentration on sphere factors for `poses`.
    #[arg(long, default_value_t = 20.0)]
    kappa: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV. A sibling `*.test.csv` of a `*.train.csv` is used for evaluation.
    #[arg(long)]
    data: PathBuf,
    /// Test CSV for evaluation NLLs.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Manifold of the data, when the CSV has no manifest.
    #[arg(long)]
    manifold: Option<String>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Print only the final summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// `rk4:N` or `dopri5:RTOL:ATOL[:MAX]`, optionally `:noretract`.
    #[arg(long, default_value = "rk4:100")]
    solver: String,
}

#[derive(Args)]
struct NllArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-point CSV (`index,log_likelihood`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "dopri5:1e-6:1e-8")]
    solver: String,
    /// Evaluate only the first N points.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    /// `N` or `AxB`: points per axis (latitude x longitude on S^2; N alone means N x 2N there).
    #[arg(long, default_value = "64")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Coordinate range `LO:HI` for Euclidean grids.
    #[arg(long, default_value = "-3:3", allow_hyphen_values = true)]
    range: String,
    #[arg(long, default_value = "rk4:100")]
    solver: String,
}

#[derive(Args)]
struct ValidateArgs {
    /// `lmc`, `bounds`, `gradcheck`, `solver` or `all`.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Monte Carlo samples per bound check.
    #[arg(long, default_value_t = 20_000)]
    n_mc: usize,
    /// Also write the checks as a JSON array.
    #[arg(long)]
    report: Option<PathBuf>,
}

/// An error caused by how the program was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let workers = cli.workers.unwrap_or(1).max(1);
    match cli.command {
        Command::MakeData(a) => make_data(a, seed),
        Command::Train(a) => train(a, cli.seed, cli.workers),
        Command::Sample(a) => sample(a, seed, workers),
        Command::Nll(a) => nll(a, workers),
        Command::DensityGrid(a) => density_grid(a, workers),
        Command::Validate(a) => validate(a, seed, workers),
    }
}

fn parse_manifold(s: &str) -> Result<Manifold> {
    s.parse().map_err(|e| usage(format!("--manifold: {e}")))
}

fn parse_solver(s: &str) -> Result<OdeSolverConfig> {
    s.parse().map_err(|e| usage(format!("--solver: {e}")))
}

fn make_data(a: MakeDataArgs, seed: u64) -> Result<ExitCode> {
    let manifold = a.manifold.as_deref().map(parse_manifold).transpose()?;
    let fixed = |want: Manifold| -> Result<()> {
        match &manifold {
            Some(m) if *m != want => Err(usage(format!("this generator produces {want}, not {m}"))),
            _ => Ok(()),
        }
    };
    let ds = match a.generator {
        Generator::Checkerboard2d => {
            fixed(Manifold::euclidean(2))?;
            data::gen_checkerboard_euclidean(a.n, a.cells, seed)?
        }
        Generator::CheckerboardSphere => {
            fixed(Manifold::sphere(2))?;
            data::gen_checkerboard_sphere(a.n, a.lat_bands, a.lon_bands, seed)?
        }
        Generator::Rk => {
            let m = manifold.unwrap_or_else(|| Manifold::sphere(15));
            let d = match m.factors() {
                [Factor::Sphere(d)] => *d,
                _ => return Err(usage(format!("rk needs a single sphere, got {m}"))),
            };
            data::gen_rk_hypersphere(d, a.k, a.n, seed)?
        }
        Generator::Poses => {
            let m = match manifold {
                Some(m) => m,
                None => "R^3 x S^1 x S^1 x S^1 x S^1 x S^1 x S^1".parse()?,
            };
            data::gen_product_poses(a.n, &m, a.modes, a.sigma, a.kappa, seed)?
        }
        Generator::Uniform => {
            let m = manifold.ok_or_else(|| usage("--manifold is required for the uniform generator"))?;
            data::gen_uniform(&m, a.n, seed)?
        }
    };
    if a.test_fraction > 0.0 {
        let (train, test) = ds.split(a.test_fraction, seed)?;
        let base = a.out.to_string_lossy();
        let base = base.strip_suffix(".csv").unwrap_or(&base);
        let (tp, sp) = (PathBuf::from(format!("{base}.train.csv")), PathBuf::from(format!("{base}.test.csv")));
        ensure_parent(&tp)?;
        train.write_csv(&tp)?;
        test.write_csv(&sp)?;
        println!(
            "wrote {} train points to {} and {} test points to {}",
            train.len(),
            tp.display(),
            test.len(),
            sp.display()
        );
    } else {
        ensure_parent(&a.out)?;
        ds.write_csv(&a.out)?;
        println!("wrote {} points to {}", ds.len(), a.out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn sibling_test_file(train: &Path) -> Option<PathBuf> {
    let s = train.to_string_lossy();
    let base = s.strip_suffix(".train.csv")?;
    let p = PathBuf::from(format!("{base}.test.csv"));
    p.exists().then_some(p)
}

fn train(a: TrainArgs, seed: Option<u64>, workers: Option<usize>) -> Result<ExitCode> {
    let mut config = if let Some(path) = &a.config {
        TrainConfig::from_file(path).map_err(|e| usage(e.to_string()))?
    } else if a.resume && a.out.join(cnfm::train::CONFIG_FILE).exists() {
        TrainConfig::from_file(&a.out.join(cnfm::train::CONFIG_FILE)).map_err(|e| usage(e.to_string()))?
    } else {
        TrainConfig::preset(a.preset.as_deref().unwrap_or("toy2d")).map_err(|e| usage(e.to_string()))?
    };
    let mut sets = a.overrides.clone();
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            sets.push(format!("{key}={v}"));
        }
    };
    flag("seed", seed.map(|v| v.to_string()));
    flag("run.workers", workers.map(|v| v.to_string()));
    flag("optim.learning_rate", a.learning_rate.map(|v| format!("{v:e}")));
    flag("optim.batch_size", a.batch_size.map(|v| v.to_string()));
    flag("optim.epochs", a.epochs.map(|v| v.to_string()));
    flag("optim.max_steps", a.max_steps.map(|v| v.to_string()));
    flag("run.max_seconds", a.max_seconds.map(|v| format!("{v:?}")));
    flag("eval.eval_every", a.eval_every.map(|v| v.to_string()));
    for s in &sets {
        config.apply_override(s).map_err(|e| usage(e.to_string()))?;
    }

    let manifold = a.manifold.as_deref().map(parse_manifold).transpose()?;
    let train_set = data::load_dataset(&a.data, manifold.as_ref())?;
    let test_path = a.test.clone().or_else(|| sibling_test_file(&a.data));
    let test_set: Option<Dataset> = test_path
        .as_deref()
        .map(|p| data::load_dataset(p, Some(&train_set.manifold)))
        .transpose()?;

    let mut trainer = if a.resume {
        Trainer::resume(config, train_set, test_set, &a.out)?
    } else {
        Trainer::new(config, train_set, test_set)?
    };
    let total = trainer.total_steps();
    if !a.quiet {
        eprintln!(
            "training {} parameters for {} steps (starting at step {}) into {}",
            trainer.field().num_params(),
            total,
            trainer.step_count(),
            a.out.display()
        );
    }
    let quiet = a.quiet;
    let summary = trainer.run(Some(&a.out), |line| {
        if !quiet && (line.contains("eval_nll") || line.split_whitespace().next().is_some_and(|f| f.ends_with("00"))) {
            eprintln!("{line}");
        }
    });
    let summary = match summary {
        Ok(s) => s,
        Err(cnfm::Error::Numeric(m)) => {
            bail!("numeric failure, reproduction bundle in {}: {m}", a.out.join(NAN_FILE).display())
        }
        Err(e) => return Err(e.into()),
    };
    let mut line = format!(
        "steps={} final_loss={} seconds={:.1}",
        summary.steps, summary.final_loss, summary.seconds
    );
    if let Some(e) = summary.final_eval {
        line.push_str(&format!(" eval_nll={} eval_se={}", e.mean, e.std_err));
    }
    if summary.stopped_early {
        line.push_str(" stopped=time_budget");
    }
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<Model> {
    let p = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    Model::load(&p).with_context(|| format!("loading model {}", p.display()))
}

fn sample(a: SampleArgs, seed: u64, workers: usize) -> Result<ExitCode> {
    let solver = parse_solver(&a.solver)?;
    let model = load_model(&a.model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs = sample_model(&model.field, &model.prior, a.n, &solver, &mut rng, workers)?;
    let ds = Dataset {
        manifold: model.manifold().clone(),
        points: xs,
        provenance: format!("sample of {}", a.model.display()),
        metadata: vec![("seed".into(), seed.to_string()), ("solver".into(), solver.to_string())],
    };
    ensure_parent(&a.out)?;
    ds.write_csv(&a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn nll(a: NllArgs, workers: usize) -> Result<ExitCode> {
    let solver = parse_solver(&a.solver)?;
    let model = load_model(&a.model)?;
    let mut ds = data::load_dataset(&a.data, Some(model.manifold()))?;
    if let Some(n) = a.limit {
        ds.points.truncate(n);
    }
    if ds.is_empty() {
        bail!("{} has no points", a.data.display());
    }
    let ll = log_likelihood_batch(&model.field, &model.prior, &ds.points, &solver, workers)?;
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["index", "log_likelihood"])?;
        for (i, v) in ll.iter().enumerate() {
            w.write_record([i.to_string(), v.to_string()])?;
        }
        w.flush()?;
    }
    let nll: Vec<f64> = ll.iter().map(|v| -v).collect();
    let e = Estimate::from_samples(&nll);
    println!("nll mean={} se={} n={} solver={}", e.mean, e.std_err, nll.len(), solver);
    Ok(ExitCode::SUCCESS)
}

fn parse_grid(s: &str) -> Result<(usize, Option<usize>)> {
    let bad = || usage(format!("--grid: expected N or AxB, got `{s}`"));
    let (a, b) = match s.split_once(['x', 'X']) {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, Some(b.trim().parse().map_err(|_| bad())?)),
        None => (s.trim().parse().map_err(|_| bad())?, None),
    };
    if a == 0 || b == Some(0) {
        return Err(bad());
    }
    Ok((a, b))
}

fn density_grid(a: GridArgs, workers: usize) -> Result<ExitCode> {
    let solver = parse_solver(&a.solver)?;
    let model = load_model(&a.model)?;
    let (na, nb) = parse_grid(&a.grid)?;
    let m = model.manifold().clone();
    let (header, coords, points, weights): (Vec<&str>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) = match m.factors() {
        [Factor::Sphere(2)] => {
            let (nlat, nlon) = (na, nb.unwrap_or(2 * na));
            let (dlat, dlon) = (180.0 / nlat as f64, 360.0 / nlon as f64);
            let mut c = Vec::new();
            let mut p = Vec::new();
            let mut w = Vec::new();
            for i in 0..nlat {
                let lo = -90.0 + dlat * i as f64;
                let lat = lo + 0.5 * dlat;
                // exact area of the lat/lon cell
                let area = dlon.to_radians() * ((lo + dlat).to_radians().sin() - lo.to_radians().sin());
                for j in 0..nlon {
                    let lon = -180.0 + dlon * (j as f64 + 0.5);
                    c.push(vec![lat, lon]);
                    p.push(data::latlon_to_unit(lat, lon).to_vec());
                    w.push(area);
                }
            }
            (vec!["lat", "lon", "logq", "weight"], c, p, w)
        }
        [Factor::Euclidean(d @ (1 | 2))] => {
            let (lo, hi) = a
                .range
                .split_once(':')
                .and_then(|(l, h)| Some((l.trim().parse::<f64>().ok()?, h.trim().parse::<f64>().ok()?)))
                .filter(|(l, h)| l < h)
                .ok_or_else(|| usage(format!("--range: expected LO:HI, got `{}`", a.range)))?;
            let nx = na;
            let ny = if *d == 2 { nb.unwrap_or(na) } else { 1 };
            let (hx, hy) = ((hi - lo) / nx as f64, (hi - lo) / ny as f64);
            let mut c = Vec::new();
            for i in 0..nx {
                let x = lo + hx * (i as f64 + 0.5);
                if *d == 1 {
                    c.push(vec![x]);
                } else {
                    for j in 0..ny {
                        c.push(vec![x, lo + hy * (j as f64 + 0.5)]);
                    }
                }
            }
            let cell = if *d == 2 { hx * hy } else { hx };
            let w = vec![cell; c.len()];
            let header = if *d == 2 { vec!["x", "y", "logq", "weight"] } else { vec!["x", "logq", "weight"] };
            (header, c.clone(), c, w)
        }
        _ => bail!("density grids are available on S^2, R^1 and R^2, not {m}"),
    };
    let ll = log_likelihood_batch(&model.field, &model.prior, &points, &solver, workers)?;
    ensure_parent(&a.out)?;
    let mut w = csv::Writer::from_path(&a.out)?;
    w.write_record(&header)?;
    let mut mass = 0.0;
    for ((c, l), wt) in coords.iter().zip(&ll).zip(&weights) {
        let mut rec: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        rec.push(l.to_string());
        rec.push(wt.to_string());
        w.write_record(&rec)?;
        mass += l.exp() * wt;
    }
    w.flush()?;
    println!("wrote {} grid points to {} (quadrature mass {mass:.6})", ll.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs, seed: u64, workers: usize) -> Result<ExitCode> {
    let suites: Vec<Suite> = if a.suite == "all" {
        SUITES.to_vec()
    } else {
        vec![a.suite.parse().map_err(|e: cnfm::Error| usage(e.to_string()))?]
    };
    if a.n_mc < 2 {
        return Err(usage("--n-mc must be at least 2"));
    }
    let opts = ValidateOptions {
        seed,
        n_mc: a.n_mc,
        workers,
    };
    let mut all = Vec::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in suites {
        for c in run_suite(s, &opts)? {
            writeln!(out, "{}", serde_json::to_string(&c)?)?;
            all.push(c);
        }
    }
    if let Some(p) = &a.report {
        ensure_parent(p)?;
        std::fs::write(p, serde_json::to_string_pretty(&all)?)?;
    }
    let failed = all.iter().filter(|c| !c.pass).count();
    eprintln!("{} checks, {} failed", all.len(), failed);
    if failed > 0 {
        return Err(anyhow!("{failed} validation checks failed"));
    }
    Ok(ExitCode::SUCCESS)
}
