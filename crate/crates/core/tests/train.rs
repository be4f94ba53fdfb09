use cnfm::config::TrainConfig;
use cnfm::data::{gen_checkerboard_euclidean, Dataset};
use cnfm::flow::{sample_model, OdeSolverConfig};
use cnfm::train::{Model, Trainer};
use cnfm::Manifold;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn one_point(y: f64) -> Dataset {
    Dataset::new(Manifold::euclidean(1), vec![vec![y]], "point").unwrap()
}

fn small_2d(steps: u64) -> (TrainConfig, Dataset) {
    let mut c = TrainConfig::preset("toy2d").unwrap();
    c.model.width = 16;
    c.model.hidden_layers = 2;
    c.optim.batch_size = 32;
    c.optim.max_steps = Some(steps);
    c.eval.eval_every = 5;
    c.eval.eval_points = 10;
    (c, gen_checkerboard_euclidean(200, 4, 3).unwrap())
}

#[test]
fn single_point_flow_lands_on_the_point() {
    let y = 1.0;
    let c = TrainConfig::preset("toy1d").unwrap();
    let sigma1 = c.path.sigma1;
    let mut t = Trainer::new(c, one_point(y), None).unwrap();
    t.run(None, |_| {}).unwrap();
    let m = t.model();
    let xs = sample_model(&m.field, &m.prior, 400, &OdeSolverConfig::rk4(100), &mut ChaCha8Rng::seed_from_u64(1), 1).unwrap();
    let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    // The target endpoint is N(y, sigma1^2).
    assert!((mean - y).abs() < 0.05, "mean {mean}");
    assert!(sd < 4.0 * sigma1, "sd {sd}");
}

/// `d/dt log p_t(x)` for the one-anchor path `N(t y, (sigma1^t)^2)`.
fn dt_log_p(t: f64, x: f64, y: f64, sigma1: f64) -> f64 {
    let l = sigma1.ln();
    let s = (t * l).exp();
    let z = x - t * y;
    -l + z * y / (s * s) + z * z * l / (s * s)
}

#[test]
fn initial_loss_is_the_path_time_derivative() {
    // The output layer starts at zero, so the residual is d/dt log p_t alone.
    let y = 0.7;
    let mut c = TrainConfig::preset("toy1d").unwrap();
    c.loss.ell = 2;
    c.optim.batch_size = 4000;
    c.path.sigma1 = 0.2;
    let sigma1 = c.path.sigma1;
    let mut t = Trainer::new(c, one_point(y), None).unwrap();
    let first = t.step().unwrap().loss;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200_000;
    let vals: Vec<f64> = (0..n)
        .map(|_| {
            let tt: f64 = rng.random();
            let x = tt * y + (tt * sigma1.ln()).exp() * rng.sample::<f64, _>(StandardNormal);
            dt_log_p(tt, x, y, sigma1).powi(2)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let se = sd * (1.0 / 4000.0 + 1.0 / n as f64).sqrt();
    assert!((first - mean).abs() < 3.0 * se, "{first} vs {mean} (se {se})");
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ds) = small_2d(12);
    let (train, test) = ds.split(0.2, 0).unwrap();
    for run in ["a", "b"] {
        let mut t = Trainer::new(c.clone(), train.clone(), Some(test.clone())).unwrap();
        t.run(Some(&dir.path().join(run)), |_| {}).unwrap();
    }
    for f in ["model.cnfm", "model.cnfm.manifest", "model.cnfm.adam", "train.log", "config.toml"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let log = std::fs::read_to_string(dir.path().join("a/train.log")).unwrap();
    assert_eq!(log.lines().count(), 12);
    assert!(log.lines().nth(4).unwrap().contains("eval_nll="));
}

#[test]
fn checkpoints_roundtrip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ds) = small_2d(3);
    let mut t = Trainer::new(c, ds, None).unwrap();
    t.run(Some(dir.path()), |_| {}).unwrap();
    let p = dir.path().join("model.cnfm");
    let m = Model::load(&p).unwrap();
    assert_eq!(m.info.step, 3);
    assert_eq!(&m.field, t.field());
    let q = dir.path().join("again.cnfm");
    m.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());

    let mut bytes = std::fs::read(&p).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&q, bytes).unwrap();
    assert!(Model::load(&q).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ds) = small_2d(10);
    let (train, test) = ds.split(0.2, 0).unwrap();
    let mut whole = Trainer::new(c.clone(), train.clone(), Some(test.clone())).unwrap();
    whole.run(Some(&dir.path().join("whole")), |_| {}).unwrap();

    let mut half = c.clone();
    half.optim.max_steps = Some(6);
    let split = dir.path().join("split");
    Trainer::new(half, train.clone(), Some(test.clone())).unwrap().run(Some(&split), |_| {}).unwrap();
    let mut rest = Trainer::resume(c, train, Some(test), &split).unwrap();
    assert_eq!(rest.step_count(), 6);
    rest.run(Some(&split), |_| {}).unwrap();

    for f in ["model.cnfm", "model.cnfm.adam", "train.log"] {
        let a = std::fs::read(dir.path().join("whole").join(f)).unwrap();
        let b = std::fs::read(split.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs after resume");
    }
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    let (c, ds) = small_2d(2);
    Trainer::new(c.clone(), ds.clone(), None).unwrap().run(Some(dir.path()), |_| {}).unwrap();
    let mut wider = c;
    wider.model.width = 20;
    assert!(Trainer::resume(wider, ds, None, dir.path()).is_err());
}

#[test]
fn every_anchor_is_visited_once_per_epoch() {
    let (mut c, ds) = small_2d(1);
    c.optim.batch_size = 30;
    let t = Trainer::new(c, ds, None).unwrap();
    let spe = t.config().steps_per_epoch(200);
    assert_eq!(spe, 7);
    let mut seen: Vec<usize> = (1..=spe).flat_map(|s| t.anchor_indices(s)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..200).collect::<Vec<_>>());
    assert_ne!(t.anchor_indices(1), t.anchor_indices(spe + 1));
}
