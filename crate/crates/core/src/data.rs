//! Datasets: synthetic generators, CSV ingestion and train/test splits.
//!
//! A dataset CSV has a header row and one point per row in ambient
//! coordinates. Next to it, `<file>.manifest` records `key = value` lines:
//! manifold, generator, seed, counts and generator-specific metadata (for the
//! `rk` family, the orthonormal frame).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{input, Error, Result};
use crate::kernels::{sample_gaussian, sample_vmf};
use crate::manifold::{dot, log_sphere_area, norm, sample_unit_sphere, Factor, Manifold};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifold: Manifold,
    pub points: Vec<Vec<f64>>,
    /// Generator name or source file.
    pub provenance: String,
    /// Extra manifest entries, in order.
    pub metadata: Vec<(String, String)>,
}

impl Dataset {
    pub fn new(manifold: Manifold, points: Vec<Vec<f64>>, provenance: impl Into<String>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            manifold
                .check_point(p)
                .map_err(|e| Error::Input(format!("point {i}: {e}")))?;
        }
        Ok(Self {
            manifold,
            points,
            provenance: provenance.into(),
            metadata: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Seeded shuffle, then the last `round(n * test_fraction)` points become the test split.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return input(format!("test fraction must lie in [0, 1), got {test_fraction}"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (train_idx, test_idx) = idx.split_at(self.len() - n_test);
        let part = |ids: &[usize], name: &str| {
            let mut d = self.clone();
            d.points = ids.iter().map(|&i| self.points[i].clone()).collect();
            d.metadata.push(("split".into(), name.into()));
            d.metadata.push(("split_seed".into(), seed.to_string()));
            d
        };
        Ok((part(train_idx, "train"), part(test_idx, "test")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.manifold.column_names())?;
        for p in &self.points {
            w.write_record(p.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        std::fs::write(manifest_path(path), self.manifest_text())?;
        Ok(())
    }

    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "manifold = {}", self.manifold);
        let _ = writeln!(s, "provenance = {}", self.provenance);
        let _ = writeln!(s, "count = {}", self.len());
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// `<file>.manifest`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Parse(format!("{}:{}: expected `key = value`", path.display(), i + 1)))
        })
        .collect()
}

/// `(lat, lon)` in degrees to a unit vector: `(cos lat cos lon, cos lat sin lon, sin lat)`.
pub fn latlon_to_unit(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
}

/// Inverse of [`latlon_to_unit`], in degrees.
pub fn unit_to_latlon(x: &[f64]) -> (f64, f64) {
    (x[2].clamp(-1.0, 1.0).asin().to_degrees(), x[1].atan2(x[0]).to_degrees())
}

/// Read a point CSV. A `lat,lon` header (degrees) is accepted for `S^2`;
/// otherwise the column count must equal the ambient dimension.
pub fn load_points_csv(path: &Path, manifold: &Manifold) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let latlon = header.len() == 2 && header[0] == "lat" && header[1] == "lon";
    if latlon && manifold.factors() != [Factor::Sphere(2)] {
        return Err(Error::Parse(format!(
            "{}: lat,lon columns need manifold S^2, not {manifold}",
            path.display()
        )));
    }
    if !latlon && header.len() != manifold.ambient_dim() {
        return Err(Error::Parse(format!(
            "{}: {} columns, but {manifold} has {} ambient coordinates (or use a lat,lon header for S^2)",
            path.display(),
            header.len(),
            manifold.ambient_dim()
        )));
    }
    let mut points = Vec::new();
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!(
                "{}: row {row} has {} fields, expected {}",
                path.display(),
                rec.len(),
                header.len()
            )));
        }
        let vals = rec
            .iter()
            .enumerate()
            .map(|(c, s)| {
                s.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "{}: row {row}, column `{}`: `{s}` is not a number",
                        path.display(),
                        header[c]
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let p = if latlon {
            latlon_to_unit(vals[0], vals[1]).to_vec()
        } else {
            vals
        };
        match manifold.check_point(&p) {
            Ok(()) => points.push(p),
            Err(e) => bad.push(format!("row {row}: {e}")),
        }
    }
    if !bad.is_empty() {
        let shown: Vec<_> = bad.iter().take(10).cloned().collect();
        return Err(Error::Parse(format!(
            "{}: {} rows violate {manifold}: {}{}",
            path.display(),
            bad.len(),
            shown.join("; "),
            if bad.len() > 10 { "; ..." } else { "" }
        )));
    }
    let mut ds = Dataset::new(manifold.clone(), points, path.display().to_string())?;
    let mf = manifest_path(path);
    if mf.exists() {
        for (k, v) in read_manifest(&mf)? {
            if !matches!(k.as_str(), "manifold" | "provenance" | "count") {
                ds.metadata.push((k, v));
            }
        }
    }
    Ok(ds)
}

/// Load a dataset CSV, taking the manifold from its manifest when `manifold` is `None`.
pub fn load_dataset(path: &Path, manifold: Option<&Manifold>) -> Result<Dataset> {
    match manifold {
        Some(m) => load_points_csv(path, m),
        None => {
            let mf = manifest_path(path);
            if !mf.exists() {
                return Err(Error::Input(format!(
                    "{} has no manifest; pass the manifold explicitly",
                    path.display()
                )));
            }
            let m: Manifold = read_manifest(&mf)?
                .into_iter()
                .find(|(k, _)| k == "manifold")
                .ok_or_else(|| Error::Parse(format!("{}: no `manifold` entry", mf.display())))?
                .1
                .parse()?;
            load_points_csv(path, &m)
        }
    }
}

/// Uniform on the cells `(i, j)` with `i + j` even of a `cells x cells` grid on `[-2, 2]^2`.
pub fn gen_checkerboard_euclidean(n: usize, cells: usize, seed: u64) -> Result<Dataset> {
    if cells == 0 || cells % 2 != 0 {
        return input(format!("checkerboard cell count must be even and positive, got {cells}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<(usize, usize)> = (0..cells)
        .flat_map(|i| (0..cells).map(move |j| (i, j)))
        .filter(|(i, j)| (i + j) % 2 == 0)
        .collect();
    let w = 4.0 / cells as f64;
    let points = (0..n)
        .map(|_| {
            let (i, j) = kept[rng.random_range(0..kept.len())];
            vec![
                -2.0 + w * (i as f64 + rng.random::<f64>()),
                -2.0 + w * (j as f64 + rng.random::<f64>()),
            ]
        })
        .collect();
    let mut ds = Dataset::new(Manifold::euclidean(2), points, "checkerboard2d")?;
    ds.metadata.push(("seed".into(), seed.to_string()));
    ds.metadata.push(("cells".into(), cells.to_string()));
    Ok(ds)
}

/// Cell index of a point on `[-2, 2]^2`, or `None` outside the square.
pub fn checkerboard_cell(x: &[f64], cells: usize) -> Option<(usize, usize)> {
    let w = 4.0 / cells as f64;
    let i = ((x[0] + 2.0) / w).floor();
    let j = ((x[1] + 2.0) / w).floor();
    let range = 0.0..cells as f64;
    (range.contains(&i) && range.contains(&j)).then_some((i as usize, j as usize))
}

/// Differential entropy of the checkerboard density on `[-2, 2]^2`: half the
/// square is covered for any even cell count, so it is `ln 8`.
pub fn checkerboard_entropy() -> f64 {
    8.0_f64.ln()
}

/// `(latitude band, longitude band)` of a point on `S^2` for equal-angle bands.
pub fn sphere_band(x: &[f64], lat_bands: usize, lon_bands: usize) -> (usize, usize) {
    let lat = x[2].clamp(-1.0, 1.0).asin();
    let lon = x[1].atan2(x[0]);
    let i = (((lat + PI / 2.0) / PI) * lat_bands as f64).floor() as usize;
    let j = (((lon + PI) / (2.0 * PI)) * lon_bands as f64).floor() as usize;
    (i.min(lat_bands - 1), j.min(lon_bands - 1))
}

/// Uniform sphere draws kept when their band parity is even.
pub fn gen_checkerboard_sphere(n: usize, lat_bands: usize, lon_bands: usize, seed: u64) -> Result<Dataset> {
    if lat_bands == 0 || lon_bands == 0 || lat_bands % 2 != 0 || lon_bands % 2 != 0 {
        return input("sphere checkerboard band counts must be even and positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut drawn = 0usize;
    while points.len() < n {
        let mut x = vec![0.0; 3];
        sample_unit_sphere(&mut rng, &mut x);
        drawn += 1;
        let (i, j) = sphere_band(&x, lat_bands, lon_bands);
        if (i + j) % 2 == 0 {
            points.push(x);
        }
    }
    let mut ds = Dataset::new(Manifold::sphere(2), points, "checkerboard_sphere")?;
    ds.metadata.push(("seed".into(), seed.to_string()));
    ds.metadata.push(("lat_bands".into(), lat_bands.to_string()));
    ds.metadata.push(("lon_bands".into(), lon_bands.to_string()));
    ds.metadata.push(("drawn".into(), drawn.to_string()));
    Ok(ds)
}

pub fn gen_uniform(manifold: &Manifold, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| manifold.sample_uniform(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = Dataset::new(manifold.clone(), points, "uniform")?;
    ds.metadata.push(("seed".into(), seed.to_string()));
    Ok(ds)
}

/// `k` orthonormal vectors in `R^p` by Gram-Schmidt on Gaussian draws.
pub fn random_frame<R: Rng + ?Sized>(p: usize, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for u in &frame {
                let s = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= s * b);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|c| *c /= n);
            frame.push(v);
        }
    }
    frame
}

/// `s(x) = prod_i sign(x^T v_i)`.
pub fn rk_sign(x: &[f64], frame: &[Vec<f64>]) -> f64 {
    frame
        .iter()
        .map(|v| if dot(x, v) >= 0.0 { 1.0 } else { -1.0 })
        .product()
}

/// The half-uniform density on `S^d` supported where `s(x) = +1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RkDensity {
    pub d: usize,
    pub frame: Vec<Vec<f64>>,
}

impl RkDensity {
    pub fn log_density(&self, x: &[f64]) -> f64 {
        if rk_sign(x, &self.frame) > 0.0 {
            -(log_sphere_area(self.d) - std::f64::consts::LN_2)
        } else {
            f64::NEG_INFINITY
        }
    }

    /// `log(|S^d| / 2)`.
    pub fn entropy(&self) -> f64 {
        log_sphere_area(self.d) - std::f64::consts::LN_2
    }

    /// Recover the frame stored in a dataset manifest.
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let d = match ds.manifold.factors() {
            [Factor::Sphere(d)] => *d,
            _ => return input("the rk density lives on a single sphere"),
        };
        let k: usize = ds
            .meta("k")
            .ok_or_else(|| Error::Parse("dataset manifest has no `k` entry".into()))?
            .parse()
            .map_err(|_| Error::Parse("bad `k` in manifest".into()))?;
        let frame = (0..k)
            .map(|i| {
                let key = format!("frame_{i}");
                ds.meta(&key)
                    .ok_or_else(|| Error::Parse(format!("dataset manifest has no `{key}` entry")))?
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number in `{key}`"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { d, frame })
    }
}

/// Uniform draws on `S^d`, reflected across `v_1^perp` whenever `s(x) = -1`.
/// The reflection flips the sign of `x^T v_1` only, so every output has
/// `s(x) = +1` and the law is exactly the half-uniform `r_k`.
pub fn gen_rk_hypersphere(d: usize, k: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || k == 0 || k > d + 1 {
        return input(format!("rk needs 1 <= k <= d + 1, got d = {d}, k = {k}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = random_frame(d + 1, k, &mut rng);
    let mut flips = 0usize;
    let points = (0..n)
        .map(|_| {
            let mut x = vec![0.0; d + 1];
            sample_unit_sphere(&mut rng, &mut x);
            if rk_sign(&x, &frame) < 0.0 {
                flips += 1;
                let s = 2.0 * dot(&x, &frame[0]);
                x.iter_mut().zip(&frame[0]).for_each(|(a, b)| *a -= s * b);
            }
            x
        })
        .collect();
    let mut ds = Dataset::new(Manifold::sphere(d), points, "rk")?;
    ds.metadata.push(("seed".into(), seed.to_string()));
    ds.metadata.push(("k".into(), k.to_string()));
    ds.metadata.push(("reflected".into(), flips.to_string()));
    for (i, v) in frame.iter().enumerate() {
        let row: Vec<String> = v.iter().map(|c| c.to_string()).collect();
        ds.metadata.push((format!("frame_{i}"), row.join(",")));
    }
    Ok(ds)
}

/// Mixture of `n_modes` product kernels with random centres: Gaussians of
/// standard deviation `sigma` on Euclidean factors (centres uniform in
/// `[-2, 2]^d`) and vMF kernels of concentration `kappa` on sphere factors.
pub fn gen_product_poses(
    n: usize,
    manifold: &Manifold,
    n_modes: usize,
    sigma: f64,
    kappa: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_modes == 0 || !(sigma > 0.0) || !(kappa >= 0.0) {
        return input("poses need n_modes >= 1, sigma > 0 and kappa >= 0");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let modes: Vec<Vec<f64>> = (0..n_modes)
        .map(|_| {
            let mut c = vec![0.0; manifold.ambient_dim()];
            for (f, r) in manifold.blocks() {
                match f {
                    Factor::Euclidean(_) => c[r].iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0)),
                    Factor::Sphere(_) => sample_unit_sphere(&mut rng, &mut c[r]),
                }
            }
            c
        })
        .collect();
    let points = (0..n)
        .map(|_| {
            let c = &modes[rng.random_range(0..n_modes)];
            let mut x = vec![0.0; c.len()];
            for (f, r) in manifold.blocks() {
                match f {
                    Factor::Euclidean(_) => sample_gaussian(&c[r.clone()], sigma, &mut rng, &mut x[r]),
                    Factor::Sphere(_) => sample_vmf(&c[r.clone()], kappa, &mut rng, &mut x[r]),
                }
            }
            x
        })
        .collect();
    let mut ds = Dataset::new(manifold.clone(), points, "poses")?;
    ds.metadata.push(("seed".into(), seed.to_string()));
    ds.metadata.push(("n_modes".into(), n_modes.to_string()));
    ds.metadata.push(("sigma".into(), sigma.to_string()));
    ds.metadata.push(("kappa".into(), kappa.to_string()));
    for (i, c) in modes.iter().enumerate() {
        let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        ds.metadata.push((format!("mode_{i}"), row.join(",")));
    }
    Ok(ds)
}
