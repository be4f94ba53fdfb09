//! Learnable time-dependent vector fields.
//!
//! A [`VectorField`] is an MLP `w_theta(t, x)` whose input is, per manifold
//! factor, the time features followed by the factor's coordinates (normalized
//! on sphere factors). Sphere blocks of the output are projected onto the
//! tangent space at `x`:
//!
//! ```text
//! v(t, x) = (I - x x^T / |x|^2) w_theta(t, x / |x|)
//! ```
//!
//! so the field is tangent on the manifold and constant along normal rays. Its
//! ambient Euclidean divergence is then the Riemannian divergence.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    jacobian_trace_exact, jacobian_trace_exact_with_output, jacobian_trace_hutchinson, Affine,
    Dual, Scalar,
};
use crate::error::{input, Error, Result};
use crate::manifold::{Factor, Manifold};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Softplus,
    /// `x * sigmoid(x)`.
    Swish,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
            Activation::Swish => x * x.sigmoid(),
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
            Activation::Swish => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Softplus),
            2 => Ok(Activation::Swish),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Swish => "swish",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "swish" => Ok(Activation::Swish),
            other => Err(Error::Parse(format!(
                "unknown activation `{other}` (expected tanh, softplus or swish)"
            ))),
        }
    }
}

/// How `t` enters the network: the raw scalar, optionally followed by
/// `sin(2^k pi t), cos(2^k pi t)` for `k < n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TimeEmbedding {
    Raw,
    Sinusoidal(u32),
}

impl TimeEmbedding {
    pub fn width(self) -> usize {
        match self {
            TimeEmbedding::Raw => 1,
            TimeEmbedding::Sinusoidal(n) => 1 + 2 * n as usize,
        }
    }

    pub fn features(self, t: f64) -> Vec<f64> {
        let mut f = vec![t];
        if let TimeEmbedding::Sinusoidal(n) = self {
            for k in 0..n {
                let (s, c) = (std::f64::consts::PI * t * f64::from(1u32 << k)).sin_cos();
                f.push(s);
                f.push(c);
            }
        }
        f
    }
}

impl fmt::Display for TimeEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeEmbedding::Raw => f.write_str("raw"),
            TimeEmbedding::Sinusoidal(n) => write!(f, "sinusoidal:{n}"),
        }
    }
}

impl FromStr for TimeEmbedding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "raw" {
            return Ok(TimeEmbedding::Raw);
        }
        if let Some(n) = s.strip_prefix("sinusoidal:") {
            let n: u32 = n
                .parse()
                .map_err(|_| Error::Parse(format!("bad frequency count in `{s}`")))?;
            if n == 0 || n > 30 {
                return Err(Error::Parse(format!("frequency count must be in 1..=30, got {n}")));
            }
            return Ok(TimeEmbedding::Sinusoidal(n));
        }
        Err(Error::Parse(format!(
            "unknown time embedding `{s}` (expected raw or sinusoidal:<n>)"
        )))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub activation: Activation,
    pub time_embedding: TimeEmbedding,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            width: 64,
            activation: Activation::Tanh,
            time_embedding: TimeEmbedding::Raw,
        }
    }
}

impl MlpConfig {
    pub fn input_dim(&self, manifold: &Manifold) -> usize {
        manifold.ambient_dim() + manifold.factors().len() * self.time_embedding.width()
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 {
            return input("the MLP needs at least one hidden layer of positive width");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub n_in: usize,
    pub n_out: usize,
}

/// Flat parameter vector plus the per-layer layout that tiles it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub values: Vec<f64>,
    layout: Vec<LayerLayout>,
}

impl ParamStore {
    fn with_layout(sizes: &[usize]) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            layout.push(LayerLayout {
                weight_offset: offset,
                bias_offset: offset + n_in * n_out,
                n_in,
                n_out,
            });
            offset += n_in * n_out + n_out;
        }
        Self {
            values: vec![0.0; offset],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn layer(&self, l: usize) -> Affine<'_> {
        let lay = self.layout[l];
        Affine {
            weights: &self.values[lay.weight_offset..lay.bias_offset],
            bias: &self.values[lay.bias_offset..lay.bias_offset + lay.n_out],
            weight_offset: lay.weight_offset,
            bias_offset: lay.bias_offset,
            n_in: lay.n_in,
            n_out: lay.n_out,
        }
    }
}

/// A time-dependent vector field on a manifold that can be evaluated in any
/// [`Scalar`] arithmetic.
pub trait Field: Sync {
    fn manifold(&self) -> &Manifold;

    /// `v(t, x)` in ambient coordinates.
    fn forward<T: Scalar>(&self, t: f64, x: &[T]) -> Vec<T>;

    fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.forward(t, x)
    }

    /// Ambient divergence by one forward-mode pass per coordinate.
    fn divergence_exact(&self, t: f64, x: &[f64]) -> f64 {
        jacobian_trace_exact(|y: &[Dual<f64>]| self.forward(t, y), x)
    }

    /// `(v(t, x), div v(t, x))`.
    fn eval_with_divergence(&self, t: f64, x: &[f64]) -> (Vec<f64>, f64) {
        jacobian_trace_exact_with_output(|y: &[Dual<f64>]| self.forward(t, y), x)
    }

    fn divergence_hutchinson<R: Rng + ?Sized>(&self, t: f64, x: &[f64], probes: usize, rng: &mut R) -> f64 {
        jacobian_trace_hutchinson(|y: &[Dual<f64>]| self.forward(t, y), x, probes, rng)
    }
}

/// The MLP field with tangent projection on sphere factors.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    manifold: Manifold,
    config: MlpConfig,
    params: ParamStore,
}

impl VectorField {
    /// Fan-in scaled uniform hidden weights `U(+-sqrt(3 / n_in))`, zero biases
    /// and a zero output layer, so a fresh field is identically zero.
    pub fn init(config: MlpConfig, manifold: &Manifold, seed: u64) -> Result<Self> {
        let mut vf = Self::zeros(config, manifold)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_layers = vf.params.layout.len();
        for lay in &vf.params.layout[..n_layers - 1] {
            let a = (3.0 / lay.n_in as f64).sqrt();
            for w in &mut vf.params.values[lay.weight_offset..lay.bias_offset] {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(vf)
    }

    pub fn zeros(config: MlpConfig, manifold: &Manifold) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![config.input_dim(manifold)];
        sizes.extend(std::iter::repeat_n(config.width, config.hidden_layers));
        sizes.push(manifold.ambient_dim());
        Ok(Self {
            manifold: manifold.clone(),
            config,
            params: ParamStore::with_layout(&sizes),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Network input for time `t` and ambient point `x`.
    pub fn input_features<T: Scalar>(&self, t: f64, x: &[T]) -> Vec<T> {
        let tf = self.config.time_embedding.features(t);
        let mut inp = Vec::with_capacity(self.config.input_dim(&self.manifold));
        for (f, r) in self.manifold.blocks() {
            inp.extend(tf.iter().map(|&v| x[0].lift(v)));
            let xb = &x[r];
            match f {
                Factor::Euclidean(_) => inp.extend_from_slice(xb),
                Factor::Sphere(_) => {
                    let n = sq_norm(xb).sqrt();
                    inp.extend(xb.iter().map(|&c| c / n));
                }
            }
        }
        inp
    }

    /// Raw network output `w_theta` before projection.
    pub fn raw_output<T: Scalar>(&self, t: f64, x: &[T]) -> Vec<T> {
        let mut h = self.input_features(t, x);
        let last = self.params.layout.len() - 1;
        for l in 0..last {
            h = T::affine(&self.params.layer(l), &h, true);
            h = h.into_iter().map(|z| self.config.activation.apply(z)).collect();
        }
        T::affine(&self.params.layer(last), &h, true)
    }

    // Checkpoint IO.

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.manifold.to_string();
        let mut out = Vec::with_capacity(64 + m.len() + 8 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        out.extend_from_slice(m.as_bytes());
        out.extend_from_slice(&(self.config.hidden_layers as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.width as u32).to_le_bytes());
        out.push(self.config.activation.code());
        let (kind, freqs) = match self.config.time_embedding {
            TimeEmbedding::Raw => (0u8, 0u32),
            TimeEmbedding::Sinusoidal(n) => (1u8, n),
        };
        out.push(kind);
        out.extend_from_slice(&freqs.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mlen = r.u32()? as usize;
        let mstr = std::str::from_utf8(r.take(mlen)?)
            .map_err(|_| Error::Format("manifold string is not UTF-8".into()))?;
        let manifold: Manifold = mstr.parse()?;
        let hidden_layers = r.u32()? as usize;
        let width = r.u32()? as usize;
        let activation = Activation::from_code(r.u8()?)?;
        let kind = r.u8()?;
        let freqs = r.u32()?;
        let time_embedding = match kind {
            0 => TimeEmbedding::Raw,
            1 => TimeEmbedding::Sinusoidal(freqs),
            _ => return Err(Error::Format(format!("unknown time embedding code {kind}"))),
        };
        let config = MlpConfig {
            hidden_layers,
            width,
            activation,
            time_embedding,
        };
        let mut vf = Self::zeros(config, &manifold).map_err(|e| Error::Format(e.to_string()))?;
        let n = r.u64()? as usize;
        if n != vf.params.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n} parameters, architecture needs {}",
                vf.params.len()
            )));
        }
        for v in vf.params.values.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(vf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl Field for VectorField {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn forward<T: Scalar>(&self, t: f64, x: &[T]) -> Vec<T> {
        let mut w = self.raw_output(t, x);
        project_spheres(&self.manifold, x, &mut w);
        w
    }
}

/// `w <- (I - x x^T / |x|^2) w` on every sphere block.
pub fn project_spheres<T: Scalar>(manifold: &Manifold, x: &[T], w: &mut [T]) {
    for (f, r) in manifold.blocks() {
        if f.is_sphere() {
            let (xb, wb) = (&x[r.clone()], &mut w[r]);
            let xw = xb.iter().zip(wb.iter()).fold(xb[0].lift(0.0), |a, (p, q)| a + *p * *q);
            let s = xw / sq_norm(xb);
            wb.iter_mut().zip(xb).for_each(|(wi, xi)| *wi = *wi - s * *xi);
        }
    }
}

fn sq_norm<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(x[0].lift(0.0), |a, &c| a + c * c)
}

/// `v(t, x) = A x + b` on a Euclidean space; `a` is row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineField {
    manifold: Manifold,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl AffineField {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let d = b.len();
        if d == 0 || a.len() != d * d {
            return input(format!("affine field needs a {d}x{d} matrix, got {} entries", a.len()));
        }
        Ok(Self {
            manifold: Manifold::euclidean(d),
            a,
            b,
        })
    }

    pub fn constant(c: Vec<f64>) -> Self {
        let d = c.len();
        Self::new(vec![0.0; d * d], c).expect("square by construction")
    }

    /// `v(x) = s x`.
    pub fn radial(d: usize, s: f64) -> Self {
        let mut a = vec![0.0; d * d];
        (0..d).for_each(|i| a[i * d + i] = s);
        Self::new(a, vec![0.0; d]).expect("square by construction")
    }

    pub fn zero(d: usize) -> Self {
        Self::constant(vec![0.0; d])
    }
}

impl Field for AffineField {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn forward<T: Scalar>(&self, _t: f64, x: &[T]) -> Vec<T> {
        let d = self.b.len();
        (0..d)
            .map(|i| {
                self.a[i * d..(i + 1) * d]
                    .iter()
                    .zip(x)
                    .fold(x[0].lift(self.b[i]), |acc, (aij, xj)| acc + *xj * *aij)
            })
            .collect()
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
