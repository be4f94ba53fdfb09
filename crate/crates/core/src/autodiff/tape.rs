use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{sigmoid, softplus, Affine, Scalar};
use crate::error::{Error, Result};

const CONST: u32 = u32::MAX;

#[derive(Clone, Copy, Debug)]
enum Node {
    Leaf,
    Param(u32),
    Unary(u32, f64),
    Binary(u32, u32, f64, f64),
    /// First output of a fused affine record; carries the whole layer backward.
    AffineHead(u32),
    AffineBody,
}

/// `sets` input vectors pushed through one weight matrix. Set `s` reads
/// inputs `inputs + s * n_in ..` and writes outputs `first_out + s * n_out ..`;
/// only set 0 gets the bias.
#[derive(Clone, Debug)]
struct AffineRecord {
    weight_offset: usize,
    bias_offset: Option<usize>,
    n_in: usize,
    n_out: usize,
    sets: usize,
    inputs: usize,
    first_out: u32,
}

#[derive(Default)]
struct TapeData {
    nodes: Vec<Node>,
    values: Vec<f64>,
    affines: Vec<AffineRecord>,
    input_idx: Vec<u32>,
    input_val: Vec<f64>,
}

/// Append-only record of scalar operations.
///
/// The tape owns a copy of the parameter vector; [`Affine`] layers recorded on
/// it read their weights from there and backpropagate into parameter slots.
pub struct Tape {
    params: Vec<f64>,
    data: RefCell<TapeData>,
}

/// A scalar recorded on a [`Tape`]. Constants are not recorded.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.idx == CONST {
            write!(f, "Var(const {})", self.val)
        } else {
            write!(f, "Var(#{} = {})", self.idx, self.val)
        }
    }
}

impl Tape {
    pub fn new(params: &[f64]) -> Self {
        Self {
            params: params.to_vec(),
            data: RefCell::default(),
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        self.params.clear();
        self.params.extend_from_slice(params);
        self.clear();
    }

    /// Drop all recorded nodes, keeping allocations.
    pub fn clear(&mut self) {
        let d = self.data.get_mut();
        d.nodes.clear();
        d.values.clear();
        d.affines.clear();
        d.input_idx.clear();
        d.input_val.clear();
    }

    pub fn len(&self) -> usize {
        self.data.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node, val: f64) -> Var<'_> {
        let mut d = self.data.borrow_mut();
        let idx = d.nodes.len() as u32;
        d.nodes.push(node);
        d.values.push(val);
        Var {
            tape: self,
            idx,
            val,
        }
    }

    /// An independent input (not a parameter).
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Node::Leaf, value)
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: CONST,
            val: value,
        }
    }

    /// The parameter in slot `i`, recorded so that its adjoint reaches the gradient.
    pub fn param(&self, i: usize) -> Var<'_> {
        self.push(Node::Param(i as u32), self.params[i])
    }

    fn unary(&self, a: Var<'_>, da: f64, val: f64) -> Var<'_> {
        if a.idx == CONST {
            self.constant(val)
        } else {
            self.push(Node::Unary(a.idx, da), val)
        }
    }

    fn binary(&self, a: Var<'_>, b: Var<'_>, da: f64, db: f64, val: f64) -> Var<'_> {
        match (a.idx == CONST, b.idx == CONST) {
            (true, true) => self.constant(val),
            (true, false) => self.push(Node::Unary(b.idx, db), val),
            (false, true) => self.push(Node::Unary(a.idx, da), val),
            (false, false) => self.push(Node::Binary(a.idx, b.idx, da, db), val),
        }
    }

    fn affine_sets<'t>(&'t self, layer: &Affine<'_>, sets: &[Vec<Var<'t>>], with_bias: bool) -> Vec<Vec<Var<'t>>> {
        let (n_in, n_out, k) = (layer.n_in, layer.n_out, sets.len());
        assert!(k > 0, "affine layer with no input sets");
        let w = &self.params[layer.weight_offset..layer.weight_offset + n_in * n_out];
        let b = &self.params[layer.bias_offset..layer.bias_offset + n_out];
        let mut d = self.data.borrow_mut();
        let inputs = d.input_idx.len();
        for x in sets {
            assert_eq!(x.len(), n_in, "affine input length");
            d.input_idx.extend(x.iter().map(|v| v.idx));
            d.input_val.extend(x.iter().map(|v| v.val));
        }
        let first_out = d.nodes.len() as u32;
        let rec = d.affines.len() as u32;
        d.affines.push(AffineRecord {
            weight_offset: layer.weight_offset,
            bias_offset: with_bias.then_some(layer.bias_offset),
            n_in,
            n_out,
            sets: k,
            inputs,
            first_out,
        });
        let mut outs = vec![0.0; k * n_out];
        {
            let xv = &d.input_val[inputs..inputs + k * n_in];
            for (j, row) in w.chunks_exact(n_in).enumerate() {
                for s in 0..k {
                    let b0 = if with_bias && s == 0 { b[j] } else { 0.0 };
                    outs[s * n_out + j] = b0 + super::dot8(row, &xv[s * n_in..(s + 1) * n_in]);
                }
            }
        }
        for (j, &val) in outs.iter().enumerate() {
            d.nodes.push(if j == 0 {
                Node::AffineHead(rec)
            } else {
                Node::AffineBody
            });
            d.values.push(val);
        }
        drop(d);
        outs.chunks_exact(n_out)
            .enumerate()
            .map(|(s, chunk)| {
                chunk
                    .iter()
                    .enumerate()
                    .map(|(j, &val)| Var {
                        tape: self,
                        idx: first_out + (s * n_out + j) as u32,
                        val,
                    })
                    .collect()
            })
            .collect()
    }

    /// Backpropagate `seed * d(output)` into `param_grads` (accumulating).
    pub fn backward_into(&self, output: Var<'_>, seed: f64, param_grads: &mut [f64]) -> Result<()> {
        assert!(std::ptr::eq(output.tape, self), "variable from another tape");
        assert_eq!(param_grads.len(), self.params.len(), "gradient buffer length");
        if output.idx == CONST {
            return Ok(());
        }
        let d = self.data.borrow();
        let mut adj = vec![0.0; output.idx as usize + 1];
        adj[output.idx as usize] = seed;
        for i in (0..=output.idx as usize).rev() {
            let g = adj[i];
            match d.nodes[i] {
                Node::Leaf | Node::AffineBody => {}
                Node::Param(slot) => param_grads[slot as usize] += g,
                Node::Unary(a, da) => adj[a as usize] += g * da,
                Node::Binary(a, b, da, db) => {
                    adj[a as usize] += g * da;
                    adj[b as usize] += g * db;
                }
                Node::AffineHead(rec) => {
                    let r = &d.affines[rec as usize];
                    let first = r.first_out as usize;
                    let mut gs = vec![0.0; r.sets];
                    let mut gin = vec![0.0; r.sets * r.n_in];
                    for j in 0..r.n_out {
                        for (s, g) in gs.iter_mut().enumerate() {
                            *g = adj.get(first + s * r.n_out + j).copied().unwrap_or(0.0);
                        }
                        if let Some(bo) = r.bias_offset {
                            param_grads[bo + j] += gs[0];
                        }
                        let wo = r.weight_offset + j * r.n_in;
                        let row = &self.params[wo..wo + r.n_in];
                        for (s, &gj) in gs.iter().enumerate() {
                            if gj != 0.0 {
                                let lo = r.inputs + s * r.n_in;
                                super::axpy8(&mut param_grads[wo..wo + r.n_in], gj, &d.input_val[lo..lo + r.n_in]);
                                super::axpy8(&mut gin[s * r.n_in..(s + 1) * r.n_in], gj, row);
                            }
                        }
                    }
                    scatter(&mut adj, &d.input_idx[r.inputs..r.inputs + r.sets * r.n_in], &gin);
                }
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite adjoint at tape node {i}")));
            }
        }
        Ok(())
    }

    /// Gradient of `output` with respect to every parameter slot.
    pub fn gradient(&self, output: Var<'_>) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.params.len()];
        self.backward_into(output, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adjoints of arbitrary recorded variables (e.g. [`Tape::var`] inputs).
    pub fn adjoints(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>> {
        let n = self.len();
        let mut adj = vec![0.0; n];
        if output.idx != CONST {
            adj[output.idx as usize] = 1.0;
        }
        let d = self.data.borrow();
        for i in (0..n).rev() {
            let g = adj[i];
            match d.nodes[i] {
                Node::Leaf | Node::AffineBody | Node::Param(_) => {}
                Node::Unary(a, da) => adj[a as usize] += g * da,
                Node::Binary(a, b, da, db) => {
                    adj[a as usize] += g * da;
                    adj[b as usize] += g * db;
                }
                Node::AffineHead(rec) => {
                    let r = &d.affines[rec as usize];
                    let mut gin = vec![0.0; r.sets * r.n_in];
                    for s in 0..r.sets {
                        for j in 0..r.n_out {
                            let gj = adj[r.first_out as usize + s * r.n_out + j];
                            if gj != 0.0 {
                                let wo = r.weight_offset + j * r.n_in;
                                super::axpy8(&mut gin[s * r.n_in..(s + 1) * r.n_in], gj, &self.params[wo..wo + r.n_in]);
                            }
                        }
                    }
                    scatter(&mut adj, &d.input_idx[r.inputs..r.inputs + r.sets * r.n_in], &gin);
                }
            }
        }
        if adj.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numeric("non-finite adjoint".into()));
        }
        Ok(wrt
            .iter()
            .map(|v| if v.idx == CONST { 0.0 } else { adj[v.idx as usize] })
            .collect())
    }
}

/// `adj[idx[i]] += g[i]`, skipping constants.
fn scatter(adj: &mut [f64], idx: &[u32], g: &[f64]) {
    for (&k, &gi) in idx.iter().zip(g) {
        if k != CONST {
            adj[k as usize] += gi;
        }
    }
}

/// Evaluate `f(theta)` on a fresh tape and return its value and gradient.
pub fn gradient<F>(params: &[f64], f: F) -> (f64, Vec<f64>)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new(params);
    let theta: Vec<Var<'_>> = (0..params.len()).map(|i| tape.param(i)).collect();
    let out = f(&tape, &theta);
    let grad = tape.gradient(out).expect("non-finite gradient");
    (out.val, grad)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_constant(&self) -> bool {
        self.idx == CONST
    }
}

impl<'t> Add for Var<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, 1.0, 1.0, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(self, rhs, 1.0, -1.0, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs, rhs.val, self.val, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.tape.binary(self, rhs, 1.0 / rhs.val, -q / rhs.val, q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.tape.unary(self, -1.0, -self.val)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Self;
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self, 1.0, self.val + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Self;
    fn sub(self, rhs: f64) -> Self {
        self.tape.unary(self, 1.0, self.val - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.tape.unary(self, rhs, self.val * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self.tape.unary(self, 1.0 / rhs, self.val / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(&self) -> f64 {
        self.val
    }

    fn lift(&self, c: f64) -> Self {
        self.tape.constant(c)
    }

    fn exp(self) -> Self {
        let y = self.val.exp();
        self.tape.unary(self, y, y)
    }

    fn ln(self) -> Self {
        self.tape.unary(self, 1.0 / self.val, self.val.ln())
    }

    fn sqrt(self) -> Self {
        let y = self.val.sqrt();
        self.tape.unary(self, 0.5 / y, y)
    }

    fn tanh(self) -> Self {
        let y = self.val.tanh();
        self.tape.unary(self, 1.0 - y * y, y)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.val);
        self.tape.unary(self, s * (1.0 - s), s)
    }

    fn softplus(self) -> Self {
        self.tape
            .unary(self, sigmoid(self.val), softplus(self.val))
    }

    fn one_minus_square(self) -> Self {
        self.tape
            .unary(self, -2.0 * self.val, 1.0 - self.val * self.val)
    }

    fn affine(layer: &Affine<'_>, x: &[Self], with_bias: bool) -> Vec<Self> {
        let tape = x.first().expect("affine layer with no inputs").tape;
        tape.affine_sets(layer, &[x.to_vec()], with_bias).pop().expect("one set")
    }

    fn affine_sets(layer: &Affine<'_>, sets: &[Vec<Self>], with_bias: bool) -> Vec<Vec<Self>> {
        let tape = sets[0].first().expect("affine layer with no inputs").tape;
        tape.affine_sets(layer, sets, with_bias)
    }
}
