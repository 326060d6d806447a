//! Small fully connected networks for the potential energy and the input
//! matrix, with hand-written reverse-mode passes.
//!
//! Parameters are stored flat (`w` row-major, then `b`, layer after layer)
//! so gradients and optimizer state are plain vectors of the same layout.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputMatrix, Potential};
use crate::error::{check_dim, Error, Result};
use crate::json;

/// Hidden layer widths of both models.
pub const HIDDEN: [usize; 2] = [32, 32];
/// Standard deviation of the initial weights.
pub const INIT_STD: f64 = 0.01;

#[inline]
pub fn celu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

#[inline]
fn celu_d1(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

#[inline]
fn celu_d2(z: f64) -> f64 {
    if z > 0.0 {
        0.0
    } else {
        z.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    /// Offset of the weights in the flat buffer; biases follow them.
    offset: usize,
}

impl LayerShape {
    fn w_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }
    fn b_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.fan_in * self.fan_out;
        s..s + self.fan_out
    }
}

/// Multilayer perceptron with celu hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shapes: Vec<LayerShape>,
    data: Vec<f64>,
}

/// Per-layer activations recorded during a forward pass.
struct Tape {
    /// `acts[0]` is the input, `acts[l + 1] = celu(zs[l])` for hidden layers.
    acts: Vec<Vec<f64>>,
    zs: Vec<Vec<f64>>,
}

// y += W x
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n = x.len();
    for (yi, row) in y.iter_mut().zip(w.chunks_exact(n)) {
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// y += Wᵀ x
#[inline]
fn matvec_t_acc(w: &[f64], x: &[f64], y: &mut [f64]) {
    let n = y.len();
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        if *xi != 0.0 {
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
    }
}

// W += a bᵀ
#[inline]
fn outer_acc(w: &mut [f64], a: &[f64], b: &[f64]) {
    let n = b.len();
    for (ai, row) in a.iter().zip(w.chunks_exact_mut(n)) {
        if *ai != 0.0 {
            for (wij, bj) in row.iter_mut().zip(b) {
                *wij += ai * bj;
            }
        }
    }
}

impl MlpParams {
    /// All-zero network with the given layer sizes (`[in, hidden.., out]`).
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut shapes = Vec::with_capacity(sizes.len() - 1);
        let mut offset = 0;
        for pair in sizes.windows(2) {
            shapes.push(LayerShape {
                fan_in: pair[0],
                fan_out: pair[1],
                offset,
            });
            offset += pair[0] * pair[1] + pair[1];
        }
        Self {
            shapes,
            data: vec![0.0; offset],
        }
    }

    /// Weights drawn from `Normal(0, std²)`, biases zero.
    pub fn random(sizes: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        let mut p = Self::zeros(sizes);
        let normal = Normal::new(0.0, std).expect("positive std");
        for shape in p.shapes.clone() {
            for w in &mut p.data[shape.w_range()] {
                *w = normal.sample(rng);
            }
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.shapes[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.shapes.last().expect("non-empty").fan_out
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    /// `[in, hidden.., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.in_dim()];
        s.extend(self.shapes.iter().map(|l| l.fan_out));
        s
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Per-layer parameter counts (weights plus biases).
    pub fn layer_param_counts(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .map(|l| l.fan_in * l.fan_out + l.fan_out)
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same shape, new flat values.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        check_dim("mlp parameters", self.data.len(), values.len())?;
        Ok(Self {
            shapes: self.shapes.clone(),
            data: values.to_vec(),
        })
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        &self.data[self.shapes[layer].w_range()]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        &self.data[self.shapes[layer].b_range()]
    }

    fn run(&self, x: &[f64]) -> Tape {
        let last = self.shapes.len() - 1;
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        let mut zs = Vec::with_capacity(self.shapes.len());
        acts.push(x.to_vec());
        for (l, shape) in self.shapes.iter().enumerate() {
            let mut z = self.data[shape.b_range()].to_vec();
            matvec_acc(&self.data[shape.w_range()], &acts[l], &mut z);
            if l < last {
                acts.push(z.iter().map(|&v| celu(v)).collect());
            }
            zs.push(z);
        }
        Tape { acts, zs }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.in_dim(), x.len())?;
        Ok(self.run(x).zs.pop().expect("output layer"))
    }

    /// Gradient-pass deltas for a fixed output cotangent `y_bar`:
    /// `deltas[l]` is the cotangent of `zs[l]`, `es[l]` that of `acts[l]`.
    fn grad_pass(&self, tape: &Tape, y_bar: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let nl = self.shapes.len();
        let mut deltas = vec![Vec::new(); nl];
        let mut es = vec![Vec::new(); nl];
        deltas[nl - 1] = y_bar.to_vec();
        for l in (0..nl).rev() {
            let shape = self.shapes[l];
            let mut e = vec![0.0; shape.fan_in];
            matvec_t_acc(&self.data[shape.w_range()], &deltas[l], &mut e);
            if l > 0 {
                deltas[l - 1] = e
                    .iter()
                    .zip(&tape.zs[l - 1])
                    .map(|(ei, &z)| ei * celu_d1(z))
                    .collect();
            }
            es[l] = e;
        }
        (deltas, es)
    }

    /// `∇ₓ (y_barᵀ f(x))`.
    pub fn grad_input(&self, x: &[f64], y_bar: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.in_dim(), x.len())?;
        check_dim("mlp upstream", self.out_dim(), y_bar.len())?;
        let tape = self.run(x);
        let (_, mut es) = self.grad_pass(&tape, y_bar);
        Ok(es.swap_remove(0))
    }

    /// `∇_θ (y_barᵀ f(x))` in the same shape as the parameters.
    pub fn grad_params(&self, x: &[f64], y_bar: &[f64]) -> Result<MlpParams> {
        check_dim("mlp input", self.in_dim(), x.len())?;
        check_dim("mlp upstream", self.out_dim(), y_bar.len())?;
        let mut g = MlpParams::zeros(&self.sizes());
        self.vjp_into(x, y_bar, &mut g.data, None);
        Ok(g)
    }

    /// Standard reverse pass: accumulates `∇_θ (y_barᵀ f)` into `grad` and,
    /// when given, `∇ₓ (y_barᵀ f)` into `x_bar`.
    pub(crate) fn vjp_into(&self, x: &[f64], y_bar: &[f64], grad: &mut [f64], x_bar: Option<&mut [f64]>) {
        let tape = self.run(x);
        let (deltas, es) = self.grad_pass(&tape, y_bar);
        for (l, shape) in self.shapes.iter().enumerate() {
            outer_acc(&mut grad[shape.w_range()], &deltas[l], &tape.acts[l]);
            for (g, d) in grad[shape.b_range()].iter_mut().zip(&deltas[l]) {
                *g += d;
            }
        }
        if let Some(xb) = x_bar {
            for (a, b) in xb.iter_mut().zip(&es[0]) {
                *a += b;
            }
        }
    }

    /// Reverse pass through the input gradient itself.
    ///
    /// With `g(x, θ) = ∇ₓ (y_barᵀ f(x; θ))`, accumulates
    /// `∇_θ (g_barᵀ g)` into `grad` and `∇ₓ (g_barᵀ g)` into `x_bar`.
    /// Returns `g` as a by-product.
    pub(crate) fn grad_input_vjp(
        &self,
        x: &[f64],
        y_bar: &[f64],
        g_bar: &[f64],
        grad: &mut [f64],
        x_bar: &mut [f64],
    ) -> Vec<f64> {
        let nl = self.shapes.len();
        let tape = self.run(x);
        let (deltas, es) = self.grad_pass(&tape, y_bar);

        // Reverse the gradient pass, layer 0 upwards.
        let mut z_bar: Vec<Vec<f64>> = self.shapes.iter().map(|s| vec![0.0; s.fan_out]).collect();
        let mut e_bar = g_bar.to_vec();
        for l in 0..nl {
            let shape = self.shapes[l];
            let w = shape.w_range();
            outer_acc(&mut grad[w.clone()], &deltas[l], &e_bar);
            if l == nl - 1 {
                break;
            }
            let mut d_bar = vec![0.0; shape.fan_out];
            matvec_acc(&self.data[w], &e_bar, &mut d_bar);
            // deltas[l] = celu'(zs[l]) ⊙ es[l + 1]
            let z = &tape.zs[l];
            let e_next = &es[l + 1];
            let mut next = vec![0.0; shape.fan_out];
            for i in 0..shape.fan_out {
                next[i] = celu_d1(z[i]) * d_bar[i];
                z_bar[l][i] += celu_d2(z[i]) * e_next[i] * d_bar[i];
            }
            e_bar = next;
        }

        // Ordinary backprop of the collected z cotangents.
        if nl >= 2 {
            let mut carry: Vec<f64> = Vec::new();
            for l in (0..nl - 1).rev() {
                let shape = self.shapes[l];
                let mut zb = std::mem::take(&mut z_bar[l]);
                if !carry.is_empty() {
                    for i in 0..shape.fan_out {
                        zb[i] += celu_d1(tape.zs[l][i]) * carry[i];
                    }
                }
                outer_acc(&mut grad[shape.w_range()], &zb, &tape.acts[l]);
                for (g, d) in grad[shape.b_range()].iter_mut().zip(&zb) {
                    *g += d;
                }
                let mut a_bar = vec![0.0; shape.fan_in];
                matvec_t_acc(&self.data[shape.w_range()], &zb, &mut a_bar);
                carry = a_bar;
            }
            for (a, b) in x_bar.iter_mut().zip(&carry) {
                *a += b;
            }
        }
        es.into_iter().next().expect("input layer")
    }
}

/// Network with the standard hidden widths and seeded Normal(0, 0.01²)
/// weights.
pub fn init_mlp(in_dim: usize, out_dim: usize, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlpParams::random(&[in_dim, HIDDEN[0], HIDDEN[1], out_dim], INIT_STD, &mut rng)
}

/// Learnable dynamics quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    /// Square roots of the point masses, one per keypoint.
    pub sqrt_masses: Vec<f64>,
    /// Scalar potential energy network on the `k`-dimensional state.
    pub potential: MlpParams,
    /// Input-matrix network with `k · l` outputs, `None` when `l = 0`.
    pub input_model: Option<MlpParams>,
    pub seed: u64,
}

impl DynamicsParams {
    /// Unit masses and freshly initialized networks. The two networks use
    /// independent seeds derived from `seed`.
    pub fn init(k: usize, l: usize, seed: u64) -> Self {
        let potential = init_mlp(k, 1, crate::rng::derive_seed(seed, "potential"));
        let input_model = (l > 0).then(|| init_mlp(k, k * l, crate::rng::derive_seed(seed, "input_model")));
        Self {
            sqrt_masses: vec![1.0; k / 2],
            potential,
            input_model,
            seed,
        }
    }

    pub fn k(&self) -> usize {
        self.potential.in_dim()
    }

    pub fn l(&self) -> usize {
        self.input_model
            .as_ref()
            .map_or(0, |g| g.out_dim() / self.k().max(1))
    }

    pub fn param_count(&self) -> usize {
        self.sqrt_masses.len()
            + self.potential.param_count()
            + self.input_model.as_ref().map_or(0, MlpParams::param_count)
    }

    /// Layout: sqrt masses, potential, input model.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.sqrt_masses);
        out.extend_from_slice(self.potential.as_slice());
        if let Some(g) = &self.input_model {
            out.extend_from_slice(g.as_slice());
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        check_dim("flat dynamics parameters", self.param_count(), flat.len())?;
        let nm = self.sqrt_masses.len();
        let np = self.potential.param_count();
        Ok(Self {
            sqrt_masses: flat[..nm].to_vec(),
            potential: self.potential.with_values(&flat[nm..nm + np])?,
            input_model: match &self.input_model {
                Some(g) => Some(g.with_values(&flat[nm + np..])?),
                None => None,
            },
            seed: self.seed,
        })
    }

    /// Offsets of the three blocks in the flat layout.
    pub fn offsets(&self) -> (usize, usize, usize) {
        let nm = self.sqrt_masses.len();
        (0, nm, nm + self.potential.param_count())
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string_pretty(&ParamsWire::from(self))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: ParamsWire = serde_json::from_str(s)?;
        wire.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `V(x)` evaluated through the learned potential network.
pub fn potential_value(params: &DynamicsParams, x: &[f64]) -> Result<f64> {
    Ok(params.potential.forward(x)?[0])
}

/// `g(x)` reshaped row-major into `k × l`.
pub fn input_matrix_value(params: &DynamicsParams, x: &[f64]) -> Result<DMatrix<f64>> {
    let k = params.k();
    check_dim("input matrix state", k, x.len())?;
    match &params.input_model {
        Some(g) => Ok(DMatrix::from_row_slice(k, params.l(), &g.forward(x)?)),
        None => Ok(DMatrix::zeros(k, 0)),
    }
}

impl Potential for MlpParams {
    fn energy(&self, x: &[f64]) -> f64 {
        self.run(x).zs.pop().expect("output")[0]
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let tape = self.run(x);
        let (_, mut es) = self.grad_pass(&tape, &[1.0]);
        es.swap_remove(0)
    }
}

/// Learned input matrix: an MLP with `k · l` outputs viewed as `k × l`.
#[derive(Debug, Clone, Copy)]
pub struct MlpInputMatrix<'a> {
    pub net: Option<&'a MlpParams>,
    pub k: usize,
    pub l: usize,
}

impl InputMatrix for MlpInputMatrix<'_> {
    fn actuators(&self) -> usize {
        self.l
    }

    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        match self.net {
            Some(net) => DMatrix::from_row_slice(self.k, self.l, &net.run(x).zs.pop().expect("output")),
            None => DMatrix::zeros(self.k, self.l),
        }
    }

    fn force(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.k];
        if let Some(net) = self.net {
            let out = net.run(x).zs.pop().expect("output");
            for (fi, row) in f.iter_mut().zip(out.chunks_exact(self.l)) {
                *fi = row.iter().zip(u).map(|(a, b)| a * b).sum();
            }
        }
        f
    }
}

// ---------------------------------------------------------------------------
// JSON wire format

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerWire {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpWire {
    layers: Vec<LayerWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaWire {
    k: usize,
    l: usize,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsWire {
    sqrt_masses: Vec<f64>,
    potential: MlpWire,
    input_model: Option<MlpWire>,
    meta: MetaWire,
}

impl From<&MlpParams> for MlpWire {
    fn from(p: &MlpParams) -> Self {
        MlpWire {
            layers: (0..p.num_layers())
                .map(|l| LayerWire {
                    w: p.weights(l).chunks(p.shapes[l].fan_in).map(<[f64]>::to_vec).collect(),
                    b: p.biases(l).to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpWire> for MlpParams {
    type Error = Error;

    fn try_from(w: MlpWire) -> Result<Self> {
        let first = w
            .layers
            .first()
            .ok_or_else(|| Error::Format("network without layers".into()))?;
        let mut sizes = vec![first.w.first().map_or(0, Vec::len)];
        for layer in &w.layers {
            sizes.push(layer.b.len());
        }
        let mut p = MlpParams::zeros(&sizes);
        let mut flat = Vec::with_capacity(p.param_count());
        for (l, layer) in w.layers.into_iter().enumerate() {
            let shape = p.shapes[l];
            if layer.w.len() != shape.fan_out || layer.w.iter().any(|r| r.len() != shape.fan_in) {
                return Err(Error::Format(format!("layer {l} weight shape mismatch")));
            }
            flat.extend(layer.w.into_iter().flatten());
            flat.extend(layer.b);
        }
        p.data = flat;
        Ok(p)
    }
}

impl From<&DynamicsParams> for ParamsWire {
    fn from(p: &DynamicsParams) -> Self {
        ParamsWire {
            sqrt_masses: p.sqrt_masses.clone(),
            potential: (&p.potential).into(),
            input_model: p.input_model.as_ref().map(Into::into),
            meta: MetaWire {
                k: p.k(),
                l: p.l(),
                seed: p.seed,
            },
        }
    }
}

impl TryFrom<ParamsWire> for DynamicsParams {
    type Error = Error;

    fn try_from(w: ParamsWire) -> Result<Self> {
        let potential = MlpParams::try_from(w.potential)?;
        let input_model = w.input_model.map(MlpParams::try_from).transpose()?;
        let p = DynamicsParams {
            sqrt_masses: w.sqrt_masses,
            potential,
            input_model,
            seed: w.meta.seed,
        };
        if p.k() != w.meta.k || p.l() != w.meta.l || p.potential.out_dim() != 1 {
            return Err(Error::Format(format!(
                "meta (k = {}, l = {}) disagrees with network shapes",
                w.meta.k, w.meta.l
            )));
        }
        if p.sqrt_masses.len() * 2 != p.k() {
            return Err(Error::Format("one square-root mass per keypoint expected".into()));
        }
        if let Some(g) = &p.input_model {
            if g.in_dim() != p.k() || g.out_dim() != p.k() * w.meta.l {
                return Err(Error::Format("input model shape disagrees with meta".into()));
            }
        }
        Ok(p)
    }
}
