//! Small dense networks with hand-written reverse mode.
//!
//! Activations are batched row-major (`batch × width`). Forward passes can
//! carry tangents (directional derivatives with respect to the input), and the
//! reverse pass differentiates through both the primal and the tangent values,
//! which is what gradients of Jacobian-dependent losses need.

use crate::error::{Result, VpError};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Silu,
    Elu,
}

impl Activation {
    /// (value, first derivative, second derivative).
    #[inline]
    pub fn eval3(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Identity => (z, 1.0, 0.0),
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                let d = s * (1.0 + z * (1.0 - s));
                let dd = s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s));
                (z * s, d, dd)
            }
            Activation::Elu => {
                if z > 0.0 {
                    (z, 1.0, 0.0)
                } else {
                    let e = z.exp();
                    (e - 1.0, e, e)
                }
            }
        }
    }

    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        self.eval3(z).0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Composition of affine maps each followed by an activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer parameter gradients, same shapes as the net.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl DenseGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.flatten_into(&mut v);
        v
    }
}

/// Values saved by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    input_tangents: Vec<Vec<Array2<f64>>>,
    pre_tangents: Vec<Vec<Array2<f64>>>,
}

/// Output of a batched forward pass.
pub struct Forward {
    pub output: Array2<f64>,
    pub tangents: Vec<Array2<f64>>,
    pub cache: ForwardCache,
}

/// Input adjoints returned by the reverse pass.
pub struct Backward {
    pub input: Array2<f64>,
    pub input_tangents: Vec<Array2<f64>>,
}

impl DenseNet {
    /// Layers of the given widths with fan-in uniform initialization
    /// U(−√(3/fan_in), √(3/fan_in)) and zero biases. `activations` has one
    /// entry per layer.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(crate::error::invalid("widths", "need one activation per layer"));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, act)| {
                let bound = (3.0 / w[0] as f64).sqrt();
                DenseLayer {
                    weight: Array2::from_shape_fn((w[1], w[0]), |_| rng.gen_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                    activation: *act,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let net = Self { layers };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(crate::error::invalid("layers", "empty network"));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(crate::error::invalid("layers", format!("layer {} output does not match layer {} input", i, i + 1)));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.out_dim() {
                return Err(crate::error::invalid("layers", "bias length differs from output width"));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(VpError::NonFinite("network parameter".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.params_into(&mut v);
        v
    }

    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Reads parameters from the front of `flat`, returning how many were consumed.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<usize> {
        if flat.len() < self.num_params() {
            return Err(VpError::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        Ok(k)
    }

    /// Batched forward pass. Each tangent is a `batch × input_dim` array of
    /// input directions.
    pub fn forward_batch(&self, x: &Array2<f64>, tangents: &[Array2<f64>]) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(VpError::DimensionMismatch { expected: self.input_dim(), got: x.ncols() });
        }
        let n = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            input_tangents: Vec::with_capacity(n),
            pre_tangents: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        let mut ht: Vec<Array2<f64>> = tangents.to_vec();
        for l in &self.layers {
            let mut z = h.dot(&l.weight.t());
            z += &l.bias;
            let zt: Vec<Array2<f64>> = ht.iter().map(|t| t.dot(&l.weight.t())).collect();
            let mut y = z.clone();
            let mut yt = zt.clone();
            if l.activation != Activation::Identity {
                let mut deriv = z.clone();
                ndarray::Zip::from(&mut y).and(&mut deriv).for_each(|yv, dv| {
                    let (a, d, _) = l.activation.eval3(*yv);
                    *yv = a;
                    *dv = d;
                });
                for t in &mut yt {
                    *t *= &deriv;
                }
            }
            cache.inputs.push(std::mem::replace(&mut h, y));
            cache.pre.push(z);
            cache.input_tangents.push(std::mem::replace(&mut ht, yt));
            cache.pre_tangents.push(zt);
        }
        Ok(Forward { output: h, tangents: ht, cache })
    }

    /// Reverse pass. `out_adj` is the adjoint of the output and
    /// `out_tangent_adj` the adjoints of the output tangents (empty or one per
    /// tangent). Parameter gradients are accumulated into `grads`.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        out_adj: &Array2<f64>,
        out_tangent_adj: &[Array2<f64>],
        grads: &mut DenseGrads,
    ) -> Backward {
        let mut ybar = out_adj.clone();
        let with_t = !out_tangent_adj.is_empty();
        let mut ytbar: Vec<Array2<f64>> = out_tangent_adj.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[li];
            let (zbar, ztbar) = if l.activation == Activation::Identity {
                (ybar, ytbar)
            } else {
                let mut d1 = z.clone();
                let mut d2 = z.clone();
                ndarray::Zip::from(&mut d1).and(&mut d2).for_each(|a, b| {
                    let (_, d, dd) = l.activation.eval3(*a);
                    *a = d;
                    *b = dd;
                });
                let mut zbar = ybar * &d1;
                if with_t {
                    for (tb, zt) in ytbar.iter().zip(&cache.pre_tangents[li]) {
                        zbar = zbar + &(tb * zt * &d2);
                    }
                }
                let ztbar: Vec<Array2<f64>> = ytbar.iter().map(|tb| tb * &d1).collect();
                (zbar, ztbar)
            };
            let (gw, gb) = &mut grads.layers[li];
            gw.scaled_add(1.0, &zbar.t().dot(&cache.inputs[li]));
            *gb += &zbar.sum_axis(Axis(0));
            if with_t {
                for (zt, ht) in ztbar.iter().zip(&cache.input_tangents[li]) {
                    gw.scaled_add(1.0, &zt.t().dot(ht));
                }
            }
            ybar = zbar.dot(&l.weight);
            ytbar = ztbar.iter().map(|zt| zt.dot(&l.weight)).collect();
        }
        Backward { input: ybar, input_tangents: ytbar }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| VpError::NonFinite(e.to_string()))?;
        Ok(self.forward_batch(&xb, &[])?.output.row(0).to_vec())
    }

    /// Gradient of `upstream · forward(x)` with respect to the input and the
    /// flattened parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(VpError::DimensionMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| VpError::NonFinite(e.to_string()))?;
        let fwd = self.forward_batch(&xb, &[])?;
        let ub = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("shape");
        let mut g = DenseGrads::zeros_like(self);
        let back = self.backward_batch(&fwd.cache, &ub, &[], &mut g);
        Ok((back.input.row(0).to_vec(), g.flatten()))
    }

    /// Exact input Jacobian (`output_dim × input_dim`) by forward tangents.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Array2<f64>> {
        let d = self.input_dim();
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|e| VpError::NonFinite(e.to_string()))?;
        let tangents: Vec<Array2<f64>> = (0..d)
            .map(|j| Array2::from_shape_fn((1, d), |(_, k)| if k == j { 1.0 } else { 0.0 }))
            .collect();
        let fwd = self.forward_batch(&xb, &tangents)?;
        let m = self.output_dim();
        Ok(Array2::from_shape_fn((m, d), |(i, j)| fwd.tangents[j][[0, i]]))
    }
}

/// Top singular value by power iteration from `u0`; returns (σ̂, updated u).
fn power_iteration(w: &Array2<f64>, u0: &Array1<f64>, iters: usize) -> (f64, Array1<f64>) {
    let mut u = u0.clone();
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let mut v = w.t().dot(&u);
        let nv = v.dot(&v).sqrt();
        if nv == 0.0 {
            return (0.0, u);
        }
        v /= nv;
        let mut wu = w.dot(&v);
        let nu = wu.dot(&wu).sqrt();
        if nu == 0.0 {
            return (0.0, u);
        }
        sigma = nu;
        wu /= nu;
        u = wu;
    }
    (sigma, u)
}

/// Per-layer spectral norm bound maintained by rescaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstraint {
    pub bound: f64,
    /// Persistent left singular vector estimates, one per layer.
    pub vectors: Vec<Array1<f64>>,
    pub train_iterations: usize,
    pub certify_iterations: usize,
}

impl SpectralConstraint {
    pub const TRAIN_ITERATIONS: usize = 5;
    pub const CERTIFY_ITERATIONS: usize = 200;
    pub const CERTIFY_TOL: f64 = 1e-3;

    pub fn new(net: &DenseNet, bound: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(bound > 0.0 && bound <= 1.0) {
            return Err(crate::error::invalid("bound", "must lie in (0, 1]"));
        }
        let vectors = net
            .layers
            .iter()
            .map(|l| {
                let mut u: Array1<f64> = Array1::from_shape_fn(l.out_dim(), |_| StandardNormal.sample(rng));
                let n = u.dot(&u).sqrt();
                u /= n;
                u
            })
            .collect();
        Ok(Self {
            bound,
            vectors,
            train_iterations: Self::TRAIN_ITERATIONS,
            certify_iterations: Self::CERTIFY_ITERATIONS,
        })
    }

    /// Rescales each weight by min(1, bound/σ̂₁) using `iters` power iterations.
    /// Returns the estimates σ̂₁ before rescaling.
    pub fn project_with(&mut self, net: &mut DenseNet, iters: usize) -> Vec<f64> {
        net.layers
            .iter_mut()
            .zip(&mut self.vectors)
            .map(|(l, u)| {
                let (sigma, nu) = power_iteration(&l.weight, u, iters);
                *u = nu;
                if sigma > self.bound {
                    l.weight *= self.bound / sigma;
                }
                sigma
            })
            .collect()
    }

    pub fn project(&mut self, net: &mut DenseNet) -> Vec<f64> {
        let it = self.train_iterations;
        self.project_with(net, it)
    }

    /// Runs the long power iteration and checks every layer.
    pub fn certify(&mut self, net: &DenseNet) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(net.layers.len());
        for (i, (l, u)) in net.layers.iter().zip(&mut self.vectors).enumerate() {
            let (sigma, nu) = power_iteration(&l.weight, u, self.certify_iterations);
            *u = nu;
            if sigma > self.bound * (1.0 + Self::CERTIFY_TOL) {
                return Err(VpError::Certification { layer: i, sigma, bound: self.bound });
            }
            out.push(sigma);
        }
        Ok(out)
    }
}

/// Estimated spectral norm of a matrix with many power iterations from a
/// seeded start.
pub fn spectral_norm(w: &Array2<f64>, iters: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let u = Array1::from_shape_fn(w.nrows(), |_| StandardNormal.sample(&mut rng));
    power_iteration(w, &u, iters).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// and leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(VpError::DimensionMismatch { expected: self.m.len(), got: grads.len().min(params.len()) });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(VpError::Diverged { step: self.step as usize, reason: format!("non-finite gradient at index {i}") });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Random Fourier features of a scalar time followed by a two-layer net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierTimeEmbedding {
    /// Fixed at construction, never trained.
    pub frequencies: Vec<f64>,
    pub seed: u64,
    pub net: DenseNet,
}

impl FourierTimeEmbedding {
    /// `n_freq` frequencies drawn from N(0, scale²); the post-net maps the
    /// 2·n_freq features to `width` outputs through a SiLU hidden layer.
    pub fn new(n_freq: usize, scale: f64, width: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frequencies = (0..n_freq)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect();
        let net = DenseNet::new(&[2 * n_freq, width, width], &[Activation::Silu, Activation::Identity], &mut rng)?;
        Ok(Self { frequencies, seed, net })
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// `batch × 2·n_freq` feature matrix.
    pub fn features(&self, times: &[f64]) -> Array2<f64> {
        let k = self.frequencies.len();
        Array2::from_shape_fn((times.len(), 2 * k), |(i, j)| {
            let arg = self.frequencies[j % k] * times[i];
            if j < k {
                arg.sin()
            } else {
                arg.cos()
            }
        })
    }
}

/// Flat f64 tensor with shape, stored as base64 of little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorBlob {
    pub fn encode(shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { shape, data: B64.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<f64>> {
        let bytes = B64.decode(&self.data).map_err(|e| VpError::Checkpoint(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(VpError::Checkpoint("tensor byte length not a multiple of 8".into()));
        }
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let expected: usize = self.shape.iter().product();
        if vals.len() != expected {
            return Err(VpError::Checkpoint(format!("tensor has {} values, shape needs {expected}", vals.len())));
        }
        Ok(vals)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub seed: u64,
    pub metadata: Value,
    pub tensors: BTreeMap<String, TensorBlob>,
}

impl Checkpoint {
    pub fn new(kind: &str, seed: u64, metadata: Value) -> Self {
        Self { version: CHECKPOINT_VERSION, kind: kind.to_string(), seed, metadata, tensors: BTreeMap::new() }
    }

    pub fn put_net(&mut self, prefix: &str, net: &DenseNet) {
        for (i, l) in net.layers.iter().enumerate() {
            let w: Vec<f64> = l.weight.iter().copied().collect();
            self.tensors.insert(format!("{prefix}.{i}.weight"), TensorBlob::encode(vec![l.out_dim(), l.in_dim()], &w));
            self.tensors.insert(format!("{prefix}.{i}.bias"), TensorBlob::encode(vec![l.out_dim()], &l.bias.to_vec()));
        }
    }

    pub fn put(&mut self, name: &str, values: &[f64]) {
        self.tensors.insert(name.to_string(), TensorBlob::encode(vec![values.len()], values));
    }

    pub fn get(&self, name: &str) -> Result<Vec<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| VpError::Checkpoint(format!("missing tensor '{name}'")))?
            .decode()
    }

    /// Loads weights into a net of matching architecture.
    pub fn load_net(&self, prefix: &str, net: &mut DenseNet) -> Result<()> {
        for (i, l) in net.layers.iter_mut().enumerate() {
            let wname = format!("{prefix}.{i}.weight");
            let blob = self.tensors.get(&wname).ok_or_else(|| VpError::Checkpoint(format!("missing tensor '{wname}'")))?;
            if blob.shape != vec![l.out_dim(), l.in_dim()] {
                return Err(VpError::Checkpoint(format!("shape mismatch for '{wname}'")));
            }
            l.weight = Array2::from_shape_vec((l.out_dim(), l.in_dim()), blob.decode()?)
                .map_err(|e| VpError::Checkpoint(e.to_string()))?;
            let b = self.get(&format!("{prefix}.{i}.bias"))?;
            if b.len() != l.out_dim() {
                return Err(VpError::Checkpoint(format!("shape mismatch for '{prefix}.{i}.bias'")));
            }
            l.bias = Array1::from_vec(b);
        }
        net.validate()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| VpError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(VpError::Checkpoint(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }
}
