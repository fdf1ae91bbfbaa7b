//! Invertible residual network: blocks `x + f(x)` with spectrally bounded
//! ELU nets, each followed by ActNorm, trained by maximum likelihood with
//! exact low-dimensional log-determinants.

use crate::error::{invalid, Result, VpError};
use crate::linalg::SquareMat;
use crate::nn::{AdamState, Activation, Checkpoint, DenseGrads, DenseNet, ForwardCache, SpectralConstraint};
use crate::quadrature::composite_gauss_legendre;
use crate::special::LN_2PI;
use crate::targets::TargetDensity;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IResNetConfig {
    /// Number of residual blocks.
    pub k: usize,
    /// Lipschitz bound of each residual branch, in (0, 1).
    #[serde(rename = "L")]
    pub lip: f64,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub inverse_tol: f64,
    pub inverse_max_iter: usize,
}

impl Default for IResNetConfig {
    fn default() -> Self {
        Self {
            k: 5,
            lip: 0.95,
            width: 64,
            steps: 5000,
            batch_size: 256,
            lr: 1e-3,
            seed: 0,
            inverse_tol: 1e-10,
            inverse_max_iter: 200,
        }
    }
}

impl IResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lip > 0.0 && self.lip < 1.0) {
            return Err(invalid("L", "must lie in (0, 1)"));
        }
        if self.k == 0 {
            return Err(invalid("k", "need at least one block"));
        }
        if self.width == 0 || self.batch_size == 0 {
            return Err(invalid("width", "width and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.inverse_tol > 0.0) {
            return Err(invalid("lr", "lr and inverse_tol must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension affine layer with data-dependent initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub initialized: bool,
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        Self { scale: vec![1.0; dim], shift: vec![0.0; dim], initialized: false }
    }

    /// Sets scale and shift so that `batch` maps to zero mean, unit variance.
    pub fn initialize(&mut self, batch: &Array2<f64>) {
        let n = batch.nrows() as f64;
        for j in 0..self.scale.len() {
            let col = batch.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt().max(1e-12);
            self.scale[j] = 1.0 / sd;
            self.shift[j] = -mean / sd;
        }
        self.initialized = true;
    }

    pub fn logdet(&self) -> f64 {
        self.scale.iter().map(|s| s.abs().ln()).sum()
    }

    fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.scale[j] * *v + self.shift[j];
            }
        }
    }

    fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().enumerate().map(|(j, v)| (v - self.shift[j]) / self.scale[j]).collect()
    }
}

/// `g(x) = x + f(x)` with every layer of `f` spectrally bounded by L^{1/layers}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub f: DenseNet,
    pub constraint: SpectralConstraint,
    pub lip: f64,
}

impl ResidualBlock {
    pub fn new(dim: usize, width: usize, lip: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut f = DenseNet::new(&[dim, width, width, dim], &[Activation::Elu, Activation::Elu, Activation::Identity], rng)?;
        let per_layer = lip.powf(1.0 / f.layers.len() as f64);
        let mut constraint = SpectralConstraint::new(&f, per_layer, rng)?;
        constraint.project_with(&mut f, SpectralConstraint::CERTIFY_ITERATIONS);
        Ok(Self { f, constraint, lip })
    }

    /// Product of estimated layer spectral norms, an upper bound on Lip(f).
    pub fn branch_lipschitz(&self) -> f64 {
        self.f.layers.iter().map(|l| crate::nn::spectral_norm(&l.weight, SpectralConstraint::CERTIFY_ITERATIONS)).product()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let fx = self.f.forward(x)?;
        Ok(x.iter().zip(&fx).map(|(a, b)| a + b).collect())
    }

    /// Fixed-point inversion `x ← y − f(x)` from `x = y`. The iteration cap is
    /// raised to what the contraction rate `rate` needs to reach `tol`.
    pub fn inverse(&self, y: &[f64], tol: f64, max_iter: usize, rate: f64) -> Result<(Vec<f64>, usize)> {
        let needed = if rate > 0.0 && rate < 1.0 {
            let scale = crate::linalg::norm(&self.f.forward(y)?).max(tol);
            ((tol / scale).ln() / rate.ln()).ceil().max(0.0) as usize + 10
        } else {
            0
        };
        let cap = max_iter.max(needed);
        let mut x = y.to_vec();
        let mut residual = f64::INFINITY;
        for it in 0..=cap {
            let fx = self.f.forward(&x)?;
            let r: Vec<f64> = (0..y.len()).map(|j| x[j] + fx[j] - y[j]).collect();
            residual = crate::linalg::norm(&r);
            if residual <= tol {
                return Ok((x, it));
            }
            if !residual.is_finite() {
                break;
            }
            for j in 0..y.len() {
                x[j] = y[j] - fx[j];
            }
        }
        Err(VpError::InversionFailed { iterations: cap, residual })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IResNet {
    pub dim: usize,
    pub config: IResNetConfig,
    pub blocks: Vec<ResidualBlock>,
    pub actnorms: Vec<ActNorm>,
}

struct BlockTrace {
    cache: ForwardCache,
    /// I + J_f per sample.
    jacobians: Vec<SquareMat>,
    /// Block output before ActNorm.
    pre_norm: Array2<f64>,
}

struct NetTrace {
    z: Array2<f64>,
    logdet: Vec<f64>,
    blocks: Vec<BlockTrace>,
}

/// Global Lipschitz certificates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IResNetCertificate {
    pub layer_sigmas: Vec<Vec<f64>>,
    /// Certified Lip(f) per block (product of layer norms).
    pub branch_lipschitz: Vec<f64>,
    /// (1 + L)^k and (1 − L)^{−k} with the nominal L, ActNorm ignored.
    pub nominal_forward: f64,
    pub nominal_inverse: f64,
    /// Π max|scale| and Π 1/min|scale| over the ActNorm layers.
    pub actnorm_forward: f64,
    pub actnorm_inverse: f64,
    /// Π(1 + L_i)·actnorm_forward with the certified L_i.
    pub forward: f64,
    /// Π(1 − L_i)^{−1}·actnorm_inverse.
    pub inverse: f64,
}

impl IResNet {
    pub fn new(dim: usize, config: &IResNetConfig) -> Result<Self> {
        config.validate()?;
        if !(dim == 1 || dim == 2) {
            return Err(VpError::UnsupportedDimension(dim));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks = (0..config.k)
            .map(|_| ResidualBlock::new(dim, config.width, config.lip, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, config: config.clone(), blocks, actnorms: vec![ActNorm::identity(dim); config.k] })
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.f.num_params() + 2 * self.dim).sum()
    }

    /// Flat parameters: per block the branch net, then ActNorm scale and shift.
    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for (b, a) in self.blocks.iter().zip(&self.actnorms) {
            b.f.params_into(&mut v);
            v.extend(&a.scale);
            v.extend(&a.shift);
        }
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(VpError::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let d = self.dim;
        let mut k = 0;
        for (b, a) in self.blocks.iter_mut().zip(&mut self.actnorms) {
            k += b.f.set_params(&flat[k..])?;
            a.scale.copy_from_slice(&flat[k..k + d]);
            a.shift.copy_from_slice(&flat[k + d..k + 2 * d]);
            k += 2 * d;
        }
        Ok(())
    }

    fn unit_directions(&self, n: usize) -> Vec<Array2<f64>> {
        (0..self.dim)
            .map(|k| Array2::from_shape_fn((n, self.dim), |(_, c)| if c == k { 1.0 } else { 0.0 }))
            .collect()
    }

    fn trace(&self, x: &Array2<f64>) -> Result<NetTrace> {
        let n = x.nrows();
        let d = self.dim;
        let dirs = self.unit_directions(n);
        let mut h = x.clone();
        let mut logdet = vec![0.0; n];
        let mut traces = Vec::with_capacity(self.blocks.len());
        for (blk, an) in self.blocks.iter().zip(&self.actnorms) {
            let fwd = blk.f.forward_batch(&h, &dirs)?;
            let mut jacobians = Vec::with_capacity(n);
            for (i, ld) in logdet.iter_mut().enumerate() {
                let mut j = SquareMat::identity(d);
                for r in 0..d {
                    for c in 0..d {
                        j.a[r][c] += fwd.tangents[c][[i, r]];
                    }
                }
                let det = j.det();
                if !(det > 0.0) {
                    let p: Vec<f64> = h.row(i).to_vec();
                    return Err(VpError::SingularJacobian(p));
                }
                *ld += det.ln();
                jacobians.push(j);
            }
            let pre_norm = &h + &fwd.output;
            let mut out = pre_norm.clone();
            an.apply(&mut out);
            let an_ld = an.logdet();
            logdet.iter_mut().for_each(|v| *v += an_ld);
            traces.push(BlockTrace { cache: fwd.cache, jacobians, pre_norm });
            h = out;
        }
        Ok(NetTrace { z: h, logdet, blocks: traces })
    }

    fn to_array(&self, xs: &[Vec<f64>]) -> Result<Array2<f64>> {
        if let Some(x) = xs.iter().find(|x| x.len() != self.dim) {
            return Err(VpError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(Array2::from_shape_fn((xs.len(), self.dim), |(i, j)| xs[i][j]))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for (b, a) in self.blocks.iter().zip(&self.actnorms) {
            h = b.forward(&h)?;
            for (j, v) in h.iter_mut().enumerate() {
                *v = a.scale[j] * *v + a.shift[j];
            }
        }
        Ok(h)
    }

    /// Images and log|det J| for many points.
    pub fn forward_with_logdet(&self, xs: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>> {
        let tr = self.trace(&self.to_array(xs)?)?;
        Ok(tr.z.rows().into_iter().map(|r| r.to_vec()).zip(tr.logdet).collect())
    }

    pub fn logdet(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward_with_logdet(&[x.to_vec()])?[0].1)
    }

    /// Full Jacobian of the network at `x`.
    pub fn jacobian(&self, x: &[f64]) -> Result<SquareMat> {
        let tr = self.trace(&self.to_array(&[x.to_vec()])?)?;
        let mut j = SquareMat::identity(self.dim);
        for (bt, an) in tr.blocks.iter().zip(&self.actnorms) {
            let mut s = SquareMat::zeros(self.dim);
            for r in 0..self.dim {
                s.a[r][r] = an.scale[r];
            }
            j = s.matmul(&bt.jacobians[0]).matmul(&j);
        }
        Ok(j)
    }

    /// Rates used to size the fixed-point iteration of each block.
    fn inverse_rates(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.branch_lipschitz().min(b.lip * (1.0 + 1e-2))).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.inverse_with_rates(z, &self.inverse_rates())
    }

    fn inverse_with_rates(&self, z: &[f64], rates: &[f64]) -> Result<Vec<f64>> {
        let mut h = z.to_vec();
        for ((b, a), rate) in self.blocks.iter().zip(&self.actnorms).zip(rates).rev() {
            h = a.invert(&h);
            h = b.inverse(&h, self.config.inverse_tol, self.config.inverse_max_iter, *rate)?.0;
        }
        Ok(h)
    }

    pub fn inverse_many(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let rates = self.inverse_rates();
        zs.iter().map(|z| self.inverse_with_rates(z, &rates)).collect()
    }

    /// log p_Z(φ(x)) + log|det Jφ(x)|.
    pub fn log_density(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let d = self.dim as f64;
        Ok(self
            .forward_with_logdet(xs)?
            .into_iter()
            .map(|(z, ld)| -0.5 * crate::linalg::norm_sq(&z) - 0.5 * d * LN_2PI + ld)
            .collect())
    }

    /// Mean negative log-likelihood of `batch`.
    pub fn mle_loss(&self, batch: &[Vec<f64>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid("batch", "must not be empty"));
        }
        let lp = self.log_density(batch)?;
        let loss = -lp.iter().sum::<f64>() / lp.len() as f64;
        if !loss.is_finite() {
            return Err(VpError::NonFinite("mle loss".into()));
        }
        Ok(loss)
    }

    /// Loss and flat parameter gradient.
    pub fn mle_loss_and_grad(&self, batch: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
        let n = batch.nrows();
        if n == 0 {
            return Err(invalid("batch", "must not be empty"));
        }
        let inv_n = 1.0 / n as f64;
        let d = self.dim;
        let tr = self.trace(batch)?;
        let loss = tr
            .z
            .rows()
            .into_iter()
            .zip(&tr.logdet)
            .map(|(z, ld)| 0.5 * z.dot(&z) + 0.5 * d as f64 * LN_2PI - ld)
            .sum::<f64>()
            * inv_n;
        if !loss.is_finite() {
            return Err(VpError::NonFinite("mle loss".into()));
        }
        let mut zbar = &tr.z * inv_n;
        let mut per_block: Vec<Vec<f64>> = Vec::with_capacity(self.blocks.len());
        for ((blk, an), bt) in self.blocks.iter().zip(&self.actnorms).zip(&tr.blocks).rev() {
            let mut gs: Vec<f64> = (0..d).map(|j| -1.0 / an.scale[j]).collect();
            let gb: Vec<f64> = zbar.sum_axis(Axis(0)).to_vec();
            for j in 0..d {
                gs[j] += zbar.column(j).dot(&bt.pre_norm.column(j));
            }
            let mut ubar = zbar;
            for mut row in ubar.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v *= an.scale[j];
                }
            }
            // ∂ log det(J)/∂J_{jk} = (J^{-1})_{kj}
            let inverses: Vec<SquareMat> = bt
                .jacobians
                .iter()
                .map(|j| j.inverse().ok_or_else(|| VpError::SingularJacobian(vec![])))
                .collect::<Result<_>>()?;
            let tadj: Vec<Array2<f64>> = (0..d)
                .map(|k| Array2::from_shape_fn((n, d), |(i, j)| -inv_n * inverses[i].a[k][j]))
                .collect();
            let mut g = DenseGrads::zeros_like(&blk.f);
            let back = blk.f.backward_batch(&bt.cache, &ubar, &tadj, &mut g);
            zbar = ubar + &back.input;
            let mut flat = g.flatten();
            flat.extend(gs);
            flat.extend(gb);
            per_block.push(flat);
        }
        per_block.reverse();
        Ok((loss, per_block.concat()))
    }

    /// Initializes every ActNorm from the activations of `batch`, in order.
    pub fn initialize_actnorm(&mut self, batch: &Array2<f64>) -> Result<()> {
        let mut h = batch.clone();
        for k in 0..self.blocks.len() {
            let fwd = self.blocks[k].f.forward_batch(&h, &[])?;
            let pre = &h + &fwd.output;
            self.actnorms[k].initialize(&pre);
            let mut out = pre;
            self.actnorms[k].apply(&mut out);
            h = out;
        }
        Ok(())
    }

    fn project(&mut self, iters: usize) {
        for b in &mut self.blocks {
            b.constraint.project_with(&mut b.f, iters);
        }
    }

    /// Long power iteration on every layer; fails on the first violated bound.
    pub fn certify(&mut self) -> Result<IResNetCertificate> {
        let mut layer_sigmas = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            layer_sigmas.push(b.constraint.certify(&b.f)?);
        }
        let branch: Vec<f64> = layer_sigmas.iter().map(|s| s.iter().product()).collect();
        let k = self.blocks.len() as i32;
        let l = self.config.lip;
        let an_fwd: f64 = self.actnorms.iter().map(|a| a.scale.iter().fold(0.0f64, |m, s| m.max(s.abs()))).product();
        let an_inv: f64 = self
            .actnorms
            .iter()
            .map(|a| 1.0 / a.scale.iter().fold(f64::INFINITY, |m, s| m.min(s.abs())))
            .product();
        Ok(IResNetCertificate {
            forward: branch.iter().map(|li| 1.0 + li).product::<f64>() * an_fwd,
            inverse: branch.iter().map(|li| 1.0 / (1.0 - li)).product::<f64>() * an_inv,
            layer_sigmas,
            branch_lipschitz: branch,
            nominal_forward: (1.0 + l).powi(k),
            nominal_inverse: (1.0 - l).powi(-k),
            actnorm_forward: an_fwd,
            actnorm_inverse: an_inv,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("iresnet", self.config.seed, json!({"dim": self.dim, "config": self.config}));
        for (i, (b, a)) in self.blocks.iter().zip(&self.actnorms).enumerate() {
            ck.put_net(&format!("block{i}.f"), &b.f);
            ck.put(&format!("block{i}.actnorm.scale"), &a.scale);
            ck.put(&format!("block{i}.actnorm.shift"), &a.shift);
            let u: Vec<f64> = b.constraint.vectors.iter().flat_map(|v| v.iter().copied()).collect();
            ck.put(&format!("block{i}.power_vectors"), &u);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "iresnet" {
            return Err(VpError::Checkpoint(format!("expected an iresnet checkpoint, found '{}'", ck.kind)));
        }
        let dim = ck.metadata["dim"].as_u64().ok_or_else(|| VpError::Checkpoint("missing dim".into()))? as usize;
        let config: IResNetConfig =
            serde_json::from_value(ck.metadata["config"].clone()).map_err(|e| VpError::Checkpoint(e.to_string()))?;
        let mut net = Self::new(dim, &config)?;
        for (i, (b, a)) in net.blocks.iter_mut().zip(&mut net.actnorms).enumerate() {
            ck.load_net(&format!("block{i}.f"), &mut b.f)?;
            a.scale = ck.get(&format!("block{i}.actnorm.scale"))?;
            a.shift = ck.get(&format!("block{i}.actnorm.shift"))?;
            a.initialized = true;
            if a.scale.len() != dim || a.shift.len() != dim {
                return Err(VpError::Checkpoint("actnorm shape mismatch".into()));
            }
            let u = ck.get(&format!("block{i}.power_vectors"))?;
            let mut k = 0;
            for v in &mut b.constraint.vectors {
                let n = v.len();
                if k + n > u.len() {
                    return Err(VpError::Checkpoint("power vector shape mismatch".into()));
                }
                *v = Array1::from_vec(u[k..k + n].to_vec());
                k += n;
            }
        }
        Ok(net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleLogEntry {
    pub step: usize,
    pub loss_ema: f64,
}

pub struct TrainedIResNet {
    pub net: IResNet,
    pub certificate: IResNetCertificate,
    pub log: Vec<MleLogEntry>,
}

/// Maximum-likelihood training with Adam, spectral projection after every
/// step, and a final long-iteration projection and certification.
pub fn train_mle(target: &TargetDensity, cfg: &IResNetConfig) -> Result<TrainedIResNet> {
    cfg.validate()?;
    let mut net = IResNet::new(target.dim, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1e5));
    let d = target.dim;
    let draw = |rng: &mut ChaCha8Rng| -> Array2<f64> {
        let pts: Vec<Vec<f64>> = (0..cfg.batch_size).map(|_| target.sample_one(rng)).collect();
        Array2::from_shape_fn((cfg.batch_size, d), |(i, j)| pts[i][j])
    };
    let first = draw(&mut rng);
    net.initialize_actnorm(&first)?;
    let mut params = net.params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut ema = f64::NAN;
    let mut log = Vec::new();
    for step in 0..cfg.steps {
        let batch = if step == 0 { first.clone() } else { draw(&mut rng) };
        let (loss, grads) = net.mle_loss_and_grad(&batch)?;
        ema = if ema.is_nan() { loss } else { 0.99 * ema + 0.01 * loss };
        if !ema.is_finite() {
            return Err(VpError::Diverged { step, reason: format!("loss EMA became {ema}") });
        }
        adam.step(&mut params, &grads).map_err(|e| match e {
            VpError::Diverged { reason, .. } => VpError::Diverged { step, reason },
            other => other,
        })?;
        net.set_params(&params)?;
        net.project(SpectralConstraint::TRAIN_ITERATIONS);
        params = net.params();
        if step % 100 == 0 || step + 1 == cfg.steps {
            log.push(MleLogEntry { step, loss_ema: ema });
        }
    }
    net.project(SpectralConstraint::CERTIFY_ITERATIONS);
    let certificate = net.certify()?;
    Ok(TrainedIResNet { net, certificate, log })
}

/// Mass of the model density on [lo, hi] (1D) by composite Gauss–Legendre.
pub fn mass_on_interval(net: &IResNet, lo: f64, hi: f64) -> Result<f64> {
    if net.dim != 1 {
        return Err(VpError::UnsupportedDimension(net.dim));
    }
    let (x, w) = composite_gauss_legendre(lo, hi, 400, 8);
    let pts: Vec<Vec<f64>> = x.iter().map(|v| vec![*v]).collect();
    let lp = net.log_density(&pts)?;
    Ok(lp.iter().zip(&w).map(|(l, wi)| wi * l.exp()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_builtin_target, Params};
    use ndarray::array;
    use rand::Rng;

    fn small_cfg(dim_seed: u64, lip: f64) -> IResNetConfig {
        IResNetConfig { k: 3, lip, width: 8, seed: dim_seed, ..Default::default() }
    }

    fn randomize(net: &mut IResNet, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for (b, a) in net.blocks.iter_mut().zip(&mut net.actnorms) {
            for l in &mut b.f.layers {
                l.bias.mapv_inplace(|_| r.gen_range(-0.3..0.3));
            }
            for s in &mut a.scale {
                *s = r.gen_range(0.6..1.5);
            }
            for s in &mut a.shift {
                *s = r.gen_range(-0.3..0.3);
            }
        }
    }

    fn zero_branches(net: &mut IResNet) {
        for b in &mut net.blocks {
            for l in &mut b.f.layers {
                l.weight.fill(0.0);
                l.bias.fill(0.0);
            }
        }
    }

    #[test]
    fn zero_branch_is_identity() {
        let mut net = IResNet::new(2, &small_cfg(1, 0.5)).unwrap();
        zero_branches(&mut net);
        let x = vec![0.3, -1.2];
        assert_eq!(net.forward(&x).unwrap(), x);
        assert_eq!(net.logdet(&x).unwrap(), 0.0);
        let (y, it) = net.blocks[0].inverse(&x, 1e-10, 200, 0.5).unwrap();
        assert_eq!(y, x);
        assert!(it <= 1);
    }

    #[test]
    fn linear_branch_inverse_and_logdet() {
        let mut net = IResNet::new(1, &IResNetConfig { k: 1, lip: 0.6, width: 1, ..Default::default() }).unwrap();
        // f(x) = 0.5x through three identity-like layers
        let b = &mut net.blocks[0];
        b.f.layers[0].weight = array![[1.0]];
        b.f.layers[1].weight = array![[1.0]];
        b.f.layers[2].weight = array![[0.5]];
        b.f.layers.iter_mut().for_each(|l| l.activation = Activation::Identity);
        b.f.layers.iter_mut().for_each(|l| l.bias.fill(0.0));
        let y = 0.9;
        let (x, it) = net.blocks[0].inverse(&[y], 1e-12, 200, 0.5).unwrap();
        assert!((x[0] - 2.0 * y / 3.0).abs() < 1e-12);
        // geometric rate 0.5: about log2(1/tol) iterations
        assert!((35..=45).contains(&it), "{it}");
        assert!((net.logdet(&[0.3]).unwrap() - 1.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn inverse_round_trip_on_random_certified_net() {
        let mut net = IResNet::new(2, &IResNetConfig { k: 4, lip: 0.9, width: 16, seed: 3, ..Default::default() }).unwrap();
        randomize(&mut net, 4);
        net.certify().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let y = vec![r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
            let x = net.blocks[0].inverse(&y, 1e-10, 200, 0.9).unwrap().0;
            let back = net.blocks[0].forward(&x).unwrap();
            assert!(crate::linalg::norm(&[back[0] - y[0], back[1] - y[1]]) < 1e-9);
            let z = net.forward(&y).unwrap();
            let yy = net.inverse(&z).unwrap();
            assert!(crate::linalg::norm(&[yy[0] - y[0], yy[1] - y[1]]) < 1e-8);
        }
    }

    #[test]
    fn logdet_matches_finite_difference_determinant() {
        let mut net = IResNet::new(2, &IResNetConfig { k: 3, lip: 0.8, width: 16, seed: 6, ..Default::default() }).unwrap();
        randomize(&mut net, 7);
        let h = 1e-6;
        for x in [[0.1, 0.2], [-1.0, 0.7], [2.0, -1.5]] {
            let mut j = SquareMat::zeros(2);
            for c in 0..2 {
                let mut xp = x.to_vec();
                xp[c] += h;
                let mut xm = x.to_vec();
                xm[c] -= h;
                let (fp, fm) = (net.forward(&xp).unwrap(), net.forward(&xm).unwrap());
                for r in 0..2 {
                    j.a[r][c] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            assert!((j.det().abs().ln() - net.logdet(&x).unwrap()).abs() < 1e-4);
            assert!(net.jacobian(&x).unwrap().max_abs_diff(&j) < 1e-6);
        }
    }

    #[test]
    fn identity_net_nll_is_gaussian_entropy() {
        let mut net = IResNet::new(1, &small_cfg(2, 0.5)).unwrap();
        zero_branches(&mut net);
        let target = make_builtin_target("gaussian", &Params::new()).unwrap();
        let xs = target.sample(100_000, 12);
        let nll: Vec<f64> = net.log_density(&xs).unwrap().iter().map(|l| -l).collect();
        let mean = nll.iter().sum::<f64>() / nll.len() as f64;
        let sd = (nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nll.len() - 1) as f64).sqrt();
        let entropy = 0.5 * (1.0 + LN_2PI);
        assert!((entropy - 1.41894).abs() < 1e-5);
        assert!((mean - entropy).abs() < 3.0 * sd / (nll.len() as f64).sqrt());
        let shifted: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 0.5]).collect();
        assert!(net.mle_loss(&shifted).unwrap() > net.mle_loss(&xs).unwrap());
    }

    #[test]
    fn mle_gradient_matches_finite_differences() {
        for dim in [1, 2] {
            let mut net = IResNet::new(dim, &IResNetConfig { k: 2, lip: 0.7, width: 8, seed: 8, ..Default::default() }).unwrap();
            randomize(&mut net, 9);
            let mut r = ChaCha8Rng::seed_from_u64(10);
            let batch = Array2::from_shape_fn((6, dim), |_| r.gen_range(-2.0..2.0));
            let (_, g) = net.mle_loss_and_grad(&batch).unwrap();
            let p0 = net.params();
            let h = 1e-5;
            for k in 0..p0.len() {
                let mut n2 = net.clone();
                let mut p = p0.clone();
                p[k] += h;
                n2.set_params(&p).unwrap();
                let fp = n2.mle_loss_and_grad(&batch).unwrap().0;
                p[k] -= 2.0 * h;
                n2.set_params(&p).unwrap();
                let fm = n2.mle_loss_and_grad(&batch).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-4 * (1.0f64).max(fd.abs()), "dim {dim} param {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn actnorm_initialization_standardizes_first_batch() {
        let mut net = IResNet::new(2, &small_cfg(11, 0.9)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let batch = Array2::from_shape_fn((256, 2), |(_, j)| r.gen_range(-1.0..3.0) * (j as f64 + 1.0));
        net.initialize_actnorm(&batch).unwrap();
        let pts: Vec<Vec<f64>> = batch.rows().into_iter().map(|r| r.to_vec()).collect();
        let z: Vec<Vec<f64>> = pts.iter().map(|p| net.forward(p).unwrap()).collect();
        for j in 0..2 {
            let m = z.iter().map(|v| v[j]).sum::<f64>() / 256.0;
            let v = z.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / 256.0;
            assert!(m.abs() < 1e-6 && (0.99..=1.01).contains(&v), "{m} {v}");
        }
    }

    #[test]
    fn nominal_certificate_values() {
        let mut net = IResNet::new(1, &IResNetConfig { k: 5, lip: 0.25, width: 8, ..Default::default() }).unwrap();
        let c = net.certify().unwrap();
        assert!((c.nominal_forward - 3.05176).abs() < 1e-5);
        assert!((c.nominal_inverse - 4.21399).abs() < 1e-5);
        assert!(c.branch_lipschitz.iter().all(|l| *l <= 0.25 * (1.0 + 1e-2)));
    }

    #[test]
    fn short_training_is_deterministic_and_certified() {
        let target = make_builtin_target("gmm1d", &Params::new()).unwrap();
        let cfg = IResNetConfig { k: 2, lip: 0.9, width: 8, steps: 50, batch_size: 32, seed: 4, ..Default::default() };
        let a = train_mle(&target, &cfg).unwrap();
        let b = train_mle(&target, &cfg).unwrap();
        assert_eq!(a.net, b.net);
        let back = IResNet::from_checkpoint(&Checkpoint::from_json_str(&a.net.to_checkpoint().to_json_string()).unwrap()).unwrap();
        assert_eq!(back.params(), a.net.params());
        let m = mass_on_interval(&a.net, -30.0, 30.0).unwrap();
        assert!((m - 1.0).abs() < 1e-6, "{m}");
        assert!(IResNetConfig { lip: 1.0, ..Default::default() }.validate().is_err());
    }
}
