//! Denoising score matching for a time-conditioned residual MLP, the
//! space-time score error and the learned-flow KL bound check.

use crate::error::{invalid, Result, VpError};
use crate::flow::{pullback_logpdf_many, FlowField, ScoreField, ScoreJet};
use crate::linalg::{norm_sq, SquareMat};
use crate::metrics::{kl_from_log_values, l1_from_values, tabulate, GridSpec, MetricReport};
use crate::nn::{AdamState, Activation, Checkpoint, DenseGrads, DenseNet, ForwardCache, FourierTimeEmbedding};
use crate::ode::IntegratorConfig;
use crate::special::std_normal_log_pdf;
use crate::targets::TargetDensity;
use crate::vp::{VpSchedule, VpScoreModel};
use ndarray::{concatenate, s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// A score that may be queried at a different time per point.
pub trait TimeScore: Send + Sync {
    fn dim(&self) -> usize;
    fn score_at(&self, times: &[f64], xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>>;
}

impl TimeScore for VpScoreModel {
    fn dim(&self) -> usize {
        VpScoreModel::dim(self)
    }

    fn score_at(&self, times: &[f64], xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let d = VpScoreModel::dim(self);
        times.iter().zip(xs).map(|(t, x)| Ok(self.evaluate(*t, &x[..d])?.score)).collect()
    }
}

/// Adapter turning a closure `(t, x) ↦ s` into a [`TimeScore`].
pub struct FnScore<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> TimeScore for FnScore<F>
where
    F: Fn(f64, &[f64]) -> Result<[f64; 2]> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_at(&self, times: &[f64], xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        times.iter().zip(xs).map(|(t, x)| (self.f)(*t, &x[..self.dim])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreNetConfig {
    pub n_freq: usize,
    pub freq_scale: f64,
    pub embed_width: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self { n_freq: 16, freq_scale: 1.0, embed_width: 32, width: 64, blocks: 3 }
    }
}

/// Residual MLP score `s_θ(t, x) = net(ln t, x)/σ(t)`.
///
/// The time enters through random Fourier features of ln t. Dividing by σ(t)
/// makes the σ²-weighted DSM loss the plain squared error `‖net + z‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedScore {
    pub dim: usize,
    pub config: ScoreNetConfig,
    pub horizon: f64,
    pub seed: u64,
    pub embedding: FourierTimeEmbedding,
    pub input: DenseNet,
    pub blocks: Vec<DenseNet>,
    pub output: DenseNet,
}

struct TrunkCaches {
    embedding: ForwardCache,
    input: ForwardCache,
    blocks: Vec<ForwardCache>,
    output: ForwardCache,
}

struct TrunkPass {
    /// σ(t)·s, `batch × dim`.
    raw: Array2<f64>,
    /// Input-direction tangents of `raw`, one per coordinate when requested.
    tangents: Vec<Array2<f64>>,
    caches: TrunkCaches,
}

impl LearnedScore {
    pub fn new(dim: usize, config: &ScoreNetConfig, horizon: f64, seed: u64) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(VpError::UnsupportedDimension(dim));
        }
        if !(horizon > 0.0) {
            return Err(invalid("T", "must be positive"));
        }
        if config.n_freq == 0 || config.width == 0 || config.embed_width == 0 {
            return Err(invalid("network", "widths must be positive"));
        }
        let embedding = FourierTimeEmbedding::new(config.n_freq, config.freq_scale, config.embed_width, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let w = config.width;
        let input = DenseNet::new(&[dim + config.embed_width, w], &[Activation::Silu], &mut rng)?;
        let blocks = (0..config.blocks)
            .map(|_| DenseNet::new(&[w, w, w], &[Activation::Silu, Activation::Identity], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let output = DenseNet::new(&[w, dim], &[Activation::Identity], &mut rng)?;
        Ok(Self { dim, config: config.clone(), horizon, seed, embedding, input, blocks, output })
    }

    fn nets(&self) -> impl Iterator<Item = &DenseNet> {
        std::iter::once(&self.embedding.net)
            .chain(std::iter::once(&self.input))
            .chain(self.blocks.iter())
            .chain(std::iter::once(&self.output))
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut DenseNet> {
        std::iter::once(&mut self.embedding.net)
            .chain(std::iter::once(&mut self.input))
            .chain(self.blocks.iter_mut())
            .chain(std::iter::once(&mut self.output))
    }

    pub fn num_params(&self) -> usize {
        self.nets().map(DenseNet::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.nets().for_each(|n| n.params_into(&mut v));
        v
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(VpError::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut k = 0;
        for n in self.nets_mut() {
            k += n.set_params(&flat[k..])?;
        }
        Ok(())
    }

    fn run(&self, times: &[f64], xs: &Array2<f64>, with_tangents: bool) -> Result<TrunkPass> {
        let b = xs.nrows();
        if let Some(t) = times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
            return Err(VpError::TimeOutOfRange { t: *t, lo: 0.0, hi: f64::INFINITY });
        }
        let log_t: Vec<f64> = times.iter().map(|t| t.ln()).collect();
        let emb = self.embedding.net.forward_batch(&self.embedding.features(&log_t), &[])?;
        let inp = concatenate![Axis(1), xs.view(), emb.output.view()];
        let width_in = inp.ncols();
        let dirs: Vec<Array2<f64>> = if with_tangents {
            (0..self.dim)
                .map(|j| Array2::from_shape_fn((b, width_in), |(_, c)| if c == j { 1.0 } else { 0.0 }))
                .collect()
        } else {
            Vec::new()
        };
        let first = self.input.forward_batch(&inp, &dirs)?;
        let (mut h, mut ht) = (first.output, first.tangents);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let f = blk.forward_batch(&h, &ht)?;
            h += &f.output;
            for (a, d) in ht.iter_mut().zip(&f.tangents) {
                *a += d;
            }
            block_caches.push(f.cache);
        }
        let out = self.output.forward_batch(&h, &ht)?;
        Ok(TrunkPass {
            raw: out.output,
            tangents: out.tangents,
            caches: TrunkCaches { embedding: emb.cache, input: first.cache, blocks: block_caches, output: out.cache },
        })
    }

    /// Parameter gradient of Σ ⟨raw_adj, raw⟩.
    fn backward(&self, caches: &TrunkCaches, raw_adj: &Array2<f64>) -> Vec<f64> {
        let mut g_emb = DenseGrads::zeros_like(&self.embedding.net);
        let mut g_in = DenseGrads::zeros_like(&self.input);
        let mut g_blocks: Vec<DenseGrads> = self.blocks.iter().map(DenseGrads::zeros_like).collect();
        let mut g_out = DenseGrads::zeros_like(&self.output);
        let mut hbar = self.output.backward_batch(&caches.output, raw_adj, &[], &mut g_out).input;
        for (k, blk) in self.blocks.iter().enumerate().rev() {
            let back = blk.backward_batch(&caches.blocks[k], &hbar, &[], &mut g_blocks[k]);
            hbar += &back.input;
        }
        let inbar = self.input.backward_batch(&caches.input, &hbar, &[], &mut g_in).input;
        let ebar = inbar.slice(s![.., self.dim..]).to_owned();
        self.embedding.net.backward_batch(&caches.embedding, &ebar, &[], &mut g_emb);
        let mut flat = Vec::with_capacity(self.num_params());
        g_emb.flatten_into(&mut flat);
        g_in.flatten_into(&mut flat);
        g_blocks.iter().for_each(|g| g.flatten_into(&mut flat));
        g_out.flatten_into(&mut flat);
        flat
    }

    fn to_array(&self, xs: &[[f64; 2]]) -> Array2<f64> {
        Array2::from_shape_fn((xs.len(), self.dim), |(i, j)| xs[i][j])
    }

    /// Scores and Jacobians at per-point times.
    pub fn jets_at(&self, times: &[f64], xs: &[[f64; 2]]) -> Result<Vec<ScoreJet>> {
        let pass = self.run(times, &self.to_array(xs), true)?;
        let d = self.dim;
        (0..xs.len())
            .map(|i| {
                let inv_sigma = 1.0 / VpSchedule::sigma(times[i]);
                let mut score = [0.0; 2];
                let mut jac = SquareMat::zeros(d);
                for r in 0..d {
                    score[r] = pass.raw[[i, r]] * inv_sigma;
                    for c in 0..d {
                        jac.a[r][c] = pass.tangents[c][[i, r]] * inv_sigma;
                    }
                }
                if !score.iter().all(|v| v.is_finite()) || !jac.is_finite() {
                    return Err(VpError::NonFinite(format!("learned score at t={}", times[i])));
                }
                Ok(ScoreJet { score, jacobian: jac })
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            "learned_score",
            self.seed,
            json!({"dim": self.dim, "horizon": self.horizon, "config": self.config}),
        );
        ck.put("embedding.frequencies", &self.embedding.frequencies);
        ck.put_net("embedding.net", &self.embedding.net);
        ck.put_net("input", &self.input);
        for (k, b) in self.blocks.iter().enumerate() {
            ck.put_net(&format!("block{k}"), b);
        }
        ck.put_net("output", &self.output);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "learned_score" {
            return Err(VpError::Checkpoint(format!("expected a learned_score checkpoint, found '{}'", ck.kind)));
        }
        let meta = &ck.metadata;
        let dim = meta["dim"].as_u64().ok_or_else(|| VpError::Checkpoint("missing dim".into()))? as usize;
        let horizon = meta["horizon"].as_f64().ok_or_else(|| VpError::Checkpoint("missing horizon".into()))?;
        let config: ScoreNetConfig =
            serde_json::from_value(meta["config"].clone()).map_err(|e| VpError::Checkpoint(e.to_string()))?;
        let mut m = Self::new(dim, &config, horizon, ck.seed)?;
        m.embedding.frequencies = ck.get("embedding.frequencies")?;
        if m.embedding.frequencies.len() != config.n_freq {
            return Err(VpError::Checkpoint("frequency count mismatch".into()));
        }
        ck.load_net("embedding.net", &mut m.embedding.net)?;
        ck.load_net("input", &mut m.input)?;
        for k in 0..m.blocks.len() {
            ck.load_net(&format!("block{k}"), &mut m.blocks[k])?;
        }
        ck.load_net("output", &mut m.output)?;
        Ok(m)
    }
}

impl TimeScore for LearnedScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_at(&self, times: &[f64], xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let pass = self.run(times, &self.to_array(xs), false)?;
        Ok((0..xs.len())
            .map(|i| {
                let inv_sigma = 1.0 / VpSchedule::sigma(times[i]);
                let mut s = [0.0; 2];
                for r in 0..self.dim {
                    s[r] = pass.raw[[i, r]] * inv_sigma;
                }
                s
            })
            .collect())
    }
}

impl ScoreField for LearnedScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn min_time(&self) -> f64 {
        f64::MIN_POSITIVE
    }

    fn jet(&self, t: f64, x: &[f64]) -> Result<ScoreJet> {
        if x.len() != self.dim {
            return Err(VpError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let mut p = [0.0; 2];
        p[..self.dim].copy_from_slice(x);
        Ok(self.jets_at(&[t], &[p])?[0])
    }

    fn jet_batch(&self, t: f64, xs: &[[f64; 2]]) -> Result<Vec<ScoreJet>> {
        self.jets_at(&vec![t; xs.len()], xs)
    }

    fn score_batch(&self, t: f64, xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        self.score_at(&vec![t; xs.len()], xs)
    }

    fn prefers_batch(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsmConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Lower cutoff for the training time distribution.
    pub delta_train: f64,
    pub lr: f64,
    /// Learning rate at the last step; the schedule is cosine from `lr`.
    pub lr_final: f64,
    pub ema_decay: f64,
    pub log_every: usize,
    /// How training times are drawn; `dsm_loss` always uses uniform times.
    pub time_sampling: TimeSampling,
    pub network: ScoreNetConfig,
}

/// Training-time distribution on [δ_train, T].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    /// Equal mixture of uniform and log-uniform draws.
    UniformLogMix,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            horizon: 3.0,
            batch_size: 256,
            steps: 20_000,
            seed: 0,
            delta_train: 1e-4,
            lr: 1e-3,
            lr_final: 1e-5,
            ema_decay: 0.99,
            log_every: 100,
            time_sampling: TimeSampling::UniformLogMix,
            network: ScoreNetConfig::default(),
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("T", "must be positive"));
        }
        if !(self.delta_train >= 0.0 && self.delta_train < self.horizon) {
            return Err(invalid("delta_train", "must satisfy 0 ≤ delta_train < T"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0) {
            return Err(invalid("lr", "learning rates must be positive"));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("ema_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_error: (var / n as f64).sqrt(), n }
    }
}

/// One DSM draw: clean point, time and noise.
struct DsmBatch {
    times: Vec<f64>,
    noisy: Vec<[f64; 2]>,
    noise: Vec<[f64; 2]>,
}

fn draw_batch(target: &TargetDensity, lo: f64, hi: f64, n: usize, rng: &mut ChaCha8Rng) -> DsmBatch {
    draw_batch_with(target, lo, hi, n, TimeSampling::Uniform, rng)
}

fn draw_batch_with(target: &TargetDensity, lo: f64, hi: f64, n: usize, sampling: TimeSampling, rng: &mut ChaCha8Rng) -> DsmBatch {
    let d = target.dim;
    // log-uniform draws need a positive lower end
    let log_lo = lo.max(1e-6 * hi).ln();
    let mut b = DsmBatch { times: Vec::with_capacity(n), noisy: Vec::with_capacity(n), noise: Vec::with_capacity(n) };
    for _ in 0..n {
        let x0 = target.sample_one(rng);
        let t: f64 = match sampling {
            _ if hi <= lo => lo,
            TimeSampling::UniformLogMix if rng.gen::<bool>() => rng.gen_range(log_lo..hi.ln()).exp(),
            _ => rng.gen_range(lo..hi),
        };
        let (a, sig) = (VpSchedule::a(t), VpSchedule::sigma(t));
        let mut z = [0.0; 2];
        let mut xt = [0.0; 2];
        for j in 0..d {
            z[j] = StandardNormal.sample(rng);
            xt[j] = a * x0[j] + sig * z[j];
        }
        b.times.push(t);
        b.noisy.push(xt);
        b.noise.push(z);
    }
    b
}

/// σ²(t)‖s(t, x_t) + z/σ(t)‖², written as ‖σ s + z‖² so that t near 0 stays finite.
fn dsm_terms(score: &dyn TimeScore, batch: &DsmBatch) -> Result<Vec<f64>> {
    let d = score.dim();
    let s = score.score_at(&batch.times, &batch.noisy)?;
    Ok(s.iter()
        .zip(&batch.noise)
        .zip(&batch.times)
        .map(|((si, zi), t)| {
            let sig = VpSchedule::sigma(*t);
            (0..d).map(|j| (sig * si[j] + zi[j]).powi(2)).sum()
        })
        .collect())
}

/// Monte Carlo DSM loss E[σ²(t)‖s(t, x_t) + z/σ(t)‖²] with t ~ U(δ_train, T),
/// using `n` draws from `batch_seed`.
pub fn dsm_loss(score: &dyn TimeScore, target: &TargetDensity, cfg: &DsmConfig, batch_seed: u64, n: usize) -> Result<McEstimate> {
    cfg.validate()?;
    if score.dim() != target.dim {
        return Err(VpError::DimensionMismatch { expected: target.dim, got: score.dim() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
    let mut terms = Vec::with_capacity(n);
    let chunk = 4096;
    let mut left = n;
    while left > 0 {
        let m = left.min(chunk);
        let b = draw_batch(target, cfg.delta_train, cfg.horizon, m, &mut rng);
        terms.extend(dsm_terms(score, &b)?);
        left -= m;
    }
    Ok(McEstimate::from_samples(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss_ema: f64,
}

pub struct TrainOutcome {
    pub model: LearnedScore,
    pub log: Vec<LogEntry>,
}

/// Trains a [`LearnedScore`] by denoising score matching with Adam and a
/// cosine learning-rate schedule.
pub fn train_dsm(target: &TargetDensity, cfg: &DsmConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = LearnedScore::new(target.dim, &cfg.network, cfg.horizon, cfg.seed)?;
    let mut params = model.params();
    let mut adam = AdamState::new(params.len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut ema = f64::NAN;
    let mut log = Vec::new();
    let d = target.dim;
    for step in 0..cfg.steps {
        let b = draw_batch_with(target, cfg.delta_train, cfg.horizon, cfg.batch_size, cfg.time_sampling, &mut rng);
        let xs = Array2::from_shape_fn((b.noisy.len(), d), |(i, j)| b.noisy[i][j]);
        let pass = model.run(&b.times, &xs, false)?;
        let resid = Array2::from_shape_fn(pass.raw.raw_dim(), |(i, j)| pass.raw[[i, j]] + b.noise[i][j]);
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / cfg.batch_size as f64;
        ema = if ema.is_nan() { loss } else { cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * loss };
        if !ema.is_finite() {
            return Err(VpError::Diverged { step, reason: format!("loss EMA became {ema} (last batch loss {loss})") });
        }
        let adj = resid * (2.0 / cfg.batch_size as f64);
        let grads = model.backward(&pass.caches, &adj);
        let progress = step as f64 / cfg.steps.max(1) as f64;
        adam.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.step(&mut params, &grads).map_err(|e| match e {
            VpError::Diverged { reason, .. } => VpError::Diverged { step, reason },
            other => other,
        })?;
        model.set_params(&params)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            log.push(LogEntry { step, loss_ema: ema });
        }
    }
    Ok(TrainOutcome { model, log })
}

/// ℰ_{δ,T} estimate with the number of tail-guard resamples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreErrorEstimate {
    pub estimate: McEstimate,
    pub resampled: usize,
}

/// Monte Carlo estimate of ∫_δ^T E_{p_t}‖s_t − ŝ_t‖² dt with each term scaled
/// by (T − δ). Times are uniform on (δ, T), stratified into n/2 equal cells
/// with two independent draws per cell, which keeps every draw marginally
/// uniform and gives an unbiased variance estimate from the within-cell
/// differences. `n_mc` is rounded up to an even count. Points where the
/// exact score fails its tail guard are redrawn, up to 1% of the budget.
pub fn score_error(
    score: &dyn TimeScore,
    model: &VpScoreModel,
    delta: f64,
    horizon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<ScoreErrorEstimate> {
    if !(delta > 0.0 || (delta == 0.0 && model.allows_time_zero())) || !(horizon > delta) {
        return Err(invalid("delta", "need 0 < δ < T (δ = 0 only for classes A3/A4)"));
    }
    if n_mc == 0 {
        return Err(invalid("n_mc", "must be positive"));
    }
    let target = &model.target;
    let d = target.dim;
    let strata = n_mc.div_ceil(2);
    let n = 2 * strata;
    let cell = (horizon - delta) / strata as f64;
    let budget = n / 100;
    let mut resampled = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(n);
    let mut pts = Vec::with_capacity(n);
    let mut exact = Vec::with_capacity(n);
    for i in 0..n {
        let lo = delta + cell * (i / 2) as f64;
        loop {
            let t = (lo + cell * rng.gen::<f64>()).max(f64::MIN_POSITIVE);
            let x0 = target.sample_one(&mut rng);
            let (a, sig) = (VpSchedule::a(t), VpSchedule::sigma(t));
            let mut x = [0.0; 2];
            for j in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[j] = a * x0[j] + sig * z;
            }
            match model.evaluate(t, &x[..d]) {
                Ok(e) => {
                    times.push(t);
                    pts.push(x);
                    exact.push(e.score);
                    break;
                }
                Err(VpError::TailUnderflow { .. }) => {
                    resampled += 1;
                    if resampled > budget {
                        return Err(VpError::ResampleBudget { failures: resampled });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    let mut terms = Vec::with_capacity(n);
    for (tc, (pc, ec)) in times.chunks(4096).zip(pts.chunks(4096).zip(exact.chunks(4096))) {
        let approx = score.score_at(tc, pc)?;
        for (e, a) in ec.iter().zip(&approx) {
            let diff: Vec<f64> = (0..d).map(|j| e[j] - a[j]).collect();
            terms.push(norm_sq(&diff) * (horizon - delta));
        }
    }
    let mean = terms.iter().sum::<f64>() / n as f64;
    let var: f64 = terms.chunks(2).map(|p| 0.25 * (p[0] - p[1]).powi(2)).sum::<f64>() / (strata * strata) as f64;
    Ok(ScoreErrorEstimate { estimate: McEstimate { mean, std_error: var.sqrt(), n }, resampled })
}

/// Settings for [`girsanov_kl_check`].
#[derive(Debug, Clone)]
pub struct GirsanovSettings {
    pub grid: GridSpec,
    pub n_mc: usize,
    pub seed: u64,
    pub integrator: IntegratorConfig,
}

/// Compares KL(p_δ‖q_δ) against ½ℰ_{δ,T} + KL(p_T‖p_Z), where q_δ is the
/// pullback of N(0, I) through the flow of `learned` from δ to T. The learned
/// flow is assumed to transport q_δ onto p_Z; its normalization defect
/// |∫q_δ − 1| is reported so the assumption can be judged.
///
/// Also reports the L1 decomposition
/// `‖p_H − q_δ‖ ≤ ‖p_H − exact pullback‖ + √(2(½ℰ + kl_T)) + ‖p_T − p_Z‖`.
pub fn girsanov_kl_check<S>(learned: &S, model: &VpScoreModel, delta: f64, horizon: f64, settings: &GirsanovSettings) -> Result<MetricReport>
where
    S: ScoreField + TimeScore,
{
    let grid = &settings.grid;
    grid.validate()?;
    if grid.dim() != model.dim() || ScoreField::dim(learned) != model.dim() {
        return Err(VpError::DimensionMismatch { expected: model.dim(), got: grid.dim() });
    }
    let err = score_error(learned, model, delta, horizon, settings.n_mc, settings.seed)?;
    let pts = grid.points();

    let log_pd = tabulate(grid, |x| model.marginal_log_pdf(delta, x))?;
    let log_qd = pullback_logpdf_many(&FlowField::new(learned), delta, horizon, &pts, &settings.integrator)?;
    let kl_lhs = kl_from_log_values(&log_pd, &log_qd, grid)?;

    let log_pt = tabulate(grid, |x| model.marginal_log_pdf(horizon, x))?;
    let log_pz: Vec<f64> = pts.iter().map(|x| std_normal_log_pdf(x)).collect();
    let kl_t = kl_from_log_values(&log_pt, &log_pz, grid)?;
    let half_e = 0.5 * err.estimate.mean;
    let kl_rhs = half_e + kl_t;

    let exp = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.exp()).collect() };
    let qd = exp(&log_qd);
    let ph = tabulate(grid, |x| Ok(model.target.pdf(x)))?;
    let log_exact = pullback_logpdf_many(&FlowField::new(model), delta, horizon, &pts, &settings.integrator)?;
    let l1_learned = l1_from_values(&ph, &qd, grid)?;
    let l1_exact = l1_from_values(&ph, &exp(&log_exact), grid)?;
    let l1_t = l1_from_values(&exp(&log_pt), &exp(&log_pz), grid)?;
    let l1_rhs = l1_exact + (2.0 * kl_rhs.max(0.0)).sqrt() + l1_t;

    let mut rep = MetricReport::new(format!("girsanov/{}", model.target.name));
    rep.insert("E_dT", err.estimate.mean);
    rep.insert("E_dT_se", err.estimate.std_error);
    rep.insert("kl_lhs", kl_lhs);
    rep.insert("kl_T", kl_t);
    rep.insert("kl_rhs", kl_rhs);
    rep.insert("slack", kl_rhs - kl_lhs);
    rep.insert("norm_defect", (grid.integrate(&qd) - 1.0).abs());
    rep.insert("l1_learned", l1_learned);
    rep.insert("l1_exact", l1_exact);
    rep.insert("l1_T", l1_t);
    rep.insert("l1_decomposition_slack", l1_rhs - l1_learned);
    rep.meta("delta", json!(delta));
    rep.meta("T", json!(horizon));
    rep.meta("n_mc", json!(settings.n_mc));
    rep.meta("seed", json!(settings.seed));
    rep.meta("resampled", json!(err.resampled));
    rep.meta("grid", serde_json::to_value(grid).unwrap_or_default());
    rep.meta("assumption", json!("learned flow shares the marginals of its own score; measured by norm_defect"));
    Ok(rep)
}

/// Largest spectral norm of the score Jacobian over `grid` at time `t`.
pub fn field_lipschitz(field: &dyn ScoreField, t: f64, grid: &[Vec<f64>]) -> Result<f64> {
    let d = field.dim();
    let pts: Vec<[f64; 2]> = grid
        .iter()
        .map(|x| {
            let mut p = [0.0; 2];
            p[..d].copy_from_slice(&x[..d]);
            p
        })
        .collect();
    let jets = field.jet_batch(t, &pts)?;
    Ok(jets.iter().map(|j| j.jacobian.op_norm()).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::{make_builtin_target, Params};

    fn normal_model() -> VpScoreModel {
        VpScoreModel::new(make_builtin_target("gaussian", &Params::new()).unwrap()).unwrap()
    }

    #[test]
    fn dsm_floor_for_true_gaussian_score() {
        let model = normal_model();
        let cfg = DsmConfig { delta_train: 0.0, ..Default::default() };
        let truth = FnScore { dim: 1, f: |_t: f64, x: &[f64]| Ok([-x[0], 0.0]) };
        let est = dsm_loss(&truth, &model.target, &cfg, 17, 100_000).unwrap();
        let population = (1.0 - (-3.0f64).exp()) / 3.0;
        assert!((population - 0.31674).abs() < 1e-5);
        assert!((est.mean - population).abs() < 3.0 * est.std_error, "{est:?}");
        let zero = FnScore { dim: 1, f: |_t: f64, _x: &[f64]| Ok([0.0, 0.0]) };
        assert!(dsm_loss(&zero, &model.target, &cfg, 17, 100_000).unwrap().mean > est.mean);
        assert_eq!(dsm_loss(&truth, &model.target, &cfg, 5, 1000).unwrap(), dsm_loss(&truth, &model.target, &cfg, 5, 1000).unwrap());
    }

    #[test]
    fn score_error_of_exact_and_offset_scores() {
        let model = VpScoreModel::new(make_builtin_target("gmm1d", &Params::new()).unwrap()).unwrap();
        let e = score_error(&model, &model, 0.01, 3.0, 20_000, 3).unwrap();
        assert_eq!(e.estimate.mean, 0.0);
        let c = 0.3;
        let shifted = FnScore {
            dim: 1,
            f: |t: f64, x: &[f64]| {
                let s = model.evaluate(t, x)?.score;
                Ok([s[0] + c, 0.0])
            },
        };
        let e = score_error(&shifted, &model, 0.01, 3.0, 5_000, 3).unwrap();
        assert!((e.estimate.mean - c * c * (3.0 - 0.01)).abs() < 1e-12);
        assert!(score_error(&model, &model, 0.5, 0.5, 10, 0).is_err());
    }

    fn tiny_config(steps: usize) -> DsmConfig {
        DsmConfig {
            steps,
            batch_size: 32,
            network: ScoreNetConfig { n_freq: 4, embed_width: 8, width: 16, blocks: 2, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn learned_jacobian_matches_finite_differences() {
        let m = LearnedScore::new(2, &tiny_config(0).network, 3.0, 4).unwrap();
        let x = [0.3, -0.6];
        let jet = m.jet(0.4, &x).unwrap();
        let h = 1e-5;
        for c in 0..2 {
            let mut xp = x;
            xp[c] += h;
            let mut xm = x;
            xm[c] -= h;
            let (sp, sm) = (ScoreField::score(&m, 0.4, &xp).unwrap(), ScoreField::score(&m, 0.4, &xm).unwrap());
            for r in 0..2 {
                assert!(((sp[r] - sm[r]) / (2.0 * h) - jet.jacobian.a[r][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let target = make_builtin_target("gmm1d", &Params::new()).unwrap();
        let cfg = tiny_config(0);
        let m = LearnedScore::new(1, &cfg.network, 3.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = draw_batch(&target, 0.05, 3.0, 8, &mut rng);
        let xs = Array2::from_shape_fn((8, 1), |(i, _)| b.noisy[i][0]);
        let loss = |m: &LearnedScore| -> f64 {
            let p = m.run(&b.times, &xs, false).unwrap();
            (0..8).map(|i| (p.raw[[i, 0]] + b.noise[i][0]).powi(2)).sum::<f64>()
        };
        let pass = m.run(&b.times, &xs, false).unwrap();
        let adj = Array2::from_shape_fn((8, 1), |(i, _)| 2.0 * (pass.raw[[i, 0]] + b.noise[i][0]));
        let g = m.backward(&pass.caches, &adj);
        let p0 = m.params();
        let h = 1e-5;
        for k in (0..p0.len()).step_by(7) {
            let mut mm = m.clone();
            let mut p = p0.clone();
            p[k] += h;
            mm.set_params(&p).unwrap();
            let fp = loss(&mm);
            p[k] -= 2.0 * h;
            mm.set_params(&p).unwrap();
            let fm = loss(&mm);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-4 * (1.0f64).max(fd.abs()), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let target = make_builtin_target("gaussian", &Params::new()).unwrap();
        let cfg = tiny_config(300);
        let a = train_dsm(&target, &cfg).unwrap();
        let b = train_dsm(&target, &cfg).unwrap();
        assert_eq!(a.model.to_checkpoint().to_json_string(), b.model.to_checkpoint().to_json_string());
        assert!(a.log.last().unwrap().loss_ema < a.log[0].loss_ema);
        let back = LearnedScore::from_checkpoint(&Checkpoint::from_json_str(&a.model.to_checkpoint().to_json_string()).unwrap()).unwrap();
        assert_eq!(back, a.model);
    }

    #[test]
    fn girsanov_with_exact_score() {
        let model = VpScoreModel::new(make_builtin_target("gmm1d", &Params::new()).unwrap()).unwrap();
        let settings = GirsanovSettings {
            grid: GridSpec::default_1d(),
            n_mc: 2000,
            seed: 1,
            integrator: IntegratorConfig::default(),
        };
        let rep = girsanov_kl_check(&model, &model, 0.01, 3.0, &settings).unwrap();
        // KL is invariant under the bijective exact flow, so lhs equals kl_T
        assert!((rep.get("kl_lhs").unwrap() - rep.get("kl_T").unwrap()).abs() < 1e-6);
        assert!(rep.get("slack").unwrap() >= -1e-3);
        assert!(rep.get("l1_decomposition_slack").unwrap() >= 0.0);
        assert!(rep.get("E_dT").unwrap() == 0.0);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(DsmConfig { delta_train: 5.0, ..Default::default() }.validate().is_err());
        assert!(DsmConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(serde_json::from_str::<DsmConfig>(r#"{"stpes": 3}"#).is_err());
        assert!(LearnedScore::new(3, &ScoreNetConfig::default(), 3.0, 0).is_err());
    }
}
