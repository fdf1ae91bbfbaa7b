//! Variance-preserving diffusion: schedule, diffused marginals, exact scores,
//! score Jacobians and the class-specific score Lipschitz bounds.
//!
//! Three evaluation engines sit behind [`VpScoreModel`]:
//!
//! * Gaussian mixtures are diffused analytically, component by component.
//! * Box unions and the triangular density are piecewise linear on a finite
//!   union of boxes, so the diffused marginal and the posterior moments have a
//!   closed form in terms of truncated normal moments. These are computed on a
//!   log scale, which keeps them usable far outside the support at small `t`.
//! * Everything else (arc measures, grid densities, smooth densities without a
//!   closed form) is reduced to weighted quadrature atoms. The diffused marginal
//!   of the discretized measure is again a Gaussian mixture, so the score,
//!   Jacobian and log density stay mutually consistent to rounding.

use crate::error::{Result, VpError};
use crate::linalg::{log_sum_exp, SquareMat};
use crate::quadrature::{composite_with_budget, scan_golden_min};
use crate::special::{mills_ratio, std_normal_sf, LN_2PI};
use crate::targets::{cubic_log_pdf, ClassTag, TargetDensity, TargetKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

/// Quadrature nodes per support piece for densities without a closed form.
pub const DENSITY_NODES: usize = 400;

/// Atoms whose log weight falls this far below the largest are skipped.
const ATOM_CUTOFF: f64 = 50.0;

/// The VP schedule with unit diffusion rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VpSchedule;

impl VpSchedule {
    pub fn a(t: f64) -> f64 {
        (-0.5 * t).exp()
    }

    pub fn a2(t: f64) -> f64 {
        (-t).exp()
    }

    pub fn sigma2(t: f64) -> f64 {
        -(-t).exp_m1()
    }

    pub fn sigma(t: f64) -> f64 {
        Self::sigma2(t).sqrt()
    }
}

/// `a(t) x0 + σ(t) z` with `z` drawn from a generator seeded by `seed`.
pub fn forward_sample(x0: &[f64], t: f64, seed: u64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(VpError::TimeOutOfRange { t, lo: 0.0, hi: f64::INFINITY });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, s) = (VpSchedule::a(t), VpSchedule::sigma(t));
    Ok(x0
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            a * v + s * z
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScoreMethod {
    AnalyticGmm,
    QuadraturePosterior,
}

/// Density factor `c0 + c1·y` on `[lo, hi]` along one axis.
#[derive(Debug, Clone, Copy)]
struct Factor {
    lo: f64,
    hi: f64,
    c0: f64,
    c1: f64,
}

/// A box on which the density is a product of per-axis linear factors.
#[derive(Debug, Clone)]
struct Piece([Factor; 2]);

#[derive(Debug, Clone)]
enum Engine {
    Mixture(crate::targets::GaussianMixture),
    Pieces(Vec<Piece>),
    Atoms {
        atoms: Vec<[f64; 2]>,
        log_w: Vec<f64>,
        smoothing: SquareMat,
    },
}

/// Marginal log density, score, score Jacobian and posterior mean at one `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalEval {
    pub dim: usize,
    pub log_p: f64,
    pub score: [f64; 2],
    pub jacobian: SquareMat,
    /// Posterior mean of the clean variable given the noisy one.
    pub posterior_mean: [f64; 2],
}

/// Exact VP marginals and scores for one target.
#[derive(Debug, Clone)]
pub struct VpScoreModel {
    pub target: TargetDensity,
    pub method: ScoreMethod,
    /// Number of quadrature atoms (zero for the analytic engines).
    pub quadrature_nodes: usize,
    engine: Engine,
}

impl VpScoreModel {
    pub fn new(target: TargetDensity) -> Result<Self> {
        let (method, engine) = match &target.kind {
            TargetKind::Mixture(gm) => {
                let mut gm = gm.clone();
                gm.ensure_cache();
                (ScoreMethod::AnalyticGmm, Engine::Mixture(gm))
            }
            TargetKind::Boxes(boxes) => {
                let pieces = boxes
                    .iter()
                    .map(|b| {
                        let mut f = [Factor { lo: 0.0, hi: 1.0, c0: 1.0, c1: 0.0 }; 2];
                        for i in 0..target.dim {
                            f[i] = Factor { lo: b.lo[i], hi: b.hi[i], c0: 1.0, c1: 0.0 };
                        }
                        f[0].c0 = b.density;
                        Piece(f)
                    })
                    .collect();
                (ScoreMethod::QuadraturePosterior, Engine::Pieces(pieces))
            }
            TargetKind::Triangular => {
                let unit = Factor { lo: 0.0, hi: 1.0, c0: 1.0, c1: 0.0 };
                let pieces = vec![
                    Piece([Factor { lo: -1.0, hi: 0.0, c0: 1.0, c1: 1.0 }, unit]),
                    Piece([Factor { lo: 0.0, hi: 1.0, c0: 1.0, c1: -1.0 }, unit]),
                ];
                (ScoreMethod::QuadraturePosterior, Engine::Pieces(pieces))
            }
            TargetKind::CubicPullback => {
                let mut atoms = Vec::new();
                let mut log_w = Vec::new();
                for (lo, hi) in target.density_pieces() {
                    let (y, w) = composite_with_budget(lo, hi, DENSITY_NODES);
                    for (yi, wi) in y.iter().zip(&w) {
                        atoms.push([*yi, 0.0]);
                        log_w.push(wi.ln() + cubic_log_pdf(*yi));
                    }
                }
                let engine = Engine::Atoms { atoms, log_w, smoothing: SquareMat::zeros(1) };
                (ScoreMethod::QuadraturePosterior, engine)
            }
            TargetKind::Convolution(conv) => {
                let (pts, lm) = conv.atoms();
                let atoms = pts
                    .iter()
                    .map(|p| [p[0], if p.len() > 1 { p[1] } else { 0.0 }])
                    .collect();
                let engine = Engine::Atoms { atoms, log_w: lm.to_vec(), smoothing: conv.smoothing };
                (ScoreMethod::QuadraturePosterior, engine)
            }
        };
        let quadrature_nodes = match &engine {
            Engine::Atoms { atoms, .. } => atoms.len(),
            _ => 0,
        };
        Ok(Self { target, method, quadrature_nodes, engine })
    }

    pub fn dim(&self) -> usize {
        self.target.dim
    }

    pub fn class_tag(&self) -> ClassTag {
        self.target.class_tag
    }

    /// Whether scores are defined at `t = 0` (smooth targets only).
    pub fn allows_time_zero(&self) -> bool {
        matches!(self.target.class_tag, ClassTag::A3 | ClassTag::A4)
    }

    /// Smallest admissible time for score evaluation.
    pub fn min_time(&self) -> f64 {
        if self.allows_time_zero() {
            0.0
        } else {
            f64::MIN_POSITIVE
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let ok = t.is_finite() && (t > 0.0 || (t == 0.0 && self.allows_time_zero()));
        if ok {
            Ok(())
        } else {
            let lo = if self.allows_time_zero() { 0.0 } else { f64::MIN_POSITIVE };
            Err(VpError::TimeOutOfRange { t, lo, hi: f64::INFINITY })
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<[f64; 2]> {
        if x.len() != self.dim() {
            return Err(VpError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(VpError::NonFinite(format!("query point {x:?}")));
        }
        let mut p = [0.0; 2];
        p[..x.len()].copy_from_slice(x);
        Ok(p)
    }

    /// Log density, score, Jacobian and posterior mean in one pass.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> Result<MarginalEval> {
        self.check_time(t)?;
        let p = self.check_point(x)?;
        let out = match &self.engine {
            Engine::Mixture(gm) => eval_mixture(gm, t, p),
            Engine::Pieces(pieces) => eval_pieces(pieces, self.dim(), t, p),
            Engine::Atoms { atoms, log_w, smoothing } => eval_atoms(atoms, log_w, smoothing, t, p),
        };
        match out {
            Some(e) if e.log_p.is_finite() && e.jacobian.is_finite() => Ok(e),
            _ => Err(VpError::TailUnderflow { t, x: x.to_vec() }),
        }
    }

    pub fn marginal_log_pdf(&self, t: f64, x: &[f64]) -> Result<f64> {
        if t == 0.0 {
            self.check_point(x)?;
            return Ok(self.target.log_pdf(x));
        }
        if !(t > 0.0) || !t.is_finite() {
            return Err(VpError::TimeOutOfRange { t, lo: 0.0, hi: f64::INFINITY });
        }
        match self.evaluate(t, x) {
            Ok(e) => Ok(e.log_p),
            // a point with zero mass everywhere it can reach has log density -inf
            Err(VpError::TailUnderflow { .. }) => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    pub fn marginal_pdf(&self, t: f64, x: &[f64]) -> Result<f64> {
        if t == 0.0 {
            self.check_point(x)?;
            return Ok(self.target.pdf(x));
        }
        self.marginal_log_pdf(t, x).map(f64::exp)
    }

    pub fn score(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.evaluate(t, x)?;
        Ok(e.score[..e.dim].to_vec())
    }

    pub fn score_jacobian(&self, t: f64, x: &[f64]) -> Result<SquareMat> {
        Ok(self.evaluate(t, x)?.jacobian)
    }

    pub fn posterior_mean(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let e = self.evaluate(t, x)?;
        Ok(e.posterior_mean[..e.dim].to_vec())
    }

    /// The score Lipschitz bound of the target's class on `[0, horizon]`
    /// (or `(0, horizon]` for classes without regularity at `t = 0`).
    pub fn lipschitz_bound(&self, horizon: f64) -> Result<LipschitzBound> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(crate::error::invalid("horizon", "must be positive and finite"));
        }
        let class_tag = self.class_tag();
        match class_tag {
            ClassTag::A1 => Ok(LipschitzBound {
                class_tag,
                horizon,
                radius: self.target.support_radius,
                lambda_min: None,
                constant: None,
            }),
            ClassTag::A2 => Ok(LipschitzBound { class_tag, horizon, radius: 0.0, lambda_min: None, constant: None }),
            ClassTag::A3 | ClassTag::A4 => {
                let (smoothings, radius) = match (&self.engine, &self.target.kind) {
                    (Engine::Mixture(gm), _) => (
                        gm.covariances.clone(),
                        gm.means.iter().map(|m| crate::linalg::norm(m)).fold(0.0, f64::max),
                    ),
                    (Engine::Atoms { smoothing, .. }, TargetKind::Convolution(conv)) => {
                        (vec![*smoothing], conv.base_radius())
                    }
                    _ => unreachable!("A3/A4 targets are mixtures or convolutions"),
                };
                let lambda = smoothings
                    .iter()
                    .map(|c| min_kernel_eigenvalue(c, horizon))
                    .fold(f64::INFINITY, f64::min);
                let constant = 1.0 / lambda + radius * radius / (lambda * lambda);
                Ok(LipschitzBound {
                    class_tag,
                    horizon,
                    radius,
                    lambda_min: Some(lambda),
                    constant: Some(constant),
                })
            }
            ClassTag::General => Err(crate::error::invalid(
                "class",
                "no score Lipschitz bound is available for this target class",
            )),
        }
    }
}

/// min over t ∈ [0, horizon] of the smallest eigenvalue of a(t)²Σ + σ²(t)I.
fn min_kernel_eigenvalue(sigma: &SquareMat, horizon: f64) -> f64 {
    let f = |t: f64| {
        let s = sigma.scale(VpSchedule::a2(t)).add(&SquareMat::scalar(sigma.dim, VpSchedule::sigma2(t)));
        s.sym_eigenvalues()[0]
    };
    let (_, v) = scan_golden_min(&f, 0.0, horizon, 1001);
    // the scan includes both endpoints; golden refinement may only lower it
    v.min(f(0.0)).min(f(horizon))
}

/// Class-specific bound L(t) on the operator norm of the score Jacobian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzBound {
    pub class_tag: ClassTag,
    /// Upper end T of the validity interval.
    pub horizon: f64,
    /// Support radius (A1) or base-measure radius (A3/A4).
    pub radius: f64,
    /// Smallest eigenvalue of the diffused kernel covariance over [0, T] (A3/A4).
    pub lambda_min: Option<f64>,
    /// Time-uniform constant M_T (A3/A4).
    pub constant: Option<f64>,
}

impl LipschitzBound {
    /// Lower end of the validity interval and whether it is included.
    pub fn validity(&self) -> (f64, bool, f64) {
        match self.class_tag {
            ClassTag::A3 | ClassTag::A4 => (0.0, true, self.horizon),
            _ => (0.0, false, self.horizon),
        }
    }

    pub fn at(&self, t: f64) -> Result<f64> {
        theoretical_l(self, t)
    }
}

/// Evaluates the class bound at time `t`.
pub fn theoretical_l(bound: &LipschitzBound, t: f64) -> Result<f64> {
    let (lo, closed, hi) = bound.validity();
    let inside = t.is_finite() && t <= hi * (1.0 + 1e-12) && (t > lo || (closed && t == lo));
    if !inside {
        return Err(VpError::TimeOutOfRange { t, lo, hi });
    }
    let decay = (-t).exp();
    let noise = -(-t).exp_m1();
    Ok(match bound.class_tag {
        ClassTag::A1 => {
            1.0 + decay * bound.radius * bound.radius / (noise * noise) + decay / noise
        }
        ClassTag::A2 => 2.0 / noise,
        ClassTag::A3 | ClassTag::A4 => bound.constant.expect("constant set for A3/A4"),
        ClassTag::General => unreachable!("no bound is constructed for General"),
    })
}

/// Largest score Jacobian operator norm over a point set.
pub fn empirical_l(model: &VpScoreModel, t: f64, grid: &[Vec<f64>]) -> Result<f64> {
    if grid.is_empty() {
        return Err(crate::error::invalid("grid", "must be nonempty"));
    }
    grid.par_iter()
        .map(|x| model.score_jacobian(t, x).map(|j| j.op_norm()))
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))
}

fn eval_mixture(gm: &crate::targets::GaussianMixture, t: f64, x: [f64; 2]) -> Option<MarginalEval> {
    let dim = gm.dim;
    let (a, s2) = (VpSchedule::a(t), VpSchedule::sigma2(t));
    let k = gm.n_components();
    let mut l = vec![0.0; k];
    let mut grads = vec![[0.0; 2]; k];
    let mut invs = vec![SquareMat::zeros(dim); k];
    for c in 0..k {
        let s = gm.covariances[c].scale(a * a).add(&SquareMat::scalar(dim, s2));
        let inv = s.inverse()?;
        let mut d = [0.0; 2];
        for i in 0..dim {
            d[i] = x[i] - a * gm.means[c][i];
        }
        let g = inv.matvec(&d[..dim]);
        let q: f64 = g.iter().zip(&d).map(|(u, v)| u * v).sum();
        l[c] = gm.weights[c].ln() - 0.5 * (dim as f64 * LN_2PI + s.det().ln() + q);
        for i in 0..dim {
            grads[c][i] = -g[i];
        }
        invs[c] = inv;
    }
    let log_p = log_sum_exp(&l);
    let mut score = [0.0; 2];
    let mut resp = vec![0.0; k];
    for c in 0..k {
        resp[c] = (l[c] - log_p).exp();
        for i in 0..dim {
            score[i] += resp[c] * grads[c][i];
        }
    }
    // Hessian of log p_t = Σ r_k (−S_k⁻¹ + (g_k − s)(g_k − s)ᵀ)
    let mut jac = SquareMat::zeros(dim);
    let mut mean = [0.0; 2];
    for c in 0..k {
        let r = resp[c];
        if r == 0.0 {
            continue;
        }
        for i in 0..dim {
            for j in 0..dim {
                let di = grads[c][i] - score[i];
                let dj = grads[c][j] - score[j];
                jac.a[i][j] += r * (-invs[c].a[i][j] + di * dj);
            }
        }
        // posterior mean of Y within component c: m + aΣ_c S_c⁻¹ (x − a m)
        let sig = &gm.covariances[c];
        let cross = sig.matvec(&grads[c][..dim]);
        for i in 0..dim {
            mean[i] += r * (gm.means[c][i] - a * cross[i]);
        }
    }
    Some(MarginalEval { dim, log_p, score, jacobian: jac, posterior_mean: mean })
}

fn eval_atoms(
    atoms: &[[f64; 2]],
    log_w: &[f64],
    smoothing: &SquareMat,
    t: f64,
    x: [f64; 2],
) -> Option<MarginalEval> {
    let dim = smoothing.dim;
    let (a, s2) = (VpSchedule::a(t), VpSchedule::sigma2(t));
    let s = smoothing.scale(a * a).add(&SquareMat::scalar(dim, s2));
    let inv = s.inverse()?;
    let log_norm = -0.5 * (dim as f64 * LN_2PI + s.det().ln());
    let mut l = Vec::with_capacity(atoms.len());
    let (mut best, mut best_i) = (f64::NEG_INFINITY, 0);
    for (i, (y, lw)) in atoms.iter().zip(log_w).enumerate() {
        let d0 = x[0] - a * y[0];
        let q = if dim == 1 {
            inv.a[0][0] * d0 * d0
        } else {
            let d1 = x[1] - a * y[1];
            inv.a[0][0] * d0 * d0 + (inv.a[0][1] + inv.a[1][0]) * d0 * d1 + inv.a[1][1] * d1 * d1
        };
        let v = lw - 0.5 * q;
        if v > best {
            best = v;
            best_i = i;
        }
        l.push(v);
    }
    if !best.is_finite() {
        return None;
    }
    // moments accumulated about the heaviest atom
    let c = atoms[best_i];
    let (mut z, mut m1, mut m2) = (0.0, [0.0; 2], [[0.0; 2]; 2]);
    for (y, v) in atoms.iter().zip(&l) {
        let dv = v - best;
        if dv < -ATOM_CUTOFF {
            continue;
        }
        let r = dv.exp();
        z += r;
        let d = [y[0] - c[0], y[1] - c[1]];
        for i in 0..dim {
            m1[i] += r * d[i];
            for j in 0..dim {
                m2[i][j] += r * d[i] * d[j];
            }
        }
    }
    let log_p = log_norm + best + z.ln();
    let mut mean = [0.0; 2];
    let mut cov = SquareMat::zeros(dim);
    for i in 0..dim {
        mean[i] = c[i] + m1[i] / z;
    }
    for i in 0..dim {
        for j in 0..dim {
            cov.a[i][j] = m2[i][j] / z - (m1[i] / z) * (m1[j] / z);
        }
    }
    let mut resid = [0.0; 2];
    for i in 0..dim {
        resid[i] = x[i] - a * mean[i];
    }
    let sv = inv.matvec(&resid[..dim]);
    let mut score = [0.0; 2];
    for i in 0..dim {
        score[i] = -sv[i];
    }
    let jac = inv.matmul(&cov).matmul(&inv).scale(a * a).add(&inv.scale(-1.0));
    Some(MarginalEval { dim, log_p, score, jacobian: jac, posterior_mean: mean })
}

/// Scaled truncated normal moments on `[l, h]`.
///
/// Returns `(shift, J)` with `∫_l^h u^k φ(u) du = exp(−shift)·J[k]` for
/// `k = 0..=3`, where `shift = m²/2` and `m` is the distance from the interval
/// to the origin. The scaling keeps every `J[k]` representable even when the
/// interval lies hundreds of standard deviations out.
fn truncated_moments(l: f64, h: f64) -> (f64, [f64; 4]) {
    debug_assert!(h >= l);
    if h <= 0.0 {
        // mirror: odd moments change sign
        let (shift, j) = truncated_moments(-h, -l);
        return (shift, [j[0], -j[1], j[2], -j[3]]);
    }
    let m = if l > 0.0 { l } else { 0.0 };
    let inv_sqrt_2pi = (-0.5 * LN_2PI).exp();
    let phi = |u: f64| inv_sqrt_2pi * (-0.5 * (u - m) * (u + m)).exp();
    let (pl, ph) = (phi(l), phi(h));
    let j0 = if l > 0.0 {
        // Q(l)e^{l²/2} − Q(h)e^{l²/2}
        mills_ratio(l) * inv_sqrt_2pi - mills_ratio(h) * ph
    } else {
        1.0 - std_normal_sf(h) - std_normal_sf(-l)
    };
    let j1 = pl - ph;
    let j2 = j0 + l * pl - h * ph;
    let j3 = 2.0 * j1 + l * l * pl - h * h * ph;
    (0.5 * m * m, [j0, j1, j2, j3])
}

fn eval_pieces(pieces: &[Piece], dim: usize, t: f64, x: [f64; 2]) -> Option<MarginalEval> {
    let (a, s2) = (VpSchedule::a(t), VpSchedule::sigma2(t));
    let sigma = s2.sqrt();
    let ln_a = a.ln();
    let mut lw = Vec::with_capacity(pieces.len());
    let mut means = Vec::with_capacity(pieces.len());
    let mut vars = Vec::with_capacity(pieces.len());
    for p in pieces {
        let mut logw = 0.0;
        let mut mu = [0.0; 2];
        let mut var = [0.0; 2];
        for i in 0..dim {
            let f = p.0[i];
            // y = (x + σu)/a maps the factor to α + βu in u-coordinates
            let ul = (a * f.lo - x[i]) / sigma;
            let uh = (a * f.hi - x[i]) / sigma;
            let alpha = f.c0 + f.c1 * x[i] / a;
            let beta = f.c1 * sigma / a;
            let (shift, j) = truncated_moments(ul, uh);
            let m0 = alpha * j[0] + beta * j[1];
            let m1 = alpha * j[1] + beta * j[2];
            let m2 = alpha * j[2] + beta * j[3];
            if !(m0 > 0.0) {
                logw = f64::NEG_INFINITY;
                break;
            }
            logw += m0.ln() - shift - ln_a;
            mu[i] = m1 / m0;
            var[i] = (m2 / m0 - mu[i] * mu[i]).max(0.0);
        }
        lw.push(logw);
        means.push(mu);
        vars.push(var);
    }
    let log_p = log_sum_exp(&lw);
    if !log_p.is_finite() {
        return None;
    }
    let mut eu = [0.0; 2];
    let r: Vec<f64> = lw.iter().map(|v| (v - log_p).exp()).collect();
    for (ri, mu) in r.iter().zip(&means) {
        for i in 0..dim {
            eu[i] += ri * mu[i];
        }
    }
    let mut cov = SquareMat::zeros(dim);
    for ((ri, mu), var) in r.iter().zip(&means).zip(&vars) {
        for i in 0..dim {
            cov.a[i][i] += ri * var[i];
            for j in 0..dim {
                cov.a[i][j] += ri * (mu[i] - eu[i]) * (mu[j] - eu[j]);
            }
        }
    }
    let mut score = [0.0; 2];
    let mut mean = [0.0; 2];
    for i in 0..dim {
        score[i] = eu[i] / sigma;
        mean[i] = (x[i] + sigma * eu[i]) / a;
    }
    let jac = cov.add(&SquareMat::scalar(dim, -1.0)).scale(1.0 / s2);
    Some(MarginalEval { dim, log_p, score, jacobian: jac, posterior_mean: mean })
}
