//! Probability-flow transport with augmented Jacobian and log-determinant
//! states, pullback densities and Grönwall certificates.

use crate::error::{invalid, Result, VpError};
use crate::linalg::SquareMat;
use crate::ode::{integrate, IntegratorConfig, StepStats};
use crate::quadrature::{adaptive_simpson, linspace};
use crate::special::std_normal_log_pdf;
use crate::vp::VpScoreModel;
use rayon::prelude::*;
use serde::Serialize;

/// Default early-stopping time.
pub const DEFAULT_DELTA: f64 = 1e-6;

/// Score value and spatial Jacobian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreJet {
    pub score: [f64; 2],
    pub jacobian: SquareMat,
}

/// Anything that supplies a time-dependent score and its Jacobian.
pub trait ScoreField: Send + Sync {
    fn dim(&self) -> usize;

    /// Smallest time at which the field may be evaluated.
    fn min_time(&self) -> f64;

    fn jet(&self, t: f64, x: &[f64]) -> Result<ScoreJet>;

    fn score(&self, t: f64, x: &[f64]) -> Result<[f64; 2]> {
        Ok(self.jet(t, x)?.score)
    }

    fn jet_batch(&self, t: f64, xs: &[[f64; 2]]) -> Result<Vec<ScoreJet>> {
        xs.iter().map(|x| self.jet(t, &x[..self.dim()])).collect()
    }

    fn score_batch(&self, t: f64, xs: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        xs.iter().map(|x| self.score(t, &x[..self.dim()])).collect()
    }

    /// Whether many points should share one integration (cheap batched evaluation).
    fn prefers_batch(&self) -> bool {
        false
    }
}

impl ScoreField for VpScoreModel {
    fn dim(&self) -> usize {
        VpScoreModel::dim(self)
    }

    fn min_time(&self) -> f64 {
        VpScoreModel::min_time(self)
    }

    fn jet(&self, t: f64, x: &[f64]) -> Result<ScoreJet> {
        let e = self.evaluate(t, x)?;
        Ok(ScoreJet { score: e.score, jacobian: e.jacobian })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DivergenceMode {
    /// Jacobian supplied by the score source.
    Exact,
    /// Central differences of the score with step `rel_step·(1 + ‖x‖)`.
    FiniteDifference { rel_step: f64 },
}

/// The probability-flow velocity `v(t, x) = −x/2 − s_t(x)/2`.
#[derive(Clone, Copy)]
pub struct FlowField<'a> {
    pub source: &'a dyn ScoreField,
    pub divergence: DivergenceMode,
}

impl<'a> FlowField<'a> {
    pub fn new(source: &'a dyn ScoreField) -> Self {
        Self { source, divergence: DivergenceMode::Exact }
    }

    pub fn with_divergence(source: &'a dyn ScoreField, divergence: DivergenceMode) -> Self {
        Self { source, divergence }
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    fn score_jet(&self, t: f64, x: &[f64]) -> Result<ScoreJet> {
        match self.divergence {
            DivergenceMode::Exact => self.source.jet(t, x),
            DivergenceMode::FiniteDifference { rel_step } => {
                let d = self.dim();
                let score = self.source.score(t, x)?;
                let h = rel_step * (1.0 + crate::linalg::norm(x));
                let mut jac = SquareMat::zeros(d);
                let mut xp = [0.0; 2];
                xp[..d].copy_from_slice(x);
                for j in 0..d {
                    let mut xm = xp;
                    let mut xq = xp;
                    xm[j] -= h;
                    xq[j] += h;
                    let sm = self.source.score(t, &xm[..d])?;
                    let sq = self.source.score(t, &xq[..d])?;
                    for i in 0..d {
                        jac.a[i][j] = (sq[i] - sm[i]) / (2.0 * h);
                    }
                }
                Ok(ScoreJet { score, jacobian: jac })
            }
        }
    }

    /// Velocity and its Jacobian at `(t, x)`.
    pub fn velocity(&self, t: f64, x: &[f64]) -> Result<([f64; 2], SquareMat)> {
        let jet = self.score_jet(t, x)?;
        Ok(velocity_from_jet(self.dim(), x, &jet))
    }

    fn check_window(&self, from_t: f64, to_t: f64) -> Result<()> {
        let lo = self.source.min_time();
        for t in [from_t, to_t] {
            if !t.is_finite() || t < lo || (lo == f64::MIN_POSITIVE && t <= 0.0) {
                return Err(VpError::TimeOutOfRange { t, lo, hi: f64::INFINITY });
            }
        }
        Ok(())
    }
}

fn velocity_from_jet(dim: usize, x: &[f64], jet: &ScoreJet) -> ([f64; 2], SquareMat) {
    let mut v = [0.0; 2];
    for i in 0..dim {
        v[i] = -0.5 * x[i] - 0.5 * jet.score[i];
    }
    let dv = jet.jacobian.add(&SquareMat::identity(dim)).scale(-0.5);
    (v, dv)
}

/// Endpoint, Jacobian and log-determinant of one transport.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowResult {
    pub endpoint: Vec<f64>,
    /// ∫ div v dt along the trajectory.
    pub logdet: f64,
    pub jacobian: SquareMat,
    pub stats: StepStats,
}

impl FlowResult {
    fn identity(x: &[f64]) -> Self {
        Self {
            endpoint: x.to_vec(),
            logdet: 0.0,
            jacobian: SquareMat::identity(x.len()),
            stats: StepStats::default(),
        }
    }
}

/// One sample of a trajectory: time, position and accumulated log-determinant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub logdet: f64,
}

fn state_len(dim: usize) -> usize {
    dim + dim * dim + 1
}

fn initial_state(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut y = vec![0.0; state_len(d)];
    y[..d].copy_from_slice(x);
    for i in 0..d {
        y[d + i * d + i] = 1.0;
    }
    y
}

fn unpack(d: usize, y: &[f64], stats: StepStats) -> FlowResult {
    let mut jac = SquareMat::zeros(d);
    for i in 0..d {
        for j in 0..d {
            jac.a[i][j] = y[d + i * d + j];
        }
    }
    FlowResult { endpoint: y[..d].to_vec(), logdet: y[d + d * d], jacobian: jac, stats }
}

/// Right-hand side of the augmented system (x, J, logdet) for one point.
fn augmented_rhs(d: usize, jflat: &[f64], v: &[f64; 2], dv: &SquareMat, out: &mut [f64]) {
    out[..d].copy_from_slice(&v[..d]);
    for i in 0..d {
        for j in 0..d {
            out[d + i * d + j] = (0..d).map(|k| dv.a[i][k] * jflat[k * d + j]).sum();
        }
    }
    out[d + d * d] = dv.trace();
}

/// Integrates the flow from `from_t` to `to_t` starting at `x`.
pub fn transport(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    x: &[f64],
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    transport_observed(field, from_t, to_t, x, cfg, |_, _| {})
}

/// Like [`transport`], recording every accepted step.
pub fn transport_trajectory(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    x: &[f64],
    cfg: &IntegratorConfig,
) -> Result<(FlowResult, Vec<TrajectoryPoint>)> {
    let d = x.len();
    let mut traj = vec![TrajectoryPoint { t: from_t, x: x.to_vec(), logdet: 0.0 }];
    let res = transport_observed(field, from_t, to_t, x, cfg, |t, y| {
        traj.push(TrajectoryPoint { t, x: y[..d].to_vec(), logdet: y[d + d * d] });
    })?;
    Ok((res, traj))
}

fn transport_observed<O: FnMut(f64, &[f64])>(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    x: &[f64],
    cfg: &IntegratorConfig,
    observer: O,
) -> Result<FlowResult> {
    let d = field.dim();
    if x.len() != d {
        return Err(VpError::DimensionMismatch { expected: d, got: x.len() });
    }
    field.check_window(from_t, to_t)?;
    cfg.validate()?;
    if from_t == to_t {
        return Ok(FlowResult::identity(x));
    }
    let mut y = initial_state(x);
    let stats = integrate(
        |t, y, dy| {
            let (v, dv) = field.velocity(t, &y[..d])?;
            augmented_rhs(d, &y[d..d + d * d], &v, &dv, dy);
            Ok(())
        },
        from_t,
        to_t,
        &mut y,
        cfg,
        observer,
    )?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(VpError::NonFinite(format!("transport of {x:?} produced a non-finite state")));
    }
    Ok(unpack(d, &y, stats))
}

/// Transports many points.
///
/// Sources with cheap batched evaluation share one integration (one state
/// vector, common step control); otherwise points are integrated
/// independently in parallel.
pub fn transport_many(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    xs: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Vec<FlowResult>> {
    if field.source.prefers_batch() && xs.len() > 1 {
        transport_batched(field, from_t, to_t, xs, cfg)
    } else {
        xs.par_iter().map(|x| transport(field, from_t, to_t, x, cfg)).collect()
    }
}

fn transport_batched(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    xs: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Vec<FlowResult>> {
    let d = field.dim();
    for x in xs {
        if x.len() != d {
            return Err(VpError::DimensionMismatch { expected: d, got: x.len() });
        }
    }
    field.check_window(from_t, to_t)?;
    cfg.validate()?;
    if from_t == to_t {
        return Ok(xs.iter().map(|x| FlowResult::identity(x)).collect());
    }
    let m = state_len(d);
    let mut y: Vec<f64> = xs.iter().flat_map(|x| initial_state(x)).collect();
    let mut pts = vec![[0.0; 2]; xs.len()];
    let stats = integrate(
        |t, y, dy| {
            for (p, chunk) in pts.iter_mut().zip(y.chunks(m)) {
                p[..d].copy_from_slice(&chunk[..d]);
            }
            let jets = match field.divergence {
                DivergenceMode::Exact => field.source.jet_batch(t, &pts)?,
                DivergenceMode::FiniteDifference { rel_step } => fd_jets(field.source, t, &pts, rel_step)?,
            };
            for ((chunk, out), jet) in y.chunks(m).zip(dy.chunks_mut(m)).zip(&jets) {
                let (v, dv) = velocity_from_jet(d, &chunk[..d], jet);
                augmented_rhs(d, &chunk[d..d + d * d], &v, &dv, out);
            }
            Ok(())
        },
        from_t,
        to_t,
        &mut y,
        cfg,
        |_, _| {},
    )?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(VpError::NonFinite("batched transport produced a non-finite state".into()));
    }
    Ok(y.chunks(m).map(|c| unpack(d, c, stats)).collect())
}

/// Batched central-difference Jacobians: one batched score call per offset.
fn fd_jets(source: &dyn ScoreField, t: f64, pts: &[[f64; 2]], rel_step: f64) -> Result<Vec<ScoreJet>> {
    let d = source.dim();
    let base = source.score_batch(t, pts)?;
    let steps: Vec<f64> = pts.iter().map(|p| rel_step * (1.0 + crate::linalg::norm(&p[..d]))).collect();
    let mut jets: Vec<ScoreJet> = base
        .iter()
        .map(|s| ScoreJet { score: *s, jacobian: SquareMat::zeros(d) })
        .collect();
    for j in 0..d {
        let shifted = |sign: f64| -> Vec<[f64; 2]> {
            pts.iter()
                .zip(&steps)
                .map(|(p, h)| {
                    let mut q = *p;
                    q[j] += sign * h;
                    q
                })
                .collect()
        };
        let plus = source.score_batch(t, &shifted(1.0))?;
        let minus = source.score_batch(t, &shifted(-1.0))?;
        for (k, jet) in jets.iter_mut().enumerate() {
            for i in 0..d {
                jet.jacobian.a[i][j] = (plus[k][i] - minus[k][i]) / (2.0 * steps[k]);
            }
        }
    }
    Ok(jets)
}

/// Log density at `x` of the pullback of N(0, I) through the forward transport δ → T.
pub fn pullback_logpdf(field: &FlowField, delta: f64, horizon: f64, x: &[f64], cfg: &IntegratorConfig) -> Result<f64> {
    if delta > horizon {
        return Err(invalid("delta", "must not exceed the horizon"));
    }
    let r = transport(field, delta, horizon, x, cfg)?;
    Ok(std_normal_log_pdf(&r.endpoint) + r.logdet)
}

pub fn pullback_logpdf_many(
    field: &FlowField,
    delta: f64,
    horizon: f64,
    xs: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    if delta > horizon {
        return Err(invalid("delta", "must not exceed the horizon"));
    }
    Ok(transport_many(field, delta, horizon, xs, cfg)?
        .iter()
        .map(|r| std_normal_log_pdf(&r.endpoint) + r.logdet)
        .collect())
}

/// Grönwall bound on the Lipschitz constants of φ_{from→to} and its inverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Certificate {
    /// ½∫(1 + L(τ)) dτ.
    pub log_value: f64,
    /// exp(log_value); may overflow to +∞, which is still a valid bound.
    pub value: f64,
}

/// `exp(½∫(1 + L(τ)) dτ)` over the window between `from_t` and `to_t`.
pub fn gronwall_certificate<F>(lcurve: F, from_t: f64, to_t: f64) -> Result<Certificate>
where
    F: Fn(f64) -> Result<f64>,
{
    let (lo, hi) = if from_t <= to_t { (from_t, to_t) } else { (to_t, from_t) };
    if lo == hi {
        return Ok(Certificate { log_value: 0.0, value: 1.0 });
    }
    let mut scale: f64 = 1.0;
    for t in linspace(lo, hi, 257) {
        let l = lcurve(t)?;
        if !l.is_finite() {
            return Err(VpError::NonFinite(format!("L({t}) = {l}")));
        }
        scale = scale.max(l.abs());
    }
    let f = |t: f64| 1.0 + lcurve(t).unwrap_or(f64::NAN);
    let integral = adaptive_simpson(&f, lo, hi, 1e-13 * scale * (hi - lo));
    if !integral.is_finite() {
        return Err(VpError::NonFinite("certificate integral".into()));
    }
    let log_value = 0.5 * integral;
    Ok(Certificate { log_value, value: log_value.exp() })
}

/// Measured Lipschitz constants of the transport over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeasuredLipschitz {
    /// max ‖∇φ‖ over the grid.
    pub forward: f64,
    /// max ‖(∇φ)⁻¹‖ over the grid.
    pub inverse: f64,
}

pub fn measure_lipschitz(
    field: &FlowField,
    from_t: f64,
    to_t: f64,
    grid: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<MeasuredLipschitz> {
    if grid.is_empty() {
        return Err(invalid("grid", "must be nonempty"));
    }
    let results = transport_many(field, from_t, to_t, grid, cfg)?;
    let mut out = MeasuredLipschitz { forward: 0.0, inverse: 0.0 };
    for (x, r) in grid.iter().zip(&results) {
        let smin = r.jacobian.min_singular();
        if !(smin > 0.0) {
            return Err(VpError::SingularJacobian(x.clone()));
        }
        out.forward = out.forward.max(r.jacobian.op_norm());
        out.inverse = out.inverse.max(1.0 / smin);
    }
    Ok(out)
}
