//! Grid distances between densities, 1D Wasserstein distances and the bound
//! checks that tie the forward-side KL to L1, W2 and L2.

use crate::error::{invalid, Result, VpError};
use crate::flow::{pullback_logpdf_many, FlowField};
use crate::ode::IntegratorConfig;
use crate::quadrature::{gauss_legendre_on, linspace};
use crate::special::std_normal_log_pdf;
use crate::vp::VpScoreModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Tensor-product uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        let g = Self { axes };
        g.validate()?;
        Ok(g)
    }

    pub fn uniform(dim: usize, lo: f64, hi: f64, count: usize) -> Result<Self> {
        Self::new(vec![AxisSpec { lo, hi, count }; dim])
    }

    /// [−8, 8] with 1601 nodes.
    pub fn default_1d() -> Self {
        Self { axes: vec![AxisSpec { lo: -8.0, hi: 8.0, count: 1601 }] }
    }

    /// [−4, 4]² with 201² nodes.
    pub fn default_2d() -> Self {
        Self { axes: vec![AxisSpec { lo: -4.0, hi: 4.0, count: 201 }; 2] }
    }

    pub fn default_for(dim: usize) -> Self {
        if dim == 1 {
            Self::default_1d()
        } else {
            Self::default_2d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.axes.len() == 1 || self.axes.len() == 2) {
            return Err(VpError::UnsupportedDimension(self.axes.len()));
        }
        for a in &self.axes {
            if a.count < 2 || !(a.hi > a.lo) || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(invalid("grid", "each axis needs count ≥ 2 and finite hi > lo"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let a = &self.axes[axis];
        (a.hi - a.lo) / (a.count - 1) as f64
    }

    pub fn axis_nodes(&self, axis: usize) -> Vec<f64> {
        let a = &self.axes[axis];
        linspace(a.lo, a.hi, a.count)
    }

    /// Grid points, last axis fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        match self.dim() {
            1 => self.axis_nodes(0).into_iter().map(|x| vec![x]).collect(),
            _ => {
                let (xs, ys) = (self.axis_nodes(0), self.axis_nodes(1));
                xs.iter().flat_map(|x| ys.iter().map(move |y| vec![*x, *y])).collect()
            }
        }
    }

    /// Tensor trapezoid weights aligned with [`GridSpec::points`].
    pub fn weights(&self) -> Vec<f64> {
        let axis_w = |k: usize| -> Vec<f64> {
            let h = self.spacing(k);
            let n = self.axes[k].count;
            (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
        };
        match self.dim() {
            1 => axis_w(0),
            _ => {
                let (wx, wy) = (axis_w(0), axis_w(1));
                wx.iter().flat_map(|a| wy.iter().map(move |b| a * b)).collect()
            }
        }
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn check_values(values: &[f64], grid: &GridSpec, what: &str) -> Result<()> {
    if values.len() != grid.len() {
        return Err(VpError::DimensionMismatch { expected: grid.len(), got: values.len() });
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(VpError::NonFinite(format!("{what} at grid index {i}")));
    }
    Ok(())
}

/// Evaluates a density on every grid point.
pub fn tabulate<F>(grid: &GridSpec, density: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    grid.points().par_iter().map(|x| density(x)).collect()
}

pub fn l1_from_values(p: &[f64], q: &[f64], grid: &GridSpec) -> Result<f64> {
    check_values(p, grid, "p")?;
    check_values(q, grid, "q")?;
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    Ok(grid.integrate(&d))
}

/// Trapezoid L1 distance between two density evaluators.
pub fn l1_distance<P, Q>(p: P, q: Q, grid: &GridSpec) -> Result<f64>
where
    P: Fn(&[f64]) -> Result<f64> + Sync,
    Q: Fn(&[f64]) -> Result<f64> + Sync,
{
    l1_from_values(&tabulate(grid, p)?, &tabulate(grid, q)?, grid)
}

/// ∫(p − q)² on the grid.
pub fn l2_squared_from_values(p: &[f64], q: &[f64], grid: &GridSpec) -> Result<f64> {
    check_values(p, grid, "p")?;
    check_values(q, grid, "q")?;
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(grid.integrate(&d))
}

/// KL(p‖q) from log densities. Points with p = 0 contribute nothing; points
/// with p > 0 and q = 0 are reported as an absolute-continuity violation.
pub fn kl_from_log_values(log_p: &[f64], log_q: &[f64], grid: &GridSpec) -> Result<f64> {
    if log_p.len() != grid.len() || log_q.len() != grid.len() {
        return Err(VpError::DimensionMismatch { expected: grid.len(), got: log_p.len().min(log_q.len()) });
    }
    let pts = grid.points();
    let mut bad = Vec::new();
    let mut integrand = Vec::with_capacity(log_p.len());
    for (i, (lp, lq)) in log_p.iter().zip(log_q).enumerate() {
        if lp.is_nan() || lq.is_nan() || *lp == f64::INFINITY || *lq == f64::INFINITY {
            return Err(VpError::NonFinite(format!("log density at grid index {i}")));
        }
        let p = lp.exp();
        if p == 0.0 {
            integrand.push(0.0);
        } else if *lq == f64::NEG_INFINITY {
            bad.push(i);
            integrand.push(0.0);
        } else {
            integrand.push(p * (lp - lq));
        }
    }
    if !bad.is_empty() {
        return Err(VpError::AbsoluteContinuity { count: bad.len(), first: pts[bad[0]].clone() });
    }
    Ok(grid.integrate(&integrand))
}

pub fn kl_from_values(p: &[f64], q: &[f64], grid: &GridSpec) -> Result<f64> {
    check_values(p, grid, "p")?;
    check_values(q, grid, "q")?;
    let lp: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    let lq: Vec<f64> = q.iter().map(|v| v.ln()).collect();
    kl_from_log_values(&lp, &lq, grid)
}

/// Trapezoid KL(p‖q) between two log-density evaluators.
pub fn kl_divergence<P, Q>(log_p: P, log_q: Q, grid: &GridSpec) -> Result<f64>
where
    P: Fn(&[f64]) -> Result<f64> + Sync,
    Q: Fn(&[f64]) -> Result<f64> + Sync,
{
    kl_from_log_values(&tabulate(grid, log_p)?, &tabulate(grid, log_q)?, grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WassersteinOrder {
    One,
    Two,
}

const GL_PER_CELL: usize = 5;

/// CDF of a 1D density on a grid, resolved inside cells by Gauss–Legendre.
/// Lower and upper tail masses are kept separately so that quantiles near
/// 1 keep their relative accuracy.
struct CellCdf<'a> {
    density: &'a (dyn Fn(f64) -> f64 + Sync),
    nodes: Vec<f64>,
    /// Normalized mass left of each node.
    lower: Vec<f64>,
    /// Normalized mass right of each node.
    upper: Vec<f64>,
    mass: f64,
}

/// A probability level, stored on whichever side of the median keeps precision.
#[derive(Clone, Copy)]
enum Level {
    Lower(f64),
    Upper(f64),
}

impl<'a> CellCdf<'a> {
    fn new(density: &'a (dyn Fn(f64) -> f64 + Sync), nodes: Vec<f64>) -> Result<Self> {
        let cells: Vec<f64> = nodes.windows(2).map(|w| gl_integral(density, w[0], w[1])).collect();
        let mass: f64 = cells.iter().sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(VpError::NonFinite("density has no mass on the grid".into()));
        }
        let mut lower = vec![0.0; nodes.len()];
        let mut upper = vec![0.0; nodes.len()];
        for i in 0..cells.len() {
            lower[i + 1] = lower[i] + cells[i] / mass;
        }
        for i in (0..cells.len()).rev() {
            upper[i] = upper[i + 1] + cells[i] / mass;
        }
        Ok(Self { density, nodes, lower, upper, mass })
    }

    fn pdf(&self, x: f64) -> f64 {
        (self.density)(x) / self.mass
    }

    /// (F(x), 1 − F(x)) for `x` in cell `i`.
    fn eval_in_cell(&self, i: usize, x: f64) -> (f64, f64) {
        let lo = self.lower[i] + gl_integral(self.density, self.nodes[i], x) / self.mass;
        let up = self.upper[i + 1] + gl_integral(self.density, x, self.nodes[i + 1]) / self.mass;
        (lo, up)
    }

    fn level_in_cell(&self, i: usize, x: f64) -> Level {
        let (lo, up) = self.eval_in_cell(i, x);
        if lo <= 0.5 {
            Level::Lower(lo)
        } else {
            Level::Upper(up)
        }
    }

    /// Inverse CDF, clamped to the grid.
    fn quantile(&self, level: Level) -> f64 {
        let n = self.nodes.len();
        let k = match level {
            Level::Lower(u) if u <= 0.0 => return self.nodes[0],
            Level::Upper(s) if s <= 0.0 => return self.nodes[n - 1],
            Level::Lower(u) => self.lower.partition_point(|&f| f < u),
            Level::Upper(s) => self.upper.partition_point(|&f| f > s),
        }
        .clamp(1, n - 1);
        let i = k - 1;
        // residual increasing in y
        let residual = |y: f64| {
            let (lo, up) = self.eval_in_cell(i, y);
            match level {
                Level::Lower(u) => lo - u,
                Level::Upper(s) => s - up,
            }
        };
        let (mut lo, mut hi) = (self.nodes[i], self.nodes[i + 1]);
        let mut y = 0.5 * (lo + hi);
        for _ in 0..100 {
            let f = residual(y);
            if f == 0.0 {
                return y;
            }
            if f > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let d = self.pdf(y);
            let newton = if d > 0.0 { y - f / d } else { f64::NAN };
            let next = if newton >= lo && newton <= hi { newton } else { 0.5 * (lo + hi) };
            let done = (next - y).abs() <= 1e-16 * (1.0 + y.abs()) || (hi - lo) <= 1e-15 * (1.0 + y.abs());
            y = next;
            if done {
                break;
            }
        }
        y
    }
}

fn gl_integral(f: &(dyn Fn(f64) -> f64 + Sync), a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (x, w) = gauss_legendre_on(GL_PER_CELL, a, b);
    x.iter().zip(&w).map(|(xi, wi)| wi * f(*xi)).sum()
}

/// W1 or W2 between two 1D densities restricted to the grid window.
///
/// Both CDFs are built cell by cell with 5-point Gauss–Legendre rules. W1 is
/// ∫|F_p − F_q| dx; W2² is ∫(x − Q_q(F_p(x)))² p(x) dx, the quantile coupling
/// written as an integral in x, with the inverse CDF solved by safeguarded
/// Newton iteration.
pub fn wasserstein_1d(
    p: &(dyn Fn(f64) -> f64 + Sync),
    q: &(dyn Fn(f64) -> f64 + Sync),
    grid: &GridSpec,
    order: WassersteinOrder,
) -> Result<f64> {
    grid.validate()?;
    if grid.dim() != 1 {
        return Err(VpError::UnsupportedDimension(grid.dim()));
    }
    let nodes = grid.axis_nodes(0);
    let fp = CellCdf::new(p, nodes.clone())?;
    let fq = CellCdf::new(q, nodes.clone())?;
    let cells: Vec<usize> = (0..nodes.len() - 1).collect();
    let total: f64 = match order {
        WassersteinOrder::One => cells
            .par_iter()
            .map(|&i| {
                let (x, w) = gauss_legendre_on(GL_PER_CELL, nodes[i], nodes[i + 1]);
                x.iter()
                    .zip(&w)
                    .map(|(xi, wi)| {
                        let ((pl, pu), (ql, qu)) = (fp.eval_in_cell(i, *xi), fq.eval_in_cell(i, *xi));
                        wi * if pl <= 0.5 { (pl - ql).abs() } else { (pu - qu).abs() }
                    })
                    .sum::<f64>()
            })
            .sum(),
        WassersteinOrder::Two => cells
            .par_iter()
            .map(|&i| {
                let (x, w) = gauss_legendre_on(GL_PER_CELL, nodes[i], nodes[i + 1]);
                x.iter()
                    .zip(&w)
                    .map(|(xi, wi)| {
                        let dens = fp.pdf(*xi);
                        if dens == 0.0 {
                            return 0.0;
                        }
                        let y = fq.quantile(fp.level_in_cell(i, *xi));
                        wi * dens * (xi - y) * (xi - y)
                    })
                    .sum::<f64>()
            })
            .sum(),
    };
    Ok(match order {
        WassersteinOrder::One => total,
        WassersteinOrder::Two => total.max(0.0).sqrt(),
    })
}

/// Lower-accuracy Wasserstein distance from nodal density values only
/// (trapezoid CDFs, linear interpolation, 10⁴ midpoint quantiles for W2).
pub fn wasserstein_1d_values(p: &[f64], q: &[f64], grid: &GridSpec, order: WassersteinOrder) -> Result<f64> {
    if grid.dim() != 1 {
        return Err(VpError::UnsupportedDimension(grid.dim()));
    }
    check_values(p, grid, "p")?;
    check_values(q, grid, "q")?;
    let nodes = grid.axis_nodes(0);
    let h = grid.spacing(0);
    let cdf = |v: &[f64]| -> Result<Vec<f64>> {
        let mut f = vec![0.0];
        for w in v.windows(2) {
            let last = *f.last().unwrap();
            f.push(last + 0.5 * h * (w[0] + w[1]));
        }
        let m = *f.last().unwrap();
        if !(m > 0.0) {
            return Err(VpError::NonFinite("density has no mass on the grid".into()));
        }
        Ok(f.into_iter().map(|x| x / m).collect())
    };
    let (fp, fq) = (cdf(p)?, cdf(q)?);
    match order {
        WassersteinOrder::One => {
            let d: Vec<f64> = fp.iter().zip(&fq).map(|(a, b)| (a - b).abs()).collect();
            Ok(grid.integrate(&d))
        }
        WassersteinOrder::Two => {
            let inv = |f: &[f64], u: f64| -> f64 {
                let k = f.partition_point(|&v| v < u).clamp(1, f.len() - 1);
                let (f0, f1) = (f[k - 1], f[k]);
                let s = if f1 > f0 { (u - f0) / (f1 - f0) } else { 0.5 };
                nodes[k - 1] + s * h
            };
            let n = 10_000;
            let s: f64 = (0..n)
                .map(|i| {
                    let u = (i as f64 + 0.5) / n as f64;
                    (inv(&fp, u) - inv(&fq, u)).powi(2)
                })
                .sum();
            Ok((s / n as f64).sqrt())
        }
    }
}

/// Named scalar metrics with metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub name: String,
    pub values: BTreeMap<String, f64>,
    pub metadata: BTreeMap<String, Value>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn insert(&mut self, key: &str, v: f64) {
        self.values.insert(key.to_string(), v);
    }

    pub fn meta(&mut self, key: &str, v: Value) {
        self.metadata.insert(key.to_string(), v);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// Keys whose values are not finite.
    pub fn flagged(&self) -> Vec<String> {
        self.values.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k.clone()).collect()
    }

    /// JSON with non-finite values written as strings and listed under `flagged`.
    pub fn to_json(&self) -> Value {
        let values: serde_json::Map<String, Value> = self
            .values
            .iter()
            .map(|(k, v)| {
                let jv = if v.is_finite() { json!(v) } else { json!(v.to_string()) };
                (k.clone(), jv)
            })
            .collect();
        json!({
            "name": self.name,
            "values": values,
            "flagged": self.flagged(),
            "metadata": self.metadata,
        })
    }
}

/// Forward-side bound checks at horizon `T`, plus optional target-side
/// distances to the flow pullback from `δ`.
pub struct PullbackSpec<'a> {
    pub field: FlowField<'a>,
    pub delta: f64,
    pub cfg: IntegratorConfig,
}

/// Reports `kl_T = KL(p_T‖p_Z)` and the slacks of
///
/// * `kl_T ≤ e^{−T}(n + M₂)`,
/// * `L1(p_T, p_Z) ≤ √(2 kl_T)`,
/// * `W2(p_T, p_Z)² ≤ 2 kl_T` (1D only),
/// * `‖p_T − p_Z‖₂² ≤ (sup p_T + sup p_Z)·L1(p_T, p_Z)`.
///
/// Every slack is `rhs − lhs`, so nonnegative values mean the bound holds.
pub fn bound_suite(
    model: &VpScoreModel,
    horizon: f64,
    grid: &GridSpec,
    pullback: Option<&PullbackSpec>,
) -> Result<MetricReport> {
    grid.validate()?;
    let n = model.dim();
    if grid.dim() != n {
        return Err(VpError::DimensionMismatch { expected: n, got: grid.dim() });
    }
    let mut rep = MetricReport::new(format!("bound_suite/{}", model.target.name));
    rep.meta("target", json!(model.target.name));
    rep.meta("T", json!(horizon));
    rep.meta("grid", serde_json::to_value(grid).unwrap_or(Value::Null));

    let log_pt = tabulate(grid, |x| model.marginal_log_pdf(horizon, x))?;
    let log_pz = tabulate(grid, |x| Ok(std_normal_log_pdf(x)))?;
    let pt: Vec<f64> = log_pt.iter().map(|v| v.exp()).collect();
    let pz: Vec<f64> = log_pz.iter().map(|v| v.exp()).collect();

    let kl_t = kl_from_log_values(&log_pt, &log_pz, grid)?;
    let kl_bound = (-horizon).exp() * (n as f64 + model.target.second_moment);
    let l1_t = l1_from_values(&pt, &pz, grid)?;
    let l2sq = l2_squared_from_values(&pt, &pz, grid)?;
    let sup_sum = pt.iter().copied().fold(0.0, f64::max) + pz.iter().copied().fold(0.0, f64::max);

    rep.insert("kl_T", kl_t);
    rep.insert("kl_bound", kl_bound);
    rep.insert("kl_bound_slack", kl_bound - kl_t);
    rep.insert("l1_T", l1_t);
    rep.insert("pinsker_slack", (2.0 * kl_t).sqrt() - l1_t);
    rep.insert("l2sq_T", l2sq);
    rep.insert("holder_slack", sup_sum * l1_t - l2sq);

    if n == 1 {
        let p = |x: f64| model.marginal_pdf(horizon, &[x]).unwrap_or(f64::NAN);
        let q = |x: f64| std_normal_log_pdf(&[x]).exp();
        let w1 = wasserstein_1d(&p, &q, grid, WassersteinOrder::One)?;
        let w2 = wasserstein_1d(&p, &q, grid, WassersteinOrder::Two)?;
        rep.insert("w1_T", w1);
        rep.insert("w2_T", w2);
        rep.insert("talagrand_slack", 2.0 * kl_t - w2 * w2);
    }

    if let Some(pb) = pullback {
        let pts = grid.points();
        let log_q = pullback_logpdf_many(&pb.field, pb.delta, horizon, &pts, &pb.cfg)?;
        let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
        let ph = tabulate(grid, |x| Ok(model.target.pdf(x)))?;
        let log_ph = tabulate(grid, |x| Ok(model.target.log_pdf(x)))?;
        rep.insert("target_l1", l1_from_values(&ph, &q, grid)?);
        rep.insert("target_kl", kl_from_log_values(&log_ph, &log_q, grid)?);
        rep.insert("pullback_mass", grid.integrate(&q));
        if n == 1 {
            rep.insert("target_w1", wasserstein_1d_values(&ph, &q, grid, WassersteinOrder::One)?);
            rep.insert("target_w2", wasserstein_1d_values(&ph, &q, grid, WassersteinOrder::Two)?);
        }
        rep.meta("delta", json!(pb.delta));
    }
    Ok(rep)
}

/// One row of the convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub l1: f64,
    pub kl: f64,
    pub w1: f64,
    pub w2: f64,
    pub kl_bound_slack: f64,
}

/// Target-side distances between p_H and the exact-score pullback over a
/// sweep of (δ, T) pairs.
pub fn convergence_table(
    model: &VpScoreModel,
    pairs: &[(f64, f64)],
    grid: &GridSpec,
    cfg: &IntegratorConfig,
) -> Result<Vec<ConvergenceRow>> {
    let field = FlowField::new(model);
    pairs
        .iter()
        .map(|&(delta, horizon)| {
            let pb = PullbackSpec { field, delta, cfg: *cfg };
            let rep = bound_suite(model, horizon, grid, Some(&pb))?;
            let get = |k: &str| rep.get(k).unwrap_or(f64::NAN);
            Ok(ConvergenceRow {
                delta,
                horizon,
                l1: get("target_l1"),
                kl: get("target_kl"),
                w1: get("target_w1"),
                w2: get("target_w2"),
                kl_bound_slack: get("kl_bound_slack"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::{normal_log_pdf_1d, std_normal_cdf};
    use proptest::prelude::*;

    fn normal(mean: f64, var: f64) -> impl Fn(f64) -> f64 + Sync {
        move |x| normal_log_pdf_1d(x, mean, var).exp()
    }

    #[test]
    fn grid_points_and_weights() {
        let g = GridSpec::uniform(2, -1.0, 1.0, 3).unwrap();
        assert_eq!(g.points().len(), 9);
        assert_eq!(g.points()[1], vec![-1.0, 0.0]);
        assert!((g.weights().iter().sum::<f64>() - 4.0).abs() < 1e-15);
        assert!(GridSpec::uniform(1, 1.0, 0.0, 5).is_err());
        assert!(GridSpec::uniform(1, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn l1_gaussian_shift() {
        let g = GridSpec::default_1d();
        let (p, q) = (normal(0.0, 1.0), normal(0.1, 1.0));
        let got = l1_distance(|x| Ok(p(x[0])), |x| Ok(q(x[0])), &g).unwrap();
        let exact = 2.0 * (std_normal_cdf(0.05) - std_normal_cdf(-0.05));
        assert!((got - exact).abs() < 1e-4);
        let same = l1_distance(|x| Ok(p(x[0])), |x| Ok(p(x[0])), &g).unwrap();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn l1_disjoint_supports() {
        let g = GridSpec::uniform(1, -3.0, 3.0, 6001).unwrap();
        let a = |x: &[f64]| Ok(if x[0] > -2.0 && x[0] < -1.0 { 1.0 } else { 0.0 });
        let b = |x: &[f64]| Ok(if x[0] > 1.0 && x[0] < 2.0 { 1.0 } else { 0.0 });
        assert!((l1_distance(a, b, &g).unwrap() - 2.0).abs() < 5e-3);
    }

    #[test]
    fn kl_gaussian_scale() {
        let g = GridSpec::uniform(1, -20.0, 20.0, 4001).unwrap();
        let got = kl_divergence(
            |x| Ok(normal_log_pdf_1d(x[0], 0.0, 4.0)),
            |x| Ok(normal_log_pdf_1d(x[0], 0.0, 1.0)),
            &g,
        )
        .unwrap();
        let exact = 0.5 * (3.0 - 4f64.ln());
        assert!((got - exact).abs() < 1e-4);
        assert!((exact - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_absolute_continuity_violation() {
        let g = GridSpec::uniform(1, -1.0, 1.0, 5).unwrap();
        let p = vec![0.5, 0.5, 0.5, 0.5, 0.5];
        let q = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        match kl_from_values(&p, &q, &g) {
            Err(VpError::AbsoluteContinuity { count, first }) => {
                assert_eq!(count, 3);
                assert_eq!(first, vec![0.0]);
            }
            other => panic!("{other:?}"),
        }
        // p = 0 where q = 0 is fine
        let p = vec![1.0, 1.0, 0.0, 0.0, 0.0];
        assert!(kl_from_values(&p, &q, &g).unwrap().is_finite());
    }

    #[test]
    fn wasserstein_translation() {
        let g = GridSpec::default_1d();
        let (p, q) = (normal(0.0, 1.0), normal(0.3, 1.0));
        let w1 = wasserstein_1d(&p, &q, &g, WassersteinOrder::One).unwrap();
        let w2 = wasserstein_1d(&p, &q, &g, WassersteinOrder::Two).unwrap();
        assert!((w1 - 0.3).abs() < 1e-3 && (w2 - 0.3).abs() < 1e-3);
        assert!(wasserstein_1d(&p, &p, &g, WassersteinOrder::Two).unwrap() < 1e-9);
        let v1 = wasserstein_1d_values(
            &g.axis_nodes(0).iter().map(|x| p(*x)).collect::<Vec<_>>(),
            &g.axis_nodes(0).iter().map(|x| q(*x)).collect::<Vec<_>>(),
            &g,
            WassersteinOrder::Two,
        )
        .unwrap();
        assert!((v1 - 0.3).abs() < 1e-3);
        assert!(wasserstein_1d(&p, &q, &GridSpec::default_2d(), WassersteinOrder::One).is_err());
    }

    #[test]
    fn wasserstein_scale_closed_form() {
        // W2(N(0,1), N(0,s²)) = |s − 1|
        let g = GridSpec::uniform(1, -12.0, 12.0, 2401).unwrap();
        let w2 = wasserstein_1d(&normal(0.0, 1.0), &normal(0.0, 2.25), &g, WassersteinOrder::Two).unwrap();
        assert!((w2 - 0.5).abs() < 1e-9, "{w2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn w1_below_w2_and_kl_nonnegative(m1 in -1.5f64..1.5, v1 in 0.3f64..3.0, m2 in -1.5f64..1.5, v2 in 0.3f64..3.0) {
            let g = GridSpec::uniform(1, -12.0, 12.0, 1201).unwrap();
            let (p, q) = (normal(m1, v1), normal(m2, v2));
            let w1 = wasserstein_1d(&p, &q, &g, WassersteinOrder::One).unwrap();
            let w2 = wasserstein_1d(&p, &q, &g, WassersteinOrder::Two).unwrap();
            prop_assert!(w1 <= w2 + 1e-6);
            let kl = kl_divergence(|x| Ok(normal_log_pdf_1d(x[0], m1, v1)), |x| Ok(normal_log_pdf_1d(x[0], m2, v2)), &g).unwrap();
            prop_assert!(kl >= -1e-12);
            let l1 = l1_distance(|x| Ok(p(x[0])), |x| Ok(q(x[0])), &g).unwrap();
            prop_assert!(l1 <= (2.0 * kl).sqrt() + 1e-6);
        }
    }

    #[test]
    fn slacks_nonnegative_for_1d_builtins() {
        use crate::targets::{make_builtin_target, Params};
        for name in ["triangular", "two_uniform", "cubic_pullback", "gmm1d", "gaussian"] {
            let model = VpScoreModel::new(make_builtin_target(name, &Params::new()).unwrap()).unwrap();
            let rep = bound_suite(&model, 3.0, &GridSpec::default_1d(), None).unwrap();
            for k in ["kl_bound_slack", "pinsker_slack", "talagrand_slack", "holder_slack"] {
                let v = rep.get(k).unwrap();
                assert!(v >= -1e-6, "{name} {k} {v}");
            }
        }
    }

    #[test]
    fn standard_normal_has_zero_lhs() {
        use crate::targets::{make_builtin_target, Params};
        let model = VpScoreModel::new(make_builtin_target("gaussian", &Params::new()).unwrap()).unwrap();
        let rep = bound_suite(&model, 2.0, &GridSpec::default_1d(), None).unwrap();
        assert!(rep.get("kl_T").unwrap().abs() < 1e-12);
        assert!(rep.get("l1_T").unwrap() < 1e-12);
        assert!(rep.get("w2_T").unwrap() < 1e-9);
    }

    #[test]
    fn report_flags_non_finite() {
        let mut r = MetricReport::new("x");
        r.insert("a", 1.0);
        r.insert("b", f64::INFINITY);
        let j = r.to_json();
        assert_eq!(j["flagged"], json!(["b"]));
        assert_eq!(j["values"]["b"], json!("inf"));
    }
}
