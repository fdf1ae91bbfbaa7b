//! Target densities in one and two dimensions.
//!
//! Every target carries a structural class tag that selects the score
//! Lipschitz bound available for it:
//!
//! * `A1`: compactly supported (uniform boxes, triangular),
//! * `A2`: log-concave,
//! * `A3`: Gaussian convolution of a compactly supported measure (arcs, grids),
//! * `A4`: finite Gaussian mixture,
//! * `General`: none of the above (the cubic pullback).

use crate::error::{invalid, Result, VpError};
use crate::linalg::{log_sum_exp, norm_sq, SquareMat};
use crate::quadrature::{composite_gauss_legendre, composite_with_budget};
use crate::special::{std_normal_log_pdf, LN_2PI};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::f64::consts::PI;

pub type Params = Map<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassTag {
    A1,
    A2,
    A3,
    A4,
    General,
}

/// Number of quadrature nodes used to discretize one arc of a base measure.
pub const ARC_NODES: usize = 800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<SquareMat>,
    #[serde(skip)]
    cache: MixtureCache,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct MixtureCache {
    inv: Vec<SquareMat>,
    log_det: Vec<f64>,
    chol: Vec<SquareMat>,
}

fn check_spd(c: &SquareMat, what: &str) -> Result<()> {
    if c.dim == 2 && (c.a[0][1] - c.a[1][0]).abs() > 1e-12 * (1.0 + c.a[0][1].abs()) {
        return Err(invalid(what, "covariance is not symmetric"));
    }
    let ev = c.sym_eigenvalues();
    if !(ev[0] > 0.0) || !c.is_finite() {
        return Err(invalid(what, "covariance is not positive definite"));
    }
    Ok(())
}

fn cholesky(c: &SquareMat) -> SquareMat {
    let mut l = SquareMat::zeros(c.dim);
    l.a[0][0] = c.a[0][0].sqrt();
    if c.dim == 2 {
        l.a[1][0] = c.a[1][0] / l.a[0][0];
        l.a[1][1] = (c.a[1][1] - l.a[1][0] * l.a[1][0]).sqrt();
    }
    l
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<SquareMat>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(invalid("mixture", "weights, means and covariances must have equal nonzero length"));
        }
        let dim = means[0].len();
        if !(dim == 1 || dim == 2) {
            return Err(VpError::UnsupportedDimension(dim));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("weights", "mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("weights", format!("weights sum to {total}, expected 1")));
        }
        for (m, c) in means.iter().zip(&covariances) {
            if m.len() != dim || c.dim != dim {
                return Err(VpError::DimensionMismatch { expected: dim, got: m.len().max(c.dim) });
            }
            check_spd(c, "covariance")?;
        }
        let mut gm = Self { dim, weights, means, covariances, cache: MixtureCache::default() };
        gm.rebuild_cache();
        Ok(gm)
    }

    /// Mixture whose components share an isotropic standard deviation per component.
    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        if stds.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("stds", "standard deviations must be positive"));
        }
        let dim = means.first().map(|m| m.len()).unwrap_or(1);
        let covs = stds.iter().map(|s| SquareMat::scalar(dim, s * s)).collect();
        Self::new(weights, means, covs)
    }

    fn rebuild_cache(&mut self) {
        self.cache = MixtureCache {
            inv: self.covariances.iter().map(|c| c.inverse().expect("spd")).collect(),
            log_det: self.covariances.iter().map(|c| c.det().ln()).collect(),
            chol: self.covariances.iter().map(cholesky).collect(),
        };
    }

    pub(crate) fn ensure_cache(&mut self) {
        if self.cache.inv.len() != self.weights.len() {
            self.rebuild_cache();
        }
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// The common covariance, when all components share one.
    pub fn shared_covariance(&self) -> Option<SquareMat> {
        let c0 = self.covariances[0];
        self.covariances
            .iter()
            .all(|c| c.max_abs_diff(&c0) == 0.0)
            .then_some(c0)
    }

    pub fn component_log_pdf(&self, k: usize, x: &[f64]) -> f64 {
        let inv = &self.cache.inv[k];
        let m = &self.means[k];
        let d: Vec<f64> = x.iter().zip(m).map(|(a, b)| a - b).collect();
        let q: f64 = inv.matvec(&d).iter().zip(&d).map(|(a, b)| a * b).sum();
        -0.5 * (self.dim as f64 * LN_2PI + self.cache.log_det[k] + q)
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + self.component_log_pdf(k, x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for i in 0..self.dim {
                m[i] += w * mu[i];
            }
        }
        m
    }

    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.covariances))
            .map(|(w, (m, c))| w * (norm_sq(m) + c.trace()))
            .sum()
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let k = categorical(&self.weights, rng.gen::<f64>());
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.cache.chol[k];
        let lz = l.matvec(&z);
        self.means[k].iter().zip(lz).map(|(m, v)| m + v).collect()
    }
}

fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Uniform density on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Density value inside the box.
    pub density: f64,
}

impl UniformBox {
    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn mass(&self) -> f64 {
        self.density * self.volume()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Arc of a circle carrying uniform (arc-length) mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arc {
    pub center: [f64; 2],
    pub radius: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub mass: f64,
}

impl Arc {
    pub fn point(&self, theta: f64) -> [f64; 2] {
        [
            self.center[0] + self.radius * theta.cos(),
            self.center[1] + self.radius * theta.sin(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseMeasure {
    /// Weighted atoms.
    Points { points: Vec<Vec<f64>>, weights: Vec<f64> },
    /// Uniform measures on circular arcs.
    Arcs(Vec<Arc>),
    /// A density tabulated on a uniform grid, stored as nodal masses.
    GridDensity { nodes: Vec<Vec<f64>>, masses: Vec<f64>, spacing: f64 },
}

/// A Gaussian convolution `φ_Σ * μ` of a compactly supported probability measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactConvolution {
    pub dim: usize,
    pub base: BaseMeasure,
    pub smoothing: SquareMat,
    #[serde(skip)]
    atoms: Vec<Vec<f64>>,
    #[serde(skip)]
    log_masses: Vec<f64>,
    #[serde(skip)]
    smoothing_inv: Option<SquareMat>,
}

impl CompactConvolution {
    pub fn new(dim: usize, base: BaseMeasure, smoothing: SquareMat) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(VpError::UnsupportedDimension(dim));
        }
        if smoothing.dim != dim {
            return Err(VpError::DimensionMismatch { expected: dim, got: smoothing.dim });
        }
        check_spd(&smoothing, "smoothing")?;
        let (atoms, masses) = discretize_base(dim, &base)?;
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(invalid("base", format!("base measure has mass {total}, expected 1")));
        }
        Ok(Self {
            dim,
            base,
            smoothing,
            log_masses: masses.iter().map(|m| m.ln()).collect(),
            atoms,
            smoothing_inv: smoothing.inverse(),
        })
    }

    /// Quadrature atoms of the base measure and their log masses.
    pub fn atoms(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.atoms, &self.log_masses)
    }

    pub fn base_radius(&self) -> f64 {
        let mut r = self.atoms.iter().map(|p| norm_sq(p)).fold(0.0, f64::max).sqrt();
        if let BaseMeasure::Arcs(arcs) = &self.base {
            for a in arcs {
                for th in [a.theta0, a.theta1] {
                    let p = a.point(th);
                    r = r.max(p[0].hypot(p[1]));
                }
                // interior maximum of |c + r e(θ)| is along the center direction
                let cn = a.center[0].hypot(a.center[1]);
                if cn > 0.0 {
                    let th = a.center[1].atan2(a.center[0]);
                    let inside = |th: f64| {
                        let mut u = (th - a.theta0).rem_euclid(2.0 * PI);
                        if u < 0.0 {
                            u += 2.0 * PI;
                        }
                        u <= a.theta1 - a.theta0 + 1e-15
                    };
                    if inside(th) {
                        r = r.max(cn + a.radius);
                    }
                } else {
                    r = r.max(a.radius);
                }
            }
        }
        r
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let inv = self.smoothing_inv.expect("spd smoothing");
        let log_norm = -0.5 * (self.dim as f64 * LN_2PI + self.smoothing.det().ln());
        let terms: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.log_masses)
            .map(|(y, lm)| {
                let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let q: f64 = inv.matvec(&d).iter().zip(&d).map(|(a, b)| a * b).sum();
                lm + log_norm - 0.5 * q
            })
            .collect();
        log_sum_exp(&terms)
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        self.log_pdf(x).exp()
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.log_masses)
            .map(|(y, lm)| lm.exp() * norm_sq(y))
            .sum::<f64>()
            + self.smoothing.trace()
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let y: Vec<f64> = match &self.base {
            BaseMeasure::Points { points, weights } => points[categorical(weights, rng.gen())].clone(),
            BaseMeasure::Arcs(arcs) => {
                let masses: Vec<f64> = arcs.iter().map(|a| a.mass).collect();
                let a = &arcs[categorical(&masses, rng.gen())];
                let th = a.theta0 + (a.theta1 - a.theta0) * rng.gen::<f64>();
                a.point(th).to_vec()
            }
            BaseMeasure::GridDensity { nodes, masses, .. } => nodes[categorical(masses, rng.gen())].clone(),
        };
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let lz = cholesky(&self.smoothing).matvec(&z);
        y.iter().zip(lz).map(|(a, b)| a + b).collect()
    }
}

fn discretize_base(dim: usize, base: &BaseMeasure) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    match base {
        BaseMeasure::Points { points, weights } | BaseMeasure::GridDensity { nodes: points, masses: weights, .. } => {
            if points.len() != weights.len() || points.is_empty() {
                return Err(invalid("base", "points and weights must have equal nonzero length"));
            }
            if weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(invalid("base", "weights must be nonnegative"));
            }
            let keep: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
            for p in points {
                if p.len() != dim {
                    return Err(VpError::DimensionMismatch { expected: dim, got: p.len() });
                }
            }
            Ok((
                keep.iter().map(|&i| points[i].clone()).collect(),
                keep.iter().map(|&i| weights[i]).collect(),
            ))
        }
        BaseMeasure::Arcs(arcs) => {
            if dim != 2 {
                return Err(VpError::UnsupportedDimension(dim));
            }
            let mut pts = Vec::new();
            let mut ms = Vec::new();
            for a in arcs {
                if !(a.theta1 > a.theta0) || !(a.radius > 0.0) || !(a.mass > 0.0) {
                    return Err(invalid("arc", "arc needs theta1 > theta0, positive radius and mass"));
                }
                let (th, w) = composite_with_budget(a.theta0, a.theta1, ARC_NODES);
                let span = a.theta1 - a.theta0;
                for (t, wi) in th.iter().zip(&w) {
                    pts.push(a.point(*t).to_vec());
                    ms.push(a.mass * wi / span);
                }
            }
            Ok((pts, ms))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    Mixture(GaussianMixture),
    /// Disjoint uniform boxes.
    Boxes(Vec<UniformBox>),
    /// `(1 - |x|)` on `[-1, 1]`.
    Triangular,
    /// Pullback of N(0,1) through `g(x) = 3x^3 + x`.
    CubicPullback,
    Convolution(CompactConvolution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDensity {
    pub name: String,
    pub dim: usize,
    pub class_tag: ClassTag,
    /// Smallest R with the support inside the closed ball B(0, R); infinite if unbounded.
    pub support_radius: f64,
    /// E‖X‖².
    pub second_moment: f64,
    pub kind: TargetKind,
}

impl TargetDensity {
    pub fn from_mixture(name: &str, gm: GaussianMixture, class_tag: ClassTag) -> Self {
        Self {
            name: name.to_string(),
            dim: gm.dim,
            class_tag,
            support_radius: f64::INFINITY,
            second_moment: gm.second_moment(),
            kind: TargetKind::Mixture(gm),
        }
    }

    /// Isotropic Gaussian N(mean, std² I).
    pub fn gaussian(mean: Vec<f64>, std: f64, class_tag: ClassTag) -> Result<Self> {
        if !matches!(class_tag, ClassTag::A2 | ClassTag::A4) {
            return Err(invalid("class", "a Gaussian is tagged A2 or A4"));
        }
        let gm = GaussianMixture::isotropic(vec![1.0], vec![mean], vec![std])?;
        Ok(Self::from_mixture("gaussian", gm, class_tag))
    }

    pub fn from_boxes(name: &str, boxes: Vec<UniformBox>) -> Result<Self> {
        let dim = boxes.first().map(|b| b.lo.len()).ok_or_else(|| invalid("boxes", "empty"))?;
        let total: f64 = boxes.iter().map(UniformBox::mass).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid("boxes", format!("box masses sum to {total}")));
        }
        let mut radius: f64 = 0.0;
        let mut m2 = 0.0;
        for b in &boxes {
            if b.lo.len() != dim || b.hi.len() != dim {
                return Err(VpError::DimensionMismatch { expected: dim, got: b.lo.len() });
            }
            let mut corner = 0.0;
            let mut sq = 0.0;
            for (l, h) in b.lo.iter().zip(&b.hi) {
                if !(h > l) {
                    return Err(invalid("boxes", "box needs hi > lo"));
                }
                corner += l.abs().max(h.abs()).powi(2);
                sq += (l * l + l * h + h * h) / 3.0;
            }
            radius = radius.max(corner.sqrt());
            m2 += b.mass() * sq;
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            class_tag: ClassTag::A1,
            support_radius: radius,
            second_moment: m2,
            kind: TargetKind::Boxes(boxes),
        })
    }

    pub fn from_convolution(name: &str, conv: CompactConvolution) -> Self {
        Self {
            name: name.to_string(),
            dim: conv.dim,
            class_tag: ClassTag::A3,
            support_radius: f64::INFINITY,
            second_moment: conv.second_moment(),
            kind: TargetKind::Convolution(conv),
        }
    }

    pub fn triangular() -> Self {
        Self {
            name: "triangular".into(),
            dim: 1,
            class_tag: ClassTag::A1,
            support_radius: 1.0,
            second_moment: 1.0 / 6.0,
            kind: TargetKind::Triangular,
        }
    }

    pub fn cubic_pullback() -> Self {
        let (x, w) = composite_gauss_legendre(-3.0, 3.0, 40, 20);
        let m2 = x.iter().zip(&w).map(|(xi, wi)| wi * xi * xi * cubic_log_pdf(*xi).exp()).sum();
        Self {
            name: "cubic_pullback".into(),
            dim: 1,
            class_tag: ClassTag::General,
            support_radius: f64::INFINITY,
            second_moment: m2,
            kind: TargetKind::CubicPullback,
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            TargetKind::Mixture(gm) => gm.log_pdf(x),
            TargetKind::Boxes(boxes) => boxes
                .iter()
                .find(|b| b.contains(x))
                .map(|b| b.density.ln())
                .unwrap_or(f64::NEG_INFINITY),
            TargetKind::Triangular => (1.0 - x[0].abs()).max(0.0).ln(),
            TargetKind::CubicPullback => cubic_log_pdf(x[0]),
            TargetKind::Convolution(c) => c.log_pdf(x),
        }
    }

    pub fn pdf(&self, x: &[f64]) -> f64 {
        match &self.kind {
            TargetKind::Triangular => (1.0 - x[0].abs()).max(0.0),
            TargetKind::Boxes(boxes) => boxes.iter().find(|b| b.contains(x)).map(|b| b.density).unwrap_or(0.0),
            _ => self.log_pdf(x).exp(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match &self.kind {
            TargetKind::Mixture(gm) => gm.mean(),
            TargetKind::Boxes(boxes) => {
                let mut m = vec![0.0; self.dim];
                for b in boxes {
                    for i in 0..self.dim {
                        m[i] += b.mass() * 0.5 * (b.lo[i] + b.hi[i]);
                    }
                }
                m
            }
            TargetKind::Triangular | TargetKind::CubicPullback => vec![0.0],
            TargetKind::Convolution(c) => {
                let mut m = vec![0.0; self.dim];
                for (y, lm) in c.atoms.iter().zip(&c.log_masses) {
                    for i in 0..self.dim {
                        m[i] += lm.exp() * y[i];
                    }
                }
                m
            }
        }
    }

    /// Draws `n` i.i.d. points; deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample_one(&mut rng)).collect()
    }

    pub(crate) fn sample_one(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.kind {
            TargetKind::Mixture(gm) => gm.sample_one(rng),
            TargetKind::Boxes(boxes) => {
                let masses: Vec<f64> = boxes.iter().map(UniformBox::mass).collect();
                let b = &boxes[categorical(&masses, rng.gen())];
                // inverse CDF per axis of a uniform is affine
                b.lo.iter().zip(&b.hi).map(|(l, h)| l + (h - l) * rng.gen::<f64>()).collect()
            }
            TargetKind::Triangular => {
                let u: f64 = rng.gen();
                if u < 0.5 {
                    vec![(2.0 * u).sqrt() - 1.0]
                } else {
                    vec![1.0 - (2.0 * (1.0 - u)).sqrt()]
                }
            }
            TargetKind::CubicPullback => {
                let z: f64 = rng.sample(StandardNormal);
                vec![cubic_inverse(z)]
            }
            TargetKind::Convolution(c) => c.sample_one(rng),
        }
    }

    /// Nodes of the one-dimensional density restricted to its support,
    /// split at kinks, used by quadrature-based models.
    pub(crate) fn density_pieces(&self) -> Vec<(f64, f64)> {
        match &self.kind {
            TargetKind::Triangular => vec![(-1.0, 0.0), (0.0, 1.0)],
            TargetKind::CubicPullback => vec![(-2.0, 0.0), (0.0, 2.0)],
            _ => Vec::new(),
        }
    }
}

pub fn cubic_log_pdf(x: f64) -> f64 {
    let g = 3.0 * x * x * x + x;
    std_normal_log_pdf(&[g]) + (9.0 * x * x + 1.0).ln()
}

/// Real root of `3x^3 + x = z` (Cardano; the cubic is strictly increasing).
pub fn cubic_inverse(z: f64) -> f64 {
    let q = -z / 3.0;
    let p = 1.0 / 3.0;
    let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
    let mut x = (-q / 2.0 + disc).cbrt() + (-q / 2.0 - disc).cbrt();
    // one Newton polish
    for _ in 0..2 {
        x -= (3.0 * x * x * x + x - z) / (9.0 * x * x + 1.0);
    }
    x
}

fn get_f64(params: &Params, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_f64().ok_or_else(|| invalid(key, "expected a number")),
    }
}

fn get_vec(params: &Params, key: &str, default: &[f64]) -> Result<Vec<f64>> {
    match params.get(key) {
        None => Ok(default.to_vec()),
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| invalid(key, "expected numbers")))
            .collect(),
        Some(v) => v.as_f64().map(|x| vec![x]).ok_or_else(|| invalid(key, "expected a number or array")),
    }
}

fn get_points(params: &Params, key: &str, default: &[[f64; 2]]) -> Result<Vec<Vec<f64>>> {
    match params.get(key) {
        None => Ok(default.iter().map(|p| p.to_vec()).collect()),
        Some(Value::Array(a)) => a
            .iter()
            .map(|p| match p {
                Value::Array(q) => q
                    .iter()
                    .map(|v| v.as_f64().ok_or_else(|| invalid(key, "expected numbers")))
                    .collect(),
                _ => Err(invalid(key, "expected an array of points")),
            })
            .collect(),
        _ => Err(invalid(key, "expected an array of points")),
    }
}

fn check_keys(params: &Params, allowed: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(invalid(k, "unknown parameter for this target"));
        }
    }
    Ok(())
}

pub const BUILTIN_TARGETS: [&str; 9] = [
    "triangular",
    "two_uniform",
    "cubic_pullback",
    "gmm1d",
    "rings",
    "squares",
    "moons",
    "concentric",
    "gaussian",
];

/// Builds one of the named target families from a parameter map.
pub fn make_builtin_target(name: &str, params: &Params) -> Result<TargetDensity> {
    match name {
        "triangular" => {
            check_keys(params, &[])?;
            Ok(TargetDensity::triangular())
        }
        "cubic_pullback" => {
            check_keys(params, &[])?;
            Ok(TargetDensity::cubic_pullback())
        }
        "two_uniform" => {
            check_keys(params, &[])?;
            let b = |lo: f64, hi: f64| UniformBox { lo: vec![lo], hi: vec![hi], density: 1.0 };
            TargetDensity::from_boxes("two_uniform", vec![b(-1.0, -0.5), b(0.5, 1.0)])
        }
        "gmm1d" => {
            check_keys(params, &["means", "stds", "weights"])?;
            let means = get_vec(params, "means", &[-3.0, -1.0, 1.0])?;
            let stds = get_vec(params, "stds", &[0.2, 0.35, 0.25])?;
            let weights = get_vec(params, "weights", &[0.2, 0.5, 0.3])?;
            if means.len() != stds.len() || means.len() != weights.len() {
                return Err(invalid("gmm1d", "means, stds and weights must have equal length"));
            }
            let gm = GaussianMixture::isotropic(weights, means.iter().map(|m| vec![*m]).collect(), stds)?;
            Ok(TargetDensity::from_mixture("gmm1d", gm, ClassTag::A4))
        }
        "gaussian" => {
            check_keys(params, &["mean", "std", "class"])?;
            let mean = get_vec(params, "mean", &[0.0])?;
            let std = get_f64(params, "std", 1.0)?;
            let class = match params.get("class").and_then(Value::as_str).unwrap_or("A4") {
                "A2" => ClassTag::A2,
                "A4" => ClassTag::A4,
                other => return Err(invalid("class", format!("unsupported class '{other}'"))),
            };
            TargetDensity::gaussian(mean, std, class)
        }
        "rings" => {
            check_keys(params, &["n_components", "radius", "std"])?;
            let k = get_f64(params, "n_components", 8.0)? as usize;
            let r = get_f64(params, "radius", 2.0)?;
            let s = get_f64(params, "std", 0.2)?;
            if k == 0 {
                return Err(invalid("n_components", "must be positive"));
            }
            let means = (0..k)
                .map(|i| {
                    let th = 2.0 * PI * i as f64 / k as f64;
                    vec![r * th.cos(), r * th.sin()]
                })
                .collect();
            let gm = GaussianMixture::isotropic(vec![1.0 / k as f64; k], means, vec![s; k])?;
            Ok(TargetDensity::from_mixture("rings", gm, ClassTag::A4))
        }
        "squares" => {
            check_keys(params, &["centers", "side"])?;
            let centers = get_points(params, "centers", &[[-1.5, 0.0], [1.5, 0.0]])?;
            let side = get_f64(params, "side", 1.0)?;
            if !(side > 0.0) {
                return Err(invalid("side", "must be positive"));
            }
            let dens = 1.0 / (centers.len() as f64 * side * side);
            let boxes = centers
                .iter()
                .map(|c| UniformBox {
                    lo: c.iter().map(|v| v - 0.5 * side).collect(),
                    hi: c.iter().map(|v| v + 0.5 * side).collect(),
                    density: dens,
                })
                .collect();
            TargetDensity::from_boxes("squares", boxes)
        }
        "moons" => {
            check_keys(params, &["noise"])?;
            let noise = get_f64(params, "noise", 0.1)?;
            let arcs = vec![
                Arc { center: [0.0, 0.0], radius: 1.0, theta0: 0.0, theta1: PI, mass: 0.5 },
                Arc { center: [1.0, 0.5], radius: 1.0, theta0: PI, theta1: 2.0 * PI, mass: 0.5 },
            ];
            let conv = CompactConvolution::new(2, BaseMeasure::Arcs(arcs), SquareMat::scalar(2, noise * noise))?;
            Ok(TargetDensity::from_convolution("moons", conv))
        }
        "concentric" => {
            check_keys(params, &["radii", "noise"])?;
            let radii = get_vec(params, "radii", &[1.0, 2.0, 3.0])?;
            let noise = get_f64(params, "noise", 0.08)?;
            if radii.is_empty() {
                return Err(invalid("radii", "needs at least one circle"));
            }
            let m = 1.0 / radii.len() as f64;
            let arcs = radii
                .iter()
                .map(|r| Arc { center: [0.0, 0.0], radius: *r, theta0: 0.0, theta1: 2.0 * PI, mass: m })
                .collect();
            let conv = CompactConvolution::new(2, BaseMeasure::Arcs(arcs), SquareMat::scalar(2, noise * noise))?;
            Ok(TargetDensity::from_convolution("concentric", conv))
        }
        other => Err(VpError::UnknownTarget(other.to_string())),
    }
}

/// Result of the 𝒢-approximant construction.
#[derive(Debug, Clone)]
pub struct GApproximation {
    pub density: CompactConvolution,
    /// Truncation radius.
    pub radius: f64,
    /// Isotropic smoothing standard deviation.
    pub sigma: f64,
    /// Target mass outside B(0, radius).
    pub tail_mass: f64,
    /// Grid L1 distance between the smoothed and the truncated density.
    pub smoothing_l1: f64,
}

/// Mass of a one-dimensional target inside `[-r, r]`.
fn mass_inside(target: &TargetDensity, r: f64) -> f64 {
    let (x, w) = composite_gauss_legendre(-r, r, (8.0 * r).ceil().max(8.0) as usize, 20);
    x.iter().zip(&w).map(|(xi, wi)| wi * target.pdf(&[*xi])).sum()
}

/// Truncates, renormalizes and smooths a 1D target so that the result lies in
/// class 𝒢 and is within `epsilon` of the target in L1.
///
/// The truncation radius is the support radius for compact targets, otherwise
/// the first power of two whose tail mass is below ε/4. The smoothing width is
/// the largest σ ∈ [1e-4, 1] (geometric bisection, 40 steps) for which the
/// grid L1 distance to the truncated density stays below ε/2.
pub fn g_approximant(target: &TargetDensity, epsilon: f64) -> Result<GApproximation> {
    if !(epsilon > 0.0 && epsilon < 2.0) {
        return Err(invalid("epsilon", "must lie in (0, 2)"));
    }
    if target.dim != 1 {
        return Err(VpError::UnsupportedDimension(target.dim));
    }
    let (radius, tail) = if target.support_radius.is_finite() {
        (target.support_radius, 0.0)
    } else {
        let mut r = 1.0;
        loop {
            let tail = (1.0 - mass_inside(target, r)).max(0.0);
            if tail < epsilon / 4.0 {
                break (r, tail);
            }
            r *= 2.0;
            if r > 1024.0 {
                return Err(invalid("target", "tail mass does not vanish; cannot truncate"));
            }
        }
    };
    let mass = 1.0 - tail;
    let truncated = |x: f64| if x.abs() <= radius { target.pdf(&[x]) / mass } else { 0.0 };

    let smoothing_l1 = |sigma: f64| -> (f64, Vec<f64>, Vec<f64>, f64) {
        let h = sigma.min(0.01) / 4.0;
        let lo = -radius - 6.0 * sigma;
        let n = ((2.0 * (radius + 6.0 * sigma)) / h).ceil() as usize + 1;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * h).collect();
        let f: Vec<f64> = xs.iter().map(|&x| truncated(x)).collect();
        let half = (6.0 * sigma / h).ceil() as isize;
        let mut kern: Vec<f64> = (-half..=half)
            .map(|j| {
                let u = j as f64 * h / sigma;
                (-0.5 * u * u).exp()
            })
            .collect();
        let ks: f64 = kern.iter().sum();
        kern.iter_mut().for_each(|k| *k /= ks);
        let mut g = vec![0.0; n];
        for (i, fi) in f.iter().enumerate() {
            if *fi == 0.0 {
                continue;
            }
            for (jj, k) in kern.iter().enumerate() {
                let idx = i as isize + jj as isize - half;
                if idx >= 0 && (idx as usize) < n {
                    g[idx as usize] += fi * k;
                }
            }
        }
        let l1 = h * f.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>();
        (l1, xs, f, h)
    };

    let goal = epsilon / 2.0;
    let (mut lo, mut hi) = (1e-4_f64, 1.0_f64);
    let sigma = if smoothing_l1(hi).0 < goal {
        hi
    } else {
        if smoothing_l1(lo).0 >= goal {
            return Err(invalid("epsilon", "smoothing error exceeds ε/2 even at σ = 1e-4"));
        }
        for _ in 0..40 {
            let mid = (lo * hi).sqrt();
            if smoothing_l1(mid).0 < goal {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let (l1, xs, f, h) = smoothing_l1(sigma);
    let mut nodes = Vec::new();
    let mut masses = Vec::new();
    for (x, v) in xs.iter().zip(&f) {
        if *v > 0.0 {
            nodes.push(vec![*x]);
            masses.push(v * h);
        }
    }
    let total: f64 = masses.iter().sum();
    masses.iter_mut().for_each(|m| *m /= total);
    let density = CompactConvolution::new(
        1,
        BaseMeasure::GridDensity { nodes, masses, spacing: h },
        SquareMat::scalar(1, sigma * sigma),
    )?;
    Ok(GApproximation { density, radius, sigma, tail_mass: tail, smoothing_l1: l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::linspace;

    fn defaults(name: &str) -> TargetDensity {
        make_builtin_target(name, &Params::new()).unwrap()
    }

    #[test]
    fn gmm1d_defaults() {
        let t = defaults("gmm1d");
        let TargetKind::Mixture(gm) = &t.kind else { panic!() };
        assert_eq!(gm.means, vec![vec![-3.0], vec![-1.0], vec![1.0]]);
        assert_eq!(gm.weights, vec![0.2, 0.5, 0.3]);
        let stds: Vec<f64> = gm.covariances.iter().map(|c| c.a[0][0].sqrt()).collect();
        for (s, e) in stds.iter().zip([0.2, 0.35, 0.25]) {
            assert!((s - e).abs() < 1e-15);
        }
        assert_eq!(t.class_tag, ClassTag::A4);
        // Σα(μ²+σ²) = 0.2·9.04 + 0.5·1.1225 + 0.3·1.0625
        assert!((t.second_moment - 2.688).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_values() {
        let t = defaults("two_uniform");
        assert_eq!(t.pdf(&[0.0]), 0.0);
        assert_eq!(t.pdf(&[0.75]), 1.0);
        assert_eq!(t.class_tag, ClassTag::A1);
        assert_eq!(t.support_radius, 1.0);
    }

    #[test]
    fn triangular_trapezoid_mass() {
        let t = defaults("triangular");
        let xs = linspace(-2.0, 2.0, 4001);
        let v: Vec<f64> = xs.iter().map(|x| t.pdf(&[*x])).collect();
        let m = crate::quadrature::trapezoid(&v, 4.0 / 4000.0);
        assert!((m - 1.0).abs() < 1e-8);
        assert_eq!(t.pdf(&[0.0]), 1.0);
    }

    #[test]
    fn cubic_at_zero() {
        let t = defaults("cubic_pullback");
        assert!((t.pdf(&[0.0]) - 0.398_942_280_401_432_7).abs() < 1e-15);
        for z in [-5.0, -0.3, 0.0, 1.7, 40.0] {
            let x = cubic_inverse(z);
            assert!((3.0 * x * x * x + x - z).abs() < 1e-12 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn gmm1d_pdf_direct_sum() {
        let t = defaults("gmm1d");
        // direct evaluation of each weighted component
        let comps = [(0.2, -3.0, 0.2), (0.5, -1.0, 0.35), (0.3, 1.0, 0.25)];
        let direct: f64 = comps
            .iter()
            .map(|(a, m, s)| a * (-(-1.0_f64 - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()))
            .sum();
        assert!((t.pdf(&[-1.0]) - direct).abs() < 1e-14 * direct);
    }

    #[test]
    fn builtin_classes() {
        let expect = [
            ("triangular", ClassTag::A1),
            ("two_uniform", ClassTag::A1),
            ("squares", ClassTag::A1),
            ("gmm1d", ClassTag::A4),
            ("rings", ClassTag::A4),
            ("moons", ClassTag::A3),
            ("concentric", ClassTag::A3),
            ("cubic_pullback", ClassTag::General),
        ];
        for (n, c) in expect {
            assert_eq!(defaults(n).class_tag, c, "{n}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(make_builtin_target("nope", &Params::new()), Err(VpError::UnknownTarget(_))));
        let mut p = Params::new();
        p.insert("weights".into(), serde_json::json!([0.5, 0.4, 0.2]));
        assert!(make_builtin_target("gmm1d", &p).is_err());
        let gm = GaussianMixture::new(
            vec![1.0],
            vec![vec![0.0, 0.0]],
            vec![SquareMat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])],
        );
        assert!(gm.is_err());
        let mut p = Params::new();
        p.insert("bogus".into(), serde_json::json!(1));
        assert!(make_builtin_target("moons", &p).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_supported() {
        let t = defaults("two_uniform");
        let a = t.sample(1000, 7);
        assert_eq!(a, t.sample(1000, 7));
        assert!(a.iter().all(|x| (x[0] >= -1.0 && x[0] <= -0.5) || (x[0] >= 0.5 && x[0] <= 1.0)));
    }

    #[test]
    fn gmm1d_sample_mean() {
        let t = defaults("gmm1d");
        let n = 100_000;
        let s = t.sample(n, 1);
        let mean = s.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        // Σαμ = 0.2·(−3) + 0.5·(−1) + 0.3·1
        let true_mean = -0.8;
        assert!((t.mean()[0] - true_mean).abs() < 1e-15);
        let se = ((t.second_moment - true_mean * true_mean) / n as f64).sqrt();
        assert!((mean - true_mean).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn base_radii() {
        let TargetKind::Convolution(c) = &defaults("concentric").kind else { panic!() };
        assert!((c.base_radius() - 3.0).abs() < 1e-12);
        let TargetKind::Convolution(c) = &defaults("moons").kind else { panic!() };
        assert!((c.base_radius() - 4.25f64.sqrt()).abs() < 1e-12);
        assert!((defaults("squares").support_radius - 4.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn g_approximant_compact_target_uses_support_radius() {
        let t = defaults("two_uniform");
        let g = g_approximant(&t, 0.05).unwrap();
        assert_eq!(g.radius, 1.0);
        assert_eq!(g.tail_mass, 0.0);
        assert!(g.smoothing_l1 < 0.025);
        assert!(g_approximant(&t, 2.0).is_err());
        assert!(g_approximant(&t, 0.0).is_err());
        assert!(g_approximant(&defaults("moons"), 0.1).is_err());
    }

    #[test]
    fn g_approximant_near_diameter() {
        let t = TargetDensity::gaussian(vec![0.0], 1.0, ClassTag::A4).unwrap();
        let g = g_approximant(&t, 1.999).unwrap();
        assert!(g.tail_mass < 1.999 / 4.0);
        assert_eq!(g.sigma, 1.0);
    }
}
