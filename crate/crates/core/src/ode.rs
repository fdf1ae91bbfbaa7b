//! Dormand–Prince 5(4) integrator with embedded error control.
//!
//! Integrates in either time direction. The right-hand side may fail (for
//! example when a score evaluation hits the tail guard); the failure is
//! surfaced with the time at which it happened.

use crate::error::{Result, VpError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub initial_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 1_000_000,
            initial_step: 0.0,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(crate::error::invalid("integrator", "rtol and atol must be positive"));
        }
        if self.max_steps == 0 {
            return Err(crate::error::invalid("integrator.max_steps", "must be at least 1"));
        }
        if self.initial_step < 0.0 {
            return Err(crate::error::invalid("integrator.initial_step", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Largest scaled error norm among accepted steps.
    pub max_step_error: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `y' = f(t, y)` from `t0` to `t1` in place.
///
/// `observer` is called after every accepted step with the new `(t, y)`.
pub fn integrate<F, O>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y: &mut [f64],
    cfg: &IntegratorConfig,
    mut observer: O,
) -> Result<StepStats>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    O: FnMut(f64, &[f64]),
{
    cfg.validate()?;
    let mut stats = StepStats::default();
    if t0 == t1 {
        return Ok(stats);
    }
    let n = y.len();
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut t = t0;

    let mut eval = |t: f64, y: &[f64], out: &mut [f64], stats: &mut StepStats| -> Result<()> {
        stats.evaluations += 1;
        rhs(t, y, out).map_err(|e| match e {
            VpError::Trajectory { .. } => e,
            other => VpError::Trajectory {
                t,
                source: Box::new(other),
            },
        })
    };

    eval(t, y, &mut k[0], &mut stats)?;
    let scale = |yi: f64, yj: f64| cfg.atol + cfg.rtol * yi.abs().max(yj.abs());

    let mut h = if cfg.initial_step > 0.0 {
        cfg.initial_step.min(span)
    } else {
        // Hairer's starting step heuristic.
        let d0 = rms(y.iter().map(|&v| v / scale(v, v)));
        let d1 = rms(y.iter().zip(&k[0]).map(|(&v, &f)| f / scale(v, v)));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span);
        for i in 0..n {
            tmp[i] = y[i] + dir * h0 * k[0][i];
        }
        let mut f1 = vec![0.0; n];
        eval(t + dir * h0, &tmp, &mut f1, &mut stats)?;
        let d2 = rms((0..n).map(|i| (f1[i] - k[0][i]) / scale(y[i], y[i]))) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    };

    let mut last_rejected = false;
    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-14 * span.max(1.0) {
            break;
        }
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(VpError::StepLimit {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        if h < 1e-15 * t.abs().max(1.0) {
            return Err(VpError::StepUnderflow { t });
        }
        let hs = dir * h;

        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k[0][i];
        }
        let (k0, rest) = k.split_at_mut(1);
        let k0 = &k0[0];
        eval(t + C2 * hs, &tmp, &mut rest[0], &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k0[i] + A32 * rest[0][i]);
        }
        eval(t + C3 * hs, &tmp, &mut rest[1], &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k0[i] + A42 * rest[0][i] + A43 * rest[1][i]);
        }
        eval(t + C4 * hs, &tmp, &mut rest[2], &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i]
                + hs * (A51 * k0[i] + A52 * rest[0][i] + A53 * rest[1][i] + A54 * rest[2][i]);
        }
        eval(t + C5 * hs, &tmp, &mut rest[3], &mut stats)?;
        for i in 0..n {
            tmp[i] = y[i]
                + hs * (A61 * k0[i]
                    + A62 * rest[0][i]
                    + A63 * rest[1][i]
                    + A64 * rest[2][i]
                    + A65 * rest[3][i]);
        }
        let tn = if last { t1 } else { t + hs };
        eval(tn, &tmp, &mut rest[4], &mut stats)?;
        for i in 0..n {
            ynew[i] = y[i]
                + hs * (B1 * k0[i]
                    + B3 * rest[1][i]
                    + B4 * rest[2][i]
                    + B5 * rest[3][i]
                    + B6 * rest[4][i]);
        }
        eval(tn, &ynew, &mut rest[5], &mut stats)?;

        let mut err: f64 = 0.0;
        for i in 0..n {
            let e = hs
                * (E1 * k0[i]
                    + E3 * rest[1][i]
                    + E4 * rest[2][i]
                    + E5 * rest[3][i]
                    + E6 * rest[4][i]
                    + E7 * rest[5][i]);
            let r = e / scale(y[i], ynew[i]);
            err = err.max(r.abs());
        }
        if !err.is_finite() {
            stats.rejected += 1;
            h *= 0.1;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            stats.accepted += 1;
            stats.max_step_error = stats.max_step_error.max(err);
            y.copy_from_slice(&ynew);
            t = tn;
            let (first, rest) = k.split_at_mut(6);
            first[0].copy_from_slice(&rest[0]);
            observer(t, y);
            if last {
                break;
            }
            let mut fac = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h *= fac;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
    Ok(stats)
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_both_directions() {
        let cfg = IntegratorConfig::default();
        let mut y = vec![1.0];
        let stats = integrate(
            |_, y, dy| {
                dy[0] = -y[0];
                Ok(())
            },
            0.0,
            2.0,
            &mut y,
            &cfg,
            |_, _| {},
        )
        .unwrap();
        assert!((y[0] - (-2f64).exp()).abs() < 1e-9);
        assert!(stats.accepted > 0);
        integrate(
            |_, y, dy| {
                dy[0] = -y[0];
                Ok(())
            },
            2.0,
            0.0,
            &mut y,
            &cfg,
            |_, _| {},
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let cfg = IntegratorConfig {
            rtol: 1e-10,
            atol: 1e-12,
            ..Default::default()
        };
        let mut y = vec![1.0, 0.0];
        integrate(
            |_, y, dy| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            2.0 * std::f64::consts::PI,
            &mut y,
            &cfg,
            |_, _| {},
        )
        .unwrap();
        assert!((y[0] - 1.0).abs() < 1e-8 && y[1].abs() < 1e-8);
    }

    #[test]
    fn step_limit_reported() {
        let cfg = IntegratorConfig {
            max_steps: 3,
            ..Default::default()
        };
        let mut y = vec![1.0];
        let r = integrate(
            |t, _, dy| {
                dy[0] = (50.0 * t).sin();
                Ok(())
            },
            0.0,
            10.0,
            &mut y,
            &cfg,
            |_, _| {},
        );
        assert!(matches!(r, Err(VpError::StepLimit { .. })));
    }

    #[test]
    fn rhs_failure_carries_time() {
        let mut y = vec![1.0];
        let r = integrate(
            |t, _, dy| {
                if t > 0.5 {
                    return Err(VpError::NonFinite("boom".into()));
                }
                dy[0] = 1.0;
                Ok(())
            },
            0.0,
            1.0,
            &mut y,
            &IntegratorConfig::default(),
            |_, _| {},
        );
        match r {
            Err(VpError::Trajectory { t, .. }) => assert!(t > 0.5),
            other => panic!("unexpected {other:?}"),
        }
    }
}
