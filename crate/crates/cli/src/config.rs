//! Strict JSON experiment configuration.

use crate::error::CliError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use vpflow::iresnet::IResNetConfig;
use vpflow::metrics::GridSpec;
use vpflow::ode::IntegratorConfig;
use vpflow::score_learn::DsmConfig;
use vpflow::targets::{make_builtin_target, Params, TargetDensity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ScoreBounds,
    Transport,
    Converge,
    TrainScore,
    TrainIresnet,
    Compare,
    GirsanovCheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::ScoreBounds => "score_bounds",
            Self::Transport => "transport",
            Self::Converge => "converge",
            Self::TrainScore => "train_score",
            Self::TrainIresnet => "train_iresnet",
            Self::Compare => "compare",
            Self::GirsanovCheck => "girsanov_check",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl TargetBlock {
    pub fn build(&self) -> vpflow::Result<TargetDensity> {
        make_builtin_target(&self.name, &self.params)
    }
}

/// Early-stopping time δ and horizon T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub delta: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

/// Log-spaced time grid for empirical and theoretical L(t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LtcBlock {
    pub t_min: f64,
    pub t_max: f64,
    pub count: usize,
    /// Points over which the Jacobian norm is maximized.
    pub grid: Option<GridSpec>,
}

impl Default for LtcBlock {
    fn default() -> Self {
        Self { t_min: 1e-3, t_max: 5.0, count: 40, grid: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportBlock {
    /// Explicit start points; when absent `n_samples` target draws are used.
    pub points: Option<Vec<Vec<f64>>>,
    pub n_samples: usize,
    /// Grid for measured Lipschitz constants of the transport map.
    pub lipschitz_grid: Option<GridSpec>,
}

impl Default for TransportBlock {
    fn default() -> Self {
        Self { points: None, n_samples: 200, lipschitz_grid: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    pub score: Option<DsmConfig>,
    pub iresnet: Option<IResNetConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationBlock {
    /// Monte Carlo budget for ℰ_{δ,T}.
    pub n_mc: usize,
    /// Random points for the iResNet inversion round trip.
    pub roundtrip_points: usize,
}

impl Default for EvaluationBlock {
    fn default() -> Self {
        Self { n_mc: 100_000, roundtrip_points: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareBlock {
    #[serde(rename = "L_values")]
    pub lip_values: Vec<f64>,
    pub include_learned: bool,
    /// Learned-score checkpoints keyed by target name; missing targets are trained.
    pub score_checkpoints: BTreeMap<String, PathBuf>,
}

impl Default for CompareBlock {
    fn default() -> Self {
        Self { lip_values: vec![0.25, 0.75, 0.95], include_learned: true, score_checkpoints: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub target: Option<TargetBlock>,
    #[serde(default)]
    pub targets: Option<Vec<TargetBlock>>,
    #[serde(default)]
    pub time: Option<TimeWindow>,
    #[serde(default)]
    pub sweep: Option<Vec<TimeWindow>>,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub ltc: Option<LtcBlock>,
    #[serde(default)]
    pub transport: Option<TransportBlock>,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub evaluation: EvaluationBlock,
    /// Learned-score checkpoint for score_bounds and girsanov_check.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub compare: Option<CompareBlock>,
}

fn bad(pointer: &str, message: impl Into<String>) -> CliError {
    CliError::Config { pointer: pointer.to_string(), message: message.into() }
}

fn check_window(w: &TimeWindow, pointer: &str) -> Result<(), CliError> {
    if !(w.delta >= 0.0 && w.delta.is_finite()) {
        return Err(bad(&format!("{pointer}/delta"), "delta must be finite and nonnegative"));
    }
    if !(w.horizon.is_finite() && w.delta < w.horizon) {
        return Err(bad(&format!("{pointer}/delta"), format!("delta = {} must be < T = {}", w.delta, w.horizon)));
    }
    Ok(())
}

fn check_target(t: &TargetBlock, pointer: &str) -> Result<TargetDensity, CliError> {
    t.build().map_err(|e| bad(pointer, e.to_string()))
}

impl ExperimentConfig {
    /// Parses strictly; the error pointer names the offending field.
    pub fn from_json_str(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            use serde_path_to_error::Segment;
            let pointer: String = e
                .path()
                .iter()
                .filter_map(|s| match s {
                    Segment::Seq { index } => Some(format!("/{index}")),
                    Segment::Map { key } => Some(format!("/{key}")),
                    Segment::Enum { variant } => Some(format!("/{variant}")),
                    Segment::Unknown => None,
                })
                .collect();
            CliError::Config { pointer, message: e.into_inner().to_string() }
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad("", format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::from_json_str(&text)?, text))
    }

    pub fn require_target(&self) -> Result<TargetDensity, CliError> {
        let t = self.target.as_ref().ok_or_else(|| bad("/target", "this experiment needs a target block"))?;
        check_target(t, "/target")
    }

    pub fn require_time(&self) -> Result<TimeWindow, CliError> {
        self.time.ok_or_else(|| bad("/time", "this experiment needs a time block"))
    }

    /// Checks that every block the chosen experiment reads is present and sane.
    pub fn validate(&self) -> Result<(), CliError> {
        self.integrator.validate().map_err(|e| bad("/integrator", e.to_string()))?;
        if let Some(w) = &self.time {
            check_window(w, "/time")?;
        }
        if let Some(g) = &self.grid {
            g.validate().map_err(|e| bad("/grid", e.to_string()))?;
        }
        if let Some(s) = &self.training.score {
            s.validate().map_err(|e| bad("/training/score", e.to_string()))?;
        }
        if let Some(c) = &self.training.iresnet {
            c.validate().map_err(|e| bad("/training/iresnet", e.to_string()))?;
        }
        let target_dim = match &self.target {
            Some(t) => Some(check_target(t, "/target")?.dim),
            None => None,
        };
        if let (Some(g), Some(d)) = (&self.grid, target_dim) {
            if g.dim() != d {
                return Err(bad("/grid/axes", format!("grid has {} axes but the target is {d}-dimensional", g.dim())));
            }
        }
        match self.experiment {
            Experiment::ScoreBounds => {
                self.require_target()?;
                let l = self.ltc.clone().unwrap_or_default();
                if !(l.t_min > 0.0 && l.t_min < l.t_max && l.count >= 2) {
                    return Err(bad("/ltc", "need 0 < t_min < t_max and count ≥ 2"));
                }
            }
            Experiment::Transport => {
                let target = self.require_target()?;
                self.require_time()?;
                if let Some(pts) = self.transport.as_ref().and_then(|b| b.points.as_ref()) {
                    if pts.is_empty() {
                        return Err(bad("/transport/points", "must not be empty"));
                    }
                    if let Some(i) = pts.iter().position(|p| p.len() != target.dim) {
                        return Err(bad(&format!("/transport/points/{i}"), format!("expected {} coordinates", target.dim)));
                    }
                }
            }
            Experiment::Converge => {
                self.require_target()?;
                let sweep = self.sweep.as_ref().ok_or_else(|| bad("/sweep", "converge needs a sweep of (delta, T)"))?;
                if sweep.is_empty() {
                    return Err(bad("/sweep", "must not be empty"));
                }
                for (i, w) in sweep.iter().enumerate() {
                    check_window(w, &format!("/sweep/{i}"))?;
                }
            }
            Experiment::TrainScore => {
                self.require_target()?;
            }
            Experiment::TrainIresnet => {
                self.require_target()?;
            }
            Experiment::Compare => {
                let targets = self.targets.as_ref().ok_or_else(|| bad("/targets", "compare needs a target list"))?;
                if targets.is_empty() {
                    return Err(bad("/targets", "must not be empty"));
                }
                for (i, t) in targets.iter().enumerate() {
                    check_target(t, &format!("/targets/{i}"))?;
                }
                self.require_time()?;
                let c = self.compare.clone().unwrap_or_default();
                if let Some(i) = c.lip_values.iter().position(|l| !(*l > 0.0 && *l < 1.0)) {
                    return Err(bad(&format!("/compare/L_values/{i}"), "must lie in (0, 1)"));
                }
                for (name, path) in &c.score_checkpoints {
                    if !path.exists() {
                        return Err(bad(&format!("/compare/score_checkpoints/{name}"), format!("missing checkpoint {}", path.display())));
                    }
                }
            }
            Experiment::GirsanovCheck => {
                self.require_target()?;
                let w = self.require_time()?;
                if w.delta <= 0.0 {
                    return Err(bad("/time/delta", "the learned score needs delta > 0"));
                }
                match &self.checkpoint {
                    Some(p) if !p.exists() => {
                        return Err(bad("/checkpoint", format!("missing checkpoint {}", p.display())));
                    }
                    None if self.training.score.is_none() => {
                        return Err(bad("/checkpoint", "girsanov_check needs a checkpoint or a training.score block"));
                    }
                    _ => {}
                }
            }
        }
        if let Some(p) = &self.checkpoint {
            if !p.exists() {
                return Err(bad("/checkpoint", format!("missing checkpoint {}", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, CliError> {
        let c = ExperimentConfig::from_json_str(s)?;
        c.validate()?;
        Ok(c)
    }

    fn pointer(e: CliError) -> String {
        match e {
            CliError::Config { pointer, .. } => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse(r#"{"experiment":"score_bounds","target":{"name":"gmm1d"}}"#).unwrap();
        assert_eq!(c.experiment, Experiment::ScoreBounds);
        assert_eq!(c.seed, 0);
        assert_eq!(c.integrator, IntegratorConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_pointer() {
        let e = parse(r#"{"experiment":"transport","target":{"name":"gmm1d"},"time":{"delta":0.1,"T":2,"typo":1}}"#).unwrap_err();
        assert_eq!(pointer(e), "/time/typo");
        let e = parse(r#"{"experiment":"converge","colour":1}"#).unwrap_err();
        assert_eq!(pointer(e), "/colour");
        let e = parse(r#"{"experiment":"train_score","target":{"name":"gmm1d"},"training":{"score":{"stepz":3}}}"#).unwrap_err();
        assert_eq!(pointer(e), "/training/score/stepz");
    }

    #[test]
    fn delta_not_below_horizon_points_at_delta() {
        let e = parse(r#"{"experiment":"transport","target":{"name":"gmm1d"},"time":{"delta":3,"T":3}}"#).unwrap_err();
        assert_eq!(pointer(e), "/time/delta");
        let e = parse(r#"{"experiment":"converge","target":{"name":"gmm1d"},"sweep":[{"delta":0.1,"T":2},{"delta":5,"T":4}]}"#).unwrap_err();
        assert_eq!(pointer(e), "/sweep/1/delta");
    }

    #[test]
    fn missing_blocks_and_empty_lists() {
        assert_eq!(pointer(parse(r#"{"experiment":"transport","target":{"name":"gmm1d"}}"#).unwrap_err()), "/time");
        assert_eq!(pointer(parse(r#"{"experiment":"compare","targets":[],"time":{"delta":0.01,"T":3}}"#).unwrap_err()), "/targets");
        assert_eq!(pointer(parse(r#"{"experiment":"score_bounds","target":{"name":"nope"}}"#).unwrap_err()), "/target");
        assert_eq!(
            pointer(parse(r#"{"experiment":"compare","targets":[{"name":"gmm1d"}],"time":{"delta":0.01,"T":3},"compare":{"L_values":[1.5]}}"#).unwrap_err()),
            "/compare/L_values/0"
        );
        assert_eq!(pointer(parse(r#"{"experiment":"girsanov_check","target":{"name":"gmm1d"},"time":{"delta":0.01,"T":3}}"#).unwrap_err()), "/checkpoint");
    }

    #[test]
    fn grid_dimension_must_match_target() {
        let e = parse(r#"{"experiment":"converge","target":{"name":"rings"},"sweep":[{"delta":0.1,"T":2}],"grid":{"axes":[{"lo":-1,"hi":1,"count":5}]}}"#).unwrap_err();
        assert_eq!(pointer(e), "/grid/axes");
    }
}
