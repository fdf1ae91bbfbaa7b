//! One function per experiment kind. Each writes its outputs through the
//! [`RunContext`] so the manifest can list them.

use crate::config::{ExperimentConfig, TimeWindow};
use crate::csvio::{Cell, Table};
use crate::error::CliError;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use vpflow::flow::{gronwall_certificate, measure_lipschitz, pullback_logpdf_many, transport_many, FlowField};
use vpflow::iresnet::{train_mle, IResNet, IResNetConfig, TrainedIResNet};
use vpflow::metrics::{bound_suite, kl_from_log_values, l1_from_values, tabulate, GridSpec, PullbackSpec};
use vpflow::nn::Checkpoint;
use vpflow::quadrature::logspace;
use vpflow::score_learn::{field_lipschitz, girsanov_kl_check, score_error, train_dsm, DsmConfig, GirsanovSettings, LearnedScore};
use vpflow::targets::TargetDensity;
use vpflow::vp::{empirical_l, forward_sample, LipschitzBound, VpScoreModel};

pub struct RunContext {
    pub out: PathBuf,
    /// Base seed; block seeds are offset by it.
    pub seed: u64,
    pub outputs: Vec<String>,
}

impl RunContext {
    pub fn new(out: PathBuf, seed: u64) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out)
            .map_err(|e| CliError::Output { path: out.display().to_string(), message: e.to_string() })?;
        Ok(Self { out, seed, outputs: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        table.write(&self.path(name))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        self.write_text(name, &(serde_json::to_string_pretty(value).expect("JSON values serialize") + "\n"))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| CliError::Output { path: p.display().to_string(), message: e.to_string() })?;
        self.outputs.push(name.to_string());
        Ok(())
    }
}

fn num(context: &str) -> impl FnOnce(vpflow::VpError) -> CliError {
    CliError::numerical(context.to_string())
}

fn square_grid(dim: usize, half_width: f64, count: usize) -> GridSpec {
    GridSpec::uniform(dim, -half_width, half_width, count).expect("fixed grid is valid")
}

/// Point set for sup-norm scans of score Jacobians.
fn default_scan_grid(dim: usize) -> GridSpec {
    if dim == 1 {
        square_grid(1, 4.0, 401)
    } else {
        square_grid(2, 4.0, 41)
    }
}

fn metric_grid(cfg: &ExperimentConfig, dim: usize) -> GridSpec {
    match &cfg.grid {
        Some(g) if g.dim() == dim => g.clone(),
        _ => GridSpec::default_for(dim),
    }
}

fn default_iresnet_config(dim: usize) -> IResNetConfig {
    // 2D uses a reduced desk-scale depth
    IResNetConfig { k: if dim == 2 { 20 } else { 5 }, ..IResNetConfig::default() }
}

fn load_learned(path: &Path) -> Result<LearnedScore, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config { pointer: "/checkpoint".into(), message: format!("{}: {e}", path.display()) })?;
    let ck = Checkpoint::from_json_str(&text).map_err(num("loading score checkpoint"))?;
    LearnedScore::from_checkpoint(&ck).map_err(num("loading score checkpoint"))
}

fn dsm_config(cfg: &ExperimentConfig, seed: u64) -> DsmConfig {
    let mut d = cfg.training.score.clone().unwrap_or_default();
    d.seed = d.seed.wrapping_add(seed);
    d
}

fn train_score_model(target: &TargetDensity, cfg: &ExperimentConfig, seed: u64) -> Result<(LearnedScore, Table), CliError> {
    let dsm = dsm_config(cfg, seed);
    let outcome = train_dsm(target, &dsm).map_err(num("score training"))?;
    let mut log = Table::new(&["step", "loss_ema"]);
    for e in &outcome.log {
        log.push(vec![e.step.into(), e.loss_ema.into()]);
    }
    Ok((outcome.model, log))
}

fn train_iresnet_model(target: &TargetDensity, base: &IResNetConfig, lip: Option<f64>, seed: u64) -> Result<TrainedIResNet, CliError> {
    let mut c = base.clone();
    c.seed = c.seed.wrapping_add(seed);
    if let Some(l) = lip {
        c.lip = l;
    }
    train_mle(target, &c).map_err(num(&format!("iResNet training (L = {})", c.lip)))
}

fn class_bound(model: &VpScoreModel, horizon: f64) -> Option<LipschitzBound> {
    model.lipschitz_bound(horizon).ok()
}

/// Target-side L1 and KL of a model density tabulated on `grid`.
fn target_distances(target: &TargetDensity, log_q: &[f64], grid: &GridSpec) -> Result<(f64, f64), CliError> {
    let log_p = tabulate(grid, |x| Ok(target.log_pdf(x))).map_err(num("tabulating target"))?;
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    let l1 = l1_from_values(&p, &q, grid).map_err(num("grid L1"))?;
    let kl = kl_from_log_values(&log_p, log_q, grid).map_err(num("grid KL"))?;
    Ok((l1, kl))
}

pub fn score_bounds(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let dim = target.dim;
    let model = VpScoreModel::new(target).map_err(num("building score model"))?;
    let ltc = cfg.ltc.clone().unwrap_or_default();
    let pts = ltc.grid.clone().unwrap_or_else(|| default_scan_grid(dim)).points();
    let learned = cfg.checkpoint.as_deref().map(load_learned).transpose()?;
    let bound = class_bound(&model, ltc.t_max);

    let mut headers = vec!["t", "empirical_L", "theoretical_L"];
    if learned.is_some() {
        headers.push("learned_L");
    }
    let mut table = Table::new(&headers);
    for t in logspace(ltc.t_min, ltc.t_max, ltc.count) {
        let emp = empirical_l(&model, t, &pts).map_err(num(&format!("empirical L at t = {t}")))?;
        let theo = bound.as_ref().and_then(|b| b.at(t).ok()).unwrap_or(f64::NAN);
        let mut row: Vec<Cell> = vec![t.into(), emp.into(), theo.into()];
        if let Some(l) = &learned {
            row.push(field_lipschitz(l, t, &pts).map_err(num(&format!("learned L at t = {t}")))?.into());
        }
        table.push(row);
    }
    ctx.write_table("ltc.csv", &table)?;

    let mut report = json!({
        "target": model.target.name,
        "class": model.class_tag(),
        "bound": bound,
    });
    if let (Some(w), Some(b)) = (cfg.time, &bound) {
        let cert = gronwall_certificate(|t| b.at(t), w.delta, w.horizon).map_err(num("Grönwall certificate"))?;
        report["certificate"] = json!({"delta": w.delta, "T": w.horizon, "log_value": cert.log_value, "value": cert.value});
    }
    ctx.write_json("report.json", &report)
}

pub fn transport(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let w = cfg.require_time()?;
    let dim = target.dim;
    let block = cfg.transport.clone().unwrap_or_default();
    let pts: Vec<Vec<f64>> = match &block.points {
        Some(p) => p.clone(),
        None => target
            .sample(block.n_samples, ctx.seed)
            .iter()
            .enumerate()
            .map(|(i, x)| forward_sample(x, w.delta, ctx.seed.wrapping_add(1 + i as u64)))
            .collect::<vpflow::Result<_>>()
            .map_err(num("diffusing start points"))?,
    };
    let model = VpScoreModel::new(target).map_err(num("building score model"))?;
    let field = FlowField::new(&model);
    let results = transport_many(&field, w.delta, w.horizon, &pts, &cfg.integrator).map_err(num("transport"))?;

    let mut headers: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    headers.extend((0..dim).map(|i| format!("y{i}")));
    headers.push("logdet".into());
    let mut table = Table::new(&headers);
    for (x, r) in pts.iter().zip(&results) {
        let mut row: Vec<Cell> = x.iter().map(|v| Cell::from(*v)).collect();
        row.extend(r.endpoint.iter().map(|v| Cell::from(*v)));
        row.push(r.logdet.into());
        table.push(row);
    }
    ctx.write_table("transport.csv", &table)?;

    let lip_grid = block.lipschitz_grid.clone().unwrap_or_else(|| if dim == 1 { square_grid(1, 4.0, 81) } else { square_grid(2, 3.0, 21) });
    let measured = measure_lipschitz(&field, w.delta, w.horizon, &lip_grid.points(), &cfg.integrator)
        .map_err(num("measuring transport Lipschitz constants"))?;
    let certificate = match class_bound(&model, w.horizon) {
        Some(b) if b.at(w.delta).is_ok() => {
            Some(gronwall_certificate(|t| b.at(t), w.delta, w.horizon).map_err(num("Grönwall certificate"))?)
        }
        _ => None,
    };
    let steps: usize = results.iter().map(|r| r.stats.accepted).sum();
    ctx.write_json(
        "transport.json",
        &json!({
            "target": model.target.name,
            "delta": w.delta,
            "T": w.horizon,
            "points": pts.len(),
            "accepted_steps": steps,
            "measured_lipschitz": measured,
            "certificate": certificate,
        }),
    )
}

pub fn converge(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let grid = metric_grid(cfg, target.dim);
    let model = VpScoreModel::new(target).map_err(num("building score model"))?;
    let field = FlowField::new(&model);
    let sweep: &[TimeWindow] = cfg.sweep.as_deref().unwrap_or_default();
    let cols = [
        "delta", "T", "l1", "kl", "w1", "w2", "kl_T", "kl_bound_slack", "pinsker_slack", "holder_slack", "talagrand_slack",
    ];
    let mut table = Table::new(&cols);
    let mut reports = Vec::new();
    for w in sweep {
        let pb = PullbackSpec { field, delta: w.delta, cfg: cfg.integrator };
        let rep = bound_suite(&model, w.horizon, &grid, Some(&pb))
            .map_err(num(&format!("bound suite at delta = {}, T = {}", w.delta, w.horizon)))?;
        let get = |k: &str| rep.get(k).unwrap_or(f64::NAN);
        table.push(vec![
            w.delta.into(),
            w.horizon.into(),
            get("target_l1").into(),
            get("target_kl").into(),
            get("target_w1").into(),
            get("target_w2").into(),
            get("kl_T").into(),
            get("kl_bound_slack").into(),
            get("pinsker_slack").into(),
            get("holder_slack").into(),
            get("talagrand_slack").into(),
        ]);
        reports.push(rep.to_json());
    }
    ctx.write_table("convergence.csv", &table)?;
    ctx.write_json("bounds.json", &Value::Array(reports))
}

fn evaluation_window(cfg: &ExperimentConfig, dsm: &DsmConfig) -> TimeWindow {
    cfg.time.unwrap_or(TimeWindow { delta: 0.01, horizon: dsm.horizon })
}

pub fn train_score(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let (learned, log) = train_score_model(&target, cfg, ctx.seed)?;
    ctx.write_text("score_checkpoint.json", &learned.to_checkpoint().to_json_string())?;
    ctx.write_table("training_log.csv", &log)?;

    let w = evaluation_window(cfg, &dsm_config(cfg, ctx.seed));
    let model = VpScoreModel::new(target).map_err(num("building score model"))?;
    let err = score_error(&learned, &model, w.delta, w.horizon, cfg.evaluation.n_mc, ctx.seed.wrapping_add(7))
        .map_err(num("score error estimate"))?;
    ctx.write_json(
        "report.json",
        &json!({
            "target": model.target.name,
            "delta": w.delta,
            "T": w.horizon,
            "score_error": err.estimate.mean,
            "score_error_se": err.estimate.std_error,
            "n_mc": err.estimate.n,
            "tail_resamples": err.resampled,
            "final_loss_ema": log.numbers("loss_ema").and_then(|v| v.last().copied()),
        }),
    )
}

/// Largest ‖x − φ⁻¹(φ(x))‖ over the points.
fn roundtrip_error(net: &IResNet, pts: &[Vec<f64>]) -> Result<f64, CliError> {
    let zs: Vec<Vec<f64>> = pts.iter().map(|x| net.forward(x)).collect::<vpflow::Result<_>>().map_err(num("iResNet forward"))?;
    let back = net.inverse_many(&zs).map_err(num("iResNet inverse"))?;
    Ok(pts
        .iter()
        .zip(&back)
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max))
}

pub fn train_iresnet(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let dim = target.dim;
    let base = cfg.training.iresnet.clone().unwrap_or_else(|| default_iresnet_config(dim));
    let trained = train_iresnet_model(&target, &base, None, ctx.seed)?;
    let net = &trained.net;
    ctx.write_text("iresnet_checkpoint.json", &net.to_checkpoint().to_json_string())?;
    let mut log = Table::new(&["step", "loss_ema"]);
    for e in &trained.log {
        log.push(vec![e.step.into(), e.loss_ema.into()]);
    }
    ctx.write_table("training_log.csv", &log)?;

    let grid = metric_grid(cfg, dim);
    let pts = grid.points();
    let log_q = net.log_density(&pts).map_err(num("iResNet density"))?;
    let (l1, kl) = target_distances(&target, &log_q, &grid)?;
    let zero_mass: f64 = {
        let masked: Vec<f64> = pts.iter().zip(&log_q).map(|(x, lq)| if target.pdf(x) == 0.0 { lq.exp() } else { 0.0 }).collect();
        grid.integrate(&masked)
    };
    let samples = target.sample(cfg.evaluation.roundtrip_points, ctx.seed.wrapping_add(11));
    let roundtrip = roundtrip_error(net, &samples)?;
    let scan = default_scan_grid(dim).points();
    let (mut fwd, mut inv) = (0.0f64, 0.0f64);
    for x in &scan {
        let j = net.jacobian(x).map_err(num("iResNet Jacobian"))?;
        fwd = fwd.max(j.op_norm());
        inv = inv.max(1.0 / j.min_singular());
    }
    ctx.write_json(
        "report.json",
        &json!({
            "target": target.name,
            "k": net.blocks.len(),
            "L": net.config.lip,
            "l1": l1,
            "kl": kl,
            "mass_where_target_vanishes": zero_mass,
            "roundtrip_max_error": roundtrip,
            "measured_lipschitz": {"forward": fwd, "inverse": inv},
            "certificate": trained.certificate,
            "final_loss_ema": trained.log.last().map(|e| e.loss_ema),
        }),
    )
}

pub fn compare(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let w = cfg.require_time()?;
    let block = cfg.compare.clone().unwrap_or_default();
    let mut table = Table::new(&["target", "model", "L_or_T", "l1", "kl"]);
    for tb in cfg.targets.as_deref().unwrap_or_default() {
        let target = tb.build().map_err(|e| CliError::Config { pointer: "/targets".into(), message: e.to_string() })?;
        let dim = target.dim;
        let grid = metric_grid(cfg, dim);
        let pts = grid.points();
        let name = target.name.clone();
        let model = VpScoreModel::new(target.clone()).map_err(num("building score model"))?;

        let log_q = pullback_logpdf_many(&FlowField::new(&model), w.delta, w.horizon, &pts, &cfg.integrator)
            .map_err(num(&format!("exact-score pullback for {name}")))?;
        let (l1, kl) = target_distances(&target, &log_q, &grid)?;
        table.push(vec![name.as_str().into(), "exact_flow".into(), w.horizon.into(), l1.into(), kl.into()]);

        if block.include_learned {
            let learned = match block.score_checkpoints.get(&name) {
                Some(p) => load_learned(p)?,
                None => {
                    let (l, log) = train_score_model(&target, cfg, ctx.seed)?;
                    ctx.write_table(&format!("training_log_{name}.csv"), &log)?;
                    l
                }
            };
            let log_q = pullback_logpdf_many(&FlowField::new(&learned), w.delta, w.horizon, &pts, &cfg.integrator)
                .map_err(num(&format!("learned-score pullback for {name}")))?;
            let (l1, kl) = target_distances(&target, &log_q, &grid)?;
            table.push(vec![name.as_str().into(), "learned_flow".into(), w.horizon.into(), l1.into(), kl.into()]);
        }

        let base = cfg.training.iresnet.clone().unwrap_or_else(|| default_iresnet_config(dim));
        for &lip in &block.lip_values {
            let trained = train_iresnet_model(&target, &base, Some(lip), ctx.seed)?;
            let log_q = trained.net.log_density(&pts).map_err(num("iResNet density"))?;
            let (l1, kl) = target_distances(&target, &log_q, &grid)?;
            table.push(vec![name.as_str().into(), "iresnet".into(), lip.into(), l1.into(), kl.into()]);
        }
    }
    ctx.write_table("compare.csv", &table)
}

pub fn girsanov_check(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<(), CliError> {
    let target = cfg.require_target()?;
    let w = cfg.require_time()?;
    let learned = match &cfg.checkpoint {
        Some(p) => load_learned(p)?,
        None => {
            let (l, log) = train_score_model(&target, cfg, ctx.seed)?;
            ctx.write_text("score_checkpoint.json", &l.to_checkpoint().to_json_string())?;
            ctx.write_table("training_log.csv", &log)?;
            l
        }
    };
    let settings = GirsanovSettings {
        grid: metric_grid(cfg, target.dim),
        n_mc: cfg.evaluation.n_mc,
        seed: ctx.seed.wrapping_add(7),
        integrator: cfg.integrator,
    };
    let model = VpScoreModel::new(target).map_err(num("building score model"))?;
    let report = girsanov_kl_check(&learned, &model, w.delta, w.horizon, &settings).map_err(num("Girsanov check"))?;
    ctx.write_json("girsanov.json", &report.to_json())
}
