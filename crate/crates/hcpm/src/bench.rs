//! Wall-clock timing per stage and FLOP reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use hcpm_core::flops::{count_flops, CostReport, Workload};
use hcpm_core::nn::ParamStore;
use hcpm_core::pipeline::{predict_observed, Model, PipelineConfig, Stage};
use hcpm_core::synthetic::{generate_pair, SceneConfig};
use hcpm_core::Tensor;
use serde::Serialize;

use crate::error::{IoError, Result};

pub const MIN_REPEATS: usize = 5;

/// Median and interquartile range of one stage, nanoseconds.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub median_ns: f64,
    pub iqr_ns: f64,
    /// Set when the median is below the clock's resolution.
    pub unresolved: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TimingReport {
    pub repeats: usize,
    pub warmup: usize,
    pub stages: Vec<StageTiming>,
}

impl TimingReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn total_median_ns(&self) -> f64 {
        self.stage("total").map_or(f64::NAN, |s| s.median_ns)
    }
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Encoder => "encoder",
        Stage::SelfPrune => "self_prune",
        Stage::Block(_) => "sc_blocks",
        Stage::Dics(_) => "dics",
        Stage::Matching => "matching",
        Stage::Refinement => "refinement",
        Stage::Done => "done",
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Runs inference `warmup + repeats` times and reports per-stage medians
/// over the last `repeats`.
pub fn time_pipeline(
    model: &Model,
    params: &ParamStore,
    cfg: &PipelineConfig,
    image_a: &Tensor,
    image_b: &Tensor,
    repeats: usize,
    warmup: usize,
) -> Result<TimingReport> {
    if repeats < MIN_REPEATS {
        return Err(IoError::Config(format!("repeats must be at least {MIN_REPEATS}")));
    }
    let mut samples: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for run in 0..warmup + repeats {
        let mut marks: Vec<(Stage, Instant)> = Vec::with_capacity(16);
        let start = Instant::now();
        predict_observed(model, params, cfg, image_a, image_b, &mut |s| marks.push((s, Instant::now())))?;
        let total = start.elapsed().as_nanos() as f64;
        if run < warmup {
            continue;
        }
        let mut per: BTreeMap<&'static str, f64> = BTreeMap::new();
        for w in marks.windows(2) {
            *per.entry(stage_name(w[0].0)).or_default() += (w[1].1 - w[0].1).as_nanos() as f64;
        }
        per.insert("total", total);
        for name in ["encoder", "self_prune", "sc_blocks", "dics", "matching", "refinement", "total"] {
            samples.entry(name).or_default().push(per.get(name).copied().unwrap_or(0.0));
        }
    }
    let stages = samples
        .into_iter()
        .map(|(stage, mut v)| {
            v.sort_by(f64::total_cmp);
            let median_ns = quantile(&v, 0.5);
            StageTiming {
                stage,
                median_ns,
                iqr_ns: quantile(&v, 0.75) - quantile(&v, 0.25),
                unresolved: median_ns == 0.0 && v.iter().any(|&x| x > 0.0),
            }
        })
        .collect();
    Ok(TimingReport { repeats, warmup, stages })
}

/// Fixed seeded input with `tokens` coarse cells (a square image).
pub fn bench_pair(tokens: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || side == 0 {
        return Err(IoError::Config(format!("token count {tokens} is not a perfect square")));
    }
    let s = generate_pair(&SceneConfig {
        height: side * 8,
        width: side * 8,
        seed,
        ..SceneConfig::default()
    })?;
    Ok((s.image_a, s.image_b))
}

/// FLOPs and timing of one configuration on one input.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub tokens: usize,
    pub alpha: f64,
    pub variant: String,
    pub flops: CostReport,
    pub timing: TimingReport,
}

pub fn run(
    label: &str,
    model: &Model,
    params: &ParamStore,
    cfg: &PipelineConfig,
    image_a: &Tensor,
    image_b: &Tensor,
    repeats: usize,
    warmup: usize,
) -> Result<BenchReport> {
    let (h, w) = (image_a.shape[0], image_a.shape[1]);
    let (_, out) = hcpm_core::pipeline::predict(model, params, cfg, image_a, image_b)?;
    let flops = count_flops(cfg, &Workload::from_forward(&out, h, w), params.count());
    let timing = time_pipeline(model, params, cfg, image_a, image_b, repeats, warmup)?;
    Ok(BenchReport {
        label: label.to_string(),
        tokens: (h / 8) * (w / 8),
        alpha: cfg.alpha,
        variant: format!("{:?}", cfg.pruning_variant).to_lowercase(),
        flops,
        timing,
    })
}

pub const SWEEP_HEADER: &str = "label,tokens,alpha,variant,flops_total,flops_sc,median_ns,iqr_ns,sc_median_ns";

pub fn sweep_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in reports {
        let sc = r.timing.stage("sc_blocks").map_or(f64::NAN, |s| s.median_ns);
        let total = r.timing.stage("total");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.0},{:.0},{:.0}",
            r.label,
            r.tokens,
            r.alpha,
            r.variant,
            r.flops.total,
            r.flops.sc_total(),
            total.map_or(f64::NAN, |s| s.median_ns),
            total.map_or(f64::NAN, |s| s.iqr_ns),
            sc
        );
    }
    out
}
