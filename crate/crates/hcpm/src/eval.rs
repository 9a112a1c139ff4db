//! Held-out evaluation, parallel over pairs.

use hcpm_core::nn::ParamStore;
use hcpm_core::pipeline::{evaluate_pair, summarize, EvalSummary, Model, PairMetrics, PipelineConfig};
use hcpm_core::synthetic::{Dataset, SceneConfig};
use rayon::prelude::*;

use crate::error::Result;

/// Pose-free variant of `scene`: B sees exactly what A sees.
pub fn identity_scene(scene: SceneConfig) -> SceneConfig {
    SceneConfig {
        max_rotation_deg: 0.0,
        max_translation: 0.0,
        ..scene
    }
}

/// Scores `n` pairs drawn from `scene` (seeds `scene.seed..`). Output
/// order follows the seeds regardless of scheduling.
pub fn evaluate(model: &Model, params: &ParamStore, cfg: &PipelineConfig, scene: SceneConfig, n: usize) -> Result<(Vec<PairMetrics>, EvalSummary)> {
    let ds = Dataset::new(scene, n)?;
    let metrics = (0..n)
        .into_par_iter()
        .map(|i| -> Result<PairMetrics> { Ok(evaluate_pair(model, params, cfg, &ds.get(i)?)?) })
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&metrics);
    Ok((metrics, summary))
}
