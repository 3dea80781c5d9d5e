//! Glue shared by the CLI and the end-to-end tests: model defaults per
//! dataset, sampling from a trained model and range-normalized metrics.

use crate::bridge::{ancestral_sample_batch, BridgeSchedule, TimeGrid};
use crate::datasets::{GroupDataset, PairedDataset};
use crate::deconv::{aggregate_train, guided_sample_groups, AggregateTrainConfig, GroupLayout, Rounding};
use crate::denoiser::{train, DenoiserConfig, Mlp, TrainConfig, TrainedModel};
use crate::error::Result;
use crate::samplers::RngState;
use crate::scoring::{evaluate, MetricReport};
use ndarray::{Array2, ArrayView2};

/// Architecture used for a dataset with `dim` coordinates in `0..range`.
pub fn model_config(dim: usize, range: i64, cond_dim: usize) -> DenoiserConfig {
    DenoiserConfig { cond_dim, value_scale: range as f64, ..DenoiserConfig::new(dim) }
}

pub fn train_paired(data: &PairedDataset, schedule: &BridgeSchedule, config: &TrainConfig) -> Result<TrainedModel> {
    let mut rng = RngState::new(config.seed);
    let model = model_config(data.meta.dim, data.meta.value_range, 0);
    train(&mut rng, data.x0.view(), data.x1.view(), None, schedule, &model, config)
}

pub fn sample(
    model: &Mlp,
    schedule: &BridgeSchedule,
    x1: ArrayView2<'_, i64>,
    side: Option<ArrayView2<'_, f64>>,
    nfe: usize,
    seed: u64,
    workers: usize,
) -> Result<Array2<i64>> {
    let grid = TimeGrid::uniform(nfe)?;
    ancestral_sample_batch(&RngState::new(seed), schedule, model, x1, &grid, side, workers)
}

/// Metrics on coordinates divided by `range`.
pub fn normalized_metrics(
    samples: ArrayView2<'_, i64>,
    reference: ArrayView2<'_, i64>,
    range: f64,
    w2_points: usize,
    seed: u64,
) -> Result<MetricReport> {
    let a = samples.mapv(|v| v as f64 / range);
    let b = reference.mapv(|v| v as f64 / range);
    evaluate(a.view(), b.view(), w2_points, seed)
}

pub fn layout(data: &GroupDataset) -> GroupLayout<'_> {
    GroupLayout {
        x1_units: data.x1_units.view(),
        aggregates: data.aggregates.view(),
        side_info: Some(data.side_info.view()),
        group_size: data.group_size(),
    }
}

pub fn train_groups(
    data: &GroupDataset,
    schedule: &BridgeSchedule,
    config: &TrainConfig,
    agg: &AggregateTrainConfig,
) -> Result<TrainedModel> {
    let mut rng = RngState::new(config.seed);
    let model = model_config(data.meta.dim, data.meta.value_range, data.meta.cond_dim);
    aggregate_train(&mut rng, layout(data), schedule, &model, config, agg)
}

pub fn deconvolve(
    model: &Mlp,
    schedule: &BridgeSchedule,
    data: &GroupDataset,
    nfe: usize,
    rounding: Rounding,
    seed: u64,
) -> Result<Array2<i64>> {
    let grid = TimeGrid::uniform(nfe)?;
    guided_sample_groups(&RngState::new(seed), schedule, model, layout(data), &grid, rounding)
}
