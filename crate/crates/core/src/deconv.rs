//! Deconvolution from aggregates: projection onto sum constraints, exact
//! integer rounding, projection-guided sampling and EM-style training.

use crate::bridge::{bridge_step_rows, corrupt_rows, BridgeSchedule, Denoise, TimeGrid};
use crate::denoiser::{draw_noise, loss_and_grads, DenoiserConfig, LossBatch, Mlp, Optimizer, TrainConfig, TrainedModel};
use crate::error::{param, Error, Result};
use crate::samplers::RngState;
use ndarray::{s, Array, Array1, Array2, ArrayView, ArrayView2, Axis, Dimension};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Column sums within this distance of an integer are snapped to it.
const SNAP: f64 = 1e-6;

/// `G` units of one group together with their observed aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    pub units: Array2<i64>,
    pub aggregate: Vec<i64>,
    pub side_info: Option<Array2<f64>>,
}

impl GroupBatch {
    pub fn group_size(&self) -> usize {
        self.units.nrows()
    }
}

/// How real-valued projected units become integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    /// Floors plus a weighted without-replacement top-up; sums are exact.
    #[default]
    Exact,
    /// Independent unbiased rounding; sums hold only in expectation.
    Randomized,
    /// Round to nearest.
    Round,
}

impl std::str::FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "randomized" => Ok(Self::Randomized),
            "round" => Ok(Self::Round),
            other => Err(param(format!("unknown rounding '{other}' (exact, randomized, round)"))),
        }
    }
}

/// Rescale each column of `units` to sum to `targets`; all-zero columns are
/// split evenly.
pub fn rescale_to_aggregate(units: ArrayView2<'_, f64>, targets: &[f64]) -> Result<Array2<f64>> {
    if units.ncols() != targets.len() {
        return Err(Error::Dimension(format!("{} columns, {} targets", units.ncols(), targets.len())));
    }
    if units.nrows() == 0 {
        return Err(param("a group needs at least one unit"));
    }
    if units.iter().chain(targets).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(param("rescaling needs finite nonnegative units and targets"));
    }
    let g = units.nrows() as f64;
    let mut out = units.to_owned();
    for (mut col, &target) in out.axis_iter_mut(Axis(1)).zip(targets) {
        let sum = col.sum();
        if sum > 0.0 {
            col.mapv_inplace(|v| v * target / sum);
        } else {
            col.fill(target / g);
        }
    }
    Ok(out)
}

/// Round each entry up with probability equal to its fractional part.
pub fn randomized_round<D: Dimension>(rng: &mut RngState, x: ArrayView<'_, f64, D>) -> Result<Array<i64, D>> {
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(param("randomized rounding needs finite nonnegative values"));
    }
    Ok(x.mapv(|v| {
        let floor = v.floor();
        let up = rng.random::<f64>() < v - floor;
        floor as i64 + up as i64
    }))
}

/// Choose `k` of the indices without replacement with probabilities
/// proportional to `weights`, via exponential keys `-ln(U) / w` (smallest win).
/// Zero weights are only used once the positive ones run out, uniformly.
fn weighted_subset(rng: &mut RngState, weights: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| (-(1.0 - rng.random::<f64>()).ln() / w, i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chosen: Vec<usize> = keyed.iter().take(k).map(|p| p.1).collect();
    if chosen.len() < k {
        let mut zeros: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] <= 0.0).collect();
        zeros.shuffle(rng);
        chosen.extend(zeros.into_iter().take(k - chosen.len()));
    }
    chosen
}

/// Round each column to integers with exactly the (integral) column sum,
/// moving every entry by less than 1.
pub fn groupwise_exact_round(rng: &mut RngState, units: ArrayView2<'_, f64>) -> Result<Array2<i64>> {
    if units.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(param("exact rounding needs finite nonnegative values"));
    }
    let g = units.nrows();
    let mut out = units.mapv(|v| v.floor() as i64);
    for (j, col) in units.axis_iter(Axis(1)).enumerate() {
        let sum = col.sum();
        let target = sum.round();
        if (sum - target).abs() > SNAP * sum.abs().max(1.0) {
            return Err(param(format!("column {j} sums to {sum}, which is not an integer")));
        }
        let floors: i64 = out.column(j).sum();
        let shortfall = target as i64 - floors;
        if shortfall < 0 || shortfall as usize > g {
            return Err(Error::Consistency(format!("column {j}: shortfall {shortfall} outside [0, {g}]")));
        }
        if shortfall == 0 {
            continue;
        }
        let fracs: Vec<f64> = col.iter().map(|v| v - v.floor()).collect();
        for i in weighted_subset(rng, &fracs, shortfall as usize) {
            out[[i, j]] += 1;
        }
    }
    Ok(out)
}

/// Project real-valued unit predictions onto `sum(units) = targets`.
/// Negative predictions are treated as 0.
pub fn project_with(
    rng: &mut RngState,
    predicted: ArrayView2<'_, f64>,
    targets: &[i64],
    rounding: Rounding,
) -> Result<Array2<i64>> {
    if targets.iter().any(|&t| t < 0) {
        return Err(param("aggregate targets must be nonnegative"));
    }
    let clamped = predicted.mapv(|v| if v.is_nan() { v } else { v.max(0.0) });
    let tf: Vec<f64> = targets.iter().map(|&t| t as f64).collect();
    let scaled = rescale_to_aggregate(clamped.view(), &tf)?;
    match rounding {
        Rounding::Exact => groupwise_exact_round(rng, scaled.view()),
        Rounding::Randomized => randomized_round(rng, scaled.view()),
        Rounding::Round => Ok(scaled.mapv(|v| v.round() as i64)),
    }
}

/// [`project_with`] using exact rounding.
pub fn project(rng: &mut RngState, predicted: ArrayView2<'_, f64>, targets: &[i64]) -> Result<Array2<i64>> {
    project_with(rng, predicted, targets, Rounding::Exact)
}

/// Groups of `group_size` consecutive rows with one aggregate row each.
#[derive(Clone, Copy, Debug)]
pub struct GroupLayout<'a> {
    pub x1_units: ArrayView2<'a, i64>,
    pub aggregates: ArrayView2<'a, i64>,
    pub side_info: Option<ArrayView2<'a, f64>>,
    pub group_size: usize,
}

impl GroupLayout<'_> {
    fn validate(&self, dim: usize) -> Result<()> {
        let (rows, g) = (self.x1_units.nrows(), self.group_size);
        if g == 0 || rows != g * self.aggregates.nrows() {
            return Err(Error::Dimension(format!(
                "{rows} unit rows do not form {} groups of {g}",
                self.aggregates.nrows()
            )));
        }
        if self.x1_units.ncols() != dim || self.aggregates.ncols() != dim {
            return Err(Error::Dimension(format!("units and aggregates must have {dim} columns")));
        }
        if let Some(z) = self.side_info {
            if z.nrows() != rows {
                return Err(Error::Dimension("side information needs one row per unit".into()));
            }
        }
        if self.aggregates.iter().any(|&a| a < 0) {
            return Err(param("aggregates must be nonnegative"));
        }
        Ok(())
    }
}

/// Projection-guided reverse sampling for many groups at once.
///
/// Unit row `i` draws from `rng.substream(2 * i)` and the projection of group
/// `g` from `rng.substream(2 * g + 1)`, so outputs do not depend on batching.
pub fn guided_sample_groups<D: Denoise + ?Sized>(
    rng: &RngState,
    schedule: &BridgeSchedule,
    denoiser: &D,
    layout: GroupLayout<'_>,
    grid: &TimeGrid,
    rounding: Rounding,
) -> Result<Array2<i64>> {
    layout.validate(denoiser.dim())?;
    let g = layout.group_size;
    let mut unit_rngs: Vec<RngState> = (0..layout.x1_units.nrows()).map(|i| rng.substream(2 * i as u64)).collect();
    let mut group_rngs: Vec<RngState> =
        (0..layout.aggregates.nrows()).map(|k| rng.substream(2 * k as u64 + 1)).collect();
    let project_all = |rngs: &mut [RngState], pred: ArrayView2<'_, f64>| -> Result<Array2<i64>> {
        let mut out = Array2::zeros(pred.raw_dim());
        for (k, grng) in rngs.iter_mut().enumerate() {
            let rows = s![k * g..(k + 1) * g, ..];
            let target = layout.aggregates.row(k).to_vec();
            out.slice_mut(rows).assign(&project_with(grng, pred.slice(rows), &target, rounding)?);
        }
        Ok(out)
    };
    let mut x = layout.x1_units.to_owned();
    for (t, s_time) in grid.pairs() {
        let pred = denoiser.predict_real(&mut unit_rngs, x.view(), t, layout.side_info)?;
        let projected = project_all(&mut group_rngs, pred.view())?;
        bridge_step_rows(&mut unit_rngs, schedule, &mut x, projected.view(), t, s_time)?;
    }
    // the last step lands on its projected prediction; project once more so
    // non-exact rounding modes also end on a rounding of the constraint set
    project_all(&mut group_rngs, x.mapv(|v| v as f64).view())
}

/// Guided sampling for a single group.
pub fn guided_sample<D: Denoise + ?Sized>(
    rng: &RngState,
    schedule: &BridgeSchedule,
    denoiser: &D,
    x1_units: ArrayView2<'_, i64>,
    aggregate: &[i64],
    side_info: Option<ArrayView2<'_, f64>>,
    grid: &TimeGrid,
    rounding: Rounding,
) -> Result<Array2<i64>> {
    let agg = Array2::from_shape_vec((1, aggregate.len()), aggregate.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let layout = GroupLayout { x1_units, aggregates: agg.view(), side_info, group_size: x1_units.nrows() };
    guided_sample_groups(rng, schedule, denoiser, layout, grid, rounding)
}

/// Settings for the E-step of aggregate training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateTrainConfig {
    /// Reverse steps used to draw latent units.
    pub estep_nfe: usize,
    pub rounding: Rounding,
    /// Draw latents with the EMA parameters instead of the current ones.
    pub estep_uses_ema: bool,
}

impl Default for AggregateTrainConfig {
    fn default() -> Self {
        Self { estep_nfe: 8, rounding: Rounding::Exact, estep_uses_ema: false }
    }
}

/// EM-style training from aggregates.
///
/// Each minibatch holds `max(1, batch_size / G)` groups. The E-step draws
/// latent units by guided sampling with the current model; the M-step
/// corrupts `(latent, x1)` at one `t ~ U[0,1]` per group and descends the
/// negated energy score of the summed outputs against the aggregate.
pub fn aggregate_train(
    rng: &mut RngState,
    layout: GroupLayout<'_>,
    schedule: &BridgeSchedule,
    model_config: &DenoiserConfig,
    config: &TrainConfig,
    agg_config: &AggregateTrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    layout.validate(model_config.input_dim)?;
    let g = layout.group_size;
    let n_groups = layout.aggregates.nrows();
    if n_groups == 0 {
        return Err(param("aggregate training needs at least one group"));
    }
    let grid = TimeGrid::uniform(agg_config.estep_nfe)?;
    let model = Mlp::new(model_config.clone(), rng)?;
    let per_batch = (config.batch_size / g).max(1);
    let per_epoch = n_groups.div_ceil(per_batch) as u64;
    let mut opt = Optimizer::new(model, config, per_epoch * config.epochs as u64);
    let score = config.score();
    let mut order: Vec<usize> = (0..n_groups).collect();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(per_batch) {
            let rows: Vec<usize> = chunk.iter().flat_map(|&k| k * g..(k + 1) * g).collect();
            let x1 = layout.x1_units.select(Axis(0), &rows);
            let aggs = layout.aggregates.select(Axis(0), chunk);
            let side = layout.side_info.map(|z| z.select(Axis(0), &rows));
            let sub = GroupLayout {
                x1_units: x1.view(),
                aggregates: aggs.view(),
                side_info: side.as_ref().map(|z| z.view()),
                group_size: g,
            };
            let estep_rng = RngState::with_stream(rng.random(), rng.random());
            let latent = if agg_config.estep_uses_ema {
                let ema = Mlp::from_params(model_config.clone(), opt.ema.shadow.clone())?;
                guided_sample_groups(&estep_rng, schedule, &ema, sub, &grid, agg_config.rounding)?
            } else {
                guided_sample_groups(&estep_rng, schedule, &opt.model, sub, &grid, agg_config.rounding)?
            };
            let group_t: Vec<f64> = chunk.iter().map(|_| rng.random::<f64>()).collect();
            let times = Array1::from_shape_fn(rows.len(), |i| group_t[i / g]);
            let x_t = corrupt_rows(rng, schedule, latent.view(), x1.view(), times.view())?;
            let targets = aggs.mapv(|v| v as f64);
            let batch = LossBatch {
                x_t: x_t.view(),
                t: times.view(),
                side: side.as_ref().map(|z| z.view()),
                targets: targets.view(),
                group_size: g,
            };
            let noise = draw_noise(rng, rows.len(), score.m, model_config.noise_dim);
            let (loss, grads) = loss_and_grads(&opt.model, &batch, noise.view(), &score)
                .map_err(|e| Error::Divergence(format!("step {}: {e}", opt.step)))?;
            opt.apply(loss, grads)?;
        }
    }
    opt.finish()
}
