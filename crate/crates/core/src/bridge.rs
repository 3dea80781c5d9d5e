//! The count bridge: schedules, forward corruption and the exact reverse step.
//!
//! Each coordinate evolves as `X_t = X_0 + B_t - D_t` with independent Poisson
//! birth and death counts of cumulative intensity `lambda_± w(t)`. Conditioned
//! on both endpoints, the hidden jump counts are recovered from the
//! displacement `d` and a Bessel-distributed slack `M`:
//! `N = |d| + 2M`, `B = (N + d) / 2`, `D = N - B`. Moving to an earlier time
//! thins `N` binomially and splits the survivors hypergeometrically.

use crate::error::{param, Error, Result};
use crate::samplers::{
    bessel_sample, binomial_sample, hypergeometric_sample, BesselParams, RngState,
};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Shape of the jump-intensity function `w` on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleShape {
    #[default]
    Linear,
    Power { exponent: f64 },
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    #[serde(default)]
    pub shape: ScheduleShape,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        Self::symmetric(32.0)
    }
}

impl BridgeSchedule {
    pub fn new(lambda_plus: f64, lambda_minus: f64, shape: ScheduleShape) -> Result<Self> {
        for (name, v) in [("lambda_plus", lambda_plus), ("lambda_minus", lambda_minus)] {
            if !v.is_finite() || v < 0.0 {
                return Err(param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let ScheduleShape::Power { exponent } = shape {
            if !exponent.is_finite() || exponent <= 0.0 {
                return Err(param(format!("power schedule exponent must be > 0, got {exponent}")));
            }
        }
        Ok(Self { lambda_plus, lambda_minus, shape })
    }

    /// Equal birth and death rates, linear `w`.
    pub fn symmetric(lambda: f64) -> Self {
        Self { lambda_plus: lambda, lambda_minus: lambda, shape: ScheduleShape::Linear }
    }

    pub fn with_shape(mut self, shape: ScheduleShape) -> Self {
        self.shape = shape;
        self
    }

    /// Jump intensity `sqrt(lambda_plus * lambda_minus)`.
    pub fn kappa(&self) -> f64 {
        (self.lambda_plus * self.lambda_minus).sqrt()
    }

    pub fn weight(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(param(format!("time must lie in [0,1], got {t}")));
        }
        Ok(match self.shape {
            ScheduleShape::Linear => t,
            ScheduleShape::Power { exponent } => t.powf(exponent),
            ScheduleShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * t).cos()),
        }
        .clamp(0.0, 1.0))
    }

    /// Cumulative intensities `(Lambda_+(t), Lambda_-(t))`.
    pub fn intensities(&self, t: f64) -> Result<(f64, f64)> {
        let w = self.weight(t)?;
        Ok((self.lambda_plus * w, self.lambda_minus * w))
    }

    /// Slack law parameters for displacement `d` observed at time `t`.
    pub fn slack_params(&self, d: i64, t: f64) -> Result<BesselParams> {
        let (lp, lm) = self.intensities(t)?;
        BesselParams::new(d.unsigned_abs(), lp * lm)
    }
}

/// The `(d, M, N, B, D)` change of variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JumpDecomposition {
    pub displacement: i64,
    pub slack: u64,
    pub total: u64,
    pub births: u64,
    pub deaths: u64,
}

impl JumpDecomposition {
    pub fn from_slack(displacement: i64, slack: u64) -> Self {
        let total = displacement.unsigned_abs() + 2 * slack;
        let births = ((total as i64 + displacement) / 2) as u64;
        Self { displacement, slack, total, births, deaths: total - births }
    }

    pub fn is_consistent(&self) -> bool {
        let d = self.displacement;
        self.total == d.unsigned_abs() + 2 * self.slack
            && (self.total as i64 + d) % 2 == 0
            && self.births as i64 == (self.total as i64 + d) / 2
            && self.births + self.deaths == self.total
            && self.births as i64 - self.deaths as i64 == d
    }
}

/// Sample the hidden jump counts behind displacement `d` at time `t`.
pub fn decompose_endpoints(
    rng: &mut RngState,
    schedule: &BridgeSchedule,
    d: i64,
    t: f64,
) -> Result<JumpDecomposition> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(param(format!("decomposition time must lie in (0,1], got {t}")));
    }
    let params = schedule.slack_params(d, t)?;
    let slack = bessel_sample(rng, params);
    Ok(JumpDecomposition::from_slack(d, slack))
}

/// Remove jumps from `jumps` (observed at time t) keeping each with
/// probability `keep`; returns the state at the earlier time.
fn thin(rng: &mut RngState, x_t: i64, jumps: &JumpDecomposition, keep: f64) -> Result<i64> {
    let total_s = binomial_sample(rng, jumps.total, keep)?;
    let births_s = hypergeometric_sample(rng, jumps.total, jumps.births, total_s)?;
    Ok(x_t - 2 * (jumps.births as i64 - births_s as i64) + (jumps.total as i64 - total_s as i64))
}

/// A state vector together with its time.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyPoint {
    pub x_t: Vec<i64>,
    pub t: f64,
}

fn corrupt_coord(
    rng: &mut RngState,
    slack_lambda: f64,
    w_t: f64,
    x0: i64,
    x1: i64,
) -> Result<i64> {
    let d = x1 - x0;
    let slack = bessel_sample(rng, BesselParams::new(d.unsigned_abs(), slack_lambda)?);
    let jumps = JumpDecomposition::from_slack(d, slack);
    thin(rng, x1, &jumps, w_t)
}

/// Draw `X_t` from the bridge pinned at `x0` (time 0) and `x1` (time 1).
pub fn corrupt(
    rng: &mut RngState,
    schedule: &BridgeSchedule,
    x0: &[i64],
    x1: &[i64],
    t: f64,
) -> Result<NoisyPoint> {
    if x0.len() != x1.len() {
        return Err(Error::Dimension(format!("x0 has {} coordinates, x1 has {}", x0.len(), x1.len())));
    }
    let w_t = schedule.weight(t)?;
    let (lp, lm) = schedule.intensities(1.0)?;
    let x_t = x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| corrupt_coord(rng, lp * lm, w_t, a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(NoisyPoint { x_t, t })
}

/// Precomputed per-step constants of a reverse move `t -> s`.
#[derive(Clone, Copy, Debug)]
struct StepConstants {
    slack_lambda: f64,
    keep: f64,
}

impl StepConstants {
    fn new(schedule: &BridgeSchedule, t: f64, s: f64) -> Result<Self> {
        if !(s >= 0.0 && s < t && t <= 1.0) {
            return Err(param(format!("reverse step needs 0 <= s < t <= 1, got s={s}, t={t}")));
        }
        let (w_t, w_s) = (schedule.weight(t)?, schedule.weight(s)?);
        if w_t <= 0.0 {
            return Err(param(format!("schedule weight vanishes at t={t}")));
        }
        let (lp, lm) = schedule.intensities(t)?;
        Ok(Self { slack_lambda: lp * lm, keep: (w_s / w_t).min(1.0) })
    }

    fn apply(&self, rng: &mut RngState, x_t: i64, x0_hat: i64) -> Result<i64> {
        let d = x_t - x0_hat;
        let slack = bessel_sample(rng, BesselParams::new(d.unsigned_abs(), self.slack_lambda)?);
        let jumps = JumpDecomposition::from_slack(d, slack);
        thin(rng, x_t, &jumps, self.keep)
    }
}

/// One exact reverse move from time `t` to `s < t` towards the predicted
/// endpoint `x0_hat`.
pub fn bridge_step(
    rng: &mut RngState,
    schedule: &BridgeSchedule,
    x_t: &[i64],
    x0_hat: &[i64],
    t: f64,
    s: f64,
) -> Result<Vec<i64>> {
    if x_t.len() != x0_hat.len() {
        return Err(Error::Dimension(format!(
            "x_t has {} coordinates, prediction has {}",
            x_t.len(),
            x0_hat.len()
        )));
    }
    let step = StepConstants::new(schedule, t, s)?;
    x_t.iter().zip(x0_hat).map(|(&a, &b)| step.apply(rng, a, b)).collect()
}

/// Spacing of the reverse-time grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridSpacing {
    #[default]
    Uniform,
    /// `t_k = (g^k - 1) / (g^K - 1)`; `g > 1` packs steps near 0.
    Geometric { growth: f64 },
}

/// Strictly decreasing time grid from 1 to 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(param("time grid needs at least the two endpoints 1 and 0"));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(param("time grid must start at 1 and end at 0"));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(param("time grid must be strictly decreasing"));
        }
        Ok(Self(times))
    }

    /// `steps` reverse moves (= denoiser evaluations).
    pub fn with_spacing(steps: usize, spacing: GridSpacing) -> Result<Self> {
        if steps == 0 {
            return Err(param("time grid needs at least one step"));
        }
        let k = steps as f64;
        let times = (0..=steps)
            .rev()
            .map(|i| match spacing {
                GridSpacing::Uniform => i as f64 / k,
                GridSpacing::Geometric { growth } => (growth.powf(i as f64) - 1.0) / (growth.powf(k) - 1.0),
            })
            .collect::<Vec<_>>();
        if let GridSpacing::Geometric { growth } = spacing {
            if !(growth > 1.0) || !growth.is_finite() {
                return Err(param(format!("geometric growth must be > 1, got {growth}")));
            }
        }
        let mut times = times;
        times[0] = 1.0;
        times[steps] = 0.0;
        Self::new(times)
    }

    pub fn uniform(steps: usize) -> Result<Self> {
        Self::with_spacing(steps, GridSpacing::Uniform)
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn steps(&self) -> usize {
        self.0.len() - 1
    }

    /// Consecutive `(t, s)` pairs, `s < t`.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Anything that draws endpoint predictions `x̂0 ~ q(· | x_t, t, z)`.
///
/// Row `i` of the batch must draw its randomness from `rngs[i]` only, so that
/// results do not depend on how rows are grouped into batches.
pub trait Denoise: Sync {
    fn dim(&self) -> usize;

    fn predict(
        &self,
        rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        t: f64,
        side_info: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<i64>>;

    /// Real-valued predictions, used where an endpoint is projected before
    /// rounding. Defaults to the integer predictions.
    fn predict_real(
        &self,
        rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        t: f64,
        side_info: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        Ok(self.predict(rngs, x_t, t, side_info)?.mapv(|v| v as f64))
    }
}

/// Denoiser returning fixed rows regardless of its input. With the true
/// endpoints this is the oracle denoiser.
#[derive(Clone, Debug)]
pub struct FixedEndpoint {
    rows: Array2<i64>,
}

impl FixedEndpoint {
    /// Same prediction for every row.
    pub fn constant(value: Vec<i64>) -> Self {
        let d = value.len();
        Self { rows: Array2::from_shape_vec((1, d), value).expect("row shape") }
    }

    /// Row `i` of the batch always receives `rows[i]`.
    pub fn per_row(rows: Array2<i64>) -> Self {
        Self { rows }
    }
}

impl Denoise for FixedEndpoint {
    fn dim(&self) -> usize {
        self.rows.ncols()
    }

    fn predict(
        &self,
        _rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        _t: f64,
        _side_info: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<i64>> {
        if x_t.ncols() != self.dim() {
            return Err(Error::Dimension(format!("expected {} columns, got {}", self.dim(), x_t.ncols())));
        }
        if self.rows.nrows() == 1 {
            let row = self.rows.row(0);
            return Ok(Array2::from_shape_fn(x_t.raw_dim(), |(_, j)| row[j]));
        }
        if self.rows.nrows() != x_t.nrows() {
            return Err(Error::Dimension(format!(
                "fixed endpoints hold {} rows, batch has {}",
                self.rows.nrows(),
                x_t.nrows()
            )));
        }
        Ok(self.rows.clone())
    }
}

/// Apply one reverse move to every row of a batch.
pub(crate) fn bridge_step_rows(
    rngs: &mut [RngState],
    schedule: &BridgeSchedule,
    x_t: &mut Array2<i64>,
    x0_hat: ArrayView2<'_, i64>,
    t: f64,
    s: f64,
) -> Result<()> {
    let step = StepConstants::new(schedule, t, s)?;
    for ((mut row, pred), rng) in x_t.axis_iter_mut(Axis(0)).zip(x0_hat.axis_iter(Axis(0))).zip(rngs) {
        for (x, &p) in row.iter_mut().zip(pred.iter()) {
            *x = step.apply(rng, *x, p)?;
        }
    }
    Ok(())
}

/// Ancestral sampling of one batch; row `i` uses `rngs[i]`.
fn ancestral_rows<D: Denoise + ?Sized>(
    rngs: &mut [RngState],
    schedule: &BridgeSchedule,
    denoiser: &D,
    x1: ArrayView2<'_, i64>,
    grid: &TimeGrid,
    side_info: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<i64>> {
    let mut x = x1.to_owned();
    for (t, s) in grid.pairs() {
        let pred = denoiser.predict(rngs, x.view(), t, side_info)?;
        bridge_step_rows(rngs, schedule, &mut x, pred.view(), t, s)?;
    }
    Ok(x)
}

/// Run the reverse chain from `x1` at time 1 down to time 0.
pub fn ancestral_sample<D: Denoise + ?Sized>(
    rng: &mut RngState,
    schedule: &BridgeSchedule,
    denoiser: &D,
    x1: &[i64],
    grid: &TimeGrid,
    side_info: Option<&[f64]>,
) -> Result<Vec<i64>> {
    let x1 = ArrayView2::from_shape((1, x1.len()), x1).map_err(|e| Error::Dimension(e.to_string()))?;
    let side = match side_info {
        Some(z) => Some(ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::Dimension(e.to_string()))?),
        None => None,
    };
    let out = ancestral_rows(std::slice::from_mut(rng), schedule, denoiser, x1, grid, side)?;
    Ok(out.row(0).to_vec())
}

const SAMPLE_BLOCK: usize = 4096;

/// Split `0..n` into at most `workers` contiguous chunks.
pub(crate) fn chunk_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let workers = workers.clamp(1, n.max(1));
    let size = n.div_ceil(workers);
    (0..workers).map(|w| (w * size).min(n)..((w + 1) * size).min(n)).filter(|r| !r.is_empty()).collect()
}

/// Ancestral sampling for many rows. Row `i` uses `rng.substream(i)`, so the
/// output is identical for every `workers` value.
pub fn ancestral_sample_batch<D: Denoise + ?Sized>(
    rng: &RngState,
    schedule: &BridgeSchedule,
    denoiser: &D,
    x1: ArrayView2<'_, i64>,
    grid: &TimeGrid,
    side_info: Option<ArrayView2<'_, f64>>,
    workers: usize,
) -> Result<Array2<i64>> {
    if x1.ncols() != denoiser.dim() {
        return Err(Error::Dimension(format!("denoiser dim {} vs x1 dim {}", denoiser.dim(), x1.ncols())));
    }
    if let Some(z) = side_info {
        if z.nrows() != x1.nrows() {
            return Err(Error::Dimension("side information must have one row per sample".into()));
        }
    }
    let n = x1.nrows();
    let ranges = chunk_ranges(n, workers);
    let run_block = |r: std::ops::Range<usize>| -> Result<Array2<i64>> {
        let mut rngs: Vec<RngState> = r.clone().map(|i| rng.substream(i as u64)).collect();
        let x = x1.slice(ndarray::s![r.clone(), ..]);
        let z = side_info.map(|z| z.slice_move(ndarray::s![r.clone(), ..]));
        ancestral_rows(&mut rngs, schedule, denoiser, x, grid, z)
    };
    // bounded blocks keep the denoiser's activations small
    let run = |r: std::ops::Range<usize>| -> Result<Array2<i64>> {
        let blocks = (r.start..r.end)
            .step_by(SAMPLE_BLOCK)
            .map(|b| run_block(b..(b + SAMPLE_BLOCK).min(r.end)))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
    };
    let parts: Vec<Result<Array2<i64>>> = if ranges.len() <= 1 {
        ranges.into_iter().map(run).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = ranges.into_iter().map(|r| scope.spawn(move || run(r))).collect();
            handles.into_iter().map(|h| h.join().expect("sampling worker panicked")).collect()
        })
    };
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(Array2::zeros((0, x1.ncols())));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))
}

/// Flattened per-coordinate corruption of a batch of pairs at per-row times.
pub(crate) fn corrupt_rows(
    rng: &mut RngState,
    schedule: &BridgeSchedule,
    x0: ArrayView2<'_, i64>,
    x1: ArrayView2<'_, i64>,
    times: ArrayView1<'_, f64>,
) -> Result<Array2<i64>> {
    let (lp, lm) = schedule.intensities(1.0)?;
    let mut out = Array2::zeros(x0.raw_dim());
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let w_t = schedule.weight(times[i])?;
        for j in 0..row.len() {
            row[j] = corrupt_coord(rng, lp * lm, w_t, x0[[i, j]], x1[[i, j]])?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_weights() {
        let lin = BridgeSchedule::symmetric(1.0);
        assert_eq!(lin.weight(0.5).unwrap(), 0.5);
        let pow = lin.with_shape(ScheduleShape::Power { exponent: 2.0 });
        assert_eq!(pow.weight(0.5).unwrap(), 0.25);
        for shape in [ScheduleShape::Linear, ScheduleShape::Power { exponent: 0.7 }, ScheduleShape::Cosine] {
            let s = lin.with_shape(shape);
            assert_eq!(s.weight(0.0).unwrap(), 0.0);
            assert_eq!(s.weight(1.0).unwrap(), 1.0);
            let mut prev = 0.0;
            for i in 0..=100 {
                let w = s.weight(i as f64 / 100.0).unwrap();
                assert!(w >= prev && (0.0..=1.0).contains(&w));
                prev = w;
            }
        }
        assert!(lin.weight(1.5).is_err());
        assert!(lin.weight(-0.1).is_err());
        assert!(BridgeSchedule::new(-1.0, 1.0, ScheduleShape::Linear).is_err());
        assert_eq!(BridgeSchedule::new(4.0, 16.0, ScheduleShape::Linear).unwrap().kappa(), 8.0);
    }

    #[test]
    fn zero_intensity_decomposition() {
        let mut rng = RngState::new(0);
        let sched = BridgeSchedule::symmetric(0.0);
        let j = decompose_endpoints(&mut rng, &sched, 4, 1.0).unwrap();
        assert_eq!(j, JumpDecomposition { displacement: 4, slack: 0, total: 4, births: 4, deaths: 0 });
        let j = decompose_endpoints(&mut rng, &sched, -3, 1.0).unwrap();
        assert_eq!(j, JumpDecomposition { displacement: -3, slack: 0, total: 3, births: 0, deaths: 3 });
        assert!(decompose_endpoints(&mut rng, &sched, 1, 0.0).is_err());
    }

    #[test]
    fn decompositions_are_consistent() {
        let mut rng = RngState::new(5);
        let sched = BridgeSchedule::symmetric(32.0);
        for d in -20..=20 {
            for t in [0.1, 0.5, 1.0] {
                let j = decompose_endpoints(&mut rng, &sched, d, t).unwrap();
                assert!(j.is_consistent(), "{j:?}");
            }
        }
    }

    #[test]
    fn corrupt_pins_endpoints() {
        let mut rng = RngState::new(9);
        let sched = BridgeSchedule::symmetric(32.0);
        let x0 = [0, 5, 17, 3];
        let x1 = [9, 2, 17, 40];
        for _ in 0..200 {
            assert_eq!(corrupt(&mut rng, &sched, &x0, &x1, 1.0).unwrap().x_t, x1);
            assert_eq!(corrupt(&mut rng, &sched, &x0, &x1, 0.0).unwrap().x_t, x0);
        }
        assert!(corrupt(&mut rng, &sched, &x0, &x1[..2], 0.5).is_err());
    }

    #[test]
    fn bridge_step_edges() {
        let mut rng = RngState::new(10);
        let sched = BridgeSchedule::symmetric(0.0);
        // d = 0 with no slack: nothing to remove
        assert_eq!(bridge_step(&mut rng, &sched, &[7], &[7], 0.8, 0.3).unwrap(), vec![7]);
        let sched = BridgeSchedule::symmetric(32.0);
        for _ in 0..100 {
            assert_eq!(bridge_step(&mut rng, &sched, &[7, 1], &[3, 12], 0.6, 0.0).unwrap(), vec![3, 12]);
        }
        assert!(bridge_step(&mut rng, &sched, &[1], &[1], 0.5, 0.5).is_err());
        assert!(bridge_step(&mut rng, &sched, &[1], &[1], 0.5, 0.7).is_err());
    }

    #[test]
    fn zero_intensity_paths_are_monotone() {
        let sched = BridgeSchedule::symmetric(0.0);
        let mut rng = RngState::new(12);
        let grid = TimeGrid::uniform(16).unwrap();
        for (x1, target) in [(20i64, 3i64), (2, 15), (8, 8)] {
            let mut x = vec![x1];
            let mut prev = x1;
            for (t, s) in grid.pairs() {
                x = bridge_step(&mut rng, &sched, &x, &[target], t, s).unwrap();
                let step = x[0] - prev;
                assert!(step * (target - x1).signum() >= 0, "non-monotone move {prev} -> {}", x[0]);
                prev = x[0];
            }
            assert_eq!(x[0], target);
        }
    }

    #[test]
    fn grids() {
        let g = TimeGrid::uniform(4).unwrap();
        assert_eq!(g.times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(g.steps(), 4);
        let g = TimeGrid::with_spacing(5, GridSpacing::Geometric { growth: 2.0 }).unwrap();
        assert_eq!(g.times()[0], 1.0);
        assert_eq!(*g.times().last().unwrap(), 0.0);
        assert!(TimeGrid::uniform(0).is_err());
        assert!(TimeGrid::new(vec![]).is_err());
        assert!(TimeGrid::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimeGrid::new(vec![0.9, 0.0]).is_err());
    }

    #[test]
    fn ancestral_with_constant_and_oracle_denoisers() {
        let sched = BridgeSchedule::symmetric(32.0);
        let mut rng = RngState::new(1);
        let c = FixedEndpoint::constant(vec![4, 9]);
        let one = TimeGrid::uniform(1).unwrap();
        assert_eq!(ancestral_sample(&mut rng, &sched, &c, &[30, 0], &one, None).unwrap(), vec![4, 9]);
        let grid = TimeGrid::uniform(8).unwrap();
        assert_eq!(ancestral_sample(&mut rng, &sched, &c, &[30, 0], &grid, None).unwrap(), vec![4, 9]);
    }

    /// Halves the state and adds a coin flip drawn from the row's own stream.
    struct Jitter;

    impl Denoise for Jitter {
        fn dim(&self) -> usize {
            3
        }

        fn predict(
            &self,
            rngs: &mut [RngState],
            x_t: ArrayView2<'_, i64>,
            _t: f64,
            _side_info: Option<ArrayView2<'_, f64>>,
        ) -> Result<Array2<i64>> {
            use rand::Rng;
            let mut out = x_t.to_owned();
            for (mut row, rng) in out.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
                row.mapv_inplace(|v| v / 2 + rng.random_range(0..2));
            }
            Ok(out)
        }
    }

    #[test]
    fn batch_sampling_independent_of_workers() {
        let sched = BridgeSchedule::symmetric(8.0);
        let rng = RngState::new(77);
        let x1 = Array2::from_shape_fn((13, 3), |(i, j)| (i * 3 + j) as i64);
        let oracle = Jitter;
        let grid = TimeGrid::uniform(8).unwrap();
        let a = ancestral_sample_batch(&rng, &sched, &oracle, x1.view(), &grid, None, 1).unwrap();
        let b = ancestral_sample_batch(&rng, &sched, &oracle, x1.view(), &grid, None, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(chunk_ranges(10, 3), vec![0..4, 4..8, 8..10]);
    }
}
