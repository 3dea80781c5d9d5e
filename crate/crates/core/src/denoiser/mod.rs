//! Distributional denoiser: an MLP fed with `(x_t, t, noise, side info)`
//! whose outputs are samples of `X_0`, trained on the negated energy score.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_SCHEMA};
pub(crate) use train::Optimizer;
pub use train::{clip_global_norm, lr_at_step, train, Adam, EmaState, LogRow, TrainConfig, TrainedModel};

use crate::bridge::Denoise;
use crate::deconv::randomized_round;
use crate::error::{param, Error, Result};
use crate::samplers::RngState;
use crate::scoring::ScoreConfig;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

fn default_noise_dim() -> usize {
    100
}
fn default_hidden_dim() -> usize {
    128
}
fn default_layers() -> usize {
    4
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub input_dim: usize,
    #[serde(default = "default_noise_dim")]
    pub noise_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    /// Number of linear layers; all but the last are followed by SELU.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default)]
    pub cond_dim: usize,
    /// Counts are divided by this on the way in and multiplied on the way out.
    #[serde(default = "default_scale")]
    pub value_scale: f64,
}

impl DenoiserConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            noise_dim: default_noise_dim(),
            hidden_dim: default_hidden_dim(),
            layers: default_layers(),
            cond_dim: 0,
            value_scale: default_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(param("input_dim, hidden_dim and layers must be positive"));
        }
        if !(self.value_scale > 0.0 && self.value_scale.is_finite()) {
            return Err(param(format!("value_scale must be positive, got {}", self.value_scale)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim + 1 + self.noise_dim + self.cond_dim
    }

    /// `(fan_in, fan_out)` of each linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.feature_dim()];
        dims.extend(std::iter::repeat_n(self.hidden_dim, self.layers - 1));
        dims.push(self.input_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// MLP parameters stored flat as `[W0, b0, W1, b1, ...]`, each `W` row-major
/// with shape `(fan_in, fan_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: DenoiserConfig,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
struct Trace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    out: Array2<f64>,
}

impl Mlp {
    /// LeCun-normal weights, zero biases and a zero output layer.
    pub fn new(config: DenoiserConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        let mut params = Vec::with_capacity(config.param_count());
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            let head = k + 1 == shapes.len();
            for _ in 0..fan_in * fan_out {
                let z: f64 = StandardNormal.sample(rng);
                params.push(if head { 0.0 } else { std * z });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::Dimension(format!(
                "architecture needs {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(param("parameters must be finite"));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight and bias views of layer `k`.
    fn layer(&self, k: usize, shapes: &[(usize, usize)]) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let offset: usize = shapes[..k].iter().map(|(i, o)| i * o + o).sum();
        let (fan_in, fan_out) = shapes[k];
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[offset..offset + fan_in * fan_out])
            .expect("layer shape");
        let b = ArrayView1::from(&self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]);
        (w, b)
    }

    fn trace(&self, features: ArrayView2<'_, f64>) -> Trace {
        let shapes = self.config.layer_shapes();
        let mut inputs = vec![];
        let mut pre = vec![];
        let mut h = features.to_owned();
        for k in 0..shapes.len() {
            let (w, b) = self.layer(k, &shapes);
            let z = h.dot(&w) + &b;
            inputs.push(h);
            if k + 1 == shapes.len() {
                return Trace { inputs, pre, out: z };
            }
            h = z.mapv(selu);
            pre.push(z);
        }
        unreachable!("at least one layer")
    }

    /// Network output in scaled units.
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        self.trace(features).out
    }

    /// Gradient of `sum(grad_out * output)` with respect to the parameters.
    fn backward(&self, trace: &Trace, grad_out: Array2<f64>) -> Vec<f64> {
        let shapes = self.config.layer_shapes();
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out;
        for k in (0..shapes.len()).rev() {
            let offset: usize = shapes[..k].iter().map(|(i, o)| i * o + o).sum();
            let (fan_in, fan_out) = shapes[k];
            let gw = trace.inputs[k].t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            grads[offset..offset + fan_in * fan_out].copy_from_slice(gw.as_slice().expect("standard layout"));
            grads[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]
                .copy_from_slice(gb.as_slice().expect("standard layout"));
            if k > 0 {
                let (w, _) = self.layer(k, &shapes);
                let mut up = delta.dot(&w.t());
                up.zip_mut_with(&trace.pre[k - 1], |g, &z| *g *= selu_grad(z));
                delta = up;
            }
        }
        grads
    }

    /// Assemble `[x_t / scale, t, noise, side]` for each row.
    pub fn features(
        &self,
        x_t: ArrayView2<'_, i64>,
        t: ArrayView1<'_, f64>,
        noise: ArrayView2<'_, f64>,
        side: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let c = &self.config;
        let n = x_t.nrows();
        if x_t.ncols() != c.input_dim || t.len() != n || noise.nrows() != n || noise.ncols() != c.noise_dim {
            return Err(Error::Dimension(format!(
                "features: x_t {:?}, t {}, noise {:?} for input_dim {} noise_dim {}",
                x_t.dim(),
                t.len(),
                noise.dim(),
                c.input_dim,
                c.noise_dim
            )));
        }
        match side {
            Some(z) if z.nrows() != n || z.ncols() != c.cond_dim => {
                return Err(Error::Dimension(format!("side info {:?}, expected ({n}, {})", z.dim(), c.cond_dim)))
            }
            None if c.cond_dim > 0 => return Err(Error::Dimension("model expects side information".into())),
            _ => {}
        }
        let mut f = Array2::zeros((n, c.feature_dim()));
        let d = c.input_dim;
        f.slice_mut(s![.., ..d]).assign(&x_t.mapv(|v| v as f64 / c.value_scale));
        f.column_mut(d).assign(&t);
        f.slice_mut(s![.., d + 1..d + 1 + c.noise_dim]).assign(&noise);
        if let Some(z) = side {
            f.slice_mut(s![.., d + 1 + c.noise_dim..]).assign(&z);
        }
        Ok(f)
    }

    /// Continuous predictions in count units, clamped at 0. Row `i` draws its
    /// noise from `rngs[i]`.
    pub fn predict_continuous(
        &self,
        rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        t: f64,
        side: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        if rngs.len() != x_t.nrows() {
            return Err(Error::Dimension(format!("{} rng streams for {} rows", rngs.len(), x_t.nrows())));
        }
        let noise_dim = self.config.noise_dim;
        let mut noise = Array2::zeros((x_t.nrows(), noise_dim));
        for (mut row, rng) in noise.axis_iter_mut(Axis(0)).zip(rngs.iter_mut()) {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
        }
        let times = Array1::from_elem(x_t.nrows(), t);
        let f = self.features(x_t, times.view(), noise.view(), side)?;
        let scale = self.config.value_scale;
        Ok(self.forward(f.view()).mapv(|v| (v * scale).max(0.0)))
    }
}

impl Denoise for Mlp {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict(
        &self,
        rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        t: f64,
        side_info: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<i64>> {
        let real = self.predict_continuous(rngs, x_t, t, side_info)?;
        let mut out = Array2::zeros(real.raw_dim());
        for ((mut o, r), rng) in out.axis_iter_mut(Axis(0)).zip(real.axis_iter(Axis(0))).zip(rngs.iter_mut()) {
            o.assign(&randomized_round(rng, r)?);
        }
        Ok(out)
    }

    fn predict_real(
        &self,
        rngs: &mut [RngState],
        x_t: ArrayView2<'_, i64>,
        t: f64,
        side_info: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        self.predict_continuous(rngs, x_t, t, side_info)
    }
}

/// `m` integer draws from the denoiser for a single state.
pub fn denoise_sample(
    rng: &mut RngState,
    model: &Mlp,
    x_t: &[i64],
    t: f64,
    side_info: Option<&[f64]>,
    m: usize,
) -> Result<Vec<Vec<i64>>> {
    let d = x_t.len();
    if d != model.config.input_dim {
        return Err(param(format!("model expects {} coordinates, got {d}", model.config.input_dim)));
    }
    let x = Array2::from_shape_fn((m, d), |(_, j)| x_t[j]);
    let z = match side_info {
        Some(z) => Some(Array2::from_shape_fn((m, z.len()), |(_, j)| z[j])),
        None => None,
    };
    let mut rngs: Vec<RngState> = (0..m).map(|i| rng.substream(i as u64)).collect();
    // advance the parent so repeated calls give fresh draws
    let _: u64 = rand::Rng::random(rng);
    let out = model.predict(&mut rngs, x.view(), t, z.as_ref().map(|z| z.view()))?;
    Ok(out.outer_iter().map(|r| r.to_vec()).collect())
}

/// A minibatch for the energy-score loss.
///
/// Consecutive blocks of `group_size` rows form one example whose summed
/// output is compared with the matching row of `targets`; `group_size = 1`
/// is ordinary unit-level training.
#[derive(Clone, Debug)]
pub struct LossBatch<'a> {
    pub x_t: ArrayView2<'a, i64>,
    pub t: ArrayView1<'a, f64>,
    pub side: Option<ArrayView2<'a, f64>>,
    /// Targets in count units, one row per example.
    pub targets: ArrayView2<'a, f64>,
    pub group_size: usize,
}

/// Standard normal noise for `rows * m` network evaluations; sample `j` of
/// row `i` sits at `i * m + j`.
pub fn draw_noise(rng: &mut RngState, rows: usize, m: usize, noise_dim: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows * m, noise_dim), || StandardNormal.sample(rng))
}

/// `∇_u ‖u‖^β`, with 0 at `u = 0`.
fn rho_grad(u: ArrayView1<'_, f64>, beta: f64, out: &mut [f64], weight: f64) {
    let n2: f64 = u.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return;
    }
    let c = weight * beta * n2.powf(0.5 * beta - 1.0);
    for (o, v) in out.iter_mut().zip(u.iter()) {
        *o += c * v;
    }
}

/// Negated plug-in energy score averaged over examples, and its gradient.
///
/// The score is evaluated on the continuous outputs in scaled units (counts
/// divided by `value_scale`); `noise` is held fixed, laid out as in
/// [`draw_noise`].
pub fn loss_and_grads(
    model: &Mlp,
    batch: &LossBatch<'_>,
    noise: ArrayView2<'_, f64>,
    score: &ScoreConfig,
) -> Result<(f64, Vec<f64>)> {
    score.validate()?;
    let m = score.m;
    let rows = batch.x_t.nrows();
    let g = batch.group_size;
    if rows == 0 {
        return Err(param("loss needs a nonempty batch"));
    }
    if g == 0 || rows % g != 0 || batch.targets.nrows() != rows / g {
        return Err(Error::Dimension(format!(
            "{rows} rows, group size {g}, {} targets",
            batch.targets.nrows()
        )));
    }
    let d = model.config.input_dim;
    let rep = |i: usize| i / m;
    let x_rep = Array2::from_shape_fn((rows * m, d), |(i, j)| batch.x_t[[rep(i), j]]);
    let t_rep = Array1::from_shape_fn(rows * m, |i| batch.t[rep(i)]);
    let z_rep = batch.side.map(|z| Array2::from_shape_fn((rows * m, z.ncols()), |(i, j)| z[[rep(i), j]]));
    let features = model.features(x_rep.view(), t_rep.view(), noise, z_rep.as_ref().map(|z| z.view()))?;
    let trace = model.trace(features.view());

    let scale = model.config.value_scale;
    let examples = rows / g;
    let beta = score.beta;
    let pair_w = 1.0 / (m * (m - 1)) as f64;
    let mut grad_out = Array2::zeros((rows * m, d));
    let mut total = 0.0;
    for e in 0..examples {
        // aggregated draws: agg[j] = Σ_units output of sample j
        let mut agg = Array2::<f64>::zeros((m, d));
        for u in 0..g {
            let row = e * g + u;
            for j in 0..m {
                agg.row_mut(j).zip_mut_with(&trace.out.row(row * m + j), |a, &o| *a += o);
            }
        }
        let target = batch.targets.row(e).mapv(|v| v / scale);
        let mut s = 0.0;
        let mut grad_agg = Array2::<f64>::zeros((m, d));
        for j in 0..m {
            for k in 0..m {
                if j == k {
                    continue;
                }
                let diff = &agg.row(j) - &agg.row(k);
                s += 0.5 * pair_w * crate::scoring::rho(agg.row(j), agg.row(k), beta);
                rho_grad(diff.view(), beta, grad_agg.row_mut(j).as_slice_mut().unwrap(), pair_w);
            }
            let diff = &agg.row(j) - &target;
            s -= crate::scoring::rho(agg.row(j), target.view(), beta) / m as f64;
            rho_grad(diff.view(), beta, grad_agg.row_mut(j).as_slice_mut().unwrap(), -1.0 / m as f64);
        }
        total += s;
        // loss is -mean(s): scatter -grad/examples to every unit
        for u in 0..g {
            let row = e * g + u;
            for j in 0..m {
                grad_out.row_mut(row * m + j).scaled_add(-1.0 / examples as f64, &grad_agg.row(j));
            }
        }
    }
    let loss = -total / examples as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss}")));
    }
    Ok((loss, model.backward(&trace, grad_out)))
}
