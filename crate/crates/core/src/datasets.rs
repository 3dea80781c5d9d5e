//! Synthetic benchmark generators and their on-disk format.
//!
//! A dataset is `<stem>.csv` (integer cells, one header row) next to
//! `<stem>.json`, a sidecar describing the generator, seed and shape.

use crate::error::{param, Error, Result};
use crate::samplers::{poisson_sample, RngState};
use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Moons coordinates live in `0..MOONS_RANGE`.
pub const MOONS_RANGE: i64 = 196;
/// Mixture coordinates live in `0..GMM_RANGE`.
pub const GMM_RANGE: i64 = 256;

pub const GMM_RANK: usize = 3;
pub const GMM_COMPONENTS: usize = 5;
pub const DECONV_DIM: usize = 4;
pub const DECONV_POOL: usize = 50_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub generator: String,
    pub parameters: serde_json::Value,
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
    /// Coordinates lie in `0..value_range`.
    pub value_range: i64,
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default)]
    pub cond_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub x0: Array2<i64>,
    pub x1: Array2<i64>,
    pub meta: DatasetMeta,
}

/// Groups of `group_size` consecutive unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupDataset {
    /// One row per group.
    pub aggregates: Array2<i64>,
    /// One-hot component labels, one row per unit.
    pub side_info: Array2<f64>,
    /// True units, kept for evaluation only.
    pub units: Option<Array2<i64>>,
    pub x1_units: Array2<i64>,
    pub meta: DatasetMeta,
}

impl GroupDataset {
    pub fn group_size(&self) -> usize {
        self.meta.group_size.unwrap_or(1)
    }

    pub fn n_groups(&self) -> usize {
        self.aggregates.nrows()
    }

    /// Groups `range` as a new dataset.
    pub fn subset(&self, range: std::ops::Range<usize>) -> GroupDataset {
        let g = self.group_size();
        let rows = range.start * g..range.end * g;
        let mut meta = self.meta.clone();
        meta.rows = range.len();
        GroupDataset {
            aggregates: self.aggregates.slice(s![range.clone(), ..]).to_owned(),
            side_info: self.side_info.slice(s![rows.clone(), ..]).to_owned(),
            units: self.units.as_ref().map(|u| u.slice(s![rows.clone(), ..]).to_owned()),
            x1_units: self.x1_units.slice(s![rows, ..]).to_owned(),
            meta,
        }
    }
}

/// Fold `v` into `[lo, hi]` by repeated reflection at the boundaries.
pub fn reflect(v: i64, lo: i64, hi: i64) -> i64 {
    let width = hi - lo;
    if width == 0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2 * width);
    lo + if m > width { 2 * width - m } else { m }
}

fn gauss(rng: &mut RngState) -> f64 {
    StandardNormal.sample(rng)
}

fn moons_to_grid(v: f64) -> i64 {
    (v * 30.0 + 80.0).clamp(0.0, (MOONS_RANGE - 1) as f64).round() as i64
}

/// Two moons (`x0`) paired independently with eight Gaussians on a circle
/// of radius 2 (`x1`), both mapped to the integer grid `0..196`.
pub fn gen_discrete_moons(rng: &mut RngState, n: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(param("n must be at least 1"));
    }
    let noise = Normal::new(0.0, 0.1).map_err(|e| param(e.to_string()))?;
    let mut moons: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let theta = rng.random::<f64>() * std::f64::consts::PI;
            let (x, y) = if i < n / 2 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 1.0 - theta.sin() - 0.5)
            };
            [x + noise.sample(rng) - 0.5, y + noise.sample(rng) - 0.25]
        })
        .collect();
    moons.shuffle(rng);
    let x0 = Array2::from_shape_fn((n, 2), |(i, j)| moons_to_grid(moons[i][j]));
    let mut x1 = Array2::zeros((n, 2));
    for mut row in x1.axis_iter_mut(Axis(0)) {
        let angle = rng.random_range(0..8) as f64 * std::f64::consts::FRAC_PI_4;
        row[0] = moons_to_grid(2.0 * angle.cos() + noise.sample(rng));
        row[1] = moons_to_grid(2.0 * angle.sin() + noise.sample(rng));
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        generator: "moons".into(),
        parameters: serde_json::json!({ "n": n }),
        seed,
        rows: n,
        dim: 2,
        value_range: MOONS_RANGE,
        group_size: None,
        cond_dim: 0,
    };
    Ok(PairedDataset { x0, x1, meta })
}

/// Haar-random 3x3 orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
fn random_orthogonal(rng: &mut RngState) -> Matrix3<f64> {
    let a = Matrix3::from_fn(|_, _| gauss(rng));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..3 {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// A Gaussian mixture on a rank-3 latent space pushed into `d` dimensions.
#[derive(Clone, Debug)]
pub struct LowRankMixture {
    pub means: Vec<Vector3<f64>>,
    /// `cov = factor * factor^T`.
    pub factors: Vec<Matrix3<f64>>,
    pub weights: Vec<f64>,
    pub projection: DMatrix<f64>,
}

impl LowRankMixture {
    pub fn new(rng: &mut RngState, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(param("dimension must be at least 1"));
        }
        let r = GMM_RANK as f64;
        let mean_sd = 20.0 / r.sqrt();
        let eig = Exp::new(1.0_f64 / 10.0).map_err(|e| param(e.to_string()))?;
        let unit_gamma = Gamma::new(1.0, 1.0).map_err(|e| param(e.to_string()))?;
        let mut means = vec![];
        let mut factors = vec![];
        for _ in 0..GMM_COMPONENTS {
            means.push(Vector3::from_fn(|_, _| mean_sd * gauss(rng)));
            let q = random_orthogonal(rng);
            let scales = Vector3::from_fn(|_, _| eig.sample(rng).max(0.1).sqrt());
            factors.push(q * Matrix3::from_diagonal(&scales));
        }
        let raw: Vec<f64> = (0..GMM_COMPONENTS).map(|_| unit_gamma.sample(rng)).collect();
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        let projection = DMatrix::from_fn(d, GMM_RANK, |_, _| gauss(rng) / r.sqrt());
        Ok(Self { means, factors, weights, projection })
    }

    pub fn dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn pick_component(&self, rng: &mut RngState, weights: &[f64]) -> usize {
        let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        weights.len() - 1
    }

    /// One integer draw from component `k`: project, add unit noise, shift to
    /// the middle of the range, round and reflect into `[0, 255]`.
    pub fn sample_component(&self, rng: &mut RngState, k: usize) -> Vec<i64> {
        let eps = Vector3::from_fn(|_, _| gauss(rng));
        let z = self.means[k] + self.factors[k] * eps;
        let y = &self.projection * z;
        y.iter()
            .map(|v| {
                let noisy = v + gauss(rng) + (GMM_RANGE / 2) as f64;
                reflect(noisy.round() as i64, 0, GMM_RANGE - 1)
            })
            .collect()
    }
}

/// Poisson source with the given per-coordinate means, reflected into range.
fn poisson_source(rng: &mut RngState, means: &[f64]) -> Result<Vec<i64>> {
    means
        .iter()
        .map(|&m| poisson_sample(rng, m).map(|v| reflect(v as i64, 0, GMM_RANGE - 1)))
        .collect()
}

fn column_means(x: ArrayView2<'_, i64>) -> Vec<f64> {
    x.mapv(|v| v as f64).mean_axis(Axis(0)).expect("nonempty").to_vec()
}

/// Rank-3 mixture targets `x0` in `d` dimensions paired with Poisson
/// sources `x1` that match the per-coordinate target means.
pub fn gen_lowrank_gmm(rng: &mut RngState, n: usize, d: usize, seed: u64) -> Result<PairedDataset> {
    if n == 0 {
        return Err(param("n must be at least 1"));
    }
    let mix = LowRankMixture::new(rng, d)?;
    let mut x0 = Array2::zeros((n, d));
    for mut row in x0.axis_iter_mut(Axis(0)) {
        let k = mix.pick_component(rng, &mix.weights);
        row.assign(&ndarray::Array1::from(mix.sample_component(rng, k)));
    }
    let means = column_means(x0.view());
    let mut x1 = Array2::zeros((n, d));
    for mut row in x1.axis_iter_mut(Axis(0)) {
        row.assign(&ndarray::Array1::from(poisson_source(rng, &means)?));
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        generator: "lowrank".into(),
        parameters: serde_json::json!({ "n": n, "d": d, "rank": GMM_RANK, "components": GMM_COMPONENTS }),
        seed,
        rows: n,
        dim: d,
        value_range: GMM_RANGE,
        group_size: None,
        cond_dim: 0,
    };
    Ok(PairedDataset { x0, x1, meta })
}

/// Groups of `G` units from the `d = 4` mixture. Each group draws its own
/// component weights from `Dirichlet(alpha)` and its units from a shared
/// pool of `pool_size` labelled samples.
pub fn gen_deconv_groups(
    rng: &mut RngState,
    n_groups: usize,
    group_size: usize,
    alpha: f64,
    pool_size: usize,
    seed: u64,
) -> Result<GroupDataset> {
    if group_size == 0 || n_groups == 0 || pool_size == 0 {
        return Err(param("group size, group count and pool size must be positive"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(param(format!("alpha must be positive, got {alpha}")));
    }
    let mix = LowRankMixture::new(rng, DECONV_DIM)?;
    let mut pool: Vec<Vec<Vec<i64>>> = vec![vec![]; GMM_COMPONENTS];
    for _ in 0..pool_size {
        let k = mix.pick_component(rng, &mix.weights);
        pool[k].push(mix.sample_component(rng, k));
    }
    let available: Vec<f64> = pool.iter().map(|p| if p.is_empty() { 0.0 } else { 1.0 }).collect();
    let all: Vec<&Vec<i64>> = pool.iter().flatten().collect();
    let pool_matrix = Array2::from_shape_fn((all.len(), DECONV_DIM), |(i, j)| all[i][j]);
    let means = column_means(pool_matrix.view());

    let gamma = Gamma::new(alpha, 1.0).map_err(|e| param(e.to_string()))?;
    let rows = n_groups * group_size;
    let mut units = Array2::zeros((rows, DECONV_DIM));
    let mut x1 = Array2::zeros((rows, DECONV_DIM));
    let mut side = Array2::zeros((rows, GMM_COMPONENTS));
    let mut aggregates = Array2::zeros((n_groups, DECONV_DIM));
    for gi in 0..n_groups {
        let mut w: Vec<f64> = (0..GMM_COMPONENTS).map(|k| gamma.sample(rng) * available[k]).collect();
        if w.iter().sum::<f64>() <= 0.0 {
            // all mass on empty components (only possible for tiny alpha)
            w = available.clone();
        }
        for u in 0..group_size {
            let row = gi * group_size + u;
            let k = mix.pick_component(rng, &w);
            let pick = &pool[k][rng.random_range(0..pool[k].len())];
            units.row_mut(row).assign(&ndarray::ArrayView1::from(pick.as_slice()));
            side[[row, k]] = 1.0;
            x1.row_mut(row).assign(&ndarray::Array1::from(poisson_source(rng, &means)?));
        }
        let sum = units.slice(s![gi * group_size..(gi + 1) * group_size, ..]).sum_axis(Axis(0));
        aggregates.row_mut(gi).assign(&sum);
    }
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        generator: "deconv".into(),
        parameters: serde_json::json!({
            "n_groups": n_groups, "group_size": group_size, "alpha": alpha, "pool_size": pool_size
        }),
        seed,
        rows: n_groups,
        dim: DECONV_DIM,
        value_range: GMM_RANGE,
        group_size: Some(group_size),
        cond_dim: GMM_COMPONENTS,
    };
    Ok(GroupDataset { aggregates, side_info: side, units: Some(units), x1_units: x1, meta })
}

/// `<stem>.csv` and `<stem>.json` for a dataset path given with or without
/// the `.csv` extension.
pub fn dataset_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = if path.extension().is_some_and(|e| e == "csv" || e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".csv"), with(".json"))
}

fn load_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Load(format!("{}: {msg}", path.display()))
}

fn write_sidecar(path: &Path, meta: &DatasetMeta) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

fn read_sidecar(path: &Path) -> Result<DatasetMeta> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        load_err(path, format!("cannot read sidecar ({e}); every dataset CSV needs its JSON sidecar, regenerate it with `countbridge gen`"))
    })?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| load_err(path, e))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(load_err(path, format!("schema version {} is not supported (expected {SCHEMA_VERSION})", meta.schema_version)));
    }
    Ok(meta)
}

fn prefixed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

/// Read an all-integer CSV with a header row. Errors name the row and column.
pub fn read_int_csv(path: &Path) -> Result<(Vec<String>, Array2<i64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(path, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| load_err(path, e))?.iter().map(String::from).collect();
    let mut cells = vec![];
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| load_err(path, format!("row {}: {e}", r + 1)))?;
        if record.len() != header.len() {
            return Err(load_err(path, format!("row {} has {} cells, header has {}", r + 1, record.len(), header.len())));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: i64 = cell.trim().parse().map_err(|_| {
                load_err(path, format!("row {}, column '{}': '{cell}' is not an integer", r + 1, header[c]))
            })?;
            cells.push(v);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), cells).map_err(|e| load_err(path, e))?;
    Ok((header, m))
}

/// Write an integer matrix as CSV with the given header.
pub fn write_int_csv(path: &Path, header: &[String], data: ArrayView2<'_, i64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| load_err(path, e))?;
    w.write_record(header).map_err(|e| load_err(path, e))?;
    for row in data.outer_iter() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| load_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Columns whose header starts with `prefix` followed by an index.
pub fn columns_with_prefix(header: &[String], data: ArrayView2<'_, i64>, prefix: &str) -> Option<Array2<i64>> {
    let idx: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()))
        .map(|(i, _)| i)
        .collect();
    (!idx.is_empty()).then(|| data.select(Axis(1), &idx))
}

fn require_columns(path: &Path, header: &[String], data: ArrayView2<'_, i64>, prefix: &str, n: usize) -> Result<Array2<i64>> {
    let cols = columns_with_prefix(header, data, prefix).ok_or_else(|| load_err(path, format!("no '{prefix}*' columns")))?;
    if cols.ncols() != n {
        return Err(load_err(path, format!("expected {n} '{prefix}*' columns, found {}", cols.ncols())));
    }
    Ok(cols)
}

fn check_rows(path: &Path, found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(load_err(path, format!("sidecar declares {expected} rows but the file holds {found} (truncated?)")));
    }
    Ok(())
}

pub fn write_paired(path: &Path, data: &PairedDataset) -> Result<()> {
    let (csv_path, json_path) = dataset_paths(path);
    let d = data.meta.dim;
    let mut header = prefixed("x0_", d);
    header.extend(prefixed("x1_", d));
    let both = ndarray::concatenate![Axis(1), data.x0.view(), data.x1.view()];
    write_int_csv(&csv_path, &header, both.view())?;
    write_sidecar(&json_path, &data.meta)
}

pub fn read_paired(path: &Path) -> Result<PairedDataset> {
    let (csv_path, json_path) = dataset_paths(path);
    let meta = read_sidecar(&json_path)?;
    if meta.group_size.is_some() {
        return Err(load_err(&json_path, "this is a group dataset, not a paired one"));
    }
    let (header, data) = read_int_csv(&csv_path)?;
    check_rows(&csv_path, data.nrows(), meta.rows)?;
    let x0 = require_columns(&csv_path, &header, data.view(), "x0_", meta.dim)?;
    let x1 = require_columns(&csv_path, &header, data.view(), "x1_", meta.dim)?;
    Ok(PairedDataset { x0, x1, meta })
}

/// One CSV row per unit: group index, the group's aggregate, the unit's
/// source, its label columns and (if known) its true value.
pub fn write_groups(path: &Path, data: &GroupDataset) -> Result<()> {
    let (csv_path, json_path) = dataset_paths(path);
    let (d, k, g) = (data.meta.dim, data.meta.cond_dim, data.group_size());
    let mut header = vec!["group".to_string()];
    header.extend(prefixed("agg_", d));
    header.extend(prefixed("x1_", d));
    header.extend(prefixed("z_", k));
    if data.units.is_some() {
        header.extend(prefixed("x0_", d));
    }
    let rows = data.x1_units.nrows();
    let mut out = Array2::zeros((rows, header.len()));
    for r in 0..rows {
        let gi = r / g;
        let mut row = vec![gi as i64];
        row.extend(data.aggregates.row(gi).iter());
        row.extend(data.x1_units.row(r).iter());
        row.extend(data.side_info.row(r).iter().map(|&v| v as i64));
        if let Some(u) = &data.units {
            row.extend(u.row(r).iter());
        }
        out.row_mut(r).assign(&ndarray::Array1::from(row));
    }
    write_int_csv(&csv_path, &header, out.view())?;
    write_sidecar(&json_path, &data.meta)
}

pub fn read_groups(path: &Path) -> Result<GroupDataset> {
    let (csv_path, json_path) = dataset_paths(path);
    let meta = read_sidecar(&json_path)?;
    let g = meta.group_size.ok_or_else(|| load_err(&json_path, "sidecar lacks group_size; not a group dataset"))?;
    let (header, data) = read_int_csv(&csv_path)?;
    check_rows(&csv_path, data.nrows(), meta.rows * g)?;
    let group_col = header.iter().position(|h| h == "group").ok_or_else(|| load_err(&csv_path, "no 'group' column"))?;
    for r in 0..data.nrows() {
        if data[[r, group_col]] != (r / g) as i64 {
            return Err(load_err(&csv_path, format!("row {}: group index {} breaks the layout", r + 1, data[[r, group_col]])));
        }
    }
    let agg_rows = require_columns(&csv_path, &header, data.view(), "agg_", meta.dim)?;
    let x1_units = require_columns(&csv_path, &header, data.view(), "x1_", meta.dim)?;
    let side_info = if meta.cond_dim > 0 {
        require_columns(&csv_path, &header, data.view(), "z_", meta.cond_dim)?.mapv(|v| v as f64)
    } else {
        Array2::zeros((data.nrows(), 0))
    };
    let units = columns_with_prefix(&header, data.view(), "x0_");
    let aggregates = Array2::from_shape_fn((meta.rows, meta.dim), |(gi, j)| agg_rows[[gi * g, j]]);
    for r in 0..data.nrows() {
        if agg_rows.row(r) != aggregates.row(r / g) {
            return Err(load_err(&csv_path, format!("row {}: aggregate differs from the rest of its group", r + 1)));
        }
    }
    if let Some(u) = &units {
        for gi in 0..meta.rows {
            if u.slice(s![gi * g..(gi + 1) * g, ..]).sum_axis(Axis(0)) != aggregates.row(gi) {
                return Err(load_err(&csv_path, format!("group {gi}: units do not sum to the aggregate")));
            }
        }
    }
    Ok(GroupDataset { aggregates, side_info, units, x1_units, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_stays_in_range() {
        assert_eq!(reflect(-1, 0, 255), 1);
        assert_eq!(reflect(256, 0, 255), 254);
        assert_eq!(reflect(255, 0, 255), 255);
        for v in -2000..2000 {
            let r = reflect(v, 0, 255);
            assert!((0..=255).contains(&r));
        }
        // overshoot by more than one width: 255 + 255 + 3 folds back to 3
        assert_eq!(reflect(513, 0, 255), 3);
    }

    #[test]
    fn moons_range_and_centres() {
        let mut rng = RngState::new(1);
        let ds = gen_discrete_moons(&mut rng, 4000, 1).unwrap();
        assert!(ds.x0.iter().chain(ds.x1.iter()).all(|&v| (0..MOONS_RANGE).contains(&v)));
        // every x1 point sits within a few std of one of the 8 centres
        for row in ds.x1.outer_iter() {
            let near = (0..8).any(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                let (cx, cy) = (80.0 + 60.0 * a.cos(), 80.0 + 60.0 * a.sin());
                ((row[0] as f64 - cx).powi(2) + (row[1] as f64 - cy).powi(2)).sqrt() < 20.0
            });
            assert!(near, "{row:?}");
        }
    }

    #[test]
    fn generators_are_deterministic() {
        let a = gen_discrete_moons(&mut RngState::new(5), 500, 5).unwrap();
        let b = gen_discrete_moons(&mut RngState::new(5), 500, 5).unwrap();
        assert_eq!(a, b);
        let a = gen_lowrank_gmm(&mut RngState::new(5), 300, 6, 5).unwrap();
        let b = gen_lowrank_gmm(&mut RngState::new(5), 300, 6, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lowrank_range_and_rank() {
        let mut rng = RngState::new(2);
        let mix = LowRankMixture::new(&mut rng, 8).unwrap();
        // noise-free covariance P Σ P^T has rank <= 3
        let cov = &mix.projection * (mix.factors[0] * mix.factors[0].transpose()) * mix.projection.transpose();
        let sv = cov.singular_values();
        let mut s: Vec<f64> = sv.iter().cloned().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[3] < 1e-9 * s[0]);
        let ds = gen_lowrank_gmm(&mut rng, 2000, 8, 2).unwrap();
        assert!(ds.x0.iter().chain(ds.x1.iter()).all(|&v| (0..GMM_RANGE).contains(&v)));
    }

    #[test]
    fn orthogonal_matrices_are_orthogonal() {
        let mut rng = RngState::new(3);
        for _ in 0..10 {
            let q = random_orthogonal(&mut rng);
            assert!((q.transpose() * q - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn deconv_groups_sum_and_concentrate() {
        let mut rng = RngState::new(4);
        let ds = gen_deconv_groups(&mut rng, 50, 4, 1.0, 5000, 4).unwrap();
        let units = ds.units.as_ref().unwrap();
        for gi in 0..50 {
            assert_eq!(units.slice(s![gi * 4..gi * 4 + 4, ..]).sum_axis(Axis(0)), ds.aggregates.row(gi));
        }
        assert!(ds.side_info.outer_iter().all(|r| r.sum() == 1.0));

        // alpha = 1000: within-group label frequencies close to uniform
        let ds = gen_deconv_groups(&mut rng, 200, 200, 1000.0, 5000, 4).unwrap();
        let mut tv = 0.0;
        for gi in 0..200 {
            let counts = ds.side_info.slice(s![gi * 200..(gi + 1) * 200, ..]).sum_axis(Axis(0));
            tv += 0.5 * counts.iter().map(|c| (c / 200.0 - 0.2).abs()).sum::<f64>();
        }
        assert!(tv / 200.0 < 0.1, "{}", tv / 200.0);
    }

    #[test]
    fn io_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let paired = gen_discrete_moons(&mut RngState::new(6), 50, 6).unwrap();
        let p = dir.path().join("moons");
        write_paired(&p, &paired).unwrap();
        assert_eq!(read_paired(&p).unwrap(), paired);
        assert_eq!(read_paired(&dir.path().join("moons.csv")).unwrap(), paired);

        let groups = gen_deconv_groups(&mut RngState::new(6), 10, 3, 1.0, 500, 6).unwrap();
        let q = dir.path().join("groups");
        write_groups(&q, &groups).unwrap();
        assert_eq!(read_groups(&q).unwrap(), groups);

        // truncated file
        let csv = dir.path().join("moons.csv");
        let text = std::fs::read_to_string(&csv).unwrap();
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        std::fs::write(&csv, cut).unwrap();
        let err = read_paired(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");

        // non-integer cell
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(|c: char| c.is_ascii_digit(), "x", 1);
        std::fs::write(&csv, lines.join("\n")).unwrap();
        let err = read_paired(&p).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("x0_0"), "{err}");

        // missing sidecar
        std::fs::remove_file(dir.path().join("moons.json")).unwrap();
        let err = read_paired(&p).unwrap_err().to_string();
        assert!(err.contains("sidecar"), "{err}");
    }
}
