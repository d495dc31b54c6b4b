//! Spatiotemporal fields and the dataset plumbing around them: binary I/O,
//! normalization, valid-location filtering, sensor placement, lagged sequence
//! extraction and the contiguous train/val/test split.
//!
//! A field is an `n_x * n_y` grid sampled at `n_t` instants. Internally the
//! values live time-major, one flattened snapshot per row, because targets
//! and scaler fits walk whole snapshots. The flat spatial index of a grid
//! point is `p = x * n_y + y`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use thiserror::Error;

use crate::rng;

pub const FIELD_MAGIC: &[u8; 4] = b"CSSF";

/// Default threshold for valid-location filtering.
pub const EPS_VALID: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a field file")]
    BadMagic,
    #[error("field dims {0}x{1}x{2} do not match payload length {3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("non-finite value at (x={0}, y={1}, t={2})")]
    NonFinite(usize, usize, usize),
    #[error("zero-sized field dimension")]
    EmptyDim,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("scaler fit saw constant data (max = min)")]
    ConstantData,
    #[error("non-finite value entered a data operation")]
    NonFinite,
    #[error("no spatial location passed the validity filter")]
    NoValidLocations,
    #[error("requested {requested} sensors but only {available} valid locations")]
    InsufficientLocations { requested: usize, available: usize },
    #[error("lag {lag} does not leave any sample from {n_t} snapshots")]
    LagTooLarge { lag: usize, n_t: usize },
    #[error("{n_samples} samples cannot cover a {0:.2}/{1:.2} split", .fractions.0, .fractions.1)]
    TooFewSamples {
        n_samples: usize,
        fractions: (f64, f64),
    },
    #[error("index {index} out of range {bound}")]
    OutOfRange { index: usize, bound: usize },
}

/// Which partition a dataset (or a scaler fit) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Where regression targets were taken from. Training and validation fit the
/// corrupted data; the test split is judged against the original field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetSource {
    Subsampled,
    Original,
}

/// A named scalar field on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    n_x: usize,
    n_y: usize,
    n_t: usize,
    /// (n_t, n_x * n_y), row t = flattened snapshot.
    data: Array2<f64>,
}

impl Field {
    pub fn from_time_major(
        name: impl Into<String>,
        dims: (usize, usize, usize),
        data: Array2<f64>,
    ) -> Result<Self, FieldError> {
        let (n_x, n_y, n_t) = dims;
        if n_x == 0 || n_y == 0 || n_t == 0 {
            return Err(FieldError::EmptyDim);
        }
        if data.dim() != (n_t, n_x * n_y) {
            return Err(FieldError::DimMismatch(n_x, n_y, n_t, data.len()));
        }
        let field = Field {
            name: name.into(),
            n_x,
            n_y,
            n_t,
            data,
        };
        field.check_finite()?;
        Ok(field)
    }

    pub fn from_fn(
        name: impl Into<String>,
        dims: (usize, usize, usize),
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self, FieldError> {
        let (n_x, n_y, n_t) = dims;
        let mut data = Array2::zeros((n_t, n_x * n_y));
        for t in 0..n_t {
            for x in 0..n_x {
                for y in 0..n_y {
                    data[(t, x * n_y + y)] = f(x, y, t);
                }
            }
        }
        Field::from_time_major(name, dims, data)
    }

    pub fn check_finite(&self) -> Result<(), FieldError> {
        for ((t, p), v) in self.data.indexed_iter() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite(p / self.n_y, p % self.n_y, t));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_x, self.n_y, self.n_t)
    }

    /// Number of spatial points n = n_x * n_y.
    pub fn n_points(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn value(&self, x: usize, y: usize, t: usize) -> f64 {
        self.data[(t, x * self.n_y + y)]
    }

    pub fn set_value(&mut self, x: usize, y: usize, t: usize, v: f64) {
        self.data[(t, x * self.n_y + y)] = v;
    }

    /// Flattened snapshot at time t.
    pub fn snapshot(&self, t: usize) -> ArrayView1<'_, f64> {
        self.data.row(t)
    }

    /// Snapshot reshaped to its (n_x, n_y) grid.
    pub fn snapshot_grid(&self, t: usize) -> Array2<f64> {
        self.data
            .row(t)
            .to_owned()
            .into_shape_with_order((self.n_x, self.n_y))
            .expect("row length is n_x * n_y")
    }

    /// Time series of one flat spatial index.
    pub fn series(&self, p: usize) -> ArrayView1<'_, f64> {
        self.data.column(p)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    /// Binary layout: magic "CSSF", then n_x, n_y, n_t as little-endian u32,
    /// then the values as little-endian f64 with t fastest, y next, x slowest.
    /// A plain-text sidecar `<path>.label` carries the name.
    pub fn write_binary(&self, path: &Path) -> Result<(), FieldError> {
        let mut buf = Vec::with_capacity(16 + 8 * self.data.len());
        buf.extend_from_slice(FIELD_MAGIC);
        buf.extend_from_slice(&(self.n_x as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_y as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_t as u32).to_le_bytes());
        for x in 0..self.n_x {
            for y in 0..self.n_y {
                for t in 0..self.n_t {
                    buf.extend_from_slice(&self.data[(t, x * self.n_y + y)].to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        fs::write(sidecar_path(path), format!("{}\n", self.name))?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self, FieldError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..4] != FIELD_MAGIC {
            return Err(FieldError::BadMagic);
        }
        let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (n_x, n_y, n_t) = (rd(4), rd(8), rd(12));
        let n_vals = n_x
            .checked_mul(n_y)
            .and_then(|n| n.checked_mul(n_t))
            .ok_or(FieldError::EmptyDim)?;
        if bytes.len() != 16 + 8 * n_vals {
            return Err(FieldError::DimMismatch(n_x, n_y, n_t, (bytes.len() - 16) / 8));
        }
        let mut data = Array2::zeros((n_t, n_x * n_y));
        let mut o = 16;
        for x in 0..n_x {
            for y in 0..n_y {
                for t in 0..n_t {
                    data[(t, x * n_y + y)] = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
                    o += 8;
                }
            }
        }
        let name = fs::read_to_string(sidecar_path(path))
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|_| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "field".to_string())
            });
        Field::from_time_major(name, (n_x, n_y, n_t), data)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".label");
    std::path::PathBuf::from(s)
}

/// Normalization family. Min-max is the default; zero-mean/unit-variance
/// suits data that is already roughly symmetric about zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    MinMax,
    ZScore,
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Normalization::MinMax => write!(f, "min-max"),
            Normalization::ZScore => write!(f, "z-score"),
        }
    }
}

/// Fitted normalization parameters. `fitted_on` records the split the fit
/// saw and is always `Train`; fits over other rows indicate leakage.
#[derive(Debug, Clone, PartialEq)]
pub enum Scaler {
    MinMax { min: f64, max: f64, fitted_on: Split },
    ZScore { mean: f64, std: f64, fitted_on: Split },
}

impl Scaler {
    pub fn fitted_on(&self) -> Split {
        match self {
            Scaler::MinMax { fitted_on, .. } | Scaler::ZScore { fitted_on, .. } => *fitted_on,
        }
    }

    pub fn apply_scalar(&self, x: f64) -> f64 {
        match self {
            Scaler::MinMax { min, max, .. } => (x - min) / (max - min),
            Scaler::ZScore { mean, std, .. } => (x - mean) / std,
        }
    }

    pub fn invert_scalar(&self, y: f64) -> f64 {
        match self {
            Scaler::MinMax { min, max, .. } => y * (max - min) + min,
            Scaler::ZScore { mean, std, .. } => y * std + mean,
        }
    }

    pub fn apply_field(&self, field: &Field) -> Field {
        let mut out = field.clone();
        out.data_mut().mapv_inplace(|v| self.apply_scalar(v));
        out
    }

    pub fn apply_array2(&self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(|v| self.apply_scalar(v))
    }

    pub fn invert_array2(&self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(|v| self.invert_scalar(v))
    }

    pub fn invert_array1(&self, a: &Array1<f64>) -> Array1<f64> {
        a.mapv(|v| self.invert_scalar(v))
    }
}

/// Time rows visible to the training split: every instant touched by a
/// training sample, inputs and target alike. Rows at or beyond the range end
/// belong to validation/test targets only and must never reach a scaler fit.
pub fn train_time_rows(n_t: usize, lag: usize, train_frac: f64) -> std::ops::Range<usize> {
    let n_samples = n_t.saturating_sub(lag);
    let n_train = (train_frac * n_samples as f64).floor() as usize;
    0..(n_train + lag).min(n_t)
}

/// Fit the scaler on the given time rows of `field` only.
pub fn fit_scaler(
    field: &Field,
    rows: std::ops::Range<usize>,
    kind: Normalization,
) -> Result<Scaler, DataError> {
    if rows.is_empty() || rows.end > field.n_t() {
        return Err(DataError::OutOfRange {
            index: rows.end,
            bound: field.n_t(),
        });
    }
    let slab = field.data().slice(s![rows, ..]);
    if slab.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite);
    }
    match kind {
        Normalization::MinMax => {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for &v in slab.iter() {
                min = min.min(v);
                max = max.max(v);
            }
            if max == min {
                return Err(DataError::ConstantData);
            }
            Ok(Scaler::MinMax {
                min,
                max,
                fitted_on: Split::Train,
            })
        }
        Normalization::ZScore => {
            let count = slab.len() as f64;
            let mean = slab.iter().sum::<f64>() / count;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            if var == 0.0 {
                return Err(DataError::ConstantData);
            }
            Ok(Scaler::ZScore {
                mean,
                std: var.sqrt(),
                fitted_on: Split::Train,
            })
        }
    }
}

/// Spatial locations whose absolute temporal mean exceeds `eps`. Filters the
/// padding regions of irregular domains (land pixels, masked geometry) that
/// would otherwise attract sensors onto dead series.
pub fn valid_locations(field: &Field, eps: f64) -> Result<Vec<usize>, DataError> {
    let n_t = field.n_t() as f64;
    let mut valid = Vec::new();
    for p in 0..field.n_points() {
        let mean = field.series(p).sum() / n_t;
        if mean.abs() > eps {
            valid.push(p);
        }
    }
    if valid.is_empty() {
        return Err(DataError::NoValidLocations);
    }
    Ok(valid)
}

/// Randomly placed point sensors, identified by flat spatial index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorSet {
    pub indices: Vec<usize>,
    pub seed: u64,
}

impl SensorSet {
    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("seed {}\ncount {}\n", self.seed, self.indices.len());
        for p in &self.indices {
            s.push_str(&format!("{p}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let seed = lines.next()?.strip_prefix("seed ")?.trim().parse().ok()?;
        let count: usize = lines.next()?.strip_prefix("count ")?.trim().parse().ok()?;
        let indices: Vec<usize> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse())
            .collect::<Result<_, _>>()
            .ok()?;
        if indices.len() != count {
            return None;
        }
        Some(SensorSet { indices, seed })
    }
}

/// Draw `m` distinct sensors uniformly from `valid`, deterministically in the
/// master seed (stream "sensors").
pub fn place_sensors(valid: &[usize], m: usize, master_seed: u64) -> Result<SensorSet, DataError> {
    if m == 0 || m > valid.len() {
        return Err(DataError::InsufficientLocations {
            requested: m,
            available: valid.len(),
        });
    }
    let mut rng = rng::stream_rng(master_seed, "sensors");
    let indices = rng::sample_without_replacement(valid, m, &mut rng);
    Ok(SensorSet {
        indices,
        seed: master_seed,
    })
}

/// Lagged sensor windows: `inputs[k, j, s]` is sensor `s` at time `k + j`,
/// for `k` in `0..n_t - lag` and `j` in `0..lag`. The matching target is the
/// full snapshot at `k + lag`, so the window strictly precedes its target.
pub fn extract_sequences(
    field: &Field,
    sensors: &SensorSet,
    lag: usize,
) -> Result<Array3<f64>, DataError> {
    let n_t = field.n_t();
    if lag == 0 || lag >= n_t {
        return Err(DataError::LagTooLarge { lag, n_t });
    }
    for &p in &sensors.indices {
        if p >= field.n_points() {
            return Err(DataError::OutOfRange {
                index: p,
                bound: field.n_points(),
            });
        }
    }
    let n_samples = n_t - lag;
    let m = sensors.count();
    let mut inputs = Array3::zeros((n_samples, lag, m));
    for k in 0..n_samples {
        for j in 0..lag {
            for (s_i, &p) in sensors.indices.iter().enumerate() {
                inputs[(k, j, s_i)] = field.data()[(k + j, p)];
            }
        }
    }
    Ok(inputs)
}

/// Full-state targets aligned with [`extract_sequences`]: row `k` is the
/// snapshot at time `k + lag`.
pub fn extract_targets(field: &Field, lag: usize) -> Result<Array2<f64>, DataError> {
    let n_t = field.n_t();
    if lag == 0 || lag >= n_t {
        return Err(DataError::LagTooLarge { lag, n_t });
    }
    let n_samples = n_t - lag;
    let mut targets = Array2::zeros((n_samples, field.n_points()));
    for k in 0..n_samples {
        targets.row_mut(k).assign(&field.snapshot(k + lag));
    }
    Ok(targets)
}

/// One split of the lagged dataset.
#[derive(Debug, Clone)]
pub struct SequenceDataset {
    /// (n_samples, lag, m)
    pub inputs: Array3<f64>,
    /// (n_samples, n)
    pub targets: Array2<f64>,
    /// true where an input entry was removed by the subsample plan
    pub missing: Option<Array3<bool>>,
    pub lag: usize,
    pub split: Split,
    pub target_source: TargetSource,
    /// time of target row 0, i.e. global sample offset + lag
    pub first_target_time: usize,
}

impl SequenceDataset {
    pub fn n_samples(&self) -> usize {
        self.inputs.dim().0
    }

    /// Copy out the rows `idx` as one batch, preserving order.
    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (_, lag, m) = self.inputs.dim();
        let n = self.targets.dim().1;
        let mut inputs = Array3::zeros((idx.len(), lag, m));
        let mut targets = Array2::zeros((idx.len(), n));
        for (row, &k) in idx.iter().enumerate() {
            inputs.slice_mut(s![row, .., ..]).assign(&self.inputs.slice(s![k, .., ..]));
            targets.row_mut(row).assign(&self.targets.row(k));
        }
        let missing = self.missing.as_ref().map(|mask| {
            let mut mb = Array3::from_elem((idx.len(), lag, m), false);
            for (row, &k) in idx.iter().enumerate() {
                mb.slice_mut(s![row, .., ..]).assign(&mask.slice(s![k, .., ..]));
            }
            mb
        });
        Batch {
            inputs,
            targets,
            missing,
        }
    }

    pub fn full_batch(&self) -> Batch {
        let idx: Vec<usize> = (0..self.n_samples()).collect();
        self.gather(&idx)
    }
}

/// A gathered mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Array3<f64>,
    pub targets: Array2<f64>,
    pub missing: Option<Array3<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Contiguous split: first `floor(f_train * N)` samples train, the next
/// `floor(f_val * N)` validate, the remainder tests. Train and validation
/// targets come from the corrupted field, test targets from the original.
#[allow(clippy::too_many_arguments)]
pub fn split_dataset(
    inputs: &Array3<f64>,
    targets_sub: &Array2<f64>,
    targets_orig: &Array2<f64>,
    missing: Option<&Array3<bool>>,
    lag: usize,
    fractions: (f64, f64),
) -> Result<(SequenceDataset, SequenceDataset, SequenceDataset), DataError> {
    let n_samples = inputs.dim().0;
    let (f_train, f_val) = fractions;
    let n_train = (f_train * n_samples as f64).floor() as usize;
    let n_val = (f_val * n_samples as f64).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n_samples {
        return Err(DataError::TooFewSamples {
            n_samples,
            fractions,
        });
    }
    let cut = |range: std::ops::Range<usize>, split, source| {
        let targets = match source {
            TargetSource::Subsampled => targets_sub,
            TargetSource::Original => targets_orig,
        };
        SequenceDataset {
            inputs: inputs.slice(s![range.clone(), .., ..]).to_owned(),
            targets: targets.slice(s![range.clone(), ..]).to_owned(),
            missing: missing.map(|m| m.slice(s![range.clone(), .., ..]).to_owned()),
            lag,
            split,
            target_source: source,
            first_target_time: range.start + lag,
        }
    };
    Ok((
        cut(0..n_train, Split::Train, TargetSource::Subsampled),
        cut(n_train..n_train + n_val, Split::Val, TargetSource::Subsampled),
        cut(n_train + n_val..n_samples, Split::Test, TargetSource::Original),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn coded_field(n_x: usize, n_y: usize, n_t: usize) -> Field {
        // value encodes its own index, so extraction bugs show up exactly
        Field::from_fn("coded", (n_x, n_y, n_t), |x, y, t| {
            (x * n_y + y) as f64 * 1000.0 + t as f64
        })
        .unwrap()
    }

    #[test]
    fn indexing_convention_round_trip() {
        let f = coded_field(3, 4, 5);
        assert_eq!(f.value(2, 1, 3), (2 * 4 + 1) as f64 * 1000.0 + 3.0);
        assert_eq!(f.snapshot(3)[2 * 4 + 1], f.value(2, 1, 3));
        assert_eq!(f.series(2 * 4 + 1)[3], f.value(2, 1, 3));
        let g = f.snapshot_grid(3);
        assert_eq!(g[(2, 1)], f.value(2, 1, 3));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("field_rt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.cssf");
        let f = Field::from_fn("waves", (4, 3, 7), |x, y, t| {
            ((x as f64) * 0.37 + (y as f64) * 1.11 - (t as f64) * 0.053).sin() * 1e3
        })
        .unwrap();
        f.write_binary(&path).unwrap();
        let g = Field::read_binary(&path).unwrap();
        assert_eq!(g.name, "waves");
        assert_eq!(g.dims(), f.dims());
        assert_eq!(g.data(), f.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_non_finite() {
        let r = Field::from_fn("bad", (2, 2, 2), |x, _, _| {
            if x == 1 {
                f64::NAN
            } else {
                0.0
            }
        });
        assert!(matches!(r, Err(FieldError::NonFinite(1, _, _))));
    }

    #[test]
    fn scaler_matches_independent_scan() {
        let f = coded_field(3, 3, 20);
        let rows = train_time_rows(20, 4, 0.7);
        // oracle: brute-force scan over the raw 3D loops, restricted to rows
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in rows.clone() {
            for x in 0..3 {
                for y in 0..3 {
                    lo = lo.min(f.value(x, y, t));
                    hi = hi.max(f.value(x, y, t));
                }
            }
        }
        let sc = fit_scaler(&f, rows, Normalization::MinMax).unwrap();
        match sc {
            Scaler::MinMax { min, max, fitted_on } => {
                assert_eq!(min, lo);
                assert_eq!(max, hi);
                assert_eq!(fitted_on, Split::Train);
            }
            _ => panic!("wrong family"),
        }
    }

    #[test]
    fn scaler_ignores_rows_outside_train() {
        let mut f = coded_field(3, 3, 20);
        let rows = train_time_rows(20, 4, 0.7);
        let sc1 = fit_scaler(&f, rows.clone(), Normalization::MinMax).unwrap();
        // poke every value at and after the range end
        for t in rows.end..20 {
            for x in 0..3 {
                for y in 0..3 {
                    let v = f.value(x, y, t);
                    f.set_value(x, y, t, v * 17.0 + 1e6);
                }
            }
        }
        let sc2 = fit_scaler(&f, rows, Normalization::MinMax).unwrap();
        assert_eq!(sc1, sc2);
    }

    #[test]
    fn scaler_round_trip() {
        let f = coded_field(2, 5, 30);
        for kind in [Normalization::MinMax, Normalization::ZScore] {
            let sc = fit_scaler(&f, 0..21, kind).unwrap();
            for &v in [0.0, 3.5, -120.0, 9001.0, 1e-7].iter() {
                assert_abs_diff_eq!(sc.invert_scalar(sc.apply_scalar(v)), v, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn scaler_rejects_constant_data() {
        let f = Field::from_fn("flat", (2, 2, 5), |_, _, _| 3.25).unwrap();
        assert!(matches!(
            fit_scaler(&f, 0..5, Normalization::MinMax),
            Err(DataError::ConstantData)
        ));
        assert!(matches!(
            fit_scaler(&f, 0..5, Normalization::ZScore),
            Err(DataError::ConstantData)
        ));
    }

    #[test]
    fn valid_locations_match_per_pixel_means() {
        // column y = 0 is identically zero, the rest alternate sign by t but
        // keep a nonzero mean
        let f = Field::from_fn("masked", (4, 4, 8), |_, y, t| {
            if y == 0 {
                0.0
            } else {
                1.0 + 0.1 * ((t % 2) as f64) + y as f64
            }
        })
        .unwrap();
        let valid = valid_locations(&f, EPS_VALID).unwrap();
        // oracle: direct mean over the accessor
        let mut expect = Vec::new();
        for p in 0..16 {
            let (x, y) = (p / 4, p % 4);
            let mean: f64 = (0..8).map(|t| f.value(x, y, t)).sum::<f64>() / 8.0;
            if mean.abs() > EPS_VALID {
                expect.push(p);
            }
        }
        assert_eq!(valid, expect);
        assert!(valid.iter().all(|p| p % 4 != 0));
    }

    #[test]
    fn valid_locations_can_be_empty() {
        let f = Field::from_fn("zero-mean", (2, 2, 2), |_, _, t| {
            if t == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .unwrap();
        assert!(matches!(
            valid_locations(&f, EPS_VALID),
            Err(DataError::NoValidLocations)
        ));
    }

    #[test]
    fn sensors_are_distinct_valid_and_deterministic() {
        let valid: Vec<usize> = (0..100).step_by(3).collect();
        let a = place_sensors(&valid, 7, 915).unwrap();
        let b = place_sensors(&valid, 7, 915).unwrap();
        assert_eq!(a, b);
        let mut seen = a.indices.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7);
        assert!(a.indices.iter().all(|p| valid.contains(p)));
        let c = place_sensors(&valid, 7, 916).unwrap();
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn sensor_text_round_trip() {
        let s = SensorSet {
            indices: vec![9, 2, 44],
            seed: 7,
        };
        assert_eq!(SensorSet::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn sequences_pick_exact_entries() {
        let f = coded_field(3, 3, 12);
        let sensors = SensorSet {
            indices: vec![4, 0, 7],
            seed: 0,
        };
        let lag = 5;
        let inputs = extract_sequences(&f, &sensors, lag).unwrap();
        assert_eq!(inputs.dim(), (12 - 5, 5, 3));
        for k in 0..7 {
            for j in 0..5 {
                for (s_i, &p) in sensors.indices.iter().enumerate() {
                    assert_eq!(inputs[(k, j, s_i)], p as f64 * 1000.0 + (k + j) as f64);
                }
            }
        }
        let targets = extract_targets(&f, lag).unwrap();
        assert_eq!(targets.dim(), (7, 9));
        for k in 0..7 {
            assert_eq!(targets.row(k), f.snapshot(k + lag));
        }
    }

    #[test]
    fn lag_bounds_are_enforced() {
        let f = coded_field(2, 2, 6);
        let sensors = SensorSet {
            indices: vec![0],
            seed: 0,
        };
        assert!(extract_sequences(&f, &sensors, 6).is_err());
        assert!(extract_sequences(&f, &sensors, 0).is_err());
        assert!(extract_sequences(&f, &sensors, 5).is_ok());
    }

    #[test]
    fn split_sizes_and_order() {
        let f = coded_field(2, 2, 103);
        let sensors = SensorSet {
            indices: vec![1, 3],
            seed: 0,
        };
        let lag = 3;
        let inputs = extract_sequences(&f, &sensors, lag).unwrap();
        let t_sub = extract_targets(&f, lag).unwrap();
        let t_orig = t_sub.mapv(|v| v + 0.5); // distinguishable source
        let (tr, va, te) = split_dataset(&inputs, &t_sub, &t_orig, None, lag, (0.7, 0.2)).unwrap();
        let n = 100;
        assert_eq!(tr.n_samples(), (0.7f64 * n as f64).floor() as usize);
        assert_eq!(va.n_samples(), (0.2f64 * n as f64).floor() as usize);
        assert_eq!(te.n_samples(), n - tr.n_samples() - va.n_samples());
        // partition in temporal order: reassemble the input tensor
        assert_eq!(tr.inputs[(0, 0, 0)], inputs[(0, 0, 0)]);
        assert_eq!(
            va.inputs[(0, 0, 0)],
            inputs[(tr.n_samples(), 0, 0)]
        );
        assert_eq!(
            te.inputs[(0, 0, 0)],
            inputs[(tr.n_samples() + va.n_samples(), 0, 0)]
        );
        // target sources
        assert_eq!(tr.targets[(0, 0)], t_sub[(0, 0)]);
        assert_eq!(te.targets[(0, 0)], t_orig[(tr.n_samples() + va.n_samples(), 0)]);
        assert_eq!(te.first_target_time, tr.n_samples() + va.n_samples() + lag);
        // final sample of test targets the final snapshot
        let last = te.n_samples() - 1;
        assert_eq!(
            te.targets[(last, 0)],
            t_orig[(n - 1, 0)]
        );
    }

    #[test]
    fn split_rejects_too_few_samples() {
        let f = coded_field(2, 2, 8);
        let sensors = SensorSet {
            indices: vec![0],
            seed: 0,
        };
        let inputs = extract_sequences(&f, &sensors, 4).unwrap();
        let t = extract_targets(&f, 4).unwrap();
        assert!(matches!(
            split_dataset(&inputs, &t, &t, None, 4, (0.7, 0.2)),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn gather_preserves_rows_and_masks() {
        let f = coded_field(2, 2, 20);
        let sensors = SensorSet {
            indices: vec![2, 1],
            seed: 0,
        };
        let inputs = extract_sequences(&f, &sensors, 4).unwrap();
        let targets = extract_targets(&f, 4).unwrap();
        let mut missing = Array3::from_elem(inputs.dim(), false);
        missing[(5, 1, 0)] = true;
        let ds = SequenceDataset {
            inputs: inputs.clone(),
            targets: targets.clone(),
            missing: Some(missing),
            lag: 4,
            split: Split::Train,
            target_source: TargetSource::Subsampled,
            first_target_time: 4,
        };
        let b = ds.gather(&[5, 0]);
        assert_eq!(b.len(), 2);
        assert_eq!(b.inputs[(0, 1, 0)], inputs[(5, 1, 0)]);
        assert_eq!(b.inputs[(1, 3, 1)], inputs[(0, 3, 1)]);
        assert_eq!(b.targets.row(0), targets.row(5));
        assert!(b.missing.as_ref().unwrap()[(0, 1, 0)]);
        assert!(!b.missing.as_ref().unwrap()[(1, 1, 0)]);
    }
}
