//! Reconstruction quality metrics and test-set evaluation. Everything here
//! works in physical units: predictions and targets are un-normalized with
//! the training scaler before any number is computed.

use ndarray::{Array2, ArrayView2};
use thiserror::Error;

use crate::bpdn::{Recovery, SolveError};
use crate::field::{Scaler, SequenceDataset};
use crate::net::{self, Mode, ModelParams, NetError};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("reference snapshot {t} has zero norm")]
    ZeroReference { t: usize },
    #[error("image {rows}x{cols} too small for ssim (needs both dims >= 3)")]
    ImageTooSmall { rows: usize, cols: usize },
    #[error("data range must be positive, got {0}")]
    ZeroRange(f64),
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Per-snapshot relative energy of the error, averaged over time:
/// mean_t of ||x_hat(t) - x(t)||^2 / ||x(t)||^2.
pub fn normalized_error(pred: &Array2<f64>, truth: &Array2<f64>) -> Result<f64, MetricError> {
    let series = normalized_error_series(pred, truth)?;
    Ok(series.iter().sum::<f64>() / series.len() as f64)
}

/// The same ratio for each snapshot separately.
pub fn normalized_error_series(
    pred: &Array2<f64>,
    truth: &Array2<f64>,
) -> Result<Vec<f64>, MetricError> {
    if pred.dim() != truth.dim() {
        return Err(MetricError::ShapeMismatch {
            a: pred.dim(),
            b: truth.dim(),
        });
    }
    let mut out = Vec::with_capacity(truth.nrows());
    for t in 0..truth.nrows() {
        let mut err = 0.0;
        let mut ref_sq = 0.0;
        for (p, x) in pred.row(t).iter().zip(truth.row(t)) {
            err += (p - x) * (p - x);
            ref_sq += x * x;
        }
        if ref_sq == 0.0 {
            return Err(MetricError::ZeroReference { t });
        }
        out.push(err / ref_sq);
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB against a caller-supplied dynamic range.
/// A perfect reconstruction returns positive infinity.
pub fn psnr(pred: ArrayView2<f64>, truth: ArrayView2<f64>, data_range: f64) -> Result<f64, MetricError> {
    if pred.dim() != truth.dim() {
        return Err(MetricError::ShapeMismatch {
            a: pred.dim(),
            b: truth.dim(),
        });
    }
    if !(data_range > 0.0) {
        return Err(MetricError::ZeroRange(data_range));
    }
    let n = pred.len() as f64;
    let mse: f64 = pred
        .iter()
        .zip(truth.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_kernel(win: usize, sigma: f64) -> Vec<f64> {
    let half = (win as isize - 1) / 2;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable convolution with a symmetric 1d kernel applied along
/// both axes.
fn conv_valid_sep(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (rows, cols) = img.dim();
    let win = k.len();
    let mut horiz = Array2::zeros((rows, cols - win + 1));
    for i in 0..rows {
        for j in 0..cols - win + 1 {
            let mut acc = 0.0;
            for (u, &kv) in k.iter().enumerate() {
                acc += img[(i, j + u)] * kv;
            }
            horiz[(i, j)] = acc;
        }
    }
    let mut out = Array2::zeros((rows - win + 1, cols - win + 1));
    for i in 0..rows - win + 1 {
        for j in 0..cols - win + 1 {
            let mut acc = 0.0;
            for (u, &kv) in k.iter().enumerate() {
                acc += horiz[(i + u, j)] * kv;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Mean structural similarity over an 11x11 gaussian window (sigma 1.5),
/// evaluated in valid mode. Images smaller than the window get the largest
/// odd window that fits; images with a side under 3 are rejected.
pub fn ssim(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    data_range: f64,
) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch { a: a.dim(), b: b.dim() });
    }
    if !(data_range > 0.0) {
        return Err(MetricError::ZeroRange(data_range));
    }
    let (rows, cols) = a.dim();
    let min_dim = rows.min(cols);
    if min_dim < 3 {
        return Err(MetricError::ImageTooSmall { rows, cols });
    }
    let mut win = SSIM_WINDOW.min(min_dim);
    if win % 2 == 0 {
        win -= 1;
    }
    let k = gaussian_kernel(win, SSIM_SIGMA);
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = conv_valid_sep(&a, &k);
    let mu_b = conv_valid_sep(&b, &k);
    let mu_aa = conv_valid_sep(&(&a * &a), &k);
    let mu_bb = conv_valid_sep(&(&b * &b), &k);
    let mu_ab = conv_valid_sep(&(&a * &b), &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut sum = 0.0;
    for ((i, j), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[(i, j)];
        let va = mu_aa[(i, j)] - ma * ma;
        let vb = mu_bb[(i, j)] - mb * mb;
        let cab = mu_ab[(i, j)] - ma * mb;
        sum += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(sum / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotMetrics {
    /// absolute time index in the field
    pub time: usize,
    pub normalized_error: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregate quality of a reconstruction over the test snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub n_snapshots: usize,
    pub normalized_error_mean: f64,
    pub normalized_error_last: f64,
    pub psnr_mean_db: f64,
    pub psnr_last_db: f64,
    pub ssim_mean: f64,
    pub ssim_last: f64,
    pub mse_last: f64,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        format!(
            "n_snapshots {}\nnormalized_error_mean {}\nnormalized_error_last {}\npsnr_mean_db {}\npsnr_last_db {}\nssim_mean {}\nssim_last {}\nmse_last {}\nlpips unavailable\n",
            self.n_snapshots,
            self.normalized_error_mean,
            self.normalized_error_last,
            self.psnr_mean_db,
            self.psnr_last_db,
            self.ssim_mean,
            self.ssim_last,
            self.mse_last,
        )
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.trim().split_once(' ') {
                map.insert(k.to_string(), v.trim().to_string());
            }
        }
        let f = |k: &str| map.get(k).and_then(|v| v.parse::<f64>().ok());
        Some(MetricReport {
            n_snapshots: map.get("n_snapshots")?.parse().ok()?,
            normalized_error_mean: f("normalized_error_mean")?,
            normalized_error_last: f("normalized_error_last")?,
            psnr_mean_db: f("psnr_mean_db")?,
            psnr_last_db: f("psnr_last_db")?,
            ssim_mean: f("ssim_mean")?,
            ssim_last: f("ssim_last")?,
            mse_last: f("mse_last")?,
        })
    }
}

/// Per-snapshot detail plus the final snapshot grids, for plots and reports.
#[derive(Debug, Clone)]
pub struct EvalDetail {
    pub per_snapshot: Vec<SnapshotMetrics>,
    pub last_pred_grid: Array2<f64>,
    pub last_true_grid: Array2<f64>,
}

fn to_grid(row: ndarray::ArrayView1<f64>, n_x: usize, n_y: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_x, n_y), |(x, y)| row[x * n_y + y])
}

/// Run the model over the test sequences and score the reconstructions in
/// physical units. The dynamic range for psnr and ssim comes from the test
/// ground truth. With `recovery` set the gappy windows pass through the l1
/// stage first, exactly as in training.
pub fn evaluate(
    params: &ModelParams,
    recovery: Option<&Recovery>,
    ds: &SequenceDataset,
    scaler: &Scaler,
    n_x: usize,
    n_y: usize,
) -> Result<(MetricReport, EvalDetail), MetricError> {
    let batch = ds.full_batch();
    let inputs = match recovery {
        Some(r) => r.recover_batch(&batch.inputs, batch.missing.as_ref())?.0,
        None => batch.inputs.clone(),
    };
    let x_hat_norm = net::forward(&inputs, params, Mode::Eval, 0)?;
    let pred = scaler.invert_array2(&x_hat_norm);
    let truth = scaler.invert_array2(&batch.targets);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in truth.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data_range = hi - lo;
    if !(data_range > 0.0) {
        return Err(MetricError::ZeroRange(data_range));
    }

    let ne = normalized_error_series(&pred, &truth)?;
    let n_snapshots = ne.len();
    let mut per_snapshot = Vec::with_capacity(n_snapshots);
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for t in 0..n_snapshots {
        let pg = to_grid(pred.row(t), n_x, n_y);
        let tg = to_grid(truth.row(t), n_x, n_y);
        let p = psnr(pg.view(), tg.view(), data_range)?;
        let s = ssim(pg.view(), tg.view(), data_range)?;
        psnr_sum += p;
        ssim_sum += s;
        per_snapshot.push(SnapshotMetrics {
            time: ds.first_target_time + t,
            normalized_error: ne[t],
            psnr_db: p,
            ssim: s,
        });
    }
    let last = n_snapshots - 1;
    let mse_last: f64 = pred
        .row(last)
        .iter()
        .zip(truth.row(last))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.ncols() as f64;
    let report = MetricReport {
        n_snapshots,
        normalized_error_mean: ne.iter().sum::<f64>() / n_snapshots as f64,
        normalized_error_last: ne[last],
        psnr_mean_db: psnr_sum / n_snapshots as f64,
        psnr_last_db: per_snapshot[last].psnr_db,
        ssim_mean: ssim_sum / n_snapshots as f64,
        ssim_last: per_snapshot[last].ssim,
        mse_last,
    };
    let detail = EvalDetail {
        per_snapshot,
        last_pred_grid: to_grid(pred.row(last), n_x, n_y),
        last_true_grid: to_grid(truth.row(last), n_x, n_y),
    };
    Ok((report, detail))
}
