//! Training loss and loop. The loss switches form on the SNR of the current
//! batch: above 0 dB it spends a capped inverse-SNR term, at or below it
//! penalizes the (negative) SNR directly, pushing hardest on the windows the
//! recovery stage handled worst. MSE, an l1 magnitude term and an l2
//! parameter penalty complete it.

use ndarray::Array2;
use thiserror::Error;

use crate::bpdn::{Recovery, SolveError};
use crate::field::{Batch, SequenceDataset};
use crate::net::{self, Mode, ModelParams, NetError};
use crate::rng;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const LN10: f64 = std::f64::consts::LN_10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: String,
        detail: String,
    },
    #[error("non-finite optimizer update at step {step}")]
    NonFiniteUpdate { step: u64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("dataset is empty ({which})")]
    EmptyDataset { which: &'static str },
}

/// Coefficients and switches of the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_l2: f64,
    pub lambda_l1: f64,
    pub lambda_snr: f64,
    /// coefficient of the l2 parameter penalty; the penalty lives inside the
    /// loss, so its gradient flows through `backward` rather than through a
    /// separate optimizer decay term
    pub weight_decay: f64,
    pub epsilon: f64,
    /// ceiling on the inverse-SNR term on the positive branch
    pub snr_cap: f64,
    /// measure signal power on the prediction instead of the target
    pub snr_from_prediction: bool,
    /// l1 term on the residual instead of on the prediction magnitude
    pub mae_on_residual: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_l2: 1.0,
            lambda_l1: 0.0,
            lambda_snr: 0.0,
            weight_decay: 0.0,
            epsilon: 1e-8,
            snr_cap: 100.0,
            snr_from_prediction: false,
            mae_on_residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub snr_db: f64,
    pub snr_term: f64,
    pub mse_term: f64,
    pub mae_term: f64,
    pub reg_term: f64,
}

/// Batch SNR in dB: signal power over residual power, epsilon-guarded.
pub fn compute_snr(x_hat: &Array2<f64>, x: &Array2<f64>, w: &LossWeights) -> f64 {
    let signal = if w.snr_from_prediction { x_hat } else { x };
    let num: f64 = signal.iter().map(|v| v * v).sum();
    let den: f64 = x_hat
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        + w.epsilon;
    10.0 * (num / den).log10()
}

/// Loss value only. `params_sq_norm` carries the squared l2 norm of all
/// trainable parameters.
pub fn compute_loss(
    x_hat: &Array2<f64>,
    x: &Array2<f64>,
    params_sq_norm: f64,
    w: &LossWeights,
) -> LossParts {
    loss_inner(x_hat, x, params_sq_norm, w, None)
}

/// Loss value and its gradient with respect to the prediction.
pub fn loss_with_grad(
    x_hat: &Array2<f64>,
    x: &Array2<f64>,
    params_sq_norm: f64,
    w: &LossWeights,
) -> (LossParts, Array2<f64>) {
    let mut grad = Array2::zeros(x_hat.raw_dim());
    let parts = loss_inner(x_hat, x, params_sq_norm, w, Some(&mut grad));
    (parts, grad)
}

fn loss_inner(
    x_hat: &Array2<f64>,
    x: &Array2<f64>,
    params_sq_norm: f64,
    w: &LossWeights,
    mut grad: Option<&mut Array2<f64>>,
) -> LossParts {
    assert_eq!(x_hat.dim(), x.dim(), "prediction/target shape mismatch");
    let n_el = x_hat.len() as f64;
    let resid = x_hat - x;
    let err_sq: f64 = resid.iter().map(|v| v * v).sum();
    let den = err_sq + w.epsilon;
    let num: f64 = if w.snr_from_prediction {
        x_hat.iter().map(|v| v * v).sum()
    } else {
        x.iter().map(|v| v * v).sum()
    };
    let snr_db = 10.0 * (num / den).log10();

    // d snr / d x_hat, needed on both branches
    let dsnr = |i: (usize, usize)| -> f64 {
        let r = resid[i];
        let mut d = -(10.0 / LN10) * 2.0 * r / den;
        if w.snr_from_prediction {
            d += (10.0 / LN10) * 2.0 * x_hat[i] / num;
        }
        d
    };

    let (snr_term, snr_grad_scale) = if snr_db > 0.0 {
        let inv = 1.0 / (snr_db + w.epsilon);
        if inv < w.snr_cap {
            // d/dsnr of 1/(snr+eps)
            (w.lambda_snr * inv, -w.lambda_snr * inv * inv)
        } else {
            (w.lambda_snr * w.snr_cap, 0.0)
        }
    } else {
        (-w.lambda_snr * snr_db, -w.lambda_snr)
    };

    let mse = err_sq / n_el;
    let mae_src: &Array2<f64> = if w.mae_on_residual { &resid } else { x_hat };
    let mae: f64 = mae_src.iter().map(|v| v.abs()).sum::<f64>() / n_el;
    let reg = w.weight_decay * params_sq_norm;
    let total = snr_term + w.lambda_l2 * mse + w.lambda_l1 * mae + reg;

    if let Some(g) = grad.as_deref_mut() {
        for i in 0..x_hat.nrows() {
            for j in 0..x_hat.ncols() {
                let mut d = snr_grad_scale * dsnr((i, j));
                d += w.lambda_l2 * 2.0 * resid[(i, j)] / n_el;
                let s = mae_src[(i, j)];
                d += w.lambda_l1 * s.signum() * if s == 0.0 { 0.0 } else { 1.0 } / n_el;
                g[(i, j)] = d;
            }
        }
    }

    LossParts {
        total,
        snr_db,
        snr_term,
        mse_term: w.lambda_l2 * mse,
        mae_term: w.lambda_l1 * mae,
        reg_term: reg,
    }
}

/// Adam with bias correction. Moment buffers mirror the parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One optimizer step. `weight_decay` here is the decoupled form, applied to
/// the pre-update parameter value outside the moment estimates; training
/// passes zero because the loss already carries the parameter penalty.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let mut slices = params.tensors_mut();
    let gts = grads.tensors();
    for (k, (theta, g)) in slices.iter_mut().zip(gts).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for j in 0..g.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = theta[j];
            let next = old - lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * old);
            if !next.is_finite() {
                return Err(TrainError::NonFiniteUpdate { step: t });
            }
            theta[j] = next;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    /// halve after `epoch_step` validations without relative improvement
    Plateau,
    /// halve every `epoch_step` epochs unconditionally
    Step,
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchedulerKind::Plateau => write!(f, "plateau"),
            SchedulerKind::Step => write!(f, "step"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchedulerState {
    pub kind: SchedulerKind,
    pub factor: f64,
    pub epoch_step: usize,
    best: f64,
    since: usize,
}

impl SchedulerState {
    pub fn new(kind: SchedulerKind, epoch_step: usize) -> Self {
        SchedulerState {
            kind,
            factor: 0.5,
            epoch_step,
            best: f64::INFINITY,
            since: 0,
        }
    }
}

const PLATEAU_REL: f64 = 1e-6;

/// Advance the schedule after one validation; mutates `lr` in place.
pub fn scheduler_step(state: &mut SchedulerState, lr: &mut f64, epoch: usize, val_loss: f64) {
    match state.kind {
        SchedulerKind::Plateau => {
            let improved = if state.best.is_finite() {
                val_loss < state.best - PLATEAU_REL * state.best.abs()
            } else {
                val_loss < state.best
            };
            if improved {
                state.best = val_loss;
                state.since = 0;
            } else {
                state.since += 1;
                if state.since >= state.epoch_step {
                    *lr *= state.factor;
                    state.since = 0;
                }
            }
        }
        SchedulerKind::Step => {
            if state.epoch_step > 0 && (epoch + 1) % state.epoch_step == 0 {
                *lr *= state.factor;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// validations without improvement before stopping
    pub patience: usize,
    pub epoch_step: usize,
    pub scheduler: SchedulerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 20,
            epoch_step: 10,
            scheduler: SchedulerKind::Plateau,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub mean_snr_db: f64,
}

pub fn history_to_tsv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\tlr\tmean_snr_db\n");
    for r in history {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.mean_snr_db
        ));
    }
    out
}

#[derive(Debug)]
pub struct FitResult {
    /// parameters of the best validation epoch
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn prepare_inputs(
    batch: &Batch,
    recovery: Option<&Recovery>,
) -> Result<ndarray::Array3<f64>, TrainError> {
    match recovery {
        Some(r) => {
            let (recovered, _) = r.recover_batch(&batch.inputs, batch.missing.as_ref())?;
            Ok(recovered)
        }
        None => Ok(batch.inputs.clone()),
    }
}

/// Minibatch training with per-epoch validation, plateau or step scheduling
/// and early stopping. Returns the best-validation parameters, not the last.
/// With `recovery` set, every batch passes through the l1 stage before the
/// network sees it; without it the raw (gappy) windows go straight in.
pub fn fit(
    params: ModelParams,
    train_ds: &SequenceDataset,
    val_ds: &SequenceDataset,
    recovery: Option<&Recovery>,
    tc: &TrainConfig,
    lw: &LossWeights,
) -> Result<FitResult, TrainError> {
    if train_ds.n_samples() == 0 {
        return Err(TrainError::EmptyDataset { which: "train" });
    }
    if val_ds.n_samples() == 0 {
        return Err(TrainError::EmptyDataset { which: "validation" });
    }
    let mut params = params;
    let mut adam = AdamState::new(&params);
    let mut lr = tc.lr;
    let mut sched = SchedulerState::new(tc.scheduler, tc.epoch_step);
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut since_improve = 0usize;
    let mut stopped_early = false;
    let mut history = Vec::new();

    // recovery does not depend on the weights, so the validation inputs can
    // be prepared once
    let val_batch = val_ds.full_batch();
    let val_inputs = prepare_inputs(&val_batch, recovery)?;

    let n = train_ds.n_samples();
    let n_batches = n.div_ceil(tc.batch_size);
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream_rng_n(tc.seed, "shuffle", epoch as u64);
        rng::shuffle_in_place(&mut order, &mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut snr_sum = 0.0;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = train_ds.gather(chunk);
            let inputs = prepare_inputs(&batch, recovery)?;
            let dropout_seed =
                rng::stream_seed(tc.seed, "dropout") ^ (epoch * n_batches + bi) as u64;
            let (grads, parts) =
                net::backward(&inputs, &batch.targets, &params, lw, Mode::Train, dropout_seed)?;
            if !parts.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: format!("{bi} ({} samples)", chunk.len()),
                    detail: format!("{parts:?}"),
                });
            }
            adam_step(&mut params, &grads, &mut adam, lr, 0.0)?;
            loss_sum += parts.total * chunk.len() as f64;
            snr_sum += parts.snr_db * chunk.len() as f64;
        }
        let train_loss = loss_sum / n as f64;
        let mean_snr_db = snr_sum / n as f64;

        let x_hat_val = net::forward(&val_inputs, &params, Mode::Eval, 0)?;
        let val_parts = compute_loss(&x_hat_val, &val_batch.targets, params.sq_norm(), lw);
        let val_loss = val_parts.total;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                batch: "validation".into(),
                detail: format!("{val_parts:?}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            mean_snr_db,
        });
        log::debug!(
            "epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e} lr {lr:.3e} snr {mean_snr_db:.2} dB"
        );

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        scheduler_step(&mut sched, &mut lr, epoch, val_loss);
        if since_improve >= tc.patience {
            stopped_early = true;
            log::info!("early stop at epoch {epoch} (best {best_val:.6e} at {best_epoch})");
            break;
        }
    }

    Ok(FitResult {
        params: best_params,
        history,
        best_val_loss: best_val,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Split, TargetSource};
    use crate::net::{init_params, FinalActivation, ModelSpec};
    use ndarray::Array3;

    #[test]
    fn snr_pins() {
        let w = LossWeights::default();
        let x = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        // exact prediction: num = 1, den = 1e-8 -> 80 dB
        let snr = compute_snr(&x, &x, &w);
        assert!((snr - 80.0).abs() < 1e-9, "snr = {snr}");
        // residual power equals signal power -> ~0 dB
        let x_hat = Array2::from_shape_vec((1, 2), vec![1.6, 0.8]).unwrap();
        let x2 = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let snr2 = compute_snr(&x_hat, &x2, &w);
        assert!(snr2.abs() < 1e-6, "snr2 = {snr2}");
    }

    #[test]
    fn positive_branch_uses_capped_inverse() {
        let w = LossWeights {
            lambda_snr: 2.0,
            lambda_l2: 0.0,
            ..LossWeights::default()
        };
        let x = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let parts = compute_loss(&x, &x, 0.0, &w);
        assert!((parts.snr_db - 80.0).abs() < 1e-9);
        assert!((parts.snr_term - 2.0 / (80.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(parts.total, parts.snr_term);
    }

    #[test]
    fn tiny_positive_snr_hits_the_cap() {
        let w = LossWeights {
            lambda_snr: 1.0,
            lambda_l2: 0.0,
            ..LossWeights::default()
        };
        // snr barely above zero: 1/(snr+eps) >= 100 engages the cap
        let x = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        // need 0 < snr < 1/100: residual^2 slightly under signal^2
        let x_hat = Array2::from_shape_vec((1, 1), vec![2.0 - 1e-4]).unwrap();
        let parts = compute_loss(&x_hat, &x, 0.0, &w);
        assert!(parts.snr_db > 0.0 && parts.snr_db < 0.01, "snr {}", parts.snr_db);
        assert_eq!(parts.snr_term, 100.0);
        // and the capped term contributes no gradient
        let (_, g) = loss_with_grad(&x_hat, &x, 0.0, &w);
        assert_eq!(g[(0, 0)], 0.0);
    }

    #[test]
    fn negative_branch_penalizes_linearly() {
        let w = LossWeights {
            lambda_snr: 3.0,
            lambda_l2: 0.0,
            ..LossWeights::default()
        };
        let x = Array2::from_shape_vec((1, 1), vec![0.1]).unwrap();
        let x_hat = Array2::from_shape_vec((1, 1), vec![5.0]).unwrap();
        let parts = compute_loss(&x_hat, &x, 0.0, &w);
        assert!(parts.snr_db < 0.0);
        assert!((parts.snr_term - (-3.0 * parts.snr_db)).abs() < 1e-12);
    }

    #[test]
    fn mse_mae_and_reg_terms() {
        let w = LossWeights {
            lambda_l2: 2.0,
            lambda_l1: 3.0,
            lambda_snr: 0.0,
            weight_decay: 0.5,
            ..LossWeights::default()
        };
        let x = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let x_hat = Array2::from_shape_vec((1, 2), vec![2.0, -1.0]).unwrap();
        let parts = compute_loss(&x_hat, &x, 10.0, &w);
        // mse = (1 + 4)/2, mae = (2 + 1)/2, reg = 0.5 * 10
        assert!((parts.mse_term - 2.0 * 2.5).abs() < 1e-12);
        assert!((parts.mae_term - 3.0 * 1.5).abs() < 1e-12);
        assert!((parts.reg_term - 5.0).abs() < 1e-12);
        let w2 = LossWeights {
            mae_on_residual: true,
            ..w
        };
        let parts2 = compute_loss(&x_hat, &x, 0.0, &w2);
        // residuals (1, -2): mae = 1.5
        assert!((parts2.mae_term - 3.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn loss_grad_matches_fd_on_both_branches() {
        for (shift, name) in [(1e-3, "positive"), (40.0, "negative")] {
            let w = LossWeights {
                lambda_l2: 0.8,
                lambda_l1: 0.4,
                lambda_snr: 0.6,
                snr_from_prediction: shift > 1.0,
                mae_on_residual: shift > 1.0,
                ..LossWeights::default()
            };
            let x = Array2::from_shape_vec((2, 3), vec![0.4, -0.7, 1.1, 0.2, -0.5, 0.9]).unwrap();
            let x_hat = &x + shift * &Array2::from_shape_vec(
                (2, 3),
                vec![0.11, -0.07, 0.13, -0.21, 0.17, 0.05],
            )
            .unwrap();
            let (_, g) = loss_with_grad(&x_hat, &x, 0.0, &w);
            let h = 1e-6;
            for i in 0..2 {
                for j in 0..3 {
                    let mut xp = x_hat.clone();
                    xp[(i, j)] += h;
                    let mut xm = x_hat.clone();
                    xm[(i, j)] -= h;
                    let fd = (compute_loss(&xp, &x, 0.0, &w).total
                        - compute_loss(&xm, &x, 0.0, &w).total)
                        / (2.0 * h);
                    let rel = (fd - g[(i, j)]).abs() / fd.abs().max(g[(i, j)].abs()).max(1e-8);
                    assert!(rel < 1e-5, "{name} branch ({i},{j}): fd {fd} vs {}", g[(i, j)]);
                }
            }
        }
    }

    fn one_param_model() -> ModelParams {
        let spec = ModelSpec {
            input_dim: 1,
            hidden_size: 1,
            hidden_layers: 1,
            d1: 1,
            d2: 1,
            output_dim: 1,
            split_input_weights: false,
            dropout: 0.0,
            final_activation: FinalActivation::Linear,
        };
        init_params(&spec, 4)
    }

    #[test]
    fn adam_first_step_is_sign_descent() {
        let mut params = one_param_model();
        let flat0 = params.to_flat();
        let mut grads = crate::net::zeros_like(&params);
        let gvals: Vec<f64> = (0..flat0.len()).map(|i| (i as f64 - 3.0) * 0.37).collect();
        grads.assign_flat(&gvals);
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, 0.01, 0.0).unwrap();
        let flat1 = params.to_flat();
        for ((a, b), g) in flat0.iter().zip(&flat1).zip(&gvals) {
            // from zero moments the bias-corrected update is g/(|g| + eps)
            let expect = a - 0.01 * g / (g.abs() + ADAM_EPS);
            assert!((b - expect).abs() < 1e-15, "{b} vs {expect}");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_toward_zero() {
        let mut params = one_param_model();
        let n = params.n_params();
        params.assign_flat(&vec![1.0; n]);
        let grads = crate::net::zeros_like(&params);
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, 0.1, 0.3).unwrap();
        for v in params.to_flat() {
            // zero gradient: theta -> theta (1 - lr * wd)
            assert!((v - (1.0 - 0.1 * 0.3)).abs() < 1e-15);
        }
    }

    #[test]
    fn plateau_halves_after_stall_and_step_halves_on_schedule() {
        let mut st = SchedulerState::new(SchedulerKind::Plateau, 2);
        let mut lr = 1.0;
        scheduler_step(&mut st, &mut lr, 0, 1.0); // improvement from inf
        assert_eq!(lr, 1.0);
        scheduler_step(&mut st, &mut lr, 1, 1.0); // stall 1
        assert_eq!(lr, 1.0);
        scheduler_step(&mut st, &mut lr, 2, 1.0); // stall 2 -> halve
        assert_eq!(lr, 0.5);
        scheduler_step(&mut st, &mut lr, 3, 0.4); // fresh best resets
        assert_eq!(lr, 0.5);

        let mut st2 = SchedulerState::new(SchedulerKind::Step, 3);
        let mut lr2 = 0.8;
        for epoch in 0..6 {
            scheduler_step(&mut st2, &mut lr2, epoch, 123.0);
        }
        assert!((lr2 - 0.2).abs() < 1e-15, "two halvings over six epochs");
    }

    fn toy_dataset(n: usize, split: Split, seed: u64) -> SequenceDataset {
        let lag = 3;
        let mut rng = crate::rng::stream_rng(seed, "toy");
        use rand::Rng;
        let inputs = Array3::from_shape_fn((n, lag, 1), |_| rng.gen::<f64>() - 0.5);
        let mut targets = Array2::zeros((n, 1));
        for k in 0..n {
            // learnable map: target = mean of the window
            targets[(k, 0)] = inputs.index_axis(ndarray::Axis(0), k).mean().unwrap();
        }
        SequenceDataset {
            inputs,
            targets,
            missing: None,
            lag,
            split,
            target_source: TargetSource::Subsampled,
            first_target_time: lag,
        }
    }

    #[test]
    fn fit_learns_a_toy_map_and_records_history() {
        let params = one_param_model();
        let train_ds = toy_dataset(64, Split::Train, 1);
        let val_ds = toy_dataset(16, Split::Val, 2);
        let tc = TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 0.02,
            patience: 60,
            epoch_step: 40,
            scheduler: SchedulerKind::Plateau,
            seed: 5,
        };
        let lw = LossWeights::default();
        let out = fit(params, &train_ds, &val_ds, None, &tc, &lw).unwrap();
        assert_eq!(out.history.len(), 60);
        let first = out.history.first().unwrap().val_loss;
        assert!(
            out.best_val_loss < 0.2 * first,
            "val should drop well below {first}, got {}",
            out.best_val_loss
        );
        assert_eq!(out.history[0].lr, 0.02, "records the lr in effect");
        // returned params reproduce the recorded best validation loss
        let vb = val_ds.full_batch();
        let x_hat = net::forward(&vb.inputs, &out.params, Mode::Eval, 0).unwrap();
        let check = compute_loss(&x_hat, &vb.targets, out.params.sq_norm(), &lw).total;
        assert!((check - out.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn patience_one_stops_after_second_validation() {
        // a model with zero lr cannot improve after the first validation
        let params = one_param_model();
        let train_ds = toy_dataset(8, Split::Train, 3);
        let val_ds = toy_dataset(4, Split::Val, 4);
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 0.0,
            patience: 1,
            epoch_step: 100,
            scheduler: SchedulerKind::Plateau,
            seed: 6,
        };
        let out = fit(params, &train_ds, &val_ds, None, &tc, &LossWeights::default()).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn fit_is_seed_deterministic() {
        let params = one_param_model();
        let train_ds = toy_dataset(16, Split::Train, 7);
        let val_ds = toy_dataset(8, Split::Val, 8);
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 4,
            lr: 0.01,
            patience: 10,
            epoch_step: 10,
            scheduler: SchedulerKind::Plateau,
            seed: 9,
        };
        let lw = LossWeights {
            lambda_snr: 0.1,
            lambda_l1: 0.05,
            ..LossWeights::default()
        };
        let a = fit(params.clone(), &train_ds, &val_ds, None, &tc, &lw).unwrap();
        let b = fit(params, &train_ds, &val_ds, None, &tc, &lw).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params.to_flat(), b.params.to_flat());
    }

    #[test]
    fn history_tsv_round_trips_precision() {
        let history = vec![EpochRecord {
            epoch: 3,
            train_loss: 0.1234567890123456789,
            val_loss: std::f64::consts::PI,
            lr: 1e-3,
            mean_snr_db: -2.5,
        }];
        let tsv = history_to_tsv(&history);
        let line = tsv.lines().nth(1).unwrap();
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols[0], "3");
        assert_eq!(cols[1].parse::<f64>().unwrap(), history[0].train_loss);
        assert_eq!(cols[2].parse::<f64>().unwrap(), history[0].val_loss);
    }
}
