//! Basis pursuit denoising in the penalized form
//!
//!   minimize  || Theta xi - b ||_2^2  +  lambda || xi ||_1
//!
//! over complex spectral coefficients xi, solved by proximal gradient
//! iterations. The prox of the l1 term is complex soft thresholding, the
//! smooth part has gradient 2 Theta^H (Theta xi - b), and since the operators
//! from [`crate::linops`] satisfy ||Theta|| <= 1 a fixed step of 1/2 always
//! majorizes. A Barzilai-Borwein spectral step with a short nonmonotone line
//! search is the default and usually converges in far fewer iterations; a
//! monotone variant of FISTA acceleration is available behind a flag.
//!
//! [`recover_window`] wraps the solver for one gappy sensor window and
//! [`Recovery::recover_batch`] maps it over a lagged input tensor with
//! memoization, since recovered windows depend only on the data, not on any
//! model state.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array3};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use thiserror::Error;

use crate::linops::{compose_theta, AvailabilityIndex, LinearOperator, Restriction, UnitaryDft};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("window has no observed samples")]
    AllMissing,
    #[error("availability mode is mask but no mask was provided")]
    MaskUnavailable,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Op(#[from] crate::linops::OpError),
}

/// How the l1 weight is chosen for a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// Use this value as is.
    Fixed(f64),
    /// Scale the max-correlation point: lambda = c * ||Theta^H b||_inf.
    /// Adapts to the energy of each window.
    ScaledInfNorm(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Constant 1/2, safe for restricted-unitary operators.
    Fixed,
    /// Barzilai-Borwein spectral step, safeguarded by a nonmonotone line
    /// search over the last ten accepted objectives.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub lambda: LambdaRule,
    pub max_iters: usize,
    /// relative objective change below which the iteration stops
    pub tol: f64,
    pub step_rule: StepRule,
    /// monotone FISTA momentum; forces the fixed step
    pub acceleration: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: LambdaRule::ScaledInfNorm(0.01),
            max_iters: 2000,
            tol: 1e-8,
            step_rule: StepRule::BarzilaiBorwein,
            acceleration: false,
        }
    }
}

/// Raw solver output in the spectral domain.
#[derive(Debug, Clone)]
pub struct BpdnSolution {
    pub xi: Vec<Complex64>,
    pub iterations: usize,
    /// best objective seen; non-increasing over accepted iterates
    pub objective: f64,
    pub converged: bool,
    /// the resolved absolute l1 weight
    pub lambda: f64,
}

/// One recovered window in the sample domain.
#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub y_star: Array1<f64>,
    pub xi: Vec<Complex64>,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
    pub lambda: f64,
}

/// Complex soft thresholding: shrink the magnitude by tau, keep the phase.
pub fn soft_threshold(z: Complex64, tau: f64) -> Complex64 {
    let m = z.norm();
    if m <= tau {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((m - tau) / m)
    }
}

fn objective_value(op: &dyn LinearOperator, b: &[Complex64], xi: &[Complex64], lambda: f64) -> f64 {
    let ax = op.forward(xi);
    let resid: f64 = ax.iter().zip(b).map(|(a, bb)| (a - bb).norm_sqr()).sum();
    let l1: f64 = xi.iter().map(|z| z.norm()).sum();
    resid + lambda * l1
}

fn grad(op: &dyn LinearOperator, b: &[Complex64], xi: &[Complex64]) -> Vec<Complex64> {
    let mut r = op.forward(xi);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri -= bi;
    }
    let mut g = op.adjoint(&r);
    for gi in &mut g {
        *gi *= 2.0;
    }
    g
}

fn prox_step(xi: &[Complex64], g: &[Complex64], alpha: f64, lambda: f64) -> Vec<Complex64> {
    xi.iter()
        .zip(g)
        .map(|(x, gi)| soft_threshold(x - alpha * gi, alpha * lambda))
        .collect()
}

fn resolve_lambda(rule: LambdaRule, op: &dyn LinearOperator, b: &[Complex64]) -> f64 {
    match rule {
        LambdaRule::Fixed(v) => v,
        LambdaRule::ScaledInfNorm(c) => {
            let corr = op.adjoint(b);
            c * corr.iter().map(|z| z.norm()).fold(0.0, f64::max)
        }
    }
}

fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn solve_bpdn(
    op: &dyn LinearOperator,
    b: &[Complex64],
    cfg: &SolverConfig,
) -> Result<BpdnSolution, SolveError> {
    solve_bpdn_with_trace(op, b, cfg, None)
}

/// As [`solve_bpdn`], optionally recording the accepted objective after each
/// iteration.
pub fn solve_bpdn_with_trace(
    op: &dyn LinearOperator,
    b: &[Complex64],
    cfg: &SolverConfig,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<BpdnSolution, SolveError> {
    const FIXED_STEP: f64 = 0.5; // 1/L for the residual term, ||Theta|| <= 1
    const BB_MIN: f64 = 1e-8;
    const BB_MAX: f64 = 1e8;
    const GLL_MEMORY: usize = 10;
    const SUFFICIENT_DECREASE: f64 = 1e-4;

    let lambda = resolve_lambda(cfg.lambda, op, b);
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(SolveError::NumericalFailure(format!(
            "invalid lambda {lambda}"
        )));
    }

    let n = op.cols();
    let mut xi = vec![Complex64::new(0.0, 0.0); n];
    let mut f_curr = objective_value(op, b, &xi, lambda);
    if !f_curr.is_finite() {
        return Err(SolveError::NumericalFailure("objective at zero".into()));
    }
    let mut best_obj = f_curr;
    let mut best_xi = xi.clone();
    let mut converged = false;
    let mut iterations = 0;

    // monotone FISTA state
    let mut momentum = xi.clone();
    let mut t_k = 1.0f64;
    // Barzilai-Borwein state
    let mut prev_xi: Option<Vec<Complex64>> = None;
    let mut prev_g: Option<Vec<Complex64>> = None;
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(GLL_MEMORY);
    recent.push_back(f_curr);

    for k in 0..cfg.max_iters {
        iterations = k + 1;

        let (next_xi, f_next) = if cfg.acceleration {
            let g = grad(op, b, &momentum);
            let u = prox_step(&momentum, &g, FIXED_STEP, lambda);
            let f_u = objective_value(op, b, &u, lambda);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            for i in 0..n {
                momentum[i] = u[i] + ((t_k - 1.0) / t_next) * (u[i] - xi[i]);
            }
            t_k = t_next;
            (u, f_u)
        } else {
            let g = grad(op, b, &xi);
            let mut alpha = match cfg.step_rule {
                StepRule::Fixed => FIXED_STEP,
                StepRule::BarzilaiBorwein => match (&prev_xi, &prev_g) {
                    (Some(px), Some(pg)) => {
                        let mut ss = 0.0;
                        let mut sy = 0.0;
                        for i in 0..n {
                            let s = xi[i] - px[i];
                            let y = g[i] - pg[i];
                            ss += s.norm_sqr();
                            sy += (s.conj() * y).re;
                        }
                        if sy > 0.0 && ss > 0.0 {
                            (ss / sy).clamp(BB_MIN, BB_MAX)
                        } else {
                            FIXED_STEP
                        }
                    }
                    _ => FIXED_STEP,
                },
            };
            let f_ref = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut cand;
            let mut f_cand;
            loop {
                cand = prox_step(&xi, &g, alpha, lambda);
                f_cand = objective_value(op, b, &cand, lambda);
                let dist: f64 = cand
                    .iter()
                    .zip(&xi)
                    .map(|(a, c)| (a - c).norm_sqr())
                    .sum();
                if matches!(cfg.step_rule, StepRule::Fixed)
                    || f_cand <= f_ref - SUFFICIENT_DECREASE / (2.0 * alpha) * dist
                {
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    // no direction passes: numerically stationary
                    cand = xi.clone();
                    f_cand = f_curr;
                    break;
                }
            }
            prev_xi = Some(xi.clone());
            prev_g = Some(g);
            if recent.len() == GLL_MEMORY {
                recent.pop_front();
            }
            recent.push_back(f_cand);
            (cand, f_cand)
        };

        if !f_next.is_finite() {
            return Err(SolveError::NumericalFailure(format!(
                "objective diverged at iteration {iterations}"
            )));
        }

        let movement = max_abs_diff(&next_xi, &xi);
        let rel_change = (f_next - f_curr).abs() / f_next.abs().max(1.0);
        xi = next_xi;
        f_curr = f_next;
        if f_curr < best_obj {
            best_obj = f_curr;
            best_xi = xi.clone();
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(f_curr);
        }
        if movement == 0.0 || rel_change <= cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(BpdnSolution {
        xi: best_xi,
        iterations,
        objective: best_obj,
        converged,
        lambda,
    })
}

/// Recover one window through the spectral model. `avail` marks the observed
/// entries; callers building it from data should use
/// [`AvailabilityIndex::from_sentinel`] or
/// [`AvailabilityIndex::from_missing_mask`].
pub fn recover_window(
    window: &[f64],
    avail: &AvailabilityIndex,
    cfg: &SolverConfig,
) -> Result<RecoveryResult, SolveError> {
    let dft = UnitaryDft::new(window.len());
    recover_window_with(&dft, window, avail, cfg)
}

fn recover_window_with(
    dft: &UnitaryDft,
    window: &[f64],
    avail: &AvailabilityIndex,
    cfg: &SolverConfig,
) -> Result<RecoveryResult, SolveError> {
    if avail.is_empty() {
        return Err(SolveError::AllMissing);
    }
    let restriction = Restriction::new(avail.clone());
    let theta = compose_theta(&restriction, dft)?;
    let b: Vec<Complex64> = avail
        .indices()
        .iter()
        .map(|&i| Complex64::new(window[i], 0.0))
        .collect();
    let sol = solve_bpdn(&theta, &b, cfg)?;
    let full = dft.adjoint(&sol.xi);
    let y_star = Array1::from_iter(full.iter().map(|z| z.re));
    if cfg!(debug_assertions) {
        // real input keeps the iterates conjugate-symmetric, so the imaginary
        // part of the resynthesis is solver noise: fft roundoff asymmetry
        // that clamped Barzilai-Borwein steps can amplify to ~1e-6 relative.
        // A conventions bug would make it comparable to the real part.
        let im: f64 = full.iter().map(|z| z.im * z.im).sum::<f64>().sqrt();
        let re: f64 = full.iter().map(|z| z.re * z.re).sum::<f64>().sqrt();
        debug_assert!(im <= 1e-3 * re.max(1e-9), "imaginary residual {im} vs {re}");
    }
    Ok(RecoveryResult {
        y_star,
        xi: sol.xi,
        iterations: sol.iterations,
        objective: sol.objective,
        converged: sol.converged,
        lambda: sol.lambda,
    })
}

/// How missing entries are detected inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvailabilityMode {
    /// zero means missing
    SentinelNonZero,
    /// anything not strictly positive means missing
    SentinelPositive,
    /// an explicit missing mask accompanies the data
    Mask,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RecoveryStats {
    /// windows solved by the optimizer this call
    pub solved: usize,
    /// windows served from the memo cache (or deduplicated within the call)
    pub cache_hits: usize,
    /// fully observed windows passed through untouched
    pub passed_through: usize,
    /// fully missing windows zero-filled
    pub all_missing: usize,
}

type CacheKey = (Vec<u64>, Vec<usize>);

/// Content-addressed memo of recovered windows. Recovery depends only on the
/// window values and the availability pattern, never on model state, so
/// entries stay valid across epochs.
#[derive(Default)]
pub struct RecoveryCache {
    map: Mutex<HashMap<CacheKey, Arc<Vec<f64>>>>,
}

impl RecoveryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The recovery stage as carried by a model: solver settings, missing-entry
/// detection and an optional cache. `cache: None` re-solves every window on
/// every forward pass.
pub struct Recovery {
    pub solver: SolverConfig,
    pub mode: AvailabilityMode,
    pub cache: Option<RecoveryCache>,
}

impl Recovery {
    pub fn new(solver: SolverConfig, mode: AvailabilityMode, cached: bool) -> Self {
        Recovery {
            solver,
            mode,
            cache: cached.then(RecoveryCache::new),
        }
    }

    /// Fill the gaps of every window of `inputs` (sample-major, one window
    /// per sample and sensor). Fully observed windows pass through
    /// unchanged; fully missing windows come back zero-filled with a logged
    /// warning. `missing` is required in mask mode and ignored otherwise.
    pub fn recover_batch(
        &self,
        inputs: &Array3<f64>,
        missing: Option<&Array3<bool>>,
    ) -> Result<(Array3<f64>, RecoveryStats), SolveError> {
        let (n_samples, lag, m) = inputs.dim();
        if self.mode == AvailabilityMode::Mask && missing.is_none() {
            return Err(SolveError::MaskUnavailable);
        }
        let dft = UnitaryDft::new(lag);
        let mut out = inputs.clone();
        let mut stats = RecoveryStats::default();

        // collect the windows that actually need the solver
        struct Task {
            k: usize,
            s: usize,
            window: Vec<f64>,
            avail: AvailabilityIndex,
        }
        let mut tasks: Vec<Task> = Vec::new();
        for k in 0..n_samples {
            for s in 0..m {
                let window: Vec<f64> = (0..lag).map(|j| inputs[(k, j, s)]).collect();
                let avail = match self.mode {
                    AvailabilityMode::SentinelNonZero => {
                        AvailabilityIndex::from_sentinel(&window, false)
                    }
                    AvailabilityMode::SentinelPositive => {
                        AvailabilityIndex::from_sentinel(&window, true)
                    }
                    AvailabilityMode::Mask => {
                        let mm: Vec<bool> =
                            (0..lag).map(|j| missing.unwrap()[(k, j, s)]).collect();
                        AvailabilityIndex::from_missing_mask(&mm)
                    }
                };
                if avail.is_complete() {
                    stats.passed_through += 1;
                } else if avail.is_empty() {
                    stats.all_missing += 1;
                    log::warn!("window (sample {k}, sensor {s}) fully missing, zero-filled");
                    for j in 0..lag {
                        out[(k, j, s)] = 0.0;
                    }
                } else {
                    tasks.push(Task { k, s, window, avail });
                }
            }
        }

        match &self.cache {
            Some(cache) => {
                // deduplicate by content so stats and solve counts stay
                // deterministic under the parallel map
                let mut order: Vec<CacheKey> = Vec::new();
                let mut first_of: HashMap<CacheKey, usize> = HashMap::new();
                let mut task_key: Vec<usize> = Vec::with_capacity(tasks.len());
                for t in &tasks {
                    let key: CacheKey = (
                        t.window.iter().map(|v| v.to_bits()).collect(),
                        t.avail.indices().to_vec(),
                    );
                    let uid = *first_of.entry(key.clone()).or_insert_with(|| {
                        order.push(key.clone());
                        order.len() - 1
                    });
                    task_key.push(uid);
                }
                let mut resolved: Vec<Option<Arc<Vec<f64>>>> = vec![None; order.len()];
                let mut to_solve: Vec<usize> = Vec::new();
                {
                    let map = cache.map.lock().unwrap();
                    for (uid, key) in order.iter().enumerate() {
                        if let Some(v) = map.get(key) {
                            resolved[uid] = Some(v.clone());
                        } else {
                            to_solve.push(uid);
                        }
                    }
                }
                stats.solved = to_solve.len();
                stats.cache_hits = tasks.len() - to_solve.len();
                let rep: Vec<&Task> = to_solve
                    .iter()
                    .map(|&uid| {
                        let t_idx = task_key.iter().position(|&u| u == uid).unwrap();
                        &tasks[t_idx]
                    })
                    .collect();
                let solutions: Vec<Result<Vec<f64>, SolveError>> = rep
                    .par_iter()
                    .map(|t| {
                        recover_window_with(&dft, &t.window, &t.avail, &self.solver)
                            .map(|r| r.y_star.to_vec())
                    })
                    .collect();
                {
                    let mut map = cache.map.lock().unwrap();
                    for (&uid, sol) in to_solve.iter().zip(solutions) {
                        let v = Arc::new(sol?);
                        map.insert(order[uid].clone(), v.clone());
                        resolved[uid] = Some(v);
                    }
                }
                for (t, &uid) in tasks.iter().zip(&task_key) {
                    let v = resolved[uid].as_ref().expect("resolved above");
                    for j in 0..lag {
                        out[(t.k, j, t.s)] = v[j];
                    }
                }
            }
            None => {
                stats.solved = tasks.len();
                let solutions: Vec<Result<Vec<f64>, SolveError>> = tasks
                    .par_iter()
                    .map(|t| {
                        recover_window_with(&dft, &t.window, &t.avail, &self.solver)
                            .map(|r| r.y_star.to_vec())
                    })
                    .collect();
                for (t, sol) in tasks.iter().zip(solutions) {
                    let v = sol?;
                    for j in 0..lag {
                        out[(t.k, j, t.s)] = v[j];
                    }
                }
            }
        }

        Ok((out, stats))
    }
}
