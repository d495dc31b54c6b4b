//! Measurement operators for the spectral recovery stage, kept functional:
//! an operator is a forward map, an adjoint map and a shape, never a stored
//! matrix. The solver only ever composes these three things.
//!
//! The sensing model for one window of length L is a restriction of the
//! inverse unitary DFT: observed samples b relate to spectral coefficients
//! xi through b = R F^H xi, so the operator passed to the solver is
//! Theta = R compose F^H. Both factors are unitary or subunitary, which pins
//! the spectral norm of Theta at or below one and makes fixed-step proximal
//! iterations safe without line searches.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("availability index {index} out of range {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("availability indices must be strictly increasing")]
    Unsorted,
    #[error("operator shapes do not compose: {left:?} after {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
}

/// A linear map C^cols -> C^rows given by matching forward/adjoint closures.
pub trait LinearOperator: Send + Sync {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn forward(&self, x: &[Complex64]) -> Vec<Complex64>;
    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64>;
}

/// Positions inside a window where a sample was actually observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AvailabilityIndex {
    indices: Vec<usize>,
    len: usize,
}

impl AvailabilityIndex {
    /// `indices` must be strictly increasing and below `len`.
    pub fn new(indices: Vec<usize>, len: usize) -> Result<Self, OpError> {
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(OpError::Unsorted);
            }
        }
        if let Some(&last) = indices.last() {
            if last >= len {
                return Err(OpError::IndexOutOfRange { index: last, len });
            }
        }
        Ok(AvailabilityIndex { indices, len })
    }

    /// Observed = nonzero sample. The `strict` variant treats only positive
    /// samples as observed, for data known to be positive.
    pub fn from_sentinel(window: &[f64], strict: bool) -> Self {
        let indices = window
            .iter()
            .enumerate()
            .filter(|(_, &v)| if strict { v > 0.0 } else { v != 0.0 })
            .map(|(i, _)| i)
            .collect();
        AvailabilityIndex {
            indices,
            len: window.len(),
        }
    }

    /// Observed = not flagged missing.
    pub fn from_missing_mask(missing: &[bool]) -> Self {
        let indices = missing
            .iter()
            .enumerate()
            .filter(|(_, &m)| !m)
            .map(|(i, _)| i)
            .collect();
        AvailabilityIndex {
            indices,
            len: missing.len(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    pub fn n_observed(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.indices.len() == self.len
    }
}

/// Row selector R: keeps the observed entries of a length-L vector.
#[derive(Debug, Clone)]
pub struct Restriction {
    avail: AvailabilityIndex,
}

impl Restriction {
    pub fn new(avail: AvailabilityIndex) -> Self {
        Restriction { avail }
    }

    pub fn availability(&self) -> &AvailabilityIndex {
        &self.avail
    }
}

impl LinearOperator for Restriction {
    fn rows(&self) -> usize {
        self.avail.n_observed()
    }

    fn cols(&self) -> usize {
        self.avail.window_len()
    }

    fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.cols());
        self.avail.indices().iter().map(|&i| x[i]).collect()
    }

    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(y.len(), self.rows());
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols()];
        for (&i, &v) in self.avail.indices().iter().zip(y) {
            out[i] = v;
        }
        out
    }
}

/// Unitary DFT of length L: both directions carry 1/sqrt(L), so forward and
/// adjoint are exact inverses and energy is preserved.
#[derive(Clone)]
pub struct UnitaryDft {
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl UnitaryDft {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "empty transform");
        let mut planner = FftPlanner::new();
        UnitaryDft {
            len,
            fwd: planner.plan_fft_forward(len),
            inv: planner.plan_fft_inverse(len),
        }
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, x: &[Complex64]) -> Vec<Complex64> {
        debug_assert_eq!(x.len(), self.len);
        let mut buf = x.to_vec();
        plan.process(&mut buf);
        let scale = 1.0 / (self.len as f64).sqrt();
        for v in &mut buf {
            *v *= scale;
        }
        buf
    }
}

impl std::fmt::Debug for UnitaryDft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnitaryDft").field("len", &self.len).finish()
    }
}

impl LinearOperator for UnitaryDft {
    fn rows(&self) -> usize {
        self.len
    }

    fn cols(&self) -> usize {
        self.len
    }

    fn forward(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.run(&self.fwd, x)
    }

    fn adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        self.run(&self.inv, y)
    }
}

/// Theta = R compose F^H: spectral coefficients to observed samples.
#[derive(Debug, Clone)]
pub struct Theta {
    restriction: Restriction,
    dft: UnitaryDft,
}

impl Theta {
    pub fn dft(&self) -> &UnitaryDft {
        &self.dft
    }

    pub fn restriction(&self) -> &Restriction {
        &self.restriction
    }
}

pub fn compose_theta(restriction: &Restriction, dft: &UnitaryDft) -> Result<Theta, OpError> {
    if restriction.cols() != dft.rows() {
        return Err(OpError::ShapeMismatch {
            left: (restriction.rows(), restriction.cols()),
            right: (dft.rows(), dft.cols()),
        });
    }
    Ok(Theta {
        restriction: restriction.clone(),
        dft: dft.clone(),
    })
}

impl LinearOperator for Theta {
    fn rows(&self) -> usize {
        self.restriction.rows()
    }

    fn cols(&self) -> usize {
        self.dft.cols()
    }

    fn forward(&self, xi: &[Complex64]) -> Vec<Complex64> {
        self.restriction.forward(&self.dft.adjoint(xi))
    }

    fn adjoint(&self, b: &[Complex64]) -> Vec<Complex64> {
        self.dft.forward(&self.restriction.adjoint(b))
    }
}

/// Materialize an operator column by column. Diagnostic and test helper; the
/// solver never touches it.
pub fn dense_matrix(op: &dyn LinearOperator) -> Vec<Vec<Complex64>> {
    let (r, c) = (op.rows(), op.cols());
    let mut cols = Vec::with_capacity(c);
    for j in 0..c {
        let mut e = vec![Complex64::new(0.0, 0.0); c];
        e[j] = Complex64::new(1.0, 0.0);
        cols.push(op.forward(&e));
    }
    // transpose: rows of the matrix
    (0..r)
        .map(|i| (0..c).map(|j| cols[j][i]).collect())
        .collect()
}

/// <u, v> with conjugation on the left argument.
pub fn inner(u: &[Complex64], v: &[Complex64]) -> Complex64 {
    u.iter().zip(v).map(|(a, b)| a.conj() * b).sum()
}
