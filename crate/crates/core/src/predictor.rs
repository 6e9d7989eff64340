//! Multi-step predictor affine in the future insulin moves.
//!
//! A prediction over `T` steps is `F(x) + G(x) (u - u_basal)` where `F` is
//! the free response and `G` is lower triangular with a constant value down
//! each column: entry `(i, j)` is `g_j(x)` for `j <= i`.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::plant::{CGM_MAX, CGM_MIN};

/// Number of past samples per channel for horizon `t`.
pub fn history_len(horizon: usize) -> usize {
    3 * horizon + 1
}

/// Regressor vector at tick `k`. All histories are newest first:
/// `cgm_hist = [y_k, .., y_{k-3T}]`, `ins_hist = [u_{k-1}, .., u_{k-3T-1}]`,
/// `cho_hist = [d_k, .., d_{k-3T}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState {
    horizon: usize,
    cgm_hist: Vec<f64>,
    ins_hist: Vec<f64>,
    cho_hist: Vec<f64>,
}

impl PredictorState {
    pub fn new(
        horizon: usize,
        cgm_hist: Vec<f64>,
        ins_hist: Vec<f64>,
        cho_hist: Vec<f64>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let n = history_len(horizon);
        for (name, v) in [
            ("cgm_hist", &cgm_hist),
            ("ins_hist", &ins_hist),
            ("cho_hist", &cho_hist),
        ] {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    context: name,
                    expected: n,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        if cgm_hist.iter().any(|y| *y < CGM_MIN || *y > CGM_MAX) {
            return Err(Error::InvalidArgument(
                "CGM history outside [0, 500] mg/dL".into(),
            ));
        }
        Ok(PredictorState {
            horizon,
            cgm_hist,
            ins_hist,
            cho_hist,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn cgm_hist(&self) -> &[f64] {
        &self.cgm_hist
    }

    pub fn ins_hist(&self) -> &[f64] {
        &self.ins_hist
    }

    pub fn cho_hist(&self) -> &[f64] {
        &self.cho_hist
    }

    /// Current CGM sample `y_k`.
    pub fn current_cgm(&self) -> f64 {
        self.cgm_hist[0]
    }

    /// Flat regressor `[cgm.., ins.., cho..]` of length `3 (3T + 1)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.cgm_hist.len());
        v.extend_from_slice(&self.cgm_hist);
        v.extend_from_slice(&self.ins_hist);
        v.extend_from_slice(&self.cho_hist);
        v
    }

    /// Per-tick feature triples `(cgm, insulin, carbs)`, oldest tick first.
    pub fn sequence(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        (0..self.cgm_hist.len())
            .rev()
            .map(move |i| [self.cgm_hist[i], self.ins_hist[i], self.cho_hist[i]])
    }
}

/// Future insulin sequence `[u_k, .., u_{k+T-1}]` and its nominal reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    pub u: Vec<f64>,
    pub reference: Vec<f64>,
}

impl ControlSequence {
    pub fn new(u: Vec<f64>, basal: f64) -> Result<Self> {
        if u.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "control entries must be finite and >= 0".into(),
            ));
        }
        let reference = vec![basal; u.len()];
        Ok(ControlSequence { u, reference })
    }

    pub fn basal(horizon: usize, basal: f64) -> Self {
        ControlSequence {
            u: vec![basal; horizon],
            reference: vec![basal; horizon],
        }
    }

    pub fn deviation(&self) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.reference)
            .map(|(u, r)| u - r)
            .collect()
    }
}

/// Predicted outputs `[y_{k+1}, .., y_{k+T}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVector {
    pub y_hat: Vec<f64>,
}

/// Free-response map `x -> [f_1(x), .., f_T(x)]`.
pub trait FreeResponse: Send + Sync {
    fn horizon(&self) -> usize;
    fn free_response(&self, x: &PredictorState) -> Result<Vec<f64>>;
}

/// Forced-response gains `x -> [g_1(x), .., g_T(x)]`.
pub trait ForcedGains: Send + Sync {
    fn horizon(&self) -> usize;
    fn gains(&self, x: &PredictorState) -> Result<Vec<f64>>;
}

#[derive(Clone)]
pub struct AffinePredictor {
    free: Arc<dyn FreeResponse>,
    forced: Arc<dyn ForcedGains>,
}

impl std::fmt::Debug for AffinePredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AffinePredictor")
            .field("horizon", &self.horizon())
            .finish_non_exhaustive()
    }
}

impl AffinePredictor {
    pub fn new(free: Arc<dyn FreeResponse>, forced: Arc<dyn ForcedGains>) -> Result<Self> {
        if free.horizon() != forced.horizon() {
            return Err(Error::DimensionMismatch {
                context: "forced-response horizon",
                expected: free.horizon(),
                actual: forced.horizon(),
            });
        }
        Ok(AffinePredictor { free, forced })
    }

    pub fn horizon(&self) -> usize {
        self.free.horizon()
    }

    pub fn free_response(&self, x: &PredictorState) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let f = self.free.free_response(x)?;
        self.check_len("free response", &f)?;
        Ok(f)
    }

    pub fn gains(&self, x: &PredictorState) -> Result<Vec<f64>> {
        self.check_state(x)?;
        let g = self.forced.gains(x)?;
        self.check_len("forced gains", &g)?;
        Ok(g)
    }

    pub fn predict(&self, x: &PredictorState, u: &ControlSequence) -> Result<PredictionVector> {
        let t = self.horizon();
        if u.u.len() != t || u.reference.len() != t {
            return Err(Error::DimensionMismatch {
                context: "control sequence",
                expected: t,
                actual: u.u.len(),
            });
        }
        let f = self.free_response(x)?;
        let g = self.gains(x)?;
        let forced = apply_gains(&g, &u.deviation());
        Ok(PredictionVector {
            y_hat: f.iter().zip(&forced).map(|(a, b)| a + b).collect(),
        })
    }

    fn check_state(&self, x: &PredictorState) -> Result<()> {
        if x.horizon() != self.horizon() {
            return Err(Error::DimensionMismatch {
                context: "predictor state horizon",
                expected: self.horizon(),
                actual: x.horizon(),
            });
        }
        Ok(())
    }

    fn check_len(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.horizon() {
            return Err(Error::DimensionMismatch {
                context: "evaluator output",
                expected: self.horizon(),
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(what.into()));
        }
        Ok(())
    }
}

/// Lower-triangular `T x T` matrix with `(i, j) = gains[j]` for `j <= i`.
pub fn assemble_gt_matrix(gains: &[f64]) -> DMatrix<f64> {
    let t = gains.len();
    DMatrix::from_fn(t, t, |i, j| if j <= i { gains[j] } else { 0.0 })
}

/// `assemble_gt_matrix(gains) * du` without forming the matrix.
pub fn apply_gains(gains: &[f64], du: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    gains
        .iter()
        .zip(du)
        .map(|(g, d)| {
            acc += g * d;
            acc
        })
        .collect()
}
