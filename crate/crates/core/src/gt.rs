//! Forced-response gains `g_j(x) = C_j · [y_k, .., y_{k-3T}]`, fitted by
//! ridge regression of free-response residuals on insulin deviations.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::Window;
use crate::error::{Error, Result};
use crate::predictor::{apply_gains, history_len, ForcedGains, FreeResponse, PredictorState};
use crate::tensors::TensorFile;

const GT_FORMAT: &str = "glucose-mpc/forced-gains";
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// `c` is `T x (3T + 1)`; row `j - 1` holds `C_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtCoefficients {
    pub c: DMatrix<f64>,
}

impl GtCoefficients {
    pub fn zeros(horizon: usize) -> Self {
        GtCoefficients {
            c: DMatrix::zeros(horizon, history_len(horizon)),
        }
    }

    pub fn horizon(&self) -> usize {
        self.c.nrows()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = TensorFile::new(GT_FORMAT);
        f.set_meta("horizon", self.c.nrows());
        f.set_meta("history_len", self.c.ncols());
        let row_major: Vec<f64> = self.c.transpose().iter().copied().collect();
        f.push("C", &[self.c.nrows(), self.c.ncols()], row_major)?;
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(path, GT_FORMAT)?;
        let t = f.meta_usize("horizon")?;
        let l = f.meta_usize("history_len")?;
        if l != history_len(t) {
            return Err(Error::format(
                path,
                format!("history length {l} does not match horizon {t}"),
            ));
        }
        let data = f.take("C", &[t, l])?;
        Ok(GtCoefficients {
            c: DMatrix::from_row_slice(t, l, &data),
        })
    }
}

pub fn eval_gains(coeffs: &GtCoefficients, x: &PredictorState) -> Result<Vec<f64>> {
    let cgm = x.cgm_hist();
    if cgm.len() != coeffs.c.ncols() {
        return Err(Error::DimensionMismatch {
            context: "CGM history for gains",
            expected: coeffs.c.ncols(),
            actual: cgm.len(),
        });
    }
    Ok((0..coeffs.c.nrows())
        .map(|j| coeffs.c.row(j).iter().zip(cgm).map(|(c, y)| c * y).sum())
        .collect())
}

impl ForcedGains for GtCoefficients {
    fn horizon(&self) -> usize {
        self.c.nrows()
    }

    fn gains(&self, x: &PredictorState) -> Result<Vec<f64>> {
        eval_gains(self, x)
    }
}

/// One regression sample: CGM history, insulin deviations and the part of
/// the measured future not explained by the free response.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub cgm_hist: Vec<f64>,
    pub du: Vec<f64>,
    pub dy: Vec<f64>,
}

pub fn insulin_deviation(w: &Window, basal: f64) -> Vec<f64> {
    w.future_inputs.iter().map(|u| u - basal).collect()
}

/// `basal` maps subject id to nominal insulin per step.
pub fn compute_residuals(
    windows: &[&Window],
    basal: &BTreeMap<u32, f64>,
    ft: &dyn FreeResponse,
) -> Result<Vec<Residual>> {
    windows
        .iter()
        .map(|w| {
            let b = *basal.get(&w.subject_id).ok_or_else(|| {
                Error::InvalidArgument(format!("no basal rate for subject {}", w.subject_id))
            })?;
            let f = ft.free_response(&w.state)?;
            if f.len() != w.future_outputs.len() {
                return Err(Error::DimensionMismatch {
                    context: "free response length",
                    expected: w.future_outputs.len(),
                    actual: f.len(),
                });
            }
            Ok(Residual {
                cgm_hist: w.state.cgm_hist().to_vec(),
                du: insulin_deviation(w, b),
                dy: w
                    .future_outputs
                    .iter()
                    .zip(&f)
                    .map(|(y, f)| y - f)
                    .collect(),
            })
        })
        .collect()
}

/// Regularized normal equations `(A / n + λI) c = b / n`, with `c` the
/// row-major flattening of `C`.
fn normal_equations(
    residuals: &[&Residual],
    t: usize,
    l: usize,
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = t * l;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut phi = DVector::<f64>::zeros(p);
    let mut rows = 0usize;
    for r in residuals {
        phi.fill(0.0);
        for i in 0..t {
            // row i uses blocks j <= i; extend phi with block i
            let du = r.du[i];
            for (m, y) in r.cgm_hist.iter().enumerate() {
                phi[i * l + m] = du * y;
            }
            let active = (i + 1) * l;
            let ph = phi.rows(0, active);
            a.view_mut((0, 0), (active, active)).ger(1.0, &ph, &ph, 1.0);
            b.rows_mut(0, active).axpy(r.dy[i], &ph, 1.0);
            rows += 1;
        }
    }
    let scale = 1.0 / rows.max(1) as f64;
    a *= scale;
    b *= scale;
    for d in 0..p {
        a[(d, d)] += lambda;
    }
    (a, b)
}

/// Least-squares fit over all windows with at least one nonzero insulin
/// deviation. `ridge_lambda` penalizes `|C|_F^2` against the mean squared
/// residual.
pub fn fit_gt(residuals: &[Residual], ridge_lambda: f64) -> Result<GtCoefficients> {
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::InvalidArgument(
            "ridge_lambda must be finite and >= 0".into(),
        ));
    }
    let first = residuals
        .first()
        .ok_or_else(|| Error::IllPosed("no residual samples".into()))?;
    let t = first.du.len();
    let l = first.cgm_hist.len();
    if t == 0 || l != history_len(t) {
        return Err(Error::DimensionMismatch {
            context: "CGM history length",
            expected: history_len(t),
            actual: l,
        });
    }
    for r in residuals {
        if r.du.len() != t || r.dy.len() != t || r.cgm_hist.len() != l {
            return Err(Error::DimensionMismatch {
                context: "residual sample",
                expected: t,
                actual: r.du.len(),
            });
        }
    }
    let informative: Vec<&Residual> = residuals
        .iter()
        .filter(|r| r.du.iter().any(|d| *d != 0.0))
        .collect();
    if informative.is_empty() {
        return Err(Error::IllPosed(
            "every window has zero insulin deviation".into(),
        ));
    }
    let (a, b) = normal_equations(&informative, t, l, ridge_lambda);
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-13;
    let mut c = svd
        .solve(&b, tol)
        .map_err(|e| Error::IllPosed(e.to_string()))?;
    // one step of iterative refinement
    let r = &b - &a * &c;
    c += svd
        .solve(&r, tol)
        .map_err(|e| Error::IllPosed(e.to_string()))?;
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fitted gain coefficients".into()));
    }
    Ok(GtCoefficients {
        c: DMatrix::from_row_slice(t, l, c.as_slice()),
    })
}

/// Mean squared residual `|ΔY - G_T ΔU|^2` per row.
pub fn residual_mse(coeffs: &GtCoefficients, residuals: &[Residual]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in residuals {
        let x = PredictorState::new(
            r.du.len(),
            r.cgm_hist.clone(),
            vec![0.0; r.cgm_hist.len()],
            vec![0.0; r.cgm_hist.len()],
        )?;
        let g = eval_gains(coeffs, &x)?;
        let pred = apply_gains(&g, &r.du);
        for (y, p) in r.dy.iter().zip(&pred) {
            acc += (y - p) * (y - p);
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

/// Fraction of evaluated gains that are positive (insulin raising glucose).
pub fn positive_gain_fraction(coeffs: &GtCoefficients, states: &[&PredictorState]) -> Result<f64> {
    let mut pos = 0usize;
    let mut n = 0usize;
    for x in states {
        for g in eval_gains(coeffs, x)? {
            pos += usize::from(g > 0.0);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { pos as f64 / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;
    use rand::Rng;

    fn planted(t: usize, seed: u64) -> GtCoefficients {
        let mut rng = rng_from(seed, &[1]);
        let l = history_len(t);
        GtCoefficients {
            c: DMatrix::from_fn(t, l, |_, _| rng.random_range(-1e-3..1e-3)),
        }
    }

    /// Residuals generated directly from `ΔY = G_T(C) ΔU` with the dense matrix.
    fn synthetic(c: &GtCoefficients, n: usize, seed: u64) -> Vec<Residual> {
        let t = c.c.nrows();
        let l = c.c.ncols();
        let mut rng = rng_from(seed, &[2]);
        (0..n)
            .map(|_| {
                let cgm: Vec<f64> = (0..l).map(|_| rng.random_range(60.0..300.0)).collect();
                let du: Vec<f64> = (0..t)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            rng.random_range(-0.3..6.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let g = &c.c * DVector::from_column_slice(&cgm);
                let mut gm = DMatrix::zeros(t, t);
                for i in 0..t {
                    for j in 0..=i {
                        gm[(i, j)] = g[j];
                    }
                }
                let dy = gm * DVector::from_column_slice(&du);
                Residual {
                    cgm_hist: cgm,
                    du,
                    dy: dy.iter().copied().collect(),
                }
            })
            .collect()
    }

    #[test]
    fn recovers_planted_coefficients() {
        for t in [1, 2, 4, 8] {
            let c = planted(t, t as u64);
            let res = synthetic(&c, 60 * t + 200, 9);
            let fit = fit_gt(&res, 0.0).unwrap();
            let err = (&fit.c - &c.c).norm();
            assert!(err < 1e-6, "T={t}: {err}");
        }
    }

    #[test]
    fn zero_deviation_is_ill_posed() {
        let c = planted(2, 1);
        let mut res = synthetic(&c, 10, 2);
        for r in &mut res {
            r.du.iter_mut().for_each(|d| *d = 0.0);
        }
        assert!(matches!(fit_gt(&res, 0.0), Err(Error::IllPosed(_))));
        assert!(matches!(fit_gt(&[], 0.0), Err(Error::IllPosed(_))));
    }

    #[test]
    fn heavy_ridge_shrinks_to_zero() {
        let c = planted(2, 3);
        let res = synthetic(&c, 100, 4);
        let light = fit_gt(&res, 1e-6).unwrap().c.norm();
        let heavy = fit_gt(&res, 1e12).unwrap().c.norm();
        assert!(heavy < 1e-6 * light.max(1e-12) + 1e-12);
    }

    #[test]
    fn stationarity_of_regularized_objective() {
        let c = planted(3, 5);
        let mut res = synthetic(&c, 300, 6);
        let mut rng = rng_from(7, &[]);
        for r in &mut res {
            r.dy.iter_mut()
                .for_each(|y| *y += rng.random_range(-5.0..5.0));
        }
        let lambda = 1e-3;
        let fit = fit_gt(&res, lambda).unwrap();
        let refs: Vec<&Residual> = res
            .iter()
            .filter(|r| r.du.iter().any(|d| *d != 0.0))
            .collect();
        let (a, b) = normal_equations(&refs, 3, history_len(3), lambda);
        let cv = DVector::from_row_slice(fit.c.transpose().as_slice());
        let grad = &a * &cv - &b;
        assert!(grad.norm() < 1e-8 * (1.0 + cv.norm()), "{}", grad.norm());
    }

    #[test]
    fn fit_is_never_worse_than_ignoring_insulin() {
        let c = planted(2, 8);
        let mut res = synthetic(&c, 200, 9);
        let mut rng = rng_from(10, &[]);
        for r in &mut res {
            r.dy.iter_mut()
                .for_each(|y| *y += rng.random_range(-20.0..20.0));
        }
        let fit = fit_gt(&res, DEFAULT_RIDGE).unwrap();
        assert!(
            residual_mse(&fit, &res).unwrap()
                <= residual_mse(&GtCoefficients::zeros(2), &res).unwrap()
        );
    }

    fn state(t: usize, cgm: f64) -> PredictorState {
        let l = history_len(t);
        PredictorState::new(t, vec![cgm; l], vec![0.0; l], vec![0.0; l]).unwrap()
    }

    #[test]
    fn gain_evaluation() {
        assert_eq!(
            eval_gains(&GtCoefficients::zeros(3), &state(3, 120.0)).unwrap(),
            vec![0.0; 3]
        );
        let c = planted(3, 11);
        let g1 = eval_gains(&c, &state(3, 100.0)).unwrap();
        let g2 = eval_gains(&c, &state(3, 200.0)).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-12);
            assert_ne!(a, b);
        }
        assert!(eval_gains(&c, &state(2, 100.0)).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let c = planted(4, 12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gt.json");
        c.save(&p).unwrap();
        assert_eq!(GtCoefficients::load(&p).unwrap(), c);
    }

    struct Exact;
    impl FreeResponse for Exact {
        fn horizon(&self) -> usize {
            2
        }
        fn free_response(&self, x: &PredictorState) -> Result<Vec<f64>> {
            Ok(vec![x.current_cgm() + 1.0, x.current_cgm() + 2.0])
        }
    }

    #[test]
    fn residuals_of_exact_free_response() {
        let l = history_len(2);
        let st = PredictorState::new(2, vec![100.0; l], vec![0.4; l], vec![0.0; l]).unwrap();
        let w = Window {
            subject_id: 3,
            k: 7,
            state: st,
            future_inputs: vec![0.4, 0.4],
            future_outputs: vec![101.0, 102.0],
        };
        let basal = BTreeMap::from([(3, 0.4)]);
        let r = compute_residuals(&[&w], &basal, &Exact).unwrap();
        assert_eq!(r[0].du, vec![0.0, 0.0]);
        assert_eq!(r[0].dy, vec![0.0, 0.0]);
        assert!(compute_residuals(&[&w], &BTreeMap::new(), &Exact).is_err());
    }
}
