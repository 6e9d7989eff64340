//! ARX(3,3,1) one-step predictor in deviation variables, its state-space
//! realization and a steady-state Kalman filter.
//!
//! Under the adopted convention the difference equation is
//! `δy_k = -a_1 δy_{k-1} - a_2 δy_{k-2} - a_3 δy_{k-3}
//!        + Σ_i b_cho,i δd_{k-i} + Σ_i b_ins,i δu_{k-i}`, `i = 1..3`,
//! i.e. `A(q) y = B(q) u`. The literal reading adds the `a_i` terms instead.

use std::path::Path;

use nalgebra::{Complex, DMatrix, Matrix3, Matrix3x2, RowVector3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{SampledTrace, ScenarioDataset};
use crate::error::{Error, Result};

pub const ORDER: usize = 3;
pub const KALMAN_Q: f64 = 1.0;
pub const KALMAN_R: f64 = 1e-6;
pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum SignConvention {
    /// `A(q) y = B(q) u`: autoregressive terms enter with a minus sign.
    #[default]
    Adopted,
    /// Autoregressive terms added as printed.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArxModel {
    pub a: [f64; ORDER],
    pub b_cho: [f64; ORDER],
    pub b_ins: [f64; ORDER],
    pub convention: SignConvention,
}

/// Nominal working point: deviations are taken from these values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub y_bar: f64,
    pub u_bar: f64,
}

impl ArxModel {
    /// The published population coefficients.
    pub fn paper_preset(convention: SignConvention) -> Self {
        ArxModel {
            a: [-2.20, 1.67, -0.46],
            b_cho: [2.09e-6, 7.36e-5, 1.93e-4],
            b_ins: [-6.20e-5, -3.41e-3, -9.08e-4],
            convention,
        }
    }

    /// Autoregressive coefficients expressed in the adopted convention.
    pub fn effective_a(&self) -> [f64; ORDER] {
        match self.convention {
            SignConvention::Adopted => self.a,
            SignConvention::Literal => self.a.map(|v| -v),
        }
    }

    /// Roots of `z^3 + ã_1 z^2 + ã_2 z + ã_3` with `ã` the effective coefficients.
    pub fn roots(&self) -> [Complex<f64>; ORDER] {
        let e = self.effective_a();
        let companion = Matrix3::new(-e[0], -e[1], -e[2], 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let ev = companion.complex_eigenvalues();
        [ev[0], ev[1], ev[2]]
    }

    pub fn max_root_modulus(&self) -> f64 {
        self.roots().iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    fn check(&self) -> Result<()> {
        if self
            .a
            .iter()
            .chain(&self.b_cho)
            .chain(&self.b_ins)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("ARX coefficients".into()));
        }
        Ok(())
    }
}

/// One-step prediction. Histories are newest first: `dy_hist[0] = δy_{k-1}`,
/// `dd_hist[0] = δd_{k-1}`, `du_hist[0] = δu_{k-1}`.
pub fn arx_predict_1step(
    m: &ArxModel,
    dy_hist: &[f64],
    dd_hist: &[f64],
    du_hist: &[f64],
) -> Result<f64> {
    for (name, h) in [
        ("output", dy_hist),
        ("carbohydrate", dd_hist),
        ("insulin", du_hist),
    ] {
        if h.len() < ORDER {
            return Err(Error::DimensionMismatch {
                context: if name == "output" {
                    "ARX output history"
                } else {
                    "ARX input history"
                },
                expected: ORDER,
                actual: h.len(),
            });
        }
    }
    let a = m.effective_a();
    Ok((0..ORDER)
        .map(|i| -a[i] * dy_hist[i] + m.b_cho[i] * dd_hist[i] + m.b_ins[i] * du_hist[i])
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArxFit {
    pub model: ArxModel,
    pub residual_variance: f64,
    pub samples: usize,
}

/// Pooled least-squares fit over several traces, each with its own operating
/// point. For an ARX structure the prediction-error criterion is exactly this
/// linear regression.
pub fn identify_arx_traces(traces: &[(&SampledTrace, OperatingPoint)]) -> Result<ArxFit> {
    let p = 3 * ORDER;
    let mut rows: Vec<[f64; 9]> = Vec::new();
    let mut rhs = Vec::new();
    for (tr, op) in traces {
        let n = tr.len();
        for k in ORDER..n {
            let mut phi = [0.0; 9];
            for i in 0..ORDER {
                phi[i] = -(tr.y_cgm[k - 1 - i] - op.y_bar);
                phi[ORDER + i] = tr.d_cho[k - 1 - i];
                phi[2 * ORDER + i] = tr.u_ins[k - 1 - i] - op.u_bar;
            }
            rows.push(phi);
            rhs.push(tr.y_cgm[k] - op.y_bar);
        }
    }
    if rows.len() < p {
        return Err(Error::Identification(format!(
            "{} regression rows for {p} parameters",
            rows.len()
        )));
    }
    let phi = DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
    let y = nalgebra::DVector::from_vec(rhs);
    // column scaling so the rank test is insensitive to channel units
    let scales: Vec<f64> = (0..p).map(|c| phi.column(c).norm()).collect();
    if scales.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::Identification(
            "a regressor column is identically zero".into(),
        ));
    }
    let mut scaled = phi.clone();
    for (c, s) in scales.iter().enumerate() {
        scaled.column_mut(c).scale_mut(1.0 / s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= smax * 1e-10 {
        return Err(Error::Identification(format!(
            "regressor matrix is rank deficient (condition {:e})",
            smax / smin
        )));
    }
    let theta_s = svd
        .solve(&y, 0.0)
        .map_err(|e| Error::Identification(e.to_string()))?;
    let theta: Vec<f64> = theta_s.iter().zip(&scales).map(|(t, s)| t / s).collect();
    let resid = &y - &phi * nalgebra::DVector::from_column_slice(&theta);
    let model = ArxModel {
        a: [theta[0], theta[1], theta[2]],
        b_cho: [theta[3], theta[4], theta[5]],
        b_ins: [theta[6], theta[7], theta[8]],
        convention: SignConvention::Adopted,
    };
    model.check()?;
    Ok(ArxFit {
        model,
        residual_variance: resid.norm_squared() / (rows.len() - p) as f64,
        samples: rows.len(),
    })
}

/// Population fit on a dataset, each subject around its own equilibrium
/// glucose and basal rate.
pub fn identify_arx(ds: &ScenarioDataset) -> Result<ArxFit> {
    identify_arx_pooled(&[ds])
}

/// As [`identify_arx`] over the union of several datasets.
pub fn identify_arx_pooled(datasets: &[&ScenarioDataset]) -> Result<ArxFit> {
    if datasets.iter().all(|ds| ds.subjects.is_empty()) {
        return Err(Error::Identification("dataset has no subjects".into()));
    }
    let traces: Vec<(&SampledTrace, OperatingPoint)> = datasets
        .iter()
        .flat_map(|ds| &ds.subjects)
        .map(|s| {
            (
                &s.trace,
                OperatingPoint {
                    y_bar: s.equilibrium_glucose,
                    u_bar: s.basal_rate,
                },
            )
        })
        .collect();
    identify_arx_traces(&traces)
}

/// `x_{k+1} = A x_k + B [δd_k, δu_k]`, `δy_k = C x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArxStateSpace {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: RowVector3<f64>,
    /// Steady-state a-priori error covariance.
    pub p: Matrix3<f64>,
    /// Measurement-update gain.
    pub kalman_gain: Vector3<f64>,
}

/// Steady-state filter for `x+ = A x + w`, `y = C x + e`, `w ~ (0, Q)`,
/// `e ~ (0, R)`. Returns the a-priori covariance and the measurement-update
/// gain `P C' (C P C' + R)^-1`.
pub fn steady_state_kalman(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let mut p = q.clone();
    let mut delta = f64::INFINITY;
    for _ in 0..RICCATI_MAX_ITER {
        let s = c * &p * c.transpose() + r;
        let s_inv = s
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidArgument("innovation covariance is singular".into()))?;
        let k = &p * c.transpose() * &s_inv;
        let p_post = (DMatrix::identity(n, n) - &k * c) * &p;
        let mut next = a * &p_post * a.transpose() + q;
        next = (&next + next.transpose()) * 0.5;
        delta = (&next - &p).amax();
        p = next;
        if delta <= RICCATI_TOL * (1.0 + p.amax()) {
            let s = c * &p * c.transpose() + r;
            let s_inv = s.try_inverse().ok_or_else(|| {
                Error::InvalidArgument("innovation covariance is singular".into())
            })?;
            let gain = &p * c.transpose() * s_inv;
            return Ok((p, gain));
        }
        if !delta.is_finite() {
            break;
        }
    }
    Err(Error::RiccatiNonConvergence {
        iterations: RICCATI_MAX_ITER,
        delta,
    })
}

/// Canonical realization with the autoregressive coefficients in the first
/// column of `A` and both input numerators as the columns of `B`, so that
/// the output equals the first state.
pub fn realize_and_kalman(m: &ArxModel) -> Result<ArxStateSpace> {
    realize_with_noise(m, KALMAN_Q, KALMAN_R)
}

pub fn realize_with_noise(m: &ArxModel, q: f64, r: f64) -> Result<ArxStateSpace> {
    m.check()?;
    let e = m.effective_a();
    let a = Matrix3::new(-e[0], 1.0, 0.0, -e[1], 0.0, 1.0, -e[2], 0.0, 0.0);
    let b = Matrix3x2::new(
        m.b_cho[0], m.b_ins[0], m.b_cho[1], m.b_ins[1], m.b_cho[2], m.b_ins[2],
    );
    let c = RowVector3::new(1.0, 0.0, 0.0);
    let ad = DMatrix::from_column_slice(3, 3, a.as_slice());
    let cd = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
    let (p, gain) = steady_state_kalman(
        &ad,
        &cd,
        &(DMatrix::identity(3, 3) * q),
        &DMatrix::from_element(1, 1, r),
    )?;
    Ok(ArxStateSpace {
        a,
        b,
        c,
        p: Matrix3::from_column_slice(p.as_slice()),
        kalman_gain: Vector3::new(gain[0], gain[1], gain[2]),
    })
}

impl ArxStateSpace {
    /// Markov parameters `C A^{i} B` for `i = 0..n`, one column per input.
    pub fn impulse_response(&self, n: usize) -> Vec<Vector2<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut ak = Matrix3::identity();
        for _ in 0..n {
            out.push((self.c * ak * self.b).transpose());
            ak = self.a * ak;
        }
        out
    }

    /// `(A, B)` controllability via the rank of `[B, AB, A^2 B]`.
    pub fn is_controllable(&self) -> bool {
        let ab = self.a * self.b;
        let a2b = self.a * ab;
        let mut m = DMatrix::zeros(3, 6);
        for (blk, mat) in [self.b, ab, a2b].iter().enumerate() {
            m.view_mut((0, 2 * blk), (3, 2)).copy_from(mat);
        }
        m.rank(1e-12 * m.amax().max(1e-300)) == 3
    }
}

/// Correct the a-priori estimate `x` with `δy_meas`, then propagate with the
/// inputs applied over the coming period. Returns the filtered estimate,
/// the next a-priori estimate and the one-step output prediction.
pub fn kalman_step(
    ss: &ArxStateSpace,
    x: &Vector3<f64>,
    dy_meas: f64,
    du: f64,
    dd: f64,
) -> (Vector3<f64>, Vector3<f64>, f64) {
    let innov = dy_meas - (ss.c * x)[0];
    let filtered = x + ss.kalman_gain * innov;
    let next = ss.a * filtered + ss.b * Vector2::new(dd, du);
    let y_next = (ss.c * next)[0];
    (filtered, next, y_next)
}

pub fn write_arx_report(path: &Path, fit: Option<&ArxFit>, model: &ArxModel) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["quantity", "value"])?;
    let mut put = |k: String, v: f64| w.write_record([k, format!("{v:e}")]);
    for i in 0..ORDER {
        put(format!("a{}", i + 1), model.a[i])?;
    }
    for i in 0..ORDER {
        put(format!("b_cho{}", i + 1), model.b_cho[i])?;
    }
    for i in 0..ORDER {
        put(format!("b_ins{}", i + 1), model.b_ins[i])?;
    }
    let mut mags: Vec<f64> = model.roots().iter().map(|r| r.norm()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    for (i, m) in mags.iter().enumerate() {
        put(format!("root_modulus{}", i + 1), *m)?;
    }
    if let Some(f) = fit {
        put("residual_variance".into(), f.residual_variance)?;
        put("samples".into(), f.samples as f64)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSeeds, ScenarioId, SubjectTrace};
    use crate::util::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stable_model() -> ArxModel {
        // poles 0.9, 0.7, 0.5
        ArxModel {
            a: [-2.1, 1.43, -0.315],
            b_cho: [0.5, 0.8, 0.3],
            b_ins: [-2.0, -6.0, -3.0],
            convention: SignConvention::Adopted,
        }
    }

    #[test]
    fn zero_histories_predict_zero() {
        let m = ArxModel::paper_preset(SignConvention::Adopted);
        assert_eq!(
            arx_predict_1step(&m, &[0.0; 3], &[0.0; 3], &[0.0; 3]).unwrap(),
            0.0
        );
        assert!(arx_predict_1step(&m, &[0.0; 2], &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn preset_arithmetic() {
        let m = ArxModel::paper_preset(SignConvention::Adopted);
        let y = arx_predict_1step(&m, &[100.0; 3], &[0.0; 3], &[0.0; 3]).unwrap();
        assert!((y - (2.20 * 100.0 - 1.67 * 100.0 + 0.46 * 100.0)).abs() < 1e-12);
        assert!((y - 99.0).abs() < 1e-9);
        let imp = arx_predict_1step(&m, &[0.0; 3], &[0.0; 3], &[0.0, 1.0, 0.0]).unwrap();
        assert!(imp < 0.0);
    }

    #[test]
    fn preset_root_audit() {
        let adopted = ArxModel::paper_preset(SignConvention::Adopted);
        let literal = ArxModel::paper_preset(SignConvention::Literal);
        assert!(adopted.max_root_modulus() <= 1.01);
        assert!(literal.max_root_modulus() > 1.5);
    }

    #[test]
    fn roots_satisfy_polynomial() {
        for m in [
            stable_model(),
            ArxModel::paper_preset(SignConvention::Adopted),
        ] {
            let e = m.effective_a();
            for r in m.roots() {
                let p = r * r * r + r * r * e[0] + r * e[1] + e[2];
                assert!(p.norm() < 1e-10);
            }
        }
    }

    fn simulate(m: &ArxModel, op: OperatingPoint, n: usize, seed: u64) -> SampledTrace {
        let mut rng = rng_from(seed, &[]);
        let mut tr = SampledTrace::default();
        let mut dy = vec![0.0; n];
        let mut dd = vec![0.0; n];
        let mut du = vec![0.0; n];
        for k in 0..n {
            dd[k] = if rng.random_bool(0.1) {
                rng.random_range(10.0..80.0)
            } else {
                0.0
            };
            du[k] = rng.random_range(-op.u_bar..3.0);
            if k >= 3 {
                let h = |v: &Vec<f64>| [v[k - 1], v[k - 2], v[k - 3]];
                dy[k] = arx_predict_1step(m, &h(&dy), &h(&dd), &h(&du)).unwrap();
            }
            tr.push(k as u32 * 15, dy[k] + op.y_bar, du[k] + op.u_bar, dd[k]);
        }
        tr
    }

    #[test]
    fn identification_recovers_planted_model() {
        let m = ArxModel {
            b_cho: [0.05, 0.08, 0.03],
            b_ins: [-0.2, -0.6, -0.3],
            ..stable_model()
        };
        let ops = [
            OperatingPoint {
                y_bar: 120.0,
                u_bar: 0.3,
            },
            OperatingPoint {
                y_bar: 135.0,
                u_bar: 0.45,
            },
        ];
        let t1 = simulate(&m, ops[0], 400, 1);
        let t2 = simulate(&m, ops[1], 400, 2);
        let fit = identify_arx_traces(&[(&t1, ops[0]), (&t2, ops[1])]).unwrap();
        let got = fit.model;
        for i in 0..3 {
            assert!((got.a[i] - m.a[i]).abs() < 1e-8);
            assert!((got.b_cho[i] - m.b_cho[i]).abs() < 1e-8);
            assert!((got.b_ins[i] - m.b_ins[i]).abs() < 1e-8);
        }
        assert!(got.max_root_modulus() <= 1.0 + 1e-6);
    }

    /// Meals with either no bolus or a `grams / cr` bolus on the same tick.
    fn therapy_dataset(
        m: &ArxModel,
        op: OperatingPoint,
        cr: Option<f64>,
        scenario: ScenarioId,
    ) -> ScenarioDataset {
        let mut rng = rng_from(9, &[]);
        let n = 600;
        let (mut dy, mut dd, mut du) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut trace = SampledTrace::default();
        for k in 0..n {
            dd[k] = if rng.random_bool(0.08) {
                rng.random_range(20.0..90.0)
            } else {
                0.0
            };
            du[k] = cr.map_or(0.0, |cr| dd[k] / cr);
            if k >= 3 {
                let h = |v: &Vec<f64>| [v[k - 1], v[k - 2], v[k - 3]];
                dy[k] = arx_predict_1step(m, &h(&dy), &h(&dd), &h(&du)).unwrap();
            }
            trace.push(k as u32 * 15, dy[k] + op.y_bar, du[k] + op.u_bar, dd[k]);
        }
        ScenarioDataset {
            scenario,
            days: 0,
            seeds: DatasetSeeds { meals: 0, noise: 0 },
            subjects: vec![SubjectTrace {
                subject_id: 1,
                basal_rate: op.u_bar,
                equilibrium_glucose: op.y_bar,
                meals: vec![],
                trace,
            }],
        }
    }

    #[test]
    fn meal_locked_boluses_need_bolus_free_data() {
        let m = ArxModel {
            b_cho: [0.05, 0.08, 0.03],
            b_ins: [-0.2, -0.6, -0.3],
            ..stable_model()
        };
        let op = OperatingPoint {
            y_bar: 120.0,
            u_bar: 0.3,
        };
        let basal = therapy_dataset(&m, op, None, ScenarioId::I);
        let bolus = therapy_dataset(&m, op, Some(12.0), ScenarioId::II);
        // insulin and carbohydrate columns are proportional
        assert!(matches!(
            identify_arx(&bolus),
            Err(Error::Identification(_))
        ));
        // the basal-only trace has no insulin excitation at all
        assert!(matches!(
            identify_arx(&basal),
            Err(Error::Identification(_))
        ));
        let got = identify_arx_pooled(&[&basal, &bolus]).unwrap().model;
        for i in 0..3 {
            assert!((got.a[i] - m.a[i]).abs() < 1e-8);
            assert!((got.b_cho[i] - m.b_cho[i]).abs() < 1e-8);
            assert!((got.b_ins[i] - m.b_ins[i]).abs() < 1e-8);
        }
        assert!(identify_arx_pooled(&[]).is_err());
    }

    #[test]
    fn constant_data_is_rank_deficient() {
        let op = OperatingPoint {
            y_bar: 120.0,
            u_bar: 0.3,
        };
        let mut tr = SampledTrace::default();
        for k in 0..50 {
            tr.push(k * 15, 120.0, 0.3, 0.0);
        }
        assert!(matches!(
            identify_arx_traces(&[(&tr, op)]),
            Err(Error::Identification(_))
        ));
    }

    #[test]
    fn realization_matches_difference_equation() {
        let m = ArxModel::paper_preset(SignConvention::Adopted);
        let ss = realize_and_kalman(&m).unwrap();
        assert!(ss.is_controllable());
        let markov = ss.impulse_response(50);
        // impulse applied at k = 0 enters the difference equation at lag 1
        for input in 0..2 {
            let mut y = vec![0.0; 52];
            let mut v = vec![0.0; 52];
            v[0] = 1.0;
            let e = m.effective_a();
            let b = if input == 0 { m.b_cho } else { m.b_ins };
            for k in 1..52 {
                let mut acc = 0.0;
                for i in 1..=3 {
                    if k >= i {
                        acc += -e[i - 1] * y[k - i] + b[i - 1] * v[k - i];
                    }
                }
                y[k] = acc;
            }
            for (i, mk) in markov.iter().enumerate() {
                assert!(
                    (mk[input] - y[i + 1]).abs() < 1e-12,
                    "input {input} step {i}"
                );
            }
        }
    }

    #[test]
    fn scalar_riccati_closed_form() {
        for (a, q, r) in [(0.0, 1.0, 1e-6), (0.5, 1.0, 0.2), (0.95, 2.0, 3.0)] {
            let (p, k) = steady_state_kalman(
                &DMatrix::from_element(1, 1, a),
                &DMatrix::from_element(1, 1, 1.0),
                &DMatrix::from_element(1, 1, q),
                &DMatrix::from_element(1, 1, r),
            )
            .unwrap();
            // P^2 + P (R - a^2 R - Q) - Q R = 0
            let bq = r - a * a * r - q;
            let p_ref = (-bq + (bq * bq + 4.0 * q * r).sqrt()) / 2.0;
            assert!((p[(0, 0)] - p_ref).abs() < 1e-10 * (1.0 + p_ref));
            assert!((k[(0, 0)] - p_ref / (p_ref + r)).abs() < 1e-10);
        }
        let (_, k0) = steady_state_kalman(
            &DMatrix::zeros(1, 1),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1e-6),
        )
        .unwrap();
        assert!((k0[(0, 0)] - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn gain_is_scale_invariant() {
        let m = stable_model();
        let a = realize_with_noise(&m, 1.0, 0.3).unwrap();
        let b = realize_with_noise(&m, 2.0, 0.6).unwrap();
        assert!((a.kalman_gain - b.kalman_gain).amax() < 1e-9);
    }

    #[test]
    fn innovations_are_white() {
        let m = stable_model();
        let ss = realize_with_noise(&m, 1.0, 0.5).unwrap();
        let mut rng = rng_from(3, &[]);
        let mut x = Vector3::zeros();
        let mut xh = Vector3::zeros();
        let mut innov = Vec::new();
        for _ in 0..10_000 {
            let e: f64 = StandardNormal.sample(&mut rng);
            let y = (ss.c * x)[0] + 0.5f64.sqrt() * e;
            innov.push(y - (ss.c * xh)[0]);
            let w = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let (_, next, _) = kalman_step(&ss, &xh, y, 0.0, 0.0);
            xh = next;
            x = ss.a * x + w;
        }
        let mean = innov.iter().sum::<f64>() / innov.len() as f64;
        let var: f64 = innov.iter().map(|v| (v - mean).powi(2)).sum();
        let lag1: f64 = innov
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum();
        assert!((lag1 / var).abs() < 0.1, "{}", lag1 / var);
    }

    #[test]
    fn filter_tracks_noiseless_model() {
        let m = stable_model();
        let ss = realize_and_kalman(&m).unwrap();
        let (f, n, y) = kalman_step(&ss, &Vector3::zeros(), 0.0, 0.0, 0.0);
        assert_eq!((f, n, y), (Vector3::zeros(), Vector3::zeros(), 0.0));
        let mut rng = rng_from(4, &[]);
        let mut x = Vector3::new(5.0, -3.0, 1.0);
        let mut xh = Vector3::zeros();
        for _ in 0..200 {
            let du = rng.random_range(-0.3..2.0);
            let dd = if rng.random_bool(0.1) { 40.0 } else { 0.0 };
            let y = (ss.c * x)[0];
            let (_, next, _) = kalman_step(&ss, &xh, y, du, dd);
            xh = next;
            x = ss.a * x + ss.b * Vector2::new(dd, du);
        }
        assert!((x - xh).norm() < 1e-6);
    }

    #[test]
    fn report_lists_coefficients_and_roots() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("arx.csv");
        write_arx_report(&p, None, &ArxModel::paper_preset(SignConvention::Adopted)).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + 9 + 3);
    }
}
