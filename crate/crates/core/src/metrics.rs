//! Prediction accuracy, glycemic outcome metrics and paired t-tests.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::util::{mean, sample_std};

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::DimensionMismatch {
            context: "metric inputs",
            expected: y.len(),
            actual: y_hat.len(),
        });
    }
    if y.is_empty() {
        return Err(Error::InvalidArgument("metric inputs are empty".into()));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Mean absolute percentage error in percent. Zero references are rejected.
pub fn mape(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.contains(&0.0) {
        return Err(Error::Domain(
            "MAPE reference contains a zero sample".into(),
        ));
    }
    Ok(y.iter()
        .zip(y_hat)
        .map(|(a, b)| ((a - b) / a).abs())
        .sum::<f64>()
        / y.len() as f64
        * 100.0)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok((y
        .iter()
        .zip(y_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64)
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepErrors {
    pub mae: f64,
    pub mape: f64,
    pub rmse: f64,
}

impl StepErrors {
    pub fn compute(y: &[f64], y_hat: &[f64]) -> Result<Self> {
        Ok(StepErrors {
            mae: mae(y, y_hat)?,
            mape: mape(y, y_hat)?,
            rmse: rmse(y, y_hat)?,
        })
    }
}

/// Per-subject, per-step prediction errors. `steps[j - 1]` holds step `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPrediction {
    pub subject_id: u32,
    pub steps: Vec<StepErrors>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        MeanStd {
            mean: mean(xs),
            std: sample_std(xs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionReport {
    pub subjects: Vec<SubjectPrediction>,
}

impl PredictionReport {
    pub fn horizon(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.steps.len())
    }

    fn column(&self, j: usize, f: impl Fn(&StepErrors) -> f64) -> Vec<f64> {
        self.subjects.iter().map(|s| f(&s.steps[j - 1])).collect()
    }

    /// Population mean and standard deviation for step `j` (1-based):
    /// `[MAE, MAPE, RMSE]`.
    pub fn summary(&self, j: usize) -> [MeanStd; 3] {
        [
            MeanStd::of(&self.column(j, |e| e.mae)),
            MeanStd::of(&self.column(j, |e| e.mape)),
            MeanStd::of(&self.column(j, |e| e.rmse)),
        ]
    }

    pub fn mean_mae(&self) -> Vec<f64> {
        (1..=self.horizon())
            .map(|j| self.summary(j)[0].mean)
            .collect()
    }
}

/// Glucose band edges follow a closed-lower, open-upper convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlycemicReport {
    pub mean: f64,
    pub cv: f64,
    pub pct_below_54: f64,
    pub pct_below_70: f64,
    pub pct_70_140: f64,
    pub pct_70_180: f64,
    pub pct_above_180: f64,
    pub pct_above_250: f64,
}

pub const GLYCEMIC_LABELS: [&str; 8] = [
    "mean [mg/dL]",
    "CV [%]",
    "% < 54",
    "% < 70",
    "% in [70,140)",
    "% in [70,180)",
    "% >= 180",
    "% >= 250",
];

impl GlycemicReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.mean,
            self.cv,
            self.pct_below_54,
            self.pct_below_70,
            self.pct_70_140,
            self.pct_70_180,
            self.pct_above_180,
            self.pct_above_250,
        ]
    }
}

pub fn glycemic_metrics(glucose: &[f64]) -> Result<GlycemicReport> {
    if glucose.is_empty() {
        return Err(Error::InvalidArgument("glucose trace is empty".into()));
    }
    let n = glucose.len() as f64;
    let pct = |pred: &dyn Fn(f64) -> bool| {
        glucose.iter().filter(|&&g| pred(g)).count() as f64 / n * 100.0
    };
    let m = mean(glucose);
    Ok(GlycemicReport {
        mean: m,
        cv: 100.0 * sample_std(glucose) / m,
        pct_below_54: pct(&|g| g < 54.0),
        pct_below_70: pct(&|g| g < 70.0),
        pct_70_140: pct(&|g| (70.0..140.0).contains(&g)),
        pct_70_180: pct(&|g| (70.0..180.0).contains(&g)),
        pct_above_180: pct(&|g| g >= 180.0),
        pct_above_250: pct(&|g| g >= 250.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test on `a - b`.
///
/// Identical samples give `t = 0, p = 1`; differences that are constant but
/// nonzero have no defined statistic and are reported as degenerate.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "paired t-test",
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired t-test input".into()));
    }
    let df = d.len() - 1;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, p: 1.0, df });
    }
    let s = sample_std(&d);
    if s == 0.0 {
        return Err(Error::DegenerateTest(
            "differences have zero variance".into(),
        ));
    }
    let t = mean(&d) / (s / (d.len() as f64).sqrt());
    Ok(TTest {
        t,
        p: two_sided_p(t, df as f64),
        df,
    })
}

pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("positive degrees of freedom")
        .cdf(t)
}

pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Table-1 layout: one row per step, MAE/MAPE/RMSE mean and std for each
/// predictor. Writes `<stem>.csv` and `<stem>.md`.
pub fn write_prediction_table(
    stem: &Path,
    predictors: &[(&str, &PredictionReport)],
    ts_min: u32,
) -> Result<()> {
    let horizon = predictors
        .iter()
        .map(|(_, r)| r.horizon())
        .min()
        .unwrap_or(0);
    let mut csv = String::from("j,minutes");
    let mut md = String::from("| j | min |");
    let mut rule = String::from("|---|---|");
    for metric in ["mae", "mape", "rmse"] {
        for (name, _) in predictors {
            write!(csv, ",{name}_{metric}_mean,{name}_{metric}_std").unwrap();
            write!(md, " {} {name} |", metric.to_uppercase()).unwrap();
            rule.push_str("---|");
        }
    }
    csv.push('\n');
    md.push('\n');
    md.push_str(&rule);
    md.push('\n');
    for j in 1..=horizon {
        write!(csv, "{j},{}", j as u32 * ts_min).unwrap();
        write!(md, "| {j} | {} |", j as u32 * ts_min).unwrap();
        let sums: Vec<[MeanStd; 3]> = predictors.iter().map(|(_, r)| r.summary(j)).collect();
        for m in 0..3 {
            for s in &sums {
                write!(csv, ",{:.6},{:.6}", s[m].mean, s[m].std).unwrap();
                write!(md, " {:.2} ({:.2}) |", s[m].mean, s[m].std).unwrap();
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    write_text(&stem.with_extension("csv"), &csv)?;
    write_text(&stem.with_extension("md"), &md)
}

/// One scenario block of the outcome comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeBlock {
    pub scenario: String,
    pub multistep: Vec<GlycemicReport>,
    pub arx: Vec<GlycemicReport>,
}

impl OutcomeBlock {
    /// Rows of `(label, multistep, arx, p)`; `p` is `None` when the test is
    /// degenerate.
    pub fn rows(&self) -> Vec<(&'static str, MeanStd, MeanStd, Option<f64>)> {
        (0..8)
            .map(|i| {
                let a: Vec<f64> = self.multistep.iter().map(|r| r.values()[i]).collect();
                let b: Vec<f64> = self.arx.iter().map(|r| r.values()[i]).collect();
                let p = paired_t_test(&a, &b).ok().map(|t| t.p);
                (GLYCEMIC_LABELS[i], MeanStd::of(&a), MeanStd::of(&b), p)
            })
            .collect()
    }
}

/// Table-2 layout: metric rows per scenario, controller mean (std) columns
/// and the paired p-value. Writes `<stem>.csv` and `<stem>.md`.
pub fn write_outcome_table(stem: &Path, blocks: &[OutcomeBlock]) -> Result<()> {
    let mut csv =
        String::from("scenario,metric,multistep_mean,multistep_std,arx_mean,arx_std,p_value\n");
    let mut md =
        String::from("| scenario | metric | multi-step | ARX | p |\n|---|---|---|---|---|\n");
    for b in blocks {
        for (label, m, a, p) in b.rows() {
            let p_csv = p.map_or("NA".to_string(), |p| format!("{p:.6}"));
            let p_md = match p {
                None => "n/a".to_string(),
                Some(p) if p < 0.001 => "<0.001".to_string(),
                Some(p) => format!("{p:.3}"),
            };
            writeln!(
                csv,
                "{},{label},{:.6},{:.6},{:.6},{:.6},{p_csv}",
                b.scenario, m.mean, m.std, a.mean, a.std
            )
            .unwrap();
            writeln!(
                md,
                "| {} | {label} | {:.2} ({:.2}) | {:.2} ({:.2}) | {p_md} |",
                b.scenario, m.mean, m.std, a.mean, a.std
            )
            .unwrap();
        }
    }
    write_text(&stem.with_extension("csv"), &csv)?;
    write_text(&stem.with_extension("md"), &md)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Student-t CDF by direct quadrature of the angular form
    /// `F(t) = ∫_{-π/2}^{atan(t/√ν)} cos^{ν-1} θ dθ / ∫_{-π/2}^{π/2} cos^{ν-1} θ dθ`.
    fn t_cdf_quadrature(t: f64, nu: f64) -> f64 {
        let simpson = |a: f64, b: f64| {
            let n = 20_000;
            let h = (b - a) / n as f64;
            let f = |x: f64| x.cos().max(0.0).powf(nu - 1.0);
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let half = std::f64::consts::FRAC_PI_2;
        simpson(-half, (t / nu.sqrt()).atan()) / simpson(-half, half)
    }

    #[test]
    fn identical_inputs_give_zero_errors() {
        let y = [100.0, 120.0, 80.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(mape(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn two_point_example() {
        let y = [100.0, 110.0];
        let yh = [90.0, 120.0];
        assert!((mae(&y, &yh).unwrap() - 10.0).abs() < 1e-12);
        assert!((rmse(&y, &yh).unwrap() - 10.0).abs() < 1e-12);
        let expected = (10.0 / 100.0 + 10.0 / 110.0) / 2.0 * 100.0;
        assert!((mape(&y, &yh).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 9.545_454_545).abs() < 1e-8);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(
            mape(&[0.0, 1.0], &[1.0, 1.0]),
            Err(Error::Domain(_))
        ));
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn constant_trace() {
        let r = glycemic_metrics(&[100.0; 50]).unwrap();
        assert_eq!(r.mean, 100.0);
        assert_eq!(r.cv, 0.0);
        assert_eq!(r.pct_70_180, 100.0);
        assert_eq!(
            r.pct_below_70 + r.pct_below_54 + r.pct_above_180 + r.pct_above_250,
            0.0
        );
    }

    #[test]
    fn counted_bands() {
        let r = glycemic_metrics(&[60.0, 100.0, 200.0, 100.0]).unwrap();
        assert_eq!(r.pct_below_70, 25.0);
        assert_eq!(r.pct_70_180, 50.0);
        assert_eq!(r.pct_above_180, 25.0);
        assert_eq!(r.pct_below_54, 0.0);
    }

    #[test]
    fn band_edges() {
        let r = glycemic_metrics(&[54.0, 70.0, 140.0, 180.0, 250.0]).unwrap();
        assert_eq!(r.pct_below_54, 0.0);
        assert_eq!(r.pct_below_70, 20.0);
        assert_eq!(r.pct_70_140, 20.0);
        assert_eq!(r.pct_70_180, 40.0);
        assert_eq!(r.pct_above_180, 40.0);
        assert_eq!(r.pct_above_250, 20.0);
    }

    proptest! {
        #[test]
        fn partition_and_ordering(g in proptest::collection::vec(0.0f64..500.0, 1..300)) {
            let r = glycemic_metrics(&g).unwrap();
            prop_assert!((r.pct_below_70 + r.pct_70_180 + r.pct_above_180 - 100.0).abs() < 1e-9);
            prop_assert!(r.pct_below_54 <= r.pct_below_70);
            prop_assert!(r.pct_70_140 <= r.pct_70_180);
            prop_assert!(r.pct_above_250 <= r.pct_above_180);
            for v in r.values()[2..].iter() {
                prop_assert!((0.0..=100.0).contains(v));
            }
        }

        #[test]
        fn rmse_dominates_mae(pairs in proptest::collection::vec((1.0f64..400.0, 1.0f64..400.0), 1..100)) {
            let (y, yh): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            prop_assert!(rmse(&y, &yh).unwrap() >= mae(&y, &yh).unwrap() - 1e-12);
        }

        #[test]
        fn metrics_ignore_order(mut g in proptest::collection::vec(1.0f64..500.0, 2..100)) {
            let a = glycemic_metrics(&g).unwrap();
            g.reverse();
            let b = glycemic_metrics(&g).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn t_test_reference_example() {
        let a: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        let b = vec![0.0; 10];
        let r = paired_t_test(&a, &b).unwrap();
        // mean 5.5, sample variance 110/12
        let t_ref = 5.5 / ((110.0f64 / 12.0).sqrt() / 10f64.sqrt());
        assert!((r.t - t_ref).abs() < 1e-12);
        assert!((r.t - 5.7446).abs() < 1e-3);
        let p_ref = 2.0 * (1.0 - t_cdf_quadrature(t_ref, 9.0));
        assert!((r.p - p_ref).abs() < 1e-9);
        assert!((r.p - 2.78e-4).abs() < 1e-5);
        assert_eq!(r.df, 9);
    }

    #[test]
    fn t_test_symmetry_and_degenerate() {
        let a = [1.0, 3.0, 2.0, 5.0];
        let b = [0.5, 1.0, 2.5, 1.0];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        assert!(matches!(
            paired_t_test(&shifted, &a),
            Err(Error::DegenerateTest(_))
        ));
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn t_cdf_matches_quadrature() {
        for df in 1..=30 {
            for i in 0..=40 {
                let t = -10.0 + 0.5 * i as f64;
                let lib = student_t_cdf(t, df as f64);
                let oracle = t_cdf_quadrature(t, df as f64);
                assert!(
                    (lib - oracle).abs() < 1e-9,
                    "df={df} t={t}: {lib} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn tables_render() {
        let dir = tempfile::tempdir().unwrap();
        let step = StepErrors {
            mae: 1.0,
            mape: 1.0,
            rmse: 2.0,
        };
        let rep = PredictionReport {
            subjects: vec![
                SubjectPrediction {
                    subject_id: 1,
                    steps: vec![step; 8],
                },
                SubjectPrediction {
                    subject_id: 2,
                    steps: vec![step; 8],
                },
            ],
        };
        write_prediction_table(
            &dir.path().join("t1"),
            &[("multistep", &rep), ("arx", &rep)],
            15,
        )
        .unwrap();
        let csv = std::fs::read_to_string(dir.path().join("t1.csv")).unwrap();
        assert_eq!(csv.lines().count(), 9);
        let g = glycemic_metrics(&[100.0, 150.0]).unwrap();
        let block = OutcomeBlock {
            scenario: "B".into(),
            multistep: vec![g; 3],
            arx: vec![g; 3],
        };
        write_outcome_table(&dir.path().join("t2"), &[block]).unwrap();
        let md = std::fs::read_to_string(dir.path().join("t2.md")).unwrap();
        assert_eq!(md.lines().count(), 10);
    }
}
