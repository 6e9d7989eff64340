//! C ABI over `glucose-mpc`.
//!
//! Every fallible call returns a [`GmStatus`]; on failure the message is
//! available from [`gm_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. No call unwinds across
//! the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use glucose_mpc::arx::{realize_and_kalman, ArxModel, OperatingPoint, SignConvention};
use glucose_mpc::harness::PredictorBundle;
use glucose_mpc::metrics::{glycemic_metrics, paired_t_test};
use glucose_mpc::mpc::{
    solve_qp, ArxController, Controller, MpcConfig, MultiStepController, QpProblem,
};
use glucose_mpc::plant::{make_cohort, step_patient, PatientParams, PlantState};
use glucose_mpc::Error;
use nalgebra::{DMatrix, DVector};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    SolverFailure = 4,
    Io = 5,
    Panic = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GmStatus {
    match e {
        Error::SolverFailure { .. } | Error::RiccatiNonConvergence { .. } => {
            GmStatus::SolverFailure
        }
        Error::SimulationDiverged { .. }
        | Error::NonFinite(_)
        | Error::TrainingDiverged { .. }
        | Error::IllPosed(_) => GmStatus::Numerical,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Format { .. } => GmStatus::Io,
        _ => GmStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (GmStatus, String)>) -> GmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GmStatus::Ok
        }
        Ok(Err((s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            GmStatus::Panic
        }
    }
}

fn lib(e: Error) -> (GmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (GmStatus, String) {
    (GmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (GmStatus, String) {
    (GmStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or valid for `n` reads.
unsafe fn slice<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], (GmStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `out` must be null or valid for one write.
unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), (GmStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn gm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque virtual patient: parameters plus current plant state.
pub struct GmPatient {
    params: PatientParams,
    state: PlantState,
}

fn boxed_patient(
    params: PatientParams,
    out: *mut *mut GmPatient,
) -> Result<(), (GmStatus, String)> {
    let state = PlantState::equilibrium(&params);
    let p = Box::into_raw(Box::new(GmPatient { params, state }));
    // SAFETY: checked non-null by the caller of this helper.
    unsafe { out.write(p) };
    Ok(())
}

/// Nominal patient at equilibrium.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_new_nominal(
    subject_id: u32,
    out: *mut *mut GmPatient,
) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        boxed_patient(PatientParams::nominal(subject_id), out)
    })
}

/// Subject `index` (0-based) of the cohort `make_cohort(n, seed)`, at
/// equilibrium.
///
/// # Safety
/// `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_from_cohort(
    seed: u64,
    n: u32,
    index: u32,
    out: *mut *mut GmPatient,
) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if index >= n {
            return Err(invalid(format!(
                "index {index} out of range for cohort of {n}"
            )));
        }
        let cohort = make_cohort(n as usize, seed).map_err(lib)?;
        boxed_patient(cohort[index as usize].clone(), out)
    })
}

/// Scale the plant's insulin sensitivity; the current state is kept.
///
/// # Safety
/// `p` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_set_sensitivity(p: *mut GmPatient, scale: f64) -> GmStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("patient"))?;
        p.params = p.params.with_insulin_sensitivity(scale).map_err(lib)?;
        Ok(())
    })
}

/// Advance by `dt_min` minutes with constant insulin (U) and carbohydrate
/// (g) delivery; writes the new plasma glucose.
///
/// # Safety
/// `p` must be a live handle; `glucose_out` null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_step(
    p: *mut GmPatient,
    insulin_u: f64,
    carbs_g: f64,
    dt_min: f64,
    glucose_out: *mut f64,
) -> GmStatus {
    guard(|| {
        let p = p.as_mut().ok_or_else(|| null("patient"))?;
        p.state = step_patient(&p.state, &p.params, insulin_u, carbs_g, dt_min).map_err(lib)?;
        if !glucose_out.is_null() {
            glucose_out.write(p.state.glucose());
        }
        Ok(())
    })
}

/// # Safety
/// `p` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_glucose(p: *const GmPatient, out: *mut f64) -> GmStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("patient"))?;
        write(out, p.state.glucose(), "out")
    })
}

/// Basal insulin per 15-min step and equilibrium glucose.
///
/// # Safety
/// `p` must be a live handle; outputs null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_operating_point(
    p: *const GmPatient,
    basal_out: *mut f64,
    glucose_out: *mut f64,
) -> GmStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("patient"))?;
        write(basal_out, p.params.basal_rate, "basal_out")?;
        write(glucose_out, p.params.equilibrium_glucose, "glucose_out")
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gm_patient_free(p: *mut GmPatient) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Opaque closed-loop controller.
pub struct GmController {
    inner: Box<dyn Controller>,
}

/// One controller decision.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GmTick {
    pub t_min: u32,
    pub cgm: f64,
    pub setpoint: f64,
    pub command_u: f64,
    pub qp_objective: f64,
    pub qp_iterations: u32,
    pub slack_norm: f64,
    pub fallback: bool,
    pub clamped_gains: u32,
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (GmStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

fn boxed_controller(
    c: Box<dyn Controller>,
    out: *mut *mut GmController,
) -> Result<(), (GmStatus, String)> {
    // SAFETY: checked non-null by the caller of this helper.
    unsafe { out.write(Box::into_raw(Box::new(GmController { inner: c }))) };
    Ok(())
}

/// Multi-step MPC from a trained bundle directory, default tuning.
///
/// # Safety
/// `bundle_dir` must be a NUL-terminated string; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_controller_load_multistep(
    bundle_dir: *const c_char,
    basal_u: f64,
    out: *mut *mut GmController,
) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let b = PredictorBundle::load(path_arg(bundle_dir)?).map_err(lib)?;
        let cfg = MpcConfig {
            horizon: b.horizon,
            ..MpcConfig::multistep()
        };
        let c = MultiStepController::new(b.predictor().map_err(lib)?, cfg, basal_u).map_err(lib)?;
        boxed_controller(Box::new(c), out)
    })
}

/// ARX MPC around `(y_bar, u_bar)`. `bundle_dir` selects the identified
/// model of a trained bundle; null selects the published coefficients.
///
/// # Safety
/// `bundle_dir` must be null or a NUL-terminated string; `out` valid for
/// one write.
#[no_mangle]
pub unsafe extern "C" fn gm_controller_new_arx(
    bundle_dir: *const c_char,
    y_bar: f64,
    u_bar: f64,
    out: *mut *mut GmController,
) -> GmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if !(y_bar.is_finite() && u_bar.is_finite() && u_bar >= 0.0) {
            return Err(invalid("operating point must be finite with u_bar >= 0"));
        }
        let (model, horizon) = if bundle_dir.is_null() {
            (
                ArxModel::paper_preset(SignConvention::Adopted),
                MpcConfig::arx().horizon,
            )
        } else {
            let b = PredictorBundle::load(path_arg(bundle_dir)?).map_err(lib)?;
            (b.arx, b.horizon)
        };
        let ss = realize_and_kalman(&model).map_err(lib)?;
        let cfg = MpcConfig {
            horizon,
            ..MpcConfig::arx()
        };
        let warmup = glucose_mpc::predictor::history_len(horizon);
        let c =
            ArxController::new(ss, OperatingPoint { y_bar, u_bar }, cfg, warmup).map_err(lib)?;
        boxed_controller(Box::new(c), out)
    })
}

/// One tick: CGM reading at `t_min` and carbohydrates announced for the
/// coming period. The command is in `tick_out.command_u`.
///
/// # Safety
/// `c` must be a live handle and `tick_out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_controller_step(
    c: *mut GmController,
    t_min: u32,
    cgm: f64,
    carbs_g: f64,
    tick_out: *mut GmTick,
) -> GmStatus {
    guard(|| {
        let c = c.as_mut().ok_or_else(|| null("controller"))?;
        if tick_out.is_null() {
            return Err(null("tick_out"));
        }
        if !(cgm.is_finite() && carbs_g.is_finite() && carbs_g >= 0.0) {
            return Err(invalid("cgm must be finite and carbs_g finite and >= 0"));
        }
        let r = c.inner.step(t_min, cgm, carbs_g);
        tick_out.write(GmTick {
            t_min: r.t_min,
            cgm: r.cgm,
            setpoint: r.setpoint,
            command_u: r.command_u,
            qp_objective: r.qp_objective,
            qp_iterations: r.qp_iterations as u32,
            slack_norm: r.slack_norm,
            fallback: r.fallback,
            clamped_gains: r.clamped_gains as u32,
        });
        Ok(())
    })
}

/// # Safety
/// `c` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gm_controller_free(c: *mut GmController) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Solve `min 1/2 z'Hz + f'z` s.t. `lower <= z <= upper`. `h` is `n x n`
/// row-major and must be symmetric positive definite. Bounds may be
/// infinite.
///
/// # Safety
/// `h` valid for `n*n` reads; `f`, `lower`, `upper` for `n` reads; `z_out`
/// for `n` writes; `objective_out` null or valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_qp_solve_box(
    n: usize,
    h: *const f64,
    f: *const f64,
    lower: *const f64,
    upper: *const f64,
    z_out: *mut f64,
    objective_out: *mut f64,
) -> GmStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("n must be >= 1"));
        }
        let hh = slice(h, n * n, "h")?;
        let ff = slice(f, n, "f")?;
        let lo = slice(lower, n, "lower")?;
        let up = slice(upper, n, "upper")?;
        if z_out.is_null() {
            return Err(null("z_out"));
        }
        if hh.iter().chain(ff).any(|v| !v.is_finite()) || lo.iter().chain(up).any(|v| v.is_nan()) {
            return Err(invalid("non-finite problem data"));
        }
        if lo.iter().zip(up).any(|(l, u)| l > u) {
            return Err(invalid("lower bound exceeds upper bound"));
        }
        let p = QpProblem::boxed(
            DMatrix::from_row_slice(n, n, hh),
            DVector::from_column_slice(ff),
            DVector::from_column_slice(lo),
            DVector::from_column_slice(up),
        );
        let sol = solve_qp(&p, None).map_err(lib)?;
        std::slice::from_raw_parts_mut(z_out, n).copy_from_slice(sol.z.as_slice());
        if !objective_out.is_null() {
            objective_out.write(sol.objective);
        }
        Ok(())
    })
}

/// Outcome metrics of a glucose trace, in percent where applicable.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GmGlycemic {
    pub mean: f64,
    pub cv: f64,
    pub pct_below_54: f64,
    pub pct_below_70: f64,
    pub pct_70_140: f64,
    pub pct_70_180: f64,
    pub pct_above_180: f64,
    pub pct_above_250: f64,
}

/// # Safety
/// `glucose` valid for `n` reads; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn gm_glycemic_metrics(
    glucose: *const f64,
    n: usize,
    out: *mut GmGlycemic,
) -> GmStatus {
    guard(|| {
        let g = slice(glucose, n, "glucose")?;
        let r = glycemic_metrics(g).map_err(lib)?;
        write(
            out,
            GmGlycemic {
                mean: r.mean,
                cv: r.cv,
                pct_below_54: r.pct_below_54,
                pct_below_70: r.pct_below_70,
                pct_70_140: r.pct_70_140,
                pct_70_180: r.pct_70_180,
                pct_above_180: r.pct_above_180,
                pct_above_250: r.pct_above_250,
            },
            "out",
        )
    })
}

/// Two-sided paired t-test on `a - b`.
///
/// # Safety
/// `a`, `b` valid for `n` reads; `t_out`, `p_out` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn gm_paired_t_test(
    a: *const f64,
    b: *const f64,
    n: usize,
    t_out: *mut f64,
    p_out: *mut f64,
) -> GmStatus {
    guard(|| {
        let a = slice(a, n, "a")?;
        let b = slice(b, n, "b")?;
        if t_out.is_null() || p_out.is_null() {
            return Err(null("t_out/p_out"));
        }
        let r = paired_t_test(a, b).map_err(lib)?;
        t_out.write(r.t);
        p_out.write(r.p);
        Ok(())
    })
}
