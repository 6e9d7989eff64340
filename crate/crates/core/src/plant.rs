//! Virtual patient: glucose-insulin dynamics, CGM sensor and insulin pump.
//!
//! The metabolic model is a minimal-model variant with two subcutaneous
//! insulin compartments feeding plasma insulin, a remote insulin-action
//! state, and a two-compartment gut:
//!
//! ```text
//! dIsc/dt  = -Isc/tau1 + ID/(tau1*CI)
//! dIp/dt   = (Isc - Ip)/tau2
//! dIeff/dt = -p2*Ieff + p2*SI*s*Ip
//! dG/dt    = -(GEZI + Ieff)*G + EGP + D2/(tau_m*VG)
//! dD1/dt   = Dcho - D1/tau_m
//! dD2/dt   = (D1 - D2)/tau_m
//! ```
//!
//! `ID` is the insulin infusion rate in uU/min, `Dcho` the carbohydrate
//! ingestion rate in mg/min and `s` the insulin-sensitivity multiplier.
//! Inputs are held constant over each call to [`step_patient`].

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from;

/// CGM and pump hardware range.
pub const CGM_MIN: f64 = 0.0;
pub const CGM_MAX: f64 = 500.0;
pub const PUMP_MAX_U: f64 = 25.0;
pub const PUMP_INCREMENT_U: f64 = 0.05;
const PUMP_STEPS_PER_UNIT: f64 = 20.0;

/// Default RK4 substep in minutes.
pub const DEFAULT_SUBSTEP_MIN: f64 = 1.0;

const IDX_G: usize = 0;
const IDX_IEFF: usize = 1;
const IDX_ISC: usize = 2;
const IDX_IP: usize = 3;
const IDX_D1: usize = 4;
const IDX_D2: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeParams {
    /// First subcutaneous insulin time constant (min).
    pub tau1: f64,
    /// Second subcutaneous/plasma insulin time constant (min).
    pub tau2: f64,
    /// Insulin clearance (mL/min).
    pub ci: f64,
    /// Insulin action rate (1/min).
    pub p2: f64,
    /// Insulin sensitivity (mL/uU/min).
    pub si: f64,
    /// Glucose effectiveness at zero insulin (1/min).
    pub gezi: f64,
    /// Endogenous glucose production (mg/dL/min).
    pub egp: f64,
    /// Glucose distribution volume (dL).
    pub vg: f64,
    /// Gut absorption time constant (min).
    pub tau_m: f64,
}

impl OdeParams {
    pub fn nominal() -> Self {
        OdeParams {
            tau1: 49.0,
            tau2: 47.0,
            ci: 2010.0,
            p2: 0.0106,
            si: 8.11e-4,
            gezi: 2.2e-3,
            egp: 1.33,
            vg: 253.0,
            tau_m: 40.0,
        }
    }

    fn as_array(&self) -> [f64; 9] {
        [
            self.tau1, self.tau2, self.ci, self.p2, self.si, self.gezi, self.egp, self.vg,
            self.tau_m,
        ]
    }

    fn from_array(v: [f64; 9]) -> Self {
        OdeParams {
            tau1: v[0],
            tau2: v[1],
            ci: v[2],
            p2: v[3],
            si: v[4],
            gezi: v[5],
            egp: v[6],
            vg: v[7],
            tau_m: v[8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub subject_id: u32,
    /// kg
    pub body_mass: f64,
    /// Basal insulin in U per 15-min step.
    pub basal_rate: f64,
    /// Carbohydrate-to-insulin ratio in g/U.
    pub cr: f64,
    pub insulin_sensitivity_scale: f64,
    pub ode: OdeParams,
    /// Fasting equilibrium under `basal_rate` (mg/dL).
    pub equilibrium_glucose: f64,
}

impl PatientParams {
    /// Nominal adult subject.
    pub fn nominal(subject_id: u32) -> Self {
        let ode = OdeParams::nominal();
        let basal_rate = 0.30;
        let mut p = PatientParams {
            subject_id,
            body_mass: 75.0,
            basal_rate,
            cr: 0.0,
            insulin_sensitivity_scale: 1.0,
            ode,
            equilibrium_glucose: 0.0,
        };
        p.equilibrium_glucose = p.steady_state_glucose(basal_rate);
        p.cr = p.balanced_cr();
        p
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.basal_rate > 0.0
            && self.cr > 0.0
            && self.body_mass > 0.0
            && self.insulin_sensitivity_scale > 0.0
            && self.insulin_sensitivity_scale <= 2.0
            && self
                .ode
                .as_array()
                .iter()
                .all(|v| v.is_finite() && *v > 0.0)
            && self.equilibrium_glucose.is_finite()
            && self.equilibrium_glucose > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "patient {} has out-of-range parameters",
                self.subject_id
            )))
        }
    }

    fn effective_si(&self) -> f64 {
        self.ode.si * self.insulin_sensitivity_scale
    }

    /// Steady-state plasma glucose under a constant insulin rate (U per step).
    pub fn steady_state_glucose(&self, basal_u_per_step: f64) -> f64 {
        let ip = insulin_rate_uu_per_min(basal_u_per_step, 15.0) / self.ode.ci;
        self.ode.egp / (self.ode.gezi + self.effective_si() * ip)
    }

    /// CR at which a meal bolus cancels the meal's linearized glucose area.
    fn balanced_cr(&self) -> f64 {
        self.equilibrium_glucose * self.effective_si() * 1e6 * self.ode.vg / (self.ode.ci * 1000.0)
    }

    /// Copy with a different insulin-sensitivity multiplier. The fasting
    /// equilibrium is recomputed for the same basal rate; CR is unchanged.
    pub fn with_insulin_sensitivity(&self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "insulin sensitivity scale {scale} outside (0, 2]"
            )));
        }
        let mut p = self.clone();
        p.insulin_sensitivity_scale = scale;
        p.equilibrium_glucose = p.steady_state_glucose(p.basal_rate);
        Ok(p)
    }
}

fn insulin_rate_uu_per_min(units: f64, dt_min: f64) -> f64 {
    units * 1e6 / dt_min
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub x: [f64; 6],
    /// Minutes since simulation start.
    pub clock: f64,
}

impl PlantState {
    pub fn glucose(&self) -> f64 {
        self.x[IDX_G]
    }

    pub fn remote_insulin(&self) -> f64 {
        self.x[IDX_IEFF]
    }

    pub fn subcutaneous_insulin(&self) -> [f64; 2] {
        [self.x[IDX_ISC], self.x[IDX_IP]]
    }

    pub fn gut(&self) -> [f64; 2] {
        [self.x[IDX_D1], self.x[IDX_D2]]
    }

    /// Fasting steady state under the patient's basal rate, at clock 0.
    pub fn equilibrium(params: &PatientParams) -> Self {
        let ip = insulin_rate_uu_per_min(params.basal_rate, 15.0) / params.ode.ci;
        let ieff = params.effective_si() * ip;
        let g = params.ode.egp / (params.ode.gezi + ieff);
        PlantState {
            x: [g, ieff, ip, ip, 0.0, 0.0],
            clock: 0.0,
        }
    }
}

fn rhs(x: &[f64; 6], p: &PatientParams, insulin_uu_min: f64, carbs_mg_min: f64) -> [f64; 6] {
    let o = &p.ode;
    let g = x[IDX_G];
    let ieff = x[IDX_IEFF];
    let isc = x[IDX_ISC];
    let ip = x[IDX_IP];
    let d1 = x[IDX_D1];
    let d2 = x[IDX_D2];
    [
        -(o.gezi + ieff) * g + o.egp + d2 / (o.tau_m * o.vg),
        -o.p2 * ieff + o.p2 * p.effective_si() * ip,
        -isc / o.tau1 + insulin_uu_min / (o.tau1 * o.ci),
        (isc - ip) / o.tau2,
        carbs_mg_min - d1 / o.tau_m,
        (d1 - d2) / o.tau_m,
    ]
}

fn axpy(x: &[f64; 6], a: f64, k: &[f64; 6]) -> [f64; 6] {
    let mut out = *x;
    for i in 0..6 {
        out[i] += a * k[i];
    }
    out
}

/// Advance the patient by `dt` minutes with constant inputs, using RK4 at
/// 1-min substeps. `insulin` is in U and `carbs` in g, both delivered
/// uniformly over `dt`.
pub fn step_patient(
    state: &PlantState,
    params: &PatientParams,
    insulin: f64,
    carbs: f64,
    dt: f64,
) -> Result<PlantState> {
    step_patient_with_substep(state, params, insulin, carbs, dt, DEFAULT_SUBSTEP_MIN)
}

/// As [`step_patient`] with an explicit RK4 substep (must divide `dt`).
pub fn step_patient_with_substep(
    state: &PlantState,
    params: &PatientParams,
    insulin: f64,
    carbs: f64,
    dt: f64,
    substep: f64,
) -> Result<PlantState> {
    if !(dt > 0.0) || !is_integer_ratio(15.0, dt) {
        return Err(Error::InvalidArgument(format!(
            "dt={dt} must divide 15 min"
        )));
    }
    if !(substep > 0.0) || !is_integer_ratio(dt, substep) {
        return Err(Error::InvalidArgument(format!(
            "substep {substep} must divide dt={dt}"
        )));
    }
    if !(insulin >= 0.0) || !(carbs >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "inputs must be non-negative (insulin {insulin}, carbs {carbs})"
        )));
    }
    let n = (dt / substep).round() as usize;
    let h = dt / n as f64;
    let u = insulin_rate_uu_per_min(insulin, dt);
    let d = carbs * 1000.0 / dt;
    let mut x = state.x;
    for _ in 0..n {
        let k1 = rhs(&x, params, u, d);
        let k2 = rhs(&axpy(&x, 0.5 * h, &k1), params, u, d);
        let k3 = rhs(&axpy(&x, 0.5 * h, &k2), params, u, d);
        let k4 = rhs(&axpy(&x, h, &k3), params, u, d);
        for i in 0..6 {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    for v in x.iter_mut().skip(1) {
        // RK4 can undershoot zero by rounding on fully drained compartments.
        if *v < 0.0 && *v > -1e-9 {
            *v = 0.0;
        }
    }
    let clock = state.clock + dt;
    let g = x[IDX_G];
    if !(g > 0.0 && g < 1000.0) || x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::SimulationDiverged {
            subject: params.subject_id,
            t_min: clock,
            glucose: g,
        });
    }
    Ok(PlantState { x, clock })
}

fn is_integer_ratio(num: f64, den: f64) -> bool {
    let r = num / den;
    (r - r.round()).abs() < 1e-9 && r.round() >= 1.0
}

/// CGM sensor error model: stationary AR(1) with the given lag-1
/// autocorrelation per 15-min sample and marginal standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub autocorrelation: f64,
    pub marginal_std: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            autocorrelation: 0.0,
            marginal_std: 0.0,
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            autocorrelation: 0.7,
            marginal_std: 2.0,
        }
    }
}

fn clip_cgm(v: f64) -> f64 {
    v.clamp(CGM_MIN, CGM_MAX)
}

/// Single CGM reading with noise drawn from the stationary marginal.
pub fn read_cgm(state: &PlantState, noise: &NoiseModel, rng_seed: u64) -> f64 {
    let g = state.glucose();
    if noise.marginal_std == 0.0 {
        return clip_cgm(g);
    }
    let mut rng = rng_from(rng_seed, &[0xc9]);
    let w: f64 = rng.sample(StandardNormal);
    clip_cgm(g + noise.marginal_std * w)
}

/// Stateful CGM with AR(1) error, one reading per sample period.
#[derive(Debug, Clone)]
pub struct CgmSensor {
    noise: NoiseModel,
    rng: ChaCha8Rng,
    error: Option<f64>,
}

impl CgmSensor {
    pub fn new(noise: NoiseModel, seed: u64) -> Self {
        CgmSensor {
            noise,
            rng: rng_from(seed, &[0xc9, 1]),
            error: None,
        }
    }

    pub fn read(&mut self, state: &PlantState) -> f64 {
        let sigma = self.noise.marginal_std;
        if sigma == 0.0 {
            return clip_cgm(state.glucose());
        }
        let w: f64 = self.rng.sample(StandardNormal);
        let phi = self.noise.autocorrelation;
        let e = match self.error {
            None => sigma * w,
            Some(prev) => phi * prev + sigma * (1.0 - phi * phi).sqrt() * w,
        };
        self.error = Some(e);
        clip_cgm(state.glucose() + e)
    }
}

/// Pump actuator: clamp to the hardware range and round down to the
/// delivery increment.
pub fn quantize_dose(units: f64) -> f64 {
    if !units.is_finite() {
        return 0.0;
    }
    let u = units.clamp(0.0, PUMP_MAX_U);
    let steps = (u * PUMP_STEPS_PER_UNIT + 1e-9).floor();
    (steps / PUMP_STEPS_PER_UNIT).min(PUMP_MAX_U)
}

/// Inter-subject variability used by [`make_cohort_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortSpec {
    /// Coefficient of variation of the log-normal parameter draws.
    pub cv: f64,
    /// Coefficient of variation of the fasting glucose target.
    pub target_cv: f64,
    pub max_attempts: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            cv: 0.2,
            target_cv: 0.08,
            max_attempts: 200,
        }
    }
}

/// Sample `n` subjects around the nominal parameters with the default spread.
pub fn make_cohort(n: usize, seed: u64) -> Result<Vec<PatientParams>> {
    make_cohort_with(&CohortSpec::default(), n, seed)
}

pub fn make_cohort_with(spec: &CohortSpec, n: usize, seed: u64) -> Result<Vec<PatientParams>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cohort size must be >= 1".into()));
    }
    (0..n)
        .map(|i| sample_subject(spec, i as u32 + 1, seed))
        .collect()
}

fn lognormal_factor(rng: &mut ChaCha8Rng, cv: f64) -> f64 {
    if cv == 0.0 {
        return 1.0;
    }
    let sigma = (1.0 + cv * cv).ln().sqrt();
    // median-one factor
    LogNormal::new(0.0, sigma).expect("valid sigma").sample(rng)
}

fn sample_subject(spec: &CohortSpec, subject_id: u32, seed: u64) -> Result<PatientParams> {
    let mut rng = rng_from(seed, &[0xc0, subject_id as u64]);
    let nominal = PatientParams::nominal(subject_id);
    let mut last_reason = String::new();
    for _ in 0..spec.max_attempts.max(1) {
        let mut v = nominal.ode.as_array();
        for p in v.iter_mut() {
            *p *= lognormal_factor(&mut rng, spec.cv);
        }
        let body_mass = nominal.body_mass * lognormal_factor(&mut rng, spec.cv);
        // distribution volume scales with body mass
        v[7] *= body_mass / nominal.body_mass;
        let ode = OdeParams::from_array(v);
        let target = nominal.equilibrium_glucose * lognormal_factor(&mut rng, spec.target_cv);

        let needed_ieff = ode.egp / target - ode.gezi;
        if needed_ieff <= 0.0 {
            last_reason = "no positive basal rate reaches the fasting target".into();
            continue;
        }
        let needed_basal = needed_ieff / ode.si * ode.ci * 15.0 / 1e6;
        let basal_rate = (needed_basal * PUMP_STEPS_PER_UNIT).round() / PUMP_STEPS_PER_UNIT;
        if !(PUMP_INCREMENT_U..=2.0).contains(&basal_rate) {
            last_reason = format!("basal rate {basal_rate:.3} U/step out of range");
            continue;
        }
        let mut p = PatientParams {
            subject_id,
            body_mass,
            basal_rate,
            cr: 0.0,
            insulin_sensitivity_scale: 1.0,
            ode,
            equilibrium_glucose: 0.0,
        };
        match equilibrate(&p) {
            Ok(g) if (70.0..=200.0).contains(&g) => {
                p.equilibrium_glucose = g;
                p.cr = p.balanced_cr();
                p.validate()?;
                return Ok(p);
            }
            Ok(g) => last_reason = format!("fasting glucose {g:.1} mg/dL out of range"),
            Err(e) => last_reason = e.to_string(),
        }
    }
    Err(Error::CohortGeneration {
        subject: subject_id,
        reason: last_reason,
    })
}

/// Newton iteration on the fasting fixed point under the basal rate.
/// Returns the equilibrium plasma glucose.
pub fn equilibrate(params: &PatientParams) -> Result<f64> {
    let u = insulin_rate_uu_per_min(params.basal_rate, 15.0);
    let mut x = PlantState::equilibrium(params).x;
    for _ in 0..200 {
        let f = rhs(&x, params, u, 0.0);
        let norm = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if norm < 1e-13 {
            return Ok(x[IDX_G]);
        }
        let mut jac = nalgebra::SMatrix::<f64, 6, 6>::zeros();
        for j in 0..6 {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = rhs(&xp, params, u, 0.0);
            let fm = rhs(&xm, params, u, 0.0);
            for i in 0..6 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let rhs_vec = nalgebra::SVector::<f64, 6>::from_column_slice(&f);
        let delta = jac
            .lu()
            .solve(&rhs_vec)
            .ok_or_else(|| Error::CohortGeneration {
                subject: params.subject_id,
                reason: "singular Jacobian at equilibrium".into(),
            })?;
        for i in 0..6 {
            x[i] -= delta[i];
        }
    }
    Err(Error::CohortGeneration {
        subject: params.subject_id,
        reason: "equilibration did not converge in 200 iterations".into(),
    })
}

pub const COHORT_HEADER: &str = "# glucose-mpc cohort v1";

#[derive(Debug, Serialize, Deserialize)]
struct CohortRecord {
    subject_id: u32,
    body_mass_kg: f64,
    basal_rate_u_per_step: f64,
    cr_g_per_u: f64,
    insulin_sensitivity_scale: f64,
    equilibrium_glucose_mgdl: f64,
    tau1_min: f64,
    tau2_min: f64,
    ci_ml_per_min: f64,
    p2_per_min: f64,
    si_ml_per_uu_per_min: f64,
    gezi_per_min: f64,
    egp_mgdl_per_min: f64,
    vg_dl: f64,
    tau_m_min: f64,
}

impl From<&PatientParams> for CohortRecord {
    fn from(p: &PatientParams) -> Self {
        CohortRecord {
            subject_id: p.subject_id,
            body_mass_kg: p.body_mass,
            basal_rate_u_per_step: p.basal_rate,
            cr_g_per_u: p.cr,
            insulin_sensitivity_scale: p.insulin_sensitivity_scale,
            equilibrium_glucose_mgdl: p.equilibrium_glucose,
            tau1_min: p.ode.tau1,
            tau2_min: p.ode.tau2,
            ci_ml_per_min: p.ode.ci,
            p2_per_min: p.ode.p2,
            si_ml_per_uu_per_min: p.ode.si,
            gezi_per_min: p.ode.gezi,
            egp_mgdl_per_min: p.ode.egp,
            vg_dl: p.ode.vg,
            tau_m_min: p.ode.tau_m,
        }
    }
}

impl From<CohortRecord> for PatientParams {
    fn from(r: CohortRecord) -> Self {
        PatientParams {
            subject_id: r.subject_id,
            body_mass: r.body_mass_kg,
            basal_rate: r.basal_rate_u_per_step,
            cr: r.cr_g_per_u,
            insulin_sensitivity_scale: r.insulin_sensitivity_scale,
            equilibrium_glucose: r.equilibrium_glucose_mgdl,
            ode: OdeParams {
                tau1: r.tau1_min,
                tau2: r.tau2_min,
                ci: r.ci_ml_per_min,
                p2: r.p2_per_min,
                si: r.si_ml_per_uu_per_min,
                gezi: r.gezi_per_min,
                egp: r.egp_mgdl_per_min,
                vg: r.vg_dl,
                tau_m: r.tau_m_min,
            },
        }
    }
}

/// Write the cohort as a versioned CSV: a header comment line followed by
/// one record per subject.
pub fn write_cohort(path: &Path, cohort: &[PatientParams]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{COHORT_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    for p in cohort {
        w.serialize(CohortRecord::from(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cohort(path: &Path) -> Result<Vec<PatientParams>> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != COHORT_HEADER {
        return Err(Error::format(
            path,
            format!("expected header '{COHORT_HEADER}'"),
        ));
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.deserialize::<CohortRecord>() {
        let p = PatientParams::from(rec?);
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}
