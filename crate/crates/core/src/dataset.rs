//! Identification and validation datasets.
//!
//! Scenario I delivers basal insulin only, Scenario II adds a meal bolus of
//! `grams / CR` at each meal tick, and Scenario III repeats the Scenario II
//! therapy on an independent meal sequence for validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meals::{
    carbs_per_tick, generate_meals, read_meals_csv, write_meals_csv, MealChainConfig, MealEvent,
};
use crate::plant::{
    step_patient, CgmSensor, NoiseModel, PatientParams, PlantState, CGM_MAX, CGM_MIN,
};
use crate::predictor::{history_len, PredictorState};
use crate::util::derive_seed;
use crate::{SAMPLES_PER_DAY, SAMPLE_MINUTES};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    I,
    II,
    III,
}

impl ScenarioId {
    pub fn delivers_boluses(self) -> bool {
        !matches!(self, ScenarioId::I)
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::I => "I",
            ScenarioId::II => "II",
            ScenarioId::III => "III",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(ScenarioId::I),
            "II" => Ok(ScenarioId::II),
            "III" => Ok(ScenarioId::III),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset scenario '{other}'"
            ))),
        }
    }
}

/// CGM, insulin and carbohydrate samples on the 15-min grid. Row `k` holds
/// the CGM reading at `t_k` and the insulin and carbohydrates delivered over
/// `[t_k, t_k + 15)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampledTrace {
    pub t: Vec<u32>,
    pub y_cgm: Vec<f64>,
    pub u_ins: Vec<f64>,
    pub d_cho: Vec<f64>,
}

impl SampledTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn push(&mut self, t: u32, y: f64, u: f64, d: f64) {
        self.t.push(t);
        self.y_cgm.push(y);
        self.u_ins.push(u);
        self.d_cho.push(d);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.t.len();
        for (name, len) in [
            ("y_cgm", self.y_cgm.len()),
            ("u_ins", self.u_ins.len()),
            ("d_cho", self.d_cho.len()),
        ] {
            if len != n {
                return Err(Error::InvalidArgument(format!(
                    "column {name} has {len} rows, expected {n}"
                )));
            }
        }
        for w in self.t.windows(2) {
            if w[1] != w[0] + SAMPLE_MINUTES {
                return Err(Error::InvalidArgument(format!(
                    "non-uniform sampling at t={}",
                    w[1]
                )));
            }
        }
        if self.t.first().is_some_and(|t| t % SAMPLE_MINUTES != 0) {
            return Err(Error::InvalidArgument(
                "trace start is off the 15-min grid".into(),
            ));
        }
        if self.y_cgm.iter().any(|y| !(CGM_MIN..=CGM_MAX).contains(y)) {
            return Err(Error::InvalidArgument("CGM sample outside [0, 500]".into()));
        }
        if self
            .u_ins
            .iter()
            .chain(&self.d_cho)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "negative or non-finite input sample".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTrace {
    pub subject_id: u32,
    pub basal_rate: f64,
    pub equilibrium_glucose: f64,
    pub meals: Vec<MealEvent>,
    pub trace: SampledTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSeeds {
    pub meals: u64,
    pub noise: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDataset {
    pub scenario: ScenarioId,
    pub days: usize,
    pub seeds: DatasetSeeds,
    pub subjects: Vec<SubjectTrace>,
}

impl ScenarioDataset {
    pub fn subject(&self, subject_id: u32) -> Option<&SubjectTrace> {
        self.subjects.iter().find(|s| s.subject_id == subject_id)
    }
}

/// Meal seed actually used for a scenario/subject pair: Scenarios I and II
/// share meals, Scenario III draws an independent sequence.
fn subject_meal_seed(scenario: ScenarioId, base: u64, subject_id: u32) -> u64 {
    let stream = match scenario {
        ScenarioId::I | ScenarioId::II => 0x1d,
        ScenarioId::III => 0x7a,
    };
    derive_seed(base, &[stream, subject_id as u64])
}

pub fn generate_scenario(
    id: ScenarioId,
    cohort: &[PatientParams],
    meal_config: &MealChainConfig,
    seeds: DatasetSeeds,
    days: usize,
    noise: NoiseModel,
) -> Result<ScenarioDataset> {
    if cohort.is_empty() {
        return Err(Error::InvalidArgument("cohort is empty".into()));
    }
    if days == 0 {
        return Err(Error::InvalidArgument("days must be >= 1".into()));
    }
    use rayon::prelude::*;
    let subjects = cohort
        .par_iter()
        .map(|p| {
            let mut cfg = meal_config.clone();
            cfg.seed = subject_meal_seed(id, seeds.meals, p.subject_id);
            let meals = generate_meals(&cfg, days)?;
            let noise_seed = derive_seed(seeds.noise, &[id.tag(), p.subject_id as u64]);
            let trace = simulate_open_loop(
                p,
                &meals,
                id.delivers_boluses(),
                noise,
                noise_seed,
                days * SAMPLES_PER_DAY,
            )?;
            Ok(SubjectTrace {
                subject_id: p.subject_id,
                basal_rate: p.basal_rate,
                equilibrium_glucose: p.equilibrium_glucose,
                meals,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScenarioDataset {
        scenario: id,
        days,
        seeds,
        subjects,
    })
}

/// Conventional open-loop therapy: basal throughout, plus `grams / CR` at
/// each meal tick when `boluses` is set.
pub fn simulate_open_loop(
    params: &PatientParams,
    meals: &[MealEvent],
    boluses: bool,
    noise: NoiseModel,
    noise_seed: u64,
    samples: usize,
) -> Result<SampledTrace> {
    let carbs = carbs_per_tick(meals, samples);
    let mut sensor = CgmSensor::new(noise, noise_seed);
    let mut state = PlantState::equilibrium(params);
    let mut trace = SampledTrace::default();
    for (k, &d) in carbs.iter().enumerate() {
        let y = sensor.read(&state);
        let bolus = if boluses && d > 0.0 {
            d / params.cr
        } else {
            0.0
        };
        let u = params.basal_rate + bolus;
        trace.push(k as u32 * SAMPLE_MINUTES, y, u, d);
        state = step_patient(&state, params, u, d, SAMPLE_MINUTES as f64)?;
    }
    Ok(trace)
}

/// One training/validation example anchored at tick `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: u32,
    pub k: usize,
    pub state: PredictorState,
    /// `[u_k, .., u_{k+T-1}]`
    pub future_inputs: Vec<f64>,
    /// `[y_{k+1}, .., y_{k+T}]`
    pub future_outputs: Vec<f64>,
}

/// Number of windows a trace of `len` samples yields for horizon `t`.
pub fn window_count(len: usize, t: usize) -> usize {
    len.saturating_sub(history_len(t) + t)
}

/// Sliding windows over one trace. The first window sits at `k = 3T + 1`,
/// the first tick whose insulin history `u_{k-1} .. u_{k-3T-1}` lies inside
/// the trace.
pub fn windows_for_trace(subject_id: u32, trace: &SampledTrace, t: usize) -> Result<Vec<Window>> {
    if t == 0 {
        return Err(Error::InvalidArgument("horizon must be >= 1".into()));
    }
    let h = history_len(t);
    let count = window_count(trace.len(), t);
    if count == 0 {
        return Err(Error::InsufficientData(format!(
            "trace of {} samples is too short for horizon {t} (needs {})",
            trace.len(),
            h + t + 1
        )));
    }
    let mut out = Vec::with_capacity(count);
    for k in h..h + count {
        let cgm: Vec<f64> = (0..h).map(|i| trace.y_cgm[k - i]).collect();
        let ins: Vec<f64> = (0..h).map(|i| trace.u_ins[k - 1 - i]).collect();
        let cho: Vec<f64> = (0..h).map(|i| trace.d_cho[k - i]).collect();
        out.push(Window {
            subject_id,
            k,
            state: PredictorState::new(t, cgm, ins, cho)?,
            future_inputs: trace.u_ins[k..k + t].to_vec(),
            future_outputs: trace.y_cgm[k + 1..=k + t].to_vec(),
        });
    }
    Ok(out)
}

pub fn window_dataset(ds: &ScenarioDataset, t: usize) -> Result<Vec<Window>> {
    let mut all = Vec::new();
    for s in &ds.subjects {
        all.extend(windows_for_trace(s.subject_id, &s.trace, t)?);
    }
    Ok(all)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    scenario: ScenarioId,
    days: usize,
    seeds: DatasetSeeds,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    subject_id: u32,
    basal_rate: f64,
    equilibrium_glucose: f64,
    trace_file: String,
    meals_file: String,
}

pub fn scenario_dir(root: &Path, id: ScenarioId) -> PathBuf {
    root.join(format!("scenario_{id}"))
}

pub fn write_trace_csv(path: &Path, trace: &SampledTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_min", "y_cgm_mgdl", "u_ins_U", "d_cho_g"])?;
    for k in 0..trace.len() {
        w.write_record([
            trace.t[k].to_string(),
            trace.y_cgm[k].to_string(),
            trace.u_ins[k].to_string(),
            trace.d_cho[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<SampledTrace> {
    let mut r = csv::Reader::from_path(path)?;
    let mut trace = SampledTrace::default();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::format(path, format!("bad field {i} at line {:?}", rec.position()))
                })
        };
        trace.push(f(0)? as u32, f(1)?, f(2)?, f(3)?);
    }
    trace.validate()?;
    Ok(trace)
}

/// Persist under `root/scenario_<id>/`: one CSV per subject, one meal CSV
/// per subject and `manifest.json`.
pub fn write_dataset(root: &Path, ds: &ScenarioDataset) -> Result<PathBuf> {
    let dir = scenario_dir(root, ds.scenario);
    std::fs::create_dir_all(&dir)?;
    let mut subjects = Vec::new();
    for s in &ds.subjects {
        let trace_file = format!("subject_{:02}.csv", s.subject_id);
        let meals_file = format!("meals_subject_{:02}.csv", s.subject_id);
        write_trace_csv(&dir.join(&trace_file), &s.trace)?;
        write_meals_csv(&dir.join(&meals_file), &s.meals)?;
        subjects.push(ManifestSubject {
            subject_id: s.subject_id,
            basal_rate: s.basal_rate,
            equilibrium_glucose: s.equilibrium_glucose,
            trace_file,
            meals_file,
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        scenario: ds.scenario,
        days: ds.days,
        seeds: ds.seeds,
        subjects,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(dir)
}

pub fn read_dataset(root: &Path, id: ScenarioId) -> Result<ScenarioDataset> {
    let dir = scenario_dir(root, id);
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }
    if manifest.scenario != id {
        return Err(Error::format(
            &manifest_path,
            format!("manifest is for scenario {}", manifest.scenario),
        ));
    }
    let mut subjects = Vec::new();
    for s in manifest.subjects {
        subjects.push(SubjectTrace {
            subject_id: s.subject_id,
            basal_rate: s.basal_rate,
            equilibrium_glucose: s.equilibrium_glucose,
            meals: read_meals_csv(&dir.join(&s.meals_file))?,
            trace: read_trace_csv(&dir.join(&s.trace_file))?,
        });
    }
    Ok(ScenarioDataset {
        scenario: manifest.scenario,
        days: manifest.days,
        seeds: manifest.seeds,
        subjects,
    })
}
