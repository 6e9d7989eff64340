//! Receding-horizon controller: QP construction for the multi-step affine
//! predictor and for the ARX/Kalman baseline, a dense active-set QP solver,
//! and the per-tick controller state machines.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::arx::{kalman_step, ArxStateSpace, OperatingPoint};
use crate::error::{Error, Result};
use crate::plant::{quantize_dose, PUMP_MAX_U};
use crate::predictor::{history_len, AffinePredictor, PredictorState};
use crate::{SAMPLES_PER_DAY, SAMPLE_MINUTES};

pub const MINUTES_PER_DAY: u32 = (SAMPLES_PER_DAY as u32) * SAMPLE_MINUTES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub ts_min: u32,
    pub q: f64,
    pub r: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Slack penalty is `slack_factor * q`.
    pub slack_factor: f64,
    pub day_target: f64,
    pub night_target: f64,
    /// Daytime is `[day_start_min, day_end_min)` minutes after midnight.
    pub day_start_min: u32,
    pub day_end_min: u32,
    pub clamp_positive_gains: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self::multistep()
    }
}

impl MpcConfig {
    pub fn multistep() -> Self {
        MpcConfig {
            horizon: 8,
            ts_min: SAMPLE_MINUTES,
            q: 1.0,
            r: 10.0,
            u_min: 0.0,
            u_max: PUMP_MAX_U,
            y_min: 0.0,
            y_max: 500.0,
            slack_factor: 1e4,
            day_target: 110.0,
            night_target: 125.0,
            day_start_min: 5 * 60,
            day_end_min: 22 * 60,
            clamp_positive_gains: true,
        }
    }

    pub fn arx() -> Self {
        MpcConfig {
            r: 1.5,
            ..Self::multistep()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.ts_min != SAMPLE_MINUTES {
            return bad("horizon must be >= 1 and ts_min must equal the 15-min sampling period");
        }
        if !(self.q > 0.0 && self.r > 0.0 && self.slack_factor > 0.0) {
            return bad("q, r and slack_factor must be > 0");
        }
        if !(self.u_min < self.u_max && self.y_min < self.y_max) {
            return bad("bounds must satisfy u_min < u_max and y_min < y_max");
        }
        if self.u_min < 0.0 || self.u_max > PUMP_MAX_U {
            return bad("insulin bounds must lie within the pump range [0, 25] U");
        }
        if self.day_start_min >= self.day_end_min || self.day_end_min > MINUTES_PER_DAY {
            return bad("daytime window must satisfy day_start < day_end <= 1440");
        }
        Ok(())
    }

    pub fn target_at(&self, clock_min: u32) -> f64 {
        let m = clock_min % MINUTES_PER_DAY;
        if (self.day_start_min..self.day_end_min).contains(&m) {
            self.day_target
        } else {
            self.night_target
        }
    }
}

/// Setpoints for the `T` predicted samples, evaluated tick by tick starting
/// at the current clock.
pub fn build_setpoint(cfg: &MpcConfig, clock_min: u32, horizon: usize) -> Vec<f64> {
    (0..horizon)
        .map(|i| cfg.target_at(clock_min + i as u32 * cfg.ts_min))
        .collect()
}

/// `min 1/2 z'Hz + f'z + constant` subject to `lower <= z <= upper` and
/// `a z <= b`. Infinite bounds are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub constant: f64,
}

impl QpProblem {
    pub fn boxed(
        h: DMatrix<f64>,
        f: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Self {
        let n = f.len();
        QpProblem {
            h,
            f,
            lower,
            upper,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            constant: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z) + self.constant
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        let dims = [
            ("H rows", self.h.nrows()),
            ("H cols", self.h.ncols()),
            ("lower", self.lower.len()),
            ("upper", self.upper.len()),
            ("A cols", self.a.ncols()),
        ];
        for (ctx, d) in dims {
            if d != n {
                return Err(Error::DimensionMismatch {
                    context: if ctx.starts_with('H') {
                        "QP Hessian"
                    } else {
                        "QP bounds"
                    },
                    expected: n,
                    actual: d,
                });
            }
        }
        if self.a.nrows() != self.b.len() {
            return Err(Error::DimensionMismatch {
                context: "QP constraint rows",
                expected: self.a.nrows(),
                actual: self.b.len(),
            });
        }
        if self
            .h
            .iter()
            .chain(self.f.iter())
            .chain(self.a.iter())
            .chain(self.b.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("QP data".into()));
        }
        if (0..n).any(|j| {
            !(self.lower[j] <= self.upper[j]) || self.lower[j].is_nan() || self.upper[j].is_nan()
        }) {
            return Err(Error::InvalidArgument("QP bounds cross".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `|Hz + f + C'λ|_inf` over all constraints written as `c'z <= d`.
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    /// Most negative multiplier (0 when all are nonnegative).
    pub dual_infeasibility: f64,
}

impl QpSolution {
    pub fn kkt_residual(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

/// Constraint `c'z <= d` with a sparse representation for bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Con {
    Lower(usize),
    Upper(usize),
    Row(usize),
}

struct Constraints<'a> {
    p: &'a QpProblem,
    list: Vec<Con>,
}

impl<'a> Constraints<'a> {
    fn new(p: &'a QpProblem) -> Self {
        let mut list = Vec::new();
        for j in 0..p.dim() {
            if p.lower[j].is_finite() {
                list.push(Con::Lower(j));
            }
            if p.upper[j].is_finite() {
                list.push(Con::Upper(j));
            }
        }
        list.extend((0..p.a.nrows()).map(Con::Row));
        Constraints { p, list }
    }

    fn normal_dot(&self, c: Con, v: &DVector<f64>) -> f64 {
        match c {
            Con::Lower(j) => -v[j],
            Con::Upper(j) => v[j],
            Con::Row(r) => self.p.a.row(r).transpose().dot(v),
        }
    }

    fn rhs(&self, c: Con) -> f64 {
        match c {
            Con::Lower(j) => -self.p.lower[j],
            Con::Upper(j) => self.p.upper[j],
            Con::Row(r) => self.p.b[r],
        }
    }

    fn add_normal(&self, c: Con, scale: f64, out: &mut DVector<f64>) {
        match c {
            Con::Lower(j) => out[j] -= scale,
            Con::Upper(j) => out[j] += scale,
            Con::Row(r) => out.axpy(scale, &self.p.a.row(r).transpose(), 1.0),
        }
    }

    fn write_normal(&self, c: Con, k: &mut DMatrix<f64>, row: usize) {
        let n = self.p.dim();
        for j in 0..n {
            k[(row, j)] = 0.0;
        }
        match c {
            Con::Lower(j) => k[(row, j)] = -1.0,
            Con::Upper(j) => k[(row, j)] = 1.0,
            Con::Row(r) => {
                for j in 0..n {
                    k[(row, j)] = self.p.a[(r, j)];
                }
            }
        }
    }
}

pub const QP_MAX_ITER: usize = 500;

fn solve_kkt(k: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = k.clone().full_piv_lu();
    let mut x = lu.solve(rhs)?;
    let r = rhs - k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Primal active-set method. `start` must be feasible; when omitted the
/// origin projected onto the bounds is used and must satisfy the general rows.
pub fn solve_qp(p: &QpProblem, start: Option<&DVector<f64>>) -> Result<QpSolution> {
    p.check()?;
    let n = p.dim();
    let cons = Constraints::new(p);
    let scale = 1.0 + p.h.amax() + p.f.amax();
    let mut z = match start {
        Some(s) => s.clone(),
        None => DVector::from_fn(n, |j, _| 0f64.clamp(p.lower[j], p.upper[j])),
    };
    if z.len() != n {
        return Err(Error::DimensionMismatch {
            context: "QP start point",
            expected: n,
            actual: z.len(),
        });
    }
    let feas_tol = 1e-9 * (1.0 + z.amax());
    for &c in &cons.list {
        if cons.normal_dot(c, &z) - cons.rhs(c) > feas_tol {
            return Err(Error::InvalidArgument(
                "QP start point is infeasible".into(),
            ));
        }
    }
    // working set starts with the bounds active at the start point
    let mut work: Vec<Con> = Vec::new();
    for &c in &cons.list {
        if let Con::Lower(j) | Con::Upper(j) = c {
            let at = match c {
                Con::Lower(_) => z[j] == p.lower[j],
                _ => z[j] == p.upper[j],
            };
            if at
                && !work
                    .iter()
                    .any(|w| matches!(w, Con::Lower(i) | Con::Upper(i) if *i == j))
            {
                work.push(c);
            }
        }
    }

    let mut lambda_w: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < QP_MAX_ITER {
        iterations += 1;
        let m = work.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for (i, &c) in work.iter().enumerate() {
            cons.write_normal(c, &mut k, n + i);
            for j in 0..n {
                k[(j, n + i)] = k[(n + i, j)];
            }
        }
        let g = &p.h * &z + &p.f;
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&g));
        let sol = solve_kkt(&k, &rhs).ok_or_else(|| Error::SolverFailure {
            iterations,
            stationarity: g.amax(),
            feasibility: 0.0,
        })?;
        let step = sol.rows(0, n).into_owned();
        lambda_w = sol.rows(n, m).iter().copied().collect();

        if step.amax() <= 1e-13 * (1.0 + z.amax()) {
            // stationary on the working set: check multiplier signs
            let (imin, lmin) =
                lambda_w
                    .iter()
                    .enumerate()
                    .fold(
                        (usize::MAX, 0.0),
                        |acc, (i, &l)| if l < acc.1 { (i, l) } else { acc },
                    );
            if imin == usize::MAX || lmin >= -1e-12 * scale {
                converged = true;
                break;
            }
            work.remove(imin);
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        for &c in &cons.list {
            if work.contains(&c) {
                continue;
            }
            let cp = cons.normal_dot(c, &step);
            if cp > 1e-14 * (1.0 + step.amax()) {
                let slack = (cons.rhs(c) - cons.normal_dot(c, &z)).max(0.0);
                let a = slack / cp;
                if a < alpha {
                    alpha = a;
                    blocking = Some(c);
                }
            }
        }
        z.axpy(alpha, &step, 1.0);
        if let Some(c) = blocking {
            work.push(c);
        }
        for &c in &work {
            match c {
                Con::Lower(j) => z[j] = p.lower[j],
                Con::Upper(j) => z[j] = p.upper[j],
                Con::Row(_) => {}
            }
        }
    }

    let diag = diagnostics(&cons, &z, &work, &lambda_w);
    if !converged {
        return Err(Error::SolverFailure {
            iterations,
            stationarity: diag.0,
            feasibility: diag.1,
        });
    }
    Ok(QpSolution {
        objective: p.objective(&z),
        z,
        iterations,
        stationarity: diag.0,
        feasibility: diag.1,
        complementarity: diag.2,
        dual_infeasibility: diag.3,
    })
}

fn diagnostics(
    cons: &Constraints<'_>,
    z: &DVector<f64>,
    work: &[Con],
    lambda_w: &[f64],
) -> (f64, f64, f64, f64) {
    let p = cons.p;
    let mut grad = &p.h * z + &p.f;
    let mut comp: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for (&c, &l) in work.iter().zip(lambda_w) {
        cons.add_normal(c, l, &mut grad);
        comp = comp.max((l * (cons.normal_dot(c, z) - cons.rhs(c))).abs());
        dual = dual.max(-l);
    }
    let feas = cons
        .list
        .iter()
        .map(|&c| cons.normal_dot(c, z) - cons.rhs(c))
        .fold(0.0, f64::max);
    (grad.amax(), feas, comp, dual)
}

/// A QP built from an affine output prediction `F + G ΔU` together with the
/// data needed to interpret its solution.
#[derive(Debug, Clone)]
pub struct MpcProblem {
    pub qp: QpProblem,
    pub horizon: usize,
    pub free: Vec<f64>,
    pub g: DMatrix<f64>,
    pub setpoint: Vec<f64>,
    pub basal: f64,
    pub clamped_gains: usize,
}

impl MpcProblem {
    /// Feasible start: basal everywhere, slacks covering any violation.
    pub fn start(&self) -> DVector<f64> {
        let t = self.horizon;
        let mut z = DVector::zeros(2 * t);
        for i in 0..t {
            z[t + i] = (-self.qp.b[i]).max(-self.qp.b[t + i]).max(0.0);
        }
        z
    }
}

/// Dense prediction `F + G ΔU` with quadratic tracking cost and softened
/// output bounds. Decision vector `[ΔU (T), slack (T)]`.
pub fn build_qp(
    free: &[f64],
    g: &DMatrix<f64>,
    setpoint: &[f64],
    basal: f64,
    cfg: &MpcConfig,
) -> Result<MpcProblem> {
    let t = free.len();
    if g.nrows() != t || g.ncols() != t || setpoint.len() != t {
        return Err(Error::DimensionMismatch {
            context: "MPC prediction data",
            expected: t,
            actual: g.nrows(),
        });
    }
    if free.iter().chain(g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("predictor output".into()));
    }
    let n = 2 * t;
    let rho = cfg.slack_factor * cfg.q;
    let fv = DVector::from_column_slice(free);
    let err = &fv - DVector::from_column_slice(setpoint);
    let mut h = DMatrix::zeros(n, n);
    let gtg = g.transpose() * g * (2.0 * cfg.q) + DMatrix::identity(t, t) * (2.0 * cfg.r);
    h.view_mut((0, 0), (t, t)).copy_from(&gtg);
    for i in 0..t {
        h[(t + i, t + i)] = 2.0 * rho;
    }
    let mut f = DVector::zeros(n);
    f.rows_mut(0, t)
        .copy_from(&(g.transpose() * &err * (2.0 * cfg.q)));
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::from_element(n, f64::INFINITY);
    for i in 0..t {
        lower[i] = cfg.u_min - basal;
        upper[i] = cfg.u_max - basal;
    }
    let mut a = DMatrix::zeros(2 * t, n);
    let mut b = DVector::zeros(2 * t);
    for i in 0..t {
        for j in 0..t {
            a[(i, j)] = g[(i, j)];
            a[(t + i, j)] = -g[(i, j)];
        }
        a[(i, t + i)] = -1.0;
        a[(t + i, t + i)] = -1.0;
        b[i] = cfg.y_max - free[i];
        b[t + i] = free[i] - cfg.y_min;
    }
    Ok(MpcProblem {
        qp: QpProblem {
            h,
            f,
            lower,
            upper,
            a,
            b,
            constant: cfg.q * err.norm_squared(),
        },
        horizon: t,
        free: free.to_vec(),
        g: g.clone(),
        setpoint: setpoint.to_vec(),
        basal,
        clamped_gains: 0,
    })
}

/// QP for the multi-step affine predictor at state `x`.
pub fn build_qp_affine(
    pred: &AffinePredictor,
    x: &PredictorState,
    setpoint: &[f64],
    basal: f64,
    cfg: &MpcConfig,
) -> Result<MpcProblem> {
    let free = pred.free_response(x)?;
    let mut gains = pred.gains(x)?;
    let mut clamped = 0;
    if cfg.clamp_positive_gains {
        for g in gains.iter_mut() {
            if *g > 0.0 {
                *g = 0.0;
                clamped += 1;
            }
        }
    }
    let t = gains.len();
    let g = DMatrix::from_fn(t, t, |i, j| if j <= i { gains[j] } else { 0.0 });
    let mut p = build_qp(&free, &g, setpoint, basal, cfg)?;
    p.clamped_gains = clamped;
    Ok(p)
}

/// Free response and input map of the ARX realization over `T` steps.
/// `filtered` is the measurement-updated state at the current tick; the
/// announced carbohydrates `dd_now` enter at the current tick only.
pub fn arx_prediction_maps(
    ss: &ArxStateSpace,
    filtered: &Vector3<f64>,
    dd_now: f64,
    horizon: usize,
) -> (Vec<f64>, DMatrix<f64>) {
    let bd = ss.b.column(0).into_owned();
    let bu = ss.b.column(1).into_owned();
    let mut x = ss.a * filtered + bd * dd_now;
    let mut free = Vec::with_capacity(horizon);
    // markov[i] = C A^i B_u
    let mut markov = Vec::with_capacity(horizon);
    let mut v = bu;
    for _ in 0..horizon {
        free.push((ss.c * x)[0]);
        x = ss.a * x;
        markov.push((ss.c * v)[0]);
        v = ss.a * v;
    }
    let g = DMatrix::from_fn(
        horizon,
        horizon,
        |i, j| if j <= i { markov[i - j] } else { 0.0 },
    );
    (free, g)
}

pub fn build_qp_arx(
    ss: &ArxStateSpace,
    filtered: &Vector3<f64>,
    op: OperatingPoint,
    setpoint: &[f64],
    dd_now: f64,
    cfg: &MpcConfig,
) -> Result<MpcProblem> {
    let (free_dev, g) = arx_prediction_maps(ss, filtered, dd_now, setpoint.len());
    let free: Vec<f64> = free_dev.iter().map(|d| d + op.y_bar).collect();
    build_qp(&free, &g, setpoint, op.u_bar, cfg)
}

/// One row of the controller log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t_min: u32,
    pub cgm: f64,
    pub setpoint: f64,
    pub command_u: f64,
    pub qp_objective: f64,
    pub qp_iterations: usize,
    pub slack_norm: f64,
    pub fallback: bool,
    pub clamped_gains: usize,
}

/// Closed-loop controller: one call per tick, one command per call.
pub trait Controller: Send {
    /// `cgm` is the reading at `t_min`; `announced_carbs` is the meal
    /// announced for the coming period. Never fails: problems fall back to
    /// basal and are flagged in the record.
    fn step(&mut self, t_min: u32, cgm: f64, announced_carbs: f64) -> TickRecord;
    fn basal(&self) -> f64;
}

fn finish(problem: &MpcProblem, cfg: &MpcConfig, rec: &mut TickRecord) {
    let start = problem.start();
    match solve_qp(&problem.qp, Some(&start)) {
        Ok(sol) => {
            let t = problem.horizon;
            let u0 = problem.basal + sol.z[0];
            rec.command_u = quantize_dose(u0.clamp(cfg.u_min, cfg.u_max));
            rec.qp_objective = sol.objective;
            rec.qp_iterations = sol.iterations;
            rec.slack_norm = sol.z.rows(t, t).norm();
        }
        Err(e) => {
            log::warn!("t={} min: QP failed ({e}); delivering basal", rec.t_min);
            rec.fallback = true;
        }
    }
}

fn record(t_min: u32, cgm: f64, setpoint: f64, basal: f64) -> TickRecord {
    TickRecord {
        t_min,
        cgm,
        setpoint,
        command_u: quantize_dose(basal),
        qp_objective: 0.0,
        qp_iterations: 0,
        slack_norm: 0.0,
        fallback: false,
        clamped_gains: 0,
    }
}

/// MPC on the learned multi-step predictor.
pub struct MultiStepController {
    predictor: AffinePredictor,
    cfg: MpcConfig,
    basal: f64,
    cgm: VecDeque<f64>,
    ins: VecDeque<f64>,
    cho: VecDeque<f64>,
}

impl MultiStepController {
    pub fn new(predictor: AffinePredictor, cfg: MpcConfig, basal: f64) -> Result<Self> {
        cfg.validate()?;
        if predictor.horizon() != cfg.horizon {
            return Err(Error::DimensionMismatch {
                context: "controller horizon",
                expected: cfg.horizon,
                actual: predictor.horizon(),
            });
        }
        Ok(MultiStepController {
            predictor,
            cfg,
            basal,
            cgm: VecDeque::new(),
            ins: VecDeque::new(),
            cho: VecDeque::new(),
        })
    }

    fn state(&self) -> Option<PredictorState> {
        let h = history_len(self.cfg.horizon);
        if self.cgm.len() < h || self.ins.len() < h {
            return None;
        }
        let take = |q: &VecDeque<f64>| q.iter().take(h).copied().collect::<Vec<_>>();
        PredictorState::new(
            self.cfg.horizon,
            take(&self.cgm),
            take(&self.ins),
            take(&self.cho),
        )
        .ok()
    }
}

impl Controller for MultiStepController {
    fn step(&mut self, t_min: u32, cgm: f64, announced_carbs: f64) -> TickRecord {
        let h = history_len(self.cfg.horizon);
        self.cgm.push_front(cgm);
        self.cho.push_front(announced_carbs);
        self.cgm.truncate(h);
        self.cho.truncate(h);
        let setpoint = build_setpoint(&self.cfg, t_min, self.cfg.horizon);
        let mut rec = record(t_min, cgm, setpoint[0], self.basal);
        if let Some(x) = self.state() {
            match build_qp_affine(&self.predictor, &x, &setpoint, self.basal, &self.cfg) {
                Ok(problem) => {
                    rec.clamped_gains = problem.clamped_gains;
                    finish(&problem, &self.cfg, &mut rec);
                }
                Err(e) => {
                    log::warn!("t={t_min} min: prediction failed ({e}); delivering basal");
                    rec.fallback = true;
                }
            }
        }
        self.ins.push_front(rec.command_u);
        self.ins.truncate(h);
        rec
    }

    fn basal(&self) -> f64 {
        self.basal
    }
}

/// MPC on the ARX realization with a steady-state Kalman filter. The filter
/// runs from the first tick; commands stay at basal for `warmup_ticks`.
pub struct ArxController {
    ss: ArxStateSpace,
    op: OperatingPoint,
    cfg: MpcConfig,
    prior: Vector3<f64>,
    ticks: usize,
    warmup_ticks: usize,
}

impl ArxController {
    pub fn new(
        ss: ArxStateSpace,
        op: OperatingPoint,
        cfg: MpcConfig,
        warmup_ticks: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(ArxController {
            ss,
            op,
            cfg,
            prior: Vector3::zeros(),
            ticks: 0,
            warmup_ticks,
        })
    }
}

impl Controller for ArxController {
    fn step(&mut self, t_min: u32, cgm: f64, announced_carbs: f64) -> TickRecord {
        let setpoint = build_setpoint(&self.cfg, t_min, self.cfg.horizon);
        let mut rec = record(t_min, cgm, setpoint[0], self.op.u_bar);
        let dy = cgm - self.op.y_bar;
        let filtered = self.prior + self.ss.kalman_gain * (dy - (self.ss.c * self.prior)[0]);
        if self.ticks >= self.warmup_ticks {
            match build_qp_arx(
                &self.ss,
                &filtered,
                self.op,
                &setpoint,
                announced_carbs,
                &self.cfg,
            ) {
                Ok(problem) => finish(&problem, &self.cfg, &mut rec),
                Err(e) => {
                    log::warn!("t={t_min} min: ARX prediction failed ({e}); delivering basal");
                    rec.fallback = true;
                }
            }
        }
        let (_, next, _) = kalman_step(
            &self.ss,
            &self.prior,
            dy,
            rec.command_u - self.op.u_bar,
            announced_carbs,
        );
        self.prior = next;
        self.ticks += 1;
        rec
    }

    fn basal(&self) -> f64 {
        self.op.u_bar
    }
}

pub fn write_controller_log(path: &Path, log: &[TickRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "t_min",
        "cgm",
        "setpoint",
        "command_U",
        "qp_objective",
        "qp_iterations",
        "slack_norm",
        "fallback_flag",
    ])?;
    for r in log {
        w.write_record([
            r.t_min.to_string(),
            format!("{:.6}", r.cgm),
            format!("{:.1}", r.setpoint),
            format!("{:.2}", r.command_u),
            format!("{:.6}", r.qp_objective),
            r.qp_iterations.to_string(),
            format!("{:.6e}", r.slack_norm),
            u8::from(r.fallback).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Predicted outputs for a given ΔU from an MPC problem (used in tests and
/// reports).
pub fn predicted_outputs(problem: &MpcProblem, du: &[f64]) -> Vec<f64> {
    let y = &problem.g * DVector::from_column_slice(du);
    problem
        .free
        .iter()
        .zip(y.iter())
        .map(|(f, v)| f + v)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arx::{realize_and_kalman, ArxModel, SignConvention};
    use crate::predictor::{ForcedGains, FreeResponse};
    use crate::util::rng_from;
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    /// Exact oracle: every subset of constraints (up to `n` of them) treated
    /// as equalities, keeping the best feasible stationary point.
    fn enumerate_oracle(p: &QpProblem) -> (DVector<f64>, f64) {
        let cons = Constraints::new(p);
        let n = p.dim();
        let m = cons.list.len();
        let mut best: Option<(DVector<f64>, f64)> = None;
        for mask in 0u32..(1 << m) {
            let act: Vec<Con> = (0..m)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| cons.list[i])
                .collect();
            if act.len() > n {
                continue;
            }
            let k = act.len();
            let mut kk = DMatrix::zeros(n + k, n + k);
            kk.view_mut((0, 0), (n, n)).copy_from(&p.h);
            let mut rhs = DVector::zeros(n + k);
            rhs.rows_mut(0, n).copy_from(&(-&p.f));
            for (i, &c) in act.iter().enumerate() {
                cons.write_normal(c, &mut kk, n + i);
                for j in 0..n {
                    kk[(j, n + i)] = kk[(n + i, j)];
                }
                rhs[n + i] = cons.rhs(c);
            }
            let Some(sol) = kk.clone().full_piv_lu().solve(&rhs) else {
                continue;
            };
            if (&kk * &sol - &rhs).amax() > 1e-9 {
                continue;
            }
            let z = sol.rows(0, n).into_owned();
            if cons
                .list
                .iter()
                .any(|&c| cons.normal_dot(c, &z) - cons.rhs(c) > 1e-9)
            {
                continue;
            }
            let obj = p.objective(&z);
            if best.as_ref().is_none_or(|b| obj < b.1) {
                best = Some((z, obj));
            }
        }
        best.expect("feasible problem")
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn setpoint_schedule() {
        let cfg = MpcConfig::multistep();
        assert_eq!(build_setpoint(&cfg, 8 * 60, 8), vec![110.0; 8]);
        assert_eq!(build_setpoint(&cfg, 23 * 60 + 30, 8), vec![125.0; 8]);
        let s = build_setpoint(&cfg, 21 * 60 + 30, 8);
        assert_eq!(&s[..2], &[110.0, 110.0]);
        assert_eq!(&s[2..], &[125.0; 6]);
        assert_eq!(build_setpoint(&cfg, 4 * 60 + 45, 2), vec![125.0, 110.0]);
    }

    #[test]
    fn scalar_and_planar_examples() {
        let one = |f: f64| {
            let p = QpProblem::boxed(
                DMatrix::from_element(1, 1, 2.0),
                dv(&[f]),
                dv(&[0.0]),
                dv(&[25.0]),
            );
            solve_qp(&p, None).unwrap().z[0]
        };
        assert!((one(-6.0) - 3.0).abs() < 1e-12);
        assert_eq!(one(-60.0), 25.0);
        let p = QpProblem::boxed(
            DMatrix::from_diagonal(&dv(&[2.0, 2.0])),
            dv(&[-2.0, -16.0]),
            dv(&[0.0, 0.0]),
            dv(&[3.0, 3.0]),
        );
        let s = solve_qp(&p, None).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-12 && s.z[1] == 3.0);
        assert!(s.kkt_residual() < 1e-10);
    }

    #[test]
    fn random_box_qps_match_enumeration() {
        let mut rng = rng_from(11, &[]);
        for trial in 0..200 {
            let n = 1 + trial % 4;
            let h = random_spd(n, &mut rng);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-20.0..20.0));
            let lo = DVector::from_fn(n, |_, _| rng.random_range(-3.0..0.0));
            let hi = DVector::from_fn(n, |i, _| lo[i] + rng.random_range(0.5..5.0));
            let p = QpProblem::boxed(h, f, lo, hi);
            let s = solve_qp(&p, None).unwrap();
            let (z, obj) = enumerate_oracle(&p);
            assert!((&s.z - &z).amax() < 1e-6, "trial {trial}");
            assert!((s.objective - obj).abs() < 1e-8 * (1.0 + obj.abs()));
            assert!(
                s.kkt_residual() < 1e-8,
                "trial {trial}: {}",
                s.kkt_residual()
            );
        }
    }

    #[test]
    fn general_rows_match_enumeration() {
        let mut rng = rng_from(12, &[]);
        for trial in 0..100 {
            let n = 2 + trial % 2;
            let h = random_spd(n, &mut rng);
            let f = DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
            let lo = DVector::from_element(n, -2.0);
            let hi = DVector::from_element(n, 2.0);
            let a = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
            // origin strictly feasible
            let b = DVector::from_fn(2, |_, _| rng.random_range(0.1..1.0));
            let p = QpProblem {
                a,
                b,
                ..QpProblem::boxed(h, f, lo, hi)
            };
            let s = solve_qp(&p, None).unwrap();
            let (z, obj) = enumerate_oracle(&p);
            assert!((&s.z - &z).amax() < 1e-6, "trial {trial}");
            assert!((s.objective - obj).abs() < 1e-8 * (1.0 + obj.abs()));
            assert!(s.kkt_residual() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_problems() {
        let p = QpProblem::boxed(
            DMatrix::identity(2, 2),
            dv(&[0.0]),
            dv(&[0.0, 0.0]),
            dv(&[1.0, 1.0]),
        );
        assert!(solve_qp(&p, None).is_err());
        let p = QpProblem::boxed(DMatrix::identity(1, 1), dv(&[0.0]), dv(&[1.0]), dv(&[0.0]));
        assert!(solve_qp(&p, None).is_err());
        let p = QpProblem {
            a: DMatrix::from_element(1, 1, 1.0),
            b: dv(&[-1.0]),
            ..QpProblem::boxed(DMatrix::identity(1, 1), dv(&[0.0]), dv(&[-5.0]), dv(&[5.0]))
        };
        assert!(solve_qp(&p, None).is_err());
        assert!(solve_qp(&p, Some(&dv(&[-2.0]))).is_ok());
    }

    struct ConstFree(Vec<f64>);
    struct ConstGains(Vec<f64>);
    impl FreeResponse for ConstFree {
        fn horizon(&self) -> usize {
            self.0.len()
        }
        fn free_response(&self, _: &PredictorState) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }
    impl ForcedGains for ConstGains {
        fn horizon(&self) -> usize {
            self.0.len()
        }
        fn gains(&self, _: &PredictorState) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn predictor(free: Vec<f64>, gains: Vec<f64>) -> AffinePredictor {
        AffinePredictor::new(Arc::new(ConstFree(free)), Arc::new(ConstGains(gains))).unwrap()
    }

    fn state(t: usize, y: f64) -> PredictorState {
        let l = history_len(t);
        PredictorState::new(t, vec![y; l], vec![0.3; l], vec![0.0; l]).unwrap()
    }

    fn solve(problem: &MpcProblem) -> QpSolution {
        solve_qp(&problem.qp, Some(&problem.start())).unwrap()
    }

    #[test]
    fn affine_qp_trivial_minimizers() {
        let cfg = MpcConfig::multistep();
        let sp = vec![110.0; 8];
        let p = build_qp_affine(
            &predictor(sp.clone(), vec![-20.0; 8]),
            &state(8, 110.0),
            &sp,
            0.3,
            &cfg,
        )
        .unwrap();
        let s = solve(&p);
        assert!(s.z.rows(0, 8).amax() < 1e-12);
        assert!(s.z.rows(8, 8).amax() == 0.0);
        let p = build_qp_affine(
            &predictor(vec![250.0; 8], vec![0.0; 8]),
            &state(8, 250.0),
            &sp,
            0.3,
            &cfg,
        )
        .unwrap();
        assert!(solve(&p).z.rows(0, 8).amax() < 1e-12);
    }

    #[test]
    fn high_glucose_with_negative_gains_delivers_insulin() {
        let cfg = MpcConfig::multistep();
        let sp = vec![110.0; 2];
        let p = build_qp_affine(
            &predictor(vec![180.0, 200.0], vec![-15.0, -10.0]),
            &state(2, 170.0),
            &sp,
            0.3,
            &cfg,
        )
        .unwrap();
        let s = solve(&p);
        assert!(s.z[0] > 0.0);
        // grid oracle over the insulin moves, slacks inactive here
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=steps {
                let du = [
                    -0.3 + 10.0 * i as f64 / steps as f64,
                    -0.3 + 10.0 * j as f64 / steps as f64,
                ];
                let y = predicted_outputs(&p, &du);
                let j_val = y.iter().map(|v| (v - 110.0).powi(2)).sum::<f64>()
                    + 10.0 * (du[0] * du[0] + du[1] * du[1]);
                if j_val < best.0 {
                    best = (j_val, du[0], du[1]);
                }
            }
        }
        assert!((s.z[0] - best.1).abs() < 0.03 && (s.z[1] - best.2).abs() < 0.03);
        assert!(s.objective <= best.0 + 1e-9);
    }

    #[test]
    fn positive_gains_are_clamped() {
        let cfg = MpcConfig::multistep();
        let sp = vec![110.0; 3];
        let p = build_qp_affine(
            &predictor(vec![90.0; 3], vec![5.0, -1.0, 2.0]),
            &state(3, 90.0),
            &sp,
            0.3,
            &cfg,
        )
        .unwrap();
        assert_eq!(p.clamped_gains, 2);
        assert!(p.g.iter().all(|g| *g <= 0.0));
    }

    #[test]
    fn slack_is_used_only_when_needed() {
        let cfg = MpcConfig::multistep();
        let sp = vec![110.0; 2];
        let p = build_qp_affine(
            &predictor(vec![520.0, 540.0], vec![-0.5, -0.5]),
            &state(2, 400.0),
            &sp,
            0.3,
            &cfg,
        )
        .unwrap();
        let s = solve(&p);
        assert!(s.z.rows(2, 2).amax() > 0.0);
        assert!(s.kkt_residual() < 1e-6 * (1.0 + p.qp.h.amax()));
    }

    #[test]
    fn arx_maps_match_simulation() {
        let m = ArxModel::paper_preset(SignConvention::Adopted);
        let ss = realize_and_kalman(&m).unwrap();
        let x0 = Vector3::new(3.0, -1.0, 0.5);
        let t = 8;
        let (free, g) = arx_prediction_maps(&ss, &x0, 0.0, t);
        for j in 0..t {
            // unit insulin pulse at tick j
            let mut x = x0;
            for i in 0..t {
                let du = if i == j { 1.0 } else { 0.0 };
                x = ss.a * x + ss.b * nalgebra::Vector2::new(0.0, du);
                let y = (ss.c * x)[0];
                assert!((y - free[i] - g[(i, j)]).abs() < 1e-12);
            }
        }
        let (with_meal, _) = arx_prediction_maps(&ss, &x0, 50.0, t);
        assert!(with_meal.iter().zip(&free).all(|(a, b)| a > b));
        let op = OperatingPoint {
            y_bar: 120.0,
            u_bar: 0.3,
        };
        let p = build_qp_arx(
            &ss,
            &Vector3::zeros(),
            op,
            &[120.0; 8],
            0.0,
            &MpcConfig::arx(),
        )
        .unwrap();
        assert!(solve(&p).z.amax() < 1e-10);
    }

    #[test]
    fn controller_warmup_and_steady_state() {
        let cfg = MpcConfig::multistep();
        let mut c =
            MultiStepController::new(predictor(vec![110.0; 8], vec![-10.0; 8]), cfg, 0.3).unwrap();
        for k in 0..40u32 {
            let rec = c.step(8 * 60 + 15 * k, 110.0, 0.0);
            assert_eq!(rec.command_u, 0.3);
            assert_eq!(rec.qp_iterations > 0, k >= 25, "tick {k}");
            assert!(!rec.fallback);
        }
    }

    #[test]
    fn arx_controller_at_operating_point_stays_basal() {
        let ss = realize_and_kalman(&ArxModel::paper_preset(SignConvention::Adopted)).unwrap();
        let op = OperatingPoint {
            y_bar: 110.0,
            u_bar: 0.35,
        };
        let mut c = ArxController::new(ss, op, MpcConfig::arx(), 25).unwrap();
        for k in 0..40u32 {
            let rec = c.step(8 * 60 + 15 * k, 110.0, 0.0);
            assert_eq!(rec.command_u, 0.35);
        }
    }

    proptest! {
        #[test]
        fn commands_stay_in_pump_range(ys in proptest::collection::vec(40.0f64..400.0, 30..60), g in -40.0f64..5.0) {
            let cfg = MpcConfig::multistep();
            let free = vec![ys[0]; 8];
            let mut c = MultiStepController::new(predictor(free, vec![g; 8]), cfg, 0.3).unwrap();
            for (k, y) in ys.iter().enumerate() {
                let rec = c.step(15 * k as u32, *y, 0.0);
                prop_assert!((0.0..=25.0).contains(&rec.command_u));
            }
        }
    }

    #[test]
    fn log_has_one_row_per_tick() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let cfg = MpcConfig::multistep();
        let mut c =
            MultiStepController::new(predictor(vec![150.0; 8], vec![-10.0; 8]), cfg, 0.3).unwrap();
        let log: Vec<TickRecord> = (0..30u32).map(|k| c.step(15 * k, 150.0, 0.0)).collect();
        write_controller_log(&path, &log).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 31);
        assert!(text.starts_with(
            "t_min,cgm,setpoint,command_U,qp_objective,qp_iterations,slack_norm,fallback_flag"
        ));
    }
}
