//! Meal scenarios: the fixed three-meal day and a stochastic generator.
//!
//! The stochastic generator is a Markov chain over the fasting period. At
//! every 15-min tick the chain either stays in the fasting state (fasting
//! time grows by one tick) or a meal is eaten and fasting time resets to
//! zero. The probability of eating depends on the daypart the tick falls in
//! and on the size tercile of the previous meal; no meal can be eaten
//! before the minimum inter-meal gap has elapsed or outside every daypart
//! window.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_from;
use crate::{SAMPLES_PER_DAY, SAMPLE_MINUTES};

pub const MIN_MEAL_GRAMS: f64 = 10.0;
pub const MAX_MEAL_GRAMS: f64 = 120.0;
const MINUTES_PER_DAY: u32 = 1440;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MealEvent {
    /// Minutes since scenario start, on the 15-min grid.
    pub t: u32,
    pub grams: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Daypart {
    Breakfast,
    Lunch,
    Dinner,
    Snack,
}

impl Daypart {
    pub const ALL: [Daypart; 4] = [
        Daypart::Breakfast,
        Daypart::Lunch,
        Daypart::Dinner,
        Daypart::Snack,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedNormal {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl TruncatedNormal {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.std == 0.0 {
            return self.mean.clamp(self.min, self.max);
        }
        let n = Normal::new(self.mean, self.std).expect("positive std");
        for _ in 0..10_000 {
            let v = n.sample(rng);
            if v >= self.min && v <= self.max {
                return v;
            }
        }
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaypartConfig {
    pub daypart: Daypart,
    /// Inclusive window in clock minutes after midnight.
    pub window: (u32, u32),
    pub grams: TruncatedNormal,
    /// Rows indexed by previous-meal size tercile; each row is
    /// `[P(eat), P(keep fasting)]` for one tick inside the window.
    pub transitions: [[f64; 2]; 3],
    /// Meals of this daypart allowed per day.
    pub max_per_day: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MealChainConfig {
    pub dayparts: Vec<DaypartConfig>,
    /// Gram thresholds separating small/medium/large previous meals.
    pub tercile_bounds: (f64, f64),
    pub min_gap_min: u32,
    pub meals_per_day: (usize, usize),
    pub daily_grams: (f64, f64),
    pub max_day_retries: usize,
    pub seed: u64,
}

impl MealChainConfig {
    pub fn with_seed(seed: u64) -> Self {
        let dp = |daypart, window, mean, std, min, max, p: [f64; 3], max_per_day| DaypartConfig {
            daypart,
            window,
            grams: TruncatedNormal {
                mean,
                std,
                min,
                max,
            },
            transitions: [[p[0], 1.0 - p[0]], [p[1], 1.0 - p[1]], [p[2], 1.0 - p[2]]],
            max_per_day,
        };
        MealChainConfig {
            dayparts: vec![
                dp(
                    Daypart::Breakfast,
                    (360, 585),
                    45.0,
                    12.0,
                    15.0,
                    75.0,
                    [0.30, 0.25, 0.20],
                    1,
                ),
                dp(
                    Daypart::Lunch,
                    (690, 870),
                    65.0,
                    15.0,
                    25.0,
                    105.0,
                    [0.30, 0.25, 0.20],
                    1,
                ),
                dp(
                    Daypart::Dinner,
                    (1080, 1260),
                    70.0,
                    15.0,
                    30.0,
                    110.0,
                    [0.35, 0.30, 0.25],
                    1,
                ),
                dp(
                    Daypart::Snack,
                    (900, 1035),
                    20.0,
                    5.0,
                    10.0,
                    30.0,
                    [0.08, 0.05, 0.03],
                    2,
                ),
            ],
            tercile_bounds: (35.0, 65.0),
            min_gap_min: 120,
            meals_per_day: (2, 5),
            daily_grams: (50.0, 400.0),
            max_day_retries: 100,
            seed,
        }
    }

    /// Configuration whose chain collapses to the fixed 08:00/13:00/19:00
    /// pattern of 50/75/75 g.
    pub fn deterministic_three_meals(seed: u64) -> Self {
        let dp = |daypart, at: u32, grams: f64, p: f64| DaypartConfig {
            daypart,
            window: (at, at),
            grams: TruncatedNormal {
                mean: grams,
                std: 0.0,
                min: grams,
                max: grams,
            },
            transitions: [[p, 1.0 - p]; 3],
            max_per_day: 1,
        };
        MealChainConfig {
            dayparts: vec![
                dp(Daypart::Breakfast, 480, 50.0, 1.0),
                dp(Daypart::Lunch, 780, 75.0, 1.0),
                dp(Daypart::Dinner, 1140, 75.0, 1.0),
                dp(Daypart::Snack, 960, 20.0, 0.0),
            ],
            ..MealChainConfig::with_seed(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidArgument(reason));
        for d in &self.dayparts {
            for row in &d.transitions {
                if row.iter().any(|p| !(0.0..=1.0).contains(p))
                    || (row[0] + row[1] - 1.0).abs() > 1e-9
                {
                    return bad(format!(
                        "{:?} transition row {row:?} is not a distribution",
                        d.daypart
                    ));
                }
            }
            let g = &d.grams;
            if g.min < MIN_MEAL_GRAMS || g.max > MAX_MEAL_GRAMS || g.min > g.max || g.std < 0.0 {
                return bad(format!("{:?} gram bounds outside [10, 120]", d.daypart));
            }
            if d.window.0 > d.window.1 || d.window.1 >= MINUTES_PER_DAY {
                return bad(format!("{:?} window {:?} invalid", d.daypart, d.window));
            }
        }
        for (i, a) in self.dayparts.iter().enumerate() {
            for b in &self.dayparts[i + 1..] {
                if a.window.0 <= b.window.1 && b.window.0 <= a.window.1 {
                    return bad(format!(
                        "{:?} and {:?} windows overlap",
                        a.daypart, b.daypart
                    ));
                }
            }
        }
        if self.meals_per_day.0 > self.meals_per_day.1 {
            return bad("meals_per_day range is empty".into());
        }
        Ok(())
    }

    /// Daypart whose window contains the given clock minute.
    pub fn daypart_of(&self, clock_min: u32) -> Option<Daypart> {
        let c = clock_min % MINUTES_PER_DAY;
        self.dayparts
            .iter()
            .find(|d| d.window.0 <= c && c <= d.window.1)
            .map(|d| d.daypart)
    }

    fn tercile(&self, grams: Option<f64>) -> usize {
        match grams {
            None => 1,
            Some(g) if g < self.tercile_bounds.0 => 0,
            Some(g) if g < self.tercile_bounds.1 => 1,
            Some(_) => 2,
        }
    }
}

/// Generate `days` days of meals from the fasting-period Markov chain.
pub fn generate_meals(config: &MealChainConfig, days: usize) -> Result<Vec<MealEvent>> {
    if days == 0 {
        return Err(Error::InvalidArgument("days must be >= 1".into()));
    }
    config.validate()?;
    let mut rng = rng_from(config.seed, &[0x3e]);
    let ticks_per_gap = config.min_gap_min.div_ceil(SAMPLE_MINUTES);
    let mut events = Vec::new();
    // fasting ticks since the last meal; the scenario starts well fasted
    let mut fasting = ticks_per_gap;
    let mut prev_grams: Option<f64> = None;

    for day in 0..days {
        let mut accepted = None;
        for _ in 0..config.max_day_retries.max(1) {
            let (day_events, f, p) = simulate_day(config, &mut rng, day, fasting, prev_grams);
            let total: f64 = day_events.iter().map(|e| e.grams).sum();
            let n = day_events.len();
            if n >= config.meals_per_day.0
                && n <= config.meals_per_day.1
                && total >= config.daily_grams.0
                && total <= config.daily_grams.1
            {
                accepted = Some((day_events, f, p));
                break;
            }
        }
        let (day_events, f, p) = accepted.ok_or_else(|| Error::MealGeneration {
            day,
            reason: format!(
                "no day satisfied {:?} meals and {:?} g after {} attempts",
                config.meals_per_day, config.daily_grams, config.max_day_retries
            ),
        })?;
        events.extend(day_events);
        fasting = f;
        prev_grams = p;
    }
    Ok(events)
}

fn simulate_day(
    config: &MealChainConfig,
    rng: &mut ChaCha8Rng,
    day: usize,
    mut fasting: u32,
    mut prev_grams: Option<f64>,
) -> (Vec<MealEvent>, u32, Option<f64>) {
    let min_gap_ticks = config.min_gap_min.div_ceil(SAMPLE_MINUTES);
    let mut eaten = [0usize; 4];
    let mut out = Vec::new();
    for tick in 0..SAMPLES_PER_DAY as u32 {
        let clock = tick * SAMPLE_MINUTES;
        let eligible = fasting >= min_gap_ticks;
        let part = config
            .dayparts
            .iter()
            .find(|d| d.window.0 <= clock && clock <= d.window.1);
        // the draw is taken every tick so the stream position is independent of eligibility
        let draw: f64 = rng.random();
        match part {
            Some(d) if eligible && eaten[d.daypart.index()] < d.max_per_day => {
                let p_eat = d.transitions[config.tercile(prev_grams)][0];
                if draw < p_eat {
                    let grams = d.grams.sample(rng);
                    out.push(MealEvent {
                        t: day as u32 * MINUTES_PER_DAY + clock,
                        grams,
                    });
                    eaten[d.daypart.index()] += 1;
                    prev_grams = Some(grams);
                    fasting = 0;
                }
            }
            _ => {}
        }
        fasting = fasting.saturating_add(1);
    }
    (out, fasting, prev_grams)
}

/// Breakfast 50 g at 08:00, lunch 75 g at 13:00, dinner 75 g at 19:00.
pub fn fixed_meals_scenario_a(days: usize) -> Result<Vec<MealEvent>> {
    if days == 0 {
        return Err(Error::InvalidArgument("days must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(3 * days);
    for day in 0..days as u32 {
        for (clock, grams) in [(480, 50.0), (780, 75.0), (1140, 75.0)] {
            out.push(MealEvent {
                t: day * MINUTES_PER_DAY + clock,
                grams,
            });
        }
    }
    Ok(out)
}

/// Carbohydrate grams per sample tick for a trace of `len` samples.
pub fn carbs_per_tick(meals: &[MealEvent], len: usize) -> Vec<f64> {
    let mut d = vec![0.0; len];
    for m in meals {
        let k = (m.t / SAMPLE_MINUTES) as usize;
        if k < len {
            d[k] += m.grams;
        }
    }
    d
}

pub fn write_meals_csv(path: &Path, meals: &[MealEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_min", "grams"])?;
    for m in meals {
        w.write_record([m.t.to_string(), m.grams.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_meals_csv(path: &Path) -> Result<Vec<MealEvent>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("bad field {i} in {rec:?}")))
        };
        out.push(MealEvent {
            t: parse(0)? as u32,
            grams: parse(1)?,
        });
    }
    Ok(out)
}
