//! Synthetic trips with physically coupled channels.
//!
//! The generator is a small forward simulation at the raw sample rate. A
//! piecewise target speed drives a rate-limited velocity; acceleration is
//! the backward difference of velocity. Battery power combines an
//! aerodynamic-style `v²` term, climbing power from a slowly varying road
//! grade and the HVAC load, minus regenerative power while decelerating.
//! State of charge integrates that power, battery temperature lags behind
//! resistive heating, and cabin/HVAC channels drift slowly around the trip's
//! set-point. Sensor noise is added last, so `noise = 0` exposes the clean
//! simulation.

use indexmap::IndexMap;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::trip::{TripSeries, RAW_PERIOD_S, VENT_CHANNELS};
use crate::seed;

const MASS_KG: f64 = 1400.0;
const GRAVITY: f64 = 9.81;
const DRAG_KW_PER_V2: f64 = 0.02;
const REGEN_EFFICIENCY: f64 = 0.6;
/// Pack capacity expressed in kJ per percent of charge (42 kWh pack).
const KJ_PER_PERCENT: f64 = 42.0 * 3600.0 / 100.0;
const PACK_RESISTANCE: f64 = 0.1;
const HEAT_RESISTANCE: f64 = 0.15;
const THERMAL_MASS_J_PER_K: f64 = 6.0e4;
const BATTERY_COOLING_S: f64 = 900.0;
const CABIN_TIME_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_trips: usize,
    /// Raw samples per trip, at the 0.1 s logging rate.
    pub length: usize,
    /// Multiplier on the per-channel sensor noise levels.
    pub noise: f64,
    /// Upper bound of the random target speed in m/s; 0 keeps the car parked.
    pub max_speed: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_trips: 20,
            length: 18_000,
            noise: 1.0,
            max_speed: 33.0,
        }
    }
}

/// Channel order of generated trips and their noise standard deviations.
const CHANNELS: [(&str, f64); 18] = [
    ("velocity", 0.05),
    ("acceleration", 0.05),
    ("throttle", 0.5),
    ("elevation", 0.2),
    ("ambient_temp", 0.05),
    ("battery_voltage", 0.2),
    ("battery_current", 1.0),
    ("battery_temp", 0.05),
    ("soc", 0.02),
    ("heater_power", 0.02),
    ("ac_power", 0.02),
    (VENT_CHANNELS[0], 0.05),
    (VENT_CHANNELS[1], 0.05),
    (VENT_CHANNELS[2], 0.05),
    (VENT_CHANNELS[3], 0.05),
    ("cabin_temp", 0.05),
    ("cabin_setpoint", 0.01),
    ("regen_power", 0.05),
];

/// `n_trips` trips of `length` raw samples with default noise.
pub fn synthesize_trips(n_trips: usize, length: usize, seed: u64) -> Vec<TripSeries> {
    synthesize(
        &SynthConfig {
            n_trips,
            length,
            ..SynthConfig::default()
        },
        seed,
    )
}

pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Vec<TripSeries> {
    (0..cfg.n_trips).map(|i| synthesize_trip(cfg, i, seed)).collect()
}

/// Trip number `index`; each trip has its own RNG stream, so trips can be
/// generated independently.
pub fn synthesize_trip(cfg: &SynthConfig, index: usize, seed: u64) -> TripSeries {
    let mut rng = seed::rng(seed, &format!("synth-trip-{index}"));
    let n = cfg.length;
    let dt = RAW_PERIOD_S;

    let ambient: f64 = rng.random_range(-5.0..32.0);
    let setpoint: f64 = rng.random_range(19.0..24.0);
    let mut soc: f64 = rng.random_range(40.0..95.0);
    let mut batt_temp = ambient + rng.random_range(0.0..8.0);
    let mut elevation: f64 = rng.random_range(100.0..600.0);
    let mut cabin = ambient + rng.random_range(-1.0..1.0);
    let grade_waves: [(f64, f64, f64); 2] = [
        (0.04, rng.random_range(200.0..900.0), rng.random_range(0.0..std::f64::consts::TAU)),
        (0.02, rng.random_range(60.0..300.0), rng.random_range(0.0..std::f64::consts::TAU)),
    ];
    let vent_offsets: [f64; 4] = std::array::from_fn(|_| rng.random_range(-5e-5..5e-5));
    let heat_base = (0.25 * (setpoint - 3.0 - ambient)).clamp(0.0, 5.0);
    let cool_base = (0.15 * (ambient - setpoint - 2.0)).clamp(0.0, 3.0);
    let step = Normal::new(0.0, 0.02).expect("valid");

    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); CHANNELS.len()];
    let (mut v, mut v_prev) = (0.0f64, 0.0f64);
    let (mut target, mut hold) = (0.0f64, 0usize);
    let (mut heat_walk, mut cool_walk) = (0.0f64, 0.0f64);
    for t in 0..n {
        if hold == 0 {
            target = if cfg.max_speed <= 0.0 || rng.random_range(0.0..1.0) < 0.15 {
                0.0
            } else {
                rng.random_range(0.15 * cfg.max_speed..cfg.max_speed)
            };
            hold = (rng.random_range(15.0..90.0) / dt) as usize;
        }
        hold -= 1;
        if t > 0 {
            v = (v + dt * (0.4 * (target - v)).clamp(-3.0, 2.0)).max(0.0);
        }
        let accel = if t == 0 { 0.0 } else { (v - v_prev) / dt };
        v_prev = v;

        let time = t as f64 * dt;
        let grade: f64 = grade_waves
            .iter()
            .map(|(amp, period, phase)| amp * (std::f64::consts::TAU * time / period + phase).sin())
            .sum();
        let climb_rate = grade * v;
        elevation += climb_rate * dt;

        heat_walk = 0.999 * heat_walk + step.sample(&mut rng);
        cool_walk = 0.999 * cool_walk + step.sample(&mut rng);
        let heater = if heat_base > 0.0 { (heat_base + heat_walk).max(0.0) } else { 0.0 };
        let ac = if cool_base > 0.0 { (cool_base + cool_walk).max(0.0) } else { 0.0 };

        let drive_kw = DRAG_KW_PER_V2 * v * v;
        let climb_kw = (MASS_KG * GRAVITY * climb_rate / 1000.0).max(0.0);
        let regen_kw = if accel < 0.0 {
            REGEN_EFFICIENCY * MASS_KG * (-accel) * v / 1000.0
        } else {
            0.0
        };
        let draw_kw = drive_kw + climb_kw + heater + ac;
        soc -= dt * (draw_kw - regen_kw) / KJ_PER_PERCENT;

        let v_oc = 320.0 + 0.8 * soc;
        let current = (draw_kw - regen_kw) * 1000.0 / v_oc;
        let voltage = v_oc - PACK_RESISTANCE * current;
        batt_temp += dt
            * (HEAT_RESISTANCE * current * current / THERMAL_MASS_J_PER_K
                - (batt_temp - ambient) / BATTERY_COOLING_S);

        let cabin_target = if heater > 0.0 || ac > 0.0 { setpoint } else { ambient };
        cabin += dt / CABIN_TIME_S * (cabin_target - cabin);
        let vent = cabin + 2.0 * heater - 2.0 * ac;
        let throttle = ((accel + 0.0003 * v * v + GRAVITY * grade) / 3.0).clamp(0.0, 1.0) * 100.0;

        let row = [
            v,
            accel,
            throttle,
            elevation,
            ambient,
            voltage,
            current,
            batt_temp,
            soc,
            heater,
            ac,
            vent * (1.0 + vent_offsets[0]),
            vent * (1.0 + vent_offsets[1]),
            vent * (1.0 + vent_offsets[2]),
            vent * (1.0 + vent_offsets[3]),
            cabin,
            setpoint,
            regen_kw,
        ];
        for (c, value) in cols.iter_mut().zip(row) {
            c.push(value);
        }
    }

    if cfg.noise > 0.0 {
        for (c, (_, sd)) in cols.iter_mut().zip(CHANNELS) {
            let dist = Normal::new(0.0, sd * cfg.noise).expect("finite noise level");
            c.iter_mut().for_each(|x| *x += dist.sample(&mut rng));
        }
    }
    let channels: IndexMap<String, Vec<f64>> =
        CHANNELS.iter().map(|(name, _)| name.to_string()).zip(cols).collect();
    TripSeries::new(format!("trip_{index:03}"), dt, channels).expect("equal lengths by construction")
}
