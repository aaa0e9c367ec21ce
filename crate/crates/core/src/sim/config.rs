use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Arrival rate multiplied by the magnitude.
    DemandSurge,
    /// Saturation flow divided by the magnitude.
    CapacityDrop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnomalySchedule {
    /// Target fraction of intersection-steps under an anomaly.
    pub rate: f64,
    pub magnitude: f64,
    pub duration_steps: usize,
    /// Probability that a new anomaly is a demand surge.
    pub surge_share: f64,
}

impl Default for AnomalySchedule {
    fn default() -> Self {
        Self {
            rate: 0.05,
            magnitude: 3.0,
            duration_steps: 10,
            surge_share: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Intersections per side.
    pub grid_size: usize,
    pub spacing_km: f64,
    /// Cells per row, bottom to top; rows split the network area evenly.
    pub cell_rows: Vec<usize>,
    pub step_seconds: f64,
    /// Time of day (seconds) at step 0.
    pub start_seconds: f64,
    /// Day of week at step 0, Monday = 0.
    pub start_day: usize,
    /// Mean north-south arrivals per second at an average intersection.
    pub base_arrival_per_s: f64,
    /// East-west demand relative to north-south.
    pub ew_ratio: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    /// Half-width of the uniform per-intersection demand multiplier.
    pub intersection_spread: f64,
    /// Vehicles per second one approach group discharges on full green.
    pub saturation_flow_per_s: f64,
    /// Probability a served vehicle continues to the next intersection.
    pub through_prob: f64,
    /// Poisson arrivals and randomised rounding; `false` gives a
    /// deterministic system.
    pub stochastic: bool,
    /// Standard deviation of additive cell sensor noise, vehicles per hour.
    pub sensor_noise: f64,
    /// Weight of the newest count in the cell-flow moving average.
    pub flow_smoothing: f64,
    pub anomaly: AnomalySchedule,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let mut cell_rows = vec![17; 16];
        cell_rows.push(21);
        Self {
            grid_size: 4,
            spacing_km: 0.5,
            cell_rows,
            step_seconds: 900.0,
            start_seconds: 0.0,
            start_day: 0,
            base_arrival_per_s: 0.15,
            ew_ratio: 0.7,
            daily_amplitude: 0.6,
            weekly_amplitude: 0.1,
            intersection_spread: 0.2,
            saturation_flow_per_s: 0.9,
            through_prob: 0.5,
            stochastic: true,
            sensor_noise: 5.0,
            flow_smoothing: 0.5,
            anomaly: AnomalySchedule::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::invalid("grid size must be positive"));
        }
        if self.cell_rows.is_empty() || self.cell_rows.contains(&0) {
            return Err(Error::invalid("cell layout needs at least one cell in every row"));
        }
        let positive = [
            ("spacing_km", self.spacing_km),
            ("step_seconds", self.step_seconds),
            ("saturation_flow_per_s", self.saturation_flow_per_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("base_arrival_per_s", self.base_arrival_per_s),
            ("ew_ratio", self.ew_ratio),
            ("sensor_noise", self.sensor_noise),
            ("start_seconds", self.start_seconds),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        for (name, v) in [
            ("daily_amplitude", self.daily_amplitude),
            ("weekly_amplitude", self.weekly_amplitude),
            ("intersection_spread", self.intersection_spread),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.through_prob) {
            return Err(Error::invalid("through_prob must lie in [0, 1]"));
        }
        if !(self.flow_smoothing > 0.0 && self.flow_smoothing <= 1.0) {
            return Err(Error::invalid("flow_smoothing must lie in (0, 1]"));
        }
        let a = &self.anomaly;
        if !(0.0..=0.2).contains(&a.rate) {
            return Err(Error::invalid(format!("anomaly rate {} outside [0, 0.2]", a.rate)));
        }
        if a.rate > 0.0 && (!(a.magnitude > 0.0) || a.duration_steps == 0) {
            return Err(Error::invalid("anomaly magnitude and duration must be positive"));
        }
        if !(0.0..=1.0).contains(&a.surge_share) {
            return Err(Error::invalid("surge_share must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn intersection_count(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell_count(&self) -> usize {
        self.cell_rows.iter().sum()
    }

    pub fn steps_per_day(&self) -> f64 {
        86_400.0 / self.step_seconds
    }

    /// `(seconds of day, day of week)` at step `t`.
    pub fn clock(&self, t: usize) -> (f64, f64) {
        let total = self.start_seconds + t as f64 * self.step_seconds;
        let days = (total / 86_400.0).floor();
        let sod = total - days * 86_400.0;
        let dow = (self.start_day as f64 + days).rem_euclid(7.0);
        (sod, dow)
    }

    /// Daily and weekly demand multiplier; lowest at 03:00.
    pub fn demand_profile(&self, t: usize) -> f64 {
        use std::f64::consts::TAU;
        let (sod, dow) = self.clock(t);
        let daily = 1.0 - self.daily_amplitude * (TAU * (sod - 3.0 * 3600.0) / 86_400.0).cos();
        let weekly = 1.0 + self.weekly_amplitude * (TAU * (dow + sod / 86_400.0) / 7.0).cos();
        daily * weekly
    }
}
