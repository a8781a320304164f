//! Checks a geometry and schedule against the limits of an analog
//! Rydberg device. Problems come back as data; nothing here fails.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::lattice::RingGeometry;
use crate::pulse::PulseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardwareLimits {
    /// Side of the square plate that must contain every atom, µm.
    pub plate_size: f64,
    /// Smallest allowed vertical gap between atoms on different rows, µm.
    pub min_vertical_gap: f64,
    /// Atoms whose heights differ by less than this share a row, µm.
    pub row_tolerance: f64,
    pub omega_max: f64,
    /// rad/µs².
    pub omega_slew_max: f64,
    pub delta_max: f64,
    /// rad/µs².
    pub delta_slew_max: f64,
    /// rad/µs.
    pub phase_slew_max: f64,
    pub duration_max: f64,
}

impl Default for HardwareLimits {
    fn default() -> Self {
        HardwareLimits {
            plate_size: 75.0,
            min_vertical_gap: 2.0,
            row_tolerance: 1e-6,
            omega_max: 15.8,
            omega_slew_max: 250.0,
            delta_max: 125.0,
            delta_slew_max: 2500.0,
            phase_slew_max: 62.0,
            duration_max: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Plate { width: f64, height: f64, limit: f64 },
    VerticalGap { first: usize, second: usize, gap: f64, limit: f64 },
    Value { control: &'static str, time: f64, value: f64, limit: f64 },
    Slew { control: &'static str, start: f64, slope: f64, limit: f64 },
    Duration { t_final: f64, limit: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Plate { width, height, limit } => {
                write!(f, "atoms span {width:.3} x {height:.3} µm, plate is {limit} µm")
            }
            Violation::VerticalGap { first, second, gap, limit } => {
                write!(f, "atoms {first} and {second} are {gap:.3} µm apart vertically (minimum {limit} µm)")
            }
            Violation::Value { control, time, value, limit } => {
                write!(f, "{control} = {value} at t = {time} µs exceeds {limit}")
            }
            Violation::Slew { control, start, slope, limit } => {
                write!(f, "{control} slope {slope:.3} from t = {start} µs exceeds {limit}")
            }
            Violation::Duration { t_final, limit } => write!(f, "duration {t_final} µs exceeds {limit} µs"),
        }
    }
}

pub fn validate_geometry(geometry: &RingGeometry, limits: &HardwareLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    let (x0, y0, x1, y1) = geometry.bounding_box();
    let (width, height) = (x1 - x0, y1 - y0);
    if width > limits.plate_size || height > limits.plate_size {
        out.push(Violation::Plate { width, height, limit: limits.plate_size });
    }
    let pos = &geometry.positions;
    for i in 0..pos.len() {
        for j in (i + 1)..pos.len() {
            let gap = (pos[i][1] - pos[j][1]).abs();
            if gap > limits.row_tolerance && gap < limits.min_vertical_gap {
                out.push(Violation::VerticalGap { first: i, second: j, gap, limit: limits.min_vertical_gap });
            }
        }
    }
    out
}

pub fn validate_schedule(schedule: &PulseSchedule, limits: &HardwareLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    if schedule.t_final > limits.duration_max {
        out.push(Violation::Duration { t_final: schedule.t_final, limit: limits.duration_max });
    }
    for &[t, v] in schedule.omega.breakpoints() {
        if v > limits.omega_max {
            out.push(Violation::Value { control: "omega", time: t, value: v, limit: limits.omega_max });
        }
    }
    for &[t, v] in schedule.delta.breakpoints() {
        if v.abs() > limits.delta_max {
            out.push(Violation::Value { control: "delta", time: t, value: v, limit: limits.delta_max });
        }
    }
    let slews = [
        ("omega", &schedule.omega, limits.omega_slew_max),
        ("delta", &schedule.delta, limits.delta_slew_max),
        ("phi", &schedule.phi, limits.phase_slew_max),
    ];
    for (control, w, limit) in slews {
        for (start, _, slope) in w.slopes() {
            // small tolerance so that ramps sitting exactly on the limit pass
            if slope.abs() > limit * (1.0 + 1e-9) {
                out.push(Violation::Slew { control, start, slope, limit });
            }
        }
    }
    out
}

/// Every violation of the plate, spacing and waveform limits. An empty list
/// means the pair can run as given.
pub fn validate_hardware(geometry: &RingGeometry, schedule: &PulseSchedule, limits: &HardwareLimits) -> Vec<Violation> {
    let mut out = validate_geometry(geometry, limits);
    out.extend(validate_schedule(schedule, limits));
    out
}
