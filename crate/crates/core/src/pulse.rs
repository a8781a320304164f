//! Piecewise-linear control waveforms and the two pulse sequences used by
//! the protocol: the adiabatic preparation ramp and the basis-change
//! rotation.
//!
//! Times are in µs, Rabi frequencies and detunings in rad/µs, phases in rad.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default duration of the fast Rabi ramps in the rotation sequence (50 ns).
pub const ROTATION_RAMP_DEFAULT: f64 = 0.05;

/// Default detuning held while the Rabi drive switches on.
pub const DELTA_INITIAL_DEFAULT: f64 = -40.0;

/// Piecewise-linear function of time, clamped outside its breakpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    breakpoints: Vec<[f64; 2]>,
}

impl Waveform {
    pub fn new(breakpoints: Vec<[f64; 2]>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::Schedule("waveform needs at least one breakpoint".into()));
        }
        if breakpoints.iter().any(|[t, v]| !t.is_finite() || !v.is_finite()) {
            return Err(Error::Schedule("waveform breakpoints must be finite".into()));
        }
        if breakpoints.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::Schedule("waveform times must be strictly increasing".into()));
        }
        Ok(Waveform { breakpoints })
    }

    pub fn constant(value: f64, t_final: f64) -> Self {
        if t_final > 0.0 {
            Waveform { breakpoints: vec![[0.0, value], [t_final, value]] }
        } else {
            Waveform { breakpoints: vec![[0.0, value]] }
        }
    }

    /// Builds a waveform from points that may repeat a time; repeated times
    /// keep the first value. Used by the schedule builders when a ramp has
    /// zero length.
    fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        let mut kept: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for &p in points {
            match kept.last() {
                Some(last) if p[0] <= last[0] => {}
                _ => kept.push(p),
            }
        }
        Waveform::new(kept)
    }

    pub fn breakpoints(&self) -> &[[f64; 2]] {
        &self.breakpoints
    }

    pub fn start(&self) -> f64 {
        self.breakpoints[0][0]
    }

    pub fn end(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1][0]
    }

    pub fn eval(&self, t: f64) -> f64 {
        let bp = &self.breakpoints;
        if t <= bp[0][0] {
            return bp[0][1];
        }
        let last = bp[bp.len() - 1];
        if t >= last[0] {
            return last[1];
        }
        // first breakpoint strictly after t
        let hi = bp.partition_point(|p| p[0] <= t);
        let [t0, v0] = bp[hi - 1];
        let [t1, v1] = bp[hi];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    /// Slope on each segment, paired with the segment's start and end times.
    pub fn slopes(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.breakpoints.windows(2).map(|w| (w[0][0], w[1][0], (w[1][1] - w[0][1]) / (w[1][0] - w[0][0])))
    }

    pub fn min_value(&self) -> f64 {
        self.breakpoints.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_value(&self) -> f64 {
        self.breakpoints.iter().map(|p| p[1].abs()).fold(0.0, f64::max)
    }

    /// Same breakpoint times with every value passed through `f`.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Waveform {
        Waveform { breakpoints: self.breakpoints.iter().map(|&[t, v]| [t, f(v)]).collect() }
    }

    /// Exact integral over `[start, end]`.
    pub fn integral(&self) -> f64 {
        self.breakpoints.windows(2).map(|w| 0.5 * (w[0][1] + w[1][1]) * (w[1][0] - w[0][0])).sum()
    }
}

/// Rabi amplitude, detuning and phase over `[0, t_final]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSchedule {
    pub omega: Waveform,
    pub delta: Waveform,
    pub phi: Waveform,
    pub t_final: f64,
}

impl PulseSchedule {
    pub fn new(omega: Waveform, delta: Waveform, phi: Waveform, t_final: f64) -> Result<Self> {
        if !(t_final >= 0.0 && t_final.is_finite()) {
            return Err(Error::Schedule(format!("duration must be non-negative, got {t_final}")));
        }
        for (name, w) in [("omega", &omega), ("delta", &delta), ("phi", &phi)] {
            if w.start() != 0.0 || (w.end() - t_final).abs() > 1e-12 {
                return Err(Error::Schedule(format!(
                    "{name} spans [{}, {}] but the schedule spans [0, {t_final}]",
                    w.start(),
                    w.end()
                )));
            }
        }
        if omega.min_value() < 0.0 {
            return Err(Error::Schedule("Rabi amplitude must be non-negative".into()));
        }
        Ok(PulseSchedule { omega, delta, phi, t_final })
    }

    /// `(Ω, Δ, φ)` at time `t`.
    pub fn controls(&self, t: f64) -> (f64, f64, f64) {
        (self.omega.eval(t), self.delta.eval(t), self.phi.eval(t))
    }

    /// Sorted union of all waveform breakpoints; the controls are linear
    /// between consecutive entries.
    pub fn segment_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = [&self.omega, &self.delta, &self.phi]
            .iter()
            .flat_map(|w| w.breakpoints().iter().map(|p| p[0]))
            .collect();
        times.push(0.0);
        times.push(self.t_final);
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        times
    }

    /// Copy with the Rabi amplitude scaled and the detuning shifted, as in a
    /// single shot with miscalibrated global fields.
    pub fn with_offsets(&self, omega_scale: f64, delta_shift: f64) -> Result<PulseSchedule> {
        if !(omega_scale >= 0.0) || !delta_shift.is_finite() {
            return Err(Error::Schedule(format!("invalid field offsets ({omega_scale}, {delta_shift})")));
        }
        Ok(PulseSchedule {
            omega: self.omega.map_values(|v| v * omega_scale),
            delta: self.delta.map_values(|v| v + delta_shift),
            phi: self.phi.clone(),
            t_final: self.t_final,
        })
    }

    /// Integrated Rabi amplitude `∫ Ω dt` in rad.
    pub fn omega_area(&self) -> f64 {
        self.omega.integral()
    }
}

/// Parameters of the adiabatic preparation sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepParams {
    pub omega: f64,
    pub delta: f64,
    pub t_final: f64,
    pub omega_ramp: f64,
    pub delta_initial: f64,
}

impl PrepParams {
    pub fn new(omega: f64, delta: f64, t_final: f64, omega_ramp: f64) -> Self {
        PrepParams { omega, delta, t_final, omega_ramp, delta_initial: DELTA_INITIAL_DEFAULT }
    }
}

/// Rabi drive ramps up at fixed negative detuning, the detuning then sweeps
/// linearly to its final value while the drive holds, and the drive ramps
/// back down at the final detuning. The detuning sweep fills
/// `[omega_ramp, t_final - omega_ramp]`.
pub fn build_prep_schedule(p: &PrepParams) -> Result<PulseSchedule> {
    if !(p.t_final > 0.0) {
        return Err(Error::Schedule(format!("t_final must be positive, got {}", p.t_final)));
    }
    if !(p.omega_ramp >= 0.0) || 2.0 * p.omega_ramp >= p.t_final {
        return Err(Error::Schedule(format!(
            "Rabi ramps of {} µs do not fit in t_final = {} µs",
            p.omega_ramp, p.t_final
        )));
    }
    if !(p.omega >= 0.0) {
        return Err(Error::Schedule(format!("Rabi amplitude must be non-negative, got {}", p.omega)));
    }
    if !(p.delta_initial < 0.0) {
        return Err(Error::Schedule(format!("initial detuning must be negative, got {}", p.delta_initial)));
    }
    let (tau, tf) = (p.omega_ramp, p.t_final);
    let omega = if tau > 0.0 {
        Waveform::from_points(&[[0.0, 0.0], [tau, p.omega], [tf - tau, p.omega], [tf, 0.0]])?
    } else {
        Waveform::constant(p.omega, tf)
    };
    let delta = Waveform::from_points(&[[0.0, p.delta_initial], [tau, p.delta_initial], [tf - tau, p.delta], [tf, p.delta]])?;
    PulseSchedule::new(omega, delta, Waveform::constant(0.0, tf), tf)
}

/// Parameters of the global basis-change pulse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationParams {
    pub omega: f64,
    pub plateau: f64,
    pub ramp: f64,
    pub phase: f64,
}

impl RotationParams {
    pub fn new(omega: f64, plateau: f64, phase: f64) -> Self {
        RotationParams { omega, plateau, ramp: ROTATION_RAMP_DEFAULT, phase }
    }
}

/// Trapezoidal Rabi pulse at zero detuning and constant phase. Its area is
/// `omega * (plateau + ramp)`.
pub fn build_rotation_schedule(p: &RotationParams) -> Result<PulseSchedule> {
    if !(p.omega >= 0.0) || !(p.plateau >= 0.0) || !(p.ramp >= 0.0) {
        return Err(Error::Schedule(format!("rotation parameters must be non-negative: {p:?}")));
    }
    let tf = p.plateau + 2.0 * p.ramp;
    let omega = if p.ramp > 0.0 {
        Waveform::from_points(&[[0.0, 0.0], [p.ramp, p.omega], [p.ramp + p.plateau, p.omega], [tf, 0.0]])?
    } else {
        Waveform::constant(p.omega, tf)
    };
    PulseSchedule::new(omega, Waveform::constant(0.0, tf), Waveform::constant(p.phase, tf), tf)
}
