//! Experiment configuration: a TOML file with one table per stage.
//!
//! ```toml
//! seed = 7
//!
//! [lattice]
//! sites = 7            # required
//! spacing = 6.0        # µm
//!
//! [prep]
//! omega = 11.46        # rad/µs
//! delta = 26.0         # rad/µs
//! t_final = 2.0        # µs
//! omega_ramp = 0.25    # µs
//!
//! [rotation]
//! omega = 8.47
//! plateau = 0.15
//! ```
//!
//! Every table and key other than `lattice.sites` has a default. Unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wring::dynamics::{EvolveOptions, NoiseParams, MAX_DENSE_OPEN_SITES};
use wring::hardware::{validate_hardware, HardwareLimits};
use wring::inference::{Experiment, EnsembleSpec};
use wring::lattice::{ring_positions, Truncation, C6_DEFAULT};
use wring::measurement::{ConfusionModel, Negativity};
use wring::pulse::{
    build_prep_schedule, build_rotation_schedule, PrepParams, RotationParams, DELTA_INITIAL_DEFAULT,
    ROTATION_RAMP_DEFAULT,
};
use wring::search::{DeltaGrid, DeltaSearch, RampPolicy, TimeSearch};
use wring::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub sites: usize,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default = "default_c6")]
    pub c6: f64,
    #[serde(default)]
    pub truncation: Truncation,
    /// Rotation of the ring on the plate, rad. Only the placement checks
    /// see it; couplings depend on distances alone.
    #[serde(default = "default_orientation")]
    pub orientation: f64,
}

fn default_orientation() -> f64 {
    std::f64::consts::FRAC_PI_2
}

fn default_spacing() -> f64 {
    6.0
}

fn default_c6() -> f64 {
    C6_DEFAULT
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepConfig {
    pub omega: f64,
    pub delta: f64,
    pub t_final: f64,
    pub omega_ramp: f64,
    pub delta_initial: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig { omega: 11.46, delta: 29.0, t_final: 2.0, omega_ramp: 0.25, delta_initial: DELTA_INITIAL_DEFAULT }
    }
}

impl PrepConfig {
    pub fn params(&self) -> PrepParams {
        PrepParams {
            omega: self.omega,
            delta: self.delta,
            t_final: self.t_final,
            omega_ramp: self.omega_ramp,
            delta_initial: self.delta_initial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RotationConfig {
    pub omega: f64,
    /// Plateau length between the two edges, µs.
    pub plateau: f64,
    pub ramp: f64,
    pub phase: f64,
    /// Rabi offsets of the rotation experiments, rad/µs.
    pub offsets: Vec<f64>,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            omega: 7.97,
            plateau: 0.15,
            ramp: ROTATION_RAMP_DEFAULT,
            phase: std::f64::consts::FRAC_PI_2,
            offsets: vec![0.0, -0.5, 0.5, -1.0, 1.0],
        }
    }
}

impl RotationConfig {
    pub fn params(&self, offset: f64) -> RotationParams {
        RotationParams { omega: self.omega + offset, plateau: self.plateau, ramp: self.ramp, phase: self.phase }
    }

    pub fn experiments(&self) -> Vec<Experiment> {
        self.offsets
            .iter()
            .map(|&d| Experiment { label: experiment_label(d), rotation: Some(self.params(d)) })
            .collect()
    }
}

/// Label of the rotation experiment at Rabi offset `d`, e.g. `rot+0.5`.
pub fn experiment_label(d: f64) -> String {
    format!("rot{d:+.1}")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolveConfig {
    pub max_step: f64,
    pub drift_tol: f64,
    /// Snapshot spacing for trajectory tables, µs; 0 disables them.
    pub snapshot_interval: f64,
    /// Trajectories for open rings beyond the density-matrix limit.
    pub trajectories: usize,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig { max_step: 1e-3, drift_tol: 1e-8, snapshot_interval: 0.0, trajectories: 200 }
    }
}

impl EvolveConfig {
    pub fn options(&self) -> EvolveOptions {
        EvolveOptions {
            max_step: self.max_step,
            drift_tol: self.drift_tol,
            snapshot_interval: (self.snapshot_interval > 0.0).then_some(self.snapshot_interval),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub delta_lo: f64,
    pub delta_hi: f64,
    pub delta_step: f64,
    pub coarse_step: f64,
    pub refine_candidates: usize,
    /// Ramp length as a fraction of `t_F`; negative means the fixed
    /// `prep.omega_ramp`.
    pub ramp_fraction: f64,
    pub target: f64,
    pub t_start: f64,
    pub t_max: f64,
    pub rel_width: f64,
    /// Integrator step for search evaluations, µs.
    pub max_step: f64,
    pub sizes: Vec<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let g = DeltaGrid::default();
        let t = TimeSearch::default();
        SearchConfig {
            delta_lo: g.lo,
            delta_hi: g.hi,
            delta_step: g.step,
            coarse_step: 1.0,
            refine_candidates: 2,
            ramp_fraction: 0.3,
            target: 1e-3,
            t_start: t.t_start,
            t_max: t.t_max,
            rel_width: t.rel_width,
            max_step: 1e-2,
            sizes: vec![5, 7, 9, 11, 13],
        }
    }
}

impl SearchConfig {
    pub fn grid(&self) -> DeltaGrid {
        DeltaGrid { lo: self.delta_lo, hi: self.delta_hi, step: self.delta_step }
    }

    pub fn delta_search(&self) -> DeltaSearch {
        DeltaSearch { grid: self.grid(), coarse_step: self.coarse_step, refine_candidates: self.refine_candidates }
    }

    pub fn time_search(&self) -> TimeSearch {
        TimeSearch { t_start: self.t_start, t_max: self.t_max, rel_width: self.rel_width }
    }

    pub fn ramp(&self, prep: &PrepConfig) -> RampPolicy {
        if self.ramp_fraction >= 0.0 {
            RampPolicy::Fraction(self.ramp_fraction)
        } else {
            RampPolicy::Fixed(prep.omega_ramp)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementConfig {
    pub shots: usize,
    pub bootstrap: usize,
    pub negativity: Negativity,
    /// Probability that a site is reported empty in the loading image.
    pub loading_defect: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        MeasurementConfig { shots: 1000, bootstrap: 200, negativity: Negativity::Clip, loading_defect: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub members: usize,
    /// KL regulariser; 0 selects `1 / (10 N)` per experiment.
    pub epsilon: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { members: 100, epsilon: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrapeConfig {
    pub slices: usize,
    pub iterations: usize,
    /// Rotation window, µs; 0 uses the rotation pulse length.
    pub duration: f64,
    pub jitter: [f64; 3],
}

impl Default for GrapeConfig {
    fn default() -> Self {
        GrapeConfig { slices: 40, iterations: 200, duration: 0.0, jitter: [0.5, 0.1, 0.5] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub max_closed_sites: usize,
    pub max_open_sites: usize,
}

impl Default for CapacityConfig {
    fn default() -> Self {
        CapacityConfig { max_closed_sites: wring::hamiltonian::MAX_SITES, max_open_sites: MAX_DENSE_OPEN_SITES }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub allow_unphysical: bool,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub prep: PrepConfig,
    #[serde(default)]
    pub rotation: RotationConfig,
    #[serde(default)]
    pub noise: NoiseParams,
    #[serde(default)]
    pub evolve: EvolveConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub grape: GrapeConfig,
    #[serde(default)]
    pub limits: HardwareLimits,
    #[serde(default)]
    pub capacity: CapacityConfig,
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| toml_error(text, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The fully resolved config, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let l = self.lattice.sites;
        if l < 2 {
            problems.push(format!("lattice.sites must be at least 2, got {l}"));
        }
        if l > self.capacity.max_closed_sites {
            return Err(Error::Capacity(format!(
                "lattice.sites = {l} exceeds capacity.max_closed_sites = {}",
                self.capacity.max_closed_sites
            )));
        }
        if !(self.lattice.spacing > 0.0) {
            problems.push(format!("lattice.spacing must be positive, got {}", self.lattice.spacing));
        }
        if !(self.lattice.c6 > 0.0) {
            problems.push(format!("lattice.c6 must be positive, got {}", self.lattice.c6));
        }
        if let Err(e) = self.noise.validate() {
            problems.push(format!("noise: {e}"));
        }
        if !(self.evolve.max_step > 0.0) {
            problems.push(format!("evolve.max_step must be positive, got {}", self.evolve.max_step));
        }
        if self.measurement.shots == 0 {
            problems.push("measurement.shots must be at least 1".into());
        }
        if self.measurement.bootstrap < 100 {
            problems.push(format!("measurement.bootstrap must be at least 100, got {}", self.measurement.bootstrap));
        }
        if !(0.0..=1.0).contains(&self.measurement.loading_defect) {
            problems.push(format!("measurement.loading_defect must lie in [0, 1], got {}", self.measurement.loading_defect));
        }
        if self.inference.members == 0 {
            problems.push("inference.members must be at least 1".into());
        }
        if !(self.inference.epsilon >= 0.0) {
            problems.push(format!("inference.epsilon must be non-negative, got {}", self.inference.epsilon));
        }
        if !(self.search.target > 0.0 && self.search.target < 1.0) {
            problems.push(format!("search.target must lie in (0, 1), got {}", self.search.target));
        }
        if let Err(e) = self.search.grid().points() {
            problems.push(format!("search: {e}"));
        }
        if self.rotation.offsets.is_empty() {
            problems.push("rotation.offsets must name at least one experiment".into());
        }
        if self.grape.slices == 0 {
            problems.push("grape.slices must be at least 1".into());
        }
        let mut schedules = Vec::new();
        match build_prep_schedule(&self.prep.params()) {
            Ok(s) => schedules.push(("prep", s)),
            Err(e) => problems.push(format!("prep: {e}")),
        }
        for &d in &self.rotation.offsets {
            match build_rotation_schedule(&self.rotation.params(d)) {
                Ok(s) => schedules.push(("rotation", s)),
                Err(e) => problems.push(format!("rotation: {e}")),
            }
        }
        if !self.allow_unphysical && l >= 2 && self.lattice.spacing > 0.0 {
            if let Ok(geometry) = ring_positions(l, self.lattice.spacing).map(|g| g.rotated(self.lattice.orientation)) {
                for (name, s) in &schedules {
                    for v in validate_hardware(&geometry, s, &self.limits) {
                        let msg = format!("{name}: {v}");
                        if !problems.contains(&msg) {
                            problems.push(msg);
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn confusion(&self) -> Result<ConfusionModel> {
        ConfusionModel::uniform(self.lattice.sites, self.noise.p_gr, self.noise.p_rg)
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        if self.lattice.sites > self.capacity.max_open_sites {
            return Err(Error::Capacity(format!(
                "the prior ensemble needs density matrices; {} sites exceeds capacity.max_open_sites = {}",
                self.lattice.sites, self.capacity.max_open_sites
            )));
        }
        Ok(EnsembleSpec {
            sites: self.lattice.sites,
            spacing: self.lattice.spacing,
            c6: self.lattice.c6,
            truncation: self.lattice.truncation,
            prep: self.prep.params(),
            experiments: self.rotation.experiments(),
            noise: self.noise,
            members: self.inference.members,
            options: self.evolve.options(),
        })
    }
}

fn toml_error(text: &str, e: &toml::de::Error) -> Error {
    let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1).unwrap_or(0);
    Error::Parse { line, message: e.message().to_string() }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NOMINAL_L7: &str = "
[lattice]
sites = 7
spacing = 6.0

[prep]
omega = 11.46
delta = 26.0
t_final = 2.0
omega_ramp = 0.25

[rotation]
omega = 8.47
plateau = 0.15
";

    #[test]
    fn nominal_l7_block_is_valid() {
        let cfg = ExperimentConfig::from_toml(NOMINAL_L7).unwrap();
        assert_eq!(cfg.lattice.sites, 7);
        assert_eq!(cfg.prep.delta, 26.0);
        assert_eq!(cfg.rotation.experiments().len(), 5);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_sites_is_named() {
        let err = ExperimentConfig::from_toml("[lattice]\nspacing = 6.0\n").unwrap_err();
        assert!(err.to_string().contains("sites"), "{err}");
    }

    #[test]
    fn string_detuning_is_a_type_error() {
        let err = ExperimentConfig::from_toml("[lattice]\nsites = 5\n[prep]\ndelta = \"29\"\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("invalid type"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[lattice]\nsites = 5\nspasing = 6.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[lattice]\nsites = 5\n[extra]\n").is_err());
    }

    #[test]
    fn hardware_violations_are_listed() {
        let text = "[lattice]\nsites = 5\n[prep]\nomega = 30.0\nt_final = 6.0\n";
        match ExperimentConfig::from_toml(text).unwrap_err() {
            Error::Validation(v) => assert!(v.len() >= 2, "{v:?}"),
            other => panic!("{other:?}"),
        }
        let relaxed = format!("allow_unphysical = true\n{text}");
        assert!(ExperimentConfig::from_toml(&relaxed).is_ok());
    }

    #[test]
    fn capacity_is_its_own_error() {
        let err = ExperimentConfig::from_toml("[lattice]\nsites = 15\n").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
