//! Time evolution under pulse schedules: closed (state vector), open with
//! local dephasing (density matrix or quantum trajectories), and the
//! basis-change rotation.
//!
//! Every schedule is cut at its breakpoints and each linear piece is split
//! into equal steps no longer than `max_step`. A step applies the fourth
//! order commutator-free Magnus propagator built from the Hamiltonian at the
//! two Gauss-Legendre nodes of the step.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::kink_superposition;
use crate::error::{Error, Result};
use crate::hamiltonian::{DriveFields, InteractionDiagonal, RydbergHamiltonian};
use crate::lattice::{interaction_matrix, perturb_positions, InteractionMatrix, RingGeometry, Truncation};
use crate::linalg::{expm_hermitian, expm_krylov, KrylovOptions};
use crate::observables::px_expectation;
use crate::pulse::PulseSchedule;
use crate::rng::{derive_seed, rng_from_seed};
use crate::state::{min_eigenvalue, QuantumState, C64};

/// Largest ring integrated as a full density matrix.
pub const MAX_DENSE_OPEN_SITES: usize = 9;

// Gauss-Legendre nodes and commutator-free Magnus weights.
const NODE_OFFSET: f64 = 0.288_675_134_594_812_9; // √3 / 6
const W_SMALL: f64 = -0.038_675_134_594_812_866; // (3 - 2√3) / 12
const W_LARGE: f64 = 0.538_675_134_594_812_9; // (3 + 2√3) / 12

/// Halvings tried when a Krylov step misses its tolerance.
const MAX_SUBDIVISIONS: u32 = 6;

#[derive(Clone, Copy, Debug)]
pub struct EvolveOptions {
    /// Longest allowed step in µs.
    pub max_step: f64,
    pub krylov: KrylovOptions,
    /// Largest tolerated deviation of the norm (pure) or trace (density)
    /// from 1 at the end of the evolution.
    pub drift_tol: f64,
    /// Record a snapshot roughly every this many µs.
    pub snapshot_interval: Option<f64>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { max_step: 1e-3, krylov: KrylovOptions::default(), drift_tol: 1e-8, snapshot_interval: None }
    }
}

impl EvolveOptions {
    pub fn with_max_step(max_step: f64) -> Self {
        EvolveOptions { max_step, ..Default::default() }
    }
}

#[derive(Clone, Debug)]
pub struct EvolutionResult {
    pub state: QuantumState,
    /// `(t, state)` pairs, starting with the initial state.
    pub snapshots: Vec<(f64, QuantumState)>,
    /// `|norm - 1|` for pure states, `|trace - 1|` for density matrices.
    pub drift: f64,
    pub steps: usize,
}

/// Step boundaries for a schedule.
fn step_grid(schedule: &PulseSchedule, max_step: f64) -> Result<Vec<f64>> {
    if !(max_step > 0.0) {
        return Err(Error::InvalidInput(format!("max_step must be positive, got {max_step}")));
    }
    let segments = schedule.segment_times();
    let mut grid = vec![0.0];
    for w in segments.windows(2) {
        let len = w[1] - w[0];
        let n = (len / max_step).ceil().max(1.0) as usize;
        grid.extend((1..=n).map(|k| if k == n { w[1] } else { w[0] + len * k as f64 / n as f64 }));
    }
    Ok(grid)
}

fn fields_at(schedule: &PulseSchedule, sites: usize, t: f64) -> DriveFields {
    let (omega, delta, phi) = schedule.controls(t);
    DriveFields::uniform(sites, omega, delta, phi)
}

/// The two exponents of one Magnus step over `[t, t + h]`, in the order
/// they act.
fn magnus_factors(diag: &InteractionDiagonal, schedule: &PulseSchedule, t: f64, h: f64) -> Result<[RydbergHamiltonian; 2]> {
    let sites = diag.sites();
    let f1 = fields_at(schedule, sites, t + (0.5 - NODE_OFFSET) * h);
    let f2 = fields_at(schedule, sites, t + (0.5 + NODE_OFFSET) * h);
    Ok([diag.combination(&[(W_LARGE, &f1), (W_SMALL, &f2)])?, diag.combination(&[(W_SMALL, &f1), (W_LARGE, &f2)])?])
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

struct SnapshotClock {
    interval: Option<f64>,
    next: f64,
}

impl SnapshotClock {
    fn new(interval: Option<f64>) -> Self {
        SnapshotClock { interval, next: 0.0 }
    }

    fn due(&mut self, t: f64, last: bool) -> bool {
        match self.interval {
            Some(dt) if t >= self.next - 1e-12 || last => {
                while self.next <= t + 1e-12 {
                    self.next += dt;
                }
                true
            }
            _ => false,
        }
    }
}

/// Unitary propagation of state vectors with the interaction energies
/// computed once per geometry.
pub struct ClosedEvolver {
    diag: InteractionDiagonal,
}

impl ClosedEvolver {
    pub fn new(u: &InteractionMatrix) -> Result<Self> {
        Ok(ClosedEvolver { diag: InteractionDiagonal::new(u)? })
    }

    pub fn sites(&self) -> usize {
        self.diag.sites()
    }

    /// Advances `psi` across one step, halving the step if the Krylov
    /// tolerance cannot be met.
    fn advance(&self, schedule: &PulseSchedule, psi: &mut [C64], t: f64, h: f64, opts: &EvolveOptions, depth: u32) -> Result<()> {
        let factors = magnus_factors(&self.diag, schedule, t, h)?;
        let saved: Vec<C64> = psi.to_vec();
        let mut ok = true;
        for f in &factors {
            match expm_krylov(f, psi, h, &opts.krylov) {
                Ok(_) => {}
                Err(e) if depth >= MAX_SUBDIVISIONS => return Err(e),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            psi.copy_from_slice(&saved);
            self.advance(schedule, psi, t, 0.5 * h, opts, depth + 1)?;
            self.advance(schedule, psi, t + 0.5 * h, 0.5 * h, opts, depth + 1)?;
        }
        Ok(())
    }

    /// Raw propagation of an amplitude vector; returns the number of steps.
    pub fn propagate(&self, schedule: &PulseSchedule, psi: &mut [C64], opts: &EvolveOptions) -> Result<usize> {
        let grid = step_grid(schedule, opts.max_step)?;
        for w in grid.windows(2) {
            self.advance(schedule, psi, w[0], w[1] - w[0], opts, 0)?;
        }
        Ok(grid.len() - 1)
    }

    pub fn evolve(&self, schedule: &PulseSchedule, psi0: &QuantumState, opts: &EvolveOptions) -> Result<EvolutionResult> {
        let sites = self.sites();
        let QuantumState::Pure { sites: s0, amplitudes } = psi0 else {
            return Err(Error::InvalidState("closed evolution takes a pure state".into()));
        };
        if *s0 != sites {
            return Err(Error::DimensionMismatch { expected: sites, found: *s0 });
        }
        psi0.validate()?;
        let grid = step_grid(schedule, opts.max_step)?;
        let mut psi: Vec<C64> = amplitudes.iter().cloned().collect();
        let mut clock = SnapshotClock::new(opts.snapshot_interval);
        let mut snapshots = Vec::new();
        if clock.due(0.0, false) {
            snapshots.push((0.0, psi0.clone()));
        }
        for (k, w) in grid.windows(2).enumerate() {
            self.advance(schedule, &mut psi, w[0], w[1] - w[0], opts, 0)?;
            if clock.due(w[1], k + 2 == grid.len()) {
                snapshots.push((w[1], pure_unchecked(sites, &psi)));
            }
        }
        let drift = (norm(&psi) - 1.0).abs();
        if drift > opts.drift_tol {
            return Err(Error::Integration(format!("norm drifted by {drift:e}, above {:e}", opts.drift_tol)));
        }
        Ok(EvolutionResult { state: pure_unchecked(sites, &psi), snapshots, drift, steps: grid.len() - 1 })
    }

    /// Full propagator of the schedule, built column by column.
    pub fn unitary(&self, schedule: &PulseSchedule, opts: &EvolveOptions) -> Result<DMatrix<C64>> {
        let dim = 1usize << self.sites();
        let mut out = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
        let mut col = vec![C64::new(0.0, 0.0); dim];
        for j in 0..dim {
            col.fill(C64::new(0.0, 0.0));
            col[j] = C64::new(1.0, 0.0);
            self.propagate(schedule, &mut col, opts)?;
            out.set_column(j, &DVector::from_column_slice(&col));
        }
        Ok(out)
    }
}

fn pure_unchecked(sites: usize, psi: &[C64]) -> QuantumState {
    QuantumState::Pure { sites, amplitudes: DVector::from_column_slice(psi) }
}

/// Solves `i dψ/dt = H(t) ψ` for a pure initial state.
pub fn evolve_closed(
    u: &InteractionMatrix,
    schedule: &PulseSchedule,
    psi0: &QuantumState,
    opts: &EvolveOptions,
) -> Result<EvolutionResult> {
    ClosedEvolver::new(u)?.evolve(schedule, psi0, opts)
}

/// `⟨K_S|ρ|K_S⟩`, the overlap with the equal superposition of kink states.
pub fn preparation_fidelity(state: &QuantumState) -> Result<f64> {
    let ks = kink_superposition(state.sites())?;
    let target = ks.amplitudes().expect("kink superposition is pure");
    Ok(state.overlap_with_pure(target)?.clamp(0.0, 1.0))
}

/// Multiplies `ρ_ij` by `exp(-(γ/2) popcount(i xor j) t)`: the exact action
/// of local dephasing over time `t`.
fn dephase(rho: &mut DMatrix<C64>, gamma: f64, t: f64, sites: usize) {
    if gamma == 0.0 || t == 0.0 {
        return;
    }
    let factors: Vec<f64> = (0..=sites).map(|k| (-0.5 * gamma * k as f64 * t).exp()).collect();
    let dim = rho.nrows();
    for j in 0..dim {
        for i in 0..dim {
            let k = (i ^ j).count_ones() as usize;
            if k > 0 {
                rho[(i, j)] *= factors[k];
            }
        }
    }
}

/// Lindblad evolution with local dephasing
/// `ρ̇ = -i[H, ρ] + (γ/2) Σ_ℓ (2 n_ℓ ρ n_ℓ - {ρ, n_ℓ})` on the full density
/// matrix. Each step is a symmetric splitting of the exact dephasing map
/// around the unitary Magnus step, so every step is completely positive.
pub fn evolve_open(
    u: &InteractionMatrix,
    schedule: &PulseSchedule,
    rho0: &QuantumState,
    gamma: f64,
    opts: &EvolveOptions,
) -> Result<EvolutionResult> {
    let sites = u.sites();
    if sites > MAX_DENSE_OPEN_SITES {
        return Err(Error::Capacity(format!(
            "{sites} sites exceeds the density-matrix limit of {MAX_DENSE_OPEN_SITES}; use trajectories"
        )));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!("dephasing rate must be non-negative, got {gamma}")));
    }
    if rho0.sites() != sites {
        return Err(Error::DimensionMismatch { expected: sites, found: rho0.sites() });
    }
    rho0.validate()?;
    let diag = InteractionDiagonal::new(u)?;
    let grid = step_grid(schedule, opts.max_step)?;
    let mut rho = rho0.to_density();
    let mut clock = SnapshotClock::new(opts.snapshot_interval);
    let mut snapshots = Vec::new();
    if clock.due(0.0, false) {
        snapshots.push((0.0, QuantumState::Density { sites, matrix: rho.clone() }));
    }
    for (k, w) in grid.windows(2).enumerate() {
        let (t, h) = (w[0], w[1] - w[0]);
        let [a, b] = magnus_factors(&diag, schedule, t, h)?;
        let step = expm_hermitian(&b.to_dense(), h) * expm_hermitian(&a.to_dense(), h);
        dephase(&mut rho, gamma, 0.5 * h, sites);
        rho = &step * rho * step.adjoint();
        dephase(&mut rho, gamma, 0.5 * h, sites);
        if clock.due(w[1], k + 2 == grid.len()) {
            check_positive(&rho, w[1])?;
            snapshots.push((w[1], QuantumState::Density { sites, matrix: rho.clone() }));
        }
    }
    // restore exact Hermiticity lost to rounding
    let rho = (&rho + rho.adjoint()) * C64::new(0.5, 0.0);
    check_positive(&rho, schedule.t_final)?;
    let drift = (rho.trace().re - 1.0).abs();
    if drift > opts.drift_tol {
        return Err(Error::Integration(format!("trace drifted by {drift:e}, above {:e}", opts.drift_tol)));
    }
    Ok(EvolutionResult { state: QuantumState::Density { sites, matrix: rho }, snapshots, drift, steps: grid.len() - 1 })
}

fn check_positive(rho: &DMatrix<C64>, t: f64) -> Result<()> {
    let low = min_eigenvalue(rho);
    if low < -1e-7 {
        return Err(Error::Integration(format!("density matrix lost positivity at t = {t} (eigenvalue {low:e})")));
    }
    Ok(())
}

/// Pure states from a jump unravelling of the dephasing master equation.
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub sites: usize,
    pub states: Vec<QuantumState>,
    /// Jumps taken on each trajectory.
    pub jumps: Vec<usize>,
    pub steps: usize,
}

impl TrajectoryEnsemble {
    /// Mean and standard error of a per-trajectory observable.
    pub fn observable(&self, f: impl Fn(&QuantumState) -> f64) -> (f64, f64) {
        let values: Vec<f64> = self.states.iter().map(f).collect();
        mean_and_error(&values)
    }

    pub fn mean_probabilities(&self) -> Vec<f64> {
        let mut out = vec![0.0; 1 << self.sites];
        for s in &self.states {
            for (o, p) in out.iter_mut().zip(s.probabilities()) {
                *o += p;
            }
        }
        let n = self.states.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Averaged density matrix; needs `2^(2L)` memory.
    pub fn to_density(&self) -> Result<QuantumState> {
        if self.sites > MAX_DENSE_OPEN_SITES {
            return Err(Error::Capacity(format!("{} sites is too large for a density matrix", self.sites)));
        }
        let dim = 1 << self.sites;
        let mut rho = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
        for s in &self.states {
            rho += s.to_density();
        }
        rho /= C64::new(self.states.len() as f64, 0.0);
        QuantumState::density(self.sites, rho)
    }
}

fn mean_and_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Quantum-trajectory version of [`evolve_open`] for rings up to the
/// state-vector limit. Between jumps the state follows
/// `H - i(γ/2) Σ n_ℓ`; a jump projects onto `n_ℓ = 1` for a site chosen in
/// proportion to `⟨n_ℓ⟩`. Trajectory `j` uses the stream
/// `derive_seed(seed, j)`.
pub fn evolve_trajectories(
    u: &InteractionMatrix,
    schedule: &PulseSchedule,
    psi0: &QuantumState,
    gamma: f64,
    count: usize,
    seed: u64,
    opts: &EvolveOptions,
) -> Result<TrajectoryEnsemble> {
    if count == 0 {
        return Err(Error::InvalidInput("need at least one trajectory".into()));
    }
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidInput(format!("dephasing rate must be non-negative, got {gamma}")));
    }
    let evolver = ClosedEvolver::new(u)?;
    let sites = evolver.sites();
    let QuantumState::Pure { amplitudes, .. } = psi0 else {
        return Err(Error::InvalidState("trajectories start from a pure state".into()));
    };
    if psi0.sites() != sites {
        return Err(Error::DimensionMismatch { expected: sites, found: psi0.sites() });
    }
    psi0.validate()?;
    let grid = step_grid(schedule, opts.max_step)?;
    let start: Vec<C64> = amplitudes.iter().cloned().collect();
    let runs: Vec<Result<(QuantumState, usize)>> = (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = rng_from_seed(derive_seed(seed, j as u64));
            let mut psi = start.clone();
            let mut threshold: f64 = rng.random();
            let mut jumps = 0;
            for w in grid.windows(2) {
                let (t, h) = (w[0], w[1] - w[0]);
                damp(&mut psi, gamma, 0.5 * h);
                evolver.advance(schedule, &mut psi, t, h, opts, 0)?;
                damp(&mut psi, gamma, 0.5 * h);
                let weight = norm(&psi).powi(2);
                if weight < threshold {
                    jump(&mut psi, sites, rng.random::<f64>());
                    threshold = rng.random();
                    jumps += 1;
                }
            }
            let n = norm(&psi);
            psi.iter_mut().for_each(|x| *x /= n);
            Ok((pure_unchecked(sites, &psi), jumps))
        })
        .collect();
    let mut states = Vec::with_capacity(count);
    let mut jumps = Vec::with_capacity(count);
    for r in runs {
        let (s, k) = r?;
        states.push(s);
        jumps.push(k);
    }
    Ok(TrajectoryEnsemble { sites, states, jumps, steps: grid.len() - 1 })
}

/// Applies `exp(-(γ/2) Σ n_ℓ t)`.
fn damp(psi: &mut [C64], gamma: f64, t: f64) {
    if gamma == 0.0 {
        return;
    }
    let sites = psi.len().trailing_zeros() as usize;
    let factors: Vec<f64> = (0..=sites).map(|k| (-0.5 * gamma * k as f64 * t).exp()).collect();
    for (i, a) in psi.iter_mut().enumerate() {
        *a *= factors[i.count_ones() as usize];
    }
}

/// Projects onto `n_ℓ = 1` for a site drawn with weight `⟨n_ℓ⟩`, then
/// renormalises.
fn jump(psi: &mut [C64], sites: usize, u: f64) {
    let mut weights = vec![0.0; sites];
    for (i, a) in psi.iter().enumerate() {
        let p = a.norm_sqr();
        let mut r = i;
        while r != 0 {
            weights[r.trailing_zeros() as usize] += p;
            r &= r - 1;
        }
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        let n = norm(psi);
        psi.iter_mut().for_each(|x| *x /= n);
        return;
    }
    let mut acc = 0.0;
    let mut site = sites - 1;
    for (s, w) in weights.iter().enumerate() {
        acc += w / total;
        if u < acc {
            site = s;
            break;
        }
    }
    for (i, a) in psi.iter_mut().enumerate() {
        if i & (1 << site) == 0 {
            *a = C64::new(0.0, 0.0);
        }
    }
    let n = norm(psi);
    psi.iter_mut().for_each(|x| *x /= n);
}

/// Runs the rotation pulse on a prepared state with the interactions left
/// on. Pure states without dephasing stay pure; anything else goes through
/// the density-matrix path.
pub fn apply_rotation(
    state: &QuantumState,
    rotation: &PulseSchedule,
    u: &InteractionMatrix,
    gamma: f64,
    opts: &EvolveOptions,
) -> Result<QuantumState> {
    if rotation.t_final == 0.0 {
        return Ok(state.clone());
    }
    match state {
        QuantumState::Pure { .. } if gamma == 0.0 => Ok(evolve_closed(u, rotation, state, opts)?.state),
        _ => Ok(evolve_open(u, rotation, state, gamma, opts)?.state),
    }
}

/// Single-site `exp(-i (π/4) σy)` in the `(g, r)` ordering.
fn half_y_rotation() -> [[f64; 2]; 2] {
    let c = std::f64::consts::FRAC_1_SQRT_2;
    [[c, c], [-c, c]]
}

/// `exp(-i (π/4) Σ σy)` as a dense matrix.
pub fn ideal_rotation_unitary(sites: usize) -> Result<DMatrix<C64>> {
    if sites > crate::hamiltonian::MAX_SITES {
        return Err(Error::Capacity(format!("{sites} sites exceeds the dense limit")));
    }
    let r = half_y_rotation();
    let site = DMatrix::from_fn(2, 2, |i, j| C64::new(r[i][j], 0.0));
    let mut out = DMatrix::<C64>::identity(1, 1);
    for _ in 0..sites {
        out = out.kronecker(&site);
    }
    Ok(out)
}

/// Applies the ideal rotation site by site. Afterwards a `g` outcome on a
/// site means `σx = +1` before the rotation.
pub fn rotate_to_x_basis(state: &QuantumState) -> QuantumState {
    let r = half_y_rotation();
    let sites = state.sites();
    let rotate_vec = |v: &mut [C64]| {
        for s in 0..sites {
            let bit = 1usize << s;
            for i in 0..v.len() {
                if i & bit == 0 {
                    let (g, e) = (v[i], v[i | bit]);
                    v[i] = g * r[0][0] + e * r[0][1];
                    v[i | bit] = g * r[1][0] + e * r[1][1];
                }
            }
        }
    };
    match state {
        QuantumState::Pure { amplitudes, .. } => {
            let mut v: Vec<C64> = amplitudes.iter().cloned().collect();
            rotate_vec(&mut v);
            pure_unchecked(sites, &v)
        }
        QuantumState::Density { matrix, .. } => {
            // R ρ R† with R real: rotate columns, then rows
            let mut m = matrix.clone();
            for mut col in m.column_iter_mut() {
                rotate_vec(col.as_mut_slice());
            }
            let mut t = m.transpose();
            for mut col in t.column_iter_mut() {
                rotate_vec(col.as_mut_slice());
            }
            QuantumState::Density { sites, matrix: t.transpose() }
        }
    }
}

/// Largest entry modulus.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `|Tr(U† V)|² / d²`.
pub fn operator_fidelity(u: &DMatrix<C64>, v: &DMatrix<C64>) -> Result<f64> {
    if u.shape() != v.shape() || u.nrows() != u.ncols() {
        return Err(Error::DimensionMismatch { expected: u.nrows(), found: v.nrows() });
    }
    let d = u.nrows();
    for m in [u, v] {
        let dev = max_abs(&(m.adjoint() * m - DMatrix::<C64>::identity(d, d)));
        if dev > 1e-8 {
            return Err(Error::InvalidInput(format!("operator is not unitary (deviation {dev:e})")));
        }
    }
    let tr: C64 = u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok((tr.norm_sqr() / (d * d) as f64).min(1.0))
}

/// Shot-to-shot noise model and dephasing rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    /// Dephasing rate in rad/µs.
    pub gamma: f64,
    /// Standard deviation of each position coordinate in µm.
    pub sigma_pos: f64,
    /// Relative standard deviation of the global Rabi amplitude.
    pub sigma_omega_rel: f64,
    /// Standard deviation of the global detuning offset in rad/µs.
    pub sigma_delta: f64,
    /// Readout flip probability g → r.
    pub p_gr: f64,
    /// Readout flip probability r → g.
    pub p_rg: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { gamma: 0.0, sigma_pos: 0.0, sigma_omega_rel: 0.0, sigma_delta: 0.0, p_gr: 0.01, p_rg: 0.08 }
    }
}

impl NoiseParams {
    /// No fluctuations, no dephasing and perfect readout.
    pub fn noiseless() -> Self {
        NoiseParams { p_gr: 0.0, p_rg: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("gamma", self.gamma),
            ("sigma_pos", self.sigma_pos),
            ("sigma_omega_rel", self.sigma_omega_rel),
            ("sigma_delta", self.sigma_delta),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        for (name, p) in [("p_gr", self.p_gr), ("p_rg", self.p_rg)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    /// Draws the per-shot geometry and global field offsets. Positions use
    /// the stream `derive_seed(seed, 0)`, field offsets `derive_seed(seed, 1)`.
    pub fn realize(&self, geometry: &RingGeometry, seed: u64) -> Result<NoiseRealization> {
        self.validate()?;
        let geometry = if self.sigma_pos > 0.0 {
            perturb_positions(geometry, self.sigma_pos, self.sigma_pos, derive_seed(seed, 0))?
        } else {
            geometry.clone()
        };
        let mut rng = rng_from_seed(derive_seed(seed, 1));
        let mut draw = |sigma: f64| -> f64 {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("positive width").sample(&mut rng)
            } else {
                0.0
            }
        };
        let omega_scale = (1.0 + draw(self.sigma_omega_rel)).max(0.0);
        let delta_shift = draw(self.sigma_delta);
        Ok(NoiseRealization { geometry, omega_scale, delta_shift, gamma: self.gamma })
    }
}

/// One draw of the shot-to-shot noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRealization {
    pub geometry: RingGeometry,
    pub omega_scale: f64,
    pub delta_shift: f64,
    pub gamma: f64,
}

impl NoiseRealization {
    pub fn schedule(&self, nominal: &PulseSchedule) -> Result<PulseSchedule> {
        nominal.with_offsets(self.omega_scale, self.delta_shift)
    }

    pub fn interactions(&self, c6: f64, truncation: Truncation) -> Result<InteractionMatrix> {
        interaction_matrix(&self.geometry, c6, truncation)
    }
}

/// Plot table of snapshot observables with columns
/// `t_us,weight,rydberg_fraction,px` and, for odd rings, `fidelity`.
pub fn trajectory_table(snapshots: &[(f64, QuantumState)]) -> Result<String> {
    let Some((_, first)) = snapshots.first() else {
        return Ok(String::new());
    };
    let sites = first.sites();
    let odd = sites % 2 == 1;
    let mut out = String::from("t_us,weight,rydberg_fraction,px");
    if odd {
        out.push_str(",fidelity");
    }
    out.push('\n');
    for (t, s) in snapshots {
        let w = s.weight();
        let probs = s.probabilities();
        let rydberg: f64 = probs.iter().enumerate().map(|(i, p)| p * i.count_ones() as f64).sum::<f64>() / sites as f64;
        write!(out, "{t:.6},{w:.12},{rydberg:.12},{:.12}", px_expectation(s)).unwrap();
        if odd {
            write!(out, ",{:.12}", preparation_fidelity(s)?).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
