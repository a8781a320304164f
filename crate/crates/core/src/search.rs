//! Protocol optimisation: detuning sweeps, the shortest preparation time
//! that reaches a target infidelity, power-law fits, and GRAPE pulse
//! optimisation for the basis-change rotation.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{operator_fidelity, preparation_fidelity, ClosedEvolver, EvolutionResult, EvolveOptions};
use crate::error::{Error, Result};
use crate::hamiltonian::{build_hamiltonian, DriveFields, InteractionDiagonal};
use crate::hardware::HardwareLimits;
use crate::lattice::{interaction_matrix, ring_positions, InteractionMatrix, Truncation};
use crate::pulse::{build_prep_schedule, PrepParams, PulseSchedule, Waveform, DELTA_INITIAL_DEFAULT};
use crate::rng::rng_from_seed;
use crate::spectrum::spectral_gap;
use crate::state::{QuantumState, C64};

/// Length of the Rabi ramps of the preparation sequence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampPolicy {
    /// Fixed length in µs.
    Fixed(f64),
    /// Fraction of `t_final`.
    Fraction(f64),
}

impl RampPolicy {
    pub fn ramp(&self, t_final: f64) -> f64 {
        match *self {
            RampPolicy::Fixed(tau) => tau,
            RampPolicy::Fraction(r) => r * t_final,
        }
    }
}

/// Closed-system preparation of `|K_S⟩` on one ring at fixed Rabi
/// amplitude; detuning and duration vary.
pub struct PrepModel {
    evolver: ClosedEvolver,
    pub omega: f64,
    pub ramp: RampPolicy,
    pub delta_initial: f64,
    pub options: EvolveOptions,
}

impl PrepModel {
    pub fn new(u: &InteractionMatrix, omega: f64, ramp: RampPolicy, options: EvolveOptions) -> Result<Self> {
        Ok(PrepModel { evolver: ClosedEvolver::new(u)?, omega, ramp, delta_initial: DELTA_INITIAL_DEFAULT, options })
    }

    pub fn sites(&self) -> usize {
        self.evolver.sites()
    }

    pub fn params(&self, delta: f64, t_final: f64) -> PrepParams {
        PrepParams {
            omega: self.omega,
            delta,
            t_final,
            omega_ramp: self.ramp.ramp(t_final),
            delta_initial: self.delta_initial,
        }
    }

    pub fn schedule(&self, delta: f64, t_final: f64) -> Result<PulseSchedule> {
        build_prep_schedule(&self.params(delta, t_final))
    }

    pub fn evolve(&self, delta: f64, t_final: f64) -> Result<EvolutionResult> {
        let psi0 = QuantumState::all_ground(self.sites())?;
        self.evolver.evolve(&self.schedule(delta, t_final)?, &psi0, &self.options)
    }

    /// `F_th = |⟨K_S|ψ(t_F)⟩|²` starting from all atoms in `g`.
    pub fn fidelity(&self, delta: f64, t_final: f64) -> Result<f64> {
        preparation_fidelity(&self.evolve(delta, t_final)?.state)
    }
}

/// Inclusive detuning grid `lo, lo + step, ...` up to `hi`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaGrid {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for DeltaGrid {
    fn default() -> Self {
        DeltaGrid { lo: 10.0, hi: 50.0, step: 1.0 }
    }
}

impl DeltaGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::InvalidInput(format!("invalid detuning grid {self:?}")));
        }
        if self.hi < self.lo {
            return Err(Error::InvalidInput(format!("empty detuning grid [{}, {}]", self.lo, self.hi)));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| self.lo + k as f64 * self.step).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// `(Δ, F_th)` in grid order.
    pub grid: Vec<(f64, f64)>,
    pub best: (f64, f64),
}

/// Index of the largest value; ties go to the earliest entry.
fn argmax(values: &[(f64, f64)]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if v.1 > values[best].1 {
            best = k;
        }
    }
    best
}

/// `F_th` at every detuning in `deltas`, evaluated in parallel. The best
/// entry breaks ties toward smaller `Δ`.
pub fn sweep_values(model: &PrepModel, t_final: f64, deltas: &[f64]) -> Result<SweepResult> {
    if deltas.is_empty() {
        return Err(Error::InvalidInput("empty detuning grid".into()));
    }
    let values: Vec<Result<f64>> = deltas.par_iter().map(|&d| model.fidelity(d, t_final)).collect();
    let mut grid = Vec::with_capacity(deltas.len());
    for (&d, f) in deltas.iter().zip(values) {
        grid.push((d, f?));
    }
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].0.total_cmp(&grid[b].0));
    let sorted: Vec<(f64, f64)> = order.iter().map(|&k| grid[k]).collect();
    let best = sorted[argmax(&sorted)];
    Ok(SweepResult { grid, best })
}

pub fn sweep_detuning(model: &PrepModel, t_final: f64, grid: &DeltaGrid) -> Result<SweepResult> {
    sweep_values(model, t_final, &grid.points()?)
}

/// How the detuning is re-optimised at each trial duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaSearch {
    pub grid: DeltaGrid,
    /// When above `grid.step`, evaluate this coarser grid first and refine
    /// at `grid.step` around the best `refine_candidates` coarse points.
    pub coarse_step: f64,
    pub refine_candidates: usize,
}

impl Default for DeltaSearch {
    fn default() -> Self {
        DeltaSearch { grid: DeltaGrid::default(), coarse_step: 1.0, refine_candidates: 2 }
    }
}

impl DeltaSearch {
    pub fn best(&self, model: &PrepModel, t_final: f64) -> Result<(f64, f64)> {
        let fine = self.grid.points()?;
        if !(self.coarse_step > self.grid.step) {
            return Ok(sweep_values(model, t_final, &fine)?.best);
        }
        let coarse = DeltaGrid { step: self.coarse_step, ..self.grid }.points()?;
        let first = sweep_values(model, t_final, &coarse)?;
        let mut ranked = first.grid.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
        let mut extra: Vec<f64> = Vec::new();
        for &(d, _) in ranked.iter().take(self.refine_candidates.max(1)) {
            for &x in &fine {
                let near = (x - d).abs() < self.coarse_step - 1e-9;
                let known = coarse.iter().chain(&extra).any(|&c| (c - x).abs() < 1e-9);
                if near && !known {
                    extra.push(x);
                }
            }
        }
        let mut all = first.grid;
        if !extra.is_empty() {
            all.extend(sweep_values(model, t_final, &extra)?.grid);
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(all[argmax(&all)])
    }
}

/// Bracketing and stopping rules of the time search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSearch {
    /// First duration tried, µs.
    pub t_start: f64,
    /// Give up beyond this duration, µs.
    pub t_max: f64,
    /// Bisection stops once `hi / lo - 1` falls below this.
    pub rel_width: f64,
}

impl Default for TimeSearch {
    fn default() -> Self {
        TimeSearch { t_start: 0.5, t_max: 64.0, rel_width: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinTimeResult {
    pub t_star: f64,
    pub delta: f64,
    pub infidelity: f64,
    /// `(t_F, best Δ, F_th)` for every duration evaluated, in search order.
    pub trials: Vec<(f64, f64, f64)>,
}

/// Smallest `t_F` (to the search's relative resolution) whose best detuning
/// gives `1 - F_th ≤ target`. Durations double from `t_start` until the
/// target is met, then the last bracket is bisected.
pub fn min_time_for_infidelity(model: &PrepModel, target: f64, deltas: &DeltaSearch, search: &TimeSearch) -> Result<MinTimeResult> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidInput(format!("target infidelity must lie in (0, 1), got {target}")));
    }
    if !(search.t_start > 0.0) || !(search.t_max >= search.t_start) || !(search.rel_width > 0.0) {
        return Err(Error::InvalidInput(format!("invalid time search {search:?}")));
    }
    let mut trials = Vec::new();
    let eval = |t: f64, trials: &mut Vec<(f64, f64, f64)>| -> Result<(f64, f64)> {
        let (d, f) = deltas.best(model, t)?;
        trials.push((t, d, f));
        Ok((d, f))
    };
    let mut lo = 0.0;
    let mut t = search.t_start;
    let mut hit = loop {
        let (d, f) = eval(t, &mut trials)?;
        if 1.0 - f <= target {
            break (t, d, f);
        }
        lo = t;
        t *= 2.0;
        if t > search.t_max * (1.0 + 1e-12) {
            return Err(Error::SearchExhausted(format!(
                "infidelity {target:e} not reached by t_F = {} µs (best {:e} at the last trial)",
                search.t_max,
                1.0 - f
            )));
        }
    };
    if lo > 0.0 {
        while hit.0 / lo - 1.0 > search.rel_width {
            let mid = (lo * hit.0).sqrt();
            let (d, f) = eval(mid, &mut trials)?;
            if 1.0 - f <= target {
                hit = (mid, d, f);
            } else {
                lo = mid;
            }
        }
    }
    Ok(MinTimeResult { t_star: hit.0, delta: hit.1, infidelity: 1.0 - hit.2, trials })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    /// `α` in `y = prefactor · x^α`.
    pub exponent: f64,
    pub prefactor: f64,
    pub std_error: f64,
    pub points: Vec<(f64, f64)>,
}

/// Least-squares fit of `log y` against `log x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return Err(Error::Fit(format!("power-law fit needs positive values, got {p:?}")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("all abscissae coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let std_error = (rss / (n - 2.0) / sxx).sqrt();
    Ok(PowerLawFit { exponent: slope, prefactor: intercept.exp(), std_error, points: points.to_vec() })
}

/// Spectral gap of one uniformly driven ring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub sites: usize,
    pub gap: f64,
    /// `E1 - E0`, reported for every ring.
    pub lowest_splitting: f64,
}

/// Gap above the ground manifold of a ring with constant drive. Odd rings
/// use `E1 - E0`. Even rings have a quasi-degenerate pair of Néel states,
/// so their gap is `E2 - E0`.
pub fn ring_gap(u: &InteractionMatrix, omega: f64, delta: f64) -> Result<GapPoint> {
    let sites = u.sites();
    let h = build_hamiltonian(u, &DriveFields::uniform(sites, omega, delta, 0.0))?;
    let spec = spectral_gap(&h, 3)?;
    let gap = if sites % 2 == 0 { spec.levels[2] - spec.levels[0] } else { spec.gap };
    Ok(GapPoint { sites, gap, lowest_splitting: spec.gap })
}

/// [`ring_gap`] for several ring sizes at a common spacing.
pub fn gap_scan(sizes: &[usize], spacing: f64, c6: f64, truncation: Truncation, omega: f64, delta: f64) -> Result<Vec<GapPoint>> {
    sizes
        .iter()
        .map(|&l| ring_gap(&interaction_matrix(&ring_positions(l, spacing)?, c6, truncation)?, omega, delta))
        .collect()
}

/// Piecewise-constant controls on equal slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceControls {
    pub duration: f64,
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
    pub delta: Vec<f64>,
}

impl SliceControls {
    pub fn constant(duration: f64, slices: usize, omega: f64, phi: f64, delta: f64) -> Self {
        SliceControls { duration, omega: vec![omega; slices], phi: vec![phi; slices], delta: vec![delta; slices] }
    }

    pub fn slices(&self) -> usize {
        self.omega.len()
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.slices() as f64
    }

    fn validate(&self) -> Result<()> {
        let n = self.omega.len();
        if n == 0 || self.phi.len() != n || self.delta.len() != n {
            return Err(Error::InvalidInput("control slices must be non-empty and of equal length".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::InvalidInput(format!("control duration must be positive, got {}", self.duration)));
        }
        Ok(())
    }

    /// Schedule that holds each slice value and switches linearly within
    /// `edge` µs at slice boundaries.
    pub fn to_schedule(&self, edge: f64) -> Result<PulseSchedule> {
        self.validate()?;
        let dt = self.dt();
        let edge = edge.clamp(0.0, 0.5 * dt);
        let build = |v: &[f64]| -> Result<Waveform> {
            let mut pts = vec![[0.0, v[0]]];
            for k in 1..v.len() {
                let t = k as f64 * dt;
                pts.push([t - 0.5 * edge, v[k - 1]]);
                pts.push([t + 0.5 * edge, v[k]]);
            }
            pts.push([self.duration, v[v.len() - 1]]);
            pts.dedup_by(|b, a| b[0] <= a[0]);
            Waveform::new(pts)
        };
        PulseSchedule::new(build(&self.omega)?, build(&self.delta)?, build(&self.phi)?, self.duration)
    }

    fn to_vec(&self) -> Vec<f64> {
        self.omega.iter().chain(&self.phi).chain(&self.delta).cloned().collect()
    }

    fn from_vec(&self, x: &[f64]) -> SliceControls {
        let n = self.slices();
        SliceControls {
            duration: self.duration,
            omega: x[..n].to_vec(),
            phi: x[n..2 * n].to_vec(),
            delta: x[2 * n..].to_vec(),
        }
    }
}

/// Control bounds used by the optimiser; phases are unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlBounds {
    pub omega_max: f64,
    pub delta_max: f64,
}

impl From<&HardwareLimits> for ControlBounds {
    fn from(h: &HardwareLimits) -> Self {
        ControlBounds { omega_max: h.omega_max, delta_max: h.delta_max }
    }
}

#[derive(Clone, Debug)]
pub struct GrapeOptions {
    pub iterations: usize,
    /// Uniform jitter added to the initial Rabi amplitude (rad/µs), phase
    /// (rad) and detuning (rad/µs) of every slice.
    pub jitter: [f64; 3],
    pub seed: u64,
    /// Stop once the fidelity gain of an iteration drops below this.
    pub tol: f64,
}

impl Default for GrapeOptions {
    fn default() -> Self {
        GrapeOptions { iterations: 200, jitter: [0.0; 3], seed: 0, tol: 1e-12 }
    }
}

#[derive(Clone, Debug)]
pub struct GrapeResult {
    pub controls: SliceControls,
    pub fidelity: f64,
    /// Fidelity after each accepted iteration, starting with the initial
    /// controls. Never decreases.
    pub trace: Vec<f64>,
}

/// Operator fidelity of piecewise-constant controls and its gradient.
struct GrapeModel<'a> {
    diag: InteractionDiagonal,
    target: &'a DMatrix<C64>,
    sites: usize,
}

impl GrapeModel<'_> {
    fn slice_hamiltonian(&self, omega: f64, phi: f64, delta: f64) -> Result<DMatrix<C64>> {
        let f = DriveFields::uniform(self.sites, omega, delta, phi);
        Ok(self.diag.combination(&[(1.0, &f)])?.to_dense())
    }

    fn propagator(&self, c: &SliceControls) -> Result<DMatrix<C64>> {
        let dim = 1 << self.sites;
        let mut u = DMatrix::<C64>::identity(dim, dim);
        for k in 0..c.slices() {
            let h = self.slice_hamiltonian(c.omega[k], c.phi[k], c.delta[k])?;
            u = crate::linalg::expm_hermitian(&h, c.dt()) * u;
        }
        Ok(u)
    }

    fn fidelity(&self, c: &SliceControls) -> Result<f64> {
        operator_fidelity(self.target, &self.propagator(c)?)
    }

    /// Fidelity and its gradient with respect to `(Ω_k, φ_k, Δ_k)`, laid out
    /// as in `SliceControls::to_vec`. Slice derivatives of the exponential
    /// use the exact divided-difference formula in the eigenbasis.
    fn gradient(&self, c: &SliceControls) -> Result<(f64, Vec<f64>)> {
        let n = c.slices();
        let dim = 1usize << self.sites;
        let d = dim as f64;
        let dt = c.dt();
        let mut eigs = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for k in 0..n {
            let h = self.slice_hamiltonian(c.omega[k], c.phi[k], c.delta[k])?;
            let e = SymmetricEigen::new(h);
            let phases: Vec<C64> = e.eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * dt)).collect();
            let mut scaled = e.eigenvectors.clone();
            for (j, mut col) in scaled.column_iter_mut().enumerate() {
                col *= phases[j];
            }
            steps.push(&scaled * e.eigenvectors.adjoint());
            eigs.push((e, phases));
        }
        // forward[k] = U_{k-1} ... U_0, backward[k] = W† U_{n-1} ... U_{k+1}
        let mut forward = vec![DMatrix::<C64>::identity(dim, dim)];
        for s in &steps {
            let next = s * forward.last().unwrap();
            forward.push(next);
        }
        let total = forward[n].clone();
        let g: C64 = self.target.iter().zip(total.iter()).map(|(a, b)| a.conj() * b).sum::<C64>() / d;
        let fid = g.norm_sqr();
        let mut backward = vec![self.target.adjoint(); n];
        for k in (0..n - 1).rev() {
            backward[k] = &backward[k + 1] * &steps[k + 1];
        }
        let mut grad = vec![0.0; 3 * n];
        let number: Vec<f64> = (0..dim).map(|i| i.count_ones() as f64).collect();
        for k in 0..n {
            let (e, phases) = &eigs[k];
            let v = &e.eigenvectors;
            let lam = &e.eigenvalues;
            // Tr(B dU A) = Tr(A B dU); M = V† (A B) V carries the chain rule
            let ab = &forward[k] * &backward[k];
            let m = v.adjoint() * ab * v;
            let kernel = DMatrix::from_fn(dim, dim, |a, b| {
                let gap = lam[a] - lam[b];
                if gap.abs() * dt < 1e-8 {
                    phases[a] * C64::new(0.0, -dt)
                } else {
                    (phases[a] - phases[b]) / gap
                }
            });
            let dh_omega = hop_generator(self.sites, 0.5 * C64::from_polar(1.0, c.phi[k]));
            let dh_phi = hop_generator(self.sites, 0.5 * c.omega[k] * C64::new(0.0, 1.0) * C64::from_polar(1.0, c.phi[k]));
            let dh_delta = DMatrix::from_fn(dim, dim, |i, j| if i == j { C64::new(-number[i], 0.0) } else { C64::new(0.0, 0.0) });
            for (slot, dh) in [dh_omega, dh_phi, dh_delta].iter().enumerate() {
                let x = v.adjoint() * dh * v;
                // dU = V (K ∘ X) V†, so Tr(A B dU) = Σ_ab M_ba K_ab X_ab
                let mut dg = C64::new(0.0, 0.0);
                for a in 0..dim {
                    for b in 0..dim {
                        dg += m[(b, a)] * kernel[(a, b)] * x[(a, b)];
                    }
                }
                dg /= d;
                grad[slot * n + k] = 2.0 * (g.conj() * dg).re;
            }
        }
        Ok((fid, grad))
    }
}

/// `Σ_s (amp |g⟩⟨r|_s + h.c.)` as a dense matrix.
fn hop_generator(sites: usize, amp: C64) -> DMatrix<C64> {
    let dim = 1usize << sites;
    let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
    for i in 0..dim {
        for s in 0..sites {
            let bit = 1 << s;
            if i & bit == 0 {
                m[(i, i | bit)] = amp;
                m[(i | bit, i)] = amp.conj();
            }
        }
    }
    m
}

fn project(c: &mut SliceControls, b: &ControlBounds) {
    c.omega.iter_mut().for_each(|o| *o = o.clamp(0.0, b.omega_max));
    c.delta.iter_mut().for_each(|x| *x = x.clamp(-b.delta_max, b.delta_max));
}

/// Analytic fidelity gradient, exposed for finite-difference checks.
pub fn grape_gradient(target: &DMatrix<C64>, u: &InteractionMatrix, controls: &SliceControls) -> Result<(f64, Vec<f64>)> {
    controls.validate()?;
    let model = grape_model(target, u)?;
    model.gradient(controls)
}

/// Operator fidelity of slice controls against `target`.
pub fn grape_fidelity(target: &DMatrix<C64>, u: &InteractionMatrix, controls: &SliceControls) -> Result<f64> {
    controls.validate()?;
    grape_model(target, u)?.fidelity(controls)
}

fn grape_model<'a>(target: &'a DMatrix<C64>, u: &InteractionMatrix) -> Result<GrapeModel<'a>> {
    let sites = u.sites();
    if sites > 6 {
        return Err(Error::Capacity(format!("GRAPE is limited to 6 sites, got {sites}")));
    }
    if target.nrows() != 1 << sites || target.ncols() != 1 << sites {
        return Err(Error::DimensionMismatch { expected: 1 << sites, found: target.nrows() });
    }
    Ok(GrapeModel { diag: InteractionDiagonal::new(u)?, target, sites })
}

/// Projected gradient ascent on the operator fidelity with a backtracking
/// line search. Each control family is scaled by its bound so one step
/// length serves all of them.
pub fn grape_optimize(
    target: &DMatrix<C64>,
    u: &InteractionMatrix,
    template: &SliceControls,
    bounds: &ControlBounds,
    opts: &GrapeOptions,
) -> Result<GrapeResult> {
    template.validate()?;
    let model = grape_model(target, u)?;
    let mut current = template.clone();
    if opts.jitter.iter().any(|&j| j > 0.0) {
        let mut rng = rng_from_seed(opts.seed);
        let n = current.slices();
        for k in 0..n {
            current.omega[k] += opts.jitter[0] * (2.0 * rng.random::<f64>() - 1.0);
            current.phi[k] += opts.jitter[1] * (2.0 * rng.random::<f64>() - 1.0);
            current.delta[k] += opts.jitter[2] * (2.0 * rng.random::<f64>() - 1.0);
        }
        project(&mut current, bounds);
    }
    if opts.iterations == 0 {
        let fidelity = model.fidelity(&current)?;
        return Ok(GrapeResult { controls: current, fidelity, trace: vec![fidelity] });
    }
    let n = current.slices();
    let scale: Vec<f64> = (0..3 * n)
        .map(|i| match i / n {
            0 => bounds.omega_max,
            1 => 1.0,
            _ => bounds.delta_max,
        })
        .collect();
    let (mut fid, mut grad) = model.gradient(&current)?;
    let mut trace = vec![fid];
    let mut step = 1.0;
    for _ in 0..opts.iterations {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Optimization("non-finite fidelity gradient".into()));
        }
        // ascent direction in scaled coordinates x_i / s_i
        let dir: Vec<f64> = grad.iter().zip(&scale).map(|(g, s)| g * s * s).collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if slope <= 0.0 {
            break;
        }
        let x0 = current.to_vec();
        let mut accepted = None;
        for _ in 0..40 {
            let x: Vec<f64> = x0.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
            let mut trial = current.from_vec(&x);
            project(&mut trial, bounds);
            let f = model.fidelity(&trial)?;
            if f > fid {
                accepted = Some((trial, f));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, f)) = accepted else { break };
        let gain = f - fid;
        current = trial;
        let (f2, g2) = model.gradient(&current)?;
        fid = f2.max(f);
        grad = g2;
        trace.push(fid);
        step *= 2.0;
        if gain < opts.tol {
            break;
        }
    }
    Ok(GrapeResult { controls: current, fidelity: fid, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ideal_rotation_unitary;
    use crate::lattice::{interaction_matrix, ring_positions, Truncation, C6_DEFAULT};
    use proptest::prelude::*;

    fn model(sites: usize) -> PrepModel {
        let u = interaction_matrix(&ring_positions(sites, 6.0).unwrap(), C6_DEFAULT, Truncation::Full).unwrap();
        PrepModel::new(&u, 15.0, RampPolicy::Fraction(0.125), EvolveOptions::with_max_step(1e-2)).unwrap()
    }

    #[test]
    fn grid_points() {
        assert_eq!(DeltaGrid::default().points().unwrap().len(), 41);
        assert_eq!(DeltaGrid { lo: 3.0, hi: 3.0, step: 1.0 }.points().unwrap(), vec![3.0]);
        assert!(DeltaGrid { lo: 3.0, hi: 2.0, step: 1.0 }.points().is_err());
        assert!(DeltaGrid { lo: 3.0, hi: 4.0, step: 0.0 }.points().is_err());
    }

    #[test]
    fn single_point_sweep() {
        let m = model(3);
        let r = sweep_values(&m, 0.5, &[20.0]).unwrap();
        assert_eq!(r.grid.len(), 1);
        assert_eq!(r.best, r.grid[0]);
    }

    #[test]
    fn sweep_is_deterministic_and_monotone_in_range() {
        let m = model(5);
        let narrow = sweep_detuning(&m, 1.0, &DeltaGrid { lo: 20.0, hi: 30.0, step: 2.0 }).unwrap();
        let again = sweep_detuning(&m, 1.0, &DeltaGrid { lo: 20.0, hi: 30.0, step: 2.0 }).unwrap();
        assert_eq!(narrow, again);
        let wide = sweep_detuning(&m, 1.0, &DeltaGrid { lo: 10.0, hi: 40.0, step: 2.0 }).unwrap();
        assert!(wide.best.1 >= narrow.best.1);
        assert!(narrow.grid.iter().all(|g| g.1 <= narrow.best.1));
    }

    #[test]
    fn ties_prefer_smaller_detuning() {
        let g: Vec<(f64, f64)> = vec![(3.0, 0.5), (1.0, 0.5), (2.0, 0.4)];
        let mut sorted = g.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(sorted[argmax(&sorted)], (1.0, 0.5));
    }

    #[test]
    fn coarse_to_fine_finds_grid_optimum_near_best() {
        let m = model(3);
        let full = DeltaSearch::default().best(&m, 0.6).unwrap();
        let quick = DeltaSearch { coarse_step: 4.0, refine_candidates: 3, ..Default::default() }.best(&m, 0.6).unwrap();
        assert!(quick.1 <= full.1 + 1e-15);
        assert!(full.1 - quick.1 < 1e-2);
    }

    #[test]
    fn min_time_is_certified_and_monotone_in_target() {
        let m = model(3);
        let d = DeltaSearch { grid: DeltaGrid { lo: 10.0, hi: 50.0, step: 4.0 }, ..Default::default() };
        let s = TimeSearch { t_start: 0.1, ..Default::default() };
        let strict = min_time_for_infidelity(&m, 1e-3, &d, &s).unwrap();
        assert!(strict.infidelity <= 1e-3);
        let f = m.fidelity(strict.delta, strict.t_star).unwrap();
        assert!(1.0 - f <= 1e-3);
        let loose = min_time_for_infidelity(&m, 1e-2, &d, &s).unwrap();
        assert!(loose.t_star <= strict.t_star);
        let again = min_time_for_infidelity(&m, strict.infidelity, &d, &s).unwrap();
        assert!(again.t_star <= strict.t_star);
    }

    #[test]
    fn min_time_reports_exhaustion() {
        let m = model(3);
        let d = DeltaSearch { grid: DeltaGrid { lo: 20.0, hi: 20.0, step: 1.0 }, ..Default::default() };
        let s = TimeSearch { t_start: 0.05, t_max: 0.1, rel_width: 0.05 };
        assert!(matches!(min_time_for_infidelity(&m, 1e-6, &d, &s), Err(Error::SearchExhausted(_))));
        assert!(min_time_for_infidelity(&m, 0.0, &d, &s).is_err());
    }

    #[test]
    fn power_law_exact() {
        let pts: Vec<(f64, f64)> = [5.0, 7.0, 9.0, 11.0].iter().map(|&l| (l, l * l)).collect();
        let f = fit_power_law(&pts).unwrap();
        assert!((f.exponent - 2.0).abs() < 1e-9);
        assert!((f.prefactor - 1.0).abs() < 1e-9);
        assert!(f.std_error < 1e-9);
        assert!(fit_power_law(&pts[..2]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    proptest! {
        #[test]
        fn power_law_scale_equivariant(ys in proptest::collection::vec(0.1f64..10.0, 4), c in 0.01f64..100.0) {
            let pts: Vec<(f64, f64)> = ys.iter().enumerate().map(|(i, &y)| ((i + 3) as f64, y)).collect();
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, c * y)).collect();
            let a = fit_power_law(&pts).unwrap();
            let b = fit_power_law(&scaled).unwrap();
            prop_assert!((a.exponent - b.exponent).abs() < 1e-12);
        }
    }

    fn pair(distance: f64) -> InteractionMatrix {
        let v = C6_DEFAULT / distance.powi(6);
        InteractionMatrix(DMatrix::from_row_slice(2, 2, &[0.0, v, v, 0.0]))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let target = ideal_rotation_unitary(2).unwrap();
        let mut rng = rng_from_seed(11);
        for (trial, dist) in [8.0, 10.0, 12.0].into_iter().enumerate() {
            let u = pair(dist);
            let n = 5;
            let mut c = SliceControls::constant(0.25, n, 0.0, 0.0, 0.0);
            for k in 0..n {
                c.omega[k] = 2.0 + 10.0 * rng.random::<f64>();
                c.phi[k] = 6.0 * rng.random::<f64>();
                c.delta[k] = 20.0 * rng.random::<f64>() - 10.0;
            }
            let (f0, g) = grape_gradient(&target, &u, &c).unwrap();
            assert!((f0 - grape_fidelity(&target, &u, &c).unwrap()).abs() < 1e-12);
            let x = c.to_vec();
            for i in 0..x.len() {
                let h = 1e-5 * x[i].abs().max(1.0);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                let fp = grape_fidelity(&target, &u, &c.from_vec(&xp)).unwrap();
                let fm = grape_fidelity(&target, &u, &c.from_vec(&xm)).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "trial {trial} component {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn zero_iterations_return_template() {
        let u = pair(10.0);
        let c = SliceControls::constant(0.2, 4, 5.0, 1.0, 0.0);
        let r = grape_optimize(
            &ideal_rotation_unitary(2).unwrap(),
            &u,
            &c,
            &ControlBounds::from(&HardwareLimits::default()),
            &GrapeOptions { iterations: 0, ..Default::default() },
        )
        .unwrap();
        assert_eq!(r.controls, c);
        assert_eq!(r.trace.len(), 1);
    }

    #[test]
    fn free_atoms_reach_ideal_rotation() {
        let u = interaction_matrix(&ring_positions(3, 1e4).unwrap(), C6_DEFAULT, Truncation::Full).unwrap();
        let c = SliceControls::constant(0.2, 10, 3.0, 0.0, 0.0);
        let opts = GrapeOptions { iterations: 300, jitter: [1.0, 0.5, 2.0], seed: 4, tol: 1e-14 };
        let r = grape_optimize(&ideal_rotation_unitary(3).unwrap(), &u, &c, &ControlBounds::from(&HardwareLimits::default()), &opts).unwrap();
        assert!(r.fidelity > 0.99, "{}", r.fidelity);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn slice_schedule_holds_values() {
        let c = SliceControls { duration: 0.4, omega: vec![1.0, 2.0], phi: vec![0.0, 1.0], delta: vec![3.0, 4.0] };
        let s = c.to_schedule(0.001).unwrap();
        assert_eq!(s.controls(0.1), (1.0, 3.0, 0.0));
        assert_eq!(s.controls(0.3), (2.0, 4.0, 1.0));
    }

    #[test]
    fn gap_scaling_by_parity() {
        let odd = gap_scan(&[5, 7, 9], 6.0, crate::lattice::C6_DEFAULT, Truncation::Full, 5.0, 20.0).unwrap();
        let fit = fit_power_law(&odd.iter().map(|g| (g.sites as f64, g.gap)).collect::<Vec<_>>()).unwrap();
        assert!((fit.exponent + 2.0).abs() < 0.3, "{fit:?}");
        let even = gap_scan(&[4, 6, 8], 6.0, crate::lattice::C6_DEFAULT, Truncation::Full, 5.0, 20.0).unwrap();
        assert!(even[2].gap > 0.5 * even[0].gap, "{even:?}");
    }
}
