//! Fidelity estimation from two-basis data and Bayesian reweighting of a
//! simulated prior ensemble.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::kink_strings;
use crate::dynamics::{apply_rotation, evolve_open, EvolveOptions, NoiseParams, NoiseRealization};
use crate::error::{Error, Result};
use crate::lattice::{ring_positions, Truncation};
use crate::measurement::{bootstrap_many, mitigate_readout, Basis, ConfusionModel, Negativity, ShotSet};
use crate::observables::{kink_populations, magnetization_distribution, px_expectation, px_masks};
use crate::pulse::{build_prep_schedule, build_rotation_schedule, PrepParams, RotationParams};
use crate::rng::{derive_seed, rng_from_seed};
use crate::state::QuantumState;

/// `Σ f (ln f − ln max(t, ε))`. Returns `+∞` when `f > 0` meets `t = 0`
/// with `ε = 0`.
pub fn kl_divergence(f: &[f64], t: &[f64], epsilon: f64) -> Result<f64> {
    if f.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: f.len(), found: t.len() });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("regulariser must be non-negative, got {epsilon}")));
    }
    let mut d = 0.0;
    for (&fx, &tx) in f.iter().zip(t) {
        if fx > 0.0 {
            let q = tx.max(epsilon);
            if q <= 0.0 {
                return Ok(f64::INFINITY);
            }
            d += fx * (fx.ln() - q.ln());
        }
    }
    // rounding can leave a tiny negative value for f ≈ t
    Ok(d.max(0.0))
}

/// `exp(−N · D_KL(f ‖ t))`.
pub fn likelihood(f: &[f64], t: &[f64], shots: usize, epsilon: f64) -> Result<f64> {
    Ok(log_likelihood(f, t, shots, epsilon)?.exp())
}

pub fn log_likelihood(f: &[f64], t: &[f64], shots: usize, epsilon: f64) -> Result<f64> {
    if shots == 0 {
        return Err(Error::InvalidInput("likelihood needs at least one shot".into()));
    }
    Ok(-(shots as f64) * kl_divergence(f, t, epsilon)?)
}

/// Default regulariser `1 / (10 N)`.
pub fn default_epsilon(shots: usize) -> f64 {
    1.0 / (10.0 * shots.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    pub value: f64,
    /// False when sampling noise pushed the value outside `[0, 1]`.
    pub in_range: bool,
}

/// `(Σ_k p_k + ⟨P_x⟩) / L`.
pub fn fidelity_from_counts(kinks: &[f64], px: f64, sites: usize) -> Result<FidelityEstimate> {
    if kinks.len() != sites {
        return Err(Error::DimensionMismatch { expected: sites, found: kinks.len() });
    }
    let value = (kinks.iter().sum::<f64>() + px) / sites as f64;
    Ok(FidelityEstimate { value, in_range: (0.0..=1.0).contains(&value) })
}

fn px_value(index: usize, masks: &[u64]) -> f64 {
    masks.iter().map(|&m| if (index as u64 & m).count_ones() % 2 == 0 { 1.0 } else { -1.0 }).sum()
}

/// `⟨P_x⟩` from a distribution over x-basis outcomes.
pub fn px_from_distribution(probs: &[f64], sites: usize) -> Result<f64> {
    if probs.len() != 1 << sites {
        return Err(Error::DimensionMismatch { expected: 1 << sites, found: probs.len() });
    }
    let masks = px_masks(sites);
    Ok(probs.iter().enumerate().filter(|(_, p)| **p != 0.0).map(|(i, p)| p * px_value(i, &masks)).sum())
}

/// Mean of the per-shot correlator sum over x-basis shots, with the
/// standard error of that mean. Summing per shot keeps the correlations
/// between overlapping strings in the error.
pub fn px_from_samples(shots: &ShotSet) -> Result<(f64, f64)> {
    if shots.basis != Basis::X {
        return Err(Error::InvalidInput(format!("correlators need x-basis shots, got {}", shots.basis)));
    }
    if shots.is_empty() {
        return Err(Error::InvalidInput("no shots".into()));
    }
    let masks = px_masks(shots.sites);
    let values: Vec<f64> = shots.shots.iter().map(|s| px_value(s.post.index(), &masks)).collect();
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// One measured setting: a z readout when `rotation` is `None`, otherwise
/// a readout after the given rotation pulse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub label: String,
    pub rotation: Option<RotationParams>,
}

/// The standard set of five rotation experiments at
/// `omega_rot + {0, −0.5, +0.5, −1, +1}`.
pub fn rotation_experiments(omega_rot: f64, plateau: f64, phase: f64) -> Vec<Experiment> {
    [0.0, -0.5, 0.5, -1.0, 1.0]
        .iter()
        .map(|&d| Experiment {
            label: format!("rot{:+.1}", d),
            rotation: Some(RotationParams::new(omega_rot + d, plateau, phase)),
        })
        .collect()
}

/// Everything needed to simulate the prior ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub sites: usize,
    pub spacing: f64,
    pub c6: f64,
    pub truncation: Truncation,
    pub prep: PrepParams,
    pub experiments: Vec<Experiment>,
    pub noise: NoiseParams,
    pub members: usize,
    pub options: EvolveOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub index: usize,
    pub seed: u64,
    pub realization: NoiseRealization,
    /// Estimator value from exact expectations of the prepared state.
    pub fidelity: f64,
    pub z_distribution: Vec<f64>,
    /// Predicted readout distribution for each experiment, readout noise
    /// included.
    pub distributions: Vec<Vec<f64>>,
    /// Prepared density matrix; not serialised.
    #[serde(skip)]
    pub state: Option<QuantumState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEnsemble {
    pub sites: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub members: Vec<EnsembleMember>,
}

/// Simulates `spec.members` noisy preparations. Member `j` draws its noise
/// from `derive_seed(seed, j)`.
pub fn build_prior_ensemble(spec: &EnsembleSpec, seed: u64) -> Result<PriorEnsemble> {
    if spec.members == 0 {
        return Err(Error::InvalidInput("the ensemble needs at least one member".into()));
    }
    if spec.sites > crate::dynamics::MAX_DENSE_OPEN_SITES {
        return Err(Error::Capacity(format!(
            "{} sites exceeds the density-matrix limit of {}",
            spec.sites,
            crate::dynamics::MAX_DENSE_OPEN_SITES
        )));
    }
    spec.noise.validate()?;
    kink_strings(spec.sites)?;
    let geometry = ring_positions(spec.sites, spec.spacing)?;
    let prep = build_prep_schedule(&spec.prep)?;
    let rotations = spec
        .experiments
        .iter()
        .map(|e| e.rotation.as_ref().map(build_rotation_schedule).transpose())
        .collect::<Result<Vec<_>>>()?;
    let cm = ConfusionModel::uniform(spec.sites, spec.noise.p_gr, spec.noise.p_rg)?;
    let ground = QuantumState::all_ground(spec.sites)?;
    let members = (0..spec.members)
        .into_par_iter()
        .map(|j| {
            let member_seed = derive_seed(seed, j as u64);
            let realization = spec.noise.realize(&geometry, member_seed)?;
            let u = realization.interactions(spec.c6, spec.truncation)?;
            let rho = evolve_open(&u, &realization.schedule(&prep)?, &ground, realization.gamma, &spec.options)?.state;
            let z_distribution = cm.apply(&rho.probabilities())?;
            let distributions = rotations
                .iter()
                .map(|r| match r {
                    None => Ok(z_distribution.clone()),
                    Some(r) => {
                        let rotated = apply_rotation(&rho, &realization.schedule(r)?, &u, realization.gamma, &spec.options)?;
                        cm.apply(&rotated.probabilities())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let fidelity = fidelity_from_counts(&kink_populations(&rho)?, px_expectation(&rho), spec.sites)?.value;
            Ok(EnsembleMember { index: j, seed: member_seed, realization, fidelity, z_distribution, distributions, state: Some(rho) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorEnsemble { sites: spec.sites, seed, labels: spec.experiments.iter().map(|e| e.label.clone()).collect(), members })
}

impl PriorEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn fidelities(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.fidelity).collect()
    }

    /// Smallest and largest member fidelity.
    pub fn band(&self) -> (f64, f64) {
        let f = self.fidelities();
        (f.iter().cloned().fold(f64::INFINITY, f64::min), f.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot serialise ensemble: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let e: PriorEnsemble = toml::from_str(text).map_err(|err| Error::Parse {
            line: err.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: err.message().to_string(),
        })?;
        let dim = 1usize << e.sites;
        for m in &e.members {
            if m.distributions.len() != e.labels.len() || m.z_distribution.len() != dim || m.distributions.iter().any(|d| d.len() != dim) {
                return Err(Error::InvalidInput(format!("member {} has malformed distributions", m.index)));
            }
        }
        Ok(e)
    }
}

/// Measured frequencies of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub label: String,
    pub frequencies: Vec<f64>,
    pub shots: usize,
}

impl Observation {
    pub fn from_shots(label: impl Into<String>, shots: &ShotSet) -> Result<Self> {
        Ok(Observation { label: label.into(), frequencies: shots.frequencies()?, shots: shots.len() })
    }
}

/// Samples synthetic observations from member `j`'s predicted
/// distributions; experiment `α` uses the stream `derive_seed(seed, α)`.
pub fn synthesize_observations(ensemble: &PriorEnsemble, member: usize, shots: &[usize], seed: u64) -> Result<Vec<Observation>> {
    let m = ensemble
        .members
        .get(member)
        .ok_or_else(|| Error::InvalidInput(format!("no member {member} in an ensemble of {}", ensemble.len())))?;
    if shots.len() != ensemble.labels.len() {
        return Err(Error::DimensionMismatch { expected: ensemble.labels.len(), found: shots.len() });
    }
    ensemble
        .labels
        .iter()
        .zip(&m.distributions)
        .zip(shots)
        .enumerate()
        .map(|(a, ((label, dist), &n))| {
            let set = crate::measurement::sample_distribution(dist, ensemble.sites, Basis::Z, n, derive_seed(seed, a as u64))?;
            Observation::from_shots(label.clone(), &set)
        })
        .collect()
}

/// Observations matched to the ensemble's experiment labels, in ensemble
/// order.
fn align<'a>(ensemble: &PriorEnsemble, observations: &'a [Observation]) -> Result<Vec<(usize, &'a Observation)>> {
    observations
        .iter()
        .map(|o| {
            ensemble
                .labels
                .iter()
                .position(|l| *l == o.label)
                .map(|a| (a, o))
                .ok_or_else(|| Error::InvalidInput(format!("no experiment '{}' in the ensemble", o.label)))
        })
        .collect()
}

/// `log ℒ_j^(α)` for every member `j` (rows) and observation `α` (columns).
/// `epsilon = None` uses `1 / (10 N_α)`.
pub fn log_likelihood_matrix(ensemble: &PriorEnsemble, observations: &[Observation], epsilon: Option<f64>) -> Result<DMatrix<f64>> {
    let aligned = align(ensemble, observations)?;
    let rows = ensemble
        .members
        .par_iter()
        .map(|m| {
            aligned
                .iter()
                .map(|(a, o)| log_likelihood(&o.frequencies, &m.distributions[*a], o.shots, epsilon.unwrap_or(default_epsilon(o.shots))))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(rows.len(), aligned.len(), |j, a| rows[j][a]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorWeights {
    pub w: Vec<f64>,
}

impl PosteriorWeights {
    pub fn uniform(members: usize) -> Self {
        PosteriorWeights { w: vec![1.0 / members as f64; members] }
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, &w) in self.w.iter().enumerate() {
            if w > self.w[best] {
                best = j;
            }
        }
        best
    }
}

/// Normalised products of the likelihoods in each row, computed from
/// log-likelihoods with a max shift.
pub fn posterior_weights(log_likelihoods: &DMatrix<f64>) -> Result<PosteriorWeights> {
    let totals: Vec<f64> = log_likelihoods.row_iter().map(|r| r.iter().sum()).collect();
    let top = totals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if totals.is_empty() || !top.is_finite() {
        return Err(Error::DegeneratePosterior);
    }
    let raw: Vec<f64> = totals.iter().map(|t| (t - top).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(PosteriorWeights { w: raw.into_iter().map(|r| r / z).collect() })
}

/// Weighted mean and weighted standard deviation.
pub fn weighted_stats(values: &[f64], w: &PosteriorWeights) -> Result<(f64, f64)> {
    if values.len() != w.w.len() {
        return Err(Error::DimensionMismatch { expected: values.len(), found: w.w.len() });
    }
    let mean: f64 = values.iter().zip(&w.w).map(|(f, w)| f * w).sum();
    let var: f64 = values.iter().zip(&w.w).map(|(f, w)| w * (f - mean).powi(2)).sum();
    Ok((mean, var.max(0.0).sqrt()))
}

/// `F = Σ_j w_j F_e,j` with the weighted spread.
pub fn posterior_fidelity(ensemble: &PriorEnsemble, w: &PosteriorWeights) -> Result<(f64, f64)> {
    weighted_stats(&ensemble.fidelities(), w)
}

/// Divergence of each observation from the weighted prediction, over bit
/// strings and over the total Rydberg count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub label: String,
    pub prior_bitstring: f64,
    pub posterior_bitstring: f64,
    pub prior_magnetization: f64,
    pub posterior_magnetization: f64,
}

pub fn kl_table(ensemble: &PriorEnsemble, observations: &[Observation], w: &PosteriorWeights) -> Result<Vec<KlRow>> {
    if w.w.len() != ensemble.len() {
        return Err(Error::DimensionMismatch { expected: ensemble.len(), found: w.w.len() });
    }
    let prior = PosteriorWeights::uniform(ensemble.len());
    let sites = ensemble.sites;
    let mixture = |a: usize, weights: &PosteriorWeights| -> Vec<f64> {
        let mut out = vec![0.0; 1 << sites];
        for (m, wj) in ensemble.members.iter().zip(&weights.w) {
            for (o, p) in out.iter_mut().zip(&m.distributions[a]) {
                *o += wj * p;
            }
        }
        out
    };
    align(ensemble, observations)?
        .into_iter()
        .map(|(a, o)| {
            let eps = default_epsilon(o.shots);
            let (tp, tq) = (mixture(a, &prior), mixture(a, w));
            let fm = magnetization_distribution(&o.frequencies, sites)?;
            Ok(KlRow {
                label: o.label.clone(),
                prior_bitstring: kl_divergence(&o.frequencies, &tp, eps)?,
                posterior_bitstring: kl_divergence(&o.frequencies, &tq, eps)?,
                prior_magnetization: kl_divergence(&fm, &magnetization_distribution(&tp, sites)?, eps)?,
                posterior_magnetization: kl_divergence(&fm, &magnetization_distribution(&tq, sites)?, eps)?,
            })
        })
        .collect()
}

/// Kink populations with bootstrap errors, raw and readout-mitigated. The
/// last entry of each vector is the "other" bucket holding everything
/// outside the kink set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationEstimate {
    pub raw: Vec<f64>,
    pub raw_err: Vec<f64>,
    pub mitigated: Vec<f64>,
    pub mitigated_err: Vec<f64>,
    pub clipped_mass: f64,
}

fn kink_buckets(probs: &[f64], kinks: &[usize]) -> Vec<f64> {
    let mut out: Vec<f64> = kinks.iter().map(|&k| probs[k]).collect();
    out.push(1.0 - out.iter().sum::<f64>());
    out
}

pub fn population_estimate(
    shots: &ShotSet,
    cm: &ConfusionModel,
    mode: Negativity,
    resamples: usize,
    seed: u64,
) -> Result<PopulationEstimate> {
    if shots.basis != Basis::Z {
        return Err(Error::InvalidInput(format!("populations need z-basis shots, got {}", shots.basis)));
    }
    let kinks: Vec<usize> = kink_strings(shots.sites)?.iter().map(|k| k.index()).collect();
    let freq = shots.frequencies()?;
    let mitigated = mitigate_readout(&freq, cm, mode)?;
    let stat = |mitigate: bool| {
        let kinks = &kinks;
        move |draw: &[crate::measurement::Shot]| -> Vec<f64> {
            let mut set = ShotSet::new(shots.sites, Basis::Z, "");
            set.shots = draw.to_vec();
            let f = set.frequencies().expect("non-empty resample");
            let p = if mitigate { mitigate_readout(&f, cm, mode).expect("validated model").probs } else { f };
            kink_buckets(&p, kinks)
        }
    };
    let (_, raw_err) = bootstrap_many(&shots.shots, stat(false), resamples, seed)?;
    let (_, mitigated_err) = bootstrap_many(&shots.shots, stat(true), resamples, derive_seed(seed, 1))?;
    Ok(PopulationEstimate {
        raw: kink_buckets(&freq, &kinks),
        raw_err,
        mitigated: kink_buckets(&mitigated.probs, &kinks),
        mitigated_err,
        clipped_mass: mitigated.clipped_mass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity: f64,
    pub stderr: f64,
    pub in_range: bool,
    pub kink_sum: f64,
    pub px: f64,
    pub px_stderr: f64,
}

/// Two-basis estimate from readout-mitigated z and x data. Errors come
/// from independent bootstraps of the two sets.
pub fn estimate_fidelity(
    z: &ShotSet,
    x: &ShotSet,
    cm: &ConfusionModel,
    mode: Negativity,
    resamples: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if z.basis != Basis::Z || x.basis != Basis::X {
        return Err(Error::InvalidInput("expected one z-basis and one x-basis shot set".into()));
    }
    if z.sites != x.sites {
        return Err(Error::DimensionMismatch { expected: z.sites, found: x.sites });
    }
    let sites = z.sites;
    let kinks: Vec<usize> = kink_strings(sites)?.iter().map(|k| k.index()).collect();
    let kink_sum = |draw: &[crate::measurement::Shot]| -> f64 {
        let p = mitigated_from(draw, sites, cm, mode);
        kinks.iter().map(|&k| p[k]).sum()
    };
    let px = |draw: &[crate::measurement::Shot]| -> f64 {
        px_from_distribution(&mitigated_from(draw, sites, cm, mode), sites).expect("sized distribution")
    };
    let k0 = kink_sum(&z.shots);
    let px0 = px(&x.shots);
    let (_, ke) = bootstrap_many(&z.shots, |d| vec![kink_sum(d)], resamples, seed)?;
    let (_, pe) = bootstrap_many(&x.shots, |d| vec![px(d)], resamples, derive_seed(seed, 1))?;
    let est = fidelity_from_counts(&vec![k0 / sites as f64; sites], px0, sites)?;
    Ok(FidelityReport {
        fidelity: est.value,
        stderr: (ke[0].powi(2) + pe[0].powi(2)).sqrt() / sites as f64,
        in_range: est.in_range,
        kink_sum: k0,
        px: px0,
        px_stderr: pe[0],
    })
}

fn mitigated_from(draw: &[crate::measurement::Shot], sites: usize, cm: &ConfusionModel, mode: Negativity) -> Vec<f64> {
    let mut f = vec![0.0; 1 << sites];
    for s in draw {
        f[s.post.index()] += 1.0;
    }
    let n = draw.len() as f64;
    f.iter_mut().for_each(|x| *x /= n);
    mitigate_readout(&f, cm, mode).expect("validated model").probs
}

/// Random member index for a synthetic experiment.
pub fn pick_member(members: usize, seed: u64) -> usize {
    use rand::Rng as _;
    rng_from_seed(seed).random_range(0..members)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::kink_superposition;
    use crate::measurement::{sample_bitstrings, Shot};
    use crate::state::C64;
    use crate::basis::BitString;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_distribution(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn kl_examples() {
        let f = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&f, &f, 0.0).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0], 0.0).unwrap(), f64::INFINITY);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0], 0.01).unwrap().is_finite());
        assert_eq!(likelihood(&[0.5, 0.5], &[1.0, 0.0], 10, 0.0).unwrap(), 0.0);
        assert!(kl_divergence(&f, &f[..2], 0.0).is_err());
    }

    #[test]
    fn kl_gibbs_inequality() {
        let mut rng = rng_from_seed(4);
        for _ in 0..10_000 {
            let n = rng.random_range(2..9);
            let f = random_distribution(&mut rng, n);
            let t = random_distribution(&mut rng, n);
            assert!(kl_divergence(&f, &t, 0.0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kl_joint_convexity() {
        let mut rng = rng_from_seed(5);
        for _ in 0..200 {
            let (f1, f2, t1, t2) = (
                random_distribution(&mut rng, 6),
                random_distribution(&mut rng, 6),
                random_distribution(&mut rng, 6),
                random_distribution(&mut rng, 6),
            );
            let l: f64 = rng.random();
            let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| l * x + (1.0 - l) * y).collect::<Vec<_>>();
            let lhs = kl_divergence(&mix(&f1, &f2), &mix(&t1, &t2), 0.0).unwrap();
            let rhs = l * kl_divergence(&f1, &t1, 0.0).unwrap() + (1.0 - l) * kl_divergence(&f2, &t2, 0.0).unwrap();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn likelihood_scaling() {
        let f = [0.4, 0.6];
        let (t1, t2) = ([0.5, 0.5], [0.7, 0.3]);
        assert_eq!(likelihood(&f, &f, 100, 0.0).unwrap(), 1.0);
        assert!(likelihood(&f, &t2, 50, 0.0).unwrap() < likelihood(&f, &t1, 50, 0.0).unwrap());
        let (a, b) = (likelihood(&f, &t1, 50, 0.0).unwrap(), likelihood(&f, &t1, 100, 0.0).unwrap());
        assert!((b - a * a).abs() < 1e-15);
        assert!(likelihood(&f, &t1, 0, 0.0).is_err());
    }

    #[test]
    fn estimator_floor_and_ceiling() {
        let one = fidelity_from_counts(&[0.2; 5], 4.0, 5).unwrap();
        assert!((one.value - 1.0).abs() < 1e-15 && one.in_range);
        let floor = fidelity_from_counts(&[0.2; 5], 0.0, 5).unwrap();
        assert!((floor.value - 0.2).abs() < 1e-15);
        assert!(!fidelity_from_counts(&[0.2; 5], 4.5, 5).unwrap().in_range);
    }

    fn random_kink_density(sites: usize, rng: &mut crate::rng::Rng) -> QuantumState {
        let kinks = kink_strings(sites).unwrap();
        let l = kinks.len();
        let a = DMatrix::from_fn(l, l, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let small = &a * a.adjoint();
        let small = &small / small.trace();
        let dim = 1 << sites;
        let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
        for (i, ki) in kinks.iter().enumerate() {
            for (j, kj) in kinks.iter().enumerate() {
                m[(ki.index(), kj.index())] = small[(i, j)];
            }
        }
        QuantumState::density(sites, m).unwrap()
    }

    #[test]
    fn estimator_matches_direct_overlap() {
        let mut rng = rng_from_seed(6);
        for sites in [3usize, 5, 7] {
            let ks = kink_superposition(sites).unwrap();
            let target = ks.amplitudes().unwrap();
            for _ in 0..20 {
                let rho = random_kink_density(sites, &mut rng);
                let est = fidelity_from_counts(&kink_populations(&rho).unwrap(), px_expectation(&rho), sites).unwrap();
                let direct = rho.overlap_with_pure(target).unwrap();
                assert!((est.value - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn px_from_exact_samples() {
        let ks = kink_superposition(5).unwrap();
        let shots = sample_bitstrings(&ks, Basis::X, 10_000, 3).unwrap();
        let (v, se) = px_from_samples(&shots).unwrap();
        assert!((v - 4.0).abs() < 3.0 * se, "{v} ± {se}");
        let z = sample_bitstrings(&ks, Basis::Z, 10, 3).unwrap();
        assert!(px_from_samples(&z).is_err());
        let mut g = ShotSet::new(7, Basis::X, "g");
        let ground = BitString::ground(7).unwrap();
        g.shots = (0..20).map(|i| Shot { id: i, pre: ground, post: ground }).collect();
        assert_eq!(px_from_samples(&g).unwrap(), (21.0, 0.0));
        g.shots.clear();
        assert!(px_from_samples(&g).is_err());
    }

    #[test]
    fn px_distribution_matches_state() {
        let ks = kink_superposition(5).unwrap();
        let rotated = crate::dynamics::rotate_to_x_basis(&ks);
        assert!((px_from_distribution(&rotated.probabilities(), 5).unwrap() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn weight_examples() {
        let flat = DMatrix::from_element(4, 3, -2.0);
        let w = posterior_weights(&flat).unwrap();
        assert!(w.w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let mut dom = DMatrix::from_element(5, 5, -300.0);
        for a in 0..5 {
            dom[(2, a)] = -200.0;
        }
        let w = posterior_weights(&dom).unwrap();
        assert!(w.w[2] > 1.0 - 1e-10);
        assert_eq!(w.argmax(), 2);
        assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(posterior_weights(&DMatrix::from_element(3, 2, f64::NEG_INFINITY)), Err(Error::DegeneratePosterior)));
    }

    proptest! {
        #[test]
        fn weights_ignore_common_column_factors(vals in prop::collection::vec(-50.0f64..0.0, 12), shift in -30.0f64..30.0) {
            let m = DMatrix::from_vec(4, 3, vals);
            let mut shifted = m.clone();
            for j in 0..4 {
                shifted[(j, 1)] += shift;
            }
            let (a, b) = (posterior_weights(&m).unwrap(), posterior_weights(&shifted).unwrap());
            for (x, y) in a.w.iter().zip(&b.w) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_weighting() {
        let vals = [0.5, 0.7, 0.9];
        let (m, _) = weighted_stats(&vals, &PosteriorWeights::uniform(3)).unwrap();
        assert!((m - 0.7).abs() < 1e-15);
        let point = PosteriorWeights { w: vec![0.0, 1.0, 0.0] };
        assert_eq!(weighted_stats(&vals, &point).unwrap(), (0.7, 0.0));
        assert!(weighted_stats(&vals, &PosteriorWeights::uniform(2)).is_err());
    }

    fn small_spec(noise: NoiseParams, members: usize) -> EnsembleSpec {
        EnsembleSpec {
            sites: 3,
            spacing: 6.0,
            c6: crate::lattice::C6_DEFAULT,
            truncation: Truncation::Full,
            prep: PrepParams::new(11.46, 25.0, 1.0, 0.25),
            experiments: rotation_experiments(7.97, 0.15, std::f64::consts::FRAC_PI_2),
            noise,
            members,
            options: EvolveOptions::with_max_step(1e-2),
        }
    }

    #[test]
    fn noiseless_ensemble_is_degenerate() {
        let e = build_prior_ensemble(&small_spec(NoiseParams::noiseless(), 3), 1).unwrap();
        assert_eq!(e.len(), 3);
        for m in &e.members[1..] {
            assert_eq!(m.fidelity, e.members[0].fidelity);
            assert_eq!(m.distributions, e.members[0].distributions);
        }
        for d in e.members[0].distributions.iter().chain([&e.members[0].z_distribution]) {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        assert!(build_prior_ensemble(&small_spec(NoiseParams::noiseless(), 0), 1).is_err());
        let mut big = small_spec(NoiseParams::noiseless(), 1);
        big.sites = 11;
        assert!(matches!(build_prior_ensemble(&big, 1), Err(Error::Capacity(_))));
    }

    fn noisy() -> NoiseParams {
        NoiseParams { gamma: 0.1, sigma_pos: 0.15, sigma_omega_rel: 0.05, sigma_delta: 1.0, ..Default::default() }
    }

    #[test]
    fn ensemble_round_trips_through_toml() {
        let e = build_prior_ensemble(&small_spec(noisy(), 4), 2).unwrap();
        let back = PriorEnsemble::from_toml(&e.to_toml().unwrap()).unwrap();
        assert_eq!(back.labels, e.labels);
        for (a, b) in back.members.iter().zip(&e.members) {
            assert_eq!(a.fidelity, b.fidelity);
            assert_eq!(a.distributions, b.distributions);
            assert_eq!(a.realization, b.realization);
        }
    }

    #[test]
    fn posterior_concentrates_on_the_source() {
        let e = build_prior_ensemble(&small_spec(noisy(), 12), 3).unwrap();
        let f = e.fidelities();
        let prior = weighted_stats(&f, &PosteriorWeights::uniform(f.len())).unwrap();
        assert!(prior.1 > 0.0);
        let truth = 5;
        let mut last = 0.0;
        for n in [100usize, 10_000, 100_000] {
            let obs = synthesize_observations(&e, truth, &vec![n; e.labels.len()], 8).unwrap();
            let w = posterior_weights(&log_likelihood_matrix(&e, &obs, None).unwrap()).unwrap();
            assert!(w.w[truth] >= last - 1e-9, "{n}: {} < {last}", w.w[truth]);
            last = w.w[truth];
            if n == 100_000 {
                assert_eq!(w.argmax(), truth);
                let (_, spread) = posterior_fidelity(&e, &w).unwrap();
                assert!(spread <= prior.1);
                let rows = kl_table(&e, &obs, &w).unwrap();
                assert!(rows.iter().all(|r| r.posterior_bitstring <= r.prior_bitstring + 1e-12));
            }
        }
    }

    #[test]
    fn population_and_fidelity_estimates() {
        let ks = kink_superposition(5).unwrap();
        let z = sample_bitstrings(&ks, Basis::Z, 4000, 1).unwrap();
        let x = sample_bitstrings(&ks, Basis::X, 4000, 2).unwrap();
        let id = ConfusionModel::identity(5);
        let pop = population_estimate(&z, &id, Negativity::Clip, 200, 3).unwrap();
        assert_eq!(pop.raw.len(), 6);
        assert!(pop.raw[5].abs() < 1e-12);
        assert!(pop.raw_err[..5].iter().all(|&e| e > 0.0));
        let fr = estimate_fidelity(&z, &x, &id, Negativity::Clip, 200, 4).unwrap();
        assert!((fr.fidelity - 1.0).abs() < 4.0 * fr.stderr + 1e-12, "{fr:?}");
        assert!(estimate_fidelity(&x, &z, &id, Negativity::Clip, 200, 4).is_err());
    }
}
