//! Expectation values used by the fidelity estimator.

use crate::basis::{kink_strings, BitString};
use crate::error::{Error, Result};
use crate::state::QuantumState;

/// Bit masks of every σx string on an even number `2n` of contiguous ring
/// sites, `n = 1..=(L-1)/2`, each starting position once. There are
/// `L (L-1) / 2` of them for odd `L`.
pub fn px_masks(sites: usize) -> Vec<u64> {
    let mut masks = Vec::with_capacity(sites * sites.saturating_sub(1) / 2);
    for n in 1..=(sites.saturating_sub(1) / 2) {
        for start in 0..sites {
            let mask = (0..2 * n).fold(0u64, |m, k| m | 1 << ((start + k) % sites));
            masks.push(mask);
        }
    }
    masks
}

/// `Tr(ρ P_x)` where `P_x` sums all even-length contiguous σx strings.
pub fn px_expectation(state: &QuantumState) -> f64 {
    let masks = px_masks(state.sites());
    match state {
        QuantumState::Pure { amplitudes, .. } => masks
            .iter()
            .map(|&m| {
                let m = m as usize;
                amplitudes.iter().enumerate().map(|(i, a)| (amplitudes[i ^ m].conj() * a).re).sum::<f64>()
            })
            .sum(),
        QuantumState::Density { matrix, .. } => masks
            .iter()
            .map(|&m| {
                let m = m as usize;
                (0..matrix.nrows()).map(|i| matrix[(i, i ^ m)].re).sum::<f64>()
            })
            .sum(),
    }
}

/// Probability of each kink string, ordered by kink index.
pub fn kink_populations(state: &QuantumState) -> Result<Vec<f64>> {
    let probs = state.probabilities();
    Ok(kink_strings(state.sites())?.iter().map(|s| probs[s.index()]).collect())
}

/// Distribution of the total Rydberg count, index = number of `r`.
pub fn magnetization_distribution(probabilities: &[f64], sites: usize) -> Result<Vec<f64>> {
    if probabilities.len() != 1 << sites {
        return Err(Error::DimensionMismatch { expected: 1 << sites, found: probabilities.len() });
    }
    let mut out = vec![0.0; sites + 1];
    for (i, p) in probabilities.iter().enumerate() {
        out[i.count_ones() as usize] += p;
    }
    Ok(out)
}

/// Eigenvalue `±1` of `σx` assigned to an x-basis outcome: `g` is `+1`.
pub fn x_sign(s: &BitString, site: usize) -> f64 {
    if s.is_rydberg(site) {
        -1.0
    } else {
        1.0
    }
}
