//! Low-lying spectrum by exact diagonalisation.

use crate::error::{Error, Result};
use crate::hamiltonian::{HermitianOp, RydbergHamiltonian, MAX_SITES};
use crate::linalg::lowest_eigenpairs;

/// Relative spacing below which two levels count as degenerate.
const DEGENERACY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralGap {
    /// Lowest levels in ascending order, repeated by multiplicity.
    pub levels: Vec<f64>,
    /// `E1 - E0`.
    pub gap: f64,
    /// Number of returned levels degenerate with the ground state.
    pub ground_multiplicity: usize,
    /// Number of returned levels degenerate with `E1`.
    pub excited_multiplicity: usize,
}

impl SpectralGap {
    /// `E_m - E_{m-1}`: the gap above a low-energy manifold of `m` levels.
    /// `gap_above(1)` equals [`SpectralGap::gap`].
    pub fn gap_above(&self, manifold: usize) -> Option<f64> {
        (manifold >= 1 && manifold < self.levels.len()).then(|| self.levels[manifold] - self.levels[manifold - 1])
    }
}

/// Two lowest eigenvalues with degeneracy information. `levels` extra
/// levels beyond the second are returned for manifold gaps; at least two
/// are always computed.
pub fn spectral_gap(h: &RydbergHamiltonian, levels: usize) -> Result<SpectralGap> {
    if h.sites() > MAX_SITES {
        return Err(Error::Capacity(format!("{} sites exceeds the diagonalisation limit", h.sites())));
    }
    let count = levels.max(2).min(h.dim());
    if count < 2 {
        return Err(Error::InvalidInput("operator has a single level".into()));
    }
    let scale = h.norm_bound().max(1.0);
    let pairs = lowest_eigenpairs(h, count, 1e-10 * scale)?;
    let levels: Vec<f64> = pairs.into_iter().map(|(e, _)| e).collect();
    let tol = DEGENERACY_TOL * scale;
    let ground_multiplicity = levels.iter().take_while(|&&e| e - levels[0] <= tol).count();
    let excited_multiplicity = levels.iter().filter(|&&e| (e - levels[1]).abs() <= tol).count();
    Ok(SpectralGap { gap: levels[1] - levels[0], levels, ground_multiplicity, excited_multiplicity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_hamiltonian, DriveFields};
    use crate::lattice::{interaction_matrix, ring_positions, InteractionMatrix, Truncation, C6_DEFAULT};

    #[test]
    fn two_level_gap_is_rabi_frequency() {
        let h = build_hamiltonian(&InteractionMatrix::zeros(1), &DriveFields::uniform(1, 4.5, 0.0, 0.0)).unwrap();
        let g = spectral_gap(&h, 2).unwrap();
        assert!((g.gap - 4.5).abs() < 1e-12);
        assert_eq!(g.ground_multiplicity, 1);
    }

    #[test]
    fn odd_ring_first_excitation_is_doubly_degenerate() {
        let u = interaction_matrix(&ring_positions(9, 6.0).unwrap(), C6_DEFAULT, Truncation::Full).unwrap();
        let h = build_hamiltonian(&u, &DriveFields::uniform(9, 5.0, 20.0, 0.0)).unwrap();
        let g = spectral_gap(&h, 4).unwrap();
        assert_eq!(g.ground_multiplicity, 1);
        assert_eq!(g.excited_multiplicity, 2);
        assert!(g.gap > 0.0);
    }

    #[test]
    fn degenerate_classical_manifold() {
        let u = interaction_matrix(&ring_positions(5, 6.0).unwrap(), C6_DEFAULT, Truncation::Nearest).unwrap();
        let h = build_hamiltonian(&u, &DriveFields::uniform(5, 0.0, 10.0, 0.0)).unwrap();
        let g = spectral_gap(&h, 6).unwrap();
        assert_eq!(g.ground_multiplicity, 5);
        assert_eq!(g.gap, 0.0);
    }
}
