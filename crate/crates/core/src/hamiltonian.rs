//! The Rydberg Hamiltonian in the computational basis,
//!
//! ```text
//! H = Σ_{i<j} U_ij n_i n_j + Σ_i [ (Ω_i/2)(e^{iφ}|g⟩⟨r|_i + h.c.) − Δ_i n_i ]
//! ```
//!
//! stored matrix-free as a real diagonal plus one complex hopping amplitude
//! per site. In the spin picture `n = (1 + σz)/2` and `|g⟩⟨r| = σ⁻`, so the
//! drive equals `(Ω/2)(cos φ σx + sin φ σy)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::InteractionMatrix;
use crate::state::C64;

/// Largest ring handled with full state vectors and dense operators.
pub const MAX_SITES: usize = 13;

/// Per-site control values at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveFields {
    pub omega: Vec<f64>,
    pub delta: Vec<f64>,
    pub phi: f64,
}

impl DriveFields {
    pub fn uniform(sites: usize, omega: f64, delta: f64, phi: f64) -> Self {
        DriveFields { omega: vec![omega; sites], delta: vec![delta; sites], phi }
    }
}

/// Diagonal interaction energies for every basis state, computed once per
/// geometry and reused for each instantaneous Hamiltonian.
#[derive(Clone, Debug)]
pub struct InteractionDiagonal {
    sites: usize,
    energies: Vec<f64>,
}

impl InteractionDiagonal {
    pub fn new(u: &InteractionMatrix) -> Result<Self> {
        let sites = u.sites();
        check_capacity(sites)?;
        let u = &u.0;
        if (u - u.transpose()).amax() > 1e-9 * u.amax().max(1.0) {
            return Err(Error::InvalidInput("interaction matrix is not symmetric".into()));
        }
        let dim = 1usize << sites;
        let mut energies = vec![0.0; dim];
        // energy(i) = energy(i without its top bit) + couplings of the top bit
        for i in 1..dim {
            let top = usize::BITS as usize - 1 - i.leading_zeros() as usize;
            let rest = i ^ (1 << top);
            let mut e = energies[rest];
            let mut r = rest;
            while r != 0 {
                let j = r.trailing_zeros() as usize;
                e += u[(top, j)];
                r &= r - 1;
            }
            energies[i] = e;
        }
        Ok(InteractionDiagonal { sites, energies })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    /// Operator for a weighted sum of instantaneous fields,
    /// `Σ_k w_k H(fields_k)`. A single entry with weight 1 is the plain
    /// Hamiltonian; two entries give the commutator-free Magnus exponents.
    pub fn combination(&self, terms: &[(f64, &DriveFields)]) -> Result<RydbergHamiltonian> {
        let sites = self.sites;
        let mut delta = vec![0.0; sites];
        let mut hop = vec![C64::new(0.0, 0.0); sites];
        let mut scale = 0.0;
        for &(w, f) in terms {
            if f.omega.len() != sites || f.delta.len() != sites {
                return Err(Error::DimensionMismatch { expected: sites, found: f.omega.len().min(f.delta.len()) });
            }
            if f.omega.iter().any(|&o| o < 0.0) {
                return Err(Error::InvalidInput("Rabi amplitude must be non-negative".into()));
            }
            scale += w;
            let phase = C64::from_polar(1.0, f.phi);
            for s in 0..sites {
                delta[s] += w * f.delta[s];
                hop[s] += phase * (w * 0.5 * f.omega[s]);
            }
        }
        let uniform = delta.iter().all(|&d| d == delta[0]);
        let diag: Vec<f64> = self
            .energies
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let detuning = if uniform {
                    delta[0] * i.count_ones() as f64
                } else {
                    let mut r = i;
                    let mut d = 0.0;
                    while r != 0 {
                        d += delta[r.trailing_zeros() as usize];
                        r &= r - 1;
                    }
                    d
                };
                scale * e - detuning
            })
            .collect();
        Ok(RydbergHamiltonian { sites, diag, hop })
    }
}

fn check_capacity(sites: usize) -> Result<()> {
    if sites == 0 {
        return Err(Error::InvalidInput("need at least one site".into()));
    }
    if sites > MAX_SITES {
        return Err(Error::Capacity(format!("{sites} sites exceeds the limit of {MAX_SITES}")));
    }
    Ok(())
}

/// Hermitian operator `diag + Σ_s (hop_s |g⟩⟨r|_s + h.c.)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RydbergHamiltonian {
    sites: usize,
    diag: Vec<f64>,
    /// `⟨g|H|r⟩` on each site.
    hop: Vec<C64>,
}

/// Builds the instantaneous Hamiltonian from pair couplings and controls.
pub fn build_hamiltonian(u: &InteractionMatrix, fields: &DriveFields) -> Result<RydbergHamiltonian> {
    if fields.omega.len() != u.sites() || fields.delta.len() != u.sites() {
        return Err(Error::DimensionMismatch { expected: u.sites(), found: fields.omega.len() });
    }
    InteractionDiagonal::new(u)?.combination(&[(1.0, fields)])
}

/// Anything that can multiply a vector by a Hermitian matrix.
pub trait HermitianOp: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[C64], y: &mut [C64]);
}

impl RydbergHamiltonian {
    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn hopping(&self) -> &[C64] {
        &self.hop
    }

    pub fn is_diagonal(&self) -> bool {
        self.hop.iter().all(|h| h.norm_sqr() == 0.0)
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let dim = self.dim();
        let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
        for i in 0..dim {
            m[(i, i)] = C64::new(self.diag[i], 0.0);
            for (s, h) in self.hop.iter().enumerate() {
                let j = i ^ (1 << s);
                m[(i, j)] = if i & (1 << s) == 0 { *h } else { h.conj() };
            }
        }
        m
    }

    /// Largest absolute row sum, an upper bound on the spectral radius.
    pub fn norm_bound(&self) -> f64 {
        let hop: f64 = self.hop.iter().map(|h| h.norm()).sum();
        self.diag.iter().map(|d| d.abs()).fold(0.0, f64::max) + hop
    }
}

impl HermitianOp for RydbergHamiltonian {
    fn dim(&self) -> usize {
        1 << self.sites
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        for ((out, xi), d) in y.iter_mut().zip(x).zip(&self.diag) {
            *out = xi * d;
        }
        for (s, &h) in self.hop.iter().enumerate() {
            if h.norm_sqr() == 0.0 {
                continue;
            }
            let hc = h.conj();
            let bit = 1 << s;
            // blocks of 2·bit entries: the lower half has site s in g
            for (yb, xb) in y.chunks_exact_mut(2 * bit).zip(x.chunks_exact(2 * bit)) {
                let (yg, yr) = yb.split_at_mut(bit);
                let (xg, xr) = xb.split_at(bit);
                for k in 0..bit {
                    yg[k] += h * xr[k];
                    yr[k] += hc * xg[k];
                }
            }
        }
    }
}

impl HermitianOp for DMatrix<C64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        for (i, out) in y.iter_mut().enumerate() {
            *out = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }
}
