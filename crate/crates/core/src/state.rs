//! Pure and mixed states over `L` two-level atoms in the computational
//! basis (site 0 is the least significant bit of the index).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure { sites: usize, amplitudes: DVector<C64> },
    Density { sites: usize, matrix: DMatrix<C64> },
}

impl QuantumState {
    /// Validated pure state.
    pub fn pure(sites: usize, amplitudes: DVector<C64>) -> Result<Self> {
        let s = QuantumState::Pure { sites, amplitudes };
        s.validate()?;
        Ok(s)
    }

    /// Validated density matrix.
    pub fn density(sites: usize, matrix: DMatrix<C64>) -> Result<Self> {
        let s = QuantumState::Density { sites, matrix };
        s.validate()?;
        Ok(s)
    }

    /// Product state with every atom in `g`.
    pub fn all_ground(sites: usize) -> Result<Self> {
        QuantumState::basis(sites, 0)
    }

    pub fn basis(sites: usize, index: usize) -> Result<Self> {
        if sites > crate::hamiltonian::MAX_SITES {
            return Err(Error::Capacity(format!("{sites} sites exceeds the dense limit")));
        }
        let mut a = DVector::from_element(1 << sites, C64::new(0.0, 0.0));
        if index >= a.len() {
            return Err(Error::InvalidInput(format!("basis index {index} out of range")));
        }
        a[index] = C64::new(1.0, 0.0);
        Ok(QuantumState::Pure { sites, amplitudes: a })
    }

    pub fn sites(&self) -> usize {
        match self {
            QuantumState::Pure { sites, .. } | QuantumState::Density { sites, .. } => *sites,
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.sites()
    }

    pub fn amplitudes(&self) -> Option<&DVector<C64>> {
        match self {
            QuantumState::Pure { amplitudes, .. } => Some(amplitudes),
            QuantumState::Density { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = 1usize << self.sites();
        match self {
            QuantumState::Pure { amplitudes, .. } => {
                if amplitudes.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: amplitudes.len() });
                }
                let n = amplitudes.norm();
                if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
                    return Err(Error::InvalidState(format!("norm {n} differs from 1")));
                }
            }
            QuantumState::Density { matrix, .. } => {
                if matrix.nrows() != dim || matrix.ncols() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, found: matrix.nrows() });
                }
                let herm = (matrix - matrix.adjoint()).norm();
                if !herm.is_finite() || herm > NORM_TOL {
                    return Err(Error::InvalidState(format!("density matrix is not Hermitian (deviation {herm:e})")));
                }
                let tr = matrix.trace();
                if (tr.re - 1.0).abs() > NORM_TOL || tr.im.abs() > NORM_TOL {
                    return Err(Error::InvalidState(format!("trace {tr} differs from 1")));
                }
                let low = min_eigenvalue(matrix);
                if low < -NORM_TOL {
                    return Err(Error::InvalidState(format!("negative eigenvalue {low:e}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_density(&self) -> DMatrix<C64> {
        match self {
            QuantumState::Pure { amplitudes, .. } => amplitudes * amplitudes.adjoint(),
            QuantumState::Density { matrix, .. } => matrix.clone(),
        }
    }

    pub fn into_density(self) -> QuantumState {
        match self {
            QuantumState::Pure { sites, .. } => QuantumState::Density { sites, matrix: self.to_density() },
            d => d,
        }
    }

    /// Born probabilities in the computational basis.
    pub fn probabilities(&self) -> Vec<f64> {
        match self {
            QuantumState::Pure { amplitudes, .. } => amplitudes.iter().map(|a| a.norm_sqr()).collect(),
            QuantumState::Density { matrix, .. } => (0..matrix.nrows()).map(|i| matrix[(i, i)].re.max(0.0)).collect(),
        }
    }

    /// `⟨φ|ρ|φ⟩` for a pure reference `φ`.
    pub fn overlap_with_pure(&self, phi: &DVector<C64>) -> Result<f64> {
        match self {
            QuantumState::Pure { amplitudes, .. } => {
                if amplitudes.len() != phi.len() {
                    return Err(Error::DimensionMismatch { expected: phi.len(), found: amplitudes.len() });
                }
                Ok(phi.dotc(amplitudes).norm_sqr())
            }
            QuantumState::Density { matrix, .. } => {
                if matrix.nrows() != phi.len() {
                    return Err(Error::DimensionMismatch { expected: phi.len(), found: matrix.nrows() });
                }
                Ok(phi.dotc(&(matrix * phi)).re)
            }
        }
    }

    /// Trace (density) or squared norm (pure).
    pub fn weight(&self) -> f64 {
        match self {
            QuantumState::Pure { amplitudes, .. } => amplitudes.norm_squared(),
            QuantumState::Density { matrix, .. } => matrix.trace().re,
        }
    }

    /// Plain-text export. Pure states list `index re im` per amplitude,
    /// density matrices `row col re im` per non-zero entry.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            QuantumState::Pure { sites, amplitudes } => {
                let _ = writeln!(out, "# pure sites={sites}");
                for (i, a) in amplitudes.iter().enumerate() {
                    let _ = writeln!(out, "{i} {:.17e} {:.17e}", a.re, a.im);
                }
            }
            QuantumState::Density { sites, matrix } => {
                let _ = writeln!(out, "# density sites={sites}");
                for i in 0..matrix.nrows() {
                    for j in 0..matrix.ncols() {
                        let a = matrix[(i, j)];
                        if a.re != 0.0 || a.im != 0.0 {
                            let _ = writeln!(out, "{i} {j} {:.17e} {:.17e}", a.re, a.im);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, message: "empty state file".into() })?;
        let mut parts = header.trim_start_matches('#').split_whitespace();
        let kind = parts.next().unwrap_or_default().to_string();
        let sites: usize = parts
            .next()
            .and_then(|p| p.strip_prefix("sites="))
            .and_then(|v| v.parse().ok())
            .ok_or(Error::Parse { line: 1, message: "header must read '# <pure|density> sites=<L>'".into() })?;
        if sites > crate::hamiltonian::MAX_SITES {
            return Err(Error::Capacity(format!("{sites} sites exceeds the dense limit")));
        }
        let dim = 1usize << sites;
        let parse = |ln: usize, tok: Option<&str>| -> Result<f64> {
            tok.and_then(|t| t.parse().ok()).ok_or(Error::Parse { line: ln + 1, message: "malformed number".into() })
        };
        let parse_idx = |ln: usize, tok: Option<&str>| -> Result<usize> {
            tok.and_then(|t| t.parse().ok())
                .filter(|&i: &usize| i < dim)
                .ok_or(Error::Parse { line: ln + 1, message: "index out of range".into() })
        };
        match kind.as_str() {
            "pure" => {
                let mut a = DVector::from_element(dim, C64::new(0.0, 0.0));
                for (ln, l) in lines {
                    let mut t = l.split_whitespace();
                    let i = parse_idx(ln, t.next())?;
                    a[i] = C64::new(parse(ln, t.next())?, parse(ln, t.next())?);
                }
                QuantumState::pure(sites, a)
            }
            "density" => {
                let mut m = DMatrix::from_element(dim, dim, C64::new(0.0, 0.0));
                for (ln, l) in lines {
                    let mut t = l.split_whitespace();
                    let i = parse_idx(ln, t.next())?;
                    let j = parse_idx(ln, t.next())?;
                    m[(i, j)] = C64::new(parse(ln, t.next())?, parse(ln, t.next())?);
                }
                QuantumState::density(sites, m)
            }
            other => Err(Error::Parse { line: 1, message: format!("unknown state kind '{other}'") }),
        }
    }
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &DMatrix<C64>) -> f64 {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unnormalised() {
        let a = DVector::from_vec(vec![C64::new(1.0, 0.0), C64::new(1.0, 0.0)]);
        assert!(QuantumState::pure(1, a).is_err());
    }

    #[test]
    fn rejects_negative_density() {
        let m = DMatrix::from_row_slice(2, 2, &[C64::new(1.2, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(-0.2, 0.0)]);
        assert!(matches!(QuantumState::density(1, m), Err(Error::InvalidState(_))));
    }

    #[test]
    fn text_round_trip() {
        let a = DVector::from_vec(vec![
            C64::new(0.5, 0.0),
            C64::new(0.0, 0.5),
            C64::new(-0.5, 0.0),
            C64::new(0.3, (0.25f64 - 0.09).sqrt()),
        ]);
        let s = QuantumState::pure(2, a).unwrap();
        assert_eq!(QuantumState::from_text(&s.to_text()).unwrap(), s);
        let d = s.clone().into_density();
        let back = QuantumState::from_text(&d.to_text()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overlap_matches_between_kinds() {
        let s = QuantumState::basis(2, 3).unwrap();
        let phi = DVector::from_vec(vec![C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.6, 0.0), C64::new(0.0, 0.8)]);
        let p = s.overlap_with_pure(&phi).unwrap();
        let d = s.into_density().overlap_with_pure(&phi).unwrap();
        assert!((p - 0.64).abs() < 1e-12 && (d - 0.64).abs() < 1e-12);
    }
}
