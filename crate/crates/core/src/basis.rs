//! Bit strings over `{g, r}` and the antiferromagnetic kink basis of an
//! odd ring.
//!
//! Site `i` of a string is bit `i` of the basis index (site 0 is the least
//! significant bit, and also the leftmost character of the text form).
//! `g` maps to bit 0 and spin down, `r` to bit 1 and spin up.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::state::{QuantumState, C64};

/// Longest string representable in a [`BitString`].
pub const MAX_STRING_SITES: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitString {
    bits: u64,
    len: usize,
}

impl BitString {
    pub fn from_index(index: usize, len: usize) -> Result<Self> {
        if len == 0 || len > MAX_STRING_SITES {
            return Err(Error::InvalidInput(format!("bit string length {len} out of range")));
        }
        if len < 64 && (index as u64) >> len != 0 {
            return Err(Error::InvalidInput(format!("index {index} does not fit in {len} sites")));
        }
        Ok(BitString { bits: index as u64, len })
    }

    pub fn ground(len: usize) -> Result<Self> {
        BitString::from_index(0, len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self) -> usize {
        self.bits as usize
    }

    pub fn is_rydberg(&self, site: usize) -> bool {
        (self.bits >> site) & 1 == 1
    }

    pub fn rydberg_count(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn flipped(&self, site: usize) -> BitString {
        BitString { bits: self.bits ^ (1 << site), len: self.len }
    }

    /// Pairs of ring neighbours `(i, i+1 mod L)` holding equal characters.
    pub fn equal_neighbour_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len)
            .map(|i| (i, (i + 1) % self.len))
            .filter(|&(i, j)| self.is_rydberg(i) == self.is_rydberg(j))
            .collect()
    }

    /// True when no two ring neighbours are both Rydberg.
    pub fn is_blockade_allowed(&self) -> bool {
        (0..self.len).all(|i| !(self.is_rydberg(i) && self.is_rydberg((i + 1) % self.len)))
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.is_rydberg(i) { "r" } else { "g" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({self})")
    }
}

impl FromStr for BitString {
    type Err = Error;

    /// Accepts `g`/`r` and the aliases `0`/`1`.
    fn from_str(s: &str) -> Result<Self> {
        let len = s.chars().count();
        if len == 0 || len > MAX_STRING_SITES {
            return Err(Error::InvalidInput(format!("bit string length {len} out of range")));
        }
        let mut bits = 0u64;
        for (i, c) in s.chars().enumerate() {
            match c {
                'g' | '0' => {}
                'r' | '1' => bits |= 1 << i,
                other => return Err(Error::InvalidInput(format!("invalid character '{other}' in bit string '{s}'"))),
            }
        }
        Ok(BitString { bits, len })
    }
}

fn require_odd(sites: usize) -> Result<()> {
    if sites % 2 == 0 {
        return Err(Error::Parity(sites));
    }
    if sites < 3 {
        return Err(Error::InvalidInput(format!("kink states need at least 3 sites, got {sites}")));
    }
    Ok(())
}

/// Néel string with a single g-g defect, `k` in `1..=L`.
///
/// Kink `k` carries its Rydberg excitations on positions `k, k+2, …,
/// k + L - 3` (zero-based, cyclic), so the g-g pair sits on the two
/// positions just before `k`. For `L = 3`, kink 3 is `rgg`.
pub fn kink_string(sites: usize, k: usize) -> Result<BitString> {
    require_odd(sites)?;
    if k == 0 || k > sites {
        return Err(Error::InvalidInput(format!("kink index {k} outside 1..={sites}")));
    }
    let bits = (0..(sites - 1) / 2).fold(0u64, |acc, m| acc | 1 << ((k + 2 * m) % sites));
    Ok(BitString { bits, len: sites })
}

/// All `L` kink strings ordered by kink index.
pub fn kink_strings(sites: usize) -> Result<Vec<BitString>> {
    (1..=sites).map(|k| kink_string(sites, k)).collect()
}

/// Equal-weight superposition of the `L` kink strings.
pub fn kink_superposition(sites: usize) -> Result<QuantumState> {
    require_odd(sites)?;
    if sites > crate::hamiltonian::MAX_SITES {
        return Err(Error::Capacity(format!("{sites} sites exceeds the dense limit")));
    }
    let mut amps = DVector::from_element(1 << sites, C64::new(0.0, 0.0));
    let w = 1.0 / (sites as f64).sqrt();
    for s in kink_strings(sites)? {
        amps[s.index()] = C64::new(w, 0.0);
    }
    QuantumState::pure(sites, amps)
}
