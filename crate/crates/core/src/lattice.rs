//! Ring geometries, thermal position noise and van der Waals couplings.
//!
//! Lengths are in µm and angular frequencies in rad/µs throughout.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Rydberg C6 coefficient in rad·µs⁻¹·µm⁶.
pub const C6_DEFAULT: f64 = 5.42e6;

/// Atom positions for a ring of `L` sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingGeometry {
    pub sites: usize,
    pub spacing: f64,
    pub positions: Vec<[f64; 2]>,
    pub perturbed: bool,
    pub seed: Option<u64>,
}

/// Places `sites` atoms evenly on a circle so that neighbouring atoms are
/// `spacing` apart. Atom 0 sits at angle 0 and the order is counter-clockwise.
pub fn ring_positions(sites: usize, spacing: f64) -> Result<RingGeometry> {
    if sites < 3 {
        return Err(Error::InvalidGeometry(format!("a ring needs at least 3 atoms, got {sites}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidGeometry(format!("lattice spacing must be positive, got {spacing}")));
    }
    let radius = ring_radius(sites, spacing);
    let positions = (0..sites)
        .map(|k| {
            let theta = 2.0 * PI * k as f64 / sites as f64;
            [radius * theta.cos(), radius * theta.sin()]
        })
        .collect();
    Ok(RingGeometry { sites, spacing, positions, perturbed: false, seed: None })
}

/// Circumradius of a regular polygon with `sites` vertices and edge `spacing`.
pub fn ring_radius(sites: usize, spacing: f64) -> f64 {
    spacing / (2.0 * (PI / sites as f64).sin())
}

/// Displaces every coordinate by an independent Gaussian draw.
pub fn perturb_positions(geometry: &RingGeometry, sigma_x: f64, sigma_y: f64, seed: u64) -> Result<RingGeometry> {
    if !(sigma_x >= 0.0 && sigma_y >= 0.0) {
        return Err(Error::InvalidInput(format!("position noise must be non-negative, got ({sigma_x}, {sigma_y})")));
    }
    let mut rng = rng_from_seed(seed);
    let nx = Normal::new(0.0, sigma_x).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let ny = Normal::new(0.0, sigma_y).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let positions = geometry
        .positions
        .iter()
        .map(|&[x, y]| {
            let dx = nx.sample(&mut rng);
            let dy = ny.sample(&mut rng);
            [x + dx, y + dy]
        })
        .collect();
    Ok(RingGeometry { positions, perturbed: true, seed: Some(seed), ..geometry.clone() })
}

impl RingGeometry {
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let [xi, yi] = self.positions[i];
        let [xj, yj] = self.positions[j];
        (xi - xj).hypot(yi - yj)
    }

    /// Copy rotated by `angle` radians about the origin.
    pub fn rotated(&self, angle: f64) -> RingGeometry {
        let (s, c) = angle.sin_cos();
        let positions = self.positions.iter().map(|&[x, y]| [c * x - s * y, s * x + c * y]).collect();
        RingGeometry { positions, ..self.clone() }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> RingGeometry {
        let positions = self.positions.iter().map(|&[x, y]| [x + dx, y + dy]).collect();
        RingGeometry { positions, ..self.clone() }
    }

    /// Bounding box as `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.positions.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(x0, y0, x1, y1), &[x, y]| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }

    /// Ring index distance between sites, accounting for the wrap.
    pub fn ring_separation(&self, i: usize, j: usize) -> usize {
        let d = i.abs_diff(j);
        d.min(self.sites - d)
    }
}

/// Which pairs keep their van der Waals coupling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    #[default]
    Full,
    Nearest,
    NextNearest,
}

impl Truncation {
    fn keeps(self, ring_separation: usize) -> bool {
        match self {
            Truncation::Full => true,
            Truncation::Nearest => ring_separation == 1,
            Truncation::NextNearest => ring_separation <= 2,
        }
    }
}

impl std::str::FromStr for Truncation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Truncation::Full),
            "nearest" => Ok(Truncation::Nearest),
            "next-nearest" => Ok(Truncation::NextNearest),
            other => Err(Error::InvalidInput(format!("unknown truncation '{other}'"))),
        }
    }
}

/// Symmetric matrix of pair couplings `U_ij = C6 / r_ij^6` in rad/µs.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix(pub DMatrix<f64>);

impl InteractionMatrix {
    pub fn sites(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Couplings for `sites` atoms that do not interact at all.
    pub fn zeros(sites: usize) -> Self {
        InteractionMatrix(DMatrix::zeros(sites, sites))
    }
}

pub fn interaction_matrix(geometry: &RingGeometry, c6: f64, truncation: Truncation) -> Result<InteractionMatrix> {
    let n = geometry.positions.len();
    if n != geometry.sites {
        return Err(Error::DimensionMismatch { expected: geometry.sites, found: n });
    }
    let mut u = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = geometry.distance(i, j);
            if r < 1e-12 {
                return Err(Error::SingularDistance(i, j));
            }
            if truncation.keeps(geometry.ring_separation(i, j)) {
                let v = c6 / r.powi(6);
                u[(i, j)] = v;
                u[(j, i)] = v;
            }
        }
    }
    Ok(InteractionMatrix(u))
}
