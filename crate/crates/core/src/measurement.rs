//! Bit-string data: projective sampling, the readout-noise model and its
//! inversion, post-selection on the loading image, the Rabi calibration fit
//! and bootstrap error bars.
//!
//! # Shot file format
//!
//! ```text
//! # L=5 experiment=prep-z seed=7 omega=11.46 delta=29
//! shot_id,basis,pre,post
//! 0,z,ggggg,rgrgg
//! 1,z,ggggg,grgrg
//! ```
//!
//! The first line is a header of space-separated `key=value` tokens; `L`
//! and `experiment` are required, `seed` is optional (`none` or an integer)
//! and every other token is echoed as a parameter, in file order. The
//! column line is optional on input and always written. Each record holds a
//! non-negative integer id, the basis tag `z` or `x`, and the loading image
//! `pre` and readout `post` over `{g, r}` (`{0, 1}` accepted on input).
//! Lines are `\n`-terminated; blank lines and further `#` lines are ignored.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BitString;
use crate::dynamics::rotate_to_x_basis;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::state::QuantumState;

/// Largest ring for which distributions over all `2^L` strings are held
/// densely.
pub const MAX_DISTRIBUTION_SITES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    Z,
    X,
}

impl std::fmt::Display for Basis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Basis::Z => "z",
            Basis::X => "x",
        })
    }
}

impl FromStr for Basis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z" | "Z" => Ok(Basis::Z),
            "x" | "X" => Ok(Basis::X),
            other => Err(Error::InvalidInput(format!("unknown basis tag '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shot {
    pub id: u64,
    /// Loading image before the sequence; `g` marks an occupied site.
    pub pre: BitString,
    pub post: BitString,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotSet {
    pub sites: usize,
    pub basis: Basis,
    pub experiment: String,
    /// Echoed `key=value` parameters in file order.
    pub params: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub shots: Vec<Shot>,
}

impl ShotSet {
    pub fn new(sites: usize, basis: Basis, experiment: impl Into<String>) -> Self {
        ShotSet { sites, basis, experiment: experiment.into(), params: Vec::new(), seed: None, shots: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.push((key.to_string(), value.to_string()));
        self
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Empirical distribution of `post` over all `2^L` strings.
    pub fn frequencies(&self) -> Result<Vec<f64>> {
        check_distribution_capacity(self.sites)?;
        if self.shots.is_empty() {
            return Err(Error::InvalidInput("no shots".into()));
        }
        let mut f = vec![0.0; 1 << self.sites];
        for s in &self.shots {
            f[s.post.index()] += 1.0;
        }
        let n = self.shots.len() as f64;
        f.iter_mut().for_each(|x| *x /= n);
        Ok(f)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        write!(out, "# L={} experiment={}", self.sites, self.experiment).unwrap();
        match self.seed {
            Some(s) => write!(out, " seed={s}").unwrap(),
            None => out.push_str(" seed=none"),
        }
        for (k, v) in &self.params {
            if k.is_empty() || v.is_empty() || k.contains(['=', ' ', '\n']) || v.contains([' ', '\n']) {
                return Err(Error::InvalidInput(format!("parameter '{k}={v}' cannot be written to a shot header")));
            }
            write!(out, " {k}={v}").unwrap();
        }
        out.push_str("\nshot_id,basis,pre,post\n");
        for s in &self.shots {
            writeln!(out, "{},{},{},{}", s.id, self.basis, s.pre, s.post).unwrap();
        }
        Ok(out)
    }

    /// Parses the shot format; malformed records are reported together,
    /// each with its 1-based line number.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::Parse { line: 1, message: "empty shot file".into() });
        };
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| Error::Parse { line: 1, message: "missing '# L=... experiment=...' header".into() })?;
        let mut sites = None;
        let mut experiment = None;
        let mut seed = None;
        let mut params = Vec::new();
        for tok in header.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: 1, message: format!("header token '{tok}' is not key=value") })?;
            match k {
                "L" => {
                    sites = Some(v.parse::<usize>().map_err(|_| Error::Parse { line: 1, message: format!("bad L '{v}'") })?)
                }
                "experiment" => experiment = Some(v.to_string()),
                "seed" if v == "none" => {}
                "seed" => {
                    seed = Some(v.parse::<u64>().map_err(|_| Error::Parse { line: 1, message: format!("bad seed '{v}'") })?)
                }
                _ => params.push((k.to_string(), v.to_string())),
            }
        }
        let sites = sites.ok_or_else(|| Error::Parse { line: 1, message: "header lacks L".into() })?;
        let experiment = experiment.ok_or_else(|| Error::Parse { line: 1, message: "header lacks experiment".into() })?;
        let mut basis: Option<Basis> = None;
        let mut shots = Vec::new();
        let mut problems = Vec::new();
        for (idx, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == "shot_id,basis,pre,post" {
                continue;
            }
            match parse_record(line, sites) {
                Ok((b, shot)) => {
                    if *basis.get_or_insert(b) != b {
                        problems.push(format!("line {}: basis {b} differs from the set's basis", idx + 1));
                    } else {
                        shots.push(shot);
                    }
                }
                Err(msg) => problems.push(format!("line {}: {msg}", idx + 1)),
            }
        }
        if !problems.is_empty() {
            let first = problems[0].split(':').next().unwrap_or("").trim_start_matches("line ").parse().unwrap_or(0);
            return Err(Error::Parse { line: first, message: problems.join("; ") });
        }
        let basis = basis.ok_or_else(|| Error::Parse { line: 1, message: "shot file has no records".into() })?;
        Ok(ShotSet { sites, basis, experiment, params, seed, shots })
    }
}

fn parse_record(line: &str, sites: usize) -> std::result::Result<(Basis, Shot), String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 fields, found {}", fields.len()));
    }
    let id = fields[0].parse::<u64>().map_err(|_| format!("bad shot id '{}'", fields[0]))?;
    let basis: Basis = fields[1].parse().map_err(|e: Error| e.to_string())?;
    let pre: BitString = fields[2].parse().map_err(|e: Error| format!("pre: {e}"))?;
    let post: BitString = fields[3].parse().map_err(|e: Error| format!("post: {e}"))?;
    if pre.len() != sites || post.len() != sites {
        return Err(format!("string length {} / {} differs from L = {sites}", pre.len(), post.len()));
    }
    Ok((basis, Shot { id, pre, post }))
}

fn check_distribution_capacity(sites: usize) -> Result<()> {
    if sites > MAX_DISTRIBUTION_SITES {
        return Err(Error::Capacity(format!("{sites} sites is too many for a dense distribution")));
    }
    Ok(())
}

/// Draws `n` indices from a probability vector with one uniform number per
/// draw.
fn draw_indices(probs: &[f64], n: usize, seed: u64) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in probs {
        acc += p.max(0.0);
        cdf.push(acc);
    }
    let total = acc;
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * total;
            cdf.partition_point(|&c| c <= u).min(probs.len() - 1)
        })
        .collect()
}

/// Born-rule sampling. For the `x` basis the state is first rotated by the
/// exact single-site basis change, so `g` reports `σx = +1`.
pub fn sample_bitstrings(state: &QuantumState, basis: Basis, n: usize, seed: u64) -> Result<ShotSet> {
    let rotated;
    let measured = match basis {
        Basis::Z => state,
        Basis::X => {
            rotated = rotate_to_x_basis(state);
            &rotated
        }
    };
    sample_measured(measured, basis, n, seed)
}

/// Samples a state in the computational basis and labels the shots with
/// `basis`; used when the rotation has already been simulated.
pub fn sample_measured(state: &QuantumState, basis: Basis, n: usize, seed: u64) -> Result<ShotSet> {
    if n == 0 {
        return Err(Error::InvalidInput("shot count must be at least 1".into()));
    }
    state.validate()?;
    let sites = state.sites();
    let ground = BitString::ground(sites)?;
    let shots = draw_indices(&state.probabilities(), n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| Ok(Shot { id: i as u64, pre: ground, post: BitString::from_index(idx, sites)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShotSet { sites, basis, experiment: String::from("simulated"), params: Vec::new(), seed: Some(seed), shots })
}

/// Samples strings directly from a distribution over `2^L` outcomes.
pub fn sample_distribution(probs: &[f64], sites: usize, basis: Basis, n: usize, seed: u64) -> Result<ShotSet> {
    if probs.len() != 1 << sites {
        return Err(Error::DimensionMismatch { expected: 1 << sites, found: probs.len() });
    }
    if n == 0 {
        return Err(Error::InvalidInput("shot count must be at least 1".into()));
    }
    let ground = BitString::ground(sites)?;
    let shots = draw_indices(probs, n, seed)
        .into_iter()
        .enumerate()
        .map(|(i, idx)| Ok(Shot { id: i as u64, pre: ground, post: BitString::from_index(idx, sites)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(ShotSet { sites, basis, experiment: String::from("simulated"), params: Vec::new(), seed: Some(seed), shots })
}

/// Marks each site of each loading image as empty (`r`) with probability
/// `p_empty`, independently.
pub fn apply_loading_defects(shots: &ShotSet, p_empty: f64, seed: u64) -> Result<ShotSet> {
    if !(0.0..=1.0).contains(&p_empty) {
        return Err(Error::InvalidInput(format!("loading defect probability {p_empty} outside [0, 1]")));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = shots.clone();
    for s in &mut out.shots {
        for site in 0..shots.sites {
            if rng.random::<f64>() < p_empty {
                s.pre = BitString::from_index(s.pre.index() | 1 << site, shots.sites)?;
            }
        }
    }
    Ok(out)
}

/// Independent per-site readout flips: `p_gr[s]` turns a true `g` into a
/// read `r` on site `s`, `p_rg[s]` the reverse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionModel {
    pub p_gr: Vec<f64>,
    pub p_rg: Vec<f64>,
}

impl ConfusionModel {
    pub fn uniform(sites: usize, p_gr: f64, p_rg: f64) -> Result<Self> {
        let m = ConfusionModel { p_gr: vec![p_gr; sites], p_rg: vec![p_rg; sites] };
        m.validate()?;
        Ok(m)
    }

    pub fn identity(sites: usize) -> Self {
        ConfusionModel { p_gr: vec![0.0; sites], p_rg: vec![0.0; sites] }
    }

    pub fn sites(&self) -> usize {
        self.p_gr.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_gr.len() != self.p_rg.len() {
            return Err(Error::DimensionMismatch { expected: self.p_gr.len(), found: self.p_rg.len() });
        }
        for p in self.p_gr.iter().chain(&self.p_rg) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidInput(format!("flip probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Column-stochastic map from true (column) to read (row) outcome,
    /// ordered `(g, r)`.
    pub fn site_matrix(&self, site: usize) -> Matrix2<f64> {
        let (a, b) = (self.p_gr[site], self.p_rg[site]);
        Matrix2::new(1.0 - a, b, a, 1.0 - b)
    }

    /// Forward model on a distribution over `2^L` strings.
    pub fn apply(&self, probs: &[f64]) -> Result<Vec<f64>> {
        let mats: Vec<Matrix2<f64>> = (0..self.sites()).map(|s| self.site_matrix(s)).collect();
        apply_site_maps(probs, &mats)
    }
}

/// Applies one 2×2 map per site to a vector indexed by bit strings.
fn apply_site_maps(v: &[f64], mats: &[Matrix2<f64>]) -> Result<Vec<f64>> {
    if v.len() != 1 << mats.len() {
        return Err(Error::DimensionMismatch { expected: 1 << mats.len(), found: v.len() });
    }
    let mut out = v.to_vec();
    for (s, m) in mats.iter().enumerate() {
        let bit = 1usize << s;
        for i in 0..out.len() {
            if i & bit == 0 {
                let x = m * Vector2::new(out[i], out[i | bit]);
                out[i] = x[0];
                out[i | bit] = x[1];
            }
        }
    }
    Ok(out)
}

/// Flips each `post` character independently with its directional
/// probability. Loading images are untouched.
pub fn apply_readout_noise(shots: &ShotSet, cm: &ConfusionModel, seed: u64) -> Result<ShotSet> {
    cm.validate()?;
    if cm.sites() != shots.sites {
        return Err(Error::DimensionMismatch { expected: shots.sites, found: cm.sites() });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = shots.clone();
    for s in &mut out.shots {
        let mut idx = s.post.index();
        for site in 0..shots.sites {
            let bit = 1usize << site;
            let p = if idx & bit == 0 { cm.p_gr[site] } else { cm.p_rg[site] };
            if rng.random::<f64>() < p {
                idx ^= bit;
            }
        }
        s.post = BitString::from_index(idx, shots.sites)?;
    }
    Ok(out)
}

/// How negative quasi-probabilities are removed after inversion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Negativity {
    /// Zero the negative entries and renormalise.
    #[default]
    Clip,
    /// Euclidean projection onto the probability simplex.
    Project,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mitigated {
    /// Raw inverse, sums to 1, may hold negative entries.
    pub quasi: Vec<f64>,
    pub probs: Vec<f64>,
    /// Total weight of the negative entries of `quasi`.
    pub clipped_mass: f64,
}

/// Inverts the tensor-product confusion matrix site by site.
pub fn mitigate_readout(freq: &[f64], cm: &ConfusionModel, mode: Negativity) -> Result<Mitigated> {
    cm.validate()?;
    let total: f64 = freq.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("frequencies sum to {total}, not 1")));
    }
    let mut inverses = Vec::with_capacity(cm.sites());
    for s in 0..cm.sites() {
        if (1.0 - cm.p_gr[s] - cm.p_rg[s]).abs() < 1e-12 {
            return Err(Error::SingularModel(s));
        }
        inverses.push(cm.site_matrix(s).try_inverse().ok_or(Error::SingularModel(s))?);
    }
    let quasi = apply_site_maps(freq, &inverses)?;
    let clipped_mass: f64 = quasi.iter().filter(|&&q| q < 0.0).map(|q| -q).sum();
    let probs = match mode {
        Negativity::Clip => {
            let kept: Vec<f64> = quasi.iter().map(|&q| q.max(0.0)).collect();
            let s: f64 = kept.iter().sum();
            kept.into_iter().map(|q| q / s).collect()
        }
        Negativity::Project => project_simplex(&quasi),
    };
    Ok(Mitigated { quasi, probs, clipped_mass })
}

/// Closest point of the probability simplex in Euclidean distance.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        acc += x;
        let t = (acc - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostSelection {
    pub shots: ShotSet,
    pub kept: usize,
    pub dropped: usize,
    /// Set when nothing survived.
    pub warning: Option<String>,
}

/// Keeps the shots whose loading image equals `required`.
pub fn postselect_shots(shots: &ShotSet, required: &BitString) -> Result<PostSelection> {
    if required.len() != shots.sites {
        return Err(Error::DimensionMismatch { expected: shots.sites, found: required.len() });
    }
    let mut out = shots.clone();
    out.shots.retain(|s| s.pre == *required);
    let kept = out.shots.len();
    let dropped = shots.shots.len() - kept;
    let warning = (kept == 0).then(|| format!("no shot of '{}' has the loading image {required}", shots.experiment));
    Ok(PostSelection { shots: out, kept, dropped, warning })
}

/// Resonance line of a π pulse at detuning `x` from resonance:
/// `Ω²/(Ω²+x²) · sin²(√(Ω²+x²) t/2)`.
pub fn resonance_probability(omega: f64, detuning: f64, t_pi: f64) -> f64 {
    let w2 = omega * omega + detuning * detuning;
    if w2 == 0.0 {
        return 0.0;
    }
    omega * omega / w2 * (0.5 * w2.sqrt() * t_pi).sin().powi(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub omega: f64,
    pub delta_offset: f64,
    /// Standard errors of `(omega, delta_offset)`.
    pub std_errors: [f64; 2],
    /// Root-mean-square residual.
    pub residual: f64,
    pub iterations: usize,
}

/// Model value and gradient with respect to `(Ω, offset)`.
fn resonance_with_gradient(omega: f64, offset: f64, delta: f64, t: f64) -> (f64, [f64; 2]) {
    let x = delta - offset;
    let w2 = omega * omega + x * x;
    let w = w2.sqrt();
    let s = (0.5 * w * t).sin();
    let ratio = omega * omega / w2;
    let p = ratio * s * s;
    let half_sin = 0.5 * t * (w * t).sin();
    let d_omega = 2.0 * omega * x * x / (w2 * w2) * s * s + ratio * half_sin * omega / w;
    let d_x = -2.0 * omega * omega * x / (w2 * w2) * s * s + ratio * half_sin * x / w;
    (p, [d_omega, -d_x])
}

/// Levenberg-Marquardt fit of the resonance line to `(Δ, P_e)` data. The
/// search starts at `Ω = π / t_π` and at the detuning of the largest
/// measured excitation.
pub fn calibration_fit(data: &[(f64, f64)], t_pi: f64) -> Result<CalibrationFit> {
    if data.len() < 5 {
        return Err(Error::Fit(format!("need at least 5 points, got {}", data.len())));
    }
    if !(t_pi > 0.0) {
        return Err(Error::Fit(format!("pulse length must be positive, got {t_pi}")));
    }
    let peak = data.iter().cloned().fold((f64::NAN, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let lo = data.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    let hi = data.iter().map(|d| d.0).fold(f64::NEG_INFINITY, f64::max);
    if !(lo < peak.0 && peak.0 < hi) {
        return Err(Error::Fit("data do not span the resonance".into()));
    }
    let rss = |p: [f64; 2]| -> f64 {
        data.iter().map(|&(d, y)| (resonance_probability(p[0], d - p[1], t_pi) - y).powi(2)).sum()
    };
    let mut p = [std::f64::consts::PI / t_pi, peak.0];
    let mut cost = rss(p);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < 500 {
        iterations += 1;
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for &(d, y) in data {
            let (m, g) = resonance_with_gradient(p[0], p[1], d, t_pi);
            let g = Vector2::new(g[0], g[1]);
            jtj += g * g.transpose();
            jtr += g * (m - y);
        }
        let mut improved = false;
        for _ in 0..30 {
            let damped = jtj + Matrix2::from_diagonal(&jtj.diagonal()) * lambda;
            let Some(inv) = damped.try_inverse() else {
                lambda *= 10.0;
                continue;
            };
            let step = -(inv * jtr);
            let trial = [p[0] + step[0], p[1] + step[1]];
            let c = rss(trial);
            if c <= cost {
                let small = step[0].abs() <= 1e-13 * p[0].abs().max(1.0) && step[1].abs() <= 1e-13 * p[1].abs().max(1.0);
                let flat = cost - c <= 1e-15 * cost.max(1e-300);
                p = trial;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                converged = small || flat || cost < 1e-28;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged {
            converged = true;
            break;
        }
    }
    if !converged || !p[0].is_finite() || !p[1].is_finite() {
        return Err(Error::Fit(format!("no convergence after {iterations} iterations (Ω = {}, offset = {}, rss = {cost:e})", p[0], p[1])));
    }
    let n = data.len() as f64;
    let sigma2 = cost / (n - 2.0);
    let mut jtj = Matrix2::zeros();
    for &(d, _) in data {
        let (_, g) = resonance_with_gradient(p[0], p[1], d, t_pi);
        let g = Vector2::new(g[0], g[1]);
        jtj += g * g.transpose();
    }
    let cov = jtj.try_inverse().map(|m| m * sigma2).unwrap_or_else(|| Matrix2::from_element(f64::NAN));
    Ok(CalibrationFit {
        omega: p[0].abs(),
        delta_offset: p[1],
        std_errors: [cov[(0, 0)].max(0.0).sqrt(), cov[(1, 1)].max(0.0).sqrt()],
        residual: (cost / n).sqrt(),
        iterations,
    })
}

/// Bootstrap mean and standard error of `statistic`. Resample `b` draws
/// its indices from the stream `derive_seed(seed, b)`.
pub fn bootstrap_stat<T, F>(samples: &[T], statistic: F, resamples: usize, seed: u64) -> Result<(f64, f64)>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    let (m, e) = bootstrap_many(samples, |d| vec![statistic(d)], resamples, seed)?;
    Ok((m[0], e[0]))
}

/// Component-wise bootstrap of a vector-valued statistic.
pub fn bootstrap_many<T, F>(samples: &[T], statistic: F, resamples: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> Vec<f64> + Sync,
{
    if samples.is_empty() {
        return Err(Error::InvalidInput("bootstrap needs at least one sample".into()));
    }
    if resamples < 100 {
        return Err(Error::InvalidInput(format!("bootstrap needs at least 100 resamples, got {resamples}")));
    }
    let n = samples.len();
    let values: Vec<Vec<f64>> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from_seed(derive_seed(seed, b as u64));
            let draw: Vec<T> = (0..n).map(|_| samples[rng.random_range(0..n)].clone()).collect();
            statistic(&draw)
        })
        .collect();
    let width = values[0].len();
    let r = resamples as f64;
    let mean: Vec<f64> = (0..width).map(|i| values.iter().map(|v| v[i]).sum::<f64>() / r).collect();
    let err = (0..width)
        .map(|i| (values.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / (r - 1.0)).sqrt())
        .collect();
    Ok((mean, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{kink_strings, kink_superposition};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn ground_state_samples() {
        let s = sample_bitstrings(&QuantumState::all_ground(3).unwrap(), Basis::Z, 50, 1).unwrap();
        assert!(s.shots.iter().all(|x| x.post.to_string() == "ggg"));
        assert!(sample_bitstrings(&QuantumState::all_ground(3).unwrap(), Basis::Z, 0, 1).is_err());
    }

    #[test]
    fn kink_frequencies() {
        let n = 10_000;
        let s = sample_bitstrings(&kink_superposition(5).unwrap(), Basis::Z, n, 2).unwrap();
        let f = s.frequencies().unwrap();
        let sigma = (0.2 * 0.8 / n as f64).sqrt();
        for k in kink_strings(5).unwrap() {
            assert!((f[k.index()] - 0.2).abs() < 5.0 * sigma);
        }
        let again = sample_bitstrings(&kink_superposition(5).unwrap(), Basis::Z, n, 2).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn born_rule_total_variation() {
        for sites in [3usize, 5, 7] {
            let dim = 1 << sites;
            let amps = nalgebra::DVector::from_iterator(dim, (0..dim).map(|i| crate::state::C64::new(((i * 13) % 7) as f64 + 0.5, (i % 3) as f64)));
            let psi = QuantumState::pure(sites, amps.normalize()).unwrap();
            let n = 20_000;
            let f = sample_bitstrings(&psi, Basis::Z, n, 5).unwrap().frequencies().unwrap();
            let tv: f64 = 0.5 * f.iter().zip(psi.probabilities()).map(|(a, b)| (a - b).abs()).sum::<f64>();
            assert!(tv < 4.0 * (dim as f64 / n as f64).sqrt(), "L = {sites}: {tv}");
        }
    }

    #[test]
    fn readout_noise_limits() {
        let s = sample_bitstrings(&kink_superposition(5).unwrap(), Basis::Z, 200, 3).unwrap();
        assert_eq!(apply_readout_noise(&s, &ConfusionModel::identity(5), 1).unwrap(), s);
        let lose = ConfusionModel::uniform(5, 0.0, 1.0).unwrap();
        let flipped = apply_readout_noise(&s, &lose, 1).unwrap();
        assert!(flipped.shots.iter().all(|x| x.post.rydberg_count() == 0));
    }

    #[test]
    fn readout_flip_rates() {
        let sites = 4;
        let truth: BitString = "grgr".parse().unwrap();
        let n = 100_000;
        let mut set = ShotSet::new(sites, Basis::Z, "rates");
        set.shots = (0..n).map(|i| Shot { id: i, pre: BitString::ground(sites).unwrap(), post: truth }).collect();
        let cm = ConfusionModel::uniform(sites, 0.01, 0.08).unwrap();
        let noisy = apply_readout_noise(&set, &cm, 9).unwrap();
        let (mut gr, mut rg) = (0usize, 0usize);
        for s in &noisy.shots {
            gr += (!s.post.is_rydberg(0)) as usize ^ 1;
            gr += (!s.post.is_rydberg(2)) as usize ^ 1;
            rg += s.post.is_rydberg(1) as usize ^ 1;
            rg += s.post.is_rydberg(3) as usize ^ 1;
        }
        let trials = 2.0 * n as f64;
        for (count, p) in [(gr, 0.01), (rg, 0.08)] {
            let rate = count as f64 / trials;
            assert!((rate - p).abs() < 3.0 * (p * (1.0 - p) / trials).sqrt(), "{rate} vs {p}");
        }
    }

    #[test]
    fn mitigation_fixed_points() {
        let f = vec![0.1, 0.2, 0.3, 0.4];
        let m = mitigate_readout(&f, &ConfusionModel::identity(2), Negativity::Clip).unwrap();
        assert_eq!(m.probs, f);
        assert_eq!(m.clipped_mass, 0.0);
        let uniform = vec![0.125; 8];
        let sym = ConfusionModel::uniform(3, 0.05, 0.05).unwrap();
        let m = mitigate_readout(&uniform, &sym, Negativity::Clip).unwrap();
        assert!(m.probs.iter().all(|p| (p - 0.125).abs() < 1e-12));
        let singular = ConfusionModel::uniform(2, 0.4, 0.6).unwrap();
        assert!(matches!(mitigate_readout(&f, &singular, Negativity::Clip), Err(Error::SingularModel(0))));
    }

    #[test]
    fn forward_then_inverse_is_exact() {
        let cm = ConfusionModel { p_gr: vec![0.01, 0.02, 0.03], p_rg: vec![0.08, 0.05, 0.1] };
        let truth: Vec<f64> = (0..8).map(|i| (i + 1) as f64 / 36.0).collect();
        let seen = cm.apply(&truth).unwrap();
        assert!((seen.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let back = mitigate_readout(&seen, &cm, Negativity::Clip).unwrap();
        for (a, b) in back.quasi.iter().zip(&truth) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn negativity_handling_preserves_total() {
        let cm = ConfusionModel::uniform(3, 0.01, 0.08).unwrap();
        let mut f = vec![0.0; 8];
        f[0] = 0.7;
        f[5] = 0.3;
        for mode in [Negativity::Clip, Negativity::Project] {
            let m = mitigate_readout(&f, &cm, mode).unwrap();
            assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.probs.iter().all(|&p| p >= 0.0));
            assert!(m.clipped_mass > 0.0);
            assert!((m.quasi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn postselection_filters_only() {
        let s = sample_bitstrings(&kink_superposition(5).unwrap(), Basis::Z, 1000, 4).unwrap();
        let defective = apply_loading_defects(&s, 0.01, 8).unwrap();
        let ground = BitString::ground(5).unwrap();
        let sel = postselect_shots(&defective, &ground).unwrap();
        assert_eq!(sel.kept + sel.dropped, 1000);
        assert!(sel.dropped > 0);
        for kept in &sel.shots.shots {
            assert_eq!(kept, &s.shots[kept.id as usize]);
        }
        let all = postselect_shots(&s, &ground).unwrap();
        assert_eq!(all.shots, s);
        let none = postselect_shots(&s, &"rgggg".parse().unwrap()).unwrap();
        assert_eq!(none.kept, 0);
        assert!(none.warning.is_some());
    }

    #[test]
    fn shot_file_round_trip() {
        let mut s = sample_bitstrings(&kink_superposition(5).unwrap(), Basis::X, 20, 4).unwrap();
        s = apply_loading_defects(&s, 0.1, 2).unwrap().with_param("omega", 11.46).with_param("phase", "1.5708");
        s.experiment = "rot-1".into();
        let text = s.to_text().unwrap();
        assert!(text.starts_with("# L=5 experiment=rot-1 seed=4 omega=11.46 phase=1.5708\nshot_id,basis,pre,post\n0,x,"));
        assert_eq!(ShotSet::from_text(&text).unwrap(), s);
    }

    #[test]
    fn shot_file_errors() {
        assert!(ShotSet::from_text("").is_err());
        let bad = "# L=3 experiment=e\n0,z,ggg,rgg\n1,q,ggg,ggg\n2,z,gg,ggg\n";
        match ShotSet::from_text(bad) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("line 4"));
            }
            other => panic!("{other:?}"),
        }
        let digits = ShotSet::from_text("# L=3 experiment=e\n0,z,000,100\n").unwrap();
        assert_eq!(digits.shots[0].post.to_string(), "rgg");
        assert!(ShotSet::from_text("# experiment=e\n0,z,000,100\n").is_err());
        assert!(ShotSet::from_text("# L=3 experiment=e\n").is_err());
    }

    #[test]
    fn calibration_recovers_noiseless_rabi_frequency() {
        let omega = 11.46;
        let t_pi = std::f64::consts::PI / omega;
        let offset = 1.3;
        let data: Vec<(f64, f64)> = (-20..=20).map(|k| {
            let d = k as f64;
            (d, resonance_probability(omega, d - offset, t_pi))
        }).collect();
        let fit = calibration_fit(&data, t_pi).unwrap();
        assert!((fit.omega - omega).abs() < 1e-6, "{fit:?}");
        assert!((fit.delta_offset - offset).abs() < 1e-6);
        assert!((resonance_probability(omega, 0.0, t_pi) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn calibration_with_noise_within_three_errors() {
        let omega = 11.46;
        let t_pi = std::f64::consts::PI / omega;
        let noise = Normal::new(0.0, 0.02).unwrap();
        let mut rng = rng_from_seed(21);
        let data: Vec<(f64, f64)> = (-30..=30).map(|k| {
            let d = k as f64;
            (d, resonance_probability(omega, d, t_pi) + noise.sample(&mut rng))
        }).collect();
        let fit = calibration_fit(&data, t_pi).unwrap();
        assert!((fit.omega - omega).abs() < 3.0 * fit.std_errors[0], "{fit:?}");
    }

    #[test]
    fn calibration_preconditions() {
        assert!(calibration_fit(&[(0.0, 1.0); 4], 0.3).is_err());
        let one_sided: Vec<(f64, f64)> = (0..6).map(|k| (k as f64, 1.0 / (1.0 + k as f64))).collect();
        assert!(calibration_fit(&one_sided, 0.3).is_err());
    }

    #[test]
    fn bootstrap_examples() {
        let constant = vec![2.5; 40];
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        assert_eq!(bootstrap_stat(&constant, mean, 200, 1).unwrap(), (2.5, 0.0));
        let mut rng = rng_from_seed(3);
        let coin: Vec<f64> = (0..1000).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let (_, se) = bootstrap_stat(&coin, mean, 2000, 7).unwrap();
        assert!((se - 0.0158).abs() < 0.15 * 0.0158, "{se}");
        assert_eq!(bootstrap_stat(&coin, mean, 200, 9).unwrap(), bootstrap_stat(&coin, mean, 200, 9).unwrap());
        assert!(bootstrap_stat(&coin, mean, 99, 9).is_err());
        assert!(bootstrap_stat::<f64, _>(&[], mean, 200, 9).is_err());
    }
}
