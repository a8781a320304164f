//! One function per subcommand. Stages hand data to each other through
//! files only: configs, shot files, the ensemble file and report tables.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use wring::basis::kink_strings;
use wring::dynamics::{
    apply_rotation, evolve_closed, evolve_open, evolve_trajectories, ideal_rotation_unitary, preparation_fidelity,
    rotate_to_x_basis, trajectory_table,
};
use wring::inference::{
    build_prior_ensemble, estimate_fidelity, kl_table, log_likelihood_matrix, population_estimate, posterior_fidelity,
    posterior_weights, weighted_stats, Observation, PosteriorWeights, PriorEnsemble,
};
use wring::lattice::{interaction_matrix, ring_positions, Truncation, C6_DEFAULT};
use wring::measurement::{
    apply_loading_defects, apply_readout_noise, calibration_fit, resonance_probability, sample_measured, Basis, ShotSet,
};
use wring::observables::{kink_populations, px_expectation};
use wring::pulse::build_prep_schedule;
use wring::rng::derive_seed;
use wring::search::{
    fit_power_law, gap_scan, grape_optimize, min_time_for_infidelity, sweep_detuning, ControlBounds, GrapeOptions,
    PrepModel, SliceControls,
};
use wring::state::QuantumState;
use wring::{Error, Result};

use crate::config::{load_config, ExperimentConfig};
use crate::report::{emit_report, ingest_shot_file, read_text, sha256_hex, write_atomic, Cell, Format, Report, Table};

#[derive(Debug, Parser)]
#[command(name = "wring", version, about = "W-state preparation and fidelity inference on Rydberg rings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Output {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `table` (aligned text) or `delimited` (CSV).
    #[arg(long, default_value = "table")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the preparation sequence with the nominal parameters.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Detuning sweep at the configured t_F, or the minimal-time scan.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Run the shortest-time search over `search.sizes` instead.
        #[arg(long)]
        min_time: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Spectral gap against ring size.
    Gap {
        #[arg(long, value_delimiter = ',', default_value = "4,5,6,7,8,9,10,11,12,13")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 6.0)]
        spacing: f64,
        #[arg(long, default_value_t = 5.0)]
        omega: f64,
        #[arg(long, default_value_t = 20.0)]
        delta: f64,
        #[arg(long, default_value_t = C6_DEFAULT)]
        c6: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Optimise a rotation pulse against the ideal basis change.
    Grape {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Simulate one noisy experiment and write its shot files.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the shot files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a shot file and optionally post-select it.
    Ingest {
        #[arg(long)]
        file: PathBuf,
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        postselect: bool,
        /// Normalised shot file to write.
        #[arg(long)]
        write: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Two-basis fidelity estimate and kink populations.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        no_postselect: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Build the simulated prior ensemble.
    Prior {
        #[arg(long)]
        config: PathBuf,
        /// Ensemble file to write.
        #[arg(long)]
        ensemble: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Reweight the ensemble with rotation-experiment shot files.
    Posterior {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        shots: Vec<PathBuf>,
        /// KL regulariser; 0 selects 1/(10 N).
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long)]
        no_postselect: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Fit the resonance line to `delta,p_e` data.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// Pulse length, µs; defaults to π/Ω with the given nominal Ω.
        #[arg(long)]
        t_pi: Option<f64>,
        #[arg(long, default_value_t = 11.46)]
        omega: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Full data report: populations, fidelity estimate, KL and posterior.
    Report {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        /// Directory holding `z.shots`, `x.shots` and `rot*.shots`.
        #[arg(long)]
        shots: PathBuf,
        #[command(flatten)]
        output: Output,
    },
}

pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Prepare { config, output } => prepare(&config, &output),
        Command::Sweep { config, min_time, output } => sweep(&config, min_time, &output),
        Command::Gap { sizes, spacing, omega, delta, c6, output } => gap(&sizes, spacing, omega, delta, c6, &output),
        Command::Grape { config, output } => grape(&config, &output),
        Command::Sample { config, out } => sample(&config, &out),
        Command::Ingest { file, sites, postselect, write, output } => ingest(&file, sites, postselect, write.as_deref(), &output),
        Command::Estimate { config, z, x, no_postselect, output } => estimate(&config, &z, &x, !no_postselect, &output),
        Command::Prior { config, ensemble, output } => prior(&config, &ensemble, &output),
        Command::Posterior { ensemble, shots, epsilon, no_postselect, output } => {
            posterior(&ensemble, &shots, epsilon, !no_postselect, &output)
        }
        Command::Calibrate { data, t_pi, omega, output } => calibrate(&data, t_pi, omega, &output),
        Command::Report { config, ensemble, shots, output } => full_report(&config, &ensemble, &shots, &output),
    }
}

/// Report seeded with the config echo and its digest.
fn config_report(path: &Path, stage: &str) -> Result<(ExperimentConfig, Report)> {
    let cfg = load_config(path)?;
    let mut r = Report::default();
    r.meta("stage", stage);
    r.meta("sites", cfg.lattice.sites);
    r.meta("seed", cfg.seed);
    r.digests.push((path.display().to_string(), sha256_hex(read_text(path)?.as_bytes())));
    r.config = Some(cfg.to_toml());
    Ok((cfg, r))
}

fn summary_table(rows: &[(&str, f64, &str)]) -> Table {
    let mut t = Table::new("summary", &[("quantity", "-"), ("value", "-"), ("unit", "-")]);
    for (q, v, u) in rows {
        t.push(vec![(*q).into(), (*v).into(), (*u).into()]);
    }
    t
}

fn prepare(path: &Path, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(path, "prepare")?;
    let l = cfg.lattice.sites;
    let u = interaction_matrix(&ring_positions(l, cfg.lattice.spacing)?, cfg.lattice.c6, cfg.lattice.truncation)?;
    let schedule = build_prep_schedule(&cfg.prep.params())?;
    let opts = cfg.evolve.options();
    let ground = QuantumState::all_ground(l)?;
    let gamma = cfg.noise.gamma;
    let mut rows: Vec<(&str, f64, &str)> = Vec::new();
    let mut files = Vec::new();
    let state = if gamma == 0.0 || l <= cfg.capacity.max_open_sites {
        let res = if gamma == 0.0 {
            r.meta("integrator", "closed");
            evolve_closed(&u, &schedule, &ground, &opts)?
        } else {
            r.meta("integrator", "density-matrix");
            evolve_open(&u, &schedule, &ground, gamma, &opts)?
        };
        rows.push(("steps", res.steps as f64, "1"));
        rows.push(("drift", res.drift, "1"));
        if !res.snapshots.is_empty() {
            let p = output.out.join("trajectory.csv");
            write_atomic(&p, trajectory_table(&res.snapshots)?.as_bytes())?;
            files.push(p);
        }
        res.state
    } else {
        r.meta("integrator", "trajectories");
        r.meta("trajectories", cfg.evolve.trajectories);
        let ens = evolve_trajectories(&u, &schedule, &ground, gamma, cfg.evolve.trajectories, cfg.seed, &opts)?;
        let (f, fe) = ens.observable(|s| preparation_fidelity(s).unwrap_or(f64::NAN));
        rows.push(("fidelity", f, "1"));
        rows.push(("fidelity_stderr", fe, "1"));
        let (px, pxe) = ens.observable(px_expectation);
        rows.push(("px", px, "1"));
        rows.push(("px_stderr", pxe, "1"));
        r.tables.push(summary_table(&rows));
        files.extend(emit_report(&r, &output.out, output.format)?);
        return Ok(files);
    };
    if l % 2 == 1 {
        rows.push(("fidelity", preparation_fidelity(&state)?, "1"));
        rows.push(("kink_sum", kink_populations(&state)?.iter().sum(), "1"));
    }
    rows.push(("px", px_expectation(&state), "1"));
    rows.push(("rydberg_density", state.probabilities().iter().enumerate().map(|(i, p)| p * i.count_ones() as f64).sum::<f64>() / l as f64, "1"));
    r.tables.push(summary_table(&rows));
    let p = output.out.join("state.txt");
    write_atomic(&p, state.to_text().as_bytes())?;
    files.push(p);
    files.extend(emit_report(&r, &output.out, output.format)?);
    Ok(files)
}

fn sweep(path: &Path, min_time: bool, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(path, if min_time { "min-time" } else { "sweep" })?;
    let opts = wring::dynamics::EvolveOptions { max_step: cfg.search.max_step, ..cfg.evolve.options() };
    let ramp = cfg.search.ramp(&cfg.prep);
    let model_for = |l: usize| -> Result<PrepModel> {
        let u = interaction_matrix(&ring_positions(l, cfg.lattice.spacing)?, cfg.lattice.c6, cfg.lattice.truncation)?;
        let mut m = PrepModel::new(&u, cfg.prep.omega, ramp, opts)?;
        m.delta_initial = cfg.prep.delta_initial;
        Ok(m)
    };
    if !min_time {
        let res = sweep_detuning(&model_for(cfg.lattice.sites)?, cfg.prep.t_final, &cfg.search.grid())?;
        let mut t = Table::new("sweep", &[("delta", "rad/us"), ("fidelity", "1")]);
        for (d, f) in &res.grid {
            t.push(vec![(*d).into(), (*f).into()]);
        }
        r.meta("t_final_us", cfg.prep.t_final);
        r.meta("best_delta", res.best.0);
        r.meta("best_fidelity", res.best.1);
        r.tables.push(t);
        return emit_report(&r, &output.out, output.format);
    }
    let mut t = Table::new("min_time", &[("L", "1"), ("t_star", "us"), ("delta", "rad/us"), ("infidelity", "1"), ("trials", "1")]);
    let mut points = Vec::new();
    for &l in &cfg.search.sizes {
        if l > cfg.capacity.max_closed_sites {
            return Err(Error::Capacity(format!("{l} sites exceeds capacity.max_closed_sites")));
        }
        let res = min_time_for_infidelity(&model_for(l)?, cfg.search.target, &cfg.search.delta_search(), &cfg.search.time_search())?;
        t.push(vec![l.into(), res.t_star.into(), res.delta.into(), res.infidelity.into(), res.trials.len().into()]);
        points.push((l as f64, res.t_star));
    }
    r.tables.push(t);
    if points.len() >= 3 {
        let fit = fit_power_law(&points)?;
        let mut f = Table::new("fit", &[("exponent", "1"), ("std_error", "1"), ("prefactor", "us")]);
        f.push(vec![fit.exponent.into(), fit.std_error.into(), fit.prefactor.into()]);
        r.tables.push(f);
    }
    emit_report(&r, &output.out, output.format)
}

fn gap(sizes: &[usize], spacing: f64, omega: f64, delta: f64, c6: f64, output: &Output) -> Result<Vec<PathBuf>> {
    let mut r = Report::default();
    r.meta("stage", "gap");
    r.meta("spacing_um", spacing);
    r.meta("omega", omega);
    r.meta("delta", delta);
    r.meta("c6", c6);
    let points = gap_scan(sizes, spacing, c6, Truncation::Full, omega, delta)?;
    let mut t = Table::new("gap", &[("L", "1"), ("gap", "rad/us"), ("lowest_splitting", "rad/us")]);
    for p in &points {
        t.push(vec![p.sites.into(), p.gap.into(), p.lowest_splitting.into()]);
    }
    r.tables.push(t);
    let mut f = Table::new("fit", &[("parity", "-"), ("exponent", "1"), ("std_error", "1")]);
    for (name, parity) in [("odd", 1), ("even", 0)] {
        let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.sites % 2 == parity).map(|p| (p.sites as f64, p.gap)).collect();
        if let Ok(fit) = fit_power_law(&pts) {
            f.push(vec![name.into(), fit.exponent.into(), fit.std_error.into()]);
        }
    }
    r.tables.push(f);
    emit_report(&r, &output.out, output.format)
}

fn grape(path: &Path, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(path, "grape")?;
    let l = cfg.lattice.sites;
    let u = interaction_matrix(&ring_positions(l, cfg.lattice.spacing)?, cfg.lattice.c6, cfg.lattice.truncation)?;
    let target = ideal_rotation_unitary(l)?;
    let duration = if cfg.grape.duration > 0.0 { cfg.grape.duration } else { cfg.rotation.plateau + 2.0 * cfg.rotation.ramp };
    let template = SliceControls::constant(duration, cfg.grape.slices, cfg.rotation.omega, cfg.rotation.phase, 0.0);
    let opts = GrapeOptions { iterations: cfg.grape.iterations, jitter: cfg.grape.jitter, seed: cfg.seed, ..Default::default() };
    let res = grape_optimize(&target, &u, &template, &ControlBounds::from(&cfg.limits), &opts)?;
    r.meta("final_fidelity", res.fidelity);
    let mut trace = Table::new("trace", &[("iteration", "1"), ("fidelity", "1")]);
    for (i, f) in res.trace.iter().enumerate() {
        trace.push(vec![i.into(), (*f).into()]);
    }
    let mut ctl = Table::new("controls", &[("slice", "1"), ("t_start", "us"), ("omega", "rad/us"), ("phi", "rad"), ("delta", "rad/us")]);
    let dt = res.controls.dt();
    for k in 0..res.controls.slices() {
        ctl.push(vec![
            k.into(),
            (k as f64 * dt).into(),
            res.controls.omega[k].into(),
            res.controls.phi[k].into(),
            res.controls.delta[k].into(),
        ]);
    }
    r.tables.push(trace);
    r.tables.push(ctl);
    emit_report(&r, &output.out, output.format)
}

/// Seed streams of the `sample` stage.
const STREAM_NOISE: u64 = 0;
const STREAM_SHOTS: u64 = 1;
const STREAM_READOUT: u64 = 2;
const STREAM_LOADING: u64 = 3;

fn sample(path: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg = load_config(path)?;
    let l = cfg.lattice.sites;
    let gamma = cfg.noise.gamma;
    if gamma > 0.0 && l > cfg.capacity.max_open_sites {
        return Err(Error::Capacity(format!(
            "dephased sampling needs a density matrix; {l} sites exceeds capacity.max_open_sites = {}",
            cfg.capacity.max_open_sites
        )));
    }
    let realization = cfg.noise.realize(&ring_positions(l, cfg.lattice.spacing)?, derive_seed(cfg.seed, STREAM_NOISE))?;
    let u = realization.interactions(cfg.lattice.c6, cfg.lattice.truncation)?;
    let opts = cfg.evolve.options();
    let prep = realization.schedule(&build_prep_schedule(&cfg.prep.params())?)?;
    let ground = QuantumState::all_ground(l)?;
    let state = if gamma > 0.0 {
        evolve_open(&u, &prep, &ground, gamma, &opts)?.state
    } else {
        evolve_closed(&u, &prep, &ground, &opts)?.state
    };
    let cm = cfg.confusion()?;
    let mut measured: Vec<(String, Basis, QuantumState)> = vec![
        ("z".into(), Basis::Z, state.clone()),
        ("x".into(), Basis::X, rotate_to_x_basis(&state)),
    ];
    for e in cfg.rotation.experiments() {
        let rot = realization.schedule(&wring::pulse::build_rotation_schedule(e.rotation.as_ref().expect("rotation experiment"))?)?;
        measured.push((e.label.clone(), Basis::X, apply_rotation(&state, &rot, &u, gamma, &opts)?));
    }
    let mut files = Vec::new();
    for (k, (label, basis, s)) in measured.into_iter().enumerate() {
        let stream = derive_seed(cfg.seed, 16 + k as u64);
        let mut set = sample_measured(&s, basis, cfg.measurement.shots, derive_seed(stream, STREAM_SHOTS))?;
        set = apply_readout_noise(&set, &cm, derive_seed(stream, STREAM_READOUT))?;
        if cfg.measurement.loading_defect > 0.0 {
            set = apply_loading_defects(&set, cfg.measurement.loading_defect, derive_seed(stream, STREAM_LOADING))?;
        }
        set.experiment = label.clone();
        set.seed = Some(cfg.seed);
        set = set
            .with_param("omega_scale", realization.omega_scale)
            .with_param("delta_shift", realization.delta_shift);
        let p = out.join(format!("{label}.shots"));
        write_atomic(&p, set.to_text()?.as_bytes())?;
        files.push(p);
    }
    Ok(files)
}

fn ingest(file: &Path, sites: Option<usize>, postselect: bool, write: Option<&Path>, output: &Output) -> Result<Vec<PathBuf>> {
    let ing = ingest_shot_file(file, sites, postselect)?;
    let mut r = Report::default();
    r.meta("stage", "ingest");
    r.meta("experiment", &ing.shots.experiment);
    r.meta("basis", ing.shots.basis);
    r.meta("sites", ing.shots.sites);
    r.digests.push((file.display().to_string(), ing.digest.clone()));
    r.warnings = ing.warnings.clone();
    let mut t = Table::new("shots", &[("quantity", "-"), ("count", "1")]);
    let (kept, dropped) = ing.postselection.unwrap_or((ing.shots.len(), 0));
    t.push(vec!["read".into(), (kept + dropped).into()]);
    t.push(vec!["kept".into(), kept.into()]);
    t.push(vec!["dropped".into(), dropped.into()]);
    r.tables.push(t);
    let mut files = Vec::new();
    if let Some(w) = write {
        write_atomic(w, ing.shots.to_text()?.as_bytes())?;
        files.push(w.to_path_buf());
    }
    files.extend(emit_report(&r, &output.out, output.format)?);
    Ok(files)
}

fn load_shots(path: &Path, sites: usize, postselect: bool, r: &mut Report) -> Result<ShotSet> {
    let ing = ingest_shot_file(path, Some(sites), postselect)?;
    r.digests.push((path.display().to_string(), ing.digest));
    r.warnings.extend(ing.warnings);
    if let Some((kept, dropped)) = ing.postselection {
        r.meta(&format!("postselection.{}", ing.shots.experiment), format!("{kept} kept, {dropped} dropped"));
    }
    if ing.shots.is_empty() {
        return Err(Error::InvalidInput(format!("no shots left in {}", path.display())));
    }
    Ok(ing.shots)
}

fn estimate_tables(cfg: &ExperimentConfig, z: &ShotSet, x: &ShotSet, r: &mut Report) -> Result<()> {
    let l = cfg.lattice.sites;
    let cm = cfg.confusion()?;
    let (b, seed) = (cfg.measurement.bootstrap, cfg.seed);
    let pop = population_estimate(z, &cm, cfg.measurement.negativity, b, derive_seed(seed, 10))?;
    let mut t = Table::new(
        "populations",
        &[("state", "-"), ("p_raw", "1"), ("p_raw_err", "1"), ("p_mitigated", "1"), ("p_mitigated_err", "1"), ("reference", "1")],
    );
    let kinks = kink_strings(l)?;
    for k in 0..=l {
        let name = if k < l { format!("k{}:{}", k + 1, kinks[k]) } else { "other".into() };
        let reference = if k < l { 1.0 / l as f64 } else { 0.0 };
        t.push(vec![name.into(), pop.raw[k].into(), pop.raw_err[k].into(), pop.mitigated[k].into(), pop.mitigated_err[k].into(), reference.into()]);
    }
    r.tables.push(t);
    r.meta("clipped_mass", pop.clipped_mass);
    let fr = estimate_fidelity(z, x, &cm, cfg.measurement.negativity, b, derive_seed(seed, 11))?;
    if !fr.in_range {
        r.warnings.push(format!("estimated fidelity {} lies outside [0, 1]", fr.fidelity));
    }
    let mut f = Table::new("estimate", &[("quantity", "-"), ("value", "1"), ("stderr", "1")]);
    f.push(vec!["fidelity".into(), fr.fidelity.into(), fr.stderr.into()]);
    f.push(vec!["px".into(), fr.px.into(), fr.px_stderr.into()]);
    f.push(vec!["kink_sum".into(), fr.kink_sum.into(), Cell::Num(f64::NAN)]);
    r.tables.push(f);
    Ok(())
}

fn estimate(config: &Path, z: &Path, x: &Path, postselect: bool, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(config, "estimate")?;
    let zs = load_shots(z, cfg.lattice.sites, postselect, &mut r)?;
    let xs = load_shots(x, cfg.lattice.sites, postselect, &mut r)?;
    estimate_tables(&cfg, &zs, &xs, &mut r)?;
    emit_report(&r, &output.out, output.format)
}

fn member_table(ensemble: &PriorEnsemble, w: &PosteriorWeights) -> Table {
    let mut t = Table::new("members", &[("j", "1"), ("seed", "-"), ("fidelity", "1"), ("weight", "1")]);
    for (m, wj) in ensemble.members.iter().zip(&w.w) {
        t.push(vec![m.index.into(), m.seed.into(), m.fidelity.into(), (*wj).into()]);
    }
    t
}

fn prior(config: &Path, ensemble_path: &Path, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(config, "prior")?;
    let ensemble = build_prior_ensemble(&cfg.ensemble_spec()?, cfg.seed)?;
    write_atomic(ensemble_path, ensemble.to_toml()?.as_bytes())?;
    let uniform = PosteriorWeights::uniform(ensemble.len());
    let (mean, spread) = weighted_stats(&ensemble.fidelities(), &uniform)?;
    let (lo, hi) = ensemble.band();
    let mut f = Table::new("prior", &[("quantity", "-"), ("value", "1")]);
    for (q, v) in [("min", lo), ("max", hi), ("mean", mean), ("spread", spread)] {
        f.push(vec![q.into(), v.into()]);
    }
    r.tables.push(f);
    r.tables.push(member_table(&ensemble, &uniform));
    let mut files = vec![ensemble_path.to_path_buf()];
    files.extend(emit_report(&r, &output.out, output.format)?);
    Ok(files)
}

fn posterior_tables(ensemble: &PriorEnsemble, observations: &[Observation], epsilon: f64, r: &mut Report) -> Result<()> {
    let ll = log_likelihood_matrix(ensemble, observations, (epsilon > 0.0).then_some(epsilon))?;
    let w = posterior_weights(&ll)?;
    let uniform = PosteriorWeights::uniform(ensemble.len());
    let (pm, ps) = weighted_stats(&ensemble.fidelities(), &uniform)?;
    let (qm, qs) = posterior_fidelity(ensemble, &w)?;
    let (lo, hi) = ensemble.band();
    let mut f = Table::new("fidelity", &[("quantity", "-"), ("value", "1")]);
    for (q, v) in [
        ("prior_min", lo),
        ("prior_max", hi),
        ("prior_mean", pm),
        ("prior_spread", ps),
        ("posterior_mean", qm),
        ("posterior_spread", qs),
    ] {
        f.push(vec![q.into(), v.into()]);
    }
    r.tables.push(f);
    let mut k = Table::new(
        "kl",
        &[
            ("experiment", "-"),
            ("shots", "1"),
            ("prior_bitstring", "nat"),
            ("posterior_bitstring", "nat"),
            ("prior_magnetization", "nat"),
            ("posterior_magnetization", "nat"),
        ],
    );
    for (row, o) in kl_table(ensemble, observations, &w)?.into_iter().zip(observations) {
        k.push(vec![
            row.label.into(),
            o.shots.into(),
            row.prior_bitstring.into(),
            row.posterior_bitstring.into(),
            row.prior_magnetization.into(),
            row.posterior_magnetization.into(),
        ]);
    }
    r.tables.push(k);
    r.tables.push(member_table(ensemble, &w));
    Ok(())
}

fn load_ensemble(path: &Path, r: &mut Report) -> Result<PriorEnsemble> {
    let text = read_text(path)?;
    r.digests.push((path.display().to_string(), sha256_hex(text.as_bytes())));
    let e = PriorEnsemble::from_toml(&text)?;
    r.meta("ensemble_seed", e.seed);
    r.meta("members", e.len());
    Ok(e)
}

fn posterior(ensemble_path: &Path, shots: &[PathBuf], epsilon: f64, postselect: bool, output: &Output) -> Result<Vec<PathBuf>> {
    let mut r = Report::default();
    r.meta("stage", "posterior");
    let ensemble = load_ensemble(ensemble_path, &mut r)?;
    r.meta("epsilon", if epsilon > 0.0 { epsilon.to_string() } else { "1/(10N)".into() });
    let mut observations = Vec::new();
    for p in shots {
        let s = load_shots(p, ensemble.sites, postselect, &mut r)?;
        observations.push(Observation::from_shots(s.experiment.clone(), &s)?);
    }
    posterior_tables(&ensemble, &observations, epsilon, &mut r)?;
    emit_report(&r, &output.out, output.format)
}

/// Reads `delta,p_e` rows; a first line that does not parse is a header.
fn read_resonance(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Option<(f64, f64)> = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed {
            Some(p) => out.push(p),
            None if out.is_empty() && i == 0 => {}
            None => return Err(Error::Parse { line: i + 1, message: format!("expected 'delta,p_e', got '{line}'") }),
        }
    }
    Ok(out)
}

fn calibrate(data: &Path, t_pi: Option<f64>, omega: f64, output: &Output) -> Result<Vec<PathBuf>> {
    let mut r = Report::default();
    r.meta("stage", "calibrate");
    r.digests.push((data.display().to_string(), sha256_hex(read_text(data)?.as_bytes())));
    let points = read_resonance(data)?;
    let t_pi = t_pi.unwrap_or(std::f64::consts::PI / omega);
    r.meta("t_pi_us", t_pi);
    let fit = calibration_fit(&points, t_pi)?;
    let mut t = Table::new("calibration", &[("quantity", "-"), ("value", "-"), ("stderr", "-"), ("unit", "-")]);
    t.push(vec!["omega".into(), fit.omega.into(), fit.std_errors[0].into(), "rad/us".into()]);
    t.push(vec!["delta_offset".into(), fit.delta_offset.into(), fit.std_errors[1].into(), "rad/us".into()]);
    t.push(vec!["rms_residual".into(), fit.residual.into(), Cell::Num(f64::NAN), "1".into()]);
    t.push(vec!["iterations".into(), fit.iterations.into(), Cell::Num(f64::NAN), "1".into()]);
    r.tables.push(t);
    let mut c = Table::new("curve", &[("delta", "rad/us"), ("p_measured", "1"), ("p_fit", "1")]);
    for (d, p) in &points {
        c.push(vec![(*d).into(), (*p).into(), resonance_probability(fit.omega, d - fit.delta_offset, t_pi).into()]);
    }
    r.tables.push(c);
    emit_report(&r, &output.out, output.format)
}

fn full_report(config: &Path, ensemble_path: &Path, shots_dir: &Path, output: &Output) -> Result<Vec<PathBuf>> {
    let (cfg, mut r) = config_report(config, "report")?;
    let ensemble = load_ensemble(ensemble_path, &mut r)?;
    if ensemble.sites != cfg.lattice.sites {
        return Err(Error::DimensionMismatch { expected: cfg.lattice.sites, found: ensemble.sites });
    }
    let z = load_shots(&shots_dir.join("z.shots"), cfg.lattice.sites, true, &mut r)?;
    let x = load_shots(&shots_dir.join("x.shots"), cfg.lattice.sites, true, &mut r)?;
    estimate_tables(&cfg, &z, &x, &mut r)?;
    let mut observations = Vec::new();
    for label in &ensemble.labels {
        let s = load_shots(&shots_dir.join(format!("{label}.shots")), cfg.lattice.sites, true, &mut r)?;
        observations.push(Observation::from_shots(label.clone(), &s)?);
    }
    posterior_tables(&ensemble, &observations, cfg.inference.epsilon, &mut r)?;
    emit_report(&r, &output.out, output.format)
}
