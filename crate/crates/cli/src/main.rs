//! `nmqsd`: run trajectory ensembles, exact references and statistical checks
//! from JSON configs, writing CSV and JSON artifacts.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nmqsd_core::analytic::{rho_dissipative, rho_sigma_z};
use nmqsd_core::ansatz::scalar_schedule;
use nmqsd_core::dynamics::{Integrator, ShiftConvention, TrajectoryOptions};
use nmqsd_core::ensemble::{run_ensemble, with_pool, EnsembleOptions, EnsembleResult};
use nmqsd_core::hilbert::{q_function, top_fock_population, DensityMatrix, QGrid, StateVector};
use nmqsd_core::models::{cut_default_phi0, cut_pair_run, ModelSpec};
use nmqsd_core::noise::{check_sampler, default_sampler, markov_increments_with, sample_spectral_with, trajectory_rng, CorrelationKernel, NoiseSource, TimeGrid};
use nmqsd_core::oracle::{evolve_exact, MicroscopicModel};
use nmqsd_core::stats::z_score;
use nmqsd_core::{Error, C64};
use serde_json::{json, Value};

use config::{ConfigError, Overrides, RunConfig};
use output::{matrix_columns, read_csv, write_json, Csv};

#[derive(Parser)]
#[command(name = "nmqsd", version, about = "Non-Markovian quantum state diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Trajectory ensemble: ensemble CSV, single-trajectory CSVs, analytic overlay, summary.
    Run(Common),
    /// Exact system-plus-modes propagation, optionally compared with an ensemble CSV.
    Oracle(Common),
    /// Two-point statistics of sampled noise against the kernel.
    NoiseCheck(Common),
    /// Husimi Q grids along one oscillator trajectory.
    Qplot(Common),
    /// Deviation between the two descriptions of the spin-oscillator pair.
    CutCheck(Common),
}

#[derive(Args)]
struct Common {
    /// Config file (also accepted as the positional argument).
    #[arg(long = "config", value_name = "PATH")]
    config_flag: Option<PathBuf>,
    #[arg(value_name = "CONFIG")]
    config: Option<PathBuf>,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    tmax: Option<f64>,
    #[arg(long, value_parser = parse_convention)]
    shift_convention: Option<ShiftConvention>,
}

fn parse_convention(s: &str) -> Result<ShiftConvention, String> {
    match s {
        "self-consistent" => Ok(ShiftConvention::SelfConsistent),
        "posthoc" => Ok(ShiftConvention::PostHoc),
        _ => Err(format!("expected self-consistent or posthoc, got {s}")),
    }
}

#[derive(Debug)]
enum CliError {
    Config(ConfigError),
    Core(Error),
    Io(String),
    CheckFailed(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) | CliError::CheckFailed(_) => 3,
        }
    }

    fn to_json(&self) -> Value {
        let (kind, message, path) = match self {
            CliError::Config(e) => ("ConfigError", e.message.clone(), Some(e.path.clone())),
            CliError::Core(e) => (e.kind(), e.to_string(), None),
            CliError::Io(m) => ("IoError", m.clone(), None),
            CliError::CheckFailed(m) => ("CheckFailed", m.clone(), None),
        };
        json!({ "error": { "kind": kind, "message": message, "path": path }, "exit_code": self.exit_code() })
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Run(c) => ("run", c),
        Command::Oracle(c) => ("oracle", c),
        Command::NoiseCheck(c) => ("noise-check", c),
        Command::Qplot(c) => ("qplot", c),
        Command::CutCheck(c) => ("cut-check", c),
    };
    let result = prepare(common).and_then(|(cfg, out)| match &cli.command {
        Command::Run(_) => cmd_run(&cfg, &out),
        Command::Oracle(_) => cmd_oracle(&cfg, &out),
        Command::NoiseCheck(_) => cmd_noise_check(&cfg, &out),
        Command::Qplot(_) => cmd_qplot(&cfg, &out),
        Command::CutCheck(_) => cmd_cut_check(&cfg, &out),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nmqsd {name}: {}", serde_json::to_string_pretty(&e.to_json()).expect("json value serializes"));
            ExitCode::from(e.exit_code())
        }
    }
}

fn prepare(c: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let path = c.config_flag.as_ref().or(c.config.as_ref()).ok_or_else(|| ConfigError::at("", "no config given (use --config PATH)"))?;
    let mut cfg = config::load(path)?;
    cfg.apply(&Overrides { trajectories: c.trajectories, seed: c.seed, out: c.out.clone(), dt: c.dt, tmax: c.tmax, shift_convention: c.shift_convention });
    if cfg.n_traj == 0 {
        return Err(ConfigError::at("n_traj", "must be at least 1").into());
    }
    if cfg.record_every == 0 {
        return Err(ConfigError::at("record_every", "must be at least 1").into());
    }
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("nmqsd-out"));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn trajectory_options(cfg: &RunConfig, model: &ModelSpec) -> CliResult<TrajectoryOptions> {
    let mut o = TrajectoryOptions::new(cfg.mode);
    o.convention = cfg.flags.shift_convention;
    o.stride = cfg.record_every;
    o.observables = cfg.observables(model)?;
    Ok(o)
}

fn c_cols(names: &[String]) -> Vec<String> {
    names.iter().flat_map(|n| [format!("{n}_re"), format!("{n}_im")]).collect()
}

fn push_upper(row: &mut Vec<f64>, dim: usize, entry: impl Fn(usize, usize) -> C64) {
    for i in 0..dim {
        for j in i..dim {
            let v = entry(i, j);
            row.push(v.re);
            row.push(v.im);
        }
    }
}

fn cmd_run(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    let model = cfg.model()?;
    let kernel = cfg.kernel(&model)?;
    let grid = cfg.time_grid()?;
    let psi0 = cfg.psi0(&model)?;
    let topts = trajectory_options(cfg, &model)?;
    let integ = Integrator::new(&model, &kernel, grid, cfg.flags.sampler_override)?;
    let resolved = cfg.resolved_json();
    let names: Vec<String> = topts.observables.iter().map(|(n, _)| n.clone()).collect();
    let mut files = Vec::new();

    let n_save = cfg.save_trajectories.min(cfg.n_traj);
    let mut single_failures = Vec::new();
    for i in 0..n_save {
        let noise = integ.sample_noise(&mut trajectory_rng(cfg.master_seed, i as u64));
        match integ.record(&psi0, &noise, &topts) {
            Ok(rec) => {
                let mut cols = vec!["t".to_string(), "norm_sq".into(), "ldag_re".into(), "ldag_im".into()];
                cols.extend(c_cols(&names));
                let mut csv = Csv::new("run", &resolved, cfg.master_seed, &[("trajectory", i.to_string())], &cols);
                for r in 0..rec.times.len() {
                    let mut row = vec![rec.times[r], rec.norm_sq[r], rec.ldag[r].re, rec.ldag[r].im];
                    for k in 0..names.len() {
                        row.push(rec.observables[k][r].re);
                        row.push(rec.observables[k][r].im);
                    }
                    csv.row(&row);
                }
                let file = format!("trajectory_{i:03}.csv");
                csv.write(&out.join(&file))?;
                files.push(file);
            }
            Err(e) => single_failures.push(json!({ "trajectory": i, "error": e.to_string() })),
        }
    }

    let res = run_ensemble(&integ, &psi0, &EnsembleOptions { trajectory: topts.clone(), n_traj: cfg.n_traj, master_seed: cfg.master_seed }, |_| ())?;
    write_ensemble_csv(cfg, &res, &names, &resolved, &out.join("ensemble.csv"))?;
    files.push("ensemble.csv".into());

    let mut summary = json!({
        "command": "run",
        "config": resolved,
        "model": model.name,
        "n_traj": cfg.n_traj,
        "failures": res.failures,
        "first_failure": res.first_failure,
        "single_trajectory_failures": single_failures,
        "pinned_trajectories": res.pinned,
        "truncation_suspect": res.truncation_suspect,
        "sampler": integ.sampler,
    });
    if let Some((curve, max_z, t_pin)) = analytic_overlay(&model, &kernel, &psi0, grid, cfg.record_every, &res)? {
        let mut cols = vec!["t".to_string()];
        cols.extend(matrix_columns("rho", 2));
        cols.extend(["sx", "sy", "sz"].iter().map(|s| s.to_string()));
        let mut csv = Csv::new("run", &resolved, cfg.master_seed, &[("reference", "analytic".into())], &cols);
        for (t, rho) in &curve {
            let mut row = vec![*t];
            push_upper(&mut row, rho.dim(), |i, j| rho.m[(i, j)]);
            let m = &rho.m;
            row.extend([2.0 * m[(0, 1)].re, -2.0 * m[(0, 1)].im, (m[(0, 0)] - m[(1, 1)]).re]);
            csv.row(&row);
        }
        csv.write(&out.join("analytic.csv"))?;
        files.push("analytic.csv".into());
        summary["analytic_max_z"] = json!(max_z);
        summary["analytic_pinned_from"] = json!(t_pin);
    }
    summary["files"] = json!(files);
    summary["runtime_seconds"] = json!(start.elapsed().as_secs_f64());
    write_json(&out.join("summary.json"), &summary)?;
    Ok(())
}

fn write_ensemble_csv(cfg: &RunConfig, res: &EnsembleResult<()>, names: &[String], resolved: &Value, path: &Path) -> CliResult<()> {
    let acc = &res.acc;
    let dim = acc.dim;
    let mut cols = vec!["t".to_string()];
    cols.extend(matrix_columns("rho", dim));
    cols.extend(matrix_columns("rho_se", dim));
    for n in names {
        cols.extend([format!("{n}_re"), format!("{n}_im"), format!("{n}_se_re"), format!("{n}_se_im")]);
    }
    cols.extend(["norm_sq".to_string(), "norm_sq_se".into()]);
    let extra = [("mode", format!("{:?}", cfg.mode).to_lowercase()), ("n_traj", cfg.n_traj.to_string())];
    let mut csv = Csv::new("run", resolved, cfg.master_seed, &extra, &cols);
    for r in 0..acc.times.len() {
        let mut row = vec![acc.times[r]];
        let rho = acc.rho(r);
        push_upper(&mut row, dim, |i, j| rho.m[(i, j)]);
        let se = acc.rho_se(r);
        push_upper(&mut row, dim, |i, j| se[(i, j)]);
        for k in 0..names.len() {
            let (m, s) = acc.observable(k, r);
            row.extend([m.re, m.im, s.re, s.im]);
        }
        let (n, s) = acc.norm_sq(r);
        row.extend([n, s]);
        csv.row(&row);
    }
    csv.write(path)?;
    Ok(())
}

type Overlay = (Vec<(f64, DensityMatrix)>, f64, Option<f64>);

/// Closed-form reference for the two spin models, with the worst entrywise z-score.
fn analytic_overlay(model: &ModelSpec, kernel: &CorrelationKernel, psi0: &StateVector, grid: TimeGrid, stride: usize, res: &EnsembleResult<()>) -> CliResult<Option<Overlay>> {
    let rho0 = psi0.projector();
    let times = &res.acc.times;
    let (values, t_pin) = match model.name.as_str() {
        "measurement_sigma_z" => (rho_sigma_z(&rho0, model.omega, model.lambda, kernel, times)?.values, None),
        "dissipative_spin" => {
            let sched = scalar_schedule(kernel, model.omega, model.lambda, grid);
            let (curve, t_pin) = rho_dissipative(&rho0, model.omega, model.lambda, &sched, grid)?;
            ((0..times.len()).map(|r| curve.values[r * stride].clone()).collect(), t_pin)
        }
        _ => return Ok(None),
    };
    let mut max_z: f64 = 0.0;
    for (r, reference) in values.iter().enumerate() {
        let rho = res.acc.rho(r);
        let se = res.acc.rho_se(r);
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let (a, b, s) = (rho.m[(i, j)], reference.m[(i, j)], se[(i, j)]);
            max_z = max_z.max(z_score(a.re, s.re, b.re, 0.0)).max(z_score(a.im, s.im, b.im, 0.0));
        }
    }
    Ok(Some((times.iter().copied().zip(values).collect(), max_z, t_pin)))
}

fn cmd_oracle(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let start = Instant::now();
    let model = cfg.model()?;
    let grid = cfg.time_grid()?;
    let psi0 = cfg.psi0(&model)?;
    let oc = cfg.oracle.as_ref().ok_or_else(|| ConfigError::at("oracle", "missing field `oracle` with the environment modes"))?;
    let micro = MicroscopicModel::new(model.h.clone(), model.l.clone(), oc.modes.clone())?;
    let compare = match &oc.compare_ensemble {
        Some(p) => Some(read_csv(p).map_err(|m| ConfigError::at("oracle.compare_ensemble", m))?),
        None => None,
    };
    let times: Vec<f64> = match &compare {
        Some((_, rows)) => rows.iter().map(|r| r[0]).collect(),
        None => (0..grid.n_nodes()).step_by(cfg.record_every).map(|i| grid.t(i)).collect(),
    };
    let run = evolve_exact(&micro, &psi0, &times)?;
    let resolved = cfg.resolved_json();
    let dim = model.dim();
    let mut cols = vec!["t".to_string()];
    cols.extend(matrix_columns("rho", dim));
    let mut csv = Csv::new("oracle", &resolved, cfg.master_seed, &[("total_dim", micro.total_dim().to_string())], &cols);
    for (t, rho) in times.iter().zip(&run.rho) {
        let mut row = vec![*t];
        push_upper(&mut row, rho.dim(), |i, j| rho.m[(i, j)]);
        csv.row(&row);
    }
    csv.write(&out.join("oracle_rho.csv"))?;
    let mut report = json!({
        "command": "oracle",
        "config": resolved,
        "total_dim": micro.total_dim(),
        "max_norm_dev": run.max_norm_dev,
        "max_top_population": run.max_top_population,
        "files": ["oracle_rho.csv"],
    });
    if let Some((header, rows)) = &compare {
        let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| ConfigError::at("oracle.compare_ensemble", format!("column {name} missing")));
        let mut cmp = Csv::new("oracle", &resolved, cfg.master_seed, &[], &["t".into(), "max_abs_dev".into(), "max_sigma".into()]);
        let (mut worst_dev, mut worst_sigma): (f64, f64) = (0.0, 0.0);
        for (row, rho) in rows.iter().zip(&run.rho) {
            let (mut dev, mut sigma): (f64, f64) = (0.0, 0.0);
            for i in 0..dim {
                for j in i..dim {
                    let re = row[col(&format!("rho_{i}_{j}_re"))?];
                    let im = row[col(&format!("rho_{i}_{j}_im"))?];
                    let se_re = row[col(&format!("rho_se_{i}_{j}_re"))?];
                    let se_im = row[col(&format!("rho_se_{i}_{j}_im"))?];
                    let want = rho.m[(i, j)];
                    dev = dev.max((C64::new(re, im) - want).norm());
                    sigma = sigma.max(z_score(re, se_re, want.re, 0.0)).max(z_score(im, se_im, want.im, 0.0));
                }
            }
            worst_dev = worst_dev.max(dev);
            worst_sigma = worst_sigma.max(sigma);
            cmp.row(&[row[0], dev, sigma]);
        }
        cmp.write(&out.join("oracle_comparison.csv"))?;
        report["max_deviation"] = json!(worst_dev);
        report["max_sigma"] = json!(worst_sigma);
        report["files"] = json!(["oracle_rho.csv", "oracle_comparison.csv"]);
    }
    report["runtime_seconds"] = json!(start.elapsed().as_secs_f64());
    write_json(&out.join("oracle_report.json"), &report)?;
    Ok(())
}

fn cmd_noise_check(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let kernel = cfg.kernel.clone().ok_or_else(|| ConfigError::at("kernel", "missing field `kernel`"))?;
    kernel.validate().map_err(|e| ConfigError::at("kernel", e.to_string()))?;
    let nc = cfg.noise_check.as_ref().ok_or_else(|| ConfigError::at("noise_check", "missing field `noise_check`"))?;
    let expected = nc.expected_kernel.clone().unwrap_or_else(|| kernel.clone());
    let grid = cfg.time_grid()?;
    let sampler = cfg.flags.sampler_override.unwrap_or_else(|| default_sampler(&kernel));
    let source = NoiseSource::new(&kernel, grid, sampler)?;
    let rep = with_pool(|| check_sampler(&source, &expected, grid, nc.n_paths, cfg.master_seed))?;
    let resolved = cfg.resolved_json();
    let cols: Vec<String> = ["t", "s", "corr_re", "corr_im", "se_re", "se_im", "expected_re", "expected_im"].iter().map(|s| s.to_string()).collect();
    let mut csv = Csv::new("noise-check", &resolved, cfg.master_seed, &[("sampler", format!("{sampler:?}").to_lowercase())], &cols);
    let n = rep.times.len();
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let (m, se, e) = (rep.corr[k], rep.corr_se[k], rep.expected[k]);
            csv.row(&[rep.times[i], rep.times[j], m.re, m.im, se.re, se.im, e.re, e.im]);
        }
    }
    csv.write(&out.join("noise_check.csv"))?;
    let pass = rep.passes(nc.n_sigma);
    write_json(
        &out.join("noise_check.json"),
        &json!({
            "command": "noise-check",
            "config": resolved,
            "sampler": sampler,
            "n_paths": rep.n_paths,
            "max_corr_sigma": rep.max_corr_sigma,
            "max_circ_sigma": rep.max_circ_sigma,
            "n_sigma": nc.n_sigma,
            "pass": pass,
        }),
    )?;
    if !pass {
        return Err(CliError::CheckFailed(format!(
            "noise statistics off by {:.2} sigma (correlation) / {:.2} sigma (M[z z]); bound {}",
            rep.max_corr_sigma, rep.max_circ_sigma, nc.n_sigma
        )));
    }
    Ok(())
}

fn cmd_qplot(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let model = cfg.model()?;
    if model.n_trunc != Some(model.dim()) {
        return Err(ConfigError::at("model.name", format!("qplot needs a single-oscillator model, got {}", model.name)).into());
    }
    let kernel = cfg.kernel(&model)?;
    let grid = cfg.time_grid()?;
    let psi0 = cfg.psi0(&model)?;
    let qc = cfg.qplot.clone().unwrap_or(config::QplotConfig { times: None, spacing: 2.27, extent: 4.5, points: 121 });
    let positive = |x: f64| x > 0.0;
    if !positive(qc.spacing) || !positive(qc.extent) || qc.points < 2 {
        return Err(ConfigError::at("qplot", "spacing and extent must be positive and points >= 2").into());
    }
    let times = qc.times.clone().unwrap_or_else(|| {
        let step = qc.spacing / model.omega.abs().max(f64::MIN_POSITIVE);
        (0..).map(|k| k as f64 * step).take_while(|t| *t <= grid.t_max() + 1e-12).collect()
    });
    if let Some((k, t)) = times.iter().enumerate().find(|(_, t)| !(**t >= 0.0 && **t <= grid.t_max() + 1e-12)) {
        return Err(ConfigError::at(&format!("qplot.times[{k}]"), format!("{t} lies outside [0, t_max]")).into());
    }
    let nodes: Vec<usize> = times.iter().map(|t| ((t / grid.dt).round() as usize).min(grid.n_steps)).collect();
    let integ = Integrator::new(&model, &kernel, grid, cfg.flags.sampler_override)?;
    let mut opts = TrajectoryOptions::new(cfg.mode);
    opts.convention = cfg.flags.shift_convention;
    let mut states: Vec<Option<Vec<C64>>> = vec![None; nodes.len()];
    let noise = integ.sample_noise(&mut trajectory_rng(cfg.master_seed, 0));
    integ.schedule.integrate(&psi0, &noise.step_values(), &opts, |node, psi| {
        for (k, n) in nodes.iter().enumerate() {
            if *n == node {
                states[k] = Some(psi.to_vec());
            }
        }
    })?;
    let qgrid = QGrid { re_min: -qc.extent, re_max: qc.extent, im_min: -qc.extent, im_max: qc.extent, n_re: qc.points, n_im: qc.points };
    let resolved = cfg.resolved_json();
    let mut files = Vec::new();
    for (k, st) in states.into_iter().enumerate() {
        let amps = st.expect("every requested node is visited");
        let top = top_fock_population(&amps);
        if top > 1e-6 {
            return Err(Error::Truncation { tail: top, limit: 1e-6, n_trunc: model.dim() }.into());
        }
        let psi = StateVector::new(amps)?;
        let q = q_function(&psi, &qgrid)?;
        let t = grid.t(nodes[k]);
        let mut csv = Csv::new("qplot", &resolved, cfg.master_seed, &[("t", format!("{t:.16e}"))], &["re_beta".into(), "im_beta".into(), "q".into()]);
        for i in 0..qgrid.n_im {
            for j in 0..qgrid.n_re {
                csv.row(&[qgrid.re(j), qgrid.im(i), q[(i, j)]]);
            }
        }
        let file = format!("q_{k:03}.csv");
        csv.write(&out.join(&file))?;
        files.push(json!({ "file": file, "t": t }));
    }
    write_json(&out.join("qplot_manifest.json"), &json!({ "command": "qplot", "config": resolved, "grids": files }))?;
    Ok(())
}

fn cmd_cut_check(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let model = cfg.model()?;
    let p = config::cut_params(&model)?;
    let grid = cfg.time_grid()?;
    let cc = cfg.cut.clone().unwrap_or(config::CutConfig { n_paths: 20, tolerance: 1e-6 });
    if cc.n_paths == 0 {
        return Err(ConfigError::at("cut.n_paths", "must be at least 1").into());
    }
    let phi0 = match &cfg.initial_state {
        None => cut_default_phi0(),
        Some(_) => cfg.psi0(&nmqsd_core::models::cut_spin(p))?,
    };
    let kernel = CorrelationKernel::SingleMode { omega: p.omega2 };
    let mut rho_dev = vec![0.0f64; grid.n_nodes()];
    let mut id_dev = vec![0.0f64; grid.n_nodes()];
    for k in 0..cc.n_paths as u64 {
        let xi = markov_increments_with(grid, &mut trajectory_rng(cfg.master_seed, 2 * k));
        let z = sample_spectral_with(&kernel, grid, &mut trajectory_rng(cfg.master_seed, 2 * k + 1))?;
        for (i, s) in cut_pair_run(&phi0, &xi, &z, p)?.iter().enumerate() {
            rho_dev[i] = rho_dev[i].max(s.max_rho_diff(p.chi));
            id_dev[i] = id_dev[i].max(s.identity_defect());
        }
    }
    let resolved = cfg.resolved_json();
    let mut csv = Csv::new("cut-check", &resolved, cfg.master_seed, &[("n_paths", cc.n_paths.to_string())], &["t".into(), "max_rho_diff".into(), "max_identity_defect".into()]);
    for i in (0..grid.n_nodes()).step_by(cfg.record_every) {
        csv.row(&[grid.t(i), rho_dev[i], id_dev[i]]);
    }
    csv.write(&out.join("cut_check.csv"))?;
    let worst_rho = rho_dev.iter().copied().fold(0.0, f64::max);
    let worst_id = id_dev.iter().copied().fold(0.0, f64::max);
    let pass = worst_rho <= cc.tolerance && worst_id <= cc.tolerance;
    write_json(
        &out.join("cut_check.json"),
        &json!({ "command": "cut-check", "config": resolved, "max_rho_diff": worst_rho, "max_identity_defect": worst_id, "tolerance": cc.tolerance, "pass": pass }),
    )?;
    if !pass {
        return Err(CliError::CheckFailed(format!("cut deviation {worst_rho:.3e} / identity defect {worst_id:.3e} above {:.1e}", cc.tolerance)));
    }
    Ok(())
}
