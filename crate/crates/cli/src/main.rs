use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dephrob::control::{optimize, ControlOptions};
use dephrob::deltamax::delta_max;
use dephrob::dephasing::{sample_processes, DephasingProcess};
use dephrob::experiments::{
    run_fidelity_study, run_study, write_deltamax_csv, write_fidelity_csv, DeltaMaxRow, ExperimentConfig, StudyKind,
};
use dephrob::problem::PerturbationProblem;
use dephrob::spin_model::{build_hamiltonian, build_perturbation, NetworkSpec, PerturbationKind, Topology};
use dephrob::stats::{five_number, lilliefors_test};
use dephrob::transfer::TransferOptions;
use dephrob::Error;

const EXIT_INVALID: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "dephrob", version, about = "Robustness analysis of dephasing spin networks")]
struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective config with all defaults and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample physical dephasing processes, one JSON file each.
    SampleDephasing {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
    /// Transfer-function norm against δ (or against ω with --dense).
    Sweep {
        #[command(flatten)]
        system: SystemArgs,
        /// Comma-separated δ values.
        #[arg(long, value_delimiter = ',', default_values_t = default_sweep_deltas())]
        deltas: Vec<f64>,
        /// Evaluate a dense grid of this many frequencies instead of the candidates.
        #[arg(long)]
        dense: Option<usize>,
        #[arg(long, default_value_t = 4.0)]
        omega_max: f64,
    },
    /// Eigenvalues of the perturbed generator.
    Poles {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, value_delimiter = ',', default_values_t = (0..=10).map(|i| i as f64 / 10.0).collect::<Vec<_>>())]
        deltas: Vec<f64>,
    },
    /// δ_max per (structure, process) for the first network of the config.
    Deltamax {
        /// Strength to use instead of the first configured γ.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Transfer fidelity over the configured (γ, δ) grid.
    Fidelity,
    /// Optimize energy-landscape controllers.
    OptimizeControl {
        #[arg(long, value_enum, default_value_t = TopologyArg::Ring)]
        topology: TopologyArg,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long = "in", default_value_t = 1)]
        in_node: usize,
        #[arg(long = "out-node", default_value_t = 3)]
        out_node: usize,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
        #[arg(long, default_value_t = 1.0)]
        t_min: f64,
        #[arg(long, default_value_t = 30.0)]
        t_max: f64,
        #[arg(long, default_value_t = 20)]
        keep: usize,
    },
    /// Full study with summary, cells and manifest.
    Study {
        #[arg(value_enum)]
        kind: KindArg,
    },
    /// Five-number summary and Lilliefors p-value of a CSV column per group.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        column: String,
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<String>,
    },
}

fn default_sweep_deltas() -> Vec<f64> {
    (0..31).map(|i| 10f64.powf(-4.0 + 0.1 * i as f64)).collect()
}

#[derive(Args)]
struct SystemArgs {
    #[arg(long, value_enum, default_value_t = TopologyArg::Chain)]
    topology: TopologyArg,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long, default_value = "coupling:1")]
    structure: String,
    #[arg(long, default_value_t = 0.05)]
    gamma: f64,
    /// Process JSON file; otherwise the sampled process with --process-index.
    #[arg(long)]
    process: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    process_index: usize,
    /// Comma-separated diagonal controls.
    #[arg(long, value_delimiter = ',')]
    controls: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Chain,
    Ring,
}

impl From<TopologyArg> for Topology {
    fn from(t: TopologyArg) -> Self {
        match t {
            TopologyArg::Chain => Topology::Chain,
            TopologyArg::Ring => Topology::Ring,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Deltamax,
    Fidelity,
}

enum Failure {
    Invalid(String),
    Partial(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidSpec(_)
            | Error::TopologyMismatch(_)
            | Error::IndexOutOfRange { .. }
            | Error::InvalidProcess(_)
            | Error::NonUnitTrace(_)
            | Error::Json(_) => Failure::Invalid(e.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}

fn effective_config(cli: &Cli, kind: StudyKind) -> Result<ExperimentConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = cli.seed {
        config.experiment.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.experiment.threads = threads;
    }
    if let Some(out) = &cli.out {
        config.output.dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn config_kind(command: &Command) -> StudyKind {
    match command {
        Command::Fidelity
        | Command::OptimizeControl { .. }
        | Command::Study {
            kind: KindArg::Fidelity,
        } => StudyKind::Fidelity,
        _ => StudyKind::Deltamax,
    }
}

fn install_threads(threads: Option<usize>) -> Outcome {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Internal(e.to_string()))?;
    }
    Ok(())
}

/// `--out` as a file, or stdout.
fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            Box::new(io::BufWriter::new(fs::File::create(path)?))
        }
        None => Box::new(io::BufWriter::new(io::stdout())),
    })
}

fn run(cli: Cli) -> Outcome {
    let kind = config_kind(&cli.command);
    if cli.print_config {
        let config = effective_config(&cli, kind)?;
        print!("{}", config.to_toml());
        return Ok(());
    }
    install_threads(cli.threads)?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::SampleDephasing { n, count, gamma } => {
            if !(*gamma > 0.0) || *count == 0 {
                return Err(Failure::Invalid("need count >= 1 and gamma > 0".into()));
            }
            let processes = sample_processes::<f64>(*n, *count, seed, *gamma)?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("processes"));
            fs::create_dir_all(&dir)?;
            let mut files = Vec::new();
            for (i, p) in processes.iter().enumerate() {
                let name = format!("process_{i:04}.json");
                fs::write(dir.join(&name), serde_json::to_string_pretty(p).map_err(Error::from)? + "\n")?;
                files.push(name);
            }
            let manifest = serde_json::json!({ "n": n, "count": count, "seed": seed, "gamma": gamma, "files": files });
            fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n")?;
            Ok(())
        }
        Command::Sweep {
            system,
            deltas,
            dense,
            omega_max,
        } => {
            let problem = build_problem(system, seed)?;
            let mut out = sink(&cli.out)?;
            if deltas.iter().any(|d| !(*d > 0.0)) {
                return Err(Failure::Invalid("sweep deltas must be > 0".into()));
            }
            match dense {
                Some(points) => {
                    let points = (*points).max(2);
                    let omegas: Vec<f64> = (0..points).map(|i| omega_max * i as f64 / (points - 1) as f64).collect();
                    writeln!(out, "delta,omega,norm")?;
                    for &delta in deltas {
                        let norms = problem.transfer_norm_on(delta, &omegas)?;
                        for (w, n) in omegas.iter().zip(norms) {
                            writeln!(out, "{delta},{w},{n}")?;
                        }
                    }
                }
                None => {
                    writeln!(out, "delta,norm_max,omega_crit")?;
                    for e in problem.transfer_norms(deltas, TransferOptions::default()) {
                        let e = e?;
                        writeln!(out, "{},{},{}", e.delta, e.norm, e.omega_crit)?;
                    }
                }
            }
            out.flush()?;
            Ok(())
        }
        Command::Poles { system, deltas } => {
            let problem = build_problem(system, seed)?;
            let mut out = sink(&cli.out)?;
            writeln!(out, "delta,re,im")?;
            for (&delta, poles) in deltas.iter().zip(problem.poles(deltas)) {
                for p in poles? {
                    writeln!(out, "{delta},{},{}", p.re, p.im)?;
                }
            }
            out.flush()?;
            Ok(())
        }
        Command::Deltamax { gamma } => {
            let config = effective_config(&cli, StudyKind::Deltamax)?;
            let gamma = gamma.unwrap_or(config.dephasing.gamma[0]);
            let net = &config.network[0];
            let spec = net.spec();
            let h = build_hamiltonian(&spec)?;
            let processes = sample_processes::<f64>(spec.n, config.dephasing.count, config.experiment.seed, 1.0)?;
            let dir = config.output.dir.clone();
            fs::create_dir_all(&dir)?;
            let grid = config.grid.deltamax();
            let mut rows = Vec::new();
            let mut failed = 0;
            for &structure in &net.perturbations {
                let s = build_perturbation(&spec, structure)?;
                for (id, p) in processes.iter().enumerate() {
                    let problem = PerturbationProblem::new(h.clone(), s.clone(), &p.with_gamma(gamma))?;
                    match delta_max(&problem, &grid) {
                        Ok(r) => {
                            let name = format!("{}_p{id:04}.json", structure.to_string().replace(':', "-"));
                            fs::write(dir.join(name), serde_json::to_string_pretty(&r).map_err(Error::from)? + "\n")?;
                            let fit = r.fit.as_ref();
                            rows.push(DeltaMaxRow {
                                network: format!("{}{}", spec.topology, spec.n),
                                topology: spec.topology,
                                n: spec.n,
                                structure,
                                gamma,
                                process_id: id,
                                delta_max: r.delta_max,
                                fit_type: fit.map(|f| {
                                    serde_json::to_value(f.kind)
                                        .ok()
                                        .and_then(|v| v.as_str().map(String::from))
                                        .unwrap_or_default()
                                }),
                                a: fit.map(|f| f.a),
                                b: fit.map(|f| f.b),
                                r2: fit.map(|f| f.r2),
                                fp_residual: r.fp_residual,
                            });
                        }
                        Err(e) => {
                            eprintln!("{structure} process {id}: {e}");
                            failed += 1;
                        }
                    }
                }
            }
            let mut csv = Vec::new();
            write_deltamax_csv(&rows, &mut csv)?;
            fs::write(dir.join("deltamax.csv"), csv)?;
            partial(failed)
        }
        Command::Fidelity => {
            let config = effective_config(&cli, StudyKind::Fidelity)?;
            let study = with_pool(&config, || run_fidelity_study(&config))?;
            let path = cli.out.clone().unwrap_or_else(|| config.output.dir.join("fidelity.csv"));
            let mut out = sink(&Some(path))?;
            write_fidelity_csv(&study.rows, &mut out)?;
            out.flush()?;
            for f in &study.failures {
                eprintln!("{} process {}: {}", f.cell, f.process_id, f.error);
            }
            partial(study.failures.len())
        }
        Command::OptimizeControl {
            topology,
            n,
            in_node,
            out_node,
            restarts,
            t_min,
            t_max,
            keep,
        } => {
            let spec = NetworkSpec::<f64>::uncontrolled((*topology).into(), *n);
            let options = ControlOptions {
                t_window: (*t_min, *t_max),
                restarts: *restarts,
                keep: *keep,
                ..ControlOptions::default()
            };
            let search = optimize(&spec, *in_node, *out_node, &options, seed)?;
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("controllers.json"));
            let mut out = sink(&Some(path))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&search.controllers).map_err(Error::from)?)?;
            out.flush()?;
            match search.diagnostic {
                Some(msg) => Err(Failure::Partial(msg)),
                None => Ok(()),
            }
        }
        Command::Study { kind } => {
            let kind = match kind {
                KindArg::Deltamax => StudyKind::Deltamax,
                KindArg::Fidelity => StudyKind::Fidelity,
            };
            let mut config = effective_config(&cli, kind)?;
            config.experiment.kind = kind;
            config.validate()?;
            let dir = config.output.dir.clone();
            let manifest = run_study(&config, &dir)?;
            for f in &manifest.failures {
                eprintln!("{} process {}: {}", f.cell, f.process_id, f.error);
            }
            partial(manifest.failures.len())
        }
        Command::Stats {
            input,
            column,
            group_by,
        } => stats(input, column, group_by, seed, &cli.out),
    }
}

fn partial(failed: usize) -> Outcome {
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Partial(format!("{failed} evaluations failed")))
    }
}

fn with_pool<T: Send>(config: &ExperimentConfig, f: impl FnOnce() -> dephrob::Result<T> + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.experiment.threads)
        .build()
        .map_err(|e| Failure::Internal(e.to_string()))?;
    Ok(pool.install(f)?)
}

fn build_problem(system: &SystemArgs, seed: u64) -> Result<PerturbationProblem<f64>, Failure> {
    let topology: Topology = system.topology.into();
    let mut spec = NetworkSpec::<f64>::uncontrolled(topology, system.n);
    if !system.controls.is_empty() {
        spec = spec.with_controls(system.controls.clone());
    }
    let structure: PerturbationKind = system.structure.parse()?;
    let h = build_hamiltonian(&spec)?;
    let s = build_perturbation(&spec, structure)?;
    if !(system.gamma >= 0.0) {
        return Err(Failure::Invalid("gamma must be >= 0".into()));
    }
    let process: DephasingProcess<f64> = match &system.process {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(Error::from)?
        }
        None => sample_processes(system.n, system.process_index + 1, seed, 1.0)?.remove(system.process_index),
    };
    Ok(PerturbationProblem::new(h, s, &process.with_gamma(system.gamma))?)
}

fn stats(input: &Path, column: &str, group_by: &[String], seed: u64, out: &Option<PathBuf>) -> Outcome {
    let mut reader = csv::Reader::from_path(input).map_err(|e| Failure::Invalid(format!("{}: {e}", input.display())))?;
    let headers = reader.headers().map_err(|e| Failure::Invalid(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Invalid(format!("no column `{name}` in {}", input.display())))
    };
    let value_col = find(column)?;
    let group_cols: Vec<usize> = group_by.iter().map(|g| find(g)).collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Failure::Invalid(e.to_string()))?;
        let key = group_cols.iter().map(|&c| &record[c]).collect::<Vec<_>>().join("|");
        let value = record[value_col].parse::<f64>().unwrap_or(f64::NAN);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(value);
    }
    let mut w = sink(out)?;
    writeln!(w, "group,count,min,q1,median,q3,max,lilliefors_p")?;
    for key in order {
        let values = &groups[&key];
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let p = lilliefors_test(&finite, seed).map(|p| p.to_string()).unwrap_or_default();
        match five_number(values) {
            Some(s) => writeln!(w, "{key},{},{},{},{},{},{},{p}", s.count, s.min, s.q1, s.median, s.q3, s.max)?,
            None => writeln!(w, "{key},0,,,,,,")?,
        }
    }
    w.flush()?;
    Ok(())
}
