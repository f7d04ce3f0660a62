//! Batch studies over networks, perturbation structures, dephasing
//! processes and strengths, with a deterministic on-disk layout:
//! `summary.csv`, `cells/*.json`, `stats.json` and `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{optimize, ControlOptions, Controller};
use crate::deltamax::{delta_max, DeltaMaxConfig, DeltaMaxResult};
use crate::dephasing::{sample_processes, DephasingProcess};
use crate::dynamics::{fidelity, site_state};
use crate::error::{Error, Result};
use crate::problem::PerturbationProblem;
use crate::spin_model::{build_hamiltonian, build_perturbation, NetworkSpec, PerturbationKind, Topology};
use crate::stats::{five_number, pearson, scaling_fit, Distribution5, LillieforsNull, ScalingFit, LILLIEFORS_MIN_SAMPLE, LILLIEFORS_SIMULATIONS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Deltamax,
    Fidelity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: StudyKind,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub topology: Topology,
    pub n: usize,
    #[serde(default = "one")]
    pub coupling: f64,
    /// Diagonal biases; empty means uncontrolled.
    #[serde(default)]
    pub controls: Vec<f64>,
    pub perturbations: Vec<PerturbationKind>,
}

fn one() -> f64 {
    1.0
}

impl NetworkConfig {
    pub fn spec(&self) -> NetworkSpec<f64> {
        NetworkSpec {
            topology: self.topology,
            n: self.n,
            coupling: self.coupling,
            controls: if self.controls.is_empty() {
                vec![0.0; self.n]
            } else {
                self.controls.clone()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DephasingConfig {
    pub count: usize,
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub log10_start: f64,
    pub log10_stop: f64,
    pub count: usize,
    pub r2_threshold: f64,
    pub residual_tolerance: f64,
    /// Perturbation strengths of the fidelity study.
    pub deltas: Vec<f64>,
}

impl GridConfig {
    pub fn deltamax(&self) -> DeltaMaxConfig {
        DeltaMaxConfig {
            log10_start: self.log10_start,
            log10_stop: self.log10_stop,
            count: self.count,
            r2_threshold: self.r2_threshold,
            residual_tolerance: self.residual_tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write gnuplot-ready `.dat` tables.
    #[serde(default)]
    pub gnuplot: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// `controllers.json` to load; when absent, controllers are optimized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(rename = "in")]
    pub in_node: usize,
    #[serde(rename = "out")]
    pub out_node: usize,
    pub search: ControlOptions,
}

impl PartialEq for ControlConfig {
    fn eq(&self, other: &Self) -> bool {
        serde_json::to_value(self).ok() == serde_json::to_value(other).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(deserialize_with = "one_or_many")]
    pub network: Vec<NetworkConfig>,
    pub dephasing: DephasingConfig,
    #[serde(default)]
    pub grid: GridConfig,
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<NetworkConfig>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Either {
        One(NetworkConfig),
        Many(Vec<NetworkConfig>),
    }
    Ok(match Either::deserialize(d)? {
        Either::One(n) => vec![n],
        Either::Many(v) => v,
    })
}

impl Default for GridConfig {
    fn default() -> Self {
        let d = DeltaMaxConfig::default();
        Self {
            log10_start: d.log10_start,
            log10_stop: d.log10_stop,
            count: d.count,
            r2_threshold: d.r2_threshold,
            residual_tolerance: d.residual_tolerance,
            deltas: vec![0.0, 1e-3, 1e-2, 1e-1],
        }
    }
}

impl ExperimentConfig {
    pub fn default_for(kind: StudyKind) -> Self {
        let couplings = |n: usize| (1..n).map(PerturbationKind::Coupling).collect::<Vec<_>>();
        match kind {
            StudyKind::Deltamax => Self {
                experiment: ExperimentSection {
                    kind,
                    seed: 0,
                    threads: 0,
                },
                network: vec![
                    NetworkConfig {
                        topology: Topology::Chain,
                        n: 4,
                        coupling: 1.0,
                        controls: Vec::new(),
                        perturbations: couplings(4),
                    },
                    NetworkConfig {
                        topology: Topology::Ring,
                        n: 4,
                        coupling: 1.0,
                        controls: Vec::new(),
                        perturbations: vec![PerturbationKind::Coupling(1), PerturbationKind::RingClosure],
                    },
                ],
                dephasing: DephasingConfig {
                    count: 100,
                    gamma: vec![1e-3, 10f64.powf(-2.5), 1e-2, 10f64.powf(-1.5), 1e-1],
                },
                grid: GridConfig::default(),
                output: OutputConfig {
                    dir: PathBuf::from("study-deltamax"),
                    gnuplot: false,
                },
                control: None,
            },
            StudyKind::Fidelity => {
                let mut perturbations = couplings(5);
                perturbations.push(PerturbationKind::RingClosure);
                Self {
                    experiment: ExperimentSection {
                        kind,
                        seed: 0,
                        threads: 0,
                    },
                    network: vec![NetworkConfig {
                        topology: Topology::Ring,
                        n: 5,
                        coupling: 1.0,
                        controls: Vec::new(),
                        perturbations,
                    }],
                    dephasing: DephasingConfig {
                        count: 20,
                        gamma: vec![0.0, 1e-3, 1e-2, 1e-1],
                    },
                    grid: GridConfig::default(),
                    output: OutputConfig {
                        dir: PathBuf::from("study-fidelity"),
                        gnuplot: false,
                    },
                    control: Some(ControlConfig {
                        file: None,
                        in_node: 1,
                        out_node: 3,
                        search: ControlOptions {
                            restarts: 400,
                            ..ControlOptions::default()
                        },
                    }),
                }
            }
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.network.is_empty() {
            return bad("at least one [[network]] is required".into());
        }
        for (i, net) in self.network.iter().enumerate() {
            let spec = net.spec();
            spec.validate().map_err(|e| Error::Config(format!("network {i}: {e}")))?;
            if net.perturbations.is_empty() {
                return bad(format!("network {i}: empty perturbation list"));
            }
            for &kind in &net.perturbations {
                build_perturbation(&spec, kind).map_err(|e| Error::Config(format!("network {i}: {e}")))?;
            }
        }
        if self.dephasing.count == 0 {
            return bad("dephasing.count must be >= 1".into());
        }
        if self.dephasing.gamma.is_empty() || self.dephasing.gamma.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return bad("dephasing.gamma must be a non-empty list of finite values >= 0".into());
        }
        self.grid.deltamax().validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.grid.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("grid.deltas must be finite and >= 0".into());
        }
        if let Some(c) = &self.control {
            let n = self.network[0].n;
            if c.in_node == 0 || c.in_node > n || c.out_node == 0 || c.out_node > n {
                return bad(format!("control nodes must lie in 1..={n}"));
            }
            let (lo, hi) = c.search.t_window;
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("control.search.t_window [{lo}, {hi}] must be positive and ordered"));
            }
            if !(0.0..=1.0).contains(&c.search.threshold) {
                return bad("control.search.threshold must lie in [0, 1]".into());
            }
        }
        match self.experiment.kind {
            StudyKind::Fidelity if self.control.is_none() => bad("fidelity study needs a [control] table".into()),
            StudyKind::Fidelity if self.grid.deltas.is_empty() => bad("grid.deltas must not be empty".into()),
            _ => Ok(()),
        }
    }
}

/// Controllers from `control.file`, or optimized on the first network.
pub fn load_or_optimize_controllers(config: &ExperimentConfig) -> Result<Vec<Controller>> {
    let control = config
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("missing [control] table".into()))?;
    if let Some(path) = &control.file {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let controllers: Vec<Controller> = serde_json::from_str(&text)?;
        let n = config.network[0].n;
        if let Some(c) = controllers.iter().find(|c| c.d.len() != n) {
            return Err(Error::Config(format!("controller with {} biases for N = {n}", c.d.len())));
        }
        return Ok(controllers);
    }
    let search = optimize(&config.network[0].spec(), control.in_node, control.out_node, &control.search, config.experiment.seed)?;
    Ok(search.controllers)
}

/// One network under study with a stable identifier.
#[derive(Clone, Debug)]
pub struct StudyNetwork {
    pub id: String,
    pub config: NetworkConfig,
}

fn study_networks(config: &ExperimentConfig) -> Result<Vec<StudyNetwork>> {
    let from_controllers = config.control.as_ref().is_some_and(|c| c.file.is_some());
    if config.experiment.kind == StudyKind::Fidelity || from_controllers {
        let template = &config.network[0];
        return Ok(load_or_optimize_controllers(config)?
            .into_iter()
            .enumerate()
            .map(|(i, c)| StudyNetwork {
                id: format!("c{i}"),
                config: NetworkConfig {
                    controls: c.d,
                    ..template.clone()
                },
            })
            .collect());
    }
    Ok(config
        .network
        .iter()
        .enumerate()
        .map(|(i, n)| StudyNetwork {
            id: format!("{}{}_{i}", n.topology, n.n),
            config: n.clone(),
        })
        .collect())
}

/// Unit-strength processes per network size, sampled once per study.
fn processes_by_size(networks: &[StudyNetwork], config: &ExperimentConfig) -> Result<BTreeMap<usize, Vec<DephasingProcess<f64>>>> {
    let mut out = BTreeMap::new();
    for net in networks {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry(net.config.n) {
            e.insert(sample_processes(net.config.n, config.dephasing.count, config.experiment.seed, 1.0)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub cell: String,
    pub process_id: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaMaxRow {
    pub network: String,
    pub topology: Topology,
    pub n: usize,
    pub structure: PerturbationKind,
    pub gamma: f64,
    pub process_id: usize,
    pub delta_max: Option<f64>,
    pub fit_type: Option<String>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub r2: Option<f64>,
    pub fp_residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProcessResult {
    pub process_id: usize,
    #[serde(flatten)]
    pub result: DeltaMaxResult<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeltaMaxCell {
    pub key: String,
    pub network: String,
    pub structure: PerturbationKind,
    pub gamma: f64,
    pub results: Vec<ProcessResult>,
    pub summary: Option<Distribution5>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupStats {
    pub network: String,
    pub structure: PerturbationKind,
    pub gamma: f64,
    pub summary: Option<Distribution5>,
    /// Lilliefors p-value; absent with fewer than 20 finite values or zero variance.
    pub lilliefors_p: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingStats {
    pub network: String,
    pub structure: PerturbationKind,
    pub fit: ScalingFit,
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationStats {
    pub network: String,
    pub gamma: f64,
    pub a: PerturbationKind,
    pub b: PerturbationKind,
    pub pearson: f64,
}

/// Distribution of `δ_max` across networks for one fixed process.
#[derive(Clone, Debug, Serialize)]
pub struct AcrossNetworkStats {
    pub process_id: usize,
    pub structure: PerturbationKind,
    pub gamma: f64,
    pub summary: Option<Distribution5>,
    pub lilliefors_p: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct StatSummary {
    pub groups: Vec<GroupStats>,
    pub scaling: Vec<ScalingStats>,
    pub correlations: Vec<CorrelationStats>,
    pub across_networks: Vec<AcrossNetworkStats>,
}

#[derive(Clone, Debug)]
pub struct DeltaMaxStudy {
    pub rows: Vec<DeltaMaxRow>,
    pub cells: Vec<DeltaMaxCell>,
    pub stats: StatSummary,
    pub failures: Vec<Failure>,
}

fn cell_key(network: &str, structure: PerturbationKind, gamma_index: usize) -> String {
    format!("{network}_{}_g{gamma_index}", structure.to_string().replace(':', "-"))
}

struct LillieforsCache {
    seed: u64,
    by_size: BTreeMap<usize, LillieforsNull>,
}

impl LillieforsCache {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            by_size: BTreeMap::new(),
        }
    }

    fn p_value(&mut self, values: &[f64]) -> Option<f64> {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if finite.len() < LILLIEFORS_MIN_SAMPLE {
            return None;
        }
        let seed = self.seed;
        let null = self
            .by_size
            .entry(finite.len())
            .or_insert_with(|| LillieforsNull::new(finite.len(), LILLIEFORS_SIMULATIONS, seed).expect("size checked"));
        null.p_value(&finite).ok()
    }
}

pub fn run_deltamax_study(config: &ExperimentConfig) -> Result<DeltaMaxStudy> {
    config.validate()?;
    let networks = study_networks(config)?;
    let processes = processes_by_size(&networks, config)?;
    let grid = config.grid.deltamax();

    struct Task<'a> {
        net: &'a StudyNetwork,
        structure: PerturbationKind,
        gamma_index: usize,
        gamma: f64,
        process_id: usize,
    }
    let mut tasks = Vec::new();
    for net in &networks {
        for &structure in &net.config.perturbations {
            for (gamma_index, &gamma) in config.dephasing.gamma.iter().enumerate() {
                for process_id in 0..config.dephasing.count {
                    tasks.push(Task {
                        net,
                        structure,
                        gamma_index,
                        gamma,
                        process_id,
                    });
                }
            }
        }
    }
    let outcomes: Vec<Result<DeltaMaxResult<f64>>> = tasks
        .par_iter()
        .map(|t| {
            let spec = t.net.config.spec();
            let h = build_hamiltonian(&spec)?;
            let s = build_perturbation(&spec, t.structure)?;
            let process = processes[&spec.n][t.process_id].with_gamma(t.gamma);
            let problem = PerturbationProblem::new(h, s, &process)?;
            delta_max(&problem, &grid)
        })
        .collect();

    let mut rows = Vec::new();
    let mut cells: BTreeMap<String, DeltaMaxCell> = BTreeMap::new();
    let mut order = Vec::new();
    let mut failures = Vec::new();
    for (t, outcome) in tasks.iter().zip(outcomes) {
        let key = cell_key(&t.net.id, t.structure, t.gamma_index);
        let cell = cells.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            DeltaMaxCell {
                key: key.clone(),
                network: t.net.id.clone(),
                structure: t.structure,
                gamma: t.gamma,
                results: Vec::new(),
                summary: None,
            }
        });
        match outcome {
            Ok(result) => {
                let fit = result.fit.as_ref();
                rows.push(DeltaMaxRow {
                    network: t.net.id.clone(),
                    topology: t.net.config.topology,
                    n: t.net.config.n,
                    structure: t.structure,
                    gamma: t.gamma,
                    process_id: t.process_id,
                    delta_max: result.delta_max,
                    fit_type: fit.map(|f| serde_json::to_value(f.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()),
                    a: fit.map(|f| f.a),
                    b: fit.map(|f| f.b),
                    r2: fit.map(|f| f.r2),
                    fp_residual: result.fp_residual,
                });
                cell.results.push(ProcessResult {
                    process_id: t.process_id,
                    result,
                });
            }
            Err(e) => failures.push(Failure {
                cell: key,
                process_id: t.process_id,
                error: e.to_string(),
            }),
        }
    }
    let mut cells: Vec<DeltaMaxCell> = order.into_iter().map(|k| cells.remove(&k).expect("cell recorded")).collect();
    for cell in &mut cells {
        let values: Vec<f64> = cell.results.iter().filter_map(|r| r.result.delta_max).collect();
        cell.summary = five_number(&values);
    }
    let stats = deltamax_stats(config, &networks, &cells);
    Ok(DeltaMaxStudy {
        rows,
        cells,
        stats,
        failures,
    })
}

/// `δ_max` by process id, NaN where missing.
fn by_process(cell: &DeltaMaxCell, count: usize) -> Vec<f64> {
    let mut v = vec![f64::NAN; count];
    for r in &cell.results {
        v[r.process_id] = r.result.delta_max.unwrap_or(f64::NAN);
    }
    v
}

fn deltamax_stats(config: &ExperimentConfig, networks: &[StudyNetwork], cells: &[DeltaMaxCell]) -> StatSummary {
    let count = config.dephasing.count;
    let mut lilliefors = LillieforsCache::new(config.experiment.seed);
    let mut stats = StatSummary::default();
    let lookup: BTreeMap<(String, String, usize), &DeltaMaxCell> = cells
        .iter()
        .map(|c| {
            let gi = config.dephasing.gamma.iter().position(|g| *g == c.gamma).unwrap_or(0);
            ((c.network.clone(), c.structure.to_string(), gi), c)
        })
        .collect();
    for cell in cells {
        stats.groups.push(GroupStats {
            network: cell.network.clone(),
            structure: cell.structure,
            gamma: cell.gamma,
            summary: cell.summary.clone(),
            lilliefors_p: lilliefors.p_value(&by_process(cell, count)),
        });
    }
    for net in networks {
        for &structure in &net.config.perturbations {
            let (gammas, medians): (Vec<f64>, Vec<f64>) = config
                .dephasing
                .gamma
                .iter()
                .enumerate()
                .filter(|(_, g)| **g > 0.0)
                .filter_map(|(gi, g)| {
                    let cell = lookup.get(&(net.id.clone(), structure.to_string(), gi))?;
                    Some((*g, cell.summary.as_ref()?.median))
                })
                .unzip();
            if let Ok(fit) = scaling_fit(&gammas, &medians) {
                stats.scaling.push(ScalingStats {
                    network: net.id.clone(),
                    structure,
                    fit,
                });
            }
        }
        for (gi, &gamma) in config.dephasing.gamma.iter().enumerate() {
            let p = &net.config.perturbations;
            for i in 0..p.len() {
                for j in i + 1..p.len() {
                    let (Some(a), Some(b)) = (
                        lookup.get(&(net.id.clone(), p[i].to_string(), gi)),
                        lookup.get(&(net.id.clone(), p[j].to_string(), gi)),
                    ) else {
                        continue;
                    };
                    let (x, y): (Vec<f64>, Vec<f64>) = by_process(a, count)
                        .into_iter()
                        .zip(by_process(b, count))
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .unzip();
                    if let Ok(r) = pearson(&x, &y) {
                        stats.correlations.push(CorrelationStats {
                            network: net.id.clone(),
                            gamma,
                            a: p[i],
                            b: p[j],
                            pearson: r,
                        });
                    }
                }
            }
        }
    }
    if networks.len() >= LILLIEFORS_MIN_SAMPLE {
        let template = &networks[0].config;
        for &structure in &template.perturbations {
            for (gi, &gamma) in config.dephasing.gamma.iter().enumerate() {
                let columns: Vec<Vec<f64>> = networks
                    .iter()
                    .filter_map(|net| lookup.get(&(net.id.clone(), structure.to_string(), gi)))
                    .map(|c| by_process(c, count))
                    .collect();
                for process_id in 0..count {
                    let values: Vec<f64> = columns.iter().map(|c| c[process_id]).collect();
                    stats.across_networks.push(AcrossNetworkStats {
                        process_id,
                        structure,
                        gamma,
                        summary: five_number(&values),
                        lilliefors_p: lilliefors.p_value(&values),
                    });
                }
            }
        }
    }
    stats
}

#[derive(Clone, Debug, Serialize)]
pub struct FidelityRow {
    pub controller_id: usize,
    pub process_id: usize,
    pub gamma: f64,
    pub delta: f64,
    pub structure: PerturbationKind,
    pub tf: f64,
    pub fidelity: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FidelityCell {
    pub key: String,
    pub gamma: f64,
    pub delta: f64,
    pub errors: Option<Distribution5>,
    pub by_structure: BTreeMap<String, Option<Distribution5>>,
}

#[derive(Clone, Debug)]
pub struct FidelityStudy {
    pub controllers: Vec<Controller>,
    pub rows: Vec<FidelityRow>,
    pub cells: Vec<FidelityCell>,
    pub failures: Vec<Failure>,
}

pub fn run_fidelity_study(config: &ExperimentConfig) -> Result<FidelityStudy> {
    config.validate()?;
    let control = config
        .control
        .as_ref()
        .ok_or_else(|| Error::Config("fidelity study needs a [control] table".into()))?;
    let controllers = load_or_optimize_controllers(config)?;
    if controllers.is_empty() {
        return Err(Error::NoController("the fidelity study needs at least one".into()));
    }
    let template = &config.network[0];
    let n = template.n;
    let processes = sample_processes::<f64>(n, config.dephasing.count, config.experiment.seed, 1.0)?;
    let (rho_in, rho_out) = (site_state::<f64>(n, control.in_node - 1), site_state::<f64>(n, control.out_node - 1));

    struct Task {
        controller_id: usize,
        structure: PerturbationKind,
        gamma: f64,
        process_id: usize,
    }
    let mut tasks = Vec::new();
    for gamma in &config.dephasing.gamma {
        for controller_id in 0..controllers.len() {
            for &structure in &template.perturbations {
                for process_id in 0..config.dephasing.count {
                    tasks.push(Task {
                        controller_id,
                        structure,
                        gamma: *gamma,
                        process_id,
                    });
                }
            }
        }
    }
    let deltas = &config.grid.deltas;
    // one task covers every δ so branches are traced once per problem
    let outcomes: Vec<Vec<Result<FidelityRow>>> = tasks
        .par_iter()
        .map(|t| {
            let c = &controllers[t.controller_id];
            let setup = || -> Result<PerturbationProblem<f64>> {
                let spec = c.spec(template.topology, template.coupling);
                let h = build_hamiltonian(&spec)?;
                let s = build_perturbation(&spec, t.structure)?;
                PerturbationProblem::new(h, s, &processes[t.process_id].with_gamma(t.gamma))
            };
            let problem = match setup() {
                Ok(p) => p,
                Err(e) => return deltas.iter().map(|_| Err(Error::InvalidSpec(e.to_string()))).collect(),
            };
            deltas
                .iter()
                .map(|&delta| {
                    let a = if delta == 0.0 {
                        problem.nominal().matrix.clone()
                    } else {
                        problem.perturbed_at(delta)?.generator.matrix
                    };
                    let f = fidelity(&a, problem.basis(), &rho_in, &rho_out, c.tf)?;
                    Ok(FidelityRow {
                        controller_id: t.controller_id,
                        process_id: t.process_id,
                        gamma: t.gamma,
                        delta,
                        structure: t.structure,
                        tf: c.tf,
                        fidelity: f.fidelity,
                        error: f.error,
                    })
                })
                .collect()
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut grouped: BTreeMap<(usize, usize), Vec<(PerturbationKind, f64)>> = BTreeMap::new();
    for (t, per_delta) in tasks.iter().zip(outcomes) {
        let gi = config.dephasing.gamma.iter().position(|g| *g == t.gamma).unwrap_or(0);
        for (di, outcome) in per_delta.into_iter().enumerate() {
            match outcome {
                Ok(row) => {
                    grouped.entry((gi, di)).or_default().push((row.structure, row.error));
                    rows.push(row);
                }
                Err(e) => failures.push(Failure {
                    cell: format!("g{gi}_d{di}_c{}_{}", t.controller_id, t.structure.to_string().replace(':', "-")),
                    process_id: t.process_id,
                    error: e.to_string(),
                }),
            }
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &FidelityRow| {
            (
                config.dephasing.gamma.iter().position(|g| *g == r.gamma),
                deltas.iter().position(|d| *d == r.delta),
                r.controller_id,
                template.perturbations.iter().position(|s| *s == r.structure),
                r.process_id,
            )
        };
        key(a).cmp(&key(b))
    });
    let mut cells = Vec::new();
    for (gi, &gamma) in config.dephasing.gamma.iter().enumerate() {
        for (di, &delta) in deltas.iter().enumerate() {
            let entries = grouped.remove(&(gi, di)).unwrap_or_default();
            let errors: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let by_structure = template
                .perturbations
                .iter()
                .map(|s| {
                    let v: Vec<f64> = entries.iter().filter(|e| e.0 == *s).map(|e| e.1).collect();
                    (s.to_string(), five_number(&v))
                })
                .collect();
            cells.push(FidelityCell {
                key: format!("g{gi}_d{di}"),
                gamma,
                delta,
                errors: five_number(&errors),
                by_structure,
            });
        }
    }
    Ok(FidelityStudy {
        controllers,
        rows,
        cells,
        failures,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_deltamax_csv<W: Write>(rows: &[DeltaMaxRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "network,topology,n,structure,gamma,process_id,delta_max,fit_type,a,b,r2,fp_residual")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.network,
            r.topology,
            r.n,
            r.structure,
            r.gamma,
            r.process_id,
            opt(r.delta_max),
            r.fit_type.clone().unwrap_or_default(),
            opt(r.a),
            opt(r.b),
            opt(r.r2),
            opt(r.fp_residual)
        )?;
    }
    Ok(())
}

pub fn write_fidelity_csv<W: Write>(rows: &[FidelityRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "controller_id,process_id,gamma,delta,structure,tf,fidelity,error")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.controller_id, r.process_id, r.gamma, r.delta, r.structure, r.tf, r.fidelity, r.error
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub kind: StudyKind,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub cells: usize,
    pub rows: usize,
    pub expected_rows: usize,
    pub failures: Vec<Failure>,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<PathBuf> {
    let cells = dir.join("cells");
    fs::create_dir_all(&cells)?;
    Ok(cells)
}

pub fn write_deltamax_study(study: &DeltaMaxStudy, config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let cells_dir = prepare_dir(dir)?;
    let mut csv = Vec::new();
    write_deltamax_csv(&study.rows, &mut csv)?;
    fs::write(dir.join("summary.csv"), csv)?;
    for cell in &study.cells {
        write_json(&cells_dir.join(format!("{}.json", cell.key)), cell)?;
    }
    write_json(&dir.join("stats.json"), &study.stats)?;
    if config.output.gnuplot {
        let mut dat = String::from("# network structure gamma min q1 median q3 max\n");
        for cell in &study.cells {
            if let Some(s) = &cell.summary {
                dat += &format!(
                    "{} {} {} {} {} {} {} {}\n",
                    cell.network, cell.structure, cell.gamma, s.min, s.q1, s.median, s.q3, s.max
                );
            }
        }
        fs::write(dir.join("deltamax.dat"), dat)?;
    }
    let manifest = Manifest {
        kind: StudyKind::Deltamax,
        config_hash: config.hash(),
        seed: config.experiment.seed,
        version: VERSION.to_string(),
        cells: study.cells.len(),
        rows: study.rows.len(),
        expected_rows: study.rows.len() + study.failures.len(),
        failures: study.failures.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_fidelity_study(study: &FidelityStudy, config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let cells_dir = prepare_dir(dir)?;
    let mut csv = Vec::new();
    write_fidelity_csv(&study.rows, &mut csv)?;
    fs::write(dir.join("summary.csv"), csv)?;
    for cell in &study.cells {
        write_json(&cells_dir.join(format!("{}.json", cell.key)), cell)?;
    }
    write_json(&dir.join("controllers.json"), &study.controllers)?;
    if config.output.gnuplot {
        let mut dat = String::from("# gamma delta min q1 median q3 max\n");
        for cell in &study.cells {
            if let Some(s) = &cell.errors {
                dat += &format!("{} {} {} {} {} {} {}\n", cell.gamma, cell.delta, s.min, s.q1, s.median, s.q3, s.max);
            }
        }
        fs::write(dir.join("fidelity.dat"), dat)?;
    }
    let manifest = Manifest {
        kind: StudyKind::Fidelity,
        config_hash: config.hash(),
        seed: config.experiment.seed,
        version: VERSION.to_string(),
        cells: study.cells.len(),
        rows: study.rows.len(),
        expected_rows: study.rows.len() + study.failures.len(),
        failures: study.failures.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Runs the study named in the config inside a pool of `threads` workers
/// and writes it to `dir`.
pub fn run_study(config: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.experiment.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| match config.experiment.kind {
        StudyKind::Deltamax => write_deltamax_study(&run_deltamax_study(config)?, config, dir),
        StudyKind::Fidelity => write_fidelity_study(&run_fidelity_study(config)?, config, dir),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_deltamax() -> ExperimentConfig {
        let mut c = ExperimentConfig::default_for(StudyKind::Deltamax);
        c.dephasing.count = 3;
        c.dephasing.gamma = vec![1e-3, 1e-2, 1e-1];
        c.grid.count = 20;
        c.network.truncate(1);
        c.network[0].perturbations = vec![PerturbationKind::Coupling(1), PerturbationKind::Coupling(3)];
        c
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        for kind in [StudyKind::Deltamax, StudyKind::Fidelity] {
            let c = ExperimentConfig::default_for(kind);
            let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn single_network_table_is_accepted() {
        let text = r#"
[experiment]
kind = "deltamax"
seed = 1
threads = 1

[network]
topology = "ring"
n = 4
perturbations = ["coupling:1", "ring_closure"]

[dephasing]
count = 5
gamma = [0.01]

[grid]
log10_start = -6.0
log10_stop = 0.0
count = 50
r2_threshold = 0.995
residual_tolerance = 0.01
deltas = [0.0, 0.1]

[output]
dir = "out"
gnuplot = false
"#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.network.len(), 1);
        assert_eq!(c.network[0].coupling, 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = small_deltamax();
        c.network[0].perturbations = vec![PerturbationKind::RingClosure];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_deltamax();
        c.dephasing.gamma = vec![-1.0];
        assert!(c.validate().is_err());
        let mut c = small_deltamax();
        c.grid.count = 3;
        assert!(c.validate().is_err());
        let text = small_deltamax().to_toml().replace("[output]", "[output]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let mut c = ExperimentConfig::default_for(StudyKind::Fidelity);
        c.control.as_mut().unwrap().out_node = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn deltamax_study_is_complete_and_symmetric() {
        let c = small_deltamax();
        let study = run_deltamax_study(&c).unwrap();
        assert_eq!(study.rows.len() + study.failures.len(), 2 * 3 * 3);
        assert_eq!(study.cells.len(), 6);
        let corr = &study.stats.correlations;
        assert_eq!(corr.len(), 3);
        assert!(corr.iter().all(|r| r.pearson > 0.9999));
        assert_eq!(study.stats.scaling.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let m = write_deltamax_study(&study, &c, dir.path()).unwrap();
        assert_eq!(m.rows, 18);
        let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(csv.lines().count(), 19);
        assert_eq!(dir.path().join("cells").read_dir().unwrap().count(), 6);
        let scaling = &study.stats.scaling[0].fit;
        assert!((scaling.exponent - 0.5).abs() < 0.02);
    }

    #[test]
    fn fidelity_study_with_controller_file() {
        let dir = tempfile::tempdir().unwrap();
        let controllers = vec![Controller {
            d: vec![0.0, 0.0],
            tf: std::f64::consts::FRAC_PI_2,
            f0: 1.0,
            in_node: 1,
            out_node: 2,
            seed: 0,
            iterations: 0,
        }];
        let file = dir.path().join("controllers.json");
        fs::write(&file, serde_json::to_string(&controllers).unwrap()).unwrap();
        let mut c = ExperimentConfig::default_for(StudyKind::Fidelity);
        c.network = vec![NetworkConfig {
            topology: Topology::Chain,
            n: 2,
            coupling: 1.0,
            controls: Vec::new(),
            perturbations: vec![PerturbationKind::Coupling(1), PerturbationKind::Diagonal(1)],
        }];
        c.dephasing.count = 2;
        let control = c.control.as_mut().unwrap();
        control.file = Some(file);
        control.out_node = 2;
        let study = run_fidelity_study(&c).unwrap();
        assert!(study.failures.is_empty());
        assert_eq!(study.rows.len(), 4 * 4 * 2 * 2);
        let closed = study.rows.iter().find(|r| r.gamma == 0.0 && r.delta == 0.0).unwrap();
        assert!(closed.error.abs() < 1e-12);
        let mut csv = Vec::new();
        write_fidelity_csv(&study.rows, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("controller_id,process_id,gamma,delta,structure,tf,fidelity,error\n"));
    }
}
