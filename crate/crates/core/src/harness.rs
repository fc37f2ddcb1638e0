//! Experiment orchestration: multi-seed runs over agents and variants,
//! metrics, subsample sweeps and report emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{
    policy_value, train_agent, AgentKind, PolicyParams, Trace, TrainConfig, Variant,
};
use crate::env::{generate_dataset, optimal_value, Dataset, State};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Existing JSONL dataset; generated from `n` and `seed` when absent.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    100_000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            path: None,
            n: default_n(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match &self.path {
            Some(p) => Dataset::load(p),
            None => generate_dataset(self.n, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub agent: AgentKind,
    /// Only meaningful for the constraint-aware agent.
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::Full
}

impl AgentSpec {
    pub fn new(agent: AgentKind, variant: Variant) -> Self {
        AgentSpec { agent, variant }
    }

    pub fn variant_label(&self) -> &'static str {
        match self.agent {
            AgentKind::ConstraintAware => self.variant.name(),
            _ => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default = "default_eval_n")]
    pub n_states: usize,
    #[serde(default = "default_eval_seed")]
    pub seed: u64,
    /// Fresh states used for the residual at convergence.
    #[serde(default = "default_eval_n")]
    pub residual_states: usize,
}

fn default_eval_n() -> usize {
    10_000
}

fn default_eval_seed() -> u64 {
    1_000_003
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            n_states: default_eval_n(),
            seed: default_eval_seed(),
            residual_states: default_eval_n(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub agents: Vec<AgentSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_fractions")]
    pub subsample_fractions: Vec<f64>,
    #[serde(default)]
    pub eval_states: EvalSpec,
    /// Base training configuration; `seed` and `variant` are set per cell.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_fractions() -> Vec<f64> {
    vec![1.0, 0.25, 0.0625]
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::config("at least one agent is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.subsample_fractions.is_empty() {
            return Err(Error::config("at least one subsample fraction is required"));
        }
        for f in &self.subsample_fractions {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::config(format!("fraction {f} outside (0, 1]")));
            }
        }
        if self.subsample_fractions.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::config(
                "subsample_fractions must be strictly descending",
            ));
        }
        if self.eval_states.n_states == 0 || self.eval_states.residual_states == 0 {
            return Err(Error::config("evaluation state counts must be >= 1"));
        }
        if self.dataset.path.is_none() && self.dataset.n == 0 {
            return Err(Error::config("dataset.n must be >= 1"));
        }
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub agent: String,
    pub variant: String,
    pub fraction: f64,
    pub seed: u64,
    #[serde(deserialize_with = "nan_from_null")]
    pub return_norm: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub regret_norm: f64,
    pub monotonicity_errors: u64,
    #[serde(deserialize_with = "nan_from_null")]
    pub residual_at_convergence: f64,
    pub wallclock_seconds: f64,
    pub config_hash: String,
    /// Empty on success; the abort reason otherwise.
    #[serde(default)]
    pub error: String,
}

/// JSON has no NaN: failed runs write `null` for their metrics.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl MetricsRecord {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }

    /// Record with the wallclock field zeroed, for determinism comparisons.
    pub fn without_wallclock(&self) -> MetricsRecord {
        MetricsRecord {
            wallclock_seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Exact expected per-step reward of `policy` averaged over `n_states`
/// sampled states, and the mean gap to the optimal value on the same states.
///
/// Both are raw per-step quantities, so `return + regret` equals the mean
/// optimal value on the sampled states.
pub fn evaluate_policy(policy: &PolicyParams, n_states: usize, seed: u64) -> Result<(f64, f64)> {
    if n_states == 0 {
        return Err(Error::domain("n_states must be >= 1"));
    }
    let states = evaluation_states(n_states, seed);
    let mut ret = 0.0;
    let mut regret = 0.0;
    for s in &states {
        let v = policy_value(policy, s);
        ret += v;
        regret += optimal_value(s) - v;
    }
    let n = n_states as f64;
    Ok((ret / n, regret / n))
}

pub fn evaluation_states(n: usize, seed: u64) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| State::sample(&mut rng)).collect()
}

pub fn mean_optimal_value(n: usize, seed: u64) -> f64 {
    evaluation_states(n, seed)
        .iter()
        .map(optimal_value)
        .sum::<f64>()
        / n as f64
}

/// One training cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub agent: AgentSpec,
    pub fraction: f64,
    pub seed: u64,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
}

impl Cell {
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("cell serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn label(&self) -> String {
        format!(
            "{}_{}_f{}_s{}",
            self.agent.agent.name(),
            self.agent.variant_label().replace('-', "none"),
            self.fraction,
            self.seed
        )
    }
}

pub fn cells(cfg: &ExperimentConfig, fractions: &[f64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &fraction in fractions {
        for agent in &cfg.agents {
            for &seed in &cfg.seeds {
                let mut train = cfg.train.clone();
                train.seed = seed;
                train.variant = agent.variant;
                out.push(Cell {
                    agent: agent.clone(),
                    fraction,
                    seed,
                    train,
                    dataset: cfg.dataset.clone(),
                });
            }
        }
    }
    out
}

/// Result of one cell: the record and, when training finished, the trace.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub record: MetricsRecord,
    pub trace: Trace,
    pub agent: Option<crate::agents::TrainedAgent>,
}

fn run_cell(cell: &Cell, data: &Dataset, eval: &EvalSpec) -> CellOutcome {
    let started = Instant::now();
    let hash = cell.config_hash();
    let mut record = MetricsRecord {
        agent: cell.agent.agent.name().to_string(),
        variant: cell.agent.variant_label().to_string(),
        fraction: cell.fraction,
        seed: cell.seed,
        return_norm: f64::NAN,
        regret_norm: f64::NAN,
        monotonicity_errors: 0,
        residual_at_convergence: f64::NAN,
        wallclock_seconds: 0.0,
        config_hash: hash,
        error: String::new(),
    };
    let result = train_agent(cell.agent.agent, data, &cell.train);
    let (trace, agent) = match result {
        Ok(agent) => {
            match evaluate_policy(&agent.policy, eval.n_states, eval.seed) {
                Ok((r, g)) => {
                    record.return_norm = r;
                    record.regret_norm = g;
                }
                Err(e) => record.error = e.to_string(),
            }
            record.monotonicity_errors = agent.monotonicity_errors() as u64;
            record.residual_at_convergence = agent.residual_at_convergence(
                cell.train.gamma,
                eval.residual_states,
                eval.seed ^ 1,
            );
            (agent.trace.clone(), Some(agent))
        }
        Err(abort) => {
            record.error = abort.error.to_string();
            (abort.trace, None)
        }
    };
    record.wallclock_seconds = started.elapsed().as_secs_f64();
    CellOutcome {
        cell: cell.clone(),
        record,
        trace,
        agent,
    }
}

/// Trains every cell for the given fractions. Cells run in parallel; output
/// order follows `(fraction, agent, seed)` regardless of scheduling.
pub fn run_cells(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<CellOutcome>> {
    cfg.validate()?;
    let full = cfg.dataset.load()?;
    let mut subsets = BTreeMap::new();
    for &f in fractions {
        subsets.insert(f.to_bits(), full.subsample(f, cfg.dataset.seed)?);
    }
    let cells = cells(cfg, fractions);
    Ok(cells
        .par_iter()
        .map(|c| run_cell(c, &subsets[&c.fraction.to_bits()], &cfg.eval_states))
        .collect())
}

/// One record per (agent, variant, seed) on the full dataset.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_cells(cfg, &[1.0])?
        .into_iter()
        .map(|o| o.record)
        .collect())
}

/// One record per (agent, variant, fraction, seed) over the configured fractions.
pub fn subsample_sweep(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    Ok(run_cells(cfg, &cfg.subsample_fractions)?
        .into_iter()
        .map(|o| o.record)
        .collect())
}

/// Writes records, traces, checkpoints and aggregates under `dir`.
pub fn write_outcomes(outcomes: &[CellOutcome], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("traces"))?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    let records: Vec<MetricsRecord> = outcomes.iter().map(|o| o.record.clone()).collect();
    write_records(&records, &dir.join("records.jsonl"))?;
    for o in outcomes {
        let label = o.cell.label();
        o.trace
            .save_csv(&dir.join("traces").join(format!("{label}.csv")))?;
        if let Some(agent) = &o.agent {
            let ck = dir.join("checkpoints");
            agent
                .critic
                .theta
                .save(&ck.join(format!("{label}.critic.bin")), o.cell.seed)?;
            agent
                .policy
                .phi
                .save(&ck.join(format!("{label}.policy.bin")), o.cell.seed)?;
        }
    }
    // a group where every run aborted has no aggregate; `report` rejects it
    if let Ok(agg) = aggregate(&records) {
        fs::write(dir.join("aggregate.csv"), aggregate_csv(&agg))?;
    }
    Ok(())
}

pub fn write_records(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub agent: String,
    pub variant: String,
    pub fraction: f64,
    pub n_seeds: usize,
    pub n_failed: usize,
    pub return_norm: MeanStd,
    pub regret_norm: MeanStd,
    pub monotonicity_errors: MeanStd,
    pub residual_at_convergence: MeanStd,
}

/// Mean and standard deviation over seeds per (agent, variant, fraction),
/// in order of first appearance. Failed records are counted but excluded.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(Error::domain("no records to aggregate"));
    }
    let mut order: Vec<(String, String, u64)> = Vec::new();
    let mut groups: BTreeMap<(String, String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let key = (r.agent.clone(), r.variant.clone(), r.fraction.to_bits());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in order {
        let rs = &groups[&key];
        let ok: Vec<&&MetricsRecord> = rs.iter().filter(|r| !r.failed()).collect();
        if ok.is_empty() {
            return Err(Error::domain(format!(
                "every run failed for {} / {} at fraction {}",
                key.0,
                key.1,
                f64::from_bits(key.2)
            )));
        }
        let col = |f: &dyn Fn(&MetricsRecord) -> f64| {
            MeanStd::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
        };
        out.push(AggregateRow {
            agent: key.0.clone(),
            variant: key.1.clone(),
            fraction: f64::from_bits(key.2),
            n_seeds: ok.len(),
            n_failed: rs.len() - ok.len(),
            return_norm: col(&|r| r.return_norm),
            regret_norm: col(&|r| r.regret_norm),
            monotonicity_errors: col(&|r| r.monotonicity_errors as f64),
            residual_at_convergence: col(&|r| r.residual_at_convergence),
        });
    }
    Ok(out)
}

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(
        "agent,variant,fraction,n_seeds,n_failed,return_mean,return_std,regret_mean,regret_std,\
         errors_mean,errors_std,residual_mean,residual_std\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1},{:.1},{:.6},{:.6}",
            r.agent,
            r.variant,
            r.fraction,
            r.n_seeds,
            r.n_failed,
            r.return_norm.mean,
            r.return_norm.std,
            r.regret_norm.mean,
            r.regret_norm.std,
            r.monotonicity_errors.mean,
            r.monotonicity_errors.std,
            r.residual_at_convergence.mean,
            r.residual_at_convergence.std
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Csv,
}

fn pm(m: &MeanStd, digits: usize) -> String {
    format!("{:.*} ± {:.*}", digits, m.mean, digits, m.std)
}

/// Renders the comparison and ablation tables.
///
/// The comparison table holds every non-ablation agent row (the
/// constraint-aware agent only in its `Full` variant); the ablation table
/// holds every constraint-aware variant. One table pair per fraction.
pub fn render_markdown(records: &[MetricsRecord]) -> Result<String> {
    let rows = aggregate(records)?;
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(|a, b| b.partial_cmp(a).expect("finite fractions"));
    fractions.dedup();
    let mut s = String::new();
    for f in fractions {
        let here: Vec<&AggregateRow> = rows.iter().filter(|r| r.fraction == f).collect();
        let main: Vec<&&AggregateRow> = here
            .iter()
            .filter(|r| r.agent != "ours" || r.variant == "Full")
            .collect();
        let ablation: Vec<&&AggregateRow> = here.iter().filter(|r| r.agent == "ours").collect();
        let _ = writeln!(s, "## Data fraction {f}\n");
        if !main.is_empty() {
            let _ = writeln!(
                s,
                "| Agent | Return | Regret | Monotonicity errors | Seeds |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|");
            for r in &main {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {}{} |",
                    r.agent,
                    pm(&r.return_norm, 4),
                    pm(&r.regret_norm, 4),
                    pm(&r.monotonicity_errors, 1),
                    r.n_seeds,
                    failed_note(r.n_failed)
                );
            }
            let _ = writeln!(s);
        }
        if ablation.len() > 1 {
            let _ = writeln!(
                s,
                "| Variant | Return | Monotonicity errors | Residual at conv. | Seeds |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|");
            for r in &ablation {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {}{} |",
                    r.variant,
                    pm(&r.return_norm, 4),
                    pm(&r.monotonicity_errors, 1),
                    pm(&r.residual_at_convergence, 4),
                    r.n_seeds,
                    failed_note(r.n_failed)
                );
            }
            let _ = writeln!(s);
        }
    }
    Ok(s)
}

fn failed_note(n: usize) -> String {
    if n == 0 {
        String::new()
    } else {
        format!(" ({n} failed)")
    }
}

/// Step-vs-metric series from trace files, one CSV per metric:
/// `run,step,value` for every row where the metric is present.
pub fn plot_data(traces: &[(String, PathBuf)]) -> Result<BTreeMap<&'static str, String>> {
    let metrics = [
        ("bellman_residual", 1usize),
        ("c_value", 2),
        ("lambda", 3),
        ("eval_return", 4),
        ("monotonicity_errors", 5),
    ];
    let mut out: BTreeMap<&'static str, String> = metrics
        .iter()
        .map(|(m, _)| (*m, String::from("run,step,value\n")))
        .collect();
    for (run, path) in traces {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == Trace::HEADER => {}
            _ => {
                return Err(Error::Format(format!(
                    "{} is not a trace file",
                    path.display()
                )))
            }
        }
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Format(format!(
                    "bad trace row in {}",
                    path.display()
                )));
            }
            for (m, i) in &metrics {
                if !cols[*i].is_empty() {
                    let buf = out.get_mut(m).expect("metric");
                    let _ = writeln!(buf, "{run},{},{}", cols[0], cols[*i]);
                }
            }
        }
    }
    Ok(out)
}

/// Writes the report for `records` into `dir` and returns the written paths.
/// Trace files under `dir/traces` (if any) become plot-data files.
pub fn emit_report(
    records: &[MetricsRecord],
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::domain("no records to report"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Markdown => {
            let p = dir.join("report.md");
            fs::write(&p, render_markdown(records)?)?;
            written.push(p);
        }
        ReportFormat::Csv => {
            let p = dir.join("report.csv");
            fs::write(&p, aggregate_csv(&aggregate(records)?))?;
            written.push(p);
        }
    }
    let trace_dir = dir.join("traces");
    if trace_dir.is_dir() {
        let mut traces: Vec<(String, PathBuf)> = fs::read_dir(&trace_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .map(|p| {
                let name = p
                    .file_stem()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned();
                (name, p)
            })
            .collect();
        traces.sort();
        if !traces.is_empty() {
            for (metric, body) in plot_data(&traces)? {
                let p = dir.join(format!("plot_{metric}.csv"));
                fs::write(&p, body)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
