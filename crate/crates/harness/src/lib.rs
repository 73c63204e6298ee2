//! Experiment orchestration: the variant/range/seed matrix, persisted run
//! records, aggregate tables, and learning-curve plots.
//!
//! Every run writes its own subdirectory (config snapshot, per-epoch metrics
//! JSONL, trigger log, checkpoints, summary), so each table cell and figure
//! point traces back to files on disk.

pub mod plot;

use etcomm_core::config::{
    apply_env, apply_loss, apply_net, apply_train, apply_trigger, ConfigMap,
};
use etcomm_core::env::EnvConfig;
use etcomm_core::error::Error as CoreError;
use etcomm_core::net::{NetConfig, ParamSet};
use etcomm_core::rng::mix_seed;
use etcomm_core::trainer::{
    collect_rollout, evaluate, save_checkpoint, train_epoch, Adam, Checkpoint, EpochMetrics,
    TrainSetup, CHECKPOINT_VERSION,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

// Validation comparisons are written negated (`!(x > 0.0)`) so NaN fails them.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn positive(x: f64) -> bool {
    x > 0.0
}

pub type Result<T> = std::result::Result<T, CoreError>;

/// Ablation arms: the full pipeline, trigger bypass, compression off, both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoEtm,
    NoGib,
    NoEtmNoGib,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::Full,
            Variant::NoEtm,
            Variant::NoGib,
            Variant::NoEtmNoGib,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEtm => "no_etm",
            Variant::NoGib => "no_gib",
            Variant::NoEtmNoGib => "no_etm_no_gib",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "full" => Ok(Variant::Full),
            "no_etm" => Ok(Variant::NoEtm),
            "no_gib" => Ok(Variant::NoGib),
            "no_etm_no_gib" => Ok(Variant::NoEtmNoGib),
            other => Err(CoreError::Parse(format!(
                "unknown variant `{other}` (expected full, no_etm, no_gib, no_etm_no_gib)"
            ))),
        }
    }

    /// The only configuration differences between arms: `no_etm` bypasses
    /// the trigger, `no_gib` zeroes the bottleneck weight.
    pub fn apply(&self, setup: &mut TrainSetup) {
        match self {
            Variant::Full => {}
            Variant::NoEtm => setup.options.trigger_bypass = true,
            Variant::NoGib => setup.loss.rho = 0.0,
            Variant::NoEtmNoGib => {
                setup.options.trigger_bypass = true;
                setup.loss.rho = 0.0;
            }
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One experiment: a variant trained across a communication-range sweep and
/// a block of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub variant: Variant,
    pub setup: TrainSetup,
    pub comm_range_sweep: Vec<f64>,
    pub n_seeds: usize,
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    /// Default sweep matches the evaluation protocol: 2.1, 2.4, 2.7, 2.8 m.
    pub fn new(setup: TrainSetup, output_dir: PathBuf) -> Self {
        ExperimentSpec {
            variant: Variant::Full,
            setup,
            comm_range_sweep: vec![2.1, 2.4, 2.7, 2.8],
            n_seeds: 3,
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.setup.validate()?;
        if self.comm_range_sweep.is_empty() {
            return Err(CoreError::InvalidConfig("empty comm_range_sweep".into()));
        }
        if !self.comm_range_sweep.iter().all(|&d| positive(d)) {
            return Err(CoreError::InvalidConfig("sweep values must be > 0".into()));
        }
        if self.n_seeds == 0 {
            return Err(CoreError::InvalidConfig("n_seeds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Keys specific to the harness layer of a config file.
pub struct HarnessKeys {
    pub variant: Option<Variant>,
    pub comm_range_sweep: Option<Vec<f64>>,
    pub n_seeds: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

/// Load core configs plus harness keys from one `key = value` file.
pub fn load_config_file(path: &Path) -> Result<(TrainSetup, HarnessKeys)> {
    let mut map = ConfigMap::from_file(path)?;
    let mut env = EnvConfig::default_seven();
    apply_env(&mut env, &mut map)?;
    let mut net = NetConfig::default_for(env.n_agents);
    apply_net(&mut net, env.n_agents, &mut map)?;
    let mut setup = TrainSetup::new(env, net);
    apply_trigger(&mut setup.trigger, &mut map)?;
    apply_loss(&mut setup.loss, &mut map)?;
    apply_train(&mut setup.train, &mut map)?;

    let variant = match map.get_string("variant") {
        Some(v) => Some(Variant::parse(&v)?),
        None => None,
    };
    let comm_range_sweep = map.get_list("comm_range_sweep")?;
    let n_seeds = map.get_usize("n_seeds")?;
    let out_dir = map.get_string("out_dir").map(PathBuf::from);
    map.finish()?;

    Ok((
        setup,
        HarnessKeys {
            variant,
            comm_range_sweep,
            n_seeds,
            out_dir,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean total episode reward over the last (up to) 10 epochs.
    pub mean_reward_last10: f64,
    /// Scalars transmitted across all training episodes.
    pub total_message_volume: u64,
    /// Consensus scalars materialized across all training episodes.
    pub total_consensus_volume: u64,
    /// Compression of the final policy's consensus batch (deterministic
    /// evaluation episode).
    pub final_kl_h: f64,
    /// Reward of the deterministic evaluation episode.
    pub final_eval_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub comm_range: f64,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub summary: RunSummary,
    /// Exact configuration the run used, variant toggles applied.
    pub config: TrainSetup,
}

/// Execute the matrix: one trained run per (sweep value, seed). Artifacts
/// land under `output_dir/<variant>/delta_<range>/seed_<seed>/`; re-running
/// the same spec overwrites them deterministically.
pub fn run(spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    std::fs::create_dir_all(&spec.output_dir)?;

    let mut records = Vec::new();
    for &delta in &spec.comm_range_sweep {
        for seed_idx in 0..spec.n_seeds {
            let seed = spec.setup.train.seed + seed_idx as u64;
            let dir = spec
                .output_dir
                .join(spec.variant.name())
                .join(format!("delta_{delta}"))
                .join(format!("seed_{seed}"));
            let record = run_single(spec, delta, seed, &dir)?;
            records.push(record);
        }
    }
    Ok(records)
}

/// Train one configuration to completion and persist its artifacts.
pub fn run_single(
    spec: &ExperimentSpec,
    comm_range: f64,
    seed: u64,
    dir: &Path,
) -> Result<RunRecord> {
    let mut setup = spec.setup.clone();
    setup.env.comm_range = comm_range;
    setup.train.seed = seed;
    spec.variant.apply(&mut setup);
    setup.validate()?;

    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&setup)?,
    )?;

    let mut params = ParamSet::init(&setup.net, mix_seed(seed, 0x11AD));
    let mut opt = Adam::new(setup.train.lr, &params);

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let mut epochs = Vec::with_capacity(setup.train.epochs);
    for epoch in 0..setup.train.epochs {
        let m = train_epoch(&mut params, &mut opt, &setup, epoch)?;
        writeln!(metrics_file, "{}", serde_json::to_string(&m)?)?;
        epochs.push(m);

        if setup.train.checkpoint_every > 0 && (epoch + 1) % setup.train.checkpoint_every == 0 {
            save_checkpoint(
                &dir.join(format!("checkpoint_{:04}.json", epoch + 1)),
                &Checkpoint {
                    version: CHECKPOINT_VERSION,
                    net: setup.net.clone(),
                    params: params.clone(),
                    adam: Some(opt.clone()),
                    epoch: epoch + 1,
                },
            )?;
        }
    }
    metrics_file.flush()?;

    save_checkpoint(
        &dir.join("checkpoint_final.json"),
        &Checkpoint {
            version: CHECKPOINT_VERSION,
            net: setup.net.clone(),
            params: params.clone(),
            adam: Some(opt.clone()),
            epoch: setup.train.epochs,
        },
    )?;

    // representative trigger log under the final parameters
    let log_batch = collect_rollout(
        &params,
        &setup,
        setup.net.sigma_at(setup.train.epochs.saturating_sub(1)),
        mix_seed(seed, 0x106),
    )?;
    let mut log_file = std::fs::File::create(dir.join("trigger_log.jsonl"))?;
    for row in &log_batch.trigger_log {
        writeln!(log_file, "{}", serde_json::to_string(row)?)?;
    }
    log_file.flush()?;

    let eval = evaluate(&params, &setup, mix_seed(seed, 0xE7A1))?;

    let last10 = epochs.iter().rev().take(10).map(|m| m.reward);
    let last10_n = last10.clone().count().max(1);
    let summary = RunSummary {
        mean_reward_last10: last10.sum::<f64>() / last10_n as f64,
        total_message_volume: epochs.iter().map(|m| m.message_volume).sum(),
        total_consensus_volume: epochs.iter().map(|m| m.consensus_volume).sum(),
        final_kl_h: eval.kl_h,
        final_eval_reward: eval.reward,
    };

    let record = RunRecord {
        variant: spec.variant,
        comm_range,
        seed,
        epochs,
        summary,
        config: setup,
    };
    std::fs::write(dir.join("run_record.json"), serde_json::to_string(&record)?)?;
    Ok(record)
}

/// Recursively load every `run_record.json` under a directory tree.
pub fn load_records(root: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("run_record.json") {
                let text = std::fs::read_to_string(&path)?;
                records.push(serde_json::from_str(&text)?);
            }
        }
    }
    records.sort_by(|a: &RunRecord, b: &RunRecord| {
        a.variant
            .name()
            .cmp(b.variant.name())
            .then(a.comm_range.partial_cmp(&b.comm_range).unwrap())
            .then(a.seed.cmp(&b.seed))
    });
    Ok(records)
}

/// Which summary column a table aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableMetric {
    MessageVolume,
    ConsensusVolume,
    KlH,
    Reward,
}

impl TableMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "message_volume" => Ok(TableMetric::MessageVolume),
            "consensus_volume" => Ok(TableMetric::ConsensusVolume),
            "kl_h" => Ok(TableMetric::KlH),
            "reward" => Ok(TableMetric::Reward),
            other => Err(CoreError::Parse(format!(
                "unknown metric `{other}` (expected message_volume, consensus_volume, kl_h, reward)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TableMetric::MessageVolume => "message_volume",
            TableMetric::ConsensusVolume => "consensus_volume",
            TableMetric::KlH => "kl_h",
            TableMetric::Reward => "reward",
        }
    }

    fn of(&self, r: &RunRecord) -> f64 {
        match self {
            TableMetric::MessageVolume => r.summary.total_message_volume as f64,
            TableMetric::ConsensusVolume => r.summary.total_consensus_volume as f64,
            TableMetric::KlH => r.summary.final_kl_h,
            TableMetric::Reward => r.summary.mean_reward_last10,
        }
    }
}

/// Variant-by-range grid of across-seed means; `None` marks missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub metric: &'static str,
    pub deltas: Vec<f64>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Aggregate records into a variant x comm-range table of across-seed means.
pub fn table(records: &[RunRecord], metric: TableMetric) -> SummaryTable {
    let mut deltas: Vec<f64> = records.iter().map(|r| r.comm_range).collect();
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    deltas.dedup();

    let mut rows = Vec::new();
    for variant in Variant::all() {
        let of_variant: Vec<&RunRecord> = records.iter().filter(|r| r.variant == variant).collect();
        if of_variant.is_empty() {
            continue;
        }
        let mut cells = Vec::with_capacity(deltas.len());
        for &d in &deltas {
            let vals: Vec<f64> = of_variant
                .iter()
                .filter(|r| r.comm_range == d)
                .map(|r| metric.of(r))
                .collect();
            if vals.is_empty() {
                cells.push(None);
            } else {
                cells.push(Some(vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        rows.push((variant.name().to_string(), cells));
    }
    SummaryTable {
        metric: metric.name(),
        deltas,
        rows,
    }
}

impl SummaryTable {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} (mean across seeds)", self.metric);
        let _ = write!(out, "{:<16}", "variant");
        for d in &self.deltas {
            let _ = write!(out, "{:>12}", format!("d={d}"));
        }
        let _ = writeln!(out);
        for (name, cells) in &self.rows {
            let _ = write!(out, "{name:<16}");
            for c in cells {
                match c {
                    Some(v) => {
                        let _ = write!(out, "{v:>12.2}");
                    }
                    None => {
                        let _ = write!(out, "{:>12}", "-");
                    }
                }
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "variant");
        for d in &self.deltas {
            let _ = write!(out, ",{d}");
        }
        let _ = writeln!(out);
        for (name, cells) in &self.rows {
            let _ = write!(out, "{name}");
            for c in cells {
                match c {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => {
                        let _ = write!(out, ",");
                    }
                }
            }
            let _ = writeln!(out);
        }
        out
    }
}

/// Render a trigger log as a per-step decision map plus per-agent totals.
pub fn inspect_comm(rows: &[etcomm_core::comm::TriggerLogRow]) -> String {
    let n_agents = rows.iter().map(|r| r.agent + 1).max().unwrap_or(0);
    let t_max = rows.iter().map(|r| r.t + 1).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "trigger decisions (column = agent, V = VALID, . = VOID)"
    );
    let _ = writeln!(out, "   t  agents  kappa range        threshold");
    let mut per_agent = vec![0usize; n_agents];
    for t in 0..t_max {
        let step_rows: Vec<_> = rows.iter().filter(|r| r.t == t).collect();
        if step_rows.is_empty() {
            continue;
        }
        let mut marks = vec!['?'; n_agents];
        let mut kmin = f64::INFINITY;
        let mut kmax = f64::NEG_INFINITY;
        let mut thr = 0.0;
        for r in &step_rows {
            marks[r.agent] = if r.decision.is_valid() {
                per_agent[r.agent] += 1;
                'V'
            } else {
                '.'
            };
            kmin = kmin.min(r.kappa);
            kmax = kmax.max(r.kappa);
            thr = r.threshold;
        }
        let marks: String = marks.into_iter().collect();
        let _ = writeln!(out, "{t:>4}  {marks}  [{kmin:+.3}, {kmax:+.3}]  {thr:.4}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "per-agent trigger counts over {t_max} steps:");
    for (agent, count) in per_agent.iter().enumerate() {
        let _ = writeln!(out, "  agent {agent}: {count}");
    }
    out
}
