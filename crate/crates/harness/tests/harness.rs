//! Harness-level integration: the run matrix writes coherent artifacts, the
//! table and plot aggregate them faithfully, and variant toggles stay
//! isolated.

use etcomm_core::env::EnvConfig;
use etcomm_core::net::NetConfig;
use etcomm_core::trainer::TrainSetup;
use etcomm_harness::{
    inspect_comm, load_records, plot, run, table, ExperimentSpec, TableMetric, Variant,
};
use std::path::PathBuf;

fn tiny_setup() -> TrainSetup {
    let mut env = EnvConfig::for_agents(3);
    env.episode_len = 5;
    let net = NetConfig {
        n_agents: 3,
        d_m: 4,
        d_pe: 2,
        n_heads: 2,
        d_hidden: 6,
        sigma_start: 0.5,
        sigma_decay: 0.995,
        sigma_min: 0.05,
    };
    let mut setup = TrainSetup::new(env, net);
    setup.train.epochs = 3;
    setup.train.ppo_epochs = 2;
    setup.train.seed = 11;
    setup
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("etcomm_harness_{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn single_run_produces_one_record_and_artifacts() {
    let mut spec = ExperimentSpec::new(tiny_setup(), tmp_dir("single"));
    spec.comm_range_sweep = vec![2.4];
    spec.n_seeds = 1;
    let records = run(&spec).unwrap();
    assert_eq!(records.len(), 1);

    let dir = spec.output_dir.join("full/delta_2.4/seed_11");
    for file in [
        "config.json",
        "metrics.jsonl",
        "trigger_log.jsonl",
        "checkpoint_final.json",
        "run_record.json",
    ] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let metrics_text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_text.lines().count(), 3);

    // summary recomputable from the persisted rows
    let rec = &records[0];
    let recount: u64 = metrics_text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["message_volume"].as_u64().unwrap()
        })
        .sum();
    assert_eq!(rec.summary.total_message_volume, recount);

    let mean_last: f64 = metrics_text
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["reward"].as_f64().unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!((rec.summary.mean_reward_last10 - mean_last).abs() < 1e-12);

    let _ = std::fs::remove_dir_all(&spec.output_dir);
}

#[test]
fn no_etm_variant_logs_all_valid() {
    let mut spec = ExperimentSpec::new(tiny_setup(), tmp_dir("noetm"));
    spec.variant = Variant::NoEtm;
    spec.comm_range_sweep = vec![3.0];
    spec.n_seeds = 1;
    let records = run(&spec).unwrap();
    assert_eq!(records.len(), 1);

    let log_path = spec
        .output_dir
        .join("no_etm/delta_3/seed_11/trigger_log.jsonl");
    let text = std::fs::read_to_string(log_path).unwrap();
    for line in text.lines() {
        let row: etcomm_core::comm::TriggerLogRow = serde_json::from_str(line).unwrap();
        assert!(row.decision.is_valid());
    }
    // every step transmits: volume per epoch is N * T * d_m
    let per_epoch = (3 * 5 * 4) as u64;
    assert_eq!(records[0].summary.total_message_volume, per_epoch * 3,);
    let _ = std::fs::remove_dir_all(&spec.output_dir);
}

#[test]
fn variant_isolation_in_config_snapshots() {
    let base = tiny_setup();
    for variant in Variant::all() {
        let mut arm = base.clone();
        variant.apply(&mut arm);
        // differences against the base are exactly the documented toggles
        let mut expect = base.clone();
        match variant {
            Variant::Full => {}
            Variant::NoEtm => expect.options.trigger_bypass = true,
            Variant::NoGib => expect.loss.rho = 0.0,
            Variant::NoEtmNoGib => {
                expect.options.trigger_bypass = true;
                expect.loss.rho = 0.0;
            }
        }
        assert_eq!(arm, expect, "{variant} touched unrelated config");
    }
}

#[test]
fn rerun_overwrites_deterministically() {
    let mut spec = ExperimentSpec::new(tiny_setup(), tmp_dir("rerun"));
    spec.comm_range_sweep = vec![2.1];
    spec.n_seeds = 1;
    run(&spec).unwrap();
    let path = spec.output_dir.join("full/delta_2.1/seed_11/metrics.jsonl");
    let first = std::fs::read_to_string(&path).unwrap();
    run(&spec).unwrap();
    let second = std::fs::read_to_string(&path).unwrap();
    assert_eq!(first, second, "re-run must overwrite with identical bytes");
    let _ = std::fs::remove_dir_all(&spec.output_dir);
}

#[test]
fn table_and_plot_aggregate_persisted_records() {
    let mut spec = ExperimentSpec::new(tiny_setup(), tmp_dir("aggregate"));
    spec.comm_range_sweep = vec![2.1, 2.7];
    spec.n_seeds = 2;
    let mut records = run(&spec).unwrap();
    spec.variant = Variant::NoEtm;
    records.extend(run(&spec).unwrap());
    assert_eq!(records.len(), 8);

    // loading from disk matches the in-memory records
    let loaded = load_records(&spec.output_dir).unwrap();
    assert_eq!(loaded.len(), records.len());

    let tbl = table(&loaded, TableMetric::MessageVolume);
    assert_eq!(tbl.deltas, vec![2.1, 2.7]);
    assert_eq!(tbl.rows.len(), 2);

    // cell = manual mean over seeds from the records themselves
    for (name, cells) in &tbl.rows {
        for (di, &delta) in tbl.deltas.iter().enumerate() {
            let manual: Vec<f64> = loaded
                .iter()
                .filter(|r| r.variant.name() == name && r.comm_range == delta)
                .map(|r| r.summary.total_message_volume as f64)
                .collect();
            let mean = manual.iter().sum::<f64>() / manual.len() as f64;
            assert!((cells[di].unwrap() - mean).abs() < 1e-9);
        }
    }

    // missing cells render as gaps, not errors
    let partial: Vec<_> = loaded
        .iter()
        .filter(|r| !(r.variant == Variant::NoEtm && r.comm_range == 2.7))
        .cloned()
        .collect();
    let tbl2 = table(&partial, TableMetric::MessageVolume);
    let no_etm_row = tbl2.rows.iter().find(|(n, _)| n == "no_etm").unwrap();
    assert!(no_etm_row.1[1].is_none());
    let text = tbl2.render_text();
    assert!(text.contains('-'));

    // plot: one curve per variant, point count = epochs, band = across-seed std
    let data = plot::curve_data(&loaded);
    assert_eq!(data.curves.len(), 2);
    for curve in &data.curves {
        assert_eq!(curve.mean.len(), 3);
        assert_eq!(curve.n_runs, 4);
        // manual std at epoch 0
        let vals: Vec<f64> = loaded
            .iter()
            .filter(|r| r.variant.name() == curve.variant)
            .map(|r| r.epochs[0].reward)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((curve.std[0] - sd).abs() < 1e-12);
    }
    let svg = plot::render_svg(&data);
    assert!(svg.contains("polyline"));

    // data file round-trips into an identical re-render
    let json = serde_json::to_string(&data).unwrap();
    let back: plot::PlotData = serde_json::from_str(&json).unwrap();
    assert_eq!(plot::render_svg(&back), svg);

    let _ = std::fs::remove_dir_all(&spec.output_dir);
}

#[test]
fn unwritable_output_fails_before_training() {
    let mut spec = ExperimentSpec::new(tiny_setup(), PathBuf::from("/proc/etcomm_forbidden"));
    spec.comm_range_sweep = vec![2.4];
    spec.n_seeds = 1;
    assert!(run(&spec).is_err());
}

#[test]
fn invalid_config_fails_before_training() {
    let mut spec = ExperimentSpec::new(tiny_setup(), tmp_dir("invalid"));
    spec.comm_range_sweep = vec![];
    assert!(spec.validate().is_err());
    spec.comm_range_sweep = vec![2.4];
    spec.n_seeds = 0;
    assert!(spec.validate().is_err());
    spec.n_seeds = 1;
    spec.setup.net.n_heads = 5;
    assert!(run(&spec).is_err());
}

#[test]
fn table_matches_reported_ablation_shape() {
    // two variants across the four default sweep points, built from
    // synthetic records so the shape check stays cheap
    let mk = |variant: Variant, delta: f64, seed: u64, volume: u64| etcomm_harness::RunRecord {
        variant,
        comm_range: delta,
        seed,
        epochs: vec![],
        summary: etcomm_harness::RunSummary {
            mean_reward_last10: -1.0,
            total_message_volume: volume,
            total_consensus_volume: 0,
            final_kl_h: 0.0,
            final_eval_reward: -1.0,
        },
        config: tiny_setup(),
    };
    let mut records = Vec::new();
    for (vi, variant) in [Variant::Full, Variant::NoEtm].into_iter().enumerate() {
        for (di, delta) in [2.1, 2.4, 2.7, 2.8].into_iter().enumerate() {
            for seed in 0..3 {
                records.push(mk(variant, delta, seed, (1000 * (vi + 1) + 10 * di) as u64));
            }
        }
    }
    let tbl = table(&records, TableMetric::MessageVolume);
    assert_eq!(tbl.deltas, vec![2.1, 2.4, 2.7, 2.8]);
    assert_eq!(tbl.rows.len(), 2);
    assert_eq!(tbl.rows[0].0, "full");
    assert_eq!(tbl.rows[1].0, "no_etm");
    assert!(tbl.rows.iter().all(|(_, cells)| cells.len() == 4));
    assert_eq!(tbl.rows[0].1[1], Some(1010.0));
    let csv = tbl.to_csv();
    assert!(csv.starts_with("variant,2.1,2.4,2.7,2.8"));
}

#[test]
fn inspect_comm_renders_counts() {
    use etcomm_core::comm::{Decision, TriggerLogRow};
    let rows = vec![
        TriggerLogRow {
            t: 0,
            agent: 0,
            kappa: 0.0,
            threshold: 0.9,
            decision: Decision::Valid,
        },
        TriggerLogRow {
            t: 0,
            agent: 1,
            kappa: 0.1,
            threshold: 0.9,
            decision: Decision::Valid,
        },
        TriggerLogRow {
            t: 1,
            agent: 0,
            kappa: 0.2,
            threshold: 0.891,
            decision: Decision::Void,
        },
        TriggerLogRow {
            t: 1,
            agent: 1,
            kappa: 0.95,
            threshold: 0.891,
            decision: Decision::Valid,
        },
    ];
    let text = inspect_comm(&rows);
    assert!(text.contains("agent 0: 1"));
    assert!(text.contains("agent 1: 2"));
    assert!(text.contains("VV"));
    assert!(text.contains(".V"));
}
