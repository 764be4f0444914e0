use collapse_core::envs::{Env, SlipGridEnv};
use collapse_core::miproxy::{EmaState, TurnScope};
use collapse_core::policy::{PolicyParams, PolicySpec};
use collapse_core::rollout::collect_batch;
use collapse_core::trainer::collapse_env;
use collapse_lab::checkpoint::Checkpoint;
use collapse_lab::commands::diagnose;
use collapse_lab::config::ExperimentConfig;
use collapse_lab::rollout_log::{parse_rollout_log, to_lines, write_rollout_log};
use proptest::prelude::*;

fn log_text(batch: &collapse_core::rollout::RolloutBatch) -> String {
    let mut buf = Vec::new();
    write_rollout_log(batch, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

fn grid_batch(seed: u64) -> collapse_core::rollout::RolloutBatch {
    let env = Env::SlipGrid(SlipGridEnv::new(4, 0.3, 6).unwrap());
    let spec = PolicySpec::for_env(&env, 2, 5).unwrap();
    let params = PolicyParams::random(spec, 1.0, 1.0, seed);
    collect_batch(&params, &env, 3, 4, seed, 7).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        seed in any::<u64>(),
        scale in prop_oneof![Just(1e-300), Just(1.0), Just(1e300)],
        iteration in proptest::option::of(0usize..10_000),
        sigma in any::<f64>().prop_filter("finite", |x| x.is_finite()),
    ) {
        let spec = PolicySpec::new(3, 2, 4, 5, 1).unwrap();
        let params = PolicyParams::random(spec, scale, scale, seed);
        let ck = Checkpoint {
            iteration,
            seed: Some(seed),
            scope: Some(TurnScope::TrajectoryUniform),
            ema: Some(EmaState { sigma_ema: sigma, initialized: true, ..EmaState::default() }),
            ..Checkpoint::new(&params)
        };
        let back = Checkpoint::from_json(&ck.to_json(), "mem").unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.reasoning_logits), bits(&ck.reasoning_logits));
        prop_assert_eq!(bits(&back.action_logits), bits(&ck.action_logits));
        prop_assert_eq!(back.ema.unwrap().sigma_ema.to_bits(), sigma.to_bits());
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.params().unwrap(), params);
    }

    #[test]
    fn rollout_logs_round_trip(seed in any::<u64>()) {
        let batch = grid_batch(seed);
        let text = log_text(&batch);
        prop_assert_eq!(text.lines().count(), 12);
        prop_assert_eq!(parse_rollout_log(&text, "mem").unwrap(), batch);
    }
}

#[test]
fn checkpoint_version_is_checked() {
    let spec = PolicySpec::new(2, 1, 2, 3, 1).unwrap();
    let text = Checkpoint::new(&PolicyParams::uniform(spec))
        .to_json()
        .replace("\"version\": 1", "\"version\": 9");
    let e = Checkpoint::from_json(&text, "ck.json").unwrap_err().to_string();
    assert!(e.contains("version"), "{e}");
}

#[test]
fn checkpoint_with_wrong_table_size_is_rejected() {
    let spec = PolicySpec::new(2, 1, 2, 3, 1).unwrap();
    let mut ck = Checkpoint::new(&PolicyParams::uniform(spec));
    ck.action_logits.pop();
    let e = Checkpoint::from_json(&ck.to_json(), "ck.json").unwrap_err().to_string();
    assert!(e.contains("sizes"), "{e}");
}

#[test]
fn log_lines_carry_the_documented_fields() {
    let batch = grid_batch(1);
    let text = log_text(&batch);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["actions", "iter", "k", "prompt", "ret", "rewards", "tokens"]);
    assert_eq!(to_lines(&batch)[0].iter, 7);
}

#[test]
fn malformed_logs_report_their_line() {
    let text = log_text(&grid_batch(2));
    let lines: Vec<&str> = text.lines().collect();

    let truncated = lines[..5].join("\n");
    let e = parse_rollout_log(&truncated, "t.jsonl").unwrap_err().to_string();
    assert!(e.starts_with("t.jsonl:"), "{e}");

    let cut = format!("{}\n{}", lines[0], &lines[1][..lines[1].len() / 2]);
    let e = parse_rollout_log(&cut, "c.jsonl").unwrap_err().to_string();
    assert!(e.starts_with("c.jsonl:2:"), "{e}");

    let extra = text.replacen("\"ret\"", "\"bonus\":1,\"ret\"", 1);
    let e = parse_rollout_log(&extra, "x.jsonl").unwrap_err().to_string();
    assert!(e.starts_with("x.jsonl:1:"), "{e}");

    let e = parse_rollout_log("", "e.jsonl").unwrap_err().to_string();
    assert!(e.contains("empty"), "{e}");
}

#[test]
fn scopes_agree_on_single_turn_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["train.iterations=3"]).unwrap();
    collapse_lab::commands::train(&cfg, dir.path()).unwrap();
    let log = dir.path().join("rollouts/iter_00002.jsonl");
    let ck = dir.path().join("checkpoints/iter_00002.json");
    let a = diagnose(&log, &ck, Some(TurnScope::FirstTurn), None).unwrap();
    let b = diagnose(&log, &ck, Some(TurnScope::TrajectoryUniform), None).unwrap();
    assert!(matches!(collapse_env(), Env::ContextualTarget(_)));
    assert_eq!(a.proxies, b.proxies);
    assert_ne!(a.scope, b.scope);
}

#[test]
fn json_and_key_value_configs_agree() {
    let kv = "[train]\nlearning_rate = 3\n[filter]\nstrategy = top_k\nrho = 0.5\n";
    let nested = r#"{"train": {"learning_rate": 3}, "filter": {"strategy": "top_k", "rho": 0.5}}"#;
    let flat = r#"{"train.learning_rate": 3, "filter.strategy": "top_k", "filter.rho": 0.5}"#;
    let a = ExperimentConfig::parse(kv, "a.cfg").unwrap();
    for text in [nested, flat] {
        let b = ExperimentConfig::parse(text, "b.json").unwrap();
        assert_eq!(a.to_canonical(), b.to_canonical());
    }
    let canon = a.to_canonical();
    assert_eq!(ExperimentConfig::parse(&canon, "c.cfg").unwrap().to_canonical(), canon);
}

#[test]
fn duplicate_and_unknown_keys_are_rejected() {
    let e = ExperimentConfig::parse("train.iterations = 3\ntrain.iterations = 4\n", "d.cfg")
        .unwrap_err()
        .to_string();
    assert!(e.starts_with("d.cfg:2:"), "{e}");
    assert!(ExperimentConfig::parse(r#"{"train": {"iters": 3}}"#, "u.json").is_err());
}

fn shipped(name: &str) -> ExperimentConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn shipped_configs_match_the_library_scenarios() {
    use collapse_core::filtering::{FilterConfig, Strategy};
    use collapse_core::trainer::{self, TrainConfig};
    let top_p = FilterConfig { strategy: Strategy::TopP, rho: 0.9, ..FilterConfig::default() };

    let c = shipped("collapse.cfg");
    assert_eq!(c.env.build().unwrap(), trainer::collapse_env());
    assert_eq!(c.train, TrainConfig { filter: top_p, ..trainer::collapse_config(0) });

    let q = shipped("quartile.cfg");
    assert_eq!(q.env.build().unwrap(), trainer::quartile_env());
    assert_eq!(q.train, trainer::collapse_config(0));

    let n = shipped("noise_sweep.cfg");
    assert_eq!(n.env.build().unwrap(), trainer::noise_sweep_env());
    assert_eq!(n.train, TrainConfig { filter: top_p, ..trainer::noise_sweep_config(0) });
}
