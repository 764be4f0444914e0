use collapse_core::envs::{ContextualTargetEnv, Env, SlipGridEnv};
use collapse_core::infotheory::*;
use collapse_core::miproxy::*;
use collapse_core::policy::{PolicyParams, PolicySpec};
use collapse_core::rollout::collect_batch;
use collapse_core::verify::chance_retrieval;
use proptest::prelude::*;

#[test]
fn identical_policies_retrieve_at_chance() {
    let acc = chance_retrieval(64, 4, 50, 1).unwrap();
    assert!((acc - 1.0 / 64.0).abs() < 0.004, "{acc}");
}

fn joint(rows: &[Vec<f64>]) -> DiscreteJoint {
    let n = rows.len();
    let norm: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect();
    DiscreteJoint::new(vec![1.0 / n as f64; n], norm).unwrap()
}

#[test]
fn exact_mi_of_deterministic_and_independent_joints() {
    let det = joint(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!((exact_mi(&det) - std::f64::consts::LN_2).abs() < 1e-15);
    let ind = joint(&[vec![0.3, 0.7], vec![0.3, 0.7]]);
    assert!(exact_mi(&ind).abs() < 1e-15);
}

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..5, 2usize..6).prop_flat_map(|(x, z)| prop::collection::vec(prop::collection::vec(0.01f64..1.0, z), x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_entropy_decomposition_holds(seed in 0u64..10_000, scale in 0.1f64..4.0, grid in any::<bool>()) {
        let env = if grid {
            Env::SlipGrid(SlipGridEnv::new(4, 0.3, 5).unwrap())
        } else {
            Env::ContextualTarget(ContextualTargetEnv::new(vec![0, 1, 2, 3, 0, 1], 5).unwrap())
        };
        let spec = PolicySpec::for_env(&env, 2, 6).unwrap();
        let params = PolicyParams::random(spec, scale, scale, seed);
        let batch = collect_batch(&params, &env, 4, 8, seed, 0).unwrap();
        for scope in [TurnScope::FirstTurn, TurnScope::TrajectoryUniform] {
            let m = cross_score(&params, &batch, scope, seed).unwrap();
            let (p, _) = compute_proxies(&m, EmaState::default(), seed).unwrap();
            prop_assert!((p.h_marg - (p.h_cond + p.mi_est)).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&p.ret_acc));
            prop_assert!(p.ret_acc <= p.recall2 && p.recall2 <= p.recall4);
        }
    }

    #[test]
    fn exact_entropies_decompose(rows in rows_strategy()) {
        let j = joint(&rows);
        let e = exact_entropies(&j);
        let mi = exact_mi(&j);
        prop_assert!((e.h_z - (e.h_z_given_x + mi)).abs() < 1e-12);
        prop_assert!(mi >= -1e-15);
        prop_assert!(mi <= e.h_x.min(e.h_z) + 1e-12);
    }

    #[test]
    fn template_mixing_contracts_mi(rows in rows_strategy(), alpha in 0.0f64..=1.0) {
        let j = joint(&rows);
        let q = vec![1.0 / j.num_z as f64; j.num_z];
        let mixed = template_mix(&j, &q, alpha).unwrap();
        prop_assert!(exact_mi(&mixed) <= (1.0 - alpha) * exact_mi(&j) + 1e-12);
    }

    #[test]
    fn mi_change_splits_exactly(a in rows_strategy(), seed in any::<u64>()) {
        let j0 = joint(&a);
        let shifted: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(k, v)| v * (1.0 + ((seed >> ((i + k) % 60)) & 7) as f64)).collect())
            .collect();
        let j1 = joint(&shifted);
        let c = mi_change_decomposition(&j1, &j0).unwrap();
        prop_assert!((c.delta_i - (c.delta_marg - c.delta_in)).abs() <= 1e-12);
    }
}
