use hardmdp::harness::{run_regret_sweep, LearnerSpec, RegretSweepConfig};
use hardmdp::instances::{ClassSpec, Family, HardClass};
use hardmdp::mdp::{occupancy, optimal_values, evaluate_policy};
use hardmdp::MarkovPolicy;
use proptest::prelude::*;

fn tree_spec() -> impl Strategy<Value = ClassSpec> {
    (2usize..=3, 2usize..=3, 1usize..=3, 0usize..=2, 0.0f64..=0.25).prop_map(|(a, d, hbar, extra, eps)| {
        let nodes = (a.pow(d as u32) - 1) / (a - 1);
        ClassSpec {
            family: Family::Tree,
            num_states: nodes + 3,
            num_actions: a,
            horizon: (3 * d).max(hbar + d + 1) + extra,
            hbar,
            eps,
            arm: None,
            ref_arm: None,
        }
    })
}

fn s4_spec() -> impl Strategy<Value = ClassSpec> {
    (2usize..=4, 4usize..=7, 0.0f64..=0.25).prop_flat_map(|(a, h, eps)| {
        (1usize..=h - 2).prop_map(move |hbar| ClassSpec {
            family: Family::S4Stage,
            num_states: 4,
            num_actions: a,
            horizon: h,
            hbar,
            eps,
            arm: None,
            ref_arm: None,
        })
    })
}

fn staged_spec() -> impl Strategy<Value = ClassSpec> {
    prop_oneof![tree_spec(), s4_spec()]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn members_differ_from_reference_in_one_row(spec in staged_spec()) {
        let class = HardClass::new(&spec).unwrap();
        let reference = class.instance(None).unwrap();
        for arm in class.all_arms() {
            let m = class.instance(Some(arm)).unwrap();
            prop_assert!(m.validate().is_valid());
            let diff = reference.kernel_diff(&m).unwrap();
            let site = class.site(&arm);
            if spec.eps == 0.0 {
                prop_assert!(diff.is_empty());
            } else {
                prop_assert_eq!(diff, vec![(site.stage, site.state, site.action)]);
            }
        }
    }

    #[test]
    fn arm_policy_attains_boosted_value(spec in staged_spec()) {
        let class = HardClass::new(&spec).unwrap();
        let w = class.reward_window() as f64;
        let reference = class.instance(None).unwrap();
        prop_assert!((optimal_values(&reference).0.rho - w / 2.0).abs() < 1e-12);
        for arm in class.all_arms() {
            let m = class.instance(Some(arm)).unwrap();
            let on_arm = evaluate_policy(&m, &class.arm_policy(&arm).unwrap()).unwrap().rho;
            let best = optimal_values(&m).0.rho;
            prop_assert!((on_arm - w * (0.5 + spec.eps)).abs() < 1e-12);
            prop_assert!((best - on_arm).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_occupancy_is_a_distribution_per_stage(spec in staged_spec()) {
        let class = HardClass::new(&spec).unwrap();
        let m = class.instance(None).unwrap();
        let pol = MarkovPolicy::uniform(m.num_states(), m.num_actions(), m.horizon());
        let occ = occupancy(&m, &pol, None).unwrap();
        for h in 0..m.horizon() {
            prop_assert!((occ.stage_mass(h) - 1.0).abs() < 1e-12);
            prop_assert!(occ.d[h].iter().flatten().all(|&x| x >= 0.0));
        }
        // leaf visits are exclusive, so their total mass over the window is at most one
        let (lo, hi) = class.visit_stages();
        let leaf_mass: f64 = (lo..=hi)
            .flat_map(|stage| class.leaf_states().into_iter().map(move |s| (stage - 1, s)))
            .map(|(h, s)| occ.state_mass(h, s))
            .sum();
        prop_assert!(leaf_mass <= 1.0 + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sweep_histograms_account_for_every_episode(
        spec in s4_spec(),
        episodes in 1u64..40,
        seed in any::<u64>(),
    ) {
        let config = RegretSweepConfig {
            class_spec: spec,
            learner: LearnerSpec::Uniform,
            episodes,
            seed,
            reps: 2,
        };
        let result = run_regret_sweep(&config).unwrap();
        let class = HardClass::new(&config.class_spec).unwrap();
        let gap = class.reward_window() as f64 * config.class_spec.eps;
        for cell in &result.cells {
            let visited: u64 = cell.histogram.iter().sum();
            prop_assert_eq!(visited, episodes);
            match (cell.arm, cell.arm_count) {
                (Some(_), Some(n)) => {
                    prop_assert!(n <= visited);
                    let expected = gap * (episodes - n) as f64;
                    prop_assert!((cell.identity_regret - expected).abs() < 1e-9 * (1.0 + expected));
                }
                (None, _) => prop_assert!(cell.identity_regret.abs() < 1e-12),
                _ => prop_assert!(false, "arm without a count"),
            }
        }
    }
}
