//! Self-check suite: exact computations against enumeration, classical
//! inequality grids, tree-shape sweeps, occupancy normalization and
//! closed-form optimal values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::info::{self, InfoError};
use crate::instances::{build_tree_shape, Arm, Family, HardClass, HardInstanceParams, TreeShape};
use crate::mdp::{self, MarkovPolicy, Mdp};
use crate::rng::substream;

/// Outcome of one family of checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckOutcome {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed discrepancy or violation margin.
    pub max_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl CheckOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            failures: 0,
            max_error: 0.0,
            first_failure: None,
        }
    }

    fn record(&mut self, ok: bool, error: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if error.is_finite() {
            self.max_error = self.max_error.max(error);
        }
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<34} {:>7} {:>8} {:>12}  status", "check", "cases", "failures", "max error")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<34} {:>7} {:>8} {:>12.3e}  {}",
                c.name,
                c.cases,
                c.failures,
                c.max_error,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
            if let Some(msg) = &c.first_failure {
                writeln!(f, "    first failure: {msg}")?;
            }
        }
        Ok(())
    }
}

/// A pair of MDPs, a policy and an episode count small enough to enumerate.
#[derive(Clone, Debug)]
pub struct KlCell {
    pub label: String,
    pub m0: Mdp,
    pub m1: Mdp,
    pub policy: MarkovPolicy,
    pub episodes: u64,
    /// 0-based `(stage, state, action)` whose visit count the contraction
    /// check watches.
    pub watch: (usize, usize, usize),
}

fn params(family: Family, s: usize, a: usize, h: usize, hbar: usize, eps: f64) -> HardInstanceParams {
    HardInstanceParams {
        family,
        num_states: s,
        num_actions: a,
        horizon: h,
        hbar,
        eps,
        arm: None,
        ref_arm: None,
    }
}

fn class_cells(class: &HardClass, arm: Arm, label: &str, out: &mut Vec<KlCell>) {
    let m0 = class.instance(None).expect("reference member");
    let m1 = class.instance(Some(arm)).expect("arm member");
    let site = class.site(&arm);
    let spec = class.spec();
    let policies = [
        ("uniform", MarkovPolicy::uniform(class.num_states(), spec.num_actions, spec.horizon)),
        ("arm", class.arm_policy(&arm).expect("arm policy")),
    ];
    for (pname, pol) in policies {
        for t in [1, 2] {
            out.push(KlCell {
                label: format!("{label} policy={pname} T={t}"),
                m0: m0.clone(),
                m1: m1.clone(),
                policy: pol.clone(),
                episodes: t,
                watch: (site.stage, site.state, site.action),
            });
        }
    }
}

fn random_row(n: usize, rng: &mut crate::SimRng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|x| x / sum).collect()
}

fn random_pair(s: usize, a: usize, h: usize, seed: u64) -> (Mdp, Mdp, MarkovPolicy) {
    let mut rng = substream(seed, &[]);
    let mu = random_row(s, &mut rng);
    let mut kernels = || -> Vec<Vec<Vec<Vec<f64>>>> {
        (0..h - 1)
            .map(|_| (0..s).map(|_| (0..a).map(|_| random_row(s, &mut rng)).collect()).collect())
            .collect()
    };
    let (p0, p1) = (kernels(), kernels());
    let r: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.5; a]; s]; h];
    let m0 = Mdp::new(s, a, h, mu.clone(), p0, r.clone()).expect("random MDP");
    let m1 = Mdp::new(s, a, h, mu, p1, r).expect("random MDP");
    let pi = (0..h).map(|_| (0..s).map(|_| random_row(a, &mut rng)).collect()).collect();
    (m0, m1, MarkovPolicy::from_probs(pi).expect("random policy"))
}

/// The enumerable matrix of (instance pair, policy, T) cells: S <= 4,
/// A <= 3, H <= 4, T <= 2.
pub fn kl_oracle_cells() -> Vec<KlCell> {
    let mut out = Vec::new();
    for a in [2, 3] {
        for h in [2, 3, 4] {
            let class = HardClass::new(&params(Family::S3Stationary, 3, a, h, 1, 0.2)).unwrap();
            class_cells(&class, Arm::new(1, 0, a - 1), &format!("s3 A={a} H={h}"), &mut out);
        }
    }
    let s4 = HardClass::new(&params(Family::S4Stage, 4, 2, 4, 2, 0.15)).unwrap();
    class_cells(&s4, Arm::new(3, 0, 1), "s4 A=2 H=4 Hbar=2", &mut out);
    for (i, (s, a, h)) in [(2, 2, 3), (3, 2, 3), (2, 3, 2)].into_iter().enumerate() {
        let (m0, m1, policy) = random_pair(s, a, h, 1000 + i as u64);
        for t in [1, 2] {
            out.push(KlCell {
                label: format!("random S={s} A={a} H={h} T={t}"),
                m0: m0.clone(),
                m1: m1.clone(),
                policy: policy.clone(),
                episodes: t,
                watch: (0, 0, 0),
            });
        }
    }
    out
}

/// Exact trajectory KL against brute-force enumeration, tolerance `1e-10`.
pub fn check_kl_oracle(cells: &[KlCell]) -> CheckOutcome {
    let mut c = CheckOutcome::new("trajectory-kl-exact-vs-enumeration");
    for cell in cells {
        let exact = info::trajectory_kl_exact(&cell.m0, &cell.m1, &cell.policy, cell.episodes);
        let brute = info::trajectory_kl_brute_force(&cell.m0, &cell.m1, &cell.policy, cell.episodes);
        match (exact, brute) {
            (Ok(e), Ok(b)) => {
                let err = (e.total - b).abs();
                c.record(err <= 1e-10, err, || format!("{}: exact {} vs enumerated {b}", cell.label, e.total));
            }
            (e, b) => c.record(false, f64::NAN, || format!("{}: {:?} / {:?}", cell.label, e.err(), b.err())),
        }
    }
    c
}

/// `kl(E0[Z], E1[Z]) <= KL` for the visit fraction and the majority event.
pub fn check_contraction(cells: &[KlCell]) -> CheckOutcome {
    let mut c = CheckOutcome::new("kl-contraction");
    for cell in cells {
        let (h, s, a) = cell.watch;
        let results: [Result<info::ContractionCheck, InfoError>; 2] = [
            info::kl_contraction_check(&cell.m0, &cell.m1, &cell.policy, cell.episodes, info::visit_fraction(h, s, a)),
            info::kl_contraction_check(&cell.m0, &cell.m1, &cell.policy, cell.episodes, info::majority_event(h, s, a)),
        ];
        for (z, res) in ["N/T", "majority"].iter().zip(results) {
            match res {
                Ok(r) => c.record(r.holds, (r.kl_of_means - r.traj_kl).max(0.0), || {
                    format!("{} Z={z}: kl {} > KL {}", cell.label, r.kl_of_means, r.traj_kl)
                }),
                Err(e) => c.record(false, f64::NAN, || format!("{} Z={z}: {e}", cell.label)),
            }
        }
    }
    c
}

/// Points `0, step, 2 step, ..., max` without accumulated rounding.
fn grid(max: f64, steps: usize) -> impl Iterator<Item = f64> {
    (0..=steps).map(move |k| max * k as f64 / steps as f64)
}

pub fn check_kl_epsilon_grid() -> CheckOutcome {
    let mut c = CheckOutcome::new("kl-half-vs-4eps2");
    for eps in grid(0.25, 250) {
        let (kl, rhs) = info::kl_epsilon_bound(eps).unwrap();
        c.record(kl <= rhs, (kl - rhs).max(0.0), || format!("eps={eps}: {kl} > {rhs}"));
    }
    c
}

pub fn check_kl_delta_grid() -> CheckOutcome {
    let mut c = CheckOutcome::new("kl-vs-log-lower-bound");
    for p in grid(1.0, 100) {
        for q in grid(1.0, 100).filter(|&q| q < 1.0) {
            let (kl, rhs) = info::kl_delta_bound(p, q).unwrap();
            c.record(kl >= rhs, (rhs - kl).max(0.0), || format!("p={p}, q={q}: {kl} < {rhs}"));
        }
    }
    c
}

pub fn check_pinsker_grid() -> CheckOutcome {
    let mut c = CheckOutcome::new("pinsker");
    for p in grid(1.0, 100) {
        for q in grid(1.0, 100) {
            let r = info::pinsker_check(p, q).unwrap();
            c.record(r.holds, (r.lhs - r.rhs).max(0.0), || format!("p={p}, q={q}: {} > {}", r.lhs, r.rhs));
        }
    }
    c
}

pub fn check_kl_complement_grid() -> CheckOutcome {
    let mut c = CheckOutcome::new("kl-complement");
    for k in 1..=150 {
        let delta = k as f64 / 1000.0;
        let (kl, rhs) = info::kl_complement_bound(delta).unwrap();
        c.record(kl >= rhs, (rhs - kl).max(0.0), || format!("delta={delta}: {kl} < {rhs}"));
    }
    c
}

/// Balanced A-ary trees on `n` nodes have at least `n/4` leaves.
pub fn check_balanced_leaves() -> CheckOutcome {
    let mut c = CheckOutcome::new("balanced-tree-leaf-count");
    for a in 2..=6 {
        for n in 6..=200 {
            let t = TreeShape::balanced(n, a).unwrap();
            let l = t.num_leaves();
            c.record(4 * l >= n, (n as f64 / 4.0 - l as f64).max(0.0), || format!("n={n}, A={a}: L={l}"));
        }
    }
    c
}

/// Relaxed trees fit their budget and keep every leaf on the last level.
pub fn check_relaxed_trees() -> CheckOutcome {
    let mut c = CheckOutcome::new("relaxed-tree-shape");
    for a in 2..=6 {
        for s in 6..=400 {
            let t = build_tree_shape(s, a, true).unwrap();
            let same_level = t.leaves.iter().all(|&v| t.node_level(v) + 1 == t.depth);
            let ok = same_level && t.num_nodes() + t.merged_states == s - 3 && 8 * t.num_leaves() >= s - 3;
            c.record(ok, 0.0, || format!("S={s}, A={a}: nodes {}, leaves {}", t.num_nodes(), t.num_leaves()));
        }
    }
    c
}

fn sample_classes() -> Vec<HardInstanceParams> {
    let mut bpi = params(Family::S4Bpi, 4, 2, 6, 2, 0.1);
    bpi.ref_arm = Some(Arm::new(2, 0, 0));
    vec![
        params(Family::Tree, 6, 2, 9, 3, 0.2),
        params(Family::Tree, 9, 2, 12, 2, 0.3),
        params(Family::Tree, 16, 3, 10, 2, 0.1),
        params(Family::TreeStationary, 10, 2, 6, 1, 0.2),
        params(Family::S3Stationary, 3, 4, 5, 1, 0.25),
        params(Family::S4Stage, 4, 3, 6, 3, 0.1),
        bpi,
    ]
}

/// Occupancy measures of uniform and arm policies have unit mass per stage.
pub fn check_occupancy() -> CheckOutcome {
    let mut c = CheckOutcome::new("occupancy-normalization");
    for spec in sample_classes() {
        let class = HardClass::new(&spec).unwrap();
        let (ns, na, hz) = (class.num_states(), spec.num_actions, spec.horizon);
        let arm = class.alternative_arms()[0];
        let policies = [MarkovPolicy::uniform(ns, na, hz), class.arm_policy(&arm).unwrap()];
        for member in class.members() {
            let m = class.instance(member.arm).unwrap();
            c.record(m.validate().is_valid(), 0.0, || format!("{} member {:?} is not a valid MDP", spec.family, member.arm));
            for pol in &policies {
                let occ = mdp::occupancy(&m, pol, None).unwrap();
                for h in 0..hz {
                    let err = (occ.stage_mass(h) - 1.0).abs();
                    c.record(err <= 1e-12, err, || format!("{} stage {h}: mass {}", spec.family, occ.stage_mass(h)));
                }
            }
        }
    }
    c
}

/// Expected optimal value of a member: `W (1/2 + boost)`.
pub fn closed_form_optimal_value(class: &HardClass, arm: Option<Arm>) -> f64 {
    let spec = class.spec();
    let w = class.reward_window() as f64;
    let boost = match (spec.family, arm) {
        (Family::S4Bpi, Some(_)) => 2.0 * spec.eps,
        (Family::S4Bpi, None) => spec.eps,
        (_, Some(_)) => spec.eps,
        (_, None) => 0.0,
    };
    w * (0.5 + boost)
}

/// Parameter grid for the closed-form optimal value check.
pub fn closed_form_grid() -> Vec<HardInstanceParams> {
    let mut out = Vec::new();
    for a in [2, 3, 4] {
        for h in [2, 4, 7] {
            for eps in [0.0, 0.1, 0.25] {
                out.push(params(Family::S3Stationary, 3, a, h, 1, eps));
            }
        }
    }
    for a in [2, 3] {
        for (h, hbar) in [(4, 1), (4, 2), (7, 3), (9, 5)] {
            for eps in [0.05, 0.25] {
                out.push(params(Family::S4Stage, 4, a, h, hbar, eps));
                let mut bpi = params(Family::S4Bpi, 4, a, h, hbar, eps / 2.0);
                bpi.ref_arm = Some(Arm::new(hbar + 1, 0, a - 1));
                out.push(bpi);
            }
        }
    }
    for (s, a, h, hbar) in [(6, 2, 9, 3), (6, 2, 4, 1), (7, 3, 7, 2), (10, 3, 9, 4), (18, 2, 14, 3), (11, 2, 12, 2)] {
        for eps in [0.1, 0.5] {
            out.push(params(Family::Tree, s, a, h, hbar, eps));
        }
    }
    for (s, a, h) in [(6, 2, 3), (10, 3, 5), (13, 2, 7)] {
        out.push(params(Family::TreeStationary, s, a, h, 1, 0.2));
    }
    out
}

/// Planner value against `W (1/2 + boost)` on every grid member.
pub fn check_closed_forms() -> CheckOutcome {
    let mut c = CheckOutcome::new("closed-form-optimal-value");
    for spec in closed_form_grid() {
        let class = HardClass::new(&spec).unwrap();
        let arms = class.alternative_arms();
        let picks = [None, arms.first().copied(), arms.last().copied()];
        for arm in picks {
            let m = class.instance(arm).unwrap();
            let rho = mdp::optimal_values(&m).0.rho;
            let expected = closed_form_optimal_value(&class, arm);
            let err = (rho - expected).abs();
            c.record(err <= 1e-12, err, || format!("{} {:?}: rho* {rho} vs {expected}", spec.family, arm));
        }
    }
    c
}

/// Runs every check.
pub fn run_all() -> VerifyReport {
    let cells = kl_oracle_cells();
    VerifyReport {
        checks: vec![
            check_kl_oracle(&cells),
            check_contraction(&cells),
            check_kl_epsilon_grid(),
            check_kl_delta_grid(),
            check_pinsker_grid(),
            check_kl_complement_grid(),
            check_balanced_leaves(),
            check_relaxed_trees(),
            check_occupancy(),
            check_closed_forms(),
        ],
    }
}
