//! Regret sweeps over every member of a hard class.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learners::LearnerSpec;
use super::{HarnessError, SCHEMA_VERSION};
use crate::bounds::{self, BoundReport, TheoremId};
use crate::info::mean_stderr;
use crate::instances::{Arm, ClassSpec, Family, HardClass, HardInstanceParams};
use crate::mdp::{self, Mdp, Trajectory};
use crate::rng::substream;

/// Column order of the per-cell CSV.
pub const REGRET_CSV_HEADER: &str =
    "instance,rep,arm_stage,arm_leaf,arm_action,arm_count,leaf_visits,reward_total,identity_regret,reward_regret";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RegretSweepConfig {
    pub class_spec: ClassSpec,
    pub learner: LearnerSpec,
    #[serde(rename = "T")]
    pub episodes: u64,
    pub seed: u64,
    /// Replications per instance.
    #[serde(alias = "seeds")]
    pub reps: usize,
}

/// One (instance, replication) run of `T` episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub instance: usize,
    pub rep: usize,
    pub arm: Option<Arm>,
    /// Visits to the instance's own arm.
    pub arm_count: Option<u64>,
    /// Visits per arm, in `HardClass::all_arms` order.
    pub histogram: Vec<u64>,
    pub reward_total: f64,
    pub identity_regret: f64,
    pub reward_regret: f64,
}

#[derive(Serialize)]
struct CsvRow {
    instance: usize,
    rep: usize,
    arm_stage: Option<usize>,
    arm_leaf: Option<usize>,
    arm_action: Option<usize>,
    arm_count: Option<u64>,
    leaf_visits: u64,
    reward_total: f64,
    identity_regret: f64,
    reward_regret: f64,
}

/// Aggregate over replications for one member of the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceRecord {
    pub index: usize,
    pub params: HardInstanceParams,
    pub optimal_value: f64,
    pub mean_arm_count: Option<f64>,
    pub arm_count_stderr: Option<f64>,
    /// Regret from the visit-count identity `T W eps (1 - N/T)`.
    pub regret: f64,
    pub regret_stderr: f64,
    /// `T rho* - sum of collected rewards`.
    pub reward_regret: f64,
    pub reward_regret_stderr: f64,
    pub joint_sigma: f64,
    /// Whether the two estimators agree within four joint standard errors.
    pub estimators_agree: bool,
    pub reps: usize,
    /// Mean visits per arm; recorded for the reference member only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arm_histogram: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepResult {
    pub schema_version: u32,
    pub learner: LearnerSpec,
    pub class_spec: ClassSpec,
    #[serde(rename = "T")]
    pub episodes: u64,
    pub seed: u64,
    pub reps: usize,
    pub arms: Vec<Arm>,
    pub records: Vec<InstanceRecord>,
    pub worst_index: usize,
    pub worst_instance: HardInstanceParams,
    pub worst_regret: f64,
    pub mean_regret: f64,
    pub bound: BoundReport,
    pub ratio: f64,
    #[serde(skip)]
    pub cells: Vec<CellRecord>,
}

impl SweepResult {
    /// Writes one CSV row per (instance, replication).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for c in &self.cells {
            w.serialize(CsvRow {
                instance: c.instance,
                rep: c.rep,
                arm_stage: c.arm.map(|a| a.stage),
                arm_leaf: c.arm.map(|a| a.leaf),
                arm_action: c.arm.map(|a| a.action),
                arm_count: c.arm_count,
                leaf_visits: c.histogram.iter().sum(),
                reward_total: c.reward_total,
                identity_regret: c.identity_regret,
                reward_regret: c.reward_regret,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, HarnessError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn regret_theorem(class: &HardClass) -> Result<TheoremId, HarnessError> {
    Ok(match class.family() {
        Family::Tree if class.tree().is_some_and(|t| t.full) => TheoremId::RegretTree,
        Family::Tree => TheoremId::RegretTreeRelaxed,
        Family::TreeStationary => TheoremId::RegretStationary,
        Family::S3Stationary => TheoremId::RegretS3,
        Family::S4Stage => TheoremId::RegretS4,
        Family::S4Bpi => return Err(HarnessError::Config("s4-bpi is a best-policy-identification class".into())),
    })
}

fn arm_index(class: &HardClass, arm: &Arm) -> usize {
    let (lo, _) = class.visit_stages();
    ((arm.stage - lo) * class.num_leaves() + arm.leaf) * class.spec().num_actions + arm.action
}

/// The arm visited by an episode; errors unless exactly one stage of the
/// visit window sits on a leaf.
fn episode_arm(class: &HardClass, traj: &Trajectory) -> Result<Arm, HarnessError> {
    let (lo, hi) = class.visit_stages();
    let leaves = class.leaf_states();
    let hits = (lo..=hi).filter(|&h| leaves.contains(&traj.states[h - 1])).count();
    if hits != 1 {
        return Err(HarnessError::Invariant(format!(
            "episode occupies a leaf at {hits} stages of {lo}..={hi}: states {:?}",
            traj.states
        )));
    }
    class
        .visited_arm(&traj.states, &traj.actions)
        .ok_or_else(|| HarnessError::Invariant("leaf visit without arm".into()))
}

struct Member {
    params: HardInstanceParams,
    mdp: Mdp,
    optimal_value: f64,
}

fn run_cell(
    class: &HardClass,
    learner: &LearnerSpec,
    member: &Member,
    instance: usize,
    rep: usize,
    episodes: u64,
    seed: u64,
) -> Result<CellRecord, HarnessError> {
    let spec = class.spec();
    let mut rng = substream(seed, &[instance as u64, rep as u64]);
    let mut agent = learner.regret_agent(class)?;
    let mut histogram = vec![0u64; class.all_arms().len()];
    let mut reward_total = 0.0;
    for _ in 0..episodes {
        let traj = mdp::run_agent_episode(&member.mdp, agent.as_mut(), &mut rng)?;
        histogram[arm_index(class, &episode_arm(class, &traj)?)] += 1;
        reward_total += traj.total_reward();
    }
    let arm = member.params.arm;
    let arm_count = arm.map(|a| histogram[arm_index(class, &a)]);
    let identity_regret = match arm_count {
        Some(n) => bounds::regret_identity(
            spec.family,
            spec.horizon,
            spec.hbar,
            class.depth(),
            spec.eps,
            episodes,
            n as f64,
        )?,
        None => 0.0,
    };
    Ok(CellRecord {
        instance,
        rep,
        arm,
        arm_count,
        histogram,
        reward_total,
        identity_regret,
        reward_regret: episodes as f64 * member.optimal_value - reward_total,
    })
}

fn aggregate(index: usize, member: &Member, cells: &[CellRecord]) -> InstanceRecord {
    let identity: Vec<f64> = cells.iter().map(|c| c.identity_regret).collect();
    let reward: Vec<f64> = cells.iter().map(|c| c.reward_regret).collect();
    let (regret, regret_stderr) = mean_stderr(&identity);
    let (reward_regret, reward_regret_stderr) = mean_stderr(&reward);
    let joint_sigma = regret_stderr.hypot(reward_regret_stderr);
    let (mean_arm_count, arm_count_stderr) = if member.params.arm.is_some() {
        let counts: Vec<f64> = cells.iter().map(|c| c.arm_count.unwrap_or(0) as f64).collect();
        let (m, se) = mean_stderr(&counts);
        (Some(m), Some(se))
    } else {
        (None, None)
    };
    let arm_histogram = member.params.arm.is_none().then(|| {
        let k = cells[0].histogram.len();
        (0..k)
            .map(|j| cells.iter().map(|c| c.histogram[j] as f64).sum::<f64>() / cells.len() as f64)
            .collect()
    });
    InstanceRecord {
        index,
        params: member.params.clone(),
        optimal_value: member.optimal_value,
        mean_arm_count,
        arm_count_stderr,
        regret,
        regret_stderr,
        reward_regret,
        reward_regret_stderr,
        joint_sigma,
        estimators_agree: (regret - reward_regret).abs() <= 4.0 * joint_sigma + 1e-9,
        reps: cells.len(),
        arm_histogram,
    }
}

/// Runs `learner` for `T` episodes on every member of the class, `reps`
/// times each, and compares the worst regret against the family's bound.
pub fn run_regret_sweep(config: &RegretSweepConfig) -> Result<SweepResult, HarnessError> {
    if config.episodes == 0 {
        return Err(HarnessError::Config("T must be at least 1".into()));
    }
    if config.reps == 0 {
        return Err(HarnessError::Config("at least one replication is needed".into()));
    }
    let class = HardClass::new(&config.class_spec)?;
    let theorem = regret_theorem(&class)?;
    // fail fast on learners that cannot run regret experiments
    drop(config.learner.regret_agent(&class)?);
    let members = class
        .members()
        .into_iter()
        .map(|params| {
            let mdp = class.instance(params.arm)?;
            let optimal_value = mdp::optimal_values(&mdp).0.rho;
            Ok(Member { params, mdp, optimal_value })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let grid: Vec<(usize, usize)> = (0..members.len()).flat_map(|i| (0..config.reps).map(move |r| (i, r))).collect();
    log::info!(
        "regret sweep: {} instances x {} reps, T = {}, learner {}",
        members.len(),
        config.reps,
        config.episodes,
        config.learner.name()
    );
    let cells: Vec<CellRecord> = grid
        .par_iter()
        .map(|&(i, r)| run_cell(&class, &config.learner, &members[i], i, r, config.episodes, config.seed))
        .collect::<Result<_, _>>()?;
    let records: Vec<InstanceRecord> = members
        .iter()
        .enumerate()
        .map(|(i, m)| aggregate(i, m, &cells[i * config.reps..(i + 1) * config.reps]))
        .collect();
    let worst_index = (0..records.len()).fold(0, |w, i| if records[i].regret > records[w].regret { i } else { w });
    let worst_regret = records[worst_index].regret;
    let mean_regret = records.iter().map(|r| r.regret).sum::<f64>() / records.len() as f64;
    let spec = class.spec();
    let bound = bounds::regret_bound(theorem, spec.horizon, spec.num_states, spec.num_actions, config.episodes)?;
    let ratio = worst_regret / bound.value;
    Ok(SweepResult {
        schema_version: SCHEMA_VERSION,
        learner: config.learner.clone(),
        class_spec: spec.clone(),
        episodes: config.episodes,
        seed: config.seed,
        reps: config.reps,
        arms: class.all_arms(),
        worst_instance: records[worst_index].params.clone(),
        records,
        worst_index,
        worst_regret,
        mean_regret,
        bound,
        ratio,
        cells,
    })
}

/// The member with the largest estimated regret; ties go to the earliest
/// member in class order.
pub fn adversarial_instance(result: &SweepResult) -> (HardInstanceParams, f64) {
    (result.worst_instance.clone(), result.worst_regret)
}

/// Empirical check of the averaging step of the regret argument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AveragingReport {
    /// Number of arms `K`.
    pub arms: usize,
    pub eps: f64,
    #[serde(rename = "T")]
    pub episodes: u64,
    /// Every run visited exactly `T` arms in total.
    pub visits_sum_to_t: bool,
    /// `(1/T) sum_arm E_arm[N_arm]`, each term estimated on its own member.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// `1 + sqrt(2) eps sqrt(K T)`.
    pub rhs: f64,
    /// `lhs <= rhs + 3 lhs_stderr`.
    pub holds: bool,
    /// `sum_arm (E0[N_arm]/T + sqrt(2) eps sqrt(E0[N_arm]))` from reference runs.
    pub reference_chain: Option<f64>,
}

/// Checks `sum N = T` on every run and the averaged visit inequality.
pub fn averaging_inequality_check(result: &SweepResult) -> AveragingReport {
    let t = result.episodes as f64;
    let k = result.arms.len();
    let eps = result.class_spec.eps;
    let visits_sum_to_t = result.cells.iter().all(|c| c.histogram.iter().sum::<u64>() == result.episodes);
    let (mut lhs, mut var) = (0.0, 0.0);
    for r in &result.records {
        if let (Some(m), Some(se)) = (r.mean_arm_count, r.arm_count_stderr) {
            lhs += m / t;
            var += (se / t).powi(2);
        }
    }
    let lhs_stderr = var.sqrt();
    let rhs = 1.0 + std::f64::consts::SQRT_2 * eps * (k as f64 * t).sqrt();
    let reference_chain = result.records.iter().find_map(|r| r.arm_histogram.as_ref()).map(|hist| {
        hist.iter().map(|&n| n / t + std::f64::consts::SQRT_2 * eps * n.sqrt()).sum()
    });
    AveragingReport {
        arms: k,
        eps,
        episodes: result.episodes,
        visits_sum_to_t,
        lhs,
        lhs_stderr,
        rhs,
        holds: lhs <= rhs + 3.0 * lhs_stderr,
        reference_chain,
    }
}
