//! Best-policy-identification runs over a hard class.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::learners::{run_bpi_uniform, BpiOutcome, LearnerSpec};
use super::{HarnessError, SCHEMA_VERSION};
use crate::bounds::{self, BoundReport, TheoremId};
use crate::info::mean_stderr;
use crate::instances::{bpi_gap, Arm, ClassSpec, Family, HardClass, HardInstanceParams};
use crate::mdp::{self, Mdp};
use crate::rng::substream;

/// Column order of the per-run CSV.
pub const BPI_CSV_HEADER: &str = "instance,rep,tau,capped,rec_stage,rec_leaf,rec_action,value,optimal_value,pac_success,good_events";

/// Margin below which a value counts as not exceeding `rho* - eps`.
const PAC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpiSweepConfig {
    /// Class geometry; its `eps` is replaced by the gap matching `eps` below.
    pub class_spec: ClassSpec,
    pub learner: LearnerSpec,
    /// Target accuracy of the recommended policy.
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    #[serde(alias = "seeds")]
    pub reps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpiRun {
    pub rep: usize,
    pub tau: u64,
    pub capped: bool,
    pub recommended_arm: Arm,
    /// Exact value of the recommended policy.
    pub value: f64,
    pub pac_success: bool,
    /// Arms whose site the recommended policy reaches with probability above 1/2.
    pub good_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpiInstanceRecord {
    pub index: usize,
    pub params: HardInstanceParams,
    pub optimal_value: f64,
    pub runs: Vec<BpiRun>,
    /// Mean stopping time over runs that did not hit the cap.
    pub mean_tau: Option<f64>,
    pub tau_stderr: Option<f64>,
    pub capped_runs: usize,
    pub failure_rate: f64,
    /// `sqrt(delta (1 - delta) / n)`.
    pub failure_sigma: f64,
    /// `failure_rate <= delta + 3 failure_sigma`.
    pub failure_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BpiRunResult {
    pub schema_version: u32,
    pub learner: LearnerSpec,
    /// Class with the kernel gap actually used.
    pub class_spec: ClassSpec,
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    pub reps: usize,
    pub records: Vec<BpiInstanceRecord>,
    /// Mean stopping time on the first member of the class.
    pub reference_mean_tau: Option<f64>,
    pub bound: BoundReport,
    pub all_failure_ok: bool,
    pub max_good_events: usize,
}

#[derive(Serialize)]
struct CsvRow {
    instance: usize,
    rep: usize,
    tau: u64,
    capped: bool,
    rec_stage: usize,
    rec_leaf: usize,
    rec_action: usize,
    value: f64,
    optimal_value: f64,
    pac_success: bool,
    good_events: usize,
}

impl BpiRunResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        for rec in &self.records {
            for run in &rec.runs {
                w.serialize(CsvRow {
                    instance: rec.index,
                    rep: run.rep,
                    tau: run.tau,
                    capped: run.capped,
                    rec_stage: run.recommended_arm.stage,
                    rec_leaf: run.recommended_arm.leaf,
                    rec_action: run.recommended_arm.action,
                    value: run.value,
                    optimal_value: rec.optimal_value,
                    pac_success: run.pac_success,
                    good_events: run.good_events,
                })?;
            }
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

fn bpi_theorem(class: &HardClass) -> Result<TheoremId, HarnessError> {
    let full = class.tree().is_some_and(|t| t.full);
    Ok(match class.family() {
        Family::S4Bpi => TheoremId::BpiS4,
        Family::Tree if full => TheoremId::BpiTree,
        Family::Tree => TheoremId::BpiTreeRelaxed,
        Family::TreeStationary => TheoremId::BpiStationary,
        f => return Err(HarnessError::Config(format!("family {f} has no best-policy-identification bound"))),
    })
}

/// Number of arm sites the policy reaches with probability above 1/2.
fn good_events(class: &HardClass, mdp: &Mdp, pol: &mdp::MarkovPolicy) -> Result<usize, HarnessError> {
    let occ = mdp::occupancy(mdp, pol, None)?;
    Ok(class
        .all_arms()
        .iter()
        .filter(|arm| {
            let site = class.site(arm);
            occ.d[site.stage][site.state][site.action] > 0.5
        })
        .count())
}

/// Resolves the class whose members differ from the best by multiples of
/// the accuracy-matched gap.
pub fn bpi_class(config: &BpiSweepConfig) -> Result<HardClass, HarnessError> {
    if !(config.eps > 0.0) {
        return Err(HarnessError::Config(format!("eps = {} must be positive", config.eps)));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(HarnessError::Config(format!("delta = {} not in (0, 1)", config.delta)));
    }
    let mut spec = config.class_spec.clone();
    spec.eps = 0.0;
    let geometry = HardClass::new(&spec)?;
    spec.eps = bpi_gap(spec.family, config.eps, geometry.reward_window());
    Ok(HardClass::new(&spec)?)
}

/// Runs the identification learner `reps` times on every member.
pub fn run_bpi_sweep(config: &BpiSweepConfig) -> Result<BpiRunResult, HarnessError> {
    let LearnerSpec::BpiUniform { confidence_scale, max_episodes } = config.learner else {
        return Err(HarnessError::Config(format!("{} is not an identification learner", config.learner.name())));
    };
    config.learner.validate()?;
    if config.reps == 0 {
        return Err(HarnessError::Config("at least one replication is needed".into()));
    }
    let class = bpi_class(config)?;
    let theorem = bpi_theorem(&class)?;
    let members = class
        .members()
        .into_iter()
        .map(|params| {
            let mdp = class.instance(params.arm)?;
            let rho = mdp::optimal_values(&mdp).0.rho;
            Ok((params, mdp, rho))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let grid: Vec<(usize, usize)> = (0..members.len()).flat_map(|i| (0..config.reps).map(move |r| (i, r))).collect();
    log::info!("bpi sweep: {} instances x {} reps, eps = {}, delta = {}", members.len(), config.reps, config.eps, config.delta);
    let runs: Vec<BpiRun> = grid
        .par_iter()
        .map(|&(i, rep)| {
            let (_, mdp, rho) = &members[i];
            let mut rng = substream(config.seed, &[i as u64, rep as u64]);
            let BpiOutcome { tau, capped, recommended_arm, recommended } =
                run_bpi_uniform(&class, mdp, config.eps, config.delta, confidence_scale, max_episodes, &mut rng)?;
            let value = mdp::evaluate_policy(mdp, &recommended)?.rho;
            Ok(BpiRun {
                rep,
                tau,
                capped,
                recommended_arm,
                value,
                pac_success: value > rho - config.eps + PAC_TOL,
                good_events: good_events(&class, mdp, &recommended)?,
            })
        })
        .collect::<Result<_, HarnessError>>()?;
    let n = config.reps as f64;
    let failure_sigma = (config.delta * (1.0 - config.delta) / n).sqrt();
    let records: Vec<BpiInstanceRecord> = members
        .into_iter()
        .enumerate()
        .map(|(i, (params, _, optimal_value))| {
            let runs = runs[i * config.reps..(i + 1) * config.reps].to_vec();
            let capped_runs = runs.iter().filter(|r| r.capped).count();
            if capped_runs > 0 {
                log::warn!("instance {i}: {capped_runs} runs hit the episode cap and are excluded from E[tau]");
            }
            let taus: Vec<f64> = runs.iter().filter(|r| !r.capped).map(|r| r.tau as f64).collect();
            let (mean_tau, tau_stderr) = if taus.is_empty() {
                (None, None)
            } else {
                let (m, se) = mean_stderr(&taus);
                (Some(m), Some(se))
            };
            let failure_rate = runs.iter().filter(|r| !r.pac_success).count() as f64 / n;
            BpiInstanceRecord {
                index: i,
                params,
                optimal_value,
                mean_tau,
                tau_stderr,
                capped_runs,
                failure_rate,
                failure_sigma,
                failure_ok: failure_rate <= config.delta + 3.0 * failure_sigma,
                runs,
            }
        })
        .collect();
    let spec = class.spec();
    let bound = bounds::bpi_bound(theorem, spec.horizon, spec.num_states, spec.num_actions, config.eps, config.delta)?;
    Ok(BpiRunResult {
        schema_version: SCHEMA_VERSION,
        learner: config.learner.clone(),
        class_spec: spec.clone(),
        eps: config.eps,
        delta: config.delta,
        seed: config.seed,
        reps: config.reps,
        reference_mean_tau: records[0].mean_tau,
        all_failure_ok: records.iter().all(|r| r.failure_ok),
        max_good_events: records.iter().flat_map(|r| r.runs.iter().map(|x| x.good_events)).max().unwrap_or(0),
        records,
        bound,
    })
}
