use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use hardmdp::bounds::{self, BoundInputs, BoundReport, TheoremId};
use hardmdp::harness::{self, BpiSweepConfig, RegretSweepConfig, SCHEMA_VERSION};
use hardmdp::info;
use hardmdp::instances::{Arm, Family, HardClass, HardInstanceParams};
use hardmdp::mdp::{self, MarkovPolicy, Mdp, PolicyAgent};

mod table;

#[derive(Parser, Debug)]
#[command(name = "hardmdp", version, about = "Hard episodic MDP instances, KL analysis, lower bounds and sweeps")]
struct Cli {
    /// Base seed for every stochastic command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every member of a hard class as JSON plus a manifest.
    Gen(GenArgs),
    /// Optimal values and greedy policy of an instance file.
    Plan { instance: PathBuf },
    /// Trajectory KL between two instances under a Markov policy.
    Kl(KlArgs),
    /// Evaluate a closed-form lower bound, or a batch of them.
    Bound(BoundArgs),
    /// Run a regret learner over every member of a class.
    RegretSweep(SweepArgs),
    /// Run the identification learner over every member of a class.
    BpiSweep(SweepArgs),
    /// Run the built-in self-check suite.
    Verify,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Class description as JSON; overrides the flags below.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long = "S", default_value_t = 0)]
    num_states: usize,
    #[arg(long = "A")]
    num_actions: Option<usize>,
    #[arg(long = "H")]
    horizon: Option<usize>,
    #[arg(long = "Hbar", default_value_t = 1)]
    hbar: usize,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    /// Reference arm of an s4-bpi class as `stage,action` (1-based stage).
    #[arg(long)]
    ref_arm: Option<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, ValueEnum)]
enum KlMethod {
    Exact,
    Enumerate,
    MonteCarlo,
}

#[derive(Args, Debug)]
struct KlArgs {
    #[arg(long)]
    m0: PathBuf,
    #[arg(long)]
    m1: PathBuf,
    /// `uniform` or a path to a policy JSON file.
    #[arg(long, default_value = "uniform")]
    policy: String,
    #[arg(long = "T")]
    episodes: u64,
    #[arg(long, value_enum, default_value = "exact")]
    method: KlMethod,
    /// Replications for the Monte Carlo estimate.
    #[arg(long, default_value_t = 100)]
    reps: usize,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long)]
    theorem: Option<TheoremId>,
    #[arg(long = "H")]
    horizon: Option<usize>,
    #[arg(long = "S")]
    num_states: Option<usize>,
    #[arg(long = "A")]
    num_actions: Option<usize>,
    #[arg(long = "T")]
    episodes: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// JSON array of `{theoremId, H, S, A, T, eps, delta}` objects; prints CSV.
    #[arg(long)]
    batch: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Experiment JSON: classSpec, learner, T (or eps and delta), reps, seed.
    config: PathBuf,
    /// Also write the JSON summary here.
    #[arg(long)]
    summary: Option<PathBuf>,
}

/// Failures split by exit code.
enum Failure {
    /// Bad input files or arguments: exit 2.
    Usage(anyhow::Error),
    /// Errors raised by the computation itself: exit 1.
    Domain(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn domain<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Domain(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HARDMDP_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.parallelism {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Gen(args) => gen(args),
        Command::Plan { instance } => plan(&cli, instance),
        Command::Kl(args) => kl(&cli, args),
        Command::Bound(args) => bound(&cli, args),
        Command::RegretSweep(args) => regret_sweep(&cli, args),
        Command::BpiSweep(args) => bpi_sweep(&cli, args),
        Command::Verify => verify(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn print_json<T: Serialize>(value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(domain)?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).map_err(usage)
}

fn parse_ref_arm(text: &str) -> Result<Arm, Failure> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(anyhow!("--ref-arm expects `stage,action`, got {text:?}")))?;
    match nums.as_slice() {
        [stage, action] => Ok(Arm::new(*stage, 0, *action)),
        [stage, leaf, action] => Ok(Arm::new(*stage, *leaf, *action)),
        _ => Err(usage(anyhow!("--ref-arm expects `stage,action`, got {text:?}"))),
    }
}

fn gen(args: &GenArgs) -> CmdResult {
    let spec: HardInstanceParams = match &args.spec {
        Some(path) => read_json(path)?,
        None => {
            let (Some(family), Some(num_actions), Some(horizon)) = (args.family, args.num_actions, args.horizon) else {
                return Err(usage(anyhow!("gen needs --spec or all of --family, --A and --H")));
            };
            HardInstanceParams {
                family,
                num_states: args.num_states,
                num_actions,
                horizon,
                hbar: args.hbar,
                eps: args.eps,
                arm: None,
                ref_arm: args.ref_arm.as_deref().map(parse_ref_arm).transpose()?,
            }
        }
    };
    let class = HardClass::new(&spec).map_err(domain)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display())).map_err(usage)?;
    let mut manifest = Vec::new();
    for (i, member) in class.members().iter().enumerate() {
        let m = class.instance(member.arm).map_err(domain)?;
        let file = format!("instance_{i:03}.json");
        write_file(&args.out.join(&file), &serde_json::to_string_pretty(&m).map_err(domain)?)?;
        manifest.push(serde_json::json!({ "file": file, "params": member }));
    }
    let doc = serde_json::json!({
        "schemaVersion": SCHEMA_VERSION,
        "classSpec": class.spec(),
        "numStates": class.num_states(),
        "depth": class.depth(),
        "leaves": class.num_leaves(),
        "rewardWindow": class.reward_window(),
        "instances": manifest,
    });
    write_file(&args.out.join("manifest.json"), &serde_json::to_string_pretty(&doc).map_err(domain)?)?;
    eprintln!("wrote {} instances to {}", class.members().len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PlanReport {
    rho: f64,
    /// `values[h][s]`, 1-based stage `h + 1`.
    values: Vec<Vec<f64>>,
    greedy_actions: Vec<Vec<usize>>,
    state_names: Vec<String>,
}

fn plan(cli: &Cli, path: &Path) -> CmdResult {
    let m: Mdp = read_json(path)?;
    let (table, pol) = mdp::optimal_values(&m);
    let report = PlanReport {
        rho: table.rho,
        values: table.v.clone(),
        greedy_actions: (0..m.horizon())
            .map(|h| (0..m.num_states()).map(|s| pol.action(h, s).unwrap_or(0)).collect())
            .collect(),
        state_names: (0..m.num_states()).map(|s| m.state_label(s)).collect(),
    };
    match cli.format.unwrap_or(Format::Table) {
        Format::Json => print_json(&report),
        _ => {
            println!("rho* = {}", report.rho);
            let mut header = vec!["stage".to_string()];
            header.extend(report.state_names.iter().cloned());
            let mut rows = Vec::new();
            for h in 0..m.horizon() {
                let mut row = vec![format!("V*_{}", h + 1)];
                row.extend(report.values[h].iter().map(|v| format!("{v:.6}")));
                rows.push(row);
            }
            for h in 0..m.horizon() {
                let mut row = vec![format!("a*_{}", h + 1)];
                row.extend(report.greedy_actions[h].iter().map(|a| a.to_string()));
                rows.push(row);
            }
            print!("{}", table::render(&header, &rows));
            Ok(())
        }
    }
}

fn kl(cli: &Cli, args: &KlArgs) -> CmdResult {
    let m0: Mdp = read_json(&args.m0)?;
    let m1: Mdp = read_json(&args.m1)?;
    let pol = if args.policy == "uniform" {
        MarkovPolicy::uniform(m0.num_states(), m0.num_actions(), m0.horizon())
    } else {
        read_json(Path::new(&args.policy))?
    };
    match args.method {
        KlMethod::Exact => {
            let breakdown = info::trajectory_kl_exact(&m0, &m1, &pol, args.episodes).map_err(domain)?;
            match cli.format.unwrap_or(Format::Table) {
                Format::Json => print_json(&breakdown),
                _ => {
                    let header: Vec<String> = ["stage", "state", "action", "E[N]", "row KL", "contribution"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect();
                    let rows: Vec<Vec<String>> = breakdown
                        .per_entry
                        .iter()
                        .map(|e| {
                            vec![
                                (e.stage + 1).to_string(),
                                m0.state_label(e.state),
                                e.action.to_string(),
                                format!("{:.6}", e.expected_count),
                                format!("{:.6}", e.row_kl),
                                format!("{:.6}", e.contribution),
                            ]
                        })
                        .collect();
                    print!("{}", table::render(&header, &rows));
                    println!("total = {}", breakdown.total);
                    Ok(())
                }
            }
        }
        KlMethod::Enumerate => {
            let total = info::trajectory_kl_brute_force(&m0, &m1, &pol, args.episodes).map_err(domain)?;
            print_json(&serde_json::json!({ "method": "enumerate", "total": total }))
        }
        KlMethod::MonteCarlo => {
            let seed = cli.seed.ok_or_else(|| usage(anyhow!("--method monte-carlo needs --seed")))?;
            let est = info::trajectory_kl_monte_carlo(&m0, &m1, || PolicyAgent(&pol), args.episodes, args.reps, seed)
                .map_err(domain)?;
            print_json(&serde_json::json!({ "method": "monte-carlo", "estimate": est }))
        }
    }
}

const BOUND_CSV_HEADER: [&str; 11] =
    ["theorem_id", "H", "S", "A", "T", "eps", "delta", "value", "raw_value", "preconditions_ok", "failed_preconditions"];

#[derive(serde::Deserialize)]
#[serde(rename_all = "camelCase")]
struct BatchEntry {
    theorem_id: TheoremId,
    #[serde(flatten)]
    inputs: BoundInputs,
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn bound(cli: &Cli, args: &BoundArgs) -> CmdResult {
    if let Some(path) = &args.batch {
        let entries: Vec<BatchEntry> = read_json(path)?;
        let mut w = csv::Writer::from_writer(io::stdout().lock());
        w.write_record(BOUND_CSV_HEADER).map_err(domain)?;
        for e in entries {
            let r = bounds::evaluate(e.theorem_id, &e.inputs).map_err(domain)?;
            let failed: Vec<&str> = r.failed().map(|p| p.name.as_str()).collect();
            w.write_record([
                r.theorem_id.to_string(),
                r.inputs.horizon.to_string(),
                opt(r.inputs.num_states),
                r.inputs.num_actions.to_string(),
                opt(r.inputs.episodes),
                opt(r.inputs.eps),
                opt(r.inputs.delta),
                r.value.to_string(),
                r.raw_value.to_string(),
                r.all_passed().to_string(),
                failed.join("; "),
            ])
            .map_err(domain)?;
        }
        return w.flush().map_err(domain);
    }
    let theorem = args.theorem.ok_or_else(|| usage(anyhow!("bound needs --theorem or --batch")))?;
    let (Some(horizon), Some(num_actions)) = (args.horizon, args.num_actions) else {
        return Err(usage(anyhow!("bound needs --H and --A")));
    };
    let inputs = BoundInputs {
        horizon,
        num_states: args.num_states,
        num_actions,
        episodes: args.episodes,
        eps: args.eps,
        delta: args.delta,
    };
    let report = bounds::evaluate(theorem, &inputs).map_err(domain)?;
    match cli.format.unwrap_or(Format::Table) {
        Format::Json => print_json(&report),
        _ => {
            print_bound_table(&report);
            Ok(())
        }
    }
}

fn print_bound_table(r: &BoundReport) {
    println!("theorem    {}", r.theorem_id);
    println!("formula    {}", r.formula);
    println!("value      {:.4}", r.value);
    if r.raw_value != r.value {
        println!("raw value  {:.4}", r.raw_value);
    }
    for p in &r.preconditions {
        println!("  [{}] {}", if p.passed { "ok" } else { "FAIL" }, p.name);
    }
}

/// Reads a sweep config, letting `--seed` fill or override its seed.
fn sweep_config<T: serde::de::DeserializeOwned>(cli: &Cli, path: &Path) -> Result<T, Failure> {
    let mut doc: Value = read_json(path)?;
    let obj = doc.as_object_mut().ok_or_else(|| usage(anyhow!("{} must hold a JSON object", path.display())))?;
    if let Some(seed) = cli.seed {
        obj.insert("seed".into(), seed.into());
    }
    if !obj.contains_key("seed") {
        return Err(usage(anyhow!("a seed is required: pass --seed or set \"seed\" in the config")));
    }
    serde_json::from_value(doc).with_context(|| format!("parsing {}", path.display())).map_err(usage)
}

fn emit_sweep<T: Serialize>(cli: &Cli, args: &SweepArgs, summary: &T, csv: String) -> CmdResult {
    let json = serde_json::to_string_pretty(summary).map_err(domain)?;
    if let Some(path) = &args.summary {
        write_file(path, &json)?;
    }
    let mut out = io::stdout().lock();
    match cli.format.unwrap_or(Format::Csv) {
        Format::Json => writeln!(out, "{json}"),
        _ => out.write_all(csv.as_bytes()),
    }
    .map_err(domain)
}

fn regret_sweep(cli: &Cli, args: &SweepArgs) -> CmdResult {
    let config: RegretSweepConfig = sweep_config(cli, &args.config)?;
    let result = harness::run_regret_sweep(&config).map_err(domain)?;
    let check = harness::averaging_inequality_check(&result);
    eprintln!(
        "worst regret {:.4} on {} (bound {:.4}, ratio {:.3}); averaging check {}",
        result.worst_regret,
        result.worst_instance.arm.map_or("the reference".to_string(), |a| a.to_string()),
        result.bound.value,
        result.ratio,
        if check.holds && check.visits_sum_to_t { "ok" } else { "FAILED" }
    );
    let csv = result.to_csv_string().map_err(domain)?;
    let summary = serde_json::json!({ "schemaVersion": SCHEMA_VERSION, "sweep": result, "averaging": check });
    emit_sweep(cli, args, &summary, csv)
}

fn bpi_sweep(cli: &Cli, args: &SweepArgs) -> CmdResult {
    let config: BpiSweepConfig = sweep_config(cli, &args.config)?;
    let result = harness::run_bpi_sweep(&config).map_err(domain)?;
    eprintln!(
        "E[tau] on the reference {} (bound {:.4}); failure rates within delta + 3 sigma: {}",
        result.reference_mean_tau.map_or("n/a".to_string(), |t| format!("{t:.1}")),
        result.bound.value,
        result.all_failure_ok
    );
    let csv = result.to_csv_string().map_err(domain)?;
    emit_sweep(cli, args, &result, csv)
}

fn verify(cli: &Cli) -> CmdResult {
    let report = hardmdp::verify::run_all();
    match cli.format.unwrap_or(Format::Table) {
        Format::Json => print_json(&report)?,
        _ => print!("{report}"),
    }
    if report.passed() {
        Ok(())
    } else {
        Err(domain(anyhow!("{} check(s) failed", report.checks.iter().filter(|c| !c.passed()).count())))
    }
}
