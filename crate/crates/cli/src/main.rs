//! Command-line front end: compile formulas to automata, decompose them
//! into level sets, solve tabular products exactly, train the actor-critic
//! on the benchmark tasks, and evaluate checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tsynth_core::approx::{ModularApproximator, Routing};
use tsynth_core::envs::{grid_world, CartPoleEnv, DubinsEnv, WorkspaceConfig};
use tsynth_core::mdp::TabularEnv;
use tsynth_core::product::build_product;
use tsynth_core::sac::{
    evaluate, metrics_to_csv, train_with, training_levels, DubinsTask, EvalReport, PlainTask,
    ProductTask, TaskEnv, TrainerConfig,
};
use tsynth_core::scltl::{compile_dfa, parse_formula};
use tsynth_core::tabular::{
    default_active, extract_policy, value_iteration, value_iteration_from, value_table_to_csv,
    SolverConfig,
};
use tsynth_core::topo::{
    causal_graph, causal_graph_structural, exclusive_symbols, level_sets, meta_modes,
    CausalGraph, LevelPartition, SEQUENTIAL_VISITING,
};
use tsynth_core::{ApSet, Dfa, LabeledMdp};

/// Exit 2: bad input. Exit 3: numerical or convergence failure.
enum CliError {
    Input(String),
    Numeric(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

fn input<E: fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn numeric<E: fmt::Display>(e: E) -> CliError {
    CliError::Numeric(e.to_string())
}

#[derive(Parser)]
#[command(name = "tsynth", version, about = "Temporal-task policy synthesis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphMode {
    /// Automaton edges over mutually exclusive labels (none or exactly one
    /// proposition), matching region-labeled workspaces.
    Structural,
    /// Automaton edges restricted to label sequences the given model can
    /// produce.
    Tabular,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EnvName {
    Cartpole,
    Dubins,
    Grid,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a co-safe temporal formula into a deterministic automaton.
    Compile {
        /// File holding the formula text.
        formula: PathBuf,
        /// Comma-separated atomic propositions, e.g. `A,B,C`.
        #[arg(long, value_delimiter = ',', required = true)]
        ap: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition an automaton into topologically ordered level sets.
    Decompose {
        /// Automaton JSON produced by `compile`.
        dfa: PathBuf,
        /// Labeled-model JSON; required with `--mode tabular`.
        #[arg(long)]
        mdp: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GraphMode::Structural)]
        mode: GraphMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a tabular product exactly, level by level, and cross-check
    /// against the flat solve.
    Solve {
        mdp: PathBuf,
        dfa: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the actor-critic on a benchmark task.
    Train {
        #[arg(long, value_enum)]
        env: EnvName,
        /// Formula file overriding the task default (dubins and grid).
        #[arg(long)]
        formula: Option<PathBuf>,
        /// Trainer config JSON; defaults to the task preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Ablation: one shared network pair with the automaton state as
        /// an extra input.
        #[arg(long)]
        single_network: bool,
        /// Ablation: per-state networks but all levels trained at once.
        #[arg(long)]
        no_topo: bool,
        #[arg(long)]
        max_env_steps: Option<usize>,
    },
    /// Roll out a trained checkpoint and report satisfaction statistics.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        env: EnvName,
        #[arg(long)]
        formula: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        horizon: Option<usize>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("TEMPORAL_SYNTH_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(input)?;
    std::fs::write(dir.join(name), contents).map_err(input)
}

fn content_hash(bytes: &[u8]) -> String {
    // FNV-1a, enough to fingerprint inputs for the manifest
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Reproducibility record written next to every command's artifacts.
fn write_manifest(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    inputs: &[(&str, &Path)],
    config: serde_json::Value,
) -> Result<(), CliError> {
    let hashed: serde_json::Map<String, serde_json::Value> = inputs
        .iter()
        .map(|(name, path)| {
            let bytes = std::fs::read(path).unwrap_or_default();
            (name.to_string(), serde_json::json!(content_hash(&bytes)))
        })
        .collect();
    let manifest = serde_json::json!({
        "command": command,
        "seed": seed,
        "inputs": hashed,
        "config": config,
        "out": dir.display().to_string(),
        "timestamp_secs": SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    write_out(dir, "run_manifest.json", &serde_json::to_string_pretty(&manifest).map_err(input)?)
}

fn load_dfa(path: &Path) -> Result<Dfa, CliError> {
    Dfa::from_json(&read_json(path)?).map_err(input)
}

fn load_mdp(path: &Path) -> Result<LabeledMdp, CliError> {
    LabeledMdp::from_json(&read_json(path)?).map_err(input)
}

fn compile_text(text: &str, ap: &ApSet) -> Result<Dfa, CliError> {
    let formula = parse_formula(text.trim(), ap).map_err(input)?;
    let pnf = formula.to_pnf().map_err(input)?;
    compile_dfa(&pnf, ap).map_err(input)
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Compile { formula, ap, out } => cmd_compile(&formula, &ap, &out),
        Command::Decompose { dfa, mdp, mode, out } => cmd_decompose(&dfa, mdp.as_deref(), mode, &out),
        Command::Solve { mdp, dfa, gamma, tau, out } => cmd_solve(&mdp, &dfa, gamma, tau, &out),
        Command::Train {
            env,
            formula,
            config,
            seed,
            out,
            single_network,
            no_topo,
            max_env_steps,
        } => cmd_train(
            env,
            formula.as_deref(),
            config.as_deref(),
            resolve_seed(seed),
            &out,
            single_network,
            no_topo,
            max_env_steps,
        ),
        Command::Evaluate {
            checkpoint,
            env,
            formula,
            episodes,
            seed,
            workers,
            horizon,
            out,
        } => cmd_evaluate(
            &checkpoint,
            env,
            formula.as_deref(),
            episodes,
            resolve_seed(seed),
            workers,
            horizon,
            out.as_deref(),
        ),
    }
}

fn cmd_compile(formula_path: &Path, ap_names: &[String], out: &Path) -> Result<(), CliError> {
    let ap = ApSet::new(ap_names.iter().cloned()).map_err(input)?;
    let text = read_file(formula_path)?;
    let dfa = compile_text(&text, &ap)?;
    write_out(out, "dfa.json", &serde_json::to_string_pretty(&dfa.to_json()).map_err(input)?)?;
    write_out(out, "dfa.dot", &dfa.to_dot())?;
    write_manifest(
        out,
        "compile",
        None,
        &[("formula", formula_path)],
        serde_json::json!({"ap": ap_names}),
    )?;
    let accepting = (0..dfa.state_count()).filter(|&q| dfa.is_accepting(q)).count();
    println!("states: {}", dfa.state_count());
    println!("accepting: {accepting}");
    println!("sink: {}", dfa.sink.map_or("none".into(), |q| q.to_string()));
    Ok(())
}

fn decomposition(
    dfa: &Dfa,
    mdp: Option<&LabeledMdp>,
    mode: GraphMode,
) -> Result<(CausalGraph, LevelPartition), CliError> {
    let graph = match mode {
        GraphMode::Structural => causal_graph_structural(dfa, &exclusive_symbols(&dfa.ap)),
        GraphMode::Tabular => {
            let m = mdp.ok_or_else(|| input("--mode tabular requires --mdp"))?;
            causal_graph(dfa, Some(m))
        }
    };
    let part = level_sets(meta_modes(&graph), &graph, dfa).map_err(input)?;
    Ok((graph, part))
}

fn cmd_decompose(
    dfa_path: &Path,
    mdp_path: Option<&Path>,
    mode: GraphMode,
    out: &Path,
) -> Result<(), CliError> {
    let dfa = load_dfa(dfa_path)?;
    let mdp = mdp_path.map(load_mdp).transpose()?;
    let (graph, part) = decomposition(&dfa, mdp.as_ref(), mode)?;
    write_out(out, "levels.json", &serde_json::to_string_pretty(&part.to_json()).map_err(input)?)?;
    write_out(out, "quotient.dot", &part.quotient_dot(&graph))?;
    let mut inputs = vec![("dfa", dfa_path)];
    if let Some(p) = mdp_path {
        inputs.push(("mdp", p));
    }
    write_manifest(out, "decompose", None, &inputs, serde_json::json!({}))?;
    for (li, modes) in part.levels.iter().enumerate() {
        let mut qs: Vec<usize> = modes
            .iter()
            .flat_map(|&m| part.modes[m].members.iter().copied())
            .collect();
        qs.sort_unstable();
        let names: Vec<String> = qs.iter().map(|q| format!("q{q}")).collect();
        println!("L{li}: {}", names.join(" "));
    }
    println!("repaired: {}", part.repaired);
    Ok(())
}

fn cmd_solve(
    mdp_path: &Path,
    dfa_path: &Path,
    gamma: f64,
    tau: f64,
    out: &Path,
) -> Result<(), CliError> {
    let mdp = load_mdp(mdp_path)?;
    let dfa = load_dfa(dfa_path)?;
    let product = build_product(&mdp, &dfa, gamma).map_err(input)?;
    let (_, part) = decomposition(&dfa, Some(&mdp), GraphMode::Tabular)?;
    let cfg = SolverConfig { gamma, tau, ..SolverConfig::default() };
    let active = default_active(&product);
    let flat = value_iteration(&product, &cfg).map_err(numeric)?;
    let leveled = tsynth_core::topo::solve_by_levels(&product, &part, &active, |p, act, init| {
        value_iteration_from(p, &cfg, act, init)
    })
    .map_err(numeric)?;
    let gap = flat
        .iter()
        .zip(&leveled)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);
    let policy = extract_policy(&leveled, &product, &cfg);
    let policy_json: Vec<serde_json::Value> = (0..product.state_count())
        .map(|z| {
            let (s, q) = product.split(z);
            serde_json::json!({"s": s, "q": q, "probs": policy[z]})
        })
        .collect();
    write_out(out, "value.csv", &value_table_to_csv(&leveled, &product))?;
    write_out(
        out,
        "policy.json",
        &serde_json::to_string_pretty(&serde_json::Value::Array(policy_json)).map_err(input)?,
    )?;
    write_manifest(
        out,
        "solve",
        None,
        &[("mdp", mdp_path), ("dfa", dfa_path)],
        serde_json::json!({"gamma": gamma, "tau": tau}),
    )?;
    println!("initial value: {}", leveled[product.initial]);
    println!("flat-vs-topological gap: {gap:e}");
    if gap >= cfg.tolerance.max(1e-8) {
        return Err(CliError::Numeric(format!(
            "topological solve disagrees with flat solve by {gap:e}"
        )));
    }
    Ok(())
}

/// The trainable level structure for a task: in-scope automaton states per
/// level (lowest first) and the states pinned to value zero.
struct TaskSpec {
    levels: Vec<Vec<usize>>,
    zero: Vec<usize>,
}

fn formula_text(path: Option<&Path>, fallback: &str) -> Result<String, CliError> {
    match path {
        Some(p) => read_file(p),
        None => Ok(fallback.to_string()),
    }
}

fn dubins_pieces(formula: Option<&Path>) -> Result<(DubinsEnv, Dfa, TaskSpec), CliError> {
    let env = DubinsEnv::new(WorkspaceConfig::default_five_by_five());
    let ap = env.ap.clone();
    let dfa = compile_text(&formula_text(formula, SEQUENTIAL_VISITING)?, &ap)?;
    let (_, part) = decomposition(&dfa, None, GraphMode::Structural)?;
    let (levels, zero) = training_levels(&part);
    Ok((env, dfa, TaskSpec { levels, zero }))
}

fn grid_pieces(formula: Option<&Path>) -> Result<(LabeledMdp, Dfa, TaskSpec), CliError> {
    let ap = ApSet::new(["a", "b"]).map_err(input)?;
    let mdp = grid_world(4, 0.1, &ap, &[(3, 0, 0), (3, 3, 1)]);
    let dfa = compile_text(&formula_text(formula, "F (a & F b)")?, &ap)?;
    let (_, part) = decomposition(&dfa, Some(&mdp), GraphMode::Tabular)?;
    let (levels, zero) = training_levels(&part);
    Ok((mdp, dfa, TaskSpec { levels, zero }))
}

fn build_task(env: EnvName, formula: Option<&Path>) -> Result<(Box<dyn TaskEnv + Send>, TaskSpec), CliError> {
    match env {
        EnvName::Cartpole => Ok((
            Box::new(PlainTask::new(CartPoleEnv::new())),
            TaskSpec { levels: vec![vec![0]], zero: Vec::new() },
        )),
        EnvName::Dubins => {
            let (env, dfa, spec) = dubins_pieces(formula)?;
            Ok((Box::new(DubinsTask::new(env, dfa)), spec))
        }
        EnvName::Grid => {
            let (mdp, dfa, spec) = grid_pieces(formula)?;
            Ok((Box::new(ProductTask::new(TabularEnv::new(mdp), dfa, 1.0)), spec))
        }
    }
}

fn default_config(env: EnvName) -> TrainerConfig {
    match env {
        EnvName::Cartpole => TrainerConfig::cartpole_default(),
        EnvName::Dubins => TrainerConfig::dubins_default(),
        EnvName::Grid => TrainerConfig {
            hidden: vec![64, 64],
            horizon: 50,
            lambda0: 1.0,
            nu0: 1.0,
            ..TrainerConfig::default()
        },
    }
}

fn default_horizon(env: EnvName) -> usize {
    match env {
        EnvName::Cartpole => 500,
        EnvName::Dubins => 100,
        EnvName::Grid => 50,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    env: EnvName,
    formula: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
    single_network: bool,
    no_topo: bool,
    max_env_steps: Option<usize>,
) -> Result<(), CliError> {
    if single_network && no_topo {
        return Err(input("--single-network already implies a flat curriculum; drop --no-topo"));
    }
    let mut cfg = match config {
        Some(p) => serde_json::from_str(&read_file(p)?).map_err(|e| input(format!("{}: {e}", p.display())))?,
        None => default_config(env),
    };
    cfg.seed = seed;
    if max_env_steps.is_some() {
        cfg.max_env_steps = max_env_steps;
    }
    cfg.validate().map_err(input)?;
    let (mut task, spec) = build_task(env, formula)?;
    let (levels, routing) = if single_network || no_topo {
        let merged: Vec<usize> = spec.levels.iter().flatten().copied().collect();
        (
            vec![merged],
            if single_network { Routing::Shared } else { Routing::PerState },
        )
    } else {
        (spec.levels.clone(), Routing::PerState)
    };
    std::fs::create_dir_all(out).map_err(input)?;
    let outcome = train_with(task.as_mut(), &levels, &spec.zero, routing, &cfg, |li, model| {
        let dir = out.join("checkpoints").join(format!("level{li}"));
        if let Err(e) = model.save_checkpoint(&dir) {
            eprintln!("warning: checkpoint for level {li} not written: {e}");
        }
    })
    .map_err(numeric)?;
    write_out(out, "metrics.csv", &metrics_to_csv(&outcome.metrics))?;
    outcome
        .model
        .save_checkpoint(&out.join("checkpoints").join("final"))
        .map_err(numeric)?;
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    if let Some(p) = formula {
        inputs.push(("formula", p));
    }
    if let Some(p) = config {
        inputs.push(("config", p));
    }
    write_manifest(
        out,
        "train",
        Some(seed),
        &inputs,
        serde_json::to_value(&cfg).map_err(input)?,
    )?;
    println!("levels trained: {}", outcome.duals.len());
    println!("metric rows: {}", outcome.metrics.len());
    for (li, dual) in outcome.duals.iter().enumerate() {
        println!("level {li} duals: lambda={} nu={}", dual.lambda, dual.nu);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint: &Path,
    env: EnvName,
    formula: Option<&Path>,
    episodes: usize,
    seed: u64,
    workers: usize,
    horizon: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(input("--episodes must be at least 1"));
    }
    if workers == 0 {
        return Err(input("--workers must be at least 1"));
    }
    let model = ModularApproximator::load_checkpoint(checkpoint).map_err(input)?;
    {
        // fail fast before spawning workers
        let (task, _) = build_task(env, formula)?;
        check_compat(&model, task.as_ref())?;
    }
    let horizon = horizon.unwrap_or(default_horizon(env));
    let formula_owned: Option<PathBuf> = formula.map(Path::to_path_buf);
    let workers = workers.min(episodes);
    let per_worker = episodes / workers;
    let extra = episodes % workers;
    let reports: Result<Vec<EvalReport>, CliError> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let count = per_worker + usize::from(w < extra);
            let model = model.clone();
            let formula_owned = formula_owned.clone();
            handles.push(scope.spawn(move || -> Result<EvalReport, CliError> {
                let (mut task, _) = build_task(env, formula_owned.as_deref())?;
                check_compat(&model, task.as_ref())?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64));
                Ok(evaluate(task.as_mut(), &model, count, horizon, &mut rng))
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let reports = reports?;
    let total: usize = reports.iter().map(|r| r.episodes).sum();
    let successes: usize = reports.iter().map(|r| r.successes).sum();
    let mean_length = reports
        .iter()
        .map(|r| r.mean_length * r.episodes as f64)
        .sum::<f64>()
        / total as f64;
    let mean_return = reports
        .iter()
        .map(|r| r.mean_return * r.episodes as f64)
        .sum::<f64>()
        / total as f64;
    let report = serde_json::json!({
        "episodes": total,
        "successes": successes,
        "rate": successes as f64 / total as f64,
        "mean_length": mean_length,
        "mean_return": mean_return,
    });
    let rendered = serde_json::to_string_pretty(&report).map_err(input)?;
    println!("{rendered}");
    if let Some(dir) = out {
        write_out(dir, "report.json", &rendered)?;
        write_manifest(
            dir,
            "evaluate",
            Some(seed),
            &[("checkpoint", checkpoint)],
            serde_json::json!({"episodes": episodes, "workers": workers, "horizon": horizon}),
        )?;
    }
    Ok(())
}

fn check_compat(model: &ModularApproximator, task: &(dyn TaskEnv + Send)) -> Result<(), CliError> {
    if model.input_dim != task.state_dimension() || model.action_count != task.action_count() {
        return Err(input(format!(
            "checkpoint mismatch: model expects {} state dims and {} actions, task has {} and {}",
            model.input_dim,
            model.action_count,
            task.state_dimension(),
            task.action_count()
        )));
    }
    Ok(())
}
