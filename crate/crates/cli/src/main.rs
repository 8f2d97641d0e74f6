mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mellow_core::output::{fmt_float, write_atomic};
use mellow_core::solver::{quantile_mass_report, write_quantiles_csv};
use mellow_core::tasks::{evaluate_sampler, levenshtein, mode_metrics, BitSequenceTask, ModeTracker};
use mellow_core::train::train_with_observer;
use mellow_core::uncertainty::{boundary_trace_2d, minkowski_membership, write_trace_csv, UncertaintySetSpec};
use mellow_core::{solve_backward, terminal_distribution, QFunction, RegularizerKind, Token};
use serde_json::json;

use config::{RunConfig, Task};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(mellow_core::Error),
}

impl From<mellow_core::Error> for CliError {
    fn from(e: mellow_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "mellow", version, about = "Exact solving, training and evaluation with general mellowmax operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GmFlags {
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Exact backward recursion over an enumerable task.
    Solve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gm: GmFlags,
    },
    /// Trains a tabular Q-function on sampled trajectories.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gm: GmFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Temperature-sweep sampling and diverse top-k selection from a snapshot.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        gm: GmFlags,
        /// Q snapshot TSV; defaults to q_snapshot.tsv in the output directory.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Membership margins of a two-action uncertainty set over a grid.
    Uset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<RegularizerKind>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        omega: Option<f64>,
        /// Reference distribution, comma separated.
        #[arg(long, value_delimiter = ',')]
        d: Option<Vec<f64>>,
        /// Base reward, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        r0: Option<Vec<f64>>,
        /// Points per axis.
        #[arg(long)]
        grid: Option<usize>,
        /// Axis range as `lo,hi`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        range: Option<Vec<f64>>,
        /// Number of steps in the Minkowski sum.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Draws distinct random bit-string modes.
    GenModes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.out = o.clone();
    }
    Ok(config)
}

fn apply_gm(config: &mut RunConfig, gm: &GmFlags) {
    let p = &mut config.params;
    if let Some(v) = gm.q {
        p.q = v;
    }
    if let Some(v) = gm.alpha {
        p.alpha = v;
    }
    if let Some(v) = gm.omega {
        p.omega = v;
    }
    if let Some(v) = gm.beta {
        p.beta = v;
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let (common, config) = match command {
        Command::Solve { common, gm } => {
            let mut config = load(&common)?;
            apply_gm(&mut config, &gm);
            (common, Job::Solve(config))
        }
        Command::Train { common, gm, steps, learning_rate, batch_size } => {
            let mut config = load(&common)?;
            apply_gm(&mut config, &gm);
            if let Some(v) = steps {
                config.train.steps = v;
            }
            if let Some(v) = learning_rate {
                config.train.learning_rate = v;
            }
            if let Some(v) = batch_size {
                config.train.batch_size = v;
            }
            (common, Job::Train(config))
        }
        Command::Eval { common, gm, snapshot, top_k, samples } => {
            let mut config = load(&common)?;
            apply_gm(&mut config, &gm);
            if let Some(v) = top_k {
                config.eval.top_k = v;
            }
            if let Some(v) = samples {
                config.eval.samples_per_temperature = v;
            }
            let snapshot = snapshot.unwrap_or_else(|| config.out.join("q_snapshot.tsv"));
            (common, Job::Eval(config, snapshot))
        }
        Command::Uset { common, kind, q, omega, d, r0, grid, range, steps } => {
            let mut config = load(&common)?;
            let u = &mut config.uset;
            if let Some(v) = kind {
                u.kind = v;
                if v == RegularizerKind::NegShannon && d.is_none() {
                    u.d = vec![0.5, 0.5];
                }
            }
            if let Some(v) = q {
                u.q = v;
            }
            if let Some(v) = omega {
                u.omega = v;
            }
            if let Some(v) = d {
                u.d = v;
            }
            if let Some(v) = r0 {
                u.r0 = v;
            }
            if let Some(v) = grid {
                u.grid = v;
            }
            if let Some(v) = range {
                if v.len() != 2 {
                    return Err(CliError::Usage(format!("--range takes lo,hi, got {} values", v.len())));
                }
                u.range = (v[0], v[1]);
            }
            if let Some(v) = steps {
                u.steps = v;
            }
            (common, Job::Uset(config))
        }
        Command::GenModes { common, n, count } => {
            let config = load(&common)?;
            (common, Job::GenModes(config, n, count))
        }
    };
    if common.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(|| config.run())
}

enum Job {
    Solve(RunConfig),
    Train(RunConfig),
    Eval(RunConfig, PathBuf),
    Uset(RunConfig),
    GenModes(RunConfig, Option<usize>, Option<usize>),
}

impl Job {
    fn run(self) -> Result<(), CliError> {
        match self {
            Job::Solve(c) => solve(&c),
            Job::Train(c) => train(&c),
            Job::Eval(c, snapshot) => eval(&c, &snapshot),
            Job::Uset(c) => uset(&c),
            Job::GenModes(c, n, count) => gen_modes(&c, n, count),
        }
    }
}

fn write_resolved(config: &RunConfig) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(config).map_err(mellow_core::Error::from)?;
    write_atomic(&config.out.join("config.resolved.json"), format!("{text}\n").as_bytes())?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn action_label(space: &mellow_core::SequenceSpace, action: usize) -> String {
    if action == space.stop_action() {
        "STOP".into()
    } else {
        space.alphabet()[action].clone()
    }
}

fn solve(config: &RunConfig) -> Result<(), CliError> {
    let params = config.gm_params()?;
    let task = config.task()?;
    let (space, reward) = (task.space(), task.reward());
    if let Task::Table { table, .. } = &task {
        table.check_covers(space)?;
    }
    let solution = solve_backward(space, reward, &params)?;
    let dist = terminal_distribution(space, &solution.policy)?;

    let mut values = String::from("state,value\n");
    for (prefix, v) in solution.values.iter() {
        writeln!(values, "{},{}", space.render(&prefix), fmt_float(v)).unwrap();
    }
    let mut policy = String::from("state,action,prob\n");
    for (prefix, row) in solution.policy.iter() {
        for (pos, p) in row.iter().enumerate() {
            let action = space.action_at(prefix.len(), pos)?;
            writeln!(policy, "{},{},{}", space.render(&prefix), action_label(space, action), fmt_float(*p)).unwrap();
        }
    }
    let mut terminal = String::from("sequence,prob,reward\n");
    for (x, p) in &dist.entries {
        writeln!(terminal, "{},{},{}", space.render(x), fmt_float(*p), fmt_float(reward.reward(x)?)).unwrap();
    }
    let quantiles = quantile_mass_report(space, reward, &solution.policy, config.quantile_buckets)?;

    write_resolved(config)?;
    write_atomic(&config.out.join("values.csv"), values.as_bytes())?;
    write_atomic(&config.out.join("policy.csv"), policy.as_bytes())?;
    write_atomic(&config.out.join("terminal_dist.csv"), terminal.as_bytes())?;
    write_atomic(&config.out.join("quantiles.csv"), &csv_bytes(|b| write_quantiles_csv(&quantiles, b))?)?;
    println!(
        "solved {} terminals; root value {}",
        dist.entries.len(),
        fmt_float(solution.values.root())
    );
    Ok(())
}

fn train(config: &RunConfig) -> Result<(), CliError> {
    let tc = config.train_config()?;
    let task = config.task()?;
    let (space, reward) = (task.space(), task.reward());
    let p = tc.params;
    if p.is_gfn() {
        println!("mellow train: GFN mode (q=0, omega=1), beta={}", p.beta);
    } else {
        println!("mellow train: GM mode (q={}, alpha={}, omega={}), beta={}", p.q, p.alpha, p.omega, p.beta);
    }
    let mut tracker = match &task {
        Task::Bitseq { task, .. } => Some((task, ModeTracker::new(task))),
        Task::Table { .. } => None,
    };
    let (q, log) = train_with_observer(space, reward, &tc, |_, batch| {
        if let Some((task, tracker)) = tracker.as_mut() {
            for t in batch {
                tracker.observe(task, &t.terminal_object);
            }
        }
    })?;

    let mut snapshot = Vec::new();
    q.write_tsv(space, &mut snapshot)?;
    write_resolved(config)?;
    write_atomic(&config.out.join("q_snapshot.tsv"), &snapshot)?;
    write_atomic(&config.out.join("train_log.csv"), &csv_bytes(|b| log.write_csv(b))?)?;
    if let Some(last) = log.records.last() {
        println!("step {}: loss {}, mean reward {}", last.step, fmt_float(last.loss), fmt_float(last.mean_reward));
    }
    if let Some((task, tracker)) = &tracker {
        let m = tracker.metrics(config.found_radius);
        println!("modes found during training: {}/{}", m.modes_found, task.modes.len());
    }
    Ok(())
}

fn eval(config: &RunConfig, snapshot: &Path) -> Result<(), CliError> {
    let params = config.gm_params()?;
    let task = config.task()?;
    let (space, reward) = (task.space(), task.reward());
    let text = std::fs::read_to_string(snapshot)
        .map_err(|e| CliError::Usage(format!("cannot read snapshot {}: {e}", snapshot.display())))?;
    let q = QFunction::read_tsv(space, &text)?;
    let protocol = &config.eval;

    let (report, delta) = match &task {
        Task::Bitseq { task: bt, .. } => {
            let delta = protocol.resolved_delta(bt.n, bt.n);
            let metric = |a: &Vec<Token>, b: &Vec<Token>| levenshtein(&bt.bits(a), &bt.bits(b)) as f64;
            (evaluate_sampler(space, reward, &q, &params, protocol, delta, metric, config.seed)?, delta)
        }
        Task::Table { .. } => {
            let delta = protocol.resolved_delta(space.min_len(), space.max_len());
            let metric = |a: &Vec<Token>, b: &Vec<Token>| levenshtein(a, b) as f64;
            (evaluate_sampler(space, reward, &q, &params, protocol, delta, metric, config.seed)?, delta)
        }
    };

    let mut metrics = String::from("metric,value\n");
    writeln!(metrics, "mean_mode_reward,{}", fmt_float(report.mean_mode_reward)).unwrap();
    writeln!(metrics, "k_requested,{}", protocol.top_k).unwrap();
    writeln!(metrics, "k_selected,{}", report.k_selected).unwrap();
    writeln!(metrics, "pool_size,{}", report.pool.len()).unwrap();
    writeln!(metrics, "delta,{}", fmt_float(delta)).unwrap();
    if let Task::Bitseq { task: bt, .. } = &task {
        let m = mode_metrics(bt, &report.pool, config.found_radius);
        writeln!(metrics, "found_radius,{}", config.found_radius).unwrap();
        writeln!(metrics, "modes_found,{}", m.modes_found).unwrap();
        writeln!(metrics, "num_modes,{}", bt.modes.len()).unwrap();
        writeln!(metrics, "avg_min_distance,{}", fmt_float(m.avg_min_distance)).unwrap();
    }
    for t in &report.per_temperature {
        let tag = fmt_float(t.temperature);
        writeln!(metrics, "mean_reward@t={tag},{}", fmt_float(t.mean_reward)).unwrap();
        writeln!(metrics, "max_reward@t={tag},{}", fmt_float(t.max_reward)).unwrap();
    }

    let json = json!({
        "protocol": {
            "temperatures": protocol.temperatures,
            "samples_per_temperature": protocol.samples_per_temperature,
            "top_k": protocol.top_k,
            "delta": delta,
            "delta_rule": if protocol.delta.is_some() { "configured" } else { "0.25 * (min_len + max_len) / 2" },
        },
        "k_requested": protocol.top_k,
        "k_selected": report.k_selected,
        "k_short": report.k_selected < protocol.top_k,
        "mean_mode_reward": report.mean_mode_reward,
        "objects": report.objects,
    });
    let text = serde_json::to_string_pretty(&json).map_err(mellow_core::Error::from)?;
    write_resolved(config)?;
    write_atomic(&config.out.join("eval_report.json"), format!("{text}\n").as_bytes())?;
    write_atomic(&config.out.join("metrics.csv"), metrics.as_bytes())?;
    println!(
        "selected {}/{} objects, mean reward {}",
        report.k_selected,
        protocol.top_k,
        fmt_float(report.mean_mode_reward)
    );
    Ok(())
}

fn uset(config: &RunConfig) -> Result<(), CliError> {
    let u = &config.uset;
    let spec = match u.kind {
        RegularizerKind::NegShannon => UncertaintySetSpec::neg_shannon(u.omega, u.d.len()),
        RegularizerKind::Kl => UncertaintySetSpec::kl(u.omega, u.d.clone()),
        RegularizerKind::Gm => UncertaintySetSpec::gm(u.q, u.omega, u.d.clone()),
    }
    .with_base_reward(u.r0.clone());
    spec.validate()?;
    let rows = boundary_trace_2d(&spec, u.grid, u.range.0, u.range.1, u.steps)?;
    let k = u.steps as f64;
    let base: Vec<f64> = (0..spec.num_actions()).map(|a| k * spec.r0.get(a).copied().unwrap_or(0.0)).collect();
    let origin = minkowski_membership(&spec, u.steps, &base)?;

    write_resolved(config)?;
    write_atomic(&config.out.join("uset_boundary.csv"), &csv_bytes(|b| write_trace_csv(&rows, b))?)?;
    println!("margin at delta=0: {} ({:?})", fmt_float(origin.margin), origin.region);
    Ok(())
}

fn gen_modes(config: &RunConfig, n: Option<usize>, count: Option<usize>) -> Result<(), CliError> {
    let (task_n, task_m) = match &config.task {
        Some(config::TaskSpec::Bitseq { n, num_modes, .. }) => (Some(*n), Some(*num_modes)),
        _ => (None, None),
    };
    let n = n.or(task_n).ok_or_else(|| CliError::Usage("gen-modes needs --n or a bitseq task".into()))?;
    let m = count.or(task_m).unwrap_or(3);
    let modes = BitSequenceTask::random_modes(n, m, config.seed)?;
    write_resolved(config)?;
    write_atomic(&config.out.join("modes.txt"), BitSequenceTask::format_modes(&modes).as_bytes())?;
    println!("wrote {m} modes of {n} bits");
    Ok(())
}
