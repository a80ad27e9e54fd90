//! Command-line driver: `train`, `eval`, `solve`, `gradcheck`, `verify`.
//!
//! Exit codes: 0 success, 1 failed check or run, 2 usage or configuration
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::a2c::a2c_train;
use crate::config::{parse_config, Algorithm, Config};
use crate::diagnostics::{
    bellman_check, estimator_check_policy_improvement, evaluate_greedy, fenchel_check,
    gradcheck_policy_evaluation, nn_gradient_check, return_substitution_check, variational_check,
    Report, TrainingLog,
};
use crate::envs::{build_mdp, EnvSpec, Environment, TabularEnv};
use crate::error::{Error, Result};
use crate::frl::{rngs, train};
use crate::mdp::{greedy_policy, value_iteration, Mdp, PolicyTable, QTable};
use crate::nn::{load_checkpoint, save_checkpoint, ActorCritic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "frl",
    version,
    about = "f-divergence reinforcement learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; the log and checkpoint sit next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `total_steps`.
    #[arg(long)]
    steps: Option<u64>,
    /// Environment name, e.g. `gridworld5x5`, `chain10`, `cliffwalk`.
    #[arg(long)]
    env: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train FRL or the A2C baseline and write metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Independent runs, one output set per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Greedy rollouts of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Exact optimal action values of the environment.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Solve an MDP in text form instead of a named environment.
        #[arg(long)]
        mdp: Option<PathBuf>,
    },
    /// Gradient and estimator checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Exact-math self-checks: Bellman consistency, conjugates, divergences,
    /// return substitution.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut config = match &common.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_path = out.to_string_lossy().into_owned();
    }
    if let Some(steps) = common.steps {
        config.total_steps = steps;
    }
    if let Some(env) = &common.env {
        config.env = env.clone();
    }
    config.validate()?;
    Ok(config)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Parse { .. } => EXIT_USAGE,
        _ => EXIT_FAILED,
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match run_command(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn run_command(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train { common, seeds } => cmd_train(&load_config(&common)?, &seeds, out),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => cmd_eval(&load_config(&common)?, &checkpoint, episodes, out),
        Command::Solve { common, mdp } => cmd_solve(&load_config(&common)?, mdp.as_deref(), out),
        Command::Gradcheck { common, trials } => cmd_gradcheck(&load_config(&common)?, trials, out),
        Command::Verify { common } => cmd_verify(&load_config(&common)?, out),
    }
}

fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}.seed{seed}"),
    };
    path.with_file_name(name)
}

/// Runs one configuration under `seed`.
pub fn run_training(config: &Config, seed: u64) -> Result<TrainingLog> {
    let spec = config.env_spec()?;
    match config.algorithm {
        Algorithm::Frl => train(&spec, config, seed),
        Algorithm::A2c => a2c_train(&spec, config, seed),
    }
}

fn log_text(config: &Config, log: &TrainingLog) -> String {
    let mut text = format!("# frl {}\n", env!("CARGO_PKG_VERSION"));
    text.push_str(&config.to_text());
    if let Some(last) = log.rows.last() {
        text.push_str(&format!(
            "run algorithm={} env={} seed={} rows={} final_step={} final_mean_return={} final_loss_value={}\n",
            config.algorithm.as_str(),
            config.env,
            config.seed,
            log.rows.len(),
            last.step,
            last.mean_return,
            last.loss_value
        ));
    }
    text
}

fn train_one(config: &Config, out: &Path) -> Result<String> {
    let config = Config {
        out_path: out.to_string_lossy().into_owned(),
        ..config.clone()
    };
    match run_training(&config, config.seed) {
        Ok(log) => {
            std::fs::write(out, log.to_csv())?;
            std::fs::write(out.with_extension("log"), log_text(&config, &log))?;
            if let Some(model) = &log.model {
                save_checkpoint(model, &out.with_extension("ckpt"))?;
            }
            let last = log.rows.last().map_or(0.0, |r| r.mean_return);
            Ok(format!(
                "train seed={} rows={} final_mean_return={last} csv={}",
                config.seed,
                log.rows.len(),
                out.display()
            ))
        }
        Err(Error::Diverged {
            step,
            detail,
            checkpoint,
        }) => {
            let path = out.with_extension("diverged.ckpt");
            std::fs::write(&path, checkpoint)?;
            Err(Error::Diverged {
                step,
                detail: format!("{detail}; checkpoint at {}", path.display()),
                checkpoint: Vec::new(),
            })
        }
        Err(e) => Err(e),
    }
}

fn cmd_train(config: &Config, seeds: &[u64], out: &mut dyn Write) -> Result<i32> {
    let base = PathBuf::from(&config.out_path);
    if seeds.is_empty() {
        writeln!(out, "{}", train_one(config, &base)?)?;
        return Ok(EXIT_OK);
    }
    let results: Vec<Result<String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let config = Config {
                    seed,
                    ..config.clone()
                };
                let path = seeded_path(&base, seed);
                scope.spawn(move || train_one(&config, &path))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Internal("run panicked".into())))
            })
            .collect()
    });
    let mut code = EXIT_OK;
    for r in results {
        match r {
            Ok(line) => writeln!(out, "{line}")?,
            Err(e) => {
                writeln!(out, "error: {e}")?;
                code = code.max(exit_code(&e));
            }
        }
    }
    Ok(code)
}

fn cmd_eval(
    config: &Config,
    checkpoint: &Path,
    episodes: Option<usize>,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = load_checkpoint(checkpoint)?;
    let mut env = TabularEnv::new(&config.env_spec()?)?;
    if model.n_states() != env.n_states() || model.n_actions() != env.n_actions() {
        return Err(Error::config(
            "env",
            format!(
                "checkpoint is for {} states and {} actions, `{}` has {} and {}",
                model.n_states(),
                model.n_actions(),
                config.env,
                env.n_states(),
                env.n_actions()
            ),
        ));
    }
    let episodes = episodes.unwrap_or(config.eval_episodes);
    let [_, _, mut rng] = rngs(config.seed);
    let eval = evaluate_greedy(&mut env, &model, episodes, &mut rng)?;
    writeln!(
        out,
        "eval env={} episodes={episodes} mean_return={} loss_value={}",
        config.env, eval.mean_return, eval.loss_value
    )?;
    Ok(EXIT_OK)
}

fn print_solution(mdp: &Mdp, name: &str, out: &mut dyn Write) -> Result<()> {
    let report = value_iteration(mdp, 1e-10)?;
    let greedy = greedy_policy(&report.q);
    writeln!(
        out,
        "solve env={name} states={} actions={} gamma={} iterations={}",
        mdp.n_states(),
        mdp.n_actions(),
        mdp.gamma(),
        report.iterations
    )?;
    writeln!(out, "state,action,q")?;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            writeln!(out, "{s},{a},{}", report.q.get(s, a))?;
        }
    }
    writeln!(out, "state,v,greedy_action")?;
    for s in 0..mdp.n_states() {
        let a = (0..mdp.n_actions())
            .find(|&a| greedy.prob(s, a) == 1.0)
            .unwrap_or(0);
        writeln!(out, "{s},{},{a}", report.q.get(s, a))?;
    }
    let start_value: f64 = (0..mdp.n_states())
        .map(|s| mdp.rho0()[s] * report.q.get(s, crate::policy::argmax(report.q.row(s))))
        .sum();
    writeln!(out, "optimal_start_value={start_value}")?;
    Ok(())
}

fn cmd_solve(config: &Config, mdp_path: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    match mdp_path {
        Some(path) => {
            let mdp = Mdp::from_text(&std::fs::read_to_string(path)?)?;
            print_solution(&mdp, &path.display().to_string(), out)?;
        }
        None => {
            let spec = config.env_spec()?;
            print_solution(&build_mdp(&spec)?, &spec.name(), out)?;
        }
    }
    Ok(EXIT_OK)
}

/// Two states, two actions, stochastic transitions, no terminal states.
pub fn two_state_mdp() -> Mdp {
    let transition = vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5, 0.9, 0.1];
    let reward = vec![1.0, -0.5, 0.3, 2.0];
    Mdp::new(
        2,
        2,
        transition,
        reward,
        0.9,
        vec![0.6, 0.4],
        vec![false, false],
    )
    .expect("valid constant MDP")
}

fn print_reports(reports: &[Report], out: &mut dyn Write) -> Result<i32> {
    for r in reports {
        writeln!(out, "{r}")?;
    }
    Ok(if reports.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

fn cmd_gradcheck(config: &Config, trials: usize, out: &mut dyn Write) -> Result<i32> {
    let mdp = build_mdp(&config.env_spec()?)?;
    let reports = vec![
        gradcheck_policy_evaluation(&mdp, true, trials, config.seed)?,
        gradcheck_policy_evaluation(&mdp, false, trials, config.seed.wrapping_add(1))?,
        estimator_check_policy_improvement(&two_state_mdp(), 3, 100_000, config.seed)?.report(),
        nn_gradient_check(trials, config.seed)?,
    ];
    print_reports(&reports, out)
}

fn cmd_verify(config: &Config, out: &mut dyn Write) -> Result<i32> {
    let chain = build_mdp(&EnvSpec::chain(5).with_gamma(0.9))?;
    let right = PolicyTable::deterministic(2, &[1; 5]);
    let q_chain = QTable::from_fn(5, 2, |s, a| 0.1 * s as f64 - 0.5 * a as f64);
    let slippery = build_mdp(&EnvSpec::gridworld(3, 3).with_slip(0.3).with_gamma(0.9))?;
    let biased = PolicyTable::new(9, 4, (0..9).flat_map(|_| [0.1, 0.4, 0.4, 0.1]).collect())?;
    let q_grid = QTable::from_fn(9, 4, |s, a| ((s * 4 + a) as f64 * 0.37).sin());
    let reports = vec![
        bellman_check("gridworld4x4", &build_mdp(&EnvSpec::gridworld(4, 4))?)?,
        bellman_check("cliffwalk", &build_mdp(&EnvSpec::cliff_walk(12, 4))?)?,
        fenchel_check()?,
        variational_check(1000, config.seed)?,
        rename(
            return_substitution_check(&chain, &right, &q_chain, 6)?.report(),
            "return_substitution_deterministic",
        ),
        rename(
            return_substitution_check(&slippery, &biased, &q_grid, 4)?.report(),
            "return_substitution_slip",
        ),
    ];
    print_reports(&reports, out)
}

fn rename(mut report: Report, name: &str) -> Report {
    report.name = name.into();
    report
}
