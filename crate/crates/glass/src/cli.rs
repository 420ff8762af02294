//! Command line: one subcommand per experiment operation.
//!
//! Settings layer as defaults, then `--config FILE`, then per-key flags
//! such as `--synth-n-users 100`, then `--set key=value`.

use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::{RunConfig, KEYS};
use crate::error::{GlassError, Result};
use crate::runner::{self, Artifacts};

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

pub fn command() -> Command {
    let mut cmd = Command::new("glass")
        .about("Generative recommender with long-history tier features and semantic hard search")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(Arg::new("config").long("config").global(true).value_name("FILE").help("Run configuration file"))
        .arg(
            Arg::new("set")
                .long("set")
                .global(true)
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .help("Override one configuration key"),
        )
        .arg(
            Arg::new("artifacts")
                .long("artifacts")
                .global(true)
                .value_name("DIR")
                .help("Artifact root (default $GLASS_ARTIFACTS, else ./artifacts)"),
        )
        .arg(Arg::new("verbose").short('v').long("verbose").global(true).action(ArgAction::Count));
    for (key, doc) in KEYS {
        cmd = cmd.arg(
            Arg::new(key.to_string())
                .long(flag_name(key))
                .global(true)
                .value_name("V")
                .help(doc.to_string())
                .hide_short_help(true),
        );
    }
    cmd.subcommand(Command::new("synth").about("Generate the synthetic corpus and print its statistics"))
        .subcommand(Command::new("fit-quantizer").about("Fit the residual quantizer and write it"))
        .subcommand(
            Command::new("train")
                .about("Train with early stopping on validation Hit@10")
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("Continue from last.ckpt")),
        )
        .subcommand(
            Command::new("eval").about("Evaluate the best checkpoint on the test split").arg(
                Arg::new("trace")
                    .long("trace")
                    .action(ArgAction::SetTrue)
                    .help("Also write per-example beam traces"),
            ),
        )
        .subcommand(Command::new("ablate").about("Train and evaluate the feature lattice and codebook resizing"))
        .subcommand(Command::new("report").about("Tabulate metrics of every run"))
        .subcommand(Command::new("config").about("Print the resolved configuration"))
}

pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(&PathBuf::from(p))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| GlassError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn run(m: &ArgMatches) -> Result<String> {
    let cfg = resolve_config(m)?;
    let art = Artifacts::resolve(m.get_one::<String>("artifacts").map(PathBuf::from));
    match m.subcommand() {
        Some(("synth", _)) => Ok(runner::synth(&cfg, &art)?.table()),
        Some(("fit-quantizer", _)) => {
            let corpus = runner::load_corpus(&cfg, &art)?;
            let q = runner::fit_quantizer(&cfg, &art, &corpus)?;
            Ok(format!(
                "{}\nitems {}  max suffix {}\n",
                art.quantizer(&cfg).display(),
                q.assignments.len(),
                q.max_suffix()
            ))
        }
        Some(("train", sub)) => {
            let out = runner::train(&cfg, &art, sub.get_flag("resume"))?;
            Ok(format!(
                "steps {}  best step {}  best val hit@10 {:.4}\n",
                out.steps, out.best_step, out.best_val_hit10
            ))
        }
        Some(("eval", sub)) => {
            let doc = runner::eval(&cfg, &art)?;
            if sub.get_flag("trace") {
                runner::write_traces(&cfg, &art)?;
            }
            doc.to_json()
        }
        Some(("ablate", _)) => Ok(runner::render_table(&runner::ablate(&cfg, &art)?)),
        Some(("report", _)) => {
            let docs = runner::collect_metrics(&art)?;
            Ok(runner::render_table(&runner::ablation_table(&docs)))
        }
        Some(("config", _)) => Ok(cfg.to_file_string()),
        _ => Err(GlassError::Config("missing subcommand".into())),
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match m.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&m) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
