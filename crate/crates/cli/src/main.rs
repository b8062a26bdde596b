mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{is_switch, Sources, FLAG_KEYS};

fn common_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config").long("config").value_name("FILE").help("JSON run configuration"),
        Arg::new("preset")
            .long("preset")
            .value_name("NAME")
            .help("Starting point below the config file: paper-xnli or desk"),
        Arg::new("run-root")
            .long("run-root")
            .value_name("DIR")
            .help(format!(
                "Directory that receives the run directory [env: {}] [default: {}]",
                config::RUN_DIR_ENV,
                config::DEFAULT_RUN_ROOT
            )),
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("Override any config key, e.g. corpus.noise=0.5"),
        Arg::new("verbose").short('v').long("verbose").action(ArgAction::Count),
    ];
    for (flag, key) in FLAG_KEYS {
        let mut a = Arg::new(*flag)
            .long(*flag)
            .value_name("VALUE")
            .help(format!("Sets {key}"))
            .help_heading("Config keys");
        if is_switch(key) {
            a = a.num_args(0..=1).default_missing_value("true");
        }
        args.push(a);
    }
    args
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(common_args());
    Command::new("vmelab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Embedding-push / attention-pull cross-lingual transfer laboratory")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("gen-corpus", "Write a synthetic multilingual corpus"))
        .subcommand(sub("augment", "Write synonym-augmented training pairs"))
        .subcommand(
            sub("train", "Train and evaluate one configuration").arg(
                Arg::new("resume")
                    .long("resume")
                    .action(ArgAction::SetTrue)
                    .help("Continue from paths.checkpoint"),
            ),
        )
        .subcommand(sub("eval", "Per-language accuracy of a checkpoint"))
        .subcommand(
            sub("sweep", "Train and evaluate every cell of a grid")
                .arg(
                    Arg::new("grid-preset")
                        .long("grid-preset")
                        .value_name("NAME")
                        .help("table-a1 (layers), table-a2 (beta) or table-a3 (alpha)"),
                )
                .arg(
                    Arg::new("grid")
                        .long("grid")
                        .value_name("AXIS=V1,V2,...")
                        .action(ArgAction::Append)
                        .help("Axis values for apt_layer, alpha or beta"),
                ),
        )
        .subcommand(
            sub("project", "2-D projection of token embeddings and translation retrieval")
                .arg(
                    Arg::new("method")
                        .long("method")
                        .value_name("pca|tsne")
                        .default_value("tsne"),
                )
                .arg(
                    Arg::new("langs")
                        .long("langs")
                        .value_name("L1,L2")
                        .help("Test-set languages whose words are plotted [default: all]"),
                )
                .arg(
                    Arg::new("layer")
                        .long("layer")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("0")
                        .help("0 for the embedding table, N for layer-N token states"),
                )
                .arg(
                    Arg::new("max-points")
                        .long("max-points")
                        .value_name("N")
                        .value_parser(clap::value_parser!(usize))
                        .default_value("2000"),
                ),
        )
}

fn sources(m: &ArgMatches) -> Result<Sources<'_>, vmelab::Error> {
    let mut overrides = Vec::new();
    // Preserve command-line order so later flags win.
    let mut indexed: Vec<(usize, String, String)> = Vec::new();
    for (flag, key) in FLAG_KEYS {
        if let (Some(vals), Some(idx)) = (m.get_many::<String>(flag), m.indices_of(flag)) {
            for (v, i) in vals.zip(idx) {
                indexed.push((i, key.to_string(), v.clone()));
            }
        }
    }
    if let (Some(vals), Some(idx)) = (m.get_many::<String>("set"), m.indices_of("set")) {
        for (v, i) in vals.zip(idx) {
            let (k, val) = v
                .split_once('=')
                .ok_or_else(|| vmelab::Error::Config(format!("--set {v:?} is not KEY=VALUE")))?;
            indexed.push((i, k.trim().to_string(), val.to_string()));
        }
    }
    indexed.sort_by_key(|(i, _, _)| *i);
    overrides.extend(indexed.into_iter().map(|(_, k, v)| (k, v)));
    Ok(Sources {
        preset: m.get_one::<String>("preset").map(String::as_str),
        file: m.get_one::<String>("config").map(std::path::Path::new),
        overrides,
    })
}

fn run(name: &str, m: &ArgMatches) -> Result<(), vmelab::Error> {
    let cfg = config::resolve(&sources(m)?)?;
    let root = m
        .get_one::<String>("run-root")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os(config::RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(config::DEFAULT_RUN_ROOT));
    let run_dir = commands::create_run_dir(&root, &cfg)?;
    match name {
        "gen-corpus" => commands::gen_corpus(&cfg, &run_dir),
        "augment" => commands::augment(&cfg, &run_dir),
        "train" => commands::train(&cfg, &run_dir, m.get_flag("resume")),
        "eval" => commands::eval(&cfg, &run_dir),
        "sweep" => {
            let axes: Vec<String> = m.get_many::<String>("grid").map(|v| v.cloned().collect()).unwrap_or_default();
            commands::sweep(&cfg, &run_dir, m.get_one::<String>("grid-preset").map(String::as_str), &axes)
        }
        "project" => commands::project(
            &cfg,
            &run_dir,
            &commands::ProjectOptions {
                method: m.get_one::<String>("method").expect("defaulted").parse()?,
                langs: m
                    .get_one::<String>("langs")
                    .map(|s| s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect()),
                layer: *m.get_one::<usize>("layer").expect("defaulted"),
                max_points: *m.get_one::<usize>("max-points").expect("defaulted"),
            },
        ),
        other => unreachable!("unhandled subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let level = match sub.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vmelab {name}: {e}");
            ExitCode::from(match e {
                vmelab::Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
