mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;
use sfmamba_core::data::{make_benchmark_pair, Dataset};
use sfmamba_core::model::{load_checkpoint, save_checkpoint, Checkpoint};
use sfmamba_core::pipeline::{adapt_target, evaluate, train_source, RunConfig};

use config::{ConfigError, Settings, KEYS, SEED_ENV};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => EXIT_IO,
            CliError::Validation(_) => EXIT_VALIDATION,
        }
    }
}

impl From<sfmamba_core::Error> for CliError {
    fn from(e: sfmamba_core::Error) -> Self {
        use sfmamba_core::Error as E;
        match e {
            E::Io(_)
            | E::MissingFile(_)
            | E::BadMagic { .. }
            | E::Truncated
            | E::UnsupportedVersion { .. } => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn path_arg(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn with_settings(cmd: Command) -> Command {
    let cmd = cmd.arg(path_arg("config", "key = value config file", false));
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help(*help)
                .action(ArgAction::Set),
        )
    })
}

fn cli() -> Command {
    Command::new("sfmamba")
        .about("Source-free adaptation of a selective-scan vision model on synthetic domain-shift data")
        .after_help(format!("The seed may also be set through {SEED_ENV}."))
        .subcommand_required(true)
        .subcommand(with_settings(
            Command::new("gen-data")
                .about("Generate a source/target benchmark pair into <out>/source and <out>/target")
                .arg(path_arg("out", "output directory", true)),
        ))
        .subcommand(with_settings(
            Command::new("train-source")
                .about("Train on the labeled source set; writes <out>/source.ckpt")
                .arg(path_arg("source", "source dataset directory", true))
                .arg(path_arg("out", "output directory", true)),
        ))
        .subcommand(with_settings(
            Command::new("adapt")
                .about("Adapt a source checkpoint to the unlabeled target set; writes <out>/adapted.ckpt")
                .arg(path_arg("ckpt", "source checkpoint", true))
                .arg(path_arg("target", "target dataset directory", true))
                .arg(path_arg("out", "output directory", true)),
        ))
        .subcommand(with_settings(
            Command::new("eval")
                .about("Evaluate a checkpoint on a dataset")
                .arg(path_arg("ckpt", "checkpoint", true))
                .arg(path_arg("data", "dataset directory", true))
                .arg(path_arg("out", "output directory for metrics.jsonl", false)),
        ))
        .subcommand(with_settings(
            Command::new("ablate")
                .about("Run the {±Ch-VSS, ±SCS, ±UPA filter} grid; one directory per run under <out>")
                .arg(path_arg("source", "source dataset directory", true))
                .arg(path_arg("target", "target dataset directory", true))
                .arg(path_arg("out", "output directory", true)),
        ))
}

fn settings(m: &ArgMatches) -> Result<Settings> {
    let mut s = match m.get_one::<PathBuf>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", p.display())))?;
            Settings::from_map(sfmamba_core::kv::parse(&text)?)?
        }
        None => Settings::default(),
    };
    if let Ok(seed) = std::env::var(SEED_ENV) {
        s.set("seed", &seed);
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            s.set(key, v);
        }
    }
    Ok(s)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::Io(format!(
            "dataset directory not found: {}",
            dir.display()
        )));
    }
    Ok(Dataset::load(dir)?)
}

fn load_ckpt(p: &Path) -> Result<Checkpoint> {
    if !p.is_file() {
        return Err(CliError::Io(format!(
            "checkpoint not found: {}",
            p.display()
        )));
    }
    Ok(load_checkpoint(p)?)
}

fn metrics_writer(out: &Path) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    Ok(BufWriter::new(File::create(out.join("metrics.jsonl"))?))
}

fn emit(sink: &mut dyn Write, value: serde_json::Value) -> Result<()> {
    writeln!(sink, "{value}")?;
    Ok(())
}

fn config_record(command: &str, s: &Settings) -> serde_json::Value {
    json!({ "kind": "config", "command": command, "settings": s.entries() })
}

fn gen_data(m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    let cfg = s.benchmark_config()?;
    let seed = s.run_config()?.seed;
    let out = path(m, "out");
    let (src, tgt) = make_benchmark_pair(&cfg, seed)?;
    let mut sink = metrics_writer(out)?;
    emit(&mut sink, config_record("gen-data", &s))?;
    for (name, ds) in [("source", &src), ("target", &tgt)] {
        ds.save(&out.join(name))?;
        emit(
            &mut sink,
            json!({
                "kind": "dataset",
                "split": name,
                "n": ds.len(),
                "spurious_strength": ds.spec.spurious_strength,
                "noise_std": ds.spec.noise_std,
            }),
        )?;
    }
    sink.flush()?;
    Ok(())
}

fn run_source(cfg: &RunConfig, src: &Dataset, out: &Path, s: &Settings) -> Result<Checkpoint> {
    let mut sink = metrics_writer(out)?;
    emit(&mut sink, config_record("train-source", s))?;
    let ck = train_source(cfg, src, &mut sink)?;
    save_checkpoint(&out.join("source.ckpt"), &ck)?;
    sink.flush()?;
    Ok(ck)
}

fn run_adapt(
    cfg: &RunConfig,
    ck: &Checkpoint,
    tgt: &Dataset,
    out: &Path,
    s: &Settings,
) -> Result<(f64, f64)> {
    let mut sink = metrics_writer(out)?;
    emit(&mut sink, config_record("adapt", s))?;
    let before = evaluate(&ck.model, tgt)?.accuracy;
    let adapted = adapt_target(cfg, ck, tgt, &mut sink)?;
    let after = evaluate(&adapted.model, tgt)?.accuracy;
    emit(
        &mut sink,
        json!({ "kind": "summary", "source_only_target_acc": before, "adapted_target_acc": after }),
    )?;
    save_checkpoint(&out.join("adapted.ckpt"), &adapted)?;
    sink.flush()?;
    Ok((before, after))
}

fn cmd_train_source(m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    let cfg = s.run_config()?;
    let src = load_dataset(path(m, "source"))?;
    run_source(&cfg, &src, path(m, "out"), &s)?;
    Ok(())
}

fn cmd_adapt(m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    let ck = load_ckpt(path(m, "ckpt"))?;
    let cfg = RunConfig {
        model: ck.model.config,
        ..s.run_config()?
    };
    let tgt = load_dataset(path(m, "target"))?;
    let (before, after) = run_adapt(&cfg, &ck, &tgt, path(m, "out"), &s)?;
    println!("target accuracy {before:.4} -> {after:.4}");
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    let ck = load_ckpt(path(m, "ckpt"))?;
    let data = load_dataset(path(m, "data"))?;
    let ev = evaluate(&ck.model, &data)?;
    let record = json!({
        "kind": "eval",
        "phase": ck.phase.name(),
        "accuracy": ev.accuracy,
        "per_class": ev.per_class,
    });
    println!("{record}");
    if let Some(out) = m.get_one::<PathBuf>("out") {
        let mut sink = metrics_writer(out)?;
        emit(&mut sink, config_record("eval", &s))?;
        emit(&mut sink, record)?;
        sink.flush()?;
    }
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    let base = s.run_config()?;
    let src = load_dataset(path(m, "source"))?;
    let tgt = load_dataset(path(m, "target"))?;
    let out = path(m, "out");
    let mut sink = metrics_writer(out)?;
    emit(&mut sink, config_record("ablate", &s))?;
    let chvss = if base.model.n_chvss == 0 {
        vec![0]
    } else {
        vec![base.model.n_chvss, 0]
    };
    for l in chvss {
        let mut cfg = base.clone();
        cfg.model.n_chvss = l;
        let ck = run_source(&cfg, &src, &out.join(format!("chvss{l}")), &s)?;
        for (scs, upa) in [(true, true), (false, true), (true, false), (false, false)] {
            let run = RunConfig {
                use_scs: scs,
                use_upa_filter: upa,
                ..cfg.clone()
            };
            let dir = out.join(format!(
                "chvss{l}_scs{}_upa{}",
                u8::from(scs),
                u8::from(upa)
            ));
            let (before, after) = run_adapt(&run, &ck, &tgt, &dir, &s)?;
            println!("n_chvss={l} scs={scs} upa_filter={upa}: {before:.4} -> {after:.4}");
            emit(
                &mut sink,
                json!({
                    "kind": "ablate",
                    "n_chvss": l,
                    "use_scs": scs,
                    "use_upa_filter": upa,
                    "source_only_target_acc": before,
                    "adapted_target_acc": after,
                }),
            )?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match matches.subcommand() {
        Some(("gen-data", m)) => gen_data(m),
        Some(("train-source", m)) => cmd_train_source(m),
        Some(("adapt", m)) => cmd_adapt(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("ablate", m)) => cmd_ablate(m),
        _ => unreachable!("subcommand_required"),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
