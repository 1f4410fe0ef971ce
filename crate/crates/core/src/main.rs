use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use metadapt::cli_report::{
    evaluate_methods, render_table, run_gradcheck, train_am, train_meta_model, GradTarget,
    MethodSpec, RunConfig,
};
use metadapt::meta_learner::{load_meta, save_meta, InputVariant, MetaParams};
use metadapt::meta_training::TargetRegime;
use metadapt::nn_core::io::{load_model, save_model};
use metadapt::speaker_sim::{generate_corpus, load_dataset, Corpus};

/// A command-line mistake (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

/// A numerical failure outside the library's own errors (exit code 4).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct NumericalFailure(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(
    name = "metadapt",
    version,
    about = "Meta-learned speaker adaptation on a synthetic corpus"
)]
struct Cli {
    /// Worker threads for per-speaker evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Corpus seed (overrides the config).
        #[arg(long, env = "MLAD_SEED")]
        seed: Option<u64>,
    },
    /// Train the speaker-independent model.
    TrainAm {
        #[arg(long)]
        data: PathBuf,
        /// Output prefix: writes PREFIX.json, PREFIX.bin and PREFIX.log.ndjson.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, env = "MLAD_SEED")]
        seed: Option<u64>,
    },
    /// Train the meta-learner on chunk pairs of the train/val speakers.
    TrainMeta {
        /// Prefix of the speaker-independent model.
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output prefix: writes PREFIX.meta.json, PREFIX.meta.bin and PREFIX.log.ndjson.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// sup or unsup.
        #[arg(long)]
        mode: Option<String>,
        /// value or position.
        #[arg(long)]
        input_variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, env = "MLAD_SEED")]
        seed: Option<u64>,
    },
    /// Adapt to every test speaker and report cross-entropy and frame error rate.
    AdaptEval {
        #[arg(long)]
        am: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of original,lhuc,all,linear,meta.
        #[arg(long, default_value = "original,lhuc,all,linear,meta")]
        methods: String,
        /// Meta-learner prefix, optionally labelled: PATH or LABEL=PATH. Repeatable.
        #[arg(long)]
        meta: Vec<String>,
        #[arg(long)]
        seconds: Option<f64>,
        /// Adaptation labels: sup (true) or unsup (model predictions).
        #[arg(long, default_value = "sup")]
        mode: String,
        /// Report JSON path; the text table goes next to it with a .txt extension.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// am, lhuc, linear, meta-step or meta-loss.
        #[arg(long)]
        target: String,
        #[arg(long, env = "MLAD_SEED", default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))
        }
    }
}

/// Run config with the corpus section taken from the dataset itself.
fn config_for(corpus: &Corpus, path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let mut cfg = load_config(path)?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn open_dataset(dir: &Path) -> anyhow::Result<Corpus> {
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn parse_flag<T: std::str::FromStr<Err = metadapt::Error>>(
    value: Option<&str>,
) -> anyhow::Result<Option<T>> {
    value
        .map(|v| v.parse::<T>().map_err(|e| usage(e.to_string())))
        .transpose()
}

fn gen_data(config: &Path, out: &Path, force: bool, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg = load_config(Some(config))?;
    if let Some(s) = seed {
        cfg.corpus.seed = s;
    }
    let non_empty = out.is_dir()
        && fs::read_dir(out)
            .with_context(|| format!("listing {}", out.display()))?
            .next()
            .is_some();
    if non_empty && !force {
        return Err(usage(format!(
            "output directory {} is not empty (use --force to overwrite)",
            out.display()
        )));
    }
    let corpus = generate_corpus(&cfg.corpus)?;
    metadapt::speaker_sim::save_dataset(out, &corpus)?;
    for (name, speakers) in [
        ("am", &corpus.am),
        ("train", &corpus.train),
        ("val", &corpus.val),
        ("test", &corpus.test),
    ] {
        let frames: usize = speakers
            .iter()
            .flat_map(|s| &s.utterances)
            .map(|u| u.frames.len())
            .sum();
        println!(
            "{name:<6} {:>3} speakers {:>8} frames",
            speakers.len(),
            frames
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train_am_cmd(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let corpus = open_dataset(data)?;
    let mut cfg = config_for(&corpus, config)?;
    if let Some(e) = epochs {
        cfg.am.epochs = e;
    }
    if let Some(l) = lr {
        cfg.am.learning_rate = l;
    }
    if let Some(s) = seed {
        cfg.am.seed = s;
    }
    cfg.validate()?;
    let (spec, outcome) = train_am(&corpus, &cfg)?;
    save_model(out, &spec, &outcome.theta)?;
    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    write_file(&with_suffix(out, ".log.ndjson"), &log)?;
    let best = &outcome.log[outcome.best_epoch];
    println!(
        "selected epoch {}: val CE {:.4}, val FER {:.2}%",
        best.epoch,
        best.val_ce,
        100.0 * best.val_fer
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_meta_cmd(
    am: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    mode: Option<&str>,
    input_variant: Option<&str>,
    steps: Option<usize>,
    hidden: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let corpus = open_dataset(data)?;
    let mut cfg = config_for(&corpus, config)?;
    if let Some(m) = parse_flag::<TargetRegime>(mode)? {
        cfg.meta.mode = m;
    }
    if let Some(v) = parse_flag::<InputVariant>(input_variant)? {
        cfg.meta.input_variant = v;
    }
    if let Some(s) = steps {
        cfg.meta.steps = s;
    }
    if let Some(h) = hidden {
        cfg.meta.hidden = h;
    }
    if let Some(l) = lr {
        cfg.meta.learning_rate = l;
    }
    if let Some(e) = epochs {
        cfg.meta.epochs = e;
    }
    if let Some(s) = seed {
        cfg.meta.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (spec, theta) =
        load_model(am).with_context(|| format!("loading model {}", am.display()))?;
    if spec != cfg.model_spec()? {
        bail!(metadapt::Error::Shape(
            "model does not match the dataset and config".into()
        ));
    }
    let m = &cfg.meta;
    println!(
        "meta-learner: H={}, lr={}, T={}, mode={}, input={}, epochs={}",
        m.hidden, m.learning_rate, m.steps, m.mode, m.input_variant, m.epochs
    );
    if m.mode == TargetRegime::Unsupervised {
        println!("adaptation chunks relabelled with the speaker-independent model's predictions");
    }
    let log_path = with_suffix(out, ".log.ndjson");
    if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let outcome = train_meta_model(&corpus, &spec, &theta, &cfg, cfg.meta.mode, |rec| {
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}") {
            write_err.get_or_insert(e);
        }
        println!(
            "epoch {:>3}  train J {:.4}  val J {:.4}",
            rec.epoch, rec.train_j, rec.val_j
        );
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    save_meta(out, &outcome.params)?;
    println!(
        "best val J {:.4} at epoch {}",
        outcome.best_val_j, outcome.best_epoch
    );
    Ok(())
}

/// `PATH` or `LABEL=PATH`.
fn parse_meta_arg(arg: &str, count: usize) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ if count == 1 => ("META".to_string(), PathBuf::from(arg)),
        _ => (format!("META:{arg}"), PathBuf::from(arg)),
    }
}

#[allow(clippy::too_many_arguments)]
fn adapt_eval_cmd(
    am: &Path,
    data: &Path,
    methods: &str,
    meta_args: &[String],
    seconds: Option<f64>,
    mode: &str,
    report_path: &Path,
    config: Option<&Path>,
    threads: usize,
) -> anyhow::Result<()> {
    let mode: TargetRegime = mode
        .parse()
        .map_err(|e: metadapt::Error| usage(e.to_string()))?;
    let names: Vec<&str> = methods
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        return Err(usage("--methods is empty"));
    }
    for n in &names {
        if !["original", "lhuc", "all", "linear", "meta"].contains(n) {
            return Err(usage(format!("unknown method {n:?}")));
        }
    }
    if names.contains(&"meta") && meta_args.is_empty() {
        return Err(usage("method meta requires --meta"));
    }
    let corpus = open_dataset(data)?;
    let mut cfg = config_for(&corpus, config)?;
    if let Some(s) = seconds {
        cfg.adaptation.seconds = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (spec, theta) =
        load_model(am).with_context(|| format!("loading model {}", am.display()))?;

    let mut metas: Vec<(String, MetaParams)> = Vec::new();
    if names.contains(&"meta") {
        for arg in meta_args {
            let (label, path) = parse_meta_arg(arg, meta_args.len());
            let params = load_meta(&path)
                .with_context(|| format!("loading meta-learner {}", path.display()))?;
            metas.push((label, params));
        }
    }
    let mut specs = Vec::new();
    for n in &names {
        match *n {
            "original" => specs.push(MethodSpec::Original),
            "lhuc" => specs.push(MethodSpec::Lhuc),
            "all" => specs.push(MethodSpec::All),
            "linear" => specs.push(MethodSpec::Linear),
            _ => specs.extend(metas.iter().map(|(label, params)| MethodSpec::Meta {
                label: label.clone(),
                params,
            })),
        }
    }
    let report = evaluate_methods(&spec, &theta, &corpus, &cfg, &specs, mode, threads.max(1))?;
    let table = render_table(&report);
    write_file(report_path, &report.to_json()?)?;
    write_file(&report_path.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck_cmd(target: &str, seed: u64, corrupt: bool) -> anyhow::Result<()> {
    let target: GradTarget = target
        .parse()
        .map_err(|e: metadapt::Error| usage(e.to_string()))?;
    let outcome = run_gradcheck(target, seed, corrupt)?;
    println!("{outcome}");
    if !outcome.passed() {
        return Err(NumericalFailure(format!(
            "max relative error {:.3e} exceeds the tolerance",
            outcome.max_rel_error()
        ))
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            config,
            out,
            force,
            seed,
        } => gen_data(&config, &out, force, seed),
        Command::TrainAm {
            data,
            out,
            config,
            epochs,
            lr,
            seed,
        } => train_am_cmd(&data, &out, config.as_deref(), epochs, lr, seed),
        Command::TrainMeta {
            am,
            data,
            out,
            config,
            mode,
            input_variant,
            steps,
            hidden,
            lr,
            epochs,
            seed,
        } => train_meta_cmd(
            &am,
            &data,
            &out,
            config.as_deref(),
            mode.as_deref(),
            input_variant.as_deref(),
            steps,
            hidden,
            lr,
            epochs,
            seed,
        ),
        Command::AdaptEval {
            am,
            data,
            methods,
            meta,
            seconds,
            mode,
            report,
            config,
        } => adapt_eval_cmd(
            &am,
            &data,
            &methods,
            &meta,
            seconds,
            &mode,
            &report,
            config.as_deref(),
            cli.threads,
        ),
        Command::Gradcheck {
            target,
            seed,
            corrupt,
        } => gradcheck_cmd(&target, seed, corrupt),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<NumericalFailure>() {
            return 4;
        }
        if let Some(e) = cause.downcast_ref::<metadapt::Error>() {
            return match e {
                metadapt::Error::Config(_) => 2,
                metadapt::Error::NonFinite(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
