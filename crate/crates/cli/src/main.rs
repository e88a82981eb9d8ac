mod config;
mod heatmap;

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use spoofscope::corpus::read_manifest;
use spoofscope::datagen::build_corpus;
use spoofscope::frontend::read_wav;
use spoofscope::metrics::write_scores;
use spoofscope::model::{load_checkpoint, save_checkpoint, Detector};
use spoofscope::train::{diagnose, evaluate, fit, inspect, load_examples, load_manifest_examples};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "spoofscope", version, about = "Synthetic spoof corpora, detector training and diagnostics")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for corpus generation, initialization, shuffling and masking.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Start from the small desk-scale model and training presets instead
    /// of the full-size defaults.
    #[arg(long, global = true)]
    desk: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bonafide/spoof corpus and its manifest.
    Datagen(DatagenArgs),
    /// Train a detector; writes per-epoch log lines and checkpoints.
    Train(TrainArgs),
    /// Score a manifest and report EER, min t-DCF and accuracy.
    Eval(EvalArgs),
    /// Discrepancy weights and per-patch reconstruction errors of one file.
    Trace(TraceArgs),
    /// Pooled decoder features of one probe layer, one line per utterance.
    EmbedDump(EmbedArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    #[arg(long)]
    n_bonafide: Option<usize>,
    #[arg(long)]
    n_spoof: Option<usize>,
    /// Clip length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    train_manifest: Option<PathBuf>,
    /// Development manifest used to pick the best checkpoint.
    #[arg(long, value_name = "PATH")]
    dev_manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Reconstruction loss weight.
    #[arg(long)]
    lambda_rec: Option<f64>,
    /// Dispersal loss weight.
    #[arg(long)]
    lambda_disp: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    wav: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// 1-based decoder layer; must be one of the model's probe layers.
    #[arg(long)]
    layer: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref(), cli.desk)?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out = cli.out;
    }
    match cli.command {
        Command::Datagen(a) => datagen(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Trace(a) => trace(cfg, a),
        Command::EmbedDump(a) => embed_dump(cfg, a),
    }
}

fn create_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn datagen(mut cfg: RunConfig, a: DatagenArgs) -> Result<()> {
    if let Some(n) = a.n_bonafide {
        cfg.corpus.n_bonafide = n;
    }
    if let Some(n) = a.n_spoof {
        cfg.corpus.n_spoof = n;
    }
    if let Some(d) = a.duration {
        cfg.corpus.duration_s = d;
    }
    let cfg = cfg.finalize()?;
    let out = create_out(&cfg)?;
    let (manifest, entries) = build_corpus(&cfg.corpus, &out)?;
    log::info!("wrote {} utterances", entries.len());
    println!("{}", manifest.display());
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr0 {
        t.lr0 = v;
    }
    if let Some(v) = a.lr_min {
        t.lr_min = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lambda_rec {
        t.loss.reconstruction = v;
    }
    if let Some(v) = a.lambda_disp {
        t.loss.dispersal = v;
    }
    if a.train_manifest.is_some() {
        cfg.data.train_manifest = a.train_manifest;
    }
    if a.dev_manifest.is_some() {
        cfg.data.dev_manifest = a.dev_manifest;
    }
    let cfg = cfg.finalize()?;
    let out = create_out(&cfg)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let train_path = cfg.data.train_manifest.as_deref().context("no training manifest")?;
    let train_set = load_manifest_examples(train_path, &cfg.model.frontend)?;
    let dev_set = cfg
        .data
        .dev_manifest
        .as_deref()
        .map(|p| load_manifest_examples(p, &cfg.model.frontend))
        .transpose()?;

    let mut model = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    let mut log_file = File::create(out.join("train.log"))?;
    let best_path = out.join("best.ckpt");
    let outcome = fit(&mut model, &train_set, dev_set.as_deref(), &cfg.train, |report, m| {
        let line = report.log_line();
        println!("{line}");
        writeln!(log_file, "{line}")?;
        log_file.flush()?;
        if report.improved {
            save_checkpoint(&best_path, m)?;
        }
        Ok(())
    })?;
    save_checkpoint(out.join("last.ckpt"), &model)?;
    log::info!("best epoch {}", outcome.best_epoch);
    Ok(())
}

fn manifest_or_config(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.eval_manifest.clone())
        .context("no manifest: pass --manifest or set data.eval_manifest")
}

fn eval(cfg: RunConfig, a: EvalArgs) -> Result<()> {
    let manifest = manifest_or_config(a.manifest, &cfg)?;
    let cfg = cfg.finalize()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_manifest_examples(&manifest, &model.config().frontend)?;
    let (records, report) = evaluate(&model, &data, &cfg.costs)?;
    let out = create_out(&cfg)?;
    write_scores(out.join("scores.tsv"), &records)?;
    let text = report.to_text();
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn trace(cfg: RunConfig, a: TraceArgs) -> Result<()> {
    let cfg = cfg.finalize()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let patches = model.prepare(&read_wav(&a.wav)?)?;
    let d = diagnose(&model, std::slice::from_ref(&patches))?.remove(0);
    let out = create_out(&cfg)?;
    let (bands, segments) = (patches.bands, patches.segments);
    let weights = heatmap::to_grid(&d.weights, &patches.coords, bands, segments)?;
    let errors = heatmap::to_grid(&d.patch_errors, &patches.coords, bands, segments)?;
    heatmap::write_both(&out, "weights", &weights)?;
    heatmap::write_both(&out, "errors", &errors)?;
    println!("{}", d.reconstruction_error);
    Ok(())
}

fn embed_dump(cfg: RunConfig, a: EmbedArgs) -> Result<()> {
    let manifest = manifest_or_config(a.manifest, &cfg)?;
    let cfg = cfg.finalize()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let probes = model.config().probes();
    let Some(slot) = probes.iter().position(|&l| l == a.layer) else {
        bail!("layer {} is not a probe layer (probes: {probes:?})", a.layer);
    };
    let entries = read_manifest(&manifest)?;
    ensure!(!entries.is_empty(), "manifest {} is empty", manifest.display());
    let data = load_examples(&entries, &model.config().frontend)?;
    let out = create_out(&cfg)?;
    let path = out.join(format!("embeddings_layer{}.tsv", a.layer));
    let mut text = String::new();
    for ins in inspect(&model, &data)? {
        let values: Vec<String> = ins.diagnosis.probe_features[slot].iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&format!("{}\t{}\t{}\n", ins.utt_id, ins.label, values.join("\t")));
    }
    std::fs::write(&path, text)?;
    println!("{}", path.display());
    Ok(())
}
