//! Command-line entry point: simulate, preprocess, train, evaluate,
//! baselines, ablate, export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use eegdg::baselines::{baseline_fit_predict, BaselineKind};
use eegdg::config::load_config;
use eegdg::error::{Error, Result};
use eegdg::export::export_features;
use eegdg::formats::{load_domain_file, load_recording_file, save_domain_file};
use eegdg::manifest::RunManifest;
use eegdg::metrics;
use eegdg::model::EegDgModel;
use eegdg::signal::{bandpass, crop_windows, minmax_scale, split_into_domains, DomainDataset};
use eegdg::synth::generate;
use eegdg::trainer::{self, TrainConfig, TrainHooks};

#[derive(Parser)]
#[command(
    name = "eegdg",
    version,
    about = "Multi-source domain generalization for motor-imagery EEG"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic source and target domain files.
    Simulate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Flat dotted-key JSON config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides sim.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter, crop, scale, and split one raw recording into domain files.
    Preprocess {
        /// Raw recording (EDGR).
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides preprocess.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on source domain files (sorted by path; order fixes branches).
    Train {
        #[arg(long, num_args = 1.., required = true)]
        domains: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Drop wall-clock times so metrics logs are byte-reproducible.
        #[arg(long)]
        strict_determinism: bool,
    },
    /// Score a trained checkpoint on target domain files.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        /// Output JSON report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical classifiers (3-nn, lda, linear) on pooled sources.
    Baselines {
        #[arg(long, num_args = 1.., required = true)]
        domains: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        /// Output CSV table path.
        #[arg(long)]
        out: PathBuf,
        /// Seeds the linear baseline's init.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the four alignment variants: none, mir, cir, full.
    Ablate {
        #[arg(long, num_args = 1.., required = true)]
        domains: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strict_determinism: bool,
    },
    /// Dump extractor/branch/fused features with a 2-D PCA to CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source files in training order (sorted by path).
        #[arg(long, num_args = 1.., required = true)]
        sources: Vec<PathBuf>,
        #[arg(long, num_args = 0..)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

/// Single-threaded build: the env var is validated and recorded, and any
/// value >= 1 is an upper bound this process trivially respects.
fn worker_threads() -> Result<usize> {
    match std::env::var("EEGDG_THREADS") {
        Ok(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| Error::config(format!("EEGDG_THREADS must be an integer, got \"{v}\"")))?;
            if n == 0 {
                return Err(Error::config("EEGDG_THREADS must be at least 1"));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    worker_threads()?;
    match cli.command {
        Command::Simulate { out, config, seed } => cmd_simulate(&out, config.as_deref(), seed),
        Command::Preprocess { raw, out, config, seed } => {
            cmd_preprocess(&raw, &out, config.as_deref(), seed)
        }
        Command::Train { domains, out, config, seed, strict_determinism } => {
            cmd_train(&domains, &out, config.as_deref(), seed, strict_determinism)
        }
        Command::Evaluate { checkpoint, targets, out } => {
            cmd_evaluate(&checkpoint, &targets, &out)
        }
        Command::Baselines { domains, targets, out, seed } => {
            cmd_baselines(&domains, &targets, &out, seed.unwrap_or(0))
        }
        Command::Ablate { domains, out, config, seed, strict_determinism } => {
            cmd_ablate(&domains, &out, config.as_deref(), seed, strict_determinism)
        }
        Command::Export { checkpoint, sources, targets, out } => {
            cmd_export(&checkpoint, &sources, &targets, &out)
        }
    }
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::ingestion(format!("creating {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
}

/// Loads domain files in sorted path order so branch indices are stable
/// regardless of shell glob order.
fn load_domains_sorted(paths: &[PathBuf]) -> Result<(Vec<PathBuf>, Vec<DomainDataset>)> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut sets = Vec::with_capacity(sorted.len());
    for p in &sorted {
        sets.push(load_domain_file(p)?);
    }
    Ok((sorted, sets))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

fn cmd_simulate(out: &Path, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    make_dir(out)?;
    let mut manifest =
        RunManifest::begin("simulate", cfg.sim.seed, serde_json::to_value(&cfg)?);
    if let Some(p) = config {
        manifest.record_input(p)?;
    }
    let (sources, targets) = generate(&cfg.sim)?;
    for (i, ds) in sources.iter().enumerate() {
        save_domain_file(ds, &out.join(format!("source_{i}.edg1")))?;
    }
    for (i, ds) in targets.iter().enumerate() {
        save_domain_file(ds, &out.join(format!("target_{i}.edg1")))?;
    }
    manifest.finish_into(out)?;
    println!(
        "wrote {} source and {} target domains to {}",
        sources.len(),
        targets.len(),
        out.display()
    );
    Ok(())
}

fn cmd_preprocess(
    raw: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.preprocess.seed = s;
    }
    make_dir(out)?;
    let mut manifest =
        RunManifest::begin("preprocess", cfg.preprocess.seed, serde_json::to_value(&cfg)?);
    manifest.record_input(raw)?;
    if let Some(p) = config {
        manifest.record_input(p)?;
    }
    let recording = load_recording_file(raw)?;
    let p = &cfg.preprocess;
    let filtered = bandpass(&recording, p.band_lo_hz, p.band_hi_hz, p.filter_order)?;
    let cropped = crop_windows(&filtered, p.window_start_s, p.window_length_s)?;
    let scaled = DomainDataset::new(
        minmax_scale(&cropped.x)?,
        cropped.y.clone(),
        cropped.domain_id,
        cropped.class_count,
    )?;
    let domains = split_into_domains(&scaled, p.n_domains, p.seed)?;
    for ds in &domains {
        save_domain_file(ds, &out.join(format!("domain_{}.edg1", ds.domain_id)))?;
    }
    manifest.finish_into(out)?;
    println!(
        "wrote {} domains ({} trials total) to {}",
        domains.len(),
        scaled.n_samples(),
        out.display()
    );
    Ok(())
}

fn train_once(
    sets: &[DomainDataset],
    cfg: &TrainConfig,
    dir: &Path,
) -> Result<Option<String>> {
    make_dir(dir)?;
    let ckpt_dir = dir.to_path_buf();
    let mut on_ckpt = |epoch: usize, model: &EegDgModel| -> Result<()> {
        model.save(&ckpt_dir.join(format!("checkpoint_epoch_{epoch:04}.edgm")))
    };
    let hooks = TrainHooks { on_epoch: None, on_checkpoint: Some(&mut on_ckpt) };
    let result = trainer::train(sets, cfg, hooks)?;
    result.model.save(&dir.join("model.edgm"))?;
    let mut log = String::new();
    for m in &result.metrics {
        log.push_str(&serde_json::to_string(m)?);
        log.push('\n');
    }
    write_text(&dir.join("metrics.jsonl"), &log)?;
    Ok(result.divergence)
}

fn cmd_train(
    domains: &[PathBuf],
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    strict: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if strict {
        cfg.train.record_wall_time = false;
    }
    make_dir(out)?;
    let mut manifest = RunManifest::begin("train", cfg.train.seed, serde_json::to_value(&cfg)?);
    if let Some(p) = config {
        manifest.record_input(p)?;
    }
    let (paths, sets) = load_domains_sorted(domains)?;
    for p in &paths {
        manifest.record_input(p)?;
    }
    let divergence = train_once(&sets, &cfg.train, out)?;
    manifest.finish_into(out)?;
    if let Some(reason) = divergence {
        return Err(Error::numeric(format!(
            "training diverged ({reason}); last finite checkpoint kept at {}",
            out.join("model.edgm").display()
        )));
    }
    println!(
        "trained {} epochs on {} domains; checkpoint at {}",
        cfg.train.epochs,
        sets.len(),
        out.join("model.edgm").display()
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, targets: &[PathBuf], out: &Path) -> Result<()> {
    let model = EegDgModel::load(checkpoint)?;
    let mut manifest = RunManifest::begin("evaluate", 0, serde_json::Value::Null);
    manifest.record_input(checkpoint)?;
    let mut rows = Vec::new();
    let mut accs = Vec::new();
    let mut kappas = Vec::new();
    let mut sorted = targets.to_vec();
    sorted.sort();
    for path in &sorted {
        manifest.record_input(path)?;
        let ds = load_domain_file(path)?;
        let report = trainer::evaluate_on_target(&model, &ds)?;
        println!(
            "{}: accuracy {:.4}, kappa {:.4} ({} trials)",
            path.display(),
            report.accuracy,
            report.kappa,
            report.n_samples
        );
        accs.push(report.accuracy);
        kappas.push(report.kappa);
        rows.push(serde_json::json!({
            "path": path.display().to_string(),
            "accuracy": report.accuracy,
            "kappa": report.kappa,
            "n_samples": report.n_samples,
            "confusion": report.confusion,
        }));
    }
    let (acc_mean, acc_std) = mean_std(&accs);
    let (kappa_mean, kappa_std) = mean_std(&kappas);
    println!("mean accuracy {acc_mean:.4} ± {acc_std:.4}, mean kappa {kappa_mean:.4} ± {kappa_std:.4}");
    let doc = serde_json::json!({
        "targets": rows,
        "summary": {
            "mean_accuracy": acc_mean,
            "std_accuracy": acc_std,
            "mean_kappa": kappa_mean,
            "std_kappa": kappa_std,
        },
    });
    write_text(out, &serde_json::to_string_pretty(&doc)?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        make_dir(dir)?;
    }
    let manifest_path = sibling_manifest(out);
    write_manifest_to_file(manifest, &manifest_path)
}

/// File-producing commands keep their manifest beside the output file.
fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest_to_file(mut manifest: RunManifest, path: &Path) -> Result<()> {
    manifest.finished_unix_ms = eegdg::manifest::now_unix_ms();
    write_text(path, &serde_json::to_string_pretty(&manifest)?)
}

fn cmd_baselines(
    domains: &[PathBuf],
    targets: &[PathBuf],
    out: &Path,
    seed: u64,
) -> Result<()> {
    let mut manifest = RunManifest::begin("baselines", seed, serde_json::Value::Null);
    let (source_paths, sources) = load_domains_sorted(domains)?;
    let (target_paths, target_sets) = load_domains_sorted(targets)?;
    for p in source_paths.iter().chain(&target_paths) {
        manifest.record_input(p)?;
    }
    let kinds = [BaselineKind::Knn(3), BaselineKind::Lda, BaselineKind::Linear];
    let mut csv = String::from("baseline,target,accuracy,kappa\n");
    for kind in kinds {
        let mut accs = Vec::new();
        let mut kappas = Vec::new();
        for (path, ds) in target_paths.iter().zip(&target_sets) {
            let pred = baseline_fit_predict(kind, &sources, ds, seed)?;
            let report = metrics::report(&pred, &ds.y, ds.class_count)?;
            csv.push_str(&format!(
                "{},{},{},{}\n",
                kind.name(),
                path.display(),
                report.accuracy,
                report.kappa
            ));
            accs.push(report.accuracy);
            kappas.push(report.kappa);
        }
        let (acc_mean, acc_std) = mean_std(&accs);
        let (kappa_mean, _) = mean_std(&kappas);
        csv.push_str(&format!("{},mean,{acc_mean},{kappa_mean}\n", kind.name()));
        println!(
            "{:>6}: mean accuracy {acc_mean:.4} ± {acc_std:.4}, mean kappa {kappa_mean:.4}",
            kind.name()
        );
    }
    write_text(out, &csv)?;
    write_manifest_to_file(manifest, &sibling_manifest(out))
}

fn cmd_ablate(
    domains: &[PathBuf],
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    strict: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if strict {
        cfg.train.record_wall_time = false;
    }
    make_dir(out)?;
    let mut manifest = RunManifest::begin("ablate", cfg.train.seed, serde_json::to_value(&cfg)?);
    if let Some(p) = config {
        manifest.record_input(p)?;
    }
    let (paths, sets) = load_domains_sorted(domains)?;
    for p in &paths {
        manifest.record_input(p)?;
    }
    let (b1, b2) = (cfg.train.beta1, cfg.train.beta2);
    let variants = [
        ("none", 0.0, 0.0),
        ("mir", b1, 0.0),
        ("cir", 0.0, b2),
        ("full", b1, b2),
    ];
    let mut summary = serde_json::Map::new();
    for (name, beta1, beta2) in variants {
        let vcfg = TrainConfig { beta1, beta2, ..cfg.train.clone() };
        let dir = out.join(name);
        let divergence = train_once(&sets, &vcfg, &dir)?;
        if let Some(reason) = divergence {
            return Err(Error::numeric(format!(
                "variant {name} diverged ({reason}); last finite checkpoint kept at {}",
                dir.join("model.edgm").display()
            )));
        }
        let last = std::fs::read_to_string(dir.join("metrics.jsonl"))
            .map_err(|e| Error::ingestion(format!("reading metrics for {name}: {e}")))?;
        let final_line = last.lines().last().unwrap_or("{}");
        summary.insert(
            name.to_string(),
            serde_json::json!({
                "beta1": beta1,
                "beta2": beta2,
                "final_epoch": serde_json::from_str::<serde_json::Value>(final_line)?,
            }),
        );
        println!("variant {name}: done (beta1={beta1}, beta2={beta2})");
    }
    write_text(
        &out.join("ablation.json"),
        &serde_json::to_string_pretty(&serde_json::Value::Object(summary))?,
    )?;
    manifest.finish_into(out)
}

fn cmd_export(
    checkpoint: &Path,
    sources: &[PathBuf],
    targets: &[PathBuf],
    out: &Path,
) -> Result<()> {
    let model = EegDgModel::load(checkpoint)?;
    let mut manifest = RunManifest::begin("export", 0, serde_json::Value::Null);
    manifest.record_input(checkpoint)?;
    let (source_paths, source_sets) = load_domains_sorted(sources)?;
    let (target_paths, target_sets) = load_domains_sorted(targets)?;
    for p in source_paths.iter().chain(&target_paths) {
        manifest.record_input(p)?;
    }
    export_features(&model, &source_sets, &target_sets, out)?;
    println!("wrote feature table to {}", out.display());
    write_manifest_to_file(manifest, &sibling_manifest(out))
}
