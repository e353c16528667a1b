//! `icnf`: pipeline driver. Stages are idempotent given identical
//! inputs; every output directory (or file) gets a sidecar manifest
//! carrying the config hash and output checksums.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use icnf::classify::{score_records, train_classifier};
use icnf::config::RunConfig;
use icnf::data::{load_cohort, save_cohort, synth_cohort_with, Cohort, IcnRecord, Label};
use icnf::experiment::{
    auc, build_variant, kfold, manifest_csv, stratified_split, summary_csv, ForecasterSet,
    VariantId,
};
use icnf::forecast::{
    extend_series, train_forecaster, BrainLm, Forecaster, ModelKind, TrainedForecaster,
};
use icnf::interpret::{rank_sensitivities, sensitivity_csv, sensitivity_table, ComparisonSign};
use icnf::numerics::{load_checkpoint, save_checkpoint};
use icnf::windows::{replicate, slide_cohort, truncate};

#[derive(Parser)]
#[command(name = "icnf", version, about = "Generative-forecasting augmentation pipeline for ICN time courses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic cohort.
    Synth {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        n_cn: Option<usize>,
        #[arg(long)]
        n_ad: Option<usize>,
        #[arg(long)]
        t_regular_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Z-score a cohort per subject and channel.
    Prep {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a generative forecaster on sliding windows.
    TrainForecaster {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// lstm or brainlm.
        #[arg(long)]
        model: String,
        /// base = truncated-length windows (T=137), repl = replicated (T=194).
        #[arg(long, default_value = "base")]
        length: String,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Append forecasted timestamps to every record of a cohort.
    Extend {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long)]
        model: String,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 4)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Materialize the configured dataset variants as cohort directories.
    BuildVariants {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Directory holding lstm_base.ckpt, brainlm_base.ckpt,
        /// lstm_repl.ckpt, brainlm_repl.ckpt.
        #[arg(long, value_name = "DIR")]
        ckpts: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the classifier on one variant directory (single fold).
    TrainClassifier {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "CKPT")]
        out: PathBuf,
    },
    /// Full evaluation matrix: variants x seeds x folds.
    RunMatrix {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        ckpts: PathBuf,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Perturbation-based per-class channel sensitivity.
    Interpret {
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "CKPT")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        let mut source = e.source();
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Box<dyn Error>> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn sha256_file(path: &Path) -> Result<String, Box<dyn Error>> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Writes the stage manifest: config hash plus a checksum per output
/// file, sorted by name. Deterministic across runs.
fn write_manifest(
    dir: &Path,
    stage: &str,
    config: &RunConfig,
    files: &[PathBuf],
) -> Result<(), Box<dyn Error>> {
    let mut entries: Vec<(String, String)> = files
        .iter()
        .map(|f| {
            let name = f
                .strip_prefix(dir)
                .unwrap_or(f)
                .to_string_lossy()
                .into_owned();
            sha256_file(f).map(|h| (name, h))
        })
        .collect::<Result<_, _>>()?;
    entries.sort();
    let mut text = format!("stage={stage}\nconfig_hash={}\n", config.hash());
    for (name, hash) in entries {
        text.push_str(&format!("output {name} sha256={hash}\n"));
    }
    fs::write(dir.join(format!("MANIFEST_{stage}.txt")), text)?;
    Ok(())
}

fn cohort_files(dir: &Path, cohort: &Cohort) -> Vec<PathBuf> {
    let mut files = vec![dir.join("manifest.csv")];
    files.extend(cohort.records.iter().map(|r| dir.join(format!("{}.icns", r.subject_id))));
    files
}

fn parse_model(s: &str) -> Result<ModelKind, Box<dyn Error>> {
    ModelKind::parse(s).ok_or_else(|| format!("unknown model {s:?}, expected lstm or brainlm").into())
}

/// Loads one forecaster checkpoint, with a hint naming the producing
/// subcommand when the file is missing.
fn load_forecaster(kind: ModelKind, path: &Path, length: &str) -> Result<Forecaster, Box<dyn Error>> {
    if !path.exists() {
        return Err(format!(
            "missing forecaster checkpoint {}; produce it with `icnf train-forecaster --model {} --length {} --data <PREPPED> --out {}`",
            path.display(),
            kind.as_str(),
            length,
            path.display()
        )
        .into());
    }
    Ok(Forecaster::from_params(kind, load_checkpoint(path)?)?)
}

fn load_forecaster_set(dir: &Path) -> Result<ForecasterSet, Box<dyn Error>> {
    Ok(ForecasterSet {
        lstm_base: load_forecaster(ModelKind::Lstm, &dir.join("lstm_base.ckpt"), "base")?,
        brainlm_base: load_forecaster(ModelKind::BrainLm, &dir.join("brainlm_base.ckpt"), "base")?,
        lstm_repl: load_forecaster(ModelKind::Lstm, &dir.join("lstm_repl.ckpt"), "repl")?,
        brainlm_repl: load_forecaster(ModelKind::BrainLm, &dir.join("brainlm_repl.ckpt"), "repl")?,
    })
}

/// Length-standardized records for forecaster training.
fn length_records(cohort: &Cohort, length: &str) -> Result<Cohort, Box<dyn Error>> {
    let records: Result<Vec<IcnRecord>, _> = match length {
        "base" => cohort.records.iter().map(|r| truncate(r, 137)).collect(),
        "repl" => cohort.records.iter().map(|r| replicate(r, 194)).collect(),
        other => return Err(format!("unknown --length {other:?}, expected base or repl").into()),
    };
    Ok(Cohort { records: records? })
}

fn run() -> Result<(), Box<dyn Error>> {
    let cli = Cli::parse();
    let t0 = Instant::now();
    match cli.command {
        Command::Synth { config, n_cn, n_ad, t_regular_fraction, seed, out } => {
            let config = load_config(&config)?;
            let cohort = synth_cohort_with(
                n_cn.unwrap_or(config.data.n_cn),
                n_ad.unwrap_or(config.data.n_ad),
                t_regular_fraction.unwrap_or(config.data.t_regular_fraction),
                seed,
                &config.synth_params(),
            )?;
            save_cohort(&out, &cohort)?;
            write_manifest(&out, "synth", &config, &cohort_files(&out, &cohort))?;
            println!(
                "synth: {} CN + {} AD -> {} ({:.1}s)",
                cohort.count(Label::Cn),
                cohort.count(Label::Ad),
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }

        Command::Prep { config, data, out } => {
            let config = load_config(&config)?;
            let cohort = load_cohort(&data, &[])?;
            let prepped = cohort.zscored()?;
            save_cohort(&out, &prepped)?;
            write_manifest(&out, "prep", &config, &cohort_files(&out, &prepped))?;
            println!(
                "prep: z-scored {} records -> {} ({:.1}s)",
                prepped.len(),
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }

        Command::TrainForecaster { config, model, length, data, seed, out } => {
            let config = load_config(&config)?;
            let kind = parse_model(&model)?;
            let cohort = load_cohort(&data, &[])?;
            let standardized = length_records(&cohort, &length)?;
            let windows =
                slide_cohort(&standardized, config.windows.window, config.windows.step)?;
            println!(
                "train-forecaster: {} on {} windows ({} epochs)",
                kind.as_str(),
                windows.len(),
                config.forecast.epochs
            );
            let trained = train_forecaster(kind, &windows, &config.forecast_config(seed))?;
            save_checkpoint(&out, trained.model.params())?;
            let metrics = out.with_extension("metrics.csv");
            fs::write(&metrics, forecaster_metrics_csv(&trained))?;
            let provenance = out.with_extension("windows.csv");
            fs::write(&provenance, window_provenance_csv(&windows, &trained))?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let stage = format!("train-forecaster_{}_{}", kind.as_str(), length);
            write_manifest(&dir, &stage, &config, &[out.clone(), metrics, provenance])?;
            println!(
                "train-forecaster: final train {:.4}, val {:.4} -> {} ({:.1}s)",
                trained.train_loss.last().copied().unwrap_or(f64::NAN),
                trained.val_mse.last().copied().unwrap_or(f64::NAN),
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }

        Command::Extend { config, model, ckpt, data, steps, seed, out } => {
            let config = load_config(&config)?;
            let kind = parse_model(&model)?;
            let forecaster = load_forecaster(kind, &ckpt, "base")?;
            let cohort = load_cohort(&data, &[])?;
            let records: Result<Vec<IcnRecord>, _> = cohort
                .records
                .iter()
                .map(|r| extend_series(r, &forecaster, steps, seed))
                .collect();
            let extended = Cohort { records: records? };
            save_cohort(&out, &extended)?;
            write_manifest(&out, "extend", &config, &cohort_files(&out, &extended))?;
            println!(
                "extend: {} records +{} timestamps -> {} ({:.1}s)",
                extended.len(),
                steps,
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }

        Command::BuildVariants { config, data, ckpts, seed, out } => {
            let config = load_config(&config)?;
            let cohort = load_cohort(&data, &[])?;
            let forecasters = load_forecaster_set(&ckpts)?;
            let mut files = Vec::new();
            for letter in &config.experiment.variants {
                let id = VariantId::parse(letter).expect("validated");
                let records = build_variant(&cohort, id, &forecasters, seed)?;
                let dir = out.join(letter);
                let variant_cohort = Cohort { records };
                save_cohort(&dir, &variant_cohort)?;
                files.extend(cohort_files(&dir, &variant_cohort));
                println!(
                    "build-variants: {} ({}) -> {} records, T={}",
                    letter,
                    id.description(),
                    variant_cohort.len(),
                    id.expected_t()
                );
            }
            fs::create_dir_all(&out)?;
            write_manifest(&out, "build-variants", &config, &files)?;
            println!("build-variants: done ({:.1}s)", t0.elapsed().as_secs_f64());
        }

        Command::TrainClassifier { config, data, seed, out } => {
            let config = load_config(&config)?;
            let cohort = load_cohort(&data, &[])?;
            let labels: Vec<Label> = cohort.records.iter().map(|r| r.label).collect();
            let (trainval, test) =
                stratified_split(&labels, config.experiment.test_fraction, seed)?;
            let folds = kfold(
                &labels,
                &trainval,
                config.experiment.folds,
                seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1),
            )?;
            let (ref train_idx, ref val_idx) = folds[0];
            let train: Vec<&IcnRecord> = train_idx.iter().map(|&i| &cohort.records[i]).collect();
            let val: Vec<&IcnRecord> = val_idx.iter().map(|&i| &cohort.records[i]).collect();
            let test_r: Vec<&IcnRecord> = test.iter().map(|&i| &cohort.records[i]).collect();
            let trained = train_classifier(&train, &val, &config.classify_config(seed))?;
            save_checkpoint(&out, &trained.model.params)?;
            let metrics = out.with_extension("metrics.csv");
            fs::write(&metrics, classifier_metrics_csv(&trained))?;
            let scores = score_records(&trained.model, &test_r, config.classify.batch_size)?;
            let test_labels: Vec<f64> = test_r.iter().map(|r| r.label.target()).collect();
            let test_auc = auc(&scores, &test_labels)?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            write_manifest(&dir, "train-classifier", &config, &[out.clone(), metrics])?;
            println!(
                "train-classifier: best val AUC {:.4} @ epoch {}, test AUC {:.4} -> {} ({:.1}s)",
                trained.best_val_auc,
                trained.best_epoch,
                test_auc,
                out.display(),
                t0.elapsed().as_secs_f64()
            );
        }

        Command::RunMatrix { config, data, ckpts, threads, out } => {
            let config = load_config(&config)?;
            let cohort = load_cohort(&data, &[])?;
            let forecasters = load_forecaster_set(&ckpts)?;
            let matrix_config = config.matrix_config(threads);
            let variants: Result<Vec<(VariantId, Vec<IcnRecord>)>, _> = matrix_config
                .variants
                .iter()
                .map(|&id| build_variant(&cohort, id, &forecasters, 0).map(|r| (id, r)))
                .collect();
            let variants = variants?;
            println!(
                "run-matrix: {} variants x {} seeds x {} folds",
                variants.len(),
                matrix_config.seeds.len(),
                matrix_config.folds
            );
            let result = icnf::experiment::run_matrix(&variants, &matrix_config)?;
            fs::create_dir_all(&out)?;
            let manifest_path = out.join("manifest.csv");
            let summary_path = out.join("summary.csv");
            fs::write(&manifest_path, manifest_csv(&result))?;
            fs::write(&summary_path, summary_csv(&result))?;
            write_manifest(&out, "run-matrix", &config, &[manifest_path, summary_path])?;
            for row in &result.summary {
                let p = row
                    .p_vs_ref
                    .map(|p| format!("{p:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "  {} ({:<20}) mean AUC {:.4} +- {:.4}  p vs {}: {}",
                    row.variant.letter(),
                    row.variant.description(),
                    row.mean_auc,
                    row.std,
                    matrix_config.reference.letter(),
                    p
                );
            }
            println!("run-matrix: done -> {} ({:.1}s)", out.display(), t0.elapsed().as_secs_f64());
        }

        Command::Interpret { config, ckpt, data, seed, out } => {
            let config = load_config(&config)?;
            if !ckpt.exists() {
                return Err(format!(
                    "missing checkpoint {}; produce it with `icnf train-forecaster --model brainlm ...`",
                    ckpt.display()
                )
                .into());
            }
            let model = BrainLm::from_params(load_checkpoint(&ckpt)?)?;
            let cohort = load_cohort(&data, &[])?;
            let scope = config.interpret_scope(seed);
            let table =
                sensitivity_table(&model, &cohort, scope, config.forecast.batch_size)?;
            fs::write(&out, sensitivity_csv(&table))?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            write_manifest(&dir, "interpret", &config, std::slice::from_ref(&out))?;
            let ranked = rank_sensitivities(&table, config.interpret.top_k);
            for (label, order) in &ranked.per_class {
                let top: Vec<String> = order
                    .iter()
                    .take(config.interpret.top_k)
                    .map(|&c| format!("{c}({:+.2}%)", table.delta(*label, c)))
                    .collect();
                println!("  {} top-{}: {}", label.as_str(), config.interpret.top_k, top.join(" "));
            }
            for (ch, sign) in &ranked.signs {
                let tag = match sign {
                    ComparisonSign::AdGreater => "AD>CN",
                    ComparisonSign::CnGreater => "CN>AD",
                };
                println!("  channel {ch}: {tag}");
            }
            println!("interpret: done -> {} ({:.1}s)", out.display(), t0.elapsed().as_secs_f64());
        }
    }
    Ok(())
}

fn forecaster_metrics_csv(trained: &TrainedForecaster) -> String {
    let mut s = String::from("epoch,train_loss,val_mse\n");
    for (e, (tr, va)) in trained.train_loss.iter().zip(&trained.val_mse).enumerate() {
        s.push_str(&format!("{e},{tr},{va}\n"));
    }
    s
}

/// Window provenance: which (subject, offset) slice each training or
/// validation window came from.
fn window_provenance_csv(
    windows: &icnf::windows::WindowBatch,
    trained: &TrainedForecaster,
) -> String {
    let mut split = vec!["train"; windows.len()];
    for &i in &trained.val_indices {
        split[i] = "val";
    }
    let mut s = String::from("window,subject_id,start,split\n");
    for (w, (subject, start)) in windows.sources.iter().enumerate() {
        s.push_str(&format!("{w},{subject},{start},{}\n", split[w]));
    }
    s
}

fn classifier_metrics_csv(trained: &icnf::classify::TrainedClassifier) -> String {
    let mut s = String::from("epoch,train_loss,val_auc\n");
    for (e, (tr, va)) in trained.train_loss.iter().zip(&trained.val_auc).enumerate() {
        s.push_str(&format!("{e},{tr},{va}\n"));
    }
    s
}
