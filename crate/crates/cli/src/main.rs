//! Pipeline driver. Each subcommand reads its inputs, writes its artifacts
//! under --out, and prints a one-line JSON summary to stdout.
//!
//! Exit codes: 0 success, 1 validation verdict "not reproduced",
//! 2 usage or data errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use slac_ts_core::data::parse::{
    self, load_processed_cohort, read_metadata, read_ranges, read_schema, ProcessedMeta,
};
use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::data::CohortDataset;
use slac_ts_core::encoder::{EncoderState, ModelConfig};
use slac_ts_core::error::{Result, SlacError};
use slac_ts_core::forecast::{pretrain, write_loss_history};
use slac_ts_core::slac::{
    read_labels_csv, run_slac, sweep, write_labels_csv, write_sweep_csv, SweepGrid,
};
use slac_ts_core::stats::{
    characterize, pca_project, write_pca_csv, write_static_summary_csv, write_temporal_csv,
    write_tests_csv,
};
use slac_ts_core::synth;
use slac_ts_core::validate::{
    compare_phenotype_distributions, cross_apply, make_folds, train_phenotype_classifier,
};

#[derive(Parser)]
#[command(name = "slac-ts", version, about = "Self-supervised time-series clustering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted phenotypes.
    Synth {
        /// Generator spec JSON (includes the seed).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clip, bin hourly, z-score, one-hot and impute statics.
    Preprocess {
        #[arg(long)]
        triplets: PathBuf,
        #[arg(long = "static")]
        static_file: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        ranges: PathBuf,
        /// Apply previously fitted normalization stats (cross-cohort path);
        /// expects the meta.json of the fitting cohort's bundle.
        #[arg(long)]
        fit_meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder on the forecasting proxy task.
    Pretrain {
        /// Processed bundle directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the iterative pseudo-label/classifier loop and emit labels.
    Cluster {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained weights directory.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hyperparameter sweep with shared pretraining per (M, d, h).
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Grid JSON: {"blocks": [...], "embed_dims": [...], "heads": [...], "clusters": [...]}.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-cluster summaries, Kruskal-Wallis tests, hourly series.
    Characterize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Optional metadata CSV with outcomes (mortality, icu_los).
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated transfer classifier + cross-cohort reproduction test.
    Validate {
        /// Source bundle (labels were produced on it).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Target bundle, preprocessed with the source's stats.
        #[arg(long)]
        target_data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 0.15)]
        test_fraction: f64,
        #[arg(long, default_value_t = 999)]
        n_perm: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project representations onto two principal components.
    Pca {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Preprocess {
            triplets,
            static_file,
            schema,
            ranges,
            fit_meta,
            out,
        } => cmd_preprocess(&triplets, &static_file, &schema, &ranges, fit_meta.as_deref(), &out),
        Command::Pretrain {
            data,
            config,
            seed,
            out,
        } => cmd_pretrain(&data, config.as_deref(), seed, &out),
        Command::Cluster {
            data,
            weights,
            config,
            seed,
            out,
        } => cmd_cluster(&data, &weights, config.as_deref(), seed, &out),
        Command::Sweep {
            data,
            grid,
            config,
            seed,
            out,
        } => cmd_sweep(&data, &grid, config.as_deref(), seed, &out),
        Command::Characterize {
            data,
            labels,
            metadata,
            alpha,
            out,
        } => cmd_characterize(&data, &labels, metadata.as_deref(), alpha, &out),
        Command::Validate {
            data,
            labels,
            weights,
            target_data,
            config,
            seed,
            folds,
            test_fraction,
            n_perm,
            out,
        } => cmd_validate(
            &data,
            &labels,
            &weights,
            &target_data,
            config.as_deref(),
            seed,
            folds,
            test_fraction,
            n_perm,
            &out,
        ),
        Command::Pca {
            data,
            weights,
            labels,
            out,
        } => cmd_pca(&data, &weights, &labels, &out),
    }
}

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

fn load_config(path: Option<&Path>, seed: u64) -> Result<ModelConfig> {
    let mut config: ModelConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    config.seed = seed;
    config.validate()?;
    Ok(config)
}

fn load_bundle(dir: &Path) -> Result<(CohortDataset, ProcessedMeta)> {
    let meta: ProcessedMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let cohort = load_processed_cohort(
        fs::File::open(dir.join("triplets.csv"))?,
        fs::File::open(dir.join("static.csv"))?,
        &meta,
    )?;
    Ok((cohort, meta))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Write the summary file and print it as the stage's single stdout line.
fn emit_summary(out_dir: &Path, summary: serde_json::Value) -> Result<()> {
    write_json(&out_dir.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn check_weights_config(state: &EncoderState, config: &ModelConfig) -> Result<()> {
    if state.config.hash() != config.hash() {
        return Err(SlacError::StaleWeights(format!(
            "weights were trained under config {} but the current config hashes to {}; \
             rerun with the matching --config/--seed",
            state.config.hash(),
            config.hash()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<ExitCode> {
    let spec: synth::SynthSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)?;
    let cohort = synth::generate(&spec)?;
    fs::create_dir_all(out)?;
    parse::write_triplets(&cohort, fs::File::create(out.join("triplets.csv"))?)?;
    parse::write_static_raw(&cohort, fs::File::create(out.join("static.csv"))?)?;
    parse::write_metadata(&cohort, fs::File::create(out.join("metadata.csv"))?)?;
    write_json(&out.join("schema.json"), &synth::schema(&spec))?;
    write_json(&out.join("ranges.json"), &synth::ranges(&spec))?;
    emit_summary(
        out,
        json!({
            "stage": "synth",
            "episodes": cohort.n_episodes(),
            "ts_features": cohort.n_features(),
            "triplets": cohort.n_triplets(),
            "seed": spec.seed,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_preprocess(
    triplets: &Path,
    static_file: &Path,
    schema_path: &Path,
    ranges_path: &Path,
    fit_meta: Option<&Path>,
    out: &Path,
) -> Result<ExitCode> {
    let raw = parse::parse_cohort(fs::File::open(triplets)?, fs::File::open(static_file)?)?;
    let schema = read_schema(fs::File::open(schema_path)?)?;
    let ranges = read_ranges(fs::File::open(ranges_path)?)?;
    let foreign_meta: Option<ProcessedMeta> = match fit_meta {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    let opts = match &foreign_meta {
        Some(m) => PreprocessOptions {
            stats: Some(&m.normalization_stats),
            vocab: Some(&m.feature_vocab),
        },
        None => PreprocessOptions::default(),
    };
    let (processed, report) = preprocess_cohort(&raw, &schema, &ranges, opts)?;
    fs::create_dir_all(out)?;
    parse::write_triplets(&processed, fs::File::create(out.join("triplets.csv"))?)?;
    parse::write_static_numeric(&processed, fs::File::create(out.join("static.csv"))?)?;
    let meta = ProcessedMeta {
        feature_vocab: processed.feature_vocab.clone(),
        static_schema: processed.static_schema.clone(),
        normalization_stats: processed
            .normalization_stats
            .clone()
            .expect("preprocessing fits stats"),
    };
    write_json(&out.join("meta.json"), &meta)?;
    emit_summary(
        out,
        json!({
            "stage": "preprocess",
            "episodes": processed.n_episodes(),
            "ts_features": processed.n_features(),
            "static_width": processed.static_dim(),
            "clipped": report.clipped_per_feature,
            "dropped_beyond_horizon": report.dropped_beyond_horizon,
            "dropped_empty_episodes": report.dropped_empty_episodes,
            "imputed_static_cells": report.imputed_static_cells,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_pretrain(data: &Path, config: Option<&Path>, seed: u64, out: &Path) -> Result<ExitCode> {
    let config = load_config(config, seed)?;
    let (cohort, meta) = load_bundle(data)?;
    let result = pretrain(&cohort, &config)?;
    fs::create_dir_all(out)?;
    result.state.save(&out.join("weights"), &meta.feature_vocab)?;
    write_loss_history(&result.history, fs::File::create(out.join("loss_history.csv"))?)?;
    emit_summary(
        out,
        json!({
            "stage": "pretrain",
            "config_hash": config.hash(),
            "instances": result.n_instances,
            "epochs_run": result.history.len(),
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_cluster(
    data: &Path,
    weights: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let config = load_config(config, seed)?;
    let (cohort, meta) = load_bundle(data)?;
    let state = EncoderState::load(&weights.join("weights"), &meta.feature_vocab)
        .or_else(|_| EncoderState::load(weights, &meta.feature_vocab))?;
    check_weights_config(&state, &config)?;
    let result = run_slac(&cohort, state)?;
    fs::create_dir_all(out)?;
    write_labels_csv(&cohort, &result.final_labels, fs::File::create(out.join("labels.csv"))?)?;
    result
        .state
        .save(&out.join("final_weights"), &meta.feature_vocab)?;
    write_json(
        &out.join("scores.json"),
        &json!({
            "config": config,
            "config_hash": config.hash(),
            "scores": result.final_scores,
        }),
    )?;
    write_json(&out.join("history.json"), &result.records)?;
    emit_summary(
        out,
        json!({
            "stage": "cluster",
            "config_hash": config.hash(),
            "episodes": cohort.n_episodes(),
            "clusters": config.clusters,
            "iterations_run": result.records.len(),
            "silhouette": result.final_scores.silhouette,
            "calinski_harabasz": result.final_scores.calinski_harabasz,
            "davies_bouldin": result.final_scores.davies_bouldin,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(
    data: &Path,
    grid_path: &Path,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let config = load_config(config, seed)?;
    let grid: SweepGrid = serde_json::from_str(&fs::read_to_string(grid_path)?)?;
    let (cohort, _) = load_bundle(data)?;
    let table = sweep(&cohort, &config, &grid)?;
    fs::create_dir_all(out)?;
    write_sweep_csv(&table, fs::File::create(out.join("sweep_table.csv"))?)?;
    write_json(
        &out.join("selection.json"),
        &json!({
            "config_hash": config.hash(),
            "selected": table.selected_row(),
            "rows": table.rows.len(),
        }),
    )?;
    let sel = table.selected_row();
    emit_summary(
        out,
        json!({
            "stage": "sweep",
            "rows": table.rows.len(),
            "selected": {"M": sel.m, "d": sel.d, "h": sel.h, "K": sel.k},
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_characterize(
    data: &Path,
    labels_path: &Path,
    metadata: Option<&Path>,
    alpha: f64,
    out: &Path,
) -> Result<ExitCode> {
    let (mut cohort, _) = load_bundle(data)?;
    if let Some(meta_path) = metadata {
        let meta = read_metadata(fs::File::open(meta_path)?)?;
        parse::attach_metadata(&mut cohort, &meta);
    }
    let labels = read_labels_csv(&cohort, fs::File::open(labels_path)?)?;
    let report = characterize(&cohort, &labels, alpha)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_static_summary_csv(&report, fs::File::create(out.join("static_summary.csv"))?)?;
    write_temporal_csv(
        &report,
        &cohort.feature_vocab,
        fs::File::create(out.join("temporal.csv"))?,
    )?;
    write_tests_csv(&report, fs::File::create(out.join("tests.csv"))?)?;
    let significant = report.tests.iter().filter(|t| t.significant).count();
    emit_summary(
        out,
        json!({
            "stage": "characterize",
            "clusters": report.cluster_sizes.len(),
            "sizes": report.cluster_sizes,
            "significant_features": significant,
            "tested_features": report.tests.len(),
            "alpha": alpha,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_validate(
    data: &Path,
    labels_path: &Path,
    weights: &Path,
    target_data: &Path,
    config: Option<&Path>,
    seed: u64,
    folds: usize,
    test_fraction: f64,
    n_perm: usize,
    out: &Path,
) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let (cohort, meta) = load_bundle(data)?;
    let labels = read_labels_csv(&cohort, fs::File::open(labels_path)?)?;
    let mut state = EncoderState::load(&weights.join("weights"), &meta.feature_vocab)
        .or_else(|_| EncoderState::load(weights, &meta.feature_vocab))?;
    // training knobs come from the CLI config; the architecture stays bound
    // to the weights
    state.config.batch_size = cfg.batch_size;
    state.config.learning_rate = cfg.learning_rate;
    state.config.classifier_max_epochs = cfg.classifier_max_epochs;
    state.config.patience = cfg.patience;
    state.config.seed = seed;
    let plan = make_folds(&labels, test_fraction, folds, seed)?;
    let classifier = train_phenotype_classifier(&cohort, &labels, &state, &plan)?;
    let (target, _) = load_bundle(target_data)?;
    let predicted = cross_apply(&classifier.state, &meta.feature_vocab, &target)?;
    let reps_source = classifier.state.represent_cohort(&cohort)?;
    let reps_target = classifier.state.represent_cohort(&target)?;
    let comparison = compare_phenotype_distributions(
        &reps_source,
        &labels,
        &reps_target,
        &predicted,
        n_perm,
        seed,
    )?;
    fs::create_dir_all(out)?;
    write_labels_csv(&target, &predicted, fs::File::create(out.join("predicted_labels.csv"))?)?;
    write_json(
        &out.join("validation_report.json"),
        &json!({
            "fold_metrics": classifier.fold_metrics,
            "best_fold": classifier.best_fold,
            "test_accuracy": classifier.test_accuracy,
            "phenotype_matching": comparison.matching,
            "per_phenotype": comparison.per_phenotype,
            "reproduced": comparison.reproduced,
        }),
    )?;
    emit_summary(
        out,
        json!({
            "stage": "validate",
            "test_accuracy": classifier.test_accuracy,
            "p_values": comparison.per_phenotype.iter().map(|r| r.p_value).collect::<Vec<_>>(),
            "reproduced": comparison.reproduced,
        }),
    )?;
    Ok(if comparison.reproduced {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_pca(data: &Path, weights: &Path, labels_path: &Path, out: &Path) -> Result<ExitCode> {
    let (cohort, meta) = load_bundle(data)?;
    let labels = read_labels_csv(&cohort, fs::File::open(labels_path)?)?;
    let state = EncoderState::load(&weights.join("weights"), &meta.feature_vocab)
        .or_else(|_| EncoderState::load(weights, &meta.feature_vocab))?;
    let reps = state.represent_cohort(&cohort)?;
    let projection = pca_project(&reps, 2)?;
    fs::create_dir_all(out)?;
    let ids: Vec<String> = cohort.episodes.iter().map(|e| e.episode_id.clone()).collect();
    write_pca_csv(&ids, &projection, &labels, fs::File::create(out.join("pca.csv"))?)?;
    emit_summary(
        out,
        json!({
            "stage": "pca",
            "episodes": cohort.n_episodes(),
            "explained_variance_ratio": projection.explained_variance_ratio,
        }),
    )?;
    Ok(ExitCode::SUCCESS)
}
