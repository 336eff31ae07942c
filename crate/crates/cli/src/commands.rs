//! One function per subcommand; each reads its inputs, calls the engine and
//! writes its artifacts plus a manifest into the output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use deidseq_core::autodiff::ParamStore;
use deidseq_core::checkpoint::Archive;
use deidseq_core::corpusgen::{augmented_span_fraction, generate};
use deidseq_core::embeddings::{pretrain_charlm, CharLmEmbedder, CharVocab, EmbedderSpec, StackBuilder};
use deidseq_core::ensemble::{ensemble_corpora, tune_weights, EnsembleConfig};
use deidseq_core::eval::{
    confusion_matrix, evaluate_binary_merged, evaluate_binary_strict, evaluate_ner, filter_regions, EvalReport,
    FilterStats, RegionMask,
};
use deidseq_core::exec::Execution;
use deidseq_core::ingest::{read_corpus_dir, write_corpus_dir, AnnotatedDocument};
use deidseq_core::postprocess::{apply_rules, RuleSet};
use deidseq_core::tagger::{train, LabelInventory, TaggerModel};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, Preset, PREDICTIONS_DIR};
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    preset: Preset,
    seed: u64,
    versions: BTreeMap<&'static str, &'static str>,
    config: serde_json::Value,
}

pub fn config_hash(config: &PipelineConfig) -> String {
    let bytes = serde_json::to_vec(&config.canonical_json()).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_manifest(dir: &Path, command: &str, config: &PipelineConfig) -> Result<(), CliError> {
    let manifest = Manifest {
        command,
        config_sha256: config_hash(config),
        preset: config.preset,
        seed: config.seed,
        versions: BTreeMap::from([
            ("deidseq", env!("CARGO_PKG_VERSION")),
            ("deidseq-core", deidseq_core::VERSION),
        ]),
        config: config.canonical_json(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_split(dir: &Path, what: &str) -> Result<Vec<AnnotatedDocument>, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!(
            "{what} directory {} does not exist",
            dir.display()
        )));
    }
    Ok(read_corpus_dir(dir)?)
}

fn exec() -> Execution {
    Execution::default()
}

pub fn cmd_generate(config: &PipelineConfig, dir: &Path) -> Result<(), CliError> {
    let corpus = generate(&config.generator())?;
    corpus.write(dir)?;
    write_manifest(dir, "generate", config)?;
    info!(
        "wrote {} train, {} dev, {} test documents to {} ({:.1}% of spans outside real-text regions)",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        dir.display(),
        100.0 * augmented_span_fraction(&corpus)
    );
    Ok(())
}

pub fn cmd_pretrain_lm(config: &PipelineConfig) -> Result<(), CliError> {
    let docs = read_split(&config.corpus.join("train"), "training")?;
    let text = docs.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join("\n\n");
    let (lm, report) = pretrain_charlm(&text, &config.charlm_config(), exec())?;
    info!(
        "char-LM held-out perplexity: forward {:.3}, backward {:.3}",
        report.forward.perplexity(),
        report.backward.perplexity()
    );
    create_dir(&config.out)?;
    lm.to_archive()?.write(&config.out.join("charlm.bin"))?;
    write_json(&config.out.join("pretrain_report.json"), &report)?;
    write_manifest(&config.out, "pretrain-lm", config)
}

fn load_charlm(config: &PipelineConfig, specs: &[EmbedderSpec]) -> Result<Option<CharLmEmbedder>, CliError> {
    let lm_specs: Vec<_> = specs
        .iter()
        .filter_map(|s| match s {
            EmbedderSpec::Charlm(c) | EmbedderSpec::PooledCharlm(c) => Some(c),
            _ => None,
        })
        .collect();
    let Some(first) = lm_specs.first() else {
        return Ok(None);
    };
    let path = first.model.clone().unwrap_or_else(|| config.charlm_model());
    if lm_specs.iter().any(|s| s.model.as_ref().is_some_and(|m| m != &path)) {
        return Err(CliError::Usage(
            "all char-LM stack members must share one pretrained model".into(),
        ));
    }
    if !path.exists() {
        return Err(CliError::Data(format!(
            "char-LM archive {} not found; run `deidseq pretrain-lm` first or set `charlm.model`",
            path.display()
        )));
    }
    let lm = CharLmEmbedder::from_archive(Archive::read(&path)?)?;
    if let Some(s) = lm_specs.iter().find(|s| s.hidden != lm.hidden()) {
        return Err(CliError::Usage(format!(
            "stack declares char-LM hidden size {}, but {} has {}",
            s.hidden,
            path.display(),
            lm.hidden()
        )));
    }
    Ok(Some(lm))
}

pub fn cmd_train(config: &PipelineConfig) -> Result<(), CliError> {
    let specs = config.stack_specs()?;
    let train_docs = read_split(&config.corpus.join("train"), "training")?;
    let dev_docs = read_split(&config.corpus.join("dev"), "development")?;
    let labels = LabelInventory::observed(
        train_docs
            .iter()
            .chain(&dev_docs)
            .flat_map(|d| d.spans.iter().map(|s| s.label.as_str())),
    )?;
    let charlm = load_charlm(config, &specs)?;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stack = StackBuilder {
        specs: &specs,
        vocab: CharVocab::build(train_docs.iter().map(|d| d.text.as_str())),
        charlm,
        base_dir: Path::new(""),
        seed: config.seed,
    }
    .build(&mut store, &mut rng)?;
    info!(
        "stack of {} members, {} dimensions, {} labels",
        stack.members().len(),
        stack.dim(),
        labels.len()
    );
    let (model, log) = train(
        &train_docs,
        &dev_docs,
        stack,
        store,
        labels,
        &config.train_config(),
        exec(),
    )?;
    info!(
        "best dev F1 {:.4} at epoch {} of {}",
        model.meta.best_dev_f1, model.meta.best_epoch, model.meta.epochs_run
    );
    create_dir(&config.out)?;
    model.save(&config.out.join("model.bin"))?;
    write_json(&config.out.join("training_log.json"), &log)?;
    write_manifest(&config.out, "train", config)
}

fn rule_set(config: &PipelineConfig) -> Result<Option<RuleSet>, CliError> {
    if !config.rules.enabled {
        return Ok(None);
    }
    Ok(Some(match &config.rules.patterns {
        Some(p) => RuleSet::new(p.clone())?,
        None => RuleSet::default(),
    }))
}

pub fn cmd_predict(config: &PipelineConfig) -> Result<(), CliError> {
    let model_path = config.predict_model();
    if !model_path.exists() {
        return Err(CliError::Data(format!(
            "model {} not found; run `deidseq train` first or set `predict.model`",
            model_path.display()
        )));
    }
    let model = TaggerModel::load(&model_path)?;
    let docs = read_split(&config.predict_input(), "input")?;
    let mut predicted = model.predict_documents(&docs, exec())?;
    if let Some(rules) = rule_set(config)? {
        predicted = predicted.iter().map(|d| apply_rules(d, &rules)).collect();
    }
    let n_spans: usize = predicted.iter().map(|d| d.spans.len()).sum();
    let dir = config.out.join(PREDICTIONS_DIR);
    write_corpus_dir(&dir, &predicted)?;
    write_manifest(&config.out, "predict", config)?;
    info!(
        "{n_spans} spans in {} documents written to {}",
        predicted.len(),
        dir.display()
    );
    Ok(())
}

fn read_all(dirs: &[PathBuf]) -> Result<Vec<Vec<AnnotatedDocument>>, CliError> {
    dirs.iter().map(|d| read_split(d, "prediction")).collect()
}

#[derive(Serialize)]
struct EnsembleRecord {
    config: EnsembleConfig,
    tuned_dev_f1: Option<f64>,
    members: Vec<PathBuf>,
}

pub fn cmd_ensemble(config: &PipelineConfig) -> Result<(), CliError> {
    let section = &config.ensemble;
    if section.predictions.is_empty() {
        return Err(CliError::Usage(
            "`ensemble.predictions` lists no prediction directories".into(),
        ));
    }
    let members = read_all(&section.predictions)?;
    let mut classes: Vec<String> = members
        .iter()
        .flatten()
        .flat_map(|d| d.spans.iter().map(|s| s.label.clone()))
        .collect();
    let (ensemble_config, tuned_dev_f1) = if section.tune {
        if section.dev_predictions.len() != section.predictions.len() {
            return Err(CliError::Usage(
                "`ensemble.dev_predictions` must parallel `ensemble.predictions`".into(),
            ));
        }
        let dev = read_all(&section.dev_predictions)?;
        let gold = read_split(&config.corpus.join("dev"), "development")?;
        classes.extend(
            dev.iter()
                .flatten()
                .chain(&gold)
                .flat_map(|d| d.spans.iter().map(|s| s.label.clone())),
        );
        let labels = LabelInventory::observed(classes.iter().map(String::as_str))?;
        let tuned = tune_weights(&dev, &gold, &labels, &section.grid, exec())?;
        info!(
            "tuned {} grid points: weights {:?}, threshold {}, dev F1 {:.4}",
            tuned.points_evaluated,
            tuned.config.weights(),
            tuned.config.threshold(),
            tuned.dev_f1
        );
        (tuned.config, Some(tuned.dev_f1))
    } else {
        let (default_w, default_t) = Preset::ensemble_weights();
        let weights = match &section.weights {
            Some(w) => w.clone(),
            None if members.len() == default_w.len() => default_w,
            None => {
                return Err(CliError::Usage(format!(
                    "{} prediction directories need explicit `ensemble.weights`",
                    members.len()
                )))
            }
        };
        (
            EnsembleConfig::new(weights, section.threshold.unwrap_or(default_t))?,
            None,
        )
    };
    let labels = LabelInventory::observed(classes.iter().map(String::as_str))?;
    let combined = ensemble_corpora(&members, &ensemble_config, &labels)?;
    let dir = config.out.join(PREDICTIONS_DIR);
    write_corpus_dir(&dir, &combined)?;
    write_json(
        &config.out.join("ensemble.json"),
        &EnsembleRecord {
            config: ensemble_config,
            tuned_dev_f1,
            members: section.predictions.clone(),
        },
    )?;
    write_manifest(&config.out, "ensemble", config)?;
    info!(
        "ensembled {} classifiers over {} documents",
        members.len(),
        combined.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct RegionFilter {
    mask: PathBuf,
    gold: FilterStats,
    pred: FilterStats,
}

#[derive(Serialize)]
struct Report {
    ner: EvalReport,
    binary_strict: EvalReport,
    binary_merged: EvalReport,
    region_filter: Option<RegionFilter>,
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<(), CliError> {
    let mut gold = read_split(&config.eval_gold(), "gold")?;
    let mut pred = read_split(&config.eval_pred(), "prediction")?;
    let region_filter = match config.eval_mask() {
        Some(path) => {
            let mask = RegionMask::read(&path)?.restricted_to(&gold);
            mask.validate(&gold)?;
            let (g, gs) = filter_regions(&gold, &mask);
            let (p, ps) = filter_regions(&pred, &mask);
            gold = g;
            pred = p;
            Some(RegionFilter {
                mask: path,
                gold: gs,
                pred: ps,
            })
        }
        None => None,
    };
    let report = Report {
        ner: evaluate_ner(&gold, &pred)?,
        binary_strict: evaluate_binary_strict(&gold, &pred)?,
        binary_merged: evaluate_binary_merged(&gold, &pred)?,
        region_filter,
    };
    let mut text = String::new();
    for r in [&report.ner, &report.binary_strict, &report.binary_merged] {
        text.push_str(&r.to_table());
        text.push('\n');
    }
    if let Some(f) = &report.region_filter {
        text.push_str(&format!(
            "region filter {}: gold kept {} dropped {}, predictions kept {} dropped {}\n",
            f.mask.display(),
            f.gold.retained,
            f.gold.dropped(),
            f.pred.retained,
            f.pred.dropped()
        ));
    }
    create_dir(&config.out)?;
    write_json(&config.out.join("report.json"), &report)?;
    fs::write(config.out.join("report.txt"), &text).map_err(|e| CliError::io(&config.out, e))?;
    let confusion = confusion_matrix(&gold, &pred)?;
    fs::write(config.out.join("confusion.csv"), confusion.to_csv()).map_err(|e| CliError::io(&config.out, e))?;
    write_manifest(&config.out, "evaluate", config)?;
    print!("{text}");
    Ok(())
}
