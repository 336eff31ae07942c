//! Pipeline configuration: one TOML file, overridable by flags.
//!
//! Relative paths in the file resolve against the file's directory; paths
//! given as flags resolve against the working directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deidseq_core::corpusgen::GeneratorConfig;
use deidseq_core::embeddings::{CharLmConfig, CharLmSpec, CharSpec, EmbedderSpec, NGramSpec};
use deidseq_core::ensemble::GridSpec;
use deidseq_core::postprocess::RuleSpec;
use deidseq_core::tagger::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Named run configurations: s1 char + n-gram + domain n-gram; s2 char-LM +
/// n-gram; s3 char-LM + n-gram + domain n-gram; s4 as s3 with pooled char-LM;
/// s5 the weighted ensemble of s1..s4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    S1,
    S2,
    S3,
    S4,
    S5,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            Preset::S1 => 1,
            Preset::S2 => 2,
            Preset::S3 => 3,
            Preset::S4 => 4,
            Preset::S5 => 5,
        };
        write!(f, "s{n}")
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        <Preset as clap::ValueEnum>::from_str(s, true).map_err(|_| CliError::Usage(format!("unknown preset `{s}`")))
    }
}

/// Second n-gram table standing in for domain-specific vectors; supply
/// `vectors` in an explicit stack to load real ones.
const DOMAIN_SEED_OFFSET: u64 = 1;
pub const DESK_NGRAM_DIM: usize = 50;

impl Preset {
    /// Stack members of a single-model preset; `None` for the ensemble.
    pub fn stack(self) -> Option<Vec<EmbedderSpec>> {
        let ngram = |seed_offset| {
            EmbedderSpec::Ngram(NGramSpec {
                dim: DESK_NGRAM_DIM,
                seed_offset,
                ..NGramSpec::default()
            })
        };
        let lm = EmbedderSpec::Charlm(CharLmSpec::default());
        Some(match self {
            Preset::S1 => vec![
                EmbedderSpec::Char(CharSpec::default()),
                ngram(0),
                ngram(DOMAIN_SEED_OFFSET),
            ],
            Preset::S2 => vec![lm, ngram(0)],
            Preset::S3 => vec![lm, ngram(0), ngram(DOMAIN_SEED_OFFSET)],
            Preset::S4 => vec![
                EmbedderSpec::PooledCharlm(CharLmSpec::default()),
                ngram(0),
                ngram(DOMAIN_SEED_OFFSET),
            ],
            Preset::S5 => return None,
        })
    }

    /// Ensemble weights for s1..s4 and the acceptance threshold.
    pub fn ensemble_weights() -> (Vec<f64>, f64) {
        (vec![0.5, 2.0, 2.5, 0.5], 3.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackSection {
    /// Explicit members; overrides the preset's stack when non-empty.
    pub members: Vec<EmbedderSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharLmSection {
    /// Pretrained archive used by char-LM stack members; defaults to
    /// `<out>/charlm.bin` of a previous `pretrain-lm` run in `out`.
    pub model: Option<PathBuf>,
    pub pretrain: CharLmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesSection {
    pub enabled: bool,
    /// Replaces the default URL, IPv4, IPv6 and MAC rules when present.
    pub patterns: Option<Vec<RuleSpec>>,
}

impl Default for RulesSection {
    fn default() -> Self {
        Self {
            enabled: true,
            patterns: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    /// Model archive; defaults to `<out>/model.bin`.
    pub model: Option<PathBuf>,
    /// Directory of `.txt` files; defaults to `<corpus>/test`.
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// Prediction directories, one per classifier.
    pub predictions: Vec<PathBuf>,
    /// Defaults to the s5 weights for four classifiers.
    pub weights: Option<Vec<f64>>,
    pub threshold: Option<f64>,
    /// Select weights and threshold on dev predictions instead.
    pub tune: bool,
    /// Dev prediction directories, parallel to `predictions`.
    pub dev_predictions: Vec<PathBuf>,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Defaults to `<corpus>/test`.
    pub gold: Option<PathBuf>,
    /// Defaults to `<out>/predictions`.
    pub pred: Option<PathBuf>,
    /// Real-text region mask; `<corpus>/masks.tsv` is used when present.
    pub mask: Option<PathBuf>,
    /// Disables the default mask lookup.
    pub no_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Corpus root holding `train/`, `dev/`, `test/`.
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub generate: GeneratorConfig,
    pub stack: StackSection,
    pub charlm: CharLmSection,
    pub train: TrainConfig,
    pub rules: RulesSection,
    pub predict: PredictSection,
    pub ensemble: EnsembleSection,
    pub evaluate: EvaluateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            preset: Preset::S1,
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("out"),
            generate: GeneratorConfig::default(),
            stack: StackSection::default(),
            charlm: CharLmSection::default(),
            train: TrainConfig::default(),
            rules: RulesSection::default(),
            predict: PredictSection::default(),
            ensemble: EnsembleSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path`, resolves relative paths against its directory, applies
    /// `overrides` and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.preset {
            self.preset = p;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.out);
        for m in &mut self.stack.members {
            match m {
                EmbedderSpec::Ngram(NGramSpec { vectors: Some(v), .. }) => fix(v),
                EmbedderSpec::Charlm(s) | EmbedderSpec::PooledCharlm(s) => {
                    if let Some(v) = &mut s.model {
                        fix(v)
                    }
                }
                _ => {}
            }
        }
        for p in [
            &mut self.charlm.model,
            &mut self.predict.model,
            &mut self.predict.input,
            &mut self.evaluate.gold,
            &mut self.evaluate.pred,
            &mut self.evaluate.mask,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.ensemble.predictions.iter_mut().for_each(fix);
        self.ensemble.dev_predictions.iter_mut().for_each(fix);
    }

    /// Section seeds must stay unset: all randomness derives from `seed`.
    pub fn validate(&self) -> Result<(), CliError> {
        for (section, s) in [
            ("generate", self.generate.seed),
            ("train", self.train.seed),
            ("charlm.pretrain", self.charlm.pretrain.seed),
        ] {
            if s != 0 {
                return Err(CliError::Usage(format!(
                    "`{section}.seed` is not configurable; set the top-level `seed` instead"
                )));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Stack members: explicit ones, else the preset's.
    pub fn stack_specs(&self) -> Result<Vec<EmbedderSpec>, CliError> {
        if !self.stack.members.is_empty() {
            return Ok(self.stack.members.clone());
        }
        self.preset.stack().ok_or_else(|| {
            CliError::Usage(format!(
                "preset {} is an ensemble; train s1..s4 and combine them with `ensemble`",
                self.preset
            ))
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            ..self.generate.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn charlm_config(&self) -> CharLmConfig {
        CharLmConfig {
            seed: self.seed,
            ..self.charlm.pretrain.clone()
        }
    }

    pub fn charlm_model(&self) -> PathBuf {
        self.charlm.model.clone().unwrap_or_else(|| self.out.join("charlm.bin"))
    }

    pub fn predict_model(&self) -> PathBuf {
        self.predict.model.clone().unwrap_or_else(|| self.out.join("model.bin"))
    }

    pub fn predict_input(&self) -> PathBuf {
        self.predict.input.clone().unwrap_or_else(|| self.corpus.join("test"))
    }

    pub fn eval_gold(&self) -> PathBuf {
        self.evaluate.gold.clone().unwrap_or_else(|| self.corpus.join("test"))
    }

    pub fn eval_pred(&self) -> PathBuf {
        self.evaluate
            .pred
            .clone()
            .unwrap_or_else(|| self.out.join(PREDICTIONS_DIR))
    }

    pub fn eval_mask(&self) -> Option<PathBuf> {
        if self.evaluate.no_mask {
            return None;
        }
        match &self.evaluate.mask {
            Some(m) => Some(m.clone()),
            None => Some(self.corpus.join(deidseq_core::corpusgen::MASK_FILE)).filter(|p| p.exists()),
        }
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub const PREDICTIONS_DIR: &str = "predictions";
