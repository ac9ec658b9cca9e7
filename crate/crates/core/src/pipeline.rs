//! Split, augment, encode, train and evaluate, in that order.
//!
//! The held-out split is taken from raw text before any augmentation and
//! the vocabulary is built from the (augmented) training portion only.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_dataset, BacktranslationClient, ParaphraseConfig, RuleParaphraser, TranslationClientConfig};
use crate::dataset::{stratified_split, DatasetSplit, EncodedExample, LabelMap, LabeledExample, Vocabulary, DEFAULT_TEST_FRACTION};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{confusion, evaluate, ConfusionMatrix, MetricsReport};
use crate::model::{argmax, Classifier, ModelConfig};
use crate::numkernel::SeededRng;
use crate::training::{predict_all, train, Checkpoint, EpochLog, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentMode {
    #[default]
    None,
    /// Seeded synonym substitution.
    Rule,
    /// Round trip through an external translation service.
    Service,
}

impl AugmentMode {
    pub fn name(self) -> &'static str {
        match self {
            AugmentMode::None => "none",
            AugmentMode::Rule => "rule",
            AugmentMode::Service => "service",
        }
    }
}

impl fmt::Display for AugmentMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AugmentMode::None),
            "rule" => Ok(AugmentMode::Rule),
            "service" | "backtranslate" => Ok(AugmentMode::Service),
            other => Err(Error::InvalidArgument(format!("unknown augmentation mode `{other}` (expected none, rule or service)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mode: AugmentMode,
    /// Paraphrases generated per training example.
    pub copies: usize,
    pub swap_probability: f64,
    pub seed: u64,
    pub translation: TranslationClientConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mode: AugmentMode::None,
            copies: 1,
            swap_probability: 0.5,
            seed: 42,
            translation: TranslationClientConfig::default(),
        }
    }
}

/// Applies `config.mode` to `examples`; originals come first.
pub fn augment(examples: &[LabeledExample], config: &AugmentConfig) -> Result<Vec<LabeledExample>> {
    match config.mode {
        AugmentMode::None => Ok(examples.to_vec()),
        AugmentMode::Rule => {
            let p = RuleParaphraser::new(ParaphraseConfig::symptom_synonyms(config.swap_probability, config.seed))?;
            augment_dataset(examples, &p, config.copies)
        }
        AugmentMode::Service => {
            let client = BacktranslationClient::new(config.translation.clone())?;
            augment_dataset(examples, &client, config.copies)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    /// Classifier hidden width; `None` uses `d_model`.
    pub head_hidden: Option<usize>,
    pub train: TrainConfig,
    pub test_fraction: f64,
    /// Seeds the split; parameter init and shuffling use `train.seed`.
    pub split_seed: u64,
    pub min_count: usize,
    pub augment: AugmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::default(),
            head_hidden: None,
            train: TrainConfig::default(),
            test_fraction: DEFAULT_TEST_FRACTION,
            split_seed: 42,
            min_count: 1,
            augment: AugmentConfig::default(),
        }
    }
}

/// Everything between the raw corpus and the trainer.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub split: DatasetSplit,
    /// `split.train` plus its paraphrases.
    pub augmented_train: Vec<LabeledExample>,
    pub vocabulary: Vocabulary,
    pub train: Vec<EncodedExample>,
    pub test: Vec<EncodedExample>,
}

impl PreparedData {
    pub fn label_map(&self) -> &LabelMap {
        &self.split.label_map
    }
}

pub fn split(examples: &[LabeledExample], config: &PipelineConfig) -> Result<DatasetSplit> {
    stratified_split(examples, config.test_fraction, &mut SeededRng::new(config.split_seed))
}

pub fn prepare(examples: &[LabeledExample], config: &PipelineConfig) -> Result<PreparedData> {
    let split = split(examples, config)?;
    let held_out = split.test.clone();
    let augmented_train = augment(&split.train, &config.augment)?;
    if split.test != held_out {
        return Err(Error::InvalidArgument("augmentation modified the test split".into()));
    }
    let max_len = config.encoder.max_len;
    let vocabulary = Vocabulary::build(augmented_train.iter().map(|e| e.text.as_str()), config.min_count)?;
    let train = vocabulary.encode_examples(&augmented_train, max_len, &split.label_map)?;
    let test = vocabulary.encode_examples(&split.test, max_len, &split.label_map)?;
    Ok(PreparedData { split, augmented_train, vocabulary, train, test })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub data: PreparedData,
}

/// Prepares the data, trains a fresh model and packages it with its
/// vocabulary, labels and the settings that reproduce the split.
pub fn train_pipeline(examples: &[LabeledExample], config: &PipelineConfig) -> Result<TrainOutcome> {
    let data = prepare(examples, config)?;
    let mut model_config = ModelConfig::new(config.encoder.clone(), data.vocabulary.len(), data.label_map().len());
    if let Some(h) = config.head_hidden {
        model_config.head_hidden = h;
    }
    let model = Classifier::new(model_config, config.train.seed)?;
    let (model, log) = train(model, &data.train, &config.train)?;
    let mut checkpoint = Checkpoint::new(model, data.vocabulary.tokens().to_vec(), data.label_map().names().to_vec());
    checkpoint.metadata = metadata(config);
    Ok(TrainOutcome { checkpoint, log, data })
}

fn metadata(config: &PipelineConfig) -> BTreeMap<String, String> {
    let t = &config.train;
    [
        ("augment", config.augment.mode.to_string()),
        ("augment_copies", config.augment.copies.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("epochs", t.epochs.to_string()),
        ("learning_rate", t.learning_rate.to_string()),
        ("min_count", config.min_count.to_string()),
        ("seed", t.seed.to_string()),
        ("split_seed", config.split_seed.to_string()),
        ("test_fraction", config.test_fraction.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

/// Predictions of a model on labeled text, with metrics.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<usize>,
    pub true_labels: Vec<usize>,
}

pub fn evaluate_encoded(model: &Classifier, data: &[EncodedExample], labels: &[String]) -> Result<Evaluation> {
    let k = model.config.num_classes;
    let probabilities = predict_all(model, data)?;
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    let true_labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let report = evaluate(&true_labels, &probabilities, k)?;
    let confusion = confusion(&true_labels, &predicted, k)?.with_labels(labels.to_vec())?;
    Ok(Evaluation { report, confusion, probabilities, predicted, true_labels })
}

/// Encodes `examples` with the checkpoint's own vocabulary and labels.
pub fn encode_for(checkpoint: &Checkpoint, examples: &[LabeledExample]) -> Result<Vec<EncodedExample>> {
    let vocabulary = Vocabulary::from_tokens(checkpoint.vocabulary.clone())?;
    let labels = LabelMap::from_names(checkpoint.labels.clone());
    if labels.names() != checkpoint.labels.as_slice() {
        return Err(Error::Format("checkpoint labels are not sorted and unique".into()));
    }
    vocabulary.encode_examples(examples, checkpoint.model.config.encoder.max_len, &labels)
}

pub fn evaluate_checkpoint(checkpoint: &Checkpoint, examples: &[LabeledExample]) -> Result<Evaluation> {
    let data = encode_for(checkpoint, examples)?;
    evaluate_encoded(&checkpoint.model, &data, &checkpoint.labels)
}
