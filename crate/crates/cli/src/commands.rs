use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use gated_disentangle::attention::AttentionVariant;
use gated_disentangle::augmentation::TranslationClientConfig;
use gated_disentangle::dataset::{load_csv, stratified_split, tokenize, write_csv, LabeledExample, Vocabulary, UNK_TOKEN};
use gated_disentangle::encoder::EncoderConfig;
use gated_disentangle::metrics::{per_class_csv, report_table};
use gated_disentangle::pipeline::{self, AugmentConfig, AugmentMode, Evaluation, PipelineConfig};
use gated_disentangle::training::{
    tiny_abfnn_check, tiny_head_check, tiny_model_check, write_log_csv, Checkpoint, GradCheckOptions, OptimizerKind, TrainConfig,
};
use gated_disentangle::{Error, Matrix, SeededRng};

use crate::{
    AttnmapCmd, AugmentArgs, AugmentCmd, Command, CompareCmd, EvalCmd, GradcheckCmd, ModelArgs, SplitChoice, TrainCmd, VariantChoice,
};

pub enum CliError {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Pipeline(e)
    }
}

type CliResult<T> = Result<T, CliError>;

pub fn run(command: Command) -> CliResult<ExitCode> {
    match command {
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Compare(c) => compare(c),
        Command::Gradcheck(c) => gradcheck(c),
        Command::Attnmap(c) => attnmap(c),
        Command::Augment(c) => augment(c),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Pipeline(Error::Io { path: path.to_path_buf(), source: e }))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn translation_config(url: Option<&str>) -> TranslationClientConfig {
    let mut cfg = TranslationClientConfig::default().with_env_override();
    if let Some(u) = url {
        cfg.endpoint_url = u.to_owned();
    }
    cfg
}

fn augment_config(a: &AugmentArgs, seed: u64) -> AugmentConfig {
    AugmentConfig {
        mode: a.augment,
        copies: a.copies,
        swap_probability: a.swap_probability,
        seed,
        translation: translation_config(a.translate_url.as_deref()),
    }
}

fn pipeline_config(m: &ModelArgs, variant: AttentionVariant) -> PipelineConfig {
    let optimizer = if m.optimizer == "sgd" { OptimizerKind::Sgd } else { OptimizerKind::adam() };
    PipelineConfig {
        encoder: EncoderConfig {
            num_layers: m.layers,
            d_model: m.d_model,
            num_heads: m.heads,
            ffn_size: m.ffn,
            k_max: m.k_max,
            max_len: m.max_len,
            variant,
            literal_scaling: m.literal_scaling,
        },
        head_hidden: m.head_hidden,
        train: TrainConfig { learning_rate: m.lr, epochs: m.epochs, batch_size: m.batch_size, seed: m.seed, optimizer },
        test_fraction: m.test_fraction,
        split_seed: m.seed,
        min_count: m.min_count,
        augment: augment_config(&m.augment, m.seed),
    }
}

fn check_config(cfg: &PipelineConfig) -> CliResult<()> {
    cfg.encoder.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(CliError::Usage(format!("--test-fraction must lie in (0, 1), got {}", cfg.test_fraction)));
    }
    if cfg.augment.mode != AugmentMode::None && cfg.augment.copies == 0 {
        return Err(CliError::Usage("--copies must be at least 1 when augmenting".into()));
    }
    Ok(())
}

fn train(c: TrainCmd) -> CliResult<ExitCode> {
    let cfg = pipeline_config(&c.model, c.variant);
    check_config(&cfg)?;
    let examples = load_csv(&c.data)?;
    log::info!("loaded {} examples from {}", examples.len(), c.data.display());
    let outcome = pipeline::train_pipeline(&examples, &cfg)?;
    outcome.checkpoint.save(&c.out)?;
    let log_path = c.log.unwrap_or_else(|| with_suffix(&c.out, ".log.csv"));
    write_log_csv(&log_path, &outcome.log)?;

    let ck = &outcome.checkpoint;
    let mut rows = vec![("train".to_owned(), pipeline::evaluate_encoded(&ck.model, &outcome.data.train, &ck.labels)?.report)];
    if !outcome.data.test.is_empty() {
        rows.push(("test".to_owned(), pipeline::evaluate_encoded(&ck.model, &outcome.data.test, &ck.labels)?.report));
    }
    print!("{}", report_table(&rows)?.text);
    println!("checkpoint: {}", c.out.display());
    println!("training log: {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn metadata_value<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> CliResult<T> {
    ck.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Pipeline(Error::Format(format!("checkpoint metadata lacks `{key}`"))))
}

fn select_split(ck: &Checkpoint, examples: Vec<LabeledExample>, split: SplitChoice) -> CliResult<Vec<LabeledExample>> {
    if split == SplitChoice::All {
        return Ok(examples);
    }
    let fraction: f64 = metadata_value(ck, "test_fraction")?;
    let seed: u64 = metadata_value(ck, "split_seed")?;
    let s = stratified_split(&examples, fraction, &mut SeededRng::new(seed))?;
    Ok(if split == SplitChoice::Train { s.train } else { s.test })
}

fn write_evaluation(prefix: &Path, name: &str, ev: &Evaluation, labels: &[String]) -> CliResult<()> {
    let table = report_table(&[(name.to_owned(), ev.report.clone())])?;
    write_file(&with_suffix(prefix, ".report.csv"), table.csv.as_bytes())?;
    write_file(&with_suffix(prefix, ".confusion.csv"), ev.confusion.to_csv().as_bytes())?;
    write_file(&with_suffix(prefix, ".per_class.csv"), per_class_csv(&ev.report, labels).as_bytes())
}

fn eval(c: EvalCmd) -> CliResult<ExitCode> {
    let ck = Checkpoint::load(&c.ckpt)?;
    let examples = select_split(&ck, load_csv(&c.data)?, c.split)?;
    let ev = pipeline::evaluate_checkpoint(&ck, &examples)?;
    let name = ck.model.config.encoder.variant.to_string();
    print!("{}", report_table(&[(name.clone(), ev.report.clone())])?.text);
    if ev.report.undefined.any() {
        log::warn!("some per-class metrics are undefined and were set to 0");
    }
    if let Some(prefix) = &c.out {
        write_evaluation(prefix, &name, &ev, &ck.labels)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(c: CompareCmd) -> CliResult<ExitCode> {
    if c.variants.is_empty() {
        return Err(CliError::Usage("--variants is empty".into()));
    }
    let examples = load_csv(&c.data)?;
    let mut rows = Vec::new();
    for &variant in &c.variants {
        let cfg = pipeline_config(&c.model, variant);
        check_config(&cfg)?;
        log::info!("training {variant}");
        let outcome = pipeline::train_pipeline(&examples, &cfg)?;
        let ck = &outcome.checkpoint;
        let ev = pipeline::evaluate_encoded(&ck.model, &outcome.data.test, &ck.labels)?;
        rows.push((variant.to_string(), ev.report));
    }
    let table = report_table(&rows)?;
    print!("{}", table.text);
    if let Some(out) = &c.out {
        write_file(out, table.csv.as_bytes())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(c: GradcheckCmd) -> CliResult<ExitCode> {
    let opts = GradCheckOptions { epsilon: c.epsilon, threshold: c.threshold, seed: c.seed, ..GradCheckOptions::default() };
    if !(opts.epsilon > 0.0 && opts.threshold > 0.0) {
        return Err(CliError::Usage("--epsilon and --threshold must be positive".into()));
    }
    let variants: Vec<AttentionVariant> = match c.variant {
        VariantChoice::Entangled => vec![AttentionVariant::Entangled],
        VariantChoice::Static => vec![AttentionVariant::DisentangledStatic],
        VariantChoice::Gated => vec![AttentionVariant::DisentangledGated],
        VariantChoice::All => AttentionVariant::ALL.to_vec(),
    };
    let mut all_passed = true;
    for v in variants {
        for (what, report) in [("head", tiny_head_check(v, &opts)?), ("model", tiny_model_check(v, &opts)?)] {
            println!("{v} {what}: {report}");
            all_passed &= report.passed();
        }
    }
    if c.abfnn {
        let report = tiny_abfnn_check(&opts)?;
        println!("abfnn: {report}");
        all_passed &= report.passed();
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Row-per-query CSV of attention weights.
pub fn weights_csv(w: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..w.rows() {
        let row: Vec<String> = w.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Plain-text greyscale image, one pixel per weight, 255 = weight 1.
pub fn weights_pgm(w: &Matrix) -> String {
    let mut out = format!("P2\n{} {}\n255\n", w.cols(), w.rows());
    for i in 0..w.rows() {
        let row: Vec<String> = w.row(i).iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

fn attnmap(c: AttnmapCmd) -> CliResult<ExitCode> {
    let ck = Checkpoint::load(&c.ckpt)?;
    let enc = &ck.model.config.encoder;
    if c.layer >= enc.num_layers {
        return Err(CliError::Usage(format!("--layer {} out of range (model has {})", c.layer, enc.num_layers)));
    }
    if c.head >= enc.num_heads {
        return Err(CliError::Usage(format!("--head {} out of range (model has {})", c.head, enc.num_heads)));
    }
    let vocab = Vocabulary::from_tokens(ck.vocabulary.clone())?;
    let mut tokens: Vec<String> = tokenize(&c.text).into_iter().take(enc.max_len).collect();
    if tokens.is_empty() {
        tokens.push(UNK_TOKEN.to_owned());
    }
    let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mask = vec![true; ids.len()];
    let (_, traces) = ck.model.forward_traced(&ids, &mask)?;
    let weights = &traces[c.layer][c.head].weights;

    write_file(&with_suffix(&c.out, ".csv"), weights_csv(weights).as_bytes())?;
    write_file(&with_suffix(&c.out, ".pgm"), weights_pgm(weights).as_bytes())?;
    let labels: String = tokens
        .iter()
        .zip(&ids)
        .map(|(t, &id)| if id == gated_disentangle::dataset::UNK_ID { format!("{t}\t{UNK_TOKEN}\n") } else { format!("{t}\n") })
        .collect();
    write_file(&with_suffix(&c.out, ".tokens.txt"), labels.as_bytes())?;
    println!("{} x {} attention map written to {}.{{csv,pgm,tokens.txt}}", weights.rows(), weights.cols(), c.out.display());
    Ok(ExitCode::SUCCESS)
}

fn augment(c: AugmentCmd) -> CliResult<ExitCode> {
    if c.mode == AugmentMode::None {
        return Err(CliError::Usage("--mode must be rule or service".into()));
    }
    if c.copies == 0 {
        return Err(CliError::Usage("--copies must be at least 1".into()));
    }
    let examples = load_csv(&c.data)?;
    let cfg = AugmentConfig {
        mode: c.mode,
        copies: c.copies,
        swap_probability: c.swap_probability,
        seed: c.seed,
        translation: translation_config(c.translate_url.as_deref()),
    };
    let out = pipeline::augment(&examples, &cfg)?;
    write_csv(&c.out, &out)?;
    println!("{} rows ({} original) written to {}", out.len(), examples.len(), c.out.display());
    Ok(ExitCode::SUCCESS)
}
