//! Label-preserving paraphrase augmentation: an offline synonym
//! substituter and a client for an external back-translation service.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledExample;
use crate::error::{Error, Result};
use crate::numkernel::SeededRng;

/// Overrides [`TranslationClientConfig::endpoint_url`] when set.
pub const ENDPOINT_ENV: &str = "GATED_DISENTANGLE_TRANSLATE_URL";

/// Produces a label-preserving rewrite of a text.
pub trait Paraphraser: Sync {
    /// `variant` distinguishes copies of the same text; implementations that
    /// are deterministic should depend only on `text` and `variant`.
    fn paraphrase(&self, text: &str, variant: u64) -> Result<String>;

    /// Paraphrases many texts, results in input order.
    fn paraphrase_all(&self, jobs: &[(&str, u64)]) -> Result<Vec<String>> {
        jobs.iter().map(|&(t, v)| self.paraphrase(t, v)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseConfig {
    /// Lowercase token → replacements.
    pub synonym_table: BTreeMap<String, Vec<String>>,
    pub swap_probability: f64,
    pub rng_seed: u64,
}

impl ParaphraseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_probability) {
            return Err(Error::InvalidArgument(format!("swap_probability must lie in [0, 1], got {}", self.swap_probability)));
        }
        if let Some((k, _)) = self.synonym_table.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InvalidArgument(format!("synonym entry `{k}` has no alternatives")));
        }
        Ok(())
    }

    /// A small table of symptom vocabulary.
    pub fn symptom_synonyms(swap_probability: f64, rng_seed: u64) -> Self {
        let pairs: &[(&str, &[&str])] = &[
            ("fever", &["pyrexia", "high temperature"]),
            ("rash", &["skin eruption", "skin irritation"]),
            ("itchy", &["itching", "pruritic"]),
            ("itching", &["itchiness", "pruritus"]),
            ("cough", &["coughing", "hacking cough"]),
            ("tired", &["fatigued", "exhausted"]),
            ("fatigue", &["tiredness", "exhaustion"]),
            ("headache", &["head pain", "cephalalgia"]),
            ("pain", &["ache", "discomfort"]),
            ("stomach", &["abdomen", "belly"]),
            ("vomiting", &["throwing up", "emesis"]),
            ("nausea", &["queasiness", "sickness"]),
            ("dizzy", &["lightheaded", "giddy"]),
            ("breath", &["breathing"]),
            ("swollen", &["puffy", "enlarged"]),
            ("sore", &["tender", "painful"]),
            ("chills", &["shivering", "shivers"]),
            ("sweating", &["perspiring", "perspiration"]),
            ("weak", &["feeble", "frail"]),
            ("red", &["reddish", "inflamed"]),
        ];
        ParaphraseConfig {
            synonym_table: pairs.iter().map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect())).collect(),
            swap_probability,
            rng_seed,
        }
    }
}

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn substitute_words(text: &str, config: &ParaphraseConfig, rng: &mut SeededRng) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        let ws = rest.find(|c: char| !c.is_whitespace()).unwrap_or(rest.len());
        out.push_str(&rest[..ws]);
        rest = &rest[ws..];
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let word = &rest[..end];
        rest = &rest[end..];
        if word.is_empty() {
            continue;
        }
        let core = word.trim_matches(is_edge_punctuation);
        let alts = (!core.is_empty()).then(|| config.synonym_table.get(&core.to_lowercase())).flatten();
        match alts {
            Some(alts) if rng.chance(config.swap_probability) => {
                let start = word.find(core).unwrap_or(0);
                out.push_str(&word[..start]);
                out.push_str(&alts[rng.below(alts.len())]);
                out.push_str(&word[start + core.len()..]);
            }
            _ => out.push_str(word),
        }
    }
    out
}

/// Replaces each table word with probability `swap_probability`. Spacing and
/// surrounding punctuation are kept.
pub fn rule_paraphrase(text: &str, config: &ParaphraseConfig) -> String {
    substitute_words(text, config, &mut SeededRng::new(config.rng_seed))
}

/// [`Paraphraser`] over [`rule_paraphrase`] with a per-variant stream.
#[derive(Clone, Debug)]
pub struct RuleParaphraser {
    config: ParaphraseConfig,
}

impl RuleParaphraser {
    pub fn new(config: ParaphraseConfig) -> Result<Self> {
        config.validate()?;
        Ok(RuleParaphraser { config })
    }
}

impl Paraphraser for RuleParaphraser {
    fn paraphrase(&self, text: &str, variant: u64) -> Result<String> {
        let seed = self.config.rng_seed ^ variant.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Ok(substitute_words(text, &self.config, &mut SeededRng::new(seed)))
    }
}

/// Originals in input order, followed by `copies` rounds of paraphrases
/// that keep each original's label.
pub fn augment_dataset(examples: &[LabeledExample], paraphraser: &dyn Paraphraser, copies: usize) -> Result<Vec<LabeledExample>> {
    let jobs: Vec<(&str, u64)> =
        (0..copies).flat_map(|c| examples.iter().enumerate().map(move |(i, e)| (e.text.as_str(), ((i as u64) << 16) | c as u64))).collect();
    let texts = paraphraser.paraphrase_all(&jobs)?;
    let mut out = examples.to_vec();
    let labels = (0..copies).flat_map(|_| examples.iter().map(|e| e.label.clone()));
    out.extend(labels.zip(texts).map(|(label, text)| LabeledExample { label, text }));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationClientConfig {
    pub endpoint_url: String,
    pub source_language_code: String,
    pub intermediate_language_code: String,
    pub timeout: Duration,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubled for each further one.
    pub backoff_base: Duration,
    pub max_in_flight: usize,
}

impl Default for TranslationClientConfig {
    fn default() -> Self {
        TranslationClientConfig {
            endpoint_url: "http://127.0.0.1:8080/translate".into(),
            source_language_code: "en".into(),
            intermediate_language_code: "de".into(),
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff_base: Duration::from_millis(250),
            max_in_flight: 4,
        }
    }
}

impl TranslationClientConfig {
    /// Applies the [`ENDPOINT_ENV`] override, if set and non-empty.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(url) = std::env::var(ENDPOINT_ENV) {
            if !url.trim().is_empty() {
                self.endpoint_url = url.trim().to_owned();
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.endpoint_url.trim().is_empty() {
            return Err(Error::InvalidArgument("endpoint_url is empty".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::InvalidArgument("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidArgument("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TranslateRequest<'a> {
    text: &'a str,
    source: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct TranslateResponse {
    text: String,
}

/// HTTP client for a `{"text","source","target"} → {"text"}` service.
#[derive(Clone, Debug)]
pub struct BacktranslationClient {
    config: TranslationClientConfig,
    agent: ureq::Agent,
}

enum Attempt {
    Retry(Error),
    Fail(Error),
}

impl BacktranslationClient {
    pub fn new(config: TranslationClientConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).http_status_as_error(false).build().into();
        Ok(BacktranslationClient { config, agent })
    }

    pub fn config(&self) -> &TranslationClientConfig {
        &self.config
    }

    fn attempt(&self, body: &TranslateRequest<'_>, attempts: u32) -> std::result::Result<String, Attempt> {
        let mut resp = match self.agent.post(&self.config.endpoint_url).send_json(body) {
            Ok(r) => r,
            Err(e) => return Err(Attempt::Retry(Error::Transport { attempts, message: e.to_string() })),
        };
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            let err = Error::Service { status, body };
            return Err(if status == 429 || status >= 500 { Attempt::Retry(err) } else { Attempt::Fail(err) });
        }
        let raw = resp.body_mut().read_to_string().map_err(|e| Attempt::Retry(Error::Transport { attempts, message: e.to_string() }))?;
        serde_json::from_str::<TranslateResponse>(&raw).map(|r| r.text).map_err(|e| Attempt::Fail(Error::Protocol(format!("{e}: {raw}"))))
    }

    /// One translation call with exponential-backoff retries.
    pub fn translate(&self, text: &str, source: &str, target: &str) -> Result<String> {
        let body = TranslateRequest { text, source, target };
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body, attempts) {
                Ok(t) => return Ok(t),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempts > self.config.max_retries => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let delay = self.config.backoff_base.saturating_mul(1 << (attempts - 1).min(16));
                    log::warn!("translation attempt {attempts} failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }

    /// Source → intermediate → source.
    pub fn backtranslate(&self, text: &str) -> Result<String> {
        let (src, mid) = (&self.config.source_language_code, &self.config.intermediate_language_code);
        let forward = self.translate(text, src, mid)?;
        self.translate(&forward, mid, src)
    }

    /// Back-translates every text with at most `max_in_flight` concurrent
    /// requests. Results are in input order.
    pub fn backtranslate_all(&self, texts: &[&str]) -> Vec<Result<String>> {
        let slots: Vec<Mutex<Option<Result<String>>>> = texts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(texts.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(text) = texts.get(i) else { break };
                    let r = self.backtranslate(text);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every slot is filled")).collect()
    }
}

/// Round trip through the configured service.
pub fn service_backtranslate(text: &str, config: &TranslationClientConfig) -> Result<String> {
    BacktranslationClient::new(config.clone())?.backtranslate(text)
}

impl Paraphraser for BacktranslationClient {
    fn paraphrase(&self, text: &str, _variant: u64) -> Result<String> {
        self.backtranslate(text)
    }

    fn paraphrase_all(&self, jobs: &[(&str, u64)]) -> Result<Vec<String>> {
        let texts: Vec<&str> = jobs.iter().map(|&(t, _)| t).collect();
        self.backtranslate_all(&texts).into_iter().collect()
    }
}
