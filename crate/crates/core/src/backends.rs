//! Annotator backends and the run executor.
//!
//! Two transports sit behind [`Annotator`]: an HTTP client for chat-style
//! completion endpoints and a scripted mock whose accuracy, hallucination and
//! blank rates are configured explicitly. [`run_annotation`] drives one
//! backend over a dataset for one prompt variant and persists the responses.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::parsing::normalize;
use crate::prompting::{
    build_prompt, ExemplarBank, PromptError, PromptPart, PromptVariant, RenderedPrompt, StyleBook,
};
use crate::rng::{mix64, SplitMix64};
use crate::store::{manifest_timestamp, RunManifest, RunStore, RunTotals, StoreError};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected response: {0}")]
    Response(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run store does not match this run: {0}")]
    Mismatch(String),
    #[error("run incomplete: {} instance(s) failed, first: {}", failed.len(), failed.first().map(|(id, e)| format!("{id}: {e}")).unwrap_or_default())]
    Incomplete { failed: Vec<(String, String)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Base delay; attempt `k` waits `backoff_ms * 2^(k-1)`.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockProfile {
    pub accuracy: f64,
    #[serde(default)]
    pub hallucination_rate: f64,
    #[serde(default)]
    pub blank_rate: f64,
    /// Preferred wrong answer per gold label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<BTreeMap<String, String>>,
    #[serde(default)]
    pub seed: u64,
    /// Simulated seconds per request, reported as latency.
    #[serde(default)]
    pub latency_secs: f64,
}

impl MockProfile {
    pub fn validate(&self) -> Result<(), BackendError> {
        let rates = [self.accuracy, self.hallucination_rate, self.blank_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(BackendError::Config("mock rates must lie in [0, 1]".into()));
        }
        if rates.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(BackendError::Config(
                "accuracy + hallucination_rate + blank_rate exceeds 1".into(),
            ));
        }
        if self.latency_secs < 0.0 || !self.latency_secs.is_finite() {
            return Err(BackendError::Config("latency_secs must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    Http {
        endpoint: String,
        /// Environment variable holding the bearer token.
        auth_env: String,
        model: String,
    },
    Mock(MockProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub style: String,
    pub transport: Transport,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of a pricing model in the pricing file.
    #[serde(default)]
    pub pricing: String,
}

fn default_parallel() -> usize {
    1
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::Config(format!(
                "{}: temperature {} outside [0, 2]",
                self.name, self.temperature
            )));
        }
        if self.max_parallel == 0 {
            return Err(BackendError::Config(format!("{}: max_parallel must be >= 1", self.name)));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config(format!("{}: retry.max_attempts must be >= 1", self.name)));
        }
        if let Transport::Mock(profile) = &self.transport {
            profile.validate()?;
        }
        Ok(())
    }

    /// Seed used to key option shuffles for this run.
    pub fn shuffle_seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub instance_id: String,
    pub backend: String,
    pub variant: PromptVariant,
    pub run_index: u32,
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub input_chars: u64,
    pub output_chars: u64,
    /// Seconds.
    pub latency: f64,
}

/// One line of `records.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    #[serde(flatten)]
    pub response: RawResponse,
    pub temperature: f64,
    pub option_order: Vec<String>,
    pub shuffle_seed: u64,
}

pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// Counts each maximal alphanumeric run as one token and every other
/// non-whitespace character as its own token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenizer;

impl Tokenizer for ApproxTokenizer {
    fn count(&self, text: &str) -> usize {
        let mut tokens = 0;
        let mut in_word = false;
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                if !in_word {
                    tokens += 1;
                    in_word = true;
                }
            } else {
                in_word = false;
                if !ch.is_whitespace() {
                    tokens += 1;
                }
            }
        }
        tokens
    }
}

pub fn token_count(text: &str) -> usize {
    ApproxTokenizer.count(text)
}

pub fn char_count(text: &str) -> usize {
    text.chars().count()
}

pub trait Annotator: Send + Sync {
    fn config(&self) -> &BackendConfig;

    fn annotate(&self, prompt: &RenderedPrompt, run_index: u32) -> Result<RawResponse, BackendError>;

    /// True when responses and timings are reproducible bit for bit.
    fn deterministic(&self) -> bool {
        false
    }
}

pub fn annotate_one(
    annotator: &dyn Annotator,
    prompt: &RenderedPrompt,
    run_index: u32,
) -> Result<RawResponse, BackendError> {
    annotator.annotate(prompt, run_index)
}

fn composed_input(styles: &StyleBook, style: &str, prompt: &RenderedPrompt) -> Result<Vec<(PromptPart, String)>, BackendError> {
    Ok(styles.compose(prompt, style)?)
}

fn count_input(parts: &[(PromptPart, String)], tokenizer: &dyn Tokenizer) -> (u64, u64) {
    parts.iter().fold((0, 0), |(t, c), (_, text)| {
        (t + tokenizer.count(text) as u64, c + char_count(text) as u64)
    })
}

struct GoldEntry {
    gold: Option<String>,
    e1: String,
    e2: String,
}

/// Scripted annotator: returns the gold option text with probability
/// `accuracy`, free text outside the options with `hallucination_rate`, an
/// empty string with `blank_rate`, and a wrong option otherwise.
pub struct MockAnnotator {
    config: BackendConfig,
    profile: MockProfile,
    styles: StyleBook,
    gold: HashMap<String, GoldEntry>,
    tokenizer: Box<dyn Tokenizer>,
}

const HALLUCINATION_PHRASES: [&str; 5] = [
    "{E1} has an agreement with {E2}",
    "{E1} holds a stake in {E2}",
    "{E1} is a member of {E2}",
    "{E1} operates as a subsidiary of {E2}",
    "The sentence does not describe how {E1} relates to {E2} in a useful way",
];

impl MockAnnotator {
    pub fn new(config: BackendConfig, dataset: &Dataset, styles: StyleBook) -> Result<Self, BackendError> {
        config.validate()?;
        let Transport::Mock(profile) = &config.transport else {
            return Err(BackendError::Config(format!("{} is not a mock backend", config.name)));
        };
        styles.backend_composition(PromptVariant::Simple, &config.style)?;
        let gold = dataset
            .instances
            .iter()
            .map(|i| {
                (
                    i.id.clone(),
                    GoldEntry {
                        gold: i.gold_label.clone(),
                        e1: i.e1.surface.clone(),
                        e2: i.e2.surface.clone(),
                    },
                )
            })
            .collect();
        Ok(Self {
            profile: profile.clone(),
            config,
            styles,
            gold,
            tokenizer: Box::new(ApproxTokenizer),
        })
    }

    fn rng_for(&self, prompt: &RenderedPrompt, run_index: u32) -> SplitMix64 {
        let key = format!(
            "{}|{}|{}|{}|{}",
            self.config.name,
            prompt.variant,
            run_index,
            self.config.temperature.to_bits(),
            prompt.instance_id
        );
        SplitMix64::keyed(self.profile.seed ^ mix64(self.config.seed.unwrap_or(0)), &key)
    }

    fn respond(&self, prompt: &RenderedPrompt, run_index: u32) -> Result<String, BackendError> {
        let entry = self.gold.get(&prompt.instance_id).ok_or_else(|| {
            BackendError::Response(format!("mock has no instance {}", prompt.instance_id))
        })?;
        let mut rng = self.rng_for(prompt, run_index);
        let position = |label: &str| prompt.option_order.iter().position(|l| l == label);
        let gold_pos = match entry.gold.as_deref().and_then(position) {
            Some(p) => p,
            None => rng.below(prompt.option_order.len() as u64) as usize,
        };
        let u = rng.next_f64();
        let p = &self.profile;
        if u < p.accuracy {
            return Ok(prompt.option_texts[gold_pos].clone());
        }
        if u < p.accuracy + p.hallucination_rate {
            let taken: HashSet<String> = prompt
                .option_texts
                .iter()
                .map(|t| normalize(t))
                .chain(prompt.option_order.iter().map(|l| l.replace('_', " ")))
                .collect();
            let start = rng.below(HALLUCINATION_PHRASES.len() as u64) as usize;
            for k in 0..HALLUCINATION_PHRASES.len() {
                let text = HALLUCINATION_PHRASES[(start + k) % HALLUCINATION_PHRASES.len()]
                    .replace("{E1}", &entry.e1)
                    .replace("{E2}", &entry.e2);
                if !taken.contains(&normalize(&text)) {
                    return Ok(text);
                }
            }
            return Ok(format!("unclear relation ({})", rng.next_u64()));
        }
        if u < p.accuracy + p.hallucination_rate + p.blank_rate {
            return Ok(String::new());
        }
        let gold_label = &prompt.option_order[gold_pos];
        let preferred = p
            .confusion
            .as_ref()
            .and_then(|c| c.get(gold_label))
            .and_then(|l| position(l))
            .filter(|&q| q != gold_pos);
        let wrong = match preferred {
            Some(q) => q,
            None if prompt.option_order.len() > 1 => {
                let k = rng.below(prompt.option_order.len() as u64 - 1) as usize;
                if k >= gold_pos {
                    k + 1
                } else {
                    k
                }
            }
            None => gold_pos,
        };
        Ok(prompt.option_texts[wrong].clone())
    }
}

impl Annotator for MockAnnotator {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn annotate(&self, prompt: &RenderedPrompt, run_index: u32) -> Result<RawResponse, BackendError> {
        let parts = composed_input(&self.styles, &self.config.style, prompt)?;
        let (input_tokens, input_chars) = count_input(&parts, self.tokenizer.as_ref());
        let text = self.respond(prompt, run_index)?;
        Ok(RawResponse {
            instance_id: prompt.instance_id.clone(),
            backend: self.config.name.clone(),
            variant: prompt.variant,
            run_index,
            input_tokens,
            output_tokens: self.tokenizer.count(&text) as u64,
            input_chars,
            output_chars: char_count(&text) as u64,
            text,
            latency: self.profile.latency_secs,
        })
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// Chat-completions style HTTP client with bearer auth and retries.
pub struct HttpAnnotator {
    config: BackendConfig,
    endpoint: String,
    model: String,
    token: String,
    styles: StyleBook,
    client: reqwest::blocking::Client,
    tokenizer: Box<dyn Tokenizer>,
}

impl HttpAnnotator {
    pub fn new(config: BackendConfig, styles: StyleBook) -> Result<Self, BackendError> {
        config.validate()?;
        let Transport::Http { endpoint, auth_env, model } = &config.transport else {
            return Err(BackendError::Config(format!("{} is not an http backend", config.name)));
        };
        let token = std::env::var(auth_env).map_err(|_| {
            BackendError::Config(format!(
                "{}: environment variable {auth_env} with the API token is not set",
                config.name
            ))
        })?;
        styles.backend_composition(PromptVariant::Simple, &config.style)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.clone(),
            model: model.clone(),
            token,
            styles,
            client,
            tokenizer: Box::new(ApproxTokenizer),
            config,
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Box<dyn Tokenizer>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    /// JSON body for one prompt: system-role parts become `system` messages,
    /// everything else `user` messages, in the style's order.
    pub fn request_body(&self, parts: &[(PromptPart, String)]) -> Value {
        let messages: Vec<Value> = parts
            .iter()
            .map(|(part, text)| {
                let role = if *part == PromptPart::SystemRole { "system" } else { "user" };
                json!({ "role": role, "content": text })
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn send(&self, body: &Value) -> Result<Value, BackendError> {
        let policy = &self.config.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts {
            let result = self
                .client
                .post(&self.endpoint)
                .bearer_auth(&self.token)
                .json(body)
                .send();
            match result {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| BackendError::Response(e.to_string()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    last = format!("HTTP {status}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message: last,
                        });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < policy.max_attempts {
                let delay = policy.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("{}: attempt {attempt} failed ({last}), retrying in {delay} ms", self.config.name);
                std::thread::sleep(Duration::from_millis(delay));
            }
        }
        Err(BackendError::Transport {
            attempts: policy.max_attempts,
            message: last,
        })
    }
}

/// Pulls the completion text out of the common response shapes.
pub fn extract_completion(value: &Value) -> Option<String> {
    let choice = &value["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .or_else(|| value["output_text"].as_str())
        .or_else(|| value["text"].as_str())
        .or_else(|| value["candidates"][0]["content"].as_str())
        .map(str::to_string)
}

impl Annotator for HttpAnnotator {
    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn annotate(&self, prompt: &RenderedPrompt, run_index: u32) -> Result<RawResponse, BackendError> {
        let parts = composed_input(&self.styles, &self.config.style, prompt)?;
        let (approx_in, input_chars) = count_input(&parts, self.tokenizer.as_ref());
        let body = self.request_body(&parts);
        let started = Instant::now();
        let value = self.send(&body)?;
        let latency = started.elapsed().as_secs_f64();
        let text = extract_completion(&value)
            .ok_or_else(|| BackendError::Response(format!("no completion text in {value}")))?;
        let usage = &value["usage"];
        Ok(RawResponse {
            instance_id: prompt.instance_id.clone(),
            backend: self.config.name.clone(),
            variant: prompt.variant,
            run_index,
            input_tokens: usage["prompt_tokens"].as_u64().unwrap_or(approx_in),
            output_tokens: usage["completion_tokens"]
                .as_u64()
                .unwrap_or(self.tokenizer.count(&text) as u64),
            input_chars,
            output_chars: char_count(&text) as u64,
            text,
            latency,
        })
    }
}

/// Builds the annotator a config describes.
pub fn make_annotator(
    config: &BackendConfig,
    dataset: &Dataset,
    styles: &StyleBook,
) -> Result<Box<dyn Annotator>, BackendError> {
    Ok(match config.transport {
        Transport::Mock(_) => Box::new(MockAnnotator::new(config.clone(), dataset, styles.clone())?),
        Transport::Http { .. } => Box::new(HttpAnnotator::new(config.clone(), styles.clone())?),
    })
}

/// Runs one backend over every instance for one variant, resuming from any
/// records already in `store`. Records are appended in dataset order whatever
/// the completion order; the manifest is written last and only when every
/// instance has a record.
pub fn run_annotation(
    dataset: &Dataset,
    bank: &ExemplarBank,
    annotator: &dyn Annotator,
    variant: PromptVariant,
    run_index: u32,
    store: &RunStore,
) -> Result<RunManifest, RunError> {
    let config = annotator.config();
    config.validate()?;
    let fingerprint = dataset.fingerprint();
    let run_id = RunManifest::derive_id(
        &fingerprint,
        &config.name,
        variant,
        config.temperature,
        config.seed,
        run_index,
    );

    if let Some(existing) = store.manifest()? {
        if existing.run_id != run_id || existing.dataset_fingerprint != fingerprint {
            return Err(RunError::Mismatch(format!(
                "{} holds run {} over dataset {}",
                store.dir().display(),
                existing.run_id,
                existing.dataset_fingerprint
            )));
        }
        return Ok(existing);
    }

    let known: HashSet<&str> = dataset.instances.iter().map(|i| i.id.as_str()).collect();
    let mut done = HashSet::new();
    for r in store.read_records()? {
        let resp = &r.response;
        if resp.backend != config.name || resp.variant != variant || resp.run_index != run_index {
            return Err(RunError::Mismatch(format!(
                "record for {} belongs to {}/{}/run{}",
                resp.instance_id, resp.backend, resp.variant, resp.run_index
            )));
        }
        if !known.contains(resp.instance_id.as_str()) {
            return Err(RunError::Mismatch(format!(
                "record for unknown instance {}",
                resp.instance_id
            )));
        }
        done.insert(resp.instance_id.clone());
    }

    let seed = config.shuffle_seed();
    let pending: Vec<RenderedPrompt> = dataset
        .instances
        .iter()
        .filter(|i| !done.contains(&i.id))
        .map(|i| build_prompt(i, dataset.schema_for(i), variant, bank, seed))
        .collect::<Result<_, _>>()?;

    let started = Instant::now();
    let mut writer = store.writer()?;
    let mut failed = Vec::new();
    let workers = config.max_parallel.min(pending.len()).max(1);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RawResponse, BackendError>)>();

    std::thread::scope(|scope| -> Result<(), RunError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let pending = &pending;
            scope.spawn(move || loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(prompt) = pending.get(idx) else { break };
                let result = annotator.annotate(prompt, run_index);
                if tx.send((idx, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffered: BTreeMap<usize, Result<RawResponse, BackendError>> = BTreeMap::new();
        let mut cursor = 0;
        for (idx, result) in rx {
            buffered.insert(idx, result);
            while let Some(result) = buffered.remove(&cursor) {
                let prompt = &pending[cursor];
                match result {
                    Ok(response) => writer.append(&RunRecord {
                        response,
                        temperature: config.temperature,
                        option_order: prompt.option_order.clone(),
                        shuffle_seed: prompt.shuffle_seed,
                    })?,
                    Err(e) => {
                        log::error!("{}: instance {} failed: {e}", config.name, prompt.instance_id);
                        failed.push((prompt.instance_id.clone(), e.to_string()));
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    })?;
    writer.finish()?;

    if !failed.is_empty() {
        return Err(RunError::Incomplete { failed });
    }

    let records = store.read_records()?;
    let mut totals = RunTotals::from_records(&records);
    if !annotator.deterministic() {
        totals.wall_seconds = started.elapsed().as_secs_f64();
    }
    let manifest = RunManifest {
        run_id,
        backend: config.clone(),
        variant,
        temperature: config.temperature,
        seed: config.seed,
        run_index,
        dataset_fingerprint: fingerprint,
        totals,
        created_at: manifest_timestamp(annotator.deterministic()),
    };
    store.write_manifest(&manifest)?;
    Ok(manifest)
}
