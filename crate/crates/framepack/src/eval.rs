//! LLM-as-judge evaluation: prompts, response parsing, aggregation, clients.
//!
//! Open-ended predictions are scored by an external judge model with a fixed
//! prompt pair. The judge replies with a tiny Python-style dictionary; we
//! parse the verdict and the 0-5 score, retry transport failures a bounded
//! number of times, and aggregate accuracy (percent of `yes` verdicts) and
//! the mean score. Multiple-choice items skip the judge entirely and are
//! matched against their options directly.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Judge system prompt. Fixed text; changing a byte is a contract break, and
/// the golden-file tests treat it that way.
pub const JUDGE_SYSTEM_PROMPT: &str = "You are an intelligent chatbot designed for evaluating the correctness of generative outputs for question-answer pairs. Your task is to compare the predicted answer with the correct answer and determine if they match meaningfully. Here's how you can accomplish the task:\nINSTRUCTIONS:\n- Focus on the meaningful match between the predicted answer and the correct answer.\n- Consider synonyms or paraphrases as valid matches.\n- Evaluate the correctness of the prediction compared to the answer.";

/// Judge user prompt template with `{question}`, `{answer}`, and `{pred}`
/// placeholders. Same stability contract as [`JUDGE_SYSTEM_PROMPT`].
pub const JUDGE_USER_TEMPLATE: &str = "Please evaluate the following video-based question-answer pair:\nQuestion: {question}\nCorrect Answer: {answer}\nPredicted Answer: {pred}\nProvide your evaluation only as a yes/no and score where the score is an integer value between 0 and 5, with 5 indicating the highest meaningful match. Please generate the response in the form of a Python dictionary string with keys 'pred' and 'score', where the value of 'pred' is a string of 'yes' or 'no' and the value of 'score' is an INTEGER, not STRING. DO NOT PROVIDE ANY OTHER OUTPUT TEXT OR EXPLANATION. Only provide the Python dictionary string. For example, your response should look like this: {'pred': 'yes', 'score': 4.8}.";

/// One question-answer-prediction record. Open-ended items leave `options`
/// and `gold_option_index` unset; multiple-choice items set both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    /// Ground-truth answer text.
    pub answer: String,
    /// The model-under-test's output.
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold_option_index: Option<usize>,
}

impl QAItem {
    pub fn open(id: &str, question: &str, answer: &str, prediction: &str) -> Self {
        QAItem {
            id: id.to_string(),
            question: question.to_string(),
            answer: answer.to_string(),
            prediction: prediction.to_string(),
            options: None,
            gold_option_index: None,
        }
    }

    pub fn is_mcq(&self) -> bool {
        self.options.is_some()
    }
}

/// The judge's yes/no verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

/// A parsed judge response: verdict plus a score clamped into `[0, 5]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Judgement {
    pub pred: Verdict,
    pub score: f64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no brace-delimited map found in the response")]
    NoMap,
    #[error("response map is missing key `{0}`")]
    MissingKey(&'static str),
    #[error("score `{0}` is not numeric")]
    NonNumericScore(String),
    #[error("pred `{0}` is neither yes nor no")]
    UnrecognizedPred(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("item `{0}` is multiple-choice; the judge takes open-ended items")]
    McqItem(String),
    #[error("item `{0}` is open-ended; MCQ scoring needs options")]
    OpenItem(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
}

/// Fill the judge templates for one open-ended item. Returns the
/// `(system, user)` prompt pair; multiple-choice items are refused.
pub fn render_judge_prompts(item: &QAItem) -> Result<(String, String), EvalError> {
    if item.is_mcq() {
        return Err(EvalError::McqItem(item.id.clone()));
    }
    let user = JUDGE_USER_TEMPLATE
        .replace("{question}", &item.question)
        .replace("{answer}", &item.answer)
        .replace("{pred}", &item.prediction);
    Ok((JUDGE_SYSTEM_PROMPT.to_string(), user))
}

/// Parse the first `{...}` map in a judge response.
///
/// Accepts single or double quotes (single quotes are normalized by plain
/// substitution, which is fine for the contract's flat two-key map). `pred`
/// must normalize to yes or no, case-insensitively. The score may be an
/// integer, a decimal, or a numeric string; out-of-range values clamp into
/// `[0, 5]` because the judge is an uncontrolled external system.
pub fn parse_judge_response(text: &str) -> Result<Judgement, ParseError> {
    let open = text.find('{').ok_or(ParseError::NoMap)?;
    let close = text[open..].find('}').ok_or(ParseError::NoMap)? + open;
    let body = &text[open..=close];
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(body)
        .or_else(|_| serde_json::from_str(&body.replace('\'', "\"")))
        .map_err(|_| ParseError::NoMap)?;

    let pred_value = map.get("pred").ok_or(ParseError::MissingKey("pred"))?;
    let pred_text = match pred_value {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let pred = match pred_text.trim().to_ascii_lowercase().as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => return Err(ParseError::UnrecognizedPred(pred_text)),
    };

    let score_value = map.get("score").ok_or(ParseError::MissingKey("score"))?;
    let score = match score_value {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|v| v.is_finite())
    .ok_or_else(|| ParseError::NonNumericScore(score_value.to_string()))?;

    Ok(Judgement { pred, score: score.clamp(0.0, 5.0) })
}

/// Error delivering a request to the judge (network, HTTP status, or a
/// malformed completion envelope). Retryable, unlike parse errors.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// Why one item produced no judgement.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ItemFailure {
    #[error("transport failure after retries: {0}")]
    Transport(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("multiple-choice item cannot be judged")]
    WrongKind,
}

/// One item's outcome, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemResult {
    pub id: String,
    pub outcome: Result<Judgement, ItemFailure>,
}

/// Anything that can answer a judge prompt. `request_index` is the item's
/// position in the batch, which lets deterministic stubs key their script
/// without inspecting prompt text; HTTP clients ignore it.
pub trait JudgeClient: Sync {
    fn complete(&self, request_index: usize, system: &str, user: &str)
        -> Result<String, TransportError>;
}

/// Judge every item with at most `parallelism` requests in flight.
///
/// Each item is attempted up to three times on transport errors (parse
/// failures are never retried; resending the same prompt cannot fix a
/// malformed reply). Results come back in input order regardless of which
/// worker finished first, so a deterministic client makes the whole batch
/// independent of the parallelism level.
pub fn judge_items(
    items: &[QAItem],
    client: &dyn JudgeClient,
    parallelism: usize,
) -> Vec<ItemResult> {
    assert!(parallelism >= 1, "parallelism must be at least 1");
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<ItemResult>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = parallelism.min(items.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(judge_one(&items[i], i, client));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn judge_one(item: &QAItem, index: usize, client: &dyn JudgeClient) -> ItemResult {
    let (system, user) = match render_judge_prompts(item) {
        Ok(prompts) => prompts,
        Err(_) => return ItemResult { id: item.id.clone(), outcome: Err(ItemFailure::WrongKind) },
    };
    let mut last_error = String::new();
    for _ in 0..3 {
        match client.complete(index, &system, &user) {
            Ok(text) => {
                return ItemResult {
                    id: item.id.clone(),
                    outcome: parse_judge_response(&text).map_err(ItemFailure::from),
                };
            }
            Err(TransportError(message)) => last_error = message,
        }
    }
    ItemResult { id: item.id.clone(), outcome: Err(ItemFailure::Transport(last_error)) }
}

/// Per-item entry of an [`EvalReport`]. Judge runs fill `pred`/`score` or
/// `error`; MCQ runs fill `matched_option`/`correct`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerItem {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pred: Option<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_option: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

/// Aggregated metrics. `accuracy` is the percentage of `yes` verdicts among
/// judged items (or of correct matches for MCQ); `mean_score` averages the
/// judged scores. Both are `None` when nothing was judged, and failures are
/// excluded from both denominators: `n` = judged + failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub mean_score: Option<f64>,
    pub failures: usize,
    pub per_item: Vec<PerItem>,
}

/// Aggregate judge outcomes into a report.
pub fn compute_report(results: &[ItemResult]) -> EvalReport {
    let mut judged = 0usize;
    let mut yes = 0usize;
    let mut score_total = 0.0;
    let mut failures = 0usize;
    let per_item = results
        .iter()
        .map(|result| match &result.outcome {
            Ok(judgement) => {
                judged += 1;
                if judgement.pred == Verdict::Yes {
                    yes += 1;
                }
                score_total += judgement.score;
                PerItem {
                    id: result.id.clone(),
                    pred: Some(judgement.pred),
                    score: Some(judgement.score),
                    error: None,
                    matched_option: None,
                    correct: None,
                }
            }
            Err(failure) => {
                failures += 1;
                PerItem {
                    id: result.id.clone(),
                    pred: None,
                    score: None,
                    error: Some(failure.to_string()),
                    matched_option: None,
                    correct: None,
                }
            }
        })
        .collect();
    let (accuracy, mean_score) = if judged > 0 {
        (
            Some(100.0 * yes as f64 / judged as f64),
            Some(score_total / judged as f64),
        )
    } else {
        (None, None)
    };
    EvalReport { n: results.len(), accuracy, mean_score, failures, per_item }
}

/// Score multiple-choice items without a judge.
///
/// A prediction matches an option by letter first: a leading `A` through `E`
/// (case-insensitive) followed by nothing alphanumeric picks that option
/// index. Otherwise the longest option whose text appears case-insensitively
/// inside the prediction wins, earliest option on ties. Predictions matching
/// nothing count as incorrect, never as errors.
pub fn score_mcq(items: &[QAItem]) -> Result<EvalReport, EvalError> {
    let mut correct_count = 0usize;
    let mut per_item = Vec::with_capacity(items.len());
    for item in items {
        let (Some(options), Some(gold)) = (&item.options, item.gold_option_index) else {
            return Err(EvalError::OpenItem(item.id.clone()));
        };
        let matched = match_option(&item.prediction, options);
        let correct = matched == Some(gold);
        if correct {
            correct_count += 1;
        }
        per_item.push(PerItem {
            id: item.id.clone(),
            pred: None,
            score: None,
            error: None,
            matched_option: matched,
            correct: Some(correct),
        });
    }
    let accuracy = if items.is_empty() {
        None
    } else {
        Some(100.0 * correct_count as f64 / items.len() as f64)
    };
    Ok(EvalReport { n: items.len(), accuracy, mean_score: None, failures: 0, per_item })
}

fn match_option(prediction: &str, options: &[String]) -> Option<usize> {
    let trimmed = prediction.trim();
    // Letter prefix: "B", "b)", "C. because ...".
    if let Some(first) = trimmed.chars().next() {
        let upper = first.to_ascii_uppercase();
        if ('A'..='E').contains(&upper) {
            let rest_is_separator = trimmed
                .chars()
                .nth(1)
                .map_or(true, |c| !c.is_alphanumeric());
            let index = (upper as u8 - b'A') as usize;
            if rest_is_separator && index < options.len() {
                return Some(index);
            }
        }
    }
    // Containment: longest option text found inside the prediction wins.
    let lower = trimmed.to_lowercase();
    let mut best: Option<usize> = None;
    for (i, option) in options.iter().enumerate() {
        let needle = option.trim().to_lowercase();
        if needle.is_empty() || !lower.contains(&needle) {
            continue;
        }
        let better = match best {
            None => true,
            Some(b) => needle.chars().count() > options[b].trim().chars().count(),
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("item {index}: {message}")]
    Schema { index: usize, message: String },
    #[error("item {index}: duplicate id `{id}`")]
    DuplicateId { index: usize, id: String },
}

/// Load and validate a QA dataset: a JSON array of objects with `id`,
/// `question`, `answer`, and `prediction`, plus `options` and
/// `gold_option_index` together for multiple-choice items.
pub fn load_qa_dataset(path: &Path) -> Result<Vec<QAItem>, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let root: serde_json::Value = serde_json::from_str(&text)?;
    let Some(raw_items) = root.as_array() else {
        return Err(DatasetError::Schema {
            index: 0,
            message: "top level must be a JSON array".to_string(),
        });
    };

    let schema = |index: usize, message: String| DatasetError::Schema { index, message };
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(raw_items.len());
    for (index, raw) in raw_items.iter().enumerate() {
        let object = raw
            .as_object()
            .ok_or_else(|| schema(index, "not a JSON object".to_string()))?;
        let field = |key: &str| -> Result<String, DatasetError> {
            object
                .get(key)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| schema(index, format!("missing or non-string key `{key}`")))
        };
        let id = field("id")?;
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { index, id });
        }
        let item = QAItem {
            id,
            question: field("question")?,
            answer: field("answer")?,
            prediction: field("prediction")?,
            options: None,
            gold_option_index: None,
        };
        let options = object.get("options");
        let gold = object.get("gold_option_index");
        let item = match (options, gold) {
            (None, None) => item,
            (Some(options), Some(gold)) => {
                let options: Vec<String> = options
                    .as_array()
                    .and_then(|list| {
                        list.iter()
                            .map(|v| v.as_str().map(str::to_string))
                            .collect()
                    })
                    .ok_or_else(|| schema(index, "`options` must be an array of strings".to_string()))?;
                if options.len() < 2 {
                    return Err(schema(index, "`options` needs at least 2 entries".to_string()));
                }
                let gold = gold
                    .as_u64()
                    .map(|v| v as usize)
                    .ok_or_else(|| schema(index, "`gold_option_index` must be a non-negative integer".to_string()))?;
                if gold >= options.len() {
                    return Err(schema(
                        index,
                        format!("`gold_option_index` {gold} out of range for {} options", options.len()),
                    ));
                }
                QAItem { options: Some(options), gold_option_index: Some(gold), ..item }
            }
            _ => {
                return Err(schema(
                    index,
                    "`options` and `gold_option_index` must appear together".to_string(),
                ))
            }
        };
        items.push(item);
    }
    Ok(items)
}

/// One scripted stub response.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptEntry {
    /// Always reply with this text.
    Text(String),
    /// Fail the first `fail_times` attempts, then reply with the text.
    Flaky { fail_times: usize, text: String },
    /// Fail every attempt.
    AlwaysFail,
}

/// Deterministic judge stub driven by a per-item script, keyed by request
/// index so results cannot depend on worker scheduling.
pub struct ScriptedJudge {
    entries: Vec<ScriptEntry>,
    attempts: Mutex<HashMap<usize, usize>>,
}

impl ScriptedJudge {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedJudge { entries, attempts: Mutex::new(HashMap::new()) }
    }

    /// Load a script file: a JSON array with one entry per dataset item,
    /// each either a response string, `{"fail_times": k, "text": "..."}`,
    /// or `{"always_fail": true}`.
    pub fn from_script_file(path: &Path) -> Result<Self, DatasetError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum RawEntry {
            Text(String),
            Flaky { fail_times: usize, text: String },
            Fail { always_fail: bool },
        }
        let text = std::fs::read_to_string(path)?;
        let raw: Vec<RawEntry> = serde_json::from_str(&text)?;
        let entries = raw
            .into_iter()
            .enumerate()
            .map(|(index, entry)| match entry {
                RawEntry::Text(text) => Ok(ScriptEntry::Text(text)),
                RawEntry::Flaky { fail_times, text } => Ok(ScriptEntry::Flaky { fail_times, text }),
                RawEntry::Fail { always_fail: true } => Ok(ScriptEntry::AlwaysFail),
                RawEntry::Fail { always_fail: false } => Err(DatasetError::Schema {
                    index,
                    message: "`always_fail` must be true when present".to_string(),
                }),
            })
            .collect::<Result<_, _>>()?;
        Ok(ScriptedJudge::new(entries))
    }

    /// How many attempts an item has received (for retry assertions).
    pub fn attempts_for(&self, index: usize) -> usize {
        *self.attempts.lock().unwrap().get(&index).unwrap_or(&0)
    }
}

impl JudgeClient for ScriptedJudge {
    fn complete(
        &self,
        request_index: usize,
        _system: &str,
        _user: &str,
    ) -> Result<String, TransportError> {
        let attempt = {
            let mut attempts = self.attempts.lock().unwrap();
            let entry = attempts.entry(request_index).or_insert(0);
            *entry += 1;
            *entry
        };
        match self.entries.get(request_index) {
            None => Err(TransportError(format!("no script entry for item {request_index}"))),
            Some(ScriptEntry::Text(text)) => Ok(text.clone()),
            Some(ScriptEntry::Flaky { fail_times, text }) => {
                if attempt <= *fail_times {
                    Err(TransportError(format!("scripted failure {attempt} of {fail_times}")))
                } else {
                    Ok(text.clone())
                }
            }
            Some(ScriptEntry::AlwaysFail) => {
                Err(TransportError("scripted permanent failure".to_string()))
            }
        }
    }
}

/// Chat-completion HTTP judge. Sends the system and user prompts to a single
/// endpoint and reads back the first choice's message content; everything
/// provider-specific stays behind this one request shape.
pub struct HttpJudge {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(endpoint: String, api_key: Option<String>, model: String) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(30))
            .build()
            .expect("default TLS backend available");
        HttpJudge { endpoint, api_key, model, client }
    }

    /// Configure from `JUDGE_ENDPOINT` (required), `JUDGE_API_KEY`
    /// (optional), and `JUDGE_MODEL` (defaults to `gpt-3.5-turbo`).
    pub fn from_env() -> Result<Self, EvalError> {
        let endpoint =
            std::env::var("JUDGE_ENDPOINT").map_err(|_| EvalError::MissingEnv("JUDGE_ENDPOINT"))?;
        let api_key = std::env::var("JUDGE_API_KEY").ok();
        let model = std::env::var("JUDGE_MODEL").unwrap_or_else(|_| "gpt-3.5-turbo".to_string());
        Ok(HttpJudge::new(endpoint, api_key, model))
    }
}

impl JudgeClient for HttpJudge {
    fn complete(
        &self,
        _request_index: usize,
        system: &str,
        user: &str,
    ) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": 0.0,
        });
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| TransportError(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(TransportError(format!("judge endpoint returned {status}")));
        }
        let envelope: serde_json::Value =
            response.json().map_err(|e| TransportError(e.to_string()))?;
        envelope["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError("response missing choices[0].message.content".to_string())
            })
    }
}
