//! Process-label annotation.
//!
//! Two sources produce the ancillary labels used for training: a noise
//! simulator that flips ground truth at configured per-question accuracies,
//! and a remote client that sends each sample with the full question battery
//! to a generic MLLM endpoint and parses the free-text verdicts.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("invalid noise profile: {0}")]
    InvalidProfile(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Measured annotator quality used to calibrate the simulator. The final
/// accuracy is the marginal over all samples, missing ones counted as wrong;
/// the simulator renormalizes it to a conditional accuracy over non-missing
/// outcomes: `acc_cond = final_accuracy / (1 - missing_rate_final)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseProfile {
    pub process_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub missing_rate_final: f64,
    pub seed: u64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile {
            process_accuracy: vec![0.7910, 0.6695, 0.7429, 0.7768],
            final_accuracy: 0.5760,
            missing_rate_final: 0.1223,
            seed: 0,
        }
    }
}

impl NoiseProfile {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        for (i, &a) in self.process_accuracy.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(AnnotatorError::InvalidProfile(format!(
                    "process accuracy {i} = {a} outside (0, 1]"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate_final) {
            return Err(AnnotatorError::InvalidProfile(format!(
                "missing_rate_final {} outside [0, 1)",
                self.missing_rate_final
            )));
        }
        let cond = self.conditional_final_accuracy();
        if !(cond > 0.0 && cond <= 1.0) {
            return Err(AnnotatorError::InvalidProfile(format!(
                "final accuracy {} not reachable with missing rate {} (conditional {cond})",
                self.final_accuracy, self.missing_rate_final
            )));
        }
        Ok(())
    }

    pub fn conditional_final_accuracy(&self) -> f64 {
        self.final_accuracy / (1.0 - self.missing_rate_final)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Simulated,
    Remote,
}

/// Labels for one sample: N process entries followed by the final question.
/// `None` marks a missing verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub sample_id: String,
    pub labels: Vec<Option<usize>>,
    pub source: AnnotationSource,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_responses: Option<Vec<String>>,
}

/// Symmetric flip noise at the profile's per-question accuracy. Process
/// entries are never missing in simulated mode; the final entry is missing at
/// the profile rate and otherwise correct at the renormalized accuracy.
pub fn simulate_annotations(
    samples: &[Sample],
    profile: &NoiseProfile,
) -> Result<Vec<AnnotationResult>, AnnotatorError> {
    profile.validate()?;
    let cond_final = profile.conditional_final_accuracy();
    let root = SeedStream::new(profile.seed).derive("annotator");
    let mut results = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let mut rng = root.derive_index(i as u64).rng();
        let mut labels = Vec::with_capacity(profile.process_accuracy.len() + 1);
        for (q, &acc) in profile.process_accuracy.iter().enumerate() {
            let truth = sample.process_labels[q];
            let keep = rng.gen_bool(acc);
            labels.push(Some(if keep { truth } else { 1 - truth }));
        }
        let final_label = if rng.gen_bool(profile.missing_rate_final) {
            None
        } else if rng.gen_bool(cond_final) {
            Some(sample.final_label)
        } else {
            Some(1 - sample.final_label)
        };
        labels.push(final_label);
        results.push(AnnotationResult {
            sample_id: sample.id.clone(),
            labels,
            source: AnnotationSource::Simulated,
            raw_responses: None,
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum QuestionKind {
    Binary,
    /// count questions binarize at `threshold` or more occurrences
    Count { threshold: u64 },
}

/// Free-text verdict extraction. Binary questions look for the first
/// affirmative/negative token; count questions take the first integer and
/// threshold it. No verdict found means MISSING, never an error.
pub fn parse_response(text: &str, kind: QuestionKind) -> Option<usize> {
    let lowered = text.to_lowercase();
    let tokens = lowered.split(|c: char| !c.is_alphanumeric());
    match kind {
        QuestionKind::Binary => {
            for tok in tokens {
                match tok {
                    "yes" | "true" => return Some(1),
                    "no" | "false" => return Some(0),
                    _ => {}
                }
            }
            None
        }
        QuestionKind::Count { threshold } => {
            for tok in tokens {
                if !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit()) {
                    if let Ok(count) = tok.parse::<u64>() {
                        return Some(usize::from(count >= threshold));
                    }
                }
            }
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTemplate {
    pub prompt: String,
    #[serde(flatten)]
    pub kind: QuestionKind,
}

/// Transport settings for the remote annotator. Endpoint and credential come
/// from the environment so configs stay shareable.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: String,
    pub max_in_flight: usize,
    pub max_retries: usize,
    pub base_backoff_ms: u64,
    pub timeout_ms: u64,
}

pub const ENDPOINT_ENV: &str = "AGENTPS_ANNOTATOR_ENDPOINT";
pub const API_KEY_ENV: &str = "AGENTPS_ANNOTATOR_API_KEY";

impl RemoteConfig {
    pub fn from_env() -> Result<Self, AnnotatorError> {
        let endpoint =
            std::env::var(ENDPOINT_ENV).map_err(|_| AnnotatorError::MissingEnv(ENDPOINT_ENV))?;
        let api_key =
            std::env::var(API_KEY_ENV).map_err(|_| AnnotatorError::MissingEnv(API_KEY_ENV))?;
        Ok(RemoteConfig {
            endpoint,
            api_key,
            max_in_flight: 4,
            max_retries: 3,
            base_backoff_ms: 200,
            timeout_ms: 30_000,
        })
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RemoteStats {
    pub retries: usize,
    pub failed_samples: usize,
}

#[derive(Serialize)]
struct AnnotationRequest<'a> {
    id: &'a str,
    text: &'a str,
    image: &'a [Vec<Vec<f32>>],
    questions: Vec<&'a str>,
}

#[derive(Deserialize)]
struct AnnotationResponse {
    answers: Vec<String>,
}

/// Sends one request per sample (the whole question battery in one session)
/// with at most `max_in_flight` concurrent requests. Transient failures
/// (transport errors, 408/429/5xx) retry with exponential backoff; anything
/// else records a fully-missing result for that sample and the batch
/// continues. Results come back in sample order.
pub fn remote_annotate(
    samples: &[Sample],
    config: &RemoteConfig,
    templates: &[QuestionTemplate],
) -> (Vec<AnnotationResult>, RemoteStats) {
    let agent = ureq::AgentBuilder::new()
        .timeout(std::time::Duration::from_millis(config.timeout_ms))
        .build();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<AnnotationResult>>> = Mutex::new(vec![None; samples.len()]);
    let stats = Mutex::new(RemoteStats::default());

    std::thread::scope(|scope| {
        for _ in 0..config.max_in_flight.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= samples.len() {
                    break;
                }
                let (result, retries) = annotate_one(&agent, config, templates, &samples[i]);
                let mut st = stats.lock().unwrap();
                st.retries += retries;
                if result.labels.iter().all(Option::is_none) {
                    st.failed_samples += 1;
                }
                drop(st);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });

    let results = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect();
    (results, stats.into_inner().unwrap())
}

fn annotate_one(
    agent: &ureq::Agent,
    config: &RemoteConfig,
    templates: &[QuestionTemplate],
    sample: &Sample,
) -> (AnnotationResult, usize) {
    let request = AnnotationRequest {
        id: &sample.id,
        text: &sample.text,
        image: &sample.image,
        questions: templates.iter().map(|t| t.prompt.as_str()).collect(),
    };
    let body = serde_json::to_value(&request).expect("request serializes");
    let mut retries = 0;
    let mut attempt = 0;
    let response: Option<AnnotationResponse> = loop {
        let outcome = agent
            .post(&config.endpoint)
            .set("authorization", &format!("Bearer {}", config.api_key))
            .send_json(body.clone());
        match outcome {
            Ok(resp) => match resp.into_json::<AnnotationResponse>() {
                Ok(parsed) => break Some(parsed),
                Err(_) => break None,
            },
            Err(ureq::Error::Status(code, _))
                if !(code == 408 || code == 429 || code >= 500) =>
            {
                break None; // non-transient, record failure and move on
            }
            Err(_) => {
                if attempt >= config.max_retries {
                    break None;
                }
                let backoff = config.base_backoff_ms << attempt;
                std::thread::sleep(std::time::Duration::from_millis(backoff));
                attempt += 1;
                retries += 1;
            }
        }
    };

    let result = match response {
        Some(parsed) => {
            let labels = templates
                .iter()
                .enumerate()
                .map(|(q, t)| {
                    parsed
                        .answers
                        .get(q)
                        .and_then(|text| parse_response(text, t.kind))
                })
                .collect();
            AnnotationResult {
                sample_id: sample.id.clone(),
                labels,
                source: AnnotationSource::Remote,
                raw_responses: Some(parsed.answers),
            }
        }
        None => AnnotationResult {
            sample_id: sample.id.clone(),
            labels: vec![None; templates.len()],
            source: AnnotationSource::Remote,
            raw_responses: None,
        },
    };
    (result, retries)
}

/// Annotation output keyed by sample id, one JSON object per line.
pub fn write_annotations(results: &[AnnotationResult], path: &Path) -> Result<(), AnnotatorError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| {
        AnnotatorError::Io {
            path: path.display().to_string(),
            source: e,
        }
    })?);
    for r in results {
        let line = serde_json::to_string(r).expect("annotation serializes");
        writeln!(out, "{line}").map_err(|e| AnnotatorError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationResult>, AnnotatorError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnotatorError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut results = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AnnotationResult =
            serde_json::from_str(line).map_err(|e| AnnotatorError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        results.push(r);
    }
    Ok(results)
}
