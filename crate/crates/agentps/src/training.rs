//! Weighted multi-objective training.
//!
//! The loss is a weighted sum of per-question cross-entropies over whichever
//! labels are present; missing labels contribute neither loss nor gradient.
//! Optimization is plain mini-batch Adam, and checkpoints round-trip the
//! model bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::AnnotationResult;
use crate::assembly::{build_sequence, AssemblyError, PromptLayout, SpecialVocab};
use crate::data::Sample;
use crate::model::{forward_variant, ModelBundle, ModelConfig, ModelError, Variant};
use crate::numerics::{Real, Tape, TensorId};
use crate::rng::SeedStream;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("label {label} out of range for question {question} with {classes} classes")]
    LabelOutOfRange {
        question: usize,
        label: usize,
        classes: usize,
    },
    #[error("label present for question {question} but the variant has no matching head")]
    UnmatchedLabel { question: usize },
    #[error("sample has no usable supervision (all labels missing)")]
    NoSupervision,
    #[error("non-finite loss at epoch {epoch}, step {step}, batch starting with sample {sample_id}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        sample_id: String,
    },
    #[error("no annotation found for sample {0}")]
    MissingAnnotation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint version {got}, this build reads {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Simulated,
    Remote,
}

impl std::fmt::Display for LabelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LabelSource::GroundTruth => "ground_truth",
            LabelSource::Simulated => "simulated",
            LabelSource::Remote => "remote",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ground_truth" => Ok(LabelSource::GroundTruth),
            "simulated" => Ok(LabelSource::Simulated),
            "remote" => Ok(LabelSource::Remote),
            other => Err(format!("unknown label source '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// loss weights for questions 0..N-1 plus the final question
    pub weights: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub label_source: LabelSource,
    /// train the final head on annotator output instead of ground truth
    pub use_annotated_final: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // At desk scale the conventional 0.1 ancillary weight couples the
            // process losses too weakly to shape the backbone; 0.3 keeps the
            // final question dominant while making the supervision felt.
            weights: vec![0.3, 0.3, 0.3, 0.3, 1.0],
            learning_rate: 3e-4,
            epochs: 6,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            label_source: LabelSource::GroundTruth,
            use_annotated_final: false,
        }
    }
}

/// 0.1 per ancillary question, 1 for the final question.
pub fn default_weights(n_questions: usize) -> Vec<f64> {
    let mut w = vec![0.1; n_questions];
    w.push(1.0);
    w
}

impl TrainConfig {
    pub fn validate(&self, n_questions: usize) -> Result<(), TrainError> {
        if self.weights.len() != n_questions + 1 {
            return Err(TrainError::InvalidConfig(format!(
                "{} weights for {} questions (need N+1)",
                self.weights.len(),
                n_questions
            )));
        }
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if *self.weights.last().unwrap() <= 0.0 {
            return Err(TrainError::InvalidConfig(
                "final-question weight must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// Weighted sum of cross-entropies over present labels. Zero-weight and
/// missing terms are skipped entirely, so they contribute no gradient; their
/// raw CE still appears in `per_question` for logging when a label exists.
#[derive(Debug)]
pub struct LossTerms {
    pub total: Option<TensorId>,
    /// (question index, unweighted CE value) for every supervised question
    pub per_question: Vec<(usize, f64)>,
}

pub fn compute_loss<F: Real>(
    tape: &mut Tape<F>,
    head_logits: &[(usize, TensorId)],
    labels: &[Option<usize>],
    weights: &[f64],
) -> Result<LossTerms, TrainError> {
    for (q, label) in labels.iter().enumerate() {
        if label.is_some() && !head_logits.iter().any(|&(hq, _)| hq == q) {
            return Err(TrainError::UnmatchedLabel { question: q });
        }
    }
    let mut total: Option<TensorId> = None;
    let mut per_question = Vec::new();
    for &(q, logits) in head_logits {
        let Some(label) = labels.get(q).copied().flatten() else {
            continue;
        };
        let classes = tape.shape(logits).1;
        if label >= classes {
            return Err(TrainError::LabelOutOfRange {
                question: q,
                label,
                classes,
            });
        }
        let weight = weights[q];
        if weight == 0.0 {
            // logging only, off the graph
            let p = tape.softmax_probs(logits)[label].to_f64();
            per_question.push((q, -p.ln()));
            continue;
        }
        let ce = tape.softmax_cross_entropy(logits, label)?;
        per_question.push((q, tape.value(ce)[0].to_f64()));
        let term = tape.scale(ce, weight);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(LossTerms {
        total,
        per_question,
    })
}

/// One sample ready for the training loop.
pub struct PreparedSample<F> {
    pub id: String,
    pub layout: PromptLayout,
    pub image: Vec<F>,
    pub labels: Vec<Option<usize>>,
}

/// Resolves the label source into per-question targets and precomputes
/// layouts and flat images. Ancillary labels are dropped for the vanilla
/// variant (it has no heads for them).
pub fn prepare_samples<F: Real>(
    samples: &[Sample],
    annotations: Option<&[AnnotationResult]>,
    vocab: &SpecialVocab,
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<Vec<PreparedSample<F>>, TrainError> {
    config.validate(model.n_questions)?;
    let by_id: std::collections::HashMap<&str, &AnnotationResult> = annotations
        .unwrap_or(&[])
        .iter()
        .map(|a| (a.sample_id.as_str(), a))
        .collect();
    let n = model.n_questions;
    let mut prepared = Vec::with_capacity(samples.len());
    for sample in samples {
        let layout = build_sequence(&sample.text, vocab, model)?;
        let mut labels: Vec<Option<usize>> = vec![None; n + 1];
        match config.label_source {
            LabelSource::GroundTruth => {
                for q in 0..n {
                    labels[q] = Some(sample.process_labels[q]);
                }
                labels[n] = Some(sample.final_label);
            }
            LabelSource::Simulated | LabelSource::Remote => {
                let ann = by_id
                    .get(sample.id.as_str())
                    .ok_or_else(|| TrainError::MissingAnnotation(sample.id.clone()))?;
                for q in 0..n {
                    labels[q] = ann.labels.get(q).copied().flatten();
                }
                labels[n] = if config.use_annotated_final {
                    ann.labels.get(n).copied().flatten()
                } else {
                    Some(sample.final_label)
                };
            }
        }
        if model.variant == Variant::Vanilla {
            for q in 0..n {
                labels[q] = None;
            }
        }
        prepared.push(PreparedSample {
            id: sample.id.clone(),
            layout,
            image: sample.flat_image(),
            labels,
        });
    }
    Ok(prepared)
}

/// Adam with bias correction; state arrays are aligned with `bundle.params`.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(bundle: &ModelBundle<F>) -> Self {
        Adam {
            m: bundle.params.iter().map(|p| vec![F::ZERO; p.data.len()]).collect(),
            v: bundle.params.iter().map(|p| vec![F::ZERO; p.data.len()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, bundle: &mut ModelBundle<F>, grads: &[Vec<F>], config: &TrainConfig) {
        self.t += 1;
        let b1 = F::from_f64(config.beta1);
        let b2 = F::from_f64(config.beta2);
        let one = F::ONE;
        let eps = F::from_f64(config.adam_eps);
        let bc1 = F::from_f64(1.0 - config.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - config.beta2.powi(self.t as i32));
        let lr = F::from_f64(config.learning_rate);
        for (pi, param) in bundle.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (j, g) in grads[pi].iter().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * *g;
                v[j] = b2 * v[j] + (one - b2) * *g * *g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                param.data[j] = param.data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total_loss: f64,
    /// mean unweighted CE per question, NaN-free (unsupervised questions are 0)
    pub per_question: Vec<f64>,
}

/// Mini-batch training over `epochs` additional epochs, starting the epoch
/// counter at `start_epoch` (nonzero when resuming). Batch order derives from
/// `(seed, epoch)`, so a resumed run replays the schedule an uninterrupted
/// run would have used.
pub fn train<F: Real>(
    bundle: &mut ModelBundle<F>,
    optimizer: &mut Adam<F>,
    prepared: &[PreparedSample<F>],
    config: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    let n_questions = bundle.config.n_questions;
    config.validate(n_questions)?;
    if prepared.is_empty() {
        return Err(TrainError::InvalidConfig("empty training set".into()));
    }
    let model_config = bundle.config.clone();
    let order_seed = SeedStream::new(config.seed).derive("train-order");
    let mut logs = Vec::new();

    for epoch in start_epoch..start_epoch + config.epochs {
        let mut indices: Vec<usize> = (0..prepared.len()).collect();
        indices.shuffle(&mut order_seed.derive_index(epoch as u64).rng());

        let mut epoch_loss = 0.0;
        let mut batches = 0.0;
        let mut question_loss = vec![0.0f64; n_questions + 1];
        let mut question_count = vec![0usize; n_questions + 1];

        for (step, batch) in indices.chunks(config.batch_size).enumerate() {
            let mut tape: Tape<F> = Tape::new();
            let leaves = bundle.register(&mut tape);
            let mut batch_total: Option<TensorId> = None;
            let mut supervised = 0usize;
            for &idx in batch {
                let sample = &prepared[idx];
                let outputs = forward_variant(
                    &mut tape,
                    &leaves,
                    &model_config,
                    &sample.layout,
                    &sample.image,
                )?;
                let terms = compute_loss(
                    &mut tape,
                    &outputs.head_logits,
                    &sample.labels,
                    &config.weights,
                )?;
                for &(q, ce) in &terms.per_question {
                    question_loss[q] += ce;
                    question_count[q] += 1;
                }
                if let Some(total) = terms.total {
                    supervised += 1;
                    batch_total = Some(match batch_total {
                        None => total,
                        Some(acc) => tape.add(acc, total)?,
                    });
                }
            }
            let Some(batch_total) = batch_total else {
                continue; // every sample in the batch was fully masked
            };
            let loss = tape.scale(batch_total, 1.0 / supervised as f64);
            let loss_value = tape.value(loss)[0].to_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step,
                    sample_id: prepared[batch[0]].id.clone(),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<F>> = leaves.ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
            optimizer.step(bundle, &grads, config);
            epoch_loss += loss_value;
            batches += 1.0;
        }

        let per_question: Vec<f64> = question_loss
            .iter()
            .zip(&question_count)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        logs.push(EpochLog {
            epoch,
            total_loss: if batches == 0.0 { 0.0 } else { epoch_loss / batches },
            per_question,
        });
    }
    Ok(logs)
}

// ---------------------------------------------------------------------------
// Checkpointing: one-line JSON header, '\n', then little-endian f32 payload.
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct EntryMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    epoch: usize,
    seed: u64,
    adam_t: u64,
    params: Vec<EntryMeta>,
    opt_moments: Vec<EntryMeta>,
    payload_len: usize,
}

pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub seed: u64,
}

pub fn save_checkpoint(
    path: &Path,
    bundle: &ModelBundle<f32>,
    optimizer: &Adam<f32>,
    epoch: usize,
    seed: u64,
) -> Result<(), TrainError> {
    let io_err = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut params = Vec::new();
    let mut opt_moments = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let append = |data: &[f32], payload: &mut Vec<u8>| -> usize {
        let offset = payload.len();
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        offset
    };
    for p in &bundle.params {
        let offset = append(&p.data, &mut payload);
        params.push(EntryMeta {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            offset,
        });
    }
    for (pi, p) in bundle.params.iter().enumerate() {
        for (kind, moment) in [("m", &optimizer.m[pi]), ("v", &optimizer.v[pi])] {
            let offset = append(moment, &mut payload);
            opt_moments.push(EntryMeta {
                name: format!("opt.{kind}.{}", p.name),
                rows: p.rows,
                cols: p.cols,
                offset,
            });
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        model: bundle.config.clone(),
        epoch,
        seed,
        adam_t: optimizer.t,
        params,
        opt_moments,
        payload_len: payload.len(),
    };
    // write-then-rename so an interrupted save never clobbers the last good file
    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io_err)?);
        let header_line = serde_json::to_string(&header).expect("header serializes");
        out.write_all(header_line.as_bytes()).map_err(io_err)?;
        out.write_all(b"\n").map_err(io_err)?;
        out.write_all(&payload).map_err(io_err)?;
        out.flush().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let io_err = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainError::Integrity("no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| TrainError::Integrity(format!("bad header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            got: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &bytes[newline + 1..];
    if payload.len() != header.payload_len {
        return Err(TrainError::Integrity(format!(
            "payload is {} bytes, header claims {}",
            payload.len(),
            header.payload_len
        )));
    }
    let read_entry = |meta: &EntryMeta| -> Result<Vec<f32>, TrainError> {
        let len = meta.rows * meta.cols * 4;
        let end = meta
            .offset
            .checked_add(len)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                TrainError::Integrity(format!("entry {} overruns payload", meta.name))
            })?;
        Ok(payload[meta.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    // rebuild a bundle with the recorded config, then overwrite every tensor
    let seeds = SeedStream::new(header.seed);
    let mut bundle: ModelBundle<f32> =
        ModelBundle::init(header.model.clone(), &seeds).map_err(TrainError::Model)?;
    if bundle.params.len() != header.params.len() {
        return Err(TrainError::Integrity(format!(
            "checkpoint has {} parameters, config implies {}",
            header.params.len(),
            bundle.params.len()
        )));
    }
    let mut expected_offset = 0usize;
    for meta in header.params.iter().chain(&header.opt_moments) {
        if meta.offset != expected_offset {
            return Err(TrainError::Integrity(format!(
                "entry {} at offset {}, expected {}",
                meta.name, meta.offset, expected_offset
            )));
        }
        expected_offset += meta.rows * meta.cols * 4;
    }
    if expected_offset != header.payload_len {
        return Err(TrainError::Integrity(format!(
            "entries cover {} bytes, payload is {}",
            expected_offset, header.payload_len
        )));
    }
    for meta in &header.params {
        let param = bundle.param_mut(&meta.name);
        if param.rows != meta.rows || param.cols != meta.cols {
            return Err(TrainError::Integrity(format!(
                "shape of {} is {}x{}, config implies {}x{}",
                meta.name, meta.rows, meta.cols, param.rows, param.cols
            )));
        }
        param.data = read_entry(meta)?;
    }
    let mut optimizer = Adam::new(&bundle);
    optimizer.t = header.adam_t;
    for (i, meta) in header.opt_moments.iter().enumerate() {
        let values = read_entry(meta)?;
        let pi = i / 2;
        if i % 2 == 0 {
            optimizer.m[pi] = values;
        } else {
            optimizer.v[pi] = values;
        }
    }
    Ok(Checkpoint {
        bundle,
        optimizer,
        epoch: header.epoch,
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    /// logits (x, 0) whose cross-entropy on class 0 equals `ce` exactly
    fn logits_for_ce(ce: f64) -> Vec<f64> {
        let p = (-ce).exp();
        let x = (p / (1.0 - p)).ln();
        vec![x, 0.0]
    }

    #[test]
    fn weighted_loss_hand_example() {
        let mut tape: Tape<f64> = Tape::new();
        let mut heads = Vec::new();
        for (q, ce) in [(0usize, 1.0), (1, 2.0), (2, 3.0)] {
            let logits = tape.leaf(1, 2, logits_for_ce(ce));
            heads.push((q, logits));
        }
        let labels = vec![Some(0), Some(0), Some(0)];
        let weights = default_weights(2);
        let terms = compute_loss(&mut tape, &heads, &labels, &weights).unwrap();
        let total = tape.value(terms.total.unwrap())[0];
        assert!((total - 3.3).abs() <= 1e-6, "total {total}");
        for ((_, ce), want) in terms.per_question.iter().zip([1.0, 2.0, 3.0]) {
            assert!((ce - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn missing_ancillary_leaves_final_term_only() {
        let mut tape: Tape<f64> = Tape::new();
        let heads: Vec<_> = (0..3)
            .map(|q| (q, tape.leaf(1, 2, logits_for_ce(0.5 + q as f64))))
            .collect();
        let labels = vec![None, None, Some(0)];
        let terms = compute_loss(&mut tape, &heads, &labels, &default_weights(2)).unwrap();
        let total = tape.value(terms.total.unwrap())[0];
        assert!((total - 2.5).abs() <= 1e-9, "total {total}");
        assert_eq!(terms.per_question.len(), 1);
    }

    #[test]
    fn random_loss_matches_scalar_recomputation() {
        use rand::Rng;
        let mut rng = crate::rng::SeedStream::new(5).rng();
        for _ in 0..50 {
            let mut tape: Tape<f64> = Tape::new();
            let n = rng.gen_range(1..5usize);
            let weights: Vec<f64> = (0..=n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let mut weights = weights;
            *weights.last_mut().unwrap() += 0.1;
            let mut heads = Vec::new();
            let mut labels = Vec::new();
            for q in 0..=n {
                let classes = rng.gen_range(2..5usize);
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
                heads.push((q, tape.leaf(1, classes, raw)));
                labels.push(if rng.gen_bool(0.8) {
                    Some(rng.gen_range(0..classes))
                } else {
                    None
                });
            }
            let terms = compute_loss(&mut tape, &heads, &labels, &weights).unwrap();
            let recomputed: f64 = terms
                .per_question
                .iter()
                .filter(|&&(q, _)| weights[q] > 0.0 && labels[q].is_some())
                .map(|&(q, ce)| weights[q] * ce)
                .sum();
            match terms.total {
                Some(total) => {
                    assert!((tape.value(total)[0] - recomputed).abs() <= 1e-6)
                }
                None => assert_eq!(recomputed, 0.0),
            }
        }
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let heads = vec![(0usize, tape.leaf(1, 2, vec![0.0, 0.0]))];
        let err = compute_loss(&mut tape, &heads, &[Some(2)], &[1.0]).unwrap_err();
        assert!(matches!(err, TrainError::LabelOutOfRange { .. }), "{err}");
    }

    #[test]
    fn label_without_head_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let heads = vec![(1usize, tape.leaf(1, 2, vec![0.0, 0.0]))];
        let err = compute_loss(&mut tape, &heads, &[Some(0), Some(1)], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, TrainError::UnmatchedLabel { question: 0 }), "{err}");
    }

    #[test]
    fn default_weight_shape() {
        assert_eq!(default_weights(4), vec![0.1, 0.1, 0.1, 0.1, 1.0]);
        let config = TrainConfig::default();
        assert!(config.validate(4).is_ok());
        assert!(config.validate(3).is_err());
        let mut bad = TrainConfig::default();
        *bad.weights.last_mut().unwrap() = 0.0;
        assert!(bad.validate(4).is_err());
    }
}
