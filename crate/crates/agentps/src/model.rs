//! The multimodal classifier: linear patch encoder, two-layer MLP projector,
//! decoder-only causal transformer, and per-question classification heads.
//!
//! Three variants share the backbone and differ only in head placement:
//! vanilla reads a single head off the final token, multitask reads all N+1
//! heads off the final token, and agentps reads head i off the i-th `<ans>`
//! token (the final head still reads the last token).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::PromptLayout;
use crate::numerics::{NumericsError, Real, Tape, TensorId};
use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("layout built for variant {layout:?}, model is {model:?}")]
    VariantMismatch { layout: Variant, model: Variant },
    #[error("variant {variant:?} has no head for question {question}")]
    MissingHead { variant: Variant, question: usize },
    #[error("expected {expected} image values, got {got}")]
    BadImage { expected: usize, got: usize },
    #[error("sequence length {len} exceeds max_seq_len {max_seq_len}")]
    SequenceOverflow { len: usize, max_seq_len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Multitask,
    #[serde(rename = "agentps")]
    AgentPs,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Vanilla => "vanilla",
            Variant::Multitask => "multitask",
            Variant::AgentPs => "agentps",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "multitask" => Ok(Variant::Multitask),
            "agentps" => Ok(Variant::AgentPs),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_frames: usize,
    pub d_enc: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// number of ancillary questions N; the final question is implicit
    pub n_questions: usize,
    /// answer-space sizes for questions 0..N-1 plus the final question
    pub classes_per_question: Vec<usize>,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// A desk-scale configuration small enough to train on one CPU core.
    fn default() -> Self {
        ModelConfig {
            image_size: 12,
            patch_size: 6,
            n_frames: 2,
            d_enc: 12,
            d_model: 12,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 256,
            max_seq_len: 64,
            n_questions: 4,
            classes_per_question: vec![2; 5],
            variant: Variant::AgentPs,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.classes_per_question.len() != self.n_questions + 1 {
            return fail(format!(
                "classes_per_question has {} entries, expected {}",
                self.classes_per_question.len(),
                self.n_questions + 1
            ));
        }
        if self.classes_per_question.iter().any(|&c| c < 2) {
            return fail("every answer space needs at least 2 classes".into());
        }
        if self.n_frames == 0 {
            return fail("n_frames must be at least 1".into());
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn visual_token_count(&self) -> usize {
        self.n_frames * self.patches_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.n_frames * self.image_size * self.image_size
    }

    /// Question indices that carry a head under this config's variant.
    /// Ancillary questions are 0..N-1; N is the final question.
    pub fn head_questions(&self) -> Vec<usize> {
        match self.variant {
            Variant::Vanilla => vec![self.n_questions],
            Variant::Multitask | Variant::AgentPs => (0..=self.n_questions).collect(),
        }
    }

    fn head_name(&self, question: usize) -> String {
        if question == self.n_questions {
            "head_final".to_string()
        } else {
            format!("head{question}")
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

/// All parameters of one model instance, in a fixed construction order.
#[derive(Debug, Clone)]
pub struct ModelBundle<F> {
    pub config: ModelConfig,
    pub params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

/// Leaf ids of one registration of the bundle on a tape, aligned with
/// `bundle.params`.
pub struct ParamLeaves {
    pub ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl ParamLeaves {
    pub fn get(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))]
    }
}

impl<F: Real> ModelBundle<F> {
    /// Deterministic initialization: every matrix is uniform(-s, s) with
    /// s = sqrt(6/(fan_in+fan_out)) from a stream derived from the parameter
    /// name, biases zero, norm gains one. Two bundles built from the same
    /// seed share every identically-named parameter bitwise.
    pub fn init(config: ModelConfig, seeds: &SeedStream) -> Result<Self, ModelError> {
        config.validate()?;
        let mut bundle = ModelBundle {
            config: config.clone(),
            params: Vec::new(),
            index: HashMap::new(),
        };
        let d = config.d_model;
        let d_ff = 4 * d;

        bundle.add_weight("encoder.w", config.patch_dim(), config.d_enc, seeds);
        bundle.add_zeros("encoder.b", 1, config.d_enc);
        bundle.add_weight("projector.w1", config.d_enc, d, seeds);
        bundle.add_zeros("projector.b1", 1, d);
        bundle.add_weight("projector.w2", d, d, seeds);
        bundle.add_zeros("projector.b2", 1, d);
        bundle.add_weight("lm.tok_emb", config.vocab_size, d, seeds);
        bundle.add_weight("lm.pos_emb", config.max_seq_len, d, seeds);
        for l in 0..config.n_layers {
            bundle.add_ones(&format!("lm.l{l}.ln1.g"), 1, d);
            bundle.add_zeros(&format!("lm.l{l}.ln1.b"), 1, d);
            for w in ["wq", "wk", "wv", "wo"] {
                bundle.add_weight(&format!("lm.l{l}.attn.{w}"), d, d, seeds);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                bundle.add_zeros(&format!("lm.l{l}.attn.{b}"), 1, d);
            }
            bundle.add_ones(&format!("lm.l{l}.ln2.g"), 1, d);
            bundle.add_zeros(&format!("lm.l{l}.ln2.b"), 1, d);
            bundle.add_weight(&format!("lm.l{l}.mlp.w1"), d, d_ff, seeds);
            bundle.add_zeros(&format!("lm.l{l}.mlp.b1"), 1, d_ff);
            bundle.add_weight(&format!("lm.l{l}.mlp.w2"), d_ff, d, seeds);
            bundle.add_zeros(&format!("lm.l{l}.mlp.b2"), 1, d);
        }
        bundle.add_ones("lm.lnf.g", 1, d);
        bundle.add_zeros("lm.lnf.b", 1, d);
        for q in config.head_questions() {
            let classes = config.classes_per_question[q];
            let name = config.head_name(q);
            bundle.add_weight(&format!("{name}.w1"), d, d, seeds);
            bundle.add_zeros(&format!("{name}.b1"), 1, d);
            bundle.add_weight(&format!("{name}.w2"), d, classes, seeds);
            bundle.add_zeros(&format!("{name}.b2"), 1, classes);
        }
        Ok(bundle)
    }

    fn add_param(&mut self, name: &str, rows: usize, cols: usize, data: Vec<F>) {
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    fn add_weight(&mut self, name: &str, rows: usize, cols: usize, seeds: &SeedStream) {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = seeds.derive("init").derive(name).rng();
        let data = (0..rows * cols)
            .map(|_| F::from_f64(rng.gen_range(-s..s)))
            .collect();
        self.add_param(name, rows, cols, data);
    }

    fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.add_param(name, rows, cols, vec![F::ZERO; rows * cols]);
    }

    fn add_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.add_param(name, rows, cols, vec![F::ONE; rows * cols]);
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn param(&self, name: &str) -> &Param<F> {
        &self.params[self.index[name]]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Param<F> {
        &mut self.params[self.index[name]]
    }

    /// Re-types the bundle (f32 <-> f64) for verification runs.
    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    data: p.data.iter().map(|&x| G::from_f64(x.to_f64())).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> ParamLeaves {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.rows, p.cols, p.data.clone()))
            .collect();
        ParamLeaves {
            ids,
            index: self.index.clone(),
        }
    }
}

/// Splits frames into non-overlapping patches, flattens each patch row-major,
/// and applies the learned linear map. Rows come out frame-major, then patch
/// row, then patch column.
pub fn encode_frames<F: Real>(
    tape: &mut Tape<F>,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    image: &[F],
) -> Result<TensorId, ModelError> {
    if image.len() != config.image_len() {
        return Err(ModelError::BadImage {
            expected: config.image_len(),
            got: image.len(),
        });
    }
    let s = config.image_size;
    let p = config.patch_size;
    let side = s / p;
    let mut patches = Vec::with_capacity(config.visual_token_count() * config.patch_dim());
    for f in 0..config.n_frames {
        let frame = &image[f * s * s..(f + 1) * s * s];
        for pr in 0..side {
            for pc in 0..side {
                for r in 0..p {
                    let row = pr * p + r;
                    let col0 = pc * p;
                    patches.extend_from_slice(&frame[row * s + col0..row * s + col0 + p]);
                }
            }
        }
    }
    let x = tape.leaf(config.visual_token_count(), config.patch_dim(), patches);
    let w = leaves.get("encoder.w");
    let b = leaves.get("encoder.b");
    let z = tape.matmul(x, w)?;
    Ok(tape.add_row_broadcast(z, b)?)
}

/// Two-layer MLP mapping encoder features into the LM width.
pub fn project<F: Real>(
    tape: &mut Tape<F>,
    leaves: &ParamLeaves,
    z: TensorId,
) -> Result<TensorId, ModelError> {
    let h = tape.matmul(z, leaves.get("projector.w1"))?;
    let h = tape.add_row_broadcast(h, leaves.get("projector.b1"))?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, leaves.get("projector.w2"))?;
    Ok(tape.add_row_broadcast(h, leaves.get("projector.b2"))?)
}

/// Pre-norm causal transformer over the concatenated visual+text sequence.
/// Returns one hidden row per input position.
pub fn lm_forward<F: Real>(
    tape: &mut Tape<F>,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    h_f: TensorId,
    text_ids: &[usize],
) -> Result<TensorId, ModelError> {
    let v = tape.shape(h_f).0;
    let len = v + text_ids.len();
    if len > config.max_seq_len {
        return Err(ModelError::SequenceOverflow {
            len,
            max_seq_len: config.max_seq_len,
        });
    }
    let text_emb = tape.gather_rows(leaves.get("lm.tok_emb"), text_ids)?;
    let mut x = tape.concat_rows(&[h_f, text_emb])?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(leaves.get("lm.pos_emb"), &positions)?;
    x = tape.add(x, pos)?;

    let d = config.d_model;
    let dh = d / config.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.n_layers {
        let name = |suffix: &str| format!("lm.l{l}.{suffix}");
        let ln1 = tape.layer_norm(x, leaves.get(&name("ln1.g")), leaves.get(&name("ln1.b")))?;
        let q = tape.matmul(ln1, leaves.get(&name("attn.wq")))?;
        let q = tape.add_row_broadcast(q, leaves.get(&name("attn.bq")))?;
        let k = tape.matmul(ln1, leaves.get(&name("attn.wk")))?;
        let k = tape.add_row_broadcast(k, leaves.get(&name("attn.bk")))?;
        let val = tape.matmul(ln1, leaves.get(&name("attn.wv")))?;
        let val = tape.add_row_broadcast(val, leaves.get(&name("attn.bv")))?;
        let mut head_outs = Vec::with_capacity(config.n_heads);
        for h in 0..config.n_heads {
            let qh = tape.cols_slice(q, h * dh, dh)?;
            let kh = tape.cols_slice(k, h * dh, dh)?;
            let vh = tape.cols_slice(val, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.causal_softmax_rows(scores)?;
            head_outs.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let attn = tape.matmul(merged, leaves.get(&name("attn.wo")))?;
        let attn = tape.add_row_broadcast(attn, leaves.get(&name("attn.bo")))?;
        x = tape.add(x, attn)?;

        let ln2 = tape.layer_norm(x, leaves.get(&name("ln2.g")), leaves.get(&name("ln2.b")))?;
        let m = tape.matmul(ln2, leaves.get(&name("mlp.w1")))?;
        let m = tape.add_row_broadcast(m, leaves.get(&name("mlp.b1")))?;
        let m = tape.gelu(m);
        let m = tape.matmul(m, leaves.get(&name("mlp.w2")))?;
        let m = tape.add_row_broadcast(m, leaves.get(&name("mlp.b2")))?;
        x = tape.add(x, m)?;
    }
    Ok(tape.layer_norm(x, leaves.get("lm.lnf.g"), leaves.get("lm.lnf.b"))?)
}

/// One-hidden-layer MLP head over a single hidden row.
pub fn classify_at<F: Real>(
    tape: &mut Tape<F>,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    hidden: TensorId,
    position: usize,
    question: usize,
) -> Result<TensorId, ModelError> {
    if !config.head_questions().contains(&question) {
        return Err(ModelError::MissingHead {
            variant: config.variant,
            question,
        });
    }
    let name = config.head_name(question);
    let row = tape.rows_slice(hidden, position, 1)?;
    let h = tape.matmul(row, leaves.get(&format!("{name}.w1")))?;
    let h = tape.add_row_broadcast(h, leaves.get(&format!("{name}.b1")))?;
    let h = tape.gelu(h);
    let logits = tape.matmul(h, leaves.get(&format!("{name}.w2")))?;
    Ok(tape.add_row_broadcast(logits, leaves.get(&format!("{name}.b2")))?)
}

/// Question-indexed logit handles of one forward pass.
pub struct ForwardOutputs {
    pub hidden: TensorId,
    /// (question index, logits) with the final question last
    pub head_logits: Vec<(usize, TensorId)>,
}

/// Full forward pass for one sample under the bundle's variant.
pub fn forward_variant<F: Real>(
    tape: &mut Tape<F>,
    leaves: &ParamLeaves,
    config: &ModelConfig,
    layout: &PromptLayout,
    image: &[F],
) -> Result<ForwardOutputs, ModelError> {
    if layout.variant != config.variant {
        return Err(ModelError::VariantMismatch {
            layout: layout.variant,
            model: config.variant,
        });
    }
    if config.variant == Variant::AgentPs && layout.ans_positions.len() != config.n_questions {
        return Err(ModelError::InvalidConfig(format!(
            "layout has {} ans positions, model expects {}",
            layout.ans_positions.len(),
            config.n_questions
        )));
    }
    let z = encode_frames(tape, leaves, config, image)?;
    let h_f = project(tape, leaves, z)?;
    let hidden = lm_forward(tape, leaves, config, h_f, &layout.token_ids)?;

    let n = config.n_questions;
    let mut head_logits = Vec::new();
    match config.variant {
        Variant::Vanilla => {
            let logits = classify_at(tape, leaves, config, hidden, layout.final_position, n)?;
            head_logits.push((n, logits));
        }
        Variant::Multitask => {
            for q in 0..=n {
                let logits = classify_at(tape, leaves, config, hidden, layout.final_position, q)?;
                head_logits.push((q, logits));
            }
        }
        Variant::AgentPs => {
            for q in 0..n {
                let logits =
                    classify_at(tape, leaves, config, hidden, layout.ans_positions[q], q)?;
                head_logits.push((q, logits));
            }
            let logits = classify_at(tape, leaves, config, hidden, layout.final_position, n)?;
            head_logits.push((n, logits));
        }
    }
    Ok(ForwardOutputs {
        hidden,
        head_logits,
    })
}
