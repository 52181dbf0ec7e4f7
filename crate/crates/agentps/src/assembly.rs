//! Input-sequence assembly.
//!
//! The text side of a training sequence is `[clipped sample text]` followed by
//! one `<sep> question <ans>` block per ancillary question and a final
//! `<sep> question` block. Visual tokens occupy positions `0..V-1`, so every
//! recorded position is offset by the visual token count.

use std::collections::HashMap;

use thiserror::Error;

use crate::model::{ModelConfig, Variant};

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("sequence needs {needed} tokens but max_seq_len is {max_seq_len}")]
    Budget { needed: usize, max_seq_len: usize },
    #[error("vocabulary has {vocab_size} entries but model config allows {max}")]
    VocabOverflow { vocab_size: usize, max: usize },
    #[error("layout built for {layout_n} ancillary questions, model expects {model_n}")]
    QuestionCountMismatch { layout_n: usize, model_n: usize },
}

/// Fixed word-level vocabulary plus reserved special tokens and the tokenized
/// question templates.
#[derive(Debug, Clone)]
pub struct SpecialVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
    ancillary_templates: Vec<Vec<usize>>,
    final_template: Vec<usize>,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const ANS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const IMG_ID: usize = 4;
const N_SPECIALS: usize = 5;

const SPECIAL_NAMES: [&str; N_SPECIALS] = ["<pad>", "<unk>", "<ans>", "<sep>", "<img>"];

impl SpecialVocab {
    /// Builds the vocabulary from the question strings plus any extra corpus
    /// words. Ancillary templates get a trailing `<ans>`; the final question
    /// does not (its head reads the last token).
    pub fn build(extra_words: &[String], ancillary: &[String], final_question: &str) -> Self {
        let mut words: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let intern = |word: &str, words: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            let w = word.to_lowercase();
            if !index.contains_key(&w) {
                index.insert(w.clone(), words.len());
                words.push(w);
            }
        };
        for q in ancillary.iter().chain(std::iter::once(&final_question.to_string())) {
            for word in q.split_whitespace() {
                intern(word, &mut words, &mut index);
            }
        }
        for word in extra_words {
            intern(word, &mut words, &mut index);
        }
        let mut vocab = SpecialVocab {
            words,
            index,
            ancillary_templates: Vec::new(),
            final_template: Vec::new(),
        };
        vocab.ancillary_templates = ancillary
            .iter()
            .map(|q| {
                let mut ids = vocab.tokenize(q);
                ids.push(ANS_ID);
                ids
            })
            .collect();
        vocab.final_template = vocab.tokenize(final_question);
        vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn n_questions(&self) -> usize {
        self.ancillary_templates.len()
    }

    /// Whitespace-split, case-folded, fixed-vocabulary lookup; unknown words
    /// map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| {
                let lw = w.to_lowercase();
                *self.index.get(&lw).unwrap_or(&UNK_ID)
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.words.get(id).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Assembled text-side token sequence with supervision positions recorded in
/// absolute (visual-offset) coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub token_ids: Vec<usize>,
    pub ans_positions: Vec<usize>,
    pub final_position: usize,
    pub visual_len: usize,
    /// total token length of all question blocks (separators and `<ans>` included)
    pub template_len: usize,
    pub text_budget: usize,
    pub variant: Variant,
}

impl PromptLayout {
    pub fn total_len(&self) -> usize {
        self.visual_len + self.token_ids.len()
    }
}

/// Keeps the first `budget` tokens; shorter inputs pass through unchanged.
pub fn clip_text(tokens: &[usize], budget: usize) -> Vec<usize> {
    tokens[..tokens.len().min(budget)].to_vec()
}

/// Builds the full layout for one sample text. The vanilla variant omits the
/// ancillary blocks entirely; multitask and agentps share the same layout.
pub fn build_sequence(
    text: &str,
    vocab: &SpecialVocab,
    config: &ModelConfig,
) -> Result<PromptLayout, AssemblyError> {
    if vocab.vocab_size() > config.vocab_size {
        return Err(AssemblyError::VocabOverflow {
            vocab_size: vocab.vocab_size(),
            max: config.vocab_size,
        });
    }
    if vocab.n_questions() != config.n_questions {
        return Err(AssemblyError::QuestionCountMismatch {
            layout_n: vocab.n_questions(),
            model_n: config.n_questions,
        });
    }
    let visual_len = config.visual_token_count();
    let include_ancillary = config.variant != Variant::Vanilla;

    let mut blocks: Vec<usize> = Vec::new();
    let mut ans_offsets: Vec<usize> = Vec::new();
    if include_ancillary {
        for template in &vocab.ancillary_templates {
            blocks.push(SEP_ID);
            blocks.extend_from_slice(template);
            ans_offsets.push(blocks.len() - 1); // template ends with <ans>
        }
    }
    blocks.push(SEP_ID);
    blocks.extend_from_slice(&vocab.final_template);
    let template_len = blocks.len();

    let text_side_cap = config
        .max_seq_len
        .checked_sub(visual_len)
        .unwrap_or_default();
    let text_budget = match text_side_cap.checked_sub(template_len) {
        Some(b) => b,
        None => {
            return Err(AssemblyError::Budget {
                needed: visual_len + template_len,
                max_seq_len: config.max_seq_len,
            })
        }
    };

    let text_tokens = vocab.tokenize(text);
    let clipped = clip_text(&text_tokens, text_budget);

    let mut token_ids = clipped;
    let text_len = token_ids.len();
    token_ids.extend_from_slice(&blocks);

    let ans_positions: Vec<usize> = ans_offsets
        .iter()
        .map(|&off| visual_len + text_len + off)
        .collect();
    let final_position = visual_len + token_ids.len() - 1;

    debug_assert!(visual_len + token_ids.len() <= config.max_seq_len);
    Ok(PromptLayout {
        token_ids,
        ans_positions,
        final_position,
        visual_len,
        template_len,
        text_budget,
        variant: config.variant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use proptest::prelude::*;

    fn test_config(n_questions: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            n_frames: 1,
            d_enc: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 64,
            max_seq_len: 64,
            n_questions,
            classes_per_question: vec![2; n_questions + 1],
            variant,
        }
    }

    fn test_vocab(n: usize) -> SpecialVocab {
        let ancillary: Vec<String> = (0..n)
            .map(|i| format!("is attribute q{i} present in the content"))
            .collect();
        SpecialVocab::build(
            &["alpha".into(), "beta".into(), "gamma".into()],
            &ancillary,
            "is the content unoriginal overall",
        )
    }

    #[test]
    fn clip_follows_budget_rule() {
        let tokens: Vec<usize> = (0..300).map(|i| i % 7).collect();
        let m = 44;
        assert_eq!(clip_text(&tokens, 256 - m).len(), 212);
        assert_eq!(clip_text(&[], 10), Vec::<usize>::new());
        let short: Vec<usize> = vec![1, 2, 3];
        assert_eq!(clip_text(&short, 10), short);
    }

    #[test]
    fn tokenize_empty_and_case_folding() {
        let vocab = test_vocab(2);
        assert_eq!(vocab.tokenize(""), Vec::<usize>::new());
        let ids = vocab.tokenize("Alpha alpha");
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert_ne!(ids[0], UNK_ID);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let vocab = test_vocab(1);
        assert_eq!(vocab.tokenize("zzzqqq"), vec![UNK_ID]);
    }

    #[test]
    fn n_zero_layout_has_no_ans_positions() {
        let config = test_config(0, Variant::AgentPs);
        let vocab = test_vocab(0);
        let layout = build_sequence("alpha beta", &vocab, &config).unwrap();
        assert!(layout.ans_positions.is_empty());
        assert_eq!(layout.final_position, layout.total_len() - 1);
    }

    #[test]
    fn four_questions_yield_four_ans_tokens() {
        let config = test_config(4, Variant::AgentPs);
        let vocab = test_vocab(4);
        let layout = build_sequence("alpha beta gamma", &vocab, &config).unwrap();
        assert_eq!(layout.ans_positions.len(), 4);
        for &pos in &layout.ans_positions {
            assert_eq!(layout.token_ids[pos - layout.visual_len], ANS_ID);
        }
    }

    #[test]
    fn vanilla_layout_omits_ancillary_blocks() {
        let vocab = test_vocab(3);
        let agentps = build_sequence("alpha", &vocab, &test_config(3, Variant::AgentPs)).unwrap();
        let vanilla = build_sequence("alpha", &vocab, &test_config(3, Variant::Vanilla)).unwrap();
        assert!(vanilla.ans_positions.is_empty());
        assert!(vanilla.token_ids.len() < agentps.token_ids.len());
        assert!(!vanilla.token_ids.contains(&ANS_ID));
    }

    #[test]
    fn worst_case_text_never_exceeds_max_seq_len() {
        let config = test_config(2, Variant::AgentPs);
        let vocab = test_vocab(2);
        let long_word = "alpha ";
        for len in 0..(2 * config.max_seq_len) {
            let text = long_word.repeat(len);
            let layout = build_sequence(&text, &vocab, &config).unwrap();
            assert!(layout.total_len() <= config.max_seq_len);
            if len >= layout.text_budget {
                assert_eq!(layout.total_len(), config.max_seq_len);
            }
        }
    }

    #[test]
    fn template_overflow_is_a_budget_error() {
        let mut config = test_config(4, Variant::AgentPs);
        config.max_seq_len = 20; // visual 4 + four QA blocks cannot fit
        let vocab = test_vocab(4);
        let err = build_sequence("alpha", &vocab, &config).unwrap_err();
        assert!(matches!(err, AssemblyError::Budget { .. }), "{err}");
        let msg = err.to_string();
        assert!(msg.contains("20"), "{msg}");
    }

    #[test]
    fn layout_is_idempotent_and_ordered() {
        let config = test_config(4, Variant::AgentPs);
        let vocab = test_vocab(4);
        let a = build_sequence("alpha beta gamma alpha", &vocab, &config).unwrap();
        let b = build_sequence("alpha beta gamma alpha", &vocab, &config).unwrap();
        assert_eq!(a, b);
        let text_end = a.visual_len + a.token_ids.len() - a.template_len;
        let mut prev = text_end - 1;
        for &pos in &a.ans_positions {
            assert!(pos > prev);
            prev = pos;
        }
        assert!(a.final_position > prev);
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_round_trip(ids in proptest::collection::vec(5usize..20, 0..32)) {
            let vocab = test_vocab(4);
            prop_assume!(ids.iter().all(|&id| id < vocab.vocab_size()));
            let text = vocab.detokenize(&ids);
            prop_assert_eq!(vocab.tokenize(&text), ids);
        }

        #[test]
        fn fuzzed_layouts_respect_budget(
            text_len in 0usize..512,
            n in 0usize..7,
            variant in prop_oneof![Just(Variant::Vanilla), Just(Variant::Multitask), Just(Variant::AgentPs)],
        ) {
            let config = test_config(n, variant);
            let vocab = test_vocab(n);
            let text = "alpha beta ".repeat(text_len / 2 + 1);
            let words: Vec<&str> = text.split_whitespace().collect();
            let text = words[..text_len.min(words.len())].join(" ");
            let layout = build_sequence(&text, &vocab, &config).unwrap();
            prop_assert!(layout.total_len() <= config.max_seq_len);
            for &pos in &layout.ans_positions {
                prop_assert_eq!(layout.token_ids[pos - layout.visual_len], ANS_ID);
            }
        }
    }
}
