//! Procedural synthetic multimodal dataset.
//!
//! Each sample draws four binary latent attributes, renders them into a small
//! two-frame pixel grid plus a short text snippet, and labels the sample by a
//! fixed boolean rule over the attributes. The attributes double as process
//! labels, so ancillary supervision is informative of the final label by
//! construction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

/// One synthetic datum. `image` is frame-major, each frame a row-major
/// `image_size * image_size` grid of reals in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub image: Vec<Vec<Vec<f32>>>,
    pub text: String,
    pub process_labels: Vec<usize>,
    pub final_label: usize,
}

impl Sample {
    pub fn flat_image<F: crate::numerics::Real>(&self) -> Vec<F> {
        self.image
            .iter()
            .flatten()
            .flatten()
            .map(|&p| F::from_f64(p as f64))
            .collect()
    }
}

pub const N_ATTRIBUTES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_questions: usize,
    pub image_size: usize,
    pub n_frames: usize,
    pub stripe_intensity: f32,
    pub blob_size: usize,
    pub noise_sigma: f32,
    pub label_rule: String,
    pub class_balance: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_samples: 1000,
            n_questions: N_ATTRIBUTES,
            image_size: 12,
            n_frames: 2,
            stripe_intensity: 0.38,
            blob_size: 4,
            noise_sigma: 0.15,
            label_rule: "default".to_string(),
            class_balance: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_questions != N_ATTRIBUTES {
            return Err(DataError::InvalidSpec(format!(
                "generator produces exactly {N_ATTRIBUTES} process labels, got n_questions={}",
                self.n_questions
            )));
        }
        if self.label_rule != "default" {
            return Err(DataError::InvalidSpec(format!(
                "unknown label rule '{}'",
                self.label_rule
            )));
        }
        if !(0.0..=1.0).contains(&self.class_balance) {
            return Err(DataError::InvalidSpec(format!(
                "class_balance {} outside [0,1]",
                self.class_balance
            )));
        }
        if self.n_frames < 2 {
            return Err(DataError::InvalidSpec(
                "coherence motif needs at least 2 frames".to_string(),
            ));
        }
        if self.blob_size + 2 > self.image_size {
            return Err(DataError::InvalidSpec(format!(
                "blob_size {} too large for image_size {}",
                self.blob_size, self.image_size
            )));
        }
        Ok(())
    }
}

/// Latent attributes, index order: watermark, synthetic-content blob,
/// text originality, frame coherence.
pub const ATTR_WATERMARK: usize = 0;
pub const ATTR_BLOB: usize = 1;
pub const ATTR_ORIGINAL: usize = 2;
pub const ATTR_COHERENT: usize = 3;

/// The final label as a fixed boolean function of the four attributes:
/// unoriginal (1) iff `(watermark OR NOT coherent) AND NOT text_original`.
///
/// Truth table (watermark, blob, original, coherent -> label):
///
/// | w | b | o | c | label |
/// |---|---|---|---|-------|
/// | 0 | 0 | 0 | 0 | 1 |
/// | 0 | 0 | 0 | 1 | 0 |
/// | 0 | 0 | 1 | 0 | 0 |
/// | 0 | 0 | 1 | 1 | 0 |
/// | 0 | 1 | 0 | 0 | 1 |
/// | 0 | 1 | 0 | 1 | 0 |
/// | 0 | 1 | 1 | 0 | 0 |
/// | 0 | 1 | 1 | 1 | 0 |
/// | 1 | 0 | 0 | 0 | 1 |
/// | 1 | 0 | 0 | 1 | 1 |
/// | 1 | 0 | 1 | 0 | 0 |
/// | 1 | 0 | 1 | 1 | 0 |
/// | 1 | 1 | 0 | 0 | 1 |
/// | 1 | 1 | 0 | 1 | 1 |
/// | 1 | 1 | 1 | 0 | 0 |
/// | 1 | 1 | 1 | 1 | 0 |
///
/// The blob attribute does not enter the rule; it is still a supervised
/// process question, like a sub-issue that rarely decides the verdict.
pub fn final_label_rule(attrs: [usize; N_ATTRIBUTES]) -> usize {
    let watermark = attrs[ATTR_WATERMARK] == 1;
    let original = attrs[ATTR_ORIGINAL] == 1;
    let coherent = attrs[ATTR_COHERENT] == 1;
    usize::from((watermark || !coherent) && !original)
}

const SUBJECTIVE_TEMPLATES: &[&str] = &[
    "i honestly think this recipe changed how we cook dinner every single week",
    "my own take after trying it twice is that the second attempt felt better",
    "we laughed so hard filming this because grandma kept improvising new steps",
    "here is my personal review with notes i wrote while testing the product",
    "this took me three weekends to build and i am genuinely proud of it",
    "sharing the little story behind this photo because it means a lot to me",
];

const FLAT_TEMPLATES: &[&str] = &[
    "photo of a product placed on a table with white background",
    "video clip showing the item from several angles in sequence",
    "image of the scene captured by a camera during the day",
    "standard footage of the location recorded without commentary",
    "picture of the object with the logo visible in the corner",
    "clip of the content reposted from the original upload source",
];

const FILLER_WORDS: &[&str] = &[
    "really", "quite", "also", "again", "today", "maybe", "often", "always",
];

/// Every word the generator can emit, for building the model vocabulary.
pub fn generator_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for t in SUBJECTIVE_TEMPLATES
        .iter()
        .chain(FLAT_TEMPLATES)
        .chain(FILLER_WORDS)
    {
        for w in t.split_whitespace() {
            let w = w.to_lowercase();
            if !words.contains(&w) {
                words.push(w);
            }
        }
    }
    words
}

/// Deterministic procedural generation. Sample `i` draws from a stream derived
/// from `(seed, i)`, so generation order and parallelism cannot change output.
/// Class balance is met exactly by assigning each index a target label and
/// redrawing attributes until the label rule agrees.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>, DataError> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed).derive("dataset");
    let mut samples = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let want_positive =
            ((i + 1) as f64 * spec.class_balance).floor() > (i as f64 * spec.class_balance).floor();
        let target = usize::from(want_positive);
        samples.push(generate_sample(spec, &root.derive_index(i as u64), i, target));
    }
    Ok(samples)
}

/// One noiseless frame: flat background, optional diagonal stripe at
/// `stripe_intensity`, optional centered blob at the same amplitude.
fn render_frame(spec: &DatasetSpec, background: f32, watermark: bool, blob: bool) -> Vec<f32> {
    let s = spec.image_size;
    let mut frame = vec![background; s * s];
    if watermark {
        for d in 0..s {
            frame[d * s + d] = spec.stripe_intensity.max(frame[d * s + d]);
        }
    }
    if blob {
        let start = (s - spec.blob_size) / 2;
        for r in start..start + spec.blob_size {
            for c in start..start + spec.blob_size {
                frame[r * s + c] = spec.stripe_intensity.max(frame[r * s + c]);
            }
        }
    }
    frame
}

fn generate_sample(spec: &DatasetSpec, stream: &SeedStream, index: usize, target: usize) -> Sample {
    let mut rng = stream.rng();
    let mut attrs = [0usize; N_ATTRIBUTES];
    for _ in 0..10_000 {
        for a in attrs.iter_mut() {
            *a = usize::from(rng.gen_bool(0.5));
        }
        if final_label_rule(attrs) == target {
            break;
        }
    }
    let s = spec.image_size;
    let noise = Normal::new(0.0f64, spec.noise_sigma as f64).expect("sigma >= 0");

    // frame 0: flat background plus the sample's active motifs; the motif
    // intensities sit close to the noise floor on purpose, so each attribute
    // is individually learnable but never trivially separable
    let base = render_frame(spec, 0.25, attrs[ATTR_WATERMARK] == 1, attrs[ATTR_BLOB] == 1);

    let mut frames: Vec<Vec<f32>> = Vec::with_capacity(spec.n_frames);
    frames.push(base.clone());
    for _ in 1..spec.n_frames {
        if attrs[ATTR_COHERENT] == 1 {
            frames.push(base.clone());
        } else {
            // uncorrelated continuation: an independently drawn motif state
            // on a slightly tinted background, like footage spliced in from a
            // different scene; the tint sits well under the pixel noise so
            // only aggregate statistics reveal it
            frames.push(render_frame(spec, 0.30, rng.gen_bool(0.5), rng.gen_bool(0.5)));
        }
    }
    let image: Vec<Vec<Vec<f32>>> = frames
        .into_iter()
        .map(|frame| {
            frame
                .chunks(s)
                .map(|row| {
                    row.iter()
                        .map(|&p| {
                            let v = p as f64 + noise.sample(&mut rng);
                            v.clamp(0.0, 1.0) as f32
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let pool = if attrs[ATTR_ORIGINAL] == 1 {
        SUBJECTIVE_TEMPLATES
    } else {
        FLAT_TEMPLATES
    };
    let mut text = pool[rng.gen_range(0..pool.len())].to_string();
    for _ in 0..rng.gen_range(0..4) {
        text.push(' ');
        text.push_str(FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]);
    }

    Sample {
        id: format!("s{index:06}"),
        image,
        text,
        process_labels: attrs.to_vec(),
        final_label: final_label_rule(attrs),
    }
}

/// One JSON object per line, UTF-8, LF line endings.
pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for sample in samples {
        let line = serde_json::to_string(sample).expect("sample serializes");
        writeln!(out, "{line}").map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    out.flush().map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_samples: 200,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn rule_truth_table() {
        // rows in (w, b, o, c) binary order, matching the doc table
        let expected = [
            1, 0, 0, 0, 1, 0, 0, 0, //
            1, 1, 0, 0, 1, 1, 0, 0,
        ];
        for row in 0..16 {
            let attrs = [(row >> 3) & 1, (row >> 2) & 1, (row >> 1) & 1, row & 1];
            assert_eq!(
                final_label_rule(attrs),
                expected[row],
                "attrs {attrs:?}"
            );
        }
        assert_eq!(final_label_rule([1, 0, 0, 1]), 1);
        assert_eq!(final_label_rule([0, 1, 1, 0]), 0);
    }

    #[test]
    fn labels_are_a_function_of_attributes() {
        let samples = generate_dataset(&small_spec()).unwrap();
        for s in &samples {
            let attrs = [
                s.process_labels[0],
                s.process_labels[1],
                s.process_labels[2],
                s.process_labels[3],
            ];
            assert_eq!(s.final_label, final_label_rule(attrs));
        }
    }

    #[test]
    fn stripe_visible_without_noise() {
        let spec = DatasetSpec {
            noise_sigma: 0.0,
            n_samples: 100,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        let mut saw_stripe = false;
        for s in &samples {
            if s.process_labels[ATTR_WATERMARK] == 1 {
                saw_stripe = true;
                let frame = &s.image[0];
                let max_diag = (0..spec.image_size)
                    .map(|d| frame[d][d])
                    .fold(0.0f32, f32::max);
                assert!(max_diag >= spec.stripe_intensity);
            }
        }
        assert!(saw_stripe);
    }

    #[test]
    fn deterministic_under_seed_distinct_across_seeds() {
        let a = generate_dataset(&small_spec()).unwrap();
        let b = generate_dataset(&small_spec()).unwrap();
        assert_eq!(a, b);

        let hash_of = |samples: &[Sample]| {
            let mut h = DefaultHasher::new();
            for s in samples {
                s.id.hash(&mut h);
                s.text.hash(&mut h);
                s.final_label.hash(&mut h);
                for frame in &s.image {
                    for row in frame {
                        for p in row {
                            p.to_bits().hash(&mut h);
                        }
                    }
                }
            }
            h.finish()
        };
        let mut spec = DatasetSpec {
            n_samples: 1000,
            ..DatasetSpec::default()
        };
        let first = generate_dataset(&spec).unwrap();
        spec.seed = 1;
        let second = generate_dataset(&spec).unwrap();
        assert_ne!(hash_of(&first), hash_of(&second));
    }

    #[test]
    fn class_balance_within_two_points() {
        let spec = DatasetSpec {
            n_samples: 10_000,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        let positives = samples.iter().filter(|s| s.final_label == 1).count();
        let rate = positives as f64 / samples.len() as f64;
        assert!((0.48..=0.52).contains(&rate), "positive rate {rate}");
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        for s in generate_dataset(&small_spec()).unwrap() {
            for frame in &s.image {
                for row in frame {
                    assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");

        write_jsonl(&[], &path).unwrap();
        assert!(read_jsonl(&path).unwrap().is_empty());

        let spec = DatasetSpec {
            n_samples: 100,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        write_jsonl(&samples, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.text, b.text);
            assert_eq!(a.process_labels, b.process_labels);
            assert_eq!(a.final_label, b.final_label);
            for (fa, fb) in a.image.iter().zip(&b.image) {
                for (ra, rb) in fa.iter().zip(fb) {
                    for (pa, pb) in ra.iter().zip(rb) {
                        assert!((pa - pb).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn truncated_line_is_a_parse_error_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let spec = DatasetSpec {
            n_samples: 2,
            ..DatasetSpec::default()
        };
        let samples = generate_dataset(&spec).unwrap();
        let mut text = String::new();
        for s in &samples {
            text.push_str(&serde_json::to_string(s).unwrap());
            text.push('\n');
        }
        let truncated = &text[..text.len() - 20];
        std::fs::write(&path, truncated).unwrap();
        match read_jsonl(&path).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn missing_field_is_a_schema_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"x\",\"image\":[],\"text\":\"t\",\"process_labels\":[0,0,0,0]}\n",
        )
        .unwrap();
        match read_jsonl(&path).unwrap_err() {
            DataError::Parse { line, message } => {
                assert_eq!(line, 1);
                assert!(message.contains("final_label"), "{message}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = DatasetSpec::default();
        spec.n_questions = 3;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = DatasetSpec::default();
        spec.label_rule = "xor".into();
        assert!(generate_dataset(&spec).is_err());
    }
}
