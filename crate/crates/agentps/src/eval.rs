//! Metrics and the three-variant ablation runner.
//!
//! The PR curve is an exact sweep over every distinct score (prediction is
//! positive iff score >= threshold, so tied scores flip together), and the
//! reported numbers are recall at fixed precision floors, precision at a
//! recall floor, and F1 at a fixed threshold plus the best over thresholds.

use serde::Serialize;
use thiserror::Error;

use crate::annotator::AnnotationResult;
use crate::assembly::SpecialVocab;
use crate::data::Sample;
use crate::model::{forward_variant, ModelBundle, ModelConfig, Variant};
use crate::numerics::Tape;
use crate::rng::SeedStream;
use crate::training::{
    prepare_samples, train, Adam, LabelSource, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate input: need at least one positive and one negative example")]
    Degenerate,
    #[error("precision floor {0} outside (0, 1]")]
    BadPrecisionFloor(f64),
    #[error("recall floor {0} outside [0, 1]")]
    BadRecallFloor(f64),
    #[error("train/test split share {0} sample ids")]
    SplitLeakage(usize),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub id: String,
    /// positive-class probability from the final head
    pub score: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub positives: usize,
}

fn counts_at(preds: &[ScoredPrediction], threshold: f64) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for p in preds {
        let predicted = p.score >= threshold;
        match (predicted, p.label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    (tp, fp, fn_)
}

/// Exact threshold sweep: sentinel 0, every distinct score ascending, and a
/// sentinel above the score range. Thresholds that predict nothing positive
/// have undefined precision and are skipped.
pub fn pr_curve(preds: &[ScoredPrediction]) -> Result<PrCurve, EvalError> {
    let positives = preds.iter().filter(|p| p.label == 1).count();
    if positives == 0 || positives == preds.len() {
        return Err(EvalError::Degenerate);
    }
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.score).collect();
    thresholds.push(0.0);
    thresholds.push(1.0 + f64::EPSILON);
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let mut points = Vec::new();
    for &threshold in &thresholds {
        let (tp, fp, fn_) = counts_at(preds, threshold);
        if tp + fp == 0 {
            continue;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
            tp,
            fp,
            fn_,
        });
    }
    Ok(PrCurve { points, positives })
}

/// Maximum recall over operating points with precision >= `p_min`; 0 when no
/// point qualifies.
pub fn recall_at_precision(curve: &PrCurve, p_min: f64) -> Result<f64, EvalError> {
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(EvalError::BadPrecisionFloor(p_min));
    }
    Ok(curve
        .points
        .iter()
        .filter(|pt| pt.precision >= p_min)
        .map(|pt| pt.recall)
        .fold(0.0, f64::max))
}

/// Maximum precision over operating points with recall >= `r_min`; 0 when no
/// point qualifies.
pub fn precision_at_recall(curve: &PrCurve, r_min: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&r_min) {
        return Err(EvalError::BadRecallFloor(r_min));
    }
    Ok(curve
        .points
        .iter()
        .filter(|pt| pt.recall >= r_min)
        .map(|pt| pt.precision)
        .fold(0.0, f64::max))
}

/// Harmonic mean of precision and recall at a fixed threshold; 0 when both
/// are 0.
pub fn f1_score(preds: &[ScoredPrediction], threshold: f64) -> f64 {
    let (tp, fp, fn_) = counts_at(preds, threshold);
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 over all distinct-score thresholds.
pub fn best_f1(preds: &[ScoredPrediction]) -> f64 {
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.score).collect();
    thresholds.push(0.0);
    thresholds
        .iter()
        .map(|&t| f1_score(preds, t))
        .fold(0.0, f64::max)
}

/// Metric columns reported per trained variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub seed: u64,
    pub f1: f64,
    pub f1_best: f64,
    /// (precision floor, recall) pairs
    pub r_at_p: Vec<(f64, f64)>,
    /// (recall floor, precision) pairs
    pub p_at_r: Vec<(f64, f64)>,
    /// ancillary-question accuracy; empty for the vanilla variant
    pub question_accuracy: Vec<f64>,
}

pub const R_AT_P_FLOORS: [f64; 5] = [0.60, 0.65, 0.70, 0.75, 0.80];
pub const P_AT_R_FLOORS: [f64; 1] = [0.50];
pub const F1_THRESHOLD: f64 = 0.5;

/// Percentage with one decimal, the format used in reports.
pub fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Scores a frozen model over a test set. Returns final-question predictions
/// plus per-ancillary-question accuracy where the variant has heads for them.
pub fn evaluate(
    bundle: &ModelBundle<f32>,
    vocab: &SpecialVocab,
    test: &[Sample],
) -> Result<(Vec<ScoredPrediction>, Vec<f64>), EvalError> {
    let config = &bundle.config;
    let n = config.n_questions;
    let mut preds = Vec::with_capacity(test.len());
    let mut correct = vec![0usize; n];
    let mut counted = vec![0usize; n];
    for sample in test {
        let layout = crate::assembly::build_sequence(&sample.text, vocab, config)
            .map_err(TrainError::Assembly)?;
        let mut tape: Tape<f32> = Tape::new();
        let leaves = bundle.register(&mut tape);
        let outputs = forward_variant(&mut tape, &leaves, config, &layout, &sample.flat_image())?;
        for &(q, logits) in &outputs.head_logits {
            let probs = tape.softmax_probs(logits);
            if q == n {
                preds.push(ScoredPrediction {
                    id: sample.id.clone(),
                    score: probs[1] as f64,
                    label: sample.final_label,
                });
            } else {
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                counted[q] += 1;
                if argmax == sample.process_labels[q] {
                    correct[q] += 1;
                }
            }
        }
    }
    let question_accuracy = correct
        .iter()
        .zip(&counted)
        .filter(|&(_, &c)| c > 0)
        .map(|(&ok, &c)| ok as f64 / c as f64)
        .collect();
    Ok((preds, question_accuracy))
}

pub fn report_from_predictions(
    variant: Variant,
    seed: u64,
    preds: &[ScoredPrediction],
    question_accuracy: Vec<f64>,
) -> Result<VariantReport, EvalError> {
    let curve = pr_curve(preds)?;
    let r_at_p = R_AT_P_FLOORS
        .iter()
        .map(|&p| recall_at_precision(&curve, p).map(|r| (p, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let p_at_r = P_AT_R_FLOORS
        .iter()
        .map(|&r| precision_at_recall(&curve, r).map(|p| (r, p)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VariantReport {
        variant,
        seed,
        f1: f1_score(preds, F1_THRESHOLD),
        f1_best: best_f1(preds),
        r_at_p,
        p_at_r,
        question_accuracy,
    })
}

/// Seed-averaged summary with the pairwise F1 gap decomposition
/// (multitask - vanilla) + (agentps - multitask) = agentps - vanilla.
#[derive(Debug, Clone, Serialize)]
pub struct AblationSummary {
    pub mean_f1: Vec<(Variant, f64)>,
    pub mean_f1_best: Vec<(Variant, f64)>,
    pub gap_multitask_vanilla: f64,
    pub gap_agentps_multitask: f64,
    pub gap_agentps_vanilla: f64,
    /// variant with the best mean F1
    pub best_variant: Variant,
}

#[derive(Debug, Serialize)]
pub struct AblationOutcome {
    pub reports: Vec<VariantReport>,
    pub summary: AblationSummary,
}

pub const ABLATION_VARIANTS: [Variant; 3] =
    [Variant::Vanilla, Variant::Multitask, Variant::AgentPs];

pub struct AblationInputs<'a> {
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub vocab: &'a SpecialVocab,
    pub model: &'a ModelConfig,
    pub train_config: &'a TrainConfig,
    /// required when `train_config.label_source` is not ground truth
    pub annotations: Option<&'a [AnnotationResult]>,
}

/// Trains all three variants per seed from a shared seed family on identical
/// data and evaluates them on the identical test set.
pub fn run_ablation(
    inputs: &AblationInputs<'_>,
    seeds: &[u64],
    mut progress: impl FnMut(&VariantReport),
) -> Result<AblationOutcome, EvalError> {
    let train_ids: std::collections::HashSet<&str> =
        inputs.train.iter().map(|s| s.id.as_str()).collect();
    let leaked = inputs
        .test
        .iter()
        .filter(|s| train_ids.contains(s.id.as_str()))
        .count();
    if leaked > 0 {
        return Err(EvalError::SplitLeakage(leaked));
    }

    let mut reports = Vec::new();
    for &seed in seeds {
        for variant in ABLATION_VARIANTS {
            let mut model = inputs.model.clone();
            model.variant = variant;
            let mut train_config = inputs.train_config.clone();
            train_config.seed = SeedStream::new(seed).derive(&variant.to_string()).seed();
            if variant == Variant::Vanilla {
                // no ancillary heads to weight
                train_config.label_source = LabelSource::GroundTruth;
            }
            let annotations = if train_config.label_source == LabelSource::GroundTruth {
                None
            } else {
                inputs.annotations
            };
            let prepared = prepare_samples::<f32>(
                inputs.train,
                annotations,
                inputs.vocab,
                &model,
                &train_config,
            )?;
            let seeds_stream = SeedStream::new(train_config.seed).derive("model");
            let mut bundle: ModelBundle<f32> =
                ModelBundle::init(model, &seeds_stream).map_err(TrainError::Model)?;
            let mut optimizer = Adam::new(&bundle);
            train(&mut bundle, &mut optimizer, &prepared, &train_config, 0)?;
            let (preds, question_accuracy) = evaluate(&bundle, inputs.vocab, inputs.test)?;
            let report = report_from_predictions(variant, seed, &preds, question_accuracy)?;
            progress(&report);
            reports.push(report);
        }
    }
    let summary = summarize(&reports);
    Ok(AblationOutcome { reports, summary })
}

/// For each report column, the variant with the best seed-averaged value —
/// the machine-readable "best" flags of the summary table.
pub fn best_flags(reports: &[VariantReport]) -> Vec<(String, Variant)> {
    let mut columns: Vec<(String, Box<dyn Fn(&VariantReport) -> f64>)> = vec![
        ("f1".to_string(), Box::new(|r: &VariantReport| r.f1)),
        ("f1_best".to_string(), Box::new(|r: &VariantReport| r.f1_best)),
    ];
    for (i, &p) in R_AT_P_FLOORS.iter().enumerate() {
        columns.push((
            format!("r@p{:.0}", p * 100.0),
            Box::new(move |r: &VariantReport| r.r_at_p.get(i).map_or(0.0, |&(_, v)| v)),
        ));
    }
    for (i, &rf) in P_AT_R_FLOORS.iter().enumerate() {
        columns.push((
            format!("p@r{:.0}", rf * 100.0),
            Box::new(move |r: &VariantReport| r.p_at_r.get(i).map_or(0.0, |&(_, v)| v)),
        ));
    }
    columns
        .into_iter()
        .map(|(name, pick)| {
            let best = ABLATION_VARIANTS
                .iter()
                .map(|&v| {
                    let values: Vec<f64> = reports
                        .iter()
                        .filter(|r| r.variant == v)
                        .map(|r| pick(r))
                        .collect();
                    (v, values.iter().sum::<f64>() / values.len().max(1) as f64)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            (name, best)
        })
        .collect()
}

pub fn summarize(reports: &[VariantReport]) -> AblationSummary {
    let mean = |variant: Variant, pick: fn(&VariantReport) -> f64| {
        let values: Vec<f64> = reports
            .iter()
            .filter(|r| r.variant == variant)
            .map(pick)
            .collect();
        values.iter().sum::<f64>() / values.len().max(1) as f64
    };
    let mean_f1: Vec<(Variant, f64)> = ABLATION_VARIANTS
        .iter()
        .map(|&v| (v, mean(v, |r| r.f1)))
        .collect();
    let mean_f1_best = ABLATION_VARIANTS
        .iter()
        .map(|&v| (v, mean(v, |r| r.f1_best)))
        .collect();
    let f1_of = |v: Variant| mean_f1.iter().find(|&&(mv, _)| mv == v).unwrap().1;
    let (vanilla, multitask, agentps) = (
        f1_of(Variant::Vanilla),
        f1_of(Variant::Multitask),
        f1_of(Variant::AgentPs),
    );
    let best_variant = mean_f1
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap()
        .0;
    AblationSummary {
        mean_f1,
        mean_f1_best,
        gap_multitask_vanilla: multitask - vanilla,
        gap_agentps_multitask: agentps - multitask,
        gap_agentps_vanilla: agentps - vanilla,
        best_variant,
    }
}

/// CSV rows for a report set: variant, seed, f1, f1_best, r@p floors, p@r50,
/// then per-question accuracies, all as percentages with one decimal.
pub fn reports_to_csv(reports: &[VariantReport], n_questions: usize) -> String {
    let mut out = String::from("variant,seed,f1,f1_best");
    for p in R_AT_P_FLOORS {
        out.push_str(&format!(",r@p{:.0}", p * 100.0));
    }
    for r in P_AT_R_FLOORS {
        out.push_str(&format!(",p@r{:.0}", r * 100.0));
    }
    for q in 1..=n_questions {
        out.push_str(&format!(",acc_q{q}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{},{},{},{}", r.variant, r.seed, pct(r.f1), pct(r.f1_best)));
        for &(_, recall) in &r.r_at_p {
            out.push_str(&format!(",{}", pct(recall)));
        }
        for &(_, precision) in &r.p_at_r {
            out.push_str(&format!(",{}", pct(precision)));
        }
        for q in 0..n_questions {
            match r.question_accuracy.get(q) {
                Some(&acc) => out.push_str(&format!(",{}", pct(acc))),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}
