//! Process-supervised multimodal classification at desk scale.
//!
//! The crate trains a tiny multimodal transformer three ways — a single
//! final-token head (vanilla), all heads on the final token (multitask), and
//! heads at dedicated `<ans>` positions (agentps) — over a procedurally
//! generated dataset, with optionally noisy process labels, and compares the
//! variants on precision/recall metrics.

pub mod annotator;
pub mod assembly;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;
