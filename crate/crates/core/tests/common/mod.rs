//! Shared fixtures: a small backbone pretrained once per test binary.
#![allow(dead_code)]

pub mod cli;

use std::sync::OnceLock;

use maple_lab::data::{make_dataset, world_classes, ConceptClass, Dataset, Style, Vocabulary};
use maple_lab::model::{Model, ModelConfig};
use maple_lab::train::{pretrain, PretrainConfig, PretrainOutcome};

pub fn small_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_v: 32,
        d_l: 32,
        d_vl: 32,
        vision_heads: 2,
        text_heads: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

pub fn small_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        epochs: 12,
        batch_size: 16,
        lr: 2e-3,
        seed: 1,
        ..PretrainConfig::default()
    }
}

/// The first twenty pretraining concepts.
pub fn small_classes() -> Vec<ConceptClass> {
    world_classes().into_iter().take(20).collect()
}

pub fn small_corpus() -> Dataset {
    make_dataset(&small_classes(), 24, &Style::CLEAN, &Vocabulary::standard(), 1).unwrap()
}

pub fn pretrained() -> &'static PretrainOutcome {
    static CELL: OnceLock<PretrainOutcome> = OnceLock::new();
    CELL.get_or_init(|| pretrain(&small_config(), &small_corpus(), &small_pretrain_config(), None).unwrap())
}

pub fn small_model() -> &'static Model<f32> {
    &pretrained().model
}

/// Fresh renders of the first ten concepts, unseen during pretraining.
pub fn held_out(per_class: usize, seed: u64) -> Dataset {
    make_dataset(&small_classes()[..10], per_class, &Style::CLEAN, &Vocabulary::standard(), seed).unwrap()
}
