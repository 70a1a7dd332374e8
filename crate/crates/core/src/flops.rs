//! Analytic multiply-accumulate counts for one classification forward pass.
//!
//! Convention: every contraction counts one MAC per multiply-add; norms,
//! nonlinearities and softmax are ignored. One FLOP is half a MAC's worth,
//! so FLOPs = 2 x MACs. A forward pass encodes one image and the text of all
//! `C` class prompts, then scores the image against every class.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::ModelConfig;
use crate::prompts::{Coupling, PromptConfig, Variant};

/// MACs of `layers` pre-norm blocks over `tokens` tokens of width `width`:
/// `4 T d^2 + 2 T^2 d + 2 T d (r d)` per layer.
pub fn tower_macs(layers: usize, tokens: usize, width: usize, mlp_ratio: usize) -> u64 {
    let (k, t, d, r) = (layers as u64, tokens as u64, width as u64, mlp_ratio as u64);
    k * (4 * t * d * d + 2 * t * t * d + 2 * t * d * (r * d))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub variant: String,
    pub classes: usize,
    pub macs: u64,
    pub flops: u64,
    /// MACs per component.
    pub breakdown: BTreeMap<String, u64>,
    /// Percent above the reference pass, when one was given.
    pub overhead_pct: Option<f64>,
}

/// Token counts seen by every vision and text block.
pub fn token_counts(model: &ModelConfig, prompts: &PromptConfig) -> (usize, usize) {
    let b = prompts.length;
    let v = prompts.variant;
    let vision = model.patches() + 1 + if v.prompts_vision() { b } else { 0 };
    let text = model.context_len + if v.prompts_text() { b } else { 0 };
    (vision, text)
}

/// MACs for one image against `classes` class prompts. Accepts any
/// configuration, including zero-length prompts.
pub fn flop_count(model: &ModelConfig, prompts: &PromptConfig, classes: usize) -> FlopReport {
    let (tv, tt) = token_counts(model, prompts);
    let c = classes as u64;
    let (dv, dl, dvl) = (model.d_v as u64, model.d_l as u64, model.d_vl as u64);
    let mut parts = BTreeMap::new();
    parts.insert(
        "vision.embed".to_string(),
        (model.patches() * model.patch_dim()) as u64 * dv,
    );
    parts.insert(
        "vision.blocks".to_string(),
        tower_macs(model.layers, tv, model.d_v, model.mlp_ratio),
    );
    parts.insert("vision.proj".to_string(), dv * dvl);
    parts.insert(
        "text.blocks".to_string(),
        c * tower_macs(model.layers, tt, model.d_l, model.mlp_ratio),
    );
    parts.insert("text.proj".to_string(), c * dl * dvl);
    parts.insert("logits".to_string(), c * dvl);
    let j = prompts.effective_depth() as u64;
    let b = prompts.length as u64;
    let (src, dst) = match prompts.coupling {
        Coupling::LangToVision => (dl, dv),
        Coupling::VisionToLang => (dv, dl),
    };
    let prompt_macs = match prompts.variant {
        Variant::Maple => j * b * src * dst,
        Variant::MapleProgressive => j * b * src * dst + j.saturating_sub(1) * b * src * src,
        _ => 0,
    };
    parts.insert("prompts".to_string(), prompt_macs);
    let macs = parts.values().sum();
    FlopReport {
        variant: prompts.variant.name().to_string(),
        classes,
        macs,
        flops: 2 * macs,
        breakdown: parts,
        overhead_pct: None,
    }
}

impl FlopReport {
    /// Fills `overhead_pct` relative to `reference`.
    pub fn against(mut self, reference: &FlopReport) -> Self {
        self.overhead_pct = Some(overhead_pct(self.macs, reference.macs));
        self
    }
}

pub fn overhead_pct(macs: u64, reference: u64) -> f64 {
    100.0 * (macs as f64 - reference as f64) / reference as f64
}

/// The text-shallow pass with the same prompt length: the reference for
/// overhead figures.
pub fn reference_config(prompts: &PromptConfig) -> PromptConfig {
    PromptConfig {
        variant: Variant::TextShallow,
        depth: 1,
        ..prompts.clone()
    }
}
