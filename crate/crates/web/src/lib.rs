//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export is a thin wrapper over a plain function, so the logic runs
//! (and is tested) natively as well.

use wasm_bindgen::prelude::*;

use maple_lab::data::{benchmark_classes, domain_shift, render, Shift, Style, Vocabulary};
use maple_lab::flops::{flop_count, reference_config};
use maple_lab::model::ModelConfig;
use maple_lab::prompts::{PromptConfig, Variant};

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Names of the benchmark classes, in id order.
#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    benchmark_classes().into_iter().map(|c| c.name).collect()
}

/// Side length of rendered images.
#[wasm_bindgen]
pub fn image_side() -> usize {
    ModelConfig::default().image_size
}

fn parse_shift(kind: &str, amount: f32, seed: u64) -> Result<Shift, String> {
    Ok(match kind {
        "identity" => Shift::Identity,
        "noise" => Shift::GaussianNoise { sigma: amount, seed },
        "hue" => Shift::HueRotate { degrees: amount },
        "blur" => Shift::Blur {
            radius: amount.round().max(0.0) as usize,
        },
        "sketch" => Shift::Sketch,
        other => return Err(format!("unknown shift {other:?}")),
    })
}

/// One benchmark image under a domain shift, as RGBA bytes.
pub fn rgba(class: usize, shifted_style: bool, shift: &str, amount: f32, seed: u64) -> Result<Vec<u8>, String> {
    let classes = benchmark_classes();
    let c = classes
        .get(class)
        .ok_or_else(|| format!("class {class} outside 0..{}", classes.len()))?;
    let style = if shifted_style { Style::SHIFTED } else { Style::CLEAN };
    let sample = render(c, &style, &Vocabulary::standard(), seed).map_err(|e| e.to_string())?;
    let shift = parse_shift(shift, amount, seed)?;
    let sample = domain_shift(&sample, &shift, 0).map_err(|e| e.to_string())?;
    Ok(sample
        .image
        .data()
        .chunks(3)
        .flat_map(|p| {
            let [r, g, b] = [p[0], p[1], p[2]].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            [r, g, b, 255]
        })
        .collect())
}

/// `[GFLOPs, reference GFLOPs, overhead %]` of one ViT-B/16-scale pass over
/// `classes` names, against shallow text prompting.
pub fn overhead(variant: &str, depth: usize, length: usize, classes: usize) -> Result<Vec<f64>, String> {
    let variant: Variant = variant.parse().map_err(|e: maple_lab::Error| e.to_string())?;
    let model = ModelConfig::clip_b16();
    let cfg = PromptConfig {
        depth,
        length,
        ..PromptConfig::for_model(variant, model.layers)
    };
    cfg.validate(&model).map_err(|e| e.to_string())?;
    let reference = flop_count(&model, &reference_config(&cfg), classes);
    let report = flop_count(&model, &cfg, classes).against(&reference);
    Ok(vec![
        report.flops as f64 / 1e9,
        reference.flops as f64 / 1e9,
        report.overhead_pct.unwrap_or(0.0),
    ])
}

/// Renders class `class` in the clean or shifted style and applies `shift`
/// (`identity`, `noise`, `hue`, `blur` or `sketch`) with strength `amount`.
/// Returns `side * side * 4` bytes ready for `ImageData`.
#[wasm_bindgen]
pub fn render_rgba(class: usize, shifted_style: bool, shift: &str, amount: f32, seed: u64) -> Result<Vec<u8>, JsError> {
    rgba(class, shifted_style, shift, amount, seed).map_err(js)
}

#[wasm_bindgen]
pub fn flop_overhead(variant: &str, depth: usize, length: usize, classes: usize) -> Result<Vec<f64>, JsError> {
    overhead(variant, depth, length, classes).map_err(js)
}

/// Harmonic mean of base and novel accuracy.
#[wasm_bindgen]
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64, JsError> {
    maple_lab::eval::harmonic_mean(base, novel).map_err(|e| js(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_opaque_and_sized() {
        let side = image_side();
        let px = rgba(3, true, "hue", 90.0, 5).unwrap();
        assert_eq!(px.len(), side * side * 4);
        assert!(px.chunks(4).all(|p| p[3] == 255));
        assert_eq!(px, rgba(3, true, "hue", 90.0, 5).unwrap());
        assert_ne!(px, rgba(3, true, "identity", 0.0, 5).unwrap());
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(rgba(99, false, "identity", 0.0, 1).is_err());
        assert!(rgba(0, false, "swirl", 0.0, 1).is_err());
        assert!(rgba(0, false, "noise", 2.0, 1).is_err());
        assert!(overhead("maple", 13, 2, 10).is_err());
        assert!(overhead("bogus", 1, 2, 10).is_err());
    }

    #[test]
    fn coupled_overhead_is_small_and_positive() {
        let v = overhead("maple", 9, 2, 1000).unwrap();
        assert!(v[0] > v[1]);
        assert!(v[2] > 0.0 && v[2] < 0.2, "{v:?}");
        assert_eq!(class_names().len(), 20);
    }
}
