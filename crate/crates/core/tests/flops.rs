use maple_lab::data::Vocabulary;
use maple_lab::flops::*;
use maple_lab::graph::{Graph, Mask};
use maple_lab::model::{cosine_logits, run_tower, Backbone, Bind, Injection, Model, ModelConfig};
use maple_lab::prompts::*;
use maple_lab::Tensor;

fn variant_cfg(variant: Variant, depth: usize, length: usize, layers: usize) -> PromptConfig {
    PromptConfig {
        depth,
        length,
        ..PromptConfig::for_model(variant, layers)
    }
}

/// MACs the probe records for one image scored against `classes` names.
fn measured(model: &Model<f64>, cfg: &PromptConfig, classes: usize) -> u64 {
    let vocab = Vocabulary::standard();
    let bank = init_prompts(cfg, &model.config, &model.backbone.text.token_embed, &vocab, 5)
        .unwrap()
        .0;
    let names: Vec<Vec<u32>> = (0..classes).map(|c| vec![3 + c as u32]).collect();
    let inputs = class_inputs(cfg, &names, &vocab).unwrap();
    let s = model.config.image_size;
    let image = Tensor::<f64>::from_fn(&[s, s, 3], |i| (i % 7) as f64 / 7.0);
    let mut g = Graph::with_probe();
    let w = model.backbone.bind(&mut g, false);
    let pb = bank.bind(&mut g, false);
    let r = resolve(&mut g, &pb, cfg).unwrap();
    let x = image_graph(&mut g, &w.vision, &model.config, &r, &[image]).unwrap();
    let z = text_graph(&mut g, &w.text, &model.config, &r, &inputs).unwrap();
    cosine_logits(&mut g, x, z, 0.07).unwrap();
    g.probe().unwrap().macs
}

#[test]
fn one_layer_hand_count() {
    // 4*2*16 projections, 2*4*4 attention, 2*2*4*4 feed-forward
    assert_eq!(tower_macs(1, 2, 4, 1), 128 + 32 + 64);
    assert_eq!(tower_macs(2, 2, 4, 1), 2 * 224);
}

#[test]
fn tower_probe_matches_formula_on_grid() {
    for layers in [1, 2] {
        for tokens in [2, 4] {
            for d in [4, 8] {
                for ratio in [1, 2] {
                    let cfg = ModelConfig {
                        mlp_ratio: ratio,
                        ..ModelConfig::tiny(layers, d)
                    };
                    let bb = Backbone::<Tensor<f64>>::init(&cfg, 1).unwrap();
                    let mut g = Graph::<f64>::with_probe();
                    let w = bb.vision.bind(&mut g, false);
                    let x = g.constant(Tensor::from_fn(&[tokens, d], |i| (i as f64).sin()));
                    run_tower(&mut g, &w.tower, x, tokens, 2, Mask::None, Injection::NONE, "t")
                        .unwrap();
                    assert_eq!(
                        g.probe().unwrap().macs,
                        tower_macs(layers, tokens, d, ratio),
                        "K={layers} T={tokens} d={d} r={ratio}"
                    );
                }
            }
        }
    }
}

#[test]
fn full_pass_probe_matches_count_for_every_variant() {
    let mcfg = ModelConfig::tiny(3, 8);
    let model = Model::<f64>::init(mcfg.clone(), 2).unwrap();
    for variant in Variant::ALL {
        for (depth, length) in [(1, 1), (2, 3), (3, 2)] {
            for coupling in [Coupling::LangToVision, Coupling::VisionToLang] {
                let cfg = PromptConfig {
                    coupling,
                    ..variant_cfg(variant, depth, length, 3)
                };
                for classes in [1, 4] {
                    let want = flop_count(&mcfg, &cfg, classes);
                    assert_eq!(
                        measured(&model, &cfg, classes),
                        want.macs,
                        "{} J={depth} b={length} {} C={classes}",
                        variant.name(),
                        coupling.name()
                    );
                    assert_eq!(want.flops, 2 * want.macs);
                    assert_eq!(want.breakdown.values().sum::<u64>(), want.macs);
                }
            }
        }
    }
}

#[test]
fn counts_grow_with_length_depth_classes_and_context() {
    let m = ModelConfig::clip_b16();
    for &variant in &[Variant::Maple, Variant::MapleProgressive, Variant::IndependentVl] {
        let at = |j, b, c, m: &ModelConfig| flop_count(m, &variant_cfg(variant, j, b, 12), c).macs;
        for b in 1..6 {
            assert!(at(3, b + 1, 10, &m) > at(3, b, 10, &m));
        }
        for c in [1, 10, 100] {
            assert!(at(3, 2, c + 1, &m) > at(3, 2, c, &m));
        }
        let longer = ModelConfig {
            context_len: m.context_len + 1,
            ..m.clone()
        };
        assert!(at(3, 2, 10, &longer) > at(3, 2, 10, &m));
        // depth only matters where prompts are generated from other prompts
        if variant.is_coupled() {
            for j in 1..12 {
                assert!(at(j + 1, 2, 10, &m) > at(j, 2, 10, &m));
            }
        }
    }
}

#[test]
fn empty_shallow_prompt_costs_nothing() {
    let m = ModelConfig::default();
    let none = flop_count(&m, &PromptConfig::for_model(Variant::None, m.layers), 7);
    let empty = flop_count(&m, &variant_cfg(Variant::TextShallow, 1, 0, m.layers), 7);
    assert_eq!(none.macs, empty.macs);
    assert_eq!(none.breakdown, empty.breakdown);
}

#[test]
fn clip_scale_overheads_are_tiny() {
    let m = ModelConfig::clip_b16();
    for &variant in &[Variant::Maple, Variant::IndependentVl, Variant::MapleProgressive] {
        let cfg = PromptConfig::preset(variant);
        for classes in [10, 100, 1000] {
            let reference = flop_count(&m, &reference_config(&cfg), classes);
            let r = flop_count(&m, &cfg, classes).against(&reference);
            let pct = r.overhead_pct.unwrap();
            println!("{} C={classes}: {} GFLOPs, +{pct:.4}%", variant.name(), r.flops as f64 / 1e9);
            assert!(pct > 0.0 && pct < 1.0, "{pct}");
        }
    }
}

#[test]
fn overhead_is_relative_difference() {
    assert!((overhead_pct(110, 100) - 10.0).abs() < 1e-12);
    assert_eq!(overhead_pct(100, 100), 0.0);
}
