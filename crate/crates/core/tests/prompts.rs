use maple_lab::data::Vocabulary;
use maple_lab::graph::Graph;
use maple_lab::model::{Bind, Linear, Model, ModelConfig};
use maple_lab::prompts::*;
use maple_lab::train::tiny_gradcheck;
use maple_lab::{Error, Tensor};

fn tiny() -> (ModelConfig, Model<f64>) {
    let cfg = ModelConfig::tiny(3, 8);
    let m = Model::<f64>::init(cfg.clone(), 11).unwrap();
    (cfg, m)
}

fn cfg(variant: Variant, depth: usize, length: usize) -> PromptConfig {
    PromptConfig {
        depth,
        length,
        ..PromptConfig::for_model(variant, 3)
    }
}

fn bank(c: &PromptConfig, m: &Model<f64>, seed: u64) -> PromptBank<Tensor<f64>> {
    let vocab = Vocabulary::standard();
    init_prompts(c, &m.config, &m.backbone.text.token_embed, &vocab, seed)
        .unwrap()
        .0
}

fn images(cfg: &ModelConfig, n: usize) -> Vec<Tensor<f64>> {
    let s = cfg.image_size;
    (0..n)
        .map(|i| Tensor::from_fn(&[s, s, 3], |j| ((i * 13 + j * 5) % 11) as f64 / 10.0))
        .collect()
}

fn names(vocab: &Vocabulary, list: &[&str]) -> Vec<Vec<u32>> {
    list.iter().map(|n| vocab.tokenize(n).unwrap()).collect()
}

#[test]
fn no_prompts_reproduces_the_plain_encoders_bitwise() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = PromptConfig::for_model(Variant::None, 3);
    let b = bank(&c, &m, 0);
    assert_eq!(b.scalar_count(), 0);
    let imgs = images(&mc, 3);
    let caps = vec![vocab.caption("red circle").unwrap()];
    assert!(encode_image_prompted(&m, &b, &c, &imgs)
        .unwrap()
        .bitwise_eq(&m.encode_images(&imgs).unwrap()));
    assert!(encode_text_prompted(&m, &b, &c, &caps)
        .unwrap()
        .bitwise_eq(&m.encode_texts(&caps).unwrap()));
}

#[test]
fn depth_one_deep_text_prompting_equals_shallow() {
    let (_, m) = tiny();
    let vocab = Vocabulary::standard();
    let deep = cfg(Variant::TextDeep, 1, 2);
    let shallow = cfg(Variant::TextShallow, 1, 2);
    let b = bank(&deep, &m, 3);
    let caps = names(&vocab, &["red circle", "blue ring"]);
    let a = encode_text_prompted(&m, &b, &deep, &caps).unwrap();
    let s = encode_text_prompted(&m, &b, &shallow, &caps).unwrap();
    assert!(a.bitwise_eq(&s));
}

#[test]
fn progressive_with_zero_maps_equals_plain_coupling() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let prog = cfg(Variant::MapleProgressive, 3, 2);
    let mut b = bank(&prog, &m, 4);
    for g in &mut b.progressive {
        g.weight = Tensor::zeros(g.weight.shape());
        g.bias = Tensor::zeros(g.bias.shape());
    }
    let mut plain_bank = b.clone();
    plain_bank.progressive.clear();
    let plain = cfg(Variant::Maple, 3, 2);
    let imgs = images(&mc, 2);
    let cls = names(&vocab, &["red circle", "blue ring", "green square"]);
    let a = classify(&m, &b, &prog, &vocab, &imgs, &cls).unwrap();
    let p = classify(&m, &plain_bank, &plain, &vocab, &imgs, &cls).unwrap();
    assert!(a.bitwise_eq(&p));
}

#[test]
fn coupling_carries_vision_gradient_into_language_prompts() {
    let (mc, m) = tiny();
    let imgs = images(&mc, 2);
    let grad_norm = |variant: Variant| {
        let c = cfg(variant, 2, 2);
        let b = bank(&c, &m, 5);
        let mut g = Graph::<f64>::new();
        let w = m.backbone.vision.bind(&mut g, false);
        let pb = b.bind(&mut g, true);
        let r = resolve(&mut g, &pb, &c).unwrap();
        let x = image_graph(&mut g, &w, &mc, &r, &imgs).unwrap();
        // vision-only objective
        let loss = g.sum(x);
        let sq = g.mul(loss, loss).unwrap();
        let grads = g.backward(sq).unwrap();
        pb.text.iter().map(|&p| grads.wrt(p).norm()).sum::<f64>()
    };
    assert!(grad_norm(Variant::Maple) > 0.0);
    assert_eq!(grad_norm(Variant::IndependentVl), 0.0);
}

#[test]
fn prompted_token_counts_per_layer() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = cfg(Variant::Maple, 2, 2);
    let b = bank(&c, &m, 6);
    let mut g = Graph::<f64>::with_probe();
    let w = m.backbone.bind(&mut g, false);
    let pb = b.bind(&mut g, false);
    let r = resolve(&mut g, &pb, &c).unwrap();
    let caps = names(&vocab, &["red circle", "blue ring"]);
    text_graph(&mut g, &w.text, &mc, &r, &caps).unwrap();
    image_graph(&mut g, &w.vision, &mc, &r, &images(&mc, 2)).unwrap();
    let probe = g.probe().unwrap();
    let text = probe.marks_for("text.tokens");
    assert_eq!(text.len(), mc.layers);
    for s in &text {
        assert_eq!(s[1], 2 + mc.context_len, "b + N tokens");
    }
    let vision = probe.marks_for("vision.tokens");
    assert_eq!(vision.len(), mc.layers);
    for s in &vision {
        assert_eq!(s[1], mc.patches() + 1 + 2, "M + 1 + b tokens");
    }
}

#[test]
fn template_initialisation_copies_word_embeddings() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = cfg(Variant::Maple, 2, 2);
    let b = bank(&c, &m, 7);
    let emb = &m.backbone.text.token_embed;
    assert_eq!(b.text[0].row(0), emb.row(vocab.id("a").unwrap() as usize));
    assert_eq!(b.text[0].row(1), emb.row(vocab.id("photo").unwrap() as usize));
    assert_eq!(b.text[0].shape(), &[2, mc.d_l]);
    // deeper sets stay random
    assert_ne!(b.text[1].row(0), emb.row(vocab.id("a").unwrap() as usize));
}

#[test]
fn random_initialisation_is_seeded() {
    let (_, m) = tiny();
    let c = PromptConfig {
        init: InitMode::RandomAll,
        ..cfg(Variant::IndependentVl, 2, 2)
    };
    assert_eq!(bank(&c, &m, 8), bank(&c, &m, 8));
    assert_ne!(bank(&c, &m, 8), bank(&c, &m, 9));
}

#[test]
fn long_prompts_fall_back_to_random_rows_with_a_warning() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = cfg(Variant::TextDeep, 1, Vocabulary::template_len() + 2);
    let (b, warning) =
        init_prompts(&c, &mc, &m.backbone.text.token_embed, &vocab, 1).unwrap();
    assert!(warning.is_some());
    assert_eq!(b.text[0].shape()[0], c.length);
    let (_, none) = init_prompts(&cfg(Variant::TextDeep, 1, 2), &mc, &m.backbone.text.token_embed, &vocab, 1).unwrap();
    assert!(none.is_none());
}

#[test]
fn coupling_function_limits() {
    let (mc, m) = tiny();
    let c = cfg(Variant::Maple, 1, 2);
    let mut b = bank(&c, &m, 10);
    // zero map gives zero prompts
    b.coupling[0] = Linear {
        weight: Tensor::zeros(&[mc.d_l, mc.d_v]),
        bias: Tensor::zeros(&[mc.d_v]),
    };
    let mut g = Graph::<f64>::new();
    let pb = b.bind(&mut g, false);
    let v = couple(&mut g, &pb, &c, 0).unwrap();
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));

    // identity map (d_l = d_v here) reproduces the language prompts
    b.coupling[0].weight = Tensor::identity(mc.d_l);
    let mut g = Graph::<f64>::new();
    let pb = b.bind(&mut g, false);
    let v = couple(&mut g, &pb, &c, 0).unwrap();
    assert!(g.value(v).bitwise_eq(&b.text[0]));

    assert!(matches!(couple(&mut g, &pb, &c, 1), Err(Error::Contract(_))));
    let ind = cfg(Variant::IndependentVl, 1, 2);
    assert!(matches!(couple(&mut g, &pb, &ind, 0), Err(Error::Contract(_))));
}

#[test]
fn perturbing_first_language_set_moves_image_embeddings() {
    let (mc, m) = tiny();
    let c = cfg(Variant::Maple, 2, 2);
    let b = bank(&c, &m, 12);
    let imgs = images(&mc, 1);
    let x0 = encode_image_prompted(&m, &b, &c, &imgs).unwrap();
    let mut moved = b.clone();
    moved.text[0].data_mut()[0] += 0.5;
    let x1 = encode_image_prompted(&m, &moved, &c, &imgs).unwrap();
    assert!(x0.max_abs_diff(&x1) > 1e-9);
}

#[test]
fn progressive_chain_reaches_the_first_set() {
    let (_, m) = tiny();
    let c = cfg(Variant::MapleProgressive, 3, 2);
    let b = bank(&c, &m, 13);
    let mut g = Graph::<f64>::new();
    let pb = b.bind(&mut g, true);
    let eff = progressive_compose(&mut g, &pb, &c, 2).unwrap();
    let s = g.sum(eff);
    let loss = g.mul(s, s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(pb.text[0]).norm() > 0.0);
    assert!(matches!(
        progressive_compose(&mut g, &pb, &c, 3),
        Err(Error::Contract(_))
    ));
    let plain = cfg(Variant::Maple, 3, 2);
    assert!(matches!(
        progressive_compose(&mut g, &pb, &plain, 1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn reverse_coupling_stores_vision_sets() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = PromptConfig {
        coupling: Coupling::VisionToLang,
        ..cfg(Variant::Maple, 2, 2)
    };
    let b = bank(&c, &m, 14);
    assert!(b.text.is_empty());
    assert_eq!(b.vision.len(), 2);
    assert_eq!(b.coupling[0].weight.shape(), &[mc.d_v, mc.d_l]);
    assert_eq!(b.scalar_count(), c.census(&mc));
    // text-only objective still reaches the stored vision sets
    let mut g = Graph::<f64>::new();
    let w = m.backbone.text.bind(&mut g, false);
    let pb = b.bind(&mut g, true);
    let r = resolve(&mut g, &pb, &c).unwrap();
    let z = text_graph(&mut g, &w, &mc, &r, &names(&vocab, &["red circle"])).unwrap();
    let s = g.sum(z);
    let loss = g.mul(s, s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(pb.vision[0]).norm() > 0.0);
}

#[test]
fn bank_size_matches_census_for_every_variant() {
    let (mc, m) = tiny();
    for v in Variant::ALL {
        for coupling in [Coupling::LangToVision, Coupling::VisionToLang] {
            let c = PromptConfig {
                coupling,
                ..cfg(v, 3, 2)
            };
            let b = bank(&c, &m, 15);
            assert_eq!(b.scalar_count(), c.census(&mc), "{v} {coupling:?}");
            b.check(&c, &mc).unwrap();
        }
    }
}

#[test]
fn full_scale_census() {
    let clip = ModelConfig::clip_b16();
    let maple = PromptConfig::preset(Variant::Maple);
    // 9 layers of 2 x 512 prompts plus 9 maps 512 -> 768 with bias
    assert_eq!(maple.census(&clip), 9 * 2 * 512 + 9 * (512 * 768 + 768));
    assert_eq!(maple.census(&clip), 3_555_072);
    let deep = PromptConfig::preset(Variant::TextDeep);
    assert_eq!(deep.census(&clip), 12 * 4 * 512);
}

#[test]
fn invalid_prompt_configurations_are_rejected() {
    let (mc, _) = tiny();
    assert!(matches!(cfg(Variant::Maple, 4, 2).validate(&mc), Err(Error::Config(_))));
    assert!(matches!(cfg(Variant::Maple, 0, 2).validate(&mc), Err(Error::Config(_))));
    assert!(matches!(cfg(Variant::Maple, 2, 0).validate(&mc), Err(Error::Config(_))));
    assert!("maple_progressive".parse::<Variant>().is_ok());
    assert!(matches!("deep_maple".parse::<Variant>(), Err(Error::Config(_))));
}

#[test]
fn classification_distributions() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = cfg(Variant::Maple, 2, 2);
    let b = bank(&c, &m, 16);
    let imgs = images(&mc, 3);
    let cls = names(&vocab, &["red circle", "blue ring", "green square", "white cross"]);
    let p = classify(&m, &b, &c, &vocab, &imgs, &cls).unwrap();
    assert_eq!(p.shape(), &[3, 4]);
    for i in 0..3 {
        let s: f64 = p.row(i).iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
    let one = classify(&m, &b, &c, &vocab, &imgs[..1], &cls[..1]).unwrap();
    assert_eq!(one.data(), &[1.0]);
    assert!(matches!(
        classify(&m, &b, &c, &vocab, &imgs, &[]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn classification_equals_the_encoder_composition() {
    let (mc, m) = tiny();
    let vocab = Vocabulary::standard();
    let c = cfg(Variant::MapleProgressive, 3, 2);
    let b = bank(&c, &m, 17);
    let imgs = images(&mc, 2);
    let cls = names(&vocab, &["red circle", "blue ring", "green square"]);
    let p = classify(&m, &b, &c, &vocab, &imgs, &cls).unwrap();
    let x = encode_image_prompted(&m, &b, &c, &imgs).unwrap();
    let z = encode_text_prompted(&m, &b, &c, &class_inputs(&c, &cls, &vocab).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let (xv, zv) = (g.constant(x), g.constant(z));
    let l = maple_lab::model::cosine_logits(&mut g, xv, zv, m.temperature).unwrap();
    let q = g.softmax(l, 1.0).unwrap();
    assert!(p.bitwise_eq(g.value(q)));
}

#[test]
fn tuning_gradients_agree_with_central_differences() {
    let s = tiny_gradcheck(3).unwrap();
    // 2 sets of 1 x 8 plus 2 maps of 8 x 8 + 8
    assert_eq!(s.coordinates, 2 * 8 + 2 * 72);
    assert!(s.report32.max_rel_err <= 1e-3, "{:?}", s.report32);
    // the 64-bit discrepancy is truncation: it falls ~100x per decade of h
    let err: Vec<f64> = s.step_sweep.iter().map(|&(_, e)| e).collect();
    for w in err[..3].windows(2) {
        assert!(w[0] / w[1] > 50.0, "{:?}", s.step_sweep);
    }
    assert!(err[3] <= 1e-6, "{:?}", s.step_sweep);
}
