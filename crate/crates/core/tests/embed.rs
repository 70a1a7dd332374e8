mod common;

use common::*;
use maple_lab::data::{make_dataset, Style, Vocabulary};
use maple_lab::embed::*;
use maple_lab::eval::PromptedClassifier;
use maple_lab::prompts::*;
use maple_lab::train::{prompt_tune, TuneConfig, TuneTask};
use maple_lab::Error;
use proptest::prelude::*;

fn planar(n: usize) -> Vec<Vec<f64>> {
    let u = [0.6, 0.0, 0.8, 0.0, 0.0];
    let v = [0.0, 1.0, 0.0, 0.0, 0.0];
    let c = [1.0, -2.0, 0.5, 3.0, 0.25];
    (0..n)
        .map(|i| {
            let (a, b) = ((i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos());
            (0..5).map(|j| c[j] + a * u[j] + b * v[j]).collect()
        })
        .collect()
}

#[test]
fn pca_recovers_points_in_a_plane() {
    let rows = planar(40);
    let p = Pca::fit(&rows).unwrap();
    for r in &rows {
        let back = p.reconstruct(p.project(r));
        let err: f64 = back.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
    }
    assert!(p.variances[0] >= p.variances[1]);
    for a in &p.axes {
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn pca_axes_are_orthonormal(seed in 0u64..500) {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..4).map(|j| ((seed + 1) as f64 * 0.37 * (i * 4 + j + 1) as f64).sin()).collect())
            .collect();
        let p = Pca::fit(&rows).unwrap();
        let dot: f64 = p.axes[0].iter().zip(&p.axes[1]).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() < 1e-9);
        prop_assert!(p.variances[0] + 1e-12 >= p.variances[1]);
    }
}

#[test]
fn pca_needs_two_points_and_two_dimensions() {
    assert!(matches!(Pca::fit(&[vec![1.0, 2.0]]), Err(Error::Insufficient(_))));
    assert!(Pca::fit(&[vec![1.0], vec![2.0]]).is_err());
}

#[test]
fn separability_orders_clean_and_mixed_clusters() {
    let tight = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
    let loose = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![0.1, 0.0], vec![5.1, 5.0]];
    let labels = [0, 0, 1, 1];
    assert!(separability(&tight, &labels).unwrap() > 100.0 * separability(&loose, &labels).unwrap());
    assert!(separability(&tight, &[0, 0, 0, 0]).is_err());
}

fn embeddings_of(variant: Variant, tuned: bool) -> EmbeddingExport {
    let model = small_model();
    let vocab = Vocabulary::standard();
    let classes = &small_classes()[..8];
    let cfg = PromptConfig::for_model(variant, model.config.layers);
    let (mut bank, _) = init_prompts(&cfg, &model.config, &model.backbone.text.token_embed, &vocab, 1).unwrap();
    if tuned {
        let train = make_dataset(classes, 8, &Style::SHIFTED, &vocab, 40).unwrap();
        let task = TuneTask::from_dataset(&train, &train.class_ids()).unwrap();
        bank = prompt_tune(model, bank, &cfg, &TuneConfig::default(), &vocab, &task, None).unwrap().bank;
    }
    let test = make_dataset(classes, 10, &Style::SHIFTED, &vocab, 41).unwrap();
    let clf = PromptedClassifier { model, bank: &bank, cfg: &cfg, vocab: &vocab };
    let idx: Vec<usize> = (0..test.len()).collect();
    export_embeddings(&clf, &test, &idx, true, std::io::sink()).unwrap()
}

#[test]
#[ignore = "measured false on this corpus: tuned coupled prompts leave image clusters no tighter (ratio 1.15 vs 1.64 unprompted)"]
fn tuned_coupled_prompts_separate_classes_better() {
    let none = embeddings_of(Variant::None, false).separability.unwrap();
    let maple = embeddings_of(Variant::Maple, true).separability.unwrap();
    println!("between/within ratio: none {none:.4}, maple {maple:.4}");
    assert!(maple > none);
}

#[test]
fn csv_has_one_row_per_sample() {
    let model = small_model();
    let vocab = Vocabulary::standard();
    let ds = held_out(3, 5);
    let cfg = PromptConfig::for_model(Variant::None, model.config.layers);
    let bank = PromptBank::empty();
    let clf = PromptedClassifier { model, bank: &bank, cfg: &cfg, vocab: &vocab };
    let idx: Vec<usize> = (0..ds.len()).step_by(2).collect();
    let mut out = Vec::new();
    let e = export_embeddings(&clf, &ds, &idx, true, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), idx.len() + 1);
    let d = model.config.d_vl;
    assert_eq!(lines[0].split(',').count(), 2 + d + 2);
    assert!(lines[0].ends_with("pc1,pc2"));
    for (line, &i) in lines[1..].iter().zip(&idx) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert_eq!(cols[1], ds.samples[i].class.to_string());
        let v: f32 = cols[2].parse().unwrap();
        assert_eq!(v, e.embeddings.row(idx.iter().position(|&k| k == i).unwrap())[0]);
    }
    let mut plain = Vec::new();
    export_embeddings(&clf, &ds, &idx, false, &mut plain).unwrap();
    assert_eq!(String::from_utf8(plain).unwrap().lines().next().unwrap().split(',').count(), 2 + d);
    assert!(export_embeddings(&clf, &ds, &[], false, std::io::sink()).is_err());
    assert!(export_embeddings(&clf, &ds, &[ds.len()], false, std::io::sink()).is_err());
}
