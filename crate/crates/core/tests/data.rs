use maple_lab::data::*;
use maple_lab::{Error, Tensor};
use proptest::prelude::*;

fn class(id: u32, color: &str, shape: Shape) -> ConceptClass {
    ConceptClass::new(id, color, shape).unwrap()
}

fn channel_means(img: &Tensor<f32>) -> [f64; 3] {
    let mut m = [0.0; 3];
    for px in img.data().chunks(3) {
        for c in 0..3 {
            m[c] += px[c] as f64;
        }
    }
    let n = (img.len() / 3) as f64;
    m.map(|v| v / n)
}

#[test]
fn rendering_is_deterministic() {
    let vocab = Vocabulary::standard();
    let c = class(0, "red", Shape::Circle);
    let a = render(&c, &Style::SHIFTED, &vocab, 42).unwrap();
    let b = render(&c, &Style::SHIFTED, &vocab, 42).unwrap();
    assert!(a.image.bitwise_eq(&b.image));
    assert_eq!(a.caption, b.caption);
    let other = render(&c, &Style::SHIFTED, &vocab, 43).unwrap();
    assert!(!a.image.bitwise_eq(&other.image));
}

#[test]
fn color_shows_up_in_channel_statistics() {
    let vocab = Vocabulary::standard();
    let red = class(0, "red", Shape::Square);
    let blue = class(1, "blue", Shape::Square);
    // same seed: same geometry, only the fill color differs
    let r = channel_means(&render(&red, &Style::CLEAN, &vocab, 5).unwrap().image);
    let b = channel_means(&render(&blue, &Style::CLEAN, &vocab, 5).unwrap().image);
    assert!(r[0] > b[0] + 0.05, "{r:?} {b:?}");
    assert!(b[2] > r[2] + 0.05, "{r:?} {b:?}");
}

#[test]
fn captions_follow_the_template() {
    let vocab = Vocabulary::standard();
    let s = render(&class(3, "green", Shape::Ring), &Style::CLEAN, &vocab, 1).unwrap();
    assert_eq!(vocab.detokenize(&s.caption).unwrap(), "a photo of a green ring");
    assert_eq!(s.class, 3);
    assert_eq!(s.image.shape(), &[IMAGE_SIZE, IMAGE_SIZE, 3]);
}

#[test]
fn class_sets_are_well_formed() {
    let world = world_classes();
    assert_eq!(world.len(), 60);
    let bench = benchmark_classes();
    assert_eq!(bench.len(), 20);
    let transfer = transfer_classes();
    let vocab = Vocabulary::standard();
    for set in [&world, &bench, &transfer] {
        let mut ids: Vec<u32> = set.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), set.len());
        for c in set.iter() {
            vocab.tokenize(&c.name).unwrap();
        }
    }
    // transfer target shares no class name with the benchmark
    for t in &transfer {
        assert!(bench.iter().all(|b| b.name != t.name), "{}", t.name);
    }
}

#[test]
fn few_shot_split_arithmetic() {
    let vocab = Vocabulary::standard();
    let classes: Vec<ConceptClass> = world_classes().into_iter().take(10).collect();
    let ds = make_dataset(&classes, 20, &Style::CLEAN, &vocab, 0).unwrap();
    let ids: Vec<u32> = classes.iter().map(|c| c.id).collect();
    let spec = SplitSpec::random(&ids, 6, 16, 7).unwrap();
    assert_eq!((spec.base.len(), spec.novel.len()), (6, 4));
    let s = split(&ds, &spec).unwrap();
    assert_eq!(s.base_train.len(), 96);
    assert_eq!(s.base_test.len(), 6 * 4);
    assert_eq!(s.novel_test.len(), 4 * 20);
    for &c in &spec.base {
        let n = s.base_train.iter().filter(|&&i| ds.samples[i].class == c).count();
        assert_eq!(n, 16);
    }
    for i in &s.base_train {
        assert!(!s.base_test.contains(i) && !s.novel_test.contains(i));
    }
    for i in &s.novel_test {
        assert!(spec.novel.contains(&ds.samples[*i].class));
    }
    assert_eq!(split(&ds, &spec).unwrap(), s);
    assert_eq!(SplitSpec::random(&ids, 6, 16, 7).unwrap(), spec);
}

#[test]
fn split_errors() {
    let vocab = Vocabulary::standard();
    let classes: Vec<ConceptClass> = world_classes().into_iter().take(4).collect();
    let ds = make_dataset(&classes, 5, &Style::CLEAN, &vocab, 0).unwrap();
    let ids: Vec<u32> = classes.iter().map(|c| c.id).collect();
    let spec = SplitSpec::random(&ids, 2, 16, 0).unwrap();
    assert!(matches!(split(&ds, &spec), Err(Error::Insufficient(_))));
    assert!(matches!(SplitSpec::random(&ids, 4, 1, 0), Err(Error::Parameter(_))));
    let overlap = SplitSpec {
        base: vec![ids[0]],
        novel: vec![ids[0]],
        shots: 1,
        seed: 0,
    };
    assert!(matches!(split(&ds, &overlap), Err(Error::Parameter(_))));
}

#[test]
fn zero_noise_is_identity() {
    let vocab = Vocabulary::standard();
    let s = render(&class(0, "red", Shape::Circle), &Style::SHIFTED, &vocab, 9).unwrap();
    let t = domain_shift(&s, &Shift::GaussianNoise { sigma: 0.0, seed: 3 }, 0).unwrap();
    assert!(t.image.bitwise_eq(&s.image));
    assert_eq!(domain_shift(&s, &Shift::Identity, 0).unwrap(), s);
}

#[test]
fn full_hue_turn_is_identity() {
    let vocab = Vocabulary::standard();
    let s = render(&class(0, "orange", Shape::Cross), &Style::SHIFTED, &vocab, 2).unwrap();
    let t = domain_shift(&s, &Shift::HueRotate { degrees: 360.0 }, 0).unwrap();
    assert!(t.image.max_abs_diff(&s.image) <= 1e-6);
}

#[test]
fn shifts_preserve_labels_and_pixel_range() {
    let vocab = Vocabulary::standard();
    let s = render(&class(4, "blue", Shape::Diamond), &Style::SHIFTED, &vocab, 2).unwrap();
    for shift in [
        Shift::GaussianNoise { sigma: 0.5, seed: 1 },
        Shift::HueRotate { degrees: 120.0 },
        Shift::Sketch,
        Shift::Blur { radius: 2 },
    ] {
        let t = domain_shift(&s, &shift, 7).unwrap();
        assert_eq!((t.class, &t.caption), (s.class, &s.caption));
        assert!(t.image.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", shift.label());
        assert!(!t.image.bitwise_eq(&s.image), "{}", shift.label());
        assert_eq!(domain_shift(&s, &shift, 7).unwrap(), t);
    }
}

#[test]
fn out_of_range_shifts_are_rejected() {
    let vocab = Vocabulary::standard();
    let s = render(&class(0, "red", Shape::Circle), &Style::CLEAN, &vocab, 0).unwrap();
    for bad in [
        Shift::GaussianNoise { sigma: 1.5, seed: 0 },
        Shift::GaussianNoise { sigma: -0.1, seed: 0 },
        Shift::HueRotate { degrees: 400.0 },
        Shift::Blur { radius: 5 },
    ] {
        assert!(matches!(domain_shift(&s, &bad, 0), Err(Error::Parameter(_))));
    }
}

#[test]
fn tokenizer_contract() {
    let vocab = Vocabulary::standard();
    let text = "a photo of a purple triangle";
    assert_eq!(vocab.detokenize(&vocab.tokenize(text).unwrap()).unwrap(), text);
    assert!(matches!(vocab.tokenize("a photo of a dog"), Err(Error::Vocabulary(_))));
    assert_eq!(Vocabulary::standard(), vocab);
    assert_eq!(vocab.id(PAD_WORD).unwrap(), PAD);
    assert_eq!(Vocabulary::template_len(), 4);
}

fn small_dataset() -> Dataset {
    let vocab = Vocabulary::standard();
    make_dataset(&benchmark_classes()[..3], 2, &Style::SHIFTED, &vocab, 11).unwrap()
}

#[test]
fn dataset_file_round_trip_is_byte_identical() {
    let ds = small_dataset();
    let mut first = Vec::new();
    write_dataset(&mut first, &ds).unwrap();
    let back = read_dataset(&mut first.as_slice()).unwrap();
    assert_eq!(back, ds);
    let mut second = Vec::new();
    write_dataset(&mut second, &back).unwrap();
    assert_eq!(first, second);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.mpds");
    save_dataset(&path, &ds).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
    assert_eq!(load_dataset(&path).unwrap(), ds);
}

#[test]
fn dataset_header_layout() {
    let ds = small_dataset();
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &ds).unwrap();
    assert_eq!(&bytes[..4], b"MPDS");
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    assert_eq!([word(0), word(1), word(2), word(3), word(4)], [1, 6, 32, 32, 3]);
    let first = &ds.samples[0];
    assert_eq!(word(5), first.class);
    assert_eq!(word(6) as usize, first.caption.len());
    let per_sample = 8 + 4 * first.caption.len() + 4 * 32 * 32 * 3;
    assert_eq!(bytes.len(), 24 + 6 * per_sample);
}

#[test]
fn corrupted_dataset_files_are_rejected() {
    let ds = small_dataset();
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &ds).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_dataset(&mut bad_magic.as_slice()), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        read_dataset(&mut bad_version.as_slice()),
        Err(Error::Version { found: 9, expected: 1 })
    ));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(read_dataset(&mut &truncated[..]), Err(Error::Format(_))));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(read_dataset(&mut trailing.as_slice()), Err(Error::Format(_))));

    assert!(matches!(read_dataset(&mut &b"MP"[..]), Err(Error::Format(_))));
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 32,
        rng_seed: proptest::test_runner::RngSeed::Fixed(3),
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn rendered_pixels_stay_in_range(seed in any::<u64>(), which in 0usize..60, shifted in any::<bool>()) {
        let vocab = Vocabulary::standard();
        let c = &world_classes()[which];
        let style = if shifted { Style::SHIFTED } else { Style::CLEAN };
        let s = render(c, &style, &vocab, seed).unwrap();
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn splits_are_balanced_and_disjoint(seed in any::<u64>(), n_base in 1usize..6, shots in 1usize..5) {
        let vocab = Vocabulary::standard();
        let classes: Vec<ConceptClass> = benchmark_classes().into_iter().take(6).collect();
        let ds = make_dataset(&classes, 5, &Style::CLEAN, &vocab, seed).unwrap();
        let ids: Vec<u32> = classes.iter().map(|c| c.id).collect();
        let spec = SplitSpec::random(&ids, n_base, shots, seed).unwrap();
        let s = split(&ds, &spec).unwrap();
        prop_assert_eq!(s.base_train.len(), n_base * shots);
        prop_assert_eq!(s.base_test.len(), n_base * (5 - shots));
        prop_assert_eq!(s.novel_test.len(), (6 - n_base) * 5);
        let mut all: Vec<usize> = s.base_train.iter().chain(&s.base_test).chain(&s.novel_test).copied().collect();
        all.sort_unstable();
        all.dedup();
        prop_assert_eq!(all.len(), ds.len());
    }
}
