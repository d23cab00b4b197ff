use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use stainseg::io::write_f32m;
use stainseg::predictor::PredictorHandle;
use stainseg::stain::{build_reference_profile, normalize_to_reference};
use stainseg::synth::{self, StainStyle, StainThresholdPredictor};
use stainseg::tta::{
    crop_map, crop_rgb, ensemble, ensemble_values, pad_white, run_ttsn, ChannelLayout, DropPolicy, EnsembleSpec,
    MorphTta, PadPolicy, VariantId,
};
use stainseg::{FloatMap, NormalizationParams, Orientation, ReferenceProfile, RgbImage};

fn profiles(n: usize) -> Vec<ReferenceProfile> {
    let params = NormalizationParams::default();
    (0..n)
        .map(|k| {
            let scene = synth::nuclei_scene(200 + k as u64, 48, &StainStyle::organ_variant(k));
            build_reference_profile(&scene.image, format!("ref{k}"), &params).unwrap()
        })
        .collect()
}

fn random_maps<R: Rng>(rng: &mut R, spec: &EnsembleSpec, w: usize, h: usize) -> Vec<(VariantId, FloatMap)> {
    spec.variant_ids()
        .into_iter()
        .map(|id| {
            let data = (0..w * h * 2).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            (id, FloatMap::new(w, h, 2, data).unwrap())
        })
        .collect()
}

#[test]
fn single_reference_weights_are_fifty_over_fifty_seven() {
    let spec = EnsembleSpec::new(profiles(1));
    let w = spec.normalized_weights();
    assert!((w[0].1 - 50.0 / 57.14).abs() < 1e-12);
    assert!((w[1].1 - 7.14 / 57.14).abs() < 1e-12);
    let maps = vec![
        (VariantId::ORIGINAL, FloatMap::filled(2, 2, 1, 1.0).unwrap()),
        (w[1].0, FloatMap::filled(2, 2, 1, 0.0).unwrap()),
    ];
    let (_, values) = ensemble_values(&maps, &spec).unwrap();
    for v in values {
        assert!((v - 50.0 / 57.14).abs() < 1e-12);
    }
}

#[test]
fn ensemble_matches_weighted_mean_oracle() {
    let mut rng = synth::rng(5);
    for (refs, morph) in [(0, false), (1, false), (7, false), (3, true)] {
        let spec = EnsembleSpec::new(profiles(refs)).with_morphological_tta(MorphTta { rot90: morph, hflip: morph });
        let maps = random_maps(&mut rng, &spec, 9, 7);
        let (_, values) = ensemble_values(&maps, &spec).unwrap();
        let per_orientation = if morph { 4.0 } else { 1.0 };
        let total = 50.0 + 7.14 * refs as f64;
        for (i, v) in values.iter().enumerate() {
            let want: f64 = maps
                .iter()
                .map(|(id, m)| {
                    let w = if id.stain == 0 { 50.0 } else { 7.14 } / per_orientation;
                    w * f64::from(m.data()[i])
                })
                .sum::<f64>()
                / total;
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            let lo = maps.iter().map(|(_, m)| f64::from(m.data()[i])).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|(_, m)| f64::from(m.data()[i])).fold(f64::NEG_INFINITY, f64::max);
            assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }
}

#[test]
fn ensemble_rejects_bad_input() {
    let spec = EnsembleSpec::new(profiles(1));
    assert!(ensemble(&[], &spec).is_err());
    let a = FloatMap::filled(3, 3, 2, 0.0).unwrap();
    let b = FloatMap::filled(3, 4, 2, 0.0).unwrap();
    let second = spec.variant_ids()[1];
    assert!(ensemble(&[(VariantId::ORIGINAL, a.clone()), (second, b)], &spec).is_err());
    assert!(ensemble(&[(VariantId::ORIGINAL, a.clone()), (VariantId::ORIGINAL, a.clone())], &spec).is_err());
    let unknown = VariantId { stain: 5, orientation: Orientation::Identity };
    assert!(ensemble(&[(unknown, a)], &spec).is_err());
    let bad = EnsembleSpec { weight_original: 0.0, ..EnsembleSpec::baseline() };
    assert!(bad.validate().is_err());
}

#[test]
fn padding_sizes_and_crop_round_trip() {
    assert_eq!(PadPolicy::Auto.side(1000, 1000), Some(1024));
    assert_eq!(PadPolicy::Auto.side(1032, 808), Some(1056));
    assert_eq!(PadPolicy::Auto.side(1024, 1), Some(1024));
    assert_eq!(PadPolicy::None.side(5, 5), None);
    assert_eq!(PadPolicy::Fixed(64).side(5, 5), Some(64));
    for s in ["none", "auto", "640"] {
        assert_eq!(s.parse::<PadPolicy>().unwrap().to_string(), s);
    }
    assert!("0".parse::<PadPolicy>().is_err());

    let mut rng = synth::rng(8);
    let (w, h) = (37, 23);
    let img = RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
    let (padded, record) = pad_white(&img, 64, 64).unwrap();
    assert_eq!((padded.width(), padded.height()), (64, 64));
    assert_eq!(crop_rgb(&padded, record), img);
    for y in 0..64 {
        for x in 0..64 {
            if x >= w || y >= h {
                assert_eq!(padded.pixel(x, y), [255, 255, 255]);
            }
        }
    }
    let map = FloatMap::new(64, 64, 2, (0..64 * 64 * 2).map(|v| v as f32).collect()).unwrap();
    let cropped = crop_map(&map, record);
    assert_eq!(cropped.get(w - 1, h - 1, 1), map.get(w - 1, h - 1, 1));
    assert!(pad_white(&img, 30, 64).is_err());
}

#[test]
fn map_directory_predictions_follow_the_file_oracle() {
    let refs = profiles(2);
    let spec = EnsembleSpec::new(refs);
    let dir = tempfile::tempdir().unwrap();
    let img = synth::nuclei_scene(1, 20, &StainStyle::shifted()).image;
    let mut rng = synth::rng(12);
    let mut written = Vec::new();
    for id in spec.variant_ids() {
        let data: Vec<f32> = (0..20 * 20 * 2).map(|_| rng.random()).collect();
        let map = FloatMap::new(20, 20, 2, data).unwrap();
        write_f32m(&PredictorHandle::map_file(dir.path(), "tile", &id.to_string()), &map).unwrap();
        written.push((id, map));
    }
    let handle = PredictorHandle::map_directory(dir.path());
    let params = NormalizationParams::default();
    let out = run_ttsn("tile", &img, &handle, ChannelLayout::default(), &spec, &params, PadPolicy::None, DropPolicy::Fatal)
        .unwrap();
    assert_eq!(out.used.len(), 3);
    for y in 0..20 {
        for x in 0..20 {
            let want = |c| {
                let s: f64 = written.iter().map(|(id, m)| spec.weight(*id) * f64::from(m.get(x, y, c))).sum();
                (s / (50.0 + 2.0 * 7.14)) as f32
            };
            assert_eq!(out.probability.get(x, y, 0), want(0));
            assert_eq!(out.distance.get(x, y, 0), want(1));
        }
    }
    // A missing variant is fatal unless dropping is allowed.
    std::fs::remove_file(PredictorHandle::map_file(dir.path(), "tile", "v2")).unwrap();
    assert!(run_ttsn("tile", &img, &handle, ChannelLayout::default(), &spec, &params, PadPolicy::None, DropPolicy::Fatal)
        .is_err());
    let out = run_ttsn(
        "tile",
        &img,
        &handle,
        ChannelLayout::default(),
        &spec,
        &params,
        PadPolicy::None,
        DropPolicy::DropAndRenormalize,
    )
    .unwrap();
    assert_eq!(out.dropped, vec!["v2".to_string()]);
    let s = spec.weight(written[0].0) * f64::from(written[0].1.get(3, 4, 0))
        + spec.weight(written[1].0) * f64::from(written[1].1.get(3, 4, 0));
    assert_eq!(out.probability.get(3, 4, 0), (s / 57.14) as f32);
}

#[test]
fn variants_are_the_normalized_images() {
    let refs = profiles(2);
    let spec = EnsembleSpec::new(refs.clone());
    let img = synth::nuclei_scene(4, 32, &StainStyle::shifted()).image;
    let params = NormalizationParams::default();
    let seen = std::sync::Mutex::new(Vec::new());
    let recorder = |x: &RgbImage| {
        seen.lock().unwrap().push(x.clone());
        FloatMap::filled(x.width(), x.height(), 2, 0.0).unwrap()
    };
    run_ttsn("t", &img, &recorder, ChannelLayout::default(), &spec, &params, PadPolicy::None, DropPolicy::Fatal).unwrap();
    let mut got = seen.into_inner().unwrap();
    let mut want: Vec<RgbImage> = std::iter::once(img.clone())
        .chain(refs.iter().map(|r| normalize_to_reference(&img, r, &params).unwrap()))
        .collect();
    let key = |i: &RgbImage| i.data().to_vec();
    got.sort_by_key(key);
    want.sort_by_key(key);
    assert_eq!(got, want);
}

#[test]
fn orientation_round_trip_and_equivariance() {
    let mut rng = synth::rng(21);
    let img = RgbImage::new(7, 5, (0..7 * 5 * 3).map(|_| rng.random()).collect()).unwrap();
    let map = FloatMap::new(7, 5, 2, (0..70).map(|v| v as f32).collect()).unwrap();
    for o in Orientation::ALL {
        assert_eq!(o.inverse().apply_rgb(&img.transformed(o)), img);
        assert_eq!(o.inverse().apply_map(&map.transformed(o)), map);
    }
    assert_eq!(img.transformed(Orientation::Rot90).pixel(0, 0), img.pixel(6, 0));

    // A pixelwise predictor commutes with every orientation, so morphological
    // TTA must leave its ensemble unchanged.
    let scene = synth::nuclei_scene(9, 48, &StainStyle::canonical());
    let predictor = StainThresholdPredictor::default();
    let pixelwise = |x: &RgbImage| {
        let full = predictor.predict_map(x);
        FloatMap::stack(&[&full.channel(0), &full.channel(0)]).unwrap()
    };
    let params = NormalizationParams::default();
    let plain = EnsembleSpec::new(profiles(1));
    let morph = plain.clone().with_morphological_tta(MorphTta { rot90: true, hflip: true });
    let run = |spec: &EnsembleSpec, pad| {
        run_ttsn("s", &scene.image, &pixelwise, ChannelLayout::default(), spec, &params, pad, DropPolicy::Fatal).unwrap()
    };
    for pad in [PadPolicy::None, PadPolicy::Fixed(64)] {
        let a = run(&plain, pad);
        let b = run(&morph, pad);
        assert_eq!(b.used.len(), 8);
        for (x, y) in a.probability.data().iter().zip(b.probability.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn input_order_never_changes_a_bit(seed in any::<u64>(), refs in 0usize..5, morph in any::<bool>()) {
        let spec = EnsembleSpec::new(vec![profiles(1).remove(0); refs])
            .with_morphological_tta(MorphTta { rot90: morph, hflip: false });
        let mut rng = synth::rng(seed);
        let maps = random_maps(&mut rng, &spec, 6, 5);
        let a = ensemble(&maps, &spec).unwrap();
        let mut shuffled = maps.clone();
        shuffled.shuffle(&mut rng);
        let b = ensemble(&shuffled, &spec).unwrap();
        let bits = |m: &FloatMap| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&a), bits(&b));
    }
}
