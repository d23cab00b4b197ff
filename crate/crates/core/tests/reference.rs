use rand::Rng;
use stainseg::reference::{contrast_score, rank_scores, select_references, AnnotatedImage, ContrastScore, SelectError};
use stainseg::synth::{self, StainStyle};
use stainseg::{InstanceLabelMap, RgbImage};

fn random_annotated<R: Rng>(rng: &mut R, id: &str, organ: &str) -> AnnotatedImage {
    let (w, h) = (rng.random_range(2..20), rng.random_range(2..20));
    let image = RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
    let mut labels: Vec<u32> = (0..w * h).map(|_| if rng.random_bool(0.3) { rng.random_range(1..9) } else { 0 }).collect();
    labels[0] = 0;
    labels[1] = 4;
    AnnotatedImage { id: id.into(), organ: organ.into(), image, mask: InstanceLabelMap::new(w, h, labels).unwrap() }
}

#[test]
fn contrast_is_the_gap_between_region_means() {
    let mut rng = synth::rng(17);
    for k in 0..300 {
        let a = random_annotated(&mut rng, &format!("i{k}"), "x");
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for y in 0..a.image.height() {
            for x in 0..a.image.width() {
                let [r, g, b] = a.image.pixel(x, y);
                let gray = (299.0 * r as f64 + 587.0 * g as f64 + 114.0 * b as f64) / 1000.0;
                if a.mask.get(x, y) > 0 { fg.push(gray) } else { bg.push(gray) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let s = contrast_score(&a).unwrap();
        assert!((s.mean_nuclei - mean(&fg)).abs() < 1e-9);
        assert!((s.mean_background - mean(&bg)).abs() < 1e-9);
        assert!((s.score - (mean(&bg) - mean(&fg)).abs()).abs() < 1e-9);
    }
}

#[test]
fn ranking_matches_a_sort_oracle() {
    let mut rng = synth::rng(4);
    for _ in 0..200 {
        let n = rng.random_range(1..25);
        let scores: Vec<ContrastScore> = (0..n)
            .map(|i| ContrastScore {
                id: format!("id{:02}", rng.random_range(0..40)) + &i.to_string(),
                organ: format!("o{}", rng.random_range(0..4)),
                mean_nuclei: 0.0,
                mean_background: 0.0,
                // Coarse values force ties.
                score: f64::from(rng.random_range(0..5u8)),
            })
            .collect();
        let k = rng.random_range(1..3);
        let mut organs: Vec<&str> = scores.iter().map(|s| s.organ.as_str()).collect();
        organs.sort();
        organs.dedup();
        let short = organs.iter().any(|o| scores.iter().filter(|s| s.organ == *o).count() < k);
        match rank_scores(&scores, k) {
            Err(SelectError::NotEnoughImages { .. }) => assert!(short),
            Err(e) => panic!("{e}"),
            Ok(ranked) => {
                assert!(!short);
                let mut want = Vec::new();
                for o in organs {
                    let mut group: Vec<&ContrastScore> = scores.iter().filter(|s| s.organ == o).collect();
                    group.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.id.cmp(&b.id)));
                    want.extend(group.into_iter().take(k).cloned());
                }
                assert_eq!(ranked, want);
            }
        }
    }
}

#[test]
fn selection_picks_the_crispest_tile_per_organ() {
    let mut set = Vec::new();
    for organ in 0..3 {
        for (k, h) in [0.4, 1.0, 0.7].into_iter().enumerate() {
            let style = StainStyle { nucleus_h: h, ..StainStyle::organ_variant(organ) };
            let scene = synth::nuclei_scene(10 * organ as u64 + k as u64, 48, &style);
            set.push(AnnotatedImage {
                id: format!("o{organ}-{k}"),
                organ: format!("organ{organ}"),
                image: scene.image,
                mask: scene.labels,
            });
        }
    }
    let picked = select_references(&set, 1).unwrap();
    assert_eq!(picked.iter().map(|(a, _)| a.id.as_str()).collect::<Vec<_>>(), ["o0-1", "o1-1", "o2-1"]);
    assert!(select_references(&set, 4).is_err());
}
