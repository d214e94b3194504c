//! Caption metrics and PG+ against the naive oracles, plus accuracy rules.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tab_core::metrics::{
    accuracy_of, argmax_pixel, bleu4, boxes_at, corpus_bleu4, judge, pg, pg_plus, pg_plus_at, rouge_l, upscale_bicubic,
    upscale_nearest, BleuStats, Heatmap, PgSample,
};
use tab_core::synthdata::{generate_pair, BBox, ChangeKind, SceneParams};

use common::{oracles, pg_fixture};

const WORDS: [&str; 7] = ["the", "red", "square", "has", "been", "added", "gone"];

fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(1..=9);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn random_case(rng: &mut ChaCha8Rng) -> (String, Vec<String>) {
    let refs = rng.random_range(1..=4);
    (random_sentence(rng), (0..refs).map(|_| random_sentence(rng)).collect())
}

#[test]
fn bleu_and_rouge_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let (cand, refs) = random_case(&mut rng);
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        let (b, bo) = (bleu4(&cand, &refs), oracles::bleu4(&cand, &refs));
        assert!((b - bo).abs() < 1e-9, "{cand:?} {refs:?}: {b} vs {bo}");
        let (r, ro) = (rouge_l(&cand, &refs), oracles::rouge_l(&cand, &refs));
        assert!((r - ro).abs() < 1e-9, "{cand:?} {refs:?}: {r} vs {ro}");
    }
}

#[test]
fn caption_metric_worked_values() {
    let refs = ["the red square has been added"];
    assert!((bleu4(refs[0], &refs) - 1.0).abs() < 1e-12);
    assert!((rouge_l(refs[0], &refs) - 1.0).abs() < 1e-12);
    assert_eq!(bleu4("blue", &refs), 0.0);
    assert_eq!(rouge_l("blue", &refs), 0.0);
    // 3 of 6 reference words in order: P = 1, R = 1/2
    let want = 2.44 * 0.5 / (0.5 + 1.44);
    assert!((rouge_l("the red square", &refs) - want).abs() < 1e-12);
}

#[test]
fn corpus_bleu_pools_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases: Vec<(String, Vec<String>)> = (0..20).map(|_| random_case(&mut rng)).collect();
    let mut pooled = BleuStats::default();
    for (c, r) in &cases {
        pooled.add(&BleuStats::of(c, &r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    assert_eq!(corpus_bleu4(&cases), pooled.score());
    let single = vec![cases[0].clone()];
    let refs: Vec<&str> = cases[0].1.iter().map(String::as_str).collect();
    assert_eq!(corpus_bleu4(&single), bleu4(&cases[0].0, &refs));
}

fn fixture_samples() -> (Vec<PgSample>, Vec<(Heatmap, Option<BBox>)>) {
    let lib: Vec<PgSample> = pg_fixture()
        .into_iter()
        .map(|(v, gt)| PgSample { map: upscale_nearest(&v, 8, 8).unwrap(), gt })
        .collect();
    let oracle = lib.iter().map(|s| (s.map.clone(), s.gt)).collect();
    (lib, oracle)
}

#[test]
fn pg_plus_matches_exhaustive_sweep_on_the_fixture() {
    let (lib, oracle) = fixture_samples();
    for k in 0..20 {
        let t = k as f64 / 20.0;
        let r = pg_plus_at(&lib, t).unwrap();
        assert_eq!((r.change, r.no_change, r.mean), oracles::pg_plus_at(&oracle, t), "t = {t}");
    }
    let r = pg_plus(&lib, &lib).unwrap();
    let (t, c, n, m) = oracles::pg_plus(&oracle, &oracle);
    assert_eq!((r.t, r.change, r.no_change, r.mean), (t, c, n, m));
    // 0.30, 0.35 and 0.40 tie; the lowest wins
    assert_eq!(r.t, 0.3);
    assert_eq!(r.no_change, Some(100.0));
    assert!((r.change.unwrap() - 200.0 / 3.0).abs() < 1e-12);
    // a map value equal to the threshold survives thresholding
    assert!(!tab_core::metrics::hit_at(&lib[4], 0.25));
    assert!(tab_core::metrics::hit_at(&lib[4], 0.3));
}

#[test]
fn pg_plus_threshold_comes_from_validation() {
    let (lib, _) = fixture_samples();
    // validation made only of the all-zero no-change map prefers t = 0
    let val = vec![lib[3].clone(), lib[2].clone()];
    let r = pg_plus(&val, &lib).unwrap();
    assert_eq!(r.t, 0.0);
    assert_eq!(r.change, Some(100.0));
    let only_none = vec![lib[3].clone()];
    let r = pg_plus(&only_none, &only_none).unwrap();
    assert_eq!((r.change, r.no_change, r.mean), (None, Some(100.0), 100.0));
    assert!(pg_plus(&[], &lib).is_err());
}

#[test]
fn random_maps_agree_with_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let samples: Vec<(Heatmap, Option<BBox>)> = (0..6)
            .map(|_| {
                let v: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
                let map = upscale_bicubic(&v, 16, 16).unwrap();
                let gt = rng.random_bool(0.5).then(|| {
                    let (x0, y0) = (rng.random_range(0..14), rng.random_range(0..14));
                    BBox { x0, y0, x1: x0 + 2, y1: y0 + 2 }
                });
                (map, gt)
            })
            .collect();
        let lib: Vec<PgSample> = samples.iter().map(|(m, g)| PgSample { map: m.clone(), gt: *g }).collect();
        let r = pg_plus(&lib, &lib).unwrap();
        let (t, c, n, m) = oracles::pg_plus(&samples, &samples);
        assert_eq!((r.t, r.change, r.no_change, r.mean), (t, c, n, m));
    }
}

#[test]
fn bicubic_spreads_mass_that_nearest_keeps_inside_the_patch() {
    // one hot patch in a 4×4 grid; the box covers the neighbouring patch only
    let mut v = vec![0.0; 16];
    v[5] = 1.0;
    let gt = BBox { x0: 8, y0: 4, x1: 12, y1: 8 };
    let near = upscale_nearest(&v, 16, 16).unwrap();
    let cubic = upscale_bicubic(&v, 16, 16).unwrap();
    assert_eq!(near.upsampled.iter().filter(|&&x| x > 0.0).count(), 16);
    assert!(cubic.upsampled.iter().filter(|&&x| x > 1e-9).count() > 16);
    let hits = |m: &Heatmap| (1..20).filter(|&k| boxes_at(m, k as f64 / 20.0).iter().any(|b| b.intersects(&gt))).count();
    assert_eq!(hits(&near), 0);
    assert!(hits(&cubic) > 0);
    // the smooth map has overshoot lobes below zero, nearest never leaves the source range
    assert!(cubic.upsampled.iter().any(|&x| x < 0.0));
    assert!(near.upsampled.iter().all(|&x| x == 0.0 || x == 1.0));
}

#[test]
fn pointing_game_ties_go_to_the_first_pixel() {
    let map = upscale_nearest(&[0.5, 0.5, 0.0, 0.0], 4, 4).unwrap();
    assert_eq!(argmax_pixel(&map), (0, 0));
    let inside = PgSample { map: map.clone(), gt: Some(BBox { x0: 0, y0: 0, x1: 1, y1: 1 }) };
    let beside = PgSample { map, gt: Some(BBox { x0: 2, y0: 0, x1: 4, y1: 2 }) };
    assert_eq!(pg(&[inside, beside]), Some(50.0));
    assert_eq!(pg(&[]), None);
}

#[test]
fn accuracy_reads_template_captions() {
    let params = SceneParams::default();
    let add = generate_pair(0, 3, ChangeKind::Add, &params).unwrap();
    let none = generate_pair(1, 4, ChangeKind::None, &params).unwrap();
    let name = add.change.object().unwrap().name();
    let right = judge(&format!("the {name} has appeared"), &add);
    assert!(right.is_change_pair && right.class_hit && right.object_hit && right.correct());
    let wrong_object = judge("the purple-ish thing has appeared", &add);
    assert!(!wrong_object.object_hit);
    let said_none = judge("there is no change", &add);
    assert!(!said_none.class_hit && !said_none.correct());
    let quiet = judge("nothing has changed", &none);
    assert!(!quiet.is_change_pair && quiet.class_hit && quiet.correct());
    let acc = accuracy_of(&[right, said_none, quiet]);
    assert_eq!(acc.change, Some(50.0));
    assert_eq!(acc.no_change, Some(100.0));
    assert_eq!(acc.object, Some(50.0));
}
