//! Invariants checked on generated inputs.

mod common;

use std::collections::BTreeSet;

use pairforge::aggregate::{gem_pool, max_pool, netvlad_forward, GemParams, NetVladParams};
use pairforge::annotate::{build_covisibility, positive_lists};
use pairforge::losses::{ranked_list_loss, triplet_loss, LossConfig, LossReport};
use pairforge::mining::{mine_batched, MiningConfig};
use pairforge::model::{
    decode_feature_map, encode_feature_map, FeatureMap, ImageId, ImageRecord, Observation, Point3D, PointId,
    Reconstruction, Scene, SceneId,
};
use pairforge::synth::{generate, SynthConfig};
use proptest::prelude::*;

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn loss_config() -> impl Strategy<Value = LossConfig> {
    (prop::bool::ANY, prop::bool::ANY)
        .prop_map(|(wide, nontrivial)| LossConfig::new(0.1, if wide { 1.35 } else { 0.9 }, nontrivial).unwrap())
}

fn rll_case() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, LossConfig)> {
    (2usize..8).prop_flat_map(|d| {
        (
            vector(d),
            prop::collection::vec(vector(d), 1..5),
            prop::collection::vec(vector(d), 1..6),
            loss_config(),
        )
    })
}

fn rll(q: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], cfg: &LossConfig) -> LossReport {
    let p: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
    let n: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
    ranked_list_loss(q, &p, &n, cfg).unwrap()
}

fn all_zero(grads: &[Vec<f64>]) -> bool {
    grads.iter().flatten().all(|&g| g == 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ranked_list_loss_is_nonnegative_and_zero_iff_flat((q, pos, neg, cfg) in rll_case()) {
        let r = rll(&q, &pos, &neg, &cfg);
        prop_assert!(r.value >= 0.0);
        prop_assert_eq!(r.value == 0.0, all_zero(&r.grads));
        prop_assert_eq!(r.value == 0.0, r.active_terms == 0);
        prop_assert!(r.active_terms <= r.total_terms);
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_zero_iff_flat(
        (a, p, n) in (2usize..8).prop_flat_map(|d| (vector(d), vector(d), vector(d))),
        cfg in loss_config(),
    ) {
        let r = triplet_loss(&a, &p, &n, &cfg).unwrap();
        prop_assert!(r.value >= 0.0);
        prop_assert_eq!(r.value == 0.0, all_zero(&r.grads));
    }

    #[test]
    fn small_step_against_gradient_does_not_increase_loss((q, pos, neg, cfg) in rll_case()) {
        let r = rll(&q, &pos, &neg, &cfg);
        prop_assume!(r.value > 0.0);
        let h = 1e-7;
        let step = |x: &[f64], g: &[f64]| x.iter().zip(g).map(|(a, b)| a - h * b).collect::<Vec<_>>();
        let q2 = step(&q, &r.grads[0]);
        let pos2: Vec<Vec<f64>> = pos.iter().zip(&r.grads[1..]).map(|(x, g)| step(x, g)).collect();
        let neg2: Vec<Vec<f64>> = neg.iter().zip(&r.grads[1 + pos.len()..]).map(|(x, g)| step(x, g)).collect();
        let after = rll(&q2, &pos2, &neg2, &cfg);
        prop_assert!(after.value <= r.value + 1e-12, "{} -> {}", r.value, after.value);
    }

    #[test]
    fn positive_order_violation_costs(d in 3usize..8, cfg in loss_config(), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = common::unit(&common::gaussian(&mut rng, d));
        let close = common::at_distance(&mut rng, &q, 0.1);
        let mid = common::at_distance(&mut rng, &q, 0.5);
        let far = common::at_distance(&mut rng, &q, 1.9);
        let ordered = rll(&q, &[close.clone(), mid.clone()], &[far.clone()], &cfg);
        let swapped = rll(&q, &[mid, close], &[far], &cfg);
        prop_assert!(ordered.value == 0.0);
        prop_assert!((swapped.value - 0.4 / 2.0).abs() < 1e-9, "{}", swapped.value);
    }
}

fn feature_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(0.01f64..2.0, c * h * w).prop_map(move |v| FeatureMap::new(c, h, w, v).unwrap())
    })
}

/// The same map with its spatial positions permuted.
fn permuted(map: &FeatureMap, order: &[usize]) -> FeatureMap {
    let mut values = Vec::with_capacity(map.values().len());
    for c in 0..map.channels() {
        let ch = map.channel(c);
        values.extend(order.iter().map(|&i| ch[i]));
    }
    FeatureMap::new(map.channels(), map.height(), map.width(), values).unwrap()
}

fn spatial_order(map: &FeatureMap, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..map.pixels()).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    order
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn gem_lies_between_average_and_max(map in feature_map(), p in 1.0f64..20.0) {
        let gem = gem_pool(&map, &GemParams::shared(p).unwrap()).unwrap();
        let max = max_pool(&map);
        for c in 0..map.channels() {
            let avg = map.channel(c).iter().sum::<f64>() / map.pixels() as f64;
            prop_assert!(gem[c] >= avg * (1.0 - 1e-12) && gem[c] <= max[c] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn pooling_ignores_spatial_order(map in feature_map(), seed in any::<u64>(), p in 1.0f64..8.0) {
        let shuffled = permuted(&map, &spatial_order(&map, seed));
        let params = GemParams::shared(p).unwrap();
        prop_assert!(close(&gem_pool(&map, &params).unwrap(), &gem_pool(&shuffled, &params).unwrap(), 1e-12));
        prop_assert_eq!(max_pool(&map), max_pool(&shuffled));
    }

    #[test]
    fn netvlad_is_unit_norm_with_stochastic_assignments(
        map in feature_map(),
        k in 1usize..5,
        sharpness in 0.1f64..200.0,
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..k).map(|_| common::gaussian(&mut rng, map.channels())).collect();
        let params = NetVladParams::from_centers(centers, sharpness).unwrap();
        let (out, cache) = netvlad_forward(&map, &params).unwrap();
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12 || norm == 0.0);
        for i in 0..map.pixels() {
            let row = cache.assignment(i);
            prop_assert!(row.iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shuffled = permuted(&map, &spatial_order(&map, seed));
        prop_assert!(close(&out, &netvlad_forward(&shuffled, &params).unwrap().0, 1e-12));
    }

    #[test]
    fn feature_maps_round_trip(c in 1usize..9, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..c * h * w).map(|_| f64::from(rng.random::<f32>() * 100.0 - 50.0)).collect();
        let map = FeatureMap::new(c, h, w, values).unwrap();
        prop_assert_eq!(decode_feature_map(&encode_feature_map(&map)).unwrap(), map);
    }
}

fn reconstruction() -> impl Strategy<Value = Reconstruction> {
    (1u32..4, 2u32..24).prop_flat_map(|(scenes, images)| {
        let tracks = prop::collection::vec(prop::collection::btree_set(0..images, 2..6usize), 0..120);
        let scene_of = prop::collection::vec(0..scenes, images as usize);
        (Just(scenes), scene_of, tracks).prop_map(|(scenes, scene_of, tracks)| {
            let scenes = (0..scenes).map(|s| Scene { id: SceneId(s), name: format!("s{s}") }).collect();
            let images = scene_of
                .iter()
                .enumerate()
                .map(|(i, &s)| ImageRecord {
                    id: ImageId(i as u32),
                    scene: SceneId(s),
                    name: format!("i{i}"),
                    width_px: 100,
                    height_px: 100,
                })
                .collect();
            let points = tracks
                .into_iter()
                .enumerate()
                .map(|(p, t)| Point3D {
                    id: PointId(p as u64),
                    position: [0.0; 3],
                    track: t.into_iter().map(|i| Observation { image: ImageId(i), keypoint: 0 }).collect(),
                })
                .collect();
            Reconstruction::new(scenes, images, points).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covisibility_is_symmetric_bounded_and_track_consistent(r in reconstruction()) {
        let table = build_covisibility(&r);
        let scene = r.scene_map();
        let mut expected_mass = 0u64;
        for p in r.points() {
            for (i, a) in p.track.iter().enumerate() {
                expected_mass += p.track[i + 1..].iter().filter(|b| scene[&b.image] == scene[&a.image]).count() as u64;
            }
        }
        let mass: u64 = table.iter().map(|(_, n)| u64::from(n)).sum();
        prop_assert_eq!(mass, expected_mass);
        for (pair, n) in table.iter() {
            prop_assert_eq!(table.gs(pair.lo(), pair.hi()), table.gs(pair.hi(), pair.lo()));
            prop_assert!(n <= table.observed_by(pair.lo()).min(table.observed_by(pair.hi())));
            prop_assert_eq!(scene[&pair.lo()], scene[&pair.hi()]);
        }
    }

    #[test]
    fn positive_lists_are_sorted_and_above_threshold(r in reconstruction(), eps in 0u32..4) {
        let table = build_covisibility(&r);
        let lists = positive_lists(&table, &r, eps);
        for img in r.images() {
            let list = lists.get(img.id);
            for w in list.windows(2) {
                prop_assert!(w[0].gs > w[1].gs || (w[0].gs == w[1].gs && w[0].image < w[1].image));
            }
            let got: BTreeSet<ImageId> = list.iter().map(|p| p.image).collect();
            let expected: BTreeSet<ImageId> = r
                .images()
                .iter()
                .filter(|o| o.id != img.id && o.scene == img.scene && table.gs(img.id, o.id) > eps)
                .map(|o| o.id)
                .collect();
            prop_assert_eq!(got, expected);
            prop_assert!(list.iter().all(|p| p.gs == table.gs(img.id, p.image)));
        }
    }
}

#[test]
fn mining_is_reproducible_per_seed() {
    let out = generate(&SynthConfig::default()).unwrap();
    let lists = positive_lists(&build_covisibility(&out.reconstruction), &out.reconstruction, 32);
    let cfg = MiningConfig { t: 50, seed: 11, ..MiningConfig::default() };
    let a = mine_batched(&lists, &cfg).unwrap();
    assert_eq!(a, mine_batched(&lists, &cfg).unwrap());
    let other = mine_batched(&lists, &MiningConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a, other);
}
