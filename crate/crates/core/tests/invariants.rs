use anomseg::discovery::{dbscan, pca_reduce, pseudo_labels, tsne_affinities, tsne_kl};
use anomseg::evalmetrics::{auroc_mannwhitney, roc_pr_curves, EvalSet};
use anomseg::infostat::entropy;
use anomseg::segments::connected_components;
use anomseg::synthworld::{generate_split, load_split, save_scenes, WorldConfig};
use anomseg::tensorio::Split;
use anomseg::toynet::softmax_map;
use anomseg::{Grid, LabelMap};
use proptest::prelude::*;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (prop::collection::vec(0u8..6, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(levels, mut labels)| {
            labels[0] = true;
            labels[1] = false;
            (levels.into_iter().map(|l| l as f64 / 5.0).collect(), labels)
        })
    })
}

fn points(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_equals_mann_whitney((scores, labels) in labeled_scores()) {
        let set = EvalSet::new(scores, labels).unwrap();
        let curve = roc_pr_curves(&set).unwrap();
        prop_assert!((curve.auroc - auroc_mannwhitney(&set).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&curve.auprc));
    }

    #[test]
    fn full_rank_pca_preserves_distances(vectors in points(6..20, 4)) {
        let pca = pca_reduce(&vectors, 4).unwrap();
        for i in 0..vectors.len() {
            for j in 0..i {
                let before = dist(&vectors[i], &vectors[j]);
                let after = dist(&pca.projected[i], &pca.projected[j]);
                prop_assert!((before - after).abs() < 1e-8 * (1.0 + before));
            }
        }
        prop_assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn tsne_kl_is_finite_and_non_negative(vectors in points(6..15, 3), layout in prop::collection::vec(-3.0f64..3.0, 30)) {
        let n = vectors.len();
        let p = tsne_affinities(&vectors, 2.0).unwrap();
        let y: Vec<[f64; 2]> = (0..n).map(|i| [layout[2 * i], layout[2 * i + 1]]).collect();
        let (kl, grad) = tsne_kl(&p, &y);
        prop_assert!(kl.is_finite() && kl >= -1e-12);
        prop_assert!(grad.iter().flatten().all(|g| g.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(logits in prop::collection::vec(-50.0f64..50.0, 4 * 5 * 3)) {
        let probs = softmax_map(&Grid::from_vec(4, 5, 3, logits).unwrap());
        for i in 0..probs.pixels() {
            let p = probs.pixel(i);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&q| q >= 0.0));
            prop_assert!(entropy(p) <= 3f64.ln() + 1e-12);
        }
    }

    #[test]
    fn pseudo_labels_change_exactly_the_component_pixels(
        mask in prop::collection::vec(0u8..3, 8 * 8),
        anomaly in prop::collection::vec(prop::bool::weighted(0.3), 8 * 8),
        pick in any::<prop::sample::Index>(),
    ) {
        let mask = LabelMap::from_vec(8, 8, mask).unwrap();
        let binary = LabelMap::from_vec(8, 8, anomaly.iter().map(|&a| a as u8).collect()).unwrap();
        let components: Vec<_> = connected_components(&binary).into_iter().filter(|s| binary.data[s.pixels[0]] == 1).collect();
        prop_assume!(!components.is_empty());
        let chosen = &components[pick.index(components.len())];
        let out = pseudo_labels(&mask, &[chosen], 3);
        for i in 0..mask.pixels() {
            if chosen.pixels.contains(&i) {
                prop_assert_eq!(out.data[i], 3);
            } else {
                prop_assert_eq!(out.data[i], mask.data[i]);
            }
        }
    }

    #[test]
    fn dbscan_partition_ignores_point_order(raw in points(10..40, 2), seed in any::<u64>()) {
        let pts: Vec<[f64; 2]> = raw.iter().map(|p| [p[0], p[1]]).collect();
        let base = dbscan(&pts, 1.5, 3).unwrap();
        let mut order: Vec<usize> = (0..pts.len()).collect();
        anomseg::rng::SplitMix64::new(seed).shuffle(&mut order);
        let shuffled: Vec<[f64; 2]> = order.iter().map(|&i| pts[i]).collect();
        let other = dbscan(&shuffled, 1.5, 3).unwrap();
        // same-cluster relation must agree on every pair
        for a in 0..pts.len() {
            for b in 0..pts.len() {
                let same = |l: &[Option<usize>], x: usize, y: usize| l[x].is_some() && l[x] == l[y];
                prop_assert_eq!(same(&other.labels, a, b), same(&base.labels, order[a], order[b]));
                prop_assert_eq!(other.labels[a].is_none(), base.labels[order[a]].is_none());
            }
        }
    }
}

#[test]
fn saved_dataset_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = WorldConfig::default();
    let scenes = generate_split(&config, 11, Split::Test, 3).unwrap();
    let manifest = save_scenes(dir.path(), &scenes, config.class_names()).unwrap();
    let back = load_split(&manifest, Split::Test).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in scenes.iter().zip(&back) {
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.anomaly_mask, b.anomaly_mask);
        assert_eq!(a.seed, b.seed);
        let rounded: Vec<f64> = a.image.data.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(rounded, b.image.data);
    }
}

#[test]
fn generation_is_reproducible() {
    let config = WorldConfig::default();
    for split in Split::ALL {
        assert_eq!(generate_split(&config, 5, split, 2).unwrap(), generate_split(&config, 5, split, 2).unwrap());
    }
}
