use std::collections::{BTreeMap, HashSet};

use discorec::datamodel::fixtures::{episode, header, pair, user};
use discorec::datamodel::{DatasetBundle, InteractionSet, Split};
use discorec::exec::Exec;
use discorec::featurize::{build_schemas, encode_episodes, DropoutMode, FeatureSchema, SchemaOptions};
use discorec::linalg::Matrix;
use discorec::neighbors::{NeighborCache, Space};
use discorec::objective::{
    batch_loss, make_pair, ntxent_from_embeddings, sample_negatives, train, AugmentationSource, Augmenter,
    ObjectiveConfig, TrainConfig, TrainingBatch, Variant,
};
use discorec::synthgen::{generate, SynthConfig};
use discorec::tower::init_params;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` episodes `e00..`, one show each, and a single train user `u1` who
/// played `played`.
fn catalog(n: usize, played: &[usize]) -> DatasetBundle {
    let episodes = (0..n)
        .map(|i| episode(&format!("e{i:02}"), &format!("s{i:02}"), i as f64 / n as f64))
        .collect();
    let interactions = InteractionSet {
        positives: played.iter().map(|&i| pair("u1", &format!("e{i:02}"))).collect(),
        split: BTreeMap::from([("u1".to_string(), Split::Train)]),
    };
    DatasetBundle::new(header(4), vec![user("u1", 0, 0)], episodes, interactions).unwrap()
}

#[test]
fn negatives_fill_the_only_possible_set() {
    let b = catalog(5, &[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let got: HashSet<usize> = sample_negatives(&b, 0, 4, &mut rng).unwrap().into_iter().collect();
    assert_eq!(got, HashSet::from([1, 2, 3, 4]));
    assert!(sample_negatives(&b, 0, 5, &mut rng).is_err());
}

/// Upper 1% point of the chi-square distribution (Wilson-Hilferty).
fn chi2_critical_99(df: f64) -> f64 {
    let z = 2.326_347_874;
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn negatives_are_uniform_and_avoid_positives() {
    let played = [2, 5, 11];
    let b = catalog(20, &played);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 100_000;
    let mut counts = [0usize; 20];
    for _ in 0..draws {
        let neg = sample_negatives(&b, 0, 1, &mut rng).unwrap();
        counts[neg[0]] += 1;
    }
    for p in played {
        assert_eq!(counts[p], 0, "positive {p} was drawn");
    }
    let pool = 20 - played.len();
    let expected = draws as f64 / pool as f64;
    let chi2: f64 = (0..20)
        .filter(|i| !played.contains(i))
        .map(|i| (counts[i] as f64 - expected).powi(2) / expected)
        .sum();
    assert!(chi2 < chi2_critical_99((pool - 1) as f64), "chi2 {chi2}");
}

struct Setup {
    features: Matrix,
    schema: FeatureSchema,
}

fn setup(n: usize) -> Setup {
    let b = catalog(n, &[0]);
    let (_, schema) = build_schemas(&b, SchemaOptions::default()).unwrap();
    let features = encode_episodes(&schema, &b, Exec::Sequential).unwrap();
    Setup { features, schema }
}

fn augmenter<'a>(s: &'a Setup, content: Option<&'a NeighborCache>, kg: Option<&'a NeighborCache>) -> Augmenter<'a> {
    Augmenter {
        episode_features: &s.features,
        schema: &s.schema,
        content,
        kg,
        fallback_p: 0.3,
        dropout_mode: DropoutMode::Field,
    }
}

#[test]
fn zero_dropout_view_is_the_anchor() {
    let s = setup(6);
    let aug = augmenter(&s, None, None);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for anchor in 0..6 {
        let (view, prov) = make_pair(&aug, &AugmentationSource::FeatureDropout { p: 0.0 }, anchor, &mut rng).unwrap();
        assert_eq!(view, s.features.row(anchor));
        assert_eq!(prov.episode, anchor);
    }
}

#[test]
fn single_neighbor_view_is_that_neighbor() {
    let s = setup(10);
    let lists: Vec<Vec<usize>> = (0..10).map(|i| vec![7, (i + 1) % 10, (i + 2) % 10]).collect();
    let cache = NeighborCache::from_lists(Space::Content, 3, lists);
    let aug = augmenter(&s, Some(&cache), None);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let (view, prov) = make_pair(&aug, &AugmentationSource::ContentNeighbors { k: 1 }, 2, &mut rng).unwrap();
        assert_eq!(view, s.features.row(7));
        assert_eq!(prov.space, Some(Space::Content));
    }
}

/// True when every field segment of `view` equals the same segment of `row`
/// or is entirely zero.
fn is_masked_copy(schema: &FeatureSchema, view: &[f64], row: &[f64]) -> bool {
    schema.fields.iter().all(|f| {
        let r = f.range();
        view[r.clone()] == row[r.clone()] || view[r].iter().all(|&x| x == 0.0)
    })
}

#[test]
fn kg_fd_views_are_masked_neighbors() {
    let s = setup(12);
    let k = 3;
    let lists: Vec<Vec<usize>> = (0..12).map(|i| (1..=5).map(|d| (i + d * 2) % 12).collect()).collect();
    let cache = NeighborCache::from_lists(Space::Kg, 5, lists.clone());
    let aug = augmenter(&s, None, Some(&cache));
    let source = AugmentationSource::kg_fd(k, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut masked_something = false;
    for draw in 0..3000 {
        let anchor = draw % 12;
        let (view, prov) = make_pair(&aug, &source, anchor, &mut rng).unwrap();
        assert!(lists[anchor][..k].contains(&prov.episode));
        let top = &lists[anchor][..k];
        assert!(
            top.iter().any(|&j| is_masked_copy(&s.schema, &view, s.features.row(j))),
            "draw {draw}: view is not a masked top-{k} neighbor of {anchor}"
        );
        masked_something |= view != s.features.row(prov.episode);
    }
    assert!(masked_something);
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ntxent_ignores_pair_order(
        seed in any::<u64>(),
        n in 1usize..9,
        d in 1usize..5,
        tau in 0.2f64..3.0,
        symmetric in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, d);
        let b = random_matrix(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let base = ntxent_from_embeddings(&a, &b, tau, symmetric).unwrap();
        let moved = ntxent_from_embeddings(&a.select_rows(&perm), &b.select_rows(&perm), tau, symmetric).unwrap();
        prop_assert!((base.loss - moved.loss).abs() <= 1e-12);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for (x, y) in moved.grad_anchors.row(new_row).iter().zip(base.grad_anchors.row(old_row)) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ntxent_falls_as_the_positive_pair_agrees(
        seed in any::<u64>(),
        n in 2usize..7,
        d in 1usize..4,
        c in 0.0f64..3.0,
        step in 0.01f64..1.0,
    ) {
        // A private extra coordinate shared only by a₀ and b₀ raises a₀·b₀
        // while every other similarity stays put.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(&mut rng, n, d);
        let b = random_matrix(&mut rng, n, d);
        let widen = |m: &Matrix, extra: f64| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut r = m.row(i).to_vec();
                    r.push(if i == 0 { extra } else { 0.0 });
                    r
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        let loss = |c: f64| ntxent_from_embeddings(&widen(&a, c), &widen(&b, 1.0), 1.0, false).unwrap().loss;
        prop_assert!(loss(c + step) < loss(c));
    }
}

#[test]
fn lambda_derivative_is_the_contrastive_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = init_params(5, 6, &[7, 4], 2, false).unwrap();
    let batch = TrainingBatch {
        users: random_matrix(&mut rng, 3, 5),
        episodes: random_matrix(&mut rng, 9, 6),
        positives: vec![0, 1, 2],
        negatives: vec![vec![3, 4], vec![5, 6], vec![7, 8]],
        pairs: Some(vec![(0, 3), (1, 5), (2, 7)]),
    };
    let at = |lambda: f64| {
        let obj = ObjectiveConfig {
            lambda,
            ..ObjectiveConfig::default()
        };
        batch_loss(&params, &batch, &obj, Exec::Sequential).unwrap()
    };
    let h = 1e-5;
    let numeric = (at(0.4 + h).total - at(0.4 - h).total) / (2.0 * h);
    let cl = at(0.4).contrastive;
    assert!((numeric - cl).abs() <= 1e-8 * cl.abs().max(1.0), "{numeric} vs {cl}");
    assert_eq!(at(0.0).total, at(0.0).interaction);
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        users: 150,
        shows: 40,
        density: 0.03,
        seed: 21,
        ..SynthConfig::default()
    }
}

#[test]
fn fixed_seed_gives_identical_training_logs() {
    let bundle = generate(&small_synth()).unwrap();
    let config = TrainConfig {
        epochs: 4,
        ..TrainConfig::for_variant(Variant::MsaclKgFd, 0.1, 0.3, 10, 5)
    };
    let strip = |mut log: Vec<discorec::objective::EpochRecord>| {
        for r in &mut log {
            r.wall_time_s = 0.0;
        }
        log
    };
    let a = train(&bundle, &config).unwrap();
    let b = train(&bundle, &config).unwrap();
    assert_eq!(strip(a.log), strip(b.log));
    assert_eq!(a.params, b.params);
}

#[test]
fn training_loss_falls_over_the_first_epochs() {
    let bundle = generate(&SynthConfig::default()).unwrap();
    for variant in [Variant::Tt, Variant::MsaclKgFd] {
        let config = TrainConfig {
            epochs: 5,
            ..TrainConfig::for_variant(variant, 0.1, 0.3, 10, 0)
        };
        let log = train(&bundle, &config).unwrap().log;
        let losses: Vec<f64> = log.iter().map(|r| r.train_loss).collect();
        let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(rises <= 1, "{variant}: {losses:?}");
        assert!(losses[4] < losses[0], "{variant}: {losses:?}");
    }
}
