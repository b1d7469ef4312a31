use std::collections::{BTreeMap, HashSet};

use discorec::datamodel::fixtures::{episode, header, pair, user};
use discorec::datamodel::{DatasetBundle, Interaction, InteractionSet, Split};
use discorec::evaluate::{
    evaluate_model, mrr, ndcg_at_n, order_by_score, pop_country_rank, pop_rank, popularity_buckets, rank_for_user,
    recall_at_n, BucketEdges, EvalOptions, Popularity, PopularityRanker, Ranker,
};
use discorec::synthgen::{generate, SynthConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bundle(episodes: &[(&str, &str)], users: &[(&str, u32, Split)], plays: &[(&str, &str)]) -> DatasetBundle {
    DatasetBundle::new(
        header(4),
        users.iter().map(|&(u, c, _)| user(u, c, 0)).collect(),
        episodes.iter().map(|&(e, s)| episode(e, s, 0.5)).collect(),
        InteractionSet {
            positives: plays.iter().map(|&(u, e)| pair(u, e)).collect(),
            split: users.iter().map(|&(u, _, s)| (u.to_string(), s)).collect(),
        },
    )
    .unwrap()
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_monotone(
        (m, ranked, relevant) in (2usize..60).prop_flat_map(|m| (
            Just(m),
            Just((0..m).collect::<Vec<usize>>()).prop_shuffle(),
            proptest::collection::hash_set(0..m, 1..m.min(8)),
        )),
    ) {
        let mut prev = (0.0, 0.0);
        for n in 1..=m {
            let r = recall_at_n(&ranked, &relevant, n).unwrap();
            let g = ndcg_at_n(&ranked, &relevant, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&g));
            prop_assert!(r >= prev.0);
            // The ideal DCG grows with N too, so NDCG alone need not rise;
            // DCG itself must.
            let ideal: f64 = (0..relevant.len().min(n)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
            prop_assert!(g * ideal >= prev.1 - 1e-12);
            prev = (r, g * ideal);
            let top_all_relevant = ranked[..relevant.len().min(n)].iter().all(|x| relevant.contains(x));
            prop_assert_eq!(g == 1.0, top_all_relevant);
        }
        let rr = mrr(&ranked, &relevant).unwrap();
        prop_assert!(rr > 0.0 && rr <= 1.0);
    }

    #[test]
    fn popularity_ignores_interaction_order(seed in any::<u64>()) {
        let b = generate(&SynthConfig { users: 60, shows: 20, density: 0.03, seed: 3, ..SynthConfig::default() }).unwrap();
        let mut shuffled = b.interactions().clone();
        shuffled.positives.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = b.with_interactions(shuffled).unwrap();
        prop_assert_eq!(pop_rank(&b), pop_rank(&s));
        for u in b.users().iter().take(5) {
            prop_assert_eq!(pop_country_rank(&b, &u.user_id).unwrap(), pop_country_rank(&s, &u.user_id).unwrap());
        }
    }
}

/// With one relevant item the ideal DCG is fixed, so NDCG itself rises with N.
#[test]
fn ndcg_is_monotone_in_n_for_a_single_relevant_item() {
    let ranked: Vec<usize> = (0..30).collect();
    let relevant = HashSet::from([4]);
    let values: Vec<f64> = (1..30).map(|n| ndcg_at_n(&ranked, &relevant, n).unwrap()).collect();
    assert!(values.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn counts_order_the_global_ranking() {
    let users: Vec<(String, u32, Split)> = (0..9).map(|i| (format!("u{i}"), 0, Split::Train)).collect();
    let users: Vec<(&str, u32, Split)> = users.iter().map(|(u, c, s)| (u.as_str(), *c, *s)).collect();
    let mut plays = Vec::new();
    for (e, n) in [("e1", 5), ("e2", 3), ("e3", 9)] {
        plays.extend(users[..n].iter().map(|&(u, _, _)| (u, e)));
    }
    let b = bundle(&[("e1", "s1"), ("e2", "s2"), ("e3", "s3")], &users, &plays);
    assert_eq!(pop_rank(&b), ["e3", "e1", "e2"]);
}

#[test]
fn country_cohort_lifts_its_own_plays() {
    let b = bundle(
        &[("e1", "s1"), ("e2", "s2"), ("e3", "s3")],
        &[
            ("u1", 0, Split::Train),
            ("u2", 0, Split::Train),
            ("u3", 1, Split::Train),
            ("u4", 1, Split::Test),
        ],
        &[("u1", "e1"), ("u2", "e1"), ("u1", "e3"), ("u3", "e2")],
    );
    assert_eq!(pop_rank(&b), ["e1", "e2", "e3"]);
    assert_eq!(pop_country_rank(&b, "u4").unwrap()[0], "e2");
}

#[test]
fn ties_fall_back_to_ascending_id() {
    let b = bundle(
        &[("e3", "s1"), ("e1", "s2"), ("e2", "s3")],
        &[("u1", 0, Split::Train)],
        &[],
    );
    let mut order = vec![0, 1, 2];
    order_by_score(&b, &mut order, &[1.0, 1.0, 2.0]);
    assert_eq!(order, [2, 1, 0]);
    let mut again = vec![1, 0, 2];
    order_by_score(&b, &mut again, &[1.0, 1.0, 2.0]);
    assert_eq!(again, order);
}

struct Fixed(Vec<f64>);

impl Ranker for Fixed {
    fn name(&self) -> &str {
        "fixed"
    }

    fn scores(&self, _: &DatasetBundle, _: usize) -> Vec<f64> {
        self.0.clone()
    }
}

#[test]
fn masking_removes_exactly_the_familiar_shows() {
    let b = bundle(
        &[("e1", "p1"), ("e2", "p1"), ("e3", "p2"), ("e4", "p3"), ("e5", "p3")],
        &[("u1", 0, Split::Train)],
        &[("u1", "e4")],
    );
    let r = Fixed(vec![5.0, 4.0, 3.0, 2.0, 1.0]);
    let all = rank_for_user(&r, &b, 0, false).unwrap();
    let masked = rank_for_user(&r, &b, 0, true).unwrap();
    assert_eq!(all, [0, 1, 2, 3, 4]);
    assert_eq!(masked, [0, 1, 2]);
}

#[test]
fn a_perfect_single_user_scores_one_everywhere() {
    let b = bundle(
        &[("e1", "p1"), ("e2", "p2"), ("e3", "p3")],
        &[("u1", 0, Split::Train), ("t1", 0, Split::Test)],
        &[("u1", "e1"), ("t1", "e2")],
    );
    let ev = evaluate_model(&Fixed(vec![0.0, 9.0, 1.0]), &b, Split::Test, EvalOptions::default()).unwrap();
    assert_eq!(ev.users, 1);
    assert_eq!(ev.metrics.values(), [1.0; 5]);
}

/// Straight per-user loop: candidates, ordering and metrics all recomputed
/// from their definitions.
fn hand_loop(b: &DatasetBundle, scores: &dyn Fn(usize) -> Vec<f64>) -> [f64; 5] {
    let mut sum = [0.0; 5];
    let mut users = 0.0;
    for u in b.users_in(Split::Test) {
        let relevant: Vec<usize> = b.positives_of(u).to_vec();
        if relevant.is_empty() {
            continue;
        }
        let familiar: HashSet<usize> = b.train_positives_of(u).iter().map(|&e| b.show_of(e)).collect();
        let s = scores(u);
        let mut cands: Vec<usize> = (0..b.episodes().len())
            .filter(|&e| !familiar.contains(&b.show_of(e)))
            .collect();
        cands.sort_by(|&x, &y| {
            s[y].partial_cmp(&s[x])
                .unwrap()
                .then(b.episodes()[x].episode_id.cmp(&b.episodes()[y].episode_id))
        });
        let hit = |i: usize| relevant.contains(&cands[i]);
        let recall = |n: usize| (0..n.min(cands.len())).filter(|&i| hit(i)).count() as f64 / relevant.len() as f64;
        let ndcg = |n: usize| {
            let dcg: f64 = (0..n.min(cands.len()))
                .filter(|&i| hit(i))
                .map(|i| 1.0 / ((i + 2) as f64).log2())
                .sum();
            let ideal: f64 = (0..relevant.len().min(n)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
            dcg / ideal
        };
        let rr = (0..cands.len()).find(|&i| hit(i)).map_or(0.0, |i| 1.0 / (i + 1) as f64);
        for (acc, v) in sum.iter_mut().zip([recall(10), ndcg(10), recall(20), ndcg(20), rr]) {
            *acc += v;
        }
        users += 1.0;
    }
    sum.map(|x| x / users)
}

#[test]
fn report_matches_a_hand_loop_on_a_toy_split() {
    let b = generate(&SynthConfig {
        users: 500,
        shows: 40,
        density: 0.02,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    assert!(b.users_in(Split::Test).len() >= 50);
    for kind in [Popularity::Global, Popularity::Country] {
        let r = PopularityRanker::new(&b, kind);
        let ev = evaluate_model(&r, &b, Split::Test, EvalOptions::default()).unwrap();
        let oracle = hand_loop(&b, &|u| r.scores(&b, u));
        for (got, want) in ev.metrics.values().iter().zip(oracle) {
            assert!((got - want).abs() < 1e-12, "{kind:?}: {got} vs {want}");
        }
        let again = evaluate_model(&r, &b, Split::Test, EvalOptions::default()).unwrap();
        assert_eq!(ev, again);
    }
}

#[test]
fn buckets_follow_train_counts() {
    let b = generate(&SynthConfig {
        users: 500,
        shows: 40,
        density: 0.02,
        seed: 8,
        ..SynthConfig::with_popular_head()
    })
    .unwrap();
    let r = PopularityRanker::new(&b, Popularity::Global);
    let ev = evaluate_model(&r, &b, Split::Test, EvalOptions::default()).unwrap();
    let edges = BucketEdges::default();
    let table = popularity_buckets(&b, &[&ev], &edges).unwrap();

    // Flat scan: rank each test positive from scratch and bin it by hand.
    let mut bins: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    let counts = b.train_counts();
    for u in b.users_in(Split::Test) {
        let Some(ranked) = rank_for_user(&r, &b, u, true) else {
            continue;
        };
        for &e in b.positives_of(u) {
            let label = match counts[e] {
                0..=1 => "0-1",
                2..=3 => "2-3",
                4..=10 => "4-10",
                11..=50 => "11-50",
                _ => ">50",
            };
            let gain = ranked
                .iter()
                .position(|&x| x == e)
                .filter(|&p| p < 20)
                .map_or(0.0, |p| 1.0 / ((p + 2) as f64).log2());
            let slot = bins.entry(label).or_default();
            slot.0 += 1;
            slot.1 += gain;
        }
    }
    assert_eq!(table.rows.len(), bins.len());
    for (label, (n, total)) in bins {
        let row = table.get("Pop", label).unwrap();
        assert_eq!(row.interactions, n);
        assert!((row.ndcg_20 - total / n as f64).abs() < 1e-12);
    }
}

#[test]
fn unplayed_episodes_land_in_the_coldest_bucket() {
    let b = bundle(
        &[("e1", "p1"), ("e2", "p2")],
        &[("u1", 0, Split::Train), ("t1", 0, Split::Test)],
        &[("u1", "e1"), ("t1", "e2")],
    );
    let ev = evaluate_model(&Fixed(vec![1.0, 0.0]), &b, Split::Test, EvalOptions::default()).unwrap();
    let table = popularity_buckets(&b, &[&ev], &BucketEdges::default()).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].bucket, "0-1");
}

#[test]
fn all_popular_data_fills_only_the_top_bucket() {
    let mut users: Vec<(String, Split)> = (0..60).map(|i| (format!("u{i:02}"), Split::Train)).collect();
    users.push(("t1".into(), Split::Test));
    let mut positives: Vec<Interaction> = Vec::new();
    for (u, _) in &users {
        positives.push(pair(u, "e1"));
        positives.push(pair(u, "e2"));
    }
    let b = DatasetBundle::new(
        header(4),
        users.iter().map(|(u, _)| user(u, 0, 0)).collect(),
        vec![episode("e1", "p1", 0.1), episode("e2", "p2", 0.2)],
        InteractionSet {
            positives,
            split: users.iter().cloned().collect(),
        },
    )
    .unwrap();
    let ev = evaluate_model(
        &Fixed(vec![1.0, 0.0]),
        &b,
        Split::Test,
        EvalOptions {
            masking: false,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    let table = popularity_buckets(&b, &[&ev], &BucketEdges::default()).unwrap();
    let buckets: Vec<&str> = table.rows.iter().map(|r| r.bucket.as_str()).collect();
    assert_eq!(buckets, [">50"]);
}
