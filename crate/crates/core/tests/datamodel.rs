use std::collections::BTreeSet;

use discorec::datamodel::{discovery_candidates, load_dataset, save_dataset};
use discorec::synthgen::{generate, SynthConfig};
use proptest::prelude::*;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        users: 80,
        shows: 25,
        density: 0.03,
        seed,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn candidates_never_touch_familiar_shows(seed in any::<u64>()) {
        let b = generate(&small(seed)).unwrap();
        for (u, user) in b.users().iter().enumerate() {
            let familiar: BTreeSet<&str> = b
                .train_positives_of(u)
                .iter()
                .map(|&e| b.episodes()[e].show_id.as_str())
                .collect();
            let want: BTreeSet<String> = b
                .episodes()
                .iter()
                .filter(|e| !familiar.contains(e.show_id.as_str()))
                .map(|e| e.episode_id.clone())
                .collect();
            prop_assert_eq!(discovery_candidates(&b, &user.user_id).unwrap(), want);
        }
    }

    #[test]
    fn saved_bundles_load_back_equal(seed in any::<u64>()) {
        let b = generate(&small(seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&b, dir.path()).unwrap();
        prop_assert_eq!(load_dataset(dir.path()).unwrap(), b);
    }
}
