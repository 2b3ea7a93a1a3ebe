mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use common::aggregation::{self, random_set, reflection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treeprompt::critic::{aggregate_node_based, cap_groups, Reflection};

#[test]
fn node_grouping_matches_union_oracle() {
    let start = Instant::now();
    assert_eq!(aggregation::mismatches(7, 1000), 0);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn capping_keeps_largest_groups_in_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..300 {
        let sets = random_set(&mut rng);
        let reflections: Vec<Reflection> = sets.iter().enumerate().map(|(i, s)| reflection(i, s)).collect();
        let groups = aggregate_node_based(&reflections);
        let g = rng.random_range(1..6);
        let capped = cap_groups(groups.clone(), g);
        assert_eq!(capped.len(), groups.len().min(g));
        let sizes: BTreeMap<&str, usize> = groups.iter().map(|x| (x.group_id.as_str(), x.members.len())).collect();
        let kept_min = capped.iter().map(|x| x.members.len()).min().unwrap_or(0);
        for x in &groups {
            if !capped.iter().any(|c| c.group_id == x.group_id) {
                assert!(sizes[x.group_id.as_str()] <= kept_min);
            }
        }
        let pos = |id: &str| groups.iter().position(|x| x.group_id == id).unwrap();
        assert!(capped.windows(2).all(|w| pos(&w[0].group_id) < pos(&w[1].group_id)));
    }
}
