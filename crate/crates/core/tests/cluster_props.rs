use std::collections::BTreeSet;

use proptest::prelude::*;

use fedsim::cluster::{elect_driver, form_groups, reassign_on_failure, ClusterAssignment, RobotSite};
use fedsim::ClientId;

fn sites(max: usize) -> impl Strategy<Value = Vec<RobotSite>> {
    prop::collection::vec((-500f64..500.0, -500f64..500.0), 1..=max).prop_map(|pts| {
        pts.into_iter()
            .enumerate()
            .map(|(i, position)| RobotSite {
                client_id: ClientId(i as u32),
                region_hint: None,
                position,
            })
            .collect()
    })
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

fn brute_force_driver(a: &ClusterAssignment, g: usize, sites: &[RobotSite]) -> ClientId {
    sites
        .iter()
        .filter(|s| a.membership.get(&s.client_id) == Some(&g))
        .map(|s| (dist2(s.position, a.centroids[g]), s.client_id))
        .min_by(|x, y| x.partial_cmp(y).unwrap())
        .unwrap()
        .1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn formed_groups_satisfy_invariants(s in sites(40), k_seed in any::<usize>(), seed in any::<u64>()) {
        let k = 1 + k_seed % s.len();
        let a = form_groups(&s, k, seed).unwrap();
        prop_assert!(a.validate().is_ok());
        prop_assert_eq!(a.num_groups, k);
        prop_assert_eq!(a.membership.len(), s.len());
        prop_assert_eq!(&a, &form_groups(&s, k, seed).unwrap());
        for g in 0..k {
            prop_assert_eq!(a.drivers[g], brute_force_driver(&a, g, &s));
            prop_assert_eq!(elect_driver(&a, g, &s).unwrap(), a.drivers[g]);
        }
    }

    #[test]
    fn failures_keep_invariants(s in sites(25), k_seed in any::<usize>(), failures in 1usize..6) {
        let k = 1 + k_seed % s.len();
        let mut a = form_groups(&s, k, 7).unwrap();
        for i in 0..failures {
            if a.num_groups == 0 {
                break;
            }
            let failed = a.drivers[i % a.num_groups];
            let before = a.num_groups;
            let size = a.members(i % a.num_groups).len();
            a = reassign_on_failure(&a, failed, &s).unwrap();
            prop_assert!(a.validate().is_ok());
            prop_assert!(!a.membership.contains_key(&failed));
            prop_assert_eq!(a.num_groups, if size == 1 { before - 1 } else { before });
        }
    }

    #[test]
    fn hints_define_the_grouping(s in sites(30), hints in prop::collection::vec(0u32..6, 30)) {
        let hinted: Vec<RobotSite> = s
            .iter()
            .map(|x| RobotSite { region_hint: Some(hints[x.client_id.0 as usize] * 10), ..x.clone() })
            .collect();
        let a = form_groups(&hinted, 1, 0).unwrap();
        prop_assert!(a.validate().is_ok());
        let distinct: BTreeSet<u32> = hinted.iter().map(|x| x.region_hint.unwrap()).collect();
        prop_assert_eq!(a.num_groups, distinct.len());
        for x in &hinted {
            for y in &hinted {
                prop_assert_eq!(
                    a.membership[&x.client_id] == a.membership[&y.client_id],
                    x.region_hint == y.region_hint
                );
            }
        }
    }
}
