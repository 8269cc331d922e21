use std::collections::BTreeSet;

use proptest::prelude::*;
use xwalk_core::corpus::{generate_synthetic, midblock_fraction, site_split, stratified_split, Label, Partition, PedestrianObservation};
use xwalk_core::eval::{check_leakage, few_shot_context, EvalError};

const RATIOS: [f64; 3] = [0.70, 0.15, 0.15];
const PARTS: [Partition; 3] = [Partition::Train, Partition::Validation, Partition::Test];

fn share(obs: &[&PedestrianObservation]) -> f64 {
    midblock_fraction(obs.iter().copied())
}

#[test]
fn default_corpus_partitions_keep_the_midblock_share() {
    let (_, obs) = generate_synthetic(35, 687, 1).unwrap();
    let overall = midblock_fraction(&obs);
    for seed in 0..20 {
        let s = stratified_split(&obs, RATIOS, seed).unwrap();
        assert!(s.is_disjoint());
        let sizes: Vec<usize> = PARTS.iter().map(|p| s.select(&obs, *p).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 687);
        for (got, want) in sizes.iter().zip([481, 103, 103]) {
            assert!(got.abs_diff(want) <= 1, "sizes {sizes:?}");
        }
        for p in PARTS {
            let f = share(&s.select(&obs, p));
            assert!((f - overall).abs() <= 0.02, "seed {seed} {p:?}: {f} vs {overall}");
        }
    }
}

#[test]
fn ten_observation_example() {
    let (_, mut obs) = generate_synthetic(3, 10, 4).unwrap();
    for (i, o) in obs.iter_mut().enumerate() {
        o.label = if i < 4 { Label::Midblock } else { Label::Intersection };
    }
    for seed in 0..50 {
        let s = stratified_split(&obs, RATIOS, seed).unwrap();
        for p in PARTS {
            let f = share(&s.select(&obs, p));
            assert!((0.2..=0.6).contains(&f), "seed {seed} {p:?}: {f}");
        }
    }
}

#[test]
fn single_class_corpus_is_rejected() {
    let (_, mut obs) = generate_synthetic(3, 10, 4).unwrap();
    obs.iter_mut().for_each(|o| o.label = Label::Intersection);
    assert!(stratified_split(&obs, RATIOS, 0).is_err());
}

#[test]
fn site_split_never_shares_a_site() {
    let (sites, obs) = generate_synthetic(35, 687, 1).unwrap();
    for seed in 0..20 {
        let s = site_split(&sites, &obs, [22, 5, 5], seed).unwrap();
        assert!(s.is_disjoint());
        let site_sets: Vec<BTreeSet<&str>> = PARTS
            .iter()
            .map(|p| s.select(&obs, *p).iter().map(|o| o.site_id.as_str()).collect())
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                for site in &site_sets[a] {
                    assert!(!site_sets[b].contains(site), "seed {seed}: {site} in {:?} and {:?}", PARTS[a], PARTS[b]);
                }
            }
        }
        assert_eq!(s.train_sites.len(), 22);
        assert_eq!(s.validation_sites.len(), 5);
        assert_eq!(s.test_sites.len(), 5);
        assert_eq!(s.unassigned_sites.len(), 3);
        for o in &obs {
            let assigned = s.partition_of(&o.obs_id).is_some();
            assert_eq!(assigned, !s.unassigned_sites.contains(&o.site_id));
        }
    }
}

#[test]
fn injected_test_observation_trips_the_guard() {
    let (sites, obs) = generate_synthetic(35, 687, 1).unwrap();
    let s = site_split(&sites, &obs, [22, 5, 5], 3).unwrap();
    let train: Vec<&str> = s.train.iter().map(String::as_str).collect();
    let val: Vec<&str> = s.validation.iter().map(String::as_str).collect();
    check_leakage(&s, train.iter().copied(), val.iter().copied()).unwrap();

    let leaked = s.test.iter().next().unwrap().as_str();
    let mut bad_train = train.clone();
    bad_train.push(leaked);
    match check_leakage(&s, bad_train, []) {
        Err(EvalError::Leakage { obs_id, role }) => {
            assert_eq!(obs_id, leaked);
            assert_eq!(role, "training inputs");
        }
        other => panic!("expected leakage, got {other:?}"),
    }
    assert!(matches!(check_leakage(&s, [], [leaked]), Err(EvalError::Leakage { role: "few-shot exemplars", .. })));
}

#[test]
fn exemplars_come_from_the_validation_partition_only() {
    let (sites, obs) = generate_synthetic(35, 687, 1).unwrap();
    let s = site_split(&sites, &obs, [22, 5, 5], 8).unwrap();
    let pairs: Vec<_> = s
        .select(&obs, Partition::Validation)
        .into_iter()
        .map(|o| (o, sites.iter().find(|x| x.site_id == o.site_id).unwrap()))
        .collect();
    for seed in 0..10 {
        let ex = few_shot_context(&pairs, 5, seed).unwrap();
        assert_eq!(ex.len(), 5);
        assert_eq!(ex.iter().map(|e| &e.obs_id).collect::<BTreeSet<_>>().len(), 5);
        assert!(ex.iter().all(|e| s.validation.contains(&e.obs_id)));
        check_leakage(&s, [], ex.iter().map(|e| e.obs_id.as_str())).unwrap();
    }
    assert!(few_shot_context(&pairs, 0, 1).unwrap().is_empty());
    assert!(matches!(few_shot_context(&pairs[..3], 5, 1), Err(EvalError::InsufficientValidation { needed: 5, available: 3 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn splits_are_deterministic_and_exhaustive(n in 20usize..300, seed in 0u64..1000) {
        let (_, obs) = generate_synthetic(6, n, seed).unwrap();
        prop_assume!(obs.iter().any(|o| o.label.is_midblock()) && obs.iter().any(|o| !o.label.is_midblock()));
        let a = stratified_split(&obs, RATIOS, seed).unwrap();
        let b = stratified_split(&obs, RATIOS, seed).unwrap();
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.test, &b.test);
        prop_assert!(a.is_disjoint());
        prop_assert_eq!(a.train.len() + a.validation.len() + a.test.len(), n);
    }
}
