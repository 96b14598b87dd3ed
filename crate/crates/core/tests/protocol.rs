use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use geotrace::adversary::{targeted_expected, targeted_inference, TargetedGrouping};
use geotrace::auditor::{audit, violation_is_proven};
use geotrace::geo::{LocationSample, LocationStore};
use geotrace::ha::{CompliantGrouping, GroupingStrategy};
use geotrace::intermediaries::PopulationRegistry;
use geotrace::model::{validate_request, ContactPolicy, GroupingParams, PartyId, UserId, SECONDS_PER_DAY};
use geotrace::scenario::Deployment;

const POPULATION: u64 = 300;
const TRACED: u64 = 40;

fn ids() -> Vec<UserId> {
    (0..POPULATION).map(UserId::synthetic).collect()
}

/// Two hours of clustered random walks for the first `TRACED` users.
fn store(seed: u64, policy: &ContactPolicy) -> LocationStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for u in 0..TRACED {
        let mut p = (rng.random_range(0.0..30.0), rng.random_range(0.0..30.0));
        for k in 0..120 {
            p.0 += rng.random_range(-1.0..1.0);
            p.1 += rng.random_range(-1.0..1.0);
            samples.push(LocationSample {
                user: UserId::synthetic(u),
                t: k * 60,
                x: p.0,
                y: p.1,
                accuracy_m: 0.0,
                poi: None,
            });
        }
    }
    LocationStore::ingest(samples, policy)
}

fn deployment<S: GroupingStrategy>(seed: u64, params: GroupingParams, strategy: S) -> (Deployment<S>, Arc<LocationStore>) {
    let policy = ContactPolicy::default();
    let store = Arc::new(store(seed, &policy));
    let dep = Deployment::new(seed, PopulationRegistry::new(ids()), store.clone(), policy, params, strategy);
    (dep, store)
}

fn day(d: u32) -> i64 {
    i64::from(d + 1) * SECONDS_PER_DAY
}

#[test]
fn honest_round_is_eight_messages_in_causal_order() {
    let params = GroupingParams {
        decoy_probability: 0.0,
        ..GroupingParams::default()
    };
    let (mut dep, _) = deployment(1, params, CompliantGrouping::default());
    dep.round(day(0), vec![UserId::synthetic(3), UserId::synthetic(9)]).unwrap();
    let flow: Vec<(PartyId, PartyId, &str)> = dep
        .net
        .transcript()
        .iter()
        .map(|e| (e.from, e.to, e.envelope.message().unwrap().kind()))
        .collect();
    use PartyId::*;
    let expected = [
        (Ha, Idp, "RandomIdsRequest"),
        (Idp, Ha, "RandomIdsReply"),
        (Ha, Lp, "ContactTracingRequest"),
        (Lp, Ha, "ContactTracingReply"),
        (Ha, Itpa, "KeysRequestToItpa"),
        (Itpa, Lp, "KeysRequestToLp"),
        (Lp, Itpa, "KeysReply"),
        (Itpa, Ha, "KeysReply"),
    ];
    assert_eq!(flow.len(), 8);
    for ((from, to, kind), (efrom, eto, ekind)) in flow.iter().zip(expected) {
        assert_eq!((*from, *to), (efrom, eto));
        assert_eq!(*kind, ekind);
    }
    assert!(dep.ha.rounds()[0].is_complete());
    assert!(dep.net.refusals().is_empty());
}

fn positives_per_day() -> impl Strategy<Value = Vec<Vec<u64>>> {
    prop::collection::vec(prop::collection::vec(0..POPULATION, 0..5), 1..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Reported duplicates, repeats across days and decoys: the compliant HA
    // still never sends an id in two infected groups, and the audit agrees.
    #[test]
    fn compliant_ha_never_reuses_an_infected_id(seed in any::<u64>(), days in positives_per_day()) {
        let (mut dep, _) = deployment(seed, GroupingParams::default(), CompliantGrouping::default());
        for (d, ids) in days.iter().enumerate() {
            let positives = ids.iter().map(|&i| UserId::synthetic(i)).collect();
            dep.round(day(d as u32), positives).unwrap();
        }
        let mut seen = BTreeSet::new();
        for rec in dep.ha.rounds() {
            prop_assert!(rec.is_complete(), "{:?}", rec.error);
            let req = rec.request.as_ref().unwrap();
            prop_assert!(validate_request(req).is_empty());
            prop_assert!(rec.plan.n >= 10 * rec.plan.m && rec.plan.k >= 5 * rec.plan.l);
            for members in rec.infected_groups().values() {
                for id in members.iter() {
                    prop_assert!(seen.insert(id.clone()), "{id} sent twice");
                }
            }
        }
        let report = audit(dep.lp.retained(), dep.itpa.records(), dep.net.registry());
        prop_assert!(report.is_clean(), "{report:?}");
    }

    // The HA ends every round holding exactly the keys of its infected groups.
    #[test]
    fn released_keys_are_exactly_the_infected_groups(seed in any::<u64>(), days in positives_per_day()) {
        let (mut dep, _) = deployment(seed, GroupingParams::default(), CompliantGrouping::default());
        for (d, ids) in days.iter().enumerate() {
            dep.round(day(d as u32), ids.iter().map(|&i| UserId::synthetic(i)).collect()).unwrap();
        }
        for rec in dep.ha.rounds() {
            let held: BTreeSet<u32> = rec.held_keys.iter().map(|k| k.group_index).collect();
            prop_assert_eq!(&held, &rec.infected_indices);
            prop_assert!(rec.held_keys.iter().all(|k| k.tx == rec.tx));
            prop_assert_eq!(rec.report.as_ref().map(|r| r.per_infected_group.len()), Some(rec.infected_indices.len()));
        }
    }

    // Any targeted run is flagged once on the target, with proof, and the
    // inferred set over-approximates the target's contacts.
    #[test]
    fn targeted_attack_is_always_caught(seed in any::<u64>(), target in 0..TRACED, times in 2usize..4, extra in 0u32..2) {
        let target = UserId::synthetic(target);
        let (mut dep, store) = deployment(seed, GroupingParams::default(), TargetedGrouping::new(target.clone(), times));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rounds = times as u32 + extra;
        for d in 0..rounds {
            let positives: Vec<UserId> = (0..rng.random_range(0..3))
                .map(|_| UserId::synthetic(rng.random_range(0..POPULATION)))
                .filter(|id| *id != target)
                .collect();
            dep.round(day(d), positives).unwrap();
        }
        prop_assert_eq!(dep.ha.strategy().placed(), times);
        let report = audit(dep.lp.retained(), dep.itpa.records(), dep.net.registry());
        prop_assert_eq!(report.violations.len(), 1);
        let v = &report.violations[0];
        prop_assert_eq!(&v.user_id, &target);
        prop_assert_eq!(v.tx_list.len(), times);
        prop_assert!(violation_is_proven(v, dep.itpa.records(), dep.net.registry()));

        let mut outcome = targeted_inference(dep.ha.rounds(), &target);
        targeted_expected(&mut outcome, &store, &ContactPolicy::default());
        prop_assert!(outcome.covers_expected);
        prop_assert!(outcome.expected.is_subset(&outcome.inferred));
    }
}
