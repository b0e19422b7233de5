use proptest::prelude::*;

use umslim::analysis::{activity_sets, overlap};
use umslim::importance::{ImportanceReport, Provenance};
use umslim::moe::partition_experts;
use umslim::numerics::cosine_similarity;
use umslim::surgery::{plan_width, PruningPlan};
use umslim::trace::{top_count, top_p_set};
use umslim::Component;

fn report(scores: Vec<f64>) -> ImportanceReport {
    ImportanceReport {
        component: Component::Gen,
        layer: 1,
        scores,
        head_scores: None,
        provenance: Provenance {
            batch: "prop".into(),
            tasks: vec![],
        },
    }
}

fn spread(groups: &[Vec<usize>], scores: &[f64]) -> f64 {
    let sums: Vec<f64> = groups.iter().map(|g| g.iter().map(|&i| scores[i]).sum()).collect();
    let max = sums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = sums.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

proptest! {
    #[test]
    fn partitions_cover_every_neuron_once(
        scores in prop::collection::vec(0.0f64..10.0, 64),
        e in prop::sample::select(vec![2usize, 4, 8, 16, 32]),
    ) {
        let p = partition_experts(&report(scores.clone()), e).unwrap();
        prop_assert!(p.validate().is_ok());
        let mut seen: Vec<usize> = p.shared.iter().chain(p.routed.iter().flatten()).copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..64).collect::<Vec<_>>());
        prop_assert!(p.routed.iter().all(|g| g.len() == 64 / e));
        // Every shared neuron outranks every routed one.
        let worst_shared = p.shared.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let best_routed = p.routed.iter().flatten().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.shared.is_empty() || worst_shared >= best_routed);
    }

    #[test]
    fn snake_spread_beats_contiguous_blocks(scores in prop::collection::vec(0.0f64..1.0, 128)) {
        let p = partition_experts(&report(scores.clone()), 16).unwrap();
        let mut routed: Vec<usize> = p.routed.iter().flatten().copied().collect();
        routed.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let blocks: Vec<Vec<usize>> = routed.chunks(p.expert_size).map(<[usize]>::to_vec).collect();
        prop_assert!(spread(&p.routed, &scores) <= spread(&blocks, &scores) + 1e-12);
    }

    #[test]
    fn top_p_sets_have_rounded_size(scores in prop::collection::vec(-5.0f64..5.0, 1..80), p in 0.01f64..0.99) {
        let bits = top_p_set(&scores, p);
        prop_assert_eq!(bits.count_ones(), top_count(p, scores.len()));
        let chosen = bits.iter_ones().map(|i| scores[i]).fold(f64::INFINITY, f64::min);
        let rest = bits.iter_zeros().map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(chosen >= rest);
    }

    #[test]
    fn overlap_fractions_partition_the_union(
        a in prop::collection::vec(0.0f64..1.0, 32),
        b in prop::collection::vec(0.0f64..1.0, 32),
        p in 0.05f64..0.95,
    ) {
        let ab = overlap(&report(a.clone()), &report(b.clone()), p).unwrap();
        let ba = overlap(&report(b), &report(a), p).unwrap();
        prop_assert!((ab.und_only + ab.gen_only + ab.shared - 1.0).abs() < 1e-12);
        prop_assert_eq!(ab.shared, ba.shared);
        prop_assert_eq!(ab.und_only, ba.gen_only);
    }

    #[test]
    fn activity_sets_nest(obs in prop::collection::vec(prop::collection::vec(any::<bool>(), 16), 1..10)) {
        let sets: Vec<bitvec::vec::BitVec> = obs.iter().map(|o| o.iter().copied().collect()).collect();
        let (all, any) = activity_sets(&sets).unwrap();
        prop_assert!(all.iter().by_vals().zip(any.iter().by_vals()).all(|(a, e)| !a || e));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
        if let Ok(c) = cosine_similarity(&a, &b) {
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn width_plans_round_trip_through_jsonl(scores in prop::collection::vec(0.0f64..1.0, 16), ratio in 0.0f64..0.99) {
        let plan = plan_width(&report(scores), ratio).unwrap();
        prop_assert_eq!(plan.removals.len(), (ratio * 16.0).floor() as usize);
        let mut buf = Vec::new();
        plan.write_jsonl(&mut buf).unwrap();
        prop_assert_eq!(PruningPlan::read_jsonl(&buf[..]).unwrap(), plan);
    }
}
