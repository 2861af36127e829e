use divgen_core::sampler::{circle_points, sample_many, EmbeddingSet, SamplePlan, SampleScheme};
use proptest::prelude::*;

fn set_strategy() -> impl Strategy<Value = EmbeddingSet> {
    (1usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n).prop_map(|rows| {
            let ids = (0..rows.len()).map(|i| format!("img{i}")).collect();
            EmbeddingSet::new(rows, ids, "test").unwrap()
        })
    })
}

fn plan_strategy() -> impl Strategy<Value = (EmbeddingSet, SamplePlan)> {
    (set_strategy(), any::<u64>(), any::<bool>(), 1usize..12).prop_map(|(set, seed, full, k)| {
        let plan = if full {
            SamplePlan::full_hull(16, seed)
        } else {
            SamplePlan::k_subset(k.min(set.len()), 16, seed)
        };
        (set, plan)
    })
}

proptest! {
    #[test]
    fn draws_are_convex_combinations((set, plan) in plan_strategy()) {
        for d in sample_many(&set, &plan).unwrap() {
            let expected_k = match plan.scheme {
                SampleScheme::FullHull => set.len(),
                SampleScheme::KSubset => plan.k,
            };
            prop_assert_eq!(d.indices.len(), expected_k);
            prop_assert_eq!(d.weights.len(), expected_k);
            let mut distinct = d.indices.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), expected_k);
            prop_assert!(d.weights.iter().all(|&w| w >= 0.0));
            prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for j in 0..set.dim() {
                let recon: f64 = d.indices.iter().zip(&d.weights).map(|(&i, w)| w * set.vectors[i][j]).sum();
                prop_assert!((recon - d.vector[j]).abs() < 1e-9);
                let lo = d.indices.iter().map(|&i| set.vectors[i][j]).fold(f64::INFINITY, f64::min);
                let hi = d.indices.iter().map(|&i| set.vectors[i][j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(d.vector[j] >= lo - 1e-9 && d.vector[j] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn same_plan_same_draws((set, plan) in plan_strategy()) {
        prop_assert_eq!(sample_many(&set, &plan).unwrap(), sample_many(&set, &plan).unwrap());
    }

    #[test]
    fn circle_draws_stay_inside_the_disc(n in 3usize..40, r in 0.1f64..5.0, seed in any::<u64>()) {
        let set = circle_points(n, r);
        for d in sample_many(&set, &SamplePlan::k_subset(3, 8, seed)).unwrap() {
            prop_assert!(d.vector[0].hypot(d.vector[1]) <= r + 1e-9);
        }
    }
}

#[test]
fn oversized_subset_is_rejected() {
    let set = circle_points(4, 1.0);
    assert!(sample_many(&set, &SamplePlan::k_subset(5, 1, 0)).is_err());
    assert!(sample_many(&set, &SamplePlan::k_subset(0, 1, 0)).is_err());
}
