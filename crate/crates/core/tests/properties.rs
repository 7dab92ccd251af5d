//! Property tests for the algebraic invariants of the moment stack.

use auxgmm::augmented::{
    build_augmented_moments, AugmentedSystem, ObservationRecord, PackedParameters, XyPair,
};
use auxgmm::inference::confidence_interval;
use auxgmm::moments::{Link, MomentModel};
use nalgebra::DVector;
use proptest::prelude::*;

fn finite_value() -> impl Strategy<Value = f64> {
    -10.0..10.0f64
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(finite_value(), d)
}

fn record(d: usize, num_aux: usize, labeled: bool) -> impl Strategy<Value = ObservationRecord> {
    let pair = move || (vector(d), finite_value()).prop_map(|(x, y)| XyPair::new(DVector::from_vec(x), y));
    (
        prop::collection::vec(pair(), num_aux),
        pair(),
    )
        .prop_map(move |(aux, real)| {
            if labeled {
                ObservationRecord::labeled("r", real, aux)
            } else {
                ObservationRecord::unlabeled("r", aux)
            }
        })
}

proptest! {
    #[test]
    fn pack_unpack_roundtrips(
        d in 1usize..4,
        num_aux in 0usize..3,
        values in prop::collection::vec(finite_value(), 16),
    ) {
        let model = MomentModel::new(d, Link::Identity).unwrap();
        let system = AugmentedSystem::new(model, num_aux);
        let flat = DVector::from_vec(values[..system.total_params()].to_vec());
        let packed = PackedParameters::from_flat(&system, &flat).unwrap();
        prop_assert_eq!(packed.flatten(), flat);
    }

    #[test]
    fn moment_vector_has_block_dimension(
        (d, num_aux, link, rec) in (1usize..4, 0usize..3, any::<bool>(), any::<bool>())
            .prop_flat_map(|(d, num_aux, labeled, logistic)| {
                let link = if logistic { Link::Logistic } else { Link::Identity };
                record(d, num_aux, labeled).prop_map(move |rec| (d, num_aux, link, rec))
            }),
    ) {
        let model = MomentModel::new(d, link).unwrap();
        let system = AugmentedSystem::new(model, num_aux);
        let params = PackedParameters::zeros(&system);
        let g = build_augmented_moments(&system, &rec, &params).unwrap();
        prop_assert_eq!(g.len(), model.num_moments() * (1 + 2 * num_aux));
    }

    #[test]
    fn unlabeled_rows_have_zero_masked_blocks(
        rec in record(2, 2, false),
        theta in vector(2),
        eta1 in vector(2),
        eta2 in vector(2),
    ) {
        let model = MomentModel::new(2, Link::Logistic).unwrap();
        let system = AugmentedSystem::new(model, 2);
        let params = PackedParameters::new(
            DVector::from_vec(theta),
            vec![DVector::from_vec(eta1), DVector::from_vec(eta2)],
        );
        let g = build_augmented_moments(&system, &rec, &params).unwrap();
        for i in 0..6 {
            prop_assert_eq!(g[i], 0.0);
        }
    }

    #[test]
    fn labeled_rows_duplicate_aux_blocks(
        rec in record(2, 2, true),
        theta in vector(2),
        eta1 in vector(2),
        eta2 in vector(2),
    ) {
        let model = MomentModel::new(2, Link::Identity).unwrap();
        let system = AugmentedSystem::new(model, 2);
        let params = PackedParameters::new(
            DVector::from_vec(theta),
            vec![DVector::from_vec(eta1), DVector::from_vec(eta2)],
        );
        let g = build_augmented_moments(&system, &rec, &params).unwrap();
        for i in 0..2usize {
            let masked = g.rows(2 * (1 + i), 2).into_owned();
            let unmasked = g.rows(2 * (3 + i), 2).into_owned();
            prop_assert_eq!(masked, unmasked);
        }
    }

    #[test]
    fn intervals_are_ordered_and_symmetric(
        estimate in finite_value(),
        se in 0.0..5.0f64,
        level in 0.5..0.999f64,
    ) {
        let ci = confidence_interval(estimate, se, level).unwrap();
        prop_assert!(ci.lower <= ci.upper);
        let midpoint = 0.5 * (ci.lower + ci.upper);
        prop_assert!((midpoint - estimate).abs() <= 1e-9 * estimate.abs().max(1.0));
    }
}
