//! Property tests for the numeric invariants.

use fine_core::factorized::expand_sigma;
use fine_core::model::{patchify, unpatchify};
use fine_core::tensor::{GradTape, Tensor};
use proptest::prelude::*;

fn finite_f64() -> impl Strategy<Value = f64> {
    (-50.0f64..50.0).prop_map(|v| v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..8,
        scale in 0.05f64..4.0,
        seed in any::<u64>(),
    ) {
        let mut rng = fine_core::DeskRng::seed_from(seed);
        let mut data = vec![0.0; rows * cols];
        rng.fill_gaussian(&mut data, 10.0);
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let mut tape = GradTape::<f64>::inference();
        let x = tape.constant(&t);
        let y = tape.softmax_rows(x, scale).unwrap();
        for row in tape.value(y).chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn patchify_roundtrips_bit_exactly(
        c in 1usize..3,
        grid in 1usize..5,
        p in 1usize..4,
        v in proptest::collection::vec(finite_f64(), 1..2),
    ) {
        let h = grid * p;
        let mut rng = fine_core::DeskRng::seed_from(v[0].to_bits());
        let img = Tensor::<f64>::gaussian(&[c, h, h], 1.0, &mut rng);
        let tokens = patchify(&img, p).unwrap();
        let back = unpatchify(&tokens, c, h, p).unwrap();
        let a: Vec<u64> = img.data.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = back.data.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn expand_sigma_replicates_groups(
        rank in 1usize..33,
        group in 1usize..9,
        seed in any::<u64>(),
    ) {
        let group = group.min(rank);
        let glen = rank.div_ceil(group);
        let mut rng = fine_core::DeskRng::seed_from(seed);
        let grouped = Tensor::<f64>::gaussian(&[glen], 1.0, &mut rng);
        let full = expand_sigma(&grouped, rank, group).unwrap();
        prop_assert_eq!(full.numel(), rank);
        for j in 0..rank {
            prop_assert_eq!(full.data[j], grouped.data[j / group]);
        }
    }

    #[test]
    fn variance_preservation_holds_for_any_schedule_length(t_diff in 1usize..500) {
        let sched = fine_core::diffusion::DiffusionSchedule::<f64>::linear(t_diff);
        for t in 0..t_diff {
            let ab: f64 = sched.alpha_bar[t];
            let s = ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2);
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
