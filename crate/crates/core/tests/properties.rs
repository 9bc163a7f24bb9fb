//! Property tests for the invariants that hold across the whole input
//! space rather than on picked examples.

use proptest::prelude::*;

use bitbreaker_core::genbfa::{crossover, mutate, Solution};
use bitbreaker_core::qtensor::{QuantFormat, QuantizedTensor};
use bitbreaker_core::rng::stream;
use bitbreaker_core::{normalize, top_k_indices};

proptest! {
    // Min-max normalization is strictly monotone when max > min, so any
    // positive affine rescaling leaves the top-k selection unchanged.
    #[test]
    fn topk_invariant_under_positive_affine(
        values in prop::collection::vec(-1e3f64..1e3, 2..60),
        scale in 1e-3f64..1e3,
        shift in -1e3f64..1e3,
        k_frac in 0.0f64..1.0,
    ) {
        let k = 1 + ((values.len() - 1) as f64 * k_frac) as usize;
        let rescaled: Vec<f64> = values.iter().map(|v| scale * v + shift).collect();
        let a = top_k_indices(&normalize(&values).unwrap(), k).unwrap();
        let b = top_k_indices(&normalize(&rescaled).unwrap(), k).unwrap();
        prop_assert_eq!(a, b);
    }

    // Flips are involutions for the formats without a clamp.
    #[test]
    fn int8_flip_involution(code in 0u8..=255, pos in 0u8..8, scale in 1e-6f64..1e3) {
        let mut t = QuantizedTensor::new(QuantFormat::Int8, 1, 1, vec![code], scale).unwrap();
        t.flip_bit(0, pos).unwrap();
        prop_assert_eq!(t.codes()[0], code ^ (1 << pos));
        t.flip_bit(0, pos).unwrap();
        prop_assert_eq!(t.codes()[0], code);
    }

    #[test]
    fn nf4_flip_involution(code in 0u8..16, pos in 0u8..4) {
        let mut t = QuantizedTensor::new(QuantFormat::Nf4, 1, 1, vec![code], 1.0).unwrap();
        t.flip_bit(0, pos).unwrap();
        t.flip_bit(0, pos).unwrap();
        prop_assert_eq!(t.codes()[0], code);
    }

    // Mutation only removes; output stays a non-empty ordered subset.
    #[test]
    fn mutation_is_removal_only(
        len in 1usize..80,
        rate in 1e-6f64..1.0,
        seed in any::<u64>(),
    ) {
        let sol = Solution { indices: (0..len).map(|i| i * 3).collect() };
        let mut rng = stream(seed, &[0xAB]);
        let out = mutate(&sol, rate, &mut rng);
        prop_assert!(!out.is_empty());
        prop_assert!(out.len() <= sol.len());
        // Order-preserving subsequence of the input.
        let mut it = sol.indices.iter();
        for g in &out.indices {
            prop_assert!(it.any(|x| x == g));
        }
    }

    // Crossover outputs unique genes drawn from its two sources.
    #[test]
    fn crossover_closure(
        parent_len in 1usize..30,
        best_len in 1usize..30,
        pc in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let parent = Solution { indices: (0..parent_len).collect() };
        let best = Solution { indices: (0..best_len).map(|i| i + 100).collect() };
        let mut rng = stream(seed, &[0xCD]);
        let child = crossover(&parent, &best, pc, &mut rng);
        prop_assert!(!child.is_empty());
        let mut seen = std::collections::HashSet::new();
        for g in &child.indices {
            prop_assert!(seen.insert(*g));
            prop_assert!(parent.indices.contains(g) || best.indices.contains(g));
        }
    }

    // The score of every weight stays inside [0, 1] for any mix.
    #[test]
    fn sscore_bounded(
        w in prop::collection::vec(0.0f64..1e6, 1..50),
        g_seed in any::<u64>(),
        alpha in 0.0f64..=1.0,
    ) {
        let g: Vec<f64> = w.iter().enumerate()
            .map(|(i, _)| ((g_seed.wrapping_add(i as u64 * 0x9e37) % 1000) as f64) / 7.0)
            .collect();
        let s = bitbreaker_core::sscore(&w, &g, alpha).unwrap();
        prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
