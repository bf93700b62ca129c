//! Restricted-window propagation against an exhaustive sort-everything
//! reference.

mod common;

use common::propagation::{brute_force, instance, SIDE};
use ino_core::propagation::{propagate_frame, PropagationConfig};

#[test]
fn matches_exhaustive_reference_bitwise() {
    for seed in 0..120 {
        let (target, owned) = instance(seed);
        let context: Vec<_> = owned.iter().map(|(f, l)| (f, l)).collect();
        for radius in [2, 40] {
            let cfg = PropagationConfig {
                radius,
                ..PropagationConfig::default()
            };
            let fast = propagate_frame(&target, &context, &cfg).unwrap();
            let slow = brute_force(&target, &context, &cfg);
            assert!(
                fast.probs().iter().zip(&slow).all(|(a, b)| a.to_bits() == b.to_bits()),
                "seed {seed} radius {radius}"
            );
        }
    }
}

#[test]
fn wide_window_equals_unrestricted() {
    for seed in 200..220 {
        let (target, owned) = instance(seed);
        let context: Vec<_> = owned.iter().map(|(f, l)| (f, l)).collect();
        let at_grid = PropagationConfig {
            radius: SIDE,
            ..PropagationConfig::default()
        };
        let unrestricted = PropagationConfig {
            radius: usize::MAX / 4,
            ..PropagationConfig::default()
        };
        let a = propagate_frame(&target, &context, &at_grid).unwrap();
        let b = propagate_frame(&target, &context, &unrestricted).unwrap();
        assert_eq!(a.probs(), b.probs());
    }
}
