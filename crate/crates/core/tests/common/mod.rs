#![allow(dead_code)]

pub mod propagation;

#[allow(unused_imports)]
pub use ino_core::harness::gradients::{random_image, spread, MicroProblem as Micro};
use ino_core::numerics::GradCheckReport;

pub fn micro_problem(seed: u64, with_masks: bool) -> Micro {
    ino_core::harness::gradients::micro_problem(seed, with_masks, 0.0)
}

pub fn micro_problem_spread(seed: u64, with_masks: bool, noise: f64) -> Micro {
    ino_core::harness::gradients::micro_problem(seed, with_masks, noise)
}

pub fn term_reports(m: &Micro, names: &[&str], h: f64) -> Vec<(&'static str, GradCheckReport)> {
    ino_core::harness::gradients::term_reports(m, names, h).unwrap()
}
