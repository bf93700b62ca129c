//! Exhaustive sort-everything reference for restricted-window propagation.

use ino_core::propagation::{FeatureMap, LabelMap, PropagationConfig};
use ino_core::Rng;

pub const SIDE: usize = 16;
const DIM: usize = 6;
const CLASSES: usize = 3;

fn random_features(rng: &mut Rng, quantized: bool) -> FeatureMap {
    // Quantized features repeat exactly, which exercises tie-breaking.
    let data = (0..SIDE * SIDE * DIM)
        .map(|_| {
            if quantized {
                (rng.next_u64() % 3) as f64 - 1.0 + 1e-3
            } else {
                rng.normal()
            }
        })
        .collect();
    FeatureMap::normalized(SIDE, SIDE, DIM, data, 0).unwrap()
}

fn random_labels(rng: &mut Rng) -> LabelMap {
    let mut probs = Vec::with_capacity(SIDE * SIDE * CLASSES);
    for _ in 0..SIDE * SIDE {
        let raw: Vec<f64> = (0..CLASSES).map(|_| rng.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|x| x / s));
    }
    LabelMap::new(SIDE, SIDE, CLASSES, probs).unwrap()
}

/// Scores every in-window context cell, sorts them all, keeps the first k.
pub fn brute_force(target: &FeatureMap, context: &[(&FeatureMap, &LabelMap)], cfg: &PropagationConfig) -> Vec<f64> {
    let (h, w) = target.grid();
    let rad = cfg.radius as isize;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let q = target.cell(r * w + c);
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for (k, (f, _)) in context.iter().enumerate() {
                for cell in 0..h * w {
                    let (rr, cc) = ((cell / w) as isize, (cell % w) as isize);
                    if (rr - r as isize).abs() > rad || (cc - c as isize).abs() > rad {
                        continue;
                    }
                    let mut sim = 0.0;
                    for (a, b) in q.iter().zip(f.cell(cell)) {
                        sim += a * b;
                    }
                    all.push((sim, k, cell));
                }
            }
            all.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(b.1.cmp(&a.1))
                    .then(a.2.cmp(&b.2))
            });
            all.truncate(cfg.top_k);
            let max = all[0].0;
            let weights: Vec<f64> = all.iter().map(|s| ((s.0 - max) / cfg.temperature).exp()).collect();
            let z: f64 = weights.iter().sum();
            let mut acc = [0.0; CLASSES];
            for (s, wt) in all.iter().zip(&weights) {
                for (a, &l) in acc.iter_mut().zip(context[s.1].1.cell(s.2)) {
                    *a += wt / z * l;
                }
            }
            let total: f64 = acc.iter().sum();
            out.extend(acc.iter().map(|a| a / total));
        }
    }
    out
}

pub fn instance(seed: u64) -> (FeatureMap, Vec<(FeatureMap, LabelMap)>) {
    let mut rng = Rng::new(seed);
    let quantized = seed % 4 == 0;
    let frames = 1 + (rng.next_u64() % 11) as usize;
    let target = random_features(&mut rng, quantized);
    let context = (0..frames)
        .map(|_| (random_features(&mut rng, quantized), random_labels(&mut rng)))
        .collect();
    (target, context)
}
