//! First-frame label propagation by restricted-window feature matching.
//!
//! Each target cell compares its feature against context cells within a
//! square window of the same grid position, keeps the `top_k` most similar
//! across all context frames, and takes a softmax-weighted vote of their
//! label distributions.

use crate::error::{Error, Result};
use crate::metrics::MaskRaster;
use crate::numerics::{Real, Tensor};

/// Tolerance on the unit norm of feature vectors.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationConfig {
    pub top_k: usize,
    /// Number of most recent propagated frames kept as context, besides the
    /// first frame.
    pub context: usize,
    /// Chebyshev radius of the search window, in grid cells.
    pub radius: usize,
    pub temperature: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            context: 10,
            radius: 40,
            temperature: 0.07,
        }
    }
}

impl PropagationConfig {
    /// Settings for long videos.
    pub fn long_video() -> Self {
        Self {
            context: 20,
            radius: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.radius == 0 {
            return Err(Error::Config("top_k and radius must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "propagation temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// An `h × w` grid of unit-norm feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f64>,
    pub frame: usize,
}

impl FeatureMap {
    /// `data` holds `height·width` vectors of length `dim`, row-major.
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>, frame: usize) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 || data.len() != height * width * dim {
            return Err(Error::InvalidShape {
                op: "FeatureMap::new",
                shape: vec![height, width, dim],
                reason: format!("{} values", data.len()),
            });
        }
        let map = Self {
            height,
            width,
            dim,
            data,
            frame,
        };
        for cell in 0..height * width {
            let n = map.cell(cell).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(format!(
                    "feature cell {cell} of frame {frame} has norm {n}"
                )));
            }
        }
        Ok(map)
    }

    /// Normalizes each cell of arbitrary features to unit length.
    pub fn normalized(height: usize, width: usize, dim: usize, mut data: Vec<f64>, frame: usize) -> Result<Self> {
        if dim > 0 {
            for cell in data.chunks_mut(dim) {
                let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    cell.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Self::new(height, width, dim, data, frame)
    }

    /// From an `[h, w, D]` tensor of unit rows.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, frame: usize) -> Result<Self> {
        let &[h, w, d] = t.shape() else {
            return Err(Error::InvalidShape {
                op: "FeatureMap::from_tensor",
                shape: t.shape().to_vec(),
                reason: "expected [h, w, D]".into(),
            });
        };
        Self::new(h, w, d, t.data().iter().map(|v| v.to_f64_lossy()).collect(), frame)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Feature of the row-major cell index.
    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// Per-cell probability vectors over `classes` labels (background is 0).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: usize,
    probs: Vec<f64>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || classes == 0 || probs.len() != height * width * classes {
            return Err(Error::InvalidShape {
                op: "LabelMap::new",
                shape: vec![height, width, classes],
                reason: format!("{} values", probs.len()),
            });
        }
        Ok(Self {
            height,
            width,
            classes,
            probs,
        })
    }

    pub fn one_hot(height: usize, width: usize, classes: usize, ids: &[u8]) -> Result<Self> {
        let mut probs = vec![0.0; height * width * classes];
        for (cell, &id) in ids.iter().enumerate() {
            if id as usize >= classes {
                return Err(Error::invalid(format!("label {id} outside {classes} classes")));
            }
            probs[cell * classes + id as usize] = 1.0;
        }
        Self::new(height, width, classes, probs)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.probs[index * self.classes..(index + 1) * self.classes]
    }

    /// Most probable label per cell; ties go to the lower id.
    pub fn argmax(&self) -> Vec<u8> {
        self.probs
            .chunks(self.classes)
            .map(|p| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Hard mask at pixel resolution by nearest-neighbour upsampling of the
    /// per-cell argmax.
    pub fn to_mask(&self, width: usize, height: usize) -> MaskRaster {
        let ids = self.argmax();
        let mut mask = MaskRaster::filled(width, height, 0);
        for y in 0..height {
            let r = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let c = (x * self.width / width).min(self.width - 1);
                mask.set(x, y, ids[r * self.width + c]);
            }
        }
        mask
    }

    /// Soft probabilities as an `[h, w, classes]` tensor.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.height, self.width, self.classes], self.probs.clone())
            .expect("label map shape is consistent")
    }
}

/// Downsamples a mask to an `h × w` grid by per-cell majority vote over the
/// pixels each cell covers (ties to the lower id), as one-hot labels over
/// `max_id + 1` classes.
pub fn init_labels(mask: &MaskRaster, grid: (usize, usize)) -> Result<LabelMap> {
    let (h, w) = grid;
    let (mw, mh) = (mask.width(), mask.height());
    if h == 0 || w == 0 || mw == 0 || mh == 0 {
        return Err(Error::invalid(format!(
            "cannot map a {mw}x{mh} mask onto a {h}x{w} grid"
        )));
    }
    if h > mh || w > mw {
        return Err(Error::invalid(format!(
            "grid {h}x{w} is finer than the {mw}x{mh} mask"
        )));
    }
    let classes = mask.max_id() as usize + 1;
    let mut ids = Vec::with_capacity(h * w);
    let mut counts = vec![0usize; classes];
    for r in 0..h {
        for c in 0..w {
            counts.iter_mut().for_each(|n| *n = 0);
            for y in r * mh / h..(r + 1) * mh / h {
                for x in c * mw / w..(c + 1) * mw / w {
                    counts[mask.get(x, y) as usize] += 1;
                }
            }
            let mut best = 0;
            for (id, &n) in counts.iter().enumerate() {
                if n > counts[best] {
                    best = id;
                }
            }
            ids.push(best as u8);
        }
    }
    LabelMap::one_hot(h, w, classes, &ids)
}

/// A candidate context cell: similarity, position in the context list
/// (later is more recent) and row-major cell index.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    sim: f64,
    context: usize,
    cell: usize,
}

impl Candidate {
    /// Higher similarity first, then the more recent frame, then row-major
    /// order.
    fn beats(&self, other: &Candidate) -> bool {
        if self.sim != other.sim {
            return self.sim > other.sim;
        }
        if self.context != other.context {
            return self.context > other.context;
        }
        self.cell < other.cell
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn check_inputs(target: &FeatureMap, context: &[(&FeatureMap, &LabelMap)]) -> Result<usize> {
    let Some((_, first_labels)) = context.first() else {
        return Err(Error::invalid("propagation needs at least one context frame"));
    };
    let classes = first_labels.classes();
    for (f, l) in context {
        if f.grid() != target.grid() || l.grid() != target.grid() || f.dim() != target.dim() {
            return Err(Error::ShapeMismatch {
                op: "propagate_frame",
                lhs: vec![target.height(), target.width(), target.dim()],
                rhs: vec![f.height(), f.width(), f.dim()],
            });
        }
        if l.classes() != classes {
            return Err(Error::invalid(format!(
                "context label maps disagree on class count ({} vs {classes})",
                l.classes()
            )));
        }
    }
    Ok(classes)
}

/// Labels for one target frame.
///
/// `context` is ordered oldest first; the first entry is the annotated
/// frame. Tied similarities prefer later context entries, then lower
/// row-major cell index.
pub fn propagate_frame(
    target: &FeatureMap,
    context: &[(&FeatureMap, &LabelMap)],
    cfg: &PropagationConfig,
) -> Result<LabelMap> {
    cfg.validate()?;
    let classes = check_inputs(target, context)?;
    let (h, w) = target.grid();
    let rad = cfg.radius;
    let mut probs = Vec::with_capacity(h * w * classes);
    let mut top: Vec<Candidate> = Vec::with_capacity(cfg.top_k + 1);
    let mut warned = false;

    for r in 0..h {
        let rows = r.saturating_sub(rad)..(r + rad + 1).min(h);
        for c in 0..w {
            let cols = c.saturating_sub(rad)..(c + rad + 1).min(w);
            let q = target.cell(r * w + c);
            top.clear();
            for (k, (f, _)) in context.iter().enumerate() {
                for rr in rows.clone() {
                    for cc in cols.clone() {
                        let cell = rr * w + cc;
                        let cand = Candidate {
                            sim: dot(q, f.cell(cell)),
                            context: k,
                            cell,
                        };
                        if top.len() == cfg.top_k && !cand.beats(&top[top.len() - 1]) {
                            continue;
                        }
                        let at = top.iter().position(|t| cand.beats(t)).unwrap_or(top.len());
                        top.insert(at, cand);
                        top.truncate(cfg.top_k);
                    }
                }
            }
            if top.len() < cfg.top_k && !warned {
                log::debug!(
                    "only {} candidates for top-{} at cell ({r}, {c})",
                    top.len(),
                    cfg.top_k
                );
                warned = true;
            }
            vote(&top, context, classes, cfg.temperature, &mut probs);
        }
    }
    LabelMap::new(h, w, classes, probs)
}

/// Softmax-weighted sum of the selected cells' labels, renormalized, in
/// the selection order.
fn vote(
    selected: &[Candidate],
    context: &[(&FeatureMap, &LabelMap)],
    classes: usize,
    temperature: f64,
    out: &mut Vec<f64>,
) {
    let max = selected[0].sim;
    let weights: Vec<f64> = selected
        .iter()
        .map(|s| ((s.sim - max) / temperature).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let mut acc = vec![0.0; classes];
    for (s, wt) in selected.iter().zip(&weights) {
        let labels = context[s.context].1.cell(s.cell);
        for (a, &l) in acc.iter_mut().zip(labels) {
            *a += wt / z * l;
        }
    }
    let total: f64 = acc.iter().sum();
    out.extend(acc.iter().map(|a| a / total));
}

/// Propagates the first frame's mask through the whole video.
///
/// Frame 0 keeps its one-hot labels; every later frame is matched against
/// frame 0 and up to `cfg.context` most recent predicted (soft) label maps.
pub fn propagate_video(
    frames: &[FeatureMap],
    first_mask: &MaskRaster,
    cfg: &PropagationConfig,
) -> Result<Vec<LabelMap>> {
    cfg.validate()?;
    let Some(first) = frames.first() else {
        return Err(Error::invalid("propagate_video needs at least one frame"));
    };
    let mut labels = vec![init_labels(first_mask, first.grid())?];
    for t in 1..frames.len() {
        let start = t.saturating_sub(cfg.context).max(1);
        let mut context = vec![(&frames[0], &labels[0])];
        context.extend((start..t).map(|i| (&frames[i], &labels[i])));
        let next = propagate_frame(&frames[t], &context, cfg)?;
        labels.push(next);
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = crate::Rng::new(seed);
        let data = (0..h * w * 4).map(|_| rng.normal()).collect();
        FeatureMap::normalized(h, w, 4, data, 0).unwrap()
    }

    #[test]
    fn uniform_background_mask() {
        let m = MaskRaster::filled(8, 8, 0);
        let l = init_labels(&m, (4, 4)).unwrap();
        assert_eq!(l.classes(), 1);
        assert!(l.probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn aligned_mask_transfers_exactly() {
        let mut m = MaskRaster::filled(4, 4, 0);
        for y in 0..2 {
            for x in 2..4 {
                m.set(x, y, 2);
            }
        }
        let l = init_labels(&m, (2, 2)).unwrap();
        assert_eq!(l.argmax(), vec![0, 2, 0, 0]);
        assert_eq!(l.classes(), 3);
    }

    #[test]
    fn majority_and_ties() {
        let mut m = MaskRaster::filled(2, 2, 0);
        m.set(1, 1, 1);
        assert_eq!(init_labels(&m, (1, 1)).unwrap().argmax(), vec![0]);
        m.set(0, 1, 1);
        // 2 vs 2: lower id wins.
        assert_eq!(init_labels(&m, (1, 1)).unwrap().argmax(), vec![0]);
        m.set(1, 0, 1);
        assert_eq!(init_labels(&m, (1, 1)).unwrap().argmax(), vec![1]);
    }

    #[test]
    fn init_rejects_empty_grid() {
        let m = MaskRaster::filled(4, 4, 0);
        assert!(init_labels(&m, (0, 2)).is_err());
    }

    #[test]
    fn self_match_copies_labels() {
        let f = features(5, 6, 1);
        let ids: Vec<u8> = (0..30).map(|i| (i % 3) as u8).collect();
        let l = LabelMap::one_hot(5, 6, 3, &ids).unwrap();
        let cfg = PropagationConfig {
            top_k: 1,
            ..Default::default()
        };
        let out = propagate_frame(&f, &[(&f, &l)], &cfg).unwrap();
        assert_eq!(out, l);
    }

    #[test]
    fn equal_similarities_split_evenly() {
        let data = vec![1.0, 0.0, 1.0, 0.0];
        let ctx = FeatureMap::new(1, 2, 2, data.clone(), 0).unwrap();
        let target = FeatureMap::new(1, 2, 2, data, 1).unwrap();
        let l = LabelMap::one_hot(1, 2, 2, &[0, 1]).unwrap();
        let cfg = PropagationConfig {
            top_k: 2,
            ..Default::default()
        };
        let out = propagate_frame(&target, &[(&ctx, &l)], &cfg).unwrap();
        assert_eq!(out.probs(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn outputs_are_distributions() {
        let target = features(6, 6, 2);
        let a = features(6, 6, 3);
        let b = features(6, 6, 4);
        let ids: Vec<u8> = (0..36).map(|i| (i % 4) as u8).collect();
        let la = LabelMap::one_hot(6, 6, 4, &ids).unwrap();
        let lb = LabelMap::new(6, 6, 4, vec![0.25; 144]).unwrap();
        let cfg = PropagationConfig {
            radius: 2,
            ..Default::default()
        };
        let out = propagate_frame(&target, &[(&a, &la), (&b, &lb)], &cfg).unwrap();
        for cell in out.probs().chunks(4) {
            assert!(cell.iter().all(|&p| (0.0..=1.0).contains(&p)));
            assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn one_frame_video_returns_initial_labels() {
        let f = features(4, 4, 5);
        let mut m = MaskRaster::filled(8, 8, 0);
        m.set(3, 3, 1);
        let out = propagate_video(&[f.clone()], &m, &Default::default()).unwrap();
        assert_eq!(out, vec![init_labels(&m, (4, 4)).unwrap()]);
    }

    #[test]
    fn constant_video_keeps_first_labels() {
        let f = features(4, 4, 6);
        let mut m = MaskRaster::filled(4, 4, 0);
        m.set(1, 1, 1);
        m.set(2, 1, 1);
        let frames = vec![f.clone(), f.clone(), f.clone(), f];
        let out = propagate_video(&frames, &m, &Default::default()).unwrap();
        let first = out[0].argmax();
        for l in &out {
            assert_eq!(l.argmax(), first);
        }
    }

    #[test]
    fn mask_upsampling_is_nearest() {
        let l = LabelMap::one_hot(2, 2, 2, &[0, 1, 1, 0]).unwrap();
        let m = l.to_mask(4, 4);
        assert_eq!(m.get(2, 0), 1);
        assert_eq!(m.get(3, 1), 1);
        assert_eq!(m.get(1, 1), 0);
        assert_eq!(m.get(0, 3), 1);
    }

    #[test]
    fn rejects_non_unit_features() {
        assert!(FeatureMap::new(1, 1, 2, vec![1.0, 1.0], 0).is_err());
    }
}
