//! Region similarity J, contour accuracy F and their per-dataset aggregates.
//!
//! Boundaries are foreground pixels with a 4-neighbour outside the object;
//! pixels beyond the image edge count as outside. F matches boundaries
//! within a disc of radius `tolerance` (Euclidean, inclusive).

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Integer label raster; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskRaster {
    width: usize,
    height: usize,
    ids: Vec<u8>,
}

impl MaskRaster {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || ids.len() != width * height {
            return Err(Error::invalid(format!(
                "mask {width}x{height} needs {} ids, got {}",
                width * height,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn filled(width: usize, height: usize, id: u8) -> Self {
        Self {
            width,
            height,
            ids: vec![id; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    /// Largest id present.
    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn binary(&self, object: u8) -> Vec<bool> {
        self.ids.iter().map(|&i| i == object).collect()
    }

    fn check_same_shape(&self, other: &MaskRaster) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch {
                op: "mask comparison",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }
}

/// Jaccard index of one object; 1 when both masks are empty.
pub fn region_similarity(pred: &MaskRaster, truth: &MaskRaster, object: u8) -> Result<f64> {
    pred.check_same_shape(truth)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.ids.iter().zip(&truth.ids) {
        let (p, t) = (p == object, t == object);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// `ceil(0.008 · diagonal)`, at least one pixel.
pub fn default_tolerance(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.008 * diag).ceil() as usize).max(1)
}

pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| {
        x >= 0
            && y >= 0
            && (x as usize) < width
            && (y as usize) < height
            && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

pub fn dilate(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if !mask[y as usize * width + x as usize] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    out[ny as usize * width + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure of one object at the given pixel tolerance.
pub fn contour_accuracy(
    pred: &MaskRaster,
    truth: &MaskRaster,
    object: u8,
    tolerance: usize,
) -> Result<f64> {
    pred.check_same_shape(truth)?;
    let (w, h) = (pred.width, pred.height);
    let pb = boundary(&pred.binary(object), w, h);
    let tb = boundary(&truth.binary(object), w, h);
    let n_pred = pb.iter().filter(|&&b| b).count();
    let n_truth = tb.iter().filter(|&&b| b).count();
    let (precision, recall) = match (n_pred, n_truth) {
        (0, 0) => return Ok(1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let td = dilate(&tb, w, h, tolerance);
            let pd = dilate(&pb, w, h, tolerance);
            let hit_p = pb.iter().zip(&td).filter(|(&b, &d)| b && d).count();
            let hit_t = tb.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
            (hit_p as f64 / n_pred as f64, hit_t as f64 / n_truth as f64)
        }
    };
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// Per-frame scores of one object track, first frame already excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackScores {
    pub sequence: String,
    pub object: u8,
    pub j: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSummary {
    pub sequence: String,
    pub object: u8,
    pub j_mean: f64,
    pub f_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScores {
    pub tracks: Vec<TrackSummary>,
    pub j_mean: f64,
    pub j_recall: f64,
    pub f_mean: f64,
    pub f_recall: f64,
    pub jf_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Means over tracks of per-track means; recalls count tracks above 0.5.
pub fn aggregate(tracks: &[TrackScores]) -> Result<SequenceScores> {
    if tracks.is_empty() {
        return Err(Error::invalid("aggregate: no tracks"));
    }
    let mut summaries = Vec::with_capacity(tracks.len());
    for t in tracks {
        if t.j.is_empty() || t.f.is_empty() {
            return Err(Error::invalid(format!(
                "aggregate: track {}/{} has no evaluated frames",
                t.sequence, t.object
            )));
        }
        summaries.push(TrackSummary {
            sequence: t.sequence.clone(),
            object: t.object,
            j_mean: mean(&t.j),
            f_mean: mean(&t.f),
        });
    }
    let js: Vec<f64> = summaries.iter().map(|s| s.j_mean).collect();
    let fs: Vec<f64> = summaries.iter().map(|s| s.f_mean).collect();
    let recall = |v: &[f64]| v.iter().filter(|&&x| x > 0.5).count() as f64 / v.len() as f64;
    let (j_mean, f_mean) = (mean(&js), mean(&fs));
    Ok(SequenceScores {
        j_mean,
        j_recall: recall(&js),
        f_mean,
        f_recall: recall(&fs),
        jf_mean: 0.5 * (j_mean + f_mean),
        tracks: summaries,
    })
}

impl SequenceScores {
    /// Tab-separated report: one row per track, then the global row in
    /// the order J&F_m, J_m, J_r, F_m, F_r.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("sequence\tobject\tJ_m\tF_m\n");
        for t in &self.tracks {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}",
                t.sequence, t.object, t.j_mean, t.f_mean
            );
        }
        s.push_str("#GLOBAL\tJ&F_m\tJ_m\tJ_r\tF_m\tF_r\n");
        let _ = writeln!(
            s,
            "GLOBAL\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.jf_mean, self.j_mean, self.j_recall, self.f_mean, self.f_recall
        );
        s
    }
}
