use crate::error::{Error, Result};

/// Frames `n` and `n + L/2` of a clip, zero-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FramePairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl FramePairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn one_based(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|&(a, b)| (a + 1, b + 1)).collect()
    }
}

/// Splits a clip of `len` frames into halves and zips them.
pub fn make_frame_pairs(len: usize) -> Result<FramePairSet> {
    if len < 2 || len % 2 != 0 {
        return Err(Error::invalid(format!(
            "clip length {len} must be even and at least 2"
        )));
    }
    let half = len / 2;
    Ok(FramePairSet {
        pairs: (0..half).map(|n| (n, n + half)).collect(),
    })
}
