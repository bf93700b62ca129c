//! Blockwise token masks.

use crate::error::{Error, Result};
use crate::numerics::Rng;

const BLOCK_ASPECT: (f64, f64) = (1.0 / 3.0, 3.0);
const BLOCK_RETRIES: usize = 10;

/// Rectangle of token cells, `(row, col)` origin plus extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Boolean mask over a token grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPattern {
    pub grid: (usize, usize),
    pub cells: Vec<bool>,
    pub ratio: f64,
    /// Blocks whose union is exactly the masked set.
    pub blocks: Vec<Block>,
}

impl MaskPattern {
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Masked cell indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn from_cells(grid: (usize, usize), cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid.0 * grid.1 {
            return Err(Error::invalid(format!(
                "mask of {} cells on a {}x{} grid",
                cells.len(),
                grid.0,
                grid.1
            )));
        }
        let blocks = cells
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| Block {
                row: i / grid.1,
                col: i % grid.1,
                rows: 1,
                cols: 1,
            })
            .collect();
        let ratio = cells.iter().filter(|&&m| m).count() as f64 / cells.len() as f64;
        Ok(Self {
            grid,
            cells,
            ratio,
            blocks,
        })
    }
}

pub fn mask_count(tokens: usize, ratio: f64) -> usize {
    ((tokens as f64 * ratio).round() as usize).min(tokens)
}

fn draw_block(grid: (usize, usize), remaining: usize, rng: &mut Rng) -> Block {
    let (gh, gw) = grid;
    let (la, lb) = (BLOCK_ASPECT.0.ln(), BLOCK_ASPECT.1.ln());
    for _ in 0..BLOCK_RETRIES {
        let area = rng.uniform_range(1.0, remaining as f64);
        let aspect = rng.uniform_range(la, lb).exp();
        let rows = (area * aspect).sqrt().round() as usize;
        let cols = (area / aspect).sqrt().round() as usize;
        if (1..=gh).contains(&rows) && (1..=gw).contains(&cols) {
            return Block {
                row: rng.below_usize(gh - rows + 1),
                col: rng.below_usize(gw - cols + 1),
                rows,
                cols,
            };
        }
    }
    Block {
        row: rng.below_usize(gh),
        col: rng.below_usize(gw),
        rows: 1,
        cols: 1,
    }
}

/// Places random rectangles until exactly `count` cells are set. The
/// block that overshoots is trimmed in row-major order.
pub fn blockwise_mask(grid: (usize, usize), count: usize, rng: &mut Rng) -> MaskPattern {
    let n = grid.0 * grid.1;
    let count = count.min(n);
    let mut cells = vec![false; n];
    let mut blocks = Vec::new();
    let mut set = 0;
    while set < count {
        let b = draw_block(grid, count - set, rng);
        let mut last_new: Option<usize> = None;
        for r in b.row..b.row + b.rows {
            for c in b.col..b.col + b.cols {
                if set == count {
                    break;
                }
                let i = r * grid.1 + c;
                if !cells[i] {
                    cells[i] = true;
                    set += 1;
                    last_new = Some(i);
                }
            }
        }
        if let Some(last) = last_new {
            blocks.extend(trimmed_block(b, grid.1, last));
        }
    }
    MaskPattern {
        grid,
        cells,
        ratio: count as f64 / n as f64,
        blocks,
    }
}

/// The part of `b` up to and including flat cell `last`, as at most two
/// rectangles: the complete rows, then the partial final row.
fn trimmed_block(b: Block, width: usize, last: usize) -> Vec<Block> {
    let (lr, lc) = (last / width, last % width);
    if lr == b.row + b.rows - 1 && lc == b.col + b.cols - 1 {
        return vec![b];
    }
    let mut out = Vec::new();
    if lr > b.row {
        out.push(Block {
            row: b.row,
            col: b.col,
            rows: lr - b.row,
            cols: b.cols,
        });
    }
    out.push(Block {
        row: lr,
        col: b.col,
        rows: 1,
        cols: lc - b.col + 1,
    });
    out
}

/// Gated draw for one clip: `None` with probability `1 − gate`; otherwise
/// one ratio for the clip and an independent pattern per frame.
pub fn sample_clip_masks(
    grid: (usize, usize),
    frames: usize,
    rng: &mut Rng,
    gate: f64,
    ratio_range: (f64, f64),
) -> Option<Vec<MaskPattern>> {
    if !rng.bernoulli(gate) {
        return None;
    }
    let ratio = rng.uniform_range(ratio_range.0, ratio_range.1);
    let count = mask_count(grid.0 * grid.1, ratio);
    if count == 0 {
        return None;
    }
    Some(
        (0..frames)
            .map(|_| {
                let mut m = blockwise_mask(grid, count, rng);
                m.ratio = ratio;
                m
            })
            .collect(),
    )
}

/// Single-pattern draw on a square grid of `tokens` cells.
pub fn sample_mask(
    tokens: usize,
    rng: &mut Rng,
    gate: f64,
    ratio_range: (f64, f64),
) -> Result<Option<MaskPattern>> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens || tokens == 0 {
        return Err(Error::invalid(format!(
            "sample_mask: {tokens} tokens is not a square grid"
        )));
    }
    Ok(sample_clip_masks((side, side), 1, rng, gate, ratio_range).map(|mut v| v.remove(0)))
}
