//! Distribution-matching losses, cross-frame affinity consistency and the
//! teacher's EMA parameters and running centers.
//!
//! Batched row layouts used throughout (B clips of L frames, M locals):
//!
//! - class distributions of globals: `[B·L × k]`, row `b·L + i`
//! - class distributions of locals: `[B·L·M × k]`, row `(b·L + i)·M + j`
//!
//! Every loss is the per-clip value averaged over the B clips.

pub mod step;

pub use step::{
    student_losses, teacher_targets, LossVars, ObjectiveSet, StepInputs, TeacherTargets,
};

use crate::encoder::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::views::{FramePairSet, MaskPattern};

pub const EMA_MOMENTUM: f64 = 0.996;
pub const CENTER_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureConfig {
    pub student: f64,
    pub teacher: f64,
}

impl Default for TemperatureConfig {
    fn default() -> Self {
        Self {
            student: 0.1,
            teacher: 0.04,
        }
    }
}

impl TemperatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.student > 0.0 && self.teacher > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.teacher > self.student {
            return Err(Error::Config(format!(
                "teacher temperature {} exceeds student temperature {}",
                self.teacher, self.student
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    Cls,
    Patch,
}

/// EMA copy of the student plus running output centers.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState<T> {
    pub params: ParamStore<T>,
    pub center_cls: Tensor<T>,
    pub center_patch: Tensor<T>,
}

impl<T: Real> TeacherState<T> {
    /// Teacher initialised as a copy of the student with zero centers.
    pub fn new(student: &ParamStore<T>, k: usize) -> Self {
        Self {
            params: student.clone(),
            center_cls: Tensor::zeros(&[k]),
            center_patch: Tensor::zeros(&[k]),
        }
    }

    pub fn center(&self, kind: OutputKind) -> &Tensor<T> {
        match kind {
            OutputKind::Cls => &self.center_cls,
            OutputKind::Patch => &self.center_patch,
        }
    }

    /// `θ_t ← m·θ_t + (1 − m)·θ_s` for every tensor.
    pub fn ema_update(&mut self, student: &ParamStore<T>, momentum: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        self.params.check_layout(student)?;
        let m = T::from_f64_lossy(momentum);
        let one_minus = T::from_f64_lossy(1.0 - momentum);
        for (t, s) in self.params.tensors_mut().iter_mut().zip(student.tensors()) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = m * *a + one_minus * b;
            }
        }
        Ok(())
    }

    /// Moves the chosen center toward the row mean of raw teacher logits.
    pub fn center_update(&mut self, kind: OutputKind, logits: &Tensor<T>, momentum: f64) -> Result<()> {
        let center = match kind {
            OutputKind::Cls => &mut self.center_cls,
            OutputKind::Patch => &mut self.center_patch,
        };
        let (rows, cols) = logits.as_matrix_dims();
        if rows == 0 || logits.rank() != 2 || cols != center.numel() {
            return Err(Error::ShapeMismatch {
                op: "center_update",
                lhs: logits.shape().to_vec(),
                rhs: center.shape().to_vec(),
            });
        }
        logits.ensure_finite("teacher logits")?;
        let mean = kernels::mean_rows(logits);
        let m = T::from_f64_lossy(momentum);
        let one_minus = T::from_f64_lossy(1.0 - momentum);
        for (c, &x) in center.data_mut().iter_mut().zip(mean.data()) {
            *c = m * *c + one_minus * x;
        }
        center.ensure_finite("teacher center")
    }
}

/// `softmax((logits − center) / τ_t)` per row, outside any tape.
pub fn teacher_distribution<T: Real>(logits: &Tensor<T>, center: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    logits.ensure_finite("teacher logits")?;
    let centered = kernels::add_row(logits, &kernels::scale(center, -T::one()))?;
    kernels::softmax_t(&centered, centered.rank() - 1, tau)
}

/// `softmax(logits / τ_s)` per row, on the tape.
pub fn student_distribution<T: Real>(tape: &Tape<T>, logits: Var, tau: f64) -> Result<Var> {
    let rank = tape.shape(logits).len();
    tape.softmax_t(logits, rank - 1, tau)
}

/// `(teacher view, student view)` frame indices of the global-to-global
/// terms: each teacher global against the other global of its pair.
pub fn g2g_terms(pairs: &FramePairSet) -> Vec<(usize, usize)> {
    pairs
        .pairs
        .iter()
        .flat_map(|&(a, b)| [(a, b), (b, a)])
        .collect()
}

/// `(teacher frame, (student frame, local index))` of the local-to-global
/// terms: both globals of a pair against all locals of both frames.
pub fn l2g_terms(pairs: &FramePairSet, locals: usize) -> Vec<(usize, (usize, usize))> {
    let mut out = Vec::new();
    for &(a, b) in &pairs.pairs {
        for t in [a, b] {
            for s in [a, b] {
                for j in 0..locals {
                    out.push((t, (s, j)));
                }
            }
        }
    }
    out
}

fn check_rows<T: Real>(tape: &Tape<T>, v: Var, rows: usize, what: &str) -> Result<usize> {
    let shape = tape.shape(v);
    if shape.len() != 2 || shape[0] != rows {
        return Err(Error::invalid(format!(
            "{what}: expected {rows} rows, got shape {shape:?}"
        )));
    }
    Ok(shape[1])
}

/// Sum of `CE(target[ti], pred[pi])` over the index pairs, divided by
/// `norm`.
fn summed_ce<T: Real>(
    tape: &Tape<T>,
    target: Var,
    pred: Var,
    index: &[(usize, usize)],
    norm: f64,
) -> Result<Var> {
    if index.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let ti: Vec<usize> = index.iter().map(|p| p.0).collect();
    let pi: Vec<usize> = index.iter().map(|p| p.1).collect();
    let t = tape.gather_rows(target, &ti)?;
    let p = tape.gather_rows(pred, &pi)?;
    let mean = tape.cross_entropy_rows(t, p)?;
    Ok(tape.scale(mean, index.len() as f64 / norm))
}

/// Global-to-global class-token loss: per clip, the cross terms of every
/// pair summed and divided by the number of pairs.
pub fn loss_out_g2g<T: Real>(
    tape: &Tape<T>,
    teacher: Var,
    student: Var,
    pairs: &FramePairSet,
    batch: usize,
) -> Result<Var> {
    let l = 2 * pairs.len();
    check_rows(tape, teacher, batch * l, "loss_out_g2g teacher")?;
    check_rows(tape, student, batch * l, "loss_out_g2g student")?;
    let terms = g2g_terms(pairs);
    let index: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| terms.iter().map(move |&(t, s)| (b * l + t, b * l + s)))
        .collect();
    summed_ce(tape, teacher, student, &index, (pairs.len() * batch) as f64)
}

/// Local-to-global class-token loss: both teacher globals of each pair
/// against every local of the pair, divided by the number of pairs.
pub fn loss_out_l2g<T: Real>(
    tape: &Tape<T>,
    teacher: Var,
    student_locals: Var,
    pairs: &FramePairSet,
    locals: usize,
    batch: usize,
) -> Result<Var> {
    let l = 2 * pairs.len();
    check_rows(tape, teacher, batch * l, "loss_out_l2g teacher")?;
    check_rows(tape, student_locals, batch * l * locals, "loss_out_l2g locals")?;
    let terms = l2g_terms(pairs, locals);
    let index: Vec<(usize, usize)> = (0..batch)
        .flat_map(|b| {
            terms
                .iter()
                .map(move |&(t, (s, j))| (b * l + t, (b * l + s) * locals + j))
        })
        .collect();
    summed_ce(tape, teacher, student_locals, &index, (pairs.len() * batch) as f64)
}

/// Masked-token loss on pre-gathered rows: every row is one masked
/// position; the sum is divided by `clip_len · batch`.
pub fn loss_in_mim_rows<T: Real>(
    tape: &Tape<T>,
    teacher_rows: Var,
    student_rows: Var,
    clip_len: usize,
    batch: usize,
) -> Result<Var> {
    let n = tape.shape(teacher_rows)[0];
    check_rows(tape, student_rows, n, "loss_in_mim student")?;
    let index: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    summed_ce(tape, teacher_rows, student_rows, &index, (clip_len * batch) as f64)
}

/// Masked-token loss over full `[frames·P × k]` distributions, one mask
/// per frame; unmasked positions contribute nothing.
pub fn loss_in_mim<T: Real>(
    tape: &Tape<T>,
    teacher: Var,
    student: Var,
    masks: &[MaskPattern],
    clip_len: usize,
) -> Result<Var> {
    let p = masks.first().map_or(0, MaskPattern::len);
    if masks.is_empty() || masks.len() % clip_len != 0 || masks.iter().any(|m| m.len() != p) {
        return Err(Error::invalid("loss_in_mim: masks must cover whole clips on one grid"));
    }
    check_rows(tape, teacher, masks.len() * p, "loss_in_mim teacher")?;
    let rows: Vec<usize> = masks
        .iter()
        .enumerate()
        .flat_map(|(f, m)| m.indices().into_iter().map(move |j| f * p + j))
        .collect();
    let batch = masks.len() / clip_len;
    if rows.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let t = tape.gather_rows(teacher, &rows)?;
    let s = tape.gather_rows(student, &rows)?;
    loss_in_mim_rows(tape, t, s, clip_len, batch)
}

/// Row-stochastic cross-frame similarity between masked-token features.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<T> {
    pub values: Tensor<T>,
    pub source: usize,
    pub target: usize,
    pub temperature: f64,
}

fn check_affinity_inputs(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != 2 || b.len() != 2 || a != b {
        return Err(Error::ShapeMismatch {
            op: "build_affinity",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `softmax(Q_a Q_bᵀ / τ)` row-wise, for unit-norm rows.
pub fn build_affinity<T: Real>(
    q_a: &Tensor<T>,
    q_b: &Tensor<T>,
    tau: f64,
    source: usize,
    target: usize,
) -> Result<AffinityMatrix<T>> {
    check_affinity_inputs(q_a.shape(), q_b.shape())?;
    let sim = kernels::matmul(q_a, &kernels::transpose(q_b)?)?;
    Ok(AffinityMatrix {
        values: kernels::softmax_t(&sim, 1, tau)?,
        source,
        target,
        temperature: tau,
    })
}

/// Tape version of [`build_affinity`].
pub fn affinity_on_tape<T: Real>(tape: &Tape<T>, q_a: Var, q_b: Var, tau: f64) -> Result<Var> {
    check_affinity_inputs(&tape.shape(q_a), &tape.shape(q_b))?;
    let bt = tape.transpose(q_b)?;
    let sim = tape.matmul(q_a, bt)?;
    tape.softmax_t(sim, 1, tau)
}

/// Affinity consistency: for each transition, the row-summed cross
/// entropy between teacher and student affinities; summed and divided by
/// `(clip_len − 1) · batch`.
pub fn loss_in_aff<T: Real>(
    tape: &Tape<T>,
    teacher: &[Var],
    student: &[Var],
    clip_len: usize,
    batch: usize,
) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "loss_in_aff: {} teacher vs {} student affinities",
            teacher.len(),
            student.len()
        )));
    }
    if clip_len < 2 {
        return Err(Error::invalid("loss_in_aff needs at least two frames"));
    }
    let norm = ((clip_len - 1) * batch) as f64;
    let mut total: Option<Var> = None;
    for (&t, &s) in teacher.iter().zip(student) {
        let k = tape.shape(t)[0];
        let mean = tape.cross_entropy_rows(t, s)?;
        let term = tape.scale(mean, k as f64 / norm);
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

/// Scalar values of one step's losses; disabled or gated-off terms are
/// `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub out_g2g: Option<f64>,
    pub out_l2g: Option<f64>,
    pub in_mim: Option<f64>,
    pub in_aff: Option<f64>,
    pub total: f64,
}

/// Equal-weight sum of the terms that are present.
pub fn total_loss<T: Real>(tape: &Tape<T>, terms: &[Option<Var>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for t in terms.iter().flatten() {
        total = Some(match total {
            None => *t,
            Some(acc) => tape.add(acc, *t)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::views::make_frame_pairs;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn teacher_distribution_cases() {
        let zero = Tensor::<f64>::zeros(&[4]);
        let u = teacher_distribution(&t(&[1, 4], &[2.0; 4]), &zero, 0.04).unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let d = teacher_distribution(&t(&[1, 4], &[0.0, 3f64.ln(), 0.0, 0.0]), &zero, 1.0).unwrap();
        let expect = [1.0 / 6.0, 0.5, 1.0 / 6.0, 1.0 / 6.0];
        assert!(d.data().iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-12));
        let c = t(&[4], &[0.3, -0.2, 0.1, 0.5]);
        let logits = t(&[1, 4], &[1.0, 2.0, -1.0, 0.5]);
        let shifted = logits.map(|v| v + 7.0);
        let a = teacher_distribution(&logits, &c, 0.04).unwrap();
        let b = teacher_distribution(&shifted, &c, 0.04).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let bad = t(&[1, 2], &[f64::NAN, 0.0]);
        assert!(teacher_distribution(&bad, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn term_counts() {
        for l in [2, 4, 6] {
            let pairs = make_frame_pairs(l).unwrap();
            let g = g2g_terms(&pairs);
            assert_eq!(g.len(), 2 * pairs.len());
            for m in [1, 2, 8] {
                assert_eq!(l2g_terms(&pairs, m).len(), 4 * m * pairs.len());
            }
        }
    }

    #[test]
    fn ema_and_center() {
        let mut s = ParamStore::<f64>::new();
        s.push("w", Tensor::ones(&[3]));
        let mut teacher = TeacherState::new(&s, 2);
        teacher.params.tensors_mut()[0] = Tensor::zeros(&[3]);
        let before = teacher.clone();
        teacher.ema_update(&s, 1.0).unwrap();
        assert_eq!(teacher, before);
        teacher.ema_update(&s, EMA_MOMENTUM).unwrap();
        assert!(teacher.params.tensors()[0].data().iter().all(|&v| (v - 0.004).abs() < 1e-15));
        teacher.ema_update(&s, 0.0).unwrap();
        assert_eq!(teacher.params, s);

        teacher.center_update(OutputKind::Cls, &t(&[1, 2], &[1.0, -2.0]), 0.0).unwrap();
        assert_eq!(teacher.center_cls.data(), &[1.0, -2.0]);
        teacher.center_update(OutputKind::Cls, &t(&[2, 2], &[1.0, -2.0, 1.0, -2.0]), 0.9).unwrap();
        assert_eq!(teacher.center_cls.data(), &[1.0, -2.0]);
        teacher.center_update(OutputKind::Patch, &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), 0.9).unwrap();
        assert!((teacher.center_patch.data()[0] - 0.2).abs() < 1e-15);
        assert!((teacher.center_patch.data()[1] - 0.3).abs() < 1e-15);
        assert!(teacher.center_update(OutputKind::Cls, &t(&[1, 3], &[0.0; 3]), 0.9).is_err());
    }

    #[test]
    fn affinity_of_orthogonal_rows() {
        let q = Tensor::<f64>::eye(3);
        let a = build_affinity(&q, &q, 1.0, 0, 1).unwrap();
        let e = std::f64::consts::E;
        let diag = e / (e + 2.0);
        for r in 0..3 {
            assert!((a.values.row(r)[r] - diag).abs() < 1e-15);
            assert!((a.values.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let one = t(&[1, 2], &[0.6, 0.8]);
        assert_eq!(build_affinity(&one, &one, 0.04, 0, 1).unwrap().values.data(), &[1.0]);
        assert!(build_affinity(&q, &t(&[2, 3], &[1.0; 6]), 1.0, 0, 1).is_err());
    }

    #[test]
    fn total_skips_absent_terms() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.25));
        let b = tape.constant(Tensor::scalar(0.5));
        let c = tape.constant(Tensor::scalar(2.0));
        let d = tape.constant(Tensor::scalar(3.0));
        let all = total_loss(&tape, &[Some(a), Some(b), Some(c), Some(d)]).unwrap();
        assert_eq!(tape.scalar(all), 6.75);
        let gated = total_loss(&tape, &[Some(a), Some(b), None, None]).unwrap();
        assert_eq!(tape.scalar(gated), 1.25 + 0.5);
        assert_eq!(tape.scalar(total_loss(&tape, &[None, None]).unwrap()), 0.0);
    }
}
