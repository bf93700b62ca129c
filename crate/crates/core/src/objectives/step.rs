//! One training step's losses, split into the gradient-free teacher pass
//! and the student pass recorded on a tape.

use super::{
    affinity_on_tape, build_affinity, loss_in_aff, loss_in_mim_rows, loss_out_g2g, loss_out_l2g,
    student_distribution, teacher_distribution, total_loss, AffinityMatrix, LossBreakdown,
    TeacherState, TemperatureConfig,
};
use crate::encoder::{Bound, Encoder, HeadScope};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Real, Tape, Tensor, Var};
use crate::views::{make_frame_pairs, CropSet, MaskPattern};

/// Which loss terms take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectiveSet {
    pub out_g2g: bool,
    pub out_l2g: bool,
    pub in_mim: bool,
    pub in_aff: bool,
}

impl Default for ObjectiveSet {
    fn default() -> Self {
        Self {
            out_g2g: true,
            out_l2g: true,
            in_mim: true,
            in_aff: true,
        }
    }
}

impl ObjectiveSet {
    /// `all` or a comma-separated subset of `g2g,l2g,mim,aff`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::default());
        }
        let mut set = Self {
            out_g2g: false,
            out_l2g: false,
            in_mim: false,
            in_aff: false,
        };
        for part in s.split(',').map(str::trim) {
            match part {
                "g2g" => set.out_g2g = true,
                "l2g" => set.out_l2g = true,
                "mim" => set.in_mim = true,
                "aff" => set.in_aff = true,
                other => return Err(Error::Config(format!("unknown objective term {other:?}"))),
            }
        }
        if set == Self::default() {
            return Ok(set);
        }
        if !(set.out_g2g || set.out_l2g || set.in_mim || set.in_aff) {
            return Err(Error::Config("no objective terms selected".into()));
        }
        Ok(set)
    }

    pub fn name(&self) -> String {
        if *self == Self::default() {
            return "all".into();
        }
        let mut parts = Vec::new();
        for (on, n) in [
            (self.out_g2g, "g2g"),
            (self.out_l2g, "l2g"),
            (self.in_mim, "mim"),
            (self.in_aff, "aff"),
        ] {
            if on {
                parts.push(n);
            }
        }
        parts.join(",")
    }

    pub fn uses_masks(&self) -> bool {
        self.in_mim || self.in_aff
    }
}

/// Crops of `batch` clips in the batched row layout, plus the step's masks
/// (one per global crop) when the masked objectives are gated in.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub batch: usize,
    pub clip_len: usize,
    pub local_crops: usize,
    pub globals: Vec<Tensor<T>>,
    pub locals: Vec<Tensor<T>>,
    pub masks: Option<Vec<MaskPattern>>,
}

impl<T: Real> StepInputs<T> {
    pub fn from_crops(sets: &[CropSet], masks: Option<Vec<MaskPattern>>) -> Result<Self> {
        let first = sets
            .first()
            .ok_or_else(|| Error::invalid("step inputs: no clips"))?;
        let inputs = Self {
            batch: sets.len(),
            clip_len: first.globals.len(),
            local_crops: first.locals.first().map_or(0, Vec::len),
            globals: sets
                .iter()
                .flat_map(|s| s.globals.iter().map(|c| c.image.to_tensor()))
                .collect(),
            locals: sets
                .iter()
                .flat_map(|s| s.locals.iter().flatten().map(|c| c.image.to_tensor()))
                .collect(),
            masks,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        let frames = self.batch * self.clip_len;
        if self.batch == 0 || self.globals.len() != frames {
            return Err(Error::invalid(format!(
                "step inputs: {} globals for {} clips of {}",
                self.globals.len(),
                self.batch,
                self.clip_len
            )));
        }
        if self.locals.len() != frames * self.local_crops {
            return Err(Error::invalid(format!(
                "step inputs: {} locals, expected {} per frame",
                self.locals.len(),
                self.local_crops
            )));
        }
        if let Some(m) = &self.masks {
            if m.len() != frames {
                return Err(Error::invalid(format!(
                    "step inputs: {} masks for {frames} frames",
                    m.len()
                )));
            }
            for c in m.chunks(self.clip_len) {
                if c.iter().any(|x| x.count() != c[0].count() || x.count() == 0) {
                    return Err(Error::invalid(
                        "step inputs: masks of one clip must share a nonzero count",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Flat masked rows of the stacked patch grid, frame-major, plus the
    /// offset of each frame's first masked row.
    fn masked_rows(&self, patches: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut offsets = Vec::new();
        for (f, m) in self.masks.iter().flatten().enumerate() {
            offsets.push(rows.len());
            rows.extend(m.indices().into_iter().map(|j| f * patches + j));
        }
        offsets.push(rows.len());
        (rows, offsets)
    }
}

/// Everything the student losses need from the teacher, all constants.
#[derive(Clone, Debug)]
pub struct TeacherTargets<T> {
    /// Class distributions of the globals, `[B·L × k]`.
    pub cls: Tensor<T>,
    pub cls_logits: Tensor<T>,
    /// Raw patch logits of every global, when masks are active.
    pub patch_logits: Option<Tensor<T>>,
    /// Patch distributions at the masked positions, frame-major.
    pub masked_patch: Option<Tensor<T>>,
    /// Affinities of consecutive frames within each clip.
    pub affinities: Vec<AffinityMatrix<T>>,
}

/// Teacher pass on unmasked globals; no gradients are recorded anywhere.
pub fn teacher_targets<T: Real>(
    encoder: &Encoder,
    teacher: &TeacherState<T>,
    inputs: &StepInputs<T>,
    temps: &TemperatureConfig,
    objectives: &ObjectiveSet,
) -> Result<TeacherTargets<T>> {
    inputs.validate()?;
    let tape = Tape::new();
    let bound = encoder.bind(&tape, &teacher.params, false)?;
    let seq = encoder.patchify(&tape, &bound, &inputs.globals)?;
    let masked = inputs.masks.is_some() && objectives.uses_masks();
    let scope = if masked {
        HeadScope::All
    } else {
        HeadScope::ClassOnly
    };
    let out = encoder.forward(&tape, &bound, &seq, scope)?;
    let cls_logits = tape.value(out.cls_logits).clone();
    let cls = teacher_distribution(&cls_logits, &teacher.center_cls, temps.teacher)?;
    let mut targets = TeacherTargets {
        cls,
        cls_logits,
        patch_logits: None,
        masked_patch: None,
        affinities: Vec::new(),
    };
    if !masked {
        return Ok(targets);
    }
    let patch_logits = tape
        .value(out.patch_logits.expect("head ran on patches"))
        .clone();
    let (rows, offsets) = inputs.masked_rows(seq.num_patches());
    let picked = kernels::gather_rows(&patch_logits, &rows)?;
    targets.masked_patch = Some(teacher_distribution(
        &picked,
        &teacher.center_patch,
        temps.teacher,
    )?);
    if objectives.in_aff {
        let q = kernels::l2_normalize_rows(&picked)?;
        for b in 0..inputs.batch {
            for i in 0..inputs.clip_len - 1 {
                let f = b * inputs.clip_len + i;
                let qa = slice_rows(&q, offsets[f], offsets[f + 1])?;
                let qb = slice_rows(&q, offsets[f + 1], offsets[f + 2])?;
                targets
                    .affinities
                    .push(build_affinity(&qa, &qb, temps.teacher, i, i + 1)?);
            }
        }
    }
    targets.patch_logits = Some(patch_logits);
    Ok(targets)
}

fn slice_rows<T: Real>(t: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    kernels::gather_rows(t, &(from..to).collect::<Vec<_>>())
}

/// Loss nodes of one student pass; disabled or gated-off terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub out_g2g: Option<Var>,
    pub out_l2g: Option<Var>,
    pub in_mim: Option<Var>,
    pub in_aff: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map(|x| tape.scalar(x).to_f64_lossy());
        LossBreakdown {
            out_g2g: v(self.out_g2g),
            out_l2g: v(self.out_l2g),
            in_mim: v(self.in_mim),
            in_aff: v(self.in_aff),
            total: tape.scalar(self.total).to_f64_lossy(),
        }
    }
}

/// Student pass: unmasked globals for the class losses, locals for the
/// local-to-global loss, and a mask-token pass of the globals for the
/// masked objectives when masks are present.
pub fn student_losses<T: Real>(
    encoder: &Encoder,
    tape: &Tape<T>,
    bound: &Bound,
    inputs: &StepInputs<T>,
    targets: &TeacherTargets<T>,
    temps: &TemperatureConfig,
    objectives: &ObjectiveSet,
) -> Result<LossVars> {
    inputs.validate()?;
    let pairs = make_frame_pairs(inputs.clip_len)?;
    let (b, l) = (inputs.batch, inputs.clip_len);
    let teacher_cls = tape.constant(targets.cls.clone());

    let mut out_g2g = None;
    let mut seq = None;
    if objectives.out_g2g || (inputs.masks.is_some() && objectives.uses_masks()) {
        seq = Some(encoder.patchify(tape, bound, &inputs.globals)?);
    }
    if objectives.out_g2g {
        let s = seq.as_ref().expect("globals embedded");
        let out = encoder.forward(tape, bound, s, HeadScope::ClassOnly)?;
        let dist = student_distribution(tape, out.cls_logits, temps.student)?;
        out_g2g = Some(loss_out_g2g(tape, teacher_cls, dist, &pairs, b)?);
    }

    let mut out_l2g = None;
    if objectives.out_l2g {
        let s = encoder.patchify(tape, bound, &inputs.locals)?;
        let out = encoder.forward(tape, bound, &s, HeadScope::ClassOnly)?;
        let dist = student_distribution(tape, out.cls_logits, temps.student)?;
        out_l2g = Some(loss_out_l2g(
            tape,
            teacher_cls,
            dist,
            &pairs,
            inputs.local_crops,
            b,
        )?);
    }

    let (mut in_mim, mut in_aff) = (None, None);
    if let (Some(masks), true) = (&inputs.masks, objectives.uses_masks()) {
        let s = seq.as_ref().expect("globals embedded");
        let mseq = encoder.apply_mask_tokens(tape, bound, s, masks)?;
        let out = encoder.forward(tape, bound, &mseq, HeadScope::ClassOnly)?;
        let (rows, offsets) = inputs.masked_rows(s.num_patches());
        let seq_rows = mseq.patch_rows();
        let picked: Vec<usize> = rows.iter().map(|&r| seq_rows[r]).collect();
        let tokens = tape.gather_rows(out.final_tokens, &picked)?;
        let logits = encoder.head(tape, bound, tokens)?;
        if objectives.in_mim {
            let teacher = targets
                .masked_patch
                .clone()
                .ok_or_else(|| Error::invalid("teacher targets lack masked patches"))?;
            let dist = student_distribution(tape, logits, temps.student)?;
            let t = tape.constant(teacher);
            in_mim = Some(loss_in_mim_rows(tape, t, dist, l, b)?);
        }
        if objectives.in_aff {
            let q = tape.l2_normalize_rows(logits)?;
            let mut student = Vec::new();
            let mut teacher = Vec::new();
            for bi in 0..b {
                for i in 0..l - 1 {
                    let f = bi * l + i;
                    let a: Vec<usize> = (offsets[f]..offsets[f + 1]).collect();
                    let c: Vec<usize> = (offsets[f + 1]..offsets[f + 2]).collect();
                    let qa = tape.gather_rows(q, &a)?;
                    let qb = tape.gather_rows(q, &c)?;
                    student.push(affinity_on_tape(tape, qa, qb, temps.student)?);
                    let t = targets
                        .affinities
                        .get(bi * (l - 1) + i)
                        .ok_or_else(|| Error::invalid("teacher targets lack affinities"))?;
                    teacher.push(tape.constant(t.values.clone()));
                }
            }
            in_aff = Some(loss_in_aff(tape, &teacher, &student, l, b)?);
        }
    }

    let total = total_loss(tape, &[out_g2g, out_l2g, in_mim, in_aff])?;
    Ok(LossVars {
        out_g2g,
        out_l2g,
        in_mim,
        in_aff,
        total,
    })
}
