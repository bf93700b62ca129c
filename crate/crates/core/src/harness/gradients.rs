//! Finite-difference check of the training objective on a micro
//! configuration: two-frame clips, two locals per frame, a 2×2 token grid,
//! width 8, 16 output classes and one block.

use crate::encoder::{Bound, Encoder, ModelConfig, ParamStore};
use crate::error::Result;
use crate::numerics::gradcheck::DEFAULT_STEP;
use crate::numerics::{grad_check, GradCheckReport};
use crate::objectives::{
    student_losses, teacher_targets, LossVars, ObjectiveSet, StepInputs, TeacherState, TemperatureConfig,
};
use crate::views::{blockwise_mask, MaskPattern};
use crate::{Rng, Tensor, Var};

pub const MICRO_CLASSES: usize = 16;

pub fn micro_model() -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        proj_layers: 2,
        proj_dim: MICRO_CLASSES,
        proj_hidden: Some(16),
        pe_base_resolution: 2,
        inference_layer: 1,
    }
}

pub fn random_image(size: usize, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(&[size, size, 3], |_| rng.uniform())
}

pub struct MicroProblem {
    pub encoder: Encoder,
    pub student: ParamStore<f64>,
    pub teacher: TeacherState<f64>,
    pub inputs: StepInputs<f64>,
}

/// Adds N(0, spread²) noise to every parameter.
pub fn spread(params: &mut ParamStore<f64>, spread: f64, rng: &mut Rng) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += spread * rng.normal();
        }
    }
}

/// Random crops, two masked cells per frame when `with_masks`, and a
/// teacher that differs from the student. `noise` spreads both parameter
/// sets away from the fresh init so head outputs are O(1) rather than
/// near zero.
pub fn micro_problem(seed: u64, with_masks: bool, noise: f64) -> MicroProblem {
    let encoder = Encoder::new(micro_model()).expect("micro model is valid");
    let root = Rng::new(seed);
    let mut student = encoder.init::<f64>(&root.substream("student"));
    let mut teacher_params = encoder.init::<f64>(&root.substream("teacher"));
    spread(&mut student, noise, &mut root.substream("student_spread"));
    spread(&mut teacher_params, noise, &mut root.substream("teacher_spread"));
    let mut teacher = TeacherState::new(&teacher_params, MICRO_CLASSES);
    let mut r = root.substream("centers");
    teacher.center_cls = Tensor::from_fn(&[MICRO_CLASSES], |_| 0.01 * r.normal());
    teacher.center_patch = Tensor::from_fn(&[MICRO_CLASSES], |_| 0.01 * r.normal());
    let mut img = root.substream("images");
    let (clip_len, locals) = (2, 2);
    let globals = (0..clip_len).map(|_| random_image(4, &mut img)).collect();
    let locals_v = (0..clip_len * locals).map(|_| random_image(2, &mut img)).collect();
    let masks = with_masks.then(|| {
        let mut m = root.substream("masks");
        (0..clip_len)
            .map(|_| blockwise_mask((2, 2), 2, &mut m))
            .collect::<Vec<MaskPattern>>()
    });
    MicroProblem {
        encoder,
        student,
        teacher,
        inputs: StepInputs {
            batch: 1,
            clip_len,
            local_crops: locals,
            globals,
            locals: locals_v,
            masks,
        },
    }
}

pub type Pick = fn(&LossVars) -> Option<Var>;

pub const TERMS: [(&str, Pick); 5] = [
    ("out_g2g", |l| l.out_g2g),
    ("out_l2g", |l| l.out_l2g),
    ("in_mim", |l| l.in_mim),
    ("in_aff", |l| l.in_aff),
    ("total", |l| Some(l.total)),
];

/// Checks each named loss term against every student parameter with
/// finite-difference step `h`.
pub fn term_reports(m: &MicroProblem, names: &[&str], h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let temps = TemperatureConfig::default();
    let objectives = ObjectiveSet::default();
    let targets = teacher_targets(&m.encoder, &m.teacher, &m.inputs, &temps, &objectives)?;
    TERMS
        .iter()
        .filter(|(n, _)| names.contains(n))
        .map(|(name, pick)| {
            let r = grad_check(
                |tape, vars| {
                    let bound = Bound(vars.to_vec());
                    let losses = student_losses(&m.encoder, tape, &bound, &m.inputs, &targets, &temps, &objectives)?;
                    Ok(pick(&losses).expect("term present"))
                },
                m.student.tensors(),
                h,
            )?;
            Ok((*name, r))
        })
        .collect()
}

/// All four terms and their sum at a spread parameter point.
pub fn check_objective_gradients(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let names: Vec<&str> = TERMS.iter().map(|(n, _)| *n).collect();
    term_reports(&micro_problem(seed, true, 0.3), &names, DEFAULT_STEP)
}
