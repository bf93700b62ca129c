//! Configuration, synthetic data, training and evaluation drivers.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradients;
pub mod synthetic;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig, TrainConfig, DESK_CONFIG};
pub use evaluate::{
    evaluate, evaluate_videos, load_model, predict_video, EncoderFeatures, Evaluation, FeatureExtractor,
    OracleFeatures, VideoPrediction, SCORE_REPORT,
};
pub use synthetic::{gen_synthetic_dataset, random_scene, random_scene_sets, SyntheticSceneSpec};
pub use train::{load_training_videos, run, train, StepReport, TrainSummary, Trainer, LAST_CHECKPOINT};

use crate::error::Result;
use crate::numerics::Rng;

/// Generates the dataset described by `config.data` from `config.seed`.
pub fn gen_data(config: &RunConfig) -> Result<()> {
    let d = &config.data;
    let (train, eval) = random_scene_sets(
        &Rng::new(config.seed).substream("data"),
        d.size,
        (d.train_videos, d.train_frames),
        (d.eval_videos, d.eval_frames),
    );
    gen_synthetic_dataset(&d.root, &train, &eval)
}
