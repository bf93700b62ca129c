//! Label propagation over evaluation videos and J/F scoring.

use std::path::Path;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::encoder::{Encoder, ParamStore};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, contour_accuracy, default_tolerance, region_similarity, MaskRaster, SequenceScores, TrackScores};
use crate::propagation::{propagate_video, FeatureMap, LabelMap, PropagationConfig};
use crate::views::Video;

pub const SCORE_REPORT: &str = "scores.tsv";

/// Produces the feature grid that propagation matches on.
pub trait FeatureExtractor {
    fn features(&self, video: &Video, frame: usize) -> Result<FeatureMap>;
}

/// Backbone features at the configured inference layer.
pub struct EncoderFeatures<'a> {
    pub encoder: &'a Encoder,
    pub params: &'a ParamStore<f32>,
}

impl FeatureExtractor for EncoderFeatures<'_> {
    fn features(&self, video: &Video, frame: usize) -> Result<FeatureMap> {
        let image = video.frames[frame].to_tensor::<f32>();
        let grid = self.encoder.extract_inference_features(self.params, &image)?;
        FeatureMap::from_tensor(&grid, frame)
    }
}

/// One-hot object identity per pixel, read from the ground truth. An upper
/// bound for the pipeline.
pub struct OracleFeatures;

impl FeatureExtractor for OracleFeatures {
    fn features(&self, video: &Video, frame: usize) -> Result<FeatureMap> {
        let masks = video
            .masks
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("oracle features need masks for {}", video.id)))?;
        let classes = masks.iter().map(|m| m.max_id()).max().unwrap_or(0) as usize + 1;
        let m = &masks[frame];
        let mut data = vec![0.0; m.ids().len() * classes];
        for (cell, &id) in m.ids().iter().enumerate() {
            data[cell * classes + id as usize] = 1.0;
        }
        FeatureMap::new(m.height(), m.width(), classes, data, frame)
    }
}

#[derive(Clone, Debug)]
pub struct VideoPrediction {
    pub id: String,
    pub labels: Vec<LabelMap>,
    pub masks: Vec<MaskRaster>,
}

/// Propagates the first-frame mask through one video.
pub fn predict_video(
    extractor: &dyn FeatureExtractor,
    video: &Video,
    first_mask: &MaskRaster,
    prop: &PropagationConfig,
) -> Result<VideoPrediction> {
    let frames = (0..video.frames.len())
        .map(|i| extractor.features(video, i))
        .collect::<Result<Vec<_>>>()?;
    let labels = propagate_video(&frames, first_mask, prop)?;
    let (w, h) = (first_mask.width(), first_mask.height());
    let masks = labels.iter().map(|l| l.to_mask(w, h)).collect();
    Ok(VideoPrediction {
        id: video.id.clone(),
        labels,
        masks,
    })
}

/// Per-object J and F over every frame after the first.
pub fn score_video(id: &str, pred: &[MaskRaster], truth: &[MaskRaster]) -> Result<Vec<TrackScores>> {
    if pred.len() != truth.len() || truth.len() < 2 {
        return Err(Error::invalid(format!(
            "{id}: {} predicted vs {} true masks (need at least 2 frames)",
            pred.len(),
            truth.len()
        )));
    }
    let tol = default_tolerance(truth[0].width(), truth[0].height());
    (1..=truth[0].max_id())
        .map(|object| {
            let mut t = TrackScores {
                sequence: id.to_owned(),
                object,
                j: Vec::new(),
                f: Vec::new(),
            };
            for (p, g) in pred.iter().zip(truth).skip(1) {
                t.j.push(region_similarity(p, g, object)?);
                t.f.push(contour_accuracy(p, g, object, tol)?);
            }
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub scores: SequenceScores,
    pub predictions: Vec<VideoPrediction>,
}

/// Scores every object present in each video's first frame.
pub fn evaluate_videos(
    extractor: &dyn FeatureExtractor,
    videos: &[Video],
    prop: &PropagationConfig,
) -> Result<Evaluation> {
    let mut tracks = Vec::new();
    let mut predictions = Vec::with_capacity(videos.len());
    for v in videos {
        let truth = v
            .masks
            .as_ref()
            .filter(|m| !m.is_empty())
            .ok_or_else(|| Error::invalid(format!("video {} has no first-frame mask", v.id)))?;
        if truth.len() != v.frames.len() {
            return Err(Error::invalid(format!(
                "video {}: {} masks for {} frames",
                v.id,
                truth.len(),
                v.frames.len()
            )));
        }
        let pred = predict_video(extractor, v, &truth[0], prop)?;
        tracks.extend(score_video(&v.id, &pred.masks, truth)?);
        predictions.push(pred);
    }
    Ok(Evaluation {
        scores: aggregate(&tracks)?,
        predictions,
    })
}

/// Encoder and teacher weights of a checkpoint, with the run config it
/// echoes.
pub fn load_model(path: &Path) -> Result<(RunConfig, Encoder, ParamStore<f32>)> {
    let ckpt = Checkpoint::<f32>::load(path)?;
    let config = RunConfig::parse(&ckpt.config)?;
    let encoder = Encoder::new(config.model.clone())?;
    encoder.check_params(&ckpt.teacher.params)?;
    Ok((config, encoder, ckpt.teacher.params))
}

/// Evaluates a checkpoint's teacher backbone on a split directory.
pub fn evaluate(checkpoint: &Path, split: &Path, prop: &PropagationConfig) -> Result<Evaluation> {
    let (_, encoder, params) = load_model(checkpoint)?;
    let videos = crate::views::store::load_split(split, true)?;
    evaluate_videos(
        &EncoderFeatures {
            encoder: &encoder,
            params: &params,
        },
        &videos,
        prop,
    )
}
