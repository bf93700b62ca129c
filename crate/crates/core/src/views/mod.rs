//! Everything that turns raw videos into training inputs: clip sampling,
//! frame pairing, multi-crop augmentation and blockwise token masks.

pub mod crops;
pub mod image;
pub mod mask;
pub mod pairs;
pub mod store;

pub use crops::{make_crops, render_crop, Crop, CropGeometry, CropSet, Jitter};
pub use image::{Image, Rect};
pub use mask::{blockwise_mask, mask_count, sample_clip_masks, sample_mask, MaskPattern};
pub use pairs::{make_frame_pairs, FramePairSet};
pub use store::{FrameSource, Video};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Which crops receive flip and colour jitter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentTarget {
    LocalsOnly,
    GlobalsOnly,
    Both,
    None,
}

impl AugmentTarget {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "locals" => Self::LocalsOnly,
            "globals" => Self::GlobalsOnly,
            "both" => Self::Both,
            "none" => Self::None,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LocalsOnly => "locals",
            Self::GlobalsOnly => "globals",
            Self::Both => "both",
            Self::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    /// Frames per clip; even.
    pub clip_len: usize,
    pub local_crops: usize,
    pub global_scale: (f64, f64),
    pub local_scale: (f64, f64),
    pub global_size: usize,
    pub local_size: usize,
    pub augment: AugmentTarget,
    pub frameskip: usize,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Probability that a step uses the masked-token objectives.
    pub mask_gate: f64,
    pub mask_ratio: (f64, f64),
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            clip_len: 4,
            local_crops: 8,
            global_scale: (0.8, 0.95),
            local_scale: (0.05, 0.8),
            global_size: 64,
            local_size: 32,
            augment: AugmentTarget::LocalsOnly,
            frameskip: 8,
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            mask_gate: 0.5,
            mask_ratio: (0.1, 0.5),
        }
    }
}

impl ViewConfig {
    /// Splits `(min, max)` at `s`: locals get `(min, s)`, globals `(s, max)`.
    /// With `swap` the orientation is reversed.
    pub fn set_scale_threshold(&mut self, min: f64, s: f64, max: f64, swap: bool) {
        let (small, large) = ((min, s), (s, max));
        if swap {
            self.global_scale = small;
            self.local_scale = large;
        } else {
            self.global_scale = large;
            self.local_scale = small;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clip_len < 2 || self.clip_len % 2 != 0 {
            return bad(format!("clip length {} must be even and >= 2", self.clip_len));
        }
        if self.local_crops == 0 {
            return bad("at least one local crop is required".into());
        }
        for (name, (lo, hi)) in [("global", self.global_scale), ("local", self.local_scale)] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} scale range ({lo}, {hi}) outside (0, 1]"));
            }
        }
        if self.global_size == 0 || self.local_size == 0 || self.frameskip == 0 {
            return bad("crop sizes and frameskip must be positive".into());
        }
        for (name, p) in [("flip", self.flip_prob), ("mask gate", self.mask_gate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&s) {
                return bad(format!("{name} strength {s} outside [0, 1)"));
            }
        }
        let (lo, hi) = self.mask_ratio;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("mask ratio range ({lo}, {hi}) outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    pub source_id: String,
    /// Frame indices in the source video.
    pub indices: Vec<usize>,
}

/// `len` frames spaced `frameskip` apart from a uniformly drawn start.
pub fn sample_clip(
    video: &dyn FrameSource,
    rng: &mut Rng,
    len: usize,
    frameskip: usize,
) -> Result<VideoClip> {
    let span = (len.max(1) - 1) * frameskip + 1;
    let n = video.num_frames();
    if n < span {
        return Err(Error::invalid(format!(
            "video {} has {n} frames; a clip of {len} with skip {frameskip} needs {span}",
            video.id()
        )));
    }
    let start = rng.below_usize(n - span + 1);
    let indices: Vec<usize> = (0..len).map(|i| start + i * frameskip).collect();
    let frames = indices
        .iter()
        .map(|&i| video.frame(i))
        .collect::<Result<Vec<_>>>()?;
    Ok(VideoClip {
        frames,
        source_id: video.id().to_owned(),
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(n: usize) -> Video {
        Video {
            id: "v".into(),
            frames: (0..n)
                .map(|i| Image::filled(2, 2, [i as f32 / n as f32, 0.0, 0.0]))
                .collect(),
            masks: None,
        }
    }

    #[test]
    fn clip_spacing_and_bounds() {
        let v = video(100);
        let mut rng = Rng::new(0);
        for _ in 0..200 {
            let c = sample_clip(&v, &mut rng, 4, 8).unwrap();
            let t = c.indices[0];
            assert!(t <= 76);
            assert_eq!(c.indices, vec![t, t + 8, t + 16, t + 24]);
            assert_eq!(c.frames[1], v.frames[t + 8]);
        }
        let tight = video(25);
        assert_eq!(sample_clip(&tight, &mut rng, 4, 8).unwrap().indices[0], 0);
        assert!(sample_clip(&video(24), &mut rng, 4, 8).is_err());
    }

    #[test]
    fn clip_is_deterministic() {
        let v = video(60);
        let a = sample_clip(&v, &mut Rng::new(7), 4, 8).unwrap();
        let b = sample_clip(&v, &mut Rng::new(7), 4, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(ViewConfig::default().validate().is_ok());
        let mut c = ViewConfig {
            clip_len: 3,
            ..ViewConfig::default()
        };
        assert!(c.validate().is_err());
        c.clip_len = 2;
        c.local_scale = (0.5, 0.2);
        assert!(c.validate().is_err());
        c.set_scale_threshold(0.05, 0.8, 0.95, true);
        assert_eq!(c.global_scale, (0.05, 0.8));
        assert_eq!(c.local_scale, (0.8, 0.95));
        assert!(c.validate().is_ok());
    }
}
