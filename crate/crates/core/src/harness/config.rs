//! Flat `key = value` run configuration with dotted namespaces.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveSet, TemperatureConfig, CENTER_MOMENTUM, EMA_MOMENTUM};
use crate::optimizer::OptimizerConfig;
use crate::propagation::PropagationConfig;
use crate::views::{AugmentTarget, ViewConfig};

/// Synthetic dataset shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_videos: usize,
    pub eval_videos: usize,
    pub size: usize,
    pub train_frames: usize,
    pub eval_frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_videos: 8,
            eval_videos: 4,
            size: 32,
            train_frames: 32,
            eval_frames: 12,
        }
    }
}

impl DataConfig {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Clips per step.
    pub batch: usize,
    pub epochs: usize,
    pub objectives: ObjectiveSet,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    /// Checkpoint every this many epochs (the last epoch always saves).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            epochs: 25,
            objectives: ObjectiveSet::default(),
            ema_momentum: EMA_MOMENTUM,
            center_momentum: CENTER_MOMENTUM,
            checkpoint_every: 1,
        }
    }
}

/// Every knob of a run. The optimizer's batch size, clip length and steps
/// per epoch are filled in from the other sections when training starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub view: ViewConfig,
    pub model: ModelConfig,
    pub temps: TemperatureConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub prop: PropagationConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            view: ViewConfig::default(),
            model: ModelConfig::default(),
            temps: TemperatureConfig::default(),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            prop: PropagationConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected \"lo,hi\", got {value:?}")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn show_pair(p: (f64, f64)) -> String {
    format!("{},{}", p.0, p.1)
}

/// Overrides for a model that trains in seconds on one CPU core: 8×8
/// token grid on 32-pixel frames, two narrow blocks, two-frame clips.
/// `optim.lr_scale` is chosen so the peak rate equals the default
/// configuration's (1.875e-4) despite the smaller batch and clip.
pub const DESK_CONFIG: &str = "\
model.patch_size = 4
model.embed_dim = 32
model.depth = 2
model.heads = 2
model.proj_dim = 64
model.proj_hidden = 64
model.pe_base_resolution = 8
model.inference_layer = 2
view.clip_len = 2
view.frameskip = 2
view.local_crops = 2
view.global_size = 32
view.local_size = 16
train.batch = 2
train.epochs = 50
optim.warmup_epochs = 5
optim.lr_scale = 0.048
";

impl RunConfig {
    /// The defaults with [`DESK_CONFIG`] applied.
    pub fn desk() -> Self {
        Self::parse(DESK_CONFIG).expect("desk overrides are valid")
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "seed" => self.seed = num(k, v)?,

            "view.clip_len" => self.view.clip_len = num(k, v)?,
            "view.local_crops" => self.view.local_crops = num(k, v)?,
            "view.global_scale" => self.view.global_scale = pair(k, v)?,
            "view.local_scale" => self.view.local_scale = pair(k, v)?,
            "view.global_size" => self.view.global_size = num(k, v)?,
            "view.local_size" => self.view.local_size = num(k, v)?,
            "view.augment" => {
                self.view.augment = AugmentTarget::parse(v)
                    .ok_or_else(|| Error::Config(format!("{k}: unknown target {v:?}")))?
            }
            "view.frameskip" => self.view.frameskip = num(k, v)?,
            "view.flip_prob" => self.view.flip_prob = num(k, v)?,
            "view.brightness" => self.view.brightness = num(k, v)?,
            "view.contrast" => self.view.contrast = num(k, v)?,
            "view.saturation" => self.view.saturation = num(k, v)?,
            "view.mask_gate" => self.view.mask_gate = num(k, v)?,
            "view.mask_ratio" => self.view.mask_ratio = pair(k, v)?,

            "model.patch_size" => self.model.patch_size = num(k, v)?,
            "model.channels" => self.model.channels = num(k, v)?,
            "model.embed_dim" => self.model.embed_dim = num(k, v)?,
            "model.depth" => self.model.depth = num(k, v)?,
            "model.heads" => self.model.heads = num(k, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = num(k, v)?,
            "model.proj_layers" => self.model.proj_layers = num(k, v)?,
            "model.proj_dim" => self.model.proj_dim = num(k, v)?,
            "model.proj_hidden" => {
                self.model.proj_hidden = if v == "auto" { None } else { Some(num(k, v)?) }
            }
            "model.pe_base_resolution" => self.model.pe_base_resolution = num(k, v)?,
            "model.inference_layer" => self.model.inference_layer = num(k, v)?,

            "temp.student" => self.temps.student = num(k, v)?,
            "temp.teacher" => self.temps.teacher = num(k, v)?,

            "optim.beta1" => self.optim.betas.0 = num(k, v)?,
            "optim.beta2" => self.optim.betas.1 = num(k, v)?,
            "optim.eps" => self.optim.eps = num(k, v)?,
            "optim.warmup_epochs" => self.optim.warmup_epochs = num(k, v)?,
            "optim.wd_start" => self.optim.wd_start = num(k, v)?,
            "optim.wd_end" => self.optim.wd_end = num(k, v)?,
            "optim.lr_scale" => self.optim.lr_scale_constant = num(k, v)?,

            "train.batch" => self.train.batch = num(k, v)?,
            "train.epochs" => self.train.epochs = num(k, v)?,
            "train.objectives" => self.train.objectives = ObjectiveSet::parse(v)?,
            "train.ema_momentum" => self.train.ema_momentum = num(k, v)?,
            "train.center_momentum" => self.train.center_momentum = num(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = num(k, v)?,

            "prop.top_k" => self.prop.top_k = num(k, v)?,
            "prop.context" => self.prop.context = num(k, v)?,
            "prop.radius" => self.prop.radius = num(k, v)?,
            "prop.temperature" => self.prop.temperature = num(k, v)?,

            "data.root" => self.data.root = PathBuf::from(v),
            "data.train_videos" => self.data.train_videos = num(k, v)?,
            "data.eval_videos" => self.data.eval_videos = num(k, v)?,
            "data.size" => self.data.size = num(k, v)?,
            "data.train_frames" => self.data.train_frames = num(k, v)?,
            "data.eval_frames" => self.data.eval_frames = num(k, v)?,

            "out.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = |x: &dyn Display| x.to_string();
        let v = &self.view;
        let m = &self.model;
        vec![
            ("seed", s(&self.seed)),
            ("view.clip_len", s(&v.clip_len)),
            ("view.local_crops", s(&v.local_crops)),
            ("view.global_scale", show_pair(v.global_scale)),
            ("view.local_scale", show_pair(v.local_scale)),
            ("view.global_size", s(&v.global_size)),
            ("view.local_size", s(&v.local_size)),
            ("view.augment", v.augment.name().to_owned()),
            ("view.frameskip", s(&v.frameskip)),
            ("view.flip_prob", s(&v.flip_prob)),
            ("view.brightness", s(&v.brightness)),
            ("view.contrast", s(&v.contrast)),
            ("view.saturation", s(&v.saturation)),
            ("view.mask_gate", s(&v.mask_gate)),
            ("view.mask_ratio", show_pair(v.mask_ratio)),
            ("model.patch_size", s(&m.patch_size)),
            ("model.channels", s(&m.channels)),
            ("model.embed_dim", s(&m.embed_dim)),
            ("model.depth", s(&m.depth)),
            ("model.heads", s(&m.heads)),
            ("model.mlp_ratio", s(&m.mlp_ratio)),
            ("model.proj_layers", s(&m.proj_layers)),
            ("model.proj_dim", s(&m.proj_dim)),
            (
                "model.proj_hidden",
                m.proj_hidden.map_or("auto".to_owned(), |h| h.to_string()),
            ),
            ("model.pe_base_resolution", s(&m.pe_base_resolution)),
            ("model.inference_layer", s(&m.inference_layer)),
            ("temp.student", s(&self.temps.student)),
            ("temp.teacher", s(&self.temps.teacher)),
            ("optim.beta1", s(&self.optim.betas.0)),
            ("optim.beta2", s(&self.optim.betas.1)),
            ("optim.eps", s(&self.optim.eps)),
            ("optim.warmup_epochs", s(&self.optim.warmup_epochs)),
            ("optim.wd_start", s(&self.optim.wd_start)),
            ("optim.wd_end", s(&self.optim.wd_end)),
            ("optim.lr_scale", s(&self.optim.lr_scale_constant)),
            ("train.batch", s(&self.train.batch)),
            ("train.epochs", s(&self.train.epochs)),
            ("train.objectives", self.train.objectives.name()),
            ("train.ema_momentum", s(&self.train.ema_momentum)),
            ("train.center_momentum", s(&self.train.center_momentum)),
            ("train.checkpoint_every", s(&self.train.checkpoint_every)),
            ("prop.top_k", s(&self.prop.top_k)),
            ("prop.context", s(&self.prop.context)),
            ("prop.radius", s(&self.prop.radius)),
            ("prop.temperature", s(&self.prop.temperature)),
            ("data.root", self.data.root.display().to_string()),
            ("data.train_videos", s(&self.data.train_videos)),
            ("data.eval_videos", s(&self.data.eval_videos)),
            ("data.size", s(&self.data.size)),
            ("data.train_frames", s(&self.data.train_frames)),
            ("data.eval_frames", s(&self.data.eval_frames)),
            ("out.dir", self.out_dir.display().to_string()),
        ]
    }

    /// Config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        self.model.validate()?;
        self.temps.validate()?;
        self.prop.validate()?;
        let optim = OptimizerConfig {
            total_epochs: self.train.epochs,
            batch_size: self.train.batch.max(1),
            clip_len: self.view.clip_len.max(1),
            ..self.optim.clone()
        };
        optim.validate()?;
        if self.train.batch == 0 || self.train.checkpoint_every == 0 {
            return Err(Error::Config("train.batch and train.checkpoint_every must be positive".into()));
        }
        for (name, m) in [
            ("train.ema_momentum", self.train.ema_momentum),
            ("train.center_momentum", self.train.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} {m} outside [0, 1]")));
            }
        }
        if self.view.global_size % self.model.patch_size != 0
            || self.view.local_size % self.model.patch_size != 0
        {
            return Err(Error::Config(format!(
                "crop sizes {} / {} must be multiples of the patch size {}",
                self.view.global_size, self.view.local_size, self.model.patch_size
            )));
        }
        if self.data.size == 0 || self.data.size % self.model.patch_size != 0 {
            return Err(Error::Config(format!(
                "data.size {} must be a positive multiple of the patch size {}",
                self.data.size, self.model.patch_size
            )));
        }
        let span = (self.view.clip_len.max(1) - 1) * self.view.frameskip + 1;
        if self.data.train_frames < span {
            return Err(Error::Config(format!(
                "data.train_frames {} is shorter than one clip span {span}",
                self.data.train_frames
            )));
        }
        Ok(())
    }

    /// Optimizer settings for a training set of `videos` clips sources.
    pub fn optimizer(&self, videos: usize) -> OptimizerConfig {
        OptimizerConfig {
            total_epochs: self.train.epochs,
            batch_size: self.train.batch,
            clip_len: self.view.clip_len,
            steps_per_epoch: (videos / self.train.batch.max(1)).max(1),
            ..self.optim.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.view.mask_ratio = (0.2, 0.35);
        cfg.model.proj_hidden = Some(48);
        cfg.train.objectives = ObjectiveSet::parse("g2g").unwrap();
        cfg.optim.lr_scale_constant = 0.0003;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = RunConfig::parse("# desk run\nseed = 3  # trailing\n\nview.local_crops=2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.view.local_crops, 2);
        cfg.apply_override("prop.top_k=7").unwrap();
        assert_eq!(cfg.prop.top_k, 7);
    }

    #[test]
    fn unknown_key_and_bad_values() {
        assert!(RunConfig::parse("view.nope = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("view.global_scale = 0.5").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        let mut cfg = RunConfig::default();
        cfg.view.global_size = 60;
        assert!(cfg.validate().is_err());
    }
}
