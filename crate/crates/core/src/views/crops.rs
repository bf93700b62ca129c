//! Random resized crops with optional flip and colour jitter.

use super::image::{luma, Image, Rect};
use super::{AugmentTarget, VideoClip, ViewConfig};
use crate::error::Result;
use crate::numerics::Rng;

const CROP_ASPECT: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const CROP_RETRIES: usize = 10;

/// Multiplicative colour factors, applied as brightness, contrast,
/// saturation in that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

/// Everything needed to re-render a crop from its source frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub rect: Rect,
    pub size: usize,
    pub flipped: bool,
    pub jitter: Option<Jitter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: Image,
    pub geometry: CropGeometry,
}

/// One global and `M` local crops per clip frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSet {
    pub globals: Vec<Crop>,
    pub locals: Vec<Vec<Crop>>,
}

/// Rectangle covering a random area fraction in `scale` with a log-uniform
/// aspect ratio; falls back to a centred crop when every retry is
/// infeasible.
pub fn sample_rect(width: usize, height: usize, scale: (f64, f64), rng: &mut Rng) -> Rect {
    let area = (width * height) as f64;
    let (la, lb) = (CROP_ASPECT.0.ln(), CROP_ASPECT.1.ln());
    for _ in 0..CROP_RETRIES {
        let target = area * rng.uniform_range(scale.0, scale.1);
        let aspect = rng.uniform_range(la, lb).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            return Rect {
                x: rng.below_usize(width - w + 1),
                y: rng.below_usize(height - h + 1),
                width: w,
                height: h,
            };
        }
    }
    let s = scale.1.min(1.0).sqrt();
    let w = ((width as f64 * s).round() as usize).clamp(1, width);
    let h = ((height as f64 * s).round() as usize).clamp(1, height);
    log::debug!("crop sampling fell back to a centred {w}x{h} crop of {width}x{height}");
    Rect {
        x: (width - w) / 2,
        y: (height - h) / 2,
        width: w,
        height: h,
    }
}

fn apply_jitter(img: &Image, j: Jitter) -> Image {
    let mut out = img.map(|v| (v * j.brightness).clamp(0.0, 1.0));
    let n = (out.width() * out.height()) as f32;
    let mut mean = 0.0f32;
    for y in 0..out.height() {
        for x in 0..out.width() {
            mean += luma(out.pixel(x, y));
        }
    }
    mean /= n;
    out = out.map(|v| ((v - mean) * j.contrast + mean).clamp(0.0, 1.0));
    for y in 0..out.height() {
        for x in 0..out.width() {
            let p = out.pixel(x, y);
            let g = luma(p);
            out.set_pixel(x, y, p.map(|v| ((v - g) * j.saturation + g).clamp(0.0, 1.0)));
        }
    }
    out
}

/// Renders a crop from its recorded geometry.
pub fn render_crop(frame: &Image, geometry: &CropGeometry) -> Result<Image> {
    let mut img = frame
        .crop(geometry.rect)?
        .resize_bilinear(geometry.size, geometry.size);
    if geometry.flipped {
        img = img.flip_horizontal();
    }
    if let Some(j) = geometry.jitter {
        img = apply_jitter(&img, j);
    }
    Ok(img)
}

fn draw_crop(
    frame: &Image,
    scale: (f64, f64),
    size: usize,
    augment: bool,
    geometry_rng: &mut Rng,
    augment_rng: &mut Rng,
    cfg: &ViewConfig,
) -> Result<Crop> {
    let rect = sample_rect(frame.width(), frame.height(), scale, geometry_rng);
    let (flipped, jitter) = if augment {
        let flipped = augment_rng.bernoulli(cfg.flip_prob);
        let mut factor = |s: f64| augment_rng.uniform_range(1.0 - s, 1.0 + s) as f32;
        let jitter = Jitter {
            brightness: factor(cfg.brightness),
            contrast: factor(cfg.contrast),
            saturation: factor(cfg.saturation),
        };
        (flipped, Some(jitter))
    } else {
        (false, None)
    };
    let geometry = CropGeometry {
        rect,
        size,
        flipped,
        jitter,
    };
    Ok(Crop {
        image: render_crop(frame, &geometry)?,
        geometry,
    })
}

/// Crops every clip frame. Geometry and augmentation draw from separate
/// substreams keyed by crop position, so disabling augmentation on one
/// crop kind never changes the other's pixels.
pub fn make_crops(clip: &VideoClip, rng: &Rng, cfg: &ViewConfig) -> Result<CropSet> {
    let geometry = rng.substream("geometry");
    let augment = rng.substream("augment");
    let per_frame = (cfg.local_crops + 1) as u64;
    let (aug_globals, aug_locals) = match cfg.augment {
        AugmentTarget::LocalsOnly => (false, true),
        AugmentTarget::GlobalsOnly => (true, false),
        AugmentTarget::Both => (true, true),
        AugmentTarget::None => (false, false),
    };
    let mut globals = Vec::with_capacity(clip.frames.len());
    let mut locals = Vec::with_capacity(clip.frames.len());
    for (i, frame) in clip.frames.iter().enumerate() {
        let base = i as u64 * per_frame;
        globals.push(draw_crop(
            frame,
            cfg.global_scale,
            cfg.global_size,
            aug_globals,
            &mut geometry.substream_index(base),
            &mut augment.substream_index(base),
            cfg,
        )?);
        let frame_locals = (0..cfg.local_crops as u64)
            .map(|j| {
                draw_crop(
                    frame,
                    cfg.local_scale,
                    cfg.local_size,
                    aug_locals,
                    &mut geometry.substream_index(base + 1 + j),
                    &mut augment.substream_index(base + 1 + j),
                    cfg,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        locals.push(frame_locals);
    }
    Ok(CropSet { globals, locals })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = Rng::new(seed);
        let data = (0..w * h * 3).map(|_| rng.uniform() as f32).collect();
        Image::new(w, h, data).unwrap()
    }

    fn clip(frames: usize) -> VideoClip {
        VideoClip {
            frames: (0..frames).map(|i| textured(40, 32, i as u64)).collect(),
            source_id: "t".into(),
            indices: (0..frames).collect(),
        }
    }

    #[test]
    fn counts_sizes_and_bounds() {
        let cfg = ViewConfig::default();
        let set = make_crops(&clip(4), &Rng::new(1), &cfg).unwrap();
        assert_eq!(set.globals.len(), 4);
        assert_eq!(set.locals.iter().map(Vec::len).sum::<usize>(), 32);
        for c in set.globals.iter().chain(set.locals.iter().flatten()) {
            let r = c.geometry.rect;
            assert!(r.x + r.width <= 40 && r.y + r.height <= 32 && r.width > 0);
            assert_eq!(c.image.width(), c.geometry.size);
        }
        assert!(set.globals.iter().all(|c| c.image.width() == cfg.global_size));
        assert!(set.locals.iter().flatten().all(|c| c.image.width() == cfg.local_size));
        assert!(set.globals.iter().all(|c| !c.geometry.flipped && c.geometry.jitter.is_none()));
    }

    #[test]
    fn replay_is_bit_exact() {
        let cfg = ViewConfig {
            augment: AugmentTarget::Both,
            ..ViewConfig::default()
        };
        let c = clip(2);
        let set = make_crops(&c, &Rng::new(9), &cfg).unwrap();
        for (i, frame) in c.frames.iter().enumerate() {
            assert_eq!(render_crop(frame, &set.globals[i].geometry).unwrap(), set.globals[i].image);
            for l in &set.locals[i] {
                assert_eq!(render_crop(frame, &l.geometry).unwrap(), l.image);
            }
        }
    }

    #[test]
    fn globals_do_not_depend_on_local_augmentation() {
        let c = clip(4);
        let with = make_crops(&c, &Rng::new(4), &ViewConfig::default()).unwrap();
        let without = make_crops(
            &c,
            &Rng::new(4),
            &ViewConfig {
                augment: AugmentTarget::None,
                ..ViewConfig::default()
            },
        )
        .unwrap();
        assert_eq!(with.globals, without.globals);
        assert_ne!(with.locals, without.locals);
    }

    #[test]
    fn collapsed_scales_are_pure_resizes() {
        let cfg = ViewConfig {
            augment: AugmentTarget::None,
            global_scale: (1.0, 1.0),
            local_scale: (1.0, 1.0),
            local_crops: 1,
            ..ViewConfig::default()
        };
        let c = clip(2);
        let set = make_crops(&c, &Rng::new(2), &cfg).unwrap();
        for (i, frame) in c.frames.iter().enumerate() {
            assert_eq!(set.globals[i].image, frame.resize_bilinear(64, 64));
            assert_eq!(set.locals[i][0].image, frame.resize_bilinear(32, 32));
        }
    }

    #[test]
    fn jitter_identity_and_clamping() {
        let img = textured(6, 5, 3);
        let id = Jitter {
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
        };
        let out = apply_jitter(&img, id);
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        let hot = apply_jitter(&img, Jitter { brightness: 1.4, contrast: 1.4, saturation: 1.2 });
        assert!(hot.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
