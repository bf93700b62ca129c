//! Moving-shapes videos over a smooth random background, with per-object
//! ground-truth masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MaskRaster;
use crate::numerics::Rng;
use crate::views::store::{write_index, write_video};
use crate::views::{Image, Video};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Disc,
    Triangle,
}

/// One object: its shape, half-extent, starting centre, per-frame velocity
/// and fill colour.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Half-width and half-height in pixels (the disc uses the first).
    pub half: (f64, f64),
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub background_seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::invalid("scene needs a positive canvas and frame count"));
        }
        if self.objects.len() > 254 {
            return Err(Error::invalid("at most 254 objects fit in a mask"));
        }
        for o in &self.objects {
            let (x, y) = o.center;
            if !(0.0..self.width as f64).contains(&x) || !(0.0..self.height as f64).contains(&y) {
                return Err(Error::invalid(format!("object centre {:?} off canvas", o.center)));
            }
        }
        Ok(())
    }
}

/// Object centre at `frame`, reflecting off the canvas borders so the
/// centre pixel always stays on canvas.
pub fn position_at(spec: &ObjectSpec, frame: usize, width: usize, height: usize) -> (f64, f64) {
    let reflect = |start: f64, v: f64, extent: usize| {
        let hi = extent as f64 - 1.0;
        if hi <= 0.0 {
            return 0.0;
        }
        let period = 2.0 * hi;
        let p = (start + v * frame as f64).rem_euclid(period);
        if p <= hi {
            p
        } else {
            period - p
        }
    };
    (
        reflect(spec.center.0, spec.velocity.0, width),
        reflect(spec.center.1, spec.velocity.1, height),
    )
}

/// Whether the pixel with top-left corner `(px, py)` belongs to the object
/// centred at `c`. Rectangles cover `[c − half, c + half)` on the integer
/// lattice; discs and triangles test the pixel centre.
fn covers(o: &ObjectSpec, c: (f64, f64), px: usize, py: usize) -> bool {
    let (x, y) = (px as f64, py as f64);
    match o.shape {
        Shape::Rectangle => {
            let x0 = (c.0 - o.half.0).round();
            let y0 = (c.1 - o.half.1).round();
            x >= x0 && x < x0 + 2.0 * o.half.0.round() && y >= y0 && y < y0 + 2.0 * o.half.1.round()
        }
        Shape::Disc => {
            let (dx, dy) = (x + 0.5 - c.0, y + 0.5 - c.1);
            dx * dx + dy * dy <= o.half.0 * o.half.0
        }
        Shape::Triangle => {
            // Apex up, base at the bottom of the bounding box.
            let (cx, cy) = (x + 0.5, y + 0.5);
            let (top, bottom) = (c.1 - o.half.1, c.1 + o.half.1);
            if cy < top || cy > bottom {
                return false;
            }
            let t = (cy - top) / (bottom - top);
            (cx - c.0).abs() <= t * o.half.0
        }
    }
}

/// Smooth texture: bilinear upsampling of a coarse random colour lattice.
fn background(width: usize, height: usize, seed: u64) -> Image {
    const CELL: usize = 8;
    let (gw, gh) = (width / CELL + 2, height / CELL + 2);
    let mut rng = Rng::new(seed);
    let lattice: Vec<[f32; 3]> = (0..gw * gh)
        .map(|_| {
            let base = 0.3 + 0.4 * rng.uniform() as f32;
            [
                base + 0.1 * rng.uniform() as f32,
                base + 0.1 * rng.uniform() as f32,
                base + 0.1 * rng.uniform() as f32,
            ]
        })
        .collect();
    let mut img = Image::filled(width, height, [0.0; 3]);
    for y in 0..height {
        let fy = y as f32 / CELL as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / CELL as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |gx: usize, gy: usize| lattice[gy * gw + gx];
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let top = at(x0, y0)[c] * (1.0 - tx) + at(x0 + 1, y0)[c] * tx;
                let bot = at(x0, y0 + 1)[c] * (1.0 - tx) + at(x0 + 1, y0 + 1)[c] * tx;
                *v = top * (1.0 - ty) + bot * ty;
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

/// Frames and masks of one scene. Later objects occlude earlier ones;
/// object `i` carries mask id `i + 1`.
pub fn render_scene(spec: &SyntheticSceneSpec) -> Result<(Vec<Image>, Vec<MaskRaster>)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let bg = background(w, h, spec.background_seed);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut img = bg.clone();
        let mut mask = MaskRaster::filled(w, h, 0);
        for (i, o) in spec.objects.iter().enumerate() {
            let c = position_at(o, t, w, h);
            for y in 0..h {
                for x in 0..w {
                    if covers(o, c, x, y) {
                        img.set_pixel(x, y, o.color);
                        mask.set(x, y, i as u8 + 1);
                    }
                }
            }
        }
        frames.push(img);
        masks.push(mask);
    }
    Ok((frames, masks))
}

const PALETTE: [[f32; 3]; 6] = [
    [0.9, 0.15, 0.1],
    [0.1, 0.75, 0.2],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.9],
];

/// A scene with 1–3 objects of random shape, size, speed and colour.
pub fn random_scene(size: usize, frames: usize, rng: &mut Rng) -> SyntheticSceneSpec {
    let n = 1 + rng.below_usize(3);
    let mut colors: Vec<usize> = rng.permutation(PALETTE.len());
    colors.truncate(n);
    let objects = colors
        .into_iter()
        .map(|ci| {
            let shape = match rng.below_usize(3) {
                0 => Shape::Rectangle,
                1 => Shape::Disc,
                _ => Shape::Triangle,
            };
            let s = size as f64;
            let half = (
                rng.uniform_range(s / 10.0, s / 5.0).round(),
                rng.uniform_range(s / 10.0, s / 5.0).round(),
            );
            let center = (rng.uniform_range(0.0, s - 1.0), rng.uniform_range(0.0, s - 1.0));
            let velocity = (rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5));
            ObjectSpec {
                shape,
                half,
                center,
                velocity,
                color: PALETTE[ci],
            }
        })
        .collect();
    SyntheticSceneSpec {
        width: size,
        height: size,
        frames,
        objects,
        background_seed: rng.next_u64(),
    }
}

/// Renders scenes into a split directory. Masks are written only when
/// `with_masks`; training splits omit them.
pub fn write_split(dir: &Path, specs: &[SyntheticSceneSpec], with_masks: bool) -> Result<Vec<String>> {
    let mut ids = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (frames, masks) = render_scene(spec)?;
        let video = Video {
            id: format!("video_{i:03}"),
            frames,
            masks: with_masks.then_some(masks),
        };
        write_video(dir, &video)?;
        ids.push(video.id);
    }
    write_index(dir, &ids)?;
    Ok(ids)
}

/// Writes `root/train` (frames only) and `root/eval` (frames and masks).
pub fn gen_synthetic_dataset(
    root: &Path,
    train: &[SyntheticSceneSpec],
    eval: &[SyntheticSceneSpec],
) -> Result<()> {
    write_split(&root.join("train"), train, false)?;
    write_split(&root.join("eval"), eval, true)?;
    Ok(())
}

/// Train and eval scene sets drawn from independent substreams of `rng`.
pub fn random_scene_sets(
    rng: &Rng,
    size: usize,
    train: (usize, usize),
    eval: (usize, usize),
) -> (Vec<SyntheticSceneSpec>, Vec<SyntheticSceneSpec>) {
    let draw = |label: &str, (count, frames): (usize, usize)| {
        let mut r = rng.substream(label);
        (0..count).map(|_| random_scene(size, frames, &mut r)).collect()
    };
    (draw("train", train), draw("eval", eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(shape: Shape, velocity: (f64, f64)) -> ObjectSpec {
        ObjectSpec {
            shape,
            half: (3.0, 2.0),
            center: (10.0, 10.0),
            velocity,
            color: [1.0, 0.0, 0.0],
        }
    }

    fn scene(objects: Vec<ObjectSpec>, frames: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            width: 32,
            height: 24,
            frames,
            objects,
            background_seed: 4,
        }
    }

    fn centroid(m: &MaskRaster, id: u8) -> (f64, f64) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) == id {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1.0;
                }
            }
        }
        (sx / n, sy / n)
    }

    #[test]
    fn static_disc_is_constant() {
        let (frames, masks) = render_scene(&scene(vec![object(Shape::Disc, (0.0, 0.0))], 4)).unwrap();
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
        assert!(masks.windows(2).all(|w| w[0] == w[1]));
        assert!(masks[0].ids().contains(&1));
    }

    #[test]
    fn moving_rectangle_centroid_advances_one_pixel() {
        let (_, masks) = render_scene(&scene(vec![object(Shape::Rectangle, (1.0, 0.0))], 6)).unwrap();
        let cs: Vec<(f64, f64)> = masks.iter().map(|m| centroid(m, 1)).collect();
        for w in cs.windows(2) {
            assert_eq!(w[1].0 - w[0].0, 1.0);
            assert_eq!(w[1].1, w[0].1);
        }
    }

    #[test]
    fn reflection_keeps_objects_on_canvas() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let spec = random_scene(24, 40, &mut rng);
            let (_, masks) = render_scene(&spec).unwrap();
            for (t, m) in masks.iter().enumerate() {
                for (i, o) in spec.objects.iter().enumerate() {
                    let (x, y) = position_at(o, t, 24, 24);
                    assert!((0.0..=23.0).contains(&x) && (0.0..=23.0).contains(&y));
                    // Topmost object is never occluded.
                    if i + 1 == spec.objects.len() {
                        assert!(m.ids().contains(&(i as u8 + 1)));
                    }
                }
            }
        }
    }

    #[test]
    fn triangle_widens_downward() {
        let o = object(Shape::Triangle, (0.0, 0.0));
        let (_, masks) = render_scene(&scene(vec![o], 1)).unwrap();
        let row = |y: usize| (0..32).filter(|&x| masks[0].get(x, y) == 1).count();
        assert!(row(8) <= row(11));
    }

    #[test]
    fn generation_is_deterministic_and_train_has_no_masks() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for dir in [a.path(), b.path()] {
            let (train, eval) = random_scene_sets(&Rng::new(9), 16, (2, 5), (1, 4));
            gen_synthetic_dataset(dir, &train, &eval).unwrap();
        }
        let read = |d: &Path, rel: &str| std::fs::read(d.join(rel)).unwrap();
        for rel in ["train/video_001/frame_00004.ppm", "eval/video_000/mask_00003.pgm"] {
            assert_eq!(read(a.path(), rel), read(b.path(), rel));
        }
        assert_eq!(crate::views::store::masks_on_disk(&a.path().join("train/video_000")), 0);
        assert_eq!(crate::views::store::masks_on_disk(&a.path().join("eval/video_000")), 4);
    }
}
