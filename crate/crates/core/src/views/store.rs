//! On-disk video store.
//!
//! ```text
//! <split>/videos.txt          one video directory name per line
//! <split>/<video>/frame_00000.ppm   binary RGB (P6, maxval 255)
//! <split>/<video>/mask_00000.pgm    binary labels (P5), evaluation only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::MaskRaster;

pub const INDEX_FILE: &str = "videos.txt";

/// Random access to the frames of one video.
pub trait FrameSource {
    fn id(&self) -> &str;
    fn num_frames(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Image>;
}

/// A fully loaded video, with labels when it belongs to an evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Image>,
    pub masks: Option<Vec<MaskRaster>>,
}

impl FrameSource for Video {
    fn id(&self) -> &str {
        &self.id
    }

    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Image> {
        self.frames.get(index).cloned().ok_or_else(|| {
            Error::invalid(format!(
                "video {} has {} frames, asked for {index}",
                self.id,
                self.frames.len()
            ))
        })
    }
}

pub fn frame_name(i: usize) -> String {
    format!("frame_{i:05}.ppm")
}

pub fn mask_name(i: usize) -> String {
    format!("mask_{i:05}.pgm")
}

/// Parses a binary PNM header, returning (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<(usize, usize, usize)> {
    let what = path.display().to_string();
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            what,
            format!("expected {} header", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(what.clone(), "malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(what, "malformed header"));
    }
    if fields[2] != 255 {
        return Err(Error::format(what, format!("unsupported maxval {}", fields[2])));
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let (w, h, off) = parse_header(&bytes, b"P6", path)?;
    let payload = bytes
        .get(off..off + w * h * CHANNELS)
        .ok_or_else(|| Error::format(path.display().to_string(), "truncated pixel data"))?;
    Image::new(w, h, payload.iter().map(|&b| f32::from(b) / 255.0).collect())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<MaskRaster> {
    let bytes = read_bytes(path)?;
    let (w, h, off) = parse_header(&bytes, b"P5", path)?;
    let payload = bytes
        .get(off..off + w * h)
        .ok_or_else(|| Error::format(path.display().to_string(), "truncated pixel data"))?;
    MaskRaster::new(w, h, payload.to_vec())
}

pub fn encode_pgm(mask: &MaskRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.ids());
    out
}

pub fn write_pgm(path: &Path, mask: &MaskRaster) -> Result<()> {
    write_bytes(path, &encode_pgm(mask))
}

pub fn read_index(split: &Path) -> Result<Vec<String>> {
    let path = split.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

fn count_files(dir: &Path, name: fn(usize) -> String) -> usize {
    (0..).take_while(|&i| dir.join(name(i)).is_file()).count()
}

/// Number of consecutive ground-truth mask files in a video directory.
pub fn masks_on_disk(dir: &Path) -> usize {
    count_files(dir, mask_name)
}

/// Loads one video directory; masks are read only when `with_masks`.
pub fn load_video(dir: &Path, id: &str, with_masks: bool) -> Result<Video> {
    let n = count_files(dir, frame_name);
    if n == 0 {
        return Err(Error::format(
            dir.display().to_string(),
            "no frame_00000.ppm found",
        ));
    }
    let frames = (0..n)
        .map(|i| read_ppm(&dir.join(frame_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let masks = if with_masks {
        let m = (0..count_files(dir, mask_name))
            .map(|i| read_pgm(&dir.join(mask_name(i))))
            .collect::<Result<Vec<_>>>()?;
        Some(m)
    } else {
        None
    };
    Ok(Video {
        id: id.to_owned(),
        frames,
        masks,
    })
}

pub fn load_split(split: &Path, with_masks: bool) -> Result<Vec<Video>> {
    read_index(split)?
        .iter()
        .map(|id| load_video(&split.join(id), id, with_masks))
        .collect()
}

/// Writes a video directory and returns its path. Masks are written when
/// present on the video.
pub fn write_video(split: &Path, video: &Video) -> Result<PathBuf> {
    let dir = split.join(&video.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        write_ppm(&dir.join(frame_name(i)), f)?;
    }
    if let Some(masks) = &video.masks {
        for (i, m) in masks.iter().enumerate() {
            write_pgm(&dir.join(mask_name(i)), m)?;
        }
    }
    Ok(dir)
}

pub fn write_index(split: &Path, ids: &[String]) -> Result<()> {
    fs::create_dir_all(split).map_err(|e| Error::io(split, e))?;
    let mut text = ids.join("\n");
    text.push('\n');
    write_bytes(&split.join(INDEX_FILE), text.as_bytes())
}
