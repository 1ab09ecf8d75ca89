//! Synthetic clips with known motion.
//!
//! Every pattern is rendered noise-free first; per-frame motion masks are the
//! pixels where the noise-free image changed from the previous frame (so
//! `masks[0]` is all zeros). Sensor noise, if requested, is added *after* the
//! masks are taken, which keeps them exact ground truth.
//!
//! All randomness (pattern colors, texture content, noise) comes from a
//! single seeded stream, so a spec generates the same clip bit for bit every
//! time, on every thread count.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rtf;
use crate::tensor::Tensor;

/// What moves in the clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipPattern {
    /// A bright square on a flat background, translating horizontally with
    /// wraparound. Motion is confined to the square's edges.
    TranslatingSquare,
    /// A smooth random texture translating horizontally by whole pixels;
    /// every pixel moves.
    TranslatingTexture,
    /// Four bright bars rotating about the image center; pixels change where
    /// bar edges sweep, more near the rim than the middle.
    RotatingBars,
}

impl FromStr for ClipPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating-square" => Ok(ClipPattern::TranslatingSquare),
            "translating-texture" => Ok(ClipPattern::TranslatingTexture),
            "rotating-bars" => Ok(ClipPattern::RotatingBars),
            other => Err(Error::Parse(format!(
                "unknown clip pattern {other:?} (expected translating-square, \
                 translating-texture, or rotating-bars)"
            ))),
        }
    }
}

impl fmt::Display for ClipPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClipPattern::TranslatingSquare => "translating-square",
            ClipPattern::TranslatingTexture => "translating-texture",
            ClipPattern::RotatingBars => "rotating-bars",
        };
        f.write_str(s)
    }
}

/// Everything needed to render a clip deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClipSpec {
    pub pattern: ClipPattern,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Number of frames.
    pub length: usize,
    /// Pixels of translation per frame (for the rotating pattern this is the
    /// arc length at the outermost radius).
    pub motion_px_per_frame: f32,
    /// Standard deviation of i.i.d. Gaussian sensor noise; 0 disables it.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticClipSpec {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height < 2 || self.width < 2 || self.length == 0 {
            return Err(Error::Config(format!(
                "clip spec needs channels >= 1, height/width >= 2, length >= 1; got \
                 {}x{}x{} over {} frames",
                self.channels, self.height, self.width, self.length
            )));
        }
        if !self.motion_px_per_frame.is_finite() {
            return Err(Error::Config("clip motion must be finite".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Frames (`[C, H, W]` each) plus per-frame motion masks (`[H, W]`, values 0
/// or 1, `masks[0]` all zeros). Masks describe the *noise-free* pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Tensor>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.masks.len() == self.frames.len()
    }
}

// ── Pattern rendering ───────────────────────────────────────────────────────

/// Integer pixel offset of frame `t` under a fractional per-frame motion.
fn offset_at(t: usize, motion: f32) -> isize {
    (t as f32 * motion).round() as isize
}

fn wrap(i: isize, extent: usize) -> usize {
    i.rem_euclid(extent as isize) as usize
}

/// Per-channel flat background and bright foreground levels.
fn draw_levels(rng: &mut ChaCha8Rng, channels: usize) -> (Vec<f32>, Vec<f32>) {
    let mut bg = Vec::with_capacity(channels);
    let mut fg = Vec::with_capacity(channels);
    for _ in 0..channels {
        bg.push(rng.random_range(-0.25..0.25));
        fg.push(rng.random_range(0.5..1.5));
    }
    (bg, fg)
}

fn render_square(spec: &SyntheticClipSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let side = (h.min(w) / 4).max(2);
    let top = (h - side.min(h)) / 2;
    let left0 = ((w - side.min(w)) / 2) as isize;
    let (bg, fg) = draw_levels(rng, c);
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let left = left0 + offset_at(t, spec.motion_px_per_frame);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let in_rows = y >= top && y < top + side;
                    let in_cols = wrap(x as isize - left, w) < side;
                    data.push(if in_rows && in_cols { fg[ch] } else { bg[ch] });
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}

fn render_texture(spec: &SyntheticClipSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    // Random values on a coarse grid (one knot per 4x4 cell), bilinearly
    // upsampled with periodic boundaries so horizontal shifts wrap cleanly.
    const CELL: usize = 4;
    let gh = (h / CELL).max(1);
    let gw = (w / CELL).max(1);
    let mut grid = Vec::with_capacity(c * gh * gw);
    for _ in 0..c * gh * gw {
        grid.push(rng.random_range(-1.0f32..1.0));
    }
    let knot = |ch: usize, gy: usize, gx: usize| grid[(ch * gh + gy % gh) * gw + gx % gw];
    let mut template = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let fy = y as f32 / CELL as f32;
                let fx = x as f32 / CELL as f32;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (wy, wx) = (fy - fy.floor(), fx - fx.floor());
                let v = knot(ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + knot(ch, y0, x0 + 1) * (1.0 - wy) * wx
                    + knot(ch, y0 + 1, x0) * wy * (1.0 - wx)
                    + knot(ch, y0 + 1, x0 + 1) * wy * wx;
                template.push(v);
            }
        }
    }
    // Each frame is a whole-pixel horizontal shift of the template, so the
    // clip is an exact translation sequence.
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let offset = offset_at(t, spec.motion_px_per_frame);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = wrap(x as isize - offset, w);
                    data.push(template[(ch * h + y) * w + src]);
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}

fn render_bars(spec: &SyntheticClipSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let (bg, fg) = draw_levels(rng, c);
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let max_radius = h.min(w) as f32 / 2.0;
    // Requested motion is the arc length per frame at the rim.
    let step = spec.motion_px_per_frame / max_radius;
    // Four bars: the angular period is a quarter turn, half of it lit.
    let period = PI / 2.0;
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let theta = t as f32 * step;
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let phi = (y as f32 - cy).atan2(x as f32 - cx) + theta;
                    let lit = phi.rem_euclid(period) < period / 2.0;
                    data.push(if lit { fg[ch] } else { bg[ch] });
                }
            }
        }
        frames.push(Tensor::new(vec![c, h, w], data)?);
    }
    Ok(frames)
}

/// Mask of pixels where any channel changed between consecutive noise-free
/// frames; the first mask is all zeros.
fn masks_from_frames(frames: &[Tensor]) -> Result<Vec<Tensor>> {
    let shape = frames[0].shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut masks = vec![Tensor::zeros(vec![h, w])?];
    for t in 1..frames.len() {
        let prev = frames[t - 1].data();
        let cur = frames[t].data();
        let mut mask = vec![0.0f32; h * w];
        for ch in 0..c {
            for px in 0..h * w {
                if cur[ch * h * w + px] != prev[ch * h * w + px] {
                    mask[px] = 1.0;
                }
            }
        }
        masks.push(Tensor::new(vec![h, w], mask)?);
    }
    Ok(masks)
}

fn add_noise(frames: &mut [Tensor], sigma: f32, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0f32, sigma)
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    for frame in frames {
        for v in frame.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(())
}

/// Render a clip. Same spec, same bits.
pub fn generate_clip(spec: &SyntheticClipSpec) -> Result<Clip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = match spec.pattern {
        ClipPattern::TranslatingSquare => render_square(spec, &mut rng)?,
        ClipPattern::TranslatingTexture => render_texture(spec, &mut rng)?,
        ClipPattern::RotatingBars => render_bars(spec, &mut rng)?,
    };
    let masks = masks_from_frames(&frames)?;
    add_noise(&mut frames, spec.noise_sigma, &mut rng)?;
    Ok(Clip { frames, masks })
}

/// A clip of pure i.i.d. Gaussian frames — no temporal structure at all, so
/// every pixel counts as moving from the second frame on. This is the
/// worst case for residual coding and deliberately not one of the patterns.
pub fn white_noise_clip(
    channels: usize,
    height: usize,
    width: usize,
    length: usize,
    sigma: f32,
    seed: u64,
) -> Result<Clip> {
    if channels == 0 || height == 0 || width == 0 || length == 0 {
        return Err(Error::Config("white-noise clip needs nonzero dimensions".into()));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Config("white-noise sigma must be finite and > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma)
        .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
    let mut frames = Vec::with_capacity(length);
    let mut masks = Vec::with_capacity(length);
    for t in 0..length {
        let data: Vec<f32> = (0..channels * height * width)
            .map(|_| normal.sample(&mut rng))
            .collect();
        frames.push(Tensor::new(vec![channels, height, width], data)?);
        masks.push(if t == 0 {
            Tensor::zeros(vec![height, width])?
        } else {
            Tensor::full(vec![height, width], 1.0)?
        });
    }
    Ok(Clip { frames, masks })
}

// ── On-disk layout ──────────────────────────────────────────────────────────
//
// A corpus directory holds `clip_000/`, `clip_001/`, ...; each clip directory
// holds `frame_000.rtf`, ... and (optionally) `mask_000.rtf`, .... A directory
// that itself contains `frame_*.rtf` files is treated as a single clip.

/// Write a corpus of clips under `dir`.
pub fn save_clips(dir: &Path, clips: &[Clip]) -> Result<()> {
    for (i, clip) in clips.iter().enumerate() {
        let sub = dir.join(format!("clip_{i:03}"));
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (t, frame) in clip.frames.iter().enumerate() {
            rtf::write_tensor(sub.join(format!("frame_{t:03}.rtf")), frame)?;
        }
        for (t, mask) in clip.masks.iter().enumerate() {
            rtf::write_tensor(sub.join(format!("mask_{t:03}.rtf")), mask)?;
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with(prefix))
        .collect();
    names.sort();
    Ok(names.into_iter().map(|n| dir.join(n)).collect())
}

fn load_single_clip(dir: &Path) -> Result<Clip> {
    let frame_paths = sorted_entries(dir, "frame_")?;
    if frame_paths.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no frame_*.rtf files",
            dir.display()
        )));
    }
    let frames = frame_paths
        .iter()
        .map(rtf::read_tensor)
        .collect::<Result<Vec<Tensor>>>()?;
    let mask_paths = sorted_entries(dir, "mask_")?;
    let masks = if mask_paths.len() == frames.len() {
        mask_paths
            .iter()
            .map(rtf::read_tensor)
            .collect::<Result<Vec<Tensor>>>()?
    } else {
        Vec::new()
    };
    Ok(Clip { frames, masks })
}

/// Load a corpus directory (or a single clip directory) written by
/// [`save_clips`]. Clips come back in name order.
pub fn load_clips(dir: &Path) -> Result<Vec<Clip>> {
    let subdirs: Vec<std::path::PathBuf> = sorted_entries(dir, "clip_")?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if subdirs.is_empty() {
        return Ok(vec![load_single_clip(dir)?]);
    }
    subdirs.iter().map(|p| load_single_clip(p)).collect()
}
