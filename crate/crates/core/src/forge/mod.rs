//! Synthetic verification-code images.
//!
//! Each character is drawn from a fixed bitmap atlas, scaled, sheared
//! horizontally by its own random angle and placed left to right with a small
//! random offset. Output is strictly two-level: ink 0 on paper 255, with no
//! occluding lines, shadows or noise.

mod atlas;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Alphabet, LabelSeq};
use crate::error::{Error, Result};
use crate::rng::RandomSource;

pub const INK: u8 = 0;
pub const PAPER: u8 = 255;
/// Narrowest horizontal room a single glyph may be given.
pub const MIN_GLYPH_WIDTH: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub alphabet: Alphabet,
    pub code_length: usize,
    pub width: usize,
    pub height: usize,
    /// Maximum per-character shear angle, degrees.
    pub skew_range: f64,
    /// Glyph size varies uniformly in `1 ± scale_jitter`.
    pub scale_jitter: f64,
    pub seed: u64,
}

impl ForgeConfig {
    /// 180x50, six characters over the 62-symbol alphabet.
    pub fn paper() -> Self {
        ForgeConfig {
            alphabet: Alphabet::full(),
            code_length: 6,
            width: 180,
            height: 50,
            skew_range: 25.0,
            scale_jitter: 0.1,
            seed: 0,
        }
    }

    /// 60x24, three digits.
    pub fn mini() -> Self {
        ForgeConfig {
            alphabet: Alphabet::digits(),
            code_length: 3,
            width: 60,
            height: 24,
            skew_range: 25.0,
            scale_jitter: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.alphabet.len() > 62 {
            return bad(format!("alphabet has {} characters, max 62", self.alphabet.len()));
        }
        if let Some(c) = self
            .alphabet
            .chars()
            .iter()
            .find(|&&c| atlas::atlas().get(c).is_none())
        {
            return bad(format!("no glyph for character {c:?}"));
        }
        if self.code_length == 0 {
            return bad("code_length must be >= 1".into());
        }
        if self.width < self.code_length * MIN_GLYPH_WIDTH {
            return bad(format!(
                "width {} cannot hold {} glyphs of at least {MIN_GLYPH_WIDTH}px",
                self.width, self.code_length
            ));
        }
        if self.height < 8 {
            return bad(format!("height {} is below 8px", self.height));
        }
        if !(0.0..=45.0).contains(&self.skew_range) {
            return bad(format!("skew_range {} outside [0, 45]", self.skew_range));
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return bad(format!("scale_jitter {} outside [0, 0.5)", self.scale_jitter));
        }
        Ok(())
    }

    /// Number of distinct codes, saturating at `u128::MAX`.
    pub fn label_space(&self) -> u128 {
        (0..self.code_length).fold(1u128, |acc, _| {
            acc.saturating_mul(self.alphabet.len() as u128)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("{} pixels supplied", pixels.len()),
            });
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![PAPER; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn ink_fraction(&self) -> f64 {
        self.pixels.iter().filter(|&&p| p < 128).count() as f64 / self.pixels.len() as f64
    }

    /// Network input: intensities mapped to `[0, 1]` with ink at 1.
    pub fn write_input(&self, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(&self.pixels) {
            *o = f64::from(255 - p) / 255.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub image: GrayImage,
    pub label: LabelSeq,
}

fn check_label(cfg: &ForgeConfig, label: &LabelSeq) -> Result<()> {
    if label.len() != cfg.code_length {
        return Err(Error::InvalidLabel {
            label: label.to_string(),
            reason: format!("length {} but config wants {}", label.len(), cfg.code_length),
        });
    }
    if let Some(c) = label.chars().find(|&c| !cfg.alphabet.contains(c)) {
        return Err(Error::InvalidLabel {
            label: label.to_string(),
            reason: format!("{c:?} is not in the configured alphabet"),
        });
    }
    Ok(())
}

pub fn render_code(cfg: &ForgeConfig, label: &LabelSeq, rs: &mut RandomSource) -> Result<GrayImage> {
    cfg.validate()?;
    check_label(cfg, label)?;
    let atlas = atlas::atlas();
    let mut img = GrayImage::blank(cfg.width, cfg.height);

    let len = cfg.code_length as f64;
    let cell = cfg.width as f64 / len;
    let base_scale = (0.75 * cfg.height as f64 / atlas.height as f64)
        .min(0.9 * cell / atlas.mean_width());
    let sym = |rs: &mut RandomSource, r: f64| (2.0 * rs.uniform() - 1.0) * r;

    for (i, c) in label.chars().enumerate() {
        let glyph = atlas.get(c).expect("validated alphabet has glyphs");
        let scale = base_scale * (1.0 + sym(rs, cfg.scale_jitter));
        let shear = sym(rs, cfg.skew_range).to_radians().tan();
        let half_w = 0.5 * glyph.width as f64 * scale;
        let half_h = 0.5 * glyph.height as f64 * scale;
        let slack_y = (0.5 * cfg.height as f64 - half_h).max(0.0);
        let cx = (i as f64 + 0.5) * cell + sym(rs, 0.1 * cell);
        let cy = 0.5 * cfg.height as f64 + sym(rs, 0.5 * slack_y);

        // Destination bounding box of the sheared glyph, clipped to the canvas.
        let reach_x = half_w + shear.abs() * half_h;
        let x0 = (cx - reach_x).floor().max(0.0) as usize;
        let x1 = ((cx + reach_x).ceil() as usize).min(cfg.width);
        let y0 = (cy - half_h).floor().max(0.0) as usize;
        let y1 = ((cy + half_h).ceil() as usize).min(cfg.height);

        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            let src_row = dy / scale + 0.5 * glyph.height as f64;
            if src_row < 0.0 || src_row >= glyph.height as f64 {
                continue;
            }
            for x in x0..x1 {
                // Rows above the centre lean right for positive shear.
                let dx = x as f64 + 0.5 - cx + shear * dy;
                let src_col = dx / scale + 0.5 * glyph.width as f64;
                if src_col < 0.0 || src_col >= glyph.width as f64 {
                    continue;
                }
                if glyph.ink(src_row as usize, src_col as usize) {
                    img.pixels[y * cfg.width + x] = INK;
                }
            }
        }
    }
    Ok(img)
}

fn draw_label(cfg: &ForgeConfig, rs: &mut RandomSource) -> LabelSeq {
    let chars = cfg.alphabet.chars();
    let text: String = (0..cfg.code_length)
        .map(|_| chars[rs.below(chars.len() as u64) as usize])
        .collect();
    LabelSeq::new(&text, &cfg.alphabet).expect("drawn from alphabet")
}

fn render_all(cfg: &ForgeConfig, labels: Vec<LabelSeq>) -> Result<Vec<LabeledSample>> {
    let root = RandomSource::new(cfg.seed);
    labels
        .into_par_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rs = root.child_indexed("render", i as u64);
            let image = render_code(cfg, &label, &mut rs)?;
            Ok(LabeledSample { image, label })
        })
        .collect()
}

/// `n` samples with pairwise-distinct labels, drawn uniformly with rejection
/// on collision.
pub fn generate_dataset(cfg: &ForgeConfig, n: usize) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let capacity = cfg.label_space();
    if n as u128 > capacity {
        return Err(Error::Capacity {
            requested: n as u128,
            capacity,
        });
    }
    let mut rs = RandomSource::new(cfg.seed).child("labels");
    let mut seen = HashSet::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let label = draw_label(cfg, &mut rs);
        if seen.insert(label.clone()) {
            labels.push(label);
        }
    }
    render_all(cfg, labels)
}

/// `n` samples with independently drawn labels; codes may repeat, but every
/// image gets its own rendering stream. Used when `n` exceeds the label space.
pub fn generate_with_repeats(cfg: &ForgeConfig, n: usize) -> Result<Vec<LabeledSample>> {
    cfg.validate()?;
    let mut rs = RandomSource::new(cfg.seed).child("labels");
    let labels = (0..n).map(|_| draw_label(cfg, &mut rs)).collect();
    render_all(cfg, labels)
}
