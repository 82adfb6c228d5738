//! Procedural glyph dataset.
//!
//! Every sample has one label. Each modality renders that label's glyph on a
//! square bitmap over its own striped or dotted background, adds Gaussian
//! pixel noise, and binarizes at 0.5. Glyphs are fixed for a given class count
//! and side; backgrounds get a random phase per sample when noise is on.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

const GLYPH_SEED: u64 = 0x9_1f0c;
const BACKGROUND_LEVEL: f64 = 0.4;
pub const NUM_PATTERNS: u32 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityStyle {
    /// Background pattern in `0..NUM_PATTERNS`.
    pub pattern: u32,
    /// Standard deviation of the pixel noise before binarization.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSetConfig {
    pub modalities: usize,
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub side: usize,
    /// Per-modality overrides; defaults to pattern `j` with `noise`.
    pub styles: Vec<ModalityStyle>,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSetConfig {
    fn default() -> Self {
        Self {
            modalities: 3,
            classes: 10,
            train: 5000,
            test: 1000,
            side: 8,
            styles: Vec::new(),
            noise: 0.35,
            seed: 0,
        }
    }
}

impl SyntheticSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities == 0 || self.modalities > crate::fusion::MAX_MODALITIES {
            return Err(Error::ConfigInvalid(format!(
                "modalities must be in 1..=10, got {}",
                self.modalities
            )));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::ConfigInvalid("classes must be in 2..=65535".into()));
        }
        if self.side < 4 {
            return Err(Error::ConfigInvalid("side must be at least 4".into()));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::ConfigInvalid("train and test sizes must be positive".into()));
        }
        if !self.styles.is_empty() && self.styles.len() != self.modalities {
            return Err(Error::ConfigInvalid(format!(
                "{} styles given for {} modalities",
                self.styles.len(),
                self.modalities
            )));
        }
        for s in self.resolved_styles() {
            if s.pattern >= NUM_PATTERNS || !(s.noise >= 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "invalid modality style {s:?}"
                )));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::ConfigInvalid("noise must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn resolved_styles(&self) -> Vec<ModalityStyle> {
        if self.styles.is_empty() {
            (0..self.modalities)
                .map(|j| ModalityStyle {
                    pattern: j as u32 % NUM_PATTERNS,
                    noise: self.noise,
                })
                .collect()
        } else {
            self.styles.clone()
        }
    }

    pub fn dims(&self) -> usize {
        self.side * self.side
    }
}

/// One glyph per class, drawn as two random-walk strokes and kept at
/// Hamming distance of at least `side` from every earlier glyph.
pub fn glyphs(classes: usize, side: usize) -> Vec<Vec<bool>> {
    let mut out: Vec<Vec<bool>> = Vec::with_capacity(classes);
    let mut rng = substream(GLYPH_SEED, side as u64);
    while out.len() < classes {
        let mut g = vec![false; side * side];
        for _ in 0..2 {
            let (mut r, mut c) = (rng.random_range(1..side - 1), rng.random_range(1..side - 1));
            for _ in 0..side + 2 {
                g[r * side + c] = true;
                match rng.random_range(0..4) {
                    0 if r > 1 => r -= 1,
                    1 if r < side - 2 => r += 1,
                    2 if c > 1 => c -= 1,
                    3 if c < side - 2 => c += 1,
                    _ => {}
                }
            }
        }
        let distinct = out
            .iter()
            .all(|h| h.iter().zip(&g).filter(|(a, b)| a != b).count() >= side);
        if distinct {
            out.push(g);
        }
    }
    out
}

fn pattern_period(pattern: u32) -> usize {
    match pattern {
        0 | 1 => 3,
        2 => 2,
        _ => 4,
    }
}

fn background(pattern: u32, r: usize, c: usize, phase: usize, side: usize) -> bool {
    match pattern {
        0 => (r + phase).is_multiple_of(3),
        1 => (c + phase).is_multiple_of(3),
        2 => (r + c + phase).is_multiple_of(2),
        3 => (r + c + phase).is_multiple_of(4),
        4 => (r + side - c + phase).is_multiple_of(4),
        _ => r.is_multiple_of(2) && (c + phase) % 4 < 2,
    }
}

fn render_split(cfg: &SyntheticSetConfig, count: usize, stream: u64) -> Result<Dataset> {
    let side = cfg.side;
    let dims = cfg.dims();
    let glyphs = glyphs(cfg.classes, side);
    let styles = cfg.resolved_styles();
    let mut rng = substream(cfg.seed, stream);
    let mut labels = Vec::with_capacity(count);
    let mut data: Vec<Vec<f64>> = vec![Vec::with_capacity(count * dims); cfg.modalities];
    for _ in 0..count {
        let label = rng.random_range(0..cfg.classes);
        labels.push(label);
        for (j, style) in styles.iter().enumerate() {
            let noisy = style.noise > 0.0;
            let phase = if noisy {
                rng.random_range(0..pattern_period(style.pattern))
            } else {
                0
            };
            let normal = Normal::new(0.0, style.noise.max(f64::MIN_POSITIVE))
                .map_err(|e| Error::ConfigInvalid(e.to_string()))?;
            for p in 0..dims {
                let (r, c) = (p / side, p % side);
                let mut v = if glyphs[label][p] {
                    1.0
                } else if background(style.pattern, r, c, phase, side) {
                    BACKGROUND_LEVEL
                } else {
                    0.0
                };
                if noisy {
                    v += normal.sample(&mut rng);
                }
                data[j].push(if v >= 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
    let modalities = data
        .into_iter()
        .map(|d| Tensor::matrix(count, dims, d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Dataset::new(modalities, labels, cfg.classes)
}

/// Train and test splits drawn from independent streams.
pub fn generate_dataset(cfg: &SyntheticSetConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    Ok((render_split(cfg, cfg.train, 0)?, render_split(cfg, cfg.test, 1)?))
}
