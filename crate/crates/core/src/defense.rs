//! Input-transformation defenses applied to camera frames at the model
//! input, after any attack has composed its perturbation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::sensor::{gaussian, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DefenseKind {
    None,
    GaussianNoise { sigma: f64 },
    BitDepth { bits: u8 },
    Median { k: usize },
}

impl DefenseKind {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(DefenseKind::None);
        }
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| SimError::Config(format!("defense `{s}` needs a parameter, e.g. bit_depth:3")))?;
        match name.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian_noise" => {
                let sigma: f64 = arg
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad gaussian sigma `{arg}`")))?;
                if sigma < 0.0 {
                    return Err(SimError::Config("gaussian sigma must be >= 0".into()));
                }
                Ok(DefenseKind::GaussianNoise { sigma })
            }
            "bit_depth" | "bitdepth" => {
                let bits: u8 = arg
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad bit depth `{arg}`")))?;
                if !(1..=8).contains(&bits) {
                    return Err(SimError::Config("bit depth must be in [1, 8]".into()));
                }
                Ok(DefenseKind::BitDepth { bits })
            }
            "median" => {
                let k: usize = arg
                    .parse()
                    .map_err(|_| SimError::Config(format!("bad median size `{arg}`")))?;
                if k < 3 || k % 2 == 0 {
                    return Err(SimError::Config("median size must be odd and >= 3".into()));
                }
                Ok(DefenseKind::Median { k })
            }
            other => Err(SimError::Config(format!("unknown defense `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            DefenseKind::None => "none".into(),
            DefenseKind::GaussianNoise { sigma } => format!("gaussian:{sigma}"),
            DefenseKind::BitDepth { bits } => format!("bit_depth:{bits}"),
            DefenseKind::Median { k } => format!("median:{k}"),
        }
    }
}

/// Applies the transform in place. Deterministic given the RNG state.
pub fn apply_defense(kind: &DefenseKind, frame: &mut Frame, rng: &mut ChaCha8Rng) {
    match kind {
        DefenseKind::None => {}
        DefenseKind::GaussianNoise { sigma } => {
            if *sigma > 0.0 {
                for v in frame.px.iter_mut() {
                    *v = (*v + sigma * gaussian(rng)).clamp(0.0, 1.0);
                }
            }
        }
        DefenseKind::BitDepth { bits } => {
            let levels = ((1u32 << bits) - 1) as f64;
            for v in frame.px.iter_mut() {
                *v = (*v * levels).round() / levels;
            }
        }
        DefenseKind::Median { k } => {
            let half = k / 2;
            let (h, w) = (frame.h, frame.w);
            let src = frame.px.clone();
            let mut window = Vec::with_capacity(k * k);
            for r in 0..h {
                for c in 0..w {
                    window.clear();
                    for dr in 0..*k {
                        // Edge-replicate padding.
                        let rr = (r + dr).saturating_sub(half).min(h - 1);
                        for dc in 0..*k {
                            let cc = (c + dc).saturating_sub(half).min(w - 1);
                            window.push(src[rr * w + cc]);
                        }
                    }
                    window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    frame.px[r * w + c] = window[window.len() / 2];
                }
            }
        }
    }
}
