//! Synthetic segmentation scenes.
//!
//! A scene is a background class overpainted with rectangles, discs and
//! one-cell-thick stripes. Shapes are laid out on a grid of `cell` pixels
//! (the patch size by default), so token-level labels are exact. Pixel
//! colours are the class base colour, plus a per-image tint shared by all
//! pixels, plus independent uniform noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Stripe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub classes: usize,
    #[serde(default)]
    pub background: usize,
    /// Layout grid in pixels.
    pub cell: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Shape drawn for each non-background class, in class order.
    pub kinds: Vec<ShapeKind>,
    /// RGB base colour per class.
    pub palette: Vec<[f64; 3]>,
    /// Per-pixel noise amplitude range; each image draws one amplitude.
    pub noise_min: f64,
    pub noise_max: f64,
    /// Per-image, per-channel colour shift amplitude.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SynthSceneConfig {
    fn default() -> Self {
        SynthSceneConfig {
            image_h: 32,
            image_w: 32,
            classes: 4,
            background: 0,
            cell: 4,
            shapes_min: 2,
            shapes_max: 5,
            kinds: vec![ShapeKind::Rectangle, ShapeKind::Disc, ShapeKind::Stripe],
            palette: vec![
                [0.35, 0.45, 0.40],
                [0.75, 0.35, 0.30],
                [0.35, 0.70, 0.35],
                [0.60, 0.45, 0.65],
            ],
            noise_min: 0.1,
            noise_max: 0.5,
            tint: 0.3,
            seed: 7,
        }
    }
}

impl SynthSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.background >= self.classes {
            return bad("background class out of range");
        }
        if self.cell == 0 || self.image_h % self.cell != 0 || self.image_w % self.cell != 0 {
            return bad("image size must be a multiple of cell");
        }
        if self.kinds.len() != self.classes - 1 {
            return bad("one shape kind per non-background class");
        }
        if self.palette.len() != self.classes {
            return bad("one palette colour per class");
        }
        if !self.kinds.contains(&ShapeKind::Stripe) {
            return bad("at least one thin-structure (stripe) class is required");
        }
        if self.shapes_min > self.shapes_max {
            return bad("shapes_min exceeds shapes_max");
        }
        if self.noise_min < 0.0 || self.noise_max < self.noise_min || self.tint < 0.0 {
            return bad("noise range and tint must be non-negative and ordered");
        }
        Ok(())
    }

    /// Class id drawn for each shape kind slot.
    fn shape_classes(&self) -> Vec<usize> {
        (0..self.classes).filter(|&c| c != self.background).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T> {
    /// `[3 × H × W]`.
    pub image: Tensor<T>,
    /// Row-major `H × W` class ids.
    pub labels: Vec<usize>,
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_scene<T: Real>(cfg: &SynthSceneConfig, index: u64) -> Result<Scene<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (gh, gw) = (cfg.image_h / cfg.cell, cfg.image_w / cfg.cell);
    let mut grid = vec![cfg.background; gh * gw];
    let shape_classes = cfg.shape_classes();

    let count = rng.gen_range(cfg.shapes_min..=cfg.shapes_max);
    for _ in 0..count {
        let slot = rng.gen_range(0..shape_classes.len());
        let class = shape_classes[slot];
        match cfg.kinds[slot] {
            ShapeKind::Rectangle => {
                let w = rng.gen_range(2..=(gw / 2 + 1).max(2)).min(gw);
                let h = rng.gen_range(2..=(gh / 2 + 1).max(2)).min(gh);
                let x0 = rng.gen_range(0..=gw - w);
                let y0 = rng.gen_range(0..=gh - h);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        grid[y * gw + x] = class;
                    }
                }
            }
            ShapeKind::Disc => {
                let r: f64 = rng.gen_range(1.0..2.6);
                let cx: f64 = rng.gen_range(0.0..gw as f64);
                let cy: f64 = rng.gen_range(0.0..gh as f64);
                for y in 0..gh {
                    for x in 0..gw {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            grid[y * gw + x] = class;
                        }
                    }
                }
            }
            ShapeKind::Stripe => {
                let horizontal = rng.gen_bool(0.5);
                let (along, across) = if horizontal { (gw, gh) } else { (gh, gw) };
                let len = rng.gen_range(3.min(along)..=along);
                let start = rng.gen_range(0..=along - len);
                let line = rng.gen_range(0..across);
                for t in start..start + len {
                    let (x, y) = if horizontal { (t, line) } else { (line, t) };
                    grid[y * gw + x] = class;
                }
            }
        }
    }

    let amp = if cfg.noise_max > cfg.noise_min {
        rng.gen_range(cfg.noise_min..=cfg.noise_max)
    } else {
        cfg.noise_min
    };
    let tint: [f64; 3] = std::array::from_fn(|_| {
        if cfg.tint > 0.0 {
            rng.gen_range(-cfg.tint..=cfg.tint)
        } else {
            0.0
        }
    });

    let (h, w) = (cfg.image_h, cfg.image_w);
    let labels: Vec<usize> = (0..h * w)
        .map(|i| grid[(i / w / cfg.cell) * gw + (i % w) / cfg.cell])
        .collect();
    let mut data = vec![T::zero(); 3 * h * w];
    for ch in 0..3 {
        for (i, &l) in labels.iter().enumerate() {
            let noise = if amp > 0.0 { rng.gen_range(-amp..=amp) } else { 0.0 };
            data[ch * h * w + i] = T::c(cfg.palette[l][ch] + tint[ch] + noise);
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![3, h, w], data)?,
        labels,
    })
}

/// Majority label of each `patch × patch` block (lowest class on ties).
pub fn token_labels(labels: &[usize], h: usize, w: usize, patch: usize, classes: usize) -> Vec<usize> {
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(gh * gw);
    let mut counts = vec![0usize; classes];
    for gy in 0..gh {
        for gx in 0..gw {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in gy * patch..(gy + 1) * patch {
                for x in gx * patch..(gx + 1) * patch {
                    counts[labels[y * w + x]] += 1;
                }
            }
            let mut best = 0;
            for c in 1..classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Materialized split of generated scenes.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub indices: Vec<u64>,
    pub images: Vec<Tensor<T>>,
    pub pixel_labels: Vec<Vec<usize>>,
    pub token_labels: Vec<Vec<usize>>,
}

/// Evaluation scenes come from a stream range disjoint from training.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 32;

impl<T: Real> Dataset<T> {
    pub fn generate(cfg: &SynthSceneConfig, indices: impl IntoIterator<Item = u64>, patch: usize) -> Result<Self> {
        let mut ds = Dataset {
            indices: Vec::new(),
            images: Vec::new(),
            pixel_labels: Vec::new(),
            token_labels: Vec::new(),
        };
        for idx in indices {
            let scene = generate_scene::<T>(cfg, idx)?;
            ds.token_labels.push(token_labels(
                &scene.labels,
                cfg.image_h,
                cfg.image_w,
                patch,
                cfg.classes,
            ));
            ds.indices.push(idx);
            ds.images.push(scene.image);
            ds.pixel_labels.push(scene.labels);
        }
        Ok(ds)
    }

    pub fn train_split(cfg: &SynthSceneConfig, count: usize, patch: usize) -> Result<Self> {
        Self::generate(cfg, 0..count as u64, patch)
    }

    pub fn eval_split(cfg: &SynthSceneConfig, count: usize, patch: usize) -> Result<Self> {
        Self::generate(cfg, (0..count as u64).map(|i| i + EVAL_INDEX_OFFSET), patch)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
