//! Portable pixel-map export of predictions and exit masks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::ExitRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PnmEncoding {
    /// P3 / P2 text.
    Plain,
    /// P6 / P5 bytes.
    #[default]
    Binary,
}

impl std::str::FromStr for PnmEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(PnmEncoding::Plain),
            "binary" => Ok(PnmEncoding::Binary),
            other => Err(Error::Config(format!("unknown pixel-map encoding `{other}`"))),
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

pub fn class_color(class: usize) -> [u8; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let h = (class as u32).wrapping_mul(2_654_435_761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

/// Encodes an RGB image (`rgb.len() == 3·w·h`).
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8], enc: PnmEncoding) -> Vec<u8> {
    encode(w, h, rgb, 3, enc)
}

/// Encodes a grey image (`grey.len() == w·h`).
pub fn encode_pgm(w: usize, h: usize, grey: &[u8], enc: PnmEncoding) -> Vec<u8> {
    encode(w, h, grey, 1, enc)
}

fn encode(w: usize, h: usize, px: &[u8], channels: usize, enc: PnmEncoding) -> Vec<u8> {
    debug_assert_eq!(px.len(), w * h * channels);
    let magic = match (channels, enc) {
        (3, PnmEncoding::Plain) => "P3",
        (3, PnmEncoding::Binary) => "P6",
        (_, PnmEncoding::Plain) => "P2",
        (_, PnmEncoding::Binary) => "P5",
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    match enc {
        PnmEncoding::Binary => out.extend_from_slice(px),
        PnmEncoding::Plain => {
            let mut text = String::new();
            for row in px.chunks(w * channels) {
                let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(text, "{}", line.join(" "));
            }
            out.extend_from_slice(text.as_bytes());
        }
    }
    out
}

pub fn label_map_rgb(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| class_color(l)).collect()
}

/// Pixel mask for stage `m`: 255 where the token exited at or before
/// stage `m`, 0 where it was still active.
pub fn exit_mask(exits: &[ExitRecord], stage: usize, grid_w: usize, grid_h: usize, patch: usize) -> Vec<u8> {
    let w = grid_w * patch;
    let mut mask = vec![0u8; w * grid_h * patch];
    for e in exits.iter().filter(|e| e.stage <= stage) {
        let (gy, gx) = (e.origin_index / grid_w, e.origin_index % grid_w);
        for y in gy * patch..(gy + 1) * patch {
            mask[y * w + gx * patch..y * w + (gx + 1) * patch].fill(255);
        }
    }
    mask
}

/// Geometry needed to lay out token masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub grid_w: usize,
    pub grid_h: usize,
    pub patch: usize,
    /// Stages that can exit tokens (all but the last).
    pub exit_stages: usize,
}

/// Writes `<stem>_pred.ppm` and one `<stem>_exit_s<m>.pgm` per exit stage.
pub fn export_visuals(
    dir: &Path,
    stem: &str,
    pixel_labels: &[usize],
    exits: &[ExitRecord],
    layout: Layout,
    enc: PnmEncoding,
) -> Result<Vec<PathBuf>> {
    let (w, h) = (layout.grid_w * layout.patch, layout.grid_h * layout.patch);
    if pixel_labels.len() != w * h {
        return Err(Error::shape(
            "export_visuals",
            format!("{} labels for a {w}x{h} image", pixel_labels.len()),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let pred = dir.join(format!("{stem}_pred.ppm"));
    write(&pred, &encode_ppm(w, h, &label_map_rgb(pixel_labels), enc))?;
    written.push(pred);
    for m in 1..=layout.exit_stages {
        let mask = exit_mask(exits, m, layout.grid_w, layout.grid_h, layout.patch);
        let path = dir.join(format!("{stem}_exit_s{m}.pgm"));
        write(&path, &encode_pgm(w, h, &mask, enc))?;
        written.push(path);
    }
    Ok(written)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
