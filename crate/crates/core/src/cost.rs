//! Closed-form multiply-accumulate accounting.
//!
//! One fused multiply-add counts as one FLOP. Only matrix products are
//! counted; layer norm, softmax, GELU, bias and residual additions are left
//! out (well under 1% of a layer at realistic widths).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::vit::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostConfig {
    pub tokens: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub patch: usize,
    pub channels: usize,
    pub classes: usize,
    pub stage_boundaries: Vec<usize>,
    /// Head kind per stage; the last entry is the decode head.
    pub head_kinds: Vec<HeadKind>,
}

impl From<&ModelConfig> for CostConfig {
    fn from(m: &ModelConfig) -> Self {
        let b = &m.backbone;
        CostConfig {
            tokens: b.tokens(),
            dim: b.dim,
            layers: b.layers,
            heads: b.heads,
            ffn_ratio: b.ffn_ratio,
            patch: b.patch,
            channels: b.channels,
            classes: m.classes,
            stage_boundaries: b.stage_boundaries.clone(),
            head_kinds: (1..=b.stages()).map(|s| m.head_kind(s)).collect(),
        }
    }
}

impl CostConfig {
    pub fn stages(&self) -> usize {
        self.stage_boundaries.len() + 1
    }
}

/// Active rows per layer, and the input rows of each stage head
/// (0 when the head did not run).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancySchedule {
    pub layers: Vec<usize>,
    pub heads: Vec<usize>,
}

impl OccupancySchedule {
    pub fn empty(layers: usize, stages: usize) -> Self {
        OccupancySchedule {
            layers: vec![0; layers],
            heads: vec![0; stages],
        }
    }

    /// Every layer sees all tokens. Only the decode head runs unless
    /// `with_aux` is set.
    pub fn full(cfg: &CostConfig, with_aux: bool) -> Self {
        let stages = cfg.stages();
        let heads = (0..stages)
            .map(|m| if with_aux || m + 1 == stages { cfg.tokens } else { 0 })
            .collect();
        OccupancySchedule {
            layers: vec![cfg.tokens; cfg.layers],
            heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub patch_embed: u64,
    pub per_layer: Vec<u64>,
    pub per_head: Vec<u64>,
    pub total: u64,
}

/// MACs of one transformer layer over `n` tokens:
/// `4nC²` for the Q/K/V/output projections, `2n²C` for scores and the
/// weighted sum of values, `2·r·nC²` for the FFN. Independent of the head
/// count. Zero tokens cost nothing.
pub fn layer_macs(n: usize, c: usize, ffn_ratio: usize) -> u64 {
    let (n, c, r) = (n as u64, c as u64, ffn_ratio as u64);
    4 * n * c * c + 2 * n * n * c + 2 * r * n * c * c
}

/// MACs of a stage head over `n` tokens with `k` classes.
///
/// FCN: `nCK`. ATM-lite: `2(K+n)C²` projections, `2KnC` cross-attention,
/// `K²C` classifier.
pub fn head_macs(kind: HeadKind, n: usize, c: usize, k: usize) -> u64 {
    if n == 0 {
        return 0;
    }
    let (n, c, k) = (n as u64, c as u64, k as u64);
    match kind {
        HeadKind::Fcn => n * c * k,
        HeadKind::Atm => 2 * (k + n) * c * c + 2 * k * n * c + k * k * c,
    }
}

pub fn patch_embed_macs(cfg: &CostConfig) -> u64 {
    (cfg.tokens * cfg.dim * cfg.channels * cfg.patch * cfg.patch) as u64
}

pub fn model_macs(cfg: &CostConfig, occ: &OccupancySchedule) -> Result<CostReport> {
    if occ.layers.len() != cfg.layers {
        return Err(Error::Config(format!(
            "occupancy covers {} layers, model has {}",
            occ.layers.len(),
            cfg.layers
        )));
    }
    if occ.heads.len() != cfg.stages() || cfg.head_kinds.len() != cfg.stages() {
        return Err(Error::Config(format!(
            "occupancy lists {} heads, model has {} stages",
            occ.heads.len(),
            cfg.stages()
        )));
    }
    let patch_embed = patch_embed_macs(cfg);
    let per_layer: Vec<u64> = occ
        .layers
        .iter()
        .map(|&n| layer_macs(n, cfg.dim, cfg.ffn_ratio))
        .collect();
    let per_head: Vec<u64> = occ
        .heads
        .iter()
        .zip(&cfg.head_kinds)
        .map(|(&n, &kind)| head_macs(kind, n, cfg.dim, cfg.classes))
        .collect();
    let total = patch_embed + per_layer.iter().sum::<u64>() + per_head.iter().sum::<u64>();
    Ok(CostReport {
        patch_embed,
        per_layer,
        per_head,
        total,
    })
}

pub fn dataset_average(reports: &[CostReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("dataset_average"));
    }
    let sum: u128 = reports.iter().map(|r| r.total as u128).sum();
    Ok(sum as f64 / reports.len() as f64)
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Key/value summary followed by a per-layer table.
    pub fn to_text(&self, occ: &OccupancySchedule) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "total_macs = {}", self.total);
        let _ = writeln!(out, "total_gflops = {:.4}", self.gflops());
        let _ = writeln!(out, "patch_embed_macs = {}", self.patch_embed);
        let _ = writeln!(out, "layers_macs = {}", self.per_layer.iter().sum::<u64>());
        let _ = writeln!(out, "heads_macs = {}", self.per_head.iter().sum::<u64>());
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>6} {:>8} {:>16}", "layer", "tokens", "macs");
        for (l, (&m, &n)) in self.per_layer.iter().zip(&occ.layers).enumerate() {
            let _ = writeln!(out, "{:>6} {:>8} {:>16}", l + 1, n, m);
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>6} {:>8} {:>16}", "head", "tokens", "macs");
        for (h, (&m, &n)) in self.per_head.iter().zip(&occ.heads).enumerate() {
            let _ = writeln!(out, "{:>6} {:>8} {:>16}", h + 1, n, m);
        }
        out
    }

    pub fn to_csv(&self, occ: &OccupancySchedule) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Parse {
            context: "cost csv".into(),
            detail: e.to_string(),
        };
        w.write_record(["component", "index", "tokens", "macs"]).map_err(csv_err)?;
        w.write_record(["patch_embed", "0", &occ.layers.first().copied().unwrap_or(0).to_string(), &self.patch_embed.to_string()])
            .map_err(csv_err)?;
        for (l, (&m, &n)) in self.per_layer.iter().zip(&occ.layers).enumerate() {
            w.write_record(["layer", &(l + 1).to_string(), &n.to_string(), &m.to_string()])
                .map_err(csv_err)?;
        }
        for (h, (&m, &n)) in self.per_head.iter().zip(&occ.heads).enumerate() {
            w.write_record(["head", &(h + 1).to_string(), &n.to_string(), &m.to_string()])
                .map_err(csv_err)?;
        }
        w.write_record(["total", "", "", &self.total.to_string()]).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}
