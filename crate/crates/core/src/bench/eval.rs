//! Dataset evaluation: segmentation quality, cost and exit statistics.

use serde::{Deserialize, Serialize};

use crate::bench::data::Dataset;
use crate::bench::metrics::ConfusionMatrix;
use crate::cost::{model_macs, CostConfig, OccupancySchedule};
use crate::engine::{dtop_forward, DtopOutput, PruneConfig, StageStats};
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::vit::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Scene index the image was generated from.
    pub index: u64,
    pub stats: Vec<StageStats>,
    pub occupancy: OccupancySchedule,
    pub macs: u64,
    pub instrumented_macs: u64,
    /// Tokens finalized at each stage; the last entry counts the tokens
    /// labelled by the decode head.
    pub exits_per_stage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prune: PruneConfig,
    pub images: usize,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Dataset-average analytic MACs.
    pub avg_macs: f64,
    /// Dataset-average MACs counted by the tape.
    pub avg_instrumented_macs: f64,
    /// Tokens finalized per stage, summed over images.
    pub exit_histogram: Vec<u64>,
    pub per_image: Vec<ImageRecord>,
    pub confusion: ConfusionMatrix,
}

/// Runs [`dtop_forward`] on every image. `visit` sees each image's output
/// in dataset order.
pub fn evaluate_with<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    prune: &PruneConfig,
    mut visit: impl FnMut(usize, &DtopOutput) -> Result<()>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let cost_cfg = CostConfig::from(&model.config);
    let stages = cost_cfg.stages();
    let mut confusion = ConfusionMatrix::new(model.config.classes);
    let mut per_image = Vec::with_capacity(data.len());
    let mut exit_histogram = vec![0u64; stages];
    let (mut macs_sum, mut inst_sum) = (0u128, 0u128);

    for i in 0..data.len() {
        let out = dtop_forward(model, &data.images[i], prune)?;
        let pixels = out.pixel_labels(model);
        confusion.add(&data.pixel_labels[i], &pixels)?;
        let macs = model_macs(&cost_cfg, &out.occupancy)?.total;
        let mut exits_per_stage = vec![0usize; stages];
        for e in &out.exits {
            exits_per_stage[e.stage - 1] += 1;
        }
        let early: usize = exits_per_stage.iter().sum();
        exits_per_stage[stages - 1] = cost_cfg.tokens - early;
        for (h, &c) in exit_histogram.iter_mut().zip(&exits_per_stage) {
            *h += c as u64;
        }
        macs_sum += macs as u128;
        inst_sum += out.instrumented_macs as u128;
        visit(i, &out)?;
        per_image.push(ImageRecord {
            index: data.indices[i],
            stats: out.stats,
            occupancy: out.occupancy,
            macs,
            instrumented_macs: out.instrumented_macs,
            exits_per_stage,
        });
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        prune: prune.clone(),
        images: data.len(),
        miou: confusion.miou()?,
        pixel_accuracy: confusion.pixel_accuracy()?,
        class_iou: confusion.iou(),
        avg_macs: macs_sum as f64 / n,
        avg_instrumented_macs: inst_sum as f64 / n,
        exit_histogram,
        per_image,
        confusion,
    })
}

pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    prune: &PruneConfig,
) -> Result<EvalReport> {
    evaluate_with(model, data, prune, |_, _| Ok(()))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "eval report".into(),
            detail: e.to_string(),
        })
    }

    /// One row per image: cost, then tokens finalized per stage, then
    /// active tokens per layer.
    pub fn to_csv(&self) -> Result<String> {
        let csv_err = |e: csv::Error| Error::Parse {
            context: "eval csv".into(),
            detail: e.to_string(),
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        let (stages, layers) = self
            .per_image
            .first()
            .map(|r| (r.exits_per_stage.len(), r.occupancy.layers.len()))
            .unwrap_or((0, 0));
        let mut header = vec!["index".to_string(), "macs".into(), "instrumented_macs".into()];
        header.extend((1..=stages).map(|m| format!("exits_stage{m}")));
        header.extend((1..=layers).map(|l| format!("tokens_layer{l}")));
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.per_image {
            let mut row = vec![
                r.index.to_string(),
                r.macs.to_string(),
                r.instrumented_macs.to_string(),
            ];
            row.extend(r.exits_per_stage.iter().map(|c| c.to_string()));
            row.extend(r.occupancy.layers.iter().map(|c| c.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        format!(
            "images={} miou={:.4} pixel_acc={:.4} avg_gmacs={:.6} exits={:?}",
            self.images,
            self.miou,
            self.pixel_accuracy,
            self.avg_macs / 1e9,
            self.exit_histogram
        )
    }
}
