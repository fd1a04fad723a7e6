//! Dynamic token pruning.
//!
//! After each non-final stage the stage's auxiliary head grades every real
//! token. Tokens whose confidence reaches `p0` are easy and exit with their
//! current label, except the `k` most confident easy tokens of each
//! predicted class, which stay active as context. The final head labels
//! whatever survives, and [`merge`] assembles the dense token label map.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::OccupancySchedule;
use crate::error::{Error, Result};
use crate::heads::{head_forward, head_loss, AuxPrediction};
use crate::tensor::{Real, Tensor, Var};
use crate::vit::{embed, run_all_layers, run_stage, Model, Session, TokenState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// Exit easy tokens, keeping the top-`k` per predicted class.
    #[default]
    Topk,
    /// Exit every easy token.
    Remove,
    /// Exit every easy token and append one mean-feature token per exited class.
    Average,
    /// Exit the `⌈fraction·n⌉` most confident tokens regardless of `p0`.
    FixedFraction,
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(PruneMethod::Topk),
            "remove" => Ok(PruneMethod::Remove),
            "average" => Ok(PruneMethod::Average),
            "fixed_fraction" => Ok(PruneMethod::FixedFraction),
            other => Err(Error::Config(format!("unknown pruning method {other:?}"))),
        }
    }
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneMethod::Topk => "topk",
            PruneMethod::Remove => "remove",
            PruneMethod::Average => "average",
            PruneMethod::FixedFraction => "fixed_fraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_p0")]
    pub p0: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub method: PruneMethod,
    /// Exit fraction for [`PruneMethod::FixedFraction`].
    #[serde(default = "default_fraction")]
    pub fraction: f64,
}

fn yes() -> bool {
    true
}

fn default_p0() -> f64 {
    0.95
}

fn default_k() -> usize {
    5
}

fn default_fraction() -> f64 {
    0.35
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: true,
            p0: default_p0(),
            k: default_k(),
            method: PruneMethod::Topk,
            fraction: default_fraction(),
        }
    }
}

impl PruneConfig {
    pub fn disabled() -> Self {
        PruneConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn with_p0(p0: f64) -> Self {
        PruneConfig {
            p0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0 <= 1.0) {
            return Err(Error::Config(format!("p0 {} outside (0, 1]", self.p0)));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!(
                "fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        Ok(())
    }

    /// `p0 = 1` means no pruning, except for the fixed-fraction method
    /// which ignores `p0`.
    pub fn is_active(&self) -> bool {
        self.enabled && (self.method == PruneMethod::FixedFraction || self.p0 < 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub origin_index: usize,
    pub stage: usize,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: usize,
    /// Real tokens entering the pruning step.
    pub active_before: usize,
    pub exited: usize,
    pub retained_context: usize,
    pub hard: usize,
    pub active_after: usize,
    /// Synthetic context tokens appended (average method only).
    pub synthetic_added: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grading {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
}

/// Splits the real rows of `pred` into easy (`confidence ≥ p0`) and hard.
/// `p0 = 1` yields no easy rows.
pub fn grade<T: Real>(pred: &AuxPrediction<T>, p0: f64) -> Grading {
    let mut g = Grading {
        easy: Vec::new(),
        hard: Vec::new(),
    };
    let disabled = p0 >= 1.0;
    for (i, c) in pred.confidence[..pred.real].iter().enumerate() {
        if !disabled && c.f() >= p0 {
            g.easy.push(i);
        } else {
            g.hard.push(i);
        }
    }
    g
}

/// Most-confident-first, ties toward lower grid position.
fn by_confidence<'a, T: Real>(
    pred: &'a AuxPrediction<T>,
    origin: &'a [usize],
) -> impl Fn(&usize, &usize) -> Ordering + 'a {
    move |&a, &b| {
        pred.confidence[b]
            .partial_cmp(&pred.confidence[a])
            .unwrap_or(Ordering::Equal)
            .then(origin[a].cmp(&origin[b]))
    }
}

/// Among the easy rows, keeps the `k` most confident of every predicted
/// class that occurs. Returned rows are sorted ascending.
pub fn retain_context<T: Real>(
    easy: &[usize],
    pred: &AuxPrediction<T>,
    origin: &[usize],
    k: usize,
) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &row in easy {
        per_class.entry(pred.argmax[row]).or_default().push(row);
    }
    let cmp = by_confidence(pred, origin);
    let mut kept = Vec::new();
    for rows in per_class.values_mut() {
        rows.sort_by(&cmp);
        kept.extend(rows.iter().take(k));
    }
    kept.sort_unstable();
    kept
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub tokens: TokenState,
    pub exits: Vec<ExitRecord>,
    pub stats: StageStats,
}

/// Exit rows selected by the configured method, sorted ascending, plus
/// the retained context rows.
fn select_exits<T: Real>(
    pred: &AuxPrediction<T>,
    origin: &[usize],
    cfg: &PruneConfig,
) -> (Vec<usize>, Vec<usize>) {
    match cfg.method {
        PruneMethod::FixedFraction => {
            let n = pred.real;
            let count = ((cfg.fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
            let mut rows: Vec<usize> = (0..n).collect();
            rows.sort_by(by_confidence(pred, origin));
            let mut exit: Vec<usize> = rows.into_iter().take(count.min(n)).collect();
            exit.sort_unstable();
            (exit, Vec::new())
        }
        PruneMethod::Topk => {
            let g = grade(pred, cfg.p0);
            let retained = retain_context(&g.easy, pred, origin, cfg.k);
            let exit = g
                .easy
                .iter()
                .copied()
                .filter(|r| retained.binary_search(r).is_err())
                .collect();
            (exit, retained)
        }
        PruneMethod::Remove | PruneMethod::Average => (grade(pred, cfg.p0).easy, Vec::new()),
    }
}

/// Applies one pruning step at stage `stage`.
pub fn prune_step<T: Real>(
    s: &mut Session<T>,
    tokens: TokenState,
    pred: &AuxPrediction<T>,
    cfg: &PruneConfig,
    stage: usize,
) -> Result<PruneOutcome> {
    let n = tokens.real();
    if pred.real != n || pred.confidence.len() != tokens.rows() {
        return Err(Error::Internal(format!(
            "prediction covers {} rows ({} real), tokens have {} ({} real)",
            pred.confidence.len(),
            pred.real,
            tokens.rows(),
            n
        )));
    }
    if !cfg.is_active() {
        let stats = StageStats {
            stage,
            active_before: n,
            exited: 0,
            retained_context: 0,
            hard: n,
            active_after: n,
            synthetic_added: 0,
        };
        return Ok(PruneOutcome {
            tokens,
            exits: Vec::new(),
            stats,
        });
    }

    let (exit, retained) = select_exits(pred, &tokens.origin, cfg);
    let exits: Vec<ExitRecord> = exit
        .iter()
        .map(|&r| ExitRecord {
            origin_index: tokens.origin[r],
            stage,
            label: pred.argmax[r],
            confidence: pred.confidence[r].f(),
        })
        .collect();

    let mut is_exit = vec![false; n];
    exit.iter().for_each(|&r| is_exit[r] = true);
    let keep: Vec<usize> = (0..tokens.rows()).filter(|&r| r >= n || !is_exit[r]).collect();
    let origin: Vec<usize> = keep.iter().filter(|&&r| r < n).map(|&r| tokens.origin[r]).collect();

    let mut synthetic_rows = Vec::new();
    if cfg.method == PruneMethod::Average {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &r in &exit {
            by_class.entry(pred.argmax[r]).or_default().push(r);
        }
        for rows in by_class.values() {
            synthetic_rows.push(s.tape.mean_rows(tokens.features, rows)?);
        }
    }

    let stats = StageStats {
        stage,
        active_before: n,
        exited: exit.len(),
        retained_context: retained.len(),
        hard: n - exit.len() - retained.len(),
        active_after: origin.len(),
        synthetic_added: synthetic_rows.len(),
    };

    let features = if exit.is_empty() {
        tokens.features
    } else if keep.is_empty() && synthetic_rows.is_empty() {
        let c = s.tape.shape(tokens.features)[1];
        s.tape.constant(Tensor::zeros(&[0, c]))
    } else {
        let mut parts = Vec::with_capacity(1 + synthetic_rows.len());
        if !keep.is_empty() {
            parts.push(s.tape.gather_rows(tokens.features, &keep)?);
        }
        parts.extend(synthetic_rows.iter().copied());
        if parts.len() == 1 {
            parts[0]
        } else {
            s.tape.concat_rows(&parts)?
        }
    };
    let tokens = TokenState {
        features,
        origin,
        synthetic: tokens.synthetic + synthetic_rows.len(),
        grid: tokens.grid,
    };
    Ok(PruneOutcome {
        tokens,
        exits,
        stats,
    })
}

/// Dense token label map from exit records plus the final-stage argmax of
/// the surviving real tokens. Every grid position must be covered once.
pub fn merge<T: Real>(
    exits: &[ExitRecord],
    final_pred: Option<&AuxPrediction<T>>,
    final_tokens: &TokenState,
    n: usize,
) -> Result<Vec<usize>> {
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut assign = |pos: usize, label: usize| -> Result<()> {
        let slot = labels.get_mut(pos).ok_or_else(|| {
            Error::Merge(format!("grid position {pos} outside [0, {n})"))
        })?;
        if slot.replace(label).is_some() {
            return Err(Error::Merge(format!("grid position {pos} assigned twice")));
        }
        Ok(())
    };
    for e in exits {
        assign(e.origin_index, e.label)?;
    }
    if final_tokens.real() > 0 {
        let pred = final_pred.ok_or_else(|| {
            Error::Merge(format!(
                "{} surviving tokens without a final prediction",
                final_tokens.real()
            ))
        })?;
        if pred.real != final_tokens.real() {
            return Err(Error::Merge("final prediction misaligned with tokens".into()));
        }
        for (row, &pos) in final_tokens.origin.iter().enumerate() {
            assign(pos, pred.argmax[row])?;
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(pos, l)| l.ok_or_else(|| Error::Merge(format!("grid position {pos} never labelled"))))
        .collect()
}

/// Expands token labels to a pixel label map `[H×W]`, one `P×P` block per token.
pub fn upsample_labels(token_labels: &[usize], grid_w: usize, patch: usize) -> Vec<usize> {
    let grid_h = token_labels.len() / grid_w.max(1);
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut out = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = token_labels[(y / patch) * grid_w + x / patch];
        }
    }
    out
}

/// Result of one staged forward pass.
#[derive(Debug)]
pub struct StagedOutput<T> {
    pub token_labels: Vec<usize>,
    pub stats: Vec<StageStats>,
    pub exits: Vec<ExitRecord>,
    pub occupancy: OccupancySchedule,
    pub final_pred: Option<AuxPrediction<T>>,
    /// Weighted head losses, present when labels were supplied.
    pub loss: Option<Var>,
}

/// Supervision for a training pass: per-grid-position labels and the
/// loss weight of each auxiliary head (stage order). The decode head
/// has weight 1.
pub struct Supervision<'a> {
    pub labels: &'a [usize],
    pub aux_weights: &'a [f64],
}

/// Embeds the image and runs every stage, grading and pruning between
/// stages when `cfg` is active. With supervision, all heads run and their
/// losses over the then-active tokens are accumulated; without it, the
/// auxiliary heads run only when pruning is active.
pub fn staged_forward<T: Real>(
    s: &mut Session<T>,
    image: &Tensor<T>,
    cfg: &PruneConfig,
    supervision: Option<&Supervision<'_>>,
) -> Result<StagedOutput<T>> {
    cfg.validate()?;
    let model = s.model();
    let bcfg = &model.config.backbone;
    let stages = bcfg.stages();
    let n = bcfg.tokens();
    if let Some(sup) = supervision {
        if sup.labels.len() != n {
            return Err(Error::shape(
                "staged_forward",
                format!("{} labels for {n} tokens", sup.labels.len()),
            ));
        }
    }
    let active = cfg.is_active();

    let mut tokens = embed(s, image)?;
    let mut occupancy = OccupancySchedule::empty(bcfg.layers, stages);
    let mut exits = Vec::new();
    let mut stats = Vec::new();
    let mut final_pred = None;
    let mut losses: Vec<Var> = Vec::new();

    for m in 1..=stages {
        if tokens.real() == 0 {
            break;
        }
        let rows = tokens.rows();
        for l in bcfg.stage_layers(m)? {
            occupancy.layers[l] = rows;
        }
        tokens = run_stage(s, tokens, m)?;
        let is_final = m == stages;
        if !is_final && !active && supervision.is_none() {
            stats.push(StageStats {
                stage: m,
                active_before: tokens.real(),
                exited: 0,
                retained_context: 0,
                hard: tokens.real(),
                active_after: tokens.real(),
                synthetic_added: 0,
            });
            continue;
        }
        let pred = head_forward(s, &tokens, &model.heads[m - 1])?;
        occupancy.heads[m - 1] = rows;
        if let Some(sup) = supervision {
            let labels: Vec<usize> = tokens.origin.iter().map(|&o| sup.labels[o]).collect();
            let loss = head_loss(s, &pred, &labels)?;
            let weight = if is_final {
                1.0
            } else {
                sup.aux_weights.get(m - 1).copied().unwrap_or(1.0)
            };
            losses.push(if weight == 1.0 {
                loss
            } else {
                s.tape.scale(loss, weight)?
            });
        }
        if is_final {
            final_pred = Some(pred);
        } else {
            let out = prune_step(s, tokens, &pred, cfg, m)?;
            tokens = out.tokens;
            exits.extend(out.exits);
            stats.push(out.stats);
        }
    }

    let token_labels = merge(&exits, final_pred.as_ref(), &tokens, n)?;
    let loss = match losses.split_first() {
        None => None,
        Some((&first, rest)) => {
            let mut acc = first;
            for &l in rest {
                acc = s.tape.add(acc, l)?;
            }
            Some(acc)
        }
    };
    Ok(StagedOutput {
        token_labels,
        stats,
        exits,
        occupancy,
        final_pred,
        loss,
    })
}

/// Inference result of [`dtop_forward`].
#[derive(Debug, Clone)]
pub struct DtopOutput {
    pub token_labels: Vec<usize>,
    pub stats: Vec<StageStats>,
    pub exits: Vec<ExitRecord>,
    pub occupancy: OccupancySchedule,
    /// Multiply-accumulates counted inside matmul during the pass.
    pub instrumented_macs: u64,
}

impl DtopOutput {
    pub fn pixel_labels<T: Real>(&self, model: &Model<T>) -> Vec<usize> {
        let b = &model.config.backbone;
        upsample_labels(&self.token_labels, b.grid_w(), b.patch)
    }
}

pub fn dtop_forward<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    cfg: &PruneConfig,
) -> Result<DtopOutput> {
    let mut s = Session::inference(model);
    let out = staged_forward(&mut s, image, cfg, None)?;
    Ok(DtopOutput {
        token_labels: out.token_labels,
        stats: out.stats,
        exits: out.exits,
        occupancy: out.occupancy,
        instrumented_macs: s.tape.macs(),
    })
}

/// Reference path: all layers without stages, then the decode head.
pub fn unstaged_forward<T: Real>(
    s: &mut Session<T>,
    image: &Tensor<T>,
) -> Result<AuxPrediction<T>> {
    let model = s.model();
    let tokens = embed(s, image)?;
    let tokens = run_all_layers(s, tokens)?;
    let last = model.heads.last().ok_or(Error::Config("model has no heads".into()))?;
    head_forward(s, &tokens, last)
}
