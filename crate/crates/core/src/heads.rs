//! Per-stage segmentation heads producing per-token class distributions.
//!
//! Two kinds: a linear FCN head, and ATM-lite, a single cross-attention
//! block in which learnable class tokens query the encoder tokens. ATM-lite
//! combines a sigmoid class score per class token with a mask formed by
//! softmaxing the query/key similarities over classes, then renormalizes
//! per token so both heads yield comparable confidences.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Real, Tensor, Var};
use crate::vit::{add_linear, Init, Linear, ParamId, ParamSet, Session, TokenState};

/// Label value excluded from losses.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Fcn,
    #[default]
    Atm,
}

#[derive(Debug, Clone)]
pub struct FcnHeadWeights {
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct AtmLiteHeadWeights {
    pub class_tokens: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub classifier: Linear,
    pub temperature: ParamId,
}

#[derive(Debug, Clone)]
pub enum HeadWeights {
    Fcn(FcnHeadWeights),
    Atm(AtmLiteHeadWeights),
}

impl HeadWeights {
    pub(crate) fn build<T: Real>(
        kind: HeadKind,
        prefix: &str,
        dim: usize,
        classes: usize,
        params: &mut ParamSet<T>,
        init: &mut Init,
    ) -> Self {
        match kind {
            HeadKind::Fcn => HeadWeights::Fcn(FcnHeadWeights {
                classifier: add_linear(params, init, &format!("{prefix}.fcn.cls"), dim, classes),
            }),
            HeadKind::Atm => {
                let p = format!("{prefix}.atm");
                let class_tokens = params.add(
                    format!("{p}.class_tokens"),
                    init.normal(&[classes, dim], 1.0),
                );
                HeadWeights::Atm(AtmLiteHeadWeights {
                    class_tokens,
                    q: add_linear(params, init, &format!("{p}.q"), dim, dim),
                    k: add_linear(params, init, &format!("{p}.k"), dim, dim),
                    v: add_linear(params, init, &format!("{p}.v"), dim, dim),
                    o: add_linear(params, init, &format!("{p}.o"), dim, dim),
                    classifier: add_linear(params, init, &format!("{p}.cls"), dim, classes),
                    temperature: params.add(
                        format!("{p}.temperature"),
                        Tensor::filled(&[1], T::c(1.0 / (dim as f64).sqrt())),
                    ),
                })
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            HeadWeights::Fcn(_) => HeadKind::Fcn,
            HeadWeights::Atm(_) => HeadKind::Atm,
        }
    }
}

/// What the loss consumes: raw logits (FCN) or probabilities (ATM-lite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossInput {
    Logits(Var),
    Probs(Var),
}

/// Per-token class distribution of one head over all rows of a token state.
#[derive(Debug, Clone)]
pub struct AuxPrediction<T> {
    pub probs: Var,
    pub loss_input: LossInput,
    pub confidence: Vec<T>,
    pub argmax: Vec<usize>,
    /// Leading rows that are real tokens; the rest are synthetic.
    pub real: usize,
}

impl<T: Real> AuxPrediction<T> {
    pub(crate) fn from_probs(
        s: &Session<T>,
        probs: Var,
        loss_input: LossInput,
        real: usize,
    ) -> Self {
        let p = s.tape.value(probs);
        let k = p.cols();
        let mut confidence = Vec::with_capacity(p.rows());
        let mut argmax = Vec::with_capacity(p.rows());
        for row in p.data().chunks(k) {
            let (best, conf) = row_argmax(row);
            confidence.push(conf);
            argmax.push(best);
        }
        AuxPrediction {
            probs,
            loss_input,
            confidence,
            argmax,
            real,
        }
    }
}

/// Index and value of the row maximum; ties go to the lowest index.
pub fn row_argmax<T: Real>(row: &[T]) -> (usize, T) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

pub fn fcn_forward<T: Real>(
    s: &mut Session<T>,
    tokens: &TokenState,
    w: &FcnHeadWeights,
) -> Result<AuxPrediction<T>> {
    let logits = s.linear(tokens.features, w.classifier)?;
    let probs = s.tape.softmax_rows(logits)?;
    Ok(AuxPrediction::from_probs(
        s,
        probs,
        LossInput::Logits(logits),
        tokens.real(),
    ))
}

pub fn atm_forward<T: Real>(
    s: &mut Session<T>,
    tokens: &TokenState,
    w: &AtmLiteHeadWeights,
) -> Result<AuxPrediction<T>> {
    let dim = s.tape.shape(tokens.features)[1];
    let z = tokens.features;
    let cls = s.param(w.class_tokens);
    let q = s.linear(cls, w.q)?;
    let k = s.linear(z, w.k)?;
    let v = s.linear(z, w.v)?;
    let kt = s.tape.transpose(k)?;
    // [K × n] similarity between class queries and token keys.
    let sim = s.tape.matmul(q, kt)?;
    let scaled = s.tape.scale(sim, 1.0 / (dim as f64).sqrt())?;
    let attn = s.tape.softmax_rows(scaled)?;
    let upd = s.tape.matmul(attn, v)?;
    let upd = s.linear(upd, w.o)?;
    let out = s.tape.add(upd, cls)?;
    let scores = s.linear(out, w.classifier)?;
    let diag = s.tape.diag(scores)?;
    let class_prob = s.tape.sigmoid(diag)?;

    let sim_t = s.tape.transpose(sim)?;
    let temp = s.param(w.temperature);
    let sim_t = s.tape.scale_by(sim_t, temp)?;
    let masks = s.tape.softmax_rows(sim_t)?;
    let weighted = s.tape.scale_cols(masks, class_prob)?;
    let probs = s.tape.normalize_rows(weighted)?;
    Ok(AuxPrediction::from_probs(
        s,
        probs,
        LossInput::Probs(probs),
        tokens.real(),
    ))
}

pub fn head_forward<T: Real>(
    s: &mut Session<T>,
    tokens: &TokenState,
    w: &HeadWeights,
) -> Result<AuxPrediction<T>> {
    match w {
        HeadWeights::Fcn(f) => fcn_forward(s, tokens, f),
        HeadWeights::Atm(a) => atm_forward(s, tokens, a),
    }
}

/// Cross-entropy over the real rows of `pred`. `labels[i]` is the target
/// of real row `i`; synthetic rows are ignored.
pub fn head_loss<T: Real>(
    s: &mut Session<T>,
    pred: &AuxPrediction<T>,
    labels: &[usize],
) -> Result<Var> {
    let rows = pred.confidence.len();
    let mut padded = labels.to_vec();
    padded.resize(rows, IGNORE_INDEX);
    if labels.len() != pred.real {
        return Err(crate::error::Error::shape(
            "head_loss",
            format!("{} labels for {} real tokens", labels.len(), pred.real),
        ));
    }
    match pred.loss_input {
        LossInput::Logits(l) => s.tape.cross_entropy(l, &padded, IGNORE_INDEX),
        LossInput::Probs(p) => s.tape.nll(p, &padded, IGNORE_INDEX),
    }
}
