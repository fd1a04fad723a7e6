//! Mini-batch training with momentum SGD.
//!
//! Each image gets its own tape; gradients are summed over the batch and
//! divided by the batch size. The step size ramps up linearly over the
//! warmup fraction, then decays polynomially to zero.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::data::Dataset;
use crate::engine::{staged_forward, PruneConfig, Supervision};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::{Model, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Baseline,
    Direct,
    Finetune,
    Retrain,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Scheme::Baseline),
            "direct" => Ok(Scheme::Direct),
            "finetune" => Ok(Scheme::Finetune),
            "retrain" => Ok(Scheme::Retrain),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Baseline => "baseline",
            Scheme::Direct => "direct",
            Scheme::Finetune => "finetune",
            Scheme::Retrain => "retrain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Exponent of the post-warmup decay `(1 - t)^power`.
    pub decay_power: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Loss weight per auxiliary head, stage order.
    pub aux_weights: Vec<f64>,
    /// Finetune length as a fraction of `iterations` when the scheme is
    /// finetune and no explicit count is given.
    pub finetune_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Baseline,
            iterations: 1500,
            batch_size: 8,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            decay_power: 1.0,
            clip_norm: 1.0,
            aux_weights: vec![1.0, 1.0],
            finetune_fraction: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 || self.decay_power < 0.0 {
            return bad("weight_decay, clip_norm and decay_power must be non-negative");
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return bad("finetune_fraction must lie in (0, 1]");
        }
        if self.aux_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("aux weights must be finite and non-negative");
        }
        Ok(())
    }

    /// Iterations actually run for the configured scheme.
    pub fn effective_iterations(&self) -> usize {
        match self.scheme {
            Scheme::Direct => 0,
            Scheme::Finetune => (self.iterations as f64 * self.finetune_fraction).round() as usize,
            Scheme::Baseline | Scheme::Retrain => self.iterations,
        }
    }

    /// Step size at iteration `it` of `total`.
    pub fn lr_at(&self, it: usize, total: usize) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as usize;
        if it < warm {
            return self.lr * (it + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let t = (it - warm) as f64 / span;
        self.lr * (1.0 - t).max(0.0).powf(self.decay_power)
    }
}

/// Loss per iteration, averaged over the batch.
pub type LossCurve = Vec<f64>;

/// Trains `model` in place. `prune` is the pruning configuration used in
/// the training forward passes; the baseline scheme ignores it.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    prune: &PruneConfig,
) -> Result<LossCurve> {
    cfg.validate()?;
    prune.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let iterations = cfg.effective_iterations();
    if iterations == 0 {
        return Ok(Vec::new());
    }
    let prune = match cfg.scheme {
        Scheme::Baseline => PruneConfig::disabled(),
        _ => prune.clone(),
    };
    let trainable: Vec<bool> = model
        .params
        .ids()
        .map(|id| cfg.scheme != Scheme::Finetune || !model.is_backbone_param(id))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut velocity: Vec<Option<Vec<T>>> = vec![None; model.params.len()];
    let mut curve = Vec::with_capacity(iterations);

    for it in 0..iterations {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; model.params.len()];
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            let (loss, g) = image_step(model, &trainable, data, idx, cfg, &prune)
                .map_err(|e| divergence(it, e))?;
            batch_loss += loss;
            accumulate(&mut grads, g);
        }
        let batch_loss = batch_loss / cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("batch loss is {batch_loss}"),
            });
        }
        curve.push(batch_loss);

        let inv = 1.0 / cfg.batch_size as f64;
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|&v| (v.f() * inv).powi(2))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("gradient norm is {norm}"),
            });
        }
        let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        let lr = cfg.lr_at(it, iterations);
        let (scale, mom, wd) = (T::c(inv * clip), T::c(cfg.momentum), T::c(cfg.weight_decay));
        for (id, g) in model.params.ids().zip(grads) {
            let Some(g) = g else { continue };
            let w = model.params.get_mut(id);
            let vel = velocity[id.index()].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            for ((p, v), &gv) in w.data_mut().iter_mut().zip(vel.iter_mut()).zip(g.data()) {
                *v = mom * *v + gv * scale + wd * *p;
                *p -= T::c(lr) * *v;
            }
        }
        if it % 100 == 0 || it + 1 == iterations {
            log::debug!("{} it {it}/{iterations} loss {batch_loss:.4} lr {lr:.4}", cfg.scheme);
        }
    }
    Ok(curve)
}

fn image_step<T: Real>(
    model: &Model<T>,
    trainable: &[bool],
    data: &Dataset<T>,
    idx: usize,
    cfg: &TrainConfig,
    prune: &PruneConfig,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut s = Session::with_trainable(model, trainable.to_vec());
    let sup = Supervision {
        labels: &data.token_labels[idx],
        aux_weights: &cfg.aux_weights,
    };
    let out = staged_forward(&mut s, &data.images[idx], prune, Some(&sup))?;
    let loss = out
        .loss
        .ok_or_else(|| Error::Internal("supervised pass produced no loss".into()))?;
    let value = s.tape.value(loss).item().f();
    s.tape.backward(loss)?;
    Ok((value, s.take_param_grads()))
}

fn accumulate<T: Real>(acc: &mut [Option<Tensor<T>>], grads: Vec<Option<Tensor<T>>>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            None => *a = Some(g),
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y),
        }
    }
}

fn divergence(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            iteration,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99, 100) < 0.02);
        let mut prev = f64::INFINITY;
        for it in 10..100 {
            let lr = cfg.lr_at(it, 100);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn effective_iterations_per_scheme() {
        let mut cfg = TrainConfig {
            iterations: 160,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.effective_iterations(), 160);
        cfg.scheme = Scheme::Finetune;
        assert_eq!(cfg.effective_iterations(), 40);
        cfg.scheme = Scheme::Direct;
        assert_eq!(cfg.effective_iterations(), 0);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [Scheme::Baseline, Scheme::Direct, Scheme::Finetune, Scheme::Retrain] {
            assert_eq!(s.to_string().parse::<Scheme>().unwrap(), s);
        }
        assert!("sgd".parse::<Scheme>().is_err());
    }
}
