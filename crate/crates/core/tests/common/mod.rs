//! Shared helpers: central finite differences and small random models.
#![allow(dead_code)]

use dtop_core::tensor::{Tape, Tensor, Var};
use dtop_core::vit::{BackboneConfig, Model, ModelConfig, Session};
use dtop_core::heads::HeadKind;
use dtop_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-5)`. The floor keeps gradients that are
/// exactly zero in theory (e.g. the key bias under softmax shift
/// invariance) from comparing round-off against round-off.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-5)
}

/// Projects `out` onto the fixed random direction `r`: `Σ r ⊙ out`.
fn project(tape: &mut Tape<f64>, out: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv)?;
    tape.sum(prod)
}

fn direction(shape: &[usize], seed: u64) -> Tensor<f64> {
    rand_tensor(&mut rng(seed ^ 0x5eed), shape, 1.0)
}

/// Largest relative error over the inputs between the tape gradient of
/// `Σ r ⊙ f(inputs)` and its central finite difference.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> (f64, Vec<usize>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars).unwrap();
        let shape = t.shape(out).to_vec();
        match r {
            None => (0.0, shape),
            Some(r) => {
                let l = project(&mut t, out, r).unwrap();
                (t.value(l).item(), shape)
            }
        }
    };
    let (_, out_shape) = eval(inputs, None);
    let r = direction(&out_shape, seed);

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = f(&mut t, &vars).unwrap();
    let loss = project(&mut t, out, &r).unwrap();
    t.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = t.grad(vars[i]).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; x.numel()]);
        let mut numeric = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = eval(&xs, Some(&r)).0;
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = eval(&xs, Some(&r)).0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same as [`check_op`], but the inputs are every parameter of `model`
/// plus the extra tensors, and `f` builds the output through a session.
pub fn check_model<F>(model: &Model<f64>, extra: &[Tensor<f64>], seed: u64, f: F) -> f64
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let eval = |m: &Model<f64>, xs: &[Tensor<f64>], r: Option<&Tensor<f64>>| -> (f64, Vec<usize>) {
        let mut s = Session::inference(m);
        let vars: Vec<Var> = xs.iter().map(|x| s.tape.constant(x.clone())).collect();
        let out = f(&mut s, &vars).unwrap();
        let shape = s.tape.shape(out).to_vec();
        match r {
            None => (0.0, shape),
            Some(r) => {
                let l = project(&mut s.tape, out, r).unwrap();
                (s.tape.value(l).item(), shape)
            }
        }
    };
    let (_, out_shape) = eval(model, extra, None);
    let r = direction(&out_shape, seed);

    let mut s = Session::with_trainable(model, vec![true; model.params.len()]);
    let vars: Vec<Var> = extra.iter().map(|x| s.tape.leaf(x.clone(), true)).collect();
    let out = f(&mut s, &vars).unwrap();
    let loss = project(&mut s.tape, out, &r).unwrap();
    s.tape.backward(loss).unwrap();
    let extra_grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(extra)
        .map(|(&v, x)| s.tape.grad(v).map(|g| g.data().to_vec()).unwrap_or(vec![0.0; x.numel()]))
        .collect();
    let param_grads = s.take_param_grads();

    let mut worst: f64 = 0.0;
    for id in model.params.ids() {
        let p = model.params.get(id);
        let analytic = param_grads[id.index()]
            .as_ref()
            .map(|g| g.data().to_vec())
            .unwrap_or(vec![0.0; p.numel()]);
        let mut numeric = Vec::with_capacity(p.numel());
        let mut m = model.clone();
        for j in 0..p.numel() {
            let orig = p.data()[j];
            m.params.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&m, extra, Some(&r)).0;
            m.params.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&m, extra, Some(&r)).0;
            m.params.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        // Parameters the output does not touch have zero gradient on both sides.
        let e = rel_err(&analytic, &numeric);
        if std::env::var("FD_DEBUG").is_ok() {
            eprintln!("{} {e:e}", model.params.name(id));
        }
        worst = worst.max(e);
    }
    for (i, x) in extra.iter().enumerate() {
        let mut numeric = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut xs = extra.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + FD_STEP;
            let up = eval(model, &xs, Some(&r)).0;
            xs[i].data_mut()[j] = x.data()[j] - FD_STEP;
            let down = eval(model, &xs, Some(&r)).0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&extra_grads[i], &numeric));
    }
    worst
}

/// 8×8 images, 4-pixel patches (4 tokens), width 8, two heads.
pub fn tiny_config(kind: HeadKind, classes: usize, layers: usize, boundaries: Vec<usize>) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 8,
            image_w: 8,
            patch: 4,
            channels: 3,
            dim: 8,
            layers,
            heads: 2,
            ffn_ratio: 2,
            stage_boundaries: boundaries,
        },
        classes,
        aux_head: kind,
        decode_head: kind,
    }
}

/// Model with every parameter redrawn uniformly in `[-scale, scale]`, so
/// biases, layer-norm affines and positional rows are non-trivial.
pub fn random_model(cfg: ModelConfig, seed: u64, scale: f64) -> Model<f64> {
    let mut m = Model::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(seed.wrapping_mul(31).wrapping_add(1));
    for id in m.params.ids().collect::<Vec<_>>() {
        let name = m.params.name(id).to_string();
        let t = m.params.get_mut(id);
        for v in t.data_mut() {
            let noise = r.gen_range(-scale..scale);
            *v = if name.ends_with("gamma") { 1.0 + noise } else { noise };
        }
    }
    m
}

pub fn random_image(cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
    rand_tensor(&mut rng(seed), &[cfg.channels, cfg.image_h, cfg.image_w], 1.0)
}
