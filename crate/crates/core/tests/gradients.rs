//! Central finite-difference checks of every differentiable op and of the
//! composed layer and head passes (f64, h = 1e-5).

mod common;

use common::{check_model, check_op, rand_tensor, random_image, random_model, rng, tiny_config};
use dtop_core::heads::{atm_forward, fcn_forward, head_loss, HeadKind, HeadWeights, IGNORE_INDEX};
use dtop_core::tensor::Tensor;
use dtop_core::vit::{embed, layer_forward, TokenState};

const TOL: f64 = 1e-4;
const SHAPES: [(usize, usize); 3] = [(2, 3), (4, 4), (5, 2)];

fn t(seed: u64, shape: &[usize]) -> Tensor<f64> {
    rand_tensor(&mut rng(seed), shape, 1.0)
}

fn positive(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut x = t(seed, shape);
    x.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.5 * *v);
    x
}

fn assert_ok(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: relative error {err:e} exceeds {tol:e}");
}

#[test]
fn matmul() {
    for (i, &(m, p)) in SHAPES.iter().enumerate() {
        let n = 3 + i;
        let s = i as u64;
        let err = check_op(&[t(s, &[m, p]), t(s + 10, &[p, n])], s, |t, v| t.matmul(v[0], v[1]));
        assert_ok("matmul", err, 1e-6);
    }
}

#[test]
fn elementwise_binary() {
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let s = 20 + i as u64;
        let xs = [t(s, &[r, c]), t(s + 1, &[r, c])];
        assert_ok("add", check_op(&xs, s, |t, v| t.add(v[0], v[1])), TOL);
        assert_ok("mul", check_op(&xs, s, |t, v| t.mul(v[0], v[1])), TOL);
    }
}

#[test]
fn shape_ops() {
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let s = 40 + i as u64;
        let x = [t(s, &[r, c])];
        assert_ok("transpose", check_op(&x, s, |t, v| t.transpose(v[0])), TOL);
        assert_ok("slice_cols", check_op(&x, s, |t, v| t.slice_cols(v[0], 1, c - 1)), TOL);
        assert_ok("sum", check_op(&x, s, |t, v| t.sum(v[0])), TOL);
        let two = [t(s, &[r, c]), t(s + 1, &[r, 2])];
        assert_ok("concat_cols", check_op(&two, s, |t, v| t.concat_cols(&[v[0], v[1]])), TOL);
        let two = [t(s, &[r, c]), t(s + 1, &[3, c])];
        assert_ok("concat_rows", check_op(&two, s, |t, v| t.concat_rows(&[v[0], v[1]])), TOL);
        let sq = [t(s, &[c, c])];
        assert_ok("diag", check_op(&sq, s, |t, v| t.diag(v[0])), TOL);
    }
}

#[test]
fn scaling_ops() {
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let s = 60 + i as u64;
        let x = t(s, &[r, c]);
        assert_ok("scale", check_op(&[x.clone()], s, |t, v| t.scale(v[0], -1.7)), TOL);
        let sc = t(s + 1, &[1]);
        assert_ok("scale_by", check_op(&[x.clone(), sc], s, |t, v| t.scale_by(v[0], v[1])), TOL);
        let cols = t(s + 2, &[c]);
        assert_ok("scale_cols", check_op(&[x.clone(), cols.clone()], s, |t, v| t.scale_cols(v[0], v[1])), TOL);
        assert_ok("add_row_bias", check_op(&[x, cols], s, |t, v| t.add_row_bias(v[0], v[1])), TOL);
    }
}

#[test]
fn nonlinearities() {
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let s = 80 + i as u64;
        let x = [rand_tensor(&mut rng(s), &[r, c], 3.0)];
        assert_ok("softmax_rows", check_op(&x, s, |t, v| t.softmax_rows(v[0])), TOL);
        assert_ok("gelu", check_op(&x, s, |t, v| t.gelu(v[0])), TOL);
        assert_ok("sigmoid", check_op(&x, s, |t, v| t.sigmoid(v[0])), TOL);
        let p = [positive(s, &[r, c])];
        assert_ok("normalize_rows", check_op(&p, s, |t, v| t.normalize_rows(v[0])), TOL);
    }
}

#[test]
fn layer_norm() {
    for (i, &(r, c)) in SHAPES.iter().enumerate() {
        let s = 100 + i as u64;
        let xs = [rand_tensor(&mut rng(s), &[r, c + 1], 2.0), positive(s + 1, &[c + 1]), t(s + 2, &[c + 1])];
        let err = check_op(&xs, s, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5));
        assert_ok("layer_norm", err, 1e-5);
    }
}

#[test]
fn index_ops() {
    let cases: [(usize, Vec<usize>); 3] = [(3, vec![2, 2]), (5, vec![4, 0, 2]), (4, vec![1, 1, 3, 0, 1])];
    for (i, (n, idx)) in cases.iter().enumerate() {
        let s = 120 + i as u64;
        let x = [t(s, &[*n, 3])];
        assert_ok("gather_rows", check_op(&x, s, |t, v| t.gather_rows(v[0], idx)), TOL);
        assert_ok("mean_rows", check_op(&x, s, |t, v| t.mean_rows(v[0], idx)), TOL);
    }
    let scatters: [(usize, Vec<usize>); 3] = [(4, vec![3, 1]), (5, vec![0, 4, 2]), (3, vec![2, 0, 1])];
    for (i, (n, idx)) in scatters.iter().enumerate() {
        let s = 130 + i as u64;
        let x = [t(s, &[idx.len(), 2])];
        assert_ok("scatter_rows", check_op(&x, s, |t, v| t.scatter_rows(v[0], idx, *n)), TOL);
    }
}

#[test]
fn losses() {
    let labels: [Vec<usize>; 3] = [vec![0, 2], vec![3, IGNORE_INDEX, 1, 0], vec![1, 1, 0, 2, 4]];
    for (i, lab) in labels.iter().enumerate() {
        let s = 140 + i as u64;
        let k = 5;
        let logits = [rand_tensor(&mut rng(s), &[lab.len(), k], 2.0)];
        let err = check_op(&logits, s, |t, v| t.cross_entropy(v[0], lab, IGNORE_INDEX));
        assert_ok("cross_entropy", err, 1e-5);
        let probs = [positive(s, &[lab.len(), k])];
        let err = check_op(&probs, s, |t, v| t.nll(v[0], lab, IGNORE_INDEX));
        assert_ok("nll", err, TOL);
    }
}

#[test]
fn composite_mlp_loss() {
    for s in 0..3u64 {
        let xs = [t(s, &[4, 3]), t(s + 1, &[3, 6]), t(s + 2, &[6]), t(s + 3, &[6, 3])];
        let err = check_op(&xs, s, |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_row_bias(h, v[2])?;
            let h = t.gelu(h)?;
            let logits = t.matmul(h, v[3])?;
            t.cross_entropy(logits, &[0, 2, 1, 1], IGNORE_INDEX)
        });
        assert_ok("mlp", err, TOL);
    }
}

fn full_state(features: dtop_core::tensor::Var, n: usize) -> TokenState {
    TokenState {
        features,
        origin: (0..n).collect(),
        synthetic: 0,
        grid: n,
    }
}

#[test]
fn layer_forward_composed() {
    for s in 0..3u64 {
        let model = random_model(tiny_config(HeadKind::Fcn, 3, 1, vec![]), s, 0.5);
        let x = rand_tensor(&mut rng(s + 7), &[4, 8], 1.0);
        let err = check_model(&model, &[x], s, |sess, v| {
            let w = &sess.model().backbone.layers[0];
            Ok(layer_forward(sess, full_state(v[0], 4), w)?.features)
        });
        assert_ok("layer_forward", err, TOL);
    }
}

#[test]
fn embedding_composed() {
    for s in 0..3u64 {
        let model = random_model(tiny_config(HeadKind::Fcn, 3, 1, vec![]), 10 + s, 0.5);
        let image = random_image(&model.config.backbone, s);
        let err = check_model(&model, &[], s, |sess, _| Ok(embed(sess, &image)?.features));
        assert_ok("embed", err, TOL);
    }
}

#[test]
fn atm_forward_composed() {
    for s in 0..3u64 {
        let model = random_model(tiny_config(HeadKind::Atm, 3, 1, vec![]), 20 + s, 0.5);
        let x = rand_tensor(&mut rng(s + 9), &[4, 8], 1.0);
        let err = check_model(&model, &[x], s, |sess, v| {
            let HeadWeights::Atm(w) = &sess.model().heads[0] else { unreachable!() };
            Ok(atm_forward(sess, &full_state(v[0], 4), w)?.probs)
        });
        assert_ok("atm_forward", err, TOL);
    }
}

#[test]
fn head_losses_composed() {
    for kind in [HeadKind::Fcn, HeadKind::Atm] {
        for s in 0..3u64 {
            let model = random_model(tiny_config(kind, 4, 1, vec![]), 30 + s, 0.5);
            let x = rand_tensor(&mut rng(s + 11), &[4, 8], 1.0);
            let err = check_model(&model, &[x], s, |sess, v| {
                let st = full_state(v[0], 4);
                let pred = match &sess.model().heads[0] {
                    HeadWeights::Atm(w) => atm_forward(sess, &st, w)?,
                    HeadWeights::Fcn(w) => fcn_forward(sess, &st, w)?,
                };
                head_loss(sess, &pred, &[0, 3, 3, 1])
            });
            assert_ok("head_loss", err, TOL);
        }
    }
}
