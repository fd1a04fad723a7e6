mod common;

use common::{rand_tensor, random_image, random_model, rng, tiny_config};
use dtop_core::cost::{
    dataset_average, head_macs, layer_macs, model_macs, patch_embed_macs, CostConfig, OccupancySchedule,
};
use dtop_core::engine::{dtop_forward, PruneConfig, PruneMethod};
use dtop_core::heads::{head_forward, HeadKind};
use dtop_core::vit::{embed, layer_forward, BackboneConfig, Model, ModelConfig, Session, TokenState};

fn state(s: &mut Session<f64>, n: usize, c: usize, seed: u64) -> TokenState {
    TokenState {
        features: s.tape.constant(rand_tensor(&mut rng(seed), &[n, c], 1.0)),
        origin: (0..n).collect(),
        synthetic: 0,
        grid: n,
    }
}

#[test]
fn layer_formula_matches_counter() {
    let model = random_model(tiny_config(HeadKind::Fcn, 3, 1, vec![]), 0, 0.5);
    for n in [1, 3, 4, 7] {
        let mut s = Session::inference(&model);
        let t = state(&mut s, n, 8, n as u64);
        let before = s.tape.macs();
        layer_forward(&mut s, t, &model.backbone.layers[0]).unwrap();
        assert_eq!(s.tape.macs() - before, layer_macs(n, 8, 2));
    }
}

#[test]
fn head_formulas_match_counter() {
    for kind in [HeadKind::Fcn, HeadKind::Atm] {
        for classes in [1, 3, 6] {
            let model = random_model(tiny_config(kind, classes, 1, vec![]), 1, 0.5);
            for n in [1, 4, 9] {
                let mut s = Session::inference(&model);
                let t = state(&mut s, n, 8, 2);
                let before = s.tape.macs();
                head_forward(&mut s, &t, &model.heads[0]).unwrap();
                assert_eq!(s.tape.macs() - before, head_macs(kind, n, 8, classes), "{kind:?} n={n}");
            }
        }
    }
}

#[test]
fn patch_embed_formula_matches_counter() {
    let model = random_model(tiny_config(HeadKind::Fcn, 3, 1, vec![]), 2, 0.5);
    let mut s = Session::inference(&model);
    embed(&mut s, &random_image(&model.config.backbone, 0)).unwrap();
    assert_eq!(s.tape.macs(), patch_embed_macs(&CostConfig::from(&model.config)));
}

fn pruning_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        backbone: BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch: 4,
            channels: 3,
            dim: 8,
            layers: 4,
            heads: 2,
            ffn_ratio: 4,
            stage_boundaries: vec![2, 3],
        },
        classes: 3,
        aux_head: HeadKind::Atm,
        decode_head: HeadKind::Atm,
    };
    random_model(cfg, seed, 1.0)
}

#[test]
fn pruned_runs_agree_with_analytic_schedule() {
    let mut pruned_any = false;
    for seed in 0..30u64 {
        let model = pruning_model(seed);
        let cost_cfg = CostConfig::from(&model.config);
        let image = random_image(&model.config.backbone, seed + 100);
        for method in [PruneMethod::Topk, PruneMethod::Remove, PruneMethod::Average, PruneMethod::FixedFraction] {
            let cfg = PruneConfig {
                p0: 0.5,
                k: 1,
                method,
                ..PruneConfig::default()
            };
            let out = dtop_forward(&model, &image, &cfg).unwrap();
            let report = model_macs(&cost_cfg, &out.occupancy).unwrap();
            assert_eq!(report.total, out.instrumented_macs, "seed {seed} {method}");
            pruned_any |= !out.exits.is_empty();

            // Schedule rebuilt from the per-stage statistics alone. Once no
            // real token is left nothing further runs.
            let (mut rows, mut real) = (16, 16);
            let mut expect = OccupancySchedule::empty(4, 3);
            let stage_layers = [0..2, 2..3, 3..4];
            for (m, range) in stage_layers.iter().enumerate() {
                if real == 0 {
                    break;
                }
                range.clone().for_each(|l| expect.layers[l] = rows);
                expect.heads[m] = rows;
                if let Some(st) = out.stats.get(m) {
                    real = st.active_after;
                    rows = real + expect_synthetic(&out.stats[..=m]);
                }
            }
            assert_eq!(out.occupancy, expect, "seed {seed} {method}");
        }
    }
    assert!(pruned_any);
}

fn expect_synthetic(stats: &[dtop_core::engine::StageStats]) -> usize {
    stats.iter().map(|s| s.synthetic_added).sum()
}

#[test]
fn disabled_runs_cost_the_full_schedule() {
    let model = pruning_model(3);
    let cost_cfg = CostConfig::from(&model.config);
    let out = dtop_forward(&model, &random_image(&model.config.backbone, 1), &PruneConfig::disabled()).unwrap();
    let full = OccupancySchedule::full(&cost_cfg, false);
    assert_eq!(out.occupancy, full);
    assert_eq!(model_macs(&cost_cfg, &full).unwrap().total, out.instrumented_macs);
}

#[test]
fn dataset_average_of_instrumented_runs() {
    let model = pruning_model(5);
    let cost_cfg = CostConfig::from(&model.config);
    let mut reports = Vec::new();
    let mut instrumented = 0u64;
    for i in 0..8 {
        let out = dtop_forward(&model, &random_image(&model.config.backbone, i), &PruneConfig::with_p0(0.6)).unwrap();
        instrumented += out.instrumented_macs;
        reports.push(model_macs(&cost_cfg, &out.occupancy).unwrap());
    }
    assert_eq!(dataset_average(&reports).unwrap(), instrumented as f64 / 8.0);
}

#[test]
fn full_size_reference_costs() {
    let full = |kind| {
        CostConfig::from(&ModelConfig {
            backbone: BackboneConfig::full_size(),
            classes: 150,
            aux_head: kind,
            decode_head: kind,
        })
    };
    let fcn = full(HeadKind::Fcn);
    let g = model_macs(&fcn, &OccupancySchedule::full(&fcn, false)).unwrap().gflops();
    assert!((g - 107.7).abs() / 107.7 < 0.05, "{g}");
    let atm = full(HeadKind::Atm);
    let g = model_macs(&atm, &OccupancySchedule::full(&atm, true)).unwrap().gflops();
    assert!((g - 109.9).abs() / 109.9 < 0.08, "{g}");
}
