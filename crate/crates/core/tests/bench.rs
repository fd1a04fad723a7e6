use dtop_core::bench::data::{generate_scene, Dataset, SynthSceneConfig};
use dtop_core::bench::eval::{evaluate, EvalReport};
use dtop_core::bench::train::{train, Scheme, TrainConfig};
use dtop_core::engine::{PruneConfig, PruneMethod};
use dtop_core::heads::HeadKind;
use dtop_core::tensor::Tensor;
use dtop_core::vit::{BackboneConfig, Model, ModelConfig};

fn scene() -> SynthSceneConfig {
    SynthSceneConfig {
        image_h: 16,
        image_w: 16,
        ..SynthSceneConfig::default()
    }
}

fn model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            image_h: 16,
            image_w: 16,
            patch: 4,
            channels: 3,
            dim: 16,
            layers: 3,
            heads: 2,
            ffn_ratio: 2,
            stage_boundaries: vec![1, 2],
        },
        classes: 4,
        aux_head: HeadKind::Atm,
        decode_head: HeadKind::Atm,
    }
}

fn quick_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

fn params(m: &Model<f32>) -> Vec<(String, Tensor<f32>)> {
    m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn trained(iterations: usize) -> Model<f32> {
    let data = Dataset::<f32>::train_split(&scene(), 32, 4).unwrap();
    let mut model = Model::<f32>::init(model_config(), 0).unwrap();
    train(&mut model, &data, &quick_train(iterations), &PruneConfig::disabled()).unwrap();
    model
}

#[test]
fn generated_scenes_are_well_formed() {
    let cfg = SynthSceneConfig::default();
    for i in 0..1000 {
        let s = generate_scene::<f32>(&cfg, i).unwrap();
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert_eq!(s.labels.len(), 32 * 32);
        assert!(s.labels.iter().all(|&l| l < cfg.classes));
        assert!(s.image.data().iter().all(|v| v.is_finite()));
    }
    let data = Dataset::<f32>::eval_split(&cfg, 20, 4).unwrap();
    for (pix, tok) in data.pixel_labels.iter().zip(&data.token_labels) {
        // Layout is grid-aligned, so every pixel agrees with its token.
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(pix[y * 32 + x], tok[(y / 4) * 8 + x / 4]);
            }
        }
    }
}

#[test]
fn overfits_a_single_image() {
    let data = Dataset::<f64>::train_split(&scene(), 1, 4).unwrap();
    let mut model = Model::<f64>::init(model_config(), 1).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        batch_size: 1,
        lr: 0.1,
        ..TrainConfig::default()
    };
    let curve = train(&mut model, &data, &cfg, &PruneConfig::disabled()).unwrap();
    assert_eq!(curve.len(), 200);
    let last = *curve.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
    assert!(last < curve[0]);
}

#[test]
fn direct_scheme_leaves_weights_untouched() {
    let data = Dataset::<f32>::train_split(&scene(), 8, 4).unwrap();
    let mut model = Model::<f32>::init(model_config(), 2).unwrap();
    let before = params(&model);
    let cfg = TrainConfig {
        scheme: Scheme::Direct,
        ..quick_train(50)
    };
    let curve = train(&mut model, &data, &cfg, &PruneConfig::default()).unwrap();
    assert!(curve.is_empty());
    assert_eq!(params(&model), before);
}

#[test]
fn finetune_only_moves_heads() {
    let mut model = trained(30);
    let before = params(&model);
    let data = Dataset::<f32>::train_split(&scene(), 16, 4).unwrap();
    let cfg = TrainConfig {
        scheme: Scheme::Finetune,
        finetune_fraction: 1.0,
        ..quick_train(10)
    };
    let curve = train(&mut model, &data, &cfg, &PruneConfig::with_p0(0.6)).unwrap();
    assert_eq!(curve.len(), 10);
    let after = params(&model);
    let mut heads_moved = false;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.starts_with("backbone.") {
            assert_eq!(a, b, "{name} changed");
        } else {
            heads_moved |= a != b;
        }
    }
    assert!(heads_moved);
}

#[test]
fn p0_one_report_equals_disabled() {
    let model = trained(40);
    let data = Dataset::<f32>::eval_split(&scene(), 12, 4).unwrap();
    let off = evaluate(&model, &data, &PruneConfig::disabled()).unwrap();
    let one = evaluate(&model, &data, &PruneConfig::with_p0(1.0)).unwrap();
    assert_eq!(off.miou, one.miou);
    assert_eq!(off.per_image, one.per_image);
    assert_eq!(off.confusion, one.confusion);
    assert_eq!(off.avg_macs, one.avg_macs);
}

#[test]
fn lower_threshold_exits_more_and_costs_less() {
    let model = trained(120);
    let data = Dataset::<f32>::eval_split(&scene(), 16, 4).unwrap();
    let base = evaluate(&model, &data, &PruneConfig::disabled()).unwrap();
    let loose = evaluate(&model, &data, &PruneConfig::with_p0(0.5)).unwrap();
    let tight = evaluate(&model, &data, &PruneConfig::with_p0(0.95)).unwrap();
    assert!(loose.exit_histogram[0] >= tight.exit_histogram[0]);
    assert!(loose.exit_histogram[0] > 0);
    let remove = PruneConfig {
        method: PruneMethod::Remove,
        ..PruneConfig::with_p0(0.5)
    };
    let removed = evaluate(&model, &data, &remove).unwrap();
    // Per image, the auxiliary heads can outweigh a handful of exits, so
    // only the averages are ordered.
    for r in [&base, &loose, &tight, &removed] {
        assert!(r.per_image.iter().all(|a| a.macs == a.instrumented_macs));
    }
    assert!(loose.avg_macs < base.avg_macs);
    assert!(removed.avg_macs <= loose.avg_macs);
}

#[test]
fn report_round_trips_and_counts_pixels() {
    let model = trained(20);
    let data = Dataset::<f32>::eval_split(&scene(), 6, 4).unwrap();
    let report = evaluate(&model, &data, &PruneConfig::with_p0(0.7)).unwrap();
    assert_eq!(report.confusion.total(), 6 * 16 * 16);
    assert_eq!(report.exit_histogram.iter().sum::<u64>(), 6 * 16);
    let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let csv = report.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(EvalReport::from_json("{").is_err());
}

#[test]
fn training_and_evaluation_are_deterministic() {
    let a = trained(15);
    let b = trained(15);
    assert_eq!(params(&a), params(&b));
    let data = Dataset::<f32>::eval_split(&scene(), 6, 4).unwrap();
    let ra = evaluate(&a, &data, &PruneConfig::with_p0(0.6)).unwrap();
    let rb = evaluate(&b, &data, &PruneConfig::with_p0(0.6)).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn empty_sets_are_rejected() {
    let data = Dataset::<f32>::train_split(&scene(), 0, 4).unwrap();
    let mut model = Model::<f32>::init(model_config(), 0).unwrap();
    assert!(train(&mut model, &data, &quick_train(5), &PruneConfig::disabled()).is_err());
    assert!(evaluate(&model, &data, &PruneConfig::disabled()).is_err());
}
