use std::time::Instant;

use mocl_core::metrics;
use mocl_core::synth::{render_patch, SynthConfig};
use mocl_model::network::input_tensors;
use mocl_model::train::batch_loss;
use mocl_model::{
    predict, refine, train_adapter, AdapterModel, Hyperparams, MoclParams, Mode, ModelConfig, TrainLoss, TrainingItem,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn classes() -> Vec<String> {
    vec!["podocyte".into(), "mesangial".into()]
}

fn items(n: usize, seed: u64) -> Vec<TrainingItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = render_patch(&classes(), &SynthConfig::default(), &mut rng);
            let labels = classes().iter().map(|c| p.class_masks[c].clone()).collect();
            TrainingItem::new(format!("s{i}"), p.image, labels, 2.0).unwrap()
        })
        .collect()
}

fn mean_dice(model: &AdapterModel, data: &[TrainingItem]) -> Vec<f64> {
    let mut per_class = vec![0.0; model.classes().len()];
    for it in data {
        let out = predict(model, &it.image).unwrap();
        for (c, (p, y)) in out.prob.iter().zip(&it.labels).enumerate() {
            per_class[c] += metrics::dice(&p.map(|&v| v >= 0.5), y).unwrap() / data.len() as f64;
        }
    }
    per_class
}

#[test]
fn overfits_four_samples_and_keeps_backbone_frozen() {
    let data = items(4, 1);
    let mut model = AdapterModel::build(ModelConfig::new(classes())).unwrap();
    let hash = model.backbone_hash().unwrap();
    let hp = Hyperparams {
        epochs: 200,
        patience: 200,
        ..Hyperparams::default()
    };
    let t = Instant::now();
    let hist = train_adapter(&mut model, &data, &data, &hp, &TrainLoss::DiceBce).unwrap();
    eprintln!("200 steps in {:?}", t.elapsed());
    assert_eq!(model.backbone_hash().unwrap(), hash);
    assert!(!hist.epochs.is_empty());
    let dice = mean_dice(&model, &data);
    eprintln!("train dice {dice:?}");
    assert!(dice.iter().all(|&d| d >= 0.8), "{dice:?}");

    // refinement on the same data
    let t = Instant::now();
    let before = mean_dice(&model, &data);
    let rh = refine(
        &mut model,
        &data,
        &data,
        &Hyperparams::refinement(),
        &MoclParams::default(),
    )
    .unwrap();
    eprintln!("refine in {:?}", t.elapsed());
    assert_eq!(model.backbone_hash().unwrap(), hash);
    let after = mean_dice(&model, &data);
    assert!(rh.epochs.iter().all(|e| e.omega_fg_mean.is_some()));
    for (a, b) in after.iter().zip(&before) {
        assert!(*a >= b - 0.01, "{after:?} vs {before:?}");
    }
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let data = items(2, 2);
    let mut model = AdapterModel::build(ModelConfig::new(classes())).unwrap();
    let before = model.snapshot_trainable().unwrap();
    let hp = Hyperparams {
        epochs: 0,
        ..Hyperparams::default()
    };
    train_adapter(&mut model, &data, &data, &hp, &TrainLoss::DiceBce).unwrap();
    refine(&mut model, &data, &data, &hp, &MoclParams::default()).unwrap();
    for (n, t) in model.snapshot_trainable().unwrap() {
        let a = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = before[&n].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b, "{n}");
    }
}

#[test]
fn adapter_identity_at_init() {
    let data = items(2, 3);
    let model = AdapterModel::build(ModelConfig::new(classes())).unwrap();
    let imgs: Vec<_> = data.iter().map(|d| &d.image).collect();
    let texs: Vec<_> = data.iter().map(|d| &d.texture).collect();
    let (x, t) = input_tensors(&imgs, &texs, model.device()).unwrap();
    let with = model.forward(&x, &t, true, Mode::Infer).unwrap();
    let without = model.forward(&x, &t, false, Mode::Infer).unwrap();
    let flat = |t: &candle_core::Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&with.prob), flat(&without.prob));
    assert_eq!(flat(&with.embeddings), flat(&without.embeddings));
}

#[test]
fn every_trainable_parameter_gets_gradient() {
    let data = items(4, 4);
    let mut model = AdapterModel::build(ModelConfig::new(classes())).unwrap();
    // one epoch moves the zero-initialized up-projections off zero, after
    // which the down-projections receive gradient too
    let hp = Hyperparams {
        epochs: 1,
        ..Hyperparams::default()
    };
    train_adapter(&mut model, &data, &data, &hp, &TrainLoss::DiceBce).unwrap();
    let refs: Vec<&TrainingItem> = data.iter().collect();
    let imgs: Vec<_> = data.iter().map(|d| &d.image).collect();
    let texs: Vec<_> = data.iter().map(|d| &d.texture).collect();
    let (x, t) = input_tensors(&imgs, &texs, model.device()).unwrap();
    let out = model.forward(&x, &t, true, Mode::Train).unwrap();
    let (loss, _) = batch_loss(&model, &out, &refs, &TrainLoss::DiceBce).unwrap();
    let grads = loss.unwrap().backward().unwrap();
    for (name, var) in model.trainable_named() {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"));
        let max = g
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(max > 0.0, "zero gradient for {name}");
    }
    for (name, t) in model.backbone_tensors() {
        assert!(grads.get(t).is_none(), "backbone tensor {name} is tracked");
    }
}

#[test]
fn prediction_is_deterministic_and_tiles_large_images() {
    let data = items(1, 5);
    let model = AdapterModel::build(ModelConfig::new(classes())).unwrap();
    let a = predict(&model, &data[0].image).unwrap();
    let b = predict(&model, &data[0].image).unwrap();
    assert_eq!(a, b);
    assert!(a
        .prob
        .iter()
        .all(|p| p.as_slice().iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(a.embeddings.is_finite());

    let big = mocl_core::RgbImage::from_fn(200, 150, |y, x| data[0].image.at(y % 128, x % 128));
    let out = predict(&model, &big).unwrap();
    assert_eq!(out.prob[0].shape(), (200, 150));
    assert_eq!(out.embeddings.shape(), (200, 150));
    let small = mocl_core::RgbImage::new(64, 64);
    assert!(predict(&model, &small).is_err());
}
