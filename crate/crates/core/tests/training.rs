//! Model construction, training and Grad-CAM end to end on synthetic lesions.

use dermresnet::data::synth_dataset;
use dermresnet::gradcam::{gradcam, overlay};
use dermresnet::model::{argmax_rows, Model, ModelConfig, SkipMode, MELANOMA};
use dermresnet::tensor::Tensor;
use dermresnet::train::{evaluate, fit, Dataset, TrainConfig};

fn config() -> ModelConfig {
    ModelConfig::default().with_input_size(32)
}

#[test]
fn same_seed_same_weights() {
    let a = Model::build(config(), 5).unwrap();
    let b = Model::build(config(), 5).unwrap();
    let c = Model::build(config(), 6).unwrap();
    let flat = |m: &Model| m.state().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f32>>();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
}

#[test]
fn probabilities_are_rows_summing_to_one() {
    for mode in [SkipMode::Consecutive, SkipMode::Dense] {
        let m: Model = Model::build(config().with_skip_mode(mode), 1).unwrap();
        let x = Tensor::from_fn(&[3, 3, 32, 32], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0).unwrap();
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        for row in p.data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn wrong_input_size_is_rejected() {
    let m: Model = Model::build(config(), 1).unwrap();
    assert!(m.forward(&Tensor::zeros(&[1, 3, 24, 24]).unwrap()).is_err());
    assert!(m.forward(&Tensor::zeros(&[1, 1, 32, 32]).unwrap()).is_err());
}

#[test]
fn short_fit_learns_and_localizes() {
    let train = Dataset::with_own_means(&synth_dataset(32, 32, 21).unwrap(), 32).unwrap();
    let val_samples = synth_dataset(16, 32, 22).unwrap();
    let val = Dataset::from_samples(&val_samples, train.preprocess).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        seed: 3,
        ..TrainConfig::default()
    };
    let result = fit(Model::build(config(), 3).unwrap(), &train, &val, &cfg).unwrap();
    let h = &result.history.records;
    assert_eq!(h.len(), 40);
    assert!(h.last().unwrap().train_loss < h[0].train_loss);
    assert_eq!(result.model.channel_means, train.preprocess.channel_means);

    let best = result.best.as_ref().unwrap();
    let best_acc = h[best.epoch - 1].val_accuracy;
    assert!(h.iter().all(|r| r.val_accuracy <= best_acc));
    assert!((evaluate(&best.model, &val).unwrap().accuracy - best_acc).abs() < 1e-12);
    assert!(best_acc >= 0.75, "best val accuracy {best_acc}");

    let model = &result.model;
    let s = 32;
    let batch = Tensor::new(&[val.len(), 3, s, s], (0..val.len()).flat_map(|i| val.input(i).data().to_vec()).collect())
        .unwrap();
    let predicted = argmax_rows(&model.predict_proba(&batch).unwrap());
    for (i, sample) in val_samples.iter().enumerate() {
        let heat = gradcam(model, val.input(i), MELANOMA).unwrap();
        assert_eq!(heat.values.len(), s * s);
        assert!(heat.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let img = overlay(&val.images[i], &heat, 0.5).unwrap();
        assert_eq!(img.dimensions(), (32, 32));
        if sample.bbox.is_some() && predicted[i] == MELANOMA {
            assert!(heat.raw_max > 0.0);
        }
    }
}
