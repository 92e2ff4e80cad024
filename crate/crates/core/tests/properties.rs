use candle_core::{DType, Device, Tensor};
use image::DynamicImage;
use mmr_core::backbones::{FrozenEncoder, FrozenEncoderConfig, TokenEncoderConfig};
use mmr_core::data::{preprocess_image, render_toy_sample, ImageTensor, PreprocessConfig, ShiftKind, ToyConfig};
use mmr_core::exec::Execution;
use mmr_core::model::MmrModel;
use mmr_core::nn::ParamStore;
use mmr_core::train::{train, TrainConfig, TrainImages};

const SIDE: usize = 64;

fn small_models(dev: &Device) -> (MmrModel, FrozenEncoder) {
    let teacher_cfg = FrozenEncoderConfig {
        toy_channels: [8, 12, 16],
        seed: 3,
        ..FrozenEncoderConfig::toy()
    };
    let teacher = FrozenEncoder::new(&teacher_cfg, DType::F32, dev).unwrap();
    let enc = TokenEncoderConfig::tiny(32, 2, 2, 16);
    let model = MmrModel::new(ParamStore::new(4, DType::F32, dev), &enc, &teacher, SIDE, SIDE).unwrap();
    (model, teacher)
}

fn toy_batch(n: usize, side: usize) -> Vec<ImageTensor> {
    let cfg = ToyConfig {
        image_size: side,
        ..Default::default()
    };
    let pre = PreprocessConfig {
        resize_to: side,
        crop_to: side,
        ..Default::default()
    };
    (0..n)
        .map(|i| {
            let s = render_toy_sample(&cfg, i as u64, ShiftKind::None, None).unwrap();
            preprocess_image(&DynamicImage::ImageRgb8(s.image), &pre, None).unwrap()
        })
        .collect()
}

fn short_train(epochs: usize, eta: f64, seed: u64, images: &TrainImages) -> (Vec<f32>, MmrModel, FrozenEncoder) {
    let (model, teacher) = small_models(&Device::Cpu);
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        eta,
        seed,
        ..Default::default()
    };
    let losses = train(&model, &teacher, images, &cfg, &mut (), Execution::Parallel).unwrap();
    (losses.into_iter().map(|r| r.loss).collect(), model, teacher)
}

#[test]
fn fifty_steps_reduce_the_loss_and_leave_the_teacher_alone() {
    let images = TrainImages::Fixed(toy_batch(4, SIDE));
    let (_, teacher) = small_models(&Device::Cpu);
    let before = teacher.param_digest().unwrap();
    let (losses, _, trained_teacher) = short_train(50, 0.4, 0, &images);
    assert_eq!(losses.len(), 50);
    assert!(losses.iter().all(|l| l.is_finite()));
    let head: f32 = losses[..5].iter().sum::<f32>() / 5.0;
    let tail: f32 = losses[45..].iter().sum::<f32>() / 5.0;
    assert!(tail < 0.7 * head, "loss went from {head} to {tail}");
    assert_eq!(trained_teacher.param_digest().unwrap(), before);
}

#[test]
fn zero_ratio_trains_on_full_images() {
    let images = TrainImages::Fixed(toy_batch(4, SIDE));
    let (losses, _, _) = short_train(3, 0.0, 0, &images);
    assert!(losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn training_is_deterministic_and_schedule_independent() {
    let images = TrainImages::Fixed(toy_batch(4, SIDE));
    let (a, ma, _) = short_train(3, 0.4, 9, &images);
    let (b, mb, _) = short_train(3, 0.4, 9, &images);
    assert_eq!(a, b);
    let x = Tensor::randn(0f32, 1.0, (1, 3, SIDE, SIDE), &Device::Cpu).unwrap();
    let fa = ma.forward_full(&x).unwrap();
    let fb = mb.forward_full(&x).unwrap();
    for (p, q) in fa.maps.iter().zip(&fb.maps) {
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), q.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
    let (c, _, _) = short_train(3, 0.4, 10, &images);
    assert_ne!(a, c);
}

#[test]
fn illumination_shift_darkens_the_blade() {
    let cfg = ToyConfig {
        image_size: 64,
        ..Default::default()
    };
    let mean = |shift| {
        let s = render_toy_sample(&cfg, 5, shift, None).unwrap();
        s.image.pixels().map(|p| p.0.iter().map(|&v| v as f64).sum::<f64>()).sum::<f64>()
    };
    let ratio = mean(ShiftKind::Illumination) / mean(ShiftKind::None);
    assert!((ratio - cfg.illumination_factor as f64).abs() < 0.05, "brightness ratio {ratio}");
}
