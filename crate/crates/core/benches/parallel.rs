//! Sequential vs. data-parallel execution of the embarrassingly parallel stages.

use candle_core::{Device, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mmr_core::backbones::MultiScaleFeatures;
use mmr_core::data::{render_toy_sample, BinaryMask, DefectKind, ShiftKind, ToyConfig};
use mmr_core::exec::{self, Execution};
use mmr_core::metrics::{pixel_auroc, pro_score};
use mmr_core::scoring::{anomaly_map, AnomalyMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn maps_and_masks(n: usize, side: usize) -> (Vec<AnomalyMap>, Vec<BinaryMask>) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut maps = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let mut mask = BinaryMask::empty(side, side);
        if i % 2 == 1 {
            let (y0, x0) = (r.random_range(0..side - 12), r.random_range(0..side - 12));
            for y in y0..y0 + 12 {
                for x in x0..x0 + 12 {
                    mask.data[y * side + x] = true;
                }
            }
        }
        let map = (0..side * side)
            .map(|k| r.random_range(0.0f32..1.0) + if mask.data[k] { 0.5 } else { 0.0 })
            .collect();
        maps.push(AnomalyMap::new(map, side, side).unwrap());
        masks.push(mask);
    }
    (maps, masks)
}

fn metrics(c: &mut Criterion) {
    let (maps, masks) = maps_and_masks(32, 64);
    let mut g = c.benchmark_group("pro_score");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pro_score(&maps, &masks, 0.3, mode).unwrap())
        });
    }
    g.finish();
    c.bench_function("pixel_auroc", |b| b.iter(|| pixel_auroc(&maps, &masks).unwrap()));
}

fn toy_generation(c: &mut Criterion) {
    let cfg = ToyConfig {
        image_size: 128,
        ..Default::default()
    };
    let mut g = c.benchmark_group("toy_render_16");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::map_range(mode, 16, |i| render_toy_sample(&cfg, i as u64, ShiftKind::None, Some(DefectKind::Scratch))))
        });
    }
    g.finish();
}

fn batch_heatmaps(c: &mut Criterion) {
    let dev = Device::Cpu;
    let pyramid = |seed: u64| {
        let maps = [(16usize, 8usize), (24, 16), (32, 32)]
            .iter()
            .enumerate()
            .map(|(i, &(ch, side))| {
                let t = Tensor::randn(0f32, 1.0, (16, ch, side, side), &dev).unwrap();
                (t + (seed + i as u64) as f64).unwrap()
            })
            .collect();
        MultiScaleFeatures::new(maps, vec![3, 2, 1]).unwrap()
    };
    let (student, teacher) = (pyramid(0), pyramid(1));
    let mut g = c.benchmark_group("anomaly_map_batch16");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| anomaly_map(&student, &teacher, 128, 128, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, metrics, toy_generation, batch_heatmaps);
criterion_main!(benches);
