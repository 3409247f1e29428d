use ccn_bench::{desk_arch, desk_model, roi_batch};
use ccn_core::head::{total_loss, Target};
use ccn_core::synthcam::{crop_frame, generate_dataset, make_shape, render, GenConfig, Placement, Pose};
use ccn_core::trainer::{image_batch, HeadMode};
use ccn_core::{BBox, Graph};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn heads(c: &mut Criterion) {
    let mut group = c.benchmark_group("head_forward_backward");
    for mode in [HeadMode::Ccn, HeadMode::Baseline] {
        let arch = desk_arch(mode);
        let model = desk_model(mode);
        let roi = roi_batch(&arch, 16, 1);
        let cfg = ccn_core::LossConfig::for_views(arch.n_views);
        let target = Target::object(1, BBox::new(16.0, 16.0, 20.0, 20.0), Some(0.5));
        group.bench_with_input(BenchmarkId::from_parameter(mode), &roi, |b, roi| {
            b.iter(|| {
                let g = Graph::new();
                let bound = model.bind(&g, true).unwrap();
                let scores = bound.head(g.constant(roi.clone())).unwrap();
                let mut loss = None;
                for s in &scores {
                    let l = total_loss(s, &target, &crop_frame(32), &cfg).unwrap().total;
                    loss = Some(match loss {
                        None => l,
                        Some(acc) => l.add(acc).unwrap(),
                    });
                }
                black_box(g.backward(loss.unwrap()).unwrap());
            })
        });
    }
    group.finish();
}

fn full_forward(c: &mut Criterion) {
    let data = generate_dataset(&GenConfig { samples_per_cell: 1, ..GenConfig::default() }).unwrap();
    let batch: Vec<_> = data.train.samples.iter().take(16).collect();
    let images = image_batch(&batch, 32).unwrap();
    let mut group = c.benchmark_group("model_forward");
    for mode in [HeadMode::Ccn, HeadMode::Baseline] {
        let model = desk_model(mode);
        group.bench_function(BenchmarkId::from_parameter(mode), |b| {
            b.iter(|| {
                let g = Graph::new();
                let bound = model.bind(&g, false).unwrap();
                black_box(bound.forward(g.constant(images.clone())).unwrap().len())
            })
        });
    }
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let shape = make_shape(1, 0, 24, 32).unwrap();
    let pose = Pose { azimuth: 0.7, elevation_jitter: 0.0, placement: Placement { offset_x: 0.0, offset_y: 0.0, scale: 20.0 } };
    c.bench_function("render_32", |b| b.iter(|| black_box(render(&shape, &pose, 0.03, 5, 32))));
}

criterion_group!(benches, heads, full_forward, rendering);
criterion_main!(benches);
