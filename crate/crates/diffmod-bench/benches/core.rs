use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use diffmod::assign::{mink_ota, AssignConfig, ScheduleKind};
use diffmod::model::init_points;
use diffmod::numerics::tape::Tape;
use diffmod::numerics::tensor::Tensor;
use diffmod_bench::{desk_config, desk_model, desk_scene, field_at};

fn bench_matmul(c: &mut Criterion) {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::full(vec![500, 64], 0.5));
    let b = tape.leaf(&Tensor::full(vec![64, 64], 0.25));
    c.bench_function("matmul_500x64_64x64", |bch| {
        bch.iter(|| {
            let out = tape.matmul(black_box(a), black_box(b)).unwrap();
            black_box(tape.value(out)[0])
        })
    });
}

fn bench_scene_generation(c: &mut Criterion) {
    let cfg = desk_config();
    c.bench_function("generate_scene_128", |bch| {
        bch.iter(|| black_box(diffmod::scenegen::generate_scene(&cfg.scene).unwrap().frames.len()))
    });
}

fn bench_feature_field(c: &mut Criterion) {
    let cfg = desk_config();
    let scene = desk_scene(&cfg);
    c.bench_function("feature_field_128", |bch| {
        bch.iter(|| black_box(field_at(&scene, 5).data.len()))
    });
}

fn bench_mink_ota(c: &mut Criterion) {
    let pts = init_points(500, 128, 128, 3);
    let targets: Vec<(f64, f64)> = (0..6).map(|i| (20.0 + 15.0 * i as f64, 64.0)).collect();
    let acfg = AssignConfig {
        k: 10,
        level: 1,
        levels: 4,
        r: 4.0,
        schedule: ScheduleKind::Exponential,
    };
    c.bench_function("mink_ota_500x6_level1", |bch| {
        bch.iter(|| {
            let m = mink_ota(black_box(pts.data()), black_box(&targets), &acfg).unwrap();
            black_box(m.matched_pairs().len())
        })
    });
}

fn bench_forward_frame(c: &mut Criterion) {
    let cfg = desk_config();
    let scene = desk_scene(&cfg);
    let model = desk_model(&cfg);
    let field = field_at(&scene, 5);
    let pts = init_points(500, 128, 128, 3);
    c.bench_function("forward_frame_desk_scale", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let grid = model.region_grid(128, 128);
            let hidden = model.initial_hidden(&mut tape, &vars, &grid).unwrap();
            let (outs, _) = model
                .forward_frame(&mut tape, &vars, &field, &pts, hidden, None)
                .unwrap();
            black_box(tape.value(outs.last().unwrap().probs)[0])
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_matmul, bench_scene_generation, bench_feature_field, bench_mink_ota, bench_forward_frame
}
criterion_main!(benches);
