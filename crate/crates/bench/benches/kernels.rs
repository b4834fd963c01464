use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dmoe_core::balance::AssignmentTracker;
use dmoe_core::data::{jitter, JitterMode, JitterSpec};
use dmoe_core::model::{Architecture, LayerSpec, Model, ModelKind};
use dmoe_core::numeric::{matmul, Matrix, Rng};

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap()
}

fn bench_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("step");
    group.sample_size(20);
    let l = LayerSpec::new;
    for (name, arch) in [
        ("4x20-4x20", Architecture::two_layer(1296, 10, l(4, 20, 20), l(4, 20, 20))),
        ("4x100-4x100", Architecture::two_layer(1296, 10, l(4, 100, 50), l(4, 100, 50))),
    ] {
        let mut rng = Rng::new(1);
        let model = Model::build(ModelKind::Dmoe, arch, &mut rng).unwrap();
        let x = random(&mut rng, 64, 1296);
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let tracker = AssignmentTracker::new(&model.gate_widths(), 1.0).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", name), &x, |b, x| {
            b.iter(|| model.infer(black_box(x)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", name), &x, |b, x| {
            b.iter(|| model.step(black_box(x), &labels, Some(&tracker)).unwrap())
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let a = random(&mut rng, 64, 1296);
    let b = random(&mut rng, 1296, 100);
    c.bench_function("matmul 64x1296x100", |bench| bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap()));
}

fn bench_constraint(c: &mut Criterion) {
    let mut tracker = AssignmentTracker::new(&[16], 1.0).unwrap();
    for i in 0..100 {
        let mut g = vec![0.0; 16];
        g[i % 3] = 1.0;
        tracker.update_totals(0, &g);
    }
    let g: Vec<f64> = (1..=16).map(|v| v as f64 / 136.0).collect();
    c.bench_function("apply_constraint 16 experts", |b| {
        b.iter(|| tracker.apply_constraint(0, black_box(&g)))
    });
    c.bench_function("update_totals 16 experts", |b| {
        let mut t = tracker.clone();
        b.iter(|| t.update_totals(0, black_box(&g)))
    });
}

fn bench_jitter(c: &mut Criterion) {
    let image: Vec<f64> = (0..784).map(|i| (i % 255) as f64 / 255.0).collect();
    let spec = JitterSpec::mnist(3);
    c.bench_function("jitter 28x28 onto 36x36", |b| b.iter(|| jitter(black_box(&image), 2, -3).unwrap()));
    c.bench_function("draw_offset", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            spec.draw_offset(JitterMode::PerEpoch(4), black_box(i))
        })
    });
}

criterion_group!(benches, bench_step, bench_matmul, bench_constraint, bench_jitter);
criterion_main!(benches);
