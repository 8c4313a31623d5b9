use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sembed::graph::Graph;
use sembed::kernels::matmul_ab;
use sembed::rng::RngStream;
use sembed::tensor::Tensor;

fn random_values(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = RngStream::new(seed, 0);
    (0..n).map(|_| rng.next_normal() as f32).collect()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &(m, k, n) in &[(64usize, 64usize, 64usize), (640, 64, 256), (512, 64, 128)] {
        let a = random_values(m * k, 1);
        let b = random_values(k * n, 2);
        group.bench_function(format!("{m}x{k}x{n}"), |bench| {
            bench.iter(|| {
                let mut out = vec![0.0f32; m * n];
                matmul_ab(black_box(&a), black_box(&b), &mut out, m, k, n);
                out
            })
        });
    }
    group.finish();
}

fn bench_softmax_and_layer_norm(c: &mut Criterion) {
    let rows = 512;
    let cols = 64;
    let values = random_values(rows * cols, 3);

    c.bench_function("softmax_rows_512x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g
                .input(&Tensor::from_values(vec![rows, cols], values.clone()).unwrap())
                .unwrap();
            g.softmax_rows(x).unwrap()
        })
    });

    c.bench_function("layer_norm_512x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g
                .input(&Tensor::from_values(vec![rows, cols], values.clone()).unwrap())
                .unwrap();
            let gain = g.input(&Tensor::from_values(vec![cols], vec![1.0; cols]).unwrap()).unwrap();
            let bias = g.input(&Tensor::zeros(vec![cols]).unwrap()).unwrap();
            g.layer_norm(x, gain, bias, 1e-5).unwrap()
        })
    });
}

fn bench_dropout(c: &mut Criterion) {
    let values = random_values(32 * 16 * 64, 4);
    c.bench_function("dropout_32x16x64_p0.825", |bench| {
        bench.iter(|| {
            let mut g = Graph::<f32>::new();
            let x = g
                .input(&Tensor::from_values(vec![32, 16, 64], values.clone()).unwrap().with_grad())
                .unwrap();
            let mut rng = RngStream::new(9, 9);
            g.dropout(x, 0.825, &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, bench_matmul, bench_softmax_and_layer_norm, bench_dropout);
criterion_main!(benches);
