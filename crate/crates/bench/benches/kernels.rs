use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dpilab::Tape;
use dpilab_bench::filled;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 128, 256] {
        let a = filled(&[128, n], 1);
        let b = filled(&[n, n], 2);
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let av = tape.leaf(a.clone());
                let bv = tape.leaf(b.clone());
                let y = tape.matmul(av, bv).unwrap();
                let l = tape.sum(y);
                black_box(tape.backward(l).unwrap());
            })
        });
    }
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for ch in [8usize, 16, 32] {
        let x = filled(&[ch, 8, 8], 3);
        let w = filled(&[ch, ch, 3, 3], 4);
        let b = filled(&[ch], 5);
        g.bench_with_input(BenchmarkId::new("forward_backward", ch), &ch, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.leaf(x.clone());
                let wv = tape.leaf(w.clone());
                let bv = tape.leaf(b.clone());
                let y = tape.conv2d(xv, wv, bv).unwrap();
                let l = tape.sum(y);
                black_box(tape.backward(l).unwrap());
            })
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, conv);
criterion_main!(benches);
