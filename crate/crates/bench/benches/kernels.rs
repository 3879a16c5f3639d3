use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use std::hint::black_box;

use subpipe_bench::desk_fixture;
use subpipe_core::codec::{decode_backward, decode_forward, encode_backward, encode_forward};
use subpipe_core::linalg::qr_thin;
use subpipe_core::model::{backward_block, forward_block};
use subpipe_core::CompressedFrame;

fn matmul(c: &mut Criterion) {
    let f = desk_fixture();
    let p = &f.model.layers[0];
    let x = f.boundary.to_matrix();
    let mut group = c.benchmark_group("matmul");
    group.throughput(Throughput::Elements(
        (x.rows() * p.w1.rows() * p.w1.cols()) as u64,
    ));
    group.bench_function("x_w1", |bench| {
        bench.iter(|| black_box(&x).matmul(black_box(&p.w1)).unwrap())
    });
    group.bench_function("h_w1t", |bench| {
        let h = x.matmul(&p.w1).unwrap();
        bench.iter(|| black_box(&h).matmul_t(black_box(&p.w1)).unwrap())
    });
    group.bench_function("xt_x", |bench| {
        bench.iter(|| black_box(&x).t_matmul(black_box(&x)).unwrap())
    });
    group.finish();
}

fn qr(c: &mut Criterion) {
    let f = desk_fixture();
    let tall = f.model.layers[0].wq.clone();
    c.bench_function("qr_thin_basis", |bench| {
        bench.iter(|| qr_thin(black_box(f.subspace.basis())).unwrap())
    });
    c.bench_function("qr_thin_square", |bench| {
        bench.iter(|| qr_thin(black_box(&tall)).unwrap())
    });
}

fn codec(c: &mut Criterion) {
    let f = desk_fixture();
    let emb = &f.model.embeddings;
    let mut group = c.benchmark_group("codec");
    group.throughput(Throughput::Bytes((f.boundary.data().len() * 4) as u64));
    group.bench_function("encode_forward", |bench| {
        bench.iter(|| {
            encode_forward(black_box(&f.boundary), &f.tokens, 0, 0, emb, &f.subspace).unwrap()
        })
    });
    let frame = encode_forward(&f.boundary, &f.tokens, 0, 0, emb, &f.subspace).unwrap();
    group.bench_function("decode_forward", |bench| {
        bench.iter(|| decode_forward(black_box(&frame), emb, &f.subspace).unwrap())
    });
    group.bench_function("encode_backward", |bench| {
        bench.iter(|| encode_backward(black_box(&f.boundary), 0, 0, &f.subspace).unwrap())
    });
    let back = encode_backward(&f.boundary, 0, 0, &f.subspace).unwrap();
    group.bench_function("decode_backward", |bench| {
        bench.iter(|| decode_backward(black_box(&back), &f.subspace).unwrap())
    });
    let bytes = frame.serialize();
    group.bench_function("serialize", |bench| {
        bench.iter(|| black_box(&frame).serialize())
    });
    group.bench_function("deserialize", |bench| {
        bench.iter(|| CompressedFrame::deserialize(black_box(&bytes)).unwrap())
    });
    group.finish();
}

fn block(c: &mut Criterion) {
    let f = desk_fixture();
    let p = &f.model.layers[0];
    let mut group = c.benchmark_group("block");
    group.throughput(Throughput::Elements((f.b * f.n) as u64));
    group.bench_function("forward", |bench| {
        bench.iter(|| forward_block(p, 0, black_box(&f.input)).unwrap())
    });
    let (y, stash) = forward_block(p, 0, &f.input).unwrap();
    group.bench_function("backward", |bench| {
        bench.iter(|| backward_block(p, &stash, black_box(&y)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, matmul, qr, codec, block);
criterion_main!(benches);
