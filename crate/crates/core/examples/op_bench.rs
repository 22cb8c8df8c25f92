use std::time::Instant;
use slac_ts_core::numeric::mat::{gemm_nn, gemm_nt, gemm_tn, Mat};
use slac_ts_core::numeric::tape::Tape;

fn timeit(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{:28} {:8.2} ms", name, t0.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() {
    let n = 836;
    let d = 8;
    let dk = 4;
    let q = Mat::from_vec(n, dk, (0..n*dk).map(|i| (i as f64 * 0.001).sin()).collect());
    let k = Mat::from_vec(n, dk, (0..n*dk).map(|i| (i as f64 * 0.002).cos()).collect());
    let x = Mat::from_vec(n, d, (0..n*d).map(|i| (i as f64 * 0.003).sin()).collect());
    let w = Mat::from_vec(d, d, (0..d*d).map(|i| (i as f64 * 0.01).cos()).collect());
    let p = Mat::from_vec(n, n, vec![1.0 / n as f64; n * n]);
    let v = Mat::from_vec(n, dk, (0..n*dk).map(|i| (i as f64 * 0.004).sin()).collect());

    timeit("alloc zeros n*n", 20, || { let m = Mat::zeros(n, n); std::hint::black_box(m); });
    timeit("S = Q K^T (nt, k=4)", 20, || { let mut s = Mat::zeros(n, n); gemm_nt(1.0, &q, &k, &mut s); std::hint::black_box(&s); });
    timeit("X W (nn, inner 8)", 200, || { let mut o = Mat::zeros(n, d); gemm_nn(1.0, &x, &w, &mut o); std::hint::black_box(&o); });
    timeit("P V (nn, inner 4)", 10, || { let mut o = Mat::zeros(n, dk); gemm_nn(1.0, &p, &v, &mut o); std::hint::black_box(&o); });
    timeit("dV = P^T dO (tn, inner 4)", 10, || { let mut o = Mat::zeros(n, dk); gemm_tn(1.0, &p, &v, &mut o); std::hint::black_box(&o); });
    timeit("dS = dO V^T (nt, k=4)", 10, || { let mut s = Mat::zeros(n, n); gemm_nt(1.0, &v, &v, &mut s); std::hint::black_box(&s); });

    let mut tape = Tape::new();
    let sc = tape.constant(Mat::from_vec(n, n, (0..n*n).map(|i| ((i % 97) as f64) * 0.01).collect()));
    timeit("softmax_rows n x n", 10, || {
        let mut t2 = Tape::new();
        let c = t2.constant(Mat::from_vec(n, n, (0..n*n).map(|i| ((i % 97) as f64) * 0.01).collect()));
        let p = t2.softmax_rows(c);
        std::hint::black_box(t2.value(p).data[0]);
    });
    std::hint::black_box(tape.value(sc).data[0]);

    let mut v: Vec<f64> = (0..1_000_000).map(|i| -((i % 50) as f64) * 0.3).collect();
    let t0 = Instant::now();
    for _ in 0..10 {
        slac_ts_core::numeric::fastexp::exp_slice(&mut v);
        for x in v.iter_mut() { *x = -x.min(1.0) * 25.0; }
    }
    println!("fast exp_slice: {:.2} ns/elem", t0.elapsed().as_secs_f64() * 1e9 / 10e6 / 2.0);
    std::hint::black_box(v[7]);
}
// appended: raw exp throughput
