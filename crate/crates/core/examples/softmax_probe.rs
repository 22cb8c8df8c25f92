use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::{EncoderState, ModelConfig};
use slac_ts_core::numeric::fastexp::softmax_row;
use slac_ts_core::numeric::tape::Tape;
use slac_ts_core::synth;
use std::time::Instant;

fn main() {
    let spec = synth::SynthSpec {
        n_episodes: 4, n_phenotypes: 3, phenotype_proportions: vec![0.4, 0.35, 0.25],
        n_ts_features: 10, n_static_features: 5, missingness_rate: 0.3, separation: 3.0, seed: 42,
    };
    let cohort = synth::generate(&spec).unwrap();
    let (processed, _) = preprocess_cohort(&cohort, &synth::schema(&spec), &synth::ranges(&spec), PreprocessOptions::default()).unwrap();
    let config = ModelConfig { seed: 42, ..ModelConfig::default() };
    let state = EncoderState::new(config, processed.n_features(), processed.static_dim()).unwrap();
    let e = &processed.episodes[0];
    let times: Vec<f64> = e.triplets.iter().map(|t| t.time).collect();
    let features: Vec<usize> = e.triplets.iter().map(|t| t.feature).collect();
    let values: Vec<f64> = e.triplets.iter().map(|t| t.value).collect();

    let w_of = |name: &str| state.params.index_of(name).unwrap();
    let mut tape = Tape::new();
    let x = state.embed_triplets_node(&mut tape, &times, &features, &values).unwrap();
    let wq = tape.param(&state.params, w_of("block0_wq"));
    let bq = tape.param(&state.params, w_of("block0_bq"));
    let q0 = tape.matmul(x, wq);
    let q = tape.add_bias(q0, bq);
    let wk = tape.param(&state.params, w_of("block0_wk"));
    let k = tape.matmul(x, wk);
    let qh = tape.slice_cols(q, 0, 4);
    let kh = tape.slice_cols(k, 0, 4);
    let s = tape.matmul_nt(qh, kh, 0.5);
    let sv = tape.value(s).clone();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &sv.data { lo = lo.min(v); hi = hi.max(v); }
    println!("scores range [{lo:.3}, {hi:.3}], n = {}", sv.rows);

    // softmax on REAL values
    let reps = 10;
    let t0 = Instant::now();
    let mut keep = 0.0;
    for _ in 0..reps {
        let mut m = sv.clone();
        for r in 0..m.rows { softmax_row(m.row_slice_mut(r)); }
        keep += m.data[0];
    }
    println!("softmax real:      {:.2} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);

    // softmax on synthetic values, same shape
    let synth_m = slac_ts_core::numeric::mat::Mat::from_vec(sv.rows, sv.cols, (0..sv.rows*sv.cols).map(|i| ((i % 97) as f64) * 0.01).collect());
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut m = synth_m.clone();
        for r in 0..m.rows { softmax_row(m.row_slice_mut(r)); }
        keep += m.data[0];
    }
    println!("softmax synthetic: {:.2} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);
    println!("(keep {keep:.3})");
}
