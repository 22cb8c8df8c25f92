use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::{EncoderState, ModelConfig};
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

    // rebuild the block internals by hand to inspect the scores
    let mut tape = Tape::new();
    let x = state.embed_triplets_node(&mut tape, &times, &features, &values).unwrap();
    let xv = tape.value(x);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &xv.data { lo = lo.min(v); hi = hi.max(v); }
    println!("embedding range: [{lo:.2}, {hi:.2}]");

    // time just tanh on n x 16
    let big = tape.constant(slac_ts_core::numeric::mat::Mat::from_vec(836, 16, vec![0.3; 836*16]));
    let t0 = Instant::now();
    for _ in 0..10 { let t = tape.tanh(big); std::hint::black_box(tape.value(t).data[0]); }
    println!("tanh n x 16: {:.2} ms", t0.elapsed().as_secs_f64()*1e2);

    let t0 = Instant::now();
    for _ in 0..10 { let t = tape.tanh(x); std::hint::black_box(tape.value(t).data[0]); }
    println!("tanh n x 8 (real values): {:.2} ms", t0.elapsed().as_secs_f64()*1e2);
}
