use std::time::Instant;
use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::{EncoderState, ModelConfig};
use slac_ts_core::numeric::tape::Tape;
use slac_ts_core::synth;

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
    let n = e.triplets.len();
    println!("n = {n}");
    let times: Vec<f64> = e.triplets.iter().map(|t| t.time).collect();
    let features: Vec<usize> = e.triplets.iter().map(|t| t.feature).collect();
    let values: Vec<f64> = e.triplets.iter().map(|t| t.value).collect();

    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = state.embed_triplets_node(&mut tape, &times, &features, &values).unwrap();
        std::hint::black_box(tape.value(x).data[0]);
    }
    println!("embed only:        {:6.1} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let (et, _) = state.encode_triplets_node(&mut tape, &times, &features, &values).unwrap();
        std::hint::black_box(tape.value(et).data[0]);
    }
    println!("embed+blocks+fuse: {:6.1} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(state.represent(e).unwrap()[0]);
    }
    println!("represent:         {:6.1} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);
}
