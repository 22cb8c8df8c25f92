// Accounts per-op time by rebuilding the exact forward+backward of one
// instance with explicit timing around each tape call.
use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::{EncoderState, ModelConfig};
use slac_ts_core::forecast::{build_forecast_instances, instance_loss_node};
use slac_ts_core::numeric::tape::Tape;
use slac_ts_core::synth;
use std::time::Instant;

fn main() {
    let spec = synth::SynthSpec {
        n_episodes: 8, n_phenotypes: 3, phenotype_proportions: vec![0.4, 0.35, 0.25],
        n_ts_features: 10, n_static_features: 5, missingness_rate: 0.3, separation: 3.0, seed: 42,
    };
    let cohort = synth::generate(&spec).unwrap();
    let (processed, _) = preprocess_cohort(&cohort, &synth::schema(&spec), &synth::ranges(&spec), PreprocessOptions::default()).unwrap();
    let config = ModelConfig { seed: 42, ..ModelConfig::default() };
    let state = EncoderState::new(config, processed.n_features(), processed.static_dim()).unwrap();
    let instances = build_forecast_instances(&processed).unwrap();
    let inst = instances.iter().max_by_key(|i| i.input_len).unwrap();
    println!("n = {}", inst.input_len);
    let mut params = state.params.clone();

    // forward only
    let reps = 10;
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let node = instance_loss_node(&state, &mut tape, &processed, inst).unwrap();
        std::hint::black_box(tape.scalar(node));
    }
    let fwd = t0.elapsed().as_secs_f64()*1e3/reps as f64;
    println!("forward only:     {fwd:7.2} ms");

    // forward + backward
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let node = instance_loss_node(&state, &mut tape, &processed, inst).unwrap();
        tape.backward(node, 1.0, &mut params).unwrap();
    }
    let both = t0.elapsed().as_secs_f64()*1e3/reps as f64;
    println!("forward+backward: {both:7.2} ms (backward {:5.2})", both - fwd);
}
