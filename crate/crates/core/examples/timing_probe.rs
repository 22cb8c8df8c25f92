use std::time::Instant;
use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::{EncoderState, ModelConfig};
use slac_ts_core::forecast::{build_forecast_instances, instance_loss_node};
use slac_ts_core::numeric::tape::Tape;
use slac_ts_core::synth;

fn main() {
    let spec = synth::SynthSpec {
        n_episodes: 300,
        n_phenotypes: 3,
        phenotype_proportions: vec![0.4, 0.35, 0.25],
        n_ts_features: 10,
        n_static_features: 5,
        missingness_rate: 0.3,
        separation: 3.0,
        seed: 42,
    };
    let cohort = synth::generate(&spec).unwrap();
    let (processed, _) = preprocess_cohort(
        &cohort, &synth::schema(&spec), &synth::ranges(&spec), PreprocessOptions::default(),
    ).unwrap();
    let config = ModelConfig { seed: 42, ..ModelConfig::default() };
    let state = EncoderState::new(config, processed.n_features(), processed.static_dim()).unwrap();

    // single full-episode forward
    let e = &processed.episodes[0];
    println!("episode triplets: {}", e.triplets.len());
    let t0 = Instant::now();
    let reps = state.represent(e).unwrap();
    println!("represent (1 episode, cold): {:.1} ms, width {}", t0.elapsed().as_secs_f64()*1e3, reps.len());
    let t0 = Instant::now();
    for _ in 0..5 { state.represent(e).unwrap(); }
    println!("represent (1 episode, avg of 5): {:.1} ms", t0.elapsed().as_secs_f64()*1e3/5.0);

    // forward+backward on one full episode
    let instances = build_forecast_instances(&processed).unwrap();
    println!("instances: {}", instances.len());
    let inst = instances.iter().max_by_key(|i| i.input_len).unwrap();
    println!("biggest instance input_len {}", inst.input_len);
    let mut params = state.params.clone();
    let t0 = Instant::now();
    for _ in 0..3 {
        let mut tape = Tape::new();
        let node = instance_loss_node(&state, &mut tape, &processed, inst).unwrap();
        tape.backward(node, 1.0, &mut params).unwrap();
    }
    println!("fwd+bwd biggest instance: {:.1} ms", t0.elapsed().as_secs_f64()*1e3/3.0);

    // estimate epoch cost: forward+backward over all instances
    let t0 = Instant::now();
    let mut n = 0;
    for inst in instances.iter().take(100) {
        let mut tape = Tape::new();
        let node = instance_loss_node(&state, &mut tape, &processed, inst).unwrap();
        tape.backward(node, 1.0, &mut params).unwrap();
        n += 1;
    }
    let per = t0.elapsed().as_secs_f64()/n as f64;
    println!("fwd+bwd avg over {} instances: {:.1} ms -> est epoch (1200 train) {:.1} s", n, per*1e3, per*1200.0);
}
