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

    let reps = 5;
    macro_rules! lap {
        ($name:expr, $t:ident) => {{
            let now = Instant::now();
            let dt = now.duration_since($t).as_secs_f64() * 1e3 / reps as f64;
            println!("{:24} {:7.2} ms", $name, dt);
            #[allow(unused_assignments)] { $t = now; }
        }};
    }
    let mut t = Instant::now();
    let mut keep = 0.0;
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = state.embed_triplets_node(&mut tape, &times, &features, &values).unwrap();
        keep += tape.value(x).data[0];
    }
    lap!("embed", t);
    // emulate block internals using tape ops directly with state params by name
    let w_of = |name: &str| state.params.index_of(name).unwrap();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = state.embed_triplets_node(&mut tape, &times, &features, &values).unwrap();
        let wq = tape.param(&state.params, w_of("block0_wq"));
        let bq = tape.param(&state.params, w_of("block0_bq"));
        let q0 = tape.matmul(x, wq);
        let q = tape.add_bias(q0, bq);
        keep += tape.value(q).data[0];
    }
    lap!("+ q proj", t);
    for _ in 0..reps {
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
        keep += tape.value(s).data[0];
    }
    lap!("+ scores (1 head)", t);
    for _ in 0..reps {
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
        let p = tape.softmax_rows(s);
        keep += tape.value(p).data[0];
    }
    lap!("+ softmax (1 head)", t);
    println!("(keep {keep})");
}
