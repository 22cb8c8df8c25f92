use std::time::Instant;
use slac_ts_core::cluster::{adjusted_rand_index, kmeans};
use slac_ts_core::data::preprocess::{preprocess_cohort, PreprocessOptions};
use slac_ts_core::encoder::ModelConfig;
use slac_ts_core::forecast::pretrain;
use slac_ts_core::slac::run_slac;
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
    let t0 = Instant::now();
    let cohort = synth::generate(&spec).unwrap();
    let (processed, _) = preprocess_cohort(
        &cohort, &synth::schema(&spec), &synth::ranges(&spec), PreprocessOptions::default(),
    ).unwrap();
    println!("generate+preprocess: {:.1}s, {} triplets", t0.elapsed().as_secs_f64(), processed.n_triplets());
    let planted = synth::planted_labels(&processed).unwrap();

    let t0 = Instant::now();
    let baseline_points = synth::feature_mean_vectors(&processed);
    let baseline = kmeans(&baseline_points, 3, 10, 42).unwrap();
    let baseline_ari = adjusted_rand_index(&baseline.labels, &planted);
    println!("baseline kmeans: {:.1}s, ARI {:.4}", t0.elapsed().as_secs_f64(), baseline_ari);

    let config = ModelConfig {
        pretrain_max_epochs: 12,
        classifier_max_epochs: 8,
        patience: 3,
        iterations: 25,
        learning_rate: 1e-3,
        seed: 42,
        ..ModelConfig::default()
    };
    let t0 = Instant::now();
    let pre = pretrain(&processed, &config).unwrap();
    println!(
        "pretrain: {:.1}s, {} instances, epochs run {}, best epoch {}, best val {:.4}, first val {:.4}",
        t0.elapsed().as_secs_f64(), pre.n_instances, pre.history.len(), pre.best_epoch, pre.best_val_loss,
        pre.history.first().map(|h| h.val_loss).unwrap_or(f64::NAN)
    );

    // ARI of plain kmeans on pretrained reps
    let reps = pre.state.represent_cohort(&processed).unwrap();
    let km = kmeans(&reps, 3, 10, 1).unwrap();
    println!("pretrained-rep kmeans ARI: {:.4}", adjusted_rand_index(&km.labels, &planted));

    let t0 = Instant::now();
    let result = run_slac(&processed, pre.state).unwrap();
    let ari = adjusted_rand_index(&result.final_labels, &planted);
    println!(
        "slac loop: {:.1}s, {} iterations, final ARI {:.4} (baseline {:.4})",
        t0.elapsed().as_secs_f64(), result.records.len(), ari, baseline_ari
    );
    for r in &result.records {
        println!("  iter {}: agreement {:.4}, val_loss {:.4}, ss {:.3} ch {:.1} db {:.3}",
            r.iteration, r.agreement, r.classifier_val_loss, r.scores.silhouette, r.scores.calinski_harabasz, r.scores.davies_bouldin);
    }
}
