//! Attention encoder: maps (static vector, triplet set) to a fixed-width
//! representation.
//!
//! A triplet embeds as the sum of a feature-table row and two one-to-many
//! FFN embeddings of its scalar value and time. The embeddings pass through
//! M residual self-attention blocks, and a fusion attention pools the set
//! into one vector e_T. The static vector embeds through its own FFN into
//! e_d; the representation used downstream is [e_d ; e_T] (configurable to
//! e_T alone).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::EpisodeRecord;
use crate::error::{Result, SlacError};
use crate::numeric::mat::Mat;
use crate::numeric::params::ParamSet;
use crate::numeric::tape::{NodeId, Tape};
use crate::numeric::weights_io::{self, WeightsManifest, WEIGHTS_FORMAT_VERSION};
use crate::util::rng_for;

/// Times are scaled by the horizon before the time CVE so its tanh layer
/// stays in a trainable regime.
const TIME_SCALE: f64 = 1.0 / crate::data::HORIZON_HOURS as f64;

const INIT_STREAM: u64 = 0x1217;

/// Which vector feeds clustering and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReprMode {
    /// [e_d ; e_T], width 2d.
    #[default]
    ConcatStaticTemporal,
    /// e_T alone, width d (ablation).
    TemporalOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Transformer block count M.
    pub blocks: usize,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Attention head count h.
    pub heads: usize,
    /// Cluster count K.
    pub clusters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub pretrain_max_epochs: usize,
    /// Epoch cap per classifier iteration.
    pub classifier_max_epochs: usize,
    /// Early-stopping patience (epochs without a new validation minimum).
    pub patience: usize,
    /// Pseudo-label / classifier alternations.
    pub iterations: usize,
    pub kmeans_restarts: usize,
    pub representation: ReprMode,
    /// Split forecast instances by episode instead of individually.
    pub episode_level_split: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 1,
            embed_dim: 8,
            heads: 2,
            clusters: 3,
            batch_size: 8,
            learning_rate: 5e-4,
            pretrain_max_epochs: 50,
            classifier_max_epochs: 200,
            patience: 10,
            iterations: 25,
            kmeans_restarts: 10,
            representation: ReprMode::ConcatStaticTemporal,
            episode_level_split: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(SlacError::InvalidConfig("blocks (M) must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(SlacError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.clusters < 2 {
            return Err(SlacError::InvalidConfig("clusters (K) must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(SlacError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash over the semantic fields, embedded in artifacts so stale
    /// inputs are refused.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_lower(&hasher.finalize()[..8])
    }
}

fn hex_lower(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn vocab_hash(vocab: &[String]) -> String {
    let mut hasher = Sha256::new();
    for name in vocab {
        hasher.update(name.as_bytes());
        hasher.update([0]);
    }
    hex_lower(&hasher.finalize()[..8])
}

#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    f1w: usize,
    f1b: usize,
    f2w: usize,
    f2b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    feat_table: usize,
    cve_val: [usize; 4],
    cve_time: [usize; 4],
    static_ffn: [usize; 4],
    blocks: Vec<BlockLayout>,
    fusion_w: usize,
    fusion_b: usize,
    fusion_u: usize,
    forecast_w: usize,
    forecast_b: usize,
    classifier_w: usize,
    classifier_b: usize,
}

/// All learned parameters plus the shape context they were built for.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub config: ModelConfig,
    pub n_features: usize,
    pub static_dim: usize,
    pub params: ParamSet,
    layout: Layout,
}

fn cve_hidden(d: usize) -> usize {
    (d as f64).sqrt().ceil() as usize
}

fn build_params(
    config: &ModelConfig,
    n_features: usize,
    static_dim: usize,
    params: &mut ParamSet,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Layout {
    let d = config.embed_dim;
    let q = cve_hidden(d);
    let feat_table = params.push_weight("feat_table", n_features.max(1), d, rng);
    let cve = |params: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng, prefix: &str| {
        [
            params.push_weight(&format!("{prefix}_w1"), 1, q, rng),
            params.push_zeros(&format!("{prefix}_b1"), 1, q),
            params.push_weight(&format!("{prefix}_w2"), q, d, rng),
            params.push_zeros(&format!("{prefix}_b2"), 1, d),
        ]
    };
    let cve_val = cve(params, rng, "cve_val");
    let cve_time = cve(params, rng, "cve_time");
    let static_ffn = [
        params.push_weight("static_w1", static_dim.max(1), d, rng),
        params.push_zeros("static_b1", 1, d),
        params.push_weight("static_w2", d, d, rng),
        params.push_zeros("static_b2", 1, d),
    ];
    let mut blocks = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        blocks.push(BlockLayout {
            wq: params.push_weight(&format!("block{b}_wq"), d, d, rng),
            bq: params.push_zeros(&format!("block{b}_bq"), 1, d),
            wk: params.push_weight(&format!("block{b}_wk"), d, d, rng),
            wv: params.push_weight(&format!("block{b}_wv"), d, d, rng),
            bv: params.push_zeros(&format!("block{b}_bv"), 1, d),
            wo: params.push_weight(&format!("block{b}_wo"), d, d, rng),
            bo: params.push_zeros(&format!("block{b}_bo"), 1, d),
            f1w: params.push_weight(&format!("block{b}_ffn_w1"), d, 2 * d, rng),
            f1b: params.push_zeros(&format!("block{b}_ffn_b1"), 1, 2 * d),
            f2w: params.push_weight(&format!("block{b}_ffn_w2"), 2 * d, d, rng),
            f2b: params.push_zeros(&format!("block{b}_ffn_b2"), 1, d),
        });
    }
    let fusion_w = params.push_weight("fusion_w", d, d, rng);
    let fusion_b = params.push_zeros("fusion_b", 1, d);
    let fusion_u = params.push_weight("fusion_u", d, 1, rng);
    let forecast_w = params.push_weight("forecast_w", 2 * d, n_features.max(1), rng);
    let forecast_b = params.push_zeros("forecast_b", 1, n_features.max(1));
    let repr_width = match config.representation {
        ReprMode::ConcatStaticTemporal => 2 * d,
        ReprMode::TemporalOnly => d,
    };
    // zero-init head: the softmax starts exactly uniform
    let classifier_w = params.push_zeros("classifier_w", repr_width, config.clusters);
    let classifier_b = params.push_zeros("classifier_b", 1, config.clusters);
    Layout {
        feat_table,
        cve_val,
        cve_time,
        static_ffn,
        blocks,
        fusion_w,
        fusion_b,
        fusion_u,
        forecast_w,
        forecast_b,
        classifier_w,
        classifier_b,
    }
}

/// Node handles produced by one episode forward pass.
pub struct ReprNodes {
    /// The downstream representation (1 x repr width).
    pub rep: NodeId,
    /// e_d (1 x d).
    pub e_static: NodeId,
    /// e_T (1 x d).
    pub e_temporal: NodeId,
    /// [e_d ; e_T] (1 x 2d), the forecast-head input.
    pub concat: NodeId,
    /// Fusion attention weights (1 x n).
    pub alpha: NodeId,
}

impl EncoderState {
    pub fn new(config: ModelConfig, n_features: usize, static_dim: usize) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(SlacError::InvalidConfig("encoder needs at least one feature".into()));
        }
        let mut rng = rng_for(config.seed, INIT_STREAM);
        let mut params = ParamSet::default();
        let layout = build_params(&config, n_features, static_dim, &mut params, &mut rng);
        Ok(EncoderState {
            config,
            n_features,
            static_dim,
            params,
            layout,
        })
    }

    pub fn repr_width(&self) -> usize {
        match self.config.representation {
            ReprMode::ConcatStaticTemporal => 2 * self.config.embed_dim,
            ReprMode::TemporalOnly => self.config.embed_dim,
        }
    }

    fn cve(&self, tape: &mut Tape, scalars: NodeId, which: &[usize; 4]) -> NodeId {
        let w1 = tape.param(&self.params, which[0]);
        let b1 = tape.param(&self.params, which[1]);
        let w2 = tape.param(&self.params, which[2]);
        let b2 = tape.param(&self.params, which[3]);
        let h = tape.matmul(scalars, w1);
        let h = tape.add_bias_consuming(h, b1);
        let h = tape.tanh_consuming(h);
        let out = tape.matmul(h, w2);
        tape.add_bias_consuming(out, b2)
    }

    /// Initial triplet embeddings: e = e_feature + CVE(value) + CVE(time)
    /// for a parallel list of triplets. Output is n x d.
    pub fn embed_triplets_node(
        &self,
        tape: &mut Tape,
        times: &[f64],
        features: &[usize],
        values: &[f64],
    ) -> Result<NodeId> {
        if times.is_empty() {
            return Err(SlacError::EmptyEpisode("<node build>".into()));
        }
        if let Some(&bad) = features.iter().find(|&&f| f >= self.n_features) {
            return Err(SlacError::ShapeMismatch {
                op: "embed_triplets".into(),
                detail: format!("feature index {bad} out of range (|F| = {})", self.n_features),
            });
        }
        let table = tape.param(&self.params, self.layout.feat_table);
        let e_f = tape.gather(table, features.to_vec());
        let vals = tape.constant(Mat::col(values));
        let e_v = self.cve(tape, vals, &self.layout.cve_val);
        let scaled_times: Vec<f64> = times.iter().map(|t| t * TIME_SCALE).collect();
        let ts = tape.constant(Mat::col(&scaled_times));
        let e_t = self.cve(tape, ts, &self.layout.cve_time);
        let sum = tape.add(e_f, e_v);
        Ok(tape.add(sum, e_t))
    }

    fn block(&self, tape: &mut Tape, x: NodeId, layout: &BlockLayout) -> NodeId {
        let d = self.config.embed_dim;
        let h = self.config.heads;
        let dk = d / h;
        let wq = tape.param(&self.params, layout.wq);
        let bq = tape.param(&self.params, layout.bq);
        let wk = tape.param(&self.params, layout.wk);
        let wv = tape.param(&self.params, layout.wv);
        let bv = tape.param(&self.params, layout.bv);
        let q = tape.matmul(x, wq);
        let q = tape.add_bias_consuming(q, bq);
        // no key bias: softmax is invariant to the constant per-row shift a
        // key bias would add, so the parameter would be gradient-free
        let k = tape.matmul(x, wk);
        let v = tape.matmul(x, wv);
        let v = tape.add_bias_consuming(v, bv);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(h);
        for head in 0..h {
            let (from, to) = (head * dk, (head + 1) * dk);
            let qh = tape.slice_cols(q, from, to);
            let kh = tape.slice_cols(k, from, to);
            let vh = tape.slice_cols(v, from, to);
            let scores = tape.matmul_nt(qh, kh, scale);
            let probs = tape.softmax_rows_consuming(scores);
            head_outputs.push(tape.matmul(probs, vh));
        }
        let mut concat = head_outputs[0];
        for &o in &head_outputs[1..] {
            concat = tape.concat_cols(concat, o);
        }
        let wo = tape.param(&self.params, layout.wo);
        let bo = tape.param(&self.params, layout.bo);
        let proj = tape.matmul(concat, wo);
        let proj = tape.add_bias_consuming(proj, bo);
        let x = tape.add(x, proj); // residual, no normalization layers

        let f1w = tape.param(&self.params, layout.f1w);
        let f1b = tape.param(&self.params, layout.f1b);
        let f2w = tape.param(&self.params, layout.f2w);
        let f2b = tape.param(&self.params, layout.f2b);
        let hid = tape.matmul(x, f1w);
        let hid = tape.add_bias_consuming(hid, f1b);
        let hid = tape.tanh_consuming(hid);
        let ffn = tape.matmul(hid, f2w);
        let ffn = tape.add_bias_consuming(ffn, f2b);
        tape.add(x, ffn)
    }

    /// Contextualize triplet embeddings through the M blocks and pool with
    /// fusion attention. Returns (e_T node, alpha node).
    pub fn encode_triplets_node(
        &self,
        tape: &mut Tape,
        times: &[f64],
        features: &[usize],
        values: &[f64],
    ) -> Result<(NodeId, NodeId)> {
        let mut x = self.embed_triplets_node(tape, times, features, values)?;
        for b in 0..self.config.blocks {
            let layout = self.layout.blocks[b];
            x = self.block(tape, x, &layout);
        }
        // fusion: alpha = softmax(u . tanh(Wa c_i + ba)), e_T = sum alpha c_i
        let wa = tape.param(&self.params, self.layout.fusion_w);
        let ba = tape.param(&self.params, self.layout.fusion_b);
        let u = tape.param(&self.params, self.layout.fusion_u);
        let hid = tape.matmul(x, wa);
        let hid = tape.add_bias_consuming(hid, ba);
        let hid = tape.tanh_consuming(hid);
        let scores = tape.matmul(hid, u); // n x 1
        let scores_row = tape.transpose(scores); // 1 x n
        let alpha = tape.softmax_rows(scores_row);
        let e_t = tape.matmul(alpha, x); // 1 x d
        Ok((e_t, alpha))
    }

    /// e_d = FFN(static vector), 1 x d.
    pub fn embed_static_node(&self, tape: &mut Tape, static_vector: &[f64]) -> Result<NodeId> {
        if static_vector.len() != self.static_dim {
            return Err(SlacError::ShapeMismatch {
                op: "embed_static".into(),
                detail: format!(
                    "static width {} != expected {}",
                    static_vector.len(),
                    self.static_dim
                ),
            });
        }
        let x = tape.constant(Mat::row(static_vector));
        let w1 = tape.param(&self.params, self.layout.static_ffn[0]);
        let b1 = tape.param(&self.params, self.layout.static_ffn[1]);
        let w2 = tape.param(&self.params, self.layout.static_ffn[2]);
        let b2 = tape.param(&self.params, self.layout.static_ffn[3]);
        let h = tape.matmul(x, w1);
        let h = tape.add_bias_consuming(h, b1);
        let h = tape.tanh_consuming(h);
        let out = tape.matmul(h, w2);
        Ok(tape.add_bias_consuming(out, b2))
    }

    /// Full forward pass over the first `n_triplets` triplets (the episode's
    /// list must be time-sorted when a prefix is requested).
    pub fn represent_node(
        &self,
        tape: &mut Tape,
        episode: &EpisodeRecord,
        n_triplets: usize,
    ) -> Result<ReprNodes> {
        if n_triplets == 0 || episode.triplets.is_empty() {
            return Err(SlacError::EmptyEpisode(episode.episode_id.clone()));
        }
        let take = n_triplets.min(episode.triplets.len());
        let mut times = Vec::with_capacity(take);
        let mut features = Vec::with_capacity(take);
        let mut values = Vec::with_capacity(take);
        for t in &episode.triplets[..take] {
            times.push(t.time);
            features.push(t.feature);
            values.push(t.value);
        }
        let (e_t, alpha) = self.encode_triplets_node(tape, &times, &features, &values)?;
        let e_d = self.embed_static_node(tape, &episode.static_vector)?;
        let concat = tape.concat_cols(e_d, e_t);
        let rep = match self.config.representation {
            ReprMode::ConcatStaticTemporal => concat,
            ReprMode::TemporalOnly => e_t,
        };
        Ok(ReprNodes {
            rep,
            e_static: e_d,
            e_temporal: e_t,
            concat,
            alpha,
        })
    }

    /// Classifier logits for a representation node (1 x K).
    pub fn classifier_logits_node(&self, tape: &mut Tape, rep: NodeId) -> NodeId {
        let w = tape.param(&self.params, self.layout.classifier_w);
        let b = tape.param(&self.params, self.layout.classifier_b);
        let logits = tape.matmul(rep, w);
        tape.add_bias(logits, b)
    }

    /// Forecast head z = Ws [e_d ; e_T] + bs (1 x |F|), no activation.
    pub fn forecast_node(&self, tape: &mut Tape, concat: NodeId) -> NodeId {
        let w = tape.param(&self.params, self.layout.forecast_w);
        let b = tape.param(&self.params, self.layout.forecast_b);
        let z = tape.matmul(concat, w);
        tape.add_bias(z, b)
    }

    // ------------------------------------------------------------------
    // pure-value conveniences (build a throwaway tape, read the output)
    // ------------------------------------------------------------------

    /// Embedding of a single triplet (length d).
    pub fn embed_triplet(&self, triplet: &crate::data::ObservationTriplet) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let node = self.embed_triplets_node(
            &mut tape,
            &[triplet.time],
            &[triplet.feature],
            &[triplet.value],
        )?;
        Ok(tape.value(node).data.clone())
    }

    /// (e_T, fusion attention weights) for an episode.
    pub fn encode_episode(&self, episode: &EpisodeRecord) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let nodes = self.represent_node(&mut tape, episode, episode.triplets.len())?;
        Ok((
            tape.value(nodes.e_temporal).data.clone(),
            tape.value(nodes.alpha).data.clone(),
        ))
    }

    /// e_d for a static vector (length d).
    pub fn embed_static(&self, static_vector: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let node = self.embed_static_node(&mut tape, static_vector)?;
        Ok(tape.value(node).data.clone())
    }

    /// The representation fed to clustering and the classifier.
    pub fn represent(&self, episode: &EpisodeRecord) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let nodes = self.represent_node(&mut tape, episode, episode.triplets.len())?;
        Ok(tape.value(nodes.rep).data.clone())
    }

    /// Representations for a whole cohort, episode order preserved.
    pub fn represent_cohort(&self, cohort: &crate::data::CohortDataset) -> Result<Vec<Vec<f64>>> {
        cohort.episodes.iter().map(|e| self.represent(e)).collect()
    }

    /// Same weights with a freshly shaped (zero) classifier head for a new
    /// cluster count, so one pretraining can serve several K.
    pub fn with_clusters(&self, clusters: usize) -> Result<EncoderState> {
        let config = ModelConfig {
            clusters,
            ..self.config.clone()
        };
        let mut out = EncoderState::new(config, self.n_features, self.static_dim)?;
        for tensor in &mut out.params.tensors {
            if tensor.name.starts_with("classifier_") {
                continue;
            }
            let src = self
                .params
                .tensors
                .iter()
                .find(|t| t.name == tensor.name)
                .ok_or_else(|| SlacError::StaleWeights(format!("missing tensor {}", tensor.name)))?;
            tensor.value = src.value.clone();
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // persistence
    // ------------------------------------------------------------------

    pub fn save(&self, dir: &std::path::Path, vocab: &[String]) -> Result<()> {
        let manifest = WeightsManifest {
            format_version: WEIGHTS_FORMAT_VERSION,
            seed: self.config.seed,
            config_hash: self.config.hash(),
            vocab_hash: vocab_hash(vocab),
            context: serde_json::json!({
                "config": self.config,
                "n_features": self.n_features,
                "static_dim": self.static_dim,
            }),
            tensors: vec![],
        };
        weights_io::save_weights(dir, &self.params, manifest)
    }

    /// Load weights saved by `save`, refusing stale files whose config or
    /// vocabulary hash does not match the current cohort.
    pub fn load(dir: &std::path::Path, vocab: &[String]) -> Result<Self> {
        let (params, manifest) = weights_io::load_weights(dir)?;
        let config: ModelConfig = serde_json::from_value(manifest.context["config"].clone())?;
        let n_features: usize = serde_json::from_value(manifest.context["n_features"].clone())?;
        let static_dim: usize = serde_json::from_value(manifest.context["static_dim"].clone())?;
        if manifest.vocab_hash != vocab_hash(vocab) {
            return Err(SlacError::StaleWeights(
                "feature vocabulary changed since these weights were trained".into(),
            ));
        }
        let skeleton = EncoderState::new(config.clone(), n_features, static_dim)?;
        if skeleton.params.tensors.len() != params.tensors.len()
            || skeleton
                .params
                .tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| {
                    a.name != b.name
                        || a.value.rows != b.value.rows
                        || a.value.cols != b.value.cols
                })
        {
            return Err(SlacError::StaleWeights(
                "tensor layout does not match the configured model".into(),
            ));
        }
        Ok(EncoderState {
            params,
            ..skeleton
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservationTriplet;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use rand::SeedableRng;

    fn test_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            heads: 2,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn random_episode(n: usize, n_features: usize, static_dim: usize, seed: u64) -> EpisodeRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut triplets: Vec<ObservationTriplet> = (0..n)
            .map(|_| ObservationTriplet {
                time: rng.gen_range(0.0..120.0),
                feature: rng.gen_range(0..n_features),
                value: rng.gen_range(-2.0..2.0),
            })
            .collect();
        triplets.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
        EpisodeRecord {
            episode_id: "test".into(),
            static_vector: (0..static_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            triplets,
            metadata: Default::default(),
        }
    }

    #[test]
    fn config_invariants_enforced() {
        let mut c = test_config();
        c.heads = 3; // 8 % 3 != 0
        assert!(c.validate().is_err());
        let mut c = test_config();
        c.clusters = 1;
        assert!(c.validate().is_err());
        let mut c = test_config();
        c.blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn triplet_embedding_is_additive_in_value_term() {
        let state = EncoderState::new(test_config(), 4, 3).unwrap();
        let t1 = ObservationTriplet { time: 10.0, feature: 2, value: 0.5 };
        let t2 = ObservationTriplet { time: 10.0, feature: 2, value: -1.5 };
        let e1 = state.embed_triplet(&t1).unwrap();
        let e2 = state.embed_triplet(&t2).unwrap();
        assert_eq!(e1.len(), 8);
        // difference must equal CVE(v1) - CVE(v2): recompute via a tape
        let mut tape = Tape::new();
        let v = tape.constant(Mat::col(&[0.5, -1.5]));
        let cve = state.cve(&mut tape, v, &state.layout.cve_val);
        let vals = tape.value(cve);
        for j in 0..8 {
            assert_abs_diff_eq!(e1[j] - e2[j], vals.at(0, j) - vals.at(1, j), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_cve_weights_reduce_to_table_plus_biases() {
        let mut state = EncoderState::new(test_config(), 4, 3).unwrap();
        for idx in state.layout.cve_val.iter().chain(&state.layout.cve_time) {
            state.params.tensors[*idx].value.fill(0.0);
        }
        let t = ObservationTriplet { time: 3.0, feature: 1, value: 0.7 };
        let e = state.embed_triplet(&t).unwrap();
        let row = state.params.value(state.layout.feat_table).row_slice(1);
        for j in 0..8 {
            assert_abs_diff_eq!(e[j], row[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn out_of_range_feature_rejected() {
        let state = EncoderState::new(test_config(), 4, 3).unwrap();
        let t = ObservationTriplet { time: 0.0, feature: 7, value: 0.0 };
        assert!(state.embed_triplet(&t).is_err());
    }

    #[test]
    fn single_triplet_alpha_is_one() {
        let state = EncoderState::new(test_config(), 4, 3).unwrap();
        let e = EpisodeRecord {
            episode_id: "one".into(),
            static_vector: vec![0.0; 3],
            triplets: vec![ObservationTriplet { time: 1.0, feature: 0, value: 0.3 }],
            metadata: Default::default(),
        };
        let (e_t, alpha) = state.encode_episode(&e).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(e_t.len(), 8);
    }

    #[test]
    fn alpha_sums_to_one() {
        let state = EncoderState::new(test_config(), 5, 3).unwrap();
        let e = random_episode(40, 5, 3, 2);
        let (_, alpha) = state.encode_episode(&e).unwrap();
        assert_eq!(alpha.len(), 40);
        assert!(alpha.iter().all(|&a| a >= 0.0));
        assert_abs_diff_eq!(alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let state = EncoderState::new(test_config(), 5, 3).unwrap();
        let e = random_episode(30, 5, 3, 3);
        let base = state.represent(&e).unwrap();
        let mut shuffled = e.clone();
        shuffled.triplets.reverse();
        shuffled.triplets.swap(0, 10);
        let permuted = state.represent(&shuffled).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn shapes_follow_config() {
        // M=1, d=8, h=2 on a 10-triplet episode -> e_T length 8, rep 16
        let state = EncoderState::new(test_config(), 6, 4).unwrap();
        let e = random_episode(10, 6, 4, 4);
        let (e_t, _) = state.encode_episode(&e).unwrap();
        assert_eq!(e_t.len(), 8);
        assert_eq!(state.represent(&e).unwrap().len(), 16);
        assert_eq!(state.repr_width(), 16);

        let cfg = ModelConfig {
            representation: ReprMode::TemporalOnly,
            ..test_config()
        };
        let state2 = EncoderState::new(cfg, 6, 4).unwrap();
        assert_eq!(state2.represent(&e).unwrap().len(), 8);
    }

    #[test]
    fn static_ffn_zero_weights_give_bias() {
        let mut state = EncoderState::new(test_config(), 4, 3).unwrap();
        for idx in &state.layout.static_ffn {
            state.params.tensors[*idx].value.fill(0.0);
        }
        state.params.tensors[state.layout.static_ffn[3]]
            .value
            .data
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let e = state.embed_static(&[0.5, -0.5, 1.0]).unwrap();
        assert_eq!(e, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert!(state.embed_static(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn empty_episode_rejected() {
        let state = EncoderState::new(test_config(), 4, 3).unwrap();
        let e = EpisodeRecord {
            episode_id: "empty".into(),
            static_vector: vec![0.0; 3],
            triplets: vec![],
            metadata: Default::default(),
        };
        assert!(matches!(state.represent(&e), Err(SlacError::EmptyEpisode(_))));
    }

    #[test]
    fn deterministic_given_state() {
        let state = EncoderState::new(test_config(), 5, 3).unwrap();
        let e = random_episode(25, 5, 3, 9);
        let a = state.represent(&e).unwrap();
        let b = state.represent(&e).unwrap();
        let bits = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn save_load_roundtrip_and_stale_guard() {
        let dir = tempfile::tempdir().unwrap();
        let state = EncoderState::new(test_config(), 4, 3).unwrap();
        let vocab: Vec<String> = (0..4).map(|i| format!("f{i}")).collect();
        state.save(dir.path(), &vocab).unwrap();
        let loaded = EncoderState::load(dir.path(), &vocab).unwrap();
        let e = random_episode(12, 4, 3, 1);
        assert_eq!(state.represent(&e).unwrap(), loaded.represent(&e).unwrap());

        let other_vocab: Vec<String> = (0..4).map(|i| format!("g{i}")).collect();
        assert!(matches!(
            EncoderState::load(dir.path(), &other_vocab),
            Err(SlacError::StaleWeights(_))
        ));
    }

    #[test]
    fn end_to_end_gradient_check_through_representation() {
        use crate::numeric::fdcheck::finite_diff_check;
        let mut state = EncoderState::new(test_config(), 4, 3).unwrap();
        let episode = random_episode(12, 4, 3, 33);
        let loss_of = |params: &ParamSet, state: &EncoderState| {
            let mut probe = state.clone();
            probe.params = params.clone();
            let mut tape = Tape::new();
            let nodes = probe.represent_node(&mut tape, &episode, usize::MAX).unwrap();
            // scalar head: masked SSE of the representation against zero
            let width = probe.repr_width();
            let l = tape.masked_sse(nodes.rep, vec![0.0; width], vec![true; width]);
            tape.scalar(l)
        };
        // analytic
        let mut tape = Tape::new();
        let nodes = state.represent_node(&mut tape, &episode, usize::MAX).unwrap();
        let width = state.repr_width();
        let l = tape.masked_sse(nodes.rep, vec![0.0; width], vec![true; width]);
        let state_for_eval = state.clone();
        tape.backward(l, 1.0, &mut state.params).unwrap();
        let report = finite_diff_check(
            |p| loss_of(p, &state_for_eval),
            &mut state.params,
            1e-5,
            400,
            7,
        );
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }
}
