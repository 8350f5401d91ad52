//! Trainable networks: cosine time encoder, temporal attention encoder,
//! anomaly detector and projection head.
//!
//! All parameters live in one [`ParamStore`] under stable names
//! (`time.omega`, `encoder.layer0.head1.Wk`, `detector.W1`, ...), so a
//! checkpoint fully describes a model.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::egraph::Subgraph;
use crate::error::{Error, Result};
use crate::numcore::{BoundParams, ParamId, ParamStore, Tape, Tensor, Var};

/// Pre-softmax score given to padding slots.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the (all-zero) raw node features.
    pub node_feat_dim: usize,
    pub edge_feat_dim: usize,
    pub time_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub detector_hidden: usize,
    pub projection_hidden: usize,
}

impl ModelConfig {
    pub fn new(edge_feat_dim: usize) -> Self {
        ModelConfig {
            node_feat_dim: 16,
            edge_feat_dim,
            time_dim: 32,
            embed_dim: 128,
            heads: 2,
            layers: 2,
            detector_hidden: 64,
            projection_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.node_feat_dim,
            self.edge_feat_dim,
            self.time_dim,
            self.embed_dim,
            self.heads,
            self.layers,
            self.detector_hidden,
            self.projection_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid("embed_dim must be divisible by heads"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.node_feat_dim
        } else {
            self.embed_dim
        }
    }

    fn key_dim(&self, layer: usize) -> usize {
        self.layer_input_dim(layer) + self.edge_feat_dim + self.time_dim
    }
}

// ---- time encoder ---------------------------------------------------------

/// `phi(dt)_i = cos(omega_i * dt + phase_i)`.
#[derive(Clone, Debug)]
pub struct TimeEncoder {
    pub omega: ParamId,
    pub phase: ParamId,
}

impl TimeEncoder {
    /// Frequencies start log-spaced from 1 down to 1e-9 rad/s so that gaps
    /// from seconds to years land on some informative component.
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        let omega = (0..dim)
            .map(|i| {
                let frac = if dim > 1 { i as f64 / (dim - 1) as f64 } else { 0.0 };
                10f64.powf(-9.0 * frac)
            })
            .collect();
        Ok(TimeEncoder {
            omega: store.insert("time.omega", Tensor::matrix(1, dim, omega)?)?,
            phase: store.insert_zeros("time.phase", &[dim])?,
        })
    }

    fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(TimeEncoder {
            omega: store.require("time.omega")?,
            phase: store.require("time.phase")?,
        })
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.get(self.phase).len()
    }

    /// Encodes each gap as one row of an `[n, dim]` tensor.
    pub fn encode(&self, tape: &mut Tape, bp: &BoundParams, dts: &[f64]) -> Result<Var> {
        if let Some(bad) = dts.iter().find(|d| !(**d >= 0.0)) {
            return Err(Error::invalid(format!("time encoder given negative gap {bad}")));
        }
        let col = tape.constant(Tensor::matrix(dts.len(), 1, dts.to_vec())?);
        let arg = tape.matmul(col, bp[self.omega])?;
        let arg = tape.add_bias(arg, bp[self.phase])?;
        tape.cos(arg)
    }

    pub fn time_encode(&self, store: &ParamStore, dt: f64) -> Result<Vec<f64>> {
        if !(dt >= 0.0) {
            return Err(Error::invalid(format!("time encoder given negative gap {dt}")));
        }
        let (w, b) = (store.get(self.omega).data(), store.get(self.phase).data());
        Ok(w.iter().zip(b).map(|(w, b)| (w * dt + b).cos()).collect())
    }
}

// ---- encoder --------------------------------------------------------------

#[derive(Clone, Debug)]
struct AttentionHead {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    heads: Vec<AttentionHead>,
    combine_w: ParamId,
    combine_b: ParamId,
}

/// Dense, padded view of a batch of computation trees.
///
/// Level `d` (1-based) has `roots * per_hop^d` slots; slot `s` of level `d`
/// is child `s % per_hop` of slot `s / per_hop` on level `d - 1`.
#[derive(Clone, Debug)]
pub struct EncoderBatch {
    roots: usize,
    per_hop: usize,
    levels: Vec<Level>,
}

#[derive(Clone, Debug)]
struct Level {
    valid: Vec<bool>,
    dt: Vec<f64>,
    features: Vec<f64>,
}

impl EncoderBatch {
    /// Lays out `trees` for an encoder of `layers` layers. Deeper tree
    /// levels are ignored; missing ones are treated as empty.
    pub fn from_subgraphs(trees: &[Subgraph], layers: usize, edge_dim: usize) -> Result<Self> {
        let first = trees.first().ok_or_else(|| Error::invalid("empty encoder batch"))?;
        let per_hop = first.per_hop;
        if trees.iter().any(|t| t.per_hop != per_hop) {
            return Err(Error::invalid("subgraphs in a batch must share per_hop"));
        }
        let roots = trees.len();
        let mut levels = Vec::with_capacity(layers);
        for d in 1..=layers {
            let width = per_hop.pow(d as u32);
            let slots = roots * width;
            let mut level = Level {
                valid: vec![false; slots],
                dt: vec![0.0; slots],
                features: vec![0.0; slots * edge_dim],
            };
            for (r, tree) in trees.iter().enumerate() {
                let Some(entries) = tree.layers.get(d) else { continue };
                for e in entries {
                    if e.features.len() != edge_dim {
                        return Err(Error::invalid(format!(
                            "edge features of width {}, model expects {edge_dim}",
                            e.features.len()
                        )));
                    }
                    let s = r * width + e.slot;
                    level.valid[s] = true;
                    level.dt[s] = e.dt;
                    level.features[s * edge_dim..(s + 1) * edge_dim].copy_from_slice(&e.features);
                }
            }
            levels.push(level);
        }
        Ok(EncoderBatch { roots, per_hop, levels })
    }

    pub fn roots(&self) -> usize {
        self.roots
    }

    fn slots(&self, depth: usize) -> usize {
        self.roots * self.per_hop.pow(depth as u32)
    }
}

/// Multi-layer, multi-head temporal attention encoder.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    time: TimeEncoder,
    layers: Vec<EncoderLayer>,
}

impl TemporalEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let time = TimeEncoder::new(store, cfg.time_dim)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let kd = cfg.key_dim(l);
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let p = format!("encoder.layer{l}.head{h}");
                heads.push(AttentionHead {
                    wq: store.insert_uniform(format!("{p}.Wq"), kd, cfg.head_dim(), rng)?,
                    wk: store.insert_uniform(format!("{p}.Wk"), kd, cfg.head_dim(), rng)?,
                    wv: store.insert_uniform(format!("{p}.Wv"), kd, cfg.head_dim(), rng)?,
                });
            }
            let in_dim = cfg.layer_input_dim(l) + cfg.embed_dim;
            layers.push(EncoderLayer {
                heads,
                combine_w: store.insert_uniform(format!("encoder.layer{l}.combine.W"), in_dim, cfg.embed_dim, rng)?,
                combine_b: store.insert_zeros(format!("encoder.layer{l}.combine.b"), &[cfg.embed_dim])?,
            });
        }
        Ok(TemporalEncoder { time, layers })
    }

    fn from_store(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.layers)
            .map(|l| {
                let heads = (0..cfg.heads)
                    .map(|h| {
                        let p = format!("encoder.layer{l}.head{h}");
                        Ok(AttentionHead {
                            wq: store.require(&format!("{p}.Wq"))?,
                            wk: store.require(&format!("{p}.Wk"))?,
                            wv: store.require(&format!("{p}.Wv"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(EncoderLayer {
                    heads,
                    combine_w: store.require(&format!("encoder.layer{l}.combine.W"))?,
                    combine_b: store.require(&format!("encoder.layer{l}.combine.b"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TemporalEncoder {
            time: TimeEncoder::from_store(store)?,
            layers,
        })
    }

    pub fn time_encoder(&self) -> &TimeEncoder {
        &self.time
    }

    /// Embeddings `[roots, embed_dim]` of the batch roots.
    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, cfg: &ModelConfig, batch: &EncoderBatch) -> Result<Var> {
        let depth = self.layers.len();
        if batch.levels.len() < depth {
            return Err(Error::invalid("encoder batch is shallower than the encoder"));
        }
        // h[d] holds the current representation of every slot on level d
        let mut h: Vec<Var> = (0..=depth)
            .map(|d| tape.constant(Tensor::zeros(&[batch.slots(d), cfg.node_feat_dim])))
            .collect();
        for (l, layer) in self.layers.iter().enumerate() {
            let last = l + 1 == depth;
            let mut next = Vec::with_capacity(depth - l);
            for d in 0..depth - l {
                let out = self.attend(tape, bp, cfg, batch, layer, h[d], h[d + 1], d)?;
                next.push(if last { out } else { tape.relu(out)? });
            }
            h = next;
        }
        Ok(h[0])
    }

    /// One layer for all slots on level `d`, attending over level `d + 1`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        cfg: &ModelConfig,
        batch: &EncoderBatch,
        layer: &EncoderLayer,
        h_self: Var,
        h_children: Var,
        d: usize,
    ) -> Result<Var> {
        let k = batch.per_hop;
        let groups = batch.slots(d);
        let level = &batch.levels[d];

        let no_edge = tape.constant(Tensor::zeros(&[groups, cfg.edge_feat_dim]));
        let phi0 = self.time.encode(tape, bp, &vec![0.0; groups])?;
        let query_in = tape.concat(&[h_self, no_edge, phi0])?;

        // An empty neighborhood attends to a single all-zero entry in slot 0;
        // padding rows are zeroed and masked out of the softmax.
        let mut row_keep = vec![0.0; groups * k];
        let mut mask = vec![MASKED; groups * k];
        for g in 0..groups {
            let span = g * k..(g + 1) * k;
            let mut any = false;
            for s in span.clone() {
                if level.valid[s] {
                    row_keep[s] = 1.0;
                    mask[s] = 0.0;
                    any = true;
                }
            }
            if !any {
                mask[span.start] = 0.0;
            }
        }
        let edge = tape.constant(Tensor::matrix(groups * k, cfg.edge_feat_dim, level.features.clone())?);
        let phi = self.time.encode(tape, bp, &level.dt)?;
        let key_in = tape.concat(&[h_children, edge, phi])?;
        let key_in = tape.scale_rows(key_in, row_keep)?;
        let mask = tape.constant(Tensor::matrix(groups, k, mask)?);

        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
        let mut head_out = Vec::with_capacity(layer.heads.len());
        for head in &layer.heads {
            let q = tape.matmul(query_in, bp[head.wq])?;
            let keys = tape.matmul(key_in, bp[head.wk])?;
            let values = tape.matmul(key_in, bp[head.wv])?;
            let scores = tape.batch_matvec(keys, q, k)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax(scores)?;
            head_out.push(tape.batch_vecmat(attn, values, k)?);
        }
        let neigh = tape.concat(&head_out)?;
        let both = tape.concat(&[h_self, neigh])?;
        let out = tape.matmul(both, bp[layer.combine_w])?;
        tape.add_bias(out, bp[layer.combine_b])
    }
}

// ---- heads ----------------------------------------------------------------

/// Two-layer perceptron `W2 relu(W1 x + b1) + b2`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        let (input, hidden, output) = dims;
        Ok(Mlp {
            w1: store.insert_uniform(format!("{prefix}.W1"), input, hidden, rng)?,
            b1: store.insert_zeros(format!("{prefix}.b1"), &[hidden])?,
            w2: store.insert_uniform(format!("{prefix}.W2"), hidden, output, rng)?,
            b2: store.insert_zeros(format!("{prefix}.b2"), &[output])?,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Mlp {
            w1: store.require(&format!("{prefix}.W1"))?,
            b1: store.require(&format!("{prefix}.b1"))?,
            w2: store.require(&format!("{prefix}.W2"))?,
            b2: store.require(&format!("{prefix}.b2"))?,
        })
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w1).shape()[0]
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.get(self.w2).shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bp[self.w1])?;
        let h = tape.add_bias(h, bp[self.b1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, bp[self.w2])?;
        tape.add_bias(o, bp[self.b2])
    }

    /// Forward pass on one input vector, outside any tape.
    pub fn apply(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        let n_in = self.input_dim(store);
        if x.len() != n_in {
            return Err(Error::Shape {
                op: "mlp",
                lhs: vec![x.len()],
                rhs: vec![n_in],
            });
        }
        let mut tape = Tape::new();
        let bp = tape.bind(store);
        let xv = tape.constant(Tensor::matrix(1, n_in, x.to_vec())?);
        let out = self.forward(&mut tape, &bp, xv)?;
        Ok(tape.value(out).data().to_vec())
    }
}

/// Which block of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Detector,
    Projection,
}

/// The full network: encoder, anomaly detector (one output) and projection
/// head (two logits).
#[derive(Clone, Debug)]
pub struct SadModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: TemporalEncoder,
    pub detector: Mlp,
    pub projection: Mlp,
}

impl SadModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = TemporalEncoder::new(&mut store, &config, rng)?;
        let detector = Mlp::new(&mut store, "detector", (config.embed_dim, config.detector_hidden, 1), rng)?;
        let projection = Mlp::new(&mut store, "projection", (config.embed_dim, config.projection_hidden, 2), rng)?;
        Ok(SadModel { config, store, encoder, detector, projection })
    }

    /// Rebuilds a model from checkpointed parameters, recovering every
    /// dimension from the parameter shapes.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            let t = store
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            t.shape()
                .get(axis)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unexpected shape {:?}", t.shape())))
        };
        let count = |pred: &dyn Fn(usize) -> String| (0..).take_while(|&i| store.id(&pred(i)).is_some()).count();
        let layers = count(&|l| format!("encoder.layer{l}.combine.W"));
        let heads = count(&|h| format!("encoder.layer0.head{h}.Wq"));
        let time_dim = dim("time.omega", 1)?;
        let embed_dim = dim("encoder.layer0.combine.W", 1)?;
        let node_feat_dim = dim("encoder.layer0.combine.W", 0)?
            .checked_sub(embed_dim)
            .ok_or_else(|| Error::Checkpoint("combine weight narrower than embedding".into()))?;
        let edge_feat_dim = dim("encoder.layer0.head0.Wq", 0)?
            .checked_sub(node_feat_dim + time_dim)
            .ok_or_else(|| Error::Checkpoint("attention weight narrower than its inputs".into()))?;
        let config = ModelConfig {
            node_feat_dim,
            edge_feat_dim,
            time_dim,
            embed_dim,
            heads,
            layers,
            detector_hidden: dim("detector.W1", 1)?,
            projection_hidden: dim("projection.W1", 1)?,
        };
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let encoder = TemporalEncoder::from_store(&store, &config)?;
        let detector = Mlp::from_store(&store, "detector")?;
        let projection = Mlp::from_store(&store, "projection")?;

        // every tensor must have the shape a fresh model of this config has
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let fresh = SadModel::new(config.clone(), &mut rng)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, expected {}",
                store.len(),
                fresh.store.len()
            )));
        }
        for (_, name, t) in fresh.store.iter() {
            let got = store.by_name(name).ok_or_else(|| Error::Checkpoint(format!("missing {name:?}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(SadModel { config, store, encoder, detector, projection })
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        let name = self.store.name(id);
        if name.starts_with("detector.") {
            ParamGroup::Detector
        } else if name.starts_with("projection.") {
            ParamGroup::Projection
        } else {
            ParamGroup::Encoder
        }
    }

    pub fn encode(&self, tape: &mut Tape, bp: &BoundParams, batch: &EncoderBatch) -> Result<Var> {
        self.encoder.forward(tape, bp, &self.config, batch)
    }

    pub fn detect(&self, tape: &mut Tape, bp: &BoundParams, z: Var) -> Result<Var> {
        self.detector.forward(tape, bp, z)
    }

    pub fn project(&self, tape: &mut Tape, bp: &BoundParams, z: Var) -> Result<Var> {
        self.projection.forward(tape, bp, z)
    }

    /// Embedding of the root of one computation tree.
    pub fn encode_node(&self, subgraph: &Subgraph) -> Result<Vec<f64>> {
        let batch = EncoderBatch::from_subgraphs(
            std::slice::from_ref(subgraph),
            self.config.layers,
            self.config.edge_feat_dim,
        )?;
        let mut tape = Tape::new();
        let bp = tape.bind(&self.store);
        let z = self.encode(&mut tape, &bp, &batch)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// Anomaly score of one embedding.
    pub fn detect_one(&self, z: &[f64]) -> Result<f64> {
        Ok(self.detector.apply(&self.store, z)?[0])
    }

    /// Two class logits of one embedding.
    pub fn project_one(&self, z: &[f64]) -> Result<[f64; 2]> {
        let o = self.projection.apply(&self.store, z)?;
        Ok([o[0], o[1]])
    }
}

/// Probability of class 1 from a pair of logits.
pub fn class_one_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
    b / (a + b)
}
