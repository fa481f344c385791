//! Attention encoder-decoder policy with a critic head on the decoder glimpse.

mod features;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::ModelState;
use crate::nn::{BatchStats, ParamSet, Real, Tape, Tensor, Var};
use crate::problems::ProblemKind;

pub use features::StaticFeatures;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("encoder cache was built for parameter version {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },
    #[error("row {row} has no feasible action")]
    NoFeasibleAction { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Batch,
    #[default]
    Instance,
}

impl std::str::FromStr for Normalization {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch" => Ok(Normalization::Batch),
            "instance" => Ok(Normalization::Instance),
            other => Err(ModelError::Config(format!("unknown normalization `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_encoder_layers: usize,
    pub logit_clip: f64,
    pub feedforward_dim: usize,
    pub normalization: Normalization,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            num_heads: 8,
            num_encoder_layers: 3,
            logit_clip: 10.0,
            feedforward_dim: 512,
            normalization: Normalization::Instance,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests and gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            embed_dim: 8,
            num_heads: 2,
            num_encoder_layers: 1,
            logit_clip: 10.0,
            feedforward_dim: 16,
            normalization: Normalization::Instance,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.logit_clip > 0.0) {
            return Err(ModelError::Config(format!("logit_clip must be positive, got {}", self.logit_clip)));
        }
        Ok(())
    }
}

/// Per-row decoder outputs: log-probabilities (`-inf` where masked), glimpse and value.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<F> {
    pub batch: usize,
    pub n_nodes: usize,
    pub embed_dim: usize,
    pub log_probs: Vec<F>,
    pub glimpse: Vec<F>,
    pub value: Vec<F>,
}

impl<F: Real> PolicyOutput<F> {
    pub fn log_probs_row(&self, b: usize) -> &[F] {
        &self.log_probs[b * self.n_nodes..(b + 1) * self.n_nodes]
    }
}

/// Encoder outputs reused across decoding steps and trajectories.
#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    pub kind: ProblemKind,
    pub rows: usize,
    pub n_nodes: usize,
    /// `[rows, n_nodes, d]`
    pub node_embeddings: Tensor<F>,
    /// `[rows, d]`, mean of the node embeddings
    pub graph_embedding: Tensor<F>,
    fixed_context: Tensor<F>,
    glimpse_keys: Tensor<F>,
    glimpse_values: Tensor<F>,
    logit_keys: Tensor<F>,
    param_version: u64,
    param_uid: u64,
}

impl<F: Real> EncoderCache<F> {
    pub fn param_version(&self) -> u64 {
        self.param_version
    }

    pub fn glimpse_keys(&self) -> &Tensor<F> {
        &self.glimpse_keys
    }

    pub fn glimpse_values(&self) -> &Tensor<F> {
        &self.glimpse_values
    }

    pub fn logit_keys(&self) -> &Tensor<F> {
        &self.logit_keys
    }

    /// Inserts the cached tensors into a tape as constants.
    pub fn to_tape(&self, tape: &mut Tape<F>) -> TapeCache {
        TapeCache {
            rows: self.rows,
            n_nodes: self.n_nodes,
            h: tape.constant(self.node_embeddings.clone()),
            graph: tape.constant(self.graph_embedding.clone()),
            fixed_context: tape.constant(self.fixed_context.clone()),
            glimpse_keys: tape.constant(self.glimpse_keys.clone()),
            glimpse_values: tape.constant(self.glimpse_values.clone()),
            logit_keys: tape.constant(self.logit_keys.clone()),
        }
    }

    /// Approximate memory footprint in scalars.
    pub fn num_scalars(&self) -> usize {
        self.node_embeddings.len()
            + self.graph_embedding.len()
            + self.fixed_context.len()
            + self.glimpse_keys.len()
            + self.glimpse_values.len()
            + self.logit_keys.len()
    }
}

/// Encoder outputs recorded on a tape (differentiable).
#[derive(Clone, Copy, Debug)]
pub struct TapeCache {
    pub rows: usize,
    pub n_nodes: usize,
    pub h: Var,
    pub graph: Var,
    pub fixed_context: Var,
    pub glimpse_keys: Var,
    pub glimpse_values: Var,
    pub logit_keys: Var,
}

/// Decoder outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecodeVars {
    /// `[Q, L]`
    pub log_probs: Var,
    /// `[Q, d]`
    pub glimpse: Var,
    /// `[Q]`
    pub value: Var,
}

/// Running-statistics update gathered from one batch-normalized forward pass.
#[derive(Clone, Debug)]
pub struct NormUpdate<F> {
    mean_idx: usize,
    var_idx: usize,
    stats: BatchStats<F>,
}

#[derive(Clone, Debug)]
struct NormIdx {
    gamma: usize,
    beta: usize,
    running: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    norm1: NormIdx,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
    norm2: NormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    embed_w: usize,
    embed_b: usize,
    depot: Option<(usize, usize)>,
    layers: Vec<LayerIdx>,
    project_node: usize,
    project_fixed: usize,
    project_step: usize,
    project_out: usize,
    placeholder: Option<usize>,
    project_dynamic: Option<usize>,
    critic: [usize; 4],
}

pub const BN_MOMENTUM: f64 = 0.1;

/// The policy/value network.
#[derive(Clone, Debug)]
pub struct AttentionModel<F: Real> {
    kind: ProblemKind,
    config: ModelConfig,
    params: ParamSet<F>,
    layout: Layout,
}

/// Canonical parameter names and shapes for a configuration.
pub fn parameter_shapes(kind: ProblemKind, c: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = c.embed_dim;
    let ff = c.feedforward_dim;
    let mut v: Vec<(String, Vec<usize>, bool)> = Vec::new();
    let mut p = |name: String, shape: Vec<usize>| v.push((name, shape, true));
    match kind {
        ProblemKind::Tsp => {
            p("init_embed.weight".into(), vec![2, d]);
            p("init_embed.bias".into(), vec![d]);
        }
        ProblemKind::Cvrp => {
            p("init_embed.weight".into(), vec![3, d]);
            p("init_embed.bias".into(), vec![d]);
            p("init_embed_depot.weight".into(), vec![2, d]);
            p("init_embed_depot.bias".into(), vec![d]);
        }
    }
    for i in 0..c.num_encoder_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            p(format!("encoder.{i}.attn.{w}"), vec![d, d]);
        }
        p(format!("encoder.{i}.norm1.gamma"), vec![d]);
        p(format!("encoder.{i}.norm1.beta"), vec![d]);
        p(format!("encoder.{i}.ff1.weight"), vec![d, ff]);
        p(format!("encoder.{i}.ff1.bias"), vec![ff]);
        p(format!("encoder.{i}.ff2.weight"), vec![ff, d]);
        p(format!("encoder.{i}.ff2.bias"), vec![d]);
        p(format!("encoder.{i}.norm2.gamma"), vec![d]);
        p(format!("encoder.{i}.norm2.beta"), vec![d]);
    }
    p("decoder.project_node_embeddings".into(), vec![d, 3 * d]);
    p("decoder.project_fixed_context".into(), vec![d, d]);
    match kind {
        ProblemKind::Tsp => {
            p("decoder.project_step_context".into(), vec![2 * d, d]);
            p("decoder.placeholder".into(), vec![2 * d]);
        }
        ProblemKind::Cvrp => {
            p("decoder.project_step_context".into(), vec![d + 1, d]);
            p("decoder.project_dynamic".into(), vec![1, 2 * d]);
        }
    }
    p("decoder.project_out".into(), vec![d, d]);
    p("critic.l1.weight".into(), vec![d, d]);
    p("critic.l1.bias".into(), vec![d]);
    p("critic.l2.weight".into(), vec![d, 1]);
    p("critic.l2.bias".into(), vec![1]);
    if c.normalization == Normalization::Batch {
        for i in 0..c.num_encoder_layers {
            for n in ["norm1", "norm2"] {
                v.push((format!("encoder.{i}.{n}.running_mean"), vec![d], false));
                v.push((format!("encoder.{i}.{n}.running_var"), vec![d], false));
            }
        }
    }
    v
}

fn init_value<F: Real>(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    if name.ends_with("gamma") || name.ends_with("running_var") {
        return Tensor::full(shape.to_vec(), F::one());
    }
    if name.ends_with("beta") || name.ends_with("running_mean") {
        return Tensor::zeros(shape.to_vec());
    }
    if name.ends_with("placeholder") {
        return Tensor::uniform(shape.to_vec(), 1.0, rng);
    }
    // weights are [fan_in, fan_out]; a bias shares the bound of its weight
    let fan_in = if shape.len() == 2 { shape[0] } else { bias_fan_in(name, shape[0]) };
    Tensor::uniform(shape.to_vec(), 1.0 / (fan_in as f64).sqrt(), rng)
}

fn bias_fan_in(name: &str, width: usize) -> usize {
    // fan-in of the matching weight is recovered from the parameter naming
    match name {
        "init_embed.bias" | "init_embed_depot.bias" => 2,
        _ => width,
    }
}

impl<F: Real> AttentionModel<F> {
    /// Seeded initialization.
    pub fn new(kind: ProblemKind, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut weights: std::collections::HashMap<String, usize> = Default::default();
        for (name, shape, trainable) in parameter_shapes(kind, &config) {
            let value = if name.ends_with(".bias") {
                let wname = name.replace(".bias", ".weight");
                let fan_in = weights.get(&wname).copied().unwrap_or_else(|| bias_fan_in(&name, shape[0]));
                Tensor::uniform(shape.clone(), 1.0 / (fan_in as f64).sqrt(), &mut rng)
            } else {
                init_value(&name, &shape, &mut rng)
            };
            if shape.len() == 2 {
                weights.insert(name.clone(), shape[0]);
            }
            if trainable {
                params.add(name, value);
            } else {
                params.add_buffer(name, value);
            }
        }
        Self::from_params(kind, config, params)
    }

    /// Wraps existing parameters, validating names and shapes against the configuration.
    pub fn from_params(kind: ProblemKind, config: ModelConfig, params: ParamSet<F>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = parameter_shapes(kind, &config);
        if expected.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &expected {
            let idx = params
                .index_of(name)
                .ok_or_else(|| ModelError::Shape(format!("missing parameter `{name}`")))?;
            if params.value(idx).shape() != shape.as_slice() {
                return Err(ModelError::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    params.value(idx).shape()
                )));
            }
        }
        let ix = |n: &str| params.index_of(n).expect("validated above");
        let norm = |i: usize, which: &str| NormIdx {
            gamma: ix(&format!("encoder.{i}.{which}.gamma")),
            beta: ix(&format!("encoder.{i}.{which}.beta")),
            running: (config.normalization == Normalization::Batch).then(|| {
                (ix(&format!("encoder.{i}.{which}.running_mean")), ix(&format!("encoder.{i}.{which}.running_var")))
            }),
        };
        let layers = (0..config.num_encoder_layers)
            .map(|i| LayerIdx {
                wq: ix(&format!("encoder.{i}.attn.wq")),
                wk: ix(&format!("encoder.{i}.attn.wk")),
                wv: ix(&format!("encoder.{i}.attn.wv")),
                wo: ix(&format!("encoder.{i}.attn.wo")),
                norm1: norm(i, "norm1"),
                ff1_w: ix(&format!("encoder.{i}.ff1.weight")),
                ff1_b: ix(&format!("encoder.{i}.ff1.bias")),
                ff2_w: ix(&format!("encoder.{i}.ff2.weight")),
                ff2_b: ix(&format!("encoder.{i}.ff2.bias")),
                norm2: norm(i, "norm2"),
            })
            .collect();
        let cvrp = kind == ProblemKind::Cvrp;
        let layout = Layout {
            embed_w: ix("init_embed.weight"),
            embed_b: ix("init_embed.bias"),
            depot: cvrp.then(|| (ix("init_embed_depot.weight"), ix("init_embed_depot.bias"))),
            layers,
            project_node: ix("decoder.project_node_embeddings"),
            project_fixed: ix("decoder.project_fixed_context"),
            project_step: ix("decoder.project_step_context"),
            project_out: ix("decoder.project_out"),
            placeholder: (!cvrp).then(|| ix("decoder.placeholder")),
            project_dynamic: cvrp.then(|| ix("decoder.project_dynamic")),
            critic: [ix("critic.l1.weight"), ix("critic.l1.bias"), ix("critic.l2.weight"), ix("critic.l2.bias")],
        };
        Ok(AttentionModel { kind, config, params, layout })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<F> {
        self.params
    }

    pub fn cast<G: Real>(&self) -> AttentionModel<G> {
        AttentionModel::from_params(self.kind, self.config.clone(), self.params.cast()).expect("same layout")
    }

    fn p(&self, tape: &mut Tape<F>, idx: usize) -> Var {
        tape.param(&self.params, idx)
    }

    fn check_features(&self, feats: &StaticFeatures) -> Result<(), ModelError> {
        if feats.kind != self.kind {
            return Err(ModelError::Shape(format!("model is for {}, features are {}", self.kind, feats.kind)));
        }
        if feats.rows == 0 {
            return Err(ModelError::Shape("empty feature batch".into()));
        }
        let want = feats.rows * feats.n;
        let ok = feats.coords.len() == 2 * want
            && match self.kind {
                ProblemKind::Tsp => true,
                ProblemKind::Cvrp => {
                    feats.depot.as_ref().is_some_and(|d| d.len() == 2 * feats.rows)
                        && feats.demand.as_ref().is_some_and(|d| d.len() == want)
                }
            };
        if !ok {
            return Err(ModelError::Shape("feature arrays do not match rows × n".into()));
        }
        Ok(())
    }

    /// Per-node affine embedding `[R, n_nodes, d]`; the CVRP depot has its own projection.
    pub fn embed_static(&self, tape: &mut Tape<F>, feats: &StaticFeatures) -> Result<Var, ModelError> {
        self.check_features(feats)?;
        let (r, n) = (feats.rows, feats.n);
        let w = self.p(tape, self.layout.embed_w);
        let b = self.p(tape, self.layout.embed_b);
        match self.kind {
            ProblemKind::Tsp => {
                let x = tape.constant(Tensor::from_f64(vec![r, n, 2], &feats.coords));
                Ok(tape.linear(x, w, Some(b)))
            }
            ProblemKind::Cvrp => {
                let demand = feats.demand.as_ref().expect("checked");
                let mut cust = Vec::with_capacity(r * n * 3);
                for i in 0..r * n {
                    cust.extend_from_slice(&[feats.coords[2 * i], feats.coords[2 * i + 1], demand[i]]);
                }
                let x = tape.constant(Tensor::from_f64(vec![r, n, 3], &cust));
                let customers = tape.linear(x, w, Some(b));
                let (dw, db) = self.layout.depot.expect("cvrp layout");
                let (dw, db) = (self.p(tape, dw), self.p(tape, db));
                let dep = tape.constant(Tensor::from_f64(vec![r, 1, 2], feats.depot.as_ref().expect("checked")));
                let depot = tape.linear(dep, dw, Some(db));
                Ok(tape.concat_nodes(depot, customers))
            }
        }
    }

    fn normalize(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        idx: &NormIdx,
        train: bool,
        updates: &mut Vec<NormUpdate<F>>,
    ) -> Var {
        let (g, b) = (self.p(tape, idx.gamma), self.p(tape, idx.beta));
        match (self.config.normalization, idx.running) {
            (Normalization::Instance, _) | (Normalization::Batch, None) => tape.instance_norm(x, g, b),
            (Normalization::Batch, Some((mi, vi))) => {
                if train {
                    let (y, stats) = tape.batch_norm(x, g, b, None);
                    updates.push(NormUpdate { mean_idx: mi, var_idx: vi, stats: stats.expect("batch statistics") });
                    y
                } else {
                    let (m, v) = (self.params.value(mi).data().to_vec(), self.params.value(vi).data().to_vec());
                    tape.batch_norm(x, g, b, Some((&m, &v))).0
                }
            }
        }
    }

    /// Runs the encoder layers on embeddings `x[R, L, d]`.
    pub fn encode_embeddings(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        train: bool,
    ) -> (Var, Vec<NormUpdate<F>>) {
        let shape = tape.shape(x).to_vec();
        let (r, l, d) = (shape[0], shape[1], shape[2]);
        let rows = Arc::new((0..r).collect::<Vec<_>>());
        let mut updates = Vec::new();
        let mut h = x;
        for layer in &self.layout.layers {
            let (wq, wk, wv, wo) =
                (self.p(tape, layer.wq), self.p(tape, layer.wk), self.p(tape, layer.wv), self.p(tape, layer.wo));
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let heads = tape.mha(q, k, v, rows.clone(), None, self.config.num_heads);
            let att = tape.matmul(heads, wo);
            let res = tape.add(h, att);
            let h1 = self.normalize(tape, res, &layer.norm1, train, &mut updates);
            let (w1, b1, w2, b2) =
                (self.p(tape, layer.ff1_w), self.p(tape, layer.ff1_b), self.p(tape, layer.ff2_w), self.p(tape, layer.ff2_b));
            let f = tape.linear(h1, w1, Some(b1));
            let f = tape.relu(f);
            let f = tape.linear(f, w2, Some(b2));
            let res = tape.add(h1, f);
            h = self.normalize(tape, res, &layer.norm2, train, &mut updates);
        }
        debug_assert_eq!(tape.shape(h), &[r, l, d]);
        (h, updates)
    }

    /// Embedding, encoder and cached projections on a tape.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<F>,
        feats: &StaticFeatures,
        train: bool,
    ) -> Result<(TapeCache, Vec<NormUpdate<F>>), ModelError> {
        let x = self.embed_static(tape, feats)?;
        let (h, updates) = self.encode_embeddings(tape, x, train);
        Ok((self.cache_projections(tape, h), updates))
    }

    /// Graph embedding, fixed context and the three cached projections of `h`.
    pub fn cache_projections(&self, tape: &mut Tape<F>, h: Var) -> TapeCache {
        let s = tape.shape(h).to_vec();
        let d = s[2];
        let graph = tape.mean_nodes(h);
        let wf = self.p(tape, self.layout.project_fixed);
        let fixed_context = tape.matmul(graph, wf);
        let wn = self.p(tape, self.layout.project_node);
        let proj = tape.matmul(h, wn);
        TapeCache {
            rows: s[0],
            n_nodes: s[1],
            h,
            graph,
            fixed_context,
            glimpse_keys: tape.slice_last(proj, 0, d),
            glimpse_values: tape.slice_last(proj, d, d),
            logit_keys: tape.slice_last(proj, 2 * d, d),
        }
    }

    /// Inference-mode encoding into a detached cache.
    pub fn encode(&self, feats: &StaticFeatures) -> Result<EncoderCache<F>, ModelError> {
        let mut tape = Tape::no_grad();
        let (c, _) = self.encode_on_tape(&mut tape, feats, false)?;
        Ok(self.detach(&tape, &c))
    }

    /// Copies tape values into a cache stamped with the current parameter version.
    pub fn detach(&self, tape: &Tape<F>, c: &TapeCache) -> EncoderCache<F> {
        EncoderCache {
            kind: self.kind,
            rows: c.rows,
            n_nodes: c.n_nodes,
            node_embeddings: tape.value(c.h).clone(),
            graph_embedding: tape.value(c.graph).clone(),
            fixed_context: tape.value(c.fixed_context).clone(),
            glimpse_keys: tape.value(c.glimpse_keys).clone(),
            glimpse_values: tape.value(c.glimpse_values).clone(),
            logit_keys: tape.value(c.logit_keys).clone(),
            param_version: self.params.version(),
            param_uid: self.params.uid(),
        }
    }

    /// Folds batch statistics into the running buffers.
    pub fn apply_norm_updates(&mut self, updates: &[NormUpdate<F>]) {
        let mom = F::c(BN_MOMENTUM);
        for u in updates {
            for (idx, src) in [(u.mean_idx, &u.stats.mean), (u.var_idx, &u.stats.var)] {
                let dst = self.params.value_mut(idx).data_mut();
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (F::one() - mom) * *d + mom * s;
                }
            }
        }
    }

    /// Critic head `relu(g·W1 + b1)·W2 + b2`, `[Q]`.
    pub fn critic(&self, tape: &mut Tape<F>, glimpse: Var) -> Var {
        let [w1, b1, w2, b2] = self.layout.critic.map(|i| self.p(tape, i));
        let z = tape.linear(glimpse, w1, Some(b1));
        let z = tape.relu(z);
        let v = tape.linear(z, w2, Some(b2));
        let q = tape.shape(glimpse)[0];
        tape.reshape(v, vec![q])
    }

    fn check_state(&self, cache: &TapeCache, state: &ModelState, kv_row: &[usize]) -> Result<(), ModelError> {
        if state.kind != self.kind {
            return Err(ModelError::Shape(format!("state is {}, model is {}", state.kind, self.kind)));
        }
        if state.n_nodes != cache.n_nodes {
            return Err(ModelError::Shape(format!("state has {} nodes, cache has {}", state.n_nodes, cache.n_nodes)));
        }
        if kv_row.len() != state.batch {
            return Err(ModelError::Shape(format!("{} cache rows given for {} queries", kv_row.len(), state.batch)));
        }
        if let Some(&r) = kv_row.iter().find(|&&r| r >= cache.rows) {
            return Err(ModelError::Shape(format!("cache row {r} out of range ({} rows)", cache.rows)));
        }
        if self.kind == ProblemKind::Cvrp && state.dynamic.as_ref().is_none_or(|d| d.len() != state.batch * state.n_nodes) {
            return Err(ModelError::Shape("CVRP state needs remaining demand per node".into()));
        }
        for b in 0..state.batch {
            if state.mask_row(b).iter().all(|&m| m) {
                return Err(ModelError::NoFeasibleAction { row: b });
            }
        }
        Ok(())
    }

    /// One decoding step for every query row; query `b` reads cache row `kv_row[b]`.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape<F>,
        cache: &TapeCache,
        state: &ModelState,
        kv_row: &[usize],
    ) -> Result<DecodeVars, ModelError> {
        self.check_state(cache, state, kv_row)?;
        let q_n = state.batch;
        let nn = cache.n_nodes;
        let d = self.config.embed_dim;
        let kv = Arc::new(kv_row.to_vec());
        let mask = Arc::new(state.get_mask().to_vec());

        let last = tape.gather_nodes(cache.h, kv.clone(), Arc::new(state.get_current_node().to_vec()));
        let step_ctx = match self.kind {
            ProblemKind::Tsp => {
                let first = tape.gather_nodes(cache.h, kv.clone(), Arc::new(state.first_a.clone()));
                let both = tape.concat_last(&[first, last]);
                let ph = self.p(tape, self.layout.placeholder.expect("tsp layout"));
                tape.replace_rows(both, ph, Arc::new(state.is_initial_action.clone()))
            }
            ProblemKind::Cvrp => {
                let load: Vec<f64> = (0..q_n).map(|b| state.remaining_load(b)).collect();
                let load = tape.constant(Tensor::from_f64(vec![q_n, 1], &load));
                tape.concat_last(&[last, load])
            }
        };
        let ws = self.p(tape, self.layout.project_step);
        let step = tape.matmul(step_ctx, ws);
        let fixed = tape.gather_rows(cache.fixed_context, kv.clone());
        let query = tape.add(fixed, step);
        let query = tape.reshape(query, vec![q_n, 1, d]);

        let heads = match self.kind {
            ProblemKind::Tsp => tape.mha(query, cache.glimpse_keys, cache.glimpse_values, kv.clone(), Some(mask.clone()), self.config.num_heads),
            ProblemKind::Cvrp => {
                let dynamic = state.dynamic.as_ref().expect("checked");
                let dyn_in = tape.constant(Tensor::from_f64(vec![q_n, nn, 1], dynamic));
                let wd = self.p(tape, self.layout.project_dynamic.expect("cvrp layout"));
                let dyn_proj = tape.matmul(dyn_in, wd);
                let dk = tape.slice_last(dyn_proj, 0, d);
                let dv = tape.slice_last(dyn_proj, d, d);
                let gk = tape.gather_rows(cache.glimpse_keys, kv.clone());
                let gv = tape.gather_rows(cache.glimpse_values, kv.clone());
                let keys = tape.add(gk, dk);
                let values = tape.add(gv, dv);
                let own = Arc::new((0..q_n).collect::<Vec<_>>());
                tape.mha(query, keys, values, own, Some(mask.clone()), self.config.num_heads)
            }
        };
        let heads = tape.reshape(heads, vec![q_n, d]);
        let wo = self.p(tape, self.layout.project_out);
        let glimpse = tape.matmul(heads, wo);
        let logits = tape.clipped_score(glimpse, cache.logit_keys, kv, Some(mask), F::c(self.config.logit_clip));
        let log_probs = tape.log_softmax(logits);
        let value = self.critic(tape, glimpse);
        Ok(DecodeVars { log_probs, glimpse, value })
    }

    fn output(&self, tape: &Tape<F>, out: &DecodeVars, batch: usize, n_nodes: usize) -> PolicyOutput<F> {
        PolicyOutput {
            batch,
            n_nodes,
            embed_dim: self.config.embed_dim,
            log_probs: tape.data(out.log_probs).to_vec(),
            glimpse: tape.data(out.glimpse).to_vec(),
            value: tape.data(out.value).to_vec(),
        }
    }

    pub fn check_cache(&self, cache: &EncoderCache<F>) -> Result<(), ModelError> {
        if cache.param_uid != self.params.uid() || cache.param_version != self.params.version() {
            return Err(ModelError::StaleCache { cache: cache.param_version, model: self.params.version() });
        }
        Ok(())
    }

    /// Decoder step on a cache built by [`Self::encode`]; errors if parameters changed since.
    pub fn forward_cached(
        &self,
        cache: &EncoderCache<F>,
        state: &ModelState,
        kv_row: &[usize],
    ) -> Result<PolicyOutput<F>, ModelError> {
        self.check_cache(cache)?;
        let mut tape = Tape::no_grad();
        let tc = cache.to_tape(&mut tape);
        let out = self.decode_on_tape(&mut tape, &tc, state, kv_row)?;
        Ok(self.output(&tape, &out, state.batch, cache.n_nodes))
    }

    /// Same as [`Self::forward_cached`].
    pub fn decode_step(
        &self,
        cache: &EncoderCache<F>,
        state: &ModelState,
        kv_row: &[usize],
    ) -> Result<PolicyOutput<F>, ModelError> {
        self.forward_cached(cache, state, kv_row)
    }

    /// `trajectories` query rows per cache row: query `b` reads row `b / trajectories`.
    pub fn parallel_decode(
        &self,
        cache: &EncoderCache<F>,
        state: &ModelState,
        trajectories: usize,
    ) -> Result<PolicyOutput<F>, ModelError> {
        if trajectories == 0 || state.batch != cache.rows * trajectories {
            return Err(ModelError::Shape(format!(
                "{} query rows do not match {} cache rows × {trajectories} trajectories",
                state.batch, cache.rows
            )));
        }
        let kv: Vec<usize> = (0..state.batch).map(|b| b / trajectories).collect();
        self.forward_cached(cache, state, &kv)
    }

    /// Full forward pass without a cache: embed, encode and decode on one tape.
    pub fn forward(
        &self,
        feats: &StaticFeatures,
        state: &ModelState,
        kv_row: &[usize],
    ) -> Result<PolicyOutput<F>, ModelError> {
        let mut tape = Tape::no_grad();
        let (tc, _) = self.encode_on_tape(&mut tape, feats, false)?;
        let out = self.decode_on_tape(&mut tape, &tc, state, kv_row)?;
        Ok(self.output(&tape, &out, state.batch, tc.n_nodes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Greedy,
    Sample,
}

/// Argmax with lowest-index tie-break over finite entries.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if v > best_v {
            best = j;
            best_v = v;
        }
    }
    best
}

/// Categorical draw from log-probabilities.
pub fn sample_categorical<F: Real, R: Rng + ?Sized>(row: &[F], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_ok = None;
    for (j, &lp) in row.iter().enumerate() {
        let p = lp.f64().exp();
        if p > 0.0 {
            last_ok = Some(j);
            acc += p;
            if u < acc {
                return j;
            }
        }
    }
    last_ok.unwrap_or_else(|| argmax(row))
}

/// Picks one action per row and returns it with its log-probability.
pub fn actor_select<F: Real, R: Rng + ?Sized>(out: &PolicyOutput<F>, mode: SelectMode, rng: &mut R) -> (Vec<usize>, Vec<F>) {
    (0..out.batch)
        .map(|b| {
            let row = out.log_probs_row(b);
            let a = match mode {
                SelectMode::Greedy => argmax(row),
                SelectMode::Sample => sample_categorical(row, rng),
            };
            (a, row[a])
        })
        .unzip()
}
