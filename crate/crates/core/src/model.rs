//! Weighted GIN encoder, Gaussian posterior heads, prototype layer, and the
//! linear prediction head.
//!
//! Each prototype `k` owns an attention row `a_k` over regions. Node
//! embeddings are pooled with `softmax(a_k)` weights, the pooled vector goes
//! through the shared posterior heads, and the resulting latent code is
//! compared against `p_k`. With `shared_readout` every prototype instead sees
//! one uniformly pooled code.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::connectome::{read_json, write_json, BrainGraph};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output width of each GIN layer; the input width is the region count.
    pub gin_widths: Vec<usize>,
    pub latent_dim: usize,
    pub protos_per_class: usize,
    /// Use one mean-pooled latent code for every prototype.
    pub shared_readout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gin_widths: vec![128, 256, 512],
            latent_dim: 64,
            protos_per_class: 7,
            shared_readout: false,
        }
    }
}

impl ModelConfig {
    /// Small widths for tests and desk-scale runs.
    pub fn tiny() -> Self {
        Self {
            gin_widths: vec![16, 32, 64],
            latent_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gin_widths.is_empty() || self.gin_widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "gin_widths must be a non-empty list of positive widths".into(),
            ));
        }
        if self.latent_dim == 0 || self.protos_per_class == 0 {
            return Err(Error::InvalidArgument(
                "latent_dim and protos_per_class must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One GIN layer: `h' = W2 · relu(W1 · (h + Σ_v A_uv h_v) + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub num_regions: usize,
    pub num_classes: usize,
    pub layers: Vec<GinLayer>,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub logvar_w: Tensor,
    pub logvar_b: Tensor,
    /// `M × d`.
    pub prototypes: Tensor,
    /// `M × C`.
    pub attention: Tensor,
    /// `K × M`.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub proto_class: Vec<usize>,
}

fn uniform_init(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
        .expect("shape")
}

fn linear_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    uniform_init(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ModelParams {
    /// Fresh parameters. Linear weights are `U(±1/√fan_in)`, biases and
    /// attention start at zero, prototypes are `N(0, 0.1²)`. The head starts
    /// with +1 from each prototype to its own class and -0.5 to the others.
    pub fn init(
        config: &ModelConfig,
        num_regions: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if num_regions < 2 || num_classes < 1 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 regions and 1 class, got {num_regions} and {num_classes}"
            )));
        }
        let mut layers = Vec::with_capacity(config.gin_widths.len());
        let mut width_in = num_regions;
        for &w in &config.gin_widths {
            layers.push(GinLayer {
                w1: linear_init(width_in, w, rng),
                b1: Tensor::zeros(1, w),
                w2: linear_init(w, w, rng),
                b2: Tensor::zeros(1, w),
            });
            width_in = w;
        }
        let d = config.latent_dim;
        let m = config.protos_per_class * num_classes;
        let proto_class: Vec<usize> = (0..m).map(|k| k / config.protos_per_class).collect();

        let normal = Normal::new(0.0, 0.1).expect("valid sigma");
        let prototypes =
            Tensor::from_vec(m, d, (0..m * d).map(|_| normal.sample(rng)).collect())?;

        let mut head_w = Tensor::filled(num_classes, m, -0.5);
        for (k, &class) in proto_class.iter().enumerate() {
            head_w.set(class, k, 1.0);
        }

        let mu_w = linear_init(width_in, d, rng);
        let mut logvar_w = linear_init(width_in, d, rng);
        logvar_w.scale_assign(0.1);

        Ok(Self {
            config: config.clone(),
            num_regions,
            num_classes,
            layers,
            mu_w,
            mu_b: Tensor::zeros(1, d),
            logvar_w,
            logvar_b: Tensor::zeros(1, d),
            prototypes,
            attention: Tensor::zeros(m, num_regions),
            head_w,
            head_b: Tensor::zeros(1, num_classes),
            proto_class,
        })
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.prototypes.cols()
    }

    /// Names of the learnable tensors, in the fixed serialization order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.layers.len() {
            for part in ["w1", "b1", "w2", "b2"] {
                names.push(format!("gin{i}.{part}"));
            }
        }
        for n in [
            "mu_w",
            "mu_b",
            "logvar_w",
            "logvar_b",
            "prototypes",
            "attention",
            "head_w",
            "head_b",
        ] {
            names.push(n.to_string());
        }
        names
    }

    /// The learnable tensors in serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.w1, &l.b1, &l.w2, &l.b2]);
        }
        out.extend([
            &self.mu_w,
            &self.mu_b,
            &self.logvar_w,
            &self.logvar_b,
            &self.prototypes,
            &self.attention,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend([&mut l.w1, &mut l.b1, &mut l.w2, &mut l.b2]);
        }
        out.extend([
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.logvar_w,
            &mut self.logvar_b,
            &mut self.prototypes,
            &mut self.attention,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.tensors().into_iter().cloned().collect()
    }

    /// Replaces every learnable tensor; shapes must match.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::Shape {
                op: "set_tensors",
                detail: format!("{} tensors for {} slots", values.len(), slots.len()),
            });
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if !slot.same_shape(&v) {
                return Err(Error::Shape {
                    op: "set_tensors",
                    detail: format!("{:?} vs {:?}", slot.shape(), v.shape()),
                });
            }
            **slot = v;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Prototype indices belonging to `class`.
    pub fn prototypes_of(&self, class: usize) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&k| self.proto_class[k] == class)
            .collect()
    }

    /// Prototype indices not belonging to `class`.
    pub fn prototypes_not_of(&self, class: usize) -> Vec<usize> {
        (0..self.num_prototypes())
            .filter(|&k| self.proto_class[k] != class)
            .collect()
    }
}

/// Tape handles for every learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<[Var; 4]>,
    pub mu_w: Var,
    pub mu_b: Var,
    pub logvar_w: Var,
    pub logvar_b: Var,
    pub prototypes: Var,
    pub attention: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl ParamVars {
    /// Builds handles from vars listed in [`ModelParams::tensors`] order.
    pub fn from_slice(vars: &[Var], num_layers: usize) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("too few parameter vars");
        let layers = (0..num_layers)
            .map(|_| [next(), next(), next(), next()])
            .collect();
        Self {
            layers,
            mu_w: next(),
            mu_b: next(),
            logvar_w: next(),
            logvar_b: next(),
            prototypes: next(),
            attention: next(),
            head_w: next(),
            head_b: next(),
        }
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn params(tape: &mut Tape, params: &ModelParams) -> (Self, Vec<Var>) {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        (Self::from_slice(&vars, params.layers.len()), vars)
    }

    /// Registers every tensor as a constant (inference).
    pub fn constants(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars: Vec<Var> = params
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Self::from_slice(&vars, params.layers.len())
    }
}

/// Handles for every intermediate of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `C × h` final node embeddings.
    pub nodes: Var,
    /// `R × d` with `R = M` (per-prototype readout) or `R = 1` (shared).
    pub mu: Var,
    pub log_var: Var,
    pub z: Var,
    /// `1 × M` squared distances.
    pub dist: Var,
    /// `1 × M` prototype activations.
    pub act: Var,
    /// `1 × K` class probabilities.
    pub probs: Var,
    pub log_probs: Var,
}

fn check_graph(graph: &BrainGraph, params: &ModelParams) -> Result<()> {
    let c = params.num_regions;
    if graph.adjacency.shape() != [c, c] || graph.node_features.shape() != [c, c] {
        return Err(Error::Shape {
            op: "gin_forward",
            detail: format!(
                "model expects {c} regions, graph has adjacency {:?} and features {:?}",
                graph.adjacency.shape(),
                graph.node_features.shape()
            ),
        });
    }
    Ok(())
}

/// GIN message passing on the tape; returns final node embeddings.
pub fn gin_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    graph: &BrainGraph,
) -> Result<Var> {
    check_graph(graph, params)?;
    let adj = tape.constant(graph.adjacency.clone());
    let mut h = tape.constant(graph.node_features.clone());
    let last = pv.layers.len() - 1;
    for (i, &[w1, b1, w2, b2]) in pv.layers.iter().enumerate() {
        let neigh = tape.matmul(adj, h);
        let agg = tape.add(h, neigh);
        let x = tape.matmul(agg, w1);
        let x = tape.add_row(x, b1);
        let x = tape.relu(x);
        let x = tape.matmul(x, w2);
        h = tape.add_row(x, b2);
        if i < last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Full forward pass. `noise` is a `d`-vector shared by every latent row in
/// training mode; `None` means inference (`z = mu`).
pub fn forward_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    graph: &BrainGraph,
    noise: Option<&[f64]>,
) -> Result<ForwardVars> {
    let nodes = gin_on_tape(tape, pv, params, graph)?;
    let m = params.num_prototypes();
    let c = params.num_regions;

    let pooled = if params.config.shared_readout {
        let uniform = tape.constant(Tensor::filled(1, c, 1.0 / c as f64));
        tape.matmul(uniform, nodes)
    } else {
        let weights = tape.softmax_rows(pv.attention);
        tape.matmul(weights, nodes)
    };
    let rows = tape.shape(pooled)[0];

    let mu = tape.matmul(pooled, pv.mu_w);
    let mu = tape.add_row(mu, pv.mu_b);
    let log_var = tape.matmul(pooled, pv.logvar_w);
    let log_var = tape.add_row(log_var, pv.logvar_b);

    let z = match noise {
        Some(eps) => {
            if eps.len() != params.latent_dim() {
                return Err(Error::Shape {
                    op: "encode",
                    detail: format!("noise has {} entries, latent is {}", eps.len(), params.latent_dim()),
                });
            }
            let eps = tape.constant(Tensor::row_vector(eps.to_vec()));
            let eps = tape.broadcast_rows(eps, rows);
            let half = tape.scale(log_var, 0.5);
            let sigma = tape.exp(half);
            let jitter = tape.mul(sigma, eps);
            tape.add(mu, jitter)
        }
        None => mu,
    };

    let z_rows = if rows == m { z } else { tape.broadcast_rows(z, m) };
    let diff = tape.sub(z_rows, pv.prototypes);
    let sq = tape.square(diff);
    let dist = tape.sum_rows(sq);
    let dist = tape.transpose(dist);

    let neg = tape.scale(dist, -1.0);
    let act = tape.softmax_rows(neg);

    let head_t = tape.transpose(pv.head_w);
    let logits = tape.matmul(act, head_t);
    let logits = tape.add_row(logits, pv.head_b);
    let log_probs = tape.log_softmax_rows(logits);
    let probs = tape.softmax_rows(logits);

    Ok(ForwardVars {
        nodes,
        mu,
        log_var,
        z,
        dist,
        act,
        probs,
        log_probs,
    })
}

/// Final-layer node embeddings (`C × h`).
pub fn gin_forward(graph: &BrainGraph, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let pv = ParamVars::constants(&mut tape, params);
    let h = gin_on_tape(&mut tape, &pv, params, graph)?;
    tape.check()?;
    Ok(tape.value(h).clone())
}

/// `softmax(attention_row)`-weighted mean of the node embeddings.
pub fn prototype_readout(node_embeddings: &Tensor, attention_row: &[f64]) -> Vec<f64> {
    assert_eq!(attention_row.len(), node_embeddings.rows());
    let weights = crate::numerics::softmax(attention_row);
    let mut pooled = vec![0.0; node_embeddings.cols()];
    for (u, w) in weights.iter().enumerate() {
        for (p, x) in pooled.iter_mut().zip(node_embeddings.row(u)) {
            *p += w * x;
        }
    }
    pooled
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

/// Everything a forward pass produces, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    /// One code per prototype (all equal under `shared_readout`).
    pub codes: Vec<LatentCode>,
    pub distances: Vec<f64>,
    pub activations: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Encoding {
    /// Class with the highest probability; the lowest index wins ties.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Runs the model without recording gradients.
pub fn encode(graph: &BrainGraph, params: &ModelParams, noise: Option<&[f64]>) -> Result<Encoding> {
    let mut tape = Tape::new();
    let pv = ParamVars::constants(&mut tape, params);
    let fv = forward_on_tape(&mut tape, &pv, params, graph, noise)?;
    tape.check()?;
    let m = params.num_prototypes();
    let (mu, lv, z) = (tape.value(fv.mu), tape.value(fv.log_var), tape.value(fv.z));
    let codes = (0..m)
        .map(|k| {
            let r = if mu.rows() == m { k } else { 0 };
            LatentCode {
                mu: mu.row(r).to_vec(),
                log_var: lv.row(r).to_vec(),
                z: z.row(r).to_vec(),
            }
        })
        .collect();
    Ok(Encoding {
        codes,
        distances: tape.value(fv.dist).data().to_vec(),
        activations: tape.value(fv.act).data().to_vec(),
        probs: tape.value(fv.probs).data().to_vec(),
    })
}

/// `s_k = softmax(-d)_k`.
pub fn activations(distances: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = distances.iter().map(|d| -d).collect();
    crate::numerics::softmax(&neg)
}

/// `softmax(head_w · s + head_b)`.
pub fn predict(activations: &[f64], params: &ModelParams) -> Vec<f64> {
    let logits: Vec<f64> = (0..params.num_classes)
        .map(|k| {
            params
                .head_w
                .row(k)
                .iter()
                .zip(activations)
                .map(|(w, s)| w * s)
                .sum::<f64>()
                + params.head_b.data()[k]
        })
        .collect();
    crate::numerics::softmax(&logits)
}

pub const CHECKPOINT_FORMAT: &str = "pime-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub num_regions: usize,
    pub num_classes: usize,
    pub proto_class: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    /// Tensor names and shapes in the order they appear in `params`.
    pub layout: Vec<TensorShape>,
    /// The training configuration that produced the parameters, if any.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
}

/// A JSON header plus every learnable value, flattened row-major in
/// [`ModelParams::tensors`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &ModelParams, seed: u64, epoch: usize) -> Self {
        let layout = params
            .tensor_names()
            .into_iter()
            .zip(params.tensors())
            .map(|(name, t)| TensorShape {
                name,
                shape: t.shape(),
            })
            .collect();
        let flat = params
            .tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                model: params.config.clone(),
                num_regions: params.num_regions,
                num_classes: params.num_classes,
                proto_class: params.proto_class.clone(),
                seed,
                epoch,
                layout,
                train_config: None,
            },
            params: flat,
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        let h = &self.header;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidData(format!(
                "unknown checkpoint format {:?}",
                h.format
            )));
        }
        h.model.validate()?;
        let m = h.model.protos_per_class * h.num_classes;
        if h.proto_class.len() != m || h.proto_class.iter().any(|&c| c >= h.num_classes) {
            return Err(Error::InvalidData("checkpoint prototype classes are inconsistent".into()));
        }
        // Build a zero skeleton of the right shapes and pour the values in.
        let mut skeleton = ModelParams {
            config: h.model.clone(),
            num_regions: h.num_regions,
            num_classes: h.num_classes,
            layers: Vec::new(),
            mu_w: Tensor::zeros(0, 0),
            mu_b: Tensor::zeros(0, 0),
            logvar_w: Tensor::zeros(0, 0),
            logvar_b: Tensor::zeros(0, 0),
            prototypes: Tensor::zeros(0, 0),
            attention: Tensor::zeros(0, 0),
            head_w: Tensor::zeros(0, 0),
            head_b: Tensor::zeros(0, 0),
            proto_class: h.proto_class.clone(),
        };
        let mut width_in = h.num_regions;
        for &w in &h.model.gin_widths {
            skeleton.layers.push(GinLayer {
                w1: Tensor::zeros(width_in, w),
                b1: Tensor::zeros(1, w),
                w2: Tensor::zeros(w, w),
                b2: Tensor::zeros(1, w),
            });
            width_in = w;
        }
        let d = h.model.latent_dim;
        skeleton.mu_w = Tensor::zeros(width_in, d);
        skeleton.mu_b = Tensor::zeros(1, d);
        skeleton.logvar_w = Tensor::zeros(width_in, d);
        skeleton.logvar_b = Tensor::zeros(1, d);
        skeleton.prototypes = Tensor::zeros(m, d);
        skeleton.attention = Tensor::zeros(m, h.num_regions);
        skeleton.head_w = Tensor::zeros(h.num_classes, m);
        skeleton.head_b = Tensor::zeros(1, h.num_classes);

        let expected: Vec<TensorShape> = skeleton
            .tensor_names()
            .into_iter()
            .zip(skeleton.tensors())
            .map(|(name, t)| TensorShape {
                name,
                shape: t.shape(),
            })
            .collect();
        if expected != h.layout {
            return Err(Error::InvalidData(
                "checkpoint layout does not match its model configuration".into(),
            ));
        }
        if self.params.len() != skeleton.parameter_count() {
            return Err(Error::InvalidData(format!(
                "checkpoint holds {} values, layout needs {}",
                self.params.len(),
                skeleton.parameter_count()
            )));
        }
        if self.params.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData("checkpoint contains non-finite values".into()));
        }
        let mut offset = 0;
        for t in skeleton.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&self.params[offset..offset + n]);
            offset += n;
        }
        Ok(skeleton)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
