//! Mini-batch training with Adam and step-decayed learning rate, evaluation,
//! stratified k-fold splitting, and resumable training state.
//!
//! Randomness comes from four ChaCha streams derived from the seed:
//! parameter init, batch shuffling, reparameterization noise, and node
//! masking. Per-graph gradients inside a batch are evaluated in parallel and
//! summed in batch order, so results do not depend on thread scheduling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::{read_json, write_json, BrainGraph, Dataset};
use crate::error::{Error, Result};
use crate::model::{encode, Checkpoint, ModelConfig, ModelParams};
use crate::numerics::{adam_step, step_decay_lr, AdamConfig, AdamState, Tensor};
use crate::objectives::{loss_and_grad, LossBreakdown, LossWeights, PerturbMask, TrainingDraw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Fraction of regions masked in the consistency pass.
    pub perturb_ratio: f64,
    #[serde(flatten)]
    pub weights: LossWeights,
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Fraction of connections kept when building graphs.
    pub keep_ratio: f64,
    pub seed: u64,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 50,
            weight_decay: 0.03,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            perturb_ratio: 0.25,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            keep_ratio: 0.3,
            seed: 0,
            folds: 5,
        }
    }
}

impl TrainConfig {
    /// Defaults with the small model widths.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad("lr and lr_decay must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.perturb_ratio) {
            return bad("perturb_ratio must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.keep_ratio) {
            return bad("keep_ratio must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay_lr(self.lr, self.lr_decay, self.lr_decay_every, epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Accuracy of the noisy clean-pass predictions seen during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,lr,total,ce,cluster,separation,ib,consistency,sparsity,diversity,train_accuracy,val_accuracy\n",
        );
        for r in &self.epochs {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                l.total,
                l.ce,
                l.cluster,
                l.separation,
                l.ib,
                l.consistency,
                l.sparsity,
                l.diversity,
                r.train_accuracy,
                r.val_accuracy.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// Independent random streams used during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub shuffle: ChaCha8Rng,
    pub noise: ChaCha8Rng,
    pub perturb: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            shuffle: stream(seed, 1),
            noise: stream(seed, 2),
            perturb: stream(seed, 3),
        }
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rngs: RngStreams,
    pub history: TrainHistory,
}

#[derive(Serialize, Deserialize)]
struct ResumeFile {
    config: TrainConfig,
    adam: AdamState,
    epoch: usize,
    rngs: RngStreams,
    history: TrainHistory,
}

impl TrainState {
    pub fn new(config: &TrainConfig, num_regions: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream(config.seed, 0);
        let params = ModelParams::init(&config.model, num_regions, num_classes, &mut init_rng)?;
        let adam = AdamState::new(&params.to_tensors(), config.adam())?;
        Ok(Self {
            config: config.clone(),
            params,
            adam,
            epoch: 0,
            rngs: RngStreams::from_seed(config.seed),
            history: TrainHistory::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_params(&self.params, self.config.seed, self.epoch);
        ckpt.header.train_config = serde_json::to_value(&self.config).ok();
        ckpt
    }

    /// Writes the model checkpoint and the optimizer/RNG state side by side.
    pub fn save(&self, checkpoint_path: &Path, resume_path: &Path) -> Result<()> {
        self.checkpoint().save(checkpoint_path)?;
        write_json(
            resume_path,
            &ResumeFile {
                config: self.config.clone(),
                adam: self.adam.clone(),
                epoch: self.epoch,
                rngs: self.rngs.clone(),
                history: self.history.clone(),
            },
        )
    }

    pub fn load(checkpoint_path: &Path, resume_path: &Path) -> Result<Self> {
        let params = Checkpoint::load(checkpoint_path)?.to_params()?;
        let r: ResumeFile = read_json(resume_path)?;
        if r.adam.first_moment.len() != params.tensors().len() {
            return Err(Error::InvalidData(
                "optimizer state does not match the checkpoint".into(),
            ));
        }
        Ok(Self {
            config: r.config,
            params,
            adam: r.adam,
            epoch: r.epoch,
            rngs: r.rngs,
            history: r.history,
        })
    }

    /// Runs one epoch over `graphs` and appends to the history.
    pub fn run_epoch(&mut self, graphs: &[BrainGraph], val: Option<&[BrainGraph]>) -> Result<()> {
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        self.adam.lr = lr;

        let mut order: Vec<usize> = (0..graphs.len()).collect();
        order.shuffle(&mut self.rngs.shuffle);

        let d = self.params.latent_dim();
        let mut losses = Vec::with_capacity(graphs.len());
        let mut correct = 0usize;

        for (batch_idx, batch) in order.chunks(self.config.batch_size).enumerate() {
            let draws = batch
                .iter()
                .map(|&i| {
                    let noise = TrainingDraw::sample_noise(d, &mut self.rngs.noise);
                    let mask = PerturbMask::sample(
                        graphs[i].node_count(),
                        self.config.perturb_ratio,
                        &mut self.rngs.perturb,
                    )?;
                    Ok(TrainingDraw { noise, mask })
                })
                .collect::<Result<Vec<_>>>()?;

            let params = &self.params;
            let weights = &self.config.weights;
            let results = batch
                .par_iter()
                .zip(draws.par_iter())
                .map(|(&i, draw)| {
                    let (b, g) = loss_and_grad(&graphs[i], params, weights, draw)?;
                    let predicted = encode_predicted(&graphs[i], params, &draw.noise)?;
                    Ok((b, g, predicted == graphs[i].label))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    source: Box::new(e),
                })?;

            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = self
                .params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            for (b, g, hit) in results {
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_assign(gi);
                }
                losses.push(b);
                correct += usize::from(hit);
            }
            for g in &mut grads {
                g.scale_assign(scale);
            }

            let mut tensors = self.params.to_tensors();
            adam_step(&mut tensors, &grads, &mut self.adam)?;
            if tensors.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    source: Box::new(Error::NonFinite {
                        primitive: "adam_step",
                    }),
                });
            }
            self.params.set_tensors(tensors)?;
        }

        let val_accuracy = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&self.params, v)?.accuracy),
            _ => None,
        };
        self.history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: LossBreakdown::mean(&losses),
            train_accuracy: correct as f64 / graphs.len().max(1) as f64,
            val_accuracy,
        });
        self.epoch += 1;
        Ok(())
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn run(&mut self, graphs: &[BrainGraph], val: Option<&[BrainGraph]>) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(graphs, val)?;
        }
        Ok(())
    }
}

fn encode_predicted(graph: &BrainGraph, params: &ModelParams, noise: &[f64]) -> Result<usize> {
    Ok(encode(graph, params, Some(noise))?.predicted_class())
}

fn check_graphs(graphs: &[BrainGraph], num_classes: usize) -> Result<usize> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidData("training set is empty".into()))?;
    let c = first.node_count();
    for (i, g) in graphs.iter().enumerate() {
        if g.node_count() != c {
            return Err(Error::InvalidData(format!(
                "graph {i} has {} regions, expected {c}",
                g.node_count()
            )));
        }
        if g.label >= num_classes {
            return Err(Error::InvalidData(format!(
                "graph {i} has label {} outside [0, {num_classes})",
                g.label
            )));
        }
    }
    Ok(c)
}

/// Trains a fresh model on prepared graphs.
pub fn train_graphs(
    graphs: &[BrainGraph],
    num_classes: usize,
    config: &TrainConfig,
    val: Option<&[BrainGraph]>,
) -> Result<(ModelParams, TrainHistory)> {
    let c = check_graphs(graphs, num_classes)?;
    let mut state = TrainState::new(config, c, num_classes)?;
    state.run(graphs, val)?;
    Ok((state.params, state.history))
}

/// Builds graphs with `config.keep_ratio` and trains on all of them.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    let graphs = dataset.graphs(config.keep_ratio)?;
    train_graphs(&graphs, dataset.num_classes, config, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub count: usize,
    pub per_class: Vec<ClassAccuracy>,
    pub predictions: Vec<usize>,
}

/// Inference-mode accuracy; ties in the class probabilities go to the lowest index.
pub fn evaluate(params: &ModelParams, graphs: &[BrainGraph]) -> Result<EvalMetrics> {
    let predictions = graphs
        .par_iter()
        .map(|g| Ok(encode(g, params, None)?.predicted_class()))
        .collect::<Result<Vec<_>>>()?;
    let k = params.num_classes;
    let mut per_class: Vec<ClassAccuracy> = (0..k)
        .map(|class| ClassAccuracy {
            class,
            count: 0,
            correct: 0,
            accuracy: None,
        })
        .collect();
    let mut correct = 0;
    for (g, &p) in graphs.iter().zip(&predictions) {
        if g.label < k {
            per_class[g.label].count += 1;
            if p == g.label {
                per_class[g.label].correct += 1;
                correct += 1;
            }
        }
    }
    for c in &mut per_class {
        if c.count > 0 {
            c.accuracy = Some(c.correct as f64 / c.count as f64);
        }
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / graphs.len().max(1) as f64,
        count: graphs.len(),
        per_class,
        predictions,
    })
}

/// One `(train, test)` index pair.
pub type Fold = (Vec<usize>, Vec<usize>);

/// Stratified k-fold split. Each class is shuffled and dealt round-robin into
/// the folds, continuing the deal position from one class to the next so
/// fold sizes stay balanced overall.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds for {} items",
            labels.len()
        )));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = stream(seed, 4);
    let mut test_sets: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut slot = 0;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < folds {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} members, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            test_sets[slot].push(i);
            slot = (slot + 1) % folds;
        }
    }
    Ok(test_sets
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..labels.len())
                .filter(|i| test.binary_search(i).is_err())
                .collect();
            (train, test)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Trains one model per fold (folds in parallel) and scores it on the held-out part.
pub fn cross_validate(
    graphs: &[BrainGraph],
    num_classes: usize,
    config: &TrainConfig,
    splits: &[Fold],
) -> Result<CvReport> {
    let folds = splits
        .par_iter()
        .enumerate()
        .map(|(fold, (train_idx, test_idx))| {
            let train: Vec<BrainGraph> = train_idx.iter().map(|&i| graphs[i].clone()).collect();
            let test: Vec<BrainGraph> = test_idx.iter().map(|&i| graphs[i].clone()).collect();
            let (params, history) = train_graphs(&train, num_classes, config, None)?;
            let m = evaluate(&params, &test)?;
            Ok(FoldResult {
                fold,
                train_size: train.len(),
                test_size: test.len(),
                accuracy: m.accuracy,
                per_class: m.per_class,
                final_train_loss: history.epochs.last().map(|r| r.loss.total),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = folds.len().max(1) as f64;
    let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
    let var = folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / n;
    Ok(CvReport {
        folds,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
    })
}

pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<()> {
    fs::write(path, history.to_csv()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::build_graph;
    use rand::Rng;

    fn toy_graphs(n: usize, c: usize, seed: u64) -> Vec<BrainGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let mut adj = Tensor::zeros(c, c);
                for j in 0..c {
                    for k in (j + 1)..c {
                        let mut v = rng.random_range(-0.3..0.3);
                        if label == 1 && j < 2 && k < 3 {
                            v += 0.6;
                        }
                        adj.set(j, k, v);
                        adj.set(k, j, v);
                    }
                }
                build_graph(&adj, label).unwrap()
            })
            .collect()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            model: ModelConfig {
                gin_widths: vec![8, 8],
                latent_dim: 4,
                protos_per_class: 2,
                shared_readout: false,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let graphs = toy_graphs(6, 5, 0);
        let config = quick_config(0);
        let (params, history) = train_graphs(&graphs, 2, &config, None).unwrap();
        let fresh = TrainState::new(&config, 5, 2).unwrap();
        assert_eq!(params, fresh.params);
        assert!(history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let graphs = toy_graphs(10, 5, 1);
        let config = quick_config(3);
        let a = train_graphs(&graphs, 2, &config, None).unwrap();
        let b = train_graphs(&graphs, 2, &config, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.len(), 3);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let graphs = toy_graphs(10, 5, 2);
        let config = quick_config(4);
        let (full, _) = train_graphs(&graphs, 2, &config, None).unwrap();

        let mut state = TrainState::new(&config, 5, 2).unwrap();
        state.run_epoch(&graphs, None).unwrap();
        state.run_epoch(&graphs, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (ck, rs) = (dir.path().join("ck.json"), dir.path().join("resume.json"));
        state.save(&ck, &rs).unwrap();
        let mut resumed = TrainState::load(&ck, &rs).unwrap();
        assert_eq!(resumed, state);
        resumed.run(&graphs, None).unwrap();
        assert_eq!(resumed.params, full);
    }

    #[test]
    fn lr_schedule_is_recorded() {
        let config = TrainConfig::default();
        assert_eq!(config.lr_at(0), 1e-3);
        assert_eq!(config.lr_at(50), 5e-4);
        let graphs = toy_graphs(4, 4, 3);
        let cfg = TrainConfig {
            lr_decay_every: 2,
            ..quick_config(5)
        };
        let (_, history) = train_graphs(&graphs, 2, &cfg, None).unwrap();
        let lrs: Vec<f64> = history.epochs.iter().map(|r| r.lr).collect();
        assert_eq!(lrs, vec![1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]);
        assert_eq!(history.to_csv().lines().count(), 6);
    }

    #[test]
    fn evaluate_fixtures() {
        let graphs = toy_graphs(6, 4, 4);
        let mut params = TrainState::new(&quick_config(0), 4, 2).unwrap().params;
        params.head_w = Tensor::zeros(2, 4);
        // Uniform probabilities: every prediction falls to class 0.
        let m = evaluate(&params, &graphs).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class[0].accuracy, Some(1.0));
        assert_eq!(m.per_class[1].accuracy, Some(0.0));

        params.head_b = Tensor::row_vector(vec![0.0, 1.0]);
        let one = evaluate(&params, &graphs[1..2]).unwrap();
        assert_eq!(one.accuracy, 1.0);
    }

    #[test]
    fn kfold_partition_and_stratification() {
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let folds = kfold_split(&labels, 5, 0).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        assert!(folds.iter().all(|(tr, te)| te.len() == 2 && tr.len() == 8));
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        let labels = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1];
        let folds = kfold_split(&labels, 2, 9).unwrap();
        for (_, test) in &folds {
            let ones = test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!((test.len() - ones, ones), (3, 2));
        }
        assert_eq!(folds, kfold_split(&labels, 2, 9).unwrap());
        assert!(kfold_split(&[0, 0, 0, 1], 2, 0).is_err());
        assert!(kfold_split(&[0, 1], 3, 0).is_err());
    }

    #[test]
    fn config_json_uses_flat_field_names() {
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        for key in ["beta", "lambda_cluster", "margin", "gin_widths", "latent_dim", "keep_ratio"] {
            assert!(v.get(key).is_some(), "{key} missing");
        }
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 7, "beta": 0.5}"#).unwrap();
        assert_eq!(partial.epochs, 7);
        assert_eq!(partial.weights.beta, 0.5);
        assert_eq!(partial.weights.lambda_cluster, 0.1);
    }
}
