//! Post-training search for small region subsets that keep the model close
//! to the prototype behind its decision.
//!
//! A subset is scored by masking every region outside it, encoding the
//! masked graph in inference mode and measuring the squared distance `d`
//! between the anchor prototype and its latent code:
//! `score = ln((d + 1) / (d + ε))`. Monte Carlo tree search removes one region
//! per move until the target size is reached.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::model::{encode, ModelParams};

pub const SCORE_EPS: f64 = 1e-6;

/// Largest region count the exhaustive oracle accepts.
pub const ORACLE_MAX_REGIONS: usize = 16;

pub fn score_from_distance(d: f64) -> f64 {
    ((d + 1.0) / (d + SCORE_EPS)).ln()
}

/// Score of the unmasked graph at distance zero; used to scale rewards.
pub fn max_score() -> f64 {
    (1.0 / SCORE_EPS).ln()
}

/// `round(C · 10 / 116)`, at least 4, and always below `C` when possible.
pub fn default_target_size(regions: usize) -> usize {
    let t = ((regions as f64) * 10.0 / 116.0).round() as usize;
    t.max(4).min(regions.saturating_sub(1)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub predicted_class: usize,
    pub prototype: usize,
}

/// Predicted class on the full graph and its nearest prototype.
pub fn anchor_prototype(graph: &BrainGraph, params: &ModelParams) -> Result<Anchor> {
    let enc = encode(graph, params, None)?;
    let predicted_class = enc.predicted_class();
    let mut best: Option<usize> = None;
    for k in params.prototypes_of(predicted_class) {
        if best.is_none_or(|b| enc.distances[k] < enc.distances[b]) {
            best = Some(k);
        }
    }
    let prototype = best.ok_or_else(|| {
        Error::InvalidData(format!("class {predicted_class} has no prototypes"))
    })?;
    Ok(Anchor {
        predicted_class,
        prototype,
    })
}

/// Scores subsets of one graph against a fixed anchor, memoizing results.
pub struct SubsetScorer<'a> {
    graph: &'a BrainGraph,
    params: &'a ModelParams,
    anchor: Anchor,
    cache: Mutex<HashMap<Vec<usize>, f64>>,
}

impl<'a> SubsetScorer<'a> {
    pub fn new(graph: &'a BrainGraph, params: &'a ModelParams) -> Result<Self> {
        Ok(Self::with_anchor(
            graph,
            params,
            anchor_prototype(graph, params)?,
        ))
    }

    pub fn with_anchor(graph: &'a BrainGraph, params: &'a ModelParams, anchor: Anchor) -> Self {
        Self {
            graph,
            params,
            anchor,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn anchor(&self) -> Anchor {
        self.anchor
    }

    pub fn regions(&self) -> usize {
        self.graph.node_count()
    }

    /// Distance from the anchor prototype to its latent code on the masked graph.
    pub fn distance(&self, subset: &[usize]) -> Result<f64> {
        let c = self.regions();
        if subset.is_empty() {
            return Err(Error::InvalidArgument("cannot score an empty subset".into()));
        }
        if let Some(&bad) = subset.iter().find(|&&u| u >= c) {
            return Err(Error::InvalidArgument(format!(
                "region {bad} outside [0, {c})"
            )));
        }
        let masked = self.graph.restrict_to(subset);
        let enc = encode(&masked, self.params, None)?;
        Ok(enc.distances[self.anchor.prototype])
    }

    pub fn score(&self, subset: &[usize]) -> Result<f64> {
        let mut key = subset.to_vec();
        key.sort_unstable();
        key.dedup();
        if let Some(&s) = self.cache.lock().expect("score cache poisoned").get(&key) {
            return Ok(s);
        }
        let s = score_from_distance(self.distance(&key)?);
        self.cache
            .lock()
            .expect("score cache poisoned")
            .insert(key, s);
        Ok(s)
    }
}

/// Scores `subset` against the anchor chosen on the full graph.
pub fn score_subset(subset: &[usize], graph: &BrainGraph, params: &ModelParams) -> Result<f64> {
    SubsetScorer::new(graph, params)?.score(subset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    /// Search iterations per removal move.
    pub rollouts: usize,
    pub c_uct: f64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            rollouts: 20,
            c_uct: std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub retained: Vec<usize>,
    pub visit_count: u32,
    pub total_value: f64,
    /// Removed region → index of the child node in the arena.
    pub children: BTreeMap<usize, usize>,
}

impl SearchNode {
    fn new(retained: Vec<usize>) -> Self {
        Self {
            retained,
            visit_count: 0,
            total_value: 0.0,
            children: BTreeMap::new(),
        }
    }

    pub fn mean_value(&self) -> f64 {
        if self.visit_count == 0 {
            0.0
        } else {
            self.total_value / f64::from(self.visit_count)
        }
    }

    fn untried(&self) -> Option<usize> {
        self.retained
            .iter()
            .copied()
            .find(|r| !self.children.contains_key(r))
    }
}

/// Arena-backed search tree.
#[derive(Debug, Clone, Default)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
}

impl SearchTree {
    fn add(&mut self, node: SearchNode) -> usize {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn select_child(&self, parent: usize, c_uct: f64) -> usize {
        let p = &self.nodes[parent];
        let ln_n = f64::from(p.visit_count.max(1)).ln();
        let mut best: Option<(f64, usize)> = None;
        for &child in p.children.values() {
            let n = &self.nodes[child];
            let u = if n.visit_count == 0 {
                f64::INFINITY
            } else {
                n.mean_value() + c_uct * (ln_n / f64::from(n.visit_count)).sqrt()
            };
            if best.is_none_or(|(b, _)| u > b) {
                best = Some((u, child));
            }
        }
        best.expect("fully expanded node has children").1
    }

    /// Child to commit to: most visits, then higher mean, then lower region.
    fn commit_child(&self, parent: usize) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize)> = None;
        for (&region, &child) in &self.nodes[parent].children {
            let n = &self.nodes[child];
            let better = match best {
                None => true,
                Some((_, b)) => {
                    let m = &self.nodes[b];
                    n.visit_count > m.visit_count
                        || (n.visit_count == m.visit_count && n.mean_value() > m.mean_value())
                }
            };
            if better {
                best = Some((region, child));
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub size: usize,
    /// Score of the committed subset of this size.
    pub score: f64,
    /// Best terminal score seen in any rollout so far.
    pub best_rollout_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    /// Best target-size subset found by the search.
    pub retained_final: Vec<usize>,
    /// Subset reached by following the committed moves.
    pub committed_final: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retained_names: Option<Vec<String>>,
    pub target_size: usize,
    pub anchor_prototype: usize,
    pub predicted_class: usize,
    pub score_final: f64,
    /// Score of the unmasked graph.
    pub score_full: f64,
    pub trajectory: Vec<TrajectoryStep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn remove(retained: &[usize], region: usize) -> Vec<usize> {
    retained.iter().copied().filter(|&r| r != region).collect()
}

/// Result of a full search.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Subset reached by the committed moves.
    pub committed: Vec<usize>,
    /// Highest-scoring target-size subset evaluated anywhere in the search;
    /// the committed subset unless a rollout found a strictly better one.
    pub best: (Vec<usize>, f64),
    pub trajectory: Vec<TrajectoryStep>,
    pub tree: SearchTree,
}

/// One removal-move search plus commit loop on a prepared scorer.
pub fn mcts_search(
    scorer: &SubsetScorer<'_>,
    target_size: usize,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<SearchOutcome> {
    let c = scorer.regions();
    if target_size == 0 || target_size >= c {
        return Err(Error::InvalidArgument(format!(
            "target size {target_size} must lie in [1, {c})"
        )));
    }
    if cfg.rollouts == 0 {
        return Err(Error::InvalidArgument("rollouts must be positive".into()));
    }
    let norm = max_score();
    let mut tree = SearchTree::default();
    let mut root = tree.add(SearchNode::new((0..c).collect()));
    // Committed ancestors of the current root also receive visits, so visit
    // counts stay consistent across the whole reused tree.
    let mut ancestors: Vec<usize> = Vec::new();
    let mut trajectory = Vec::new();
    let mut best: Option<(Vec<usize>, f64)> = None;

    while tree.nodes[root].retained.len() > target_size {
        for _ in 0..cfg.rollouts {
            let mut path = vec![root];
            let mut node = root;
            while tree.nodes[node].retained.len() > target_size {
                if let Some(region) = tree.nodes[node].untried() {
                    let child = tree.add(SearchNode::new(remove(&tree.nodes[node].retained, region)));
                    tree.nodes[node].children.insert(region, child);
                    path.push(child);
                    break;
                }
                node = tree.select_child(node, cfg.c_uct);
                path.push(node);
            }
            let leaf = *path.last().expect("path starts at the root");
            let mut subset = tree.nodes[leaf].retained.clone();
            while subset.len() > target_size {
                let region = *subset.choose(rng).expect("subset is nonempty");
                subset.retain(|&r| r != region);
            }
            let score = scorer.score(&subset)?;
            if best.as_ref().is_none_or(|(_, b)| score > *b) {
                best = Some((subset, score));
            }
            let reward = score / norm;
            for &n in ancestors.iter().chain(&path) {
                tree.nodes[n].visit_count += 1;
                tree.nodes[n].total_value += reward;
            }
        }
        let (_, child) = tree
            .commit_child(root)
            .expect("root has children after its rollouts");
        ancestors.push(root);
        root = child;
        let retained = tree.nodes[root].retained.clone();
        trajectory.push(TrajectoryStep {
            size: retained.len(),
            score: scorer.score(&retained)?,
            best_rollout_score: best.as_ref().map_or(f64::NEG_INFINITY, |b| b.1),
        });
    }
    let committed = tree.nodes[root].retained.clone();
    let committed_score = scorer.score(&committed)?;
    let best = match best {
        Some((subset, score)) if score > committed_score => (subset, score),
        _ => (committed.clone(), committed_score),
    };
    Ok(SearchOutcome {
        committed,
        best,
        trajectory,
        tree,
    })
}

/// Removes regions one move at a time until `target_size` remain.
pub fn mcts_explain(
    graph: &BrainGraph,
    params: &ModelParams,
    target_size: usize,
    cfg: &MctsConfig,
    rng: &mut impl Rng,
) -> Result<Explanation> {
    let scorer = SubsetScorer::new(graph, params)?;
    let outcome = mcts_search(&scorer, target_size, cfg, rng)?;
    let (retained, score_final) = outcome.best;
    let anchor = scorer.anchor();
    let all: Vec<usize> = (0..graph.node_count()).collect();
    Ok(Explanation {
        subject_id: None,
        score_final,
        score_full: scorer.score(&all)?,
        retained_final: retained,
        committed_final: outcome.committed,
        retained_names: None,
        target_size,
        anchor_prototype: anchor.prototype,
        predicted_class: anchor.predicted_class,
        trajectory: outcome.trajectory,
        seed: None,
    })
}

/// Best `k`-subset by brute force; ties go to the lexicographically lowest subset.
pub fn exhaustive_oracle(
    graph: &BrainGraph,
    params: &ModelParams,
    k: usize,
) -> Result<(Vec<usize>, f64)> {
    let c = graph.node_count();
    if c > ORACLE_MAX_REGIONS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search over {c} regions is too large (limit {ORACLE_MAX_REGIONS}); use MCTS"
        )));
    }
    if k == 0 || k > c {
        return Err(Error::InvalidArgument(format!(
            "subset size {k} must lie in [1, {c}]"
        )));
    }
    let scorer = SubsetScorer::new(graph, params)?;
    let mut comb: Vec<usize> = (0..k).collect();
    let mut best = (comb.clone(), scorer.score(&comb)?);
    // Advance through combinations in lexicographic order.
    while let Some(i) = (0..k).rev().find(|&i| comb[i] < c - k + i) {
        comb[i] += 1;
        for j in (i + 1)..k {
            comb[j] = comb[j - 1] + 1;
        }
        let s = scorer.score(&comb)?;
        if s > best.1 {
            best = (comb.clone(), s);
        }
    }
    Ok(best)
}

/// `(jaccard, dice)` of two region sets.
pub fn stability(a: &[usize], b: &[usize]) -> Result<(f64, f64)> {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "stability needs two nonempty sets".into(),
        ));
    }
    let inter = a.intersection(&b).count() as f64;
    let union = a.union(&b).count() as f64;
    Ok((inter / union, 2.0 * inter / (a.len() + b.len()) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCount {
    pub region: usize,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// Selection counts over explanations, most frequent first, lower index on ties.
pub fn region_frequency(explanations: &[Explanation], names: Option<&[String]>) -> Vec<RegionCount> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in explanations {
        for &r in &e.retained_final {
            *counts.entry(r).or_default() += 1;
        }
    }
    let mut table: Vec<RegionCount> = counts
        .into_iter()
        .map(|(region, count)| RegionCount {
            region,
            count,
            name: names.and_then(|n| n.get(region).cloned()),
        })
        .collect();
    table.sort_by(|a, b| b.count.cmp(&a.count).then(a.region.cmp(&b.region)));
    table
}

pub fn top_regions(table: &[RegionCount], n: usize) -> Vec<usize> {
    table.iter().take(n).map(|r| r.region).collect()
}

pub fn frequency_csv(table: &[RegionCount]) -> String {
    let mut out = String::from("rank,region,count,name\n");
    for (i, r) in table.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            i + 1,
            r.region,
            r.count,
            r.name.as_deref().unwrap_or("")
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExplanation {
    pub explanations: Vec<Explanation>,
    pub frequency: Vec<RegionCount>,
}

/// Explains every graph; subject `i` searches with stream `i` of `seed`.
pub fn explain_dataset(
    graphs: &[BrainGraph],
    subject_ids: &[String],
    params: &ModelParams,
    target_size: usize,
    cfg: &MctsConfig,
    seed: u64,
    names: Option<&[String]>,
) -> Result<DatasetExplanation> {
    if subject_ids.len() != graphs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} subject ids for {} graphs",
            subject_ids.len(),
            graphs.len()
        )));
    }
    let explanations = graphs
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut e = mcts_explain(g, params, target_size, cfg, &mut rng)?;
            e.subject_id = Some(subject_ids[i].clone());
            e.seed = Some(seed);
            e.retained_names = names.map(|n| {
                e.retained_final
                    .iter()
                    .map(|&r| n.get(r).cloned().unwrap_or_default())
                    .collect()
            });
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let frequency = region_frequency(&explanations, names);
    Ok(DatasetExplanation {
        explanations,
        frequency,
    })
}

/// Reads region names, one per line, or `index,name` lines in any order.
pub fn load_region_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let indexed = lines.iter().all(|l| {
        l.split_once(',')
            .is_some_and(|(i, _)| i.trim().parse::<usize>().is_ok())
    });
    if !indexed {
        return Ok(lines.iter().map(|l| l.trim().to_string()).collect());
    }
    let mut map = BTreeMap::new();
    for (n, l) in lines.iter().enumerate() {
        let (i, name) = l.split_once(',').expect("checked above");
        let i: usize = i.trim().parse().expect("checked above");
        if map.insert(i, name.trim().to_string()).is_some() {
            return Err(Error::parse(path, n + 1, format!("duplicate region index {i}")));
        }
    }
    let len = map.keys().next_back().map_or(0, |m| m + 1);
    let mut out = vec![String::new(); len];
    for (i, name) in map {
        out[i] = name;
    }
    Ok(out)
}
