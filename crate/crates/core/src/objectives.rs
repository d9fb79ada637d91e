//! Loss terms of the training objective and the random node-masking
//! perturbation used for consistency training.
//!
//! `total = ce + λ1·cluster + λ2·separation + β·ib
//!        + λ_cons·consistency + λ_sparse·sparsity − λ_div·diversity`

use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, ModelParams, ParamVars};
use crate::numerics::{kl_diag_gaussian_var, Tape, Tensor, Var};

/// Floor applied inside the logarithms of the consistency KL.
pub const KL_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda_cluster: f64,
    pub lambda_separation: f64,
    pub lambda_consistency: f64,
    pub lambda_sparsity: f64,
    pub lambda_diversity: f64,
    /// Separation margin Δ.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.001,
            lambda_cluster: 0.1,
            lambda_separation: 0.1,
            lambda_consistency: 0.1,
            lambda_sparsity: 0.01,
            lambda_diversity: 0.01,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.beta,
            self.lambda_cluster,
            self.lambda_separation,
            self.lambda_consistency,
            self.lambda_sparsity,
            self.lambda_diversity,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !self.margin.is_finite() {
            return Err(Error::InvalidArgument("margin must be finite".into()));
        }
        Ok(())
    }

    /// Signed coefficient of `term` in the total.
    pub fn coefficient(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => 1.0,
            LossTerm::Cluster => self.lambda_cluster,
            LossTerm::Separation => self.lambda_separation,
            LossTerm::Ib => self.beta,
            LossTerm::Consistency => self.lambda_consistency,
            LossTerm::Sparsity => self.lambda_sparsity,
            LossTerm::Diversity => -self.lambda_diversity,
        }
    }

    /// Copy with the weight of `term` set to zero. Cross-entropy has no weight.
    pub fn without(&self, term: LossTerm) -> Self {
        let mut w = *self;
        match term {
            LossTerm::Ce => {}
            LossTerm::Cluster => w.lambda_cluster = 0.0,
            LossTerm::Separation => w.lambda_separation = 0.0,
            LossTerm::Ib => w.beta = 0.0,
            LossTerm::Consistency => w.lambda_consistency = 0.0,
            LossTerm::Sparsity => w.lambda_sparsity = 0.0,
            LossTerm::Diversity => w.lambda_diversity = 0.0,
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Ce,
    Cluster,
    Separation,
    Ib,
    Consistency,
    Sparsity,
    Diversity,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Ce,
        LossTerm::Cluster,
        LossTerm::Separation,
        LossTerm::Ib,
        LossTerm::Consistency,
        LossTerm::Sparsity,
        LossTerm::Diversity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Cluster => "cluster",
            LossTerm::Separation => "separation",
            LossTerm::Ib => "ib",
            LossTerm::Consistency => "consistency",
            LossTerm::Sparsity => "sparsity",
            LossTerm::Diversity => "diversity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cluster: f64,
    pub separation: f64,
    pub ib: f64,
    pub consistency: f64,
    pub sparsity: f64,
    pub diversity: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn term(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::Cluster => self.cluster,
            LossTerm::Separation => self.separation,
            LossTerm::Ib => self.ib,
            LossTerm::Consistency => self.consistency,
            LossTerm::Sparsity => self.sparsity,
            LossTerm::Diversity => self.diversity,
        }
    }

    /// Weighted sum of the unweighted parts.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        LossTerm::ALL
            .iter()
            .map(|&t| w.coefficient(t) * self.term(t))
            .sum()
    }

    /// Element-wise mean over a non-empty slice.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut acc = LossBreakdown::default();
        for b in items {
            acc.ce += b.ce;
            acc.cluster += b.cluster;
            acc.separation += b.separation;
            acc.ib += b.ib;
            acc.consistency += b.consistency;
            acc.sparsity += b.sparsity;
            acc.diversity += b.diversity;
            acc.total += b.total;
        }
        LossBreakdown {
            ce: acc.ce / n,
            cluster: acc.cluster / n,
            separation: acc.separation / n,
            ib: acc.ib / n,
            consistency: acc.consistency / n,
            sparsity: acc.sparsity / n,
            diversity: acc.diversity / n,
            total: acc.total / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbMask {
    /// Sorted masked region indices.
    pub masked_regions: Vec<usize>,
    pub ratio: f64,
}

impl PerturbMask {
    /// Samples `⌊ratio · regions⌋` regions uniformly without replacement.
    pub fn sample(regions: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!(
                "perturbation ratio must lie in [0, 1), got {ratio}"
            )));
        }
        let count = (ratio * regions as f64 + 1e-9).floor() as usize;
        let mut masked_regions = index::sample(rng, regions, count).into_vec();
        masked_regions.sort_unstable();
        Ok(Self {
            masked_regions,
            ratio,
        })
    }

    pub fn as_flags(&self, regions: usize) -> Vec<bool> {
        let mut flags = vec![false; regions];
        for &r in &self.masked_regions {
            flags[r] = true;
        }
        flags
    }

    pub fn apply(&self, graph: &BrainGraph) -> BrainGraph {
        graph.mask_nodes(&self.as_flags(graph.node_count()))
    }
}

/// Zeroes every edge incident to a random `⌊r · C⌋` subset of regions.
pub fn perturb(graph: &BrainGraph, r: f64, rng: &mut impl Rng) -> Result<(BrainGraph, PerturbMask)> {
    let mask = PerturbMask::sample(graph.node_count(), r, rng)?;
    Ok((mask.apply(graph), mask))
}

/// Cross-entropy, clustering, and separation terms for one graph.
pub fn loss_pred(
    probs: &[f64],
    distances: &[f64],
    label: usize,
    margin: f64,
    proto_class: &[usize],
) -> Result<(f64, f64, f64)> {
    if label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside [0, {})",
            probs.len()
        )));
    }
    let ce = -probs[label].ln();
    let own = distances
        .iter()
        .zip(proto_class)
        .filter(|(_, &c)| c == label)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);
    let other = distances
        .iter()
        .zip(proto_class)
        .filter(|(_, &c)| c != label)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);
    let cluster = if own.is_finite() { own } else { 0.0 };
    let separation = if other.is_finite() {
        (margin - other).max(0.0)
    } else {
        0.0
    };
    Ok((ce, cluster, separation))
}

/// `KL(probs ‖ probs_pert) + ‖s − s_pert‖²`.
pub fn consistency_loss(probs: &[f64], probs_pert: &[f64], s: &[f64], s_pert: &[f64]) -> f64 {
    let kl: f64 = probs
        .iter()
        .zip(probs_pert)
        .map(|(&p, &q)| p * (p.max(KL_LOG_FLOOR).ln() - q.max(KL_LOG_FLOOR).ln()))
        .sum();
    let sq: f64 = s.iter().zip(s_pert).map(|(a, b)| (a - b) * (a - b)).sum();
    kl + sq
}

/// Mean L1 norm of the attention rows.
pub fn sparsity_loss(attention: &Tensor) -> f64 {
    attention.data().iter().map(|a| a.abs()).sum::<f64>() / attention.rows() as f64
}

/// Mean squared distance over ordered pairs of distinct prototypes.
pub fn diversity_loss(prototypes: &Tensor) -> f64 {
    let m = prototypes.rows();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += prototypes
                    .row(i)
                    .iter()
                    .zip(prototypes.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
        }
    }
    total / (m * (m - 1)) as f64
}

/// Randomness consumed by one training evaluation of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub noise: Vec<f64>,
    pub mask: PerturbMask,
}

impl TrainingDraw {
    pub fn sample_noise(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Tape handles for every loss term.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub ce: Var,
    pub cluster: Var,
    pub separation: Var,
    pub ib: Var,
    pub consistency: Var,
    pub sparsity: Var,
    pub diversity: Var,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn term(&self, term: LossTerm) -> Var {
        match term {
            LossTerm::Ce => self.ce,
            LossTerm::Cluster => self.cluster,
            LossTerm::Separation => self.separation,
            LossTerm::Ib => self.ib,
            LossTerm::Consistency => self.consistency,
            LossTerm::Sparsity => self.sparsity,
            LossTerm::Diversity => self.diversity,
        }
    }

    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            ce: tape.scalar(self.ce),
            cluster: tape.scalar(self.cluster),
            separation: tape.scalar(self.separation),
            ib: tape.scalar(self.ib),
            consistency: tape.scalar(self.consistency),
            sparsity: tape.scalar(self.sparsity),
            diversity: tape.scalar(self.diversity),
            total: tape.scalar(self.total),
        }
    }
}

/// Records the whole objective for one graph. The clean and perturbed passes
/// share `draw.noise`; the IB term uses the clean posterior only and is
/// averaged over its latent rows.
pub fn objective_on_tape(
    tape: &mut Tape,
    pv: &ParamVars,
    params: &ModelParams,
    graph: &BrainGraph,
    draw: &TrainingDraw,
    weights: &LossWeights,
) -> Result<ObjectiveVars> {
    let label = graph.label;
    if label >= params.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} outside [0, {})",
            params.num_classes
        )));
    }
    let m = params.num_prototypes();
    let clean = forward_on_tape(tape, pv, params, graph, Some(&draw.noise))?;
    let perturbed_graph = draw.mask.apply(graph);
    let pert = forward_on_tape(tape, pv, params, &perturbed_graph, Some(&draw.noise))?;

    let ce = tape.select(clean.log_probs, label);
    let ce = tape.scale(ce, -1.0);

    let own = params.prototypes_of(label);
    let cluster = if own.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        tape.min_of(clean.dist, &own)
    };

    let other = params.prototypes_not_of(label);
    let separation = if other.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let nearest = tape.min_of(clean.dist, &other);
        let gap = tape.scale(nearest, -1.0);
        let gap = tape.add_scalar(gap, weights.margin);
        tape.relu(gap)
    };

    let rows = tape.shape(clean.mu)[0];
    let ib = kl_diag_gaussian_var(tape, clean.mu, clean.log_var);
    let ib = tape.scale(ib, 1.0 / rows as f64);

    let p = tape.clamp_min(clean.probs, KL_LOG_FLOOR);
    let log_p = tape.log(p);
    let q = tape.clamp_min(pert.probs, KL_LOG_FLOOR);
    let log_q = tape.log(q);
    let log_ratio = tape.sub(log_p, log_q);
    let kl = tape.mul(clean.probs, log_ratio);
    let kl = tape.sum(kl);
    let act_diff = tape.sub(clean.act, pert.act);
    let act_sq = tape.square(act_diff);
    let act_sq = tape.sum(act_sq);
    let consistency = tape.add(kl, act_sq);

    let abs = tape.abs(pv.attention);
    let sparsity = tape.sum(abs);
    let sparsity = tape.scale(sparsity, 1.0 / m as f64);

    // Σ_{i≠j} ‖p_i − p_j‖² = 2M·Σ‖p_i‖² − 2‖Σ p_i‖²
    let diversity = if m < 2 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let sq = tape.square(pv.prototypes);
        let sq = tape.sum(sq);
        let ones = tape.constant(Tensor::filled(1, m, 1.0));
        let centroid_sum = tape.matmul(ones, pv.prototypes);
        let cs = tape.square(centroid_sum);
        let cs = tape.sum(cs);
        let a = tape.scale(sq, 2.0 * m as f64);
        let b = tape.scale(cs, 2.0);
        let pair_sum = tape.sub(a, b);
        tape.scale(pair_sum, 1.0 / (m * (m - 1)) as f64)
    };

    let mut total = ce;
    for (term, var) in [
        (LossTerm::Cluster, cluster),
        (LossTerm::Separation, separation),
        (LossTerm::Ib, ib),
        (LossTerm::Consistency, consistency),
        (LossTerm::Sparsity, sparsity),
        (LossTerm::Diversity, diversity),
    ] {
        let weighted = tape.scale(var, weights.coefficient(term));
        total = tape.add(total, weighted);
    }

    Ok(ObjectiveVars {
        ce,
        cluster,
        separation,
        ib,
        consistency,
        sparsity,
        diversity,
        total,
    })
}

/// Loss breakdown for one graph under a fixed draw.
pub fn total_loss_with(
    graph: &BrainGraph,
    params: &ModelParams,
    weights: &LossWeights,
    draw: &TrainingDraw,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let pv = ParamVars::constants(&mut tape, params);
    let obj = objective_on_tape(&mut tape, &pv, params, graph, draw, weights)?;
    tape.check()?;
    Ok(obj.breakdown(&tape))
}

/// Draws noise and a perturbation mask from `rng`, then evaluates the loss.
pub fn total_loss(
    graph: &BrainGraph,
    params: &ModelParams,
    weights: &LossWeights,
    perturb_ratio: f64,
    rng: &mut impl Rng,
) -> Result<LossBreakdown> {
    let noise = TrainingDraw::sample_noise(params.latent_dim(), rng);
    let mask = PerturbMask::sample(graph.node_count(), perturb_ratio, rng)?;
    total_loss_with(graph, params, weights, &TrainingDraw { noise, mask })
}

/// Loss breakdown and the gradient of `total` for every learnable tensor.
pub fn loss_and_grad(
    graph: &BrainGraph,
    params: &ModelParams,
    weights: &LossWeights,
    draw: &TrainingDraw,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (pv, vars) = ParamVars::params(&mut tape, params);
    let obj = objective_on_tape(&mut tape, &pv, params, graph, draw, weights)?;
    tape.check()?;
    let grads = tape.backward(obj.total);
    Ok((
        obj.breakdown(&tape),
        vars.iter().map(|&v| grads.get(v)).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::build_graph;
    use crate::model::{encode, ModelConfig};
    use crate::numerics::kl_diag_gaussian;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triangle() -> BrainGraph {
        let adj = Tensor::from_rows(&[
            vec![0.0, 0.5, 0.7],
            vec![0.5, 0.0, -0.3],
            vec![0.7, -0.3, 0.0],
        ])
        .unwrap();
        build_graph(&adj, 0).unwrap()
    }

    fn random_graph(c: usize, label: usize, rng: &mut ChaCha8Rng) -> BrainGraph {
        let mut adj = Tensor::zeros(c, c);
        for j in 0..c {
            for k in (j + 1)..c {
                let v = rng.random_range(-1.0..1.0);
                adj.set(j, k, v);
                adj.set(k, j, v);
            }
        }
        build_graph(&adj, label).unwrap()
    }

    #[test]
    fn perturb_zero_ratio_is_identity() {
        let g = triangle();
        let (p, mask) = perturb(&g, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p, g);
        assert!(mask.masked_regions.is_empty());
    }

    #[test]
    fn masking_middle_of_triangle_keeps_outer_edge() {
        let g = triangle();
        let mask = PerturbMask {
            masked_regions: vec![1],
            ratio: 0.34,
        };
        let p = mask.apply(&g);
        let nonzero: Vec<(usize, usize)> = (0..3)
            .flat_map(|u| (0..3).map(move |v| (u, v)))
            .filter(|&(u, v)| p.adjacency.get(u, v) != 0.0)
            .collect();
        assert_eq!(nonzero, vec![(0, 2), (2, 0)]);
    }

    #[test]
    fn mask_size_is_floor_of_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = PerturbMask::sample(116, 0.25, &mut rng).unwrap();
        assert_eq!(m.masked_regions.len(), 29);
        assert!(m.masked_regions.windows(2).all(|w| w[0] < w[1]));
        assert!(PerturbMask::sample(10, 1.0, &mut rng).is_err());
    }

    #[test]
    fn loss_pred_fixtures() {
        let classes = [0, 0, 1, 1];
        let (ce, _, _) = loss_pred(&[1.0, 0.0], &[1.0; 4], 0, 1.0, &classes).unwrap();
        assert_eq!(ce, 0.0);
        let (_, cluster, sep) =
            loss_pred(&[0.5, 0.5], &[0.0, 3.0, 2.0, 4.0], 0, 1.0, &classes).unwrap();
        assert_eq!((cluster, sep), (0.0, 0.0));
        let (_, _, sep) = loss_pred(&[0.5, 0.5], &[0.0, 3.0, 0.5, 4.0], 0, 1.0, &classes).unwrap();
        assert_eq!(sep, 0.5);
        assert!(loss_pred(&[0.5, 0.5], &[0.0; 4], 2, 1.0, &classes).is_err());
        // Single class: no other prototypes, so separation is vacuous.
        let (_, _, sep) = loss_pred(&[1.0], &[0.1, 0.2], 0, 1.0, &[0, 0]).unwrap();
        assert_eq!(sep, 0.0);
    }

    #[test]
    fn consistency_fixtures() {
        let p = [0.3, 0.7];
        let s = [0.2, 0.5, 0.3];
        assert_eq!(consistency_loss(&p, &p, &s, &s), 0.0);
        let kl = consistency_loss(&[1.0, 0.0], &[0.5, 0.5], &s, &s);
        assert!((kl - 2f64.ln()).abs() < 1e-15);
        let sq = consistency_loss(&p, &p, &[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(sq, 2.0);
    }

    #[test]
    fn sparsity_fixtures() {
        assert_eq!(sparsity_loss(&Tensor::zeros(3, 4)), 0.0);
        let a = Tensor::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.5, 0.0, 0.0]]).unwrap();
        assert_eq!(sparsity_loss(&a), 1.25);
        let doubled = a.map(|x| 2.0 * x);
        assert_eq!(sparsity_loss(&doubled), 2.5);
    }

    #[test]
    fn diversity_fixtures() {
        assert_eq!(diversity_loss(&Tensor::filled(4, 3, 0.7)), 0.0);
        let p = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(diversity_loss(&p), 2.0);
    }

    proptest! {
        #[test]
        fn diversity_is_translation_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 12),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let p = Tensor::from_vec(4, 3, vals).unwrap();
            let mut q = p.clone();
            for r in 0..4 {
                for (x, s) in q.row_mut(r).iter_mut().zip(&shift) {
                    *x += s;
                }
            }
            prop_assert!((diversity_loss(&p) - diversity_loss(&q)).abs() < 1e-9);
        }

        #[test]
        fn consistency_is_nonnegative(
            a in proptest::collection::vec(0.01f64..1.0, 3),
            b in proptest::collection::vec(0.01f64..1.0, 3),
            s in proptest::collection::vec(0.0f64..1.0, 4),
            t in proptest::collection::vec(0.0f64..1.0, 4),
        ) {
            let norm = |v: Vec<f64>| { let z: f64 = v.iter().sum(); v.into_iter().map(|x| x / z).collect::<Vec<_>>() };
            let (p, q) = (norm(a), norm(b));
            prop_assert!(consistency_loss(&p, &q, &s, &t) >= -1e-15);
        }

        #[test]
        fn perturb_touches_only_incident_edges(seed in 0u64..10_000, c in 2usize..10, r in 0.0f64..0.99) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(c, 0, &mut rng);
            let (p, mask) = perturb(&g, r, &mut rng).unwrap();
            let flags = mask.as_flags(c);
            prop_assert_eq!(mask.masked_regions.len(), (r * c as f64 + 1e-9).floor() as usize);
            for u in 0..c {
                for v in 0..c {
                    let expected = if flags[u] || flags[v] { 0.0 } else { g.adjacency.get(u, v) };
                    prop_assert_eq!(p.adjacency.get(u, v), expected);
                }
            }
            prop_assert_eq!(&p.node_features, &p.adjacency);
        }
    }

    fn setup(seed: u64) -> (ModelParams, BrainGraph, TrainingDraw) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::init(&ModelConfig::tiny(), 6, 2, &mut rng).unwrap();
        for a in params.attention.data_mut() {
            *a = rng.random_range(-0.5..0.5);
        }
        let label = (seed % 2) as usize;
        let g = random_graph(6, label, &mut rng);
        let noise = TrainingDraw::sample_noise(params.latent_dim(), &mut rng);
        let mask = PerturbMask::sample(6, 0.34, &mut rng).unwrap();
        (params, g, TrainingDraw { noise, mask })
    }

    #[test]
    fn tape_terms_match_plain_formulas() {
        for seed in 0..5 {
            let (params, g, draw) = setup(seed);
            let w = LossWeights::default();
            let b = total_loss_with(&g, &params, &w, &draw).unwrap();
            let clean = encode(&g, &params, Some(&draw.noise)).unwrap();
            let pert = encode(&draw.mask.apply(&g), &params, Some(&draw.noise)).unwrap();
            let (ce, cluster, sep) =
                loss_pred(&clean.probs, &clean.distances, g.label, w.margin, &params.proto_class)
                    .unwrap();
            assert!((b.ce - ce).abs() < 1e-12);
            assert!((b.cluster - cluster).abs() < 1e-12);
            assert!((b.separation - sep).abs() < 1e-12);
            let cons = consistency_loss(&clean.probs, &pert.probs, &clean.activations, &pert.activations);
            assert!((b.consistency - cons).abs() < 1e-12);
            assert!((b.sparsity - sparsity_loss(&params.attention)).abs() < 1e-12);
            assert!((b.diversity - diversity_loss(&params.prototypes)).abs() < 1e-12);

            let m = params.num_prototypes();
            let ib: f64 = clean
                .codes
                .iter()
                .map(|c| {
                    kl_diag_gaussian(
                        &Tensor::row_vector(c.mu.clone()),
                        &Tensor::row_vector(c.log_var.clone()),
                    )
                })
                .sum::<f64>()
                / m as f64;
            assert!((b.ib - ib).abs() < 1e-12);
            assert!((b.total - b.recombine(&w)).abs() < 1e-10);
        }
    }

    #[test]
    fn toggling_weights() {
        let (params, g, mut draw) = setup(3);
        let all_zero = LossWeights {
            beta: 0.0,
            lambda_cluster: 0.0,
            lambda_separation: 0.0,
            lambda_consistency: 0.0,
            lambda_sparsity: 0.0,
            lambda_diversity: 0.0,
            margin: 1.0,
        };
        let b = total_loss_with(&g, &params, &all_zero, &draw).unwrap();
        assert_eq!(b.total, b.ce);

        draw.mask.masked_regions.clear();
        let w = LossWeights {
            lambda_consistency: 0.0,
            ..LossWeights::default()
        };
        let b = total_loss_with(&g, &params, &w, &draw).unwrap();
        assert_eq!(b.consistency, 0.0);
        let base = b.ce + w.lambda_cluster * b.cluster + w.lambda_separation * b.separation
            + w.beta * b.ib
            + w.lambda_sparsity * b.sparsity
            - w.lambda_diversity * b.diversity;
        assert!((b.total - base).abs() < 1e-12);
    }

    #[test]
    fn shared_readout_ib_is_single_posterior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let config = ModelConfig {
            shared_readout: true,
            ..ModelConfig::tiny()
        };
        let params = ModelParams::init(&config, 6, 2, &mut rng).unwrap();
        let g = random_graph(6, 1, &mut rng);
        let b = total_loss(&g, &params, &LossWeights::default(), 0.25, &mut rng).unwrap();
        let clean = encode(&g, &params, None).unwrap();
        let kl = kl_diag_gaussian(
            &Tensor::row_vector(clean.codes[0].mu.clone()),
            &Tensor::row_vector(clean.codes[0].log_var.clone()),
        );
        assert!((b.ib - kl).abs() < 1e-12);
    }
}
