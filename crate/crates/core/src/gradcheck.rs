//! Finite-difference check of the analytic gradients of every loss term.
//!
//! Each term is differentiated on the tape and compared against central
//! differences at a sample of parameter coordinates. Coordinates whose `±h`
//! evaluations take a different branch at some kink (ReLU, |x|, clamp or a
//! min over prototypes) are skipped and counted, since the derivative is not
//! defined across the kink.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::connectome::{build_graph, threshold_topk, BrainGraph};
use crate::error::{Error, Result};
use crate::model::{encode, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{objective_on_tape, LossTerm, LossWeights, PerturbMask, TrainingDraw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub graphs: usize,
    pub nodes: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
    /// Coordinates sampled from each parameter tensor (all of them if smaller).
    pub coords_per_tensor: usize,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub perturb_ratio: f64,
    /// Test hook: add a bias to this term's analytic gradient so the check must fail.
    #[serde(skip)]
    pub corrupt: Option<LossTerm>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            graphs: 20,
            nodes: 6,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            coords_per_tensor: 12,
            model: ModelConfig::tiny(),
            weights: LossWeights::default(),
            perturb_ratio: 0.25,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: LossTerm,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Parameter tensor and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub terms: Vec<TermReport>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for t in &self.terms {
            out.push_str(&format!(
                "{:<12} {} checked={} skipped={} max_rel_err={:.3e} at {}\n",
                t.term.name(),
                if t.passed { "ok  " } else { "FAIL" },
                t.checked,
                t.skipped_kinks,
                t.max_rel_error,
                t.worst
                    .as_ref()
                    .map_or_else(|| "-".to_string(), |(n, i)| format!("{n}[{i}]"))
            ));
        }
        out
    }
}

fn random_graph(nodes: usize, rng: &mut ChaCha8Rng) -> Result<BrainGraph> {
    let mut fc = Tensor::zeros(nodes, nodes);
    for i in 0..nodes {
        for j in (i + 1)..nodes {
            let v: f64 = rng.random_range(-1.0..1.0);
            fc.set(i, j, v);
            fc.set(j, i, v);
        }
    }
    let label = rng.random_range(0..2);
    build_graph(&threshold_topk(&fc, 0.6), label)
}

fn random_params(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let mut p = ModelParams::init(&cfg.model, cfg.nodes, 2, rng)?;
    // Move off the all-zero starting points so |x| and the attention softmax
    // are exercised away from their special values.
    let jitter = |t: &mut Tensor, s: f64, rng: &mut ChaCha8Rng| {
        for v in t.data_mut() {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    };
    jitter(&mut p.attention, 0.5, rng);
    jitter(&mut p.head_w, 0.2, rng);
    jitter(&mut p.head_b, 0.2, rng);
    jitter(&mut p.mu_b, 0.1, rng);
    jitter(&mut p.logvar_b, 0.1, rng);
    for layer in &mut p.layers {
        jitter(&mut layer.b1, 0.1, rng);
    }
    Ok(p)
}

struct Evaluation {
    values: Vec<f64>,
    signature: u64,
}

fn evaluate_terms(
    params: &ModelParams,
    graph: &BrainGraph,
    draw: &TrainingDraw,
    weights: &LossWeights,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let pv = ParamVars::constants(&mut tape, params);
    let obj = objective_on_tape(&mut tape, &pv, params, graph, draw, weights)?;
    tape.check()?;
    Ok(Evaluation {
        values: LossTerm::ALL.iter().map(|&t| tape.scalar(obj.term(t))).collect(),
        signature: tape.branch_signature(),
    })
}

/// Runs the check on `cfg.graphs` random graphs and reports each term once.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.nodes < 2 || cfg.graphs == 0 || !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument(
            "gradcheck needs nodes >= 2, graphs >= 1 and a positive step".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terms = LossTerm::ALL;
    let mut reports: Vec<TermReport> = terms
        .iter()
        .map(|&term| TermReport {
            term,
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst: None,
            passed: true,
        })
        .collect();

    for _ in 0..cfg.graphs {
        let graph = random_graph(cfg.nodes, &mut rng)?;
        let mut params = random_params(cfg, &mut rng)?;
        let draw = TrainingDraw {
            noise: TrainingDraw::sample_noise(params.latent_dim(), &mut rng),
            mask: PerturbMask::sample(cfg.nodes, cfg.perturb_ratio, &mut rng)?,
        };
        let names = params.tensor_names();
        // Random prototypes usually sit further than the margin from every
        // latent code, leaving the separation hinge flat. Pick the margin so
        // the hinge is active at the sampled point.
        let mut weights = cfg.weights;
        if cfg.weights.lambda_separation != 0.0 {
            let enc = encode(&graph, &params, Some(&draw.noise))?;
            let nearest = params
                .prototypes_not_of(graph.label)
                .into_iter()
                .map(|k| enc.distances[k])
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                weights.margin = nearest + rng.random_range(0.5..1.5);
            }
        }

        let mut tape = Tape::new();
        let (pv, vars) = ParamVars::params(&mut tape, &params);
        let obj = objective_on_tape(&mut tape, &pv, &params, &graph, &draw, &weights)?;
        tape.check()?;
        let base_signature = tape.branch_signature();
        let analytic: Vec<Vec<Tensor>> = terms
            .iter()
            .map(|&t| {
                let g = tape.backward(obj.term(t));
                vars.iter().map(|&v| g.get(v)).collect()
            })
            .collect();

        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        for (ti, &size) in sizes.iter().enumerate() {
            let coords: Vec<usize> = if size <= cfg.coords_per_tensor {
                (0..size).collect()
            } else {
                let mut c = sample(&mut rng, size, cfg.coords_per_tensor).into_vec();
                c.sort_unstable();
                c
            };
            for idx in coords {
                let original = params.tensors()[ti].data()[idx];
                params.tensors_mut()[ti].data_mut()[idx] = original + cfg.step;
                let plus = evaluate_terms(&params, &graph, &draw, &weights)?;
                params.tensors_mut()[ti].data_mut()[idx] = original - cfg.step;
                let minus = evaluate_terms(&params, &graph, &draw, &weights)?;
                params.tensors_mut()[ti].data_mut()[idx] = original;

                let crosses_kink =
                    plus.signature != base_signature || minus.signature != base_signature;
                for (k, report) in reports.iter_mut().enumerate() {
                    if crosses_kink {
                        report.skipped_kinks += 1;
                        continue;
                    }
                    let mut a = analytic[k][ti].data()[idx];
                    if cfg.corrupt == Some(report.term) {
                        a += 1e-2 * (1.0 + a.abs());
                    }
                    let n = (plus.values[k] - minus.values[k]) / (2.0 * cfg.step);
                    let rel = (a - n).abs() / a.abs().max(n.abs()).max(cfg.abs_floor);
                    report.checked += 1;
                    if report.worst.is_none() || rel > report.max_rel_error {
                        report.max_rel_error = rel;
                        report.worst = Some((names[ti].clone(), idx));
                    }
                }
            }
        }
    }

    for r in &mut reports {
        r.passed = r.checked > 0 && r.max_rel_error < cfg.tolerance;
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradcheckReport {
        terms: reports,
        passed,
    })
}
