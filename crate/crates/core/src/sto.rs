//! One spatial-transport optimization step over a set of token pairs.
//!
//! For each pair the source map is transported to a target placed relative to
//! the reference centroid, and the reverse problem (reference moved relative
//! to the source) is solved as well. Losses are summed; gradients flow to the
//! source through the transport potential and to the reference through the
//! explicit attention factor of the cost. Centroids are held constant.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cost::{
    attribute_cost, combined_cost, dist_cost_matrix, expand_cell_costs, positional_factors, CostConfig, CostMatrix,
    CostVariant, StOrientation,
};
use crate::error::{shape_mismatch, Error, Result};
use crate::grid::{
    build_target_distribution, compute_centroid, default_target_sigma, gaussian_at, softmax_from_latent, Centroid,
    Field, GridMap, Smoother, SpatialRelation,
};
use crate::ot::{regularized_cost, sinkhorn_warm, transport_loss, SinkhornResult, SolverOptions, TransportProblem};

/// One source/reference pair and the relation the source should satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpatialSpec {
    pub source: usize,
    pub reference: usize,
    pub relation: SpatialRelation,
}

impl SpatialSpec {
    pub fn new(source: usize, reference: usize, relation: SpatialRelation) -> Self {
        SpatialSpec {
            source,
            reference,
            relation,
        }
    }

    pub fn validate(&self, tokens: usize) -> std::result::Result<(), String> {
        if self.source >= tokens || self.reference >= tokens {
            return Err(format!(
                "spec ({}, {}) refers to a token outside 0..{tokens}",
                self.source, self.reference
            ));
        }
        if self.source == self.reference {
            return Err(format!("spec pairs token {} with itself", self.source));
        }
        Ok(())
    }
}

pub fn reverse_relation(relation: SpatialRelation) -> SpatialRelation {
    relation.reverse()
}

/// Solver and target settings shared by every pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoConfig {
    pub cost: CostConfig,
    /// Entropic regularization strength.
    pub eps_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Spread of the target Gaussian; `None` uses side / 8.
    pub target_sigma: Option<f64>,
}

impl Default for StoConfig {
    fn default() -> Self {
        StoConfig {
            cost: CostConfig::default(),
            eps_reg: 0.05,
            tol: 1e-6,
            max_iter: 10_000,
            target_sigma: None,
        }
    }
}

impl StoConfig {
    pub fn solver(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }

    pub fn sigma_for(&self, side: usize) -> f64 {
        self.target_sigma.unwrap_or_else(|| default_target_sigma(side))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        self.cost.validate()?;
        if !(self.eps_reg > 0.0) {
            return Err(format!("eps_reg must be > 0, got {}", self.eps_reg));
        }
        if !(self.tol > 0.0) {
            return Err(format!("tol must be > 0, got {}", self.tol));
        }
        if self.max_iter == 0 {
            return Err("max_iter must be >= 1".into());
        }
        if let Some(s) = self.target_sigma {
            if !(s > 0.0) {
                return Err(format!("target_sigma must be > 0, got {s}"));
            }
        }
        Ok(())
    }
}

/// How the reference map enters the loss, for the gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferencePath {
    /// Reference only fixes the centroid (stop-gradient).
    None,
    /// `dC/dA_w` for each cell, spread along `orientation`.
    CostFactor {
        factor: Vec<f64>,
        orientation: StOrientation,
    },
    /// The reference map is the target marginal itself.
    TargetMarginal,
}

/// A transport problem plus what is needed to differentiate it.
#[derive(Debug, Clone)]
pub struct PairProblem {
    pub problem: TransportProblem,
    pub relation: SpatialRelation,
    pub reference_centroid: Centroid,
    pub reference_path: ReferencePath,
}

/// Precomputed distance costs for a grid side.
#[derive(Debug, Clone)]
pub struct CostCache {
    side: usize,
    p_norm: f64,
    dist: CostMatrix,
    manhattan: Option<CostMatrix>,
    euclid: Option<CostMatrix>,
}

impl CostCache {
    pub fn new(side: usize, cfg: &CostConfig) -> Self {
        let dist = dist_cost_matrix(side, cfg.p_norm);
        let (manhattan, euclid) = match cfg.variant {
            CostVariant::Manhattan | CostVariant::Euclidean | CostVariant::DistanceMix => {
                (Some(dist_cost_matrix(side, 1.0)), Some(dist_cost_matrix(side, 2.0)))
            }
            _ => (None, None),
        };
        CostCache {
            side,
            p_norm: cfg.p_norm,
            dist,
            manhattan,
            euclid,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn matches(&self, side: usize, cfg: &CostConfig) -> bool {
        self.side == side && self.p_norm == cfg.p_norm
    }

    fn manhattan(&self) -> CostMatrix {
        self.manhattan
            .clone()
            .unwrap_or_else(|| dist_cost_matrix(self.side, 1.0))
    }

    fn euclid(&self) -> CostMatrix {
        self.euclid.clone().unwrap_or_else(|| dist_cost_matrix(self.side, 2.0))
    }
}

fn flat_map(g: &GridMap) -> Vec<f64> {
    // Guard against round-off drift so the marginal check stays exact.
    let total = g.total();
    g.weights().iter().map(|w| w / total).collect()
}

/// Builds the transport problem moving `src` relative to `reference`.
///
/// `object_center` is the target center for [`SpatialRelation::None`] pairs,
/// drawn by the caller; it is ignored for other relations.
pub fn build_pair_problem(
    src: &GridMap,
    reference: &GridMap,
    relation: SpatialRelation,
    omega: f64,
    cfg: &StoConfig,
    object_center: Option<(f64, f64)>,
) -> Result<PairProblem> {
    let cache = CostCache::new(src.side(), &cfg.cost);
    build_pair_problem_cached(src, reference, relation, omega, cfg, object_center, &cache)
}

pub fn build_pair_problem_cached(
    src: &GridMap,
    reference: &GridMap,
    relation: SpatialRelation,
    omega: f64,
    cfg: &StoConfig,
    object_center: Option<(f64, f64)>,
    cache: &CostCache,
) -> Result<PairProblem> {
    let side = src.side();
    if reference.side() != side {
        return Err(shape_mismatch(
            format!("{side}x{side} source"),
            format!("{0}x{0} reference", reference.side()),
        ));
    }
    let cache_owned;
    let cache = if cache.matches(side, &cfg.cost) {
        cache
    } else {
        cache_owned = CostCache::new(side, &cfg.cost);
        &cache_owned
    };
    let ref_centroid = compute_centroid(reference)?;
    compute_centroid(src)?;
    let mu = flat_map(src);
    let n = side * side;
    let lambda = cfg.cost.lambda_mix;
    let orientation = cfg.cost.st_orientation;

    let (nu, cost, reference_path) = match relation {
        SpatialRelation::AttributeOf => (flat_map(reference), attribute_cost(side), ReferencePath::TargetMarginal),
        SpatialRelation::None => {
            let (cx, cy) = object_center.unwrap_or(((side as f64 - 1.0) / 2.0, (side as f64 - 1.0) / 2.0));
            let target = gaussian_at(side, cx, cy, cfg.sigma_for(side))?;
            let st = expand_cell_costs(reference.weights(), orientation);
            let cost = combined_cost(&cache.dist, &st, lambda)?;
            let path = ReferencePath::CostFactor {
                factor: vec![1.0 - lambda; n],
                orientation,
            };
            (target.weights().to_vec(), cost, path)
        }
        directional => {
            let target = build_target_distribution(directional, ref_centroid, side, cfg.sigma_for(side))?;
            let factors = positional_factors(side, directional, ref_centroid, omega, cfg.cost.eps_stab);
            let (cost, path) = match cfg.cost.variant {
                CostVariant::Full => {
                    let flat: Vec<f64> = factors.iter().zip(reference.weights()).map(|(d, a)| d * a).collect();
                    let st = expand_cell_costs(&flat, orientation);
                    let path = ReferencePath::CostFactor {
                        factor: factors.iter().map(|d| (1.0 - lambda) * d).collect(),
                        orientation,
                    };
                    (combined_cost(&cache.dist, &st, lambda)?, path)
                }
                CostVariant::NoOverlap => {
                    let flat: Vec<f64> = factors.iter().map(|d| d / n as f64).collect();
                    let st = expand_cell_costs(&flat, orientation);
                    (combined_cost(&cache.dist, &st, lambda)?, ReferencePath::None)
                }
                CostVariant::Manhattan => (cache.manhattan(), ReferencePath::None),
                CostVariant::Euclidean => (cache.euclid(), ReferencePath::None),
                CostVariant::DistanceMix => {
                    let mix = combined_cost(&cache.manhattan(), &cache.euclid(), 0.5)?;
                    (mix, ReferencePath::None)
                }
            };
            (target.weights().to_vec(), cost, path)
        }
    };
    if !cost.is_finite_nonneg() {
        return Err(Error::NonFinite("pair cost".into()));
    }
    let problem = TransportProblem::new(mu, nu, cost, cfg.eps_reg)?;
    Ok(PairProblem {
        problem,
        relation,
        reference_centroid: ref_centroid,
        reference_path,
    })
}

/// Loss of one direction of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionLoss {
    /// `<P, C>`.
    pub transport: f64,
    /// Entropic objective; the quantity the gradients differentiate.
    pub regularized: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub forward: DirectionLoss,
    pub reverse: DirectionLoss,
}

impl PairLoss {
    pub fn total(&self) -> f64 {
        self.forward.transport + self.reverse.transport
    }

    pub fn regularized(&self) -> f64 {
        self.forward.regularized + self.reverse.regularized
    }
}

/// Losses and map-space gradients for one STO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StoLossReport {
    pub pairs: Vec<PairLoss>,
    /// Sum of transport losses over pairs and directions.
    pub total: f64,
    /// Sum of entropic objectives.
    pub objective: f64,
    /// `dObjective / dA` per token, flattened.
    pub map_gradients: Vec<Vec<f64>>,
    pub normalized: f64,
}

impl StoLossReport {
    pub fn all_converged(&self) -> bool {
        self.pairs.iter().all(|p| p.forward.converged && p.reverse.converged)
    }

    pub fn solver_iterations(&self) -> usize {
        self.pairs
            .iter()
            .map(|p| p.forward.iterations + p.reverse.iterations)
            .sum()
    }
}

/// Solves a pair problem and returns its loss and the contributions to the
/// source- and reference-map gradients.
pub fn solve_direction(
    pair: &PairProblem,
    opts: SolverOptions,
    warm: Option<(&[f64], &[f64])>,
) -> Result<(DirectionLoss, SinkhornResult, Vec<f64>, Vec<f64>)> {
    let result = sinkhorn_warm(&pair.problem, opts, warm)?;
    let transport = transport_loss(&result.plan, &pair.problem.cost)?;
    let regularized = regularized_cost(&result, &pair.problem.cost)?;
    let n = pair.problem.n();

    let mean_f = result.dual_f.iter().sum::<f64>() / n as f64;
    let src_grad: Vec<f64> = result.dual_f.iter().map(|f| f - mean_f).collect();
    let ref_grad = match &pair.reference_path {
        ReferencePath::None => vec![0.0; n],
        ReferencePath::CostFactor { factor, orientation } => {
            // dL/dA_w = factor_w * (marginal of the plan along the spread axis).
            let marginal = match orientation {
                StOrientation::SourceIndexed => row_sums(&result.plan, n),
                StOrientation::TargetIndexed => col_sums(&result.plan, n),
            };
            factor.iter().zip(&marginal).map(|(d, m)| d * m).collect()
        }
        ReferencePath::TargetMarginal => {
            let mean_g = result.dual_g.iter().sum::<f64>() / n as f64;
            result.dual_g.iter().map(|g| g - mean_g).collect()
        }
    };
    if src_grad.iter().chain(&ref_grad).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pair gradient".into()));
    }
    let loss = DirectionLoss {
        transport,
        regularized,
        iterations: result.iterations,
        converged: result.converged,
    };
    Ok((loss, result, src_grad, ref_grad))
}

fn row_sums(plan: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|u| plan[u * n..(u + 1) * n].iter().sum()).collect()
}

fn col_sums(plan: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for u in 0..n {
        for (o, p) in out.iter_mut().zip(&plan[u * n..(u + 1) * n]) {
            *o += p;
        }
    }
    out
}

/// Forward (`a` relative to `b`) and reverse (`b` relative to `a`) transport losses.
pub fn bidirectional_loss(
    a: &GridMap,
    b: &GridMap,
    relation: SpatialRelation,
    omega: f64,
    cfg: &StoConfig,
) -> Result<(f64, f64)> {
    let fwd = build_pair_problem(a, b, relation, omega, cfg, None)?;
    let rev = build_pair_problem(b, a, reverse_relation(relation), omega, cfg, None)?;
    let (lf, ..) = solve_direction(&fwd, cfg.solver(), None)?;
    let (lr, ..) = solve_direction(&rev, cfg.solver(), None)?;
    Ok((lf.transport, lr.transport))
}

/// Sum of pair losses and the loss normalized by the first evaluation at the
/// current timestep (clamped to `[0, 1]`; `1` when `first_total` is `None`).
pub fn aggregate_loss(pairs: &[PairLoss], first_total: Option<f64>) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let total: f64 = pairs.iter().map(PairLoss::total).sum();
    let normalized = match first_total {
        None => 1.0,
        Some(first) if first > 0.0 => (total / first).clamp(0.0, 1.0),
        Some(_) => 0.0,
    };
    Ok((total, normalized))
}

/// Warm-start potentials keyed by `(spec index, reverse?)`.
#[derive(Debug, Clone, Default)]
pub struct WarmStarts {
    duals: HashMap<(usize, bool), (Vec<f64>, Vec<f64>)>,
}

impl WarmStarts {
    pub fn clear(&mut self) {
        self.duals.clear();
    }
}

/// `(forward, reverse)` target centers `(c_x, c_y)` for a `None` spec.
pub type CenterPair = ((f64, f64), (f64, f64));

/// Evaluates every spec in both directions on the given maps.
///
/// `object_centers[k]` holds the `(forward, reverse)` target centers for spec
/// `k` when its relation is `None`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_specs(
    maps: &[GridMap],
    specs: &[SpatialSpec],
    omega: f64,
    cfg: &StoConfig,
    object_centers: &[Option<CenterPair>],
    cache: &CostCache,
    warm: Option<&mut WarmStarts>,
    first_total: Option<f64>,
) -> Result<StoLossReport> {
    if specs.is_empty() {
        return Err(Error::EmptyPairs);
    }
    let n = maps.first().map(GridMap::len).unwrap_or(0);
    let mut grads = vec![vec![0.0; n]; maps.len()];
    let mut pairs = Vec::with_capacity(specs.len());
    let mut objective = 0.0;
    let mut warm = warm;
    for (k, spec) in specs.iter().enumerate() {
        spec.validate(maps.len()).map_err(Error::Config)?;
        let centers = object_centers.get(k).copied().flatten();
        let mut directions = Vec::with_capacity(2);
        for reverse in [false, true] {
            let (s, r, rel, center) = if reverse {
                (
                    spec.reference,
                    spec.source,
                    reverse_relation(spec.relation),
                    centers.map(|c| c.1),
                )
            } else {
                (spec.source, spec.reference, spec.relation, centers.map(|c| c.0))
            };
            let pair = build_pair_problem_cached(&maps[s], &maps[r], rel, omega, cfg, center, cache)?;
            let init = warm
                .as_ref()
                .and_then(|w| w.duals.get(&(k, reverse)))
                .map(|(f, g)| (f.as_slice(), g.as_slice()));
            let (loss, result, gs, gr) = solve_direction(&pair, cfg.solver(), init)?;
            if let Some(w) = warm.as_mut() {
                w.duals.insert((k, reverse), (result.dual_f, result.dual_g));
            }
            for (acc, x) in grads[s].iter_mut().zip(&gs) {
                *acc += x;
            }
            for (acc, x) in grads[r].iter_mut().zip(&gr) {
                *acc += x;
            }
            objective += loss.regularized;
            directions.push(loss);
        }
        let reverse = directions.pop().expect("two directions");
        let forward = directions.pop().expect("two directions");
        pairs.push(PairLoss { forward, reverse });
    }
    let (total, normalized) = aggregate_loss(&pairs, first_total)?;
    Ok(StoLossReport {
        pairs,
        total,
        objective,
        map_gradients: grads,
        normalized,
    })
}

/// Latent field -> attention map: softmax at a temperature, then optional
/// Gaussian smoothing (which preserves unit mass).
#[derive(Debug, Clone)]
pub struct MapPipeline {
    pub temperature: f64,
    pub smoother: Option<Smoother>,
}

impl MapPipeline {
    pub fn new(temperature: f64, smoother: Option<Smoother>) -> Self {
        MapPipeline { temperature, smoother }
    }

    pub fn forward(&self, z: &Field) -> GridMap {
        let s = softmax_from_latent(z, self.temperature);
        match &self.smoother {
            Some(sm) => {
                let w = sm.apply(s.side(), s.weights());
                let total: f64 = w.iter().sum();
                GridMap::new(s.side(), w.into_iter().map(|x| (x / total).max(0.0)).collect())
                    .expect("smoothed softmax is finite and nonnegative")
            }
            None => s,
        }
    }

    /// Pulls a map-space gradient back to latent space.
    ///
    /// The smoother is symmetric, so it is its own adjoint; the final
    /// renormalization acts as the identity on zero-sum perturbations.
    pub fn backward(&self, z: &Field, map_grad: &[f64]) -> Field {
        let side = z.side();
        let s = softmax_from_latent(z, self.temperature);
        let h = match &self.smoother {
            Some(sm) => sm.apply(side, map_grad),
            None => map_grad.to_vec(),
        };
        let mean: f64 = s.weights().iter().zip(&h).map(|(p, x)| p * x).sum();
        let values = s
            .weights()
            .iter()
            .zip(&h)
            .map(|(p, x)| p * (x - mean) / self.temperature)
            .collect();
        Field::new(side, values).expect("same shape")
    }
}

/// Chain rule from the report's map gradients to the latents.
pub fn latent_gradient(report: &StoLossReport, latents: &[Field], pipeline: &MapPipeline) -> Result<Vec<Field>> {
    if report.map_gradients.len() != latents.len() {
        return Err(shape_mismatch(
            format!("{} map gradients", report.map_gradients.len()),
            format!("{} latents", latents.len()),
        ));
    }
    latents
        .iter()
        .zip(&report.map_gradients)
        .map(|(z, g)| {
            if g.len() != z.values().len() {
                return Err(shape_mismatch(
                    format!("gradient of length {}", g.len()),
                    format!("{0}x{0} latent", z.side()),
                ));
            }
            Ok(pipeline.backward(z, g))
        })
        .collect()
}

/// `z - alpha * g`, tokenwise.
pub fn sto_update(latents: &[Field], gradients: &[Field], alpha: f64) -> Result<Vec<Field>> {
    if latents.len() != gradients.len() {
        return Err(shape_mismatch(
            format!("{} latents", latents.len()),
            format!("{} gradients", gradients.len()),
        ));
    }
    latents
        .iter()
        .zip(gradients)
        .map(|(z, g)| {
            if z.side() != g.side() {
                return Err(shape_mismatch(
                    format!("{0}x{0} latent", z.side()),
                    format!("{0}x{0} gradient", g.side()),
                ));
            }
            let values = z.values().iter().zip(g.values()).map(|(a, b)| a - alpha * b).collect();
            Field::new(z.side(), values)
        })
        .collect()
}
