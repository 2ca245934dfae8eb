//! Toy denoising loop.
//!
//! Each token owns a latent field; its attention map is a temperature softmax
//! followed by a small Gaussian blur. The temperature anneals from 2.0 to 0.5
//! over the run, which sharpens maps the way denoising does. Inside the
//! optimization window every step applies one STO update, and designated steps
//! keep updating until the normalized loss has dropped far enough.
//!
//! Randomness: every draw comes from `ChaCha8Rng::seed_from_u64(seed)` with
//! the stream set to `(purpose << 32) | index`, so tokens and purposes never
//! share a stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{omega_at, OmegaSchedule};
use crate::error::{Error, Result};
use crate::grid::{compute_centroid, Centroid, Field, GridMap, Smoother, SpatialRelation, SMOOTH_KERNEL, SMOOTH_SIGMA};
use crate::sto::{
    evaluate_specs, latent_gradient, sto_update, CenterPair, CostCache, MapPipeline, SpatialSpec, StoConfig,
    StoLossReport, WarmStarts,
};

const STREAM_NOISE: u64 = 1;
const STREAM_BUMP: u64 = 2;
const STREAM_OBJECT: u64 = 3;

/// Named sub-stream of a run seed.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng
}

/// How the normalized loss is compared with a refinement threshold `T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineRule {
    /// Keep refining while the normalized loss exceeds `1 - T`.
    #[default]
    OneMinusThreshold,
    /// Keep refining while the normalized loss exceeds `T`.
    Threshold,
}

impl RefineRule {
    pub fn needs_more(self, normalized: f64, threshold: f64) -> bool {
        match self {
            RefineRule::OneMinusThreshold => normalized > 1.0 - threshold,
            RefineRule::Threshold => normalized > threshold,
        }
    }
}

/// Synthetic initial latents: uniform noise plus one broad bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Half-width of the uniform noise.
    pub noise_amplitude: f64,
    pub bump_amplitude: f64,
    /// Bump spread as a fraction of the side.
    pub bump_sigma_frac: f64,
    /// Bump centers are drawn uniformly from `[margin, side - 1 - margin]`.
    pub center_margin_frac: f64,
    /// Seeds `2k` and `2k + 1` share one draw, the odd seed rotated by 180
    /// degrees, so unguided layouts are balanced across every relation.
    pub antithetic: bool,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            noise_amplitude: 0.25,
            bump_amplitude: 1.0,
            bump_sigma_frac: 0.35,
            center_margin_frac: 0.2,
            antithetic: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub side: usize,
    pub tokens: usize,
    pub total_steps: usize,
    pub opt_window_end: usize,
    /// STO window `[start, end)`; `None` means `[0, opt_window_end)`.
    pub window: Option<(usize, usize)>,
    /// When false the run is the unguided baseline.
    pub guidance: bool,
    pub refine_steps: Vec<usize>,
    pub refine_thresholds: Vec<f64>,
    pub max_refine_iters: usize,
    pub refine_rule: RefineRule,
    pub scale_factor: f64,
    pub scale_range: (f64, f64),
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub smoothing: bool,
    /// Halvings tried when an update raises the loss.
    pub max_backtracks: usize,
    pub init: InitConfig,
    #[serde(skip)]
    pub seed: u64,
    /// Keep every step's maps in [`SimState::history`].
    #[serde(skip)]
    pub record_maps: bool,
    #[serde(skip)]
    pub omega: OmegaSchedule,
    #[serde(skip)]
    pub sto: StoConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            side: 16,
            tokens: 2,
            total_steps: 50,
            opt_window_end: 25,
            window: None,
            guidance: true,
            refine_steps: vec![5, 10, 15, 20],
            refine_thresholds: vec![0.05, 0.01, 0.005, 0.001],
            max_refine_iters: 30,
            refine_rule: RefineRule::default(),
            scale_factor: 20.0,
            scale_range: (1.0, 0.5),
            temperature_start: 2.0,
            temperature_end: 0.5,
            smoothing: true,
            max_backtracks: 4,
            init: InitConfig::default(),
            seed: 0,
            record_maps: false,
            omega: OmegaSchedule::default(),
            sto: StoConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.side < 2 {
            return Err(format!("side must be >= 2, got {}", self.side));
        }
        if self.tokens == 0 {
            return Err("tokens must be >= 1".into());
        }
        if self.total_steps == 0 || self.opt_window_end == 0 || self.opt_window_end > self.total_steps {
            return Err(format!(
                "need 0 < opt_window_end <= total_steps, got {} and {}",
                self.opt_window_end, self.total_steps
            ));
        }
        if let Some((s, e)) = self.window {
            if s >= e || e > self.total_steps {
                return Err(format!("window ({s}, {e}) invalid for {} steps", self.total_steps));
            }
        }
        if self.refine_steps.len() != self.refine_thresholds.len() {
            return Err(format!(
                "{} refine steps but {} thresholds",
                self.refine_steps.len(),
                self.refine_thresholds.len()
            ));
        }
        if self.refine_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err("refine thresholds must lie in [0, 1]".into());
        }
        if !(self.scale_factor > 0.0) {
            return Err(format!("scale_factor must be > 0, got {}", self.scale_factor));
        }
        let (a, b) = self.scale_range;
        if !(b > 0.0 && a >= b) {
            return Err(format!("scale_range needs start >= end > 0, got ({a}, {b})"));
        }
        if !(self.temperature_start > 0.0 && self.temperature_end > 0.0) {
            return Err("temperatures must be > 0".into());
        }
        let i = &self.init;
        if !(i.noise_amplitude >= 0.0 && i.bump_sigma_frac > 0.0 && (0.0..0.5).contains(&i.center_margin_frac)) {
            return Err("invalid init parameters".into());
        }
        self.omega.validate()?;
        self.sto.validate()
    }

    /// The active STO window.
    pub fn sto_window(&self) -> (usize, usize) {
        self.window.unwrap_or((0, self.opt_window_end))
    }
}

/// `scale_factor * lerp(scale_range, t / (window_end - 1))` for `t` in the window.
pub fn step_size(t: usize, cfg: &SimConfig) -> Result<f64> {
    if t >= cfg.opt_window_end {
        return Err(Error::OutOfWindow {
            step: t,
            end: cfg.opt_window_end,
        });
    }
    let frac = if cfg.opt_window_end > 1 {
        t as f64 / (cfg.opt_window_end - 1) as f64
    } else {
        0.0
    };
    let (a, b) = cfg.scale_range;
    Ok(cfg.scale_factor * (a + (b - a) * frac))
}

/// Step size for windows reaching past `opt_window_end`: held at the last value.
fn window_step_size(t: usize, cfg: &SimConfig) -> f64 {
    step_size(t.min(cfg.opt_window_end - 1), cfg).expect("clamped into window")
}

/// Log-linear interpolation from the start to the end temperature.
pub fn temperature(t: usize, cfg: &SimConfig) -> f64 {
    let frac = (t as f64 / cfg.total_steps as f64).min(1.0);
    (cfg.temperature_start.ln() + (cfg.temperature_end.ln() - cfg.temperature_start.ln()) * frac).exp()
}

/// The background dynamic: latents are untouched, only the temperature moves.
pub fn background_anneal(latents: &[Field], t: usize, cfg: &SimConfig) -> (Vec<Field>, f64) {
    (latents.to_vec(), temperature(t, cfg))
}

pub fn pipeline(t: usize, cfg: &SimConfig) -> MapPipeline {
    let smoother = cfg
        .smoothing
        .then(|| Smoother::new(SMOOTH_KERNEL, SMOOTH_SIGMA).expect("valid constants"));
    MapPipeline::new(temperature(t, cfg), smoother)
}

/// Seeded initial latents, one field per token.
pub fn init_latents(tokens: usize, side: usize, seed: u64, init: &InitConfig) -> Vec<Field> {
    let s = side as f64;
    let margin = init.center_margin_frac * (s - 1.0);
    let sigma = init.bump_sigma_frac * s;
    let (draw_seed, rotate) = if init.antithetic {
        (seed / 2, seed % 2 == 1)
    } else {
        (seed, false)
    };
    (0..tokens as u64)
        .map(|k| {
            let mut centers = substream(draw_seed, STREAM_BUMP, k);
            let ci = centers.random_range(margin..=s - 1.0 - margin);
            let cj = centers.random_range(margin..=s - 1.0 - margin);
            let mut noise = substream(draw_seed, STREAM_NOISE, k);
            let z = Field::from_fn(side, |i, j| {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                let n: f64 = noise.random_range(-1.0..=1.0);
                init.bump_amplitude * (-d2 / (2.0 * sigma * sigma)).exp() + init.noise_amplitude * n
            });
            if rotate {
                z.flip_horizontal().flip_vertical()
            } else {
                z
            }
        })
        .collect()
}

/// Random target centers for `None` specs, in the central half of the grid.
pub fn object_centers(specs: &[SpatialSpec], side: usize, seed: u64) -> Vec<Option<CenterPair>> {
    let s = side as f64;
    let lo = s / 4.0;
    let hi = 3.0 * s / 4.0 - 1.0;
    specs
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            (spec.relation == SpatialRelation::None).then(|| {
                let mut rng = substream(seed, STREAM_OBJECT, k as u64);
                let mut draw = || (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                (draw(), draw())
            })
        })
        .collect()
}

/// One row of the run trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub temperature: f64,
    pub omega: Option<f64>,
    pub alpha: Option<f64>,
    /// Loss at the start of the step.
    pub loss: Option<f64>,
    /// Loss after the step's updates, relative to `loss`.
    pub normalized: Option<f64>,
    pub updates: usize,
    pub refine_threshold: Option<f64>,
    /// Normalized loss when refinement began.
    pub refine_start: Option<f64>,
    /// Extra updates made by refinement at this step.
    pub refine_iters: usize,
    pub backtracks: usize,
    pub solver_iters: usize,
    pub centroids: Vec<Centroid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub step: usize,
    pub latents: Vec<Field>,
    pub maps: Vec<GridMap>,
    pub initial_maps: Vec<GridMap>,
    pub trace: Vec<StepRecord>,
    /// Maps after each step (index `t` holds the maps recorded at step `t`),
    /// filled only when `record_maps` is set.
    pub history: Vec<Vec<GridMap>>,
}

fn check_finite(latents: &[Field], step: usize) -> Result<()> {
    for (k, z) in latents.iter().enumerate() {
        if let Some(u) = z.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "latent of token {k} at step {step}, cell {u} (norm {:.3e})",
                z.norm()
            )));
        }
    }
    Ok(())
}

fn centroids(maps: &[GridMap]) -> Result<Vec<Centroid>> {
    maps.iter().map(compute_centroid).collect()
}

struct Guide<'a> {
    specs: &'a [SpatialSpec],
    cfg: &'a SimConfig,
    cache: CostCache,
    centers: Vec<Option<CenterPair>>,
    warm: WarmStarts,
    solver_iters: usize,
}

impl Guide<'_> {
    fn evaluate(
        &mut self,
        latents: &[Field],
        pipe: &MapPipeline,
        omega: f64,
        first: Option<f64>,
    ) -> Result<StoLossReport> {
        let maps: Vec<GridMap> = latents.iter().map(|z| pipe.forward(z)).collect();
        let report = evaluate_specs(
            &maps,
            self.specs,
            omega,
            &self.cfg.sto,
            &self.centers,
            &self.cache,
            Some(&mut self.warm),
            first,
        )?;
        self.solver_iters += report.solver_iterations();
        Ok(report)
    }

    /// One gradient step with backtracking on the reported loss. Returns the
    /// new latents, their report and the number of halvings.
    fn update(
        &mut self,
        latents: &[Field],
        report: &StoLossReport,
        pipe: &MapPipeline,
        omega: f64,
        alpha: f64,
        first: f64,
    ) -> Result<(Vec<Field>, StoLossReport, usize)> {
        let grads = latent_gradient(report, latents, pipe)?;
        let mut a = alpha;
        let mut backtracks = 0;
        loop {
            let next = sto_update(latents, &grads, a)?;
            check_finite(&next, 0)?;
            let rep = self.evaluate(&next, pipe, omega, Some(first))?;
            if rep.total <= report.total || backtracks >= self.cfg.max_backtracks {
                return Ok((next, rep, backtracks));
            }
            a *= 0.5;
            backtracks += 1;
        }
    }
}

/// Runs the full loop with STO active in `[0, opt_window_end)`.
pub fn run_denoise_loop(specs: &[SpatialSpec], cfg: &SimConfig) -> Result<SimState> {
    let window = (0, cfg.opt_window_end);
    run_with_window(specs, cfg, window)
}

/// As [`run_denoise_loop`] with STO active only in `window = [start, end)`.
pub fn ablation_window(specs: &[SpatialSpec], cfg: &SimConfig, window: (usize, usize)) -> Result<SimState> {
    let (start, end) = window;
    if start >= end || end > cfg.total_steps {
        return Err(Error::BadWindow {
            start,
            end,
            total: cfg.total_steps,
        });
    }
    run_with_window(specs, cfg, window)
}

/// Runs with the configured window (or none when guidance is off).
pub fn run(specs: &[SpatialSpec], cfg: &SimConfig) -> Result<SimState> {
    if cfg.guidance {
        ablation_window(specs, cfg, cfg.sto_window())
    } else {
        run_with_window(specs, cfg, (0, 0))
    }
}

fn run_with_window(specs: &[SpatialSpec], cfg: &SimConfig, window: (usize, usize)) -> Result<SimState> {
    cfg.validate().map_err(Error::Config)?;
    for s in specs {
        s.validate(cfg.tokens).map_err(Error::Config)?;
    }
    let mut latents = init_latents(cfg.tokens, cfg.side, cfg.seed, &cfg.init);
    let initial_maps: Vec<GridMap> = latents.iter().map(|z| pipeline(0, cfg).forward(z)).collect();
    let mut guide = Guide {
        specs,
        cfg,
        cache: CostCache::new(cfg.side, &cfg.sto.cost),
        centers: object_centers(specs, cfg.side, cfg.seed),
        warm: WarmStarts::default(),
        solver_iters: 0,
    };
    let guided = !specs.is_empty();
    let mut trace = Vec::with_capacity(cfg.total_steps + 1);
    let mut history = Vec::new();

    for t in 0..cfg.total_steps {
        let pipe = pipeline(t, cfg);
        let mut rec = StepRecord {
            step: t,
            temperature: pipe.temperature,
            omega: None,
            alpha: None,
            loss: None,
            normalized: None,
            updates: 0,
            refine_threshold: None,
            refine_start: None,
            refine_iters: 0,
            backtracks: 0,
            solver_iters: 0,
            centroids: Vec::new(),
        };
        if guided && (window.0..window.1).contains(&t) {
            let omega = omega_at(t as f64, &cfg.omega);
            let alpha = window_step_size(t, cfg);
            guide.solver_iters = 0;
            let mut report = guide.evaluate(&latents, &pipe, omega, None)?;
            let first = report.total;
            let (next, rep, bt) = guide.update(&latents, &report, &pipe, omega, alpha, first)?;
            latents = next;
            report = rep;
            rec.updates = 1;
            rec.backtracks = bt;
            let threshold = cfg
                .refine_steps
                .iter()
                .position(|&s| s == t)
                .map(|k| cfg.refine_thresholds[k]);
            if let Some(th) = threshold {
                rec.refine_start = Some(report.normalized);
                while rec.refine_iters < cfg.max_refine_iters && cfg.refine_rule.needs_more(report.normalized, th) {
                    let (next, rep, bt) = guide.update(&latents, &report, &pipe, omega, alpha, first)?;
                    latents = next;
                    report = rep;
                    rec.refine_iters += 1;
                    rec.updates += 1;
                    rec.backtracks += bt;
                }
            }
            check_finite(&latents, t)?;
            rec.omega = Some(omega);
            rec.alpha = Some(alpha);
            rec.loss = Some(first);
            rec.normalized = Some(report.normalized);
            rec.refine_threshold = threshold;
            rec.solver_iters = guide.solver_iters;
        } else {
            latents = background_anneal(&latents, t, cfg).0;
        }
        let maps: Vec<GridMap> = latents.iter().map(|z| pipe.forward(z)).collect();
        rec.centroids = centroids(&maps)?;
        trace.push(rec);
        if cfg.record_maps {
            history.push(maps);
        }
    }
    let pipe = pipeline(cfg.total_steps, cfg);
    let maps: Vec<GridMap> = latents.iter().map(|z| pipe.forward(z)).collect();
    trace.push(StepRecord {
        step: cfg.total_steps,
        temperature: pipe.temperature,
        omega: None,
        alpha: None,
        loss: None,
        normalized: None,
        updates: 0,
        refine_threshold: None,
        refine_start: None,
        refine_iters: 0,
        backtracks: 0,
        solver_iters: 0,
        centroids: centroids(&maps)?,
    });
    if cfg.record_maps {
        history.push(maps.clone());
    }
    Ok(SimState {
        step: cfg.total_steps,
        latents,
        maps,
        initial_maps,
        trace,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_size_examples() {
        let cfg = SimConfig::default();
        assert_eq!(step_size(0, &cfg).unwrap(), 20.0);
        assert_eq!(step_size(24, &cfg).unwrap(), 10.0);
        assert_eq!(step_size(12, &cfg).unwrap(), 20.0 * (1.0 - 0.5 * 12.0 / 24.0));
        assert_eq!(step_size(25, &cfg), Err(Error::OutOfWindow { step: 25, end: 25 }));
    }

    #[test]
    fn temperature_endpoints_and_entropy() {
        let cfg = SimConfig::default();
        assert!((temperature(0, &cfg) - 2.0).abs() < 1e-15);
        assert!((temperature(50, &cfg) - 0.5).abs() < 1e-15);
        let z = init_latents(1, 16, 3, &cfg.init).remove(0);
        let mut prev = f64::INFINITY;
        for t in 0..=50 {
            let h = pipeline(t, &cfg).forward(&z).entropy();
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn init_is_deterministic_and_near_uniform() {
        let cfg = SimConfig::default();
        let a = init_latents(3, 16, 11, &cfg.init);
        assert_eq!(a, init_latents(3, 16, 11, &cfg.init));
        assert_ne!(a[0], a[1]);
        // Adding a token leaves earlier streams untouched.
        assert_eq!(a[..3], init_latents(4, 16, 11, &cfg.init)[..3]);
        let b = init_latents(3, 16, 10, &cfg.init);
        assert_eq!(a[0], b[0].flip_horizontal().flip_vertical());
        for seed in 0..50 {
            for z in init_latents(2, 16, seed, &cfg.init) {
                let m = pipeline(0, &cfg).forward(&z);
                let min = m.weights().iter().copied().fold(f64::INFINITY, f64::min);
                assert!(m.max_weight() / min < 10.0);
            }
        }
    }

    #[test]
    fn no_specs_is_pure_anneal() {
        let cfg = SimConfig {
            seed: 5,
            ..Default::default()
        };
        let state = run_denoise_loop(&[], &cfg).unwrap();
        let z0 = init_latents(2, 16, 5, &cfg.init);
        assert_eq!(state.latents, z0);
        let sharp: Vec<GridMap> = z0.iter().map(|z| pipeline(50, &cfg).forward(z)).collect();
        assert_eq!(state.maps, sharp);
    }

    #[test]
    fn bad_windows_rejected() {
        let cfg = SimConfig::default();
        let specs = [SpatialSpec::new(0, 1, SpatialRelation::Left)];
        assert!(matches!(
            ablation_window(&specs, &cfg, (5, 5)),
            Err(Error::BadWindow { .. })
        ));
        assert!(matches!(
            ablation_window(&specs, &cfg, (0, 51)),
            Err(Error::BadWindow { .. })
        ));
    }

    #[test]
    fn refine_rules() {
        assert!(RefineRule::OneMinusThreshold.needs_more(0.97, 0.05));
        assert!(!RefineRule::OneMinusThreshold.needs_more(0.95, 0.05));
        assert!(RefineRule::Threshold.needs_more(0.06, 0.05));
    }
}
