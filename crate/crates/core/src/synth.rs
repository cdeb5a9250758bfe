//! Image synthesis: precompute targets once, then optimise the pixels.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::imageio::CHANNEL_MEANS;
use crate::loss::{total_loss, LossConfig, LossError, LossReport, Targets};
use crate::net::NetworkGraph;
use crate::optim::{AdamConfig, AdamState, LbfgsConfig, LbfgsState, OptimError};
use crate::tensor::Tensor;

/// Standard deviation of the `Random` init, in preprocessed pixel units.
pub const RANDOM_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Lbfgs(LbfgsConfig),
    Adam(AdamConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Copy of the content image.
    Content,
    /// Near-zero Gaussian noise around the channel means.
    Random,
    /// Independent uniform `[0, 255]` pixels.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    pub iterations: usize,
    pub init: Init,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optimizer: Optimizer::Lbfgs(LbfgsConfig::default()),
            iterations: 1000,
            init: Init::Content,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SynthesisStats {
    /// How many times content features, style Grams and content Laplacians were built.
    pub target_builds: usize,
    /// Objective evaluations, including line-search trials.
    pub evaluations: usize,
    /// Line-search failures; the run stops at the first one.
    pub stalls: usize,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub image: Tensor,
    /// Objective at the initial image.
    pub initial: LossReport,
    /// One report per iteration run, taken after that iteration's update.
    pub history: Vec<LossReport>,
    pub wall_time: Duration,
    pub stats: SynthesisStats,
}

impl SynthesisResult {
    /// `initial` followed by `history`.
    pub fn full_history(&self) -> Vec<LossReport> {
        std::iter::once(self.initial.clone()).chain(self.history.iter().cloned()).collect()
    }
}

#[derive(Debug, Error)]
pub enum SynthFailure {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite objective at iteration {0}")]
    NonFinite(usize),
}

/// A failed run together with the reports recorded before the failure.
#[derive(Debug, Error)]
#[error("synthesis aborted after {} iterations: {failure}", history.len())]
pub struct SynthError {
    #[source]
    pub failure: SynthFailure,
    pub history: Vec<LossReport>,
}

/// Starting image for `init`, shaped like `content`.
pub fn initial_image(content: &Tensor, init: Init, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Content => content.clone(),
        Init::Random => {
            let normal = Normal::new(0.0, RANDOM_INIT_STD).expect("valid std");
            let mut out = content.clone();
            out.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng) as f32);
            out
        }
        Init::Uniform => {
            let s = content.shape();
            let plane = s.h * s.w;
            let mut out = content.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let c = (i / plane) % s.c;
                *v = rng.random_range(0.0f32..=255.0) - CHANNEL_MEANS[c % 3];
            }
            out
        }
    }
}

/// Runs [`synthesize_with`] without an observer.
pub fn synthesize(
    graph: &NetworkGraph,
    content: &Tensor,
    style: &Tensor,
    config: &SynthesisConfig,
) -> Result<SynthesisResult, SynthError> {
    synthesize_with(graph, content, style, config, |_, _| {})
}

/// Optimises an image for `config.iterations` steps. `observer` sees
/// iteration 0 with the initial report, then every completed step.
pub fn synthesize_with(
    graph: &NetworkGraph,
    content: &Tensor,
    style: &Tensor,
    config: &SynthesisConfig,
    mut observer: impl FnMut(usize, &LossReport),
) -> Result<SynthesisResult, SynthError> {
    let start = Instant::now();
    let mut history = Vec::with_capacity(config.iterations);
    let fail = |failure: SynthFailure, history: &mut Vec<LossReport>| SynthError {
        failure,
        history: std::mem::take(history),
    };
    if config.iterations == 0 {
        return Err(fail(SynthFailure::Config("iterations must be at least 1".into()), &mut history));
    }

    let mut stats = SynthesisStats::default();
    let targets = Targets::compute(graph, &config.loss, content, style).map_err(|e| fail(e.into(), &mut history))?;
    stats.target_builds += 1;

    let mut image = initial_image(content, config.init, config.seed);
    let shape = image.shape();
    let evaluate = |x: &[f32], evaluations: &mut usize| -> Result<(LossReport, Vec<f32>), SynthFailure> {
        *evaluations += 1;
        let x = Tensor::from_vec(shape, x.to_vec()).expect("image shape");
        let (report, grad) = total_loss(graph, &x, &config.loss, &targets)?;
        Ok((report, grad.into_vec()))
    };

    let (initial, initial_grad) = evaluate(image.data(), &mut stats.evaluations).map_err(|e| fail(e, &mut history))?;
    if !initial.total.is_finite() {
        return Err(fail(SynthFailure::NonFinite(0), &mut history));
    }
    observer(0, &initial);

    match config.optimizer {
        Optimizer::Adam(adam) => {
            let mut state = AdamState::new(image.data().len(), adam);
            let mut grad = initial_grad;
            for it in 1..=config.iterations {
                state.step(image.data_mut(), &grad).map_err(|e| fail(e.into(), &mut history))?;
                let (report, g) = evaluate(image.data(), &mut stats.evaluations).map_err(|e| fail(e, &mut history))?;
                if !report.total.is_finite() {
                    return Err(fail(SynthFailure::NonFinite(it), &mut history));
                }
                observer(it, &report);
                history.push(report);
                grad = g;
            }
        }
        Optimizer::Lbfgs(lbfgs) => {
            let mut state = LbfgsState::new(lbfgs);
            let mut params = image.clone().into_vec();
            state.prime(initial.total, initial_grad);
            for it in 1..=config.iterations {
                let mut last: Option<LossReport> = None;
                let mut evaluations = 0;
                let outcome = state.step(&mut params, |x| {
                    let (report, grad) = evaluate(x, &mut evaluations)?;
                    let total = report.total;
                    last = Some(report);
                    Ok::<_, SynthFailure>((total, grad))
                });
                stats.evaluations += evaluations;
                let outcome = outcome.map_err(|e| fail(e, &mut history))?;
                if outcome.stalled {
                    stats.stalls += 1;
                    break;
                }
                let report = last.expect("accepted step was evaluated");
                observer(it, &report);
                history.push(report);
            }
            image = Tensor::from_vec(shape, params).expect("image shape");
        }
    }

    Ok(SynthesisResult {
        image,
        initial,
        history,
        wall_time: start.elapsed(),
        stats,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum NormalizeError {
    #[error("loss history is empty")]
    Empty,
    #[error("initial weighted Laplacian loss is {0}; cannot normalise")]
    ZeroLaplacian(f64),
}

/// Weighted loss contributions of one report, optionally normalised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub total: f64,
    pub lap: f64,
    pub content: f64,
    pub style: f64,
}

impl LossRow {
    fn weighted(report: &LossReport, weights: &LossConfig) -> Self {
        let lap = weights.lap_terms.iter().zip(&report.lap).map(|(t, l)| t.gamma * l).sum::<f64>();
        let content = weights.alpha * report.content;
        let style = weights.beta * report.style;
        Self {
            total: lap + content + style,
            lap,
            content,
            style,
        }
    }

    fn map2(self, other: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            total: f(self.total, other.total),
            lap: f(self.lap, other.lap),
            content: f(self.content, other.content),
            style: f(self.style, other.style),
        }
    }

    fn scaled(self, k: f64) -> Self {
        self.map2(self, |a, _| a * k)
    }
}

/// Loss table of one run, every value divided by the initial weighted
/// Laplacian loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedReport {
    /// Raw weighted Laplacian loss at the first report.
    pub normalizer: f64,
    pub initial: LossRow,
    pub last: LossRow,
    /// Share of the final total; `total` is 1.
    pub fraction: LossRow,
    /// Final over initial.
    pub ratio: LossRow,
}

/// Builds the loss table for `history` (first entry = initial image).
///
/// `weights` supplies the term weights used for presentation, so a run
/// optimised without the Laplacian term can be reported on the same scale
/// as one optimised with it.
pub fn normalized_report(history: &[LossReport], weights: &LossConfig) -> Result<NormalizedReport, NormalizeError> {
    let (first, last) = match (history.first(), history.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(NormalizeError::Empty),
    };
    let initial = LossRow::weighted(first, weights);
    let normalizer = initial.lap;
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(NormalizeError::ZeroLaplacian(normalizer));
    }
    let initial = initial.scaled(1.0 / normalizer);
    let last = LossRow::weighted(last, weights).scaled(1.0 / normalizer);
    Ok(NormalizedReport {
        normalizer,
        initial,
        last,
        fraction: last.scaled(1.0 / last.total),
        ratio: last.map2(initial, |a, b| a / b),
    })
}
