//! Pixel-space optimizers over a flat `f32` parameter slice.
//!
//! Internal arithmetic (moments, curvature pairs, dot products) is `f64`;
//! parameters and gradients stay `f32`.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient has {grad} entries for {params} parameters")]
    LengthMismatch { params: usize, grad: usize },
    #[error("gradient entry {index} is not finite")]
    NonFiniteGradient { index: usize },
}

fn check_grad(params: &[f32], grad: &[f32]) -> Result<(), OptimError> {
    if params.len() != grad.len() {
        return Err(OptimError::LengthMismatch {
            params: params.len(),
            grad: grad.len(),
        });
    }
    match grad.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(OptimError::NonFiniteGradient { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Learning rate sized for the 0-255 pixel scale.
    fn default() -> Self {
        Self {
            lr: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) -> Result<(), OptimError> {
        check_grad(params, grad)?;
        if params.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                params: self.m.len(),
                grad: params.len(),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            let g = g as f64;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = (*p as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor per rejected trial.
    pub shrink: f64,
    pub max_trials: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            shrink: 0.5,
            max_trials: 20,
        }
    }
}

#[derive(Debug, Clone)]
struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Objective at the parameters after the step.
    pub loss: f64,
    /// Accepted step length along the search direction (0 when stalled).
    pub step: f64,
    /// The line search found no acceptable point; parameters are unchanged.
    pub stalled: bool,
    /// The step used the negative gradient instead of the quasi-Newton direction.
    pub steepest_descent: bool,
    pub evaluations: usize,
}

/// Limited-memory BFGS with Armijo backtracking.
///
/// The state caches the objective and gradient at the current parameters,
/// so the slice passed to [`LbfgsState::step`] must only be modified by this
/// optimizer between calls (or [`LbfgsState::reset`] must be called).
#[derive(Debug, Clone)]
pub struct LbfgsState {
    config: LbfgsConfig,
    history: VecDeque<CurvaturePair>,
    current: Option<(f64, Vec<f32>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsState {
    pub fn new(config: LbfgsConfig) -> Self {
        Self {
            config,
            history: VecDeque::with_capacity(config.memory),
            current: None,
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Supplies the objective at the current parameters, saving one evaluation
    /// on the next step.
    pub fn prime(&mut self, loss: f64, grad: Vec<f32>) {
        self.current = Some((loss, grad));
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.current = None;
    }

    /// Two-loop recursion: returns `-H g` for the implicit inverse Hessian `H`.
    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let mut alphas = Vec::with_capacity(self.history.len());
        for pair in self.history.iter().rev() {
            let a = pair.rho * dot(&pair.s, &q);
            q.iter_mut().zip(&pair.y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some(last) = self.history.back() {
            let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for (pair, a) in self.history.iter().zip(alphas.iter().rev()) {
            let b = pair.rho * dot(&pair.y, &q);
            q.iter_mut().zip(&pair.s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        q.iter_mut().for_each(|qi| *qi = -*qi);
        q
    }

    /// Takes one quasi-Newton step. `objective` maps parameters to
    /// `(loss, gradient)`; a non-finite loss counts as a rejected trial.
    pub fn step<E, F>(&mut self, params: &mut [f32], mut objective: F) -> Result<StepOutcome, E>
    where
        F: FnMut(&[f32]) -> Result<(f64, Vec<f32>), E>,
    {
        let mut evaluations = 0;
        let (loss, grad) = match self.current.take() {
            Some(cached) => cached,
            None => {
                evaluations += 1;
                objective(params)?
            }
        };
        let g: Vec<f64> = grad.iter().map(|&v| v as f64).collect();
        let grad_l1: f64 = g.iter().map(|v| v.abs()).sum();
        let stall = |loss, grad, evaluations, this: &mut Self| {
            this.current = Some((loss, grad));
            Ok(StepOutcome {
                loss,
                step: 0.0,
                stalled: true,
                steepest_descent: this.history.is_empty(),
                evaluations,
            })
        };
        if grad_l1 == 0.0 || !grad_l1.is_finite() {
            return stall(loss, grad, evaluations, self);
        }

        let mut use_history = !self.history.is_empty();
        loop {
            let mut dir = if use_history { self.direction(&g) } else { Vec::new() };
            let mut slope = dot(&g, &dir);
            if !use_history || !(slope < 0.0) {
                use_history = false;
                dir = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let mut t = if use_history { 1.0 } else { (1.0 / grad_l1).min(1.0) };

            let mut trial = vec![0.0f32; params.len()];
            for _ in 0..self.config.max_trials {
                for ((x, &p), &d) in trial.iter_mut().zip(params.iter()).zip(&dir) {
                    *x = (p as f64 + t * d) as f32;
                }
                if trial != params {
                    evaluations += 1;
                    let (trial_loss, trial_grad) = objective(&trial)?;
                    if trial_loss.is_finite() && trial_loss <= loss + self.config.c1 * t * slope {
                        self.accept(params, &trial, &g, &trial_grad);
                        params.copy_from_slice(&trial);
                        self.current = Some((trial_loss, trial_grad));
                        return Ok(StepOutcome {
                            loss: trial_loss,
                            step: t,
                            stalled: false,
                            steepest_descent: !use_history,
                            evaluations,
                        });
                    }
                }
                t *= self.config.shrink;
            }
            if use_history {
                // The quasi-Newton model is misleading; restart from the gradient.
                self.history.clear();
                use_history = false;
                continue;
            }
            return stall(loss, grad, evaluations, self);
        }
    }

    fn accept(&mut self, old: &[f32], new: &[f32], old_grad: &[f64], new_grad: &[f32]) {
        let s: Vec<f64> = new.iter().zip(old).map(|(&a, &b)| a as f64 - b as f64).collect();
        let y: Vec<f64> = new_grad.iter().zip(old_grad).map(|(&a, &b)| a as f64 - b).collect();
        let sy = dot(&s, &y);
        if sy > 0.0 && dot(&y, &y) > 0.0 {
            if self.history.len() == self.config.memory {
                self.history.pop_front();
            }
            self.history.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        }
    }
}
