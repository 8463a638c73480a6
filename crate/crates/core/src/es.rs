//! Isotropic Gaussian evolution strategy with antithetic sampling and
//! rank-based fitness shaping.
//!
//! Each generation samples `population / 2` standard-normal directions, each
//! evaluated at `theta + sigma * eps` and `theta - sigma * eps`. Losses are
//! replaced by a fixed ladder of centered rank weights and the update is
//!
//! ```text
//! theta <- theta + lr / (population * sigma) * sum_k w_k * eps_k
//! ```
//!
//! Candidate evaluation runs on the ambient rayon pool. The noise for pair
//! `i` is a pure function of `(seed, generation, i)` and the weighted sum is
//! accumulated in candidate order, so the trajectory does not depend on the
//! number of worker threads.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EsConfig {
    /// Candidates per generation. Must be even.
    pub population: usize,
    /// Perturbation scale.
    pub sigma: f64,
    /// Step size of the parameter update.
    pub lr: f64,
    pub generations: u64,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig { population: 64, sigma: 0.02, lr: 5e-5, generations: 2000, seed: 0 }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || !self.population.is_multiple_of(2) {
            return Err(Error::Config(format!("es population must be a positive even number, got {}", self.population)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("es sigma must be positive, got {}", self.sigma)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("es lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A loss to be minimized over flat parameter vectors.
///
/// `loss` may be called concurrently from several threads.
pub trait Objective: Sync {
    /// Called once before the candidates of `generation` are evaluated, so the
    /// objective can fix per-generation data such as a shared minibatch or
    /// work that depends only on the current `theta`.
    fn begin_generation(&mut self, _generation: u64, _theta: &[f64]) -> Result<()> {
        Ok(())
    }

    fn loss(&self, params: &[f64]) -> f64;

    /// Losses at `theta + sigma * eps` and `theta - sigma * eps`. Objectives
    /// that can share work between the two candidates override this.
    fn pair_losses(&self, theta: &[f64], eps: &[f64], sigma: f64) -> (f64, f64) {
        let mut candidate: Vec<f64> = theta.iter().zip(eps).map(|(t, e)| t + sigma * e).collect();
        let plus = self.loss(&candidate);
        for ((c, t), e) in candidate.iter_mut().zip(theta).zip(eps) {
            *c = t - sigma * e;
        }
        (plus, self.loss(&candidate))
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn loss(&self, params: &[f64]) -> f64 {
        self(params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsState {
    pub theta: Vec<f64>,
    pub generation: u64,
    pub config: EsConfig,
    /// Lowest candidate loss seen so far.
    pub best_loss: f64,
}

impl EsState {
    pub fn new(theta: Vec<f64>, config: EsConfig) -> Result<Self> {
        config.validate()?;
        if theta.is_empty() {
            return Err(Error::Es("parameter vector is empty".into()));
        }
        Ok(EsState { theta, generation: 0, config, best_loss: f64::INFINITY })
    }
}

/// Standard-normal direction of antithetic pair `pair` in `generation`.
pub fn pair_noise(seed: u64, generation: u64, pair: usize, dim: usize) -> Vec<f64> {
    let mut rng = rng::stream(seed, &[rng::tag::ES, generation, pair as u64]);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// All `population` perturbations of one generation, each direction followed
/// by its negation.
pub fn sample_perturbations(seed: u64, generation: u64, population: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if population == 0 || !population.is_multiple_of(2) {
        return Err(Error::Es(format!("population must be even and positive, got {population}")));
    }
    if dim == 0 {
        return Err(Error::Es("dimension must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(population);
    for pair in 0..population / 2 {
        let eps = pair_noise(seed, generation, pair, dim);
        let neg = eps.iter().map(|v| -v).collect();
        out.push(eps);
        out.push(neg);
    }
    Ok(out)
}

/// Centered rank weights: the candidate of rank `r` (0 = lowest loss) gets
/// `0.5 - r / (n - 1)`. Equal losses rank by candidate index; non-finite
/// losses rank after every finite one.
pub fn rank_shape(losses: &[f64]) -> Result<Vec<f64>> {
    let n = losses.len();
    if n < 2 {
        return Err(Error::Es(format!("rank shaping needs at least 2 candidates, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (losses[a], losses[b]);
        match (la.is_finite(), lb.is_finite()) {
            (true, true) => la.total_cmp(&lb),
            (true, false) => std::cmp::Ordering::Less,
            (false, true) => std::cmp::Ordering::Greater,
            (false, false) => std::cmp::Ordering::Equal,
        }
        .then(a.cmp(&b))
    });
    let mut weights = vec![0.0; n];
    let denom = (n - 1) as f64;
    for (rank, &idx) in order.iter().enumerate() {
        weights[idx] = 0.5 - rank as f64 / denom;
    }
    Ok(weights)
}

/// Replace the weights of candidates with identical losses by their mean, so
/// tied candidates pull equally. All non-finite losses form one tie group.
pub fn average_ties(losses: &[f64], weights: &mut [f64]) {
    let key = |l: f64| if l.is_finite() { Some(l) } else { None };
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| match (key(losses[a]), key(losses[b])) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let mut start = 0;
    while start < order.len() {
        let group = key(losses[order[start]]);
        let mut end = start + 1;
        while end < order.len() && key(losses[order[end]]) == group {
            end += 1;
        }
        if end - start > 1 {
            let mean = order[start..end].iter().map(|&i| weights[i]).sum::<f64>() / (end - start) as f64;
            for &i in &order[start..end] {
                weights[i] = mean;
            }
        }
        start = end;
    }
}

/// One generation: evaluate all candidates, shape, update `state` in place.
/// Returns the candidate losses.
pub fn es_step<O: Objective + ?Sized>(state: &mut EsState, objective: &mut O) -> Result<Vec<f64>> {
    let cfg = &state.config;
    let dim = state.theta.len();
    let pairs = cfg.population / 2;
    objective.begin_generation(state.generation, &state.theta)?;

    let objective: &O = objective;
    let theta = &state.theta;
    let (seed, generation, sigma) = (cfg.seed, state.generation, cfg.sigma);
    let evaluated: Vec<(Vec<f64>, f64, f64)> = (0..pairs)
        .into_par_iter()
        .map(|pair| {
            let eps = pair_noise(seed, generation, pair, dim);
            let (plus, minus) = objective.pair_losses(theta, &eps, sigma);
            (eps, plus, minus)
        })
        .collect();

    let losses: Vec<f64> = evaluated.iter().flat_map(|(_, p, m)| [*p, *m]).collect();
    if losses.iter().all(|l| !l.is_finite()) {
        return Err(Error::Es(format!("every candidate loss is non-finite at generation {}", state.generation)));
    }
    let mut weights = rank_shape(&losses)?;
    average_ties(&losses, &mut weights);

    let mut direction = vec![0.0; dim];
    for (pair, (eps, _, _)) in evaluated.iter().enumerate() {
        let (w_plus, w_minus) = (weights[2 * pair], weights[2 * pair + 1]);
        for (d, e) in direction.iter_mut().zip(eps) {
            *d += w_plus * e;
        }
        for (d, e) in direction.iter_mut().zip(eps) {
            *d += w_minus * -e;
        }
    }
    let scale = cfg.lr / (cfg.population as f64 * cfg.sigma);
    for (t, d) in state.theta.iter_mut().zip(&direction) {
        *t += scale * d;
    }

    let best = losses.iter().copied().filter(|l| l.is_finite()).fold(f64::INFINITY, f64::min);
    state.best_loss = state.best_loss.min(best);
    state.generation += 1;
    Ok(losses)
}

/// Run `config.generations` steps from `theta0`. After each step `on_generation`
/// receives the finished generation index and the objective at the new theta.
pub fn es_run<O, C>(theta0: Vec<f64>, objective: &mut O, config: EsConfig, mut on_generation: C) -> Result<EsState>
where
    O: Objective + ?Sized,
    C: FnMut(u64, f64),
{
    let mut state = EsState::new(theta0, config)?;
    for _ in 0..state.config.generations {
        es_step(&mut state, objective)?;
        let at_theta = objective.loss(&state.theta);
        on_generation(state.generation - 1, at_theta);
    }
    Ok(state)
}
