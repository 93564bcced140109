//! No-U-Turn sampler with dual-averaging step-size adaptation and windowed
//! diagonal mass-matrix estimation.
//!
//! Multinomial trajectory sampling with the generalized (momentum-sum)
//! U-turn criterion, matching what current Hamiltonian Monte Carlo tools do
//! under default settings: within subtrees, proposals are selected with
//! probability proportional to exp(-energy error); when a new subtree joins
//! the trajectory at the top level, selection is biased toward the new
//! subtree with probability min(1, W_new / W_old).
//!
//! Warmup follows the usual windowed schedule: a fast step-size-only buffer,
//! doubling "slow" windows that accumulate a running variance estimate for
//! the diagonal inverse mass matrix, and a terminal buffer that re-tunes the
//! step size against the final metric. The metric is frozen after warmup.
//!
//! Chains are logically independent; each draws from its own ChaCha8 stream
//! derived from the master seed, so serial and parallel execution produce
//! identical output.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Energy error beyond which a leapfrog step is declared divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// A log-density with gradient, evaluated through per-chain evaluators so
/// implementations can reuse scratch buffers without interior mutability.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn evaluator(&self) -> Box<dyn TargetEval + '_>;
}

/// One chain's evaluation handle.
pub trait TargetEval {
    /// Unnormalized log density and its gradient (written into `grad`).
    fn log_density_grad(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<f64>;
}

/// Adapter exposing a plain function as a [`Target`], mainly for tests and
/// reference distributions.
pub struct GradTarget<F> {
    dim: usize,
    f: F,
}

impl<F> GradTarget<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

struct GradTargetEval<'a, F> {
    f: &'a F,
}

impl<F> TargetEval for GradTargetEval<'_, F>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    fn log_density_grad(&mut self, theta: &[f64], grad: &mut [f64]) -> Result<f64> {
        Ok((self.f)(theta, grad))
    }
}

impl<F> Target for GradTarget<F>
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluator(&self) -> Box<dyn TargetEval + '_> {
        Box::new(GradTargetEval { f: &self.f })
    }
}

/// Sampler configuration. Defaults follow the usual tool defaults: four
/// chains, 1000 warmup and 1000 kept draws, 0.8 target acceptance, tree
/// depth capped at 10, and a convergence threshold of R̂ < 1.01.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    pub rhat_threshold: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            rhat_threshold: 1.01,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Domain("at least 2 chains are required for R-hat".into()));
        }
        if self.warmup < 1 || self.samples < 1 {
            return Err(Error::Domain("warmup and samples must be at least 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Domain("target_accept must lie in (0, 1)".into()));
        }
        if self.max_tree_depth < 1 {
            return Err(Error::Domain("max_tree_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of one chain: kept draws and transition statistics.
#[derive(Debug, Clone)]
pub struct ChainRun {
    /// Post-warmup draws, `samples × dim`.
    pub draws: Vec<Vec<f64>>,
    /// ChaCha stream id this chain consumed.
    pub stream: u64,
    /// Step size in force after warmup.
    pub step_size: f64,
    /// Divergent transitions after warmup.
    pub divergences: usize,
    /// Divergent transitions during warmup.
    pub warmup_divergences: usize,
    /// Post-warmup transitions that saturated the tree depth cap.
    pub max_depth_hits: usize,
    /// Histogram of post-warmup tree depths (index = depth).
    pub depth_histogram: Vec<usize>,
    /// Mean acceptance statistic over post-warmup transitions.
    pub mean_accept: f64,
}

/// Run `config.chains` independent NUTS chains against `target`.
///
/// Chains may execute concurrently; results are keyed by chain index, so the
/// output is identical to a serial run with the same seed.
pub fn nuts_sample<T: Target>(target: &T, config: &SamplerConfig) -> Result<Vec<ChainRun>> {
    if config.chains < 1 {
        return Err(Error::Domain("at least one chain is required".into()));
    }
    if config.warmup < 1 || config.samples < 1 {
        return Err(Error::Domain("warmup and samples must be at least 1".into()));
    }
    (0..config.chains)
        .into_par_iter()
        .map(|chain| run_chain(target, config, chain))
        .collect()
}

/// A point in phase space with cached gradient and log density.
#[derive(Clone)]
struct PhasePoint {
    theta: Vec<f64>,
    mom: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

impl PhasePoint {
    /// H = -log p(θ) + ½ mᵀ M⁻¹ m for the diagonal inverse mass `inv_mass`.
    fn hamiltonian(&self, inv_mass: &[f64]) -> f64 {
        let kinetic: f64 =
            self.mom.iter().zip(inv_mass).map(|(&m, &im)| im * m * m).sum::<f64>() * 0.5;
        -self.logp + kinetic
    }
}

/// The accepted end of a trajectory.
#[derive(Clone)]
struct Proposal {
    theta: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Tree {
    left: PhasePoint,
    right: PhasePoint,
    proposal: Proposal,
    log_sum_weight: f64,
    /// Momentum sum over all leaves (generalized U-turn criterion).
    rho: Vec<f64>,
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
    turning: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

/// Generalized U-turn test against velocities M⁻¹·m: the trajectory turns
/// when the momentum sum stops making progress at either endpoint.
fn is_turning(rho: &[f64], mom_left: &[f64], mom_right: &[f64], inv_mass: &[f64]) -> bool {
    let mut dl = 0.0;
    let mut dr = 0.0;
    for k in 0..rho.len() {
        dl += rho[k] * inv_mass[k] * mom_left[k];
        dr += rho[k] * inv_mass[k] * mom_right[k];
    }
    if !dl.is_finite() || !dr.is_finite() {
        return true;
    }
    dl < 0.0 || dr < 0.0
}

/// One leapfrog step of size `eps` in the given direction; `None` when the
/// integrator leaves the region where the density is finite.
fn leapfrog(
    eval: &mut dyn TargetEval,
    from: &PhasePoint,
    eps: f64,
    direction: i8,
    inv_mass: &[f64],
) -> Option<PhasePoint> {
    let e = eps * f64::from(direction);
    let dim = from.theta.len();
    let mut mom: Vec<f64> = (0..dim)
        .map(|k| from.mom[k] + 0.5 * e * from.grad[k])
        .collect();
    let theta: Vec<f64> = (0..dim)
        .map(|k| from.theta[k] + e * inv_mass[k] * mom[k])
        .collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut grad = vec![0.0; dim];
    let logp = eval.log_density_grad(&theta, &mut grad).ok()?;
    if !logp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return None;
    }
    for k in 0..dim {
        mom[k] += 0.5 * e * grad[k];
    }
    Some(PhasePoint { theta, mom, grad, logp })
}

fn leaf_tree(point: PhasePoint, h0: f64, inv_mass: &[f64]) -> Tree {
    let h = point.hamiltonian(inv_mass);
    let energy_error = h - h0;
    let divergent = !energy_error.is_finite() || energy_error > DIVERGENCE_THRESHOLD;
    let log_weight = if divergent { f64::NEG_INFINITY } else { -energy_error };
    let accept = if energy_error.is_finite() {
        (-energy_error).exp().min(1.0)
    } else {
        0.0
    };
    Tree {
        proposal: Proposal {
            theta: point.theta.clone(),
            grad: point.grad.clone(),
            logp: point.logp,
        },
        rho: point.mom.clone(),
        left: point.clone(),
        right: point,
        log_sum_weight: log_weight,
        sum_accept: accept,
        n_leapfrog: 1,
        divergent,
        turning: false,
    }
}

fn divergent_leaf(from: &PhasePoint) -> Tree {
    Tree {
        left: from.clone(),
        right: from.clone(),
        proposal: Proposal {
            theta: from.theta.clone(),
            grad: from.grad.clone(),
            logp: from.logp,
        },
        log_sum_weight: f64::NEG_INFINITY,
        rho: vec![0.0; from.theta.len()],
        sum_accept: 0.0,
        n_leapfrog: 1,
        divergent: true,
        turning: true,
    }
}

/// Join two adjacent subtrees. `old` is the existing tree, `new` extends it
/// in `direction`; `progressive` selects top-level (biased) rather than
/// within-subtree (multinomial) proposal sampling.
fn combine(
    old: Tree,
    new: Tree,
    direction: i8,
    progressive: bool,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> Tree {
    let select_new_prob = if progressive {
        (new.log_sum_weight - old.log_sum_weight).exp().min(1.0)
    } else {
        let total = log_sum_exp(old.log_sum_weight, new.log_sum_weight);
        if total == f64::NEG_INFINITY {
            0.0
        } else {
            (new.log_sum_weight - total).exp()
        }
    };
    let u: f64 = rng.random();
    let proposal = if u < select_new_prob { new.proposal.clone() } else { old.proposal.clone() };

    let log_sum_weight = log_sum_exp(old.log_sum_weight, new.log_sum_weight);
    let sum_accept = old.sum_accept + new.sum_accept;
    let n_leapfrog = old.n_leapfrog + new.n_leapfrog;
    let divergent = old.divergent || new.divergent;
    let mut turning = old.turning || new.turning;

    // orient into absolute left/right halves
    let (lt, rt) = if direction > 0 { (old, new) } else { (new, old) };
    let rho: Vec<f64> = lt.rho.iter().zip(&rt.rho).map(|(a, b)| a + b).collect();

    // three-way generalized U-turn check across the join
    if !turning {
        turning = is_turning(&rho, &lt.left.mom, &rt.right.mom, inv_mass);
    }
    if !turning {
        let cross: Vec<f64> = lt.rho.iter().zip(&rt.left.mom).map(|(a, b)| a + b).collect();
        turning = is_turning(&cross, &lt.left.mom, &rt.left.mom, inv_mass);
    }
    if !turning {
        let cross: Vec<f64> = rt.rho.iter().zip(&lt.right.mom).map(|(a, b)| a + b).collect();
        turning = is_turning(&cross, &lt.right.mom, &rt.right.mom, inv_mass);
    }

    Tree {
        left: lt.left,
        right: rt.right,
        proposal,
        log_sum_weight,
        rho,
        sum_accept,
        n_leapfrog,
        divergent,
        turning,
    }
}

/// Build a balanced subtree of 2^depth leapfrog steps in `direction`.
fn build_tree(
    eval: &mut dyn TargetEval,
    from: &PhasePoint,
    depth: usize,
    direction: i8,
    eps: f64,
    h0: f64,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> Tree {
    if depth == 0 {
        return match leapfrog(eval, from, eps, direction, inv_mass) {
            Some(point) => leaf_tree(point, h0, inv_mass),
            None => divergent_leaf(from),
        };
    }
    let first = build_tree(eval, from, depth - 1, direction, eps, h0, inv_mass, rng);
    if first.divergent || first.turning {
        return first;
    }
    let edge = if direction > 0 { first.right.clone() } else { first.left.clone() };
    let second = build_tree(eval, &edge, depth - 1, direction, eps, h0, inv_mass, rng);
    combine(first, second, direction, false, inv_mass, rng)
}

struct TransitionOut {
    proposal: Proposal,
    depth: usize,
    divergent: bool,
    max_depth_hit: bool,
    accept_stat: f64,
}

fn sample_momentum(dim: usize, inv_mass: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    // p ~ N(0, M) with M = diag(1/inv_mass)
    (0..dim)
        .map(|k| Distribution::<f64>::sample(&StandardNormal, rng) / inv_mass[k].sqrt())
        .collect()
}

fn transition(
    eval: &mut dyn TargetEval,
    current: &Proposal,
    eps: f64,
    max_depth: usize,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> TransitionOut {
    let dim = current.theta.len();
    let start = PhasePoint {
        theta: current.theta.clone(),
        mom: sample_momentum(dim, inv_mass, rng),
        grad: current.grad.clone(),
        logp: current.logp,
    };
    let h0 = start.hamiltonian(inv_mass);

    let mut tree = leaf_tree(start, h0, inv_mass); // energy error 0: weight 1
    tree.n_leapfrog = 0;
    tree.sum_accept = 0.0;

    let mut depth = 0;
    let mut divergent = false;
    let mut sum_accept = 0.0;
    let mut n_leapfrog = 0usize;

    while depth < max_depth {
        let direction: i8 = if rng.random::<bool>() { 1 } else { -1 };
        let edge = if direction > 0 { tree.right.clone() } else { tree.left.clone() };
        let subtree = build_tree(eval, &edge, depth, direction, eps, h0, inv_mass, rng);

        sum_accept += subtree.sum_accept;
        n_leapfrog += subtree.n_leapfrog;

        if subtree.divergent {
            divergent = true;
            break;
        }
        if subtree.turning {
            break;
        }
        tree = combine(tree, subtree, direction, true, inv_mass, rng);
        depth += 1;
        if tree.turning {
            break;
        }
    }

    TransitionOut {
        proposal: tree.proposal,
        depth,
        divergent,
        max_depth_hit: depth >= max_depth,
        accept_stat: if n_leapfrog > 0 { sum_accept / n_leapfrog as f64 } else { 0.0 },
    }
}

/// Dual-averaging step-size adaptation toward a target acceptance rate.
struct DualAveraging {
    target_accept: f64,
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: usize,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(target_accept: f64, init_eps: f64) -> Self {
        Self {
            target_accept,
            mu: (10.0 * init_eps).ln(),
            log_eps: init_eps.ln(),
            log_eps_bar: init_eps.ln(),
            h_bar: 0.0,
            count: 0,
        }
    }

    fn update(&mut self, accept: f64) {
        self.count += 1;
        let m = self.count as f64;
        let w = 1.0 / (m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target_accept - accept);
        self.log_eps = self.mu - m.sqrt() / Self::GAMMA * self.h_bar;
        let mk = m.powf(-Self::KAPPA);
        self.log_eps_bar = mk * self.log_eps + (1.0 - mk) * self.log_eps_bar;
    }

    fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running variance estimator for the diagonal metric.
struct Welford {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: usize,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], m2: vec![0.0; dim], count: 0 }
    }

    fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for k in 0..x.len() {
            let d1 = x[k] - self.mean[k];
            self.mean[k] += d1 / n;
            let d2 = x[k] - self.mean[k];
            self.m2[k] += d1 * d2;
        }
    }

    /// Regularized variance: shrunk toward a small constant at low counts.
    fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.count < 10 {
            return None;
        }
        let n = self.count as f64;
        let shrink = n / (n + 5.0);
        Some(
            self.m2
                .iter()
                .map(|&m2| (shrink * (m2 / (n - 1.0)) + 1e-3 * (1.0 - shrink)).max(1e-12))
                .collect(),
        )
    }

    fn reset(&mut self) {
        self.mean.fill(0.0);
        self.m2.fill(0.0);
        self.count = 0;
    }
}

/// Iterations (exclusive end points) at which slow windows close and the
/// metric updates, following the usual fast/slow/fast warmup schedule.
fn slow_window_ends(warmup: usize) -> Vec<usize> {
    const INIT_BUFFER: usize = 75;
    const TERM_BUFFER: usize = 50;
    const BASE_WINDOW: usize = 25;
    if warmup < INIT_BUFFER + TERM_BUFFER + BASE_WINDOW {
        // too short for windowed estimation: step-size adaptation only
        return Vec::new();
    }
    let slow_end = warmup - TERM_BUFFER;
    let mut ends = Vec::new();
    let mut start = INIT_BUFFER;
    let mut size = BASE_WINDOW;
    loop {
        let mut end = start + size;
        // absorb a too-small trailing window into this one
        if end + 2 * size > slow_end {
            end = slow_end;
        }
        ends.push(end);
        if end >= slow_end {
            break;
        }
        start = end;
        size *= 2;
    }
    ends
}

/// Step-size heuristic: double or halve until a single leapfrog step crosses
/// 50% acceptance.
fn find_reasonable_epsilon(
    eval: &mut dyn TargetEval,
    start: &Proposal,
    inv_mass: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = start.theta.len();
    let point = PhasePoint {
        theta: start.theta.clone(),
        mom: sample_momentum(dim, inv_mass, rng),
        grad: start.grad.clone(),
        logp: start.logp,
    };
    let h0 = point.hamiltonian(inv_mass);
    let accept_at = |eval: &mut dyn TargetEval, eps: f64| -> Option<f64> {
        let stepped = leapfrog(eval, &point, eps, 1, inv_mass)?;
        let delta = h0 - stepped.hamiltonian(inv_mass);
        if delta.is_finite() { Some(delta.exp()) } else { None }
    };

    let mut eps = 1.0;
    let mut accept = accept_at(eval, eps);
    // if even eps = 1 explodes, shrink until the step is computable
    let mut guard = 0;
    while accept.is_none() && guard < 60 {
        eps *= 0.5;
        accept = accept_at(eval, eps);
        guard += 1;
    }
    let Some(mut a) = accept else { return 1e-6 };

    let direction: f64 = if a > 0.5 { 1.0 } else { -1.0 };
    for _ in 0..60 {
        if direction > 0.0 && a <= 0.5 {
            break;
        }
        if direction < 0.0 && a > 0.5 {
            break;
        }
        let next = eps * 2f64.powf(direction);
        if !(1e-10..=1e3).contains(&next) {
            break;
        }
        eps = next;
        match accept_at(eval, eps) {
            Some(v) => a = v,
            None => {
                eps /= 2f64.powf(direction);
                break;
            }
        }
    }
    eps.clamp(1e-10, 1e3)
}

fn run_chain<T: Target>(target: &T, config: &SamplerConfig, chain: usize) -> Result<ChainRun> {
    let dim = target.dim();
    let mut eval = target.evaluator();
    let stream = chain as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);

    // initial point: iid uniform(-2, 2), redrawn if the density is not finite
    let mut current = None;
    for _ in 0..100 {
        let theta: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let mut grad = vec![0.0; dim];
        match eval.log_density_grad(&theta, &mut grad) {
            Ok(logp) if logp.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                current = Some(Proposal { theta, grad, logp });
                break;
            }
            _ => continue,
        }
    }
    let mut current = current.ok_or_else(|| {
        Error::Numerical(format!(
            "chain {chain}: no finite log density found among 100 uniform(-2,2) initial points"
        ))
    })?;

    let mut inv_mass = vec![1.0; dim];
    let mut welford = Welford::new(dim);
    let window_ends = slow_window_ends(config.warmup);
    let in_slow_phase = |iter: usize| -> bool {
        !window_ends.is_empty() && iter >= 75 && iter < *window_ends.last().unwrap()
    };

    let eps0 = find_reasonable_epsilon(eval.as_mut(), &current, &inv_mass, &mut rng);
    let mut adapt = DualAveraging::new(config.target_accept, eps0);
    let mut eps = eps0;

    let mut draws = Vec::with_capacity(config.samples);
    let mut divergences = 0;
    let mut warmup_divergences = 0;
    let mut max_depth_hits = 0;
    let mut depth_histogram = vec![0usize; config.max_tree_depth + 1];
    let mut accept_sum = 0.0;

    for iter in 0..(config.warmup + config.samples) {
        let out =
            transition(eval.as_mut(), &current, eps, config.max_tree_depth, &inv_mass, &mut rng);
        current = out.proposal;
        if !current.logp.is_finite() {
            return Err(Error::Numerical(format!(
                "chain {chain}: non-finite log density at accepted state {:?}",
                current.theta
            )));
        }
        if iter < config.warmup {
            adapt.update(out.accept_stat);
            eps = adapt.current();
            if out.divergent {
                warmup_divergences += 1;
            }
            if in_slow_phase(iter) {
                welford.update(&current.theta);
                if window_ends.contains(&(iter + 1)) {
                    if let Some(variance) = welford.regularized_variance() {
                        // per-coordinate step scale goes as sqrt(inv_mass);
                        // rescale the adapted step by the geometric mean of
                        // the change, then restart dual averaging around it
                        let log_ratio: f64 = variance
                            .iter()
                            .zip(&inv_mass)
                            .map(|(&new, &old)| 0.5 * (old.ln() - new.ln()))
                            .sum::<f64>()
                            / dim as f64;
                        let rescaled =
                            (adapt.adapted() * log_ratio.exp()).clamp(1e-10, 1e3);
                        inv_mass = variance;
                        adapt = DualAveraging::new(config.target_accept, rescaled);
                        eps = rescaled;
                    }
                    welford.reset();
                }
            }
            if iter + 1 == config.warmup {
                eps = adapt.adapted();
            }
        } else {
            draws.push(current.theta.clone());
            accept_sum += out.accept_stat;
            depth_histogram[out.depth.min(config.max_tree_depth)] += 1;
            if out.divergent {
                divergences += 1;
            }
            if out.max_depth_hit {
                max_depth_hits += 1;
            }
        }
    }

    Ok(ChainRun {
        draws,
        stream,
        step_size: eps,
        divergences,
        warmup_divergences,
        max_depth_hits,
        depth_histogram,
        mean_accept: accept_sum / config.samples as f64,
    })
}
