//! Finite-c game solvers.
//!
//! The attacker's best response is a conditional-gradient (Frank-Wolfe)
//! minimization over the Marking-constrained product of simplices; the
//! linear subproblem is closed-form (mass on the smallest-gradient allowed
//! symbols, ties split equally) and the standard linearization gap is the
//! convergence certificate.
//!
//! The bias side runs a double-oracle loop: keep a finite support of bias
//! points, solve the restricted concave-convex subgame by projected
//! supergradient ascent on the support weights (Polyak steps against the
//! certified bracket), then expand the support with a worst-case bias found
//! by grid scan plus pattern refinement. Upper and lower bounds come out
//! certified on both sides.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{enumerate_tallies, BiasVector, Params, TallyVector};
use crate::error::{Error, Result};
use crate::payoff::{mi_grad_table, mi_table, GRADIENT_FLOOR};
use crate::strategy::{interleaving_strategy, Strategy};
use crate::util::pattern_search_simplex;

/// Default cap on the bias-distribution support size.
pub const DEFAULT_SUPPORT_CAP: usize = 64;

/// A finitely supported distribution over bias vectors: the watermarker's move.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasDistribution {
    support: Vec<BiasVector>,
    weights: Vec<f64>,
}

impl BiasDistribution {
    pub fn new(support: Vec<BiasVector>, weights: Vec<f64>) -> Result<Self> {
        Self::with_cap(support, weights, DEFAULT_SUPPORT_CAP)
    }

    pub fn with_cap(support: Vec<BiasVector>, weights: Vec<f64>, cap: usize) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if support.len() > cap {
            return Err(Error::InvalidDistribution(format!(
                "support size {} exceeds cap {cap}",
                support.len()
            )));
        }
        if support.len() != weights.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} support points but {} weights",
                support.len(),
                weights.len()
            )));
        }
        let q = support[0].q();
        if support.iter().any(|p| p.q() != q) {
            return Err(Error::InvalidDistribution("mixed alphabet sizes".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution("negative weight".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {s:.17}, not 1"
            )));
        }
        Ok(Self { support, weights })
    }

    /// A delta distribution at `p`.
    pub fn point(p: BiasVector) -> Self {
        Self {
            support: vec![p],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn q(&self) -> usize {
        self.support[0].q()
    }

    pub fn support(&self) -> &[BiasVector] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Bias argument accepted by the best-response solver.
#[derive(Clone, Copy, Debug)]
pub enum BiasArg<'a> {
    Point(&'a BiasVector),
    Mixture(&'a BiasDistribution),
}

/// Outcome of the convex best-response minimization.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub strategy: Strategy,
    /// E[I] at the returned strategy (q-ary symbols, no 1/c factor).
    pub value: f64,
    /// Frank-Wolfe linearization gap; bounds the suboptimality.
    pub gap: f64,
    pub iterations: u64,
}

/// Solver convergence certificate.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Certificate {
    /// Last inner best-response linearization gap.
    pub inner_gap: f64,
    /// Improvement of the upper bound in the final outer round.
    pub outer_improvement: f64,
    /// Total inner Frank-Wolfe iterations.
    pub iterations: u64,
}

/// One outer round of a game solve, in value units (1/c included).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u32,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
}

/// The bias returned by a game solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasChoice {
    Point { p: BiasVector },
    Distribution { dist: BiasDistribution },
}

/// A solved game with its certificates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GameSolution {
    pub params: Params,
    /// Game value in q-ary symbols, including the 1/c factor.
    pub value: f64,
    /// Certified upper bound on the value (same units).
    pub upper: f64,
    /// Certified lower bound on the value (same units).
    pub lower: f64,
    pub strategy: Strategy,
    pub bias: BiasChoice,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
}

impl GameSolution {
    /// Iteration trace as "round,upper,lower,gap" CSV.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("round,upper,lower,gap\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.round,
                crate::util::fmt_g17(r.upper),
                crate::util::fmt_g17(r.lower),
                crate::util::fmt_g17(r.gap)
            ));
        }
        out
    }
}

/// Tunable knobs for the game solvers.
#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Inner best-response gap target.
    pub inner_tol: f64,
    /// Outer duality-gap target on the (1/c)I value.
    pub outer_tol: f64,
    /// Lattice resolution of the worst-case bias scan.
    pub grid_resolution: usize,
    /// Pattern-search step floor in the bias refinement.
    pub refine_tol: f64,
    /// Number of refined starts in the worst-case scan.
    pub multi_start: usize,
    pub support_cap: usize,
    pub outer_rounds_cap: u32,
    pub inner_iter_cap: u64,
    pub restricted_iter_cap: u32,
}

impl SolverConfig {
    pub fn for_params(params: &Params) -> Self {
        Self {
            inner_tol: 1e-9,
            outer_tol: 1e-6,
            grid_resolution: if params.q() <= 3 { 32 } else { 16 },
            refine_tol: 1e-9,
            multi_start: 4,
            support_cap: DEFAULT_SUPPORT_CAP,
            outer_rounds_cap: 500,
            inner_iter_cap: 100_000,
            restricted_iter_cap: 200,
        }
    }

    /// Sets the outer tolerance and scales the inner one with it.
    pub fn with_outer_tol(mut self, tol: f64) -> Self {
        self.outer_tol = tol;
        self.inner_tol = (tol * 1e-3).clamp(1e-12, 1e-8);
        self
    }
}

/// Shared per-game tables for the hot loops.
struct Engine {
    params: Params,
    tallies: Arc<Vec<TallyVector>>,
    q: usize,
    /// Symbols with sigma_y > 0, per tally.
    allowed: Vec<Vec<usize>>,
}

impl Engine {
    fn new(params: Params) -> Self {
        let tallies = Arc::new(enumerate_tallies(&params));
        let q = params.q();
        let allowed = tallies
            .iter()
            .map(|t| (0..q).filter(|&y| t.count(y) > 0).collect())
            .collect();
        Self {
            params,
            tallies,
            q,
            allowed,
        }
    }

    fn from_strategy(s: &Strategy) -> Self {
        let params = *s.params();
        let tallies = s.tallies_arc();
        let q = params.q();
        let allowed = tallies
            .iter()
            .map(|t| (0..q).filter(|&y| t.count(y) > 0).collect())
            .collect();
        Self {
            params,
            tallies,
            q,
            allowed,
        }
    }

    fn lambdas(&self, p: &BiasVector) -> Vec<f64> {
        crate::channel::lambda_table(p, &self.tallies, self.params.c())
    }

    fn mi_mix(&self, theta: &[f64], mix: &[(f64, &[f64])]) -> f64 {
        mix.iter()
            .map(|(w, l)| w * mi_table(theta, l, self.q))
            .sum()
    }

    fn grad_mix(&self, theta: &[f64], mix: &[(f64, &[f64])], tmp: &mut [f64], out: &mut [f64]) {
        out.fill(0.0);
        for (w, l) in mix {
            mi_grad_table(theta, l, self.q, GRADIENT_FLOOR, tmp);
            for (o, t) in out.iter_mut().zip(tmp.iter()) {
                *o += w * t;
            }
        }
    }

    /// First and second derivatives of the mixture payoff along `dir`.
    ///
    /// phi'(0) = <grad, dir> and phi'' = sum d^2 Lambda / theta -
    /// sum tau_dot^2 / tau, per support point; convexity keeps phi'' >= 0.
    fn mi_dir_derivs(&self, theta: &[f64], dir: &[f64], mix: &[(f64, &[f64])]) -> (f64, f64) {
        let q = self.q;
        let lnq = (q as f64).ln();
        let mut tau = vec![0.0; q];
        let mut taud = vec![0.0; q];
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for (wt, l) in mix {
            tau.fill(0.0);
            taud.fill(0.0);
            let mut a = 0.0;
            let mut b = 0.0;
            for (t, &lt) in l.iter().enumerate() {
                if lt == 0.0 {
                    continue;
                }
                for y in 0..q {
                    let idx = t * q + y;
                    let th = theta[idx];
                    let dd = dir[idx];
                    tau[y] += lt * th;
                    taud[y] += lt * dd;
                    if dd != 0.0 && th > 0.0 {
                        a += dd * lt * th.ln();
                        b += dd * dd * lt / th;
                    }
                }
            }
            for y in 0..q {
                if tau[y] > 0.0 && taud[y] != 0.0 {
                    a -= taud[y] * tau[y].ln();
                    b -= taud[y] * taud[y] / tau[y];
                }
            }
            d1 += wt * a;
            d2 += wt * b;
        }
        (d1 / lnq, d2 / lnq)
    }

    fn strategy_from_flat(&self, theta: Vec<f64>) -> Strategy {
        Strategy::from_flat_unchecked(self.params, Arc::clone(&self.tallies), theta)
    }
}

struct FwOutcome {
    theta: Vec<f64>,
    value: f64,
    gap: f64,
    iterations: u64,
    converged: bool,
}

/// Conditional gradient over the Marking polytope.
///
/// The certificate is the standard Frank-Wolfe linearization gap from the
/// closed-form linear minimization (mass on the smallest-gradient allowed
/// symbols, ties split equally). Steps are pairwise per tally - mass flows
/// from the highest-gradient active symbol toward the smallest-gradient
/// allowed one, with a golden-section line search - which avoids the
/// interior-optimum zigzag of plain Frank-Wolfe steps.
fn frank_wolfe(
    engine: &Engine,
    mix: &[(f64, &[f64])],
    init: Vec<f64>,
    tol: f64,
    iter_cap: u64,
) -> FwOutcome {
    let q = engine.q;
    let n = init.len();
    let mut theta = init;
    let mut grad = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut direction = vec![0.0; n];
    let mut probe = vec![0.0; n];
    let mut gap = f64::INFINITY;
    let mut iterations = 0;

    for it in 1..=iter_cap {
        iterations = it;
        engine.grad_mix(&theta, mix, &mut tmp, &mut grad);

        // Linear minimization oracle and its gap.
        target.fill(0.0);
        gap = 0.0;
        for (t, allowed) in engine.allowed.iter().enumerate() {
            let row = t * q;
            let gmin = allowed
                .iter()
                .map(|&y| grad[row + y])
                .fold(f64::INFINITY, f64::min);
            let tie_eps = 1e-12 * gmin.abs().max(1.0);
            let ties: Vec<usize> = allowed
                .iter()
                .copied()
                .filter(|&y| grad[row + y] <= gmin + tie_eps)
                .collect();
            let mass = 1.0 / ties.len() as f64;
            for &y in &ties {
                target[row + y] = mass;
            }
            for y in 0..q {
                gap += grad[row + y] * (theta[row + y] - target[row + y]);
            }
        }
        if gap <= tol {
            renormalize_rows(&mut theta, q);
            return FwOutcome {
                value: engine.mi_mix(&theta, mix),
                theta,
                gap,
                iterations,
                converged: true,
            };
        }

        // Pairwise direction: per tally, drain the worst active symbol into
        // the best allowed one. Feasible for any step in [0, 1].
        direction.fill(0.0);
        let mut slope = 0.0;
        for (t, allowed) in engine.allowed.iter().enumerate() {
            let row = t * q;
            let mut best = allowed[0];
            let mut worst: Option<usize> = None;
            for &y in allowed {
                if grad[row + y] < grad[row + best] {
                    best = y;
                }
                if theta[row + y] > 0.0
                    && worst.map_or(true, |w| grad[row + y] > grad[row + w])
                {
                    worst = Some(y);
                }
            }
            let Some(worst) = worst else { continue };
            if worst == best {
                continue;
            }
            let mass = theta[row + worst];
            direction[row + best] += mass;
            direction[row + worst] -= mass;
            slope += mass * (grad[row + best] - grad[row + worst]);
        }
        if slope >= 0.0 {
            // no strictly descending pairwise move; with gap > tol this only
            // happens at numerical exhaustion
            renormalize_rows(&mut theta, q);
            return FwOutcome {
                value: engine.mi_mix(&theta, mix),
                theta,
                gap,
                iterations,
                converged: false,
            };
        }

        // Exact line search on the directional derivative: safeguarded
        // Newton, falling back to bisection of the sign change. Derivatives
        // stay numerically meaningful where value differences vanish into
        // rounding. The objective is convex in the step, phi'(0) < 0.
        let mut dphi2 = |g: f64| -> (f64, f64) {
            for ((pr, th), d) in probe.iter_mut().zip(&theta).zip(&direction) {
                *pr = (th + g * d).max(0.0);
            }
            engine.mi_dir_derivs(&probe, &direction, mix)
        };
        let step = if dphi2(1.0).0 <= 0.0 {
            1.0
        } else {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut g = 0.5;
            for _ in 0..40 {
                let (d1, d2) = dphi2(g);
                if d1 < 0.0 {
                    lo = g;
                } else {
                    hi = g;
                }
                if hi - lo < 1e-16 {
                    break;
                }
                let newton = if d2 > 0.0 { g - d1 / d2 } else { f64::NAN };
                g = if newton.is_finite() && newton > lo && newton < hi {
                    newton
                } else {
                    0.5 * (lo + hi)
                };
            }
            g
        };
        for (th, d) in theta.iter_mut().zip(&direction) {
            *th = (*th + step * d).max(0.0);
        }
    }
    renormalize_rows(&mut theta, q);
    FwOutcome {
        value: engine.mi_mix(&theta, mix),
        theta,
        gap,
        iterations,
        converged: false,
    }
}

/// Clears accumulated line-search rounding from the row sums.
fn renormalize_rows(theta: &mut [f64], q: usize) {
    for row in theta.chunks_mut(q) {
        let s: f64 = row.iter().sum();
        if s > 0.0 && s != 1.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

/// Minimizes I (a point bias) or E_F[I] (a mixture) over the
/// Marking-constrained strategy polytope.
///
/// Returns the optimizer with a linearization-gap certificate; errors with
/// the best iterate if the gap target is not met within the iteration cap.
pub fn best_response_theta(
    bias: BiasArg<'_>,
    init: &Strategy,
    tol: f64,
) -> Result<BestResponse> {
    if tol <= 0.0 {
        return Err(Error::InvalidParams(format!("tol must be > 0, got {tol}")));
    }
    let q_bias = match bias {
        BiasArg::Point(p) => p.q(),
        BiasArg::Mixture(d) => d.q(),
    };
    if q_bias != init.params().q() {
        return Err(Error::DimensionMismatch(format!(
            "bias has q={q_bias}, strategy has q={}",
            init.params().q()
        )));
    }
    let engine = Engine::from_strategy(init);
    let cfg = SolverConfig::for_params(&engine.params);
    let lambda_store: Vec<(f64, Vec<f64>)> = match bias {
        BiasArg::Point(p) => vec![(1.0, engine.lambdas(p))],
        BiasArg::Mixture(d) => d
            .support()
            .iter()
            .zip(d.weights())
            .map(|(p, &w)| (w, engine.lambdas(p)))
            .collect(),
    };
    let mix: Vec<(f64, &[f64])> = lambda_store.iter().map(|(w, l)| (*w, l.as_slice())).collect();
    let out = frank_wolfe(
        &engine,
        &mix,
        init.theta_flat().to_vec(),
        tol,
        cfg.inner_iter_cap,
    );
    let strategy = engine.strategy_from_flat(out.theta);
    if !out.converged {
        return Err(Error::BestResponseNonConvergence {
            gap: out.gap,
            iterations: out.iterations,
            best: Box::new(strategy),
        });
    }
    Ok(BestResponse {
        strategy,
        value: out.value,
        gap: out.gap,
        iterations: out.iterations,
    })
}

/// Grid scan plus refinement for the worst-case bias against `theta`.
fn worst_case_scan(
    engine: &Engine,
    theta: &[f64],
    grid_resolution: usize,
    refine_tol: f64,
    multi_start: usize,
) -> (Vec<f64>, f64) {
    let q = engine.q;
    let c = engine.params.c();
    let grid_params = Params::with_cap(grid_resolution, q, usize::MAX)
        .expect("grid composition space is always valid");
    let grid = enumerate_tallies(&grid_params);
    let gf = grid_resolution as f64;
    let tallies = &engine.tallies;

    let objective = |p: &[f64]| -> f64 {
        let lambdas = crate::channel::lambda_table_raw(p, tallies, c);
        mi_table(theta, &lambdas, q)
    };

    let values: Vec<f64> = grid
        .par_iter()
        .map(|comp| {
            let p: Vec<f64> = comp.as_slice().iter().map(|&k| k as f64 / gf).collect();
            objective(&p)
        })
        .collect();

    // top multi_start grid points, deterministically ordered
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));

    let mut best_p: Vec<f64> = Vec::new();
    let mut best_v = f64::NEG_INFINITY;
    for &idx in order.iter().take(multi_start.max(1)) {
        let start: Vec<f64> = grid[idx]
            .as_slice()
            .iter()
            .map(|&k| k as f64 / gf)
            .collect();
        let (p, v) = pattern_search_simplex(objective, &start, 1.0 / gf, refine_tol);
        if v > best_v {
            best_v = v;
            best_p = p;
        }
    }
    (best_p, best_v)
}

/// Maximizes I(s, p) over the simplex: exhaustive lattice scan at
/// `grid_resolution` followed by pattern-search refinement to `refine_tol`.
///
/// Global optimality is not guaranteed; the scan uses
/// [`SolverConfig::for_params`]'s multi-start count.
pub fn worst_case_p(
    s: &Strategy,
    grid_resolution: usize,
    refine_tol: f64,
) -> Result<(BiasVector, f64)> {
    let cfg = SolverConfig::for_params(s.params());
    worst_case_p_with(s, grid_resolution, refine_tol, cfg.multi_start)
}

/// [`worst_case_p`] with an explicit multi-start count.
pub fn worst_case_p_with(
    s: &Strategy,
    grid_resolution: usize,
    refine_tol: f64,
    multi_start: usize,
) -> Result<(BiasVector, f64)> {
    if grid_resolution < 2 {
        return Err(Error::InvalidParams(format!(
            "grid_resolution must be >= 2, got {grid_resolution}"
        )));
    }
    if refine_tol <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "refine_tol must be > 0, got {refine_tol}"
        )));
    }
    let engine = Engine::from_strategy(s);
    let (p, v) = worst_case_scan(
        &engine,
        s.theta_flat(),
        grid_resolution,
        refine_tol,
        multi_start,
    );
    Ok((BiasVector::normalized(p)?, v))
}

struct RestrictedOutcome {
    theta: Vec<f64>,
    weights: Vec<f64>,
    /// Certified lower bound on the restricted game value (I units).
    lower: f64,
    last_inner_gap: f64,
    inner_iterations: u64,
}

/// Bound bookkeeping for the restricted subgame: every best-response solve
/// certifies a lower bound (its value minus the linearization gap) and an
/// upper bound (its worst exposure over the support).
struct RestrictedState<'a> {
    engine: &'a Engine,
    lambdas: &'a [Vec<f64>],
    inner_tol: f64,
    inner_iter_cap: u64,
    warm: Vec<f64>,
    lower: f64,
    upper: f64,
    theta_best: Vec<f64>,
    w_best: Vec<f64>,
    last_gap: f64,
    inner_iterations: u64,
}

impl RestrictedState<'_> {
    /// V(w) = min_theta E_w[I] with bound updates; returns the value and the
    /// per-support exposure of the minimizer.
    fn eval(&mut self, w: &[f64]) -> (f64, Vec<f64>) {
        let mix: Vec<(f64, &[f64])> = w
            .iter()
            .zip(self.lambdas)
            .map(|(&wt, l)| (wt, l.as_slice()))
            .collect();
        let fw = frank_wolfe(
            self.engine,
            &mix,
            self.warm.clone(),
            self.inner_tol,
            self.inner_iter_cap,
        );
        self.inner_iterations += fw.iterations;
        self.last_gap = fw.gap;
        let lower_cand = fw.value - fw.gap.max(0.0);
        if lower_cand > self.lower {
            self.lower = lower_cand;
            self.w_best = w.to_vec();
        }
        let exposure: Vec<f64> = self
            .lambdas
            .iter()
            .map(|l| mi_table(&fw.theta, l, self.engine.q))
            .collect();
        let upper_cand = exposure.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if upper_cand < self.upper {
            self.upper = upper_cand;
            self.theta_best = fw.theta.clone();
        }
        self.warm = fw.theta;
        (fw.value, exposure)
    }
}

/// Solves max_w min_theta sum_k w_k I(theta, p_k) on a fixed support:
/// supergradient ascent on w with golden-section line searches toward the
/// highest-exposure support point. V(w) is concave (a min of linear
/// functions of w), so each segment search is unimodal.
fn solve_restricted(
    engine: &Engine,
    lambdas: &[Vec<f64>],
    w_init: &[f64],
    theta_init: &[f64],
    inner_tol: f64,
    target_gap: f64,
    inner_iter_cap: u64,
    restricted_iter_cap: u32,
) -> RestrictedOutcome {
    let k = lambdas.len();
    let mut st = RestrictedState {
        engine,
        lambdas,
        inner_tol,
        inner_iter_cap,
        warm: theta_init.to_vec(),
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
        theta_best: theta_init.to_vec(),
        w_best: w_init.to_vec(),
        last_gap: f64::INFINITY,
        inner_iterations: 0,
    };
    let mut w = w_init.to_vec();
    let (_, mut exposure) = st.eval(&w);
    const INV_PHI: f64 = 0.618_033_988_749_894_9;

    if k > 1 {
        for _ in 0..restricted_iter_cap {
            if st.upper - st.lower <= target_gap {
                break;
            }
            // candidate ascent directions: toward the highest-exposure
            // vertex, or a weight exchange from the lowest-exposure active
            // point into the highest; pick the larger linear potential
            let kstar = exposure
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("support is nonempty");
            let wdot: f64 = w.iter().zip(&exposure).map(|(a, b)| a * b).sum();
            let pot_fw = exposure[kstar] - wdot;
            let kmin = exposure
                .iter()
                .enumerate()
                .filter(|&(i, _)| w[i] > 1e-15 && i != kstar)
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
                .map(|(i, _)| i);
            let pot_pw = kmin.map_or(f64::NEG_INFINITY, |i| {
                (exposure[kstar] - exposure[i]) * w[i]
            });
            if pot_fw.max(pot_pw) <= 0.01 * target_gap {
                break; // w is optimal up to inner-solver noise
            }
            let pairwise = pot_pw > pot_fw;
            let blend = |g: f64, w: &[f64]| -> Vec<f64> {
                if pairwise {
                    let i = kmin.expect("pairwise requires an active donor");
                    let mass = w[i];
                    let mut out = w.to_vec();
                    out[i] = mass * (1.0 - g);
                    out[kstar] += mass * g;
                    out
                } else {
                    w.iter()
                        .enumerate()
                        .map(|(i, &x)| x * (1.0 - g) + if i == kstar { g } else { 0.0 })
                        .collect()
                }
            };
            // golden-section maximization of V along the segment
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut m1 = hi - INV_PHI * (hi - lo);
            let mut m2 = lo + INV_PHI * (hi - lo);
            let mut f1 = st.eval(&blend(m1, &w)).0;
            let mut f2 = st.eval(&blend(m2, &w)).0;
            for _ in 0..28 {
                if f1 >= f2 {
                    hi = m2;
                    m2 = m1;
                    f2 = f1;
                    m1 = hi - INV_PHI * (hi - lo);
                    f1 = st.eval(&blend(m1, &w)).0;
                } else {
                    lo = m1;
                    m1 = m2;
                    f1 = f2;
                    m2 = lo + INV_PHI * (hi - lo);
                    f2 = st.eval(&blend(m2, &w)).0;
                }
                if hi - lo < 1e-9 {
                    break;
                }
            }
            w = blend(0.5 * (lo + hi), &w);
            let (_, e) = st.eval(&w);
            exposure = e;
        }
    }
    RestrictedOutcome {
        theta: st.theta_best,
        weights: st.w_best,
        lower: st.lower,
        last_inner_gap: st.last_gap,
        inner_iterations: st.inner_iterations,
    }
}

fn seed_support(q: usize) -> Vec<BiasVector> {
    let mut seeds: Vec<BiasVector> = Vec::new();
    let mut push = |p: BiasVector, seeds: &mut Vec<BiasVector>| {
        if !seeds
            .iter()
            .any(|s| close_l_inf(s.as_slice(), p.as_slice(), 1e-12))
        {
            seeds.push(p);
        }
    };
    // degenerate points first: vertices, then edge midpoints, then uniform
    for a in 0..q {
        push(BiasVector::vertex(q, a), &mut seeds);
    }
    for a in 0..q {
        for b in (a + 1)..q {
            let mut p = vec![0.0; q];
            p[a] = 0.5;
            p[b] = 0.5;
            push(
                BiasVector::new(p).expect("edge midpoint is on the simplex"),
                &mut seeds,
            );
        }
    }
    push(BiasVector::uniform(q), &mut seeds);
    seeds
}

fn close_l_inf(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// All distinct coordinate permutations of `p` for small alphabets, else
/// just `p`. Orbit size is bounded by q! so this stays sane only for q <= 3.
fn permutation_orbit(p: &[f64]) -> Vec<Vec<f64>> {
    let q = p.len();
    let mut orbit = vec![p.to_vec()];
    if q > 3 {
        return orbit;
    }
    let mut idx: Vec<usize> = (0..q).collect();
    // Heap's algorithm
    let mut stack = vec![0usize; q];
    let mut i = 0;
    while i < q {
        if stack[i] < i {
            if i % 2 == 0 {
                idx.swap(0, i);
            } else {
                idx.swap(stack[i], i);
            }
            let cand: Vec<f64> = idx.iter().map(|&j| p[j]).collect();
            if !orbit.iter().any(|o| close_l_inf(o, &cand, 1e-12)) {
                orbit.push(cand);
            }
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    orbit
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GameMode {
    Minimax,
    Maximin,
}

fn solve_game(params: Params, cfg: &SolverConfig, mode: GameMode) -> Result<GameSolution> {
    if cfg.outer_tol <= 0.0 {
        return Err(Error::InvalidParams(format!(
            "tol must be > 0, got {}",
            cfg.outer_tol
        )));
    }
    let engine = Engine::new(params);
    let cf = params.c() as f64;
    let gap_target = cfg.outer_tol * cf; // internal bounds are in I units

    let mut support = seed_support(params.q());
    let mut lambdas: Vec<Vec<f64>> = support.iter().map(|p| engine.lambdas(p)).collect();
    let mut w = vec![1.0 / support.len() as f64; support.len()];
    let mut warm = interleaving_strategy(params).theta_flat().to_vec();

    let mut trace = Vec::new();
    let mut total_inner = 0u64;
    let mut prev_upper = f64::INFINITY;
    let mut restricted_target = gap_target * 0.5;
    let mut rounds = 0u32;

    let mut best_upper = f64::INFINITY;
    let mut best_lower = f64::NEG_INFINITY;
    let mut best_theta = warm.clone();
    let mut best_dist: Vec<(BiasVector, f64)> =
        vec![(BiasVector::uniform(params.q()), 1.0)];
    let mut worst_point = BiasVector::uniform(params.q());
    let mut last_inner_gap = 0.0;
    let mut outer_improvement = 0.0;

    let build_solution = |value: f64,
                          upper: f64,
                          lower: f64,
                          theta: &[f64],
                          dist: &[(BiasVector, f64)],
                          worst: &BiasVector,
                          cert: Certificate,
                          trace: &[TraceRow]|
     -> GameSolution {
        let strategy = engine.strategy_from_flat(theta.to_vec());
        let bias = match mode {
            GameMode::Minimax => BiasChoice::Point { p: worst.clone() },
            GameMode::Maximin => {
                let mut sup: Vec<BiasVector> = dist.iter().map(|(p, _)| p.clone()).collect();
                let mut wts: Vec<f64> = dist.iter().map(|(_, w)| *w).collect();
                if sup.is_empty() {
                    sup.push(BiasVector::uniform(params.q()));
                    wts.push(1.0);
                }
                let s: f64 = wts.iter().sum();
                wts.iter_mut().for_each(|x| *x /= s);
                BiasChoice::Distribution {
                    dist: BiasDistribution::with_cap(sup, wts, usize::MAX)
                        .expect("pruned weights form a distribution"),
                }
            }
        };
        GameSolution {
            params,
            value,
            upper,
            lower,
            strategy,
            bias,
            certificate: cert,
            trace: trace.to_vec(),
        }
    };

    for round in 1..=cfg.outer_rounds_cap {
        rounds = round;
        let out = solve_restricted(
            &engine,
            &lambdas,
            &w,
            &warm,
            cfg.inner_tol,
            restricted_target,
            cfg.inner_iter_cap,
            cfg.restricted_iter_cap,
        );
        total_inner += out.inner_iterations;
        last_inner_gap = out.last_inner_gap;
        warm = out.theta.clone();
        w = out.weights.clone();

        // global exposure of the restricted-optimal theta
        let (p_new, scan_val) = worst_case_scan(
            &engine,
            &out.theta,
            cfg.grid_resolution,
            cfg.refine_tol,
            cfg.multi_start,
        );
        let exposure: Vec<f64> = lambdas
            .iter()
            .map(|l| mi_table(&out.theta, l, engine.q))
            .collect();
        let mut upper = scan_val;
        let mut exposure_argmax: Option<usize> = None;
        for (k, &e) in exposure.iter().enumerate() {
            if e > upper {
                upper = e;
                exposure_argmax = Some(k);
            }
        }
        let lower = out.lower;
        outer_improvement = if prev_upper.is_finite() {
            prev_upper - upper
        } else {
            0.0
        };
        prev_upper = upper;

        if upper < best_upper {
            best_upper = upper;
            best_theta = out.theta.clone();
            worst_point = match exposure_argmax {
                Some(k) => support[k].clone(),
                None => BiasVector::normalized(p_new.clone())?,
            };
        }
        if lower > best_lower {
            best_lower = lower;
            best_dist = support
                .iter()
                .zip(&out.weights)
                .filter(|(_, &wt)| wt > 1e-10)
                .map(|(p, &wt)| (p.clone(), wt))
                .collect();
        }
        // inner-solver slack can let the certified bounds cross by epsilon
        best_lower = best_lower.min(best_upper);

        let gap = best_upper - best_lower;
        trace.push(TraceRow {
            round,
            upper: best_upper / cf,
            lower: best_lower / cf,
            gap: gap / cf,
        });
        if std::env::var_os("FPCAP_SOLVER_DEBUG").is_some() {
            eprintln!(
                "round {round}: support={} upper={:.9} lower={:.9} gap={:.3e} target={:.3e} inner_it={} p_new=({})",
                support.len(),
                best_upper / cf,
                best_lower / cf,
                gap / cf,
                restricted_target / cf,
                out.inner_iterations,
                p_new
                    .iter()
                    .map(|x| format!("{x:.4}"))
                    .collect::<Vec<_>>()
                    .join(",")
            );
        }

        if gap <= gap_target {
            let cert = Certificate {
                inner_gap: last_inner_gap,
                outer_improvement: outer_improvement / cf,
                iterations: total_inner,
            };
            let value = match mode {
                GameMode::Minimax => best_upper / cf,
                GameMode::Maximin => best_lower / cf,
            };
            return Ok(build_solution(
                value,
                best_upper / cf,
                best_lower / cf,
                &best_theta,
                &best_dist,
                &worst_point,
                cert,
                &trace,
            ));
        }

        // drop support points that carry no weight and sit clearly below the
        // saddle exposure; the oracle can always reintroduce them
        w.resize(support.len(), 0.0);
        if support.len() > 8 {
            let keep: Vec<bool> = (0..support.len())
                .map(|k| {
                    w.get(k).copied().unwrap_or(0.0) > 1e-9
                        || exposure[k] >= best_upper - 20.0 * gap_target
                })
                .collect();
            if keep.iter().any(|k| !k) {
                let mut idx = 0;
                support.retain(|_| {
                    let k = keep[idx];
                    idx += 1;
                    k
                });
                idx = 0;
                lambdas.retain(|_| {
                    let k = keep[idx];
                    idx += 1;
                    k
                });
                idx = 0;
                w.retain(|_| {
                    let k = keep[idx];
                    idx += 1;
                    k
                });
                let s: f64 = w.iter().sum();
                if s > 0.0 {
                    w.iter_mut().for_each(|x| *x /= s);
                } else {
                    let uniform = 1.0 / w.len() as f64;
                    w.fill(uniform);
                }
            }
        }

        // expand the support with the permutation orbit of the discovered
        // worst-case bias; exchangeability makes every relabeling of a good
        // bias point equally good. A candidate near an existing point moves
        // that point instead of appending a sibling: atom positions get
        // refined, not duplicated.
        let mut appended = 0usize;
        let mut moved = 0usize;
        for cand in permutation_orbit(&p_new) {
            if let Some(k) = support
                .iter()
                .position(|p| close_l_inf(p.as_slice(), &cand, 5e-3))
            {
                if !close_l_inf(support[k].as_slice(), &cand, 1e-9) {
                    let cand = BiasVector::normalized(cand)?;
                    lambdas[k] = engine.lambdas(&cand);
                    support[k] = cand;
                    moved += 1;
                }
                continue;
            }
            if support.len() + 1 > cfg.support_cap {
                let cert = Certificate {
                    inner_gap: last_inner_gap,
                    outer_improvement: outer_improvement / cf,
                    iterations: total_inner,
                };
                let value = match mode {
                    GameMode::Minimax => best_upper / cf,
                    GameMode::Maximin => best_lower / cf,
                };
                let best = build_solution(
                    value,
                    best_upper / cf,
                    best_lower / cf,
                    &best_theta,
                    &best_dist,
                    &worst_point,
                    cert,
                    &trace,
                );
                return Err(Error::SupportCapExceeded {
                    cap: cfg.support_cap,
                    gap: gap / cf,
                    best: Box::new(best),
                });
            }
            let cand = BiasVector::normalized(cand)?;
            lambdas.push(engine.lambdas(&cand));
            support.push(cand);
            appended += 1;
        }
        if appended == 0 && moved == 0 {
            // the oracle found nothing new: the remaining gap must come from
            // the restricted solve; tighten it and retry
            restricted_target *= 0.2;
            if restricted_target < gap_target * 1e-3 {
                break;
            }
            continue;
        }
        if appended > 0 {
            // seed the appended points with a bit of mass
            let eps = 0.1;
            let share = eps / appended as f64;
            w.iter_mut().for_each(|x| *x *= 1.0 - eps);
            w.resize(support.len(), 0.0);
            for slot in w.iter_mut().rev().take(appended) {
                *slot = share;
            }
        }
    }

    let cert = Certificate {
        inner_gap: last_inner_gap,
        outer_improvement: outer_improvement / cf,
        iterations: total_inner,
    };
    let value = match mode {
        GameMode::Minimax => best_upper / cf,
        GameMode::Maximin => best_lower / cf,
    };
    let best = build_solution(
        value,
        best_upper / cf,
        best_lower / cf,
        &best_theta,
        &best_dist,
        &worst_point,
        cert,
        &trace,
    );
    Err(Error::SolverNonConvergence {
        gap: (best_upper - best_lower) / cf,
        rounds,
        best: Box::new(best),
    })
}

/// Solves min over theta of max over p of (1/c) I(Y; Sigma | P = p).
///
/// Returns the certified upper bound as the value, with the optimizing
/// strategy and the worst-case bias point.
pub fn solve_minimax(params: Params, tol: f64) -> Result<GameSolution> {
    let cfg = SolverConfig::for_params(&params).with_outer_tol(tol);
    solve_game(params, &cfg, GameMode::Minimax)
}

/// [`solve_minimax`] with a full config.
pub fn solve_minimax_with(params: Params, cfg: &SolverConfig) -> Result<GameSolution> {
    solve_game(params, cfg, GameMode::Minimax)
}

/// Solves max over bias distributions F of min over theta of (1/c) E_F[I]
/// by double oracle over a growing finite support.
pub fn solve_maximin(params: Params, tol: f64) -> Result<GameSolution> {
    let cfg = SolverConfig::for_params(&params).with_outer_tol(tol);
    solve_game(params, &cfg, GameMode::Maximin)
}

/// [`solve_maximin`] with a full config.
pub fn solve_maximin_with(params: Params, cfg: &SolverConfig) -> Result<GameSolution> {
    solve_game(params, cfg, GameMode::Maximin)
}

/// |a.value - b.value| for two solutions of the same game.
pub fn duality_gap(a: &GameSolution, b: &GameSolution) -> Result<f64> {
    if !a.params.same_game(&b.params) {
        return Err(Error::DimensionMismatch(format!(
            "solutions are for different games: (c={}, q={}) vs (c={}, q={})",
            a.params.c(),
            a.params.q(),
            b.params.c(),
            b.params.q()
        )));
    }
    Ok((a.value - b.value).abs())
}
