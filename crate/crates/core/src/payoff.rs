//! The payoff functionals of the capacity game.
//!
//! Finite c: the exact mutual information I(Y; Sigma | P = p) in q-ary
//! symbols, by full enumeration over the tally space. Large c: the
//! leading-order functional T, evaluated as T(p) from g-derivatives, as T(u)
//! from gamma-derivatives, and as the Fisher-information trace Tr(K I).

use nalgebra::DMatrix;

use crate::channel::{covariance, lambda_table, BiasVector};
use crate::error::{Error, Result};
use crate::strategy::{GammaMap, Strategy};

/// Floor for capped log-gradient entries at theta = 0.
pub const GRADIENT_FLOOR: f64 = -1e12;

/// Tolerance on ||u|| = 1 for sphere-side evaluations.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Threshold on |u . grad gamma_y| beyond which the general (non-radial)
/// form of T(u) is used.
pub const RADIAL_TOL: f64 = 1e-6;

// Vanishing-term thresholds for the g_y -> 0 limit convention.
const G_EPS: f64 = 1e-14;
const NUM_EPS: f64 = 1e-9;

/// An exact payoff evaluation.
#[derive(Clone, Debug)]
pub struct PayoffReport {
    /// I(Y; Sigma | P = p) in q-ary symbols.
    pub value: f64,
    /// Output marginal tau_{y|p}.
    pub tau: Vec<f64>,
    /// Per-tally contributions in canonical order.
    pub breakdown: Option<Vec<f64>>,
}

/// Fisher information of Y conditioned on the bias.
#[derive(Clone, Debug)]
pub struct FisherMatrix(DMatrix<f64>);

impl FisherMatrix {
    pub fn q(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }
}

/// T(u) and which form produced it.
#[derive(Clone, Copy, Debug)]
pub struct TofU {
    pub value: f64,
    /// True when |u . grad gamma_y| exceeded [`RADIAL_TOL`] and the
    /// general form sum(||grad gamma_y||^2 - (u . grad gamma_y)^2) was used.
    pub general_form: bool,
}

fn check_dims(s: &Strategy, p: &BiasVector) -> Result<()> {
    if s.params().q() != p.q() {
        return Err(Error::DimensionMismatch(format!(
            "strategy has q={}, bias has q={}",
            s.params().q(),
            p.q()
        )));
    }
    Ok(())
}

/// The output marginal tau_{y|p} = sum_sigma theta_{y|sigma} Lambda_{sigma|p}.
pub fn marginal_tau(s: &Strategy, p: &BiasVector) -> Result<Vec<f64>> {
    check_dims(s, p)?;
    let lambdas = lambda_table(p, s.tallies(), s.params().c());
    Ok(tau_from_lambdas(s.theta_flat(), &lambdas, p.q()))
}

fn tau_from_lambdas(theta: &[f64], lambdas: &[f64], q: usize) -> Vec<f64> {
    let mut tau = vec![0.0; q];
    for (t, &l) in lambdas.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (y, tv) in tau.iter_mut().enumerate() {
            *tv += l * theta[t * q + y];
        }
    }
    tau
}

/// Exact I(Y; Sigma | P = p) in q-ary symbols, with marginal and per-tally
/// breakdown.
pub fn mutual_information(s: &Strategy, p: &BiasVector) -> Result<PayoffReport> {
    check_dims(s, p)?;
    let q = p.q();
    let lambdas = lambda_table(p, s.tallies(), s.params().c());
    let theta = s.theta_flat();
    let tau = tau_from_lambdas(theta, &lambdas, q);
    let lnq = (q as f64).ln();
    let mut breakdown = vec![0.0; lambdas.len()];
    let mut value = 0.0;
    for (t, &l) in lambdas.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        let mut contrib = 0.0;
        for y in 0..q {
            let th = theta[t * q + y];
            if th == 0.0 {
                continue; // 0 log 0 = 0
            }
            contrib += th * l * (th / tau[y]).ln();
        }
        let contrib = contrib / lnq;
        breakdown[t] = contrib;
        value += contrib;
    }
    // enumeration rounding can leave a tiny negative residue
    if value < 0.0 && value > -1e-12 {
        value = 0.0;
    }
    Ok(PayoffReport {
        value,
        tau,
        breakdown: Some(breakdown),
    })
}

/// The mutual-information functional on a raw theta table.
///
/// tau is recomputed from the table as given; no simplex or Marking
/// constraint is assumed. This is the quantity
/// [`payoff_gradient_theta`] differentiates, and what finite-difference
/// oracles should probe.
pub fn mi_table(theta: &[f64], lambdas: &[f64], q: usize) -> f64 {
    let tau = tau_from_lambdas(theta, lambdas, q);
    let lnq = (q as f64).ln();
    let mut value = 0.0;
    for (t, &l) in lambdas.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for y in 0..q {
            let th = theta[t * q + y];
            if th == 0.0 {
                continue;
            }
            value += th * l * (th / tau[y]).ln();
        }
    }
    value / lnq
}

pub(crate) fn mi_grad_table(theta: &[f64], lambdas: &[f64], q: usize, floor: f64, out: &mut [f64]) {
    let tau = tau_from_lambdas(theta, lambdas, q);
    let lnq = (q as f64).ln();
    for (t, &l) in lambdas.iter().enumerate() {
        for y in 0..q {
            let idx = t * q + y;
            if l == 0.0 {
                out[idx] = 0.0;
                continue;
            }
            let th = theta[idx];
            let logq = if th > 0.0 && tau[y] > 0.0 {
                (th / tau[y]).ln() / lnq
            } else {
                floor
            };
            out[idx] = l * logq;
        }
    }
}

/// d I / d theta_{y|sigma} = Lambda_{sigma|p} log_q(theta / tau), holding
/// normalization unconstrained. Entries at theta = 0 are capped at
/// [`GRADIENT_FLOOR`] (times Lambda).
pub fn payoff_gradient_theta(s: &Strategy, p: &BiasVector) -> Result<Vec<f64>> {
    payoff_gradient_theta_with_floor(s, p, GRADIENT_FLOOR)
}

pub fn payoff_gradient_theta_with_floor(
    s: &Strategy,
    p: &BiasVector,
    floor: f64,
) -> Result<Vec<f64>> {
    check_dims(s, p)?;
    let q = p.q();
    let lambdas = lambda_table(p, s.tallies(), s.params().c());
    let mut out = vec![0.0; s.theta_flat().len()];
    mi_grad_table(s.theta_flat(), &lambdas, q, floor, &mut out);
    Ok(out)
}

/// T(p) = sum_y (1/g_y) { sum_a p_a (dg_y/dp_a)^2 - (sum_a p_a dg_y/dp_a)^2 }.
///
/// Terms with g_y = 0 are dropped only when the map declares that g_y and
/// its gradient term vanish together; otherwise the evaluation fails with a
/// singularity error naming the symbol.
pub fn t_of_p(map: &GammaMap, p: &BiasVector) -> Result<f64> {
    if map.q() != p.q() {
        return Err(Error::DimensionMismatch(format!(
            "map has q={}, bias has q={}",
            map.q(),
            p.q()
        )));
    }
    let g = map.g(p.as_slice())?;
    let grad = map.g_grad(p.as_slice())?;
    let q = p.q();
    let mut total = 0.0;
    for y in 0..q {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for a in 0..q {
            quad += p[a] * grad[y][a] * grad[y][a];
            lin += p[a] * grad[y][a];
        }
        let num = quad - lin * lin; // = <grad g_y, K grad g_y> >= 0
        if g[y] <= G_EPS {
            if map.boundary_vanishing() && num.abs() <= NUM_EPS {
                continue;
            }
            return Err(Error::Singularity { symbol: y });
        }
        total += num / g[y];
    }
    Ok(total)
}

/// T(u) = sum_y ||grad gamma_y||^2 for radially extended maps, with an
/// automatic fallback to the general form when the radial property fails.
pub fn t_of_u(map: &GammaMap, u: &[f64]) -> Result<TofU> {
    if map.q() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "map has q={}, u has q={}",
            map.q(),
            u.len()
        )));
    }
    let n2: f64 = u.iter().map(|x| x * x).sum();
    if (n2.sqrt() - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Domain(format!(
            "u must be a unit vector, got ||u|| = {:.12}",
            n2.sqrt()
        )));
    }
    if u.iter().any(|&x| x < 0.0) {
        return Err(Error::Domain("u must be nonnegative".into()));
    }
    let grad = map.gamma_grad(u)?;
    let q = map.q();
    let mut radial = vec![0.0; q];
    for y in 0..q {
        radial[y] = (0..q).map(|a| u[a] * grad[y][a]).sum();
    }
    let max_radial = radial.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let general_form = max_radial > RADIAL_TOL;
    let mut value = 0.0;
    for y in 0..q {
        let n: f64 = grad[y].iter().map(|x| x * x).sum();
        value += if general_form { n - radial[y] * radial[y] } else { n };
    }
    Ok(TofU {
        value,
        general_form,
    })
}

/// Fisher information I_ab = sum_y g_y (d ln g_y/dp_a)(d ln g_y/dp_b),
/// evaluated at a strictly interior point.
///
/// The matrix depends on how g is extended off the simplex; Tr(K I) does
/// not, because K annihilates constant row shifts. Rows here follow the
/// degree-one homogeneous extension (p . grad g_y = g_y), the convention
/// under which the interleaving map gives I = diag(1/p).
pub fn fisher_information_matrix(map: &GammaMap, p: &BiasVector) -> Result<FisherMatrix> {
    if map.q() != p.q() {
        return Err(Error::DimensionMismatch(format!(
            "map has q={}, bias has q={}",
            map.q(),
            p.q()
        )));
    }
    let g = map.g(p.as_slice())?;
    if let Some(y) = g.iter().position(|&x| x <= 0.0) {
        return Err(Error::Singularity { symbol: y });
    }
    let grad = map.g_grad(p.as_slice())?;
    let q = p.q();
    let m = DMatrix::from_fn(q, q, |a, b| {
        (0..q)
            .map(|y| (grad[y][a] + g[y]) * (grad[y][b] + g[y]) / g[y])
            .sum()
    });
    Ok(FisherMatrix(m))
}

/// Tr(K(p) I(p)); equals T(p) for the same map.
pub fn fisher_trace(map: &GammaMap, p: &BiasVector) -> Result<f64> {
    let fisher = fisher_information_matrix(map, p)?;
    let k = covariance(p);
    Ok((k.matrix() * fisher.matrix()).trace())
}

/// Eigenvalues of J^T J (descending), with J_ab = d gamma_a / d u_b.
pub fn jacobian_spectrum(map: &GammaMap, u: &[f64]) -> Result<Vec<f64>> {
    if map.q() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "map has q={}, u has q={}",
            map.q(),
            u.len()
        )));
    }
    let n2: f64 = u.iter().map(|x| x * x).sum();
    if (n2.sqrt() - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Domain(format!(
            "u must be a unit vector, got ||u|| = {:.12}",
            n2.sqrt()
        )));
    }
    let grad = map.gamma_grad(u)?;
    let q = map.q();
    let j = DMatrix::from_fn(q, q, |y, b| grad[y][b]);
    let jtj = j.transpose() * &j;
    let mut evs: Vec<f64> = jtj.symmetric_eigen().eigenvalues.iter().copied().collect();
    evs.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(evs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::channel::Params;
    use crate::strategy::{
        interleaving_gamma, interleaving_strategy, random_strategy, Strategy,
    };
    use crate::util::sample_uniform_simplex;

    fn interior_simplex(q: usize, rng: &mut ChaCha8Rng, floor: f64) -> BiasVector {
        loop {
            let p = sample_uniform_simplex(q, rng);
            if p.iter().all(|&x| x > floor) {
                return BiasVector::new(p).unwrap();
            }
        }
    }

    #[test]
    fn tau_equals_bias_for_interleaving() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (c, q) in [(2, 2), (5, 3), (8, 4)] {
            let s = interleaving_strategy(Params::new(c, q).unwrap());
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let tau = marginal_tau(&s, &p).unwrap();
            for y in 0..q {
                assert_abs_diff_eq!(tau[y], p[y], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn tau_for_forced_and_degenerate_cases() {
        // c = 1: the forced strategy relays the symbol, tau = p
        let s = random_strategy(Params::new(1, 3).unwrap(), 0);
        let p = BiasVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        let tau = marginal_tau(&s, &p).unwrap();
        for y in 0..3 {
            assert_abs_diff_eq!(tau[y], p[y], epsilon = 1e-12);
        }

        // p at a vertex: Marking forces y = 0 for any valid strategy
        let s = random_strategy(Params::new(3, 2).unwrap(), 4);
        let p = BiasVector::new(vec![1.0, 0.0]).unwrap();
        let tau = marginal_tau(&s, &p).unwrap();
        assert_abs_diff_eq!(tau[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tau[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tau_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..20 {
            let c = rng.random_range(1..6);
            let q = rng.random_range(2..5);
            let s = random_strategy(Params::new(c, q).unwrap(), seed);
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let tau = marginal_tau(&s, &p).unwrap();
            assert_abs_diff_eq!(tau.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mutual_information_known_values() {
        // c = 1, q = 2, uniform bias: I = H(p) = 1 q-ary symbol
        let s = random_strategy(Params::new(1, 2).unwrap(), 0);
        let p = BiasVector::uniform(2);
        let r = mutual_information(&s, &p).unwrap();
        assert_abs_diff_eq!(r.value, 1.0, epsilon = 1e-12);

        // c = 2, q = 2, uniform bias, interleaving: hand enumeration gives 1/2
        let s = interleaving_strategy(Params::new(2, 2).unwrap());
        let r = mutual_information(&s, &p).unwrap();
        assert_abs_diff_eq!(r.value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn mutual_information_zero_iff_independent() {
        // a table constant in sigma makes Y independent of Sigma: I = 0
        let params = Params::new(3, 2).unwrap();
        let tallies = crate::channel::enumerate_tallies(&params);
        let p = BiasVector::new(vec![0.4, 0.6]).unwrap();
        let lambdas = crate::channel::lambda_table(&p, &tallies, 3);
        let theta: Vec<f64> = tallies.iter().flat_map(|_| [0.3, 0.7]).collect();
        assert!(mi_table(&theta, &lambdas, 2).abs() < 1e-14);

        // vertex bias: a single reachable tally, so I = 0 for any valid strategy
        let s = random_strategy(params, 3);
        let pv = BiasVector::new(vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(mutual_information(&s, &pv).unwrap().value, 0.0, epsilon = 1e-14);

        // and a dependent case is strictly positive
        let s = interleaving_strategy(Params::new(2, 2).unwrap());
        assert!(mutual_information(&s, &BiasVector::uniform(2)).unwrap().value > 0.1);
    }

    #[test]
    fn payoff_value_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..30 {
            let c = rng.random_range(1..5);
            let q = rng.random_range(2..5);
            let s = random_strategy(Params::new(c, q).unwrap(), seed);
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let r = mutual_information(&s, &p).unwrap();
            assert!(r.value >= 0.0 && r.value <= 1.0, "I = {}", r.value);
            assert_abs_diff_eq!(r.tau.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            let breakdown_sum: f64 = r.breakdown.unwrap().iter().sum();
            assert_abs_diff_eq!(breakdown_sum, r.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-7;
        for case in 0..100 {
            let c = rng.random_range(1..5);
            let q = rng.random_range(2..4);
            let params = Params::new(c, q).unwrap();
            let s = random_strategy(params, case);
            let p = interior_simplex(q, &mut rng, 0.05);
            let lambdas = crate::channel::lambda_table(&p, s.tallies(), c);
            let grad = payoff_gradient_theta(&s, &p).unwrap();
            let theta = s.theta_flat();
            for idx in 0..theta.len() {
                if theta[idx] < 1e-3 {
                    continue; // one-sided region; the analytic value is the cap
                }
                let mut up = theta.to_vec();
                let mut dn = theta.to_vec();
                up[idx] += h;
                dn[idx] -= h;
                let fd = (mi_table(&up, &lambdas, q) - mi_table(&dn, &lambdas, q)) / (2.0 * h);
                let denom = fd.abs().max(1.0);
                assert!(
                    (grad[idx] - fd).abs() / denom < 1e-5,
                    "case {case}: grad {} vs fd {fd}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn gradient_special_values() {
        // at interleaving, c=2, q=2, uniform p: entry at sigma=(1,1), y=0 is
        // Lambda * log(0.5/0.5) = 0
        let s = interleaving_strategy(Params::new(2, 2).unwrap());
        let p = BiasVector::uniform(2);
        let grad = payoff_gradient_theta(&s, &p).unwrap();
        let t11 = s
            .tally_position(&crate::channel::TallyVector::new(vec![1, 1], 2).unwrap())
            .unwrap();
        assert_abs_diff_eq!(grad[t11 * 2], 0.0, epsilon = 1e-14);

        // sigma-blocks with Lambda = 0 have identically zero gradient
        let p = BiasVector::new(vec![1.0, 0.0]).unwrap();
        let grad = payoff_gradient_theta(&s, &p).unwrap();
        for t in 0..3 {
            let sigma = &s.tallies()[t];
            if sigma.count(1) > 0 {
                assert_eq!(grad[t * 2], 0.0);
                assert_eq!(grad[t * 2 + 1], 0.0);
            }
        }
    }

    #[test]
    fn convexity_in_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for case in 0..30 {
            let c = rng.random_range(1..5);
            let q = rng.random_range(2..4);
            let params = Params::new(c, q).unwrap();
            let s1 = random_strategy(params, 2 * case);
            let s2 = random_strategy(params, 2 * case + 1);
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let i1 = mutual_information(&s1, &p).unwrap().value;
            let i2 = mutual_information(&s2, &p).unwrap().value;
            for &t in &[0.25, 0.5, 0.75] {
                let mixed: Vec<Vec<f64>> = (0..s1.tallies().len())
                    .map(|k| {
                        (0..q)
                            .map(|y| t * s1.theta(k, y) + (1.0 - t) * s2.theta(k, y))
                            .collect()
                    })
                    .collect();
                let sm = Strategy::from_rows(params, mixed).unwrap();
                let im = mutual_information(&sm, &p).unwrap().value;
                assert!(
                    im <= t * i1 + (1.0 - t) * i2 + 1e-12,
                    "convexity violated: {im} > {}",
                    t * i1 + (1.0 - t) * i2
                );
            }
        }
    }

    #[test]
    fn t_of_p_interleaving_is_q_minus_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for q in [2usize, 3, 4] {
            let map = interleaving_gamma(q);
            for _ in 0..25 {
                let p = interior_simplex(q, &mut rng, 1e-6);
                let t = t_of_p(&map, &p).unwrap();
                assert_abs_diff_eq!(t, (q - 1) as f64, epsilon = 1e-10);
            }
        }
        // the hand value for q = 2 at p = (0.3, 0.7)
        let map = interleaving_gamma(2);
        let p = BiasVector::new(vec![0.3, 0.7]).unwrap();
        assert_abs_diff_eq!(t_of_p(&map, &p).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn t_of_p_vertex_limit_convention() {
        let map = interleaving_gamma(3);
        let p = BiasVector::vertex(3, 1);
        assert_abs_diff_eq!(t_of_p(&map, &p).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn t_of_p_singularity_without_flag() {
        // the symbol-swap map has g_0 = 0 at p = (1, 0) and does not declare
        // boundary vanishing, so the limit convention must not apply
        let map = GammaMap::from_direction_fn(2, |u| vec![u[1], u[0]], false, "swap");
        let p = BiasVector::new(vec![1.0, 0.0]).unwrap();
        match t_of_p(&map, &p) {
            Err(Error::Singularity { symbol: 0 }) => {}
            other => panic!("expected singularity at symbol 0, got {other:?}"),
        }
    }

    #[test]
    fn t_of_u_interleaving_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for q in [2usize, 3, 4] {
            let map = interleaving_gamma(q);
            for _ in 0..25 {
                let p = sample_uniform_simplex(q, &mut rng);
                let u: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
                let t = t_of_u(&map, &u).unwrap();
                assert!(!t.general_form);
                assert_abs_diff_eq!(t.value, (q - 1) as f64, epsilon = 1e-10);
            }
        }
        let map = interleaving_gamma(2);
        let t = t_of_u(&map, &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(t.value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn t_of_u_rejects_non_unit() {
        let map = interleaving_gamma(2);
        assert!(matches!(
            t_of_u(&map, &[0.5, 0.5]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn change_of_variables_consistency() {
        // T_of_u(gamma, u) = T_of_p(g, p) with p = u^2
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for q in [2usize, 3] {
            let map = interleaving_gamma(q);
            for _ in 0..20 {
                let p = sample_uniform_simplex(q, &mut rng);
                let u: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
                let bias = BiasVector::new(p).unwrap();
                let tu = t_of_u(&map, &u).unwrap().value;
                let tp = t_of_p(&map, &bias).unwrap();
                assert_abs_diff_eq!(tu, tp, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn fisher_hand_value_and_trace_identity() {
        let map = interleaving_gamma(2);
        let p = BiasVector::uniform(2);
        let f = fisher_information_matrix(&map, &p).unwrap();
        assert_abs_diff_eq!(f.get(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.get(1, 1), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.get(0, 1), 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for q in [2usize, 3, 4] {
            let map = interleaving_gamma(q);
            for _ in 0..17 {
                let p = interior_simplex(q, &mut rng, 1e-3);
                let tr = fisher_trace(&map, &p).unwrap();
                let t = t_of_p(&map, &p).unwrap();
                assert_abs_diff_eq!(tr, t, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn fisher_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..100 {
            let q = rng.random_range(2..5);
            let map = interleaving_gamma(q);
            let p = interior_simplex(q, &mut rng, 1e-3);
            let f = fisher_information_matrix(&map, &p).unwrap();
            let eig = f.matrix().clone().symmetric_eigen();
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-9, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn spectrum_of_interleaving_is_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for q in [2usize, 3, 4, 5] {
            let map = interleaving_gamma(q);
            let p = sample_uniform_simplex(q, &mut rng);
            let u: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
            let evs = jacobian_spectrum(&map, &u).unwrap();
            assert_eq!(evs.len(), q);
            for ev in &evs[..q - 1] {
                assert_abs_diff_eq!(*ev, 1.0, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(evs[q - 1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn spectrum_sum_equals_t_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..100 {
            let q = rng.random_range(2..5);
            let map = interleaving_gamma(q);
            let p = sample_uniform_simplex(q, &mut rng);
            let u: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
            let evs = jacobian_spectrum(&map, &u).unwrap();
            let t = t_of_u(&map, &u).unwrap().value;
            assert_abs_diff_eq!(evs.iter().sum::<f64>(), t, epsilon = 1e-8);
            assert!(evs.iter().all(|&e| e >= -1e-9));
        }
    }

    #[test]
    fn leading_order_residual_stays_bounded() {
        // |2c ln q I - T(p)| sqrt(c) over c-doublings at a fixed interior p
        for (q, p) in [
            (2usize, vec![0.35, 0.65]),
            (3usize, vec![0.2, 0.45, 0.35]),
        ] {
            let bias = BiasVector::new(p).unwrap();
            let map = interleaving_gamma(q);
            let t = t_of_p(&map, &bias).unwrap();
            let lnq = (q as f64).ln();
            let mut scaled = Vec::new();
            for c in [10usize, 20, 40, 80, 160] {
                let s = interleaving_strategy(Params::new(c, q).unwrap());
                let i = mutual_information(&s, &bias).unwrap().value;
                let resid = (2.0 * c as f64 * lnq * i - t).abs();
                scaled.push(resid * (c as f64).sqrt());
            }
            let first = scaled[0];
            for (k, w) in scaled.windows(2).enumerate() {
                assert!(
                    w[1] <= w[0] * 1.05,
                    "q={q}: scaled residual grew at doubling {k}: {:?}",
                    scaled
                );
            }
            assert!(
                scaled.last().unwrap() <= &first,
                "q={q}: residual not bounded by the first value: {scaled:?}"
            );
        }
    }
}
