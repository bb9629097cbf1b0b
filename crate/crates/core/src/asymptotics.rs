//! Closed-form asymptotic capacity and convergence studies.
//!
//! Ties the finite-c machinery to the large-coalition results: the capacity
//! formula (q-1)/(2 c^2 ln q), the convergence of scaled finite values
//! toward q-1, and the grid-certified lower bound max_u T(u) >= q-1 for
//! random Marking-respecting perturbations of the interleaving map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{BiasVector, Params};
use crate::error::{Error, Result};
use crate::payoff::{mutual_information, t_of_u};
use crate::solver::solve_minimax;
use crate::strategy::{interleaving_strategy, GammaMap};
use crate::util::pattern_search_simplex;

/// The asymptotic fingerprinting capacity (q-1) / (2 c^2 ln q), in q-ary
/// symbols.
pub fn asymptotic_capacity(params: &Params) -> f64 {
    let c = params.c() as f64;
    let q = params.q() as f64;
    (q - 1.0) / (2.0 * c * c * q.ln())
}

/// One row of a capacity table.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CapacityRow {
    pub q: usize,
    pub c: usize,
    pub capacity: f64,
}

/// Asymptotic capacity across alphabet sizes at fixed coalition size.
///
/// The returned column is checked to be strictly increasing in q.
pub fn capacity_vs_q(c: usize, q_list: &[usize]) -> Result<Vec<CapacityRow>> {
    if q_list.is_empty() {
        return Err(Error::InvalidParams("q_list must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(q_list.len());
    for &q in q_list {
        let params = Params::with_cap(c, q, usize::MAX)?;
        rows.push(CapacityRow {
            q,
            c,
            capacity: asymptotic_capacity(&params),
        });
    }
    for w in rows.windows(2) {
        if w[0].q < w[1].q && w[0].capacity >= w[1].capacity {
            return Err(Error::Domain(format!(
                "capacity not increasing from q={} to q={}",
                w[0].q, w[1].q
            )));
        }
    }
    Ok(rows)
}

/// How the finite value of a convergence row is computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConvergenceMode {
    /// (1/c) I at the interleaving strategy and uniform bias, by exact
    /// enumeration. Cheap for any c up to a few hundred.
    InterleavingUniform,
    /// Full minimax solve at the given tolerance.
    Solver { tol: f64 },
}

impl ConvergenceMode {
    pub fn label(&self) -> &'static str {
        match self {
            ConvergenceMode::InterleavingUniform => "interleaving-uniform",
            ConvergenceMode::Solver { .. } => "solver",
        }
    }
}

/// One coalition size of a convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub c: usize,
    pub q: usize,
    pub mode: String,
    /// (1/c) I or the solved game value, q-ary symbols.
    pub finite_value: f64,
    /// finite_value * 2 c^2 ln q.
    pub scaled: f64,
    /// q - 1.
    pub limit: f64,
    /// |scaled - limit|.
    pub gap: f64,
}

/// Scaled finite values against the q-1 limit across coalition sizes.
///
/// In interleaving-uniform mode the gap column must shrink across
/// consecutive doublings of c; a violation is an internal error.
pub fn convergence_study(
    q: usize,
    c_list: &[usize],
    mode: ConvergenceMode,
) -> Result<Vec<ConvergenceRow>> {
    if c_list.is_empty() {
        return Err(Error::InvalidParams("c_list must be nonempty".into()));
    }
    let limit = q as f64 - 1.0;
    let lnq = (q as f64).ln();
    let mut rows = Vec::with_capacity(c_list.len());
    for &c in c_list {
        let params = Params::new(c, q)?;
        let finite_value = match mode {
            ConvergenceMode::InterleavingUniform => {
                let s = interleaving_strategy(params);
                let p = BiasVector::uniform(q);
                mutual_information(&s, &p)?.value / c as f64
            }
            ConvergenceMode::Solver { tol } => solve_minimax(params, tol)?.value,
        };
        let scaled = finite_value * 2.0 * (c * c) as f64 * lnq;
        rows.push(ConvergenceRow {
            c,
            q,
            mode: mode.label().to_string(),
            finite_value,
            scaled,
            limit,
            gap: (scaled - limit).abs(),
        });
    }
    if mode == ConvergenceMode::InterleavingUniform {
        for w in rows.windows(2) {
            if w[1].c == 2 * w[0].c && w[1].gap >= w[0].gap {
                return Err(Error::Domain(format!(
                    "gap did not shrink from c={} to c={}",
                    w[0].c, w[1].c
                )));
            }
        }
    }
    Ok(rows)
}

/// A random Marking-respecting smooth perturbation of the interleaving map:
/// gamma(u) proportional to u_y (1 + magnitude * P_y(u)) with random
/// quadratic polynomials P_y normalized to |P_y| <= 1 on the orthant cube.
///
/// The factor u_y keeps every coordinate zero-set invariant, normalization
/// keeps gamma on the sphere, and magnitude <= 0.1 stays well inside the
/// theorem's hypotheses.
pub fn perturbed_interleaving(q: usize, magnitude: f64, seed: u64) -> Result<GammaMap> {
    if q < 2 {
        return Err(Error::InvalidParams(format!("q must be >= 2, got {q}")));
    }
    if !(0.0..=0.5).contains(&magnitude) {
        return Err(Error::InvalidParams(format!(
            "perturbation magnitude must be in [0, 0.5], got {magnitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // P_y(u) = a_y + sum_b b_yb u_b + sum_{b<=d} c_ybd u_b u_d, rescaled
    let mut consts = vec![0.0f64; q];
    let mut lins = vec![vec![0.0f64; q]; q];
    let mut quads = vec![vec![vec![0.0f64; q]; q]; q];
    for y in 0..q {
        let mut l1 = 0.0;
        consts[y] = rng.random_range(-1.0..1.0);
        l1 += consts[y].abs();
        for b in 0..q {
            lins[y][b] = rng.random_range(-1.0..1.0);
            l1 += lins[y][b].abs();
        }
        for b in 0..q {
            for d in b..q {
                quads[y][b][d] = rng.random_range(-1.0..1.0);
                l1 += quads[y][b][d].abs();
            }
        }
        // bound |P_y| by 1 on [0,1]^q via the coefficient l1 norm
        consts[y] /= l1;
        for b in 0..q {
            lins[y][b] /= l1;
            for d in b..q {
                quads[y][b][d] /= l1;
            }
        }
    }
    let label = format!("perturbed-interleaving(seed={seed}, m={magnitude})");
    let map = move |u: &[f64]| -> Vec<f64> {
        let mut v = vec![0.0; q];
        for y in 0..q {
            let mut pv = consts[y];
            for b in 0..q {
                pv += lins[y][b] * u[b];
                for d in b..q {
                    pv += quads[y][b][d] * u[b] * u[d];
                }
            }
            v[y] = u[y] * (1.0 + magnitude * pv);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        v
    };
    Ok(GammaMap::from_direction_fn(q, map, true, label))
}

/// Quasi-uniform directions on the nonnegative orthant of the unit sphere.
///
/// q = 2 uses an angular sweep; larger q maps a Kronecker low-discrepancy
/// sequence (generalized golden-ratio steps) through sorted spacings onto
/// the simplex and takes square roots.
pub fn sphere_orthant_grid(q: usize, n: usize) -> Vec<Vec<f64>> {
    assert!(q >= 2 && n >= 1);
    if q == 2 {
        return (0..n)
            .map(|i| {
                let phi = (i as f64 + 0.5) / n as f64 * std::f64::consts::FRAC_PI_2;
                vec![phi.cos(), phi.sin()]
            })
            .collect();
    }
    let d = q - 1;
    // root of x^{d+1} = x + 1 (the "plastic" generalization of the golden ratio)
    let mut phi = 1.5f64;
    for _ in 0..64 {
        phi = (1.0 + phi).powf(1.0 / (d as f64 + 1.0));
    }
    let alphas: Vec<f64> = (1..=d).map(|j| (1.0 / phi.powi(j as i32)).fract()).collect();
    (0..n)
        .map(|i| {
            let mut x: Vec<f64> = alphas
                .iter()
                .map(|a| (0.5 + (i as f64 + 1.0) * a).fract())
                .collect();
            x.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut p = Vec::with_capacity(q);
            let mut prev = 0.0;
            for &xi in &x {
                p.push(xi - prev);
                prev = xi;
            }
            p.push(1.0 - prev);
            let u: Vec<f64> = p.iter().map(|v| v.max(0.0).sqrt()).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Maximizes T(u) over a quasi-uniform grid with pattern-search refinement
/// from the best starting points. Returns (u*, T(u*)).
pub fn max_t_on_grid(
    map: &GammaMap,
    n_points: usize,
    refine_tol: f64,
    multi_start: usize,
) -> Result<(Vec<f64>, f64)> {
    let q = map.q();
    let grid = sphere_orthant_grid(q, n_points);
    let values: Vec<f64> = grid
        .par_iter()
        .map(|u| t_of_u(map, u).map(|t| t.value).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));

    // refine in p = u^2 coordinates where the domain is the plain simplex
    let objective = |p: &[f64]| -> f64 {
        let s: f64 = p.iter().sum();
        let u: Vec<f64> = p.iter().map(|x| (x.max(0.0) / s).sqrt()).collect();
        t_of_u(map, &u).map(|t| t.value).unwrap_or(f64::NEG_INFINITY)
    };
    let mut best_u = grid[order[0]].clone();
    let mut best_v = values[order[0]];
    for &idx in order.iter().take(multi_start.max(1)) {
        let start: Vec<f64> = grid[idx].iter().map(|x| x * x).collect();
        let (p, v) = pattern_search_simplex(objective, &start, 0.05, refine_tol);
        if v > best_v {
            best_v = v;
            let s: f64 = p.iter().sum();
            best_u = p.iter().map(|x| (x.max(0.0) / s).sqrt()).collect();
        }
    }
    Ok((best_u, best_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn capacity_formula_values() {
        // q = 2 reduces to 1 / (2 c^2 ln 2)
        let p = Params::new(10, 2).unwrap();
        assert_abs_diff_eq!(
            asymptotic_capacity(&p),
            1.0 / (200.0 * 2.0f64.ln()),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(asymptotic_capacity(&p), 0.0072135, epsilon = 1e-7);
        let p = Params::new(10, 3).unwrap();
        assert_abs_diff_eq!(asymptotic_capacity(&p), 0.0091024, epsilon = 1e-7);
    }

    #[test]
    fn capacity_ratios() {
        let c2 = asymptotic_capacity(&Params::new(100, 2).unwrap());
        let c4 = asymptotic_capacity(&Params::new(100, 4).unwrap());
        assert_abs_diff_eq!(c4 / c2, 1.5, epsilon = 1e-12);

        // c-scaling: quartering under doubling of c
        let a = asymptotic_capacity(&Params::new(50, 3).unwrap());
        let b = asymptotic_capacity(&Params::new(100, 3).unwrap());
        assert_abs_diff_eq!(a / b, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn capacity_monotone_in_q_and_c() {
        for c in 1..=1000usize {
            let mut prev = 0.0;
            for q in 2..=16usize {
                let v = asymptotic_capacity(&Params::with_cap(c, q, usize::MAX).unwrap());
                assert!(v > prev, "c={c}, q={q}: {v} <= {prev}");
                prev = v;
            }
        }
        for q in 2..=16usize {
            let mut prev = f64::INFINITY;
            for c in 1..=1000usize {
                let v = asymptotic_capacity(&Params::with_cap(c, q, usize::MAX).unwrap());
                assert!(v < prev, "q={q}, c={c}: {v} >= {prev}");
                prev = v;
            }
        }
    }

    #[test]
    fn capacity_vs_q_strictly_increasing() {
        let rows = capacity_vs_q(100, &[2, 3, 4, 5]).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].capacity > w[0].capacity);
        }
        assert!(capacity_vs_q(10, &[]).is_err());
    }

    #[test]
    fn convergence_study_interleaving_uniform() {
        let rows = convergence_study(2, &[10, 20, 40, 80], ConvergenceMode::InterleavingUniform)
            .unwrap();
        for w in rows.windows(2) {
            assert!(w[1].gap < w[0].gap, "gaps {:?}", rows);
        }
        for r in &rows {
            assert_eq!(r.limit, 1.0);
            assert!(r.scaled < 1.0); // approaches from below
        }

        let rows =
            convergence_study(3, &[10, 20, 40], ConvergenceMode::InterleavingUniform).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].gap < w[0].gap);
        }
        for r in &rows {
            assert_eq!(r.limit, 2.0);
        }
        // the last point is within striking distance of the limit
        assert!(rows.last().unwrap().gap < 0.5);
    }

    #[test]
    fn perturbed_maps_are_valid_gammas() {
        let mut checked = 0;
        for q in [2usize, 3] {
            for seed in 0..5u64 {
                let map = perturbed_interleaving(q, 0.1, seed).unwrap();
                for u in sphere_orthant_grid(q, 17) {
                    let g = map.gamma(&u).unwrap();
                    let n2: f64 = g.iter().map(|x| x * x).sum();
                    assert_abs_diff_eq!(n2, 1.0, epsilon = 1e-9);
                    assert!(g.iter().all(|&x| x >= 0.0));
                    checked += 1;
                }
                // Marking: zero coordinates stay zero
                let mut u = vec![0.0; q];
                u[q - 1] = 1.0;
                let g = map.gamma(&u).unwrap();
                for y in 0..q - 1 {
                    assert_eq!(g[y], 0.0);
                }
            }
        }
        assert!(checked > 0);
        assert!(perturbed_interleaving(3, 0.9, 0).is_err());
    }

    #[test]
    fn perturbed_map_is_deterministic() {
        let a = perturbed_interleaving(3, 0.1, 7).unwrap();
        let b = perturbed_interleaving(3, 0.1, 7).unwrap();
        let u = [0.5f64, 0.5, 0.7071067811865476];
        let n: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: Vec<f64> = u.iter().map(|x| x / n).collect();
        assert_eq!(a.gamma(&u).unwrap(), b.gamma(&u).unwrap());
    }

    #[test]
    fn orthant_grid_is_on_the_sphere() {
        for q in [2usize, 3, 4] {
            let grid = sphere_orthant_grid(q, 200);
            assert_eq!(grid.len(), 200);
            for u in &grid {
                let n2: f64 = u.iter().map(|x| x * x).sum();
                assert_abs_diff_eq!(n2, 1.0, epsilon = 1e-12);
                assert!(u.iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn interleaving_grid_max_is_q_minus_1() {
        for q in [2usize, 3] {
            let map = GammaMap::interleaving(q);
            let (_, t) = max_t_on_grid(&map, 500, 1e-6, 2).unwrap();
            assert_abs_diff_eq!(t, q as f64 - 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn lower_bound_holds_for_a_few_perturbed_maps() {
        // smaller version of the acceptance sweep
        for q in [2usize, 3] {
            for seed in 0..3u64 {
                let map = perturbed_interleaving(q, 0.1, seed).unwrap();
                let n = if q == 2 { 512 } else { 2000 };
                let (_, t) = max_t_on_grid(&map, n, 1e-7, 3).unwrap();
                assert!(
                    t >= q as f64 - 1.0 - 1e-6,
                    "q={q}, seed={seed}: max T = {t}"
                );
            }
        }
    }
}
