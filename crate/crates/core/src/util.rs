//! Shared numeric helpers.

use rand::Rng;

/// Format a float with 17 significant digits (round-trips exactly).
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Draw a uniform point on the q-simplex (flat Dirichlet) via exponential
/// spacings.
pub fn sample_uniform_simplex<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..q)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 && s.is_finite() {
            v.iter_mut().for_each(|x| *x /= s);
            return v;
        }
    }
}

/// Maximize `f` over the simplex by coordinate-pair pattern search.
///
/// Moves mass `step` from one coordinate to another as long as it improves,
/// halving the step when stuck, until `step < tol`. Deterministic; returns
/// the best point and value seen.
pub(crate) fn pattern_search_simplex<F>(
    f: F,
    start: &[f64],
    step0: f64,
    tol: f64,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let q = start.len();
    let mut best = start.to_vec();
    let mut best_val = f(&best);
    let mut step = step0;
    while step >= tol {
        let mut improved = false;
        let mut cand_best: Option<(Vec<f64>, f64)> = None;
        for i in 0..q {
            for j in 0..q {
                if i == j || best[j] < step {
                    continue;
                }
                let mut p = best.clone();
                p[i] += step;
                p[j] -= step;
                let v = f(&p);
                if v > best_val + 0.0 && cand_best.as_ref().map_or(true, |(_, bv)| v > *bv) {
                    cand_best = Some((p, v));
                }
            }
        }
        if let Some((p, v)) = cand_best {
            best = p;
            best_val = v;
            improved = true;
        }
        if !improved {
            step *= 0.5;
        }
    }
    (best, best_val)
}
