//! Coalition tallies and the multinomial collusion channel.
//!
//! For a coalition of size `c` over an alphabet of size `q`, the per-segment
//! symbol counts form a tally vector sigma with sum c, distributed
//! multinomially given the segment bias p. This module enumerates the tally
//! space in a canonical order and evaluates the channel weights and their
//! covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of tallies (compositions of c into q parts).
pub const DEFAULT_TALLY_CAP: usize = 1_000_000;

/// Tolerance for probability vectors summing to one.
pub const SIMPLEX_TOL: f64 = 1e-12;

fn default_cap() -> usize {
    DEFAULT_TALLY_CAP
}

/// Game parameters: coalition size `c` and alphabet size `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    c: usize,
    q: usize,
    #[serde(skip, default = "default_cap")]
    cap: usize,
}

impl Params {
    /// Validates `c >= 1`, `q >= 2` and that the tally space fits the
    /// default cap.
    pub fn new(c: usize, q: usize) -> Result<Self> {
        Self::with_cap(c, q, DEFAULT_TALLY_CAP)
    }

    /// Same as [`Params::new`] with an explicit tally cap.
    pub fn with_cap(c: usize, q: usize, cap: usize) -> Result<Self> {
        if c < 1 {
            return Err(Error::InvalidParams(format!("c must be >= 1, got {c}")));
        }
        if q < 2 {
            return Err(Error::InvalidParams(format!("q must be >= 2, got {q}")));
        }
        let count = composition_count(c, q)
            .ok_or_else(|| Error::InvalidParams(format!("composition count overflows for c={c}, q={q}")))?;
        if count > cap as u128 {
            return Err(Error::TallyCapExceeded { count, cap });
        }
        Ok(Self { c, q, cap })
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    /// Number of tallies, `binomial(c + q - 1, q - 1)`.
    pub fn tally_count(&self) -> usize {
        composition_count(self.c, self.q).expect("checked at construction") as usize
    }

    /// True when the two parameter sets describe the same game.
    pub fn same_game(&self, other: &Params) -> bool {
        self.c == other.c && self.q == other.q
    }
}

/// `binomial(c + q - 1, q - 1)`; `None` on u128 overflow.
pub fn composition_count(c: usize, q: usize) -> Option<u128> {
    let n = (c + q - 1) as u128;
    let k = (q - 1) as u128;
    let mut acc: u128 = 1;
    for i in 1..=k {
        acc = acc.checked_mul(n - k + i)? / i;
    }
    Some(acc)
}

/// A point on the q-simplex: the per-segment symbol bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BiasVector(Vec<f64>);

impl BiasVector {
    /// Requires nonnegative entries summing to 1 within [`SIMPLEX_TOL`].
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.len() < 2 {
            return Err(Error::InvalidBias(format!(
                "need at least 2 components, got {}",
                p.len()
            )));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidBias(
                "components must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidBias(format!(
                "components sum to {s:.17}, not 1"
            )));
        }
        Ok(Self(p))
    }

    /// Rescales a nonnegative vector with positive sum onto the simplex.
    pub fn normalized(mut p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidBias(
                "components must be finite and nonnegative".into(),
            ));
        }
        let s: f64 = p.iter().sum();
        if s <= 0.0 {
            return Err(Error::InvalidBias("components sum to zero".into()));
        }
        p.iter_mut().for_each(|x| *x /= s);
        Self::new(p)
    }

    /// The uniform bias (1/q, ..., 1/q).
    pub fn uniform(q: usize) -> Self {
        Self(vec![1.0 / q as f64; q])
    }

    /// The degenerate bias putting all mass on `alpha`.
    pub fn vertex(q: usize, alpha: usize) -> Self {
        let mut p = vec![0.0; q];
        p[alpha] = 1.0;
        Self(p)
    }

    pub fn q(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for BiasVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Symbol counts among the coalition in one segment; sums to c.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TallyVector(Vec<usize>);

impl TallyVector {
    pub fn new(sigma: Vec<usize>, c: usize) -> Result<Self> {
        let s: usize = sigma.iter().sum();
        if s != c {
            return Err(Error::InvalidTally(format!(
                "components sum to {s}, expected c={c}"
            )));
        }
        Ok(Self(sigma))
    }

    pub(crate) fn from_raw(sigma: Vec<usize>) -> Self {
        Self(sigma)
    }

    pub fn q(&self) -> usize {
        self.0.len()
    }

    /// Coalition size, i.e. the component sum.
    pub fn coalition_size(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn count(&self, alpha: usize) -> usize {
        self.0[alpha]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// All tallies for `params` in ascending lexicographic order.
///
/// This ordering is the canonical index used by every strategy table and
/// serialized artifact.
pub fn enumerate_tallies(params: &Params) -> Vec<TallyVector> {
    let mut out = Vec::with_capacity(params.tally_count());
    let mut cur = vec![0usize; params.q()];
    fill_tallies(&mut out, &mut cur, 0, params.c(), params.q());
    out
}

fn fill_tallies(out: &mut Vec<TallyVector>, cur: &mut Vec<usize>, pos: usize, rem: usize, q: usize) {
    if pos == q - 1 {
        cur[pos] = rem;
        out.push(TallyVector(cur.clone()));
        return;
    }
    for v in 0..=rem {
        cur[pos] = v;
        fill_tallies(out, cur, pos + 1, rem - v, q);
    }
}

/// Canonical index of `sigma` in a lexicographically sorted tally list.
pub fn tally_index(tallies: &[TallyVector], sigma: &TallyVector) -> Option<usize> {
    tallies.binary_search(sigma).ok()
}

/// Table of ln(k!) for k in 0..=n.
#[derive(Clone, Debug)]
pub struct LogFactorials(Vec<f64>);

impl LogFactorials {
    pub fn up_to(n: usize) -> Self {
        let mut t = Vec::with_capacity(n + 1);
        t.push(0.0);
        let mut acc = 0.0;
        for k in 1..=n {
            acc += (k as f64).ln();
            t.push(acc);
        }
        Self(t)
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    /// ln of the multinomial coefficient c! / prod(sigma_a!).
    pub fn ln_multinomial(&self, c: usize, sigma: &[usize]) -> f64 {
        self.get(c) - sigma.iter().map(|&s| self.get(s)).sum::<f64>()
    }
}

/// P[Sigma = sigma | P = p], the multinomial channel weight.
///
/// Evaluated in the log domain; stable up to c of a few hundred. Uses the
/// convention 0^0 = 1, so a zero bias component with a zero count
/// contributes factor 1.
pub fn multinomial_prob(p: &BiasVector, sigma: &TallyVector) -> Result<f64> {
    if p.q() != sigma.q() {
        return Err(Error::DimensionMismatch(format!(
            "bias has q={}, tally has q={}",
            p.q(),
            sigma.q()
        )));
    }
    let lf = LogFactorials::up_to(sigma.coalition_size());
    Ok(multinomial_prob_with(&lf, p.as_slice(), sigma.as_slice()))
}

pub(crate) fn multinomial_prob_with(lf: &LogFactorials, p: &[f64], sigma: &[usize]) -> f64 {
    let c: usize = sigma.iter().sum();
    let mut ln = lf.get(c);
    for (pa, &sa) in p.iter().zip(sigma) {
        if sa == 0 {
            continue; // 0^0 = 1
        }
        if *pa == 0.0 {
            return 0.0;
        }
        ln += sa as f64 * pa.ln() - lf.get(sa);
    }
    ln.exp()
}

/// Channel weights for every tally in canonical order.
pub fn lambda_table(p: &BiasVector, tallies: &[TallyVector], c: usize) -> Vec<f64> {
    lambda_table_raw(p.as_slice(), tallies, c)
}

pub(crate) fn lambda_table_raw(p: &[f64], tallies: &[TallyVector], c: usize) -> Vec<f64> {
    let lf = LogFactorials::up_to(c);
    tallies
        .iter()
        .map(|t| multinomial_prob_with(&lf, p, t.as_slice()))
        .collect()
}

/// The scaled covariance K of the multinomial tally,
/// `K_ab = delta_ab p_a - p_a p_b`.
#[derive(Clone, Debug)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
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

/// Covariance of the tally per coalition member, Cov(Sigma_a, Sigma_b)/c.
pub fn covariance(p: &BiasVector) -> CovarianceMatrix {
    let q = p.q();
    CovarianceMatrix(DMatrix::from_fn(q, q, |a, b| {
        let d = if a == b { p[a] } else { 0.0 };
        d - p[a] * p[b]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::util::sample_uniform_simplex;

    #[test]
    fn params_rejects_bad_inputs() {
        assert!(Params::new(0, 2).is_err());
        assert!(Params::new(1, 1).is_err());
        assert!(Params::new(1, 2).is_ok());
    }

    #[test]
    fn params_rejects_oversized_tally_space() {
        // binomial(1009, 9) is far beyond 10^6
        match Params::new(1000, 10) {
            Err(Error::TallyCapExceeded { count, cap }) => {
                assert!(count > cap as u128);
            }
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn tallies_small_cases() {
        let p = Params::new(2, 2).unwrap();
        let t: Vec<_> = enumerate_tallies(&p)
            .into_iter()
            .map(|t| t.as_slice().to_vec())
            .collect();
        assert_eq!(t, vec![vec![0, 2], vec![1, 1], vec![2, 0]]);

        let p = Params::new(1, 3).unwrap();
        let t: Vec<_> = enumerate_tallies(&p)
            .into_iter()
            .map(|t| t.as_slice().to_vec())
            .collect();
        assert_eq!(t, vec![vec![0, 0, 1], vec![0, 1, 0], vec![1, 0, 0]]);
    }

    #[test]
    fn tally_count_matches_brute_force() {
        // brute-force enumeration of all sigma with sum 3 over q = 3
        let mut count = 0;
        for a in 0..=3usize {
            for b in 0..=3usize {
                for c in 0..=3usize {
                    if a + b + c == 3 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 10);
        let p = Params::new(3, 3).unwrap();
        let tallies = enumerate_tallies(&p);
        assert_eq!(tallies.len(), 10);
        assert_eq!(p.tally_count(), 10);
    }

    #[test]
    fn tallies_sorted_unique_and_indexable() {
        let p = Params::new(5, 4).unwrap();
        let tallies = enumerate_tallies(&p);
        for w in tallies.windows(2) {
            assert!(w[0] < w[1], "not strictly ascending");
        }
        for (i, t) in tallies.iter().enumerate() {
            assert_eq!(tally_index(&tallies, t), Some(i));
        }
    }

    #[test]
    fn multinomial_simple_values() {
        let p = BiasVector::new(vec![0.5, 0.5]).unwrap();
        let s = TallyVector::new(vec![1, 1], 2).unwrap();
        assert_abs_diff_eq!(multinomial_prob(&p, &s).unwrap(), 0.5, epsilon = 1e-12);

        let p = BiasVector::new(vec![1.0, 0.0]).unwrap();
        let s = TallyVector::new(vec![2, 0], 2).unwrap();
        assert_abs_diff_eq!(multinomial_prob(&p, &s).unwrap(), 1.0, epsilon = 1e-15);

        // 3! * (1/3)^3 = 2/9, by hand
        let p = BiasVector::uniform(3);
        let s = TallyVector::new(vec![1, 1, 1], 3).unwrap();
        assert_abs_diff_eq!(multinomial_prob(&p, &s).unwrap(), 2.0 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn multinomial_zero_bias_zero_count() {
        let p = BiasVector::new(vec![0.0, 1.0]).unwrap();
        let s = TallyVector::new(vec![0, 3], 3).unwrap();
        assert_abs_diff_eq!(multinomial_prob(&p, &s).unwrap(), 1.0, epsilon = 1e-15);
        let s = TallyVector::new(vec![1, 2], 3).unwrap();
        assert_eq!(multinomial_prob(&p, &s).unwrap(), 0.0);
    }

    #[test]
    fn multinomial_normalizes_at_large_c() {
        let params = Params::new(200, 2).unwrap();
        let tallies = enumerate_tallies(&params);
        let p = BiasVector::new(vec![0.3, 0.7]).unwrap();
        let total: f64 = lambda_table(&p, &tallies, 200).iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn covariance_values_and_structure() {
        let p = BiasVector::vertex(4, 0);
        let k = covariance(&p);
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(k.get(a, b), 0.0);
            }
        }

        let p = BiasVector::new(vec![0.5, 0.5]).unwrap();
        let k = covariance(&p);
        assert_abs_diff_eq!(k.get(0, 0), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(k.get(0, 1), -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(k.get(1, 0), -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(k.get(1, 1), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn covariance_rows_sum_to_zero_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let q = rng.random_range(2..=6);
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let k = covariance(&p);
            for a in 0..q {
                let row: f64 = (0..q).map(|b| k.get(a, b)).sum();
                assert_abs_diff_eq!(row, 0.0, epsilon = 1e-14);
            }
            let eig = k.matrix().clone().symmetric_eigen();
            for ev in eig.eigenvalues.iter() {
                assert!(*ev >= -1e-12, "eigenvalue {ev} negative");
            }
            // all-ones vector is in the kernel
            let ones = nalgebra::DVector::from_element(q, 1.0);
            let img = k.matrix() * ones;
            assert!(img.amax() < 1e-14);
        }
    }

    #[test]
    fn empirical_covariance_matches() {
        // 1e5 multinomial samples, entrywise within 5 standard errors
        let c = 6usize;
        let p = BiasVector::new(vec![0.2, 0.5, 0.3]).unwrap();
        let q = 3;
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut sums = vec![0.0f64; q];
        let mut prods = vec![0.0f64; q * q];
        for _ in 0..n {
            let mut sigma = vec![0usize; q];
            for _ in 0..c {
                let r: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = q - 1;
                for (a, &pa) in p.as_slice().iter().enumerate() {
                    acc += pa;
                    if r < acc {
                        pick = a;
                        break;
                    }
                }
                sigma[pick] += 1;
            }
            for a in 0..q {
                sums[a] += sigma[a] as f64;
                for b in 0..q {
                    prods[a * q + b] += (sigma[a] * sigma[b]) as f64;
                }
            }
        }
        let k = covariance(&p);
        let nf = n as f64;
        for a in 0..q {
            for b in 0..q {
                let mean_a = sums[a] / nf;
                let mean_b = sums[b] / nf;
                let cov = prods[a * q + b] / nf - mean_a * mean_b;
                let est = cov / c as f64;
                // SE of a sample covariance entry under the normal approximation
                let va = c as f64 * k.get(a, a);
                let vb = c as f64 * k.get(b, b);
                let cab = c as f64 * k.get(a, b);
                let se = ((va * vb + cab * cab) / nf).sqrt() / c as f64;
                assert!(
                    (est - k.get(a, b)).abs() <= 5.0 * se,
                    "entry ({a},{b}): est {est}, want {}, se {se}",
                    k.get(a, b)
                );
            }
        }
    }

    proptest! {
        #[test]
        fn multinomial_sums_to_one(c in 1usize..8, q in 2usize..5, seed in 0u64..1000) {
            let params = Params::new(c, q).unwrap();
            let tallies = enumerate_tallies(&params);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = BiasVector::new(sample_uniform_simplex(q, &mut rng)).unwrap();
            let total: f64 = lambda_table(&p, &tallies, c).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
        }

        #[test]
        fn tally_enumeration_is_exhaustive(c in 1usize..7, q in 2usize..5) {
            let params = Params::new(c, q).unwrap();
            let tallies = enumerate_tallies(&params);
            prop_assert_eq!(tallies.len() as u128, composition_count(c, q).unwrap());
            for t in &tallies {
                prop_assert_eq!(t.coalition_size(), c);
            }
            let mut seen = std::collections::HashSet::new();
            for t in &tallies {
                prop_assert!(seen.insert(t.as_slice().to_vec()));
            }
        }
    }
}
