//! Attack strategies: finite-coalition theta tables and continuum gamma maps.
//!
//! A [`Strategy`] stores one distribution over the alphabet per tally, in the
//! canonical tally order, under the Marking Assumption: a symbol nobody in
//! the coalition received is never output, and an unanimous symbol always is.
//!
//! A [`GammaMap`] is a continuum attack evaluated in both coordinate systems:
//! g_y(p) on the simplex and gamma_y(u) on the unit sphere with p = u^2.
//! Gamma is extended radially (it depends only on the direction of u), and g
//! is extended as g(p) := g(p / sum p); with these conventions u . grad
//! gamma_y = 0 holds by construction.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::channel::{enumerate_tallies, tally_index, Params, TallyVector};
use crate::error::{Error, Result};

/// Tolerance for per-tally distributions summing to one.
pub const DIST_TOL: f64 = 1e-12;

/// Default central-difference step for numeric gamma/g derivatives.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A finite-c attack: theta_{y|sigma} for every tally in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Strategy {
    params: Params,
    tallies: Arc<Vec<TallyVector>>,
    /// Flat tally-major table: theta[t * q + y].
    theta: Vec<f64>,
}

impl Strategy {
    /// Builds a strategy from per-tally rows (canonical order) and validates
    /// every constraint.
    pub fn from_rows(params: Params, rows: Vec<Vec<f64>>) -> Result<Self> {
        let s = Self::from_rows_unchecked(params, rows)?;
        let report = validate_strategy(&s);
        if !report.is_valid() {
            return Err(Error::InvalidStrategy(report.to_string()));
        }
        Ok(s)
    }

    /// Builds without constraint validation (shape is still checked).
    ///
    /// Useful for constructing deliberately invalid tables to feed
    /// [`validate_strategy`].
    pub fn from_rows_unchecked(params: Params, rows: Vec<Vec<f64>>) -> Result<Self> {
        let tallies = Arc::new(enumerate_tallies(&params));
        if rows.len() != tallies.len() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} rows, got {}",
                tallies.len(),
                rows.len()
            )));
        }
        let q = params.q();
        let mut theta = Vec::with_capacity(rows.len() * q);
        for r in &rows {
            if r.len() != q {
                return Err(Error::DimensionMismatch(format!(
                    "expected rows of length {q}, got {}",
                    r.len()
                )));
            }
            theta.extend_from_slice(r);
        }
        Ok(Self {
            params,
            tallies,
            theta,
        })
    }

    /// Builds a strategy by evaluating `f` on each tally in canonical order.
    pub fn from_fn(params: Params, mut f: impl FnMut(&TallyVector) -> Vec<f64>) -> Result<Self> {
        let tallies = enumerate_tallies(&params);
        let rows = tallies.iter().map(&mut f).collect();
        Self::from_rows(params, rows)
    }

    pub(crate) fn from_flat_unchecked(
        params: Params,
        tallies: Arc<Vec<TallyVector>>,
        theta: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(theta.len(), tallies.len() * params.q());
        Self {
            params,
            tallies,
            theta,
        }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn tallies(&self) -> &[TallyVector] {
        &self.tallies
    }

    pub(crate) fn tallies_arc(&self) -> Arc<Vec<TallyVector>> {
        Arc::clone(&self.tallies)
    }

    /// The output distribution for the tally at canonical index `t`.
    pub fn dist(&self, t: usize) -> &[f64] {
        let q = self.params.q();
        &self.theta[t * q..(t + 1) * q]
    }

    pub fn theta(&self, t: usize, y: usize) -> f64 {
        self.theta[t * self.params.q() + y]
    }

    pub(crate) fn theta_flat(&self) -> &[f64] {
        &self.theta
    }

    /// Canonical index of a tally, if it belongs to this game.
    pub fn tally_position(&self, sigma: &TallyVector) -> Option<usize> {
        tally_index(&self.tallies, sigma)
    }

    /// Serializes to the strategy wire format.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("strategy serialization cannot fail")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("strategy serialization cannot fail")
    }

    /// Parses and validates the strategy wire format; tallies must be in
    /// canonical order.
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ThetaRowWire {
    sigma: Vec<usize>,
    dist: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StrategyWire {
    c: usize,
    q: usize,
    theta: Vec<ThetaRowWire>,
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = StrategyWire {
            c: self.params.c(),
            q: self.params.q(),
            theta: self
                .tallies
                .iter()
                .enumerate()
                .map(|(t, sigma)| ThetaRowWire {
                    sigma: sigma.as_slice().to_vec(),
                    dist: self.dist(t).to_vec(),
                })
                .collect(),
        };
        wire.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let wire = StrategyWire::deserialize(de)?;
        let params = Params::new(wire.c, wire.q).map_err(D::Error::custom)?;
        let expected = enumerate_tallies(&params);
        if wire.theta.len() != expected.len() {
            return Err(D::Error::custom(format!(
                "expected {} tally rows, got {}",
                expected.len(),
                wire.theta.len()
            )));
        }
        let mut rows = Vec::with_capacity(wire.theta.len());
        for (row, want) in wire.theta.iter().zip(&expected) {
            if row.sigma != want.as_slice() {
                return Err(D::Error::custom(format!(
                    "tallies not in canonical order: found {:?}, expected {:?}",
                    row.sigma,
                    want.as_slice()
                )));
            }
            rows.push(row.dist.clone());
        }
        Strategy::from_rows(params, rows).map_err(D::Error::custom)
    }
}

/// The interleaving attack theta_{y|sigma} = sigma_y / c.
pub fn interleaving_strategy(params: Params) -> Strategy {
    let c = params.c() as f64;
    Strategy::from_fn(params, |sigma| {
        sigma.as_slice().iter().map(|&s| s as f64 / c).collect()
    })
    .expect("interleaving satisfies all strategy constraints")
}

/// A strategy drawn uniformly (flat Dirichlet) on each tally's allowed
/// sub-simplex; deterministic in `seed`.
pub fn random_strategy(params: Params, seed: u64) -> Strategy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Strategy::from_fn(params, |sigma| {
        let q = sigma.q();
        let mut row = vec![0.0; q];
        let allowed: Vec<usize> = (0..q).filter(|&y| sigma.count(y) > 0).collect();
        if allowed.len() == 1 {
            row[allowed[0]] = 1.0;
            return row;
        }
        loop {
            let mut s = 0.0;
            for &y in &allowed {
                let e = -(1.0 - rng.random::<f64>()).ln();
                row[y] = e;
                s += e;
            }
            if s > 0.0 && s.is_finite() {
                for &y in &allowed {
                    row[y] /= s;
                }
                return row;
            }
        }
    })
    .expect("Dirichlet rows satisfy all strategy constraints")
}

/// One failed strategy constraint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    /// Row does not sum to one.
    Normalization,
    /// sigma_y = 0 but theta_y != 0.
    MarkingZero,
    /// sigma_y = c but theta_y != 1.
    MarkingOne,
    /// Entry outside [0, 1].
    Range,
}

#[derive(Clone, Debug)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Canonical tally index.
    pub tally: usize,
    /// Offending symbol, when applicable.
    pub symbol: Option<usize>,
    pub magnitude: f64,
}

/// All constraint violations found in a strategy; empty means valid.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_valid() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            let what = match v.kind {
                ViolationKind::Normalization => "normalization",
                ViolationKind::MarkingZero => "marking-zero",
                ViolationKind::MarkingOne => "marking-one",
                ViolationKind::Range => "range",
            };
            write!(f, "{what} violation at tally {}", v.tally)?;
            if let Some(y) = v.symbol {
                write!(f, ", symbol {y}")?;
            }
            write!(f, ": magnitude {:.3e}", v.magnitude)?;
        }
        Ok(())
    }
}

/// Checks normalization, range, and both Marking constraints on every row.
pub fn validate_strategy(s: &Strategy) -> ValidationReport {
    let mut report = ValidationReport::default();
    let c = s.params().c();
    for (t, sigma) in s.tallies().iter().enumerate() {
        let row = s.dist(t);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL {
            report.violations.push(Violation {
                kind: ViolationKind::Normalization,
                tally: t,
                symbol: None,
                magnitude: (sum - 1.0).abs(),
            });
        }
        for (y, &v) in row.iter().enumerate() {
            if !(0.0..=1.0 + DIST_TOL).contains(&v) || !v.is_finite() {
                report.violations.push(Violation {
                    kind: ViolationKind::Range,
                    tally: t,
                    symbol: Some(y),
                    magnitude: v,
                });
            }
            if sigma.count(y) == 0 && v != 0.0 {
                report.violations.push(Violation {
                    kind: ViolationKind::MarkingZero,
                    tally: t,
                    symbol: Some(y),
                    magnitude: v.abs(),
                });
            }
            if sigma.count(y) == c && (v - 1.0).abs() > DIST_TOL {
                report.violations.push(Violation {
                    kind: ViolationKind::MarkingOne,
                    tally: t,
                    symbol: Some(y),
                    magnitude: (v - 1.0).abs(),
                });
            }
        }
    }
    report
}

enum Inner {
    /// gamma_y(u) = u_y / ||u||, with analytic derivatives.
    Interleaving,
    /// Arbitrary direction map evaluated on the unit sphere orthant.
    Direction(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

/// A continuum attack with evaluators in both coordinate systems.
pub struct GammaMap {
    q: usize,
    inner: Inner,
    step: f64,
    boundary_vanishing: bool,
    approximate: bool,
    label: String,
}

impl fmt::Debug for GammaMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GammaMap")
            .field("q", &self.q)
            .field("label", &self.label)
            .field("analytic", &self.is_analytic())
            .field("step", &self.step)
            .field("boundary_vanishing", &self.boundary_vanishing)
            .field("approximate", &self.approximate)
            .finish()
    }
}

impl GammaMap {
    /// The interleaving map gamma_y(u) = u_y / ||u||; derivatives analytic.
    pub fn interleaving(q: usize) -> Self {
        Self {
            q,
            inner: Inner::Interleaving,
            step: DEFAULT_FD_STEP,
            boundary_vanishing: true,
            approximate: false,
            label: "interleaving".into(),
        }
    }

    /// Wraps a direction evaluator defined on the unit sphere orthant.
    ///
    /// `boundary_vanishing` asserts that g_y and its gradient payoff term
    /// vanish together at g_y = 0, enabling the 0/0 limit convention in the
    /// payoff functional.
    pub fn from_direction_fn(
        q: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        boundary_vanishing: bool,
        label: impl Into<String>,
    ) -> Self {
        Self {
            q,
            inner: Inner::Direction(Arc::new(f)),
            step: DEFAULT_FD_STEP,
            boundary_vanishing,
            approximate: false,
            label: label.into(),
        }
    }

    /// Overrides the central-difference step.
    pub fn with_step(mut self, h: f64) -> Self {
        self.step = h;
        self
    }

    pub(crate) fn mark_approximate(mut self) -> Self {
        self.approximate = true;
        self
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.inner, Inner::Interleaving)
    }

    /// True when the map is a lattice interpolation rather than a smooth
    /// attack; such maps are diagnostics only.
    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn boundary_vanishing(&self) -> bool {
        self.boundary_vanishing
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// gamma(u) for any u != 0 (radial extension).
    pub fn gamma(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_q(u.len())?;
        let norm = norm2(u).sqrt();
        if norm == 0.0 {
            return Err(Error::Domain("gamma is undefined at u = 0".into()));
        }
        let unit: Vec<f64> = u.iter().map(|x| x / norm).collect();
        Ok(match &self.inner {
            Inner::Interleaving => unit,
            Inner::Direction(f) => f(&unit),
        })
    }

    /// Gradient table grad[y][a] = d gamma_y / d u_a.
    pub fn gamma_grad(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_q(u.len())?;
        match &self.inner {
            Inner::Interleaving => {
                let n2 = norm2(u);
                if n2 == 0.0 {
                    return Err(Error::Domain("gamma is undefined at u = 0".into()));
                }
                let n = n2.sqrt();
                let n3 = n2 * n;
                Ok((0..self.q)
                    .map(|y| {
                        (0..self.q)
                            .map(|a| {
                                let d = if y == a { 1.0 / n } else { 0.0 };
                                d - u[y] * u[a] / n3
                            })
                            .collect()
                    })
                    .collect())
            }
            Inner::Direction(_) => {
                let h = self.step;
                let mut grad = vec![vec![0.0; self.q]; self.q];
                for a in 0..self.q {
                    let mut up = u.to_vec();
                    let mut dn = u.to_vec();
                    up[a] += h;
                    dn[a] -= h;
                    let gp = self.gamma(&up)?;
                    let gm = self.gamma(&dn)?;
                    for y in 0..self.q {
                        grad[y][a] = (gp[y] - gm[y]) / (2.0 * h);
                    }
                }
                Ok(grad)
            }
        }
    }

    /// g(p) = gamma(sqrt(p / sum p))^2 for any nonnegative p with positive
    /// sum (homogeneous degree-0 extension).
    pub fn g(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_q(p.len())?;
        let s: f64 = p.iter().sum();
        if s <= 0.0 {
            return Err(Error::Domain("g is undefined at sum(p) <= 0".into()));
        }
        if p.iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("g requires nonnegative components".into()));
        }
        match &self.inner {
            Inner::Interleaving => Ok(p.iter().map(|x| x / s).collect()),
            Inner::Direction(f) => {
                let u: Vec<f64> = p.iter().map(|x| (x / s).sqrt()).collect();
                Ok(f(&u).iter().map(|g| g * g).collect())
            }
        }
    }

    /// Gradient table grad[y][a] = d g_y / d p_a under the homogeneous
    /// extension.
    pub fn g_grad(&self, p: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_q(p.len())?;
        match &self.inner {
            Inner::Interleaving => {
                let s: f64 = p.iter().sum();
                if s <= 0.0 {
                    return Err(Error::Domain("g is undefined at sum(p) <= 0".into()));
                }
                let s2 = s * s;
                Ok((0..self.q)
                    .map(|y| {
                        (0..self.q)
                            .map(|a| {
                                let d = if y == a { s } else { 0.0 };
                                (d - p[y]) / s2
                            })
                            .collect()
                    })
                    .collect())
            }
            Inner::Direction(_) => {
                let h = self.step;
                let mut grad = vec![vec![0.0; self.q]; self.q];
                for a in 0..self.q {
                    // shrink the downward step near the boundary p_a = 0
                    let hd = h.min(p[a]);
                    let mut up = p.to_vec();
                    let mut dn = p.to_vec();
                    up[a] += h;
                    dn[a] -= hd;
                    let gp = self.g(&up)?;
                    let gm = self.g(&dn)?;
                    for y in 0..self.q {
                        grad[y][a] = (gp[y] - gm[y]) / (h + hd);
                    }
                }
                Ok(grad)
            }
        }
    }

    fn check_q(&self, len: usize) -> Result<()> {
        if len != self.q {
            return Err(Error::DimensionMismatch(format!(
                "map has q={}, input has q={len}",
                self.q
            )));
        }
        Ok(())
    }
}

fn norm2(u: &[f64]) -> f64 {
    u.iter().map(|x| x * x).sum()
}

/// The interleaving attack as a [`GammaMap`].
pub fn interleaving_gamma(q: usize) -> GammaMap {
    GammaMap::interleaving(q)
}

/// Continuum proxy for a finite-c strategy by simplicial interpolation over
/// the tally lattice sigma/c.
///
/// Exact at lattice points and affine on each lattice cell, so it reproduces
/// linear strategies everywhere. Only piecewise-smooth: the returned map is
/// flagged approximate and meant for diagnostic T evaluation.
pub fn strategy_to_gamma(s: &Strategy) -> Result<GammaMap> {
    let c = s.params().c();
    let q = s.params().q();
    if c < 4 {
        return Err(Error::Unsupported(format!(
            "lattice interpolation needs c >= 4, got {c}"
        )));
    }
    let tallies = s.tallies_arc();
    let theta = s.theta_flat().to_vec();
    let map = move |unit: &[f64]| -> Vec<f64> {
        let p: Vec<f64> = unit.iter().map(|x| x * x).collect();
        let g = interpolate_theta(&tallies, &theta, c, q, &p);
        g.iter().map(|x| x.max(0.0).sqrt()).collect()
    };
    Ok(
        GammaMap::from_direction_fn(q, map, false, format!("lattice(c={c})"))
            .mark_approximate(),
    )
}

/// Evaluates the Freudenthal (Kuhn) simplicial interpolation of the theta
/// table at the point c*p of the dilated simplex.
///
/// Works in staircase coordinates y_k = c (p_1 + ... + p_k), where the
/// dilated simplex becomes the order polytope 0 <= y_1 <= ... <= y_{q-1} <= c
/// and the standard cube triangulation applies. Ties in the fractional parts
/// are broken toward the larger index, which keeps every chain vertex inside
/// the order polytope for monotone inputs.
fn interpolate_theta(
    tallies: &[TallyVector],
    theta: &[f64],
    c: usize,
    q: usize,
    p: &[f64],
) -> Vec<f64> {
    let d = q - 1;
    let cf = c as f64;
    let mut y = vec![0.0; d];
    let mut acc = 0.0;
    for k in 0..d {
        acc += p[k];
        y[k] = (cf * acc).clamp(0.0, cf);
        if k > 0 && y[k] < y[k - 1] {
            y[k] = y[k - 1];
        }
    }
    let base: Vec<usize> = y.iter().map(|v| (v.floor() as usize).min(c)).collect();
    let frac: Vec<f64> = y.iter().zip(&base).map(|(v, &b)| v - b as f64).collect();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        frac[b]
            .partial_cmp(&frac[a])
            .unwrap()
            .then_with(|| b.cmp(&a))
    });

    // barycentric weights of the Kuhn simplex chain
    let mut weights = Vec::with_capacity(d + 1);
    weights.push(1.0 - frac[order[0]]);
    for j in 1..d {
        weights.push(frac[order[j - 1]] - frac[order[j]]);
    }
    weights.push(frac[order[d - 1]]);

    let mut out = vec![0.0; q];
    let mut vertex = base;
    for (j, &w) in weights.iter().enumerate() {
        if j > 0 {
            vertex[order[j - 1]] += 1;
        }
        if w <= 1e-14 {
            continue;
        }
        // staircase vertex -> tally
        let mut sigma = vec![0usize; q];
        let mut ok = true;
        let mut prev = 0usize;
        for (k, &v) in vertex.iter().enumerate() {
            if v < prev || v > c {
                ok = false;
                break;
            }
            sigma[k] = v - prev;
            prev = v;
        }
        if !ok {
            continue;
        }
        sigma[q - 1] = c - prev;
        let sv = TallyVector::from_raw(sigma);
        let t = tally_index(tallies, &sv).expect("chain vertex must be a valid tally");
        for (yv, o) in theta[t * q..(t + 1) * q].iter().zip(out.iter_mut()) {
            *o += w * yv;
        }
    }
    out
}
