//! Monte-Carlo layer: bias-based code generation, coalition attacks, Marking
//! verification, and empirical payoff estimation cross-checking the exact
//! evaluator.
//!
//! All sampling is reproducible: callers pass an `Rng`, and segment-level
//! work derives one independent ChaCha substream per segment from a single
//! master seed, so parallel order never matters.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::channel::{BiasVector, TallyVector};
use crate::error::{Error, Result};
use crate::solver::BiasDistribution;
use crate::strategy::Strategy;
use crate::util::{fmt_g17, sample_uniform_simplex};

/// Default cap on n*m code cells.
pub const DEFAULT_CODE_CELL_CAP: usize = 200_000_000;

/// Minimum sample count for the empirical estimator.
pub const MIN_MI_SAMPLES: usize = 1000;

/// Number of bootstrap resamples behind the reported standard error.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// The watermarker's bias distribution family.
#[derive(Clone, Debug)]
pub enum BiasFamily {
    /// Flat Dirichlet over the q-simplex.
    UniformSimplex { q: usize },
    /// Symmetric Dirichlet with concentration kappa.
    Dirichlet { q: usize, kappa: f64 },
    /// Tardos's arcsine bias density, binary alphabets only.
    Arcsine,
    /// A finitely supported distribution, e.g. a solver output.
    FiniteSupport(BiasDistribution),
}

impl BiasFamily {
    pub fn uniform_simplex(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidParams(format!("q must be >= 2, got {q}")));
        }
        Ok(BiasFamily::UniformSimplex { q })
    }

    pub fn dirichlet(q: usize, kappa: f64) -> Result<Self> {
        if q < 2 {
            return Err(Error::InvalidParams(format!("q must be >= 2, got {q}")));
        }
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::InvalidParams(format!(
                "dirichlet kappa must be > 0, got {kappa}"
            )));
        }
        Ok(BiasFamily::Dirichlet { q, kappa })
    }

    /// Errors unless q = 2: the arcsine density is a binary construction.
    pub fn arcsine(q: usize) -> Result<Self> {
        if q != 2 {
            return Err(Error::Unsupported(format!(
                "the arcsine bias family is binary-only, got q={q}"
            )));
        }
        Ok(BiasFamily::Arcsine)
    }

    pub fn finite_support(dist: BiasDistribution) -> Self {
        BiasFamily::FiniteSupport(dist)
    }

    pub fn q(&self) -> usize {
        match self {
            BiasFamily::UniformSimplex { q } | BiasFamily::Dirichlet { q, .. } => *q,
            BiasFamily::Arcsine => 2,
            BiasFamily::FiniteSupport(d) => d.q(),
        }
    }
}

/// One draw from the family.
pub fn sample_bias<R: Rng + ?Sized>(family: &BiasFamily, rng: &mut R) -> BiasVector {
    match family {
        BiasFamily::UniformSimplex { q } => {
            BiasVector::new(sample_uniform_simplex(*q, rng)).expect("spacings lie on the simplex")
        }
        BiasFamily::Dirichlet { q, kappa } => {
            let gamma = Gamma::new(*kappa, 1.0).expect("kappa validated at construction");
            loop {
                let draws: Vec<f64> = (0..*q).map(|_| gamma.sample(rng)).collect();
                let s: f64 = draws.iter().sum();
                if s > 0.0 && s.is_finite() {
                    return BiasVector::new(draws.iter().map(|x| x / s).collect())
                        .expect("normalized gamma draws lie on the simplex");
                }
            }
        }
        BiasFamily::Arcsine => {
            // inverse-CDF: X = sin^2(pi U / 2) has the arcsine law on [0,1]
            let u: f64 = rng.random();
            let x = (std::f64::consts::FRAC_PI_2 * u).sin().powi(2);
            BiasVector::new(vec![x, 1.0 - x]).expect("arcsine pair lies on the simplex")
        }
        BiasFamily::FiniteSupport(d) => {
            let r: f64 = rng.random();
            let mut acc = 0.0;
            for (p, &w) in d.support().iter().zip(d.weights()) {
                acc += w;
                if r < acc {
                    return p.clone();
                }
            }
            d.support().last().expect("support is nonempty").clone()
        }
    }
}

/// An n x m code over {0..q-1} with its per-segment biases.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    q: usize,
    n: usize,
    m: usize,
    /// Row-major user x segment symbols.
    symbols: Vec<u8>,
    biases: Vec<BiasVector>,
}

impl CodeMatrix {
    pub fn q(&self) -> usize {
        self.q
    }

    pub fn users(&self) -> usize {
        self.n
    }

    pub fn segments(&self) -> usize {
        self.m
    }

    pub fn symbol(&self, user: usize, segment: usize) -> u8 {
        self.symbols[user * self.m + segment]
    }

    pub fn row(&self, user: usize) -> &[u8] {
        &self.symbols[user * self.m..(user + 1) * self.m]
    }

    pub fn bias(&self, segment: usize) -> &BiasVector {
        &self.biases[segment]
    }
}

fn sample_symbol<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> u8 {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0u8;
    for (a, &pa) in p.iter().enumerate() {
        if pa <= 0.0 {
            continue;
        }
        acc += pa;
        last = a as u8;
        if r < acc {
            return last;
        }
    }
    last
}

/// Draws a tally by c categorical draws from p.
pub fn sample_tally<R: Rng + ?Sized>(c: usize, p: &BiasVector, rng: &mut R) -> TallyVector {
    let mut sigma = vec![0usize; p.q()];
    for _ in 0..c {
        sigma[sample_symbol(p.as_slice(), rng) as usize] += 1;
    }
    TallyVector::new(sigma, c).expect("c draws sum to c")
}

/// Two-step code generation: one bias draw per segment, then independent
/// symbols for every user.
pub fn generate_code<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    family: &BiasFamily,
    rng: &mut R,
) -> Result<CodeMatrix> {
    generate_code_with_cap(n, m, family, rng, DEFAULT_CODE_CELL_CAP)
}

pub fn generate_code_with_cap<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    family: &BiasFamily,
    rng: &mut R,
    cell_cap: usize,
) -> Result<CodeMatrix> {
    if n < 1 || m < 1 {
        return Err(Error::InvalidParams(format!(
            "need n >= 1 and m >= 1, got n={n}, m={m}"
        )));
    }
    let q = family.q();
    if q > u8::MAX as usize + 1 {
        return Err(Error::SizeCap(format!("alphabet size {q} exceeds u8 symbols")));
    }
    let cells = n
        .checked_mul(m)
        .ok_or_else(|| Error::SizeCap(format!("n*m overflows for n={n}, m={m}")))?;
    if cells > cell_cap {
        return Err(Error::SizeCap(format!(
            "code with {cells} cells exceeds cap {cell_cap}"
        )));
    }
    let master = rng.next_u64();
    // per-segment substreams keep generation order-independent
    let columns: Vec<(BiasVector, Vec<u8>)> = (0..m)
        .into_par_iter()
        .map(|j| {
            let mut seg_rng = ChaCha8Rng::seed_from_u64(master);
            seg_rng.set_stream(j as u64);
            let bias = sample_bias(family, &mut seg_rng);
            let col: Vec<u8> = (0..n)
                .map(|_| sample_symbol(bias.as_slice(), &mut seg_rng))
                .collect();
            (bias, col)
        })
        .collect();
    let mut symbols = vec![0u8; cells];
    let mut biases = Vec::with_capacity(m);
    for (j, (bias, col)) in columns.into_iter().enumerate() {
        for (i, s) in col.into_iter().enumerate() {
            symbols[i * m + j] = s;
        }
        biases.push(bias);
    }
    Ok(CodeMatrix {
        q,
        n,
        m,
        symbols,
        biases,
    })
}

/// Runs the attack: per segment, tally the coalition's symbols and draw the
/// forged symbol from theta. The output satisfies the Marking Assumption by
/// construction.
pub fn collude<R: Rng + ?Sized>(
    code: &CodeMatrix,
    coalition: &[usize],
    s: &Strategy,
    rng: &mut R,
) -> Result<Vec<u8>> {
    let c = s.params().c();
    if coalition.len() != c {
        return Err(Error::DimensionMismatch(format!(
            "coalition size {} but strategy has c={c}",
            coalition.len()
        )));
    }
    if s.params().q() != code.q() {
        return Err(Error::DimensionMismatch(format!(
            "strategy has q={}, code has q={}",
            s.params().q(),
            code.q()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for &u in coalition {
        if u >= code.users() {
            return Err(Error::InvalidParams(format!(
                "coalition member {u} out of range for n={}",
                code.users()
            )));
        }
        if !seen.insert(u) {
            return Err(Error::InvalidParams(format!(
                "coalition member {u} listed twice"
            )));
        }
    }
    let master = rng.next_u64();
    let q = code.q();
    let forged: Vec<u8> = (0..code.segments())
        .into_par_iter()
        .map(|j| {
            let mut seg_rng = ChaCha8Rng::seed_from_u64(master);
            seg_rng.set_stream(j as u64);
            let mut sigma = vec![0usize; q];
            for &u in coalition {
                sigma[code.symbol(u, j) as usize] += 1;
            }
            let tally = TallyVector::new(sigma, c).expect("coalition rows sum to c");
            let t = s
                .tally_position(&tally)
                .expect("every coalition tally is enumerated");
            sample_symbol(s.dist(t), &mut seg_rng)
        })
        .collect();
    Ok(forged)
}

/// Marking check result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarkingReport {
    pub ok: bool,
    /// First segment where the forged symbol was seen by no colluder.
    pub first_violation: Option<usize>,
}

/// True iff every forged symbol appears among the coalition's symbols in
/// that segment.
pub fn verify_marking(code: &CodeMatrix, coalition: &[usize], y: &[u8]) -> Result<MarkingReport> {
    if y.len() != code.segments() {
        return Err(Error::DimensionMismatch(format!(
            "forgery has {} segments, code has {}",
            y.len(),
            code.segments()
        )));
    }
    if coalition.iter().any(|&u| u >= code.users()) {
        return Err(Error::InvalidParams("coalition member out of range".into()));
    }
    for (j, &yj) in y.iter().enumerate() {
        let seen = coalition.iter().any(|&u| code.symbol(u, j) == yj);
        if !seen {
            return Ok(MarkingReport {
                ok: false,
                first_violation: Some(j),
            });
        }
    }
    Ok(MarkingReport {
        ok: true,
        first_violation: None,
    })
}

/// An empirical mutual-information estimate in q-ary symbols.
#[derive(Clone, Copy, Debug)]
pub struct MiEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Plug-in estimator with Miller-Madow bias correction over joint
/// (tally, symbol) counts; q-ary units.
fn mi_miller_madow(cells: &[(usize, usize, u64)], q: usize, total: u64) -> f64 {
    let n = total as f64;
    let mut x_marg: HashMap<usize, u64> = HashMap::new();
    let mut y_marg = vec![0u64; q];
    for &(x, y, k) in cells {
        *x_marg.entry(x).or_insert(0) += k;
        y_marg[y] += k;
    }
    let mut mi_nats = 0.0;
    for &(x, y, k) in cells {
        if k == 0 {
            continue;
        }
        let kf = k as f64;
        mi_nats += kf / n * (kf * n / (x_marg[&x] as f64 * y_marg[y] as f64)).ln();
    }
    let k_joint = cells.iter().filter(|&&(_, _, k)| k > 0).count() as f64;
    let k_x = x_marg.values().filter(|&&k| k > 0).count() as f64;
    let k_y = y_marg.iter().filter(|&&k| k > 0).count() as f64;
    let correction = ((k_x - 1.0) + (k_y - 1.0) - (k_joint - 1.0)) / (2.0 * n);
    (mi_nats + correction) / (q as f64).ln()
}

/// Estimates I(Y; Sigma | P = p) from `samples` draws of (tally, forged
/// symbol), with a nonparametric bootstrap standard error.
pub fn empirical_mutual_information<R: Rng + ?Sized>(
    s: &Strategy,
    p: &BiasVector,
    samples: usize,
    rng: &mut R,
) -> Result<MiEstimate> {
    if samples < MIN_MI_SAMPLES {
        return Err(Error::InvalidParams(format!(
            "need at least {MIN_MI_SAMPLES} samples, got {samples}"
        )));
    }
    if s.params().q() != p.q() {
        return Err(Error::DimensionMismatch(format!(
            "strategy has q={}, bias has q={}",
            s.params().q(),
            p.q()
        )));
    }
    let q = p.q();
    let c = s.params().c();
    let master = rng.next_u64();
    let mut draw_rng = ChaCha8Rng::seed_from_u64(master);
    draw_rng.set_stream(0);

    let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
    for _ in 0..samples {
        let tally = sample_tally(c, p, &mut draw_rng);
        let t = s
            .tally_position(&tally)
            .expect("sampled tally is enumerated");
        let y = sample_symbol(s.dist(t), &mut draw_rng) as usize;
        *counts.entry((t, y)).or_insert(0) += 1;
    }
    let mut cells: Vec<(usize, usize, u64)> =
        counts.iter().map(|(&(x, y), &k)| (x, y, k)).collect();
    cells.sort_unstable();
    let estimate = mi_miller_madow(&cells, q, samples as u64);

    // multinomial bootstrap over the observed cells
    let cum: Vec<u64> = cells
        .iter()
        .scan(0u64, |acc, &(_, _, k)| {
            *acc += k;
            Some(*acc)
        })
        .collect();
    let nf = samples as f64;
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut resampled = vec![0u64; cells.len()];
    for b in 0..BOOTSTRAP_RESAMPLES {
        let mut boot_rng = ChaCha8Rng::seed_from_u64(master);
        boot_rng.set_stream(1 + b as u64);
        resampled.fill(0);
        for _ in 0..samples {
            let r = (boot_rng.random::<f64>() * nf) as u64;
            let idx = cum.partition_point(|&cm| cm <= r).min(cells.len() - 1);
            resampled[idx] += 1;
        }
        let boot_cells: Vec<(usize, usize, u64)> = cells
            .iter()
            .zip(&resampled)
            .map(|(&(x, y, _), &k)| (x, y, k))
            .collect();
        boot.push(mi_miller_madow(&boot_cells, q, samples as u64));
    }
    let mean = boot.iter().sum::<f64>() / boot.len() as f64;
    let var = boot.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (boot.len() as f64 - 1.0);
    Ok(MiEstimate {
        estimate,
        stderr: var.sqrt(),
        samples,
    })
}

/// Writes the code matrix format: header `q c n m`, one bias line per
/// segment, then one symbol row per user.
pub fn write_code_matrix<W: Write>(w: &mut W, code: &CodeMatrix, c: usize) -> Result<()> {
    writeln!(w, "{} {} {} {}", code.q(), c, code.users(), code.segments())?;
    for j in 0..code.segments() {
        let line: Vec<String> = code.bias(j).as_slice().iter().map(|&x| fmt_g17(x)).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    for i in 0..code.users() {
        let line: Vec<String> = code.row(i).iter().map(|s| s.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Reads the code matrix format; returns the matrix and the header's c field.
pub fn read_code_matrix<R: BufRead>(r: &mut R) -> Result<(CodeMatrix, usize)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty code matrix file".into()))??;
    let fields: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("bad header: {e}"))))
        .collect::<Result<_>>()?;
    let [q, c, n, m] = fields[..] else {
        return Err(Error::Parse(format!(
            "header must be 'q c n m', got '{header}'"
        )));
    };
    if q < 2 || n < 1 || m < 1 {
        return Err(Error::Parse("invalid header dimensions".into()));
    }
    let mut biases = Vec::with_capacity(m);
    for j in 0..m {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing bias line {j}")))??;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(format!("bad bias: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != q {
            return Err(Error::Parse(format!(
                "bias line {j} has {} entries, expected {q}",
                vals.len()
            )));
        }
        biases.push(BiasVector::new(vals)?);
    }
    let mut symbols = vec![0u8; n * m];
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("missing symbol row {i}")))??;
        let row: Vec<u8> = line
            .split_whitespace()
            .map(|t| t.parse::<u8>().map_err(|e| Error::Parse(format!("bad symbol: {e}"))))
            .collect::<Result<_>>()?;
        if row.len() != m {
            return Err(Error::Parse(format!(
                "symbol row {i} has {} entries, expected {m}",
                row.len()
            )));
        }
        for (j, &sym) in row.iter().enumerate() {
            if sym as usize >= q {
                return Err(Error::Parse(format!(
                    "symbol {sym} out of range for q={q} at ({i},{j})"
                )));
            }
            symbols[i * m + j] = sym;
        }
    }
    Ok((
        CodeMatrix {
            q,
            n,
            m,
            symbols,
            biases,
        },
        c,
    ))
}
