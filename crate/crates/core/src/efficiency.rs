//! Detector-efficiency model for coincidence data.
//!
//! With pair probabilities `P(xy|ab) = (1 + x E1^(a) + y E2^(b) + xy E^(a,b)) / 4`
//! and detection efficiencies `eta_i(x)`, the measured averages become rational
//! functions of the moments and of the relative efficiencies
//! `r_i = (eta_i(+1) - eta_i(-1)) / (eta_i(+1) + eta_i(-1))`. Three setting
//! pairs give nine equations in nine unknowns (r1, r2, two E1^, two E2^ and
//! three E^). Solving all four choices of three pairs and comparing the
//! shared unknowns tests whether any efficiency model fits the data.

use std::io;

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coincidence::CountsTable;
use crate::error::{Error, Result};

/// One of the four setting pairs. `(i, j)` indexes `(a, a')` and `(b, b')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cell {
    AB,
    ABp,
    ApB,
    ApBp,
}

impl Cell {
    pub const ALL: [Cell; 4] = [Cell::AB, Cell::ABp, Cell::ApB, Cell::ApBp];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Station-1 setting (0 = a, 1 = a').
    pub fn i(self) -> usize {
        self.index() / 2
    }

    /// Station-2 setting (0 = b, 1 = b').
    pub fn j(self) -> usize {
        self.index() % 2
    }

    pub fn label(self) -> &'static str {
        crate::stats::CELL_LABELS[self.index()]
    }
}

/// Photon transmission and detection efficiencies (all in (0, 1]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Analyzer transmission per station-1 setting (a, a').
    pub kappa1: [f64; 2],
    pub kappa2: [f64; 2],
    /// Detector efficiencies (eta(+1), eta(-1)) at station 1.
    pub eta1: [f64; 2],
    pub eta2: [f64; 2],
    /// Emitted pairs.
    pub n_pairs: f64,
}

impl Detection {
    pub fn r1(&self) -> f64 {
        relative_efficiency(self.eta1)
    }

    pub fn r2(&self) -> f64 {
        relative_efficiency(self.eta2)
    }
}

pub fn relative_efficiency([plus, minus]: [f64; 2]) -> f64 {
    (plus - minus) / (plus + minus)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffParams {
    pub r1: f64,
    pub r2: f64,
    /// E1^(a), E1^(a').
    pub ehat1: [f64; 2],
    /// E2^(b), E2^(b').
    pub ehat2: [f64; 2],
    /// E^ indexed by [`Cell`].
    pub ehat: [f64; 4],
    pub detection: Option<Detection>,
}

impl EffParams {
    /// Parameters whose r values follow from the detector efficiencies.
    pub fn with_detection(ehat1: [f64; 2], ehat2: [f64; 2], ehat: [f64; 4], detection: Detection) -> Self {
        Self { r1: detection.r1(), r2: detection.r2(), ehat1, ehat2, ehat, detection: Some(detection) }
    }

    pub fn moments(&self, cell: Cell) -> Moments {
        Moments { e1: self.ehat1[cell.i()], e2: self.ehat2[cell.j()], e: self.ehat[cell.index()] }
    }
}

/// A triple (E1, E2, E), either model moments or measured averages.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub e1: f64,
    pub e2: f64,
    pub e: f64,
}

/// Detected fraction up to constant factors: the sum over x, y of
/// `(1 + r1 x)(1 + r2 y) P(xy)`, times 4.
fn denominator(r1: f64, r2: f64, m: &Moments) -> f64 {
    1.0 + r1 * m.e1 + r2 * m.e2 + r1 * r2 * m.e
}

fn model_averages(r1: f64, r2: f64, m: &Moments) -> Option<Moments> {
    let d = denominator(r1, r2, m);
    (d > 0.0).then(|| Moments {
        e1: (r1 + m.e1 + r1 * r2 * m.e2 + r2 * m.e) / d,
        e2: (r2 + r1 * r2 * m.e1 + m.e2 + r1 * m.e) / d,
        e: (r1 * r2 + r2 * m.e1 + r1 * m.e2 + m.e) / d,
    })
}

/// Averages the coincidence data would show at `cell` under `p`.
pub fn forward_model(p: &EffParams, cell: Cell) -> Result<Moments> {
    let m = p.moments(cell);
    model_averages(p.r1, p.r2, &m).ok_or(Error::SingularModel(denominator(p.r1, p.r2, &m)))
}

/// `P(xy)` in the order ++, +-, -+, --.
pub fn pair_probabilities(m: &Moments) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (k, (x, y)) in [(1i8, 1i8), (1, -1), (-1, 1), (-1, -1)].into_iter().enumerate() {
        let (xf, yf) = (f64::from(x), f64::from(y));
        let p = (1.0 + xf * m.e1 + yf * m.e2 + xf * yf * m.e) / 4.0;
        if p < 0.0 {
            return Err(Error::InvalidMoment { x, y, p });
        }
        out[k] = p;
    }
    Ok(out)
}

/// Expected counts in the order ++, +-, -+, --.
pub fn forward_counts(p: &EffParams, cell: Cell) -> Result<[f64; 4]> {
    let det =
        p.detection.as_ref().ok_or_else(|| Error::Parameter("forward_counts needs detection efficiencies".into()))?;
    let probs = pair_probabilities(&p.moments(cell))?;
    let k = det.kappa1[cell.i()] * det.kappa2[cell.j()] * det.n_pairs;
    Ok([
        k * det.eta1[0] * det.eta2[0] * probs[0],
        k * det.eta1[0] * det.eta2[1] * probs[1],
        k * det.eta1[1] * det.eta2[0] * probs[2],
        k * det.eta1[1] * det.eta2[1] * probs[3],
    ])
}

/// Integer counts drawn from the same model: each emitted pair lands in one
/// of the four outcome classes or goes undetected.
pub fn sample_counts(p: &EffParams, cell: Cell, seed: u64) -> Result<CountsTable> {
    let det =
        p.detection.as_ref().ok_or_else(|| Error::Parameter("sample_counts needs detection efficiencies".into()))?;
    let expected = forward_counts(p, cell)?;
    let n = det.n_pairs.round() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // sequential conditional binomials give the multinomial
    let mut remaining_n = n;
    let mut remaining_p = 1.0;
    let mut out = [0u64; 4];
    for (k, &mu) in expected.iter().enumerate() {
        let pk = mu / det.n_pairs;
        let q = if remaining_p > 0.0 { (pk / remaining_p).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(remaining_n, q).map_err(|e| Error::Parameter(e.to_string()))?.sample(&mut rng);
        out[k] = draw;
        remaining_n -= draw;
        remaining_p -= pk;
    }
    Ok(CountsTable::new(out[0], out[1], out[2], out[3]))
}

/// Measured averages at one setting pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub cell: Cell,
    pub averages: Moments,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_restarts: usize,
    pub jacobian_step: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: 200, max_restarts: 20, jacobian_step: 1e-7, seed: 0 }
    }
}

/// The nine unknowns of one exclusion variant. `ehat` holds `None` for the
/// excluded cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unknowns {
    pub r1: f64,
    pub r2: f64,
    pub ehat1: [f64; 2],
    pub ehat2: [f64; 2],
    pub ehat: [Option<f64>; 4],
}

impl Unknowns {
    /// r1, r2, E1^(a), E1^(a'), E2^(b), E2^(b'): present in every variant.
    pub fn shared(&self) -> [f64; 6] {
        [self.r1, self.r2, self.ehat1[0], self.ehat1[1], self.ehat2[0], self.ehat2[1]]
    }

    /// Model parameters; the excluded pair's E^ is NaN.
    pub fn params(&self) -> EffParams {
        EffParams {
            r1: self.r1,
            r2: self.r2,
            ehat1: self.ehat1,
            ehat2: self.ehat2,
            ehat: self.ehat.map(|e| e.unwrap_or(f64::NAN)),
            detection: None,
        }
    }
}

pub const CANONICALIZATION_RULE: &str = "branch check: the larger-magnitude of r1 and E1^(a) must have the sign \
     of the measured E1 at setting a that seeds E1^(a); no sign flip is applied because the flip \
     (r1,r2,E1^,E2^) -> -(r1,r2,E1^,E2^) negates the predicted E1 and E2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffSolution {
    pub unknowns: Unknowns,
    pub excluded: Cell,
    /// Max absolute equation residual at the returned iterate.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub restarts: usize,
    /// Steps where the Jacobian could not be factored and a regularized step was used.
    pub singular_steps: usize,
    pub branch_matches_initial_guess: bool,
    pub canonicalization: String,
    /// Other exact solutions of the same nine equations (see [`exact_solutions`]).
    pub alternatives: Vec<Unknowns>,
    /// The measured data leave r1 or r2 undetermined.
    pub underdetermined: bool,
}

impl EffSolution {
    pub fn params(&self) -> EffParams {
        self.unknowns.params()
    }
}

type Vec9 = SVector<f64, 9>;
type Mat9 = SMatrix<f64, 9, 9>;

struct System {
    cells: [Cell; 3],
    measured: [Moments; 3],
}

impl System {
    // x = [r1, r2, E1^(a), E1^(a'), E2^(b), E2^(b'), E^(cells[0..3])]
    fn moments(&self, x: &Vec9, k: usize) -> Moments {
        let c = self.cells[k];
        Moments { e1: x[2 + c.i()], e2: x[4 + c.j()], e: x[6 + k] }
    }

    fn feasible(&self, x: &Vec9) -> bool {
        x.iter().all(|v| v.abs() <= 1.0) && (0..3).all(|k| denominator(x[0], x[1], &self.moments(x, k)) > 0.0)
    }

    fn residual(&self, x: &Vec9) -> Option<Vec9> {
        let mut f = Vec9::zeros();
        for k in 0..3 {
            let m = model_averages(x[0], x[1], &self.moments(x, k))?;
            let t = &self.measured[k];
            f[3 * k] = m.e1 - t.e1;
            f[3 * k + 1] = m.e2 - t.e2;
            f[3 * k + 2] = m.e - t.e;
        }
        Some(f)
    }

    fn jacobian(&self, x: &Vec9, h: f64) -> Option<Mat9> {
        let mut j = Mat9::zeros();
        for c in 0..9 {
            let (mut up, mut dn) = (*x, *x);
            up[c] += h;
            dn[c] -= h;
            let d = (self.residual(&up)? - self.residual(&dn)?) / (2.0 * h);
            j.set_column(c, &d);
        }
        Some(j)
    }

    fn initial_guess(&self) -> Vec9 {
        let mut x = Vec9::zeros();
        let mut n1 = [0.0; 2];
        let mut n2 = [0.0; 2];
        for (k, (c, m)) in self.cells.iter().zip(&self.measured).enumerate() {
            x[2 + c.i()] += m.e1;
            n1[c.i()] += 1.0;
            x[4 + c.j()] += m.e2;
            n2[c.j()] += 1.0;
            x[6 + k] = m.e;
        }
        for s in 0..2 {
            x[2 + s] /= n1[s];
            x[4 + s] /= n2[s];
        }
        x
    }
}

fn max_abs(v: &Vec9) -> f64 {
    v.amax()
}

struct Attempt {
    x: Vec9,
    residual: f64,
    iterations: usize,
    singular_steps: usize,
}

fn newton(sys: &System, mut x: Vec9, opts: &SolverOptions) -> Attempt {
    let mut singular_steps = 0;
    let mut f = match sys.residual(&x) {
        Some(f) => f,
        None => return Attempt { x, residual: f64::INFINITY, iterations: 0, singular_steps },
    };
    for it in 0..opts.max_iterations {
        if max_abs(&f) < opts.tolerance {
            return Attempt { x, residual: max_abs(&f), iterations: it, singular_steps };
        }
        let Some(j) = sys.jacobian(&x, opts.jacobian_step) else { break };
        let step = match j.lu().solve(&(-f)) {
            Some(dx) if dx.iter().all(|v| v.is_finite()) => dx,
            _ => {
                // Levenberg-Marquardt step on the normal equations
                singular_steps += 1;
                let jt = j.transpose();
                let mu = 1e-8 * (jt * j).trace().max(1e-12);
                match (jt * j + Mat9::identity() * mu).lu().solve(&(-(jt * f))) {
                    Some(dx) => dx,
                    None => break,
                }
            }
        };
        let norm = f.norm();
        let mut lambda = 1.0;
        let mut accepted = None;
        while lambda > 1e-12 {
            let trial = x + step * lambda;
            if sys.feasible(&trial) {
                if let Some(ft) = sys.residual(&trial) {
                    if ft.norm() < norm {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((xn, fn_)) => {
                x = xn;
                f = fn_;
            }
            None => return Attempt { x, residual: max_abs(&f), iterations: it + 1, singular_steps },
        }
    }
    Attempt { x, residual: max_abs(&f), iterations: opts.max_iterations, singular_steps }
}

/// Detected outcome distribution implied by measured averages, indexed
/// `[x == -1][y == -1]`.
fn detected_distribution(m: &Moments) -> [[f64; 2]; 2] {
    let q = |x: f64, y: f64| (1.0 + x * m.e1 + y * m.e2 + x * y * m.e) / 4.0;
    [[q(1.0, 1.0), q(1.0, -1.0)], [q(-1.0, 1.0), q(-1.0, -1.0)]]
}

/// Roots in (-1, 1) of the condition that two cells sharing one station's
/// setting imply the same single-particle moment there. `q1`, `q2` are
/// indexed `[shared-station outcome][other-station outcome]`; the unknown is
/// the other station's relative efficiency. `None` when the condition holds
/// for every value.
fn efficiency_roots(q1: [[f64; 2]; 2], q2: [[f64; 2]; 2]) -> Option<Vec<f64>> {
    // F(s; r) = q[s][+](1 - r) + q[s][-](1 + r) = A + B r
    let lin = |q: [[f64; 2]; 2], s: usize| (q[s][0] + q[s][1], q[s][1] - q[s][0]);
    let ((a1p, b1p), (a1m, b1m)) = (lin(q1, 0), lin(q1, 1));
    let ((a2p, b2p), (a2m, b2m)) = (lin(q2, 0), lin(q2, 1));
    // F1(+) F2(-) - F2(+) F1(-) = c0 + c1 r + c2 r^2
    let c0 = a1p * a2m - a2p * a1m;
    let c1 = a1p * b2m + b1p * a2m - a2p * b1m - b2p * a1m;
    let c2 = b1p * b2m - b2p * b1m;
    const EPS: f64 = 1e-12;
    if c0.abs() < EPS && c1.abs() < EPS && c2.abs() < EPS {
        return None;
    }
    let mut roots = Vec::new();
    if c2.abs() < EPS {
        if c1.abs() >= EPS {
            roots.push(-c0 / c1);
        }
    } else {
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc >= 0.0 {
            // numerically stable pair
            let q = -0.5 * (c1 + c1.signum() * disc.sqrt());
            if q != 0.0 {
                roots.push(q / c2);
                roots.push(c0 / q);
            } else {
                roots.push(0.0);
            }
        }
    }
    roots.retain(|r| r.is_finite() && r.abs() < 1.0);
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    Some(roots)
}

/// Moments implied by measured averages once r1, r2 are fixed:
/// `P(xy)` is proportional to `Q(xy) / ((1 + r1 x)(1 + r2 y))`.
fn moments_given_r(r1: f64, r2: f64, m: &Moments) -> Moments {
    let q = detected_distribution(m);
    let mut p = [[0.0; 2]; 2];
    let sign = |k: usize| if k == 0 { 1.0 } else { -1.0 };
    for (sx, row) in p.iter_mut().enumerate() {
        for (sy, v) in row.iter_mut().enumerate() {
            *v = q[sx][sy] / ((1.0 + r1 * sign(sx)) * (1.0 + r2 * sign(sy)));
        }
    }
    let n: f64 = p.iter().flatten().sum();
    let mean = |f: &dyn Fn(f64, f64) -> f64| {
        (0..2)
            .flat_map(|sx| (0..2).map(move |sy| (sx, sy)))
            .map(|(sx, sy)| f(sign(sx), sign(sy)) * p[sx][sy])
            .sum::<f64>()
            / n
    };
    Moments { e1: mean(&|x, _| x), e2: mean(&|_, y| y), e: mean(&|x, y| x * y) }
}

/// Every exact solution of the nine equations with |r1|, |r2| < 1, found in
/// closed form. The equation pairing the two cells that share a station-1
/// setting involves r2 alone and is quadratic in it; likewise for r1. So a
/// variant has up to four exact solutions, all reproducing the data equally
/// well. `None` when the data leave r1 or r2 undetermined.
pub fn exact_solutions(measured: &[Measured; 3]) -> Option<Vec<Unknowns>> {
    let mut sorted = *measured;
    sorted.sort_by_key(|m| m.cell);
    let q: Vec<[[f64; 2]; 2]> = sorted.iter().map(|m| detected_distribution(&m.averages)).collect();
    let transpose = |m: [[f64; 2]; 2]| [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];

    let mut r1_roots = None;
    let mut r2_roots = None;
    for u in 0..3 {
        for v in u + 1..3 {
            let (cu, cv) = (sorted[u].cell, sorted[v].cell);
            if cu.i() == cv.i() {
                r2_roots = Some(efficiency_roots(q[u], q[v])?);
            } else if cu.j() == cv.j() {
                r1_roots = Some(efficiency_roots(transpose(q[u]), transpose(q[v]))?);
            }
        }
    }
    let (r1_roots, r2_roots) = (r1_roots?, r2_roots?);

    let mut out = Vec::new();
    for &r1 in &r1_roots {
        for &r2 in &r2_roots {
            let mut ehat1 = [f64::NAN; 2];
            let mut ehat2 = [f64::NAN; 2];
            let mut ehat = [None; 4];
            for m in &sorted {
                let mom = moments_given_r(r1, r2, &m.averages);
                ehat1[m.cell.i()] = mom.e1;
                ehat2[m.cell.j()] = mom.e2;
                ehat[m.cell.index()] = Some(mom.e);
            }
            let u = Unknowns { r1, r2, ehat1, ehat2, ehat };
            let in_range = u.shared().iter().chain(u.ehat.iter().flatten()).all(|v| v.abs() <= 1.0);
            if in_range {
                out.push(u);
            }
        }
    }
    Some(out)
}

fn distance(a: &Unknowns, b: &Unknowns) -> f64 {
    let ea = a.ehat.iter().flatten();
    let eb = b.ehat.iter().flatten();
    a.shared()
        .iter()
        .zip(b.shared())
        .map(|(x, y)| (x - y).abs())
        .chain(ea.zip(eb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Solves the nine equations from three setting pairs (every cell except
/// `excluded`) by damped Newton iteration from r1 = r2 = 0 and moments equal
/// to the measured averages, restarting from seeded perturbations if needed.
pub fn solve_triple(measured: &[Measured; 3], excluded: Cell, opts: &SolverOptions) -> Result<EffSolution> {
    let mut sorted = *measured;
    sorted.sort_by_key(|m| m.cell);
    let cells = sorted.map(|m| m.cell);
    let expected: Vec<Cell> = Cell::ALL.into_iter().filter(|&c| c != excluded).collect();
    if cells[..] != expected[..] {
        return Err(Error::Parameter(format!(
            "measured cells {:?} are not the three cells other than {:?}",
            cells, excluded
        )));
    }
    let sys = System { cells, measured: sorted.map(|m| m.averages) };
    let x0 = sys.initial_guess();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best = newton(&sys, x0, opts);
    let mut total_iterations = best.iterations;
    let mut total_singular = best.singular_steps;
    let mut restarts = 0;
    while best.residual >= opts.tolerance && restarts < opts.max_restarts {
        restarts += 1;
        let start = x0.map(|v| (v + rng.random_range(-0.5..=0.5)).clamp(-0.999, 0.999));
        let attempt = newton(&sys, start, opts);
        total_iterations += attempt.iterations;
        total_singular += attempt.singular_steps;
        if attempt.residual < best.residual {
            best = attempt;
        }
    }

    let x = best.x;
    let mut ehat = [None; 4];
    for (k, c) in cells.iter().enumerate() {
        ehat[c.index()] = Some(x[6 + k]);
    }
    let unknowns = Unknowns { r1: x[0], r2: x[1], ehat1: [x[2], x[3]], ehat2: [x[4], x[5]], ehat };
    let lead = if x[0].abs() > x[2].abs() { x[0] } else { x[2] };
    let exact = exact_solutions(&sorted);
    let alternatives =
        exact.as_deref().unwrap_or_default().iter().filter(|u| distance(u, &unknowns) > 1e-6).copied().collect();
    Ok(EffSolution {
        alternatives,
        underdetermined: exact.is_none(),
        unknowns,
        excluded,
        residual: best.residual,
        converged: best.residual < opts.tolerance,
        iterations: total_iterations,
        restarts,
        singular_steps: total_singular,
        branch_matches_initial_guess: lead == 0.0 || x0[2] == 0.0 || lead.signum() == x0[2].signum(),
        canonicalization: CANONICALIZATION_RULE.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyTable {
    /// Indexed by the excluded [`Cell`].
    pub solutions: Vec<EffSolution>,
    /// Largest spread of a shared unknown across converged solutions.
    pub discrepancy: f64,
    /// Spread of r1, r2, E1^(a), E1^(a'), E2^(b), E2^(b').
    pub spreads: [f64; 6],
    /// Smallest discrepancy over all choices of one exact solution per
    /// variant (Newton result or alternative); `None` if a variant is
    /// underdetermined.
    pub min_discrepancy: Option<f64>,
}

pub const TABLE_HEADER: [&str; 10] = ["r1", "r2", "E1_a", "E1_ap", "E2_b", "E2_bp", "E_ab", "E_abp", "E_apb", "E_apbp"];

impl ConsistencyTable {
    pub fn converged(&self) -> usize {
        self.solutions.iter().filter(|s| s.converged).count()
    }

    /// One row per exclusion, `--` in the excluded cell's column.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        w.write_record(TABLE_HEADER)?;
        for s in &self.solutions {
            let mut rec: Vec<String> = s.unknowns.shared().iter().map(f64::to_string).collect();
            rec.extend(s.unknowns.ehat.iter().map(|e| e.map_or_else(|| "--".to_string(), |v| v.to_string())));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves all four exclusion variants and measures how far their shared
/// unknowns disagree.
pub fn consistency_table(measured: &[Measured; 4], opts: &SolverOptions) -> Result<ConsistencyTable> {
    let mut by_cell = *measured;
    by_cell.sort_by_key(|m| m.cell);
    if by_cell.map(|m| m.cell) != Cell::ALL {
        return Err(Error::Parameter("consistency analysis needs one record per setting pair".into()));
    }
    let solutions = Cell::ALL
        .into_par_iter()
        .map(|excluded| {
            let three: Vec<Measured> = by_cell.iter().copied().filter(|m| m.cell != excluded).collect();
            solve_triple(&[three[0], three[1], three[2]], excluded, opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let converged: Vec<&EffSolution> = solutions.iter().filter(|s| s.converged).collect();
    if converged.len() < 2 {
        return Err(Error::InsufficientSolutions(converged.len()));
    }
    let mut spreads = [0.0; 6];
    for (k, spread) in spreads.iter_mut().enumerate() {
        let vals = converged.iter().map(|s| s.unknowns.shared()[k]);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        *spread = hi - lo;
    }
    let min_discrepancy = best_case_discrepancy(&solutions);
    Ok(ConsistencyTable {
        discrepancy: spreads.iter().copied().fold(0.0, f64::max),
        spreads,
        solutions,
        min_discrepancy,
    })
}

fn spread(choice: &[&Unknowns]) -> f64 {
    (0..6)
        .map(|k| {
            let vals = choice.iter().map(|u| u.shared()[k]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

fn best_case_discrepancy(solutions: &[EffSolution]) -> Option<f64> {
    if solutions.iter().any(|s| s.underdetermined) {
        return None;
    }
    let options: Vec<Vec<&Unknowns>> = solutions
        .iter()
        .map(|s| {
            let mut v: Vec<&Unknowns> = s.alternatives.iter().collect();
            if s.converged {
                v.push(&s.unknowns);
            }
            v
        })
        .filter(|v| !v.is_empty())
        .collect();
    if options.len() < 2 {
        return None;
    }
    let mut best = f64::INFINITY;
    let mut idx = vec![0; options.len()];
    loop {
        let choice: Vec<&Unknowns> = idx.iter().zip(&options).map(|(&i, o)| o[i]).collect();
        best = best.min(spread(&choice));
        let mut k = 0;
        loop {
            if k == idx.len() {
                return Some(best);
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Measured averages for all four cells of a parameter set.
pub fn measured_from_params(p: &EffParams) -> Result<[Measured; 4]> {
    let mut out = Vec::with_capacity(4);
    for cell in Cell::ALL {
        out.push(Measured { cell, averages: forward_model(p, cell)? });
    }
    Ok([out[0], out[1], out[2], out[3]])
}
