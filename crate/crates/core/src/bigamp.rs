//! Bilinear generalized approximate message passing for `Y = HX + W`.
//!
//! `H` (`M x N`) has i.i.d. `CN(0, beta)` entries and `X` (`N x T`) has a
//! discrete prior over `{0} ∪ X` per entry. The noise `W` is AWGN with known
//! variance. The engine keeps Gaussian pseudo-observations for every entry
//! of both factors and merges them with the priors each iteration.
//!
//! Update schedule, with `|.|^2` taken elementwise and `·` a matrix product:
//!
//! ```text
//! vpbar = |H|^2 · vx + vh · |X|^2        pbar = H · X
//! vp    = vpbar + vh · vx                phat = pbar - s .* vpbar
//! vs    = 1 / (vp + sigma2)              s    = (Y - phat) .* vs
//! vr    = 1 / (|Hb|^2' · vs)             r    = Xb .* (1 - vr .* (vh' · vs)) + vr .* (Hb^H · s)
//! vq    = 1 / (vs · |Xb|^2')             q    = Hb .* (1 - vq .* (vs · vx')) + vq .* (s · Xb^H)
//! (X, vx) = merge_x(r, vr)               (H, vh) = merge_h(q, vq)
//! ```
//!
//! `vpbar`, `vp`, `s`, `vs` and the "bar" copies `Xb`, `Hb` are damped with
//! the current step. The step adapts on the surrogate cost
//! `sum |Y - H X|^2 + sum vp` of the current means, or on a free-energy
//! style cost when [`Cost::FreeEnergy`] is selected. A candidate is accepted
//! when its cost does not exceed the largest of the last `window` accepted
//! costs, and the step then grows. Otherwise the state rolls back to the last
//! accepted iterate and the step shrinks. A candidate that fails at the
//! minimum step is accepted anyway; that counts as one damping restart, and
//! the run stops unconverged after `outer_attempts` of them.

use std::io::Write;

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;

use crate::airsim::complex_gaussian;
use crate::codec::Constellation;
use crate::error::{Error, Result};
use crate::{seed, CMatrix, C64};

/// Floor applied to every variance the engine carries.
pub const VAR_FLOOR: f64 = 1e-12;
/// Cap applied to every inverse-variance sum.
pub const VAR_CAP: f64 = 1e12;

/// Prior on one entry of `X`. `point_masses[k]` is the mass of alphabet point `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryPriorX {
    pub zero_mass: f64,
    pub point_masses: Vec<f64>,
}

impl EntryPriorX {
    pub fn new(zero_mass: f64, point_masses: Vec<f64>) -> Result<Self> {
        let all_ok = std::iter::once(zero_mass).chain(point_masses.iter().copied()).all(|p| (0.0..=1.0).contains(&p));
        let total = zero_mass + point_masses.iter().sum::<f64>();
        if !all_ok || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("prior masses must lie in [0,1] and sum to 1 (sum {total})")));
        }
        Ok(Self { zero_mass, point_masses })
    }

    /// `(1 - gamma) delta_0 + gamma / K` on each of `K` points.
    pub fn sparse(gamma: f64, alphabet_size: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) || alphabet_size == 0 {
            return Err(Error::Domain(format!("sparsity {gamma} / alphabet size {alphabet_size}")));
        }
        Ok(Self { zero_mass: 1.0 - gamma, point_masses: vec![gamma / alphabet_size as f64; alphabet_size] })
    }

    pub fn nonzero_mass(&self) -> f64 {
        self.point_masses.iter().sum()
    }

    /// Log masses with the zero atom first.
    pub fn log_masses(&self) -> Vec<f64> {
        std::iter::once(self.zero_mass).chain(self.point_masses.iter().copied()).map(f64::ln).collect()
    }

    /// Prior mean and variance.
    pub fn moments(&self, alphabet: &Constellation) -> (C64, f64) {
        let mean: C64 = alphabet.points().iter().zip(&self.point_masses).map(|(a, p)| a * *p).sum();
        let second: f64 = alphabet.points().iter().zip(&self.point_masses).map(|(a, p)| a.norm_sqr() * p).sum();
        (mean, (second - mean.norm_sqr()).max(0.0))
    }
}

/// Prior on one entry of `H`: zero-mean circular Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryPriorH {
    pub variance: f64,
}

impl EntryPriorH {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::Domain(format!("channel prior variance {variance} must be positive")));
        }
        Ok(Self { variance })
    }
}

/// Priors for all entries of `X`, stored as log masses (zero atom first).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorX {
    rows: usize,
    cols: usize,
    atoms: Vec<C64>,
    shared: Option<Vec<f64>>,
    entries: Vec<f64>,
}

fn atoms_of(alphabet: &Constellation) -> Vec<C64> {
    std::iter::once(C64::new(0.0, 0.0)).chain(alphabet.points().iter().copied()).collect()
}

impl PriorX {
    /// Same prior on every entry.
    pub fn shared(prior: &EntryPriorX, alphabet: &Constellation, rows: usize, cols: usize) -> Result<Self> {
        check_prior(prior, alphabet)?;
        Ok(Self { rows, cols, atoms: atoms_of(alphabet), shared: Some(prior.log_masses()), entries: Vec::new() })
    }

    /// Entry-specific priors.
    pub fn from_fn(
        alphabet: &Constellation,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> EntryPriorX,
    ) -> Result<Self> {
        let k1 = alphabet.len() + 1;
        let mut entries = Vec::with_capacity(rows * cols * k1);
        for n in 0..rows {
            for t in 0..cols {
                let p = f(n, t);
                check_prior(&p, alphabet)?;
                entries.extend(p.log_masses());
            }
        }
        Ok(Self { rows, cols, atoms: atoms_of(alphabet), shared: None, entries })
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Atoms in mass order: zero, then the alphabet.
    pub fn atoms(&self) -> &[C64] {
        &self.atoms
    }

    pub fn log_masses(&self, n: usize, t: usize) -> &[f64] {
        match &self.shared {
            Some(s) => s,
            None => {
                let k1 = self.atoms.len();
                let at = (n * self.cols + t) * k1;
                &self.entries[at..at + k1]
            }
        }
    }

    pub fn entry(&self, n: usize, t: usize) -> EntryPriorX {
        let m = self.log_masses(n, t);
        EntryPriorX { zero_mass: m[0].exp(), point_masses: m[1..].iter().map(|l| l.exp()).collect() }
    }
}

fn check_prior(prior: &EntryPriorX, alphabet: &Constellation) -> Result<()> {
    if prior.point_masses.len() != alphabet.len() {
        return Err(Error::Dimension(format!(
            "prior has {} point masses, alphabet has {} points",
            prior.point_masses.len(),
            alphabet.len()
        )));
    }
    let total = prior.zero_mass + prior.nonzero_mass();
    if (total - 1.0).abs() > 1e-9 || prior.zero_mass < 0.0 || prior.point_masses.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain(format!("prior masses sum to {total}")));
    }
    Ok(())
}

/// Posterior of one `X` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct XMerge {
    pub mean: C64,
    pub var: f64,
    /// Normalized masses, zero atom first.
    pub masses: Vec<f64>,
}

/// Merges the pseudo-observation `r_hat ~ CN(x, nu_r)` with a discrete prior.
pub fn merge_x(r_hat: C64, nu_r: f64, prior: &EntryPriorX, alphabet: &Constellation) -> Result<XMerge> {
    if !(nu_r > 0.0) {
        return Err(Error::Domain(format!("pseudo-observation variance {nu_r} must be positive")));
    }
    check_prior(prior, alphabet)?;
    let atoms = atoms_of(alphabet);
    let mut masses = vec![0.0; atoms.len()];
    let (mean, var) = merge_log_prior(r_hat, nu_r, &atoms, &prior.log_masses(), &mut masses);
    Ok(XMerge { mean, var, masses })
}

/// Log-domain core of [`merge_x`]. Writes masses and returns `(mean, var)`.
fn merge_log_prior(r: C64, nu_r: f64, atoms: &[C64], log_prior: &[f64], out: &mut [f64]) -> (C64, f64) {
    let inv = if nu_r.is_infinite() { 0.0 } else { 1.0 / nu_r };
    let mut best = f64::NEG_INFINITY;
    for ((o, a), lp) in out.iter_mut().zip(atoms).zip(log_prior) {
        *o = if *lp == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lp - (a - r).norm_sqr() * inv };
        if *o > best {
            best = *o;
        }
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - best).exp();
        total += *o;
    }
    let mut mean = C64::new(0.0, 0.0);
    let mut second = 0.0;
    for (o, a) in out.iter_mut().zip(atoms) {
        *o /= total;
        mean += a * *o;
        second += a.norm_sqr() * *o;
    }
    (mean, (second - mean.norm_sqr()).max(0.0))
}

/// Conjugate Gaussian merge of `q_hat ~ CN(h, nu_q)` with `h ~ CN(0, beta)`.
pub fn merge_h(q_hat: C64, nu_q: f64, prior: &EntryPriorH) -> (C64, f64) {
    if nu_q.is_infinite() {
        return (C64::new(0.0, 0.0), prior.variance);
    }
    let var = 1.0 / (1.0 / prior.variance + 1.0 / nu_q);
    (q_hat * (var / nu_q), var)
}

/// Approximate marginal posteriors of every entry of `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct XPosterior {
    /// Zero atom first, then the alphabet.
    pub atoms: Vec<C64>,
    /// `N x T x (K + 1)` masses.
    pub masses: Array3<f64>,
    pub mean: CMatrix,
    pub var: Array2<f64>,
}

impl XPosterior {
    pub fn rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn cols(&self) -> usize {
        self.mean.ncols()
    }

    pub fn zero_mass(&self, n: usize, t: usize) -> f64 {
        self.masses[[n, t, 0]]
    }

    /// Posterior probability that entry `(n, t)` is non-zero.
    pub fn nonzero_mass(&self, n: usize, t: usize) -> f64 {
        1.0 - self.masses[[n, t, 0]]
    }

    /// Largest `|sum of masses - 1|` over all entries.
    pub fn max_normalization_error(&self) -> f64 {
        let k1 = self.atoms.len();
        self.masses
            .as_slice()
            .map(|s| s.chunks(k1).map(|c| (c.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max))
            .unwrap_or_else(|| {
                self.masses
                    .lanes(ndarray::Axis(2))
                    .into_iter()
                    .map(|l| (l.sum() - 1.0).abs())
                    .fold(0.0, f64::max)
            })
    }
}

/// Adaptive damping schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Damping {
    pub initial: f64,
    pub min: f64,
    pub shrink: f64,
    pub growth: f64,
    /// Ceiling for the step after growth.
    pub max: f64,
    /// Number of recent accepted costs a candidate is compared against.
    pub window: usize,
}

impl Default for Damping {
    fn default() -> Self {
        Self { initial: 0.3, min: 0.05, shrink: 0.5, growth: 1.1, max: 1.0, window: 8 }
    }
}

/// Objective the adaptive step is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cost {
    /// `sum |Y - H X|^2 + sum vp`.
    Residual,
    /// KL divergence of every marginal from its prior plus the expected
    /// negative log-likelihood `sum (|Y - H X|^2 + vp) / sigma2`.
    FreeEnergy,
}

/// How each run is started.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// `H ~ CN(0, beta)`, `X` drawn from its prior.
    Random,
    /// Fixed starting means; variances start at the prior variances.
    Given { h: CMatrix, x: CMatrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigAmpOptions {
    /// Iteration cap per run.
    pub max_iters: usize,
    /// Damping restarts tolerated per run.
    pub outer_attempts: usize,
    /// Relative Frobenius change of the `X` mean that counts as converged.
    pub tol: f64,
    pub damping: Damping,
    pub cost: Cost,
    /// Independent random initializations.
    pub restarts: usize,
    pub seed: u64,
    /// A cost above `divergence_bound * (|Y|^2 + M T sigma2)` stops the run.
    pub divergence_bound: f64,
    /// Record a per-iteration trace.
    pub trace: bool,
}

impl Default for BigAmpOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            outer_attempts: 10,
            tol: 1e-4,
            damping: Damping::default(),
            cost: Cost::Residual,
            restarts: 25,
            seed: 0,
            divergence_bound: 1e6,
            trace: false,
        }
    }
}

impl BigAmpOptions {
    pub fn validate(&self) -> Result<()> {
        let d = &self.damping;
        if !(0.0 < d.min && d.min <= d.initial && d.initial <= d.max && d.max <= 1.0) {
            return Err(Error::Config(format!("damping steps need 0 < min <= initial <= max <= 1, got {d:?}")));
        }
        if !(0.0 < d.shrink && d.shrink < 1.0) || !(d.growth >= 1.0) || d.window == 0 {
            return Err(Error::Config(format!("damping needs 0 < shrink < 1 <= growth and window >= 1, got {d:?}")));
        }
        if self.max_iters == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iters and restarts must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the optional iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// Surrogate cost of the iterate evaluated at this step.
    pub cost: f64,
    pub step: f64,
    pub accepted: bool,
    /// Largest `|sum of masses - 1|` after the merge.
    pub normalization_error: f64,
    pub nonfinite: bool,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: &mut W) -> Result<()> {
    writeln!(out, "iteration,cost,step,accepted,normalization_error,nonfinite")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{},{},{:e},{}",
            r.iteration, r.cost, r.step, r.accepted as u8, r.normalization_error, r.nonfinite as u8
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigAmpResult {
    pub x: XPosterior,
    pub h_mean: CMatrix,
    pub h_var: Array2<f64>,
    /// `|Y - H X|_F` at the posterior means.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub damping_restarts: usize,
    /// Largest mass-normalization error seen over the whole run.
    pub max_normalization_error: f64,
    /// Set if a non-finite value ever appeared; the state is then rolled back.
    pub saw_nonfinite: bool,
    pub trace: Vec<TraceRow>,
    /// Restart index that produced this result.
    pub restart: usize,
}

#[derive(Debug, Clone)]
struct State {
    xh: CMatrix,
    vx: Array2<f64>,
    masses: Array3<f64>,
    hh: CMatrix,
    vh: Array2<f64>,
    s: CMatrix,
    vs: Array2<f64>,
    vpbar: Array2<f64>,
    vp: Array2<f64>,
    xbar: CMatrix,
    hbar: CMatrix,
}

#[derive(Debug, Clone)]
struct Plugin {
    pbar: CMatrix,
    vpbar: Array2<f64>,
    vp: Array2<f64>,
    /// `sum |Y - H X|^2 + sum vp`, also used for the divergence check.
    residual: f64,
    cost: f64,
}

/// Why [`Engine::iterate`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Converged,
    IterationBudget,
    DampingExhausted,
    Diverged,
}

/// A resumable BiG-AMP (or GAMP, with `H` fixed) run.
pub struct Engine {
    y: CMatrix,
    sigma2: f64,
    prior_x: PriorX,
    prior_h: EntryPriorH,
    fixed_h: bool,
    opts: BigAmpOptions,
    st: State,
    accepted: Option<(State, Plugin)>,
    step: f64,
    started: bool,
    iterations: usize,
    restarts_used: usize,
    converged: bool,
    diverged: bool,
    exhausted: bool,
    saw_nonfinite: bool,
    max_norm_err: f64,
    trace: Vec<TraceRow>,
    cost_bound: f64,
    recent: Vec<f64>,
}

fn abs2(m: &CMatrix) -> Array2<f64> {
    m.mapv(|z| z.norm_sqr())
}

fn herm(m: &CMatrix) -> CMatrix {
    m.t().mapv(|z| z.conj())
}

fn frob2(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

fn sample_prior<R: Rng + ?Sized>(prior: &PriorX, rng: &mut R) -> CMatrix {
    let (n, t) = prior.dim();
    Array2::from_shape_fn((n, t), |(i, j)| {
        let lm = prior.log_masses(i, j);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, l) in lm.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return prior.atoms[k];
            }
        }
        prior.atoms[lm.iter().rposition(|l| l.is_finite()).unwrap_or(0)]
    })
}

fn prior_moments(prior: &PriorX) -> (CMatrix, Array2<f64>) {
    let (n, t) = prior.dim();
    let mut mean = Array2::zeros((n, t));
    let mut var = Array2::zeros((n, t));
    for i in 0..n {
        for j in 0..t {
            let lm = prior.log_masses(i, j);
            let mut m = C64::new(0.0, 0.0);
            let mut s = 0.0;
            for (a, l) in prior.atoms.iter().zip(lm) {
                let p = l.exp();
                m += a * p;
                s += a.norm_sqr() * p;
            }
            mean[[i, j]] = m;
            var[[i, j]] = (s - m.norm_sqr()).max(0.0);
        }
    }
    (mean, var)
}

impl Engine {
    /// Blind engine: both factors are estimated.
    pub fn new<R: Rng + ?Sized>(
        y: CMatrix,
        prior_x: PriorX,
        prior_h: EntryPriorH,
        sigma2: f64,
        opts: BigAmpOptions,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, t) = prior_x.dim();
        let m = y.nrows();
        if y.ncols() != t {
            return Err(Error::Dimension(format!("Y has {} columns, prior has {t}", y.ncols())));
        }
        let (hh, xh) = match init {
            Init::Random => {
                let sd = prior_h.variance;
                let hh = Array2::from_shape_fn((m, n), |_| complex_gaussian(rng, sd));
                (hh, sample_prior(&prior_x, rng))
            }
            Init::Given { h, x } => {
                if h.dim() != (m, n) || x.dim() != (n, t) {
                    return Err(Error::Dimension("initial factors have the wrong shape".into()));
                }
                (h, x)
            }
        };
        let vh = Array2::from_elem((m, n), prior_h.variance);
        Self::build(y, prior_x, prior_h, sigma2, opts, hh, vh, xh, false)
    }

    /// GAMP with a known channel matrix.
    pub fn with_known_channel(
        y: CMatrix,
        h: CMatrix,
        prior_x: PriorX,
        sigma2: f64,
        opts: BigAmpOptions,
    ) -> Result<Self> {
        let (n, _) = prior_x.dim();
        if h.dim() != (y.nrows(), n) {
            return Err(Error::Dimension(format!("H is {:?}, expected ({}, {n})", h.dim(), y.nrows())));
        }
        let (xh, _) = prior_moments(&prior_x);
        let vh = Array2::zeros(h.dim());
        let prior_h = EntryPriorH { variance: 1.0 };
        Self::build(y, prior_x, prior_h, sigma2, opts, h, vh, xh, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        y: CMatrix,
        prior_x: PriorX,
        prior_h: EntryPriorH,
        sigma2: f64,
        opts: BigAmpOptions,
        hh: CMatrix,
        vh: Array2<f64>,
        xh: CMatrix,
        fixed_h: bool,
    ) -> Result<Self> {
        opts.validate()?;
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Domain(format!("noise variance {sigma2} must be positive")));
        }
        if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Input("observation contains non-finite values".into()));
        }
        let (n, t) = prior_x.dim();
        if n == 0 {
            return Err(Error::Domain("need at least one row".into()));
        }
        let m = y.nrows();
        let (_, vx) = prior_moments(&prior_x);
        let vx = vx.mapv(|v| v.max(VAR_FLOOR));
        let k1 = prior_x.atoms.len();
        let mut masses = Array3::zeros((n, t, k1));
        for i in 0..n {
            for j in 0..t {
                for (k, l) in prior_x.log_masses(i, j).iter().enumerate() {
                    masses[[i, j, k]] = l.exp();
                }
            }
        }
        let cost_bound = opts.divergence_bound * (frob2(&y) + (m * t) as f64 * sigma2);
        let st = State {
            xbar: xh.clone(),
            hbar: hh.clone(),
            xh,
            vx,
            masses,
            hh,
            vh,
            s: Array2::zeros((m, t)),
            vs: Array2::zeros((m, t)),
            vpbar: Array2::zeros((m, t)),
            vp: Array2::zeros((m, t)),
        };
        let step = opts.damping.initial;
        Ok(Self {
            y,
            sigma2,
            prior_x,
            prior_h,
            fixed_h,
            opts,
            st,
            accepted: None,
            step,
            started: false,
            iterations: 0,
            restarts_used: 0,
            converged: false,
            diverged: false,
            exhausted: false,
            saw_nonfinite: false,
            max_norm_err: 0.0,
            trace: Vec::new(),
            cost_bound,
            recent: Vec::new(),
        })
    }

    pub fn prior_x(&self) -> &PriorX {
        &self.prior_x
    }

    /// Replaces the `X` prior; the damping reference cost and the damping
    /// restart budget are reset so the next iterate is judged under the new model.
    pub fn set_prior_x(&mut self, prior: PriorX) -> Result<()> {
        if prior.dim() != self.prior_x.dim() || prior.atoms != self.prior_x.atoms {
            return Err(Error::Dimension("replacement prior differs in shape".into()));
        }
        self.prior_x = prior;
        if let Some((_, p)) = self.accepted.as_mut() {
            p.cost = f64::INFINITY;
        }
        self.recent.clear();
        self.converged = false;
        self.exhausted = false;
        self.restarts_used = 0;
        Ok(())
    }

    fn remember(&mut self, cost: f64) {
        self.recent.push(cost);
        let w = self.opts.damping.window;
        if self.recent.len() > 2 * w {
            self.recent.drain(..self.recent.len() - w);
        }
    }

    fn plugin(&self, st: &State) -> Plugin {
        let pbar = st.hh.dot(&st.xh);
        let vpbar = abs2(&st.hh).dot(&st.vx) + st.vh.dot(&abs2(&st.xh));
        let vp = &vpbar + &st.vh.dot(&st.vx);
        let mut residual = vp.sum();
        for (y, p) in self.y.iter().zip(pbar.iter()) {
            residual += (y - p).norm_sqr();
        }
        let cost = match self.opts.cost {
            Cost::Residual => residual,
            Cost::FreeEnergy => residual / self.sigma2 + self.divergence_from_priors(st),
        };
        Plugin { pbar, vpbar, vp, residual, cost }
    }

    fn divergence_from_priors(&self, st: &State) -> f64 {
        let (n, t, k1) = st.masses.dim();
        let mut kl = 0.0;
        for i in 0..n {
            for j in 0..t {
                let lp = self.prior_x.log_masses(i, j);
                for (k, l) in lp.iter().enumerate().take(k1) {
                    let b = st.masses[[i, j, k]];
                    if b > 0.0 && l.is_finite() {
                        kl += b * (b.ln() - l);
                    }
                }
            }
        }
        if !self.fixed_h {
            let beta = self.prior_h.variance;
            for (h, v) in st.hh.iter().zip(st.vh.iter()) {
                kl += (beta / v).ln() + (v + h.norm_sqr()) / beta - 1.0;
            }
        }
        kl
    }

    fn finite_state(st: &State) -> bool {
        st.xh.iter().chain(st.hh.iter()).all(|z| z.re.is_finite() && z.im.is_finite())
            && st.vx.iter().chain(st.vh.iter()).all(|v| v.is_finite())
    }

    /// Runs up to `iters` more iterations. Stops early on convergence,
    /// damping exhaustion or divergence; the latter two are sticky.
    pub fn iterate(&mut self, iters: usize) -> Stop {
        for _ in 0..iters {
            if self.diverged {
                return Stop::Diverged;
            }
            if self.exhausted {
                return Stop::DampingExhausted;
            }
            self.step_once();
            if self.diverged {
                return Stop::Diverged;
            }
            if self.converged {
                return Stop::Converged;
            }
            if self.exhausted {
                return Stop::DampingExhausted;
            }
        }
        Stop::IterationBudget
    }

    fn step_once(&mut self) {
        let d = self.opts.damping;
        let current = self.plugin(&self.st);
        let first = !self.started;
        let mut accepted_now = true;
        let mut plug = current;
        if !plug.cost.is_finite() || !plug.residual.is_finite() || plug.residual > self.cost_bound {
            self.saw_nonfinite |= !plug.cost.is_finite() || !plug.residual.is_finite();
            self.diverged = true;
            if let Some((s, _)) = &self.accepted {
                self.st = s.clone();
            }
            self.push_trace(plug.cost, false, true);
            return;
        }
        match &self.accepted {
            None => {
                self.remember(plug.cost);
                self.accepted = Some((self.st.clone(), plug.clone()));
            }
            Some((snap, ref_plug)) => {
                let reference = self
                    .recent
                    .iter()
                    .rev()
                    .take(d.window)
                    .fold(ref_plug.cost, |a, &b| if b.is_finite() { a.max(b) } else { a });
                if plug.cost <= reference {
                    self.step = (self.step * d.growth).min(d.max);
                    self.remember(plug.cost);
                    self.accepted = Some((self.st.clone(), plug.clone()));
                } else if self.step <= d.min * (1.0 + 1e-12) {
                    self.restarts_used += 1;
                    self.remember(plug.cost);
                    self.accepted = Some((self.st.clone(), plug.clone()));
                    if self.restarts_used >= self.opts.outer_attempts {
                        self.exhausted = true;
                    }
                } else {
                    accepted_now = false;
                    self.st = snap.clone();
                    plug = ref_plug.clone();
                    self.step = (self.step * d.shrink).max(d.min);
                }
            }
        }
        self.started = true;
        let b = if first { 1.0 } else { self.step };
        let sigma2 = self.sigma2;
        let st = &mut self.st;

        // Output side.
        if first {
            st.vpbar = plug.vpbar.mapv(|v| v.max(VAR_FLOOR));
            st.vp = plug.vp.mapv(|v| v.max(VAR_FLOOR));
        } else {
            st.vpbar.zip_mut_with(&plug.vpbar, |o, n| *o = (b * n + (1.0 - b) * *o).max(VAR_FLOOR));
            st.vp.zip_mut_with(&plug.vp, |o, n| *o = (b * n + (1.0 - b) * *o).max(VAR_FLOOR));
        }
        let (m, t) = self.y.dim();
        let mut s_new = Array2::zeros((m, t));
        let mut vs_new = Array2::zeros((m, t));
        for i in 0..m {
            for j in 0..t {
                let phat = plug.pbar[[i, j]] - st.s[[i, j]] * st.vpbar[[i, j]];
                let vs = 1.0 / (st.vp[[i, j]] + sigma2);
                vs_new[[i, j]] = vs;
                s_new[[i, j]] = (self.y[[i, j]] - phat) * vs;
            }
        }
        if first {
            st.s = s_new;
            st.vs = vs_new;
            st.xbar = st.xh.clone();
            st.hbar = st.hh.clone();
        } else {
            st.s.zip_mut_with(&s_new, |o, n| *o = n * b + *o * (1.0 - b));
            st.vs.zip_mut_with(&vs_new, |o, n| *o = b * n + (1.0 - b) * *o);
            let xh = &st.xh;
            st.xbar.zip_mut_with(xh, |o, n| *o = n * b + *o * (1.0 - b));
            let hh = &st.hh;
            st.hbar.zip_mut_with(hh, |o, n| *o = n * b + *o * (1.0 - b));
        }

        // Input side, X.
        let vr = abs2(&st.hbar).t().dot(&st.vs).mapv(|v| if v > 1.0 / VAR_CAP { (1.0 / v).max(VAR_FLOOR) } else { VAR_CAP });
        let gain_x = st.vh.t().dot(&st.vs);
        let corr_x = herm(&st.hbar).dot(&st.s);
        let (n, tt) = st.xh.dim();
        let k1 = self.prior_x.atoms.len();
        let mut xh_new = Array2::zeros((n, tt));
        let mut vx_new = Array2::zeros((n, tt));
        let mut masses = Array3::zeros((n, tt, k1));
        let mut buf = vec![0.0; k1];
        let mut norm_err = 0.0f64;
        for i in 0..n {
            for j in 0..tt {
                let r = st.xbar[[i, j]] * (1.0 - vr[[i, j]] * gain_x[[i, j]]) + corr_x[[i, j]] * vr[[i, j]];
                let (mean, var) =
                    merge_log_prior(r, vr[[i, j]], &self.prior_x.atoms, self.prior_x.log_masses(i, j), &mut buf);
                xh_new[[i, j]] = mean;
                vx_new[[i, j]] = var.max(VAR_FLOOR);
                let mut total = 0.0;
                for (k, p) in buf.iter().enumerate() {
                    masses[[i, j, k]] = *p;
                    total += p;
                }
                norm_err = norm_err.max((total - 1.0).abs());
            }
        }

        // Input side, H.
        let (hh_new, vh_new) = if self.fixed_h {
            (st.hh.clone(), st.vh.clone())
        } else {
            let vq = st.vs.dot(&abs2(&st.xbar).t()).mapv(|v| if v > 1.0 / VAR_CAP { (1.0 / v).max(VAR_FLOOR) } else { VAR_CAP });
            let gain_h = st.vs.dot(&st.vx.t());
            let corr_h = st.s.dot(&herm(&st.xbar));
            let mut hh_new = Array2::zeros(st.hh.dim());
            let mut vh_new = Array2::zeros(st.hh.dim());
            for ((idx, h), v) in hh_new.indexed_iter_mut().zip(vh_new.iter_mut()) {
                let q = st.hbar[idx] * (1.0 - vq[idx] * gain_h[idx]) + corr_h[idx] * vq[idx];
                let (mh, vhh) = merge_h(q, vq[idx], &self.prior_h);
                *h = mh;
                *v = vhh.max(VAR_FLOOR);
            }
            (hh_new, vh_new)
        };

        let denom = frob2(&xh_new).sqrt();
        let diff = {
            let mut acc = 0.0;
            for (a, b) in xh_new.iter().zip(st.xh.iter()) {
                acc += (a - b).norm_sqr();
            }
            acc.sqrt()
        };
        let candidate = State {
            xh: xh_new,
            vx: vx_new,
            masses,
            hh: hh_new,
            vh: vh_new,
            ..st.clone()
        };
        self.iterations += 1;
        self.max_norm_err = self.max_norm_err.max(norm_err);
        if !Self::finite_state(&candidate) {
            self.saw_nonfinite = true;
            self.diverged = true;
            if let Some((s, _)) = &self.accepted {
                self.st = s.clone();
            }
            self.push_trace(plug.cost, accepted_now, true);
            return;
        }
        self.st = candidate;
        let change = if denom > 0.0 { diff / denom } else { diff };
        self.converged = !first && accepted_now && change < self.opts.tol;
        self.push_trace(plug.cost, accepted_now, false);
        if let Some(last) = self.trace.last_mut() {
            last.normalization_error = norm_err;
        }
    }

    fn push_trace(&mut self, cost: f64, accepted: bool, nonfinite: bool) {
        if self.opts.trace {
            self.trace.push(TraceRow {
                iteration: self.iterations,
                cost,
                step: self.step,
                accepted,
                normalization_error: 0.0,
                nonfinite,
            });
        }
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn x_mean(&self) -> &CMatrix {
        &self.st.xh
    }

    pub fn h_mean(&self) -> &CMatrix {
        &self.st.hh
    }

    /// Current `X` posterior.
    pub fn posterior_x(&self) -> XPosterior {
        XPosterior {
            atoms: self.prior_x.atoms.clone(),
            masses: self.st.masses.clone(),
            mean: self.st.xh.clone(),
            var: self.st.vx.clone(),
        }
    }

    /// `|Y - H X|_F` at the current means.
    pub fn residual(&self) -> f64 {
        let p = self.st.hh.dot(&self.st.xh);
        self.y.iter().zip(p.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn result(&self, restart: usize) -> BigAmpResult {
        BigAmpResult {
            x: self.posterior_x(),
            h_mean: self.st.hh.clone(),
            h_var: self.st.vh.clone(),
            residual: self.residual(),
            iterations: self.iterations,
            converged: self.converged,
            diverged: self.diverged,
            damping_restarts: self.restarts_used,
            max_normalization_error: self.max_norm_err,
            saw_nonfinite: self.saw_nonfinite,
            trace: self.trace.clone(),
            restart,
        }
    }
}

/// Seed of restart `r`.
pub fn restart_seed(master: u64, r: usize) -> u64 {
    seed::derive(master, &[seed::tag::DETECTOR, r as u64])
}

/// One run from restart index `r`.
pub fn run_single(
    y: &CMatrix,
    prior_x: &PriorX,
    prior_h: &EntryPriorH,
    sigma2: f64,
    opts: &BigAmpOptions,
    r: usize,
) -> Result<BigAmpResult> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(restart_seed(opts.seed, r));
    let mut engine = Engine::new(y.clone(), prior_x.clone(), *prior_h, sigma2, opts.clone(), Init::Random, &mut rng)?;
    engine.iterate(opts.max_iters);
    Ok(engine.result(r))
}

/// Runs all `opts.restarts` initializations concurrently and returns every
/// result in restart order.
pub fn run_bigamp(
    y: &CMatrix,
    prior_x: &PriorX,
    prior_h: &EntryPriorH,
    sigma2: f64,
    opts: &BigAmpOptions,
) -> Result<Vec<BigAmpResult>> {
    opts.validate()?;
    if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Input("observation contains non-finite values".into()));
    }
    (0..opts.restarts)
        .into_par_iter()
        .map(|r| run_single(y, prior_x, prior_h, sigma2, opts, r))
        .collect()
}

/// Minimum-residual result; ties go to the earliest entry.
pub fn select_best(results: Vec<BigAmpResult>) -> Option<BigAmpResult> {
    let mut best: Option<BigAmpResult> = None;
    for r in results {
        match &best {
            Some(b) if !(r.residual < b.residual) => {}
            _ => best = Some(r),
        }
    }
    best
}
