//! Block-sparse support inference and the turbo loop around BiG-AMP.
//!
//! Each row of the window signal matrix holds at most one packet, so its
//! support is a run of `L` consecutive symbols clipped to the window. The run
//! is parametrized by its offset `dt` in `[-L+1, T'-1]`: the packet covers
//! window positions `max(dt, 0) ..= min(dt + L - 1, T' - 1)` (0-based). The
//! offset has a uniform prior. Indicator messages carry `P(d_t = 1)`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bigamp::{BigAmpOptions, BigAmpResult, Engine, EntryPriorH, EntryPriorX, Init, PriorX, XPosterior};
use crate::codec::Constellation;
use crate::error::{Error, Result};
use crate::{seed, CMatrix};

/// Probability clamp used only where messages are handed back to BiG-AMP.
pub const MSG_CLAMP: f64 = 1e-12;

/// Offset range of a length-`L` packet overlapping a length-`T'` window.
pub fn offset_range(packet_len: usize, window_len: usize) -> std::ops::RangeInclusive<i64> {
    -(packet_len as i64) + 1..=window_len as i64 - 1
}

/// Window positions covered by offset `dt`, as a half-open 0-based range.
pub fn span(dt: i64, packet_len: usize, window_len: usize) -> std::ops::Range<usize> {
    let lo = dt.max(0) as usize;
    let hi = (dt + packet_len as i64).min(window_len as i64).max(0) as usize;
    lo..hi.max(lo)
}

/// Distribution over offsets; `probs[j]` belongs to `dt = j - (L - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetPosterior {
    pub probs: Vec<f64>,
    pub packet_len: usize,
    /// Set when every offset had zero weight and the uniform law was substituted.
    pub degenerate: bool,
}

impl OffsetPosterior {
    pub fn offset_of(&self, j: usize) -> i64 {
        j as i64 - (self.packet_len as i64 - 1)
    }

    pub fn prob(&self, dt: i64) -> f64 {
        self.probs[(dt + self.packet_len as i64 - 1) as usize]
    }

    /// Most likely offset; ties go to the smallest.
    pub fn argmax(&self) -> i64 {
        let mut best = 0;
        for (j, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = j;
            }
        }
        self.offset_of(best)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

/// Prefix sums that keep exact zeros apart from the finite logs.
struct LogPrefix {
    zeros: Vec<usize>,
    logs: Vec<f64>,
}

impl LogPrefix {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let mut zeros = vec![0];
        let mut logs = vec![0.0];
        for v in values {
            let (z, l) = if v > 0.0 { (0, v.ln()) } else { (1, 0.0) };
            zeros.push(zeros.last().unwrap() + z);
            logs.push(logs.last().unwrap() + l);
        }
        Self { zeros, logs }
    }

    fn range(&self, r: &std::ops::Range<usize>) -> (usize, f64) {
        (self.zeros[r.end] - self.zeros[r.start], self.logs[r.end] - self.logs[r.start])
    }

    fn at(&self, i: usize) -> (usize, f64) {
        self.range(&(i..i + 1))
    }
}

fn validate_msgs(msgs: &[f64], packet_len: usize) -> Result<()> {
    if packet_len == 0 || msgs.len() < packet_len {
        return Err(Error::Domain(format!(
            "need 1 <= L <= T', got L = {packet_len}, T' = {}",
            msgs.len()
        )));
    }
    if let Some(p) = msgs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Domain(format!("indicator probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Offset law given indicator messages, leaving out position `exclude`.
///
/// The weight of offset `dt` is the product over `t != exclude` of
/// `msgs[t]` inside the span of `dt` and `1 - msgs[t]` outside it.
pub fn offset_distribution(msgs: &[f64], packet_len: usize, exclude: Option<usize>) -> Result<OffsetPosterior> {
    validate_msgs(msgs, packet_len)?;
    let t = msgs.len();
    let on = LogPrefix::new(msgs.iter().copied());
    let off = LogPrefix::new(msgs.iter().map(|p| 1.0 - p));
    Ok(offset_law(&on, &off, packet_len, t, exclude))
}

fn offset_law(on: &LogPrefix, off: &LogPrefix, packet_len: usize, t: usize, exclude: Option<usize>) -> OffsetPosterior {
    let (off_zeros, off_logs) = off.range(&(0..t));
    let mut weights: Vec<(usize, f64)> = offset_range(packet_len, t)
        .map(|dt| {
            let sp = span(dt, packet_len, t);
            let (z_on, l_on) = on.range(&sp);
            let (z_off_in, l_off_in) = off.range(&sp);
            let mut zeros = off_zeros - z_off_in + z_on;
            let mut logs = off_logs - l_off_in + l_on;
            if let Some(e) = exclude {
                let (ze, le) = if sp.contains(&e) { on.at(e) } else { off.at(e) };
                zeros -= ze;
                logs -= le;
            }
            (zeros, logs)
        })
        .collect();
    let best = weights.iter().filter(|w| w.0 == 0).map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
    let n = weights.len();
    if best == f64::NEG_INFINITY {
        return OffsetPosterior { probs: vec![1.0 / n as f64; n], packet_len, degenerate: true };
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        w.1 = if w.0 == 0 { (w.1 - best).exp() } else { 0.0 };
        total += w.1;
    }
    OffsetPosterior { probs: weights.into_iter().map(|w| w.1 / total).collect(), packet_len, degenerate: false }
}

/// Messages from the support factor back to each indicator: `out[t]` is the
/// leave-`t`-out offset mass on offsets whose span covers `t`.
pub fn sparsity_messages(msgs: &[f64], packet_len: usize) -> Result<Vec<f64>> {
    validate_msgs(msgs, packet_len)?;
    let t = msgs.len();
    let on = LogPrefix::new(msgs.iter().copied());
    let off = LogPrefix::new(msgs.iter().map(|p| 1.0 - p));
    Ok((0..t)
        .map(|i| {
            let law = offset_law(&on, &off, packet_len, t, Some(i));
            // Offsets covering i: dt in [i - L + 1, i], i.e. indices i..i+L.
            let p: f64 = law.probs[i..i + packet_len].iter().sum();
            p.clamp(0.0, 1.0)
        })
        .collect())
}

/// Indicator message from an `X` posterior entry: its non-zero mass.
pub fn x_to_d(post: &XPosterior, n: usize, t: usize) -> f64 {
    (1.0 - post.zero_mass(n, t)).clamp(0.0, 1.0)
}

/// Indicator message with the entry's own prior divided out.
pub fn x_to_d_extrinsic(post: &XPosterior, prior: &PriorX, n: usize, t: usize) -> f64 {
    let post_nz = x_to_d(post, n, t);
    let prior_z = prior.log_masses(n, t)[0].exp();
    let prior_nz = 1.0 - prior_z;
    if prior_z <= 0.0 || prior_nz <= 0.0 {
        return post_nz;
    }
    let a = post_nz / prior_nz;
    let b = (1.0 - post_nz) / prior_z;
    if a + b > 0.0 {
        a / (a + b)
    } else {
        0.5
    }
}

/// Entry prior implied by an indicator message: `(1 - p1)` at zero and `p1`
/// spread over the symbols according to the base prior's symbol law.
///
/// Returns the base prior and `true` when the result would be identically zero.
pub fn d_to_x_prior(p1: f64, base: &EntryPriorX) -> (EntryPriorX, bool) {
    let nz = base.nonzero_mass();
    if nz <= 0.0 {
        if p1 < 1.0 {
            return (EntryPriorX { zero_mass: 1.0, point_masses: vec![0.0; base.point_masses.len()] }, false);
        }
        return (base.clone(), true);
    }
    let p1 = p1.clamp(0.0, 1.0);
    let point_masses: Vec<f64> = base.point_masses.iter().map(|m| p1 * m / nz).collect();
    let total = (1.0 - p1) + point_masses.iter().sum::<f64>();
    (
        EntryPriorX { zero_mass: (1.0 - p1) / total, point_masses: point_masses.into_iter().map(|m| m / total).collect() },
        false,
    )
}

/// Initial i.i.d. sparsity of a window row, `(2T' + L - 1) L / (2 (L + T' - 1) T')`.
pub fn gamma_prime(window_len: usize, packet_len: usize) -> Result<f64> {
    if packet_len < 1 || window_len < packet_len {
        return Err(Error::Domain(format!("need T' >= L >= 1, got T' = {window_len}, L = {packet_len}")));
    }
    let (tp, l) = (window_len as f64, packet_len as f64);
    Ok((2.0 * tp + l - 1.0) * l / (2.0 * (l + tp - 1.0) * tp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurboOptions {
    /// Outer rounds `K_max`.
    pub outer_iters: usize,
    /// BiG-AMP iterations per round `L_max`.
    pub inner_iters: usize,
    /// Independent turbo trials `J_max`.
    pub trials: usize,
    /// Relative change of the `X` mean between rounds that ends the loop.
    pub tol: f64,
    /// Allow stopping before `outer_iters` rounds.
    pub early_exit: bool,
    /// Divide each entry's prior out of its posterior before support inference.
    pub extrinsic: bool,
    pub trace: bool,
}

impl Default for TurboOptions {
    fn default() -> Self {
        Self { outer_iters: 20, inner_iters: 20, trials: 2, tol: 1e-4, early_exit: true, extrinsic: true, trace: false }
    }
}

impl TurboOptions {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_iters == 0 || self.trials == 0 {
            return Err(Error::Config("turbo iteration counts and trials must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("turbo tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the per-round trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurboTraceRow {
    pub trial: usize,
    pub round: usize,
    pub residual: f64,
    /// Mean entropy (nats) of the row offset laws.
    pub mean_offset_entropy: f64,
}

pub fn write_turbo_trace_csv<W: Write>(rows: &[TurboTraceRow], out: &mut W) -> Result<()> {
    writeln!(out, "trial,round,residual,mean_offset_entropy")?;
    for r in rows {
        writeln!(out, "{},{},{:e},{:e}", r.trial, r.round, r.residual, r.mean_offset_entropy)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurboResult {
    /// BiG-AMP state after the last inner run of the best trial.
    pub bigamp: BigAmpResult,
    pub rounds: usize,
    pub trial: usize,
    pub degenerate_rows: usize,
    /// Largest normalization error of any offset law or BiG-AMP posterior.
    pub max_normalization_error: f64,
    pub trace: Vec<TurboTraceRow>,
}

/// Support-inference pass over all rows: new entry priors from the current
/// posteriors. Returns the prior, the number of degenerate rows, the largest
/// offset-law normalization error and the mean offset entropy.
pub fn support_round(
    post: &XPosterior,
    current: &PriorX,
    base: &EntryPriorX,
    alphabet: &Constellation,
    packet_len: usize,
    extrinsic: bool,
) -> Result<(PriorX, usize, f64, f64)> {
    let (n, t) = (post.rows(), post.cols());
    let mut out = Vec::with_capacity(n);
    let mut degenerate = 0;
    let mut norm_err = 0.0f64;
    let mut entropy = 0.0;
    for row in 0..n {
        let msgs: Vec<f64> = (0..t)
            .map(|c| if extrinsic { x_to_d_extrinsic(post, current, row, c) } else { x_to_d(post, row, c) })
            .collect();
        let law = offset_distribution(&msgs, packet_len, None)?;
        degenerate += law.degenerate as usize;
        norm_err = norm_err.max((law.probs.iter().sum::<f64>() - 1.0).abs());
        entropy += law.entropy();
        out.push(sparsity_messages(&msgs, packet_len)?);
    }
    let prior = PriorX::from_fn(alphabet, n, t, |r, c| {
        let p1 = out[r][c].clamp(MSG_CLAMP, 1.0 - MSG_CLAMP);
        d_to_x_prior(p1, base).0
    })?;
    Ok((prior, degenerate, norm_err, entropy / n.max(1) as f64))
}

fn rel_change(a: &CMatrix, b: &CMatrix) -> f64 {
    let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = a.iter().map(|x| x.norm_sqr()).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    }
}

/// One turbo trial from restart index `trial`.
#[allow(clippy::too_many_arguments)]
pub fn run_turbo_trial(
    y: &CMatrix,
    num_rows: usize,
    sigma2: f64,
    alphabet: &Constellation,
    packet_len: usize,
    channel_var: f64,
    opts: &TurboOptions,
    bigamp_opts: &BigAmpOptions,
    trial: usize,
) -> Result<TurboResult> {
    opts.validate()?;
    let t = y.ncols();
    let gamma = gamma_prime(t, packet_len)?;
    let base = EntryPriorX::sparse(gamma, alphabet.len())?;
    let prior = PriorX::shared(&base, alphabet, num_rows, t)?;
    let prior_h = EntryPriorH::new(channel_var)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(bigamp_opts.seed, &[seed::tag::DETECTOR, trial as u64]));
    let mut engine = Engine::new(y.clone(), prior, prior_h, sigma2, bigamp_opts.clone(), Init::Random, &mut rng)?;
    let mut trace = Vec::new();
    let mut degenerate_rows = 0;
    let mut norm_err = 0.0f64;
    let mut rounds = 0;
    let mut last: Option<CMatrix> = None;
    for round in 0..opts.outer_iters {
        engine.iterate(opts.inner_iters);
        rounds = round + 1;
        let post = engine.posterior_x();
        norm_err = norm_err.max(post.max_normalization_error());
        let stable = last.as_ref().is_some_and(|prev| rel_change(&post.mean, prev) < opts.tol);
        if round + 1 == opts.outer_iters || (opts.early_exit && stable) {
            if opts.trace {
                trace.push(TurboTraceRow { trial, round, residual: engine.residual(), mean_offset_entropy: f64::NAN });
            }
            break;
        }
        let (next, degenerate, err, entropy) =
            support_round(&post, engine.prior_x(), &base, alphabet, packet_len, opts.extrinsic)?;
        degenerate_rows += degenerate;
        norm_err = norm_err.max(err);
        if opts.trace {
            trace.push(TurboTraceRow { trial, round, residual: engine.residual(), mean_offset_entropy: entropy });
        }
        engine.set_prior_x(next)?;
        last = Some(post.mean);
    }
    let bigamp = engine.result(trial);
    norm_err = norm_err.max(bigamp.max_normalization_error);
    Ok(TurboResult { bigamp, rounds, trial, degenerate_rows, max_normalization_error: norm_err, trace })
}

/// Runs `opts.trials` independent turbo trials and keeps the one with the
/// smallest residual (earliest on ties).
#[allow(clippy::too_many_arguments)]
pub fn run_turbo(
    y: &CMatrix,
    num_rows: usize,
    sigma2: f64,
    alphabet: &Constellation,
    packet_len: usize,
    channel_var: f64,
    opts: &TurboOptions,
    bigamp_opts: &BigAmpOptions,
) -> Result<TurboResult> {
    opts.validate()?;
    bigamp_opts.validate()?;
    if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Input("observation contains non-finite values".into()));
    }
    let mut best: Option<TurboResult> = None;
    for j in 0..opts.trials {
        let r = run_turbo_trial(y, num_rows, sigma2, alphabet, packet_len, channel_var, opts, bigamp_opts, j)?;
        let better = best.as_ref().is_none_or(|b| r.bigamp.residual < b.bigamp.residual);
        if better {
            let trace = best.as_ref().map(|b| b.trace.clone()).unwrap_or_default();
            best = Some(TurboResult { trace: [trace, r.trace.clone()].concat(), ..r });
        } else if let Some(b) = best.as_mut() {
            b.trace.extend(r.trace);
        }
    }
    Ok(best.expect("at least one trial"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_are_clipped() {
        assert_eq!(span(-1, 2, 3), 0..1);
        assert_eq!(span(0, 2, 3), 0..2);
        assert_eq!(span(2, 2, 3), 2..3);
        assert_eq!(offset_range(2, 3).count(), 4);
    }

    #[test]
    fn uniform_inputs_give_uniform_offsets() {
        let law = offset_distribution(&[0.5; 3], 2, None).unwrap();
        assert!(law.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        let out = sparsity_messages(&[0.5; 3], 2).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn certain_pattern_is_point_mass() {
        let law = offset_distribution(&[0.0, 1.0, 1.0], 2, None).unwrap();
        assert_eq!(law.argmax(), 1);
        assert!((law.prob(1) - 1.0).abs() < 1e-15);
        assert!(!law.degenerate);
        let out = sparsity_messages(&[0.0, 1.0, 1.0], 2).unwrap();
        // Leave-one-out: without its own certainty the middle entry could be off.
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn impossible_pattern_is_degenerate() {
        let law = offset_distribution(&[1.0, 0.0, 1.0], 2, None).unwrap();
        assert!(law.degenerate);
        assert!(law.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gamma_prime_values() {
        assert_eq!(gamma_prime(1, 1).unwrap(), 1.0);
        assert!((gamma_prime(256, 64).unwrap() - 0.22531).abs() < 1e-4);
        assert!((gamma_prime(2, 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!(gamma_prime(3, 4).is_err());
    }

    #[test]
    fn d_to_x_edges() {
        let base = EntryPriorX::sparse(0.25, 4).unwrap();
        let (p, deg) = d_to_x_prior(0.0, &base);
        assert!(!deg);
        assert_eq!(p.zero_mass, 1.0);
        let (p, _) = d_to_x_prior(1.0, &base);
        assert_eq!(p.zero_mass, 0.0);
        assert!(p.point_masses.iter().all(|m| (m - 0.25).abs() < 1e-15));
        let (p, _) = d_to_x_prior(0.25, &base);
        assert!((p.zero_mass - 0.75).abs() < 1e-15);
        let dead = EntryPriorX { zero_mass: 1.0, point_masses: vec![0.0; 4] };
        assert!(d_to_x_prior(1.0, &dead).1);
    }
}
