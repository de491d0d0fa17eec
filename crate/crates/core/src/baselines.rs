//! Reference receivers with channel knowledge: per-column LMMSE given the
//! true support, and GAMP with a known channel and an i.i.d. sparse prior.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::airsim::{extract_window, PacketType, StreamScenario, WindowView};
use crate::bigamp::{BigAmpOptions, Engine, EntryPriorX, PriorX, XPosterior};
use crate::codec::{self, Constellation};
use crate::error::{Error, Result};
use crate::ssl::{self, WindowSchedule};
use crate::turbo;
use crate::{linalg, CMatrix, RecoveredPacket, C64};

/// Relative pivot size below which a column system counts as singular.
pub const PIVOT_TOL: f64 = 1e-12;
/// Ridge used when a column system is singular.
pub const FALLBACK_RIDGE: f64 = 1e-10;

/// Channel and activity pattern known to the oracle receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSideInfo {
    pub channel: CMatrix,
    /// `true` where the transmitted signal is non-zero.
    pub support: Array2<bool>,
}

impl OracleSideInfo {
    /// True channels and support of the packets overlapping a window.
    pub fn from_window(view: &WindowView<'_>) -> Self {
        let x = view.effective_signals();
        Self { channel: view.effective_channels(), support: x.mapv(|z| z.norm_sqr() > 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmseOutput {
    /// Linear estimate before decisions.
    pub estimate: CMatrix,
    /// Active entries mapped to the nearest constellation point; zeros elsewhere.
    pub decided: CMatrix,
    /// Columns solved with the ridge fallback.
    pub fallback_columns: usize,
}

/// LMMSE estimate of each column restricted to its known active rows:
/// `x_S = (H_S^H H_S + (sigma2/P) I)^{-1} H_S^H y`.
pub fn oracle_lmmse(
    y: &CMatrix,
    side: &OracleSideInfo,
    sigma2: f64,
    power: f64,
    alphabet: &Constellation,
) -> Result<LmmseOutput> {
    let (m, n) = side.channel.dim();
    let t = y.ncols();
    if y.nrows() != m || side.support.dim() != (n, t) {
        return Err(Error::Dimension(format!(
            "Y is {:?}, H is {:?}, support is {:?}",
            y.dim(),
            side.channel.dim(),
            side.support.dim()
        )));
    }
    if !(sigma2 >= 0.0) || !(power > 0.0) {
        return Err(Error::Domain(format!("need sigma2 >= 0 and P > 0, got {sigma2}, {power}")));
    }
    let cols: Vec<(Array1<C64>, bool)> = (0..t)
        .into_par_iter()
        .map(|c| {
            let active: Vec<usize> = (0..n).filter(|&r| side.support[[r, c]]).collect();
            let mut out = Array1::zeros(n);
            if active.is_empty() {
                return (out, false);
            }
            let hs = side.channel.select(ndarray::Axis(1), &active);
            let hsh = linalg::herm(hs.view());
            let rhs = hsh.dot(&y.column(c)).insert_axis(ndarray::Axis(1));
            let gram = hsh.dot(&hs);
            let ridge = |eps: f64| {
                let mut a = gram.clone();
                for i in 0..active.len() {
                    a[[i, i]] += eps;
                }
                a
            };
            let (sol, fallback) = match linalg::solve(ridge(sigma2 / power).view(), rhs.view(), PIVOT_TOL) {
                Some(s) => (s, false),
                None => {
                    let scale = gram.diag().iter().fold(0.0f64, |a, z| a.max(z.re)).max(1.0);
                    let s = linalg::solve(ridge(sigma2 / power + FALLBACK_RIDGE * scale).view(), rhs.view(), 0.0)
                        .unwrap_or_else(|| Array2::zeros((active.len(), 1)));
                    (s, true)
                }
            };
            for (k, &r) in active.iter().enumerate() {
                out[r] = sol[[k, 0]];
            }
            (out, fallback)
        })
        .collect();
    let mut estimate = Array2::zeros((n, t));
    let mut fallback_columns = 0;
    for (c, (col, fb)) in cols.into_iter().enumerate() {
        estimate.column_mut(c).assign(&col);
        fallback_columns += fb as usize;
    }
    let decided = Array2::from_shape_fn((n, t), |(r, c)| {
        if side.support[[r, c]] {
            alphabet.points()[alphabet.nearest(estimate[[r, c]])]
        } else {
            C64::new(0.0, 0.0)
        }
    });
    Ok(LmmseOutput { estimate, decided, fallback_columns })
}

/// GAMP with the channel fixed to `h` and the same prior on every entry.
pub fn csi_gamp(
    y: &CMatrix,
    h: &CMatrix,
    sigma2: f64,
    prior: &EntryPriorX,
    alphabet: &Constellation,
    opts: &BigAmpOptions,
) -> Result<XPosterior> {
    let prior_x = PriorX::shared(prior, alphabet, h.ncols(), y.ncols())?;
    let mut engine = Engine::with_known_channel(y.clone(), h.clone(), prior_x, sigma2, opts.clone())?;
    engine.iterate(opts.max_iters);
    Ok(engine.posterior_x())
}

/// Entry-wise most probable atom of a posterior.
pub fn map_decide(post: &XPosterior) -> CMatrix {
    Array2::from_shape_fn((post.rows(), post.cols()), |(n, t)| {
        let mut best = 0;
        for k in 1..post.atoms.len() {
            if post.masses[[n, t, k]] > post.masses[[n, t, best]] {
                best = k;
            }
        }
        post.atoms[best]
    })
}

/// Reads the packets that lie entirely inside the window from decided rows
/// whose order follows `view.active`. Symbols are taken at the true offsets.
pub fn decode_known_rows(
    decided: &CMatrix,
    view: &WindowView<'_>,
    alphabet: &Constellation,
    window_index: usize,
    num_users: Option<usize>,
) -> Vec<RecoveredPacket> {
    let l = view.scenario.packet_len();
    view.active
        .iter()
        .enumerate()
        .filter(|(_, a)| a.kind == PacketType::TypeI)
        .map(|(n, a)| {
            let off = a.offset as usize;
            let symbols: Vec<C64> = decided.row(n).iter().skip(off).take(l).copied().collect();
            let payload = codec::decode_ssl(&symbols, alphabet);
            let user_id = match (&payload, num_users) {
                (Ok(bits), Some(u)) => codec::read_user_id(bits, u),
                _ => None,
            };
            RecoveredPacket { user_id, payload, row: n, trial: window_index, start_time: Some(view.start + off) }
        })
        .collect()
}

/// Which reference receiver to run over a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    OracleLmmse,
    CsiGamp,
}

/// Runs a reference receiver on every window of the schedule and merges the
/// recoveries as the sliding-window receiver does.
#[allow(clippy::too_many_arguments)]
pub fn baseline_stream_detect(
    scenario: &StreamScenario,
    schedule: &WindowSchedule,
    sigma2: f64,
    power: f64,
    alphabet: &Constellation,
    which: Baseline,
    opts: &BigAmpOptions,
    num_users: Option<usize>,
) -> Result<Vec<RecoveredPacket>> {
    let starts = schedule.starts(scenario.duration());
    let gamma = turbo::gamma_prime(schedule.window_len, schedule.packet_len)?;
    let prior = EntryPriorX::sparse(gamma, alphabet.len())?;
    let per_window: Vec<Vec<(usize, RecoveredPacket)>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &t0)| {
            let view = extract_window(scenario, t0, schedule.window_len)?;
            if view.num_active() == 0 {
                return Ok(Vec::new());
            }
            let y = view.observation.to_owned();
            let decided = match which {
                Baseline::OracleLmmse => {
                    oracle_lmmse(&y, &OracleSideInfo::from_window(&view), sigma2, power, alphabet)?.decided
                }
                Baseline::CsiGamp => {
                    map_decide(&csi_gamp(&y, &view.effective_channels(), sigma2, &prior, alphabet, opts)?)
                }
            };
            Ok(decode_known_rows(&decided, &view, alphabet, k, num_users).into_iter().map(|p| (t0, p)).collect())
        })
        .collect::<Result<_>>()?;
    let found = per_window.into_iter().flatten().collect();
    Ok(ssl::dedup(found, schedule).into_iter().map(|(_, p)| p).collect())
}
