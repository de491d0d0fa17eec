//! Sliding-window receiver: per-window Turbo-BiG-AMP, packet positioning,
//! phase correction, recovery of packets that lie entirely inside a window,
//! and merging of recoveries across overlapping windows.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::airsim::{extract_window, StreamScenario};
use crate::bigamp::{BigAmpOptions, XPosterior};
use crate::codec::{self, Constellation, DecodeFailure};
use crate::error::{Error, Result};
use crate::turbo::{self, TurboOptions};
use crate::{seed, RecoveredPacket, C64};

/// Smallest `|E[x]|` accepted as the phase normalizer of a row.
pub const NORMALIZER_FLOOR: f64 = 1e-9;

/// Window grid `t_k = k * step`, `k = 0, 1, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSchedule {
    pub window_len: usize,
    pub step: usize,
    pub packet_len: usize,
}

impl WindowSchedule {
    pub fn new(window_len: usize, step: usize, packet_len: usize) -> Result<Self> {
        if step == 0 || packet_len == 0 || window_len < packet_len || step >= window_len - packet_len {
            return Err(Error::Config(format!(
                "window schedule needs 1 <= step < T' - L, got T' = {window_len}, step = {step}, L = {packet_len}"
            )));
        }
        Ok(Self { window_len, step, packet_len })
    }

    /// Window starts covering `[0, duration)`. When the regular grid leaves a
    /// tail, one extra window is aligned with the end of the stream.
    pub fn starts(&self, duration: usize) -> Vec<usize> {
        if duration < self.window_len {
            return Vec::new();
        }
        let last = duration - self.window_len;
        let mut out: Vec<usize> = (0..=last).step_by(self.step).collect();
        if *out.last().expect("non-empty") != last {
            out.push(last);
        }
        out
    }

    /// Whether a packet starting at `start` lies entirely inside window `t0`.
    pub fn is_type1(&self, start: usize, t0: usize) -> bool {
        t0 <= start && start + self.packet_len <= t0 + self.window_len
    }
}

/// Offset estimate for one row of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PositionedRow {
    pub row: usize,
    pub offset: i64,
    pub is_type1: bool,
}

/// Most likely packet offset of every row from its non-zero posterior masses.
pub fn position_rows(post: &XPosterior, packet_len: usize, window_len: usize) -> Result<Vec<PositionedRow>> {
    if post.cols() != window_len {
        return Err(Error::Dimension(format!("posterior has {} columns, window has {window_len}", post.cols())));
    }
    (0..post.rows())
        .map(|n| {
            let msgs: Vec<f64> = (0..window_len).map(|t| turbo::x_to_d(post, n, t)).collect();
            let law = turbo::offset_distribution(&msgs, packet_len, None)?;
            let offset = law.argmax();
            let is_type1 = 0 <= offset && offset <= (window_len - packet_len) as i64;
            Ok(PositionedRow { row: n, offset, is_type1 })
        })
        .collect()
}

/// Rotates the `L` posterior means starting at `offset` so that the first
/// becomes the reference symbol, then hard-decides onto the constellation.
pub fn phase_align(
    means: &[C64],
    offset: usize,
    packet_len: usize,
    alphabet: &Constellation,
) -> std::result::Result<Vec<C64>, DecodeFailure> {
    let span = means.get(offset..offset + packet_len).ok_or(DecodeFailure::WrongLength {
        expected: offset + packet_len,
        got: means.len(),
    })?;
    let first = span[0];
    if first.norm() < NORMALIZER_FLOOR {
        return Err(DecodeFailure::Empty);
    }
    let scale = alphabet.reference() / first;
    Ok(span.iter().map(|z| alphabet.points()[alphabet.nearest(z * scale)]).collect())
}

/// Decodes the type-I rows of one window. `window_start` is added to each
/// offset to give the absolute start time.
pub fn recover_type1(
    post: &XPosterior,
    rows: &[PositionedRow],
    packet_len: usize,
    alphabet: &Constellation,
    window_start: usize,
    window_index: usize,
    num_users: Option<usize>,
) -> Vec<RecoveredPacket> {
    rows.iter()
        .filter(|r| r.is_type1)
        .map(|r| {
            let means: Vec<C64> = post.mean.row(r.row).to_vec();
            let offset = r.offset as usize;
            let payload = phase_align(&means, offset, packet_len, alphabet).and_then(|s| codec::decode_ssl(&s, alphabet));
            let user_id = match (&payload, num_users) {
                (Ok(bits), Some(u)) => codec::read_user_id(bits, u),
                _ => None,
            };
            RecoveredPacket {
                user_id,
                payload,
                row: r.row,
                trial: window_index,
                start_time: Some(window_start + offset),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslOptions {
    pub turbo: TurboOptions,
    pub bigamp: BigAmpOptions,
    pub channel_var: f64,
    /// Rows added to the oracle active count in every window.
    pub extra_rows: usize,
    /// Used only to read user ids from decoded payloads.
    pub num_users: Option<usize>,
}

impl Default for SslOptions {
    fn default() -> Self {
        Self {
            turbo: TurboOptions::default(),
            bigamp: BigAmpOptions::default(),
            channel_var: 1.0,
            extra_rows: 0,
            num_users: None,
        }
    }
}

/// Per-window record of the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowLog {
    pub window: usize,
    pub start: usize,
    /// Oracle count of packets overlapping the window.
    pub active: usize,
    /// Rows used by the detector.
    pub rows: usize,
    pub positioned: Vec<PositionedRow>,
    pub type1_rows: usize,
    pub decoded: usize,
    /// Decoded rows that repeated another row's (payload, start) in this window.
    pub duplicate_rows: usize,
    pub turbo_rounds: usize,
    pub degenerate_rows: usize,
    pub residual: f64,
    pub max_normalization_error: f64,
}

/// Writes one JSON object per line.
pub fn write_window_log<W: Write>(logs: &[WindowLog], out: &mut W) -> Result<()> {
    for l in logs {
        serde_json::to_writer(&mut *out, l).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SslDetection {
    /// Distinct decoded packets.
    pub packets: Vec<RecoveredPacket>,
    pub windows: Vec<WindowLog>,
}

/// Distance of a packet to the nearer edge of its window.
fn interiority(start: usize, window_start: usize, window_len: usize, packet_len: usize) -> usize {
    let left = start - window_start;
    let right = window_start + window_len - (start + packet_len);
    left.min(right)
}

/// Keeps one copy per `(payload, start)`, the one most interior to its
/// window; earlier windows win ties. Undecoded entries are dropped.
pub fn dedup(
    found: Vec<(usize, RecoveredPacket)>,
    schedule: &WindowSchedule,
) -> Vec<(usize, RecoveredPacket)> {
    let mut best: HashMap<(Vec<bool>, usize), usize> = HashMap::new();
    let mut kept: Vec<(usize, RecoveredPacket)> = Vec::new();
    for (w0, p) in found {
        let (Ok(bits), Some(start)) = (&p.payload, p.start_time) else { continue };
        let score = interiority(start, w0, schedule.window_len, schedule.packet_len);
        match best.get(&(bits.clone(), start)) {
            Some(&i) => {
                let (kw, kp) = &kept[i];
                let old = interiority(kp.start_time.expect("kept"), *kw, schedule.window_len, schedule.packet_len);
                if score > old {
                    kept[i] = (w0, p);
                }
            }
            None => {
                best.insert((bits.clone(), start), kept.len());
                kept.push((w0, p));
            }
        }
    }
    kept
}

struct WindowOutcome {
    start: usize,
    packets: Vec<RecoveredPacket>,
    log: WindowLog,
}

fn detect_window(
    scenario: &StreamScenario,
    schedule: &WindowSchedule,
    k: usize,
    t0: usize,
    sigma2: f64,
    alphabet: &Constellation,
    opts: &SslOptions,
) -> Result<WindowOutcome> {
    let view = extract_window(scenario, t0, schedule.window_len)?;
    let active = view.num_active();
    let mut log = WindowLog {
        window: k,
        start: t0,
        active,
        rows: 0,
        positioned: Vec::new(),
        type1_rows: 0,
        decoded: 0,
        duplicate_rows: 0,
        turbo_rounds: 0,
        degenerate_rows: 0,
        residual: 0.0,
        max_normalization_error: 0.0,
    };
    if active == 0 {
        return Ok(WindowOutcome { start: t0, packets: Vec::new(), log });
    }
    let rows = active + opts.extra_rows;
    let mut bigamp = opts.bigamp.clone();
    bigamp.seed = seed::derive(opts.bigamp.seed, &[seed::tag::DETECTOR, k as u64]);
    let y = view.observation.to_owned();
    let res = turbo::run_turbo(&y, rows, sigma2, alphabet, schedule.packet_len, opts.channel_var, &opts.turbo, &bigamp)?;
    let post = &res.bigamp.x;
    let positioned = position_rows(post, schedule.packet_len, schedule.window_len)?;
    let recovered = recover_type1(post, &positioned, schedule.packet_len, alphabet, t0, k, opts.num_users);
    let mut packets: Vec<RecoveredPacket> = Vec::new();
    for p in recovered {
        if p.is_decoded() {
            log.decoded += 1;
            if packets.iter().any(|q| q.payload == p.payload && q.start_time == p.start_time) {
                log.duplicate_rows += 1;
                continue;
            }
        }
        packets.push(p);
    }
    log.rows = rows;
    log.type1_rows = positioned.iter().filter(|r| r.is_type1).count();
    log.positioned = positioned;
    log.turbo_rounds = res.rounds;
    log.degenerate_rows = res.degenerate_rows;
    log.residual = res.bigamp.residual;
    log.max_normalization_error = res.max_normalization_error;
    Ok(WindowOutcome { start: t0, packets, log })
}

/// Runs the sliding-window receiver over a whole stream.
///
/// The number of rows per window is the oracle count of overlapping packets
/// plus `opts.extra_rows`; empty windows are skipped.
pub fn sliding_detect(
    scenario: &StreamScenario,
    schedule: &WindowSchedule,
    sigma2: f64,
    alphabet: &Constellation,
    opts: &SslOptions,
) -> Result<SslDetection> {
    if schedule.packet_len != scenario.packet_len() {
        return Err(Error::Config(format!(
            "schedule packet length {} differs from stream packet length {}",
            schedule.packet_len,
            scenario.packet_len()
        )));
    }
    opts.turbo.validate()?;
    opts.bigamp.validate()?;
    let starts = schedule.starts(scenario.duration());
    let outcomes: Vec<WindowOutcome> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &t0)| detect_window(scenario, schedule, k, t0, sigma2, alphabet, opts))
        .collect::<Result<_>>()?;
    let mut found = Vec::new();
    let mut windows = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        found.extend(o.packets.into_iter().map(|p| (o.start, p)));
        windows.push(o.log);
    }
    let packets = dedup(found, schedule).into_iter().map(|(_, p)| p).collect();
    Ok(SslDetection { packets, windows })
}

/// Number of transmitted packets matched exactly by payload and start time.
pub fn count_recovered(scenario: &StreamScenario, recovered: &[RecoveredPacket]) -> usize {
    let got: std::collections::HashSet<(&Vec<bool>, usize)> = recovered
        .iter()
        .filter_map(|p| Some((p.payload.as_ref().ok()?, p.start_time?)))
        .collect();
    scenario.packets.iter().filter(|p| got.contains(&(&p.payload_bits, p.start_time))).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_rejects_uncovered_grid() {
        assert!(WindowSchedule::new(256, 192, 64).is_err());
        assert!(WindowSchedule::new(256, 191, 64).is_ok());
        assert!(WindowSchedule::new(256, 0, 64).is_err());
    }

    #[test]
    fn starts_end_at_stream_end() {
        let s = WindowSchedule::new(8, 3, 2).unwrap();
        assert_eq!(s.starts(8), vec![0]);
        assert_eq!(s.starts(14), vec![0, 3, 6]);
        assert_eq!(s.starts(15), vec![0, 3, 6, 7]);
        assert!(s.starts(7).is_empty());
    }

    #[test]
    fn phase_align_rotates_to_reference() {
        let q = Constellation::qpsk();
        let rot = C64::from_polar(0.7, 1.1);
        let packet = [q.reference(), q.points()[2], q.points()[3]];
        let means: Vec<C64> = [C64::new(0.0, 0.0)].iter().chain(packet.iter()).map(|z| z * rot).collect();
        assert_eq!(phase_align(&means, 1, 3, &q).unwrap(), packet.to_vec());
        assert_eq!(phase_align(&means, 0, 3, &q), Err(DecodeFailure::Empty));
    }
}
