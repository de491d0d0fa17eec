//! Experiment configuration, Monte-Carlo sweeps and CSV output.
//!
//! Seeding: scenario `j` of a sweep is drawn from
//! `derive(seed, [SCENARIO, j])` and re-observed at every SNR point, so all
//! SNR points and all schemes run on the same channels, payloads and unit
//! noise. Detector randomness for scenario `j` at SNR index `i` comes from
//! `derive(seed, [DETECTOR, i, j])`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::airsim::{ActiveUsers, Scenario, SlotScenario, StreamParams, StreamScenario, SystemConfig};
use crate::baselines::{self, Baseline};
use crate::bigamp::BigAmpOptions;
use crate::codec::{self, Constellation, RslCodecConfig};
use crate::error::{Error, Result};
use crate::rsl::{self, RslDetectorConfig};
use crate::ssl::{self, SslOptions, WindowLog, WindowSchedule};
use crate::turbo::{self, TurboOptions};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rsl,
    Ssl,
    OracleLmmse,
    CsiGamp,
}

impl Scheme {
    pub fn is_stream(self) -> bool {
        self != Scheme::Rsl
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Rsl => "rsl",
            Scheme::Ssl => "ssl",
            Scheme::OracleLmmse => "oracle-lmmse",
            Scheme::CsiGamp => "csi-gamp",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsl" => Ok(Scheme::Rsl),
            "ssl" => Ok(Scheme::Ssl),
            "oracle-lmmse" => Ok(Scheme::OracleLmmse),
            "csi-gamp" => Ok(Scheme::CsiGamp),
            _ => Err(Error::Config(format!("unknown scheme '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown scale preset '{s}'"))),
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub num_users: usize,
    pub num_antennas: usize,
    pub power: f64,
    // Slotted access.
    pub slot_len: usize,
    pub sparsity: f64,
    pub num_active: usize,
    // Sliding-window access.
    pub packet_len: usize,
    pub window_len: usize,
    pub window_step: usize,
    pub arrival_rate: f64,
    pub guard: usize,
    pub stream_len: usize,
    pub extra_rows: usize,
    // Detectors.
    pub restarts: usize,
    pub max_iters: usize,
    /// Forced acceptances at the minimum damping step tolerated per run.
    pub damping_restarts: usize,
    pub turbo_outer: usize,
    pub turbo_inner: usize,
    pub turbo_trials: usize,
    // Sweep.
    pub snr_db: Vec<f64>,
    pub packets: usize,
    pub seed: u64,
    // Phase transition.
    pub gammas: Vec<f64>,
    pub per_target: f64,
    pub max_active: usize,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, scheme: Scheme) -> Self {
        let stream = scheme.is_stream();
        match preset {
            Preset::Desk => Self {
                scheme,
                num_users: 200,
                num_antennas: 16,
                power: 1.0,
                slot_len: 128,
                sparsity: 0.25,
                num_active: 8,
                packet_len: 32,
                window_len: 128,
                window_step: 32,
                arrival_rate: 2.516e-4,
                guard: 32,
                stream_len: 4096,
                extra_rows: 0,
                restarts: 25,
                max_iters: 100,
                damping_restarts: 10,
                turbo_outer: 20,
                turbo_inner: 20,
                turbo_trials: 2,
                snr_db: if stream { vec![-4.0, -2.0, 0.0, 2.0, 4.0] } else { vec![8.0, 12.0, 16.0, 20.0] },
                packets: 2000,
                seed: 1,
                gammas: vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5],
                per_target: 1e-2,
                max_active: 64,
            },
            Preset::Paper => Self {
                scheme,
                num_users: 200,
                num_antennas: 40,
                power: 1.0,
                slot_len: 256,
                sparsity: 0.25,
                num_active: 40,
                packet_len: 64,
                window_len: 256,
                window_step: 64,
                arrival_rate: 5e-4,
                guard: 64,
                stream_len: 16384,
                extra_rows: 0,
                restarts: 25,
                max_iters: 100,
                damping_restarts: 10,
                turbo_outer: 20,
                turbo_inner: 20,
                turbo_trials: 2,
                snr_db: if stream { vec![-4.0, -2.0, 0.0, 2.0, 4.0, 6.0] } else { (5..=10).map(|k| 2.0 * k as f64).collect() },
                packets: 100_000,
                seed: 1,
                gammas: vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5],
                per_target: 1e-2,
                max_active: 200,
            },
        }
    }

    /// Sets one `key = value` field. Keys match the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        match key {
            "scheme" => self.scheme = value.parse()?,
            "num_users" => self.num_users = num(key, value)?,
            "num_antennas" => self.num_antennas = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "slot_len" => self.slot_len = num(key, value)?,
            "sparsity" => self.sparsity = num(key, value)?,
            "num_active" => self.num_active = num(key, value)?,
            "packet_len" => self.packet_len = num(key, value)?,
            "window_len" => self.window_len = num(key, value)?,
            "window_step" => self.window_step = num(key, value)?,
            "arrival_rate" => self.arrival_rate = num(key, value)?,
            "guard" => self.guard = num(key, value)?,
            "stream_len" => self.stream_len = num(key, value)?,
            "extra_rows" => self.extra_rows = num(key, value)?,
            "restarts" => self.restarts = num(key, value)?,
            "max_iters" => self.max_iters = num(key, value)?,
            "damping_restarts" => self.damping_restarts = num(key, value)?,
            "turbo_outer" => self.turbo_outer = num(key, value)?,
            "turbo_inner" => self.turbo_inner = num(key, value)?,
            "turbo_trials" => self.turbo_trials = num(key, value)?,
            "snr_db" => self.snr_db = list(key, value)?,
            "packets" => self.packets = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "gammas" => self.gammas = list(key, value)?,
            "per_target" => self.per_target = num(key, value)?,
            "max_active" => self.max_active = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.packets < 1 {
            return Err(Error::Config("packet budget must be >= 1".into()));
        }
        if self.snr_db.is_empty() {
            return Err(Error::Config("SNR grid is empty".into()));
        }
        if self.num_antennas < 1 || self.num_users < 1 || !(self.power > 0.0) {
            return Err(Error::Config("need antennas >= 1, users >= 1 and power > 0".into()));
        }
        if self.restarts < 1 || self.max_iters < 1 {
            return Err(Error::Config("restarts and max_iters must be >= 1".into()));
        }
        if self.scheme.is_stream() {
            WindowSchedule::new(self.window_len, self.window_step, self.packet_len)?;
            if self.stream_len < self.window_len {
                return Err(Error::Config("stream_len shorter than one window".into()));
            }
            if !(self.arrival_rate > 0.0) {
                return Err(Error::Config("arrival_rate must be > 0".into()));
            }
            self.turbo_options().validate()?;
        } else {
            if self.num_active < 1 {
                return Err(Error::Config("num_active must be >= 1".into()));
            }
            self.rsl_codec(self.sparsity)?;
        }
        Ok(())
    }

    pub fn rsl_codec(&self, sparsity: f64) -> Result<RslCodecConfig> {
        RslCodecConfig::new(self.slot_len, sparsity, self.num_users, &Constellation::qpsk())
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn system(&self, noise_var: f64) -> Result<SystemConfig> {
        let mut s = SystemConfig::new(self.num_users, self.num_antennas, noise_var)?;
        s.power = self.power;
        Ok(s)
    }

    pub fn stream_params(&self) -> StreamParams {
        StreamParams {
            duration: self.stream_len,
            packet_len: self.packet_len,
            arrival_rate: self.arrival_rate,
            guard: self.guard,
        }
    }

    pub fn bigamp_options(&self, seed: u64) -> BigAmpOptions {
        BigAmpOptions {
            max_iters: self.max_iters,
            outer_attempts: self.damping_restarts,
            restarts: self.restarts,
            seed,
            ..BigAmpOptions::default()
        }
    }

    pub fn turbo_options(&self) -> TurboOptions {
        TurboOptions {
            outer_iters: self.turbo_outer,
            inner_iters: self.turbo_inner,
            trials: self.turbo_trials,
            ..TurboOptions::default()
        }
    }

    pub fn noise_var(&self, snr_db: f64) -> f64 {
        SystemConfig::noise_var_for_snr_db(self.power, snr_db)
    }
}

/// One CSV line of a sweep. Empty cells mark fields that do not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub scheme: Scheme,
    pub m: usize,
    pub n: Option<usize>,
    pub lambda: Option<f64>,
    pub t: Option<usize>,
    pub l: Option<usize>,
    pub t_prime: Option<usize>,
    pub delta_t: Option<usize>,
    pub gamma: f64,
    pub snr_db: f64,
    pub packets_sent: usize,
    pub packets_recovered: usize,
    pub per: f64,
    /// `sqrt(per (1 - per) / packets_sent)`.
    pub per_stderr: f64,
    /// Zero unless wall-clock reporting was requested.
    pub wall_seconds: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str =
    "scheme,m,n,lambda,t,l,t_prime,delta_t,gamma,snr_db,packets_sent,packets_recovered,per,per_stderr,wall_seconds,seed";

fn cell<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl MetricRow {
    fn new(cfg: &ExperimentConfig, snr_db: f64, sent: usize, recovered: usize, seconds: f64) -> Result<Self> {
        let (per, per_stderr) = per_estimate(sent, recovered);
        let stream = cfg.scheme.is_stream();
        let gamma = if stream { turbo::gamma_prime(cfg.window_len, cfg.packet_len)? } else { cfg.sparsity };
        Ok(Self {
            scheme: cfg.scheme,
            m: cfg.num_antennas,
            n: (!stream).then_some(cfg.num_active),
            lambda: stream.then_some(cfg.arrival_rate),
            t: (!stream).then_some(cfg.slot_len),
            l: stream.then_some(cfg.packet_len),
            t_prime: stream.then_some(cfg.window_len),
            delta_t: stream.then_some(cfg.window_step),
            gamma,
            snr_db,
            packets_sent: sent,
            packets_recovered: recovered,
            per,
            per_stderr,
            wall_seconds: seconds,
            seed: cfg.seed,
        })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.m,
            cell(&self.n),
            cell(&self.lambda),
            cell(&self.t),
            cell(&self.l),
            cell(&self.t_prime),
            cell(&self.delta_t),
            self.gamma,
            self.snr_db,
            self.packets_sent,
            self.packets_recovered,
            self.per,
            self.per_stderr,
            self.wall_seconds,
            self.seed
        )
    }
}

/// PER and its binomial standard error.
pub fn per_estimate(sent: usize, recovered: usize) -> (f64, f64) {
    if sent == 0 {
        return (0.0, 0.0);
    }
    let per = (sent - recovered) as f64 / sent as f64;
    (per, (per * (1.0 - per) / sent as f64).sqrt())
}

pub fn write_csv<W: Write>(rows: &[MetricRow], out: &mut W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Information bits per symbol interval carried by `N` slotted users:
/// `N (floor((T-1) H) - ceil(log2 U)) / T` with `H` the QPSK sparse symbol entropy.
pub fn throughput(num_active: usize, slot_len: usize, sparsity: f64, num_users: usize) -> Result<f64> {
    if slot_len < 1 || num_users < 1 {
        return Err(Error::Domain("need T >= 1 and U >= 1".into()));
    }
    let h = codec::symbol_entropy(sparsity, 4)?;
    let body = ((slot_len - 1) as f64 * h).floor();
    let id = (num_users as f64).log2().ceil();
    Ok(num_active as f64 * (body - id) / slot_len as f64)
}

/// Detector health collected over a sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Health {
    pub max_normalization_error: f64,
    pub saw_nonfinite: bool,
}

impl Health {
    fn merge(self, other: Health) -> Health {
        Health {
            max_normalization_error: self.max_normalization_error.max(other.max_normalization_error),
            saw_nonfinite: self.saw_nonfinite || other.saw_nonfinite,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<MetricRow>,
    pub health: Health,
    /// Per-window logs of sliding-window runs, by SNR index then stream.
    pub window_logs: Vec<(usize, usize, Vec<WindowLog>)>,
}

/// Scenario `j` of a slotted sweep at noise variance `noise_var`.
pub fn slot_scenario(cfg: &ExperimentConfig, j: usize, noise_var: f64) -> Result<SlotScenario> {
    let codec_cfg = cfg.rsl_codec(cfg.sparsity)?;
    let mut rng = seed::rng(cfg.seed, &[seed::tag::SCENARIO, j as u64]);
    SlotScenario::generate(&cfg.system(noise_var)?, &codec_cfg, &Constellation::qpsk(), ActiveUsers::Fixed(cfg.num_active), &mut rng)
}

/// Stream `j` of a sliding-window sweep at noise variance `noise_var`.
pub fn stream_scenario(cfg: &ExperimentConfig, j: usize, noise_var: f64) -> Result<StreamScenario> {
    let mut rng = seed::rng(cfg.seed, &[seed::tag::SCENARIO, j as u64]);
    StreamScenario::generate(&cfg.system(noise_var)?, cfg.stream_params(), &Constellation::qpsk(), &mut rng)
}

/// Streams needed to reach the packet budget, each at unit noise.
fn stream_set(cfg: &ExperimentConfig) -> Result<Vec<StreamScenario>> {
    let mut out = Vec::new();
    let mut sent = 0;
    while sent < cfg.packets {
        let s = stream_scenario(cfg, out.len(), 1.0)?;
        sent += s.packets.len();
        out.push(s);
        if out.len() > cfg.packets.max(1000) && sent == 0 {
            return Err(Error::Config("arrival rate too low to produce any packets".into()));
        }
    }
    Ok(out)
}

/// Result of one detector run on one scenario.
struct Scored {
    sent: usize,
    recovered: usize,
    health: Health,
    windows: Option<Vec<WindowLog>>,
}

fn run_slot(cfg: &ExperimentConfig, sc: &SlotScenario, detector_seed: u64) -> Result<Scored> {
    let alphabet = Constellation::qpsk();
    let codec_cfg = cfg.rsl_codec(cfg.sparsity)?;
    let mut det = RslDetectorConfig::new(cfg.num_active, cfg.sparsity);
    det.bigamp = cfg.bigamp_options(detector_seed);
    let d = rsl::detect_slot_detailed(&sc.observation, &det, &alphabet, &codec_cfg, sc.noise_var)?;
    let sent: Vec<Vec<bool>> = sc.packets.iter().map(|p| p.payload_bits.clone()).collect();
    Ok(Scored {
        sent: sent.len(),
        recovered: rsl::count_recovered(&sent, &d.packets),
        health: Health { max_normalization_error: d.max_normalization_error, saw_nonfinite: d.saw_nonfinite },
        windows: None,
    })
}

fn run_stream(cfg: &ExperimentConfig, sc: &StreamScenario, detector_seed: u64) -> Result<Scored> {
    let alphabet = Constellation::qpsk();
    let schedule = WindowSchedule::new(cfg.window_len, cfg.window_step, cfg.packet_len)?;
    let bigamp = cfg.bigamp_options(detector_seed);
    let (packets, health, windows) = match cfg.scheme {
        Scheme::Ssl => {
            let opts = SslOptions {
                turbo: cfg.turbo_options(),
                bigamp,
                channel_var: 1.0,
                extra_rows: cfg.extra_rows,
                num_users: Some(cfg.num_users),
            };
            let d = ssl::sliding_detect(sc, &schedule, sc.noise_var, &alphabet, &opts)?;
            let health = Health {
                max_normalization_error: d.windows.iter().map(|w| w.max_normalization_error).fold(0.0, f64::max),
                saw_nonfinite: d.windows.iter().any(|w| !w.residual.is_finite()),
            };
            (d.packets, health, Some(d.windows))
        }
        Scheme::OracleLmmse | Scheme::CsiGamp => {
            let which = if cfg.scheme == Scheme::OracleLmmse { Baseline::OracleLmmse } else { Baseline::CsiGamp };
            let p = baselines::baseline_stream_detect(
                sc,
                &schedule,
                sc.noise_var,
                cfg.power,
                &alphabet,
                which,
                &bigamp,
                Some(cfg.num_users),
            )?;
            (p, Health::default(), None)
        }
        Scheme::Rsl => unreachable!("slotted scheme on a stream"),
    };
    Ok(Scored { sent: sc.packets.len(), recovered: ssl::count_recovered(sc, &packets), health, windows })
}

/// PER at every SNR point of the configuration.
pub fn per_sweep(cfg: &ExperimentConfig, wall_clock: bool) -> Result<SweepOutput> {
    cfg.validate()?;
    let mut out = SweepOutput::default();
    let streams = if cfg.scheme.is_stream() { stream_set(cfg)? } else { Vec::new() };
    let slots = cfg.packets.div_ceil(cfg.num_active.max(1));
    for (i, &snr) in cfg.snr_db.iter().enumerate() {
        let started = Instant::now();
        let nv = cfg.noise_var(snr);
        let det_seed = |j: usize| seed::derive(cfg.seed, &[seed::tag::DETECTOR, i as u64, j as u64]);
        let scored: Vec<Scored> = if cfg.scheme.is_stream() {
            streams
                .par_iter()
                .enumerate()
                .map(|(j, s)| run_stream(cfg, &s.with_noise_var(nv)?, det_seed(j)))
                .collect::<Result<_>>()?
        } else {
            (0..slots)
                .into_par_iter()
                .map(|j| run_slot(cfg, &slot_scenario(cfg, j, nv)?, det_seed(j)))
                .collect::<Result<_>>()?
        };
        let (mut sent, mut recovered) = (0, 0);
        for (j, s) in scored.into_iter().enumerate() {
            sent += s.sent;
            recovered += s.recovered;
            out.health = out.health.merge(s.health);
            if let Some(w) = s.windows {
                out.window_logs.push((i, j, w));
            }
        }
        let secs = if wall_clock { started.elapsed().as_secs_f64() } else { 0.0 };
        out.rows.push(MetricRow::new(cfg, snr, sent, recovered, secs)?);
    }
    out.rows.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
    Ok(out)
}

/// Runs the configured scheme on one stored scenario.
pub fn replay(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<MetricRow> {
    let det_seed = seed::derive(cfg.seed, &[seed::tag::DETECTOR, 0, 0]);
    let (scored, nv) = match scenario {
        Scenario::Slot(s) => {
            if cfg.scheme.is_stream() {
                return Err(Error::Config(format!("scheme {} needs a stream scenario", cfg.scheme)));
            }
            let mut c = cfg.clone();
            c.num_active = s.num_active();
            c.slot_len = s.slot_len;
            c.num_antennas = s.num_antennas();
            (run_slot(&c, s, det_seed)?, s.noise_var)
        }
        Scenario::Stream(s) => {
            if !cfg.scheme.is_stream() {
                return Err(Error::Config("the slotted scheme needs a slot scenario".into()));
            }
            (run_stream(cfg, s, det_seed)?, s.noise_var)
        }
    };
    let snr_db = 10.0 * (cfg.power / nv).log10();
    MetricRow::new(cfg, snr_db, scored.sent, scored.recovered, 0.0)
}

/// The first scenario of the sweep at its first SNR point.
pub fn synth(cfg: &ExperimentConfig) -> Result<Scenario> {
    cfg.validate()?;
    let nv = cfg.noise_var(cfg.snr_db[0]);
    Ok(if cfg.scheme.is_stream() {
        Scenario::Stream(stream_scenario(cfg, 0, nv)?)
    } else {
        Scenario::Slot(slot_scenario(cfg, 0, nv)?)
    })
}

/// Largest supported `N` for one sparsity level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub gamma: f64,
    /// Zero when even `N = 1` misses the target.
    pub max_active: usize,
    pub throughput: f64,
}

/// For each sparsity level, increases `N` from 1 until the measured PER at
/// the first SNR point exceeds `per_target`, or `max_active` is reached.
pub fn phase_transition(cfg: &ExperimentConfig) -> Result<Vec<PhasePoint>> {
    if !(0.0 < cfg.per_target && cfg.per_target < 1.0) {
        return Err(Error::Config(format!("per_target {} outside (0, 1)", cfg.per_target)));
    }
    let mut out = Vec::with_capacity(cfg.gammas.len());
    for &gamma in &cfg.gammas {
        let mut best = 0;
        for n in 1..=cfg.max_active {
            let mut c = cfg.clone();
            c.scheme = Scheme::Rsl;
            c.sparsity = gamma;
            c.num_active = n;
            c.snr_db = vec![cfg.snr_db[0]];
            let row = &per_sweep(&c, false)?.rows[0];
            if row.per > cfg.per_target {
                break;
            }
            best = n;
        }
        out.push(PhasePoint { gamma, max_active: best, throughput: throughput(best, cfg.slot_len, gamma, cfg.num_users)? });
    }
    Ok(out)
}

pub fn write_phase_csv<W: Write>(points: &[PhasePoint], out: &mut W) -> Result<()> {
    writeln!(out, "gamma,max_n,throughput")?;
    for p in points {
        writeln!(out, "{},{},{}", p.gamma, p.max_active, p.throughput)?;
    }
    Ok(())
}

/// Throughput over the sparsity grid at the configured `N`, `T` and `U`.
pub fn throughput_curve(cfg: &ExperimentConfig) -> Result<Vec<(f64, f64, f64)>> {
    cfg.gammas
        .iter()
        .map(|&g| Ok((g, codec::symbol_entropy(g, 4)?, throughput(cfg.num_active, cfg.slot_len, g, cfg.num_users)?)))
        .collect()
}

pub fn write_throughput_csv<W: Write>(rows: &[(f64, f64, f64)], out: &mut W) -> Result<()> {
    writeln!(out, "gamma,entropy_bits,throughput")?;
    for (g, h, r) in rows {
        writeln!(out, "{g},{h},{r}")?;
    }
    Ok(())
}
