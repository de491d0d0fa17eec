//! Channel, traffic and received-signal synthesis for both access models.
//!
//! Noise is stored at unit variance and scaled by `sqrt(noise_var)` when the
//! observation is formed, so one scenario can be replayed at several SNR
//! points with identical fading, payloads and noise shape.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::codec::{self, Constellation, PacketRecord, RslCodecConfig};
use crate::error::{Error, Result};
use crate::{CMatrix, C64};

/// System-level parameters shared by both access models.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub noise_var: f64,
    /// Per-user path loss `beta_i`; empty means all ones.
    pub pathloss: Vec<f64>,
    pub power: f64,
}

impl SystemConfig {
    pub fn new(num_users: usize, num_antennas: usize, noise_var: f64) -> Result<Self> {
        let cfg = Self { num_users, num_antennas, noise_var, pathloss: Vec::new(), power: 1.0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_antennas < 1 {
            return Err(Error::Config("need at least one antenna".into()));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::Config(format!("noise variance {} must be > 0", self.noise_var)));
        }
        if !self.pathloss.is_empty() && self.pathloss.len() != self.num_users {
            return Err(Error::Config("pathloss list length differs from user count".into()));
        }
        if self.pathloss.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::Config("path loss values must be > 0".into()));
        }
        Ok(())
    }

    /// `beta_i` for a 1-based user id.
    pub fn pathloss_of(&self, user_id: usize) -> f64 {
        if self.pathloss.is_empty() {
            1.0
        } else {
            self.pathloss[user_id - 1]
        }
    }

    /// Average path loss over all users.
    pub fn mean_pathloss(&self) -> f64 {
        if self.pathloss.is_empty() {
            1.0
        } else {
            self.pathloss.iter().sum::<f64>() / self.pathloss.len() as f64
        }
    }

    /// Noise variance for an SNR `P / sigma^2` in dB.
    pub fn noise_var_for_snr_db(power: f64, snr_db: f64) -> f64 {
        power / 10f64.powf(snr_db / 10.0)
    }
}

/// One circularly-symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let sd = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(sd * re, sd * im)
}

/// Rayleigh channel `sqrt(beta) * g`, `g ~ CN(0, I_M)`.
pub fn draw_channel<R: Rng + ?Sized>(num_antennas: usize, beta: f64, rng: &mut R) -> Array1<C64> {
    Array1::from_shape_fn(num_antennas, |_| complex_gaussian(rng, 1.0) * beta.max(0.0).sqrt())
}

/// `M x T` matrix of i.i.d. `CN(0, 1)` entries, drawn row-major.
pub fn unit_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    Array2::from_shape_fn((rows, cols), |_| complex_gaussian(rng, 1.0))
}

/// Noise-free superposition `sum_i h_i c_i^T` over equal-length packets.
pub fn superpose(packets: &[Vec<C64>], channels: &[Array1<C64>], num_antennas: usize, len: usize) -> Result<CMatrix> {
    if packets.len() != channels.len() {
        return Err(Error::Dimension(format!(
            "{} packets but {} channels",
            packets.len(),
            channels.len()
        )));
    }
    let mut y = Array2::zeros((num_antennas, len));
    for (c, h) in packets.iter().zip(channels) {
        if c.len() != len || h.len() != num_antennas {
            return Err(Error::Dimension(format!(
                "packet length {} / channel length {} vs {len} / {num_antennas}",
                c.len(),
                h.len()
            )));
        }
        for (m, hm) in h.iter().enumerate() {
            for (t, ct) in c.iter().enumerate() {
                y[[m, t]] += hm * ct;
            }
        }
    }
    Ok(y)
}

fn add_scaled_noise(signal: &CMatrix, unit: &CMatrix, noise_var: f64) -> CMatrix {
    let sd = noise_var.sqrt();
    let mut y = signal.clone();
    y.zip_mut_with(unit, |a, w| *a += w * sd);
    y
}

/// Slot observation `Y = sum_i h_i c_i^T + W` with `W ~ CN(0, sigma2)`.
pub fn synth_slot<R: Rng + ?Sized>(
    packets: &[Vec<C64>],
    channels: &[Array1<C64>],
    noise_var: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    let m = channels.first().map(|h| h.len());
    let t = packets.first().map(|c| c.len());
    let (m, t) = match (m, t) {
        (Some(m), Some(t)) => (m, t),
        _ => {
            return Err(Error::Dimension(
                "synth_slot needs at least one packet to infer dimensions; use synth_slot_sized".into(),
            ))
        }
    };
    synth_slot_sized(packets, channels, m, t, noise_var, rng)
}

/// As [`synth_slot`] with explicit dimensions, so an empty packet list is allowed.
pub fn synth_slot_sized<R: Rng + ?Sized>(
    packets: &[Vec<C64>],
    channels: &[Array1<C64>],
    num_antennas: usize,
    slot_len: usize,
    noise_var: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    let signal = superpose(packets, channels, num_antennas, slot_len)?;
    let w = unit_noise(num_antennas, slot_len, rng);
    Ok(add_scaled_noise(&signal, &w, noise_var))
}

/// How many users are active in a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActiveUsers {
    /// Exactly `N` distinct users chosen uniformly.
    Fixed(usize),
    /// Each user independently active with probability `p1`.
    Bernoulli(f64),
}

/// A time-slotted realization with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotScenario {
    pub slot_len: usize,
    /// Packets of the active users, in row order of `signals`.
    pub packets: Vec<PacketRecord>,
    /// `M x N` channel matrix.
    pub channels: CMatrix,
    /// `N x T` signal matrix.
    pub signals: CMatrix,
    /// `M x T` unit-variance noise realization.
    pub unit_noise: CMatrix,
    pub noise_var: f64,
    /// `Y = HX + sqrt(noise_var) W0`.
    pub observation: CMatrix,
}

impl SlotScenario {
    pub fn generate<R: Rng + ?Sized>(
        sys: &SystemConfig,
        codec_cfg: &RslCodecConfig,
        alphabet: &Constellation,
        active: ActiveUsers,
        rng: &mut R,
    ) -> Result<Self> {
        sys.validate()?;
        let users = draw_active_set(sys.num_users, active, rng)?;
        let m = sys.num_antennas;
        let t = codec_cfg.slot_len();
        let mut packets = Vec::with_capacity(users.len());
        let mut channels = Vec::with_capacity(users.len());
        for &user in &users {
            let bits = codec::payload_with_id(user, sys.num_users, codec_cfg.capacity_bits(), rng);
            let symbols = codec::encode_rsl(&bits, codec_cfg, alphabet, rng)?;
            channels.push(draw_channel(m, sys.pathloss_of(user), rng));
            packets.push(PacketRecord { user_id: user, payload_bits: bits, symbols, start_time: 0 });
        }
        let w0 = unit_noise(m, t, rng);
        Self::assemble(t, m, packets, channels, w0, sys.noise_var)
    }

    fn assemble(
        slot_len: usize,
        m: usize,
        packets: Vec<PacketRecord>,
        channels: Vec<Array1<C64>>,
        unit_noise: CMatrix,
        noise_var: f64,
    ) -> Result<Self> {
        let n = packets.len();
        let syms: Vec<Vec<C64>> = packets.iter().map(|p| p.symbols.clone()).collect();
        let signal = superpose(&syms, &channels, m, slot_len)?;
        let observation = add_scaled_noise(&signal, &unit_noise, noise_var);
        let mut hmat = Array2::zeros((m, n));
        let mut xmat = Array2::zeros((n, slot_len));
        for (i, (p, h)) in packets.iter().zip(&channels).enumerate() {
            hmat.column_mut(i).assign(h);
            xmat.row_mut(i).assign(&Array1::from(p.symbols.clone()));
        }
        Ok(Self {
            slot_len,
            packets,
            channels: hmat,
            signals: xmat,
            unit_noise,
            noise_var,
            observation,
        })
    }

    pub fn num_antennas(&self) -> usize {
        self.observation.nrows()
    }

    pub fn num_active(&self) -> usize {
        self.packets.len()
    }

    /// The same realization observed at another noise level.
    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        let channels: Vec<Array1<C64>> = self.channels.columns().into_iter().map(|c| c.to_owned()).collect();
        Self::assemble(
            self.slot_len,
            self.num_antennas(),
            self.packets.clone(),
            channels,
            self.unit_noise.clone(),
            noise_var,
        )
    }
}

fn draw_active_set<R: Rng + ?Sized>(num_users: usize, active: ActiveUsers, rng: &mut R) -> Result<Vec<usize>> {
    match active {
        ActiveUsers::Fixed(n) => {
            if n > num_users {
                return Err(Error::Config(format!("{n} active users exceeds population {num_users}")));
            }
            let mut ids = rand::seq::index::sample(rng, num_users, n).into_vec();
            ids.sort_unstable();
            Ok(ids.into_iter().map(|i| i + 1).collect())
        }
        ActiveUsers::Bernoulli(p1) => {
            if !(0.0..=1.0).contains(&p1) {
                return Err(Error::Config(format!("activity probability {p1} outside [0, 1]")));
            }
            Ok((1..=num_users).filter(|_| rng.random_bool(p1)).collect())
        }
    }
}

/// Per-user Poisson arrivals of rate `lambda` per symbol, as `(user_id, start)`
/// sorted by start time then user.
///
/// Arrival instants are floored to symbol boundaries. An arrival earlier than
/// `L + guard` symbols after the previous accepted start of the same user is
/// deferred to the earliest legal start; packets that would not finish before
/// `duration` are dropped together with everything queued behind them.
pub fn gen_traffic<R: Rng + ?Sized>(
    num_users: usize,
    lambda: f64,
    duration: usize,
    packet_len: usize,
    guard: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if !(lambda > 0.0) || duration < packet_len {
        return out;
    }
    let exp = Exp::new(lambda).expect("positive rate");
    let spacing = packet_len.saturating_add(guard);
    for user in 1..=num_users {
        let mut clock = 0.0f64;
        let mut next_free = 0usize;
        loop {
            clock += exp.sample(rng);
            if clock >= duration as f64 {
                break;
            }
            let start = (clock.floor() as usize).max(next_free);
            if start.saturating_add(packet_len) > duration {
                break;
            }
            out.push((user, start));
            next_free = start.saturating_add(spacing);
        }
    }
    out.sort_by_key(|&(u, s)| (s, u));
    out
}

/// Parameters of the non-time-slotted traffic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamParams {
    pub duration: usize,
    pub packet_len: usize,
    pub arrival_rate: f64,
    pub guard: usize,
}

/// A non-time-slotted realization with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScenario {
    pub num_antennas: usize,
    pub params: StreamParams,
    /// Packets sorted by start time; `channels[i]` belongs to `packets[i]`.
    pub packets: Vec<PacketRecord>,
    pub channels: Vec<Array1<C64>>,
    /// `M x duration` unit-variance noise.
    pub unit_noise: CMatrix,
    pub noise_var: f64,
    /// `M x duration` received samples.
    pub samples: CMatrix,
}

/// Accumulates `y_t = sum h_{i,t} s_{i,t} + w_t` over the packet list.
pub fn synth_stream(
    num_antennas: usize,
    params: StreamParams,
    packets: Vec<PacketRecord>,
    channels: Vec<Array1<C64>>,
    unit_noise: CMatrix,
    noise_var: f64,
) -> Result<StreamScenario> {
    if packets.len() != channels.len() {
        return Err(Error::Dimension(format!("{} packets but {} channels", packets.len(), channels.len())));
    }
    if unit_noise.dim() != (num_antennas, params.duration) {
        return Err(Error::Dimension(format!(
            "noise is {:?}, expected ({num_antennas}, {})",
            unit_noise.dim(),
            params.duration
        )));
    }
    let mut signal: CMatrix = Array2::zeros((num_antennas, params.duration));
    for (p, h) in packets.iter().zip(&channels) {
        if h.len() != num_antennas {
            return Err(Error::Dimension("channel length differs from antenna count".into()));
        }
        if p.start_time + p.symbols.len() > params.duration {
            return Err(Error::Dimension(format!(
                "packet at {} of length {} overruns duration {}",
                p.start_time,
                p.symbols.len(),
                params.duration
            )));
        }
        for (k, c) in p.symbols.iter().enumerate() {
            let t = p.start_time + k;
            for (m, hm) in h.iter().enumerate() {
                signal[[m, t]] += hm * c;
            }
        }
    }
    let samples = add_scaled_noise(&signal, &unit_noise, noise_var);
    Ok(StreamScenario { num_antennas, params, packets, channels, unit_noise, noise_var, samples })
}

impl StreamScenario {
    /// Traffic, payloads, channels and noise drawn from one generator.
    pub fn generate<R: Rng + ?Sized>(
        sys: &SystemConfig,
        params: StreamParams,
        alphabet: &Constellation,
        rng: &mut R,
    ) -> Result<Self> {
        sys.validate()?;
        let traffic = gen_traffic(
            sys.num_users,
            params.arrival_rate,
            params.duration,
            params.packet_len,
            params.guard,
            rng,
        );
        let cap = codec::ssl_capacity_bits(params.packet_len, alphabet)?;
        let mut packets = Vec::with_capacity(traffic.len());
        let mut channels = Vec::with_capacity(traffic.len());
        for (user, start) in traffic {
            let bits = codec::payload_with_id(user, sys.num_users, cap, rng);
            let symbols = codec::encode_ssl(&bits, params.packet_len, alphabet)?;
            channels.push(draw_channel(sys.num_antennas, sys.pathloss_of(user), rng));
            packets.push(PacketRecord { user_id: user, payload_bits: bits, symbols, start_time: start });
        }
        let w0 = unit_noise(sys.num_antennas, params.duration, rng);
        synth_stream(sys.num_antennas, params, packets, channels, w0, sys.noise_var)
    }

    /// The same realization observed at another noise level.
    pub fn with_noise_var(&self, noise_var: f64) -> Result<Self> {
        synth_stream(
            self.num_antennas,
            self.params,
            self.packets.clone(),
            self.channels.clone(),
            self.unit_noise.clone(),
            noise_var,
        )
    }

    pub fn duration(&self) -> usize {
        self.params.duration
    }

    pub fn packet_len(&self) -> usize {
        self.params.packet_len
    }
}

/// Position of a packet relative to an observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum PacketType {
    /// Entirely inside the window.
    TypeI,
    /// Crosses the left edge.
    TypeII,
    /// Crosses the right edge.
    TypeIII,
    Outside,
}

/// Classifies a packet starting at `start` against window `[t0, t0 + T')`.
pub fn classify_packet(start: i64, t0: i64, window_len: i64, packet_len: i64) -> PacketType {
    if t0 <= start && start <= t0 + window_len - packet_len {
        PacketType::TypeI
    } else if t0 - packet_len < start && start < t0 {
        PacketType::TypeII
    } else if t0 + window_len - packet_len < start && start < t0 + window_len {
        PacketType::TypeIII
    } else {
        PacketType::Outside
    }
}

/// A packet overlapping a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivePacket {
    /// Index into [`StreamScenario::packets`].
    pub packet: usize,
    /// `start - t0`, in `[-L+1, T'-1]`.
    pub offset: i64,
    pub kind: PacketType,
}

/// Observation window `[t0, t0 + T')` borrowing the scenario's samples, with
/// the set of overlapping packets as oracle.
#[derive(Debug, Clone)]
pub struct WindowView<'a> {
    pub scenario: &'a StreamScenario,
    pub start: usize,
    pub len: usize,
    pub observation: ArrayView2<'a, C64>,
    pub active: Vec<ActivePacket>,
}

/// Extracts window `[t0, t0 + T')` and its overlapping packets.
pub fn extract_window(scenario: &StreamScenario, t0: usize, window_len: usize) -> Result<WindowView<'_>> {
    if window_len == 0 || t0 + window_len > scenario.duration() {
        return Err(Error::Dimension(format!(
            "window [{t0}, {}) outside stream of length {}",
            t0 + window_len,
            scenario.duration()
        )));
    }
    let active = scenario
        .packets
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let kind = classify_packet(p.start_time as i64, t0 as i64, window_len as i64, p.symbols.len() as i64);
            (kind != PacketType::Outside).then_some(ActivePacket {
                packet: i,
                offset: p.start_time as i64 - t0 as i64,
                kind,
            })
        })
        .collect();
    Ok(WindowView {
        scenario,
        start: t0,
        len: window_len,
        observation: scenario.samples.slice(s![.., t0..t0 + window_len]),
        active,
    })
}

impl WindowView<'_> {
    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    /// `M x N` channels of the active packets, in `active` order.
    pub fn effective_channels(&self) -> CMatrix {
        let m = self.scenario.num_antennas;
        let mut h = Array2::zeros((m, self.active.len()));
        for (n, a) in self.active.iter().enumerate() {
            h.column_mut(n).assign(&self.scenario.channels[a.packet]);
        }
        h
    }

    /// `N x T'` effective signal: each row is the part of one packet inside the window.
    pub fn effective_signals(&self) -> CMatrix {
        let mut x = Array2::zeros((self.active.len(), self.len));
        for (n, a) in self.active.iter().enumerate() {
            let p = &self.scenario.packets[a.packet];
            for (k, c) in p.symbols.iter().enumerate() {
                let t = a.offset + k as i64;
                if t >= 0 && (t as usize) < self.len {
                    x[[n, t as usize]] = *c;
                }
            }
        }
        x
    }

    /// `M x T'` noise inside the window, at the scenario's noise level.
    pub fn noise(&self) -> CMatrix {
        let sd = self.scenario.noise_var.sqrt();
        self.scenario.unit_noise.slice(s![.., self.start..self.start + self.len]).mapv(|w| w * sd)
    }

    /// Count of packets of each type: (I, II, III).
    pub fn type_counts(&self) -> (usize, usize, usize) {
        self.active.iter().fold((0, 0, 0), |(a, b, c), p| match p.kind {
            PacketType::TypeI => (a + 1, b, c),
            PacketType::TypeII => (a, b + 1, c),
            PacketType::TypeIII => (a, b, c + 1),
            PacketType::Outside => (a, b, c),
        })
    }
}

// ---------------------------------------------------------------------------
// Scenario container
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"MUDSCN01";
const KIND_SLOT: u8 = 1;
const KIND_STREAM: u8 = 2;

/// A stored realization of either access model.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Slot(SlotScenario),
    Stream(StreamScenario),
}

struct Writer<'w, W: Write>(&'w mut W);

impl<W: Write> Writer<'_, W> {
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn c64(&mut self, v: C64) -> Result<()> {
        self.f64(v.re)?;
        self.f64(v.im)
    }
    fn bits(&mut self, bits: &[bool]) -> Result<()> {
        self.u64(bits.len() as u64)?;
        let bytes: Vec<u8> = bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
            .collect();
        Ok(self.0.write_all(&bytes)?)
    }
    fn cvec(&mut self, v: impl ExactSizeIterator<Item = C64>) -> Result<()> {
        self.u64(v.len() as u64)?;
        for z in v {
            self.c64(z)?;
        }
        Ok(())
    }
    fn matrix(&mut self, m: &CMatrix) -> Result<()> {
        self.u64(m.nrows() as u64)?;
        self.u64(m.ncols() as u64)?;
        for z in m.iter() {
            self.c64(*z)?;
        }
        Ok(())
    }
    fn packet(&mut self, p: &PacketRecord, h: &Array1<C64>) -> Result<()> {
        self.u64(p.user_id as u64)?;
        self.u64(p.start_time as u64)?;
        self.bits(&p.payload_bits)?;
        self.cvec(p.symbols.iter().copied())?;
        self.cvec(h.iter().copied())
    }
}

struct Reader<'r, R: Read>(&'r mut R);

impl<R: Read> Reader<'_, R> {
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn usize(&mut self, limit: u64, what: &str) -> Result<usize> {
        let v = self.u64()?;
        if v > limit {
            return Err(Error::Format(format!("{what} = {v} exceeds limit {limit}")));
        }
        Ok(v as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn c64(&mut self) -> Result<C64> {
        Ok(C64::new(self.f64()?, self.f64()?))
    }
    fn bits(&mut self) -> Result<Vec<bool>> {
        let n = self.usize(1 << 32, "bit count")?;
        let mut bytes = vec![0u8; n.div_ceil(8)];
        self.0.read_exact(&mut bytes)?;
        Ok((0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1 == 1).collect())
    }
    fn cvec(&mut self) -> Result<Vec<C64>> {
        let n = self.usize(1 << 32, "vector length")?;
        (0..n).map(|_| self.c64()).collect()
    }
    fn matrix(&mut self) -> Result<CMatrix> {
        let r = self.usize(1 << 20, "rows")?;
        let c = self.usize(1 << 32, "cols")?;
        let data: Vec<C64> = (0..r * c).map(|_| self.c64()).collect::<Result<_>>()?;
        Array2::from_shape_vec((r, c), data).map_err(|e| Error::Format(e.to_string()))
    }
    fn packet(&mut self) -> Result<(PacketRecord, Array1<C64>)> {
        let user_id = self.usize(u32::MAX as u64, "user id")?;
        let start_time = self.usize(u64::MAX, "start time")?;
        let payload_bits = self.bits()?;
        let symbols = self.cvec()?;
        let h = Array1::from(self.cvec()?);
        Ok((PacketRecord { user_id, payload_bits, symbols, start_time }, h))
    }
}

impl Scenario {
    /// Serializes the scenario. Layout (all integers u64 little-endian, all
    /// reals f64 little-endian, complex values as `re, im`):
    ///
    /// ```text
    /// magic "MUDSCN01" | kind u8 (1 slot, 2 stream)
    /// antennas | duration | packet_len | guard | arrival_rate f64 | noise_var f64
    /// packet count, then per packet:
    ///   user_id | start | bit count + bits packed MSB-first |
    ///   symbol count + symbols | channel length + channel
    /// unit noise: rows | cols | row-major entries
    /// samples:    rows | cols | row-major entries
    /// ```
    ///
    /// Slot scenarios use `duration = packet_len = T`, `guard = 0`,
    /// `arrival_rate = 0`. The stored samples are checked against a
    /// recomputation on read.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut w = Writer(out);
        w.0.write_all(MAGIC)?;
        match self {
            Scenario::Slot(s) => {
                w.0.write_all(&[KIND_SLOT])?;
                w.u64(s.num_antennas() as u64)?;
                w.u64(s.slot_len as u64)?;
                w.u64(s.slot_len as u64)?;
                w.u64(0)?;
                w.f64(0.0)?;
                w.f64(s.noise_var)?;
                w.u64(s.packets.len() as u64)?;
                for (i, p) in s.packets.iter().enumerate() {
                    w.packet(p, &s.channels.column(i).to_owned())?;
                }
                w.matrix(&s.unit_noise)?;
                w.matrix(&s.observation)?;
            }
            Scenario::Stream(s) => {
                w.0.write_all(&[KIND_STREAM])?;
                w.u64(s.num_antennas as u64)?;
                w.u64(s.params.duration as u64)?;
                w.u64(s.params.packet_len as u64)?;
                w.u64(s.params.guard as u64)?;
                w.f64(s.params.arrival_rate)?;
                w.f64(s.noise_var)?;
                w.u64(s.packets.len() as u64)?;
                for (p, h) in s.packets.iter().zip(&s.channels) {
                    w.packet(p, h)?;
                }
                w.matrix(&s.unit_noise)?;
                w.matrix(&s.samples)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut r = Reader(input);
        let mut magic = [0u8; 8];
        r.0.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut kind = [0u8; 1];
        r.0.read_exact(&mut kind)?;
        let m = r.usize(1 << 20, "antennas")?;
        let duration = r.usize(1 << 40, "duration")?;
        let packet_len = r.usize(1 << 40, "packet length")?;
        let guard = r.usize(u64::MAX, "guard")?;
        let arrival_rate = r.f64()?;
        let noise_var = r.f64()?;
        let count = r.usize(1 << 32, "packet count")?;
        let mut packets = Vec::with_capacity(count);
        let mut channels = Vec::with_capacity(count);
        for _ in 0..count {
            let (p, h) = r.packet()?;
            packets.push(p);
            channels.push(h);
        }
        let unit = r.matrix()?;
        let stored = r.matrix()?;
        let scenario = match kind[0] {
            KIND_SLOT => Scenario::Slot(SlotScenario::assemble(duration, m, packets, channels, unit, noise_var)?),
            KIND_STREAM => {
                let params = StreamParams { duration, packet_len, arrival_rate, guard };
                Scenario::Stream(synth_stream(m, params, packets, channels, unit, noise_var)?)
            }
            k => return Err(Error::Format(format!("unknown scenario kind {k}"))),
        };
        let recomputed = match &scenario {
            Scenario::Slot(s) => &s.observation,
            Scenario::Stream(s) => &s.samples,
        };
        if *recomputed != stored {
            return Err(Error::Format("stored samples disagree with the packet table".into()));
        }
        Ok(scenario)
    }
}
