//! Modulation alphabets and packet codecs.
//!
//! Two codecs are provided:
//!
//! * the sparse (time-slotted) codec maps a bit-string onto a length-`T-1`
//!   vector with exactly `w` non-zero symbols and then inserts the reference
//!   symbol `x0` somewhere at or before the first non-zero, giving a
//!   length-`T` packet whose first non-zero symbol is always `x0`;
//! * the dense (non-time-slotted) codec maps a bit-string onto `L-1`
//!   Gray-labelled symbols behind a fixed first symbol `x0'`.
//!
//! # Bit-exact layout of the sparse codec
//!
//! Bit-strings are most-significant-bit first. The first
//! `k = floor(log2 C(T-1, w))` bits are read as an unsigned integer `r`,
//! which selects the support `p_1 < p_2 < ... < p_w` (0-based positions in
//! the length-`T-1` vector) in colexicographic order, i.e. the unique support
//! with `r = sum_j C(p_j, j)`. The remaining `w * log2|X|` bits are consumed
//! `log2|X|` at a time, in increasing support position, each group read as a
//! label indexing [`Constellation::points`].
//!
//! For QPSK the label order is `00 -> (+,+)`, `01 -> (-,+)`, `10 -> (+,-)`,
//! `11 -> (-,-)` with components `+-sqrt(2)/2`, which is a Gray labelling.

use std::sync::Arc;

use num_bigint::BigUint;
use num_complex::Complex64;
use num_traits::{One, Zero};
use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance used when matching a complex value against a constellation point.
const POINT_TOL: f64 = 1e-9;

/// A modulation alphabet with its reference symbol and phase-scaling set.
///
/// `points` are stored in label order: the symbol for label `b` is `points[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    points: Vec<Complex64>,
    reference: usize,
    scaling: Vec<Complex64>,
}

impl Constellation {
    /// Builds an alphabet from label-ordered points and the index of the
    /// reference symbol.
    pub fn new(points: Vec<Complex64>, reference: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("constellation must have at least one point".into()));
        }
        if points.iter().any(|p| p.norm() < POINT_TOL) {
            return Err(Error::Domain("constellation may not contain 0".into()));
        }
        if reference >= points.len() {
            return Err(Error::Domain(format!(
                "reference index {reference} out of range for {} points",
                points.len()
            )));
        }
        let scaling = scaling_set(&points);
        Ok(Self { points, reference, scaling })
    }

    /// Gray-labelled QPSK with unit energy; the reference symbol is label `00`.
    pub fn qpsk() -> Self {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        Self::new(
            vec![
                Complex64::new(a, a),
                Complex64::new(-a, a),
                Complex64::new(a, -a),
                Complex64::new(-a, -a),
            ],
            0,
        )
        .expect("qpsk is a valid alphabet")
    }

    /// BPSK: label 0 is +1, label 1 is -1. Reference +1.
    pub fn bpsk() -> Self {
        Self::new(vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)], 0)
            .expect("bpsk is a valid alphabet")
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn reference(&self) -> Complex64 {
        self.points[self.reference]
    }

    pub fn reference_index(&self) -> usize {
        self.reference
    }

    /// All `a` with `a * points == points` as sets.
    pub fn scaling_set(&self) -> &[Complex64] {
        &self.scaling
    }

    /// Number of bits carried by one symbol, if the alphabet size is a power of two.
    pub fn bits_per_symbol(&self) -> Option<usize> {
        let n = self.points.len();
        n.is_power_of_two().then(|| n.trailing_zeros() as usize)
    }

    /// Index of the nearest point; ties go to the lowest index.
    pub fn nearest(&self, x: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (x - p).norm_sqr();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Index of `x` in the alphabet if it is a member (within 1e-9).
    pub fn index_of(&self, x: Complex64) -> Option<usize> {
        self.points.iter().position(|p| (x - p).norm() < POINT_TOL)
    }

    /// Average symbol energy.
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.points.len() as f64
    }

    fn bits_per_symbol_checked(&self) -> Result<usize> {
        self.bits_per_symbol().ok_or_else(|| {
            Error::Domain(format!(
                "alphabet of size {} cannot carry an integral number of bits",
                self.points.len()
            ))
        })
    }
}

/// Bits carried by one symbol drawn from the sparse law: zero with
/// probability `1 - gamma`, otherwise uniform over `alphabet_size` points.
pub fn symbol_entropy(gamma: f64, alphabet_size: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) || gamma.is_nan() {
        return Err(Error::Domain(format!("sparsity {gamma} outside [0, 1]")));
    }
    if alphabet_size < 2 {
        return Err(Error::Domain(format!("alphabet size {alphabet_size} < 2")));
    }
    let k = alphabet_size as f64;
    // 0 log 0 = 0 at both ends.
    let zero_part = if gamma < 1.0 { -(1.0 - gamma) * (1.0 - gamma).log2() } else { 0.0 };
    let nz_part = if gamma > 0.0 { -gamma * (gamma / k).log2() } else { 0.0 };
    Ok(zero_part + nz_part)
}

/// The set of complex scalars `a` with `a * x` in `points` for every `x` in `points`.
///
/// Candidates are the ratios `p / points[0]`; each is kept if it maps the whole
/// set into itself within 1e-12. The identity always comes first.
pub fn scaling_set(points: &[Complex64]) -> Vec<Complex64> {
    let Some(&anchor) = points.first() else {
        return Vec::new();
    };
    let contains = |z: Complex64| points.iter().any(|p| (z - p).norm() <= 1e-12);
    let mut out: Vec<Complex64> = Vec::new();
    for p in points {
        let a = p / anchor;
        if points.iter().all(|&x| contains(a * x)) && !out.iter().any(|b| (b - a).norm() <= 1e-12) {
            out.push(a);
        }
    }
    // Put the identity first; the anchor ratio is exactly 1.
    if let Some(pos) = out.iter().position(|a| (a - Complex64::new(1.0, 0.0)).norm() <= 1e-12) {
        out.swap(0, pos);
    }
    out
}

/// Why a received vector did not decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeFailure {
    /// No non-zero symbol present.
    Empty,
    /// First non-zero symbol is not the reference symbol.
    WrongReference,
    /// A non-zero value is not a constellation point.
    NotInAlphabet,
    /// Wrong number of non-zeros after stripping the reference.
    WrongWeight { expected: usize, got: usize },
    /// Support index not produced by any bit-string.
    IndexOutOfRange,
    /// Vector length disagrees with the codec.
    WrongLength { expected: usize, got: usize },
}

impl std::fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeFailure::Empty => write!(f, "no non-zero symbol"),
            DecodeFailure::WrongReference => write!(f, "first non-zero symbol is not the reference"),
            DecodeFailure::NotInAlphabet => write!(f, "symbol outside the alphabet"),
            DecodeFailure::WrongWeight { expected, got } => {
                write!(f, "expected {expected} non-zeros, found {got}")
            }
            DecodeFailure::IndexOutOfRange => write!(f, "support index out of range"),
            DecodeFailure::WrongLength { expected, got } => {
                write!(f, "expected {expected} symbols, found {got}")
            }
        }
    }
}

impl std::error::Error for DecodeFailure {}

/// Binomial coefficients `C(n, k)` for `n < rows`, `k <= max_k`.
#[derive(Debug)]
struct BinomialTable {
    max_k: usize,
    table: Vec<BigUint>,
}

impl BinomialTable {
    fn new(rows: usize, max_k: usize) -> Self {
        let width = max_k + 1;
        let mut table = vec![BigUint::zero(); rows * width];
        for n in 0..rows {
            table[n * width] = BigUint::one();
            for k in 1..=max_k.min(n) {
                let v = &table[(n - 1) * width + k - 1] + &table[(n - 1) * width + k];
                table[n * width + k] = v;
            }
        }
        Self { max_k, table }
    }

    fn get(&self, n: usize, k: usize) -> &BigUint {
        &self.table[n * (self.max_k + 1) + k]
    }
}

/// Parameters of the sparse codec.
#[derive(Debug, Clone)]
pub struct RslCodecConfig {
    slot_len: usize,
    sparsity: f64,
    num_users: usize,
    nonzero_count: usize,
    bits_per_symbol: usize,
    support_bits: usize,
    binom: Arc<BinomialTable>,
}

impl RslCodecConfig {
    /// Builds the codec for slot length `T`, sparsity `gamma` and `U` users.
    /// `w = round(gamma * (T - 1))`.
    pub fn new(slot_len: usize, sparsity: f64, num_users: usize, alphabet: &Constellation) -> Result<Self> {
        if slot_len < 2 {
            return Err(Error::Domain(format!("slot length {slot_len} < 2")));
        }
        if !(sparsity > 0.0 && sparsity <= 1.0) {
            return Err(Error::Domain(format!("sparsity {sparsity} outside (0, 1]")));
        }
        let bits_per_symbol = alphabet.bits_per_symbol_checked()?;
        let nonzero_count = (sparsity * (slot_len - 1) as f64).round() as usize;
        if nonzero_count < 1 || nonzero_count > slot_len - 1 {
            return Err(Error::Domain(format!(
                "non-zero count {nonzero_count} outside [1, {}]",
                slot_len - 1
            )));
        }
        let binom = BinomialTable::new(slot_len, nonzero_count);
        let support_bits = binom.get(slot_len - 1, nonzero_count).bits() as usize - 1;
        let cfg = Self {
            slot_len,
            sparsity,
            num_users,
            nonzero_count,
            bits_per_symbol,
            support_bits,
            binom: Arc::new(binom),
        };
        if cfg.capacity_bits() < id_bits(num_users) {
            return Err(Error::Domain(format!(
                "capacity {} bits cannot hold a {}-bit user id",
                cfg.capacity_bits(),
                id_bits(num_users)
            )));
        }
        Ok(cfg)
    }

    pub fn slot_len(&self) -> usize {
        self.slot_len
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// `w`, the number of non-zero symbols before the reference is inserted.
    pub fn nonzero_count(&self) -> usize {
        self.nonzero_count
    }

    /// `floor(log2 C(T-1, w))`.
    pub fn support_bits(&self) -> usize {
        self.support_bits
    }

    /// Total bits per packet: support bits plus `w * log2|X|`.
    pub fn capacity_bits(&self) -> usize {
        self.support_bits + self.nonzero_count * self.bits_per_symbol
    }

    /// Colexicographic rank of a sorted support.
    fn rank(&self, support: &[usize]) -> BigUint {
        support
            .iter()
            .enumerate()
            .fold(BigUint::zero(), |acc, (j, &p)| acc + self.binom.get(p, j + 1))
    }

    /// Support (sorted ascending) with the given colexicographic rank.
    fn unrank(&self, mut rank: BigUint) -> Vec<usize> {
        let w = self.nonzero_count;
        let mut support = vec![0usize; w];
        let mut upper = self.slot_len - 1; // positions are < upper
        for j in (1..=w).rev() {
            // largest p < upper with C(p, j) <= rank
            let mut p = upper - 1;
            while self.binom.get(p, j) > &rank {
                p -= 1;
            }
            rank -= self.binom.get(p, j);
            support[j - 1] = p;
            upper = p;
        }
        support
    }
}

/// Number of bits used for a user identity, `ceil(log2 U)`.
pub fn id_bits(num_users: usize) -> usize {
    if num_users <= 1 {
        0
    } else {
        (usize::BITS - (num_users - 1).leading_zeros()) as usize
    }
}

/// Builds a payload whose leading `ceil(log2 U)` bits carry `user_id - 1`
/// (MSB first) followed by `extra` random bits.
pub fn payload_with_id<R: Rng + ?Sized>(user_id: usize, num_users: usize, total_bits: usize, rng: &mut R) -> Vec<bool> {
    let k = id_bits(num_users);
    assert!(user_id >= 1 && user_id <= num_users.max(1), "user id out of range");
    assert!(total_bits >= k, "payload shorter than the id field");
    let id = user_id - 1;
    let mut bits: Vec<bool> = (0..k).map(|i| (id >> (k - 1 - i)) & 1 == 1).collect();
    bits.extend((k..total_bits).map(|_| rng.random::<bool>()));
    bits
}

/// Reads the user id (1-based) from the leading bits of a payload.
pub fn read_user_id(bits: &[bool], num_users: usize) -> Option<usize> {
    let k = id_bits(num_users);
    if bits.len() < k {
        return None;
    }
    let id = bits[..k].iter().fold(0usize, |acc, &b| (acc << 1) | b as usize) + 1;
    (id <= num_users.max(1)).then_some(id)
}

fn bits_to_biguint(bits: &[bool]) -> BigUint {
    bits.iter().fold(BigUint::zero(), |acc, &b| (acc << 1u32) + BigUint::from(b as u8))
}

fn biguint_to_bits(value: &BigUint, width: usize) -> Vec<bool> {
    (0..width).rev().map(|i| value.bit(i as u64)).collect()
}

fn bits_to_label(bits: &[bool]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

fn label_to_bits(label: usize, width: usize, out: &mut Vec<bool>) {
    out.extend((0..width).rev().map(|i| (label >> i) & 1 == 1));
}

/// Sparse packet before reference insertion: exactly `w` non-zeros in `T-1` slots.
pub fn sparse_body(bits: &[bool], cfg: &RslCodecConfig, alphabet: &Constellation) -> Result<Vec<Complex64>> {
    if bits.len() != cfg.capacity_bits() {
        return Err(Error::BitLength { expected: cfg.capacity_bits(), got: bits.len() });
    }
    let bps = cfg.bits_per_symbol;
    let (index_bits, symbol_bits) = bits.split_at(cfg.support_bits);
    let support = cfg.unrank(bits_to_biguint(index_bits));
    let mut body = vec![Complex64::new(0.0, 0.0); cfg.slot_len - 1];
    for (pos, chunk) in support.iter().zip(symbol_bits.chunks(bps)) {
        body[*pos] = alphabet.points()[bits_to_label(chunk)];
    }
    Ok(body)
}

/// Encodes `bits` as a length-`T` sparse packet whose first non-zero is the
/// reference symbol. The insertion position is uniform over `0..=tau`, `tau`
/// being the first non-zero position of the body.
pub fn encode_rsl<R: Rng + ?Sized>(
    bits: &[bool],
    cfg: &RslCodecConfig,
    alphabet: &Constellation,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let mut body = sparse_body(bits, cfg, alphabet)?;
    let tau = body.iter().position(|s| s.norm_sqr() > 0.0).expect("w >= 1");
    let at = rng.random_range(0..=tau);
    body.insert(at, alphabet.reference());
    Ok(body)
}

/// Inverts [`encode_rsl`] on hard-decided symbols.
pub fn decode_rsl(
    symbols: &[Complex64],
    cfg: &RslCodecConfig,
    alphabet: &Constellation,
) -> std::result::Result<Vec<bool>, DecodeFailure> {
    if symbols.len() != cfg.slot_len {
        return Err(DecodeFailure::WrongLength { expected: cfg.slot_len, got: symbols.len() });
    }
    let first = symbols.iter().position(|s| s.norm() >= POINT_TOL).ok_or(DecodeFailure::Empty)?;
    if alphabet.index_of(symbols[first]) != Some(alphabet.reference_index()) {
        return Err(DecodeFailure::WrongReference);
    }
    let mut support = Vec::with_capacity(cfg.nonzero_count);
    let mut labels = Vec::with_capacity(cfg.nonzero_count);
    // Body index: positions after the stripped reference shift down by one;
    // everything before it is zero.
    for (i, s) in symbols.iter().enumerate().skip(first + 1) {
        if s.norm() >= POINT_TOL {
            let label = alphabet.index_of(*s).ok_or(DecodeFailure::NotInAlphabet)?;
            support.push(i - 1);
            labels.push(label);
        }
    }
    if support.len() != cfg.nonzero_count {
        return Err(DecodeFailure::WrongWeight { expected: cfg.nonzero_count, got: support.len() });
    }
    let rank = cfg.rank(&support);
    if rank.bits() as usize > cfg.support_bits {
        return Err(DecodeFailure::IndexOutOfRange);
    }
    let mut bits = biguint_to_bits(&rank, cfg.support_bits);
    for label in labels {
        label_to_bits(label, cfg.bits_per_symbol, &mut bits);
    }
    Ok(bits)
}

/// Capacity of the dense codec: `(L-1) * log2|X'|`.
pub fn ssl_capacity_bits(packet_len: usize, alphabet: &Constellation) -> Result<usize> {
    if packet_len < 1 {
        return Err(Error::Domain("packet length must be >= 1".into()));
    }
    Ok((packet_len - 1) * alphabet.bits_per_symbol_checked()?)
}

/// Dense packet: the reference symbol followed by `L-1` Gray-labelled symbols.
pub fn encode_ssl(bits: &[bool], packet_len: usize, alphabet: &Constellation) -> Result<Vec<Complex64>> {
    let cap = ssl_capacity_bits(packet_len, alphabet)?;
    if bits.len() != cap {
        return Err(Error::BitLength { expected: cap, got: bits.len() });
    }
    let bps = alphabet.bits_per_symbol_checked()?;
    let mut out = Vec::with_capacity(packet_len);
    out.push(alphabet.reference());
    out.extend(bits.chunks(bps).map(|c| alphabet.points()[bits_to_label(c)]));
    Ok(out)
}

/// Inverts [`encode_ssl`] on hard-decided symbols.
pub fn decode_ssl(symbols: &[Complex64], alphabet: &Constellation) -> std::result::Result<Vec<bool>, DecodeFailure> {
    let bps = alphabet.bits_per_symbol().ok_or(DecodeFailure::NotInAlphabet)?;
    let (first, rest) = symbols.split_first().ok_or(DecodeFailure::Empty)?;
    if alphabet.index_of(*first) != Some(alphabet.reference_index()) {
        return Err(DecodeFailure::WrongReference);
    }
    let mut bits = Vec::with_capacity(rest.len() * bps);
    for s in rest {
        let label = alphabet.index_of(*s).ok_or(DecodeFailure::NotInAlphabet)?;
        label_to_bits(label, bps, &mut bits);
    }
    Ok(bits)
}

/// A transmitted packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    /// 1-based user index.
    pub user_id: usize,
    pub payload_bits: Vec<bool>,
    pub symbols: Vec<Complex64>,
    /// Absolute start symbol; 0 for slotted packets.
    pub start_time: usize,
}
