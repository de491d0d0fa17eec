//! Time-slotted receiver: blind factorization of one slot, ambiguity
//! removal through the reference symbol, hard decision and decoding.

use std::collections::HashSet;

use crate::bigamp::{self, BigAmpOptions, EntryPriorH, EntryPriorX, PriorX, XPosterior};
use crate::codec::{self, Constellation, DecodeFailure, RslCodecConfig};
use crate::error::{Error, Result};
use crate::{CMatrix, RecoveredPacket, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct RslDetectorConfig {
    /// Number of active users, assumed known.
    pub num_active: usize,
    pub sparsity: f64,
    /// Posterior means with magnitude below this are set to zero.
    pub zero_threshold: f64,
    /// Channel prior variance (average path loss).
    pub channel_var: f64,
    pub bigamp: BigAmpOptions,
    /// Stop launching new restarts once `num_active` distinct payloads decode.
    /// Rows can decode to a valid but wrong payload, so this can end the
    /// search before every transmitted packet is found.
    pub stop_when_complete: bool,
}

impl RslDetectorConfig {
    pub fn new(num_active: usize, sparsity: f64) -> Self {
        Self {
            num_active,
            sparsity,
            zero_threshold: 0.5,
            channel_var: 1.0,
            bigamp: BigAmpOptions::default(),
            stop_when_complete: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.zero_threshold > 0.0) {
            return Err(Error::Config("zero threshold must be positive".into()));
        }
        if !(0.0 < self.sparsity && self.sparsity < 1.0) {
            return Err(Error::Config(format!("sparsity {} outside (0, 1)", self.sparsity)));
        }
        self.bigamp.validate()
    }
}

/// Keeps posterior means with `|mean| >= eps`, zeroes the rest.
pub fn soft_threshold(mean: &CMatrix, eps: f64) -> CMatrix {
    mean.mapv(|z| if z.norm() >= eps { z } else { C64::new(0.0, 0.0) })
}

/// Scales `row` so its first non-zero entry becomes exactly `x0`.
pub fn phase_correct(row: &[C64], x0: C64) -> std::result::Result<Vec<C64>, DecodeFailure> {
    let tau = row.iter().position(|z| z.norm_sqr() > 0.0).ok_or(DecodeFailure::Empty)?;
    let scale = x0 / row[tau];
    let mut out: Vec<C64> = row.iter().map(|z| z * scale).collect();
    out[tau] = x0;
    Ok(out)
}

/// Maps 0 to 0 and anything else to its nearest constellation point.
pub fn hard_decide(x: C64, alphabet: &Constellation) -> C64 {
    if x.norm_sqr() == 0.0 {
        x
    } else {
        alphabet.points()[alphabet.nearest(x)]
    }
}

/// Threshold, phase-correct, hard-decide and decode one estimated row.
pub fn recover_row(
    mean_row: &[C64],
    eps: f64,
    cfg: &RslCodecConfig,
    alphabet: &Constellation,
) -> std::result::Result<Vec<bool>, DecodeFailure> {
    let thresholded: Vec<C64> =
        mean_row.iter().map(|z| if z.norm() >= eps { *z } else { C64::new(0.0, 0.0) }).collect();
    let corrected = phase_correct(&thresholded, alphabet.reference())?;
    let decided: Vec<C64> = corrected.iter().map(|z| hard_decide(*z, alphabet)).collect();
    codec::decode_rsl(&decided, cfg, alphabet)
}

/// Every row of one BiG-AMP output, decoded or failed.
pub fn recover_rows(
    post: &XPosterior,
    eps: f64,
    cfg: &RslCodecConfig,
    alphabet: &Constellation,
    trial: usize,
) -> Vec<RecoveredPacket> {
    post.mean
        .rows()
        .into_iter()
        .enumerate()
        .map(|(n, row)| {
            let payload = recover_row(&row.to_vec(), eps, cfg, alphabet);
            let user_id = payload.as_ref().ok().and_then(|b| codec::read_user_id(b, cfg.num_users()));
            // A payload whose id field is out of range is not a valid packet.
            let payload = match (payload, user_id) {
                (Ok(_), None) => Err(DecodeFailure::IndexOutOfRange),
                (p, _) => p,
            };
            RecoveredPacket { user_id, payload, row: n, trial, start_time: None }
        })
        .collect()
}

/// Outcome of [`detect_slot_detailed`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotDetection {
    /// Distinct decoded packets, first occurrence kept.
    pub packets: Vec<RecoveredPacket>,
    /// Every row outcome of every trial that ran.
    pub all_rows: Vec<RecoveredPacket>,
    pub trials_run: usize,
    pub max_normalization_error: f64,
    pub saw_nonfinite: bool,
}

/// Runs the slotted receiver on one observation.
pub fn detect_slot(
    y: &CMatrix,
    cfg: &RslDetectorConfig,
    alphabet: &Constellation,
    codec_cfg: &RslCodecConfig,
    sigma2: f64,
) -> Result<Vec<RecoveredPacket>> {
    Ok(detect_slot_detailed(y, cfg, alphabet, codec_cfg, sigma2)?.packets)
}

/// As [`detect_slot`], also returning per-row failures and health counters.
///
/// Restarts run in index order so the early stop is deterministic.
pub fn detect_slot_detailed(
    y: &CMatrix,
    cfg: &RslDetectorConfig,
    alphabet: &Constellation,
    codec_cfg: &RslCodecConfig,
    sigma2: f64,
) -> Result<SlotDetection> {
    cfg.validate()?;
    if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Input("observation contains non-finite values".into()));
    }
    if y.ncols() != codec_cfg.slot_len() {
        return Err(Error::Dimension(format!("slot has {} columns, codec expects {}", y.ncols(), codec_cfg.slot_len())));
    }
    let mut out = SlotDetection::default();
    if cfg.num_active == 0 {
        return Ok(out);
    }
    let prior = EntryPriorX::sparse(cfg.sparsity, alphabet.len())?;
    let prior_x = PriorX::shared(&prior, alphabet, cfg.num_active, y.ncols())?;
    let prior_h = EntryPriorH::new(cfg.channel_var)?;
    let mut seen: HashSet<Vec<bool>> = HashSet::new();
    for r in 0..cfg.bigamp.restarts {
        let res = bigamp::run_single(y, &prior_x, &prior_h, sigma2, &cfg.bigamp, r)?;
        out.trials_run += 1;
        out.max_normalization_error = out.max_normalization_error.max(res.max_normalization_error);
        out.saw_nonfinite |= res.saw_nonfinite;
        for p in recover_rows(&res.x, cfg.zero_threshold, codec_cfg, alphabet, r) {
            if let Ok(bits) = &p.payload {
                if seen.insert(bits.clone()) {
                    out.packets.push(p.clone());
                }
            }
            out.all_rows.push(p);
        }
        if cfg.stop_when_complete && out.packets.len() >= cfg.num_active {
            break;
        }
    }
    Ok(out)
}

/// Hard-decided copy of a posterior mean matrix, for diagnostics.
pub fn hard_decide_matrix(mean: &CMatrix, alphabet: &Constellation) -> CMatrix {
    mean.mapv(|z| hard_decide(z, alphabet))
}

/// Number of transmitted payloads found among `recovered`.
pub fn count_recovered(sent: &[Vec<bool>], recovered: &[RecoveredPacket]) -> usize {
    let got: HashSet<&Vec<bool>> = recovered.iter().filter_map(|p| p.payload.as_ref().ok()).collect();
    sent.iter().filter(|b| got.contains(b)).count()
}
