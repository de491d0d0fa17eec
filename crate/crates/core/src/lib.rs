//! Blind multiuser detection for grant-free massive-device multiple access.
//!
//! The crate covers both access models:
//!
//! * **time-slotted**: users send sparse packets aligned to a slot; the
//!   receiver factorizes the slot observation `Y = HX + W` with BiG-AMP under
//!   an i.i.d. sparse prior ([`rsl`]);
//! * **non-time-slotted**: users send dense packets at arbitrary symbol
//!   times; the receiver slides an observation window over the stream and
//!   factorizes each window with Turbo-BiG-AMP, which alternates BiG-AMP with
//!   inference on the block-sparse packet structure ([`turbo`], [`ssl`]).
//!
//! Oracle LMMSE and CSI-GAMP comparison receivers live in [`baselines`];
//! experiment orchestration and the CLI live in [`harness`].

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod airsim;
pub mod baselines;
pub mod bigamp;
pub mod codec;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod rsl;
pub mod seed;
pub mod ssl;
pub mod turbo;

pub use error::{Error, Result};

/// Complex baseband sample type used throughout.
pub type C64 = num_complex::Complex64;

/// Dense complex matrix.
pub type CMatrix = ndarray::Array2<C64>;

/// A packet produced by one of the receivers.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredPacket {
    /// 1-based user id read from the payload; `None` unless decoding succeeded.
    pub user_id: Option<usize>,
    /// Decoded payload, or why decoding failed.
    pub payload: std::result::Result<Vec<bool>, codec::DecodeFailure>,
    /// Row of the estimated signal matrix the packet was read from.
    pub row: usize,
    /// Restart index (slotted) or window index (sliding window).
    pub trial: usize,
    /// Absolute start symbol, when the receiver positions packets in time.
    pub start_time: Option<usize>,
}

impl RecoveredPacket {
    pub fn is_decoded(&self) -> bool {
        self.payload.is_ok()
    }
}
