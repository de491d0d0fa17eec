use std::collections::HashSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_mud::airsim::{draw_channel, ActiveUsers, SlotScenario, SystemConfig};
use sparse_mud::bigamp::{BigAmpOptions, XPosterior};
use sparse_mud::codec::{self, Constellation, DecodeFailure, RslCodecConfig};
use sparse_mud::rsl::*;
use sparse_mud::{CMatrix, C64};

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn packet(cfg: &RslCodecConfig, q: &Constellation, user: usize, r: &mut ChaCha8Rng) -> (Vec<bool>, Vec<C64>) {
    let bits = codec::payload_with_id(user, cfg.num_users(), cfg.capacity_bits(), r);
    let sym = codec::encode_rsl(&bits, cfg, q, r).unwrap();
    (bits, sym)
}

/// Point-mass posterior at the given means, enough for the row pipeline.
fn posterior_at(mean: CMatrix, q: &Constellation) -> XPosterior {
    let (n, t) = mean.dim();
    let atoms: Vec<C64> = std::iter::once(c(0.0, 0.0)).chain(q.points().iter().copied()).collect();
    let mut masses = Array3::zeros((n, t, atoms.len()));
    for ((i, j), z) in mean.indexed_iter() {
        let k = if z.norm() < 0.5 { 0 } else { q.nearest(*z) + 1 };
        masses[[i, j, k]] = 1.0;
    }
    XPosterior { atoms, masses, var: Array2::zeros((n, t)), mean }
}

#[test]
fn soft_threshold_examples() {
    let zero: CMatrix = Array2::zeros((2, 3));
    assert_eq!(soft_threshold(&zero, 0.5), zero);
    let mut r = rng(1);
    let m = Array2::from_shape_fn((5, 7), |_| c(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
    let t = soft_threshold(&m, 0.5);
    for (a, b) in m.iter().zip(t.iter()) {
        let want = if a.norm() >= 0.5 { *a } else { c(0.0, 0.0) };
        assert_eq!(*b, want);
    }
    let edge = ndarray::array![[c(0.3, 0.4)]];
    assert_eq!(soft_threshold(&edge, 0.5)[[0, 0]], c(0.3, 0.4));
}

#[test]
fn phase_correct_examples() {
    let x0 = Constellation::qpsk().reference();
    let (a, b) = (c(0.2, -1.3), c(2.0, 0.5));
    let out = phase_correct(&[c(0.0, 0.0), a, b], x0).unwrap();
    assert_eq!(out[0], c(0.0, 0.0));
    assert_eq!(out[1], x0);
    assert!((out[2] - x0 * b / a).norm() < 1e-15);
    let already = vec![x0, c(0.0, 0.0), c(-0.7, 0.7)];
    assert_eq!(phase_correct(&already, x0).unwrap(), already);
    assert_eq!(phase_correct(&[c(0.0, 0.0); 4], x0), Err(DecodeFailure::Empty));
}

#[test]
fn any_rotation_of_a_packet_is_undone() {
    let q = Constellation::qpsk();
    let cfg = RslCodecConfig::new(64, 0.25, 50, &q).unwrap();
    let mut r = rng(2);
    for _ in 0..20 {
        let (bits, sym) = packet(&cfg, &q, r.random_range(1..=50), &mut r);
        for k in 0..16 {
            let rot = C64::from_polar(0.3 + 2.0 * k as f64 / 16.0, 2.0 * std::f64::consts::PI * k as f64 / 16.0);
            let row: Vec<C64> = sym.iter().map(|s| s * rot).collect();
            let fixed = phase_correct(&row, q.reference()).unwrap();
            let decided: Vec<C64> = fixed.iter().map(|z| hard_decide(*z, &q)).collect();
            assert_eq!(decided, sym);
            assert_eq!(recover_row(&row, 0.25, &cfg, &q).unwrap(), bits);
        }
    }
}

#[test]
fn hard_decision_examples() {
    let q = Constellation::qpsk();
    assert_eq!(hard_decide(c(0.0, 0.0), &q), c(0.0, 0.0));
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert!((hard_decide(c(0.8, 0.6), &q) - c(h, h)).norm() < 1e-15);
    for p in q.points() {
        assert_eq!(hard_decide(*p, &q), *p);
    }
    // The positive real axis is equidistant from the two right-hand points.
    let right: Vec<usize> = (0..4).filter(|&i| q.points()[i].re > 0.0).collect();
    assert_eq!(hard_decide(c(1.0, 0.0), &q), q.points()[right[0]]);
}

#[test]
fn recovered_rows_start_with_the_reference() {
    let q = Constellation::qpsk();
    let cfg = RslCodecConfig::new(32, 0.25, 20, &q).unwrap();
    let mut r = rng(3);
    let mut mean = Array2::zeros((4, 32));
    let mut sent = Vec::new();
    for i in 0..4 {
        let (bits, sym) = packet(&cfg, &q, i + 3, &mut r);
        let rot = q.scaling_set()[i % q.scaling_set().len()];
        for (j, s) in sym.iter().enumerate() {
            mean[[i, j]] = s * rot + c(0.05, -0.03) * if s.norm() > 0.0 { 1.0 } else { 0.0 };
        }
        sent.push(bits);
    }
    let rows = recover_rows(&posterior_at(mean.clone(), &q), 0.5, &cfg, &q, 7);
    assert_eq!(rows.len(), 4);
    for (i, p) in rows.iter().enumerate() {
        assert_eq!(p.row, i);
        assert_eq!(p.trial, 7);
        assert_eq!(p.payload.as_ref().unwrap(), &sent[i]);
        assert_eq!(p.user_id, Some(i + 3));
        let fixed = phase_correct(&soft_threshold(&mean, 0.5).row(i).to_vec(), q.reference()).unwrap();
        let first = fixed.iter().map(|z| hard_decide(*z, &q)).find(|z| z.norm() > 0.0).unwrap();
        assert_eq!(first, q.reference());
    }
    assert_eq!(count_recovered(&sent, &rows), 4);
}

#[test]
fn failed_rows_carry_no_user() {
    let q = Constellation::qpsk();
    let cfg = RslCodecConfig::new(32, 0.25, 20, &q).unwrap();
    let mut mean = Array2::zeros((2, 32));
    mean[[1, 3]] = c(1.0, 0.0);
    let rows = recover_rows(&posterior_at(mean, &q), 0.5, &cfg, &q, 0);
    assert_eq!(rows[0].payload, Err(DecodeFailure::Empty));
    assert!(rows.iter().all(|p| p.payload.is_err() && p.user_id.is_none()));
}

#[test]
fn noiseless_single_user_slot() {
    let q = Constellation::qpsk();
    let cfg = RslCodecConfig::new(32, 0.25, 20, &q).unwrap();
    let mut hits = 0;
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (bits, sym) = packet(&cfg, &q, 5, &mut r);
        let h = draw_channel(8, 1.0, &mut r);
        let y = Array2::from_shape_fn((8, 32), |(i, j)| h[i] * sym[j]);
        let mut det = RslDetectorConfig::new(1, 0.25);
        det.bigamp = BigAmpOptions { seed, ..Default::default() };
        let got = detect_slot(&y, &det, &q, &cfg, 1e-6).unwrap();
        if count_recovered(&[bits], &got) == 1 {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn empty_slot_and_bad_inputs() {
    let q = Constellation::qpsk();
    let cfg = RslCodecConfig::new(32, 0.25, 20, &q).unwrap();
    let y: CMatrix = Array2::zeros((4, 32));
    assert!(detect_slot(&y, &RslDetectorConfig::new(0, 0.25), &q, &cfg, 0.1).unwrap().is_empty());
    let mut bad = y.clone();
    bad[[0, 0]] = c(f64::INFINITY, 0.0);
    assert!(detect_slot(&bad, &RslDetectorConfig::new(1, 0.25), &q, &cfg, 0.1).is_err());
    let short: CMatrix = Array2::zeros((4, 31));
    assert!(detect_slot(&short, &RslDetectorConfig::new(1, 0.25), &q, &cfg, 0.1).is_err());
    let mut det = RslDetectorConfig::new(1, 0.25);
    det.zero_threshold = 0.0;
    assert!(det.validate().is_err());
    det.zero_threshold = 0.5;
    det.bigamp.restarts = 0;
    assert!(det.validate().is_err());
}

#[test]
fn decoded_packets_are_exact_and_distinct() {
    let q = Constellation::qpsk();
    let sys = SystemConfig::new(40, 12, 0.02).unwrap();
    let cfg = RslCodecConfig::new(64, 0.25, 40, &q).unwrap();
    let sc = SlotScenario::generate(&sys, &cfg, &q, ActiveUsers::Fixed(3), &mut rng(4)).unwrap();
    let mut det = RslDetectorConfig::new(3, 0.25);
    det.bigamp.restarts = 6;
    let out = detect_slot_detailed(&sc.observation, &det, &q, &cfg, 0.02).unwrap();
    assert_eq!(out.trials_run, 6);
    assert_eq!(out.all_rows.len(), 18);
    let distinct: HashSet<&Vec<bool>> = out.packets.iter().map(|p| p.payload.as_ref().unwrap()).collect();
    assert_eq!(distinct.len(), out.packets.len());
    assert!(out.max_normalization_error <= 1e-9 && !out.saw_nonfinite);
    assert_eq!(count_recovered(&sc.packets.iter().map(|p| p.payload_bits.clone()).collect::<Vec<_>>(), &out.packets), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn row_order_does_not_change_the_payload_set(seed in 0u64..10_000) {
        let q = Constellation::qpsk();
        let cfg = RslCodecConfig::new(32, 0.25, 20, &q).unwrap();
        let mut r = rng(seed);
        let n = 4;
        let mut mean = Array2::zeros((n, 32));
        for i in 0..n {
            let (_, sym) = packet(&cfg, &q, r.random_range(1..=20), &mut r);
            let noisy = r.random_bool(0.3);
            for (j, s) in sym.iter().enumerate() {
                mean[[i, j]] = if noisy && j % 5 == 0 { c(0.9, -0.1) } else { *s };
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Array2::from_shape_fn((n, 32), |(i, j)| mean[[perm[i], j]]);
        let set = |m: CMatrix| -> HashSet<Vec<bool>> {
            recover_rows(&posterior_at(m, &q), 0.5, &cfg, &q, 0).into_iter().filter_map(|p| p.payload.ok()).collect()
        };
        prop_assert_eq!(set(mean), set(permuted));
    }

    #[test]
    fn rotated_rows_recover_after_correction(seed in 0u64..10_000, theta in 0.0f64..std::f64::consts::TAU, gain in 0.2f64..5.0) {
        let q = Constellation::qpsk();
        let cfg = RslCodecConfig::new(48, 0.25, 30, &q).unwrap();
        let mut r = rng(seed);
        let (bits, sym) = packet(&cfg, &q, 7, &mut r);
        let rot = C64::from_polar(gain, theta);
        let row: Vec<C64> = sym.iter().map(|s| s * rot).collect();
        prop_assert_eq!(recover_row(&row, 0.1 * gain, &cfg, &q).unwrap(), bits);
    }
}
