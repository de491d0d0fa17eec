use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse_mud::airsim::{classify_packet, PacketType, StreamParams, StreamScenario, SystemConfig};
use sparse_mud::bigamp::XPosterior;
use sparse_mud::codec::{self, Constellation};
use sparse_mud::ssl::*;
use sparse_mud::{RecoveredPacket, C64};

fn posterior(p1: &Array2<f64>, mean: Array2<C64>) -> XPosterior {
    let q = Constellation::qpsk();
    let (n, t) = p1.dim();
    let mut atoms = vec![C64::new(0.0, 0.0)];
    atoms.extend_from_slice(q.points());
    let mut masses = Array3::zeros((n, t, 5));
    for ((r, c), p) in p1.indexed_iter() {
        masses[[r, c, 0]] = 1.0 - p;
        for k in 1..5 {
            masses[[r, c, k]] = p / 4.0;
        }
    }
    XPosterior { atoms, masses, mean, var: Array2::zeros((n, t)) }
}

/// Argmax over offsets of the direct product, smallest offset on ties.
fn brute_position(p1: &[f64], l: usize) -> (i64, Vec<f64>) {
    let t = p1.len() as i64;
    let w: Vec<f64> = (-(l as i64) + 1..t)
        .map(|dt| {
            (0..t)
                .map(|i| if dt <= i && i < dt + l as i64 { p1[i as usize] } else { 1.0 - p1[i as usize] })
                .product()
        })
        .collect();
    let mut best = 0;
    for (j, x) in w.iter().enumerate() {
        if *x > w[best] {
            best = j;
        }
    }
    (best as i64 - l as i64 + 1, w)
}

#[test]
fn positioning_examples() {
    let zeros = |t| Array2::zeros((1, t));
    let p = posterior(&ndarray::array![[0.0, 0.0, 1.0, 1.0]], zeros(4));
    assert_eq!(position_rows(&p, 2, 4).unwrap(), vec![PositionedRow { row: 0, offset: 2, is_type1: true }]);

    let p = posterior(&ndarray::array![[1.0, 1.0, 1.0, 1.0, 1.0]], zeros(5));
    assert_eq!(position_rows(&p, 5, 5).unwrap()[0], PositionedRow { row: 0, offset: 0, is_type1: true });

    let p = posterior(&ndarray::array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]], zeros(6));
    let r = position_rows(&p, 3, 6).unwrap()[0];
    assert_eq!(r.offset, -2);
    assert!(!r.is_type1);
}

#[test]
fn positioning_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for t in 1..=10usize {
        for l in 1..=t {
            let p1 = Array2::from_shape_fn((20, t), |_| rng.random::<f64>());
            let rows = position_rows(&posterior(&p1, Array2::zeros((20, t))), l, t).unwrap();
            for (n, r) in rows.iter().enumerate() {
                let (_, w) = brute_position(&p1.row(n).to_vec(), l);
                let total: f64 = w.iter().sum();
                let max = w.iter().cloned().fold(0.0, f64::max);
                let chosen = w[(r.offset + l as i64 - 1) as usize];
                worst = worst.max((max - chosen) / total);
                assert_eq!(r.is_type1, 0 <= r.offset && r.offset <= (t - l) as i64);
            }
        }
    }
    assert!(worst < 1e-9, "chosen offset short of the maximum by {worst}");
}

#[test]
fn ties_go_to_smallest_offset() {
    let p = posterior(&Array2::from_elem((1, 6), 0.5), Array2::zeros((1, 6)));
    assert_eq!(position_rows(&p, 2, 6).unwrap()[0].offset, -1);
}

fn packet(rng: &mut ChaCha8Rng, l: usize) -> (Vec<bool>, Vec<C64>) {
    let q = Constellation::qpsk();
    let bits: Vec<bool> = (0..codec::ssl_capacity_bits(l, &q).unwrap()).map(|_| rng.random()).collect();
    let sym = codec::encode_ssl(&bits, l, &q).unwrap();
    (bits, sym)
}

#[test]
fn rotated_means_recover_exactly() {
    let q = Constellation::qpsk();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (l, t, off) = (8, 16, 5);
    let (bits, sym) = packet(&mut rng, l);
    for k in 0..16 {
        let rot = C64::from_polar(0.3 + k as f64 * 0.1, k as f64 * std::f64::consts::PI / 8.0);
        let mut mean = Array2::zeros((1, t));
        for (i, s) in sym.iter().enumerate() {
            mean[[0, off + i]] = s * rot;
        }
        let p1 = mean.mapv(|z: C64| if z.norm() > 0.0 { 1.0 } else { 0.0 });
        let post = posterior(&p1, mean);
        let rows = position_rows(&post, l, t).unwrap();
        assert_eq!(rows[0].offset, off as i64);
        let got = recover_type1(&post, &rows, l, &q, 100, 2, None);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload.as_ref().unwrap(), &bits);
        assert_eq!(got[0].start_time, Some(100 + off));
        assert_eq!(got[0].trial, 2);
    }
}

#[test]
fn identity_normalization_and_corruption() {
    let q = Constellation::qpsk();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (l, t) = (6, 6);
    let (bits, sym) = packet(&mut rng, l);
    let mean = Array2::from_shape_vec((1, t), sym.clone()).unwrap();
    let post = posterior(&Array2::ones((1, t)), mean.clone());
    let rows = [PositionedRow { row: 0, offset: 0, is_type1: true }];
    assert_eq!(recover_type1(&post, &rows, l, &q, 0, 0, None)[0].payload.as_ref().unwrap(), &bits);

    // Small perturbation keeps the decision, a sign flip changes the payload.
    let mut noisy = mean.clone();
    noisy[[0, 3]] += C64::new(0.2, -0.1);
    let post = posterior(&Array2::ones((1, t)), noisy);
    assert_eq!(recover_type1(&post, &rows, l, &q, 0, 0, None)[0].payload.as_ref().unwrap(), &bits);
    let mut flipped = mean.clone();
    flipped[[0, 3]] = -flipped[[0, 3]];
    let post = posterior(&Array2::ones((1, t)), flipped);
    let got = recover_type1(&post, &rows, l, &q, 0, 0, None);
    assert_ne!(got[0].payload.as_ref().unwrap(), &bits);

    let mut dead = mean;
    dead[[0, 0]] = C64::new(1e-12, 0.0);
    let post = posterior(&Array2::ones((1, t)), dead);
    assert!(recover_type1(&post, &rows, l, &q, 0, 0, None)[0].payload.is_err());
}

#[test]
fn every_start_is_type1_somewhere() {
    for (tp, l) in [(256usize, 64usize), (128, 32), (32, 8), (10, 3)] {
        for step in 1..tp - l {
            let sched = WindowSchedule::new(tp, step, l).unwrap();
            let duration = 4 * tp + step;
            let starts = sched.starts(duration);
            for s in 0..=duration - l {
                let hit = starts.iter().any(|&t0| {
                    classify_packet(s as i64, t0 as i64, tp as i64, l as i64) == PacketType::TypeI
                });
                assert!(hit, "T' {tp}, L {l}, step {step}, start {s}");
            }
        }
    }
}

fn found(start: usize, bits: Vec<bool>, window: usize) -> (usize, RecoveredPacket) {
    (window, RecoveredPacket { user_id: None, payload: Ok(bits), row: 0, trial: 0, start_time: Some(start) })
}

#[test]
fn dedup_keeps_most_interior_copy() {
    let sched = WindowSchedule::new(16, 4, 4).unwrap();
    let a = vec![true, false];
    let list = vec![found(10, a.clone(), 0), found(10, a.clone(), 4), found(10, a.clone(), 8), found(11, a.clone(), 8)];
    let out = dedup(list, &sched);
    assert_eq!(out.len(), 2);
    // Edge distances of start 10: window 0 (10, 2), window 4 (6, 6), window 8 (2, 10).
    assert_eq!(out[0].0, 4);
    let list = vec![found(10, a.clone(), 0), found(10, a.clone(), 6)];
    assert_eq!(dedup(list, &sched)[0].0, 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn dedup_is_idempotent(entries in prop::collection::vec((0usize..6, 0usize..3, 0usize..4), 0..20)) {
        let sched = WindowSchedule::new(16, 4, 4).unwrap();
        let list: Vec<(usize, RecoveredPacket)> = entries
            .into_iter()
            .map(|(s, b, w)| found(4 * w + s, vec![b & 1 == 1, b & 2 == 2], 4 * w))
            .collect();
        let once = dedup(list, &sched);
        let twice = dedup(once.clone(), &sched);
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn empty_stream_gives_nothing() {
    let q = Constellation::qpsk();
    let sys = SystemConfig::new(10, 4, 0.1).unwrap();
    let params = StreamParams { duration: 64, packet_len: 8, arrival_rate: 0.0, guard: 8 };
    let sc = StreamScenario::generate(&sys, params, &q, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let sched = WindowSchedule::new(32, 8, 8).unwrap();
    let d = sliding_detect(&sc, &sched, 0.1, &q, &SslOptions::default()).unwrap();
    assert!(d.packets.is_empty());
    assert!(d.windows.iter().all(|w| w.active == 0 && w.rows == 0));
}

#[test]
fn one_packet_is_reported_once() {
    let q = Constellation::qpsk();
    let (m, l, tp, duration) = (8usize, 8usize, 32usize, 96usize);
    let sched = WindowSchedule::new(tp, 8, l).unwrap();
    let mut exact = 0;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let start = rng.random_range(0..=duration - l);
        let user = rng.random_range(1..=10);
        let bits = codec::payload_with_id(user, 10, codec::ssl_capacity_bits(l, &q).unwrap(), &mut rng);
        let symbols = codec::encode_ssl(&bits, l, &q).unwrap();
        let h = sparse_mud::airsim::draw_channel(m, 1.0, &mut rng);
        let w0 = sparse_mud::airsim::unit_noise(m, duration, &mut rng);
        let params = StreamParams { duration, packet_len: l, arrival_rate: 1e-3, guard: l };
        let rec = codec::PacketRecord { user_id: user, payload_bits: bits.clone(), symbols, start_time: start };
        let sc = sparse_mud::airsim::synth_stream(m, params, vec![rec], vec![h], w0, 1e-4).unwrap();
        let opts = SslOptions { num_users: Some(10), ..SslOptions::default() };
        let d = sliding_detect(&sc, &sched, 1e-4, &q, &opts).unwrap();
        let hits: Vec<&RecoveredPacket> = d.packets.iter().filter(|p| p.payload.as_ref().ok() == Some(&bits)).collect();
        if hits.len() == 1 && hits[0].start_time == Some(start) && hits[0].user_id == Some(user) {
            exact += 1;
        }
    }
    assert!(exact >= 19, "{exact}/20 placements");
}

#[test]
fn window_log_is_json_lines() {
    let log = WindowLog {
        window: 3,
        start: 96,
        active: 2,
        rows: 2,
        positioned: vec![PositionedRow { row: 0, offset: 4, is_type1: true }],
        type1_rows: 1,
        decoded: 1,
        duplicate_rows: 0,
        turbo_rounds: 5,
        degenerate_rows: 0,
        residual: 0.5,
        max_normalization_error: 0.0,
    };
    let mut buf = Vec::new();
    write_window_log(&[log.clone(), log], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["start"], 96);
    assert_eq!(v["positioned"][0]["offset"], 4);
}
