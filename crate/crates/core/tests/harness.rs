use std::fs;
use std::process::{Command, Output};

use sparse_mud::airsim::Scenario;
use sparse_mud::harness::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparse-mud"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn entropy_bits(gamma: f64) -> f64 {
    let q = gamma / 4.0;
    -(1.0 - gamma) * (1.0 - gamma).log2() - 4.0 * q * q.log2()
}

/// A slotted configuration small enough to sweep in a test.
fn tiny_rsl() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Desk, Scheme::Rsl);
    cfg.apply_text(TINY_RSL).unwrap();
    cfg
}

const TINY_RSL: &str = "num_antennas = 8\nslot_len = 32\nnum_active = 2\npackets = 6\nsnr_db = 10, 25\nrestarts = 3\nmax_iters = 60\n";

#[test]
fn throughput_formula() {
    let v = throughput(40, 256, 0.25, 200).unwrap();
    assert!((v - 50.94).abs() < 0.01, "{v}");
    let h = entropy_bits(0.25);
    let direct = 40.0 * ((255.0 * h).floor() - 8.0) / 256.0;
    assert!((v - direct).abs() < 1e-9);
    assert_eq!(throughput(0, 256, 0.25, 200).unwrap(), 0.0);
    for (n, t, g, u) in [(8, 128, 0.1, 200), (3, 64, 0.5, 17), (12, 100, 0.33, 1024)] {
        let h = entropy_bits(g);
        let want = n as f64 * (((t - 1) as f64 * h).floor() - (u as f64).log2().ceil()) / t as f64;
        assert!((throughput(n, t, g, u).unwrap() - want).abs() < 1e-9);
    }
    assert!(throughput(4, 0, 0.25, 200).is_err());
}

#[test]
fn per_and_standard_error() {
    assert_eq!(per_estimate(0, 0), (0.0, 0.0));
    let (p, se) = per_estimate(200, 190);
    assert!((p - 0.05).abs() < 1e-15);
    assert!((se - (0.05f64 * 0.95 / 200.0).sqrt()).abs() < 1e-15);
    assert_eq!(per_estimate(10, 10), (0.0, 0.0));
}

#[test]
fn config_text_parsing() {
    let mut cfg = ExperimentConfig::preset(Preset::Desk, Scheme::Rsl);
    cfg.apply_text("# comment\n\nnum_antennas = 12  # trailing\nsnr_db = 1, 2.5,3\nscheme = csi-gamp\n").unwrap();
    assert_eq!(cfg.num_antennas, 12);
    assert_eq!(cfg.snr_db, vec![1.0, 2.5, 3.0]);
    assert_eq!(cfg.scheme, Scheme::CsiGamp);
    let err = cfg.apply_text("num_antennas = 4\nbogus = 1\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    assert!(cfg.apply_text("packets = many").is_err());
    assert!(cfg.apply_text("packets 5").is_err());
    assert!(cfg.set("scheme", "magic").is_err());
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn config_validation() {
    let mut cfg = tiny_rsl();
    assert!(cfg.validate().is_ok());
    cfg.packets = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_rsl();
    cfg.snr_db.clear();
    assert!(cfg.validate().is_err());
    let mut cfg = ExperimentConfig::preset(Preset::Desk, Scheme::Ssl);
    assert!(cfg.validate().is_ok());
    cfg.window_step = cfg.window_len;
    assert!(cfg.validate().is_err());
    for p in [Preset::Desk, Preset::Paper] {
        for s in [Scheme::Rsl, Scheme::Ssl, Scheme::OracleLmmse, Scheme::CsiGamp] {
            assert!(ExperimentConfig::preset(p, s).validate().is_ok());
        }
    }
}

#[test]
fn csv_rows_match_the_header() {
    let res = per_sweep(&tiny_rsl(), false).unwrap();
    let mut buf = Vec::new();
    write_csv(&res.rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header, CSV_HEADER);
    let width = header.split(',').count();
    for (line, row) in lines.zip(&res.rows) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), width);
        assert_eq!(cells[0], "rsl");
        assert_eq!(cells[3], "", "lambda is empty for slotted rows");
        assert_eq!(cells[15], "1");
        assert!((0.0..=1.0).contains(&row.per));
        assert_eq!(row.packets_sent, 6);
        assert_eq!(row.wall_seconds, 0.0);
    }
    assert!(res.rows.windows(2).all(|w| w[0].snr_db < w[1].snr_db));
    assert!(res.health.max_normalization_error <= 1e-9 && !res.health.saw_nonfinite);
}

#[test]
fn schemes_share_scenarios_under_one_seed() {
    let a = ExperimentConfig::preset(Preset::Desk, Scheme::Ssl);
    let mut b = ExperimentConfig::preset(Preset::Desk, Scheme::OracleLmmse);
    b.extra_rows = 3;
    for j in 0..3 {
        assert_eq!(stream_scenario(&a, j, 0.5).unwrap(), stream_scenario(&b, j, 0.5).unwrap());
    }
    let mut c = a.clone();
    c.seed = 2;
    assert_ne!(stream_scenario(&a, 0, 0.5).unwrap(), stream_scenario(&c, 0, 0.5).unwrap());
    // Noise levels share one realization.
    let lo = slot_scenario(&tiny_rsl(), 1, 0.01).unwrap();
    let hi = slot_scenario(&tiny_rsl(), 1, 0.5).unwrap();
    assert_eq!(lo.signals, hi.signals);
    assert_eq!(lo.channels, hi.channels);
    assert_eq!(lo.unit_noise, hi.unit_noise);
}

#[test]
fn phase_transition_small_grid() {
    let mut cfg = tiny_rsl();
    cfg.apply_text("gammas = 0.15, 0.6\nmax_active = 4\nsnr_db = 25\nper_target = 0.2\n").unwrap();
    let pts = phase_transition(&cfg).unwrap();
    assert_eq!(pts.len(), 2);
    assert!(pts[0].max_active >= pts[1].max_active, "{pts:?}");
    for p in &pts {
        assert!((p.throughput - throughput(p.max_active, 32, p.gamma, cfg.num_users).unwrap()).abs() < 1e-12);
    }
    cfg.per_target = 1.0;
    assert!(phase_transition(&cfg).is_err());
}

#[test]
fn cli_without_subcommand_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn cli_missing_config_is_a_config_error() {
    let out = run(&["rsl-sweep", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cannot read config"));
    assert!(run(&["rsl-sweep", "--scale", "galactic"]).status.code() == Some(2));
    assert!(run(&["ssl-sweep", "--scheme", "rsl"]).status.code() == Some(2));
}

#[test]
fn cli_unwritable_output_is_a_runtime_error() {
    let out = run(&["throughput-curve", "--out", "/definitely/not/here/out.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_throughput_curve_at_paper_scale() {
    let out = run(&["throughput-curve", "--scale", "paper"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("gamma,entropy_bits,throughput"));
    let row = text.lines().find(|l| l.starts_with("0.25,")).unwrap();
    let v: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 50.94).abs() < 0.01);
}

#[test]
fn cli_sweep_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY_RSL).unwrap();
    let cfg = cfg.to_str().unwrap();
    let a = run(&["rsl-sweep", "--config", cfg, "--seed", "9"]);
    let b = run(&["rsl-sweep", "--config", cfg, "--seed", "9", "--threads", "2"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",9")));
}

#[test]
fn replay_reproduces_the_sweep_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("one.cfg");
    // One slot at one SNR, so the sweep and the replay see the same scenario.
    fs::write(&cfg_path, format!("{TINY_RSL}packets = 2\nsnr_db = 18\n")).unwrap();
    let cfg_s = cfg_path.to_str().unwrap();
    let scen = dir.path().join("slot.bin");
    let out = run(&["synth", "--config", cfg_s, "--out", scen.to_str().unwrap()]);
    assert!(out.status.success());

    let sweep = String::from_utf8(run(&["rsl-sweep", "--config", cfg_s]).stdout).unwrap();
    let r1 = run(&["replay", "--config", cfg_s, "--scenario", scen.to_str().unwrap()]);
    let r2 = run(&["replay", "--config", cfg_s, "--scenario", scen.to_str().unwrap()]);
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    assert_eq!(r1.stdout, r2.stdout);
    let replayed = String::from_utf8(r1.stdout).unwrap();
    let cols = |s: &str| s.lines().nth(1).unwrap().split(',').map(str::to_owned).collect::<Vec<_>>();
    let (a, b) = (cols(&sweep), cols(&replayed));
    // Counts and PER agree; the SNR column is recomputed from the stored noise level.
    assert_eq!(a[10..14], b[10..14]);
    assert!((a[9].parse::<f64>().unwrap() - b[9].parse::<f64>().unwrap()).abs() < 1e-9);

    let mut cfg = tiny_rsl();
    cfg.apply_text("packets = 2\nsnr_db = 18\n").unwrap();
    let sc = Scenario::read_from(&mut fs::File::open(&scen).unwrap()).unwrap();
    assert_eq!(replay(&cfg, &sc).unwrap().to_csv(), replayed.lines().nth(1).unwrap());

    let mut bad = fs::read(&scen).unwrap();
    bad.truncate(bad.len() / 2);
    let broken = dir.path().join("broken.bin");
    fs::write(&broken, bad).unwrap();
    assert_eq!(run(&["replay", "--config", cfg_s, "--scenario", broken.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(run(&["replay", "--scenario", "/no/such/file"]).status.code(), Some(2));
    let stream_cfg = ExperimentConfig::preset(Preset::Desk, Scheme::Ssl);
    assert!(replay(&stream_cfg, &sc).is_err());
}
