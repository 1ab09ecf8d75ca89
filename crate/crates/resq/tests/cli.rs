//! End-to-end checks of the `resq` binary: every artifact that leaves the
//! process (clip directories, model manifests, calibration JSON, report CSVs,
//! PGM maps) is produced by one invocation and consumed by another — or
//! re-parsed here through the library — to pin the interchange formats.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use resq::pgm::parse_pgm;
use resq::rtf;
use resq::tensor::Tensor;

// ── Driver helpers ───────────────────────────────────────────────────────────

fn resq(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_resq"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to spawn the resq binary")
}

/// Run and require success, returning stdout.
fn resq_ok(args: &[&str], envs: &[(&str, &str)]) -> String {
    let out = resq(args, envs);
    assert!(
        out.status.success(),
        "resq {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is utf-8")
}

/// Run and require failure, returning stderr.
fn resq_err(args: &[&str]) -> String {
    let out = resq(args, &[]);
    assert!(
        !out.status.success(),
        "resq {:?} unexpectedly succeeded:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    String::from_utf8(out.stderr).expect("stderr is utf-8")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("temp paths are utf-8")
}

/// Generate a small corpus and a matching model; returns (corpus, model.json).
fn fixture(dir: &Path, clips: usize, frames: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let corpus = dir.join("clips");
    let model_dir = dir.join("model");
    resq_ok(
        &[
            "gen-clips",
            "--out", s(&corpus),
            "--clips", &clips.to_string(),
            "--frames", &frames.to_string(),
            "--height", "12",
            "--width", "12",
            "--channels", "2",
            "--motion", "1.0",
            "--noise", "0.01",
            "--seed", "5",
        ],
        &[],
    );
    resq_ok(
        &[
            "build-model",
            "--out", s(&model_dir),
            "--depth", "2",
            "--channels", "2",
            "--width", "3",
            "--kernel", "3",
            "--seed", "9",
        ],
        &[],
    );
    (corpus, model_dir.join("model.json"))
}

/// All regular files under `dir` as (relative path, bytes), sorted.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("under root");
                out.push((
                    rel.to_string_lossy().into_owned(),
                    fs::read(&path).expect("readable file"),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

// ── Pipeline round trip ──────────────────────────────────────────────────────

#[test]
fn pipeline_produces_report_and_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(tmp.path(), 1, 4);
    let calib = tmp.path().join("calib.json");
    resq_ok(
        &[
            "calibrate",
            "--model", s(&model),
            "--clips", s(&corpus),
            "--keyframe-bits", "W8A8",
            "--residual-bits", "W8A4",
            "--period", "2",
            "--samples", "16",
            "--grid", "8",
            "--out", s(&calib),
        ],
        &[],
    );

    let report = tmp.path().join("report.csv");
    let outputs = tmp.path().join("outputs");
    resq_ok(
        &[
            "run",
            "--model", s(&model),
            "--calib", s(&calib),
            "--clip", s(&corpus.join("clip_000")),
            "--period", "2",
            "--mode", "resq-pairwise",
            "--report", s(&report),
            "--dump-outputs", s(&outputs),
        ],
        &[],
    );

    let csv = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "frame_index,is_keyframe,layer,bops,output_mse_vs_fp32,policy_bops"
    );
    // 4 frames x 2 layers, frames outermost.
    assert_eq!(lines.len(), 1 + 4 * 2);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        let frame: usize = cols[0].parse().unwrap();
        assert_eq!(frame, i / 2);
        assert_eq!(cols[1], if frame.is_multiple_of(2) { "true" } else { "false" });
        assert_eq!(cols[2].parse::<usize>().unwrap(), i % 2);
        assert!(cols[3].parse::<u64>().unwrap() > 0, "bops column");
    }

    // Dumped outputs: one rank-3 tensor per frame, [width, H, W].
    for t in 0..4 {
        let out = rtf::read_tensor(outputs.join(format!("output_{t:03}.rtf"))).unwrap();
        assert_eq!(out.shape(), &[3, 12, 12]);
    }

    // A full-precision pass needs no calibration; in frame mode it *is* the
    // fp32 reference, so the reported error is exactly zero. The residual
    // modes rebuild each output as keyframe-plus-residual, so at full
    // precision they sit within float-rounding of the reference but not on it.
    let stdout = resq_ok(
        &[
            "run",
            "--model", s(&model),
            "--clip", s(&corpus.join("clip_000")),
            "--mode", "frame",
            "--full-precision",
        ],
        &[],
    );
    assert!(stdout.contains("mean_mse_vs_fp32=0e0"), "got: {stdout}");
    let stdout = resq_ok(
        &[
            "run",
            "--model", s(&model),
            "--clip", s(&corpus.join("clip_000")),
            "--mode", "resq-pairwise",
            "--full-precision",
        ],
        &[],
    );
    let mse: f64 = stdout
        .split("mean_mse_vs_fp32=")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(mse < 1e-12, "got: {stdout}");

    // Quantized runs without a calibration are refused.
    let err = resq_err(&[
        "run",
        "--model", s(&model),
        "--clip", s(&corpus.join("clip_000")),
    ]);
    assert!(err.contains("--calib"), "got: {err}");
}

// ── Determinism ──────────────────────────────────────────────────────────────

#[test]
fn generated_corpora_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "gen-clips".to_string(),
            "--out".into(), s(out).to_string(),
            "--clips".into(), "2".into(),
            "--frames".into(), "5".into(),
            "--height".into(), "12".into(),
            "--width".into(), "12".into(),
            "--noise".into(), "0.02".into(),
            "--seed".into(), "11".into(),
        ]
    };
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for out in [&a, &b] {
        let argv = args(out);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        resq_ok(&argv, &[]);
    }
    assert_eq!(snapshot(&a), snapshot(&b), "same seed, same bytes");

    let mut argv = args(&c);
    *argv.last_mut().unwrap() = "12".into();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    resq_ok(&argv, &[]);
    assert_ne!(snapshot(&a), snapshot(&c), "a fresh seed changes the frames");
}

#[test]
fn calibration_and_sweeps_ignore_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(tmp.path(), 2, 4);

    let mut calibs = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("calib_{threads}.json"));
        resq_ok(
            &[
                "calibrate",
                "--model", s(&model),
                "--clips", s(&corpus),
                "--keyframe-bits", "W8A8",
                "--residual-bits", "W8A{0,4,8}",
                "--period", "2",
                "--samples", "16",
                "--grid", "8",
                "--out", s(&out),
            ],
            &[("RESQ_THREADS", threads)],
        );
        calibs.push(fs::read(&out).unwrap());
    }
    assert_eq!(calibs[0], calibs[1], "calibration bytes differ across thread counts");

    let mut sweeps = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("sweep_{threads}.csv"));
        resq_ok(
            &[
                "sweep",
                "--model", s(&model),
                "--clips", s(&corpus),
                "--schemes", "W8A8|W8A4,W8A8|W8A{0,4,8}",
                "--modes", "frame,resq-pairwise,resq-dynamic",
                "--periods", "2,4",
                "--samples", "12",
                "--grid", "6",
                "--out", s(&out),
            ],
            &[("RESQ_THREADS", threads)],
        );
        sweeps.push(fs::read_to_string(&out).unwrap());
    }
    assert_eq!(sweeps[0], sweeps[1], "sweep bytes differ across thread counts");

    let lines: Vec<&str> = sweeps[0].lines().collect();
    assert!(
        lines[0].starts_with("mode,scheme,period,amortized_bops,amortized_conv_bops,mean_mse,mse_dt0"),
        "got header: {}",
        lines[0]
    );
    // 2 schemes x {frame, resq-pairwise} x 2 periods, and resq-dynamic only
    // where the residual side carries a pool.
    assert_eq!(lines.len() - 1, 2 * 2 * 2 + 2);
}

// ── Sweep configuration file ─────────────────────────────────────────────────

#[test]
fn sweep_reads_the_json_experiment_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(tmp.path(), 1, 4);
    let out = tmp.path().join("tradeoff.csv");
    let config = tmp.path().join("exp.json");
    fs::write(
        &config,
        serde_json::json!({
            "model": s(&model),
            "clips": s(&corpus),
            "schemes": ["W8A8|W8A4"],
            "modes": ["frame", "resq-pairwise"],
            "periods": [3],
            "samples": 12,
            "grid_points": 6,
            "tau": 3e-4,
            "out": s(&out),
        })
        .to_string(),
    )
    .unwrap();

    resq_ok(&["sweep", "--config", s(&config)], &[]);
    let rows = fs::read_to_string(&out).unwrap().lines().count() - 1;
    assert_eq!(rows, 2, "one row per (scheme, mode, period)");

    // Flags override the file: two periods instead of one.
    resq_ok(&["sweep", "--config", s(&config), "--periods", "2,4"], &[]);
    let rows = fs::read_to_string(&out).unwrap().lines().count() - 1;
    assert_eq!(rows, 4);

    // Unknown keys are configuration errors, not silent no-ops.
    fs::write(&config, r#"{"modle": "x"}"#).unwrap();
    resq_err(&["sweep", "--config", s(&config)]);
}

// ── Dynamic policy artifacts ─────────────────────────────────────────────────

#[test]
fn dynamic_runs_dump_parseable_policy_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(tmp.path(), 1, 4);
    let calib = tmp.path().join("calib.json");
    resq_ok(
        &[
            "calibrate",
            "--model", s(&model),
            "--clips", s(&corpus),
            "--keyframe-bits", "W8A8",
            "--residual-bits", "W8A{0,4,8}",
            "--period", "4",
            "--samples", "16",
            "--grid", "8",
            "--out", s(&calib),
        ],
        &[],
    );

    let report = tmp.path().join("report.csv");
    let maps = tmp.path().join("maps");
    resq_ok(
        &[
            "run",
            "--model", s(&model),
            "--calib", s(&calib),
            "--clip", s(&corpus.join("clip_000")),
            "--period", "4",
            "--mode", "resq-dynamic",
            "--pool", "0,4,8",
            "--tau", "3e-4",
            "--report", s(&report),
            "--dump-policy", s(&maps),
        ],
        &[],
    );

    // Maps exist for residual frames only, parse as plain PGM, and carry
    // bit-widths drawn from the pool with maxval pinned to the top entry.
    assert!(!maps.join("frame000_layer0.pgm").exists(), "keyframes have no map");
    for t in 1..4 {
        for l in 0..2 {
            let text = fs::read_to_string(maps.join(format!("frame{t:03}_layer{l}.pgm"))).unwrap();
            let (h, w, maxval, values) = parse_pgm(&text).unwrap();
            assert_eq!((h, w, maxval), (12, 12, 8));
            assert!(values.iter().all(|v| [0, 4, 8].contains(v)));
        }
    }

    // Residual rows carry the policy evaluation overhead.
    let csv = fs::read_to_string(&report).unwrap();
    let residual_policy: u64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|cols| cols[1] == "false")
        .map(|cols| cols[5].parse::<u64>().unwrap())
        .sum();
    assert!(residual_policy > 0);

    // Guard rails: a wrong --pool assertion and policy dumps outside dynamic
    // mode are both refused.
    resq_err(&[
        "run",
        "--model", s(&model),
        "--calib", s(&calib),
        "--clip", s(&corpus.join("clip_000")),
        "--pool", "2,4,8",
    ]);
    resq_err(&[
        "run",
        "--model", s(&model),
        "--calib", s(&calib),
        "--clip", s(&corpus.join("clip_000")),
        "--mode", "resq-pairwise",
        "--dump-policy", s(&maps),
    ]);

    // The corpus-level variant writes per-clip maps and a summary table.
    let pm_out = tmp.path().join("policy");
    resq_ok(
        &[
            "policy-map",
            "--model", s(&model),
            "--calib", s(&calib),
            "--clips", s(&corpus),
            "--period", "4",
            "--out", s(&pm_out),
        ],
        &[],
    );
    let summary = fs::read_to_string(pm_out.join("summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "dt,mean_index,mean_bits,moving_mean_bits,static_mean_bits"
    );
    assert!(pm_out.join("clip00_frame001_layer0.pgm").exists());
}

// ── Single-tensor clip inputs ────────────────────────────────────────────────

#[test]
fn single_tensor_clips_load_as_stacks() {
    let tmp = tempfile::tempdir().unwrap();
    let model_dir = tmp.path().join("ident");
    resq_ok(
        &["build-model", "--out", s(&model_dir), "--identity", "--channels", "2"],
        &[],
    );
    let model = model_dir.join("model.json");

    let ramp = |n: usize| (0..n).map(|i| i as f32 / 10.0).collect::<Vec<f32>>();
    let stack = tmp.path().join("stack.rtf");
    rtf::write_tensor(&stack, &Tensor::new(vec![3, 2, 8, 8], ramp(3 * 2 * 8 * 8)).unwrap()).unwrap();
    let stdout = resq_ok(
        &["run", "--model", s(&model), "--clip", s(&stack), "--full-precision"],
        &[],
    );
    assert!(stdout.contains("frames=3"), "got: {stdout}");

    let single = tmp.path().join("frame.rtf");
    rtf::write_tensor(&single, &Tensor::new(vec![2, 8, 8], ramp(2 * 8 * 8)).unwrap()).unwrap();
    let stdout = resq_ok(
        &["run", "--model", s(&model), "--clip", s(&single), "--full-precision"],
        &[],
    );
    assert!(stdout.contains("frames=1"), "got: {stdout}");

    let flat = tmp.path().join("flat.rtf");
    rtf::write_tensor(&flat, &Tensor::new(vec![8, 8], ramp(64)).unwrap()).unwrap();
    let err = resq_err(&["run", "--model", s(&model), "--clip", s(&flat), "--full-precision"]);
    assert!(err.contains("rank"), "got: {err}");
}
