use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molgrad::imaging::{pgm_encode, pgm_read, psnr, synth_dataset, Image, SynthKind};
use molgrad::training::clamp_negative_weights;
use molgrad::{format, ActivationSpec, Layer, Matrix, Network, Vector};

fn molgrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molgrad"))
        .args(args)
        .env_remove("MOLGRAD_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, kind: &str, count: usize, size: usize) -> PathBuf {
    let o = molgrad(&[
        "synth", "--kind", kind, "--count", &count.to_string(), "--size", &size.to_string(), "--seed", "3", "--output", s(dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("manifest.csv")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p
}

const TINY: &str = "[train]\nepochs = 10\nhidden = 96\ntop = 16\ncheckpoint_every = 5\n[verify]\nsamples = 5\npairs = 200\n";

#[test]
fn tiny_training_run_is_certified_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("data"), "blocks", 20, 8);
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = molgrad(&["train", "--config", s(&cfg), "--input", s(&manifest), "--output", s(&out), "--seed", "5"]);
        assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
        out
    };
    let a = run("a");
    for f in ["model.txt", "training.csv", "report.txt", "report.csv", "checkpoints/epoch-00005.txt", "checkpoints/epoch-00010.txt"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let report = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("[nonnegativity]\nstatus      = pass"));
    assert_eq!(std::fs::read_to_string(a.join("training.csv")).unwrap().lines().count(), 11);
    let b = run("b");
    assert_eq!(std::fs::read(a.join("model.txt")).unwrap(), std::fs::read(b.join("model.txt")).unwrap());

    let o = molgrad(&["verify", "--config", s(&cfg), "--model", s(&a.join("model.txt"))]);
    assert!(o.status.success(), "{}", stdout(&o));
    let o = molgrad(&["certify", "--config", s(&cfg), "--model", s(&a.join("model.txt"))]);
    assert!(o.status.success());
}

#[test]
fn missing_dataset_leaves_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = molgrad(&["train", "--input", s(&dir.path().join("nope.csv")), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn corrupted_model_fails_nonnegativity() {
    let dir = tempfile::tempdir().unwrap();
    let net = clamp_negative_weights(Network::random(&[6, 8, 4], ActivationSpec::srelu(0.3).unwrap(), molgrad::network::Init::Signed, 1).unwrap());
    let path = dir.path().join("bad.txt");
    let text = format::to_string(&net);
    // Layer 2's first weight row starts after the header of layer 2.
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let at = lines.iter().position(|l| l.starts_with("layer 2")).unwrap() + 1;
    let mut row: Vec<String> = lines[at].split_whitespace().map(String::from).collect();
    row[1] = "-1.0e-3".into();
    lines[at] = row.join(" ");
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();

    let out = dir.path().join("report");
    let o = molgrad(&["verify", "--model", s(&path), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("[nonnegativity]\nstatus      = FAIL"));
    assert!(std::fs::read_to_string(out.join("report.csv")).unwrap().contains("nonnegativity,FAIL"));
}

#[test]
fn scalar_model_report_has_sprox_section() {
    let dir = tempfile::tempdir().unwrap();
    let l1 = Layer::new(
        Matrix::from_column_slice(3, 1, &[0.8, -0.6, 0.5]),
        Vector::from_column_slice(&[0.1, -0.2, 0.3]),
        ActivationSpec::srelu(0.4).unwrap(),
    )
    .unwrap();
    let l2 = Layer::new(Matrix::from_row_slice(1, 3, &[0.5, 0.4, 0.3]), Vector::zeros(1), ActivationSpec::srelu(0.4).unwrap()).unwrap();
    let net = clamp_negative_weights(Network::new(vec![l1, l2], None).unwrap());
    let path = dir.path().join("toy.txt");
    format::save(&net, &path).unwrap();
    let o = molgrad(&["verify", "--model", s(&path)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("[sprox_witness]\nstatus      = pass"));
}

fn trained_16(dir: &Path) -> PathBuf {
    let manifest = synth(&dir.join("train"), "blocks", 60, 16);
    let cfg = write_config(dir, "[train]\nepochs = 60\nhidden = 512\ntop = 64\n[verify]\nsamples = 3\npairs = 100\n");
    let out = dir.join("model");
    let o = molgrad(&["train", "--config", s(&cfg), "--input", s(&manifest), "--output", s(&out)]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    out.join("model.txt")
}

fn psnr_line(out: &str, label: &str) -> f64 {
    let prefix = format!("psnr {label} ");
    out.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .map(|v| if v == "inf" { f64::INFINITY } else { v.parse().unwrap() })
        .unwrap_or_else(|| panic!("no '{prefix}' in {out}"))
}

#[test]
fn deblurring_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_16(dir.path());
    let clean_dir = dir.path().join("clean");
    synth(&clean_dir, "blocks", 1, 16);
    let clean = clean_dir.join("img-0000.pgm");

    // Identity kernel, no noise, fidelity-dominated weights: the restoration reproduces the input.
    let restored = dir.path().join("id.pgm");
    let o = molgrad(&[
        "deblur", "--model", s(&model), "--input", s(&clean), "--kernel", "identity", "--truth", s(&clean), "--sigma", "0.01",
        "--mu", "10000", "--output", s(&restored),
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let back = pgm_read(&restored).unwrap();
    let orig = pgm_read(&clean).unwrap();
    let worst = back.pixels().iter().zip(orig.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 2.0 / 255.0 + 1e-12, "{worst}");
    assert!(restored.with_extension("trace.csv").exists());

    // Box blur plus noise: restoration beats the degraded image. The small model has L̂ below one, so the
    // default σ would sit at its ceiling; pick a smaller admissible one.
    let degraded = dir.path().join("deg.pgm");
    let o = molgrad(&["degrade", "--input", s(&clean), "--kernel", "box:3", "--noise", "0.01", "--seed", "4", "--output", s(&degraded)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let restored = dir.path().join("box.pgm");
    let trace = dir.path().join("box-trace.csv");
    let o = molgrad(&[
        "deblur", "--model", s(&model), "--input", s(&degraded), "--kernel", "box:3", "--truth", s(&clean), "--sigma", "10",
        "--output", s(&restored), "--trace", s(&trace),
    ]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(psnr_line(&out, "restored") > psnr_line(&out, "degraded"), "{out}");
    assert!(std::fs::read_to_string(&trace).unwrap().starts_with("iter,rel_change,fidelity\n"));

    // σ above the strict bound: rejected in strict mode, warned in relaxed mode.
    let big = "1e9";
    let rejected = dir.path().join("strict.pgm");
    let o = molgrad(&[
        "deblur", "--model", s(&model), "--input", s(&degraded), "--kernel", "box:3", "--sigma", big, "--output", s(&rejected),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigma margin"));
    assert!(!rejected.exists());
    let relaxed = dir.path().join("relaxed.pgm");
    let o = molgrad(&[
        "deblur", "--model", s(&model), "--input", s(&degraded), "--kernel", "box:3", "--sigma", big, "--mode", "relaxed",
        "--max-iter", "50", "--output", s(&relaxed),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: relaxed step sizes"));
}

#[test]
fn denoise_command_writes_image() {
    let dir = tempfile::tempdir().unwrap();
    let net = molgrad::training::warm_start(64, 96, 16, 0).unwrap();
    let model = dir.path().join("m.txt");
    format::save(&net, &model).unwrap();
    let img = &synth_dataset(SynthKind::Blobs { count: 2 }, 1, 8, 1).unwrap()[0];
    let input = dir.path().join("in.pgm");
    std::fs::write(&input, pgm_encode(img)).unwrap();
    let out = dir.path().join("out.pgm");
    let o = molgrad(&["denoise", "--model", s(&model), "--input", s(&input), "--output", s(&out), "--truth", s(&input)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let den: Image = pgm_read(&out).unwrap();
    assert!(psnr(&den, img).unwrap().is_finite());
    let wrong = dir.path().join("wrong.pgm");
    std::fs::write(&wrong, pgm_encode(&Image::constant(4, 4, 0.5))).unwrap();
    let o = molgrad(&["denoise", "--model", s(&model), "--input", s(&wrong), "--output", s(&dir.path().join("x.pgm"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn solver_selftest_cases() {
    let o = molgrad(&["solver-selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("selftest passed"));
    let o = molgrad(&["verify-solver", "--seed", "3"]);
    assert!(o.status.success());

    let o = molgrad(&["solver-selftest", "--tau-scale", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));

    let o = molgrad(&["solver-selftest", "--sigma", "0"]);
    assert!(stdout(&o).contains("iterations 500"), "{}", stdout(&o));
}

#[test]
fn bad_thread_count_and_bad_config() {
    let o = Command::new(env!("CARGO_BIN_EXE_molgrad"))
        .args(["solver-selftest"])
        .env("MOLGRAD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_molgrad"))
        .args(["solver-selftest", "--dim", "4"])
        .env("MOLGRAD_THREADS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[solver]\nmode = 3\n");
    let o = molgrad(&["solver-selftest", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
}
