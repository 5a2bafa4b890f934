use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sepcount(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sepcount"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small corpus and config shared by the end-to-end tests.
fn small_setup(dir: &Path) -> String {
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        r#"
preset = "toy"
[data]
train = 2
valid = 1
test = 2
[model]
conv_channels = 8
bottleneck = 8
blocks_per_repeat = 2
repeats = 1
se_reduction = 4
embed_dim = 6
[train]
epochs = 2
batch_size = 2
regime = "two-and-three"
"#,
    )
    .unwrap();
    cfg.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_flag() {
    let o = sepcount(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for flag in ["--config", "--seed", "--preset"] {
        assert!(text.contains(flag), "{flag}");
    }
    let sep = stdout(&sepcount(&["separate", "--help"]));
    for flag in ["--checkpoint", "--num-speakers", "--count-mode", "--out"] {
        assert!(sep.contains(flag), "{flag}");
    }
    assert!(sep.contains("oracle") && sep.contains("gde") && sep.contains("rank"));
}

#[test]
fn generate_is_deterministic_and_creates_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_setup(tmp.path());
    let a = tmp.path().join("nested/a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = sepcount(&["--config", &cfg, "--seed", "7", "generate", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ma = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(
        fs::read(a.join("test/test_c3_00001_mix.wav")).unwrap(),
        fs::read(b.join("test/test_c3_00001_mix.wav")).unwrap()
    );
}

#[test]
fn capacity_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = sepcount(&["--preset", "toy", "generate", "--counts", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("capacity"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 1\n").unwrap();
    let o = sepcount(&["--config", bad.to_str().unwrap(), "selfcheck"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("epochz"));

    let o = sepcount(&["selfcheck", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn distinct_exit_codes_for_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let garbage = tmp.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let wav = tmp.path().join("empty.wav");
    fs::write(&wav, b"").unwrap();
    let o = sepcount(&["count", wav.to_str().unwrap(), "--checkpoint", garbage.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    let missing = tmp.path().join("missing.ckpt");
    let o = sepcount(&["count", wav.to_str().unwrap(), "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_count_separate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_setup(tmp.path());
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let d = data.to_str().unwrap();
    assert!(sepcount(&["--config", &cfg, "generate", "--out", d]).status.success());
    let o = sepcount(&["--config", &cfg, "train", "--data", d, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch    2"));
    let ckpt = run.join("best.ckpt");
    let ck = ckpt.to_str().unwrap();
    for f in ["last.ckpt", "loss_curve.csv"] {
        assert!(run.join(f).exists());
    }

    // A bad WAV with a good checkpoint fails with the WAV code.
    let bad = tmp.path().join("bad.wav");
    fs::write(&bad, b"RIFF").unwrap();
    let o = sepcount(&["count", bad.to_str().unwrap(), "--checkpoint", ck]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));

    let mix = data.join("test/test_c3_00000_mix.wav");
    let o = sepcount(&["--config", &cfg, "count", mix.to_str().unwrap(), "--checkpoint", ck]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("estimated speakers (GDE)"));
    assert!(text.contains("rank baseline"));
    assert!(text.contains("radius"));

    let sep_dir = tmp.path().join("sep");
    let o = sepcount(&[
        "separate",
        mix.to_str().unwrap(),
        "--checkpoint",
        ck,
        "--num-speakers",
        "2",
        "--out",
        sep_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(sep_dir.join("test_c3_00000_mix_src1.wav").exists());
    assert!(sep_dir.join("test_c3_00000_mix_src2.wav").exists());
    assert!(!sep_dir.join("test_c3_00000_mix_src3.wav").exists());

    let rep = tmp.path().join("rep");
    let args = [
        "--config",
        &cfg,
        "evaluate",
        "--checkpoint",
        ck,
        "--data",
        d,
        "--count-mode",
        "oracle",
        "--out",
        rep.to_str().unwrap(),
    ];
    let a = sepcount(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("Counting accuracy"));
    assert!(stdout(&a).contains("GDE") && stdout(&a).contains("Rank"));
    let first = fs::read(rep.join("report.csv")).unwrap();
    let b = sepcount(&args);
    assert!(b.status.success());
    assert_eq!(first, fs::read(rep.join("report.csv")).unwrap());
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn benchmark_prints_table() {
    let o = sepcount(&["benchmark", "--trials", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("calibrated"));
    assert!(text.contains("GDE") && text.contains("Rank"));
}
