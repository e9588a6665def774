use std::path::Path;
use std::process::{Command, Output};

fn nit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nit")).args(args).output().expect("binary runs")
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn sample_is_bitwise_deterministic_and_replayable_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample", "--height", "96", "--width", "160", "--class", "3", "--seed", "7"];
    let (a, b) = (out_dir(dir.path(), "a"), out_dir(dir.path(), "b"));
    for out in [&a, &b] {
        let o = nit(&[&args[..], &["--out-dir", out]].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let img_a = std::fs::read(Path::new(&a).join("sample.png")).unwrap();
    assert_eq!(img_a, std::fs::read(Path::new(&b).join("sample.png")).unwrap());
    assert!(img_a.starts_with(b"\x89PNG"));

    let manifest = Path::new(&a).join("manifest_sample.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    for key in ["run.config_sha256=", "run.seed=7", "run.version=", "sample.height=96", "sample.class=3"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let c = out_dir(dir.path(), "c");
    let o = nit(&["sample", "--config", manifest.to_str().unwrap(), "--out-dir", &c]);
    assert!(o.status.success());
    assert_eq!(img_a, std::fs::read(Path::new(&c).join("sample.png")).unwrap());
}

#[test]
fn sample_writes_ppm_and_rejects_bad_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "p");
    let o = nit(&["sample", "--height", "32", "--width", "48", "--steps", "3", "--output", "x.ppm", "--out-dir", &out]);
    assert!(o.status.success());
    let bytes = std::fs::read(Path::new(&out).join("x.ppm")).unwrap();
    assert!(bytes.starts_with(b"P6\n48 32\n255\n"));
    assert_eq!(bytes.len(), 13 + 48 * 32 * 3);

    let o = nit(&["sample", "--height", "40", "--width", "48", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not divisible"));
}

#[test]
fn pack_plan_three_size_example() {
    let dir = tempfile::tempdir().unwrap();
    let sizes = dir.path().join("sizes.txt");
    // 50x30, 50x30 and 25x20 latent tokens at 32x downsampling
    std::fs::write(&sizes, "1600x960\n1600x960\n800x640\n").unwrap();
    let out = out_dir(dir.path(), "plan");
    let o = nit(&["pack-plan", sizes.to_str().unwrap(), "--budget", "2048", "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().last().unwrap(), "waste\t0.1455");
    assert!(text.lines().all(|l| l.split('\t').count() == 4 || l.starts_with("waste\t")));
    assert_eq!(text, std::fs::read_to_string(Path::new(&out).join("pack_plan.tsv")).unwrap());

    let o = nit(&["pack-plan", "--set", "pack.sizes=1600x960,1600x960,800x640", "--out-dir", &out]);
    assert!(stdout(&o).ends_with("waste\t0.1455\n"));
}

#[test]
fn train_zero_steps_then_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "run");
    let o = nit(&["train", "--steps", "0", "--set", "data.instances=12", "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = Path::new(&out);
    assert!(run.join("model.nitc").exists());
    assert_eq!(std::fs::read_to_string(run.join("train_log.csv")).unwrap().trim(), "step,loss,waste,tokens");
    let manifest = std::fs::read_to_string(run.join("manifest_train.txt")).unwrap();
    assert!(manifest.contains("train.steps=0") && manifest.contains("model.hidden_dim=64"));

    let o = nit(&["train", "--steps", "3", "--set", "data.instances=12", "--set", "train.tokens_per_step=256", "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("train_log.csv")).unwrap().lines().count(), 4);
    let o = nit(&["stats", "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read(run.join("loss.png")).unwrap().starts_with(b"\x89PNG"));

    let ckpt = run.join("model.nitc");
    let o = nit(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--steps", "2", "--out-dir", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_passes_clean_and_fails_with_a_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "v");
    let o = nit(&["verify", "--scope", "packing,attention,rope,flow", "--out-dir", &out]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("max attention deviation"));
    let csv = std::fs::read_to_string(Path::new(&out).join("verify_report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let o = nit(&["verify", "--scope", "attention", "--inject-fault", "attention-sign", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failing suites: attention"));
}

#[test]
fn unknown_flags_and_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_dir(dir.path(), "u");
    assert!(!nit(&["sample", "--bogus", "1"]).status.success());
    assert!(!nit(&["frobnicate"]).status.success());
    let o = nit(&["train", "--set", "train.nope=1", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = nit(&["verify", "--scope", "nope", "--out-dir", &out]);
    assert_eq!(o.status.code(), Some(2));
}
