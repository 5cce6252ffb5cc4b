//! End-to-end runs of the `casp` binary: dataset generation, training,
//! prediction, extraction, evaluation, and rendering, plus exit codes and
//! seed handling.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn casp() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_casp"));
    c.env_remove("CASP_SEED");
    c.env("RUST_LOG", "warn");
    c
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed ({:?}):\n{}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "\
# miniature network for command-line round trips
pyramid_levels = 2
channels = 4, 8
dilations = 1, 2
gabor_orientations = 2
mode = single_target
m = 2
n = 4
u = 32
v = 16
batch_size = 2
lr = 0.001
max_steps = 2
save_interval = 1
augment = off
seed = 5
",
    )
    .unwrap();
    path
}

fn gen_scenes(dir: &Path, count: usize, seed: u64) -> PathBuf {
    let out = casp()
        .args(["scenegen", "--kinds", "straight", "--seed"])
        .arg(seed.to_string())
        .arg("--count")
        .arg(count.to_string())
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    ok(&out);
    dir.join("manifest.json")
}

#[test]
fn scenegen_is_deterministic_across_invocations() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out = casp()
        .args(["scenegen", "--kinds", "straight,turn", "--count", "4", "--seed", "9"])
        .arg("--out")
        .arg(&a)
        .output()
        .unwrap();
    let stdout = ok(&out);
    assert!(stdout.contains("manifest"), "stdout: {stdout}");
    let out = casp()
        .args(["scenegen", "--kinds", "straight,turn", "--count", "4", "--seed", "9"])
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    ok(&out);
    for name in ["manifest.json", "scene_0000.json", "scene_0003.json"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn exit_codes_distinguish_input_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();

    // Unknown scenario kind: bad input.
    let out = casp()
        .args(["scenegen", "--kinds", "wormhole", "--count", "1"])
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unknown configuration key: configuration error.
    let bad_conf = tmp.path().join("bad.conf");
    std::fs::write(&bad_conf, "warp_factor = 9\n").unwrap();
    let manifest = gen_scenes(&tmp.path().join("scenes"), 1, 0);
    let out = casp()
        .args(["train", "--config"])
        .arg(&bad_conf)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Missing scene file: bad input.
    let out = casp()
        .args(["predict", "--ckpt", "/nonexistent.ckpt", "--scene", "/nonexistent.json"])
        .arg("--out")
        .arg(tmp.path().join("p.grid"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Train without any data source: bad input.
    let out = casp()
        .args(["train", "--out"])
        .arg(tmp.path().join("run2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Malformed seed override: bad input.
    let conf = tiny_config(tmp.path());
    let out = casp()
        .env("CASP_SEED", "not-a-number")
        .args(["train", "--config"])
        .arg(&conf)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(tmp.path().join("run3"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CASP_SEED"));
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = gen_scenes(&tmp.path().join("scenes"), 4, 7);
    let conf = tiny_config(tmp.path());

    // Train twice with the same explicit seed: byte-identical outputs.
    for run in ["run_a", "run_b"] {
        let out = casp()
            .env("CASP_SEED", "123")
            .args(["train", "--config"])
            .arg(&conf)
            .arg("--data")
            .arg(&manifest)
            .arg("--out")
            .arg(tmp.path().join(run))
            .output()
            .unwrap();
        let stdout = ok(&out);
        assert!(stdout.contains("trained to step 2"), "stdout: {stdout}");
    }
    let ckpt = tmp.path().join("run_a/model.ckpt");
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(tmp.path().join("run_b/model.ckpt")).unwrap(),
        "training is not reproducible"
    );
    let log = std::fs::read_to_string(tmp.path().join("run_a/train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,l_class,l_offset,total");
    assert_eq!(lines.len(), 3, "expected header plus one row per step: {log}");
    assert!(lines[1].starts_with("1,"));
    assert_eq!(
        log,
        std::fs::read_to_string(tmp.path().join("run_b/train_log.csv")).unwrap()
    );

    // Resume to step 4 from the saved checkpoint.
    let out = casp()
        .env("CASP_SEED", "123")
        .args(["train", "--config"])
        .arg(&conf)
        .arg("--max-steps")
        .arg("4")
        .arg("--resume")
        .arg(&ckpt)
        .arg("--data")
        .arg(&manifest)
        .arg("--out")
        .arg(tmp.path().join("run_c"))
        .output()
        .unwrap();
    assert!(ok(&out).contains("trained to step 4"));

    // Predict: a rank-4 grid dump, bit-identical across invocations.
    let scene = tmp.path().join("scenes/scene_0000.json");
    let pred_a = tmp.path().join("pred_a.grid");
    let pred_b = tmp.path().join("pred_b.grid");
    for pred in [&pred_a, &pred_b] {
        let out = casp()
            .args(["predict", "--ckpt"])
            .arg(&ckpt)
            .arg("--scene")
            .arg(&scene)
            .arg("--out")
            .arg(pred)
            .output()
            .unwrap();
        assert!(ok(&out).contains("[4, 3, 32, 16]"));
    }
    let dump = std::fs::read(&pred_a).unwrap();
    assert_eq!(dump, std::fs::read(&pred_b).unwrap(), "prediction is not pure");
    assert_eq!(&dump[..8], b"CASPGRID");

    // Extract trajectory modes for the anchor agent.
    let traj = tmp.path().join("modes.json");
    let out = casp()
        .args(["extract", "--k", "5", "--pred"])
        .arg(&pred_a)
        .arg("--scene")
        .arg(&scene)
        .arg("--out")
        .arg(&traj)
        .output()
        .unwrap();
    ok(&out);
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&traj).unwrap()).unwrap();
    let modes = parsed["modes"].as_array().unwrap();
    assert!(!modes.is_empty() && modes.len() <= 5);
    assert_eq!(modes[0]["points"].as_array().unwrap().len(), 4);

    // Evaluate both prediction formats; each writes a JSON and a CSV report.
    for (name, pred) in [("ev_grid", &pred_a), ("ev_traj", &traj)] {
        let prefix = tmp.path().join(name);
        let out = casp()
            .args(["eval", "--k", "1,5", "--pred"])
            .arg(pred)
            .arg("--gt")
            .arg(&scene)
            .arg("--out")
            .arg(&prefix)
            .output()
            .unwrap();
        ok(&out);
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(prefix.with_extension("json")).unwrap(),
        )
        .unwrap();
        assert!(report["tracks"].as_u64().unwrap() >= 1);
        let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
        assert!(csv.starts_with("tracks,"));
        assert_eq!(csv.lines().count(), 2);
    }

    // Render heatmap images.
    let imgdir = tmp.path().join("img");
    let out = casp()
        .args(["render", "--pred"])
        .arg(&pred_a)
        .arg("--scene")
        .arg(&scene)
        .arg("--out")
        .arg(&imgdir)
        .output()
        .unwrap();
    ok(&out);
    for name in ["step_01.ppm", "step_04.ppm", "composite.ppm"] {
        let img = std::fs::read(imgdir.join(name)).unwrap();
        assert!(
            img.starts_with(b"P6\n16 32\n255\n"),
            "{name} has header {:?}",
            &img[..16.min(img.len())]
        );
        assert_eq!(img.len(), "P6\n16 32\n255\n".len() + 3 * 32 * 16);
    }
    assert!(!imgdir.join("step_05.ppm").exists());
}
