use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtscs::io::{read_tensor, save_png, write_checkpoint, write_tensor, CHECKPOINT_VERSION};
use mtscs::mts::random_orthogonal;
use mtscs::{Activation, ActivationKind, CsModel, ModelConfig, MtsGeometry, MtsOperator, Tensor, WindowRule};

fn mtscs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtscs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Asserts a failure with the given exit code and a single `error:` line.
fn assert_error(o: &Output, code: i32, name: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<_> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error: code={name} msg=")), "{}", lines[0]);
}

fn orthonormal_model(size: usize, window: usize) -> CsModel {
    let config = ModelConfig {
        image_size: [size, size],
        channels: 3,
        cr: 1.0,
        encoder_windows: vec![window],
        refine_windows: vec![window],
        t_encoder: 1,
        t_refine: 1,
        nb: 0,
        hidden_channels: 3,
        activation: ActivationKind::Identity,
        block_activation: ActivationKind::Identity,
        window_rule: WindowRule::PerMode,
    };
    let geometry =
        MtsGeometry::compressed(config.image_shape(), &config.encoder_windows, 3, 1.0, WindowRule::PerMode).unwrap();
    let encoder = MtsOperator::from_fn(geometry, 1, |_, _, j, rows, _| random_orthogonal(rows, 40 + j as u64)).unwrap();
    CsModel::new(config, encoder, Activation::new(ActivationKind::Identity, 3), Vec::new()).unwrap()
}

fn test_image(h: usize, w: usize, seed: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| {
        (((i[0] * 13 + i[1] * 7 + i[2] * 3 + seed * 5) % 17) as f64 / 16.0).clamp(0.0, 1.0)
    })
}

fn run_config(dir: &Path, extra_model: &str) -> PathBuf {
    let text = format!(
        r#"schema_version = 1
precision = "f64"

[model]
image_size = [16, 16]
cr = 0.3
encoder_windows = [4, 8, 16]
refine_windows = [4, 8]
t_encoder = 2
t_refine = 1
nb = 1
activation = "mhg"
{extra_model}

[train]
steps = 5
batch = 2
lr = 0.0005
seed = 3

[data.train]
kind = "synthetic"
count = 6
size = [20, 20]
seed = 1

[data.eval]
kind = "synthetic"
count = 2
size = [16, 16]
seed = 2

[output]
checkpoint = "{}"
log = "{}"
"#,
        s(&dir.join("model.ckpt")),
        s(&dir.join("train.jsonl"))
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn selftest_is_green() {
    let o = mtscs(&["selftest"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() >= 5);
    assert!(out.lines().all(|l| l.starts_with("PASS ")), "{out}");
}

#[test]
fn orthonormal_encode_decode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ortho.ckpt");
    write_checkpoint(&ckpt, &orthonormal_model(16, 8)).unwrap();
    let img = test_image(16, 16, 1);
    let input = dir.path().join("x.tensor");
    write_tensor(&input, &img).unwrap();
    let meas = dir.path().join("y.meas");
    let out = dir.path().join("xr.tensor");

    let o = mtscs(&["encode", s(&ckpt), s(&input), "-o", s(&meas)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mtscs(&["decode", s(&ckpt), s(&meas), "-o", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let back: Tensor = read_tensor(&out).unwrap();
    assert!(back.max_abs_diff(&img).unwrap() < 1e-5);

    // PNG input and output take the same path.
    let png = dir.path().join("x.png");
    save_png(&png, &img).unwrap();
    let o = mtscs(&["encode", s(&ckpt), s(&png), "-o", s(&meas)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mtscs(&["decode", s(&ckpt), s(&meas), "-o", s(&dir.path().join("xr.png"))]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn eval_emits_one_row_per_image_plus_mean() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir(&images).unwrap();
    let k = 3;
    for i in 0..k {
        save_png(&images.join(format!("img{i}.png")), &test_image(18, 16, i)).unwrap();
    }
    std::fs::write(images.join("notes.txt"), "not an image").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    write_checkpoint(&ckpt, &orthonormal_model(16, 8)).unwrap();

    let o = mtscs(&["eval", s(&ckpt), s(&images)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let rows: Vec<_> = csv.lines().collect();
    assert_eq!(rows[0], "image,psnr_db,ssim,proxy_psnr_db");
    assert_eq!(rows.len(), 1 + k + 1, "{csv}");
    assert!(rows[1].starts_with("img0.png,"));
    assert!(rows[k + 1].starts_with("mean,"));
    assert!(stderr(&o).contains("PSNR"));
}

#[test]
fn train_then_paramcount() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run_config(dir.path(), "");
    let o = mtscs(&["train", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 1);
    assert!(first["loss"].as_f64().unwrap() > 0.0);
    let model: CsModel = mtscs::io::read_checkpoint(&dir.path().join("model.ckpt")).unwrap();

    let o = mtscs(&["paramcount", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains(&format!("total {}", model.param_count())), "{out}");
    assert!(out.contains(&format!("encoder {}", model.param_breakdown().encoder)));
    assert!(out.contains("block0 "));

    // The same seed reproduces the checkpoint byte for byte.
    let first_ckpt = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    let o = mtscs(&["train", s(&cfg)]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("model.ckpt")).unwrap(), first_ckpt);
}

#[test]
fn errors_are_coded() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_error(&mtscs(&["train", s(&missing)]), 3, "io");

    let cfg = run_config(dir.path(), "depth = 4");
    assert_error(&mtscs(&["paramcount", s(&cfg)]), 4, "config");

    let ckpt = dir.path().join("m.ckpt");
    write_checkpoint(&ckpt, &orthonormal_model(16, 8)).unwrap();
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let future = dir.path().join("future.ckpt");
    std::fs::write(&future, &bytes).unwrap();
    let img = dir.path().join("x.tensor");
    write_tensor(&img, &test_image(16, 16, 0)).unwrap();
    let out = dir.path().join("y.meas");
    assert_error(&mtscs(&["encode", s(&future), s(&img), "-o", s(&out)]), 6, "version");

    std::fs::write(&future, b"garbage").unwrap();
    assert_error(&mtscs(&["encode", s(&future), s(&img), "-o", s(&out)]), 5, "format");

    // Measurements from a 16x16 encoder do not fit an 8x8 checkpoint.
    assert!(mtscs(&["encode", s(&ckpt), s(&img), "-o", s(&out)]).status.success());
    let small = dir.path().join("small.ckpt");
    write_checkpoint(&small, &orthonormal_model(8, 8)).unwrap();
    let rec = dir.path().join("r.tensor");
    assert_error(&mtscs(&["decode", s(&small), s(&out), "-o", s(&rec)]), 7, "shape");
    assert!(!rec.exists());

    let bogus = dir.path().join("bogus.png");
    std::fs::write(&bogus, b"not a png").unwrap();
    assert_error(&mtscs(&["encode", s(&ckpt), s(&bogus), "-o", s(&out)]), 8, "image");

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_error(&mtscs(&["eval", s(&ckpt), s(&empty)]), 9, "empty-dataset");

    assert_error(&mtscs(&["frobnicate"]), 2, "usage");
}
