use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saff::scene_io::{load_dataset, write_mask_png};

const TINY: &str = r#"
seed = 5

[synth]
height = 24
width = 24
n_frames = 3
focal = 26.0
semantic_dims = 8
levels = [[24, 24]]
window = [16, 16]
window_stride = 8
holdout = [{ split = "fix_cam0", camera = 0.0, time = 1 }]

[train]
iterations = 4
batch_rays = 32
n_samples = 8

[train.field]
depth = 2
width = 16
skip = 1

[decompose.render]
n_samples = 8
"#;

fn saff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn print_config_dumps_parseable_defaults() {
    let out = saff(&["--print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = saff::pipeline::PipelineConfig::from_toml(&text).unwrap();
    assert_eq!(cfg, saff::pipeline::PipelineConfig::default());
}

#[test]
fn print_config_applies_file_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = saff(&["--config", p(&config), "--seed", "11", "--print-config"]);
    assert!(out.status.success());
    let cfg = saff::pipeline::PipelineConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.train.seed, 11);
    assert_eq!(cfg.synth.height, 24);
}

#[test]
fn missing_config_exits_1() {
    let out = saff(&["synth", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let out = saff(&["synth", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_subcommand_or_output_exits_1() {
    assert_eq!(saff(&[]).status.code(), Some(1));
    assert_eq!(saff(&["synth"]).status.code(), Some(1));
}

#[test]
fn diverging_fit_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, TINY.replace("n_samples = 8\n\n[train.field]", "n_samples = 8\nadam = { lr = 1e300 }\n\n[train.field]")).unwrap();
    let data = dir.path().join("data");
    assert!(saff(&["synth", "--config", p(&config), "--out", p(&data)]).status.success());
    let ck = dir.path().join("ck");
    let out = saff(&["fit", "--config", p(&config), "--dataset", p(&data), "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_on_identical_masks_reports_perfect_ari() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let data = dir.path().join("data");
    assert!(saff(&["synth", "--config", p(&config), "--out", p(&data)]).status.success());
    let ds = load_dataset(&data).unwrap();
    let pred = dir.path().join("pred");
    fs::create_dir_all(pred.join("labels")).unwrap();
    for (i, f) in ds.frames.iter().enumerate() {
        write_mask_png(&pred.join(format!("labels/input_{i:03}.png")), f.mask.as_ref().unwrap()).unwrap();
    }
    for (j, h) in ds.holdout.iter().enumerate() {
        write_mask_png(&pred.join(format!("labels/{}_{j:03}.png", h.split)), h.mask.as_ref().unwrap()).unwrap();
    }
    let report_dir = dir.path().join("eval");
    let out = saff(&["eval", "--config", p(&config), "--dataset", p(&data), "--pred", p(&pred), "--out", p(&report_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(report_dir.join("eval_report.json")).unwrap()).unwrap();
    for split in ["input", "fix_cam0"] {
        assert_eq!(report["splits"][split]["ari"], 1.0);
        assert_eq!(report["splits"][split]["iou"], 1.0);
    }
    assert!(String::from_utf8(out.stdout).unwrap().contains("fix_cam0"));
}

#[test]
fn full_pipeline_writes_every_stage_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let cfg = p(&config);
    let data = dir.path().join("data");
    let ck = dir.path().join("ck");
    let renders = dir.path().join("render");
    let dec = dir.path().join("dec");
    let report = dir.path().join("eval");
    let run = |args: &[&str]| {
        let out = saff(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--config", cfg, "--out", p(&data)]);
    run(&["fit", "--config", cfg, "--dataset", p(&data), "--out", p(&ck)]);
    run(&["render", "--config", cfg, "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&renders)]);
    run(&["decompose", "--config", cfg, "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&dec), "--crf"]);
    run(&["eval", "--config", cfg, "--dataset", p(&data), "--pred", p(&dec), "--out", p(&report)]);

    for dir in [&data, &ck, &renders, &dec, &report] {
        let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("run_manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 5);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    }
    assert!(data.join("scene.json").exists());
    let log = fs::read_to_string(ck.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert!(first["terms"]["photometric"].is_number() && first["decay_rate"].is_number());
    for name in ["input_000", "input_002", "fix_cam0_000"] {
        for file in ["rgb.bin", "depth.bin", "semantics.bin", "attention.bin", "rgb.png", "semantics.png"] {
            assert!(renders.join(name).join(file).exists(), "{name}/{file}");
        }
        assert!(dec.join(format!("labels/{name}.png")).exists());
        assert!(dec.join(format!("baseline/{name}.png")).exists());
    }
    assert!(dec.join("centroids.bin").exists());
    let saliency: serde_json::Value = serde_json::from_slice(&fs::read(dec.join("saliency.json")).unwrap()).unwrap();
    assert_eq!(saliency["salient"].as_array().unwrap().len(), saliency["k"].as_u64().unwrap() as usize);
    let r: serde_json::Value = serde_json::from_slice(&fs::read(report.join("eval_report.json")).unwrap()).unwrap();
    assert!(r["splits"]["input"]["psnr"].is_number());

    let data2 = dir.path().join("data2");
    let dec2 = dir.path().join("dec2");
    run(&["synth", "--config", cfg, "--out", p(&data2)]);
    run(&["decompose", "--config", cfg, "--dataset", p(&data), "--checkpoint", p(&ck), "--out", p(&dec2), "--crf"]);
    assert_eq!(files(&data), files(&data2));
    let strip = |f: Vec<(PathBuf, Vec<u8>)>| f.into_iter().filter(|(p, _)| p != Path::new("run_manifest.json")).collect::<Vec<_>>();
    assert_eq!(strip(files(&dec)), strip(files(&dec2)));
}
