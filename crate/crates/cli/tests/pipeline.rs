mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use common::{desk_config, ok, protoguide, ramp_dataset, stderr, stdout, write_config, BIN};
use serde_json::Value;

fn tiny(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    ramp_dataset(&data, 6);
    let mut cfg = desk_config(&data, 4, 2, epochs, 2);
    cfg["denoiser"]["checkpoint_every_epochs"] = 2.into();
    cfg["sampler"]["num_steps"] = 5.into();
    cfg["eval"]["classifier"]["epochs"] = 2.into();
    write_config(dir, &cfg)
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn rerunning_a_finished_stage_is_a_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 2);
    let out = tmp.path().join("out");
    ok(&["prepare", "--config", cfg.to_str().unwrap()], &out);
    let manifest = out.join("desk/prepare/manifest.json");
    let before = fs::metadata(&manifest).unwrap().modified().unwrap();
    ok(&["prepare", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(fs::metadata(&manifest).unwrap().modified().unwrap(), before);

    // a different configuration needs --force
    let mut changed = json(&cfg);
    changed["data"]["holdout_per_class"] = 1.into();
    let cfg2 = tmp.path().join("changed.json");
    fs::write(&cfg2, changed.to_string()).unwrap();
    let o = protoguide(&["prepare", "--config", cfg2.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("--force"));
    ok(&["prepare", "--config", cfg2.to_str().unwrap(), "--force"], &out);
    assert_eq!(json(&manifest)["holdout_per_class"], 1);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let missing = tmp.path().join("nowhere");
    let cfg = write_config(tmp.path(), &desk_config(&missing, 4, 2, 2, 2));
    let o = protoguide(&["prepare", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere"), "{}", stderr(&o));

    let mut bad = desk_config(&missing, 4, 2, 2, 2);
    bad["denoiser"]["learning_rte"] = 0.1.into();
    let cfg = write_config(tmp.path(), &bad);
    let o = protoguide(&["prepare", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rte"));

    assert_eq!(protoguide(&["prepare"], &out).status.code(), Some(1));
    assert_eq!(protoguide(&["launch", "--config", "x"], &out).status.code(), Some(1));
    let o = protoguide(&["prepare", "--config", tmp.path().join("absent.json").to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(protoguide(&["--help"], &out).status.code(), Some(0));
}

#[test]
fn stages_check_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 2);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    let o = protoguide(&["train-prototypes", "--config", cfg], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("protoguide prepare"), "{}", stderr(&o));
    ok(&["prepare", "--config", cfg], &out);
    let o = protoguide(&["train-prototypes", "--config", cfg, "--mode", "baseline_cfg"], &out);
    assert_eq!(o.status.code(), Some(1));
    let o = protoguide(&["train-diffusion", "--config", cfg], &out);
    assert_eq!(o.status.code(), Some(2), "prototype mode without a codebook: {}", stderr(&o));
    let o = protoguide(&["sample", "--config", cfg, "--mode", "baseline_cfg"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn both_modes_differ_only_in_conditioning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 2);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    ok(&["prepare", "--config", cfg], &out);
    ok(&["train-prototypes", "--config", cfg], &out);
    let mut sidecars = Vec::new();
    for mode in ["baseline_cfg", "prototype_guided"] {
        ok(&["train-diffusion", "--config", cfg, "--mode", mode], &out);
        let dir = out.join("desk/diffusion").join(mode);
        let stamp = json(&dir.join("stage.json"));
        let mut sidecar = json(&dir.join(stamp["artifacts"]["checkpoint"].as_str().unwrap()));
        let obj = sidecar.as_object_mut().unwrap();
        let source = obj.remove("conditioning_source").unwrap();
        let frozen = obj.remove("frozen").unwrap();
        sidecars.push((sidecar, source, frozen));
    }
    let (base, proto) = (&sidecars[0], &sidecars[1]);
    assert_eq!(base.0, proto.0);
    assert_ne!(base.1, proto.1);
    assert_eq!((base.2.as_bool(), proto.2.as_bool()), (Some(false), Some(true)));
}

fn metric_steps(path: &Path) -> Vec<u64> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["step"].as_u64().unwrap()).collect()
}

#[test]
fn interrupted_training_resumes_to_the_same_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 30);
    let cfg = cfg.to_str().unwrap();
    let (whole, cut) = (tmp.path().join("whole"), tmp.path().join("cut"));
    for out in [&whole, &cut] {
        ok(&["prepare", "--config", cfg, "--mode", "baseline_cfg"], out);
    }
    ok(&["train-diffusion", "--config", cfg, "--mode", "baseline_cfg"], &whole);

    let mut child = Command::new(BIN)
        .args(["train-diffusion", "--config", cfg, "--mode", "baseline_cfg"])
        .env("PROTOGUIDE_OUT", &cut)
        .env("RAYON_NUM_THREADS", "1")
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let first = cut.join("desk/diffusion/baseline_cfg/checkpoints/epoch_000002.json");
    let deadline = Instant::now() + Duration::from_secs(120);
    while !first.exists() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    let status = child.wait().unwrap();
    assert!(!status.success(), "training finished before it could be interrupted");
    let dir = cut.join("desk/diffusion/baseline_cfg");
    assert_eq!(json(&dir.join("stage.json"))["complete"], false);

    ok(&["train-diffusion", "--config", cfg, "--mode", "baseline_cfg"], &cut);
    let steps = metric_steps(&dir.join("metrics.jsonl"));
    assert_eq!(steps, (1..=steps.len() as u64).collect::<Vec<_>>());
    assert_eq!(steps, metric_steps(&whole.join("desk/diffusion/baseline_cfg/metrics.jsonl")));
    let weights = "checkpoints/epoch_000030.safetensors";
    assert!(fs::read(dir.join(weights)).unwrap() == fs::read(whole.join("desk/diffusion/baseline_cfg").join(weights)).unwrap());
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), 2);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.path().join("out");
    for stage in ["prepare", "train-prototypes", "train-diffusion", "sample", "export-annotations", "eval"] {
        ok(&[stage, "--config", cfg], &out);
    }
    let run = out.join("desk");
    let samples = json(&run.join("samples/prototype_guided/samples.json"));
    assert_eq!(samples["entries"].as_array().unwrap().len(), 4);
    assert!(run.join("samples/prototype_guided/vertical/0001.png").exists());
    let checkpoint = samples["checkpoint"].as_str().unwrap();
    assert!(!Path::new(checkpoint).is_absolute() && run.join(checkpoint).exists());
    let tasks = json(&run.join("annotations/prototype_guided/tasks.json"));
    assert_eq!(tasks["tasks"].as_array().unwrap().len(), 4);
    let report = json(&run.join("eval/prototype_guided/report.json"));
    assert_eq!(report["class_names"], serde_json::json!(["horizontal", "vertical"]));
    assert!(run.join("eval/prototype_guided/report.txt").exists());

    // a real-data baseline is scored on the same holdout
    let mut real = json(Path::new(cfg));
    real["eval"]["train_source"] = "real".into();
    let real_cfg = tmp.path().join("real.json");
    fs::write(&real_cfg, real.to_string()).unwrap();
    let o = ok(&["eval", "--config", real_cfg.to_str().unwrap()], &out);
    assert!(stdout(&o).contains("real"));
    assert!(run.join("eval/real/report.json").exists());
}
