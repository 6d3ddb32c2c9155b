#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protoguide_data::synthetic::{write_dataset, Pattern};
use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_protoguide");

/// Runs the binary single-threaded with `PROTOGUIDE_OUT` pointed at `out`.
pub fn protoguide(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .env("PROTOGUIDE_OUT", out)
        .env("RAYON_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn protoguide")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs a stage and panics with its stderr unless it exits 0.
pub fn ok(args: &[&str], out: &Path) -> Output {
    let o = protoguide(args, out);
    assert!(o.status.success(), "{args:?} exited {:?}: {}", o.status.code(), stderr(&o));
    o
}

/// Horizontal against vertical intensity ramps, 8x8.
pub fn ramp_dataset(root: &Path, per_class: usize) {
    let classes = [("horizontal", Pattern::HorizontalRamp), ("vertical", Pattern::VerticalRamp)];
    write_dataset(root, &classes, per_class, 8, 11).unwrap();
}

/// Desk-sized run configuration over a ramp dataset.
pub fn desk_config(data: &Path, train: usize, holdout: usize, epochs: usize, per_class: usize) -> Value {
    json!({
        "run_id": "desk",
        "seed": 7,
        "mode": "prototype_guided",
        "data": {
            "root": data,
            "per_class_n": train,
            "holdout_per_class": holdout,
            "image_size": 8,
            "encoder": {"kind": "pooled_grid", "grid": 2}
        },
        "prototypes": {"epochs": 200, "learning_rate": 0.05},
        "denoiser": {
            "input_size": 8, "base_channels": 16, "channel_multipliers": [1, 2],
            "time_embed_dim": 64, "condition_dim": 12, "learning_rate": 0.001,
            "epochs": epochs, "batch_size": 8, "schedule": {"steps": 200},
            "checkpoint_every_epochs": (epochs / 3).max(1)
        },
        "sampler": {
            "per_class": per_class, "method": "ddim", "num_steps": 50, "eta": 0.0,
            "guidance_scale": 3.0, "batch_size": 50
        },
        "eval": {"train_source": "synthetic", "classifier": {"preset": "small_cnn_desk", "epochs": 30}}
    })
}

pub fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}
