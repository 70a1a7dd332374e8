//! Runs the binary on a configuration small enough to repeat.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_RUN: &str = "\
# one block, narrow widths, a few images per class
model.layers = 1
model.d_v = 16
model.d_l = 16
model.d_vl = 16
model.vision_heads = 2
model.text_heads = 2
model.mlp_ratio = 2
prompt.depth = 1
tune.epochs = 2
split.shots = 2
data.per_class = 4
pretrain.epochs = 1
pretrain.per_class = 3
sweep.seeds = 2
";

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maple-lab"));
    c.env("MAPLE_LAB_THREADS", "1");
    c
}

/// Writes the small configuration under `dir` and returns its path.
pub fn small_config_file(dir: &Path) -> PathBuf {
    let p = dir.join("small.cfg");
    std::fs::write(&p, SMALL_RUN).unwrap();
    p
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file of a run directory, sorted by name.
pub fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Runs every command twice into fresh directories; returns the command
/// names whose outputs differ, plus the first run's directories.
pub fn repeat_every_command(root: &Path) -> (Vec<String>, Vec<(String, PathBuf)>) {
    let cfg = small_config_file(root);
    let cfg = cfg.to_str().unwrap().to_string();
    let r = root.to_str().unwrap();
    let data = format!("{r}/gen-data.0/dataset.mpds");
    let backbone = format!("{r}/pretrain.0/checkpoint.mplt");
    let tuned = format!("{r}/tune.0/checkpoint.mplt");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec![]),
        ("pretrain", vec![]),
        ("tune", vec!["--checkpoint".into(), backbone.clone(), "--data".into(), data.clone()]),
        ("eval", vec!["--checkpoint".into(), tuned.clone(), "--data".into(), data.clone()]),
        ("sweep", vec!["--checkpoint".into(), backbone, "--set".into(), "sweep.axis=length".into()]),
        ("export-embeddings", vec!["--checkpoint".into(), tuned]),
        ("flops", vec!["--preset".into(), "clip-b16".into()]),
        ("gradcheck", vec!["--precision".into(), "f32".into()]),
    ];
    let mut differing = Vec::new();
    let mut dirs = Vec::new();
    for (name, extra) in &commands {
        let mut outs = Vec::new();
        for k in 0..2 {
            let dir = root.join(format!("{name}.{k}"));
            let d = dir.to_str().unwrap().to_string();
            let mut args: Vec<&str> = vec![name, "--config", &cfg, "--seed", "3", "--out", &d];
            args.extend(extra.iter().map(String::as_str));
            let out = run_ok(&args);
            outs.push((files(&dir), out.stdout));
            if k == 0 {
                dirs.push((name.to_string(), dir));
            }
        }
        if outs[0] != outs[1] || outs[0].0.is_empty() {
            differing.push(name.to_string());
        }
    }
    (differing, dirs)
}
