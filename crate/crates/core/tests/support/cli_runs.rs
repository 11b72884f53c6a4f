//! Helpers for driving the `uvforge` binary from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL: &str = r#"seed = 1
[scene]
meshes = ["quad", "two_plane_occluder"]
textures = ["checker", "smooth"]
held_out = 1
uv_size = 32
[scene.rig]
width = 32
height = 32
[model]
widths = [8, 16]
bands = 2
[train]
steps = 3
checkpoint_every = 2
"#;

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn uvforge(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uvforge"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

pub fn ok(args: &[&str], config: &Path, out: &Path) -> String {
    let o = uvforge(args, config, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

pub type Hashes = BTreeMap<String, BTreeMap<String, String>>;

/// File hashes of every manifest below `root`, keyed by the manifest path.
pub fn manifests(root: &Path) -> Hashes {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() == "manifest.json" {
                let key = p.strip_prefix(root).unwrap().display().to_string();
                let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).unwrap()).unwrap();
                out.insert(key, serde_json::from_value(m["files"].clone()).unwrap());
            }
        }
    }
    out
}

pub const SUBCOMMANDS: [&[&str]; 7] = [
    &["bake-geometry"],
    &["bake-texture"],
    &["bake-texture", "--mode", "oracle-attn"],
    &["train"],
    &["bake-texture", "--mode", "model", "--ckpt", "@/train/checkpoint.bin"],
    &["eval"],
    &["ablate"],
];

pub fn run_all(config: &Path, out: &Path, threads: &str) {
    let ckpt = out.join("train/checkpoint.bin").display().to_string();
    for cmd in SUBCOMMANDS {
        let mut args: Vec<&str> = cmd
            .iter()
            .map(|a| if a.starts_with('@') { ckpt.as_str() } else { a })
            .collect();
        args.extend(["--deterministic", "--threads", threads]);
        ok(&args, config, out);
    }
    ok(&["verify", "--deterministic"], config, out);
}
