#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csgo_core::synthetic::random_triplets;

pub const TINY_CONFIG: &str = r#"
[model]
image_size = 8
latent_factor = 2
widths = [8, 16]
norm_groups = 4
time_dim = 16
attn_heads = 2
text_dim = 8
text_len = 4
patch_size = 4
encoder_dim = 8
n_style_tokens = 2
resampler_layers = 1
resampler_heads = 2

[train]
steps = 3
batch_size = 2
learning_rate = 0.001

[inference]
steps = 3

[inference.injection]
n_style_tokens = 2

[pipeline]
n = 2
"#;

pub fn csgo(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csgo"));
    for a in args {
        cmd.arg(a);
    }
    cmd.env_remove("CSGO_SEED");
    cmd.output().expect("failed to launch csgo")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes `contents/` and `styles/` PNG folders plus a tiny config.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new(n_contents: usize, n_styles: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let t = random_triplets(n_contents.max(n_styles), 77, 8);
        std::fs::create_dir_all(dir.path().join("contents")).unwrap();
        std::fs::create_dir_all(dir.path().join("styles")).unwrap();
        for (i, t) in t.iter().enumerate() {
            let (c, s, _) = t.images(8);
            if i < n_contents {
                c.save(dir.path().join("contents").join(format!("c{i}.png"))).unwrap();
            }
            if i < n_styles {
                s.save(dir.path().join("styles").join(format!("s{i}.png"))).unwrap();
            }
        }
        std::fs::write(dir.path().join("tiny.toml"), TINY_CONFIG).unwrap();
        Self { dir }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    pub fn config(&self) -> PathBuf {
        self.path("tiny.toml")
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
