//! Output directory handling and the run manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const OUT_ENV: &str = "BITBENCH_OUT";

/// `output` from the config (or `runs/<subcommand>`), placed under
/// `$BITBENCH_OUT` when relative and the variable is set.
pub fn output_dir(cfg: &RunConfig, subcommand: &str) -> PathBuf {
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(subcommand));
    match std::env::var_os(OUT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs { dir, files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(name.to_owned());
        Ok(())
    }

    /// For the core `to_csv(writer)` style emitters.
    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> bitbench_core::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write(name, buf)
    }

    pub fn write_csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let buf = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
        self.write(name, buf)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_path: Option<String>,
    status: &'static str,
    failures: &'a [String],
    outputs: &'a [String],
    config: &'a RunConfig,
}

/// `manifest.toml`: tool version, the fully resolved config and the files
/// written. Passing it back through `--config` repeats the run.
pub fn write_manifest(
    out: &mut Outputs,
    subcommand: &str,
    config_path: Option<&Path>,
    cfg: &RunConfig,
    failures: &[String],
) -> Result<()> {
    let mut files = out.files.clone();
    files.push("manifest.toml".into());
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        config_path: config_path.map(|p| p.display().to_string()),
        status: if failures.is_empty() { "ok" } else { "failed" },
        failures,
        outputs: &files,
        config: cfg,
    };
    let text = toml::to_string(&m).context("serializing manifest")?;
    out.write("manifest.toml", text)
}
