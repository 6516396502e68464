//! Per-invocation bookkeeping shared by the subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sfrg_core::model::{file::load_cnn, ToyCnn};
use sfrg_core::Image;

use crate::imageio::decode_png;
use crate::manifest::{sha256_hex, FileDigest, Outputs, RunManifest};

/// Arguments (after the program name, config expanded) and working directory.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
}

impl Invocation {
    pub fn current(argv: &[String]) -> Result<Self> {
        Ok(Invocation { argv: argv.to_vec(), cwd: std::env::current_dir()? })
    }
}

pub struct Run {
    command: String,
    invocation: Invocation,
    started: Instant,
    inputs: Vec<FileDigest>,
    seeds: BTreeMap<String, u64>,
    config: serde_json::Value,
    notes: Vec<String>,
    pub out: Outputs,
}

impl Run {
    pub fn start(invocation: &Invocation, command: &str, out: &Path) -> Result<Self> {
        Ok(Run {
            command: command.to_string(),
            invocation: invocation.clone(),
            started: Instant::now(),
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            notes: Vec::new(),
            out: Outputs::create(out)?,
        })
    }

    /// Reads an input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn load_model(&mut self, path: &Path) -> Result<ToyCnn> {
        self.read_input(path)?;
        load_cnn(path).with_context(|| format!("loading model {}", path.display()))
    }

    pub fn load_image(&mut self, path: &Path) -> Result<Image> {
        let bytes = self.read_input(path)?;
        decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn config<T: Serialize>(&mut self, config: &T) -> Result<()> {
        self.config = serde_json::to_value(config)?;
        Ok(())
    }

    pub fn note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn finish(self) -> Result<RunManifest> {
        let dir = self.out.dir().to_path_buf();
        let manifest = RunManifest {
            tool: "sfrg".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            argv: self.invocation.argv,
            cwd: self.invocation.cwd.display().to_string(),
            config: self.config,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.out.into_digests(),
            notes: self.notes,
            wall_time_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        manifest.save(&dir)?;
        Ok(manifest)
    }
}

pub fn curve_csv(curve: &sfrg_core::metrics::Curve) -> String {
    let mut s = String::from("fraction,confidence\n");
    for (x, y) in curve.fractions.iter().zip(&curve.confidences) {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

/// Parses `1,2,3` (whitespace tolerated, empty string is the empty list).
pub fn parse_patch_list(text: &str) -> Result<Vec<usize>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("invalid patch index {:?}", p.trim())))
        .collect()
}

/// PNG files directly inside `dir`, sorted by name.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}
