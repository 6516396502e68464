//! `key=value` config files.
//!
//! A `--config <file>` argument is replaced by the file's settings as
//! `--key value` flags, placed before the command-line flags and kept only
//! for keys the command line does not set, so explicit flags win. Blank lines
//! and `#` comments are ignored; `key=true` becomes a bare `--key` switch.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got {line:?}", i + 1);
        };
        let key = k.trim();
        if key.is_empty() || key.starts_with('-') || key.contains(char::is_whitespace) {
            bail!("line {}: invalid key {key:?}", i + 1);
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Expands `--config <file>` (or `--config=<file>`) in `argv`. Returns the
/// new argument list and the config path, if any.
pub fn expand(argv: &[String]) -> Result<(Vec<String>, Option<PathBuf>)> {
    let mut path = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut insert_at = None;
    let mut i = 0;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            let p = argv.get(i + 1).context("--config needs a file")?;
            path = Some(PathBuf::from(p));
            insert_at = Some(rest.len());
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            insert_at = Some(rest.len());
            i += 1;
            continue;
        }
        rest.push(a.clone());
        i += 1;
    }
    let Some(path) = path else {
        return Ok((rest, None));
    };
    let settings = read(&path)?;
    let explicit: BTreeSet<&str> = rest
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split_once('=').map_or(a, |(k, _)| k))
        .collect();
    let mut injected = Vec::new();
    for (k, v) in settings {
        if explicit.contains(k.as_str()) {
            continue;
        }
        injected.push(format!("--{k}"));
        if v != "true" {
            injected.push(v);
        }
    }
    let at = insert_at.expect("set with path");
    let mut out = rest[..at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[at..]);
    Ok((out, Some(path)))
}

fn read(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing config {}", path.display()))
}
