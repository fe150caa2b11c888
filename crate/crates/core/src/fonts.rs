//! Discovery of outline fonts already installed on the machine.
//!
//! Used by the toy experiments and tests, which need a few dozen distinct
//! fonts but must not ship any.

use std::collections::HashSet;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthgen::{FontEntry, FontSet};

/// Colon-separated list of extra directories to scan before the defaults.
pub const FONT_DIRS_ENV: &str = "SYNTHADAPT_FONT_DIRS";

const MAX_DEPTH: usize = 6;

fn default_roots() -> Vec<PathBuf> {
    let mut roots = Vec::new();
    if let Ok(extra) = env::var(FONT_DIRS_ENV) {
        roots.extend(env::split_paths(&extra));
    }
    for d in ["/usr/share/fonts", "/usr/local/share/fonts", "/Library/Fonts", "/System/Library/Fonts"] {
        roots.push(PathBuf::from(d));
    }
    if let Some(home) = env::var_os("HOME") {
        let home = PathBuf::from(home);
        roots.push(home.join(".fonts"));
        roots.push(home.join(".local/share/fonts"));
    }
    // Python packages (matplotlib, reportlab, ...) often vendor free fonts.
    for base in ["/usr/local/lib", "/usr/lib"] {
        if let Ok(rd) = fs::read_dir(base) {
            let mut pys: Vec<PathBuf> = rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("python3")))
                .collect();
            pys.sort();
            for py in pys {
                roots.push(py.join("dist-packages"));
                roots.push(py.join("site-packages"));
            }
        }
    }
    roots
}

fn walk(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    let Ok(rd) = fs::read_dir(dir) else { return };
    let mut items: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    items.sort();
    for p in items {
        if p.is_dir() {
            if depth < MAX_DEPTH {
                walk(&p, depth + 1, out);
            }
        } else if matches!(
            p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
            Some("ttf" | "otf")
        ) {
            out.push(p);
        }
    }
}

/// All font files under the default search roots, deduplicated by content.
pub fn system_font_files() -> Vec<PathBuf> {
    let mut files = Vec::new();
    for root in default_roots() {
        walk(&root, 0, &mut files);
    }
    let mut seen = HashSet::new();
    files
        .into_iter()
        .filter(|p| {
            fs::read(p)
                .map(|d| seen.insert(Sha256::digest(&d).to_vec()))
                .unwrap_or(false)
        })
        .collect()
}

/// Loads every discovered Latin text font that has glyphs for all characters of `alphabet`.
/// Font ids are file stems, made unique with a numeric suffix when needed.
pub fn discover_fonts(alphabet: &str) -> Result<FontSet> {
    let mut ids = HashSet::new();
    let mut entries = Vec::new();
    for path in system_font_files() {
        let Ok(data) = fs::read(&path) else { continue };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("font");
        // strip bundler hashes such as `KaTeX_Main-Regular.ypZvNtVU`
        let stem = stem.split('.').next().unwrap_or(stem);
        let mut id = stem.to_string();
        let mut k = 2;
        while ids.contains(&id) {
            id = format!("{stem}-{k}");
            k += 1;
        }
        let Ok(entry) = FontEntry::from_bytes(id.clone(), data) else { continue };
        if entry.covers(alphabet).is_ok() && entry.has_outlines(alphabet) && entry.looks_latin() {
            ids.insert(id);
            entries.push(entry.with_path(path));
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyFontSet(PathBuf::from("<system font dirs>")));
    }
    FontSet::new(entries)
}
