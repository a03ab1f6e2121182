use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

pub const HASH_KEY: &str = "config_hash";

/// Writes `value` as pretty JSON with the config hash as an extra top-level
/// key.
pub fn write_json<T: Serialize>(path: &Path, value: &T, hash: &str) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert(HASH_KEY.into(), hash.into());
        }
        None => {
            v = serde_json::json!({ HASH_KEY: hash, "value": v });
        }
    }
    write_text(path, &(serde_json::to_string_pretty(&v)? + "\n"))
}

/// Embeds the hash in a JSON document produced elsewhere.
pub fn write_json_text(path: &Path, json: &str, hash: &str) -> Result<()> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    write_json(path, &v, hash)
}

/// Reads a JSON artifact, returning the document without the hash key and
/// the hash it carried.
pub fn read_json(path: &Path) -> Result<(serde_json::Value, Option<String>)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let hash = v
        .as_object_mut()
        .and_then(|o| o.remove(HASH_KEY))
        .and_then(|h| h.as_str().map(str::to_string));
    Ok((v, hash))
}

pub fn read_json_text(path: &Path) -> Result<String> {
    Ok(read_json(path)?.0.to_string())
}

/// CSV with a trailing `# config_hash=` line.
pub fn write_csv(path: &Path, csv: &str, hash: &str) -> Result<()> {
    let mut out = csv.to_string();
    if !out.ends_with('\n') {
        out.push('\n');
    }
    out.push_str(&format!("# {HASH_KEY}={hash}\n"));
    write_text(path, &out)
}

/// SVG with the hash as a comment after the root element.
pub fn write_svg(path: &Path, svg: &str, hash: &str) -> Result<()> {
    let Some(end) = svg.find('>') else {
        bail!("not an SVG document");
    };
    let out = format!("{}\n<!-- {HASH_KEY}={hash} -->{}", &svg[..=end], &svg[end + 1..]);
    write_text(path, &out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}
