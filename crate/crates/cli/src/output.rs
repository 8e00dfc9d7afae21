//! Output files stamped with the configuration hash.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Comment line opening every CSV and text output.
pub fn hash_comment(hash: &str) -> String {
    format!("# config_sha256={hash}\n")
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text(path: &Path, hash: &str, body: &str) -> CliResult<()> {
    write_atomic(path, &format!("{}{body}", hash_comment(hash)))
}

/// Serialize `value` as a JSON object with a leading `config_hash` field.
pub fn write_json<S: Serialize>(path: &Path, hash: &str, value: &S) -> CliResult<()> {
    let body = serde_json::to_string_pretty(value)?;
    write_atomic(path, &stamp_json(&body, hash)?)
}

/// Insert `"config_hash"` as the first member of a pretty-printed object.
pub fn stamp_json(doc: &str, hash: &str) -> CliResult<String> {
    let rest = doc.strip_prefix("{\n").ok_or_else(|| {
        CliError::Config("stamped document is not a multi-line JSON object".into())
    })?;
    Ok(format!("{{\n  \"config_hash\": \"{hash}\",\n{rest}"))
}

/// Drop `#` comment lines.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamped_json_parses_with_hash_first() {
        let doc = serde_json::to_string_pretty(&serde_json::json!({"a": 1, "b": [2, 3]})).unwrap();
        let s = stamp_json(&doc, "abc").unwrap();
        assert!(s.starts_with("{\n  \"config_hash\": \"abc\","));
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["b"][1], 3);
        assert!(stamp_json("[1]", "abc").is_err());
    }

    #[test]
    fn comments_strip() {
        let t = format!("{}a,b\n1,2\n", hash_comment("h"));
        assert_eq!(strip_comments(&t), "a,b\n1,2\n");
    }

    #[test]
    fn atomic_write_creates_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/y.txt");
        write_text(&p, "h", "body\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "# config_sha256=h\nbody\n");
        assert!(!p.with_extension("partial").exists());
    }
}
