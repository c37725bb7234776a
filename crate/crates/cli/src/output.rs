use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let fail = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// `<path>.manifest.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Provenance of one command invocation. Everything except
/// `duration_seconds` is a function of the flags.
#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_seconds: f64,
}

impl Manifest {
    pub fn new(command: &'static str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_seconds: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

pub fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Minimal CSV builder; fields never contain separators or quotes.
#[derive(Default)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn row<I, S>(&mut self, fields: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            self.buf.push_str(f.as_ref());
            first = false;
        }
        self.buf.push('\n');
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(
            sidecar(Path::new("out/model.alck")),
            PathBuf::from("out/model.alck.manifest.json")
        );
        assert_eq!(sidecar(Path::new("x")), PathBuf::from("x.manifest.json"));
    }

    #[test]
    fn csv_rows() {
        let mut csv = Csv::default();
        csv.row(["a", "b"]);
        csv.row(vec![String::from("1"), String::new()]);
        assert_eq!(csv.into_bytes(), b"a,b\n1,\n");
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_atomic(&dir.path().join("missing/f.txt"), b"x").is_err());
    }

    #[test]
    fn manifest_fields() {
        let mut m = Manifest::new("gen", serde_json::json!({ "k": 1 }));
        m.outputs.push("a".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.write(&path).unwrap();
        let v: Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(v["command"], "gen");
        assert_eq!(v["config"]["k"], 1);
        assert_eq!(v["outputs"][0], "a");
        assert!(v.get("duration_seconds").is_some());
    }
}
