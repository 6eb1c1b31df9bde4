//! Structured-text run manifest: config echo, version, wall time, iteration
//! diagnostics, error budget, and pass/fail flags, written atomically so a
//! run directory never holds a half-written record.

use std::fs;
use std::io;
use std::path::Path;

/// Ordered `[section]` / `key = value` document. Values are written verbatim,
/// so callers keep formatting deterministic (fixed-precision floats).
#[derive(Debug, Default)]
pub struct Manifest {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl Manifest {
    pub fn new() -> Self {
        Manifest::default()
    }

    pub fn section(&mut self, name: &str) -> &mut Self {
        self.sections.push((name.to_string(), Vec::new()));
        self
    }

    pub fn kv(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.sections
            .last_mut()
            .expect("kv before any section")
            .1
            .push((key.to_string(), value.into()));
        self
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push('[');
            out.push_str(name);
            out.push_str("]\n");
            for (k, v) in entries {
                out.push_str(k);
                out.push_str(" = ");
                out.push_str(v);
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// Write via a temp file in the same directory, then rename: the final
    /// path either holds the previous content or the complete new one.
    pub fn write_atomic(&self, path: &Path) -> io::Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.render())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}
