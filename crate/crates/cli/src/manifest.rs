//! Run manifests: a flat `key = value` record written next to every output.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Values of `prefix.0`, `prefix.1`, … up to the first gap.
    pub fn list(&self, prefix: &str) -> Vec<String> {
        (0..).map_while(|i| self.get(&format!("{prefix}.{i}")).map(str::to_owned)).collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Records a file that was read, with its digest.
    pub fn record_input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.set(format!("input.{role}.path"), path.display());
        self.set(format!("input.{role}.sha256"), sha256_file(path)?);
        Ok(())
    }

    /// Records a file that was written, with its digest.
    pub fn record_output(&mut self, path: &Path) -> Result<(), CliError> {
        let i = self.list("output").len();
        self.set(format!("output.{i}"), path.display());
        self.set(format!("output.{i}.sha256"), sha256_file(path)?);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# patchpost run manifest\n");
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut m = Manifest::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| CliError::Format(format!("manifest line {}: expected `key = value`", n + 1)))?;
            m.entries.push((k.trim().to_owned(), v.to_owned()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// `<path>.manifest` unless given explicitly.
pub fn default_path(explicit: Option<&PathBuf>, output: &Path) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    })
}
