//! Experiment reports: a pass/fail ledger of named checks plus a JSON
//! manifest that ties every output file to a content hash and the config
//! that produced it. Artifacts carry no timestamps by default so that a
//! rerun with the same config and seed is byte-identical.

use crate::config::ExperimentConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// One named check with its outcome and a short measured detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub experiment: String,
    /// Hash of the canonical TOML serialization of the config.
    pub config_sha256: String,
    pub master_seed: u64,
    /// Optional wall-clock stamp; left out by default to keep reruns
    /// byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub manifest: Manifest,
    pub ledger: Vec<LedgerEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Hash of the experiment definition. The output directory is routing, not
/// part of the experiment, so it is cleared before hashing: the same campaign
/// written to two places reports the same hash.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let mut canonical = config.clone();
    canonical.output_dir = None;
    Ok(sha256_hex(canonical.to_toml_string()?.as_bytes()))
}

impl ExperimentReport {
    pub fn new(config: &ExperimentConfig) -> Result<ExperimentReport> {
        Ok(ExperimentReport {
            manifest: Manifest {
                schema_version: MANIFEST_SCHEMA_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                experiment: config.kind.name().to_string(),
                config_sha256: config_hash(config)?,
                master_seed: config.environment.master_seed,
                generated_at: None,
                files: Vec::new(),
            },
            ledger: Vec::new(),
        })
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.ledger.push(LedgerEntry {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    /// Record a check that ran a fallible computation: an `Err` fails the
    /// entry instead of aborting the campaign.
    pub fn check_result<T>(
        &mut self,
        name: &str,
        result: Result<T>,
        describe: impl FnOnce(&T) -> (bool, String),
    ) {
        match result {
            Ok(v) => {
                let (passed, detail) = describe(&v);
                self.check(name, passed, detail);
            }
            Err(e) => self.check(name, false, format!("error: {e}")),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.ledger.iter().all(|e| e.passed)
    }

    /// Register an already-written artifact in the manifest with its hash.
    pub fn attach_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.manifest.files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Plain-text ledger, one `PASS`/`FAIL` line per entry.
    pub fn ledger_text(&self) -> String {
        let mut out = String::new();
        for e in &self.ledger {
            let tag = if e.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{tag} {}: {}\n", e.name, e.detail));
        }
        let failed = self.ledger.iter().filter(|e| !e.passed).count();
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.ledger.len(),
            failed
        ));
        out
    }

    /// Write `ledger.txt` and `manifest.json` into `dir`. The ledger is
    /// itself listed in the manifest; the manifest is written last and is
    /// not self-referential.
    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let ledger_path = dir.join("ledger.txt");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ledger_path)?);
        f.write_all(self.ledger_text().as_bytes())?;
        f.flush()?;
        drop(f);
        self.attach_file(dir, "ledger.txt")?;
        self.manifest.files.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&ReportOnDisk {
            manifest: &self.manifest,
            ledger: &self.ledger,
        })
        .map_err(|e| Error::Config(format!("manifest serialize error: {e}")))?;
        std::fs::write(&manifest_path, json + "\n")?;
        Ok(manifest_path)
    }
}

#[derive(Serialize)]
struct ReportOnDisk<'a> {
    manifest: &'a Manifest,
    ledger: &'a [LedgerEntry],
}
