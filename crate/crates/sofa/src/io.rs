//! Config ingestion, deterministic result files and run manifests.
//!
//! Output files in a run directory:
//!
//! | file | content |
//! |------|---------|
//! | `funding_per_round.csv` | `round,agent_id,incoming_total,retained,donated` |
//! | `transfers.csv` | `round,donor_id,recipient_id,amount` |
//! | `metrics.json` | [`MetricsReport`] of the last completed round |
//! | `integrity_report.json` | [`IntegrityReport`] |
//! | `manifest.json` | [`RunManifest`] with checksums of the files above |
//!
//! CSV numbers use nine fractional digits, rows are sorted by round and then
//! agent id, and every file ends lines with `\n`.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ConfigIssue, Error, Result};
use crate::integrity::{DonationLedger, IntegrityReport, Transfer};
use crate::metrics::MetricsReport;
use crate::population::Community;
use crate::simulation::{CommunitySource, PartitionResult, ScenarioConfig, ScenarioResult, SweepResult};

pub const FUNDING_FILE: &str = "funding_per_round.csv";
pub const TRANSFERS_FILE: &str = "transfers.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const INTEGRITY_FILE: &str = "integrity_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_CSV_FILE: &str = "sweep.csv";
pub const LOCK_FILE: &str = ".sofa.lock";

const FUNDING_HEADER: [&str; 5] = ["round", "agent_id", "incoming_total", "retained", "donated"];
const TRANSFERS_HEADER: [&str; 4] = ["round", "donor_id", "recipient_id", "amount"];

/// Nine fractional digits, never `-0.000000000`.
pub fn format_amount(x: f64) -> String {
    let s = format!("{x:.9}");
    if s.starts_with('-') && s[1..].bytes().all(|b| b == b'0' || b == b'.') {
        s[1..].to_string()
    } else {
        s
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses a scenario config, fills defaults and validates it. Relative
/// community file paths are resolved against `base_dir`. Every semantic
/// problem is reported at once.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ScenarioConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut config: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = json_pointer(&e.path().to_string());
        Error::Config(vec![ConfigIssue::new(pointer, e.inner().to_string())])
    })?;
    if let CommunitySource::File(path) = &mut config.community {
        if path.is_relative() {
            *path = base_dir.join(&*path);
        }
    }
    let issues = config.issues();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(issues))
    }
}

pub fn parse_and_validate_config(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base)
}

/// Turns a serde path like `policy.strategy[2].kind` into `/policy/strategy/2/kind`.
fn json_pointer(path: &str) -> String {
    if path == "." || path.is_empty() {
        return "/".to_string();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        if let Some(k) = rest.find('[') {
            out.push('/');
            out.push_str(&rest[..k]);
            rest = &rest[k..];
            while let Some(end) = rest.find(']') {
                out.push('/');
                out.push_str(&rest[1..end]);
                rest = &rest[end + 1..];
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Canonical config text: defaults materialized, object keys sorted.
pub fn canonical_config_json(config: &ScenarioConfig) -> String {
    let value = serde_json::to_value(config).expect("config serializes");
    serde_json::to_string(&value).expect("value serializes")
}

pub fn config_hash(config: &ScenarioConfig) -> String {
    sha256_hex(canonical_config_json(config).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Provenance record written last into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub files: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Files whose size or checksum no longer match, relative to `dir`.
    pub fn mismatches(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|e| match fs::read(dir.join(&e.path)) {
                Ok(bytes) => bytes.len() as u64 != e.bytes || sha256_hex(&bytes) != e.sha256,
                Err(_) => true,
            })
            .map(|e| e.path.clone())
            .collect()
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// RFC 3339 timestamp; `SOURCE_DATE_EPOCH` pins it for reproducible builds.
pub fn timestamp() -> String {
    use chrono::{DateTime, SecondsFormat, Utc};
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<OutDirLock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                std::io::Error::new(e.kind(), "output directory is in use by another run"),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

/// `funding_per_round.csv` content.
pub fn funding_csv(result: &ScenarioResult) -> Vec<u8> {
    let order = result.community.order_by_id();
    let mut w = csv_writer();
    w.write_record(FUNDING_HEADER).expect("in-memory write");
    for state in &result.history {
        let round = state.round_index.to_string();
        for &i in &order {
            w.write_record([
                round.as_str(),
                result.community.id(i).as_str(),
                &format_amount(state.incoming_total[i]),
                &format_amount(state.retained[i]),
                &format_amount(state.donated_pool[i]),
            ])
            .expect("in-memory write");
        }
    }
    finish(w)
}

/// `transfers.csv` content, in canonical order.
pub fn transfers_csv(ledger: &DonationLedger, community: &Community) -> Vec<u8> {
    let mut sorted = ledger.clone();
    sorted.sort_canonical(community);
    let mut w = csv_writer();
    w.write_record(TRANSFERS_HEADER).expect("in-memory write");
    for t in sorted.records() {
        w.write_record([
            t.round.to_string().as_str(),
            community.id(t.donor).as_str(),
            community.id(t.recipient).as_str(),
            &format_amount(t.amount),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("report serializes");
    s.push(b'\n');
    s
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], entries: &mut Vec<ManifestEntry>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    entries.push(ManifestEntry {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, pretty_json(manifest)).map_err(|e| Error::io(&path, e))
}

fn manifest_for(config: &ScenarioConfig, started_at: String, files: Vec<ManifestEntry>) -> RunManifest {
    RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(config),
        seed: config.seed,
        started_at,
        finished_at: timestamp(),
        failure: None,
        files,
    }
}

/// Writes the full file set of a scenario run into `out_dir`. A run that
/// stopped early still writes its completed rounds; `metrics.json` is then
/// omitted if no round completed.
pub fn write_outputs(result: &ScenarioResult, config: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    let started_at = timestamp();
    let _lock = OutDirLock::acquire(out_dir)?;
    let mut files = Vec::new();
    write_result_files(result, out_dir, &mut files)?;
    let mut manifest = manifest_for(config, started_at, files);
    manifest.failure = result.failure.as_ref().map(|f| {
        format!(
            "round {} did not converge after {} iterations (residual {:e})",
            f.round, f.iterations, f.residual
        )
    });
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

fn write_result_files(result: &ScenarioResult, dir: &Path, files: &mut Vec<ManifestEntry>) -> Result<()> {
    write_file(dir, FUNDING_FILE, &funding_csv(result), files)?;
    write_file(dir, TRANSFERS_FILE, &transfers_csv(&result.ledger, &result.community), files)?;
    match &result.metrics {
        Some(m) => write_file(dir, METRICS_FILE, &pretty_json(m), files)?,
        None => {
            let stale = dir.join(METRICS_FILE);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
    }
    write_file(dir, INTEGRITY_FILE, &pretty_json(&result.integrity), files)
}

/// One subdirectory per domain, each with the regular file set; the
/// top-level manifest lists every file.
pub fn write_partitioned_outputs(
    parts: &[PartitionResult],
    config: &ScenarioConfig,
    out_dir: &Path,
) -> Result<RunManifest> {
    let started_at = timestamp();
    let _lock = OutDirLock::acquire(out_dir)?;
    let mut files = Vec::new();
    let mut failures = Vec::new();
    for part in parts {
        let sub = out_dir.join(&part.domain);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut local = Vec::new();
        write_result_files(&part.result, &sub, &mut local)?;
        files.extend(local.into_iter().map(|mut e| {
            e.path = format!("{}/{}", part.domain, e.path);
            e
        }));
        if let Some(f) = &part.result.failure {
            failures.push(format!("{}: round {} did not converge", part.domain, f.round));
        }
    }
    let mut manifest = manifest_for(config, started_at, files);
    if !failures.is_empty() {
        manifest.failure = Some(failures.join("; "));
    }
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

/// `sweep.json` plus a two-column `sweep.csv` of fraction and Gini.
pub fn write_sweep(sweep: &SweepResult, config: &ScenarioConfig, out_dir: &Path) -> Result<RunManifest> {
    let started_at = timestamp();
    let _lock = OutDirLock::acquire(out_dir)?;
    let mut files = Vec::new();
    write_file(out_dir, SWEEP_FILE, &pretty_json(sweep), &mut files)?;
    let mut w = csv_writer();
    w.write_record(["fraction", "gini", "error"]).expect("in-memory write");
    for p in &sweep.points {
        w.write_record([
            format_amount(p.fraction),
            p.gini.map(format_amount).unwrap_or_default(),
            p.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    write_file(out_dir, SWEEP_CSV_FILE, &finish(w), &mut files)?;
    let manifest = manifest_for(config, started_at, files);
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn check_header(reader: &mut csv::Reader<File>, expected: &[&str], path: &Path) -> Result<()> {
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: expected header {}, found {}",
            path.display(),
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, k: usize, path: &Path, line: u64) -> Result<T> {
    record
        .get(k)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("{}:{line}: bad value in column {}", path.display(), k + 1)))
}

/// Reads a transfers CSV against a community. Unknown ids are an error.
pub fn read_transfers_csv(path: &Path, community: &Community) -> Result<DonationLedger> {
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, &TRANSFERS_HEADER, path)?;
    let mut ledger = DonationLedger::default();
    let mut unknown = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let round: usize = field(&record, 0, path, line)?;
        let amount: f64 = field(&record, 3, path, line)?;
        let donor = community.position_of(&record[1]);
        let recipient = community.position_of(&record[2]);
        match (donor, recipient) {
            (Some(donor), Some(recipient)) => ledger.push(Transfer {
                round,
                donor,
                recipient,
                amount,
            }),
            _ => {
                for (k, pos) in [(1, donor), (2, recipient)] {
                    if pos.is_none() {
                        unknown.insert(record[k].to_string());
                    }
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::validation(
            "transfers reference agents missing from the community",
            unknown.into_iter().collect(),
        ));
    }
    Ok(ledger)
}

/// One row of `funding_per_round.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundingRow {
    pub round: usize,
    pub agent_id: String,
    pub incoming_total: f64,
    pub retained: f64,
    pub donated: f64,
}

pub fn read_funding_csv(path: &Path) -> Result<Vec<FundingRow>> {
    let mut reader = csv_reader(path)?;
    check_header(&mut reader, &FUNDING_HEADER, path)?;
    reader
        .records()
        .map(|record| {
            let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let line = record.position().map_or(0, |p| p.line());
            Ok(FundingRow {
                round: field(&record, 0, path, line)?,
                agent_id: record[1].to_string(),
                incoming_total: field(&record, 2, path, line)?,
                retained: field(&record, 3, path, line)?,
                donated: field(&record, 4, path, line)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_integrity_report(report: &IntegrityReport, path: &Path) -> Result<()> {
    fs::write(path, pretty_json(report)).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    fs::write(path, pretty_json(value)).map_err(|e| Error::io(path, e))
}
