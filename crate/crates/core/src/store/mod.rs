//! Crash-safe checkpoint persistence.
//!
//! A commit writes `ckpt-<epoch:010>.dck.tmp`, flushes it to stable storage,
//! then renames it to `ckpt-<epoch:010>.dck` and flushes the directory. A file
//! under the final name is therefore either complete or the result of
//! external damage, and restore validates every file before trusting it.

pub mod format;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

pub use format::{
    AsSegment, CheckpointManifest, CheckpointSegment, EncodeError, FormatError, SegmentEntry,
};

const PREFIX: &str = "ckpt-";
const SUFFIX: &str = ".dck";
const TMP_SUFFIX: &str = ".tmp";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("epoch {epoch} is not greater than the latest committed epoch {latest}")]
    NonMonotonicEpoch { epoch: u64, latest: u64 },
    #[error("retention must be at least 2, got {0}")]
    RetentionTooSmall(usize),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(#[from] EncodeError),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    pub fn name(&self) -> &'static str {
        match self {
            StoreError::NonMonotonicEpoch { .. } => "NonMonotonicEpoch",
            StoreError::RetentionTooSmall(_) => "RetentionTooSmall",
            StoreError::InvalidSnapshot(_) => "InvalidSnapshot",
            StoreError::IoFailure { .. } => "IoFailure",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

/// A validated checkpoint read back from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub segments: Vec<CheckpointSegment>,
}

impl Checkpoint {
    pub fn epoch(&self) -> u64 {
        self.manifest.epoch
    }

    pub fn segment(&self, id: &str) -> Option<&CheckpointSegment> {
        self.segments
            .binary_search_by(|s| s.id.as_bytes().cmp(id.as_bytes()))
            .ok()
            .map(|i| &self.segments[i])
    }
}

/// File name for a committed checkpoint of `epoch`.
pub fn file_name(epoch: u64) -> String {
    format!("{PREFIX}{epoch:010}{SUFFIX}")
}

/// Parses a committed checkpoint file name back into its epoch.
pub fn parse_file_name(name: &str) -> Option<u64> {
    let digits = name.strip_prefix(PREFIX)?.strip_suffix(SUFFIX)?;
    if digits.len() < 10 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

pub fn now_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

/// Committed-name files in `dir`, sorted by ascending epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    let read = match fs::read_dir(dir) {
        Ok(r) => r,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in read {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        if let Some(epoch) = name.to_str().and_then(parse_file_name) {
            out.push((epoch, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Highest epoch present under a committed name, valid or not.
pub fn latest_epoch(dir: &Path) -> Result<Option<u64>, StoreError> {
    Ok(list_checkpoints(dir)?.last().map(|(e, _)| *e))
}

/// A checkpoint written to its temporary name but not yet published.
///
/// Dropping it without calling [`StagedCommit::publish`] leaves the temp file
/// behind, which is exactly what a writer crash before the rename does.
#[derive(Debug)]
pub struct StagedCommit {
    dir: PathBuf,
    tmp_path: PathBuf,
    final_path: PathBuf,
    len: u64,
}

impl StagedCommit {
    pub fn temp_path(&self) -> &Path {
        &self.tmp_path
    }

    pub fn final_path(&self) -> &Path {
        &self.final_path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Renames the temp file into place and flushes the directory entry.
    pub fn publish(self) -> Result<String, StoreError> {
        fs::rename(&self.tmp_path, &self.final_path).map_err(io_err(&self.final_path))?;
        sync_dir(&self.dir);
        Ok(self
            .final_path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_owned())
    }
}

fn sync_dir(dir: &Path) {
    // Directory fsync is unsupported on some platforms; the rename itself
    // already happened, so a failure here only weakens durability.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Writes and flushes the temp file for `epoch` without publishing it.
pub fn stage_commit<S: AsSegment>(
    dir: &Path,
    epoch: u64,
    created_at_us: u64,
    segments: &[S],
) -> Result<StagedCommit, StoreError> {
    if let Some(latest) = latest_epoch(dir)? {
        if epoch <= latest {
            return Err(StoreError::NonMonotonicEpoch { epoch, latest });
        }
    }
    let bytes = format::encode(epoch, created_at_us, segments)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let final_path = dir.join(file_name(epoch));
    let tmp_path = dir.join(format!("{}{TMP_SUFFIX}", file_name(epoch)));
    let write = || -> io::Result<()> {
        let mut f = File::create(&tmp_path)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    if let Err(e) = write() {
        let _ = fs::remove_file(&tmp_path);
        return Err(io_err(&tmp_path)(e));
    }
    Ok(StagedCommit {
        dir: dir.to_path_buf(),
        tmp_path,
        final_path,
        len: bytes.len() as u64,
    })
}

/// Atomically commits `segments` as checkpoint `epoch`, stamped with the current time.
pub fn commit<S: AsSegment>(dir: &Path, epoch: u64, segments: &[S]) -> Result<String, StoreError> {
    commit_at(dir, epoch, now_us(), segments)
}

/// [`commit`] with a caller-supplied creation timestamp.
pub fn commit_at<S: AsSegment>(
    dir: &Path,
    epoch: u64,
    created_at_us: u64,
    segments: &[S],
) -> Result<String, StoreError> {
    stage_commit(dir, epoch, created_at_us, segments)?.publish()
}

/// Reads and fully validates one checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Result<Checkpoint, FormatError>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(format::decode(&bytes).map(|(mut manifest, segments)| {
        manifest.committed = true;
        Checkpoint { manifest, segments }
    }))
}

/// Latest checkpoint that validates completely, skipping damaged files.
pub fn restore_latest(dir: &Path) -> Result<Option<Checkpoint>, StoreError> {
    if !dir.exists() {
        return Ok(None);
    }
    fs::read_dir(dir).map_err(io_err(dir))?;
    for (epoch, path) in list_checkpoints(dir)?.into_iter().rev() {
        match read_checkpoint(&path) {
            Ok(Ok(ckpt)) if ckpt.manifest.epoch == epoch => return Ok(Some(ckpt)),
            Ok(Ok(ckpt)) => log::warn!(
                "{}: header epoch {} does not match file name, skipped",
                path.display(),
                ckpt.manifest.epoch
            ),
            Ok(Err(e)) => log::warn!("{}: invalid checkpoint ({e}), skipped", path.display()),
            // The file may have been pruned between listing and reading.
            Err(e) => log::warn!("{e}, skipped"),
        }
    }
    Ok(None)
}

/// Deletes all but the `retention` highest-epoch valid checkpoints.
/// Invalid files are left in place.
pub fn prune(dir: &Path, retention: usize) -> Result<Vec<String>, StoreError> {
    if retention < 2 {
        return Err(StoreError::RetentionTooSmall(retention));
    }
    let mut valid = Vec::new();
    for (epoch, path) in list_checkpoints(dir)? {
        if let Ok(Ok(c)) = read_checkpoint(&path) {
            if c.manifest.epoch == epoch {
                valid.push(path);
            }
        }
    }
    let excess = valid.len().saturating_sub(retention);
    let mut deleted = Vec::with_capacity(excess);
    for path in valid.into_iter().take(excess) {
        fs::remove_file(&path).map_err(io_err(&path))?;
        deleted.push(
            path.file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_owned(),
        );
    }
    if !deleted.is_empty() {
        sync_dir(dir);
    }
    Ok(deleted)
}

/// Line-oriented `key: value` description of a checkpoint file.
pub fn inspect(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let scan = format::scan(&bytes);
    let mut out = String::new();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let _ = writeln!(out, "file: {name}");
    let _ = writeln!(out, "size: {}", bytes.len());
    if let Some(v) = scan.version {
        let _ = writeln!(out, "format_version: {v}");
    }
    if let Some(e) = scan.epoch {
        let _ = writeln!(out, "epoch: {e}");
    }
    if let Some(t) = scan.created_at_us {
        let _ = writeln!(out, "created_at_us: {t}");
    }
    if let Some(c) = scan.entry_count {
        let _ = writeln!(out, "entry_count: {c}");
    }
    for (i, e) in scan.entries.iter().enumerate() {
        let _ = writeln!(out, "entry.{i}.id: {}", e.id);
        let _ = writeln!(out, "entry.{i}.scope: {}", e.scope);
        let _ = writeln!(out, "entry.{i}.offset: {}", e.offset);
        let _ = writeln!(out, "entry.{i}.length: {}", e.length);
        let _ = writeln!(out, "entry.{i}.checksum: {:08x}", e.checksum);
    }
    if let Some(c) = scan.header_crc {
        let _ = writeln!(out, "header_checksum: {c:08x}");
    }
    let _ = writeln!(out, "verdict: {scan}");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::SegmentScope;

    fn seg(id: &str, payload: &[u8]) -> CheckpointSegment {
        CheckpointSegment {
            id: id.into(),
            scope: SegmentScope::Global,
            payload: payload.to_vec(),
        }
    }

    #[test]
    fn names_roundtrip() {
        assert_eq!(file_name(7), "ckpt-0000000007.dck");
        assert_eq!(parse_file_name("ckpt-0000000007.dck"), Some(7));
        assert_eq!(parse_file_name("ckpt-0000000007.dck.tmp"), None);
        assert_eq!(parse_file_name("ckpt-7.dck"), None);
        assert_eq!(parse_file_name(&file_name(u64::MAX)), Some(u64::MAX));
    }

    #[test]
    fn commit_and_restore() {
        let dir = tempfile::tempdir().unwrap();
        let name = commit(dir.path(), 0, &[seg("m", &[1, 2, 3])]).unwrap();
        assert_eq!(name, "ckpt-0000000000.dck");
        let ckpt = restore_latest(dir.path()).unwrap().unwrap();
        assert_eq!(ckpt.epoch(), 0);
        assert!(ckpt.manifest.committed);
        assert_eq!(ckpt.segments, vec![seg("m", &[1, 2, 3])]);
        assert_eq!(ckpt.segment("m").unwrap().payload, [1, 2, 3]);
        assert!(ckpt.segment("n").is_none());
    }

    #[test]
    fn epochs_must_increase() {
        let dir = tempfile::tempdir().unwrap();
        commit(dir.path(), 5, &[seg("m", b"")]).unwrap();
        match commit(dir.path(), 5, &[seg("m", b"")]) {
            Err(StoreError::NonMonotonicEpoch { epoch: 5, latest: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(commit(dir.path(), 4, &[seg("m", b"")]).is_err());
        assert!(commit(dir.path(), 6, &[seg("m", b"")]).is_ok());
    }

    #[test]
    fn empty_or_missing_directory_restores_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(restore_latest(dir.path()).unwrap().is_none());
        assert!(restore_latest(&dir.path().join("nope")).unwrap().is_none());
    }

    #[test]
    fn highest_epoch_wins_and_corruption_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        commit(dir.path(), 3, &[seg("m", b"three")]).unwrap();
        commit(dir.path(), 9, &[seg("m", b"nine")]).unwrap();
        assert_eq!(restore_latest(dir.path()).unwrap().unwrap().epoch(), 9);

        let p = dir.path().join(file_name(9));
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        let ckpt = restore_latest(dir.path()).unwrap().unwrap();
        assert_eq!(ckpt.epoch(), 3);
        assert_eq!(ckpt.segments[0].payload, b"three");
        // Corrupted files are kept for forensics.
        assert!(p.exists());
    }

    #[test]
    fn unpublished_stage_is_invisible() {
        let dir = tempfile::tempdir().unwrap();
        commit(dir.path(), 1, &[seg("m", b"one")]).unwrap();
        let staged = stage_commit(dir.path(), 2, 0, &[seg("m", b"two")]).unwrap();
        assert!(staged.temp_path().exists());
        assert!(!staged.final_path().exists());
        assert_eq!(restore_latest(dir.path()).unwrap().unwrap().epoch(), 1);
        staged.publish().unwrap();
        assert_eq!(restore_latest(dir.path()).unwrap().unwrap().epoch(), 2);
    }

    #[test]
    fn mismatched_header_epoch_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        commit(dir.path(), 1, &[seg("m", b"one")]).unwrap();
        let bytes = format::encode(4, 0, &[seg("m", b"x")]).unwrap();
        fs::write(dir.path().join(file_name(8)), bytes).unwrap();
        assert_eq!(restore_latest(dir.path()).unwrap().unwrap().epoch(), 1);
    }

    #[test]
    fn prune_keeps_top_k() {
        let dir = tempfile::tempdir().unwrap();
        for e in 1..=5 {
            commit(dir.path(), e, &[seg("m", b"x")]).unwrap();
        }
        let deleted = prune(dir.path(), 2).unwrap();
        assert_eq!(deleted, vec![file_name(1), file_name(2), file_name(3)]);
        let left: Vec<u64> = list_checkpoints(dir.path())
            .unwrap()
            .into_iter()
            .map(|(e, _)| e)
            .collect();
        assert_eq!(left, vec![4, 5]);
        assert!(matches!(
            prune(dir.path(), 1),
            Err(StoreError::RetentionTooSmall(1))
        ));
    }

    #[test]
    fn prune_with_few_files_and_invalid_files() {
        let dir = tempfile::tempdir().unwrap();
        commit(dir.path(), 1, &[seg("m", b"x")]).unwrap();
        assert!(prune(dir.path(), 2).unwrap().is_empty());
        fs::write(dir.path().join(file_name(0)), b"garbage").unwrap();
        commit(dir.path(), 2, &[seg("m", b"x")]).unwrap();
        commit(dir.path(), 3, &[seg("m", b"x")]).unwrap();
        assert_eq!(prune(dir.path(), 2).unwrap(), vec![file_name(1)]);
        assert!(dir.path().join(file_name(0)).exists());
    }

    #[test]
    fn inspect_reports_verdicts() {
        let dir = tempfile::tempdir().unwrap();
        commit_at(dir.path(), 3, 42, &[seg("a", b"1"), seg("b", b"22")]).unwrap();
        let path = dir.path().join(file_name(3));
        let text = inspect(&path).unwrap();
        assert!(text.contains("epoch: 3\n"));
        assert!(text.contains("created_at_us: 42\n"));
        assert!(text.contains("entry_count: 2\n"));
        assert!(text.contains("entry.1.id: b\n"));
        assert!(text.contains("entry.1.scope: global\n"));
        assert!(text.ends_with("verdict: valid\n"));
        for line in text.lines() {
            assert!(line.contains(": "), "not key: value: {line}");
        }

        let bytes = fs::read(&path).unwrap();
        let truncated = dir.path().join("trunc.dck");
        fs::write(&truncated, &bytes[..format::FIXED_HEADER_LEN + 2]).unwrap();
        assert!(inspect(&truncated)
            .unwrap()
            .ends_with("verdict: invalid: truncated entry table\n"));

        let mut magic = bytes.clone();
        magic[..4].copy_from_slice(b"NOPE");
        let bad = dir.path().join("magic.dck");
        fs::write(&bad, magic).unwrap();
        assert!(inspect(&bad).unwrap().ends_with("verdict: invalid: bad magic\n"));

        assert!(matches!(
            inspect(&dir.path().join("missing.dck")),
            Err(StoreError::IoFailure { .. })
        ));
    }
}
