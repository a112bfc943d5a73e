//! The file-backed session store: an append-only event log, the persistent
//! client/agent bridge, and consumer cursors.
//!
//! ```text
//! <session>/events.jsonl
//! <session>/bridge/inbox.jsonl     client -> agents
//! <session>/bridge/outbox.jsonl    agents -> client
//! <session>/cursors.json
//! ```
//!
//! A record's sequence number is its 1-based line number. Appends are a single
//! `write(2)` on an `O_APPEND` descriptor, which is what "durable" means here:
//! the record survives the writer process dying. It is not fsynced.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use pilotkit_core::Event;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("no session at {0}")]
    NoSuchSession(PathBuf),
    #[error("session store io failure: {0}")]
    Io(#[from] io::Error),
    #[error("cannot encode record: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("from_sequence must be at least 1")]
    BadSequence,
}

/// A line that failed to parse during replay, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("corrupt record at line {line}: {reason}")]
pub struct CorruptRecord {
    pub line: u64,
    pub reason: String,
}

/// Replay output: records in sequence order plus skipped lines.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay<T> {
    pub records: Vec<(u64, T)>,
    pub corrupt: Vec<CorruptRecord>,
}

pub fn events_path(dir: &Path) -> PathBuf {
    dir.join("events.jsonl")
}

pub fn inbox_path(dir: &Path) -> PathBuf {
    dir.join("bridge").join("inbox.jsonl")
}

pub fn outbox_path(dir: &Path) -> PathBuf {
    dir.join("bridge").join("outbox.jsonl")
}

pub fn cursors_path(dir: &Path) -> PathBuf {
    dir.join("cursors.json")
}

/// Creates the session layout; existing files are kept.
pub fn init_session_dir(dir: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(dir.join("bridge"))?;
    for p in [events_path(dir), inbox_path(dir), outbox_path(dir)] {
        OpenOptions::new().create(true).append(true).open(p)?;
    }
    Ok(())
}

pub fn is_session_dir(dir: &Path) -> bool {
    events_path(dir).is_file()
}

/// An append-only JSONL file with one writer object per process.
#[derive(Debug)]
pub struct AppendLog {
    path: PathBuf,
    inner: Mutex<(File, u64)>,
}

fn count_lines(path: &Path) -> io::Result<(u64, bool)> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let n = buf.iter().filter(|&&b| b == b'\n').count() as u64;
    let torn = !buf.is_empty() && *buf.last().unwrap() != b'\n';
    Ok((n, torn))
}

impl AppendLog {
    /// Opens (creating) `path`. A torn final line left by a crashed writer
    /// is terminated so later records start on a fresh line; it then counts
    /// as one corrupt record.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(path)?;
        let (mut lines, torn) = count_lines(path)?;
        if torn {
            file.write_all(b"\n")?;
            lines += 1;
        }
        Ok(AppendLog {
            path: path.to_path_buf(),
            inner: Mutex::new((file, lines)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends raw lines in one write; returns the sequence number of the last.
    pub fn append_lines(&self, lines: &[String]) -> Result<u64, StoreError> {
        let mut buf = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
        for l in lines {
            debug_assert!(!l.contains('\n'));
            buf.push_str(l);
            buf.push('\n');
        }
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        if !buf.is_empty() {
            g.0.write_all(buf.as_bytes())?;
        }
        g.1 += lines.len() as u64;
        Ok(g.1)
    }

    pub fn append<T: Serialize>(&self, records: &[T]) -> Result<u64, StoreError> {
        let lines = records
            .iter()
            .map(serde_json::to_string)
            .collect::<Result<Vec<_>, _>>()?;
        self.append_lines(&lines)
    }

    pub fn len(&self) -> u64 {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Appends to a shared file without keeping it open, for writers in other
/// processes (agents writing the outbox).
pub fn append_shared<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StoreError> {
    if records.is_empty() {
        return Ok(());
    }
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Reads every record with sequence ≥ `from`, skipping and reporting lines
/// that do not parse. An unterminated final line is reported as corrupt.
pub fn replay<T: DeserializeOwned>(path: &Path, from: u64) -> Result<Replay<T>, StoreError> {
    if from < 1 {
        return Err(StoreError::BadSequence);
    }
    let text = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut out = Replay {
        records: Vec::new(),
        corrupt: Vec::new(),
    };
    let complete = text.last() == Some(&b'\n');
    let mut lines: Vec<&[u8]> = text.split(|&b| b == b'\n').collect();
    if complete || text.is_empty() {
        lines.pop();
    }
    let last = lines.len();
    for (i, raw) in lines.into_iter().enumerate() {
        let seq = i as u64 + 1;
        if seq < from {
            continue;
        }
        if i + 1 == last && !complete {
            out.corrupt.push(CorruptRecord {
                line: seq,
                reason: "truncated record".into(),
            });
            continue;
        }
        match std::str::from_utf8(raw)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<T>(s).map_err(|e| e.to_string()))
        {
            Ok(r) => out.records.push((seq, r)),
            Err(reason) => out.corrupt.push(CorruptRecord { line: seq, reason }),
        }
    }
    Ok(out)
}

/// One line read by [`LogTail`]: its sequence number and parse result.
pub type TailRecord<T> = (u64, Result<T, CorruptRecord>);

/// Incremental reader of a growing JSONL file: yields complete lines only and
/// remembers where it stopped.
#[derive(Debug)]
pub struct LogTail {
    path: PathBuf,
    offset: u64,
    line: u64,
}

impl LogTail {
    pub fn new(path: &Path) -> Self {
        LogTail {
            path: path.to_path_buf(),
            offset: 0,
            line: 0,
        }
    }

    /// Lines consumed so far.
    pub fn position(&self) -> u64 {
        self.line
    }

    /// New complete lines as (sequence, parse result).
    pub fn read_new<T: DeserializeOwned>(&mut self) -> Result<Vec<TailRecord<T>>, StoreError> {
        let mut f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        f.seek(SeekFrom::Start(self.offset))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let Some(end) = buf.iter().rposition(|&b| b == b'\n') else {
            return Ok(Vec::new());
        };
        self.offset += end as u64 + 1;
        let mut out = Vec::new();
        for raw in buf[..end].split(|&b| b == b'\n') {
            self.line += 1;
            let parsed = std::str::from_utf8(raw)
                .map_err(|e| e.to_string())
                .and_then(|s| serde_json::from_str::<T>(s).map_err(|e| e.to_string()))
                .map_err(|reason| CorruptRecord {
                    line: self.line,
                    reason,
                });
            out.push((self.line, parsed));
        }
        Ok(out)
    }
}

/// Merges `name -> position` into cursors.json under an exclusive file lock,
/// so several processes can record their consumer positions.
pub fn save_cursor(dir: &Path, name: &str, position: u64) -> Result<(), StoreError> {
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join(".cursors.lock"))?;
    // SAFETY: flock on a descriptor we own; released when `lock` is dropped.
    unsafe {
        libc::flock(lock.as_raw_fd(), libc::LOCK_EX);
    }
    let mut cursors = load_cursors(dir)?;
    cursors.insert(name.into(), position);
    let tmp = dir.join(".cursors.json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&cursors)?)?;
    fs::rename(tmp, cursors_path(dir))?;
    Ok(())
}

pub fn load_cursors(dir: &Path) -> Result<BTreeMap<String, u64>, StoreError> {
    match fs::read(cursors_path(dir)) {
        Ok(b) => Ok(serde_json::from_slice(&b).unwrap_or_default()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(BTreeMap::new()),
        Err(e) => Err(e.into()),
    }
}

/// The event log of one session. All writers in a process share this object,
/// which serializes their appends.
#[derive(Debug)]
pub struct SessionStore {
    id: String,
    dir: PathBuf,
    events: AppendLog,
}

impl SessionStore {
    /// Creates the session directory if needed and opens it for appending.
    pub fn create(dir: &Path) -> Result<Self, StoreError> {
        init_session_dir(dir)?;
        Self::open(dir)
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        if !is_session_dir(dir) {
            return Err(StoreError::NoSuchSession(dir.to_path_buf()));
        }
        Ok(SessionStore {
            id: session_id_of(dir),
            dir: dir.to_path_buf(),
            events: AppendLog::open(&events_path(dir))?,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn persist(&self, event: &Event) -> Result<u64, StoreError> {
        self.events.append(std::slice::from_ref(event))
    }

    /// Persists `events` in one write; returns the last sequence number.
    pub fn persist_bulk(&self, events: &[Event]) -> Result<u64, StoreError> {
        self.events.append(events)
    }

    pub fn len(&self) -> u64 {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn replay(&self, from: u64) -> Result<Replay<Event>, StoreError> {
        replay(&events_path(&self.dir), from)
    }
}

pub fn session_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "session".into())
}

/// Reads a session's events without opening it for writing.
pub fn replay_events(dir: &Path) -> Result<Replay<Event>, StoreError> {
    if !is_session_dir(dir) {
        return Err(StoreError::NoSuchSession(dir.to_path_buf()));
    }
    replay(&events_path(dir), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pilotkit_core::{EntityKind, Timestamp};

    fn ev(i: u64) -> Event {
        Event::new(
            Timestamp::from_mono(i),
            EntityKind::Unit,
            format!("unit.{i:06}"),
            "NEW",
            "test",
        )
    }

    #[test]
    fn sequence_numbers_and_replay_ranges() {
        let d = tempfile::tempdir().unwrap();
        let s = SessionStore::create(&d.path().join("s1")).unwrap();
        assert!(s.replay(1).unwrap().records.is_empty());
        let seqs: Vec<u64> = (1..=3).map(|i| s.persist(&ev(i)).unwrap()).collect();
        assert_eq!(seqs, [1, 2, 3]);
        s.persist_bulk(&[ev(4), ev(5)]).unwrap();
        let r = s.replay(3).unwrap();
        assert_eq!(r.records.iter().map(|(n, _)| *n).collect::<Vec<_>>(), [3, 4, 5]);
        assert_eq!(r.records[0].1, ev(3));
        assert!(s.replay(6).unwrap().records.is_empty());
        assert!(matches!(s.replay(0), Err(StoreError::BadSequence)));
    }

    #[test]
    fn truncated_final_line_is_reported() {
        let d = tempfile::tempdir().unwrap();
        let dir = d.path().join("s");
        let s = SessionStore::create(&dir).unwrap();
        for i in 1..=5 {
            s.persist(&ev(i)).unwrap();
        }
        drop(s);
        let p = events_path(&dir);
        let len = fs::metadata(&p).unwrap().len();
        OpenOptions::new()
            .write(true)
            .open(&p)
            .unwrap()
            .set_len(len - 10)
            .unwrap();
        let r = replay::<Event>(&p, 1).unwrap();
        assert_eq!(r.records.len(), 4);
        assert_eq!(r.corrupt.len(), 1);
        assert_eq!(r.corrupt[0].line, 5);

        // Reopening terminates the torn line; new records follow it.
        let s = SessionStore::open(&dir).unwrap();
        assert_eq!(s.persist(&ev(6)).unwrap(), 6);
        let r = s.replay(1).unwrap();
        assert_eq!(r.records.len(), 5);
        assert_eq!(r.records.last().unwrap().0, 6);
        assert_eq!(r.corrupt.len(), 1);
    }

    #[test]
    fn replay_is_byte_stable() {
        let d = tempfile::tempdir().unwrap();
        let s = SessionStore::create(&d.path().join("s")).unwrap();
        for i in 0..20 {
            s.persist(&ev(i)).unwrap();
        }
        let a = serde_json::to_string(&s.replay(1).unwrap().records).unwrap();
        let b = serde_json::to_string(&s.replay(1).unwrap().records).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tail_reads_only_complete_lines() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x.jsonl");
        let mut tail = LogTail::new(&p);
        assert!(tail.read_new::<u32>().unwrap().is_empty());
        fs::write(&p, "1\n2\n3").unwrap();
        let got: Vec<u32> = tail
            .read_new::<u32>()
            .unwrap()
            .into_iter()
            .map(|(_, r)| r.unwrap())
            .collect();
        assert_eq!(got, [1, 2]);
        OpenOptions::new()
            .append(true)
            .open(&p)
            .unwrap()
            .write_all(b"4\nzz\n")
            .unwrap();
        let got = tail.read_new::<u32>().unwrap();
        assert_eq!(got[0], (3, Ok(34)));
        assert_eq!(got[1].0, 4);
        assert!(got[1].1.is_err());
        assert_eq!(tail.position(), 4);
    }

    #[test]
    fn cursors_merge() {
        let d = tempfile::tempdir().unwrap();
        init_session_dir(d.path()).unwrap();
        save_cursor(d.path(), "a", 3).unwrap();
        save_cursor(d.path(), "b", 5).unwrap();
        save_cursor(d.path(), "a", 4).unwrap();
        let c = load_cursors(d.path()).unwrap();
        assert_eq!(c["a"], 4);
        assert_eq!(c["b"], 5);
    }

    #[test]
    fn missing_session() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            SessionStore::open(&d.path().join("nope")),
            Err(StoreError::NoSuchSession(_))
        ));
    }
}
