//! Persistence, backup archives, the exchange file and the absentee report.
//!
//! The absentee report is the per-lecture query
//!
//! ```sql
//! SELECT Attend.student_id, name1, name2,
//!        SUM(CASE WHEN attend = '0' THEN 1 ELSE 0 END) AS Absent
//! FROM Attend, Student
//! WHERE Attend.student_id = Student.student_id AND lecture_id = ?
//! GROUP BY Attend.student_id
//! HAVING SUM(CASE WHEN attend = '0' THEN 1 ELSE 0 END) >= ?
//! ORDER BY Attend.student_id;
//! ```
//!
//! evaluated over the relational view of a replica, with `date` as part of
//! the Attend primary key.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AttendanceCode, AttendanceRecord, Session, SessionStatus, Timestamp};
use crate::roster::Roster;
use crate::sync::ReplicaState;
use crate::system::AttendanceSystem;

pub const EXCHANGE_MAGIC: &str = "ams-exchange/1";
pub const BACKUP_FORMAT_VERSION: u32 = 1;
const BACKUP_MAGIC: &[u8; 4] = b"AMSB";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no snapshot at {0}")]
    NoSnapshot(PathBuf),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported backup format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("corrupt exchange file: {0}")]
    CorruptFile(String),
    #[error("i/o failure: {0}")]
    IoFailure(String),
    #[error("unknown lecture {0:?}")]
    UnknownLecture(String),
}

fn io_err(path: &Path, err: std::io::Error) -> StoreError {
    StoreError::IoFailure(format!("{}: {err}", path.display()))
}

// ---------------------------------------------------------------------------
// Relational view

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StudentRow {
    pub student_id: String,
    pub name1: String,
    pub name2: String,
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AttendRow {
    pub student_id: String,
    pub lecture_id: String,
    pub date: NaiveDate,
    pub attend: AttendanceCode,
}

/// Attend table of a replica, ordered by its primary key.
pub fn attend_table(replica: &ReplicaState) -> Vec<AttendRow> {
    let mut rows: Vec<AttendRow> = replica
        .records()
        .map(|r| AttendRow {
            student_id: r.student_id.clone(),
            lecture_id: r.lecture_id.clone(),
            date: r.date,
            attend: r.code,
        })
        .collect();
    rows.sort();
    rows
}

pub fn student_table(roster: &Roster) -> Vec<StudentRow> {
    roster
        .students()
        .map(|s| StudentRow {
            student_id: s.student_id.clone(),
            name1: s.name1.clone(),
            name2: s.name2.clone(),
            email: s.email.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsenteeRow {
    pub student_id: String,
    pub name1: String,
    pub name2: String,
    pub absent_count: usize,
}

/// Per-student absence counts for a lecture, ordered by student_id.
pub fn absence_counts(replica: &ReplicaState, lecture_id: &str) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in replica.records().filter(|r| r.lecture_id == lecture_id) {
        *counts.entry(r.student_id.clone()).or_insert(0) +=
            usize::from(r.code == AttendanceCode::Absent);
    }
    counts
}

pub fn absentee_report(
    roster: &Roster,
    replica: &ReplicaState,
    lecture_id: &str,
    min_absences: usize,
) -> Result<Vec<AbsenteeRow>, StoreError> {
    roster
        .lecture(lecture_id)
        .map_err(|_| StoreError::UnknownLecture(lecture_id.to_string()))?;
    Ok(absence_counts(replica, lecture_id)
        .into_iter()
        .filter(|(_, n)| *n >= min_absences)
        .filter_map(|(id, absent_count)| {
            roster.student(&id).map(|s| AbsenteeRow {
                student_id: id,
                name1: s.name1.clone(),
                name2: s.name2.clone(),
                absent_count,
            })
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Backup archive

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackupArchive {
    pub format_version: u32,
    pub payload: Vec<u8>,
    /// CRC-32 (IEEE) of `payload`.
    pub checksum: u32,
}

impl BackupArchive {
    /// `AMSB`, version (u32 BE), crc (u32 BE), payload length (u64 BE), payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.payload.len());
        out.extend_from_slice(BACKUP_MAGIC);
        out.extend_from_slice(&self.format_version.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let corrupt = |m: &str| StoreError::CorruptArchive(m.to_string());
        if bytes.len() < 20 {
            return Err(corrupt("truncated header"));
        }
        if &bytes[..4] != BACKUP_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let word = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let len = u64::from_be_bytes(bytes[12..20].try_into().unwrap());
        let payload = &bytes[20..];
        if payload.len() as u64 != len {
            return Err(corrupt("payload length does not match header"));
        }
        Ok(BackupArchive {
            format_version: word(4),
            checksum: word(8),
            payload: payload.to_vec(),
        })
    }
}

pub fn backup(system: &AttendanceSystem) -> BackupArchive {
    let payload = serde_json::to_vec(system).expect("system state always serializes");
    BackupArchive {
        format_version: BACKUP_FORMAT_VERSION,
        checksum: crc32fast::hash(&payload),
        payload,
    }
}

pub fn restore(archive: &BackupArchive) -> Result<AttendanceSystem, StoreError> {
    if archive.format_version != BACKUP_FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(archive.format_version));
    }
    let computed = crc32fast::hash(&archive.payload);
    if computed != archive.checksum {
        return Err(StoreError::ChecksumMismatch {
            stored: archive.checksum,
            computed,
        });
    }
    serde_json::from_slice(&archive.payload).map_err(|e| StoreError::CorruptArchive(e.to_string()))
}

// ---------------------------------------------------------------------------
// Snapshots

/// Single-file snapshot store. Writes go to a temporary file in the same
/// directory and are renamed over the snapshot, so a reader only ever sees
/// a complete snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    path: PathBuf,
}

impl SnapshotStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        SnapshotStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    pub fn save(&self, system: &AttendanceSystem) -> Result<(), StoreError> {
        write_atomic(&self.path, &backup(system).to_bytes(), None)
    }

    pub fn load(&self) -> Result<AttendanceSystem, StoreError> {
        let bytes = match fs::read(&self.path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NoSnapshot(self.path.clone()))
            }
            Err(e) => return Err(io_err(&self.path, e)),
        };
        let archive = BackupArchive::from_bytes(&bytes)
            .map_err(|e| StoreError::CorruptSnapshot(e.to_string()))?;
        restore(&archive).map_err(|e| StoreError::CorruptSnapshot(e.to_string()))
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
/// `crash_after` truncates the write at that many bytes and abandons it
/// before the rename, as a process dying mid-write would.
fn write_atomic(path: &Path, bytes: &[u8], crash_after: Option<usize>) -> Result<(), StoreError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::Builder::new()
        .prefix(".ams-")
        .suffix(".tmp")
        .tempfile_in(dir)
        .map_err(|e| io_err(dir, e))?;
    if let Some(n) = crash_after {
        tmp.write_all(&bytes[..n.min(bytes.len())])
            .map_err(|e| io_err(path, e))?;
        let (_, leaked) = tmp.keep().map_err(|e| io_err(path, e.error))?;
        return Err(StoreError::IoFailure(format!(
            "simulated crash, partial file left at {}",
            leaked.display()
        )));
    }
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Exchange file

/// Portable line-oriented dump used for offline merges and reporting:
///
/// ```text
/// ams-exchange/1
/// [student]
/// student_id<TAB>name1<TAB>name2<TAB>email
/// [attend]
/// student_id<TAB>lecture_id<TAB>date<TAB>attend<TAB>recorded_at_ms<TAB>device_id
/// [session]
/// lecture_id<TAB>date<TAB>device_id<TAB>opened_at_ms<TAB>closed_at_ms<TAB>status
/// #crc32=<8 hex digits over every preceding byte>
/// ```
///
/// Rows are sorted; empty optional timestamps are empty fields. Tabs,
/// newlines and backslashes inside fields are written as `\t`, `\n`, `\\`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeFile {
    pub students: Vec<StudentRow>,
    pub replica: ReplicaState,
}

impl ExchangeFile {
    /// Student table plus a placeholder row for any record whose student the
    /// roster does not know, so the file is referentially complete.
    pub fn from_system(system: &AttendanceSystem) -> Self {
        ExchangeFile::from_parts(student_table(&system.roster), system.replica.clone())
    }

    pub fn from_parts(students: Vec<StudentRow>, replica: ReplicaState) -> Self {
        let mut by_id: BTreeMap<String, StudentRow> = students
            .into_iter()
            .map(|s| (s.student_id.clone(), s))
            .collect();
        for r in replica.records() {
            by_id
                .entry(r.student_id.clone())
                .or_insert_with(|| StudentRow {
                    student_id: r.student_id.clone(),
                    name1: String::new(),
                    name2: String::new(),
                    email: String::new(),
                });
        }
        ExchangeFile {
            students: by_id.into_values().collect(),
            replica,
        }
    }

    /// Union of two files: records joined, first file's student rows win.
    pub fn merge(&self, other: &ExchangeFile) -> ExchangeFile {
        let mut students = self.students.clone();
        let known: BTreeSet<&str> = self
            .students
            .iter()
            .map(|s| s.student_id.as_str())
            .collect();
        students.extend(
            other
                .students
                .iter()
                .filter(|s| !known.contains(s.student_id.as_str()))
                .cloned(),
        );
        ExchangeFile::from_parts(
            students,
            crate::sync::merge_state(&self.replica, &other.replica),
        )
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(EXCHANGE_MAGIC);
        out.push('\n');
        out.push_str("[student]\n");
        for s in &self.students {
            push_row(&mut out, &[&s.student_id, &s.name1, &s.name2, &s.email]);
        }
        out.push_str("[attend]\n");
        let mut records: Vec<&AttendanceRecord> = self.replica.records().collect();
        records.sort_by(|a, b| {
            (&a.student_id, &a.lecture_id, a.date).cmp(&(&b.student_id, &b.lecture_id, b.date))
        });
        for r in records {
            push_row(
                &mut out,
                &[
                    &r.student_id,
                    &r.lecture_id,
                    &r.date.to_string(),
                    &r.code.as_char().to_string(),
                    &r.recorded_at.millis().to_string(),
                    &r.device_id,
                ],
            );
        }
        out.push_str("[session]\n");
        for s in self.replica.sessions() {
            let ts = |t: Option<Timestamp>| t.map(|t| t.millis().to_string()).unwrap_or_default();
            let status = match s.status {
                SessionStatus::Open => "open",
                SessionStatus::Closed => "closed",
            };
            push_row(
                &mut out,
                &[
                    &s.lecture_id,
                    &s.date.to_string(),
                    &s.device_id,
                    &ts(s.opened_at),
                    &ts(s.closed_at),
                    status,
                ],
            );
        }
        let crc = crc32fast::hash(out.as_bytes());
        out.push_str(&format!("#crc32={crc:08x}\n"));
        out
    }

    pub fn parse(text: &str) -> Result<ExchangeFile, StoreError> {
        let corrupt = |m: String| StoreError::CorruptFile(m);
        let body_end = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|i| i + 1)
            .ok_or_else(|| corrupt("missing checksum line".into()))?;
        let (body, footer) = text.split_at(body_end);
        let footer = footer.trim_end_matches('\n');
        let stored = footer
            .strip_prefix("#crc32=")
            .filter(|h| h.len() == 8)
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| corrupt(format!("bad checksum line {footer:?}")))?;
        let computed = crc32fast::hash(body.as_bytes());
        if stored != computed {
            return Err(corrupt(format!(
                "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
            )));
        }

        let mut lines = body.lines().enumerate();
        match lines.next() {
            Some((_, EXCHANGE_MAGIC)) => {}
            Some((_, other)) => return Err(corrupt(format!("unsupported format {other:?}"))),
            None => return Err(corrupt("empty file".into())),
        }

        #[derive(PartialEq)]
        enum Section {
            None,
            Student,
            Attend,
            Session,
        }
        let mut section = Section::None;
        let mut students = Vec::new();
        let mut records = Vec::new();
        let mut sessions = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let bad = |m: &str| StoreError::CorruptFile(format!("line {lineno}: {m}"));
            match line {
                "[student]" => section = Section::Student,
                "[attend]" => section = Section::Attend,
                "[session]" => section = Section::Session,
                _ if line.starts_with('[') => return Err(bad("unknown section")),
                _ => {
                    let fields: Vec<String> = line.split('\t').map(unescape).collect();
                    let width = match section {
                        Section::None => return Err(bad("row outside any section")),
                        Section::Student => 4,
                        Section::Attend | Section::Session => 6,
                    };
                    if fields.len() != width {
                        return Err(bad(&format!(
                            "expected {width} fields, got {}",
                            fields.len()
                        )));
                    }
                    let date = |s: &str| {
                        s.parse::<NaiveDate>()
                            .map_err(|_| bad(&format!("bad date {s:?}")))
                    };
                    let millis = |s: &str| {
                        s.parse::<i64>()
                            .map(Timestamp)
                            .map_err(|_| bad(&format!("bad timestamp {s:?}")))
                    };
                    let opt_millis = |s: &str| {
                        if s.is_empty() {
                            Ok(None)
                        } else {
                            millis(s).map(Some)
                        }
                    };
                    match section {
                        Section::Student => students.push(StudentRow {
                            student_id: fields[0].clone(),
                            name1: fields[1].clone(),
                            name2: fields[2].clone(),
                            email: fields[3].clone(),
                        }),
                        Section::Attend => {
                            let mut chars = fields[3].chars();
                            let code = match (chars.next(), chars.next()) {
                                (Some(c), None) => AttendanceCode::from_char(c),
                                _ => None,
                            }
                            .ok_or_else(|| bad("attend must be 0 or 1"))?;
                            records.push(AttendanceRecord {
                                student_id: fields[0].clone(),
                                lecture_id: fields[1].clone(),
                                date: date(&fields[2])?,
                                code,
                                recorded_at: millis(&fields[4])?,
                                device_id: fields[5].clone(),
                            });
                        }
                        Section::Session => {
                            let status = match fields[5].as_str() {
                                "open" => SessionStatus::Open,
                                "closed" => SessionStatus::Closed,
                                _ => return Err(bad("status must be open or closed")),
                            };
                            let closed_at = opt_millis(&fields[4])?;
                            if closed_at.is_some() != (status == SessionStatus::Closed) {
                                return Err(bad("closed_at set iff status is closed"));
                            }
                            sessions.push(Session {
                                lecture_id: fields[0].clone(),
                                date: date(&fields[1])?,
                                device_id: fields[2].clone(),
                                opened_at: opt_millis(&fields[3])?,
                                closed_at,
                                status,
                            });
                        }
                        Section::None => unreachable!(),
                    }
                }
            }
        }

        let mut ids = BTreeSet::new();
        for s in &students {
            if !ids.insert(s.student_id.as_str()) {
                return Err(corrupt(format!("duplicate student {:?}", s.student_id)));
            }
        }
        let mut keys = BTreeSet::new();
        for r in &records {
            if !ids.contains(r.student_id.as_str()) {
                return Err(corrupt(format!(
                    "attend row for unknown student {:?}",
                    r.student_id
                )));
            }
            if !keys.insert(r.key()) {
                return Err(corrupt(format!("duplicate attend row {:?}", r.key())));
            }
        }
        let replica = ReplicaState::from_parts("", records, sessions);
        if let Some(orphan) = replica.orphan_records().first() {
            return Err(corrupt(format!("attend row without a session: {orphan:?}")));
        }
        Ok(ExchangeFile { students, replica })
    }
}

fn push_row(out: &mut String, fields: &[&str]) {
    for (i, f) in fields.iter().enumerate() {
        if i > 0 {
            out.push('\t');
        }
        out.push_str(&escape(f));
    }
    out.push('\n');
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

pub fn export_exchange_file(file: &ExchangeFile, destination: &Path) -> Result<(), StoreError> {
    write_atomic(destination, file.render().as_bytes(), None)
}

pub fn import_exchange_file(source: &Path) -> Result<ExchangeFile, StoreError> {
    let bytes = fs::read(source).map_err(|e| io_err(source, e))?;
    let text =
        String::from_utf8(bytes).map_err(|_| StoreError::CorruptFile("not valid UTF-8".into()))?;
    ExchangeFile::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{SessionKey, TapOutcome};
    use crate::roster::{Lecture, Student};
    use crate::tagid::{parse_tag, TagKind};
    use proptest::prelude::*;

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    fn tag(n: u8) -> crate::tagid::CanonicalTagId {
        parse_tag(TagKind::NfcA, &[0xA0, 0, 0, n]).unwrap()
    }

    /// s001 codes [1,0,0], s002 [1,1,1].
    fn sample() -> AttendanceSystem {
        let mut sys = AttendanceSystem::new("devA");
        sys.roster
            .upsert_lecture(Lecture::new("1", "Information Literacy", "Mori", 15))
            .unwrap();
        for (i, (id, n1, n2)) in [("s001", "Sato", "Taro"), ("s002", "Suzuki", "Hanako")]
            .into_iter()
            .enumerate()
        {
            sys.roster
                .enroll("1", Student::new(id, n1, n2, &format!("{id}@u.ac.jp")))
                .unwrap();
            sys.bind_card(id, tag(i as u8 + 1), false).unwrap();
        }
        let days = ["2013-10-01", "2013-10-08", "2013-10-15"];
        for (i, day) in days.iter().enumerate() {
            let s = sys
                .open_session("1", d(day), Timestamp(i as i64 * 100))
                .unwrap();
            let key: SessionKey = s.key();
            if i == 0 {
                sys.record_tap(&key, &tag(1), Timestamp(i as i64 * 100 + 1))
                    .unwrap();
            }
            let out = sys
                .record_tap(&key, &tag(2), Timestamp(i as i64 * 100 + 2))
                .unwrap();
            assert!(matches!(out, TapOutcome::Recorded { .. }));
            sys.close_session(&key, Timestamp(i as i64 * 100 + 50))
                .unwrap();
        }
        sys
    }

    #[test]
    fn absentee_report_matches_hand_evaluation() {
        let sys = sample();
        assert_eq!(
            sys.absentee_report("1", 1).unwrap(),
            vec![AbsenteeRow {
                student_id: "s001".into(),
                name1: "Sato".into(),
                name2: "Taro".into(),
                absent_count: 2,
            }]
        );
        assert!(sys.absentee_report("1", 3).unwrap().is_empty());
        assert_eq!(
            sys.absentee_report("nope", 1),
            Err(StoreError::UnknownLecture("nope".into()))
        );
        let empty = AttendanceSystem {
            replica: ReplicaState::new("devA"),
            ..sample()
        };
        assert!(empty.absentee_report("1", 1).unwrap().is_empty());
    }

    #[test]
    fn backup_round_trip_and_tamper() {
        let sys = sample();
        let archive = backup(&sys);
        assert_eq!(restore(&archive).unwrap(), sys);
        let bytes = archive.to_bytes();
        assert_eq!(BackupArchive::from_bytes(&bytes).unwrap(), archive);

        let mut flipped = archive.clone();
        flipped.payload[10] ^= 0x01;
        assert!(matches!(
            restore(&flipped),
            Err(StoreError::ChecksumMismatch { .. })
        ));
        let empty = AttendanceSystem::new("devA");
        assert_eq!(restore(&backup(&empty)).unwrap(), empty);
        assert!(matches!(
            restore(&BackupArchive {
                format_version: 9,
                ..archive
            }),
            Err(StoreError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::new(dir.path().join("state.amsnap"));
        assert!(matches!(store.load(), Err(StoreError::NoSnapshot(_))));
        let sys = sample();
        store.save(&sys).unwrap();
        assert_eq!(store.load().unwrap(), sys);
    }

    #[test]
    fn truncated_snapshot_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.amsnap");
        let store = SnapshotStore::new(&path);
        store.save(&sample()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(store.load(), Err(StoreError::CorruptSnapshot(_))));
    }

    #[test]
    fn crash_mid_write_keeps_previous_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.amsnap");
        let store = SnapshotStore::new(&path);
        let first = AttendanceSystem::new("devA");
        store.save(&first).unwrap();

        let bytes = backup(&sample()).to_bytes();
        let err = write_atomic(&path, &bytes, Some(bytes.len() / 3)).unwrap_err();
        assert!(matches!(err, StoreError::IoFailure(_)));
        assert_eq!(store.load().unwrap(), first);
        // The abandoned partial file is still on disk next to the snapshot.
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
    }

    #[test]
    fn exchange_round_trip() {
        let sys = sample();
        let file = sys.export_exchange();
        let text = file.render();
        assert!(text.starts_with("ams-exchange/1\n[student]\ns001\tSato\tTaro\ts001@u.ac.jp\n"));
        assert!(text.contains("[attend]\ns001\t1\t2013-10-01\t1\t1\tdevA\n"));
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("#crc32=") && last.len() == 15);

        let back = ExchangeFile::parse(&text).unwrap();
        assert!(back.replica.same_records(&sys.replica));
        assert_eq!(back.students, file.students);
        assert_eq!(back.render(), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ams");
        export_exchange_file(&file, &path).unwrap();
        assert_eq!(import_exchange_file(&path).unwrap(), back);
    }

    #[test]
    fn exchange_rejects_bad_input() {
        let text = sample().export_exchange().render();
        let reseal =
            |body: &str| format!("{body}#crc32={:08x}\n", crc32fast::hash(body.as_bytes()));
        let body = &text[..text.rfind("#crc32").unwrap()];

        let v2 = reseal(&body.replacen("ams-exchange/1", "ams-exchange/2", 1));
        assert!(matches!(
            ExchangeFile::parse(&v2),
            Err(StoreError::CorruptFile(_))
        ));

        let tampered = text.replacen("Sato", "Sata", 1);
        assert!(matches!(
            ExchangeFile::parse(&tampered),
            Err(StoreError::CorruptFile(_))
        ));

        let orphan = reseal(&body.replacen("s001\tSato\tTaro\ts001@u.ac.jp\n", "", 1));
        assert!(matches!(
            ExchangeFile::parse(&orphan),
            Err(StoreError::CorruptFile(_))
        ));

        assert!(matches!(
            ExchangeFile::parse(""),
            Err(StoreError::CorruptFile(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            import_exchange_file(&dir.path().join("missing.ams")),
            Err(StoreError::IoFailure(_))
        ));
    }

    #[test]
    fn escaped_fields_survive() {
        let mut sys = sample();
        sys.roster
            .enroll("1", Student::new("s001", "Sa\tto", "Ta\\ro\nX", "e"))
            .unwrap();
        let file = sys.export_exchange();
        let back = ExchangeFile::parse(&file.render()).unwrap();
        assert_eq!(back.students, file.students);
    }

    #[test]
    fn merged_export_has_unique_keys() {
        let a = sample();
        let mut b = sample();
        b.replica.device_id = "devB".into();
        let merged = a.export_exchange().merge(&b.export_exchange());
        let text = merged.render();
        let attend: Vec<&str> = text
            .lines()
            .skip_while(|l| *l != "[attend]")
            .skip(1)
            .take_while(|l| !l.starts_with('['))
            .collect();
        let keys: BTreeSet<(&str, &str, &str)> = attend
            .iter()
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                (f[0], f[1], f[2])
            })
            .collect();
        assert_eq!(keys.len(), attend.len());
        assert_eq!(attend.len(), 6);
    }

    /// (student index, registered?, codes per date) rows.
    fn arb_table() -> impl Strategy<Value = Vec<(bool, Vec<Option<bool>>)>> {
        prop::collection::vec(
            (
                prop::bool::weighted(0.9),
                prop::collection::vec(prop::option::of(prop::bool::ANY), 1..15),
            ),
            0..50,
        )
    }

    fn load(table: &[(bool, Vec<Option<bool>>)]) -> AttendanceSystem {
        let mut sys = AttendanceSystem::new("devA");
        sys.roster
            .upsert_lecture(Lecture::new("L1", "T", "X", 15))
            .unwrap();
        for (i, (registered, codes)) in table.iter().enumerate() {
            let id = format!("s{i:03}");
            if *registered {
                sys.roster
                    .enroll("L1", Student::new(&id, &format!("F{i}"), "G", ""))
                    .unwrap();
            }
            for (day, code) in codes.iter().enumerate() {
                let date = d("2013-10-01") + chrono::Days::new(day as u64);
                sys.replica.put_session(crate::ledger::Session {
                    lecture_id: "L1".into(),
                    date,
                    device_id: "devA".into(),
                    opened_at: Some(Timestamp(0)),
                    closed_at: Some(Timestamp(1)),
                    status: crate::ledger::SessionStatus::Closed,
                });
                if let Some(present) = code {
                    sys.replica.put_record(AttendanceRecord {
                        lecture_id: "L1".into(),
                        date,
                        student_id: id.clone(),
                        code: if *present {
                            AttendanceCode::Present
                        } else {
                            AttendanceCode::Absent
                        },
                        recorded_at: Timestamp(day as i64),
                        device_id: "devA".into(),
                    });
                }
            }
        }
        sys
    }

    proptest! {
        #[test]
        fn report_matches_full_scan(table in arb_table(), min in 1usize..4) {
            let sys = load(&table);
            let mut want = Vec::new();
            for (i, (registered, codes)) in table.iter().enumerate() {
                let zeros = codes.iter().filter(|c| **c == Some(false)).count();
                if *registered && zeros >= min {
                    want.push((format!("s{i:03}"), zeros));
                }
            }
            let got: Vec<(String, usize)> = absentee_report(&sys.roster, &sys.replica, "L1", min)
                .unwrap()
                .into_iter()
                .map(|r| (r.student_id, r.absent_count))
                .collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn round_trips_hold(table in arb_table()) {
            let sys = load(&table);
            prop_assert_eq!(&restore(&BackupArchive::from_bytes(&backup(&sys).to_bytes()).unwrap()).unwrap(), &sys);
            let file = ExchangeFile::parse(&sys.export_exchange().render()).unwrap();
            prop_assert!(file.replica.same_records(&sys.replica));
            // every attend row has a student row, placeholders included
            for r in file.replica.records() {
                prop_assert!(file.students.iter().any(|s| s.student_id == r.student_id));
            }
            let mut fresh = AttendanceSystem::new("devB");
            fresh.import_exchange(&file);
            for r in fresh.replica.records() {
                prop_assert!(fresh.roster.student(&r.student_id).is_some());
            }
        }
    }
}
