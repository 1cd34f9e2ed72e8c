//! Roll-call sessions, attendance records and the alert engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roster::{Roster, RosterError, Student};
use crate::sync::ReplicaState;
use crate::tagid::CanonicalTagId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("unknown lecture {0:?}")]
    UnknownLecture(String),
    #[error("session {0} is already open")]
    SessionAlreadyOpen(SessionKey),
    #[error("session {0} is closed")]
    SessionClosed(SessionKey),
    #[error("no session {0}")]
    UnknownSession(SessionKey),
}

impl From<RosterError> for LedgerError {
    fn from(err: RosterError) -> Self {
        match err {
            RosterError::UnknownLecture(id) => LedgerError::UnknownLecture(id),
            other => LedgerError::UnknownLecture(other.to_string()),
        }
    }
}

/// Milliseconds since the Unix epoch, UTC.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn to_datetime(self) -> Option<DateTime<Utc>> {
        DateTime::from_timestamp_millis(self.0)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.to_datetime() {
            Some(dt) => write!(f, "{}", dt.format("%Y-%m-%dT%H:%M:%S%.3fZ")),
            None => write!(f, "{}ms", self.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttendanceCode {
    #[serde(rename = "0")]
    Absent,
    #[serde(rename = "1")]
    Present,
}

impl AttendanceCode {
    pub fn as_char(self) -> char {
        match self {
            AttendanceCode::Absent => '0',
            AttendanceCode::Present => '1',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '0' => Some(AttendanceCode::Absent),
            '1' => Some(AttendanceCode::Present),
            _ => None,
        }
    }

    /// Conflict rank: presence outranks absence.
    pub fn rank(self) -> u8 {
        match self {
            AttendanceCode::Absent => 0,
            AttendanceCode::Present => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionKey {
    pub lecture_id: String,
    pub date: NaiveDate,
    pub device_id: String,
}

impl SessionKey {
    pub fn new(lecture_id: &str, date: NaiveDate, device_id: &str) -> Self {
        SessionKey {
            lecture_id: lecture_id.to_string(),
            date,
            device_id: device_id.to_string(),
        }
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.lecture_id, self.date, self.device_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Session {
    pub lecture_id: String,
    pub date: NaiveDate,
    pub device_id: String,
    pub opened_at: Option<Timestamp>,
    pub closed_at: Option<Timestamp>,
    pub status: SessionStatus,
}

impl Session {
    pub fn key(&self) -> SessionKey {
        SessionKey::new(&self.lecture_id, self.date, &self.device_id)
    }

    pub fn is_open(&self) -> bool {
        self.status == SessionStatus::Open
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordKey {
    pub lecture_id: String,
    pub date: NaiveDate,
    pub student_id: String,
}

impl RecordKey {
    pub fn new(lecture_id: &str, date: NaiveDate, student_id: &str) -> Self {
        RecordKey {
            lecture_id: lecture_id.to_string(),
            date,
            student_id: student_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttendanceRecord {
    pub lecture_id: String,
    pub date: NaiveDate,
    pub student_id: String,
    pub code: AttendanceCode,
    pub recorded_at: Timestamp,
    pub device_id: String,
}

impl AttendanceRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(&self.lecture_id, self.date, &self.student_id)
    }
}

/// Display precedence: later variants override earlier ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertLevel {
    Normal,
    YellowMany,
    YellowConsecutive,
    RedNoAccreditation,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("alert threshold {0} must be at least 1")]
pub struct InvalidThreshold(pub &'static str);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertConfig {
    /// Trailing run of absences that raises a yellow alert.
    pub consecutive_yellow: u32,
    /// Total absences that raise a yellow alert.
    pub many_yellow: u32,
    /// Total absences that forfeit credit. `None` means `planned / 3 + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub red_absence_limit: Option<u32>,
}

impl Default for AlertConfig {
    fn default() -> Self {
        AlertConfig {
            consecutive_yellow: 2,
            many_yellow: 3,
            red_absence_limit: None,
        }
    }
}

impl AlertConfig {
    pub fn validate(&self) -> Result<(), InvalidThreshold> {
        if self.consecutive_yellow < 1 {
            return Err(InvalidThreshold("consecutive_yellow"));
        }
        if self.many_yellow < 1 {
            return Err(InvalidThreshold("many_yellow"));
        }
        if self.red_absence_limit == Some(0) {
            return Err(InvalidThreshold("red_absence_limit"));
        }
        Ok(())
    }

    pub fn red_limit(&self, planned_sessions: u32) -> u32 {
        self.red_absence_limit.unwrap_or(planned_sessions / 3 + 1)
    }
}

/// Classifies a date-ordered sequence of attendance codes.
pub fn classify_codes(
    codes: &[AttendanceCode],
    planned_sessions: u32,
    config: &AlertConfig,
) -> AlertLevel {
    let absences = codes
        .iter()
        .filter(|c| **c == AttendanceCode::Absent)
        .count() as u64;
    let trailing = codes
        .iter()
        .rev()
        .take_while(|c| **c == AttendanceCode::Absent)
        .count() as u64;

    if absences >= u64::from(config.red_limit(planned_sessions)) {
        AlertLevel::RedNoAccreditation
    } else if trailing >= u64::from(config.consecutive_yellow) {
        AlertLevel::YellowConsecutive
    } else if absences >= u64::from(config.many_yellow) {
        AlertLevel::YellowMany
    } else {
        AlertLevel::Normal
    }
}

/// Alert level for one student's history in one lecture, sorted by date.
pub fn classify_alert(
    history: &[AttendanceRecord],
    planned_sessions: u32,
    config: &AlertConfig,
) -> AlertLevel {
    let codes: Vec<_> = history.iter().map(|r| r.code).collect();
    classify_codes(&codes, planned_sessions, config)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TapOutcome {
    Recorded {
        student_id: String,
        display_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        photo_ref: Option<String>,
        alert: AlertLevel,
        duplicate: bool,
    },
    UnknownTag {
        tag: CanonicalTagId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub session: SessionKey,
    pub closed_at: Timestamp,
    /// Students marked absent at close, ordered by student_id.
    pub absentees: Vec<String>,
}

/// History of one student in one lecture, dated strictly before `before`
/// when given, ordered by date.
pub fn student_history<'a>(
    replica: &'a ReplicaState,
    lecture_id: &str,
    student_id: &str,
    before: Option<NaiveDate>,
) -> Vec<&'a AttendanceRecord> {
    replica
        .records()
        .filter(|r| r.lecture_id == lecture_id && r.student_id == student_id)
        .filter(|r| before.is_none_or(|d| r.date < d))
        .collect()
}

pub fn open_session(
    replica: &mut ReplicaState,
    roster: &Roster,
    lecture_id: &str,
    date: NaiveDate,
    at: Timestamp,
) -> Result<Session, LedgerError> {
    roster.lecture(lecture_id)?;
    let key = SessionKey::new(lecture_id, date, &replica.device_id);
    if let Some(existing) = replica.session(&key) {
        return Err(match existing.status {
            SessionStatus::Open => LedgerError::SessionAlreadyOpen(key),
            SessionStatus::Closed => LedgerError::SessionClosed(key),
        });
    }
    let session = Session {
        lecture_id: key.lecture_id.clone(),
        date,
        device_id: key.device_id.clone(),
        opened_at: Some(at),
        closed_at: None,
        status: SessionStatus::Open,
    };
    replica.put_session(session.clone());
    Ok(session)
}

fn require_open(replica: &ReplicaState, key: &SessionKey) -> Result<Session, LedgerError> {
    let session = replica
        .session(key)
        .ok_or_else(|| LedgerError::UnknownSession(key.clone()))?;
    if !session.is_open() {
        return Err(LedgerError::SessionClosed(key.clone()));
    }
    Ok(session.clone())
}

/// Records a card tap. The alert reflects only history before the session
/// date; a second tap by the same student is reported as a duplicate and
/// leaves the record untouched.
pub fn record_tap(
    replica: &mut ReplicaState,
    roster: &Roster,
    key: &SessionKey,
    tag: &CanonicalTagId,
    at: Timestamp,
) -> Result<TapOutcome, LedgerError> {
    let session = require_open(replica, key)?;
    let Some(student) = roster.lookup_by_tag(tag) else {
        return Ok(TapOutcome::UnknownTag { tag: tag.clone() });
    };
    let lecture = roster.lecture(&session.lecture_id)?;

    let history: Vec<AttendanceRecord> = student_history(
        replica,
        &session.lecture_id,
        &student.student_id,
        Some(session.date),
    )
    .into_iter()
    .cloned()
    .collect();
    let alert = classify_alert(&history, lecture.planned_sessions, &lecture.alerts);

    let record = AttendanceRecord {
        lecture_id: session.lecture_id.clone(),
        date: session.date,
        student_id: student.student_id.clone(),
        code: AttendanceCode::Present,
        recorded_at: at,
        device_id: session.device_id.clone(),
    };
    let duplicate = replica
        .record(&record.key())
        .is_some_and(|existing| existing.code == AttendanceCode::Present);
    if !duplicate {
        replica.put_record(record);
    }
    Ok(TapOutcome::Recorded {
        student_id: student.student_id.clone(),
        display_name: student.display_name(),
        photo_ref: student.photo_ref.clone(),
        alert,
        duplicate,
    })
}

/// Closes a session, writing an Absent record for every roster student
/// without a record for the session's (lecture, date).
pub fn close_session(
    replica: &mut ReplicaState,
    key: &SessionKey,
    roster: &[&Student],
    at: Timestamp,
) -> Result<ClosureReport, LedgerError> {
    let mut session = require_open(replica, key)?;
    let mut absentees = Vec::new();
    for student in roster {
        let rkey = RecordKey::new(&session.lecture_id, session.date, &student.student_id);
        if replica.record(&rkey).is_none() {
            replica.put_record(AttendanceRecord {
                lecture_id: rkey.lecture_id,
                date: rkey.date,
                student_id: rkey.student_id,
                code: AttendanceCode::Absent,
                recorded_at: at,
                device_id: session.device_id.clone(),
            });
            absentees.push(student.student_id.clone());
        }
    }
    absentees.sort();
    absentees.dedup();
    session.closed_at = Some(at);
    session.status = SessionStatus::Closed;
    replica.put_session(session);
    Ok(ClosureReport {
        session: key.clone(),
        closed_at: at,
        absentees,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TabulationRow {
    pub student_id: String,
    pub cells: Vec<Option<AttendanceCode>>,
    pub present: usize,
    pub absent: usize,
}

/// Student × date matrix for one lecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tabulation {
    pub lecture_id: String,
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<TabulationRow>,
    pub present_per_date: Vec<usize>,
    pub absent_per_date: Vec<usize>,
}

impl Tabulation {
    pub fn record_count(&self) -> usize {
        self.rows.iter().map(|r| r.present + r.absent).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("student_id");
        for d in &self.dates {
            out.push(',');
            out.push_str(&d.to_string());
        }
        out.push_str(",present,absent\n");
        for row in &self.rows {
            out.push_str(&csv_field(&row.student_id));
            for cell in &row.cells {
                out.push(',');
                if let Some(code) = cell {
                    out.push(code.as_char());
                }
            }
            out.push_str(&format!(",{},{}\n", row.present, row.absent));
        }
        let totals = |label: &str, per: &[usize], grand: usize, present: bool| {
            let mut line = label.to_string();
            for n in per {
                line.push_str(&format!(",{n}"));
            }
            if present {
                line.push_str(&format!(",{grand},\n"));
            } else {
                line.push_str(&format!(",,{grand}\n"));
            }
            line
        };
        let present: usize = self.present_per_date.iter().sum();
        let absent: usize = self.absent_per_date.iter().sum();
        out.push_str(&totals(
            "present_total",
            &self.present_per_date,
            present,
            true,
        ));
        out.push_str(&totals(
            "absent_total",
            &self.absent_per_date,
            absent,
            false,
        ));
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn tabulate(
    replica: &ReplicaState,
    roster: &Roster,
    lecture_id: &str,
) -> Result<Tabulation, LedgerError> {
    let enrolled = roster.enrolled(lecture_id)?;
    let records: Vec<&AttendanceRecord> = replica
        .records()
        .filter(|r| r.lecture_id == lecture_id)
        .collect();

    let dates: Vec<NaiveDate> = replica
        .sessions()
        .filter(|s| s.lecture_id == lecture_id)
        .map(|s| s.date)
        .chain(records.iter().map(|r| r.date))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let column: BTreeMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();

    let mut cells: BTreeMap<String, Vec<Option<AttendanceCode>>> = enrolled
        .iter()
        .map(|s| (s.student_id.clone(), vec![None; dates.len()]))
        .collect();
    for r in &records {
        cells
            .entry(r.student_id.clone())
            .or_insert_with(|| vec![None; dates.len()])[column[&r.date]] = Some(r.code);
    }

    let mut present_per_date = vec![0; dates.len()];
    let mut absent_per_date = vec![0; dates.len()];
    let rows = cells
        .into_iter()
        .map(|(student_id, cells)| {
            let mut row = TabulationRow {
                student_id,
                cells,
                present: 0,
                absent: 0,
            };
            for (i, cell) in row.cells.iter().enumerate() {
                match cell {
                    Some(AttendanceCode::Present) => {
                        row.present += 1;
                        present_per_date[i] += 1;
                    }
                    Some(AttendanceCode::Absent) => {
                        row.absent += 1;
                        absent_per_date[i] += 1;
                    }
                    None => {}
                }
            }
            row
        })
        .collect();

    Ok(Tabulation {
        lecture_id: lecture_id.to_string(),
        dates,
        rows,
        present_per_date,
        absent_per_date,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TapScriptError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: timestamp goes backwards")]
    OutOfOrder { line: usize },
}

impl Timestamp {
    /// Accepts integer milliseconds or an RFC 3339 date-time.
    pub fn parse(s: &str) -> Option<Timestamp> {
        let s = s.trim();
        s.parse::<i64>().ok().map(Timestamp).or_else(|| {
            DateTime::parse_from_rfc3339(s)
                .ok()
                .map(|dt| Timestamp(dt.timestamp_millis()))
        })
    }
}

/// Parses a replay script of `timestamp<TAB>KIND:HEX` lines in time order.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_tap_script(text: &str) -> Result<Vec<(Timestamp, CanonicalTagId)>, TapScriptError> {
    let mut taps: Vec<(Timestamp, CanonicalTagId)> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: String| TapScriptError::Malformed {
            line: line_no,
            message,
        };
        let (ts, tag) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected timestamp<TAB>KIND:HEX".into()))?;
        let at = Timestamp::parse(ts).ok_or_else(|| malformed(format!("bad timestamp {ts:?}")))?;
        let tag: CanonicalTagId = tag
            .trim()
            .parse()
            .map_err(|e: crate::tagid::TagError| malformed(e.to_string()))?;
        if taps.last().is_some_and(|(prev, _)| *prev > at) {
            return Err(TapScriptError::OutOfOrder { line: line_no });
        }
        taps.push((at, tag));
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roster::Lecture;
    use crate::tagid::{parse_tag, TagKind};
    use proptest::prelude::*;
    use AttendanceCode::{Absent as A, Present as P};

    fn date(d: &str) -> NaiveDate {
        d.parse().unwrap()
    }

    fn tag(n: u8) -> CanonicalTagId {
        parse_tag(TagKind::NfcF, &[1, 1, 1, 1, 1, 1, 1, n]).unwrap()
    }

    fn setup(n: usize) -> (Roster, ReplicaState) {
        let mut roster = Roster::new();
        roster
            .upsert_lecture(Lecture::new("L1", "Networks", "T", 15))
            .unwrap();
        for i in 0..n {
            let id = format!("s{:03}", i + 1);
            roster
                .enroll("L1", Student::new(&id, "Fam", "Giv", "x@u"))
                .unwrap();
            roster.bind_card(&id, tag(i as u8 + 1), false).unwrap();
        }
        (roster, ReplicaState::new("devA"))
    }

    fn past_session(
        replica: &mut ReplicaState,
        roster: &Roster,
        day: &str,
        present: &[usize],
    ) -> ClosureReport {
        let s = open_session(replica, roster, "L1", date(day), Timestamp(0)).unwrap();
        for &i in present {
            record_tap(replica, roster, &s.key(), &tag(i as u8), Timestamp(1)).unwrap();
        }
        let students = roster.enrolled("L1").unwrap();
        close_session(replica, &s.key(), &students, Timestamp(2)).unwrap()
    }

    #[test]
    fn tap_script_parsing() {
        let script = "# fixture\n1380585600000\tNFCA:A0000001\n2013-10-01T00:00:05Z\tnfcf:0101010101010101\n\n";
        let taps = parse_tap_script(script).unwrap();
        assert_eq!(taps.len(), 2);
        assert_eq!(taps[0].0, Timestamp(1_380_585_600_000));
        assert_eq!(taps[1].0, Timestamp(1_380_585_605_000));
        assert_eq!(taps[1].1.to_string(), "NFCF:0101010101010101");
        assert!(matches!(
            parse_tap_script("5\tNFCA:00000001\n4\tNFCA:00000001\n"),
            Err(TapScriptError::OutOfOrder { line: 2 })
        ));
        assert!(matches!(
            parse_tap_script("5 NFCA:00000001\n"),
            Err(TapScriptError::Malformed { line: 1, .. })
        ));
        assert!(matches!(
            parse_tap_script("5\tNFCA:0001\n"),
            Err(TapScriptError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let cfg = AlertConfig::default();
        assert_eq!(classify_codes(&[], 15, &cfg), AlertLevel::Normal);
        assert_eq!(
            classify_codes(&[P, P, A, A], 15, &cfg),
            AlertLevel::YellowConsecutive
        );
        assert_eq!(cfg.red_limit(15), 6);
        assert_eq!(
            classify_codes(&[A, P, A, P, A, P, A, P, A, P, A], 15, &cfg),
            AlertLevel::RedNoAccreditation
        );
        assert_eq!(
            classify_codes(&[A, P, A, P, A, P], 15, &cfg),
            AlertLevel::YellowMany
        );
    }

    #[test]
    fn precedence() {
        let cfg = AlertConfig::default();
        // Red and consecutive both hold.
        assert_eq!(
            classify_codes(&[A; 6], 15, &cfg),
            AlertLevel::RedNoAccreditation
        );
        // Both yellow conditions hold.
        assert_eq!(
            classify_codes(&[A, P, A, A], 15, &cfg),
            AlertLevel::YellowConsecutive
        );
    }

    #[test]
    fn config_validation() {
        let bad = AlertConfig {
            consecutive_yellow: 0,
            ..AlertConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(AlertConfig {
            red_absence_limit: Some(0),
            ..AlertConfig::default()
        }
        .validate()
        .is_err());
        assert!(AlertConfig::default().validate().is_ok());
    }

    #[test]
    fn open_session_rules() {
        let (roster, mut replica) = setup(1);
        let s = open_session(
            &mut replica,
            &roster,
            "L1",
            date("2013-10-01"),
            Timestamp(5),
        )
        .unwrap();
        assert_eq!(s.status, SessionStatus::Open);
        assert_eq!(s.opened_at, Some(Timestamp(5)));
        assert_eq!(
            open_session(
                &mut replica,
                &roster,
                "L1",
                date("2013-10-01"),
                Timestamp(6)
            ),
            Err(LedgerError::SessionAlreadyOpen(s.key()))
        );
        assert_eq!(
            open_session(
                &mut replica,
                &roster,
                "L9",
                date("2013-10-01"),
                Timestamp(6)
            ),
            Err(LedgerError::UnknownLecture("L9".into()))
        );

        let mut dev_b = ReplicaState::new("devB");
        let sb = open_session(&mut dev_b, &roster, "L1", date("2013-10-01"), Timestamp(5)).unwrap();
        assert_ne!(sb.key(), s.key());
    }

    #[test]
    fn tap_with_empty_history_is_normal() {
        let (roster, mut replica) = setup(1);
        let s = open_session(
            &mut replica,
            &roster,
            "L1",
            date("2013-10-01"),
            Timestamp(0),
        )
        .unwrap();
        let out = record_tap(&mut replica, &roster, &s.key(), &tag(1), Timestamp(9)).unwrap();
        match out {
            TapOutcome::Recorded {
                alert,
                duplicate,
                student_id,
                ..
            } => {
                assert_eq!(alert, AlertLevel::Normal);
                assert!(!duplicate);
                assert_eq!(student_id, "s001");
            }
            other => panic!("{other:?}"),
        }
        let rec = replica
            .record(&RecordKey::new("L1", date("2013-10-01"), "s001"))
            .unwrap();
        assert_eq!(rec.code, AttendanceCode::Present);
        assert_eq!(rec.recorded_at, Timestamp(9));
    }

    #[test]
    fn two_recent_absences_raise_consecutive() {
        let (roster, mut replica) = setup(2);
        past_session(&mut replica, &roster, "2013-10-01", &[1, 2]);
        past_session(&mut replica, &roster, "2013-10-08", &[2]);
        past_session(&mut replica, &roster, "2013-10-15", &[2]);
        let s = open_session(
            &mut replica,
            &roster,
            "L1",
            date("2013-10-22"),
            Timestamp(0),
        )
        .unwrap();
        let out = record_tap(&mut replica, &roster, &s.key(), &tag(1), Timestamp(3)).unwrap();
        assert!(matches!(
            out,
            TapOutcome::Recorded {
                alert: AlertLevel::YellowConsecutive,
                ..
            }
        ));
    }

    #[test]
    fn duplicate_tap_changes_nothing() {
        let (roster, mut replica) = setup(1);
        let s = open_session(
            &mut replica,
            &roster,
            "L1",
            date("2013-10-01"),
            Timestamp(0),
        )
        .unwrap();
        record_tap(&mut replica, &roster, &s.key(), &tag(1), Timestamp(10)).unwrap();
        let once = replica.clone();
        let out = record_tap(&mut replica, &roster, &s.key(), &tag(1), Timestamp(20)).unwrap();
        assert!(matches!(
            out,
            TapOutcome::Recorded {
                duplicate: true,
                ..
            }
        ));
        assert_eq!(replica, once);
    }

    #[test]
    fn unknown_tag_is_an_outcome() {
        let (roster, mut replica) = setup(1);
        let s = open_session(
            &mut replica,
            &roster,
            "L1",
            date("2013-10-01"),
            Timestamp(0),
        )
        .unwrap();
        let out = record_tap(&mut replica, &roster, &s.key(), &tag(99), Timestamp(1)).unwrap();
        assert_eq!(out, TapOutcome::UnknownTag { tag: tag(99) });
        assert_eq!(replica.records().count(), 0);
    }

    #[test]
    fn close_marks_absentees_once() {
        let (roster, mut replica) = setup(3);
        let report = past_session(&mut replica, &roster, "2013-10-01", &[1, 2]);
        assert_eq!(report.absentees, vec!["s003".to_string()]);
        let absents: Vec<_> = replica
            .records()
            .filter(|r| r.code == AttendanceCode::Absent)
            .collect();
        assert_eq!(absents.len(), 1);
        assert_eq!(absents[0].recorded_at, Timestamp(2));
        assert_eq!(absents[0].device_id, "devA");

        let key = report.session.clone();
        let students = roster.enrolled("L1").unwrap();
        assert_eq!(
            close_session(&mut replica, &key, &students, Timestamp(3)),
            Err(LedgerError::SessionClosed(key.clone()))
        );
        assert_eq!(
            record_tap(&mut replica, &roster, &key, &tag(3), Timestamp(4)),
            Err(LedgerError::SessionClosed(key.clone()))
        );
        let session = replica.session(&key).unwrap();
        assert_eq!(session.closed_at, Some(Timestamp(2)));
    }

    #[test]
    fn close_all_present() {
        let (roster, mut replica) = setup(3);
        let report = past_session(&mut replica, &roster, "2013-10-01", &[1, 2, 3]);
        assert!(report.absentees.is_empty());
    }

    #[test]
    fn tabulation_shapes() {
        let (roster, mut replica) = setup(2);
        let t = tabulate(&replica, &roster, "L1").unwrap();
        assert!(t.dates.is_empty());
        assert_eq!(t.rows.len(), 2);

        past_session(&mut replica, &roster, "2013-10-01", &[1, 2]);
        past_session(&mut replica, &roster, "2013-10-08", &[2]);
        let t = tabulate(&replica, &roster, "L1").unwrap();
        assert_eq!(t.dates.len(), 2);
        let zeros = t
            .rows
            .iter()
            .flat_map(|r| &r.cells)
            .filter(|c| **c == Some(AttendanceCode::Absent))
            .count();
        assert_eq!(zeros, 1);
        assert_eq!(t.record_count(), replica.records().count());
        assert_eq!(
            t.to_csv(),
            "student_id,2013-10-01,2013-10-08,present,absent\n\
             s001,1,0,1,1\n\
             s002,1,1,2,0\n\
             present_total,2,1,3,\n\
             absent_total,0,1,,1\n"
        );
        assert!(matches!(
            tabulate(&replica, &roster, "nope"),
            Err(LedgerError::UnknownLecture(_))
        ));
    }

    #[test]
    fn tap_alert_ignores_same_day_records() {
        let (roster, mut replica) = setup(1);
        let key = SessionKey::new("L1", date("2013-10-01"), "devA");
        // An Absent for today already merged from another device.
        let mut other = ReplicaState::new("devB");
        let sb = open_session(&mut other, &roster, "L1", date("2013-10-01"), Timestamp(0)).unwrap();
        let students = roster.enrolled("L1").unwrap();
        close_session(&mut other, &sb.key(), &students, Timestamp(1)).unwrap();
        replica = crate::sync::merge_state(&replica, &other);
        open_session(&mut replica, &roster, "L1", key.date, Timestamp(2)).unwrap();
        let out = record_tap(&mut replica, &roster, &key, &tag(1), Timestamp(3)).unwrap();
        assert!(matches!(
            out,
            TapOutcome::Recorded {
                alert: AlertLevel::Normal,
                duplicate: false,
                ..
            }
        ));
        let rec = replica
            .record(&RecordKey::new("L1", key.date, "s001"))
            .unwrap();
        assert_eq!(rec.code, AttendanceCode::Present);
    }

    /// Full-scan recount of the alert rules.
    fn oracle(codes: &[AttendanceCode], planned: u32, cfg: &AlertConfig) -> AlertLevel {
        let total = codes.iter().filter(|c| **c == A).count() as u32;
        let mut run = 0;
        for c in codes {
            run = if *c == A { run + 1 } else { 0 };
        }
        let red = cfg.red_absence_limit.unwrap_or(planned / 3 + 1);
        if total >= red {
            AlertLevel::RedNoAccreditation
        } else if run >= cfg.consecutive_yellow {
            AlertLevel::YellowConsecutive
        } else if total >= cfg.many_yellow {
            AlertLevel::YellowMany
        } else {
            AlertLevel::Normal
        }
    }

    fn arb_codes(max: usize) -> impl Strategy<Value = Vec<AttendanceCode>> {
        prop::collection::vec(prop_oneof![Just(A), Just(P)], 0..=max)
    }

    fn arb_config() -> impl Strategy<Value = AlertConfig> {
        (1u32..6, 1u32..8, prop::option::of(1u32..20)).prop_map(|(c, m, r)| AlertConfig {
            consecutive_yellow: c,
            many_yellow: m,
            red_absence_limit: r,
        })
    }

    proptest! {
        #[test]
        fn classify_matches_recount(codes in arb_codes(20), planned in 1u32..40, cfg in arb_config()) {
            prop_assert_eq!(classify_codes(&codes, planned, &cfg), oracle(&codes, planned, &cfg));
        }

        #[test]
        fn red_beats_yellow(prefix in arb_codes(10), cfg in arb_config()) {
            // enough trailing absences to trip every rule at once
            let n = cfg.red_limit(15).max(cfg.consecutive_yellow).max(cfg.many_yellow) as usize;
            let mut codes = prefix;
            codes.extend(std::iter::repeat_n(A, n));
            prop_assert_eq!(classify_codes(&codes, 15, &cfg), AlertLevel::RedNoAccreditation);
        }

        #[test]
        fn close_leaves_one_record_per_student(
            n in 0usize..20,
            taps in prop::collection::vec(0u8..25, 0..40),
        ) {
            let (roster, mut replica) = setup(n);
            let s = open_session(&mut replica, &roster, "L1", date("2013-10-01"), Timestamp(0)).unwrap();
            for (i, t) in taps.iter().enumerate() {
                record_tap(&mut replica, &roster, &s.key(), &tag(*t), Timestamp(i as i64)).unwrap();
            }
            let students = roster.enrolled("L1").unwrap();
            let report = close_session(&mut replica, &s.key(), &students, Timestamp(99)).unwrap();
            for st in &students {
                let count = replica.records().filter(|r| r.student_id == st.student_id).count();
                prop_assert_eq!(count, 1);
            }
            let absent = replica.records().filter(|r| r.code == A).count();
            prop_assert_eq!(report.absentees.len(), absent);
        }

        #[test]
        fn replay_is_deterministic(
            past in prop::collection::vec(prop::collection::vec(1usize..6, 0..5), 0..4),
            taps in prop::collection::vec((0u8..8, 0i64..1000), 0..20),
        ) {
            let run = || {
                let (roster, mut replica) = setup(5);
                for (i, present) in past.iter().enumerate() {
                    past_session(&mut replica, &roster, &format!("2013-09-{:02}", i + 1), present);
                }
                let s = open_session(&mut replica, &roster, "L1", date("2013-10-01"), Timestamp(0)).unwrap();
                let outcomes: Vec<TapOutcome> = taps
                    .iter()
                    .map(|(t, at)| record_tap(&mut replica, &roster, &s.key(), &tag(*t), Timestamp(*at)).unwrap())
                    .collect();
                (replica, outcomes)
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn same_day_records_do_not_move_the_alert(
            past in prop::collection::vec(prop::bool::ANY, 0..8),
            today_absent in prop::bool::ANY,
        ) {
            let (roster, mut replica) = setup(1);
            for (i, present) in past.iter().enumerate() {
                let who: &[usize] = if *present { &[1] } else { &[] };
                past_session(&mut replica, &roster, &format!("2013-09-{:02}", i + 1), who);
            }
            let expected_codes: Vec<AttendanceCode> =
                past.iter().map(|p| if *p { P } else { A }).collect();
            let expected = classify_codes(&expected_codes, 15, &AlertConfig::default());
            if today_absent {
                // another device already closed today with this student absent
                let mut other = ReplicaState::new("devB");
                let students = roster.enrolled("L1").unwrap();
                let sb = open_session(&mut other, &roster, "L1", date("2013-10-01"), Timestamp(0)).unwrap();
                close_session(&mut other, &sb.key(), &students, Timestamp(1)).unwrap();
                replica.merge_from(&other);
            }
            let s = open_session(&mut replica, &roster, "L1", date("2013-10-01"), Timestamp(5)).unwrap();
            match record_tap(&mut replica, &roster, &s.key(), &tag(1), Timestamp(6)).unwrap() {
                TapOutcome::Recorded { alert, .. } => prop_assert_eq!(alert, expected),
                other => prop_assert!(false, "unexpected {:?}", other),
            }
        }
    }
}
