//! Follow-up messages for absentees and absence-reason intake.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::form_urlencoded;

use crate::ledger::{AttendanceCode, ClosureReport, RecordKey, Timestamp};
use crate::roster::Roster;
use crate::store::absence_counts;
use crate::sync::ReplicaState;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OutreachError {
    #[error("unknown lecture {0:?}")]
    UnknownLecture(String),
    #[error("no absence recorded for {student_id:?} in {lecture_id:?} on {date}")]
    NoMatchingAbsence {
        lecture_id: String,
        student_id: String,
        date: NaiveDate,
    },
    #[error("outbox write failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowupMessage {
    pub lecture_id: String,
    pub student_id: String,
    pub date: NaiveDate,
    pub to_email: String,
    pub subject: String,
    pub body: String,
    pub url: String,
    pub created_at: Timestamp,
}

impl FollowupMessage {
    /// `To:` and `Subject:` headers, a blank line, then the body.
    pub fn render(&self) -> String {
        format!(
            "To: {}\nSubject: {}\n\n{}",
            self.to_email, self.subject, self.body
        )
    }

    pub fn file_name(&self) -> String {
        format!(
            "{}_{}_{}.eml",
            self.date,
            file_safe(&self.lecture_id),
            file_safe(&self.student_id)
        )
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MissingEmail,
    UnknownStudent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFollowup {
    pub student_id: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FollowupBatch {
    pub messages: Vec<FollowupMessage>,
    pub skipped: Vec<SkippedFollowup>,
}

/// Individual reason-form URL: `base?class=..&sid=..&date=..`, every value
/// percent-encoded.
pub fn followup_url(lecture_id: &str, student_id: &str, date: NaiveDate, base: &str) -> String {
    let query = form_urlencoded::Serializer::new(String::new())
        .append_pair("class", lecture_id)
        .append_pair("sid", student_id)
        .append_pair("date", &date.to_string())
        .finish();
    let sep = if base.contains('?') { '&' } else { '?' };
    format!("{base}{sep}{query}")
}

/// One message per absentee in the closure, carrying the student's
/// cumulative absence count for the lecture.
pub fn compose_followups(
    closure: &ClosureReport,
    roster: &Roster,
    replica: &ReplicaState,
    base_url: &str,
) -> Result<FollowupBatch, OutreachError> {
    let lecture_id = &closure.session.lecture_id;
    let lecture = roster
        .lecture(lecture_id)
        .map_err(|_| OutreachError::UnknownLecture(lecture_id.clone()))?;
    let counts = absence_counts(replica, lecture_id);
    let date = closure.session.date;

    let mut batch = FollowupBatch::default();
    for student_id in &closure.absentees {
        let skip = |reason| SkippedFollowup {
            student_id: student_id.clone(),
            reason,
        };
        let Some(student) = roster.student(student_id) else {
            batch.skipped.push(skip(SkipReason::UnknownStudent));
            continue;
        };
        if student.email.trim().is_empty() {
            batch.skipped.push(skip(SkipReason::MissingEmail));
            continue;
        }
        let absences = counts.get(student_id).copied().unwrap_or(0);
        let url = followup_url(lecture_id, student_id, date, base_url);
        let body = format!(
            "Dear {name} ({student_id}),\n\
             \n\
             You were absent from {title} on {date}.\n\
             Number of absences in this class so far: {absences}\n\
             \n\
             Please confirm this absence and send the reason using the form below:\n\
             {url}\n\
             \n\
             {teacher}\n",
            name = student.display_name(),
            title = lecture.title,
            teacher = lecture.teacher,
        );
        batch.messages.push(FollowupMessage {
            lecture_id: lecture_id.clone(),
            student_id: student_id.clone(),
            date,
            to_email: student.email.clone(),
            subject: format!("Absence follow-up: {} ({date})", lecture.title),
            body,
            url,
            created_at: closure.closed_at,
        });
    }
    Ok(batch)
}

/// Directory of rendered messages, one file each.
#[derive(Debug, Clone)]
pub struct Outbox {
    dir: PathBuf,
}

impl Outbox {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Outbox { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, messages: &[FollowupMessage]) -> Result<Vec<PathBuf>, OutreachError> {
        fs::create_dir_all(&self.dir).map_err(|e| OutreachError::Io(e.to_string()))?;
        messages
            .iter()
            .map(|m| {
                let path = self.dir.join(m.file_name());
                fs::write(&path, m.render()).map_err(|e| OutreachError::Io(e.to_string()))?;
                Ok(path)
            })
            .collect()
    }

    /// File names currently in the outbox, sorted.
    pub fn list(&self) -> Result<Vec<String>, OutreachError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(OutreachError::Io(e.to_string())),
        };
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".eml"))
            .collect();
        names.sort();
        Ok(names)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonSubmission {
    pub lecture_id: String,
    pub student_id: String,
    pub date: NaiveDate,
    pub reason_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonRecord {
    pub lecture_id: String,
    pub student_id: String,
    pub date: NaiveDate,
    pub reason_text: String,
    pub submitted_at: Timestamp,
}

impl ReasonRecord {
    fn key(&self) -> RecordKey {
        RecordKey::new(&self.lecture_id, self.date, &self.student_id)
    }
}

/// Submitted reasons: the latest per absence plus every submission in order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<ReasonRecord>", into = "Vec<ReasonRecord>")]
pub struct ReasonBook {
    latest: BTreeMap<RecordKey, ReasonRecord>,
    audit: Vec<ReasonRecord>,
}

impl From<Vec<ReasonRecord>> for ReasonBook {
    fn from(audit: Vec<ReasonRecord>) -> Self {
        let latest = audit.iter().map(|r| (r.key(), r.clone())).collect();
        ReasonBook { latest, audit }
    }
}

impl From<ReasonBook> for Vec<ReasonRecord> {
    fn from(book: ReasonBook) -> Self {
        book.audit
    }
}

impl ReasonBook {
    pub fn ingest_reason(
        &mut self,
        replica: &ReplicaState,
        submission: ReasonSubmission,
        at: Timestamp,
    ) -> Result<ReasonRecord, OutreachError> {
        let key = RecordKey::new(
            &submission.lecture_id,
            submission.date,
            &submission.student_id,
        );
        match replica.record(&key) {
            Some(r) if r.code == AttendanceCode::Absent => {}
            _ => {
                return Err(OutreachError::NoMatchingAbsence {
                    lecture_id: submission.lecture_id,
                    student_id: submission.student_id,
                    date: submission.date,
                })
            }
        }
        let record = ReasonRecord {
            lecture_id: submission.lecture_id,
            student_id: submission.student_id,
            date: submission.date,
            reason_text: submission.reason_text,
            submitted_at: at,
        };
        self.audit.push(record.clone());
        self.latest.insert(key, record.clone());
        Ok(record)
    }

    pub fn reason(&self, key: &RecordKey) -> Option<&ReasonRecord> {
        self.latest.get(key)
    }

    pub fn audit(&self) -> &[ReasonRecord] {
        &self.audit
    }
}

/// Absences in a lecture with no submitted reason, sorted by (student, date).
pub fn unexplained_absences(
    reasons: &ReasonBook,
    roster: &Roster,
    replica: &ReplicaState,
    lecture_id: &str,
) -> Result<Vec<(String, NaiveDate)>, OutreachError> {
    roster
        .lecture(lecture_id)
        .map_err(|_| OutreachError::UnknownLecture(lecture_id.to_string()))?;
    let rows: BTreeSet<(String, NaiveDate)> = replica
        .records()
        .filter(|r| r.lecture_id == lecture_id && r.code == AttendanceCode::Absent)
        .filter(|r| reasons.reason(&r.key()).is_none())
        .map(|r| (r.student_id.clone(), r.date))
        .collect();
    Ok(rows.into_iter().collect())
}
