//! Lectures, students and card bindings.
//!
//! Students live in one registry keyed by university ID; a lecture holds the
//! set of enrolled IDs. Card bindings are a partial injection between tags
//! and students: one card per student, one student per card.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::AlertConfig;
use crate::tagid::CanonicalTagId;

/// Columns every roster file must carry (in any order).
pub const ROSTER_COLUMNS: [&str; 4] = ["student_id", "name1", "name2", "email"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RosterError {
    #[error("unknown lecture {0:?}")]
    UnknownLecture(String),
    #[error("unknown student {0:?}")]
    UnknownStudent(String),
    #[error("tag {tag} is already bound to student {student_id:?}")]
    TagAlreadyBound {
        tag: CanonicalTagId,
        student_id: String,
    },
    #[error("student {student_id:?} already holds tag {tag}")]
    StudentAlreadyBound {
        student_id: String,
        tag: CanonicalTagId,
    },
    #[error("malformed roster csv: {0}")]
    MalformedCsv(String),
    #[error("invalid lecture: {0}")]
    InvalidLecture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Student {
    pub student_id: String,
    /// Family name.
    pub name1: String,
    /// Given name.
    pub name2: String,
    pub email: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<CanonicalTagId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo_ref: Option<String>,
}

impl Student {
    pub fn new(student_id: &str, name1: &str, name2: &str, email: &str) -> Self {
        Student {
            student_id: student_id.to_string(),
            name1: name1.to_string(),
            name2: name2.to_string(),
            email: email.to_string(),
            tag: None,
            photo_ref: None,
        }
    }

    pub fn display_name(&self) -> String {
        format!("{} {}", self.name1, self.name2).trim().to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lecture {
    pub lecture_id: String,
    pub title: String,
    pub teacher: String,
    /// Number of meetings planned for the term.
    pub planned_sessions: u32,
    #[serde(default)]
    pub alerts: AlertConfig,
}

impl Lecture {
    pub fn new(lecture_id: &str, title: &str, teacher: &str, planned_sessions: u32) -> Self {
        Lecture {
            lecture_id: lecture_id.to_string(),
            title: title.to_string(),
            teacher: teacher.to_string(),
            planned_sessions,
            alerts: AlertConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "field")]
pub enum RejectReason {
    MissingField(String),
    TooManyFields,
    DuplicateId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    /// 1-based data row number (the header is not counted).
    pub row: usize,
    pub student_id: Option<String>,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<RejectedRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub student_id: String,
    pub tag: CanonicalTagId,
    /// Student that held this tag before an overwrite.
    pub displaced_student: Option<String>,
    /// Tag this student held before an overwrite.
    pub displaced_tag: Option<CanonicalTagId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RosterData", into = "RosterData")]
pub struct Roster {
    lectures: BTreeMap<String, Lecture>,
    students: BTreeMap<String, Student>,
    enrollments: BTreeMap<String, BTreeSet<String>>,
    tag_index: BTreeMap<CanonicalTagId, String>,
}

#[derive(Serialize, Deserialize)]
struct RosterData {
    lectures: BTreeMap<String, Lecture>,
    students: BTreeMap<String, Student>,
    enrollments: BTreeMap<String, BTreeSet<String>>,
}

impl From<RosterData> for Roster {
    fn from(data: RosterData) -> Self {
        let tag_index = data
            .students
            .values()
            .filter_map(|s| s.tag.clone().map(|t| (t, s.student_id.clone())))
            .collect();
        Roster {
            lectures: data.lectures,
            students: data.students,
            enrollments: data.enrollments,
            tag_index,
        }
    }
}

impl From<Roster> for RosterData {
    fn from(roster: Roster) -> Self {
        RosterData {
            lectures: roster.lectures,
            students: roster.students,
            enrollments: roster.enrollments,
        }
    }
}

impl Roster {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a lecture; enrollments are kept on replace.
    pub fn upsert_lecture(&mut self, lecture: Lecture) -> Result<(), RosterError> {
        if lecture.lecture_id.is_empty() {
            return Err(RosterError::InvalidLecture("empty lecture_id".into()));
        }
        if lecture.planned_sessions < 1 {
            return Err(RosterError::InvalidLecture(
                "planned_sessions must be at least 1".into(),
            ));
        }
        lecture
            .alerts
            .validate()
            .map_err(|e| RosterError::InvalidLecture(e.to_string()))?;
        self.enrollments
            .entry(lecture.lecture_id.clone())
            .or_default();
        self.lectures.insert(lecture.lecture_id.clone(), lecture);
        Ok(())
    }

    pub fn lecture(&self, lecture_id: &str) -> Result<&Lecture, RosterError> {
        self.lectures
            .get(lecture_id)
            .ok_or_else(|| RosterError::UnknownLecture(lecture_id.to_string()))
    }

    pub fn lectures(&self) -> impl Iterator<Item = &Lecture> {
        self.lectures.values()
    }

    pub fn student(&self, student_id: &str) -> Option<&Student> {
        self.students.get(student_id)
    }

    pub fn students(&self) -> impl Iterator<Item = &Student> {
        self.students.values()
    }

    /// Adds a student to the registry without enrolling them anywhere.
    /// An already registered student is left untouched.
    pub fn register(&mut self, student: Student) {
        self.students
            .entry(student.student_id.clone())
            .or_insert(Student {
                tag: None,
                ..student
            });
    }

    /// Inserts or updates a student, enrolling them in `lecture_id`.
    /// Existing card binding and photo reference are preserved.
    pub fn enroll(&mut self, lecture_id: &str, student: Student) -> Result<(), RosterError> {
        self.lecture(lecture_id)?;
        let id = student.student_id.clone();
        match self.students.get_mut(&id) {
            Some(existing) => {
                existing.name1 = student.name1;
                existing.name2 = student.name2;
                existing.email = student.email;
                if student.photo_ref.is_some() {
                    existing.photo_ref = student.photo_ref;
                }
            }
            None => {
                self.students.insert(
                    id.clone(),
                    Student {
                        tag: None,
                        ..student
                    },
                );
            }
        }
        self.enrollments
            .entry(lecture_id.to_string())
            .or_default()
            .insert(id);
        Ok(())
    }

    /// Students enrolled in a lecture, ordered by student_id.
    pub fn enrolled(&self, lecture_id: &str) -> Result<Vec<&Student>, RosterError> {
        self.lecture(lecture_id)?;
        Ok(self
            .enrollments
            .get(lecture_id)
            .into_iter()
            .flatten()
            .filter_map(|id| self.students.get(id))
            .collect())
    }

    /// Reads a roster CSV (`student_id,name1,name2,email`) and enrolls every
    /// valid row. Within one file the first occurrence of an ID wins.
    pub fn ingest_roster_csv<R: Read>(
        &mut self,
        lecture_id: &str,
        csv: R,
    ) -> Result<IngestReport, RosterError> {
        self.lecture(lecture_id)?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(csv);

        let headers = reader
            .headers()
            .map_err(|e| RosterError::MalformedCsv(e.to_string()))?
            .clone();
        let mut column = [0usize; 4];
        for (slot, name) in column.iter_mut().zip(ROSTER_COLUMNS) {
            *slot = headers
                .iter()
                .position(|h| h.trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
                .ok_or_else(|| RosterError::MalformedCsv(format!("missing column {name:?}")))?;
        }

        let mut report = IngestReport::default();
        let mut seen = BTreeSet::new();
        let mut accepted = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let row = idx + 1;
            let record = record.map_err(|e| RosterError::MalformedCsv(e.to_string()))?;
            let field = |i: usize| record.get(column[i]);
            let student_id = field(0).filter(|s| !s.is_empty()).map(str::to_string);
            let reject = |reason| RejectedRow {
                row,
                student_id: student_id.clone(),
                reason,
            };

            if record.len() > headers.len() {
                report.rejected.push(reject(RejectReason::TooManyFields));
                continue;
            }
            if let Some(missing) = (0..4).find(|&i| match i {
                0 => student_id.is_none(),
                _ => field(i).is_none(),
            }) {
                report.rejected.push(reject(RejectReason::MissingField(
                    ROSTER_COLUMNS[missing].to_string(),
                )));
                continue;
            }
            let id = student_id.clone().unwrap_or_default();
            if !seen.insert(id.clone()) {
                report.rejected.push(reject(RejectReason::DuplicateId));
                continue;
            }
            accepted.push(Student::new(
                &id,
                field(1).unwrap_or_default(),
                field(2).unwrap_or_default(),
                field(3).unwrap_or_default(),
            ));
        }

        report.accepted = accepted.len();
        for student in accepted {
            self.enroll(lecture_id, student)?;
        }
        Ok(report)
    }

    pub fn bind_card(
        &mut self,
        student_id: &str,
        tag: CanonicalTagId,
        overwrite: bool,
    ) -> Result<Binding, RosterError> {
        let current = self
            .students
            .get(student_id)
            .ok_or_else(|| RosterError::UnknownStudent(student_id.to_string()))?
            .tag
            .clone();
        if current.as_ref() == Some(&tag) {
            return Ok(Binding {
                student_id: student_id.to_string(),
                tag,
                displaced_student: None,
                displaced_tag: None,
            });
        }
        let holder = self.tag_index.get(&tag).cloned();
        if !overwrite {
            if let Some(holder) = holder {
                return Err(RosterError::TagAlreadyBound {
                    tag,
                    student_id: holder,
                });
            }
            if let Some(current) = current {
                return Err(RosterError::StudentAlreadyBound {
                    student_id: student_id.to_string(),
                    tag: current,
                });
            }
        }

        if let Some(holder) = &holder {
            if let Some(s) = self.students.get_mut(holder) {
                s.tag = None;
            }
        }
        if let Some(old) = &current {
            self.tag_index.remove(old);
        }
        self.tag_index.insert(tag.clone(), student_id.to_string());
        if let Some(s) = self.students.get_mut(student_id) {
            s.tag = Some(tag.clone());
        }
        Ok(Binding {
            student_id: student_id.to_string(),
            tag,
            displaced_student: holder,
            displaced_tag: current,
        })
    }

    pub fn lookup_by_tag(&self, tag: &CanonicalTagId) -> Option<&Student> {
        self.tag_index.get(tag).and_then(|id| self.students.get(id))
    }

    pub fn set_photo_ref(
        &mut self,
        student_id: &str,
        photo_ref: Option<String>,
    ) -> Result<(), RosterError> {
        let student = self
            .students
            .get_mut(student_id)
            .ok_or_else(|| RosterError::UnknownStudent(student_id.to_string()))?;
        student.photo_ref = photo_ref;
        Ok(())
    }

    /// Binding export: one `student_id<TAB>KIND:HEX` line per bound student.
    pub fn export_bindings(&self) -> String {
        self.students
            .values()
            .filter_map(|s| s.tag.as_ref().map(|t| format!("{}\t{}\n", s.student_id, t)))
            .collect()
    }

    /// Every (tag, student) pair, as seen from the student side.
    pub fn bindings(&self) -> impl Iterator<Item = (&CanonicalTagId, &str)> {
        self.tag_index.iter().map(|(t, s)| (t, s.as_str()))
    }
}
