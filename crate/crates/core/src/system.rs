use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::ledger::{
    self, ClosureReport, LedgerError, Session, SessionKey, Tabulation, TapOutcome, Timestamp,
};
use crate::outreach::{self, OutreachError, ReasonBook, ReasonRecord, ReasonSubmission};
use crate::roster::{Roster, RosterError, Student};
use crate::store::{self, AbsenteeRow, ExchangeFile, StoreError};
use crate::sync::{MergeReport, ReplicaState};
use crate::tagid::CanonicalTagId;

/// Everything one device knows: roster, its replica of the attendance
/// records, and submitted absence reasons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceSystem {
    pub roster: Roster,
    pub replica: ReplicaState,
    #[serde(default)]
    pub reasons: ReasonBook,
}

impl AttendanceSystem {
    pub fn new(device_id: &str) -> Self {
        AttendanceSystem {
            roster: Roster::new(),
            replica: ReplicaState::new(device_id),
            reasons: ReasonBook::default(),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.replica.device_id
    }

    pub fn bind_card(
        &mut self,
        student_id: &str,
        tag: CanonicalTagId,
        overwrite: bool,
    ) -> Result<crate::roster::Binding, RosterError> {
        self.roster.bind_card(student_id, tag, overwrite)
    }

    pub fn open_session(
        &mut self,
        lecture_id: &str,
        date: NaiveDate,
        at: Timestamp,
    ) -> Result<Session, LedgerError> {
        ledger::open_session(&mut self.replica, &self.roster, lecture_id, date, at)
    }

    pub fn record_tap(
        &mut self,
        key: &SessionKey,
        tag: &CanonicalTagId,
        at: Timestamp,
    ) -> Result<TapOutcome, LedgerError> {
        ledger::record_tap(&mut self.replica, &self.roster, key, tag, at)
    }

    /// Closes a session against the lecture's current enrollment.
    pub fn close_session(
        &mut self,
        key: &SessionKey,
        at: Timestamp,
    ) -> Result<ClosureReport, LedgerError> {
        let students: Vec<&Student> = self.roster.enrolled(&key.lecture_id)?;
        ledger::close_session(&mut self.replica, key, &students, at)
    }

    pub fn tabulate(&self, lecture_id: &str) -> Result<Tabulation, LedgerError> {
        ledger::tabulate(&self.replica, &self.roster, lecture_id)
    }

    pub fn absentee_report(
        &self,
        lecture_id: &str,
        min_absences: usize,
    ) -> Result<Vec<AbsenteeRow>, StoreError> {
        store::absentee_report(&self.roster, &self.replica, lecture_id, min_absences)
    }

    pub fn merge_replica(&mut self, other: &ReplicaState) -> MergeReport {
        self.replica.merge_from(other)
    }

    pub fn export_exchange(&self) -> ExchangeFile {
        ExchangeFile::from_system(self)
    }

    /// Folds an exchange file in: unknown students are registered and
    /// enrolled in the known lectures they have records for, then records
    /// are merged.
    pub fn import_exchange(&mut self, file: &ExchangeFile) -> MergeReport {
        for row in &file.students {
            if self.roster.student(&row.student_id).is_some() {
                continue;
            }
            let student = Student::new(&row.student_id, &row.name1, &row.name2, &row.email);
            let lectures: Vec<String> = file
                .replica
                .records()
                .filter(|r| r.student_id == row.student_id)
                .map(|r| r.lecture_id.clone())
                .collect();
            self.roster.register(student.clone());
            for lecture in lectures {
                // Records for lectures unknown here are kept, just not enrolled.
                let _ = self.roster.enroll(&lecture, student.clone());
            }
        }
        self.merge_replica(&file.replica)
    }

    pub fn ingest_reason(
        &mut self,
        submission: ReasonSubmission,
        at: Timestamp,
    ) -> Result<ReasonRecord, OutreachError> {
        self.reasons.ingest_reason(&self.replica, submission, at)
    }

    pub fn unexplained_absences(
        &self,
        lecture_id: &str,
    ) -> Result<Vec<(String, NaiveDate)>, OutreachError> {
        outreach::unexplained_absences(&self.reasons, &self.roster, &self.replica, lecture_id)
    }
}
