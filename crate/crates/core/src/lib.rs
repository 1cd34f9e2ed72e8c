//! Attendance ledger for contactless-card roll call.
//!
//! - [`tagid`]: card identifier parsing and canonical `KIND:HEX` form
//! - [`roster`]: lectures, students, CSV roster ingestion, card bindings
//! - [`ledger`]: sessions, tap handling, the alert engine, tabulation
//! - [`sync`]: replica merge and the peer exchange protocol
//! - [`store`]: snapshots, backups, exchange files, absentee report
//! - [`outreach`]: follow-up messages and absence reasons

pub mod ledger;
pub mod outreach;
pub mod roster;
pub mod store;
pub mod sync;
pub mod system;
pub mod tagid;

pub use ledger::{
    AlertConfig, AlertLevel, AttendanceCode, AttendanceRecord, ClosureReport, LedgerError,
    RecordKey, Session, SessionKey, SessionStatus, Tabulation, TapOutcome, Timestamp,
};
pub use outreach::{FollowupBatch, FollowupMessage, Outbox, ReasonRecord, ReasonSubmission};
pub use roster::{IngestReport, Lecture, Roster, RosterError, Student};
pub use store::{AbsenteeRow, BackupArchive, ExchangeFile, SnapshotStore, StoreError};
pub use sync::{merge_state, MergeReport, ReplicaState, SyncError, SyncMessage};
pub use system::AttendanceSystem;
pub use tagid::{CanonicalTagId, TagError, TagKind};
