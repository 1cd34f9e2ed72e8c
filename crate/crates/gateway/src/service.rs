//! The operations behind both the HTTP API and the CLI. Every mutating
//! call delegates to the core modules, persists the snapshot and appends
//! to the affected sessions' event logs.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::watch;

use ams_core::ledger::{parse_tap_script, AlertConfig};
use ams_core::outreach::{compose_followups, Outbox, SkippedFollowup};
use ams_core::roster::Binding;
use ams_core::store::{self, absentee_report, ExchangeFile};
use ams_core::sync::{run_exchange, FramedStream};
use ams_core::{
    AbsenteeRow, AttendanceSystem, CanonicalTagId, ClosureReport, IngestReport, Lecture,
    MergeReport, ReasonRecord, ReasonSubmission, Session, SessionKey, SnapshotStore, TapOutcome,
    Timestamp,
};

use crate::config::GatewayConfig;
use crate::error::GatewayError;
use crate::events::{EventFrame, EventKind, EventLog};

pub type Clock = Arc<dyn Fn() -> Timestamp + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseSummary {
    #[serde(flatten)]
    pub closure: ClosureReport,
    /// Outbox file names written for this closure.
    pub followups: Vec<String>,
    pub skipped: Vec<SkippedFollowup>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session: Session,
    pub outcomes: Vec<TapOutcome>,
    pub closed: Option<CloseSummary>,
}

pub struct Gateway {
    system: Mutex<AttendanceSystem>,
    snapshot: Option<SnapshotStore>,
    outbox: Outbox,
    base_url: String,
    default_alerts: AlertConfig,
    events: Mutex<BTreeMap<SessionKey, EventLog>>,
    clock: Clock,
}

impl Gateway {
    /// In-memory gateway (no snapshot persistence).
    pub fn in_memory(
        system: AttendanceSystem,
        outbox_dir: impl Into<PathBuf>,
        base_url: &str,
    ) -> Self {
        Gateway {
            system: Mutex::new(system),
            snapshot: None,
            outbox: Outbox::new(outbox_dir),
            base_url: base_url.to_string(),
            default_alerts: AlertConfig::default(),
            events: Mutex::new(BTreeMap::new()),
            clock: Arc::new(Timestamp::now),
        }
    }

    /// Loads the snapshot named by `config`.
    pub fn open(config: &GatewayConfig) -> Result<Self, GatewayError> {
        let store = SnapshotStore::new(config.snapshot_path());
        let system = store.load()?;
        Ok(Gateway {
            snapshot: Some(store),
            default_alerts: config.alerts,
            ..Gateway::in_memory(system, config.outbox_dir(), &config.form_url)
        })
    }

    /// Creates a fresh snapshot for `device_id`; fails if one exists.
    pub fn init(config: &GatewayConfig, device_id: &str) -> Result<Self, GatewayError> {
        let store = SnapshotStore::new(config.snapshot_path());
        if store.exists() {
            return Err(GatewayError::BadRequest(format!(
                "snapshot already exists at {}",
                store.path().display()
            )));
        }
        let system = AttendanceSystem::new(device_id);
        store.save(&system)?;
        Ok(Gateway {
            snapshot: Some(store),
            default_alerts: config.alerts,
            ..Gateway::in_memory(system, config.outbox_dir(), &config.form_url)
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> Timestamp {
        (self.clock)()
    }

    pub fn outbox(&self) -> &Outbox {
        &self.outbox
    }

    fn lock(&self) -> MutexGuard<'_, AttendanceSystem> {
        self.system.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self, system: &AttendanceSystem) -> Result<(), GatewayError> {
        if let Some(store) = &self.snapshot {
            store.save(system)?;
        }
        Ok(())
    }

    fn emit(&self, key: &SessionKey, kind: EventKind, payload: serde_json::Value) {
        let mut events = self.events.lock().unwrap_or_else(|p| p.into_inner());
        events.entry(key.clone()).or_default().push(kind, payload);
    }

    /// Copy of the current state.
    pub fn snapshot(&self) -> AttendanceSystem {
        self.lock().clone()
    }

    pub fn device_id(&self) -> String {
        self.lock().device_id().to_string()
    }

    pub fn session_key(&self, lecture_id: &str, date: NaiveDate) -> SessionKey {
        SessionKey::new(lecture_id, date, &self.device_id())
    }

    // -- roster ------------------------------------------------------------

    pub fn upsert_lecture(
        &self,
        lecture_id: &str,
        title: &str,
        teacher: &str,
        planned_sessions: u32,
        alerts: Option<AlertConfig>,
    ) -> Result<Lecture, GatewayError> {
        let mut sys = self.lock();
        let mut lecture = Lecture::new(lecture_id, title, teacher, planned_sessions);
        lecture.alerts = alerts.unwrap_or(self.default_alerts);
        sys.roster.upsert_lecture(lecture.clone())?;
        self.persist(&sys)?;
        Ok(lecture)
    }

    pub fn ingest_roster(
        &self,
        lecture_id: &str,
        csv: &[u8],
    ) -> Result<IngestReport, GatewayError> {
        let mut sys = self.lock();
        let report = sys.roster.ingest_roster_csv(lecture_id, csv)?;
        self.persist(&sys)?;
        Ok(report)
    }

    pub fn bind_card(
        &self,
        student_id: &str,
        tag: CanonicalTagId,
        overwrite: bool,
    ) -> Result<Binding, GatewayError> {
        let mut sys = self.lock();
        let binding = sys.bind_card(student_id, tag, overwrite)?;
        self.persist(&sys)?;
        Ok(binding)
    }

    pub fn roster(&self, lecture_id: &str) -> Result<Vec<ams_core::Student>, GatewayError> {
        let sys = self.lock();
        let students = sys.roster.enrolled(lecture_id)?;
        Ok(students.into_iter().cloned().collect())
    }

    // -- sessions ----------------------------------------------------------

    pub fn open_session(
        &self,
        lecture_id: &str,
        date: NaiveDate,
        at: Option<Timestamp>,
    ) -> Result<Session, GatewayError> {
        let at = at.unwrap_or_else(|| self.now());
        let mut sys = self.lock();
        let session = sys.open_session(lecture_id, date, at)?;
        self.persist(&sys)?;
        self.emit(&session.key(), EventKind::SessionOpened, json!(session));
        Ok(session)
    }

    pub fn tap(
        &self,
        key: &SessionKey,
        tag: &CanonicalTagId,
        at: Option<Timestamp>,
    ) -> Result<TapOutcome, GatewayError> {
        let at = at.unwrap_or_else(|| self.now());
        let mut sys = self.lock();
        let outcome = sys.record_tap(key, tag, at)?;
        self.persist(&sys)?;
        drop(sys);
        self.emit(
            key,
            EventKind::Tap,
            json!({ "tag": tag, "at": at, "outcome": outcome }),
        );
        if let TapOutcome::Recorded {
            student_id,
            alert,
            duplicate: false,
            ..
        } = &outcome
        {
            if *alert != ams_core::AlertLevel::Normal {
                self.emit(
                    key,
                    EventKind::Alert,
                    json!({ "student_id": student_id, "alert": alert }),
                );
            }
        }
        Ok(outcome)
    }

    /// Closes the session and writes one follow-up per absentee with an email.
    pub fn close_session(
        &self,
        key: &SessionKey,
        at: Option<Timestamp>,
    ) -> Result<CloseSummary, GatewayError> {
        let at = at.unwrap_or_else(|| self.now());
        let mut sys = self.lock();
        let closure = sys.close_session(key, at)?;
        let batch = compose_followups(&closure, &sys.roster, &sys.replica, &self.base_url)?;
        self.persist(&sys)?;
        drop(sys);
        self.outbox.write(&batch.messages)?;
        let summary = CloseSummary {
            followups: batch.messages.iter().map(|m| m.file_name()).collect(),
            skipped: batch.skipped,
            closure,
        };
        self.emit(key, EventKind::SessionClosed, json!(summary));
        Ok(summary)
    }

    /// Replays a `timestamp<TAB>KIND:HEX` script as one session: opened at
    /// the first tap, closed at the last unless `close` is false.
    pub fn replay_taps(
        &self,
        lecture_id: &str,
        date: NaiveDate,
        script: &str,
        close: bool,
    ) -> Result<ReplayReport, GatewayError> {
        let taps = parse_tap_script(script)?;
        let first = taps.first().map(|t| t.0);
        let last = taps.last().map(|t| t.0);
        let session =
            self.open_session(lecture_id, date, Some(first.unwrap_or_else(|| self.now())))?;
        let key = session.key();
        let outcomes = taps
            .iter()
            .map(|(at, tag)| self.tap(&key, tag, Some(*at)))
            .collect::<Result<Vec<_>, _>>()?;
        let closed = if close {
            Some(self.close_session(
                &key,
                Some(last.unwrap_or(session.opened_at.unwrap_or_default())),
            )?)
        } else {
            None
        };
        Ok(ReplayReport {
            session,
            outcomes,
            closed,
        })
    }

    pub fn frames_since(&self, key: &SessionKey, since: u64) -> Vec<EventFrame> {
        let events = self.events.lock().unwrap_or_else(|p| p.into_inner());
        events
            .get(key)
            .map(|log| log.since(since).to_vec())
            .unwrap_or_default()
    }

    /// Subscribes to a session's log, creating an empty one for sessions
    /// known only from the snapshot.
    pub fn subscribe(&self, key: &SessionKey) -> Result<watch::Receiver<u64>, GatewayError> {
        let known = self.lock().replica.session(key).is_some();
        let mut events = self.events.lock().unwrap_or_else(|p| p.into_inner());
        if !known && !events.contains_key(key) {
            return Err(GatewayError::NotFound(format!("session {key}")));
        }
        Ok(events.entry(key.clone()).or_default().subscribe())
    }

    // -- merge -------------------------------------------------------------

    fn merged(&self, report: MergeReport) -> MergeReport {
        let keys: Vec<SessionKey> = {
            let events = self.events.lock().unwrap_or_else(|p| p.into_inner());
            events.keys().cloned().collect()
        };
        for key in keys {
            self.emit(&key, EventKind::MergeCompleted, json!(report));
        }
        report
    }

    pub fn merge_file(&self, path: &Path) -> Result<MergeReport, GatewayError> {
        let file = store::import_exchange_file(path)?;
        let mut sys = self.lock();
        let report = sys.import_exchange(&file);
        self.persist(&sys)?;
        drop(sys);
        Ok(self.merged(report))
    }

    /// Runs a pairwise exchange with a listening peer.
    pub fn merge_peer(&self, address: &str, token: &str) -> Result<MergeReport, GatewayError> {
        let local = self.lock().replica.clone();
        let addr = address
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| GatewayError::BadRequest(format!("cannot resolve {address:?}")))?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(10))?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let merged = run_exchange(&mut FramedStream::new(stream), &local, token)?;
        let mut sys = self.lock();
        let report = sys.merge_replica(&merged);
        self.persist(&sys)?;
        drop(sys);
        Ok(self.merged(report))
    }

    /// Serves exchanges on `listener` one connection at a time, forever.
    pub fn serve_sync(&self, listener: TcpListener, token: &str) {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let _ = self.accept_exchange(stream, token);
        }
    }

    pub fn accept_exchange(
        &self,
        stream: TcpStream,
        token: &str,
    ) -> Result<MergeReport, GatewayError> {
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let local = self.lock().replica.clone();
        let merged = run_exchange(&mut FramedStream::new(stream), &local, token)?;
        let mut sys = self.lock();
        let report = sys.merge_replica(&merged);
        self.persist(&sys)?;
        drop(sys);
        Ok(self.merged(report))
    }

    // -- reports -----------------------------------------------------------

    pub fn report(&self, lecture_id: &str, min: usize) -> Result<Vec<AbsenteeRow>, GatewayError> {
        let sys = self.lock();
        Ok(absentee_report(&sys.roster, &sys.replica, lecture_id, min)?)
    }

    pub fn tabulation_csv(&self, lecture_id: &str) -> Result<String, GatewayError> {
        Ok(self.lock().tabulate(lecture_id)?.to_csv())
    }

    pub fn export_exchange(&self) -> ExchangeFile {
        self.lock().export_exchange()
    }

    pub fn ingest_reason(
        &self,
        submission: ReasonSubmission,
    ) -> Result<ReasonRecord, GatewayError> {
        let at = self.now();
        let mut sys = self.lock();
        let record = sys.ingest_reason(submission, at)?;
        self.persist(&sys)?;
        Ok(record)
    }

    pub fn unexplained(&self, lecture_id: &str) -> Result<Vec<(String, NaiveDate)>, GatewayError> {
        Ok(self.lock().unexplained_absences(lecture_id)?)
    }

    /// Replaces the whole state (restore from backup).
    pub fn replace_state(&self, system: AttendanceSystem) -> Result<(), GatewayError> {
        let mut sys = self.lock();
        *sys = system;
        self.persist(&sys)
    }
}
