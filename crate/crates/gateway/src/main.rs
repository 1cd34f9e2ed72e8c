use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ams_core::store::{self, export_exchange_file, import_exchange_file};
use ams_core::{
    AlertConfig, BackupArchive, CanonicalTagId, ReasonSubmission, SnapshotStore, Timestamp,
};
use ams_gateway::{router, Gateway, GatewayConfig, GatewayError};

#[derive(Parser)]
#[command(name = "ams", version, about = "Contactless-card attendance ledger")]
struct Cli {
    /// Directory holding the state snapshot.
    #[arg(long, global = true, env = "AMS_DATA_DIR", default_value = ".ams")]
    data_dir: PathBuf,
    /// Where follow-up messages are written (default: <data-dir>/outbox).
    #[arg(long, global = true, env = "AMS_OUTBOX_DIR")]
    outbox: Option<PathBuf>,
    /// Base URL of the absence-reason form.
    #[arg(long, global = true, env = "AMS_FORM_URL", default_value = ams_gateway::config::DEFAULT_FORM_URL)]
    form_url: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SessionArgs {
    #[arg(long)]
    lecture: String,
    #[arg(long)]
    date: NaiveDate,
    /// Milliseconds since the epoch or RFC 3339; defaults to now.
    #[arg(long, value_parser = parse_ts)]
    at: Option<Timestamp>,
}

#[derive(Subcommand)]
enum SessionCommand {
    Open(SessionArgs),
    Close(SessionArgs),
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty snapshot for this device.
    Init {
        #[arg(long, env = "AMS_DEVICE_ID")]
        device: String,
    },
    /// Add or replace a lecture.
    Lecture {
        id: String,
        #[arg(long)]
        title: String,
        #[arg(long, default_value = "")]
        teacher: String,
        #[arg(long)]
        planned: u32,
        #[arg(long, default_value_t = 2)]
        consecutive_yellow: u32,
        #[arg(long, default_value_t = 3)]
        many_yellow: u32,
        /// Absences that forfeit credit (default: planned / 3 + 1).
        #[arg(long)]
        red_limit: Option<u32>,
    },
    /// Enroll students from a CSV roster.
    Ingest {
        #[arg(long)]
        lecture: String,
        file: PathBuf,
    },
    /// Bind a card to a student.
    Bind {
        #[arg(long)]
        student: String,
        /// KIND:HEX, e.g. NFCF:011003108B348CD6
        #[arg(long)]
        tag: CanonicalTagId,
        #[arg(long)]
        overwrite: bool,
    },
    #[command(subcommand)]
    Session(SessionCommand),
    /// Record one tap in an open session.
    Tap {
        #[command(flatten)]
        session: SessionArgs,
        #[arg(long)]
        tag: CanonicalTagId,
    },
    /// Replay a `timestamp<TAB>KIND:HEX` script as one session.
    TapReplay {
        #[arg(long)]
        lecture: String,
        #[arg(long)]
        date: NaiveDate,
        script: PathBuf,
        /// Leave the session open after the last tap.
        #[arg(long)]
        no_close: bool,
    },
    /// Write this device's state as an exchange file.
    Export {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Merge an exchange file into this device's state.
    Import { file: PathBuf },
    /// Merge two exchange files into a third without touching the snapshot.
    Merge {
        a: PathBuf,
        b: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Students with at least `min` absences, as JSON.
    Report {
        #[arg(long)]
        lecture: String,
        #[arg(long, default_value_t = 1)]
        min: usize,
    },
    /// Student by date attendance grid, as CSV.
    Tabulate {
        #[arg(long)]
        lecture: String,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Absences with no submitted reason.
    Unexplained {
        #[arg(long)]
        lecture: String,
    },
    /// Record a reason for an absence.
    Reason {
        #[arg(long)]
        lecture: String,
        #[arg(long)]
        student: String,
        #[arg(long)]
        date: NaiveDate,
        #[arg(long)]
        text: String,
    },
    /// Write a checksummed backup archive.
    Backup {
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Replace the snapshot with a backup archive.
    Restore { file: PathBuf },
    /// Run the HTTP API, and optionally a sync listener.
    Serve {
        #[arg(long, env = "AMS_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "AMS_SYNC_PORT")]
        sync_port: Option<u16>,
        #[arg(long, env = "AMS_PAIRING_TOKEN", default_value = "")]
        token: String,
    },
    /// Exchange state with a listening peer.
    Sync {
        #[arg(long)]
        peer: String,
        #[arg(long, env = "AMS_PAIRING_TOKEN")]
        token: String,
    },
}

fn parse_ts(s: &str) -> Result<Timestamp, String> {
    Timestamp::parse(s).ok_or_else(|| format!("bad timestamp {s:?}"))
}

fn print_json<T: Serialize>(value: &T) -> Result<(), GatewayError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| GatewayError::Io(e.into()))?;
    println!("{text}");
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>, GatewayError> {
    fs::read(path).map_err(|e| {
        GatewayError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn run(cli: Cli) -> Result<(), GatewayError> {
    let config = GatewayConfig {
        data_dir: cli.data_dir,
        outbox_dir: cli.outbox,
        form_url: cli.form_url,
        alerts: AlertConfig::default(),
    };
    let open = || Gateway::open(&config);

    match cli.command {
        Command::Init { device } => {
            let gw = Gateway::init(&config, &device)?;
            println!(
                "initialised device {} at {}",
                gw.device_id(),
                config.snapshot_path().display()
            );
        }
        Command::Lecture {
            id,
            title,
            teacher,
            planned,
            consecutive_yellow,
            many_yellow,
            red_limit,
        } => {
            let alerts = AlertConfig {
                consecutive_yellow,
                many_yellow,
                red_absence_limit: red_limit,
            };
            alerts
                .validate()
                .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
            print_json(&open()?.upsert_lecture(&id, &title, &teacher, planned, Some(alerts))?)?;
        }
        Command::Ingest { lecture, file } => {
            print_json(&open()?.ingest_roster(&lecture, &read(&file)?)?)?;
        }
        Command::Bind {
            student,
            tag,
            overwrite,
        } => print_json(&open()?.bind_card(&student, tag, overwrite)?)?,
        Command::Session(SessionCommand::Open(s)) => {
            print_json(&open()?.open_session(&s.lecture, s.date, s.at)?)?
        }
        Command::Session(SessionCommand::Close(s)) => {
            let gw = open()?;
            let key = gw.session_key(&s.lecture, s.date);
            print_json(&gw.close_session(&key, s.at)?)?;
        }
        Command::Tap { session: s, tag } => {
            let gw = open()?;
            let key = gw.session_key(&s.lecture, s.date);
            print_json(&gw.tap(&key, &tag, s.at)?)?;
        }
        Command::TapReplay {
            lecture,
            date,
            script,
            no_close,
        } => {
            let text = String::from_utf8(read(&script)?)
                .map_err(|_| GatewayError::BadRequest("tap script is not UTF-8".into()))?;
            print_json(&open()?.replay_taps(&lecture, date, &text, !no_close)?)?;
        }
        Command::Export { output } => export_exchange_file(&open()?.export_exchange(), &output)?,
        Command::Import { file } => print_json(&open()?.merge_file(&file)?)?,
        Command::Merge { a, b, output } => {
            let merged = import_exchange_file(&a)?.merge(&import_exchange_file(&b)?);
            export_exchange_file(&merged, &output)?;
        }
        Command::Report { lecture, min } => print_json(&open()?.report(&lecture, min)?)?,
        Command::Tabulate { lecture, output } => {
            let csv = open()?.tabulation_csv(&lecture)?;
            match output {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Unexplained { lecture } => {
            for (student, date) in open()?.unexplained(&lecture)? {
                println!("{student}\t{date}");
            }
        }
        Command::Reason {
            lecture,
            student,
            date,
            text,
        } => print_json(&open()?.ingest_reason(ReasonSubmission {
            lecture_id: lecture,
            student_id: student,
            date,
            reason_text: text,
        })?)?,
        Command::Backup { output } => {
            let sys = open()?.snapshot();
            fs::write(output, store::backup(&sys).to_bytes())?;
        }
        Command::Restore { file } => {
            let archive = BackupArchive::from_bytes(&read(&file)?)?;
            let sys = store::restore(&archive)?;
            SnapshotStore::new(config.snapshot_path()).save(&sys)?;
            println!("restored device {}", sys.device_id());
        }
        Command::Serve {
            port,
            sync_port,
            token,
        } => {
            let gw = Arc::new(open()?);
            if let Some(sync_port) = sync_port {
                let listener = TcpListener::bind(("0.0.0.0", sync_port))?;
                let gw = Arc::clone(&gw);
                std::thread::spawn(move || gw.serve_sync(listener, &token));
                eprintln!("sync listening on port {sync_port}");
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                eprintln!("http listening on port {port}");
                axum::serve(listener, router(gw)).await
            })?;
        }
        Command::Sync { peer, token } => print_json(&open()?.merge_peer(&peer, &token)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
