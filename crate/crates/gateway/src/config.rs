use std::path::PathBuf;

use ams_core::AlertConfig;

pub const SNAPSHOT_FILE: &str = "state.amsnap";
pub const DEFAULT_FORM_URL: &str = "http://localhost:8080/reasons/form";

/// Where a gateway keeps its state and writes follow-ups.
#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/outbox`.
    pub outbox_dir: Option<PathBuf>,
    pub form_url: String,
    /// Thresholds given to lectures created without their own.
    pub alerts: AlertConfig,
}

impl GatewayConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        GatewayConfig {
            data_dir: data_dir.into(),
            outbox_dir: None,
            form_url: DEFAULT_FORM_URL.to_string(),
            alerts: AlertConfig::default(),
        }
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.data_dir.join(SNAPSHOT_FILE)
    }

    pub fn outbox_dir(&self) -> PathBuf {
        self.outbox_dir
            .clone()
            .unwrap_or_else(|| self.data_dir.join("outbox"))
    }
}
