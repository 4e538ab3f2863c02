//! On-disk workspace: one directory holds a governed dataset, its shard plan,
//! the trained ensemble, a baseline snapshot, the audit log and certificates.
//!
//! ```text
//! workspace.json          config
//! manifest.csv(.meta.json)
//! plan.csv(.meta.json)
//! models/ensemble.json    + shard-NNN.json
//! baseline/               manifest, plan and models as first trained
//! audit.log               hash-chained NDJSON
//! certificates/<id>.json
//! ```

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dp::{DpConfig, DpHyper};
use crate::ensemble::{Aggregation, EnsembleError, EnsembleModel, ENSEMBLE_FILE};
use crate::engine::{
    replay, verify_certificate, AuditError, AuditLog, Certificate, DisgorgementRequest, Engine, EngineError,
    ReasonCode, SystemState, Verification,
};
use crate::manifest::{ingest_csv, DataManifest, ManifestError};
use crate::sharding::{ShardError, ShardPlan};
use crate::submodel::{LogisticHyper, TrainSpec};

pub const CONFIG_FILE: &str = "workspace.json";
pub const WORKSPACE_FORMAT: &str = "disgorge-workspace/1";
pub const LOCK_FILE: &str = ".lock";
/// Environment variable naming the workspace directory.
pub const WORKSPACE_ENV: &str = "DISGORGE_WORKSPACE";

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("no workspace at {0} (run `ingest` first)")]
    NotInitialized(PathBuf),
    #[error("workspace has no {what} yet (run `{command}` first)")]
    Missing { what: &'static str, command: &'static str },
    #[error("workspace {0} is locked by another process (delete {LOCK_FILE} if stale)")]
    Locked(PathBuf),
    #[error("workspace has {0} recorded disgorgement(s); pass --force to discard that history")]
    HasHistory(usize),
    #[error("invalid workspace config: {0}")]
    Config(String),
    #[error("invalid request id `{0}`: use letters, digits, `.`, `_` or `-`")]
    InvalidRequestId(String),
    #[error("no request `{0}` in the audit log")]
    UnknownRequest(String),
    #[error("plan was built for manifest {plan} but the workspace manifest is {manifest} (re-run `shard`)")]
    StalePlan { plan: String, manifest: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Shard(#[from] ShardError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl WorkspaceError {
    /// Errors that mean stored evidence failed to check out.
    pub fn is_verification_failure(&self) -> bool {
        matches!(
            self,
            WorkspaceError::Audit(AuditError::Corrupt { .. })
                | WorkspaceError::Engine(EngineError::Audit(AuditError::Corrupt { .. }))
                | WorkspaceError::Engine(EngineError::ReplayDivergence { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, WorkspaceError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Paths are relative to the workspace directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub format: String,
    pub manifest: String,
    pub plan: String,
    pub models: String,
    pub baseline: String,
    pub audit_log: String,
    pub certificates: String,
    /// Spec used by the most recent `train`.
    pub train: TrainSpec,
    pub aggregation: Aggregation,
    pub dp: DpConfig,
    pub dp_hyper: DpHyper,
}

impl Default for WorkspaceConfig {
    fn default() -> Self {
        WorkspaceConfig {
            format: WORKSPACE_FORMAT.into(),
            manifest: "manifest.csv".into(),
            plan: "plan.csv".into(),
            models: "models".into(),
            baseline: "baseline".into(),
            audit_log: "audit.log".into(),
            certificates: "certificates".into(),
            train: TrainSpec::Logistic(LogisticHyper::default()),
            aggregation: Aggregation::UniformAverage,
            dp: DpConfig::default(),
            dp_hyper: DpHyper::default(),
        }
    }
}

impl WorkspaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.format != WORKSPACE_FORMAT {
            return Err(WorkspaceError::Config(format!("unsupported format `{}`", self.format)));
        }
        for p in [
            &self.manifest,
            &self.plan,
            &self.models,
            &self.baseline,
            &self.audit_log,
            &self.certificates,
        ] {
            let path = Path::new(p);
            let inside = path
                .components()
                .all(|c| matches!(c, std::path::Component::Normal(_) | std::path::Component::CurDir));
            if p.is_empty() || !inside {
                return Err(WorkspaceError::Config(format!(
                    "path `{p}` must be relative and stay inside the workspace"
                )));
            }
        }
        Ok(())
    }
}

/// Exclusive lock on a workspace, released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    config: WorkspaceConfig,
}

/// A certificate looked up in the workspace together with its check.
#[derive(Debug, Clone, Serialize)]
pub struct RequestCheck {
    pub request_id: String,
    pub seq: u64,
    pub certificate: Certificate,
    pub verification: Verification,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditCheck {
    pub entries: usize,
    pub head_hash: String,
    pub verification: Verification,
}

fn failed(reason: ReasonCode, detail: impl Into<String>) -> Verification {
    Verification {
        ok: false,
        reason: Some(reason),
        detail: detail.into(),
    }
}

fn passed(detail: impl Into<String>) -> Verification {
    Verification {
        ok: true,
        reason: None,
        detail: detail.into(),
    }
}

fn valid_request_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn write_state(dir: &Path, cfg: &WorkspaceConfig, state: &SystemState) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    state.manifest.save(&dir.join(&cfg.manifest))?;
    state.plan.save(&dir.join(&cfg.plan))?;
    // write models beside the old ones, then swap, so no stale member files survive
    let models = dir.join(&cfg.models);
    let fresh = dir.join(format!("{}.new", cfg.models));
    if fresh.exists() {
        fs::remove_dir_all(&fresh).map_err(io_err(&fresh))?;
    }
    state.ensemble.save(&fresh)?;
    if models.exists() {
        fs::remove_dir_all(&models).map_err(io_err(&models))?;
    }
    fs::rename(&fresh, &models).map_err(io_err(&models))
}

fn read_state(dir: &Path, cfg: &WorkspaceConfig) -> Result<SystemState> {
    let manifest = ingest_csv(&dir.join(&cfg.manifest), None)?;
    let plan = ShardPlan::load(&dir.join(&cfg.plan))?;
    let ensemble = EnsembleModel::load(&dir.join(&cfg.models).join(ENSEMBLE_FILE))?;
    Ok(SystemState::new(manifest, plan, ensemble)?)
}

impl Workspace {
    /// Creates the directory and a default config, or opens an existing one.
    pub fn init(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        if root.join(CONFIG_FILE).exists() {
            return Self::open(root);
        }
        let ws = Workspace {
            root: root.to_path_buf(),
            config: WorkspaceConfig::default(),
        };
        ws.save_config()?;
        Ok(ws)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(CONFIG_FILE);
        if !path.exists() {
            return Err(WorkspaceError::NotInitialized(root.to_path_buf()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let config: WorkspaceConfig = serde_json::from_str(&text).map_err(|e| WorkspaceError::Config(e.to_string()))?;
        config.validate()?;
        Ok(Workspace {
            root: root.to_path_buf(),
            config,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &WorkspaceConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut WorkspaceConfig {
        &mut self.config
    }

    pub fn save_config(&self) -> Result<()> {
        self.config.validate()?;
        let path = self.root.join(CONFIG_FILE);
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn lock(&self) -> Result<WorkspaceLock> {
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkspaceLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(WorkspaceError::Locked(self.root.clone())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Number of disgorgements recorded in the audit log (0 when untrained).
    pub fn history_len(&self) -> Result<usize> {
        let path = self.path(&self.config.audit_log);
        if !path.exists() {
            return Ok(0);
        }
        Ok(AuditLog::load(&path)?.entries().len() - 1)
    }

    fn guard_history(&self, force: bool) -> Result<()> {
        match self.history_len()? {
            n if n > 0 && !force => Err(WorkspaceError::HasHistory(n)),
            _ => Ok(()),
        }
    }

    fn remove_if_exists(&self, relative: &str) -> Result<()> {
        let p = self.path(relative);
        let r = if p.is_dir() {
            fs::remove_dir_all(&p)
        } else if p.exists() {
            fs::remove_file(&p)
        } else {
            Ok(())
        };
        r.map_err(io_err(&p))
    }

    /// Drops every artifact derived from the manifest or plan.
    fn clear_trained(&self) -> Result<()> {
        let c = &self.config;
        for p in [&c.models, &c.baseline, &c.audit_log, &c.certificates] {
            self.remove_if_exists(p)?;
        }
        Ok(())
    }

    /// Replaces the manifest; any plan, models and history are discarded.
    pub fn ingest(&self, manifest: &DataManifest, force: bool) -> Result<()> {
        self.guard_history(force)?;
        self.clear_trained()?;
        self.remove_if_exists(&self.config.plan)?;
        self.remove_if_exists(&(self.config.plan.clone() + ".meta.json"))?;
        manifest.save(&self.path(&self.config.manifest))?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<DataManifest> {
        let path = self.path(&self.config.manifest);
        if !path.exists() {
            return Err(WorkspaceError::Missing {
                what: "manifest",
                command: "ingest",
            });
        }
        Ok(ingest_csv(&path, None)?)
    }

    /// Replaces the plan; models and history are discarded.
    pub fn save_plan(&self, plan: &ShardPlan, force: bool) -> Result<()> {
        self.guard_history(force)?;
        self.clear_trained()?;
        plan.save(&self.path(&self.config.plan))?;
        Ok(())
    }

    pub fn plan(&self) -> Result<ShardPlan> {
        let path = self.path(&self.config.plan);
        if !path.exists() {
            return Err(WorkspaceError::Missing {
                what: "shard plan",
                command: "shard",
            });
        }
        Ok(ShardPlan::load(&path)?)
    }

    /// Manifest and a plan that was built for it.
    pub fn manifest_and_plan(&self) -> Result<(DataManifest, ShardPlan)> {
        let m = self.manifest()?;
        let plan = self.plan()?;
        if plan.manifest_hash != m.manifest_hash() {
            return Err(WorkspaceError::StalePlan {
                plan: plan.manifest_hash.to_hex(),
                manifest: m.manifest_hash().to_hex(),
            });
        }
        Ok((m, plan))
    }

    /// Stores a freshly trained state as both current and baseline and
    /// starts a new audit log.
    pub fn commit_trained(&mut self, state: &SystemState, spec: &TrainSpec, force: bool) -> Result<()> {
        self.guard_history(force)?;
        self.clear_trained()?;
        write_state(&self.root, &self.config, state)?;
        write_state(&self.path(&self.config.baseline), &self.config, state)?;
        AuditLog::genesis(state.digest()).save(&self.path(&self.config.audit_log))?;
        self.config.train = spec.clone();
        self.config.aggregation = state.ensemble.aggregation();
        if let TrainSpec::DpLogistic { hyper, config } = spec {
            self.config.dp = *config;
            self.config.dp_hyper = *hyper;
        }
        self.save_config()
    }

    fn require_trained(&self) -> Result<()> {
        if !self.path(&self.config.models).join(ENSEMBLE_FILE).exists() {
            return Err(WorkspaceError::Missing {
                what: "trained models",
                command: "train",
            });
        }
        Ok(())
    }

    pub fn state(&self) -> Result<SystemState> {
        self.require_trained()?;
        read_state(&self.root, &self.config)
    }

    pub fn baseline(&self) -> Result<SystemState> {
        self.require_trained()?;
        read_state(&self.path(&self.config.baseline), &self.config)
    }

    pub fn audit_log(&self) -> Result<AuditLog> {
        self.require_trained()?;
        Ok(AuditLog::load(&self.path(&self.config.audit_log))?)
    }

    /// Current state attached to its audit log.
    pub fn engine(&self) -> Result<Engine> {
        Ok(Engine::resume(self.state()?, self.audit_log()?)?)
    }

    pub fn certificate_path(&self, request_id: &str) -> PathBuf {
        self.path(&self.config.certificates).join(format!("{request_id}.json"))
    }

    /// Runs one request and persists the certificate, the new state and the
    /// audit entry, in that order.
    pub fn disgorge(&self, request: &DisgorgementRequest) -> Result<Certificate> {
        if !valid_request_id(&request.request_id) {
            return Err(WorkspaceError::InvalidRequestId(request.request_id.clone()));
        }
        let mut engine = self.engine()?;
        let persisted = engine.log().entries().len();
        let cert = engine.submit(request)?;
        let dir = self.path(&self.config.certificates);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let cert_path = self.certificate_path(&request.request_id);
        fs::write(&cert_path, cert.to_json_line() + "\n").map_err(io_err(&cert_path))?;
        write_state(&self.root, &self.config, engine.state())?;
        engine.log().append_to(&self.path(&self.config.audit_log), persisted)?;
        Ok(cert)
    }

    pub fn certificate(&self, request_id: &str) -> Result<Certificate> {
        let path = self.certificate_path(request_id);
        if !valid_request_id(request_id) || !path.exists() {
            return Err(WorkspaceError::UnknownRequest(request_id.to_string()));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| WorkspaceError::Config(format!("{}: {e}", path.display())))
    }

    /// Checks `cert` against the audit log and against the state it was
    /// issued for, rebuilt by replaying the log from the baseline.
    pub fn verify_certificate(&self, cert: &Certificate) -> Result<RequestCheck> {
        let log = self.audit_log()?;
        let entry = log
            .find_request(&cert.request_id)
            .ok_or_else(|| WorkspaceError::UnknownRequest(cert.request_id.clone()))?;
        let seq = entry.record.seq;
        let check = |verification| RequestCheck {
            request_id: cert.request_id.clone(),
            seq,
            certificate: cert.clone(),
            verification,
        };
        if entry.record.certificate != Some(cert.digest()) {
            return Ok(check(failed(
                ReasonCode::EvidenceMismatch,
                "certificate does not match the digest recorded in the audit log",
            )));
        }
        let state = match replay(&self.baseline()?, &log.truncated(seq as usize + 1)) {
            Ok((_, state)) => state,
            Err(e @ EngineError::ReplayDivergence { .. }) => {
                return Ok(check(failed(ReasonCode::StateMismatch, e.to_string())));
            }
            Err(e) => return Err(e.into()),
        };
        Ok(check(verify_certificate(cert, &state)))
    }

    pub fn verify_request(&self, request_id: &str) -> Result<RequestCheck> {
        let cert = self.certificate(request_id)?;
        self.verify_certificate(&cert)
    }

    /// Validates the hash chain, replays the log from the baseline and
    /// compares the result with the current state.
    pub fn verify_audit(&self) -> Result<AuditCheck> {
        let log = match self.audit_log() {
            Ok(log) => log,
            Err(WorkspaceError::Audit(e @ AuditError::Corrupt { .. })) => {
                return Ok(AuditCheck {
                    entries: 0,
                    head_hash: String::new(),
                    verification: failed(ReasonCode::InvalidEvidence, e.to_string()),
                });
            }
            Err(e) => return Err(e),
        };
        let report = |verification| AuditCheck {
            entries: log.entries().len(),
            head_hash: log.head().entry_hash.to_hex(),
            verification,
        };
        let replayed = match replay(&self.baseline()?, &log) {
            Ok((_, state)) => state,
            Err(e @ EngineError::ReplayDivergence { .. }) => {
                return Ok(report(failed(ReasonCode::StateMismatch, e.to_string())));
            }
            Err(e) => return Err(e.into()),
        };
        let current = self.state()?.digest();
        if replayed.digest() != current {
            return Ok(report(failed(
                ReasonCode::StateMismatch,
                format!(
                    "replay ends at {} but workspace state is {current}",
                    replayed.digest()
                ),
            )));
        }
        Ok(report(passed(format!(
            "{} request(s) replayed; state {current}",
            log.entries().len() - 1
        ))))
    }
}
