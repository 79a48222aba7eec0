//! Live sessions. Each session runs one loop task that owns its [`Episode`];
//! HTTP handlers talk to it through a command channel and read frames from
//! a broadcast channel. Model calls run on the blocking pool and re-enter
//! the loop as messages, so ticks never wait on the network.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use lams_core::episode::{derive_seed, Episode, EpisodeConfig, StateFrame};
use lams_core::events::{read_log, reconstruct, to_jsonl, EndReason, Event, EventRecord};
use lams_core::gateway::{CompletionResult, Gateway, GatewayError};
use lams_core::learning::LearningStores;
use lams_core::model::{ActionDirection, DirectionGroup, ModeMapping, UserAction, VelocityProfile};
use lams_core::sim::{SessionClock, TaskKind};
use lams_core::switcher::{ProvenanceRecord, StrategyKind};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::time::{Instant, MissedTickBehavior};

use crate::error::ServiceError;

/// Seconds a correction may sit before it settles into an example.
const DEBOUNCE_SECS: f64 = 2.0;

#[derive(Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub gateway: Option<Arc<dyn Gateway>>,
    pub clock: SessionClock,
    pub velocity: VelocityProfile,
    /// A held input older than this reads as a released stick.
    pub input_timeout: Duration,
    pub frame_buffer: usize,
    /// How long a finished session waits for an in-flight rule synthesis.
    pub drain_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>, gateway: Option<Arc<dyn Gateway>>) -> Self {
        Self {
            data_dir: data_dir.into(),
            gateway,
            clock: SessionClock::default(),
            velocity: VelocityProfile::default(),
            input_timeout: Duration::from_millis(500),
            frame_buffer: 256,
            drain_timeout: Duration::from_secs(30),
        }
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.data_dir.join("logs")
    }

    pub fn stores_dir(&self) -> PathBuf {
        self.data_dir.join("stores")
    }
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub task: String,
    pub strategy: String,
    #[serde(default)]
    pub layout_seed: u64,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
    /// Sessions sharing a run id share learning stores, one at a time.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "one")]
    pub trial_index: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManualSwitchReply {
    pub slot: DirectionGroup,
    pub direction: ActionDirection,
    pub manual_switch_count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupedCycleReply {
    pub group: u8,
    pub mapping: ModeMapping,
    pub manual_switch_count: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndReply {
    pub reason: EndReason,
    pub manual_switch_count: u32,
    pub stages_reached: usize,
    pub log_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoresSummary {
    pub run_id: String,
    pub examples: usize,
    pub rules: Vec<String>,
}

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

enum Command {
    Input(UserAction),
    ManualSwitch(DirectionGroup, Reply<ManualSwitchReply>),
    GroupedCycle(Reply<GroupedCycleReply>),
    End(Reply<EndReply>),
    Provenance(oneshot::Sender<Option<ProvenanceRecord>>),
    Stores(oneshot::Sender<StoresSummary>),
}

enum CallDone {
    Switch(u64, Result<CompletionResult, GatewayError>),
    RuleGen(u64, Result<CompletionResult, GatewayError>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub task: TaskKind,
    pub strategy: StrategyKind,
    pub run_id: String,
    pub trial_index: u32,
    pub layout_seed: u64,
    pub log_path: PathBuf,
}

#[derive(Clone)]
pub struct SessionHandle {
    pub info: SessionInfo,
    commands: mpsc::UnboundedSender<Command>,
    frames: broadcast::Sender<Arc<StateFrame>>,
    latest: watch::Receiver<Arc<StateFrame>>,
}

impl SessionHandle {
    fn closed(&self) -> ServiceError {
        ServiceError::SessionClosed(self.info.id.clone())
    }

    pub fn latest(&self) -> Arc<StateFrame> {
        self.latest.borrow().clone()
    }

    pub fn is_live(&self) -> bool {
        !self.commands.is_closed()
    }

    /// Receiver for future frames plus the current one. Subscribing first
    /// means no frame is missed; the current frame may repeat once.
    pub fn subscribe(&self) -> Result<(Arc<StateFrame>, broadcast::Receiver<Arc<StateFrame>>), ServiceError> {
        if !self.is_live() {
            return Err(self.closed());
        }
        let rx = self.frames.subscribe();
        Ok((self.latest(), rx))
    }

    pub fn input(&self, a: UserAction) -> Result<(), ServiceError> {
        self.commands.send(Command::Input(a)).map_err(|_| self.closed())
    }

    async fn ask<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> Result<T, ServiceError> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).map_err(|_| self.closed())?;
        rx.await.map_err(|_| self.closed())
    }

    pub async fn manual_switch(&self, slot: DirectionGroup) -> Result<ManualSwitchReply, ServiceError> {
        self.ask(|tx| Command::ManualSwitch(slot, tx)).await?
    }

    pub async fn grouped_cycle(&self) -> Result<GroupedCycleReply, ServiceError> {
        self.ask(Command::GroupedCycle).await?
    }

    pub async fn end(&self) -> Result<EndReply, ServiceError> {
        self.ask(Command::End).await?
    }

    pub async fn provenance(&self) -> Result<Option<ProvenanceRecord>, ServiceError> {
        self.ask(Command::Provenance).await
    }

    pub async fn stores(&self) -> Result<StoresSummary, ServiceError> {
        self.ask(Command::Stores).await
    }
}

/// All sessions of one service instance.
pub struct Registry {
    pub config: ServiceConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    /// (task, run id) -> session currently holding those stores
    stores_in_use: Mutex<HashMap<(TaskKind, String), String>>,
}

impl Registry {
    pub fn new(config: ServiceConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(config.logs_dir())?;
        std::fs::create_dir_all(config.stores_dir())?;
        Ok(Arc::new(Self {
            config,
            sessions: Mutex::new(HashMap::new()),
            stores_in_use: Mutex::new(HashMap::new()),
        }))
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<(SessionInfo, bool)> {
        let mut v: Vec<_> = self
            .sessions
            .lock()
            .expect("session table poisoned")
            .values()
            .map(|h| (h.info.clone(), h.is_live()))
            .collect();
        v.sort_by(|a, b| a.0.id.cmp(&b.0.id));
        v
    }

    /// Starts a session loop. Must be called inside a tokio runtime.
    pub fn create(self: &Arc<Self>, req: CreateSession) -> Result<SessionHandle, ServiceError> {
        let task: TaskKind = req.task.parse().map_err(|_| ServiceError::UnknownTask(req.task.clone()))?;
        let strategy: StrategyKind = req
            .strategy
            .parse()
            .map_err(|_| ServiceError::UnknownStrategy(req.strategy.clone()))?;
        if strategy.uses_llm() && self.config.gateway.is_none() {
            return Err(ServiceError::Invalid(format!(
                "strategy {strategy} needs a model backend and none is configured"
            )));
        }
        let id = uuid::Uuid::new_v4().simple().to_string();
        let run_id = req.run_id.clone().unwrap_or_else(|| format!("session-{id}"));
        if run_id.is_empty() || run_id.contains(['/', '\\']) || run_id.contains("..") {
            return Err(ServiceError::Invalid(format!("bad run id {run_id:?}")));
        }
        {
            let mut used = self.stores_in_use.lock().expect("stores table poisoned");
            if let Some(other) = used.get(&(task, run_id.clone())) {
                return Err(ServiceError::StoresBusy {
                    task: task.to_string(),
                    run_id,
                    session: other.clone(),
                });
            }
            used.insert((task, run_id.clone()), id.clone());
        }
        let release = |e: ServiceError| {
            self.stores_in_use
                .lock()
                .expect("stores table poisoned")
                .remove(&(task, run_id.clone()));
            e
        };

        let stores_dir = self.config.stores_dir();
        let stores = LearningStores::load(&stores_dir, task, &run_id)
            .map_err(|e| release(ServiceError::Internal(e.to_string())))?
            .unwrap_or_else(|| LearningStores::new(task, run_id.clone()));
        let log_path = self.config.logs_dir().join(format!("{run_id}__{id}.jsonl"));
        let file = File::create(&log_path).map_err(|e| release(ServiceError::Internal(e.to_string())))?;

        let mut cfg = EpisodeConfig::new(task, strategy);
        cfg.run_id = run_id.clone();
        cfg.trial_index = req.trial_index;
        cfg.layout_seed = req.layout_seed;
        cfg.shuffle_seed = req.shuffle_seed.unwrap_or_else(|| derive_seed(req.layout_seed, 0x5eed));
        cfg.velocity = self.config.velocity;
        cfg.clock = self.config.clock;
        cfg.debounce_ticks = (DEBOUNCE_SECS / self.config.clock.tick_duration).round().max(1.0) as u64;
        let episode =
            Episode::new(cfg, stores, Some(Box::new(file))).map_err(|e| release(ServiceError::Internal(e.to_string())))?;

        let info = SessionInfo {
            id: id.clone(),
            task,
            strategy,
            run_id,
            trial_index: req.trial_index,
            layout_seed: req.layout_seed,
            log_path,
        };
        let (commands, cmd_rx) = mpsc::unbounded_channel();
        let (frames, _) = broadcast::channel(self.config.frame_buffer.max(1));
        let (latest_tx, latest) = watch::channel(Arc::new(episode.peek_frame()));
        let handle = SessionHandle {
            info: info.clone(),
            commands,
            frames: frames.clone(),
            latest,
        };
        self.sessions
            .lock()
            .expect("session table poisoned")
            .insert(id.clone(), handle.clone());

        let lp = SessionLoop {
            info,
            episode,
            registry: Arc::clone(self),
            input: UserAction::ZERO,
            input_at: Instant::now(),
            pending_rulegen: None,
            stores_version: (0, 0),
            frames,
            latest: latest_tx,
        };
        tokio::spawn(lp.run(cmd_rx));
        Ok(handle)
    }

    fn release_stores(&self, task: TaskKind, run_id: &str) {
        self.stores_in_use
            .lock()
            .expect("stores table poisoned")
            .remove(&(task, run_id.to_string()));
    }
}

struct SessionLoop {
    info: SessionInfo,
    episode: Episode,
    registry: Arc<Registry>,
    input: UserAction,
    input_at: Instant,
    pending_rulegen: Option<u64>,
    stores_version: (usize, usize),
    frames: broadcast::Sender<Arc<StateFrame>>,
    latest: watch::Sender<Arc<StateFrame>>,
}

impl SessionLoop {
    async fn run(mut self, mut commands: mpsc::UnboundedReceiver<Command>) {
        let cfg = self.registry.config.clone();
        let mut interval = tokio::time::interval(Duration::from_secs_f64(cfg.clock.tick_duration));
        interval.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let (done_tx, mut done_rx) = mpsc::unbounded_channel();
        tracing::info!(session = %self.info.id, task = %self.info.task, strategy = %self.info.strategy, "session started");
        self.dispatch(&done_tx);

        loop {
            tokio::select! {
                _ = interval.tick() => {
                    if self.input_at.elapsed() > cfg.input_timeout {
                        self.input = UserAction::ZERO;
                    }
                    if let Err(e) = self.episode.tick(self.input) {
                        tracing::warn!(session = %self.info.id, error = %e, "tick failed");
                    }
                    self.dispatch(&done_tx);
                    self.persist_stores();
                    self.publish();
                    if self.episode.ended().is_some() {
                        break;
                    }
                }
                cmd = commands.recv() => {
                    let Some(cmd) = cmd else {
                        // every handle is gone
                        self.episode.finish(EndReason::Stopped);
                        break;
                    };
                    if self.handle(cmd) {
                        break;
                    }
                }
                Some(done) = done_rx.recv() => {
                    self.complete(done);
                    self.dispatch(&done_tx);
                    self.persist_stores();
                }
            }
        }
        // refuse further commands while the last rule synthesis lands
        commands.close();
        let deadline = Instant::now() + cfg.drain_timeout;
        while self.pending_rulegen.is_some() {
            match tokio::time::timeout_at(deadline, done_rx.recv()).await {
                Ok(Some(done)) => self.complete(done),
                _ => break,
            }
        }
        self.persist_stores();
        self.publish();
        if let Some(e) = self.episode.log_mut().take_sink_error() {
            tracing::error!(session = %self.info.id, error = %e, "event log was not fully written");
        }
        self.registry.release_stores(self.info.task, &self.info.run_id);
        tracing::info!(session = %self.info.id, reason = ?self.episode.ended(), "session closed");
    }

    /// Returns true when the loop should stop.
    fn handle(&mut self, cmd: Command) -> bool {
        let id = self.info.id.clone();
        match cmd {
            Command::Input(a) => {
                self.input = a;
                self.input_at = Instant::now();
            }
            Command::ManualSwitch(slot, reply) => {
                let r = self
                    .episode
                    .manual_switch(slot)
                    .map(|direction| ManualSwitchReply {
                        slot,
                        direction,
                        manual_switch_count: self.episode.manual_switch_count(),
                    })
                    .map_err(|e| ServiceError::from_episode(&id, e));
                let _ = reply.send(r);
            }
            Command::GroupedCycle(reply) => {
                let r = self
                    .episode
                    .grouped_cycle()
                    .map(|mapping| GroupedCycleReply {
                        group: self.episode.grouped_state().map(|g| g.group).unwrap_or(0),
                        mapping,
                        manual_switch_count: self.episode.manual_switch_count(),
                    })
                    .map_err(|e| ServiceError::from_episode(&id, e));
                let _ = reply.send(r);
            }
            Command::End(reply) => {
                self.episode.finish(EndReason::Stopped);
                let _ = reply.send(Ok(EndReply {
                    reason: self.episode.ended().expect("just finished"),
                    manual_switch_count: self.episode.manual_switch_count(),
                    stages_reached: self.episode.stages_reached(),
                    log_path: self.info.log_path.clone(),
                }));
                return true;
            }
            Command::Provenance(reply) => {
                let _ = reply.send(self.episode.last_provenance().cloned());
            }
            Command::Stores(reply) => {
                let s = self.episode.stores();
                let _ = reply.send(StoresSummary {
                    run_id: s.run_id.clone(),
                    examples: s.examples.len(),
                    rules: s.rules.iter().map(|r| r.text.clone()).collect(),
                });
            }
        }
        false
    }

    fn dispatch(&mut self, done: &mpsc::UnboundedSender<CallDone>) {
        let Some(gateway) = self.registry.config.gateway.clone() else {
            return;
        };
        if let Some(p) = self.episode.take_switch_request() {
            let (g, tx) = (Arc::clone(&gateway), done.clone());
            tokio::task::spawn_blocking(move || {
                let r = g.complete(&p.request);
                let _ = tx.send(CallDone::Switch(p.call_index, r));
            });
        }
        if let Some(c) = self.episode.take_rulegen_request() {
            self.pending_rulegen = Some(c.call_index);
            let tx = done.clone();
            tokio::task::spawn_blocking(move || {
                let r = gateway.complete(&c.request);
                let _ = tx.send(CallDone::RuleGen(c.call_index, r));
            });
        }
    }

    fn complete(&mut self, done: CallDone) {
        match done {
            CallDone::Switch(i, r) => {
                if let Err(e) = self.episode.complete_switch(i, r) {
                    tracing::debug!(session = %self.info.id, error = %e, "switch result dropped");
                }
            }
            CallDone::RuleGen(i, r) => {
                self.pending_rulegen = None;
                if let Err(e) = self.episode.complete_rulegen(i, r) {
                    tracing::warn!(session = %self.info.id, error = %e, "rule result dropped");
                }
            }
        }
    }

    fn persist_stores(&mut self) {
        let s = self.episode.stores();
        let version = (s.examples.len(), s.rules.len());
        if version == self.stores_version {
            return;
        }
        match s.save(&self.registry.config.stores_dir()) {
            Ok(_) => self.stores_version = version,
            Err(e) => tracing::error!(session = %self.info.id, error = %e, "saving learning stores failed"),
        }
    }

    fn publish(&mut self) {
        let frame = Arc::new(self.episode.frame());
        self.latest.send_replace(Arc::clone(&frame));
        // no subscribers is fine
        let _ = self.frames.send(frame);
    }
}

/// Closes logs left open by a previous process: each trial without a
/// `trial_end` gets an error record and an aborted end. A partially written
/// last line is cut off first. Returns the logs that were closed.
pub fn recover_logs(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut closed = Vec::new();
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(closed);
    };
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    for path in paths {
        let mut text = std::fs::read_to_string(&path)?;
        if !text.is_empty() && !text.ends_with('\n') {
            text.truncate(text.rfind('\n').map(|i| i + 1).unwrap_or(0));
            std::fs::write(&path, &text)?;
        }
        let records = match read_log(text.as_bytes()) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "skipping unreadable log");
                continue;
            }
        };
        if records.is_empty() || records.iter().any(|r| matches!(r.event, Event::TrialEnd { .. })) {
            continue;
        }
        let replay = match reconstruct(&records, None) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "skipping log without a start");
                continue;
            }
        };
        let last = records.last().expect("non-empty");
        let dt = replay.start.clock.tick_duration;
        let tail = [
            Event::Error {
                message: "aborted: the service stopped before the trial ended".into(),
            },
            Event::TrialEnd {
                reason: EndReason::Aborted,
                manual_switch_count: replay.manual_switch_count,
                stages_reached: replay.stages_reached,
            },
        ]
        .into_iter()
        .enumerate()
        .map(|(k, event)| EventRecord {
            v: last.v,
            seq: last.seq + 1 + k as u64,
            tick: last.tick,
            time_s: last.tick as f64 * dt,
            event,
        })
        .collect::<Vec<_>>();
        let mut f = OpenOptions::new().append(true).open(&path)?;
        f.write_all(to_jsonl(&tail).as_bytes())?;
        f.flush()?;
        closed.push(path);
    }
    Ok(closed)
}
