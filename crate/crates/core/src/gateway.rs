//! WebSocket gateway: session registry, per-connection routing, and the
//! threads that drive a live session.
//!
//! A [`Hub`] owns every live session. Each session's [`Coordinator`] sits
//! behind one mutex; connection handlers, the mediation worker, the audio
//! pacer, and the agent-speech timer all take that lock, so effects on a
//! session are applied one at a time. Outbound frames are numbered per
//! connection.
//!
//! [`Connection`] is transport-agnostic. The axum endpoint in this module
//! wraps it, and [`play`] drives it directly for scripted sessions.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapters::{StageContext, SttInput};
use crate::clock::{Clock, RealClock};
use crate::coordinator::{Audience, CoordError, Coordinator, MediationSettings, RunTicket};
use crate::experiment::{plan_for, session_log_path, JsonlWriter, ScenarioScript};
use crate::ids::{ScenarioId, SessionId, StreamId};
use crate::pipeline::{run_mediation, Backend, PipelineEvent};
use crate::protocol::{
    decode, encode_text, ControlAction, Envelope, ErrorCode, Message, Role, SeqCounter, SeqTracker,
};
use crate::provenance::Ledger;
use crate::scheduler::Ready;
use crate::session::{Session, SessionState};

type Rejection = (ErrorCode, String);

fn reject(e: CoordError) -> Rejection {
    (e.code(), e.to_string())
}

/// Everything a hub needs to create sessions.
#[derive(Clone)]
pub struct HubConfig {
    pub scenarios: Vec<ScenarioScript>,
    pub settings: MediationSettings,
    pub backend: Backend,
    /// Session logs and ledger files go here; `None` keeps everything in
    /// memory.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
}

/// Outbound half of one connection.
struct Outlet {
    counter: Mutex<SeqCounter>,
    sink: Box<dyn Fn(String) + Send + Sync>,
}

impl Outlet {
    fn send(&self, session: Option<&SessionId>, message: Message) {
        let mut counter = self.counter.lock().unwrap_or_else(|p| p.into_inner());
        let env = Envelope::new(session.cloned(), counter.next_seq(), message);
        (self.sink)(encode_text(&env));
    }
}

struct Member {
    conn: u64,
    role: Role,
    outlet: Arc<Outlet>,
}

impl Member {
    fn hears(&self, audience: Audience) -> bool {
        match audience {
            Audience::All => true,
            Audience::Staff => self.role != Role::Participant,
        }
    }
}

struct CoreState {
    coord: Coordinator,
    members: Vec<Member>,
    rng: ChaCha8Rng,
    /// Bumped on every trial start so stale timers can tell they are stale.
    epoch: u64,
}

struct SessionCore {
    id: SessionId,
    participant_index: u32,
    clock: RealClock,
    backend: Backend,
    state: Mutex<CoreState>,
}

impl SessionCore {
    fn lock(&self) -> MutexGuard<'_, CoreState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn flush(&self, st: &mut CoreState) {
        for notice in st.coord.take_notices() {
            for m in st.members.iter().filter(|m| m.hears(notice.audience)) {
                m.outlet.send(Some(&self.id), notice.message.clone());
            }
        }
    }

    fn start_trial(self: &Arc<Self>, st: &mut CoreState) -> Result<(), CoordError> {
        let speak_ms = st.coord.start_trial(self.clock.now_ms())?;
        st.epoch += 1;
        let epoch = st.epoch;
        let core = self.clone();
        std::thread::spawn(move || {
            core.clock.sleep_ms(speak_ms);
            let mut st = core.lock();
            if st.epoch == epoch && st.coord.session().state() == SessionState::AgentPrompting {
                let _ = st.coord.agent_spoke();
                core.flush(&mut st);
            }
        });
        Ok(())
    }

    fn spawn_run(self: &Arc<Self>, st: &mut CoreState, ticket: RunTicket) {
        let run_seed: u64 = st.rng.gen();
        let stream = ticket.stream.clone();
        let stream_id = ticket.request.stream_id.clone();

        let core = self.clone();
        std::thread::spawn(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
            let start = core.clock.now_ms();
            let id = ticket.request.stream_id.clone();
            let mut ctx = StageContext {
                clock: &core.clock,
                rng: &mut rng,
            };
            let result = run_mediation(&ticket.request, &core.backend, &mut ctx, &ticket.control, &mut |e| {
                let mut st = core.lock();
                match e {
                    PipelineEvent::Status {
                        stage,
                        state,
                        elapsed_ms,
                    } => st.coord.on_status(&id, stage, state, elapsed_ms),
                    PipelineEvent::Modified { text } => st.coord.on_modified(&id, text),
                    PipelineEvent::Chunk { chunk, ready_at_ms } => {
                        let _ = st.coord.on_chunk(chunk.clone(), start + ready_at_ms);
                    }
                }
                core.flush(&mut st);
            });
            let mut st = core.lock();
            let _ = st.coord.run_finished(&id, result);
            core.flush(&mut st);
        });

        let core = self.clone();
        std::thread::spawn(move || loop {
            match stream.wait_ready() {
                Ready::Aborted | Ready::Done => return,
                Ready::Dispatchable => {}
            }
            let chunk = {
                let mut st = core.lock();
                if !st.coord.is_active(&stream_id) {
                    return;
                }
                let next = st.coord.next_dispatch();
                core.flush(&mut st);
                match next {
                    Ok(Some(c)) => c,
                    Ok(None) => continue,
                    Err(_) => return,
                }
            };
            core.clock.sleep_ms(chunk.duration_ms);
            if chunk.is_final {
                let mut st = core.lock();
                let _ = st.coord.playback_finished(&stream_id);
                core.flush(&mut st);
                return;
            }
        });
    }

    fn submit_utterance(self: &Arc<Self>, input: SttInput) -> Result<(), Rejection> {
        let mut st = self.lock();
        let ticket = st.coord.submit_initial(input, self.clock.now_ms());
        self.flush(&mut st);
        self.spawn_run(&mut st, ticket.map_err(reject)?);
        Ok(())
    }

    fn control(self: &Arc<Self>, action: ControlAction, autonomy: Option<crate::session::AutonomyLevel>) -> Result<(), Rejection> {
        let mut st = self.lock();
        let result = match action {
            ControlAction::Pause => st.coord.pause(),
            ControlAction::Resume => st.coord.resume(),
            ControlAction::Restart => st.coord.restart().map(|ticket| self.spawn_run(&mut st, ticket)),
            ControlAction::SetAutonomy => match autonomy {
                Some(level) => {
                    st.coord.set_autonomy(level);
                    Ok(())
                }
                None => {
                    return Err((ErrorCode::MissingField, "SetAutonomy needs `autonomy`".into()));
                }
            },
        };
        self.flush(&mut st);
        result.map_err(reject)
    }

    fn release_preview(&self, stream_id: &StreamId) -> Result<(), Rejection> {
        let mut st = self.lock();
        let result = st.coord.release_preview(stream_id);
        self.flush(&mut st);
        result.map_err(reject)
    }

    fn self_report(
        self: &Arc<Self>,
        items: Vec<crate::experiment::SelfReportItem>,
        free_text: Option<String>,
    ) -> Result<(), Rejection> {
        let mut st = self.lock();
        let mut result = st.coord.submit_self_report(items, free_text).map(|_| ());
        if result.is_ok() && !st.coord.session().is_finished() {
            result = self.start_trial(&mut st);
        }
        self.flush(&mut st);
        result.map_err(reject)
    }

    fn stop(&self) {
        let mut st = self.lock();
        let _ = st.coord.stop();
        self.flush(&mut st);
    }
}

#[derive(Default)]
struct Registry {
    sessions: BTreeMap<SessionId, Arc<SessionCore>>,
    by_participant: BTreeMap<u32, SessionId>,
}

struct HubInner {
    config: HubConfig,
    scenarios: Arc<BTreeMap<ScenarioId, ScenarioScript>>,
    ledger: Arc<Ledger>,
    registry: Mutex<Registry>,
    next_conn: AtomicU64,
}

/// The session registry shared by every connection.
#[derive(Clone)]
pub struct Hub {
    inner: Arc<HubInner>,
}

impl std::fmt::Debug for Hub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hub")
            .field("sessions", &self.session_count())
            .finish_non_exhaustive()
    }
}

impl Hub {
    pub fn new(config: HubConfig) -> Self {
        let scenarios = Arc::new(
            config
                .scenarios
                .iter()
                .map(|s| (s.scenario_id.clone(), s.clone()))
                .collect(),
        );
        let ledger = Arc::new(match &config.data_dir {
            Some(d) => Ledger::persistent(d),
            None => Ledger::in_memory(),
        });
        Self {
            inner: Arc::new(HubInner {
                config,
                scenarios,
                ledger,
                registry: Mutex::new(Registry::default()),
                next_conn: AtomicU64::new(0),
            }),
        }
    }

    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.inner.registry.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.inner.ledger
    }

    pub fn session_count(&self) -> usize {
        self.registry().sessions.len()
    }

    pub fn session_ids(&self) -> Vec<SessionId> {
        self.registry().sessions.keys().cloned().collect()
    }

    /// Open a connection whose outbound frames go to `sink`.
    pub fn connect_with(&self, sink: impl Fn(String) + Send + Sync + 'static) -> Connection {
        Connection {
            hub: self.clone(),
            id: self.inner.next_conn.fetch_add(1, Ordering::Relaxed),
            outlet: Arc::new(Outlet {
                counter: Mutex::new(SeqCounter::default()),
                sink: Box::new(sink),
            }),
            tracker: SeqTracker::new(),
            joined: None,
        }
    }

    /// Open a connection with a channel for its outbound frames.
    pub fn connect(&self) -> (Connection, Receiver<String>) {
        let (tx, rx) = std::sync::mpsc::channel();
        let conn = self.connect_with(move |frame| {
            let _ = tx.send(frame);
        });
        (conn, rx)
    }

    /// Find the participant's session or create it. Returns whether it is new.
    fn participant_session(&self, index: Option<u32>) -> Result<(Arc<SessionCore>, bool), Rejection> {
        let mut reg = self.registry();
        if let Some(core) = index
            .and_then(|i| reg.by_participant.get(&i))
            .map(|id| reg.sessions[id].clone())
        {
            return Ok((core, false));
        }
        let index = index.unwrap_or_else(|| {
            (0..)
                .find(|i| !reg.by_participant.contains_key(i))
                .expect("free index")
        });
        let cfg = &self.inner.config;
        let invalid = |e: &dyn std::fmt::Display| (ErrorCode::ValidationFailed, e.to_string());
        let plan = plan_for(index, &cfg.scenarios).map_err(|e| invalid(&e))?;
        let id = SessionId::random();
        let session = Session::new(id.clone(), format!("P{index:03}"), plan).map_err(|e| invalid(&e))?;
        let log = match &cfg.data_dir {
            Some(d) => Some(JsonlWriter::create(session_log_path(d, &id)).map_err(|e| invalid(&e))?),
            None => None,
        };
        let coord = Coordinator::new(
            session,
            self.inner.scenarios.clone(),
            cfg.settings,
            self.inner.ledger.clone(),
            log,
        )
        .map_err(reject)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::from(index) << 8);
        let core = Arc::new(SessionCore {
            id: id.clone(),
            participant_index: index,
            clock: RealClock::new(),
            backend: cfg.backend.clone(),
            state: Mutex::new(CoreState {
                coord,
                members: Vec::new(),
                rng,
                epoch: 0,
            }),
        });
        reg.sessions.insert(id.clone(), core.clone());
        reg.by_participant.insert(index, id);
        Ok((core, true))
    }

    fn find(&self, session: Option<&SessionId>, index: Option<u32>) -> Result<Arc<SessionCore>, Rejection> {
        let reg = self.registry();
        let id = match (session, index) {
            (Some(id), _) => Some(id.clone()),
            (None, Some(i)) => reg.by_participant.get(&i).cloned(),
            (None, None) => None,
        };
        id.and_then(|id| reg.sessions.get(&id).cloned()).ok_or_else(|| {
            (
                ErrorCode::UnknownSession,
                match (session, index) {
                    (Some(id), _) => format!("no session {id}"),
                    (None, Some(i)) => format!("no session for participant {i}"),
                    (None, None) => "staff must name a session_id or participant_index".into(),
                },
            )
        })
    }

    /// Write the closing record of every session and cancel runs in flight.
    pub fn shutdown(&self) {
        let cores: Vec<_> = self.registry().sessions.values().cloned().collect();
        for core in cores {
            core.stop();
        }
    }
}

/// One client's view of the gateway. Frames are handled in arrival order.
pub struct Connection {
    hub: Hub,
    id: u64,
    outlet: Arc<Outlet>,
    tracker: SeqTracker,
    joined: Option<(Role, Arc<SessionCore>)>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("id", &self.id)
            .field("role", &self.role())
            .field("session", &self.session_id())
            .finish()
    }
}

impl Connection {
    pub fn role(&self) -> Option<Role> {
        self.joined.as_ref().map(|(r, _)| *r)
    }

    pub fn session_id(&self) -> Option<&SessionId> {
        self.joined.as_ref().map(|(_, c)| &c.id)
    }

    pub fn participant_index(&self) -> Option<u32> {
        self.joined.as_ref().map(|(_, c)| c.participant_index)
    }

    fn reply_error(&self, code: ErrorCode, detail: String, seq: Option<u64>) {
        self.outlet.send(self.session_id(), Message::error(code, detail, seq));
    }

    /// Handle one inbound frame. Every failure is answered with a
    /// `ProtocolError` and the connection stays usable.
    pub fn handle_frame(&mut self, frame: &[u8]) {
        let env = match decode(frame) {
            Ok(env) => env,
            Err(e) => return self.outlet.send(self.session_id(), e.to_message()),
        };
        if let Err(e) = self.tracker.check(env.seq) {
            return self.outlet.send(self.session_id(), e.to_message());
        }
        if let Err((code, detail)) = self.route(env.session_id, env.message) {
            self.reply_error(code, detail, Some(env.seq));
        }
    }

    pub fn send_envelope(&mut self, envelope: &Envelope) {
        self.handle_frame(encode_text(envelope).as_bytes());
    }

    fn route(&mut self, session: Option<SessionId>, message: Message) -> Result<(), Rejection> {
        if let Message::JoinSession {
            role,
            participant_index,
        } = message
        {
            return self.join(role, participant_index, session.as_ref());
        }
        let (role, core) = self
            .joined
            .clone()
            .ok_or((ErrorCode::UnknownSession, "join a session first".to_owned()))?;
        if session.as_ref().is_some_and(|s| s != &core.id) {
            return Err((
                ErrorCode::UnknownSession,
                format!("connection is joined to {}", core.id),
            ));
        }
        let need = |wanted: Role, what: &str| {
            if role == wanted {
                Ok(())
            } else {
                Err((
                    ErrorCode::UnauthorizedRole,
                    format!("{what} requires the {wanted:?} role; connection is {role:?}"),
                ))
            }
        };
        match message {
            Message::UserUtterance {
                text,
                audio_b64,
                is_final,
            } => {
                need(Role::Participant, "UserUtterance")?;
                if !is_final {
                    return Ok(());
                }
                let input = match (text, audio_b64) {
                    (Some(t), _) => SttInput::Text(t),
                    (None, Some(b)) => SttInput::Audio(
                        base64::engine::general_purpose::STANDARD
                            .decode(b)
                            .map_err(|e| (ErrorCode::Malformed, format!("audio_b64: {e}")))?,
                    ),
                    (None, None) => {
                        return Err((ErrorCode::MissingField, "UserUtterance needs text or audio_b64".into()))
                    }
                };
                core.submit_utterance(input)
            }
            Message::SelfReportSubmit { items, free_text } => {
                need(Role::Participant, "SelfReportSubmit")?;
                core.self_report(items, free_text)
            }
            Message::Control { action, autonomy } => {
                need(Role::Operator, "Control")?;
                core.control(action, autonomy)
            }
            Message::ReleasePreview { stream_id } => {
                need(Role::Operator, "ReleasePreview")?;
                core.release_preview(&stream_id)
            }
            other => Err((
                ErrorCode::UnauthorizedRole,
                format!("{} is sent by the server only", other.type_name()),
            )),
        }
    }

    fn join(&mut self, role: Role, index: Option<u32>, session: Option<&SessionId>) -> Result<(), Rejection> {
        if let Some(id) = self.session_id() {
            return Err((ErrorCode::IllegalTransition, format!("already joined to {id}")));
        }
        let (core, fresh) = match role {
            Role::Participant if session.is_none() => self.hub.participant_session(index)?,
            _ => (self.hub.find(session, index)?, false),
        };
        let mut st = core.lock();
        for m in st.coord.snapshot_messages() {
            self.outlet.send(Some(&core.id), m);
        }
        st.members.push(Member {
            conn: self.id,
            role,
            outlet: self.outlet.clone(),
        });
        if fresh {
            let started = core.start_trial(&mut st);
            core.flush(&mut st);
            started.map_err(reject)?;
        }
        drop(st);
        self.joined = Some((role, core));
        Ok(())
    }

    /// Detach from the session. The session itself stays alive so a client
    /// can reconnect.
    pub fn close(&mut self) {
        if let Some((_, core)) = self.joined.take() {
            core.lock().members.retain(|m| m.conn != self.id);
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

// ---------------------------------------------------------------------------
// HTTP / WebSocket server

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn router(hub: Hub) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .with_state(hub)
}

async fn health(State(hub): State<Hub>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": hub.session_count() }))
}

async fn ws_upgrade(State(hub): State<Hub>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| handle_socket(hub, socket))
}

async fn handle_socket(hub: Hub, socket: WebSocket) {
    let (mut sink, mut inbound) = socket.split();
    let (tx, mut rx) = tokio::sync::mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(WsMessage::Text(frame)).await.is_err() {
                break;
            }
        }
    });
    let mut conn = hub.connect_with(move |frame| {
        let _ = tx.send(frame);
    });
    while let Some(Ok(msg)) = inbound.next().await {
        match msg {
            WsMessage::Text(t) => conn.handle_frame(t.as_bytes()),
            WsMessage::Binary(b) => conn.handle_frame(&b),
            WsMessage::Close(_) => break,
            WsMessage::Ping(_) | WsMessage::Pong(_) => {}
        }
    }
    drop(conn);
    writer.abort();
}

/// A bound, not yet serving, gateway.
#[derive(Debug)]
pub struct Gateway {
    hub: Hub,
    listener: tokio::net::TcpListener,
}

impl Gateway {
    pub async fn bind(hub: Hub, host: &str, port: u16) -> Result<Self, ServeError> {
        let addr = format!("{host}:{port}");
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|source| ServeError::Bind { addr, source })?;
        Ok(Self { hub, listener })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serve until `shutdown` resolves, then close every session.
    pub async fn serve<F>(self, shutdown: F) -> Result<(), ServeError>
    where
        F: std::future::Future<Output = ()> + Send + 'static,
    {
        let hub = self.hub.clone();
        axum::serve(self.listener, router(self.hub))
            .with_graceful_shutdown(shutdown)
            .await?;
        hub.shutdown();
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scripted playback

#[derive(Debug, Error)]
pub enum PlayError {
    #[error(transparent)]
    Script(#[from] crate::sim::ReplayError),
    #[error("step {step}: rejected with {code}: {detail}")]
    Rejected {
        step: usize,
        code: ErrorCode,
        detail: String,
    },
    #[error("step {step}: timed out waiting for state {wanted}")]
    Timeout { step: usize, wanted: String },
    #[error("gateway connection closed")]
    Disconnected,
}

/// What the participant connection received during playback.
#[derive(Debug, Clone)]
pub struct PlayOutcome {
    pub session_id: Option<SessionId>,
    pub received: Vec<Envelope>,
}

fn ready_for(message: &Message, state: SessionState) -> bool {
    match message {
        Message::UserUtterance { .. } => state == SessionState::ListeningInitial,
        Message::SelfReportSubmit { .. } => state == SessionState::CollectingSelfReport,
        Message::Control {
            action: ControlAction::Resume,
            ..
        } => matches!(state, SessionState::Paused(_)),
        Message::Control {
            action: ControlAction::Pause | ControlAction::Restart,
            ..
        } => matches!(state, SessionState::Mediating | SessionState::SpeakingExtension),
        _ => true,
    }
}

struct Follower {
    rx: Receiver<String>,
    state: Option<SessionState>,
    session: Option<SessionId>,
    received: Vec<Envelope>,
}

impl Follower {
    /// Take one frame, waiting at most until `deadline`.
    fn pump(&mut self, step: usize, deadline: Instant) -> Result<bool, PlayError> {
        let wait = deadline.saturating_duration_since(Instant::now());
        let frame = match self.rx.recv_timeout(wait) {
            Ok(f) => f,
            Err(RecvTimeoutError::Timeout) => return Ok(false),
            Err(RecvTimeoutError::Disconnected) => return Err(PlayError::Disconnected),
        };
        let env = decode(frame.as_bytes()).map_err(|e| PlayError::Rejected {
            step,
            code: e.code,
            detail: e.detail,
        })?;
        if env.session_id.is_some() {
            self.session = env.session_id.clone();
        }
        match &env.message {
            Message::StateChanged { state, .. } => self.state = Some(*state),
            Message::ProtocolError { code, detail, .. } if *code != ErrorCode::StageFailure => {
                return Err(PlayError::Rejected {
                    step,
                    code: *code,
                    detail: detail.clone(),
                })
            }
            _ => {}
        }
        self.received.push(env);
        Ok(true)
    }

    fn wait_until(&mut self, step: usize, timeout: Duration, ok: impl Fn(SessionState) -> bool, wanted: &str) -> Result<(), PlayError> {
        let deadline = Instant::now() + timeout;
        while !self.state.is_some_and(&ok) {
            if !self.pump(step, deadline)? {
                return Err(PlayError::Timeout {
                    step,
                    wanted: wanted.to_owned(),
                });
            }
        }
        Ok(())
    }
}

/// Play a participant script against `hub` in real time. Each step waits
/// for its `at_ms` offset and for a session state in which it is legal.
/// Control and ReleasePreview steps are sent from a separate operator
/// connection, which joins with seq 0. `step_timeout` bounds each wait.
pub fn play(hub: &Hub, script: &crate::sim::ReplayScript, step_timeout: Duration) -> Result<PlayOutcome, PlayError> {
    script.validate()?;
    let (mut part, rx) = hub.connect();
    let mut follower = Follower {
        rx,
        state: None,
        session: None,
        received: Vec::new(),
    };
    let mut operator: Option<(Connection, Receiver<String>)> = None;
    let start = Instant::now();
    for (i, step) in script.steps.iter().enumerate() {
        let due = start + Duration::from_millis(step.at_ms);
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
        let msg = &step.envelope.message;
        let joining = matches!(msg, Message::JoinSession { .. });
        if !joining {
            follower.wait_until(i, step_timeout, |s| ready_for(msg, s), &format!("for {}", msg.type_name()))?;
        }
        let staff = matches!(msg, Message::Control { .. } | Message::ReleasePreview { .. });
        if staff {
            let (op, _) = operator.get_or_insert_with(|| {
                let (mut op, orx) = hub.connect();
                op.send_envelope(&Envelope::new(
                    None,
                    0,
                    Message::JoinSession {
                        role: Role::Operator,
                        participant_index: part.participant_index(),
                    },
                ));
                (op, orx)
            });
            op.send_envelope(&step.envelope);
        } else {
            part.send_envelope(&step.envelope);
        }
        if let Some((_, orx)) = &operator {
            while let Ok(frame) = orx.try_recv() {
                if let Ok(Envelope {
                    message: Message::ProtocolError { code, detail, .. },
                    ..
                }) = decode(frame.as_bytes())
                {
                    return Err(PlayError::Rejected { step: i, code, detail });
                }
            }
        }
        if !joining {
            follower.state = None;
        }
    }
    let finished = |s: SessionState| !matches!(s, SessionState::Mediating | SessionState::SpeakingExtension | SessionState::Paused(_));
    follower.wait_until(script.steps.len(), step_timeout, finished, "settled")?;
    while follower.pump(script.steps.len(), Instant::now())? {}
    Ok(PlayOutcome {
        session_id: follower.session.clone(),
        received: std::mem::take(&mut follower.received),
    })
}
