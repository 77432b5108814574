//! Websocket teleop service.
//!
//! A single tick thread owns the [`Session`] (and with it the simulation).
//! Connection threads only parse frames off the socket and forward text to
//! the tick thread over a channel; replies and state broadcasts travel back
//! through small bounded per-client queues, so a slow client loses messages
//! instead of stalling the loop.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tinynav_core::pipeline::Sample;
use tinynav_core::quant::QuantModel;
use tinynav_core::sim::{ExpertPolicy, ModelPolicy, Policy, SimWorld, Simulation, TICK_US};
use tinynav_core::{ControlCommand, FloatModel};
use tungstenite::{Message, WebSocket};

use crate::bench::Engine;
use crate::error::{Error, Result};
use crate::formats::{load_quant, load_weights, RecordingWriter};

pub const TICK: Duration = Duration::from_micros(TICK_US);
/// Teleop commands older than this decay to a stop.
pub const DEADMAN: Duration = Duration::from_millis(500);
const CLIENT_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Teleop,
    AutopilotFloat,
    AutopilotInt8,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Cmd {
        seq: u64,
        steering: f64,
        throttle: f64,
    },
    Mode {
        seq: u64,
        value: Mode,
    },
    Record {
        seq: u64,
        on: bool,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Reset {
        seq: u64,
    },
    LoadModel {
        seq: u64,
        path: PathBuf,
        engine: Engine,
    },
}

const MESSAGE_TYPES: [&str; 5] = ["cmd", "mode", "record", "reset", "load_model"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateMessage {
    pub tick: u64,
    pub pose: [f64; 3],
    pub cmd: [f64; 2],
    pub depth_b64: String,
    pub rows: usize,
    pub cols: usize,
    pub mode: Mode,
    pub recording: bool,
    pub laps: u32,
    pub collisions: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Ack {
        seq: u64,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        reason: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    fn error(seq: Option<u64>, reason: impl Into<String>) -> Self {
        ServerMessage::Error { seq, reason: reason.into() }
    }
}

/// Everything the tick loop owns. Times are offsets from service start, so
/// tests can drive a session on a synthetic clock.
pub struct Session {
    sim: Simulation,
    mode: Mode,
    staged: Option<(ControlCommand, Duration)>,
    expert: ExpertPolicy,
    float: Option<ModelPolicy<FloatModel>>,
    int8: Option<ModelPolicy<QuantModel>>,
    recorder: Option<RecordingWriter>,
    ticks: u64,
    clients: usize,
}

impl Session {
    pub fn new(world: SimWorld, seed: u64) -> Result<Self> {
        Ok(Self {
            sim: Simulation::new(world, seed)?,
            mode: Mode::Teleop,
            staged: None,
            expert: ExpertPolicy::default(),
            float: None,
            int8: None,
            recorder: None,
            ticks: 0,
            clients: 0,
        })
    }

    pub fn sim(&self) -> &Simulation {
        &self.sim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn recording(&self) -> bool {
        self.recorder.is_some()
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn set_float_model(&mut self, model: FloatModel) {
        self.float = Some(ModelPolicy::new(model));
    }

    pub fn set_quant_model(&mut self, model: QuantModel) {
        self.int8 = Some(ModelPolicy::new(model));
    }

    /// Handles one client text message and returns the reply.
    pub fn handle(&mut self, text: &str, now: Duration) -> ServerMessage {
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return ServerMessage::error(None, format!("malformed json: {e}")),
        };
        let seq = value.get("seq").and_then(|s| s.as_u64());
        let kind = match value.get("type").and_then(|t| t.as_str()) {
            Some(k) => k.to_string(),
            None => return ServerMessage::error(seq, "missing message type"),
        };
        if !MESSAGE_TYPES.contains(&kind.as_str()) {
            return ServerMessage::error(seq, format!("unknown message type {kind:?}"));
        }
        let msg: ClientMessage = match serde_json::from_value(value) {
            Ok(m) => m,
            Err(e) => return ServerMessage::error(seq, format!("malformed {kind} message: {e}")),
        };
        match self.apply(msg, now) {
            Ok(seq) => ServerMessage::Ack { seq },
            Err(reason) => ServerMessage::error(seq, reason),
        }
    }

    fn apply(&mut self, msg: ClientMessage, now: Duration) -> std::result::Result<u64, String> {
        match msg {
            ClientMessage::Cmd { seq, steering, throttle } => {
                // Live control clamps instead of rejecting.
                self.staged = Some((ControlCommand::new(steering, throttle).clamped(), now));
                Ok(seq)
            }
            ClientMessage::Mode { seq, value } => {
                match value {
                    Mode::AutopilotFloat => self.float.as_mut().ok_or("no model")?.reset(),
                    Mode::AutopilotInt8 => self.int8.as_mut().ok_or("no model")?.reset(),
                    Mode::Teleop => self.staged = None,
                    Mode::Expert => {}
                }
                self.mode = value;
                Ok(seq)
            }
            ClientMessage::Record { seq, on, path } => {
                if let Some(rec) = self.recorder.take() {
                    rec.finish().map_err(|e| e.to_string())?;
                }
                if on {
                    let path = path.ok_or("record on needs a path")?;
                    self.recorder = Some(RecordingWriter::create(&path, 25, 25).map_err(|e| e.to_string())?);
                }
                Ok(seq)
            }
            ClientMessage::Reset { seq } => {
                self.sim.reset();
                self.staged = None;
                self.expert.reset();
                if let Some(p) = self.float.as_mut() {
                    p.reset();
                }
                if let Some(p) = self.int8.as_mut() {
                    p.reset();
                }
                Ok(seq)
            }
            ClientMessage::LoadModel { seq, path, engine } => {
                match engine {
                    Engine::Float => self.set_float_model(load_weights(&path).map_err(|e| e.to_string())?),
                    Engine::Int8 => self.set_quant_model(load_quant(&path).map_err(|e| e.to_string())?),
                }
                Ok(seq)
            }
        }
    }

    /// Command the current mode issues for `frame`.
    fn command(&mut self, frame: &tinynav_core::DepthFrame, now: Duration) -> Result<ControlCommand> {
        let cmd = match self.mode {
            Mode::Teleop => match self.staged {
                Some((cmd, at)) if now.saturating_sub(at) <= DEADMAN => cmd,
                _ => ControlCommand::STOP,
            },
            Mode::Expert => self.expert.act(frame)?,
            Mode::AutopilotFloat => self.float.as_mut().map_or(Ok(ControlCommand::STOP), |p| p.act(frame))?,
            Mode::AutopilotInt8 => self.int8.as_mut().map_or(Ok(ControlCommand::STOP), |p| p.act(frame))?,
        };
        Ok(cmd.clamped())
    }

    /// One control tick: sense, decide, record, advance.
    pub fn tick(&mut self, now: Duration) -> Result<StateMessage> {
        let frame = self.sim.sense();
        let cmd = self.command(&frame, now)?;
        if let Some(rec) = self.recorder.as_mut() {
            // Session time keeps recorded timestamps increasing across resets.
            let timestamp_us = (self.ticks + 1) * TICK_US;
            let frame = tinynav_core::DepthFrame { timestamp_us, ..frame.clone() };
            if let Err(e) = rec.append(&Sample { frame, command: cmd, timestamp_us }) {
                self.recorder = None;
                return Err(e);
            }
        }
        self.sim.advance(cmd);
        self.ticks += 1;
        let pose = self.sim.state().pose;
        Ok(StateMessage {
            tick: self.sim.tick(),
            pose: [pose.x, pose.y, pose.heading],
            cmd: [cmd.steering, cmd.throttle],
            depth_b64: base64::engine::general_purpose::STANDARD.encode(&frame.pixels),
            rows: frame.rows,
            cols: frame.cols,
            mode: self.mode,
            recording: self.recording(),
            laps: self.sim.laps(),
            collisions: self.sim.collisions(),
        })
    }

    /// Closes any open recording and returns its sample count.
    pub fn stop_recording(&mut self) -> Result<Option<usize>> {
        self.recorder.take().map(RecordingWriter::finish).transpose()
    }
}

enum Event {
    Connect { id: u64, tx: SyncSender<String> },
    Text { id: u64, text: String },
    Disconnect { id: u64 },
}

/// A running service. Dropping the handle leaves it running; call
/// [`ServiceHandle::stop`] to shut it down.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(self) {
        self.stop.store(true, Ordering::SeqCst);
        self.join();
    }

    pub fn join(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and starts the accept and tick threads.
pub fn serve(session: Session, addr: &str) -> Result<ServiceHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| Error::Bind { addr: addr.to_string(), source: e })?;
    let local = listener.local_addr().map_err(|e| Error::Bind { addr: addr.to_string(), source: e })?;
    listener.set_nonblocking(true).map_err(|e| Error::Bind { addr: addr.to_string(), source: e })?;
    let stop = Arc::new(AtomicBool::new(false));
    let (events_tx, events_rx) = mpsc::channel();

    let tick_thread = {
        let stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("tinynav-tick".into())
            .spawn(move || tick_loop(session, events_rx, stop))
            .expect("spawn tick thread")
    };
    let accept_thread = {
        let stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("tinynav-accept".into())
            .spawn(move || accept_loop(listener, events_tx, stop))
            .expect("spawn accept thread")
    };
    Ok(ServiceHandle { addr: local, stop, threads: vec![tick_thread, accept_thread] })
}

fn accept_loop(listener: TcpListener, events: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_id = 0;
    let mut clients = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                next_id += 1;
                let (id, events, stop) = (next_id, events.clone(), Arc::clone(&stop));
                clients.push(std::thread::spawn(move || client_loop(id, stream, events, stop)));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(_) => std::thread::sleep(POLL),
        }
        clients.retain(|c: &JoinHandle<()>| !c.is_finished());
    }
    for c in clients {
        let _ = c.join();
    }
}

fn client_loop(id: u64, stream: TcpStream, events: Sender<Event>, stop: Arc<AtomicBool>) {
    if stream.set_nonblocking(false).is_err() || stream.set_read_timeout(Some(Duration::from_secs(5))).is_err() {
        return;
    }
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let _ = ws.get_ref().set_write_timeout(Some(Duration::from_secs(1)));
    let (tx, rx) = mpsc::sync_channel(CLIENT_QUEUE);
    if events.send(Event::Connect { id, tx }).is_err() {
        return;
    }
    serve_client(id, &mut ws, &rx, &events, &stop);
    let _ = ws.close(None);
    let _ = ws.flush();
    let _ = events.send(Event::Disconnect { id });
}

fn serve_client(
    id: u64,
    ws: &mut WebSocket<TcpStream>,
    rx: &Receiver<String>,
    events: &Sender<Event>,
    stop: &AtomicBool,
) {
    while !stop.load(Ordering::SeqCst) {
        loop {
            match rx.try_recv() {
                Ok(text) => {
                    if ws.send(Message::Text(text)).is_err() {
                        return;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => return,
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if events.send(Event::Text { id, text }).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}

fn tick_loop(mut session: Session, events: Receiver<Event>, stop: Arc<AtomicBool>) {
    let start = Instant::now();
    let mut clients: HashMap<u64, SyncSender<String>> = HashMap::new();
    let mut next_tick = start + TICK;
    let send = |clients: &mut HashMap<u64, SyncSender<String>>, id: u64, text: String| {
        if let Some(tx) = clients.get(&id) {
            if let Err(TrySendError::Disconnected(_)) = tx.try_send(text) {
                clients.remove(&id);
            }
        }
    };
    while !stop.load(Ordering::SeqCst) {
        let wait = next_tick.saturating_duration_since(Instant::now());
        match events.recv_timeout(wait) {
            Ok(Event::Connect { id, tx }) => {
                clients.insert(id, tx);
            }
            Ok(Event::Disconnect { id }) => {
                clients.remove(&id);
            }
            Ok(Event::Text { id, text }) => {
                let reply = session.handle(&text, start.elapsed());
                send(&mut clients, id, reply.to_json());
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                if Instant::now() < next_tick {
                    std::thread::sleep(next_tick - Instant::now());
                }
            }
        }
        session.clients = clients.len();
        if Instant::now() < next_tick {
            continue;
        }
        let state = match session.tick(start.elapsed()) {
            Ok(s) => ServerMessage::State(s).to_json(),
            Err(e) => ServerMessage::error(None, e.to_string()).to_json(),
        };
        let ids: Vec<u64> = clients.keys().copied().collect();
        for id in ids {
            send(&mut clients, id, state.clone());
        }
        next_tick += TICK;
        // After a long stall, drop the missed ticks rather than bursting.
        if Instant::now() > next_tick + 5 * TICK {
            next_tick = Instant::now() + TICK;
        }
    }
    let _ = session.stop_recording();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn session() -> Session {
        Session::new(SimWorld::builtin("oval").unwrap(), 0).unwrap()
    }

    fn ms(n: u64) -> Duration {
        Duration::from_millis(n)
    }

    #[test]
    fn cmd_is_acked_and_staged() {
        let mut s = session();
        let r = s.handle(r#"{"type":"cmd","seq":1,"steering":0.5,"throttle":0.3}"#, ms(0));
        assert_eq!(r, ServerMessage::Ack { seq: 1 });
        let st = s.tick(ms(10)).unwrap();
        assert_eq!(st.cmd, [0.5, 0.3]);
    }

    #[test]
    fn out_of_range_commands_are_clamped() {
        let mut s = session();
        assert_eq!(
            s.handle(r#"{"type":"cmd","seq":4,"steering":-7,"throttle":3}"#, ms(0)),
            ServerMessage::Ack { seq: 4 }
        );
        assert_eq!(s.tick(ms(0)).unwrap().cmd, [-1.0, 1.0]);
    }

    #[test]
    fn autopilot_without_model_is_refused() {
        let mut s = session();
        let r = s.handle(r#"{"type":"mode","seq":2,"value":"autopilot_int8"}"#, ms(0));
        assert_eq!(r, ServerMessage::Error { seq: Some(2), reason: "no model".into() });
        assert_eq!(s.mode(), Mode::Teleop);
    }

    #[test]
    fn reset_returns_to_spawn() {
        let mut s = session();
        s.handle(r#"{"type":"cmd","seq":1,"steering":0,"throttle":1}"#, ms(0));
        for i in 0..10 {
            s.tick(ms(50 * i)).unwrap();
        }
        assert!(s.sim().distance() > 0.0);
        assert_eq!(s.handle(r#"{"type":"reset","seq":3}"#, ms(500)), ServerMessage::Ack { seq: 3 });
        assert_eq!(s.sim().state().pose, s.sim().world().spawn);
        assert_eq!((s.sim().laps(), s.sim().collisions(), s.sim().tick()), (0, 0, 0));
    }

    #[test]
    fn bad_messages_get_error_replies() {
        let mut s = session();
        for (text, needle) in [
            ("not json", "malformed json"),
            (r#"{"seq":1}"#, "missing message type"),
            (r#"{"type":"warp","seq":1}"#, "unknown message type"),
            (r#"{"type":"cmd","seq":1,"steering":"left","throttle":0}"#, "malformed cmd"),
            (r#"{"type":"mode","seq":1,"value":"ludicrous"}"#, "malformed mode"),
            (r#"{"type":"record","seq":1,"on":true}"#, "needs a path"),
        ] {
            match s.handle(text, ms(0)) {
                ServerMessage::Error { reason, .. } => assert!(reason.contains(needle), "{reason}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn stale_teleop_command_decays_to_stop() {
        let mut s = session();
        s.handle(r#"{"type":"cmd","seq":1,"steering":0,"throttle":1}"#, ms(0));
        assert_eq!(s.tick(ms(500)).unwrap().cmd, [0.0, 1.0]);
        assert_eq!(s.tick(ms(550)).unwrap().cmd, [0.0, 0.0]);
        let x = s.sim().state().pose.x;
        for i in 0..20 {
            s.tick(ms(600 + 50 * i)).unwrap();
        }
        assert_eq!(s.sim().state().pose.x, x);
    }

    #[test]
    fn expert_mode_drives_without_input() {
        let mut s = session();
        assert_eq!(s.handle(r#"{"type":"mode","seq":1,"value":"expert"}"#, ms(0)), ServerMessage::Ack { seq: 1 });
        for i in 0..40 {
            s.tick(ms(50 * i)).unwrap();
        }
        assert!(s.sim().distance() > 0.5);
    }

    #[test]
    fn recording_ten_seconds_gives_two_hundred_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drive.tnrec");
        let mut s = session();
        let on = format!(r#"{{"type":"record","seq":1,"on":true,"path":{:?}}}"#, path.to_str().unwrap());
        assert_eq!(s.handle(&on, ms(0)), ServerMessage::Ack { seq: 1 });
        s.handle(r#"{"type":"mode","seq":2,"value":"expert"}"#, ms(0));
        for i in 0..100 {
            assert!(s.tick(ms(50 * i)).unwrap().recording);
        }
        // Resetting mid-recording must keep timestamps increasing.
        s.handle(r#"{"type":"reset","seq":3}"#, ms(5000));
        for i in 100..200 {
            s.tick(ms(50 * i)).unwrap();
        }
        assert_eq!(s.handle(r#"{"type":"record","seq":4,"on":false}"#, ms(10_000)), ServerMessage::Ack { seq: 4 });
        let rec = crate::formats::load_recording(&path).unwrap();
        assert_eq!(rec.len(), 200);
        let windows = tinynav_core::pipeline::build_windows(&rec, 0, tinynav_core::pipeline::Rotation::R0).unwrap();
        assert_eq!(windows.len(), 181);
    }

    #[test]
    fn state_message_matches_the_grammar() {
        let mut s = session();
        let json = ServerMessage::State(s.tick(ms(0)).unwrap()).to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in
            ["type", "tick", "pose", "cmd", "depth_b64", "rows", "cols", "mode", "recording", "laps", "collisions"]
        {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["type"], "state");
        assert_eq!(v["mode"], "teleop");
        let depth = base64::engine::general_purpose::STANDARD.decode(v["depth_b64"].as_str().unwrap()).unwrap();
        assert_eq!(depth.len(), 625);
        assert_eq!(ServerMessage::Ack { seq: 9 }.to_json(), r#"{"type":"ack","seq":9}"#);
    }
}
