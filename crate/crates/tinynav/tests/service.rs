//! Live websocket sessions against a running service.

use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tinynav::formats::load_recording;
use tinynav::service::{serve, ServiceHandle, Session};
use tinynav_core::sim::SimWorld;
use tungstenite::{Message, WebSocket};

struct Client {
    ws: WebSocket<TcpStream>,
    states: Vec<Value>,
}

impl Client {
    fn connect(handle: &ServiceHandle) -> Self {
        let addr = handle.local_addr();
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
        let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).unwrap();
        Client { ws, states: Vec::new() }
    }

    fn send(&mut self, msg: Value) {
        self.ws.send(Message::Text(msg.to_string())).unwrap();
    }

    fn next(&mut self) -> Value {
        loop {
            if let Message::Text(t) = self.ws.read().unwrap() {
                return serde_json::from_str(&t).unwrap();
            }
        }
    }

    /// Next ack or error, keeping the states seen on the way.
    fn reply(&mut self) -> Value {
        loop {
            let v = self.next();
            if v["type"] == "state" {
                self.states.push(v);
            } else {
                return v;
            }
        }
    }

    fn states_for(&mut self, span: Duration) -> Vec<Value> {
        let end = Instant::now() + span;
        let mut out = Vec::new();
        while Instant::now() < end {
            let v = self.next();
            if v["type"] == "state" {
                out.push(v);
            }
        }
        out
    }

    fn state(&mut self) -> Value {
        loop {
            let v = self.next();
            if v["type"] == "state" {
                return v;
            }
        }
    }
}

fn start() -> ServiceHandle {
    serve(Session::new(SimWorld::builtin("oval").unwrap(), 0).unwrap(), "127.0.0.1:0").unwrap()
}

fn pose(state: &Value) -> [f64; 3] {
    let p = state["pose"].as_array().unwrap();
    [p[0].as_f64().unwrap(), p[1].as_f64().unwrap(), p[2].as_f64().unwrap()]
}

#[test]
fn broadcasts_state_at_twenty_hertz() {
    let svc = start();
    let mut c = Client::connect(&svc);
    c.state();
    let states = c.states_for(Duration::from_secs(2));
    assert!((36..=44).contains(&states.len()), "{} states in 2 s", states.len());
    let ticks: Vec<u64> = states.iter().map(|s| s["tick"].as_u64().unwrap()).collect();
    assert!(ticks.windows(2).all(|w| w[1] == w[0] + 1));
    let s = &states[0];
    assert_eq!((s["rows"].as_u64(), s["cols"].as_u64()), (Some(25), Some(25)));
    assert_eq!(s["mode"], "teleop");
    assert_eq!(s["recording"], false);
    svc.stop();
}

#[test]
fn teleop_drives_forward_then_dead_man_stops() {
    let svc = start();
    let mut c = Client::connect(&svc);
    let start_pose = pose(&c.state());
    for seq in 0..10 {
        c.send(json!({"type": "cmd", "seq": seq, "steering": 0.0, "throttle": 0.5}));
        assert_eq!(c.reply(), json!({"type": "ack", "seq": seq}));
        c.states_for(Duration::from_millis(100));
    }
    let moved = pose(&c.state());
    let along = (moved[0] - start_pose[0]) * start_pose[2].cos() + (moved[1] - start_pose[1]) * start_pose[2].sin();
    assert!(along > 0.05, "moved {along} m along the heading");

    // No further commands: the robot must halt within a second.
    let after = c.states_for(Duration::from_millis(1000));
    let last = after.last().unwrap();
    assert_eq!(last["cmd"], json!([0.0, 0.0]));
    let p1 = pose(last);
    let p2 = pose(&c.states_for(Duration::from_millis(300)).pop().unwrap());
    assert_eq!(p1, p2);
    svc.stop();
}

#[test]
fn records_two_hundred_samples_in_ten_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.tnrec");
    let svc = start();
    let mut c = Client::connect(&svc);
    c.send(json!({"type": "mode", "seq": 1, "value": "expert"}));
    assert_eq!(c.reply()["type"], "ack");
    c.send(json!({"type": "record", "seq": 2, "on": true, "path": path}));
    assert_eq!(c.reply(), json!({"type": "ack", "seq": 2}));
    c.states.clear();
    std::thread::sleep(Duration::from_secs(10));
    c.send(json!({"type": "record", "seq": 3, "on": false}));
    assert_eq!(c.reply(), json!({"type": "ack", "seq": 3}));
    let recorded_states = c.states.iter().filter(|s| s["recording"] == true).count();
    svc.stop();

    let rec = load_recording(&path).unwrap();
    assert!((199..=201).contains(&rec.len()), "{} samples", rec.len());
    assert_eq!(rec.len(), recorded_states);
    assert!(rec.samples.windows(2).all(|w| w[1].timestamp_us - w[0].timestamp_us == 50_000));
    assert!(rec.samples.iter().any(|s| s.command.throttle > 0.0));
}

#[test]
fn bad_messages_get_error_replies() {
    let svc = start();
    let mut c = Client::connect(&svc);
    c.send(json!("not an object"));
    assert_eq!(c.reply()["type"], "error");
    c.ws.send(Message::Text("{oops".into())).unwrap();
    let r = c.reply();
    assert!(r["reason"].as_str().unwrap().starts_with("malformed json"), "{r}");
    assert!(r.get("seq").is_none());
    c.send(json!({"type": "warp", "seq": 5}));
    let r = c.reply();
    assert!(r["reason"].as_str().unwrap().starts_with("unknown message type"), "{r}");
    c.send(json!({"type": "mode", "seq": 6, "value": "autopilot_int8"}));
    let r = c.reply();
    assert_eq!((r["seq"].as_u64(), r["reason"].as_str()), (Some(6), Some("no model")));
    c.send(json!({"type": "load_model", "seq": 7, "path": "/nonexistent.tnqt", "engine": "int8"}));
    let r = c.reply();
    assert_eq!((r["type"].as_str(), r["seq"].as_u64()), (Some("error"), Some(7)));
    // The session keeps running after errors.
    assert_eq!(c.state()["mode"], "teleop");
    svc.stop();
}

#[test]
fn reset_returns_to_spawn() {
    let svc = start();
    let mut c = Client::connect(&svc);
    let spawn = SimWorld::builtin("oval").unwrap().spawn;
    c.send(json!({"type": "mode", "seq": 1, "value": "expert"}));
    c.reply();
    c.states_for(Duration::from_millis(500));
    c.send(json!({"type": "reset", "seq": 2}));
    assert_eq!(c.reply(), json!({"type": "ack", "seq": 2}));
    let next = c.state();
    let p = pose(&next);
    // One expert tick after the reset at most.
    assert!((p[0] - spawn.x).hypot(p[1] - spawn.y) < 0.06, "{p:?}");
    assert_eq!(next["mode"], "expert");
    svc.stop();
}

#[test]
fn two_clients_see_the_same_ticks() {
    let svc = start();
    let mut a = Client::connect(&svc);
    let mut b = Client::connect(&svc);
    a.state();
    b.state();
    let ta: Vec<u64> = a.states_for(Duration::from_millis(500)).iter().map(|s| s["tick"].as_u64().unwrap()).collect();
    let tb: Vec<u64> = b.states_for(Duration::from_millis(500)).iter().map(|s| s["tick"].as_u64().unwrap()).collect();
    assert!(ta.iter().filter(|t| tb.contains(t)).count() >= 5);
    svc.stop();
}
