use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use latshield_core::dubins::{step_clamped, DubinsParams, RenderSpec, Renderer};
use latshield_core::filter::{FilterConfig, FilterMode};
use latshield_core::grid::{solve_gt, GridSpec};
use latshield_core::nn::{Activation, Mlp, NetSpec};
use latshield_core::reach::{critic_arch, CriticKind, CriticReport, SafetyCritic};
use latshield_core::session::{aimed_start, ModelBundle, Session};
use latshield_core::{ActionIndex, ActionSet, Rng, State};
use latshield_service::{run_session, spawn_server, AppState, ServiceConfig};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio::sync::{broadcast, mpsc};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

/// Privileged critic with state-independent Q-values.
fn constant_critic(q: [f32; 3]) -> SafetyCritic {
    let spec = NetSpec::new(critic_arch(4, &[], Activation::Identity)).unwrap();
    let mut net = Mlp::new(spec, &mut Rng::new(0));
    net.params.weights[0].fill(0.0);
    net.params.biases[0] = ndarray::Array1::from(q.to_vec());
    SafetyCritic {
        kind: CriticKind::Privileged,
        actions: ActionSet::FULL,
        online: net.clone(),
        target: net,
        report: CriticReport::default(),
    }
}

fn bundle(privileged: Option<SafetyCritic>) -> Arc<ModelBundle> {
    let params = DubinsParams::default();
    Arc::new(ModelBundle {
        params,
        renderer: Renderer::new(RenderSpec::default(), params).unwrap(),
        margin_scale: 4.0,
        gt: Some(solve_gt(&params, GridSpec::for_params(&params, 31, 31, 16), 1e-5, 2000).unwrap()),
        wm: None,
        classifier: None,
        latent: None,
        privileged,
        risk: None,
    })
}

fn config(mode: FilterMode) -> ServiceConfig {
    ServiceConfig {
        filter: FilterConfig {
            mode,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    async fn connect(bundle: Arc<ModelBundle>, cfg: ServiceConfig) -> Client {
        let state = AppState::new(bundle, cfg).unwrap();
        let (addr, _) = spawn_server("127.0.0.1:0".parse().unwrap(), state).await.unwrap();
        let (ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
        let mut c = Client { ws };
        assert_eq!(c.next().await["type"], "hello");
        c
    }

    async fn send(&mut self, v: Value) {
        self.send_text(v.to_string()).await;
    }

    async fn send_text(&mut self, s: String) {
        self.ws.send(Message::Text(s.into())).await.unwrap();
    }

    async fn next(&mut self) -> Value {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(5), self.ws.next())
                .await
                .expect("server went quiet")
                .unwrap()
                .unwrap();
            if let Message::Text(t) = msg {
                return serde_json::from_str(t.as_str()).unwrap();
            }
        }
    }

    async fn next_tick(&mut self) -> Value {
        loop {
            let v = self.next().await;
            if v["type"] == "tick" {
                return v;
            }
        }
    }

    /// Reads until an error frame arrives; ticks in between are skipped.
    async fn next_error(&mut self) -> String {
        for _ in 0..100 {
            let v = self.next().await;
            if v["type"] == "error" {
                return v["code"].as_str().unwrap().to_string();
            }
        }
        panic!("no error frame");
    }
}

fn state_of(tick: &Value) -> State {
    let s: Vec<f64> = serde_json::from_value(tick["state"].clone()).unwrap();
    State::new(s[0], s[1], s[2]).unwrap()
}

#[tokio::test]
async fn hello_matches_the_environment() {
    let state = AppState::new(bundle(None), config(FilterMode::Off)).unwrap();
    let (addr, _) = spawn_server("127.0.0.1:0".parse().unwrap(), state).await.unwrap();
    let (mut ws, _) = connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let first = ws.next().await.unwrap().unwrap();
    let v: Value = serde_json::from_str(first.to_text().unwrap()).unwrap();
    assert_eq!(
        v,
        json!({"type":"hello","dt":0.05,"action_table":[-1.25,0.0,1.25],
               "bounds":[[-1.0,1.0],[-1.0,1.0]],"obstacle":{"c":[0.0,0.0],"r":0.5}})
    );
}

#[tokio::test]
async fn sticky_requests_and_telemetry_integrity() {
    let mut c = Client::connect(bundle(None), config(FilterMode::Off)).await;
    let p = DubinsParams::default();
    let mut prev = c.next_tick().await;
    assert_eq!(prev["requested"], 1);
    c.send(json!({"type":"action","omega_index":2})).await;
    let mut saw_left = false;
    for _ in 0..30 {
        let t = c.next_tick().await;
        assert_eq!(t["t"].as_u64().unwrap(), prev["t"].as_u64().unwrap() + 1);
        let a = ActionIndex::new(prev["executed"].as_u64().unwrap() as usize).unwrap();
        assert_eq!(state_of(&t), step_clamped(&state_of(&prev), a, &p));
        if saw_left {
            assert_eq!(t["requested"], 2, "request must persist");
        }
        saw_left |= t["requested"] == 2;
        prev = t;
    }
    assert!(saw_left);
}

#[tokio::test]
async fn bad_frames_get_error_codes_and_session_continues() {
    let mut c = Client::connect(bundle(None), config(FilterMode::Off)).await;
    c.send(json!({"type":"teleport"})).await;
    assert_eq!(c.next_error().await, "unknown_type");
    c.send_text("{not json".into()).await;
    assert_eq!(c.next_error().await, "malformed");
    c.send(json!({"type":"action","omega_index":7})).await;
    assert_eq!(c.next_error().await, "invalid_action");
    c.send(json!({"type":"reset","state":[0.1,0.0,0.0]})).await;
    assert_eq!(c.next_error().await, "reset_in_failure");
    c.send(json!({"type":"config","mode":"latent_hj"})).await;
    assert_eq!(c.next_error().await, "mode_unavailable");
    let a = c.next_tick().await["t"].as_u64().unwrap();
    let b = c.next_tick().await["t"].as_u64().unwrap();
    assert_eq!(b, a + 1);
}

#[tokio::test]
async fn reset_teleports_and_config_applies_to_following_ticks() {
    // V = max Q = 0.35: overridden at ε = 0.4, passed through at ε = 0.3.
    let mut c = Client::connect(bundle(Some(constant_critic([0.35, 0.1, 0.2]))), config(FilterMode::PrivHj)).await;
    c.send(json!({"type":"reset","state":[0.8,0.8,3.0]})).await;
    let mut t = c.next_tick().await;
    while state_of(&t) != State::new(0.8, 0.8, 3.0).unwrap() {
        t = c.next_tick().await;
    }
    assert_eq!(t["overridden"], true);
    assert_eq!(t["executed"], 0);
    c.send(json!({"type":"config","epsilon":0.3})).await;
    let mut changed = false;
    for _ in 0..20 {
        let t = c.next_tick().await;
        if changed {
            assert_eq!(t["overridden"], false, "config must stick");
        }
        changed |= t["overridden"] == false;
    }
    assert!(changed);
    c.send(json!({"type":"reset"})).await;
    let t = c.next_tick().await;
    assert!(t["value"].as_f64().unwrap().is_finite());
}

#[tokio::test]
async fn unfiltered_straight_drive_reports_failure() {
    let mut c = Client::connect(bundle(None), config(FilterMode::Off)).await;
    let start = aimed_start(&DubinsParams::default(), 0.9, 0.0).unwrap();
    let [x, y, th] = start.to_array();
    c.send(json!({"type":"reset","state":[x, y, th]})).await;
    c.send(json!({"type":"action","omega_index":1})).await;
    let mut failed = false;
    for _ in 0..60 {
        let t = c.next_tick().await;
        assert_eq!(t["overridden"], false);
        failed |= t["failure"] == true;
    }
    assert!(failed);
}

#[tokio::test]
async fn slow_reader_does_not_stall_the_loop() {
    let mut c = Client::connect(bundle(None), config(FilterMode::Off)).await;
    let first = c.next_tick().await["t"].as_u64().unwrap();
    tokio::time::sleep(Duration::from_secs(6)).await;
    // Drain whatever is queued; a stalled loop would leave t near `first`.
    let mut latest = first;
    while let Ok(v) = tokio::time::timeout(Duration::from_millis(30), c.next_tick()).await {
        latest = v["t"].as_u64().unwrap();
    }
    assert!(latest >= first + 110, "latest tick {latest} after a 6 s pause");
}

#[tokio::test(start_paused = true)]
async fn lagging_subscriber_keeps_only_the_newest_backlog() {
    let session = Session::new(bundle(None), FilterConfig { mode: FilterMode::Off, ..Default::default() }, 1).unwrap();
    let (_cmd_tx, cmd_rx) = mpsc::channel(8);
    let (out_tx, mut out_rx) = broadcast::channel::<String>(64);
    let period = Duration::from_millis(50);
    // 200 ticks at t = 0, 50, ..., 9950 ms.
    let stop = tokio::time::sleep(Duration::from_millis(9_975));
    run_session(session, cmd_rx, out_tx, period, stop).await;
    match out_rx.recv().await {
        Err(broadcast::error::RecvError::Lagged(n)) => assert_eq!(n, 200 - 64),
        other => panic!("expected lag, got {other:?}"),
    }
    let mut ts = Vec::new();
    while let Ok(frame) = out_rx.try_recv() {
        let v: Value = serde_json::from_str(&frame).unwrap();
        ts.push(v["t"].as_u64().unwrap());
    }
    assert_eq!(ts, (136..200).collect::<Vec<_>>());
}

#[tokio::test]
async fn four_hundred_ticks_take_twenty_seconds() {
    let mut c = Client::connect(bundle(None), config(FilterMode::Off)).await;
    let t0 = c.next_tick().await["t"].as_u64().unwrap();
    let start = Instant::now();
    loop {
        let t = c.next_tick().await["t"].as_u64().unwrap();
        if t == t0 + 400 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!((19.0..=21.0).contains(&secs), "400 ticks took {secs:.2} s");
}
