#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use cbr::config::Settings;
use cbr::service::{router, AppState, FAULT_ENV};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
    pub retry_after: Option<String>,
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(v) => builder
            .header("content-type", "application/json")
            .body(Body::from(v.to_string()))
            .unwrap(),
        None => builder.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let retry_after = response
        .headers()
        .get("retry-after")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    Reply {
        status,
        body,
        retry_after,
    }
}

pub fn persistent_settings(dir: &Path) -> Settings {
    let mut settings = Settings::default();
    settings.bank_path = dir.join("bank.jsonl");
    settings.embedding_dimension = 32;
    settings
}

/// How many lines of the bank file carry `id`.
pub fn occurrences(bank_path: &Path, id: &str) -> usize {
    std::fs::read_to_string(bank_path)
        .unwrap_or_default()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter(|l| serde_json::from_str::<Value>(l).unwrap()["id"] == id)
        .count()
}

struct InjectedCrash;

/// One crash-injection trial against the bank in `dir`: draft, retain with
/// a fault that unwinds right after the case write, drop all in-memory
/// state, reopen from disk and retry. Returns the retained case id once it
/// is present exactly once and the retry was refused.
pub async fn crash_trial(dir: &Path, trial: usize) -> Result<String, String> {
    let settings = persistent_settings(dir);
    let crashing = AppState::open(&settings)
        .map_err(|e| e.to_string())?
        .with_fault_hook(Arc::new(|_| std::panic::resume_unwind(Box::new(InjectedCrash))));
    let app = router(Arc::new(crashing));
    let intent = format!("verify ospf adjacency after restart number {trial}");
    let generated = call(&app, "POST", "/v1/generate", Some(json!({ "intent": intent }))).await;
    if generated.status != StatusCode::OK {
        return Err(format!("generate returned {}", generated.status));
    }
    let session = generated.body["session_id"].as_str().unwrap().to_string();
    let final_script = if trial % 2 == 0 {
        format!("ospf.configure(dut)\nospf.check_neighbors(dut, {trial})\n")
    } else {
        generated.body["draft"].as_str().unwrap().to_string()
    };
    let uri = format!("/v1/sessions/{session}/retain");
    let crashed = call(&app, "POST", &uri, Some(json!({ "final_script": final_script }))).await;
    if crashed.status == StatusCode::OK {
        return Err("retain answered despite the injected crash".into());
    }
    drop(app);

    let case_id = format!("s-{session}");
    let bank_path = settings.bank_path.clone();
    if occurrences(&bank_path, &case_id) != 1 {
        return Err(format!("case {case_id} present {} times after crash", occurrences(&bank_path, &case_id)));
    }
    let restarted = router(Arc::new(AppState::open(&settings).map_err(|e| e.to_string())?));
    let view = call(&restarted, "GET", &format!("/v1/sessions/{session}"), None).await;
    if view.body["status"] != "retained" || view.body["case_id"] != case_id.as_str() {
        return Err(format!("session after restart: {}", view.body));
    }
    let retry = call(&restarted, "POST", &uri, Some(json!({ "final_script": final_script }))).await;
    if retry.status != StatusCode::CONFLICT {
        return Err(format!("retry returned {}", retry.status));
    }
    let case = call(&restarted, "GET", &format!("/v1/cases/{case_id}"), None).await;
    if case.body["script"] != final_script.as_str() {
        return Err("stored script differs from the submitted one".into());
    }
    match occurrences(&bank_path, &case_id) {
        1 => Ok(case_id),
        n => Err(format!("case {case_id} present {n} times after retry")),
    }
}

pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(bank: &Path, fault: bool) -> Server {
        let mut command = Command::new(env!("CARGO_BIN_EXE_cbr"));
        command
            .args(["serve", "--port", "0", "--bank"])
            .arg(bank)
            .env("CBR_LOG", "warn")
            .env("CBR_EMBEDDING_DIMENSION", "32")
            .env_remove(FAULT_ENV)
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        if fault {
            command.env(FAULT_ENV, "1");
        }
        let mut child = command.spawn().expect("spawn cbr serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
            .to_string();
        Server {
            child,
            base: format!("http://{addr}"),
        }
    }

    pub fn wait(mut self) -> std::process::ExitStatus {
        self.child.wait().unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub fn post(agent: &ureq::Agent, url: &str, body: Value) -> Result<(u16, Value), ureq::Error> {
    let mut response = agent.post(url).send_json(&body)?;
    Ok((response.status().as_u16(), response.body_mut().read_json()?))
}

pub fn get(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut response = agent.get(url).call().unwrap();
    (response.status().as_u16(), response.body_mut().read_json().unwrap())
}

/// Run the real binary with the abort fault armed, retain once, restart
/// without the fault and check the case is present exactly once.
pub fn process_abort_trial(dir: &Path) -> Result<(), String> {
    let bank: PathBuf = dir.join("process-bank.jsonl");
    let agent = agent();
    let server = Server::start(&bank, true);
    let (status, generated) = post(
        &agent,
        &format!("{}/v1/generate", server.base),
        json!({ "intent": "check bgp session flap recovery" }),
    )
    .map_err(|e| e.to_string())?;
    if status != 200 {
        return Err(format!("generate returned {status}"));
    }
    let session = generated["session_id"].as_str().unwrap().to_string();
    let retain_url = format!("{}/v1/sessions/{session}/retain", server.base);
    let final_script = "bgp.flap(dut)\nbgp.check_established(dut)\n";
    if post(&agent, &retain_url, json!({ "final_script": final_script })).is_ok() {
        return Err("server answered the retain instead of aborting".into());
    }
    let exit = server.wait();
    if exit.success() {
        return Err(format!("server exited cleanly: {exit}"));
    }
    let case_id = format!("s-{session}");
    if occurrences(&bank, &case_id) != 1 {
        return Err(format!("case present {} times after abort", occurrences(&bank, &case_id)));
    }

    let server = Server::start(&bank, false);
    let (_, view) = get(&agent, &format!("{}/v1/sessions/{session}", server.base));
    if view["status"] != "retained" {
        return Err(format!("session after restart: {view}"));
    }
    let retain_url = format!("{}/v1/sessions/{session}/retain", server.base);
    let (status, _) = post(&agent, &retain_url, json!({ "final_script": final_script })).map_err(|e| e.to_string())?;
    if status != 409 {
        return Err(format!("retry returned {status}"));
    }
    let (_, page) = get(&agent, &format!("{}/v1/cases?limit=500", server.base));
    let listed = page["cases"].as_array().unwrap().iter().filter(|c| c["id"] == case_id.as_str()).count();
    if listed != 1 {
        return Err(format!("case listed {listed} times"));
    }
    Ok(())
}
