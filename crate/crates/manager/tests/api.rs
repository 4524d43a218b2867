mod common;

use std::io::Read;
use std::thread;
use std::time::{Duration, Instant};

use comet_manager::spawn_server;
use common::*;
use flate2::read::GzDecoder;
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

fn form(archive: Vec<u8>, plan: &str) -> Form {
    Form::new()
        .part("archive", Part::bytes(archive).file_name("adapter.tar.gz"))
        .text("plan", plan.to_string())
}

#[test]
fn submit_poll_and_download_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path());
    let (addr, _) = spawn_server(m, "127.0.0.1:0").unwrap();
    let base = format!("http://{addr}");
    let http = Client::new();

    let plan = serde_json::to_string(&plan()).unwrap();
    let r = http.post(format!("{base}/evaluations")).multipart(form(archive(), &plan)).send().unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    let id = r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string();
    assert_eq!(id, "job-1");

    let r = http.get(format!("{base}/evaluations/{id}/results")).send().unwrap();
    if r.status() != StatusCode::OK {
        assert_eq!(r.status(), StatusCode::CONFLICT);
    }

    let deadline = Instant::now() + WAIT;
    let state = loop {
        let s: Value = http.get(format!("{base}/evaluations/{id}")).send().unwrap().json().unwrap();
        let state = s["state"].as_str().unwrap().to_string();
        if state == "QUEUED" {
            assert!(s["position"].is_u64());
        } else {
            assert!(s.get("position").is_none(), "{s}");
        }
        if state == "DONE" || state == "FAILED" || Instant::now() > deadline {
            break state;
        }
        thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(state, "DONE");

    let r = http.get(format!("{base}/evaluations/{id}/results")).send().unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "application/gzip");
    let body = r.bytes().unwrap();
    let mut names = Vec::new();
    let mut tar = tar::Archive::new(GzDecoder::new(&body[..]));
    for e in tar.entries().unwrap() {
        let mut e = e.unwrap();
        let name = e.path().unwrap().to_string_lossy().trim_start_matches("./").to_string();
        let mut sink = Vec::new();
        e.read_to_end(&mut sink).unwrap();
        names.push(name);
    }
    for f in ["rtt.csv", "goodput.csv", "resources_sender.csv", "resources_receiver.csv", "run.log", "plan.json", "config.resolved.toml"] {
        assert!(names.iter().any(|n| n == f), "{f} not in {names:?}");
    }
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let m = manager(dir.path());
    let (addr, _) = spawn_server(m, "127.0.0.1:0").unwrap();
    let base = format!("http://{addr}");
    let http = Client::new();

    let r = http.get(format!("{base}/evaluations/job-999")).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert!(r.json::<Value>().unwrap()["error"].as_str().unwrap().contains("job-999"));
    let r = http.get(format!("{base}/evaluations/job-999/results")).send().unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);

    let bad = r#"{"tests":[{"kind":"goodput","bundle_count":0,"payload_sizes":[]}]}"#;
    let r = http.post(format!("{base}/evaluations")).multipart(form(archive(), bad)).send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let v: Value = r.json().unwrap();
    let violations: Vec<&str> = v["violations"].as_array().unwrap().iter().map(|x| x.as_str().unwrap()).collect();
    assert!(violations.contains(&"test 0: goodput requires ≥1 payload size"), "{violations:?}");
    assert!(violations.iter().any(|x| x.contains("bundle_count")), "{violations:?}");

    let plan = serde_json::to_string(&plan()).unwrap();
    let r = http.post(format!("{base}/evaluations")).multipart(form(Vec::new(), &plan)).send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = http.post(format!("{base}/evaluations")).multipart(form(b"junk".to_vec(), &plan)).send().unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = http
        .post(format!("{base}/evaluations"))
        .multipart(Form::new().part("archive", Part::bytes(archive())))
        .send()
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);

    let v: Value = http.get(format!("{base}/cleanup")).send().unwrap().json().unwrap();
    assert!(v["blocked"].is_null());
}
