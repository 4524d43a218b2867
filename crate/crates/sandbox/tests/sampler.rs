use std::time::Duration;

use comet_core::records::read_csv;
use comet_core::ResourceSample;
use comet_sandbox::{EnvSpec, Environment, Sampler};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

#[test]
fn busy_loop_reads_one_full_core() {
    let root = tempfile::tempdir().unwrap();
    let env = Environment::create(EnvSpec::process_group("busy", root.path())).unwrap();
    let out = root.path().join("resources_busy.csv");
    let p = env.spawn_hook("spin", "while :; do :; done").unwrap();
    env.adopt(p);
    let s = Sampler::start(env.pid_source(), Duration::from_millis(100), &out).unwrap();
    std::thread::sleep(Duration::from_secs(3));
    let rep = s.stop().unwrap();
    assert!(!rep.env_gone);

    let rows: Vec<ResourceSample> = read_csv(&out).unwrap();
    assert_eq!(rows.len() as u64, rep.samples);
    assert!(rows.len() >= 28, "{} samples", rows.len());
    assert!(rows.windows(2).all(|w| w[0].t_ns < w[1].t_ns));
    assert!(rows.iter().all(|r| r.cpu_pct >= 0.0 && r.mem_bytes > 0));
    let m = median(rows.iter().map(|r| r.cpu_pct).collect());
    assert!((90.0..=110.0).contains(&m), "median cpu {m}");
    let total: f64 = rows.iter().map(|r| r.cpu_pct).sum::<f64>() / rows.len() as f64;
    assert!((90.0..=110.0).contains(&total), "mean cpu {total}");
}

#[test]
fn teardown_mid_stream_leaves_a_valid_csv() {
    let root = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let out = out_dir.path().join("resources_gone.csv");
    let mut env = Environment::create(EnvSpec::process_group("gone", root.path())).unwrap();
    let p = env.spawn_hook("sleep", "exec sleep 300").unwrap();
    env.adopt(p);
    let s = Sampler::start(env.pid_source(), Duration::from_millis(50), &out).unwrap();
    std::thread::sleep(Duration::from_millis(400));
    env.teardown();
    for _ in 0..100 {
        if s.is_finished() {
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(s.is_finished());
    let rep = s.stop().unwrap();
    assert!(rep.env_gone);
    let rows: Vec<ResourceSample> = read_csv(&out).unwrap();
    assert_eq!(rows.len() as u64, rep.samples);
    assert!(rows.len() >= 4);
    assert!(rows.windows(2).all(|w| w[0].t_ns < w[1].t_ns));
}
