#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const STOP_LINE: f64 = 100.0;

pub fn cfcal(args: &[&str], jobs: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfcal"))
        .args(args)
        .env("CFCAL_JOBS", jobs.to_string())
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str], jobs: usize) -> Output {
    let out = cfcal(args, jobs);
    assert!(
        out.status.success(),
        "cfcal {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Queue of `n` vehicles in each lane waiting at x = 100 and leaving one
/// second apart with constant acceleration up to 13.9 m/s.
pub fn queue_csv(lanes: &[i64], n: u64) -> String {
    let dt = 0.04;
    let mut s = String::from("track_id,frame,t,x,y,speed,lane_id,length,leader_id\n");
    for (li, &lane) in lanes.iter().enumerate() {
        for k in 0..n {
            let id = 100 * (li as u64 + 1) + k + 1;
            let x0 = 95.0 - 7.0 * k as f64;
            let go = 2.0 + k as f64;
            let leader = if k == 0 { String::new() } else { (id - 1).to_string() };
            let (mut x, mut v) = (x0, 0.0);
            for f in 0..=500 {
                let t = f as f64 * dt;
                writeln!(s, "{id},{f},{t},{x},0,{v},{lane},4.5,{leader}").unwrap();
                if t >= go {
                    v = (v + 2.0 * dt).min(13.9);
                    x += v * dt;
                }
            }
        }
    }
    s
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Every file of a directory except the manifest, by name.
pub fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
