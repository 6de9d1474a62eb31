// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const KEY: &str = "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f\
                   202122232425262728292a2b2c2d2e2f303132333435363738393a3b3c3d3e3f";

fn vblk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vblk"))
        .args(args)
        .env("VBLK_KEY", KEY)
        .output()
        .expect("run vblk")
}

fn ok(args: &[&str]) -> String {
    let out = vblk(args);
    assert!(
        out.status.success(),
        "vblk {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn image_round_trip_with_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    let v1 = tmp.path().join("v1");
    let v2 = tmp.path().join("v2");
    std::fs::write(&v1, vec![0x11u8; 8192]).unwrap();
    std::fs::write(&v2, vec![0x22u8; 4096]).unwrap();

    let out = ok(&["create", "--image", s(&img), "--size", "16M", "--layout", "kv"]);
    assert!(out.contains("layout=kv policy=random"), "{out}");
    assert!(!vblk(&["create", "--image", s(&img), "--size", "16M"]).status.success());

    ok(&["write", "--image", s(&img), "--offset", "8K", "--input", s(&v1)]);
    assert_eq!(ok(&["snap", "--image", s(&img)]).trim(), "snapshot = 1");
    ok(&["write", "--image", s(&img), "--offset", "8K", "--input", s(&v2)]);

    let head = tmp.path().join("head");
    let old = tmp.path().join("old");
    ok(&[
        "read",
        "--image",
        s(&img),
        "--offset",
        "8K",
        "--length",
        "8K",
        "--output",
        s(&head),
    ]);
    ok(&[
        "read",
        "--image",
        s(&img),
        "--offset",
        "8K",
        "--length",
        "8K",
        "--at",
        "1",
        "--output",
        s(&old),
    ]);
    let head = std::fs::read(head).unwrap();
    assert_eq!(&head[..4096], &[0x22; 4096]);
    assert_eq!(&head[4096..], &[0x11; 4096]);
    assert_eq!(std::fs::read(old).unwrap(), vec![0x11; 8192]);

    let dump = ok(&["read", "--image", s(&img), "--offset", "0", "--length", "4K"]);
    assert!(dump.starts_with("000000000000  0000"));
}

#[test]
fn wrong_key_and_bad_requests_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    ok(&["create", "--image", s(&img), "--size", "1M", "--layout", "baseline"]);
    let other = "ff".repeat(32) + &"ee".repeat(32);
    let out = vblk(&["read", "--image", s(&img), "--key", &other]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("key does not match"));
    assert!(!vblk(&["read", "--image", s(&img), "--offset", "1M"]).status.success());
    assert!(!vblk(&[
        "create",
        "--image",
        s(&tmp.path().join("x")),
        "--size",
        "1M",
        "--layout",
        "baseline",
        "--policy",
        "random"
    ])
    .status
    .success());
    assert!(!vblk(&[
        "create",
        "--image",
        s(&tmp.path().join("y")),
        "--size",
        "1M",
        "--backend",
        "mem"
    ])
    .status
    .success());
}

#[test]
fn bench_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("out.csv");
    ok(&[
        "bench",
        "--io-size",
        "4K,32K",
        "--ops",
        "50",
        "--qd",
        "8",
        "--size",
        "16M",
        "--seed",
        "3",
        "--csv",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "layout,policy,direction,io_size,ops,sectors_read,sectors_written,rmw_sectors,kv_ops,amp_ratio,overhead_pct,elapsed_ns"
    );
    assert_eq!(lines.len(), 1 + 2 * 4);
    let oe4k = lines
        .iter()
        .find(|l| l.starts_with("object-end,random,write,4096,"))
        .unwrap();
    let cols: Vec<&str> = oe4k.split(',').collect();
    assert_eq!(cols[6], "100");
    assert_eq!(cols[9], "2.000000");
    assert_eq!(cols[10], "50.0000");
}

#[test]
fn bench_file_backend_and_latency_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "bench",
        "--layout",
        "object-end",
        "--io-size",
        "8K",
        "--direction",
        "randread",
        "--ops",
        "20",
        "--size",
        "8M",
        "--backend",
        "file",
        "--image",
        s(tmp.path()),
        "--latency-model",
        "fixed=1000,sector=10",
    ]);
    assert!(out.contains("object-end"), "{out}");
    assert!(!vblk(&["bench", "--backend", "file"]).status.success());
    assert!(!vblk(&["bench", "--latency-model", "warp=9"]).status.success());
}

#[test]
fn probe_reports() {
    let out = ok(&["probe", "--trials", "5"]);
    assert_eq!(out.matches("[probe ").count(), 8);
    assert_eq!(out.matches("verdict = vulnerable").count(), 4);
    assert_eq!(out.matches("verdict = mitigated").count(), 4);
    let out = ok(&["probe", "--policy", "random", "--trials", "5"]);
    assert!(out.contains("evidence.binding_mismatch = 5"));
}
