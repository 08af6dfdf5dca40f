use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dermresnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn json_line(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    let line = stdout.lines().find(|l| l.starts_with('{')).expect("a JSON line on stdout");
    serde_json::from_str(line).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = run(&["synth", "--out", "x", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "--data", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.bin");
    let out = run(&["predict", "--image", "x.png", "--checkpoint", path(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = run(&["eval", "--data", path(dir.path()), "--checkpoint", path(&missing)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("out/model.bin");

    let out = run(&["synth", "--n", "64", "--size", "32", "--seed", "7", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_line(&out)["positives"], 32);

    let out = run(&[
        "train", "--data", path(&data), "--out-checkpoint", path(&ckpt), "--epochs", "200", "--lr", "0.05",
        "--batch", "16", "--seed", "7", "--input-size", "32",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json_line(&out);
    assert_eq!(report["epochs"], 200);
    let history = std::fs::read_to_string(dir.path().join("out/model.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,train_acc,val_acc\n"));
    assert_eq!(history.lines().count(), 201);
    assert!(dir.path().join("out/model.best.bin").is_file());

    let out = run(&["eval", "--data", path(&data), "--checkpoint", path(&ckpt)]);
    assert!(out.status.success());
    let eval = json_line(&out);
    assert!(eval["accuracy"].as_f64().unwrap() >= 0.95, "{eval}");

    let image = data.join("s7_0000.png");
    let overlay = dir.path().join("overlay.png");
    let out = run(&[
        "predict", "--image", path(&image), "--checkpoint", path(&ckpt), "--out-overlay", path(&overlay),
    ]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with('{')).count(), 1);
    let p = json_line(&out)["probability_melanoma"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert_eq!(image::open(&overlay).unwrap().to_rgb8().dimensions(), (32, 32));
}

#[test]
fn serve_refuses_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.bin");
    std::fs::write(&ckpt, b"DRMRSNT1\x01\0\0\0garbage-garbage").unwrap();
    let out = run(&["serve", "--checkpoint", path(&ckpt), "--bind", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

#[test]
fn serve_answers_healthz() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("m.bin");
    assert!(run(&["synth", "--n", "8", "--size", "16", "--out", path(&data)]).status.success());
    let out = run(&[
        "train", "--data", path(&data), "--out-checkpoint", path(&ckpt), "--epochs", "1", "--input-size", "16",
        "--train-fraction", "0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut child = bin()
        .args(["serve", "--checkpoint", path(&ckpt), "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let ready: Value = serde_json::from_str(&line).unwrap();
    let addr = ready["address"].as_str().unwrap().to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.ends_with("ok"));
}

#[test]
fn channels_take_a_comma_list() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let ckpt = dir.path().join("m.bin");
    assert!(run(&["synth", "--n", "8", "--size", "16", "--out", path(&data)]).status.success());
    let train = |channels: &str| {
        run(&[
            "train", "--data", path(&data), "--out-checkpoint", path(&ckpt), "--epochs", "1", "--input-size", "16",
            "--train-fraction", "0.5", "--channels", channels,
        ])
    };
    let out = train("2,3,4");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let params = (2 * 3 * 9 + 2 + 8 + 2 * 3 + 2) + (3 * 2 * 9 + 3 + 12 + 3 * 2 + 3) + (4 * 3 * 9 + 4 + 16 + 4 * 3 + 4) + 10;
    assert_eq!(json_line(&out)["checkpoint_bytes"], 64 + 4 * params + 4);
    assert_eq!(train("2,3").status.code(), Some(1));
}
