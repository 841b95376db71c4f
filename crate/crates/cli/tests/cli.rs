use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::Value;

fn cwords(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwords"))
        .args(args)
        .env_remove("CW_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    let out = cwords(&full);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON document on stdout")
}

fn fails(args: &[&str]) -> String {
    let out = cwords(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn attribute_file(dir: &Path) -> PathBuf {
    let p = dir.join("attrs.toml");
    std::fs::write(&p, "[[attribute]]\nname = \"pose\"\nmin = 0\nmax = 90\nbinding = \"position\"\n").unwrap();
    p
}

fn rendered(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok_json(&["render-toy", "--attributes", s(&attribute_file(dir)), "--grid", "18", "--out", s(&data)]);
    data
}

/// Toy defaults end to end: render, augment, train with stock stage configs.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = rendered(dir.path());
        ok_json(&["augment", "--manifest", s(&data)]);
        let ckpt = dir.path().join("model.json");
        let report = ok_json(&["train", "--manifest", s(&data), "--backbone", "toy", "--out", s(&ckpt)]);
        assert_eq!(report["steps"], 2000);
        dir
    });
    dir.path()
}

fn checkpoint() -> PathBuf {
    trained().join("model.json")
}

#[test]
fn render_toy_writes_grid_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    let report = ok_json(&["render-toy", "--attributes", s(&attribute_file(dir.path())), "--grid", "18", "--out", s(&out)]);
    assert_eq!(report["records"], 18);
    let first = std::fs::read(out.join("manifest.json")).unwrap();
    let image = std::fs::read(out.join("images/r0007.png")).unwrap();
    ok_json(&["render-toy", "--attributes", s(&attribute_file(dir.path())), "--grid", "18", "--out", s(&out)]);
    assert_eq!(std::fs::read(out.join("manifest.json")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("images/r0007.png")).unwrap(), image);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[[attribute]]\nname = \"pose\"\nmin = 9\nmax = 1\n").unwrap();
    let err = fails(&["render-toy", "--attributes", s(&bad), "--out", s(&out)]);
    assert!(err.contains("error:"), "{err}");
    assert!(fails(&["render-toy", "--out", s(&out)]).contains("--attributes"));
}

#[test]
fn augment_doubles_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (da, db) = (rendered(a.path()), rendered(b.path()));
    let report = ok_json(&["augment", "--manifest", s(&da), "--ratio", "1", "--seed", "5"]);
    assert_eq!(report["added"], 18);
    assert_eq!(report["records"], 36);
    ok_json(&["augment", "--manifest", s(&db), "--ratio", "1", "--seed", "5"]);
    assert_eq!(
        std::fs::read(da.join("manifest.json")).unwrap(),
        std::fs::read(db.join("manifest.json")).unwrap()
    );

    let c = tempfile::tempdir().unwrap();
    let dc = rendered(c.path());
    let policy = c.path().join("policy.toml");
    std::fs::write(&policy, "conditioner_kind = \"normal\"\n").unwrap();
    let err = fails(&["augment", "--manifest", s(&dc), "--policy", s(&policy)]);
    assert!(err.contains("normal"), "{err}");
}

#[test]
fn train_logs_stages_and_rejects_empty_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = rendered(dir.path());
    let short = dir.path().join("short.toml");
    std::fs::write(&short, "steps = 5\n").unwrap();
    let ckpt = dir.path().join("ckpt.json");
    let report = ok_json(&[
        "train", "--manifest", s(&data), "--stage1", s(&short), "--stage2", s(&short), "--out", s(&ckpt), "--seed", "3",
    ]);
    assert_eq!(report["steps"], 10);
    let log = std::fs::read_to_string(dir.path().join("ckpt.log.jsonl")).unwrap();
    let stages: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["stage"].as_u64().unwrap()).collect();
    assert_eq!(stages, [vec![1; 5], vec![2; 5]].concat());

    let again = dir.path().join("again.json");
    ok_json(&["train", "--manifest", s(&data), "--stage1", s(&short), "--stage2", s(&short), "--out", s(&again), "--seed", "3"]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    let joint_log = dir.path().join("joint.jsonl");
    let report = ok_json(&[
        "train", "--manifest", s(&data), "--stage1", s(&short), "--stage2", s(&short), "--out",
        s(&dir.path().join("joint.json")), "--log", s(&joint_log), "--joint",
    ]);
    assert_eq!(report["steps"], 10);
    assert!(std::fs::read_to_string(&joint_log).unwrap().lines().all(|l| l.contains("\"stage\":0")));

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(
        empty.join("manifest.json"),
        r#"{"version":1,"attributes":[{"name":"pose","min":0,"max":90}],"records":[]}"#,
    )
    .unwrap();
    let err = fails(&["train", "--manifest", s(&empty), "--out", s(&dir.path().join("x.json"))]);
    assert!(err.contains("no records"), "{err}");
    let err = fails(&["train", "--manifest", s(&data), "--backbone", "sd", "--out", s(&dir.path().join("x.json"))]);
    assert!(err.contains("sd"), "{err}");
}

#[test]
fn generate_is_reproducible_and_validated() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name);
    let base = ["generate", "--ckpt", s(&ckpt), "--set", "pose=30", "--seed", "4"];
    let run = |path: &Path, extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(&["--out", s(path)]);
        args.extend_from_slice(extra);
        ok_json(&args)
    };
    let report = run(&out("a.png"), &[]);
    assert_eq!(report["attributes"]["pose"], 30.0);
    assert_eq!(report["request"]["template"], "a <attr:pose> photo of <obj>");
    run(&out("b.png"), &[]);
    run(&out("c.png"), &["--negative-mode", "null_text"]);
    let bytes = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(bytes(out("a.png")), bytes(out("b.png")));
    assert_ne!(bytes(out("a.png")), bytes(out("c.png")));

    let err = fails(&["generate", "--ckpt", s(&ckpt), "--set", "pose=120", "--out", s(&out("d.png"))]);
    assert!(err.contains("pose") && err.contains("90"), "{err}");
    assert!(fails(&["generate", "--ckpt", s(&ckpt), "--set", "pose", "--out", s(&out("d.png"))]).contains("name=value"));
    assert!(!out("d.png").exists());
}

#[test]
fn sweep_writes_evenly_spaced_frames() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let frames_dir = dir.path().join("frames");
    let report = ok_json(&[
        "sweep", "--ckpt", s(&ckpt), "--attr", "pose", "--from", "0", "--to", "60", "--frames", "5", "--steps", "5",
        "--out", s(&frames_dir),
    ]);
    let values: Vec<f64> = report["frames"].as_array().unwrap().iter().map(|f| f["value"].as_f64().unwrap()).collect();
    assert_eq!(values, vec![0.0, 15.0, 30.0, 45.0, 60.0]);
    for i in 0..5 {
        assert!(frames_dir.join(format!("frame_{i:03}.png")).exists());
    }
    let err = fails(&["sweep", "--ckpt", s(&ckpt), "--attr", "size", "--out", s(&frames_dir)]);
    assert!(err.contains("size"), "{err}");
    let text = cwords(&["sweep", "--ckpt", s(&ckpt), "--attr", "pose", "--frames", "2", "--steps", "2", "--out", s(&frames_dir)]);
    assert!(String::from_utf8_lossy(&text.stdout).contains("pose = [0, 90]"));
}

#[test]
fn inspect_reports_counts() {
    let ckpt = checkpoint();
    let info = ok_json(&["inspect", "--ckpt", s(&ckpt)]);
    assert_eq!(info["version"], 1);
    assert_eq!(info["backbone"], "toy-v1");
    assert_eq!(info["lora_rank"], 4);
    assert_eq!(info["attributes"][0]["name"], "pose");
    let lora = info["lora_params"].as_u64().unwrap();
    let full = info["full_params"].as_u64().unwrap();
    assert!(lora * 10 <= full, "lora {lora}, full {full}");

    // recompute Σ r·(in + out) from the stored factor shapes
    let raw: Value = serde_json::from_slice(&std::fs::read(&ckpt).unwrap()).unwrap();
    let mut expected = 0;
    for factors in raw["lora"]["layers"].as_object().unwrap().values() {
        let dim = |k: &str| factors[k]["dim"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).collect::<Vec<_>>();
        let (a, b) = (dim("a"), dim("b"));
        expected += a[0] * a[1] + b[0] * b[1];
        assert_eq!(a[0], 4);
        assert_eq!(b[1], 4);
    }
    assert_eq!(lora, expected);

    let text = String::from_utf8(cwords(&["inspect", "--ckpt", s(&ckpt)]).stdout).unwrap();
    assert!(text.contains("checkpoint version 1"), "{text}");
    assert!(fails(&["inspect", "--ckpt", "/nonexistent/model.json"]).contains("nonexistent"));
}

#[test]
fn run_config_supplies_values_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    attribute_file(dir.path());
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[render_toy]\nattributes = \"attrs.toml\"\ngrid = 4\nout = \"from_config\"\n").unwrap();
    let report = ok_json(&["--config", s(&config), "render-toy"]);
    assert_eq!(report["records"], 4);
    assert!(dir.path().join("from_config/manifest.json").exists());
    let report = ok_json(&["--config", s(&config), "render-toy", "--grid", "6"]);
    assert_eq!(report["records"], 6);

    std::fs::write(&config, "[render_toy]\ngirdd = 4\n").unwrap();
    assert!(fails(&["--config", s(&config), "render-toy"]).contains("girdd"));
}

#[test]
fn json_errors_go_to_stdout_too() {
    let out = cwords(&["--json", "inspect", "--ckpt", "/nonexistent/model.json"]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["error"].as_str().unwrap().contains("nonexistent"));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn http_get(port: u16, path: &str) -> std::io::Result<String> {
    let mut stream = TcpStream::connect(("127.0.0.1", port))?;
    write!(stream, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")?;
    let mut body = String::new();
    stream.read_to_string(&mut body)?;
    Ok(body)
}

#[test]
fn serve_reads_environment() {
    let ckpt = checkpoint();
    let port = free_port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_cwords"))
        .arg("serve")
        .env("CW_CHECKPOINT", &ckpt)
        .env("CW_PORT", port.to_string())
        .env("CW_HOST", "127.0.0.1")
        .env_remove("CW_CONFIG")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let response = loop {
        match http_get(port, "/attributes") {
            Ok(r) => break r,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(100)),
            Err(e) => {
                child.kill().ok();
                panic!("service never came up: {e}");
            }
        }
    };
    child.kill().ok();
    child.wait().ok();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"name\":\"pose\""), "{response}");
}
