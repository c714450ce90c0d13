use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seedpad::eval::{build_report, load_records, EvalReport};
use seedpad::graph::load_graph;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/e2e")
}

fn seedpad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seedpad"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Annotates the training split and builds its graph; returns the graph path.
fn graph_in(dir: &Path) -> PathBuf {
    let ann = dir.join("train.ann.jsonl");
    let graph = dir.join("graph.bin");
    let o = seedpad(&[
        "annotate",
        "--input",
        p(&fixtures().join("train.jsonl")),
        "--output",
        p(&ann),
        "--lexicon",
        p(&fixtures().join("lexicon.tsv")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = seedpad(&["build-graph", "--input", p(&ann), "--output", p(&graph)]);
    assert!(o.status.success(), "{}", stderr(&o));
    graph
}

#[test]
fn missing_lexicon_fails_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.jsonl");
    let o = seedpad(&[
        "annotate",
        "--input",
        p(&fixtures().join("train.jsonl")),
        "--output",
        p(&out),
        "--lexicon",
        p(&dir.path().join("absent.tsv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lexicon"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn icp_without_graph_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = seedpad(&[
        "--config",
        p(&fixtures().join("run.toml")),
        "run",
        "--out-dir",
        p(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("graph"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn annotate_rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    graph_in(a.path());
    graph_in(b.path());
    for f in ["train.ann.jsonl", "graph.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn empty_and_corrupt_annotated_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let graph = dir.path().join("g.bin");
    let o = seedpad(&["build-graph", "--input", p(&empty), "--output", p(&graph)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(load_graph(&graph).unwrap().m(), 0);

    let bad = dir.path().join("bad.jsonl");
    let good = std::fs::read_to_string(fixtures().join("train.jsonl")).unwrap();
    let first = good.lines().next().unwrap();
    // a plain record lacks the entity fields
    std::fs::write(&bad, format!("{{\"id\":\"x\",{}\n{first}\n", "\"qo_entities\":[],\"r_entities\":[],\"question\":\"q\",\"options\":{\"A\":\"a\",\"B\":\"b\"},\"answer\":\"A\",\"analysis\":\"r\"}")).unwrap();
    let o = seedpad(&["build-graph", "--input", p(&bad), "--output", p(&dir.path().join("g2.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn mine_seeds_then_run_from_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let graph = graph_in(dir.path());
    let test_ann = dir.path().join("test.ann.jsonl");
    let seeds = dir.path().join("seeds.jsonl");
    let o = seedpad(&[
        "annotate",
        "--input",
        p(&fixtures().join("test.jsonl")),
        "--output",
        p(&test_ann),
        "--lexicon",
        p(&fixtures().join("lexicon.tsv")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = seedpad(&["mine-seeds", "--graph", p(&graph), "--input", p(&test_ann), "--output", p(&seeds), "--k", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(seedpad::seeds::load_seeds(&seeds).unwrap().len(), 20);

    let via_graph = dir.path().join("g");
    let via_seeds = dir.path().join("s");
    let cfg = fixtures().join("run.toml");
    let o = seedpad(&["--config", p(&cfg), "run", "--graph", p(&graph), "--out-dir", p(&via_graph)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = seedpad(&["--config", p(&cfg), "run", "--seeds", p(&seeds), "--out-dir", p(&via_seeds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    for f in ["records.jsonl", "report.json"] {
        assert_eq!(
            std::fs::read(via_graph.join(f)).unwrap(),
            std::fs::read(via_seeds.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn dumped_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let graph = graph_in(dir.path());
    let first = dir.path().join("first");
    let o = seedpad(&[
        "--config",
        p(&fixtures().join("run.toml")),
        "run",
        "--graph",
        p(&graph),
        "--out-dir",
        p(&first),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dumped = std::fs::read_to_string(first.join("config.toml")).unwrap();
    assert!(dumped.contains(&format!("code_version = \"{}\"", env!("CARGO_PKG_VERSION"))));

    let second = dir.path().join("second");
    let o = seedpad(&["--config", p(&first.join("config.toml")), "run", "--out-dir", p(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["records.jsonl", "report.json", "report.md"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn report_regroups_a_records_file() {
    let dir = tempfile::tempdir().unwrap();
    let graph = graph_in(dir.path());
    let run = dir.path().join("run");
    let o = seedpad(&[
        "--config",
        p(&fixtures().join("run.toml")),
        "run",
        "--graph",
        p(&graph),
        "--out-dir",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = dir.path().join("rep");
    let o = seedpad(&["report", "--records", p(&run.join("records.jsonl")), "--group-by", "type", "--out-dir", p(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = EvalReport::load_json(&rep.join("report.json")).unwrap();
    assert_eq!(report.groups.len(), 1);
    assert_eq!(report.groups[0].key, "type");
    assert_eq!(report.groups[0].rows.iter().map(|r| r.count).sum::<usize>(), 20);
    let records = load_records(&run.join("records.jsonl")).unwrap();
    assert_eq!(report, build_report(&records, &["type".to_string()]));
    assert!(std::fs::read_to_string(rep.join("report.md")).unwrap().contains("## By type"));
}

/// Answers every request with 503.
fn unavailable_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let msg = "busy";
            let _ = write!(
                stream,
                "HTTP/1.1 503 Service Unavailable\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{msg}",
                msg.len()
            );
        }
    });
    url
}

#[test]
fn upstream_exhaustion_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("live.toml");
    std::fs::write(
        &cfg,
        format!(
            "[prompt]\nmode = \"standard_qa\"\nshots = \"zero\"\n\n[client]\nbackend = \"live\"\nbase_url = \"{}\"\n\n[client.retry]\nmax_retries = 1\nbackoff_base_ms = 1\n",
            unavailable_server()
        ),
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = seedpad(&["--config", p(&cfg), "run", "--test", p(&fixtures().join("test.jsonl")), "--out-dir", p(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let records = load_records(&out.join("records.jsonl")).unwrap();
    assert_eq!(records.len(), 20);
    assert!(records.iter().all(|r| !r.correct && r.error.is_some()));
}
