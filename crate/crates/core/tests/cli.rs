use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use winrag::fixtures::{answer_for, build_fixture, page_id, FixtureSpec};

const BIN: &str = env!("CARGO_BIN_EXE_winrag");

struct Workspace {
    dir: tempfile::TempDir,
    recall_at_20: f64,
}

impl Workspace {
    /// 12 examples over 40 pages; example 11 has no relevant page.
    fn new() -> Self {
        let mut ranks: Vec<Vec<usize>> = (0..11).map(|i| vec![(i * 7) % 40]).collect();
        ranks.push(vec![]);
        let fx = build_fixture(
            &FixtureSpec {
                pages: 40,
                relevant_ranks: ranks,
                gold_ids: false,
            },
            None,
        );
        let dir = tempfile::tempdir().unwrap();
        fx.write_to(dir.path()).unwrap();
        let mut pool = String::new();
        for i in 0..4 {
            let r = fx.relevant_ranks[i][0];
            pool.push_str(&format!(
                "{{\"question\":\"Where is topic q{i:05}?\",\"page_ids\":[\"{}\"],\"kind\":\"positive\",\"reasoning\":\"The page lists {}.\",\"answer\":\"{}\"}}\n",
                page_id(r),
                answer_for(i),
                answer_for(i)
            ));
        }
        for r in [1, 2, 3, 4] {
            pool.push_str(&format!(
                "{{\"question\":\"Where is topic q00099?\",\"page_ids\":[\"{}\"],\"kind\":\"negative\",\"reasoning\":\"No page lists it.\",\"answer\":\"answer not found\"}}\n",
                page_id(r)
            ));
        }
        fs::write(dir.path().join("shots.jsonl"), pool).unwrap();
        Self {
            recall_at_20: fx.expected_recall(20),
            dir,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .current_dir(self.dir.path())
            .env_remove("WINRAG_API_TOKEN")
            .args(args)
            .output()
            .unwrap()
    }

    fn data_args(&self) -> Vec<&'static str> {
        vec![
            "--corpus",
            "corpus.jsonl",
            "--dataset",
            "dataset.jsonl",
            "--vocab",
            "vocab.txt",
            "--index",
            "index",
        ]
    }

    fn build(&self) {
        let mut args = vec!["build-index"];
        args.extend(self.data_args());
        let out = self.run(&args);
        assert!(out.status.success(), "{}", stderr(&out));
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![sub];
        args.extend(self.data_args());
        args.extend(extra);
        self.run(&args)
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn log_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn printed(out: &Output, key: &str) -> f64 {
    let text = stdout(out);
    let field = text
        .split_whitespace()
        .find_map(|t| t.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"));
    field.parse().unwrap()
}

#[test]
fn build_index_writes_manifest_and_refuses_overwrite() {
    let ws = Workspace::new();
    let mut args = vec!["build-index"];
    args.extend(ws.data_args());
    let out = ws.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("indexed 40 pages"));
    assert!(ws.path("index/manifest.json").exists());

    let again = ws.run(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));

    args.push("--force");
    assert!(ws.run(&args).status.success());
}

#[test]
fn missing_vocab_is_named() {
    let ws = Workspace::new();
    let out = ws.run(&[
        "build-index",
        "--corpus",
        "corpus.jsonl",
        "--vocab",
        "nope.txt",
        "--index",
        "index",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.txt"), "{}", stderr(&out));
}

#[test]
fn oracle_run_em_equals_recall() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("run", &["--top-k", "20", "--window-size", "5", "--backend", "oracle"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!((printed(&out, "em") - ws.recall_at_20).abs() < 1e-4);
    let log = log_lines(&ws.path("out/run.jsonl"));
    assert_eq!(log.len(), 12);
    let csv = fs::read_to_string(ws.path("out/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn fixed_mode_makes_single_step_records() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("run", &["--mode", "fixed", "--fixed-size", "5", "--top-k", "40"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for rec in log_lines(&ws.path("out/run.jsonl")) {
        let steps = rec["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0]["pageIds"].as_array().unwrap().len(), 5);
        assert_eq!(rec["mode"], "fixed");
    }
}

#[test]
fn backward_order_starts_from_the_lowest_scores() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("run", &["--order", "backward", "--window-size", "10", "--top-k", "40"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = log_lines(&ws.path("out/run.jsonl"));
    let first = &log[0]["steps"][0];
    assert_eq!(first["windowOrdinal"], 0);
    let ids: Vec<&str> = first["pageIds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let expected: Vec<String> = (30..40).rev().map(page_id).collect();
    assert_eq!(ids, expected);
}

#[test]
fn shots_ablation_has_five_rows() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd(
        "ablate",
        &[
            "--axis",
            "shots",
            "--values",
            "0,2,4,6,8",
            "--exemplars",
            "shots.jsonl",
            "--top-k",
            "20",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("out/ablation_shots.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    // mocks ignore the shots, so EM is identical on every row
    let em: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(2).unwrap()).collect();
    assert!(em.iter().all(|e| *e == em[0]));
    assert!(ws.path("out/ablation_shots.txt").exists());
}

#[test]
fn window_size_ablation_and_bad_axis() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("ablate", &["--axis", "window-size", "--values", "20,60,100"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(ws.path("out/ablation_window_size.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    let bad = ws.cmd("ablate", &["--axis", "depth", "--values", "1"]);
    assert_eq!(bad.status.code(), Some(1));
    let msg = stderr(&bad);
    for axis in ["window-size", "order", "shots", "fixed-size"] {
        assert!(msg.contains(axis), "{msg}");
    }
}

#[test]
fn negatives_with_oracle_reject_everything() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("negatives", &["--window-size", "5", "--top-k", "40"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(printed(&out, "rejection_accuracy"), 1.0);
}

#[test]
fn negatives_without_eligible_examples_fail() {
    let ws = Workspace::new();
    ws.build();
    // one window of 40 pages holds the relevant page for all but the last example
    let dataset = fs::read_to_string(ws.path("dataset.jsonl")).unwrap();
    let first_only: String = dataset.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(ws.path("dataset.jsonl"), first_only).unwrap();
    let out = ws.cmd("negatives", &["--window-size", "40", "--top-k", "40"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("0 eligible"), "{}", stderr(&out));
}

#[test]
fn unreachable_endpoint_exits_2() {
    let ws = Workspace::new();
    ws.build();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let endpoint = format!("http://127.0.0.1:{port}/generate");
    let out = ws.cmd(
        "run",
        &[
            "--backend",
            "http",
            "--endpoint",
            &endpoint,
            "--retries",
            "0",
            "--top-k",
            "5",
        ],
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("unreachable"));
}

#[test]
fn config_file_paths_are_relative_to_the_file_and_flags_win() {
    let ws = Workspace::new();
    ws.build();
    let conf_dir = ws.path("conf");
    fs::create_dir(&conf_dir).unwrap();
    fs::write(
        conf_dir.join("winrag.toml"),
        "[paths]\ncorpus = \"../corpus.jsonl\"\ndataset = \"../dataset.jsonl\"\nvocab = \"../vocab.txt\"\nindex = \"../index\"\nout = \"../cfg-out\"\n\n[run]\nwindow_size = 3\ntop_k = 20\n\n[backend]\nkind = \"oracle\"\n",
    )
    .unwrap();
    let other = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .current_dir(other.path())
        .args(["run", "--config"])
        .arg(conf_dir.join("winrag.toml"))
        .args(["--window-size", "4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let log = log_lines(&ws.path("cfg-out/run.jsonl"));
    let first = log[0]["steps"][0]["pageIds"].as_array().unwrap();
    assert_eq!(first.len(), 4);
}

#[test]
fn report_rescores_a_run_log() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd(
        "run",
        &["--top-k", "20", "--backend", "hallucinator", "--window-size", "4"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let first = fs::read(ws.path("out/report.csv")).unwrap();
    fs::remove_file(ws.path("out/report.csv")).unwrap();
    let rep = ws.run(&["report", "--dataset", "dataset.jsonl", "--log", "out/run.jsonl"]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    assert_eq!(fs::read(ws.path("out/report.csv")).unwrap(), first);
}

#[test]
fn retrieve_prints_ranked_pages() {
    let ws = Workspace::new();
    ws.build();
    let out = ws.cmd("retrieve", &["--question-id", "q00003", "--top-k", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with(&format!("0\t{}\t", page_id(0))));
}
