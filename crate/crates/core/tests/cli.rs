use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dapd::decode::DecodeTrace;
use serde_json::Value;
use tempfile::TempDir;

fn dapd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A tiny trained checkpoint shared by the model-backed tests in one temp dir.
fn tiny_checkpoint(dir: &TempDir) -> String {
    let data = p(dir, "data.txt");
    let ckpt = p(dir, "model.bin");
    assert_eq!(
        code(&dapd(&["gen-data", "--n", "200", "--seed", "1", "--out", &data])),
        0
    );
    let out = dapd(&[
        "train",
        "--data",
        &data,
        "--seed",
        "1",
        "--out",
        &ckpt,
        "--steps",
        "30",
        "--layers",
        "2",
        "--dim",
        "16",
        "--batch-size",
        "8",
        "--log-every",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ckpt
}

#[test]
fn gen_data_is_deterministic_and_valid() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.txt"), p(&dir, "b.txt"));
    assert_eq!(code(&dapd(&["gen-data", "--n", "50", "--seed", "9", "--out", &a])), 0);
    assert_eq!(code(&dapd(&["gen-data", "--n", "50", "--seed", "9", "--out", &b])), 0);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let v: Vec<u32> = line.split(' ').map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 9);
        for i in 0..4 {
            assert_eq!(v[5 + i], (v[i] + v[i + 1]) % 3);
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        code(&dapd(&["gen-data", "--n", "0", "--seed", "1", "--out", &p(&dir, "x")])),
        1
    );
    assert_eq!(code(&dapd(&["no-such-command"])), 1);
    assert_eq!(
        code(&dapd(&[
            "decode",
            "--oracle",
            "--strategy",
            "bogus",
            "--out",
            &p(&dir, "t")
        ])),
        1
    );
    assert_eq!(code(&dapd(&["oracle", "--observe", "Z9=1", "--out", &p(&dir, "o")])), 1);
}

#[test]
fn io_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "missing.txt");
    let out = dapd(&["train", "--data", &missing, "--seed", "1", "--out", &p(&dir, "m.bin")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_checkpoint_exits_four() {
    let dir = TempDir::new().unwrap();
    let bogus = p(&dir, "bogus.bin");
    fs::write(&bogus, b"NOPE and some bytes").unwrap();
    let out = dapd(&[
        "eval-graph",
        "--ckpt",
        &bogus,
        "--paths",
        "1",
        "--out",
        &p(&dir, "r.json"),
    ]);
    assert_eq!(code(&out), 4);

    let ckpt = tiny_checkpoint(&dir);
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 5);
    let cut = p(&dir, "cut.bin");
    fs::write(&cut, bytes).unwrap();
    let out = dapd(&["decode", "--ckpt", &cut, "--out", &p(&dir, "t.jsonl")]);
    assert_eq!(code(&out), 4);
}

#[test]
fn train_then_eval_graph_and_decode() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let log = fs::read_to_string(Path::new(&ckpt).with_extension("csv")).unwrap();
    assert!(log.starts_with("step,loss\n"));
    assert_eq!(log.lines().count(), 4);

    let report = p(&dir, "graph.json");
    let out = dapd(&[
        "eval-graph",
        "--ckpt",
        &ckpt,
        "--paths",
        "5",
        "--workers",
        "2",
        "--out",
        &report,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&report);
    let steps: Vec<u64> = json["per_step"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, (1..=7).collect::<Vec<_>>());
    assert_eq!(json["paths"], 5);
    for key in ["auc", "ratio", "ovr"] {
        assert!(json["overall"][key].is_number(), "{key}");
    }
    assert!(Path::new(&report).with_extension("csv").exists());

    let traces = p(&dir, "t.jsonl");
    let out = dapd(&["decode", "--ckpt", &ckpt, "--samples", "3", "--out", &traces]);
    assert_eq!(code(&out), 0);
    let lines: Vec<DecodeTrace> = fs::read_to_string(&traces)
        .unwrap()
        .lines()
        .map(|l| DecodeTrace::from_json_line(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for t in &lines {
        assert_eq!(t.final_tokens.len(), 9);
        assert_eq!(t.nfe, t.steps.len());
        assert!(t.nfe <= 9);
    }
}

#[test]
fn eval_graph_is_independent_of_worker_count() {
    let dir = TempDir::new().unwrap();
    let ckpt = tiny_checkpoint(&dir);
    let (a, b) = (p(&dir, "a.json"), p(&dir, "b.json"));
    assert_eq!(
        code(&dapd(&["eval-graph", "--ckpt", &ckpt, "--paths", "6", "--out", &a])),
        0
    );
    assert_eq!(
        code(&dapd(&[
            "eval-graph",
            "--ckpt",
            &ckpt,
            "--paths",
            "6",
            "--workers",
            "3",
            "--out",
            &b
        ])),
        0
    );
    assert_eq!(fs::read_to_string(a).unwrap(), fs::read_to_string(b).unwrap());
}

#[test]
fn oracle_decode_examples() {
    let dir = TempDir::new().unwrap();
    let out_path = p(&dir, "dapd.jsonl");
    assert_eq!(
        code(&dapd(&["decode", "--oracle", "--strategy", "dapd", "--out", &out_path])),
        0
    );
    let t = DecodeTrace::from_json_line(fs::read_to_string(&out_path).unwrap().trim()).unwrap();
    assert_eq!(t.nfe, 3);
    let sets: Vec<Vec<usize>> = t.steps.iter().map(|s| s.unmasked.clone()).collect();
    assert_eq!(sets, vec![vec![1, 3], vec![0, 2, 4], vec![5, 6, 7, 8]]);

    let seq = p(&dir, "seq.jsonl");
    assert_eq!(
        code(&dapd(&[
            "decode",
            "--oracle",
            "--strategy",
            "sequential",
            "--out",
            &seq
        ])),
        0
    );
    let t = DecodeTrace::from_json_line(fs::read_to_string(&seq).unwrap().trim()).unwrap();
    assert_eq!(t.nfe, 9);

    let obs = p(&dir, "obs.jsonl");
    let out = dapd(&[
        "decode",
        "--oracle",
        "--observe",
        "X1=1,X2=2",
        "--committer",
        "sample",
        "--out",
        &obs,
    ]);
    assert_eq!(code(&out), 0);
    let t = DecodeTrace::from_json_line(fs::read_to_string(&obs).unwrap().trim()).unwrap();
    assert_eq!(&t.final_tokens[..2], &[1, 2]);
    assert_eq!(t.final_tokens[5], 0);
}

#[test]
fn compare_on_the_oracle() {
    let dir = TempDir::new().unwrap();
    let report = p(&dir, "cmp.json");
    let traces = p(&dir, "cmp.jsonl");
    let out = dapd(&[
        "compare",
        "--oracle",
        "--strategies",
        "sequential,fullparallel,dapd",
        "--committer",
        "sample",
        "--samples",
        "200",
        "--workers",
        "2",
        "--out",
        &report,
        "--traces",
        &traces,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json = read_json(&report);
    let rows = json["strategies"].as_array().unwrap();
    let get = |name: &str| rows.iter().find(|r| r["strategy"] == name).unwrap().clone();
    assert_eq!(get("sequential")["validity"], 1.0);
    assert_eq!(get("sequential")["mean_nfe"], 9.0);
    assert_eq!(get("dapd")["validity"], 1.0);
    assert_eq!(get("dapd")["mean_nfe"], 3.0);
    assert_eq!(get("fullparallel")["mean_nfe"], 1.0);
    assert!(get("fullparallel")["validity"].as_f64().unwrap() < 0.1);
    assert!(get("dapd")["tv"].is_number());
    assert_eq!(fs::read_to_string(&traces).unwrap().lines().count(), 600);
    let csv = fs::read_to_string(Path::new(&report).with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn oracle_command_examples() {
    let dir = TempDir::new().unwrap();
    let m = p(&dir, "m.csv");
    assert_eq!(code(&dapd(&["oracle", "--mode", "marginals", "--out", &m])), 0);
    let text = fs::read_to_string(&m).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        let probs: Vec<f64> = r.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        for q in probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    let mi = p(&dir, "mi.csv");
    assert_eq!(
        code(&dapd(&["oracle", "--mode", "mi", "--observe", "X2=1", "--out", &mi])),
        0
    );
    let text = fs::read_to_string(&mi).unwrap();
    let table: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(table.len(), 8);
    for (i, row) in table.iter().enumerate() {
        assert_eq!(row.len(), 8);
        for (j, v) in row.iter().enumerate() {
            assert!((v - table[j][i]).abs() < 1e-12);
        }
    }

    let z = p(&dir, "z.csv");
    let out = dapd(&[
        "oracle",
        "--mode",
        "marginals",
        "--observe",
        "X1=0,X2=1,Y1=2",
        "--out",
        &z,
    ]);
    assert_eq!(code(&out), 5);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero support"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "run.cfg");
    let out_path = p(&dir, "t.jsonl");
    fs::write(
        &cfg,
        format!("# decode settings\nstrategy=sequential\nsamples=2\noracle=true\nout={out_path}\n"),
    )
    .unwrap();

    assert_eq!(code(&dapd(&["decode", "--config", &cfg])), 0);
    let lines: Vec<String> = fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(DecodeTrace::from_json_line(&lines[0]).unwrap().nfe, 9);

    assert_eq!(
        code(&dapd(&[
            "decode",
            "--config",
            &cfg,
            "--strategy",
            "dapd",
            "--samples",
            "1"
        ])),
        0
    );
    let lines: Vec<String> = fs::read_to_string(&out_path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(DecodeTrace::from_json_line(&lines[0]).unwrap().nfe, 3);

    fs::write(&cfg, "no_such_flag=1\n").unwrap();
    assert_eq!(
        code(&dapd(&["decode", "--oracle", "--config", &cfg, "--out", &out_path])),
        1
    );
    assert_eq!(
        code(&dapd(&[
            "decode",
            "--oracle",
            "--config",
            &p(&dir, "absent.cfg"),
            "--out",
            &out_path
        ])),
        2
    );
}

#[test]
fn help_lists_defaults() {
    let out = dapd(&["compare", "--help"]);
    assert_eq!(code(&out), 0);
    let help = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "--tau-min",
        "0.01",
        "--tau-max",
        "0.05",
        "--conf-thresh",
        "0.9",
        "--switch-mask-ratio",
        "0.5",
    ] {
        assert!(help.contains(needle), "{needle}");
    }
}
