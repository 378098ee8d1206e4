use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vvit(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vvit"))
        .args(args)
        .env("VVIT_OUT_DIR", out_dir)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        std::fs::write(
            f.path("gen.kv"),
            "n_samples = 48\nimage_height = 16\nimage_width = 16\nseed = 5\n",
        )
        .unwrap();
        std::fs::write(
            f.path("model.kv"),
            "image_height = 16\nimage_width = 16\npatch_size = 8\nmodel_dim = 8\nnum_heads = 2\n\
             ffn_dim = 16\nhead_hidden = 8\nencoder_blocks = 1\nnum_cross_blocks = 1\nnum_votes = 4\n",
        )
        .unwrap();
        std::fs::write(f.path("train.kv"), "epochs = 2\nbatch_size = 8\n").unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        vvit(args, self.dir.path())
    }

    fn gen(&self) {
        ok(&self.run(&["gen-data", "--config", &self.s("gen.kv"), "--out", &self.s("data.jsonl")]));
    }

    fn train(&self, out: &str) {
        ok(&self.run(&[
            "train",
            "--data",
            &self.s("data.jsonl"),
            "--model-config",
            &self.s("model.kv"),
            "--train-config",
            &self.s("train.kv"),
            "--out",
            &self.s(out),
        ]));
    }
}

#[test]
fn full_pipeline() {
    let f = Fixture::new();
    f.gen();
    f.train("run");
    for name in ["checkpoint.json", "loss.csv", "split.json"] {
        assert!(f.path("run").join(name).exists(), "{name}");
    }
    let loss = std::fs::read_to_string(f.path("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,l_vote,l_age,l_sex,l_reg,l_wd,total"));
    assert_eq!(loss.lines().count(), 3);

    let eval = |bins: &str, out: &str| {
        f.run(&[
            "eval",
            "--checkpoint",
            &f.s("run/checkpoint.json"),
            "--data",
            &f.s("data.jsonl"),
            "--split",
            &f.s("run/split.json"),
            "--bins",
            bins,
            "--out",
            &f.s(out),
        ])
    };
    let stdout = ok(&eval("10", "eval"));
    let metrics: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(metrics["num_bins"], 10);
    let roc = std::fs::read_to_string(f.path("eval/roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr,threshold\n0,0,inf\n"));

    ok(&eval("1", "eval1"));
    let rel = std::fs::read_to_string(f.path("eval1/reliability.csv")).unwrap();
    assert_eq!(rel.lines().count(), 2);

    let table = ok(&f.run(&["report", "--input", &f.s("eval/metrics.json")]));
    assert!(table.contains("auroc"));

    let attn = ok(&f.run(&[
        "attn",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.jsonl"),
        "--sample-id",
        "s00003",
        "--eye",
        "fellow",
        "--out",
        &f.s("attn/map.csv"),
    ]));
    assert!(attn.contains("disc centre"));
    let grid = std::fs::read_to_string(f.path("attn/map.csv")).unwrap();
    let cells: Vec<f64> = grid
        .lines()
        .flat_map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap()))
        .collect();
    assert_eq!(grid.lines().count(), 2);
    assert_eq!(cells.len(), 4);
    assert!(cells.iter().all(|&c| c >= 0.0) && cells.iter().sum::<f64>() <= 1.0 + 1e-12);
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("attn/map.json")).unwrap()).unwrap();
    assert_eq!(side["eye"], "fellow");
    assert!(side["disc"]["radius"].as_f64().unwrap() > 0.0);
}

#[test]
fn pipeline_is_deterministic() {
    let f = Fixture::new();
    f.gen();
    let first = std::fs::read(f.path("data.jsonl")).unwrap();
    f.gen();
    assert_eq!(first, std::fs::read(f.path("data.jsonl")).unwrap());
    f.train("a");
    f.train("b");
    for name in ["checkpoint.json", "loss.csv", "split.json"] {
        assert_eq!(
            std::fs::read(f.path("a").join(name)).unwrap(),
            std::fs::read(f.path("b").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn ablate_subset_writes_csv() {
    let f = Fixture::new();
    f.gen();
    let stdout = ok(&f.run(&[
        "ablate",
        "--data",
        &f.s("data.jsonl"),
        "--seeds",
        "0,1",
        "--only",
        "0,0,0",
        "--only",
        "1,1,1",
        "--model-config",
        &f.s("model.kv"),
        "--train-config",
        &f.s("train.kv"),
    ]));
    let csv = std::fs::read_to_string(f.path("ablation.csv")).unwrap();
    assert_eq!(csv, stdout);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,0,0,") && rows[2].starts_with("1,1,1,"));
    let table = ok(&f.run(&["report", "--input", &f.s("ablation.csv")]));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn input_errors_exit_with_code_2() {
    let f = Fixture::new();
    let missing = f.run(&["eval", "--checkpoint", &f.s("nope.json"), "--data", &f.s("nope.jsonl")]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));

    std::fs::write(f.path("bad.kv"), "n_samples = many\n").unwrap();
    let bad = f.run(&["gen-data", "--config", &f.s("bad.kv")]);
    assert_eq!(bad.status.code(), Some(2));

    f.gen();
    f.train("run");
    let unknown = f.run(&[
        "attn",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.jsonl"),
        "--sample-id",
        "zzz",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
    let block = f.run(&[
        "attn",
        "--checkpoint",
        &f.s("run/checkpoint.json"),
        "--data",
        &f.s("data.jsonl"),
        "--sample-id",
        "s00001",
        "--block",
        "1",
    ]);
    assert_eq!(block.status.code(), Some(2));
}

#[test]
fn gen_data_defaults_to_out_dir() {
    let f = Fixture::new();
    let stdout = ok(&f.run(&["gen-data", "--config", &f.s("gen.kv"), "--preset", "external"]));
    assert!(stdout.contains("wrote 48 samples"));
    assert!(f.path("dataset.jsonl").exists());
}
