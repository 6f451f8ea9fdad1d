use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use xmalign_core::data::{read_dataset, write_dataset};
use xmalign_core::model::{ClassifierHead, Dense, MlpEncoder};
use xmalign_core::numerics::Matrix;
use xmalign_core::{Checkpoint, ModelState};

fn xmalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmalign"))
        .args(args)
        .output()
        .expect("spawn xmalign")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn write(&self, name: &str, text: &str) -> String {
        fs::write(self.path(name), text).unwrap();
        self.arg(name)
    }
}

const SMALL_DATA: &str = "num_train_identities = 6\nnum_eval_identities = 4\n\
samples_per_identity_per_modality = 6\nface_dim = 8\nvoice_dim = 8\nlatent_dim = 4\n";

const QUICK_TRAIN: &str = "epochs = 3\navg_window = 2\nbatch_size = 16\n\
embedding_dim = 8\nhidden_widths = 16\n";

fn ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", stderr(out));
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gen_small(w: &Work, name: &str) -> String {
    let cfg = w.write("data.cfg", SMALL_DATA);
    ok(&xmalign(&["gen-data", "--config", &cfg, "--out", &w.arg(name)]));
    w.arg(name)
}

fn train_small(w: &Work, data: &str, name: &str, seed: &str) -> String {
    let cfg = w.write("train.cfg", QUICK_TRAIN);
    let out = w.arg(name);
    ok(&xmalign(&[
        "train", "--config", &cfg, "--dataset", data, "--out", &out, "--seed", seed,
    ]));
    out
}

#[test]
fn gen_data_default_writes_dataset_trials_and_manifest() {
    let w = Work::new();
    let out = xmalign(&["gen-data", "--out", &w.arg("d.bin")]);
    ok(&out);
    assert!(stdout(&out).contains("trials heard: targets=400 nontargets=2000"));
    assert!(w.path("d.bin.trials.txt").exists());
    let m = manifest(&w.path("d.bin.manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 0);
    let sha = m["outputs"]["dataset"]["sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    assert!(m["finished_unix_ms"].as_u64().unwrap() >= m["started_unix_ms"].as_u64().unwrap());
    assert!(!w.path("d.bin.manifest.json.tmp").exists());
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let w = Work::new();
    let cfg = w.write("data.cfg", SMALL_DATA);
    for (name, seed) in [("a.bin", "7"), ("b.bin", "7"), ("c.bin", "8")] {
        ok(&xmalign(&["gen-data", "--config", &cfg, "--seed", seed, "--out", &w.arg(name)]));
    }
    let bytes = |n: &str| fs::read(w.path(n)).unwrap();
    assert_eq!(bytes("a.bin"), bytes("b.bin"));
    assert_eq!(bytes("a.bin.trials.txt"), bytes("b.bin.trials.txt"));
    assert_ne!(bytes("a.bin"), bytes("c.bin"));
    let sha = |n: &str| manifest(&w.path(n))["outputs"]["dataset"]["sha256"].clone();
    assert_eq!(sha("a.bin.manifest.json"), sha("b.bin.manifest.json"));
    assert_eq!(manifest(&w.path("a.bin.manifest.json"))["overrides"]["seed"], "7");
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let w = Work::new();
    let cfg = w.write("bad.cfg", "num_train_identities = 5\nmystery_knob = 3\n");
    let out = xmalign(&["gen-data", "--config", &cfg, "--out", &w.arg("d.bin")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("mystery_knob"), "{}", stderr(&out));
    assert!(!w.path("d.bin").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&xmalign(&[])), 2);
    assert_eq!(code(&xmalign(&["train", "--dataset", "x"])), 2);
    assert_eq!(code(&xmalign(&["train", "--dataset", "x", "--out", "y", "--head", "tied"])), 2);
    assert_eq!(code(&xmalign(&["--help"])), 0);
}

#[test]
fn missing_config_file_exits_3() {
    let w = Work::new();
    let out = xmalign(&["gen-data", "--config", &w.arg("nope.cfg"), "--out", &w.arg("d.bin")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_smoke_run_records_overrides_and_feeds_eval() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let cfg = w.write("train.cfg", "epochs = 1\navg_window = 1\nlambda = 2.0\nhead_mode = shared\n");
    let ckpt = w.arg("m.ckpt");
    let out = xmalign(&[
        "train", "--config", &cfg, "--dataset", &data, "--out", &ckpt, "--lambda", "0.25", "--head",
        "separate",
    ]);
    ok(&out);

    let m = manifest(&w.path("m.ckpt.manifest.json"));
    assert_eq!(m["overrides"]["lambda"], "0.25");
    assert_eq!(m["overrides"]["head_mode"], "separate");
    assert!(m["config_file_text"].as_str().unwrap().contains("lambda = 2.0"));
    let resolved = m["resolved_config"].as_str().unwrap();
    assert!(resolved.contains("lambda = 0.25") && resolved.contains("head_mode = separate"));
    assert!(m["inputs"]["dataset"]["sha256"].is_string());

    let log = fs::read_to_string(w.path("m.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,lr,l_face,l_voice,l_align,total"));
    assert_eq!(Checkpoint::load(&w.path("m.ckpt")).unwrap().epoch, 1);

    let out = xmalign(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &w.arg("s.txt")]);
    ok(&out);
    let report = fs::read_to_string(w.path("s.txt.report.txt")).unwrap();
    assert!(report.contains("eer_heard=") && report.contains("overall="));
    assert!(manifest(&w.path("s.txt.manifest.json"))["summary"]["overall"].is_string());
}

#[test]
fn identical_seeds_give_identical_checkpoints_scores_and_reports() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let a = train_small(&w, &data, "a.ckpt", "3");
    let b = train_small(&w, &data, "b.ckpt", "3");
    train_small(&w, &data, "c.ckpt", "4");
    let bytes = |n: &str| fs::read(w.path(n)).unwrap();
    assert_eq!(bytes("a.ckpt"), bytes("b.ckpt"));
    assert_eq!(bytes("a.ckpt.log.csv"), bytes("b.ckpt.log.csv"));
    assert_ne!(bytes("a.ckpt"), bytes("c.ckpt"));
    for (ck, out) in [(&a, "a.txt"), (&b, "b.txt")] {
        ok(&xmalign(&[
            "eval", "--checkpoint", ck, "--dataset", &data, "--out", &w.arg(out), "--system-id", "sys",
        ]));
    }
    assert_eq!(bytes("a.txt"), bytes("b.txt"));
    assert_eq!(bytes("a.txt.report.txt"), bytes("b.txt.report.txt"));
}

#[test]
fn eval_missing_or_corrupt_checkpoint_exits_3() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let out = xmalign(&["eval", "--checkpoint", &w.arg("none.ckpt"), "--dataset", &data, "--out", &w.arg("s.txt")]);
    assert_eq!(code(&out), 3);

    let ckpt = train_small(&w, &data, "m.ckpt", "0");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() - 10);
    fs::write(&ckpt, bytes).unwrap();
    let out = xmalign(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &w.arg("s.txt")]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn eval_with_exported_trial_list_matches_default() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let ckpt = train_small(&w, &data, "m.ckpt", "0");
    let trials = w.arg("d.bin.trials.txt");
    ok(&xmalign(&["eval", "--checkpoint", &ckpt, "--dataset", &data, "--out", &w.arg("a.txt")]));
    ok(&xmalign(&[
        "eval", "--checkpoint", &ckpt, "--dataset", &data, "--trials", &trials, "--out", &w.arg("b.txt"),
    ]));
    assert_eq!(fs::read(w.path("a.txt")).unwrap(), fs::read(w.path("b.txt")).unwrap());
}

#[test]
fn perfect_separation_checkpoint_reports_zero_eer() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let mut dataset = read_dataset(Path::new(&data)).unwrap();
    let dim = 8;
    let classes = dataset.config.num_train_identities;
    let total = classes + dataset.config.num_eval_identities;
    assert!(total <= dim + 2);
    for s in &mut dataset.samples {
        let mut onehot = vec![0.0; dim];
        onehot[s.identity % dim] = 1.0;
        s.face = onehot.clone();
        s.voice = onehot;
    }
    let toy_data = w.path("toy.bin");
    write_dataset(&toy_data, &dataset).unwrap();

    let linear = || {
        MlpEncoder::new(vec![Dense::new(Matrix::identity(dim), Matrix::zeros(1, dim)).unwrap()]).unwrap()
    };
    let head = ClassifierHead::Shared {
        weight: Matrix::zeros(classes, dim),
    };
    let model = ModelState::new(linear(), linear(), head).unwrap();
    let ckpt = w.path("toy.ckpt");
    Checkpoint {
        epoch: 0,
        model,
        config_hash: 0,
    }
    .save(&ckpt)
    .unwrap();

    let out = xmalign(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        toy_data.to_str().unwrap(),
        "--out",
        &w.arg("s.txt"),
    ]);
    ok(&out);
    let report = stdout(&out);
    assert!(report.contains("eer_heard=0.000000"), "{report}");
    assert!(report.contains("eer_unheard=0.000000"), "{report}");
    assert!(report.contains("overall=0.000000"), "{report}");
}

#[test]
fn fuse_requires_two_inputs_and_matching_trials() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let mut scores = Vec::new();
    for seed in ["0", "1", "2"] {
        let ck = train_small(&w, &data, &format!("m{seed}.ckpt"), seed);
        let out = w.arg(&format!("s{seed}.txt"));
        ok(&xmalign(&["eval", "--checkpoint", &ck, "--dataset", &data, "--out", &out]));
        scores.push(out);
    }

    let out = xmalign(&["fuse", &scores[0], "--out", &w.arg("f.txt")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("at least 2"));

    let out = xmalign(&["fuse", &scores[0], &scores[1], &scores[2], "--out", &w.arg("f.txt")]);
    ok(&out);
    assert!(fs::read_to_string(w.path("f.txt")).unwrap().starts_with("# system=fusion"));
    assert!(fs::read_to_string(w.path("f.txt.report.txt")).unwrap().contains("overall="));
    assert_eq!(manifest(&w.path("f.txt.manifest.json"))["inputs"].as_object().unwrap().len(), 3);

    // Relabel one trial of the second file.
    let text = fs::read_to_string(&scores[1]).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let row = lines
        .iter()
        .position(|l| l.starts_with("4 "))
        .expect("row 4");
    lines[row] = if lines[row].contains("nontarget") {
        lines[row].replace("nontarget", "target")
    } else {
        lines[row].replace("target", "nontarget")
    };
    let bad = w.write("bad.txt", &(lines.join("\n") + "\n"));
    let out = xmalign(&["fuse", &scores[0], &bad, "--out", &w.arg("g.txt")]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("trial 4"), "{}", stderr(&out));
}

#[test]
fn numeric_failure_exits_4_with_location() {
    let w = Work::new();
    let data = gen_small(&w, "d.bin");
    let cfg = w.write("train.cfg", "epochs = 2\navg_window = 1\nlr0 = 1e300\n");
    let out = xmalign(&["train", "--config", &cfg, "--dataset", &data, "--out", &w.arg("m.ckpt")]);
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("epoch ") && err.contains(", batch "), "{err}");
    assert!(!w.path("m.ckpt").exists());
}

#[test]
fn gradcheck_default_passes() {
    let out = xmalign(&["gradcheck"]);
    ok(&out);
    let text = stdout(&out);
    assert!(text.contains("checked 100 configurations"), "{text}");
    assert!(text.contains("max relative error"));
}

#[test]
fn gradcheck_detects_injected_fault_and_rejects_zero_trials() {
    let out = xmalign(&["gradcheck", "--trials", "10", "--inject-fault"]);
    assert_ne!(code(&out), 0);
    assert!(stdout(&out).contains("FAIL"));
    assert_eq!(code(&xmalign(&["gradcheck", "--trials", "0"])), 2);
}

#[test]
fn gradcheck_summary_file_and_manifest() {
    let w = Work::new();
    ok(&xmalign(&["gradcheck", "--trials", "5", "--seed", "9", "--out", &w.arg("g.txt")]));
    assert!(fs::read_to_string(w.path("g.txt")).unwrap().contains("checked 5"));
    assert_eq!(manifest(&w.path("g.txt.manifest.json"))["seed"], 9);
}
