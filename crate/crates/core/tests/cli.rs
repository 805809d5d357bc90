use std::path::Path;
use std::process::{Command, Output};

use neft_core::io::{load_checkpoint, load_mask};
use neft_core::{JsonArtifact, ParameterSet, SimilarityReport};

const MODEL: &str = "vocab_size = 64\nd_model = 32\nd_hidden = 16\nn_layers = 2\nn_classes = 3\n";

fn run(dir: &Path, args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neft"))
        .args(args)
        .current_dir(dir)
        .env("NEFT_THREADS", threads)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args, "1");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("model.toml"), MODEL).unwrap();
    let d = dir.path();
    ok(d, &["synth", "--kind", "planted-neurons", "--config", "model.toml", "--model-seed", "3", "--seed", "1",
        "--n", "256", "--out", "train.jsonl", "--reference-out", "ref.ckpt", "--planted-out", "planted.json"]);
    ok(d, &["synth", "--kind", "planted-neurons", "--config", "model.toml", "--model-seed", "3", "--seed", "2",
        "--n", "128", "--out", "eval.jsonl"]);
    dir
}

fn params(path: &Path) -> ParameterSet<f32> {
    load_checkpoint(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn self_diff_scores_are_all_one() {
    let dir = setup();
    let d = dir.path();
    let line = ok(d, &["diff", "--org", "ref.ckpt", "--ft", "ref.ckpt", "--out", "sim.json"]);
    assert!(line.contains("\"hash\""));
    let report = SimilarityReport::from_json(&std::fs::read(d.join("sim.json")).unwrap()).unwrap();
    assert_eq!(report.scores.len(), 2 * (16 + 32));
    assert!(report.scores.iter().all(|&s| s == 1.0));
}

#[test]
fn full_mask_with_unfrozen_embeddings_equals_plain_training() {
    let dir = setup();
    let d = dir.path();
    let train = ["train", "--init", "ref.ckpt", "--data", "train.jsonl", "--seed", "5", "--max-steps", "60"];
    ok(d, &[&train[..], &["--out", "ft.ckpt"]].concat());
    ok(d, &["diff", "--org", "ref.ckpt", "--ft", "ft.ckpt", "--out", "sim.json"]);
    ok(d, &["select", "--report", "sim.json", "--fraction", "1.0", "--out", "all.json"]);
    ok(d, &[&train[..], &["--mask", "all.json", "--unfreeze-embed-head", "--out", "masked.ckpt"]].concat());
    assert_eq!(std::fs::read(d.join("ft.ckpt")).unwrap(), std::fs::read(d.join("masked.ckpt")).unwrap());
}

#[test]
fn planted_pipeline_freezes_unselected_rows() {
    let dir = setup();
    let d = dir.path();
    let base = ["--init", "ref.ckpt", "--data", "train.jsonl", "--seed", "7", "--optimizer", "sgd", "--lr", "0.1"];
    ok(d, &[&["train"][..], &base, &["--max-steps", "800", "--out", "ft.ckpt", "--log", "ft.log.json"]].concat());
    ok(d, &["diff", "--org", "ref.ckpt", "--ft", "ft.ckpt", "--out", "sim.json"]);
    ok(d, &["select", "--report", "sim.json", "--fraction", "0.09", "--out", "mask.json"]);
    ok(d, &[&["train"][..], &base, &["--max-steps", "800", "--mask", "mask.json", "--out", "neft.ckpt"]].concat());

    let mask = load_mask(&std::fs::read(d.join("mask.json")).unwrap()).unwrap();
    assert_eq!(mask.len(), 9);
    let org = params(&d.join("ref.ckpt"));
    let neft = params(&d.join("neft.ckpt"));
    let mut moved = 0;
    for id in org.config.neurons() {
        let same = org.neuron_row(id).unwrap() == neft.neuron_row(id).unwrap();
        if mask.contains(id) {
            moved += usize::from(!same);
        } else {
            assert!(same, "{id} should be frozen");
        }
    }
    assert!(moved > 0);
    assert!(org.embed == neft.embed && org.head == neft.head);

    // The planted rows are what full fine-tuning moved most.
    let ov: serde_json::Value =
        serde_json::from_str(&ok(d, &["overlap", "--a", "mask.json", "--b", "planted.json"])).unwrap();
    assert!(ov["overlap"].as_f64().unwrap() >= 0.5, "{ov}");
    let eval: serde_json::Value = serde_json::from_str(&ok(d, &["eval", "--ckpt", "neft.ckpt", "--data", "eval.jsonl"])).unwrap();
    assert!(eval["accuracy"].as_f64().unwrap() > 0.9, "{eval}");
}

#[test]
fn analysis_commands_chain() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["init", "--config", "model.toml", "--seed", "9", "--out", "other.ckpt"]);
    for (ck, tag) in [("ref.ckpt", "a"), ("other.ckpt", "b")] {
        ok(d, &["trace", "--ckpt", ck, "--data", "eval.jsonl", "--max-tokens", "300", "--out", &format!("t{tag}.json")]);
        ok(d, &["profile", "--trace", &format!("t{tag}.json"), "--out", &format!("p{tag}.json")]);
    }
    ok(d, &["rankdiff", "--a", "pa.json", "--b", "pb.json", "--out", "rd.json", "--plot", "rd.tsv", "--edges", "50,100"]);
    let rd: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("rd.json")).unwrap()).unwrap();
    assert_eq!(rd["buckets"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(d.join("rd.tsv")).unwrap().lines().count() > 1);
    ok(d, &["categorize", "--diff", "rd.json", "--mask", "planted.json", "--threshold", "10", "--out", "cat.json"]);
    ok(d, &["probe-fit", "--ckpt", "ref.ckpt", "--data", "train.jsonl", "--out", "probe.json"]);
    ok(d, &["probe-select", "--ckpt", "ref.ckpt", "--probe", "probe.json", "--k", "4", "--out", "pm.json"]);
    ok(d, &["union", "--a", "pm.json", "--b", "planted.json", "--out", "u.json"]);
    let u = load_mask(&std::fs::read(d.join("u.json")).unwrap()).unwrap();
    assert!(u.len() >= 4);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = setup();
    let d = dir.path();
    let out = run(d, &["frobnicate"], "1");
    assert_eq!(out.status.code(), Some(2));
    let out = run(d, &["select", "--report", "sim.json"], "1");
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    let out = run(d, &["eval", "--ckpt", "missing.ckpt", "--data", "eval.jsonl"], "1");
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1);
    let err: serde_json::Value = serde_json::from_str(&stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());

    // A mask made for another model is rejected.
    ok(d, &["init", "--config", "model.toml", "--seed", "1", "--out", "other.ckpt"]);
    let out = run(d, &["train", "--init", "other.ckpt", "--data", "train.jsonl", "--seed", "1", "--mask", "planted.json", "--out", "x.ckpt"], "1");
    assert_eq!(out.status.code(), Some(1));

    let out = run(d, &["select", "--report", "nothing.json", "--fraction", "1.5", "--out", "m.json"], "1");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = setup();
    let d = dir.path();
    let args = |out: &'static str| {
        ["train", "--init", "ref.ckpt", "--data", "train.jsonl", "--seed", "2", "--max-steps", "50", "--out", out]
    };
    let one = run(d, &args("one.ckpt"), "1");
    let four = run(d, &args("four.ckpt"), "4");
    assert!(one.status.success() && four.status.success());
    assert_eq!(std::fs::read(d.join("one.ckpt")).unwrap(), std::fs::read(d.join("four.ckpt")).unwrap());
    let t1 = run(d, &["trace", "--ckpt", "one.ckpt", "--data", "eval.jsonl", "--out", "t1.json"], "1");
    let t4 = run(d, &["trace", "--ckpt", "one.ckpt", "--data", "eval.jsonl", "--out", "t4.json"], "4");
    assert!(t1.status.success() && t4.status.success());
    assert_eq!(std::fs::read(d.join("t1.json")).unwrap(), std::fs::read(d.join("t4.json")).unwrap());
}

#[test]
fn pipeline_writes_every_artifact_reproducibly() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(
        d.join("pipeline.toml"),
        "output_dir = \"run\"\nseed = 4\ninit_checkpoint = \"ref.ckpt\"\ntrain_data = \"train.jsonl\"\n\
         eval_data = \"eval.jsonl\"\n[selection_train]\nmax_steps = 80\n[train]\nmax_steps = 80\n\
         [selection]\nfraction = 0.1\n[analysis]\nmax_trace_tokens = 400\n",
    )
    .unwrap();
    let first = ok(d, &["pipeline", "--config", "pipeline.toml"]);
    let names = [
        "org.ckpt", "ft.ckpt", "ft.log.json", "similarity.json", "mask.json", "neft.ckpt", "neft.log.json",
        "profile.org.json", "profile.neft.json", "rankdiff.json", "rankdiff.tsv", "categories.json", "pipeline.json",
    ];
    for n in names {
        assert!(d.join("run").join(n).exists(), "{n}");
    }
    let second = ok(d, &["pipeline", "--config", "pipeline.toml"]);
    assert_eq!(first, second);

    std::fs::write(d.join("bad.toml"), "output_dir = \"x\"\nseed = 1\ntrain_data = \"train.jsonl\"\n[selection]\nfraction = 0.1\n").unwrap();
    assert_eq!(run(d, &["pipeline", "--config", "bad.toml"], "1").status.code(), Some(1));
}
