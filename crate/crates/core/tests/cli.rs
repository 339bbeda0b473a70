use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};

fn samda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samda")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(path: &Path, v: &Value) -> String {
    std::fs::write(path, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_model() -> Value {
    json!({
        "image_size": 32, "patch_size": 8, "enc_dim": 16, "enc_depth": 2, "enc_heads": 2,
        "dec_dim": 16, "dec_depth": 2, "dec_heads": 2, "num_mask_tokens": 1, "seed": 0
    })
}

fn small_adapter() -> Value {
    json!({ "n_prompts": 2, "d_a": 8, "d_k": 8, "d_v": 8 })
}

fn data_config() -> Value {
    json!({
        "version": 1, "image_size": 32, "slices_per_volume": 4,
        "sizes": { "source_train": 8, "source_val": 4, "source_test": 4, "target_val": 4, "target_test": 4 }
    })
}

/// Shared fixture: a generated dataset plus a `full_ft` run to adapt from.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> String {
        self.root.join("data").to_str().unwrap().into()
    }
    fn base(&self) -> PathBuf {
        self.root.join("base/model.sdck")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let dc = write(&root.join("data.json"), &data_config());
        let o = samda(&["gen-data", "--config", &dc, "--out", root.join("data").to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let tc = write(
            &root.join("base.json"),
            &json!({ "version": 1, "method": "full_ft", "model": small_model(), "epochs": 1 }),
        );
        let o = samda(&["train", "--config", &tc, "--data", root.join("data").to_str().unwrap(), "--out", root.join("base").to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Fixture { _dir: dir, root }
    })
}

#[test]
fn train_eval_report_round() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let tc = write(
        &dir.path().join("train.json"),
        &json!({
            "version": 1, "method": "sam_da_dec", "model": small_model(), "adapter": small_adapter(),
            "epochs": 1, "base_checkpoint": f.base()
        }),
    );
    let run = dir.path().join("run");
    let o = samda(&["train", "--config", &tc, "--data", &f.data(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("sam_da_dec"));
    assert!(run.join("model.sdck").exists() && run.join("model.sdck.json").exists());

    let rep = dir.path().join("eval.json");
    let ck = run.join("model.sdck");
    let o = samda(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--data", &f.data(), "--domain", "target", "--split", "test",
        "--report", rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(v["method"], "sam_da_dec");
    assert_eq!(v["result"]["ious"].as_array().unwrap().len(), 4);
    assert!(v["trainable_params"].as_u64().unwrap() < v["total_params"].as_u64().unwrap());

    let o = samda(&["report", "--run", run.to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&o), 0);
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["rows"][0]["label"], "sam_da_dec");
    let o = samda(&["report", "--run", run.to_str().unwrap(), "--format", "table"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("sam_da_dec"));

    // A fragment whose stored mean disagrees with its per-image IoUs is an
    // integrity failure.
    let frag_dir = run.join("fragments");
    let frag = std::fs::read_dir(&frag_dir).unwrap().next().unwrap().unwrap().path();
    let mut v: Value = serde_json::from_slice(&std::fs::read(&frag).unwrap()).unwrap();
    let d = v["domains"]["source"]["mean"].as_f64().unwrap();
    v["domains"]["source"]["mean"] = json!(d + 0.25);
    write(&frag, &v);
    assert_eq!(code(&samda(&["report", "--run", run.to_str().unwrap()])), 2);
}

#[test]
fn ttda_writes_a_report() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("ttda.json"),
        &json!({ "version": 1, "adapter": small_adapter(), "iterations": 2, "domain": "target", "split": "test" }),
    );
    let rep = dir.path().join("ttda_report.json");
    let o = samda(&[
        "ttda", "--checkpoint", f.base().to_str().unwrap(), "--data", &f.data(), "--config", &cfg, "--report",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(v["result"]["samples"].as_array().unwrap().len(), 4);
}

#[test]
fn ablation_over_sizes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("exp.json"),
        &json!({
            "version": 1, "data_dir": f.data(),
            "train": { "version": 1, "model": small_model(), "adapter": small_adapter(), "epochs": 1 },
            "base_epochs": 1, "seeds": [0, 1], "adapter_sizes": [4, 8]
        }),
    );
    let out = dir.path().join("abl");
    let o = samda(&["ablate", "--axis", "size", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let labels: Vec<&str> = r["rows"].as_array().unwrap().iter().map(|x| x["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["sam_da_dec d_a=4", "sam_da_dec d_a=8"]);
    assert_eq!(r["fragments"].as_array().unwrap().len(), 4);
    assert_eq!(r["t_tests"].as_array().unwrap().len(), 2);

    let o = samda(&["ablate", "--axis", "depth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn paramcount_reports_both_figures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("t.json"), &json!({ "version": 1 }));
    let o = samda(&["paramcount", "--config", &cfg]);
    assert_eq!(code(&o), 0);
    let s = stdout(&o);
    for m in ["sam_da_dec", "sam_da_enc", "decoder_ft", "full_ft", "lora"] {
        assert!(s.contains(m), "{s}");
    }
    assert!(s.contains("922114 closed form, 922114 registry"), "{s}");
    assert!(s.contains("0.66M"), "{s}");
    assert!(s.contains("note:"), "{s}");
}

#[test]
fn validation_errors_exit_one() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = p.join("o");
    let out = out.to_str().unwrap();

    let bad_version = write(&p.join("v.json"), &json!({ "version": 99 }));
    assert_eq!(code(&samda(&["train", "--config", &bad_version, "--data", &f.data(), "--out", out])), 1);

    let unknown = write(&p.join("u.json"), &json!({ "version": 1, "epoch": 3 }));
    assert_eq!(code(&samda(&["train", "--config", &unknown, "--data", &f.data(), "--out", out])), 1);

    let no_base = write(&p.join("n.json"), &json!({ "version": 1, "method": "sam_da_dec", "model": small_model() }));
    assert_eq!(code(&samda(&["train", "--config", &no_base, "--data", &f.data(), "--out", out])), 1);

    let missing_base = write(
        &p.join("m.json"),
        &json!({ "version": 1, "method": "sam_da_dec", "model": small_model(), "base_checkpoint": p.join("none.sdck") }),
    );
    assert_eq!(code(&samda(&["train", "--config", &missing_base, "--data", &f.data(), "--out", out])), 1);

    assert_eq!(code(&samda(&["frobnicate"])), 1);
    assert_eq!(code(&samda(&["train", "--config"])), 1);
    assert_eq!(code(&samda(&["--help"])), 0);

    let rep = p.join("r.json");
    let o = samda(&[
        "eval", "--checkpoint", f.base().to_str().unwrap(), "--data", &f.data(), "--domain", "nowhere", "--report",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn damaged_artifacts_exit_two() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let rep = p.join("r.json");

    let ck = p.join("cut.sdck");
    let bytes = std::fs::read(f.base()).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() - 3]).unwrap();
    std::fs::copy(f.root.join("base/model.sdck.json"), p.join("cut.sdck.json")).unwrap();
    let o = samda(&[
        "eval", "--checkpoint", ck.to_str().unwrap(), "--data", &f.data(), "--domain", "source", "--report",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    // Copy the dataset and truncate one sample file.
    let data = p.join("data");
    copy_dir(Path::new(&f.data()), &data);
    let victim = walk(&data).into_iter().find(|x| x.extension().is_some_and(|e| e == "sdim") && x.to_str().unwrap().contains("target")).unwrap();
    let b = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &b[..b.len() / 2]).unwrap();
    let o = samda(&[
        "eval", "--checkpoint", f.base().to_str().unwrap(), "--data", data.to_str().unwrap(), "--domain", "target",
        "--report", rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn copy_dir(from: &Path, to: &Path) {
    for p in walk(from) {
        let dst = to.join(p.strip_prefix(from).unwrap());
        std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
        std::fs::copy(&p, &dst).unwrap();
    }
}
