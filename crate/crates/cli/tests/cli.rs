use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdvae_core::corpus::load_motion;
use mdvae_core::denoiser::DenoiserModel;
use mdvae_core::motion_dvae::DvaeModel;
use serde_json::Value;

fn mdvae(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdvae"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mdvae(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny corpus with a noisy twin and rendered detections.
fn corpus(root: &Path) -> (PathBuf, PathBuf) {
    let dir = root.join("corpus");
    ok(&dir, &["gen-corpus", "--n-train", "8", "--n-val", "2", "--n-test", "3", "--sigma", "0.15", "--detections", "--seed", "5"]);
    (dir.join("manifest.json"), dir.join("noisy_sigma0.15/manifest.json"))
}

fn prior(root: &Path, clean: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = root.join(name);
    let mut args = vec!["train-prior", "--corpus", s(clean), "--epochs", "4", "--hidden", "12", "--d-z", "4", "--seed", "2"];
    args.extend_from_slice(extra);
    ok(&out, &args);
    out
}

#[test]
fn end_to_end_pipeline_writes_resolved_configs_and_loadable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (clean, noisy) = corpus(root);
    let manifest = json(clean.clone());
    assert_eq!(manifest["splits"]["train"].as_array().unwrap().len(), 8);

    let p = prior(root, &clean, "prior", &[]);
    let den = root.join("den");
    ok(&den, &["train-denoiser", "--prior", s(&p.join("prior.json")), "--corpus", s(&noisy), "--epochs", "1", "--seed", "2"]);
    let dn = root.join("dn");
    let stdout = ok(&dn, &["denoise", "--model", s(&den.join("denoiser.json")), "--corpus", s(&noisy)]);
    assert!(stdout.contains("s/frame"), "{stdout}");

    for dir in [root.join("corpus"), p.clone(), den.clone(), dn.clone()] {
        assert!(dir.join("resolved_config.json").exists(), "{}", dir.display());
    }
    assert!(p.join("loss.csv").exists() && den.join("loss.csv").exists());

    let metrics = json(dn.join("metrics.json"));
    assert_eq!(metrics["sequences"].as_array().unwrap().len(), 3);
    assert!(metrics["aggregate"]["sec_per_frame"].as_f64().unwrap() > 0.0);
    assert!(dn.join("threshold_report.json").exists());
    for f in std::fs::read_dir(dn.join("denoised/test")).unwrap() {
        let seq = load_motion(&f.unwrap().path()).unwrap();
        assert_eq!(seq.len(), 60);
    }

    // the denoiser checkpoint carries the prior's generative weights unchanged
    let prior_model = DvaeModel::load(&p.join("prior.json")).unwrap();
    DenoiserModel::load(&den.join("denoiser.json")).unwrap().check_frozen(&prior_model).unwrap();

    // a run is reproducible from its resolved config
    let again = root.join("dn2");
    ok(
        &again,
        &["denoise", "--model", s(&den.join("denoiser.json")), "--corpus", s(&noisy), "--config", s(&dn.join("resolved_config.json"))],
    );
    let a = json(dn.join("metrics.json"));
    let b = json(again.join("metrics.json"));
    assert_eq!(a["aggregate"]["v2v_cm"], b["aggregate"]["v2v_cm"]);

    let ev = root.join("ev");
    ok(&ev, &["eval", "--corpus", s(&noisy), "--pred", s(&dn)]);
    assert!(json(ev.join("metrics.json"))["aggregate"]["v2v_cm"].as_f64().unwrap() > 0.0);

    // optimization with zero iterations is regression mode
    let opt0 = root.join("opt0");
    let o = mdvae(&opt0, &["denoise", "--model", s(&den.join("denoiser.json")), "--corpus", s(&noisy), "--mode", "optimization", "--iters", "0"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("zero iterations"));
    assert_eq!(json(opt0.join("metrics.json"))["aggregate"]["v2v_cm"], a["aggregate"]["v2v_cm"]);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (clean, _) = corpus(root);
    let straight = prior(root, &clean, "straight", &[]);
    let first = prior(root, &clean, "first", &["--stop-after", "2"]);
    let resumed = prior(root, &clean, "resumed", &["--resume", s(&first)]);
    let read = |p: PathBuf| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(straight.join("prior.json")), read(resumed.join("prior.json")));
    assert_eq!(read(straight.join("loss.csv")), read(resumed.join("loss.csv")));
}

#[test]
fn trajectory_scenario_recovers_translation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    corpus(root);
    let c = root.join("corpus");
    let fit = root.join("fit");
    for seq in ["seq_0000", "seq_0001", "seq_0002"] {
        let poses = c.join(format!("test/{seq}.json"));
        ok(
            &fit,
            &[
                "fit-trajectory",
                "--detections",
                s(&c.join(format!("detections/test/{seq}.jsonl"))),
                "--camera",
                s(&c.join("camera.json")),
                "--poses",
                s(&poses),
                "--truth",
                s(&poses),
            ],
        );
        let report = json(fit.join("fit_report.json"));
        let max = report["translation_error_max_m"].as_f64().unwrap();
        assert!(max <= 0.01, "{seq}: {max}");
        assert!(report["objective"].as_f64().unwrap() <= report["initial_objective"].as_f64().unwrap());
        load_motion(&fit.join("fitted.json")).unwrap();
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let code = |args: &[&str]| mdvae(&root.join("x"), args).status.code().unwrap();

    // usage
    assert_eq!(code(&["bogus"]), 1);
    let o = mdvae(&root.join("x"), &["gen-corpus", "--kinds", "walk,jump"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("smooth_random"));
    assert_eq!(code(&["gen-corpus", "--sigma", "-1"]), 1);

    // missing prerequisites
    let o = mdvae(&root.join("x"), &["train-denoiser", "--prior", "/no/such/prior.json", "--corpus", "/no/such.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-prior"));

    // malformed detections name their line
    let (_, _) = corpus(root);
    let c = root.join("corpus");
    let dets = c.join("detections/test/seq_0000.jsonl");
    let mut text = std::fs::read_to_string(&dets).unwrap();
    text.push_str("{\"joints\": [[1, 2]]}\n");
    let bad = root.join("bad.jsonl");
    std::fs::write(&bad, text).unwrap();
    let o = mdvae(
        &root.join("fit"),
        &["fit-trajectory", "--detections", s(&bad), "--camera", s(&c.join("camera.json")), "--poses", s(&c.join("test/seq_0000.json"))],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 61"), "{}", String::from_utf8_lossy(&o.stderr));

    // missing camera
    let o = mdvae(
        &root.join("fit"),
        &["fit-trajectory", "--detections", s(&dets), "--camera", "/no/cam.json", "--poses", s(&c.join("test/seq_0000.json"))],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn a_locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("busy");
    std::fs::create_dir_all(&out).unwrap();
    let lock = File::create(out.join(".mdvae.lock")).unwrap();
    lock.lock().unwrap();
    let o = mdvae(&out, &["gen-corpus", "--n-train", "1", "--n-val", "0", "--n-test", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("another mdvae run"));
    drop(lock);
    assert!(mdvae(&out, &["gen-corpus", "--n-train", "1", "--n-val", "0", "--n-test", "0"]).status.success());
}
