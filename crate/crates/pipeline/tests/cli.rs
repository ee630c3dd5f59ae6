mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_config;

fn inpaint(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inpaint"))
        .args(args)
        .env("INPAINT_OUTPUT_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_cycle_through_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = tiny_config(root);
    cfg.output_dir = "run".into();
    let cfg_path = root.join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let text = ok(&inpaint(root, &["ingest", "-c", c]));
    assert!(text.starts_with("8 utterances"), "{text}");
    let out = root.join("run");
    assert!(out.join("stats.txt").is_file());
    assert_eq!(
        std::fs::read_to_string(out.join("config.sha256")).unwrap().trim(),
        cfg.hash()
    );

    ok(&inpaint(root, &["train-ddpm", "-c", c]));
    ok(&inpaint(root, &["train-ctc", "-c", c]));
    assert!(out.join("denoiser.safetensors").is_file());
    assert!(out.join("classifier.safetensors").is_file());

    let first = ok(&inpaint(root, &["inpaint", "-c", c]));
    let again = ok(&inpaint(root, &["inpaint", "-c", c]));
    assert_eq!(first, again, "same seed and config must reproduce the report");
    let inp = out.join("inpaint");
    for f in ["toy-acb.mel.safetensors", "toy-acb.trace.jsonl", "toy-acb.wav", "report.jsonl", "summary.json"] {
        assert!(inp.join(f).is_file(), "{f}");
    }

    let eval = ok(&inpaint(root, &["evaluate", "-c", c, "--outputs", inp.to_str().unwrap()]));
    assert!(eval.contains("masked_mse"));
    assert!(inp.join("evaluation/report.jsonl").is_file());

    ok(&inpaint(
        root,
        &["grid-search", "-c", c, "--set", "grid.w1=[0.0, 1.0]", "--set", "grid.w2=[0.5, 1.0, 2.0]"],
    ));
    let rows = std::fs::read_to_string(out.join("grid.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 6);
}

#[test]
fn exit_codes_follow_sysexits() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config(root);
    let cfg_path = root.join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let unknown = inpaint(root, &["ingest", "-c", c, "--set", "train.no_such_key=1"]);
    assert_eq!(unknown.status.code(), Some(78));
    let bad_weight = inpaint(root, &["ingest", "-c", c, "--set", "guidance.t_asr_start=99"]);
    assert_eq!(bad_weight.status.code(), Some(78));

    let manifest = root.join("broken.jsonl");
    std::fs::write(
        &manifest,
        r#"{"utterance_id":"x","audio_path":"missing.wav","transcript":"a","duration_s":1.0}"#,
    )
    .unwrap();
    let missing = inpaint(
        root,
        &["ingest", "-c", c, "--set", &format!("data.manifest=\"{}\"", manifest.display())],
    );
    assert_eq!(missing.status.code(), Some(65));

    let no_model = inpaint(root, &["inpaint", "-c", c, "--denoiser", "/nonexistent/model.safetensors"]);
    assert_eq!(no_model.status.code(), Some(74));
}

#[test]
fn desk_writes_a_runnable_setup() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&inpaint(root, &["desk", root.join("d").to_str().unwrap()]));
    let c = root.join("d/desk.toml");
    let text = ok(&inpaint(root, &["ingest", "-c", c.to_str().unwrap()]));
    assert!(text.starts_with("8 utterances"));
}
