//! Runs the `catgen` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn catgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catgen"))
        .args(args)
        .env_remove("CATGEN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "synth",
        "--out-dir",
        out,
        "--set",
        "synth.n_genes=12",
        "--set",
        "synth.n_spots=10",
        "--set",
        "synth.n_cells=20",
        "--set",
        "synth.n_chains=2",
        "--set",
        "synth.chain_len=3",
    ];
    args.extend_from_slice(extra);
    catgen(&args)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&catgen(&["--help"])), 0);
    assert_eq!(code(&catgen(&["mask", "--help"])), 0);
    assert_eq!(code(&catgen(&[])), 1);
    assert_eq!(code(&catgen(&["frobnicate"])), 1);
    assert_eq!(
        code(&catgen(&["mask", "--s", "x", "--c", "1", "--sz", "1"])),
        1
    );
    assert_eq!(
        code(&catgen(&["ablate", "--axis", "depth", "--out", "x.csv"])),
        1
    );
}

#[test]
fn bad_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    let out = dir.path().join("r.csv");
    let o = catgen(&[
        "granger",
        "--matrix",
        missing.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!o.stderr.is_empty());

    // Group sizes that do not sum to s.
    assert_eq!(
        code(&catgen(&["mask", "--s", "4", "--c", "1", "--sz", "1,2"])),
        2
    );
}

#[test]
fn mask_prints_a_blocked_matrix() {
    let o = catgen(&["mask", "--s", "5", "--c", "3", "--sz", "2,1,2"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    // c + visible + s = 3 + 3 + 5 tokens.
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.split(',').count() == 11));
    assert!(rows
        .iter()
        .all(|r| r.split(',').all(|v| v == "0" || v == "1")));
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| -> String {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_catgen"));
        cmd.env_remove("CATGEN_SEED");
        if let Some(v) = env {
            cmd.env("CATGEN_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        cmd.args([
            "synth",
            "--out-dir",
            out.to_str().unwrap(),
            "--set",
            "synth.n_genes=4",
        ]);
        cmd.args(["--set", "synth.n_chains=1", "--set", "synth.chain_len=2"]);
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(out.join("st.csv")).unwrap()
    };
    let default = run("a", None, None);
    let explicit = run("b", None, Some("42"));
    let env7 = run("c", Some("7"), None);
    let flag7 = run("d", Some("99"), Some("7"));
    assert_eq!(default, explicit);
    assert_eq!(env7, flag7);
    assert_ne!(default, env7);
}

#[test]
fn train_generate_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    assert_eq!(code(&synth(dir.path(), &[])), 0);
    for f in ["st.csv", "sc.csv", "edges.csv"] {
        assert!(dir.path().join(f).exists());
    }

    let o = catgen(&[
        "train",
        "--st",
        &p("st.csv"),
        "--sc",
        &p("sc.csv"),
        "--out",
        &p("m.catg"),
        "--set",
        "model.d_model=16",
        "--set",
        "model.hidden=32",
        "--set",
        "model.blocks=1",
        "--set",
        "diffusion.steps=50",
        "--set",
        "train.epochs=2",
        "--set",
        "train.ae_steps=10",
        "--split-out",
        &p("split.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("history.csv").exists());
    let split = fs::read_to_string(p("split.csv")).unwrap();
    assert_eq!(split.lines().count(), 1 + 12);

    let genes: String = (0..12).map(|i| format!("G{i:04}\n")).collect();
    fs::write(p("genes.txt"), genes).unwrap();

    let o = catgen(&[
        "generate",
        "--ckpt",
        &p("m.catg"),
        "--sc",
        &p("sc.csv"),
        "--genes",
        &p("genes.txt"),
        "--out",
        &p("pred.csv"),
        "--sampling",
        "frac:5",
        "--latents",
        &p("lat.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("lat.csv").exists());

    let o = catgen(&[
        "eval",
        "--pred",
        &p("pred.csv"),
        "--truth",
        &p("st.csv"),
        "--out",
        &p("scores.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scores = fs::read_to_string(p("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "gene_id,pcc,ssim,rmse,js");
    // One row per gene plus mean and variance.
    assert_eq!(lines.len(), 1 + 12 + 2);
    assert!(lines[lines.len() - 2].starts_with("mean,"));

    // A checkpoint that is not one.
    let o = catgen(&[
        "generate",
        "--ckpt",
        &p("st.csv"),
        "--sc",
        &p("sc.csv"),
        "--genes",
        &p("genes.txt"),
        "--out",
        &p("bad.csv"),
    ]);
    assert_eq!(code(&o), 2);
}
