//! Drives the `koopctl` binary end to end on tiny settings.

use std::path::Path;
use std::process::{Command, Output};

fn koopctl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopctl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn koopctl")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = koopctl(dir, args);
    assert!(
        o.status.success(),
        "koopctl {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn unknown_flag_exits_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = koopctl(
        dir.path(),
        &["simulate", "--system", "rigid", "--bogus", "--out", "x"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn config_errors_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.toml", "alpha = 1\n[rigid]\nbeta = 2\n");
    let o = koopctl(
        dir.path(),
        &[
            "simulate", "--system", "rigid", "--config", "bad.toml", "--out", "x",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha") && err.contains("rigid.beta"), "{err}");

    write(dir.path(), "bad.toml", "nt = 0\nn_train = 0\n");
    let o = koopctl(
        dir.path(),
        &[
            "simulate", "--system", "rigid", "--config", "bad.toml", "--out", "x",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nt") && err.contains("n_train"), "{err}");
}

#[test]
fn defaults_render_as_parseable_toml() {
    let dir = tempfile::tempdir().unwrap();
    for (of, system) in [
        ("simulate", "soft"),
        ("train", "rigid-pd"),
        ("control", "soft"),
    ] {
        let text = ok(dir.path(), &["defaults", of, "--system", system]);
        text.parse::<toml::Table>().unwrap();
    }
}

const SIM: &str = "n_train = 300\nn_validation = 40\nn_evaluation = 50\nsteps_per_trajectory = 40\nwindows_per_trajectory = 3\nhorizon = 2\n";
const TRAIN: &str = "epochs = 2\nhidden = [8]\nbatch_size = 64\n";
const CONTROL: &str = "episodes = 5\n[cem]\npopulation = 16\nelites = 4\niterations = 2\n[episode]\nduration_s = 0.5\n";

#[test]
fn pipeline_compare_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "sim.toml", SIM);
    write(d, "train.toml", TRAIN);
    write(d, "control.toml", CONTROL);
    let mut runs = Vec::new();
    for nt in ["1", "3"] {
        let data = format!("data{nt}");
        ok(
            d,
            &[
                "simulate", "--system", "soft", "--config", "sim.toml", "--nt", nt, "--out", &data,
            ],
        );
        for kind in ["dkn", "fcn"] {
            let model = format!("{kind}{nt}");
            ok(
                d,
                &[
                    "train",
                    "--dataset",
                    &data,
                    "--kind",
                    kind,
                    "--config",
                    "train.toml",
                    "--out",
                    &model,
                ],
            );
            let run = format!("run_{kind}{nt}");
            ok(
                d,
                &[
                    "control",
                    "--model",
                    &model,
                    "--config",
                    "control.toml",
                    "--seed",
                    "4",
                    "--out",
                    &run,
                ],
            );
            runs.push(run);
        }
    }
    let mut args = vec!["compare"];
    args.extend(runs.iter().map(String::as_str));
    args.extend(["--out", "cmp"]);
    ok(d, &args);
    let table = std::fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,Nt,mean_error_sum,std,episodes,pairs");
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[1..].iter().all(|l| l.ends_with(",5,1")));

    for dir in ["data3", "dkn3", "fcn1", "run_dkn3", "cmp"] {
        let out = format!("{dir}_again");
        let msg = ok(
            d,
            &["rerun", &format!("{dir}/manifest.json"), "--out", &out],
        );
        assert!(msg.contains("byte-identically"), "{msg}");
    }

    ok(
        d,
        &[
            "analyze",
            "--model",
            "dkn3",
            "--dataset",
            "data3",
            "--grid",
            "-1:1:4,-2:2:3",
            "--out",
            "an",
        ],
    );
    let field = std::fs::read_to_string(d.join("an/field.csv")).unwrap();
    assert_eq!(
        field.lines().filter(|l| !l.starts_with('#')).count(),
        1 + 12
    );
    let o = koopctl(
        d,
        &[
            "analyze",
            "--model",
            "fcn3",
            "--dataset",
            "data3",
            "--out",
            "bad",
        ],
    );
    assert_eq!(o.status.code(), Some(1));

    // a modified input no longer matches its producing manifest
    let ds = d.join("data1/dataset.kds");
    let mut bytes = std::fs::read(&ds).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    std::fs::write(&ds, bytes).unwrap();
    let o = koopctl(
        d,
        &[
            "train",
            "--dataset",
            "data1",
            "--config",
            "train.toml",
            "--out",
            "t",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let o = koopctl(d, &["rerun", "dkn1/manifest.json", "--out", "dkn1_again"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("changed"));
}
