mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{read, tiny_config};
use lupi::formats::{read_json, read_pgm};

fn lupi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lupi"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec(&tiny_config()).unwrap()).unwrap();
    path
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = lupi(&["gen", "--n", "100", "--seed", "7", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    assert_eq!(
        read(&a.join("manifest.json")),
        read(&b.join("manifest.json"))
    );
    let m = lupi::formats::load_manifest(&a.join("manifest.json")).unwrap();
    assert_eq!(
        (m.train_seeds.len(), m.test_seeds.len(), m.split_seed),
        (80, 20, 7)
    );
}

#[test]
fn gen_raw_export() {
    let dir = tempfile::tempdir().unwrap();
    assert!(lupi(&[
        "gen",
        "--n",
        "2",
        "--seed",
        "1",
        "--raw",
        "--out",
        s(dir.path())
    ])
    .status
    .success());
    let sample = dir.path().join("raw/train_00000");
    assert_eq!(read(&sample.join("image_hard.f64")).len(), 3 * 32 * 32 * 8);
    assert_eq!(read(&sample.join("pose.f64")).len(), 63 * 8);
    assert_eq!(read_pgm(&sample.join("mask.pgm")).unwrap().width, 32);
    assert!(sample.join("hard_c2.pgm").exists() && sample.join("priv.pgm").exists());
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let o = lupi(&["gen", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(lupi(&[]).status.code(), Some(1));
    assert_eq!(lupi(&["train"]).status.code(), Some(1));
    assert_eq!(lupi(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = lupi(&["report", "--experiment", s(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("summary.json"));
    let o = lupi(&["train", "--n", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_actmap_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let exp = dir.path().join("exp");
    let o = lupi(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        "3",
        "--lambda",
        "50",
        "--mask-proportion",
        "0.5",
        "--out",
        s(&exp),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved: lupi::lupi_core::train::TrainConfig =
        read_json(&exp.join("config.json")).unwrap();
    assert_eq!(
        (
            resolved.seed,
            resolved.weights.lambda,
            resolved.weights.mask_proportion
        ),
        (3, 50.0, 0.5)
    );
    assert_eq!(resolved.stage1_iters, tiny_config().stage1_iters);

    let o = lupi(&["report", "--experiment", s(&exp)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = |stem: &str| -> Vec<String> {
        let text = String::from_utf8(read(&exp.join(format!("pck_{stem}.csv")))).unwrap();
        assert!(text.starts_with("space,unit,threshold,pck\n"));
        text.lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(grid("baseline").len(), 40);
    assert_eq!(grid("baseline"), grid("pi"));
    assert_eq!(grid("baseline"), grid("teacher"));
    let first = read(&exp.join("comparison.csv"));
    assert!(lupi(&["report", "--experiment", s(&exp)]).status.success());
    assert_eq!(read(&exp.join("comparison.csv")), first);

    let data = dir.path().join("data");
    assert!(lupi(&["gen", "--config", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let manifest = data.join("manifest.json");
    let ckpt = exp.join("checkpoints/student_pi.plck");
    let ev = dir.path().join("eval");
    let o = lupi(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&manifest),
        "--split",
        "test",
        "--out",
        s(&ev),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = String::from_utf8(read(&ev.join("metrics.csv"))).unwrap();
    assert!(metrics.starts_with(
        "model,space,unit,metric,threshold,joint,value\nstudent_pi,3d,normalized,epe_mean,,,"
    ));
    assert!(metrics.contains("student_pi,2d,px,pck,15,,"));

    let o = lupi(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&manifest),
        "--profile",
        "paper",
        "--out",
        s(&ev),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape"));

    let maps = dir.path().join("maps");
    let teacher = exp.join("checkpoints/teacher.plck");
    let args = [
        "actmap",
        "--checkpoint",
        s(&teacher),
        "--data",
        s(&manifest),
        "--count",
        "3",
        "--out",
        s(&maps),
    ];
    assert!(lupi(&args).status.success());
    let img = read_pgm(&maps.join("teacher_002.pgm")).unwrap();
    assert_eq!(img.pixels.len(), 64);
    let again = dir.path().join("maps2");
    let mut args2 = args;
    args2[8] = s(&again);
    assert!(lupi(&args2).status.success());
    assert_eq!(
        read(&maps.join("teacher_002.pgm")),
        read(&again.join("teacher_002.pgm"))
    );
}
