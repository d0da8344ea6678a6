use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tnrd::data_terms::ProblemKind;
use tnrd::io::{load_image, save_model};
use tnrd::{Image, Model, RbfSpec};

fn heldout() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/images/heldout")
}

fn tnrd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tnrd")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn null_model_apply_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("null.tnrd");
    save_model(&Model::null(ProblemKind::Denoise { sigma: 25.0 }, 3, 4, RbfSpec::default(), 2).unwrap(), &model).unwrap();
    let out = dir.path().join("out");
    let res = tnrd(&["apply", "--model", s(&model), "--in", s(&heldout()), "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for name in ["brick.pgm", "clock.pgm"] {
        let a = std::fs::read(heldout().join(name)).unwrap();
        let b = std::fs::read(out.join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }

    // Identical directories hit the PSNR cap.
    let report = dir.path().join("r.csv");
    let res = tnrd(&["eval", "--restored-dir", s(&out), "--gt-dir", s(&heldout()), "--report", s(&report)]);
    assert!(res.status.success());
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().next(), Some("image,input_psnr,restored_psnr"));
    assert_eq!(csv.lines().last(), Some("average,,99.0000"));
}

#[test]
fn single_file_apply_and_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.tnrd");
    let init = tnrd::plain_init(ProblemKind::Denoise { sigma: 25.0 }, 3, 4, RbfSpec::default(), 1).unwrap();
    save_model(&init, &model).unwrap();
    let out = dir.path().join("clock.pgm");
    let res = tnrd(&["apply", "--model", s(&model), "--in", s(&heldout().join("clock.pgm")), "--out", s(&out)]);
    assert!(res.status.success());
    assert_eq!(load_image(&out).unwrap().dims(), load_image(heldout().join("clock.pgm")).unwrap().dims());

    let pattern = dir.path().join("p.pgm");
    let res = tnrd(&["synthesize", "--model", s(&model), "--size", "24x16", "--steps", "3", "--out", s(&pattern)]);
    assert!(res.status.success());
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("lag-1 autocorrelation"));
    let img: Image = load_image(&pattern).unwrap();
    assert_eq!(img.dims(), (24, 16));
    assert!(!tnrd(&["synthesize", "--model", s(&model), "--stage", "2", "--out", s(&pattern)]).status.success());
}

#[test]
fn export_writes_montage_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.tnrd");
    save_model(&tnrd::plain_init(ProblemKind::Deblock { quality: 10 }, 3, 2, RbfSpec::default(), 2).unwrap(), &model).unwrap();
    let (grid, csv) = (dir.path().join("f.pgm"), dir.path().join("p.csv"));
    let res = tnrd(&["export", "--model", s(&model), "--filters", s(&grid), "--penalties", s(&csv), "--zoom", "2"]);
    assert!(res.status.success());
    assert_eq!(load_image(&grid).unwrap().dims(), (2 * 7 + 1, 2 * 7 + 1));
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("stage,filter,z,phi,rho\n"));
    assert!(!tnrd(&["export", "--model", s(&model)]).status.success());
}

#[test]
fn gradcheck_command_passes() {
    for problem in ["denoise", "sisr", "deblock"] {
        let res = tnrd(&["gradcheck", "--problem", problem, "--trials", "2", "--stages", "2"]);
        assert!(res.status.success(), "{problem}: {}", String::from_utf8_lossy(&res.stdout));
        assert!(String::from_utf8_lossy(&res.stdout).ends_with("gradient check passed\n"));
    }
}

#[test]
fn bad_input_fails_cleanly() {
    let res = tnrd(&["apply", "--model", "/nonexistent.tnrd", "--in", "x.pgm", "--out", "y.pgm"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).starts_with("error:"));
    let res = tnrd(&["train", "--problem", "denoise", "--param", "17", "--data", "x", "--out", "y"]);
    assert!(!res.status.success());
}
