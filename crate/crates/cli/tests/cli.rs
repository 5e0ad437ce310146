use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stylesplat"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr of {args:?}:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out-dir", p(dir), "--width", "64", "--height", "64", "--train-views", "6", "--test-views", "2"];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.json")
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_twice_gives_identical_trees() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), &["--recolor", "cool"]);
    synth(b.path(), &["--recolor", "cool"]);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(n, _)| n.starts_with("pool")));
    assert_eq!(ta.iter().filter(|(n, _)| n.starts_with("recolor_gt")).count(), 2);
    assert!(ta == tb);
}

#[test]
fn reconstruct_render_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("scene"), &[]);
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--scene", p(&manifest), "--iterations", "150", "--out-dir", p(&rec)]);
    let report = json(&rec.join("reconstruct.json"));
    assert_eq!(report["iterations"], 150);
    assert_eq!(std::fs::read_to_string(rec.join("reconstruct_loss.csv")).unwrap().lines().count(), 151);

    let renders = dir.path().join("renders");
    ok(&["render", "--cloud", p(&rec.join("cloud.ssgc")), "--scene", p(&manifest), "--split", "test", "--depth", "--out-dir", p(&renders)]);
    assert!(renders.join("test_000.f32d").exists());
    let metrics = dir.path().join("metrics");
    let out = ok(&["eval", "--pred", p(&renders), "--target", p(&dir.path().join("scene/images")), "--out-dir", p(&metrics)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
    let evaluated = json(&metrics.join("metrics.json"));
    for (i, img) in evaluated["images"].as_array().unwrap().iter().enumerate() {
        let reported = report["test"][i]["psnr"].as_f64().unwrap();
        assert_eq!(img["name"], report["test"][i]["name"]);
        assert!(img["psnr"].as_f64().unwrap() >= reported - 0.1, "{img} vs {reported}");
    }
}

#[test]
fn random_init_without_seed_cloud() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("scene"), &[]);
    let mut m = json(&manifest);
    m.as_object_mut().unwrap().remove("seed_cloud");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--scene", p(&manifest), "--iterations", "5", "--init-points", "40", "--out-dir", p(&rec)]);
    assert!(json(&rec.join("reconstruct.json"))["points"].as_u64().unwrap() <= 40);
}

#[test]
fn transfer_then_eval_against_recolored_truth() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let manifest = synth(&scene, &["--recolor", "cool"]);
    let gt = scene.join("ground_truth.ssgc");
    let depth = dir.path().join("depth");
    ok(&["train-depth", "--scene", p(&manifest), "--cloud", p(&gt), "--steps", "10", "--out-dir", p(&depth)]);
    let net = depth.join("depth_net.ssnw");
    assert!(net.exists());

    let tr = dir.path().join("transfer");
    ok(&["transfer", "--scene", p(&manifest), "--cloud", p(&gt), "--depth-net", p(&net), "--iterations", "4", "--out-dir", p(&tr)]);
    for f in ["stylized.ssgc", "history.csv", "discriminator.ssnw", "transfer.json"] {
        assert!(tr.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(tr.join("history.csv")).unwrap().lines().count(), 5);

    let renders = dir.path().join("renders");
    ok(&["render", "--cloud", p(&tr.join("stylized.ssgc")), "--scene", p(&manifest), "--split", "test", "--out-dir", p(&renders)]);
    let metrics = dir.path().join("metrics");
    ok(&["eval", "--pred", p(&renders), "--target", p(&scene.join("recolor_gt")), "--pool", p(&scene.join("pool")), "--out-dir", p(&metrics)]);
    let report = json(&metrics.join("metrics.json"));
    assert_eq!(report["images"].as_array().unwrap().len(), 2);
    assert!(report["feature_distance"].as_f64().unwrap() >= 0.0);
}

#[test]
fn exit_codes() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["render", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(run(&["reconstruct", "--scene", p(&missing), "--out-dir", p(dir.path())]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"transfer": {"appearance_lr": -1.0}}"#).unwrap();
    let out = run(&["--config", p(&bad), "gradcheck", "--out-dir", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("appearance_lr"));

    let out = ok(&["gradcheck", "--suite", "layers", "--out-dir", p(dir.path())]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}
