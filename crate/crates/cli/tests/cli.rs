//! End-to-end runs of the `esrie` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esrie_core::checkpoint::{self, Checkpoint};
use esrie_core::image::read_image;
use esrie_core::net::build_seeded;

fn esrie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esrie")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

/// Runs a command with its own `out_dir` and returns the run directory.
fn run(root: &Path, tag: &str, args: &[&str]) -> PathBuf {
    let out = root.join(tag);
    let mut full: Vec<&str> = args.to_vec();
    let out_s = out.to_str().unwrap().to_string();
    full.extend(["--out-dir", &out_s]);
    let o = esrie(&full);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    let dirs: Vec<PathBuf> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

/// File name to contents, without the resolved config (which records the
/// thread count).
fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "config.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn seeded_checkpoint(dir: &Path) -> PathBuf {
    let p = dir.join("seeded.esnn");
    checkpoint::save(&Checkpoint::Float(build_seeded(12)), &p).unwrap();
    p
}

#[test]
fn phantom_and_simulate_are_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = run(t.path(), "p1", &["phantom"]);
    let b = run(t.path(), "p2", &["phantom"]);
    assert_eq!(artifacts(&a), artifacts(&b));
    assert!(a.join("rois.txt").exists() && a.join("phantom.pgm").exists());

    let one = run(t.path(), "s1", &["simulate", "--k", "2", "--seed", "3", "--threads", "1"]);
    let two = run(t.path(), "s2", &["simulate", "--k", "2", "--seed", "3", "--threads", "3"]);
    let (x, y) = (artifacts(&one), artifacts(&two));
    assert!(x.keys().any(|k| k.starts_with("realization_001")));
    assert_eq!(x, y);
    let other = run(t.path(), "s3", &["simulate", "--k", "2", "--seed", "4"]);
    assert_ne!(artifacts(&other)["realization_000.raw"], x["realization_000.raw"]);
}

#[test]
fn train_quantize_infer_ignore_thread_count() {
    let t = tempfile::tempdir().unwrap();
    let small = ["--sources", "2", "--source-size", "64"];
    let mut outs = Vec::new();
    for threads in ["1", "2"] {
        let mut args = vec!["train", "despeckle", "--epochs", "1", "--pairs-per-source", "2", "--patch-size", "32"];
        args.extend(["--batch-size", "2", "--threads", threads]);
        args.extend(small);
        let tr = run(t.path(), &format!("train{threads}"), &args);
        let model = tr.join("model.esnn");
        let model_s = model.to_str().unwrap();
        let mut args = vec!["quantize", "--model", model_s, "--calib-count", "2", "--threads", threads];
        args.extend(small);
        let q = run(t.path(), &format!("quant{threads}"), &args);
        let qm = q.join("model_int8.esnn");
        let img = t.path().join("input.pgm");
        if !img.exists() {
            let p = run(t.path(), "phantom", &["phantom"]);
            fs::copy(p.join("phantom.pgm"), &img).unwrap();
        }
        let args = [
            "infer",
            "--model",
            qm.to_str().unwrap(),
            "--precision",
            "int8",
            "--input",
            img.to_str().unwrap(),
            "--threads",
            threads,
        ];
        let inf = run(t.path(), &format!("infer{threads}"), &args);
        outs.push((artifacts(&tr), artifacts(&q), artifacts(&inf)));
    }
    assert_eq!(outs[0], outs[1]);
    assert!(outs[0].1.contains_key("model_int8.esnn"));
}

#[test]
fn fused_inference_is_the_branch_composition() {
    let t = tempfile::tempdir().unwrap();
    let model = seeded_checkpoint(t.path());
    let m = model.to_str().unwrap();
    let p = run(t.path(), "phantom", &["phantom"]);
    let input = p.join("phantom.pgm");
    let infer = |tag: &str, branch: &str, input: &Path| {
        let args = ["infer", "--model", m, "--branch", branch, "--input", input.to_str().unwrap()];
        read_image(&run(t.path(), tag, &args).join("phantom.pgm")).unwrap()
    };
    let fused = infer("fused", "fused", &input);
    let desp = infer("desp", "despeckle", &input);
    let staged = t.path().join("staged");
    fs::create_dir_all(&staged).unwrap();
    esrie_core::image::write_image(&desp, &staged.join("phantom.pgm")).unwrap();
    let composed = infer("deblur", "deblur", &staged.join("phantom.pgm"));
    // the staged run stores the intermediate image as 8-bit, the fused run
    // does not, so allow one gray level
    let worst = fused.data().iter().zip(composed.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    assert!(worst <= 1.0, "{worst}");
}

#[test]
fn eval_table_properties() {
    let t = tempfile::tempdir().unwrap();
    let dir = run(t.path(), "eval", &["eval", "--methods", "input,lee,srad", "--srad-iterations", "5"]);
    let csv = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "image,method,cnr,ssnr,enl,agm,ssim,params,flops,fps");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        let (ssnr, enl): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        // six decimals in the file
        assert!((enl - ssnr * ssnr).abs() <= 1e-5 * (1.0 + enl), "{r:?}");
    }
    assert_eq!(rows[0][1], "input");
    assert_eq!(rows[0][6], "1.000000");
    let table = fs::read_to_string(dir.join("table.txt")).unwrap();
    assert!(table.starts_with("Method"));
    assert!(dir.join("profile_profile.csv").exists() && dir.join("lee.pgm").exists());
}

#[test]
fn eval_rejects_missing_rois() {
    let t = tempfile::tempdir().unwrap();
    let o =
        esrie(&["eval", "--methods", "input", "--contrast-roi", "nowhere", "--out-dir", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().to_str().unwrap();
    assert_eq!(esrie(&["simulate", "--no-such-key", "1"]).status.code(), Some(2));

    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "k = 2\nsigma = 1\n").unwrap();
    let o = esrie(&["simulate", "--config", cfg.to_str().unwrap(), "--out-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key 'sigma'"));

    let o = esrie(&["bench", "--seconds", "0", "--out-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("duration"));
}

#[test]
fn config_file_reproduces_a_run() {
    let t = tempfile::tempdir().unwrap();
    let first = run(t.path(), "a", &["simulate", "--k", "1", "--seed", "8", "--sigma-x", "1.5"]);
    let cfg = first.join("config.txt");
    let text = fs::read_to_string(&cfg).unwrap();
    let stripped: String = text.lines().filter(|l| !l.starts_with("out_dir")).map(|l| format!("{l}\n")).collect();
    let cfg2 = t.path().join("again.cfg");
    fs::write(&cfg2, stripped).unwrap();
    let second = run(t.path(), "b", &["simulate", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(artifacts(&first), artifacts(&second));
}

#[test]
fn profile_reports_the_reference_size() {
    let t = tempfile::tempdir().unwrap();
    let o = esrie(&["profile", "--sizes", "256x256,64x32", "--out-dir", t.path().to_str().unwrap()]);
    assert!(o.status.success());
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("params 13530"), "{s}");
    assert!(s.contains("reference size"), "{s}");
}
