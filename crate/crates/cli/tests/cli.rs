use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mkis_core::data::{write_gray8_png, write_rgb_png};

fn mkis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkis"))
        .args(args)
        .env_remove("MKIS_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `n` vessel-like `size×size` RGB images with labels and circular
/// masks, plus a manifest listing them.
fn smoke_dataset(dir: &Path, n: usize, size: usize) -> PathBuf {
    for sub in ["images", "labels", "masks"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
    }
    let mut manifest = String::from("dataset=SMOKE split=train resize=native\n");
    let c = (size as f64 - 1.0) / 2.0;
    for i in 0..n {
        let (mut img, mut lab, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64, y as f64);
                let vessel = (fy - (c + 6.0 * (fx / (5.0 + i as f64)).sin())).abs() < 1.5 || (fx - c * 0.6).abs() < 1.2;
                let v: u8 = if vessel { 190 } else { 60 };
                img.extend([v, v / 2, v / 3]);
                lab.push(if vessel { 255 } else { 0 });
                let inside = (fx - c).powi(2) + (fy - c).powi(2) <= (c + 0.5).powi(2);
                mask.push(if inside { 255 } else { 0 });
            }
        }
        let id = format!("img{i}");
        write_rgb_png(&dir.join(format!("images/{id}.png")), size, size, img).unwrap();
        write_gray8_png(&dir.join(format!("labels/{id}.png")), size, size, lab).unwrap();
        write_gray8_png(&dir.join(format!("masks/{id}.png")), size, size, mask).unwrap();
        manifest.push_str(&format!("{id}\timages/{id}.png\tlabels/{id}.png\tmasks/{id}.png\n"));
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).unwrap();
    path
}

fn count_files(dir: &Path, suffix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix))
        .count()
}

#[test]
fn train_eval_predict_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = smoke_dataset(&tmp.path().join("data"), 1, 32);
    let run = tmp.path().join("run");
    let o = mkis(&[
        "train",
        "--manifest",
        s(&manifest),
        "--no-augment",
        "--max-steps",
        "300",
        "--epochs",
        "1000",
        "--batch-size",
        "1",
        "--out",
        s(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,lr,seconds\n"));
    let last: f64 = log.lines().last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
    println!("final loss {last}");
    assert!(last < 0.05, "final loss {last}");
    assert!(run.join("resolved.cfg").exists());
    assert!(run.join("checkpoint.mkis").exists());

    let model = run.join("model.mkis");
    let ev = tmp.path().join("eval");
    let o = mkis(&["eval", "--model", s(&model), "--manifest", s(&manifest), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    println!("{table}");
    let row = table.lines().find(|l| l.starts_with("SMOKE")).expect("result row");
    let acc: f64 = row.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(acc >= 0.99, "{row}");
    assert_eq!(count_files(&ev.join("maps"), ".png"), 1);
    assert_eq!(count_files(&ev.join("predictions"), "_pred.png"), 1);
    assert_eq!(count_files(&ev.join("predictions"), "_prob.png"), 1);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("dataset,model,se,sp,acc,auc,f1,jaccard,params\n"));

    let pr = tmp.path().join("pred");
    let image = manifest.parent().unwrap().join("images/img0.png");
    let o = mkis(&["predict", "--model", s(&model), "--image", s(&image), "--out", s(&pr)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(pr.join("img0_pred.png").exists() && pr.join("img0_prob.png").exists());

    // a corrupted model file is a configuration error naming the checksum
    let mut bytes = std::fs::read(&model).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = tmp.path().join("bad.mkis");
    std::fs::write(&bad, bytes).unwrap();
    let o = mkis(&["eval", "--model", s(&bad), "--manifest", s(&manifest), "--out", s(&ev)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = smoke_dataset(&tmp.path().join("data"), 2, 16);
    let a = tmp.path().join("a");
    let o = mkis(&[
        "train",
        "--manifest",
        s(&manifest),
        "--no-augment",
        "--max-steps",
        "4",
        "--threads",
        "1",
        "--seed",
        "3",
        "-s",
        "model.width=4",
        "--out",
        s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let b = tmp.path().join("b");
    let o = mkis(&["train", "--config", s(&a.join("resolved.cfg")), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let losses = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("train_log.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().to_string())
            .collect()
    };
    assert_eq!(losses(&a).len(), 4);
    assert_eq!(losses(&a), losses(&b));
    assert_eq!(std::fs::read(a.join("model.mkis")).unwrap(), std::fs::read(b.join("model.mkis")).unwrap());
}

#[test]
fn failures_map_to_documented_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let missing = tmp.path().join("nope.tsv");
    let o = mkis(&["train", "--manifest", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.tsv"));

    let manifest = smoke_dataset(&tmp.path().join("data"), 1, 16);
    let o = mkis(&["train", "--manifest", s(&manifest), "--epochs", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = mkis(&["summary", "--res", "64-64", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = mkis(&["summary", "-s", "model.colour=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));

    // a learning rate this large drives the loss to infinity
    let o = mkis(&[
        "train",
        "--manifest",
        s(&manifest),
        "--no-augment",
        "--max-steps",
        "30",
        "--lr",
        "1e30",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn summary_prints_the_parameter_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mkis(&["summary", "--res", "64x64", "--out", s(tmp.path())]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("151,538"), "{text}");
    assert!(text.contains("207,519,744"), "{text}");
    assert!(tmp.path().join("resolved.cfg").exists());
}

#[test]
fn gradcheck_passes_and_catches_a_broken_backward() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    let run = || mkis(&["gradcheck", "--size", "8", "--coords", "2", "--out", out]);
    let (a, b) = (run(), run());
    assert!(a.status.success(), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let o = mkis(&["gradcheck", "--size", "8", "--coords", "1", "--broken", "--out", out]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("broken_square"), "{}", stderr(&o));
}

#[test]
fn augment_writes_counts_and_guards_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = smoke_dataset(&tmp.path().join("data"), 3, 12);
    let out = tmp.path().join("aug");
    let args = |extra: &[&'static str]| -> Vec<String> {
        let mut v: Vec<String> = ["augment", "--manifest", s(&manifest), "--rotations", "2", "--brightness", "0", "--out", s(&out)]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let run = |extra: &[&'static str]| {
        let a = args(extra);
        mkis(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let o = run(&[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "6");
    assert_eq!(count_files(&out.join("images"), ".png"), 6);
    let listed = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert_eq!(listed.lines().filter(|l| l.contains('\t')).count(), 6);

    assert_eq!(run(&[]).status.code(), Some(2));
    assert!(run(&["--force"]).status.success());

    // the generated manifest is itself a valid training input
    let o = mkis(&[
        "augment",
        "--manifest",
        s(&out.join("manifest.tsv")),
        "--count-only",
        "--out",
        s(&tmp.path().join("count")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "2280");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(mkis(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mkis(&["summary", "--bogus"]).status.code(), Some(1));
    assert_eq!(mkis(&["--help"]).status.code(), Some(0));
}
