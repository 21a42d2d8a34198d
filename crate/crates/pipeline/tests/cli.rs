use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn macmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macmd")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn gen(dir: &Path, seed: &str) -> Output {
    macmd(&["gen-data", "--out", dir.to_str().unwrap(), "--count", "4", "--size", "32", "--classes", "3", "--seed", seed])
}

#[test]
fn gen_data_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        assert_eq!(code(&gen(dir, seed)), 0);
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9, "four images, four masks and the manifest");
    let mut any_differs = false;
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
        any_differs |= fs::read(a.join(n)).unwrap() != fs::read(c.join(n)).unwrap();
    }
    assert!(any_differs);

    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next().unwrap(), "index\timage\tmask\tclass_0\tclass_1\tclass_2");
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f[0], i.to_string());
        let pixels: usize = f[3..].iter().map(|v| v.parse::<usize>().unwrap()).sum();
        assert_eq!(pixels, 32 * 32);
    }
    let img = fs::read(a.join("img_00000.pgm")).unwrap();
    assert!(img.starts_with(b"P5"));
}

#[test]
fn train_eval_predict_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("model.ck");
    let report = tmp.path().join("report.tsv");
    let mask = tmp.path().join("mask.pgm");
    assert_eq!(code(&gen(&data, "1")), 0);
    let d = data.to_str().unwrap();
    let out = macmd(&[
        "train", "--data", d, "--out", ckpt.to_str().unwrap(), "--epochs", "2", "--channels", "16,16,32,32", "--seed", "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = String::from_utf8(out.stdout).unwrap();
    assert!(log.starts_with("epoch\tloss\ttrain_dsc\tval_dsc\tlr\n"));
    assert_eq!(&fs::read(&ckpt).unwrap()[..8], b"MACMDCK1");

    let out = macmd(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", d, "--report", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(&report).unwrap();
    assert!(tsv.starts_with("image\tclass\tdsc\thd95\n"));
    // two foreground classes for each of four images, then the aggregate
    assert!(tsv.lines().filter(|l| l.starts_with("all\t")).count() >= 2);
    assert!(tsv.lines().filter(|l| l.starts_with("3\t1\t")).count() == 1);

    let out = macmd(&[
        "predict", "--ckpt", ckpt.to_str().unwrap(), "--image", data.join("img_00002.pgm").to_str().unwrap(), "--out",
        mask.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(&mask).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    assert!(bytes[bytes.len() - 32 * 32..].iter().all(|&v| v < 3));
}

#[test]
fn params_prints_the_profile() {
    let out = macmd(&["params", "--paper-scale"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("module\tparams\tmacs\tpercent\n"));
    assert!(text.contains("mcag\t3469324\t"));
    assert!(text.contains("apm\t71120\t"));
    assert!(text.lines().last().unwrap().starts_with("total\t"));
}

#[test]
fn gradcheck_single_module() {
    let out = macmd(&["gradcheck", "--module", "softmax"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().ends_with("\tpass"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |p: &str| tmp.path().join(p).to_str().unwrap().to_string();

    // usage: unknown flag, unknown module, bad hyperparameter
    assert_eq!(code(&macmd(&["train", "--bogus"])), 2);
    assert_eq!(code(&macmd(&["gradcheck", "--module", "nope"])), 2);
    assert_eq!(code(&gen(&tmp.path().join("d"), "0")), 0);
    let d = t("d");
    assert_eq!(code(&macmd(&["train", "--data", &d, "--out", &t("m.ck"), "--lr", "-1"])), 2);
    assert_eq!(code(&macmd(&["params", "--input-size", "100"])), 2);

    // data: missing directory, size mismatch
    assert_eq!(code(&macmd(&["train", "--data", &t("missing"), "--out", &t("m.ck")])), 3);
    assert_eq!(code(&macmd(&["train", "--data", &d, "--out", &t("m.ck"), "--size", "64", "--epochs", "1"])), 3);

    // checkpoint: missing or corrupt file
    assert_eq!(code(&macmd(&["eval", "--ckpt", &t("none.ck"), "--data", &d, "--report", &t("r.tsv")])), 4);
    fs::write(tmp.path().join("bad.ck"), b"NOTACKPT\0\0\0\0").unwrap();
    let out = macmd(&["eval", "--ckpt", &t("bad.ck"), "--data", &d, "--report", &t("r.tsv")]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn channels_need_four_widths() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&gen(&d, "0")), 0);
    let out = tmp.path().join("m.ck");
    let args = ["train", "--data", d.to_str().unwrap(), "--out", out.to_str().unwrap(), "--channels", "16,16,32"];
    assert_eq!(code(&macmd(&args)), 2);
}
