use std::path::Path;
use std::process::{Command, Output};

fn dtnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn digest_line(o: &Output) -> String {
    stdout(o).lines().find(|l| l.starts_with("digest ")).expect("digest printed").to_string()
}

fn synth(dir: &Path, n: &str, seed: &str) -> Output {
    dtnet(&["synth-data", "--out", dir.to_str().unwrap(), "--n", n, "--size", "32", "--seed", seed])
}

#[test]
fn synth_data_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), "5", "3");
    let b = synth(&tmp.path().join("b"), "5", "3");
    let c = synth(&tmp.path().join("c"), "5", "4");
    assert!(a.status.success() && b.status.success() && c.status.success());
    assert_eq!(digest_line(&a), digest_line(&b));
    assert_ne!(digest_line(&a), digest_line(&c));
    let manifest = std::fs::read_to_string(tmp.path().join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("command = synth-data"));
    assert!(manifest.contains("seed = 3"));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();
    assert_eq!(dtnet(&["synth-data", "--out", o, "--size", "60"]).status.code(), Some(2));
    assert_eq!(dtnet(&["count-params", "--filters", "3,4"]).status.code(), Some(2));
    assert_eq!(dtnet(&["count-params", "--filters", "6,8,8,8,8"]).status.code(), Some(2));
    assert_eq!(dtnet(&["gradcheck", "--scope", "nope"]).status.code(), Some(2));
    assert_eq!(dtnet(&["gradcheck", "--eps", "0.1"]).status.code(), Some(2));
    assert_eq!(dtnet(&["train", "--out", o]).status.code(), Some(2));
    assert_eq!(dtnet(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_files_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("e");
    let o = dtnet(&["eval", "--model", "/nonexistent/model", "--data", "/nonexistent/m.tsv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn count_params_reports_totals_and_deltas() {
    let o = dtnet(&["count-params"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("total trainable 4437821"), "{text}");
    assert!(text.contains("total non-trainable (normalization running statistics) 13248"));
    assert!(text.contains("published total 5272277"));
    assert!(text.contains("(-15.8%)"));
    for m in ["enc1", "enc5", "dec1", "dec5", "head"] {
        assert!(text.lines().any(|l| l.starts_with(m)), "missing module row {m}");
    }
}

#[test]
fn gradcheck_scope_prints_a_passing_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dtnet(&["gradcheck", "--scope", "conv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("group,op,coordinates,nonsmooth,max_rel_error,max_abs_error,passed"));
    assert_eq!(text.lines().filter(|l| l.starts_with("conv,")).count(), 3);
    assert!(tmp.path().join("gradcheck.csv").exists());
    assert!(tmp.path().join("manifest.txt").exists());
}

#[test]
fn train_eval_replay_and_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(synth(&data, "6", "0").status.success());
    let manifest = data.join("manifest.tsv");
    let run = tmp.path().join("run");
    let train_args = [
        "train",
        "--data",
        manifest.to_str().unwrap(),
        "--size-from-data",
        "32",
        "--filters",
        "4,4,4,4,4",
        "--epochs",
        "2",
        "--batch",
        "2",
        "--split",
        "4",
        "--out",
        run.to_str().unwrap(),
    ];
    let o = dtnet(&train_args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("epoch")).count(), 2);
    for f in ["curves.csv", "metrics.csv", "manifest.txt", "model"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("class,accuracy,sensitivity,specificity,dice"));
    assert!(metrics.contains("foreground,1 2 3 4,"));

    let mut wrong = train_args.to_vec();
    wrong[4] = "64";
    assert_eq!(dtnet(&wrong).status.code(), Some(3));

    let eval_dir = tmp.path().join("eval");
    let o = dtnet(&[
        "eval",
        "--model",
        run.join("model").to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(eval_dir.join("metrics.csv").exists());
    let em = std::fs::read_to_string(eval_dir.join("manifest.txt")).unwrap();
    assert!(em.contains("command = eval"));

    let o = dtnet(&["replay", "--manifest", run.join("manifest.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let image = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let feats = tmp.path().join("feats");
    let o = dtnet(&[
        "dump-features",
        "--model",
        run.join("model").to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        feats.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgms: Vec<_> = std::fs::read_dir(&feats)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .collect();
    // one map per channel of a part: 4 filters / 4 parts
    assert_eq!(pgms.len(), 1);
    let bytes = std::fs::read(pgms[0].path()).unwrap();
    assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(bytes.len(), b"P5\n16 16\n255\n".len() + 256);
}

#[test]
fn replay_detects_a_tampered_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = dtnet(&[
        "train",
        "--synth-n",
        "4",
        "--size",
        "32",
        "--filters",
        "4,4,4,4,4",
        "--epochs",
        "1",
        "--split",
        "2",
        "--no-train-eval",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = run.join("manifest.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let tampered: String = text
        .lines()
        .map(|l| if l.starts_with("param_digest") { "param_digest = 00".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&path, tampered + "\n").unwrap();
    assert_eq!(dtnet(&["replay", "--manifest", path.to_str().unwrap()]).status.code(), Some(3));
}
