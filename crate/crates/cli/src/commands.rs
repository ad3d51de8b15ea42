use std::path::Path;

use dtnet_core::checks::{render_table, run_suite, Scope};
use dtnet_core::dataio::{dtt_read, export_pgm, synth_generate, Dataset, SynthSpec};
use dtnet_core::harness::{ablation_suite, threshold_sweep as sweep, ThresholdSetting, ABLATION_SUMMARY, SWEEP_SUMMARY};
use dtnet_core::kernels::{argmax_channels, maxpool2};
use dtnet_core::kv::{join, KvDoc};
use dtnet_core::mdic::ThresholdVariant;
use dtnet_core::metrics::{region_scores, render_csv, RegionSpec};
use dtnet_core::model::{DtNet, DEPTH, REFERENCE_PARAMS, REFERENCE_PARAMS_NO_MDIC};
use dtnet_core::nn::{Mode, Session};
use dtnet_core::run::{replay as replay_run, RunSetup, CURVES_FILE, MODEL_DIR, RUN_HEADER, RUN_MANIFEST};
use dtnet_core::train::{evaluate, EpochRecord};
use dtnet_core::{LabelMap, Tape, Tensor};

use crate::args::{ArchArgs, TrainArgs, VariantArg};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn command_doc(command: &str) -> KvDoc {
    let mut d = KvDoc::new(RUN_HEADER);
    d.set("command", command);
    d
}

fn print_epoch(label: &str, r: &EpochRecord) {
    let train = r.train_eval.map(|t| format!(" train_dice {:.4}", t.mean_dice)).unwrap_or_default();
    println!(
        "{label}epoch {:>4} train_loss {:.5}{train} test_loss {:.5} test_dice {:.4}",
        r.epoch, r.train_loss, r.test_eval.loss, r.test_eval.mean_dice
    );
}

pub fn synth_data(spec: &SynthSpec, out: &Path) -> Result<(), CliError> {
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let result = synth_generate(spec, out)?;
    let mut d = command_doc("synth-data");
    d.set("out", out.display())
        .set("n", spec.n_images)
        .set("size", spec.size)
        .set("classes", spec.n_classes)
        .set("channels", spec.channels)
        .set("seed", spec.seed)
        .set("noise", spec.noise)
        .set("dataset_manifest", result.manifest.display())
        .set("dataset_digest", &result.digest);
    d.write(out.join(RUN_MANIFEST))?;
    println!("{} images written to {}", result.n_images, out.display());
    println!("digest {}", result.digest);
    Ok(())
}

/// Predicted label maps for every sample, stacked into one `[N*S, S]` map.
fn predict_stacked(model: &DtNet<f32>, data: &Dataset, batch: usize) -> Result<(LabelMap, LabelMap), CliError> {
    let s = data.size();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        pred.extend_from_slice(argmax_channels(&model.infer(&x)?)?.data());
        truth.extend_from_slice(y.data());
    }
    let rows = data.len() * s;
    Ok((Tensor::new(vec![rows, s], pred)?, Tensor::new(vec![rows, s], truth)?))
}

/// Writes the metric table for `data` and records its headline numbers in `doc`.
fn write_metrics(model: &DtNet<f32>, data: &Dataset, batch: usize, path: &Path, doc: &mut KvDoc) -> Result<(), CliError> {
    let ev = evaluate(model, data, batch)?;
    let k = model.config().num_classes;
    let mut rows = Vec::with_capacity(2 * k);
    for (agg, scores) in [("micro", &ev.summary.micro), ("macro", &ev.summary.macro_)] {
        for (c, s) in scores.iter().enumerate() {
            rows.push((format!("{agg}:{c}"), *s));
        }
    }
    let (pred, truth) = predict_stacked(model, data, batch)?;
    let fg = RegionSpec::new("foreground", (1..k as u8).collect())?;
    let region = region_scores(&pred, &truth, &fg, k)?;
    write_text(path, &render_csv(&rows, &[(fg, region)]))?;
    let brief = ev.brief();
    doc.set("loss", brief.loss)
        .set("mean_dice", brief.mean_dice)
        .set("micro_dice", brief.micro_dice)
        .set("foreground_dice_plus", region.dice_plus);
    println!("loss {:.5} mean_dice {:.4} micro_dice {:.4} foreground_dice+ {:.4}", brief.loss, brief.mean_dice, brief.micro_dice, region.dice_plus);
    Ok(())
}

pub fn train(args: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let setup = args.setup()?;
    let data = setup.prepare()?;
    create_dir(out)?;
    let outcome = setup.execute_with(&data, Some(out), |r| print_epoch("", r))?;
    let model = DtNet::<f32>::load(out.join(MODEL_DIR))?;
    let mut doc = command_doc("metrics");
    write_metrics(&model, &data.test, setup.train.batch_size, &out.join(METRICS_FILE), &mut doc)?;
    println!("trainable parameters {}", outcome.params);
    println!("wall time {:.1}s", outcome.run.wall_time_secs);
    println!("manifest {}", out.join(RUN_MANIFEST).display());
    Ok(())
}

pub fn eval(model_dir: &Path, data_path: &Path, out: &Path, batch: usize) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Usage("--batch must be >= 1".into()));
    }
    let model = DtNet::<f32>::load(model_dir)?;
    let data = Dataset::load(data_path)?;
    create_dir(out)?;
    let mut doc = command_doc("eval");
    doc.set("model", model_dir.display())
        .set("data", data_path.display())
        .set("batch", batch)
        .set("config_digest", model.config().digest())
        .set("dataset_digest", data.digest());
    write_metrics(&model, &data, batch, &out.join(METRICS_FILE), &mut doc)?;
    doc.write(out.join(RUN_MANIFEST))?;
    Ok(())
}

pub fn gradcheck(scope: &str, tol: f64, eps: f64, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let scope_v = Scope::parse(scope).map_err(|e| CliError::Usage(e.to_string()))?;
    if !(tol > 0.0) {
        return Err(CliError::Usage(format!("--tol {tol} must be > 0")));
    }
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(CliError::Usage(format!("--eps {eps} outside [1e-6, 1e-4]")));
    }
    let results = run_suite(&scope_v, eps, tol, seed)?;
    let table = render_table(&results);
    print!("{table}");
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let seconds: f64 = results.iter().map(|r| r.seconds).sum();
    println!("{} checks, {} failed, {seconds:.1}s", results.len(), failed.len());
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("gradcheck.csv"), &table)?;
        let mut d = command_doc("gradcheck");
        d.set("scope", scope).set("tol", tol).set("eps", eps).set("seed", seed).set("checks", results.len()).set("failed", failed.len());
        d.write(dir.join(RUN_MANIFEST))?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn delta(total: usize, reference: usize) -> String {
    let d = total as i64 - reference as i64;
    format!("{d:+} ({:+.1}%)", 100.0 * d as f64 / reference as f64)
}

pub fn count_params(arch: &ArchArgs, channels: usize, out: Option<&Path>) -> Result<(), CliError> {
    // parameter totals do not depend on the input size
    let cfg = arch.config(channels, 32)?;
    let count = DtNet::<f32>::build(cfg.clone(), 0)?.count_params();
    println!("{:<8} {:>12} {:>14}", "module", "trainable", "non-trainable");
    for m in &count.modules {
        println!("{:<8} {:>12} {:>14}", m.name, m.trainable, m.non_trainable);
    }
    println!("total trainable {}", count.trainable);
    println!("total non-trainable (normalization running statistics) {}", count.non_trainable);
    let (reference, label) = if cfg.ablations.disable_mdic {
        (REFERENCE_PARAMS_NO_MDIC, "published no-MDIC total")
    } else {
        (REFERENCE_PARAMS, "published total")
    };
    println!("{label} {reference}, delta {}", delta(count.trainable, reference));
    if !cfg.ablations.disable_mdic {
        let mut plain = cfg.clone();
        plain.ablations.disable_mdic = true;
        let p = DtNet::<f32>::build(plain, 0)?.count_params().trainable;
        println!("no-MDIC variant {p}, published {REFERENCE_PARAMS_NO_MDIC}, delta {}", delta(p, REFERENCE_PARAMS_NO_MDIC));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut d = command_doc("count-params");
        cfg.write_kv(&mut d);
        d.set("trainable_params", count.trainable).set("non_trainable_params", count.non_trainable).set("reference_params", reference);
        d.write(dir.join(RUN_MANIFEST))?;
    }
    Ok(())
}

fn harness_doc(command: &str, setup: &RunSetup) -> KvDoc {
    let mut d = setup.to_kv();
    d.set("command", command);
    d
}

pub fn threshold_sweep(args: &TrainArgs, thresholds: &[String], variants: &[VariantArg], out: &Path) -> Result<(), CliError> {
    let setup = args.setup()?;
    let settings = thresholds
        .iter()
        .map(|t| ThresholdSetting::parse(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let variants: Vec<ThresholdVariant> = variants.iter().map(|&v| v.into()).collect();
    create_dir(out)?;
    let entries = sweep(&setup, &settings, &variants, out, |name, r| print_epoch(&format!("[{name}] "), r))?;
    let mut d = harness_doc("threshold-sweep", &setup);
    d.set("thresholds", join(thresholds))
        .set("variants", join(&variants.iter().map(|v| v.name()).collect::<Vec<_>>()))
        .set("runs", entries.len())
        .set("summary", SWEEP_SUMMARY);
    d.write(out.join(RUN_MANIFEST))?;
    for e in &entries {
        println!("{:<16} params {:>9} final test Dice {:.4} curves {}/{CURVES_FILE}", e.name, e.params, e.run.last().test_eval.mean_dice, e.slug);
    }
    Ok(())
}

pub fn ablate(args: &TrainArgs, out: &Path) -> Result<(), CliError> {
    let setup = args.setup()?;
    create_dir(out)?;
    let entries = ablation_suite(&setup, out, |name, r| print_epoch(&format!("[{name}] "), r))?;
    let mut d = harness_doc("ablate", &setup);
    d.set("runs", entries.len()).set("summary", ABLATION_SUMMARY);
    d.write(out.join(RUN_MANIFEST))?;
    for e in &entries {
        println!("{:<14} params {:>9} final test Dice {:.4}", e.name, e.params, e.run.last().test_eval.mean_dice);
    }
    Ok(())
}

pub fn dump_features(
    model_dir: &Path,
    image: &Path,
    module: &str,
    part: usize,
    channels: Option<&[usize]>,
    out: &Path,
) -> Result<(), CliError> {
    let index: usize = module
        .strip_prefix("enc")
        .and_then(|n| n.parse().ok())
        .filter(|n| (1..=DEPTH).contains(n))
        .ok_or_else(|| CliError::Usage(format!("--module `{module}` must be enc1..enc{DEPTH}")))?;
    if !(1..=4).contains(&part) {
        return Err(CliError::Usage(format!("--part {part} must be 1..4")));
    }
    let model = DtNet::<f32>::load(model_dir)?;
    let img: Tensor<f32> = dtt_read(image)?;
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    let x = img.reshape(&shape)?;
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, model.store(), Mode::Infer);
    s.enable_taps();
    let xv = s.tape.constant(x);
    model.forward(&mut s, xv)?;
    let tap = format!("enc{index}/part{part}/local");
    let local = s.taps().and_then(|t| t.get(&tap)).map(|&v| s.tape.value(v).clone()).expect("encoder parts are tapped");
    // exported after the module's own 2x2 pooling step
    let (pooled, _) = maxpool2(&local)?;
    let (_, c, h, w) = pooled.dims4()?;
    let selected: Vec<usize> = channels.map(<[usize]>::to_vec).unwrap_or_else(|| (0..c).collect());
    if let Some(&bad) = selected.iter().find(|&&ch| ch >= c) {
        return Err(CliError::Usage(format!("channel {bad} outside 0..{c}")));
    }
    create_dir(out)?;
    let mut files = Vec::with_capacity(selected.len());
    for &ch in &selected {
        let map = Tensor::new(vec![h, w], pooled.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let name = format!("{module}_part{part}_ch{ch:03}.pgm");
        export_pgm(&map, out.join(&name))?;
        files.push(name);
    }
    let mut d = command_doc("dump-features");
    d.set("model", model_dir.display())
        .set("image", image.display())
        .set("module", module)
        .set("part", part)
        .set("channels", join(&selected))
        .set("map_size", format!("{h}x{w}"))
        .set("files", join(&files));
    d.write(out.join(RUN_MANIFEST))?;
    println!("{} maps of {h}x{w} written to {}", files.len(), out.display());
    Ok(())
}

pub fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let manifest = KvDoc::read(manifest_path, RUN_HEADER)?;
    if manifest.get("command") != Some("train") {
        return Err(CliError::Usage(format!("{} is not a training manifest", manifest_path.display())));
    }
    let again = replay_run(&manifest, out, |r| print_epoch("", r)).map_err(|e| match e {
        dtnet_core::Error::Config(m) if m.contains("digest") => CliError::Validation(m),
        other => other.into(),
    })?;
    let keys = ["param_digest", "final_train_loss", "final_test_loss", "final_test_mean_dice", "epochs_completed"];
    let mismatched: Vec<&str> = keys.iter().copied().filter(|k| manifest.get(k) != again.manifest.get(k)).collect();
    if mismatched.is_empty() {
        println!("replay matches the manifest bit-for-bit (param digest {})", again.run.param_digest);
        Ok(())
    } else {
        Err(CliError::Validation(format!("replay differs from the manifest in {}", mismatched.join(", "))))
    }
}
