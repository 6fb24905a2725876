//! Subcommand drivers behind the thin binary: train / eval / ablate /
//! modalities / cost / gradcheck / synth.
//!
//! Every run is reproducible from (config file + overrides + seed): the
//! effective configuration is echoed into the output directory, progress
//! goes to standard error, and machine-readable records go to files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{
    apply_overrides, model_from_kv, model_to_kv, parse_kv_text, render_kv, train_from_kv,
    train_to_kv, KvMap,
};
use crate::cost;
use crate::data::{generate_synthetic, Dataset, Sample, SynthMode, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{iou_table, ConfusionMatrix};
use crate::model::{build, Model, ModelConfig, Variant};
use crate::report::{write_records, Record};
use crate::train::{evaluate, train, TrainConfig, TrainLog};
use crate::verify;

/// Parsed command line shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub modalities: Option<String>,
    pub variant: Option<String>,
    pub check: bool,
    pub quiet: bool,
}

impl Invocation {
    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    /// File config + `--set` overrides + flag shorthands, last wins.
    fn effective_map(&self) -> Result<KvMap> {
        let mut map = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_kv_text(&text)?
            }
            None => KvMap::new(),
        };
        apply_overrides(&mut map, &self.overrides)?;
        if let Some(v) = &self.variant {
            map.insert("model.variant".into(), v.clone());
        }
        if let Some(seed) = self.seed {
            map.insert("model.seed".into(), seed.to_string());
            map.insert("train.seed".into(), seed.to_string());
            map.insert("synth.seed".into(), seed.to_string());
        }
        Ok(map)
    }

    fn out_dir(&self) -> Result<&Path> {
        let out = self
            .out
            .as_deref()
            .ok_or_else(|| Error::Config("output directory required (--out)".into()))?;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        Ok(out)
    }

    fn open_dataset(&self) -> Result<(Dataset, Vec<String>)> {
        let path = self
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("dataset path required (--dataset)".into()))?;
        let ds = Dataset::open(path)?;
        let modalities = match &self.modalities {
            Some(list) => {
                let wanted: Vec<String> =
                    list.split(',').map(|s| s.trim().to_string()).collect();
                for m in &wanted {
                    if !ds.manifest.modalities.contains(m) {
                        return Err(Error::Config(format!(
                            "modality '{m}' not in dataset ({})",
                            ds.manifest.modalities.join(",")
                        )));
                    }
                }
                wanted
            }
            None => ds.manifest.modalities.clone(),
        };
        Ok((ds, modalities))
    }
}

/// Model config from the map, adopting modality and class counts from the
/// dataset when the keys are absent.
fn resolve_model(map: &KvMap, ds: &Dataset, modalities: &[String]) -> Result<ModelConfig> {
    let mut cfg = model_from_kv(map)?;
    if !map.contains_key("model.modalities") {
        cfg.num_modalities = modalities.len();
    }
    if !map.contains_key("decoder.num_classes") {
        cfg.decoder.num_classes = ds.manifest.classes.len();
    }
    cfg.validate()?;
    if cfg.num_modalities != modalities.len() {
        return Err(Error::Config(format!(
            "model.modalities = {} but {} dataset modalities selected",
            cfg.num_modalities,
            modalities.len()
        )));
    }
    Ok(cfg)
}

fn echo_config(
    out: &Path,
    model_cfg: &ModelConfig,
    train_cfg: Option<&TrainConfig>,
    extra: &[(String, String)],
) -> Result<()> {
    let mut map = model_to_kv(model_cfg);
    if let Some(tc) = train_cfg {
        map.extend(train_to_kv(tc));
    }
    for (k, v) in extra {
        map.insert(k.clone(), v.clone());
    }
    let path = out.join("config.txt");
    fs::write(&path, render_kv(&map)).map_err(|e| Error::io(&path, e))
}

fn train_log_records(log: &TrainLog) -> Vec<Record> {
    log.records
        .iter()
        .map(|r| {
            let mut rec = Record::new();
            rec.push("epoch", r.epoch)
                .push("iter", r.iter)
                .push("lr", format!("{:.10e}", r.lr))
                .push("loss", format!("{:.8}", r.loss))
                .push("train_miou", format!("{:.6}", r.train_miou))
                .push("val_miou", format!("{:.6}", r.val_miou));
            rec
        })
        .collect()
}

/// Trains one model on already-loaded splits; shared by train, ablate and
/// modalities runs.
fn train_once(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_samples: &[Sample],
    val_samples: &[Sample],
    mut progress: impl FnMut(&str),
) -> Result<(Model<f32>, TrainLog)> {
    let mut model = build::<f32>(model_cfg)?;
    let every = (train_cfg.total_epochs / 5).max(1);
    let log = train(
        &mut model,
        train_samples,
        val_samples,
        train_cfg,
        |r| {
            if r.epoch % every == 0 || r.epoch + 1 == train_cfg.total_epochs {
                progress(&format!(
                    "epoch {:>4}  lr {:.3e}  loss {:.4}  train mIoU {:.3}  val mIoU {:.3}",
                    r.epoch, r.lr, r.loss, r.train_miou, r.val_miou
                ));
            }
        },
        |_| Ok(()),
    )?;
    Ok((model, log))
}

pub fn run_train(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let (ds, modalities) = inv.open_dataset()?;
    let out = inv.out_dir()?;
    let model_cfg = resolve_model(&map, &ds, &modalities)?;
    let train_cfg = train_from_kv(&map)?;
    echo_config(
        out,
        &model_cfg,
        Some(&train_cfg),
        &[
            ("run.dataset".into(), ds.root.display().to_string()),
            ("run.modalities".into(), modalities.join(",")),
        ],
    )?;
    let train_samples = ds.load_split("train", &modalities)?;
    let val_samples = match ds.manifest.split("val") {
        Ok(_) => ds.load_split("val", &modalities)?,
        Err(_) => Vec::new(),
    };
    inv.progress(&format!(
        "training {} variant on {} samples ({} modalities), {} epochs",
        model_cfg.variant.as_str(),
        train_samples.len(),
        modalities.len(),
        train_cfg.total_epochs
    ));
    let mut model = build::<f32>(&model_cfg)?;
    let best_path = out.join("best.ckpt");
    let every = (train_cfg.total_epochs / 10).max(1);
    let quiet = inv.quiet;
    let log = train(
        &mut model,
        &train_samples,
        &val_samples,
        &train_cfg,
        |r| {
            if !quiet && (r.epoch % every == 0 || r.epoch + 1 == train_cfg.total_epochs) {
                eprintln!(
                    "epoch {:>4}  lr {:.3e}  loss {:.4}  train mIoU {:.3}  val mIoU {:.3}",
                    r.epoch, r.lr, r.loss, r.train_miou, r.val_miou
                );
            }
        },
        |m| checkpoint::save(m, &best_path),
    )?;
    write_records(&out.join("train_log.txt"), &train_log_records(&log))?;
    checkpoint::save(&model, &out.join("final.ckpt"))?;

    let eval_samples = if val_samples.is_empty() {
        &train_samples
    } else {
        &val_samples
    };
    let (cm, miou) = evaluate(&model, eval_samples)?;
    write_eval_report(out, &cm, &ds.manifest.classes)?;
    inv.progress(&format!("final mIoU {miou:.4}; reports in {}", out.display()));
    Ok(())
}

fn write_eval_report(out: &Path, cm: &ConfusionMatrix, classes: &[String]) -> Result<()> {
    let table = iou_table(cm, classes);
    let path = out.join("eval.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (c, iou) in cm.per_class_iou().iter().enumerate() {
        let mut rec = Record::new();
        rec.push("class", classes.get(c).map(String::as_str).unwrap_or("?"));
        match iou {
            Some(v) => rec.push("iou", format!("{v:.6}")),
            None => rec.push("iou", "undefined"),
        };
        records.push(rec);
    }
    let mut mean = Record::new();
    mean.push("class", "MEAN");
    match cm.miou() {
        Ok(v) => mean.push("iou", format!("{v:.6}")),
        Err(_) => mean.push("iou", "undefined"),
    };
    records.push(mean);
    write_records(&out.join("eval_records.txt"), &records)
}

pub fn run_eval(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let ckpt = inv
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("checkpoint path required (--checkpoint)".into()))?;
    let (ds, modalities) = inv.open_dataset()?;
    let out = inv.out_dir()?;
    let model = checkpoint::load(ckpt)?;
    if model.config.num_modalities != modalities.len() {
        return Err(Error::Config(format!(
            "checkpoint expects {} modalities, {} selected",
            model.config.num_modalities,
            modalities.len()
        )));
    }
    let split = map
        .get("eval.split")
        .cloned()
        .unwrap_or_else(|| "val".to_string());
    let samples = ds.load_split(&split, &modalities)?;
    let (cm, miou) = evaluate(&model, &samples)?;
    write_eval_report(out, &cm, &ds.manifest.classes)?;
    echo_config(out, &model.config, None, &[
        ("run.dataset".into(), ds.root.display().to_string()),
        ("run.split".into(), split.clone()),
    ])?;
    inv.progress(&iou_table(&cm, &ds.manifest.classes));
    inv.progress(&format!("mIoU on {split}: {miou:.4}"));
    Ok(())
}

pub fn run_synth(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let out = inv.out_dir()?;
    let get = |key: &str, default: usize| -> Result<usize> {
        match map.get(key) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("'{key}' is not an integer: {v}"))),
            None => Ok(default),
        }
    };
    let mode = match map.get("synth.mode") {
        Some(m) => SynthMode::parse(m)?,
        None => SynthMode::SingleModalitySufficient,
    };
    let default_classes = if mode == SynthMode::XorFusion { 3 } else { 4 };
    let spec = SynthSpec {
        modalities: get("synth.modalities", 2)?,
        classes: get("synth.classes", default_classes)?,
        extent: get("synth.extent", 32)?,
        n_train: get("synth.train", 8)?,
        n_val: get("synth.val", 4)?,
        mode,
        noise_sigma: match map.get("synth.noise") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("'synth.noise' is not a number: {v}")))?,
            None => 0.05,
        },
        seed: match map.get("synth.seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("'synth.seed' is not an integer: {v}")))?,
            None => 0,
        },
    };
    let manifest = generate_synthetic(&spec, out)?;
    inv.progress(&format!(
        "wrote {} dataset: {} train / {} val samples, {} modalities, {} classes, {}x{} -> {}",
        spec.mode.as_str(),
        spec.n_train,
        spec.n_val,
        manifest.modalities.len(),
        manifest.classes.len(),
        manifest.height,
        manifest.width,
        out.display()
    ));
    Ok(())
}

pub fn run_cost(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let model_cfg = model_from_kv(&map)?;
    let full_scale = map.get("model.preset").map(String::as_str) == Some("full_scale");
    let default_extent = if full_scale { 512 } else { 64 };
    let h = match map.get("cost.height") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("'cost.height' is not an integer: {v}")))?,
        None => default_extent,
    };
    let w = match map.get("cost.width") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("'cost.width' is not an integer: {v}")))?,
        None => default_extent,
    };
    let report = cost::count_flops(&model_cfg, h, w)?;
    println!("{}", report.to_text(2));
    for (name, params, flops) in report.component_totals() {
        println!(
            "{name:<9} {params:>12} params  {flops:>15} flops ({:.2} GFLOPs)",
            cost::gflops(flops)
        );
    }
    println!();
    println!("{}", cost::full_scale_comparison()?);
    if let Some(out) = &inv.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut records = Vec::new();
        for e in &report.entries {
            let mut rec = Record::new();
            rec.push("module", &e.path)
                .push("params", e.params)
                .push("flops", e.flops);
            records.push(rec);
        }
        write_records(&out.join("cost_records.txt"), &records)?;
        echo_config(out, &model_cfg, None, &[
            ("cost.height".into(), h.to_string()),
            ("cost.width".into(), w.to_string()),
        ])?;
    }
    Ok(())
}

pub fn run_gradcheck(inv: &Invocation) -> Result<()> {
    let mut failures = Vec::new();
    let mut show = |r: &verify::CheckResult| {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!(
            "{status}  {:<24} max rel err {:.3e} (threshold {:.0e})",
            r.name, r.max_rel_err, r.threshold
        );
        if !r.passed() {
            failures.push(r.name.clone());
        }
    };
    inv.progress("op-level checks, f32 (h = 1e-2)");
    for r in verify::op_grad_checks::<f32>(1e-2, 1e-3, 5)? {
        show(&r);
    }
    inv.progress("op-level checks, f64 verification mode (h = 1e-5)");
    for r in verify::op_grad_checks::<f64>(1e-5, 1e-7, 5)? {
        show(&r);
    }
    inv.progress("composed blocks and full tiny model");
    show(&verify::fusion_block_check::<f32>(1e-2, 1e-2)?);
    show(&verify::fusion_block_check::<f64>(1e-5, 1e-5)?);
    show(&verify::encoder_block_check::<f32>(1e-2, 1e-2)?);
    show(&verify::encoder_block_check::<f64>(1e-5, 1e-5)?);
    show(&verify::encoder_check::<f32>(1e-2, 1e-2, 48)?);
    show(&verify::encoder_check::<f64>(1e-5, 1e-5, 48)?);
    show(&verify::full_model_check::<f32>(1e-2, 1e-2, 32)?);
    show(&verify::full_model_check::<f64>(1e-5, 1e-5, 32)?);
    let worst = verify::param_grad_check::<f64>(1e-5, 2)?;
    let param_check = verify::CheckResult {
        name: "loss_vs_params(f64)".into(),
        max_rel_err: worst,
        threshold: 1e-5,
    };
    show(&param_check);
    if failures.is_empty() {
        inv.progress("all gradient checks passed");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient checks failed: {}",
            failures.join(", ")
        )))
    }
}

/// One ablation/modality-run result row.
#[derive(Debug, Clone)]
struct RunRow {
    label: String,
    params: u64,
    seed_mious: Vec<f64>,
    median_miou: f64,
    per_class_median: Vec<Option<f64>>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN mious"));
    values[values.len() / 2]
}

/// Trains `seeds` fresh models of one config and reduces the evaluation
/// metrics to per-seed mIoUs plus per-class medians.
fn run_seeded(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_samples: &[Sample],
    val_samples: &[Sample],
    seeds: u64,
    classes: usize,
    mut progress: impl FnMut(&str),
) -> Result<(Vec<f64>, f64, Vec<Option<f64>>)> {
    let mut seed_mious = Vec::new();
    let mut per_class: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for s in 0..seeds {
        let mut mc = model_cfg.clone();
        mc.seed = model_cfg.seed + s;
        let mut tc = train_cfg.clone();
        tc.seed = train_cfg.seed + s;
        let (model, _) = train_once(&mc, &tc, train_samples, val_samples, &mut progress)?;
        let eval_on = if val_samples.is_empty() {
            train_samples
        } else {
            val_samples
        };
        let (cm, miou) = evaluate(&model, eval_on)?;
        seed_mious.push(miou);
        for (c, iou) in cm.per_class_iou().iter().enumerate() {
            if let Some(v) = iou {
                per_class[c].push(*v);
            }
        }
    }
    let mut sorted = seed_mious.clone();
    let med = median(&mut sorted);
    let per_class_median = per_class
        .into_iter()
        .map(|mut v| (!v.is_empty()).then(|| median(&mut v)))
        .collect();
    Ok((seed_mious, med, per_class_median))
}

fn seeds_from(map: &KvMap, key: &str) -> Result<u64> {
    match map.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("'{key}' is not an integer: {v}"))),
        None => Ok(3),
    }
}

pub fn run_ablate(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let (ds, modalities) = inv.open_dataset()?;
    let out = inv.out_dir()?;
    let base_cfg = resolve_model(&map, &ds, &modalities)?;
    let train_cfg = train_from_kv(&map)?;
    let seeds = seeds_from(&map, "ablate.seeds")?;
    let parallel = map.get("ablate.parallel").map(String::as_str) == Some("true");
    echo_config(
        out,
        &base_cfg,
        Some(&train_cfg),
        &[
            ("run.dataset".into(), ds.root.display().to_string()),
            ("run.modalities".into(), modalities.join(",")),
            ("ablate.seeds".into(), seeds.to_string()),
        ],
    )?;
    let train_samples = ds.load_split("train", &modalities)?;
    let val_samples = match ds.manifest.split("val") {
        Ok(_) => ds.load_split("val", &modalities)?,
        Err(_) => Vec::new(),
    };
    let classes = base_cfg.decoder.num_classes;

    let run_variant = |variant: Variant| -> Result<RunRow> {
        let mut cfg = base_cfg.clone();
        cfg.variant = variant;
        let params = cost::count_params(&cfg)?.total_params();
        let (seed_mious, med, per_class) = run_seeded(
            &cfg,
            &train_cfg,
            &train_samples,
            &val_samples,
            seeds,
            classes,
            |_| {},
        )?;
        Ok(RunRow {
            label: variant.as_str().to_string(),
            params,
            seed_mious,
            median_miou: med,
            per_class_median: per_class,
        })
    };

    let rows: Vec<RunRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = Variant::ALL
                .iter()
                .map(|v| scope.spawn(move || run_variant(*v)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        let mut rows = Vec::new();
        for v in Variant::ALL {
            inv.progress(&format!("ablation variant {}", v.as_str()));
            rows.push(run_variant(v)?);
        }
        rows
    };

    let full = rows[0].median_miou;
    let mut records = Vec::new();
    let mut table = format!(
        "{:<22} {:>12} {:>8} {:>8}  per-seed\n",
        "variant", "params", "mIoU", "delta"
    );
    for row in &rows {
        let delta = row.median_miou - full;
        let per_seed: Vec<String> = row.seed_mious.iter().map(|v| format!("{v:.4}")).collect();
        table.push_str(&format!(
            "{:<22} {:>12} {:>8.4} {:>+8.4}  {}\n",
            row.label,
            row.params,
            row.median_miou,
            delta,
            per_seed.join(" ")
        ));
        let mut rec = Record::new();
        rec.push("variant", &row.label)
            .push("params", row.params)
            .push("miou", format!("{:.6}", row.median_miou))
            .push("delta", format!("{delta:.6}"))
            .push("seed_mious", per_seed.join(";"));
        records.push(rec);
    }
    write_records(&out.join("ablate_records.txt"), &records)?;
    let path = out.join("ablate.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    inv.progress(&table);

    if inv.check {
        let get = |v: Variant| {
            rows.iter()
                .find(|r| r.label == v.as_str())
                .expect("all variants present")
                .median_miou
        };
        let linear_only = get(Variant::LinearOnly);
        let no_pc = get(Variant::NoParallelConvs);
        if full < linear_only || full < no_pc {
            return Err(Error::Threshold(format!(
                "ablation ordering violated: full {full:.4} vs linear_only {linear_only:.4}, \
                 no_parallel_convs {no_pc:.4} (per-seed full: {:?})",
                rows[0].seed_mious
            )));
        }
        inv.progress("ablation ordering check passed: full >= linear_only, full >= no_parallel_convs");
    }
    Ok(())
}

pub fn run_modalities(inv: &Invocation) -> Result<()> {
    let map = inv.effective_map()?;
    let (ds, modalities) = inv.open_dataset()?;
    let out = inv.out_dir()?;
    if modalities.len() < 2 {
        return Err(Error::Config(
            "modality-increment runs need at least 2 modalities".into(),
        ));
    }
    let train_cfg = train_from_kv(&map)?;
    let seeds = seeds_from(&map, "modalities.seeds")?;
    let classes = ds.manifest.classes.len();
    echo_config(
        out,
        &resolve_model(&map, &ds, &modalities)?,
        Some(&train_cfg),
        &[
            ("run.dataset".into(), ds.root.display().to_string()),
            ("run.modalities".into(), modalities.join(",")),
            ("modalities.seeds".into(), seeds.to_string()),
        ],
    )?;

    let mut rows = Vec::new();
    for upto in 1..=modalities.len() {
        let subset: Vec<String> = modalities[..upto].to_vec();
        inv.progress(&format!("training with modalities {}", subset.join("+")));
        let train_samples = ds.load_split("train", &subset)?;
        let val_samples = match ds.manifest.split("val") {
            Ok(_) => ds.load_split("val", &subset)?,
            Err(_) => Vec::new(),
        };
        let mut cfg = resolve_model(&map, &ds, &subset)?;
        if map.contains_key("model.modalities") && cfg.num_modalities != subset.len() {
            cfg.num_modalities = subset.len();
            cfg.validate()?;
        }
        let params = cost::count_params(&cfg)?.total_params();
        let (seed_mious, med, per_class) = run_seeded(
            &cfg,
            &train_cfg,
            &train_samples,
            &val_samples,
            seeds,
            classes,
            |_| {},
        )?;
        rows.push(RunRow {
            label: subset.join("+"),
            params,
            seed_mious,
            median_miou: med,
            per_class_median: per_class,
        });
    }

    let mut records = Vec::new();
    let mut table = format!(
        "{:<18} {:>12} {:>8} {:>8}  per-seed\n",
        "modalities", "params", "mIoU", "gain"
    );
    let mut prev = None;
    for row in &rows {
        let gain = prev.map(|p: f64| row.median_miou - p).unwrap_or(0.0);
        prev = Some(row.median_miou);
        let per_seed: Vec<String> = row.seed_mious.iter().map(|v| format!("{v:.4}")).collect();
        table.push_str(&format!(
            "{:<18} {:>12} {:>8.4} {:>+8.4}  {}\n",
            row.label, row.params, row.median_miou, gain, per_seed.join(" ")
        ));
        let mut rec = Record::new();
        rec.push("modalities", &row.label)
            .push("params", row.params)
            .push("miou", format!("{:.6}", row.median_miou))
            .push("gain", format!("{gain:.6}"))
            .push("seed_mious", per_seed.join(";"));
        for (c, iou) in row.per_class_median.iter().enumerate() {
            let name = ds.manifest.classes.get(c).map(String::as_str).unwrap_or("?");
            match iou {
                Some(v) => rec.push(format!("iou.{name}"), format!("{v:.6}")),
                None => rec.push(format!("iou.{name}"), "undefined"),
            };
        }
        records.push(rec);
    }
    write_records(&out.join("modalities_records.txt"), &records)?;
    let path = out.join("modalities.txt");
    fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    inv.progress(&table);

    if inv.check {
        let gap = rows[1].median_miou - rows[0].median_miou;
        if gap < 0.25 {
            return Err(Error::Threshold(format!(
                "two-modality gain {gap:.4} below 0.25 (one: {:?}, two: {:?})",
                rows[0].seed_mious, rows[1].seed_mious
            )));
        }
        inv.progress(&format!("modality-increment check passed: gain {gap:.4} >= 0.25"));
    }
    Ok(())
}
