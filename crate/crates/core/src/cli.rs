//! The `mlcnet` command line.
//!
//! Every subcommand reads flat `key = value` settings from an optional
//! `--config` file and lets `--key value` flags override them. Each key, its
//! default and its meaning appear in the subcommand's `--help`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
//! failure.

use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::analysis::{
    benchmark_fused_vs_unfused, benchmark_inference, cam, count_flops, write_heatmap_pgm, write_heatmap_ppm,
};
use crate::config::KeyValues;
use crate::data::{generate_dataset, load_dataset, AuroraClass, LoadedDataset, Split, SynthConfig, ViewSet};
use crate::error::{Error, Result};
use crate::models::{check_compatible, load_weights, save_weights, Arch, Checkpoint, Fusion, Model, ModelConfig};
use crate::nn::Phase;
use crate::reparam::{fuse_model, verify_equivalence, VerifyConfig};
use crate::tensor::Shape;
use crate::train::{
    ablation_run, evaluate, format_wavelengths, parse_wavelengths, prepare, train, write_history_csv,
    write_results_csv, AblationCell, AblationOptions, TrainConfig,
};
use crate::util::{ensure_dir, write_atomic};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// A settable key of a subcommand.
struct Key {
    name: &'static str,
    /// Shown in `--help`; `None` marks a key without a default.
    default: Option<&'static str>,
    help: &'static str,
}

const fn key(name: &'static str, default: Option<&'static str>, help: &'static str) -> Key {
    Key { name, default, help }
}

const TRAIN_RECIPE: &[Key] = &[
    key("epochs", Some("30"), "training epochs"),
    key("batch-size", Some("16"), "samples per optimizer step"),
    key("lr", Some("1e-4"), "peak learning rate after warmup"),
    key("weight-decay", Some("0.05"), "decoupled AdamW weight decay"),
    key("warmup-epochs", Some("1"), "linear warmup length in epochs"),
    key("decay", Some("0.97"), "exponential learning-rate decay per epoch after warmup"),
    key("seed", Some("0"), "seed of initialization, data order and augmentation"),
    key("image-size", Some("64"), "side of the preprocessed images (multiple of 32)"),
    key("augment", Some("true"), "random scaling, cropping and rotation during training"),
    key("max-steps", None, "stop after this many optimizer steps"),
];

const VIEW_KEYS: &[Key] = &[
    key("wavelengths", Some("427.8,557.7,630.0"), "comma-separated views fed to the model"),
    key("fusion", Some("max"), "view fusion: max, add, min or concat"),
];

const GENERATE_KEYS: &[Key] = &[
    key("out", None, "output directory (required)"),
    key("seed", Some("7"), "dataset seed"),
    key("samples-per-class", Some("100"), "samples of each class"),
    key("size", Some("512"), "image side in pixels (at least 64)"),
    key("noise", Some("0.04"), "standard deviation of the sensor noise"),
    key("weak-emission-prob", Some("0.2"), "probability that a wavelength is only weakly excited"),
    key("imbalanced", Some("false"), "scale class counts by the observed class proportions"),
];

const TRAIN_IO: &[Key] = &[
    key("data", None, "dataset directory written by generate-data (required)"),
    key("out", None, "output directory (required)"),
    key("arch", Some("mlcnet"), "convnext-tiny, lctnet, lctnet-msrm, lctnet-lafe or mlcnet"),
];

const ABLATION_IO: &[Key] = &[
    key("data", None, "dataset directory written by generate-data (required)"),
    key("out", None, "output directory (required)"),
    key("archs", Some("mlcnet"), "comma-separated architectures"),
    key("wavelength-sets", Some("427.8+557.7+630.0"), "semicolon-separated view sets, views joined by +"),
    key("fusions", Some("add,min,concat,max"), "comma-separated fusion operations"),
    key("latency-runs", Some("10"), "timed inference runs per cell (0 skips latency)"),
];

const EVAL_KEYS: &[Key] = &[
    key("weights", None, "weight file (required)"),
    key("data", None, "dataset directory (required)"),
    key("split", Some("test"), "split to evaluate: train or test"),
    key("wavelengths", Some("427.8,557.7,630.0"), "views the model was trained on"),
    key("image-size", Some("64"), "preprocessed image side used in training"),
    key("batch-size", Some("16"), "samples per forward pass"),
    key("out", None, "directory for metrics.csv and confusion.csv"),
];

const FUSE_KEYS: &[Key] = &[
    key("weights", None, "training-phase weight file (required)"),
    key("out", None, "output weight file (required)"),
    key("verify", Some("100"), "random inputs compared between the two models (0 skips)"),
    key("tolerance", Some("1e-4"), "largest accepted logit deviation"),
    key("size", Some("64"), "side of the random probe images"),
    key("seed", Some("0"), "seed of the probe inputs"),
];

const MODEL_KEYS: &[Key] = &[
    key("arch", Some("mlcnet"), "convnext-tiny, lctnet, lctnet-msrm, lctnet-lafe or mlcnet"),
    key("views", None, "number of views (default: 3, or 1 for convnext-tiny)"),
    key("fusion", Some("max"), "view fusion: max, add, min or concat"),
    key("num-classes", Some("4"), "classifier outputs"),
    key("weights", None, "weight file; replaces the architecture keys"),
];

const ANALYZE_KEYS: &[Key] = &[
    key("input", Some("1x224x224"), "per-view input as CxHxW"),
    key("fused", Some("false"), "count the re-parameterized inference model"),
    key("out", None, "directory for cost.csv"),
];

const CAM_KEYS: &[Key] = &[
    key("weights", None, "weight file (required)"),
    key("data", None, "dataset directory (required)"),
    key("out", None, "output directory (required)"),
    key("split", Some("test"), "split to draw the sample from"),
    key("index", Some("0"), "position of the sample within the split"),
    key("class", None, "class to explain (default: the prediction)"),
    key("wavelengths", Some("427.8,557.7,630.0"), "views the model was trained on"),
    key("image-size", Some("64"), "preprocessed image side used in training"),
];

const BENCH_KEYS: &[Key] = &[
    key("input", Some("1x64x64"), "per-view input as CxHxW"),
    key("batch", Some("1"), "samples per forward pass"),
    key("warmup", Some("3"), "untimed passes before measuring"),
    key("runs", Some("20"), "timed passes (at least 10)"),
];

struct Sub {
    name: &'static str,
    about: &'static str,
    keys: Vec<&'static Key>,
}

fn subcommands() -> Vec<Sub> {
    let cat = |groups: &[&'static [Key]]| groups.iter().flat_map(|g| g.iter()).collect::<Vec<_>>();
    vec![
        Sub {
            name: "generate-data",
            about: "Write a synthetic three-wavelength dataset with a manifest",
            keys: cat(&[GENERATE_KEYS]),
        },
        Sub {
            name: "train",
            about: "Train a model; writes history.csv, weights.mlcw, metrics.csv and eval.conf",
            keys: cat(&[TRAIN_IO, VIEW_KEYS, TRAIN_RECIPE]),
        },
        Sub {
            name: "ablation",
            about: "Train and evaluate a grid of architectures, view sets and fusions; writes results.csv",
            keys: cat(&[ABLATION_IO, TRAIN_RECIPE]),
        },
        Sub {
            name: "eval",
            about: "Evaluate a weight file on a dataset split",
            keys: cat(&[EVAL_KEYS]),
        },
        Sub {
            name: "fuse",
            about: "Re-parameterize training weights into the inference model and verify equivalence",
            keys: cat(&[FUSE_KEYS]),
        },
        Sub {
            name: "analyze",
            about: "Count parameters and FLOPs (multiply-accumulates) per layer",
            keys: cat(&[MODEL_KEYS, ANALYZE_KEYS]),
        },
        Sub {
            name: "cam",
            about: "Write class activation maps of one sample as PGM and PPM images",
            keys: cat(&[CAM_KEYS]),
        },
        Sub {
            name: "bench",
            about: "Measure single-worker inference latency, fused against unfused",
            keys: cat(&[MODEL_KEYS, BENCH_KEYS]),
        },
    ]
}

fn command() -> Command {
    let mut cmd = Command::new("mlcnet")
        .about("Multi-view lightweight CNN for multi-wavelength aurora images")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in subcommands() {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("`key = value` file; flags override its entries"),
        );
        for k in &sub.keys {
            let help = match k.default {
                Some(d) => format!("{} [default: {d}]", k.help),
                None => k.help.to_string(),
            };
            c = c.arg(
                Arg::new(k.name)
                    .long(k.name)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

/// Settings of one invocation: config file entries overridden by flags.
fn settings(sub: &Sub, m: &ArgMatches) -> Result<KeyValues> {
    let names: Vec<&str> = sub.keys.iter().map(|k| k.name).collect();
    let mut kv = match m.get_one::<PathBuf>("config") {
        Some(p) => {
            let kv = KeyValues::load(p)?;
            kv.check_known(&names)?;
            kv
        }
        None => KeyValues::new(),
    };
    for name in names {
        if let Some(v) = m.get_one::<String>(name) {
            kv.set(name, v.clone());
        }
    }
    Ok(kv)
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let Some((name, sub_m)) = matches.subcommand() else {
        return EXIT_USAGE;
    };
    let subs = subcommands();
    let Some(sub) = subs.iter().find(|s| s.name == name) else {
        return EXIT_USAGE;
    };
    let result = settings(sub, sub_m).and_then(|kv| dispatch(name, &kv));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn dispatch(name: &str, kv: &KeyValues) -> Result<i32> {
    match name {
        "generate-data" => cmd_generate(kv),
        "train" => cmd_train(kv),
        "ablation" => cmd_ablation(kv),
        "eval" => cmd_eval(kv),
        "fuse" => cmd_fuse(kv),
        "analyze" => cmd_analyze(kv),
        "cam" => cmd_cam(kv),
        "bench" => cmd_bench(kv),
        _ => Err(Error::Usage(format!("unknown subcommand {name:?}"))),
    }
}

fn usage<E: std::fmt::Display>(key: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Usage(format!("--{key}: {e}"))
}

fn load_data(dir: &Path) -> Result<LoadedDataset> {
    let data = load_dataset(dir)?;
    for r in &data.rejects {
        eprintln!("warning: skipped {r}");
    }
    if data.samples.is_empty() {
        return Err(Error::InvalidArgument(format!("no usable samples in {}", dir.display())));
    }
    Ok(data)
}

fn cmd_generate(kv: &KeyValues) -> Result<i32> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        size: kv.get_or("size", d.size)?,
        samples_per_class: kv.get_or("samples-per-class", d.samples_per_class)?,
        seed: kv.get_or("seed", d.seed)?,
        noise: kv.get_or("noise", d.noise)?,
        weak_emission_prob: kv.get_or("weak-emission-prob", d.weak_emission_prob)?,
        imbalanced: kv.get_or("imbalanced", d.imbalanced)?,
        ..d
    };
    cfg.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let out: PathBuf = kv.require("out")?;
    let rows = generate_dataset(&cfg, &out)?;
    let train = rows.iter().filter(|r| r.split == Split::Train).count();
    println!(
        "wrote {} samples ({} train, {} test) of {}x{} pixels to {}",
        rows.len(),
        train,
        rows.len() - train,
        cfg.size,
        cfg.size,
        out.display()
    );
    Ok(EXIT_OK)
}

fn train_config(kv: &KeyValues) -> Result<TrainConfig> {
    let recipe: Vec<&str> = TRAIN_RECIPE.iter().chain(VIEW_KEYS).map(|k| k.name).collect();
    let mut sub = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| recipe.contains(k)) {
        sub.set(k, v);
    }
    TrainConfig::from_kv(&sub)
}

const CLASS_NAMES: [&str; 4] = ["arc", "drapery", "hotspot", "radial"];

fn cmd_train(kv: &KeyValues) -> Result<i32> {
    let cfg = train_config(kv)?;
    let arch: Arch = kv.get_or("arch", Arch::MlcNet).map_err(usage("arch"))?;
    let data_dir: PathBuf = kv.require("data")?;
    let out: PathBuf = kv.require("out")?;
    let config = ModelConfig::new(arch)
        .with_views(cfg.wavelengths.len())
        .with_fusion(cfg.fusion);
    let model = Model::new(config.clone())?;
    let data = load_data(&data_dir)?;
    let tr = prepare(&data.split(Split::Train), &cfg.wavelengths, cfg.image_size)?;
    let te = prepare(&data.split(Split::Test), &cfg.wavelengths, cfg.image_size)?;
    println!(
        "training {} on [{}] with {} fusion: {} train / {} test samples",
        arch,
        format_wavelengths(&cfg.wavelengths),
        cfg.fusion,
        tr.len(),
        te.len()
    );
    let outcome = train(&cfg, &model, model.init(cfg.seed)?, &tr, Some(&te), |r| {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  val acc {}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val_acc.map_or("-".into(), |a| format!("{a:.4}"))
        )
    })?;
    ensure_dir(&out)?;
    write_history_csv(&out.join("history.csv"), &outcome.history)?;
    let weights = out.join("weights.mlcw");
    save_weights(
        &weights,
        &Checkpoint {
            config,
            phase: Phase::Training,
            store: outcome.store.clone(),
        },
    )?;
    if !te.is_empty() {
        let (cm, report) = evaluate(&model, &outcome.store, Phase::Training, &te, cfg.batch_size)?;
        write_atomic(&out.join("metrics.csv"), &report.to_csv(&CLASS_NAMES)?)?;
        print!("{report}confusion (rows true, columns predicted)\n{cm}");
    }
    let mut eval_conf = KeyValues::new();
    eval_conf.set("weights", weights.display().to_string());
    eval_conf.set("wavelengths", format_wavelengths(&cfg.wavelengths));
    eval_conf.set("image-size", cfg.image_size.to_string());
    write_atomic(&out.join("eval.conf"), eval_conf.render().as_bytes())?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

fn list<T: std::str::FromStr<Err = Error>>(key: &str, s: &str, sep: char) -> Result<Vec<T>> {
    s.split(sep)
        .map(|t| t.trim().parse::<T>())
        .collect::<Result<Vec<T>>>()
        .map_err(usage(key))
}

fn cmd_ablation(kv: &KeyValues) -> Result<i32> {
    let cfg = train_config(kv)?;
    let archs: Vec<Arch> = list("archs", kv.raw("archs").unwrap_or("mlcnet"), ',')?;
    let fusions: Vec<Fusion> = list("fusions", kv.raw("fusions").unwrap_or("add,min,concat,max"), ',')?;
    let sets = kv
        .raw("wavelength-sets")
        .unwrap_or("427.8+557.7+630.0")
        .split(';')
        .map(|s| parse_wavelengths(&s.replace('+', ",")).map_err(usage("wavelength-sets")))
        .collect::<Result<Vec<_>>>()?;
    let opts = AblationOptions {
        latency_runs: kv.get_or("latency-runs", AblationOptions::default().latency_runs)?,
    };
    let data_dir: PathBuf = kv.require("data")?;
    let out: PathBuf = kv.require("out")?;
    let mut grid = Vec::new();
    for &a in &archs {
        for ws in &sets {
            for &f in &fusions {
                grid.push(AblationCell::new(a, ws, f));
            }
        }
    }
    let data = load_data(&data_dir)?;
    let rows = ablation_run(&grid, &cfg, &data.split(Split::Train), &data.split(Split::Test), &opts, |r| match &r.failure {
        None => println!(
            "{}: acc {:.4}  avg_acc {:.4}  macro-F1 {:.4}  params {}  FLOPs {}",
            r.cell, r.acc, r.avg_acc, r.macro_f1, r.params, r.flops
        ),
        Some(e) => println!("{}: failed: {e}", r.cell),
    })?;
    ensure_dir(&out)?;
    write_results_csv(&out.join("results.csv"), &rows)?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    if failed > 0 {
        eprintln!("error: {failed} of {} cells failed", rows.len());
        return Ok(EXIT_RUNTIME);
    }
    Ok(EXIT_OK)
}

fn load_checkpoint(kv: &KeyValues) -> Result<(Checkpoint, Model)> {
    let path: PathBuf = kv.require("weights")?;
    let ck = load_weights(&path)?;
    let model = Model::new(ck.config.clone())?;
    check_compatible(&ck, &model, ck.phase)?;
    Ok((ck, model))
}

fn data_views(kv: &KeyValues, model: &Model) -> Result<(Vec<crate::data::Wavelength>, usize)> {
    let ws = parse_wavelengths(kv.raw("wavelengths").unwrap_or("427.8,557.7,630.0")).map_err(usage("wavelengths"))?;
    if ws.len() != model.config.views {
        return Err(Error::Usage(format!(
            "--wavelengths lists {} views but the weights expect {}",
            ws.len(),
            model.config.views
        )));
    }
    Ok((ws, kv.get_or("image-size", 64usize)?))
}

fn cmd_eval(kv: &KeyValues) -> Result<i32> {
    let (ck, model) = load_checkpoint(kv)?;
    let (ws, size) = data_views(kv, &model)?;
    let split: Split = kv.get_or("split", Split::Test)?;
    let batch: usize = kv.get_or("batch-size", 16usize)?;
    let data = load_data(&kv.require::<PathBuf>("data")?)?;
    let set = prepare(&data.split(split), &ws, size)?;
    if set.is_empty() {
        return Err(Error::InvalidArgument(format!("the {split} split is empty")));
    }
    let (cm, report) = evaluate(&model, &ck.store, ck.phase, &set, batch)?;
    println!("{} samples of the {split} split, {} phase", set.len(), ck.phase.name());
    print!("{report}confusion (rows true, columns predicted)\n{cm}");
    if let Some(out) = kv.get::<PathBuf>("out")? {
        ensure_dir(&out)?;
        write_atomic(&out.join("metrics.csv"), &report.to_csv(&CLASS_NAMES)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("true\\pred").chain(CLASS_NAMES))?;
        for (i, name) in CLASS_NAMES.iter().enumerate().take(cm.classes()) {
            let counts = (0..cm.classes()).map(|j| cm.get(i, j).to_string());
            w.write_record(std::iter::once(name.to_string()).chain(counts))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(&out.join("confusion.csv"), &bytes)?;
    }
    Ok(EXIT_OK)
}

fn cmd_fuse(kv: &KeyValues) -> Result<i32> {
    let (ck, model) = load_checkpoint(kv)?;
    let out: PathBuf = kv.require("out")?;
    if ck.phase != Phase::Training {
        return Err(Error::InvalidState("weights are already fused".into()));
    }
    let fused = fuse_model(&model, &ck.store)?;
    for name in &fused.default_stats {
        eprintln!("warning: {name} still has initial batch-norm statistics");
    }
    let d = VerifyConfig::default();
    let vcfg = VerifyConfig {
        samples: kv.get_or("verify", d.samples)?,
        tolerance: kv.get_or("tolerance", d.tolerance)?,
        size: kv.get_or("size", d.size)?,
        seed: kv.get_or("seed", d.seed)?,
        ..d
    };
    save_weights(
        &out,
        &Checkpoint {
            config: ck.config.clone(),
            phase: Phase::Inference,
            store: fused.store.clone(),
        },
    )?;
    println!("wrote {}", out.display());
    if vcfg.samples == 0 {
        return Ok(EXIT_OK);
    }
    let report = verify_equivalence(&model, &ck.store, &fused, &vcfg)?;
    print!("{report}");
    Ok(if report.passed { EXIT_OK } else { EXIT_VERIFY })
}

/// A model and its parameters from `--weights`, or freshly initialized from
/// the architecture keys.
fn model_from_keys(kv: &KeyValues) -> Result<(Model, Checkpoint)> {
    if kv.raw("weights").is_some() {
        let (ck, model) = load_checkpoint(kv)?;
        return Ok((model, ck));
    }
    let arch: Arch = kv.get_or("arch", Arch::MlcNet).map_err(usage("arch"))?;
    let d = ModelConfig::new(arch);
    let (c, _, _) = input_dims(kv, "1x224x224")?;
    let config = ModelConfig {
        views: kv.get_or("views", d.views)?,
        fusion: kv.get_or("fusion", d.fusion)?,
        num_classes: kv.get_or("num-classes", d.num_classes)?,
        in_channels: c,
        ..d
    };
    config.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let model = Model::new(config.clone())?;
    let store = model.init(0)?;
    Ok((
        model,
        Checkpoint {
            config,
            phase: Phase::Training,
            store,
        },
    ))
}

/// Parses `--input CxHxW`.
fn input_dims(kv: &KeyValues, default: &str) -> Result<(usize, usize, usize)> {
    let s = kv.raw("input").unwrap_or(default);
    let parts: Vec<usize> = s
        .split('x')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(usage("input"))?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(Error::Usage(format!("--input: expected CxHxW, got {s:?}"))),
    }
}

fn cmd_analyze(kv: &KeyValues) -> Result<i32> {
    let (model, ck) = model_from_keys(kv)?;
    let (c, h, w) = input_dims(kv, "1x224x224")?;
    if c != model.config.in_channels {
        return Err(Error::Usage(format!(
            "--input has {c} channels but the model takes {}",
            model.config.in_channels
        )));
    }
    let (store, phase) = if kv.get_or("fused", false)? && ck.phase == Phase::Training {
        (fuse_model(&model, &ck.store)?.store, Phase::Inference)
    } else {
        (ck.store, ck.phase)
    };
    let report = count_flops(&model, &store, phase, Shape::new(1, c, h, w))?;
    println!(
        "{} with {} view(s), {} phase, input {c}x{h}x{w}",
        model.config.arch,
        model.config.views,
        phase.name()
    );
    print!("{report}");
    if let Some(out) = kv.get::<PathBuf>("out")? {
        ensure_dir(&out)?;
        report.write_csv(&out.join("cost.csv"))?;
    }
    Ok(EXIT_OK)
}

fn cmd_cam(kv: &KeyValues) -> Result<i32> {
    let (ck, model) = load_checkpoint(kv)?;
    let (ws, size) = data_views(kv, &model)?;
    let split: Split = kv.get_or("split", Split::Test)?;
    let index: usize = kv.get_or("index", 0usize)?;
    let class = match kv.raw("class") {
        None => None,
        Some(s) => Some(match s.parse::<usize>() {
            Ok(c) => c,
            Err(_) => s.parse::<AuroraClass>().map_err(usage("class"))?.code(),
        }),
    };
    let out: PathBuf = kv.require("out")?;
    let data = load_data(&kv.require::<PathBuf>("data")?)?;
    let samples = data.split(split);
    let sample: &ViewSet = samples
        .get(index)
        .ok_or_else(|| Error::Usage(format!("--index {index}: the {split} split has {} samples", samples.len())))?;
    let set = prepare(&[sample], &ws, size)?;
    let tags: Vec<String> = ws.iter().map(|w| w.tag().to_string()).collect();
    let maps = cam(&model, &ck.store, ck.phase, &set.views[0], &tags, class)?;
    ensure_dir(&out)?;
    for m in &maps {
        let stem = format!("{}_{}_{}", sample.class, sample.id, m.tag);
        write_heatmap_pgm(&out.join(format!("{stem}.pgm")), &m.heatmap)?;
        write_heatmap_ppm(&out.join(format!("{stem}.ppm")), &m.heatmap)?;
    }
    let name = |c: usize| AuroraClass::from_code(c).map_or(c.to_string(), |a| a.to_string());
    println!(
        "sample {}/{} ({}): predicted {}, maps for {} written to {}",
        sample.class,
        sample.id,
        split,
        name(maps[0].predicted),
        name(maps[0].class),
        out.display()
    );
    Ok(EXIT_OK)
}

fn cmd_bench(kv: &KeyValues) -> Result<i32> {
    let (model, ck) = model_from_keys(kv)?;
    let (c, h, w) = input_dims(kv, "1x64x64")?;
    let batch: usize = kv.get_or("batch", 1usize)?;
    let warmup: usize = kv.get_or("warmup", 3usize)?;
    let runs: usize = kv.get_or("runs", 20usize)?;
    let input = Shape::new(batch, c, h, w);
    println!("{} with {} view(s), input {batch}x{c}x{h}x{w}", model.config.arch, model.config.views);
    if ck.phase == Phase::Inference || model.rec_blocks().is_empty() {
        let stats = benchmark_inference(&model, &ck.store, ck.phase, input, warmup, runs)?;
        println!("{} {stats}", ck.phase.name());
    } else {
        let report = benchmark_fused_vs_unfused(&model, &ck.store, input, warmup, runs)?;
        println!("{report}");
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn help_and_usage_exit_codes() {
        assert_eq!(run(["mlcnet", "--help"]), EXIT_OK);
        assert_eq!(run(["mlcnet"]), EXIT_USAGE);
        assert_eq!(run(["mlcnet", "train", "--no-such-key", "1"]), EXIT_USAGE);
        assert_eq!(run(["mlcnet", "train", "--epochs", "x", "--data", "d", "--out", "o"]), EXIT_USAGE);
        assert_eq!(run(["mlcnet", "train", "--epochs", "1"]), EXIT_USAGE);
        assert_eq!(run(["mlcnet", "analyze", "--input", "1x224"]), EXIT_USAGE);
    }

    #[test]
    fn config_file_keys_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("a.conf");
        std::fs::write(&cfg, "bogus = 1\n").unwrap();
        let c = cfg.to_str().unwrap();
        assert_eq!(run(["mlcnet", "analyze", "--config", c]), EXIT_USAGE);
        std::fs::write(&cfg, "arch = lctnet\ninput = 1x64x64 # small\n").unwrap();
        assert_eq!(run(["mlcnet", "analyze", "--config", c, "--views", "1"]), EXIT_OK);
    }

    #[test]
    fn missing_files_are_runtime_errors() {
        assert_eq!(run(["mlcnet", "eval", "--weights", "/nonexistent/w.mlcw", "--data", "/nonexistent"]), EXIT_RUNTIME);
    }
}
