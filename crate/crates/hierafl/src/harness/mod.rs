//! Experiment harness: data loading, evaluation, the round-by-round
//! experiment driver, the three-mode ablation driver, and partition
//! reporting. Everything a run produces — `metrics.csv`, `summary.txt`,
//! `model.hfl1` — lands in the configured output directory, and a rerun
//! with the same config is byte-identical.

pub mod config;

pub use config::{DatasetConfig, ExperimentConfig, ModelConfig, PartitionConfig};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{self, Dataset, PartitionPlan};
use crate::ensemble::{weighted_sum, DistillMode};
use crate::error::{Error, Result};
use crate::model::{checkpoint, forward_all_exits, HierarchyNetSpec, ParameterStore};
use crate::protocol::{self, DeviceState, ServerState};
use crate::rng::{self, stream};
use crate::tensor::{argmax_rows, Array};

/// Test accuracies, in percent.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Exit i's accuracy at index i−1.
    pub per_exit: Vec<f64>,
    /// Accuracy of argmax over the weighted probability mixture.
    pub ensemble: f64,
}

fn accuracy_percent(scores: &Array, labels: &[usize]) -> Result<f64> {
    let preds = argmax_rows(scores)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Accuracy of every exit plus the weighted ensemble on a test set, in one
/// deterministic full-batch pass. Ties in the argmax go to the lowest class
/// index.
pub fn evaluate(
    store: &ParameterStore,
    spec: &HierarchyNetSpec,
    meta_weights: &[f64],
    test: &Dataset,
) -> Result<EvalReport> {
    if test.num_classes != spec.num_classes {
        return Err(Error::InvalidArgument(format!(
            "test set declares {} classes but the model has {}",
            test.num_classes, spec.num_classes
        )));
    }
    if test.input_dim() != spec.input_dim {
        return Err(Error::InvalidArgument(format!(
            "test set has {} features but the model expects {}",
            test.input_dim(),
            spec.input_dim
        )));
    }
    if meta_weights.len() != spec.num_exits {
        return Err(Error::InvalidArgument(format!(
            "{} meta weights for {} exits",
            meta_weights.len(),
            spec.num_exits
        )));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let (x, y) = test.gather(&all)?;
    let outputs = forward_all_exits(store, spec, &x)?;
    let per_exit = outputs
        .logits
        .iter()
        .map(|logits| accuracy_percent(logits, &y))
        .collect::<Result<Vec<_>>>()?;
    let p_m = weighted_sum(meta_weights, &outputs.probs)?;
    let ensemble = accuracy_percent(&p_m, &y)?;
    Ok(EvalReport { per_exit, ensemble })
}

/// One `metrics.csv` line.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: u64,
    pub lr: f64,
    pub per_exit: Vec<f64>,
    pub ensemble: f64,
    pub loss_meta: f64,
    pub loss_distill: f64,
    pub meta_weights: Vec<f64>,
}

/// Fixed column order: `round,lr,acc_1..acc_K,acc_ensemble,loss_meta,loss_distill,m_1..m_K`.
pub fn metrics_header(num_exits: usize) -> String {
    let mut h = String::from("round,lr");
    for i in 1..=num_exits {
        let _ = write!(h, ",acc_{i}");
    }
    h.push_str(",acc_ensemble,loss_meta,loss_distill");
    for i in 1..=num_exits {
        let _ = write!(h, ",m_{i}");
    }
    h
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.round, self.lr);
        for a in &self.per_exit {
            let _ = write!(s, ",{a}");
        }
        let _ = write!(
            s,
            ",{},{},{}",
            self.ensemble, self.loss_meta, self.loss_distill
        );
        for m in &self.meta_weights {
            let _ = write!(s, ",{m}");
        }
        s
    }
}

/// Train/test pair with one agreed class count and input width.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
}

fn unify(mut train: Dataset, mut test: Dataset) -> Result<LoadedData> {
    if train.input_dim() != test.input_dim() {
        return Err(Error::Data(format!(
            "train examples carry {} features but test examples carry {}",
            train.input_dim(),
            test.input_dim()
        )));
    }
    let classes = train.num_classes.max(test.num_classes);
    train.num_classes = classes;
    test.num_classes = classes;
    Ok(LoadedData { train, test })
}

/// Materialize the configured dataset. Synthetic train and test sets come
/// from one generation pass (shared class centers), split per class.
pub fn load_dataset(cfg: &DatasetConfig, master_seed: u64) -> Result<LoadedData> {
    match cfg {
        DatasetConfig::Synthetic {
            classes,
            input_dim,
            per_class,
            test_per_class,
            spread,
        } => {
            let total = per_class + test_per_class;
            let full = data::generate_synthetic(
                *classes,
                *input_dim,
                total,
                *spread,
                rng::derive(master_seed, &[stream::SYNTH_DATA]),
            )?;
            // generation is class-major: class c occupies c·total..(c+1)·total
            let mut train_idx = Vec::with_capacity(classes * per_class);
            let mut test_idx = Vec::with_capacity(classes * test_per_class);
            for c in 0..*classes {
                for j in 0..total {
                    if j < *per_class {
                        train_idx.push(c * total + j);
                    } else {
                        test_idx.push(c * total + j);
                    }
                }
            }
            Ok(LoadedData {
                train: full.subset(&train_idx)?,
                test: full.subset(&test_idx)?,
            })
        }
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => unify(
            data::idx::load_idx(train_images, train_labels)?,
            data::idx::load_idx(test_images, test_labels)?,
        ),
        DatasetConfig::Csv { train, test } => {
            unify(data::csv::load_csv(train)?, data::csv::load_csv(test)?)
        }
    }
}

fn partition_remainder(cfg: &ExperimentConfig, remainder: &Dataset) -> Result<PartitionPlan> {
    let seed = rng::derive(cfg.seed, &[stream::PARTITION]);
    match cfg.partition {
        PartitionConfig::Iid => data::iid_partition(remainder, cfg.devices, seed),
        PartitionConfig::Dirichlet { alpha } => {
            data::dirichlet_partition(remainder, cfg.devices, alpha, seed)
        }
    }
}

fn build_spec(cfg: &ExperimentConfig, train: &Dataset) -> Result<HierarchyNetSpec> {
    let spec = HierarchyNetSpec {
        num_exits: cfg.model.exits,
        input_dim: train.input_dim(),
        trunk_widths: cfg.model.trunk_widths.clone(),
        feature_dim: cfg.model.feature_dim,
        num_classes: train.num_classes,
    };
    spec.validate()?;
    Ok(spec)
}

/// Paths and rows a finished experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run the full configured experiment: load → public split → partition →
/// enroll devices round-robin over capabilities 1..=K → R rounds → emit
/// `metrics.csv`, `summary.txt`, and a final `model.hfl1` checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let loaded = load_dataset(&cfg.dataset, cfg.seed)?;
    let split = data::split_public(
        &loaded.train,
        cfg.public_fraction,
        rng::derive(cfg.seed, &[stream::PUBLIC_SPLIT]),
    )?;
    let plan = partition_remainder(cfg, &split.remainder)?;
    let spec = build_spec(cfg, &loaded.train)?;

    let mut server = ServerState::new(spec.clone(), rng::derive(cfg.seed, &[stream::INIT]))?;
    let mut devices: Vec<DeviceState> = Vec::with_capacity(cfg.devices);
    for d in 0..cfg.devices {
        let capability = 1 + d % spec.num_exits;
        let device_data = split.remainder.subset(&plan.assignment[d])?;
        devices.push(server.add_device(d, capability, device_data)?);
    }

    let mut rows = Vec::with_capacity(cfg.round.rounds);
    for _ in 0..cfg.round.rounds {
        let outcome = protocol::run_round(
            &mut server,
            &mut devices,
            &cfg.round,
            &cfg.distill,
            &split.public,
        )?;
        let weights = server.library().weights()?;
        let report = evaluate(server.global(), server.spec(), &weights, &loaded.test)?;
        rows.push(MetricsRow {
            round: outcome.round,
            lr: outcome.lr,
            per_exit: report.per_exit,
            ensemble: report.ensemble,
            loss_meta: outcome.distill.mean_meta_loss,
            loss_distill: outcome.distill.mean_distill_loss,
            meta_weights: weights,
        });
    }

    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut text = metrics_header(spec.num_exits);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    write_text(&metrics_path, &text)?;

    let checkpoint_path = cfg.out_dir.join("model.hfl1");
    checkpoint::save(
        server.global(),
        Some(server.library().meta_logits()),
        &checkpoint_path,
    )?;

    let summary_path = cfg.out_dir.join("summary.txt");
    let last = rows.last().expect("at least one round ran");
    let mut summary = String::new();
    let _ = writeln!(summary, "seed = {}", cfg.seed);
    let kind = match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => "synthetic",
        DatasetConfig::Idx { .. } => "idx",
        DatasetConfig::Csv { .. } => "csv",
    };
    let _ = writeln!(summary, "dataset = {kind}");
    let _ = writeln!(summary, "classes = {}", spec.num_classes);
    let _ = writeln!(summary, "input_dim = {}", spec.input_dim);
    let _ = writeln!(summary, "train_examples = {}", loaded.train.len());
    let _ = writeln!(summary, "public_examples = {}", split.public.len());
    let _ = writeln!(summary, "test_examples = {}", loaded.test.len());
    let _ = writeln!(summary, "devices = {}", cfg.devices);
    let _ = writeln!(summary, "exits = {}", spec.num_exits);
    let _ = writeln!(summary, "rounds = {}", cfg.round.rounds);
    let _ = writeln!(summary, "distill_mode = {}", cfg.distill.mode.as_str());
    for (i, acc) in last.per_exit.iter().enumerate() {
        let _ = writeln!(summary, "final_acc_{} = {acc}", i + 1);
    }
    let _ = writeln!(summary, "final_acc_ensemble = {}", last.ensemble);
    for (i, m) in last.meta_weights.iter().enumerate() {
        let _ = writeln!(summary, "final_m_{} = {m}", i + 1);
    }
    write_text(&summary_path, &summary)?;

    Ok(ExperimentOutput {
        rows,
        metrics_path,
        summary_path,
        checkpoint_path,
    })
}

/// The three-mode comparison a single config fans out into.
#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub runs: Vec<(DistillMode, ExperimentOutput)>,
    pub summary_path: PathBuf,
}

/// Run the same seeded experiment under off / logits_only / full, in
/// parallel, each into its own subdirectory, and write a comparison
/// summary of the final accuracies.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationOutput> {
    cfg.validate()?;
    let modes = [DistillMode::Off, DistillMode::LogitsOnly, DistillMode::Full];
    let runs: Vec<(DistillMode, ExperimentOutput)> = modes
        .par_iter()
        .map(|&mode| {
            let mut sub = cfg.clone();
            sub.distill.mode = mode;
            sub.out_dir = cfg.out_dir.join(mode.as_str());
            run_experiment(&sub).map(|out| (mode, out))
        })
        .collect::<Result<_>>()?;

    let k = cfg.model.exits;
    let mut text = String::new();
    for (mode, out) in &runs {
        let last = out.rows.last().expect("at least one round ran");
        let _ = writeln!(
            text,
            "mode = {}: final_acc_1 = {}, final_acc_{k} = {}, final_acc_ensemble = {}",
            mode.as_str(),
            last.per_exit[0],
            last.per_exit[k - 1],
            last.ensemble
        );
    }
    let summary_path = cfg.out_dir.join("ablation_summary.txt");
    write_text(&summary_path, &text)?;
    Ok(AblationOutput { runs, summary_path })
}

/// Per-device class histogram of the configured partition, as a printable
/// table.
pub fn partition_report(cfg: &ExperimentConfig) -> Result<String> {
    cfg.validate()?;
    let loaded = load_dataset(&cfg.dataset, cfg.seed)?;
    let split = data::split_public(
        &loaded.train,
        cfg.public_fraction,
        rng::derive(cfg.seed, &[stream::PUBLIC_SPLIT]),
    )?;
    let plan = partition_remainder(cfg, &split.remainder)?;
    let hists = plan.class_histograms(&split.remainder)?;
    let classes = split.remainder.num_classes;

    let mut s = String::new();
    let _ = write!(s, "{:>7}", "device");
    for c in 0..classes {
        let _ = write!(s, "{:>7}", format!("c{c}"));
    }
    let _ = writeln!(s, "{:>8}", "total");
    for (d, hist) in hists.iter().enumerate() {
        let _ = write!(s, "{d:>7}");
        for n in hist {
            let _ = write!(s, "{n:>7}");
        }
        let _ = writeln!(s, "{:>8}", hist.iter().sum::<usize>());
    }
    let _ = writeln!(
        s,
        "public: {} examples; remainder: {} examples over {} devices",
        split.public.len(),
        split.remainder.len(),
        plan.num_devices
    );
    Ok(s)
}

/// Parse an `eval --data` specifier.
///
/// Forms: `csv:<path>`; `idx:images=<path>,labels=<path>`;
/// `synthetic:classes=10,input_dim=64,per_class=200,test_per_class=50,spread=0.35,seed=1234,split=test`
/// (every synthetic key optional, preset defaults; `split` is `test`,
/// `train`, or `all` — `test` reproduces the test set an experiment with
/// the same seed evaluated on).
pub fn parse_data_spec(s: &str) -> Result<Dataset> {
    let (kind, rest) = s
        .split_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("data spec {s:?}: expected `kind:…`")))?;
    match kind {
        "csv" => data::csv::load_csv(Path::new(rest)),
        "idx" => {
            let kv = parse_kv(rest)?;
            let mut images = None;
            let mut labels = None;
            for (k, v) in kv {
                match k.as_str() {
                    "images" => images = Some(v),
                    "labels" => labels = Some(v),
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "data spec: unknown idx key {other:?}"
                        )))
                    }
                }
            }
            let images = images
                .ok_or_else(|| Error::InvalidArgument("data spec: idx needs images=…".into()))?;
            let labels = labels
                .ok_or_else(|| Error::InvalidArgument("data spec: idx needs labels=…".into()))?;
            data::idx::load_idx(Path::new(&images), Path::new(&labels))
        }
        "synthetic" => {
            let preset = match ExperimentConfig::default().dataset {
                DatasetConfig::Synthetic {
                    classes,
                    input_dim,
                    per_class,
                    test_per_class,
                    spread,
                } => (classes, input_dim, per_class, test_per_class, spread),
                _ => unreachable!("preset dataset is synthetic"),
            };
            let (mut classes, mut input_dim, mut per_class, mut test_per_class, mut spread) =
                preset;
            let mut seed = 1234u64;
            let mut split = "test".to_string();
            for (k, v) in parse_kv(rest)? {
                match k.as_str() {
                    "classes" => classes = parse_spec_num(&k, &v)?,
                    "input_dim" => input_dim = parse_spec_num(&k, &v)?,
                    "per_class" => per_class = parse_spec_num(&k, &v)?,
                    "test_per_class" => test_per_class = parse_spec_num(&k, &v)?,
                    "spread" => spread = parse_spec_num(&k, &v)?,
                    "seed" => seed = parse_spec_num(&k, &v)?,
                    "split" => split = v,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "data spec: unknown synthetic key {other:?}"
                        )))
                    }
                }
            }
            let loaded = load_dataset(
                &DatasetConfig::Synthetic {
                    classes,
                    input_dim,
                    per_class,
                    test_per_class,
                    spread,
                },
                seed,
            )?;
            match split.as_str() {
                "test" => Ok(loaded.test),
                "train" => Ok(loaded.train),
                "all" => {
                    let total = per_class + test_per_class;
                    data::generate_synthetic(
                        classes,
                        input_dim,
                        total,
                        spread,
                        rng::derive(seed, &[stream::SYNTH_DATA]),
                    )
                }
                other => Err(Error::InvalidArgument(format!(
                    "data spec: split must be test | train | all, got {other:?}"
                ))),
            }
        }
        other => Err(Error::InvalidArgument(format!(
            "data spec: unknown kind {other:?} (expected csv | idx | synthetic)"
        ))),
    }
}

fn parse_kv(s: &str) -> Result<Vec<(String, String)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("data spec: expected key=value, got {pair:?}"))
                })
        })
        .collect()
}

fn parse_spec_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("data spec: {key}: invalid value {value:?}")))
}
