//! `melm` command line: gen, train, eval, inspect.
//!
//! Settings resolve as flags over an optional JSON config file over
//! built-in defaults. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! validation error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{generate_synthetic, load_dataset, save_dataset, write_atomic, Dataset, SynthConfig};
use crate::entropy::{
    clique_class_probs, clique_means, clique_weights, global_entropy, hard_negatives, localization_loss,
    partition_cliques, select_clique, select_object, softmax_rows,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, localization_summary, proposal_probs, EvalSettings, MetricsReport};
use crate::model::{forward, Head};
use crate::trainer::{append_csv, load_checkpoint, save_checkpoint, Ablation, Checkpoint, TrainConfig, Trainer};

/// Contents of the optional `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "melm",
    version,
    about = "Weakly supervised localization by entropy minimization over proposal bags"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a dataset with ground truth.
    Eval(EvalArgs),
    /// Dump the clique partition and pseudo object of one bag as JSON.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Total positive bags, split evenly across classes.
    #[arg(long)]
    pub bags: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub proposals: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub part_fraction: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub part_gain: Option<f64>,
    #[arg(long)]
    pub feature_scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint written at the end of the run.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch reports are appended here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Continue from a checkpoint; its config is the base for overrides.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_late: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub kernel_a: Option<f64>,
    #[arg(long)]
    pub branches: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One of base, clique, d, l, l-rl, l-arl.
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Stop localization gradients at the shared hidden layer.
    #[arg(long)]
    pub no_shared_hidden: bool,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Print one JSON line per epoch to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the headline metrics as a one-row CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub nms_iou: Option<f64>,
    #[arg(long)]
    pub score_floor: Option<f64>,
    /// Add mAP averaged over IoU 0.5:0.95.
    #[arg(long)]
    pub coco: bool,
    /// Scale features by the checkpoint's training object scores.
    #[arg(long)]
    pub train_scores: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub bag: String,
    /// Class to inspect; defaults to the bag's first positive class.
    #[arg(long)]
    pub class: Option<usize>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn resolve_synth(a: &GenArgs, file: &RunConfig) -> Result<SynthConfig> {
    let mut cfg = file.synth.clone();
    if let Some(c) = a.classes {
        cfg.num_classes = c;
    }
    if let Some(total) = a.bags {
        if cfg.num_classes == 0 || total % cfg.num_classes != 0 {
            return Err(Error::InvalidConfig(format!(
                "--bags {total} is not divisible by {} classes",
                cfg.num_classes
            )));
        }
        cfg.bags_per_class = total / cfg.num_classes;
    }
    if let Some(v) = a.negatives {
        cfg.negatives = v;
    }
    if let Some(v) = a.proposals {
        cfg.proposals_per_bag = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = a.part_fraction {
        cfg.part_fraction = v;
    }
    if let Some(v) = a.noise {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.part_gain {
        cfg.part_gain = v;
    }
    if let Some(v) = a.feature_scale {
        cfg.feature_scale = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let cfg = resolve_synth(&a, &file)?;
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    let positives = ds.bags.iter().filter(|b| b.labels.contains(&1)).count();
    print_json(&json!({
        "out": a.out,
        "bags": ds.bags.len(),
        "positive_bags": positives,
        "negative_bags": ds.bags.len() - positives,
        "classes": ds.classes,
        "proposals": ds.bags.iter().map(|b| b.proposals.len()).sum::<usize>(),
        "feature_dim": ds.feature_dim,
    }))
}

/// Applies train flags on top of `base`.
pub fn resolve_train(a: &TrainArgs, mut cfg: TrainConfig) -> Result<TrainConfig> {
    if a.epochs.is_some() || a.lr.is_some() || a.lr_late.is_some() {
        let first = cfg.lr_schedule.first().map_or(crate::trainer::DEFAULT_LR, |p| p.lr);
        let last = cfg.lr_schedule.last().map_or(crate::trainer::DEFAULT_LR_LATE, |p| p.lr);
        cfg = cfg.clone().with_epochs(
            a.epochs.unwrap_or(cfg.epochs),
            a.lr.unwrap_or(first),
            a.lr_late.unwrap_or(last),
        );
    }
    macro_rules! set {
        ($flag:ident => $field:ident) => {
            if let Some(v) = a.$flag {
                cfg.$field = v;
            }
        };
    }
    set!(momentum => momentum);
    set!(wd => weight_decay);
    set!(tau => tau);
    set!(topk => top_k);
    set!(lambda => lambda);
    set!(kernel_a => kernel_a);
    set!(branches => num_loc_branches);
    set!(seed => seed);
    set!(ablation => ablation);
    set!(hidden => hidden_dim);
    set!(init_scale => init_scale);
    if a.no_shared_hidden {
        cfg.shared_hidden = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset)?;
    let view = ds.training_view();
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let cfg = resolve_train(&a, ckpt.config.clone())?;
            Trainer::resume(&view, cfg, ckpt.state)?
        }
        None => {
            let file = RunConfig::load(a.config.as_deref())?;
            let cfg = resolve_train(&a, file.train)?;
            Trainer::new(&view, cfg)?
        }
    };
    if a.stop_after == Some(0) {
        return Err(Error::InvalidConfig("--stop-after must be at least 1".into()));
    }
    let branches = trainer.config().active_branches();
    let probe = |p: &crate::model::ModelParams, head: Head| localization_summary(p, head, &ds);
    let probe_ref: Option<&crate::trainer::Probe<'_>> = if ds.has_ground_truth() { Some(&probe) } else { None };

    let mut ran = 0usize;
    let mut last = None;
    while !trainer.is_finished() && a.stop_after.is_none_or(|n| ran < n) {
        let report = trainer.run_epoch(probe_ref)?;
        if let Some(csv) = &a.csv {
            append_csv(csv, std::slice::from_ref(&report), branches)?;
        }
        if a.verbose {
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_default());
        }
        ran += 1;
        last = Some(report);
    }
    let cfg = trainer.config().clone();
    let state = trainer.into_state();
    let epoch = state.epoch;
    save_checkpoint(&Checkpoint::new(&cfg, state), &a.out)?;
    print_json(&json!({
        "checkpoint": a.out,
        "ablation": cfg.ablation,
        "epochs_run": ran,
        "epoch": epoch,
        "of": cfg.epochs,
        "last": last,
    }))
}

fn metrics_csv(m: &MetricsReport) -> String {
    let mut head = vec!["map".to_string(), "mean_corloc".into(), "pointing".into()];
    head.push("localization_accuracy".into());
    head.push("localization_variance".into());
    let opt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = vec![
        m.map.to_string(),
        m.mean_corloc.to_string(),
        m.pointing.to_string(),
        m.localization_accuracy.to_string(),
        m.localization_variance.to_string(),
    ];
    for (c, name) in m.classes.iter().enumerate() {
        head.push(format!("ap_{name}"));
        row.push(opt(&m.per_class_ap[c]));
    }
    for (c, name) in m.classes.iter().enumerate() {
        head.push(format!("corloc_{name}"));
        row.push(opt(&m.per_class_corloc[c]));
    }
    format!("{}\n{}\n", head.join(","), row.join(","))
}

fn load_pair(dataset: &Path, checkpoint: &Path) -> Result<(Dataset, Checkpoint)> {
    let ds = load_dataset(dataset)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let d = ckpt.state.params.dims;
    if d.feature_dim != ds.feature_dim || d.num_classes != ds.num_classes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects feature_dim {} / {} classes, dataset has {} / {}",
            d.feature_dim,
            d.num_classes,
            ds.feature_dim,
            ds.num_classes()
        )));
    }
    Ok((ds, ckpt))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let file = RunConfig::load(a.config.as_deref())?;
    let mut settings = file.eval;
    if let Some(v) = a.nms_iou {
        settings.nms_iou = v;
    }
    if let Some(v) = a.score_floor {
        settings.score_floor = v;
    }
    settings.coco_map |= a.coco;
    settings.use_train_scores |= a.train_scores;
    settings.validate()?;

    let (ds, ckpt) = load_pair(&a.dataset, &a.checkpoint)?;
    let scales = settings.use_train_scores.then_some(&ckpt.state.scores);
    let report = evaluate(&ckpt.state.params, ckpt.inference_head(), &ds, &settings, scales)?;
    if let Some(out) = &a.out {
        let bytes = serde_json::to_vec_pretty(&report).map_err(|e| Error::json(out, e))?;
        write_atomic(out, &bytes)?;
    }
    if let Some(csv) = &a.csv {
        write_atomic(csv, metrics_csv(&report).as_bytes())?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print_json(&report)
}

/// Partition, discovered clique, pseudo object and soft weights for one bag
/// and class, as the trained model sees them at inference.
pub fn inspect_bag(ds: &Dataset, ckpt: &Checkpoint, bag_id: &str, class: Option<usize>) -> Result<serde_json::Value> {
    let bag = ds.bag(bag_id).ok_or_else(|| Error::UnknownBag(bag_id.into()))?;
    let class = match class {
        Some(c) if c < ds.num_classes() => c,
        Some(c) => return Err(Error::InvalidConfig(format!("class {c} out of range"))),
        None => bag.positive_classes().first().copied().unwrap_or(0),
    };
    let cfg = &ckpt.config;
    let params = &ckpt.state.params;
    let head = ckpt.inference_head();
    let boxes = bag.boxes();
    let disc_scores = forward(params, &bag.feature_matrix(), Head::Discovery)?;
    let disc_probs = softmax_rows(&disc_scores);
    let objectness: Vec<f64> = (0..boxes.len()).map(|h| disc_probs[[h, class]]).collect();
    let partition = partition_cliques(&boxes, &objectness, cfg.effective_tau(), cfg.top_k)?;
    let means = clique_means(&partition, &disc_scores)?;
    let cprobs = clique_class_probs(&partition, &disc_scores)?;
    let cweights = clique_weights(&cprobs);
    let selected = select_clique(&cprobs, &cweights, class);
    let clique = &partition.cliques[selected];
    let probs = proposal_probs(params, bag, head, None)?;
    let h_star = select_object(clique, &probs, class);
    let loc = localization_loss(clique, h_star, &probs, &boxes, cfg.kernel_a, class)?;

    let cliques: Vec<_> = partition
        .cliques
        .iter()
        .enumerate()
        .map(|(i, c)| {
            json!({
                "members": c.members,
                "boxes": c.members.iter().map(|&h| boxes[h]).collect::<Vec<_>>(),
                "mean_scores": means.row(i).to_vec(),
            })
        })
        .collect();
    let weights: Vec<_> = loc
        .members
        .iter()
        .zip(&loc.soft_weights)
        .zip(&loc.pseudo_labels)
        .map(|((h, w), pl)| json!({"proposal": h, "weight": w, "pseudo_label": pl}))
        .collect();
    Ok(json!({
        "bag": bag.id,
        "class": class,
        "ablation": cfg.ablation,
        "head": match head { Head::Discovery => "discovery".to_string(), Head::Localization(k) => format!("localization_{}", k + 1) },
        "objectness": objectness,
        "cliques": cliques,
        "selected_clique": selected,
        "global_entropy": global_entropy(&cprobs, &cweights, class),
        "h_star": h_star,
        "h_star_box": boxes[h_star],
        "weights": weights,
        "hard_negatives": hard_negatives(clique, h_star, &boxes),
    }))
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let (ds, ckpt) = load_pair(&a.dataset, &a.checkpoint)?;
    print_json(&inspect_bag(&ds, &ckpt, &a.bag, a.class)?)
}

/// Usage text for a subcommand, for error messages.
pub fn usage(sub: &str) -> String {
    let mut cmd = Cli::command();
    match cmd.find_subcommand_mut(sub) {
        Some(s) => s.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("melm").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn train_flags_override_file() {
        let Command::Train(a) = parse(&["train", "--dataset", "d", "--out", "c", "--epochs", "8", "--tau", "0.5"])
        else {
            panic!()
        };
        let file = TrainConfig {
            tau: 0.9,
            top_k: 50,
            ..TrainConfig::default()
        };
        let cfg = resolve_train(&a, file).unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.top_k, 50);
        assert_eq!(cfg.epochs, 8);
        assert_eq!(cfg.lr_at(6), 5e-3);
        assert_eq!(cfg.lr_at(7), 5e-4);
    }

    #[test]
    fn zero_epochs_is_validation_error() {
        let Command::Train(a) = parse(&["train", "--dataset", "d", "--out", "c", "--epochs", "0"]) else {
            panic!()
        };
        assert!(resolve_train(&a, TrainConfig::default()).unwrap_err().is_validation());
    }

    #[test]
    fn bags_must_split_evenly() {
        let Command::Gen(a) = parse(&["gen", "--out", "x", "--classes", "3", "--bags", "100"]) else {
            panic!()
        };
        assert!(resolve_synth(&a, &RunConfig::default()).is_err());
        let Command::Gen(a) = parse(&["gen", "--out", "x", "--classes", "2", "--bags", "100"]) else {
            panic!()
        };
        assert_eq!(resolve_synth(&a, &RunConfig::default()).unwrap().bags_per_class, 50);
    }

    #[test]
    fn unknown_ablation_rejected() {
        assert!(Cli::try_parse_from(["melm", "train", "--dataset", "d", "--out", "c", "--ablation", "x"]).is_err());
        assert!(usage("gen").contains("--out"));
    }
}
