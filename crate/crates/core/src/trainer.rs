//! Recurrent and accumulated-recurrent training.
//!
//! One bag per step. Each step scales the bag's features by its aggregated
//! object scores, partitions the top proposals into cliques using discovery
//! objectness, takes the discovery loss, trains every localization branch
//! on the discovered cliques and the pseudo objects accumulated by earlier
//! branches, applies one momentum SGD update, and refreshes the bag's
//! object scores from the final branch.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, TrainingView};
use crate::entropy::{
    discovery_loss, localization_loss, partition_cliques, select_object, softmax_rows, Clique, CliquePartition,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{backward_head_with, forward, forward_all, init_params, Dims, Head, ModelParams};

/// Training variants, from the plain image-level baseline up to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Discovery branch over singleton cliques only.
    Base,
    /// Discovery branch over clique partition.
    Clique,
    /// Discovery + one localization branch, scored by the discovery head.
    D,
    /// Discovery + one localization branch, scored by the localization head.
    L,
    /// As `L`, with recurrent score aggregation.
    LRl,
    /// Recurrent learning with all localization branches accumulated.
    #[default]
    LArl,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Base,
        Ablation::Clique,
        Ablation::D,
        Ablation::L,
        Ablation::LRl,
        Ablation::LArl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Clique => "clique",
            Ablation::D => "d",
            Ablation::L => "l",
            Ablation::LRl => "l-rl",
            Ablation::LArl => "l-arl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn uses_cliques(self) -> bool {
        self != Ablation::Base
    }

    pub fn trains_localization(self) -> bool {
        matches!(self, Ablation::D | Ablation::L | Ablation::LRl | Ablation::LArl)
    }

    pub fn recurrent(self) -> bool {
        matches!(self, Ablation::LRl | Ablation::LArl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    /// First epoch of the phase, 1-based inclusive.
    pub start: usize,
    /// Last epoch of the phase, inclusive.
    pub end: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub top_k: usize,
    pub kernel_a: f64,
    pub num_loc_branches: usize,
    pub seed: u64,
    /// Whether localization gradients reach the shared hidden layer.
    pub shared_hidden: bool,
    /// Hidden layer width; zero disables the hidden layer.
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub ablation: Ablation,
}

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_LR: f64 = 5e-3;
pub const DEFAULT_LR_LATE: f64 = 5e-4;
/// Fraction of epochs run at the initial learning rate.
pub const LR_SPLIT: f64 = 0.75;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            lr_schedule: lr_schedule(DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_LR_LATE),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 1,
            lambda: 1.0,
            tau: 0.7,
            top_k: 200,
            kernel_a: 4.0,
            num_loc_branches: 3,
            seed: 7,
            shared_hidden: true,
            hidden_dim: 0,
            init_scale: 0.01,
            ablation: Ablation::LArl,
        }
    }
}

/// Two-phase schedule: `lr` for the first 75% of epochs, `lr_late` after.
pub fn lr_schedule(epochs: usize, lr: f64, lr_late: f64) -> Vec<LrPhase> {
    let early = ((epochs as f64 * LR_SPLIT).round() as usize).clamp(1.min(epochs), epochs);
    let mut phases = Vec::new();
    if early > 0 {
        phases.push(LrPhase {
            start: 1,
            end: early,
            lr,
        });
    }
    if early < epochs {
        phases.push(LrPhase {
            start: early + 1,
            end: epochs,
            lr: lr_late,
        });
    }
    phases
}

impl TrainConfig {
    /// Replaces the epoch count and rebuilds the two-phase schedule.
    pub fn with_epochs(mut self, epochs: usize, lr: f64, lr_late: f64) -> Self {
        self.epochs = epochs;
        self.lr_schedule = lr_schedule(epochs, lr, lr_late);
        self
    }

    pub fn for_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.num_loc_branches == 0 {
            return bad("num_loc_branches must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if !(self.kernel_a > 0.0 && self.kernel_a.is_finite()) {
            return bad(format!("kernel_a {} must be positive", self.kernel_a));
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        for epoch in 1..=self.epochs {
            let hits = self
                .lr_schedule
                .iter()
                .filter(|p| (p.start..=p.end).contains(&epoch))
                .count();
            if hits != 1 {
                return bad(format!("lr_schedule covers epoch {epoch} {hits} times"));
            }
        }
        if let Some(p) = self.lr_schedule.iter().find(|p| !(p.lr >= 0.0 && p.lr.is_finite())) {
            return bad(format!("learning rate {} must be finite and >= 0", p.lr));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .find(|p| (p.start..=p.end).contains(&epoch))
            .map_or(0.0, |p| p.lr)
    }

    /// Localization branches actually trained under the ablation.
    pub fn active_branches(&self) -> usize {
        if self.ablation == Ablation::LArl {
            self.num_loc_branches
        } else {
            1
        }
    }

    /// Head used for scoring proposals at inference.
    pub fn inference_head(&self) -> Head {
        match self.ablation {
            Ablation::Base | Ablation::Clique | Ablation::D => Head::Discovery,
            _ => Head::Localization(self.active_branches() - 1),
        }
    }

    pub fn effective_tau(&self) -> f64 {
        // IoU never exceeds 1, so every clique stays a singleton.
        if self.ablation.uses_cliques() {
            self.tau
        } else {
            1.0
        }
    }

    pub fn dims(&self, feature_dim: usize, num_classes: usize) -> Dims {
        Dims {
            feature_dim,
            hidden_dim: self.hidden_dim,
            num_classes,
            num_branches: self.num_loc_branches,
        }
    }
}

/// `buffer = momentum * buffer + grad + weight_decay * param; param -= lr * buffer`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    buffers: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.dims != grads.dims || params.dims != buffers.dims {
        return Err(Error::Shape(
            "sgd_step: parameter, gradient and buffer dims differ".into(),
        ));
    }
    for ((p, g), b) in params
        .slices_mut()
        .into_iter()
        .zip(grads.slices())
        .zip(buffers.slices_mut())
    {
        if p.len() != g.len() || p.len() != b.len() {
            return Err(Error::Shape("sgd_step: tensor length mismatch".into()));
        }
        for ((p, g), b) in p.iter_mut().zip(g).zip(b.iter_mut()) {
            *b = momentum * *b + g + weight_decay * *p;
            *p -= lr * *b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ModelParams,
    pub momentum: ModelParams,
    /// Aggregated object score per proposal, keyed by bag id.
    pub scores: BTreeMap<String, Vec<f64>>,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn init(view: &TrainingView<'_>, cfg: &TrainConfig) -> Result<Self> {
        let dims = cfg.dims(view.feature_dim(), view.num_classes());
        let params = init_params(dims, cfg.seed, cfg.init_scale)?;
        let momentum = params.zeros_like();
        let scores = view
            .bags()
            .map(|b| (b.id().to_string(), vec![1.0; b.proposals().len()]))
            .collect();
        Ok(Self {
            params,
            momentum,
            scores,
            epoch: 0,
        })
    }

    pub fn check_compatible(&self, view: &TrainingView<'_>) -> Result<()> {
        let d = self.params.dims;
        if d.feature_dim != view.feature_dim() {
            return Err(Error::Checkpoint(format!(
                "feature_dim {} does not match dataset feature_dim {}",
                d.feature_dim,
                view.feature_dim()
            )));
        }
        if d.num_classes != view.num_classes() {
            return Err(Error::Checkpoint(format!(
                "num_classes {} does not match dataset ({})",
                d.num_classes,
                view.num_classes()
            )));
        }
        for bag in view.bags() {
            match self.scores.get(bag.id()) {
                Some(s) if s.len() == bag.proposals().len() => {}
                Some(s) => {
                    return Err(Error::Checkpoint(format!(
                        "bag `{}`: {} object scores for {} proposals",
                        bag.id(),
                        s.len(),
                        bag.proposals().len()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("no object scores for bag `{}`", bag.id()))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub disc_loss: f64,
    /// Mean localization loss per branch over bags with positive labels.
    pub loc_loss: Vec<f64>,
    pub global_entropy: f64,
    /// Mean local entropy of the final branch, when localization is trained.
    pub local_entropy: Option<f64>,
    pub loc_acc: Option<f64>,
    pub loc_var: Option<f64>,
    pub seconds: f64,
}

impl EpochReport {
    /// Equality ignoring wall time.
    pub fn same_values(&self, other: &EpochReport) -> bool {
        let strip = |r: &EpochReport| EpochReport {
            seconds: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Per-epoch localization probe: (accuracy, variance) of the given head.
pub type Probe<'a> = dyn Fn(&ModelParams, Head) -> Result<(f64, f64)> + 'a;

struct CachedBag {
    id: String,
    labels: Vec<u8>,
    positives: Vec<usize>,
    boxes: Vec<BBox>,
    features: Array2<f64>,
}

struct BagStep {
    disc_loss: f64,
    loc_loss: Vec<f64>,
    entropies: Vec<f64>,
    local_entropy: Option<f64>,
    grads: ModelParams,
}

pub struct Trainer {
    cfg: TrainConfig,
    bags: Vec<CachedBag>,
    state: TrainState,
}

impl Trainer {
    pub fn new(view: &TrainingView<'_>, cfg: TrainConfig) -> Result<Self> {
        let state = TrainState::init(view, &cfg)?;
        Self::resume(view, cfg, state)
    }

    pub fn resume(view: &TrainingView<'_>, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        if view.is_empty() {
            return Err(Error::InvalidDataset("training set is empty".into()));
        }
        state.check_compatible(view)?;
        if state.params.dims != cfg.dims(view.feature_dim(), view.num_classes()) {
            return Err(Error::Checkpoint("model dims disagree with the training config".into()));
        }
        let bags = view
            .bags()
            .map(|b| CachedBag {
                id: b.id().to_string(),
                labels: b.labels().to_vec(),
                positives: b.positive_classes(),
                boxes: b.boxes(),
                features: b.feature_matrix(),
            })
            .collect();
        Ok(Self { cfg, bags, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    /// Bag order for an epoch, a pure function of (seed, epoch).
    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..self.bags.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self, probe: Option<&Probe<'_>>) -> Result<EpochReport> {
        if self.is_finished() {
            return Err(Error::InvalidConfig(format!(
                "all {} epochs already completed",
                self.cfg.epochs
            )));
        }
        let started = Instant::now();
        let epoch = self.state.epoch + 1;
        let lr = self.cfg.lr_at(epoch);
        let branches = self.cfg.active_branches();

        let mut tally = Tally::new(branches);
        for i in self.epoch_order(epoch) {
            let step = self.bag_step(i).map_err(|e| with_epoch(e, epoch))?;
            tally.add(&step);
            let st = &mut self.state;
            sgd_step(
                &mut st.params,
                &step.grads,
                &mut st.momentum,
                lr,
                self.cfg.momentum,
                self.cfg.weight_decay,
            )?;
            if st.params.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite {
                    what: "parameter".into(),
                    epoch,
                    bag: self.bags[i].id.clone(),
                });
            }
            if self.cfg.ablation.recurrent() {
                self.refresh_scores(i)?;
            }
        }
        self.state.epoch = epoch;

        let (loc_acc, loc_var) = match probe {
            Some(p) => {
                let (a, v) = p(&self.state.params, self.cfg.inference_head())?;
                (Some(a), Some(v))
            }
            None => (None, None),
        };
        let trains_loc = self.cfg.ablation.trains_localization();
        let (disc_loss, loc_loss, global_entropy, local_entropy) = tally.means(self.bags.len());
        Ok(EpochReport {
            epoch,
            disc_loss,
            loc_loss: if trains_loc { loc_loss } else { Vec::new() },
            global_entropy,
            local_entropy: trains_loc.then_some(local_entropy),
            loc_acc,
            loc_var,
            seconds: started.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, probe: Option<&Probe<'_>>) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            reports.push(self.run_epoch(probe)?);
        }
        Ok(reports)
    }

    fn scaled_features(&self, i: usize) -> Array2<f64> {
        let bag = &self.bags[i];
        let mut x = bag.features.clone();
        if self.cfg.ablation.recurrent() {
            let s = &self.state.scores[&bag.id];
            for (mut row, &si) in x.axis_iter_mut(Axis(0)).zip(s) {
                row *= si;
            }
        }
        x
    }

    fn bag_step(&self, i: usize) -> Result<BagStep> {
        let bag = &self.bags[i];
        let cfg = &self.cfg;
        let params = &self.state.params;
        let x = self.scaled_features(i);
        let (disc_scores, loc_scores) = forward_all(params, &x)?;
        let disc_probs = softmax_rows(&disc_scores);

        let partition = if bag.positives.is_empty() {
            CliquePartition {
                cliques: Vec::new(),
                pool: Vec::new(),
                tau: cfg.effective_tau(),
            }
        } else {
            let objectness: Vec<f64> = (0..bag.boxes.len())
                .map(|h| {
                    bag.positives
                        .iter()
                        .map(|&c| disc_probs[[h, c]])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            partition_cliques(&bag.boxes, &objectness, cfg.effective_tau(), cfg.top_k)?
        };

        let disc = discovery_loss(&bag.labels, &partition, &disc_scores)?;
        if !disc.loss.is_finite() {
            return Err(non_finite("discovery loss", &bag.id));
        }
        let mut grads = backward_head_with(params, &x, Head::Discovery, &disc.grad, true)?.params;
        let entropies = disc.global_entropy.iter().map(|e| e.1).collect();

        let mut loc_loss = Vec::new();
        let mut local_entropy = None;
        if cfg.ablation.trains_localization() && !bag.positives.is_empty() {
            // Pseudo objects per positive class, seeded by the discovery branch.
            let selected: Vec<usize> = bag
                .positives
                .iter()
                .map(|&c| disc.selected_clique(c).expect("selection for every positive class"))
                .collect();
            let mut anchors: Vec<Vec<usize>> = bag
                .positives
                .iter()
                .zip(&selected)
                .map(|(&c, &sel)| vec![select_object(&partition.cliques[sel], &disc_probs, c)])
                .collect();
            for (k, scores) in loc_scores.iter().enumerate().take(cfg.active_branches()) {
                let probs = softmax_rows(scores);
                let mut upstream = Array2::zeros(probs.raw_dim());
                let mut branch_loss = 0.0;
                for (ci, &c) in bag.positives.iter().enumerate() {
                    for (clique, h_star) in anchor_cliques(&partition, &anchors[ci]) {
                        let out = localization_loss(clique, h_star, &probs, &bag.boxes, cfg.kernel_a, c)?;
                        branch_loss += out.loss;
                        upstream += &out.grad;
                    }
                    // This branch's pseudo object, inherited by later branches.
                    let next = select_object(&partition.cliques[selected[ci]], &probs, c);
                    if !anchors[ci].contains(&next) {
                        anchors[ci].push(next);
                    }
                }
                if !branch_loss.is_finite() {
                    return Err(non_finite("localization loss", &bag.id));
                }
                upstream *= cfg.lambda;
                let g = backward_head_with(params, &x, Head::Localization(k), &upstream, cfg.shared_hidden)?;
                grads.add_scaled(&g.params, 1.0)?;
                loc_loss.push(branch_loss);
            }
            local_entropy = loc_loss.last().copied();
        }
        Ok(BagStep {
            disc_loss: disc.loss,
            loc_loss,
            entropies,
            local_entropy,
            grads,
        })
    }

    /// Object scores from the final branch on the unscaled features.
    fn refresh_scores(&mut self, i: usize) -> Result<()> {
        let bag = &self.bags[i];
        if bag.positives.is_empty() {
            return Ok(());
        }
        let head = Head::Localization(self.cfg.active_branches() - 1);
        let probs = softmax_rows(&forward(&self.state.params, &bag.features, head)?);
        let s: Vec<f64> = (0..bag.boxes.len())
            .map(|h| bag.positives.iter().map(|&c| probs[[h, c]]).fold(0.0, f64::max))
            .collect();
        self.state.scores.insert(bag.id.clone(), s);
        Ok(())
    }
}

/// Running sums behind an [`EpochReport`].
struct Tally {
    disc: f64,
    loc: Vec<f64>,
    loc_bags: usize,
    local: f64,
    entropy: f64,
    entropy_terms: usize,
}

impl Tally {
    fn new(branches: usize) -> Self {
        Self {
            disc: 0.0,
            loc: vec![0.0; branches],
            loc_bags: 0,
            local: 0.0,
            entropy: 0.0,
            entropy_terms: 0,
        }
    }

    fn add(&mut self, step: &BagStep) {
        self.disc += step.disc_loss;
        self.entropy += step.entropies.iter().sum::<f64>();
        self.entropy_terms += step.entropies.len();
        if let Some(le) = step.local_entropy {
            self.loc_bags += 1;
            self.local += le;
            for (acc, l) in self.loc.iter_mut().zip(&step.loc_loss) {
                *acc += l;
            }
        }
    }

    /// (discovery loss, per-branch localization loss, global entropy, local entropy)
    fn means(&self, bags: usize) -> (f64, Vec<f64>, f64, f64) {
        let per = |s: f64, n: usize| if n > 0 { s / n as f64 } else { 0.0 };
        (
            per(self.disc, bags),
            self.loc.iter().map(|&s| per(s, self.loc_bags)).collect(),
            per(self.entropy, self.entropy_terms),
            per(self.local, self.loc_bags),
        )
    }
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { what, bag, .. } => Error::NonFinite { what, epoch, bag },
        other => other,
    }
}

/// One `(clique, h*)` pair per clique touched by the anchors; a later anchor
/// replaces an earlier one inside the same clique.
fn anchor_cliques<'p>(partition: &'p CliquePartition, anchors: &[usize]) -> Vec<(&'p Clique, usize)> {
    let mut by_clique: Vec<(usize, usize)> = Vec::new();
    for &a in anchors {
        let Some(ci) = partition.clique_of(a) else { continue };
        match by_clique.iter_mut().find(|e| e.0 == ci) {
            Some(e) => e.1 = a,
            None => by_clique.push((ci, a)),
        }
    }
    by_clique
        .into_iter()
        .map(|(ci, a)| (&partition.cliques[ci], a))
        .collect()
}

fn non_finite(what: &str, bag: &str) -> Error {
    Error::NonFinite {
        what: what.into(),
        epoch: 0,
        bag: bag.into(),
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(view: &TrainingView<'_>, cfg: &TrainConfig) -> Result<(ModelParams, Vec<EpochReport>)> {
    train_with_probe(view, cfg, None)
}

pub fn train_with_probe(
    view: &TrainingView<'_>,
    cfg: &TrainConfig,
    probe: Option<&Probe<'_>>,
) -> Result<(ModelParams, Vec<EpochReport>)> {
    let mut trainer = Trainer::new(view, cfg.clone())?;
    let reports = trainer.run(probe)?;
    Ok((trainer.into_state().params, reports))
}

pub const CHECKPOINT_FORMAT: &str = "melm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Stream used for the next epoch's shuffle.
    pub next_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(cfg: &TrainConfig, state: TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_dim: state.params.dims.feature_dim,
            num_classes: state.params.dims.num_classes,
            config: cfg.clone(),
            rng: RngState {
                algorithm: "chacha8".into(),
                seed: cfg.seed,
                next_stream: state.epoch as u64 + 1,
            },
            state,
        }
    }

    pub fn inference_head(&self) -> Head {
        self.config.inference_head()
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let st = &self.state;
        st.params.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        st.momentum.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if st.momentum.dims != st.params.dims {
            return Err(Error::Checkpoint("momentum buffers do not match parameters".into()));
        }
        let d = st.params.dims;
        if d.feature_dim != self.feature_dim || d.num_classes != self.num_classes {
            return Err(Error::Checkpoint(format!(
                "declared feature_dim {} / num_classes {} disagree with weights ({} / {})",
                self.feature_dim, self.num_classes, d.feature_dim, d.num_classes
            )));
        }
        if self.rng.seed != self.config.seed || self.rng.next_stream != st.epoch as u64 + 1 {
            return Err(Error::Checkpoint("rng state inconsistent with config and epoch".into()));
        }
        self.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if st.scores.values().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Checkpoint("object scores outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Fails unless the checkpoint fits the dataset behind `view`.
    pub fn check_dataset(&self, view: &TrainingView<'_>) -> Result<()> {
        self.state.check_compatible(view)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serde_json::to_vec(ckpt).map_err(|e| Error::json(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: corrupt file: {e}", path.display())))?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn csv_header(branches: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "disc_loss".to_string()];
    cols.extend((1..=branches).map(|k| format!("loc_loss_{k}")));
    cols.extend(
        ["global_entropy", "local_entropy", "loc_acc", "loc_var", "seconds"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

pub fn csv_row(r: &EpochReport, branches: usize) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut cols = vec![r.epoch.to_string(), r.disc_loss.to_string()];
    cols.extend((0..branches).map(|k| opt(r.loc_loss.get(k).copied())));
    cols.push(r.global_entropy.to_string());
    cols.push(opt(r.local_entropy));
    cols.push(opt(r.loc_acc));
    cols.push(opt(r.loc_var));
    cols.push(format!("{:.6}", r.seconds));
    cols.join(",")
}

/// Appends reports to a CSV file, writing the header when the file is new or empty.
pub fn append_csv(path: impl AsRef<Path>, reports: &[EpochReport], branches: usize) -> Result<()> {
    let path = path.as_ref();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = f.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut text = String::new();
    if empty {
        text.push_str(&csv_header(branches));
        text.push('\n');
    }
    for r in reports {
        text.push_str(&csv_row(r, branches));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
