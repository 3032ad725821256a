//! Training loop, the baseline ladder, proposal retraining and the
//! distillation-weight sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledSample, MixedDataset, PartialOrigin};
use crate::error::{Error, Result};
use crate::field::{argmax, softmax, softmax_backward, DenseMask, DualOutput, ImageGrid, PartialMask, SimplexField};
use crate::losses::{
    full_ce_with_grad, joint_loss_with_grad, partial_ce_with_grad, LossReport, LossWeights, Supervision,
    TeacherGradient,
};
use crate::metrics::{evaluate, Branch, Evaluation};
use crate::model::{save_checkpoint, Adam, AdamConfig, BranchMode, ModelConfig, UNet};
use crate::scalar::Scalar;

/// Header of the per-epoch loss CSV.
pub const LOSS_CSV_HEADER: &str = "epoch,total,l_s,l_w,l_kd,l_ent,val_dsc";
/// Header of the aggregate summary CSV.
pub const SUMMARY_CSV_HEADER: &str = "setting,model,branch,runs,dsc_mean,dsc_std,hd95_mean,hd95_std";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Full CE on the strong set only.
    Lower,
    /// Full CE on the strong set plus the dense masks of the weak set.
    Upper,
    /// Full CE plus weighted partial CE, one branch.
    Single,
    /// Full CE on top, partial CE on bottom, nothing linking them.
    Decoupled,
    /// Decoupled plus teacher-to-student distillation.
    Kl,
    /// Kl plus entropy minimization on the weak images.
    KlEnt,
    /// Full CE on the strong set plus argmax proposals for the weak images.
    ProposalRetrain,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Lower,
        ModelKind::Upper,
        ModelKind::Single,
        ModelKind::Decoupled,
        ModelKind::Kl,
        ModelKind::KlEnt,
        ModelKind::ProposalRetrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lower => "lower",
            ModelKind::Upper => "upper",
            ModelKind::Single => "single",
            ModelKind::Decoupled => "decoupled",
            ModelKind::Kl => "kl",
            ModelKind::KlEnt => "kl_ent",
            ModelKind::ProposalRetrain => "proposal_retrain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model kind {s:?}")))
    }

    pub fn branch_mode(self) -> BranchMode {
        match self {
            ModelKind::Decoupled | ModelKind::Kl | ModelKind::KlEnt => BranchMode::Dual,
            _ => BranchMode::Single,
        }
    }

    /// The loss weights this kind actually uses.
    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        let (lw, kd, ent) = match self {
            ModelKind::Lower | ModelKind::Upper | ModelKind::ProposalRetrain => (0.0, 0.0, 0.0),
            ModelKind::Single | ModelKind::Decoupled => (w.lambda_w, 0.0, 0.0),
            ModelKind::Kl => (w.lambda_w, w.lambda_kd, 0.0),
            ModelKind::KlEnt => (w.lambda_w, w.lambda_kd, w.lambda_ent),
        };
        LossWeights {
            lambda_w: lw,
            lambda_kd: kd,
            lambda_ent: ent,
        }
    }

    /// Branch used for model selection and proposals.
    pub fn serving_branch(self) -> Branch {
        match self.branch_mode() {
            BranchMode::Dual => Branch::Bottom,
            BranchMode::Single => Branch::Top,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub weights: LossWeights,
    pub teacher: TeacherGradient,
    pub seeds: Vec<u64>,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::KlEnt,
            epochs: 500,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            weights: LossWeights::default(),
            teacher: TeacherGradient::Blocked,
            seeds: vec![0, 1, 2],
            num_classes: 2,
            base_channels: 8,
            depth: 3,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".to_string());
        }
        if self.eval_every == 0 {
            problems.push("eval_every must be >= 1".to_string());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", o.learning_rate));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            problems.push("adam betas must lie in [0, 1)".to_string());
        }
        if let Err(e) = LossWeights::new(self.weights.lambda_w, self.weights.lambda_kd, self.weights.lambda_ent) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.model_config().validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            base_channels: self.base_channels,
            depth: self.depth,
            branch_mode: self.model_kind.branch_mode(),
        }
    }

    pub fn with_kind(&self, kind: ModelKind) -> Self {
        Self {
            model_kind: kind,
            ..self.clone()
        }
    }

    /// Everything but the seeds, for comparing runs.
    fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// Mean loss decomposition over one epoch plus the validation score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub l_kd: f64,
    pub l_ent: f64,
    /// Validation DSC (x100) of the serving branch, if evaluated.
    pub val_dsc: Option<f64>,
}

/// Outcome of one training run with one seed.
#[derive(Clone, Debug)]
pub struct RunRecord<T> {
    pub config: TrainConfig,
    pub setting: String,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    /// Parameters at the best validation epoch.
    pub model: Option<UNet<T>>,
    pub test: BTreeMap<Branch, Evaluation>,
    pub wall_clock_secs: f64,
}

impl<T: Scalar> RunRecord<T> {
    pub fn loss_csv(&self) -> String {
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for e in &self.epochs {
            let val = e.val_dsc.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{val}",
                e.epoch, e.total, e.l_s, e.l_w, e.l_kd, e.l_ent
            );
        }
        out
    }

    /// Writes `config.json`, `losses.csv`, `model.ckpt`, `metrics_<branch>.csv`
    /// and `record.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        fs::write(dir.join("losses.csv"), self.loss_csv())?;
        if let Some(model) = &self.model {
            save_checkpoint(model, self.best_epoch as u64, &dir.join("model.ckpt"))?;
        }
        for (branch, eval) in &self.test {
            fs::write(dir.join(format!("metrics_{}.csv", branch.name())), eval.to_csv())?;
        }
        let meta = serde_json::json!({
            "setting": self.setting,
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_dsc": self.best_val_dsc,
            "wall_clock_secs": self.wall_clock_secs,
            "checkpoint": self.model.as_ref().map(|_| "model.ckpt"),
        });
        fs::write(dir.join("record.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Whether the entropy term stays within `slack` of its value at the
    /// start of the last 20% of epochs. Vacuous for runs without it.
    pub fn entropy_tail_settles(&self, slack: f64) -> bool {
        let n = self.epochs.len();
        let tail = &self.epochs[n - (n / 5).max(1)..];
        let first = tail[0].l_ent;
        tail.iter().all(|e| e.l_ent <= first * (1.0 + slack) + 1e-12)
    }
}

enum Target<'a> {
    Dense(&'a DenseMask),
    Partial { mask: &'a PartialMask, entropy: bool },
}

struct Pools<'a, T> {
    /// Images per epoch; the same for every kind on a given dataset so that
    /// all kinds get the same number of optimizer steps.
    epoch_images: usize,
    dense: Vec<(&'a ImageGrid<T>, &'a DenseMask)>,
    partial: Vec<(&'a ImageGrid<T>, &'a PartialMask, bool)>,
}

/// Endless shuffled pass over `0..n`, reshuffled on every wrap.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Loss for single-branch kinds: pooled full CE over dense targets plus
/// `lambda_w` times pooled partial CE over sparse ones, all on the top head.
fn single_branch_loss<T: Scalar>(
    probs: &[SimplexField<T>],
    targets: &[Target<'_>],
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let mut report = LossReport::default();
    for (p, t) in probs.iter().zip(targets) {
        match t {
            Target::Dense(_) => report.n_s += p.pixels(),
            Target::Partial { mask, .. } => report.n_w += mask.labeled_count(),
        }
    }
    let mut grads = Vec::with_capacity(probs.len());
    let (mut s, mut w) = (0.0, 0.0);
    for (p, t) in probs.iter().zip(targets) {
        let (lg, share, lambda) = match t {
            Target::Dense(m) => {
                let lg = full_ce_with_grad(p, m)?;
                let share = p.pixels() as f64 / report.n_s as f64;
                s += lg.value.to_f64_lossy() * share;
                (lg, share, 1.0)
            }
            Target::Partial { mask, .. } => {
                let lg = partial_ce_with_grad(p, mask)?;
                let share = mask.labeled_count() as f64 / report.n_w as f64;
                w += lg.value.to_f64_lossy() * share;
                (lg, share, weights.lambda_w)
            }
        };
        let k = T::of(share * lambda);
        let g: Vec<T> = lg.grad.iter().map(|&v| v * k).collect();
        grads.push(softmax_backward(p, &g));
    }
    report.l_s = s;
    report.l_w = w;
    report.total = report.recombined(weights);
    Ok((report, grads))
}

fn train_pools<T: Scalar>(
    config: &TrainConfig,
    pools: &Pools<'_, T>,
    val: &[LabeledSample<T>],
    test: &[LabeledSample<T>],
    setting: &str,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<RunRecord<T>> {
    let started = Instant::now();
    let kind = config.model_kind;
    let weights = kind.effective_weights(&config.weights);
    let mut model = UNet::<T>::build(&config.model_config(), seed)?;
    let mut adam = Adam::new(config.optimizer, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05EE_D0FB_A7C4);
    let mut dense_cycle = Cycler::new(pools.dense.len());
    let mut partial_cycle = Cycler::new(pools.partial.len());

    let bs = config.batch_size;
    let (n_dense, n_partial) = if pools.partial.is_empty() {
        (bs, 0)
    } else {
        (bs.div_ceil(2), bs / 2)
    };
    let steps_per_epoch = pools.epoch_images.div_ceil(bs);
    let serving = kind.serving_branch();

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, UNet<T>)> = None;
    for epoch in 1..=config.epochs {
        let mut sums = LossReport::default();
        for _ in 0..steps_per_epoch {
            let mut images = Vec::with_capacity(bs);
            let mut targets = Vec::with_capacity(bs);
            for _ in 0..n_dense {
                let (img, mask) = pools.dense[dense_cycle.next(&mut rng)];
                images.push(img);
                targets.push(Target::Dense(mask));
            }
            for _ in 0..n_partial {
                let (img, mask, entropy) = pools.partial[partial_cycle.next(&mut rng)];
                images.push(img);
                targets.push(Target::Partial { mask, entropy });
            }

            let mut tapes = Vec::with_capacity(bs);
            let mut tops = Vec::with_capacity(bs);
            let mut bottoms = Vec::with_capacity(bs);
            for img in &images {
                let (out, tape) = model.forward_train(img)?;
                tops.push(softmax(&out.top));
                if let Some(b) = &out.bottom {
                    bottoms.push(softmax(b));
                }
                tapes.push(tape);
            }

            let mut grads = model.params().zero_grads();
            let report = if model.is_dual() {
                let outputs = tops
                    .into_iter()
                    .zip(bottoms)
                    .map(|(t, b)| DualOutput::new(t, b))
                    .collect::<Result<Vec<_>>>()?;
                let sup: Vec<Supervision<'_>> = targets
                    .iter()
                    .map(|t| match *t {
                        Target::Dense(m) => Supervision::Strong {
                            dense: m,
                            partial: None,
                        },
                        Target::Partial { mask, entropy } => Supervision::Weak { partial: mask, entropy },
                    })
                    .collect();
                let jg = joint_loss_with_grad(&outputs, &sup, &weights, config.teacher)?;
                for (i, tape) in tapes.iter().enumerate() {
                    model.backward(tape, &jg.top[i], Some(&jg.bottom[i]), &mut grads);
                }
                jg.report
            } else {
                let (report, g) = single_branch_loss(&tops, &targets, &weights)?;
                for (tape, g) in tapes.iter().zip(&g) {
                    model.backward(tape, g, None, &mut grads);
                }
                report
            };
            let drift = (report.total - report.recombined(&weights)).abs();
            if !report.total.is_finite() || drift > 1e-6 * report.total.abs().max(1.0) {
                return Err(Error::InvalidConfig(format!(
                    "loss diverged at epoch {epoch}: total {}",
                    report.total
                )));
            }
            adam.step(model.params_mut(), &grads);
            sums.total += report.total;
            sums.l_s += report.l_s;
            sums.l_w += report.l_w;
            sums.l_kd += report.l_kd;
            sums.l_ent += report.l_ent;
        }

        let k = steps_per_epoch as f64;
        let mut log = EpochLog {
            epoch,
            total: sums.total / k,
            l_s: sums.l_s / k,
            l_w: sums.l_w / k,
            l_kd: sums.l_kd / k,
            l_ent: sums.l_ent / k,
            val_dsc: None,
        };
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let dsc = if val.is_empty() {
                0.0
            } else {
                evaluate(&model, serving, val)?.mean_dsc
            };
            log.val_dsc = Some(dsc);
            if best.as_ref().is_none_or(|(b, _, _)| dsc > *b) {
                if let Some(path) = checkpoint {
                    save_checkpoint(&model, epoch as u64, path)?;
                }
                best = Some((dsc, epoch, model.clone()));
            }
        }
        log::debug!(
            "{} seed {seed} epoch {epoch}: total {:.4} val {:?}",
            kind.name(),
            log.total,
            log.val_dsc
        );
        epochs.push(log);
    }

    let (best_val_dsc, best_epoch, best_model) = best.expect("last epoch is always evaluated");
    let mut test_evals = BTreeMap::new();
    test_evals.insert(Branch::Top, evaluate(&best_model, Branch::Top, test)?);
    if best_model.is_dual() {
        test_evals.insert(Branch::Bottom, evaluate(&best_model, Branch::Bottom, test)?);
    }
    Ok(RunRecord {
        config: TrainConfig {
            seeds: vec![seed],
            ..config.clone()
        },
        setting: setting.to_string(),
        seed,
        epochs,
        best_epoch,
        best_val_dsc,
        model: Some(best_model),
        test: test_evals,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn check_dataset<T: Scalar>(kind: ModelKind, ds: &MixedDataset<T>) -> Result<()> {
    let fail = |reason: &str| {
        Err(Error::IncompatibleDataset {
            kind: kind.name().into(),
            reason: reason.into(),
        })
    };
    if ds.strong.is_empty() {
        return fail("the strong set is empty");
    }
    if ds.test.is_empty() {
        return fail("the test set is empty");
    }
    let uses_weak = !matches!(kind, ModelKind::Lower);
    if uses_weak && ds.weak.is_empty() {
        return fail("the weak set is empty");
    }
    if kind == ModelKind::Upper && ds.weak_dense.len() != ds.weak_originals().count() {
        return fail("dense masks are missing for some weak images");
    }
    if kind == ModelKind::KlEnt && ds.weak_originals().next().is_none() {
        return fail("the entropy term needs weak-set images");
    }
    Ok(())
}

/// Trains `config.model_kind` on `dataset` with `seed`. Sparse labels are
/// the only supervision read from weak images, except for the upper bound,
/// which reads their dense masks through the access audit.
pub fn train<T: Scalar>(dataset: &MixedDataset<T>, config: &TrainConfig, seed: u64) -> Result<RunRecord<T>> {
    train_with_checkpoint(dataset, config, seed, None)
}

/// Like [`train`], also writing the best-validation model to `checkpoint`
/// whenever it improves.
pub fn train_with_checkpoint<T: Scalar>(
    dataset: &MixedDataset<T>,
    config: &TrainConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<RunRecord<T>> {
    config.validate()?;
    let kind = config.model_kind;
    if kind == ModelKind::ProposalRetrain {
        return Err(Error::IncompatibleDataset {
            kind: kind.name().into(),
            reason: "needs a base run; use proposal_retrain".into(),
        });
    }
    check_dataset(kind, dataset)?;
    let mut pools = Pools {
        epoch_images: dataset.strong.len() + dataset.weak.len(),
        dense: dataset.strong.iter().map(|s| (&s.image, &s.mask)).collect(),
        partial: Vec::new(),
    };
    match kind {
        ModelKind::Lower | ModelKind::ProposalRetrain => {}
        ModelKind::Upper => {
            for s in dataset.weak_originals() {
                let mask = dataset
                    .weak_dense
                    .read(&s.id, "upper-bound training pool")
                    .ok_or_else(|| Error::IncompatibleDataset {
                        kind: kind.name().into(),
                        reason: format!("no dense mask for {}", s.id),
                    })?;
                pools.dense.push((&s.image, mask));
            }
        }
        _ => {
            let entropy = kind == ModelKind::KlEnt;
            pools.partial = dataset
                .weak
                .iter()
                .map(|s| (&s.image, &s.mask, entropy && s.origin == PartialOrigin::Weak))
                .collect();
        }
    }
    train_pools(
        config,
        &pools,
        &dataset.val,
        &dataset.test,
        &dataset.setting.label(),
        seed,
        checkpoint,
    )
}

/// Per-pixel argmax of `branch` for each image; ties go to the lowest class.
pub fn generate_proposals<T: Scalar>(
    model: &UNet<T>,
    branch: Branch,
    images: &[&ImageGrid<T>],
) -> Result<Vec<DenseMask>> {
    images
        .iter()
        .map(|img| {
            let out = model.forward(img)?;
            let logits = match branch {
                Branch::Top => out.top,
                Branch::Bottom => out.bottom.ok_or(Error::MissingBranch)?,
            };
            Ok(argmax(&softmax(&logits)))
        })
        .collect()
}

/// Single-branch full-CE training on the strong set plus the weak-set
/// originals labeled by `proposals` (one per weak original, in order).
pub fn retrain_on_masks<T: Scalar>(
    dataset: &MixedDataset<T>,
    proposals: &[DenseMask],
    config: &TrainConfig,
    seed: u64,
) -> Result<RunRecord<T>> {
    let config = config.with_kind(ModelKind::ProposalRetrain);
    config.validate()?;
    check_dataset(ModelKind::ProposalRetrain, dataset)?;
    let originals: Vec<_> = dataset.weak_originals().collect();
    if originals.len() != proposals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} proposals for {} weak images",
            proposals.len(),
            originals.len()
        )));
    }
    let mut pools = Pools {
        epoch_images: dataset.strong.len() + dataset.weak.len(),
        dense: dataset.strong.iter().map(|s| (&s.image, &s.mask)).collect(),
        partial: Vec::new(),
    };
    pools
        .dense
        .extend(originals.iter().map(|s| &s.image).zip(proposals.iter()));
    train_pools(
        &config,
        &pools,
        &dataset.val,
        &dataset.test,
        &dataset.setting.label(),
        seed,
        None,
    )
}

/// Labels the weak-set originals with the base run's serving-branch
/// proposals and retrains from scratch on them.
pub fn proposal_retrain<T: Scalar>(
    dataset: &MixedDataset<T>,
    base: &RunRecord<T>,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunRecord<T>> {
    let model = base
        .model
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("base run has no trained model".into()))?;
    let images: Vec<_> = dataset.weak_originals().map(|s| &s.image).collect();
    let proposals = generate_proposals(model, base.config.model_kind.serving_branch(), &images)?;
    retrain_on_masks(dataset, &proposals, config, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchStats {
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
}

/// Mean and spread of the test metrics of runs that differ only in seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub setting: String,
    pub kind: ModelKind,
    pub seeds: Vec<u64>,
    pub branches: BTreeMap<Branch, BranchStats>,
}

impl Summary {
    pub fn dsc(&self, branch: Branch) -> Option<f64> {
        self.branches.get(&branch).map(|s| s.dsc_mean)
    }

    pub fn hd95(&self, branch: Branch) -> Option<f64> {
        self.branches.get(&branch).map(|s| s.hd95_mean)
    }

    fn csv_rows(&self, out: &mut String) {
        for (branch, s) in &self.branches {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
                self.setting,
                self.kind.name(),
                branch.name(),
                self.seeds.len(),
                s.dsc_mean,
                s.dsc_std,
                s.hd95_mean,
                s.hd95_std
            );
        }
    }
}

/// Summary CSV over several aggregates, one row per (setting, model, branch).
pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for s in summaries {
        s.csv_rows(&mut out);
    }
    out
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs<T: Scalar>(records: &[RunRecord<T>]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::MixedConfigs("no records to aggregate".into()))?;
    let key = first.config.fingerprint();
    for r in &records[1..] {
        if r.config.fingerprint() != key || r.setting != first.setting {
            return Err(Error::MixedConfigs(format!(
                "seed {} ({} {}) vs seed {} ({} {})",
                first.seed,
                first.setting,
                first.config.model_kind.name(),
                r.seed,
                r.setting,
                r.config.model_kind.name()
            )));
        }
    }
    let mut branches = BTreeMap::new();
    for branch in first.test.keys() {
        let evals: Vec<&Evaluation> = records.iter().filter_map(|r| r.test.get(branch)).collect();
        if evals.len() != records.len() {
            return Err(Error::MixedConfigs(format!(
                "some runs lack the {} branch",
                branch.name()
            )));
        }
        let (dsc_mean, dsc_std) = mean_std(&evals.iter().map(|e| e.mean_dsc).collect::<Vec<_>>());
        let (hd95_mean, hd95_std) = mean_std(&evals.iter().map(|e| e.mean_hd95).collect::<Vec<_>>());
        branches.insert(
            *branch,
            BranchStats {
                dsc_mean,
                dsc_std,
                hd95_mean,
                hd95_std,
            },
        );
    }
    Ok(Summary {
        setting: first.setting.clone(),
        kind: first.config.model_kind,
        seeds: records.iter().map(|r| r.seed).collect(),
        branches,
    })
}

/// Trains `config.model_kind` once per configured seed.
pub fn train_seeds<T: Scalar>(dataset: &MixedDataset<T>, config: &TrainConfig) -> Result<Vec<RunRecord<T>>> {
    config.seeds.iter().map(|&s| train(dataset, config, s)).collect()
}

/// One full-method run set per distillation weight.
pub fn ablate_lambda_kd<T: Scalar>(
    dataset: &MixedDataset<T>,
    values: &[f64],
    config: &TrainConfig,
) -> Result<Vec<(f64, Summary)>> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("no lambda_kd values to sweep".into()));
    }
    values
        .iter()
        .map(|&kd| {
            let mut c = config.with_kind(ModelKind::KlEnt);
            c.weights.lambda_kd = kd;
            let runs = train_seeds(dataset, &c)?;
            Ok((kd, aggregate_runs(&runs)?))
        })
        .collect()
}

/// `lambda_kd,dsc_mean,dsc_std,hd95_mean,hd95_std` on the bottom branch.
pub fn ablation_csv(rows: &[(f64, Summary)]) -> String {
    let mut out = "lambda_kd,dsc_mean,dsc_std,hd95_mean,hd95_std\n".to_string();
    for (kd, s) in rows {
        if let Some(b) = s.branches.get(&Branch::Bottom) {
            let _ = writeln!(
                out,
                "{kd},{:.4},{:.4},{:.4},{:.4}",
                b.dsc_mean, b.dsc_std, b.hd95_mean, b.hd95_std
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_split, make_synthetic, ScribbleSpec, SplitSetting};

    fn tiny_config(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            epochs: 2,
            batch_size: 4,
            base_channels: 4,
            depth: 2,
            seeds: vec![0],
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> MixedDataset<f32> {
        let mut setting = SplitSetting::custom(1);
        setting.num_val = 2;
        setting.num_test = 2;
        let pool = make_synthetic(10, 32, 4).unwrap();
        build_split(pool, &setting, &ScribbleSpec::default(), 0).unwrap()
    }

    #[test]
    fn every_kind_trains_and_reports_its_branches() {
        let ds = tiny_dataset();
        for kind in ModelKind::ALL.into_iter().filter(|&k| k != ModelKind::ProposalRetrain) {
            let r = train(&ds, &tiny_config(kind), 0).unwrap();
            assert_eq!(r.epochs.len(), 2);
            assert_eq!(
                r.test.contains_key(&Branch::Bottom),
                kind.branch_mode() == BranchMode::Dual
            );
            let has_ent = r.epochs.iter().any(|e| e.l_ent > 0.0);
            assert_eq!(has_ent, kind == ModelKind::KlEnt, "{kind:?}");
            // the KL value is reported for every dual model, weighted or not
            let has_kd = r.epochs.iter().any(|e| e.l_kd > 0.0);
            assert_eq!(has_kd, kind.branch_mode() == BranchMode::Dual, "{kind:?}");
        }
        // only the upper bound touched the held-out masks
        assert_eq!(ds.weak_dense.audit().reads(), ds.weak_dense.len());
    }

    #[test]
    fn proposal_retrain_requires_a_model() {
        let ds = tiny_dataset();
        let mut base = train(&ds, &tiny_config(ModelKind::Lower), 0).unwrap();
        let r = proposal_retrain(&ds, &base, &tiny_config(ModelKind::Lower), 0).unwrap();
        assert_eq!(r.config.model_kind, ModelKind::ProposalRetrain);
        base.model = None;
        assert!(matches!(
            proposal_retrain(&ds, &base, &tiny_config(ModelKind::Lower), 0),
            Err(Error::Checkpoint(_))
        ));
        assert!(train(&ds, &tiny_config(ModelKind::ProposalRetrain), 0).is_err());
    }

    #[test]
    fn aggregation_statistics() {
        let ds = tiny_dataset();
        let r = train(&ds, &tiny_config(ModelKind::Lower), 0).unwrap();
        let s = aggregate_runs(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(s.branches[&Branch::Top].dsc_std, 0.0);
        let (m, _) = mean_std(&[80.0, 90.0]);
        assert_eq!(m, 85.0);
        let other = train(&ds, &tiny_config(ModelKind::Single), 0).unwrap();
        assert!(matches!(aggregate_runs(&[r, other]), Err(Error::MixedConfigs(_))));
    }

    #[test]
    fn invalid_configs_are_rejected_with_all_problems() {
        let c = TrainConfig {
            epochs: 0,
            batch_size: 0,
            seeds: vec![],
            ..TrainConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("epochs") && msg.contains("batch_size") && msg.contains("seed"));
    }
}
