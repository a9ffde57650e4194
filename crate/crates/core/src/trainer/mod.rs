//! Two-branch training: warmup with a frozen then unfrozen backbone, then
//! per-epoch entropy filtering followed by soft-label correction on the
//! kept examples.

mod data;
mod fixture;
mod net;

pub use data::Dataset;
pub use fixture::{blobs_fixture, BlobsConfig, NoisyFixture};
pub use net::{Sgd, SmallNet, DEFAULT_HIDDEN};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{network_loss_and_grad, BatchView, PencilSchedule, SoftLabelTable, DEFAULT_INIT_SCALE};
use crate::error::{Error, Result};
use crate::filtering::{entropy_profile, fit_and_filter, FilterDecision, FilterLogRow};
use crate::math::{argmax, mean_std, softmax};
use crate::metrics::{self, ensemble_logits, EvalReport, ScoredPredictions};
use crate::noisegen::NoiseTag;

pub const DEFAULT_LR: f64 = 5e-2;
pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;
/// Stage-2 network learning rate of the default protocol.
pub const DEFAULT_STAGE2_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupPlan {
    /// Epochs with the backbone frozen.
    pub u: usize,
    /// Epochs updating every parameter.
    pub v: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            momentum: 0.9,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidSpec(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Logits of every example.
pub fn predict_logits(net: &SmallNet, data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.len()).map(|i| net.logits(data.x(i))).collect()
}

pub fn predict_probs(net: &SmallNet, data: &Dataset) -> Vec<Vec<f64>> {
    (0..data.len()).map(|i| softmax(&net.logits(data.x(i)))).collect()
}

pub fn accuracy_of(net: &SmallNet, data: &Dataset) -> f64 {
    let correct = (0..data.len())
        .filter(|&i| argmax(&net.logits(data.x(i))) == data.labels()[i])
        .count();
    correct as f64 / data.len().max(1) as f64
}

fn check_shapes(net: &SmallNet, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyInput("training data is empty".into()));
    }
    if net.input() != data.dim() || net.classes() != data.classes() {
        return Err(Error::invalid(format!(
            "network {}->{} does not fit data {}->{}",
            net.input(),
            net.classes(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// One epoch of softmax cross-entropy on the dataset's labels, restricted
/// to `indices`. Returns the mean loss.
pub fn ce_epoch(
    net: &mut SmallNet,
    opt: &mut Sgd,
    data: &Dataset,
    indices: &[usize],
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    let mut grad = vec![0.0; net.params().len()];
    let mut h = vec![0.0; net.hidden()];
    let mut z = vec![0.0; net.classes()];
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let inv_b = 1.0 / batch.len() as f64;
        for &i in batch {
            net.forward_into(data.x(i), &mut h, &mut z);
            let mut d = softmax(&z);
            let y = data.labels()[i];
            total -= d[y].max(f64::MIN_POSITIVE).ln();
            d[y] -= 1.0;
            d.iter_mut().for_each(|v| *v *= inv_b);
            net.backward_into(data.x(i), &h, &d, &mut grad);
        }
        opt.step(net, &grad, lr);
    }
    total / order.len().max(1) as f64
}

/// `u` head-only epochs, then `v` full epochs, cross-entropy on the given
/// labels. Returns per-epoch mean losses.
pub fn train_warmup(
    net: &mut SmallNet,
    data: &Dataset,
    plan: WarmupPlan,
    opt_cfg: &OptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_shapes(net, data)?;
    opt_cfg.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(net, opt_cfg.momentum, opt_cfg.weight_decay);
    let mut losses = Vec::with_capacity(plan.u + plan.v);
    let was_frozen = net.frozen_backbone;
    net.frozen_backbone = true;
    for _ in 0..plan.u {
        losses.push(ce_epoch(net, &mut opt, data, &all, opt_cfg.lr, opt_cfg.batch_size, rng));
    }
    net.frozen_backbone = was_frozen;
    for _ in 0..plan.v {
        losses.push(ce_epoch(net, &mut opt, data, &all, opt_cfg.lr, opt_cfg.batch_size, rng));
    }
    Ok(losses)
}

/// Plain cross-entropy for `epochs` epochs with the learning rate cut by
/// `decay_factor` from `decay_epoch` on.
pub fn train_ce(
    net: &mut SmallNet,
    data: &Dataset,
    epochs: usize,
    decay_epoch: usize,
    decay_factor: f64,
    opt_cfg: &OptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    check_shapes(net, data)?;
    opt_cfg.validate()?;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut opt = Sgd::new(net, opt_cfg.momentum, opt_cfg.weight_decay);
    Ok((0..epochs)
        .map(|e| {
            let lr = if e >= decay_epoch {
                opt_cfg.lr * decay_factor
            } else {
                opt_cfg.lr
            };
            ce_epoch(net, &mut opt, data, &all, lr, opt_cfg.batch_size, rng)
        })
        .collect())
}

/// One network plus its soft labels, optimizer state and shuffling stream.
#[derive(Debug, Clone)]
pub struct Branch {
    pub net: SmallNet,
    pub labels: SoftLabelTable,
    opt: Sgd,
    rng: ChaCha8Rng,
}

impl Branch {
    pub fn new(net: SmallNet, labels: SoftLabelTable, momentum: f64, weight_decay: f64, seed: u64) -> Self {
        Branch {
            opt: Sgd::new(&net, momentum, weight_decay),
            net,
            labels,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchPair {
    pub branches: [Branch; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub schedule: PencilSchedule,
    pub p_e: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Initialize soft labels from the warmed-up predictions instead of the
    /// hard labels.
    pub init_from_predictions: bool,
}

impl Stage2Config {
    pub fn new(network_lr: f64, p_e: f64) -> Self {
        Stage2Config {
            schedule: PencilSchedule::with_network_lr(network_lr),
            p_e,
            batch_size: DEFAULT_BATCH,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            init_from_predictions: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.p_e) {
            return Err(Error::InvalidSpec(format!("p_e {} outside [0, 1)", self.p_e)));
        }
        if self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidSpec("invalid batch size or weight decay".into()));
        }
        Ok(())
    }
}

impl BranchPair {
    /// Wraps two warmed-up networks. Each branch's shuffling stream is
    /// seeded separately.
    pub fn new(nets: [SmallNet; 2], data: &Dataset, cfg: &Stage2Config, seeds: [u64; 2]) -> Result<Self> {
        let make = |net: SmallNet, seed: u64| -> Result<Branch> {
            check_shapes(&net, data)?;
            let labels = if cfg.init_from_predictions {
                SoftLabelTable::from_predictions(data.labels(), &predict_probs(&net, data))?
            } else {
                SoftLabelTable::from_hard_labels(data.labels(), data.classes(), DEFAULT_INIT_SCALE)?
            }
            .with_momentum(cfg.schedule.momentum);
            Ok(Branch::new(net, labels, cfg.schedule.momentum, cfg.weight_decay, seed))
        };
        let [a, b] = nets;
        Ok(BranchPair {
            branches: [make(a, seeds[0])?, make(b, seeds[1])?],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub branch: usize,
    pub loss: f64,
    pub kept_count: usize,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub test_map: Option<f64>,
    pub filter: FilterLogRow,
}

/// Entropy, GMM fit and filter for one branch on every training example.
pub fn filter_branch(branch: &Branch, data: &Dataset, p_e: f64) -> Result<(FilterDecision, FilterLogRow)> {
    let entropies = entropy_profile(&predict_probs(&branch.net, data))?;
    let (decision, model) = fit_and_filter(&entropies, p_e)?;
    let row = FilterLogRow::new(0, 0, &decision, model.as_ref());
    Ok((decision, row))
}

/// One soft-label correction epoch on `kept`: the network descends the
/// batch-mean reverse cross-entropy against the current soft labels, and
/// the soft labels descend the batch-summed loss against the predictions
/// from the same forward pass.
pub fn pencil_epoch(
    branch: &mut Branch,
    data: &Dataset,
    kept: &[usize],
    net_lr: f64,
    soft_lr: f64,
    batch_size: usize,
) -> Result<f64> {
    let mut order = kept.to_vec();
    order.shuffle(&mut branch.rng);
    let net = &mut branch.net;
    let mut grad = vec![0.0; net.params().len()];
    let mut hs = vec![vec![0.0; net.hidden()]; batch_size];
    let mut z = vec![0.0; net.classes()];
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let mut preds = Vec::with_capacity(batch.len());
        for (slot, &i) in batch.iter().enumerate() {
            net.forward_into(data.x(i), &mut hs[slot], &mut z);
            preds.push(softmax(&z));
        }
        let hard = batch.iter().map(|&i| data.labels()[i]).collect();
        let view = BatchView::new(batch.to_vec(), preds, hard)?;
        let out = network_loss_and_grad(&view, &branch.labels)?;
        total += out.loss * batch.len() as f64;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (slot, &i) in batch.iter().enumerate() {
            net.backward_into(data.x(i), &hs[slot], &out.grad_logits[slot], &mut grad);
        }
        branch.opt.step(net, &grad, net_lr);
        branch.labels.update(&view, soft_lr)?;
    }
    Ok(total / order.len().max(1) as f64)
}

/// Stage-2 loop. Each epoch, each branch independently filters all
/// training examples by prediction entropy and then runs one correction
/// epoch on the kept ones.
pub fn run_stage2(
    pair: &mut BranchPair,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &Stage2Config,
) -> Result<Vec<EpochLog>> {
    run_stage2_with(pair, data, test, cfg, |_| Ok(()))
}

/// [`run_stage2`] calling `on_epoch` as soon as each log entry exists.
pub fn run_stage2_with(
    pair: &mut BranchPair,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &Stage2Config,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut logs = Vec::with_capacity(cfg.schedule.epochs * 2);
    for epoch in 0..cfg.schedule.epochs {
        let (net_lr, soft_lr) = cfg.schedule.rates(epoch);
        for (b, branch) in pair.branches.iter_mut().enumerate() {
            let (decision, mut row) = filter_branch(branch, data, cfg.p_e)?;
            row.epoch = epoch;
            row.branch = b;
            let kept = decision.kept_indices();
            let loss = pencil_epoch(branch, data, &kept, net_lr, soft_lr, cfg.batch_size)?;
            let (test_acc, test_map) = match test {
                Some(t) => {
                    let r = evaluate_net(&branch.net, t)?;
                    (Some(r.accuracy), Some(r.map))
                }
                None => (None, None),
            };
            log::debug!(
                "epoch {epoch} branch {b}: loss {loss:.4}, kept {}/{}",
                kept.len(),
                data.len()
            );
            let log = EpochLog {
                epoch,
                branch: b,
                loss,
                kept_count: kept.len(),
                train_acc: accuracy_of(&branch.net, data),
                test_acc,
                test_map,
                filter: row,
            };
            on_epoch(&log)?;
            logs.push(log);
        }
    }
    Ok(logs)
}

pub fn evaluate_net(net: &SmallNet, test: &Dataset) -> Result<EvalReport> {
    let preds = ScoredPredictions::new(test.classes(), predict_probs(net, test), test.labels().to_vec())?;
    metrics::map(&preds)
}

/// Softmax of the summed branch logits.
pub fn ensemble_predictions(nets: [&SmallNet; 2], test: &Dataset) -> Result<ScoredPredictions> {
    if test.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    ensemble_logits(
        &predict_logits(nets[0], test),
        &predict_logits(nets[1], test),
        test.labels().to_vec(),
    )
}

pub fn evaluate_pair(pair: &BranchPair, test: &Dataset) -> Result<EvalReport> {
    let [a, b] = &pair.branches;
    metrics::map(&ensemble_predictions([&a.net, &b.net], test)?)
}

/// Which provenance groups enter training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subset {
    pub clean: bool,
    pub open: bool,
    pub closed: bool,
}

impl Subset {
    pub const ALL: Subset = Subset {
        clean: true,
        open: true,
        closed: true,
    };

    pub fn contains(&self, tag: NoiseTag) -> bool {
        match tag {
            NoiseTag::Clean => self.clean,
            NoiseTag::OpenNoise => self.open,
            NoiseTag::ClosedNoise => self.closed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Cross-entropy on the subset from scratch.
    PlainCe,
    /// Warmup and stage 1 on all data, stage 2 on the subset.
    FilterCorrect { p_e: f64 },
}

/// Everything needed to reproduce one training run on the fixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub hidden: usize,
    pub warmup: WarmupPlan,
    /// Plain cross-entropy epochs after warmup, standing in for stage 1. The
    /// learning rate drops by 10x halfway through.
    pub stage1_epochs: usize,
    pub opt: OptConfig,
    pub schedule: PencilSchedule,
    pub init_from_predictions: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            hidden: DEFAULT_HIDDEN,
            warmup: WarmupPlan { u: 30, v: 5 },
            stage1_epochs: 20,
            opt: OptConfig::default(),
            schedule: PencilSchedule::with_network_lr(DEFAULT_STAGE2_LR),
            init_from_predictions: false,
        }
    }
}

impl Protocol {
    pub fn stage2(&self, p_e: f64) -> Stage2Config {
        Stage2Config {
            init_from_predictions: self.init_from_predictions,
            batch_size: self.opt.batch_size,
            weight_decay: self.opt.weight_decay,
            schedule: self.schedule,
            ..Stage2Config::new(self.schedule.network_lr, p_e)
        }
    }

    /// Network seeds for a run seed; the two branches never share one.
    pub fn branch_seeds(seed: u64) -> [u64; 2] {
        [
            seed.wrapping_mul(2).wrapping_add(1),
            seed.wrapping_mul(2).wrapping_add(2),
        ]
    }

    /// Warmup then stage-1 epochs for both branches on `data`.
    pub fn stage1(&self, data: &Dataset, seed: u64) -> Result<[SmallNet; 2]> {
        let seeds = Self::branch_seeds(seed);
        let train = |s: u64| -> Result<SmallNet> {
            let mut net = SmallNet::new(data.dim(), self.hidden, data.classes(), s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x5eed);
            train_warmup(&mut net, data, self.warmup, &self.opt, &mut rng)?;
            if self.stage1_epochs > 0 {
                train_ce(
                    &mut net,
                    data,
                    self.stage1_epochs,
                    self.stage1_epochs / 2,
                    0.1,
                    &self.opt,
                    &mut rng,
                )?;
            }
            Ok(net)
        };
        Ok([train(seeds[0])?, train(seeds[1])?])
    }

    /// Stage 2 from already trained networks.
    pub fn stage2_from(
        &self,
        nets: [SmallNet; 2],
        data: &Dataset,
        p_e: f64,
        seed: u64,
    ) -> Result<(BranchPair, Vec<EpochLog>)> {
        let mut pair = Self::stage2_pair(nets, data, &self.stage2(p_e), seed)?;
        let logs = run_stage2(&mut pair, data, None, &self.stage2(p_e))?;
        Ok((pair, logs))
    }

    /// The branch pair stage 2 starts from, with shuffling streams derived
    /// from the run seed.
    pub fn stage2_pair(nets: [SmallNet; 2], data: &Dataset, cfg: &Stage2Config, seed: u64) -> Result<BranchPair> {
        BranchPair::new(nets, data, cfg, Self::branch_seeds(seed).map(|s| s ^ 0x57a9e2))
    }

    /// Cross-entropy baseline trained for the same number of epochs as the
    /// two-stage pipeline.
    pub fn plain_ce(&self, data: &Dataset, seed: u64) -> Result<[SmallNet; 2]> {
        let extended = Protocol {
            stage1_epochs: self.stage1_epochs + self.schedule.epochs,
            ..*self
        };
        extended.stage1(data, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub keep: Subset,
    pub method: Method,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AblationRow {
    fn from_runs(keep: Subset, method: Method, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        AblationRow {
            keep,
            method,
            accuracies,
            mean,
            std,
        }
    }
}

fn subset_data(fixture: &NoisyFixture, keep: Subset) -> Result<Dataset> {
    let idx = fixture.indices_with(|t| keep.contains(t));
    if idx.is_empty() {
        return Err(Error::EmptyInput(format!("subset {keep:?} selects no examples")));
    }
    Ok(fixture.train.subset(&idx))
}

/// Ensemble test accuracy of one configuration over several seeds.
pub fn ablation_run(
    fixture: &NoisyFixture,
    keep: Subset,
    method: Method,
    protocol: &Protocol,
    seeds: &[u64],
) -> Result<AblationRow> {
    let data = subset_data(fixture, keep)?;
    let mut accs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let nets = match method {
            Method::PlainCe => protocol.plain_ce(&data, seed)?,
            Method::FilterCorrect { p_e } => {
                let warm = protocol.stage1(&fixture.train, seed)?;
                let (pair, _) = protocol.stage2_from(warm, &data, p_e, seed)?;
                pair.branches.map(|b| b.net)
            }
        };
        accs.push(metrics::accuracy(&ensemble_predictions(
            [&nets[0], &nets[1]],
            &fixture.test,
        )?)?);
    }
    Ok(AblationRow::from_runs(keep, method, accs))
}

/// The eight ablation rows: all / clean+open / clean+closed, each with
/// `p_e = 0` and `0.5`, then clean-only and all-data cross-entropy. Stage 1
/// is shared between the six filtered rows of a seed.
pub fn ablation_table(fixture: &NoisyFixture, protocol: &Protocol, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let groups = [
        Subset::ALL,
        Subset {
            closed: false,
            ..Subset::ALL
        },
        Subset {
            open: false,
            ..Subset::ALL
        },
    ];
    let p_values = [0.0, 0.5];
    let mut runs = vec![Vec::with_capacity(seeds.len()); groups.len() * p_values.len()];
    let datasets: Vec<Dataset> = groups.iter().map(|&g| subset_data(fixture, g)).collect::<Result<_>>()?;
    for &seed in seeds {
        let warm = protocol.stage1(&fixture.train, seed)?;
        for (g, data) in datasets.iter().enumerate() {
            for (p, &p_e) in p_values.iter().enumerate() {
                let (pair, _) = protocol.stage2_from(warm.clone(), data, p_e, seed)?;
                let [a, b] = &pair.branches;
                runs[g * 2 + p].push(metrics::accuracy(&ensemble_predictions(
                    [&a.net, &b.net],
                    &fixture.test,
                )?)?);
            }
        }
    }
    let mut rows: Vec<AblationRow> = runs
        .into_iter()
        .enumerate()
        .map(|(i, accs)| AblationRow::from_runs(groups[i / 2], Method::FilterCorrect { p_e: p_values[i % 2] }, accs))
        .collect();
    let clean = Subset {
        clean: true,
        open: false,
        closed: false,
    };
    rows.push(ablation_run(fixture, clean, Method::PlainCe, protocol, seeds)?);
    rows.push(ablation_run(fixture, Subset::ALL, Method::PlainCe, protocol, seeds)?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> Dataset {
        let cfg = BlobsConfig {
            per_class: 40,
            pool_per_class: 60,
            test_per_class: 20,
            open_pool_per_sector: 20,
            classes: 4,
            open_sectors: 8,
            ..BlobsConfig::default()
        };
        blobs_fixture(&cfg).unwrap().train
    }

    #[test]
    fn warmup_contracts() {
        let data = tiny_data();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SmallNet::new(2, 8, 4, 3).unwrap();
        let before = net.clone();
        train_warmup(
            &mut net,
            &data,
            WarmupPlan { u: 0, v: 0 },
            &OptConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(net, before);
        train_warmup(
            &mut net,
            &data,
            WarmupPlan { u: 3, v: 0 },
            &OptConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(net.backbone(), before.backbone());
        assert_ne!(net.head(), before.head());
        assert!(!net.frozen_backbone);
        let empty = data.subset(&[]);
        assert!(train_warmup(
            &mut net,
            &empty,
            WarmupPlan { u: 1, v: 0 },
            &OptConfig::default(),
            &mut rng
        )
        .is_err());
    }

    fn small_pair(data: &Dataset, p_e: f64) -> (BranchPair, Stage2Config) {
        let protocol = Protocol {
            hidden: 8,
            warmup: WarmupPlan { u: 2, v: 2 },
            ..Protocol::default()
        };
        let nets = protocol.stage1(data, 4).unwrap();
        let mut cfg = protocol.stage2(p_e);
        cfg.schedule.epochs = 3;
        cfg.schedule.decay_epoch = 2;
        let pair = BranchPair::new(nets, data, &cfg, [1, 2]).unwrap();
        (pair, cfg)
    }

    #[test]
    fn branches_are_independent() {
        let data = tiny_data();
        let (mut pair, cfg) = small_pair(&data, 0.5);
        let mut swapped = pair.clone();
        swapped.branches.swap(0, 1);
        run_stage2(&mut pair, &data, None, &cfg).unwrap();
        run_stage2(&mut swapped, &data, None, &cfg).unwrap();
        assert_eq!(pair.branches[0].net, swapped.branches[1].net);
        assert_eq!(pair.branches[1].labels, swapped.branches[0].labels);

        // Branch A's filter ignores whatever branch B holds.
        let (fresh, _) = small_pair(&data, 0.5);
        let mut other = fresh.clone();
        other.branches[1].net = SmallNet::new(2, 8, 4, 99).unwrap();
        let a = filter_branch(&fresh.branches[0], &data, 0.5).unwrap().0;
        let b = filter_branch(&other.branches[0], &data, 0.5).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn dropped_examples_keep_their_soft_labels() {
        let data = tiny_data();
        let (pair, cfg) = small_pair(&data, 0.5);
        let mut branch = pair.branches[0].clone();
        let (decision, _) = filter_branch(&branch, &data, cfg.p_e).unwrap();
        let before = branch.labels.clone();
        let kept = decision.kept_indices();
        pencil_epoch(&mut branch, &data, &kept, 1e-3, 0.5, 16).unwrap();
        for j in (0..data.len()).filter(|j| !decision.keep[*j]) {
            assert_eq!(branch.labels.logits(j), before.logits(j));
        }
        assert!(kept.iter().any(|&j| branch.labels.logits(j) != before.logits(j)));
    }

    #[test]
    fn ensemble_of_identical_branches_matches_branch() {
        let data = tiny_data();
        let net = SmallNet::new(2, 8, 4, 3).unwrap();
        let e = ensemble_predictions([&net, &net], &data).unwrap();
        for (i, s) in e.scores().iter().enumerate() {
            assert_eq!(argmax(s), argmax(&net.logits(data.x(i))));
        }
        let mut zero = SmallNet::new(2, 8, 4, 4).unwrap();
        zero.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let e = ensemble_predictions([&net, &zero], &data).unwrap();
        for (i, s) in e.scores().iter().enumerate() {
            assert_eq!(argmax(s), argmax(&net.logits(data.x(i))));
        }
    }

    #[test]
    fn stage2_is_deterministic_and_logged() {
        let data = tiny_data();
        let (mut a, cfg) = small_pair(&data, 0.5);
        let mut b = a.clone();
        let la = run_stage2(&mut a, &data, Some(&data), &cfg).unwrap();
        let lb = run_stage2(&mut b, &data, Some(&data), &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(la.len(), 6);
        assert!(la.iter().all(|l| l.kept_count + l.filter.dropped == data.len()));
    }
}
