//! Leave-one-domain-out training for DG, SSDG and UDA, evaluation, run
//! reports and the ablation harness.

use std::sync::Mutex;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneSpec, MixStyleNet, NUM_BLOCKS};
use crate::datagen::{Dataset, ImageSet, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mixstyle::{MixStyleConfig, Placement, ShuffleSharing, Strategy, Variant};
use crate::optim::{Sgd, SgdConfig, clip_grad_norm, cosine_lr};
use crate::scalar::Scalar;
use crate::semisup::{
    LabeledExample, SemiSupConfig, SemiSupTask, UnlabeledExample, build_semisup_batch, joint_loss,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Supervised training on the labeled part of every source domain.
    Dg,
    Ssdg,
    Uda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub widths: [usize; NUM_BLOCKS],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { widths: [16, 32, 64, 128] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub target_domain: usize,
    /// Turns every MixStyle module off.
    pub baseline: bool,
    /// Random flip and crop on labeled images.
    pub augment: bool,
    /// Overrides the number of optimizer steps per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate test accuracies every this many epochs (and always after the
    /// last one).
    pub eval_every: usize,
    /// Caps the global gradient L2 norm per step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Dg,
            epochs: 30,
            batch_size: 32,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 1,
            target_domain: 0,
            baseline: false,
            augment: true,
            steps_per_epoch: None,
            eval_every: 1,
            grad_clip: None,
        }
    }
}

/// Everything that determines a training run together with the dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub mixstyle: MixStyleConfig,
    pub semisup: SemiSupConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size < 2 || t.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and >= 2, got {}", t.batch_size)));
        }
        if t.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(t.lr0 > 0.0 && t.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0, got {}", t.lr0)));
        }
        if !(0.0..1.0).contains(&t.momentum) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        if t.eval_every == 0 || t.steps_per_epoch == Some(0) {
            return Err(Error::Config("eval_every and steps_per_epoch must be positive".into()));
        }
        if t.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if self.model.widths.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.mixstyle.validate()?;
        self.semisup.validate()
    }

    /// MixStyle settings in effect, `None` for the baseline.
    pub fn active_mixstyle(&self) -> Option<&MixStyleConfig> {
        (!self.train.baseline && !self.mixstyle.insertion_points.is_empty()).then_some(&self.mixstyle)
    }

    /// Short content hash that ignores the seed and the target domain.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.seed = 0;
        c.train.target_domain = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    /// Fraction of unlabeled instances above the confidence threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confident_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub target_domain: usize,
    pub source_domains: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub final_source_acc: f64,
    pub final_target_acc: f64,
    /// Target-domain confusion counts, `[true class][predicted class]`.
    pub confusion: Vec<Vec<u64>>,
    /// Left out of serialized reports unless set, so reruns stay identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

pub struct TrainedModel {
    pub report: RunReport,
    pub backbone: Backbone<f32>,
}

/// Accuracy and confusion matrix of a model on one or more image sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub correct: u64,
    pub total: u64,
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 { 0.0 } else { self.correct as f64 / self.total as f64 }
    }
}

const EVAL_CHUNK: usize = 100;

pub fn evaluate<S: Scalar>(model: &Backbone<S>, sets: &[&ImageSet]) -> Result<Evaluation> {
    let k = model.spec.classes;
    let mut ev = Evaluation {
        correct: 0,
        total: 0,
        confusion: vec![vec![0; k]; k],
    };
    for set in sets {
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let logits = model.predict(set.batch::<S>(chunk)?)?;
            for (row, &i) in logits.data().chunks(k).zip(chunk) {
                let pred = argmax(row);
                let truth = set.classes[i];
                if truth >= k {
                    return Err(Error::invalid(format!("label {truth} outside {k} classes")));
                }
                ev.confusion[truth][pred] += 1;
                ev.correct += u64::from(pred == truth);
                ev.total += 1;
            }
        }
    }
    Ok(ev)
}

/// Index of the largest entry; ties go to the lowest index.
fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Seeded generator for one purpose of one run.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(purpose);
    r
}

const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_MIX: u64 = 3;

/// Pools of training images gathered from the dataset for one run.
struct Pools<'a> {
    labeled: Vec<(&'a ImageSet, usize)>,
    unlabeled: Vec<(&'a ImageSet, usize)>,
}

fn gather_pools<'a>(data: &'a Dataset, task: Task, sources: &[usize], target: usize) -> Pools<'a> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for &d in sources {
        let set = data.split(d, Split::Train);
        for i in 0..set.len() {
            if set.labeled[i] {
                labeled.push((set, i));
            } else if task == Task::Ssdg {
                unlabeled.push((set, i));
            }
        }
    }
    if task == Task::Uda {
        let set = data.split(target, Split::Train);
        unlabeled.extend((0..set.len()).map(|i| (set, i)));
    }
    Pools { labeled, unlabeled }
}

fn labeled_example(entry: (&ImageSet, usize)) -> LabeledExample<f32> {
    let (set, i) = entry;
    LabeledExample {
        image: set.image_tensor(i),
        label: set.classes[i],
        domain_id: set.domains[i],
    }
}

fn unlabeled_example(entry: (&ImageSet, usize)) -> UnlabeledExample<f32> {
    let (set, i) = entry;
    UnlabeledExample {
        image: set.image_tensor(i),
        domain_id: set.domains[i],
        pseudo_label: None,
    }
}

/// Per-epoch batch order for supervised steps.
///
/// The random-shuffle strategy walks a shuffled permutation of the pool;
/// the cross-domain strategy fills each batch with two halves from two
/// distinct, randomly chosen source domains.
fn supervised_batches<R: Rng + ?Sized>(
    pool: &[(&ImageSet, usize)],
    batch: usize,
    steps: usize,
    cross_domain: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if pool.len() < batch {
        return Err(Error::InsufficientData(format!(
            "labeled pool: need {batch}, have {}",
            pool.len()
        )));
    }
    if !cross_domain {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut out = Vec::with_capacity(steps);
        let mut cursor = order.len();
        for _ in 0..steps {
            if cursor + batch > order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            out.push(order[cursor..cursor + batch].to_vec());
            cursor += batch;
        }
        return Ok(out);
    }
    let mut by_domain: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    for (j, (set, i)) in pool.iter().enumerate() {
        let d = set.domains[*i];
        match by_domain.iter_mut().find(|e| e.0 == d) {
            Some(e) => e.1.push(j),
            None => by_domain.push((d, vec![j], 0)),
        }
    }
    let half = batch / 2;
    if by_domain.len() < 2 || by_domain.iter().any(|e| e.1.len() < half) {
        return Err(Error::InsufficientData(format!(
            "cross-domain sampling needs two source domains with >= {half} labeled images each"
        )));
    }
    for e in by_domain.iter_mut() {
        e.2 = e.1.len();
    }
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let a = rng.random_range(0..by_domain.len());
        let mut b = rng.random_range(0..by_domain.len() - 1);
        if b >= a {
            b += 1;
        }
        let mut idx = Vec::with_capacity(batch);
        for d in [a, b] {
            let e = &mut by_domain[d];
            if e.2 + half > e.1.len() {
                e.1.shuffle(rng);
                e.2 = 0;
            }
            idx.extend_from_slice(&e.1[e.2..e.2 + half]);
            e.2 += half;
        }
        out.push(idx);
    }
    Ok(out)
}

/// Trains one model with the held-out `target_domain` and reports source
/// and target test accuracy.
pub fn run_experiment(config: &ExperimentConfig, data: &Dataset) -> Result<TrainedModel> {
    config.validate()?;
    let start = Instant::now();
    let t = &config.train;
    let domains = data.domains();
    if t.target_domain >= domains {
        return Err(Error::Config(format!(
            "target_domain {} outside the dataset's {domains} domains",
            t.target_domain
        )));
    }
    let sources: Vec<usize> = (0..domains).filter(|&d| d != t.target_domain).collect();
    let pools = gather_pools(data, t.task, &sources, t.target_domain);
    if pools.labeled.is_empty() {
        return Err(Error::InsufficientData("no labeled source images".into()));
    }
    if t.task != Task::Dg && pools.unlabeled.is_empty() {
        return Err(Error::InsufficientData("no unlabeled images for a semi-supervised task".into()));
    }
    let half = t.batch_size / 2;
    let steps = t.steps_per_epoch.unwrap_or(match t.task {
        Task::Dg => (pools.labeled.len() / t.batch_size).max(1),
        Task::Ssdg | Task::Uda => (pools.unlabeled.len() / half).max(1),
    });
    let total_steps = steps * t.epochs;

    let [c, _, _] = data.split(0, Split::Train).size;
    let spec = BackboneSpec::new(c, config.model.widths, data.classes())?;
    let mut backbone = Backbone::<f32>::init(spec, &mut stream(t.seed, STREAM_INIT));
    let mut sgd = Sgd::new(
        &backbone.params,
        SgdConfig {
            momentum: t.momentum,
            weight_decay: t.weight_decay,
        },
    );
    let mut data_rng = stream(t.seed, STREAM_DATA);
    let mut mix_rng = stream(t.seed, STREAM_MIX);
    let mixstyle = config.active_mixstyle();
    let cross_domain = mixstyle.is_some_and(|m| m.strategy == Strategy::CrossDomain);

    let labeled_domains: Vec<usize> = pools.labeled.iter().map(|(s, i)| s.domains[*i]).collect();
    let unlabeled_domains: Vec<usize> = pools.unlabeled.iter().map(|(s, i)| s.domains[*i]).collect();
    let source_tests: Vec<&ImageSet> = sources.iter().map(|&d| data.split(d, Split::Test)).collect();
    let target_test = data.split(t.target_domain, Split::Test);

    let mut epochs = Vec::with_capacity(t.epochs);
    let mut step = 0;
    for epoch in 0..t.epochs {
        let plan = match t.task {
            Task::Dg => Some(supervised_batches(&pools.labeled, t.batch_size, steps, cross_domain, &mut data_rng)?),
            _ => None,
        };
        let mut loss_sum = 0.0;
        let (mut confident, mut seen) = (0usize, 0usize);
        for s in 0..steps {
            let lr = cosine_lr(step, total_steps, t.lr0)?;
            let mut g = Graph::<f32>::new();
            let mut net = MixStyleNet::new(&mut g, &backbone, mixstyle, &mut mix_rng);
            let (loss, n_conf, n_unl) = match &plan {
                Some(plan) => {
                    let idx = &plan[s];
                    let labeled: Vec<_> = idx.iter().map(|&j| labeled_example(pools.labeled[j])).collect();
                    net.groups = labeled.iter().map(|e| e.domain_id).collect();
                    let loss = if t.augment {
                        joint_loss(&mut g, &mut net, &labeled, &mut [], &config.semisup, &mut data_rng)?.total
                    } else {
                        let refs: Vec<&Tensor<f32>> = labeled.iter().map(|e| &e.image).collect();
                        let x = g.constant(Tensor::stack(&refs)?);
                        let logits = net.forward(&mut g, x, true)?;
                        let targets: Vec<usize> = labeled.iter().map(|e| e.label).collect();
                        g.softmax_cross_entropy(logits, &targets)?
                    };
                    (loss, 0, 0)
                }
                None => {
                    let task = if t.task == Task::Uda { SemiSupTask::Uda } else { SemiSupTask::Ssdg };
                    let b = build_semisup_batch(
                        &labeled_domains,
                        &unlabeled_domains,
                        &sources,
                        Some(t.target_domain),
                        t.batch_size,
                        task,
                        &mut data_rng,
                    )?;
                    let labeled: Vec<_> = b.labeled.iter().map(|&j| labeled_example(pools.labeled[j])).collect();
                    let mut unlabeled: Vec<_> =
                        b.unlabeled.iter().map(|&j| unlabeled_example(pools.unlabeled[j])).collect();
                    net.groups = b.groups();
                    let jl = joint_loss(&mut g, &mut net, &labeled, &mut unlabeled, &config.semisup, &mut data_rng)?;
                    (jl.total, jl.confident, unlabeled.len())
                }
            };
            let vars = std::mem::take(&mut net.vars);
            drop(net);
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss {value} at epoch {epoch}, step {s} (lr {lr:.3e})"
                )));
            }
            let grads = g.backward(loss)?;
            let mut grads: Vec<Tensor<f32>> = (0..backbone.params.len())
                .map(|i| {
                    grads
                        .get(vars[i])
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(backbone.params[i].shape()))
                })
                .collect();
            if let Some(c) = t.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            sgd.step(&mut backbone.params, &grads, lr)?;
            loss_sum += value;
            confident += n_conf;
            seen += n_unl;
            step += 1;
        }
        let evaluate_now = (epoch + 1) % t.eval_every == 0 || epoch + 1 == t.epochs;
        let (source_acc, target_acc) = if evaluate_now {
            (
                Some(evaluate(&backbone, &source_tests)?.accuracy()),
                Some(evaluate(&backbone, &[target_test])?.accuracy()),
            )
        } else {
            (None, None)
        };
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            source_acc,
            target_acc,
            confident_fraction: (seen > 0).then(|| confident as f64 / seen as f64),
        });
    }

    let final_source_acc = evaluate(&backbone, &source_tests)?.accuracy();
    let target_eval = evaluate(&backbone, &[target_test])?;
    let report = RunReport {
        config: config.clone(),
        seed: t.seed,
        target_domain: t.target_domain,
        source_domains: sources,
        epochs,
        final_source_acc,
        final_target_acc: target_eval.accuracy(),
        confusion: target_eval.confusion,
        wall_clock_secs: Some(start.elapsed().as_secs_f64()),
    };
    Ok(TrainedModel { report, backbone })
}

/// One configuration of an ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationEntry {
    pub label: String,
    pub config: ExperimentConfig,
}

impl AblationEntry {
    pub fn new(label: impl Into<String>, config: ExperimentConfig) -> Self {
        Self {
            label: label.into(),
            config,
        }
    }

    /// `label-hash`, stable across seeds and targets.
    pub fn config_id(&self) -> String {
        format!("{}-{}", self.label, self.config.hash())
    }
}

/// Aggregated accuracy of one configuration on one target domain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub config_id: String,
    pub label: String,
    pub target_domain: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub n_seeds: usize,
    pub target_accs: Vec<f64>,
    pub source_accs: Vec<f64>,
}

/// Placement rows: res1, res12, res123, res1234, res14, res23.
pub fn placement_matrix(base: &ExperimentConfig) -> Vec<AblationEntry> {
    let rows: [&[usize]; 6] = [&[0], &[0, 1], &[0, 1, 2], &[0, 1, 2, 3], &[0, 3], &[1, 2]];
    rows.iter()
        .map(|blocks| {
            let mut c = base.clone();
            c.train.baseline = false;
            c.mixstyle.insertion_points = Placement::new(blocks.iter().copied()).expect("valid slots");
            AblationEntry::new(c.mixstyle.insertion_points.to_string(), c)
        })
        .collect()
}

pub fn alpha_sweep(base: &ExperimentConfig, alphas: &[f64]) -> Vec<AblationEntry> {
    alphas
        .iter()
        .map(|&a| {
            let mut c = base.clone();
            c.train.baseline = false;
            c.mixstyle.alpha = a;
            AblationEntry::new(format!("alpha{a}"), c)
        })
        .collect()
}

/// Mixing versus replacing statistics.
pub fn variant_matrix(base: &ExperimentConfig) -> Vec<AblationEntry> {
    [Variant::Mix, Variant::Replace]
        .into_iter()
        .map(|v| {
            let mut c = base.clone();
            c.train.baseline = false;
            c.mixstyle.variant = v;
            let label = if v == Variant::Mix { "mixing" } else { "replacing" };
            AblationEntry::new(label, c)
        })
        .collect()
}

/// Per-layer random shuffle versus one shuffle shared by all layers.
pub fn shuffle_matrix(base: &ExperimentConfig) -> Vec<AblationEntry> {
    [ShuffleSharing::PerLayer, ShuffleSharing::Fixed]
        .into_iter()
        .map(|s| {
            let mut c = base.clone();
            c.train.baseline = false;
            c.mixstyle.shuffle = s;
            let label = if s == ShuffleSharing::PerLayer { "random" } else { "fixed" };
            AblationEntry::new(label, c)
        })
        .collect()
}

pub fn baseline_entry(base: &ExperimentConfig) -> AblationEntry {
    let mut c = base.clone();
    c.train.baseline = true;
    AblationEntry::new("baseline", c)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every `(entry, target, seed)` combination, using up to `jobs`
/// worker threads, and aggregates over seeds. Row order follows `entries`
/// then `targets` regardless of scheduling.
pub fn run_ablation(
    entries: &[AblationEntry],
    targets: &[usize],
    seeds: &[u64],
    data: &Dataset,
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let mut work = Vec::new();
    for (e, entry) in entries.iter().enumerate() {
        for &target in targets {
            for &seed in seeds {
                let mut c = entry.config.clone();
                c.train.target_domain = target;
                c.train.seed = seed;
                work.push((e, target, c));
            }
        }
    }
    let results: Mutex<Vec<Option<Result<(f64, f64)>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            scope.spawn(|| {
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= work.len() {
                        break;
                    }
                    let out = run_experiment(&work[i].2, data)
                        .map(|m| (m.report.final_target_acc, m.report.final_source_acc));
                    let failed = out.is_err();
                    results.lock().expect("no poisoned workers")[i] = Some(out);
                    if failed {
                        next.store(work.len(), Ordering::SeqCst);
                    }
                }
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned workers").into_iter();

    let mut rows = Vec::new();
    for entry in entries {
        for &target in targets {
            let mut target_accs = Vec::with_capacity(seeds.len());
            let mut source_accs = Vec::with_capacity(seeds.len());
            for _ in seeds {
                match results.next().flatten() {
                    Some(Ok((t, s))) => {
                        target_accs.push(t);
                        source_accs.push(s);
                    }
                    Some(Err(e)) => return Err(e),
                    None => return Err(Error::invalid("ablation run was skipped after an earlier failure")),
                }
            }
            let (mean_acc, std_acc) = mean_std(&target_accs);
            rows.push(AblationRow {
                config_id: entry.config_id(),
                label: entry.label.clone(),
                target_domain: target,
                mean_acc,
                std_acc,
                n_seeds: seeds.len(),
                target_accs,
                source_accs,
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "config_id,target_domain,mean_acc,std_acc,n_seeds";

/// Comparison table as CSV with LF line endings.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.config_id, r.target_domain, r.mean_acc, r.std_acc, r.n_seeds
        ));
    }
    out
}
