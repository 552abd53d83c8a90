//! Pseudo-labeling with weak/strong augmentation and labeled/unlabeled
//! statistic mixing.
//!
//! A semi-supervised batch is laid out as `[labeled half | unlabeled half]`
//! with labeled instance `i` opposite unlabeled instance `i`, so the
//! half-swap reference permutation always pairs a labeled instance with an
//! unlabeled one.

use rand::Rng;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero padding (pixels) of the weak random crop: 4 at 32×32, scaled
/// with the shorter side so smaller images see the same relative shift.
pub fn crop_pad(h: usize, w: usize) -> i32 {
    (h.min(w) / 8).max(1) as i32
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample<S> {
    /// `(C, H, W)` with values in `[0, 1]`.
    pub image: Tensor<S>,
    pub label: usize,
    pub domain_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledExample<S> {
    pub image: Tensor<S>,
    pub domain_id: usize,
    /// `(class, confidence)` once assigned.
    pub pseudo_label: Option<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    pub tau: f64,
    pub unlabeled_weight: f64,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            unlabeled_weight: 1.0,
        }
    }
}

impl SemiSupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.unlabeled_weight >= 0.0 && self.unlabeled_weight.is_finite()) {
            return Err(Error::invalid("unlabeled_weight must be >= 0"));
        }
        Ok(())
    }
}

/// Random horizontal flip followed by a crop from the zero-padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    /// Crop offsets relative to the centered crop, in `[-pad, pad]`.
    pub dy: i32,
    pub dx: i32,
}

impl WeakParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        dy: 0,
        dx: 0,
    };

    pub fn sample<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Self {
        let pad = crop_pad(h, w);
        Self {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(-pad..=pad),
            dx: rng.random_range(-pad..=pad),
        }
    }

    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (c, h, w) = dims3(image)?;
        let src = image.data();
        let mut out = vec![S::zero(); src.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as i64 + self.dy as i64;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let cx = x as i64 + self.dx as i64;
                    if cx < 0 || cx >= w as i64 {
                        continue;
                    }
                    let sx = if self.flip { w as i64 - 1 - cx } else { cx };
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
        Tensor::from_vec(image.shape(), out)
    }
}

fn dims3<S: Scalar>(image: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!(
            "expected a (C, H, W) image, got {:?}",
            image.shape()
        ))),
    }
}

pub fn weak_augment<S: Scalar, R: Rng + ?Sized>(image: &Tensor<S>, rng: &mut R) -> Result<Tensor<S>> {
    let (_, h, w) = dims3(image)?;
    WeakParams::sample(h, w, rng).apply(image)
}

/// Strong-augmentation transforms. Every transform is the identity at
/// magnitude 0.
#[derive(Clone, Debug, PartialEq)]
pub enum StrongOp {
    /// Adds `m` to every pixel, `m` in `[-0.4, 0.4]`.
    Brightness(f64),
    /// Scales deviations from the image mean by `1 + m`, `m` in `[-0.6, 0.6]`.
    Contrast(f64),
    /// Quantizes to `2^(8 - round(6 m))` levels, `m` in `[0, 1]`.
    Posterize(f64),
    /// Inverts pixels above `1 - m`, `m` in `[0, 1]`.
    Solarize(f64),
    /// Blends with a channel permutation by weight `m` in `[0, 1]`.
    ChannelShuffle { magnitude: f64, perm: Vec<usize> },
    /// Fills a square of side `round(m * min(H, W))` with gray.
    Cutout { magnitude: f64, cy: usize, cx: usize },
}

impl StrongOp {
    pub const KINDS: usize = 6;

    fn sample<R: Rng + ?Sized>(kind: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        match kind {
            0 => StrongOp::Brightness(rng.random_range(-0.4..=0.4)),
            1 => StrongOp::Contrast(rng.random_range(-0.6..=0.6)),
            2 => StrongOp::Posterize(rng.random_range(0.0..=1.0)),
            3 => StrongOp::Solarize(rng.random_range(0.0..=1.0)),
            4 => {
                let mut perm: Vec<usize> = (0..c).collect();
                perm.shuffle(rng);
                StrongOp::ChannelShuffle {
                    magnitude: rng.random_range(0.0..=1.0),
                    perm,
                }
            }
            _ => StrongOp::Cutout {
                magnitude: rng.random_range(0.0..=0.5),
                cy: rng.random_range(0..h),
                cx: rng.random_range(0..w),
            },
        }
    }

    pub fn with_magnitude(&self, m: f64) -> Self {
        match self {
            StrongOp::Brightness(_) => StrongOp::Brightness(m),
            StrongOp::Contrast(_) => StrongOp::Contrast(m),
            StrongOp::Posterize(_) => StrongOp::Posterize(m),
            StrongOp::Solarize(_) => StrongOp::Solarize(m),
            StrongOp::ChannelShuffle { perm, .. } => StrongOp::ChannelShuffle {
                magnitude: m,
                perm: perm.clone(),
            },
            StrongOp::Cutout { cy, cx, .. } => StrongOp::Cutout {
                magnitude: m,
                cy: *cy,
                cx: *cx,
            },
        }
    }

    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (c, h, w) = dims3(image)?;
        let mut out = image.clone();
        match self {
            StrongOp::Brightness(m) => {
                let m = S::lit(*m);
                out.data_mut().iter_mut().for_each(|v| *v += m);
            }
            StrongOp::Contrast(m) => {
                let mean = image.sum() / S::lit(image.len() as f64);
                let f = S::one() + S::lit(*m);
                out.data_mut().iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
            }
            StrongOp::Posterize(m) => {
                let bits = 8 - (m.clamp(0.0, 1.0) * 6.0).round() as i32;
                if bits < 8 {
                    let levels = S::lit(((1 << bits) - 1) as f64);
                    out.data_mut()
                        .iter_mut()
                        .for_each(|v| *v = (*v * levels).round() / levels);
                }
            }
            StrongOp::Solarize(m) => {
                let threshold = S::lit(1.0 - m);
                out.data_mut().iter_mut().for_each(|v| {
                    if *v > threshold {
                        *v = S::one() - *v;
                    }
                });
            }
            StrongOp::ChannelShuffle { magnitude, perm } => {
                if perm.len() != c {
                    return Err(Error::invalid("channel permutation length"));
                }
                let mv = S::lit(*magnitude);
                let hw = h * w;
                let src = image.data();
                for (ch, &from) in perm.iter().enumerate() {
                    for i in 0..hw {
                        let a = src[ch * hw + i];
                        let b = src[from * hw + i];
                        out.data_mut()[ch * hw + i] = (S::one() - mv) * a + mv * b;
                    }
                }
            }
            StrongOp::Cutout { magnitude, cy, cx } => {
                let side = (magnitude.clamp(0.0, 1.0) * h.min(w) as f64).round() as usize;
                if side > 0 {
                    let y0 = cy.saturating_sub(side / 2).min(h - side.min(h));
                    let x0 = cx.saturating_sub(side / 2).min(w - side.min(w));
                    let fill = S::lit(0.5);
                    for ch in 0..c {
                        for y in y0..(y0 + side).min(h) {
                            for x in x0..(x0 + side).min(w) {
                                out.data_mut()[(ch * h + y) * w + x] = fill;
                            }
                        }
                    }
                }
            }
        }
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.max(S::zero()).min(S::one()));
        Ok(out)
    }
}

/// Weak augmentation followed by two strong transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct StrongParams {
    pub weak: WeakParams,
    pub ops: [StrongOp; 2],
}

impl StrongParams {
    pub fn sample<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let weak = WeakParams::sample(h, w, rng);
        let kinds = rand::seq::index::sample(rng, StrongOp::KINDS, 2);
        let a = StrongOp::sample(kinds.index(0), c, h, w, rng);
        let b = StrongOp::sample(kinds.index(1), c, h, w, rng);
        Self { weak, ops: [a, b] }
    }

    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let mut out = self.weak.apply(image)?;
        for op in &self.ops {
            out = op.apply(&out)?;
        }
        Ok(out)
    }
}

pub fn strong_augment<S: Scalar, R: Rng + ?Sized>(image: &Tensor<S>, rng: &mut R) -> Result<Tensor<S>> {
    let (c, h, w) = dims3(image)?;
    StrongParams::sample(c, h, w, rng).apply(image)
}

/// Most confident class if its probability reaches `tau`; ties go to the
/// lowest index.
pub fn pseudo_label<S: Scalar>(probabilities: &[S], tau: f64) -> Result<Option<(usize, f64)>> {
    if probabilities.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    let total: f64 = probabilities.iter().map(|p| p.as_f64()).sum();
    if probabilities.iter().any(|p| !(p.as_f64() >= 0.0)) || (total - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!(
            "not a probability distribution (sum {total})"
        )));
    }
    let (mut best, mut best_p) = (0, probabilities[0].as_f64());
    for (i, p) in probabilities.iter().enumerate().skip(1) {
        if p.as_f64() > best_p {
            best = i;
            best_p = p.as_f64();
        }
    }
    Ok((best_p >= tau).then_some((best, best_p)))
}

/// Softmax of each row of `(B, K)` logits.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(k) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: S = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::from_vec(logits.shape(), out)
}

/// A network that maps a `(B, C, H, W)` input node to `(B, K)` logits.
///
/// `train = false` must bypass every stochastic layer.
pub trait Classifier<S: Scalar> {
    fn logits(&mut self, g: &mut Graph<S>, input: Var, train: bool) -> Result<Var>;
}

fn stack_images<S: Scalar>(images: &[Tensor<S>]) -> Result<Tensor<S>> {
    let refs: Vec<&Tensor<S>> = images.iter().collect();
    Tensor::stack(&refs)
}

/// Mean cross-entropy over weakly augmented labeled images.
pub fn supervised_loss<S: Scalar, M: Classifier<S>, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    model: &mut M,
    batch: &[LabeledExample<S>],
    rng: &mut R,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("supervised loss of an empty half-batch"));
    }
    let views = batch
        .iter()
        .map(|e| weak_augment(&e.image, rng))
        .collect::<Result<Vec<_>>>()?;
    let x = g.constant(stack_images(&views)?);
    let logits = model.logits(g, x, true)?;
    let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
    g.softmax_cross_entropy(logits, &targets)
}

/// Pseudo-labels `batch` from blocked weak-view predictions (stochastic
/// layers off) and writes them into the examples.
pub fn assign_pseudo_labels<S: Scalar, M: Classifier<S>, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    model: &mut M,
    batch: &mut [UnlabeledExample<S>],
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    let views = batch
        .iter()
        .map(|e| weak_augment(&e.image, rng))
        .collect::<Result<Vec<_>>>()?;
    let x = g.constant(stack_images(&views)?);
    let weak_logits = model.logits(g, x, false)?;
    let blocked = g.stop_gradient(weak_logits);
    let probs = softmax_rows(g.value(blocked))?;
    let k = probs.dims2()?.1;
    for (e, row) in batch.iter_mut().zip(probs.data().chunks(k)) {
        e.pseudo_label = pseudo_label(row, tau)?;
    }
    Ok(weak_logits)
}

/// Cross-entropy of strong-view logits against assigned pseudo-labels,
/// summed over confident examples and divided by the half-batch size.
pub fn masked_pseudo_label_loss<S: Scalar>(
    g: &mut Graph<S>,
    strong_logits: Var,
    batch: &[UnlabeledExample<S>],
) -> Result<Var> {
    let targets: Vec<usize> = batch.iter().map(|e| e.pseudo_label.map_or(0, |p| p.0)).collect();
    let weights: Vec<S> = batch
        .iter()
        .map(|e| if e.pseudo_label.is_some() { S::one() } else { S::zero() })
        .collect();
    g.weighted_cross_entropy(strong_logits, &targets, &weights, S::lit(batch.len() as f64))
}

/// Unlabeled loss on its own: pseudo-labels from weak views, loss on
/// strong views.
pub fn unlabeled_loss<S: Scalar, M: Classifier<S>, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    model: &mut M,
    batch: &mut [UnlabeledExample<S>],
    tau: f64,
    rng: &mut R,
) -> Result<Var> {
    if batch.is_empty() {
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    assign_pseudo_labels(g, model, batch, tau, rng)?;
    let views = batch
        .iter()
        .map(|e| strong_augment(&e.image, rng))
        .collect::<Result<Vec<_>>>()?;
    let x = g.constant(stack_images(&views)?);
    let strong_logits = model.logits(g, x, true)?;
    masked_pseudo_label_loss(g, strong_logits, batch)
}

/// Loss terms of one semi-supervised step.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub supervised: Var,
    pub unlabeled: Option<Var>,
    pub weak_logits: Option<Var>,
    /// Unlabeled examples that passed the confidence threshold.
    pub confident: usize,
}

/// Supervised plus weighted unlabeled loss with a single training forward
/// over `[weak(labeled) | strong(unlabeled)]`, so that stochastic layers
/// see both halves together. With no unlabeled data this is exactly the
/// supervised loss.
pub fn joint_loss<S: Scalar, M: Classifier<S>, R: Rng + ?Sized>(
    g: &mut Graph<S>,
    model: &mut M,
    labeled: &[LabeledExample<S>],
    unlabeled: &mut [UnlabeledExample<S>],
    config: &SemiSupConfig,
    rng: &mut R,
) -> Result<JointLoss> {
    if unlabeled.is_empty() {
        let supervised = supervised_loss(g, model, labeled, rng)?;
        return Ok(JointLoss {
            total: supervised,
            supervised,
            unlabeled: None,
            weak_logits: None,
            confident: 0,
        });
    }
    if labeled.is_empty() {
        return Err(Error::invalid("semi-supervised step without labeled data"));
    }
    let weak_logits = assign_pseudo_labels(g, model, unlabeled, config.tau, rng)?;
    let confident = unlabeled.iter().filter(|e| e.pseudo_label.is_some()).count();

    let mut views = labeled
        .iter()
        .map(|e| weak_augment(&e.image, rng))
        .collect::<Result<Vec<_>>>()?;
    for e in unlabeled.iter() {
        views.push(strong_augment(&e.image, rng)?);
    }
    let x = g.constant(stack_images(&views)?);
    let logits = model.logits(g, x, true)?;
    let nl = labeled.len();
    let labeled_logits = g.slice_rows(logits, 0, nl)?;
    let strong_logits = g.slice_rows(logits, nl, nl + unlabeled.len())?;
    let targets: Vec<usize> = labeled.iter().map(|e| e.label).collect();
    let supervised = g.softmax_cross_entropy(labeled_logits, &targets)?;
    let unl = masked_pseudo_label_loss(g, strong_logits, unlabeled)?;
    let weighted = g.scale(unl, S::lit(config.unlabeled_weight));
    let total = g.add(supervised, weighted)?;
    Ok(JointLoss {
        total,
        supervised,
        unlabeled: Some(unl),
        weak_logits: Some(weak_logits),
        confident,
    })
}

/// Which pool the unlabeled half is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemiSupTask {
    /// Partially labeled source domains.
    Ssdg,
    /// Labeled source domains, unlabeled target domain.
    Uda,
}

/// Indices chosen for one semi-supervised batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemiSupBatch {
    /// Indices into the labeled pool; position `i` of the batch.
    pub labeled: Vec<usize>,
    /// Indices into the unlabeled pool; position `B/2 + i` of the batch.
    pub unlabeled: Vec<usize>,
}

impl SemiSupBatch {
    /// Group ids of the batch layout: 0 for labeled, 1 for unlabeled.
    pub fn groups(&self) -> Vec<usize> {
        let mut g = vec![0; self.labeled.len()];
        g.extend(std::iter::repeat_n(1, self.unlabeled.len()));
        g
    }
}

fn take_stratified<R: Rng + ?Sized>(
    pool_domains: &[usize],
    domains: &[usize],
    count: usize,
    pool_name: &str,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut picked = Vec::with_capacity(count);
    for (slot, &d) in domains.iter().enumerate() {
        let n = count / domains.len() + usize::from(slot < count % domains.len());
        let candidates: Vec<usize> = (0..pool_domains.len()).filter(|&i| pool_domains[i] == d).collect();
        if candidates.len() < n {
            return Err(Error::InsufficientData(format!(
                "{pool_name}/domain {d}: need {n}, have {}",
                candidates.len()
            )));
        }
        picked.extend(candidates.choose_multiple(rng, n).copied());
    }
    Ok(picked)
}

/// Chooses `B/2` labeled and `B/2` unlabeled instances.
///
/// `labeled_domains[i]` / `unlabeled_domains[i]` give the domain of each
/// pool entry. For SSDG both halves are stratified over `source_domains`;
/// for UDA the labeled half is stratified over `source_domains` and the
/// unlabeled half comes from `target_domain`.
pub fn build_semisup_batch<R: Rng + ?Sized>(
    labeled_domains: &[usize],
    unlabeled_domains: &[usize],
    source_domains: &[usize],
    target_domain: Option<usize>,
    batch: usize,
    task: SemiSupTask,
    rng: &mut R,
) -> Result<SemiSupBatch> {
    if batch == 0 || batch % 2 != 0 {
        return Err(Error::invalid(format!("semi-supervised batch must be even, got {batch}")));
    }
    if source_domains.is_empty() {
        return Err(Error::invalid("no source domains"));
    }
    let half = batch / 2;
    let labeled = take_stratified(labeled_domains, source_domains, half, "labeled", rng)?;
    let unlabeled = match task {
        SemiSupTask::Ssdg => take_stratified(unlabeled_domains, source_domains, half, "unlabeled", rng)?,
        SemiSupTask::Uda => {
            let t = target_domain.ok_or_else(|| Error::invalid("UDA needs a target domain"))?;
            take_stratified(unlabeled_domains, &[t], half, "unlabeled-target", rng)?
        }
    };
    Ok(SemiSupBatch { labeled, unlabeled })
}
