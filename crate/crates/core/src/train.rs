//! Adam training on the soft-Dice objective with plateau-halved learning
//! rate, k-fold cross-validation and difficulty weighting.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::app::dice_hard;
use crate::augment::{augment_sample, AugmentConfig};
use crate::autodiff::{affine, soft_dice, Tensor};
use crate::error::{Error, Result};
use crate::locate::{resample_local, LocalGeometry};
use crate::network::{Network, NetworkSpec};
use crate::shapemodel::ShapeModel;
use crate::volume::{resample_to_grid, threshold, tight_box, Aabb, Mask, ProbMap, Volume};

/// Per-face uniform jitter applied to ground-truth boxes for local training pairs (mm).
pub const LOCAL_BOX_JITTER_MM: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter array.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter array.
pub fn adam_step(
    params: &mut [&mut Vec<f64>],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!("{} parameter arrays but {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!("array {i}: {} parameters but {} gradients", p.len(), g.len())));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::invalid("optimizer state does not match parameter shapes"));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (a, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[a], &mut state.v[a]);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub plateau_window: usize,
    pub plateau_threshold: f64,
    pub lr_floor: f64,
    pub adam: AdamConfig,
    pub batch: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-5,
            lr_factor: 0.5,
            plateau_window: 50,
            plateau_threshold: 1e-4,
            lr_floor: 1e-7,
            adam: AdamConfig::default(),
            batch: 1,
            augment: AugmentConfig::default(),
            seed: 0,
            checkpoint_every: 100,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::invalid(format!("lr factor must be in (0, 1), got {}", self.lr_factor)));
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0) {
            return Err(Error::invalid("learning rate must be > 0 and its floor >= 0"));
        }
        if self.batch != 1 {
            return Err(Error::invalid(format!("only batch size 1 is supported, got {}", self.batch)));
        }
        if self.plateau_window == 0 {
            return Err(Error::invalid("plateau window must be >= 1"));
        }
        self.augment.validate()
    }
}

/// One network input with its ground truth on the same grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
    /// `(epoch, lr)` with the starting rate at epoch 0.
    pub lr_log: Vec<(usize, f64)>,
    /// Soft Dice per training image at the end, inference mode, no augmentation.
    pub final_soft_dice: Vec<f64>,
    pub final_hard_dice: Vec<f64>,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.loss_history.len()
    }

    /// Plain `key = value` summary.
    pub fn to_text(&self) -> String {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let mut s = String::new();
        writeln!(s, "epochs = {}", self.epochs()).unwrap();
        writeln!(s, "final_loss = {:.6}", self.loss_history.last().copied().unwrap_or(f64::NAN)).unwrap();
        writeln!(s, "final_lr = {:e}", self.lr_log.last().map(|x| x.1).unwrap_or(f64::NAN)).unwrap();
        writeln!(s, "lr_changes = {}", self.lr_log.len().saturating_sub(1)).unwrap();
        writeln!(s, "mean_soft_dice = {:.6}", mean(&self.final_soft_dice)).unwrap();
        writeln!(s, "mean_hard_dice = {:.6}", mean(&self.final_hard_dice)).unwrap();
        writeln!(s, "wall_clock_s = {:.1}", self.wall_clock.as_secs_f64()).unwrap();
        s
    }

    /// CSV with one row per epoch.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,loss,lr\n");
        let mut lr = self.lr_log.first().map(|x| x.1).unwrap_or(0.0);
        let mut next = 1;
        for (e, loss) in self.loss_history.iter().enumerate() {
            while next < self.lr_log.len() && self.lr_log[next].0 <= e {
                lr = self.lr_log[next].1;
                next += 1;
            }
            writeln!(s, "{},{:.8},{:e}", e + 1, loss, lr).unwrap();
        }
        s
    }
}

fn uniform(weights: &[f64]) -> bool {
    weights.windows(2).all(|w| w[0] == w[1])
}

/// `1 - softDice` of the network output on one sample, with gradients.
fn loss_and_grads<R: Rng + ?Sized>(net: &Network, s: &Sample, rng: &mut R) -> Result<(f64, Vec<Vec<f64>>)> {
    let pass = net.forward_tensor(&Tensor::from_volume(&s.image), true, true, false, rng)?;
    let target = Tensor::from_volume(s.mask.as_volume());
    let loss = affine(&soft_dice(&pass.prob, &target)?, -1.0, 1.0);
    loss.backward()?;
    let grads = pass.params.iter().map(|p| p.grad_or_zeros()).collect();
    Ok((loss.item(), grads))
}

/// Train `net` in place; the per-epoch callback receives `(epoch, mean loss, net)`.
pub fn train(
    net: &mut Network,
    data: &[Sample],
    weights: &[f64],
    cfg: &TrainConfig,
    model: Option<&ShapeModel>,
) -> Result<TrainReport> {
    train_with(net, data, weights, cfg, model, |_, _, _| {})
}

pub fn train_with(
    net: &mut Network,
    data: &[Sample],
    weights: &[f64],
    cfg: &TrainConfig,
    model: Option<&ShapeModel>,
    mut on_epoch: impl FnMut(usize, f64, &Network),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if weights.len() != data.len() {
        return Err(Error::invalid(format!("{} weights for {} samples", weights.len(), data.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid("sampling weights must be non-negative and not all zero"));
    }
    for (i, s) in data.iter().enumerate() {
        if s.image.grid() != s.mask.grid() {
            return Err(Error::invalid(format!("sample {i}: image and mask grids differ")));
        }
        if s.image.dims() != net.spec().in_dims {
            return Err(Error::invalid(format!(
                "sample {i}: dims {:?} do not match network input {:?}",
                s.image.dims(),
                net.spec().in_dims
            )));
        }
    }
    if cfg.augment.deform_probability > 0.0 && model.is_none() {
        return Err(Error::invalid("shape-model augmentation requires a shape model"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sampler = if uniform(weights) { None } else { Some(WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?) };
    let mut state = AdamState::default();
    let mut lr = cfg.lr;
    let mut lr_log = vec![(0, lr)];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut last_change = 0;
    let w = cfg.plateau_window;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=cfg.epochs {
        match &sampler {
            None => order.shuffle(&mut rng),
            Some(dist) => order.iter_mut().for_each(|o| *o = dist.sample(&mut rng)),
        }
        let mut total = 0.0;
        for &i in &order {
            let (image, mask, _) = augment_sample(&data[i].image, &data[i].mask, model, &cfg.augment, &mut rng)?;
            let (loss, grads) = loss_and_grads(net, &Sample { image, mask }, &mut rng)?;
            adam_step(&mut net.params_mut(), &grads, &mut state, lr, &cfg.adam)?;
            total += loss;
        }
        let mean = total / order.len() as f64;
        history.push(mean);

        if epoch >= last_change + 2 * w {
            let prev = history[epoch - 2 * w..epoch - w].iter().sum::<f64>() / w as f64;
            let cur = history[epoch - w..epoch].iter().sum::<f64>() / w as f64;
            let improvement = if prev > 0.0 { (prev - cur) / prev } else { 0.0 };
            if improvement < cfg.plateau_threshold && lr * cfg.lr_factor >= cfg.lr_floor {
                lr *= cfg.lr_factor;
                lr_log.push((epoch, lr));
                last_change = epoch;
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                net.save(&dir.join(format!("epoch_{epoch:05}.ckpt")))?;
            }
        }
        on_epoch(epoch, mean, net);
    }

    let mut soft = Vec::with_capacity(data.len());
    let mut hard = Vec::with_capacity(data.len());
    for s in data {
        let (sd, hd) = evaluate(net, s)?;
        soft.push(sd);
        hard.push(hd);
    }
    Ok(TrainReport {
        loss_history: history,
        lr_log,
        final_soft_dice: soft,
        final_hard_dice: hard,
        wall_clock: start.elapsed(),
    })
}

/// Inference-mode `(soft Dice, hard Dice at 0.5)` of `net` on one sample.
pub fn evaluate(net: &Network, s: &Sample) -> Result<(f64, f64)> {
    let p = net.predict(&s.image)?;
    Ok((soft_dice_value(&p, &s.mask), dice_hard(&threshold(&p, 0.5), &s.mask)?))
}

pub fn soft_dice_value(p: &ProbMap, m: &Mask) -> f64 {
    let sp: f64 = p.data().iter().sum();
    let sg: f64 = m.as_volume().data().iter().sum();
    let spg: f64 = p.data().iter().zip(m.as_volume().data()).map(|(a, b)| a * b).sum();
    (2.0 * spg + crate::autodiff::DICE_EPS) / (sp + sg + crate::autodiff::DICE_EPS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    /// Held-out hard Dice per image, in dataset order.
    pub dice: Vec<f64>,
    /// Fold index per image.
    pub fold: Vec<usize>,
}

/// Deterministic k-fold split: seeded shuffle, then contiguous folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid(format!("cross-validation needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InsufficientData(format!("{n} images cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for f in 0..k {
        for &i in &idx[f * n / k..(f + 1) * n / k] {
            fold[i] = f;
        }
    }
    Ok(fold)
}

/// Train a fresh network per fold on the other folds and score the held-out images.
pub fn cross_validate(
    data: &[Sample],
    k: usize,
    spec: NetworkSpec,
    cfg: &TrainConfig,
    model: Option<&ShapeModel>,
) -> Result<CrossValidation> {
    let fold = fold_assignment(data.len(), k, cfg.seed)?;
    let mut dice = vec![f64::NAN; data.len()];
    for f in 0..k {
        let train_set: Vec<Sample> = data.iter().zip(&fold).filter(|(_, &g)| g != f).map(|(s, _)| s.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1 + f as u64));
        let mut net = Network::build(spec, &mut rng)?;
        let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(1000 + f as u64), ..cfg.clone() };
        train(&mut net, &train_set, &vec![1.0; train_set.len()], &fold_cfg, model)?;
        for (i, s) in data.iter().enumerate() {
            if fold[i] == f {
                dice[i] = evaluate(&net, s)?.1;
            }
        }
    }
    Ok(CrossValidation { dice, fold })
}

/// `w_i = 1 - D_i + 0.05`, normalized to mean 1.
pub fn difficulty_weights(val_dice: &[f64]) -> Result<Vec<f64>> {
    if val_dice.is_empty() {
        return Err(Error::InsufficientData("no validation scores".into()));
    }
    if let Some(d) = val_dice.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::invalid(format!("Dice score {d} outside [0, 1]")));
    }
    let raw: Vec<f64> = val_dice.iter().map(|d| 1.0 - d + 0.05).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Ground-truth box with each face moved independently by up to `jitter_mm`.
pub fn jittered_box<R: Rng + ?Sized>(mask: &Mask, jitter_mm: f64, rng: &mut R) -> Result<Aabb> {
    let b = tight_box(mask)?;
    let mut out = b;
    for a in 0..3 {
        let js: f64 = if jitter_mm > 0.0 { rng.random_range(-jitter_mm..=jitter_mm) } else { 0.0 };
        let je: f64 = if jitter_mm > 0.0 { rng.random_range(-jitter_mm..=jitter_mm) } else { 0.0 };
        out.start[a] = b.start[a] + js;
        out.end[a] = b.end[a] + je;
        if out.end[a] - out.start[a] < mask.grid().spacing[a] {
            let c = 0.5 * (out.start[a] + out.end[a]);
            out.start[a] = c - 0.5 * mask.grid().spacing[a];
            out.end[a] = c + 0.5 * mask.grid().spacing[a];
        }
    }
    Ok(out)
}

/// Local-network training pair: image and mask resampled to the local grid of
/// a jittered ground-truth box.
pub fn local_pair<R: Rng + ?Sized>(
    image: &Volume,
    mask: &Mask,
    geom: &LocalGeometry,
    jitter_mm: f64,
    rng: &mut R,
) -> Result<Sample> {
    let b = jittered_box(mask, jitter_mm, rng)?;
    let (local, t) = resample_local(image, &b, geom)?;
    let m = Mask::from_predicate(&resample_to_grid(mask.as_volume(), &t.grid()), |v| v >= 0.5);
    Ok(Sample { image: local, mask: m })
}
