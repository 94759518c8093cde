//! Training objectives, the diagonal natural-gradient optimizer and the training loop.
//!
//! Per-event losses are built on a fresh tape. A batch fans out over fixed chunks of
//! events; chunk gradients are summed in chunk order, so results do not depend on the
//! number of worker threads. Every sampled quantity draws from a random stream keyed by
//! `(seed, epoch, event index)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condmodel::{Model, ModelError};
use crate::flows::ChainKind;
use crate::gradcore::{GradError, ParamVector, Tape, Var};
use crate::toymc::Event;

const CHUNK: usize = 8;
const FISHER_EPS: f64 = 1e-8;
const LR_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("event {0} has no label")]
    MissingLabel(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `-ln q(z | x)` on labeled events.
    Supervised,
    /// Sample-based ELBO with the label treated as latent.
    Elbo,
    /// Supervised term plus the generative term at stop-gradient posterior samples.
    Extended,
    /// Extended term on labeled events, ELBO term on unlabeled ones.
    Semi,
}

impl LossKind {
    pub fn needs_generative(self) -> bool {
        !matches!(self, LossKind::Supervised)
    }
}

/// Random stream for the samples of one event in one epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f10b_a5e5_0000);
    rng.set_stream((epoch << 40) ^ index);
    rng
}

fn base_draw<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generative term `-ln p(x | z) - ln p(z)` at a constant position `z`.
fn generative_term(model: &Model, t: &mut Tape, ev: &Event, z: &[f64]) -> Result<Var, LossError> {
    let zc = t.vector(z);
    let dec = model.decoder_log_likelihood_tape(t, ev, zc)?;
    let pri = model.prior_log_prob_tape(t, zc)?;
    let s = t.add(dec, pri);
    Ok(t.neg(s))
}

/// `-ln q(z | x)` at the true label.
pub fn supervised_term(model: &Model, t: &mut Tape, h: Var, ev: &Event, index: usize) -> Result<Var, LossError> {
    let label = ev.label.ok_or(LossError::MissingLabel(index))?;
    let lp = model.posterior_log_prob_tape(t, h, &label)?;
    Ok(t.neg(lp))
}

/// Generative term at a posterior sample that carries no gradient.
pub fn stop_gradient_term<R: Rng + ?Sized>(
    model: &Model,
    t: &mut Tape,
    h: Var,
    ev: &Event,
    rng: &mut R,
) -> Result<Var, LossError> {
    let p1 = model.position_params_tape(t, h);
    let chain = model.config.position_chain().build(t.value(p1)).map_err(ModelError::from)?;
    let z = chain.forward(&base_draw(rng, 2)).map_err(ModelError::from)?;
    generative_term(model, t, ev, &z)
}

/// Single-sample ELBO term `-ln p(x | z) - ln p(z) + ln q(z | x)` at a reparameterized
/// posterior sample. With `reparameterize = false` the sample enters as a constant.
pub fn elbo_term<R: Rng + ?Sized>(
    model: &Model,
    t: &mut Tape,
    h: Var,
    ev: &Event,
    rng: &mut R,
    reparameterize: bool,
) -> Result<Var, LossError> {
    if model.config.direction.is_some() {
        return Err(ModelError::Unsupported("latent directions".into()).into());
    }
    let chain = model.config.position_chain();
    let p1 = model.position_params_tape(t, h);
    let zhat = base_draw(rng, 2);
    let mut z = chain.sample_tape(t, p1, &zhat).map_err(ModelError::from)?;
    if !reparameterize {
        z = t.stop_gradient(z);
    }
    let lq = chain.log_prob_tape(t, p1, z);
    let dec = model.decoder_log_likelihood_tape(t, ev, z)?;
    let pri = model.prior_log_prob_tape(t, z)?;
    let s = t.add(dec, pri);
    Ok(t.sub(lq, s))
}

/// Which parts of a per-event loss were evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Labeled,
    Unlabeled,
}

/// Builds the loss of one event. `index` only labels errors.
pub fn event_loss_tape<R: Rng + ?Sized>(
    model: &Model,
    t: &mut Tape,
    ev: &Event,
    index: usize,
    kind: LossKind,
    labeled: bool,
    rng: &mut R,
) -> Result<(Var, Branch), LossError> {
    if kind.needs_generative() && !model.has_generative() {
        return Err(ModelError::NoGenerative.into());
    }
    let h = model.encode_tape(t, ev)?;
    match (kind, labeled) {
        (LossKind::Supervised, _) => Ok((supervised_term(model, t, h, ev, index)?, Branch::Labeled)),
        (LossKind::Extended, _) | (LossKind::Semi, true) => {
            let a = supervised_term(model, t, h, ev, index)?;
            let b = stop_gradient_term(model, t, h, ev, rng)?;
            Ok((t.add(a, b), Branch::Labeled))
        }
        (LossKind::Elbo, _) | (LossKind::Semi, false) => Ok((elbo_term(model, t, h, ev, rng, true)?, Branch::Unlabeled)),
    }
}

/// Mean loss over a batch, split by branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub labeled: f64,
    pub unlabeled: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// Events whose loss could not be evaluated (flow inversion failures, non-finite values).
    pub skipped: usize,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.labeled += o.labeled;
        self.unlabeled += o.unlabeled;
        self.n_labeled += o.n_labeled;
        self.n_unlabeled += o.n_unlabeled;
        self.skipped += o.skipped;
    }

    fn finish(mut self) -> Self {
        let n = self.n_labeled + self.n_unlabeled;
        self.total = if n > 0 { (self.labeled + self.unlabeled) / n as f64 } else { f64::NAN };
        if self.n_labeled > 0 {
            self.labeled /= self.n_labeled as f64;
        }
        if self.n_unlabeled > 0 {
            self.unlabeled /= self.n_unlabeled as f64;
        }
        self
    }
}

/// Batch description: events with their labeled flags and stream coordinates.
pub struct Batch<'a> {
    pub events: &'a [Event],
    pub labeled: &'a [bool],
    pub indices: &'a [usize],
    pub seed: u64,
    pub epoch: u64,
}

fn chunk_eval(model: &Model, kind: LossKind, b: &Batch<'_>, idx: &[usize], want_grad: bool) -> (LossParts, Option<Vec<f64>>) {
    let mut parts = LossParts::default();
    let mut grad = want_grad.then(|| vec![0.0; model.params.len()]);
    let mut t = Tape::new();
    let mut g_ev = if want_grad { vec![0.0; model.params.len()] } else { Vec::new() };
    for &i in idx {
        t.clear();
        let mut rng = sample_rng(b.seed, b.epoch, i as u64);
        let r = event_loss_tape(model, &mut t, &b.events[i], i, kind, b.labeled[i], &mut rng);
        let Ok((loss, branch)) = r else {
            parts.skipped += 1;
            continue;
        };
        let v = t.scalar(loss);
        if !v.is_finite() {
            parts.skipped += 1;
            continue;
        }
        if let Some(g) = grad.as_mut() {
            g_ev.iter_mut().for_each(|x| *x = 0.0);
            if t.backward_into(loss, &mut g_ev, 1.0).is_err() || g_ev.iter().any(|x| !x.is_finite()) {
                parts.skipped += 1;
                continue;
            }
            for (a, b) in g.iter_mut().zip(&g_ev) {
                *a += b;
            }
        }
        match branch {
            Branch::Labeled => {
                parts.labeled += v;
                parts.n_labeled += 1;
            }
            Branch::Unlabeled => {
                parts.unlabeled += v;
                parts.n_unlabeled += 1;
            }
        }
    }
    (parts, grad)
}

/// Mean loss of a batch and, when `grad` is given, its gradient (overwritten).
pub fn batch_loss(
    model: &Model,
    kind: LossKind,
    batch: &Batch<'_>,
    grad: Option<&mut [f64]>,
) -> Result<LossParts, LossError> {
    if batch.indices.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let want = grad.is_some();
    let results: Vec<(LossParts, Option<Vec<f64>>)> =
        batch.indices.par_chunks(CHUNK).map(|c| chunk_eval(model, kind, batch, c, want)).collect();
    let mut parts = LossParts::default();
    for (p, _) in &results {
        parts.add(p);
    }
    let n = parts.n_labeled + parts.n_unlabeled;
    if let Some(g) = grad {
        g.iter_mut().for_each(|x| *x = 0.0);
        if n > 0 {
            let inv = 1.0 / n as f64;
            for (_, cg) in &results {
                for (a, b) in g.iter_mut().zip(cg.as_ref().expect("gradient requested")) {
                    *a += b * inv;
                }
            }
        }
    }
    Ok(parts.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrAdapt {
    pub window: usize,
    pub loss_std_threshold: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaConfig {
    pub start_fraction: f64,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub fisher_decay: f64,
    pub mean_decay: f64,
    pub lr_adapt: LrAdapt,
    pub swa: SwaConfig,
    pub max_epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Forces a constant learning rate; affine and MSE posteriors always use one.
    pub fixed_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-2,
            fisher_decay: 0.999,
            mean_decay: 0.9,
            lr_adapt: LrAdapt { window: 20, loss_std_threshold: 0.02, factor: 0.5 },
            swa: SwaConfig { start_fraction: 0.8, stride: 1 },
            max_epochs: 50,
            seed: 1,
            validation_fraction: 0.2,
            fixed_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let ok = self.batch_size > 0
            && self.lr > 0.0
            && self.fisher_decay > 0.0
            && self.fisher_decay < 1.0
            && self.mean_decay >= 0.0
            && self.mean_decay < 1.0
            && self.swa.start_fraction > 0.0
            && self.swa.start_fraction < 1.0
            && self.swa.stride > 0
            && self.lr_adapt.window >= 2
            && self.lr_adapt.factor > 0.0
            && self.lr_adapt.factor < 1.0
            && self.max_epochs > 0
            && (0.0..1.0).contains(&self.validation_fraction);
        if ok {
            Ok(())
        } else {
            Err(LossError::Config(format!("{self:?}")))
        }
    }
}

/// Running moments of the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub mean_grad: Vec<f64>,
    pub fisher_diag: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState { mean_grad: vec![0.0; n], fisher_diag: vec![0.0; n], step: 0 }
    }
}

/// One diagonal natural-gradient step with bias-corrected running averages of the
/// gradient and of its square. Entries with `trainable[i] == false` are left untouched.
pub fn ngd_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &TrainConfig,
    lr: f64,
    trainable: Option<&[bool]>,
) -> Result<(), LossError> {
    let n = params.len();
    if grads.len() != n || state.mean_grad.len() != n || trainable.is_some_and(|m| m.len() != n) {
        return Err(LossError::Shape(format!("{} parameters, {} gradients", n, grads.len())));
    }
    state.step += 1;
    let (b1, b2) = (cfg.mean_decay, cfg.fisher_decay);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    for i in 0..n {
        if trainable.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        state.mean_grad[i] = b1 * state.mean_grad[i] + (1.0 - b1) * g;
        state.fisher_diag[i] = b2 * state.fisher_diag[i] + (1.0 - b2) * g * g;
        let m = state.mean_grad[i] / c1;
        let f = state.fisher_diag[i] / c2;
        params[i] -= lr * m / (f.sqrt() + FISHER_EPS);
    }
    Ok(())
}

/// Learning-rate control from the most recent validation losses. The fluctuation measure
/// is the residual standard deviation about a least-squares line over the window,
/// relative to the window mean, so a steady downward trend alone does not trigger it.
pub fn lr_adapt(history: &[f64], lr: f64, cfg: &TrainConfig, fixed: bool) -> f64 {
    let w = cfg.lr_adapt.window;
    if fixed || cfg.fixed_lr || history.len() < w {
        return lr;
    }
    let win = &history[history.len() - w..];
    let n = w as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = win.iter().sum::<f64>() / n;
    let sxx: f64 = (0..w).map(|i| (i as f64 - xm).powi(2)).sum();
    let sxy: f64 = win.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let ss: f64 = win.iter().enumerate().map(|(i, y)| (y - ym - slope * (i as f64 - xm)).powi(2)).sum();
    let sd = (ss / (n - 2.0).max(1.0)).sqrt();
    if sd / ym.abs().max(1e-12) > cfg.lr_adapt.loss_std_threshold {
        (lr * cfg.lr_adapt.factor).max(LR_FLOOR)
    } else {
        lr
    }
}

/// Elementwise mean of parameter snapshots with identical layouts. Entries that agree in
/// every snapshot are copied bit for bit.
pub fn swa_average(snapshots: &[ParamVector]) -> Result<ParamVector, LossError> {
    let first = snapshots.first().ok_or(LossError::EmptyBatch)?;
    for s in &snapshots[1..] {
        let same = s.len() == first.len() && s.layout().zip(first.layout()).all(|(a, b)| a == b);
        if !same {
            return Err(LossError::Shape("snapshot layouts differ".into()));
        }
    }
    let mut out = first.clone();
    let n = snapshots.len() as f64;
    for (i, v) in out.values.iter_mut().enumerate() {
        if snapshots.iter().all(|s| s.values[i] == first.values[i]) {
            continue;
        }
        *v = snapshots.iter().map(|s| s.values[i]).sum::<f64>() / n;
    }
    Ok(out)
}

/// Seeded split into training and validation indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5a1d));
    let nv = ((n as f64) * fraction).round() as usize;
    let val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub swa_active: bool,
    pub train_labeled: f64,
    pub train_unlabeled: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Validation loss of the final (averaged) parameters.
    pub final_val_loss: f64,
    pub n_snapshots: usize,
}

/// Options beyond the configuration.
pub struct TrainSetup<'a> {
    pub kind: LossKind,
    pub labeled: &'a [bool],
    /// Parameters that may change; `None` trains everything.
    pub trainable: Option<Vec<bool>>,
}

/// Trains `model` in place and replaces its parameters with the stochastic weight average.
pub fn train(model: &mut Model, events: &[Event], setup: &TrainSetup<'_>, cfg: &TrainConfig) -> Result<TrainReport, LossError> {
    cfg.validate()?;
    if events.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if setup.labeled.len() != events.len() {
        return Err(LossError::Shape("labeled flags do not match events".into()));
    }
    let fixed = matches!(model.config.posterior, ChainKind::Affine | ChainKind::Mse);
    let (train_idx, val_idx) = split_validation(events.len(), cfg.validation_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let n = model.params.len();
    let mut state = OptimizerState::new(n);
    let mut grad = vec![0.0; n];
    let mut lr = cfg.lr;
    let mut history: Vec<f64> = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_epochs);
    let swa_start = ((cfg.max_epochs as f64) * cfg.swa.start_fraction).floor() as usize;
    let mut snapshots: Vec<ParamVector> = Vec::new();
    let val_seed = cfg.seed ^ 0xa11d;
    let trainable = setup.trainable.as_deref();
    for epoch in 0..cfg.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut sample_rng(cfg.seed, epoch as u64, u64::MAX >> 1));
        let mut acc = LossParts::default();
        let mut sums = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let b = Batch { events, labeled: setup.labeled, indices: chunk, seed: cfg.seed, epoch: epoch as u64 };
            let parts = batch_loss(model, setup.kind, &b, Some(&mut grad))?;
            acc.skipped += parts.skipped;
            if parts.n_labeled + parts.n_unlabeled == 0 || grad.iter().any(|g| !g.is_finite()) {
                continue;
            }
            ngd_step(&mut state, &mut model.params.values, &grad, cfg, lr, trainable)?;
            sums.0 += parts.labeled * parts.n_labeled as f64;
            sums.1 += parts.unlabeled * parts.n_unlabeled as f64;
            sums.2 += parts.n_labeled + parts.n_unlabeled;
            acc.n_labeled += parts.n_labeled;
            acc.n_unlabeled += parts.n_unlabeled;
        }
        let train_loss = (sums.0 + sums.1) / sums.2.max(1) as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            let b = Batch { events, labeled: setup.labeled, indices: &val_idx, seed: val_seed, epoch: 0 };
            batch_loss(model, setup.kind, &b, None)?.total
        };
        let swa_active = epoch >= swa_start;
        if swa_active && (epoch - swa_start).is_multiple_of(cfg.swa.stride) {
            snapshots.push(model.params.clone());
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            swa_active,
            train_labeled: sums.0 / acc.n_labeled.max(1) as f64,
            train_unlabeled: sums.1 / acc.n_unlabeled.max(1) as f64,
            skipped: acc.skipped,
        });
        history.push(val_loss);
        let new_lr = lr_adapt(&history, lr, cfg, fixed);
        if new_lr != lr {
            lr = new_lr;
            history.clear();
        }
    }
    let n_snapshots = snapshots.len();
    if !snapshots.is_empty() {
        model.params = swa_average(&snapshots)?;
    }
    let final_val_loss = if val_idx.is_empty() {
        f64::NAN
    } else {
        let b = Batch { events, labeled: setup.labeled, indices: &val_idx, seed: val_seed, epoch: 0 };
        batch_loss(model, setup.kind, &b, None)?.total
    };
    Ok(TrainReport { log, final_val_loss, n_snapshots })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<(), LossError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
