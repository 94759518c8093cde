//! Conditional posterior and generative models.
//!
//! A [`Model`] owns one [`ParamVector`] whose slots are prefixed by the sub-model they
//! belong to: `post.` (encoder and posterior flows), `prior.` (the trainable prior over
//! labels) and `gen.` (the decoder). Freezing a sub-model is a mask over a prefix.
//!
//! Encoder: hits sorted by time, featurized as `(mx / 15, my / 15, t / 100)`, fed through a
//! single-layer GRU with 10 hidden units; the final state passes an aggregation MLP
//! (10 -> 15 -> 20). A flow-parameter MLP (20 -> w -> w -> P) maps the encoding to the
//! parameters of the position chain. Directional labels add a second chain over the angle
//! conditioned on the encoding and the position (`[h, x / 15, y / 15]`).
//!
//! Decoder: per module, features `[x, y, mx, my, mx - x, my - y, dist] / 15` feed a yield
//! MLP giving `ln lambda_j` and a time MLP giving a logistic mixture over `ln(t / 10 ns)`.
//! The [`DecoderKind::Physics`] variant evaluates the toy detector's own response with
//! trainable `ln n0` and `ln attenuation`.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flows::{ChainKind, ChainSpec, FlowChain, FlowError};
use crate::gradcore::{GradError, ParamVector, Slot, Tape, Var};
use crate::oracle::ln_factorial;
use crate::specfun::ln_gamma;
use crate::toymc::{arrival_params, DatasetSpec, Event, Label, PhotonHit, Topology};

pub const MODEL_FORMAT: &str = "flowpost-model";
pub const MODEL_VERSION: u32 = 1;

pub const GRU_HIDDEN: usize = 10;
pub const AGG_HIDDEN: usize = 15;
pub const ENCODING_DIM: usize = 20;
const POS_SCALE: f64 = 15.0;
const TIME_FEATURE_SCALE: f64 = 100.0;
/// Time flows act on `ln(t / TIME_UNIT)`.
const TIME_UNIT: f64 = 10.0;
const DECODER_FEATURES: usize = 7;
/// Label scale of the Euclidean chains, metres.
pub const LABEL_SCALE: f64 = 10.0;
/// Lower clamp on Poisson means.
pub const MIN_LAMBDA: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("event has no hits")]
    EmptyEvent,
    #[error("label does not match the model: {0}")]
    LabelMismatch(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("model has no generative part")]
    NoGenerative,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DecoderKind {
    /// Yield and time MLPs with two hidden layers of `width`; the time flow is a mixture of
    /// `time_components` logistics over `ln t`.
    Mlp { width: usize, time_components: usize },
    /// The detector's own response with trainable `ln n0` and `ln attenuation`.
    Physics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub prior: ChainKind,
    pub decoder: DecoderKind,
}

impl Default for GenerativeConfig {
    fn default() -> Self {
        GenerativeConfig {
            prior: ChainKind::Gaussianization { layers: 3, kernels: 6 },
            decoder: DecoderKind::Mlp { width: 100, time_components: 6 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spec: DatasetSpec,
    pub posterior: ChainKind,
    pub direction: Option<ChainKind>,
    pub flow_width: usize,
    pub generative: Option<GenerativeConfig>,
}

impl ModelConfig {
    /// Posterior-only model; directional datasets get a Moebius chain over the angle.
    pub fn new(spec: DatasetSpec, posterior: ChainKind, flow_width: usize) -> Self {
        let direction = spec.directional.then_some(ChainKind::Moebius { blocks: 2, components: 8 });
        ModelConfig { spec, posterior, direction, flow_width, generative: None }
    }

    pub fn with_generative(mut self, g: GenerativeConfig) -> Self {
        self.generative = Some(g);
        self
    }

    pub fn position_chain(&self) -> ChainSpec {
        ChainSpec::new(self.posterior, 2, LABEL_SCALE)
    }

    pub fn direction_chain(&self) -> Option<ChainSpec> {
        self.direction.map(|k| ChainSpec::new(k, 1, 1.0))
    }

    pub fn prior_chain(&self) -> Option<ChainSpec> {
        self.generative.map(|g| ChainSpec::new(g.prior, 2, LABEL_SCALE))
    }

    /// Dimension of the joint base space of the posterior.
    pub fn base_dim(&self) -> usize {
        2 + usize::from(self.direction.is_some())
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.flow_width == 0 {
            return Err(ModelError::Unsupported("flow_width must be positive".into()));
        }
        if self.spec.directional != self.direction.is_some() {
            return Err(ModelError::Unsupported("direction chain must be present exactly for directional labels".into()));
        }
        if let Some(k) = self.direction {
            if !matches!(k, ChainKind::Moebius { .. }) {
                return Err(ModelError::Unsupported("direction chain must be a Moebius chain".into()));
            }
        }
        if matches!(self.posterior, ChainKind::Moebius { .. }) {
            return Err(ModelError::Unsupported("position chain cannot be a circle chain".into()));
        }
        if let Some(g) = self.generative {
            if self.spec.directional {
                return Err(ModelError::Unsupported("generative models support position labels only".into()));
            }
            if matches!(g.prior, ChainKind::Moebius { .. }) {
                return Err(ModelError::Unsupported("prior must be a Euclidean chain".into()));
            }
            if let DecoderKind::Mlp { width, time_components } = g.decoder {
                if width == 0 || time_components == 0 {
                    return Err(ModelError::Unsupported("decoder sizes must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<(Slot, Slot)>,
}

impl Mlp {
    /// Plain forward pass on a row-major `(inputs, cols)` matrix.
    fn forward(&self, params: &ParamVector, x: &[f64], cols: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (params.get(*w), params.get(*b));
            let mut out = vec![0.0; w.rows * cols];
            for r in 0..w.rows {
                let o = &mut out[r * cols..(r + 1) * cols];
                o.iter_mut().for_each(|v| *v = bv[r]);
                for k in 0..w.cols {
                    let a = wv[r * w.cols + k];
                    let xr = &cur[k * cols..(k + 1) * cols];
                    for (ov, xv) in o.iter_mut().zip(xr) {
                        *ov += a * xv;
                    }
                }
            }
            if i + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            cur = out;
        }
        cur
    }

    fn tape(&self, t: &mut Tape, params: &ParamVector, x: Var) -> Var {
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wv = t.param(params, *w);
            let bv = t.param(params, *b);
            h = t.linear(wv, h, bv);
            if i + 1 < self.layers.len() {
                h = t.tanh(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
enum DecoderSlots {
    Mlp { yield_mlp: Mlp, time_mlp: Mlp, components: usize },
    Physics(Slot),
}

#[derive(Debug, Clone)]
struct Slots {
    gru_w: Slot,
    gru_u: Slot,
    gru_b: Slot,
    gru_bn: Slot,
    agg: Mlp,
    flow: Mlp,
    dir: Option<Mlp>,
    prior: Option<Slot>,
    decoder: Option<DecoderSlots>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn glorot(&mut self, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
        let a = gain * (6.0 / (rows + cols) as f64).sqrt();
        (0..rows * cols).map(|_| self.rng.gen_range(-a..a)).collect()
    }
}

fn add_mlp(p: &mut ParamVector, init: &mut Init, name: &str, sizes: &[usize], out_gain: f64, out_bias: &[f64]) -> Mlp {
    let mut layers = Vec::new();
    for i in 0..sizes.len() - 1 {
        let (fi, fo) = (sizes[i], sizes[i + 1]);
        let last = i + 2 == sizes.len();
        let w = init.glorot(fo, fi, if last { out_gain } else { 1.0 });
        let ws = p.add(&format!("{name}.w{i}"), fo, fi, &w);
        let b = if last && !out_bias.is_empty() { out_bias.to_vec() } else { vec![0.0; fo] };
        let bs = p.add(&format!("{name}.b{i}"), fo, 1, &b);
        layers.push((ws, bs));
    }
    Mlp { layers }
}

fn build_params(config: &ModelConfig, seed: u64) -> (ParamVector, Slots) {
    let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
    let mut p = ParamVector::new();
    let h = GRU_HIDDEN;
    let gru_w = {
        let v = init.glorot(3 * h, 3, 1.0);
        p.add("post.gru.w", 3 * h, 3, &v)
    };
    let gru_u = {
        let v = init.glorot(3 * h, h, 1.0);
        p.add("post.gru.u", 3 * h, h, &v)
    };
    let gru_b = p.add("post.gru.b", 3 * h, 1, &vec![0.0; 3 * h]);
    let gru_bn = p.add("post.gru.bn", h, 1, &vec![0.0; h]);
    let agg = add_mlp(&mut p, &mut init, "post.agg", &[h, AGG_HIDDEN, ENCODING_DIM], 1.0, &[]);
    let w = config.flow_width;
    let pos = config.position_chain();
    let flow = add_mlp(&mut p, &mut init, "post.flow", &[ENCODING_DIM, w, w, pos.n_params()], 0.01, &pos.default_params());
    let dir = config.direction_chain().map(|d| {
        add_mlp(&mut p, &mut init, "post.dir", &[ENCODING_DIM + 2, w, w, d.n_params()], 0.01, &d.default_params())
    });
    let prior = config.prior_chain().map(|c| p.add("prior.chain", c.n_params(), 1, &c.default_params()));
    let decoder = config.generative.map(|g| match g.decoder {
        DecoderKind::Mlp { width, time_components: k } => {
            let yield_mlp = add_mlp(&mut p, &mut init, "gen.yield", &[DECODER_FEATURES, width, width, 1], 0.1, &[0.0]);
            let mut tb = vec![0.0; 3 * k];
            for j in 0..k {
                tb[k + j] = if k > 1 { 3.5 * j as f64 / (k - 1) as f64 } else { 1.5 };
                tb[2 * k + j] = (0.3f64).ln();
            }
            let time_mlp = add_mlp(&mut p, &mut init, "gen.time", &[DECODER_FEATURES, width, width, 3 * k], 0.1, &tb);
            DecoderSlots::Mlp { yield_mlp, time_mlp, components: k }
        }
        DecoderKind::Physics => {
            let c = &config.spec.config;
            DecoderSlots::Physics(p.add("gen.physics", 2, 1, &[c.n0.ln(), c.attenuation.ln()]))
        }
    });
    (p, Slots { gru_w, gru_u, gru_b, gru_bn, agg, flow, dir, prior, decoder })
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamVector,
}

/// Time law of one module given a label.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeLaw {
    /// Logistic mixture over `y = ln(t / 10 ns)` with normalized log weights.
    Mixture { ln_w: Vec<f64>, loc: Vec<f64>, log_width: Vec<f64> },
    /// Shifted gamma.
    Gamma { offset: f64, shape: f64, scale: f64 },
}

fn log_sigmoid(x: f64) -> f64 {
    -crate::gradcore::softplus(-x)
}

impl TimeLaw {
    pub fn ln_pdf(&self, t: f64) -> f64 {
        match self {
            TimeLaw::Mixture { ln_w, loc, log_width } => {
                if !(t > 0.0) {
                    return f64::NEG_INFINITY;
                }
                let y = (t / TIME_UNIT).ln();
                let terms: Vec<f64> = (0..ln_w.len())
                    .map(|k| {
                        let a = (y - loc[k]) * (-log_width[k]).exp();
                        ln_w[k] + log_sigmoid(a) + log_sigmoid(-a) - log_width[k]
                    })
                    .collect();
                let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - t.ln()
            }
            TimeLaw::Gamma { offset, shape, scale } => {
                let u = (t - offset).max(1e-300);
                (shape - 1.0) * u.ln() - u / scale - shape * scale.ln() - ln_gamma(*shape)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            TimeLaw::Mixture { ln_w, loc, log_width } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut k = ln_w.len() - 1;
                for (j, lw) in ln_w.iter().enumerate() {
                    acc += lw.exp();
                    if u < acc {
                        k = j;
                        break;
                    }
                }
                let v: f64 = rng.gen_range(f64::EPSILON..1.0);
                let y = loc[k] + log_width[k].exp() * (v / (1.0 - v)).ln();
                TIME_UNIT * y.exp()
            }
            TimeLaw::Gamma { offset, shape, scale } => {
                offset + Gamma::new(*shape, *scale).expect("positive gamma parameters").sample(rng)
            }
        }
    }
}

/// Decoder output for one label: Poisson log-means and time laws per module.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderResponse {
    pub ln_lambda: Vec<f64>,
    pub time: Vec<TimeLaw>,
}

impl DecoderResponse {
    /// Extended Poisson-process log-likelihood of an event.
    pub fn log_likelihood(&self, event: &Event) -> f64 {
        let counts = event.counts(self.ln_lambda.len());
        let mut ll = 0.0;
        for (j, &k) in counts.iter().enumerate() {
            ll += k as f64 * self.ln_lambda[j] - self.ln_lambda[j].exp() - ln_factorial(k);
        }
        for h in &event.hits {
            ll += self.time[h.module].ln_pdf(h.t);
        }
        ll
    }

    /// Test quantity `ln p(x | z) / N_hits`, with `N_hits` taken as 1 for empty events.
    pub fn test_quantity(&self, event: &Event) -> f64 {
        self.log_likelihood(event) / event.hits.len().max(1) as f64
    }

    /// Draws an event without any trigger requirement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Event {
        let mut hits = Vec::new();
        for (j, l) in self.ln_lambda.iter().enumerate() {
            let lam = l.exp();
            let n = Poisson::new(lam).map(|d| d.sample(rng) as usize).unwrap_or(0);
            for _ in 0..n {
                hits.push(PhotonHit { module: j, t: self.time[j].sample(rng) });
            }
        }
        hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.module.cmp(&b.module)));
        Event { label: None, nu: 1.0, hits }
    }
}

/// A posterior sample: the label and its point in the joint base space.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub label: Label,
    pub base: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamVector,
    slots: Slots,
}

fn sorted_hits(event: &Event) -> Vec<PhotonHit> {
    let mut hits = event.hits.clone();
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.module.cmp(&b.module)));
    hits
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, slots) = build_params(&config, seed);
        Ok(Model { config, params, slots })
    }

    /// Rebuilds a model from a configuration and a parameter vector with matching layout.
    pub fn from_parts(config: ModelConfig, params: ParamVector) -> Result<Self, ModelError> {
        config.validate()?;
        let (fresh, slots) = build_params(&config, 0);
        let same = fresh.len() == params.len()
            && fresh.layout().zip(params.layout()).all(|(a, b)| a.0 == b.0 && a.1 == b.1)
            && fresh.layout().count() == params.layout().count();
        if !same {
            return Err(ModelError::Format("parameter layout does not match the configuration".into()));
        }
        params.validate()?;
        Ok(Model { config, params, slots })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let f = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(&f)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let f: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(ModelError::Format(format!("unsupported model format {} v{}", f.format, f.version)));
        }
        Model::from_parts(f.config, f.params)
    }

    /// Copies every slot whose name starts with `prefix` from `other` (names and shapes must
    /// match). Returns the number of copied values.
    pub fn copy_params_from(&mut self, other: &Model, prefix: &str) -> Result<usize, ModelError> {
        let mut copied = 0;
        let slots: Vec<(String, Slot)> =
            self.params.layout().filter(|(n, _)| n.starts_with(prefix)).map(|(n, s)| (n.to_string(), s)).collect();
        for (name, slot) in slots {
            let src = other.params.slot(&name).filter(|s| s.rows == slot.rows && s.cols == slot.cols).ok_or_else(|| {
                ModelError::Format(format!("parameter {name} missing or reshaped in the source model"))
            })?;
            let v = other.params.get(src).to_vec();
            self.params.get_mut(slot).copy_from_slice(&v);
            copied += v.len();
        }
        Ok(copied)
    }

    pub fn has_generative(&self) -> bool {
        self.slots.decoder.is_some()
    }

    pub fn n_modules(&self) -> usize {
        self.config.spec.config.modules.len()
    }

    /// Encoding `h` (20 x 1) of an event.
    pub fn encode_tape(&self, t: &mut Tape, event: &Event) -> Result<Var, ModelError> {
        if event.hits.is_empty() {
            return Err(ModelError::EmptyEvent);
        }
        let hits = sorted_hits(event);
        let n = hits.len();
        let modules = &self.config.spec.config.modules;
        let mut feats = vec![0.0; 3 * n];
        for (i, hit) in hits.iter().enumerate() {
            let m = modules.get(hit.module).ok_or_else(|| {
                ModelError::LabelMismatch(format!("hit on module {} outside the detector", hit.module))
            })?;
            feats[i] = m[0] / POS_SCALE;
            feats[n + i] = m[1] / POS_SCALE;
            feats[2 * n + i] = hit.t / TIME_FEATURE_SCALE;
        }
        let p = &self.params;
        let hd = GRU_HIDDEN;
        let x = t.constant(&feats, 3, n);
        let w = t.param(p, self.slots.gru_w);
        let b = t.param(p, self.slots.gru_b);
        let wx = t.linear(w, x, b);
        let u = t.param(p, self.slots.gru_u);
        let bn = t.param(p, self.slots.gru_bn);
        let mut h = t.constant(&[0.0; GRU_HIDDEN], hd, 1);
        for i in 0..n {
            let xi = t.select_cols(wx, &[i]);
            let uh = t.matmul(u, h);
            let xrz = t.rows(xi, 0, 2 * hd);
            let urz = t.rows(uh, 0, 2 * hd);
            let rz = t.add(xrz, urz);
            let rz = t.sigmoid(rz);
            let r = t.rows(rz, 0, hd);
            let z = t.rows(rz, hd, hd);
            let un = t.rows(uh, 2 * hd, hd);
            let un = t.add(un, bn);
            let run = t.mul(r, un);
            let xn = t.rows(xi, 2 * hd, hd);
            let nn = t.add(xn, run);
            let nn = t.tanh(nn);
            let d = t.sub(h, nn);
            let zd = t.mul(z, d);
            h = t.add(nn, zd);
        }
        Ok(self.slots.agg.tape(t, p, h))
    }

    pub fn encode(&self, event: &Event) -> Result<Vec<f64>, ModelError> {
        let mut t = Tape::new();
        let h = self.encode_tape(&mut t, event)?;
        Ok(t.value(h).to_vec())
    }

    /// Parameters of the position chain for an encoding.
    pub fn position_params_tape(&self, t: &mut Tape, h: Var) -> Var {
        self.slots.flow.tape(t, &self.params, h)
    }

    /// Parameters of the direction chain for an encoding and a position (2 x 1).
    pub fn direction_params_tape(&self, t: &mut Tape, h: Var, pos: Var) -> Option<Var> {
        let mlp = self.slots.dir.as_ref()?;
        let ps = t.scale(pos, 1.0 / POS_SCALE);
        let inp = t.vstack(&[h, ps]);
        Some(mlp.tape(t, &self.params, inp))
    }

    fn check_label(&self, label: &Label) -> Result<(), ModelError> {
        match (self.config.direction.is_some(), label.theta) {
            (true, None) => Err(ModelError::LabelMismatch("model needs a direction angle".into())),
            (false, Some(_)) => Err(ModelError::LabelMismatch("model has no direction chain".into())),
            _ => Ok(()),
        }
    }

    /// `ln q(label | x)` on the tape, given the encoding.
    pub fn posterior_log_prob_tape(&self, t: &mut Tape, h: Var, label: &Label) -> Result<Var, ModelError> {
        self.check_label(label)?;
        let pos = t.vector(&[label.x, label.y]);
        let p1 = self.position_params_tape(t, h);
        let mut lp = self.config.position_chain().log_prob_tape(t, p1, pos);
        if let (Some(dc), Some(th)) = (self.config.direction_chain(), label.theta) {
            let p2 = self.direction_params_tape(t, h, pos).expect("direction chain present");
            let thv = t.scalar_const(th);
            let l2 = dc.log_prob_tape(t, p2, thv);
            lp = t.add(lp, l2);
        }
        Ok(lp)
    }

    /// Reparameterized posterior sample on the tape from a joint base point. Returns the
    /// position (2 x 1) and, for directional models, the angle.
    pub fn posterior_sample_tape(&self, t: &mut Tape, h: Var, zhat: &[f64]) -> Result<(Var, Option<Var>), ModelError> {
        if zhat.len() != self.config.base_dim() {
            return Err(FlowError::Dimension { expected: self.config.base_dim(), got: zhat.len() }.into());
        }
        let p1 = self.position_params_tape(t, h);
        let pos = self.config.position_chain().sample_tape(t, p1, &zhat[..2])?;
        let th = match self.config.direction_chain() {
            Some(dc) => {
                let p2 = self.direction_params_tape(t, h, pos).expect("direction chain present");
                Some(dc.sample_tape(t, p2, &zhat[2..])?)
            }
            None => None,
        };
        Ok((pos, th))
    }

    /// Numeric posterior chains of one event.
    pub fn posterior(&self, event: &Event) -> Result<EventPosterior<'_>, ModelError> {
        let mut t = Tape::new();
        let h = self.encode_tape(&mut t, event)?;
        let p1 = self.position_params_tape(&mut t, h);
        let position = self.config.position_chain().build(t.value(p1))?;
        Ok(EventPosterior { model: self, h: t.value(h).to_vec(), position })
    }

    pub fn posterior_log_prob(&self, event: &Event, label: &Label) -> Result<f64, ModelError> {
        self.posterior(event)?.log_prob(label)
    }

    pub fn posterior_sample<R: Rng + ?Sized>(
        &self,
        event: &Event,
        rng: &mut R,
        n: usize,
    ) -> Result<Vec<PosteriorSample>, ModelError> {
        if n == 0 {
            return Err(ModelError::Unsupported("posterior_sample needs n > 0".into()));
        }
        let post = self.posterior(event)?;
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..self.config.base_dim()).map(|_| rng.sample(StandardNormal)).collect();
                post.forward(&z)
            })
            .collect()
    }

    /// `ln p(z)` under the trainable prior; `z` is a 2 x 1 position.
    pub fn prior_log_prob_tape(&self, t: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let slot = self.slots.prior.ok_or(ModelError::NoGenerative)?;
        let p = t.param(&self.params, slot);
        Ok(self.config.prior_chain().expect("prior configured").log_prob_tape(t, p, z))
    }

    pub fn prior_chain(&self) -> Result<FlowChain, ModelError> {
        let slot = self.slots.prior.ok_or(ModelError::NoGenerative)?;
        Ok(self.config.prior_chain().expect("prior configured").build(self.params.get(slot))?)
    }

    fn decoder_geometry(&self, t: &mut Tape, z: Var) -> (Var, Var, Var) {
        let modules = &self.config.spec.config.modules;
        let mx: Vec<f64> = modules.iter().map(|m| m[0]).collect();
        let my: Vec<f64> = modules.iter().map(|m| m[1]).collect();
        let n = mx.len();
        let mxv = t.constant(&mx, 1, n);
        let myv = t.constant(&my, 1, n);
        let zx = t.slice(z, 0, 1, 1);
        let zy = t.slice(z, 1, 1, 1);
        let dx = t.sub(mxv, zx);
        let dy = t.sub(myv, zy);
        (dx, dy, mxv)
    }

    /// Decoder outputs on the tape: `ln lambda` (1 x M) and the time-law parameter matrix.
    fn decoder_tape(&self, t: &mut Tape, z: Var) -> Result<(Var, Var), ModelError> {
        let dec = self.slots.decoder.as_ref().ok_or(ModelError::NoGenerative)?;
        let (dx, dy, mxv) = self.decoder_geometry(t, z);
        let n = self.n_modules();
        match dec {
            DecoderSlots::Mlp { yield_mlp, time_mlp, .. } => {
                let dx2 = t.square(dx);
                let dy2 = t.square(dy);
                let r2 = t.add(dx2, dy2);
                let r2 = t.offset(r2, 1e-4);
                let dist = t.sqrt(r2);
                let zero = t.constant(&vec![0.0; n], 1, n);
                let zx = t.slice(z, 0, 1, 1);
                let zy = t.slice(z, 1, 1, 1);
                let xr = t.add(zero, zx);
                let yr = t.add(zero, zy);
                let myv = {
                    let my: Vec<f64> = self.config.spec.config.modules.iter().map(|m| m[1]).collect();
                    t.constant(&my, 1, n)
                };
                let f = t.vstack(&[xr, yr, mxv, myv, dx, dy, dist]);
                let f = t.scale(f, 1.0 / POS_SCALE);
                let ll = yield_mlp.tape(t, &self.params, f);
                let ll = t.clamp_min(ll, MIN_LAMBDA.ln());
                let tp = time_mlp.tape(t, &self.params, f);
                Ok((ll, tp))
            }
            DecoderSlots::Physics(slot) => {
                let c = &self.config.spec.config;
                let p = t.param(&self.params, *slot);
                let ln_n0 = t.slice(p, 0, 1, 1);
                let ln_att = t.slice(p, 1, 1, 1);
                let dx2 = t.square(dx);
                let dy2 = t.square(dy);
                let r2 = t.add(dx2, dy2);
                let d = t.sqrt(r2);
                let natt = t.neg(ln_att);
                let inv_att = t.exp(natt);
                let att = t.mul(d, inv_att);
                let cos = t.div(dx, d);
                let ang = t.scale(cos, c.kappa);
                let ang = t.offset(ang, 1.0);
                let ang = t.log(ang);
                let ll = t.sub(ang, att);
                let ll = t.add(ll, ln_n0);
                let ll = t.offset(ll, -(1.0 + c.kappa).ln());
                let ll = t.clamp_min(ll, MIN_LAMBDA.ln());
                Ok((ll, d))
            }
        }
    }

    /// `ln p(x | z)` on the tape (`z` is a 2 x 1 position).
    pub fn decoder_log_likelihood_tape(&self, t: &mut Tape, event: &Event, z: Var) -> Result<Var, ModelError> {
        let (ll, tp) = self.decoder_tape(t, z)?;
        let n = self.n_modules();
        let counts: Vec<f64> = event.counts(n).iter().map(|&k| k as f64).collect();
        let lnk: f64 = event.counts(n).iter().map(|&k| ln_factorial(k)).sum();
        let kv = t.constant(&counts, 1, n);
        let kl = t.mul(kv, ll);
        let lam = t.exp(ll);
        let pois = t.sub(kl, lam);
        let pois = t.sum(pois);
        let mut total = t.offset(pois, -lnk);
        if event.hits.is_empty() {
            return Ok(total);
        }
        let mods: Vec<usize> = event.hits.iter().map(|h| h.module).collect();
        let nh = mods.len();
        match self.slots.decoder.as_ref().expect("checked above") {
            DecoderSlots::Mlp { components: k, .. } => {
                let k = *k;
                let sel = t.select_cols(tp, &mods);
                let logits = t.rows(sel, 0, k);
                let loc = t.rows(sel, k, k);
                let logw = t.rows(sel, 2 * k, k);
                let y: Vec<f64> = event.hits.iter().map(|h| (h.t.max(1e-300) / TIME_UNIT).ln()).collect();
                let yv = t.constant(&y, 1, nh);
                let l = t.logsumexp_cols(logits);
                let lnw = t.sub(logits, l);
                let diff = t.sub(yv, loc);
                let nlw = t.neg(logw);
                let inv = t.exp(nlw);
                let a = t.mul(diff, inv);
                let lp = t.log_sigmoid(a);
                let na = t.neg(a);
                let ln = t.log_sigmoid(na);
                let x = t.add(lnw, lp);
                let x = t.add(x, ln);
                let x = t.sub(x, logw);
                let lpy = t.logsumexp_cols(x);
                let s = t.sum(lpy);
                let lnt: f64 = event.hits.iter().map(|h| h.t.max(1e-300).ln()).sum();
                let s = t.offset(s, -lnt);
                total = t.add(total, s);
            }
            DecoderSlots::Physics(_) => {
                let c = &self.config.spec.config;
                let d = t.select_cols(tp, &mods);
                let tv: Vec<f64> = event.hits.iter().map(|h| h.t).collect();
                let tv = t.constant(&tv, 1, nh);
                let off = t.scale(d, 1.0 / c.speed);
                let u = t.sub(tv, off);
                let u = t.clamp_min(u, 1e-300);
                let shape = t.scale(d, 1.0 / c.shape_length);
                let shape = t.offset(shape, 1.0);
                let scale = t.scale(shape, c.time_scale);
                let lu = t.log(u);
                let sm1 = t.offset(shape, -1.0);
                let a = t.mul(sm1, lu);
                let b = t.div(u, scale);
                let ls = t.log(scale);
                let cterm = t.mul(shape, ls);
                let g = t.ln_gamma(shape);
                let v = t.sub(a, b);
                let v = t.sub(v, cterm);
                let v = t.sub(v, g);
                let s = t.sum(v);
                total = t.add(total, s);
            }
        }
        Ok(total)
    }

    /// Decoder response for a position label.
    pub fn decoder_response(&self, z: &[f64]) -> Result<DecoderResponse, ModelError> {
        let dec = self.slots.decoder.as_ref().ok_or(ModelError::NoGenerative)?;
        let n = self.n_modules();
        let modules = &self.config.spec.config.modules;
        let (x, y) = (z[0], z[1]);
        let (ln_lambda, tpv) = match dec {
            DecoderSlots::Mlp { yield_mlp, time_mlp, .. } => {
                let mut f = vec![0.0; DECODER_FEATURES * n];
                for (j, m) in modules.iter().enumerate() {
                    let (dx, dy) = (m[0] - x, m[1] - y);
                    let row = [x, y, m[0], m[1], dx, dy, (dx * dx + dy * dy + 1e-4).sqrt()];
                    for (r, v) in row.iter().enumerate() {
                        f[r * n + j] = v / POS_SCALE;
                    }
                }
                let ll: Vec<f64> =
                    yield_mlp.forward(&self.params, &f, n).into_iter().map(|v| v.max(MIN_LAMBDA.ln())).collect();
                (ll, time_mlp.forward(&self.params, &f, n))
            }
            DecoderSlots::Physics(slot) => {
                let c = &self.config.spec.config;
                let p = self.params.get(*slot);
                let inv_att = (-p[1]).exp();
                let mut ll = Vec::with_capacity(n);
                let mut d = Vec::with_capacity(n);
                for m in modules {
                    let (dx, dy) = (m[0] - x, m[1] - y);
                    let r = (dx * dx + dy * dy).sqrt();
                    let v = (1.0 + c.kappa * dx / r).ln() - r * inv_att + p[0] - (1.0 + c.kappa).ln();
                    ll.push(v.max(MIN_LAMBDA.ln()));
                    d.push(r);
                }
                (ll, d)
            }
        };
        let tpv = &tpv;
        let time = match dec {
            DecoderSlots::Mlp { components: k, .. } => {
                let k = *k;
                (0..n)
                    .map(|j| {
                        let col = |r: usize| tpv[r * n + j];
                        let logits: Vec<f64> = (0..k).map(col).collect();
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let l = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        TimeLaw::Mixture {
                            ln_w: logits.iter().map(|v| v - l).collect(),
                            loc: (k..2 * k).map(col).collect(),
                            log_width: (2 * k..3 * k).map(col).collect(),
                        }
                    })
                    .collect()
            }
            DecoderSlots::Physics(_) => tpv
                .iter()
                .map(|&d| {
                    let (offset, shape, scale) = arrival_params(&self.config.spec.config, d);
                    TimeLaw::Gamma { offset, shape, scale }
                })
                .collect(),
        };
        Ok(DecoderResponse { ln_lambda, time })
    }

    pub fn decoder_log_likelihood(&self, event: &Event, z: &[f64]) -> Result<f64, ModelError> {
        Ok(self.decoder_response(z)?.log_likelihood(event))
    }

    pub fn decoder_sample<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Event, ModelError> {
        let mut ev = self.decoder_response(z)?.sample(rng);
        ev.label = Some(Label { x: z[0], y: z[1], theta: None, topology: Topology::Cascade });
        Ok(ev)
    }
}

/// Numeric posterior of one event.
pub struct EventPosterior<'a> {
    model: &'a Model,
    h: Vec<f64>,
    pub position: FlowChain,
}

impl EventPosterior<'_> {
    fn direction_chain(&self, pos: [f64; 2]) -> Result<Option<FlowChain>, ModelError> {
        let Some(dc) = self.model.config.direction_chain() else {
            return Ok(None);
        };
        let mut t = Tape::new();
        let h = t.vector(&self.h);
        let pv = t.vector(&pos);
        let p2 = self.model.direction_params_tape(&mut t, h, pv).expect("direction chain present");
        Ok(Some(dc.build(t.value(p2))?))
    }

    pub fn log_prob(&self, label: &Label) -> Result<f64, ModelError> {
        self.model.check_label(label)?;
        let mut lp = self.position.log_prob(&[label.x, label.y])?;
        if let (Some(dc), Some(th)) = (self.direction_chain([label.x, label.y])?, label.theta) {
            lp += dc.log_prob(&[th])?;
        }
        Ok(lp)
    }

    /// Joint base point of a label.
    pub fn base_point(&self, label: &Label) -> Result<Vec<f64>, ModelError> {
        self.model.check_label(label)?;
        let (mut z, _) = self.position.normalize(&[label.x, label.y])?;
        if let (Some(dc), Some(th)) = (self.direction_chain([label.x, label.y])?, label.theta) {
            z.extend(dc.normalize(&[th])?.0);
        }
        Ok(z)
    }

    /// Label of a joint base point.
    pub fn forward(&self, zhat: &[f64]) -> Result<PosteriorSample, ModelError> {
        let pos = self.position.forward(&zhat[..2])?;
        let theta = match self.direction_chain([pos[0], pos[1]])? {
            Some(dc) => Some(dc.forward(&zhat[2..])?[0].rem_euclid(2.0 * PI)),
            None => None,
        };
        let label = Label { x: pos[0], y: pos[1], theta, topology: self.model.config.spec.topology };
        Ok(PosteriorSample { label, base: zhat.to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::check_gradients;
    use crate::oracle;
    use crate::toymc::{generate_dataset, SystematicsSpec};

    fn model(id: u32, kind: ChainKind, gen: Option<GenerativeConfig>) -> (Model, Vec<Event>) {
        let data = generate_dataset(id, 12, 11, SystematicsSpec::default()).unwrap();
        let mut cfg = ModelConfig::new(data.header.spec.clone(), kind, 8);
        if let Some(g) = gen {
            cfg = cfg.with_generative(g);
        }
        let mut m = Model::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for v in m.params.values.iter_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
        (m, data.events)
    }

    #[test]
    fn encoding_is_order_invariant_and_deterministic() {
        let (m, evs) = model(2, ChainKind::Affine, None);
        let ev = &evs[0];
        let mut shuffled = ev.clone();
        shuffled.hits.reverse();
        let a = m.encode(ev).unwrap();
        assert_eq!(a, m.encode(&shuffled).unwrap());
        assert_eq!(a, m.encode(&ev.clone()).unwrap());
        assert_eq!(a.len(), ENCODING_DIM);
        let empty = Event { label: None, nu: 1.0, hits: vec![] };
        assert!(matches!(m.encode(&empty), Err(ModelError::EmptyEvent)));
    }

    #[test]
    fn posterior_gradients_check() {
        for kind in [ChainKind::Affine, ChainKind::Gaussianization { layers: 2, kernels: 3 }] {
            let (m, evs) = model(2, kind, None);
            for ev in evs.iter().take(3) {
                let mut t = Tape::new();
                let h = m.encode_tape(&mut t, ev).unwrap();
                let lp = m.posterior_log_prob_tape(&mut t, h, &ev.label.unwrap()).unwrap();
                let floor = 1e-6 * t.scalar(lp).abs().max(1.0);
                let chk = check_gradients(&mut t, lp, &m.params, 1e-5, floor, None).unwrap();
                assert!(chk.max_rel_error < 1e-4, "{chk:?}");
            }
        }
    }

    #[test]
    fn mse_posterior_at_mean() {
        let (m, evs) = model(2, ChainKind::Mse, None);
        let post = m.posterior(&evs[0]).unwrap();
        let mean = post.position.forward(&[0.0, 0.0]).unwrap();
        let lp = post.log_prob(&Label::cascade(mean[0], mean[1])).unwrap();
        assert!((lp + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn directional_posterior_is_normalized() {
        let (m, evs) = model(3, ChainKind::Gaussianization { layers: 1, kernels: 3 }, None);
        let ev = &evs[0];
        let post = m.posterior(ev).unwrap();
        let l = ev.label.unwrap();
        let n = 4000;
        let h = 2.0 * PI / n as f64;
        let pos_lp = post.position.log_prob(&[l.x, l.y]).unwrap();
        let s: f64 = (0..n)
            .map(|i| {
                let lab = Label { theta: Some((i as f64 + 0.5) * h), ..l };
                (post.log_prob(&lab).unwrap() - pos_lp).exp() * h
            })
            .sum();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in m.posterior_sample(ev, &mut rng, 5).unwrap() {
            let back = post.base_point(&s.label).unwrap();
            for (a, b) in back.iter().zip(&s.base) {
                assert!((a - b).abs() < 1e-8);
            }
        }
        assert!(m.posterior_sample(ev, &mut rng, 0).is_err());
    }

    #[test]
    fn physics_decoder_matches_oracle() {
        let g = GenerativeConfig { prior: ChainKind::Affine, decoder: DecoderKind::Physics };
        let data = generate_dataset(2, 20, 3, SystematicsSpec::default()).unwrap();
        let spec = data.header.spec.clone();
        let m = Model::new(ModelConfig::new(spec.clone(), ChainKind::Affine, 4).with_generative(g), 1).unwrap();
        for ev in &data.events {
            let l = ev.label.unwrap();
            let want = oracle::log_likelihood(&spec, ev, &l, 1.0);
            let got = m.decoder_log_likelihood(ev, &[l.x, l.y]).unwrap();
            assert!((want - got).abs() < 1e-6, "{want} vs {got}");
            let mut t = Tape::new();
            let z = t.vector(&[l.x, l.y]);
            let tl = m.decoder_log_likelihood_tape(&mut t, ev, z).unwrap();
            assert!((t.scalar(tl) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn decoder_tape_agrees_and_differentiates() {
        let (m, evs) = model(2, ChainKind::Affine, Some(GenerativeConfig::default()));
        for ev in evs.iter().take(3) {
            let l = ev.label.unwrap();
            let mut t = Tape::new();
            let z = t.vector(&[l.x, l.y]);
            let ll = m.decoder_log_likelihood_tape(&mut t, ev, z).unwrap();
            let num = m.decoder_log_likelihood(ev, &[l.x, l.y]).unwrap();
            assert!((t.scalar(ll) - num).abs() < 1e-9 * num.abs().max(1.0));
            let idx: Vec<usize> = m.params.layout().filter(|(n, _)| n.starts_with("gen.")).flat_map(|(_, s)| s.range()).step_by(37).collect();
            let floor = 1e-6 * t.scalar(ll).abs().max(1.0);
            let chk = check_gradients(&mut t, ll, &m.params, 1e-5, floor, Some(&idx)).unwrap();
            assert!(chk.max_rel_error < 1e-4, "{chk:?}");
        }
        let empty = Event { label: None, nu: 1.0, hits: vec![] };
        let r = m.decoder_response(&[1.0, 2.0]).unwrap();
        let want: f64 = -r.ln_lambda.iter().map(|v| v.exp()).sum::<f64>();
        assert_eq!(r.log_likelihood(&empty), want);
    }

    #[test]
    fn model_file_round_trip() {
        let (m, evs) = model(4, ChainKind::Gaussianization { layers: 1, kernels: 2 }, Some(GenerativeConfig::default()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.params.values, m.params.values);
        let l = evs[0].label.unwrap();
        assert_eq!(
            back.posterior_log_prob(&evs[0], &l).unwrap().to_bits(),
            m.posterior_log_prob(&evs[0], &l).unwrap().to_bits()
        );
    }
}
