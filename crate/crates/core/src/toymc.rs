//! Toy detector simulation: a square grid of photon-counting modules observing point-like
//! (cascade) or extended (track) light emitters on a plane.
//!
//! Each event is generated from its own ChaCha8 stream `(seed, event_index)`, so datasets
//! are reproducible regardless of how generation is scheduled across threads.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::specfun::ln_gamma;

pub const FORMAT_NAME: &str = "flowpost-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("unknown dataset id {0} (expected 1 to 5)")]
    UnknownDataset(u32),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset schema mismatch: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Physical constants and module layout of the toy detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub modules: Vec<[f64; 2]>,
    /// An event is kept only if its hit count is strictly greater than this.
    pub threshold: usize,
    /// Photon yield at zero distance (before the angular factor).
    pub n0: f64,
    /// Attenuation length in metres.
    pub attenuation: f64,
    /// Strength of the angular emission asymmetry.
    pub kappa: f64,
    /// Light speed in the medium, metres per nanosecond.
    pub speed: f64,
    /// Gamma scale at zero distance, nanoseconds.
    pub time_scale: f64,
    /// Distance over which the gamma shape grows by one, metres.
    pub shape_length: f64,
}

impl DetectorConfig {
    fn validate(&self) -> Result<(), ToyError> {
        let ok = !self.modules.is_empty()
            && self.n0 > 0.0
            && self.attenuation > 0.0
            && (0.0..1.0).contains(&self.kappa)
            && self.speed > 0.0
            && self.time_scale > 0.0
            && self.shape_length > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ToyError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Cascade,
    Track,
}

/// Ground-truth event description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub x: f64,
    pub y: f64,
    /// Emission direction; `None` means the fixed +x direction.
    pub theta: Option<f64>,
    pub topology: Topology,
}

impl Label {
    pub fn cascade(x: f64, y: f64) -> Self {
        Label { x, y, theta: None, topology: Topology::Cascade }
    }

    pub fn direction(&self) -> [f64; 2] {
        let th = self.theta.unwrap_or(0.0);
        [th.cos(), th.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotonHit {
    pub module: usize,
    pub t: f64,
}

/// Hits sorted by arrival time, plus the truth when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub label: Option<Label>,
    pub nu: f64,
    #[serde(with = "hit_pairs")]
    pub hits: Vec<PhotonHit>,
}

impl Event {
    /// Hit counts per module.
    pub fn counts(&self, n_modules: usize) -> Vec<usize> {
        let mut k = vec![0; n_modules];
        for h in &self.hits {
            k[h.module] += 1;
        }
        k
    }
}

mod hit_pairs {
    use super::PhotonHit;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(hits: &[PhotonHit], s: S) -> Result<S::Ok, S::Error> {
        let v: Vec<(usize, f64)> = hits.iter().map(|h| (h.module, h.t)).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PhotonHit>, D::Error> {
        let v: Vec<(usize, f64)> = Vec::deserialize(d)?;
        Ok(v.into_iter().map(|(module, t)| PhotonHit { module, t }).collect())
    }
}

/// Overall brightness systematic `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystematicsSpec {
    pub marginalize: bool,
    pub nu_mean: f64,
    pub nu_sd: f64,
}

impl Default for SystematicsSpec {
    fn default() -> Self {
        SystematicsSpec { marginalize: false, nu_mean: 1.0, nu_sd: 0.5 }
    }
}

impl SystematicsSpec {
    pub fn marginalized() -> Self {
        SystematicsSpec { marginalize: true, ..Default::default() }
    }
}

/// Everything that defines one of the five reference datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: u32,
    pub config: DetectorConfig,
    /// Labels are drawn uniformly from `[-half_width, half_width]^2`.
    pub half_width: f64,
    pub directional: bool,
    pub topology: Topology,
    pub track_length: f64,
    pub track_emitters: usize,
}

/// Half-width of the region on which posterior grids are defined.
pub const REGION_HALF_WIDTH: f64 = 20.0;

/// Detector configuration with one module at the origin (`grid = false`) or the 4x4 grid.
pub fn build_detector(grid: bool) -> DetectorConfig {
    let (modules, threshold) = if grid {
        let c = [-15.0, -5.0, 5.0, 15.0];
        let mut m = Vec::with_capacity(16);
        for &x in &c {
            for &y in &c {
                m.push([x, y]);
            }
        }
        (m, 5)
    } else {
        (vec![[0.0, 0.0]], 1)
    };
    DetectorConfig {
        modules,
        threshold,
        n0: 50.0,
        attenuation: 10.0,
        kappa: 0.5,
        speed: 0.2,
        time_scale: 5.0,
        shape_length: 5.0,
    }
}

impl DatasetSpec {
    pub fn reference(id: u32) -> Result<Self, ToyError> {
        let base = DatasetSpec {
            id,
            config: build_detector(id != 1),
            half_width: REGION_HALF_WIDTH,
            directional: false,
            topology: Topology::Cascade,
            track_length: 20.0,
            track_emitters: 20,
        };
        match id {
            1 | 2 => Ok(base),
            3 => Ok(DatasetSpec { directional: true, ..base }),
            4 => Ok(DatasetSpec { half_width: 10.0, ..base }),
            5 => Ok(DatasetSpec { topology: Topology::Track, ..base }),
            other => Err(ToyError::UnknownDataset(other)),
        }
    }

    /// Emitters `(position, direction, weight)` making up a label.
    pub fn emitters(&self, label: &Label) -> Vec<([f64; 2], [f64; 2], f64)> {
        emitters(label, self.track_length, self.track_emitters)
    }
}

fn emitters(label: &Label, track_length: f64, n: usize) -> Vec<([f64; 2], [f64; 2], f64)> {
    let dir = label.direction();
    match label.topology {
        Topology::Cascade => vec![([label.x, label.y], dir, 1.0)],
        Topology::Track => (0..n)
            .map(|i| {
                let s = (i as f64 + 0.5) * track_length / n as f64;
                ([label.x + s * dir[0], label.y + s * dir[1]], dir, 1.0 / n as f64)
            })
            .collect(),
    }
}

/// Expected photon count at one module from a point emitter.
pub fn point_yield(cfg: &DetectorConfig, pos: [f64; 2], dir: [f64; 2], module: [f64; 2], nu: f64) -> f64 {
    let dx = module[0] - pos[0];
    let dy = module[1] - pos[1];
    let d = (dx * dx + dy * dy).sqrt();
    let cos_psi = if d > 0.0 { (dx * dir[0] + dy * dir[1]) / d } else { 1.0 };
    nu * cfg.n0 * (-d / cfg.attenuation).exp() * (1.0 + cfg.kappa * cos_psi) / (1.0 + cfg.kappa)
}

/// Gamma parameters `(offset, shape, scale)` of the arrival-time law at distance `d`.
pub fn arrival_params(cfg: &DetectorConfig, d: f64) -> (f64, f64, f64) {
    let g = 1.0 + d / cfg.shape_length;
    (d / cfg.speed, g, cfg.time_scale * g)
}

/// `ln` of the shifted-gamma arrival-time density from a point emitter at distance `d`.
pub fn arrival_ln_density(cfg: &DetectorConfig, d: f64, t: f64) -> f64 {
    let (off, k, theta) = arrival_params(cfg, d);
    let u = t - off;
    if u <= 0.0 {
        return if u == 0.0 && k == 1.0 { -theta.ln() } else { f64::NEG_INFINITY };
    }
    (k - 1.0) * u.ln() - u / theta - k * theta.ln() - ln_gamma(k)
}

/// Expected photon count at module `module` for a label (summed over its emitters).
pub fn expected_yield(spec: &DatasetSpec, label: &Label, module: usize, nu: f64) -> f64 {
    let m = spec.config.modules[module];
    spec.emitters(label).iter().map(|(p, d, w)| w * point_yield(&spec.config, *p, *d, m, nu)).sum()
}

/// `ln` of the normalized arrival-time density at `module` (yield-weighted emitter mixture).
pub fn time_ln_density(spec: &DatasetSpec, label: &Label, module: usize, t: f64) -> f64 {
    let m = spec.config.modules[module];
    let parts: Vec<(f64, f64)> = spec
        .emitters(label)
        .iter()
        .map(|(p, d, w)| {
            let lam = w * point_yield(&spec.config, *p, *d, m, 1.0);
            let dist = ((m[0] - p[0]).powi(2) + (m[1] - p[1]).powi(2)).sqrt();
            (lam, arrival_ln_density(&spec.config, dist, t))
        })
        .collect();
    if parts.len() == 1 {
        return parts[0].1;
    }
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let mx = parts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + (parts.iter().map(|(l, lp)| l * (lp - mx).exp()).sum::<f64>() / total).ln()
}

/// Draws one event for a fixed label and brightness, ignoring the trigger.
pub fn sample_event<R: Rng + ?Sized>(spec: &DatasetSpec, label: &Label, nu: f64, rng: &mut R) -> Event {
    let mut hits = Vec::new();
    for (p, dir, w) in spec.emitters(label) {
        for (j, m) in spec.config.modules.iter().enumerate() {
            let lam = w * point_yield(&spec.config, p, dir, *m, nu);
            if !(lam > 0.0) {
                continue;
            }
            let n = Poisson::new(lam).map(|d| d.sample(rng) as usize).unwrap_or(0);
            if n == 0 {
                continue;
            }
            let d = ((m[0] - p[0]).powi(2) + (m[1] - p[1]).powi(2)).sqrt();
            let (off, k, theta) = arrival_params(&spec.config, d);
            let g = Gamma::new(k, theta).expect("gamma parameters are positive");
            for _ in 0..n {
                hits.push(PhotonHit { module: j, t: off + g.sample(rng) });
            }
        }
    }
    hits.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.module.cmp(&b.module)));
    Event { label: Some(*label), nu, hits }
}

/// Deterministic per-event random stream.
pub fn event_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_nu<R: Rng + ?Sized>(sys: &SystematicsSpec, rng: &mut R) -> f64 {
    if !sys.marginalize {
        return sys.nu_mean;
    }
    let n = Normal::new(sys.nu_mean, sys.nu_sd).expect("valid normal");
    loop {
        let v = n.sample(rng);
        if v > 0.0 {
            return v;
        }
    }
}

/// Draws labels (and `nu`) from the dataset's prior until an event passes the trigger.
pub fn sample_retained<R: Rng + ?Sized>(spec: &DatasetSpec, sys: &SystematicsSpec, rng: &mut R) -> Event {
    loop {
        let x = rng.gen_range(-spec.half_width..spec.half_width);
        let y = rng.gen_range(-spec.half_width..spec.half_width);
        let theta = if spec.directional { Some(rng.gen_range(0.0..2.0 * PI)) } else { None };
        let label = Label { x, y, theta, topology: spec.topology };
        let nu = draw_nu(sys, rng);
        let ev = sample_event(spec, &label, nu, rng);
        if ev.hits.len() > spec.config.threshold {
            return ev;
        }
    }
}

/// File header of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub dataset_id: u32,
    pub seed: u64,
    pub n_events: usize,
    pub systematics: SystematicsSpec,
    pub spec: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub events: Vec<Event>,
}

/// Generates `n_events` retained events of a reference dataset.
pub fn generate_dataset(
    dataset_id: u32,
    n_events: usize,
    seed: u64,
    systematics: SystematicsSpec,
) -> Result<Dataset, ToyError> {
    let spec = DatasetSpec::reference(dataset_id)?;
    spec.config.validate()?;
    if systematics.marginalize && !(systematics.nu_sd > 0.0) {
        return Err(ToyError::Config("nu_sd must be positive".into()));
    }
    let events: Vec<Event> = (0..n_events as u64)
        .into_par_iter()
        .map(|i| sample_retained(&spec, &systematics, &mut event_rng(seed, i)))
        .collect();
    Ok(Dataset {
        header: DatasetHeader {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            dataset_id,
            seed,
            n_events,
            systematics,
            spec,
        },
        events,
    })
}

impl Dataset {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ToyError> {
        serde_json::to_writer(&mut w, &self.header).map_err(|e| ToyError::Json { line: 1, source: e })?;
        writeln!(w)?;
        for (i, e) in self.events.iter().enumerate() {
            serde_json::to_writer(&mut w, e).map_err(|e| ToyError::Json { line: i + 2, source: e })?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, ToyError> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| ToyError::Schema("empty file".into()))??;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| ToyError::Schema(format!("bad header: {e}")))?;
        if header.format != FORMAT_NAME || header.version != FORMAT_VERSION {
            return Err(ToyError::Schema(format!(
                "expected {FORMAT_NAME} v{FORMAT_VERSION}, found {} v{}",
                header.format, header.version
            )));
        }
        let n_mod = header.spec.config.modules.len();
        let mut events = Vec::with_capacity(header.n_events);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ev: Event = serde_json::from_str(&line).map_err(|e| ToyError::Json { line: i + 2, source: e })?;
            if ev.hits.iter().any(|h| h.module >= n_mod || !h.t.is_finite()) {
                return Err(ToyError::Schema(format!("line {}: hit outside the detector", i + 2)));
            }
            if ev.hits.windows(2).any(|w| w[0].t > w[1].t) {
                return Err(ToyError::Schema(format!("line {}: hits not sorted by time", i + 2)));
            }
            events.push(ev);
        }
        if events.len() != header.n_events {
            return Err(ToyError::Schema(format!(
                "header announces {} events, file holds {}",
                header.n_events,
                events.len()
            )));
        }
        Ok(Dataset { header, events })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ToyError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ToyError> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}
