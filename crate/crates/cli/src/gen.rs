use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use flowpost::toymc::{generate_dataset, SystematicsSpec};

use crate::failure::Failure;
use crate::manifest::{manifest_path, tmp_sibling, Recorder};

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// Reference dataset id.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=5))]
    pub dataset: u32,
    /// Number of retained events.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Draw a brightness factor per event (marginalized systematics).
    #[arg(long)]
    pub marginalize: bool,
    /// Relative width of the brightness factor.
    #[arg(long, default_value_t = 0.5)]
    pub nu_sd: f64,
    /// Fraction of events whose label is removed, spread evenly over the file.
    #[arg(long, default_value_t = 0.0)]
    pub strip_labels: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Event `i` loses its label when `floor((i + 1) f) > floor(i f)`, which strips exactly
/// `floor(n f)` labels.
pub fn stripped(i: usize, f: f64) -> bool {
    ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
}

pub fn run(a: &GenArgs, threads: usize) -> Result<(), Failure> {
    if !(0.0..=1.0).contains(&a.strip_labels) {
        return Err(Failure::Usage(format!("--strip-labels must lie in [0, 1], got {}", a.strip_labels)));
    }
    if a.n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let mut rec = Recorder::new("gen", threads);
    rec.config(a);
    rec.seed(a.seed);
    let sys = SystematicsSpec { marginalize: a.marginalize, nu_sd: a.nu_sd, ..Default::default() };
    let mut data = generate_dataset(a.dataset, a.n, a.seed, sys)?;
    let mut n_stripped = 0;
    for (i, ev) in data.events.iter_mut().enumerate() {
        if stripped(i, a.strip_labels) {
            ev.label = None;
            n_stripped += 1;
        }
    }
    crate::ensure_parent(&a.out)?;
    let tmp = tmp_sibling(&a.out);
    data.save(&tmp)?;
    std::fs::rename(&tmp, &a.out).map_err(|e| Failure::io(&a.out, e))?;
    rec.output(&a.out);
    rec.finish(&manifest_path(&a.out))?;
    println!("wrote {} events of dataset {} to {} ({} unlabeled)", a.n, a.dataset, a.out.display(), n_stripped);
    Ok(())
}
