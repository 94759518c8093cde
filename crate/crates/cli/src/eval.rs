use std::collections::HashSet;
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use flowpost::calib::{coverage_curve, default_levels, histogram_svg, pvalue_histograms, write_histogram_csv};
use flowpost::condmodel::Model;
use flowpost::oracle::{posterior_grid, sample_kl_to_truth, Axis};
use flowpost::toymc::{Dataset, Event, Label, REGION_HALF_WIDTH};

use crate::failure::Failure;
use crate::manifest::{write_atomic, Recorder};

#[derive(Debug, Subcommand)]
pub enum EvalKind {
    /// Coverage curve at credibility levels 0.05 to 0.95.
    Coverage(CoverageArgs),
    /// Posterior-predictive p-values for one or more datasets.
    Gof(GofArgs),
    /// Sample-based KL divergence from the exact posterior to the model.
    Kl(KlArgs),
    /// Exact and flow posterior of one event on a shared grid.
    Scan(ScanArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Only use the first N events.
    #[arg(long)]
    pub max_events: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Also render coverage.svg.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GofArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, num_args = 1.., required = true)]
    pub datasets: Vec<PathBuf>,
    /// Report names (default: file stems).
    #[arg(long, num_args = 1..)]
    pub names: Vec<String>,
    /// Simulated events per posterior draw set.
    #[arg(long, default_value_t = 500)]
    pub n_sim: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct KlArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Grid points per position axis.
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    /// Grid points on the angle axis of directional datasets.
    #[arg(long, default_value_t = 128)]
    pub angle_grid: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub event_index: usize,
    #[arg(long, default_value_t = 200)]
    pub grid: usize,
    #[arg(long, default_value_t = 128)]
    pub angle_grid: usize,
}

pub fn run(kind: &EvalKind, threads: usize) -> Result<(), Failure> {
    match kind {
        EvalKind::Coverage(a) => coverage(a, threads),
        EvalKind::Gof(a) => gof(a, threads),
        EvalKind::Kl(a) => kl(a, threads),
        EvalKind::Scan(a) => scan(a, threads),
    }
}

struct Loaded {
    model: Model,
    rec: Recorder,
}

fn open(cmd: &str, common: &Common, threads: usize, args: &impl Serialize) -> Result<Loaded, Failure> {
    let mut rec = Recorder::new(cmd, threads);
    rec.config(args);
    let model = Model::load(&common.model)?;
    rec.input(&common.model);
    crate::ensure_dir(&common.out_dir)?;
    Ok(Loaded { model, rec })
}

/// With `same_dataset` unset only the detector layout has to match (goodness of fit is
/// meant to be run on foreign datasets).
fn load_events(
    path: &Path,
    model: &Model,
    max: Option<usize>,
    same_dataset: bool,
    rec: &mut Recorder,
) -> Result<Vec<Event>, Failure> {
    let data = Dataset::load(path)?;
    rec.input(path);
    if same_dataset
        && (data.header.spec.id != model.config.spec.id || data.header.spec.directional != model.config.spec.directional)
    {
        return Err(Failure::Data(format!(
            "{} holds dataset {}, the model was built for dataset {}",
            path.display(),
            data.header.spec.id,
            model.config.spec.id
        )));
    }
    if data.header.spec.config.modules != model.config.spec.config.modules {
        return Err(Failure::Data(format!("{}: detector layout differs from the model's", path.display())));
    }
    let mut ev = data.events;
    if let Some(m) = max {
        ev.truncate(m);
    }
    if ev.is_empty() {
        return Err(Failure::Data(format!("{} holds no events", path.display())));
    }
    Ok(ev)
}

fn axes(model: &Model, grid: usize, angle_grid: usize) -> Vec<Axis> {
    let h = REGION_HALF_WIDTH;
    let mut a = vec![Axis::new(-h, h, grid), Axis::new(-h, h, grid)];
    if model.config.spec.directional {
        a.push(Axis::angle(angle_grid));
    }
    a
}

fn coverage(a: &CoverageArgs, threads: usize) -> Result<(), Failure> {
    let Loaded { model, mut rec } = open("eval coverage", &a.common, threads, a)?;
    let events = load_events(&a.data, &model, a.common.max_events, true, &mut rec)?;
    let report = coverage_curve(&model, &events, &default_levels())?;
    let csv = a.common.out_dir.join("coverage.csv");
    report.write_csv(&csv)?;
    rec.output(&csv);
    if a.svg {
        let svg = a.common.out_dir.join("coverage.svg");
        write_atomic(&svg, report.to_svg().as_bytes())?;
        rec.output(&svg);
    }
    rec.finish(&a.common.out_dir.join("coverage.manifest.json"))?;
    println!(
        "coverage on {} events ({} failed): max deviation {:.4}",
        report.n_events,
        report.n_failed,
        report.max_deviation(|_| true)
    );
    Ok(())
}

fn unique_names(paths: &[PathBuf], given: &[String]) -> Result<Vec<String>, Failure> {
    if !given.is_empty() && given.len() != paths.len() {
        return Err(Failure::Usage(format!("{} names for {} datasets", given.len(), paths.len())));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let base = given.get(i).cloned().unwrap_or_else(|| {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("dataset{i}"))
        });
        let mut name = base.clone();
        let mut k = 1;
        while !seen.insert(name.clone()) {
            k += 1;
            name = format!("{base}_{k}");
        }
        out.push(name);
    }
    Ok(out)
}

fn gof(a: &GofArgs, threads: usize) -> Result<(), Failure> {
    if a.bins == 0 {
        return Err(Failure::Usage("--bins must be positive".into()));
    }
    let names = unique_names(&a.datasets, &a.names)?;
    let Loaded { model, mut rec } = open("eval gof", &a.common, threads, a)?;
    if !model.has_generative() {
        return Err(Failure::Data(format!("{} has no generative part", a.common.model.display())));
    }
    rec.seed(a.seed);
    let mut sets = Vec::new();
    for (p, n) in a.datasets.iter().zip(&names) {
        sets.push((n.clone(), load_events(p, &model, a.common.max_events, false, &mut rec)?));
    }
    let reports = pvalue_histograms(&model, &sets, a.n_sim, a.seed)?;
    for r in &reports {
        let p = a.common.out_dir.join(format!("gof_{}.csv", r.name));
        r.write_csv(&p)?;
        rec.output(&p);
        println!(
            "{}: {} events, fraction of p < 0.05: {:.4}, failed simulations {}",
            r.name,
            r.p_values.len(),
            r.fraction_below(0.05),
            r.n_failed
        );
    }
    let hist = a.common.out_dir.join("gof_histogram.csv");
    write_histogram_csv(&hist, &reports, a.bins)?;
    rec.output(&hist);
    if a.svg {
        let svg = a.common.out_dir.join("gof_histogram.svg");
        write_atomic(&svg, histogram_svg(&reports, a.bins).as_bytes())?;
        rec.output(&svg);
    }
    rec.finish(&a.common.out_dir.join("gof.manifest.json"))?;
    Ok(())
}

fn kl(a: &KlArgs, threads: usize) -> Result<(), Failure> {
    let Loaded { model, mut rec } = open("eval kl", &a.common, threads, a)?;
    let events = load_events(&a.data, &model, a.common.max_events, true, &mut rec)?;
    let ax = axes(&model, a.grid, a.angle_grid);
    let value = sample_kl_to_truth(&model.config.spec, &events, &ax, |_, e| {
        e.label.and_then(|l| model.posterior_log_prob(e, &l).ok()).unwrap_or(f64::NAN)
    })?;
    if !value.is_finite() {
        return Err(Failure::Numeric(format!("KL estimate is {value}")));
    }
    let p = a.common.out_dir.join("kl.csv");
    write_atomic(&p, format!("n_events,grid,kl\n{},{},{}\n", events.len(), a.grid, value).as_bytes())?;
    rec.output(&p);
    rec.finish(&a.common.out_dir.join("kl.manifest.json"))?;
    println!("KL to truth over {} events: {value:.6}", events.len());
    Ok(())
}

fn scan(a: &ScanArgs, threads: usize) -> Result<(), Failure> {
    let Loaded { model, mut rec } = open("eval scan", &a.common, threads, a)?;
    let events = load_events(&a.data, &model, None, true, &mut rec)?;
    let ev = events
        .get(a.event_index)
        .ok_or_else(|| Failure::Usage(format!("--event-index {} but the file holds {} events", a.event_index, events.len())))?;
    let ax = axes(&model, a.grid, a.angle_grid);
    let grid = posterior_grid(&model.config.spec, ev, &ax)?;
    let gp = a.common.out_dir.join("scan_grid.csv");
    grid.write_csv(&gp)?;
    rec.output(&gp);

    let post = model.posterior(ev)?;
    let topology = ev.label.map(|l| l.topology).unwrap_or(model.config.spec.topology);
    let total: usize = ax.iter().map(|a| a.n).product();
    let rows: Vec<String> = (0..total)
        .into_par_iter()
        .map(|f| {
            let mut idx = vec![0; ax.len()];
            let mut r = f;
            for k in (0..ax.len()).rev() {
                idx[k] = r % ax[k].n;
                r /= ax[k].n;
            }
            let pt: Vec<f64> = idx.iter().zip(&ax).map(|(i, a)| a.point(*i)).collect();
            let label = Label { x: pt[0], y: pt[1], theta: pt.get(2).copied(), topology };
            let lp = post.log_prob(&label).unwrap_or(f64::NEG_INFINITY);
            let coords: Vec<String> = pt.iter().map(|v| v.to_string()).collect();
            format!("{},{},{}", coords.join(","), lp, lp.exp())
        })
        .collect();
    let mut body = String::from(if ax.len() == 3 { "x,y,theta,log_density,density\n" } else { "x,y,log_density,density\n" });
    for r in rows {
        body.push_str(&r);
        body.push('\n');
    }
    let fp = a.common.out_dir.join("scan_flow.csv");
    write_atomic(&fp, body.as_bytes())?;
    rec.output(&fp);
    rec.finish(&a.common.out_dir.join("scan.manifest.json"))?;
    match ev.label {
        Some(l) => println!("event {}: true label x={:.3} y={:.3} theta={:?}", a.event_index, l.x, l.y, l.theta),
        None => println!("event {}: unlabeled", a.event_index),
    }
    Ok(())
}
