use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use log::info;

use lvlmc::io::{correlation_field_csv, gslib_grid, read_samples, samples_to_csv};
use lvlmc::local_model::{infer_all, infer_global, models_to_text, LocalModel};
use lvlmc::neighborhood::{Point, SpatialIndex};
use lvlmc::samples::SampleSet;
use lvlmc::simulate::{alr_samples, factor_variography, run_pipeline, CorrelationMode, PipelineOutput};
use lvlmc::synthetic::{
    accuracy_plot_data, drillhole_sample, error_metrics, generate_synthetic, holdout_split, ErrorMetrics,
};

use crate::config::RunConfig;
use crate::manifest::OutputDir;
use crate::Common;

struct Run {
    cfg: RunConfig,
    text: String,
}

fn setup(args: &Common) -> Result<Run> {
    let (mut cfg, text) = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .context("cannot configure the worker pool")?;
    Ok(Run { cfg, text })
}

fn load_samples(cfg: &RunConfig) -> Result<SampleSet> {
    let path = cfg.samples_path()?;
    Ok(read_samples(path)?)
}

fn fmt_row(out: &mut String, values: impl IntoIterator<Item = f64>, no_data: f64) {
    for v in values {
        let v = if v.is_finite() { v } else { no_data };
        let _ = write!(out, ",{v}");
    }
}

pub fn synth(args: &Common) -> Result<()> {
    let Run { cfg, text } = setup(args)?;
    let section = cfg
        .synthetic
        .clone()
        .context("config has no [synthetic] section")?;
    let mut deposit = section.deposit;
    deposit.seed = cfg.seed;
    let truth = generate_synthetic(&deposit)?;
    let holes = drillhole_sample(&truth, &deposit)?;
    let (train, test) = holdout_split(holes.samples.len(), section.holdout, cfg.seed)?;
    info!("{} samples from {} holes; {} held out", holes.samples.len(), holes.holes, test.len());

    let mut out = OutputDir::create(&cfg.out)?;
    let g = truth.grid;
    let title = format!(
        "synthetic truth {} {} {} {} {} {} {} {} {}",
        g.counts[0], g.counts[1], g.counts[2], g.origin[0], g.origin[1], g.origin[2], g.spacing[0], g.spacing[1],
        g.spacing[2]
    );
    let names: Vec<String> = ["factor_1", "factor_2", "y_1", "y_2", "v1", "v2", "rho"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut values = Vec::with_capacity(g.n_nodes() * names.len());
    for n in 0..g.n_nodes() {
        values.extend([
            truth.factors[0][n],
            truth.factors[1][n],
            truth.gaussian[0][n],
            truth.gaussian[1][n],
            truth.values[0][n],
            truth.values[1][n],
            truth.rho[n],
        ]);
    }
    out.write("truth.gslib", &gslib_grid(&title, &names, &values, cfg.no_data))?;
    out.write("grid.toml", &toml::to_string(&g)?)?;

    let mut sample_truth = String::from("sample,node,x,y,z,rho,factor_1,factor_2\n");
    for (i, &n) in holes.nodes.iter().enumerate() {
        let u = holes.samples.location(i);
        let _ = write!(sample_truth, "{i},{n},{},{},{}", u[0], u[1], u[2]);
        fmt_row(&mut sample_truth, [truth.rho[n], truth.factors[0][n], truth.factors[1][n]], cfg.no_data);
        sample_truth.push('\n');
    }
    out.write("sample_truth.csv", &sample_truth)?;
    out.write("samples.csv", &samples_to_csv(&holes.samples))?;
    out.write("train.csv", &samples_to_csv(&holes.samples.select(&train)))?;
    out.write("test.csv", &samples_to_csv(&holes.samples.select(&test)))?;
    out.finish("synth", &text, cfg.seed)
}

pub fn infer(args: &Common) -> Result<()> {
    let Run { cfg, text } = setup(args)?;
    let pipeline = cfg.pipeline();
    pipeline.validate()?;
    let raw = load_samples(&cfg)?;
    let samples = match &pipeline.alr {
        Some(a) => alr_samples(&raw, a.closure)?,
        None => raw,
    };
    let index = SpatialIndex::build(samples.locations())?;
    let models = match pipeline.correlation {
        CorrelationMode::Local => infer_all(&samples, &index, &pipeline.inference, pipeline.inference_seed())?,
        CorrelationMode::Global => infer_global(&samples, &pipeline.inference, pipeline.inference_seed())?,
    };
    let p = samples.dim();
    let factors: Vec<Vec<f64>> = (0..p).map(|f| models.iter().map(|m| m.factors[f]).collect()).collect();
    let variography = factor_variography(samples.locations(), &factors, &pipeline.variogram)?;

    let mut out = OutputDir::create(&cfg.out)?;
    out.write("local_models.txt", &models_to_text(&models))?;
    out.write("factors.csv", &factors_csv(&samples, &models, cfg.no_data))?;
    out.write("correlation_scatter.csv", &scatter_csv(&samples, &models, cfg.no_data))?;
    for (f, ev) in variography.experimental.iter().enumerate() {
        out.write(&format!("variogram_factor_{}.csv", f + 1), &ev.to_csv())?;
    }
    if let Some(pooled) = &variography.pooled {
        out.write("variogram_pooled.csv", &pooled.to_csv())?;
    }
    out.write("variogram_model.txt", &variography.model.to_text())?;
    out.finish("infer", &text, cfg.seed)
}

fn factors_csv(samples: &SampleSet, models: &[LocalModel], no_data: f64) -> String {
    let p = samples.dim();
    let mut out = String::from("sample,x,y,z");
    for v in 0..p {
        let _ = write!(out, ",y_{}", v + 1);
    }
    for f in 0..p {
        let _ = write!(out, ",factor_{}", f + 1);
    }
    out.push('\n');
    for m in models {
        let u = samples.location(m.sample);
        let _ = write!(out, "{},{},{},{}", m.sample, u[0], u[1], u[2]);
        fmt_row(&mut out, m.gaussian.iter().chain(&m.factors).copied(), no_data);
        out.push('\n');
    }
    out
}

fn scatter_csv(samples: &SampleSet, models: &[LocalModel], no_data: f64) -> String {
    let p = samples.dim();
    let mut out = String::from("sample,x,y,z");
    for i in 0..p {
        for j in (i + 1)..p {
            let _ = write!(out, ",rho_{}_{}", i + 1, j + 1);
        }
    }
    out.push_str(",shrinkage");
    for f in 0..p {
        let _ = write!(out, ",factor_variance_{}", f + 1);
    }
    out.push('\n');
    for m in models {
        let u = samples.location(m.sample);
        let _ = write!(out, "{},{},{},{}", m.sample, u[0], u[1], u[2]);
        let upper = m.correlation.upper();
        fmt_row(
            &mut out,
            upper.iter().copied().chain([m.shrinkage]).chain(m.factor_variance.iter().copied()),
            no_data,
        );
        out.push('\n');
    }
    out
}

/// Target points from the grid or from the first three columns of a CSV.
fn targets(cfg: &RunConfig) -> Result<(Vec<Point>, bool)> {
    match (&cfg.grid, &cfg.targets) {
        (Some(_), Some(_)) => bail!("config sets both `grid` and `targets`"),
        (Some(g), None) => {
            g.validate()?;
            Ok((g.nodes(), true))
        }
        (None, Some(path)) => Ok((read_points(path)?, false)),
        (None, None) => bail!("config sets neither `grid` nor `targets`"),
    }
}

fn read_points(path: &Path) -> Result<Vec<Point>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read targets {}", path.display()))?;
    let mut points = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.with_context(|| format!("{}: line {line}", path.display()))?;
        ensure!(record.len() >= 3, "{}: line {line}: expected x, y, z", path.display());
        let mut u = [0.0; 3];
        for (k, c) in u.iter_mut().enumerate() {
            *c = record[k]
                .parse()
                .with_context(|| format!("{}: line {line}: `{}`", path.display(), &record[k]))?;
        }
        points.push(u);
    }
    ensure!(!points.is_empty(), "{}: no target points", path.display());
    Ok(points)
}

pub fn simulate(args: &Common) -> Result<()> {
    let Run { cfg, text } = setup(args)?;
    let pipeline = cfg.pipeline();
    let samples = load_samples(&cfg)?;
    let (targets, on_grid) = targets(&cfg)?;
    let result = run_pipeline(&samples, &targets, &pipeline)?;
    for (stage, d) in &result.timings.entries {
        info!("{stage}: {:.3}s", d.as_secs_f64());
    }

    let mut out = OutputDir::create(&cfg.out)?;
    let names = &result.output_names;
    let width = result.realizations.len().max(1).to_string().len().max(4);
    if on_grid {
        for r in &result.realizations {
            let title = format!("realization {}", r.index + 1);
            out.write(
                &format!("realization_{:0width$}.gslib", r.index + 1),
                &gslib_grid(&title, names, &r.values, cfg.no_data),
            )?;
        }
        out.write("mean.gslib", &gslib_grid("mean of realizations", names, &result.mean_values(), cfg.no_data))?;
    } else {
        out.write("realizations.csv", &realizations_csv(&result, cfg.no_data))?;
        out.write("mean.csv", &mean_csv(&result, cfg.no_data))?;
    }
    let p = result.local_models.first().map_or(0, |m| m.correlation.dim());
    out.write("correlation_field.csv", &correlation_field_csv(&result.field, &targets, p, cfg.no_data))?;
    out.write("local_models.txt", &models_to_text(&result.local_models))?;
    out.write("variogram_model.txt", &result.variography.model.to_text())?;
    out.finish("simulate", &text, cfg.seed)
}

fn realizations_csv(result: &PipelineOutput, no_data: f64) -> String {
    let mut out = String::from("realization,node,x,y,z");
    for n in &result.output_names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    let k = result.n_outputs;
    for r in &result.realizations {
        for (node, u) in result.targets.iter().enumerate() {
            let _ = write!(out, "{},{node},{},{},{}", r.index + 1, u[0], u[1], u[2]);
            fmt_row(&mut out, r.values[node * k..(node + 1) * k].iter().copied(), no_data);
            out.push('\n');
        }
    }
    out
}

fn mean_csv(result: &PipelineOutput, no_data: f64) -> String {
    let mut out = String::from("node,x,y,z");
    for n in &result.output_names {
        let _ = write!(out, ",{n}");
    }
    out.push('\n');
    let mean = result.mean_values();
    let k = result.n_outputs;
    for (node, u) in result.targets.iter().enumerate() {
        let _ = write!(out, "{node},{},{},{}", u[0], u[1], u[2]);
        fmt_row(&mut out, mean[node * k..(node + 1) * k].iter().copied(), no_data);
        out.push('\n');
    }
    out
}

/// Realization values at point targets: `[node][variable]` lists over
/// realizations, `None` where the node carries the no-data sentinel.
struct PointRealizations {
    names: Vec<String>,
    locations: Vec<Point>,
    values: Vec<Vec<Option<Vec<f64>>>>,
}

fn read_realizations(path: &Path, no_data: f64) -> Result<PointRealizations> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read realizations {}", path.display()))?;
    let header = reader.headers()?.clone();
    ensure!(
        header.len() > 5 && &header[0] == "realization" && &header[1] == "node",
        "{}: expected header `realization,node,x,y,z,...`",
        path.display()
    );
    let names: Vec<String> = header.iter().skip(5).map(str::to_string).collect();
    let p = names.len();
    let mut locations: Vec<Point> = Vec::new();
    let mut values: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.with_context(|| format!("{}: line {line}", path.display()))?;
        let fields = record
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .with_context(|| format!("{}: line {line}", path.display()))?;
        ensure!(fields.len() == p + 5, "{}: line {line}: expected {} fields", path.display(), p + 5);
        let node = fields[1] as usize;
        if node == locations.len() {
            locations.push([fields[2], fields[3], fields[4]]);
            values.push(vec![Some(Vec::new()); p]);
        }
        ensure!(node < locations.len(), "{}: line {line}: node {node} out of order", path.display());
        for v in 0..p {
            let x = fields[5 + v];
            let slot = &mut values[node][v];
            if x == no_data {
                *slot = None;
            } else if let Some(list) = slot {
                list.push(x);
            }
        }
    }
    ensure!(!locations.is_empty(), "{}: no realization rows", path.display());
    Ok(PointRealizations {
        names,
        locations,
        values,
    })
}

struct MethodScores {
    label: String,
    metrics: Vec<ErrorMetrics>,
    accuracy: Vec<Vec<(f64, f64)>>,
    used: Vec<usize>,
}

fn score(label: &str, truth: &SampleSet, real: &PointRealizations) -> Result<MethodScores> {
    ensure!(
        real.locations.len() == truth.len(),
        "{label}: {} nodes in realizations, {} truth samples",
        real.locations.len(),
        truth.len()
    );
    ensure!(real.names.len() == truth.dim(), "{label}: variable count differs from truth");
    for (i, u) in real.locations.iter().enumerate() {
        let t = truth.location(i);
        let close = (0..3).all(|k| (u[k] - t[k]).abs() <= 1e-6 * (1.0 + t[k].abs()));
        ensure!(close, "{label}: node {i} does not match truth location");
    }
    let mut metrics = Vec::new();
    let mut accuracy = Vec::new();
    let mut used = Vec::new();
    for v in 0..truth.dim() {
        let mut predicted = Vec::new();
        let mut observed = Vec::new();
        let mut ensembles = Vec::new();
        for node in 0..truth.len() {
            if let Some(list) = &real.values[node][v] {
                predicted.push(list.iter().sum::<f64>() / list.len() as f64);
                observed.push(truth.value(node, v));
                ensembles.push(list.clone());
            }
        }
        metrics.push(error_metrics(&predicted, &observed)?);
        accuracy.push(accuracy_plot_data(&ensembles, &observed)?);
        used.push(predicted.len());
    }
    Ok(MethodScores {
        label: label.to_string(),
        metrics,
        accuracy,
        used,
    })
}

pub fn validate(args: &Common) -> Result<()> {
    let Run { cfg, text } = setup(args)?;
    let section = cfg.validate.clone().context("config has no [validate] section")?;
    let truth = read_samples(&section.truth)?;
    let mut methods = vec![score("model", &truth, &read_realizations(&section.realizations, cfg.no_data)?)?];
    if let Some(b) = &section.baseline {
        methods.push(score("baseline", &truth, &read_realizations(b, cfg.no_data)?)?);
    }
    let names = truth.names();

    let mut table = String::from("method,variable,nodes,me,mae,rmse\n");
    let mut plot = String::from("method,variable,nominal,observed\n");
    let mut report = String::new();
    let _ = writeln!(report, "{:<10} {:<12} {:>8} {:>14} {:>14} {:>14}", "method", "variable", "nodes", "ME", "MAE", "RMSE");
    for m in &methods {
        for (v, e) in m.metrics.iter().enumerate() {
            let _ = writeln!(table, "{},{},{},{},{},{}", m.label, names[v], m.used[v], e.me, e.mae, e.rmse);
            let _ = writeln!(
                report,
                "{:<10} {:<12} {:>8} {:>14.6} {:>14.6} {:>14.6}",
                m.label, names[v], m.used[v], e.me, e.mae, e.rmse
            );
            for (nominal, observed) in &m.accuracy[v] {
                let _ = writeln!(plot, "{},{},{nominal},{observed}", m.label, names[v]);
            }
        }
    }
    let mut out = OutputDir::create(&cfg.out)?;
    out.write("validation.csv", &table)?;
    out.write("accuracy.csv", &plot)?;
    out.write("report.txt", &report)?;
    print!("{report}");
    out.finish("validate", &text, cfg.seed)
}
