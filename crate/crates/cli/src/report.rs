//! Accuracy-versus-step curves and a final-accuracy table with deltas
//! against a baseline run.

use std::io::Write;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use procwarm::atomic;
use procwarm::trainer::{RecordKind, RunMetrics};

use crate::args::{Cli, ReportArgs};
use crate::CliError;

/// One named run, possibly averaged over several seeds.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub name: String,
    pub metrics: Vec<RunMetrics>,
}

impl RunGroup {
    /// Final top-1 (last eval record, else last train record) per seed.
    pub fn finals(&self) -> Vec<f64> {
        self.metrics
            .iter()
            .filter_map(|m| m.last(RecordKind::Eval).or(m.last(RecordKind::Train)))
            .map(|r| r.accuracy)
            .collect()
    }

    pub fn mean_final(&self) -> f64 {
        let f = self.finals();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    /// Mean curve over seeds, truncated to the shortest run.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let kind = if self
            .metrics
            .iter()
            .all(|m| m.last(RecordKind::Eval).is_some())
        {
            RecordKind::Eval
        } else {
            RecordKind::Train
        };
        let series: Vec<Vec<(u64, f64)>> = self
            .metrics
            .iter()
            .map(|m| m.of_kind(kind).map(|r| (r.step, r.accuracy)).collect())
            .collect();
        let len = series.iter().map(Vec::len).min().unwrap_or(0);
        (0..len)
            .map(|i| {
                let acc = series.iter().map(|s| s[i].1).sum::<f64>() / series.len() as f64;
                (series[0][i].0 as f64, acc)
            })
            .collect()
    }
}

/// Parse `NAME=DIR[,DIR...]` and load each run's metrics.
pub fn load_group(spec: &str) -> Result<RunGroup, CliError> {
    let (name, dirs) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected NAME=DIR, found `{spec}`")))?;
    let mut metrics = Vec::new();
    for d in dirs.split(',').filter(|d| !d.is_empty()) {
        let p = Path::new(d);
        let file = if p.is_dir() {
            p.join("metrics.jsonl")
        } else {
            p.to_path_buf()
        };
        if !file.exists() {
            return Err(CliError::Missing(format!(
                "no metrics at {}",
                file.display()
            )));
        }
        metrics.push(RunMetrics::read(&file)?);
    }
    if metrics.is_empty() {
        return Err(CliError::Usage(format!(
            "run `{name}` lists no directories"
        )));
    }
    Ok(RunGroup {
        name: name.to_string(),
        metrics,
    })
}

/// Signed percentage-point difference, e.g. `+1.72`.
pub fn format_delta(points: f64) -> String {
    format!("{points:+.2}")
}

/// Markdown table of mean final accuracies with deltas against `baseline`.
pub fn table(groups: &[RunGroup], baseline: &str) -> Result<String, CliError> {
    let base = groups
        .iter()
        .find(|g| g.name == baseline)
        .ok_or_else(|| CliError::Usage(format!("baseline `{baseline}` is not among the runs")))?
        .mean_final();
    let mut s = String::from("| run | seeds | top-1 (%) | delta |\n|---|---:|---:|---:|\n");
    for g in groups {
        let acc = 100.0 * g.mean_final();
        let delta = if g.name == baseline {
            "baseline".to_string()
        } else {
            format_delta(acc - 100.0 * base)
        };
        s.push_str(&format!(
            "| {} | {} | {acc:.2} | {delta} |\n",
            g.name,
            g.metrics.len()
        ));
    }
    Ok(s)
}

pub fn plot(groups: &[RunGroup], path: &Path) -> Result<(), CliError> {
    let err = |e: &dyn std::fmt::Display| CliError::Plot(e.to_string());
    let curves: Vec<(String, Vec<(f64, f64)>)> =
        groups.iter().map(|g| (g.name.clone(), g.curve())).collect();
    let max_step = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(16)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0..max_step, 0.0..1.0f64)
            .map_err(|e| err(&e))?;
        chart
            .configure_mesh()
            .x_desc("step")
            .y_desc("accuracy")
            .draw()
            .map_err(|e| err(&e))?;
        for (i, (name, c)) in curves.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(c.iter().copied(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    atomic::write_file(path, svg.as_bytes())?;
    Ok(())
}

pub fn report(cli: &Cli, a: &ReportArgs, out: &mut dyn Write) -> Result<PathBuf, CliError> {
    let groups = a
        .runs
        .iter()
        .map(|s| load_group(s))
        .collect::<Result<Vec<_>, _>>()?;
    let baseline = a.baseline.clone().unwrap_or_else(|| groups[0].name.clone());
    let t = table(&groups, &baseline)?;
    let dir = cli.out_dir.join(&a.name);
    std::fs::create_dir_all(&dir)?;
    atomic::write_file(&dir.join("table.md"), t.as_bytes())?;
    plot(&groups, &dir.join("curves.svg"))?;
    write!(out, "{t}")?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(dir)
}
