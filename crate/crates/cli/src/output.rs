//! Artifact writing. Every artifact carries the tool name, version, command
//! and the fully resolved configuration: JSON files in an envelope, CSV files
//! in leading `#` lines, SVG files in a leading comment.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{CliError, Format, TOOL, VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Json,
    Csv,
    Svg,
}

/// Where one command writes, and what it stamps into every file.
pub struct Sink {
    pub command: String,
    config: Value,
    targets: Vec<(Kind, PathBuf)>,
    written: Vec<PathBuf>,
}

impl Sink {
    /// Targets come from `cfg.outputs` when given (relative paths land in
    /// `out_dir`), otherwise `<stem>.json`, `<stem>.csv` per `format` plus
    /// `<stem>.svg`.
    pub fn new(command: &str, cfg: &RunConfig, out_dir: &Path, format: Format, stem: &str) -> Result<Self, CliError> {
        let targets = if cfg.outputs.is_empty() {
            let mut t = vec![];
            if format.json() {
                t.push((Kind::Json, out_dir.join(format!("{stem}.json"))));
            }
            if format.csv() {
                t.push((Kind::Csv, out_dir.join(format!("{stem}.csv"))));
            }
            t.push((Kind::Svg, out_dir.join(format!("{stem}.svg"))));
            t
        } else {
            cfg.outputs
                .iter()
                .map(|o| {
                    let kind = match Path::new(o).extension().and_then(|e| e.to_str()) {
                        Some("json") => Kind::Json,
                        Some("csv") => Kind::Csv,
                        _ => Kind::Svg,
                    };
                    (kind, out_dir.join(o))
                })
                .collect()
        };
        fs::create_dir_all(out_dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", out_dir.display())))?;
        let config = serde_json::to_value(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(Self { command: command.to_string(), config, targets, written: vec![] })
    }

    pub fn paths(&self, kind: Kind) -> Vec<PathBuf> {
        self.targets.iter().filter(|(k, _)| *k == kind).map(|(_, p)| p.clone()).collect()
    }

    pub fn written(self) -> Vec<PathBuf> {
        self.written
    }

    fn provenance(&self) -> String {
        format!("{TOOL} {VERSION} {}", self.command)
    }

    pub fn json(&mut self, result: impl Serialize) -> Result<(), CliError> {
        let doc = json!({
            "tool": {"name": TOOL, "version": VERSION},
            "command": self.command,
            "config": self.config,
            "result": serde_json::to_value(result).map_err(|e| CliError::Numerical(e.to_string()))?,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        for p in self.paths(Kind::Json) {
            write(&p, text.as_bytes())?;
            self.written.push(p);
        }
        Ok(())
    }

    /// Writes `rows` under `header` to every CSV target, with `tag` appended to
    /// the file stem when given.
    pub fn csv(&mut self, tag: Option<&str>, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        for p in self.paths(Kind::Csv) {
            let p = tag.map_or(p.clone(), |t| suffixed(&p, t));
            let mut w = csv::Writer::from_writer(vec![]);
            w.write_record(header).and_then(|_| rows.iter().try_for_each(|r| w.write_record(r))).map_err(|e| CliError::Input(e.to_string()))?;
            let body = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
            let mut out = format!("# {}\n# config: {}\n", self.provenance(), self.config).into_bytes();
            out.extend(body);
            write(&p, &out)?;
            self.written.push(p);
        }
        Ok(())
    }

    /// Renders the plot to every SVG target. Plot failures are reported and
    /// skipped.
    pub fn svg(&mut self, plot: &Plot) {
        for p in self.paths(Kind::Svg) {
            match plot.render() {
                Ok(svg) => {
                    let note = format!("<!-- {} config: {} -->\n", self.provenance(), self.config.to_string().replace("--", "- -"));
                    let text = match svg.strip_prefix("<?xml") {
                        Some(_) => {
                            let cut = svg.find('\n').map_or(svg.len(), |i| i + 1);
                            format!("{}{note}{}", &svg[..cut], &svg[cut..])
                        }
                        None => format!("{note}{svg}"),
                    };
                    match fs::write(&p, text) {
                        Ok(()) => self.written.push(p),
                        Err(e) => eprintln!("phasetrack: plot {} skipped: {e}", p.display()),
                    }
                }
                Err(e) => eprintln!("phasetrack: plot {} skipped: {e}", p.display()),
            }
        }
    }
}

fn write(p: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(p, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display())))
}

/// `dir/name.ext` → `dir/name_tag.ext`.
pub fn suffixed(p: &Path, tag: &str) -> PathBuf {
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let name = match p.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}_{tag}.{ext}"),
        None => format!("{stem}_{tag}"),
    };
    p.with_file_name(name)
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; log axes plot `log10` of the values.
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl Plot {
    fn transformed(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        let t = |v: f64, log: bool| if log { (v > 0.0).then(|| v.log10()) } else { Some(v) };
        self.series
            .iter()
            .map(|s| {
                let pts = s
                    .points
                    .iter()
                    .filter_map(|&(x, y)| Some((t(x, self.log_x)?, t(y, self.log_y)?)))
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .collect();
                (s.label.clone(), pts)
            })
            .collect()
    }

    pub fn render(&self) -> Result<String, String> {
        let data = self.transformed();
        let all: Vec<(f64, f64)> = data.iter().flat_map(|(_, p)| p.iter().copied()).collect();
        if all.is_empty() {
            return Err("nothing to plot".into());
        }
        let span = |v: Vec<f64>| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
            (lo - pad)..(hi + pad)
        };
        let xr = span(all.iter().map(|p| p.0).collect());
        let yr = span(all.iter().map(|p| p.1).collect());
        let label = |l: &str, log: bool| if log { format!("log10 {l}") } else { l.to_string() };
        let mut buf = String::new();
        {
            let root = SVGBackend::with_string(&mut buf, (800, 560)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| e.to_string())?;
            let mut chart = ChartBuilder::on(&root)
                .caption(&self.title, ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(40)
                .y_label_area_size(60)
                .build_cartesian_2d(xr, yr)
                .map_err(|e| e.to_string())?;
            chart
                .configure_mesh()
                .x_desc(label(&self.x_label, self.log_x))
                .y_desc(label(&self.y_label, self.log_y))
                .draw()
                .map_err(|e| e.to_string())?;
            for (i, (name, pts)) in data.into_iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                chart
                    .draw_series(LineSeries::new(pts, color.stroke_width(2)))
                    .map_err(|e| e.to_string())?
                    .label(name)
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            }
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(|e| e.to_string())?;
            root.present().map_err(|e| e.to_string())?;
        }
        Ok(buf)
    }
}
