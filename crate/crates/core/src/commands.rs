//! File-level pipeline steps behind the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use crate::boundary;
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalReport};
use crate::formats;
use crate::gradcheck::{self, GradCheck};
use crate::raster::Image;
use crate::synthdata::{self, SampleConfig, SceneSample};
use crate::trainer::{self, FlowModel, TrainLog};

/// Relative error bound for the gradient suite.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const HISTOGRAM_BINS: usize = 20;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn checkpoint_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

/// Generates `samples` scenes and writes them as a dataset directory.
pub fn synth(out: &Path, samples: usize, seed: u64, sample_cfg: &SampleConfig) -> Result<Vec<SceneSample>> {
    if samples == 0 {
        return Err(Error::arg("synth needs at least one sample"));
    }
    let data = synthdata::generate_dataset(seed, samples, sample_cfg)?;
    synthdata::write_dataset(&data, out)?;
    Ok(data)
}

/// Parses `1`, `2`, `3` or an inclusive range such as `1..3`.
pub fn parse_stages(text: &str) -> Result<Vec<u8>> {
    let bad = || Error::arg(format!("stage must be 1, 2, 3 or a range like 1..3, got '{text}'"));
    let one = |s: &str| -> Result<u8> {
        match s.trim().parse::<u8>() {
            Ok(v @ 1..=3) => Ok(v),
            _ => Err(bad()),
        }
    };
    match text.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (one(a)?, one(b.trim_start_matches('='))?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![one(text)?]),
    }
}

/// Model evaluated after a stage finishes.
pub fn stage_model(stage: u8) -> FlowModel {
    match stage {
        1 => FlowModel::Day,
        _ => FlowModel::Night,
    }
}

pub struct TrainRun {
    pub stages: Vec<u8>,
    pub logs: Vec<TrainLog>,
    pub report: EvalReport,
}

/// Trains the listed stages in order, chaining checkpoints through `out`.
///
/// A stage after the first listed one uses the checkpoint just produced;
/// otherwise `from` or `out/stage{s-1}.ckpt` is loaded. Writes one
/// checkpoint and one CSV log per stage plus `report.json` for the last one.
pub fn train(
    data: &[SceneSample],
    holdout: &[SceneSample],
    stages: &[u8],
    from: Option<&Path>,
    out: &Path,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(Error::arg("no stage to train"));
    }
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let mut prev: Option<Checkpoint> = None;
    if stages[0] > 1 {
        let path = from.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(out, stages[0] - 1));
        prev = Some(Checkpoint::load(&path)?);
    }
    let mut logs = Vec::new();
    for &s in stages {
        let o = trainer::run_stage(s, data, holdout, prev.as_ref(), cfg)?;
        o.checkpoint.save(&checkpoint_path(out, s))?;
        write_text(&out.join(format!("stage{s}_log.csv")), &o.log.to_csv())?;
        logs.push(o.log);
        prev = Some(o.checkpoint);
    }
    let last = *stages.last().expect("non-empty");
    let ckpt = prev.expect("at least one stage ran");
    let scored = if holdout.is_empty() { data } else { holdout };
    let report = trainer::evaluate_model(&ckpt.params, stage_model(last), scored, cfg)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    Ok(TrainRun {
        stages: stages.to_vec(),
        logs,
        report,
    })
}

/// Scores a checkpoint, or `.flo` predictions named `<sample id>.flo`.
pub fn eval(
    data_dir: &Path,
    source: &EvalSource,
    out: &Path,
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    let data = synthdata::read_dataset(data_dir)?;
    let report = match source {
        EvalSource::Checkpoint { path, model } => {
            let ckpt = Checkpoint::load(path)?;
            trainer::evaluate_model(&ckpt.params, *model, &data, cfg)?
        }
        EvalSource::Predictions(dir) => {
            let items = data
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let id = synthdata::sample_id(i);
                    let flow = formats::read_flo(&dir.join(format!("{id}.flo")))?;
                    Ok((id, flow, s.gt_flow.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate::build_report("predictions", "files", &items)?
        }
    };
    create_dir(out)?;
    write_text(&out.join("report.json"), &report.to_json())?;
    write_text(&out.join("report.csv"), &report.to_csv())?;
    Ok(report)
}

pub enum EvalSource {
    Checkpoint { path: PathBuf, model: FlowModel },
    Predictions(PathBuf),
}

/// Maps a correlation map in `[0, 1]` to a blue-white-red image.
pub fn correlation_to_color(corr: &crate::tensor::Tensor) -> Result<Image> {
    let (_, h, w) = corr.chw();
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, &c) in corr.data().iter().enumerate() {
        let t = c.clamp(0.0, 1.0) * 2.0 - 1.0;
        let (r, g, b) = if t < 0.0 { (1.0 + t, 1.0 + t, 1.0) } else { (1.0, 1.0 - t, 1.0 - t) };
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
    }
    Image::new(h, w, 3, data)
}

/// Bar plot of histogram counts, one column block per bin.
pub fn histogram_plot(counts: &[usize], height: usize, bar_width: usize) -> Result<Image> {
    let w = counts.len() * bar_width;
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let n = height * w;
    let mut data = vec![1.0; 3 * n];
    for (b, &c) in counts.iter().enumerate() {
        let bar = ((c as f64 / max) * height as f64).round() as usize;
        for y in height - bar..height {
            for x in b * bar_width..(b + 1) * bar_width - 1 {
                let i = y * w + x;
                data[i] = 0.2;
                data[n + i] = 0.3;
                data[2 * n + i] = 0.7;
            }
        }
    }
    Image::new(height, w, 3, data)
}

pub struct VizSummary {
    pub samples: usize,
    pub histogram: Vec<usize>,
}

/// Writes predicted and ground-truth flow colorings and correlation maps per
/// sample, and the pooled correlation histogram as CSV and PNG.
pub fn viz(
    data_dir: &Path,
    checkpoint: &Path,
    model: FlowModel,
    limit: Option<usize>,
    out: &Path,
    cfg: &TrainConfig,
) -> Result<VizSummary> {
    let data = synthdata::read_dataset(data_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let count = limit.unwrap_or(data.len()).min(data.len());
    if count == 0 {
        return Err(Error::arg("viz needs at least one sample"));
    }
    create_dir(out)?;
    let mut hist = vec![0usize; HISTOGRAM_BINS];
    let mut edges = Vec::new();
    for (i, s) in data.iter().take(count).enumerate() {
        let id = synthdata::sample_id(i);
        let flow = trainer::predict(&ckpt.params, model, s, cfg)?;
        formats::write_png8_rgb(&out.join(format!("{id}_flow.png")), &evaluate::flow_to_color(&flow)?)?;
        formats::write_png8_rgb(&out.join(format!("{id}_gt.png")), &evaluate::flow_to_color(&s.gt_flow)?)?;
        formats::write_flo(&out.join(format!("{id}.flo")), &flow)?;
        let corr = trainer::sample_correlation(s, &flow, cfg)?;
        formats::write_png8_rgb(&out.join(format!("{id}_corr.png")), &correlation_to_color(&corr)?)?;
        let (e, c) = boundary::correlation_histogram(&corr, HISTOGRAM_BINS)?;
        edges = e;
        for (h, v) in hist.iter_mut().zip(c) {
            *h += v;
        }
    }
    let mut csv = String::from("lower,upper,count\n");
    for (b, c) in hist.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", edges[b], edges[b + 1], c));
    }
    write_text(&out.join("corr_hist.csv"), &csv)?;
    formats::write_png8_rgb(&out.join("corr_hist.png"), &histogram_plot(&hist, 100, 8)?)?;
    Ok(VizSummary {
        samples: count,
        histogram: hist,
    })
}

/// Runs the gradient suite and writes its results as JSON when `out` is set.
pub fn gradcheck(seed: u64, out: Option<&Path>) -> Result<Vec<GradCheck>> {
    let results = gradcheck::run_suite(seed)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        let rows: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "name": r.name,
                    "max_rel_error": r.max_rel_error,
                    "probes": r.probes,
                    "skipped": r.skipped,
                    "passed": r.passed(GRADCHECK_TOL),
                })
            })
            .collect();
        let text = serde_json::to_string_pretty(&rows).expect("json serializes");
        write_text(&dir.join("gradcheck.json"), &text)?;
    }
    Ok(results)
}

/// Checks a report JSON against the current schema: every field present,
/// with the declared types and ranges.
pub fn validate_report_json(text: &str) -> Result<EvalReport> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::arg(format!("report is not JSON: {e}")))?;
    let obj = value.as_object().ok_or_else(|| Error::arg("report must be a JSON object"))?;
    let expected = [
        "schema_version",
        "model",
        "domain",
        "sample_count",
        "mean_epe",
        "mean_fl_all",
        "boundary_epe",
        "samples",
    ];
    for key in expected {
        if !obj.contains_key(key) {
            return Err(Error::arg(format!("report lacks field '{key}'")));
        }
    }
    if obj.len() != expected.len() {
        return Err(Error::arg("report has unexpected fields"));
    }
    let report: EvalReport =
        serde_json::from_value(value).map_err(|e| Error::arg(format!("report fields have wrong types: {e}")))?;
    if report.schema_version != evaluate::REPORT_SCHEMA_VERSION {
        return Err(Error::Version(format!("report schema {}", report.schema_version)));
    }
    if report.sample_count != report.samples.len() || report.sample_count == 0 {
        return Err(Error::arg("sample_count does not match the sample list"));
    }
    let in_range = |epe: f64, fl: f64| epe >= 0.0 && (0.0..=100.0).contains(&fl);
    if !in_range(report.mean_epe, report.mean_fl_all) || report.samples.iter().any(|s| !in_range(s.epe, s.fl_all)) {
        return Err(Error::arg("EPE must be >= 0 and Fl-all within [0, 100]"));
    }
    Ok(report)
}

