use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use affectflow::affectmodel::{train_resume, Checkpoint, SolveMode, StopReason, TrajectorySample};
use affectflow::annotate::NUM_EMOTIONS;
use affectflow::cemoflow::{format_float, summary_stats};
use affectflow::pipeline::{self, Dataset, STATS_FILE};
use affectflow::steering::{write_steering_jsonl, AnchorSet};
use anyhow::{anyhow, bail, Context, Result};

use crate::config::PipelineConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn mode_name(mode: SolveMode) -> &'static str {
    match mode {
        SolveMode::Fixed => "fixed",
        SolveMode::Adaptive => "adaptive",
    }
}

fn ensure_out(cfg: &PipelineConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(cfg: &PipelineConfig, input: Option<&Path>) -> Result<Dataset> {
    let path = cfg.dataset_path(input);
    Dataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(cfg: &PipelineConfig, path: Option<PathBuf>) -> Result<Checkpoint> {
    let path = path.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn build(cfg: &PipelineConfig, input: Option<&Path>, annotations: Option<PathBuf>) -> Result<()> {
    let mut bc = cfg.build.clone();
    if let Some(p) = input {
        bc.corpus = p.to_path_buf();
    }
    if annotations.is_some() {
        bc.annotations = annotations;
    }
    if bc.corpus.as_os_str().is_empty() {
        bail!("build: no corpus given (use --input or [build] corpus)");
    }
    for path in std::iter::once(&bc.corpus).chain(bc.annotations.as_ref()) {
        if !path.exists() {
            bail!("build: input file not found: {}", path.display());
        }
    }
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("build: starting async runtime")?;
    let out = rt.block_on(pipeline::build(&bc)).context("build")?;
    let path = pipeline::write_build_outputs(&cfg.out, &out, cfg.format).context("build: writing outputs")?;
    println!(
        "wrote {} rows in {} segments to {}",
        out.rows.len(),
        out.segments.len(),
        path.display()
    );
    Ok(())
}

pub fn train(
    cfg: &PipelineConfig,
    input: Option<&Path>,
    resume: Option<PathBuf>,
    max_steps: Option<usize>,
) -> Result<()> {
    let ds = load_dataset(cfg, input).context("train")?;
    let segments = ds.training_segments();
    if segments.iter().all(|s| s.is_empty()) {
        bail!("train: dataset has no usable segments");
    }
    let mut tcfg = cfg.train.clone();
    if let Some(m) = max_steps {
        tcfg.max_steps = m;
    }
    let (resume_state, scale) = match resume {
        Some(path) => {
            let ck = load_checkpoint(cfg, Some(path)).context("train")?;
            (Some(ck.resume_state()), ck.time_scale)
        }
        None => (None, pipeline::time_scale(&segments)),
    };
    let samples: Vec<Vec<TrajectorySample>> = segments
        .iter()
        .map(|s| pipeline::samples_from_rows(s, scale, tcfg.lagged_emotions))
        .collect();
    let outcome = train_resume(&samples, &tcfg, resume_state).context("train")?;
    let out = ensure_out(cfg)?;
    Checkpoint::from_outcome(&outcome, &tcfg, scale)
        .save(out.join(CHECKPOINT_FILE))
        .context("train: writing checkpoint")?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.state.history.iter().enumerate() {
        writeln!(csv, "{i},{}", format_float(*l)).expect("writing to a String");
    }
    write_text(&out.join("loss_history.csv"), &csv)?;
    let last = outcome.state.history.last().copied().unwrap_or(f64::NAN);
    let how = match outcome.stop {
        StopReason::EarlyStop => "early stopping",
        StopReason::MaxSteps => "max_steps",
    };
    log::info!("training ended by {how}");
    println!(
        "stopped by {how} after {} steps, final loss {last:.6e}",
        outcome.state.history.len()
    );
    Ok(())
}

pub fn infer(cfg: &PipelineConfig, input: Option<&Path>, checkpoint: Option<PathBuf>, segment: usize) -> Result<()> {
    let ck = load_checkpoint(cfg, checkpoint).context("infer")?;
    let ds = load_dataset(cfg, input).context("infer")?;
    let rows = ds
        .segment(segment)
        .ok_or_else(|| anyhow!("infer: unknown segment {segment} (dataset has {})", ds.ranges.len()))?;
    let (_, traj) = pipeline::infer(&ck, rows, cfg.mode).context("infer")?;
    let out = ensure_out(cfg)?;
    let name = mode_name(cfg.mode);
    let mut csv = String::from("t_tilde,e0,e1,e2,e3,e4,e5\n");
    for (row, y) in rows.iter().zip(&traj.predictions) {
        let vals: Vec<String> = std::iter::once(row.t_tilde)
            .chain(y.0)
            .map(format_float)
            .collect();
        csv.push_str(&vals.join(","));
        csv.push('\n');
    }
    write_text(&out.join(format!("predictions_seg{segment}_{name}.csv")), &csv)?;
    let summary = serde_json::json!({
        "segment": segment,
        "mode": name,
        "samples": traj.predictions.len(),
        "nfe": traj.nfe,
    });
    pipeline::write_json(&out.join(format!("infer_seg{segment}_{name}.json")), &summary)?;
    println!(
        "segment {segment}: {} samples, mode {name}, nfe {}",
        traj.predictions.len(),
        traj.nfe
    );
    Ok(())
}

pub fn export_steering(
    cfg: &PipelineConfig,
    input: Option<&Path>,
    checkpoint: Option<PathBuf>,
    anchors: Option<PathBuf>,
    lambda_base: Option<f64>,
    segment: Option<usize>,
) -> Result<()> {
    let anchors_path = anchors
        .or_else(|| cfg.steering.anchors.clone())
        .ok_or_else(|| anyhow!("export-steering: no anchors file (use --anchors or [steering] anchors)"))?;
    let anchors = AnchorSet::read_csv(&anchors_path)
        .with_context(|| format!("export-steering: reading anchors {}", anchors_path.display()))?;
    let ck = load_checkpoint(cfg, checkpoint).context("export-steering")?;
    let ds = load_dataset(cfg, input).context("export-steering")?;
    let lambda = lambda_base.unwrap_or(cfg.steering.lambda_base);
    let indices: Vec<usize> = match segment {
        Some(i) if i < ds.ranges.len() => vec![i],
        Some(i) => bail!("export-steering: unknown segment {i} (dataset has {})", ds.ranges.len()),
        None => (0..ds.ranges.len()).collect(),
    };
    let mut records = Vec::new();
    for i in indices {
        let rows = ds.segment(i).expect("index checked above");
        records.extend(
            pipeline::steering_records(&ck, rows, &anchors, lambda, cfg.mode)
                .with_context(|| format!("export-steering: segment {i}"))?,
        );
    }
    let out = ensure_out(cfg)?;
    let n = write_steering_jsonl(&records, out.join("steering.jsonl")).context("export-steering")?;
    println!("wrote {n} steering records");
    Ok(())
}

pub fn plotdata(cfg: &PipelineConfig, input: Option<&Path>, samples: Option<usize>) -> Result<()> {
    let ds = load_dataset(cfg, input).context("plotdata")?;
    let count = samples.or(cfg.plotdata.samples);
    let series = pipeline::plot_points(&ds.rows, count, cfg.seed).context("plotdata")?;
    let out = ensure_out(cfg)?;
    for (j, points) in series.iter().enumerate().take(NUM_EMOTIONS) {
        let mut csv = String::from("angle,value,delta\n");
        for p in points {
            writeln!(
                csv,
                "{},{},{}",
                format_float(p.angle),
                format_float(p.value),
                format_float(p.delta_mag)
            )
            .expect("writing to a String");
        }
        write_text(&out.join(format!("plot_e{j}.csv")), &csv)?;
    }
    println!("wrote {} points per emotion", series[0].len());
    Ok(())
}

pub fn stats(cfg: &PipelineConfig, input: Option<&Path>) -> Result<()> {
    let ds = load_dataset(cfg, input).context("stats")?;
    let stats = summary_stats(&ds.rows).context("stats")?;
    let out = ensure_out(cfg)?;
    pipeline::write_json(&out.join(STATS_FILE), &stats).context("stats")?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}
