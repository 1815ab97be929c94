//! `mvps`: dataset generation, training, sampling, evaluation and attention
//! visualization.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mvps_core::candle_core::DType;
use mvps_core::dataio::{load_checkpoint, load_manifest, save_checkpoint, SampleRecord};
use mvps_core::geo::{haversine_distance, GeoLocation};
use mvps_core::imageops::{load_rgb, resize_rgb, save_rgb};
use mvps_core::metrics::{fid, FeatureExtractor, MetricReport, ToyExtractor};
use mvps_core::pipeline::{
    debug_features, export_attention, model_from_checkpoint, prepare_at, prepare_sample, PreparedSample, Trainer,
};
use mvps_core::synthworld::make_dataset;
use mvps_core::viz::{global_attention_figure, local_attention_figure};
use mvps_core::{Error as CoreError, RunConfig};
use serde_json::json;

/// Validation failure; exits with code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "mvps", version, about = "Mixed-view panorama synthesis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train the model on a manifest.
    Train(TrainArgs),
    /// Synthesize panoramas from a checkpoint.
    Sample(SampleArgs),
    /// Score predicted panoramas against ground truth.
    Eval(EvalArgs),
    /// Write attention heatmaps for a record.
    VizAttn(VizArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration (overrides --preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: tiny or default.
    #[arg(long, default_value = "tiny")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?),
            None => Ok(RunConfig::preset(&self.preset)?),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes (one record each).
    #[arg(long)]
    scenes: usize,
    /// Street panoramas per scene.
    #[arg(long, default_value_t = 8)]
    panos: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory for checkpoints, config and loss log.
    #[arg(long)]
    out: PathBuf,
    /// Total optimizer steps (defaults to the config value).
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint interval in steps (defaults to the config value).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Replace an existing run directory.
    #[arg(long, conflicts_with = "resume")]
    force: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Record ids to synthesize (repeatable).
    #[arg(long = "record")]
    records: Vec<String>,
    /// Target location as LAT,LON inside some record's footprint (repeatable).
    #[arg(long = "location", value_parser = parse_location)]
    locations: Vec<GeoLocation>,
    #[arg(long)]
    out: PathBuf,
    /// DDIM steps.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long = "cfg", default_value_t = 7.5)]
    cfg_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write latent masks and fusion features as .npy files here.
    #[arg(long)]
    dump_features: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding `<record id>.png` predictions.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output path stem; writes `.csv` and `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    record: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_location(s: &str) -> std::result::Result<GeoLocation, String> {
    let (a, b) = s.split_once(',').ok_or("expected LAT,LON")?;
    let lat: f64 = a.trim().parse().map_err(|e| format!("bad latitude: {e}"))?;
    let lon: f64 = b.trim().parse().map_err(|e| format!("bad longitude: {e}"))?;
    GeoLocation::new(lat, lon).map_err(|e| e.to_string())
}

fn check_device() -> Result<()> {
    match std::env::var("MVPS_DEVICE").as_deref() {
        Err(_) | Ok("") | Ok("cpu") => Ok(()),
        Ok(other) => Err(usage(format!("MVPS_DEVICE={other} is not available in this build (use cpu)"))),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    let cfg = a.config.load()?;
    let summary = make_dataset(a.scenes, a.panos, a.seed, &a.out, &cfg)?;
    println!("{}", summary.manifest_path.display());
    Ok(())
}

fn load_samples(manifest: &Path, cfg: &RunConfig) -> Result<Vec<PreparedSample>> {
    let records = load_manifest(manifest)?;
    if records.is_empty() {
        return Err(usage(format!("{} has no records", manifest.display())));
    }
    records.iter().map(|r| Ok(prepare_sample(r, cfg)?)).collect()
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let d = dir.join("checkpoints");
    if !d.is_dir() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&d)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Exclusive lock on a run directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let p = dir.join("train.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .with_context(|| format!("run directory {} is locked by another process ({})", dir.display(), p.display()))?;
        Ok(RunLock(p))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn train(a: &TrainArgs) -> Result<()> {
    let existing = latest_checkpoint(&a.out)?;
    if a.out.join("loss.jsonl").exists() || existing.is_some() {
        if a.force {
            for sub in ["checkpoints", "loss.jsonl", "config.toml"] {
                let p = a.out.join(sub);
                if p.is_dir() {
                    fs::remove_dir_all(&p)?;
                } else if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
        } else if !a.resume {
            return Err(usage(format!(
                "{} already holds a run; pass --resume to continue or --force to overwrite",
                a.out.display()
            )));
        }
    }
    fs::create_dir_all(a.out.join("checkpoints"))?;
    let _lock = RunLock::acquire(&a.out)?;

    let mut trainer = match (a.resume, latest_checkpoint(&a.out)?) {
        (true, Some(p)) => {
            let ck = load_checkpoint(&p)?;
            eprintln!("resuming from {} at step {}", p.display(), ck.step);
            Trainer::from_checkpoint(&ck, DType::F32)?
        }
        (true, None) => return Err(usage(format!("--resume: no checkpoint in {}", a.out.display()))),
        (false, _) => {
            let mut cfg = a.config.load()?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            // the lr schedule anneals over the requested run length
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            Trainer::new(&cfg, DType::F32)?
        }
    };
    let cfg = trainer.model.cfg.clone();
    cfg.save(&a.out.join("config.toml"))?;
    let total = a.steps.unwrap_or(cfg.train.steps) as u64;
    let every = a.checkpoint_every.unwrap_or(cfg.train.checkpoint_every).max(1) as u64;

    let samples = load_samples(&a.manifest, &cfg)?;
    let mut log = OpenOptions::new().create(true).append(true).open(a.out.join("loss.jsonl"))?;
    let start = Instant::now();
    let mut saved = false;
    while trainer.step < total {
        let idx = trainer.batch_indices(samples.len());
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let step = trainer.step;
        let loss = trainer.train_step(&batch)?;
        let line = json!({"step": step, "loss": loss, "lr": trainer.opt.params.lr, "wall_time": start.elapsed().as_secs_f64()});
        writeln!(log, "{line}")?;
        if trainer.step % every == 0 || trainer.step == total {
            let p = checkpoint_path(&a.out, trainer.step);
            save_checkpoint(&trainer.checkpoint()?, &p)?;
            saved = true;
        }
    }
    if !saved {
        save_checkpoint(&trainer.checkpoint()?, &checkpoint_path(&a.out, trainer.step))?;
    }
    println!("{}", checkpoint_path(&a.out, trainer.step).display());
    Ok(())
}

/// Record whose footprint holds `loc`, or an error naming the nearest one.
fn record_for<'a>(records: &'a [SampleRecord], loc: GeoLocation) -> Result<&'a SampleRecord> {
    if let Some(r) = records.iter().find(|r| r.frame.contains(loc)) {
        return Ok(r);
    }
    let nearest = records
        .iter()
        .min_by(|a, b| {
            haversine_distance(a.frame.center, loc).total_cmp(&haversine_distance(b.frame.center, loc))
        })
        .ok_or_else(|| usage("manifest has no records"))?;
    Err(usage(format!(
        "location ({:.6}, {:.6}) is outside every footprint; nearest record is '{}' ({:.1} m from its center)",
        loc.lat,
        loc.lon,
        nearest.id,
        haversine_distance(nearest.frame.center, loc)
    )))
}

fn find_record<'a>(records: &'a [SampleRecord], id: &str) -> Result<&'a SampleRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| usage(format!("record '{id}' not found in manifest")))
}

fn sample(a: &SampleArgs) -> Result<()> {
    if a.records.is_empty() && a.locations.is_empty() {
        return Err(usage("give at least one --record or --location"));
    }
    if a.steps == 0 {
        return Err(usage("--steps must be at least 1"));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let cfg = &model.cfg;
    let records = load_manifest(&a.manifest)?;
    let mut jobs: Vec<(String, PreparedSample)> = Vec::new();
    for id in &a.records {
        jobs.push((id.clone(), prepare_sample(find_record(&records, id)?, cfg)?));
    }
    for (i, loc) in a.locations.iter().enumerate() {
        let r = record_for(&records, *loc)?;
        jobs.push((format!("{}_loc{i:02}", r.id), prepare_at(r, *loc, cfg)?));
    }
    fs::create_dir_all(&a.out)?;
    for (i, (name, s)) in jobs.iter().enumerate() {
        let img = model
            .sample(&[s], a.steps, a.cfg_scale, a.seed.wrapping_add(i as u64))?
            .pop()
            .ok_or_else(|| anyhow!("sampler returned no image"))?;
        let p = a.out.join(format!("{name}.png"));
        save_rgb(&img, &p)?;
        println!("{}", p.display());
        if let Some(dir) = &a.dump_features {
            fs::create_dir_all(dir)?;
            for (fname, t) in debug_features(&model, s)? {
                t.write_npy(dir.join(format!("{name}_{fname}.npy")))?;
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn eval(a: &EvalArgs) -> Result<bool> {
    let records = load_manifest(&a.manifest)?;
    let extractor = ToyExtractor::default();
    let mut rows = Vec::new();
    let (mut feats_pred, mut feats_true) = (Vec::new(), Vec::new());
    let mut all_ok = true;
    for r in &records {
        let pred_path = a.pred.join(format!("{}.png", r.id));
        let result = (|| -> Result<MetricReport> {
            if !pred_path.is_file() {
                bail!("missing prediction {}", pred_path.display());
            }
            let pred = load_rgb(&pred_path)?;
            let truth = load_rgb(&r.target_path)?;
            let rep = MetricReport::compute(&pred, &truth, Some(&extractor))?;
            feats_pred.push(extractor.pooled(&pred)?);
            feats_true.push(extractor.pooled(&truth)?);
            Ok(rep)
        })();
        match result {
            Ok(rep) => rows.push((r.id.clone(), Some(rep), String::from("ok"))),
            Err(e) => {
                all_ok = false;
                eprintln!("{}: {e:#}", r.id);
                rows.push((r.id.clone(), None, format!("{e:#}")));
            }
        }
    }
    let fid_value = if feats_pred.len() >= 2 {
        Some(fid(&feats_pred, &feats_true)?)
    } else {
        None
    };

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let ok: Vec<&MetricReport> = rows.iter().filter_map(|(_, r, _)| r.as_ref()).collect();
    let mean = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = ok.iter().filter_map(|m| f(m)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = json!({
        "psnr": mean(&|m| Some(m.psnr)),
        "ssim": mean(&|m| Some(m.ssim)),
        "lpips": mean(&|m| m.lpips),
        "rmse": mean(&|m| Some(m.rmse)),
        "fid": fid_value,
        "sd": mean(&|m| Some(m.sd)),
        "feature_extractor": extractor.name(),
    });

    let csv_path = a.out.with_extension("csv");
    let mut csv = csv::Writer::from_path(&csv_path)?;
    csv.write_record(["id", "psnr", "ssim", "lpips", "rmse", "fid", "sd", "seam", "status"])?;
    for (id, rep, status) in &rows {
        let cells: [Option<f64>; 7] = match rep {
            Some(m) => [Some(m.psnr), Some(m.ssim), m.lpips, Some(m.rmse), None, Some(m.sd), m.seam],
            None => [None; 7],
        };
        let mut rec = vec![id.clone()];
        rec.extend(cells.iter().map(|v| fmt_opt(*v)));
        rec.push(status.clone());
        csv.write_record(&rec)?;
    }
    let mut rec = vec!["mean".to_string()];
    rec.extend(["psnr", "ssim", "lpips", "rmse", "fid", "sd"].iter().map(|k| fmt_opt(summary[k].as_f64())));
    rec.extend([String::new(), String::new()]);
    csv.write_record(&rec)?;
    csv.flush()?;
    let per_image: Vec<_> = rows
        .iter()
        .map(|(id, rep, status)| json!({"id": id, "metrics": rep, "status": status}))
        .collect();
    let json_path = a.out.with_extension("json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&json!({"summary": summary, "images": per_image}))?,
    )?;
    println!("{}", csv_path.display());
    println!("{}", json_path.display());
    Ok(all_ok)
}

fn viz_attn(a: &VizArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = model_from_checkpoint(&ck)?;
    let records = load_manifest(&a.manifest)?;
    let record = find_record(&records, &a.record)?;
    let s = prepare_sample(record, &model.cfg)?;
    let maps = export_attention(&model, &s)?;
    fs::create_dir_all(&a.out)?;

    let mut local_json = Vec::new();
    for (k, (h, w, values)) in maps.local.iter().enumerate() {
        let pano = load_rgb(&record.panoramas[k].path)?;
        let fig = local_attention_figure(&pano, values, *h, *w, k)?;
        let p = a.out.join(format!("local_{}.png", k + 1));
        save_rgb(&fig, &p)?;
        println!("{}", p.display());
        local_json.push(json!({"panorama": record.panoramas[k].path, "height": h, "width": w, "values": values}));
    }
    let sat = load_rgb(&record.satellite_path)?;
    let (size, global) = &maps.global;
    let n_panos = s.attention_panos.len().min(model.cfg.data.attention_set);
    let locs: Vec<GeoLocation> = record.panoramas.iter().take(n_panos).map(|p| p.location).collect();
    let sat = if sat.width() as usize != *size {
        resize_rgb(&sat, *size as u32, *size as u32, model.cfg.data.resize_filter)
    } else {
        sat
    };
    let (fig, markers) = global_attention_figure(&sat, global, *size, &record.frame, record.target, &locs)?;
    let p = a.out.join("global.png");
    save_rgb(&fig, &p)?;
    println!("{}", p.display());
    let marker_json: Vec<_> = markers
        .iter()
        .map(|m| json!({"row": m.row, "col": m.col, "color": m.color}))
        .collect();
    let raw = json!({
        "record": record.id,
        "local": local_json,
        "global": {"size": size, "values": global},
        "markers": marker_json,
    });
    let p = a.out.join("attention.json");
    fs::write(&p, serde_json::to_string(&raw)?)?;
    println!("{}", p.display());
    Ok(())
}

fn is_usage(e: &anyhow::Error) -> bool {
    if e.downcast_ref::<Usage>().is_some() {
        return true;
    }
    matches!(
        e.downcast_ref::<CoreError>(),
        Some(CoreError::Config(_) | CoreError::Param(_) | CoreError::OutOfFootprint { .. } | CoreError::InvalidLocation { .. })
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = check_device().and_then(|_| match &cli.cmd {
        Cmd::GenData(a) => gen_data(a).map(|_| true),
        Cmd::Train(a) => train(a).map(|_| true),
        Cmd::Sample(a) => sample(a).map(|_| true),
        Cmd::Eval(a) => eval(a),
        Cmd::VizAttn(a) => viz_attn(a).map(|_| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
