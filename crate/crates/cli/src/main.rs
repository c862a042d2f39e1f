use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rectisplat::checkpoint;
use rectisplat::eval::eval_run;
use rectisplat::loss::ViewRole;
use rectisplat::render::{render, save_f32, save_png, Camera};
use rectisplat::scene::{gen_scene, load_dataset, write_dataset, CameraEntry, SceneSpec};
use rectisplat::train::{Ablation, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "rectisplat", version, about = "Dynamic Gaussian splatting with temporal and spatial rectification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    None,
    Temporal,
    Spatial,
    Both,
}

impl From<AblateArg> for Ablation {
    fn from(a: AblateArg) -> Self {
        match a {
            AblateArg::None => Ablation::None,
            AblateArg::Temporal => Ablation::Temporal,
            AblateArg::Spatial => Ablation::Spatial,
            AblateArg::Both => Ablation::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    GenScene {
        #[arg(long)]
        out: PathBuf,
        /// Scene description as JSON; defaults to the sudden-appearance sphere.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file of `key = value` overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "none")]
        ablate: AblateArg,
        /// Progress CSV; defaults to `<out>.progress.csv`.
        #[arg(long)]
        progress: Option<PathBuf>,
    },
    /// Render a checkpoint from given cameras at given normalized times.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON camera, camera list, or a dataset's cameras.json.
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write lossless f32 dumps of RGB and alpha.
        #[arg(long)]
        f32: bool,
    },
    /// Per-frame point counts and the densification threshold history as CSV.
    InspectDensity {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's held-out cameras.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// `holdout`, `all`, or a comma-separated list of camera indices.
        #[arg(long, default_value = "holdout")]
        cameras: String,
        /// Per-view and per-frame metrics CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Directory for render/target comparison strips.
        #[arg(long)]
        strips: Option<PathBuf>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CameraFile {
    Entries(Vec<CameraEntry>),
    Cameras(Vec<Camera>),
    Single(Camera),
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_scene_cmd(out: &Path, spec: Option<&Path>, seed: u64) -> Result<()> {
    let spec = match spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SceneSpec::sudden_appearance(),
    };
    let ds = gen_scene(&spec, seed)?;
    write_dataset(&ds, out)?;
    println!("wrote {} cameras x {} frames to {}", ds.cameras.len(), ds.frames(), out.display());
    Ok(())
}

fn train_cmd(
    scene: &Path,
    out: &Path,
    config: Option<&Path>,
    seed: u64,
    ablate: Ablation,
    progress: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    }
    .with_ablation(ablate);
    let ds = load_dataset(scene).with_context(|| format!("loading {}", scene.display()))?;
    let dump = sibling(out, ".dump");
    let mut trainer = Trainer::new(&ds, cfg, seed)?;
    trainer.train_static(Some(&dump))?;
    trainer.train_dynamic(Some(&dump))?;
    let outcome = trainer.finish();
    checkpoint::save(out, &outcome.model, &outcome.provenance())?;
    let progress = progress.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, ".progress.csv"));
    write_csv(&progress, &outcome.progress)?;
    let counts = outcome.model.counts();
    println!(
        "trained {} steps; {} canonical points; per-frame counts {:?}; checkpoint {}",
        outcome.steps,
        outcome.model.cloud.len(),
        counts,
        out.display()
    );
    Ok(())
}

fn render_cmd(ckpt: &Path, cameras: &Path, times: &[f64], out: &Path, dump_f32: bool) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let cams: Vec<Camera> = match serde_json::from_str(&std::fs::read_to_string(cameras)?)
        .with_context(|| format!("parsing {}", cameras.display()))?
    {
        CameraFile::Entries(e) => e.into_iter().map(|c| c.camera).collect(),
        CameraFile::Cameras(c) => c,
        CameraFile::Single(c) => vec![c],
    };
    for c in &cams {
        c.validate()?;
    }
    std::fs::create_dir_all(out)?;
    for &t in times {
        let attrs = model.attributes_at(t)?;
        for (i, cam) in cams.iter().enumerate() {
            let (img, _) = render(&attrs, cam, &meta.render)?;
            let stem = format!("cam{i}_t{t:.4}");
            save_png(&out.join(format!("{stem}.png")), &img.rgb, img.width, img.height)?;
            if dump_f32 {
                save_f32(&out.join(format!("{stem}.rgb.f32")), &img.rgb, img.width, img.height, 3)?;
                save_f32(&out.join(format!("{stem}.alpha.f32")), &img.alpha, img.width, img.height, 1)?;
            }
        }
    }
    println!("rendered {} cameras x {} times to {}", cams.len(), times.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct DensityCsvRow {
    step: usize,
    frame: usize,
    count: usize,
    tau: Option<f64>,
    densified: usize,
    pruned: usize,
}

fn inspect_density_cmd(ckpt: &Path, out: Option<&Path>) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let mut rows: Vec<DensityCsvRow> = meta
        .density_log
        .iter()
        .map(|r| DensityCsvRow {
            step: r.step,
            frame: r.frame,
            count: r.count,
            tau: Some(r.tau),
            densified: r.densified,
            pruned: r.pruned,
        })
        .collect();
    // Final state, without a threshold since no cycle ran at this step.
    for (frame, count) in model.counts().into_iter().enumerate() {
        rows.push(DensityCsvRow { step: meta.step, frame, count, tau: None, densified: 0, pruned: 0 });
    }
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_cameras(sel: &str, ds: &rectisplat::scene::Dataset) -> Result<Vec<usize>> {
    Ok(match sel {
        "holdout" => ds.indices_with_role(ViewRole::Holdout),
        "all" => (0..ds.cameras.len()).collect(),
        "" => Vec::new(),
        list => {
            let ids = list
                .split(',')
                .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad camera index {s:?}")))
                .collect::<Result<Vec<_>>>()?;
            if let Some(i) = ids.iter().find(|&&i| i >= ds.cameras.len()) {
                bail!("camera {i} out of range (dataset has {})", ds.cameras.len());
            }
            ids
        }
    })
}

#[derive(Serialize)]
struct EvalCsvRow {
    frame: usize,
    camera: String,
    psnr: f64,
    ssim: f64,
    count: usize,
}

fn eval_cmd(ckpt: &Path, scene: &Path, cameras: &str, csv_out: Option<&Path>, strips: Option<&Path>) -> Result<()> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let ds = load_dataset(scene)?;
    let cams = parse_cameras(cameras, &ds)?;
    let report = eval_run(&model, &ds, &cams, &meta.render, strips)?;
    if let Some(path) = csv_out {
        let counts = model.counts();
        let mut rows: Vec<EvalCsvRow> = report
            .views
            .iter()
            .map(|v| EvalCsvRow {
                frame: v.frame,
                camera: v.camera.to_string(),
                psnr: v.psnr,
                ssim: v.ssim,
                count: counts[v.frame],
            })
            .collect();
        rows.extend(report.frames.iter().map(|f| EvalCsvRow {
            frame: f.frame,
            camera: "mean".into(),
            psnr: f.psnr,
            ssim: f.ssim,
            count: f.count,
        }));
        write_csv(path, &rows)?;
    }
    let summary = serde_json::json!({
        "cameras": cams,
        "frames": report.frames.len(),
        "psnr": report.psnr,
        "ssim": report.ssim,
        "counts": model.counts(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenScene { out, spec, seed } => gen_scene_cmd(&out, spec.as_deref(), seed),
        Command::Train { scene, out, config, seed, ablate, progress } => {
            train_cmd(&scene, &out, config.as_deref(), seed, ablate.into(), progress.as_deref())
        }
        Command::Render { checkpoint, cameras, times, out, f32 } => render_cmd(&checkpoint, &cameras, &times, &out, f32),
        Command::InspectDensity { checkpoint, out } => inspect_density_cmd(&checkpoint, out.as_deref()),
        Command::Eval { checkpoint, scene, cameras, csv, strips } => {
            eval_cmd(&checkpoint, &scene, &cameras, csv.as_deref(), strips.as_deref())
        }
    }
}
