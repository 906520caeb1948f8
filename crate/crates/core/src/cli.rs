//! Command-line front end.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Result, VncaError};
use crate::grid::{DensityField, Grid, DELTA_D_CHANNEL};
use crate::image::{load_rgb, save_png, save_rgb_png};
use crate::plume::{density_name, exemplar, velocity_name, PlumeSpec};
use crate::render::{CameraPose, Renderer};
use crate::stylizer::{export_frames, stylize_sequence, ExportOptions, SequenceSpec, StylizeOptions};
use crate::trainer::{run_paths, tone_map, Trainer};
use crate::vnv;

pub const DETERMINISTIC_ENV: &str = "VNCA_DETERMINISTIC";

/// True when `VNCA_DETERMINISTIC` is set to a non-empty value other than `0`.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).map_or(false, |v| !v.is_empty() && v != "0")
}

#[derive(Debug, Parser)]
#[command(name = "vnca", version, about = "Volumetric neural cellular automata for smoke stylization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an update rule on one density frame and a style image.
    Train(TrainArgs),
    /// Stylize a density/velocity sequence with a trained checkpoint.
    Stylize(StylizeArgs),
    /// Render a density volume, optionally with a stylized rgb|delta_d volume.
    Render(RenderArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
    /// Write an analytic plume sequence and a procedural style exemplar.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for checkpoint.json and run_log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub style: Option<PathBuf>,
    #[arg(long)]
    pub density_dir: Option<PathBuf>,
    #[arg(long)]
    pub velocity_dir: Option<PathBuf>,
    /// Training frame index.
    #[arg(long)]
    pub frame: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f32>,
    /// Continue from `<out>/checkpoint.json`.
    #[arg(long)]
    pub resume: bool,
    /// Validate configuration and inputs, then exit without training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub density_dir: PathBuf,
    /// Defaults to the density directory.
    #[arg(long)]
    pub velocity_dir: Option<PathBuf>,
    /// Frame range, `a..b` (exclusive) or `a..=b`.
    #[arg(long, value_parser = parse_frames)]
    pub frames: Range<u32>,
    /// Update steps per frame transition; defaults to the checkpoint's value.
    #[arg(long)]
    pub steps_per_frame: Option<usize>,
    /// Burn-in steps before the first frame.
    #[arg(long, default_value_t = crate::stylizer::DEFAULT_BURN_IN)]
    pub burn_in: usize,
    /// A pose count (`8`) or a list of azimuths in degrees, each optionally `az:el` (`0,90:15`).
    #[arg(long, default_value = "1", value_parser = parse_poses)]
    pub poses: PoseList,
    #[arg(long)]
    pub gamma: Option<f32>,
    /// Rendered image side length; defaults to the volume's.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub fire_rate_override: Option<f32>,
    /// Skip the VNV1 dumps of stylized volumes.
    #[arg(long)]
    pub no_volumes: bool,
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// VNV1 density volume.
    #[arg(long)]
    pub density: PathBuf,
    /// VNV1 `rgb | delta_d` volume written by `stylize`; grey render without it.
    #[arg(long)]
    pub stylized: Option<PathBuf>,
    #[arg(long, default_value = "1", value_parser = parse_poses)]
    pub poses: PoseList,
    #[arg(long)]
    pub gamma: Option<f32>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Brightness scale; defaults to mapping the brightest pixel to 1.
    #[arg(long)]
    pub exposure: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "0..60", value_parser = parse_frames)]
    pub frames: Range<u32>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 128)]
    pub exemplar_size: usize,
}

pub fn parse_frames(s: &str) -> std::result::Result<Range<u32>, String> {
    let bad = || format!("expected `a..b` or `a..=b`, got `{s}`");
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(bad());
    };
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    let end = if inclusive { b + 1 } else { b };
    if end <= a {
        return Err(format!("frame range `{s}` is empty"));
    }
    Ok(a..end)
}

/// Camera poses given on the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseList(pub Vec<CameraPose>);

pub fn parse_poses(s: &str) -> std::result::Result<PoseList, String> {
    parse_pose_vec(s).map(PoseList)
}

fn parse_pose_vec(s: &str) -> std::result::Result<Vec<CameraPose>, String> {
    if !s.contains(',') && !s.contains(':') {
        let n: usize = s
            .trim()
            .parse()
            .map_err(|_| format!("expected a pose count or a comma-separated azimuth list, got `{s}`"))?;
        if n == 0 {
            return Err("pose count must be positive".into());
        }
        return Ok(CameraPose::ring(n));
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (az, el) = p.split_once(':').unwrap_or((p, "0"));
            let az: f32 = az.trim().parse().map_err(|_| format!("bad azimuth `{az}`"))?;
            let el: f32 = el.trim().parse().map_err(|_| format!("bad elevation `{el}`"))?;
            Ok(CameraPose::new(az.to_radians()).with_elevation(el.to_radians()))
        })
        .collect()
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if deterministic_requested() {
        info!("{DETERMINISTIC_ENV} set; reductions run in fixed order");
    }
    match cli.command {
        Command::Train(a) => train(a),
        Command::Stylize(a) => stylize(a),
        Command::Render(a) => render(a),
        Command::Inspect(a) => inspect(a),
        Command::Generate(a) => generate(a),
    }
}

fn load_frame(density_dir: &Path, velocity_dir: &Path, index: u32) -> Result<(DensityField, crate::VelocityField)> {
    let d = DensityField::new(vnv::read(density_dir.join(density_name(index)))?, index)?;
    let v = crate::VelocityField::new(vnv::read(velocity_dir.join(velocity_name(index)))?, index)?;
    if v.dims() != d.dims() {
        return Err(VncaError::shape("velocity volume", d.dims(), v.dims()));
    }
    Ok((d, v))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.style {
        cfg.data.style = Some(p);
    }
    if let Some(p) = a.density_dir {
        cfg.data.density_dir = Some(p);
    }
    if let Some(p) = a.velocity_dir {
        cfg.data.velocity_dir = Some(p);
    }
    if let Some(f) = a.frame {
        cfg.data.frame_index = f;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.gamma.is_some() {
        cfg.train.gamma = a.gamma;
    }
    cfg.validate()?;
    let style_path = cfg
        .data
        .style
        .clone()
        .ok_or_else(|| VncaError::Config("no style image (data.style or --style)".into()))?;
    let density_dir = cfg
        .data
        .density_dir
        .clone()
        .ok_or_else(|| VncaError::Config("no density directory (data.density_dir or --density-dir)".into()))?;
    let velocity_dir = cfg.data.velocity_dir.clone().unwrap_or_else(|| density_dir.clone());
    let (density, velocity) = load_frame(&density_dir, &velocity_dir, cfg.data.frame_index)?;
    let style_bytes = std::fs::read(&style_path).map_err(|e| VncaError::io(&style_path, e))?;
    let style = load_rgb(&style_path, Some(cfg.data.style_size()))?;
    let extractor = cfg.extractor.build()?;
    if a.dry_run {
        println!(
            "config ok: volume {}, frame {}, style {}, {} epochs",
            density.dims(),
            cfg.data.frame_index,
            style_path.display(),
            cfg.train.epochs
        );
        return Ok(());
    }
    std::fs::create_dir_all(&a.out).map_err(|e| VncaError::io(&a.out, e))?;
    let (log_path, ck_path) = run_paths(&a.out);
    let mut trainer = if a.resume {
        let mut ck = Checkpoint::load(&ck_path)?;
        ck.config.train.epochs = cfg.train.epochs;
        Trainer::from_checkpoint(ck, density, velocity, &style, extractor)?
    } else {
        if log_path.exists() {
            std::fs::remove_file(&log_path).map_err(|e| VncaError::io(&log_path, e))?;
        }
        Trainer::new(cfg, density, velocity, &style, sha256_hex(&style_bytes), extractor)?
    };
    let start = Instant::now();
    let quiet = deterministic_requested();
    let ck = trainer.train(Some(&log_path), Some(&ck_path), |r| {
        if r.epoch % 50 == 0 {
            info!("epoch {} total {:.4} l_app {:.4} l_motion {:.4}", r.epoch, r.total, r.l_app, r.l_motion);
        }
    })?;
    if quiet {
        println!("trained {} epochs -> {}", ck.epoch, ck_path.display());
    } else {
        println!(
            "trained {} epochs in {:.1}s -> {}",
            ck.epoch,
            start.elapsed().as_secs_f32(),
            ck_path.display()
        );
    }
    Ok(())
}

fn sized(poses: &[CameraPose], size: Option<usize>) -> Vec<CameraPose> {
    poses
        .iter()
        .map(|p| match size {
            Some(s) => p.with_image_size(s, s),
            None => *p,
        })
        .collect()
}

fn stylize(a: StylizeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let velocity_dir = a.velocity_dir.clone().unwrap_or_else(|| a.density_dir.clone());
    let seq = SequenceSpec::from_dirs(&a.density_dir, &velocity_dir, a.frames.clone())?;
    let options = StylizeOptions {
        steps_per_frame: a.steps_per_frame.unwrap_or(ck.config.train.steps_per_frame),
        burn_in: a.burn_in,
        seed: a.seed,
        fire_rate_override: a.fire_rate_override,
    };
    let stream = stylize_sequence(&ck, &seq, options)?;
    if a.dry_run {
        println!("inputs ok: {} frames of {}", seq.len(), seq.dims()?);
        return Ok(());
    }
    let export = ExportOptions {
        poses: sized(&a.poses.0, a.size),
        gamma: a.gamma.unwrap_or(ck.gamma),
        exposure: ck.exposure,
        write_volumes: !a.no_volumes,
    };
    let summary = export_frames(stream, &export, &a.out)?;
    println!(
        "stylized {} frames: {} images, {} volumes in {}",
        summary.frames,
        summary.images.len(),
        summary.volumes.len(),
        a.out.display()
    );
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let density = DensityField::new(vnv::read(&a.density)?, 0)?;
    let dims = density.dims();
    let (rgb, delta_d) = match &a.stylized {
        Some(p) => {
            let g = vnv::read(p)?;
            g.expect_shape("stylized volume", dims, 4)?;
            (Some(g.channel_slice(0..3)), g.channel_slice(DELTA_D_CHANNEL..DELTA_D_CHANNEL + 1))
        }
        None => (None, Grid::zeros(dims, 1)),
    };
    let gamma = a.gamma.unwrap_or_else(|| crate::render::default_gamma(dims.d));
    std::fs::create_dir_all(&a.out).map_err(|e| VncaError::io(&a.out, e))?;
    for (view, pose) in sized(&a.poses.0, a.size).into_iter().enumerate() {
        let r = Renderer::new(dims, pose, gamma)?;
        let img = match &rgb {
            Some(rgb) => r.render_color(&density, rgb, &delta_d)?.pixels,
            None => r.render_gray(&density, &delta_d)?.pixels,
        };
        let exposure = a.exposure.unwrap_or_else(|| {
            let peak = img.data.iter().fold(0.0f32, |m, v| m.max(*v));
            if peak > 0.0 {
                1.0 / peak
            } else {
                1.0
            }
        });
        let path = a.out.join(format!("view_{view:02}.png"));
        save_png(&tone_map(&img, exposure), &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let r = &ck.rule;
    println!("C={}", r.channels);
    println!("hidden_dim={}", r.hidden_dim);
    println!("fire_rate={}", r.fire_rate);
    println!("step_size={}", r.step_size);
    println!("perception_width={}", r.input_dim());
    println!("parameters={}", r.param_count());
    println!(
        "encoding: density={} velocity={} padding={:?}",
        r.encoding.density, r.encoding.velocity, r.encoding.padding
    );
    println!("epochs={}", ck.epoch);
    println!("gamma={} exposure={}", ck.gamma, ck.exposure);
    println!("n_range={:?} steps_per_frame={}", ck.config.train.n_range, ck.config.train.steps_per_frame);
    let [h, w, d] = ck.provenance.volume_dims;
    println!(
        "provenance: style_sha256={} frame_index={} seed={} volume={h}x{w}x{d}",
        ck.provenance.style_sha256, ck.provenance.frame_index, ck.provenance.seed
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = PlumeSpec {
        size: a.size,
        ..PlumeSpec::default()
    };
    spec.write_sequence(&a.out, a.frames.clone())?;
    let style = a.out.join("exemplar.png");
    save_rgb_png(&exemplar(a.exemplar_size), &style)?;
    println!(
        "wrote frames {}..{} ({}^3) and {} to {}",
        a.frames.start,
        a.frames.end,
        a.size,
        style.display(),
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_ranges() {
        assert_eq!(parse_frames("3..7").unwrap(), 3..7);
        assert_eq!(parse_frames("3..=7").unwrap(), 3..8);
        assert!(parse_frames("7..3").is_err());
        assert!(parse_frames("x").is_err());
    }

    #[test]
    fn pose_lists() {
        assert_eq!(parse_poses("4").unwrap().0.len(), 4);
        let p = parse_poses("0,90:30").unwrap().0;
        assert_eq!(p.len(), 2);
        assert!((p[1].azimuth - std::f32::consts::FRAC_PI_2).abs() < 1e-6);
        assert!((p[1].elevation - 30f32.to_radians()).abs() < 1e-6);
        assert_eq!(parse_poses("45,").unwrap().0.len(), 1);
        assert!(parse_poses("0").is_err());
        assert!(parse_poses("a,b").is_err());
    }
}
