use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use gsflow_core::config::apply_config;
use gsflow_core::objectives::write_loss_curve;
use gsflow_core::{rasterize, CameraIntrinsics, LossConfig, ManagementConfig};
use gsflow_harness::gradcheck::run_gradcheck;
use gsflow_harness::io::{read_gmap, read_trajectory_file, write_gmap, write_pfm, write_ppm, write_trajectory};
use gsflow_harness::metrics::ate_rmse;
use gsflow_harness::scene::SceneSpec;
use gsflow_harness::slam::{run_slam, Schedule};

#[derive(Parser)]
#[command(name = "gsflow", about = "Flow-supervised Gaussian splatting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients with central finite differences on a random scene.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of Gaussians.
        #[arg(long, default_value_t = 30)]
        scene_size: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a map snapshot from the first pose of a trajectory file.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: String,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 48)]
        height: usize,
        #[arg(long, default_value_t = 60.0)]
        focal: f64,
    },
    /// Run the tracking/mapping loop on a generated scene.
    Slam {
        /// Scene description (`key = value` lines).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Loss, management, learning-rate and schedule settings (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Absolute trajectory error after similarity alignment.
    Metrics {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn gradcheck(seed: u64, n: usize, size: usize, out: &Path) -> anyhow::Result<ExitCode> {
    let report = run_gradcheck(seed, n, size)?;
    report.write_csv(BufWriter::new(File::create(out)?))?;
    let failed = report.rows.len() - report.passed();
    println!(
        "{} / {} coordinates pass ({} failures, {} at non-smooth points)",
        report.passed(),
        report.rows.len(),
        failed,
        failed - report.unexplained_failures()
    );
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn render(map: &Path, pose: &Path, out: &str, k: CameraIntrinsics) -> anyhow::Result<()> {
    let map = read_gmap(map)?;
    let poses = read_trajectory_file(pose)?;
    let Some((_, pose)) = poses.first() else { bail!("{} holds no pose", pose.display()) };
    let r = rasterize(&map, pose, &k);
    write_ppm(Path::new(&format!("{out}_color.ppm")), &r.color)?;
    write_pfm(Path::new(&format!("{out}_depth.pfm")), &r.depth)?;
    write_pfm(Path::new(&format!("{out}_silhouette.pfm")), &r.silhouette)?;
    Ok(())
}

fn slam(spec_path: Option<&Path>, config_path: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let mut spec = SceneSpec::default();
    if let Some(p) = spec_path {
        apply_config(&read_text(p)?, &mut [&mut spec])?;
    }
    let mut loss = LossConfig::default();
    let mut manage = ManagementConfig::default();
    let mut schedule = Schedule::default();
    if let Some(p) = config_path {
        apply_config(&read_text(p)?, &mut [&mut loss, &mut manage, &mut schedule])?;
    }
    let run = run_slam(&spec, &loss, &manage, &schedule)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), run.report.to_json() + "\n")?;
    write_loss_curve(BufWriter::new(File::create(out.join("loss_curve.csv"))?), &run.mapping_curve)?;
    let mut tracking = String::from("frame,iteration,L_track\n");
    for (f, i, l) in &run.tracking_curve {
        tracking.push_str(&format!("{f},{i},{l:e}\n"));
    }
    fs::write(out.join("tracking_curve.csv"), tracking)?;
    let stamp = |v: &[(usize, gsflow_core::PoseSE3)]| v.iter().map(|&(f, p)| (f as f64, p)).collect::<Vec<_>>();
    write_trajectory(File::create(out.join("trajectory_est.txt"))?, &stamp(&run.estimated))?;
    write_trajectory(File::create(out.join("trajectory_gt.txt"))?, &stamp(&run.ground_truth))?;
    let events: String = run.management.iter().map(|m| m.to_json_line() + "\n").collect();
    fs::write(out.join("management.jsonl"), events)?;
    write_gmap(&out.join("map.gmap"), &run.map)?;

    let r = &run.report;
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.5}"));
    println!("keyframes        {}", r.keyframes.len());
    println!("ATE RMSE         {}", show(r.ate_rmse));
    println!("PSNR / SSIM      {} / {}", show(r.mean_psnr), show(r.mean_ssim));
    println!("depth abs-rel    {} (median)", show(r.depth_abs_rel_median));
    println!("map size         {}", r.final_map_size);
    println!("wall clock       {:.1} s", r.wall_clock_s);
    if let Some(msg) = &r.aborted {
        eprintln!("aborted: {msg}");
    }
    Ok(())
}

fn metrics(est: &Path, gt: &Path) -> anyhow::Result<()> {
    let est: Vec<_> = read_trajectory_file(est)?.into_iter().map(|p| p.1).collect();
    let gt: Vec<_> = read_trajectory_file(gt)?.into_iter().map(|p| p.1).collect();
    if est.len() != gt.len() {
        bail!("trajectories differ in length: {} vs {}", est.len(), gt.len());
    }
    println!("{}", ate_rmse(&est, &gt)?);
    Ok(())
}

fn main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Gradcheck { seed, scene_size, image_size, out } => gradcheck(seed, scene_size, image_size, &out),
        Command::Render { map, pose, out, width, height, focal } => {
            render(&map, &pose, &out, CameraIntrinsics::simple(width, height, focal))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Slam { spec, config, out } => {
            slam(spec.as_deref(), config.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Metrics { est, gt } => {
            metrics(&est, &gt)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
