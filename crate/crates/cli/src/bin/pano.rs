use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use panodr_cli::parse_size;
use panodr_core::geometry::{gnomonic_project, SphericalCoord, ViewSpec};
use panodr_core::pano::Panorama;

#[derive(Parser)]
#[command(about = "Equirectangular panorama utilities")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract a gnomonic perspective view. Angles in degrees.
    Perspective {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        lon: f64,
        #[arg(long, allow_hyphen_values = true)]
        lat: f64,
        #[arg(long)]
        fov: f64,
        /// Output size as WxH.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    panodr_cli::init_logging();
    match Cli::parse().cmd {
        Cmd::Perspective { input, lon, lat, fov, size, out } => {
            let pano = Panorama::load_png(&input)?;
            let view = ViewSpec { center: SphericalCoord::new(lon.to_radians(), lat.to_radians()), fov_deg: fov, out_w: size.0, out_h: size.1 };
            view.validate()?;
            gnomonic_project(&pano, &view)?.save_png(&out)?;
        }
    }
    Ok(())
}
