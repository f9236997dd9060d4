use std::path::{Path, PathBuf};

use atelier_core::control_maps::{canny_edges, normalize_depth, CannySettings, ControlError, DepthBuffer};
use atelier_core::raster::{decode_png, encode_gray_png, to_grayscale, RasterImage};
use serde_json::json;

use crate::{Failure, EXIT_IMAGE, EXIT_IO, EXIT_USAGE};

#[derive(clap::Args)]
pub struct Args {
    /// Color capture (PNG).
    #[arg(long)]
    input: PathBuf,
    /// 16-bit grayscale depth PNG; 65535 marks background.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Depth at value 0.
    #[arg(long)]
    near: Option<f64>,
    /// Depth at value 65534.
    #[arg(long)]
    far: Option<f64>,
    #[arg(long, default_value_t = CannySettings::default().low_threshold)]
    low: f64,
    #[arg(long, default_value_t = CannySettings::default().high_threshold)]
    high: f64,
    #[arg(long, default_value_t = CannySettings::default().sigma)]
    sigma: f64,
    /// Fraction of finite depths clipped at each end before scaling.
    #[arg(long, default_value_t = 0.02)]
    clip: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_png(path: &Path) -> Result<RasterImage, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new(EXIT_IMAGE, format!("{}: {e}", path.display())))?;
    decode_png(&bytes).map_err(|e| Failure::new(EXIT_IMAGE, format!("{}: {e}", path.display())))
}

fn image_error(e: ControlError) -> Failure {
    Failure::new(EXIT_IMAGE, e.to_string())
}

pub fn run(a: Args) -> Result<(), Failure> {
    // Argument checks come before touching any file.
    let canny = CannySettings {
        low_threshold: a.low,
        high_threshold: a.high,
        sigma: a.sigma,
    };
    canny.validate().map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
    let planes = match (&a.depth, a.near, a.far) {
        (None, None, None) => None,
        (Some(_), Some(near), Some(far)) => {
            if !(near > 0.0 && near < far && far.is_finite()) {
                return Err(Failure::new(EXIT_USAGE, "--near and --far must satisfy 0 < near < far"));
            }
            Some((near, far))
        }
        (Some(_), _, _) => return Err(Failure::new(EXIT_USAGE, "--depth requires --near and --far")),
        (None, _, _) => return Err(Failure::new(EXIT_USAGE, "--near/--far are only meaningful with --depth")),
    };
    if !(0.0..0.5).contains(&a.clip) {
        return Err(Failure::new(EXIT_USAGE, "--clip must be in [0, 0.5)"));
    }

    let color = read_png(&a.input)?;
    let edge = canny_edges(&to_grayscale(&color.to_rgba8()).map_err(|e| image_error(e.into()))?, &canny)
        .map_err(image_error)?;
    let depth = match (&a.depth, planes) {
        (Some(path), Some((near, far))) => {
            let raw = read_png(path)?;
            let dims = (color.width(), color.height());
            if (raw.width(), raw.height()) != dims {
                return Err(Failure::new(
                    EXIT_IMAGE,
                    format!("depth is {}x{}, input is {}x{}", raw.width(), raw.height(), dims.0, dims.1),
                ));
            }
            let buffer = DepthBuffer::from_png16(&raw, near, far).map_err(image_error)?;
            Some(normalize_depth(&buffer, a.clip).map_err(image_error)?)
        }
        _ => None,
    };

    std::fs::create_dir_all(&a.out_dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", a.out_dir.display())))?;
    let mut outputs = Vec::new();
    let mut write = |name: &str, bytes: Vec<u8>| -> Result<(), Failure> {
        let path = a.out_dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
        outputs.push(path.display().to_string());
        Ok(())
    };
    write("edge.png", encode_gray_png(&edge))?;
    if let Some(d) = &depth {
        write("depth.png", encode_gray_png(d))?;
    }
    let report = json!({
        "canny": canny,
        "depth": planes.map(|(near, far)| json!({ "near": near, "far": far, "clip_percentile": a.clip })),
        "width": color.width(),
        "height": color.height(),
        "outputs": outputs,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
