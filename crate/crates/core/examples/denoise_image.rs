//! Denoise one simulated low-dose exposure and compare it with the high-dose
//! reference. Pass a checkpoint path to use trained weights; otherwise the
//! model is freshly initialized and the output only illustrates the contract
//! (same size, values in `[0, 1]`).
//!
//! ```bash
//! cargo run --release --example denoise_image -- /tmp/lowdose_train/model.ldck
//! ```

use std::path::PathBuf;

use lowdose::evalkit::psnr;
use lowdose::imgstore::{save_image, ImageFormat};
use lowdose::preprocess::PreprocessConfig;
use lowdose::synthgen::{make_pair, pair_seeds, ContrastStyle, DoseModel, SceneSpec};
use lowdose::tensor::{load_checkpoint, ModelCheckpoint, UNet};

fn main() -> lowdose::Result<()> {
    let ckpt = match std::env::args().nth(1) {
        Some(p) => load_checkpoint(&PathBuf::from(p))?,
        None => ModelCheckpoint::new(UNet::new(8, 0)?),
    };
    let spec = SceneSpec::random(64, 64, 1.0, ContrastStyle::Strong, 99);
    let (_, hs, ls) = pair_seeds(99);
    let (pair, _) = make_pair(
        "demo",
        &spec,
        &DoseModel::new(1000.0, hs)?,
        &DoseModel::new(5.0, ls)?,
        &PreprocessConfig::default(),
    )?;
    let out = ckpt.model.denoise(&pair.lde)?;
    let (lo, hi) = out
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "output {}x{}, range [{lo:.3}, {hi:.3}]",
        out.width(),
        out.height()
    );
    println!(
        "PSNR vs HDE: input {:.2} dB, output {:.2} dB",
        psnr(&pair.lde, &pair.hde)?,
        psnr(&out, &pair.hde)?
    );
    let path = std::env::temp_dir().join("lowdose_denoised.rawf32");
    save_image(&out, &path, ImageFormat::RawF32)?;
    println!("wrote {}", path.display());
    Ok(())
}
