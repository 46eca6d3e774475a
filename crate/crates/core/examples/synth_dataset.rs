//! Generate a small paired dataset and report how noisy the low-dose side is.
//!
//! ```bash
//! cargo run --example synth_dataset -- /tmp/lowdose_synth
//! ```

use std::path::PathBuf;

use lowdose::evalkit::{mae, psnr};
use lowdose::synthgen::{make_dataset, ContrastStyle, DatasetOptions, Split};

fn main() -> lowdose::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("lowdose_synth"));
    let opts = DatasetOptions {
        width: 128,
        height: 128,
        ..Default::default()
    };
    let manifest = make_dataset(&root, 6, 2, ContrastStyle::Mixed, 7, &opts)?;
    println!(
        "{}: {} train, {} val",
        root.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val)
    );
    for entry in manifest.split(Split::Train) {
        let pair = manifest.load_pair(entry)?;
        let scene = manifest.load_scene(entry)?;
        println!(
            "{}  {:2} particles  LDE vs HDE: MAE {:.4}  PSNR {:.2} dB",
            entry.id,
            scene.particles.len(),
            mae(&pair.lde, &pair.hde)?,
            psnr(&pair.lde, &pair.hde)?
        );
    }
    Ok(())
}
