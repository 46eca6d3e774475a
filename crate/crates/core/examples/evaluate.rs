//! Score a model on a dataset split against the undenoised baseline and
//! inspect an intensity histogram.
//!
//! ```bash
//! cargo run --release --example evaluate -- /tmp/lowdose_train/model.ldck /tmp/lowdose_train/data
//! ```

use std::path::PathBuf;

use lowdose::evalkit::{evaluate_set, intensity_histogram, lde_baseline};
use lowdose::synthgen::{make_dataset, ContrastStyle, DatasetOptions, Manifest, Split};
use lowdose::tensor::{load_checkpoint, ModelCheckpoint, UNet};

fn main() -> lowdose::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (ckpt, manifest) = match args.as_slice() {
        [c, d] => (
            load_checkpoint(&PathBuf::from(c))?,
            Manifest::load(&PathBuf::from(d))?,
        ),
        _ => {
            let opts = DatasetOptions {
                width: 64,
                height: 64,
                ..Default::default()
            };
            let root = std::env::temp_dir().join("lowdose_eval");
            let m = make_dataset(&root, 1, 3, ContrastStyle::Mixed, 3, &opts)?;
            (ModelCheckpoint::new(UNet::new(8, 0)?), m)
        }
    };
    let model = evaluate_set(&ckpt, &manifest, Split::Val)?;
    let base = lde_baseline(&manifest, Split::Val)?;
    print!("{}", model.to_tsv());
    let (m, s) = base.psnr_stats();
    println!("LDE baseline PSNR {m:.3} +/- {s:.3} dB");

    let first = manifest
        .split(Split::Val)
        .next()
        .expect("val split is non-empty");
    let hist = intensity_histogram(&manifest.load_pair(first)?.hde, 16)?;
    print!("{}", hist.to_tsv());
    println!("modal intensity ~ {:.3}", hist.mode_center());
    Ok(())
}
