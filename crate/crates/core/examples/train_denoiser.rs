//! Train a narrow U-Net on a tiny dataset and print the loss curve.
//!
//! ```bash
//! cargo run --release --example train_denoiser
//! ```

use lowdose::synthgen::{make_dataset, ContrastStyle, DatasetOptions};
use lowdose::tensor::save_checkpoint;
use lowdose::trainer::{detect_overfit, train, TrainConfig};

fn main() -> lowdose::Result<()> {
    lowdose::tensor::retain_freed_memory();
    let dir = std::env::temp_dir().join("lowdose_train");
    let opts = DatasetOptions {
        width: 64,
        height: 64,
        ..Default::default()
    };
    let manifest = make_dataset(&dir.join("data"), 8, 2, ContrastStyle::Strong, 1, &opts)?;
    let cfg = TrainConfig {
        base_width: 8,
        max_epochs: 15,
        learning_rate: 1e-3,
        batch_size: 2,
        ..Default::default()
    };
    let (ckpt, curve) = train(&manifest, &cfg)?;
    print!("{}", curve.to_tsv());
    println!(
        "best epoch {:?}, overfit onset {:?}",
        curve.best_epoch().map(|e| e + 1),
        detect_overfit(&curve, 3)
    );
    let path = dir.join("model.ldck");
    save_checkpoint(&ckpt, &path)?;
    println!(
        "saved {} ({} parameters)",
        path.display(),
        ckpt.model.param_count()
    );
    for (k, v) in &ckpt.metadata {
        println!("  {k} = {v}");
    }
    Ok(())
}
