//! L1 training with Adam, flip augmentation and best-validation selection.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imgstore::{Image, ImagePair};
use crate::preprocess::augment_flip;
use crate::synthgen::rng::derive_seed;
use crate::synthgen::{Manifest, Split, MANIFEST_FILE};
use crate::tensor::{
    image_to_tensor, save_checkpoint, Element, Graph, ModelCheckpoint, Tensor, UNet,
    DEFAULT_BASE_WIDTH,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Save a snapshot every this many epochs; 0 disables snapshots.
    pub checkpoint_every: usize,
    /// Where snapshots go. Required when `checkpoint_every > 0`.
    pub checkpoint_dir: Option<PathBuf>,
    pub seed: u64,
    pub base_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            max_epochs: 100,
            checkpoint_every: 0,
            checkpoint_dir: None,
            seed: 0,
            base_width: DEFAULT_BASE_WIDTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Train(format!(
                "learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Train(format!("{name} = {b} not in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Train("adam epsilon must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Train("batch size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Train("max epochs must be >= 1".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::Train(
                "periodic checkpoints need a checkpoint directory".into(),
            ));
        }
        Ok(())
    }

    /// `key=value` echo of every field.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let dir = self
            .checkpoint_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        [
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("checkpoint_dir", dir),
            ("seed", self.seed.to_string()),
            ("base_width", self.base_width.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// First and second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

pub fn adam_step(
    params: &mut [&mut Tensor<f32>],
    grads: &[Vec<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Train(format!(
            "optimizer state holds {} buffers, {} parameters, {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if state.m[i].len() != n || state.v[i].len() != n || grads[i].len() != n {
            return Err(Error::Train(format!(
                "buffer size mismatch at parameter {i}"
            )));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let t = state.t as i32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, eps) = (cfg.learning_rate, cfg.adam_eps);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, &g), (mi, vi)) in p
            .data_mut()
            .iter_mut()
            .zip(&grads[i])
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1f * *mi + (1.0 - b1f) * g;
            *vi = b2f * *vi + (1.0 - b2f) * g * g;
            let mhat = f64::from(*mi) / bc1;
            let vhat = f64::from(*vi) / bc2;
            *w -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

/// Mean absolute difference of two normalized images.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    crate::evalkit::mae(a, b)
}

pub fn l1_loss_tensor<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64().unwrap_or(f64::NAN) - y.to_f64().unwrap_or(f64::NAN)).abs())
        .sum::<f64>()
        / n)
}

/// Mean training and validation loss per completed epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// Epochs are 1-based in the file.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\n");
        for (i, (t, v)) in self.train.iter().zip(&self.val).enumerate() {
            let _ = writeln!(s, "{}\t{t:.8}\t{v:.8}", i + 1);
        }
        s
    }

    /// 0-based epoch with the lowest validation loss, first of ties.
    pub fn best_epoch(&self) -> Option<usize> {
        (0..self.val.len()).fold(None, |best, i| match best {
            Some(b) if self.val[b] <= self.val[i] => Some(b),
            _ => Some(i),
        })
    }
}

/// First (0-based) epoch after which the `window`-wide moving average of
/// validation loss rises strictly for `window` epochs in a row.
pub fn detect_overfit(curve: &LossCurve, window: usize) -> Option<usize> {
    let w = window.max(1);
    let v = &curve.val;
    if v.len() < w {
        return None;
    }
    // avg[k] averages epochs k..k+w and is attributed to epoch k + w - 1
    let avg: Vec<f64> = v
        .windows(w)
        .map(|s| s.iter().sum::<f64>() / w as f64)
        .collect();
    (0..avg.len())
        .find(|&k| k + w < avg.len() && (k..k + w).all(|j| avg[j + 1] > avg[j]))
        .map(|k| k + w - 1)
}

/// SHA-256 over the manifest and every image it lists, in manifest order.
pub fn dataset_hash(manifest: &Manifest) -> Result<String> {
    let mut h = Sha256::new();
    let path = manifest.root.join(MANIFEST_FILE);
    h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    for e in &manifest.entries {
        for p in [manifest.hde_path(&e.id), manifest.lde_path(&e.id)] {
            h.update(fs::read(&p).map_err(|err| Error::io(&p, err))?);
        }
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// One forward/backward pass. Returns the loss and the parameter gradients.
///
/// The reported loss is on the clamped output. The gradient comes from the
/// L1 loss on the head before the clamp: the clamp's own derivative is zero
/// outside [0, 1], so a pixel pushed below 0 would never recover. Since the
/// target lies in [0, 1] the unclamped loss bounds the clamped one from above
/// and both vanish together.
fn sample_gradients(model: &UNet<f32>, pair: &ImagePair) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let x = g.leaf(image_to_tensor(&[&pair.lde])?, false);
    let target = image_to_tensor(&[&pair.hde])?;
    let y = g.leaf(target.clone(), false);
    let (head, leaves) = model.forward_unclamped(&mut g, x, true)?;
    let loss = g.l1_loss(head, y)?;
    let out = g.clamp01(head);
    let value = l1_loss_tensor(g.value(out), &target)?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = leaves
        .iter()
        .map(|&l| {
            g.grad(l)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(l).numel()])
        })
        .collect();
    Ok((value, grads))
}

pub fn validation_loss(model: &UNet<f32>, pairs: &[ImagePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let out = model.infer(&image_to_tensor(&[&p.lde])?)?;
        total += l1_loss_tensor(&out, &image_to_tensor::<f32>(&[&p.hde])?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Train from scratch on the manifest's train split. Returns the checkpoint
/// with the lowest validation loss and the full curve.
pub fn train(manifest: &Manifest, cfg: &TrainConfig) -> Result<(ModelCheckpoint, LossCurve)> {
    cfg.validate()?;
    let train_set = manifest.load_split(Split::Train)?;
    let val_set = manifest.load_split(Split::Val)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Train("both splits need at least one pair".into()));
    }
    let hash = dataset_hash(manifest)?;
    let mut model = UNet::<f32>::new(cfg.base_width, derive_seed(cfg.seed, 0))?;
    let mut state = AdamState::new(model.params());
    let mut curve = LossCurve::default();
    let mut best: Option<(f64, usize, UNet<f32>)> = None;
    if let Some(dir) = cfg
        .checkpoint_dir
        .as_ref()
        .filter(|_| cfg.checkpoint_every > 0)
    {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1 + epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<(bool, bool)> = order.iter().map(|_| (rng.gen(), rng.gen())).collect();

        let mut epoch_loss = 0.0;
        for batch in order
            .chunks(cfg.batch_size)
            .zip(flips.chunks(cfg.batch_size))
        {
            let mut acc: Vec<Vec<f32>> = model
                .params()
                .iter()
                .map(|t| vec![0.0; t.numel()])
                .collect();
            for (&i, &(fh, fv)) in batch.0.iter().zip(batch.1) {
                let pair = augment_flip(&train_set[i], fh, fv);
                let (loss, grads) = sample_gradients(&model, &pair)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        sample: pair.id.clone(),
                        value: loss,
                    });
                }
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            let scale = 1.0 / batch.0.len() as f32;
            acc.iter_mut().flatten().for_each(|a| *a *= scale);
            adam_step(&mut model.params_mut(), &acc, &mut state, cfg)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = validation_loss(&model, &val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                sample: "validation".into(),
                value: val_loss,
            });
        }
        curve.train.push(train_loss);
        curve.val.push(val_loss);
        info!(
            "epoch {}: train {train_loss:.6} val {val_loss:.6}",
            epoch + 1
        );

        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, model.clone()));
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("epoch_{:04}.ldck", epoch + 1));
                let mut snap = ModelCheckpoint::new(model.clone());
                snap.metadata = run_metadata(cfg, &hash, epoch, epoch + 1);
                save_checkpoint(&snap, &path)?;
                debug!("saved {}", path.display());
            }
        }
    }

    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let mut ckpt = ModelCheckpoint::new(best_model);
    ckpt.metadata = run_metadata(cfg, &hash, best_epoch, curve.len());
    Ok((ckpt, curve))
}

/// Config echo, seeds and dataset hash; `best_epoch` is 1-based.
pub fn run_metadata(
    cfg: &TrainConfig,
    dataset_hash: &str,
    epoch: usize,
    epochs_run: usize,
) -> Vec<(String, String)> {
    let mut m = cfg.to_pairs();
    m.push(("init_seed".into(), derive_seed(cfg.seed, 0).to_string()));
    m.push(("dataset_sha256".into(), dataset_hash.to_string()));
    m.push(("best_epoch".into(), (epoch + 1).to_string()));
    m.push(("epochs_run".into(), epochs_run.to_string()));
    m
}

pub fn metadata_text(meta: &[(String, String)]) -> String {
    meta.iter().fold(String::new(), |mut s, (k, v)| {
        let _ = writeln!(s, "{k}={v}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(val: &[f64]) -> LossCurve {
        LossCurve {
            train: val.to_vec(),
            val: val.to_vec(),
        }
    }

    #[test]
    fn overfit_examples() {
        assert_eq!(
            detect_overfit(&curve(&[3.0, 2.0, 1.0, 1.1, 1.2, 1.3]), 2),
            Some(3)
        );
        assert_eq!(detect_overfit(&curve(&[5.0, 4.0, 3.0, 2.0, 1.0]), 2), None);
        assert_eq!(detect_overfit(&curve(&[1.0; 8]), 1), None);
        assert_eq!(detect_overfit(&curve(&[1.0, 2.0, 3.0]), 1), Some(0));
        assert_eq!(detect_overfit(&curve(&[]), 3), None);
    }

    #[test]
    fn l1_examples() {
        let z = Image::filled(3, 2, crate::imgstore::Domain::Normalized, 0.0).unwrap();
        let o = Image::filled(3, 2, crate::imgstore::Domain::Normalized, 1.0).unwrap();
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 1.0);
        let a = Image::normalized(2, 1, vec![0.0, 0.5]).unwrap();
        let b = Image::normalized(2, 1, vec![0.25, 0.25]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.25);
    }

    fn one_param(v: f32) -> Tensor<f32> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = one_param(0.7);
        let mut st = AdamState::new([&p]);
        adam_step(
            &mut [&mut p],
            &[vec![0.0]],
            &mut st,
            &TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        // t=1: mhat = g, vhat = g^2, step = lr * g / (|g| + eps)
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        let mut p = one_param(0.0);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut st, &cfg).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_symmetric_and_checked() {
        let mut a = one_param(1.0);
        let mut b = one_param(1.0);
        let mut st = AdamState::new([&a, &b]);
        let cfg = TrainConfig::default();
        for g in [0.3f32, -0.2, 0.5] {
            adam_step(&mut [&mut a, &mut b], &[vec![g], vec![g]], &mut st, &cfg).unwrap();
        }
        assert_eq!(a, b);
        let mut fresh = AdamState::new([]);
        assert!(adam_step(&mut [&mut a], &[vec![1.0]], &mut fresh, &cfg).is_err());
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            adam_beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            checkpoint_every: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn best_epoch_takes_first_minimum() {
        assert_eq!(curve(&[3.0, 1.0, 2.0, 1.0]).best_epoch(), Some(1));
        let tsv = curve(&[0.5]).to_tsv();
        assert_eq!(tsv.lines().nth(1).unwrap(), "1\t0.50000000\t0.50000000");
    }
}
