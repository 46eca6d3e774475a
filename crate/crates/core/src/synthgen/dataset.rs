//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.tsv          id, split, seed, style (tab separated, header row)
//! <root>/dataset.meta          generation parameters, key=value
//! <root>/<id>.hde.rawf32
//! <root>/<id>.lde.rawf32
//! <root>/<id>.scene            see `write_scene`
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{make_pair, pair_seeds, parse_scene, write_scene, ContrastStyle, DoseModel, SceneSpec};
use crate::error::{Error, Result};
use crate::imgstore::{load_image, save_image, write_file, ImageFormat, ImagePair};
use crate::preprocess::PreprocessConfig;
use crate::synthgen::rng::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const DATASET_META: &str = "dataset.meta";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Synth(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub width: usize,
    pub height: usize,
    pub pixel_scale: f64,
    pub hde_mean: f64,
    pub lde_mean: f64,
    pub preprocess: PreprocessConfig,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            width: 512,
            height: 512,
            pixel_scale: 1.0,
            hde_mean: super::HDE_MEAN_DOSE,
            lde_mean: super::LDE_MEAN_DOSE,
            preprocess: PreprocessConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub style: ContrastStyle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("id\tsplit\tseed\tstyle") => {}
            _ => return Err(Error::Synth(format!("{}: bad header", path.display()))),
        }
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Synth(format!(
                    "manifest row needs 4 columns: {line:?}"
                )));
            }
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                split: Split::parse(cols[1])?,
                seed: cols[2]
                    .parse()
                    .map_err(|_| Error::Synth(format!("bad seed {:?}", cols[2])))?,
                style: ContrastStyle::parse(cols[3])?,
            });
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\tsplit\tseed\tstyle\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                e.id,
                e.split.name(),
                e.seed,
                e.style.name()
            );
        }
        s
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn hde_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.hde.rawf32"))
    }

    pub fn lde_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.lde.rawf32"))
    }

    pub fn scene_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.scene"))
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<ImagePair> {
        let hde = load_image(&self.hde_path(&entry.id), ImageFormat::RawF32)?;
        let lde = load_image(&self.lde_path(&entry.id), ImageFormat::RawF32)?;
        ImagePair::new(entry.id.clone(), hde, lde)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<ImagePair>> {
        self.split(split).map(|e| self.load_pair(e)).collect()
    }

    pub fn load_scene(&self, entry: &ManifestEntry) -> Result<SceneSpec> {
        let path = self.scene_path(&entry.id);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        parse_scene(&text)
    }
}

fn options_text(opts: &DatasetOptions, style: ContrastStyle, base_seed: u64) -> String {
    let p = &opts.preprocess;
    format!(
        "canvas={} {}\npixel_scale_nm={}\nhde_mean={}\nlde_mean={}\nstyle={}\nbase_seed={}\n\
         dark_level={}\nclip_lo_percentile={}\nclip_hi_percentile={}\nnormalization=independent\n",
        opts.width,
        opts.height,
        opts.pixel_scale,
        opts.hde_mean,
        opts.lde_mean,
        style.name(),
        base_seed,
        p.dark_level,
        p.clip_lo_percentile,
        p.clip_hi_percentile,
    )
}

/// Generate `n_train + n_val` pairs under `root`. Output bytes depend only on
/// the arguments.
pub fn make_dataset(
    root: &Path,
    n_train: usize,
    n_val: usize,
    style: ContrastStyle,
    base_seed: u64,
    opts: &DatasetOptions,
) -> Result<Manifest> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Synth("both splits need at least one pair".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let entries: Vec<ManifestEntry> = (0..n_train)
        .map(|i| (Split::Train, i, i))
        .chain((0..n_val).map(|i| (Split::Val, i, n_train + i)))
        .map(|(split, i, global)| ManifestEntry {
            id: format!("{}_{i:04}", split.name()),
            split,
            seed: derive_seed(base_seed, global as u64),
            style,
        })
        .collect();
    let manifest = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    manifest
        .entries
        .par_iter()
        .try_for_each(|e| -> Result<()> {
            let (scene_seed, hde_seed, lde_seed) = pair_seeds(e.seed);
            let spec =
                SceneSpec::random(opts.width, opts.height, opts.pixel_scale, style, scene_seed);
            let (pair, spec) = make_pair(
                &e.id,
                &spec,
                &DoseModel::new(opts.hde_mean, hde_seed)?,
                &DoseModel::new(opts.lde_mean, lde_seed)?,
                &opts.preprocess,
            )?;
            save_image(&pair.hde, &manifest.hde_path(&e.id), ImageFormat::RawF32)?;
            save_image(&pair.lde, &manifest.lde_path(&e.id), ImageFormat::RawF32)?;
            write_file(&manifest.scene_path(&e.id), write_scene(&spec).as_bytes())
        })?;
    write_file(&root.join(MANIFEST_FILE), manifest.to_tsv().as_bytes())?;
    write_file(
        &root.join(DATASET_META),
        options_text(opts, style, base_seed).as_bytes(),
    )?;
    Ok(manifest)
}
