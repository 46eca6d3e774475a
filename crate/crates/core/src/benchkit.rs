//! Single-image inference latency harness.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::evalkit::mean_std;
use crate::imgstore::{Domain, Image};
use crate::preprocess::{normalize_raw, PreprocessConfig};
use crate::tensor::{ModelCheckpoint, SPATIAL_MULTIPLE};

pub const DEFAULT_SAMPLES: usize = 100;
pub const DEFAULT_WARMUP: usize = 10;

/// Wall-clock latency of repeated single-image inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Population standard deviation of `samples_ms`.
    pub std_ms: f64,
    pub warmup: usize,
    pub width: usize,
    pub height: usize,
    pub threads: usize,
    pub hardware: String,
    /// Whether the timed region includes raw-count normalization.
    pub includes_normalization: bool,
}

impl LatencyReport {
    pub fn from_samples(
        samples_ms: Vec<f64>,
        warmup: usize,
        width: usize,
        height: usize,
        threads: usize,
        hardware: &str,
        includes_normalization: bool,
    ) -> Self {
        let (mean_ms, std_ms) = mean_std(&samples_ms);
        LatencyReport {
            samples_ms,
            mean_ms,
            std_ms,
            warmup,
            width,
            height,
            threads,
            hardware: hardware.to_string(),
            includes_normalization,
        }
    }

    /// Mean and deviation must be reproducible from the raw samples.
    pub fn check_consistency(&self, expected_samples: usize) -> Result<()> {
        if self.samples_ms.len() != expected_samples {
            return Err(Error::Bench(format!(
                "report holds {} samples, expected {expected_samples}",
                self.samples_ms.len()
            )));
        }
        if self
            .samples_ms
            .iter()
            .any(|&s| !(s.is_finite() && s >= 0.0))
        {
            return Err(Error::Bench("non-finite or negative sample".into()));
        }
        let (m, s) = mean_std(&self.samples_ms);
        if (m - self.mean_ms).abs() > 1e-9 || (s - self.std_ms).abs() > 1e-9 {
            return Err(Error::Bench(format!(
                "summary {} +/- {} disagrees with samples ({m} +/- {s})",
                self.mean_ms, self.std_ms
            )));
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let region = if self.includes_normalization {
            "raw-count normalization + forward pass, in memory"
        } else {
            "forward pass on a normalized image, in memory"
        };
        let mut s = String::new();
        let _ = writeln!(s, "# hardware\t{}", self.hardware);
        let _ = writeln!(s, "# threads\t{}", self.threads);
        let _ = writeln!(s, "# image\t{}x{}", self.width, self.height);
        let _ = writeln!(s, "# warmup\t{}", self.warmup);
        let _ = writeln!(s, "# timed\t{region}");
        let _ = writeln!(s, "# dispersion\tpopulation standard deviation");
        s.push_str("sample\tms\n");
        for (i, v) in self.samples_ms.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{v}");
        }
        let _ = writeln!(s, "mean\t{}", self.mean_ms);
        let _ = writeln!(s, "std\t{}", self.std_ms);
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Bench(format!("report: {m}"));
        let mut r = LatencyReport::from_samples(Vec::new(), 0, 0, 0, 0, "", false);
        let (mut mean, mut std) = (None, None);
        for line in text.lines() {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| bad(&format!("line {line:?}")))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(&format!("number {v:?}")));
            match k {
                "# hardware" => r.hardware = v.to_string(),
                "# threads" => r.threads = v.parse().map_err(|_| bad("threads"))?,
                "# warmup" => r.warmup = v.parse().map_err(|_| bad("warmup"))?,
                "# image" => {
                    let (w, h) = v.split_once('x').ok_or_else(|| bad("image size"))?;
                    r.width = w.parse().map_err(|_| bad("width"))?;
                    r.height = h.parse().map_err(|_| bad("height"))?;
                }
                "# timed" => r.includes_normalization = v.starts_with("raw"),
                "sample" => {}
                "mean" => mean = Some(num(v)?),
                "std" => std = Some(num(v)?),
                k if k.starts_with('#') => {}
                _ => r.samples_ms.push(num(v)?),
            }
        }
        r.mean_ms = mean.ok_or_else(|| bad("missing mean"))?;
        r.std_ms = std.ok_or_else(|| bad("missing std"))?;
        Ok(r)
    }
}

/// Time `samples` end-to-end passes after `warmup` untimed ones. A raw input
/// is normalized inside the timed region.
pub fn bench_inference(
    ckpt: &ModelCheckpoint,
    image: &Image,
    warmup: usize,
    samples: usize,
    hardware: &str,
) -> Result<LatencyReport> {
    if image.width() % SPATIAL_MULTIPLE != 0 || image.height() % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Bench(format!(
            "image {}x{} is not a multiple of {SPATIAL_MULTIPLE}",
            image.width(),
            image.height()
        )));
    }
    if samples == 0 {
        return Err(Error::Bench("need at least one sample".into()));
    }
    let raw = image.domain() == Domain::Raw;
    let cfg = PreprocessConfig::default();
    let pass = || -> Result<Image> {
        if raw {
            ckpt.model.denoise(&normalize_raw(image, &cfg)?)
        } else {
            ckpt.model.denoise(image)
        }
    };
    for _ in 0..warmup {
        std::hint::black_box(pass()?);
    }
    let mut times = Vec::with_capacity(samples);
    for _ in 0..samples {
        let t = Instant::now();
        std::hint::black_box(pass()?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport::from_samples(
        times,
        warmup,
        image.width(),
        image.height(),
        rayon::current_num_threads(),
        hardware,
        raw,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Throughput {
    Meets,
    Misses,
}

/// `Meets` iff the mean latency is strictly under the frame budget.
pub fn throughput_check(report: &LatencyReport, frame_budget_ms: f64) -> Result<Throughput> {
    if !(frame_budget_ms > 0.0) {
        return Err(Error::Bench(format!(
            "frame budget {frame_budget_ms} must be > 0"
        )));
    }
    Ok(if report.mean_ms < frame_budget_ms {
        Throughput::Meets
    } else {
        Throughput::Misses
    })
}
