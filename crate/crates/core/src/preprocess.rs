//! Turning raw acquisitions into aligned, normalized training pairs.

use crate::error::{Error, Result};
use crate::imgstore::{Domain, Image, ImagePair};

/// Parameters of the raw → normalized conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Dark-current level subtracted from raw counts.
    pub dark_level: f32,
    /// Lower clip percentile, in `[0, 50)`.
    pub clip_lo_percentile: f64,
    /// Upper clip percentile, in `(50, 100]`.
    pub clip_hi_percentile: f64,
    /// Mean-binning factor; 1 disables binning.
    pub bin_factor: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            dark_level: 0.0,
            clip_lo_percentile: 0.1,
            clip_hi_percentile: 99.9,
            bin_factor: 1,
        }
    }
}

impl PreprocessConfig {
    /// Plain min-max normalization.
    pub fn min_max() -> Self {
        PreprocessConfig {
            clip_lo_percentile: 0.0,
            clip_hi_percentile: 100.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dark_level.is_finite() && self.dark_level >= 0.0) {
            return Err(Error::Preprocess(format!(
                "dark level {} must be >= 0",
                self.dark_level
            )));
        }
        if !(0.0..50.0).contains(&self.clip_lo_percentile) {
            return Err(Error::Preprocess(format!(
                "clip_lo_percentile {} not in [0, 50)",
                self.clip_lo_percentile
            )));
        }
        if !(self.clip_hi_percentile > 50.0 && self.clip_hi_percentile <= 100.0) {
            return Err(Error::Preprocess(format!(
                "clip_hi_percentile {} not in (50, 100]",
                self.clip_hi_percentile
            )));
        }
        if self.bin_factor == 0 {
            return Err(Error::Preprocess("bin factor must be positive".into()));
        }
        Ok(())
    }
}

/// Integer translation, applied as `out(x, y) = in(x - dx, y - dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shift {
    pub dx: i32,
    pub dy: i32,
}

impl Shift {
    pub fn new(dx: i32, dy: i32) -> Self {
        Shift { dx, dy }
    }

    pub fn inverse(self) -> Shift {
        Shift {
            dx: -self.dx,
            dy: -self.dy,
        }
    }
}

pub fn dark_subtract(img: &Image, dark_level: f32) -> Result<Image> {
    if img.domain() != Domain::Raw {
        return Err(Error::WrongDomain { expected: "raw" });
    }
    let data = img
        .data()
        .iter()
        .map(|&v| (v - dark_level).max(0.0))
        .collect();
    img.map_data(Domain::Raw, data)
}

/// Nearest-rank percentile over an already sorted slice: the sample at rank
/// `round(p / 100 * (n - 1))`. Always returns an observed value, so a lone
/// hot pixel above the upper clip rank never stretches the range.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = (p / 100.0 * (sorted.len() - 1) as f64).round() as usize;
    f64::from(sorted[rank.min(sorted.len() - 1)])
}

/// Percentile-clipped affine map onto `[0, 1]`.
pub fn rescale_intensity(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    cfg.validate()?;
    let mut sorted = img.data().to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let lo = percentile_sorted(&sorted, cfg.clip_lo_percentile);
    let hi = percentile_sorted(&sorted, cfg.clip_hi_percentile);
    if hi <= lo {
        return Err(Error::ConstantImage(lo));
    }
    let span = hi - lo;
    let data = img
        .data()
        .iter()
        .map(|&v| ((f64::from(v) - lo) / span).clamp(0.0, 1.0) as f32)
        .collect();
    img.map_data(Domain::Normalized, data)
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn bin_down(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || img.width() % factor != 0 || img.height() % factor != 0 {
        return Err(Error::Preprocess(format!(
            "bin factor {factor} does not divide {}x{}",
            img.width(),
            img.height()
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (img.width() / factor, img.height() / factor);
    let area = (factor * factor) as f64;
    let mut data = Vec::with_capacity(ow * oh);
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0.0f64;
            for y in by * factor..(by + 1) * factor {
                let row = &img.data()[y * img.width() + bx * factor..][..factor];
                sum += row.iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            data.push((sum / area) as f32);
        }
    }
    Image::new(
        ow,
        oh,
        img.domain(),
        data,
        img.pixel_scale().map(|s| s * factor as f32),
    )
}

/// Dark subtraction, optional binning, then percentile rescaling.
pub fn normalize_raw(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    cfg.validate()?;
    let dark = dark_subtract(img, cfg.dark_level)?;
    let binned = bin_down(&dark, cfg.bin_factor)?;
    rescale_intensity(&binned, cfg)
}

fn overlap(len: usize, d: i32) -> (usize, usize) {
    // indices i of the reference with i - d inside [0, len)
    let lo = d.max(0) as usize;
    let hi = (len as i64 + i64::from(d.min(0))) as usize;
    (lo, hi)
}

/// Zero-normalized cross-correlation between `reference(x, y)` and
/// `moving(x - dx, y - dy)` over their overlap.
pub fn zncc_at(reference: &Image, moving: &Image, s: Shift) -> Result<f64> {
    let w = reference.width();
    let (x0, x1) = overlap(w, s.dx);
    let (y0, y1) = overlap(reference.height(), s.dy);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::Preprocess(format!("empty overlap at shift {s:?}")));
    }
    let n = ((x1 - x0) * (y1 - y0)) as f64;
    let (mut sa, mut sb) = (0.0f64, 0.0f64);
    for y in y0..y1 {
        let my = (y as i64 - i64::from(s.dy)) as usize;
        for x in x0..x1 {
            let mx = (x as i64 - i64::from(s.dx)) as usize;
            sa += f64::from(reference.get(x, y));
            sb += f64::from(moving.get(mx, my));
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut saa, mut sbb, mut sab) = (0.0f64, 0.0f64, 0.0f64);
    for y in y0..y1 {
        let my = (y as i64 - i64::from(s.dy)) as usize;
        let rrow = &reference.data()[y * w..(y + 1) * w];
        let mrow = &moving.data()[my * w..(my + 1) * w];
        for x in x0..x1 {
            let a = f64::from(rrow[x]) - ma;
            let b = f64::from(mrow[(x as i64 - i64::from(s.dx)) as usize]) - mb;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::ZeroVariance { dx: s.dx, dy: s.dy });
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Exhaustive integer search for the shift that best aligns `moving` onto
/// `reference`. Ties go to the smallest `|dx| + |dy|`, then smallest `dy`,
/// then smallest `dx`.
pub fn register_translation(
    reference: &Image,
    moving: &Image,
    search_radius: usize,
) -> Result<Shift> {
    if !reference.same_dims(moving) {
        return Err(Error::Preprocess(
            "registration needs equal dimensions".into(),
        ));
    }
    if search_radius >= reference.width() || search_radius >= reference.height() {
        return Err(Error::Preprocess(format!(
            "search radius {search_radius} too large for {}x{}",
            reference.width(),
            reference.height()
        )));
    }
    let r = search_radius as i32;
    let mut candidates: Vec<Shift> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| Shift { dx, dy }))
        .collect();
    candidates.sort_by_key(|s| (s.dx.abs() + s.dy.abs(), s.dy, s.dx));
    let mut best = (f64::NEG_INFINITY, Shift::default());
    for s in candidates {
        let score = zncc_at(reference, moving, s)?;
        if score > best.0 {
            best = (score, s);
        }
    }
    Ok(best.1)
}

pub fn apply_shift(img: &Image, s: Shift, fill: f32) -> Result<Image> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if i64::from(s.dx).abs() >= w || i64::from(s.dy).abs() >= h {
        return Err(Error::Preprocess(format!(
            "shift {s:?} exceeds image {w}x{h}"
        )));
    }
    let mut data = vec![fill; img.len()];
    let (x0, x1) = overlap(img.width(), s.dx);
    let (y0, y1) = overlap(img.height(), s.dy);
    for y in y0..y1 {
        let sy = (y as i64 - i64::from(s.dy)) as usize;
        let sx0 = (x0 as i64 - i64::from(s.dx)) as usize;
        let src = &img.data()[sy * img.width() + sx0..][..x1 - x0];
        data[y * img.width() + x0..y * img.width() + x1].copy_from_slice(src);
    }
    img.map_data(img.domain(), data)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    img.map_data(img.domain(), data)
        .expect("flip keeps invariants")
}

pub fn flip_vertical(img: &Image) -> Image {
    let w = img.width();
    let data: Vec<f32> = img
        .data()
        .chunks_exact(w)
        .rev()
        .flatten()
        .copied()
        .collect();
    img.map_data(img.domain(), data)
        .expect("flip keeps invariants")
}

fn flip(img: &Image, h: bool, v: bool) -> Image {
    match (h, v) {
        (false, false) => img.clone(),
        (true, false) => flip_horizontal(img),
        (false, true) => flip_vertical(img),
        (true, true) => flip_vertical(&flip_horizontal(img)),
    }
}

/// Flip both members of a pair identically. Never crops.
pub fn augment_flip(pair: &ImagePair, flip_h: bool, flip_v: bool) -> ImagePair {
    ImagePair {
        id: pair.id.clone(),
        hde: flip(&pair.hde, flip_h, flip_v),
        lde: flip(&pair.lde, flip_h, flip_v),
    }
}
