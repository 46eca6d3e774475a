//! Image-quality metrics, histograms, line profiles and particle metrology.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imgstore::{Domain, Image};
use crate::synthgen::{Manifest, SceneSpec, Split};
use crate::tensor::ModelCheckpoint;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.domain() != Domain::Normalized || b.domain() != Domain::Normalized {
        return Err(Error::WrongDomain {
            expected: "normalized",
        });
    }
    Ok(())
}

/// Mean absolute pixel difference.
pub fn mae(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).abs())
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB with unit peak. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Population mean and standard deviation. Any infinite value makes the
/// mean infinite and the deviation NaN.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        let all_same = values.iter().all(|&v| v == values[0]);
        return (mean, if all_same { 0.0 } else { f64::NAN });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub mae: f64,
    pub psnr: f64,
}

/// Per-image MAE/PSNR with population mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        MetricReport { rows }
    }

    pub fn mae_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.mae).collect::<Vec<_>>())
    }

    pub fn psnr_stats(&self) -> (f64, f64) {
        mean_std(&self.rows.iter().map(|r| r.psnr).collect::<Vec<_>>())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# dispersion: population standard deviation\nid\tmae\tpsnr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}\t{:.4}", r.id, r.mae, r.psnr);
        }
        let (m, ms) = self.mae_stats();
        let (p, ps) = self.psnr_stats();
        let _ = writeln!(s, "mean\t{m:.6}\t{p:.4}");
        let _ = writeln!(s, "std\t{ms:.6}\t{ps:.4}");
        s
    }
}

/// Equal-width histogram over `[0, 1]` (normalized) or `[0, max]` (raw).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the tallest bin, first of equal maxima.
    pub fn mode_bin(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = i;
            }
        }
        best
    }

    pub fn mode_center(&self) -> f64 {
        self.bin_center(self.mode_bin())
    }

    fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        if self.hi > self.lo {
            (((v - self.lo) / (self.hi - self.lo) * n as f64).max(0.0) as usize).min(n - 1)
        } else {
            0
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("bin_center\tcount\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{:.6}\t{c}", self.bin_center(i));
        }
        s
    }
}

pub fn intensity_histogram(img: &Image, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Eval(format!("need at least 2 bins, got {bins}")));
    }
    let hi = match img.domain() {
        Domain::Normalized => 1.0,
        Domain::Raw => img.data().iter().fold(0.0f32, |m, &v| m.max(v)) as f64,
    };
    let mut h = Histogram {
        lo: 0.0,
        hi: if hi > 0.0 { hi } else { 1.0 },
        counts: vec![0u64; bins],
    };
    for &v in img.data() {
        let i = h.bin_of(f64::from(v));
        h.counts[i] += 1;
    }
    Ok(h)
}

/// Mean of the pixels falling in the tallest histogram bin.
pub fn modal_background(img: &Image) -> Result<f64> {
    let h = intensity_histogram(img, MODE_BINS)?;
    let mode = h.mode_bin();
    let (sum, n) = img
        .data()
        .iter()
        .map(|&v| f64::from(v))
        .filter(|&v| h.bin_of(v) == mode)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    Ok(sum / n as f64)
}

/// A position in pixel coordinates; pixel centers sit on integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Intensity sampled along a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LineProfile {
    pub a: Point,
    pub b: Point,
    /// `(arc length in nm, intensity)`, arc length strictly increasing.
    pub samples: Vec<(f64, f64)>,
    pub background_level: f64,
}

impl LineProfile {
    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "# background_level\t{:.6}\narclength_nm\tintensity\n",
            self.background_level
        );
        for (t, v) in &self.samples {
            let _ = writeln!(s, "{t:.4}\t{v:.6}");
        }
        s
    }

    fn sub(&self, range: std::ops::Range<usize>) -> LineProfile {
        LineProfile {
            samples: self.samples[range].to_vec(),
            ..self.clone()
        }
    }
}

pub const PROFILE_STEP_PX: f64 = 0.5;
const MODE_BINS: usize = 256;

/// Bilinear sample with pixel centers on integer coordinates, clamped at the
/// border.
pub fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| f64::from(img.get(xx, yy));
    let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
    let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Mean intensity over pixels clear of every particle (including the blur
/// margin).
pub fn background_from_scene(img: &Image, scene: &SceneSpec) -> Result<f64> {
    if img.width() != scene.width || img.height() != scene.height {
        return Err(Error::Shape(
            "image and scene disagree on dimensions".into(),
        ));
    }
    let mask = scene.background_mask(scene.blur_margin_px());
    let (sum, n) = img
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| {
            (s + f64::from(v), n + 1)
        });
    if n == 0 {
        return Err(Error::Eval("scene leaves no background pixels".into()));
    }
    Ok(sum / n as f64)
}

/// Sample `img` from `a` to `b` every half pixel. The background level comes
/// from `scene` when given, otherwise from the histogram mode (refined to the
/// mean of the modal bin's pixels).
pub fn extract_profile(
    img: &Image,
    a: Point,
    b: Point,
    scene: Option<&SceneSpec>,
) -> Result<LineProfile> {
    let inside = |p: Point| {
        p.x.is_finite()
            && p.y.is_finite()
            && p.x >= 0.0
            && p.y >= 0.0
            && p.x <= (img.width() - 1) as f64
            && p.y <= (img.height() - 1) as f64
    };
    if !inside(a) || !inside(b) {
        return Err(Error::Eval(
            "profile endpoints must lie inside the image".into(),
        ));
    }
    let len = (b.x - a.x).hypot(b.y - a.y);
    if len < 1e-9 {
        return Err(Error::Eval("degenerate profile segment".into()));
    }
    let scale = f64::from(img.pixel_scale().unwrap_or(1.0));
    let steps = (len / PROFILE_STEP_PX).floor() as usize;
    let mut ts: Vec<f64> = (0..=steps).map(|i| i as f64 * PROFILE_STEP_PX).collect();
    if len - ts[steps] > 1e-9 {
        ts.push(len);
    }
    let samples = ts
        .iter()
        .map(|&t| {
            let f = t / len;
            let v = bilinear(img, a.x + f * (b.x - a.x), a.y + f * (b.y - a.y));
            (t * scale, v)
        })
        .collect();
    let background_level = match scene {
        Some(s) => background_from_scene(img, s)?,
        None => modal_background(img)?,
    };
    Ok(LineProfile {
        a,
        b,
        samples,
        background_level,
    })
}

/// Size estimate of one particle from its profile, all in nm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleMeasure {
    pub diameter: f64,
    /// Distance between the background crossings; `None` when the profile
    /// does not climb back to background on both sides.
    pub pseudo_diameter: Option<f64>,
    /// `(pseudo_diameter - diameter) / 2`, reported even when negative.
    pub edge_width: Option<f64>,
    pub center: f64,
    /// Fitted dip amplitude below background.
    pub amplitude: f64,
}

impl ParticleMeasure {
    pub fn edge_width_valid(&self) -> bool {
        self.edge_width.is_some_and(|e| e >= 0.0)
    }
}

/// Fraction of the dip depth below which samples enter the sphere fit.
pub const FIT_DEPTH_FRACTION: f64 = 0.25;
const MIN_FIT_SAMPLES: usize = 5;
const FIT_MAX_ITER: usize = 5000;

/// Least-squares amplitude of `bg - a * chord` and the residual.
fn chord_residual(xs: &[f64], ys: &[f64], bg: f64, c: f64, r: f64) -> (f64, f64) {
    if !(r > 0.0) {
        return (0.0, f64::INFINITY);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let u = (x - c) / r;
        let t = (1.0 - u * u).max(0.0).sqrt();
        num += (bg - y) * t;
        den += t * t;
    }
    let a = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    let sse = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let u = (x - c) / r;
            let t = (1.0 - u * u).max(0.0).sqrt();
            (y - (bg - a * t)).powi(2)
        })
        .sum();
    (a, sse)
}

/// Nelder-Mead on two parameters. Returns the best vertex or `None` if the
/// simplex did not collapse within the iteration budget.
fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    step: [f64; 2],
    tol: [f64; 2],
) -> Option<[f64; 2]> {
    let mut simplex = [
        start,
        [start[0] + step[0], start[1]],
        [start[0], start[1] + step[1]],
    ];
    let mut vals = simplex.map(&f);
    for _ in 0..FIT_MAX_ITER {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
        simplex = order.map(|i| simplex[i]);
        vals = order.map(|i| vals[i]);
        let size = |k: usize| {
            (1..3)
                .map(|i| (simplex[i][k] - simplex[0][k]).abs())
                .fold(0.0, f64::max)
        };
        if size(0) <= tol[0] && size(1) <= tol[1] {
            return Some(simplex[0]);
        }
        let centroid = [
            0.5 * (simplex[0][0] + simplex[1][0]),
            0.5 * (simplex[0][1] + simplex[1][1]),
        ];
        let along = |t: f64| {
            [
                centroid[0] + t * (simplex[2][0] - centroid[0]),
                centroid[1] + t * (simplex[2][1] - centroid[1]),
            ]
        };
        let xr = along(-1.0);
        let fr = f(xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(xe);
            (simplex[2], vals[2]) = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < vals[1] {
            (simplex[2], vals[2]) = (xr, fr);
        } else {
            let xc = if fr < vals[2] {
                along(-0.5)
            } else {
                along(0.5)
            };
            let fc = f(xc);
            if fc < vals[2].min(fr) {
                (simplex[2], vals[2]) = (xc, fc);
            } else {
                for i in 1..3 {
                    simplex[i] = [
                        simplex[0][0] + 0.5 * (simplex[i][0] - simplex[0][0]),
                        simplex[0][1] + 0.5 * (simplex[i][1] - simplex[0][1]),
                    ];
                    vals[i] = f(simplex[i]);
                }
            }
        }
    }
    None
}

/// Fit the projected-sphere model to the core of the deepest dip and read
/// the pseudo-diameter off the background crossings.
pub fn measure_particle(profile: &LineProfile) -> Result<ParticleMeasure> {
    let s = &profile.samples;
    let bg = profile.background_level;
    let m = (0..s.len())
        .min_by(|&i, &j| s[i].1.total_cmp(&s[j].1))
        .ok_or(Error::NoDip)?;
    let depth = bg - s[m].1;
    if !(depth > 0.0) {
        return Err(Error::NoDip);
    }
    let thr = bg - FIT_DEPTH_FRACTION * depth;
    let mut lo = m;
    while lo > 0 && s[lo - 1].1 < thr {
        lo -= 1;
    }
    let mut hi = m;
    while hi + 1 < s.len() && s[hi + 1].1 < thr {
        hi += 1;
    }
    let n = hi - lo + 1;
    if n < MIN_FIT_SAMPLES {
        return Err(Error::FitRegionTooSmall(n));
    }
    let xs: Vec<f64> = s[lo..=hi].iter().map(|p| p.0).collect();
    let ys: Vec<f64> = s[lo..=hi].iter().map(|p| p.1).collect();

    // t > 1/4 inside the region, so its half-span is ~0.968 r
    let half = 0.5 * (xs[n - 1] - xs[0]);
    let c0 = 0.5 * (xs[0] + xs[n - 1]);
    let r0 = half / (1.0 - FIT_DEPTH_FRACTION * FIT_DEPTH_FRACTION).sqrt();
    let spacing = (xs[1] - xs[0]).abs();
    let tol = 1e-6 * spacing;
    let best = nelder_mead(
        |p| chord_residual(&xs, &ys, bg, p[0], p[1]).1,
        [c0, r0],
        [0.1 * r0, 0.1 * r0],
        [tol, tol],
    )
    .ok_or(Error::FitNonConvergence(FIT_MAX_ITER))?;
    let (c, r) = (best[0], best[1]);
    let (amplitude, _) = chord_residual(&xs, &ys, bg, c, r);

    let left = (0..m)
        .rev()
        .find(|&j| s[j].1 >= bg)
        .map(|j| crossing(s[j], s[j + 1], bg));
    let right = (m + 1..s.len())
        .find(|&j| s[j].1 >= bg)
        .map(|j| crossing(s[j - 1], s[j], bg));
    let pseudo_diameter = left.zip(right).map(|(l, r)| r - l);
    let diameter = 2.0 * r;
    Ok(ParticleMeasure {
        diameter,
        pseudo_diameter,
        edge_width: pseudo_diameter.map(|p| 0.5 * (p - diameter)),
        center: c,
        amplitude,
    })
}

/// Arc length where the segment between two samples meets `level`.
fn crossing(p: (f64, f64), q: (f64, f64), level: f64) -> f64 {
    if q.1 == p.1 {
        return p.0;
    }
    p.0 + (level - p.1) / (q.1 - p.1) * (q.0 - p.0)
}

/// Split a profile holding two dips at the ridge that maximizes the smaller
/// of the two basin depths. Both halves keep the ridge sample.
pub fn split_two_dips(profile: &LineProfile) -> Result<(LineProfile, LineProfile)> {
    let s = &profile.samples;
    let n = s.len();
    if n < 3 {
        return Err(Error::Eval("profile too short to hold two dips".into()));
    }
    let mut prefix = vec![f64::INFINITY; n];
    for i in 1..n {
        prefix[i] = prefix[i - 1].min(s[i - 1].1);
    }
    let mut suffix = vec![f64::INFINITY; n];
    for i in (0..n - 1).rev() {
        suffix[i] = suffix[i + 1].min(s[i + 1].1);
    }
    let (k, prominence) = (1..n - 1)
        .map(|k| (k, (s[k].1 - prefix[k]).min(s[k].1 - suffix[k])))
        .fold((0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        });
    if !(prominence > 0.0) {
        return Err(Error::Eval(
            "profile does not hold two separated dips".into(),
        ));
    }
    Ok((profile.sub(0..k + 1), profile.sub(k..n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Separation {
    Separable,
    NotSeparable,
}

/// Two particles are resolved when their mean diameter is strictly below the
/// distance between their centers.
pub fn check_separation(p1: &ParticleMeasure, p2: &ParticleMeasure) -> Separation {
    let l = (p1.center - p2.center).abs();
    if 0.5 * (p1.diameter + p2.diameter) < l {
        Separation::Separable
    } else {
        Separation::NotSeparable
    }
}

/// Denoise every LDE image in `split` and score it against its HDE target.
pub fn evaluate_set(
    ckpt: &ModelCheckpoint,
    manifest: &Manifest,
    split: Split,
) -> Result<MetricReport> {
    score_split(manifest, split, |lde| ckpt.model.denoise(lde))
}

/// Score the raw LDE inputs against HDE: the no-model reference.
pub fn lde_baseline(manifest: &Manifest, split: Split) -> Result<MetricReport> {
    score_split(manifest, split, |lde| Ok(lde.clone()))
}

fn score_split(
    manifest: &Manifest,
    split: Split,
    mut f: impl FnMut(&Image) -> Result<Image>,
) -> Result<MetricReport> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Eval(format!("split {} is empty", split.name())));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for e in entries {
        let pair = manifest.load_pair(e)?;
        let out = f(&pair.lde)?;
        let m = mse(&out, &pair.hde)?;
        rows.push(MetricRow {
            id: e.id.clone(),
            mae: mae(&out, &pair.hde)?,
            psnr: psnr_from_mse(m),
        });
    }
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{render_clean, Particle};

    fn img(w: usize, h: usize, data: Vec<f32>) -> Image {
        Image::normalized(w, h, data).unwrap()
    }

    #[test]
    fn mae_examples() {
        let a = img(2, 1, vec![1.0, 0.0]);
        let b = img(2, 1, vec![0.0, 1.0]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &b).unwrap(), 1.0);
        assert!(mae(&a, &img(1, 2, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 1, vec![0.1, 0.2, 0.3, 0.4]);
        let b = img(4, 1, vec![0.2, 0.3, 0.4, 0.5]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn report_stats_are_population() {
        let rows = [0.1, 0.3]
            .iter()
            .enumerate()
            .map(|(i, &m)| MetricRow {
                id: i.to_string(),
                mae: m,
                psnr: 10.0,
            })
            .collect();
        let r = MetricReport::from_rows(rows);
        let (m, s) = r.mae_stats();
        assert!((m - 0.2).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
        assert!(r.to_tsv().contains("population"));
    }

    #[test]
    fn histogram_constant_and_conservation() {
        let h = intensity_histogram(&Image::filled(5, 3, Domain::Normalized, 0.4).unwrap(), 10)
            .unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 15);
        let one =
            intensity_histogram(&Image::filled(2, 2, Domain::Normalized, 1.0).unwrap(), 4).unwrap();
        assert_eq!(one.counts[3], 4);
        assert!(intensity_histogram(&one_px(), 1).is_err());
    }

    fn one_px() -> Image {
        img(1, 1, vec![0.5])
    }

    #[test]
    fn raw_histogram_spans_max() {
        let raw = Image::raw(3, 1, vec![0.0, 5.0, 10.0]).unwrap();
        let h = intensity_histogram(&raw, 2).unwrap();
        assert_eq!((h.hi, h.counts.clone()), (10.0, vec![1, 2]));
    }

    #[test]
    fn profile_on_ramp_is_linear() {
        let data = (0..20 * 5).map(|i| (i % 20) as f32 / 19.0).collect();
        let p = extract_profile(
            &img(20, 5, data),
            Point::new(1.0, 2.0),
            Point::new(7.0, 2.0),
            None,
        )
        .unwrap();
        assert_eq!(p.samples.len(), 13);
        for &(t, v) in &p.samples {
            assert!((v - (1.0 + t) / 19.0).abs() < 1e-6);
        }
    }

    #[test]
    fn profile_errors() {
        let i = Image::filled(8, 8, Domain::Normalized, 0.5).unwrap();
        let a = Point::new(1.0, 1.0);
        assert!(extract_profile(&i, a, a, None).is_err());
        assert!(extract_profile(&i, a, Point::new(8.0, 1.0), None).is_err());
        let p = extract_profile(&i, a, Point::new(6.3, 1.0), None).unwrap();
        assert!(p.samples.iter().all(|s| (s.1 - 0.5).abs() < 1e-7));
        assert!(p
            .samples
            .windows(2)
            .all(|w| w[1].0 > w[0].0 && w[1].0 - w[0].0 <= 1.0));
        assert!((p.samples.last().unwrap().0 - 5.3).abs() < 1e-9);
        assert_eq!(
            measure_particle(&p).unwrap_err().to_string(),
            Error::NoDip.to_string()
        );
    }

    fn single(d: f64, a: f64, sigma: f64) -> SceneSpec {
        SceneSpec {
            particles: vec![Particle {
                cx: 64.0,
                cy: 40.0,
                diameter_nm: d,
                absorption: a,
            }],
            edge_blur_sigma: sigma,
            ..SceneSpec::empty(128, 80)
        }
    }

    #[test]
    fn full_absorber_center_hits_zero() {
        let spec = single(30.0, 1.0, 0.0);
        let clean = render_clean(&spec).unwrap();
        let p = extract_profile(
            &clean.transmission,
            Point::new(10.0, 40.0),
            Point::new(120.0, 40.0),
            Some(&spec),
        )
        .unwrap();
        let min = p.samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        assert_eq!(min, 0.0);
        assert!((p.background_level - 1.0).abs() < 1e-6);
    }

    #[test]
    fn recovers_hundred_nm() {
        let spec = single(100.0, 0.6, 0.0);
        let clean = render_clean(&spec).unwrap();
        let p = extract_profile(
            &clean.transmission,
            Point::new(2.0, 40.0),
            Point::new(125.0, 40.0),
            Some(&spec),
        )
        .unwrap();
        let m = measure_particle(&p).unwrap();
        assert!((m.diameter - 100.0).abs() < 1.0, "{m:?}");
        assert!((m.center - 62.0).abs() < 0.5, "{m:?}");
        assert!((m.amplitude - 0.6).abs() < 0.02, "{m:?}");
    }

    #[test]
    fn blur_widens_pseudo_diameter() {
        let spec = single(60.0, 0.7, 1.5);
        let clean = render_clean(&spec).unwrap();
        let p = extract_profile(
            &clean.transmission,
            Point::new(2.0, 40.0),
            Point::new(125.0, 40.0),
            Some(&spec),
        )
        .unwrap();
        let m = measure_particle(&p).unwrap();
        assert!((m.diameter - 60.0).abs() < 1.2, "{m:?}");
        assert!(m.pseudo_diameter.unwrap() > m.diameter);
        assert!(m.edge_width_valid());
    }

    #[test]
    fn narrow_dip_is_rejected() {
        let mut s: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, 1.0)).collect();
        s[10].1 = 0.2;
        s[11].1 = 0.3;
        let p = LineProfile {
            a: Point::new(0.0, 0.0),
            b: Point::new(19.0, 0.0),
            samples: s,
            background_level: 1.0,
        };
        assert!(matches!(
            measure_particle(&p),
            Err(Error::FitRegionTooSmall(2))
        ));
    }

    #[test]
    fn separation_examples() {
        let at = |d, c| ParticleMeasure {
            diameter: d,
            pseudo_diameter: None,
            edge_width: None,
            center: c,
            amplitude: 1.0,
        };
        assert_eq!(
            check_separation(&at(58.3, 0.0), &at(73.0, 78.4)),
            Separation::Separable
        );
        assert_eq!(
            check_separation(&at(72.5, 10.0), &at(53.8, 82.9)),
            Separation::Separable
        );
        assert_eq!(
            check_separation(&at(50.0, 0.0), &at(50.0, 50.0)),
            Separation::NotSeparable
        );
        assert_eq!(
            check_separation(&at(73.0, 78.4), &at(58.3, 0.0)),
            Separation::Separable
        );
    }

    #[test]
    fn splits_two_particles() {
        let spec = SceneSpec {
            particles: vec![
                Particle {
                    cx: 40.0,
                    cy: 40.0,
                    diameter_nm: 40.0,
                    absorption: 0.7,
                },
                Particle {
                    cx: 95.0,
                    cy: 40.0,
                    diameter_nm: 50.0,
                    absorption: 0.5,
                },
            ],
            edge_blur_sigma: 1.0,
            ..SceneSpec::empty(140, 80)
        };
        let clean = render_clean(&spec).unwrap();
        let p = extract_profile(
            &clean.transmission,
            Point::new(5.0, 40.0),
            Point::new(135.0, 40.0),
            Some(&spec),
        )
        .unwrap();
        let (l, r) = split_two_dips(&p).unwrap();
        let (ml, mr) = (measure_particle(&l).unwrap(), measure_particle(&r).unwrap());
        assert!(
            (ml.diameter - 40.0).abs() < 0.8 && (mr.diameter - 50.0).abs() < 1.0,
            "{ml:?} {mr:?}"
        );
        assert!((mr.center - ml.center - 55.0).abs() < 0.5);
        assert_eq!(check_separation(&ml, &mr), Separation::Separable);
    }
}
