//! Plain-text scene description.
//!
//! ```text
//! # lowdose scene v1
//! canvas = 512 512
//! pixel_scale_nm = 1
//! background_level = 1
//! edge_blur_sigma_px = 1.25
//! seed = 42
//! particles = 2
//! particle = 100.5 200.25 95.2 0.6
//! particle = 300 310 58.3 0.12
//! ```
//!
//! One `key = value` per line, `#` starts a comment. Each `particle` line is
//! `cx_px cy_px diameter_nm absorption`; their number must equal
//! `particles`. Reals are written in shortest round-trip form.

use std::fmt::Write;

use super::{Particle, SceneSpec};
use crate::error::{Error, Result};

pub fn write_scene(spec: &SceneSpec) -> String {
    let mut s = String::from("# lowdose scene v1\n");
    let _ = writeln!(s, "canvas = {} {}", spec.width, spec.height);
    let _ = writeln!(s, "pixel_scale_nm = {}", spec.pixel_scale);
    let _ = writeln!(s, "background_level = {}", spec.background_level);
    let _ = writeln!(s, "edge_blur_sigma_px = {}", spec.edge_blur_sigma);
    let _ = writeln!(s, "seed = {}", spec.seed);
    let _ = writeln!(s, "particles = {}", spec.particles.len());
    for p in &spec.particles {
        let _ = writeln!(
            s,
            "particle = {} {} {} {}",
            p.cx, p.cy, p.diameter_nm, p.absorption
        );
    }
    s
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Synth(format!("scene file: {}", msg.into()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(format!("bad value for {key}: {v:?}")))
}

pub fn parse_scene(text: &str) -> Result<SceneSpec> {
    let mut canvas = None;
    let mut pixel_scale = None;
    let mut background = None;
    let mut sigma = None;
    let mut seed = None;
    let mut declared = None;
    let mut particles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "canvas" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(bad("canvas needs width and height"));
                }
                canvas = Some((num::<usize>(key, parts[0])?, num::<usize>(key, parts[1])?));
            }
            "pixel_scale_nm" => pixel_scale = Some(num::<f64>(key, value)?),
            "background_level" => background = Some(num::<f64>(key, value)?),
            "edge_blur_sigma_px" => sigma = Some(num::<f64>(key, value)?),
            "seed" => seed = Some(num::<u64>(key, value)?),
            "particles" => declared = Some(num::<usize>(key, value)?),
            "particle" => {
                let f: Vec<f64> = value
                    .split_whitespace()
                    .map(|v| num::<f64>(key, v))
                    .collect::<Result<_>>()?;
                if f.len() != 4 {
                    return Err(bad(format!("line {}: particle needs 4 fields", lineno + 1)));
                }
                particles.push(Particle {
                    cx: f[0],
                    cy: f[1],
                    diameter_nm: f[2],
                    absorption: f[3],
                });
            }
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    let declared = declared.ok_or_else(|| bad("missing particles count"))?;
    if declared != particles.len() {
        return Err(bad(format!(
            "declares {declared} particles but lists {}",
            particles.len()
        )));
    }
    let (width, height) = canvas.ok_or_else(|| bad("missing canvas"))?;
    let spec = SceneSpec {
        width,
        height,
        pixel_scale: pixel_scale.ok_or_else(|| bad("missing pixel_scale_nm"))?,
        particles,
        background_level: background.ok_or_else(|| bad("missing background_level"))?,
        edge_blur_sigma: sigma.ok_or_else(|| bad("missing edge_blur_sigma_px"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
    };
    spec.validate()?;
    Ok(spec)
}
