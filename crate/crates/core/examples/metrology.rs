//! Measure particle diameters from line profiles and check whether two
//! neighbours are resolved.
//!
//! ```bash
//! cargo run --example metrology
//! ```

use lowdose::evalkit::{
    check_separation, extract_profile, measure_particle, split_two_dips, Point,
};
use lowdose::synthgen::{render_clean, Particle, SceneSpec};

fn scene(particles: Vec<Particle>) -> SceneSpec {
    SceneSpec {
        width: 160,
        height: 96,
        pixel_scale: 2.0,
        particles,
        background_level: 1.0,
        edge_blur_sigma: 1.0,
        seed: 0,
    }
}

fn particle(cx: f64, diameter_nm: f64) -> Particle {
    Particle {
        cx,
        cy: 48.0,
        diameter_nm,
        absorption: 0.7,
    }
}

fn main() -> lowdose::Result<()> {
    let single = scene(vec![particle(80.0, 95.0)]);
    let img = render_clean(&single)?.transmission;
    let prof = extract_profile(
        &img,
        Point::new(20.0, 48.0),
        Point::new(140.0, 48.0),
        Some(&single),
    )?;
    let m = measure_particle(&prof)?;
    println!("true diameter 95.0 nm");
    println!(
        "fitted {:.2} nm, pseudo-diameter {:?}, edge width {:?}",
        m.diameter, m.pseudo_diameter, m.edge_width
    );

    let pair = scene(vec![particle(55.0, 60.0), particle(105.0, 70.0)]);
    let img = render_clean(&pair)?.transmission;
    let prof = extract_profile(
        &img,
        Point::new(10.0, 48.0),
        Point::new(150.0, 48.0),
        Some(&pair),
    )?;
    let (left, right) = split_two_dips(&prof)?;
    let (p1, p2) = (measure_particle(&left)?, measure_particle(&right)?);
    println!(
        "pair: d1 {:.1} nm, d2 {:.1} nm, centers {:.1} nm apart -> {:?}",
        p1.diameter,
        p2.diameter,
        (p2.center - p1.center).abs(),
        check_separation(&p1, &p2)
    );
    Ok(())
}
