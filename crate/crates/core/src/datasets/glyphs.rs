//! Procedural digit-like glyphs: an offline stand-in for MNIST.
//!
//! Each class is a fixed set of polylines in a unit box. A sample applies a
//! random similarity transform (scale, rotation, shear, translation of up to
//! two pixels), per-vertex wobble and stroke-width jitter, then renders with
//! anti-aliased distance-to-segment intensity plus pixel noise.

use std::f64::consts::PI;

use super::{InstancePool, Split};
use crate::numerics::Rng;

const SIDE: usize = 28;
/// The glyph box spans 20x20 pixels centred in the 28x28 canvas, as in MNIST.
const BOX: f64 = 20.0;

type Polyline = Vec<(f64, f64)>;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64, steps: usize) -> Polyline {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Stroke skeletons; `y` grows downward.
fn skeleton(class: u8) -> Vec<Polyline> {
    match class {
        0 => vec![arc(0.5, 0.5, 0.3, 0.45, 0.0, 360.0, 24)],
        1 => vec![vec![(0.35, 0.2), (0.55, 0.05), (0.55, 0.95)], vec![(0.35, 0.95), (0.75, 0.95)]],
        2 => {
            let mut top = arc(0.5, 0.3, 0.28, 0.25, 200.0, 380.0, 12);
            top.extend([(0.2, 0.95), (0.82, 0.95)]);
            vec![top]
        }
        3 => vec![
            arc(0.48, 0.28, 0.28, 0.23, 210.0, 450.0, 14),
            arc(0.48, 0.72, 0.3, 0.23, 270.0, 510.0, 14),
        ],
        4 => vec![vec![(0.62, 0.05), (0.15, 0.65), (0.85, 0.65)], vec![(0.62, 0.3), (0.62, 0.98)]],
        5 => {
            let mut s = vec![(0.8, 0.05), (0.28, 0.05), (0.24, 0.45)];
            s.extend(arc(0.48, 0.68, 0.3, 0.27, 230.0, 490.0, 16));
            vec![s]
        }
        6 => {
            let mut s = vec![(0.7, 0.05)];
            s.extend(arc(0.55, 0.7, 0.32, 0.5, 240.0, 180.0, 6));
            vec![s, arc(0.5, 0.72, 0.28, 0.24, 0.0, 360.0, 18)]
        }
        7 => vec![vec![(0.15, 0.08), (0.85, 0.08), (0.42, 0.95)], vec![(0.35, 0.5), (0.72, 0.5)]],
        8 => vec![
            arc(0.5, 0.27, 0.24, 0.22, 0.0, 360.0, 18),
            arc(0.5, 0.72, 0.3, 0.25, 0.0, 360.0, 20),
        ],
        9 => vec![
            arc(0.48, 0.3, 0.27, 0.25, 0.0, 360.0, 18),
            vec![(0.75, 0.3), (0.7, 0.95)],
        ],
        _ => unreachable!("glyph classes are 0..=9"),
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn render(class: u8, rng: &mut Rng) -> Vec<u8> {
    let scale = BOX * rng.uniform_in(0.85, 1.1);
    let angle = rng.uniform_in(-12.0, 12.0) * PI / 180.0;
    let shear = rng.uniform_in(-0.15, 0.15);
    let (tx, ty) = (rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0));
    let radius = rng.uniform_in(0.9, 1.7);
    let wobble = 0.025;
    let (cos, sin) = (angle.cos(), angle.sin());

    let strokes: Vec<Polyline> = skeleton(class)
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|(x, y)| {
                    let x = x + rng.uniform_in(-wobble, wobble) - 0.5;
                    let y = y + rng.uniform_in(-wobble, wobble) - 0.5;
                    let x = x + shear * y;
                    let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
                    (14.0 + tx + scale * rx, 14.0 + ty + scale * ry)
                })
                .collect()
        })
        .collect();

    let mut img = vec![0u8; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
            let d = strokes
                .iter()
                .flat_map(|line| line.windows(2).map(|w| segment_distance(px, py, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.0 - (d - radius)).clamp(0.0, 1.0);
            let noisy = ink + rng.normal(0.0, 0.04);
            img[r * SIDE + c] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// `n_per_class` jittered samples of each of the ten glyph classes, in
/// class-interleaved order. Deterministic in `seed`.
pub fn synth_glyphs(n_per_class: usize, seed: u64, split: Split) -> InstancePool {
    assert!(n_per_class >= 1, "n_per_class must be positive");
    let mut rng = Rng::labeled(seed, "glyphs");
    let mut pixels = Vec::with_capacity(10 * n_per_class * SIDE * SIDE);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    for _ in 0..n_per_class {
        for class in 0..10u8 {
            pixels.extend(render(class, &mut rng));
            labels.push(class);
        }
    }
    InstancePool::new(SIDE, SIDE, pixels, labels, split).expect("consistent glyph pool")
}
