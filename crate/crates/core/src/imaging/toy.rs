//! Procedural retina-like images: field-of-view disc, optic disc, macula,
//! vessel curves rooted at the optic disc, and small lesion spots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ImageTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    Hemorrhage,
    Exudate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionSpot {
    pub x: f32,
    pub y: f32,
    pub radius: f32,
    pub kind: LesionKind,
}

/// Quadratic Bézier `start → control → end`, drawn with a given width in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselCurve {
    pub points: [(f32, f32); 3],
    pub width: f32,
}

impl VesselCurve {
    pub fn at(&self, t: f32) -> (f32, f32) {
        let [p0, p1, p2] = self.points;
        let u = 1.0 - t;
        (
            u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
            u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
        )
    }
}

/// Ground truth of one rendered toy image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    pub size: usize,
    pub fov_center: (f32, f32),
    pub fov_radius: f32,
    pub disc_center: (f32, f32),
    pub disc_radius: f32,
    pub macula_center: (f32, f32),
    pub vessel_tree: Vec<VesselCurve>,
    pub lesion_spots: Vec<LesionSpot>,
    pub background_tint: [f32; 3],
}

impl ToyParams {
    pub fn has_lesions(&self) -> bool {
        !self.lesion_spots.is_empty()
    }

    pub fn in_fov(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.fov_center.0, y - self.fov_center.1);
        dx * dx + dy * dy <= self.fov_radius * self.fov_radius
    }
}

const SUPPORTED: [usize; 4] = [32, 64, 128, 256];
const MAX_LESIONS: usize = 5;

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn dist_to_segment(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn sample_params(seed: u64, size: usize) -> ToyParams {
    let mut rng = rng_for(seed, "toy-fundus");
    let s = size as f32;
    let fov_center = (s / 2.0, s / 2.0);
    let fov_radius = 0.46 * s;

    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let disc_radius = s * rng.random_range(0.07..0.095);
    let disc_center = (
        fov_center.0 + side * s * rng.random_range(0.17..0.24),
        fov_center.1 + s * rng.random_range(-0.05..0.05),
    );
    let macula_center = (
        fov_center.0 - side * s * rng.random_range(0.08..0.14),
        fov_center.1 + s * rng.random_range(-0.03..0.03),
    );

    let n_vessels = rng.random_range(3..=6);
    let mut vessel_tree = Vec::with_capacity(n_vessels);
    for k in 0..n_vessels {
        // fan out around the disc
        let base = std::f32::consts::TAU * (k as f32 + rng.random_range(0.0..0.6)) / n_vessels as f32;
        let len = fov_radius * rng.random_range(0.55..0.95);
        let bend = rng.random_range(-0.6f32..0.6);
        let mut end = (disc_center.0 + len * base.cos(), disc_center.1 + len * base.sin());
        // pull the endpoint back inside the field of view
        let (dx, dy) = (end.0 - fov_center.0, end.1 - fov_center.1);
        let r = (dx * dx + dy * dy).sqrt();
        if r > 0.92 * fov_radius {
            let f = 0.92 * fov_radius / r;
            end = (fov_center.0 + dx * f, fov_center.1 + dy * f);
        }
        let mid = (
            (disc_center.0 + end.0) / 2.0 - bend * (end.1 - disc_center.1) * 0.5,
            (disc_center.1 + end.1) / 2.0 + bend * (end.0 - disc_center.0) * 0.5,
        );
        vessel_tree.push(VesselCurve {
            points: [disc_center, mid, end],
            width: (s / 64.0) * rng.random_range(0.6..1.4),
        });
    }

    let n_lesions = rng.random_range(0..=MAX_LESIONS);
    let mut lesion_spots = Vec::with_capacity(n_lesions);
    while lesion_spots.len() < n_lesions {
        let radius = s * rng.random_range(0.025..0.05);
        let ang = rng.random_range(0.0..std::f32::consts::TAU);
        let rr = rng.random_range(0.0..(fov_radius - radius - 1.0));
        let (x, y) = (fov_center.0 + rr * ang.cos(), fov_center.1 + rr * ang.sin());
        // keep lesions off the optic disc so they stay visible
        let (ddx, ddy) = (x - disc_center.0, y - disc_center.1);
        if (ddx * ddx + ddy * ddy).sqrt() < disc_radius + radius {
            continue;
        }
        let kind = if rng.random_bool(0.5) { LesionKind::Hemorrhage } else { LesionKind::Exudate };
        lesion_spots.push(LesionSpot { x, y, radius, kind });
    }

    let background_tint = [
        rng.random_range(0.72..0.86),
        rng.random_range(0.30..0.42),
        rng.random_range(0.12..0.22),
    ];
    ToyParams {
        size,
        fov_center,
        fov_radius,
        disc_center,
        disc_radius,
        macula_center,
        vessel_tree,
        lesion_spots,
        background_tint,
    }
}

fn render(p: &ToyParams) -> Tensor {
    let s = p.size;
    let sf = s as f32;
    let mut rgb = vec![[0.0f32; 3]; s * s];

    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - p.fov_center.0, py - p.fov_center.1);
            let r = (dx * dx + dy * dy).sqrt() / p.fov_radius;
            let vignette = 1.0 - 0.35 * r * r;
            let mut c = p.background_tint.map(|v| v * vignette);

            let (mx, my) = (px - p.macula_center.0, py - p.macula_center.1);
            let mac = (-(mx * mx + my * my) / (2.0 * (0.07 * sf).powi(2))).exp();
            for (ch, k) in c.iter_mut().zip([0.45, 0.55, 0.5]) {
                *ch *= 1.0 - k * mac;
            }

            let (ox, oy) = (px - p.disc_center.0, py - p.disc_center.1);
            let dd = (ox * ox + oy * oy).sqrt();
            let disc = 1.0 - smoothstep(p.disc_radius * 0.75, p.disc_radius, dd);
            let glow = (-(dd * dd) / (2.0 * (1.6 * p.disc_radius).powi(2))).exp() * 0.25;
            let disc_col = [0.98, 0.86, 0.55];
            for (ch, dc) in c.iter_mut().zip(disc_col) {
                *ch = *ch * (1.0 - disc) + dc * disc + glow * (dc - *ch).max(0.0);
            }
            rgb[y * s + x] = c;
        }
    }

    // vessels: darken along each curve with a soft edge
    let mut vessel = vec![0.0f32; s * s];
    const SEGMENTS: usize = 24;
    for curve in &p.vessel_tree {
        let pts: Vec<(f32, f32)> = (0..=SEGMENTS).map(|i| curve.at(i as f32 / SEGMENTS as f32)).collect();
        for (k, seg) in pts.windows(2).enumerate() {
            let taper = 1.0 - 0.5 * (k as f32 / SEGMENTS as f32);
            let half = 0.5 * curve.width * taper;
            let reach = half + 1.5;
            let x0 = (seg[0].0.min(seg[1].0) - reach).floor().max(0.0) as usize;
            let x1 = ((seg[0].0.max(seg[1].0) + reach).ceil() as usize).min(s);
            let y0 = (seg[0].1.min(seg[1].1) - reach).floor().max(0.0) as usize;
            let y1 = ((seg[0].1.max(seg[1].1) + reach).ceil() as usize).min(s);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = dist_to_segment((x as f32 + 0.5, y as f32 + 0.5), seg[0], seg[1]);
                    let a = 1.0 - smoothstep(half, half + 1.0, d);
                    let v = &mut vessel[y * s + x];
                    *v = v.max(a);
                }
            }
        }
    }
    let vessel_col = [0.42, 0.06, 0.05];
    for (c, a) in rgb.iter_mut().zip(&vessel) {
        let a = a * 0.85;
        for (ch, vc) in c.iter_mut().zip(vessel_col) {
            *ch = *ch * (1.0 - a) + vc * a;
        }
    }

    for l in &p.lesion_spots {
        let col = match l.kind {
            LesionKind::Hemorrhage => [0.30, 0.02, 0.02],
            LesionKind::Exudate => [0.97, 0.93, 0.55],
        };
        let reach = l.radius + 1.5;
        let x0 = (l.x - reach).floor().max(0.0) as usize;
        let x1 = ((l.x + reach).ceil() as usize).min(s);
        let y0 = (l.y - reach).floor().max(0.0) as usize;
        let y1 = ((l.y + reach).ceil() as usize).min(s);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 + 0.5 - l.x, y as f32 + 0.5 - l.y);
                let a = 1.0 - smoothstep(l.radius - 1.0, l.radius, (dx * dx + dy * dy).sqrt());
                let c = &mut rgb[y * s + x];
                for (ch, lc) in c.iter_mut().zip(col) {
                    *ch = *ch * (1.0 - a) + lc * a;
                }
            }
        }
    }

    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let i = y * s + x;
            let inside = p.in_fov(x as f32 + 0.5, y as f32 + 0.5);
            for ch in 0..3 {
                data[ch * s * s + i] = if inside {
                    (2.0 * rgb[i][ch] - 1.0).clamp(-1.0, 1.0)
                } else {
                    -1.0
                };
            }
        }
    }
    Tensor::new(&[3, s, s], data).expect("render shape")
}

/// Render the toy image for `seed` at `size ∈ {32, 64, 128, 256}`.
pub fn synthesize_toy_fundus(seed: u64, size: usize) -> Result<(ImageTensor, ToyParams)> {
    if !SUPPORTED.contains(&size) {
        return Err(Error::Resolution(format!(
            "toy fundus size must be one of {SUPPORTED:?}, got {size}"
        )));
    }
    let params = sample_params(seed, size);
    let img = ImageTensor::new(render(&params))?;
    Ok((img, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let (a, pa) = synthesize_toy_fundus(0, 64).unwrap();
        let (b, pb) = synthesize_toy_fundus(0, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        let (c, _) = synthesize_toy_fundus(1, 64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn outside_fov_is_black() {
        for seed in 0..10 {
            let (img, p) = synthesize_toy_fundus(seed, 64).unwrap();
            let d = img.tensor().data();
            for y in 0..64 {
                for x in 0..64 {
                    if !p.in_fov(x as f32 + 0.5, y as f32 + 0.5) {
                        for ch in 0..3 {
                            assert_eq!(d[ch * 4096 + y * 64 + x], -1.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn structure_contract() {
        for seed in 0..50 {
            let (_, p) = synthesize_toy_fundus(seed, 128).unwrap();
            assert!(p.vessel_tree.len() >= 3);
            assert!(p.vessel_tree.iter().all(|v| v.points[0] == p.disc_center));
            let inside = |x: f32, y: f32, r: f32| {
                let (dx, dy) = (x - p.fov_center.0, y - p.fov_center.1);
                (dx * dx + dy * dy).sqrt() + r <= p.fov_radius
            };
            assert!(inside(p.disc_center.0, p.disc_center.1, p.disc_radius));
            assert!(p.lesion_spots.iter().all(|l| inside(l.x, l.y, l.radius)));
            assert!(p.lesion_spots.len() <= 5);
        }
    }

    #[test]
    fn lesion_histogram_spans_zero_to_five() {
        let mut hist = [0usize; 6];
        for seed in 0..200 {
            let (_, p) = synthesize_toy_fundus(seed, 32).unwrap();
            hist[p.lesion_spots.len()] += 1;
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn unsupported_size() {
        assert!(synthesize_toy_fundus(0, 512).is_err());
    }
}
