//! Synthetic indoor rooms with dense labels.
//!
//! A room is a floor plane and four walls (one wall instance) plus primitive
//! objects standing on the floor: boxes, spheres, cylinders and small clutter
//! blobs. Points are sampled on surfaces with Gaussian jitter. Features are
//! `[r, g, b, h]` with `h` the height above the floor (clamped at zero for
//! jittered floor points). Every class draws colors from its own mean and covariance, and
//! instances share a per-instance color offset.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::scene::{LabeledScene, PointCloud};
use crate::seed::derive_seed;

pub const CLASS_NAMES: [&str; 6] = ["floor", "wall", "box", "sphere", "cylinder", "clutter"];
pub const FLOOR: usize = 0;
pub const WALL: usize = 1;
const FEAT_DIM: usize = 4;
const MIN_OBJECT_POINTS: usize = 16;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub n_points: usize,
    /// 2 (floor and wall only) up to 6.
    pub k_classes: usize,
    /// Room extents `[x, y, z]` in meters. The floor is centered on the origin.
    pub room: [f64; 3],
    /// Inclusive `(min, max)` instance counts for box, sphere, cylinder, clutter.
    pub object_counts: [(usize, usize); 4],
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_points: 2048,
            k_classes: 6,
            room: [6.0, 6.0, 3.0],
            object_counts: [(1, 3), (1, 2), (1, 2), (1, 3)],
            noise_sigma: 0.01,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_points < 64 {
            return Err(Error::invalid(format!("n_points must be at least 64, got {}", self.n_points)));
        }
        if !(2..=6).contains(&self.k_classes) {
            return Err(Error::invalid(format!("k_classes must be in 2..=6, got {}", self.k_classes)));
        }
        if self.room.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(Error::invalid("room extents must be positive"));
        }
        if self.object_counts.iter().any(|(lo, hi)| lo > hi) {
            return Err(Error::invalid("object count range has min > max"));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Mean color and a lower-triangular spread factor.
struct ColorModel {
    mean: [f64; 3],
    factor: [[f64; 3]; 3],
}

fn color_model(class: usize) -> ColorModel {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match class {
        // brownish, varying mostly in brightness
        0 => {
            ColorModel { mean: [0.55, 0.45, 0.35], factor: [[0.12, 0.0, 0.0], [0.096, 0.02, 0.0], [0.072, 0.0, 0.02]] }
        }
        1 => ColorModel { mean: [0.82, 0.82, 0.78], factor: [[0.03, 0.0, 0.0], [0.0, 0.03, 0.0], [0.0, 0.0, 0.03]] },
        // red, spread in the red channel
        2 => ColorModel { mean: [0.7, 0.3, 0.25], factor: [[0.16, 0.0, 0.0], [0.0, 0.03, 0.0], [0.0, 0.0, 0.03]] },
        // blue, green and blue correlated
        3 => ColorModel {
            mean: [0.25, 0.4, 0.7],
            factor: [[0.03, 0.0, 0.0], [0.0, 0.14 * s, 0.0], [0.0, 0.14 * s, 0.03]],
        },
        4 => ColorModel { mean: [0.35, 0.6, 0.3], factor: [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]] },
        _ => ColorModel { mean: [0.5, 0.5, 0.5], factor: [[0.18, 0.0, 0.0], [0.0, 0.18, 0.0], [0.0, 0.0, 0.18]] },
    }
}

fn correlated<R: Rng + ?Sized>(model: &ColorModel, scale: f64, rng: &mut R) -> [f64; 3] {
    let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = scale * (0..3).map(|j| model.factor[i][j] * z[j]).sum::<f64>();
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Floor,
    Walls,
    Box { center: [f64; 2], half: [f64; 3], yaw: f64 },
    Sphere { center: [f64; 2], radius: f64 },
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
    Clutter { center: [f64; 2], radii: [f64; 3] },
}

impl Shape {
    fn footprint(&self) -> Option<([f64; 2], f64)> {
        match *self {
            Shape::Box { center, half, .. } => Some((center, half[0].hypot(half[1]))),
            Shape::Sphere { center, radius } | Shape::Cylinder { center, radius, .. } => Some((center, radius)),
            Shape::Clutter { center, radii } => Some((center, radii[0].max(radii[1]))),
            _ => None,
        }
    }

    fn area(&self, room: [f64; 3]) -> f64 {
        match *self {
            Shape::Floor => room[0] * room[1],
            Shape::Walls => 2.0 * (room[0] + room[1]) * room[2],
            Shape::Box { half, .. } => {
                let [a, b, c] = half.map(|h| 2.0 * h);
                a * b + 2.0 * (a * c + b * c)
            }
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Shape::Cylinder { radius, height, .. } => 2.0 * PI * radius * height + PI * radius * radius,
            Shape::Clutter { radii, .. } => {
                4.0 * PI * (radii[0] * radii[1] + radii[1] * radii[2] + radii[0] * radii[2]) / 3.0
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, room: [f64; 3], rng: &mut R) -> [f64; 3] {
        match *self {
            Shape::Floor => [rng.random_range(0.0..room[0]), rng.random_range(0.0..room[1]), 0.0],
            Shape::Walls => {
                let perimeter = 2.0 * (room[0] + room[1]);
                let t = rng.random_range(0.0..perimeter);
                let z = rng.random_range(0.0..room[2]);
                if t < room[0] {
                    [t, 0.0, z]
                } else if t < room[0] + room[1] {
                    [room[0], t - room[0], z]
                } else if t < 2.0 * room[0] + room[1] {
                    [2.0 * room[0] + room[1] - t, room[1], z]
                } else {
                    [0.0, perimeter - t, z]
                }
            }
            Shape::Box { center, half, yaw } => {
                let [hx, hy, hz] = half;
                // top face plus four sides, area-weighted
                let faces = [4.0 * hx * hy, 4.0 * hx * hz, 4.0 * hx * hz, 4.0 * hy * hz, 4.0 * hy * hz];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                while face < 4 && pick >= faces[face] {
                    pick -= faces[face];
                    face += 1;
                }
                let u = rng.random_range(-1.0..1.0);
                let v = rng.random_range(-1.0..1.0);
                let local = match face {
                    0 => [u * hx, v * hy, hz],
                    1 => [u * hx, -hy, v * hz],
                    2 => [u * hx, hy, v * hz],
                    3 => [-hx, u * hy, v * hz],
                    _ => [hx, u * hy, v * hz],
                };
                let (s, c) = yaw.sin_cos();
                [center[0] + c * local[0] - s * local[1], center[1] + s * local[0] + c * local[1], hz + local[2]]
            }
            Shape::Sphere { center, radius } => {
                let z = rng.random_range(-1.0..1.0f64);
                let phi = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                [center[0] + radius * r * phi.cos(), center[1] + radius * r * phi.sin(), radius + radius * z]
            }
            Shape::Cylinder { center, radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                let phi = rng.random_range(0.0..2.0 * PI);
                if rng.random_range(0.0..side + cap) < side {
                    [center[0] + radius * phi.cos(), center[1] + radius * phi.sin(), rng.random_range(0.0..height)]
                } else {
                    let r = radius * rng.random_range(0.0..1.0f64).sqrt();
                    [center[0] + r * phi.cos(), center[1] + r * phi.sin(), height]
                }
            }
            Shape::Clutter { center, radii } => {
                let z = rng.random_range(-1.0..1.0f64);
                let phi = rng.random_range(0.0..2.0 * PI);
                let r = (1.0 - z * z).sqrt();
                [center[0] + radii[0] * r * phi.cos(), center[1] + radii[1] * r * phi.sin(), radii[2] * (1.0 + z)]
            }
        }
    }
}

fn random_object<R: Rng + ?Sized>(class: usize, center: [f64; 2], rng: &mut R) -> Shape {
    match class {
        2 => Shape::Box {
            center,
            half: [rng.random_range(0.2..0.5), rng.random_range(0.2..0.5), rng.random_range(0.15..0.5)],
            yaw: rng.random_range(0.0..PI),
        },
        3 => Shape::Sphere { center, radius: rng.random_range(0.25..0.5) },
        4 => Shape::Cylinder { center, radius: rng.random_range(0.15..0.35), height: rng.random_range(0.5..1.5) },
        _ => Shape::Clutter {
            center,
            radii: [rng.random_range(0.1..0.25), rng.random_range(0.1..0.25), rng.random_range(0.05..0.2)],
        },
    }
}

/// Splits `total` proportionally to `weights` with a per-entry minimum,
/// using largest remainders so the parts sum to `total` exactly.
fn allocate(total: usize, weights: &[f64], minimum: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let base = minimum.min(total / weights.len());
    let rest = total - base * weights.len();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / sum).collect();
    let mut parts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = rest - parts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        parts[i] += 1;
        left -= 1;
    }
    parts.iter().map(|p| p + base).collect()
}

pub fn generate_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> Result<LabeledScene> {
    spec.validate()?;
    let room = spec.room;
    let mut instances: Vec<(usize, Shape)> = vec![(FLOOR, Shape::Floor), (WALL, Shape::Walls)];
    let margin = 0.1;
    for class in 2..spec.k_classes {
        let (lo, hi) = spec.object_counts[class - 2];
        let count = rng.random_range(lo..=hi);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let probe = random_object(class, [0.0, 0.0], rng);
                let (_, radius) = probe.footprint().expect("objects have footprints");
                let span = [room[0] - 2.0 * (radius + margin), room[1] - 2.0 * (radius + margin)];
                if span[0] <= 0.0 || span[1] <= 0.0 {
                    continue;
                }
                let center = [
                    radius + margin + rng.random_range(0.0..span[0]),
                    radius + margin + rng.random_range(0.0..span[1]),
                ];
                let clear = instances
                    .iter()
                    .filter_map(|(_, s)| s.footprint())
                    .all(|(c, r)| (c[0] - center[0]).hypot(c[1] - center[1]) >= r + radius + margin);
                if clear {
                    let shape = match probe {
                        Shape::Box { half, yaw, .. } => Shape::Box { center, half, yaw },
                        Shape::Sphere { radius, .. } => Shape::Sphere { center, radius },
                        Shape::Cylinder { radius, height, .. } => Shape::Cylinder { center, radius, height },
                        Shape::Clutter { radii, .. } => Shape::Clutter { center, radii },
                        other => other,
                    };
                    instances.push((class, shape));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Packing { attempts: PLACEMENT_ATTEMPTS });
            }
        }
    }

    let n = spec.n_points;
    let counts = if instances.len() == 2 {
        allocate(n, &[0.45, 0.55], 1)
    } else {
        let n_floor = n / 4;
        let n_wall = (3 * n) / 10;
        let objects: Vec<f64> = instances[2..].iter().map(|(_, s)| s.area(room)).collect();
        let mut counts = vec![n_floor, n_wall];
        counts.extend(allocate(n - n_floor - n_wall, &objects, MIN_OBJECT_POINTS));
        counts
    };

    let jitter = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut coords = Vec::with_capacity(n * 3);
    let mut feats = Vec::with_capacity(n * FEAT_DIM);
    let mut classes = Vec::with_capacity(n);
    let mut instance_ids = Vec::with_capacity(n);
    for (inst, ((class, shape), &count)) in instances.iter().zip(&counts).enumerate() {
        let model = color_model(*class);
        let offset = correlated(&model, 0.7, rng);
        for _ in 0..count {
            let mut p = shape.sample(room, rng);
            if spec.noise_sigma > 0.0 {
                p.iter_mut().for_each(|v| *v += jitter.sample(rng));
            }
            let spread = correlated(&model, 0.7, rng);
            let rgb: [f64; 3] = std::array::from_fn(|c| (model.mean[c] + offset[c] + spread[c]).clamp(0.0, 1.0));
            let h = p[2].max(0.0);
            p[0] -= 0.5 * room[0];
            p[1] -= 0.5 * room[1];
            coords.extend_from_slice(&p);
            feats.extend_from_slice(&[rgb[0], rgb[1], rgb[2], h]);
            classes.push(*class);
            instance_ids.push(inst);
        }
    }
    let cloud = PointCloud::new(Array::matrix(n, 3, coords)?, Array::matrix(n, FEAT_DIM, feats)?)?;
    LabeledScene::new(cloud, classes, instance_ids, spec.k_classes)
}

/// Scene `i` is generated from `derive_seed(seed, i)`.
pub fn generate_dataset(spec: &SceneSpec, n_scenes: usize, seed: u64) -> Result<Vec<LabeledScene>> {
    if n_scenes == 0 {
        return Err(Error::invalid("need at least one scene"));
    }
    (0..n_scenes).map(|i| generate_scene(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64)))).collect()
}
