//! Synthetic collaborative-robot scene generator.
//!
//! The room layout is fixed; randomness enters only through point sampling
//! and Gaussian jitter, so a (spec, seed) pair fully determines the frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use serde::{Deserialize, Serialize};

use crate::data::{
    ClassId, PointFrame, CLASS_AGV, CLASS_COBOT, CLASS_FLOOR, CLASS_HUMAN, CLASS_WALL,
};
use crate::error::{GzslError, Result};

fn default_room() -> [f64; 3] {
    [6.0, 4.0, 3.0]
}
fn default_sigma() -> f64 {
    0.01
}

/// Target per-class point counts plus room geometry for one synthetic frame.
///
/// The default counts mirror a representative per-frame distribution of a
/// collaborative-robot LiDAR scan: floor 10000, wall 13400, cobot 1800,
/// human 2800, AGV 1200 in a 6 x 4 m room.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub floor_points: usize,
    pub wall_points: usize,
    pub cobot_points: usize,
    pub human_points: usize,
    pub agv_points: usize,
    /// Room extents in meters: x, y, z.
    #[serde(default = "default_room")]
    pub room: [f64; 3],
    /// Standard deviation of the Gaussian jitter added to every point.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn default_with_seed(seed: u64) -> Self {
        SceneSpec {
            floor_points: 10_000,
            wall_points: 13_400,
            cobot_points: 1_800,
            human_points: 2_800,
            agv_points: 1_200,
            room: default_room(),
            noise_sigma: default_sigma(),
            seed,
        }
    }

    /// Scales all per-class counts by `factor` (rounded to nearest).
    pub fn scaled(&self, factor: f64) -> SceneSpec {
        let s = |n: usize| (n as f64 * factor).round() as usize;
        SceneSpec {
            floor_points: s(self.floor_points),
            wall_points: s(self.wall_points),
            cobot_points: s(self.cobot_points),
            human_points: s(self.human_points),
            agv_points: s(self.agv_points),
            ..*self
        }
    }

    pub fn total(&self) -> usize {
        self.floor_points + self.wall_points + self.cobot_points + self.human_points
            + self.agv_points
    }

    pub fn validate(&self) -> Result<()> {
        if !self.room.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(GzslError::arg("room extents must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(GzslError::arg("noise sigma must be >= 0"));
        }
        if self.total() > 100_000_000 {
            return Err(GzslError::arg("scene too large"));
        }
        Ok(())
    }
}

/// Walls return no hits below this height (floor clutter occlusion).
const WALL_Z_MIN: f64 = 0.35;
/// The cobot's workbench mount height.
const COBOT_Z_BASE: f64 = 0.5;
/// Shortest sensor range for the floor's radial density falloff.
const SENSOR_NEAR_RANGE: f64 = 0.4;

/// Axis-aligned box `[min, max]` sampled uniformly by volume.
struct BoxRegion {
    min: [f64; 3],
    max: [f64; 3],
}

impl BoxRegion {
    fn volume(&self) -> f64 {
        (0..3).map(|i| self.max[i] - self.min[i]).product()
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> [f64; 3] {
        let mut p = [0.0; 3];
        for i in 0..3 {
            p[i] = rng.random_range(self.min[i]..self.max[i]);
        }
        p
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn volume(&self) -> f64 {
        self.radii.iter().product::<f64>() // up to the constant 4pi/3, shared by all
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> [f64; 3] {
        // uniform in the unit ball, then scaled per axis
        let dir: [f64; 3] = {
            loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break [v[0] / norm, v[1] / norm, v[2] / norm];
                }
            }
        };
        let radius = rng.random_range(0.0..1.0f64).cbrt();
        let mut p = self.center;
        for i in 0..3 {
            p[i] += dir[i] * radius * self.radii[i];
        }
        p
    }
}

fn sample_weighted<'a, T>(regions: &'a [(T, f64)], rng: &mut ChaCha12Rng) -> &'a T {
    let total: f64 = regions.iter().map(|(_, w)| w).sum();
    let mut pick = rng.random_range(0.0..total);
    for (region, weight) in regions {
        if pick < *weight {
            return region;
        }
        pick -= weight;
    }
    &regions.last().unwrap().0
}

fn cobot_boxes(cx: f64, cy: f64) -> [BoxRegion; 3] {
    let zb = COBOT_Z_BASE;
    [
        BoxRegion {
            min: [cx - 0.2, cy - 0.2, zb],
            max: [cx + 0.2, cy + 0.2, zb + 0.8],
        },
        BoxRegion {
            min: [cx - 0.1, cy - 0.1, zb + 0.8],
            max: [cx + 0.1, cy + 0.1, zb + 1.4],
        },
        BoxRegion {
            min: [cx - 0.1, cy - 0.1, zb + 1.4],
            max: [cx + 0.5, cy + 0.1, zb + 1.6],
        },
    ]
}

fn human_parts(hx: f64, hy: f64) -> [Ellipsoid; 2] {
    [
        Ellipsoid {
            center: [hx, hy, 0.9],
            radii: [0.25, 0.2, 0.45],
        },
        Ellipsoid {
            center: [hx, hy, 1.55],
            radii: [0.12, 0.12, 0.15],
        },
    ]
}

/// Generates one frame with exactly the per-class counts of `spec`.
///
/// Floor points sample the z = 0 plane with a radial density falloff
/// around the sensor position (return density drops with range); wall
/// points sample the four vertical boundary planes above an occlusion
/// strip. The cobot is a stack of boxes on a workbench pedestal, the human
/// two vertical ellipsoids (torso and head), and the AGV a low box on the
/// floor. Gaussian jitter of `noise_sigma` is added to every coordinate.
pub fn generate_scene(spec: &SceneSpec) -> Result<PointFrame> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let [lx, ly, lz] = spec.room;
    let mut points: Vec<[f64; 3]> = Vec::with_capacity(spec.total());
    let mut labels: Vec<ClassId> = Vec::with_capacity(spec.total());

    let mut push = |p: [f64; 3], label: ClassId, rng: &mut ChaCha12Rng| {
        let jitter = |rng: &mut ChaCha12Rng| -> f64 {
            let n: f64 = StandardNormal.sample(rng);
            n * spec.noise_sigma
        };
        points.push([p[0] + jitter(rng), p[1] + jitter(rng), p[2] + jitter(rng)]);
        labels.push(label);
    };

    // floor: z = 0 plane, radial return-density falloff around the sensor
    // at the room center (grazing-angle density ~ 1/r^2, so p(r) ~ 1/r^2
    // after the r dr area element is folded in)
    let sensor = (lx / 2.0, ly / 2.0);
    let max_range = (lx * lx + ly * ly).sqrt() / 2.0;
    for _ in 0..spec.floor_points {
        let p = loop {
            let u: f64 = rng.random_range(0.0..1.0);
            let inv = 1.0 / SENSOR_NEAR_RANGE - u * (1.0 / SENSOR_NEAR_RANGE - 1.0 / max_range);
            let r = 1.0 / inv;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (sensor.0 + r * theta.cos(), sensor.1 + r * theta.sin());
            if x >= 0.0 && x <= lx && y >= 0.0 && y <= ly {
                break [x, y, 0.0];
            }
        };
        push(p, CLASS_FLOOR, &mut rng);
    }

    // walls: the four vertical boundary planes, weighted by area; the strip
    // below WALL_Z_MIN is occluded by floor clutter and never returns hits
    for _ in 0..spec.wall_points {
        let wall_weights = [(0usize, ly * lz), (1, ly * lz), (2, lx * lz), (3, lx * lz)];
        let which = *sample_weighted(&wall_weights, &mut rng);
        let z = rng.random_range(WALL_Z_MIN..lz);
        let p = match which {
            0 => [0.0, rng.random_range(0.0..ly), z],
            1 => [lx, rng.random_range(0.0..ly), z],
            2 => [rng.random_range(0.0..lx), 0.0, z],
            _ => [rng.random_range(0.0..lx), ly, z],
        };
        push(p, CLASS_WALL, &mut rng);
    }

    // cobot: pedestal plus two arm segments at its work cell
    let boxes = cobot_boxes(0.3 * lx, 0.3 * ly);
    let weighted: Vec<(usize, f64)> =
        boxes.iter().enumerate().map(|(i, b)| (i, b.volume())).collect();
    for _ in 0..spec.cobot_points {
        let which = *sample_weighted(&weighted, &mut rng);
        let p = boxes[which].sample(&mut rng);
        push(p, CLASS_COBOT, &mut rng);
    }

    // human: torso + head ellipsoids
    let parts = human_parts(0.7 * lx, 0.7 * ly);
    let weighted: Vec<(usize, f64)> =
        parts.iter().enumerate().map(|(i, e)| (i, e.volume())).collect();
    for _ in 0..spec.human_points {
        let which = *sample_weighted(&weighted, &mut rng);
        let p = parts[which].sample(&mut rng);
        push(p, CLASS_HUMAN, &mut rng);
    }

    // AGV: a low box parked mid-room near the sensor aisle
    let (ax, ay) = (0.55 * lx, 0.5 * ly);
    let agv = BoxRegion {
        min: [ax - 0.5, ay - 0.3, 0.0],
        max: [ax + 0.5, ay + 0.3, 0.3],
    };
    for _ in 0..spec.agv_points {
        let p = agv.sample(&mut rng);
        push(p, CLASS_AGV, &mut rng);
    }

    PointFrame::new(points, labels, format!("scene-{}", spec.seed))
}
