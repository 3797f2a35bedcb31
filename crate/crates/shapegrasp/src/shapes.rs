//! Synthetic canonical shapes and metric scale sampling.
//!
//! Each category is a parametric primitive assembly sampled area-weighted
//! with analytic outward normals, then normalized to unit-canonical space
//! (bounding box centered at the origin, diagonal 1, up-axis +y). The
//! scalar object scale is the metric bounding-box diagonal in meters,
//! drawn from a truncated log-normal per category.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cloud::{Category, UnitCanonicalCloud};
use crate::error::{Error, Result};
use crate::seeding::seeded_rng;

/// Parameters of one concrete shape, in arbitrary pre-normalization units
/// (only proportions survive canonicalization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeParams {
    Bottle {
        body_radius: f64,
        body_height: f64,
        neck_radius: f64,
        neck_height: f64,
    },
    Bowl {
        radius: f64,
        depth_ratio: f64,
        wall_thickness: f64,
    },
    Can {
        radius: f64,
        height: f64,
    },
    Mug {
        radius: f64,
        height: f64,
        wall_thickness: f64,
        handle_radius: f64,
        handle_tube_radius: f64,
    },
    Laptop {
        width: f64,
        depth: f64,
        thickness: f64,
        opening_angle_deg: f64,
    },
    Camera {
        width: f64,
        height: f64,
        depth: f64,
        lens_radius: f64,
        lens_length: f64,
    },
}

impl ShapeParams {
    pub fn category(&self) -> Category {
        match self {
            ShapeParams::Bottle { .. } => Category::Bottle,
            ShapeParams::Bowl { .. } => Category::Bowl,
            ShapeParams::Can { .. } => Category::Can,
            ShapeParams::Mug { .. } => Category::Mug,
            ShapeParams::Laptop { .. } => Category::Laptop,
            ShapeParams::Camera { .. } => Category::Camera,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: &str| {
            Err(Error::InvalidShapeParams {
                category: self.category().name().to_string(),
                reason: reason.to_string(),
            })
        };
        match *self {
            ShapeParams::Bottle {
                body_radius,
                body_height,
                neck_radius,
                neck_height,
            } => {
                if body_radius <= 0.0 || body_height <= 0.0 || neck_radius <= 0.0 || neck_height <= 0.0 {
                    return fail("all dimensions must be positive");
                }
                if neck_radius >= body_radius {
                    return fail("neck radius must be smaller than body radius");
                }
            }
            ShapeParams::Bowl {
                radius,
                depth_ratio,
                wall_thickness,
            } => {
                if radius <= 0.0 {
                    return fail("radius must be positive");
                }
                if !(0.3..=1.2).contains(&depth_ratio) {
                    return fail("depth ratio outside [0.3, 1.2]");
                }
                if wall_thickness <= 0.0 || wall_thickness >= radius / 2.0 {
                    return fail("wall thickness must be in (0, radius/2)");
                }
            }
            ShapeParams::Can { radius, height } => {
                if radius <= 0.0 || height <= 0.0 {
                    return fail("radius and height must be positive");
                }
            }
            ShapeParams::Mug {
                radius,
                height,
                wall_thickness,
                handle_radius,
                handle_tube_radius,
            } => {
                if radius <= 0.0 || height <= 0.0 {
                    return fail("radius and height must be positive");
                }
                if wall_thickness <= 0.0 || wall_thickness >= radius / 2.0 {
                    return fail("wall thickness must be in (0, radius/2)");
                }
                if handle_tube_radius <= 0.0 || handle_tube_radius >= handle_radius {
                    return fail("handle tube must be thinner than the handle arc radius");
                }
                if handle_radius + handle_tube_radius >= height / 2.0 {
                    return fail("handle does not fit on the wall");
                }
            }
            ShapeParams::Laptop {
                width,
                depth,
                thickness,
                opening_angle_deg,
            } => {
                if width <= 0.0 || depth <= 0.0 || thickness <= 0.0 {
                    return fail("all dimensions must be positive");
                }
                if thickness >= depth / 4.0 {
                    return fail("slabs must be thin relative to depth");
                }
                if !(60.0..=150.0).contains(&opening_angle_deg) {
                    return fail("opening angle outside [60, 150] degrees");
                }
            }
            ShapeParams::Camera {
                width,
                height,
                depth,
                lens_radius,
                lens_length,
            } => {
                if width <= 0.0 || height <= 0.0 || depth <= 0.0 || lens_length <= 0.0 {
                    return fail("all dimensions must be positive");
                }
                if lens_radius <= 0.0 || 2.0 * lens_radius >= width.min(height) {
                    return fail("lens must fit inside the front face");
                }
            }
        }
        Ok(())
    }

    /// Draws plausible parameters for `category`.
    pub fn sample(category: Category, rng: &mut ChaCha8Rng) -> ShapeParams {
        match category {
            Category::Bottle => {
                let body_radius = rng.random_range(0.16..0.30);
                let body_height = rng.random_range(0.60..0.85);
                ShapeParams::Bottle {
                    body_radius,
                    body_height,
                    neck_radius: body_radius * rng.random_range(0.35..0.60),
                    neck_height: body_height * rng.random_range(0.18..0.35),
                }
            }
            Category::Bowl => ShapeParams::Bowl {
                radius: 0.5,
                depth_ratio: rng.random_range(0.45..0.95),
                wall_thickness: 0.5 * rng.random_range(0.06..0.16),
            },
            Category::Can => ShapeParams::Can {
                radius: rng.random_range(0.18..0.35),
                height: rng.random_range(0.55..1.0),
            },
            Category::Mug => {
                let radius: f64 = rng.random_range(0.22..0.38);
                let height: f64 = rng.random_range(0.55..0.95);
                let handle_radius = (height * rng.random_range(0.22..0.32)).min(height / 2.0 - 0.06);
                ShapeParams::Mug {
                    radius,
                    height,
                    wall_thickness: radius * rng.random_range(0.12..0.22),
                    handle_radius,
                    handle_tube_radius: handle_radius * rng.random_range(0.20..0.35),
                }
            }
            Category::Laptop => ShapeParams::Laptop {
                width: rng.random_range(0.9..1.3),
                depth: rng.random_range(0.6..0.9),
                thickness: rng.random_range(0.02..0.06),
                opening_angle_deg: rng.random_range(95.0..130.0),
            },
            Category::Camera => {
                let width = rng.random_range(0.5..0.8);
                let height = rng.random_range(0.3..0.5);
                ShapeParams::Camera {
                    width,
                    height,
                    depth: rng.random_range(0.2..0.35),
                    lens_radius: height * rng.random_range(0.25..0.42),
                    lens_length: rng.random_range(0.08..0.2),
                }
            }
        }
    }
}

/// One sampleable surface piece: area plus a point/normal generator.
struct Patch {
    area: f64,
    sample: Box<dyn Fn(&mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>)>,
}

fn cylinder_lateral(center_axis: Vector3<f64>, radius: f64, y0: f64, y1: f64) -> Patch {
    Patch {
        area: TAU * radius * (y1 - y0),
        sample: Box::new(move |rng| {
            let theta = rng.random_range(0.0..TAU);
            let y = rng.random_range(y0..y1);
            let normal = Vector3::new(theta.cos(), 0.0, theta.sin());
            (center_axis + Vector3::new(radius * theta.cos(), y, radius * theta.sin()), normal)
        }),
    }
}

/// Annulus in a y = const plane; `sign` picks the +y or -y normal.
fn annulus(center: Vector3<f64>, r_inner: f64, r_outer: f64, sign: f64) -> Patch {
    Patch {
        area: PI * (r_outer * r_outer - r_inner * r_inner),
        sample: Box::new(move |rng| {
            let u: f64 = rng.random_range(0.0..1.0);
            let r = (r_inner * r_inner + u * (r_outer * r_outer - r_inner * r_inner)).sqrt();
            let theta = rng.random_range(0.0..TAU);
            (
                center + Vector3::new(r * theta.cos(), 0.0, r * theta.sin()),
                Vector3::new(0.0, sign, 0.0),
            )
        }),
    }
}

/// Lower-hemisphere shell surface scaled by `depth_ratio` along y.
/// `orientation` +1 samples the outer side (outward normal), -1 the inner.
fn hemisphere(center: Vector3<f64>, radius: f64, depth_ratio: f64, orientation: f64) -> Patch {
    // Area of the scaled hemisphere, via the exact sphere area when
    // depth_ratio = 1 and a decent approximation otherwise; weights only
    // trade off sampling density between patches.
    let area = TAU * radius * radius * (1.0 + depth_ratio) / 2.0;
    Patch {
        area,
        sample: Box::new(move |rng| {
            let y: f64 = -rng.random_range(0.0..1.0f64);
            let theta = rng.random_range(0.0..TAU);
            let s = (1.0 - y * y).sqrt();
            let dir = Vector3::new(s * theta.cos(), y, s * theta.sin());
            let point = center + Vector3::new(radius * dir.x, radius * depth_ratio * dir.y, radius * dir.z);
            // Normal of the y-scaled sphere: gradient of the implicit form.
            let normal = Vector3::new(dir.x, dir.y / depth_ratio, dir.z).normalize() * orientation;
            (point, normal)
        }),
    }
}

/// Axis-aligned box given min/max corners; samples all six faces, with an
/// optional rotation applied afterwards (about `pivot`).
fn box_faces(
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    rotation: nalgebra::Matrix3<f64>,
    pivot: Vector3<f64>,
) -> Vec<Patch> {
    let ext = hi - lo;
    let mut patches = Vec::new();
    for axis in 0..3 {
        let (u_axis, v_axis) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for &side in &[0.0, 1.0] {
            let area = ext[u_axis] * ext[v_axis];
            let normal_sign = side * 2.0 - 1.0;
            let sample = Box::new(move |rng: &mut ChaCha8Rng| {
                let mut p = lo;
                p[axis] += side * ext[axis];
                p[u_axis] += rng.random_range(0.0..1.0) * ext[u_axis];
                p[v_axis] += rng.random_range(0.0..1.0) * ext[v_axis];
                let mut n = Vector3::zeros();
                n[axis] = normal_sign;
                (rotation * (p - pivot) + pivot, rotation * n)
            });
            patches.push(Patch { area, sample });
        }
    }
    patches
}

/// Half-torus handle in the x-y plane around `center`, bulging +x.
fn handle_arc(center: Vector3<f64>, arc_radius: f64, tube_radius: f64) -> Patch {
    Patch {
        area: PI * TAU * tube_radius * arc_radius,
        sample: Box::new(move |rng| {
            let psi = rng.random_range(-PI / 2.0..PI / 2.0);
            // Tube angle with the torus area correction via rejection.
            let omega = loop {
                let w = rng.random_range(0.0..TAU);
                let accept = (arc_radius + tube_radius * w.cos()) / (arc_radius + tube_radius);
                if rng.random_range(0.0..1.0) < accept {
                    break w;
                }
            };
            let ring = Vector3::new(psi.cos(), psi.sin(), 0.0);
            let point = center + ring * (arc_radius + tube_radius * omega.cos())
                + Vector3::new(0.0, 0.0, tube_radius * omega.sin());
            let normal = ring * omega.cos() + Vector3::new(0.0, 0.0, omega.sin());
            (point, normal)
        }),
    }
}

fn camera_front_face(
    center: Vector3<f64>,
    width: f64,
    height: f64,
    lens_radius: f64,
) -> Patch {
    Patch {
        area: width * height - PI * lens_radius * lens_radius,
        sample: Box::new(move |rng| loop {
            let x = rng.random_range(-width / 2.0..width / 2.0);
            let y = rng.random_range(-height / 2.0..height / 2.0);
            if x * x + y * y > lens_radius * lens_radius {
                return (center + Vector3::new(x, y, 0.0), Vector3::z());
            }
        }),
    }
}

fn patches_for(params: &ShapeParams) -> Vec<Patch> {
    match *params {
        ShapeParams::Bottle {
            body_radius,
            body_height,
            neck_radius,
            neck_height,
        } => vec![
            cylinder_lateral(Vector3::zeros(), body_radius, 0.0, body_height),
            annulus(Vector3::zeros(), 0.0, body_radius, -1.0),
            annulus(Vector3::new(0.0, body_height, 0.0), neck_radius, body_radius, 1.0),
            cylinder_lateral(Vector3::zeros(), neck_radius, body_height, body_height + neck_height),
            annulus(Vector3::new(0.0, body_height + neck_height, 0.0), 0.0, neck_radius, 1.0),
        ],
        ShapeParams::Bowl {
            radius,
            depth_ratio,
            wall_thickness,
        } => vec![
            hemisphere(Vector3::zeros(), radius, depth_ratio, 1.0),
            hemisphere(Vector3::zeros(), radius - wall_thickness, depth_ratio, -1.0),
            annulus(Vector3::zeros(), radius - wall_thickness, radius, 1.0),
        ],
        ShapeParams::Can { radius, height } => vec![
            cylinder_lateral(Vector3::zeros(), radius, 0.0, height),
            annulus(Vector3::new(0.0, height, 0.0), 0.0, radius, 1.0),
            annulus(Vector3::zeros(), 0.0, radius, -1.0),
        ],
        ShapeParams::Mug {
            radius,
            height,
            wall_thickness,
            handle_radius,
            handle_tube_radius,
        } => {
            let inner = radius - wall_thickness;
            vec![
                cylinder_lateral(Vector3::zeros(), radius, 0.0, height),
                // Inner wall: normal points into the cavity.
                Patch {
                    area: TAU * inner * (height - wall_thickness),
                    sample: {
                        let y0 = wall_thickness;
                        let y1 = height;
                        Box::new(move |rng: &mut ChaCha8Rng| {
                            let theta = rng.random_range(0.0..TAU);
                            let y = rng.random_range(y0..y1);
                            let radial = Vector3::new(theta.cos(), 0.0, theta.sin());
                            (radial * inner + Vector3::new(0.0, y, 0.0), -radial)
                        })
                    },
                },
                annulus(Vector3::new(0.0, wall_thickness, 0.0), 0.0, inner, 1.0),
                annulus(Vector3::zeros(), 0.0, radius, -1.0),
                annulus(Vector3::new(0.0, height, 0.0), inner, radius, 1.0),
                handle_arc(Vector3::new(radius, height / 2.0, 0.0), handle_radius, handle_tube_radius),
            ]
        }
        ShapeParams::Laptop {
            width,
            depth,
            thickness,
            opening_angle_deg,
        } => {
            let mut patches = box_faces(
                Vector3::new(-width / 2.0, 0.0, 0.0),
                Vector3::new(width / 2.0, thickness, depth),
                nalgebra::Matrix3::identity(),
                Vector3::zeros(),
            );
            // Screen slab hinged along the back edge (z = 0), tilted back
            // from vertical by opening_angle - 90.
            let tilt = (opening_angle_deg - 90.0).to_radians();
            let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), -tilt).into_inner();
            // Pre-rotation, the screen stands straight up from the hinge.
            let pivot = Vector3::new(0.0, thickness, 0.0);
            patches.extend(box_faces(
                Vector3::new(-width / 2.0, thickness, -thickness),
                Vector3::new(width / 2.0, thickness + depth, 0.0),
                rot,
                pivot,
            ));
            patches
        }
        ShapeParams::Camera {
            width,
            height,
            depth,
            lens_radius,
            lens_length,
        } => {
            let mut patches = Vec::new();
            // Body box, front face at z = depth/2 replaced by an annular
            // rectangle around the lens bore.
            let lo = Vector3::new(-width / 2.0, -height / 2.0, -depth / 2.0);
            let hi = Vector3::new(width / 2.0, height / 2.0, depth / 2.0);
            patches.extend(box_faces(lo, hi, nalgebra::Matrix3::identity(), Vector3::zeros()));
            // Drop the plain +z face we just added and substitute the
            // punched version plus the lens barrel.
            patches.remove(5);
            patches.push(camera_front_face(
                Vector3::new(0.0, 0.0, depth / 2.0),
                width,
                height,
                lens_radius,
            ));
            // Lens barrel along +z.
            let barrel_len = lens_length;
            patches.push(Patch {
                area: TAU * lens_radius * barrel_len,
                sample: Box::new(move |rng| {
                    let theta = rng.random_range(0.0..TAU);
                    let z = rng.random_range(0.0..barrel_len);
                    let radial = Vector3::new(theta.cos(), theta.sin(), 0.0);
                    (
                        radial * lens_radius + Vector3::new(0.0, 0.0, depth / 2.0 + z),
                        radial,
                    )
                }),
            });
            patches.push(Patch {
                area: PI * lens_radius * lens_radius,
                sample: Box::new(move |rng| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    let r = lens_radius * u.sqrt();
                    let theta = rng.random_range(0.0..TAU);
                    (
                        Vector3::new(r * theta.cos(), r * theta.sin(), depth / 2.0 + lens_length),
                        Vector3::z(),
                    )
                }),
            });
            patches
        }
    }
}

/// Largest-remainder allocation of `n` samples across patch areas.
fn allocate_counts(areas: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = areas.iter().sum();
    let quotas: Vec<f64> = areas.iter().map(|a| a / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.sort_by(|&i, &j| {
        let ri = quotas[i] - quotas[i].floor();
        let rj = quotas[j] - quotas[j].floor();
        rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Generates a canonical shape: deterministic under `(params, n_points,
/// seed)`, normalized to unit-canonical space with outward unit normals.
pub fn make_canonical_shape(
    params: &ShapeParams,
    n_points: usize,
    seed: u64,
) -> Result<UnitCanonicalCloud> {
    if n_points < 64 {
        return Err(Error::config(format!("n_points must be >= 64, got {n_points}")));
    }
    params.validate()?;

    let patches = patches_for(params);
    let areas: Vec<f64> = patches.iter().map(|p| p.area).collect();
    let counts = allocate_counts(&areas, n_points);

    let mut rng = seeded_rng(seed);
    let mut points = Vec::with_capacity(n_points);
    let mut normals = Vec::with_capacity(n_points);
    for (patch, &count) in patches.iter().zip(counts.iter()) {
        for _ in 0..count {
            let (p, n) = (patch.sample)(&mut rng);
            points.push(p);
            normals.push(n.normalize());
        }
    }

    // Canonicalize: bbox center to origin, diagonal to 1.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in &points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let center = (lo + hi) / 2.0;
    let diag = (hi - lo).norm();
    for p in &mut points {
        *p = (*p - center) / diag;
    }

    let cloud = UnitCanonicalCloud {
        category: params.category(),
        points,
        normals,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Uniformly sampled sphere with analytic normals, in unit-canonical
/// space. The six axis poles are always included so the bounding box (and
/// with it the canonical diameter, `1/sqrt(3)`) is exact. A calibration
/// fixture for the labeler and the evaluation suite, not a dataset
/// category; the category tag is arbitrary.
pub fn unit_sphere_cloud(n_points: usize, seed: u64) -> UnitCanonicalCloud {
    assert!(n_points >= 16);
    let radius = 0.5 / 3.0f64.sqrt();
    let mut dirs: Vec<Vector3<f64>> = vec![
        Vector3::x(),
        -Vector3::x(),
        Vector3::y(),
        -Vector3::y(),
        Vector3::z(),
        -Vector3::z(),
    ];
    let mut rng = seeded_rng(seed);
    while dirs.len() < n_points {
        let y: f64 = rng.random_range(-1.0..1.0);
        let theta = rng.random_range(0.0..TAU);
        let s = (1.0 - y * y).sqrt();
        dirs.push(Vector3::new(s * theta.cos(), y, s * theta.sin()));
    }
    let points = dirs.iter().map(|d| d * radius).collect();
    UnitCanonicalCloud {
        category: Category::Can,
        points,
        normals: dirs,
    }
}

/// Truncated log-normal over metric bounding-box diagonals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleDistribution {
    /// Mean of ln(scale).
    pub mu_ln: f64,
    /// Std-dev of ln(scale); 0 collapses to exp(mu_ln).
    pub sigma_ln: f64,
    /// Truncation bounds in meters.
    pub min: f64,
    pub max: f64,
}

impl ScaleDistribution {
    /// Default per-category household-scale stand-ins.
    pub fn default_for(category: Category) -> ScaleDistribution {
        let mu = match category {
            Category::Bottle => 0.25f64,
            Category::Bowl => 0.18,
            Category::Can => 0.12,
            Category::Mug => 0.15,
            Category::Laptop => 0.45,
            Category::Camera => 0.15,
        };
        ScaleDistribution {
            mu_ln: mu.ln(),
            sigma_ln: 0.25,
            min: 0.05,
            max: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max > self.min) {
            return Err(Error::config(format!(
                "scale bounds [{}, {}] invalid",
                self.min, self.max
            )));
        }
        if self.sigma_ln < 0.0 {
            return Err(Error::config("sigma_ln must be >= 0".to_string()));
        }
        if self.sigma_ln == 0.0 {
            let v = self.mu_ln.exp();
            if v < self.min || v > self.max {
                return Err(Error::config(format!(
                    "degenerate distribution value {v} outside bounds"
                )));
            }
        }
        Ok(())
    }
}

/// Draws `count` scales by rejection against the truncation bounds;
/// deterministic under `seed`.
pub fn sample_scales(dist: &ScaleDistribution, count: usize, seed: u64) -> Result<Vec<f64>> {
    dist.validate()?;
    if count < 1 {
        return Err(Error::config("scale count must be >= 1".to_string()));
    }
    let mut rng = seeded_rng(seed);
    let mut scales = Vec::with_capacity(count);
    while scales.len() < count {
        if dist.sigma_ln == 0.0 {
            scales.push(dist.mu_ln.exp());
            continue;
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let s = (dist.mu_ln + dist.sigma_ln * z).exp();
        if s >= dist.min && s <= dist.max {
            scales.push(s);
        }
    }
    Ok(scales)
}
