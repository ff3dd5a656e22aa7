//! Ray-cast synthetic street scenes with exact ground truth.
//!
//! World frame: X right, Y up, Z forward, ground at Y = 0, camera at
//! (0, camera height, 0). People are unions of ellipsoids; props are boxes
//! or lidded bins. Depth noise grows with distance as `a + b * z^2`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::prepare_roi_window;
use crate::error::{Error, Result};
use crate::evaluation::GtBox;
use crate::geometry::{CameraIntrinsics, DepthFrame};
use crate::grid::{Grid, Rect};
use crate::patch::TEMPLATE_SIZE;
use crate::pipeline::{estimate_plane, find_rois, PipelineConfig};
use crate::training::Annotation;
use crate::verifier::crop_training_features;

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub camera_height_m: f64,
    /// Downward tilt of the optical axis, degrees.
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            camera_height_m: 1.5,
            pitch_deg: 0.0,
            roll_deg: 0.0,
        }
    }
}

impl RigSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| Error::SpecError(e.to_string()))
    }

    /// Camera-to-world rotation (camera axes: x right, y down, z forward).
    fn rotation(&self) -> Matrix3<f64> {
        let base = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let pitch = Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch_deg.to_radians());
        let roll = Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll_deg.to_radians());
        pitch.matrix() * roll.matrix() * base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonSpec {
    pub x_m: f64,
    pub z_m: f64,
    /// 0 faces the camera, 90 shows the left side.
    pub yaw_deg: f64,
    #[serde(default = "default_person_height")]
    pub height_m: f64,
    /// Rendered in the colors of whatever lies behind (invisible to RGB).
    #[serde(default)]
    pub backlit: bool,
    #[serde(default = "default_skin")]
    pub skin: [u8; 3],
    #[serde(default = "default_shirt")]
    pub shirt: [u8; 3],
    #[serde(default = "default_pants")]
    pub pants: [u8; 3],
}

fn default_person_height() -> f64 {
    1.75
}
fn default_skin() -> [u8; 3] {
    [224, 172, 140]
}
fn default_shirt() -> [u8; 3] {
    [180, 40, 40]
}
fn default_pants() -> [u8; 3] {
    [40, 45, 80]
}

impl PersonSpec {
    pub fn at(x_m: f64, z_m: f64) -> Self {
        Self {
            x_m,
            z_m,
            yaw_deg: 0.0,
            height_m: default_person_height(),
            backlit: false,
            skin: default_skin(),
            shirt: default_shirt(),
            pants: default_pants(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PropShape {
    Box,
    /// Upright cylinder with a domed lid, the classic street bin.
    Bin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropSpec {
    pub shape: PropShape,
    pub x_m: f64,
    pub z_m: f64,
    pub width_m: f64,
    pub depth_m: f64,
    pub height_m: f64,
    /// Height of the underside above the ground (hanging signs, awnings).
    #[serde(default)]
    pub base_m: f64,
    #[serde(default)]
    pub yaw_deg: f64,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub rig: RigSpec,
    pub persons: Vec<PersonSpec>,
    pub props: Vec<PropSpec>,
    pub noise_a: f64,
    pub noise_b: f64,
    /// Sensor range; farther surfaces read as invalid.
    pub max_range_m: f64,
    pub rgb: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            persons: Vec::new(),
            props: Vec::new(),
            noise_a: 0.005,
            noise_b: 0.002,
            max_range_m: 20.0,
            rgb: true,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecError(m));
        self.rig.intrinsics()?;
        if !(self.rig.camera_height_m > 0.0) {
            return bad("camera height must be positive".into());
        }
        if !(self.noise_a >= 0.0 && self.noise_b >= 0.0 && self.max_range_m > 0.0) {
            return bad("noise terms must be nonnegative and max range positive".into());
        }
        if self.persons.len() > u16::MAX as usize || self.props.len() > u16::MAX as usize {
            return bad("too many objects".into());
        }
        for (i, p) in self.persons.iter().enumerate() {
            if !(p.z_m > 0.5 && p.height_m > 0.5 && p.x_m.is_finite()) {
                return bad(format!("person {i}: needs z > 0.5 m and height > 0.5 m"));
            }
        }
        for (i, p) in self.props.iter().enumerate() {
            if !(p.z_m > 0.5 && p.width_m > 0.0 && p.depth_m > 0.0 && p.height_m > 0.0 && p.base_m >= 0.0) {
                return bad(format!("prop {i}: needs z > 0.5 m and positive extents"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipsoid { radii: V3 },
    Cuboid { half: V3 },
    /// Vertical cylinder, `half.y` is the half height.
    Cylinder { radius: f64, half_height: f64 },
}

#[derive(Clone, Copy, Debug)]
enum Owner {
    Person(usize),
    Prop(usize),
}

#[derive(Clone, Copy, Debug)]
struct Primitive {
    center: V3,
    /// World-from-local rotation about Y.
    yaw: f64,
    shape: Shape,
    owner: Owner,
    color: [u8; 3],
}

impl Primitive {
    fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Ellipsoid { radii } => radii.max(),
            Shape::Cuboid { half } => half.norm(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
        }
    }

    fn to_local(&self, v: &V3) -> V3 {
        let (s, c) = self.yaw.sin_cos();
        V3::new(c * v.x - s * v.z, v.y, s * v.x + c * v.z)
    }

    fn to_world(&self, v: &V3) -> V3 {
        let (s, c) = self.yaw.sin_cos();
        V3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
    }

    /// Nearest positive hit distance and world normal.
    fn intersect(&self, origin: &V3, dir: &V3) -> Option<(f64, V3)> {
        let o = self.to_local(&(origin - self.center));
        let d = self.to_local(dir);
        let (t, n) = match self.shape {
            Shape::Ellipsoid { radii } => {
                let os = o.component_div(&radii);
                let ds = d.component_div(&radii);
                let a = ds.dot(&ds);
                let b = 2.0 * os.dot(&ds);
                let c = os.dot(&os) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let p = os + ds * t;
                (t, p.component_div(&radii))
            }
            Shape::Cuboid { half } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for k in 0..3 {
                    if d[k].abs() < 1e-12 {
                        if o[k].abs() > half[k] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-half[k] - o[k]) / d[k];
                    let b = (half[k] - o[k]) / d[k];
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = k;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = V3::zeros();
                n[axis] = -d[axis].signum();
                (t0, n)
            }
            Shape::Cylinder { radius, half_height } => {
                let mut best: Option<(f64, V3)> = None;
                let a = d.x * d.x + d.z * d.z;
                if a > 1e-12 {
                    let b = 2.0 * (o.x * d.x + o.z * d.z);
                    let c = o.x * o.x + o.z * o.z - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / (2.0 * a);
                        let y = o.y + t * d.y;
                        if t > 0.0 && y.abs() <= half_height {
                            best = Some((t, V3::new(o.x + t * d.x, 0.0, o.z + t * d.z)));
                        }
                    }
                }
                if d.y.abs() > 1e-12 {
                    let cap = if d.y < 0.0 { half_height } else { -half_height };
                    let t = (cap - o.y) / d.y;
                    let (x, z) = (o.x + t * d.x, o.z + t * d.z);
                    if t > 0.0 && x * x + z * z <= radius * radius && best.is_none_or(|b| t < b.0) {
                        best = Some((t, V3::new(0.0, cap.signum(), 0.0)));
                    }
                }
                best?
            }
        };
        Some((t, self.to_world(&n).normalize()))
    }
}

fn person_primitives(p: &PersonSpec, idx: usize) -> Vec<Primitive> {
    let s = p.height_m / 1.75;
    let parts: [(f64, f64, f64, f64, f64, f64, [u8; 3]); 11] = [
        (0.0, 1.62, 0.01, 0.085, 0.115, 0.10, p.skin),
        (0.0, 1.47, 0.0, 0.05, 0.07, 0.05, p.skin),
        (-0.15, 1.38, 0.0, 0.10, 0.075, 0.095, p.shirt),
        (0.15, 1.38, 0.0, 0.10, 0.075, 0.095, p.shirt),
        (0.0, 1.13, 0.0, 0.20, 0.32, 0.12, p.shirt),
        (0.0, 0.85, 0.0, 0.17, 0.12, 0.11, p.pants),
        (-0.09, 0.44, 0.0, 0.085, 0.45, 0.09, p.pants),
        (0.09, 0.44, 0.0, 0.085, 0.45, 0.09, p.pants),
        (-0.245, 1.10, 0.0, 0.05, 0.30, 0.055, p.shirt),
        (0.245, 1.10, 0.0, 0.05, 0.30, 0.055, p.shirt),
        (0.0, 0.03, 0.05, 0.12, 0.03, 0.14, p.pants),
    ];
    let yaw = p.yaw_deg.to_radians();
    parts
        .iter()
        .map(|&(x, y, z, rx, ry, rz, color)| {
            let base = Primitive {
                center: V3::zeros(),
                yaw,
                shape: Shape::Ellipsoid {
                    radii: V3::new(rx, ry, rz) * s,
                },
                owner: Owner::Person(idx),
                color,
            };
            let offset = base.to_world(&(V3::new(x, y, -z) * s));
            Primitive {
                center: V3::new(p.x_m, 0.0, p.z_m) + offset,
                ..base
            }
        })
        .collect()
}

fn prop_primitives(p: &PropSpec, idx: usize) -> Vec<Primitive> {
    let yaw = p.yaw_deg.to_radians();
    let owner = Owner::Prop(idx);
    match p.shape {
        PropShape::Box => vec![Primitive {
            center: V3::new(p.x_m, p.base_m + p.height_m / 2.0, p.z_m),
            yaw,
            shape: Shape::Cuboid {
                half: V3::new(p.width_m, p.height_m, p.depth_m) / 2.0,
            },
            owner,
            color: p.color,
        }],
        PropShape::Bin => {
            let r = p.width_m / 2.0;
            let lid = 0.6 * r;
            let body = (p.height_m - lid).max(0.05);
            vec![
                Primitive {
                    center: V3::new(p.x_m, p.base_m + body / 2.0, p.z_m),
                    yaw,
                    shape: Shape::Cylinder {
                        radius: r,
                        half_height: body / 2.0,
                    },
                    owner,
                    color: p.color,
                },
                Primitive {
                    center: V3::new(p.x_m, p.base_m + body, p.z_m),
                    yaw,
                    shape: Shape::Ellipsoid {
                        radii: V3::new(r, lid, r),
                    },
                    owner,
                    color: p.color,
                },
            ]
        }
    }
}

/// A rendered scene and everything known about it.
#[derive(Clone, Debug)]
pub struct SceneRender {
    pub frame: DepthFrame,
    /// One box per visible person, in person order.
    pub gt: Vec<GtBox>,
    /// Pixel hull of each visible person, `None` when fully out of view.
    pub person_boxes: Vec<Option<Rect>>,
    pub prop_boxes: Vec<Option<Rect>>,
    /// Whether each person is invisible in the color image.
    pub person_backlit: Vec<bool>,
    /// Noise-free depth of each pixel's surface and its owner.
    pub owners: Grid<Option<(bool, u16)>>,
}

const LIGHT: [f64; 3] = [0.3, 0.8, -0.5];

fn sky_color(v: f64, height: f64) -> [f64; 3] {
    let f = (v / height).clamp(0.0, 1.0);
    [150.0 + 50.0 * f, 190.0 + 30.0 * f, 235.0 + 5.0 * f]
}

fn ground_color(p: &V3) -> [f64; 3] {
    let tile = ((p.x / 1.5).floor() as i64 + (p.z / 1.5).floor() as i64).rem_euclid(2) as f64;
    [105.0 + 12.0 * tile, 105.0 + 10.0 * tile, 98.0 + 8.0 * tile]
}

/// Renders the scene. `seed` drives depth and color noise.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64, frame_id: u64) -> Result<SceneRender> {
    spec.validate()?;
    let rig = &spec.rig;
    let k = rig.intrinsics()?;
    let (w, h) = (rig.width, rig.height);
    let rot = rig.rotation();
    let origin = V3::new(0.0, rig.camera_height_m, 0.0);

    let mut prims = Vec::new();
    for (i, p) in spec.persons.iter().enumerate() {
        prims.extend(person_primitives(p, i));
    }
    for (i, p) in spec.props.iter().enumerate() {
        prims.extend(prop_primitives(p, i));
    }

    let dirs: Vec<V3> = (0..h)
        .flat_map(|v| (0..w).map(move |u| (u, v)))
        .map(|(u, v)| rot * V3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0))
        .collect();

    // Ground first, then every primitive over its projected bounds.
    let mut tbuf = vec![f64::INFINITY; w * h];
    let mut normal = vec![V3::zeros(); w * h];
    let mut hit: Vec<Option<usize>> = vec![None; w * h];
    for (i, d) in dirs.iter().enumerate() {
        if d.y < -1e-9 {
            tbuf[i] = -origin.y / d.y;
            normal[i] = V3::y();
        }
    }
    let rot_t = rot.transpose();
    for (pi, prim) in prims.iter().enumerate() {
        let c = rot_t * (prim.center - origin);
        let r = prim.bounding_radius();
        let (u0, u1, v0, v1) = if c.z - r > 0.05 {
            let mut us = Vec::with_capacity(4);
            let mut vs = Vec::with_capacity(4);
            for sx in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    us.push(k.cx + k.fx * (c.x + sx * r) / (c.z + sz * r));
                    vs.push(k.cy + k.fy * (c.y + sx * r) / (c.z + sz * r));
                }
            }
            let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let hi = |v: &[f64], n: usize| (v.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil() as i64).clamp(-1, n as i64 - 1);
            (lo(&us), hi(&us, w), lo(&vs), hi(&vs, h))
        } else {
            (0, w as i64 - 1, 0, h as i64 - 1)
        };
        if u1 < 0 || v1 < 0 {
            continue;
        }
        for v in v0..=v1 as usize {
            for u in u0..=u1 as usize {
                let i = v * w + u;
                if let Some((t, n)) = prim.intersect(&origin, &dirs[i]) {
                    if t < tbuf[i] {
                        tbuf[i] = t;
                        normal[i] = n;
                        hit[i] = Some(pi);
                    }
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut depth = Grid::filled(h, w, None);
    let mut owners = Grid::filled(h, w, None);
    let mut rgb = Grid::filled(h, w, [0u8; 3]);
    let light = V3::new(LIGHT[0], LIGHT[1], LIGHT[2]).normalize();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let t = tbuf[i];
            let noise: f64 = unit.sample(&mut rng);
            let jitter: [i32; 3] = [rng.random_range(-6..=6), rng.random_range(-6..=6), rng.random_range(-6..=6)];
            if t.is_finite() {
                let z = t + noise * (spec.noise_a + spec.noise_b * t * t);
                if z > 0.0 && t <= spec.max_range_m {
                    depth[(v, u)] = Some(z as f32);
                }
            }
            let d = dirs[i];
            let background = if d.y < -1e-9 {
                let t = -origin.y / d.y;
                ground_color(&(origin + d * t))
            } else {
                sky_color(v as f64, h as f64)
            };
            let color = match hit[i] {
                Some(pi) => {
                    let prim = &prims[pi];
                    owners[(v, u)] = Some(match prim.owner {
                        Owner::Person(j) => (true, j as u16),
                        Owner::Prop(j) => (false, j as u16),
                    });
                    let backlit = matches!(prim.owner, Owner::Person(j) if spec.persons[j].backlit);
                    if backlit {
                        background
                    } else {
                        let shade = 0.55 + 0.45 * normal[i].dot(&light).max(0.0);
                        [prim.color[0] as f64 * shade, prim.color[1] as f64 * shade, prim.color[2] as f64 * shade]
                    }
                }
                None => background,
            };
            rgb[(v, u)] = [0, 1, 2].map(|c| (color[c] + jitter[c] as f64).round().clamp(0.0, 255.0) as u8);
        }
    }

    let hulls = |is_person: bool, n: usize| -> Vec<Option<Rect>> {
        let mut bounds: Vec<Option<(i64, i64, i64, i64)>> = vec![None; n];
        for v in 0..h {
            for u in 0..w {
                if let Some((p, j)) = owners[(v, u)] {
                    let j = j as usize;
                    if p == is_person {
                        let (u, v) = (u as i64, v as i64);
                        bounds[j] = Some(match bounds[j] {
                            None => (u, v, u, v),
                            Some((a, b, c, d)) => (a.min(u), b.min(v), c.max(u), d.max(v)),
                        });
                    }
                }
            }
        }
        bounds
            .into_iter()
            .map(|b| b.map(|(x0, y0, x1, y1)| Rect::from_corners_inclusive(x0, y0, x1, y1)))
            .collect()
    };
    let person_boxes = hulls(true, spec.persons.len());
    let prop_boxes = hulls(false, spec.props.len());
    let gt = person_boxes
        .iter()
        .flatten()
        .map(|&rect| GtBox { rect, ignore: false })
        .collect();
    let frame = DepthFrame::new(depth, spec.rgb.then_some(rgb), k, frame_id)?;
    Ok(SceneRender {
        frame,
        gt,
        person_boxes,
        prop_boxes,
        person_backlit: spec.persons.iter().map(|p| p.backlit).collect(),
        owners,
    })
}

/// Ranges for randomly composed benchmark scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSceneParams {
    pub rig: RigSpec,
    pub persons: [usize; 2],
    pub props: [usize; 2],
    pub distance_m: [f64; 2],
    pub camera_height_m: [f64; 2],
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Probability that a person is invisible to the RGB camera.
    pub backlit_fraction: f64,
    /// Probability that a box prop hangs above head height.
    pub hanging_fraction: f64,
    pub noise_a: f64,
    pub noise_b: f64,
    pub max_range_m: f64,
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            persons: [1, 3],
            props: [0, 2],
            distance_m: [2.0, 10.0],
            camera_height_m: [1.4, 1.6],
            max_pitch_deg: 2.0,
            max_roll_deg: 1.0,
            backlit_fraction: 0.1,
            hanging_fraction: 0.15,
            noise_a: 0.005,
            noise_b: 0.002,
            max_range_m: 20.0,
        }
    }
}

impl RandomSceneParams {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] > 0.0;
        let ok = self.persons[0] <= self.persons[1]
            && self.props[0] <= self.props[1]
            && ordered(self.distance_m)
            && ordered(self.camera_height_m)
            && (0.0..=1.0).contains(&self.backlit_fraction)
            && (0.0..=1.0).contains(&self.hanging_fraction)
            && self.distance_m[0] >= 1.0;
        if ok {
            self.rig.intrinsics().map(|_| ())
        } else {
            Err(Error::SpecError("random scene ranges must be ordered and positive".into()))
        }
    }
}

const PALETTE: [[u8; 3]; 8] = [
    [180, 40, 40],
    [40, 120, 200],
    [230, 200, 60],
    [60, 160, 80],
    [200, 110, 40],
    [140, 60, 160],
    [240, 240, 235],
    [70, 70, 70],
];

const SKIN: [[u8; 3]; 4] = [[236, 188, 160], [224, 172, 140], [176, 120, 90], [120, 80, 60]];

fn column_span(rig: &RigSpec, x: f64, z: f64, half_width: f64) -> (f64, f64) {
    (rig.cx + rig.fx * (x - half_width) / z, rig.cx + rig.fx * (x + half_width) / z)
}

/// Draws a scene with non-overlapping objects.
pub fn random_scene_spec(params: &RandomSceneParams, rng: &mut ChaCha8Rng) -> SceneSpec {
    let mut rig = params.rig;
    rig.camera_height_m = rng.random_range(params.camera_height_m[0]..=params.camera_height_m[1]);
    rig.pitch_deg = rng.random_range(-params.max_pitch_deg..=params.max_pitch_deg);
    rig.roll_deg = rng.random_range(-params.max_roll_deg..=params.max_roll_deg);
    let mut spans: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut place = |rng: &mut ChaCha8Rng, half_width: f64| -> Option<(f64, f64)> {
        for _ in 0..50 {
            let z = rng.random_range(params.distance_m[0]..=params.distance_m[1]);
            let reach = z * rig.cx / rig.fx - half_width - 0.3;
            if reach <= 0.0 {
                continue;
            }
            let x = rng.random_range(-reach..=reach);
            let (a, b) = column_span(&rig, x, z, half_width + 0.25);
            let clear = spans.iter().all(|&(sa, sb, sx, sz)| {
                (b + 8.0 < sa || a - 8.0 > sb) && ((x - sx).abs() >= 1.0 || (z - sz).abs() >= 1.0)
            });
            if clear {
                spans.push((a, b, x, z));
                return Some((x, z));
            }
        }
        None
    };
    let n_persons = rng.random_range(params.persons[0]..=params.persons[1]);
    let mut persons = Vec::new();
    for _ in 0..n_persons {
        let yaw = rng.random_range(-180.0..180.0);
        let height = rng.random_range(1.6..1.9);
        let backlit = rng.random_bool(params.backlit_fraction);
        let skin = SKIN[rng.random_range(0..SKIN.len())];
        let shirt = PALETTE[rng.random_range(0..PALETTE.len())];
        let pants = PALETTE[rng.random_range(0..PALETTE.len())];
        if let Some((x, z)) = place(rng, 0.35) {
            persons.push(PersonSpec {
                x_m: x,
                z_m: z,
                yaw_deg: yaw,
                height_m: height,
                backlit,
                skin,
                shirt,
                pants,
            });
        }
    }
    let n_props = rng.random_range(params.props[0]..=params.props[1]);
    let mut props = Vec::new();
    for _ in 0..n_props {
        let shape = if rng.random_bool(0.5) { PropShape::Bin } else { PropShape::Box };
        let (width, depth, height, base): (f64, f64, f64, f64) = match shape {
            PropShape::Bin => {
                let wd = rng.random_range(0.45..0.65);
                (wd, wd, rng.random_range(0.8..1.2), 0.0)
            }
            PropShape::Box if rng.random_bool(params.hanging_fraction) => {
                (rng.random_range(0.6..1.2), rng.random_range(0.1..0.4), rng.random_range(0.4..0.8), rng.random_range(2.9..3.4))
            }
            PropShape::Box => (rng.random_range(0.5..1.0), rng.random_range(0.4..0.8), rng.random_range(0.6..1.3), 0.0),
        };
        let gray: u8 = rng.random_range(60..200);
        let tint = [gray, gray.saturating_add(rng.random_range(0..30)), gray.saturating_sub(rng.random_range(0..30))];
        if let Some((x, z)) = place(rng, width.max(depth) * 0.75) {
            props.push(PropSpec {
                shape,
                x_m: x,
                z_m: z,
                width_m: width,
                depth_m: depth,
                height_m: height,
                base_m: base,
                yaw_deg: rng.random_range(-45.0..45.0),
                color: tint,
            });
        }
    }
    SceneSpec {
        rig,
        persons,
        props,
        noise_a: params.noise_a,
        noise_b: params.noise_b,
        max_range_m: params.max_range_m,
        rgb: true,
    }
}

/// Frame `i` of the random benchmark sequence for `seed`.
pub fn generate_frame(params: &RandomSceneParams, seed: u64, i: u64) -> Result<SceneRender> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i));
    let spec = random_scene_spec(params, &mut rng);
    generate_synthetic_scene(&spec, rng.random(), i)
}

/// `n` random frames with ids `0..n`.
pub fn generate_frames(params: &RandomSceneParams, n: usize, seed: u64) -> Result<Vec<SceneRender>> {
    params.validate()?;
    (0..n as u64).map(|i| generate_frame(params, seed, i)).collect()
}

/// How training annotations are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationParams {
    pub rig: RigSpec,
    pub distance_m: [f64; 2],
    /// Yaw of each sample is drawn around one of these modes.
    pub yaw_modes_deg: Vec<f64>,
    /// Uniform jitter around the chosen mode, degrees.
    pub yaw_jitter_deg: f64,
    pub height_m: [f64; 2],
    /// Lateral offset drawn from `±lateral_m * z / 4`.
    pub lateral_m: f64,
    pub noise_a: f64,
    pub noise_b: f64,
}

impl Default for AnnotationParams {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            distance_m: [2.0, 10.0],
            yaw_modes_deg: vec![0.0],
            yaw_jitter_deg: 180.0,
            height_m: [1.6, 1.9],
            lateral_m: 0.3,
            noise_a: 0.005,
            noise_b: 0.002,
        }
    }
}

/// Renders single-person scenes and cuts the detector's centered window
/// out of the ROI found around the person. Samples whose person is not
/// segmented are skipped, so fewer than `count` may be returned only if
/// the segmentation keeps failing.
pub fn generate_annotations(
    count: usize,
    seed: u64,
    params: &AnnotationParams,
    cfg: &PipelineConfig,
) -> Result<Vec<Annotation>> {
    let ordered = |r: [f64; 2]| r[0] > 1.0 && r[0] <= r[1];
    if params.yaw_modes_deg.is_empty() || !ordered(params.distance_m) || !ordered(params.height_m) || params.lateral_m < 0.0 {
        return Err(Error::SpecError("annotation params need yaw modes and ordered distance and height ranges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < count * 3 + 10 {
        attempts += 1;
        let mode = params.yaw_modes_deg[out.len() % params.yaw_modes_deg.len()];
        let z = rng.random_range(params.distance_m[0]..=params.distance_m[1]);
        let lat = params.lateral_m;
        let x = if lat > 0.0 { rng.random_range(-lat..lat) } else { 0.0 };
        let mut person = PersonSpec::at(x * z / 4.0, z);
        person.yaw_deg = mode + rng.random_range(-1.0..=1.0) * params.yaw_jitter_deg;
        let [h0, h1] = params.height_m;
        person.height_m = if h1 > h0 { rng.random_range(h0..h1) } else { h0 };
        let spec = SceneSpec {
            rig: params.rig,
            persons: vec![person],
            noise_a: params.noise_a,
            noise_b: params.noise_b,
            rgb: false,
            ..SceneSpec::default()
        };
        let render = generate_synthetic_scene(&spec, rng.random(), 0)?;
        let Some(gt) = render.person_boxes[0] else { continue };
        let Ok(plane) = estimate_plane(&render.frame, &cfg.plane) else { continue };
        let rois = find_rois(&render.frame, &plane, cfg);
        let Some(roi) = rois.iter().max_by(|a, b| a.bbox.iou(&gt).total_cmp(&b.bbox.iou(&gt))) else { continue };
        if roi.bbox.iou(&gt) < 0.5 {
            continue;
        }
        let window = match prepare_roi_window(&render.frame, roi, TEMPLATE_SIZE, TEMPLATE_SIZE, 0, &cfg.matching) {
            Ok(w) => w,
            Err(_) => continue,
        };
        out.push(window.into_annotation(format!("synth-{seed}-{}", out.len()))?);
    }
    Ok(out)
}

/// Verifier training features from rendered scenes. Positives are the
/// candidate crops around visible, lit persons; negatives are crops around
/// props plus `background_per_frame` random 3:1 boxes that avoid persons.
pub fn scorer_training_data(
    renders: &[SceneRender],
    background_per_frame: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for r in renders {
        let lit: Vec<Rect> = r
            .person_boxes
            .iter()
            .zip(&r.person_backlit)
            .filter_map(|(b, &backlit)| b.filter(|_| !backlit))
            .collect();
        let props: Vec<Rect> = r.prop_boxes.iter().flatten().copied().collect();
        let persons: Vec<Rect> = r.person_boxes.iter().flatten().copied().collect();
        let (p, n) = crop_training_features(&r.frame, &lit, &props, &persons, background_per_frame, &mut rng)?;
        pos.extend(p);
        neg.extend(n);
    }
    Ok((pos, neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;
    use crate::labeling::{label_structure, StructureLabel};
    use crate::geometry::GroundPlane;

    fn small_rig() -> RigSpec {
        RigSpec {
            width: 320,
            height: 240,
            fx: 262.5,
            fy: 262.5,
            cx: 159.5,
            cy: 119.5,
            ..RigSpec::default()
        }
    }

    #[test]
    fn empty_scene_is_ground_only() {
        let spec = SceneSpec {
            rig: small_rig(),
            ..SceneSpec::default()
        };
        let r = generate_synthetic_scene(&spec, 1, 0).unwrap();
        assert!(r.gt.is_empty());
        let below_horizon = r.frame.depth.row(200).iter().all(|d| d.is_some());
        let sky = r.frame.depth.row(10).iter().all(|d| d.is_none());
        assert!(below_horizon && sky);
    }

    #[test]
    fn person_points_are_labeled_object() {
        let spec = SceneSpec {
            rig: small_rig(),
            persons: vec![PersonSpec::at(0.0, 3.0)],
            noise_a: 0.0,
            noise_b: 0.0,
            ..SceneSpec::default()
        };
        let r = generate_synthetic_scene(&spec, 2, 0).unwrap();
        assert_eq!(r.gt.len(), 1);
        let cloud = backproject(&r.frame);
        let owners: Vec<bool> = cloud.pixels.iter().map(|&(u, v)| r.owners[(v as usize, u as usize)].is_some()).collect();
        let labeled = label_structure(cloud, &GroundPlane::from_camera_height(1.5), 0.2, &Default::default());
        let (mut obj, mut total) = (0, 0);
        for (i, &is_person) in owners.iter().enumerate() {
            let h = labeled.cloud.points[i].y;
            // Points of the person well above the feet.
            if is_person && h < 1.5 - 0.3 && h > -0.3 {
                total += 1;
                obj += (labeled.labels[i] == StructureLabel::Object) as usize;
            }
        }
        assert!(total > 100 && obj == total, "{obj} of {total}");
    }

    #[test]
    fn hull_matches_rendered_pixels() {
        let spec = SceneSpec {
            rig: small_rig(),
            persons: vec![PersonSpec::at(-0.5, 4.0), PersonSpec::at(1.0, 6.0)],
            ..SceneSpec::default()
        };
        let r = generate_synthetic_scene(&spec, 3, 0).unwrap();
        for (j, b) in r.person_boxes.iter().enumerate() {
            let b = b.unwrap();
            let mut hull: Option<(i64, i64, i64, i64)> = None;
            for v in 0..240 {
                for u in 0..320 {
                    if r.owners[(v, u)] == Some((true, j as u16)) {
                        let (u, v) = (u as i64, v as i64);
                        hull = Some(hull.map_or((u, v, u, v), |(a, bb, c, d)| (a.min(u), bb.min(v), c.max(u), d.max(v))));
                    }
                }
            }
            let (x0, y0, x1, y1) = hull.unwrap();
            assert!(b.iou(&Rect::from_corners_inclusive(x0, y0, x1, y1)) >= 0.9);
        }
    }

    #[test]
    fn props_only_scene_has_no_ground_truth() {
        let spec = SceneSpec {
            rig: small_rig(),
            props: vec![PropSpec {
                shape: PropShape::Bin,
                x_m: 0.0,
                z_m: 4.0,
                width_m: 0.5,
                depth_m: 0.5,
                height_m: 1.0,
                base_m: 0.0,
                yaw_deg: 0.0,
                color: [90, 90, 90],
            }],
            ..SceneSpec::default()
        };
        let r = generate_synthetic_scene(&spec, 4, 0).unwrap();
        assert!(r.gt.is_empty());
        assert!(r.prop_boxes[0].is_some());
    }

    #[test]
    fn rendering_is_deterministic() {
        let params = RandomSceneParams {
            rig: small_rig(),
            ..RandomSceneParams::default()
        };
        let a = generate_frames(&params, 2, 9).unwrap();
        let b = generate_frames(&params, 2, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.gt, y.gt);
        }
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = SceneSpec {
            persons: vec![PersonSpec::at(0.0, -1.0)],
            ..SceneSpec::default()
        };
        assert!(matches!(generate_synthetic_scene(&spec, 0, 0), Err(Error::SpecError(_))));
    }
}
