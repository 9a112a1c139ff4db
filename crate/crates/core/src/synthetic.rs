//! Deterministic textured-plane pairs with exact ground truth.
//!
//! Camera A looks down +z at the plane `z = plane_depth`. The texture is a
//! function of A's pixel coordinates on that plane, so image A samples it
//! directly and image B samples it through the ray intersection. Invalid
//! depth is a rectangular hole in the plane: both cameras see a flat
//! background there and report depth 0.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{mat3_inverse, mat3_transpose, mat3_vec, plane_homography, rotation_from_axis_angle, Mat3, PairSample, Pose};
use crate::math;
use crate::tensor::Tensor;

const RETRY_LIMIT: usize = 64;
const BACKGROUND: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Texture {
    Blobs,
    Gratings,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub texture: Texture,
    pub plane_depth: f64,
    /// Per-axis bound on the axis-angle components, degrees.
    pub max_rotation_deg: f64,
    /// Per-axis bound on the translation, scene units.
    pub max_translation: f64,
    /// Area fraction of image A covered by the depth hole.
    pub invalid_depth_fraction: f64,
    /// Adds a nearer plane over the right part of the scene.
    pub two_plane: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            texture: Texture::Mixed,
            plane_depth: 2.0,
            max_rotation_deg: 6.0,
            max_translation: 0.2,
            invalid_depth_fraction: 0.15,
            two_plane: false,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::param("image_size", "height and width must be positive multiples of 8"));
        }
        if !(0.0..1.0).contains(&self.invalid_depth_fraction) {
            return Err(Error::param("invalid_depth_fraction", "must lie in [0, 1)"));
        }
        if !(self.plane_depth > 0.0) {
            return Err(Error::param("plane_depth", "must be positive"));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::param("pose_range", "bounds must be non-negative"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Mat3 {
        let f = self.width as f64;
        [
            [f, 0.0, (self.width as f64 - 1.0) / 2.0],
            [0.0, f, (self.height as f64 - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    center: [f64; 2],
    inv_two_sigma2: f64,
    amplitude: f64,
}

#[derive(Debug, Clone, Copy)]
struct Grating {
    freq: [f64; 2],
    phase: f64,
    amplitude: f64,
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    center: [f64; 2],
    radius: f64,
    amplitude: f64,
}

/// Texture on the plane, in A-pixel units.
#[derive(Debug, Clone)]
struct PlaneTexture {
    blobs: Vec<Blob>,
    gratings: Vec<Grating>,
    discs: Vec<Disc>,
}

impl PlaneTexture {
    fn sample<R: Rng>(rng: &mut R, kind: Texture, h: usize, w: usize) -> Self {
        // cover a margin so B's view stays textured
        let (hm, wm) = (h as f64, w as f64);
        let pos = |rng: &mut R| [rng.gen_range(-0.5 * wm..1.5 * wm), rng.gen_range(-0.5 * hm..1.5 * hm)];
        let area = 4.0 * hm * wm;
        let blobs = if kind != Texture::Gratings {
            let n = (area / 90.0) as usize;
            (0..n)
                .map(|_| {
                    let sigma = rng.gen_range(1.8..5.0);
                    Blob {
                        center: pos(rng),
                        inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                        amplitude: rng.gen_range(-1.6..1.6),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let gratings = if kind != Texture::Blobs {
            (0..4)
                .map(|_| {
                    let theta = rng.gen_range(0.0..core::f64::consts::PI);
                    let period = rng.gen_range(7.0..28.0);
                    let k = 2.0 * core::f64::consts::PI / period;
                    Grating {
                        freq: [k * math::cos(theta), k * math::sin(theta)],
                        phase: rng.gen_range(0.0..2.0 * core::f64::consts::PI),
                        amplitude: rng.gen_range(0.2..0.5),
                    }
                })
                .collect()
        } else {
            Vec::new()
        };
        let discs = if kind == Texture::Mixed {
            let n = (area / 400.0) as usize;
            (0..n)
                .map(|_| Disc {
                    center: pos(rng),
                    radius: rng.gen_range(2.0..6.0),
                    amplitude: rng.gen_range(-0.8..0.8),
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { blobs, gratings, discs }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        let mut s = 0.0;
        for b in &self.blobs {
            let (dx, dy) = (u - b.center[0], v - b.center[1]);
            let e = (dx * dx + dy * dy) * b.inv_two_sigma2;
            if e < 30.0 {
                s += b.amplitude * math::exp(-e);
            }
        }
        for g in &self.gratings {
            s += g.amplitude * math::sin(g.freq[0] * u + g.freq[1] * v + g.phase);
        }
        for d in &self.discs {
            let (dx, dy) = (u - d.center[0], v - d.center[1]);
            let r = math::sqrt(dx * dx + dy * dy);
            // one-pixel soft edge keeps the disc band-limited
            s += d.amplitude * math::sigmoid(2.0 * (d.radius - r));
        }
        0.5 + 0.45 * math::tanh(s)
    }
}

fn quantize(v: f64) -> f64 {
    math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Axis-aligned hole in A-pixel coordinates, half-open.
#[derive(Debug, Clone, Copy)]
struct Hole {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Hole {
    fn sample<R: Rng>(rng: &mut R, fraction: f64, h: usize, w: usize) -> Option<Self> {
        if fraction <= 0.0 {
            return None;
        }
        let (hf, wf) = (h as f64, w as f64);
        let area = fraction * hf * wf;
        let aspect = rng.gen_range(0.5..2.0);
        let rw = math::sqrt(area * aspect).min(wf);
        let rh = (area / rw).min(hf);
        let x0 = rng.gen_range(0.0..=(wf - rw));
        let y0 = rng.gen_range(0.0..=(hf - rh));
        Some(Self {
            x0: x0 - 0.5,
            y0: y0 - 0.5,
            x1: x0 + rw - 0.5,
            y1: y0 + rh - 0.5,
        })
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u < self.x1 && v >= self.y0 && v < self.y1
    }
}

/// Scene surface: plane 1 at `z1`, optionally plane 2 at `z2` where the
/// A-pixel abscissa exceeds `split`.
#[derive(Debug, Clone)]
struct Scene {
    texture: PlaneTexture,
    hole: Option<Hole>,
    z1: f64,
    second: Option<(f64, f64)>,
    k: Mat3,
}

impl Scene {
    /// A-pixel coordinates of a camera-A point.
    fn to_a_pixel(&self, x: [f64; 3]) -> [f64; 2] {
        let q = mat3_vec(&self.k, x);
        [q[0] / q[2], q[1] / q[2]]
    }

    /// Nearest surface hit along `X_A(s) = o + s·d` (s > 0): depth scale
    /// `s` and the texture value, `None` on a miss.
    fn trace(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        let mut planes = [(self.z1, None), (0.0, None)];
        let n = if let Some((z2, split)) = self.second {
            planes[1] = (z2, Some(split));
            2
        } else {
            1
        };
        for (i, &(z, split)) in planes[..n].iter().enumerate() {
            if d[2].abs() < 1e-12 {
                continue;
            }
            let s = (z - o[2]) / d[2];
            if !(s > 0.0) {
                continue;
            }
            let x = [o[0] + s * d[0], o[1] + s * d[1], z];
            let p = self.to_a_pixel(x);
            let on_plane = match (i, split, self.second) {
                (0, _, Some((_, sp))) => p[0] <= sp,
                (1, Some(sp), _) => p[0] > sp,
                _ => true,
            };
            if on_plane && best.map_or(true, |(bs, _)| s < bs) {
                let v = if self.hole.is_some_and(|h| h.contains(p[0], p[1])) {
                    f64::NAN
                } else {
                    // offset the texture on the nearer plane
                    let shift = if i == 1 { 17.0 } else { 0.0 };
                    self.texture.eval(p[0] + shift, p[1])
                };
                best = Some((s, v));
            }
        }
        best
    }

    /// Renders camera `pose` (A to camera): image and depth.
    fn render(&self, pose: &Pose, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let k_inv = mat3_inverse(&self.k)?;
        let rt = mat3_transpose(&pose.rotation);
        let t = mat3_vec(&rt, pose.translation);
        let origin = [-t[0], -t[1], -t[2]];
        let mut img = Vec::with_capacity(h * w);
        let mut depth = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let ray = mat3_vec(&k_inv, [x as f64, y as f64, 1.0]);
                let dir = mat3_vec(&rt, ray);
                match self.trace(origin, dir) {
                    Some((s, v)) if !v.is_nan() => {
                        img.push(quantize(v));
                        depth.push(s * ray[2]);
                    }
                    _ => {
                        img.push(quantize(BACKGROUND));
                        depth.push(0.0);
                    }
                }
            }
        }
        Ok((Tensor::new(&[h, w], img)?, Tensor::new(&[h, w], depth)?))
    }

    /// Every pixel ray of the camera hits the surface in front of it.
    fn sees_surface(&self, pose: &Pose, h: usize, w: usize) -> Result<bool> {
        let k_inv = mat3_inverse(&self.k)?;
        let rt = mat3_transpose(&pose.rotation);
        let t = mat3_vec(&rt, pose.translation);
        let origin = [-t[0], -t[1], -t[2]];
        let corners = [[0.0, 0.0], [w as f64 - 1.0, 0.0], [0.0, h as f64 - 1.0], [w as f64 - 1.0, h as f64 - 1.0]];
        for c in corners {
            let dir = mat3_vec(&rt, mat3_vec(&k_inv, [c[0], c[1], 1.0]));
            if dir[2] <= 0.0 || (self.z1 - origin[2]) / dir[2] <= 0.0 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn sample_pose<R: Rng>(rng: &mut R, cfg: &SceneConfig) -> Pose {
    let r = cfg.max_rotation_deg.to_radians();
    let t = cfg.max_translation;
    let mut uni = |b: f64| if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
    let w = [uni(r), uni(r), uni(r)];
    let tr = [uni(t), uni(t), uni(t)];
    Pose {
        rotation: rotation_from_axis_angle(w),
        translation: tr,
    }
}

/// Renders one pair. The same config always yields the same sample.
pub fn generate_pair(cfg: &SceneConfig) -> Result<PairSample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texture = PlaneTexture::sample(&mut rng, cfg.texture, h, w);
    let hole = Hole::sample(&mut rng, cfg.invalid_depth_fraction, h, w);
    let k = cfg.intrinsics();
    let second = cfg
        .two_plane
        .then(|| (cfg.plane_depth * rng.gen_range(0.7..0.85), rng.gen_range(0.4..0.7) * w as f64));
    let scene = Scene {
        texture,
        hole,
        z1: cfg.plane_depth,
        second,
        k,
    };
    let mut pose = None;
    for _ in 0..RETRY_LIMIT {
        let p = sample_pose(&mut rng, cfg);
        if scene.sees_surface(&p, h, w)? {
            pose = Some(p);
            break;
        }
    }
    let pose = pose.ok_or_else(|| Error::Geometry("no pose with the plane in front of camera B".into()))?;
    let (image_a, depth_a) = scene.render(&Pose::identity(), h, w)?;
    let (image_b, depth_b) = scene.render(&pose, h, w)?;
    let homography = if cfg.two_plane {
        None
    } else {
        Some(plane_homography(&pose, &k, &k, [0.0, 0.0, 1.0], cfg.plane_depth)?)
    };
    let sample = PairSample {
        image_a,
        image_b,
        depth_a,
        depth_b,
        pose_ab: pose,
        intrinsics_a: k,
        intrinsics_b: k,
        homography,
    };
    sample.validate()?;
    Ok(sample)
}

/// `n` samples with seeds `seed, seed+1, …`; random access by index.
#[derive(Debug, Clone, Copy)]
pub struct Dataset {
    pub config: SceneConfig,
    pub len: usize,
}

impl Dataset {
    pub fn new(config: SceneConfig, len: usize) -> Result<Self> {
        config.validate()?;
        if len == 0 {
            return Err(Error::param("n", "dataset needs at least one sample"));
        }
        Ok(Self { config, len })
    }

    pub fn get(&self, index: usize) -> Result<PairSample> {
        if index >= self.len {
            return Err(Error::InvalidIndex {
                op: "dataset",
                index,
                len: self.len,
            });
        }
        generate_pair(&SceneConfig {
            seed: self.config.seed.wrapping_add(index as u64),
            ..self.config
        })
    }

    /// Iterates from `start`.
    pub fn iter_from(&self, start: usize) -> impl Iterator<Item = Result<PairSample>> + '_ {
        (start..self.len).map(move |i| self.get(i))
    }
}

pub fn dataset(config: SceneConfig, n: usize) -> Result<impl Iterator<Item = Result<PairSample>>> {
    let ds = Dataset::new(config, n)?;
    Ok((0..n).map(move |i| ds.get(i)))
}
