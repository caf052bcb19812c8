//! Analytic time-varying scenes: spherical emitters over a sky-like ambient
//! gradient inside a Lambertian box room. The ground-truth light field and
//! the background frames both follow in closed form.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envmap::{texel_direction, EnvMap};
use crate::error::{Error, Result};
use crate::geom::{ray_sphere, Vec3};
use crate::image::{tonemap, ExposureValue, HdrImage, LdrImage, Rgb, DEFAULT_GAMMA};
use crate::io;
use crate::probe::{Camera, DepthMap, Pose};

/// Brightness multiplier over time (frame index `t` in `[1, T]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Profile {
    Constant,
    /// On for `t0 <= t < t1`.
    Step { t0: f64, t1: f64 },
    /// 1 up to `t0`, linearly down to 0 at `t1`, 0 after.
    LinearFade { t0: f64, t1: f64 },
}

impl Profile {
    pub fn multiplier(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant => 1.0,
            Profile::Step { t0, t1 } => {
                if t >= t0 && t < t1 {
                    1.0
                } else {
                    0.0
                }
            }
            Profile::LinearFade { t0, t1 } => {
                if t <= t0 {
                    1.0
                } else if t >= t1 {
                    0.0
                } else {
                    (t1 - t) / (t1 - t0)
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Profile::Constant => Ok(()),
            Profile::Step { t0, t1 } | Profile::LinearFade { t0, t1 } if t0 < t1 => Ok(()),
            _ => Err(Error::Config(format!("profile {self:?} needs t0 < t1"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emitter {
    pub center: Vec3,
    pub radius: f64,
    pub radiance: Rgb,
    #[serde(default = "constant_profile")]
    pub profile: Profile,
}

fn constant_profile() -> Profile {
    Profile::Constant
}

/// Ambient radiance blended from `bottom` (d = -up) to `top` (d = +up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ambient {
    pub top: Rgb,
    pub bottom: Rgb,
}

impl Ambient {
    pub fn at(&self, d: Vec3) -> Rgb {
        let w = 0.5 * (d.y + 1.0);
        std::array::from_fn(|c| self.bottom[c] + w * (self.top[c] - self.bottom[c]))
    }

    /// Cosine-weighted mean over the upper and lower hemispheres is the
    /// plain average of the two colors for this linear gradient.
    pub fn mean(&self) -> Rgb {
        std::array::from_fn(|c| 0.5 * (self.top[c] + self.bottom[c]))
    }
}

/// Axis-aligned box room with one albedo per face, ordered
/// `-x, +x, -y, +y, -z, +z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Room {
    pub min: Vec3,
    pub max: Vec3,
    pub albedo: [Rgb; 6],
}

/// Pre-rendered backgrounds: `frame_####.png` and `depth_####.pfm`, 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundFiles {
    pub dir: PathBuf,
}

impl BackgroundFiles {
    pub fn frame_path(&self, t: usize) -> PathBuf {
        self.dir.join(format!("frame_{t:04}.png"))
    }

    pub fn depth_path(&self, t: usize) -> PathBuf {
        self.dir.join(format!("depth_{t:04}.pfm"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub emitters: Vec<Emitter>,
    pub ambient: Ambient,
    pub room: Room,
    pub camera: Camera,
    pub frames: usize,
    /// Per-frame camera poses; empty means the camera's own pose throughout.
    #[serde(default)]
    pub camera_path: Vec<Pose>,
    #[serde(default)]
    pub backgrounds: Option<BackgroundFiles>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 1 {
            return Err(Error::Config("scene needs at least one frame".into()));
        }
        self.camera.validate()?;
        if !self.camera_path.is_empty() && self.camera_path.len() != self.frames {
            return Err(Error::Config(format!(
                "camera_path has {} poses for {} frames",
                self.camera_path.len(),
                self.frames
            )));
        }
        let r = &self.room;
        if !(r.min.x < r.max.x && r.min.y < r.max.y && r.min.z < r.max.z) {
            return Err(Error::Config("room box is empty".into()));
        }
        let mut any_light = self.ambient.top.iter().chain(&self.ambient.bottom).any(|&v| v > 0.0);
        for e in &self.emitters {
            e.profile.validate()?;
            if !(e.radius > 0.0) || e.radiance.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config(format!("invalid emitter {e:?}")));
            }
            any_light |= e.radiance.iter().any(|&v| v > 0.0);
        }
        if self.ambient.top.iter().chain(&self.ambient.bottom).any(|&v| !(v >= 0.0)) {
            return Err(Error::Config("ambient must be non-negative".into()));
        }
        if !any_light {
            return Err(Error::Config("scene has no light".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut s: SceneSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(bg), Some(parent)) = (s.backgrounds.as_mut(), path.parent()) {
            if bg.dir.is_relative() {
                bg.dir = parent.join(&bg.dir);
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Camera for frame `t` (1-based).
    pub fn camera_at(&self, t: usize) -> Camera {
        match self.camera_path.get(t.saturating_sub(1)) {
            Some(p) => self.camera.with_pose(*p),
            None => self.camera,
        }
    }

    /// Ground-truth radiance arriving at `x` from direction `d` at time `t`.
    ///
    /// Emitters along the ray are composited nearest first with their
    /// multiplier acting as opacity, so a switched-off emitter is
    /// transparent and reveals whatever lies behind it.
    pub fn gt_radiance(&self, x: Vec3, t: f64, d: Vec3) -> Rgb {
        let d = d.normalized();
        let mut hits: Vec<(f64, &Emitter, f64)> = Vec::with_capacity(self.emitters.len());
        for e in &self.emitters {
            let m = e.profile.multiplier(t);
            if m <= 0.0 {
                continue;
            }
            if let Some((near, far)) = ray_sphere(x, d, e.center, e.radius) {
                if far > 0.0 {
                    hits.push((near.max(0.0), e, m));
                }
            }
        }
        hits.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = [0.0; 3];
        let mut trans = 1.0;
        for (_, e, m) in hits {
            for c in 0..3 {
                out[c] += trans * m * e.radiance[c];
            }
            trans *= 1.0 - m;
            if trans == 0.0 {
                return out;
            }
        }
        let amb = self.ambient.at(d);
        std::array::from_fn(|c| out[c] + trans * amb[c])
    }

    pub fn gt_envmap(&self, x: Vec3, t: f64, h: usize) -> EnvMap {
        let w = 2 * h;
        let mut img = HdrImage::zeros(w, h);
        for j in 0..h {
            for i in 0..w {
                img.set(i, j, self.gt_radiance(x, t, texel_direction(i, j, h, 0.0).vec()));
            }
        }
        EnvMap::new(img).expect("gt radiance is finite")
    }

    /// Direct irradiance from all emitters at a surface point.
    pub fn irradiance(&self, p: Vec3, n: Vec3, t: f64) -> Rgb {
        let mut e_sum = [0.0; 3];
        for e in &self.emitters {
            let m = e.profile.multiplier(t);
            if m <= 0.0 {
                continue;
            }
            let to = e.center - p;
            let dist2 = to.norm_sq();
            if dist2 <= e.radius * e.radius {
                continue;
            }
            let cos = to.dot(n) / dist2.sqrt();
            if cos <= 0.0 {
                continue;
            }
            // sphere of uniform radiance: E = L * pi * sin^2(alpha) * cos(theta)
            let k = m * std::f64::consts::PI * e.radius * e.radius / dist2 * cos;
            for c in 0..3 {
                e_sum[c] += k * e.radiance[c];
            }
        }
        e_sum
    }

    /// Nearest room wall hit from inside: `(distance, face index, normal)`.
    pub fn room_hit(&self, o: Vec3, d: Vec3) -> Option<(f64, usize, Vec3)> {
        let r = &self.room;
        let mut best: Option<(f64, usize, Vec3)> = None;
        let axes = [(o.x, d.x, r.min.x, r.max.x), (o.y, d.y, r.min.y, r.max.y), (o.z, d.z, r.min.z, r.max.z)];
        for (a, &(oa, da, lo, hi)) in axes.iter().enumerate() {
            if da == 0.0 {
                continue;
            }
            let (t, face, sign) = if da > 0.0 { ((hi - oa) / da, 2 * a + 1, -1.0) } else { ((lo - oa) / da, 2 * a, 1.0) };
            if t > 0.0 && best.is_none_or(|b| t < b.0) {
                let mut n = [0.0; 3];
                n[a] = sign;
                best = Some((t, face, Vec3::from(n)));
            }
        }
        best
    }

    /// HDR wall radiance and camera-space depth for every pixel of frame `t`.
    pub fn render_background_hdr(&self, camera: &Camera, t: f64) -> Result<(HdrImage, DepthMap)> {
        camera.validate()?;
        let (w, h) = (camera.width, camera.height);
        let amb = self.ambient.mean();
        let origin = camera.pose.translation;
        let mut img = HdrImage::zeros(w, h);
        let mut depth = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let dc = camera.ray(x as f64 + 0.5, y as f64 + 0.5).normalized();
                let dw = camera.pose.dir_to_world(dc);
                let (dist, face, n) = self.room_hit(origin, dw).ok_or_else(|| {
                    Error::InvalidData("camera ray escapes the room; is the camera inside?".into())
                })?;
                let p = origin + dw * dist;
                let e = self.irradiance(p, n, t);
                let a = self.room.albedo[face];
                img.set(x, y, std::array::from_fn(|c| a[c] * (e[c] / std::f64::consts::PI + amb[c])));
                depth.push(dist * dc.z);
            }
        }
        Ok((img, DepthMap::new(w, h, depth)?))
    }

    /// Background frame `t` (tonemapped at ev 0) and its depth.
    pub fn render_background(&self, camera: &Camera, t: f64) -> Result<(LdrImage, DepthMap)> {
        let (hdr, depth) = self.render_background_hdr(camera, t)?;
        Ok((tonemap(&hdr, ExposureValue::nominal(), DEFAULT_GAMMA)?, depth))
    }

    /// Background for frame `t`: loaded from `backgrounds` when configured,
    /// otherwise rendered.
    pub fn background(&self, t: usize) -> Result<(LdrImage, DepthMap)> {
        let cam = self.camera_at(t);
        match &self.backgrounds {
            None => self.render_background(&cam, t as f64),
            Some(files) => {
                let frame = io::read_png(files.frame_path(t))?;
                let depth = DepthMap::from_hdr(&io::read_pfm(files.depth_path(t))?)?;
                if frame.dims() != (cam.width, cam.height) || (depth.width(), depth.height()) != (cam.width, cam.height) {
                    return Err(Error::mismatch(
                        format!("{}x{}", cam.width, cam.height),
                        format!("{}x{}", frame.width(), frame.height()),
                    ));
                }
                Ok((frame, depth))
            }
        }
    }

    /// Three emitters (one stepping on and off), 20 frames of 128x128.
    pub fn three_emitter_step() -> Self {
        SceneSpec {
            emitters: vec![
                Emitter {
                    center: Vec3::new(-1.6, 1.4, 2.2),
                    radius: 0.35,
                    radiance: [6.0, 5.2, 4.0],
                    profile: Profile::Constant,
                },
                Emitter {
                    center: Vec3::new(2.1, -1.0, 3.0),
                    radius: 0.3,
                    radiance: [2.0, 3.0, 6.5],
                    profile: Profile::Step { t0: 8.0, t1: 15.0 },
                },
                Emitter {
                    center: Vec3::new(0.6, 1.5, -0.8),
                    radius: 0.4,
                    radiance: [4.5, 2.5, 1.5],
                    profile: Profile::Constant,
                },
            ],
            ambient: Ambient {
                top: [0.45, 0.5, 0.6],
                bottom: [0.25, 0.2, 0.15],
            },
            room: default_room(),
            camera: Camera::centered(128.0, 128, 128),
            frames: 20,
            camera_path: vec![],
            backgrounds: None,
        }
    }

    /// Same room with every emitter constant in time.
    pub fn constant_emitters() -> Self {
        let mut s = Self::three_emitter_step();
        for e in &mut s.emitters {
            e.profile = Profile::Constant;
        }
        s
    }

    /// `n` random query points, each at a random pixel of a random frame and
    /// a random depth in front of the background there (in world space).
    pub fn sample_probe_points(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<ProbePoint>> {
        let mut out = Vec::with_capacity(n);
        let mut cache: std::collections::HashMap<usize, DepthMap> = std::collections::HashMap::new();
        let mut attempts = 0;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n.max(1) {
                return Err(Error::InvalidData("could not place probe points in front of the background".into()));
            }
            let t = rng.random_range(1..=self.frames);
            let cam = self.camera_at(t);
            if !cache.contains_key(&t) {
                cache.insert(t, self.background(t)?.1);
            }
            let depth = &cache[&t];
            let (px, py) = (rng.random_range(0..cam.width), rng.random_range(0..cam.height));
            let d = depth.get(px, py);
            if d < 2.0 * crate::probe::NEAR_PLANE {
                continue;
            }
            let z = rng.random_range(0.3 * d..0.9 * d);
            let local = cam.unproject(px as f64 + 0.5, py as f64 + 0.5, z);
            out.push(ProbePoint {
                x: cam.pose.point_to_world(local),
                t: t as f64,
            });
        }
        Ok(out)
    }
}

/// A light-field query location: world position and frame time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbePoint {
    pub x: Vec3,
    pub t: f64,
}

impl ProbePoint {
    pub fn load_list(path: impl AsRef<Path>) -> Result<Vec<ProbePoint>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

fn default_room() -> Room {
    Room {
        min: Vec3::new(-2.5, -1.5, -1.5),
        max: Vec3::new(2.5, 2.0, 5.0),
        albedo: [
            [0.6, 0.45, 0.4],
            [0.4, 0.5, 0.6],
            [0.5, 0.45, 0.35],
            [0.8, 0.8, 0.8],
            [0.7, 0.7, 0.7],
            [0.55, 0.6, 0.5],
        ],
    }
}
