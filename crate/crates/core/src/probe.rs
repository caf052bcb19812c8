//! Chrome-ball light probes: placement, projection into the camera, mirror
//! rendering under an environment map, compositing, and unwrapping a ball
//! image back into an environment map.
//!
//! Balls live in camera space (+X right, +Y up, +Z along the optical axis).
//! Image coordinates grow right and down, so `v = cy - fy * y / z`.
//! Reflected directions are turned into world space by the camera pose
//! before any environment lookup.

use serde::{Deserialize, Serialize};

use crate::envmap::{bilinear_taps_in, texel_direction, Direction, EnvMap};
use crate::error::{Error, Result};
use crate::geom::{ray_sphere, Mat3, Vec3};
use crate::image::{tonemap_rgb, ExposureValue, HdrImage, LdrImage, Rgb};

pub const NEAR_PLANE: f64 = 0.01;
pub const DEFAULT_SUPERSAMPLE: usize = 4;

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    #[serde(default)]
    pub rotation: Mat3,
    #[serde(default)]
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn point_to_world(&self, p: Vec3) -> Vec3 {
        self.rotation.apply(p) + self.translation
    }

    pub fn dir_to_world(&self, d: Vec3) -> Vec3 {
        self.rotation.apply(d)
    }

    pub fn dir_to_camera(&self, d: Vec3) -> Vec3 {
        self.rotation.transpose().apply(d)
    }
}

/// Pinhole intrinsics (zero skew) plus image size and pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub pose: Pose,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose: Pose::identity(),
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square image with the principal point at the center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Camera {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose: Pose::identity(),
        }
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidArgument(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Unnormalized camera-space ray through continuous pixel `(u, v)`.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, 1.0)
    }

    /// Camera-space point at depth `z` (along +Z) seen through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        self.ray(u, v) * z
    }

    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.cx + self.fx * p.x / p.z, self.cy - self.fy * p.y / p.z))
    }
}

/// Metric depth along the camera's +Z axis, one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidData(format!("depth {v} is not finite and positive")));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Self {
        Self {
            width,
            height,
            data: vec![depth; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Depth replicated into all three channels, for PFM export.
    pub fn to_hdr(&self) -> HdrImage {
        HdrImage::from_fn(self.width, self.height, |x, y| [self.get(x, y); 3])
    }

    /// Reads the first channel of an HDR image as depth.
    pub fn from_hdr(img: &HdrImage) -> Result<Self> {
        let data = img.pixels().map(|p| p[0]).collect();
        Self::new(img.width(), img.height(), data)
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::mismatch(width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn at(&self, index: usize) -> bool {
        self.data[index]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_ldr(&self) -> LdrImage {
        LdrImage::from_fn(self.width, self.height, |x, y| {
            [if self.get(x, y) { 1.0 } else { 0.0 }; 3]
        })
    }

    /// Thresholds the first channel at one half.
    pub fn from_ldr(img: &LdrImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p[0] >= 0.5).collect(),
        }
    }
}

/// A mirror sphere in camera space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ball {
    pub center: Vec3,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec3, radius: f64) -> Result<Self> {
        let b = Ball { center, radius };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.center.is_finite() {
            return Err(Error::InvalidArgument(format!("invalid ball {self:?}")));
        }
        if self.center.z - self.radius <= NEAR_PLANE {
            return Err(Error::InvalidArgument(format!(
                "ball at z={} with radius {} crosses the near plane",
                self.center.z, self.radius
            )));
        }
        Ok(())
    }

    /// Inclusive-exclusive pixel bounds of the projected silhouette, clipped
    /// to the image. Uses the projection of the bounding cube, which always
    /// contains the silhouette for balls in front of the near plane.
    pub fn pixel_bounds(&self, camera: &Camera) -> Option<(usize, usize, usize, usize)> {
        let r = self.radius;
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    let p = self.center + Vec3::new(sx * r, sy * r, sz * r);
                    let (u, v) = camera.project(p)?;
                    umin = umin.min(u);
                    umax = umax.max(u);
                    vmin = vmin.min(v);
                    vmax = vmax.max(v);
                }
            }
        }
        let x0 = umin.floor().max(0.0) as usize;
        let y0 = vmin.floor().max(0.0) as usize;
        let x1 = (umax.ceil().max(0.0) as usize).min(camera.width);
        let y1 = (vmax.ceil().max(0.0) as usize).min(camera.height);
        if x0 >= x1 || y0 >= y1 {
            return None;
        }
        Some((x0, y0, x1, y1))
    }

    /// Nearest intersection of a camera ray (unit `dir` from the origin).
    #[inline]
    pub fn hit(&self, dir: Vec3) -> Option<f64> {
        let (t0, _) = ray_sphere(Vec3::ZERO, dir, self.center, self.radius)?;
        (t0 > 0.0).then_some(t0)
    }
}

/// Balls, the camera observing them, and the background depth they are
/// composited against.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub balls: Vec<Ball>,
    pub camera: Camera,
    pub background_depth: DepthMap,
}

impl ProbeSet {
    pub fn new(balls: Vec<Ball>, camera: Camera, background_depth: DepthMap) -> Result<Self> {
        camera.validate()?;
        if (background_depth.width, background_depth.height) != (camera.width, camera.height) {
            return Err(Error::mismatch(
                format!("{}x{}", camera.width, camera.height),
                format!("{}x{}", background_depth.width, background_depth.height),
            ));
        }
        for b in &balls {
            b.validate()?;
            if camera.project(b.center).is_none_or(|(u, v)| {
                u < 0.0 || v < 0.0 || u >= camera.width as f64 || v >= camera.height as f64
            }) {
                return Err(Error::InvalidArgument(format!(
                    "ball center {:?} outside the view frustum",
                    b.center
                )));
            }
        }
        Ok(Self {
            balls,
            camera,
            background_depth,
        })
    }
}

/// Radius whose projected diameter is about a quarter of the shorter image side.
pub fn size_ball(camera: &Camera, center: Vec3) -> Result<f64> {
    if !(center.z > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ball center must be in front of the camera, got z={}",
            center.z
        )));
    }
    let short = camera.width.min(camera.height) as f64;
    Ok(short / 8.0 * center.z / camera.fx)
}

/// Inpainting mask and composited depth (balls over background).
pub fn project_mask_and_depth(probes: &ProbeSet) -> (Mask, DepthMap) {
    let cam = &probes.camera;
    let mut mask = Mask::empty(cam.width, cam.height);
    let mut depth = probes.background_depth.clone();
    for ball in &probes.balls {
        let Some((x0, y0, x1, y1)) = ball.pixel_bounds(cam) else {
            continue;
        };
        for y in y0..y1 {
            for x in x0..x1 {
                let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5).normalized();
                if let Some(t) = ball.hit(dir) {
                    let z = t * dir.z;
                    let i = y * cam.width + x;
                    if z < probes.background_depth.data[i] {
                        mask.data[i] = true;
                        if z < depth.data[i] {
                            depth.data[i] = z;
                        }
                    }
                }
            }
        }
    }
    (mask, depth)
}

/// The geometric part of rendering one ball: per pixel coverage, depth, and
/// the environment texels (with weights) its color is a blend of.
///
/// Depends only on the ball, camera and envmap grid, never on radiance, so
/// the same footprint shades any envmap on that grid and carries the
/// backward pass for free.
#[derive(Debug, Clone)]
pub struct BallFootprint {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub env_height: usize,
    pub coverage: Vec<f64>,
    pub depth: Vec<f64>,
    tap_offsets: Vec<u32>,
    taps: Vec<(u32, f64)>,
}

impl BallFootprint {
    /// Traces `supersample x supersample` stratified rays per pixel.
    ///
    /// `grid` turns the envmap's texel directions (see [`bilinear_taps_in`]).
    pub fn trace(ball: &Ball, camera: &Camera, env_height: usize, grid: &Mat3, supersample: usize) -> Self {
        let ss = supersample.max(1);
        let Some((x0, y0, x1, y1)) = ball.pixel_bounds(camera) else {
            return Self {
                x0: 0,
                y0: 0,
                width: 0,
                height: 0,
                env_height,
                coverage: vec![],
                depth: vec![],
                tap_offsets: vec![0],
                taps: vec![],
            };
        };
        let (w, h) = (x1 - x0, y1 - y0);
        let inv = 1.0 / (ss * ss) as f64;
        let mut coverage = vec![0.0; w * h];
        let mut depth = vec![f64::INFINITY; w * h];
        let mut tap_offsets = Vec::with_capacity(w * h + 1);
        let mut taps: Vec<(u32, f64)> = Vec::new();
        let mut scratch: Vec<(u32, f64)> = Vec::with_capacity(4 * ss * ss);
        tap_offsets.push(0u32);
        for ly in 0..h {
            for lx in 0..w {
                let (px, py) = ((x0 + lx) as f64, (y0 + ly) as f64);
                scratch.clear();
                let mut hits = 0usize;
                let mut zmin = f64::INFINITY;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let u = px + (sx as f64 + 0.5) / ss as f64;
                        let v = py + (sy as f64 + 0.5) / ss as f64;
                        let dir = camera.ray(u, v).normalized();
                        let Some(t) = ball.hit(dir) else { continue };
                        hits += 1;
                        let p = dir * t;
                        zmin = zmin.min(p.z);
                        let n = (p - ball.center) / ball.radius;
                        let refl = dir.reflect(n);
                        let world = camera.pose.dir_to_world(refl);
                        let d = Direction::from_unit(world.normalized());
                        scratch.extend(bilinear_taps_in(d, env_height, grid));
                    }
                }
                let i = ly * w + lx;
                if hits > 0 {
                    coverage[i] = hits as f64 * inv;
                    depth[i] = zmin;
                    let norm = 1.0 / hits as f64;
                    scratch.sort_unstable_by_key(|t| t.0);
                    let start = taps.len();
                    for &(idx, wt) in scratch.iter() {
                        if wt == 0.0 {
                            continue;
                        }
                        let merge = taps.len() > start && taps.last().is_some_and(|l| l.0 == idx);
                        if merge {
                            taps.last_mut().unwrap().1 += wt * norm;
                        } else {
                            taps.push((idx, wt * norm));
                        }
                    }
                }
                tap_offsets.push(taps.len() as u32);
            }
        }
        Self {
            x0,
            y0,
            width: w,
            height: h,
            env_height,
            coverage,
            depth,
            tap_offsets,
            taps,
        }
    }

    pub fn len_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel_taps(&self, local: usize) -> &[(u32, f64)] {
        &self.taps[self.tap_offsets[local] as usize..self.tap_offsets[local + 1] as usize]
    }

    /// Sorted, deduplicated texel indices referenced anywhere in the footprint.
    pub fn referenced_texels(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.taps.iter().map(|t| t.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Shades the footprint with per-texel radiance.
    pub fn shade(&self, texel: impl Fn(u32) -> Rgb) -> Sprite {
        let mut rgb = vec![[0.0; 3]; self.len_pixels()];
        for (i, out) in rgb.iter_mut().enumerate() {
            for &(idx, w) in self.pixel_taps(i) {
                let t = texel(idx);
                for c in 0..3 {
                    out[c] += w * t[c];
                }
            }
        }
        Sprite {
            x0: self.x0,
            y0: self.y0,
            width: self.width,
            height: self.height,
            rgb,
            alpha: self.coverage.clone(),
            depth: self.depth.clone(),
        }
    }

    /// Scatters per-pixel color gradients onto texels: `grad_texel(idx, g)`
    /// is called once per (pixel, tap).
    pub fn scatter(&self, pixel_grad: &[Rgb], mut grad_texel: impl FnMut(u32, Rgb)) {
        for (i, g) in pixel_grad.iter().enumerate() {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for &(idx, w) in self.pixel_taps(i) {
                grad_texel(idx, g.map(|v| v * w));
            }
        }
    }
}

/// A rendered ball: straight (not premultiplied) HDR color, coverage and
/// nearest hit depth for each pixel of its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<Rgb>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl Sprite {
    /// The sprite as a full-frame HDR image (premultiplied by coverage).
    pub fn to_frame(&self, width: usize, height: usize) -> HdrImage {
        let mut img = HdrImage::zeros(width, height);
        for ly in 0..self.height {
            for lx in 0..self.width {
                let i = ly * self.width + lx;
                let (x, y) = (self.x0 + lx, self.y0 + ly);
                if x < width && y < height {
                    img.set(x, y, self.rgb[i].map(|v| v * self.alpha[i]));
                }
            }
        }
        img
    }

    pub fn coverage_frame(&self, width: usize, height: usize) -> LdrImage {
        let mut img = LdrImage::zeros(width, height);
        for ly in 0..self.height {
            for lx in 0..self.width {
                let (x, y) = (self.x0 + lx, self.y0 + ly);
                if x < width && y < height {
                    img.set(x, y, [self.alpha[ly * self.width + lx]; 3]);
                }
            }
        }
        img
    }

    /// Bilinear fetch at continuous frame coordinates over covered pixels only.
    pub fn sample(&self, u: f64, v: f64) -> Option<Rgb> {
        let fx = u - 0.5 - self.x0 as f64;
        let fy = v - 0.5 - self.y0 as f64;
        let (x0, y0) = (fx.floor(), fy.floor());
        let (a, b) = (fx - x0, fy - y0);
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for (dx, dy, w) in [(0, 0, (1.0 - a) * (1.0 - b)), (1, 0, a * (1.0 - b)), (0, 1, (1.0 - a) * b), (1, 1, a * b)] {
            let (x, y) = (x0 as i64 + dx, y0 as i64 + dy);
            if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 || w == 0.0 {
                continue;
            }
            let i = y as usize * self.width + x as usize;
            if self.alpha[i] <= 0.0 {
                continue;
            }
            for c in 0..3 {
                acc[c] += w * self.rgb[i][c];
            }
            wsum += w;
        }
        (wsum > 1e-9).then(|| acc.map(|v| v / wsum))
    }
}

/// Mirror-ball rendering of `env` as seen by `camera`.
pub fn render_ball(env: &EnvMap, ball: &Ball, camera: &Camera, supersample: usize) -> Result<Sprite> {
    if supersample < 1 {
        return Err(Error::InvalidArgument("supersample must be >= 1".into()));
    }
    ball.validate()?;
    let fp = BallFootprint::trace(ball, camera, env.height(), &Mat3::IDENTITY, supersample);
    Ok(fp.shade(|i| env.texel(i as usize)))
}

/// Front-to-back layering of sprites over a frame.
///
/// For every frame pixel touched by a sprite, stores the visible layers with
/// their compositing weights `T_k * alpha_k` and the residual transmittance
/// of the background.
#[derive(Debug, Clone)]
pub struct Layering {
    pub width: usize,
    pub height: usize,
    offsets: Vec<u32>,
    entries: Vec<LayerRef>,
    pub transmittance: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRef {
    pub sprite: u32,
    pub local: u32,
    pub weight: f64,
}

impl Layering {
    /// `occlusion` hides sprite pixels at or behind the background depth.
    pub fn build(width: usize, height: usize, sprites: &[&SpriteGeometry], occlusion: Option<&DepthMap>) -> Self {
        let mut per_pixel: Vec<Vec<(f64, u32, u32, f64)>> = vec![Vec::new(); width * height];
        for (si, s) in sprites.iter().enumerate() {
            for ly in 0..s.height {
                for lx in 0..s.width {
                    let (x, y) = (s.x0 + lx, s.y0 + ly);
                    if x >= width || y >= height {
                        continue;
                    }
                    let li = ly * s.width + lx;
                    let a = s.alpha[li];
                    if a <= 0.0 {
                        continue;
                    }
                    let z = s.depth[li];
                    let fi = y * width + x;
                    if occlusion.is_some_and(|d| z >= d.data[fi]) {
                        continue;
                    }
                    per_pixel[fi].push((z, si as u32, li as u32, a));
                }
            }
        }
        let mut offsets = Vec::with_capacity(width * height + 1);
        let mut entries = Vec::new();
        let mut transmittance = vec![1.0; width * height];
        offsets.push(0);
        for (fi, layers) in per_pixel.iter_mut().enumerate() {
            layers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut t = 1.0;
            for &(_, s, l, a) in layers.iter() {
                entries.push(LayerRef {
                    sprite: s,
                    local: l,
                    weight: t * a,
                });
                t *= 1.0 - a;
            }
            transmittance[fi] = t;
            offsets.push(entries.len() as u32);
        }
        Self {
            width,
            height,
            offsets,
            entries,
            transmittance,
        }
    }

    #[inline]
    pub fn layers(&self, pixel: usize) -> &[LayerRef] {
        &self.entries[self.offsets[pixel] as usize..self.offsets[pixel + 1] as usize]
    }

    /// `out = sum_k weight_k * color(k) + T * background`.
    pub fn apply(&self, background: &[f64], color: impl Fn(&LayerRef) -> Rgb) -> Vec<f64> {
        let mut out = background.to_vec();
        for fi in 0..self.width * self.height {
            let layers = self.layers(fi);
            if layers.is_empty() {
                continue;
            }
            let t = self.transmittance[fi];
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = t * background[fi * 3 + c];
            }
            for l in layers {
                let col = color(l);
                for c in 0..3 {
                    px[c] += l.weight * col[c];
                }
            }
            out[fi * 3..fi * 3 + 3].copy_from_slice(&px);
        }
        out
    }
}

/// The parts of a sprite layering needs; implemented by [`Sprite`] and
/// [`BallFootprint`].
pub struct SpriteGeometry<'a> {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub alpha: &'a [f64],
    pub depth: &'a [f64],
}

impl Sprite {
    pub fn geometry(&self) -> SpriteGeometry<'_> {
        SpriteGeometry {
            x0: self.x0,
            y0: self.y0,
            width: self.width,
            height: self.height,
            alpha: &self.alpha,
            depth: &self.depth,
        }
    }
}

impl BallFootprint {
    pub fn geometry(&self) -> SpriteGeometry<'_> {
        SpriteGeometry {
            x0: self.x0,
            y0: self.y0,
            width: self.width,
            height: self.height,
            alpha: &self.coverage,
            depth: &self.depth,
        }
    }
}

fn check_occlusion(w: usize, h: usize, occlusion: Option<&DepthMap>) -> Result<()> {
    if let Some(d) = occlusion {
        if (d.width, d.height) != (w, h) {
            return Err(Error::mismatch(format!("{w}x{h}"), format!("{}x{}", d.width, d.height)));
        }
    }
    Ok(())
}

/// Composites HDR sprites over an HDR frame, nearest first.
pub fn composite_hdr(frame: &HdrImage, sprites: &[Sprite], occlusion: Option<&DepthMap>) -> Result<HdrImage> {
    let (w, h) = frame.dims();
    check_occlusion(w, h, occlusion)?;
    let geoms: Vec<_> = sprites.iter().map(|s| s.geometry()).collect();
    let refs: Vec<_> = geoms.iter().collect();
    let layering = Layering::build(w, h, &refs, occlusion);
    let data = layering.apply(frame.data(), |l| sprites[l.sprite as usize].rgb[l.local as usize]);
    HdrImage::new(w, h, data)
}

/// Tonemaps each sprite at `ev` and composites it over an LDR frame.
pub fn composite_ldr(
    frame: &LdrImage,
    sprites: &[Sprite],
    occlusion: Option<&DepthMap>,
    ev: ExposureValue,
    gamma: f64,
) -> Result<LdrImage> {
    let (w, h) = frame.dims();
    check_occlusion(w, h, occlusion)?;
    let geoms: Vec<_> = sprites.iter().map(|s| s.geometry()).collect();
    let refs: Vec<_> = geoms.iter().collect();
    let layering = Layering::build(w, h, &refs, occlusion);
    let gain = ev.gain();
    let data = layering.apply(frame.data(), |l| {
        tonemap_rgb(sprites[l.sprite as usize].rgb[l.local as usize], gain, gamma)
    });
    LdrImage::new(w, h, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Angle between the reflected ray and the camera-to-center axis for a view
/// ray at angle `beta` off that axis, in the 2D plane containing both.
fn reflected_angle(beta: f64, dist: f64, radius: f64) -> f64 {
    let (sb, cb) = beta.sin_cos();
    let disc = (radius * radius - dist * dist * sb * sb).max(0.0);
    let t = dist * cb - disc.sqrt();
    let (px, py) = (t * cb, t * sb);
    let (nx, ny) = ((px - dist) / radius, py / radius);
    let vn = cb * nx + sb * ny;
    let (wx, wy) = (cb - 2.0 * vn * nx, sb - 2.0 * vn * ny);
    wy.abs().atan2(wx)
}

const UNWRAP_TOLERANCE: f64 = 1e-6;

/// Inverts the mirror mapping of `ball` to recover radiance per direction.
///
/// Returns the map and a per-texel validity mask; directions inside the
/// blind cone behind the ball, or whose preimage lands on uncovered sprite
/// pixels, are invalid (and zero in the map).
pub fn unwrap_ball(sprite: &Sprite, ball: &Ball, camera: &Camera, env_height: usize) -> Result<(EnvMap, Vec<bool>)> {
    ball.validate()?;
    let h = env_height;
    let w = 2 * h;
    let dist = ball.center.norm();
    let axis = ball.center / dist;
    let beta_max = (ball.radius / dist).asin();
    let mut img = HdrImage::zeros(w, h);
    let mut valid = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            let world = texel_direction(i, j, h, 0.0).vec();
            let omega = camera.pose.dir_to_camera(world);
            let cos_g = omega.dot(axis).clamp(-1.0, 1.0);
            let target = cos_g.acos();
            if target < beta_max {
                continue;
            }
            let perp = omega - axis * cos_g;
            let e = if perp.norm() > 1e-12 {
                perp.normalized()
            } else {
                axis.any_orthonormal()
            };
            // reflected_angle falls monotonically from pi at beta=0 to beta_max
            let (mut lo, mut hi) = (0.0f64, beta_max);
            while hi - lo > UNWRAP_TOLERANCE * 0.1 {
                let mid = 0.5 * (lo + hi);
                if reflected_angle(mid, dist, ball.radius) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let beta = 0.5 * (lo + hi);
            let view = (axis * beta.cos() + e * beta.sin()).normalized();
            let Some(t) = ball.hit(view) else { continue };
            let Some((u, v)) = camera.project(view * t) else { continue };
            if let Some(rgb) = sprite.sample(u, v) {
                img.set(i, j, rgb);
                valid[j * w + i] = true;
            }
        }
    }
    Ok((EnvMap::new(img)?, valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam512() -> Camera {
        Camera::centered(512.0, 512, 512)
    }

    #[test]
    fn size_ball_examples() {
        let cam = cam512();
        let r = size_ball(&cam, Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((r - 0.25).abs() < 1e-15);
        let r2 = size_ball(&cam, Vec3::new(0.3, 0.1, 4.0)).unwrap();
        assert!((r2 - 0.5).abs() < 1e-15);
        assert!(size_ball(&cam, Vec3::new(0.0, 0.0, 0.0)).is_err());
        assert!(size_ball(&cam, Vec3::new(0.0, 0.0, -1.0)).is_err());
    }

    #[test]
    fn no_balls_gives_empty_mask() {
        let cam = Camera::centered(64.0, 32, 32);
        let bg = DepthMap::constant(32, 32, 3.0);
        let set = ProbeSet::new(vec![], cam, bg.clone()).unwrap();
        let (mask, depth) = project_mask_and_depth(&set);
        assert_eq!(mask.count(), 0);
        assert_eq!(depth, bg);
    }

    #[test]
    fn on_axis_ball_projects_to_a_disc() {
        let cam = cam512();
        let ball = Ball::new(Vec3::new(0.0, 0.0, 2.0), 0.25).unwrap();
        let set = ProbeSet::new(vec![ball], cam, DepthMap::constant(512, 512, 10.0)).unwrap();
        let (mask, depth) = project_mask_and_depth(&set);
        // analytic silhouette radius: f * tan(asin(r / d))
        let rad = 512.0 * (0.125f64).asin().tan();
        for y in 0..512 {
            for x in 0..512 {
                let d = ((x as f64 + 0.5 - 256.0).powi(2) + (y as f64 + 0.5 - 256.0).powi(2)).sqrt();
                if d < rad - 1.0 {
                    assert!(mask.get(x, y));
                    assert!(depth.get(x, y) < 2.0);
                } else if d > rad + 1.0 {
                    assert!(!mask.get(x, y));
                }
            }
        }
        assert!((rad - 64.0).abs() < 1.0);
        assert!((depth.get(256, 256) - 1.75).abs() < 1e-3);
    }

    #[test]
    fn wall_in_front_hides_ball() {
        let cam = cam512();
        let ball = Ball::new(Vec3::new(0.0, 0.0, 2.0), 0.25).unwrap();
        let set = ProbeSet::new(vec![ball], cam, DepthMap::constant(512, 512, 1.5)).unwrap();
        let (mask, depth) = project_mask_and_depth(&set);
        assert_eq!(mask.count(), 0);
        assert!(depth.data().iter().all(|&d| d == 1.5));
    }

    #[test]
    fn constant_env_renders_constant_ball() {
        let cam = Camera::centered(128.0, 128, 128);
        let env = EnvMap::constant(16, [0.7, 0.2, 3.0]);
        let ball = Ball::new(Vec3::new(0.1, -0.1, 2.0), 0.25).unwrap();
        let s = render_ball(&env, &ball, &cam, 4).unwrap();
        for (c, a) in s.rgb.iter().zip(&s.alpha) {
            if *a > 0.0 {
                assert!((c[0] - 0.7).abs() < 1e-12 && (c[2] - 3.0).abs() < 1e-12);
            }
        }
        assert!(s.alpha.iter().any(|&a| a == 1.0));
        assert!(s.alpha.iter().any(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn center_pixel_reflects_back_toward_camera() {
        let cam = Camera::centered(256.0, 256, 256);
        // +Z hemisphere dark, -Z hemisphere bright
        let env = EnvMap::from_fn(64, |d| if d.vec().z < 0.0 { [5.0, 5.0, 5.0] } else { [0.1; 3] });
        let ball = Ball::new(Vec3::new(0.0, 0.0, 2.0), 0.25).unwrap();
        let s = render_ball(&env, &ball, &cam, 1).unwrap();
        let (lx, ly) = (128 - s.x0, 128 - s.y0);
        assert!((s.rgb[ly * s.width + lx][0] - 5.0).abs() < 1e-9);
        assert!(render_ball(&env, &ball, &cam, 0).is_err());
    }

    #[test]
    fn layering_respects_depth_order() {
        let cam = Camera::centered(128.0, 96, 96);
        let env_a = EnvMap::constant(8, [1.0, 0.0, 0.0]);
        let env_b = EnvMap::constant(8, [0.0, 0.0, 1.0]);
        let near = Ball::new(Vec3::new(0.0, 0.0, 2.0), 0.3).unwrap();
        let far = Ball::new(Vec3::new(0.2, 0.0, 3.0), 0.5).unwrap();
        let sa = render_ball(&env_a, &near, &cam, 2).unwrap();
        let sb = render_ball(&env_b, &far, &cam, 2).unwrap();
        let frame = HdrImage::filled(96, 96, [0.0, 1.0, 0.0]);
        // order of the sprite list must not matter
        let out1 = composite_hdr(&frame, &[sa.clone(), sb.clone()], None).unwrap();
        let out2 = composite_hdr(&frame, &[sb.clone(), sa.clone()], None).unwrap();
        assert_eq!(out1, out2);
        let mut overlap = 0;
        for y in 0..96 {
            for x in 0..96 {
                let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5).normalized();
                let (ha, hb) = (near.hit(dir), far.hit(dir));
                if let (Some(ta), Some(tb)) = (ha, hb) {
                    overlap += 1;
                    assert!(ta < tb);
                    let p = out1.get(x, y);
                    let sa_a = sa.alpha[(y - sa.y0) * sa.width + (x - sa.x0)];
                    if sa_a == 1.0 {
                        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
                    }
                }
            }
        }
        assert!(overlap > 50);
        assert_eq!(composite_hdr(&frame, &[], None).unwrap(), frame);
        assert!(composite_hdr(&frame, &[sa], Some(&DepthMap::constant(4, 4, 1.0))).is_err());
    }

    #[test]
    fn opaque_sprite_replaces_frame_and_occlusion_hides_it() {
        let cam = Camera::centered(64.0, 64, 64);
        let env = EnvMap::constant(8, [0.25; 3]);
        let ball = Ball::new(Vec3::new(0.0, 0.0, 2.0), 0.4).unwrap();
        let s = render_ball(&env, &ball, &cam, 2).unwrap();
        let frame = LdrImage::filled(64, 64, [0.9, 0.1, 0.1]);
        let ev = ExposureValue::new(0.0, -5.0).unwrap();
        let out = composite_ldr(&frame, &[s.clone()], None, ev, 2.4).unwrap();
        let expected = 0.25f64.powf(1.0 / 2.4);
        assert!((out.get(32, 32)[0] - expected).abs() < 1e-12);
        assert_eq!(out.get(0, 0), [0.9, 0.1, 0.1]);
        let hidden = composite_ldr(&frame, &[s], Some(&DepthMap::constant(64, 64, 1.0)), ev, 2.4).unwrap();
        assert_eq!(hidden, frame);
    }

    #[test]
    fn unwrap_constant_sprite_is_constant() {
        let cam = Camera::centered(256.0, 256, 256);
        let ball = Ball::new(Vec3::new(0.2, 0.1, 2.0), 0.25).unwrap();
        let s = render_ball(&EnvMap::constant(16, [2.0, 1.0, 0.5]), &ball, &cam, 2).unwrap();
        let (env, valid) = unwrap_ball(&s, &ball, &cam, 32).unwrap();
        let n_valid = valid.iter().filter(|&&v| v).count();
        assert!(n_valid > 2000);
        for (i, p) in env.image().pixels().enumerate() {
            if valid[i] {
                assert!((p[0] - 2.0).abs() < 1e-9 && (p[2] - 0.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reflected_angle_endpoints() {
        let (d, r) = (2.0f64, 0.25f64);
        let bmax = (r / d).asin();
        assert!((reflected_angle(0.0, d, r) - std::f64::consts::PI).abs() < 1e-12);
        assert!((reflected_angle(bmax, d, r) - bmax).abs() < 1e-6);
        let mut prev = f64::MAX;
        for k in 0..=100 {
            let a = reflected_angle(bmax * k as f64 / 100.0, d, r);
            assert!(a <= prev + 1e-12);
            prev = a;
        }
    }
}
