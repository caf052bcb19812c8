//! Equirectangular environment maps.
//!
//! World frame: +Y up, +Z forward, +X right. The polar angle `theta` is
//! measured from +Y, the azimuth `phi` from +Z toward +X in `[-pi, pi)`.
//! Continuous pixel coordinates put pixel centers at half-integers; the map
//! center `(W/2, H/2)` looks along +Z.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::image::{HdrImage, Rgb};
use crate::io;

pub const DEFAULT_ENV_HEIGHT: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vec3);

impl Direction {
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if !(n > 0.0) || !n.is_finite() {
            return None;
        }
        Some(Direction(v / n))
    }

    pub fn from_spherical(theta: f64, phi: f64) -> Self {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        Direction(Vec3::new(st * sp, ct, st * cp))
    }

    /// Wraps an already-unit vector.
    #[inline]
    pub fn from_unit(v: Vec3) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-6, "not unit: {v:?}");
        Direction(v)
    }

    #[inline]
    pub fn vec(&self) -> Vec3 {
        self.0
    }

    pub fn theta(&self) -> f64 {
        self.0.y.clamp(-1.0, 1.0).acos()
    }

    pub fn phi(&self) -> f64 {
        let phi = self.0.x.atan2(self.0.z);
        if phi >= PI {
            phi - TAU
        } else {
            phi
        }
    }
}

/// Continuous `(u, v)` for `d` on a map of height `h` (width `2h`).
pub fn dir_to_pixel(d: Direction, h: usize) -> (f64, f64) {
    let w = (2 * h) as f64;
    let v = d.theta() / PI * h as f64;
    let mut u = (d.phi() + PI) / TAU * w;
    if u >= w {
        u -= w;
    }
    (u, v)
}

pub fn pixel_to_dir(u: f64, v: f64, h: usize) -> Direction {
    let w = (2 * h) as f64;
    let phi = u / w * TAU - PI;
    let theta = v / h as f64 * PI;
    Direction::from_spherical(theta, phi)
}

/// The four texels (flat indices) and weights of a bilinear lookup.
///
/// `yaw` rotates the texel grid about +Y: texel `i` of a yawed grid sits at
/// `pixel_to_dir` of `i` turned by `yaw`.
#[inline]
pub fn bilinear_taps(d: Direction, h: usize, yaw: f64) -> [(u32, f64); 4] {
    let w = 2 * h;
    let (mut u, v) = dir_to_pixel(d, h);
    if yaw != 0.0 {
        u = (u - yaw / TAU * w as f64).rem_euclid(w as f64);
    }
    taps_at(u, v, h)
}

/// Bilinear taps on a grid whose texel directions are turned by `grid`.
#[inline]
pub fn bilinear_taps_in(d: Direction, h: usize, grid: &Mat3) -> [(u32, f64); 4] {
    let local = if grid.is_identity() {
        d
    } else {
        Direction::from_unit(grid.transpose().apply(d.vec()))
    };
    let (u, v) = dir_to_pixel(local, h);
    taps_at(u, v, h)
}

#[inline]
fn taps_at(u: f64, v: f64, h: usize) -> [(u32, f64); 4] {
    let w = 2 * h;
    let fx = u - 0.5;
    let fy = v - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let a = fx - x0;
    let b = fy - y0;
    let wi = w as i64;
    let i0 = (x0 as i64).rem_euclid(wi) as usize;
    let i1 = (i0 + 1) % w;
    let hi = h as i64 - 1;
    let j0 = (y0 as i64).clamp(0, hi) as usize;
    let j1 = (y0 as i64 + 1).clamp(0, hi) as usize;
    [
        ((j0 * w + i0) as u32, (1.0 - a) * (1.0 - b)),
        ((j0 * w + i1) as u32, a * (1.0 - b)),
        ((j1 * w + i0) as u32, (1.0 - a) * b),
        ((j1 * w + i1) as u32, a * b),
    ]
}

/// Direction of texel `(i, j)` on a grid of height `h` turned by `yaw`.
pub fn texel_direction(i: usize, j: usize, h: usize, yaw: f64) -> Direction {
    if yaw == 0.0 {
        pixel_to_dir(i as f64 + 0.5, j as f64 + 0.5, h)
    } else {
        texel_direction_in(i, j, h, &Mat3::yaw(yaw))
    }
}

/// Direction of texel `(i, j)` on a grid turned by `grid`.
pub fn texel_direction_in(i: usize, j: usize, h: usize, grid: &Mat3) -> Direction {
    let d = pixel_to_dir(i as f64 + 0.5, j as f64 + 0.5, h);
    if grid.is_identity() {
        d
    } else {
        Direction::from_unit(grid.apply(d.vec()))
    }
}

/// Per-row solid angle of one texel, `sin(theta_row) * dtheta' * (2pi/W)`
/// with `dtheta' = 2 sin(pi / 2H)`, the exact area of the texel's band.
pub fn solid_angle_weights(h: usize) -> Result<Vec<f64>> {
    if h < 2 {
        return Err(Error::InvalidArgument(format!("envmap height must be >= 2, got {h}")));
    }
    let w = 2 * h;
    let dtheta = PI / h as f64;
    let band = 2.0 * (0.5 * dtheta).sin();
    let dphi = TAU / w as f64;
    Ok((0..h)
        .map(|j| ((j as f64 + 0.5) * dtheta).sin() * band * dphi)
        .collect())
}

/// HDR radiance over the sphere of directions, `W = 2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvMap {
    image: HdrImage,
}

impl EnvMap {
    pub fn new(image: HdrImage) -> Result<Self> {
        let (w, h) = image.dims();
        if w != 2 * h || h < 1 {
            return Err(Error::InvalidData(format!(
                "environment map must be 2H x H, got {w}x{h}"
            )));
        }
        image.validate()?;
        Ok(Self { image })
    }

    pub fn constant(h: usize, c: Rgb) -> Self {
        Self {
            image: HdrImage::filled(2 * h, h, c),
        }
    }

    /// Evaluates `f` at every texel-center direction.
    pub fn from_fn(h: usize, mut f: impl FnMut(Direction) -> Rgb) -> Self {
        Self {
            image: HdrImage::from_fn(2 * h, h, |i, j| f(texel_direction(i, j, h, 0.0))),
        }
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn image(&self) -> &HdrImage {
        &self.image
    }

    pub fn into_image(self) -> HdrImage {
        self.image
    }

    #[inline]
    pub fn texel(&self, index: usize) -> Rgb {
        self.image.pixel(index)
    }

    pub fn sample_bilinear(&self, d: Direction) -> Rgb {
        let mut out = [0.0; 3];
        for (idx, w) in bilinear_taps(d, self.height(), 0.0) {
            let t = self.image.pixel(idx as usize);
            for c in 0..3 {
                out[c] += w * t[c];
            }
        }
        out
    }

    /// Area-weighted box downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> EnvMap {
        if factor <= 1 {
            return self.clone();
        }
        let h = self.height();
        let nh = h / factor;
        assert!(nh >= 1 && h % factor == 0, "height {h} not divisible by {factor}");
        let weights = solid_angle_weights(h.max(2)).unwrap_or_else(|_| vec![1.0; h]);
        let nw = 2 * nh;
        let img = HdrImage::from_fn(nw, nh, |i, j| {
            let mut acc = [0.0; 3];
            let mut wsum = 0.0;
            for y in j * factor..(j + 1) * factor {
                for x in i * factor..(i + 1) * factor {
                    let wt = weights[y];
                    let t = self.image.get(x, y);
                    for c in 0..3 {
                        acc[c] += wt * t[c];
                    }
                    wsum += wt;
                }
            }
            acc.map(|a| a / wsum)
        });
        EnvMap { image: img }
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = io::read_pfm(path)?;
        Self::new(img).map_err(|e| Error::Malformed {
            format: "PFM",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_pfm(&self.image, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn pole_and_center_conventions() {
        let h = 64;
        let (_, v) = dir_to_pixel(Direction::from_unit(Vec3::Y), h);
        assert_eq!(v, 0.0);
        let (u, v) = dir_to_pixel(Direction::from_unit(Vec3::Z), h);
        assert!((u - 64.0).abs() < 1e-12 && (v - 32.0).abs() < 1e-12);
        let (_, v) = dir_to_pixel(Direction::from_unit(-Vec3::Y), h);
        assert!((v - 64.0).abs() < 1e-12);
        // +X is a quarter turn right of center
        let (u, _) = dir_to_pixel(Direction::from_unit(Vec3::X), h);
        assert!((u - 96.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_round_trip_examples() {
        let h = 32;
        for (u, v) in [(10.0, 0.5), (32.0, 16.0), (63.25, 31.75), (0.0, 16.0)] {
            let (u2, v2) = dir_to_pixel(pixel_to_dir(u, v, h), h);
            assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6, "{u},{v} -> {u2},{v2}");
        }
    }

    #[test]
    fn dir_round_trip_random_vectors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = 128;
        for _ in 0..10_000 {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let Some(d) = Direction::new(v) else { continue };
            let (u, vv) = dir_to_pixel(d, h);
            let back = pixel_to_dir(u, vv, h);
            assert!((back.vec() - d.vec()).norm() < 1e-6);
        }
    }

    #[test]
    fn bilinear_constant_and_centers() {
        let env = EnvMap::constant(8, [0.5, 1.0, 2.0]);
        let d = Direction::new(Vec3::new(0.3, -0.2, 0.9)).unwrap();
        let s = env.sample_bilinear(d);
        for (a, b) in s.iter().zip([0.5, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let env = EnvMap::from_fn(8, |d| [d.vec().x + 1.0, d.vec().y + 1.0, 0.0]);
        let (i, j) = (5, 3);
        let at = env.sample_bilinear(texel_direction(i, j, 8, 0.0));
        let t = env.image().get(i, j);
        assert!((at[0] - t[0]).abs() < 1e-9 && (at[1] - t[1]).abs() < 1e-9);
    }

    #[test]
    fn bilinear_wraps_across_seam() {
        let h = 4;
        let mut img = HdrImage::zeros(8, 4);
        img.set(0, 1, [1.0, 1.0, 1.0]);
        let env = EnvMap::new(img).unwrap();
        // u = W - 0.25 is halfway between the last column's center and column 0's
        let d = pixel_to_dir(8.0 - 0.25, 1.5, h);
        let taps = bilinear_taps(d, h, 0.0);
        assert!(taps.iter().any(|&(i, w)| i == 8 && (w - 0.25).abs() < 1e-9));
        assert!((env.sample_bilinear(d)[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn poles_clamp_rather_than_wrap() {
        let mut img = HdrImage::zeros(8, 4);
        for i in 0..8 {
            img.set(i, 0, [1.0; 3]);
        }
        let env = EnvMap::new(img).unwrap();
        let s = env.sample_bilinear(Direction::from_unit(Vec3::Y));
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn yawed_taps_follow_rotation() {
        let h = 8;
        let yaw = 0.37;
        let env = EnvMap::from_fn(h, |d| [d.vec().x + 2.0, d.vec().z + 2.0, d.vec().y + 2.0]);
        // sampling a yawed grid at a yawed texel center hits that texel exactly
        let d = texel_direction(3, 5, h, yaw);
        let taps = bilinear_taps(d, h, yaw);
        let hit: f64 = taps.iter().filter(|t| t.0 == (5 * 16 + 3) as u32).map(|t| t.1).sum();
        assert!((hit - 1.0).abs() < 1e-9);
        let _ = env;
    }

    #[test]
    fn rotated_taps_follow_rotation() {
        let h = 8;
        let mut rng = crate::rng::SeedTree::new(9).stream("grid");
        for _ in 0..20 {
            let grid = Mat3::random_rotation(&mut rng);
            let d = texel_direction_in(3, 5, h, &grid);
            let hit: f64 = bilinear_taps_in(d, h, &grid)
                .iter()
                .filter(|t| t.0 == (5 * 16 + 3) as u32)
                .map(|t| t.1)
                .sum();
            assert!((hit - 1.0).abs() < 1e-9);
        }
        // a yaw matrix reproduces the yaw shortcut
        let d = Direction::from_unit(Vec3::new(0.3, -0.2, 0.8).normalized());
        assert_eq!(
            bilinear_taps(d, h, 0.37).map(|t| t.0),
            bilinear_taps_in(d, h, &Mat3::yaw(0.37)).map(|t| t.0)
        );
    }

    #[test]
    fn solid_angle_totals() {
        let w = solid_angle_weights(128).unwrap();
        let total: f64 = w.iter().sum::<f64>() * 256.0;
        assert!((total / (4.0 * PI) - 1.0).abs() < 1e-12);
        let eq = w[63].max(w[64]);
        assert!(w.iter().all(|&x| x <= eq));
        for h in [8usize, 16, 33, 100, 512] {
            let t: f64 = solid_angle_weights(h).unwrap().iter().sum::<f64>() * (2 * h) as f64;
            assert!((t / (4.0 * PI) - 1.0).abs() < 1e-3, "h={h}");
        }
        assert!(solid_angle_weights(1).is_err());
    }

    #[test]
    fn envmap_requires_two_to_one() {
        assert!(EnvMap::new(HdrImage::zeros(6, 4)).is_err());
        assert!(EnvMap::new(HdrImage::zeros(8, 4)).is_ok());
    }

    #[test]
    fn downsample_preserves_constant() {
        let env = EnvMap::constant(16, [3.0, 2.0, 1.0]);
        let d = env.downsample(4);
        assert_eq!(d.height(), 4);
        for p in d.image().pixels() {
            assert!((p[0] - 3.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn sampling_is_periodic_in_phi(theta in 0.0f64..PI, phi in -PI..PI) {
            let env = EnvMap::from_fn(16, |d| [d.vec().x.max(0.0) * 3.0, (d.vec().z * 2.0).exp(), 0.1]);
            let a = env.sample_bilinear(Direction::from_spherical(theta, phi));
            let b = env.sample_bilinear(Direction::from_spherical(theta, phi + TAU));
            for c in 0..3 {
                prop_assert!((a[c] - b[c]).abs() < 1e-9);
            }
        }
    }
}
