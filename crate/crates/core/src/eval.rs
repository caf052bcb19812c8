//! Lighting evaluation: render three reference spheres under predicted and
//! ground-truth envmaps and compare them with scale-invariant RMSE, angular
//! error and percentile-normalized RMSE.

use serde::{Deserialize, Serialize};

use crate::envmap::{solid_angle_weights, texel_direction, Direction, EnvMap};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::{HdrImage, Rgb};

pub const SPHERE_RES: usize = 256;
pub const DIFFUSE_ALBEDO: f64 = 0.5;
pub const SILVER_TINT: f64 = 0.9;
pub const PHONG_EXPONENT: f64 = 50.0;
const DIFFUSE_ENV_HEIGHT: usize = 32;
const MATTE_ENV_HEIGHT: usize = 64;
/// Lobe samples below this weight are ignored.
const LOBE_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Material {
    GrayDiffuse,
    SilverMatte,
    SilverMirror,
}

impl Material {
    pub const ALL: [Material; 3] = [Material::GrayDiffuse, Material::SilverMatte, Material::SilverMirror];
}

/// An orthographic sphere render: the image and which pixels lie on the disc.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereImage {
    pub image: HdrImage,
    pub disc: Vec<bool>,
}

impl SphereImage {
    pub fn disc_pixels(&self) -> Vec<Rgb> {
        self.image
            .pixels()
            .zip(&self.disc)
            .filter_map(|(p, &d)| d.then_some(p))
            .collect()
    }
}

/// Visible-hemisphere normal at pixel `(x, y)`; the viewer looks along -Z.
fn sphere_normal(x: usize, y: usize, res: usize) -> Option<Vec3> {
    let half = res as f64 / 2.0;
    let sx = (x as f64 + 0.5) / half - 1.0;
    let sy = 1.0 - (y as f64 + 0.5) / half;
    let r2 = sx * sx + sy * sy;
    (r2 < 1.0).then(|| Vec3::new(sx, sy, (1.0 - r2).sqrt()))
}

const VIEW: Vec3 = Vec3::new(0.0, 0.0, -1.0);

/// Texel directions and radiance-times-solid-angle of `env`, downsampled to
/// at most `max_h` rows.
fn quadrature(env: &EnvMap, max_h: usize) -> Vec<(Vec3, Rgb, f64)> {
    let mut h = env.height();
    let mut factor = 1;
    while h > max_h && h % 2 == 0 {
        h /= 2;
        factor *= 2;
    }
    let env = if factor > 1 { env.downsample(factor) } else { env.clone() };
    let w = solid_angle_weights(h).expect("envmap height >= 2");
    let mut out = Vec::with_capacity(2 * h * h);
    for j in 0..h {
        for i in 0..2 * h {
            let d = texel_direction(i, j, h, 0.0).vec();
            out.push((d, env.image().get(i, j), w[j]));
        }
    }
    out
}

/// Renders the 256x256 orthographic sphere of `material` lit by `env`.
pub fn render_sphere(env: &EnvMap, material: Material) -> SphereImage {
    render_sphere_with(env, material, PHONG_EXPONENT)
}

/// As [`render_sphere`] with an explicit Phong exponent for the matte sphere.
pub fn render_sphere_with(env: &EnvMap, material: Material, exponent: f64) -> SphereImage {
    let res = SPHERE_RES;
    let mut image = HdrImage::zeros(res, res);
    let mut disc = vec![false; res * res];
    let quad = match material {
        Material::GrayDiffuse => quadrature(env, DIFFUSE_ENV_HEIGHT),
        Material::SilverMatte => quadrature(env, MATTE_ENV_HEIGHT),
        Material::SilverMirror => Vec::new(),
    };
    // cos(angle) below which the lobe weight drops under the cutoff
    let lobe_cos = LOBE_CUTOFF.powf(1.0 / exponent);
    for y in 0..res {
        for x in 0..res {
            let Some(n) = sphere_normal(x, y, res) else { continue };
            disc[y * res + x] = true;
            let refl = VIEW.reflect(n);
            let px = match material {
                Material::SilverMirror => env
                    .sample_bilinear(Direction::from_unit(refl.normalized()))
                    .map(|v| SILVER_TINT * v),
                Material::GrayDiffuse => {
                    let mut acc = [0.0; 3];
                    for (d, l, w) in &quad {
                        let c = n.dot(*d);
                        if c > 0.0 {
                            for k in 0..3 {
                                acc[k] += l[k] * c * w;
                            }
                        }
                    }
                    acc.map(|v| DIFFUSE_ALBEDO / std::f64::consts::PI * v)
                }
                Material::SilverMatte => {
                    let mut acc = [0.0; 3];
                    let mut norm = 0.0;
                    for (d, l, w) in &quad {
                        let c = refl.dot(*d);
                        if c <= lobe_cos || n.dot(*d) <= 0.0 {
                            continue;
                        }
                        let lobe = c.powf(exponent) * w;
                        norm += lobe;
                        for k in 0..3 {
                            acc[k] += l[k] * lobe;
                        }
                    }
                    if norm > 0.0 {
                        acc.map(|v| SILVER_TINT * v / norm)
                    } else {
                        env.sample_bilinear(Direction::from_unit(refl.normalized()))
                            .map(|v| SILVER_TINT * v)
                    }
                }
            };
            image.set(x, y, px);
        }
    }
    SphereImage { image, disc }
}

fn check_len(a: &[Rgb], b: &[Rgb]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::mismatch(b.len(), a.len()));
    }
    Ok(())
}

/// Scale-invariant RMSE and the optimal non-negative scale applied to `pred`.
pub fn si_rmse_with_scale(pred: &[Rgb], gt: &[Rgb]) -> Result<(f64, f64)> {
    check_len(pred, gt)?;
    if pred.is_empty() {
        return Ok((0.0, 1.0));
    }
    let mut pg = 0.0;
    let mut pp = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for c in 0..3 {
            pg += p[c] * g[c];
            pp += p[c] * p[c];
        }
    }
    let alpha = if pp > 0.0 { (pg / pp).max(0.0) } else { 0.0 };
    Ok((rmse_scaled(pred, gt, alpha), alpha))
}

pub fn si_rmse(pred: &[Rgb], gt: &[Rgb]) -> Result<f64> {
    Ok(si_rmse_with_scale(pred, gt)?.0)
}

fn rmse_scaled(pred: &[Rgb], gt: &[Rgb], alpha: f64) -> f64 {
    let mut s = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        for c in 0..3 {
            let r = alpha * p[c] - g[c];
            s += r * r;
        }
    }
    (s / (3 * pred.len()) as f64).sqrt()
}

pub fn rmse(pred: &[Rgb], gt: &[Rgb]) -> Result<f64> {
    check_len(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(rmse_scaled(pred, gt, 1.0))
}

/// Mean angle in degrees between RGB vectors, skipping zero vectors.
pub fn angular_error(pred: &[Rgb], gt: &[Rgb]) -> Result<f64> {
    check_len(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let ng = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if np == 0.0 || ng == 0.0 {
            continue;
        }
        // atan2 form stays exact near zero angle, where acos loses digits
        let (a, b) = (Vec3::from(*p), Vec3::from(*g));
        sum += a.cross(b).norm().atan2(a.dot(b)).to_degrees();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Percentile `q` in `[0, 1]` of sorted values, interpolating linearly
/// between order statistics at position `q (n - 1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = pos - lo as f64;
    sorted[lo] + f * (sorted[hi] - sorted[lo])
}

/// Maps the 0.1th/99.9th percentiles (all channels jointly) to 0/1 and
/// clamps. A constant input maps to all zeros.
pub fn percentile_normalize(v: &[Rgb]) -> Vec<Rgb> {
    if v.is_empty() {
        return vec![];
    }
    let mut flat: Vec<f64> = v.iter().flatten().copied().collect();
    flat.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&flat, 0.001);
    let hi = percentile_sorted(&flat, 0.999);
    if !(hi > lo) {
        return vec![[0.0; 3]; v.len()];
    }
    v.iter().map(|p| p.map(|x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0))).collect()
}

pub fn normalized_rmse(pred: &[Rgb], gt: &[Rgb]) -> Result<f64> {
    check_len(pred, gt)?;
    rmse(&percentile_normalize(pred), &percentile_normalize(gt))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MaterialMetrics {
    pub si_rmse: f64,
    pub angular_error_deg: f64,
    pub normalized_rmse: f64,
    /// Mean of the per-probe scale chosen by si-RMSE.
    pub si_scale: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub probes: usize,
    pub gray_diffuse: MaterialMetrics,
    pub silver_matte: MaterialMetrics,
    pub silver_mirror: MaterialMetrics,
}

impl MetricReport {
    pub fn get(&self, m: Material) -> &MaterialMetrics {
        match m {
            Material::GrayDiffuse => &self.gray_diffuse,
            Material::SilverMatte => &self.silver_matte,
            Material::SilverMirror => &self.silver_mirror,
        }
    }

    fn get_mut(&mut self, m: Material) -> &mut MaterialMetrics {
        match m {
            Material::GrayDiffuse => &mut self.gray_diffuse,
            Material::SilverMatte => &mut self.silver_matte,
            Material::SilverMirror => &mut self.silver_mirror,
        }
    }
}

/// Metrics of one material for one probe.
pub fn compare(pred: &EnvMap, gt: &EnvMap, material: Material) -> Result<MaterialMetrics> {
    let p = render_sphere(pred, material).disc_pixels();
    let g = render_sphere(gt, material).disc_pixels();
    let (si, scale) = si_rmse_with_scale(&p, &g)?;
    Ok(MaterialMetrics {
        si_rmse: si,
        angular_error_deg: angular_error(&p, &g)?,
        normalized_rmse: normalized_rmse(&p, &g)?,
        si_scale: scale,
    })
}

/// Mean metrics over paired probes, for every material.
pub fn evaluate(pred: &[EnvMap], gt: &[EnvMap]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::mismatch(gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no probes to evaluate".into()));
    }
    let mut report = MetricReport {
        probes: pred.len(),
        ..Default::default()
    };
    let n = pred.len() as f64;
    for m in Material::ALL {
        let mut acc = MaterialMetrics::default();
        for (p, g) in pred.iter().zip(gt) {
            let r = compare(p, g, m)?;
            acc.si_rmse += r.si_rmse / n;
            acc.angular_error_deg += r.angular_error_deg / n;
            acc.normalized_rmse += r.normalized_rmse / n;
            acc.si_scale += r.si_scale / n;
        }
        *report.get_mut(m) = acc;
    }
    Ok(report)
}
