//! Distilling a light field from oracle pseudo ground truth.
//!
//! Each iteration picks a frame, drops random chrome balls into it, renders
//! them under the current field, asks the oracle for a cleaned-up version of
//! that image, and takes an Adam step on the masked image loss. The
//! gradient runs back through tonemapping, compositing and the ball
//! reflection lookups into the envmap texels the field was queried at.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envmap::texel_direction_in;
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::image::{tonemap_derivative, tonemap_rgb, ExposureValue, LdrImage, Rgb, DEFAULT_EV_MIN, DEFAULT_GAMMA};
use crate::lightfield::{DomainBox, ForwardCache, LightField, PositionalEncoding};
use crate::optim::{AdamConfig, AdamState, StepOutcome};
use crate::oracle::{self, sampler_steps, OracleRequest, PriorOracle, DEFAULT_CFG_SCALE, DEFAULT_GT_ENV_HEIGHT, DEFAULT_SIGMA_O};
use crate::probe::{
    project_mask_and_depth, size_ball, Ball, BallFootprint, Camera, DepthMap, Layering, Mask, ProbeSet, Sprite,
    NEAR_PLANE,
};
use crate::rng::SeedTree;
use crate::scene::SceneSpec;

/// Linear sweeps of exposure and minimum noise level over a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub ev_min: f64,
    pub tau_max: f64,
}

impl Schedule {
    /// `s / (S - 1)`, so the last iteration lands exactly on the endpoints.
    pub fn progress(&self, s: usize) -> f64 {
        if self.iterations <= 1 {
            0.0
        } else {
            s as f64 / (self.iterations - 1) as f64
        }
    }

    /// Exposure falls linearly from 0 to `ev_min`.
    pub fn ev(&self, s: usize) -> f64 {
        // `+ 0.0` turns the first iteration's -0.0 into 0.0
        self.ev_min * self.progress(s) + 0.0
    }

    /// Minimum noise level falls linearly from 1 to 0.
    pub fn tau_min(&self, s: usize) -> f64 {
        1.0 - self.progress(s)
    }
}

/// Drops `n` balls at random pixels, each at a random depth in front of the
/// background there.
pub fn sample_probes(camera: &Camera, depth: &DepthMap, n: usize, rng: &mut impl Rng) -> Result<ProbeSet> {
    let (w, h) = (camera.width, camera.height);
    if (depth.width(), depth.height()) != (w, h) {
        return Err(Error::mismatch(format!("{w}x{h}"), format!("{}x{}", depth.width(), depth.height())));
    }
    if !depth.data().iter().any(|&d| d >= 2.0 * NEAR_PLANE) {
        return Err(Error::InvalidData("depth map has no pixel far enough from the camera".into()));
    }
    let mut balls = Vec::with_capacity(n);
    let max_attempts = 1000 * n.max(1);
    let mut attempts = 0;
    while balls.len() < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::InvalidData("could not place probes: depth map mostly too close".into()));
        }
        let px = rng.random_range(0..w);
        let py = rng.random_range(0..h);
        let d = depth.get(px, py);
        if d < 2.0 * NEAR_PLANE {
            continue;
        }
        let z = rng.random_range(0.3 * d..0.9 * d);
        let center = camera.unproject(px as f64 + 0.5, py as f64 + 0.5, z);
        let radius = size_ball(camera, center)?;
        balls.push(Ball { center, radius });
    }
    ProbeSet::new(balls, *camera, depth.clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub l2: f64,
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l2: 1.0, perceptual: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l2: f64,
    pub perceptual: f64,
    /// `dL/dpred` per pixel channel; zero outside the mask.
    pub grad: Vec<f64>,
}

const PERCEPTUAL_SCALES: usize = 3;

struct Level {
    w: usize,
    h: usize,
    pred: Vec<f64>,
    target: Vec<f64>,
    mask: Vec<bool>,
}

impl Level {
    fn downsample(&self) -> Level {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut pred = vec![0.0; w * h * 3];
        let mut target = vec![0.0; w * h * 3];
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let kids = [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)];
                let i = y * w + x;
                mask[i] = kids.iter().all(|&(kx, ky)| self.mask[ky * self.w + kx]);
                for c in 0..3 {
                    pred[3 * i + c] = kids.iter().map(|&(kx, ky)| self.pred[3 * (ky * self.w + kx) + c]).sum::<f64>() * 0.25;
                    target[3 * i + c] =
                        kids.iter().map(|&(kx, ky)| self.target[3 * (ky * self.w + kx) + c]).sum::<f64>() * 0.25;
                }
            }
        }
        Level { w, h, pred, target, mask }
    }

    /// Mean absolute difference of forward differences over valid pairs,
    /// and its gradient with respect to `pred` (scaled by `scale`).
    fn gradient_term(&self, scale: f64) -> (f64, Vec<f64>) {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                let a = y * self.w + x;
                if !self.mask[a] {
                    continue;
                }
                if x + 1 < self.w && self.mask[a + 1] {
                    pairs.push((a, a + 1));
                }
                if y + 1 < self.h && self.mask[a + self.w] {
                    pairs.push((a, a + self.w));
                }
            }
        }
        let mut grad = vec![0.0; self.pred.len()];
        if pairs.is_empty() {
            return (0.0, grad);
        }
        let n = (pairs.len() * 3) as f64;
        let mut sum = 0.0;
        for &(a, b) in &pairs {
            for c in 0..3 {
                let dp = self.pred[3 * b + c] - self.pred[3 * a + c];
                let dt = self.target[3 * b + c] - self.target[3 * a + c];
                let r = dp - dt;
                sum += r.abs();
                let s = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grad[3 * b + c] += scale * s / n;
                grad[3 * a + c] -= scale * s / n;
            }
        }
        (sum / n, grad)
    }
}

/// `l2 * mean masked squared error + perceptual * multi-scale gradient
/// difference`, with the gradient with respect to `pred` only.
pub fn loss(pred: &LdrImage, target: &LdrImage, mask: &Mask, weights: LossWeights) -> Result<LossOutput> {
    pred.same_dims(target)?;
    if (mask.width(), mask.height()) != pred.dims() {
        return Err(Error::mismatch(
            format!("{}x{}", pred.width(), pred.height()),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let count = mask.count();
    let mut grad = vec![0.0; pred.data().len()];
    if count == 0 {
        log::warn!("empty loss mask; loss is zero");
        return Ok(LossOutput {
            total: 0.0,
            l2: 0.0,
            perceptual: 0.0,
            grad,
        });
    }
    let (p, t) = (pred.data(), target.data());
    let n = (count * 3) as f64;
    let mut l2 = 0.0;
    for i in 0..mask.data().len() {
        if !mask.at(i) {
            continue;
        }
        for c in 0..3 {
            let r = p[3 * i + c] - t[3 * i + c];
            l2 += r * r;
            grad[3 * i + c] = weights.l2 * 2.0 * r / n;
        }
    }
    l2 /= n;

    let mut perceptual = 0.0;
    if weights.perceptual != 0.0 {
        let mut levels = vec![Level {
            w: pred.width(),
            h: pred.height(),
            pred: p.to_vec(),
            target: t.to_vec(),
            mask: mask.data().to_vec(),
        }];
        for _ in 1..PERCEPTUAL_SCALES {
            let next = levels.last().unwrap().downsample();
            levels.push(next);
        }
        let scale = weights.perceptual / PERCEPTUAL_SCALES as f64;
        let mut carry: Vec<f64> = Vec::new();
        for l in (0..PERCEPTUAL_SCALES).rev() {
            let lv = &levels[l];
            let (term, mut g) = lv.gradient_term(scale);
            perceptual += term / PERCEPTUAL_SCALES as f64;
            if !carry.is_empty() {
                // spread the coarser level's gradient over its 2x2 children
                let cw = lv.w / 2;
                for (ci, cg) in carry.chunks(3).enumerate() {
                    let (cx, cy) = (ci % cw, ci / cw);
                    for (kx, ky) in [(2 * cx, 2 * cy), (2 * cx + 1, 2 * cy), (2 * cx, 2 * cy + 1), (2 * cx + 1, 2 * cy + 1)] {
                        let k = ky * lv.w + kx;
                        for c in 0..3 {
                            g[3 * k + c] += 0.25 * cg[c];
                        }
                    }
                }
            }
            carry = g;
        }
        for (a, b) in grad.iter_mut().zip(&carry) {
            *a += b;
        }
    }
    Ok(LossOutput {
        total: weights.l2 * l2 + weights.perceptual * perceptual,
        l2,
        perceptual,
        grad,
    })
}

/// The frame-level inputs of one render.
#[derive(Debug, Clone, Copy)]
pub struct FrameContext<'a> {
    pub camera: &'a Camera,
    pub t: usize,
    pub background: &'a LdrImage,
    pub background_depth: &'a DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub env_height: usize,
    pub supersample: usize,
    pub gamma: f64,
}

/// Everything recorded while rendering probes under the field, enough to
/// push an image gradient back onto the queried texels.
pub struct ProbeRender {
    pub balls: Vec<Ball>,
    pub footprints: Vec<BallFootprint>,
    pub sprites: Vec<Sprite>,
    pub layering: Layering,
    pub composited: LdrImage,
    pub mask: Mask,
    pub depth: DepthMap,
    /// Per ball: texel index to batch row (`u32::MAX` when not queried).
    rows: Vec<Vec<u32>>,
    n_rows: usize,
    gain: f64,
    gamma: f64,
}

impl ProbeRender {
    pub fn query_count(&self) -> usize {
        self.n_rows
    }
}

/// Renders `balls` under the field at frame `t`, composited over the
/// background at exposure `ev`. `grid` rotates the queried texel grid.
pub fn render_probes<F: Float + ndarray::LinalgScalar>(
    field: &LightField,
    frame: FrameContext<'_>,
    balls: &[Ball],
    ev: ExposureValue,
    grid: &Mat3,
    settings: RenderSettings,
) -> Result<(ProbeRender, ForwardCache<F>)> {
    let cam = frame.camera;
    let set = ProbeSet::new(balls.to_vec(), *cam, frame.background_depth.clone())?;
    let (mask, depth) = project_mask_and_depth(&set);
    let h = settings.env_height;
    let w = 2 * h;
    let mut footprints = Vec::with_capacity(balls.len());
    let mut rows = Vec::with_capacity(balls.len());
    let mut queries: Vec<(Vec3, Vec3)> = Vec::new();
    for ball in balls {
        let fp = BallFootprint::trace(ball, cam, h, grid, settings.supersample);
        let x = cam.pose.point_to_world(ball.center);
        let mut map = vec![u32::MAX; w * h];
        for idx in fp.referenced_texels() {
            map[idx as usize] = queries.len() as u32;
            let (i, j) = (idx as usize % w, idx as usize / w);
            queries.push((x, texel_direction_in(i, j, h, grid).vec()));
        }
        footprints.push(fp);
        rows.push(map);
    }
    let enc = field.encode_queries::<F>(frame.t as f64, &queries);
    let (out, cache) = field.forward(enc)?;
    let radiance: Vec<Rgb> = out
        .rows()
        .into_iter()
        .map(|r| [r[0].to_f64().unwrap(), r[1].to_f64().unwrap(), r[2].to_f64().unwrap()])
        .collect();
    let sprites: Vec<Sprite> = footprints
        .iter()
        .zip(&rows)
        .map(|(fp, map)| fp.shade(|idx| radiance[map[idx as usize] as usize]))
        .collect();
    let geoms: Vec<_> = footprints.iter().map(|f| f.geometry()).collect();
    let refs: Vec<_> = geoms.iter().collect();
    let layering = Layering::build(cam.width, cam.height, &refs, Some(frame.background_depth));
    let (gain, gamma) = (ev.gain(), settings.gamma);
    let data = layering.apply(frame.background.data(), |l| {
        tonemap_rgb(sprites[l.sprite as usize].rgb[l.local as usize], gain, gamma)
    });
    let composited = LdrImage::new(cam.width, cam.height, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    drop(geoms);
    Ok((
        ProbeRender {
            balls: balls.to_vec(),
            footprints,
            sprites,
            layering,
            composited,
            mask,
            depth,
            rows,
            n_rows: queries.len(),
            gain,
            gamma,
        },
        cache,
    ))
}

/// Pulls `dL/dimage` back to `dL/dpsi`.
pub fn backprop<F: Float + ndarray::LinalgScalar>(
    field: &LightField,
    render: &ProbeRender,
    cache: &ForwardCache<F>,
    image_grad: &[f64],
) -> Result<Vec<f64>> {
    let expected = render.composited.data().len();
    if image_grad.len() != expected {
        return Err(Error::mismatch(expected, image_grad.len()));
    }
    let mut up = vec![[0.0f64; 3]; render.n_rows];
    let npix = render.layering.width * render.layering.height;
    for fi in 0..npix {
        let g = &image_grad[3 * fi..3 * fi + 3];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for l in render.layering.layers(fi) {
            let (b, local) = (l.sprite as usize, l.local as usize);
            let c = render.sprites[b].rgb[local];
            let dc: Rgb = std::array::from_fn(|ch| l.weight * g[ch] * tonemap_derivative(c[ch], render.gain, render.gamma));
            if dc.iter().all(|&v| v == 0.0) {
                continue;
            }
            let map = &render.rows[b];
            for &(idx, w) in render.footprints[b].pixel_taps(local) {
                let row = &mut up[map[idx as usize] as usize];
                for ch in 0..3 {
                    row[ch] += w * dc[ch];
                }
            }
        }
    }
    let upstream = Array2::from_shape_fn((render.n_rows, 3), |(r, c)| F::from(up[r][c]).unwrap());
    field.backward(cache, upstream.view())
}

fn default_iterations() -> usize {
    4000
}

/// Run configuration; every key has a default and unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Inline scene; exclusive with `scene_path`.
    pub scene: Option<SceneSpec>,
    /// Scene JSON, relative paths resolved against the config file.
    pub scene_path: Option<PathBuf>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    pub balls_per_iter: usize,
    pub seed: u64,
    pub lambda_l2: f64,
    pub lambda_p: f64,
    pub ev_min: f64,
    pub tau_max: f64,
    /// Pins every iteration's noise level (for debugging and tests).
    pub force_tau: Option<f64>,
    pub cfg_scale: f64,
    pub sigma_o: f64,
    pub gt_env_height: usize,
    pub train_env_height: usize,
    pub supersample: usize,
    /// Random orientation of the queried texel grid each iteration.
    pub grid_jitter: bool,
    pub gamma: f64,
    pub checkpoint_every: usize,
    pub optimizer: AdamConfig,
    pub encoding: PositionalEncoding,
    /// Input normalization box; defaults to the padded camera frustum.
    pub domain: Option<DomainBox>,
    pub oracle_timeout_secs: f64,
    pub max_consecutive_failures: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            scene_path: None,
            iterations: default_iterations(),
            balls_per_iter: 9,
            seed: 0,
            lambda_l2: 1.0,
            lambda_p: 1.0,
            ev_min: DEFAULT_EV_MIN,
            tau_max: 1.0,
            force_tau: None,
            cfg_scale: DEFAULT_CFG_SCALE,
            sigma_o: DEFAULT_SIGMA_O,
            gt_env_height: DEFAULT_GT_ENV_HEIGHT,
            train_env_height: 16,
            supersample: 2,
            grid_jitter: true,
            gamma: DEFAULT_GAMMA,
            checkpoint_every: 500,
            optimizer: AdamConfig::default(),
            encoding: PositionalEncoding::default(),
            domain: None,
            oracle_timeout_secs: oracle::DEFAULT_TIMEOUT_SECS,
            max_consecutive_failures: 3,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(p), Some(parent)) = (cfg.scene_path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = parent.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.iterations < 1 {
            return fail("iterations must be >= 1");
        }
        if self.balls_per_iter < 1 {
            return fail("balls_per_iter must be >= 1");
        }
        if !(self.ev_min < 0.0) {
            return fail("ev_min must be negative");
        }
        if !(self.tau_max > 0.0 && self.tau_max <= 1.0) {
            return fail("tau_max must lie in (0, 1]");
        }
        if let Some(t) = self.force_tau {
            if !(0.0..=1.0).contains(&t) {
                return fail("force_tau must lie in [0, 1]");
            }
        }
        if self.train_env_height < 2 || self.gt_env_height < 2 {
            return fail("envmap heights must be >= 2");
        }
        if self.supersample < 1 {
            return fail("supersample must be >= 1");
        }
        if !(self.gamma > 0.0) || self.lambda_l2 < 0.0 || self.lambda_p < 0.0 || self.sigma_o < 0.0 {
            return fail("gamma must be positive and loss weights and sigma_o non-negative");
        }
        if self.checkpoint_every < 1 || self.max_consecutive_failures < 1 {
            return fail("checkpoint_every and max_consecutive_failures must be >= 1");
        }
        if self.scene.is_some() && self.scene_path.is_some() {
            return fail("give either scene or scene_path, not both");
        }
        self.optimizer.validate()
    }

    pub fn resolve_scene(&self) -> Result<SceneSpec> {
        match (&self.scene, &self.scene_path) {
            (Some(s), None) => {
                s.validate()?;
                Ok(s.clone())
            }
            (None, Some(p)) => SceneSpec::load(p),
            (None, None) => Err(Error::Config("config names no scene".into())),
            (Some(_), Some(_)) => Err(Error::Config("give either scene or scene_path, not both".into())),
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            iterations: self.iterations,
            ev_min: self.ev_min,
            tau_max: self.tau_max,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            env_height: self.train_env_height,
            supersample: self.supersample,
            gamma: self.gamma,
        }
    }
}

/// Per-iteration log plus the checkpoint list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub iterations: usize,
    /// `None` for iterations skipped after an oracle failure or bad gradient.
    pub loss: Vec<Option<f64>>,
    pub ev: Vec<f64>,
    pub tau_min: Vec<f64>,
    pub tau: Vec<f64>,
    pub k: Vec<u32>,
    pub t: Vec<usize>,
    pub skipped: Vec<usize>,
    pub checkpoints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub ev: f64,
    pub tau_min: f64,
    pub tau: f64,
    pub k: u32,
    pub loss: Option<f64>,
}

/// The training loop state.
pub struct Distiller {
    pub config: RunConfig,
    pub scene: SceneSpec,
    field: LightField,
    adam: AdamState,
    seeds: SeedTree,
    backgrounds: HashMap<usize, (LdrImage, DepthMap)>,
    consecutive_failures: usize,
    pub report: DistillReport,
}

impl Distiller {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let scene = config.resolve_scene()?;
        let seeds = SeedTree::new(seed);
        let mut backgrounds = HashMap::new();
        for t in 1..=scene.frames {
            backgrounds.insert(t, scene.background(t)?);
        }
        let mut encoding = config.encoding;
        if scene.frames == 1 {
            encoding.use_time = false;
        }
        let domain = match config.domain {
            Some(d) => {
                d.validate()?;
                d
            }
            None => default_domain(&scene, &backgrounds)?,
        };
        let field = LightField::init(encoding, domain, &mut seeds.stream("psi-init"));
        let adam = AdamState::new(config.optimizer, field.num_params());
        Ok(Self {
            config,
            scene,
            field,
            adam,
            seeds,
            backgrounds,
            consecutive_failures: 0,
            report: DistillReport::default(),
        })
    }

    pub fn field(&self) -> &LightField {
        &self.field
    }

    pub fn into_field(self) -> LightField {
        self.field
    }

    /// Oracle matching this run's scene and settings.
    pub fn synthetic_oracle(&self) -> oracle::SyntheticOracle {
        let mut o = oracle::SyntheticOracle::new(self.scene.clone(), self.seeds.child("oracle"));
        o.sigma_o = self.config.sigma_o;
        o.gt_env_height = self.config.gt_env_height;
        o.gamma = self.config.gamma;
        o
    }

    pub fn step(&mut self, s: usize, oracle: &mut dyn PriorOracle) -> Result<StepRecord> {
        let sched = self.config.schedule();
        let mut rng = self.seeds.indexed_stream("step", s as u64);
        let t = rng.random_range(1..=self.scene.frames);
        let (bg, bg_depth) = &self.backgrounds[&t];
        let camera = self.scene.camera_at(t);
        let probes = sample_probes(&camera, bg_depth, self.config.balls_per_iter, &mut rng)?;
        let ev_val = sched.ev(s);
        let tau_min = sched.tau_min(s);
        let tau = match self.config.force_tau {
            Some(v) => v,
            None => tau_min + (sched.tau_max - tau_min) * rng.random::<f64>(),
        };
        let k = sampler_steps(tau);
        let grid = if self.config.grid_jitter {
            Mat3::random_rotation(&mut rng)
        } else {
            Mat3::IDENTITY
        };
        let ev = ExposureValue::new(ev_val, self.config.ev_min)?;
        let frame = FrameContext {
            camera: &camera,
            t,
            background: bg,
            background_depth: bg_depth,
        };
        let (render, cache) = render_probes::<f32>(&self.field, frame, &probes.balls, ev, &grid, self.config.render_settings())?;
        let req = OracleRequest {
            id: format!("s{s:06}"),
            t,
            composited: render.composited.clone(),
            mask: render.mask.clone(),
            depth: render.depth.clone(),
            background: bg.clone(),
            ev,
            tau,
            k,
            cfg_scale: self.config.cfg_scale,
            camera,
            balls: probes.balls.clone(),
        };
        let mut record = StepRecord {
            t,
            ev: ev_val,
            tau_min,
            tau,
            k,
            loss: None,
        };
        let target = match oracle::ask(oracle, &req) {
            Ok(img) => {
                self.consecutive_failures = 0;
                img
            }
            Err(e) => {
                self.consecutive_failures += 1;
                log::warn!("iteration {s}: oracle failed ({e}); skipped");
                if self.consecutive_failures >= self.config.max_consecutive_failures {
                    return Err(e);
                }
                return Ok(record);
            }
        };
        let weights = LossWeights {
            l2: self.config.lambda_l2,
            perceptual: self.config.lambda_p,
        };
        let out = loss(&render.composited, &target, &render.mask, weights)?;
        let grad = backprop(&self.field, &render, &cache, &out.grad)?;
        let lr = self.config.optimizer.lr_at(s, self.config.iterations);
        match self.adam.step(self.field.params_mut(), &grad, lr)? {
            StepOutcome::Applied => record.loss = Some(out.total),
            StepOutcome::SkippedNonFinite => log::warn!("iteration {s}: non-finite gradient; skipped"),
        }
        Ok(record)
    }

    fn log_step(&mut self, s: usize, r: &StepRecord) {
        let rep = &mut self.report;
        rep.iterations = s + 1;
        rep.loss.push(r.loss);
        rep.ev.push(r.ev);
        rep.tau_min.push(r.tau_min);
        rep.tau.push(r.tau);
        rep.k.push(r.k);
        rep.t.push(r.t);
        if r.loss.is_none() {
            rep.skipped.push(s);
        }
    }

    /// Runs every iteration; with `out` set, writes checkpoints and the report.
    pub fn run(&mut self, oracle: &mut dyn PriorOracle, out: Option<&Path>) -> Result<DistillReport> {
        if let Some(dir) = out {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        }
        let total = self.config.iterations;
        for s in 0..total {
            let r = self.step(s, oracle)?;
            self.log_step(s, &r);
            if s % 100 == 0 || s + 1 == total {
                log::info!(
                    "iteration {}/{total}: loss {:?} ev {:.3} tau {:.3}",
                    s + 1,
                    r.loss,
                    r.ev,
                    r.tau
                );
            }
            if let Some(dir) = out {
                let periodic = (s + 1) % self.config.checkpoint_every == 0;
                let last = s + 1 == total;
                if periodic || last {
                    let name = if last {
                        "checkpoints/psi_final.bin".to_string()
                    } else {
                        format!("checkpoints/psi_{:06}.bin", s + 1)
                    };
                    self.field.save(dir.join(&name))?;
                    self.report.checkpoints.push(name);
                }
            }
        }
        if let Some(dir) = out {
            let json = serde_json::to_string_pretty(&self.report)?;
            let p = dir.join("report.json");
            fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
        }
        Ok(self.report.clone())
    }
}

/// Padded frustum box spanning all probe depths the sampler can produce.
pub fn default_domain(scene: &SceneSpec, backgrounds: &HashMap<usize, (LdrImage, DepthMap)>) -> Result<DomainBox> {
    let mut lo = Vec3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Vec3::new(f64::MIN, f64::MIN, f64::MIN);
    for t in 1..=scene.frames {
        let (_, depth) = &backgrounds[&t];
        let dmin = depth.data().iter().cloned().fold(f64::MAX, f64::min);
        let dmax = depth.data().iter().cloned().fold(f64::MIN, f64::max);
        let b = DomainBox::from_frustum(&scene.camera_at(t), 0.3 * dmin, 0.9 * dmax, scene.frames)?;
        lo = Vec3::new(lo.x.min(b.x_min.x), lo.y.min(b.x_min.y), lo.z.min(b.x_min.z));
        hi = Vec3::new(hi.x.max(b.x_max.x), hi.y.max(b.x_max.y), hi.z.max(b.x_max.z));
    }
    DomainBox::new(lo, hi, scene.frames)
}
