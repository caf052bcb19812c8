//! Prior oracles: given the composited probe image of one iteration, return a
//! pseudo ground truth for it.
//!
//! [`SyntheticOracle`] renders the probes under an analytic scene's true
//! lighting. [`FileOracle`] hands each request to an external process
//! through an exchange directory.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ExposureValue, LdrImage, DEFAULT_GAMMA};
use crate::io;
use crate::probe::{composite_ldr, render_ball, Ball, Camera, DepthMap, Mask, DEFAULT_SUPERSAMPLE};
use crate::rng::SeedTree;
use crate::scene::SceneSpec;

pub const DEFAULT_CFG_SCALE: f64 = 12.5;
pub const DEFAULT_SIGMA_O: f64 = 0.02;
pub const DEFAULT_GT_ENV_HEIGHT: usize = 64;
pub const DEFAULT_TIMEOUT_SECS: f64 = 300.0;

/// Sampler steps for noise level `tau`: `ceil(10 tau)`.
pub fn sampler_steps(tau: f64) -> u32 {
    (10.0 * tau).ceil() as u32
}

#[derive(Debug, Clone)]
pub struct OracleRequest {
    pub id: String,
    /// Frame index, 1-based.
    pub t: usize,
    pub composited: LdrImage,
    pub mask: Mask,
    /// Balls composited over the background depth.
    pub depth: DepthMap,
    pub background: LdrImage,
    pub ev: ExposureValue,
    pub tau: f64,
    pub k: u32,
    pub cfg_scale: f64,
    pub camera: Camera,
    pub balls: Vec<Ball>,
}

impl OracleRequest {
    pub fn validate(&self) -> Result<()> {
        let dims = (self.camera.width, self.camera.height);
        let check = |what: &str, d: (usize, usize)| {
            if d != dims {
                Err(Error::mismatch(
                    format!("{}x{}", dims.0, dims.1),
                    format!("{what} {}x{}", d.0, d.1),
                ))
            } else {
                Ok(())
            }
        };
        check("composited", self.composited.dims())?;
        check("background", self.background.dims())?;
        check("mask", (self.mask.width(), self.mask.height()))?;
        check("depth", (self.depth.width(), self.depth.height()))?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResponse {
    pub id: String,
    pub pseudo_gt: LdrImage,
}

pub trait PriorOracle {
    fn answer(&mut self, req: &OracleRequest) -> Result<OracleResponse>;
}

/// Validates a response and forces every pixel outside the mask back to
/// the request's background.
pub fn enforce_inpainting(req: &OracleRequest, resp: OracleResponse) -> Result<LdrImage> {
    if resp.id != req.id {
        return Err(Error::OracleResponse {
            id: req.id.clone(),
            reason: format!("response carries id {}", resp.id),
        });
    }
    if resp.pseudo_gt.dims() != req.composited.dims() {
        return Err(Error::OracleResponse {
            id: req.id.clone(),
            reason: format!(
                "response is {}x{}, expected {}x{}",
                resp.pseudo_gt.width(),
                resp.pseudo_gt.height(),
                req.composited.width(),
                req.composited.height()
            ),
        });
    }
    let mut out = resp.pseudo_gt;
    for i in 0..out.len_pixels() {
        if !req.mask.at(i) {
            out.set_pixel(i, req.background.pixel(i));
        }
    }
    Ok(out)
}

/// Asks `oracle` and applies [`enforce_inpainting`].
pub fn ask(oracle: &mut dyn PriorOracle, req: &OracleRequest) -> Result<LdrImage> {
    let resp = oracle.answer(req)?;
    enforce_inpainting(req, resp)
}

/// Renders requested balls under the scene's ground-truth lighting.
pub struct SyntheticOracle {
    scene: SceneSpec,
    pub sigma_o: f64,
    pub gt_env_height: usize,
    pub supersample: usize,
    pub gamma: f64,
    seeds: SeedTree,
    depth_cache: HashMap<usize, DepthMap>,
}

impl SyntheticOracle {
    pub fn new(scene: SceneSpec, seeds: SeedTree) -> Self {
        Self {
            scene,
            sigma_o: DEFAULT_SIGMA_O,
            gt_env_height: DEFAULT_GT_ENV_HEIGHT,
            supersample: DEFAULT_SUPERSAMPLE,
            gamma: DEFAULT_GAMMA,
            seeds,
            depth_cache: HashMap::new(),
        }
    }

    pub fn scene(&self) -> &SceneSpec {
        &self.scene
    }

    fn background_depth(&mut self, t: usize) -> Result<&DepthMap> {
        if !self.depth_cache.contains_key(&t) {
            let (_, d) = self.scene.background(t)?;
            self.depth_cache.insert(t, d);
        }
        Ok(&self.depth_cache[&t])
    }
}

impl PriorOracle for SyntheticOracle {
    fn answer(&mut self, req: &OracleRequest) -> Result<OracleResponse> {
        req.validate()?;
        if req.t < 1 || req.t > self.scene.frames {
            return Err(Error::InvalidArgument(format!(
                "frame {} outside the scene's 1..={}",
                req.t, self.scene.frames
            )));
        }
        let cam = self.scene.camera_at(req.t);
        if cam != req.camera {
            return Err(Error::InvalidArgument("request camera differs from the scene camera".into()));
        }
        let (h, ss) = (self.gt_env_height, self.supersample);
        let mut sprites = Vec::with_capacity(req.balls.len());
        for ball in &req.balls {
            let x = cam.pose.point_to_world(ball.center);
            let env = self.scene.gt_envmap(x, req.t as f64, h);
            sprites.push(render_ball(&env, ball, &cam, ss)?);
        }
        let gamma = self.gamma;
        let depth = self.background_depth(req.t)?.clone();
        let mut img = composite_ldr(&req.background, &sprites, Some(&depth), req.ev, gamma)?;
        let std = self.sigma_o * req.tau;
        if std > 0.0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seeds.child(&req.id).seed());
            let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let data = img.data_mut();
            for i in 0..req.mask.data().len() {
                if req.mask.at(i) {
                    for c in 0..3 {
                        let v = data[3 * i + c] + normal.sample(&mut rng);
                        data[3 * i + c] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        for i in 0..img.len_pixels() {
            if !req.mask.at(i) {
                img.set_pixel(i, req.background.pixel(i));
            }
        }
        Ok(OracleResponse {
            id: req.id.clone(),
            pseudo_gt: img,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireBall {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

/// `request.json` of the exchange protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: String,
    pub t: f64,
    pub ev: f64,
    pub tau: f64,
    pub k: f64,
    pub cfg_scale: f64,
    pub camera: WireCamera,
    pub balls: Vec<WireBall>,
}

impl From<&OracleRequest> for WireRequest {
    fn from(r: &OracleRequest) -> Self {
        WireRequest {
            id: r.id.clone(),
            t: r.t as f64,
            ev: r.ev.ev(),
            tau: r.tau,
            k: r.k as f64,
            cfg_scale: r.cfg_scale,
            camera: WireCamera {
                fx: r.camera.fx,
                fy: r.camera.fy,
                cx: r.camera.cx,
                cy: r.camera.cy,
                w: r.camera.width as f64,
                h: r.camera.height as f64,
            },
            balls: r
                .balls
                .iter()
                .map(|b| WireBall {
                    x: b.center.x,
                    y: b.center.y,
                    z: b.center.z,
                    r: b.radius,
                })
                .collect(),
        }
    }
}

/// Paths of the exchange layout rooted at one directory.
#[derive(Debug, Clone)]
pub struct Exchange {
    pub root: PathBuf,
}

impl Exchange {
    pub fn request_dir(&self, id: &str) -> PathBuf {
        self.root.join("req").join(id)
    }

    pub fn response_dir(&self, id: &str) -> PathBuf {
        self.root.join("resp").join(id)
    }

    pub fn response_image(&self, id: &str) -> PathBuf {
        self.response_dir(id).join("pseudo_gt.png")
    }

    /// Written last by the responder; its presence means the response is complete.
    pub fn done_marker(&self, id: &str) -> PathBuf {
        self.response_dir(id).join(format!("{id}.done"))
    }
}

/// Exchanges requests with an external responder through files.
pub struct FileOracle {
    pub exchange: Exchange,
    pub timeout: Duration,
    pub poll: Duration,
}

impl FileOracle {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            exchange: Exchange { root: root.into() },
            timeout: Duration::from_secs_f64(DEFAULT_TIMEOUT_SECS),
            poll: Duration::from_millis(50),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Writes the request bundle; `request.json` goes last, via rename.
    pub fn write_request(&self, req: &OracleRequest) -> Result<PathBuf> {
        let dir = self.exchange.request_dir(&req.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        io::write_png(&req.composited, dir.join("composited.png"))?;
        io::write_png(&req.mask.to_ldr(), dir.join("mask.png"))?;
        io::write_pfm(&req.depth.to_hdr(), dir.join("depth.pfm"))?;
        io::write_png(&req.background, dir.join("background.png"))?;
        let json = serde_json::to_string_pretty(&WireRequest::from(req))?;
        write_atomic(&dir.join("request.json"), json.as_bytes())?;
        Ok(dir)
    }

    fn read_response(&self, req: &OracleRequest) -> Result<OracleResponse> {
        let path = self.exchange.response_image(&req.id);
        let img = io::read_png(&path).map_err(|e| Error::OracleResponse {
            id: req.id.clone(),
            reason: e.to_string(),
        })?;
        if img.dims() != req.composited.dims() {
            let dir = self.exchange.response_dir(&req.id);
            // drop the bad response so the same id can be answered again
            let _ = fs::remove_dir_all(&dir);
            return Err(Error::OracleResponse {
                id: req.id.clone(),
                reason: format!(
                    "response is {}x{}, expected {}x{}",
                    img.width(),
                    img.height(),
                    req.composited.width(),
                    req.composited.height()
                ),
            });
        }
        Ok(OracleResponse {
            id: req.id.clone(),
            pseudo_gt: img,
        })
    }
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl PriorOracle for FileOracle {
    fn answer(&mut self, req: &OracleRequest) -> Result<OracleResponse> {
        req.validate()?;
        self.write_request(req)?;
        let marker = self.exchange.done_marker(&req.id);
        let start = Instant::now();
        loop {
            if marker.exists() {
                return self.read_response(req);
            }
            if start.elapsed() >= self.timeout {
                return Err(Error::OracleTimeout {
                    id: req.id.clone(),
                    seconds: self.timeout.as_secs_f64(),
                });
            }
            std::thread::sleep(self.poll);
        }
    }
}
