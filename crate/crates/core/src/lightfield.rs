//! The MLP light field `L(x, t, d)`: positional encoding, a fixed-shape
//! ReLU network with a concatenating skip, softplus output, and its exact
//! reverse-mode gradient.
//!
//! Parameters live in one flat `f64` vector. Batched evaluation is generic
//! over the float type so training can run in `f32` while gradient checks
//! run in `f64`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, LinalgScalar};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envmap::{texel_direction, EnvMap};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::image::{HdrImage, Rgb};

pub const HIDDEN_LAYERS: usize = 6;
pub const HIDDEN_WIDTH: usize = 256;
/// Hidden layer (1-based) whose input is `[h_{k-1}; encoding]`.
pub const SKIP_LAYER: usize = 3;
const FINAL_LAYER_SCALE: f64 = 0.1;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of inputs clamped into the domain box since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Frequencies per input group; `use_time = false` drops `t` entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionalEncoding {
    pub freqs_x: usize,
    pub freqs_t: usize,
    pub freqs_d: usize,
    pub use_time: bool,
}

impl Default for PositionalEncoding {
    fn default() -> Self {
        Self {
            freqs_x: 6,
            freqs_t: 4,
            freqs_d: 4,
            use_time: true,
        }
    }
}

impl PositionalEncoding {
    pub fn single_frame() -> Self {
        Self {
            use_time: false,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        let t = if self.use_time { 2 * self.freqs_t } else { 0 };
        2 * self.freqs_x * 3 + t + 2 * self.freqs_d * 3
    }

    /// `(sin(2^k pi p), cos(2^k pi p))` for `k = 0..F`, per scalar in order.
    pub fn encode_scalar(p: f64, freqs: usize, out: &mut Vec<f64>) {
        let mut f = PI * p;
        for _ in 0..freqs {
            let (s, c) = f.sin_cos();
            out.push(s);
            out.push(c);
            f *= 2.0;
        }
    }

    /// Encodes inputs already normalized to `[-1, 1]`.
    pub fn encode_normalized(&self, x: [f64; 3], t: f64, d: [f64; 3], out: &mut Vec<f64>) {
        for v in x {
            Self::encode_scalar(v, self.freqs_x, out);
        }
        if self.use_time {
            Self::encode_scalar(t, self.freqs_t, out);
        }
        for v in d {
            Self::encode_scalar(v, self.freqs_d, out);
        }
    }
}

/// Bounds used to normalize MLP inputs to `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBox {
    pub x_min: Vec3,
    pub x_max: Vec3,
    /// Number of frames `T`; `t` ranges over `[1, T]`.
    pub frames: usize,
}

impl DomainBox {
    pub fn new(x_min: Vec3, x_max: Vec3, frames: usize) -> Result<Self> {
        let b = Self { x_min, x_max, frames };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.x_min.is_finite()
            && self.x_max.is_finite()
            && self.x_min.x < self.x_max.x
            && self.x_min.y < self.x_max.y
            && self.x_min.z < self.x_max.z
            && self.frames >= 1;
        if !ok {
            return Err(Error::InvalidArgument(format!("empty domain box {self:?}")));
        }
        Ok(())
    }

    /// Bounding box of the camera frustum between `near` and `far`,
    /// expanded by 10% per axis, in world space.
    pub fn from_frustum(camera: &crate::probe::Camera, near: f64, far: f64, frames: usize) -> Result<Self> {
        let mut lo = Vec3::new(f64::MAX, f64::MAX, f64::MAX);
        let mut hi = Vec3::new(f64::MIN, f64::MIN, f64::MIN);
        for z in [near, far] {
            for (u, v) in [
                (0.0, 0.0),
                (camera.width as f64, 0.0),
                (0.0, camera.height as f64),
                (camera.width as f64, camera.height as f64),
            ] {
                let p = camera.pose.point_to_world(camera.unproject(u, v, z));
                lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
                hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
            }
        }
        let pad = (hi - lo) * 0.05;
        Self::new(lo - pad, hi + pad, frames)
    }

    fn norm_axis(v: f64, lo: f64, hi: f64, clamped: &mut bool) -> f64 {
        let n = 2.0 * (v - lo) / (hi - lo) - 1.0;
        if !(-1.0..=1.0).contains(&n) {
            *clamped = true;
            n.clamp(-1.0, 1.0)
        } else {
            n
        }
    }

    /// Normalized `(x, t)`; out-of-box inputs are clamped and counted.
    pub fn normalize(&self, x: Vec3, t: f64) -> ([f64; 3], f64) {
        let mut clamped = false;
        let nx = [
            Self::norm_axis(x.x, self.x_min.x, self.x_max.x, &mut clamped),
            Self::norm_axis(x.y, self.x_min.y, self.x_max.y, &mut clamped),
            Self::norm_axis(x.z, self.x_min.z, self.x_max.z, &mut clamped),
        ];
        let nt = if self.frames > 1 {
            Self::norm_axis(t, 1.0, self.frames as f64, &mut clamped)
        } else {
            0.0
        };
        if clamped && CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed) == 0 {
            log::warn!("light field input ({x:?}, t={t}) outside the domain box; clamping");
        }
        (nx, nt)
    }
}

/// `(out, in)` shape of every layer, hidden layers first, output last.
pub fn layer_shapes(enc_dim: usize) -> Vec<(usize, usize)> {
    let mut shapes = Vec::with_capacity(HIDDEN_LAYERS + 1);
    for k in 1..=HIDDEN_LAYERS {
        let input = match k {
            1 => enc_dim,
            k if k == SKIP_LAYER => HIDDEN_WIDTH + enc_dim,
            _ => HIDDEN_WIDTH,
        };
        shapes.push((HIDDEN_WIDTH, input));
    }
    shapes.push((3, HIDDEN_WIDTH));
    shapes
}

/// Weights `[out x in]` row-major followed by bias `[out]`, per layer.
pub fn param_count(enc_dim: usize) -> usize {
    layer_shapes(enc_dim).iter().map(|(o, i)| o * i + o).sum()
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn softplus_f<F: Float>(z: F) -> F {
    if z > F::from(30.0).unwrap() {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid_f<F: Float>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

fn add_bias<F: Float>(z: &mut Array2<F>, b: &Array1<F>) {
    for mut row in z.rows_mut() {
        row.zip_mut_with(b, |a, &bb| *a = *a + bb);
    }
}

/// Activations kept from a batched forward pass.
pub struct ForwardCache<F> {
    enc: Array2<F>,
    /// Post-ReLU outputs of hidden layers 1..=6.
    hidden: Vec<Array2<F>>,
    /// Pre-softplus output.
    logits: Array2<F>,
}

impl<F> ForwardCache<F> {
    pub fn batch_len(&self) -> usize {
        self.enc.nrows()
    }
}

/// `L(x, t, d)` with its encoding, domain box and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    pub encoding: PositionalEncoding,
    pub domain: DomainBox,
    params: Vec<f64>,
}

impl LightField {
    /// Kaiming-uniform hidden weights, zero biases, final weights scaled by 0.1.
    pub fn init(encoding: PositionalEncoding, domain: DomainBox, rng: &mut impl Rng) -> Self {
        let shapes = layer_shapes(encoding.dim());
        let mut params = Vec::with_capacity(param_count(encoding.dim()));
        let last = shapes.len() - 1;
        for (l, &(o, i)) in shapes.iter().enumerate() {
            let bound = (6.0 / i as f64).sqrt();
            let scale = if l == last { FINAL_LAYER_SCALE } else { 1.0 };
            for _ in 0..o * i {
                params.push(rng.random_range(-bound..bound) * scale);
            }
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Self { encoding, domain, params }
    }

    pub fn from_params(encoding: PositionalEncoding, domain: DomainBox, params: Vec<f64>) -> Result<Self> {
        domain.validate()?;
        let n = param_count(encoding.dim());
        if params.len() != n {
            return Err(Error::mismatch(n, params.len()));
        }
        Ok(Self { encoding, domain, params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.params.iter().all(|p| p.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidData("light field parameters are not finite".into()))
        }
    }

    /// Offsets of `(weights, bias)` for each layer.
    fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        layer_shapes(self.encoding.dim())
            .into_iter()
            .map(|(o, i)| {
                let w = off;
                off += o * i;
                let b = off;
                off += o;
                (o, i, w, b)
            })
            .collect()
    }

    /// Appends the encoding of one query to `out`.
    pub fn encode_into(&self, x: Vec3, t: f64, d: Vec3, out: &mut Vec<f64>) {
        let (nx, nt) = self.domain.normalize(x, t);
        self.encoding.encode_normalized(nx, nt, d.to_array(), out);
    }

    /// Encodes a batch of queries into an `[N x enc_dim]` matrix.
    pub fn encode_batch<F: Float>(&self, x: Vec3, t: f64, dirs: &[Vec3]) -> Array2<F> {
        let dim = self.encoding.dim();
        let mut buf = Vec::with_capacity(dim);
        let mut out = Vec::with_capacity(dirs.len() * dim);
        for &d in dirs {
            buf.clear();
            self.encode_into(x, t, d, &mut buf);
            out.extend(buf.iter().map(|&v| F::from(v).unwrap()));
        }
        Array2::from_shape_vec((dirs.len(), dim), out).expect("encoding shape")
    }

    /// Encodes `(x, d)` pairs sharing one time `t` into an `[N x enc_dim]` matrix.
    pub fn encode_queries<F: Float>(&self, t: f64, queries: &[(Vec3, Vec3)]) -> Array2<F> {
        let dim = self.encoding.dim();
        let mut buf = Vec::with_capacity(dim);
        let mut out = Vec::with_capacity(queries.len() * dim);
        for &(x, d) in queries {
            buf.clear();
            self.encode_into(x, t, d, &mut buf);
            out.extend(buf.iter().map(|&v| F::from(v).unwrap()));
        }
        Array2::from_shape_vec((queries.len(), dim), out).expect("encoding shape")
    }

    fn weights<F: Float + 'static>(&self) -> Vec<(Array2<F>, Array1<F>)> {
        self.layer_offsets()
            .into_iter()
            .map(|(o, i, w, b)| {
                let wm = Array2::from_shape_vec((o, i), self.params[w..w + o * i].iter().map(|&v| F::from(v).unwrap()).collect())
                    .expect("weight shape");
                let bv = Array1::from_iter(self.params[b..b + o].iter().map(|&v| F::from(v).unwrap()));
                (wm, bv)
            })
            .collect()
    }

    /// Batched forward pass over encoded inputs. Returns radiance `[N x 3]`.
    pub fn forward<F: Float + LinalgScalar>(&self, enc: Array2<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        if enc.ncols() != self.encoding.dim() {
            return Err(Error::mismatch(self.encoding.dim(), enc.ncols()));
        }
        let layers = self.weights::<F>();
        let mut hidden: Vec<Array2<F>> = Vec::with_capacity(HIDDEN_LAYERS);
        for (k, (w, b)) in layers[..HIDDEN_LAYERS].iter().enumerate() {
            let layer = k + 1;
            let mut z = if layer == 1 {
                enc.dot(&w.t())
            } else if layer == SKIP_LAYER {
                concatenate![Axis(1), hidden[k - 1], enc].dot(&w.t())
            } else {
                hidden[k - 1].dot(&w.t())
            };
            add_bias(&mut z, b);
            z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            hidden.push(z);
        }
        let (wo, bo) = &layers[HIDDEN_LAYERS];
        let mut logits = hidden[HIDDEN_LAYERS - 1].dot(&wo.t());
        add_bias(&mut logits, bo);
        let out = logits.mapv(softplus_f);
        Ok((out, ForwardCache { enc, hidden, logits }))
    }

    /// Exact gradient of `sum(upstream * output)` with respect to the
    /// parameters, for the batch recorded in `cache`.
    pub fn backward<F: Float + LinalgScalar>(&self, cache: &ForwardCache<F>, upstream: ArrayView2<F>) -> Result<Vec<f64>> {
        let n = cache.batch_len();
        if upstream.dim() != (n, 3) {
            return Err(Error::mismatch(format!("{n}x3"), format!("{}x{}", upstream.nrows(), upstream.ncols())));
        }
        let layers = self.weights::<F>();
        let offsets = self.layer_offsets();
        let mut grad = vec![0.0; self.params.len()];
        let mut write = |layer: usize, dz: &Array2<F>, input: ArrayView2<F>| {
            let (o, i, w, b) = offsets[layer];
            let gw = dz.t().dot(&input);
            for (dst, src) in grad[w..w + o * i].iter_mut().zip(gw.iter()) {
                *dst = src.to_f64().unwrap();
            }
            for (dst, src) in grad[b..b + o].iter_mut().zip(dz.sum_axis(Axis(0)).iter()) {
                *dst = src.to_f64().unwrap();
            }
        };

        let mut dz = Array2::from_shape_fn((n, 3), |(r, c)| upstream[(r, c)] * sigmoid_f(cache.logits[(r, c)]));
        write(HIDDEN_LAYERS, &dz, cache.hidden[HIDDEN_LAYERS - 1].view());
        let mut dh = dz.dot(&layers[HIDDEN_LAYERS].0);
        for k in (0..HIDDEN_LAYERS).rev() {
            let layer = k + 1;
            dz = dh;
            ndarray::Zip::from(&mut dz)
                .and(&cache.hidden[k])
                .for_each(|g, &h| {
                    if h <= F::zero() {
                        *g = F::zero();
                    }
                });
            if layer == 1 {
                write(k, &dz, cache.enc.view());
                break;
            }
            let w = &layers[k].0;
            if layer == SKIP_LAYER {
                let input = concatenate![Axis(1), cache.hidden[k - 1], cache.enc];
                write(k, &dz, input.view());
                dh = dz.dot(&w.slice(s![.., ..HIDDEN_WIDTH]));
            } else {
                write(k, &dz, cache.hidden[k - 1].view());
                dh = dz.dot(w);
            }
        }
        Ok(grad)
    }

    /// Radiance for a single query (f64 path).
    pub fn eval(&self, x: Vec3, t: f64, d: Vec3) -> Result<Rgb> {
        self.check_finite()?;
        let enc = self.encode_batch::<f64>(x, t, &[d]);
        let (out, _) = self.forward(enc)?;
        Ok([out[(0, 0)], out[(0, 1)], out[(0, 2)]])
    }

    /// `L(x, t, .)` sampled at every texel center of an `H x 2H` map.
    pub fn eval_envmap(&self, x: Vec3, t: f64, h: usize) -> Result<EnvMap> {
        self.check_finite()?;
        let w = 2 * h;
        let dirs: Vec<Vec3> = (0..h)
            .flat_map(|j| (0..w).map(move |i| texel_direction(i, j, h, 0.0).vec()))
            .collect();
        let mut data = Vec::with_capacity(w * h * 3);
        for chunk in dirs.chunks(4096) {
            let (out, _) = self.forward(self.encode_batch::<f64>(x, t, chunk))?;
            data.extend(out.iter().copied());
        }
        EnvMap::new(HdrImage::new(w, h, data)?)
    }

    /// Saves the binary checkpoint at `path` and a JSON sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.checkpoint_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = CheckpointMeta {
            encoding: self.encoding,
            domain: self.domain,
        };
        let json = serde_json::to_string_pretty(&meta)?;
        fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let shapes = layer_shapes(self.encoding.dim());
        let mut out = Vec::with_capacity(64 + self.params.len() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let u32s = [
            CHECKPOINT_VERSION,
            self.encoding.freqs_x as u32,
            self.encoding.freqs_t as u32,
            self.encoding.freqs_d as u32,
            self.encoding.use_time as u32,
            shapes.len() as u32,
        ];
        for v in u32s {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (o, i) in &shapes {
            out.extend_from_slice(&(*o as u32).to_le_bytes());
            out.extend_from_slice(&(*i as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let (encoding, params) = parse_checkpoint(&bytes)?;
        if encoding != meta.encoding {
            return Err(Error::Checkpoint(format!(
                "sidecar encoding {:?} disagrees with checkpoint {:?}",
                meta.encoding, encoding
            )));
        }
        Self::from_params(encoding, meta.domain, params)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PFLF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    encoding: PositionalEncoding,
    domain: DomainBox,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(PositionalEncoding, Vec<f64>)> {
    let bad = |reason: String| Error::Checkpoint(reason);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos + n;
        if end > bytes.len() {
            return Err(bad(format!("truncated at byte {pos}")));
        }
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut u32_at = || -> Result<u32> { Ok(u32::from_le_bytes(take(4)?.try_into().unwrap())) };
    let version = u32_at()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let encoding = PositionalEncoding {
        freqs_x: u32_at()? as usize,
        freqs_t: u32_at()? as usize,
        freqs_d: u32_at()? as usize,
        use_time: match u32_at()? {
            0 => false,
            1 => true,
            v => return Err(bad(format!("bad time flag {v}"))),
        },
    };
    let nl = u32_at()? as usize;
    let expected = layer_shapes(encoding.dim());
    if nl != expected.len() {
        return Err(bad(format!("expected {} layers, found {nl}", expected.len())));
    }
    for &(o, i) in &expected {
        let (fo, fi) = (u32_at()? as usize, u32_at()? as usize);
        if (fo, fi) != (o, i) {
            return Err(bad(format!("layer shape {fo}x{fi}, expected {o}x{i}")));
        }
    }
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != param_count(encoding.dim()) {
        return Err(bad(format!("parameter count {count} does not match the architecture")));
    }
    let raw = take(count * 4)?;
    let params = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok((encoding, params))
}
