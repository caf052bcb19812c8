use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use probefield::distill::{Distiller, RunConfig};
use probefield::envmap::EnvMap;
use probefield::eval::evaluate;
use probefield::image::{tonemap, ExposureValue, DEFAULT_GAMMA};
use probefield::io;
use probefield::lightfield::LightField;
use probefield::oracle::{FileOracle, PriorOracle};
use probefield::probe::{render_ball, Ball, Camera, DEFAULT_SUPERSAMPLE};
use probefield::rng::SeedTree;
use probefield::scene::{ProbePoint, SceneSpec};
use probefield::Error;

#[derive(Parser, Debug)]
#[command(name = "probefield", version, about = "Distill a spatiotemporal HDR light field from chrome-ball probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render background frames, depth maps and ground-truth envmaps of an analytic scene.
    SceneGen {
        /// Scene JSON; exclusive with --preset.
        #[arg(long, conflicts_with = "preset")]
        scene: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// JSON list of {"x": [x, y, z], "t": t} probe points.
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Number of random probe points when --probes is absent.
        #[arg(long, default_value_t = 10)]
        num_probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Height of the written ground-truth envmaps.
        #[arg(long, default_value_t = 64)]
        env_height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a light field against a prior oracle.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = OracleKind::Synthetic)]
        oracle: OracleKind,
        /// Exchange directory for --oracle file.
        #[arg(long)]
        exchange: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted and ground-truth envmaps (matching PFM file names).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a mirror ball lit by an envmap.
    ProbeRender {
        #[arg(long)]
        env: PathBuf,
        /// JSON {"center": [x, y, z], "radius": r} in camera space.
        #[arg(long)]
        ball: PathBuf,
        /// Camera JSON {fx, fy, cx, cy, width, height}.
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SUPERSAMPLE)]
        supersample: usize,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        ev: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the light field's envmap at listed probe points to PFM.
    EnvmapExport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON list of {"x": [x, y, z], "t": t}.
        #[arg(long)]
        probes: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    ThreeEmitterStep,
    ConstantEmitters,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum OracleKind {
    Synthetic,
    File,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Serialize, Deserialize)]
struct InputHash {
    path: String,
    hash: String,
}

/// Written to the output location before any other artifact.
#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    seed: Option<u64>,
    inputs: Vec<InputHash>,
    content_hash: String,
    layout: serde_json::Value,
}

/// SHA-256 over git's blob framing: `blob <len>\0<bytes>`.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_inputs(paths: &[&Path]) -> Result<Vec<InputHash>, Error> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = read_dir_sorted(p)?;
            entries.retain(|e| e.is_file());
            files.extend(entries);
        } else {
            files.push(p.to_path_buf());
        }
    }
    files
        .iter()
        .map(|f| {
            let bytes = fs::read(f).map_err(|e| io_err(f, e))?;
            Ok(InputHash {
                path: f.display().to_string(),
                hash: blob_hash(&bytes),
            })
        })
        .collect()
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: Option<&Path>,
    seed: Option<u64>,
    inputs: &[&Path],
    layout: serde_json::Value,
) -> Result<(), Error> {
    let inputs = hash_inputs(inputs)?;
    let mut h = Sha256::new();
    for i in &inputs {
        h.update(i.hash.as_bytes());
        h.update(b"\n");
    }
    let manifest = RunManifest {
        command: command.into(),
        config: config.map(|p| p.display().to_string()),
        seed,
        inputs,
        content_hash: hex(&h.finalize()),
        layout,
    };
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_json(path, &manifest)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(p: &Path) -> Result<(), Error> {
    if p.as_os_str().is_empty() {
        return Ok(());
    }
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        out.push(entry.map_err(|e| io_err(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn pfm_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut v = read_dir_sorted(dir)?;
    v.retain(|p| p.extension().is_some_and(|e| e == "pfm"));
    Ok(v)
}

fn scene_gen(
    scene: Option<PathBuf>,
    preset: Option<Preset>,
    probes: Option<PathBuf>,
    num_probes: usize,
    seed: u64,
    env_height: usize,
    out: PathBuf,
) -> CmdResult {
    let spec = match (&scene, preset) {
        (Some(p), _) => SceneSpec::load(p)?,
        (None, Some(Preset::ThreeEmitterStep)) => SceneSpec::three_emitter_step(),
        (None, Some(Preset::ConstantEmitters)) => SceneSpec::constant_emitters(),
        (None, None) => return Err(Failure::Usage("scene-gen needs --scene or --preset".into())),
    };
    if env_height < 2 {
        return Err(Failure::Usage("--env-height must be >= 2".into()));
    }
    let mut inputs: Vec<&Path> = Vec::new();
    if let Some(p) = &scene {
        inputs.push(p);
    }
    if let Some(p) = &probes {
        inputs.push(p);
    }
    write_manifest(
        &out.join("manifest.json"),
        "scene-gen",
        scene.as_deref(),
        Some(seed),
        &inputs,
        json!({
            "scene.json": "resolved scene",
            "frames/frame_####.png": "background frame t (1-based)",
            "frames/depth_####.pfm": "background depth t",
            "probes.json": "probe points",
            "gt/probe_###.pfm": "ground-truth envmap per probe point",
        }),
    )?;
    write_json(&out.join("scene.json"), &spec)?;
    let frames = out.join("frames");
    create_dir(&frames)?;
    for t in 1..=spec.frames {
        let (img, depth) = spec.background(t)?;
        io::write_png(&img, frames.join(format!("frame_{t:04}.png")))?;
        io::write_pfm(&depth.to_hdr(), frames.join(format!("depth_{t:04}.pfm")))?;
    }
    let points = match &probes {
        Some(p) => ProbePoint::load_list(p)?,
        None => spec.sample_probe_points(num_probes, &mut SeedTree::new(seed).stream("probe-points"))?,
    };
    write_json(&out.join("probes.json"), &points)?;
    let gt = out.join("gt");
    create_dir(&gt)?;
    for (i, p) in points.iter().enumerate() {
        spec.gt_envmap(p.x, p.t, env_height).write_pfm(gt.join(format!("probe_{i:03}.pfm")))?;
    }
    Ok(())
}

fn distill(config: PathBuf, oracle: OracleKind, exchange: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> CmdResult {
    let cfg = RunConfig::load(&config)?;
    cfg.validate()?;
    let seed = seed.unwrap_or(cfg.seed);
    let mut inputs: Vec<&Path> = vec![&config];
    if let Some(p) = &cfg.scene_path {
        inputs.push(p);
    }
    if let Some(bg) = cfg.scene.as_ref().and_then(|s| s.backgrounds.as_ref()) {
        inputs.push(&bg.dir);
    }
    let mut distiller = Distiller::new(cfg.clone(), seed)?;
    let mut oracle_box: Box<dyn PriorOracle> = match (oracle, exchange) {
        (OracleKind::Synthetic, None) => Box::new(distiller.synthetic_oracle()),
        (OracleKind::Synthetic, Some(_)) => {
            return Err(Failure::Usage("--exchange only applies to --oracle file".into()));
        }
        (OracleKind::File, Some(dir)) => {
            Box::new(FileOracle::new(dir).with_timeout(Duration::from_secs_f64(cfg.oracle_timeout_secs)))
        }
        (OracleKind::File, None) => return Err(Failure::Usage("--oracle file needs --exchange <dir>".into())),
    };
    write_manifest(
        &out.join("manifest.json"),
        "distill",
        Some(&config),
        Some(seed),
        &inputs,
        json!({
            "checkpoints/psi_######.bin": "periodic checkpoint after that many iterations",
            "checkpoints/psi_final.bin": "final checkpoint",
            "checkpoints/*.bin.json": "encoding and domain sidecar",
            "report.json": "per-iteration loss, ev, tau and k",
        }),
    )?;
    distiller.run(oracle_box.as_mut(), Some(&out))?;
    Ok(())
}

fn eval(pred: PathBuf, gt: PathBuf, out: Option<PathBuf>) -> CmdResult {
    let pred_files = pfm_files(&pred)?;
    let gt_files = pfm_files(&gt)?;
    let names = |v: &[PathBuf]| -> Vec<std::ffi::OsString> { v.iter().filter_map(|p| p.file_name().map(|n| n.to_owned())).collect() };
    if names(&pred_files) != names(&gt_files) {
        return Err(Failure::Runtime(Error::InvalidData(format!(
            "{} and {} hold different PFM file sets",
            pred.display(),
            gt.display()
        ))));
    }
    if let Some(path) = &out {
        let mut m = path.clone().into_os_string();
        m.push(".manifest.json");
        write_manifest(
            Path::new(&m),
            "eval",
            None,
            None,
            &[&pred, &gt],
            json!({ path.display().to_string(): "metric report" }),
        )?;
    }
    let load = |v: &[PathBuf]| -> Result<Vec<EnvMap>, Error> { v.iter().map(EnvMap::read_pfm).collect() };
    let report = evaluate(&load(&pred_files)?, &load(&gt_files)?)?;
    match out {
        Some(path) => write_json(&path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(Error::from)?),
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

fn probe_render(env: PathBuf, ball: PathBuf, camera: PathBuf, supersample: usize, ev: f64, out: PathBuf) -> CmdResult {
    if supersample < 1 {
        return Err(Failure::Usage("--supersample must be >= 1".into()));
    }
    let c: CameraFile = read_json(&camera)?;
    let cam = Camera::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?;
    let b: Ball = read_json(&ball)?;
    let b = Ball::new(b.center, b.radius)?;
    let envmap = EnvMap::read_pfm(&env)?;
    write_manifest(
        &out.join("manifest.json"),
        "probe-render",
        None,
        None,
        &[&env, &ball, &camera],
        json!({
            "sprite.pfm": "linear HDR ball render over black, premultiplied by coverage",
            "sprite.png": "sprite.pfm tonemapped at --ev",
            "mask.png": "pixel coverage of the ball",
        }),
    )?;
    let sprite = render_ball(&envmap, &b, &cam, supersample)?;
    let hdr = sprite.to_frame(cam.width, cam.height);
    io::write_pfm(&hdr, out.join("sprite.pfm"))?;
    let ev = ExposureValue::with_default_floor(ev)?;
    io::write_png(&tonemap(&hdr, ev, DEFAULT_GAMMA)?, out.join("sprite.png"))?;
    io::write_png(&sprite.coverage_frame(cam.width, cam.height), out.join("mask.png"))?;
    Ok(())
}

fn envmap_export(checkpoint: PathBuf, probes: PathBuf, height: usize, out: PathBuf) -> CmdResult {
    if height < 2 {
        return Err(Failure::Usage("--height must be >= 2".into()));
    }
    let field = LightField::load(&checkpoint)?;
    let points = ProbePoint::load_list(&probes)?;
    let sidecar = probefield::lightfield::sidecar_path(&checkpoint);
    write_manifest(
        &out.join("manifest.json"),
        "envmap-export",
        None,
        None,
        &[&checkpoint, &sidecar, &probes],
        json!({ "probe_###.pfm": "light-field envmap at each listed probe point, in list order" }),
    )?;
    for (i, p) in points.iter().enumerate() {
        field.eval_envmap(p.x, p.t, height)?.write_pfm(out.join(format!("probe_{i:03}.pfm")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::SceneGen {
            scene,
            preset,
            probes,
            num_probes,
            seed,
            env_height,
            out,
        } => scene_gen(scene, preset, probes, num_probes, seed, env_height, out),
        Command::Distill {
            config,
            oracle,
            exchange,
            seed,
            out,
        } => distill(config, oracle, exchange, seed, out),
        Command::Eval { pred, gt, out } => eval(pred, gt, out),
        Command::ProbeRender {
            env,
            ball,
            camera,
            supersample,
            ev,
            out,
        } => probe_render(env, ball, camera, supersample, ev, out),
        Command::EnvmapExport {
            checkpoint,
            probes,
            height,
            out,
        } => envmap_export(checkpoint, probes, height, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("usage error: {m}");
            eprintln!("run `probefield --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // `printf 'hello\n' | git hash-object --stdin` under sha256 object format
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
