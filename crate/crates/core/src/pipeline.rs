//! Run configuration and the file-based stages behind each CLI
//! subcommand. Every stage reads from and writes into one run directory
//! and leaves a manifest describing what it consumed and produced.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gns::{GnsConfig, GnsModel, GnsSample, GnsTrainer};
use crate::graph::{FlowGraph, NormStats, HISTORY_STEPS};
use crate::grids::{
    read_trajectories, read_vgrid, write_trajectories, write_vgrid, OccupancyField, TrackPoint, Trajectory, Vec3,
    VoxelGrid,
};
use crate::metrics::{interface_metrics, nrmse_p99, trajectory_r2, velocity_mae, VelocityMetrics};
use crate::preprocess::{kalman_rts_smooth, KalmanConfig};
use crate::rollout::{coarse_velocity, rollout, RolloutConfig, RolloutState, StepOutput};
use crate::synthdata::{generate_sequence, observe, ScenarioConfig};
use crate::unet::{UNetConfig, UNetInput, UNetModel, UNetTrainer};

pub const GEOMETRY_FILE: &str = "geometry.vgrid";
pub const OCCUPANCY_FILE: &str = "occupancy.vgrid";
pub const BASE_VELOCITY_FILE: &str = "base_velocity.vgrid";
pub const TRUE_TRACKS_FILE: &str = "tracks_true.csv";
pub const OBSERVED_TRACKS_FILE: &str = "tracks_observed.csv";
pub const SMOOTHED_TRACKS_FILE: &str = "tracks_smoothed.csv";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scenario: ScenarioConfig,
    /// Standard deviation of the position noise in the observed tracks.
    pub observation_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            observation_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub kalman: KalmanConfig,
    /// Skip smoothing and copy the observed tracks through.
    pub passthrough: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            kalman: KalmanConfig::default(),
            passthrough: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub train_fraction: f64,
    /// Frames after each held-out jump included in the jump window.
    pub jump_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            jump_window: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub gns: GnsConfig,
    pub unet: UNetConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            gns: GnsConfig::default(),
            unet: UNetConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scenario.validate()?;
        self.preprocess.kalman.validate()?;
        self.gns.validate()?;
        self.unet.validate()?;
        if !(self.data.observation_noise >= 0.0) {
            return Err(Error::Config("observation noise must be non-negative".into()));
        }
        if !(self.eval.train_fraction > 0.0 && self.eval.train_fraction < 1.0) {
            return Err(Error::Config("train fraction must lie in (0, 1)".into()));
        }
        if self.rollout.pool.factor == 0 {
            return Err(Error::Config("pool factor must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }

    /// Number of leading frames used for training.
    pub fn train_frames(&self, frames: usize) -> usize {
        ((frames as f64) * self.eval.train_fraction).round() as usize
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoGeometry,
    NoVelocity,
}

impl Ablation {
    pub fn suffix(self) -> &'static str {
        match self {
            Ablation::None => "",
            Ablation::NoGeometry => "-no-geometry",
            Ablation::NoVelocity => "-no-velocity",
        }
    }

    pub fn gns_checkpoint(self) -> String {
        match self {
            Ablation::NoGeometry => "gns-no-geometry.ckpt".into(),
            _ => "gns.ckpt".into(),
        }
    }

    pub fn unet_checkpoint(self) -> String {
        match self {
            Ablation::NoVelocity => "unet-no-velocity.ckpt".into(),
            _ => "unet.ckpt".into(),
        }
    }

    fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut cfg = cfg.clone();
        match self {
            Ablation::None => {}
            Ablation::NoGeometry => cfg.gns.no_geometry = true,
            Ablation::NoVelocity => cfg.unet.no_velocity = true,
        }
        cfg
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoGeometry => "no-geometry",
            Ablation::NoVelocity => "no-velocity",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-geometry" => Ok(Ablation::NoGeometry),
            "no-velocity" => Ok(Ablation::NoVelocity),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

/// Deterministic per-purpose seed derived from the run seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_OBSERVE: u64 = 1;
const SEED_GNS_INIT: u64 = 2;
const SEED_GNS_TRAIN: u64 = 3;
const SEED_UNET_INIT: u64 = 4;
const SEED_UNET_TRAIN: u64 = 5;

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub details: Value,
}

struct Stage<'a> {
    command: String,
    cfg: &'a RunConfig,
    dir: &'a Path,
    start: Instant,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl<'a> Stage<'a> {
    fn new(command: impl Into<String>, cfg: &'a RunConfig, dir: &'a Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            command: command.into(),
            cfg,
            dir,
            start: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Path of a required input, recorded with its digest.
    fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if !path.is_file() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
            ));
        }
        self.inputs.insert(name.to_string(), file_digest(&path)?);
        Ok(path)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn finish(self, details: Value) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), file_digest(&self.dir.join(name))?);
        }
        let manifest = Manifest {
            command: self.command.clone(),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            inputs: self.inputs,
            outputs,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            details,
        };
        let path = self.dir.join(format!("manifest-{}.json", self.command));
        write_json(&path, &manifest)?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn frames_to_grid(frames: &[OccupancyField]) -> Result<VoxelGrid> {
    let grids: Vec<&VoxelGrid> = frames.iter().map(|f| f.grid()).collect();
    VoxelGrid::stack(&grids)
}

pub fn grid_to_frames(grid: &VoxelGrid) -> Result<Vec<OccupancyField>> {
    (0..grid.channels())
        .map(|c| OccupancyField::new(grid.select_channel(c)))
        .collect()
}

/// Scenario description saved next to the generated data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub frames: usize,
    pub jump_frames: Vec<usize>,
    pub multipliers: Vec<f64>,
}

/// `synth`: generates the scenario, its true and noisy tracks.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("synth", cfg, dir)?;
    let mut scenario = cfg.data.scenario.clone();
    scenario.seed = cfg.seed;
    let seq = generate_sequence(&scenario)?;
    let observed = observe(&seq.trajectories, cfg.data.observation_noise, sub_seed(cfg.seed, SEED_OBSERVE))?;

    write_vgrid(&stage.output(GEOMETRY_FILE), seq.geometry.grid())?;
    write_vgrid(&stage.output(OCCUPANCY_FILE), &frames_to_grid(&seq.occupancy)?)?;
    write_vgrid(&stage.output(BASE_VELOCITY_FILE), &seq.base_velocity)?;
    write_trajectories(&stage.output(TRUE_TRACKS_FILE), &seq.trajectories)?;
    write_trajectories(&stage.output(OBSERVED_TRACKS_FILE), &observed)?;
    let record = ScenarioRecord {
        frames: seq.frames(),
        jump_frames: seq.jump_frames(),
        multipliers: seq.multipliers.clone(),
    };
    write_json(&stage.output(SCENARIO_FILE), &record)?;
    let porosity = seq.geometry.count() as f64 / seq.geometry.grid().voxel_count() as f64;
    stage.finish(json!({ "frames": seq.frames(), "tracers": seq.trajectories.len(), "porosity": porosity }))
}

/// `preprocess`: Kalman/RTS smoothing of the observed tracks.
pub fn preprocess(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    let mut stage = Stage::new("preprocess", cfg, dir)?;
    let observed = read_trajectories(&stage.input(OBSERVED_TRACKS_FILE)?)?;
    let smoothed = if cfg.preprocess.passthrough {
        observed
    } else {
        observed
            .iter()
            .map(|t| kalman_rts_smooth(t, &cfg.preprocess.kalman))
            .collect::<Result<Vec<_>>>()?
    };
    write_trajectories(&stage.output(SMOOTHED_TRACKS_FILE), &smoothed)?;
    stage.finish(json!({ "tracks": smoothed.len() }))
}

/// Per-frame positions of tracks that all cover frames `0..n`.
pub fn positions_by_frame(tracks: &[Trajectory]) -> Result<Vec<Vec<Vec3>>> {
    let first = tracks.first().ok_or_else(|| Error::InsufficientData("no trajectories".into()))?;
    let n = first.frames.len();
    let mut out = vec![Vec::with_capacity(tracks.len()); n];
    for t in tracks {
        if t.frames.len() != n || t.frames.iter().enumerate().any(|(i, p)| p.frame != i as i64) {
            return Err(Error::Input(format!(
                "track {} does not cover frames 0..{n} contiguously",
                t.particle_id
            )));
        }
        for (i, p) in t.frames.iter().enumerate() {
            out[i].push(p.position);
        }
    }
    Ok(out)
}

/// `(p(t+1) - p(t-1)) / 2`, one-sided at the ends.
pub fn central_velocities(positions: &[Vec<Vec3>]) -> Vec<Vec<Vec3>> {
    let n = positions.len();
    (0..n)
        .map(|t| {
            let (a, b, s) = match (t.checked_sub(1), t + 1 < n) {
                (Some(lo), true) => (lo, t + 1, 0.5),
                (None, true) => (t, t + 1, 1.0),
                (Some(lo), false) => (lo, t, 1.0),
                (None, false) => (t, t, 0.0),
            };
            positions[b]
                .iter()
                .zip(&positions[a])
                .map(|(q, p)| [(q[0] - p[0]) * s, (q[1] - p[1]) * s, (q[2] - p[2]) * s])
                .collect()
        })
        .collect()
}

/// Everything loaded from a run directory that the learning stages need.
pub struct RunData {
    pub geometry: OccupancyField,
    pub occupancy: Vec<OccupancyField>,
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Vec<Vec<Vec3>>,
    pub train_frames: usize,
}

impl RunData {
    fn load(stage: &mut Stage, cfg: &RunConfig) -> Result<Self> {
        let geometry = OccupancyField::new(read_vgrid(&stage.input(GEOMETRY_FILE)?)?)?;
        let occupancy = grid_to_frames(&read_vgrid(&stage.input(OCCUPANCY_FILE)?)?)?;
        let tracks = read_trajectories(&stage.input(SMOOTHED_TRACKS_FILE)?)?;
        let positions = positions_by_frame(&tracks)?;
        if positions.len() != occupancy.len() {
            return Err(Error::Input(format!(
                "{} track frames vs {} occupancy frames",
                positions.len(),
                occupancy.len()
            )));
        }
        let velocities = central_velocities(&positions);
        let train_frames = cfg.train_frames(positions.len());
        if train_frames < HISTORY_STEPS + 3 {
            return Err(Error::InsufficientData(format!("only {train_frames} training frames")));
        }
        Ok(Self {
            geometry,
            occupancy,
            positions,
            velocities,
            train_frames,
        })
    }

    fn coarse(&self, t: usize, factor: usize) -> Result<OccupancyField> {
        self.occupancy[t].downsample_majority(factor)
    }

    fn history(&self, t: usize) -> Vec<Vec<Vec3>> {
        (1..=HISTORY_STEPS).map(|k| self.velocities[t - k].clone()).collect()
    }

    fn unet_input(&self, cfg: &RunConfig, t: usize, history: usize) -> Result<UNetInput> {
        let f = cfg.rollout.pool.factor;
        Ok(UNetInput {
            history: (0..history).map(|k| self.coarse(t + 1 - history + k, f)).collect::<Result<_>>()?,
            velocity: coarse_velocity(&self.positions[t + 1], &self.velocities[t], &self.geometry, &cfg.rollout)?,
            geometry: self.geometry.downsample_majority(f)?,
        })
    }
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    lr: f64,
}

fn append_log(lines: &mut String, epoch: usize, loss: f64, lr: f64) {
    lines.push_str(&serde_json::to_string(&LogLine { epoch, loss, lr }).expect("log line"));
    lines.push('\n');
}

/// `train-gns`: one-step velocity regression on the training frames.
pub fn train_gns(cfg: &RunConfig, dir: &Path, ablation: Ablation) -> Result<Manifest> {
    let cfg = ablation.apply(cfg);
    let mut stage = Stage::new(format!("train-gns{}", ablation.suffix()), &cfg, dir)?;
    let data = RunData::load(&mut stage, &cfg)?;
    let f = cfg.rollout.pool.factor;
    let dims = data.geometry.dims();

    let mut samples = Vec::new();
    for t in HISTORY_STEPS..data.train_frames - 1 {
        samples.push(GnsSample {
            prev: data.positions[t - 1].clone(),
            cur: data.positions[t].clone(),
            history: data.history(t),
            target: data.velocities[t].clone(),
            // the model sees the interface at the coupling resolution
            interface: data.coarse(t, f)?.upsample_nearest(f, dims),
        });
    }
    let mut model = GnsModel::new(cfg.gns.clone(), sub_seed(cfg.seed, SEED_GNS_INIT))?;
    let graphs = samples
        .iter()
        .map(|s| model.build_graph(&s.prev, &s.cur, &s.history))
        .collect::<Result<Vec<FlowGraph>>>()?;
    let targets: Vec<&[Vec3]> = samples.iter().map(|s| s.target.as_slice()).collect();
    model.stats = Some(NormStats::fit(&graphs.iter().collect::<Vec<_>>(), &targets)?);
    drop(graphs);

    let schedule = cfg.gns.schedule();
    let mut trainer = GnsTrainer::new(model, sub_seed(cfg.seed, SEED_GNS_TRAIN));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = String::new();
    for epoch in 0..cfg.gns.epochs {
        let lr = schedule.lr(epoch as u64);
        trainer.shuffle(&mut order);
        let mut total = 0.0;
        for &i in &order {
            total += trainer.train_step(&samples[i], &data.geometry, lr)?;
        }
        append_log(&mut log, epoch, total / samples.len() as f64, lr);
    }
    let ckpt = ablation.gns_checkpoint();
    trainer.model.save(&stage.output(&ckpt))?;
    let log_name = format!("train-gns{}.jsonl", ablation.suffix());
    fs::write(stage.output(&log_name), log).map_err(|e| Error::io(dir.join(&log_name), e))?;
    stage.finish(json!({ "samples": samples.len(), "ablation": ablation.to_string() }))
}

/// `train-unet`: teacher-forced next-interface classification.
pub fn train_unet(cfg: &RunConfig, dir: &Path, ablation: Ablation) -> Result<Manifest> {
    let cfg = ablation.apply(cfg);
    let mut stage = Stage::new(format!("train-unet{}", ablation.suffix()), &cfg, dir)?;
    let data = RunData::load(&mut stage, &cfg)?;
    let f = cfg.rollout.pool.factor;
    let n_in = cfg.unet.history;

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for t in n_in - 1..data.train_frames - 1 {
        inputs.push(data.unet_input(&cfg, t, n_in)?);
        targets.push(data.coarse(t + 1, f)?);
    }
    if inputs.is_empty() {
        return Err(Error::InsufficientData("no interface training pairs".into()));
    }
    let mut model = UNetModel::new(cfg.unet.clone(), sub_seed(cfg.seed, SEED_UNET_INIT))?;
    let vmax = inputs
        .iter()
        .flat_map(|i| i.velocity.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    model.velocity_scale = if vmax > 0.0 { 1.0 / vmax } else { 1.0 };

    let mut trainer = UNetTrainer::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SEED_UNET_TRAIN));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = String::new();
    for epoch in 0..cfg.unet.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.unet.batch_size) {
            let xs: Vec<UNetInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let ys: Vec<&VoxelGrid> = chunk.iter().map(|&i| targets[i].grid()).collect();
            total += trainer.train_step(&xs, &ys, cfg.unet.lr)?;
            batches += 1;
        }
        append_log(&mut log, epoch, total / batches as f64, cfg.unet.lr);
    }
    let ckpt = ablation.unet_checkpoint();
    trainer.model.save(&stage.output(&ckpt))?;
    let log_name = format!("train-unet{}.jsonl", ablation.suffix());
    fs::write(stage.output(&log_name), log).map_err(|e| Error::io(dir.join(&log_name), e))?;
    stage.finish(json!({ "samples": inputs.len(), "ablation": ablation.to_string() }))
}

/// Initial rollout state at the last training frame, built from the
/// smoothed tracks and the true interface history.
pub fn initial_state(data: &RunData, cfg: &RunConfig, gns: &GnsModel, history: usize) -> Result<RolloutState> {
    let t0 = data.train_frames - 1;
    let f = cfg.rollout.pool.factor;
    RolloutState::new(
        t0 as i64,
        data.positions[t0 - 1].clone(),
        data.positions[t0].clone(),
        data.history(t0),
        (0..history).map(|k| data.coarse(t0 + 1 - history + k, f)).collect::<Result<_>>()?,
        data.geometry.clone(),
        gns,
        &cfg.rollout,
    )
}

fn rollout_dir(ablation: Ablation) -> String {
    format!("rollout{}", ablation.suffix())
}

/// Loads both models for an ablation and runs the held-out rollout.
pub fn run_rollout(cfg: &RunConfig, data: &RunData, gns: &GnsModel, unet: &UNetModel, steps: usize) -> Result<Vec<StepOutput>> {
    let state = initial_state(data, cfg, gns, unet.config.history)?;
    Ok(rollout(state, gns, unet, &cfg.rollout, steps)?.1)
}

/// `rollout`: autoregressive prediction over the held-out frames.
pub fn rollout_stage(cfg: &RunConfig, dir: &Path, steps: Option<usize>, ablation: Ablation) -> Result<Manifest> {
    let mut stage = Stage::new(format!("rollout{}", ablation.suffix()), cfg, dir)?;
    let data = RunData::load(&mut stage, cfg)?;
    let gns = GnsModel::load(&stage.input(&ablation.gns_checkpoint())?)?;
    let unet = UNetModel::load(&stage.input(&ablation.unet_checkpoint())?)?;
    let steps = steps.unwrap_or(cfg.rollout.steps);
    let outs = run_rollout(cfg, &data, &gns, &unet, steps)?;

    let sub = rollout_dir(ablation);
    fs::create_dir_all(dir.join(&sub)).map_err(|e| Error::io(dir.join(&sub), e))?;
    let tracks: Vec<Trajectory> = (0..outs[0].positions.len())
        .map(|i| Trajectory {
            particle_id: i as u64,
            frames: outs
                .iter()
                .map(|o| TrackPoint {
                    frame: o.frame,
                    position: o.positions[i],
                    velocity: Some(o.velocities[i]),
                })
                .collect(),
        })
        .collect();
    write_trajectories(&stage.output(&format!("{sub}/tracks.csv")), &tracks)?;
    let interfaces: Vec<OccupancyField> = outs.iter().map(|o| o.interface.clone()).collect();
    write_vgrid(&stage.output(&format!("{sub}/occupancy.vgrid")), &frames_to_grid(&interfaces)?)?;
    let times: Vec<f64> = outs.iter().map(|o| o.elapsed.as_secs_f64()).collect();
    write_json(&dir.join(format!("{sub}/step_times.json")), &times)?;
    stage.finish(json!({
        "steps": steps,
        "first_frame": outs[0].frame,
        "ablation": ablation.to_string(),
        "gns_checkpoint": ablation.gns_checkpoint(),
        "unet_checkpoint": ablation.unet_checkpoint(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpWindowReport {
    pub frames: Vec<usize>,
    pub dice_teacher_forced: Option<f64>,
    pub dice_rollout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ablation: Ablation,
    pub config_hash: String,
    pub train_frames: usize,
    pub evaluated_frames: Vec<usize>,
    pub trajectory_r2: f64,
    pub dice_mean: f64,
    pub volume_rel_err_mean: f64,
    pub surface_rel_err_mean: f64,
    pub in_pore_fraction: f64,
    pub out_of_pore_rate: f64,
    pub particle_velocity: VelocityMetrics,
    pub flow_mae: f64,
    pub jump_window: JumpWindowReport,
}

pub fn report_name(ablation: Ablation) -> String {
    format!("metrics{}.json", ablation.suffix())
}

/// Target frames inside the held-out range that fall in a jump window.
pub fn jump_window_frames(jumps: &[usize], train_frames: usize, frames: usize, window: usize) -> Vec<usize> {
    let mut out: Vec<usize> = jumps
        .iter()
        .flat_map(|&j| j..=j + window)
        .filter(|&t| t >= train_frames && t < frames)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// `eval`: compares a rollout against the generated truth.
pub fn eval(cfg: &RunConfig, dir: &Path, ablation: Ablation) -> Result<EvalReport> {
    let mut stage = Stage::new(format!("eval{}", ablation.suffix()), cfg, dir)?;
    let data = RunData::load(&mut stage, cfg)?;
    let f = cfg.rollout.pool.factor;
    let sub = rollout_dir(ablation);
    let pred_tracks = read_trajectories(&stage.input(&format!("{sub}/tracks.csv"))?)?;
    let pred_occ = grid_to_frames(&read_vgrid(&stage.input(&format!("{sub}/occupancy.vgrid"))?)?)?;
    let truth_tracks = read_trajectories(&stage.input(TRUE_TRACKS_FILE)?)?;
    let truth_pos = positions_by_frame(&truth_tracks)?;
    let truth_vel = central_velocities(&truth_pos);
    let base = read_vgrid(&stage.input(BASE_VELOCITY_FILE)?)?;
    let record: ScenarioRecord = read_json(&stage.input(SCENARIO_FILE)?)?;
    let unet = UNetModel::load(&stage.input(&ablation.unet_checkpoint())?)?;

    if pred_tracks.len() != truth_tracks.len() {
        return Err(Error::Input("rollout and truth disagree on particle count".into()));
    }
    let frames_pred: Vec<i64> = pred_tracks[0].frames.iter().map(|p| p.frame).collect();
    let mut evaluated = Vec::new();
    let (mut p_all, mut q_all, mut v_all, mut w_all) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut dice_sum, mut vol_sum, mut surf_sum, mut flow_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut inside = 0usize;
    let mut total = 0usize;
    let mut rollout_dice = BTreeMap::new();
    for (k, &frame) in frames_pred.iter().enumerate() {
        let t = frame as usize;
        if frame < 0 || t >= truth_pos.len() {
            continue;
        }
        evaluated.push(t);
        let pos: Vec<Vec3> = pred_tracks.iter().map(|tr| tr.frames[k].position).collect();
        let vel: Vec<Vec3> = pred_tracks.iter().map(|tr| tr.frames[k].velocity.unwrap_or([0.0; 3])).collect();
        p_all.extend_from_slice(&pos);
        q_all.extend_from_slice(&truth_pos[t]);
        // velocities emitted at frame t were predicted at frame t - 1
        v_all.extend_from_slice(&vel);
        w_all.extend_from_slice(&truth_vel[t - 1]);
        inside += pos.iter().filter(|p| data.geometry.contains_point(**p)).count();
        total += pos.len();

        let truth_occ = data.coarse(t, f)?;
        let m = interface_metrics(&pred_occ[k], &truth_occ)?;
        dice_sum += m.dice;
        vol_sum += m.volume_rel_err;
        surf_sum += m.surface_rel_err;
        rollout_dice.insert(t, m.dice);

        let mut truth_field = base.clone();
        let mult = record.multipliers[t - 1];
        truth_field.data_mut().iter_mut().for_each(|x| *x *= mult);
        let recon = crate::coupling::reconstruct_flow(&pos, &vel, &data.geometry, &cfg.rollout.reconstruction)?;
        flow_sum += velocity_mae(&recon, &truth_field, &data.geometry)?;
    }
    if evaluated.is_empty() {
        return Err(Error::InsufficientData("rollout has no frames with ground truth".into()));
    }
    let n = evaluated.len() as f64;

    let window = jump_window_frames(&record.jump_frames, data.train_frames, data.positions.len(), cfg.eval.jump_window);
    let mut tf = Vec::new();
    for &t in &window {
        if t < unet.config.history + 1 {
            continue;
        }
        let pred = unet.predict(&data.unet_input(cfg, t - 1, unet.config.history)?)?;
        tf.push(interface_metrics(&pred, &data.coarse(t, f)?)?.dice);
    }
    let ro: Vec<f64> = window.iter().filter_map(|t| rollout_dice.get(t).copied()).collect();
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };

    let report = EvalReport {
        ablation,
        config_hash: cfg.hash(),
        train_frames: data.train_frames,
        evaluated_frames: evaluated,
        trajectory_r2: trajectory_r2(&p_all, &q_all)?,
        dice_mean: dice_sum / n,
        volume_rel_err_mean: vol_sum / n,
        surface_rel_err_mean: surf_sum / n,
        in_pore_fraction: inside as f64 / total as f64,
        out_of_pore_rate: 1.0 - inside as f64 / total as f64,
        particle_velocity: nrmse_p99(&v_all, &w_all)?,
        flow_mae: flow_sum / n,
        jump_window: JumpWindowReport {
            frames: window,
            dice_teacher_forced: mean(&tf),
            dice_rollout: mean(&ro),
        },
    };
    let name = report_name(ablation);
    write_json(&stage.output(&name), &report)?;
    stage.finish(json!({ "report": name }))?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub full_out_of_pore_rate: f64,
    pub no_geometry_out_of_pore_rate: f64,
    pub full_jump_dice: Option<f64>,
    pub no_velocity_jump_dice: Option<f64>,
    pub geometry_reduces_trespassing: bool,
    pub velocity_improves_jump_dice: bool,
}

/// `ablate`: retrains each stripped variant, rolls it out and compares
/// its report with the full model's.
pub fn ablate(cfg: &RunConfig, dir: &Path, steps: Option<usize>) -> Result<AblationSummary> {
    let full_path = dir.join(report_name(Ablation::None));
    let full: EvalReport = if full_path.is_file() {
        read_json(&full_path)?
    } else {
        rollout_stage(cfg, dir, steps, Ablation::None)?;
        eval(cfg, dir, Ablation::None)?
    };
    let mut reports = Vec::new();
    for ab in [Ablation::NoGeometry, Ablation::NoVelocity] {
        match ab {
            Ablation::NoGeometry => train_gns(cfg, dir, ab)?,
            _ => train_unet(cfg, dir, ab)?,
        };
        rollout_stage(cfg, dir, steps, ab)?;
        reports.push(eval(cfg, dir, ab)?);
    }
    let no_geo = &reports[0];
    let no_vel = &reports[1];
    let summary = AblationSummary {
        full_out_of_pore_rate: full.out_of_pore_rate,
        no_geometry_out_of_pore_rate: no_geo.out_of_pore_rate,
        full_jump_dice: full.jump_window.dice_teacher_forced,
        no_velocity_jump_dice: no_vel.jump_window.dice_teacher_forced,
        geometry_reduces_trespassing: no_geo.out_of_pore_rate > full.out_of_pore_rate,
        velocity_improves_jump_dice: match (no_vel.jump_window.dice_teacher_forced, full.jump_window.dice_teacher_forced) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        },
    };
    write_json(&dir.join("ablation.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_json(r#"{"seed": 3, "eval": {"jump_window": 1, "train_fraction": 0.75}}"#).unwrap();
        let b = RunConfig::from_json(r#"{"eval": {"train_fraction": 0.75, "jump_window": 1}, "seed": 3}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig::from_json(r#"{"seed": 4}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 3}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"gns": {"hiden": 3}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"eval": {"train_fraction": 1.5}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn default_training_schedule() {
        let c = RunConfig::default();
        assert_eq!(c.gns.lr, 5e-5);
        assert_eq!(c.gns.weight_decay, 5e-4);
        assert_eq!(c.gns.t_max, 200);
        assert_eq!(c.gns.epochs, 600);
        assert_eq!(c.unet.epochs, 100);
        assert_eq!(c.unet.batch_size, 2);
        assert_eq!(c.unet.lr, 1e-3);
        assert_eq!(c.gns.radius, 32.0);
        assert_eq!(c.gns.max_neighbors, 64);
        assert_eq!(c.rollout.pool.factor, 8);
        assert_eq!(c.train_frames(80), 60);
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v: Value = serde_json::from_str(r#"{"b": [ {"d": 1, "c": 2} ], "a": "x"}"#).unwrap();
        assert_eq!(canonical_json(&v), r#"{"a":"x","b":[{"c":2,"d":1}]}"#);
    }

    #[test]
    fn central_differences() {
        let p = vec![vec![[0.0; 3]], vec![[1.0, 0.0, 0.0]], vec![[4.0, 0.0, 0.0]]];
        let v = central_velocities(&p);
        assert_eq!(v[0][0], [1.0, 0.0, 0.0]);
        assert_eq!(v[1][0], [2.0, 0.0, 0.0]);
        assert_eq!(v[2][0], [3.0, 0.0, 0.0]);
    }

    #[test]
    fn jump_window_limits_to_test_range() {
        assert_eq!(jump_window_frames(&[15, 35, 70], 60, 80, 2), vec![70, 71, 72]);
        assert_eq!(jump_window_frames(&[59, 79], 60, 80, 2), vec![60, 61, 79]);
        assert!(jump_window_frames(&[10], 60, 80, 2).is_empty());
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(sub_seed(0, 1), sub_seed(0, 2));
        assert_ne!(sub_seed(0, 1), sub_seed(1, 1));
        assert_eq!(sub_seed(5, 3), sub_seed(5, 3));
    }
}
