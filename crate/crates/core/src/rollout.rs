//! Coupled autoregressive advancement of particles and interface.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coupling::{maxabs_pool, reconstruct_flow, PoolConfig, ReconstructionConfig};
use crate::error::{Error, Result};
use crate::gns::{update_positions, GnsModel};
use crate::graph::{FlowGraph, HISTORY_STEPS};
use crate::grids::{OccupancyField, Vec3, VoxelGrid};
use crate::unet::{UNetInput, UNetModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub steps: usize,
    pub pool: PoolConfig,
    pub reconstruction: ReconstructionConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            pool: PoolConfig::default(),
            reconstruction: ReconstructionConfig::default(),
        }
    }
}

/// Per-particle velocity model. `frame` is the frame whose velocity is
/// requested; learned models ignore it.
pub trait VelocityPredictor {
    fn radius(&self) -> f64;
    fn max_neighbors(&self) -> usize;
    fn predict_velocities(
        &self,
        graph: &FlowGraph,
        geometry: &OccupancyField,
        interface: &OccupancyField,
        frame: i64,
    ) -> Result<Vec<Vec3>>;
}

/// Coarse-grid interface model. `frame` is the frame being predicted.
pub trait InterfacePredictor {
    fn history_len(&self) -> usize;
    fn predict_interface(&self, input: &UNetInput, frame: i64) -> Result<OccupancyField>;
}

impl VelocityPredictor for GnsModel {
    fn radius(&self) -> f64 {
        self.config.radius
    }
    fn max_neighbors(&self) -> usize {
        self.config.max_neighbors
    }
    fn predict_velocities(
        &self,
        graph: &FlowGraph,
        geometry: &OccupancyField,
        interface: &OccupancyField,
        _frame: i64,
    ) -> Result<Vec<Vec3>> {
        self.predict(graph, geometry, interface)
    }
}

impl InterfacePredictor for UNetModel {
    fn history_len(&self) -> usize {
        self.config.history
    }
    fn predict_interface(&self, input: &UNetInput, _frame: i64) -> Result<OccupancyField> {
        self.predict(input)
    }
}

/// Velocity channels seen by the interface model: particle velocities
/// splatted at `positions`, then max-abs pooled to the coarse grid.
pub fn coarse_velocity(
    positions: &[Vec3],
    velocities: &[Vec3],
    geometry: &OccupancyField,
    cfg: &RolloutConfig,
) -> Result<VoxelGrid> {
    let field = reconstruct_flow(positions, velocities, geometry, &cfg.reconstruction)?;
    maxabs_pool(&field, &cfg.pool)
}

#[derive(Debug, Clone)]
pub struct RolloutState {
    pub frame: i64,
    pub step: usize,
    pub prev: Vec<Vec3>,
    pub cur: Vec<Vec3>,
    /// Most recent first.
    pub velocity_history: VecDeque<Vec<Vec3>>,
    /// Coarse fields, oldest first.
    pub interface_history: VecDeque<OccupancyField>,
    pub geometry: OccupancyField,
    pub coarse_geometry: OccupancyField,
    /// Set for particles that were ever clamped back into the domain.
    pub clamped: Vec<bool>,
    pub graph: FlowGraph,
}

impl RolloutState {
    /// `velocity_history` is most recent first, `interface_history`
    /// (coarse) oldest first.
    pub fn new(
        frame: i64,
        prev: Vec<Vec3>,
        cur: Vec<Vec3>,
        velocity_history: Vec<Vec<Vec3>>,
        interface_history: Vec<OccupancyField>,
        geometry: OccupancyField,
        gns: &dyn VelocityPredictor,
        cfg: &RolloutConfig,
    ) -> Result<Self> {
        if velocity_history.len() != HISTORY_STEPS {
            return Err(Error::Shape(format!(
                "velocity history needs {HISTORY_STEPS} frames, got {}",
                velocity_history.len()
            )));
        }
        let coarse_geometry = geometry.downsample_majority(cfg.pool.factor)?;
        if interface_history.is_empty() || interface_history.iter().any(|s| s.dims() != coarse_geometry.dims()) {
            return Err(Error::Shape("interface history must be non-empty and on the coarse grid".into()));
        }
        if cur.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite initial positions".into()));
        }
        let graph = FlowGraph::build(&prev, &cur, &velocity_history, gns.radius(), gns.max_neighbors())?;
        let n = cur.len();
        Ok(Self {
            frame,
            step: 0,
            prev,
            cur,
            velocity_history: velocity_history.into(),
            interface_history: interface_history.into(),
            geometry,
            coarse_geometry,
            clamped: vec![false; n],
            graph,
        })
    }

    pub fn interface(&self) -> &OccupancyField {
        self.interface_history.back().expect("history is never empty")
    }

    /// Fraction of particles whose voxel is pore space.
    pub fn in_pore_fraction(&self) -> f64 {
        in_pore_fraction(&self.cur, &self.geometry)
    }
}

pub fn in_pore_fraction(positions: &[Vec3], geometry: &OccupancyField) -> f64 {
    if positions.is_empty() {
        return 1.0;
    }
    let inside = positions.iter().filter(|p| geometry.contains_point(**p)).count();
    inside as f64 / positions.len() as f64
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Frame of `positions` and `interface`.
    pub frame: i64,
    pub positions: Vec<Vec3>,
    /// Velocities predicted at the previous frame.
    pub velocities: Vec<Vec3>,
    pub interface: OccupancyField,
    pub elapsed: Duration,
}

fn clamp(p: Vec3, dims: [usize; 3]) -> (Vec3, bool) {
    let mut out = p;
    let mut hit = false;
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        let v = if out[a].is_nan() { 0.0 } else { out[a].clamp(0.0, hi) };
        if v != out[a] {
            hit = true;
        }
        out[a] = v;
    }
    (out, hit)
}

/// Advances one frame. The input state is untouched; on error nothing
/// is committed.
pub fn rollout_step(
    state: &RolloutState,
    gns: &dyn VelocityPredictor,
    unet: &dyn InterfacePredictor,
    cfg: &RolloutConfig,
) -> Result<(RolloutState, StepOutput)> {
    let start = Instant::now();
    let dims = state.geometry.dims();
    let fine_interface = state.interface().upsample_nearest(cfg.pool.factor, dims);
    let v_hat = gns.predict_velocities(&state.graph, &state.geometry, &fine_interface, state.frame)?;
    if v_hat.len() != state.cur.len() {
        return Err(Error::Shape("velocity model returned the wrong particle count".into()));
    }

    let raw = update_positions(&state.prev, &v_hat)?;
    let mut clamped = state.clamped.clone();
    let next: Vec<Vec3> = raw
        .into_iter()
        .zip(clamped.iter_mut())
        .map(|(p, flag)| {
            let (q, hit) = clamp(p, dims);
            *flag |= hit;
            q
        })
        .collect();

    let mut velocity_history = state.velocity_history.clone();
    velocity_history.push_front(v_hat.clone());
    velocity_history.pop_back();

    let hist: Vec<Vec<Vec3>> = velocity_history.iter().cloned().collect();
    let graph = FlowGraph::build(&state.cur, &next, &hist, gns.radius(), gns.max_neighbors())?;

    let velocity = coarse_velocity(&next, &v_hat, &state.geometry, cfg)?;
    let n_in = unet.history_len();
    if state.interface_history.len() < n_in {
        return Err(Error::Shape(format!(
            "interface model wants {n_in} fields, state holds {}",
            state.interface_history.len()
        )));
    }
    let input = UNetInput {
        history: state.interface_history.iter().skip(state.interface_history.len() - n_in).cloned().collect(),
        velocity,
        geometry: state.coarse_geometry.clone(),
    };
    let s_next = unet.predict_interface(&input, state.frame + 1)?;
    if s_next.dims() != state.coarse_geometry.dims() {
        return Err(Error::Shape("interface model returned the wrong grid".into()));
    }

    let mut interface_history = state.interface_history.clone();
    interface_history.push_back(s_next.clone());
    interface_history.pop_front();

    let new_state = RolloutState {
        frame: state.frame + 1,
        step: state.step + 1,
        prev: state.cur.clone(),
        cur: next.clone(),
        velocity_history,
        interface_history,
        geometry: state.geometry.clone(),
        coarse_geometry: state.coarse_geometry.clone(),
        clamped,
        graph,
    };
    let out = StepOutput {
        frame: new_state.frame,
        positions: next,
        velocities: v_hat,
        interface: s_next,
        elapsed: start.elapsed(),
    };
    Ok((new_state, out))
}

/// Runs `steps` steps and returns the final state and every emitted frame.
pub fn rollout(
    state: RolloutState,
    gns: &dyn VelocityPredictor,
    unet: &dyn InterfacePredictor,
    cfg: &RolloutConfig,
    steps: usize,
) -> Result<(RolloutState, Vec<StepOutput>)> {
    if steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let mut state = state;
    let mut outputs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, out) = rollout_step(&state, gns, unet, cfg)?;
        state = next;
        outputs.push(out);
    }
    Ok((state, outputs))
}
