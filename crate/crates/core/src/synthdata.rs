//! Seeded drainage-like scenarios: sphere-pack geometry, an advancing
//! perturbed front with jump events, potential flow through the pore space
//! and RK2-advected tracers.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{trilinear_sample, OccupancyField, TrackPoint, Trajectory, Vec3, VoxelGrid};

const PLACEMENT_RETRIES: usize = 100;
const GRAIN_TRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpEvent {
    /// The front reaches its jumped position at this frame.
    pub frame: usize,
    /// Extra front translation, in voxels.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub dims: [usize; 3],
    pub grains: usize,
    pub radius_range: [f64; 2],
    /// Allowed overlap between grains as a fraction of the radius sum.
    pub max_overlap: f64,
    /// Explicit grains; when non-empty these replace the random pack.
    pub spheres: Vec<Sphere>,
    pub porosity_band: [f64; 2],
    pub inlet_axis: usize,
    pub frames: usize,
    pub tracers: usize,
    /// Tracers start in the first `tracer_extent` fraction of the inlet axis.
    pub tracer_extent: f64,
    /// Tracers keep at least this many voxels (Chebyshev) between their
    /// voxel and any grain voxel, standing in for their finite radius.
    pub tracer_clearance: usize,
    /// Front position at frame 0 as a fraction of the inlet-axis length.
    pub front_start: f64,
    /// Front advance per frame, in voxels.
    pub front_speed: f64,
    /// Amplitude of the transverse front perturbation, in voxels.
    pub front_amplitude: f64,
    pub jumps: Vec<JumpEvent>,
    /// Flow-speed multiplier during a jump interval.
    pub jump_velocity_factor: f64,
    /// RMS per-frame displacement of the base flow, in voxels.
    pub target_displacement: f64,
    /// Cap on the base-flow speed anywhere, in voxels per frame.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            grains: 120,
            radius_range: [4.0, 8.0],
            max_overlap: 0.3,
            spheres: Vec::new(),
            porosity_band: [0.1, 0.6],
            inlet_axis: 0,
            frames: 80,
            tracers: 200,
            tracer_extent: 1.0,
            tracer_clearance: 1,
            front_start: 0.1,
            front_speed: 0.3,
            front_amplitude: 1.5,
            jumps: vec![
                JumpEvent { frame: 15, magnitude: 3.0 },
                JumpEvent { frame: 35, magnitude: 3.0 },
                JumpEvent { frame: 55, magnitude: 3.0 },
                JumpEvent { frame: 70, magnitude: 3.0 },
            ],
            jump_velocity_factor: 8.0,
            target_displacement: 0.2,
            max_displacement: 0.9,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("dims {:?} must be at least 2", self.dims));
        }
        if self.inlet_axis > 2 {
            return bad(format!("inlet axis {} must be 0, 1 or 2", self.inlet_axis));
        }
        let [rmin, rmax] = self.radius_range;
        if !(rmin > 0.0 && rmax >= rmin) {
            return bad(format!("radius range {:?}", self.radius_range));
        }
        let [plo, phi] = self.porosity_band;
        if !(0.0..1.0).contains(&plo) || !(plo < phi && phi <= 1.0) {
            return bad(format!("porosity band {:?}", self.porosity_band));
        }
        if self.frames < 3 {
            return bad("scenario needs at least 3 frames".into());
        }
        if self.front_speed < 0.0 || self.jump_velocity_factor < 0.0 || self.target_displacement < 0.0 {
            return bad("speeds must be non-negative".into());
        }
        if !(self.max_displacement > 0.0) || !(self.tracer_extent > 0.0 && self.tracer_extent <= 1.0) {
            return bad("max displacement and tracer extent must be positive".into());
        }
        if self.jumps.iter().any(|j| j.frame == 0 || j.frame >= self.frames) {
            return bad("jump frames must lie in 1..frames".into());
        }
        Ok(())
    }

    fn is_jump_interval(&self, k: usize) -> bool {
        self.jumps.iter().any(|j| j.frame == k + 1)
    }

    /// Flow multiplier for the interval from frame `k` to `k + 1`.
    pub fn interval_multiplier(&self, k: usize) -> f64 {
        if self.is_jump_interval(k) {
            self.jump_velocity_factor
        } else if self.front_speed > 0.0 {
            1.0
        } else {
            0.0
        }
    }

    /// Mean front position along the inlet axis at frame `t`.
    pub fn front_position(&self, t: usize) -> f64 {
        let len = self.dims[self.inlet_axis] as f64;
        let jumped: f64 = self.jumps.iter().filter(|j| j.frame <= t).map(|j| j.magnitude).sum();
        self.front_start * len + self.front_speed * t as f64 + jumped
    }
}

fn voxelize(dims: [usize; 3], spheres: &[Sphere]) -> OccupancyField {
    OccupancyField::from_fn(dims, |x, y, z| {
        !spheres.iter().any(|s| {
            let d = [x as f64 - s.center[0], y as f64 - s.center[1], z as f64 - s.center[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= s.radius * s.radius
        })
    })
}

fn porosity(geo: &OccupancyField) -> f64 {
    geo.count() as f64 / geo.grid().voxel_count() as f64
}

fn neighbours(dims: [usize; 3], i: usize) -> impl Iterator<Item = (usize, usize, bool)> {
    let [nx, ny, _] = dims;
    let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
    let strides = [1, nx, nx * ny];
    (0..6).filter_map(move |k| {
        let axis = k / 2;
        let up = k % 2 == 1;
        if up && c[axis] + 1 < dims[axis] {
            Some((i + strides[axis], axis, true))
        } else if !up && c[axis] > 0 {
            Some((i - strides[axis], axis, false))
        } else {
            None
        }
    })
}

/// 6-connected flood fill through pore voxels from the given seeds.
fn flood(geo: &OccupancyField, seeds: impl Iterator<Item = usize>) -> Vec<bool> {
    let dims = geo.dims();
    let mut seen = vec![false; geo.grid().voxel_count()];
    let mut queue = VecDeque::new();
    for s in seeds {
        if geo.is_set_linear(s) && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        for (j, _, _) in neighbours(dims, i) {
            if !seen[j] && geo.is_set_linear(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn face_voxels(dims: [usize; 3], axis: usize, coord: usize) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if [x, y, z][axis] == coord {
                    out.push((z * ny + y) * nx + x);
                }
            }
        }
    }
    out
}

/// Whether pore space connects the inlet face to the outlet face.
pub fn connected_along(geo: &OccupancyField, axis: usize) -> bool {
    let dims = geo.dims();
    let reach = flood(geo, face_voxels(dims, axis, 0).into_iter());
    face_voxels(dims, axis, dims[axis] - 1).into_iter().any(|i| reach[i])
}

/// Pore voxels connected to the inlet or outlet face.
pub fn flow_domain(geo: &OccupancyField, axis: usize) -> Vec<bool> {
    let dims = geo.dims();
    let seeds = face_voxels(dims, axis, 0)
        .into_iter()
        .chain(face_voxels(dims, axis, dims[axis] - 1));
    flood(geo, seeds)
}

/// Solid grains as a boolean occupancy field where set means pore.
pub fn generate_geometry(cfg: &ScenarioConfig) -> Result<OccupancyField> {
    cfg.validate()?;
    let dims = cfg.dims;
    if !cfg.spheres.is_empty() {
        let geo = voxelize(dims, &cfg.spheres);
        if !connected_along(&geo, cfg.inlet_axis) {
            return Err(Error::Generation("explicit grains block the inlet axis".into()));
        }
        return Ok(geo);
    }
    if cfg.grains == 0 {
        return Ok(OccupancyField::full(dims));
    }
    let [rmin, rmax] = cfg.radius_range;
    let mut last = 0.0;
    for attempt in 0..PLACEMENT_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(attempt as u64));
        let mut placed: Vec<Sphere> = Vec::with_capacity(cfg.grains);
        for _ in 0..cfg.grains {
            for _ in 0..GRAIN_TRIES {
                let radius = rng.gen_range(rmin..=rmax);
                let center = [
                    rng.gen_range(0.0..dims[0] as f64),
                    rng.gen_range(0.0..dims[1] as f64),
                    rng.gen_range(0.0..dims[2] as f64),
                ];
                let fits = placed.iter().all(|s| {
                    let d2: f64 = (0..3).map(|a| (s.center[a] - center[a]).powi(2)).sum();
                    d2.sqrt() >= (1.0 - cfg.max_overlap) * (s.radius + radius)
                });
                if fits {
                    placed.push(Sphere { center, radius });
                    break;
                }
            }
        }
        let geo = voxelize(dims, &placed);
        last = porosity(&geo);
        let [lo, hi] = cfg.porosity_band;
        if last > lo && last < hi && connected_along(&geo, cfg.inlet_axis) {
            return Ok(geo);
        }
    }
    Err(Error::Generation(format!(
        "no connected pack with porosity in {:?} after {PLACEMENT_RETRIES} attempts (last {last:.3})",
        cfg.porosity_band
    )))
}

/// Face-centred fluxes of the base flow: `flux[axis][i]` is the flow across
/// the upper face of voxel `i` along `axis`; `inflow[i]` enters through the
/// lower domain face.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFluxes {
    pub dims: [usize; 3],
    pub axis: usize,
    pub upper: [Vec<f64>; 3],
    pub inflow: Vec<f64>,
}

impl FaceFluxes {
    /// Net outflow of every voxel.
    pub fn divergence(&self) -> Vec<f64> {
        let dims = self.dims;
        let strides = [1, dims[0], dims[0] * dims[1]];
        let n = self.inflow.len();
        (0..n)
            .map(|i| {
                let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
                let mut div = -self.inflow[i];
                for a in 0..3 {
                    div += self.upper[a][i];
                    if c[a] > 0 {
                        div -= self.upper[a][i - strides[a]];
                    }
                }
                div
            })
            .collect()
    }

    /// Cell-centred velocity as the average of opposite face fluxes.
    pub fn cell_velocity(&self) -> VoxelGrid {
        let dims = self.dims;
        let strides = [1, dims[0], dims[0] * dims[1]];
        let n = self.inflow.len();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            for a in 0..3 {
                let lower = if c[a] > 0 {
                    self.upper[a][i - strides[a]]
                } else if a == self.axis {
                    self.inflow[i]
                } else {
                    0.0
                };
                data[a * n + i] = 0.5 * (lower + self.upper[a][i]);
            }
        }
        VoxelGrid::from_vec(dims, 3, data).expect("sized from dims")
    }

    pub fn scale(&mut self, s: f64) {
        for u in self.upper.iter_mut() {
            u.iter_mut().for_each(|v| *v *= s);
        }
        self.inflow.iter_mut().for_each(|v| *v *= s);
    }
}

/// Potential flow through `domain` with φ = 1 beyond the inlet face and
/// φ = 0 beyond the outlet face, solved by Jacobi-preconditioned CG.
pub fn potential_flow(domain: &[bool], dims: [usize; 3], axis: usize) -> Result<FaceFluxes> {
    let n = domain.len();
    let c_of = |i: usize| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
    let last = dims[axis] - 1;
    let mut diag = vec![0.0; n];
    let mut b = vec![0.0; n];
    for i in 0..n {
        if !domain[i] {
            continue;
        }
        for (j, _, _) in neighbours(dims, i) {
            if domain[j] {
                diag[i] += 1.0;
            }
        }
        let c = c_of(i);
        if c[axis] == 0 {
            diag[i] += 1.0;
            b[i] += 1.0;
        }
        if c[axis] == last {
            diag[i] += 1.0;
        }
    }
    let apply = |x: &[f64], out: &mut [f64]| {
        for i in 0..n {
            if !domain[i] {
                out[i] = 0.0;
                continue;
            }
            let mut acc = diag[i] * x[i];
            for (j, _, _) in neighbours(dims, i) {
                if domain[j] {
                    acc -= x[j];
                }
            }
            out[i] = acc;
        }
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut phi = vec![0.0; n];
    let mut r = b.clone();
    let precond = |r: &[f64], z: &mut [f64]| {
        for i in 0..n {
            z[i] = if diag[i] > 0.0 { r[i] / diag[i] } else { 0.0 };
        }
    };
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = dot(&b, &b).sqrt();
    if b_norm == 0.0 {
        return Err(Error::Generation("flow domain does not touch the inlet".into()));
    }
    let mut ap = vec![0.0; n];
    let max_iter = 20 * n.max(100);
    let mut converged = false;
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            phi[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= 1e-12 * b_norm {
            converged = true;
            break;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if !converged {
        return Err(Error::Generation("potential solve did not converge".into()));
    }

    let mut upper = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut inflow = vec![0.0; n];
    for i in 0..n {
        if !domain[i] {
            continue;
        }
        for (j, a, up) in neighbours(dims, i) {
            if up && domain[j] {
                upper[a][i] = phi[i] - phi[j];
            }
        }
        let c = c_of(i);
        if c[axis] == 0 {
            inflow[i] = 1.0 - phi[i];
        }
        if c[axis] == last {
            upper[axis][i] = phi[i];
        }
    }
    Ok(FaceFluxes {
        dims,
        axis,
        upper,
        inflow,
    })
}

/// A generated scenario. Velocity at frame `t` is `base_velocity` times
/// `multipliers[t]`, the flow during the interval `t → t+1`.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub config: ScenarioConfig,
    pub geometry: OccupancyField,
    pub flow_domain: Vec<bool>,
    pub occupancy: Vec<OccupancyField>,
    pub base_fluxes: FaceFluxes,
    pub base_velocity: VoxelGrid,
    pub multipliers: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

impl Sequence {
    pub fn velocity(&self, t: usize) -> VoxelGrid {
        let mut v = self.base_velocity.clone();
        let m = self.multipliers[t];
        v.data_mut().iter_mut().for_each(|x| *x *= m);
        v
    }

    pub fn frames(&self) -> usize {
        self.occupancy.len()
    }

    pub fn jump_frames(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.config.jumps.iter().map(|j| j.frame).collect();
        f.sort_unstable();
        f
    }

    /// Positions of every tracer at frame `t`, in trajectory order.
    pub fn positions(&self, t: usize) -> Vec<Vec3> {
        self.trajectories.iter().map(|tr| tr.frames[t].position).collect()
    }

    pub fn velocities(&self, t: usize) -> Vec<Vec3> {
        self.trajectories
            .iter()
            .map(|tr| tr.frames[t].velocity.unwrap_or([0.0; 3]))
            .collect()
    }
}

struct FrontShape {
    modes: Vec<(f64, f64, f64, f64)>,
}

impl FrontShape {
    fn new(rng: &mut ChaCha8Rng, amplitude: f64) -> Self {
        let modes = (0..3)
            .map(|k| {
                let a = amplitude / (k as f64 + 1.0);
                let ku = rng.gen_range(1..=2) as f64;
                let kv = rng.gen_range(1..=2) as f64;
                (a, ku, kv, rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self { modes }
    }

    /// Front displacement at transverse fractional coordinates `(u, v)`.
    fn offset(&self, u: f64, v: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(a, ku, kv, ph)| a * (2.0 * PI * (ku * u + kv * v) + ph).sin())
            .sum()
    }
}

fn occupancy_at(cfg: &ScenarioConfig, geo: &OccupancyField, shape: &FrontShape, t: usize) -> OccupancyField {
    let axis = cfg.inlet_axis;
    let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
    let front = cfg.front_position(t);
    OccupancyField::from_fn(cfg.dims, |x, y, z| {
        let c = [x, y, z];
        let u = c[ua] as f64 / cfg.dims[ua] as f64;
        let v = c[va] as f64 / cfg.dims[va] as f64;
        geo.is_set(x, y, z) && (c[axis] as f64) < front + shape.offset(u, v)
    })
}

fn clamp_point(dims: [usize; 3], p: Vec3) -> Vec3 {
    [
        p[0].clamp(0.0, (dims[0] - 1) as f64),
        p[1].clamp(0.0, (dims[1] - 1) as f64),
        p[2].clamp(0.0, (dims[2] - 1) as f64),
    ]
}

fn sample_velocity(field: &VoxelGrid, p: Vec3) -> Vec3 {
    let mut v = [0.0; 3];
    for (c, out) in v.iter_mut().enumerate() {
        *out = trilinear_sample(field, p, c).expect("point clamped into the grid");
    }
    v
}

fn in_domain(domain: &[bool], dims: [usize; 3], p: Vec3) -> bool {
    let vox = [
        (p[0] + 0.5).floor() as usize,
        (p[1] + 0.5).floor() as usize,
        (p[2] + 0.5).floor() as usize,
    ];
    vox[0] < dims[0] && vox[1] < dims[1] && vox[2] < dims[2] && domain[(vox[2] * dims[1] + vox[1]) * dims[0] + vox[0]]
}

/// One RK2 (midpoint) step. A step that would leave the allowed domain
/// slides along the wall: blocked displacement components are dropped,
/// keeping the longest remaining move that stays inside.
pub fn advect(field: &VoxelGrid, domain: &[bool], p: Vec3, m: f64) -> Vec3 {
    let dims = field.dims();
    let k1 = sample_velocity(field, p);
    let mid = clamp_point(dims, [p[0] + 0.5 * m * k1[0], p[1] + 0.5 * m * k1[1], p[2] + 0.5 * m * k1[2]]);
    let k2 = sample_velocity(field, mid);
    let d = [m * k2[0], m * k2[1], m * k2[2]];
    let mut best: Option<(f64, Vec3)> = None;
    // masks are tried from most to fewest kept components
    for mask in [0b111u8, 0b011, 0b101, 0b110, 0b001, 0b010, 0b100] {
        let q = clamp_point(dims, [
            p[0] + if mask & 1 != 0 { d[0] } else { 0.0 },
            p[1] + if mask & 2 != 0 { d[1] } else { 0.0 },
            p[2] + if mask & 4 != 0 { d[2] } else { 0.0 },
        ]);
        if !in_domain(domain, dims, q) {
            continue;
        }
        let len = (0..3).map(|a| (q[a] - p[a]).powi(2)).sum::<f64>();
        if mask == 0b111 {
            return q;
        }
        if best.map_or(true, |(l, _)| len > l) {
            best = Some((len, q));
        }
    }
    best.map_or(p, |(_, q)| q)
}

/// Flow-domain voxels with no grain voxel within Chebyshev distance `r`.
pub fn clear_domain(geo: &OccupancyField, domain: &[bool], r: usize) -> Vec<bool> {
    let [nx, ny, nz] = geo.dims();
    let ri = r as isize;
    let mut out = domain.to_vec();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (z * ny + y) * nx + x;
                if !out[i] {
                    continue;
                }
                'scan: for dz in -ri..=ri {
                    for dy in -ri..=ri {
                        for dx in -ri..=ri {
                            let (a, b, c) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            if a < 0 || b < 0 || c < 0 || a >= nx as isize || b >= ny as isize || c >= nz as isize {
                                continue;
                            }
                            if !geo.is_set(a as usize, b as usize, c as usize) {
                                out[i] = false;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn generate_sequence(cfg: &ScenarioConfig) -> Result<Sequence> {
    let geometry = generate_geometry(cfg)?;
    let dims = cfg.dims;
    let axis = cfg.inlet_axis;
    let domain = flow_domain(&geometry, axis);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_F10E);

    let mut fluxes = potential_flow(&domain, dims, axis)?;
    let raw = fluxes.cell_velocity();
    let n = raw.voxel_count();
    let speeds: Vec<f64> = (0..n)
        .filter(|&i| domain[i])
        .map(|i| (0..3).map(|c| raw.data()[c * n + i].powi(2)).sum::<f64>().sqrt())
        .collect();
    let rms = (speeds.iter().map(|s| s * s).sum::<f64>() / speeds.len().max(1) as f64).sqrt();
    let max = speeds.iter().cloned().fold(0.0, f64::max);
    let scale = if rms > 0.0 {
        (cfg.target_displacement / rms).min(cfg.max_displacement / max)
    } else {
        0.0
    };
    fluxes.scale(scale);
    let base_velocity = fluxes.cell_velocity();

    let shape = FrontShape::new(&mut rng, cfg.front_amplitude);
    let occupancy: Vec<OccupancyField> = (0..cfg.frames).map(|t| occupancy_at(cfg, &geometry, &shape, t)).collect();
    let multipliers: Vec<f64> = (0..cfg.frames).map(|k| cfg.interval_multiplier(k)).collect();

    let extent = cfg.tracer_extent * dims[axis] as f64;
    let clear = clear_domain(&geometry, &domain, cfg.tracer_clearance);
    let seeds: Vec<usize> = (0..n)
        .filter(|&i| {
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            clear[i] && !occupancy[0].is_set_linear(i) && (c[axis] as f64) < extent
        })
        .collect();
    if seeds.is_empty() && cfg.tracers > 0 {
        return Err(Error::Generation("no wetting-phase pore voxels to seed tracers".into()));
    }
    let mut tracks: Vec<Vec<Vec3>> = (0..cfg.tracers)
        .map(|_| {
            let i = seeds[rng.gen_range(0..seeds.len())];
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            let p = [
                c[0] as f64 + rng.gen_range(-0.5..0.5),
                c[1] as f64 + rng.gen_range(-0.5..0.5),
                c[2] as f64 + rng.gen_range(-0.5..0.5),
            ];
            vec![clamp_point(dims, p)]
        })
        .collect();
    for k in 0..cfg.frames - 1 {
        let m = multipliers[k];
        for tr in tracks.iter_mut() {
            let p = *tr.last().expect("seeded");
            tr.push(if m == 0.0 { p } else { advect(&base_velocity, &clear, p, m) });
        }
    }

    let trajectories = tracks
        .into_iter()
        .enumerate()
        .map(|(id, ps)| {
            let last = ps.len() - 1;
            let frames = (0..ps.len())
                .map(|t| {
                    let (a, b, h) = match t {
                        0 => (0, 1, 1.0),
                        t if t == last => (last - 1, last, 1.0),
                        t => (t - 1, t + 1, 2.0),
                    };
                    TrackPoint {
                        frame: t as i64,
                        position: ps[t],
                        velocity: Some([
                            (ps[b][0] - ps[a][0]) / h,
                            (ps[b][1] - ps[a][1]) / h,
                            (ps[b][2] - ps[a][2]) / h,
                        ]),
                    }
                })
                .collect();
            Trajectory {
                particle_id: id as u64,
                frames,
            }
        })
        .collect();

    Ok(Sequence {
        config: cfg.clone(),
        geometry,
        flow_domain: domain,
        occupancy,
        base_fluxes: fluxes,
        base_velocity,
        multipliers,
        trajectories,
    })
}

/// Adds isotropic Gaussian noise to every tracer position and drops the
/// velocity columns, mimicking raw tracked positions.
pub fn observe(tracks: &[Trajectory], sigma: f64, seed: u64) -> Result<Vec<Trajectory>> {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise std {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tracks
        .iter()
        .map(|t| Trajectory {
            particle_id: t.particle_id,
            frames: t
                .frames
                .iter()
                .map(|p| TrackPoint {
                    frame: p.frame,
                    position: [
                        p.position[0] + noise.sample(&mut rng),
                        p.position[1] + noise.sample(&mut rng),
                        p.position[2] + noise.sample(&mut rng),
                    ],
                    velocity: None,
                })
                .collect(),
        })
        .collect())
}
