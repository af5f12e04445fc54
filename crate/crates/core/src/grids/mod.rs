//! Dense voxel grids, binary occupancy fields and tracer trajectories.
//!
//! Voxel `(x, y, z)` has its center at the integer coordinate `(x, y, z)`;
//! continuous positions are expressed in the same voxel units. Storage is
//! channel-major, then z slowest and x fastest.

mod io;

pub use io::{read_trajectories, read_vgrid, write_trajectories, write_vgrid};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    channels: usize,
    data: Vec<f64>,
    spacing: f64,
}

impl VoxelGrid {
    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self::filled(dims, channels, 0.0)
    }

    pub fn filled(dims: [usize; 3], channels: usize, value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0) && channels > 0, "empty grid");
        Self {
            dims,
            channels,
            data: vec![value; channels * dims[0] * dims[1] * dims[2]],
            spacing: 1.0,
        }
    }

    pub fn from_vec(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(Error::Shape(format!(
                "grid dims {dims:?} x {channels} channels must be positive"
            )));
        }
        let expected = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "grid data has {} values, dims {dims:?} x {channels} need {expected}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite grid value {bad}")));
        }
        Ok(Self {
            dims,
            channels,
            data,
            spacing: 1.0,
        })
    }

    /// Builds a one-channel grid by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut grid = Self::zeros(dims, 1);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let i = grid.index(0, x, y, z);
                    grid.data[i] = f(x, y, z);
                }
            }
        }
        grid
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxel_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(c, x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, value: f64) {
        let i = self.index(c, x, y, z);
        self.data[i] = value;
    }

    /// Voxel whose center is nearest to `point`, or `None` outside the grid.
    pub fn voxel_of(&self, point: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = (point[a] + 0.5).floor();
            if !v.is_finite() || v < 0.0 || v >= self.dims[a] as f64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    /// Stacks single-channel grids of identical dims into one multi-channel grid.
    pub fn stack(parts: &[&VoxelGrid]) -> Result<VoxelGrid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero grids".into()))?;
        let mut data = Vec::with_capacity(parts.len() * first.data.len());
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                return Err(Error::Shape(format!(
                    "stack dims {:?} vs {:?}",
                    p.dims, first.dims
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(VoxelGrid {
            dims: first.dims,
            channels,
            data,
            spacing: first.spacing,
        })
    }

    pub fn select_channel(&self, c: usize) -> VoxelGrid {
        VoxelGrid {
            dims: self.dims,
            channels: 1,
            data: self.channel(c).to_vec(),
            spacing: self.spacing,
        }
    }
}

/// Binary one-channel field: 1 marks the phase of interest (pore space for
/// geometry masks, non-wetting fluid for interface fields).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyField(VoxelGrid);

impl OccupancyField {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if grid.channels != 1 {
            return Err(Error::Shape(format!(
                "occupancy field needs 1 channel, got {}",
                grid.channels
            )));
        }
        if let Some(v) = grid.data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Input(format!("occupancy value {v} is not binary")));
        }
        Ok(Self(grid))
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self(VoxelGrid::zeros(dims, 1))
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self(VoxelGrid::filled(dims, 1, 1.0))
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        Self(VoxelGrid::from_fn(dims, |x, y, z| {
            if f(x, y, z) {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn from_bools(dims: [usize; 3], values: &[bool]) -> Result<Self> {
        VoxelGrid::from_vec(
            dims,
            1,
            values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .map(Self)
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0.dims
    }

    #[inline]
    pub fn is_set(&self, x: usize, y: usize, z: usize) -> bool {
        self.0.get(0, x, y, z) != 0.0
    }

    #[inline]
    pub fn is_set_linear(&self, i: usize) -> bool {
        self.0.data[i] != 0.0
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.0.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, on: bool) {
        self.0.set(0, x, y, z, if on { 1.0 } else { 0.0 });
    }

    /// Whether the voxel nearest to `point` is set; points outside the grid are not.
    pub fn contains_point(&self, point: Vec3) -> bool {
        self.0
            .voxel_of(point)
            .map(|[x, y, z]| self.is_set(x, y, z))
            .unwrap_or(false)
    }

    /// Block-majority downsampling by `factor`: a coarse voxel is set when at
    /// least half of its (zero-padded) `factor³` block is set.
    pub fn downsample_majority(&self, factor: usize) -> Result<OccupancyField> {
        if factor == 0 {
            return Err(Error::Config("downsampling factor must be positive".into()));
        }
        let d = self.dims();
        let out_dims = [
            d[0].div_ceil(factor),
            d[1].div_ceil(factor),
            d[2].div_ceil(factor),
        ];
        let block = (factor * factor * factor) as f64;
        let mut out = OccupancyField::empty(out_dims);
        for oz in 0..out_dims[2] {
            for oy in 0..out_dims[1] {
                for ox in 0..out_dims[0] {
                    let mut count = 0usize;
                    for z in oz * factor..((oz + 1) * factor).min(d[2]) {
                        for y in oy * factor..((oy + 1) * factor).min(d[1]) {
                            for x in ox * factor..((ox + 1) * factor).min(d[0]) {
                                count += self.is_set(x, y, z) as usize;
                            }
                        }
                    }
                    out.set(ox, oy, oz, 2.0 * count as f64 >= block);
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour upsampling by `factor`, cropped to `dims`.
    pub fn upsample_nearest(&self, factor: usize, dims: [usize; 3]) -> OccupancyField {
        let src = self.dims();
        OccupancyField::from_fn(dims, |x, y, z| {
            let (cx, cy, cz) = (x / factor, y / factor, z / factor);
            cx < src[0] && cy < src[1] && cz < src[2] && self.is_set(cx, cy, cz)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub frame: i64,
    pub position: Vec3,
    pub velocity: Option<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub particle_id: u64,
    pub frames: Vec<TrackPoint>,
}

impl Trajectory {
    pub fn new(particle_id: u64, frames: Vec<TrackPoint>) -> Result<Self> {
        let t = Self {
            particle_id,
            frames,
        };
        t.check_order()?;
        Ok(t)
    }

    pub fn check_order(&self) -> Result<()> {
        for w in self.frames.windows(2) {
            if w[1].frame <= w[0].frame {
                return Err(Error::Input(format!(
                    "particle {}: frame indices not strictly increasing ({} then {})",
                    self.particle_id, w[0].frame, w[1].frame
                )));
            }
        }
        Ok(())
    }

    /// Checks every position against the extent `[0, dims)` of a grid.
    pub fn validate_against(&self, dims: [usize; 3]) -> Result<()> {
        for p in &self.frames {
            for a in 0..3 {
                let v = p.position[a];
                if !v.is_finite() || v < 0.0 || v >= dims[a] as f64 {
                    return Err(Error::Domain(format!(
                        "particle {} frame {}: position {:?} outside {:?}",
                        self.particle_id, p.frame, p.position, dims
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Trilinear interpolation of `channel` at a continuous voxel-space point.
pub fn trilinear_sample(grid: &VoxelGrid, point: Vec3, channel: usize) -> Result<f64> {
    if channel >= grid.channels {
        return Err(Error::Domain(format!(
            "channel {channel} out of range for {} channels",
            grid.channels
        )));
    }
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let v = point[a];
        let max = (grid.dims[a] - 1) as f64;
        if !v.is_finite() || v < 0.0 || v > max {
            return Err(Error::Domain(format!(
                "point {point:?} outside sampling range [0, {max}] on axis {a}"
            )));
        }
        let f = v.floor();
        lo[a] = f as usize;
        hi[a] = (lo[a] + 1).min(grid.dims[a] - 1);
        frac[a] = v - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> a & 1 == 1;
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if pick(a) {
                w *= frac[a];
                idx[a] = hi[a];
            } else {
                w *= 1.0 - frac[a];
                idx[a] = lo[a];
            }
        }
        if w != 0.0 {
            acc += w * grid.get(channel, idx[0], idx[1], idx[2]);
        }
    }
    Ok(acc)
}

/// Extracts a `size³` patch of every channel around the voxel containing
/// `center`. Voxels outside the grid read as zero.
pub fn extract_patch(grid: &VoxelGrid, center: Vec3, size: usize) -> VoxelGrid {
    assert!(size > 0, "patch size must be positive");
    let mut patch = VoxelGrid::zeros([size; 3], grid.channels);
    let half = (size / 2) as i64;
    let mut origin = [0i64; 3];
    for a in 0..3 {
        origin[a] = (center[a] + 0.5).floor() as i64 - half;
    }
    let d = grid.dims;
    for c in 0..grid.channels {
        for pz in 0..size {
            let z = origin[2] + pz as i64;
            if z < 0 || z >= d[2] as i64 {
                continue;
            }
            for py in 0..size {
                let y = origin[1] + py as i64;
                if y < 0 || y >= d[1] as i64 {
                    continue;
                }
                let x0 = origin[0].max(0);
                let x1 = (origin[0] + size as i64).min(d[0] as i64);
                if x0 >= x1 {
                    continue;
                }
                let src = grid.index(c, x0 as usize, y as usize, z as usize);
                let dst = patch.index(c, (x0 - origin[0]) as usize, py, pz);
                let n = (x1 - x0) as usize;
                patch.data[dst..dst + n].copy_from_slice(&grid.data[src..src + n]);
            }
        }
    }
    patch
}

/// Zeroes every channel of `field` on solid voxels of `geometry`.
pub fn apply_pore_mask(field: &VoxelGrid, geometry: &OccupancyField) -> Result<VoxelGrid> {
    if field.dims != geometry.dims() {
        return Err(Error::Shape(format!(
            "field dims {:?} vs geometry dims {:?}",
            field.dims,
            geometry.dims()
        )));
    }
    let mut out = field.clone();
    let n = field.voxel_count();
    let mask = geometry.grid().data();
    for c in 0..field.channels {
        for (v, &m) in out.data[c * n..(c + 1) * n].iter_mut().zip(mask) {
            if m == 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
