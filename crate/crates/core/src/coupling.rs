//! Exchange between the particle and voxel representations: scattered
//! velocities to grids, grids to per-particle patches.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{apply_pore_mask, extract_patch, OccupancyField, Vec3, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub factor: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { factor: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    /// Zero-velocity wall points per particle.
    pub boundary_ratio: f64,
    /// Dilation radius of the solid mask, in voxels.
    pub dilation_radius: usize,
    pub seed: u64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            boundary_ratio: 1.0,
            dilation_radius: 1,
            seed: 0,
        }
    }
}

/// Per-channel block pooling that keeps the block maximum when
/// `|max| >= |min|` and the minimum otherwise. Blocks are zero-padded.
pub fn maxabs_pool(field: &VoxelGrid, cfg: &PoolConfig) -> Result<VoxelGrid> {
    let f = cfg.factor;
    if f == 0 {
        return Err(Error::Config("pooling factor must be positive".into()));
    }
    let [nx, ny, nz] = field.dims();
    let od = [nx.div_ceil(f), ny.div_ceil(f), nz.div_ceil(f)];
    let ovol = od[0] * od[1] * od[2];
    let channels: Vec<Vec<f64>> = (0..field.channels())
        .into_par_iter()
        .map(|c| {
            let src = field.channel(c);
            let mut out = vec![0.0; ovol];
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let full = (ox + 1) * f <= nx && (oy + 1) * f <= ny && (oz + 1) * f <= nz;
                        let (mut hi, mut lo) = if full {
                            (f64::NEG_INFINITY, f64::INFINITY)
                        } else {
                            (0.0, 0.0)
                        };
                        for z in oz * f..((oz + 1) * f).min(nz) {
                            for y in oy * f..((oy + 1) * f).min(ny) {
                                let row = (z * ny + y) * nx;
                                for &v in &src[row + ox * f..row + ((ox + 1) * f).min(nx)] {
                                    hi = hi.max(v);
                                    lo = lo.min(v);
                                }
                            }
                        }
                        out[(oz * od[1] + oy) * od[0] + ox] = if hi.abs() >= lo.abs() { hi } else { lo };
                    }
                }
            }
            out
        })
        .collect();
    VoxelGrid::from_vec(od, field.channels(), channels.concat())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetentionMethod {
    Pool,
    Slice,
}

/// Fraction of nonzero marker voxels that survive downsampling by `factor`.
pub fn particle_retention(markers: &VoxelGrid, factor: usize, method: RetentionMethod) -> Result<f64> {
    if factor == 0 {
        return Err(Error::Config("retention factor must be positive".into()));
    }
    let total = markers.data().iter().filter(|v| **v != 0.0).count();
    if total == 0 {
        return Err(Error::Degenerate("marker field has no markers".into()));
    }
    let kept = match method {
        RetentionMethod::Pool => maxabs_pool(markers, &PoolConfig { factor })?
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .count(),
        RetentionMethod::Slice => {
            let [nx, ny, nz] = markers.dims();
            let mut kept = 0;
            for c in 0..markers.channels() {
                for z in (0..nz).step_by(factor) {
                    for y in (0..ny).step_by(factor) {
                        for x in (0..nx).step_by(factor) {
                            kept += (markers.get(c, x, y, z) != 0.0) as usize;
                        }
                    }
                }
            }
            kept
        }
    };
    Ok(kept as f64 / total as f64)
}

/// Pore voxels within `radius` (Chebyshev) of a solid voxel, as linear
/// indices in storage order.
pub fn boundary_voxels(geometry: &OccupancyField, radius: usize) -> Vec<usize> {
    let [nx, ny, nz] = geometry.dims();
    let r = radius as isize;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !geometry.is_set(x, y, z) {
                    continue;
                }
                let mut near = false;
                'scan: for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                                continue;
                            }
                            if !geometry.is_set(xx as usize, yy as usize, zz as usize) {
                                near = true;
                                break 'scan;
                            }
                        }
                    }
                }
                if near {
                    out.push((z * ny + y) * nx + x);
                }
            }
        }
    }
    out
}

fn clamp_to(dims: [usize; 3], p: Vec3) -> Vec3 {
    [
        p[0].clamp(0.0, (dims[0] - 1) as f64),
        p[1].clamp(0.0, (dims[1] - 1) as f64),
        p[2].clamp(0.0, (dims[2] - 1) as f64),
    ]
}

/// Scattered particle velocities plus zero-velocity wall points to a
/// 3-channel grid: trilinear splatting with weight normalisation, nearest
/// scattered point for untouched voxels, then the pore mask.
pub fn reconstruct_flow(
    positions: &[Vec3],
    velocities: &[Vec3],
    geometry: &OccupancyField,
    cfg: &ReconstructionConfig,
) -> Result<VoxelGrid> {
    if positions.is_empty() {
        return Err(Error::Input("flow reconstruction needs at least one particle".into()));
    }
    if positions.len() != velocities.len() {
        return Err(Error::Shape(format!(
            "{} positions vs {} velocities",
            positions.len(),
            velocities.len()
        )));
    }
    if !(cfg.boundary_ratio >= 0.0 && cfg.boundary_ratio.is_finite()) {
        return Err(Error::Config(format!("boundary ratio {} must be ≥ 0", cfg.boundary_ratio)));
    }
    let dims = geometry.dims();
    let [nx, ny, _] = dims;
    let mut points: Vec<(Vec3, Vec3)> = positions
        .iter()
        .zip(velocities)
        .map(|(p, v)| (clamp_to(dims, *p), *v))
        .collect();

    let candidates = boundary_voxels(geometry, cfg.dilation_radius);
    let wanted = ((cfg.boundary_ratio * positions.len() as f64).round() as usize).min(candidates.len());
    if wanted > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picks = sample(&mut rng, candidates.len(), wanted).into_vec();
        picks.sort_unstable();
        for k in picks {
            let i = candidates[k];
            let p = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
            points.push((p, [0.0; 3]));
        }
    }

    let n = geometry.grid().voxel_count();
    let mut weight = vec![0.0; n];
    let mut acc = vec![0.0; 3 * n];
    for (p, v) in &points {
        let base = [p[0].floor(), p[1].floor(), p[2].floor()];
        let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let c = base[a] as usize + off[a];
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                idx[a] = c;
            }
            if w == 0.0 || idx[0] >= dims[0] || idx[1] >= dims[1] || idx[2] >= dims[2] {
                continue;
            }
            let li = (idx[2] * ny + idx[1]) * nx + idx[0];
            weight[li] += w;
            for c in 0..3 {
                acc[c * n + li] += w * v[c];
            }
        }
    }

    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        if !geometry.is_set_linear(i) {
            continue;
        }
        if weight[i] > 0.0 {
            for c in 0..3 {
                out[c * n + i] = acc[c * n + i] / weight[i];
            }
        } else {
            let q = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
            let mut best = (f64::INFINITY, 0);
            for (k, (p, _)) in points.iter().enumerate() {
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best.0 {
                    best = (d, k);
                }
            }
            let v = points[best.1].1;
            for c in 0..3 {
                out[c * n + i] = v[c];
            }
        }
    }
    apply_pore_mask(&VoxelGrid::from_vec(dims, 3, out)?, geometry)
}

/// Two-channel `[geometry, interface]` patches around each particle, in
/// particle order.
pub fn condition_patches(
    geometry: &OccupancyField,
    interface: &OccupancyField,
    positions: &[Vec3],
    size: usize,
) -> Result<Vec<VoxelGrid>> {
    if size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let stacked = VoxelGrid::stack(&[geometry.grid(), interface.grid()])?;
    Ok(positions
        .par_iter()
        .map(|p| extract_patch(&stacked, *p, size))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_grid(dims: [usize; 3], channels: usize, seed: u64) -> VoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * channels;
        VoxelGrid::from_vec(dims, channels, (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
    }

    /// Collects each zero-padded block explicitly and applies the case rule.
    fn block_oracle(field: &VoxelGrid, f: usize) -> VoxelGrid {
        let d = field.dims();
        let od = [d[0].div_ceil(f), d[1].div_ceil(f), d[2].div_ceil(f)];
        let mut out = VoxelGrid::zeros(od, field.channels());
        for c in 0..field.channels() {
            for oz in 0..od[2] {
                for oy in 0..od[1] {
                    for ox in 0..od[0] {
                        let mut vals = Vec::new();
                        for z in oz * f..(oz + 1) * f {
                            for y in oy * f..(oy + 1) * f {
                                for x in ox * f..(ox + 1) * f {
                                    vals.push(if x < d[0] && y < d[1] && z < d[2] {
                                        field.get(c, x, y, z)
                                    } else {
                                        0.0
                                    });
                                }
                            }
                        }
                        let mx = vals.iter().cloned().fold(f64::MIN, f64::max);
                        let mn = vals.iter().cloned().fold(f64::MAX, f64::min);
                        out.set(c, ox, oy, oz, if mx.abs() >= mn.abs() { mx } else { mn });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pool_picks_signed_extreme() {
        let mut g = VoxelGrid::zeros([2, 2, 2], 1);
        g.set(0, 0, 0, 0, -3.0);
        g.set(0, 1, 0, 0, 2.0);
        let p = maxabs_pool(&g, &PoolConfig { factor: 2 }).unwrap();
        assert_eq!(p.data(), &[-3.0]);
        let z = maxabs_pool(&VoxelGrid::zeros([4, 4, 4], 1), &PoolConfig { factor: 2 }).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        g.set(0, 1, 0, 0, 3.0);
        assert_eq!(maxabs_pool(&g, &PoolConfig { factor: 2 }).unwrap().data(), &[3.0]);
        assert!(maxabs_pool(&g, &PoolConfig { factor: 0 }).is_err());
    }

    #[test]
    fn pool_matches_block_scan() {
        for seed in 0..5 {
            let g = random_grid([8, 8, 8], 2, seed);
            assert_eq!(maxabs_pool(&g, &PoolConfig { factor: 2 }).unwrap(), block_oracle(&g, 2));
            let odd = random_grid([7, 5, 6], 1, seed + 10);
            assert_eq!(maxabs_pool(&odd, &PoolConfig { factor: 3 }).unwrap(), block_oracle(&odd, 3));
        }
    }

    #[test]
    fn retention_on_isolated_markers() {
        // one marker per 4³ block, cycling through all 64 offsets
        let mut g = VoxelGrid::zeros([32, 32, 16], 1);
        let mut k = 0;
        for bz in 0..4 {
            for by in 0..8 {
                for bx in 0..8 {
                    let off = k % 64;
                    let (ox, oy, oz) = (off % 4, (off / 4) % 4, off / 16);
                    g.set(0, bx * 4 + ox, by * 4 + oy, bz * 4 + oz, 1.0);
                    k += 1;
                }
            }
        }
        assert_eq!(particle_retention(&g, 4, RetentionMethod::Slice).unwrap(), 1.0 / 64.0);
        assert_eq!(particle_retention(&g, 4, RetentionMethod::Pool).unwrap(), 1.0);
    }

    #[test]
    fn dense_pool_retention_counts_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = VoxelGrid::zeros([16, 16, 16], 1);
        for _ in 0..300 {
            let (x, y, z) = (rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..16));
            g.set(0, x, y, z, 1.0);
        }
        let markers = g.data().iter().filter(|v| **v != 0.0).count();
        let mut blocks = std::collections::HashSet::new();
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    if g.get(0, x, y, z) != 0.0 {
                        blocks.insert((x / 4, y / 4, z / 4));
                    }
                }
            }
        }
        let r = particle_retention(&g, 4, RetentionMethod::Pool).unwrap();
        assert_eq!(r, blocks.len() as f64 / markers as f64);
    }

    fn slab_geometry() -> OccupancyField {
        // solid walls at z = 0 and z = 7
        OccupancyField::from_fn([8, 8, 8], |_, _, z| z > 0 && z < 7)
    }

    #[test]
    fn single_particle_fills_pore_space() {
        let geo = slab_geometry();
        let cfg = ReconstructionConfig {
            boundary_ratio: 0.0,
            ..Default::default()
        };
        let v = [0.3, -0.2, 0.1];
        let f = reconstruct_flow(&[[3.2, 4.7, 3.5]], &[v], &geo, &cfg).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    for c in 0..3 {
                        let expect = if geo.is_set(x, y, z) { v[c] } else { 0.0 };
                        assert!((f.get(c, x, y, z) - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn voxel_centred_particle_is_exact() {
        let geo = OccupancyField::full([6, 6, 6]);
        let f = reconstruct_flow(
            &[[2.0, 3.0, 4.0], [0.0, 0.0, 0.0]],
            &[[1.0, 2.0, 3.0], [9.0, 9.0, 9.0]],
            &geo,
            &ReconstructionConfig::default(),
        )
        .unwrap();
        assert!((f.get(0, 2, 3, 4) - 1.0).abs() < 1e-9);
        assert!((f.get(2, 2, 3, 4) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn wall_points_pull_toward_zero() {
        let geo = slab_geometry();
        let pos = [[4.0, 4.0, 1.5], [2.0, 2.0, 5.5]];
        let vel = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let free = reconstruct_flow(&pos, &vel, &geo, &ReconstructionConfig { boundary_ratio: 0.0, ..Default::default() }).unwrap();
        let walled = reconstruct_flow(&pos, &vel, &geo, &ReconstructionConfig { boundary_ratio: 40.0, ..Default::default() }).unwrap();
        for i in boundary_voxels(&geo, 1) {
            let n = geo.grid().voxel_count();
            let mag = |g: &VoxelGrid| (0..3).map(|c| g.data()[c * n + i].powi(2)).sum::<f64>().sqrt();
            assert!(mag(&walled) <= mag(&free) + 1e-12);
        }
    }

    #[test]
    fn reconstruction_errors() {
        let geo = OccupancyField::full([4, 4, 4]);
        assert!(matches!(reconstruct_flow(&[], &[], &geo, &Default::default()), Err(Error::Input(_))));
        assert!(reconstruct_flow(&[[1.0; 3]], &[], &geo, &Default::default()).is_err());
    }

    #[test]
    fn patches_follow_particles() {
        let dims = [32, 32, 32];
        let geo = OccupancyField::full(dims);
        let none = OccupancyField::empty(dims);
        let p = condition_patches(&geo, &none, &[[16.0, 16.0, 16.0]], 8).unwrap();
        assert!(p[0].channel(1).iter().all(|v| *v == 0.0));
        assert!(p[0].channel(0).iter().all(|v| *v == 1.0));

        let half = OccupancyField::from_fn(dims, |x, _, _| x < 16);
        let p = condition_patches(&geo, &half, &[[16.0, 16.0, 16.0]], 32).unwrap();
        let ones: f64 = p[0].channel(1).iter().sum();
        assert_eq!(ones, 0.5 * 32.0f64.powi(3));

        let pts = [[3.0, 4.0, 5.0], [20.0, 1.0, 30.0], [10.0, 10.0, 10.0]];
        let batch = condition_patches(&geo, &half, &pts, 4).unwrap();
        assert_eq!(batch.len(), 3);
        let stacked = VoxelGrid::stack(&[geo.grid(), half.grid()]).unwrap();
        for (patch, p) in batch.iter().zip(&pts) {
            assert_eq!(patch, &extract_patch(&stacked, *p, 4));
        }
    }

    proptest! {
        #[test]
        fn pooled_values_come_from_block_and_dominate_average(seed in 0u64..500) {
            let g = random_grid([6, 6, 6], 1, seed);
            let p = maxabs_pool(&g, &PoolConfig { factor: 2 }).unwrap();
            for oz in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let v = p.get(0, ox, oy, oz);
                        let mut found = false;
                        let mut sum = 0.0;
                        for t in 0..8 {
                            let s = g.get(0, 2 * ox + (t & 1), 2 * oy + ((t >> 1) & 1), 2 * oz + (t >> 2));
                            found |= s == v;
                            sum += s;
                        }
                        prop_assert!(found);
                        prop_assert!(v.abs() >= (sum / 8.0).abs() - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn reconstruction_is_zero_in_solid(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geo = OccupancyField::from_fn([6, 6, 6], |_, _, _| rng.gen_bool(0.7));
            let pos: Vec<Vec3> = (0..5).map(|_| [rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)]).collect();
            let vel: Vec<Vec3> = (0..5).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
            let f = reconstruct_flow(&pos, &vel, &geo, &ReconstructionConfig { seed, ..Default::default() }).unwrap();
            let n = geo.grid().voxel_count();
            for i in 0..n {
                if !geo.is_set_linear(i) {
                    for c in 0..3 {
                        prop_assert_eq!(f.data()[c * n + i], 0.0);
                    }
                }
            }
        }
    }
}
