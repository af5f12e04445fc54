//! Exact Euclidean signed distance fields and SDF-space interpolation of
//! binary interface frames.

use crate::error::{Error, Result};
use crate::grids::{OccupancyField, VoxelGrid};

/// One-channel field of `d_in - d_out` in voxels: positive on foreground,
/// negative on background, never zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceField(VoxelGrid);

impl SignedDistanceField {
    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// 1D squared-distance transform of a sampled function using the lower
/// envelope of parabolas. Infinite samples do not contribute.
fn sq_dist_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every voxel center to the nearest voxel where
/// `target` is true (separable exact transform).
pub fn squared_edt(dims: [usize; 3], target: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut d: Vec<f64> = target
        .iter()
        .map(|&t| if t { 0.0 } else { f64::INFINITY })
        .collect();
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest + 1));
    let idx = |x: usize, y: usize, zz: usize| (zz * ny + y) * nx + x;

    for zz in 0..nz {
        for y in 0..ny {
            let base = idx(0, y, zz);
            sq_dist_1d(&d[base..base + nx], &mut out[..nx], &mut v, &mut z);
            d[base..base + nx].copy_from_slice(&out[..nx]);
        }
    }
    for zz in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = d[idx(x, y, zz)];
            }
            sq_dist_1d(&line[..ny], &mut out[..ny], &mut v, &mut z);
            for y in 0..ny {
                d[idx(x, y, zz)] = out[y];
            }
        }
    }
    for y in 0..ny {
        for x in 0..nx {
            for zz in 0..nz {
                line[zz] = d[idx(x, y, zz)];
            }
            sq_dist_1d(&line[..nz], &mut out[..nz], &mut v, &mut z);
            for zz in 0..nz {
                d[idx(x, y, zz)] = out[zz];
            }
        }
    }
    d
}

/// Signed distance field of a binary mask. Foreground voxels carry the
/// distance to the nearest background voxel center, background voxels the
/// negated distance to the nearest foreground voxel center.
pub fn euclidean_sdf(mask: &OccupancyField) -> Result<SignedDistanceField> {
    let fg = mask.to_bools();
    let count = fg.iter().filter(|&&b| b).count();
    if count == 0 || count == fg.len() {
        return Err(Error::Degenerate(
            "signed distance needs both foreground and background voxels".into(),
        ));
    }
    let bg: Vec<bool> = fg.iter().map(|&b| !b).collect();
    let dims = mask.dims();
    let d_in = squared_edt(dims, &bg);
    let d_out = squared_edt(dims, &fg);
    let phi = fg
        .iter()
        .zip(d_in.iter().zip(&d_out))
        .map(|(&f, (&din, &dout))| if f { din.sqrt() } else { -dout.sqrt() })
        .collect();
    Ok(SignedDistanceField(VoxelGrid::from_vec(dims, 1, phi)?))
}

/// Binarises `(1-t)·φ₀ + t·φ₁ ≥ 0`.
pub fn sdf_interpolate(
    v0: &OccupancyField,
    v1: &OccupancyField,
    t: f64,
) -> Result<OccupancyField> {
    if v0.dims() != v1.dims() {
        return Err(Error::Shape(format!(
            "interpolation endpoints {:?} vs {:?}",
            v0.dims(),
            v1.dims()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("interpolation weight {t} outside [0, 1]")));
    }
    let phi0 = euclidean_sdf(v0)?;
    let phi1 = euclidean_sdf(v1)?;
    Ok(blend(&phi0, &phi1, t, v0.dims()))
}

fn blend(
    phi0: &SignedDistanceField,
    phi1: &SignedDistanceField,
    t: f64,
    dims: [usize; 3],
) -> OccupancyField {
    let values: Vec<bool> = phi0
        .values()
        .iter()
        .zip(phi1.values())
        .map(|(&a, &b)| (1.0 - t) * a + t * b >= 0.0)
        .collect();
    OccupancyField::from_bools(dims, &values).expect("dims match")
}

/// Inserts `factor - 1` interpolated frames between each consecutive pair;
/// original frames are passed through unchanged.
pub fn resample_sequence(frames: &[OccupancyField], factor: usize) -> Result<Vec<OccupancyField>> {
    if frames.is_empty() {
        return Err(Error::Input("cannot resample an empty sequence".into()));
    }
    if factor < 2 {
        return Err(Error::Input(format!("resample factor {factor} must be ≥ 2")));
    }
    let dims = frames[0].dims();
    if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
        return Err(Error::Shape(format!("frame dims {:?} vs {dims:?}", f.dims())));
    }
    let sdfs = frames.iter().map(euclidean_sdf).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity((frames.len() - 1) * factor + 1);
    for i in 0..frames.len() - 1 {
        out.push(frames[i].clone());
        for k in 1..factor {
            out.push(blend(&sdfs[i], &sdfs[i + 1], k as f64 / factor as f64, dims));
        }
    }
    out.push(frames[frames.len() - 1].clone());
    Ok(out)
}
