//! Interface and velocity accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{OccupancyField, Vec3, VoxelGrid};

/// Minimum sample count for a stable 99th percentile.
pub const MIN_QUANTILE_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfaceMetrics {
    /// Percent.
    pub volume_rel_err: f64,
    /// Percent.
    pub surface_rel_err: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub q99: f64,
    pub nrmse_p99: f64,
}

fn check_dims(a: &OccupancyField, b: &OccupancyField) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("fields {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(pred: &OccupancyField, truth: &OccupancyField) -> Result<f64> {
    check_dims(pred, truth)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (p, t) in pred.grid().data().iter().zip(truth.grid().data()) {
        let (p, t) = (*p > 0.5, *t > 0.5);
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

pub fn volume(field: &OccupancyField) -> usize {
    field.count()
}

/// Number of foreground voxel faces that touch background or the domain
/// boundary.
pub fn surface_area(field: &OccupancyField) -> usize {
    let [nx, ny, nz] = field.dims();
    let set = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < nx
            && (y as usize) < ny
            && (z as usize) < nz
            && field.is_set(x as usize, y as usize, z as usize)
    };
    let mut faces = 0;
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !set(x, y, z) {
                    continue;
                }
                for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
                    faces += !set(x + dx, y + dy, z + dz) as usize;
                }
            }
        }
    }
    faces
}

fn rel_err_pct(pred: usize, truth: usize, what: &str) -> Result<f64> {
    if truth == 0 {
        return Err(Error::Degenerate(format!("ground-truth {what} is zero")));
    }
    Ok((pred as f64 - truth as f64).abs() / truth as f64 * 100.0)
}

pub fn volume_rel_err(pred: &OccupancyField, truth: &OccupancyField) -> Result<f64> {
    check_dims(pred, truth)?;
    rel_err_pct(volume(pred), volume(truth), "volume")
}

pub fn surface_rel_err(pred: &OccupancyField, truth: &OccupancyField) -> Result<f64> {
    check_dims(pred, truth)?;
    rel_err_pct(surface_area(pred), surface_area(truth), "surface area")
}

pub fn interface_metrics(pred: &OccupancyField, truth: &OccupancyField) -> Result<InterfaceMetrics> {
    Ok(InterfaceMetrics {
        volume_rel_err: volume_rel_err(pred, truth)?,
        surface_rel_err: surface_rel_err(pred, truth)?,
        dice: dice(pred, truth)?,
    })
}

/// Mean over pore voxels of `‖pred - truth‖₂`.
pub fn velocity_mae(pred: &VoxelGrid, truth: &VoxelGrid, pore: &OccupancyField) -> Result<f64> {
    if pred.dims() != truth.dims() || pred.dims() != pore.dims() {
        return Err(Error::Shape("velocity fields and pore mask differ in dims".into()));
    }
    if pred.channels() != 3 || truth.channels() != 3 {
        return Err(Error::Shape("velocity fields need 3 channels".into()));
    }
    let n = pred.voxel_count();
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..n {
        if !pore.is_set_linear(i) {
            continue;
        }
        let d2: f64 = (0..3)
            .map(|c| {
                let d = pred.data()[c * n + i] - truth.data()[c * n + i];
                d * d
            })
            .sum();
        sum += d2.sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate("pore mask is empty".into()));
    }
    Ok(sum / count as f64)
}

/// `1 - SS_res / SS_tot`, pooled over every coordinate of every particle
/// and frame, with `SS_tot` taken about the mean of the truth.
pub fn trajectory_r2(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted vs {} true positions", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Degenerate("no positions to score".into()));
    }
    let n = (truth.len() * 3) as f64;
    let mean = truth.iter().flatten().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().flatten().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("truth positions are all identical".into()));
    }
    let ss_res: f64 = pred
        .iter()
        .flatten()
        .zip(truth.iter().flatten())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::Input(format!("quantile {q} of {} values", values.len())));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `RMSE / Q99`, rejecting a zero percentile.
pub fn nrmse_ratio(rmse: f64, q99: f64) -> Result<f64> {
    if q99 == 0.0 {
        return Err(Error::Degenerate("99th percentile of true speeds is zero".into()));
    }
    Ok(rmse / q99)
}

fn norm(v: &Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Speed RMSE normalised by the 99th-percentile true speed.
pub fn nrmse_p99(pred: &[Vec3], truth: &[Vec3]) -> Result<VelocityMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predicted vs {} true velocities", pred.len(), truth.len())));
    }
    if truth.len() < MIN_QUANTILE_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "{} samples, need {MIN_QUANTILE_SAMPLES}",
            truth.len()
        )));
    }
    let n = truth.len() as f64;
    let mut mae = 0.0;
    let mut sq = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        mae += norm(&[p[0] - t[0], p[1] - t[1], p[2] - t[2]]);
        let d = norm(p) - norm(t);
        sq += d * d;
    }
    let rmse = (sq / n).sqrt();
    let speeds: Vec<f64> = truth.iter().map(norm).collect();
    let q99 = quantile(&speeds, 0.99)?;
    Ok(VelocityMetrics {
        mae: mae / n,
        rmse,
        q99,
        nrmse_p99: nrmse_ratio(rmse, q99)?,
    })
}
