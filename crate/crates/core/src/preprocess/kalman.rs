//! Constant-acceleration Kalman filter with Rauch-Tung-Striebel smoothing.
//!
//! State layout is `[x, ẋ, ẍ, y, ẏ, ÿ, z, ż, z̈]`; the transition and noise
//! matrices are block diagonal with one 3x3 block per axis.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{TrackPoint, Trajectory};

pub type StateVec = SVector<f64, 9>;
pub type StateMat = SMatrix<f64, 9, 9>;
type ObsMat = SMatrix<f64, 3, 9>;

const PRIOR_VARIANCE: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Time between consecutive frame indices, in frames.
    pub dt: f64,
    /// White-jerk spectral density (voxels²/frame⁶ · frame).
    pub q_jerk: f64,
    /// Per-axis position measurement variance (voxels²).
    pub r_meas: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            q_jerk: 1e-2,
            r_meas: 0.25,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.dt) && ok(self.q_jerk) && ok(self.r_meas)) {
            return Err(Error::Config(format!(
                "Kalman parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaState {
    pub state: StateVec,
    pub covariance: StateMat,
}

impl CaState {
    pub fn position(&self) -> [f64; 3] {
        [self.state[0], self.state[3], self.state[6]]
    }

    pub fn velocity(&self) -> [f64; 3] {
        [self.state[1], self.state[4], self.state[7]]
    }

    pub fn acceleration(&self) -> [f64; 3] {
        [self.state[2], self.state[5], self.state[8]]
    }
}

fn transition(dt: f64) -> StateMat {
    let mut f = StateMat::zeros();
    for a in 0..3 {
        let o = 3 * a;
        f[(o, o)] = 1.0;
        f[(o, o + 1)] = dt;
        f[(o, o + 2)] = 0.5 * dt * dt;
        f[(o + 1, o + 1)] = 1.0;
        f[(o + 1, o + 2)] = dt;
        f[(o + 2, o + 2)] = 1.0;
    }
    f
}

/// Discretised white-jerk process noise.
fn process_noise(dt: f64, q: f64) -> StateMat {
    let block = [
        [dt.powi(5) / 20.0, dt.powi(4) / 8.0, dt.powi(3) / 6.0],
        [dt.powi(4) / 8.0, dt.powi(3) / 3.0, dt.powi(2) / 2.0],
        [dt.powi(3) / 6.0, dt.powi(2) / 2.0, dt],
    ];
    let mut m = StateMat::zeros();
    for a in 0..3 {
        for i in 0..3 {
            for j in 0..3 {
                m[(3 * a + i, 3 * a + j)] = q * block[i][j];
            }
        }
    }
    m
}

fn observation() -> ObsMat {
    let mut h = ObsMat::zeros();
    for a in 0..3 {
        h[(a, 3 * a)] = 1.0;
    }
    h
}

fn symmetrize(m: &mut StateMat) {
    *m = (*m + m.transpose()) * 0.5;
}

/// Runs the forward filter and backward RTS pass, returning one smoothed
/// state per input frame.
pub fn kalman_rts_states(track: &Trajectory, cfg: &KalmanConfig) -> Result<Vec<CaState>> {
    cfg.validate()?;
    let n = track.frames.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "particle {} has {n} frames, smoothing needs at least 3",
            track.particle_id
        )));
    }
    track.check_order()?;
    let step = track.frames[1].frame - track.frames[0].frame;
    if track.frames.windows(2).any(|w| w[1].frame - w[0].frame != step) {
        return Err(Error::Input(format!(
            "particle {} has non-uniform frame spacing",
            track.particle_id
        )));
    }
    if track
        .frames
        .iter()
        .any(|p| p.position.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Input(format!(
            "particle {} has non-finite positions",
            track.particle_id
        )));
    }

    let dt = cfg.dt * step as f64;
    let f = transition(dt);
    let q = process_noise(dt, cfg.q_jerk);
    let h = observation();
    let r = SMatrix::<f64, 3, 3>::identity() * cfg.r_meas;
    let obs = |i: usize| SVector::<f64, 3>::from(track.frames[i].position);

    let mut x = StateVec::zeros();
    let (p0, p1) = (track.frames[0].position, track.frames[1].position);
    for a in 0..3 {
        x[3 * a] = p0[a];
        x[3 * a + 1] = (p1[a] - p0[a]) / dt;
    }
    let mut p = StateMat::identity() * PRIOR_VARIANCE;

    let mut predicted: Vec<(StateVec, StateMat)> = Vec::with_capacity(n);
    let mut filtered: Vec<(StateVec, StateMat)> = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            x = f * x;
            p = f * p * f.transpose() + q;
            symmetrize(&mut p);
        }
        predicted.push((x, p));
        let s = h * p * h.transpose() + r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular innovation covariance".into()))?;
        let gain = p * h.transpose() * s_inv;
        x += gain * (obs(i) - h * x);
        // Joseph form keeps the covariance symmetric positive semidefinite.
        let ikh = StateMat::identity() - gain * h;
        p = ikh * p * ikh.transpose() + gain * r * gain.transpose();
        symmetrize(&mut p);
        filtered.push((x, p));
    }

    let mut smoothed = vec![
        CaState {
            state: StateVec::zeros(),
            covariance: StateMat::zeros(),
        };
        n
    ];
    smoothed[n - 1] = CaState {
        state: filtered[n - 1].0,
        covariance: filtered[n - 1].1,
    };
    for i in (0..n - 1).rev() {
        let (xf, pf) = &filtered[i];
        let (xp, pp) = &predicted[i + 1];
        let pp_inv = pp
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| pp.try_inverse())
            .ok_or_else(|| Error::Domain("singular predicted covariance".into()))?;
        let c = pf * f.transpose() * pp_inv;
        let next = &smoothed[i + 1];
        let state = xf + c * (next.state - xp);
        let mut cov = pf + c * (next.covariance - pp) * c.transpose();
        symmetrize(&mut cov);
        smoothed[i] = CaState {
            state,
            covariance: cov,
        };
    }
    Ok(smoothed)
}

/// Smoothed positions and velocities (voxels per `cfg.dt`) for every frame.
pub fn kalman_rts_smooth(track: &Trajectory, cfg: &KalmanConfig) -> Result<Trajectory> {
    let states = kalman_rts_states(track, cfg)?;
    let frames = track
        .frames
        .iter()
        .zip(&states)
        .map(|(src, s)| TrackPoint {
            frame: src.frame,
            position: s.position(),
            velocity: Some(s.velocity()),
        })
        .collect();
    Ok(Trajectory {
        particle_id: track.particle_id,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn track_from(f: impl Fn(f64) -> [f64; 3], n: usize) -> Trajectory {
        Trajectory::new(
            0,
            (0..n)
                .map(|t| TrackPoint {
                    frame: t as i64,
                    position: f(t as f64),
                    velocity: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_velocity_is_exact() {
        let track = track_from(|t| [0.5 * t, 3.0, 10.0 - 0.25 * t], 40);
        let out = kalman_rts_smooth(&track, &KalmanConfig::default()).unwrap();
        for p in &out.frames[1..39] {
            let v = p.velocity.unwrap();
            assert!((v[0] - 0.5).abs() < 1e-6, "{v:?}");
            assert!(v[1].abs() < 1e-6 && (v[2] + 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_acceleration_is_recovered() {
        let track = track_from(|t| [0.01 * t * t, 0.0, 0.0], 40);
        let states = kalman_rts_states(&track, &KalmanConfig::default()).unwrap();
        for (t, s) in states.iter().enumerate() {
            assert!((s.acceleration()[0] - 0.02).abs() < 1e-4, "{t}: {:?}", s.acceleration());
            assert!((s.position()[0] - 0.01 * (t * t) as f64).abs() < 1e-6);
            assert!((s.velocity()[0] - 0.02 * t as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn smoothing_beats_finite_differences_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let raw: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    5.0 + noise.sample(&mut rng),
                    5.0 + noise.sample(&mut rng),
                    5.0 + noise.sample(&mut rng),
                ]
            })
            .collect();
        let track = track_from(|t| raw[t as usize], 60);
        let out = kalman_rts_smooth(&track, &KalmanConfig::default()).unwrap();
        let mut fd = 0.0;
        let mut ks = 0.0;
        for t in 1..59 {
            let v = out.frames[t].velocity.unwrap();
            for a in 0..3 {
                let c = (raw[t + 1][a] - raw[t - 1][a]) / 2.0;
                fd += c * c;
                ks += v[a] * v[a];
            }
        }
        assert!(ks.sqrt() < fd.sqrt(), "smoothed {ks} vs fd {fd}");
    }

    #[test]
    fn covariances_are_symmetric_psd() {
        let track = track_from(|t| [t.sin(), t.cos(), 0.1 * t], 25);
        for s in kalman_rts_states(&track, &KalmanConfig::default()).unwrap() {
            let c = s.covariance;
            assert!((c - c.transpose()).amax() < 1e-9);
            let eig = c.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-9), "{eig:?}");
        }
    }

    #[test]
    fn rejects_short_and_irregular_tracks() {
        let short = track_from(|t| [t, 0.0, 0.0], 2);
        assert!(matches!(
            kalman_rts_smooth(&short, &KalmanConfig::default()),
            Err(Error::InsufficientData(_))
        ));
        let mut gappy = track_from(|t| [t, 0.0, 0.0], 5);
        gappy.frames[4].frame = 7;
        assert!(matches!(
            kalman_rts_smooth(&gappy, &KalmanConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn strided_frames_scale_dt() {
        let track = Trajectory::new(
            3,
            (0..20)
                .map(|k| TrackPoint {
                    frame: 2 * k,
                    position: [0.3 * (2 * k) as f64, 0.0, 0.0],
                    velocity: None,
                })
                .collect(),
        )
        .unwrap();
        let out = kalman_rts_smooth(&track, &KalmanConfig::default()).unwrap();
        assert!((out.frames[10].velocity.unwrap()[0] - 0.3).abs() < 1e-6);
    }
}
