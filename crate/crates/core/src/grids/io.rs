//! VGRID binary volumes and trajectory CSV files.
//!
//! A VGRID file is the magic line `VGRD1\n`, one UTF-8 JSON header line
//! `{"dims":[nx,ny,nz],"channels":c,"dtype":"f32","order":"c,z,y,x","spacing":s}`,
//! then `c*nx*ny*nz` little-endian f32 values.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrackPoint, Trajectory, VoxelGrid};
use crate::error::{Error, Result};

const VGRID_MAGIC: &[u8] = b"VGRD1\n";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VgridHeader {
    dims: [usize; 3],
    channels: usize,
    dtype: String,
    order: String,
    spacing: f64,
}

pub fn write_vgrid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = VgridHeader {
        dims: grid.dims(),
        channels: grid.channels(),
        dtype: "f32".into(),
        order: "c,z,y,x".into(),
        spacing: grid.spacing(),
    };
    let mut bytes = Vec::with_capacity(VGRID_MAGIC.len() + 128 + grid.data().len() * 4);
    bytes.extend_from_slice(VGRID_MAGIC);
    bytes.extend_from_slice(serde_json::to_string(&header).expect("header").as_bytes());
    bytes.push(b'\n');
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_vgrid(path: &Path) -> Result<VoxelGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic != VGRID_MAGIC {
        return Err(Error::format(path, "missing VGRD1 magic"));
    }
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: VgridHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32" || header.order != "c,z,y,x" {
        return Err(Error::format(
            path,
            format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        ));
    }
    let n = header.channels * header.dims.iter().product::<usize>();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", raw.len(), n * 4),
        ));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    VoxelGrid::from_vec(header.dims, header.channels, data)
        .map(|g| g.with_spacing(header.spacing))
        .map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackRow {
    particle_id: u64,
    frame: i64,
    x: f64,
    y: f64,
    z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vz: Option<f64>,
}

/// Writes `particle_id,frame,x,y,z[,vx,vy,vz]`; velocity columns appear only
/// when every point carries a velocity.
pub fn write_trajectories(path: &Path, tracks: &[Trajectory]) -> Result<()> {
    let with_vel = tracks
        .iter()
        .all(|t| t.frames.iter().all(|p| p.velocity.is_some()));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    if with_vel {
        w.write_record(["particle_id", "frame", "x", "y", "z", "vx", "vy", "vz"])
            .map_err(to_err)?;
    } else {
        w.write_record(["particle_id", "frame", "x", "y", "z"])
            .map_err(to_err)?;
    }
    for t in tracks {
        for p in &t.frames {
            let mut rec = vec![
                t.particle_id.to_string(),
                p.frame.to_string(),
                p.position[0].to_string(),
                p.position[1].to_string(),
                p.position[2].to_string(),
            ];
            if with_vel {
                let v = p.velocity.expect("checked above");
                rec.extend(v.iter().map(|c| c.to_string()));
            }
            w.write_record(&rec).map_err(to_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a trajectory CSV; rows are grouped by particle id (ascending) and
/// each track is validated for strictly increasing frames.
pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let headers = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let base = ["particle_id", "frame", "x", "y", "z"];
    let with_vel = names == ["particle_id", "frame", "x", "y", "z", "vx", "vy", "vz"];
    if names != base && !with_vel {
        return Err(Error::format(path, format!("unexpected header {names:?}")));
    }
    let mut by_id: BTreeMap<u64, Vec<TrackPoint>> = BTreeMap::new();
    for row in r.deserialize::<TrackRow>() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let velocity = match (row.vx, row.vy, row.vz) {
            (Some(a), Some(b), Some(c)) => Some([a, b, c]),
            (None, None, None) => None,
            _ => return Err(Error::format(path, "partial velocity row")),
        };
        by_id.entry(row.particle_id).or_default().push(TrackPoint {
            frame: row.frame,
            position: [row.x, row.y, row.z],
            velocity,
        });
    }
    by_id
        .into_iter()
        .map(|(id, frames)| Trajectory::new(id, frames))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgrid_round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vgrid");
        let g = VoxelGrid::from_vec([3, 2, 2], 2, (0..24).map(|i| i as f64 * 0.5).collect())
            .unwrap()
            .with_spacing(2.75);
        write_vgrid(&path, &g).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"VGRD1\n{\"dims\":[3,2,2],\"channels\":2,\"dtype\":\"f32\""));
        assert_eq!(read_vgrid(&path).unwrap(), g);
        // last value is channel 1, z=1, y=1, x=2
        let tail = &bytes[bytes.len() - 4..];
        assert_eq!(f32::from_le_bytes(tail.try_into().unwrap()), 11.5);
    }

    #[test]
    fn vgrid_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vgrid");
        write_vgrid(&path, &VoxelGrid::zeros([2, 2, 2], 1)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_vgrid(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let tracks = vec![
            Trajectory::new(
                7,
                vec![
                    TrackPoint {
                        frame: 0,
                        position: [1.25, 2.0, 3.0],
                        velocity: Some([0.1, 0.0, -0.2]),
                    },
                    TrackPoint {
                        frame: 1,
                        position: [1.35, 2.0, 2.8],
                        velocity: Some([0.1, 0.0, -0.2]),
                    },
                ],
            )
            .unwrap(),
            Trajectory::new(
                2,
                vec![TrackPoint {
                    frame: 0,
                    position: [4.0, 4.0, 4.0],
                    velocity: Some([0.0; 3]),
                }],
            )
            .unwrap(),
        ];
        write_trajectories(&path, &tracks).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("particle_id,frame,x,y,z,vx,vy,vz\n"));
        let back = read_trajectories(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], tracks[1]);
        assert_eq!(back[1], tracks[0]);
    }

    #[test]
    fn trajectory_csv_without_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "particle_id,frame,x,y,z\n1,0,1,2,3\n1,1,1.5,2,3\n").unwrap();
        let back = read_trajectories(&path).unwrap();
        assert_eq!(back[0].frames[1].position, [1.5, 2.0, 3.0]);
        assert!(back[0].frames[1].velocity.is_none());
        std::fs::write(&path, "particle_id,frame,x,y,z\n1,1,1,2,3\n1,0,1.5,2,3\n").unwrap();
        assert!(read_trajectories(&path).is_err());
    }
}
