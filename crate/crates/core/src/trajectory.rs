//! Timestamped demonstration and rollout trajectories.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::manifold::UnitQuaternion;
use crate::{Error, Result};

/// Positions, linear velocities and (optionally) orientations sampled in time.
///
/// `orientations` is either empty (position-only data such as LASA) or has one
/// entry per sample.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseTrajectory {
    pub times: Vec<f64>,
    pub positions: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub orientations: Vec<UnitQuaternion>,
    /// Set when velocities were obtained by finite differences.
    pub velocities_estimated: bool,
}

impl PoseTrajectory {
    pub fn new(
        times: Vec<f64>,
        positions: Vec<DVector<f64>>,
        velocities: Vec<DVector<f64>>,
        orientations: Vec<UnitQuaternion>,
    ) -> Result<Self> {
        let traj = Self { times, positions, velocities, orientations, velocities_estimated: false };
        traj.validate()?;
        Ok(traj)
    }

    /// Builds a trajectory whose velocities are central finite differences of
    /// the positions (one-sided at the ends).
    pub fn from_positions(times: Vec<f64>, positions: Vec<DVector<f64>>, orientations: Vec<UnitQuaternion>) -> Result<Self> {
        let velocities = finite_difference(&times, &positions)?;
        let mut traj = Self::new(times, positions, velocities, orientations)?;
        traj.velocities_estimated = true;
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.positions.first().map_or(0, |p| p.len())
    }

    pub fn has_orientation(&self) -> bool {
        !self.orientations.is_empty()
    }

    /// Median sampling interval.
    pub fn sample_interval(&self) -> Option<f64> {
        let mut dts: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
        if dts.is_empty() {
            return None;
        }
        dts.sort_by(|a, b| a.total_cmp(b));
        Some(dts[dts.len() / 2])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.times.len() != n || self.velocities.len() != n {
            return Err(Error::InvalidInput(format!(
                "trajectory columns differ in length: {} times, {} positions, {} velocities",
                self.times.len(),
                n,
                self.velocities.len()
            )));
        }
        if !self.orientations.is_empty() && self.orientations.len() != n {
            return Err(Error::InvalidInput("orientation column length differs from positions".into()));
        }
        let dim = self.dim();
        if self.positions.iter().chain(&self.velocities).any(|v| v.len() != dim) {
            return Err(Error::InvalidInput("mixed state dimensions in trajectory".into()));
        }
        if self.times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidInput("timestamps must be nondecreasing".into()));
        }
        Ok(())
    }

    /// Samples `range` as a new trajectory.
    pub fn slice(&self, range: std::ops::Range<usize>) -> PoseTrajectory {
        PoseTrajectory {
            times: self.times[range.clone()].to_vec(),
            positions: self.positions[range.clone()].to_vec(),
            velocities: self.velocities[range.clone()].to_vec(),
            orientations: if self.orientations.is_empty() { Vec::new() } else { self.orientations[range].to_vec() },
            velocities_estimated: self.velocities_estimated,
        }
    }

    /// Reads CSV with a header naming the columns. Recognized columns:
    /// `t`, position `x,y[,z]`, optional velocity `vx,vy[,vz]`, optional
    /// orientation `qw,qx,qy,qz`. Missing velocities are finite-differenced.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let t_col = col("t").ok_or_else(|| Error::InvalidInput("missing column `t`".into()))?;
        let pos_cols: Vec<usize> = ["x", "y", "z"].iter().map_while(|n| col(n)).collect();
        if pos_cols.len() < 2 {
            return Err(Error::InvalidInput("need position columns `x,y[,z]`".into()));
        }
        let vel_names = ["vx", "vy", "vz"];
        let vel_cols: Vec<usize> = vel_names[..pos_cols.len()].iter().filter_map(|n| col(n)).collect();
        let has_vel = vel_cols.len() == pos_cols.len();
        let quat_cols: Vec<usize> = ["qw", "qx", "qy", "qz"].iter().filter_map(|n| col(n)).collect();
        let has_quat = quat_cols.len() == 4;

        let (mut times, mut positions, mut velocities, mut orientations) = (vec![], vec![], vec![], vec![]);
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let field = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("row {}: bad value in column {}", row + 1, i)))
            };
            times.push(field(t_col)?);
            positions.push(DVector::from_iterator(pos_cols.len(), pos_cols.iter().map(|c| field(*c).unwrap_or(f64::NAN))));
            if has_vel {
                velocities.push(DVector::from_iterator(vel_cols.len(), vel_cols.iter().map(|c| field(*c).unwrap_or(f64::NAN))));
            }
            if has_quat {
                let v: Vec<f64> = quat_cols.iter().map(|c| field(*c)).collect::<Result<_>>()?;
                orientations.push(UnitQuaternion::new(v[0], v[1], v[2], v[3])?);
            }
        }
        if positions.iter().chain(&velocities).any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidInput("non-numeric position or velocity entry".into()));
        }
        if has_vel {
            Self::new(times, positions, velocities, orientations)
        } else {
            Self::from_positions(times, positions, orientations)
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let dim = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend(["x", "y", "z"][..dim.min(3)].iter().map(|s| s.to_string()));
        header.extend(["vx", "vy", "vz"][..dim.min(3)].iter().map(|s| s.to_string()));
        if self.has_orientation() {
            header.extend(["qw", "qx", "qy", "qz"].iter().map(|s| s.to_string()));
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![self.times[i].to_string()];
            row.extend(self.positions[i].iter().map(|v| v.to_string()));
            row.extend(self.velocities[i].iter().map(|v| v.to_string()));
            if let Some(q) = self.orientations.get(i) {
                row.extend(<[f64; 4]>::from(*q).iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn finite_difference(times: &[f64], positions: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let n = positions.len();
    if n < 2 || times.len() != n {
        return Err(Error::InsufficientData("finite differences need at least two samples".into()));
    }
    let diff = |a: usize, b: usize| -> Result<DVector<f64>> {
        let dt = times[b] - times[a];
        if dt <= 0.0 {
            return Err(Error::InvalidInput("timestamps must be strictly increasing".into()));
        }
        Ok((&positions[b] - &positions[a]) / dt)
    };
    (0..n)
        .map(|i| match i {
            0 => diff(0, 1),
            i if i == n - 1 => diff(n - 2, n - 1),
            i => diff(i - 1, i + 1),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_without_velocities_is_differenced() {
        let text = "t,x,y\n0,0,0\n1,1,2\n2,2,4\n";
        let traj = PoseTrajectory::read_csv(text.as_bytes()).unwrap();
        assert!(traj.velocities_estimated);
        assert_eq!(traj.velocities[1], DVector::from_vec(vec![1.0, 2.0]));
    }

    #[test]
    fn csv_round_trip_with_orientation() {
        let text = "t,x,y,z,vx,vy,vz,qw,qx,qy,qz\n0,1,2,3,0.1,0.2,0.3,1,0,0,0\n0.5,1,2,3,0,0,0,0,1,0,0\n";
        let traj = PoseTrajectory::read_csv(text.as_bytes()).unwrap();
        assert_eq!(traj.dim(), 3);
        assert_eq!(traj.orientations.len(), 2);
        let mut out = Vec::new();
        traj.write_csv(&mut out).unwrap();
        let again = PoseTrajectory::read_csv(out.as_slice()).unwrap();
        assert_eq!(again, traj);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(PoseTrajectory::read_csv("t,x,y\n0,a,1\n".as_bytes()).is_err());
        assert!(PoseTrajectory::read_csv("x,y\n0,1\n".as_bytes()).is_err());
    }
}
