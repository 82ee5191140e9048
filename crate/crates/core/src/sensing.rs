//! Observation synthesis: depth rendering of a rigidly moved point cloud and
//! assembly of the visuo-tactile observation vector.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::{DVector, Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PlanarPose;
use crate::pushsim::ContactForce;
use crate::superquadric::PointCloud;

pub const IMAGE_SIZE: usize = 64;
pub const VISUAL_LEN: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const OBSERVATION_LEN: usize = VISUAL_LEN + 2;
/// Depths mapped to gray levels, nearest first (m).
pub const DEPTH_RANGE: (f64, f64) = (0.3, 1.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Isometry3<f64>,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self::overhead(0.7)
    }
}

impl CameraModel {
    /// VGA camera looking straight down at the world origin from `height`
    /// metres above the table.
    pub fn overhead(height: f64) -> Self {
        // Camera x along world x, camera y along world -y, optical axis down.
        let rotation = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        let camera_to_world = Isometry3::from_parts(Translation3::new(0.0, 0.0, height), rotation);
        Self {
            fx: 615.0,
            fy: 615.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
            world_to_camera: camera_to_world.inverse(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidParameter("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Camera-frame depth and pixel coordinates at full resolution.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera.transform_point(&Point3::from(*p));
        (c.z > 0.0).then(|| (c.z, self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Output pixel (row, col) for a full-resolution coordinate.
    pub fn output_pixel(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if !(u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64) {
            return None;
        }
        let col = (u * IMAGE_SIZE as f64 / self.width as f64) as usize;
        let row = (v * IMAGE_SIZE as f64 / self.height as f64) as usize;
        Some((row.min(IMAGE_SIZE - 1), col.min(IMAGE_SIZE - 1)))
    }
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    /// Intensity-weighted centroid (row, col), or `None` for a blank image.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sr, mut sc, mut sw) = (0.0, 0.0, 0.0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let w = self.get(r, c);
                sr += w * r as f64;
                sc += w * c as f64;
                sw += w;
            }
        }
        (sw > 0.0).then(|| (sr / sw, sc / sw))
    }

    /// Binary PGM (P5) with 8-bit levels.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.cols, self.rows)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(parse_err("truncated PGM header"));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P5" {
            return Err(parse_err("not a binary PGM"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(&e.to_string()));
        let (cols, rows, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if max == 0 || max > 255 {
            return Err(parse_err("unsupported PGM depth"));
        }
        let mut bytes = vec![0u8; rows * cols];
        reader.read_exact(&mut bytes)?;
        Ok(Self {
            rows,
            cols,
            data: bytes.iter().map(|&b| b as f64 / max as f64).collect(),
        })
    }
}

fn parse_err(detail: &str) -> Error {
    Error::Parse {
        what: "PGM",
        detail: detail.to_owned(),
    }
}

/// Linear depth-to-gray map: the near end of the range is white.
pub fn depth_to_gray(depth: f64) -> f64 {
    let (near, far) = DEPTH_RANGE;
    ((far - depth) / (far - near)).clamp(0.0, 1.0)
}

/// Renders the cloud after moving it by `pose_delta` (a world-frame planar
/// motion) into a 64×64 depth-gray image. Each point lights the single
/// pixel it projects into; the nearest point wins.
pub fn render(pose_delta: &PlanarPose, initial_cloud: &PointCloud, camera: &CameraModel) -> Result<GrayImage> {
    camera.validate()?;
    let mut depth = vec![f64::INFINITY; VISUAL_LEN];
    let mut in_front = false;
    for p in initial_cloud.points() {
        let Some((z, u, v)) = camera.project(&pose_delta.to_world(p)) else {
            continue;
        };
        in_front = true;
        if let Some((row, col)) = camera.output_pixel(u, v) {
            let d = &mut depth[row * IMAGE_SIZE + col];
            if z < *d {
                *d = z;
            }
        }
    }
    if !in_front {
        return Err(Error::EmptyRender);
    }
    Ok(GrayImage {
        rows: IMAGE_SIZE,
        cols: IMAGE_SIZE,
        data: depth.iter().map(|&z| if z.is_finite() { depth_to_gray(z) } else { 0.0 }).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseModel {
    pub sigma_vis: f64,
    pub sigma_tac: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_vis: 0.1,
            sigma_tac: 0.05,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_vis > 0.0 && self.sigma_tac > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParameter("observation noise must be positive".into()))
        }
    }
}

/// Flattened image followed by the two force components.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector(pub DVector<f64>);

impl ObservationVector {
    pub fn visual(&self) -> &[f64] {
        &self.0.as_slice()[..VISUAL_LEN]
    }

    pub fn tactile(&self) -> ContactForce {
        ContactForce {
            fx: self.0[VISUAL_LEN],
            fy: self.0[VISUAL_LEN + 1],
        }
    }

    pub fn unflatten(&self) -> (GrayImage, ContactForce) {
        (
            GrayImage {
                rows: IMAGE_SIZE,
                cols: IMAGE_SIZE,
                data: self.visual().to_vec(),
            },
            self.tactile(),
        )
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != OBSERVATION_LEN {
            return Err(Error::InvalidParameter(format!(
                "observation has {} entries, expected {OBSERVATION_LEN}",
                values.len()
            )));
        }
        Ok(Self(DVector::from_column_slice(values)))
    }
}

pub fn assemble_observation(image: &GrayImage, force: &ContactForce) -> Result<ObservationVector> {
    if image.rows != IMAGE_SIZE || image.cols != IMAGE_SIZE || image.data.len() != VISUAL_LEN {
        return Err(Error::ImageSize {
            expected: IMAGE_SIZE,
            rows: image.rows,
            cols: image.cols,
        });
    }
    let mut v = DVector::zeros(OBSERVATION_LEN);
    v.as_mut_slice()[..VISUAL_LEN].copy_from_slice(&image.data);
    v[VISUAL_LEN] = force.fx;
    v[VISUAL_LEN + 1] = force.fy;
    Ok(ObservationVector(v))
}

/// Diagonal of the observation covariance (variances).
pub fn observation_noise_diag(noise: &NoiseModel) -> DVector<f64> {
    let mut d = DVector::from_element(OBSERVATION_LEN, noise.sigma_vis * noise.sigma_vis);
    d[VISUAL_LEN] = noise.sigma_tac * noise.sigma_tac;
    d[VISUAL_LEN + 1] = noise.sigma_tac * noise.sigma_tac;
    d
}

/// One CSV row per observation.
pub fn write_observations_csv<W: Write>(writer: W, observations: &[ObservationVector]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for o in observations {
        w.write_record(o.0.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations_csv<R: Read>(reader: R) -> Result<Vec<ObservationVector>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let values = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                what: "observation CSV",
                detail: e.to_string(),
            })?;
        out.push(ObservationVector::from_slice(&values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: Vector3<f64>) -> PointCloud {
        PointCloud::new(vec![p]).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let cam = CameraModel::default();
        let img = render(&PlanarPose::identity(), &single(Vector3::new(0.0, 0.0, 0.1)), &cam).unwrap();
        let (row, col) = (
            (cam.cy * 64.0 / cam.height as f64) as usize,
            (cam.cx * 64.0 / cam.width as f64) as usize,
        );
        assert!(img.get(row, col) > 0.0);
        assert_eq!(img.data.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn points_behind_camera_are_an_error() {
        let cam = CameraModel::default();
        let err = render(&PlanarPose::identity(), &single(Vector3::new(0.0, 0.0, 2.0)), &cam).unwrap_err();
        assert!(matches!(err, Error::EmptyRender));
    }

    #[test]
    fn nearer_points_are_brighter() {
        assert!(depth_to_gray(0.5) > depth_to_gray(0.6));
        assert_eq!(depth_to_gray(0.3), 1.0);
        assert_eq!(depth_to_gray(1.2), 0.0);
    }

    #[test]
    fn layout_and_round_trip() {
        let mut img = GrayImage::zeros(64, 64);
        img.set(3, 5, 1.0);
        let f = ContactForce { fx: 0.5, fy: -0.25 };
        let obs = assemble_observation(&img, &f).unwrap();
        assert_eq!(obs.0.len(), 4098);
        assert_eq!(obs.0[64 * 3 + 5], 1.0);
        assert_eq!(obs.0[4096], 0.5);
        assert_eq!(obs.0[4097], -0.25);
        assert_eq!(obs.unflatten(), (img, f));
        let zero = assemble_observation(&GrayImage::zeros(64, 64), &ContactForce::default()).unwrap();
        assert!(zero.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_size_is_rejected() {
        let err = assemble_observation(&GrayImage::zeros(32, 64), &ContactForce::default()).unwrap_err();
        assert!(matches!(err, Error::ImageSize { rows: 32, .. }));
    }

    #[test]
    fn noise_diagonal_holds_variances() {
        let d = observation_noise_diag(&NoiseModel {
            sigma_vis: 0.1,
            sigma_tac: 0.05,
        });
        assert_eq!(d.len(), 4098);
        assert!(d.iter().take(4096).all(|&v| (v - 0.01).abs() < 1e-15));
        assert!((d[4096] - 0.0025).abs() < 1e-15 && (d[4097] - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn pgm_and_csv_round_trip() {
        let mut img = GrayImage::zeros(64, 64);
        img.set(10, 20, 1.0);
        img.set(11, 20, 128.0 / 255.0);
        let mut buf = Vec::new();
        img.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(GrayImage::read_pgm(buf.as_slice()).unwrap(), img);

        let obs = assemble_observation(&img, &ContactForce { fx: 0.1, fy: 0.2 }).unwrap();
        let mut csv = Vec::new();
        write_observations_csv(&mut csv, &[obs.clone(), obs.clone()]).unwrap();
        assert_eq!(read_observations_csv(csv.as_slice()).unwrap(), vec![obs.clone(), obs]);
    }
}
