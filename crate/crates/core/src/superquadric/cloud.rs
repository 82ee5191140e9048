//! Point clouds and their two on-disk encodings: ASCII XYZ and the binary
//! `SQPC` container (magic, little-endian `u32` count, `f64` triples).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQPC_MAGIC: &[u8; 4] = b"SQPC";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting empty input and non-finite coordinates.
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("point cloud coordinate"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    pub fn read_xyz<R: Read>(reader: R) -> Result<Self> {
        let mut points = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let coords: Vec<f64> = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    what: "xyz point cloud",
                    detail: format!("line {}: {e}", lineno + 1),
                })?;
            if coords.len() != 3 {
                return Err(Error::Parse {
                    what: "xyz point cloud",
                    detail: format!("line {}: expected 3 values, got {}", lineno + 1, coords.len()),
                });
            }
            points.push(Vector3::new(coords[0], coords[1], coords[2]));
        }
        Self::new(points)
    }

    pub fn write_xyz<W: Write>(&self, mut writer: W) -> Result<()> {
        for p in &self.points {
            writeln!(writer, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn read_sqpc<R: Read>(mut reader: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != SQPC_MAGIC {
            return Err(Error::Parse {
                what: "SQPC point cloud",
                detail: format!("bad magic {magic:?}"),
            });
        }
        let mut count = [0u8; 4];
        reader.read_exact(&mut count)?;
        let count = u32::from_le_bytes(count) as usize;
        let mut points = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            let mut p = [0.0; 3];
            for c in &mut p {
                reader.read_exact(&mut buf)?;
                *c = f64::from_le_bytes(buf);
            }
            points.push(Vector3::new(p[0], p[1], p[2]));
        }
        Self::new(points)
    }

    pub fn write_sqpc<W: Write>(&self, mut writer: W) -> Result<()> {
        let count = u32::try_from(self.points.len())
            .map_err(|_| Error::InvalidParameter("cloud too large for SQPC".into()))?;
        writer.write_all(SQPC_MAGIC)?;
        writer.write_all(&count.to_le_bytes())?;
        for p in &self.points {
            for c in p.iter() {
                writer.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Loads either encoding, sniffing the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(SQPC_MAGIC) {
            Self::read_sqpc(bytes.as_slice())
        } else {
            Self::read_xyz(bytes.as_slice())
        }
    }

    /// Saves as SQPC when the extension is `.sqpc`, otherwise as XYZ.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        match path.extension().and_then(|e| e.to_str()) {
            Some("sqpc") => self.write_sqpc(file),
            _ => self.write_xyz(file),
        }
    }
}
