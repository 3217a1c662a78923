//! File formats: projection stacks, slices, matrices, trajectories, motion
//! models, regressor datasets and gray-level previews.
//!
//! Binary formats are little-endian with a four-byte magic. CSV files use
//! '.' as decimal separator and a header row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionMatrix, RigidMotion, ScanGeometry};
use crate::image::{normalize_for_display, SliceImage};
use crate::motion::{MotionTrajectory, SplineMotionModel};
use crate::phantom::ProjectionStack;

const STACK_MAGIC: &[u8; 4] = b"CBPS";
const STACK_VERSION: u16 = 1;
const SLICE_MAGIC: &[u8; 4] = b"CBSL";
const SLICE_VERSION: u32 = 1;

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// CRC-32 of a file's contents.
pub fn file_checksum(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&read_bytes(path)?))
}

fn f32_payload(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn parse_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Sidecar holding the acquisition geometry of a stack file.
pub fn geometry_sidecar(stack_path: &Path) -> PathBuf {
    let mut name = stack_path.as_os_str().to_owned();
    name.push(".toml");
    PathBuf::from(name)
}

pub fn write_geometry(path: &Path, geometry: &ScanGeometry) -> Result<()> {
    let text = toml::to_string(geometry).map_err(|e| Error::Config(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_geometry(path: &Path) -> Result<ScanGeometry> {
    let geometry: ScanGeometry = toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    geometry.validate()?;
    Ok(geometry)
}

/// Writes the 16-byte header, f32 samples in view, row, column order and
/// the geometry sidecar.
pub fn write_stack(path: &Path, stack: &ProjectionStack) -> Result<()> {
    let g = stack.geometry();
    let n_views = u16::try_from(g.n_views)
        .map_err(|_| Error::Contract(format!("{} views exceed the stack format limit", g.n_views)))?;
    let mut bytes = Vec::with_capacity(16 + 4 * stack.data().len());
    bytes.extend_from_slice(STACK_MAGIC);
    bytes.extend_from_slice(&STACK_VERSION.to_le_bytes());
    bytes.extend_from_slice(&n_views.to_le_bytes());
    bytes.extend_from_slice(&(g.detector_rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(g.detector_cols as u32).to_le_bytes());
    bytes.extend(f32_payload(stack.data().iter().copied()));
    write_bytes(path, &bytes)?;
    write_geometry(&geometry_sidecar(path), g)
}

pub fn read_stack(path: &Path) -> Result<ProjectionStack> {
    let bytes = read_bytes(path)?;
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 16 || &bytes[..4] != STACK_MAGIC {
        return Err(bad("not a projection stack (bad magic or short header)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STACK_VERSION {
        return Err(bad(format!("unsupported stack version {version}")));
    }
    let n_views = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = n_views * rows * cols * 4;
    if bytes.len() - 16 != expected {
        return Err(bad(format!(
            "payload has {} bytes, header implies {expected}",
            bytes.len() - 16
        )));
    }
    let geometry = read_geometry(&geometry_sidecar(path))?;
    if (geometry.n_views, geometry.detector_rows, geometry.detector_cols) != (n_views, rows, cols) {
        return Err(bad("header dimensions disagree with the geometry sidecar".into()));
    }
    ProjectionStack::from_data(geometry, parse_f32s(&bytes[16..]))
}

/// Magic, version, grid size, fov (f32), then f32 pixels row by row.
pub fn write_slice(path: &Path, img: &SliceImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * img.pixels().len());
    bytes.extend_from_slice(SLICE_MAGIC);
    bytes.extend_from_slice(&SLICE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(img.size() as u32).to_le_bytes());
    bytes.extend_from_slice(&(img.fov_mm() as f32).to_le_bytes());
    bytes.extend(f32_payload(img.pixels().iter().copied()));
    write_bytes(path, &bytes)
}

pub fn read_slice(path: &Path) -> Result<SliceImage> {
    let bytes = read_bytes(path)?;
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 16 || &bytes[..4] != SLICE_MAGIC {
        return Err(bad("not a slice file (bad magic or short header)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SLICE_VERSION {
        return Err(bad(format!("unsupported slice version {version}")));
    }
    let size = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let fov = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    if bytes.len() - 16 != size * size * 4 {
        return Err(bad(format!("payload does not hold {size}x{size} pixels")));
    }
    SliceImage::from_pixels(size, fov, 0.0, parse_f32s(&bytes[16..]))
}

fn format_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",")
}

/// One matrix per line, 12 row-major entries.
pub fn write_matrices(path: &Path, matrices: &[ProjectionMatrix]) -> Result<()> {
    let mut out = String::from("p00,p01,p02,p03,p10,p11,p12,p13,p20,p21,p22,p23\n");
    for m in matrices {
        out.push_str(&format_row(&m.to_row_major()));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

fn read_numeric_rows(path: &Path, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_reader(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != width {
            return Err(Error::format(
                path,
                format!("row {} has {} fields, expected {width}", line + 1, record.len()),
            ));
        }
        let row = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", line + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_matrices(path: &Path) -> Result<Vec<ProjectionMatrix>> {
    read_numeric_rows(path, 12)?
        .into_iter()
        .map(|r| {
            let m = nalgebra::Matrix3x4::from_row_slice(&r);
            ProjectionMatrix::new(m)
        })
        .collect()
}

/// Per view: index, z rotation in degrees, 12 row-major entries of the
/// rigid transform.
pub fn write_trajectory(path: &Path, trajectory: &MotionTrajectory) -> Result<()> {
    let mut out = String::from("view,angle_deg,m00,m01,m02,m03,m10,m11,m12,m13,m20,m21,m22,m23\n");
    for (i, (m, angle)) in trajectory.motions().iter().zip(trajectory.z_angles()).enumerate() {
        out.push_str(&format!("{i},{angle:e},{}\n", format_row(&m.to_row_major())));
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<MotionTrajectory> {
    let rows = read_numeric_rows(path, 14)?;
    let mut motions = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        if row[0] != k as f64 {
            return Err(Error::format(path, format!("row {} is labelled view {}", k + 1, row[0])));
        }
        let entries: [f64; 12] = row[2..].try_into().unwrap();
        motions.push(RigidMotion::from_row_major(&entries)?);
    }
    Ok(MotionTrajectory::new(motions))
}

pub fn write_motion_model(path: &Path, model: &SplineMotionModel) -> Result<()> {
    let text = toml::to_string(model).map_err(|e| Error::Config(e.to_string()))?;
    write_bytes(path, text.as_bytes())
}

pub fn read_motion_model(path: &Path) -> Result<SplineMotionModel> {
    let model: SplineMotionModel =
        toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    model.validate()?;
    Ok(model)
}

/// Binary 8-bit PGM of a windowed slice.
pub fn write_pgm(path: &Path, img: &SliceImage, window_lo: f64, window_hi: f64) -> Result<()> {
    let gray = normalize_for_display(img, window_lo, window_hi)?;
    let mut bytes = format!("P5\n{} {}\n255\n", img.size(), img.size()).into_bytes();
    bytes.extend_from_slice(&gray);
    write_bytes(path, &bytes)
}

pub fn write_gray_png(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer(path, pixels, width, height, image::ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// One row of a regressor dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image: PathBuf,
    pub rpe_label: f64,
    pub seed: u64,
    pub trajectory: PathBuf,
}

pub fn write_dataset_manifest(path: &Path, entries: &[DatasetEntry]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for e in entries {
        writer.serialize(e).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &bytes)
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_dataset_manifest(path: &Path) -> Result<Vec<DatasetEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_reader(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
    reader
        .deserialize::<DatasetEntry>()
        .map(|r| {
            let mut e = r.map_err(|e| Error::format(path, e.to_string()))?;
            if e.image.is_relative() {
                e.image = base.join(&e.image);
            }
            if e.trajectory.is_relative() {
                e.trajectory = base.join(&e.trajectory);
            }
            Ok(e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_circular_trajectory;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("cbct-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn stack_round_trip_at_single_precision() {
        let g = ScanGeometry {
            n_views: 3,
            detector_rows: 2,
            detector_cols: 4,
            ..ScanGeometry::default()
        };
        let data: Vec<f64> = (0..24).map(|k| k as f64 * 0.25).collect();
        let stack = ProjectionStack::from_data(g, data).unwrap();
        let p = tmp("s.cbps");
        write_stack(&p, &stack).unwrap();
        let back = read_stack(&p).unwrap();
        assert_eq!(back, stack);
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"CBPS");
        assert_eq!(bytes.len(), 16 + 24 * 4);
        fs::write(&p, &bytes[..30]).unwrap();
        assert!(matches!(read_stack(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn slice_round_trip() {
        let img = SliceImage::from_pixels(2, 50.0, 0.0, vec![0.5, 1.0, -2.0, 3.25]).unwrap();
        let p = tmp("a.cbsl");
        write_slice(&p, &img).unwrap();
        assert_eq!(read_slice(&p).unwrap(), img);
    }

    #[test]
    fn matrices_and_trajectories_round_trip() {
        let g = ScanGeometry {
            n_views: 4,
            ..ScanGeometry::default()
        };
        let m = make_circular_trajectory(&g).unwrap();
        let p = tmp("m.csv");
        write_matrices(&p, &m).unwrap();
        let back = read_matrices(&p).unwrap();
        for (a, b) in m.iter().zip(&back) {
            assert_eq!(a.to_row_major(), b.to_row_major());
        }
        let traj = MotionTrajectory::from_z_angles(&[0.0, 0.3, -1.25, 0.0]);
        let p = tmp("t.csv");
        write_trajectory(&p, &traj).unwrap();
        assert_eq!(read_trajectory(&p).unwrap(), traj);
    }

    #[test]
    fn motion_model_round_trip() {
        let model = SplineMotionModel::equispaced(100, vec![0.0, 0.5, -0.25, 0.0]);
        let p = tmp("model.toml");
        write_motion_model(&p, &model).unwrap();
        assert_eq!(read_motion_model(&p).unwrap(), model);
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let entries = vec![DatasetEntry {
            image: "img/0.cbsl".into(),
            rpe_label: 0.25,
            seed: 7,
            trajectory: "traj/0.csv".into(),
        }];
        let p = tmp("manifest.csv");
        write_dataset_manifest(&p, &entries).unwrap();
        let back = read_dataset_manifest(&p).unwrap();
        assert_eq!(back[0].image, p.parent().unwrap().join("img/0.cbsl"));
        assert_eq!(back[0].rpe_label, 0.25);
    }

    #[test]
    fn pgm_header_and_size() {
        let img = SliceImage::from_pixels(2, 1.0, 0.0, vec![0.5, 2.0, 1.0, 1.25]).unwrap();
        let p = tmp("a.pgm");
        write_pgm(&p, &img, 0.5, 2.0).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 4);
    }
}
