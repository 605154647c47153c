//! Image and measurement containers on disk.
//!
//! A container is a raw little-endian payload plus a JSON sidecar at the
//! same path with the extension replaced by `json`. Payloads are float32
//! whenever every value survives the narrowing exactly; otherwise float64
//! is written and the sidecar says so, so reading back is always bit-exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Dims, ImageGrid, Layout, MeasurementKind, Measurements};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Image,
    Counts,
    Expected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: ContainerKind,
    dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layout: Option<[usize; 3]>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn encode(values: &[f64]) -> (Dtype, Vec<u8>) {
    let narrow = values.iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
    if narrow {
        (Dtype::F32, values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect())
    } else {
        (Dtype::F64, values.iter().flat_map(|&v| v.to_le_bytes()).collect())
    }
}

fn decode(bytes: &[u8], dtype: Dtype, path: &Path) -> Result<Vec<f64>> {
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if bytes.len() % width != 0 {
        return Err(Error::Shape(format!("{}: payload of {} bytes is not a whole number of values", path.display(), bytes.len())));
    }
    Ok(match dtype {
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    })
}

fn write_container(path: &Path, values: &[f64], mut sidecar: Sidecar) -> Result<()> {
    let (dtype, payload) = encode(values);
    sidecar.dtype = dtype;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn read_container(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Sidecar { path: side.clone(), msg: e.to_string() })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode(&bytes, sidecar.dtype, path)?;
    Ok((sidecar, values))
}

pub fn write_image(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let d = img.dims();
    let sidecar = Sidecar {
        kind: ContainerKind::Image,
        dtype: Dtype::F32,
        dims: Some(d.as_array()),
        spacing: Some(img.spacing()),
        layout: None,
    };
    write_container(path.as_ref(), img.data(), sidecar)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let (sidecar, values) = read_container(path)?;
    let side = sidecar_path(path);
    if sidecar.kind != ContainerKind::Image {
        return Err(Error::Sidecar { path: side, msg: format!("expected an image, found {:?}", sidecar.kind) });
    }
    let [nx, ny, nz] = sidecar.dims.ok_or_else(|| Error::Sidecar { path: side.clone(), msg: "missing dims".into() })?;
    let img = ImageGrid::from_vec(Dims::new(nx, ny, nz), values)?;
    Ok(match sidecar.spacing {
        Some(s) => img.with_spacing(s),
        None => img,
    })
}

pub fn write_measurements(m: &Measurements, path: impl AsRef<Path>) -> Result<()> {
    let l = m.layout();
    let kind = match m.kind() {
        MeasurementKind::Counts => ContainerKind::Counts,
        MeasurementKind::Expected => ContainerKind::Expected,
    };
    let sidecar = Sidecar {
        kind,
        dtype: Dtype::F32,
        dims: None,
        spacing: None,
        layout: Some([l.n_angles, l.n_radial, l.n_planes]),
    };
    write_container(path.as_ref(), m.bins(), sidecar)
}

pub fn read_measurements(path: impl AsRef<Path>) -> Result<Measurements> {
    let path = path.as_ref();
    let (sidecar, values) = read_container(path)?;
    let side = sidecar_path(path);
    let kind = match sidecar.kind {
        ContainerKind::Counts => MeasurementKind::Counts,
        ContainerKind::Expected => MeasurementKind::Expected,
        ContainerKind::Image => {
            return Err(Error::Sidecar { path: side, msg: "expected measurements, found an image".into() })
        }
    };
    let [a, r, p] = sidecar.layout.ok_or_else(|| Error::Sidecar { path: side, msg: "missing layout".into() })?;
    Measurements::new(Layout::new(a, r, p), kind, values)
}

/// Writes one axial slice as an 8-bit binary PGM with a min-max window.
/// A constant slice maps to mid-gray.
pub fn export_graymap(img: &ImageGrid, slice_index: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = img.dims();
    if slice_index >= d.nz {
        return Err(Error::OutOfRange { index: slice_index, limit: d.nz });
    }
    let slice = img.slice_z(slice_index);
    let (lo, hi) = (slice.min(), slice.max());
    let pixels: Vec<u8> = if hi > lo {
        slice.data().iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    } else {
        vec![128; slice.len()]
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{} {}\n255\n", d.nx, d.ny).map_err(|e| Error::io(path, e))?;
    f.write_all(&pixels).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn small_image_round_trip() {
        let dir = tmp();
        let p = dir.path().join("a.f32");
        let img = ImageGrid::from_vec(Dims::planar(2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        write_image(&img, &p).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn payload_sizes() {
        let dir = tmp();
        let p = dir.path().join("one.f32");
        write_image(&ImageGrid::filled(Dims::new(1, 1, 1), 5.0), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 4);
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side["dims"], serde_json::json!([1, 1, 1]));

        let q = dir.path().join("z.f32");
        write_image(&ImageGrid::zeros(Dims::planar(32, 32)), &q).unwrap();
        assert_eq!(fs::metadata(&q).unwrap().len(), 4096);
    }

    #[test]
    fn wide_values_fall_back_to_double() {
        let dir = tmp();
        let p = dir.path().join("w.f32");
        let img = ImageGrid::from_vec(Dims::planar(3, 1), vec![0.1, 1.0 / 3.0, 2.5]).unwrap();
        write_image(&img, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 24);
        assert_eq!(read_image(&p).unwrap(), img);
    }

    #[test]
    fn short_payload_is_shape_error() {
        let dir = tmp();
        let p = dir.path().join("s.f32");
        write_image(&ImageGrid::zeros(Dims::planar(2, 2)), &p).unwrap();
        fs::write(&p, [0u8; 12]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tmp();
        let p = dir.path().join("n.f32");
        write_image(&ImageGrid::zeros(Dims::planar(2, 1)), &p).unwrap();
        let mut bytes = 1.0f32.to_le_bytes().to_vec();
        bytes.extend(f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_image(&p), Err(Error::NonFinite(1))));
    }

    #[test]
    fn missing_sidecar() {
        let dir = tmp();
        let p = dir.path().join("m.f32");
        fs::write(&p, [0u8; 4]).unwrap();
        assert!(matches!(read_image(&p), Err(Error::MissingSidecar(_))));
    }

    #[test]
    fn measurements_round_trip_keeps_kind() {
        let dir = tmp();
        let p = dir.path().join("y.f32");
        let m = Measurements::new(Layout::new(2, 3, 1), MeasurementKind::Counts, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        write_measurements(&m, &p).unwrap();
        assert_eq!(read_measurements(&p).unwrap(), m);
        assert!(read_image(&p).is_err());
    }

    fn read_pgm(p: &Path) -> Vec<u8> {
        let bytes = fs::read(p).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        bytes[header_end..].to_vec()
    }

    #[test]
    fn graymap_windowing() {
        let dir = tmp();
        let p = dir.path().join("c.pgm");
        export_graymap(&ImageGrid::filled(Dims::planar(4, 3), 7.0), 0, &p).unwrap();
        assert!(fs::read(&p).unwrap().starts_with(b"P5\n4 3\n255\n"));
        assert!(read_pgm(&p).iter().all(|&v| v == 128));

        let img = ImageGrid::from_vec(Dims::planar(2, 1), vec![0.0, 9.0]).unwrap();
        export_graymap(&img, 0, &p).unwrap();
        assert_eq!(read_pgm(&p), vec![0, 255]);
    }

    #[test]
    fn graymap_slice_bounds() {
        let dir = tmp();
        let img = ImageGrid::zeros(Dims::new(4, 4, 3));
        let err = export_graymap(&img, 3, dir.path().join("x.pgm")).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { index: 3, limit: 3 }));
    }
}
