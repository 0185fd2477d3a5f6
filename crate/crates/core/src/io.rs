//! Volume file formats: NIfTI-1 (`.nii`, `.nii.gz`) and a portable raw
//! format (little-endian `f32` array plus a JSON sidecar).

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volumes::{AxisCode, LabelMask, Volume};

/// A volume together with the header it was read from, so derived outputs
/// can be written back onto exactly the same grid.
#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub volume: Volume,
    pub header: NiftiHeader,
}

fn nifti_err(path: &Path, e: nifti::NiftiError) -> Error {
    match e {
        nifti::NiftiError::Io(io) => Error::io(path, io),
        e => Error::Nifti(format!("{}: {e}", path.display())),
    }
}

pub fn is_nifti(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

/// Reads a volume from NIfTI or raw+sidecar, depending on the extension.
pub fn read_volume(path: &Path) -> Result<LoadedVolume> {
    if is_nifti(path) {
        read_nifti(path)
    } else {
        let volume = read_raw(path)?;
        let header = header_for(&volume);
        Ok(LoadedVolume { volume, header })
    }
}

pub fn read_nifti(path: &Path) -> Result<LoadedVolume> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let data = obj.into_volume().into_ndarray::<f32>().map_err(|e| nifti_err(path, e))?;
    let shape = data.shape().to_vec();
    if shape.len() < 3 || shape[3..].iter().any(|&d| d != 1) {
        return Err(Error::Nifti(format!("{}: expected a 3D volume, got shape {shape:?}", path.display())));
    }
    let data = data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(ndarray::IxDyn(&shape[..3]))
        .and_then(|a| a.into_dimensionality::<Ix3>())
        .map_err(|e| Error::Nifti(format!("{}: {e}", path.display())))?;
    let spacing = [1, 2, 3].map(|i| {
        let p = header.pixdim[i].abs() as f64;
        if p > 0.0 {
            p
        } else {
            1.0
        }
    });
    let mut volume = Volume::new(data, spacing, axes_from_header(&header))?;
    volume.source = Some(path.to_path_buf());
    Ok(LoadedVolume { volume, header })
}

/// Derives the axis code from the sform (preferred) or qform; `None` when
/// neither is set or the mapping is degenerate.
pub fn axes_from_header(h: &NiftiHeader) -> Option<AxisCode> {
    let m: [[f64; 3]; 3] = if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        [0, 1, 2].map(|r| [0, 1, 2].map(|c| rows[r][c] as f64))
    } else if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), qfac * 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, qfac * 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), qfac * (a * a + d * d - b * b - c * c)],
        ]
    } else {
        return None;
    };
    let mut anatomical = [0; 3];
    let mut flipped = [false; 3];
    for axis in 0..3 {
        let col = [m[0][axis], m[1][axis], m[2][axis]];
        let (dominant, value) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, v)| (i, *v))?;
        if value == 0.0 {
            return None;
        }
        anatomical[axis] = dominant;
        flipped[axis] = value < 0.0;
    }
    AxisCode::new(anatomical, flipped)
}

/// A header whose sform encodes the volume's spacing and axis code.
pub fn header_for(volume: &Volume) -> NiftiHeader {
    let [x, y, z] = volume.shape();
    let mut h = NiftiHeader {
        dim: [3, x as u16, y as u16, z as u16, 1, 1, 1, 1],
        pixdim: [1.0, volume.spacing[0] as f32, volume.spacing[1] as f32, volume.spacing[2] as f32, 1.0, 1.0, 1.0, 1.0],
        sform_code: 0,
        qform_code: 0,
        ..NiftiHeader::default()
    };
    if let Some(axes) = volume.axes {
        let mut rows = [[0f32; 4]; 3];
        let anatomical = axes.anatomical();
        let flipped = axes.flipped();
        for axis in 0..3 {
            let sign = if flipped[axis] { -1.0 } else { 1.0 };
            rows[anatomical[axis]][axis] = sign * volume.spacing[axis] as f32;
        }
        h.srow_x = rows[0];
        h.srow_y = rows[1];
        h.srow_z = rows[2];
        h.sform_code = 1;
    }
    h.xyzt_units = 2;
    h
}

pub fn write_volume(path: &Path, volume: &Volume, reference: Option<&NiftiHeader>) -> Result<()> {
    if is_nifti(path) {
        let owned;
        let header = match reference {
            Some(h) => h,
            None => {
                owned = header_for(volume);
                &owned
            }
        };
        ensure_parent(path)?;
        WriterOptions::new(path)
            .reference_header(header)
            .write_nifti(&volume.data)
            .map_err(|e| nifti_err(path, e))
    } else {
        write_raw(path, volume)
    }
}

/// Writes a mask as `uint8` NIfTI, on the reference header's grid.
pub fn write_mask(path: &Path, mask: &LabelMask, reference: &NiftiHeader) -> Result<()> {
    ensure_parent(path)?;
    WriterOptions::new(path)
        .reference_header(reference)
        .write_nifti(mask.data())
        .map_err(|e| nifti_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let loaded = read_volume(path)?;
    Ok(LabelMask::from_nonzero(&loaded.volume.data))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

/// Sidecar for the raw format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub axes: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Raw layout: C order (last axis fastest), little-endian `f32`.
pub fn write_raw(path: &Path, volume: &Volume) -> Result<()> {
    ensure_parent(path)?;
    let bytes: Vec<u8> = volume.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = RawSidecar {
        shape: volume.shape(),
        spacing: volume.spacing,
        axes: volume.axes.map(|a| a.to_string()).unwrap_or_default(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    let side = sidecar_path(path);
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = sidecar.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::InvalidArgument(format!(
            "{}: {} bytes does not match shape {:?}",
            path.display(),
            bytes.len(),
            sidecar.shape
        )));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let data = Array3::from_shape_vec(sidecar.shape, values).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let axes = if sidecar.axes.is_empty() { None } else { Some(sidecar.axes.parse()?) };
    let mut volume = Volume::new(data, sidecar.spacing, axes)?;
    volume.source = Some(path.to_path_buf());
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn sample(axes: &str) -> Volume {
        let data = Array::from_shape_fn((5, 4, 3), |(i, j, k)| (i * 16 + j * 4 + k) as f32 * 0.5);
        Volume::new(data, [1.0, 1.5, 2.0], Some(axes.parse().unwrap())).unwrap()
    }

    #[test]
    fn nifti_round_trip_keeps_axes() {
        let dir = tempfile::tempdir().unwrap();
        for (code, name) in [("RAS", "a.nii"), ("LPS", "b.nii.gz"), ("ASR", "c.nii")] {
            let v = sample(code);
            let path = dir.path().join(name);
            write_volume(&path, &v, None).unwrap();
            let back = read_volume(&path).unwrap();
            assert_eq!(back.volume.data, v.data);
            assert_eq!(back.volume.axes, v.axes);
            assert_eq!(back.volume.spacing, v.spacing);
        }
    }

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample("SAR");
        let path = dir.path().join("v.raw");
        write_raw(&path, &v).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.axes, v.axes);
        let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(side["shape"], serde_json::json!([5, 4, 3]));
        assert_eq!(side["axes"], "SAR");
    }

    #[test]
    fn header_without_orientation_yields_none() {
        let mut v = sample("RAS");
        v.axes = None;
        assert_eq!(axes_from_header(&header_for(&v)), None);
    }

    #[test]
    fn qform_orientation() {
        // 180 degrees about z: x -> -x, y -> -y.
        let h = NiftiHeader { qform_code: 1, sform_code: 0, quatern_b: 0.0, quatern_c: 0.0, quatern_d: 1.0, ..NiftiHeader::default() };
        assert_eq!(axes_from_header(&h).unwrap().to_string(), "LPS");
    }

    #[test]
    fn mask_written_on_reference_grid() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample("LAS");
        let path = dir.path().join("img.nii.gz");
        write_volume(&path, &v, None).unwrap();
        let loaded = read_volume(&path).unwrap();
        let mask = LabelMask::from_nonzero(&loaded.volume.data.mapv(|x| u8::from(x > 10.0)));
        let mpath = dir.path().join("mask.nii.gz");
        write_mask(&mpath, &mask, &loaded.header).unwrap();
        let back = read_nifti(&mpath).unwrap();
        assert_eq!(back.header.srow_x, loaded.header.srow_x);
        assert_eq!(LabelMask::from_nonzero(&back.volume.data), mask);
    }
}
