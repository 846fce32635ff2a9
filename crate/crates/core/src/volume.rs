//! Image and volume containers, raw/JSON and PGM stack I/O, and the
//! resampling primitives used before analysis.
//!
//! Voxels are stored X-fastest, then Y, then Z: `index = x + nx * (y + ny * z)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lateral pixel size and Z-step of the high-resolution acquisition, in nm.
pub const HR_SPACING_NM: [f64; 3] = [100.0, 100.0, 300.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }

    /// Declared data range for integer types.
    pub fn range(self) -> Option<(f32, f32)> {
        match self {
            Dtype::U8 => Some((0.0, 255.0)),
            Dtype::U16 => Some((0.0, 65535.0)),
            Dtype::F32 => None,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "u16" => Ok(Dtype::U16),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::invalid(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Sidecar header of a `.raw` payload. The payload is always little-endian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub dtype: Dtype,
    pub voxel_size_nm: [f64; 3],
}

impl StackHeader {
    pub fn payload_len(&self) -> usize {
        self.width * self.height * self.depth * self.dtype.size()
    }
}

/// 3D scalar volume with anisotropic voxel spacing in nm.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub intensity_range: (f32, f32),
    pub voxels: Vec<f32>,
}

impl ImageStack {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("non-positive spacing {spacing:?}")));
        }
        if voxels.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::dims(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let intensity_range = observed_range(&voxels);
        Ok(ImageStack {
            dims,
            spacing,
            intensity_range,
            voxels,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        ImageStack::new(dims, spacing, vec![0.0; dims[0] * dims[1] * dims[2]])
            .expect("valid zero stack")
    }

    /// Builds a stack from equally sized 2D slices.
    pub fn from_slices(slices: &[Image2D], spacing: [f64; 3]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::invalid("no slices"))?;
        let (w, h) = (first.width, first.height);
        let mut voxels = Vec::with_capacity(w * h * slices.len());
        for s in slices {
            if s.width != w || s.height != h {
                return Err(Error::dims("slices differ in size"));
            }
            voxels.extend_from_slice(&s.data);
        }
        ImageStack::new([w, h, slices.len()], spacing, voxels)
    }

    pub fn with_range(mut self, range: (f32, f32)) -> Self {
        self.intensity_range = range;
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn data_range(&self) -> f32 {
        self.intensity_range.1 - self.intensity_range.0
    }

    pub fn slice(&self, z: usize) -> Image2D {
        let n = self.dims[0] * self.dims[1];
        Image2D {
            width: self.dims[0],
            height: self.dims[1],
            data: self.voxels[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Image2D> {
        (0..self.dims[2]).map(|z| self.slice(z)).collect()
    }
}

/// Single 2D image, row-major (`index = x + width * y`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image2D {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dims(format!(
                "{} pixels for {width}x{height}",
                data.len()
            )));
        }
        Ok(Image2D {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image2D {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image2D {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[x + self.width * y] = v;
    }

    pub fn same_dims(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn min_max(&self) -> (f32, f32) {
        observed_range(&self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image2D {
        Image2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Boolean volume sharing the geometry of the stack it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub bits: Vec<bool>,
}

impl BinaryVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::dims(format!("{} bits for dims {dims:?}", bits.len())));
        }
        Ok(BinaryVolume {
            dims,
            spacing,
            bits,
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        BinaryVolume {
            dims,
            spacing,
            bits: vec![false; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn slice(&self, z: usize) -> Vec<bool> {
        let n = self.dims[0] * self.dims[1];
        self.bits[z * n..(z + 1) * n].to_vec()
    }

    pub fn to_stack(&self) -> ImageStack {
        let voxels = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        ImageStack::new(self.dims, self.spacing, voxels)
            .expect("binary volume geometry is valid")
            .with_range((0.0, 1.0))
    }
}

fn observed_range(values: &[f32]) -> (f32, f32) {
    values
        .iter()
        .fold(None, |acc: Option<(f32, f32)>, &v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .unwrap_or((0.0, 0.0))
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

/// True if `path` names a PGM directory or an existing `.json` + `.raw` pair.
pub fn stack_exists(path: impl AsRef<Path>) -> bool {
    let path = path.as_ref();
    if path.is_dir() {
        return true;
    }
    let (json, raw) = sidecar_paths(path);
    json.is_file() && raw.is_file()
}

/// Loads a stack from a `.json` + `.raw` pair, or from a directory of
/// binary PGM slices (sorted by file name) with the default HR spacing.
pub fn load_stack(path: impl AsRef<Path>) -> Result<ImageStack> {
    let path = path.as_ref();
    if path.is_dir() {
        return load_pgm_dir(path, HR_SPACING_NM);
    }
    let (json_path, raw_path) = sidecar_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: StackHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    let payload = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    decode_payload(&header, &payload)
}

pub fn decode_payload(header: &StackHeader, payload: &[u8]) -> Result<ImageStack> {
    if header.payload_len() != payload.len() {
        return Err(Error::PayloadSize {
            expected: header.payload_len(),
            found: payload.len(),
        });
    }
    let voxels: Vec<f32> = match header.dtype {
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
        Dtype::U16 => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    let stack = ImageStack::new(
        [header.width, header.height, header.depth],
        header.voxel_size_nm,
        voxels,
    )?;
    Ok(match header.dtype.range() {
        Some(r) => stack.with_range(r),
        None => stack,
    })
}

/// Clamp-then-round-half-up quantization used for integer payloads.
#[inline]
pub fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, max) + 0.5).floor().min(max)
}

/// Writes `<stem>.json` and `<stem>.raw`.
pub fn save_stack(stack: &ImageStack, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(path.as_ref());
    let header = StackHeader {
        width: stack.dims[0],
        height: stack.dims[1],
        depth: stack.dims[2],
        dtype,
        voxel_size_nm: stack.spacing,
    };
    let mut payload = Vec::with_capacity(header.payload_len());
    match dtype {
        Dtype::U8 => payload.extend(stack.voxels.iter().map(|&v| quantize(v, 255.0) as u8)),
        Dtype::U16 => {
            for &v in &stack.voxels {
                payload.extend_from_slice(&(quantize(v, 65535.0) as u16).to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in &stack.voxels {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let mut f = fs::File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Reads every `*.pgm` file in `dir` in lexicographic order as one Z slice.
pub fn load_pgm_dir(dir: &Path, spacing: [f64; 3]) -> Result<ImageStack> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .pgm slices"),
        ));
    }
    let mut slices = Vec::with_capacity(files.len());
    let mut max_val = 0u32;
    for f in &files {
        let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
        let (img, maxval) = parse_pgm(&bytes).map_err(|msg| Error::Header {
            path: f.clone(),
            msg,
        })?;
        max_val = max_val.max(maxval);
        slices.push(img);
    }
    let range = if max_val > 255 {
        (0.0, 65535.0)
    } else {
        (0.0, 255.0)
    };
    Ok(ImageStack::from_slices(&slices, spacing)?.with_range(range))
}

/// Parses a binary (P5) PGM. Samples wider than 8 bits are big-endian.
pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(Image2D, u32), String> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if next_token(&mut pos)? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let parse = |s: String| s.parse::<u32>().map_err(|e| e.to_string());
    let width = parse(next_token(&mut pos)?)? as usize;
    let height = parse(next_token(&mut pos)?)? as usize;
    let maxval = parse(next_token(&mut pos)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("invalid maxval {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let sample = if maxval > 255 { 2 } else { 1 };
    let need = width * height * sample;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster needs {need} bytes"))?;
    let data = if sample == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    } else {
        raster.iter().map(|&b| b as f32).collect()
    };
    Ok((Image2D::new(width, height, data).map_err(|e| e.to_string())?, maxval))
}

pub fn write_pgm16(img: &Image2D, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        out.extend_from_slice(&(quantize(v, 65535.0) as u16).to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Linear resampling along Z with endpoint-anchored sample positions.
///
/// The new depth is `round(nz * factor)` and the reported Z spacing is
/// `sz / factor`; X and Y are untouched.
pub fn resample_z(stack: &ImageStack, factor: f64) -> Result<ImageStack> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("z factor must be > 0, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(stack.clone());
    }
    let [nx, ny, nz] = stack.dims;
    if nz < 2 {
        return Err(Error::invalid("resample_z needs at least two slices"));
    }
    let nz_out = ((nz as f64) * factor).round().max(1.0) as usize;
    let plane = nx * ny;
    let mut voxels = vec![0f32; plane * nz_out];
    voxels
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(zo, out)| {
            let pos = if nz_out == 1 {
                0.0
            } else {
                zo as f64 * (nz - 1) as f64 / (nz_out - 1) as f64
            };
            let z0 = (pos.floor() as usize).min(nz - 1);
            let z1 = (z0 + 1).min(nz - 1);
            let t = (pos - z0 as f64) as f32;
            let a = &stack.voxels[z0 * plane..(z0 + 1) * plane];
            let b = &stack.voxels[z1 * plane..(z1 + 1) * plane];
            for ((o, &va), &vb) in out.iter_mut().zip(a).zip(b) {
                *o = if t == 0.0 { va } else { va + (vb - va) * t };
            }
        });
    let mut spacing = stack.spacing;
    spacing[2] /= factor;
    Ok(ImageStack::new([nx, ny, nz_out], spacing, voxels)?.with_range(stack.intensity_range))
}

/// Nearest-neighbour block replication to an integer multiple of the source size.
pub fn upsample_nn(img: &Image2D, target_w: usize, target_h: usize) -> Result<Image2D> {
    if target_w % img.width != 0 || target_h % img.height != 0 {
        return Err(Error::invalid(format!(
            "{}x{} -> {target_w}x{target_h} is not an integer magnification",
            img.width, img.height
        )));
    }
    let (rx, ry) = (target_w / img.width, target_h / img.height);
    Ok(Image2D::from_fn(target_w, target_h, |x, y| img.get(x / rx, y / ry)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_u8_stack_loads() {
        let dir = tempfile::tempdir().unwrap();
        let header = StackHeader {
            width: 4,
            height: 4,
            depth: 1,
            dtype: Dtype::U8,
            voxel_size_nm: [100.0, 100.0, 300.0],
        };
        fs::write(dir.path().join("z.json"), serde_json::to_string(&header).unwrap()).unwrap();
        fs::write(dir.path().join("z.raw"), [0u8; 16]).unwrap();
        let s = load_stack(dir.path().join("z.json")).unwrap();
        assert_eq!(s.dims, [4, 4, 1]);
        assert!(s.voxels.iter().all(|&v| v == 0.0));
        assert_eq!(s.intensity_range, (0.0, 255.0));
    }

    #[test]
    fn u16_max_is_identity_converted() {
        let header = StackHeader {
            width: 2,
            height: 1,
            depth: 1,
            dtype: Dtype::U16,
            voxel_size_nm: [1.0; 3],
        };
        let s = decode_payload(&header, &[0xff, 0xff, 0, 0]).unwrap();
        assert_eq!(s.get(0, 0, 0), 65535.0);
    }

    #[test]
    fn size_mismatch_and_missing_file() {
        let header = StackHeader {
            width: 2,
            height: 2,
            depth: 1,
            dtype: Dtype::U8,
            voxel_size_nm: [1.0; 3],
        };
        assert!(matches!(
            decode_payload(&header, &[0; 3]),
            Err(Error::PayloadSize { expected: 4, found: 3 })
        ));
        assert!(matches!(load_stack("/nonexistent/x.json"), Err(Error::Io { .. })));
    }

    #[test]
    fn nan_in_f32_payload_rejected() {
        let header = StackHeader {
            width: 1,
            height: 1,
            depth: 1,
            dtype: Dtype::F32,
            voxel_size_nm: [1.0; 3],
        };
        let r = decode_payload(&header, &f32::NAN.to_le_bytes());
        assert!(matches!(r, Err(Error::NonFinite { index: 0 })));
    }

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize(255.7, 255.0), 255.0);
        assert_eq!(quantize(-3.0, 255.0), 0.0);
        // half-up oracle: floor(x + 1/2)
        for (v, want) in [(10.5f32, 11.0f32), (10.49, 10.0), (0.5, 1.0), (65534.5, 65535.0)] {
            assert_eq!(quantize(v, 65535.0), want, "{v}");
        }
    }

    #[test]
    fn pgm_directory_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.pgm", "a.pgm", "c.pgm"].iter().enumerate() {
            let img = Image2D::filled(3, 2, (i * 1000) as f32);
            write_pgm16(&img, &dir.path().join(name)).unwrap();
        }
        let s = load_stack(dir.path()).unwrap();
        assert_eq!(s.dims, [3, 2, 3]);
        assert_eq!(s.spacing, HR_SPACING_NM);
        assert_eq!(s.intensity_range, (0.0, 65535.0));
        // a.pgm was written second
        assert_eq!(s.get(0, 0, 0), 1000.0);
        assert_eq!(s.get(0, 0, 1), 0.0);
        assert_eq!(s.get(2, 1, 2), 2000.0);
    }

    #[test]
    fn resample_two_slices_by_two() {
        let s = ImageStack::new([1, 1, 2], [100.0, 100.0, 350.0], vec![0.0, 7.0]).unwrap();
        let r = resample_z(&s, 2.0).unwrap();
        assert_eq!(r.dims, [1, 1, 4]);
        let want = [0.0, 7.0 / 3.0, 14.0 / 3.0, 7.0];
        for (a, b) in r.voxels.iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(r.spacing[2], 175.0);
    }

    #[test]
    fn resample_isotropy_spacing() {
        let s = ImageStack::zeros([2, 2, 4], [100.0, 100.0, 350.0]);
        let r = resample_z(&s, 3.5).unwrap();
        assert_eq!(r.dims[2], 14);
        assert!((r.spacing[2] - 100.0).abs() < 1e-9);
        assert_eq!(resample_z(&s, 1.0).unwrap(), s);
        let single = ImageStack::zeros([2, 2, 1], [1.0; 3]);
        assert!(resample_z(&single, 2.0).is_err());
        assert!(resample_z(&single, 1.0).is_ok());
    }

    #[test]
    fn upsample_block_replicates() {
        let img = Image2D::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nn(&img, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [1., 1., 2., 2.,
                    1., 1., 2., 2.,
                    3., 3., 4., 4.,
                    3., 3., 4., 4.];
        assert_eq!(up.data, want);
        assert_eq!(upsample_nn(&img, 2, 2).unwrap(), img);
        assert!(upsample_nn(&img, 3, 4).is_err());
    }
}
