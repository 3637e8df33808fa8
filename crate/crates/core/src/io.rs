//! The `.arr` array format.
//!
//! One JSON header line followed by `\n` and the payload as little-endian
//! `f64`s. Images are stored column-major with shape `[N, N]`, sinograms
//! angle-major with shape `[n_angles, n_detectors]`, stacks of images with a
//! leading axis.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ImageGrid;
use crate::projector::{Image, Sinogram};
use crate::geometry::ScanGeometry;

pub const MAGIC: &str = "pipect-arr";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_hash: Option<String>,
    /// Physical side length of image grids, cm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_size_cm: Option<f64>,
    /// Region index of each slice of a mask stack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub magic: String,
    pub version: u32,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub meta: ArrayMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub header: ArrayHeader,
    pub data: Vec<f64>,
}

impl ArrayFile {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, meta: ArrayMeta) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::dimension("array payload", len, data.len()));
        }
        Ok(Self {
            header: ArrayHeader {
                magic: MAGIC.into(),
                version: VERSION,
                shape,
                dtype: DTYPE.into(),
                meta,
            },
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    pub fn meta(&self) -> &ArrayMeta {
        &self.header.meta
    }

    pub fn from_image(image: &Image, units: &str) -> Self {
        let g = image.grid();
        let meta = ArrayMeta {
            units: units.into(),
            grid_size_cm: Some(g.physical_size()),
            ..Default::default()
        };
        Self::new(vec![g.n_side(), g.n_side()], image.values().to_vec(), meta)
            .expect("image length matches its grid")
    }

    pub fn from_sinogram(sino: &Sinogram) -> Self {
        let g = sino.geometry();
        let meta = ArrayMeta {
            units: "1".into(),
            geometry_hash: Some(g.hash()),
            ..Default::default()
        };
        Self::new(vec![g.n_angles(), g.n_detectors()], sino.values().to_vec(), meta)
            .expect("sinogram length matches its geometry")
    }

    /// Interprets a `[N, N]` array as an image; the grid size is read from
    /// the header unless given.
    pub fn to_image(&self, grid_size_cm: Option<f64>) -> Result<Image> {
        let &[a, b] = self.shape() else {
            return Err(Error::Format(format!("expected a 2D image, got shape {:?}", self.shape())));
        };
        if a != b {
            return Err(Error::Format(format!("image must be square, got {a} x {b}")));
        }
        let size = grid_size_cm
            .or(self.meta().grid_size_cm)
            .ok_or_else(|| Error::Format("image file has no grid size".into()))?;
        Image::from_values(ImageGrid::new(a, size)?, self.data.clone())
    }

    /// Interprets the array as a sinogram for `geometry`, checking shape and
    /// (when present) the geometry hash.
    pub fn to_sinogram(&self, geometry: &ScanGeometry) -> Result<Sinogram> {
        let want = [geometry.n_angles(), geometry.n_detectors()];
        if self.shape() != want {
            return Err(Error::Format(format!(
                "sinogram shape {:?} does not match geometry {:?}",
                self.shape(),
                want
            )));
        }
        if let Some(h) = &self.meta().geometry_hash {
            if *h != geometry.hash() {
                return Err(Error::Format("sinogram geometry hash does not match the configured geometry".into()));
            }
        }
        Sinogram::new(geometry.clone(), self.data.clone())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let line = serde_json::to_string(&self.header)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format("missing header line".into()));
        }
        let header: ArrayHeader = serde_json::from_slice(&line[..line.len() - 1])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.magic != MAGIC || header.version != VERSION || header.dtype != DTYPE {
            return Err(Error::Format(format!(
                "unsupported array file ({} v{} {})",
                header.magic, header.version, header.dtype
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let len: usize = header.shape.iter().product();
        if payload.len() != len * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                len * 8
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { header, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Writes a 2D array as an 8-bit grayscale PNG, mapping `[lo, hi]` to
/// `[0, 255]` and clamping outside values. Rows of the image become rows of
/// the picture.
pub fn write_png(array: &ArrayFile, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let &[rows, cols] = array.shape() else {
        return Err(Error::Format(format!("PNG export needs a 2D array, got {:?}", array.shape())));
    };
    if !(hi > lo) {
        return Err(Error::InvalidConfig(format!("empty color range [{lo}, {hi}]")));
    }
    let mut pixels = vec![0u8; rows * cols];
    // column-major storage: element (r, c) sits at c * rows + r
    for c in 0..cols {
        for r in 0..rows {
            let v = array.data[c * rows + r];
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            pixels[r * cols + c] = (t * 255.0).round() as u8;
        }
    }
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut enc = png::Encoder::new(f, cols as u32, rows as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    w.write_image_data(&pixels)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    Ok(())
}
