//! Prior files and 8-bit image files.
//!
//! Prior layout (little-endian): the 8-byte tag `PPRIOR01`, then `u32` kind
//! (0 = GMM, 1 = dictionary), `u32` patch size, `u32` channels. A GMM
//! continues with `u32` K, K weights, K·d mean values and, per component,
//! the rows of the lower Cholesky factor (`d(d+1)/2` values). A dictionary
//! continues with `u32` N and N·d atom values. Values are `f64`.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, ExtendedColorType, ImageEncoder, ImageError, ImageReader};
use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::prior::{DictionaryPrior, GmmPrior, PatchPrior, Prior};

pub const PRIOR_MAGIC: &[u8; 8] = b"PPRIOR01";
const KIND_GMM: u32 = 0;
const KIND_DICTIONARY: u32 = 1;

/// A prior together with the patch geometry it was trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorFile {
    pub patch_size: usize,
    pub channels: usize,
    pub prior: Prior,
}

impl PriorFile {
    pub fn new(patch_size: usize, channels: usize, prior: Prior) -> Result<Self> {
        if patch_size == 0 || channels == 0 {
            return Err(invalid("patch size and channel count must be positive"));
        }
        if prior.dim() != patch_size * patch_size * channels {
            return Err(invalid(format!(
                "prior dimension {} does not match {patch_size}x{patch_size}x{channels} patches",
                prior.dim()
            )));
        }
        Ok(Self { patch_size, channels, prior })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PRIOR_MAGIC);
        let put_u32 = |out: &mut Vec<u8>, v: usize| -> Result<()> {
            let v = u32::try_from(v).map_err(|_| invalid(format!("count {v} does not fit in 32 bits")))?;
            out.extend_from_slice(&v.to_le_bytes());
            Ok(())
        };
        let put_f64 = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
        let kind = match self.prior {
            Prior::Gmm(_) => KIND_GMM,
            Prior::Dictionary(_) => KIND_DICTIONARY,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        put_u32(&mut out, self.patch_size)?;
        put_u32(&mut out, self.channels)?;
        match &self.prior {
            Prior::Gmm(g) => {
                let d = g.dim();
                put_u32(&mut out, g.components())?;
                g.weights().iter().for_each(|&w| put_f64(&mut out, w));
                for k in 0..g.components() {
                    g.mean(k).iter().for_each(|&v| put_f64(&mut out, v));
                }
                for k in 0..g.components() {
                    let l = g.cholesky_factor(k);
                    for i in 0..d {
                        for j in 0..=i {
                            put_f64(&mut out, l[(i, j)]);
                        }
                    }
                }
            }
            Prior::Dictionary(dict) => {
                put_u32(&mut out, dict.len())?;
                dict.atoms().iter().flatten().for_each(|&v| put_f64(&mut out, v));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != PRIOR_MAGIC {
            return Err(Error::Format("not a prior file (bad magic or unsupported version)".into()));
        }
        let kind = r.u32()?;
        let patch_size = r.u32()? as usize;
        let channels = r.u32()? as usize;
        if patch_size == 0 || channels == 0 {
            return Err(Error::Format("patch size and channel count must be positive".into()));
        }
        let d = patch_size
            .checked_mul(patch_size)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format("patch dimensions overflow".into()))?;
        let prior = match kind {
            KIND_GMM => {
                let k = r.u32()? as usize;
                if k == 0 {
                    return Err(Error::Format("GMM has no components".into()));
                }
                let tri = d * (d + 1) / 2;
                r.expect_remaining(k.saturating_mul(1 + d + tri).saturating_mul(8))?;
                let weights = r.f64s(k)?;
                let means = (0..k).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
                let mut factors = Vec::with_capacity(k);
                for _ in 0..k {
                    let mut l = DMatrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..=i {
                            l[(i, j)] = r.f64()?;
                        }
                    }
                    factors.push(l);
                }
                let gmm = GmmPrior::from_cholesky(weights, means, factors).map_err(|e| match e {
                    Error::InvalidArgument(m) => Error::Format(m),
                    other => other,
                })?;
                Prior::Gmm(gmm)
            }
            KIND_DICTIONARY => {
                let n = r.u32()? as usize;
                r.expect_remaining(n.saturating_mul(d).saturating_mul(8))?;
                let atoms = (0..n).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
                Prior::Dictionary(DictionaryPrior::new(atoms).map_err(|e| Error::Format(e.to_string()))?)
            }
            other => return Err(Error::Format(format!("unknown prior kind {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after prior", bytes.len() - r.pos)));
        }
        Ok(Self { patch_size, channels, prior })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("prior file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn expect_remaining(&self, n: usize) -> Result<()> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("prior file is truncated".into()));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn save_prior(file: &PriorFile, path: impl AsRef<Path>) -> Result<()> {
    let bytes = file.to_bytes()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn load_prior(path: impl AsRef<Path>) -> Result<PriorFile> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    PriorFile::from_bytes(&bytes)
}

fn image_error(e: ImageError) -> Error {
    match e {
        ImageError::IoError(io) => Error::Io(io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads an 8-bit PNG, PGM or PPM. Gray images get one channel, color
/// images three; alpha is dropped.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = ImageReader::open(path)?.with_guessed_format()?.decode().map_err(image_error)?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match decoded.color() {
        ColorType::L8 | ColorType::La8 => (1, decoded.into_luma8().into_raw()),
        ColorType::Rgb8 | ColorType::Rgba8 => (3, decoded.into_rgb8().into_raw()),
        other => {
            return Err(Error::Format(format!("{}: unsupported pixel format {other:?} (8-bit only)", path.display())))
        }
    };
    Image::new(h, w, channels, raw.into_iter().map(|v| v as f64 / 255.0).collect())
}

pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

/// Writes `round(255·clamp(v, 0, 1))` as PNG (`.png`), PGM (`.pgm`, gray)
/// or PPM (`.ppm`, color), chosen by extension.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        c => return Err(invalid(format!("cannot write an image with {c} channels"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).unwrap_or_default();
    let (w, h) = (img.width() as u32, img.height() as u32);
    let file = BufWriter::new(File::create(path)?);
    match ext.as_str() {
        "png" => PngEncoder::new(file).write_image(&bytes, w, h, color).map_err(image_error),
        "pgm" | "ppm" => {
            let subtype = match (ext.as_str(), img.channels()) {
                ("pgm", 1) => PnmSubtype::Graymap(SampleEncoding::Binary),
                ("ppm", 3) => PnmSubtype::Pixmap(SampleEncoding::Binary),
                _ => {
                    return Err(invalid(format!(
                        ".{ext} cannot hold a {}-channel image",
                        img.channels()
                    )))
                }
            };
            PnmEncoder::new(file).with_subtype(subtype).write_image(&bytes, w, h, color).map_err(image_error)
        }
        other => Err(Error::Format(format!("unsupported image extension {other:?}"))),
    }
}
