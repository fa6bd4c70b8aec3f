//! Little-endian binary containers and PNG export.
//!
//! Every container starts with a four-byte magic and a `u32` version.
//! Integers are `u32`, reals are `f64`, complex values are `(re, im)` pairs.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::gmm::MeanGrid;
use crate::mask::SamplingMask;
use crate::mri::{ComplexImage, KSpaceData, Sensitivities};
use crate::prior::{ModelParams, RealImage};
use crate::shearlet::ShearletParams;

pub const IMAGE_MAGIC: &[u8; 4] = b"PGIM";
pub const MODEL_MAGIC: &[u8; 4] = b"PGDM";
pub const KSPACE_MAGIC: &[u8; 4] = b"KSPC";
pub const VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u32(VERSION);
        w
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }

    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub(crate) fn complex<'a>(&mut self, vs: impl IntoIterator<Item = &'a Complex64>) {
        for v in vs {
            self.f64(v.re);
            self.f64(v.im);
        }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(data: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        let mut r = Self { data, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(r.error_at(0, format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(found), String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn error_at(&self, offset: usize, message: String) -> Error {
        Error::Format { offset, message }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.error_at(self.pos, format!("truncated: need {n} bytes, {} left", self.data.len() - self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_remaining(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub(crate) fn complex(&mut self, n: usize) -> Result<Vec<Complex64>> {
        self.check_remaining(n, 16)?;
        (0..n).map(|_| Ok(Complex64::new(self.f64()?, self.f64()?))).collect()
    }

    fn check_remaining(&self, n: usize, size: usize) -> Result<()> {
        match n.checked_mul(size) {
            Some(b) if b <= self.data.len() - self.pos => Ok(()),
            _ => Err(self.error_at(self.pos, format!("truncated: {n} values of {size} bytes do not fit"))),
        }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(self.error_at(self.pos, format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Real or complex image payload of the image container.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageData {
    Real(RealImage),
    Complex(ComplexImage),
}

impl ImageData {
    pub fn magnitude(&self) -> RealImage {
        match self {
            ImageData::Real(x) => x.clone(),
            ImageData::Complex(x) => x.mapv(|v| v.norm()),
        }
    }
}

pub fn encode_image(img: &ImageData) -> Vec<u8> {
    let mut w = Writer::new(IMAGE_MAGIC);
    match img {
        ImageData::Real(x) => {
            w.usize(x.nrows());
            w.usize(x.ncols());
            w.u32(0);
            w.f64s(x.iter());
        }
        ImageData::Complex(x) => {
            w.usize(x.nrows());
            w.usize(x.ncols());
            w.u32(1);
            w.complex(x.iter());
        }
    }
    w.finish()
}

pub fn decode_image(data: &[u8]) -> Result<ImageData> {
    let mut r = Reader::new(data, IMAGE_MAGIC)?;
    let (n, m) = (r.usize()?, r.usize()?);
    let kind_at = r.offset();
    let img = match r.u32()? {
        0 => ImageData::Real(Array2::from_shape_vec((n, m), r.f64s(n * m)?).expect("sized")),
        1 => ImageData::Complex(Array2::from_shape_vec((n, m), r.complex(n * m)?).expect("sized")),
        k => return Err(Error::Format { offset: kind_at, message: format!("unknown image kind {k}") }),
    };
    r.finish()?;
    Ok(img)
}

pub fn write_image(path: impl AsRef<Path>, img: &ImageData) -> Result<()> {
    Ok(std::fs::write(path, encode_image(img))?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageData> {
    decode_image(&std::fs::read(path)?)
}

pub fn encode_model(p: &ModelParams) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC);
    w.usize(p.shearlet.gamma.len());
    w.usize(p.grid.len);
    w.usize(p.shearlet.h.len());
    w.usize(p.shearlet.p.nrows());
    w.f64s(p.shearlet.h.iter());
    w.f64s(p.shearlet.p.iter());
    w.f64s(p.shearlet.gamma.iter());
    w.usize(p.free_weights.ncols());
    w.f64s(p.free_weights.iter());
    w.f64(p.grid.min);
    w.f64(p.grid.max);
    w.f64(p.base_std);
    w.finish()
}

pub fn decode_model(data: &[u8]) -> Result<ModelParams> {
    let mut r = Reader::new(data, MODEL_MAGIC)?;
    let filters = r.usize()?;
    let len = r.usize()?;
    let taps = r.usize()?;
    let psize = r.usize()?;
    let h = Array1::from_vec(r.f64s(taps)?);
    let p = Array2::from_shape_vec((psize, psize), r.f64s(psize * psize)?).expect("sized");
    let gamma = Array1::from_vec(r.f64s(filters)?);
    let free_at = r.offset();
    let free = r.usize()?;
    let weights = Array2::from_shape_vec((filters, free), r.f64s(filters * free)?).expect("sized");
    let grid = MeanGrid { min: r.f64()?, max: r.f64()?, len };
    let base_std = r.f64()?;
    r.finish()?;
    if free != grid.free_len() {
        return Err(Error::Format { offset: free_at, message: format!("{free} free weights do not match {len} means") });
    }
    let params = ModelParams { shearlet: ShearletParams::new(h, p, gamma)?, free_weights: weights, grid, base_std };
    params.validate()?;
    Ok(params)
}

pub fn write_model(path: impl AsRef<Path>, p: &ModelParams) -> Result<()> {
    Ok(std::fs::write(path, encode_model(p))?)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_model(&std::fs::read(path)?)
}

fn pack_bits(bits: &Array2<bool>) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn encode_kspace(z: &KSpaceData) -> Vec<u8> {
    let (n, m) = z.shape();
    let mut w = Writer::new(KSPACE_MAGIC);
    w.usize(n);
    w.usize(m);
    w.usize(z.coils());
    w.usize(z.mask.count());
    w.f64(z.noise_std);
    w.bytes(&pack_bits(z.mask.bits()));
    w.complex(z.samples.iter());
    w.finish()
}

pub fn decode_kspace(data: &[u8]) -> Result<KSpaceData> {
    let mut r = Reader::new(data, KSPACE_MAGIC)?;
    let (n, m, c, f) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let noise_std = r.f64()?;
    let mask_at = r.offset();
    let packed = r.take((n * m).div_ceil(8))?;
    let bits = Array2::from_shape_fn((n, m), |(i, j)| {
        let k = i * m + j;
        packed[k / 8] & (1 << (k % 8)) != 0
    });
    let mask = SamplingMask::from_bits(bits).map_err(|e| Error::Format { offset: mask_at, message: e.to_string() })?;
    if mask.count() != f {
        return Err(Error::Format { offset: mask_at, message: format!("mask has {} samples, header says {f}", mask.count()) });
    }
    let samples = Array2::from_shape_vec((c, f), r.complex(c * f)?).expect("sized");
    r.finish()?;
    KSpaceData::new(samples, mask, noise_std)
}

pub fn write_kspace(path: impl AsRef<Path>, z: &KSpaceData) -> Result<()> {
    Ok(std::fs::write(path, encode_kspace(z))?)
}

pub fn read_kspace(path: impl AsRef<Path>) -> Result<KSpaceData> {
    decode_kspace(&std::fs::read(path)?)
}

pub(crate) fn write_sensitivities(w: &mut Writer, s: &Sensitivities) {
    w.usize(s.coils());
    w.complex(s.maps().iter());
}

pub(crate) fn read_sensitivities(r: &mut Reader<'_>, shape: (usize, usize)) -> Result<Sensitivities> {
    let c = r.usize()?;
    let maps = Array3::from_shape_vec((c, shape.0, shape.1), r.complex(c * shape.0 * shape.1)?).expect("sized");
    Sensitivities::new(maps)
}

/// 8-bit grayscale with `[0, max]` mapped linearly to `[0, 255]`.
pub fn to_gray(img: &RealImage) -> image::GrayImage {
    let max = img.iter().cloned().fold(0.0f64, f64::max);
    let (n, m) = img.dim();
    image::GrayImage::from_fn(m as u32, n as u32, |x, y| {
        let v = img[[y as usize, x as usize]];
        let g = if max > 0.0 && v > 0.0 { (255.0 * (v / max).min(1.0)).round() } else { 0.0 };
        image::Luma([g as u8])
    })
}

pub fn save_png(path: impl AsRef<Path>, img: &RealImage) -> Result<()> {
    to_gray(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn save_mask_png(path: impl AsRef<Path>, mask: &SamplingMask) -> Result<()> {
    save_png(path, &mask.centered().mapv(|b| if b { 1.0 } else { 0.0 }))
}

/// Grayscale PNG scaled to `[0, 1]`.
pub fn load_png(path: impl AsRef<Path>) -> Result<RealImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| img.get_pixel(j as u32, i as u32)[0] as f64 / 255.0))
}

/// Magnitude image from a binary image container or a PNG, by extension.
pub fn load_magnitude(path: impl AsRef<Path>) -> Result<RealImage> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => load_png(path),
        _ => Ok(read_image(path)?.magnitude()),
    }
}
