//! Dense (batch, channels, height, width) tensor and the shape calculus
//! every layer and architecture check is built on.
//!
//! Layout is row-major with width fastest, so convolution inner loops run
//! contiguously over width.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense 4-D tensor, shape (batch, channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: T) -> Self {
        Tensor { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}x{}",
                data.len(),
                n, c, h, w
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn height(&self) -> usize {
        self.h
    }
    pub fn width(&self) -> usize {
        self.w
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Contiguous slice of one (batch, channel) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.index(n, c, 0, 0);
        &self.data[start..start + self.h * self.w]
    }

    /// Contiguous slice of one batch item (all channels).
    pub fn item(&self, n: usize) -> &[T] {
        let start = self.index(n, 0, 0, 0);
        &self.data[start..start + self.c * self.h * self.w]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let start = self.index(n, 0, 0, 0);
        let len = self.c * self.h * self.w;
        &mut self.data[start..start + len]
    }

    /// Copy of the contiguous batch range [start, end).
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor<T> {
        assert!(start < end && end <= self.n, "batch range {start}..{end} of {}", self.n);
        let item = self.c * self.h * self.w;
        Tensor {
            n: end - start,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[start * item..end * item].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor { n: self.n, c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Error if any value is NaN or infinite. NaN/Inf is an error state in
    /// this engine, never silent.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{context}: {v:?}")));
            }
        }
        Ok(())
    }

    /// Convert element type (used to lift f32 networks to f64 for checks).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Channel slice [lo, hi), values copied bit-identically.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor<T>> {
        if lo >= hi || hi > self.c {
            return Err(Error::ShapeMismatch(format!("channel slice {lo}..{hi} of {}", self.c)));
        }
        let mut out = Tensor::zeros(self.n, hi - lo, self.h, self.w);
        for n in 0..self.n {
            for (oc, c) in (lo..hi).enumerate() {
                let src = self.plane(n, c);
                let start = out.index(n, oc, 0, 0);
                out.data[start..start + src.len()].copy_from_slice(src);
            }
        }
        Ok(out)
    }

    /// Stack batch-1 tensors into one batch.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch("stack of zero tensors".into()))?;
        let (_, c, h, w) = first.shape();
        let mut out = Tensor::zeros(items.iter().map(|t| t.n).sum(), c, h, w);
        let mut offset = 0;
        for t in items {
            if (t.c, t.h, t.w) != (c, h, w) {
                return Err(Error::ShapeMismatch("stack of differently shaped tensors".into()));
            }
            out.data[offset..offset + t.data.len()].copy_from_slice(&t.data);
            offset += t.data.len();
        }
        Ok(out)
    }
}

/// Concatenate along the channel axis: `a`'s channels first, then `b`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.n != b.n || a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    let plane = a.h * a.w;
    for n in 0..a.n {
        let dst = out.index(n, 0, 0, 0);
        out.data[dst..dst + a.c * plane].copy_from_slice(a.item(n));
        let dst = out.index(n, a.c, 0, 0);
        out.data[dst..dst + b.c * plane].copy_from_slice(b.item(n));
    }
    Ok(out)
}

/// Convolution / transposed-convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub filter: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    /// Cropping factor, transposed convolutions only.
    pub cropping: usize,
}

impl ConvGeometry {
    pub fn conv(filter: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(filter >= 1 && stride >= 1 && dilation >= 1);
        ConvGeometry { filter, stride, padding, dilation, cropping: 0 }
    }

    pub fn tconv(filter: usize, stride: usize, cropping: usize) -> Self {
        assert!(filter >= 1 && stride >= 1);
        ConvGeometry { filter, stride, padding: 0, dilation: 1, cropping }
    }

    /// Effective filter width after dilation: F' = d(F-1) + 1.
    pub fn effective_filter(&self) -> usize {
        self.dilation * (self.filter - 1) + 1
    }
}

/// Convolution output size: M' = (M - F' + 2P)/S + 1.
pub fn conv_out_size(m: usize, geom: &ConvGeometry) -> Result<usize> {
    let f_eff = geom.effective_filter();
    let padded = m + 2 * geom.padding;
    if padded < f_eff {
        return Err(Error::NegativeOutput(format!(
            "effective filter {f_eff} exceeds padded input {padded}"
        )));
    }
    let span = padded - f_eff;
    if span % geom.stride != 0 {
        return Err(Error::NonIntegralOutput { m, f_eff, p: geom.padding, s: geom.stride });
    }
    Ok(span / geom.stride + 1)
}

/// Transposed-convolution output size: M' = S(M-1) + F - 2p.
pub fn tconv_out_size(m: usize, geom: &ConvGeometry) -> Result<usize> {
    assert!(m >= 1);
    let gross = geom.stride * (m - 1) + geom.filter;
    if 2 * geom.cropping > gross {
        return Err(Error::NegativeOutput(format!(
            "cropping 2x{} exceeds gross output {gross}",
            geom.cropping
        )));
    }
    Ok(gross - 2 * geom.cropping)
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    dtype: String,
    shape: [usize; 4],
    version: u32,
}

pub const FORMAT_VERSION: u32 = 1;

fn read_meta(base: &Path) -> Result<TensorMeta> {
    let meta_path = base.with_extension("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: TensorMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    if meta.version != FORMAT_VERSION {
        return Err(Error::FormatError {
            offset: 0,
            message: format!("expected version {FORMAT_VERSION}, found {}", meta.version),
        });
    }
    Ok(meta)
}

impl<T: Scalar> Tensor<T> {
    /// Write `<base>.bin` (raw little-endian payload) plus a
    /// `<base>.meta.json` sidecar with dtype, shape, and format version.
    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = TensorMeta { dtype: T::DTYPE.to_string(), shape: [self.n, self.c, self.h, self.w], version: FORMAT_VERSION };
        let meta_path = base.with_extension("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

        let mut payload = Vec::with_capacity(self.data.len() * T::BYTES);
        for &v in &self.data {
            v.write_le(&mut payload);
        }
        let bin_path = base.with_extension("bin");
        std::fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(base: &Path) -> Result<Tensor<T>> {
        let meta = read_meta(base)?;
        if meta.dtype != T::DTYPE {
            return Err(Error::FormatError {
                offset: 0,
                message: format!("expected dtype {}, found {}", T::DTYPE, meta.dtype),
            });
        }
        let [n, c, h, w] = meta.shape;
        let bin_path = base.with_extension("bin");
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let expected = n * c * h * w * T::BYTES;
        if bytes.len() != expected {
            return Err(Error::FormatError {
                offset: bytes.len().min(expected) as u64,
                message: format!("payload is {} bytes, expected {expected}", bytes.len()),
            });
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Tensor::from_vec(n, c, h, w, data)
    }
}

/// Integer label raster batch, shape (batch, height, width). Class indices
/// 0..k-1 plus the ignore marker 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

pub const IGNORE_LABEL: u8 = 255;

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::ShapeMismatch(format!("label length {} != {n}x{h}x{w}", data.len())));
        }
        Ok(Labels { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, v: u8) -> Self {
        Labels { n, h, w, data: vec![v; n * h * w] }
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn stack(items: &[&Labels]) -> Result<Labels> {
        let first = items.first().ok_or_else(|| Error::ShapeMismatch("stack of zero labels".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::new();
        let mut n = 0;
        for l in items {
            if (l.h, l.w) != (h, w) {
                return Err(Error::ShapeMismatch("stack of differently shaped labels".into()));
            }
            data.extend_from_slice(&l.data);
            n += l.n;
        }
        Labels::new(n, h, w, data)
    }

    /// Same sidecar-plus-payload container as tensors, dtype "u8".
    pub fn save(&self, base: &Path) -> Result<()> {
        let meta = TensorMeta { dtype: "u8".to_string(), shape: [self.n, 1, self.h, self.w], version: FORMAT_VERSION };
        let meta_path = base.with_extension("meta.json");
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
        let bin_path = base.with_extension("bin");
        std::fs::write(&bin_path, &self.data).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(base: &Path) -> Result<Labels> {
        let meta = read_meta(base)?;
        if meta.dtype != "u8" {
            return Err(Error::FormatError {
                offset: 0,
                message: format!("expected dtype u8, found {}", meta.dtype),
            });
        }
        let [n, _, h, w] = meta.shape;
        let bin_path = base.with_extension("bin");
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != n * h * w {
            return Err(Error::FormatError {
                offset: bytes.len().min(n * h * w) as u64,
                message: format!("payload is {} bytes, expected {}", bytes.len(), n * h * w),
            });
        }
        Labels::new(n, h, w, bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(f: usize, s: usize, p: usize, d: usize) -> ConvGeometry {
        ConvGeometry::conv(f, s, p, d)
    }

    #[test]
    fn conv_out_size_examples() {
        assert_eq!(conv_out_size(50, &geom(5, 1, 2, 1)).unwrap(), 50);
        assert_eq!(conv_out_size(50, &geom(5, 1, 4, 2)).unwrap(), 50);
        assert_eq!(conv_out_size(200, &geom(2, 2, 0, 1)).unwrap(), 100);
    }

    #[test]
    fn conv_out_size_errors() {
        assert!(matches!(conv_out_size(5, &geom(2, 2, 0, 1)), Err(Error::NonIntegralOutput { .. })));
        assert!(matches!(conv_out_size(3, &geom(5, 1, 0, 1)), Err(Error::NegativeOutput(_))));
    }

    #[test]
    fn tconv_out_size_examples() {
        assert_eq!(tconv_out_size(50, &ConvGeometry::tconv(4, 2, 1)).unwrap(), 100);
        assert_eq!(tconv_out_size(100, &ConvGeometry::tconv(4, 2, 1)).unwrap(), 200);
        assert_eq!(tconv_out_size(7, &ConvGeometry::tconv(1, 1, 0)).unwrap(), 7);
        assert!(matches!(
            tconv_out_size(1, &ConvGeometry::tconv(2, 1, 2)),
            Err(Error::NegativeOutput(_))
        ));
    }

    #[test]
    fn pool_then_upsample_round_trip() {
        // 2x2 stride-2 pooling followed by TConv4-2-1 restores the size.
        for m in [4usize, 8, 16, 50, 100, 200] {
            let pooled = conv_out_size(m, &geom(2, 2, 0, 1)).unwrap();
            let up = tconv_out_size(pooled, &ConvGeometry::tconv(4, 2, 1)).unwrap();
            assert_eq!(up, m);
        }
    }

    #[test]
    fn concat_channels_shapes_and_values() {
        let a = Tensor::<f32>::filled(1, 16, 5, 5, 1.0);
        let b = Tensor::<f32>::filled(1, 32, 5, 5, 2.0);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 48, 5, 5));
        assert_eq!(c.at(0, 0, 2, 2), 1.0);
        assert_eq!(c.at(0, 47, 2, 2), 2.0);

        let d = Tensor::<f32>::zeros(1, 3, 9, 9);
        let e = Tensor::<f32>::zeros(1, 3, 8, 8);
        assert!(matches!(concat_channels(&d, &e), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let mut rng = crate::rng::CounterRng::new(3);
        let mut a = Tensor::<f32>::zeros(2, 3, 4, 4);
        let mut b = Tensor::<f32>::zeros(2, 2, 4, 4);
        for v in a.data_mut() {
            *v = rng.next_f64() as f32;
        }
        for v in b.data_mut() {
            *v = rng.next_f64() as f32;
        }
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.slice_channels(0, 3).unwrap(), a);
        assert_eq!(c.slice_channels(3, 5).unwrap(), b);
    }

    #[test]
    fn tensor_roundtrip_io() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Tensor::<f32>::zeros(2, 3, 4, 5);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = i as f32 * 0.25 - 7.0;
        }
        let base = dir.path().join("t");
        t.save(&base).unwrap();
        let back = Tensor::<f32>::load(&base).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f32>::filled(1, 1, 2, 2, 1.0);
        let base = dir.path().join("t");
        t.save(&base).unwrap();
        let bin = base.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Tensor::<f32>::load(&base), Err(Error::FormatError { .. })));
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut t = Tensor::<f64>::zeros(1, 1, 1, 2);
        t.set(0, 0, 0, 1, f64::NAN);
        assert!(t.check_finite("test").is_err());
    }
}
