//! Planar images in `[0, 1]` and PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// BT.601 full-range luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// BT.601 luma written around the green channel so that gray pixels map
/// to themselves exactly.
#[inline]
pub fn luma_of(r: f64, g: f64, b: f64) -> f64 {
    (g + LUMA_WEIGHTS[0] * (r - g) + LUMA_WEIGHTS[2] * (b - g)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Luma,
}

/// A `(C, H, W)` image with values in `[0, 1]`. `Luma` images have one
/// channel and `Rgb` images have three.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    tensor: Tensor,
    colorspace: ColorSpace,
}

impl PlanarImage {
    pub fn new(tensor: Tensor, colorspace: ColorSpace) -> Result<Self> {
        let (c, _, _) = tensor.shape3()?;
        let want = match colorspace {
            ColorSpace::Luma => 1,
            ColorSpace::Rgb => 3,
        };
        if c != want {
            return Err(Error::InvalidDims(format!("{colorspace:?} image needs {want} channels, got {c}")));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { tensor, colorspace })
    }

    /// Single-channel image from a 2-D `(H, W)` tensor.
    pub fn from_luma(plane: Tensor) -> Result<Self> {
        let (h, w) = plane.shape2()?;
        Self::new(plane.reshape(vec![1, h, w])?, ColorSpace::Luma)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.tensor.data()[c * n..(c + 1) * n]
    }

    /// Luma plane as an `(H, W)` tensor.
    pub fn luma_plane(&self) -> Tensor {
        let y = self.to_luma();
        let (h, w) = (y.height(), y.width());
        Tensor::from_parts_unchecked(vec![h, w], y.tensor.into_data())
    }

    /// BT.601 luma. Luma input is returned unchanged.
    pub fn to_luma(&self) -> PlanarImage {
        match self.colorspace {
            ColorSpace::Luma => self.clone(),
            ColorSpace::Rgb => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let data = r.iter().zip(g).zip(b).map(|((&r, &g), &b)| luma_of(r, g, b)).collect();
                PlanarImage {
                    tensor: Tensor::from_parts_unchecked(vec![1, self.height(), self.width()], data),
                    colorspace: ColorSpace::Luma,
                }
            }
        }
    }

    /// Replicates a luma plane into three identical RGB channels.
    pub fn to_rgb(&self) -> PlanarImage {
        match self.colorspace {
            ColorSpace::Rgb => self.clone(),
            ColorSpace::Luma => {
                let plane = self.plane(0);
                let mut data = Vec::with_capacity(plane.len() * 3);
                for _ in 0..3 {
                    data.extend_from_slice(plane);
                }
                PlanarImage {
                    tensor: Tensor::from_parts_unchecked(vec![3, self.height(), self.width()], data),
                    colorspace: ColorSpace::Rgb,
                }
            }
        }
    }

    /// Rectangular crop starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<PlanarImage> {
        if height == 0 || width == 0 || top + height > self.height() || left + width > self.width() {
            return Err(Error::InvalidDims(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        let mut data = Vec::with_capacity(self.channels() * height * width);
        for c in 0..self.channels() {
            let plane = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&plane[y * self.width() + left..y * self.width() + left + width]);
            }
        }
        Ok(PlanarImage {
            tensor: Tensor::from_parts_unchecked(vec![self.channels(), height, width], data),
            colorspace: self.colorspace,
        })
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG. An alpha channel, if
/// present, is discarded.
pub fn load_image(path: impl AsRef<Path>) -> Result<PlanarImage> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| decode_error(path, e))?;
    let size =
        reader.output_buffer_size().ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_error(path, e))?;
    buf.truncate(info.buffer_size());

    let (samples, colorspace) = match info.color_type {
        png::ColorType::Grayscale => (1, ColorSpace::Luma),
        png::ColorType::GrayscaleAlpha => (2, ColorSpace::Luma),
        png::ColorType::Rgb => (3, ColorSpace::Rgb),
        png::ColorType::Rgba => (4, ColorSpace::Rgb),
        png::ColorType::Indexed => {
            return Err(Error::Format(format!("{}: palette PNGs are not supported", path.display())))
        }
    };
    let bytes_per_sample = match info.bit_depth {
        png::BitDepth::Eight => 1,
        png::BitDepth::Sixteen => 2,
        other => return Err(Error::Format(format!("{}: unsupported bit depth {other:?}", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = if colorspace == ColorSpace::Rgb { 3 } else { 1 };
    let mut data = vec![0.0; channels * h * w];
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            for c in 0..channels {
                let at = (x * samples + c) * bytes_per_sample;
                let v = if bytes_per_sample == 1 {
                    f64::from(row[at]) / 255.0
                } else {
                    f64::from(u16::from_be_bytes([row[at], row[at + 1]])) / 65535.0
                };
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    PlanarImage::new(Tensor::new(vec![channels, h, w], data)?, colorspace)
}

fn decode_error(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Quantizes to 8 bits with round-half-up.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit grayscale or RGB PNG.
pub fn save_image(img: &PlanarImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut bytes = vec![0u8; h * w * c];
    for ch in 0..c {
        for (i, &v) in img.plane(ch).iter().enumerate() {
            bytes[i * c + ch] = quantize_u8(v);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(match img.colorspace {
        ColorSpace::Luma => png::ColorType::Grayscale,
        ColorSpace::Rgb => png::ColorType::Rgb,
    });
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| encode_error(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| encode_error(path, e))?;
    writer.finish().map_err(|e| encode_error(path, e))?;
    Ok(())
}

fn encode_error(path: &Path, e: png::EncodingError) -> Error {
    match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        if color == png::ColorType::Indexed {
            enc.set_palette(vec![0u8, 0, 0, 255, 255, 255]);
        }
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
    }

    #[test]
    fn gray8_scales_linearly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_raw_png(&p, 2, 2, png::ColorType::Grayscale, png::BitDepth::Eight, &[0, 255, 128, 64]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.colorspace(), ColorSpace::Luma);
        assert_eq!(img.tensor().data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn white_rgb_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_raw_png(&p, 3, 2, png::ColorType::Rgb, png::BitDepth::Eight, &[255; 18]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.colorspace(), ColorSpace::Rgb);
        assert_eq!(img.channels(), 3);
        assert!(img.tensor().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sixteen_bit_gray_is_supported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        write_raw_png(&p, 2, 1, png::ColorType::Grayscale, png::BitDepth::Sixteen, &[0xff, 0xff, 0x80, 0x00]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.tensor().data(), &[1.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn palette_and_low_depth_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pal.png");
        write_raw_png(&p, 2, 1, png::ColorType::Indexed, png::BitDepth::Eight, &[0, 1]);
        assert!(matches!(load_image(&p), Err(Error::Format(_))));
        let p = dir.path().join("g1.png");
        write_raw_png(&p, 8, 1, png::ColorType::Grayscale, png::BitDepth::One, &[0b1010_1010]);
        assert!(matches!(load_image(&p), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn quantization_endpoints_and_half() {
        assert_eq!(quantize_u8(0.5), 128);
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
    }

    #[test]
    fn luma_coefficients() {
        let img = |r: f64, g: f64, b: f64| {
            PlanarImage::new(Tensor::new(vec![3, 1, 1], vec![r, g, b]).unwrap(), ColorSpace::Rgb).unwrap()
        };
        assert_eq!(img(1.0, 1.0, 1.0).to_luma().tensor().data()[0], 1.0);
        assert_eq!(img(1.0, 0.0, 0.0).to_luma().tensor().data()[0], 0.299);
        let y = img(0.25, 0.5, 0.75).to_luma().tensor().data()[0];
        assert!((y - (0.25 * 0.299 + 0.5 * 0.587 + 0.75 * 0.114)).abs() < 1e-15);
        let once = img(0.1, 0.7, 0.3).to_luma();
        assert_eq!(once.to_luma(), once);
    }

    #[test]
    fn luma_colorspace_requires_one_channel() {
        let t = Tensor::filled(vec![3, 2, 2], 0.5).unwrap();
        assert!(PlanarImage::new(t, ColorSpace::Luma).is_err());
        let t = Tensor::filled(vec![1, 2, 2], 1.5).unwrap();
        assert!(PlanarImage::new(t, ColorSpace::Luma).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn eight_bit_round_trip_is_lossless(
            rgb in proptest::bool::ANY,
            h in 1usize..12, w in 1usize..12,
            bytes in proptest::collection::vec(proptest::num::u8::ANY, 432),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let (color, c) = if rgb { (png::ColorType::Rgb, 3) } else { (png::ColorType::Grayscale, 1) };
            let src = &bytes[..h * w * c];
            let a = dir.path().join("a.png");
            write_raw_png(&a, w as u32, h as u32, color, png::BitDepth::Eight, src);
            let img = load_image(&a).unwrap();
            let b = dir.path().join("b.png");
            save_image(&img, &b).unwrap();
            let again = load_image(&b).unwrap();
            proptest::prop_assert_eq!(&again, &img);
        }

        #[test]
        fn float_round_trip_error_is_bounded(vals in proptest::collection::vec(0.0f64..=1.0, 48)) {
            let dir = tempfile::tempdir().unwrap();
            let img = PlanarImage::new(Tensor::new(vec![3, 4, 4], vals).unwrap(), ColorSpace::Rgb).unwrap();
            let p = dir.path().join("f.png");
            save_image(&img, &p).unwrap();
            let back = load_image(&p).unwrap();
            let err = back.tensor().max_abs_diff(img.tensor()).unwrap();
            proptest::prop_assert!(err <= 1.0 / 510.0 + 1e-12);
        }
    }
}
