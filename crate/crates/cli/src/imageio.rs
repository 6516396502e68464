//! PNG reading and writing for images, heatmaps and masked renders.

use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sfrg_core::perturbation::{upsample, Mask};
use sfrg_core::{Image, Shape};

/// Decodes a PNG into `[0, 1]` pixels. Grayscale (with or without alpha)
/// becomes one channel, RGB(A) three; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().context("reading PNG header")?;
    let mut buf = vec![0; reader.output_buffer_size().context("PNG too large")?];
    let info = reader.next_frame(&mut buf).context("decoding PNG")?;
    let (channels, stride) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (1, 2),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (3, 4),
        other => bail!("unsupported PNG color type {other:?}"),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for px in row[..w * stride].chunks_exact(stride) {
            data.extend(px[..channels].iter().map(|&v| f64::from(v) / 255.0));
        }
    }
    Ok(Image::new(Shape::new(h, w, channels), data)?)
}

pub fn read_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode_png(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit PNG of an image (grayscale for one channel, RGB for three).
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let color = match image.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => bail!("cannot write a {c}-channel image as PNG"),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
        writer.write_image_data(&bytes)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Grayscale PNG of a heatmap, bilinearly upsampled to `height × width`.
pub fn encode_heatmap_png(heatmap: &Mask, height: usize, width: usize) -> Result<Vec<u8>> {
    let dense = if heatmap.rows() == height && heatmap.cols() == width {
        heatmap.clone()
    } else {
        upsample(heatmap, height, width)?
    };
    let image = Image::new(Shape::new(height, width, 1), dense.values().to_vec())?;
    encode_png(&image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_quantizes_to_eight_bits() {
        let shape = Shape::new(3, 5, 1);
        let img = Image::new(shape, (0..15).map(|i| i as f64 / 14.0).collect()).unwrap();
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), shape);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // Already quantized values survive exactly.
        assert_eq!(decode_png(&encode_png(&back).unwrap()).unwrap(), back);
    }

    #[test]
    fn rgb_round_trip() {
        let img = Image::new(Shape::new(2, 2, 3), (0..12).map(|i| i as f64 * 17.0 / 255.0).collect()).unwrap();
        assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_png(b"not a png").is_err());
    }

    proptest::proptest! {
        #[test]
        fn quantized_images_round_trip(h in 1usize..9, w in 1usize..9, rgb in proptest::bool::ANY, seed in 0u64..1000) {
            let c = if rgb { 3 } else { 1 };
            let data = (0..h * w * c).map(|i| ((i as u64 * 31 + seed * 17) % 256) as f64 / 255.0).collect();
            let img = Image::new(Shape::new(h, w, c), data).unwrap();
            proptest::prop_assert_eq!(decode_png(&encode_png(&img).unwrap()).unwrap(), img);
        }
    }
}
