//! PNG encoding for images, label maps and segmentation previews.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::{DynamicImage, GrayImage, ImageFormat, RgbImage as PngRgb};
use ndarray::{Array2, Array3};
use tryon_core::data::{ParseLabelMap, RgbImage, SegMap, NUM_LABELS};

use crate::error::{PipelineError, Result};

/// Display colours for the ten parse labels.
pub const LABEL_PALETTE: [[u8; 3]; NUM_LABELS] = [
    [128, 0, 128],
    [255, 200, 150],
    [255, 140, 100],
    [0, 160, 255],
    [0, 90, 200],
    [230, 40, 40],
    [40, 40, 140],
    [200, 150, 120],
    [60, 60, 60],
    [235, 235, 235],
];

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

fn png_bytes(img: DynamicImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn to_png_rgb(img: &RgbImage) -> PngRgb {
    let g = img.geometry();
    let d = img.data();
    PngRgb::from_fn(g.width as u32, g.height as u32, |c, r| {
        let (r, c) = (r as usize, c as usize);
        image::Rgb([to_byte(d[[0, r, c]]), to_byte(d[[1, r, c]]), to_byte(d[[2, r, c]])])
    })
}

/// Encode an image as 8-bit RGB PNG.
pub fn encode_rgb(img: &RgbImage) -> Vec<u8> {
    png_bytes(DynamicImage::ImageRgb8(to_png_rgb(img)))
}

/// Decode any PNG to an image in `[-1, 1]`.
pub fn decode_rgb(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())?.into_rgb8();
    let (w, h) = img.dimensions();
    let data = Array3::from_shape_fn((3, h as usize, w as usize), |(ch, r, c)| from_byte(img.get_pixel(c as u32, r as u32)[ch]));
    RgbImage::new(data).map_err(|e| e.to_string())
}

/// Colour-coded preview of the arg-max labels.
pub fn encode_seg(seg: &SegMap) -> Vec<u8> {
    let g = seg.geometry();
    let img = PngRgb::from_fn(g.width as u32, g.height as u32, |c, r| image::Rgb(LABEL_PALETTE[seg.label_at(r as usize, c as usize) as usize]));
    png_bytes(DynamicImage::ImageRgb8(img))
}

/// Label maps are stored as 8-bit grayscale with raw label ids.
pub fn encode_labels(parse: &ParseLabelMap) -> Vec<u8> {
    let g = parse.geometry();
    let img = GrayImage::from_fn(g.width as u32, g.height as u32, |c, r| image::Luma([parse.get(r as usize, c as usize)]));
    png_bytes(DynamicImage::ImageLuma8(img))
}

pub fn decode_labels(bytes: &[u8]) -> std::result::Result<ParseLabelMap, String> {
    let img = match image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| e.to_string())? {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(format!("label maps must be 8-bit grayscale, got {:?}", other.color())),
    };
    let (w, h) = img.dimensions();
    let labels = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| img.get_pixel(c as u32, r as u32)[0]);
    ParseLabelMap::new(labels).map_err(|e| e.to_string())
}

pub fn base64_png(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn data_url(bytes: &[u8]) -> String {
    format!("data:image/png;base64,{}", base64_png(bytes))
}

pub fn decode_base64(text: &str) -> std::result::Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD.decode(text).map_err(|e| e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| PipelineError::io_at(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| PipelineError::io_at(path, e))
}

fn image_err(path: &Path) -> impl FnOnce(String) -> PipelineError + '_ {
    move |reason| PipelineError::Image { path: path.to_path_buf(), reason }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read(path)?).map_err(image_err(path))
}

pub fn read_labels(path: &Path) -> Result<ParseLabelMap> {
    decode_labels(&read(path)?).map_err(image_err(path))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_rgb(img))
}

pub fn write_labels(path: &Path, parse: &ParseLabelMap) -> Result<()> {
    write(path, &encode_labels(parse))
}

pub fn write_seg(path: &Path, seg: &SegMap) -> Result<()> {
    write(path, &encode_seg(seg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tryon_core::data::{onehot_encode, ImageGeometry};

    #[test]
    fn rgb_round_trip_within_one_level() {
        let img = RgbImage::new(Array3::from_shape_fn((3, 8, 10), |(c, r, k)| ((c * 31 + r * 7 + k * 3) % 50) as f64 / 25.0 - 1.0)).unwrap();
        let back = decode_rgb(&encode_rgb(&img)).unwrap();
        assert_eq!(back.geometry(), img.geometry());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn labels_round_trip_exactly() {
        let parse = ParseLabelMap::new(Array2::from_shape_fn((8, 9), |(r, c)| ((r + c) % 10) as u8)).unwrap();
        assert_eq!(decode_labels(&encode_labels(&parse)).unwrap(), parse);
        let rgb = encode_rgb(&RgbImage::filled(ImageGeometry::new(8, 8).unwrap(), [0.0; 3]));
        assert!(decode_labels(&rgb).is_err());
        let bad = png_bytes(DynamicImage::ImageLuma8(GrayImage::from_pixel(8, 8, image::Luma([12]))));
        assert!(decode_labels(&bad).is_err());
    }

    #[test]
    fn seg_preview_uses_palette() {
        let parse = ParseLabelMap::new(Array2::from_shape_fn((8, 8), |(r, _)| (r % 10) as u8)).unwrap();
        let png = encode_seg(&onehot_encode(&parse));
        let img = image::load_from_memory(&png).unwrap().into_rgb8();
        assert_eq!(img.get_pixel(3, 5).0, LABEL_PALETTE[5]);
    }

    #[test]
    fn base64_round_trip() {
        let bytes = vec![0u8, 1, 2, 250, 255];
        assert_eq!(decode_base64(&base64_png(&bytes)).unwrap(), bytes);
        assert!(data_url(&bytes).starts_with("data:image/png;base64,"));
    }
}
