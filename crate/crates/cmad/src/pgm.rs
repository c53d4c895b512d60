//! Binary PGM (P5) sample grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use cmad_core::aggregation::ImageShape;
use cmad_core::diffgraph::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use crate::error::{CliError, Result};

/// Pixel value for a sample value in `[-1, 1]`; values outside are clipped.
pub fn to_gray(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Tiles per row and column for `n` images.
pub fn grid_dims(n: usize) -> (usize, usize) {
    if n == 0 {
        return (0, 0);
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    (n.div_ceil(cols), cols)
}

/// Tile the first `n` rows of `samples` as images in a near-square grid.
/// `shade(row, pixel)` scales each pixel's brightness.
fn tile(samples: &Tensor, n: usize, img: ImageShape, shade: impl Fn(usize) -> f64) -> GrayImage {
    let n = n.min(samples.rows());
    let (rows, cols) = grid_dims(n);
    let (h, w) = (img.height, img.width);
    let mut out = GrayImage::new((cols * w) as u32, (rows * h) as u32);
    for s in 0..n {
        let (gr, gc) = (s / cols, s % cols);
        let px = samples.row(s);
        for r in 0..h {
            for c in 0..w {
                let k = r * w + c;
                let g = f64::from(to_gray(px[k])) * shade(k);
                out.put_pixel((gc * w + c) as u32, (gr * h + r) as u32, Luma([g.round() as u8]));
            }
        }
    }
    out
}

pub fn sample_grid(samples: &Tensor, n: usize, img: ImageShape) -> GrayImage {
    tile(samples, n, img, |_| 1.0)
}

/// One agent's own state, with the pixels it does not contribute dimmed.
pub fn agent_grid(state: &Tensor, owners: &[usize], agent: usize, n: usize, img: ImageShape) -> GrayImage {
    tile(state, n, img, |k| if owners[k] == agent { 1.0 } else { 0.25 })
}

/// Scatter plot of 2-D samples on `[-extent, extent]²`, dark points on white.
pub fn scatter(samples: &Tensor, size: u32, extent: f64) -> GrayImage {
    let mut out = GrayImage::from_pixel(size, size, Luma([255]));
    let to_px = |v: f64| ((v + extent) / (2.0 * extent) * f64::from(size)).floor();
    for r in 0..samples.rows() {
        let p = samples.row(r);
        let (x, y) = (to_px(p[0]), to_px(-p[1]));
        if x >= 0.0 && y >= 0.0 && x < f64::from(size) && y < f64::from(size) {
            out.put_pixel(x as u32, y as u32, Luma([0]));
        }
    }
    out
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let enc = PnmEncoder::new(BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8).map_err(|e| CliError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let reader = image::ImageReader::open(path).map_err(|e| CliError::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| CliError::io(path, e))?;
    let img = reader.decode().map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(img.to_luma8())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        assert_eq!(to_gray(-1.0), 0);
        assert_eq!(to_gray(1.0), 255);
        assert_eq!(to_gray(0.0), 128);
        assert_eq!(to_gray(7.0), 255);
        assert_eq!(to_gray(f64::NAN), 0);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_dims(1), (1, 1));
        assert_eq!(grid_dims(64), (8, 8));
        assert_eq!(grid_dims(5), (2, 3));
        assert_eq!(grid_dims(10), (3, 4));
    }

    #[test]
    fn dimmed_pixels() {
        let img = ImageShape { height: 1, width: 2 };
        let t = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let g = agent_grid(&t, &[0, 1], 0, 1, img);
        assert_eq!(g.get_pixel(0, 0).0[0], 255);
        assert_eq!(g.get_pixel(1, 0).0[0], 64);
    }
}
