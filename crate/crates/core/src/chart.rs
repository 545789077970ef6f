//! Minimal PNG bar charts.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView4;

use crate::error::{Error, Result};

const BAR: u32 = 32;
const GAP: u32 = 12;
const HEIGHT: u32 = 220;
const MARGIN: u32 = 10;

/// One bar per `(value, colour)`. Bars are scaled to the largest magnitude;
/// negative values hang below a zero line.
pub fn bar_chart(bars: &[(f64, [u8; 3])], path: &Path) -> Result<()> {
    if bars.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::Numerical("non-finite bar value".into()));
    }
    let n = bars.len().max(1) as u32;
    let width = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let mut img = RgbImage::from_pixel(width, HEIGHT, Rgb([255, 255, 255]));
    let max_pos = bars.iter().map(|b| b.0).fold(0.0f64, f64::max);
    let max_neg = bars.iter().map(|b| -b.0).fold(0.0f64, f64::max);
    let span = (max_pos + max_neg).max(1e-12);
    let plot = (HEIGHT - 2 * MARGIN) as f64;
    let zero = MARGIN + (plot * max_pos / span).round() as u32;
    for (i, (v, c)) in bars.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (BAR + GAP);
        let len = (plot * v.abs() / span).round() as u32;
        let (y0, y1) = if *v >= 0.0 { (zero - len, zero) } else { (zero, zero + len) };
        for x in x0..x0 + BAR {
            for y in y0..y1 {
                img.put_pixel(x, y, Rgb(*c));
            }
        }
    }
    for x in 0..width {
        img.put_pixel(x, zero.min(HEIGHT - 1), Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

/// Writes a `[F, 3, H, W]` clip in `[0, 1]` as one PNG with the frames side
/// by side.
pub fn filmstrip(clip: ArrayView4<f32>, path: &Path) -> Result<()> {
    let (f, c, h, w) = clip.dim();
    if c != 3 || f == 0 {
        return Err(Error::Shape(format!("filmstrip needs [F, 3, H, W] frames, got {:?}", clip.dim())));
    }
    let mut img = RgbImage::new((f * w) as u32, h as u32);
    for t in 0..f {
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|ch| (clip[[t, ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel((t * w + x) as u32, y as u32, Rgb(px));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_png_with_expected_width() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        bar_chart(&[(0.5, [255, 0, 0]), (-0.25, [0, 0, 255]), (1.0, [0, 255, 0])], &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.width(), 2 * MARGIN + 3 * BAR + 2 * GAP);
        assert!(bar_chart(&[(f64::NAN, [0, 0, 0])], &p).is_err());
    }

    #[test]
    fn filmstrip_lays_frames_left_to_right() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.png");
        let mut clip = ndarray::Array4::<f32>::zeros((3, 3, 2, 4));
        clip[[1, 0, 0, 0]] = 1.0;
        filmstrip(clip.view(), &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (12, 2));
        assert_eq!(img.get_pixel(4, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
