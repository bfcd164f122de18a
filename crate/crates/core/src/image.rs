//! RGB frames, binary PPM I/O and bilinear cropping.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::geometry::Roi;
use crate::tensor::{s, Scalar, Tensor};

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return invalid(format!("{width}x{height} image with {} bytes", data.len()));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Image { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_ppm(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            fields.extend(line.split_whitespace().map(str::to_owned));
        }
        if fields.len() != 4 || fields[0] != "P6" {
            return Err(Error::Format("not a binary PPM (P6) file".into()));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field '{s}'")))
        };
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(Error::Format(format!("unsupported PPM max value {max}")));
        }
        let mut data = vec![0u8; w * h * 3];
        r.read_exact(&mut data)
            .map_err(|_| Error::Format("truncated PPM pixel data".into()))?;
        Image::new(w, h, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        Self::read_ppm(f).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Bilinear resample of the square `roi` to `out x out` pixels, returned as
/// an `out x out x 3` tensor of values in `[0, 255]`. Samples outside the
/// frame take the frame's mean color.
pub fn crop_resize<T: Scalar>(frame: &Image, roi: &Roi, out: usize) -> Result<Tensor<T>> {
    if !(roi.side.is_finite() && roi.side > 0.0 && roi.cx.is_finite() && roi.cy.is_finite()) || out == 0 {
        return invalid(format!("degenerate crop {roi:?} -> {out}"));
    }
    let mean = frame.mean_color();
    let step = roi.side / out as f64;
    let x0 = roi.cx - roi.side / 2.0;
    let y0 = roi.cy - roi.side / 2.0;
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= frame.width as i64 || y >= frame.height as i64 {
            mean[c]
        } else {
            frame.data[(y as usize * frame.width + x as usize) * 3 + c] as f64
        }
    };
    let mut data = Vec::with_capacity(out * out * 3);
    for v in 0..out {
        let sy = y0 + (v as f64 + 0.5) * step - 0.5;
        let (iy, fy) = (sy.floor() as i64, sy - sy.floor());
        for u in 0..out {
            let sx = x0 + (u as f64 + 0.5) * step - 0.5;
            let (ix, fx) = (sx.floor() as i64, sx - sx.floor());
            for c in 0..3 {
                let top = fetch(ix, iy, c) * (1.0 - fx) + fetch(ix + 1, iy, c) * fx;
                let bot = fetch(ix, iy + 1, c) * (1.0 - fx) + fetch(ix + 1, iy + 1, c) * fx;
                data.push(s(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(vec![out, out, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let mut img = Image::filled(w, h, [0, 0, 0]);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [(x * 7 % 256) as u8, (y * 11 % 256) as u8, ((x + y) % 256) as u8]);
            }
        }
        img
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let img = ramp(9, 9);
        let roi = Roi { cx: 4.5, cy: 4.5, side: 9.0 };
        let t: Tensor<f64> = crop_resize(&img, &roi, 9).unwrap();
        let expect: Vec<f64> = img.data.iter().map(|&b| b as f64).collect();
        assert_eq!(t.data(), &expect[..]);
    }

    #[test]
    fn constant_frame_gives_constant_patch() {
        let img = Image::filled(10, 6, [30, 60, 90]);
        let roi = Roi { cx: 0.0, cy: 0.0, side: 25.0 };
        let t: Tensor<f64> = crop_resize(&img, &roi, 7).unwrap();
        for px in t.data().chunks(3) {
            assert!((px[0] - 30.0).abs() < 1e-9 && (px[1] - 60.0).abs() < 1e-9 && (px[2] - 90.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkerboard_downscale_matches_reference() {
        let n = 8;
        let mut img = Image::filled(n, n, [0, 0, 0]);
        for y in 0..n {
            for x in 0..n {
                let v = if (x + y) % 2 == 0 { 200 } else { 40 };
                img.set(x, y, [v, v / 2, 255 - v]);
            }
        }
        let roi = Roi { cx: 4.0, cy: 4.0, side: 8.0 };
        let t: Tensor<f64> = crop_resize(&img, &roi, 4).unwrap();
        // output pixel u samples source 2u + 0.5: the mean of a 2x2 block
        for v in 0..4 {
            for u in 0..4 {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc += img.pixel(2 * u + dx, 2 * v + dy)[c] as f64;
                    }
                    assert!((t.at(&[v, u, c]) - acc / 4.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let img = Image::filled(4, 4, [1, 2, 3]);
        assert!(crop_resize::<f32>(&img, &Roi { cx: 1.0, cy: 1.0, side: 0.0 }, 4).is_err());
        assert!(crop_resize::<f32>(&img, &Roi { cx: f64::NAN, cy: 1.0, side: 2.0 }, 4).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let img = ramp(5, 3);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(Image::read_ppm(&buf[..]).unwrap(), img);
        assert!(Image::read_ppm(&buf[..buf.len() - 1]).is_err());
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
    }
}
