//! RGB float images with a validity mask, plus PNG and PFM I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rgb;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, `y * width + x`.
    pub pixels: Vec<Rgb>,
    /// `false` where the pixel carries no information (outside source coverage).
    pub mask: Vec<bool>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self { width, height, pixels: vec![fill; width * height], mask: vec![true; width * height] }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.width || y >= self.height {
            return Err(Error::PixelOutOfRange { x, y, w: self.width, h: self.height });
        }
        Ok(y * self.width + x)
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..self.len() {
            if self.mask[i] && other.mask[i] {
                for ch in 0..3 {
                    sum += (self.pixels[i][ch] - other.pixels[i][ch]).abs();
                }
                n += 3;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match extension(path).as_deref() {
            Some("pfm") => self.save_pfm(path),
            _ => self.save_png(path),
        }
    }

    pub fn load(path: &Path) -> Result<Image> {
        match extension(path).as_deref() {
            Some("pfm") => Image::load_pfm(path),
            _ => Image::load_png(path),
        }
    }

    /// 8-bit PNG. Masked pixels are written with alpha 0 when any exist.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if self.mask.iter().all(|m| *m) {
            let mut buf = Vec::with_capacity(self.len() * 3);
            for p in &self.pixels {
                buf.extend(p.iter().map(|v| quant(*v)));
            }
            image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ColorType::Rgb8)?;
        } else {
            let mut buf = Vec::with_capacity(self.len() * 4);
            for (p, m) in self.pixels.iter().zip(&self.mask) {
                buf.extend(p.iter().map(|v| quant(*v)));
                buf.push(if *m { 255 } else { 0 });
            }
            image::save_buffer(path, &buf, self.width as u32, self.height as u32, image::ColorType::Rgba8)?;
        }
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgba8();
        let (w, h) = img.dimensions();
        let mut out = Image::new(w as usize, h as usize, [0.0; 3]);
        for (i, px) in img.pixels().enumerate() {
            out.pixels[i] = [px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0];
            out.mask[i] = px[3] > 0;
        }
        Ok(out)
    }

    /// Little-endian color PFM, rows stored bottom to top. The mask is not stored.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "PF\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for v in self.get(x, y) {
                    f.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_pfm(path: &Path) -> Result<Image> {
        let bad = |msg: &str| Error::Parse { path: path.to_path_buf(), msg: msg.to_string() };
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != "PF" {
            return Err(bad("expected color PFM header 'PF'"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let dims: Vec<usize> = line.split_whitespace().filter_map(|t| t.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(bad("line 2: expected width and height"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let scale: f64 = line.trim().parse().map_err(|_| bad("line 3: expected scale"))?;
        let (w, h) = (dims[0], dims[1]);
        let mut raw = vec![0u8; w * h * 12];
        r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
        let mut out = Image::new(w, h, [0.0; 3]);
        let mut k = 0;
        for y in (0..h).rev() {
            for x in 0..w {
                let mut c = [0.0; 3];
                for v in c.iter_mut() {
                    let b = [raw[k], raw[k + 1], raw[k + 2], raw[k + 3]];
                    *v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
                    k += 4;
                }
                out.set(x, y, c);
            }
        }
        Ok(out)
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}
