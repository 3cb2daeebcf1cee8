use std::f64::consts::PI;
use std::io::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// An 8-bit grayscale square image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(Cursor::new(&mut buf), self.size as u32, self.size as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.pixels)?;
        }
        Ok(buf)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let dec = png::Decoder::new(Cursor::new(bytes));
        let mut reader = dec.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::invalid("expected an 8-bit grayscale PNG"));
        }
        if info.width != info.height {
            return Err(Error::invalid(format!("expected a square image, got {}x{}", info.width, info.height)));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            size: info.width as usize,
            pixels: buf,
        })
    }
}

/// Defect overlay drawn for a class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    None,
    Blob { radius: f64, gain: f64 },
    Scratch { width: f64, gain: f64, count: usize },
    Ring { radius: f64, width: f64, gain: f64 },
    Cluster { dots: usize, radius: f64, gain: f64 },
}

impl Primitive {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Blob { .. } => "blob",
            Self::Scratch { .. } => "scratch",
            Self::Ring { .. } => "ring",
            Self::Cluster { .. } => "cluster",
        }
    }
}

/// Class 0 draws nothing; other classes cycle blob, scratch, ring, cluster
/// with the size and contrast changing on every pass of the cycle.
pub fn class_primitive(class_id: usize) -> Primitive {
    if class_id == 0 {
        return Primitive::None;
    }
    let pass = (class_id - 1) / 4;
    let sign = if pass.is_multiple_of(2) { 1.0 } else { -1.0 };
    let gain = sign * (0.45 + 0.1 * (pass / 2) as f64);
    let grow = 1.0 + 0.6 * pass as f64;
    match (class_id - 1) % 4 {
        0 => Primitive::Blob { radius: 0.07 * grow, gain },
        1 => Primitive::Scratch { width: 0.02 * grow, gain, count: 1 + pass },
        2 => Primitive::Ring { radius: 0.12 * grow, width: 0.025 * grow, gain },
        _ => Primitive::Cluster { dots: 5 + 2 * pass, radius: 0.025 * grow, gain },
    }
}

/// Grating parameters of a product line: `(cycles per image, angle, phase, contrast)`.
pub fn line_grating(line_id: usize) -> (f64, f64, f64, f64) {
    let cycles = 3.0 + 2.5 * line_id as f64;
    let angle = (line_id as f64 * 0.61803398875 * PI) % PI;
    let phase = 1.3 * line_id as f64;
    let contrast = 0.22 + 0.04 * (line_id % 3) as f64;
    (cycles, angle, phase, contrast)
}

/// Renders one sample: product-line grating + class overlay + Gaussian
/// noise with standard deviation `noise` (intensity units, full range 1).
pub fn render_sample(
    line_id: usize,
    class_id: usize,
    num_lines: usize,
    num_classes: usize,
    rng_seed: u64,
    size: usize,
    noise: f64,
) -> Result<GrayImage> {
    if line_id >= num_lines || class_id >= num_classes {
        return Err(Error::invalid(format!(
            "unknown (line {line_id}, class {class_id}) for {num_lines} lines and {num_classes} classes"
        )));
    }
    if size < 4 {
        return Err(Error::invalid("image size must be at least 4"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid(format!("noise level must lie in [0, 1], got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (cycles, angle, phase, contrast) = line_grating(line_id);
    let jitter: f64 = rng.random_range(-0.3..0.3);
    let (ca, sa) = (angle.cos(), angle.sin());
    let n = size as f64;
    let mut img = vec![0.0f64; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / n, y as f64 / n);
            let t = 2.0 * PI * cycles * (u * ca + v * sa) + phase + jitter;
            img[y * size + x] = 0.5 + contrast * t.sin();
        }
    }
    overlay(&mut img, size, class_primitive(class_id), &mut rng);
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).expect("valid sigma");
        for p in &mut img {
            *p += dist.sample(&mut rng);
        }
    }
    let pixels = img
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(GrayImage { size, pixels })
}

fn overlay(img: &mut [f64], size: usize, prim: Primitive, rng: &mut ChaCha8Rng) {
    let n = size as f64;
    let mut paint = |f: &dyn Fn(f64, f64) -> f64| {
        for y in 0..size {
            for x in 0..size {
                img[y * size + x] += f((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
            }
        }
    };
    match prim {
        Primitive::None => {}
        Primitive::Blob { radius, gain } => {
            let (cx, cy) = (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75));
            paint(&|u, v| {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                gain * (-d2 / (2.0 * radius * radius)).exp()
            });
        }
        Primitive::Scratch { width, gain, count } => {
            for _ in 0..count {
                let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
                let th: f64 = rng.random_range(0.0..PI);
                let half_len = rng.random_range(0.25..0.4);
                let (dx, dy) = (th.cos(), th.sin());
                paint(&|u, v| {
                    let (px, py) = (u - cx, v - cy);
                    let along = px * dx + py * dy;
                    let across = -px * dy + py * dx;
                    if along.abs() > half_len {
                        0.0
                    } else {
                        gain * (-(across * across) / (2.0 * width * width)).exp()
                    }
                });
            }
        }
        Primitive::Ring { radius, width, gain } => {
            let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
            paint(&|u, v| {
                let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
                gain * (-((r - radius).powi(2)) / (2.0 * width * width)).exp()
            });
        }
        Primitive::Cluster { dots, radius, gain } => {
            let (cx, cy) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
            let centers: Vec<(f64, f64)> = (0..dots)
                .map(|_| (cx + rng.random_range(-0.12..0.12), cy + rng.random_range(-0.12..0.12)))
                .collect();
            paint(&|u, v| {
                centers
                    .iter()
                    .map(|&(x, y)| {
                        let d2 = (u - x).powi(2) + (v - y).powi(2);
                        gain * (-d2 / (2.0 * radius * radius)).exp()
                    })
                    .sum()
            });
        }
    }
}
