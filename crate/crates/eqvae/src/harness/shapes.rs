//! Synthetic shapes corpus: random colored ellipses, rectangles, and
//! triangles on colored backgrounds. Spatial structure with zero
//! licensing, so the whole pipeline runs without downloads.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::nn::rng::split;

#[derive(Clone, Copy)]
enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        match self.kind {
            ShapeKind::Ellipse => (lx / self.rx).powi(2) + (ly / self.ry).powi(2) <= 1.0,
            ShapeKind::Rectangle => lx.abs() <= self.rx && ly.abs() <= self.ry,
            ShapeKind::Triangle => {
                // Isosceles triangle: apex up, base down, in local coords.
                let (ax, ay) = (0.0, -self.ry);
                let (bx, by) = (-self.rx, self.ry);
                let (cx2, cy2) = (self.rx, self.ry);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64, px: f64, py: f64| {
                    (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
                };
                let d1 = sign(ax, ay, bx, by, lx, ly);
                let d2 = sign(bx, by, cx2, cy2, lx, ly);
                let d3 = sign(cx2, cy2, ax, ay, lx, ly);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

fn random_color(rng: &mut ChaCha12Rng) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

fn render(size: usize, rng: &mut ChaCha12Rng) -> image::RgbImage {
    let bg = random_color(rng);
    let n_shapes = rng.random_range(1..=4usize);
    let s = size as f64;
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let kind = match rng.random_range(0..3u8) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            Shape {
                kind,
                cx: rng.random_range(0.2 * s..0.8 * s),
                cy: rng.random_range(0.2 * s..0.8 * s),
                rx: rng.random_range(0.08 * s..0.3 * s),
                ry: rng.random_range(0.08 * s..0.3 * s),
                angle: rng.random_range(0.0..std::f64::consts::TAU),
                color: random_color(rng),
            }
        })
        .collect();

    // 2x supersampling softens the shape boundaries a little.
    let mut img = image::RgbImage::new(size as u32, size as u32);
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f64; 3];
            for sub in 0..4 {
                let sx = px as f64 + 0.25 + 0.5 * (sub % 2) as f64;
                let sy = py as f64 + 0.25 + 0.5 * (sub / 2) as f64;
                let mut color = bg;
                for shape in &shapes {
                    if shape.contains(sx, sy) {
                        color = shape.color;
                    }
                }
                for ch in 0..3 {
                    acc[ch] += color[ch];
                }
            }
            let px_color = image::Rgb([
                (acc[0] / 4.0 * 255.0).round() as u8,
                (acc[1] / 4.0 * 255.0).round() as u8,
                (acc[2] / 4.0 * 255.0).round() as u8,
            ]);
            img.put_pixel(px as u32, py as u32, px_color);
        }
    }
    img
}

/// Writes `count` PNG images of random shapes at `image_size` px into
/// `dir`. Fully determined by the seed.
pub fn generate_shapes_corpus(dir: &Path, count: usize, image_size: usize, seed: u64) -> Result<()> {
    if count == 0 || image_size < 4 {
        return crate::error::config_err("need count >= 1 and image_size >= 4");
    }
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let mut rng = split(seed, "shapes-corpus", i as u64);
        let img = render(image_size, &mut rng);
        let path = dir.join(format!("shape_{i:05}.png"));
        img.save(&path)
            .map_err(|e| crate::Error::Data(format!("write {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_given_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_shapes_corpus(a.path(), 3, 16, 42).unwrap();
        generate_shapes_corpus(b.path(), 3, 16, 42).unwrap();
        for i in 0..3 {
            let name = format!("shape_{i:05}.png");
            let xa = std::fs::read(a.path().join(&name)).unwrap();
            let xb = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(xa, xb);
        }
        let c = tempfile::tempdir().unwrap();
        generate_shapes_corpus(c.path(), 1, 16, 43).unwrap();
        let xa = std::fs::read(a.path().join("shape_00000.png")).unwrap();
        let xc = std::fs::read(c.path().join("shape_00000.png")).unwrap();
        assert_ne!(xa, xc);
    }

    #[test]
    fn images_are_not_constant() {
        let dir = tempfile::tempdir().unwrap();
        generate_shapes_corpus(dir.path(), 4, 24, 5).unwrap();
        for i in 0..4 {
            let img = image::open(dir.path().join(format!("shape_{i:05}.png"))).unwrap().to_rgb8();
            let first = *img.get_pixel(0, 0);
            assert!(img.pixels().any(|p| *p != first), "image {i} is constant");
        }
    }
}
