//! Procedural content shapes, style swatches, and their ground-truth
//! combination, used for toy datasets and oracle generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 7] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Ring,
        Shape::Cross,
        Shape::Diamond,
        Shape::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Bar => "bar",
        }
    }

    /// Whether normalized coordinate `(u, v)` (origin at the shape centre,
    /// radius 1) lies inside.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => v <= 0.8 && v >= -0.9 + 2. * u.abs(),
            Shape::Ring => {
                let r = u * u + v * v;
                (0.35..=1.).contains(&r)
            }
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            Shape::Diamond => u.abs() + v.abs() <= 1.,
            Shape::Bar => u.abs() <= 0.95 && v.abs() <= 0.35,
        }
    }
}

/// A shape placed on the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentSpec {
    pub shape: Shape,
    /// Centre in pixels.
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

impl ContentSpec {
    pub fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f32;
        let radius = rng.random_range(0.22 * s..0.36 * s);
        Self {
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            cx: rng.random_range(radius..s - radius),
            cy: rng.random_range(radius..s - radius),
            radius,
        }
    }

    pub fn mask(&self, y: usize, x: usize) -> bool {
        let u = (x as f32 + 0.5 - self.cx) / self.radius;
        let v = (y as f32 + 0.5 - self.cy) / self.radius;
        self.shape.contains(u, v)
    }

    /// Dark shape on a light ground.
    pub fn render(&self, size: usize) -> Image {
        Image::from_fn(size, size, |y, x| if self.mask(y, x) { [0.1; 3] } else { [0.92; 3] })
    }

    pub fn caption(&self) -> String {
        format!("a {}", self.shape.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Flat, Texture::Stripes, Texture::Checker, Texture::Dots];

    /// Texture intensity in `[0, 1]` at a pixel.
    fn at(self, y: usize, x: usize, period: usize) -> f32 {
        let p = period.max(2);
        match self {
            Texture::Flat => 0.,
            Texture::Stripes => ((x + y) / (p / 2).max(1) % 2) as f32,
            Texture::Checker => ((x / p + y / p) % 2) as f32,
            Texture::Dots => {
                let (dx, dy) = ((x % p) as f32 - p as f32 / 2., (y % p) as f32 - p as f32 / 2.);
                if dx * dx + dy * dy <= (p as f32 / 3.).powi(2) {
                    1.
                } else {
                    0.
                }
            }
        }
    }
}

/// Palette and texture; the look a stylized image borrows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleSpec {
    /// Colour of the figure.
    pub ink: [f32; 3],
    /// Colour of the ground.
    pub paper: [f32; 3],
    pub texture: Texture,
    pub period: usize,
    /// Mix weight of the texture over the base colours.
    pub strength: f32,
}

impl StyleSpec {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut color = || {
            [
                rng.random_range(0.0..1.0f32),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ]
        };
        let ink = color();
        let mut paper = color();
        // Keep figure and ground distinguishable.
        let dist: f32 = ink.iter().zip(&paper).map(|(a, b)| (a - b).abs()).sum();
        if dist < 0.9 {
            paper = ink.map(|c| 1. - c);
        }
        Self {
            ink,
            paper,
            texture: Texture::ALL[rng.random_range(0..Texture::ALL.len())],
            period: rng.random_range(4..9),
            strength: rng.random_range(0.15..0.35),
        }
    }

    fn shade(&self, base: [f32; 3], y: usize, x: usize) -> [f32; 3] {
        let t = self.texture.at(y, x, self.period) * self.strength;
        base.map(|c| (c * (1. - t) + (1. - c) * t).clamp(0., 1.))
    }

    /// A swatch: textured ground with an ink band across the middle rows.
    pub fn render(&self, size: usize) -> Image {
        Image::from_fn(size, size, |y, x| {
            let base = if (size / 3..2 * size / 3).contains(&y) {
                self.ink
            } else {
                self.paper
            };
            self.shade(base, y, x)
        })
    }
}

/// Renders the content layout with the style's palette and texture.
pub fn stylize(content: &ContentSpec, style: &StyleSpec, size: usize) -> Image {
    Image::from_fn(size, size, |y, x| {
        let base = if content.mask(y, x) { style.ink } else { style.paper };
        style.shade(base, y, x)
    })
}

/// Pixelwise stylization of an arbitrary content image: dark pixels take the
/// ink colour, light pixels the paper colour, interpolated by luminance.
pub fn stylize_image(content: &Image, style: &StyleSpec) -> Image {
    Image::from_fn(content.height(), content.width(), |y, x| {
        let p = content.pixel(y, x);
        let lum = ((p[0] + p[1] + p[2]) / 3.).clamp(0., 1.);
        let mut base = [0f32; 3];
        for c in 0..3 {
            base[c] = style.ink[c] * (1. - lum) + style.paper[c] * lum;
        }
        style.shade(base, y, x)
    })
}

/// A fully specified toy dataset item.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTriplet {
    pub content: ContentSpec,
    pub style: StyleSpec,
}

impl SyntheticTriplet {
    pub fn images(&self, size: usize) -> (Image, Image, Image) {
        (
            self.content.render(size),
            self.style.render(size),
            stylize(&self.content, &self.style, size),
        )
    }
}

/// `n` seeded random triplets.
pub fn random_triplets(n: usize, seed: u64, size: usize) -> Vec<SyntheticTriplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| SyntheticTriplet {
            content: ContentSpec::random(&mut rng, size),
            style: StyleSpec::random(&mut rng),
        })
        .collect()
}

/// Uniform noise image.
pub fn noise_image(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(size, size, |_, _| [rng.random(), rng.random(), rng.random()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_are_deterministic_and_in_range() {
        let a = random_triplets(5, 7, 32);
        assert_eq!(a, random_triplets(5, 7, 32));
        for t in &a {
            let (c, s, x) = t.images(32);
            assert!(c.in_unit_range() && s.in_unit_range() && x.in_unit_range());
        }
    }

    #[test]
    fn stylized_keeps_layout() {
        let t = &random_triplets(1, 3, 32)[0];
        let (_, _, target) = t.images(32);
        let (cy, cx) = (t.content.cy as usize, t.content.cx as usize);
        assert!(t.content.mask(cy, cx) || t.content.shape == Shape::Ring);
        let inside = (0..32)
            .flat_map(|y| (0..32).map(move |x| (y, x)))
            .filter(|&(y, x)| t.content.mask(y, x))
            .count();
        assert!(inside > 20, "shape too small: {inside}");
        assert_eq!(target.dims(), (32, 32));
    }

    #[test]
    fn stylize_image_matches_spec_render_on_binary_content() {
        let t = &random_triplets(1, 11, 16)[0];
        let binary = Image::from_fn(16, 16, |y, x| if t.content.mask(y, x) { [0.; 3] } else { [1.; 3] });
        assert_eq!(stylize_image(&binary, &t.style), stylize(&t.content, &t.style, 16));
    }
}
