//! Procedural renderer for the synthetic corpora.
//!
//! Geometry is defined in normalised `[0, 1]²` coordinates and rasterised with
//! anti-aliased edges, so the same ground truth renders at any resolution.

use rand::Rng;

use super::grammar::{Finding, GeneralScene, GeneralShape, Side, Size};
use super::{ToyClass, View};
use crate::image::GrayImage;

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, fill: f64) -> Self {
        Self {
            size,
            px: vec![fill; size * size],
        }
    }

    fn coords(&self, i: usize) -> (f64, f64) {
        let s = self.size as f64;
        (
            ((i % self.size) as f64 + 0.5) / s,
            ((i / self.size) as f64 + 0.5) / s,
        )
    }

    /// Blends `value` in with coverage `mask(x, y)`.
    fn paint(&mut self, value: f64, mask: impl Fn(f64, f64) -> f64) {
        for i in 0..self.px.len() {
            let (x, y) = self.coords(i);
            let m = mask(x, y);
            if m > 0.0 {
                self.px[i] = self.px[i] * (1.0 - m) + value * m;
            }
        }
    }

    fn into_image(self) -> GrayImage {
        GrayImage::from_vec(self.size, self.size, self.px).expect("square canvas")
    }
}

/// Coverage of an axis-aligned ellipse, with an edge ramp `soft` pixels wide.
fn ellipse(size: usize, cx: f64, cy: f64, rx: f64, ry: f64, soft: f64) -> impl Fn(f64, f64) -> f64 {
    let r_px = rx.min(ry) * size as f64;
    move |x, y| {
        let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
        (0.5 + (1.0 - d) * r_px / soft).clamp(0.0, 1.0)
    }
}

/// Coverage of the half-plane `sign * (coord - edge) > 0`.
fn half_plane(size: usize, edge: f64, sign: f64, vertical: bool) -> impl Fn(f64, f64) -> f64 {
    let s = size as f64;
    move |x, y| {
        let c = if vertical { x } else { y };
        (0.5 + sign * (c - edge) * s).clamp(0.0, 1.0)
    }
}

struct Anatomy {
    body: (f64, f64, f64, f64),
    lungs: Vec<(f64, f64, f64, f64)>,
    heart: (f64, f64, f64, f64),
    body_value: f64,
}

fn anatomy(view: View) -> Anatomy {
    match view {
        View::PA => Anatomy {
            body: (0.5, 0.55, 0.44, 0.47),
            lungs: vec![(0.31, 0.45, 0.14, 0.27), (0.69, 0.45, 0.14, 0.27)],
            heart: (0.55, 0.66, 0.11, 0.09),
            body_value: 0.45,
        },
        View::AP => Anatomy {
            body: (0.5, 0.55, 0.45, 0.47),
            lungs: vec![(0.31, 0.46, 0.14, 0.25), (0.69, 0.46, 0.14, 0.25)],
            heart: (0.55, 0.66, 0.13, 0.10),
            body_value: 0.5,
        },
        View::LAT => Anatomy {
            body: (0.5, 0.55, 0.36, 0.47),
            lungs: vec![(0.52, 0.45, 0.2, 0.28)],
            heart: (0.42, 0.64, 0.12, 0.1),
            body_value: 0.47,
        },
    }
}

/// Lung field holding findings on the patient's `side` (patient right is image left).
fn side_lung(a: &Anatomy, side: Side) -> (f64, f64, f64, f64) {
    if a.lungs.len() == 1 {
        let (cx, cy, rx, ry) = a.lungs[0];
        let shift = if side == Side::Right { -0.05 } else { 0.05 };
        return (cx + shift, cy, rx * 0.75, ry);
    }
    match side {
        Side::Right => a.lungs[0],
        Side::Left => a.lungs[1],
    }
}

/// Image-space direction (+1 right, -1 left) of the patient's `side`.
fn image_dir(side: Side) -> f64 {
    match side {
        Side::Right => -1.0,
        Side::Left => 1.0,
    }
}

fn jitter<R: Rng>(rng: &mut R, amount: f64) -> f64 {
    rng.gen_range(-amount..amount)
}

/// Renders a chest-like image with the given findings.
pub fn render_medical<R: Rng>(findings: &[Finding], view: View, size: usize, rng: &mut R) -> GrayImage {
    let a = anatomy(view);
    let (gx, gy) = (jitter(rng, 0.015), jitter(rng, 0.015));
    let mut c = Canvas::new(size, 0.05);
    let (bx, by, brx, bry) = a.body;
    c.paint(a.body_value, ellipse(size, bx + gx, by + gy, brx, bry, 1.5));
    for &(lx, ly, lrx, lry) in &a.lungs {
        c.paint(0.2, ellipse(size, lx + gx, ly + gy, lrx, lry, 1.5));
    }

    let find = |class: ToyClass| findings.iter().find(|f| f.class == class).copied();

    let (hx, hy, hrx, hry) = a.heart;
    match find(ToyClass::Cardiomegaly) {
        Some(f) => {
            let k = if f.size == Size::Large { 1.8 } else { 1.45 };
            let cx = hx + 0.05 * image_dir(f.side) + gx + jitter(rng, 0.01);
            c.paint(0.68, ellipse(size, cx, hy + gy, hrx * k, hry * k, 1.5));
        }
        None => c.paint(0.62, ellipse(size, hx + gx, hy + gy, hrx, hry, 1.5)),
    }

    if let Some(f) = find(ToyClass::Edema) {
        let (lx, _, _, _) = side_lung(&a, f.side);
        let (rx, ry) = if f.size == Size::Large { (0.11, 0.2) } else { (0.07, 0.12) };
        let cx = lx - 0.03 * image_dir(f.side) + gx + jitter(rng, 0.015);
        c.paint(0.42, ellipse(size, cx, 0.43 + gy + jitter(rng, 0.015), rx, ry, 3.0));
    }

    if let Some(f) = find(ToyClass::Pneumonia) {
        let (lx, _, _, _) = side_lung(&a, f.side);
        let r = if f.size == Size::Large { 0.085 } else { 0.05 };
        let (cx, cy) = (lx + gx + jitter(rng, 0.015), 0.33 + gy + jitter(rng, 0.015));
        c.paint(0.85, ellipse(size, cx, cy, r, r, 1.0));
    }

    if let Some(f) = find(ToyClass::PleuralEffusion) {
        let (lx, ly, lrx, lry) = side_lung(&a, f.side);
        let h = if f.size == Size::Large { 0.2 } else { 0.1 };
        let level = 0.72 - h + gy + jitter(rng, 0.01);
        let lung = ellipse(size, lx + gx, ly + gy, lrx * 1.05, lry * 1.05, 1.0);
        let below = half_plane(size, level, 1.0, false);
        c.paint(0.78, move |x, y| lung(x, y) * below(x, y));
    }

    if let Some(f) = find(ToyClass::Pneumothorax) {
        let (lx, ly, lrx, lry) = side_lung(&a, f.side);
        let w = if f.size == Size::Large { 0.09 } else { 0.05 };
        let dir = image_dir(f.side);
        // band along the lateral lung edge, upper two thirds
        let edge = lx + gx + dir * (lrx - w) + jitter(rng, 0.01);
        let lung = ellipse(size, lx + gx, ly + gy, lrx, lry, 1.0);
        let lateral = half_plane(size, edge, dir, true);
        let upper = half_plane(size, 0.58 + gy, -1.0, false);
        c.paint(0.0, move |x, y| lung(x, y) * lateral(x, y) * upper(x, y));
        let line = half_plane(size, edge - dir * 1.0 / size as f64, dir, true);
        let lateral2 = half_plane(size, edge, dir, true);
        let lung2 = ellipse(size, lx + gx, ly + gy, lrx, lry, 1.0);
        let upper2 = half_plane(size, 0.58 + gy, -1.0, false);
        c.paint(0.5, move |x, y| {
            lung2(x, y) * upper2(x, y) * (line(x, y) - lateral2(x, y)).max(0.0)
        });
    }

    let brightness = jitter(rng, 0.03);
    let contrast = 1.0 + jitter(rng, 0.05);
    let mut img = c.into_image();
    img.pixels
        .mapv_inplace(|v| ((v - 0.4) * contrast + 0.4 + brightness).clamp(0.0, 1.0));
    img
}

/// Renders one general-domain picture: a single shape on a shaded background.
pub fn render_general<R: Rng>(scene: &GeneralScene, size: usize, rng: &mut R) -> GrayImage {
    let mut c = Canvas::new(size, 0.0);
    let shade = 0.45 + jitter(rng, 0.05);
    for i in 0..c.px.len() {
        let (_, y) = c.coords(i);
        c.px[i] = shade + 0.1 * (y - 0.5);
    }
    let cx = if scene.left { 0.3 } else { 0.7 } + jitter(rng, 0.03);
    let cy = if scene.top { 0.3 } else { 0.7 } + jitter(rng, 0.03);
    let value = if scene.bright { 0.92 } else { 0.05 };
    let r = 0.16 + jitter(rng, 0.02);
    match scene.shape {
        GeneralShape::Circle => c.paint(value, ellipse(size, cx, cy, r, r, 1.0)),
        GeneralShape::Square => {
            let (l, rr) = (half_plane(size, cx - r, 1.0, true), half_plane(size, cx + r, -1.0, true));
            let (t, b) = (half_plane(size, cy - r, 1.0, false), half_plane(size, cy + r, -1.0, false));
            c.paint(value, move |x, y| l(x, y) * rr(x, y) * t(x, y) * b(x, y));
        }
        GeneralShape::Bar => {
            let (l, rr) = (
                half_plane(size, cx - 1.6 * r, 1.0, true),
                half_plane(size, cx + 1.6 * r, -1.0, true),
            );
            let (t, b) = (
                half_plane(size, cy - 0.4 * r, 1.0, false),
                half_plane(size, cy + 0.4 * r, -1.0, false),
            );
            c.paint(value, move |x, y| l(x, y) * rr(x, y) * t(x, y) * b(x, y));
        }
        GeneralShape::Ring => {
            let outer = ellipse(size, cx, cy, r, r, 1.0);
            let inner = ellipse(size, cx, cy, r * 0.55, r * 0.55, 1.0);
            c.paint(value, move |x, y| (outer(x, y) - inner(x, y)).max(0.0));
        }
    }
    c.into_image().clamped()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mean_abs_diff(a: &GrayImage, b: &GrayImage) -> f64 {
        (&a.pixels - &b.pixels).mapv(f64::abs).mean().unwrap()
    }

    #[test]
    fn findings_change_the_image_and_sides_differ() {
        let normal = render_medical(&[], View::PA, 32, &mut ChaCha8Rng::seed_from_u64(1));
        for class in ToyClass::FINDINGS {
            let left = Finding { class, side: Side::Left, size: Size::Large };
            let right = Finding { class, side: Side::Right, size: Size::Large };
            let l = render_medical(&[left], View::PA, 32, &mut ChaCha8Rng::seed_from_u64(1));
            let r = render_medical(&[right], View::PA, 32, &mut ChaCha8Rng::seed_from_u64(1));
            assert!(mean_abs_diff(&l, &normal) > 0.004, "{class:?} invisible");
            assert!(mean_abs_diff(&l, &r) > 0.004, "{class:?} side invisible");
        }
    }

    #[test]
    fn pixel_range_and_determinism() {
        let f = [Finding { class: ToyClass::Pneumothorax, side: Side::Right, size: Size::Small }];
        let a = render_medical(&f, View::LAT, 48, &mut ChaCha8Rng::seed_from_u64(9));
        let b = render_medical(&f, View::LAT, 48, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let s = GeneralScene { shape: GeneralShape::Ring, bright: true, top: false, left: true };
        let g = render_general(&s, 32, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(g.dims(), (32, 32));
    }
}
