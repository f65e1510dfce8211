//! Procedural two-frame scenes with analytic flow and occlusion.
//!
//! A scene is a smooth sinusoidal background plus a few textured sprites.
//! Each layer moves by a known affine map between the two frames. The second
//! frame is rendered analytically; the first frame is its bilinear backward
//! warp on visible pixels, so `warp(frame_t1, gt_flow) == frame_t` holds by
//! construction wherever the target stays visible.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, Mask};

/// Rigid-plus-scale motion of a layer about its own centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    pub scale: f64,
}

impl Motion {
    pub const STILL: Motion = Motion {
        dx: 0.0,
        dy: 0.0,
        rotation: 0.0,
        scale: 1.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Motion { dx, dy, ..Motion::STILL }
    }

    fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.rotation.sin_cos();
        [self.scale * c, -self.scale * s, self.scale * s, self.scale * c]
    }

    /// Position at `t+1` of the point `(x, y)` for a layer centred at `c`.
    fn forward(&self, c: (f64, f64), x: f64, y: f64) -> (f64, f64) {
        let m = self.matrix();
        let (rx, ry) = (x - c.0, y - c.1);
        (
            c.0 + self.dx + m[0] * rx + m[1] * ry,
            c.1 + self.dy + m[2] * rx + m[3] * ry,
        )
    }

    fn inverse(&self, c: (f64, f64), x: f64, y: f64) -> (f64, f64) {
        let m = self.matrix();
        let det = m[0] * m[3] - m[1] * m[2];
        let (rx, ry) = (x - c.0 - self.dx, y - c.1 - self.dy);
        (
            c.0 + (m[3] * rx - m[1] * ry) / det,
            c.1 + (-m[2] * rx + m[0] * ry) / det,
        )
    }

    /// Largest displacement of any point within `radius` of the centre.
    fn max_displacement(&self, radius: f64) -> f64 {
        let m = self.matrix();
        // Spectral norm of (M - I) bounds the linear part.
        let (a, b, c, d) = (m[0] - 1.0, m[1], m[2], m[3] - 1.0);
        let fro = a * a + b * b + c * c + d * d;
        let det = a * d - b * c;
        let spec = ((fro + ((fro * fro - 4.0 * det * det).max(0.0)).sqrt()) / 2.0).sqrt();
        self.dx.hypot(self.dy) + spec * radius
    }
}

/// Which motions a scene contains.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSpec {
    /// Inclusive range of sprite counts drawn when `sprites` is `None`.
    pub sprite_count: (usize, usize),
    /// Upper bound on any ground-truth displacement (pixels).
    pub max_displacement: f64,
    /// Allow random rotation and scaling of sprites.
    pub affine: bool,
    /// Move the background by a random translation.
    pub background_motion: bool,
    /// Explicit per-sprite motions, overriding the random draw.
    pub sprites: Option<Vec<Motion>>,
    /// Explicit background motion (translation only).
    pub background: Option<(f64, f64)>,
}

impl MotionSpec {
    pub fn random(max_displacement: f64) -> Self {
        MotionSpec {
            sprite_count: (1, 4),
            max_displacement,
            affine: true,
            background_motion: true,
            sprites: None,
            background: None,
        }
    }

    pub fn still() -> Self {
        MotionSpec {
            sprite_count: (1, 4),
            max_displacement: 0.0,
            affine: false,
            background_motion: false,
            sprites: None,
            background: Some((0.0, 0.0)),
        }
        .with_sprites(vec![Motion::STILL])
    }

    /// One sprite moving by `(dx, dy)` over a static background.
    pub fn translating_sprite(dx: f64, dy: f64) -> Self {
        MotionSpec {
            sprite_count: (1, 1),
            max_displacement: dx.hypot(dy),
            affine: false,
            background_motion: false,
            sprites: Some(vec![Motion::translation(dx, dy)]),
            background: Some((0.0, 0.0)),
        }
    }

    pub fn with_sprites(mut self, sprites: Vec<Motion>) -> Self {
        self.sprite_count = (sprites.len(), sprites.len());
        self.sprites = Some(sprites);
        self
    }
}

#[derive(Debug, Clone)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone)]
struct Texture {
    base: f64,
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, base: f64, spread: f64, freq: (f64, f64), count: usize) -> Self {
        let amp = spread / count as f64;
        let waves = (0..count)
            .map(|_| {
                let theta = rng.random_range(0.0..PI);
                let f = rng.random_range(freq.0..freq.1);
                Wave {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    phase: rng.random_range(0.0..2.0 * PI),
                    amp,
                }
            })
            .collect();
        Texture { base, waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let v = self.base + self.waves.iter().map(|w| w.amp * (w.fx * x + w.fy * y + w.phase).sin()).sum::<f64>();
        v.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct Sprite {
    center: (f64, f64),
    half: (f64, f64),
    ellipse: bool,
    texture: Texture,
    motion: Motion,
}

impl Sprite {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.center.0) / self.half.0, (y - self.center.1) / self.half.1);
        if self.ellipse {
            u * u + v * v <= 1.0
        } else {
            u.abs() <= 1.0 && v.abs() <= 1.0
        }
    }

    fn radius(&self) -> f64 {
        self.half.0.hypot(self.half.1)
    }

    fn shade(&self, x: f64, y: f64) -> f64 {
        self.texture.at(x - self.center.0, y - self.center.1)
    }
}

/// Two frames with exact ground-truth motion.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame_t: Image,
    pub frame_t1: Image,
    pub gt_flow: FlowField,
    pub gt_occlusion: Mask,
}

struct Layout {
    background: Texture,
    bg_motion: (f64, f64),
    sprites: Vec<Sprite>,
}

impl Layout {
    /// Topmost sprite index covering `(x, y)` at time `t` (0) or `t+1` (1).
    fn layer_at(&self, x: f64, y: f64, later: bool) -> Option<usize> {
        self.sprites.iter().enumerate().rev().find_map(|(k, s)| {
            let (px, py) = if later { s.motion.inverse(s.center, x, y) } else { (x, y) };
            s.contains(px, py).then_some(k)
        })
    }

    fn shade_t1(&self, x: f64, y: f64) -> f64 {
        match self.layer_at(x, y, true) {
            Some(k) => {
                let s = &self.sprites[k];
                let (px, py) = s.motion.inverse(s.center, x, y);
                s.shade(px, py)
            }
            None => self.background.at(x - self.bg_motion.0, y - self.bg_motion.1),
        }
    }

    fn shade_t(&self, x: f64, y: f64) -> f64 {
        match self.layer_at(x, y, false) {
            Some(k) => self.sprites[k].shade(x, y),
            None => self.background.at(x, y),
        }
    }
}

/// Generates a textured scene with 1-4 moving sprites.
///
/// Fails when the frame is smaller than 32 pixels on a side or when the
/// motion bound exceeds `width / 8`.
pub fn gen_scene(seed: u64, height: usize, width: usize, spec: &MotionSpec) -> Result<Scene> {
    Ok(render(&layout(seed, height, width, spec)?, height, width))
}

/// The scene of [`gen_scene`] plus frames at the interior times
/// `k / steps`, `k = 1..steps`, with every motion scaled linearly in time.
pub fn gen_sequence(seed: u64, height: usize, width: usize, spec: &MotionSpec, steps: usize) -> Result<(Scene, Vec<Image>)> {
    if steps == 0 {
        return Err(Error::arg("a sequence needs at least one step"));
    }
    let l = layout(seed, height, width, spec)?;
    let inner = (1..steps)
        .map(|k| render_at(&l, k as f64 / steps as f64, height, width))
        .collect();
    Ok((render(&l, height, width), inner))
}

fn layout(seed: u64, height: usize, width: usize, spec: &MotionSpec) -> Result<Layout> {
    if height < 32 || width < 32 {
        return Err(Error::arg(format!("scene must be at least 32x32, got {height}x{width}")));
    }
    let limit = width as f64 / 8.0;
    if !(spec.max_displacement >= 0.0) || spec.max_displacement > limit {
        return Err(Error::arg(format!(
            "max displacement {} exceeds width/8 = {limit}",
            spec.max_displacement
        )));
    }
    let (lo, hi) = spec.sprite_count;
    if spec.sprites.is_none() && (lo == 0 || lo > hi || hi > 4) {
        return Err(Error::arg("sprite count range must lie within 1..=4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let max_d = spec.max_displacement;

    let background = Texture::random(&mut rng, 0.5, 0.6, (0.12, 0.45), 6);
    let bg_motion = match spec.background {
        Some(m) => m,
        None if spec.background_motion && max_d > 0.0 => {
            let r = rng.random_range(0.0..0.5 * max_d);
            let a = rng.random_range(0.0..2.0 * PI);
            (r * a.cos(), r * a.sin())
        }
        None => (0.0, 0.0),
    };
    if bg_motion.0.hypot(bg_motion.1) > max_d + 1e-12 {
        return Err(Error::arg("background motion exceeds the displacement bound"));
    }

    let count = match &spec.sprites {
        Some(s) => s.len(),
        None => rng.random_range(lo..=hi),
    };
    let mut sprites = Vec::with_capacity(count);
    for k in 0..count {
        let half = (
            rng.random_range(0.12 * w..0.24 * w),
            rng.random_range(0.12 * h..0.24 * h),
        );
        let center = (rng.random_range(0.25 * w..0.75 * w), rng.random_range(0.25 * h..0.75 * h));
        let base = if rng.random_bool(0.5) {
            rng.random_range(0.2..0.35)
        } else {
            rng.random_range(0.65..0.8)
        };
        let texture = Texture::random(&mut rng, base, 0.3, (0.2, 0.6), 3);
        let ellipse = rng.random_bool(0.5);
        let motion = match &spec.sprites {
            Some(m) => m[k],
            None => random_motion(&mut rng, spec, half.0.hypot(half.1)),
        };
        let sprite = Sprite {
            center,
            half,
            ellipse,
            texture,
            motion,
        };
        if sprite.motion.max_displacement(sprite.radius()) > max_d + 1e-9 {
            return Err(Error::arg(format!(
                "sprite {k} motion exceeds the displacement bound {max_d}"
            )));
        }
        sprites.push(sprite);
    }

    Ok(Layout {
        background,
        bg_motion,
        sprites,
    })
}

impl Motion {
    /// The motion after a fraction `s` of the frame interval.
    fn partial(&self, s: f64) -> Motion {
        Motion {
            dx: self.dx * s,
            dy: self.dy * s,
            rotation: self.rotation * s,
            scale: 1.0 + (self.scale - 1.0) * s,
        }
    }
}

/// Analytic frame at time fraction `s` in `[0, 1]`.
fn render_at(layout: &Layout, s: f64, height: usize, width: usize) -> Image {
    let motions: Vec<Motion> = layout.sprites.iter().map(|sp| sp.motion.partial(s)).collect();
    Image::from_fn(height, width, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let hit = layout.sprites.iter().zip(&motions).rev().find_map(|(sp, m)| {
            let (px, py) = m.inverse(sp.center, xf, yf);
            sp.contains(px, py).then(|| sp.shade(px, py))
        });
        hit.unwrap_or_else(|| layout.background.at(xf - s * layout.bg_motion.0, yf - s * layout.bg_motion.1))
    })
    .expect("rendered values lie in [0,1]")
}

fn random_motion(rng: &mut ChaCha8Rng, spec: &MotionSpec, radius: f64) -> Motion {
    let max_d = spec.max_displacement;
    if max_d == 0.0 {
        return Motion::STILL;
    }
    let (rotation, scale) = if spec.affine {
        (rng.random_range(-0.05..0.05), rng.random_range(0.97..1.03))
    } else {
        (0.0, 1.0)
    };
    let mut m = Motion {
        dx: 0.0,
        dy: 0.0,
        rotation,
        scale,
    };
    let linear = m.max_displacement(radius);
    if linear >= max_d {
        // Shrink the linear part until it fits half the budget.
        let k = 0.5 * max_d / linear;
        m.rotation *= k;
        m.scale = 1.0 + (m.scale - 1.0) * k;
    }
    let budget = (max_d - m.max_displacement(radius)).max(0.0);
    let r = rng.random_range(0.3 * budget..budget.max(1e-12));
    let a = rng.random_range(0.0..2.0 * PI);
    m.dx = r * a.cos();
    m.dy = r * a.sin();
    m
}

fn render(layout: &Layout, height: usize, width: usize) -> Scene {
    let n = height * width;
    let mut t1 = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            t1[y * width + x] = layout.shade_t1(x as f64, y as f64);
        }
    }

    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut occ = vec![0u8; n];
    let mut t0 = vec![0.0; n];
    let (maxx, maxy) = ((width - 1) as f64, (height - 1) as f64);
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (xf, yf) = (x as f64, y as f64);
            let layer = layout.layer_at(xf, yf, false);
            let (tx, ty) = match layer {
                Some(k) => {
                    let s = &layout.sprites[k];
                    s.motion.forward(s.center, xf, yf)
                }
                None => (xf + layout.bg_motion.0, yf + layout.bg_motion.1),
            };
            u[i] = tx - xf;
            v[i] = ty - yf;
            let inside = tx >= 0.0 && ty >= 0.0 && tx <= maxx && ty <= maxy;
            let visible = inside && layout.layer_at(tx, ty, true) == layer;
            occ[i] = (!visible) as u8;
            t0[i] = if visible {
                bilinear(&t1, height, width, tx, ty)
            } else {
                layout.shade_t(xf, yf)
            };
        }
    }
    Scene {
        frame_t: Image::new(height, width, 1, t0).expect("rendered values lie in [0,1]"),
        frame_t1: Image::new(height, width, 1, t1).expect("rendered values lie in [0,1]"),
        gt_flow: FlowField::new(height, width, u, v).expect("bounded flow"),
        gt_occlusion: Mask::new(height, width, occ).expect("binary mask"),
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    let (ax, ay) = (x - x0 as f64, y - y0 as f64);
    let p = |yy: usize, xx: usize| plane[yy * w + xx];
    (1.0 - ay) * ((1.0 - ax) * p(y0, x0) + ax * p(y0, x0 + 1)) + ay * ((1.0 - ax) * p(y0 + 1, x0) + ax * p(y0 + 1, x0 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translating_sprite_has_exact_flow() {
        let s = gen_scene(0, 64, 64, &MotionSpec::translating_sprite(3.0, 0.0)).unwrap();
        let (mut on, mut off) = (0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let (u, v) = s.gt_flow.at(y, x);
                assert!(v.abs() < 1e-12);
                if (u - 3.0).abs() < 1e-12 {
                    on += 1;
                } else {
                    assert!(u.abs() < 1e-12, "flow {u} is neither sprite nor background");
                    off += 1;
                }
            }
        }
        assert!(on > 50 && off > 50);
    }

    #[test]
    fn sequence_frames_move_between_endpoints() {
        let (scene, inner) = gen_sequence(0, 64, 64, &MotionSpec::translating_sprite(4.0, 0.0), 4).unwrap();
        assert_eq!(inner.len(), 3);
        // Same seed, half the motion: identical layout at the halfway time.
        let half = gen_scene(0, 64, 64, &MotionSpec::translating_sprite(2.0, 0.0)).unwrap();
        assert_eq!(inner[1], half.frame_t1);
        let end = render_at(&layout(0, 64, 64, &MotionSpec::translating_sprite(4.0, 0.0)).unwrap(), 1.0, 64, 64);
        assert_eq!(end, scene.frame_t1);
    }

    #[test]
    fn still_scene_has_zero_flow_and_no_occlusion() {
        let s = gen_scene(0, 64, 64, &MotionSpec::still()).unwrap();
        assert_eq!(s.gt_flow.max_magnitude(), 0.0);
        assert_eq!(s.gt_occlusion.count(), 0);
        assert_eq!(s.frame_t, s.frame_t1);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_scene(0, 16, 64, &MotionSpec::still()).is_err());
        assert!(gen_scene(0, 64, 64, &MotionSpec::random(9.0)).is_err());
        assert!(gen_scene(0, 64, 64, &MotionSpec::translating_sprite(9.0, 0.0)).is_err());
    }

    #[test]
    fn random_motion_respects_bound() {
        for seed in 0..20 {
            let s = gen_scene(seed, 48, 48, &MotionSpec::random(4.0)).unwrap();
            assert!(s.gt_flow.max_magnitude() <= 4.0 + 1e-9);
        }
    }

    #[test]
    fn affine_inverse_roundtrip() {
        let m = Motion {
            dx: 1.5,
            dy: -0.5,
            rotation: 0.04,
            scale: 1.02,
        };
        let c = (10.0, 12.0);
        let (x, y) = m.forward(c, 3.0, 7.0);
        let (bx, by) = m.inverse(c, x, y);
        assert!((bx - 3.0).abs() < 1e-12 && (by - 7.0).abs() < 1e-12);
    }
}
