//! Procedural tracking sequences: a textured background, a drifting target
//! shape and same-class distractors, with exact per-frame boxes.

use rand::{Rng as _, SeedableRng};

use crate::config::SynthConfig;
use crate::error::Result;
use crate::geometry::BoundingBox;
use crate::image::Image;
use crate::Rng;

/// Frames with one ground-truth box each and the target's class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BoundingBox>,
    pub class: usize,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

const SHAPES: usize = 6;

/// Coverage test in box-normalized coordinates `u, v` in `[-1, 1]`.
/// Returns 0 outside, 1 for the body, 2 for the inner pattern.
fn shape_at(class: usize, u: f64, v: f64) -> u8 {
    let r = u.hypot(v);
    let inside = match class % SHAPES {
        0 => r <= 1.0,
        1 => u.abs() <= 0.9 && v.abs() <= 0.9,
        2 => v.abs() <= 0.9 && u.abs() <= (v + 0.9) / 1.8,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.35 || v.abs() <= 0.35) && u.abs() <= 0.95 && v.abs() <= 0.95,
        _ => (0.45..=1.0).contains(&r),
    };
    if !inside {
        return 0;
    }
    let pattern = match (class / SHAPES) % 4 {
        0 => v.abs() < 0.22,
        1 => u.abs() < 0.22,
        2 => r < 0.3,
        _ => (u - v).abs() < 0.25,
    };
    if pattern {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone)]
struct Actor {
    class: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w0: f64,
    h0: f64,
    body: [f64; 3],
    body_end: [f64; 3],
    mark: [f64; 3],
    phase: f64,
}

fn random_color(rng: &mut Rng) -> [f64; 3] {
    [rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0), rng.gen_range(20.0..235.0)]
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

impl Actor {
    fn spawn(rng: &mut Rng, cfg: &SynthConfig, class: usize) -> Self {
        let w0 = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h0 = (w0 * rng.gen_range(0.8..1.25)).clamp(cfg.min_size, cfg.max_size);
        let canvas = cfg.canvas as f64;
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.3..=1.0) * cfg.speed;
        let body = random_color(rng);
        let mut body_end = random_color(rng);
        // drift toward a clearly different color
        while (0..3).map(|c| (body_end[c] - body[c]).abs()).sum::<f64>() < 150.0 {
            body_end = random_color(rng);
        }
        Actor {
            class,
            x: rng.gen_range(0.0..canvas - w0),
            y: rng.gen_range(0.0..canvas - h0),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w0,
            h0,
            body,
            body_end,
            mark: random_color(rng),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn scale(&self, t: usize, drift: f64) -> f64 {
        let amp = (10.0 * drift).min(0.3);
        1.0 + amp * (t as f64 * 0.15 + self.phase).sin()
    }

    /// Integer-aligned box at frame `t`.
    fn rect(&self, t: usize, drift: f64, canvas: usize) -> (usize, usize, usize, usize) {
        let s = self.scale(t, drift);
        let w = (self.w0 * s).round().clamp(4.0, canvas as f64 - 1.0) as usize;
        let h = (self.h0 * s).round().clamp(4.0, canvas as f64 - 1.0) as usize;
        let x = self.x.round().clamp(0.0, (canvas - w) as f64) as usize;
        let y = self.y.round().clamp(0.0, (canvas - h) as f64) as usize;
        (x, y, w, h)
    }

    fn advance(&mut self, rng: &mut Rng, cfg: &SynthConfig) {
        let canvas = cfg.canvas as f64;
        self.vx += rng.gen_range(-0.3..=0.3) * cfg.speed;
        self.vy += rng.gen_range(-0.3..=0.3) * cfg.speed;
        let v = self.vx.hypot(self.vy);
        if v > cfg.speed && v > 0.0 {
            self.vx *= cfg.speed / v;
            self.vy *= cfg.speed / v;
        }
        let margin = self.w0.max(self.h0) * 1.4;
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 || self.x > canvas - margin {
            self.vx = -self.vx;
            self.x = self.x.clamp(0.0, canvas - margin);
        }
        if self.y < 0.0 || self.y > canvas - margin {
            self.vy = -self.vy;
            self.y = self.y.clamp(0.0, canvas - margin);
        }
    }

    fn draw(&self, img: &mut Image, t: usize, drift: f64) {
        const SUB: usize = 4;
        let (x0, y0, w, h) = self.rect(t, drift, img.width);
        let body = lerp3(self.body, self.body_end, (drift * t as f64).min(1.0));
        for py in y0..y0 + h {
            for px in x0..x0 + w {
                let mut acc = [0.0; 3];
                let mut hits = 0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let u = ((px - x0) as f64 + (sx as f64 + 0.5) / SUB as f64) / w as f64 * 2.0 - 1.0;
                        let v = ((py - y0) as f64 + (sy as f64 + 0.5) / SUB as f64) / h as f64 * 2.0 - 1.0;
                        let color = match shape_at(self.class, u, v) {
                            0 => continue,
                            1 => body,
                            _ => self.mark,
                        };
                        hits += 1;
                        for c in 0..3 {
                            acc[c] += color[c];
                        }
                    }
                }
                if hits == 0 {
                    continue;
                }
                let cover = hits as f64 / (SUB * SUB) as f64;
                let old = img.pixel(px, py);
                let mix = [0, 1, 2].map(|c| {
                    let v = acc[c] / hits as f64 * cover + old[c] as f64 * (1.0 - cover);
                    v.round().clamp(0.0, 255.0) as u8
                });
                img.set(px, py, mix);
            }
        }
    }
}

fn background(rng: &mut Rng, size: usize) -> Image {
    let base = random_color(rng);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.02..0.12),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(10.0..30.0),
            )
        })
        .collect();
    let mut img = Image::filled(size, size, [0, 0, 0]);
    for y in 0..size {
        for x in 0..size {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let mut v = base[c];
                for (k, &(fx, fy, ph, amp)) in waves.iter().enumerate() {
                    v += amp * (fx * x as f64 + fy * y as f64 + ph + (c + k) as f64).sin();
                }
                v += rng.gen_range(-6.0..6.0);
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.set(x, y, px);
        }
    }
    img
}

/// Deterministic per `(seed, cfg)`.
pub fn synth_sequence(seed: u64, cfg: &SynthConfig) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let class = rng.gen_range(0..cfg.num_classes);
    let bg = background(&mut rng, cfg.canvas);
    let mut target = Actor::spawn(&mut rng, cfg, class);
    let mut others: Vec<Actor> = (0..cfg.distractors)
        .map(|_| {
            let mut a = Actor::spawn(&mut rng, cfg, class);
            // resembles the target's initial look and keeps it
            a.body = [0, 1, 2].map(|c| (target.body[c] + rng.gen_range(-20.0..20.0)).clamp(0.0, 255.0));
            a.body_end = a.body;
            a.mark = target.mark;
            a
        })
        .collect();
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut boxes = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut img = bg.clone();
        for a in &others {
            a.draw(&mut img, t, 0.0);
        }
        target.draw(&mut img, t, cfg.drift);
        let (x, y, w, h) = target.rect(t, cfg.drift, cfg.canvas);
        boxes.push(BoundingBox::from_top_left(x as f64, y as f64, w as f64, h as f64)?);
        frames.push(img);
        target.advance(&mut rng, cfg);
        for a in others.iter_mut() {
            a.advance(&mut rng, cfg);
        }
    }
    Ok(Sequence { name: format!("synth_{seed:08}"), frames, boxes, class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_frames() {
        let cfg = SynthConfig { frames: 5, ..SynthConfig::default() };
        let a = synth_sequence(3, &cfg).unwrap();
        let b = synth_sequence(3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_sequence(4, &cfg).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn boxes_stay_inside_canvas() {
        let cfg = SynthConfig { frames: 200, speed: 6.0, ..SynthConfig::default() };
        for seed in 0..5 {
            let seq = synth_sequence(seed, &cfg).unwrap();
            assert_eq!(seq.boxes.len(), 200);
            for b in &seq.boxes {
                let (x, y, w, h) = b.top_left();
                assert!(x >= 0.0 && y >= 0.0 && x + w <= 128.0 && y + h <= 128.0, "{b:?}");
            }
        }
    }

    #[test]
    fn no_drift_keeps_target_appearance() {
        let cfg = SynthConfig { frames: 20, drift: 0.0, distractors: 0, ..SynthConfig::default() };
        for seed in 0..6 {
            let seq = synth_sequence(seed, &cfg).unwrap();
            let patch = |i: usize| {
                let (x, y, w, h) = seq.boxes[i].top_left();
                let (x, y, w, h) = (x as usize, y as usize, w as usize, h as usize);
                let mut v = Vec::new();
                for py in 0..h {
                    for px in 0..w {
                        // pixel corners and center all inside the shape
                        let full = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (0.5, 0.5)]
                            .iter()
                            .all(|&(dx, dy)| {
                                let u = (px as f64 + dx) / w as f64 * 2.0 - 1.0;
                                let v = (py as f64 + dy) / h as f64 * 2.0 - 1.0;
                                shape_at(seq.class, u, v) != 0
                            });
                        if full {
                            v.push(seq.frames[i].pixel(x + px, y + py));
                        }
                    }
                }
                (w, h, v)
            };
            let first = patch(0);
            assert!(!first.2.is_empty());
            for i in 1..20 {
                assert_eq!(patch(i), first, "seed {seed} frame {i}");
            }
        }
    }
}
