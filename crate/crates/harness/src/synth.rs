//! Seeded synthetic co-saliency groups: one common object per image among
//! distractors on a textured background.

use std::f64::consts::PI;

use cosal_core::{BinaryMask, ImageGroup, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

pub const MAX_DIFFICULTY: u8 = 3;
pub const MIN_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Ring,
    Cross,
    /// Regular polygon with this many sides.
    Polygon(u8),
}

const KINDS: [ShapeKind; 7] = [
    ShapeKind::Circle,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Polygon(3),
    ShapeKind::Polygon(4),
    ShapeKind::Polygon(5),
    ShapeKind::Polygon(6),
];

/// Object identity: what stays fixed across the images of a group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub kind: ShapeKind,
    /// Hue in degrees.
    pub hue: f64,
}

/// Where one object lands in one image.
#[derive(Clone, Copy, Debug)]
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
}

impl ShapeKind {
    /// Whether offset `(dx, dy)` from the centre, already rotated into the
    /// shape frame, lies inside a shape of circumradius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d = dx.hypot(dy);
        match self {
            ShapeKind::Circle => d <= r,
            ShapeKind::Ring => d <= r && d >= 0.55 * r,
            ShapeKind::Cross => {
                let arm = r / 3.0;
                dx.abs().max(dy.abs()) <= r * std::f64::consts::FRAC_1_SQRT_2 && (dx.abs() <= arm || dy.abs() <= arm)
            }
            ShapeKind::Polygon(n) => {
                let sector = 2.0 * PI / n as f64;
                let phi = dy.atan2(dx).rem_euclid(sector) - sector / 2.0;
                d * phi.cos() <= r * (PI / n as f64).cos()
            }
        }
    }
}

fn hsv(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}


/// Snaps to the 8-bit grid so that files written and read back equal the
/// in-memory group exactly.
fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// `size×size` RGB canvas, channel-major.
struct Canvas {
    size: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    /// Low-contrast background: a colour gradient, oriented stripes and
    /// per-pixel grain.
    fn textured(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.05..0.3), rng.gen_range(0.35..0.65));
        let tint = hsv(rng.gen_range(0.0..360.0), 0.2, 0.2);
        let freq = rng.gen_range(0.15..0.6);
        let theta: f64 = rng.gen_range(0.0..PI);
        let (s, c) = theta.sin_cos();
        let mut rgb = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let t = (x + y) as f64 / (2 * size) as f64;
                let stripe = 0.06 * ((x as f64 * c + y as f64 * s) * freq).sin();
                for ch in 0..3 {
                    let grain = rng.gen_range(-0.04..0.04);
                    rgb[ch * size * size + y * size + x] = base[ch] + (t - 0.5) * tint[ch] + stripe + grain;
                }
            }
        }
        Self { size, rgb }
    }

    /// Paints the object and returns its pixel mask.
    fn draw(&mut self, look: Appearance, pose: Pose, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let n = self.size;
        let color = hsv(look.hue, rng.gen_range(0.75..1.0), rng.gen_range(0.8..1.0));
        let (s, c) = pose.angle.sin_cos();
        let mut mask = vec![false; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 + 0.5 - pose.cx, y as f64 + 0.5 - pose.cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if look.kind.contains(u, v, pose.radius) {
                    // Slight shading keeps objects from being flat fills.
                    let shade = 1.0 - 0.15 * (dx.hypot(dy) / pose.radius);
                    for ch in 0..3 {
                        self.rgb[ch * n * n + y * n + x] = color[ch] * shade;
                    }
                    mask[y * n + x] = true;
                }
            }
        }
        mask
    }

    fn into_tensor(self) -> Tensor<f32> {
        let n = self.size;
        Tensor::new(&[3, n, n], self.rgb.into_iter().map(quantize).collect()).expect("canvas shape")
    }
}

fn random_pose(size: usize, radius: (f64, f64), rng: &mut ChaCha8Rng) -> Pose {
    let s = size as f64;
    let radius = rng.gen_range(radius.0..radius.1) * s;
    let margin = radius.min(s / 2.0 - 1.0);
    Pose {
        cx: rng.gen_range(margin..s - margin),
        cy: rng.gen_range(margin..s - margin),
        radius,
        angle: rng.gen_range(0.0..2.0 * PI),
    }
}

fn distinct_appearance(common: Appearance, min_gap: f64, rng: &mut ChaCha8Rng) -> Appearance {
    let kinds: Vec<ShapeKind> = KINDS.iter().copied().filter(|k| *k != common.kind).collect();
    let kind = *kinds.choose(rng).expect("several shape kinds");
    let hue = (common.hue + rng.gen_range(min_gap..360.0 - min_gap)).rem_euclid(360.0);
    Appearance { kind, hue }
}

/// Per-image distractor assignment. Each distractor skips at least one
/// image, and for `pool ≥ 2` every image receives at least one.
fn assign_distractors(n: usize, pool: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut images: Vec<usize> = (0..n).collect();
    images.shuffle(rng);
    let absent: Vec<usize> = (0..pool).map(|t| images[t % n]).collect();
    (0..n)
        .map(|i| {
            let allowed: Vec<usize> = (0..pool).filter(|&t| absent[t] != i).collect();
            let mut chosen: Vec<usize> = allowed.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
            if chosen.is_empty() {
                if let Some(&t) = allowed.choose(rng) {
                    chosen.push(t);
                }
            }
            chosen
        })
        .collect()
}

/// Independent seed for item `index` of stream `stream` under `base`
/// (SplitMix64 finalizer over the combined words).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Number of distinct distractor objects drawn for a difficulty level.
pub fn distractor_pool(difficulty: u8) -> usize {
    if difficulty == 0 {
        0
    } else {
        (difficulty as usize + 1).min(3)
    }
}

/// Deterministic group of `n` images of side `size`.
///
/// Difficulty 0 renders the common object alone. Higher levels add 2 or 3
/// distractors, each absent from at least one image, and at level 3 their
/// hues may come closer to the common object's.
pub fn synth_group(seed: u64, n: usize, size: usize, difficulty: u8) -> Result<ImageGroup> {
    if n < 2 || size < MIN_SIZE || difficulty > MAX_DIFFICULTY {
        return Err(HarnessError::Usage(format!(
            "synth_group needs n ≥ 2, size ≥ {MIN_SIZE}, difficulty ≤ {MAX_DIFFICULTY}; got {n}, {size}, {difficulty}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = Appearance {
        kind: *KINDS.choose(&mut rng).expect("kinds"),
        hue: rng.gen_range(0.0..360.0),
    };
    let min_gap = if difficulty >= 3 { 35.0 } else { 70.0 };
    let pool: Vec<Appearance> = (0..distractor_pool(difficulty))
        .map(|_| distinct_appearance(common, min_gap, &mut rng))
        .collect();
    let assignment = assign_distractors(n, pool.len(), &mut rng);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for present in &assignment {
        let mut canvas = Canvas::textured(size, &mut rng);
        for &t in present {
            let pose = random_pose(size, (0.1, 0.2), &mut rng);
            canvas.draw(pool[t], pose, &mut rng);
        }
        // Drawn last, so the mask is exactly its visible pixels.
        let pose = random_pose(size, (0.16, 0.28), &mut rng);
        let mask = canvas.draw(common, pose, &mut rng);
        images.push(canvas.into_tensor());
        masks.push(BinaryMask {
            height: size,
            width: size,
            values: mask,
        });
    }
    let names = (0..n).map(|i| format!("{i:03}")).collect();
    Ok(ImageGroup::new(format!("g{seed:016x}"), names, images, masks)?)
}

/// One salient object on a textured background, with no distractors.
pub fn render_single(seed: u64, size: usize) -> Result<(Tensor<f32>, BinaryMask)> {
    let g = synth_group(seed, 2, size, 0)?;
    Ok((g.images[0].clone(), g.masks[0].clone()))
}

/// Mirrors columns.
pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let [c, h, w] = *image.shape() else { unreachable!("images are 3-D") };
    let d = image.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = d[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("same shape")
}

pub fn hflip_mask(mask: &BinaryMask) -> BinaryMask {
    let w = mask.width;
    let values = (0..mask.values.len())
        .map(|i| mask.values[i - i % w + (w - 1 - i % w)])
        .collect();
    BinaryMask { values, ..mask.clone() }
}

/// Inverse affine map sampled with nearest neighbours and clamped borders,
/// applied identically to the image and the mask.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub angle: f64,
    pub scale: f64,
    pub shift: (f64, f64),
    pub flip: bool,
}

impl Affine {
    pub fn random(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let t = 0.1 * size as f64;
        Self {
            angle: rng.gen_range(-0.26..0.26),
            scale: rng.gen_range(0.85..1.15),
            shift: (rng.gen_range(-t..t), rng.gen_range(-t..t)),
            flip: rng.gen_bool(0.5),
        }
    }

    /// Source pixel for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, size: usize) -> usize {
        let c = size as f64 / 2.0;
        let (dx, dy) = (x as f64 + 0.5 - c - self.shift.0, y as f64 + 0.5 - c - self.shift.1);
        let (s, co) = self.angle.sin_cos();
        let u = (co * dx + s * dy) / self.scale + c;
        let v = (-s * dx + co * dy) / self.scale + c;
        let clamp = |a: f64| (a.floor().max(0.0) as usize).min(size - 1);
        let sx = clamp(u);
        let sx = if self.flip { size - 1 - sx } else { sx };
        clamp(v) * size + sx
    }

    pub fn apply(&self, image: &Tensor<f32>, mask: &BinaryMask) -> (Tensor<f32>, BinaryMask) {
        let n = mask.width;
        let plane = n * n;
        let src: Vec<usize> = (0..plane).map(|p| self.source(p % n, p / n, n)).collect();
        let d = image.data();
        let mut out = vec![0.0; 3 * plane];
        for ch in 0..3 {
            for (p, &s) in src.iter().enumerate() {
                out[ch * plane + p] = d[ch * plane + s];
            }
        }
        let values = src.iter().map(|&s| mask.values[s]).collect();
        (
            Tensor::new(&[3, n, n], out).expect("same shape"),
            BinaryMask { values, ..mask.clone() },
        )
    }
}

/// `n` variants of one salient image: the original plus random affine
/// transforms with optional horizontal flips.
pub fn augment_single(image: &Tensor<f32>, mask: &BinaryMask, n: usize, seed: u64) -> Result<ImageGroup> {
    if n < 2 {
        return Err(HarnessError::Usage(format!("augment_single needs n ≥ 2, got {n}")));
    }
    if mask.height != mask.width || image.shape() != [3, mask.height, mask.width] {
        return Err(HarnessError::Data("augment_single needs a square image and a matching mask".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = vec![image.clone()];
    let mut masks = vec![mask.clone()];
    while images.len() < n {
        let (im, m) = Affine::random(mask.width, &mut rng).apply(image, mask);
        if m.count() == 0 {
            continue;
        }
        images.push(im);
        masks.push(m);
    }
    let names = (0..n).map(|i| format!("{i:03}")).collect();
    Ok(ImageGroup::new(format!("aug{seed:016x}"), names, images, masks)?)
}

/// Uniform per-pixel noise image, for the noise-robustness protocol.
pub fn noise_image(seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * size * size).map(|_| quantize(rng.gen_range(0.0..1.0))).collect();
    Tensor::new(&[3, size, size], data).expect("noise shape")
}
