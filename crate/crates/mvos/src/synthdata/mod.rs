//! Deterministic synthetic scenes: moving textured shapes over simple
//! backgrounds, with exact analytic masks, z-order occlusion, distractor
//! instances, and the affine jitter used to augment modulator inputs.

pub mod pnm;
mod sampler;

pub use sampler::{make_benchmark, make_static_corpus, sample_scene, Benchmark, SamplerParams};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mask::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Annulus,
}

pub const ALL_SHAPES: [ShapeKind; 4] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Annulus,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Flat,
    Stripes,
    Checker,
}

pub const ALL_TEXTURES: [Texture; 3] = [Texture::Flat, Texture::Stripes, Texture::Checker];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Background {
    Flat,
    Gradient,
    Noise(u64),
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub size_px: f64,
    pub fill_color: [u8; 3],
    pub texture: Texture,
    /// Initial center (x, y) in pixels.
    pub start: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    pub angular_velocity_deg: f64,
    /// Multiplicative size change per frame.
    pub scale_rate: f64,
    pub z_order: i32,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    pub distractor_count: usize,
}

/// Frames plus per-object mask sequences; masks[obj][frame].
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Image>,
    pub masks: Vec<Vec<Mask>>,
    pub object_ids: Vec<u32>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.frames[0].h, self.frames[0].w)
    }

    /// Ground-truth sequences keyed by object id, the metrics' input shape.
    pub fn gt_sequences(&self) -> Vec<(u32, Vec<Mask>)> {
        self.object_ids
            .iter()
            .zip(&self.masks)
            .map(|(&id, seq)| (id, seq.clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
struct MovingShape {
    shape: ShapeKind,
    half: f64,
    color: [u8; 3],
    texture: Texture,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    angle_deg: f64,
    ang_vel: f64,
    scale: f64,
    scale_rate: f64,
    z: i32,
}

impl MovingShape {
    fn from_spec(o: &ObjectSpec) -> MovingShape {
        MovingShape {
            shape: o.shape,
            half: o.size_px * 0.5,
            color: o.fill_color,
            texture: o.texture,
            cx: o.start.0,
            cy: o.start.1,
            vx: o.velocity.0,
            vy: o.velocity.1,
            angle_deg: 0.0,
            ang_vel: o.angular_velocity_deg,
            scale: 1.0,
            scale_rate: o.scale_rate,
            z: o.z_order,
        }
    }

    fn radius(&self) -> f64 {
        self.half * self.scale
    }

    /// Advance one frame: move, bounce elastically off the borders, rotate,
    /// rescale (clamped so objects neither vanish nor swallow the frame).
    fn advance(&mut self, w: usize, h: usize) {
        self.cx += self.vx;
        self.cy += self.vy;
        let r = self.radius().min((w.min(h)) as f64 * 0.45);
        let max_x = (w - 1) as f64 - r;
        let max_y = (h - 1) as f64 - r;
        if self.cx < r {
            self.cx = r + (r - self.cx);
            self.vx = -self.vx;
        }
        if self.cx > max_x {
            self.cx = max_x - (self.cx - max_x);
            self.vx = -self.vx;
        }
        if self.cy < r {
            self.cy = r + (r - self.cy);
            self.vy = -self.vy;
        }
        if self.cy > max_y {
            self.cy = max_y - (self.cy - max_y);
            self.vy = -self.vy;
        }
        self.cx = self.cx.clamp(0.0, (w - 1) as f64);
        self.cy = self.cy.clamp(0.0, (h - 1) as f64);
        self.angle_deg += self.ang_vel;
        self.scale = (self.scale * self.scale_rate).clamp(0.5, 1.6);
    }

    /// Local object coordinates of pixel center (x, y).
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let th = self.angle_deg.to_radians();
        let (s, c) = th.sin_cos();
        let u = (dx * c + dy * s) / self.scale;
        let v = (-dx * s + dy * c) / self.scale;
        (u, v)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        let r = self.half;
        match self.shape {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Square => u.abs() <= r * 0.8 && v.abs() <= r * 0.8,
            ShapeKind::Triangle => {
                // equilateral, circumradius r, one vertex up
                let verts = [(0.0, -r), (r * 0.866, r * 0.5), (-r * 0.866, r * 0.5)];
                let mut inside = true;
                for i in 0..3 {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % 3];
                    let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                    inside &= cross >= 0.0;
                }
                inside
            }
            ShapeKind::Annulus => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= (r * 0.45) * (r * 0.45)
            }
        }
    }

    fn color_at(&self, x: f64, y: f64) -> [u8; 3] {
        let (u, v) = self.local(x, y);
        let period = (self.half * 0.5).max(2.0);
        let dim = |c: [u8; 3]| [(c[0] as f64 * 0.45) as u8, (c[1] as f64 * 0.45) as u8, (c[2] as f64 * 0.45) as u8];
        match self.texture {
            Texture::Flat => self.color,
            Texture::Stripes => {
                if (u / period).floor().rem_euclid(2.0) == 0.0 {
                    self.color
                } else {
                    dim(self.color)
                }
            }
            Texture::Checker => {
                if ((u / period).floor() + (v / period).floor()).rem_euclid(2.0) == 0.0 {
                    self.color
                } else {
                    dim(self.color)
                }
            }
        }
    }
}

fn render_background(bg: Background, h: usize, w: usize) -> Image {
    let mut img = Image::new(h, w);
    match bg {
        Background::Flat => {
            for y in 0..h {
                for x in 0..w {
                    img.set(y, x, [96, 96, 104]);
                }
            }
        }
        Background::Gradient => {
            for y in 0..h {
                let t = y as f64 / (h - 1).max(1) as f64;
                let v = |a: f64, b: f64| (a + (b - a) * t) as u8;
                let rgb = [v(40.0, 150.0), v(44.0, 146.0), v(52.0, 160.0)];
                for x in 0..w {
                    img.set(y, x, rgb);
                }
            }
        }
        Background::Noise(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for y in 0..h {
                for x in 0..w {
                    let rgb = [
                        rng.gen_range(30..130u8),
                        rng.gen_range(30..130u8),
                        rng.gen_range(30..130u8),
                    ];
                    img.set(y, x, rgb);
                }
            }
        }
    }
    img
}

fn validate_spec(spec: &SceneSpec, h: usize, w: usize) -> Result<()> {
    if spec.objects.is_empty() {
        return Err(Error::Data("scene needs at least one object".into()));
    }
    let mut zs: Vec<i32> = spec.objects.iter().map(|o| o.z_order).collect();
    zs.sort_unstable();
    zs.dedup();
    if zs.len() != spec.objects.len() {
        return Err(Error::Data("object z_order values must be unique".into()));
    }
    for (i, o) in spec.objects.iter().enumerate() {
        if o.size_px < 4.0 {
            return Err(Error::Data(format!("object {i} smaller than 4 px")));
        }
        let r = o.size_px * 0.5;
        if 2.0 * r >= w.min(h) as f64 {
            return Err(Error::Data(format!("object {i} too large to fit the frame")));
        }
        let (x, y) = o.start;
        if x - r < 0.0 || x + r > (w - 1) as f64 || y - r < 0.0 || y + r > (h - 1) as f64 {
            return Err(Error::Data(format!("object {i} not fully inside the frame at start")));
        }
    }
    Ok(())
}

/// Render a deterministic sequence. Targets come from the spec; distractors
/// (same shape class as object 0, different texture and size) and the noise
/// background derive from `seed`.
pub fn generate_sequence(spec: &SceneSpec, t: usize, h: usize, w: usize, seed: u64) -> Result<VideoSample> {
    if t < 1 {
        return Err(Error::Data("sequence length must be >= 1".into()));
    }
    validate_spec(spec, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_obj = spec.objects.len();
    let mut shapes: Vec<MovingShape> = spec.objects.iter().map(MovingShape::from_spec).collect();

    let max_z = shapes.iter().map(|s| s.z).max().unwrap();
    let min_z = shapes.iter().map(|s| s.z).min().unwrap();
    for d in 0..spec.distractor_count {
        let proto = &spec.objects[0];
        let textures: Vec<Texture> = ALL_TEXTURES.iter().copied().filter(|&x| x != proto.texture).collect();
        let texture = textures[rng.gen_range(0..textures.len())];
        let size = proto.size_px * if rng.gen_bool(0.5) { 0.65 } else { 1.35 };
        let r = size * 0.5;
        let color = [rng.gen_range(60..255u8), rng.gen_range(60..255u8), rng.gen_range(60..255u8)];
        // keep the distractor from smothering a target at frame 0
        let mut start = (w as f64 / 2.0, h as f64 / 2.0);
        for attempt in 0..64 {
            let x = rng.gen_range(r..(w - 1) as f64 - r);
            let y = rng.gen_range(r..(h - 1) as f64 - r);
            let clear = spec.objects.iter().all(|o| {
                let dx = o.start.0 - x;
                let dy = o.start.1 - y;
                (dx * dx + dy * dy).sqrt() > (o.size_px * 0.5 + r) * 0.75
            });
            if clear || attempt == 63 {
                start = (x, y);
                break;
            }
        }
        let speed = rng.gen_range(1.0..3.0);
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        let z = if rng.gen_bool(0.5) { max_z + 1 + d as i32 } else { min_z - 1 - d as i32 };
        shapes.push(MovingShape {
            shape: proto.shape,
            half: r,
            color,
            texture,
            cx: start.0,
            cy: start.1,
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
            angle_deg: 0.0,
            ang_vel: rng.gen_range(-6.0..6.0),
            scale: 1.0,
            scale_rate: 1.0,
            z,
        });
    }

    let background = render_background(spec.background, h, w);
    // paint order: ascending z, later overwrites
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    order.sort_by_key(|&i| shapes[i].z);

    let mut frames = Vec::with_capacity(t);
    let mut masks: Vec<Vec<Mask>> = vec![Vec::with_capacity(t); n_obj];

    for frame_idx in 0..t {
        if frame_idx > 0 {
            for s in shapes.iter_mut() {
                s.advance(w, h);
            }
        }
        let mut winner: Vec<Option<usize>> = vec![None; h * w];
        for &si in &order {
            let s = &shapes[si];
            let r = s.radius() * 1.3 + 1.0;
            let y0 = ((s.cy - r).floor().max(0.0)) as usize;
            let y1 = ((s.cy + r).ceil() as usize).min(h - 1);
            let x0 = ((s.cx - r).floor().max(0.0)) as usize;
            let x1 = ((s.cx + r).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if s.contains(x as f64, y as f64) {
                        winner[y * w + x] = Some(si);
                    }
                }
            }
        }
        let mut frame = background.clone();
        for y in 0..h {
            for x in 0..w {
                if let Some(si) = winner[y * w + x] {
                    frame.set(y, x, shapes[si].color_at(x as f64, y as f64));
                }
            }
        }
        for (obj, mask_seq) in masks.iter_mut().enumerate() {
            let mut m = Mask::new(h, w);
            for (p, &win) in winner.iter().enumerate() {
                m.data[p] = win == Some(obj);
            }
            mask_seq.push(m);
        }
        frames.push(frame);
        if frame_idx == 0 {
            for (obj, seq) in masks.iter().enumerate() {
                if seq[0].is_empty_mask() {
                    return Err(Error::Data(format!(
                        "degenerate spec: object {obj} fully occluded in frame 0"
                    )));
                }
            }
        }
    }

    Ok(VideoSample {
        frames,
        masks,
        object_ids: (0..n_obj as u32).collect(),
    })
}

/// Single segmented image (the phase-1 corpus element).
pub fn generate_static(spec: &SceneSpec, h: usize, w: usize, seed: u64) -> Result<VideoSample> {
    generate_sequence(spec, 1, h, w, seed)
}

/// Random shift / scale / rotation ranges for modulator-input augmentation.
#[derive(Debug, Clone, Copy)]
pub struct AffineJitter {
    pub max_shift: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub max_rotation_deg: f64,
    pub seed: u64,
}

impl AffineJitter {
    pub fn identity() -> AffineJitter {
        AffineJitter {
            max_shift: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            max_rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_lo <= 1.0 && 1.0 <= self.scale_hi) {
            return Err(Error::Config(format!(
                "jitter scale range [{}, {}] must bracket 1",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }

    /// Deterministic transform for (seed, draw).
    pub fn sample(&self, draw: u64) -> AffineDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, draw));
        let u = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..hi)
            }
        };
        AffineDraw {
            dx: u(&mut rng, -self.max_shift, self.max_shift),
            dy: u(&mut rng, -self.max_shift, self.max_shift),
            scale: u(&mut rng, self.scale_lo, self.scale_hi),
            rot_deg: u(&mut rng, -self.max_rotation_deg, self.max_rotation_deg),
        }
    }

    pub fn apply_image(&self, img: &Image, draw: u64) -> Image {
        warp_image(img, &self.sample(draw))
    }

    pub fn apply_mask(&self, mask: &Mask, draw: u64) -> Mask {
        warp_mask(mask, &self.sample(draw))
    }
}

fn mix(seed: u64, draw: u64) -> u64 {
    let mut z = seed ^ draw.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One sampled transform: shift after rotate-and-scale about the center.
#[derive(Debug, Clone, Copy)]
pub struct AffineDraw {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub rot_deg: f64,
}

impl AffineDraw {
    /// Map an output pixel back to its source location.
    fn source(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let px = x - cx - self.dx;
        let py = y - cy - self.dy;
        let th = -self.rot_deg.to_radians();
        let (s, c) = th.sin_cos();
        let qx = (px * c - py * s) / self.scale;
        let qy = (px * s + py * c) / self.scale;
        (qx + cx, qy + cy)
    }
}

/// Bilinear warp; out-of-frame samples are 0 (black).
pub fn warp_image(img: &Image, d: &AffineDraw) -> Image {
    let (h, w) = (img.h, img.w);
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = d.source(x as f64, y as f64, cx, cy);
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let v00 = img.get(y0, x0)[ch] as f64;
                let v01 = img.get(y0, x1)[ch] as f64;
                let v10 = img.get(y1, x0)[ch] as f64;
                let v11 = img.get(y1, x1)[ch] as f64;
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                rgb[ch] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.set(y, x, rgb);
        }
    }
    out
}

/// Nearest-neighbor warp; masks stay binary, out-of-frame is background.
pub fn warp_mask(mask: &Mask, d: &AffineDraw) -> Mask {
    let (h, w) = (mask.h, mask.w);
    let cx = (w - 1) as f64 / 2.0;
    let cy = (h - 1) as f64 / 2.0;
    let mut out = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = d.source(x as f64, y as f64, cx, cy);
            let rx = sx.round();
            let ry = sy.round();
            if rx < 0.0 || ry < 0.0 || rx > (w - 1) as f64 || ry > (h - 1) as f64 {
                continue;
            }
            out.set(y, x, mask.get(ry as usize, rx as usize));
        }
    }
    out
}
