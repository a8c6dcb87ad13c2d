//! Seeded scene sampling and the fixed benchmark splits used by training
//! and the ablation runs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{
    generate_sequence, Background, ObjectSpec, SceneSpec, ShapeKind, Texture, VideoSample,
    ALL_SHAPES,
};

#[derive(Debug, Clone)]
pub struct SamplerParams {
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub n_objects: usize,
    pub distractors: usize,
    /// Texture pool; holding one class out of training gives the
    /// fine-tuning experiments their distribution shift.
    pub textures: Vec<Texture>,
    /// Probability that object 1 is a look-alike twin of object 0, which is
    /// what makes the location prior earn its keep.
    pub twin_prob: f64,
    pub size_lo: f64,
    pub size_hi: f64,
    pub speed_lo: f64,
    pub speed_hi: f64,
}

impl SamplerParams {
    pub fn bench_96(frames: usize) -> SamplerParams {
        SamplerParams {
            h: 96,
            w: 96,
            frames,
            n_objects: 2,
            distractors: 1,
            textures: vec![Texture::Flat, Texture::Stripes],
            twin_prob: 0.5,
            size_lo: 18.0,
            size_hi: 30.0,
            speed_lo: 1.2,
            speed_hi: 3.0,
        }
    }
}

fn sample_object(rng: &mut ChaCha8Rng, params: &SamplerParams, z: i32) -> ObjectSpec {
    let shape = ALL_SHAPES[rng.gen_range(0..ALL_SHAPES.len())];
    let texture = params.textures[rng.gen_range(0..params.textures.len())];
    let size = rng.gen_range(params.size_lo..params.size_hi);
    let r = size * 0.5;
    let color = [
        rng.gen_range(70..255u8),
        rng.gen_range(70..255u8),
        rng.gen_range(70..255u8),
    ];
    let x = rng.gen_range(r + 1.0..(params.w - 2) as f64 - r);
    let y = rng.gen_range(r + 1.0..(params.h - 2) as f64 - r);
    let speed = rng.gen_range(params.speed_lo..params.speed_hi);
    let dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let spin = match shape {
        ShapeKind::Disk | ShapeKind::Annulus => 0.0,
        _ => rng.gen_range(-6.0..6.0),
    };
    ObjectSpec {
        shape,
        size_px: size,
        fill_color: color,
        texture,
        start: (x, y),
        velocity: (speed * dir.cos(), speed * dir.sin()),
        angular_velocity_deg: spin,
        scale_rate: rng.gen_range(0.995..1.005),
        z_order: z,
    }
}

/// Sample a scene: object 0 free, object 1 a twin of object 0 with
/// `twin_prob` (same shape/texture/color, fresh motion), the rest free.
pub fn sample_scene(rng: &mut ChaCha8Rng, params: &SamplerParams) -> SceneSpec {
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(params.n_objects);
    for i in 0..params.n_objects {
        let mut o = sample_object(rng, params, i as i32);
        if i == 1 && rng.gen_bool(params.twin_prob) {
            let proto = objects[0].clone();
            let wobble = rng.gen_range(0.9..1.1);
            o.shape = proto.shape;
            o.texture = proto.texture;
            o.fill_color = proto.fill_color;
            o.size_px = (proto.size_px * wobble).max(params.size_lo);
            o.angular_velocity_deg = proto.angular_velocity_deg;
        }
        objects.push(o);
    }
    let background = match rng.gen_range(0..3) {
        0 => Background::Flat,
        1 => Background::Gradient,
        _ => Background::Noise(rng.gen()),
    };
    SceneSpec {
        objects,
        background,
        distractor_count: params.distractors,
    }
}

/// Sample until the scene renders with every object visible in frame 0.
pub fn sample_valid_sequence(
    rng: &mut ChaCha8Rng,
    params: &SamplerParams,
) -> Result<VideoSample> {
    for _ in 0..32 {
        let spec = sample_scene(rng, params);
        let seed = rng.gen::<u64>();
        match generate_sequence(&spec, params.frames, params.h, params.w, seed) {
            Ok(sample) => return Ok(sample),
            Err(Error::Data(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Data("could not sample a valid scene in 32 tries".into()))
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// The fixed seeded benchmark: disjoint train/val/test video sets drawn from
/// one sampler configuration.
pub fn make_benchmark(
    seed: u64,
    params: &SamplerParams,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<Benchmark> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Result<Vec<VideoSample>> {
        (0..n).map(|_| sample_valid_sequence(&mut rng, params)).collect()
    };
    Ok(Benchmark {
        train: draw(n_train)?,
        val: draw(n_val)?,
        test: draw(n_test)?,
    })
}

/// Static (single-frame) corpus for phase-1 training.
pub fn make_static_corpus(seed: u64, params: &SamplerParams, n: usize) -> Result<Vec<VideoSample>> {
    let mut p = params.clone();
    p.frames = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_valid_sequence(&mut rng, &p)).collect()
}
