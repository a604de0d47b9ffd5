//! Procedural street scenes: seeded layout generation and rasterisation into
//! day and night renderings with exact label maps.

use super::taxonomy::{self as tx, Taxonomy};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{LabelMap, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Probability that each regular dynamic/small class appears in a scene.
    pub object_prob: f64,
    /// Upper bound on instances per present class; 0 disables dynamic objects.
    pub max_per_class: u32,
    /// Occurrence probability of each long-tailed class.
    pub long_tail_prob: f64,
    /// Per-object, per-channel uniform colour jitter.
    pub color_jitter: f32,
    /// Per-pixel uniform texture noise amplitude.
    pub texture_noise: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            object_prob: 0.75,
            max_per_class: 2,
            long_tail_prob: 0.05,
            color_jitter: 0.06,
            texture_noise: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Rect,
    Ellipse,
}

/// A filled primitive with its top-left corner at `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacedObject {
    pub class: u8,
    pub shape: Primitive,
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
    pub color: [f32; 3],
}

impl PlacedObject {
    fn covers(&self, px: i32, py: i32, dx: i32, dy: i32) -> bool {
        let (x0, y0) = (self.x + dx, self.y + dy);
        let (lx, ly) = (px - x0, py - y0);
        if lx < 0 || ly < 0 || lx >= self.w as i32 || ly >= self.h as i32 {
            return false;
        }
        match self.shape {
            Primitive::Rect => true,
            Primitive::Ellipse => {
                let rx = self.w as f32 / 2.0;
                let ry = self.h as f32 / 2.0;
                let u = (lx as f32 + 0.5 - rx) / rx;
                let v = (ly as f32 + 0.5 - ry) / ry;
                u * u + v * v <= 1.0
            }
        }
    }
}

/// Everything needed to rasterise a scene; a pure function of
/// `(seed, config)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
    pub road_top: usize,
    pub sky_color: [f32; 3],
    pub verge_color: [f32; 3],
    pub road_color: [f32; 3],
    /// Buildings and trees, drawn before any dynamic object.
    pub statics: Vec<PlacedObject>,
    /// Dynamic and small objects in draw order (later occludes earlier).
    pub objects: Vec<PlacedObject>,
    pub texture_noise: f32,
}

impl SceneSpec {
    /// Canonical byte encoding, used for identity checks and digests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.seed.to_le_bytes());
        for v in [self.width, self.height, self.horizon, self.road_top] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for c in [self.sky_color, self.verge_color, self.road_color] {
            c.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        for o in self.statics.iter().chain(&self.objects) {
            b.push(o.class);
            b.push(o.shape as u8);
            b.extend_from_slice(&o.x.to_le_bytes());
            b.extend_from_slice(&o.y.to_le_bytes());
            b.extend_from_slice(&o.w.to_le_bytes());
            b.extend_from_slice(&o.h.to_le_bytes());
            o.color
                .iter()
                .for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        }
        b.extend_from_slice(&self.texture_noise.to_le_bytes());
        b
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    /// The same layout with every dynamic object removed.
    pub fn without_objects(&self) -> SceneSpec {
        SceneSpec {
            objects: Vec::new(),
            ..self.clone()
        }
    }
}

fn jitter(rng: &mut rng::Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    let mut c = base;
    if amount > 0.0 {
        for v in &mut c {
            *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
        }
    }
    c
}

fn scaled(v: f32, scale: f32) -> u32 {
    ((v * scale).round() as u32).max(1)
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig, taxonomy: &Taxonomy) -> Result<SceneSpec> {
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::invalid(
            "generate_scene",
            format!("canvas {}x{} smaller than 16x16", cfg.width, cfg.height),
        ));
    }
    let mut rng = rng::rng_for(seed, &[stream::SCENE]);
    let (w, h) = (cfg.width as i32, cfg.height as i32);
    let s = cfg.height.min(cfg.width) as f32 / 64.0;
    let color =
        |rng: &mut rng::Rng, id: u8| jitter(rng, taxonomy.class(id).day_color, cfg.color_jitter);

    let horizon = (h as f32 * rng.random_range(0.30..0.40)) as usize;
    let road_top = horizon + (h as f32 * rng.random_range(0.10..0.18)) as usize;
    let road_top = road_top.min(cfg.height - 4);
    let sky_color = color(&mut rng, tx::SKY);
    let verge_color = color(&mut rng, tx::VEGETATION);
    let road_color = color(&mut rng, tx::ROAD);

    let mut statics = Vec::new();
    for _ in 0..rng.random_range(2..=4) {
        let bw = scaled(rng.random_range(8.0..20.0), s);
        let top = (horizon as f32 - rng.random_range(2.0..14.0) * s).max(0.0) as i32;
        statics.push(PlacedObject {
            class: tx::BUILDING,
            shape: Primitive::Rect,
            x: rng.random_range(0..w),
            y: top,
            w: bw,
            h: (road_top as i32 - top).max(1) as u32,
            color: color(&mut rng, tx::BUILDING),
        });
    }
    for _ in 0..rng.random_range(1..=3) {
        let r = scaled(rng.random_range(3.0..6.0), s);
        let cy = horizon as i32 + rng.random_range(-4..=2);
        statics.push(PlacedObject {
            class: tx::VEGETATION,
            shape: Primitive::Ellipse,
            x: rng.random_range(0..w),
            y: (cy - r as i32).max(0),
            w: 2 * r,
            h: 2 * r,
            color: color(&mut rng, tx::VEGETATION),
        });
    }

    // Dynamic objects: (class, bottom row) pairs, sorted far to near.
    let mut placed: Vec<(i32, PlacedObject)> = Vec::new();
    let road = road_top as i32;
    for info in taxonomy
        .classes()
        .iter()
        .filter(|c| c.group() == tx::Group::DynamicSmall)
    {
        let count = if cfg.max_per_class == 0 {
            0
        } else if info.long_tailed {
            u32::from(rng.random_bool(cfg.long_tail_prob))
        } else if rng.random_bool(cfg.object_prob) {
            rng.random_range(1..=cfg.max_per_class)
        } else {
            0
        };
        for _ in 0..count {
            let (shape, ow, oh, bottom) = match info.id {
                tx::POLE => (
                    Primitive::Rect,
                    scaled(2.0, s),
                    scaled(rng.random_range(12.0..20.0), s),
                    rng.random_range(road - 1..=road + 6),
                ),
                tx::TRAFFIC_LIGHT => (
                    Primitive::Rect,
                    scaled(3.0, s),
                    scaled(5.0, s),
                    rng.random_range(horizon as i32 - 8..=horizon as i32 + 2),
                ),
                tx::SIGN => (
                    Primitive::Ellipse,
                    scaled(5.0, s),
                    scaled(5.0, s),
                    rng.random_range(horizon as i32 - 2..=road + 2),
                ),
                tx::PERSON => (
                    Primitive::Ellipse,
                    scaled(rng.random_range(3.0..5.0), s),
                    scaled(rng.random_range(7.0..10.0), s),
                    rng.random_range(road + 2..=h - 1),
                ),
                tx::CAR => (
                    Primitive::Rect,
                    scaled(rng.random_range(10.0..16.0), s),
                    scaled(rng.random_range(5.0..8.0), s),
                    rng.random_range(road + 5..=h - 1),
                ),
                _ => (
                    Primitive::Rect,
                    scaled(rng.random_range(20.0..28.0), s),
                    scaled(rng.random_range(10.0..13.0), s),
                    rng.random_range(road + 8..=h - 1),
                ),
            };
            let x = rng.random_range(0..(w - ow as i32 / 2).max(1));
            let y = (bottom - oh as i32 + 1).clamp(0, h - 1);
            let color = color(&mut rng, info.id);
            placed.push((
                bottom,
                PlacedObject {
                    class: info.id,
                    shape,
                    x,
                    y,
                    w: ow,
                    h: oh,
                    color,
                },
            ));
        }
    }
    placed.sort_by_key(|(bottom, _)| *bottom);

    Ok(SceneSpec {
        seed,
        width: cfg.width,
        height: cfg.height,
        horizon,
        road_top,
        sky_color,
        verge_color,
        road_color,
        statics,
        objects: placed.into_iter().map(|(_, o)| o).collect(),
        texture_noise: cfg.texture_noise,
    })
}

/// Source of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    SourceDay,
    TargetDay,
    TargetNight,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[H, W]` class ids or 255.
    pub label: LabelMap,
    pub domain: Domain,
}

/// Rasterises `spec` with per-object offsets; returns a daylight image and
/// the exact label map.
fn rasterize(spec: &SceneSpec, offsets: &[(i32, i32)]) -> (Tensor<f32>, LabelMap) {
    let (w, h) = (spec.width, spec.height);
    let mut label = vec![0u8; w * h];
    let mut rgb = vec![[0f32; 3]; w * h];
    for y in 0..h {
        let (class, color) = if y < spec.horizon {
            (tx::SKY, spec.sky_color)
        } else if y < spec.road_top {
            (tx::VEGETATION, spec.verge_color)
        } else {
            (tx::ROAD, spec.road_color)
        };
        for x in 0..w {
            label[y * w + x] = class;
            rgb[y * w + x] = color;
        }
    }
    let zero = (0, 0);
    let layers = spec
        .statics
        .iter()
        .map(|o| (o, zero))
        .chain(spec.objects.iter().zip(offsets.iter().copied()));
    for (obj, (dx, dy)) in layers {
        let x0 = (obj.x + dx).max(0) as usize;
        let y0 = (obj.y + dy).max(0) as usize;
        let x1 = ((obj.x + dx + obj.w as i32).max(0) as usize).min(w);
        let y1 = ((obj.y + dy + obj.h as i32).max(0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                if obj.covers(x as i32, y as i32, dx, dy) {
                    label[y * w + x] = obj.class;
                    rgb[y * w + x] = obj.color;
                }
            }
        }
    }
    let mut noise = rng::rng_for(spec.seed, &[stream::TEXTURE]);
    let mut image = vec![0f32; 3 * w * h];
    for (p, c) in rgb.iter().enumerate() {
        for ch in 0..3 {
            let n = if spec.texture_noise > 0.0 {
                noise.random_range(-spec.texture_noise..=spec.texture_noise)
            } else {
                0.0
            };
            image[ch * w * h + p] = (c[ch] + n).clamp(0.0, 1.0);
        }
    }
    (
        Tensor::new(vec![3, h, w], image).expect("image shape"),
        Tensor::new(vec![h, w], label).expect("label shape"),
    )
}

pub fn render_day(spec: &SceneSpec) -> DomainSample {
    let offsets = vec![(0, 0); spec.objects.len()];
    let (image, label) = rasterize(spec, &offsets);
    DomainSample {
        image,
        label,
        domain: Domain::SourceDay,
    }
}

/// Night rendering parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NightConfig {
    /// Max per-axis displacement of dynamic objects, in pixels.
    pub misalign_px: i32,
    pub gamma: f32,
    pub channel_scale: [f32; 3],
    pub noise_sigma: f32,
    pub max_glows: u32,
}

impl Default for NightConfig {
    fn default() -> Self {
        NightConfig {
            misalign_px: 6,
            gamma: 2.2,
            channel_scale: [0.5, 0.55, 0.8],
            noise_sigma: 0.03,
            max_glows: 3,
        }
    }
}

impl NightConfig {
    /// No displacement and an identity photometric transform.
    pub fn identity() -> Self {
        NightConfig {
            misalign_px: 0,
            gamma: 1.0,
            channel_scale: [1.0; 3],
            noise_sigma: 0.0,
            max_glows: 0,
        }
    }
}

/// Displacements applied to each dynamic object for a night rendering,
/// after clamping positions to the canvas.
pub fn night_offsets(spec: &SceneSpec, misalign_seed: u64, cfg: &NightConfig) -> Vec<(i32, i32)> {
    let mut rng = rng::rng_for(misalign_seed, &[stream::MISALIGN]);
    let m = cfg.misalign_px.max(0);
    let (w, h) = (spec.width as i32, spec.height as i32);
    spec.objects
        .iter()
        .map(|o| {
            let dx = rng.random_range(-m..=m);
            let dy = rng.random_range(-m..=m);
            let nx = (o.x + dx).clamp(0, w - 1);
            let ny = (o.y + dy).clamp(0, h - 1);
            (nx - o.x, ny - o.y)
        })
        .collect()
}

pub fn render_night(spec: &SceneSpec, misalign_seed: u64, cfg: &NightConfig) -> DomainSample {
    let offsets = night_offsets(spec, misalign_seed, cfg);
    let (mut image, label) = rasterize(spec, &offsets);
    apply_night(&mut image, misalign_seed, cfg);
    DomainSample {
        image,
        label,
        domain: Domain::TargetNight,
    }
}

/// Gamma darkening, channel scaling, light glows and sensor noise, in that
/// order, clamped to `[0, 1]`.
fn apply_night(image: &mut Tensor<f32>, seed: u64, cfg: &NightConfig) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let px = h * w;
    let mut rng = rng::rng_for(seed, &[stream::NIGHT]);
    let data = image.data_mut();
    for ch in 0..3 {
        let k = cfg.channel_scale[ch];
        for v in &mut data[ch * px..(ch + 1) * px] {
            *v = v.powf(cfg.gamma) * k;
        }
    }
    let glows = if cfg.max_glows > 0 {
        rng.random_range(0..=cfg.max_glows)
    } else {
        0
    };
    let warm = [1.0f32, 0.85, 0.6];
    for _ in 0..glows {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let r = rng.random_range(3.0f32..8.0);
        let strength = rng.random_range(0.25f32..0.5);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2)).sqrt();
                if d < r {
                    let f = strength * (1.0 - d / r).powi(2);
                    for ch in 0..3 {
                        data[ch * px + y * w + x] += f * warm[ch];
                    }
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma > 0");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}
