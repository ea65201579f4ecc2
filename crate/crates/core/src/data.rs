//! Synthetic multiclass scenes and the federated split of them.
//!
//! Each foreground class is one rotated ellipse with its own mean intensity
//! and internal shading, on a slowly varying background. The image is
//! blurred and noised so the boundary cues of the annotation simulator vary
//! along every contour; the label is the exact pre-blur rasterization.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annsim::{deform_multiclass, DifficultyParams};
use crate::error::{Error, Result};
use crate::field::{gaussian_smooth, LabelMask, ScalarField};

pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Gaussian half-width of an echo line, pixels.
const GHOST_WIDTH: f64 = 0.7;

/// RNG streams are keyed by purpose so independent consumers never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Corruption = 2,
    Init = 3,
    Shuffle = 4,
    Perturb = 5,
}

/// Deterministic generator for `(seed, purpose, index)`.
pub fn rng_for(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Including background.
    pub classes: u8,
    /// Semi-axis range `(min, max)` in pixels, one entry per foreground class.
    pub axis_range: Vec<(f64, f64)>,
    /// Mean intensity per class, background first.
    pub intensity: Vec<f64>,
    /// Peak-to-peak linear shading across each object.
    pub shading: f64,
    /// Amplitude of the smooth background illumination.
    pub background_variation: f64,
    /// Distance in pixels between each contour and its faint echo line.
    pub ghost_offset: f64,
    /// Peak contrast of the echo line. An angular modulation decides, along
    /// the contour, whether the echo sits inside the object (shaded toward
    /// background) or outside it (shaded toward the object), and how strong
    /// it is.
    pub ghost_contrast: f64,
    /// Standard deviation of a spatially correlated texture added before blurring.
    pub texture: f64,
    /// Correlation length (Gaussian sigma, pixels) of that texture.
    pub texture_scale: f64,
    pub noise_std: f64,
    /// Boundary blur sigma range; `(0, 0)` disables blurring.
    pub blur_range: (f64, f64),
    /// Minimum clearance between objects and to the frame, in pixels.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 3,
            axis_range: vec![(9.0, 17.0), (7.0, 13.0)],
            intensity: vec![0.15, 0.5, 0.85],
            shading: 0.25,
            background_variation: 0.1,
            ghost_offset: 3.0,
            ghost_contrast: 0.15,
            texture: 0.05,
            texture_scale: 1.5,
            noise_std: 0.03,
            blur_range: (0.5, 1.2),
            gap: 3.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("scene needs at least two classes"));
        }
        if self.axis_range.len() != self.classes as usize - 1 {
            return Err(Error::Config("axis_range needs one entry per foreground class"));
        }
        if self.intensity.len() != self.classes as usize {
            return Err(Error::Config("intensity needs one entry per class"));
        }
        if self.axis_range.iter().any(|&(lo, hi)| lo < 3.0 || hi < lo) {
            return Err(Error::Config("ellipse semi-axes must be at least 3 pixels"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene must be at least 8x8"));
        }
        if self.noise_std < 0.0 || self.blur_range.0 < 0.0 || self.blur_range.1 < self.blur_range.0 || self.gap < 0.0 {
            return Err(Error::Config("noise, blur and gap must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
}

impl Ellipse {
    /// Implicit value: `< 1` inside, `1` on the contour.
    fn level(&self, r: f64, c: f64) -> f64 {
        let (s, co) = (Float::sin(self.angle), Float::cos(self.angle));
        let (dr, dc) = (r - self.center.0, c - self.center.1);
        let u = co * dc + s * dr;
        let v = -s * dc + co * dr;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2)
    }

    pub fn contains(&self, r: f64, c: f64) -> bool {
        self.level(r, c) <= 1.0
    }

    /// Half extents of the axis-aligned bounding box `(rows, cols)`.
    fn half_extent(&self) -> (f64, f64) {
        let (s, co) = (Float::sin(self.angle), Float::cos(self.angle));
        let (a, b) = self.axes;
        (Float::sqrt(a * a * s * s + b * b * co * co), Float::sqrt(a * a * co * co + b * b * s * s))
    }

    /// Approximate signed distance to the contour in pixels (negative inside).
    fn approx_distance(&self, r: f64, c: f64) -> f64 {
        let level = Float::sqrt(self.level(r, c));
        (level - 1.0) * self.axes.0.min(self.axes.1)
    }

    /// Polar angle of a point around the ellipse center.
    fn angle_of(&self, r: f64, c: f64) -> f64 {
        Float::atan2(r - self.center.0, c - self.center.1)
    }

    fn grown(&self, by: f64) -> Self {
        Self { axes: (self.axes.0 + by, self.axes.1 + by), ..*self }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: ScalarField,
    pub label: LabelMask,
    pub ellipses: Vec<Ellipse>,
}

fn place_ellipses(config: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Ellipse>> {
    let (h, w) = (config.height as f64, config.width as f64);
    'attempt: for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut placed: Vec<Ellipse> = Vec::new();
        for &(lo, hi) in &config.axis_range {
            let a = rng.random_range(lo..=hi);
            let b = rng.random_range(lo..=hi);
            let angle = rng.random_range(0.0..core::f64::consts::PI);
            let mut e = Ellipse { center: (0.0, 0.0), axes: (a, b), angle };
            let (er, ec) = e.half_extent();
            let (min_r, max_r) = (er + config.gap, h - 1.0 - er - config.gap);
            let (min_c, max_c) = (ec + config.gap, w - 1.0 - ec - config.gap);
            if min_r > max_r || min_c > max_c {
                continue 'attempt;
            }
            e.center = (rng.random_range(min_r..=max_r), rng.random_range(min_c..=max_c));
            let grown = e.grown(config.gap / 2.0);
            for other in &placed {
                let og = other.grown(config.gap / 2.0);
                let (oer, oec) = og.half_extent();
                let r0 = (og.center.0 - oer).floor().max(0.0) as usize;
                let r1 = ((og.center.0 + oer).ceil() as usize).min(config.height - 1);
                let c0 = (og.center.1 - oec).floor().max(0.0) as usize;
                let c1 = ((og.center.1 + oec).ceil() as usize).min(config.width - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if og.contains(r as f64, c as f64) && grown.contains(r as f64, c as f64) {
                            continue 'attempt;
                        }
                    }
                }
            }
            placed.push(e);
        }
        return Ok(placed);
    }
    Err(Error::Placement { attempts: MAX_PLACEMENT_ATTEMPTS })
}

/// Renders one scene. Deterministic in `(config, sample_seed)`.
pub fn generate_scene(config: &SceneConfig, sample_seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng_for(config.seed, Stream::Scene, sample_seed);
    let ellipses = place_ellipses(config, &mut rng)?;
    let (h, w) = (config.height, config.width);

    let mut label = LabelMask::filled(h, w, config.classes, 0);
    for (i, e) in ellipses.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                if e.contains(r as f64, c as f64) {
                    label.set(r, c, (i + 1) as u8);
                }
            }
        }
    }

    // per object: shading direction and the angular modulation of its echo
    struct Look {
        shade: (f64, f64),
        harmonics: [(f64, f64); 3],
    }
    let looks: Vec<Look> = ellipses
        .iter()
        .map(|_| {
            let t = rng.random_range(0.0..core::f64::consts::TAU);
            let mut harmonics = [(0.0, 0.0); 3];
            for h in &mut harmonics {
                *h = (rng.random_range(-1.0..1.0), rng.random_range(0.0..core::f64::consts::TAU));
            }
            Look { shade: (Float::sin(t), Float::cos(t)), harmonics }
        })
        .collect();
    let modulation = |look: &Look, theta: f64| -> f64 {
        let m: f64 = look.harmonics.iter().enumerate().map(|(k, &(a, p))| a * Float::cos((k + 1) as f64 * theta + p)).sum();
        (2.0 * m).clamp(-1.0, 1.0)
    };
    let (fr, fc, phase) = (
        rng.random_range(0.04..0.12),
        rng.random_range(0.04..0.12),
        rng.random_range(0.0..core::f64::consts::TAU),
    );
    let background = |r: f64, c: f64| {
        config.intensity[0] + config.background_variation * Float::sin(fr * r + fc * c + phase)
    };
    let object = |i: usize, r: f64, c: f64| {
        let e = &ellipses[i];
        let (sr, sc) = looks[i].shade;
        let extent = e.axes.0.max(e.axes.1);
        let t = ((r - e.center.0) * sr + (c - e.center.1) * sc) / extent;
        config.intensity[i + 1] + 0.5 * config.shading * t
    };
    let mut image = ScalarField::from_fn(h, w, |r, c| {
        let (rf, cf) = (r as f64, c as f64);
        let class = label.get(r, c) as usize;
        let mut value = if class == 0 { background(rf, cf) } else { object(class - 1, rf, cf) };
        if config.ghost_contrast > 0.0 {
            for (i, e) in ellipses.iter().enumerate() {
                let d = e.approx_distance(rf, cf);
                if (d.abs() - config.ghost_offset).abs() > 3.0 * GHOST_WIDTH {
                    continue;
                }
                let m = modulation(&looks[i], e.angle_of(rf, cf));
                let at = if m > 0.0 { -config.ghost_offset } else { config.ghost_offset };
                let profile = Float::exp(-(d - at) * (d - at) / (2.0 * GHOST_WIDTH * GHOST_WIDTH));
                let toward = object(i, rf, cf) - background(rf, cf);
                let sign = if (m > 0.0) == (toward > 0.0) { -1.0 } else { 1.0 };
                value += sign * config.ghost_contrast * m.abs() * profile;
            }
        }
        value
    });

    if config.texture > 0.0 {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let white = ScalarField::from_fn(h, w, |_, _| unit.sample(&mut rng));
        let smooth = if config.texture_scale > 0.0 { gaussian_smooth(&white, config.texture_scale)? } else { white };
        let n = smooth.values().len() as f64;
        let mean = smooth.sum() / n;
        let std = Float::sqrt(smooth.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n);
        let gain = if std > 0.0 { config.texture / std } else { 0.0 };
        for (v, t) in image.values_mut().iter_mut().zip(smooth.values()) {
            *v += gain * (t - mean);
        }
    }

    let blur = if config.blur_range.1 > 0.0 {
        rng.random_range(config.blur_range.0..=config.blur_range.1)
    } else {
        0.0
    };
    if blur > 0.0 {
        image = gaussian_smooth(&image, blur)?;
    }
    if config.noise_std > 0.0 {
        let normal = Normal::new(0.0, config.noise_std).map_err(|_| Error::Config("bad noise std"))?;
        for v in image.values_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Scene { image, label, ellipses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationLayout {
    pub client_sizes: Vec<usize>,
    pub corruption_ratios: Vec<f64>,
    pub test_size: usize,
    pub corruption: DifficultyParams,
}

impl Default for FederationLayout {
    fn default() -> Self {
        Self {
            client_sizes: vec![100, 150, 200, 50],
            corruption_ratios: vec![0.2, 0.5, 0.8, 0.0],
            test_size: 50,
            corruption: DifficultyParams::desk_scale(),
        }
    }
}

impl FederationLayout {
    pub fn validate(&self) -> Result<()> {
        if self.client_sizes.is_empty() || self.client_sizes.len() != self.corruption_ratios.len() {
            return Err(Error::Config("need one corruption ratio per client"));
        }
        if self.client_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("every client needs at least one sample"));
        }
        if self.corruption_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("corruption ratios must lie in [0, 1]"));
        }
        if self.test_size == 0 {
            return Err(Error::Config("test set must not be empty"));
        }
        self.corruption.validate()
    }

    pub fn corrupted_count(&self, client: usize) -> usize {
        let n = self.client_sizes[client];
        (((self.corruption_ratios[client] * n as f64) + 0.5) as usize).min(n)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: ScalarField,
    pub label: LabelMask,
}

/// Ground truth about injected noise. Only metrics and reports read it.
#[derive(Debug, Clone, Default)]
pub struct CorruptionAudit {
    pub corrupted: Vec<bool>,
    pub clean_labels: Vec<LabelMask>,
}

impl CorruptionAudit {
    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub audit: CorruptionAudit,
}

#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientData>,
    pub test: Vec<Sample>,
}

impl Federation {
    pub fn total_train(&self) -> usize {
        self.clients.iter().map(|c| c.samples.len()).sum()
    }
}

/// Generates disjoint client and test sets and corrupts a seeded subset of
/// each client's labels. Test labels stay clean.
pub fn build_federation(scene: &SceneConfig, layout: &FederationLayout, seed: u64) -> Result<Federation> {
    scene.validate()?;
    layout.validate()?;
    let scene = SceneConfig { seed, ..scene.clone() };
    let mut next_id = 0u64;
    let mut take = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                let s = generate_scene(&scene, id)?;
                Ok(Sample { id, image: s.image, label: s.label })
            })
            .collect()
    };

    let test = take(layout.test_size)?;
    let mut clients = Vec::with_capacity(layout.client_sizes.len());
    for (client_id, &n) in layout.client_sizes.iter().enumerate() {
        let mut samples = take(n)?;
        let clean_labels: Vec<LabelMask> = samples.iter().map(|s| s.label.clone()).collect();
        let mut corrupted = vec![false; n];
        let k = layout.corrupted_count(client_id);
        let mut rng = rng_for(seed, Stream::Corruption, client_id as u64);
        let mut picked = index::sample(&mut rng, n, k).into_vec();
        picked.sort_unstable();
        for i in picked {
            let s = &mut samples[i];
            let present: Vec<u8> = (1..s.label.classes()).filter(|&c| s.label.contains(c)).collect();
            s.label = deform_multiclass(&s.image, &s.label, &layout.corruption, &present)?;
            corrupted[i] = true;
        }
        clients.push(ClientData { client_id, samples, audit: CorruptionAudit { corrupted, clean_labels } });
    }
    Ok(Federation { clients, test })
}

/// Mean over foreground classes of the IoU between two labels. Classes
/// absent from both count as a perfect match.
pub fn foreground_iou(a: &LabelMask, b: &LabelMask) -> f64 {
    let classes = a.classes();
    let mut total = 0.0;
    for c in 1..classes {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&x, &y) in a.values().iter().zip(b.values()) {
            let (p, q) = (x == c, y == c);
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    total / (classes - 1) as f64
}
