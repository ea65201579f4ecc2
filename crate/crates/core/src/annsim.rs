//! Difficulty-guided simulation of human-like boundary annotation errors.
//!
//! For each foreground class the clean mask is turned into a signed distance
//! field, three boundary cues (weak edges, blur, curvature) are averaged into
//! a difficulty map on a narrow band around the contour, and the SDF is
//! displaced by a smoothed amplitude/direction field before re-thresholding.

use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::field::{
    boundary_band, curvature, gaussian_smooth, gradient_magnitude, laplacian_magnitude, signed_distance, BinaryMask,
    LabelMask, ScalarField, GRADIENT_FLOOR,
};

pub const DEFAULT_BAND_COEFF: f64 = 0.2;

/// Knobs of the deformation model. `a_max` and the smoothing sigma both
/// follow the band width `w` of the class being deformed.
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyParams {
    /// Exponent applied to the difficulty before scaling to an amplitude.
    pub rho: f64,
    /// Amplitude floor on the band, in pixels.
    pub a_min: f64,
    /// `a_max = amax_scale * w`.
    pub amax_scale: f64,
    /// Normal sampling offset in pixels; `None` means `max(1, w / 4)`.
    pub delta: Option<f64>,
    pub epsilon: f64,
    /// `w = band_coeff * sqrt(area / pi)`.
    pub band_coeff: f64,
    /// Gaussian pre-smoothing of the SDF before the curvature cue.
    pub curvature_smoothing: f64,
}

impl Default for DifficultyParams {
    fn default() -> Self {
        Self {
            rho: 2.0,
            a_min: 0.0,
            amax_scale: 1.0,
            delta: None,
            epsilon: 1e-6,
            band_coeff: DEFAULT_BAND_COEFF,
            curvature_smoothing: 2.0,
        }
    }
}

impl DifficultyParams {
    /// Amplitude and sampling offset raised so that deformations survive the
    /// pixel grid on 64x64 scenes, where `w` is only about two pixels.
    pub fn desk_scale() -> Self {
        Self { amax_scale: 40.0, delta: Some(3.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.a_min >= 0.0
            && self.amax_scale >= 0.0
            && self.delta.map_or(true, |d| d > 0.0)
            && self.epsilon > 0.0
            && self.band_coeff > 0.0
            && self.curvature_smoothing >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("difficulty parameters out of range"))
        }
    }

    pub fn a_max(&self, width: f64) -> f64 {
        self.amax_scale * width
    }

    pub fn sigma(&self, width: f64) -> f64 {
        width
    }

    pub fn delta_for(&self, width: f64) -> f64 {
        self.delta.unwrap_or_else(|| (width / 4.0).max(1.0))
    }
}

/// Per-class combined difficulty on the boundary band.
#[derive(Debug, Clone)]
pub struct DifficultyMap {
    pub class_id: u8,
    pub difficulty: ScalarField,
    pub band: BinaryMask,
    pub width: f64,
    pub eq_radius: f64,
    pub phi: ScalarField,
    pub edge: ScalarField,
    pub blur: ScalarField,
    pub curve: ScalarField,
}

#[derive(Debug, Clone)]
pub struct DeformationRecord {
    pub amplitude: ScalarField,
    pub direction: ScalarField,
    pub phi_before: ScalarField,
    pub phi_after: ScalarField,
    pub width: f64,
    pub sigma: f64,
    pub changed_pixels: usize,
}

fn equivalent_radius(mask: &BinaryMask) -> Result<f64> {
    if mask.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    Ok(Float::sqrt(mask.count() as f64 / core::f64::consts::PI))
}

/// `w = 0.2 * sqrt(area / pi)`.
pub fn band_width(mask: &BinaryMask) -> Result<f64> {
    band_width_with(mask, DEFAULT_BAND_COEFF)
}

pub fn band_width_with(mask: &BinaryMask, coeff: f64) -> Result<f64> {
    Ok(coeff * equivalent_radius(mask)?)
}

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape("image and band differ in shape"))
    }
}

pub fn edge_cue(image: &ScalarField, band: &BinaryMask) -> Result<ScalarField> {
    check_shape(image.shape(), band.shape())?;
    gradient_magnitude(image).map(|g| 1.0 - g).masked(band)
}

pub fn blur_cue(image: &ScalarField, band: &BinaryMask) -> Result<ScalarField> {
    check_shape(image.shape(), band.shape())?;
    laplacian_magnitude(image).map(|l| 1.0 - l).masked(band)
}

/// `|kappa| * B`, with `kappa` normalized by the equivalent radius.
pub fn curvature_cue(phi: &ScalarField, band: &BinaryMask, eq_radius: f64) -> Result<ScalarField> {
    curvature_cue_smoothed(phi, band, eq_radius, 0.0)
}

fn curvature_cue_smoothed(phi: &ScalarField, band: &BinaryMask, eq_radius: f64, smoothing: f64) -> Result<ScalarField> {
    check_shape(phi.shape(), band.shape())?;
    let kappa = if smoothing > 0.0 {
        curvature(&gaussian_smooth(phi, smoothing)?, eq_radius)
    } else {
        curvature(phi, eq_radius)
    };
    kappa.masked(band)
}

pub fn difficulty_map(
    image: &ScalarField,
    mask: &BinaryMask,
    class_id: u8,
    params: &DifficultyParams,
) -> Result<DifficultyMap> {
    check_shape(image.shape(), mask.shape())?;
    let eq_radius = equivalent_radius(mask)?;
    let width = params.band_coeff * eq_radius;
    let phi = signed_distance(mask)?;
    let band = boundary_band(&phi, width);
    let edge = edge_cue(image, &band)?;
    let blur = blur_cue(image, &band)?;
    let curve = curvature_cue_smoothed(&phi, &band, eq_radius, params.curvature_smoothing)?;
    let difficulty = ScalarField::from_fn(image.height(), image.width(), |r, c| {
        (edge.get(r, c) + blur.get(r, c) + curve.get(r, c)) / 3.0
    });
    Ok(DifficultyMap { class_id, difficulty, band, width, eq_radius, phi, edge, blur, curve })
}

/// `A = (a_min + (a_max - a_min) * D^rho) * B`.
pub fn amplitude(map: &DifficultyMap, params: &DifficultyParams) -> ScalarField {
    let a_max = params.a_max(map.width);
    let a_min = params.a_min;
    ScalarField::from_fn(map.difficulty.height(), map.difficulty.width(), |r, c| {
        if map.band.get(r, c) {
            a_min + (a_max - a_min) * map.difficulty.get(r, c).powf(params.rho)
        } else {
            0.0
        }
    })
}

/// Signed displacement direction in `[-1, 1]`: positive when the inner
/// edge evidence dominates (shrink), negative when the outer one does.
pub fn direction(
    image: &ScalarField,
    phi: &ScalarField,
    band: &BinaryMask,
    delta: f64,
    epsilon: f64,
) -> Result<ScalarField> {
    check_shape(image.shape(), phi.shape())?;
    check_shape(image.shape(), band.shape())?;
    let g = gradient_magnitude(image);
    let (dr, dc) = phi.central_gradient();
    Ok(ScalarField::from_fn(image.height(), image.width(), |r, c| {
        if !band.get(r, c) {
            return 0.0;
        }
        let (gr, gc) = (dr.get(r, c), dc.get(r, c));
        let norm = Float::sqrt(gr * gr + gc * gc);
        if norm < GRADIENT_FLOOR {
            return 0.0;
        }
        let (nr, nc) = (gr / norm, gc / norm);
        let (rf, cf) = (r as f64, c as f64);
        let g_out = g.sample_bilinear(rf + delta * nr, cf + delta * nc);
        let g_in = g.sample_bilinear(rf - delta * nr, cf - delta * nc);
        direction_value(g_in, g_out, epsilon)
    }))
}

/// `clip((g_in - g_out) / (g_in + g_out + eps), -1, 1)`.
pub fn direction_value(g_in: f64, g_out: f64, epsilon: f64) -> f64 {
    ((g_in - g_out) / (g_in + g_out + epsilon)).clamp(-1.0, 1.0)
}

/// `phi + G_sigma * (A b)`. Positive `b` raises `phi`, shrinking the object.
pub fn apply_displacement(
    phi: &ScalarField,
    amplitude: &ScalarField,
    direction: &ScalarField,
    sigma: f64,
) -> Result<ScalarField> {
    let push = amplitude.zip_map(direction, |a, b| a * b)?;
    let smoothed = gaussian_smooth(&push, sigma)?;
    phi.zip_map(&smoothed, |p, d| p + d)
}

pub fn threshold(phi: &ScalarField) -> BinaryMask {
    BinaryMask::from_fn(phi.height(), phi.width(), |r, c| phi.get(r, c) <= 0.0)
}

fn deform_with_map(
    image: &ScalarField,
    map: &DifficultyMap,
    params: &DifficultyParams,
) -> Result<DeformationRecord> {
    let amp = amplitude(map, params);
    let dir = direction(image, &map.phi, &map.band, params.delta_for(map.width), params.epsilon)?;
    let sigma = params.sigma(map.width);
    let phi_after = apply_displacement(&map.phi, &amp, &dir, sigma)?;
    let changed_pixels =
        map.phi.values().iter().zip(phi_after.values()).filter(|(a, b)| (**a <= 0.0) != (**b <= 0.0)).count();
    Ok(DeformationRecord {
        amplitude: amp,
        direction: dir,
        phi_before: map.phi.clone(),
        phi_after,
        width: map.width,
        sigma,
        changed_pixels,
    })
}

/// Deforms one binary object mask. Returns the noisy mask and the fields
/// that produced it.
pub fn deform_class(
    image: &ScalarField,
    mask: &BinaryMask,
    params: &DifficultyParams,
) -> Result<(BinaryMask, DeformationRecord)> {
    params.validate()?;
    let map = difficulty_map(image, mask, 1, params)?;
    let record = deform_with_map(image, &map, params)?;
    Ok((threshold(&record.phi_after), record))
}

/// Per-class outcome of a multiclass deformation.
#[derive(Debug, Clone)]
pub struct ClassDeformation {
    pub class_id: u8,
    pub deformed: bool,
    pub width: f64,
    pub sigma: f64,
    pub phi_before: ScalarField,
    pub phi_after: ScalarField,
}

/// Deforms every foreground class in `class_subset` with its own difficulty
/// map and re-assigns pixels by the smallest non-positive displaced SDF.
/// Background (class 0) is never deformed directly.
pub fn deform_multiclass(
    image: &ScalarField,
    label: &LabelMask,
    params: &DifficultyParams,
    class_subset: &[u8],
) -> Result<LabelMask> {
    deform_multiclass_detailed(image, label, params, class_subset).map(|(l, _)| l)
}

/// Each pixel goes to the foreground class with the smallest non-positive
/// SDF value (lowest id on ties), or to background if none is non-positive.
pub fn assign_by_min_sdf(phis: &[(u8, &ScalarField)], shape: (usize, usize), classes: u8) -> LabelMask {
    let (h, w) = shape;
    let mut out = LabelMask::filled(h, w, classes, 0);
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(f64, u8)> = None;
            for &(id, phi) in phis {
                let v = phi.get(r, c);
                // strict comparison keeps the lowest class id on ties
                if v <= 0.0 && best.map_or(true, |(b, _)| v < b) {
                    best = Some((v, id));
                }
            }
            if let Some((_, class)) = best {
                out.set(r, c, class);
            }
        }
    }
    out
}

pub fn deform_multiclass_detailed(
    image: &ScalarField,
    label: &LabelMask,
    params: &DifficultyParams,
    class_subset: &[u8],
) -> Result<(LabelMask, Vec<ClassDeformation>)> {
    params.validate()?;
    if image.shape() != label.shape() {
        return Err(Error::Shape("image and label differ in shape"));
    }
    for &c in class_subset {
        if c >= label.classes() || !label.contains(c) {
            return Err(Error::MissingClass(c));
        }
    }

    let mut classes = Vec::new();
    for c in 1..label.classes() {
        if !label.contains(c) {
            continue;
        }
        let mask = label.class_mask(c);
        if class_subset.contains(&c) {
            let map = difficulty_map(image, &mask, c, params)?;
            let record = deform_with_map(image, &map, params)?;
            classes.push(ClassDeformation {
                class_id: c,
                deformed: true,
                width: record.width,
                sigma: record.sigma,
                phi_before: record.phi_before,
                phi_after: record.phi_after,
            });
        } else {
            let phi = signed_distance(&mask)?;
            let width = band_width_with(&mask, params.band_coeff)?;
            classes.push(ClassDeformation {
                class_id: c,
                deformed: false,
                width,
                sigma: params.sigma(width),
                phi_after: phi.clone(),
                phi_before: phi,
            });
        }
    }

    let phis: Vec<(u8, &ScalarField)> = classes.iter().map(|cd| (cd.class_id, &cd.phi_after)).collect();
    let out = assign_by_min_sdf(&phis, label.shape(), label.classes());
    Ok((out, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn disk_mask(size: usize, cr: f64, cc: f64, radius: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |r, c| {
            let (a, b) = (r as f64 - cr, c as f64 - cc);
            a * a + b * b <= radius * radius
        })
    }

    fn shaded_image(mask: &BinaryMask) -> ScalarField {
        // bright object with an internal ramp so edge evidence is asymmetric
        ScalarField::from_fn(mask.height(), mask.width(), |r, c| {
            if mask.get(r, c) {
                0.6 + 0.01 * c as f64
            } else {
                0.1
            }
        })
    }

    #[test]
    fn band_width_values() {
        let sq = BinaryMask::from_fn(40, 40, |r, c| (10..30).contains(&r) && (10..30).contains(&c));
        let w = band_width(&sq).unwrap();
        assert!((w - 0.2 * Float::sqrt(400.0 / core::f64::consts::PI)).abs() < 1e-12);
        assert!((w - 2.2568).abs() < 1e-3);

        let d = disk_mask(128, 63.5, 63.5, 50.0);
        let w = band_width(&d).unwrap();
        let expected = 0.2 * Float::sqrt(d.count() as f64 / core::f64::consts::PI);
        assert!((w - expected).abs() < 1e-12);
        assert!((w - 9.99).abs() < 0.05, "w = {w}, area = {}", d.count());

        // three pixels: equivalent radius ~ 1
        let tiny = BinaryMask::from_fn(5, 5, |r, c| r == 2 && (1..4).contains(&c));
        assert!((band_width(&tiny).unwrap() - 0.2).abs() < 0.01);

        assert_eq!(band_width(&BinaryMask::from_fn(4, 4, |_, _| false)), Err(Error::DegenerateMask));
    }

    #[test]
    fn cue_edge_cases() {
        let band = BinaryMask::from_fn(8, 8, |r, _| r >= 3 && r <= 4);
        let flat = ScalarField::filled(8, 8, 0.4);
        let e = edge_cue(&flat, &band).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(e.get(r, c), if band.get(r, c) { 1.0 } else { 0.0 });
            }
        }
        let empty = BinaryMask::from_fn(8, 8, |_, _| false);
        let img = ScalarField::from_fn(8, 8, |r, c| (r * c) as f64);
        assert!(edge_cue(&img, &empty).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(blur_cue(&img, &empty).unwrap().values().iter().all(|&v| v == 0.0));
        assert!(curvature_cue(&img, &empty, 3.0).unwrap().values().iter().all(|&v| v == 0.0));

        // edge cue vanishes where the gradient is the global maximum
        let step = ScalarField::from_fn(8, 8, |_, c| if c >= 4 { 1.0 } else { 0.0 });
        let all = BinaryMask::from_fn(8, 8, |_, _| true);
        assert_eq!(edge_cue(&step, &all).unwrap().get(2, 4), 0.0);

        let ramp = ScalarField::from_fn(8, 8, |_, c| 0.3 * c as f64);
        let b = blur_cue(&ramp, &band).unwrap();
        for r in 3..=4 {
            for c in 1..7 {
                assert_eq!(b.get(r, c), 1.0);
            }
        }
        let imp = ScalarField::from_fn(8, 8, |r, c| if r == 3 && c == 3 { 1.0 } else { 0.0 });
        assert_eq!(blur_cue(&imp, &band).unwrap().get(3, 3), 0.0);
    }

    #[test]
    fn curvature_cue_shapes() {
        let half = BinaryMask::from_fn(40, 40, |_, c| c < 20);
        let phi = signed_distance(&half).unwrap();
        let band = boundary_band(&phi, 2.0);
        let k = curvature_cue_smoothed(&phi, &band, 10.0, 2.0).unwrap();
        assert!(k.values().iter().all(|&v| v < 0.05));
        let k = curvature_cue(&phi, &band, 10.0).unwrap();
        assert!(k.values().iter().all(|&v| v < 0.05));

        for radius in [8.0, 12.0, 18.0] {
            let d = disk_mask(64, 31.5, 31.5, radius);
            let phi = signed_distance(&d).unwrap();
            let eq = equivalent_radius(&d).unwrap();
            let band = boundary_band(&phi, 0.2 * eq);
            let k = curvature_cue_smoothed(&phi, &band, eq, 2.0).unwrap();
            let n = band.count() as f64;
            let mean = k.values().iter().sum::<f64>() / n;
            assert!((mean - 1.0).abs() < 0.3, "radius {radius}: mean cue {mean}");
        }
    }

    #[test]
    fn difficulty_is_cue_mean_on_band() {
        let d = disk_mask(48, 23.5, 23.5, 12.0);
        let img = shaded_image(&d);
        let map = difficulty_map(&img, &d, 1, &DifficultyParams::default()).unwrap();
        for i in 0..img.values().len() {
            let expected = (map.edge.values()[i] + map.blur.values()[i] + map.curve.values()[i]) / 3.0;
            assert_eq!(map.difficulty.values()[i], expected);
            let v = map.difficulty.values()[i];
            assert!((0.0..=1.0).contains(&v));
            if !map.band.values()[i] {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!((1.0 + 1.0 + 0.0) / 3.0, 2.0 / 3.0);
    }

    #[test]
    fn amplitude_formula() {
        let band = BinaryMask::new(1, 3, vec![true, true, false]).unwrap();
        let map = DifficultyMap {
            class_id: 1,
            difficulty: ScalarField::from_vec(1, 3, vec![1.0, 0.5, 0.7]).unwrap(),
            band: band.clone(),
            width: 10.0,
            eq_radius: 50.0,
            phi: ScalarField::zeros(1, 3),
            edge: ScalarField::zeros(1, 3),
            blur: ScalarField::zeros(1, 3),
            curve: ScalarField::zeros(1, 3),
        };
        let a = amplitude(&map, &DifficultyParams::default());
        assert_eq!(a.values(), &[10.0, 2.5, 0.0]);
        let zero = DifficultyParams { amax_scale: 0.0, ..Default::default() };
        assert!(amplitude(&map, &zero).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direction_values() {
        assert_eq!(direction_value(0.4, 0.4, 1e-6), 0.0);
        assert!((direction_value(1.0, 0.0, 1e-6) - 1.0).abs() < 1e-5);
        assert!((direction_value(0.0, 1.0, 1e-6) + 1.0).abs() < 1e-5);
        assert_eq!(direction_value(0.0, 0.0, 1e-6), 0.0);
    }

    #[test]
    fn direction_follows_edge_evidence() {
        // strong texture inside the object, flat outside: evidence lies inside -> shrink
        let d = disk_mask(48, 23.5, 23.5, 12.0);
        let img = ScalarField::from_fn(48, 48, |r, c| if d.get(r, c) { 0.5 + 0.2 * Float::sin(1.3 * r as f64) + 0.2 * Float::cos(1.1 * c as f64) } else { 0.5 });
        let phi = signed_distance(&d).unwrap();
        let band = boundary_band(&phi, 2.4);
        let b = direction(&img, &phi, &band, 1.0, 1e-6).unwrap();
        let mean = b.values().iter().sum::<f64>() / band.count() as f64;
        assert!(mean > 0.2, "mean direction {mean}");
        assert!(b.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..b.values().len() {
            if !band.values()[i] {
                assert_eq!(b.values()[i], 0.0);
            }
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let d = disk_mask(40, 19.5, 19.5, 10.0);
        let img = shaded_image(&d);
        let params = DifficultyParams { amax_scale: 0.0, ..Default::default() };
        let (noisy, rec) = deform_class(&img, &d, &params).unwrap();
        assert_eq!(noisy, d);
        assert_eq!(rec.changed_pixels, 0);
    }

    #[test]
    fn positive_direction_shrinks_a_disk() {
        let d = disk_mask(96, 47.5, 47.5, 35.0);
        let phi = signed_distance(&d).unwrap();
        let w = band_width(&d).unwrap();
        let band = boundary_band(&phi, w);
        let amp = ScalarField::filled(96, 96, w).masked(&band).unwrap();
        let dir = ScalarField::filled(96, 96, 1.0);
        let after = apply_displacement(&phi, &amp, &dir, w).unwrap();
        let shrunk = threshold(&after);
        assert!(shrunk.count() < d.count());
        let grown = threshold(&apply_displacement(&phi, &amp, &dir.map(|v| -v), w).unwrap());
        assert!(grown.count() > d.count());
    }

    #[test]
    fn changes_stay_near_the_contour() {
        let d = disk_mask(64, 31.5, 31.5, 18.0);
        let img = shaded_image(&d);
        for scale in [0.5, 1.0, 2.0] {
            let params = DifficultyParams { amax_scale: scale, ..Default::default() };
            let (noisy, rec) = deform_class(&img, &d, &params).unwrap();
            assert!(rec.amplitude.values().iter().all(|&a| a >= 0.0 && a <= params.a_max(rec.width) + 1e-12));
            assert!(rec.direction.values().iter().all(|&b| (-1.0..=1.0).contains(&b)));
            for i in 0..noisy.values().len() {
                if noisy.values()[i] != d.values()[i] {
                    assert!(rec.phi_before.values()[i].abs() <= rec.width + 3.0 * rec.sigma);
                }
            }
        }
    }

    #[test]
    fn multiclass_rules() {
        let size = 64;
        let a = disk_mask(size, 20.0, 20.0, 10.0);
        let b = disk_mask(size, 44.0, 42.0, 12.0);
        let values = (0..size * size).map(|i| if a.values()[i] { 1 } else if b.values()[i] { 2 } else { 0 }).collect();
        let label = LabelMask::new(size, size, 3, values).unwrap();
        let img = ScalarField::from_fn(size, size, |r, c| 0.2 + 0.4 * label.get(r, c) as f64 + 0.003 * r as f64);
        let params = DifficultyParams { amax_scale: 2.0, ..Default::default() };

        assert_eq!(deform_multiclass(&img, &label, &params, &[]).unwrap(), label);

        let only_one = deform_multiclass(&img, &label, &params, &[1]).unwrap();
        let (single, _) = deform_class(&img, &a, &params).unwrap();
        for i in 0..size * size {
            let expected = if single.values()[i] { 1 } else { label.values()[i] & 2 };
            assert_eq!(only_one.values()[i], expected);
        }

        assert_eq!(deform_multiclass(&img, &label, &params, &[1, 3]), Err(Error::MissingClass(3)));
        let no_two = LabelMask::new(size, size, 3, (0..size * size).map(|i| a.values()[i] as u8).collect()).unwrap();
        assert_eq!(deform_multiclass(&img, &no_two, &params, &[2]), Err(Error::MissingClass(2)));
    }

    #[test]
    fn overlap_goes_to_the_smaller_displaced_sdf() {
        // two classes both claim the center pixel after displacement
        let phi1 = ScalarField::from_vec(1, 3, vec![-2.0, -2.0, 1.0]).unwrap();
        let phi2 = ScalarField::from_vec(1, 3, vec![1.0, -1.0, -1.0]).unwrap();
        let out = assign_by_min_sdf(&[(1, &phi1), (2, &phi2)], (1, 3), 3);
        let tie = ScalarField::from_vec(1, 3, vec![-2.0, -2.0, 1.0]).unwrap();
        let tied = assign_by_min_sdf(&[(1, &phi1), (2, &tie)], (1, 3), 3);
        assert_eq!(out.values(), &[1, 1, 2]);
        assert_eq!(tied.values(), &[1, 1, 0]);
    }
}
