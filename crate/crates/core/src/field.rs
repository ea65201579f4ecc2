//! Dense 2D grids and the scalar-field operators used by the annotation
//! simulator and the scene generator.
//!
//! All operators use replicate (clamp-to-edge) padding and central
//! differences. Everything is a pure function of its inputs.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{Error, Result};

/// Gradients below this norm are treated as zero when normalizing.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// Row-major grid of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "field must be at least 1x1");
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("field must be at least 1x1"));
        }
        if values.len() != height * width {
            return Err(Error::Shape("value count does not match height*width"));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height >= 1 && width >= 1, "field must be at least 1x1");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self { height, width, values }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.width + c] = v;
    }

    /// Value at a possibly out-of-range position, clamped to the nearest edge.
    #[inline]
    pub fn get_clamped(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.height as isize - 1) as usize;
        let c = c.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    /// Bilinear interpolation at fractional `(row, col)`, clamped to the grid.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let row = row.clamp(0.0, (self.height - 1) as f64);
        let col = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = row.floor() as usize;
        let c0 = col.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = row - r0 as f64;
        let fc = col - c0 as f64;
        let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
        let bottom = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two fields of equal shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Shape("fields differ in shape"));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, values })
    }

    /// Zeroes every pixel where `mask` is false.
    pub fn masked(&self, mask: &BinaryMask) -> Result<Self> {
        if self.shape() != mask.shape() {
            return Err(Error::Shape("field and mask differ in shape"));
        }
        let values = self.values.iter().zip(mask.values()).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        Ok(Self { height: self.height, width: self.width, values })
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Min-max normalization to `[0, 1]`; a constant field maps to zeros.
    pub fn normalized(&self) -> Self {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if !(span > 0.0) {
            return Self::zeros(self.height, self.width);
        }
        self.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    }

    /// Central-difference partial derivatives `(d/drow, d/dcol)`.
    pub fn central_gradient(&self) -> (Self, Self) {
        let mut dr = Self::zeros(self.height, self.width);
        let mut dc = Self::zeros(self.height, self.width);
        for r in 0..self.height {
            let ri = r as isize;
            for c in 0..self.width {
                let ci = c as isize;
                dr.set(r, c, 0.5 * (self.get_clamped(ri + 1, ci) - self.get_clamped(ri - 1, ci)));
                dc.set(r, c, 0.5 * (self.get_clamped(ri, ci + 1) - self.get_clamped(ri, ci - 1)));
            }
        }
        (dr, dc)
    }
}

/// Row-major grid of booleans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("mask must be at least 1x1"));
        }
        if values.len() != height * width {
            return Err(Error::Shape("value count does not match height*width"));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(height >= 1 && width >= 1, "mask must be at least 1x1");
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self { height, width, values }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn values(&self) -> &[bool] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn complement(&self) -> Self {
        Self { height: self.height, width: self.width, values: self.values.iter().map(|v| !v).collect() }
    }

    /// Both memberships are present.
    pub fn is_degenerate(&self) -> bool {
        let n = self.count();
        n == 0 || n == self.values.len()
    }
}

/// Row-major grid of class indices in `0..classes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: u8,
    values: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: u8, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("label must be at least 1x1"));
        }
        if values.len() != height * width {
            return Err(Error::Shape("value count does not match height*width"));
        }
        if classes < 2 {
            return Err(Error::Shape("a label needs at least two classes"));
        }
        if values.iter().any(|&v| v >= classes) {
            return Err(Error::Shape("label value out of class range"));
        }
        Ok(Self { height, width, classes, values })
    }

    pub fn filled(height: usize, width: usize, classes: u8, value: u8) -> Self {
        assert!(height >= 1 && width >= 1 && classes >= 2 && value < classes);
        Self { height, width, classes, values: vec![value; height * width] }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn classes(&self) -> u8 {
        self.classes
    }

    #[inline]
    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.values[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, class: u8) {
        assert!(class < self.classes);
        self.values[r * self.width + c] = class;
    }

    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v == class).collect(),
        }
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.values.iter().filter(|&&v| v == class).count()
    }

    pub fn contains(&self, class: u8) -> bool {
        self.values.contains(&class)
    }
}

/// Exact signed Euclidean distance transform.
///
/// Each pixel gets the distance (in pixels, between pixel centers) to the
/// nearest pixel of opposite membership; negative inside the mask.
pub fn signed_distance(mask: &BinaryMask) -> Result<ScalarField> {
    if mask.is_degenerate() {
        return Err(Error::DegenerateMask);
    }
    let (h, w) = mask.shape();
    // Squared distance from each pixel to the nearest `false` pixel, and to the nearest `true` pixel.
    let to_outside = squared_edt(h, w, |i| !mask.values[i]);
    let to_inside = squared_edt(h, w, |i| mask.values[i]);
    let values = (0..h * w)
        .map(|i| {
            if mask.values[i] {
                -Float::sqrt(to_outside[i] as f64)
            } else {
                Float::sqrt(to_inside[i] as f64)
            }
        })
        .collect();
    Ok(ScalarField { height: h, width: w, values })
}

/// Squared EDT to the feature set, separable lower-envelope of parabolas.
/// `None` marks "no feature in this line yet".
fn squared_edt(h: usize, w: usize, is_feature: impl Fn(usize) -> bool) -> Vec<i64> {
    let mut cols: Vec<Option<i64>> = (0..h * w).map(|i| if is_feature(i) { Some(0) } else { None }).collect();
    let mut line = Vec::with_capacity(h.max(w));
    let mut out = Vec::with_capacity(h.max(w));
    let mut scratch = EnvelopeScratch::default();

    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| cols[r * w + c]));
        lower_envelope(&line, &mut out, &mut scratch);
        for r in 0..h {
            cols[r * w + c] = out[r];
        }
    }
    let mut result = vec![0i64; h * w];
    for r in 0..h {
        line.clear();
        line.extend_from_slice(&cols[r * w..(r + 1) * w]);
        lower_envelope(&line, &mut out, &mut scratch);
        for c in 0..w {
            result[r * w + c] = out[c].expect("mask has at least one feature pixel");
        }
    }
    result
}

#[derive(Default)]
struct EnvelopeScratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

/// 1D transform `out[q] = min_p f[p] + (q - p)^2` over the finite `f[p]`.
fn lower_envelope(f: &[Option<i64>], out: &mut Vec<Option<i64>>, s: &mut EnvelopeScratch) {
    let n = f.len();
    out.clear();
    s.sites.clear();
    s.bounds.clear();
    let height = |p: usize| f[p].map(|v| v + (p * p) as i64);

    for q in 0..n {
        let Some(fq) = height(q) else { continue };
        loop {
            let Some(&v) = s.sites.last() else { break };
            let fv = height(v).expect("only finite sites are stored");
            let cross = (fq - fv) as f64 / (2 * (q - v)) as f64;
            if cross <= *s.bounds.last().expect("bounds track sites") {
                s.sites.pop();
                s.bounds.pop();
            } else {
                s.sites.push(q);
                s.bounds.push(cross);
                break;
            }
        }
        if s.sites.is_empty() {
            s.sites.push(q);
            s.bounds.push(f64::NEG_INFINITY);
        }
    }

    if s.sites.is_empty() {
        out.resize(n, None);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < s.sites.len() && s.bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = s.sites[k];
        let d = q as i64 - p as i64;
        out.push(Some(f[p].expect("finite site") + d * d));
    }
}

/// `||grad f||`, min-max normalized to `[0, 1]`.
pub fn gradient_magnitude(f: &ScalarField) -> ScalarField {
    let (dr, dc) = f.central_gradient();
    dr.zip_map(&dc, |a, b| Float::sqrt(a * a + b * b)).expect("same shape").normalized()
}

/// `|5-point Laplacian of f|`, min-max normalized to `[0, 1]`.
pub fn laplacian_magnitude(f: &ScalarField) -> ScalarField {
    let lap = ScalarField::from_fn(f.height, f.width, |r, c| {
        let (r, c) = (r as isize, c as isize);
        let v = f.get_clamped(r - 1, c) + f.get_clamped(r + 1, c) + f.get_clamped(r, c - 1) + f.get_clamped(r, c + 1)
            - 4.0 * f.get_clamped(r, c);
        v.abs()
    });
    lap.normalized()
}

/// Signed curvature `div(grad phi / |grad phi|)` without any normalization.
pub fn raw_curvature(phi: &ScalarField) -> ScalarField {
    let (dr, dc) = phi.central_gradient();
    let mut nr = ScalarField::zeros(phi.height, phi.width);
    let mut nc = ScalarField::zeros(phi.height, phi.width);
    for i in 0..phi.values.len() {
        let norm = Float::sqrt(dr.values[i] * dr.values[i] + dc.values[i] * dc.values[i]);
        if norm >= GRADIENT_FLOOR {
            nr.values[i] = dr.values[i] / norm;
            nc.values[i] = dc.values[i] / norm;
        }
    }
    let (dnr_dr, _) = nr.central_gradient();
    let (_, dnc_dc) = nc.central_gradient();
    dnr_dr.zip_map(&dnc_dc, |a, b| a + b).expect("same shape")
}

/// `|curvature| * eq_radius`, clipped to `[0, 1]`.
pub fn curvature(phi: &ScalarField, eq_radius: f64) -> ScalarField {
    raw_curvature(phi).map(|k| (k.abs() * eq_radius).clamp(0.0, 1.0))
}

/// Normalized 1D Gaussian taps for `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidSigma(sigma));
    }
    let radius = Float::ceil(3.0 * sigma) as isize;
    let mut taps: Vec<f64> =
        (-radius..=radius).map(|x| Float::exp(-((x * x) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Ok(taps)
}

/// Separable truncated-Gaussian convolution with replicate padding.
pub fn gaussian_smooth(f: &ScalarField, sigma: f64) -> Result<ScalarField> {
    let taps = gaussian_kernel(sigma)?;
    let radius = (taps.len() / 2) as isize;
    let (h, w) = f.shape();
    let horizontal = ScalarField::from_fn(h, w, |r, c| {
        taps.iter().enumerate().map(|(k, t)| t * f.get_clamped(r as isize, c as isize + k as isize - radius)).sum()
    });
    Ok(ScalarField::from_fn(h, w, |r, c| {
        taps.iter()
            .enumerate()
            .map(|(k, t)| t * horizontal.get_clamped(r as isize + k as isize - radius, c as isize))
            .sum()
    }))
}

/// Pixels with `|phi| <= width`.
pub fn boundary_band(phi: &ScalarField, width: f64) -> BinaryMask {
    BinaryMask { height: phi.height, width: phi.width, values: phi.values.iter().map(|v| v.abs() <= width).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_sdf(mask: &BinaryMask) -> Vec<f64> {
        let (h, w) = mask.shape();
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let inside = mask.get(r, c);
                let mut best = i64::MAX;
                for r2 in 0..h {
                    for c2 in 0..w {
                        if mask.get(r2, c2) != inside {
                            let d = (r as i64 - r2 as i64).pow(2) + (c as i64 - c2 as i64).pow(2);
                            best = best.min(d);
                        }
                    }
                }
                let d = Float::sqrt(best as f64);
                out.push(if inside { -d } else { d });
            }
        }
        out
    }

    fn disk(size: usize, radius: f64) -> BinaryMask {
        let c = (size as f64 - 1.0) / 2.0;
        BinaryMask::from_fn(size, size, |r, k| {
            let (dr, dc) = (r as f64 - c, k as f64 - c);
            dr * dr + dc * dc <= radius * radius
        })
    }

    #[test]
    fn sdf_one_by_three() {
        let m = BinaryMask::new(1, 3, vec![false, true, false]).unwrap();
        assert_eq!(signed_distance(&m).unwrap().values(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn sdf_single_pixel_corner() {
        let m = BinaryMask::from_fn(5, 5, |r, c| r == 2 && c == 2);
        let phi = signed_distance(&m).unwrap();
        assert_eq!(phi.get(0, 0), Float::sqrt(8.0));
        assert_eq!(phi.values(), brute_force_sdf(&m).as_slice());
    }

    #[test]
    fn sdf_degenerate() {
        assert_eq!(signed_distance(&BinaryMask::from_fn(3, 3, |_, _| true)), Err(Error::DegenerateMask));
        assert_eq!(signed_distance(&BinaryMask::from_fn(3, 3, |_, _| false)), Err(Error::DegenerateMask));
    }

    #[test]
    fn sdf_complement_negates() {
        let m = disk(17, 5.3);
        let a = signed_distance(&m).unwrap();
        let b = signed_distance(&m.complement()).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn gradient_of_ramp() {
        let f = ScalarField::from_fn(4, 4, |_, c| c as f64);
        let g = gradient_magnitude(&f);
        for r in 0..4 {
            assert_eq!(g.get(r, 1), 1.0);
            assert_eq!(g.get(r, 2), 1.0);
            // one-sided half step at the clamped edges
            assert_eq!(g.get(r, 0), 0.0);
        }
    }

    #[test]
    fn gradient_of_step_peaks_beside_the_step() {
        let f = ScalarField::from_fn(6, 8, |_, c| if c >= 4 { 1.0 } else { 0.0 });
        let g = gradient_magnitude(&f);
        for r in 0..6 {
            for c in 0..8 {
                let expected = if c == 3 || c == 4 { 1.0 } else { 0.0 };
                assert_eq!(g.get(r, c), expected, "({r},{c})");
            }
        }
    }

    #[test]
    fn constant_fields_map_to_zero() {
        let f = ScalarField::filled(5, 7, 3.25);
        assert!(gradient_magnitude(&f).values().iter().all(|&v| v == 0.0));
        assert!(laplacian_magnitude(&f).values().iter().all(|&v| v == 0.0));
        assert!(curvature(&f, 4.0).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_ramp_and_impulse() {
        let ramp = ScalarField::from_fn(6, 6, |_, c| 2.0 * c as f64);
        let l = laplacian_magnitude(&ramp);
        for r in 0..6 {
            for c in 1..5 {
                assert_eq!(l.get(r, c), 0.0);
            }
        }
        let imp = ScalarField::from_fn(5, 5, |r, c| if r == 2 && c == 2 { 1.0 } else { 0.0 });
        let l = laplacian_magnitude(&imp);
        assert_eq!(l.get(2, 2), 1.0);
        // neighbours see |1| against a center of |-4|
        assert_eq!(l.get(1, 2), 0.25);
    }

    #[test]
    fn curvature_of_half_plane_is_flat() {
        let m = BinaryMask::from_fn(32, 32, |_, c| c < 16);
        let phi = signed_distance(&m).unwrap();
        let band = boundary_band(&phi, 2.0);
        let k = curvature(&phi, 10.0);
        for i in 0..k.values().len() {
            if band.values()[i] {
                assert!(k.values()[i] < 0.05);
            }
        }
    }

    #[test]
    fn curvature_of_disk_matches_inverse_radius() {
        let radius = 14.0;
        let m = disk(48, radius);
        let phi = signed_distance(&m).unwrap();
        let band = boundary_band(&phi, 0.2 * radius);
        let raw = raw_curvature(&phi);
        let (mut sum, mut n) = (0.0, 0);
        for i in 0..raw.values().len() {
            if band.values()[i] {
                sum += raw.values()[i];
                n += 1;
            }
        }
        let mean = sum / n as f64;
        assert!((mean - 1.0 / radius).abs() < 0.3 / radius, "mean curvature {mean}");
        // per-pixel values on the discrete SDF are noisy; the band mean carries the curvature
        let eq = Float::sqrt(m.count() as f64 / core::f64::consts::PI);
        let scaled: f64 = raw.values().iter().zip(band.values()).filter(|(_, &b)| b).map(|(v, _)| v * eq).sum::<f64>();
        assert!((scaled / n as f64 - 1.0).abs() < 0.3);
        assert!(curvature(&phi, eq).values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn smoothing_basics() {
        let f = ScalarField::filled(9, 9, 2.5);
        let s = gaussian_smooth(&f, 1.3).unwrap();
        for v in s.values() {
            assert!((v - 2.5).abs() < 1e-12);
        }
        let imp = ScalarField::from_fn(15, 15, |r, c| if r == 7 && c == 7 { 1.0 } else { 0.0 });
        let s = gaussian_smooth(&imp, 1.0).unwrap();
        let taps = gaussian_kernel(1.0).unwrap();
        let center = taps[taps.len() / 2];
        assert!((s.get(7, 7) - center * center).abs() < 1e-15);
        assert!((s.sum() - 1.0).abs() < 1e-12);

        let f = ScalarField::from_fn(8, 8, |r, c| (r * 8 + c) as f64 * 0.1);
        let s = gaussian_smooth(&f, 0.1).unwrap();
        for (a, b) in s.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(gaussian_smooth(&f, 0.0), Err(Error::InvalidSigma(0.0)));
        assert!(gaussian_smooth(&f, -1.0).is_err());
    }

    #[test]
    fn band_cases() {
        let phi = ScalarField::from_vec(1, 3, vec![1.0, -1.0, 1.0]).unwrap();
        assert!(boundary_band(&phi, 1.0).values().iter().all(|&b| b));
        assert!(boundary_band(&phi, 0.5).values().iter().all(|&b| !b));

        let m = disk(41, 10.0);
        let phi = signed_distance(&m).unwrap();
        let band = boundary_band(&phi, 2.0);
        for r in 0..41 {
            for c in 0..41 {
                let rad = Float::sqrt((r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2));
                if band.get(r, c) {
                    assert!(rad >= 7.5 && rad <= 12.5, "band pixel at radius {rad}");
                }
                if (rad - 10.0).abs() < 1.0 {
                    assert!(band.get(r, c), "contour pixel at radius {rad} missing");
                }
            }
        }
    }

    #[test]
    fn bilinear_sampling() {
        let f = ScalarField::from_fn(3, 3, |r, c| (r * 10 + c) as f64);
        assert_eq!(f.sample_bilinear(0.5, 0.5), 5.5);
        assert_eq!(f.sample_bilinear(-3.0, 1.0), 1.0);
        assert_eq!(f.sample_bilinear(2.0, 9.0), 22.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mask_strategy() -> impl Strategy<Value = BinaryMask> {
            (1usize..=12, 1usize..=12)
                .prop_flat_map(|(h, w)| (Just(h), Just(w), proptest::collection::vec(any::<bool>(), h * w)))
                .prop_filter_map("degenerate", |(h, w, v)| {
                    let m = BinaryMask::new(h, w, v).unwrap();
                    (!m.is_degenerate()).then_some(m)
                })
        }

        proptest! {
            #[test]
            fn sdf_matches_brute_force(m in mask_strategy()) {
                let phi = signed_distance(&m).unwrap();
                let oracle = brute_force_sdf(&m);
                prop_assert_eq!(phi.values(), oracle.as_slice());
                let neg = signed_distance(&m.complement()).unwrap();
                for (a, b) in phi.values().iter().zip(neg.values()) {
                    prop_assert_eq!(*a, -*b);
                }
            }

            #[test]
            fn normalized_operators_stay_in_unit_range(
                v in proptest::collection::vec(-50.0f64..50.0, 48)
            ) {
                let f = ScalarField::from_vec(6, 8, v).unwrap();
                for g in [gradient_magnitude(&f), laplacian_magnitude(&f)] {
                    prop_assert!(g.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
                }
            }

            #[test]
            fn smoothing_is_linear(
                a in -3.0f64..3.0, b in -3.0f64..3.0, sigma in 0.2f64..3.0,
                f in proptest::collection::vec(-1.0f64..1.0, 49),
                g in proptest::collection::vec(-1.0f64..1.0, 49),
            ) {
                let f = ScalarField::from_vec(7, 7, f).unwrap();
                let g = ScalarField::from_vec(7, 7, g).unwrap();
                let combo = f.zip_map(&g, |x, y| a * x + b * y).unwrap();
                let lhs = gaussian_smooth(&combo, sigma).unwrap();
                let sf = gaussian_smooth(&f, sigma).unwrap();
                let sg = gaussian_smooth(&g, sigma).unwrap();
                for i in 0..49 {
                    prop_assert!((lhs.values()[i] - (a * sf.values()[i] + b * sg.values()[i])).abs() < 1e-9);
                }
            }
        }
    }
}
