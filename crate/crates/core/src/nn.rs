//! Three-stage split segmentation network with hand-written gradients.
//!
//! ```text
//! FE: conv3x3 C_in->8, ReLU
//! S:  conv3x3 8->16, ReLU, conv3x3 16->8, ReLU
//! BE: conv3x3 8->C, softmax over classes
//! ```
//!
//! All convolutions are stride 1 with replicate padding, so every activation
//! keeps the input's spatial size. FE and BE run on the client, S on the
//! server; activations cross a [`Link`] in both directions.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{rng_for, Stream};
use crate::error::{Error, Result};
use crate::field::{LabelMask, ScalarField};
use crate::tensor::{Real, Tensor};
use crate::wire::{FrameReader, FrameWriter};

pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub in_channels: usize,
    pub classes: usize,
    pub fe_channels: usize,
    pub hidden_channels: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { in_channels: 1, classes: 3, fe_channels: 8, hidden_channels: 16 }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.fe_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("channel counts must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes"));
        }
        Ok(())
    }

    /// `(c_in, c_out)` for each convolution, in execution order.
    pub fn layers(&self) -> [(usize, usize); 4] {
        [
            (self.in_channels, self.fe_channels),
            (self.fe_channels, self.hidden_channels),
            (self.hidden_channels, self.fe_channels),
            (self.fe_channels, self.classes),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FE = 1,
    S = 2,
    BE = 3,
}

impl Stage {
    fn from_tag(tag: f64) -> Option<Self> {
        match tag as i64 {
            1 => Some(Stage::FE),
            2 => Some(Stage::S),
            3 => Some(Stage::BE),
            _ => None,
        }
    }
}

/// Parameter tensors of the three sub-models, each stored as
/// `[weight, bias]` pairs per convolution (`[c_out, c_in, 3, 3]`, `[c_out]`).
/// Also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub fe: Vec<Tensor<T>>,
    pub s: Vec<Tensor<T>>,
    pub be: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(arch: &Arch) -> Self {
        let [l0, l1, l2, l3] = arch.layers();
        let conv = |(cin, cout): (usize, usize)| [Tensor::zeros(&[cout, cin, 3, 3]), Tensor::zeros(&[cout])];
        let mut s = Vec::new();
        s.extend(conv(l1));
        s.extend(conv(l2));
        Self { fe: conv(l0).into(), s, be: conv(l3).into() }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.fe.iter().chain(&self.s).chain(&self.be)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.fe.iter_mut().chain(self.s.iter_mut()).chain(self.be.iter_mut())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn same_shapes(&self, other: &Self) -> bool {
        self.fe.len() == other.fe.len()
            && self.s.len() == other.s.len()
            && self.be.len() == other.be.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.is_finite())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            fe: self.fe.iter().map(Tensor::cast).collect(),
            s: self.s.iter().map(Tensor::cast).collect(),
            be: self.be.iter().map(Tensor::cast).collect(),
        }
    }

    fn conv(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        let (v, i) = match layer {
            0 => (&self.fe, 0),
            1 => (&self.s, 0),
            2 => (&self.s, 2),
            _ => (&self.be, 0),
        };
        (&v[i], &v[i + 1])
    }

    fn conv_mut(&mut self, layer: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let (v, i) = match layer {
            0 => (&mut self.fe, 0),
            1 => (&mut self.s, 0),
            2 => (&mut self.s, 2),
            _ => (&mut self.be, 0),
        };
        let (a, b) = v.split_at_mut(i + 1);
        (&mut a[i], &mut b[0])
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Network parameters plus a version stamp that changes on every mutation,
/// so a forward cache can be matched against the parameters it came from.
#[derive(Debug, Clone)]
pub struct SplitParams<T> {
    arch: Arch,
    set: ParamSet<T>,
    version: u64,
}

impl<T: Real> PartialEq for SplitParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.set == other.set
    }
}

impl<T: Real> SplitParams<T> {
    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, set: ParamSet::zeros(&arch), version: next_version() })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let mut rng = rng_for(seed, Stream::Init, 0);
        for (layer, (cin, _)) in arch.layers().into_iter().enumerate() {
            let std = Float::sqrt(2.0 / (cin * 9) as f64);
            let normal = Normal::new(0.0, std).map_err(|_| Error::Config("bad init scale"))?;
            let (w, _) = p.set.conv_mut(layer);
            for v in w.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(p)
    }

    pub fn from_set(arch: Arch, set: ParamSet<T>) -> Result<Self> {
        arch.validate()?;
        if !set.same_shapes(&ParamSet::zeros(&arch)) {
            return Err(Error::Shape("parameter shapes do not match the architecture"));
        }
        Ok(Self { arch, set, version: next_version() })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn set(&self) -> &ParamSet<T> {
        &self.set
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutates the parameters and invalidates outstanding caches.
    pub fn update<R>(&mut self, f: impl FnOnce(&mut ParamSet<T>) -> R) -> R {
        self.version = next_version();
        f(&mut self.set)
    }

    pub fn into_set(self) -> ParamSet<T> {
        self.set
    }

    pub fn cast<U: Real>(&self) -> SplitParams<U> {
        SplitParams { arch: self.arch, set: self.set.cast(), version: next_version() }
    }

    /// Bitwise equality of every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.set.tensors().zip(other.set.tensors()).all(|(a, b)| a.bit_eq(b))
    }
}

/// Activations crossing the client/server boundary, `(channels, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Activations<T> {
    pub tensor: Tensor<T>,
    pub produced_by: Stage,
}

/// Carries activations (and their gradients) between sub-models.
pub trait Link<T: Real> {
    fn send(&mut self, act: Activations<T>) -> Result<Activations<T>>;
}

/// Hands activations over in memory.
#[derive(Debug, Default, Clone, Copy)]
pub struct DirectLink;

impl<T: Real> Link<T> for DirectLink {
    fn send(&mut self, act: Activations<T>) -> Result<Activations<T>> {
        Ok(act)
    }
}

/// Serializes every transfer through the wire format and counts bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct WireLink {
    pub bytes: u64,
    pub messages: u64,
}

impl<T: Real> Link<T> for WireLink {
    fn send(&mut self, act: Activations<T>) -> Result<Activations<T>> {
        let mut w = FrameWriter::new();
        w.scalar(act.produced_by as u8 as f64)?.tensor(&act.tensor)?;
        let bytes = w.finish()?;
        self.bytes += bytes.len() as u64;
        self.messages += 1;
        let mut r = FrameReader::new(&bytes)?;
        let tag = r.scalar()?;
        let tensor = r.tensor::<T>()?;
        r.finish()?;
        let produced_by = Stage::from_tag(tag).ok_or(crate::WireError::Malformed("unknown stage tag"))?;
        Ok(Activations { tensor, produced_by })
    }
}

/// Images (`[c_in, h, w]` tensors) with aligned labels and stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<LabelMask>,
    pub ids: Vec<u64>,
}

impl<T: Real> SampleBatch<T> {
    pub fn new(images: Vec<Tensor<T>>, labels: Vec<LabelMask>, ids: Vec<u64>) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::Shape("batch images, labels and ids differ in length"));
        }
        for (img, lab) in images.iter().zip(&labels) {
            if img.shape().len() != 3 || img.shape()[1..] != [lab.height(), lab.width()] {
                return Err(Error::Shape("image and label differ in shape"));
            }
        }
        Ok(Self { images, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Single-channel image tensor from a scalar field.
pub fn image_tensor<T: Real>(field: &ScalarField) -> Tensor<T> {
    let data = field.values().iter().map(|&v| T::of(v)).collect();
    Tensor::from_vec(&[1, field.height(), field.width()], data).expect("field length matches its shape")
}

fn pad_replicate<T: Real>(src: &[T], ch: usize, h: usize, w: usize, dst: &mut Vec<T>) {
    let pw = w + 2;
    dst.clear();
    dst.resize(ch * (h + 2) * pw, T::zero());
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let out = &mut dst[c * (h + 2) * pw..(c + 1) * (h + 2) * pw];
        for py in 0..h + 2 {
            let y = py.saturating_sub(1).min(h - 1);
            let row = &plane[y * w..(y + 1) * w];
            let orow = &mut out[py * pw..(py + 1) * pw];
            orow[0] = row[0];
            orow[1..=w].copy_from_slice(row);
            orow[w + 1] = row[w - 1];
        }
    }
}

/// Valid 3x3 correlation of a `(h + 2) x (w + 2)` padded input into an
/// `h x w` output, four output channels at a time.
fn conv_forward<T: Real>(
    pad: &[T],
    (cin, cout): (usize, usize),
    (h, w): (usize, usize),
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let hw = h * w;
    let mut o = 0;
    while o < cout {
        let block = (cout - o).min(4);
        let mut planes: [&mut [T]; 4] = [&mut [], &mut [], &mut [], &mut []];
        for (slot, plane) in planes.iter_mut().zip(out[o * hw..(o + block) * hw].chunks_exact_mut(hw)) {
            *slot = plane;
        }
        for y in 0..h {
            for (b, plane) in planes.iter_mut().take(block).enumerate() {
                plane[y * w..(y + 1) * w].fill(bias[o + b]);
            }
            for ci in 0..cin {
                for ky in 0..3 {
                    let start = ci * pplane + (y + ky) * pw;
                    let (q0, q1, q2) = (&pad[start..start + w], &pad[start + 1..start + w + 1], &pad[start + 2..start + w + 2]);
                    let k = |b: usize, kx: usize| weight[((o + b) * cin + ci) * 9 + ky * 3 + kx];
                    match block {
                        4 => {
                            let [p0, p1, p2, p3] = &mut planes;
                            let (r0, r1, r2, r3) = (
                                &mut p0[y * w..(y + 1) * w],
                                &mut p1[y * w..(y + 1) * w],
                                &mut p2[y * w..(y + 1) * w],
                                &mut p3[y * w..(y + 1) * w],
                            );
                            let (a0, a1, a2) = (k(0, 0), k(0, 1), k(0, 2));
                            let (b0, b1, b2) = (k(1, 0), k(1, 1), k(1, 2));
                            let (c0, c1, c2) = (k(2, 0), k(2, 1), k(2, 2));
                            let (d0, d1, d2) = (k(3, 0), k(3, 1), k(3, 2));
                            for x in 0..w {
                                let (u, v, t) = (q0[x], q1[x], q2[x]);
                                r0[x] += a0 * u + a1 * v + a2 * t;
                                r1[x] += b0 * u + b1 * v + b2 * t;
                                r2[x] += c0 * u + c1 * v + c2 * t;
                                r3[x] += d0 * u + d1 * v + d2 * t;
                            }
                        }
                        _ => {
                            for (b, plane) in planes.iter_mut().take(block).enumerate() {
                                let r = &mut plane[y * w..(y + 1) * w];
                                let (a0, a1, a2) = (k(b, 0), k(b, 1), k(b, 2));
                                for x in 0..w {
                                    r[x] += a0 * q0[x] + a1 * q1[x] + a2 * q2[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        o += block;
    }
}

/// Accumulates weight and bias gradients of one convolution. Products are
/// summed into full-width row accumulators, reduced once at the end.
fn conv_param_grad<T: Real>(
    pad: &[T],
    dz: &[T],
    (cin, cout): (usize, usize),
    (h, w): (usize, usize),
    dw: &mut [T],
    db: &mut [T],
) {
    let pw = w + 2;
    let pplane = (h + 2) * pw;
    let mut acc = vec![T::zero(); 9 * w];
    for o in 0..cout {
        let dplane = &dz[o * h * w..(o + 1) * h * w];
        let bias_acc = &mut acc[..w];
        bias_acc.fill(T::zero());
        for d in dplane.chunks_exact(w) {
            for (a, &v) in bias_acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        db[o] += row_sum(bias_acc);
        for ci in 0..cin {
            acc.fill(T::zero());
            for y in 0..h {
                let d = &dplane[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let start = ci * pplane + (y + ky) * pw;
                    let (q0, q1, q2) = (&pad[start..start + w], &pad[start + 1..start + w + 1], &pad[start + 2..start + w + 2]);
                    let (a0, rest) = acc[ky * 3 * w..(ky * 3 + 3) * w].split_at_mut(w);
                    let (a1, a2) = rest.split_at_mut(w);
                    for x in 0..w {
                        let v = d[x];
                        a0[x] += v * q0[x];
                        a1[x] += v * q1[x];
                        a2[x] += v * q2[x];
                    }
                }
            }
            let base = (o * cin + ci) * 9;
            for (k, row) in acc.chunks_exact(w).enumerate() {
                dw[base + k] += row_sum(row);
            }
        }
    }
}

/// Fixed-order sum through eight lanes.
fn row_sum<T: Real>(row: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    for (i, &v) in row.iter().enumerate() {
        lanes[i % 8] += v;
    }
    let mut s = T::zero();
    for v in lanes {
        s += v;
    }
    s
}

/// Gradient with respect to the (unpadded) input of one convolution: a
/// correlation of the zero-padded output gradient with the flipped,
/// transposed kernel gives the gradient on the padded grid, which is then
/// folded back through the replicate padding.
fn conv_input_grad<T: Real>(
    dz: &[T],
    weight: &[T],
    (cin, cout): (usize, usize),
    (h, w): (usize, usize),
    scratch: &mut ConvScratch<T>,
    dx: &mut [T],
) {
    let (ph, pw) = (h + 2, w + 2);
    let zw = w + 4;
    let zplane = (h + 4) * zw;
    let ConvScratch { zpad, flipped, dpad } = scratch;
    zpad.clear();
    zpad.resize(cout * zplane, T::zero());
    for o in 0..cout {
        for y in 0..h {
            let start = o * zplane + (y + 2) * zw + 2;
            zpad[start..start + w].copy_from_slice(&dz[o * h * w + y * w..o * h * w + (y + 1) * w]);
        }
    }
    flipped.clear();
    flipped.resize(cin * cout * 9, T::zero());
    for o in 0..cout {
        for ci in 0..cin {
            for k in 0..9 {
                flipped[(ci * cout + o) * 9 + k] = weight[(o * cin + ci) * 9 + 8 - k];
            }
        }
    }
    dpad.clear();
    dpad.resize(cin * ph * pw, T::zero());
    let bias = vec![T::zero(); cin];
    conv_forward(zpad, (cout, cin), (ph, pw), flipped, &bias, dpad);
    for ci in 0..cin {
        let plane = &dpad[ci * ph * pw..(ci + 1) * ph * pw];
        let out = &mut dx[ci * h * w..(ci + 1) * h * w];
        for py in 0..ph {
            let y = py.saturating_sub(1).min(h - 1);
            let prow = &plane[py * pw..(py + 1) * pw];
            let orow = &mut out[y * w..(y + 1) * w];
            orow[0] += prow[0];
            for (o, &p) in orow.iter_mut().zip(&prow[1..=w]) {
                *o += p;
            }
            orow[w - 1] += prow[w + 1];
        }
    }
}

#[derive(Debug, Default)]
struct ConvScratch<T> {
    zpad: Vec<T>,
    flipped: Vec<T>,
    dpad: Vec<T>,
}

fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if !(*x > T::zero()) {
            *x = T::zero();
        }
    }
}

fn softmax_in_place<T: Real>(v: &mut [T], classes: usize, pixels: usize) {
    for u in 0..pixels {
        let mut m = v[u];
        for c in 1..classes {
            m = m.max(v[c * pixels + u]);
        }
        let mut s = T::zero();
        for c in 0..classes {
            let e = (v[c * pixels + u] - m).exp();
            v[c * pixels + u] = e;
            s += e;
        }
        for c in 0..classes {
            v[c * pixels + u] = v[c * pixels + u] / s;
        }
    }
}

fn run_conv<T: Real>(params: &ParamSet<T>, arch: &Arch, layer: usize, input: &[T], hw: (usize, usize), scratch: &mut Vec<T>) -> Vec<T> {
    let (cin, cout) = arch.layers()[layer];
    let (w, b) = params.conv(layer);
    pad_replicate(input, cin, hw.0, hw.1, scratch);
    let mut out = vec![T::zero(); cout * hw.0 * hw.1];
    conv_forward(scratch, (cin, cout), hw, w.data(), b.data(), &mut out);
    out
}

fn check_image<T: Real>(arch: &Arch, image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        &[c, h, w] if c == arch.in_channels && h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::Shape("image must be [in_channels, h, w]")),
    }
}

fn activation<T: Real>(data: Vec<T>, channels: usize, (h, w): (usize, usize), stage: Stage) -> Activations<T> {
    Activations { tensor: Tensor::from_vec(&[channels, h, w], data).expect("sized by construction"), produced_by: stage }
}

fn expect_activation<T: Real>(act: Activations<T>, stage: Stage, channels: usize, (h, w): (usize, usize)) -> Result<Vec<T>> {
    if act.produced_by != stage || act.tensor.shape() != [channels, h, w] {
        return Err(Error::Shape("unexpected activation from link"));
    }
    Ok(act.tensor.into_data())
}

/// Client front-end: conv + ReLU.
pub fn fe_forward<T: Real>(params: &SplitParams<T>, image: &Tensor<T>) -> Result<Activations<T>> {
    let hw = check_image(&params.arch, image)?;
    let mut scratch = Vec::new();
    let mut a = run_conv(&params.set, &params.arch, 0, image.data(), hw, &mut scratch);
    relu_in_place(&mut a);
    Ok(activation(a, params.arch.fe_channels, hw, Stage::FE))
}

/// Server sub-model: returns its output and the hidden activation.
fn s_forward<T: Real>(params: &SplitParams<T>, a1: &[T], hw: (usize, usize)) -> (Vec<T>, Vec<T>) {
    let mut scratch = Vec::new();
    let mut a2 = run_conv(&params.set, &params.arch, 1, a1, hw, &mut scratch);
    relu_in_place(&mut a2);
    let mut a3 = run_conv(&params.set, &params.arch, 2, &a2, hw, &mut scratch);
    relu_in_place(&mut a3);
    (a2, a3)
}

fn be_forward<T: Real>(params: &SplitParams<T>, a3: &[T], hw: (usize, usize)) -> Vec<T> {
    let mut scratch = Vec::new();
    let mut z = run_conv(&params.set, &params.arch, 3, a3, hw, &mut scratch);
    softmax_in_place(&mut z, params.arch.classes, hw.0 * hw.1);
    z
}

/// Everything backward needs from one sample's forward pass.
#[derive(Debug, Clone)]
pub struct SampleCache<T> {
    input: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    a3: Vec<T>,
    hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    samples: Vec<SampleCache<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Server-stage input and output of sample `k`, for cache checks.
    pub fn server_io(&self, k: usize) -> (&[T], &[T]) {
        (&self.samples[k].a1, &self.samples[k].a3)
    }
}

/// Runs FE, S and BE with the activations crossing `link`. Returns class
/// probabilities `[classes, h, w]` per image.
pub fn forward_split<T: Real, L: Link<T>>(
    params: &SplitParams<T>,
    images: &[Tensor<T>],
    link: &mut L,
) -> Result<(Vec<Tensor<T>>, ForwardCache<T>)> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = params.arch;
    let mut probs = Vec::with_capacity(images.len());
    let mut samples = Vec::with_capacity(images.len());
    for image in images {
        let hw = check_image(&arch, image)?;
        let sent = link.send(fe_forward(params, image)?)?;
        let a1 = expect_activation(sent, Stage::FE, arch.fe_channels, hw)?;
        let (a2, a3) = s_forward(params, &a1, hw);
        let back = link.send(activation(a3, arch.fe_channels, hw, Stage::S))?;
        let a3 = expect_activation(back, Stage::S, arch.fe_channels, hw)?;
        let p = be_forward(params, &a3, hw);
        probs.push(Tensor::from_vec(&[arch.classes, hw.0, hw.1], p).expect("sized by construction"));
        samples.push(SampleCache { input: image.data().to_vec(), a1, a2, a3, hw });
    }
    Ok((probs, ForwardCache { version: params.version, samples }))
}

/// Probabilities only, through a direct link.
pub fn predict<T: Real>(params: &SplitParams<T>, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    images.iter().map(|im| forward(params, im)).collect()
}

/// The same network evaluated as one monolithic stack of layers.
pub fn forward<T: Real>(params: &SplitParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let arch = params.arch;
    let hw = check_image(&arch, image)?;
    let mut scratch = Vec::new();
    let mut x = image.data().to_vec();
    for layer in 0..4 {
        x = run_conv(&params.set, &arch, layer, &x, hw, &mut scratch);
        if layer < 3 {
            relu_in_place(&mut x);
        }
    }
    softmax_in_place(&mut x, arch.classes, hw.0 * hw.1);
    Ok(Tensor::from_vec(&[arch.classes, hw.0, hw.1], x).expect("sized by construction"))
}

fn relu_backward<T: Real>(grad: &mut [T], out: &[T]) {
    for (g, &a) in grad.iter_mut().zip(out) {
        if !(a > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Gradients of a scalar loss with respect to all parameters, given the
/// loss gradient with respect to each sample's probabilities. BE runs on
/// the client, the activation gradient crosses to S, then back to FE.
pub fn backward_split<T: Real, L: Link<T>>(
    params: &SplitParams<T>,
    cache: &ForwardCache<T>,
    probs: &[Tensor<T>],
    dprobs: &[Tensor<T>],
    link: &mut L,
) -> Result<ParamSet<T>> {
    if cache.version != params.version {
        return Err(Error::StaleCache);
    }
    if probs.len() != cache.len() || dprobs.len() != cache.len() {
        return Err(Error::Shape("gradient batch does not match the cache"));
    }
    let arch = params.arch;
    let layers = arch.layers();
    let mut grads = ParamSet::zeros(&arch);
    let mut pad = Vec::new();
    let mut scratch = ConvScratch::default();
    for ((sc, p), dp) in cache.samples.iter().zip(probs).zip(dprobs) {
        let hw = sc.hw;
        let n = hw.0 * hw.1;
        if p.shape() != [arch.classes, hw.0, hw.1] || dp.shape() != p.shape() {
            return Err(Error::Shape("probability gradient shape"));
        }
        // softmax: dz = p * (dp - sum_c p dp)
        let (pv, dv) = (p.data(), dp.data());
        let mut dz = vec![T::zero(); arch.classes * n];
        for u in 0..n {
            let mut dot = T::zero();
            for c in 0..arch.classes {
                dot += pv[c * n + u] * dv[c * n + u];
            }
            for c in 0..arch.classes {
                dz[c * n + u] = pv[c * n + u] * (dv[c * n + u] - dot);
            }
        }

        // BE (client)
        let mut da3 = vec![T::zero(); arch.fe_channels * n];
        pad_replicate(&sc.a3, layers[3].0, hw.0, hw.1, &mut pad);
        {
            let (gw, gb) = grads.conv_mut(3);
            conv_param_grad(&pad, &dz, layers[3], hw, gw.data_mut(), gb.data_mut());
        }
        conv_input_grad(&dz, params.set.conv(3).0.data(), layers[3], hw, &mut scratch, &mut da3);
        let sent = link.send(activation(da3, arch.fe_channels, hw, Stage::BE))?;
        let mut da3 = expect_activation(sent, Stage::BE, arch.fe_channels, hw)?;

        // S (server)
        relu_backward(&mut da3, &sc.a3);
        pad_replicate(&sc.a2, layers[2].0, hw.0, hw.1, &mut pad);
        {
            let (gw, gb) = grads.conv_mut(2);
            conv_param_grad(&pad, &da3, layers[2], hw, gw.data_mut(), gb.data_mut());
        }
        let mut da2 = vec![T::zero(); arch.hidden_channels * n];
        conv_input_grad(&da3, params.set.conv(2).0.data(), layers[2], hw, &mut scratch, &mut da2);
        relu_backward(&mut da2, &sc.a2);
        pad_replicate(&sc.a1, layers[1].0, hw.0, hw.1, &mut pad);
        {
            let (gw, gb) = grads.conv_mut(1);
            conv_param_grad(&pad, &da2, layers[1], hw, gw.data_mut(), gb.data_mut());
        }
        let mut da1 = vec![T::zero(); arch.fe_channels * n];
        conv_input_grad(&da2, params.set.conv(1).0.data(), layers[1], hw, &mut scratch, &mut da1);
        let back = link.send(activation(da1, arch.fe_channels, hw, Stage::S))?;
        let mut da1 = expect_activation(back, Stage::S, arch.fe_channels, hw)?;

        // FE (client)
        relu_backward(&mut da1, &sc.a1);
        pad_replicate(&sc.input, layers[0].0, hw.0, hw.1, &mut pad);
        let (gw, gb) = grads.conv_mut(0);
        conv_param_grad(&pad, &da1, layers[0], hw, gw.data_mut(), gb.data_mut());
    }
    Ok(grads)
}

/// Per-sample soft Dice losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleLosses {
    pub values: Vec<f64>,
}

impl PerSampleLosses {
    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }
}

fn check_label<T: Real>(probs: &Tensor<T>, label: &LabelMask) -> Result<(usize, usize)> {
    match probs.shape() {
        &[c, h, w] if h == label.height() && w == label.width() && c == label.classes() as usize => Ok((c, h * w)),
        _ => Err(Error::Shape("probabilities and label differ in shape")),
    }
}

/// `1 - (1/C) sum_c (2 sum p_c y_c + s) / (sum p_c + sum y_c + s)` and its
/// gradient with respect to `p`.
pub fn dice_loss_and_grad<T: Real>(probs: &Tensor<T>, label: &LabelMask) -> Result<(f64, Tensor<T>)> {
    let (classes, n) = check_label(probs, label)?;
    let p = probs.data();
    let y = label.values();
    let s = DICE_SMOOTHING;
    let mut loss = 1.0;
    let mut grad = Tensor::zeros(probs.shape());
    let g = grad.data_mut();
    for c in 0..classes {
        let plane = &p[c * n..(c + 1) * n];
        let (mut inter, mut psum, mut ysum) = (0.0f64, 0.0f64, 0.0f64);
        for (&pv, &yv) in plane.iter().zip(y) {
            let pv = pv.to_f64();
            psum += pv;
            if yv as usize == c {
                inter += pv;
                ysum += 1.0;
            }
        }
        let num = 2.0 * inter + s;
        let den = psum + ysum + s;
        loss -= num / den / classes as f64;
        // d/dp of -(num/den)/C
        let on = T::of(-(2.0 * den - num) / (den * den) / classes as f64);
        let off = T::of(num / (den * den) / classes as f64);
        for (gv, &yv) in g[c * n..(c + 1) * n].iter_mut().zip(y) {
            *gv = if yv as usize == c { on } else { off };
        }
    }
    Ok((loss, grad))
}

pub fn region_loss_per_sample<T: Real>(probs: &[Tensor<T>], labels: &[LabelMask]) -> Result<PerSampleLosses> {
    if probs.len() != labels.len() {
        return Err(Error::Shape("probabilities and labels differ in count"));
    }
    let values = probs
        .iter()
        .zip(labels)
        .map(|(p, l)| dice_loss_and_grad(p, l).map(|(v, _)| v))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerSampleLosses { values })
}

/// Mean squared difference over samples, classes and pixels.
pub fn consistency_loss<T: Real>(student: &[Tensor<T>], teacher: &[Tensor<T>]) -> Result<f64> {
    consistency_loss_and_grad(student, teacher).map(|(l, _)| l)
}

/// Loss and gradient with respect to the student probabilities; the teacher
/// side is a constant target.
pub fn consistency_loss_and_grad<T: Real>(student: &[Tensor<T>], teacher: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>)> {
    if student.len() != teacher.len() || student.iter().zip(teacher).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Shape("student and teacher outputs differ in shape"));
    }
    let count: usize = student.iter().map(|t| t.len()).sum();
    if count == 0 {
        return Ok((0.0, student.iter().map(|t| Tensor::zeros(t.shape())).collect()));
    }
    let scale = 2.0 / count as f64;
    let mut sum = 0.0f64;
    let grads = student
        .iter()
        .zip(teacher)
        .map(|(a, b)| {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    let d = x.to_f64() - y.to_f64();
                    sum += d * d;
                    T::of(scale * d)
                })
                .collect();
            Tensor::from_vec(a.shape(), data).expect("same shape")
        })
        .collect();
    Ok((sum / count as f64, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbParams {
    /// Noise standard deviation as a fraction of the image's value range.
    pub noise_fraction: f64,
    /// Brightness shift drawn uniformly from `[-shift, shift]`.
    pub shift: f64,
}

impl Default for PerturbParams {
    fn default() -> Self {
        Self { noise_fraction: 0.05, shift: 0.1 }
    }
}

/// Photometric perturbation: per-pixel Gaussian noise plus one global
/// brightness shift per image. Geometry is untouched.
pub fn perturb<T: Real>(images: &[Tensor<T>], params: &PerturbParams, rng: &mut ChaCha8Rng) -> Vec<Tensor<T>> {
    images
        .iter()
        .map(|img| {
            let (lo, hi) = img.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v.to_f64()), hi.max(v.to_f64()))
            });
            let std = if img.is_empty() { 0.0 } else { params.noise_fraction * (hi - lo) };
            let shift = if params.shift > 0.0 { rng.random_range(-params.shift..=params.shift) } else { 0.0 };
            let normal = Normal::new(0.0, std).ok();
            let data = img
                .data()
                .iter()
                .map(|&v| {
                    let noise = match &normal {
                        Some(n) if std > 0.0 => n.sample(rng),
                        _ => 0.0,
                    };
                    if noise == 0.0 && shift == 0.0 {
                        v
                    } else {
                        T::of(v.to_f64() + noise + shift)
                    }
                })
                .collect();
            Tensor::from_vec(img.shape(), data).expect("same shape")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for a flat list of slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every `(param, grad)` slice pair, in a fixed order.
    pub fn step<'a, T: Real + 'a>(&mut self, pairs: impl IntoIterator<Item = (&'a mut [T], &'a [T])>) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - Float::powf(beta1, self.t as f64);
        let bc2 = 1.0 - Float::powf(beta2, self.t as f64);
        for (i, (p, g)) in pairs.into_iter().enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.len()]);
                self.v.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv.to_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                let delta = lr * mhat / (Float::sqrt(vhat) + eps);
                if delta != 0.0 {
                    *pv = T::of(pv.to_f64() - delta);
                }
            }
        }
    }

    /// Adam step on network parameters.
    pub fn step_params<T: Real>(&mut self, params: &mut SplitParams<T>, grads: &ParamSet<T>) -> Result<()> {
        if !params.set.same_shapes(grads) {
            return Err(Error::Shape("gradient shapes do not match parameters"));
        }
        params.update(|set| {
            let pairs = set.tensors_mut().zip(grads.tensors()).map(|(p, g)| (p.data_mut(), g.data()));
            self.step(pairs);
        });
        Ok(())
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut SplitParams<T>, student: &SplitParams<T>, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config("EMA decay must lie in [0, 1]"));
    }
    if teacher.arch != student.arch {
        return Err(Error::Shape("teacher and student architectures differ"));
    }
    let d = T::of(decay);
    let e = T::of(1.0 - decay);
    teacher.update(|set| {
        for (t, s) in set.tensors_mut().zip(student.set.tensors()) {
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                let mixed = d * *tv + e * sv;
                // keep rounding from stepping off the segment
                let (lo, hi) = if *tv <= sv { (*tv, sv) } else { (sv, *tv) };
                *tv = mixed.max(lo).min(hi);
            }
        }
    });
    Ok(())
}

/// Hard labels by per-pixel argmax (lowest class on ties).
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> LabelMask {
    let (c, h, w) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let n = h * w;
    let p = probs.data();
    let values = (0..n)
        .map(|u| {
            let mut best = 0;
            for k in 1..c {
                if p[k * n + u] > p[best * n + u] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, c as u8, values).expect("argmax labels are in range")
}

/// Largest class probability at each pixel.
pub fn max_probability<T: Real>(probs: &Tensor<T>) -> Vec<f64> {
    let (c, n) = (probs.shape()[0], probs.shape()[1] * probs.shape()[2]);
    let p = probs.data();
    (0..n)
        .map(|u| (0..c).map(|k| p[k * n + u].to_f64()).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}
