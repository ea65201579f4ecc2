//! Straightforward double-precision reimplementation of the network and the
//! losses, used as a reference for the optimized code.
#![allow(dead_code)]

use sfcl_core::nn::SplitParams;

pub struct NaiveConv {
    pub cin: usize,
    pub cout: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub struct NaiveNet {
    pub layers: Vec<NaiveConv>,
    pub classes: usize,
}

/// ReLU on/off pattern per hidden layer.
pub type Gates = Vec<Vec<bool>>;

impl NaiveNet {
    pub fn from_params(p: &SplitParams<f64>) -> Self {
        let set = p.set();
        let tensors: Vec<_> = set.tensors().collect();
        let layers = (0..4)
            .map(|i| {
                let w = tensors[2 * i];
                NaiveConv { cout: w.shape()[0], cin: w.shape()[1], w: w.data().to_vec(), b: tensors[2 * i + 1].data().to_vec() }
            })
            .collect();
        Self { layers, classes: p.arch().classes }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter `idx` in the library's flat order (weights then bias, per layer).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.w.len() {
                return &mut l.w[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Class probabilities `[c][h*w]`, flattened. With `gates`, hidden units
    /// use the given on/off pattern instead of their own sign.
    pub fn forward(&self, img: &[f64], h: usize, w: usize, gates: Option<&Gates>) -> (Vec<f64>, Gates) {
        let mut x = img.to_vec();
        let mut seen = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            // replicate-padded copy of the input, then plain shifted sums
            let (ph, pw) = (h + 2, w + 2);
            let mut pad = vec![0.0; l.cin * ph * pw];
            for ci in 0..l.cin {
                for py in 0..ph {
                    for px in 0..pw {
                        let y = (py as isize - 1).clamp(0, h as isize - 1) as usize;
                        let xx = (px as isize - 1).clamp(0, w as isize - 1) as usize;
                        pad[(ci * ph + py) * pw + px] = x[(ci * h + y) * w + xx];
                    }
                }
            }
            let mut z = vec![0.0; l.cout * h * w];
            for o in 0..l.cout {
                let out = &mut z[o * h * w..(o + 1) * h * w];
                out.iter_mut().for_each(|v| *v = l.b[o]);
                for ci in 0..l.cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let k = l.w[((o * l.cin + ci) * 3 + ky) * 3 + kx];
                            for y in 0..h {
                                let src = &pad[(ci * ph + y + ky) * pw + kx..][..w];
                                for (v, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                                    *v += k * s;
                                }
                            }
                        }
                    }
                }
            }
            if li < 3 {
                let g: Vec<bool> = match gates {
                    Some(g) => g[li].clone(),
                    None => z.iter().map(|&v| v > 0.0).collect(),
                };
                for (v, &on) in z.iter_mut().zip(&g) {
                    if !on {
                        *v = 0.0;
                    }
                }
                seen.push(g);
            }
            x = z;
        }
        let n = h * w;
        for u in 0..n {
            let m = (0..self.classes).map(|c| x[c * n + u]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..self.classes).map(|c| (x[c * n + u] - m).exp()).sum();
            for c in 0..self.classes {
                x[c * n + u] = (x[c * n + u] - m).exp() / s;
            }
        }
        (x, seen)
    }
}

pub fn dice(probs: &[f64], label: &[u8], classes: usize) -> f64 {
    let n = label.len();
    let mut total = 0.0;
    for c in 0..classes {
        let p = &probs[c * n..(c + 1) * n];
        let inter: f64 = p.iter().zip(label).filter(|(_, &l)| l as usize == c).map(|(v, _)| v).sum();
        let ps: f64 = p.iter().sum();
        let ys = label.iter().filter(|&&l| l as usize == c).count() as f64;
        total += (2.0 * inter + 1.0) / (ps + ys + 1.0);
    }
    1.0 - total / classes as f64
}

pub fn mse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            s += (p - q) * (p - q);
            n += 1;
        }
    }
    s / n as f64
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}
