//! Round loop of split federated co-learning.
//!
//! Each client trains a student on its own data with a teacher that follows
//! the student by EMA. Per batch, samples whose student and teacher region
//! losses both exceed the global threshold `tau` are unreliable; their labels
//! are corrected where the networks are confident, and they enter the loss
//! with a learned weight. The server merges clients with ratios that favour
//! many low-loss reliable samples and re-estimates `tau` from the clients'
//! loss statistics.
//!
//! All client/server traffic goes through [`crate::wire`] frames.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;

use crate::data::{rng_for, ClientData, CorruptionAudit, Stream};
use crate::error::{Error, Result};
use crate::field::LabelMask;
use crate::metrics::{evaluate, MetricSet};
use crate::nn::{
    argmax_labels, backward_split, consistency_loss_and_grad, dice_loss_and_grad, ema_update, forward_split,
    image_tensor, max_probability, perturb, predict, region_loss_per_sample, Adam, AdamConfig, Arch, DirectLink,
    ForwardCache, Link, ParamSet, PerSampleLosses, PerturbParams, SampleBatch, SplitParams, WireLink,
};
use crate::tensor::{Real, Tensor};
use crate::wire::{FrameReader, FrameWriter};
use crate::WireError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SplitFedCl,
    FedAvg,
    NoCorrection,
    NoConsistency,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SplitFedCl, Mode::FedAvg, Mode::NoCorrection, Mode::NoConsistency];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SplitFedCl => "splitfed_cl",
            Mode::FedAvg => "fedavg",
            Mode::NoCorrection => "no_correction",
            Mode::NoConsistency => "no_consistency",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    fn corrects_labels(self) -> bool {
        matches!(self, Mode::SplitFedCl | Mode::NoConsistency)
    }

    fn uses_consistency(self) -> bool {
        matches!(self, Mode::SplitFedCl | Mode::NoCorrection)
    }
}

/// Linear ramps for the aggregation temperature and the threshold slack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub horizon: usize,
    /// Rounds over which `s(t)` rises from 0 to 1.
    pub warmup_rounds: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { gamma_start: 1.0, gamma_end: 5.0, lambda_start: 3.0, lambda_end: 0.0, horizon: 50, warmup_rounds: 20 }
    }
}

impl Schedule {
    /// `(gamma, lambda)` at round `t`; constant after the horizon.
    pub fn at(&self, t: usize) -> (f64, f64) {
        let f = ramp(t, self.horizon);
        (
            self.gamma_start + (self.gamma_end - self.gamma_start) * f,
            self.lambda_start + (self.lambda_end - self.lambda_start) * f,
        )
    }

    pub fn warmup(&self, t: usize) -> f64 {
        warmup(t, self.warmup_rounds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.warmup_rounds == 0 {
            return Err(Error::Config("schedule horizons must be at least one round"));
        }
        if !(self.gamma_start > 0.0 && self.gamma_end > 0.0) {
            return Err(Error::Config("gamma must stay positive"));
        }
        if !(self.lambda_start >= 0.0 && self.lambda_end >= 0.0) {
            return Err(Error::Config("lambda must stay non-negative"));
        }
        Ok(())
    }
}

fn ramp(t: usize, horizon: usize) -> f64 {
    if t >= horizon {
        1.0
    } else {
        t as f64 / horizon as f64
    }
}

/// `min(1, t / warmup_rounds)`.
pub fn warmup(t: usize, warmup_rounds: usize) -> f64 {
    ramp(t, warmup_rounds.max(1))
}

/// `(gamma, lambda)` under the default schedule.
pub fn schedule_step(round: usize) -> (f64, f64) {
    Schedule::default().at(round)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Shared by network parameters and the two loss-weight logits.
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    pub tau0: f64,
    /// Confidence threshold for label correction.
    pub correction_threshold: f64,
    /// Penalty on the squared logits.
    pub eta: f64,
    pub logit_init: f64,
    pub teacher_decay: f64,
    pub norm_decay: f64,
    pub norm_floor: f64,
    pub perturb: PerturbParams,
    /// Route activations through the wire codec instead of handing them over.
    pub wire_activations: bool,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SplitFedCl,
            local_epochs: 5,
            batch_size: 8,
            optimizer: AdamConfig::default(),
            schedule: Schedule::default(),
            tau0: 10.0,
            correction_threshold: 0.9,
            eta: 5e-4,
            logit_init: -10.0,
            teacher_decay: 0.99,
            norm_decay: 0.9,
            norm_floor: 1e-8,
            perturb: PerturbParams::default(),
            wire_activations: true,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("local_epochs and batch_size must be positive"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.optimizer;
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0)
        {
            return Err(Error::Config("invalid optimizer settings"));
        }
        if !(self.tau0 >= 0.0) {
            return Err(Error::Config("tau0 must be non-negative"));
        }
        if !(self.correction_threshold > 0.0 && self.correction_threshold <= 1.0) {
            return Err(Error::Config("correction threshold must lie in (0, 1]"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) || !self.logit_init.is_finite() {
            return Err(Error::Config("invalid logit settings"));
        }
        if !(0.0..=1.0).contains(&self.teacher_decay) || !(0.0..1.0).contains(&self.norm_decay) {
            return Err(Error::Config("EMA decays must lie in [0, 1)"));
        }
        if !(self.norm_floor > 0.0) {
            return Err(Error::Config("normalizer floor must be positive"));
        }
        if !(self.perturb.noise_fraction >= 0.0 && self.perturb.shift >= 0.0) {
            return Err(Error::Config("perturbation magnitudes must be non-negative"));
        }
        Ok(())
    }
}

/// Sample indices of one batch split by the reliability rule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub reliable: Vec<usize>,
    pub unreliable: Vec<usize>,
    /// Student and teacher disagree about `tau`. Trained as reliable but
    /// left out of the reliability statistics.
    pub undecided: Vec<usize>,
}

impl Partition {
    pub fn all_reliable(n: usize) -> Self {
        Self { reliable: (0..n).collect(), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.reliable.len() + self.unreliable.len() + self.undecided.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn roles(&self) -> Vec<Role> {
        let mut roles = vec![Role::Reliable; self.len()];
        for &k in &self.unreliable {
            roles[k] = Role::Unreliable;
        }
        roles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Reliable,
    Unreliable,
}

pub fn split_reliable(student: &PerSampleLosses, teacher: &PerSampleLosses, tau: f64) -> Result<Partition> {
    if student.values.len() != teacher.values.len() {
        return Err(Error::Shape("student and teacher losses differ in length"));
    }
    let mut out = Partition::default();
    for (k, (&l, &lt)) in student.values.iter().zip(&teacher.values).enumerate() {
        if l <= tau && lt <= tau {
            out.reliable.push(k);
        } else if l > tau && lt > tau {
            out.unreliable.push(k);
        } else {
            out.undecided.push(k);
        }
    }
    Ok(out)
}

/// Relabels pixels where student, teacher and label are not unanimous:
/// a confident student wins, then a confident teacher, else the label stays.
pub fn correct_labels<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    label: &LabelMask,
    threshold: f64,
) -> Result<LabelMask> {
    let shape = [label.classes() as usize, label.height(), label.width()];
    if student.shape() != shape || teacher.shape() != shape {
        return Err(Error::Shape("probabilities and label differ in shape"));
    }
    let p = argmax_labels(student);
    let pt = argmax_labels(teacher);
    let conf = max_probability(student);
    let conf_t = max_probability(teacher);
    let values = label
        .values()
        .iter()
        .enumerate()
        .map(|(u, &y)| {
            let (a, b) = (p.values()[u], pt.values()[u]);
            if a == b && b == y {
                y
            } else if conf[u] > threshold {
                a
            } else if conf_t[u] > threshold {
                b
            } else {
                y
            }
        })
        .collect();
    LabelMask::new(label.height(), label.width(), label.classes(), values)
}

pub fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + Float::exp(-u))
}

/// Loss-term weights `w = sigmoid(u) s(t)`; the reliable term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub u_un: f64,
    pub u_cons: f64,
    pub warmup: f64,
    pub unreliable_on: bool,
    pub consistency_on: bool,
}

impl LossWeights {
    pub fn new(u_un: f64, u_cons: f64, warmup: f64) -> Self {
        Self { u_un, u_cons, warmup, unreliable_on: true, consistency_on: true }
    }

    pub fn w_re(&self) -> f64 {
        1.0
    }

    pub fn w_un(&self) -> f64 {
        if self.unreliable_on {
            sigmoid(self.u_un) * self.warmup
        } else {
            0.0
        }
    }

    pub fn w_cons(&self) -> f64 {
        if self.consistency_on {
            sigmoid(self.u_cons) * self.warmup
        } else {
            0.0
        }
    }
}

/// Unnormalized loss terms of one batch. `None` marks an absent term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RawTerms {
    pub reliable: Option<f64>,
    pub unreliable: Option<f64>,
    pub consistency: Option<f64>,
}

/// Divisors applied to each loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScales {
    pub reliable: f64,
    pub unreliable: f64,
    pub consistency: f64,
}

impl LossScales {
    pub const UNIT: Self = Self { reliable: 1.0, unreliable: 1.0, consistency: 1.0 };
}

/// Running EMA of each term's magnitude. The first observation seeds the
/// average; absent terms leave it unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossNorms {
    pub decay: f64,
    pub floor: f64,
    reliable: Option<f64>,
    unreliable: Option<f64>,
    consistency: Option<f64>,
}

impl LossNorms {
    pub fn new(decay: f64, floor: f64) -> Self {
        Self { decay, floor, reliable: None, unreliable: None, consistency: None }
    }

    /// Folds in this batch's terms and returns the scales to divide by.
    pub fn observe(&mut self, raw: &RawTerms) -> LossScales {
        let (d, floor) = (self.decay, self.floor);
        let step = |slot: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *slot = Some(match *slot {
                    Some(s) => d * s + (1.0 - d) * v,
                    None => v,
                });
            }
            slot.unwrap_or(1.0).max(floor)
        };
        LossScales {
            reliable: step(&mut self.reliable, raw.reliable),
            unreliable: step(&mut self.unreliable, raw.unreliable),
            consistency: step(&mut self.consistency, raw.consistency),
        }
    }
}

/// Student outputs on the perturbed batch and the teacher's targets.
pub struct ConsistencyInputs<'a, T> {
    pub probs: &'a [Tensor<T>],
    pub cache: &'a ForwardCache<T>,
    pub teacher: &'a [Tensor<T>],
}

/// One batch as seen by the loss: student outputs on the clean inputs, the
/// per-sample targets (corrected for unreliable samples) and the partition.
pub struct LossInputs<'a, T> {
    pub probs: &'a [Tensor<T>],
    pub cache: &'a ForwardCache<T>,
    pub targets: &'a [LabelMask],
    pub partition: &'a Partition,
    pub consistency: Option<ConsistencyInputs<'a, T>>,
}

impl<T: Real> LossInputs<'_, T> {
    fn check(&self) -> Result<()> {
        let n = self.probs.len();
        if self.targets.len() != n || self.partition.len() != n || self.cache.len() != n {
            return Err(Error::Shape("loss inputs differ in batch size"));
        }
        let mut seen = vec![false; n];
        for &k in self.partition.reliable.iter().chain(&self.partition.unreliable).chain(&self.partition.undecided) {
            if k >= n || core::mem::replace(&mut seen[k], true) {
                return Err(Error::Shape("partition is not a split of the batch"));
            }
        }
        if let Some(c) = &self.consistency {
            if c.probs.len() != n || c.teacher.len() != n || c.cache.len() != n {
                return Err(Error::Shape("consistency inputs differ in batch size"));
            }
        }
        Ok(())
    }

    fn group(&self, role: Role) -> Vec<usize> {
        let roles = self.partition.roles();
        (0..roles.len()).filter(|&k| roles[k] == role).collect()
    }
}

fn mean_dice<T: Real>(probs: &[Tensor<T>], targets: &[LabelMask], idx: &[usize]) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for &k in idx {
        sum += dice_loss_and_grad(&probs[k], &targets[k])?.0;
    }
    Ok(Some(sum / idx.len() as f64))
}

/// The raw terms: mean Dice over reliable (and undecided) samples, mean
/// Dice of unreliable samples against their corrected targets, and the
/// student/teacher mean squared difference.
pub fn loss_terms<T: Real>(inputs: &LossInputs<'_, T>) -> Result<RawTerms> {
    inputs.check()?;
    let reliable = mean_dice(inputs.probs, inputs.targets, &inputs.group(Role::Reliable))?;
    let unreliable = mean_dice(inputs.probs, inputs.targets, &inputs.group(Role::Unreliable))?;
    let consistency = match &inputs.consistency {
        Some(c) => Some(consistency_loss_and_grad(c.probs, c.teacher)?.0),
        None => None,
    };
    Ok(RawTerms { reliable, unreliable, consistency })
}

#[derive(Debug, Clone)]
pub struct TotalLoss<T> {
    pub value: f64,
    pub raw: RawTerms,
    pub grads: ParamSet<T>,
    pub d_u_un: f64,
    pub d_u_cons: f64,
}

/// `L = w_re L_re/s_re + w_un L_un/s_un + w_cons L_C/s_C + eta (u_un^2 + u_cons^2)`
/// with the scales held constant, and its gradient with respect to the
/// network parameters and both logits.
pub fn compute_total_loss<T: Real, L: Link<T>>(
    params: &SplitParams<T>,
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    scales: &LossScales,
    eta: f64,
    link: &mut L,
) -> Result<TotalLoss<T>> {
    inputs.check()?;
    if inputs.partition.reliable.is_empty() && inputs.partition.unreliable.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let reliable = inputs.group(Role::Reliable);
    let unreliable = inputs.group(Role::Unreliable);
    let (w_re, w_un, w_cons) = (weights.w_re(), weights.w_un(), weights.w_cons());

    let mut dprobs: Vec<Tensor<T>> = inputs.probs.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut value = eta * (weights.u_un * weights.u_un + weights.u_cons * weights.u_cons);
    let mut raw = RawTerms::default();
    let mut d_u_un = 2.0 * eta * weights.u_un;
    let mut d_u_cons = 2.0 * eta * weights.u_cons;

    let dice_group = |idx: &[usize], coeff: f64, dprobs: &mut [Tensor<T>]| -> Result<Option<f64>> {
        if idx.is_empty() {
            return Ok(None);
        }
        let per = coeff / idx.len() as f64;
        let mut sum = 0.0;
        for &k in idx {
            let (l, g) = dice_loss_and_grad(&inputs.probs[k], &inputs.targets[k])?;
            sum += l;
            let scale = T::of(per);
            for (d, &gv) in dprobs[k].data_mut().iter_mut().zip(g.data()) {
                *d = gv * scale;
            }
        }
        Ok(Some(sum / idx.len() as f64))
    };

    raw.reliable = dice_group(&reliable, w_re / scales.reliable, &mut dprobs)?;
    if let Some(l) = raw.reliable {
        value += w_re * l / scales.reliable;
    }
    raw.unreliable = dice_group(&unreliable, w_un / scales.unreliable, &mut dprobs)?;
    if let Some(l) = raw.unreliable {
        value += w_un * l / scales.unreliable;
        if weights.unreliable_on {
            let s = sigmoid(weights.u_un);
            d_u_un += l / scales.unreliable * s * (1.0 - s) * weights.warmup;
        }
    }
    let mut grads = backward_split(params, inputs.cache, inputs.probs, &dprobs, link)?;

    if let Some(c) = &inputs.consistency {
        let (l, mut g) = consistency_loss_and_grad(c.probs, c.teacher)?;
        raw.consistency = Some(l);
        value += w_cons * l / scales.consistency;
        if weights.consistency_on {
            let s = sigmoid(weights.u_cons);
            d_u_cons += l / scales.consistency * s * (1.0 - s) * weights.warmup;
        }
        if w_cons != 0.0 {
            let k = T::of(w_cons / scales.consistency);
            for t in &mut g {
                t.data_mut().iter_mut().for_each(|v| *v *= k);
            }
            grads.add_assign(&backward_split(params, c.cache, c.probs, &g, link)?);
        }
    }
    Ok(TotalLoss { value, raw, grads, d_u_un, d_u_cons })
}

/// Round-level inputs a client receives from the server.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundContext {
    pub round: usize,
    pub tau: f64,
    pub warmup: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState<T> {
    pub client_id: usize,
    pub train: SampleBatch<T>,
    /// Ground truth about injected noise; for reports only.
    pub audit: CorruptionAudit,
    pub student: SplitParams<T>,
    pub u_un: f64,
    pub u_cons: f64,
    pub optimizer: Adam,
    pub logit_optimizer: Adam,
    pub norms: LossNorms,
    pub last: RoundStats,
}

/// What the final local epoch of the latest round saw, per training sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundStats {
    pub losses: Vec<f64>,
    pub unreliable: Vec<bool>,
    /// Corrected targets of samples that were unreliable, by sample index.
    pub corrections: Vec<(usize, LabelMask)>,
    /// Batches whose partition had to be replaced by "all reliable".
    pub empty_batch_recoveries: usize,
    pub activation_bytes: u64,
}

impl<T: Real> ClientState<T> {
    pub fn new(
        client_id: usize,
        train: SampleBatch<T>,
        audit: CorruptionAudit,
        init: &SplitParams<T>,
        config: &ProtocolConfig,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self {
            client_id,
            train,
            audit,
            student: init.clone(),
            u_un: config.logit_init,
            u_cons: config.logit_init,
            optimizer: Adam::new(config.optimizer),
            logit_optimizer: Adam::new(config.optimizer),
            norms: LossNorms::new(config.norm_decay, config.norm_floor),
            last: RoundStats::default(),
        })
    }

    pub fn from_data(data: &ClientData, init: &SplitParams<T>, config: &ProtocolConfig) -> Result<Self> {
        let train = SampleBatch::new(
            data.samples.iter().map(|s| image_tensor(&s.image)).collect(),
            data.samples.iter().map(|s| s.label.clone()).collect(),
            data.samples.iter().map(|s| s.id).collect(),
        )?;
        Self::new(data.client_id, train, data.audit.clone(), init, config)
    }
}

#[derive(Debug, Clone)]
pub struct ClientSummary<T> {
    pub client_id: usize,
    pub total_samples: usize,
    /// Samples of the final epoch that were reliable under both networks.
    pub d_re: usize,
    /// Mean student loss over those samples; `mu` when there are none.
    pub mean_reliable_loss: f64,
    pub mu: f64,
    pub sigma: f64,
    pub unreliable: usize,
    pub params: SplitParams<T>,
    pub u_un: f64,
    pub u_cons: f64,
}

impl<T: Real> ClientSummary<T> {
    pub fn detected_noise_ratio(&self) -> f64 {
        self.unreliable as f64 / self.total_samples as f64
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = FrameWriter::new();
        for v in [
            self.client_id as f64,
            self.total_samples as f64,
            self.d_re as f64,
            self.mean_reliable_loss,
            self.mu,
            self.sigma,
            self.unreliable as f64,
            self.u_un,
            self.u_cons,
        ] {
            w.scalar(v)?;
        }
        write_params(&mut w, &self.params)?;
        Ok(w.finish()?)
    }

    pub fn decode(bytes: &[u8], arch: Arch) -> Result<Self> {
        let mut r = FrameReader::new(bytes)?;
        let client_id = read_count(&mut r)?;
        let total_samples = read_count(&mut r)?;
        let d_re = read_count(&mut r)?;
        let mean_reliable_loss = r.scalar()?;
        let mu = r.scalar()?;
        let sigma = r.scalar()?;
        let unreliable = read_count(&mut r)?;
        let u_un = r.scalar()?;
        let u_cons = r.scalar()?;
        let params = read_params(&mut r, arch)?;
        r.finish()?;
        if total_samples == 0 || d_re + unreliable > total_samples || !(sigma >= 0.0) {
            return Err(WireError::Malformed("inconsistent client summary").into());
        }
        Ok(Self { client_id, total_samples, d_re, mean_reliable_loss, mu, sigma, unreliable, params, u_un, u_cons })
    }
}

fn read_count(r: &mut FrameReader<'_>) -> Result<usize> {
    let v = r.scalar()?;
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(WireError::Malformed("expected a count").into())
    }
}

fn write_params<T: Real>(w: &mut FrameWriter, p: &SplitParams<T>) -> Result<()> {
    for t in p.set().tensors() {
        w.tensor(t)?;
    }
    Ok(())
}

fn read_params<T: Real>(r: &mut FrameReader<'_>, arch: Arch) -> Result<SplitParams<T>> {
    let mut set = ParamSet::<T>::zeros(&arch);
    for t in set.tensors_mut() {
        let got = r.tensor::<T>()?;
        if got.shape() != t.shape() {
            return Err(WireError::Malformed("parameter shape mismatch").into());
        }
        *t = got;
    }
    SplitParams::from_set(arch, set)
}

/// Server-to-client message at the start of a round.
#[derive(Debug, Clone)]
pub struct Broadcast<T> {
    pub context: RoundContext,
    pub u_un: f64,
    pub u_cons: f64,
    pub teacher: SplitParams<T>,
    pub student: SplitParams<T>,
}

impl<T: Real> Broadcast<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = FrameWriter::new();
        for v in [self.context.round as f64, self.context.tau, self.context.warmup, self.u_un, self.u_cons] {
            w.scalar(v)?;
        }
        write_params(&mut w, &self.teacher)?;
        write_params(&mut w, &self.student)?;
        Ok(w.finish()?)
    }

    pub fn decode(bytes: &[u8], arch: Arch) -> Result<Self> {
        let mut r = FrameReader::new(bytes)?;
        let round = read_count(&mut r)?;
        let tau = r.scalar()?;
        let warmup = r.scalar()?;
        let u_un = r.scalar()?;
        let u_cons = r.scalar()?;
        let teacher = read_params(&mut r, arch)?;
        let student = read_params(&mut r, arch)?;
        r.finish()?;
        if !(tau >= 0.0) || !(0.0..=1.0).contains(&warmup) {
            return Err(WireError::Malformed("round context out of range").into());
        }
        Ok(Self { context: RoundContext { round, tau, warmup }, u_un, u_cons, teacher, student })
    }
}

fn clone_images<T: Real>(train: &SampleBatch<T>, idx: &[usize]) -> (Vec<Tensor<T>>, Vec<LabelMask>) {
    (idx.iter().map(|&k| train.images[k].clone()).collect(), idx.iter().map(|&k| train.labels[k].clone()).collect())
}

fn rng_index(round: usize, client: usize, step: usize) -> u64 {
    ((round as u64) << 36) | ((client as u64 & 0xfff) << 24) | (step as u64 & 0xff_ffff)
}

/// Local epochs on one client starting from its current student. Returns
/// the statistics of the final epoch.
pub fn local_train<T: Real>(
    client: &mut ClientState<T>,
    teacher: &SplitParams<T>,
    ctx: RoundContext,
    config: &ProtocolConfig,
) -> Result<ClientSummary<T>> {
    let n = client.train.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let mode = config.mode;
    let mut teacher = teacher.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = RoundStats { losses: vec![0.0; n], unreliable: vec![false; n], ..RoundStats::default() };
    let mut reliable_flags = vec![false; n];
    let mut wire = WireLink::default();
    let mut step = 0usize;

    for epoch in 0..config.local_epochs {
        let last_epoch = epoch + 1 == config.local_epochs;
        order.shuffle(&mut rng_for(config.seed, Stream::Shuffle, rng_index(ctx.round, client.client_id, epoch)));
        for chunk in order.chunks(config.batch_size) {
            let (images, labels) = clone_images(&client.train, chunk);
            let (probs, cache) = if config.wire_activations {
                forward_split(&client.student, &images, &mut wire)?
            } else {
                forward_split(&client.student, &images, &mut DirectLink)?
            };
            let losses = region_loss_per_sample(&probs, &labels)?;

            let mut weights = LossWeights::new(client.u_un, client.u_cons, ctx.warmup);
            weights.consistency_on = mode.uses_consistency();
            let (partition, targets, teacher_probs) = if mode == Mode::FedAvg {
                weights.unreliable_on = false;
                (Partition::all_reliable(chunk.len()), labels, None)
            } else {
                let tp = predict(&teacher, &images)?;
                let tl = region_loss_per_sample(&tp, &labels)?;
                let partition = split_reliable(&losses, &tl, ctx.tau)?;
                let mut targets = labels;
                if mode.corrects_labels() {
                    for &k in &partition.unreliable {
                        targets[k] = correct_labels(&probs[k], &tp[k], &targets[k], config.correction_threshold)?;
                    }
                }
                (partition, targets, Some(tp))
            };

            let perturbed = match &teacher_probs {
                Some(_) if weights.w_cons() > 0.0 => {
                    let mut rng =
                        rng_for(config.seed, Stream::Perturb, rng_index(ctx.round, client.client_id, step));
                    let x2 = perturb(&images, &config.perturb, &mut rng);
                    Some(if config.wire_activations {
                        forward_split(&client.student, &x2, &mut wire)?
                    } else {
                        forward_split(&client.student, &x2, &mut DirectLink)?
                    })
                }
                _ => None,
            };

            let mut partition = partition;
            let total = loop {
                let inputs = LossInputs {
                    probs: &probs,
                    cache: &cache,
                    targets: &targets,
                    partition: &partition,
                    consistency: match (&perturbed, &teacher_probs) {
                        (Some((p2, c2)), Some(tp)) => Some(ConsistencyInputs { probs: p2, cache: c2, teacher: tp }),
                        _ => None,
                    },
                };
                let scales = if mode == Mode::FedAvg {
                    LossScales::UNIT
                } else {
                    let raw = loss_terms(&inputs)?;
                    let mut norms = client.norms;
                    let scales = norms.observe(&raw);
                    if !(partition.reliable.is_empty() && partition.unreliable.is_empty()) {
                        client.norms = norms;
                    }
                    scales
                };
                let result = if config.wire_activations {
                    compute_total_loss(&client.student, &inputs, &weights, &scales, config.eta, &mut wire)
                } else {
                    compute_total_loss(&client.student, &inputs, &weights, &scales, config.eta, &mut DirectLink)
                };
                match result {
                    Err(Error::EmptyBatch) if partition.is_empty() => return Err(Error::EmptyBatch),
                    Err(Error::EmptyBatch) => {
                        log::warn!(
                            "client {} round {}: no reliable or unreliable sample in batch, training it as reliable",
                            client.client_id,
                            ctx.round
                        );
                        stats.empty_batch_recoveries += 1;
                        partition = Partition::all_reliable(chunk.len());
                    }
                    other => break other?,
                }
            };

            client.optimizer.step_params(&mut client.student, &total.grads)?;
            if mode != Mode::FedAvg {
                let mut logits = [client.u_un, client.u_cons];
                let grads = [
                    if weights.unreliable_on { total.d_u_un } else { 0.0 },
                    if weights.consistency_on { total.d_u_cons } else { 0.0 },
                ];
                client.logit_optimizer.step([(&mut logits[..], &grads[..])]);
                if weights.unreliable_on {
                    client.u_un = logits[0];
                }
                if weights.consistency_on {
                    client.u_cons = logits[1];
                }
                ema_update(&mut teacher, &client.student, config.teacher_decay)?;
            }

            if last_epoch {
                for (j, &k) in chunk.iter().enumerate() {
                    stats.losses[k] = losses.values[j];
                }
                for &j in &partition.reliable {
                    reliable_flags[chunk[j]] = true;
                }
                for &j in &partition.unreliable {
                    stats.unreliable[chunk[j]] = true;
                    stats.corrections.push((chunk[j], targets[j].clone()));
                }
            }
            step += 1;
        }
    }
    stats.corrections.sort_by_key(|(k, _)| *k);
    stats.activation_bytes = wire.bytes;

    let mu = stats.losses.iter().sum::<f64>() / n as f64;
    let var = stats.losses.iter().map(|l| (l - mu) * (l - mu)).sum::<f64>() / n as f64;
    let d_re = reliable_flags.iter().filter(|&&r| r).count();
    let mean_reliable_loss = if d_re == 0 {
        mu
    } else {
        stats.losses.iter().zip(&reliable_flags).filter(|(_, &r)| r).map(|(l, _)| l).sum::<f64>() / d_re as f64
    };
    let unreliable = stats.unreliable.iter().filter(|&&u| u).count();
    client.last = stats;
    Ok(ClientSummary {
        client_id: client.client_id,
        total_samples: n,
        d_re,
        mean_reliable_loss,
        mu,
        sigma: Float::sqrt(var),
        unreliable,
        params: client.student.clone(),
        u_un: client.u_un,
        u_cons: client.u_cons,
    })
}

/// Client side of one round: decode the broadcast, train, encode the reply.
pub fn client_round<T: Real>(client: &mut ClientState<T>, broadcast: &[u8], config: &ProtocolConfig) -> Result<Vec<u8>> {
    let arch = *client.student.arch();
    let msg = Broadcast::<T>::decode(broadcast, arch)?;
    client.student = msg.student;
    client.u_un = msg.u_un;
    client.u_cons = msg.u_cons;
    local_train(client, &msg.teacher, msg.context, config)?.encode()
}

/// How client parameters are weighted at aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Reliable-sample counts times `softmax(-gamma L)`.
    Reliability { gamma: f64 },
    /// Total sample counts.
    SampleCount,
}

/// `(r, q)` for per-client reliable counts, reliable losses and totals.
/// Falls back to sample counts for `r` when no client has reliable samples.
pub fn contribution_ratios(d_re: &[usize], losses: &[f64], totals: &[usize], gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let lmin = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = losses.iter().map(|&l| Float::exp(-gamma * (l - lmin))).collect();
    let z: f64 = e.iter().sum();
    let q: Vec<f64> = e.iter().map(|v| v / z).collect();
    let dsum: usize = d_re.iter().sum();
    if dsum == 0 {
        return (count_weights(totals), q);
    }
    let qd: Vec<f64> = q.iter().zip(d_re).map(|(q, &d)| q * (d as f64 / dsum as f64)).collect();
    let norm: f64 = qd.iter().sum();
    (qd.iter().map(|v| v / norm).collect(), q)
}

fn count_weights(totals: &[usize]) -> Vec<f64> {
    let m: usize = totals.iter().sum();
    totals.iter().map(|&t| t as f64 / m as f64).collect()
}

#[derive(Debug, Clone)]
pub struct Aggregate<T> {
    pub params: SplitParams<T>,
    pub u_un: f64,
    pub u_cons: f64,
    pub r: Vec<f64>,
    pub q: Vec<f64>,
}

/// `sum_i r_i theta_i` per parameter, accumulated in `f64` and kept inside
/// the clients' elementwise range.
pub fn weighted_average<T: Real>(params: &[&SplitParams<T>], r: &[f64]) -> Result<SplitParams<T>> {
    let first = *params.first().ok_or(Error::EmptyBatch)?;
    if params.len() != r.len() || params.iter().any(|p| p.arch() != first.arch()) {
        return Err(Error::Shape("clients disagree on the architecture"));
    }
    let mut set = first.set().clone();
    let sources: Vec<Vec<&Tensor<T>>> = params.iter().map(|p| p.set().tensors().collect()).collect();
    for (ti, out) in set.tensors_mut().enumerate() {
        for (j, o) in out.data_mut().iter_mut().enumerate() {
            let mut acc = 0.0f64;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (src, &ri) in sources.iter().zip(r) {
                let v = src[ti].data()[j].to_f64();
                acc += ri * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            *o = T::of(acc.max(lo).min(hi));
        }
    }
    SplitParams::from_set(*first.arch(), set)
}

fn weighted_scalar(values: impl Iterator<Item = f64> + Clone, r: &[f64]) -> f64 {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.clone().fold(f64::NEG_INFINITY, f64::max);
    values.zip(r).map(|(v, ri)| v * ri).sum::<f64>().max(lo).min(hi)
}

pub fn aggregate<T: Real>(summaries: &[ClientSummary<T>], weighting: Weighting) -> Result<Aggregate<T>> {
    if summaries.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let totals: Vec<usize> = summaries.iter().map(|s| s.total_samples).collect();
    let (r, q) = match weighting {
        Weighting::SampleCount => (count_weights(&totals), count_weights(&totals)),
        Weighting::Reliability { gamma } => {
            let d: Vec<usize> = summaries.iter().map(|s| s.d_re).collect();
            let l: Vec<f64> = summaries.iter().map(|s| if s.d_re == 0 { s.mu } else { s.mean_reliable_loss }).collect();
            contribution_ratios(&d, &l, &totals, gamma)
        }
    };
    let refs: Vec<&SplitParams<T>> = summaries.iter().map(|s| &s.params).collect();
    Ok(Aggregate {
        params: weighted_average(&refs, &r)?,
        u_un: weighted_scalar(summaries.iter().map(|s| s.u_un), &r),
        u_cons: weighted_scalar(summaries.iter().map(|s| s.u_cons), &r),
        r,
        q,
    })
}

/// `tau = sum_i q_i (mu_i + lambda sigma_i)`.
pub fn update_tau(mu: &[f64], sigma: &[f64], q: &[f64], lambda: f64) -> f64 {
    mu.iter().zip(sigma).zip(q).map(|((m, s), q)| q * (m + lambda * s)).sum()
}

#[derive(Debug, Clone)]
pub struct ServerState<T> {
    pub teacher: SplitParams<T>,
    pub global_student_init: SplitParams<T>,
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub round_index: usize,
    pub u_un: f64,
    pub u_cons: f64,
}

impl<T: Real> ServerState<T> {
    pub fn new(init: SplitParams<T>, config: &ProtocolConfig) -> Self {
        let (gamma, lambda) = config.schedule.at(0);
        let tau = if config.mode == Mode::FedAvg { f64::INFINITY } else { config.tau0 };
        Self {
            teacher: init.clone(),
            global_student_init: init,
            tau,
            lambda,
            gamma,
            round_index: 0,
            u_un: config.logit_init,
            u_cons: config.logit_init,
        }
    }
}

/// Runs the clients' share of a round. Implementations may use threads;
/// replies must come back in client order.
pub trait ClientExecutor<T: Real> {
    fn execute(&self, clients: &mut [ClientState<T>], broadcast: &[u8], config: &ProtocolConfig) -> Vec<Result<Vec<u8>>>;
}

/// One client after another on the calling thread.
#[derive(Debug, Default, Clone, Copy)]
pub struct Sequential;

impl<T: Real> ClientExecutor<T> for Sequential {
    fn execute(&self, clients: &mut [ClientState<T>], broadcast: &[u8], config: &ProtocolConfig) -> Vec<Result<Vec<u8>>> {
        clients.iter_mut().map(|c| client_round(c, broadcast, config)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRow {
    pub client_id: usize,
    pub total_samples: usize,
    pub r: f64,
    pub q: f64,
    pub d_re: usize,
    pub mean_reliable_loss: f64,
    pub mu: f64,
    pub sigma: f64,
    pub detected_noise_ratio: f64,
    pub u_un: f64,
    pub u_cons: f64,
}

/// Statistics of one finished round. `tau`, `gamma`, `lambda` and
/// `warmup` are the values the round ran with; the logits are the merged ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub warmup: f64,
    pub next_tau: f64,
    pub u_un: f64,
    pub u_cons: f64,
    pub clients: Vec<ClientRow>,
    pub test: Option<MetricSet>,
    pub broadcast_bytes: usize,
    pub reply_bytes: usize,
}

impl RoundReport {
    pub fn w_un(&self) -> f64 {
        sigmoid(self.u_un) * self.warmup
    }

    pub fn w_cons(&self) -> f64 {
        sigmoid(self.u_cons) * self.warmup
    }
}

/// One global round: broadcast, local training, aggregation, threshold and
/// schedule update, optional evaluation of the new global model.
pub fn run_round<T: Real, E: ClientExecutor<T>>(
    server: &mut ServerState<T>,
    clients: &mut [ClientState<T>],
    config: &ProtocolConfig,
    executor: &E,
    test: Option<&SampleBatch<T>>,
) -> Result<RoundReport> {
    if clients.is_empty() {
        return Err(Error::Config("a round needs at least one client"));
    }
    let arch = *server.teacher.arch();
    let round = server.round_index;
    let warmup = config.schedule.warmup(round);
    let context = RoundContext { round, tau: server.tau, warmup };
    let broadcast = Broadcast {
        context,
        u_un: server.u_un,
        u_cons: server.u_cons,
        teacher: server.teacher.clone(),
        student: server.global_student_init.clone(),
    }
    .encode()?;

    let replies = executor.execute(clients, &broadcast, config);
    if replies.len() != clients.len() {
        return Err(Error::Config("executor returned the wrong number of replies"));
    }
    let mut summaries = Vec::with_capacity(replies.len());
    let mut reply_bytes = 0;
    for (reply, client) in replies.into_iter().zip(clients.iter()) {
        let bytes = reply?;
        reply_bytes += bytes.len();
        let s = ClientSummary::<T>::decode(&bytes, arch)?;
        if s.client_id != client.client_id {
            return Err(WireError::Malformed("reply from an unexpected client").into());
        }
        summaries.push(s);
    }

    let weighting =
        if config.mode == Mode::FedAvg { Weighting::SampleCount } else { Weighting::Reliability { gamma: server.gamma } };
    let agg = aggregate(&summaries, weighting)?;
    let mu: Vec<f64> = summaries.iter().map(|s| s.mu).collect();
    let sigma: Vec<f64> = summaries.iter().map(|s| s.sigma).collect();
    let next_tau = if config.mode == Mode::FedAvg { f64::INFINITY } else { update_tau(&mu, &sigma, &agg.q, server.lambda) };

    let clients_rows = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| ClientRow {
            client_id: s.client_id,
            total_samples: s.total_samples,
            r: agg.r[i],
            q: agg.q[i],
            d_re: s.d_re,
            mean_reliable_loss: s.mean_reliable_loss,
            mu: s.mu,
            sigma: s.sigma,
            detected_noise_ratio: s.detected_noise_ratio(),
            u_un: s.u_un,
            u_cons: s.u_cons,
        })
        .collect();
    let report_gamma = server.gamma;
    let report_lambda = server.lambda;

    server.teacher = agg.params.clone();
    server.global_student_init = agg.params;
    server.u_un = agg.u_un;
    server.u_cons = agg.u_cons;
    server.tau = next_tau;
    server.round_index += 1;
    (server.gamma, server.lambda) = config.schedule.at(server.round_index);

    let test = match test {
        Some(t) => Some(evaluate(&server.teacher, &t.images, &t.labels)?),
        None => None,
    };
    Ok(RoundReport {
        round,
        tau: context.tau,
        gamma: report_gamma,
        lambda: report_lambda,
        warmup,
        next_tau,
        u_un: server.u_un,
        u_cons: server.u_cons,
        clients: clients_rows,
        test,
        broadcast_bytes: broadcast.len(),
        reply_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(v: &[f64]) -> PerSampleLosses {
        PerSampleLosses { values: v.to_vec() }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_step(0), (1.0, 3.0));
        assert_eq!(schedule_step(25), (3.0, 1.5));
        assert_eq!(schedule_step(50), (5.0, 0.0));
        assert_eq!(schedule_step(100), (5.0, 0.0));
        assert_eq!(warmup(0, 20), 0.0);
        assert_eq!(warmup(10, 20), 0.5);
        assert_eq!(warmup(20, 20), 1.0);
        assert_eq!(warmup(35, 20), 1.0);
    }

    #[test]
    fn split_examples() {
        let p = split_reliable(&losses(&[0.3, 0.99, 1.0]), &losses(&[0.1, 0.5, 0.0]), 10.0).unwrap();
        assert_eq!(p, Partition::all_reliable(3));
        let p = split_reliable(&losses(&[0.2, 0.9]), &losses(&[0.1, 0.95]), 0.5).unwrap();
        assert_eq!((p.reliable, p.unreliable, p.undecided), (vec![0], vec![1], vec![]));
        let p = split_reliable(&losses(&[0.2]), &losses(&[0.9]), 0.5).unwrap();
        assert_eq!(p.undecided, vec![0]);
        assert!(split_reliable(&losses(&[0.2]), &losses(&[]), 0.5).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = LossWeights::new(-10.0, -10.0, 1.0);
        assert!((w.w_un() - 4.5397868702434395e-5).abs() < 1e-15);
        assert_eq!(LossWeights::new(0.0, 0.0, 1.0).w_un(), 0.5);
        assert!((LossWeights::new(0.0, -1.77, 1.0).w_cons() - 0.1455).abs() < 5e-5);
        assert_eq!(LossWeights::new(3.0, 3.0, 0.0).w_cons(), 0.0);
    }

    #[test]
    fn ratio_examples() {
        let (r, q) = contribution_ratios(&[1, 1], &[0.1, 0.3], &[4, 4], 5.0);
        assert!((q[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((r[0] - q[0]).abs() < 1e-12 && (r[1] - q[1]).abs() < 1e-12);
        let (r, q) = contribution_ratios(&[3, 3, 3, 3], &[0.2; 4], &[5; 4], 2.0);
        assert!(q.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(r.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let (r, _) = contribution_ratios(&[0, 0], &[0.1, 0.2], &[10, 30], 1.0);
        assert_eq!(r, vec![0.25, 0.75]);
        let (r, _) = contribution_ratios(&[0, 5, 5], &[0.01, 0.2, 0.4], &[5; 3], 500.0);
        assert!(r[1] > 0.999);
    }

    #[test]
    fn tau_examples() {
        assert!((update_tau(&[0.4], &[0.1], &[1.0], 3.0) - 0.7).abs() < 1e-15);
        assert_eq!(update_tau(&[0.4, 0.2], &[0.1, 0.3], &[0.5, 0.5], 0.0), 0.30000000000000004);
        assert_eq!(update_tau(&[0.4, 0.2], &[0.1, 0.3], &[0.0, 1.0], 2.0), 0.2 + 2.0 * 0.3);
    }

    #[test]
    fn norms_seed_then_average() {
        let mut n = LossNorms::new(0.9, 1e-8);
        let s = n.observe(&RawTerms { reliable: Some(0.5), unreliable: None, consistency: Some(0.0) });
        assert_eq!((s.reliable, s.unreliable, s.consistency), (0.5, 1.0, 1e-8));
        let s = n.observe(&RawTerms { reliable: Some(1.5), ..RawTerms::default() });
        assert!((s.reliable - 0.6).abs() < 1e-15);
    }
}
