//! Gradient providers, synthetic datasets, sharding and the serial oracles.
//!
//! Providers evaluate in `f64` so that finite differences are meaningful;
//! the engine and the oracles both round each mini-batch gradient to `f32`
//! before it is applied, exactly like a gradient message would be.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{HyperParams, WeightStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Binary,
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub task: Task,
    pub samples: usize,
    pub features: usize,
    /// Only used for multi-class data.
    pub classes: usize,
    /// Fraction of labels flipped (binary) or reassigned (multi-class).
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task: Task::Binary,
            samples: 1000,
            features: 10,
            classes: 2,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

/// Row-major feature matrix plus one label per row. Class labels are stored
/// as small integers in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub seed: u64,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
}

const DATASET_MAGIC: &[u8; 4] = b"SHDS";
const DATASET_VERSION: u16 = 1;

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        if spec.samples == 0 || spec.features == 0 {
            return Err(Error::Dataset("samples and features must be positive".into()));
        }
        if spec.task == Task::Multiclass && spec.classes < 2 {
            return Err(Error::Dataset("multi-class data needs at least 2 classes".into()));
        }
        if !(0.0..=0.5).contains(&spec.label_noise) {
            return Err(Error::Dataset("label noise must lie in [0, 0.5]".into()));
        }
        let (n, d) = (spec.samples, spec.features);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        let classes = match spec.task {
            Task::Regression => 1,
            Task::Binary => 2,
            Task::Multiclass => spec.classes,
        };
        match spec.task {
            Task::Regression | Task::Binary => {
                let scale = 1.0 / (d as f64).sqrt();
                let w: Vec<f64> = (0..d).map(|_| normal(&mut rng) * scale).collect();
                let b = 0.1 * normal(&mut rng);
                let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for _ in 0..n {
                    let mut row: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
                    let z = dot64(&w, &row) + b;
                    let label = if spec.task == Task::Regression {
                        z + 0.1 * normal(&mut rng)
                    } else {
                        // Keep a margin around the separating plane.
                        let side = if z >= 0.0 { 1.0 } else { -1.0 };
                        for (r, wi) in row.iter_mut().zip(&w) {
                            *r += side * 0.25 * wi / wnorm;
                        }
                        let mut lab = if side > 0.0 { 1.0 } else { 0.0 };
                        if rng.gen::<f64>() < spec.label_noise {
                            lab = 1.0 - lab;
                        }
                        lab
                    };
                    x.extend(row.iter().map(|v| *v as f32));
                    y.push(label as f32);
                }
            }
            Task::Multiclass => {
                let centers: Vec<f64> = (0..classes * d).map(|_| 2.0 * normal(&mut rng)).collect();
                for _ in 0..n {
                    let c = rng.gen_range(0..classes);
                    x.extend((0..d).map(|j| (centers[c * d + j] + normal(&mut rng)) as f32));
                    let lab = if rng.gen::<f64>() < spec.label_noise {
                        rng.gen_range(0..classes)
                    } else {
                        c
                    };
                    y.push(lab as f32);
                }
            }
        }
        Ok(Dataset {
            task: spec.task,
            samples: n,
            features: d,
            classes,
            seed: spec.seed,
            x,
            y,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.samples).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(40 + 4 * (self.x.len() + self.y.len()));
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.push(match self.task {
            Task::Regression => 0,
            Task::Binary => 1,
            Task::Multiclass => 2,
        });
        buf.push(0);
        buf.extend_from_slice(&(self.samples as u64).to_le_bytes());
        buf.extend_from_slice(&(self.features as u64).to_le_bytes());
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.x.iter().chain(&self.y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Dataset(format!("{}: {m}", path.display()));
        let buf = fs::read(path)?;
        if buf.len() < 36 || &buf[..4] != DATASET_MAGIC {
            return Err(bad("not a dataset file"));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(bad("checksum mismatch"));
        }
        if u16::from_le_bytes([body[4], body[5]]) != DATASET_VERSION {
            return Err(bad("unsupported version"));
        }
        let task = match body[6] {
            0 => Task::Regression,
            1 => Task::Binary,
            2 => Task::Multiclass,
            _ => return Err(bad("unknown task")),
        };
        let u64_at = |o: usize| u64::from_le_bytes(body[o..o + 8].try_into().unwrap());
        let samples = u64_at(8) as usize;
        let features = u64_at(16) as usize;
        let classes = u32::from_le_bytes(body[24..28].try_into().unwrap()) as usize;
        let seed = u64_at(28);
        let floats = &body[36..];
        if floats.len() != 4 * samples * (features + 1) {
            return Err(bad("payload length does not match header"));
        }
        let vals: Vec<f32> = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (x, y) = vals.split_at(samples * features);
        Ok(Dataset {
            task,
            samples,
            features,
            classes,
            seed,
            x: x.to_vec(),
            y: y.to_vec(),
        })
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn affine(w: &[f64], b: f64, x: &[f32]) -> f64 {
    let mut z = b;
    for (wi, xi) in w.iter().zip(x) {
        z += wi * *xi as f64;
    }
    z
}

/// A differentiable model evaluated on mini-batches of a [`Dataset`].
/// Implementations are pure: the same inputs always give the same outputs.
pub trait GradientProvider: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of parameters.
    fn dim(&self) -> usize;

    fn initial_weights(&self, seed: u64) -> Vec<f32>;

    /// Mean loss over `batch`.
    fn loss(&self, theta: &[f64], data: &Dataset, batch: &[usize]) -> f64;

    /// Writes the mean gradient over `batch` into `grad` and returns the mean
    /// loss.
    fn gradient(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64;

    /// Whether sample `i` is classified correctly; `None` for regression.
    fn correct(&self, theta: &[f64], data: &Dataset, i: usize) -> Option<bool>;
}

/// Squared-error linear regression, parameters `[w; b]`.
#[derive(Debug, Clone)]
pub struct LinearRegression {
    pub features: usize,
}

impl GradientProvider for LinearRegression {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn dim(&self) -> usize {
        self.features + 1
    }

    fn initial_weights(&self, _seed: u64) -> Vec<f32> {
        vec![0.0; self.dim()]
    }

    fn loss(&self, theta: &[f64], data: &Dataset, batch: &[usize]) -> f64 {
        let (w, b) = theta.split_at(self.features);
        let s: f64 = batch
            .iter()
            .map(|&i| {
                let r = affine(w, b[0], data.row(i)) - data.y[i] as f64;
                0.5 * r * r
            })
            .sum();
        s / batch.len() as f64
    }

    fn gradient(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        let d = self.features;
        let (w, b) = theta.split_at(d);
        grad.fill(0.0);
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            let r = affine(w, b[0], x) - data.y[i] as f64;
            loss += 0.5 * r * r;
            for (g, xi) in grad[..d].iter_mut().zip(x) {
                *g += r * *xi as f64;
            }
            grad[d] += r;
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    fn correct(&self, _: &[f64], _: &Dataset, _: usize) -> Option<bool> {
        None
    }
}

/// Binary logistic regression with labels in {0, 1}, parameters `[w; b]`.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    pub features: usize,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GradientProvider for LogisticRegression {
    fn name(&self) -> &'static str {
        "logistic"
    }

    fn dim(&self) -> usize {
        self.features + 1
    }

    fn initial_weights(&self, _seed: u64) -> Vec<f32> {
        vec![0.0; self.dim()]
    }

    fn loss(&self, theta: &[f64], data: &Dataset, batch: &[usize]) -> f64 {
        let (w, b) = theta.split_at(self.features);
        let s: f64 = batch
            .iter()
            .map(|&i| {
                let z = affine(w, b[0], data.row(i));
                softplus(z) - data.y[i] as f64 * z
            })
            .sum();
        s / batch.len() as f64
    }

    fn gradient(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        let d = self.features;
        let (w, b) = theta.split_at(d);
        grad.fill(0.0);
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            let y = data.y[i] as f64;
            let z = affine(w, b[0], x);
            loss += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            for (g, xi) in grad[..d].iter_mut().zip(x) {
                *g += r * *xi as f64;
            }
            grad[d] += r;
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    fn correct(&self, theta: &[f64], data: &Dataset, i: usize) -> Option<bool> {
        let (w, b) = theta.split_at(self.features);
        let pred = affine(w, b[0], data.row(i)) >= 0.0;
        Some(pred == (data.y[i] >= 0.5))
    }
}

/// One hidden `tanh` layer followed by a softmax over `classes` outputs.
/// Layout: `W1 (hidden x features)`, `b1`, `W2 (classes x hidden)`, `b2`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl Mlp {
    fn view<'a>(&self, theta: &'a [f64]) -> MlpView<'a> {
        let (d, h, k) = (self.features, self.hidden, self.classes);
        let (w1, rest) = theta.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(k * h);
        debug_assert_eq!(b2.len(), k);
        MlpView { w1, b1, w2, b2 }
    }

    /// Hidden activations and softmax probabilities for one row; returns the
    /// negative log-likelihood of `label`.
    fn forward(&self, v: &MlpView<'_>, x: &[f32], label: usize, hid: &mut [f64], prob: &mut [f64]) -> f64 {
        let d = self.features;
        for (j, a) in hid.iter_mut().enumerate() {
            *a = affine(&v.w1[j * d..(j + 1) * d], v.b1[j], x).tanh();
        }
        let h = self.hidden;
        for (c, p) in prob.iter_mut().enumerate() {
            *p = v.b2[c] + dot64(&v.w2[c * h..(c + 1) * h], hid);
        }
        let m = prob.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in prob.iter_mut() {
            *p = (*p - m).exp();
            z += *p;
        }
        for p in prob.iter_mut() {
            *p /= z;
        }
        -(prob[label].max(f64::MIN_POSITIVE)).ln()
    }
}

impl GradientProvider for Mlp {
    fn name(&self) -> &'static str {
        "mlp"
    }

    fn dim(&self) -> usize {
        self.hidden * (self.features + 1) + self.classes * (self.hidden + 1)
    }

    fn initial_weights(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c_705f_696e_6974);
        let (d, h, k) = (self.features, self.hidden, self.classes);
        let s1 = 1.0 / (d as f64).sqrt();
        let s2 = 1.0 / (h as f64).sqrt();
        let mut w = Vec::with_capacity(self.dim());
        w.extend((0..h * d).map(|_| (rng.sample::<f64, _>(StandardNormal) * s1) as f32));
        w.extend(std::iter::repeat_n(0.0, h));
        w.extend((0..k * h).map(|_| (rng.sample::<f64, _>(StandardNormal) * s2) as f32));
        w.extend(std::iter::repeat_n(0.0, k));
        w
    }

    fn loss(&self, theta: &[f64], data: &Dataset, batch: &[usize]) -> f64 {
        let v = self.view(theta);
        let mut hid = vec![0.0; self.hidden];
        let mut prob = vec![0.0; self.classes];
        let s: f64 = batch
            .iter()
            .map(|&i| self.forward(&v, data.row(i), data.y[i] as usize, &mut hid, &mut prob))
            .sum();
        s / batch.len() as f64
    }

    fn gradient(&self, theta: &[f64], data: &Dataset, batch: &[usize], grad: &mut [f64]) -> f64 {
        let (d, h, k) = (self.features, self.hidden, self.classes);
        let v = self.view(theta);
        grad.fill(0.0);
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(k * h);
        let mut hid = vec![0.0; h];
        let mut prob = vec![0.0; k];
        let mut dhid = vec![0.0; h];
        let mut loss = 0.0;
        for &i in batch {
            let x = data.row(i);
            let label = data.y[i] as usize;
            loss += self.forward(&v, x, label, &mut hid, &mut prob);
            prob[label] -= 1.0;
            dhid.fill(0.0);
            for c in 0..k {
                let dz = prob[c];
                gb2[c] += dz;
                let row = &mut gw2[c * h..(c + 1) * h];
                for j in 0..h {
                    row[j] += dz * hid[j];
                    dhid[j] += dz * v.w2[c * h + j];
                }
            }
            for j in 0..h {
                let da = dhid[j] * (1.0 - hid[j] * hid[j]);
                gb1[j] += da;
                for (g, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *g += da * *xi as f64;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    fn correct(&self, theta: &[f64], data: &Dataset, i: usize) -> Option<bool> {
        let v = self.view(theta);
        let mut hid = vec![0.0; self.hidden];
        let mut prob = vec![0.0; self.classes];
        let label = data.y[i] as usize;
        self.forward(&v, data.row(i), label, &mut hid, &mut prob);
        let best = (0..self.classes)
            .max_by(|&a, &b| prob[a].total_cmp(&prob[b]))
            .unwrap_or(0);
        Some(best == label)
    }
}

/// Builds a provider by name. `width` is the hidden width of the MLP and is
/// ignored by the linear models.
pub fn provider_by_name(name: &str, data: &Dataset, width: usize) -> Result<Arc<dyn GradientProvider>> {
    let features = data.features;
    let p: Arc<dyn GradientProvider> = match name {
        "linear" => Arc::new(LinearRegression { features }),
        "logistic" => {
            if data.task != Task::Binary {
                return Err(Error::Config("logistic regression needs binary data".into()));
            }
            Arc::new(LogisticRegression { features })
        }
        "mlp" => {
            if data.task == Task::Regression {
                return Err(Error::Config("the mlp provider needs class labels".into()));
            }
            if width == 0 {
                return Err(Error::Config("mlp width must be positive".into()));
            }
            Arc::new(Mlp {
                features,
                hidden: width,
                classes: data.classes,
            })
        }
        other => return Err(Error::Config(format!("unknown provider `{other}`"))),
    };
    Ok(p)
}

pub fn widen(theta: &[f32], out: &mut Vec<f64>) {
    out.clear();
    out.extend(theta.iter().map(|&v| v as f64));
}

/// Mean loss and accuracy over the whole dataset.
pub fn evaluate(p: &dyn GradientProvider, theta: &[f32], data: &Dataset) -> (f64, Option<f64>) {
    let mut t = Vec::new();
    widen(theta, &mut t);
    let all = data.all_indices();
    let loss = p.loss(&t, data, &all);
    let mut right = 0usize;
    let mut seen = 0usize;
    for i in 0..data.samples {
        if let Some(ok) = p.correct(&t, data, i) {
            seen += 1;
            right += ok as usize;
        }
    }
    let acc = (seen > 0).then(|| right as f64 / seen as f64);
    (loss, acc)
}

/// The sample order for `epoch`: a permutation of `0..n` drawn from stream
/// `epoch` of a ChaCha8 generator keyed by `seed`.
pub fn sample_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng);
    v
}

/// How an epoch's sample order is cut into mini-batches and dealt to
/// learners: batch `b` covers positions `b*mu .. min((b+1)*mu, n)` and goes
/// to learner `b % learners`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sharding {
    pub samples: usize,
    pub mini_batch: usize,
    pub learners: usize,
}

impl Sharding {
    pub fn new(samples: usize, mini_batch: usize, learners: usize) -> Self {
        assert!(samples > 0 && mini_batch > 0 && learners > 0);
        Sharding {
            samples,
            mini_batch,
            learners,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.div_ceil(self.mini_batch)
    }

    pub fn learner_batches_per_epoch(&self, learner: usize) -> usize {
        let b = self.batches_per_epoch();
        if learner >= b {
            0
        } else {
            (b - learner).div_ceil(self.learners)
        }
    }

    /// Positions in the epoch's sample order covered by batch `b`.
    pub fn batch_range(&self, b: usize) -> Range<usize> {
        let lo = b * self.mini_batch;
        lo..(lo + self.mini_batch).min(self.samples)
    }

    /// Epoch and global batch index of a learner's `k`-th batch.
    pub fn locate(&self, learner: usize, k: u64) -> (usize, usize) {
        let per = self.learner_batches_per_epoch(learner) as u64;
        let epoch = (k / per) as usize;
        let j = (k % per) as usize;
        (epoch, j * self.learners + learner)
    }
}

fn step_f32(theta: &mut [f32], grad: &[f32], alpha: f32) {
    for (w, g) in theta.iter_mut().zip(grad) {
        *w -= alpha * *g;
    }
}

/// Serial mini-batch SGD: the reference trajectory every parallel run is
/// compared against. `hp.learners` is ignored.
pub fn sgd_oracle(p: &dyn GradientProvider, data: &Dataset, hp: &HyperParams, seed: u64) -> Result<WeightStore> {
    let mut theta = p.initial_weights(seed);
    let (mut t64, mut g64) = (Vec::new(), vec![0.0; p.dim()]);
    let mut g32 = vec![0.0f32; p.dim()];
    let mut steps = 0u64;
    for epoch in 0..hp.epochs {
        let order = sample_order(data.samples, seed, epoch);
        for batch in order.chunks(hp.mini_batch) {
            widen(&theta, &mut t64);
            let loss = p.gradient(&t64, data, batch, &mut g64);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (a, b) in g32.iter_mut().zip(&g64) {
                *a = *b as f32;
            }
            step_f32(&mut theta, &g32, hp.learning_rate);
            steps += 1;
        }
    }
    let w = WeightStore::new(&theta);
    w.restore(&theta, steps)?;
    Ok(w)
}

/// Serial simulation of the barrier protocol: each round averages, in
/// learner order, the `f32` gradients of `hp.learners` consecutive batches
/// of `hp.mini_batch` samples. Requires `learners * mini_batch` to divide the
/// sample count.
pub fn ssgd_oracle(p: &dyn GradientProvider, data: &Dataset, hp: &HyperParams, seed: u64) -> Result<WeightStore> {
    let (lam, mu) = (hp.learners, hp.mini_batch);
    let round = lam * mu;
    if round > data.samples || !data.samples.is_multiple_of(round) {
        return Err(Error::Config(format!(
            "learners x mini_batch = {round} must divide the {} samples",
            data.samples
        )));
    }
    let dim = p.dim();
    let mut theta = p.initial_weights(seed);
    let (mut t64, mut g64) = (Vec::new(), vec![0.0; dim]);
    let mut sum = vec![0.0f64; dim];
    let mut avg = vec![0.0f32; dim];
    let mut rounds = 0u64;
    for epoch in 0..hp.epochs {
        let order = sample_order(data.samples, seed, epoch);
        for chunk in order.chunks(round) {
            widen(&theta, &mut t64);
            sum.fill(0.0);
            for batch in chunk.chunks(mu) {
                let loss = p.gradient(&t64, data, batch, &mut g64);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch });
                }
                for (s, g) in sum.iter_mut().zip(&g64) {
                    *s += (*g as f32) as f64;
                }
            }
            for (a, s) in avg.iter_mut().zip(&sum) {
                *a = (*s / lam as f64) as f32;
            }
            step_f32(&mut theta, &avg, hp.learning_rate);
            rounds += 1;
        }
    }
    let w = WeightStore::new(&theta);
    w.restore(&theta, rounds)?;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDiffReport {
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Compares analytic gradients with central differences (step `1e-4`) at
/// `trials` random points and batches. The error of one trial is
/// `|fd - g| / max(|fd|, |g|)` in the Euclidean norm.
pub fn finite_diff_check(p: &dyn GradientProvider, data: &Dataset, trials: usize, seed: u64) -> FiniteDiffReport {
    assert!(trials >= 1, "at least one trial");
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = p.dim();
    let mut g = vec![0.0; dim];
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut theta: Vec<f64> = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let size = rng.gen_range(1..=8.min(data.samples));
        let batch: Vec<usize> = (0..size).map(|_| rng.gen_range(0..data.samples)).collect();
        p.gradient(&theta, data, &batch, &mut g);
        let (mut diff, mut nfd, mut ng) = (0.0, 0.0, 0.0);
        for k in 0..dim {
            let orig = theta[k];
            theta[k] = orig + H;
            let up = p.loss(&theta, data, &batch);
            theta[k] = orig - H;
            let down = p.loss(&theta, data, &batch);
            theta[k] = orig;
            let fd = (up - down) / (2.0 * H);
            diff += (fd - g[k]) * (fd - g[k]);
            nfd += fd * fd;
            ng += g[k] * g[k];
        }
        let denom = nfd.sqrt().max(ng.sqrt());
        if denom > 0.0 {
            worst = worst.max(diff.sqrt() / denom);
        }
    }
    FiniteDiffReport {
        trials,
        max_rel_error: worst,
    }
}
