//! Momentum-contrast training.
//!
//! The online encoder embeds the query view and the momentum encoder embeds
//! the key view. Both are L2-normalized, and the loss is InfoNCE against a FIFO
//! queue of past keys. The momentum encoder follows the online one as an
//! exponential moving average.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentConfig};
use crate::autodiff::{Graph, Value};
use crate::backbone::{self, BackboneConfig, BackboneParams, Checkpoint, Timesteps};
use crate::data::{self, ChannelMode, SeriesDataset, SplitName};
use crate::seed;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Allowed deviation of a row norm from 1 in loss inputs.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Batch sum divided by the number of rows.
    Mean,
    /// Plain batch sum.
    #[default]
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MocoConfig {
    pub batch_size: usize,
    /// Defaults to twice the batch size.
    pub queue_size: Option<usize>,
    pub momentum: f64,
    pub tau: f64,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub epochs: usize,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub loss_reduction: LossReduction,
    pub contrast_timesteps: Timesteps,
}

impl Default for MocoConfig {
    fn default() -> Self {
        MocoConfig {
            batch_size: 256,
            queue_size: None,
            momentum: 0.999,
            tau: 0.07,
            lr: 1e-3,
            sgd_momentum: 0.9,
            epochs: 100,
            max_steps: None,
            loss_reduction: LossReduction::Sum,
            contrast_timesteps: Timesteps::Last,
        }
    }
}

impl MocoConfig {
    pub fn queue_len(&self) -> usize {
        self.queue_size.unwrap_or(2 * self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.batch_size > self.queue_len() {
            return fail(format!(
                "batch_size {} exceeds queue size {}",
                self.batch_size,
                self.queue_len()
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail(format!("momentum {} not in [0, 1]", self.momentum));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) {
            return fail(format!(
                "need lr > 0 and sgd_momentum in [0, 1), got {} / {}",
                self.lr, self.sgd_momentum
            ));
        }
        Ok(())
    }
}

/// Everything `train` needs besides data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub backbone: BackboneConfig,
    pub augment: AugmentConfig,
    pub moco: MocoConfig,
    pub channel_mode: ChannelMode,
}

fn check_rows(which: &'static str, data: &[f64], dim: usize) -> Result<()> {
    for (row, r) in data.chunks(dim).enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
            return Err(Error::Normalization { which, row, norm });
        }
    }
    Ok(())
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// InfoNCE summed over the rows of `q: [N, d]`. `k_pos: [N, d]` and
/// `queue: [K, d]` enter as constants, so gradients reach `q` only.
pub fn info_nce_graph(
    g: &mut Graph,
    q: Value,
    k_pos: &Tensor,
    queue: &Tensor,
    tau: f64,
) -> Result<Value> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 2 || k_pos.shape != qs || queue.rank() != 2 || queue.shape[1] != qs[1] {
        return Err(Error::Shape(format!(
            "info_nce: q {qs:?}, k {:?}, queue {:?}",
            k_pos.shape, queue.shape
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let (n, d) = (qs[0], qs[1]);
    check_rows("q", &g.value(q).data, d)?;
    check_rows("k_pos", &k_pos.data, d)?;
    check_rows("queue", &queue.data, d)?;

    let kv = g.constant(k_pos.clone());
    let prod = g.mul(q, kv)?;
    let pos = g.sum_over(prod, 1)?;
    let pos = g.scale(pos, 1.0 / tau);
    let pos_col = g.reshape(pos, &[n, 1])?;
    let logits = if queue.shape[0] == 0 {
        pos_col
    } else {
        let kq = queue.shape[0];
        let qt = g.constant(Tensor::new(&[d, kq], transpose(&queue.data, kq, d))?);
        let neg = g.matmul(q, qt)?;
        let neg = g.scale(neg, 1.0 / tau);
        g.concat(&[pos_col, neg], 1)?
    };
    let lse = g.logsumexp(logits, 1)?;
    let per_row = g.sub(lse, pos)?;
    g.sum_all(per_row)
}

/// InfoNCE value summed over rows.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, queue: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let loss = info_nce_graph(&mut g, qv, k_pos, queue, tau)?;
    Ok(g.value(loss).item())
}

/// InfoNCE value and its gradient with respect to `q`.
pub fn info_nce_grad(q: &Tensor, k_pos: &Tensor, queue: &Tensor, tau: f64) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let qv = g.param(q.clone());
    let loss = info_nce_graph(&mut g, qv, k_pos, queue, tau)?;
    let value = g.value(loss).item();
    let mut grads = g.backward(loss)?;
    let grad = grads.take(qv).unwrap_or_else(|| vec![0.0; q.data.len()]);
    Ok((value, grad))
}

/// `momentum <- m * momentum + (1 - m) * online`, elementwise.
pub fn momentum_update(online: &BackboneParams, momentum: &mut BackboneParams, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("momentum {m} not in [0, 1]")));
    }
    if !online.same_shapes(momentum) {
        return Err(Error::Shape("online and momentum parameters differ in shape".into()));
    }
    for (k, q) in momentum.tensors_mut().into_iter().zip(online.tensors()) {
        for (kv, &qv) in k.data.iter_mut().zip(&q.data) {
            *kv = m * *kv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Queue {
    dim: usize,
    capacity: usize,
    data: Vec<f64>,
    head: usize,
    filled: usize,
}

impl Queue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Queue {
            dim,
            capacity,
            data: vec![0.0; capacity * dim],
            head: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.capacity
    }

    /// Slot that the next enqueued row will overwrite.
    pub fn head(&self) -> usize {
        self.head
    }

    /// Raw slots `[capacity × dim]`, including unfilled zero rows.
    pub fn slots(&self) -> &[f64] {
        &self.data
    }

    /// Overwrites the oldest slots with the rows of `keys: [N, dim]`.
    pub fn enqueue(&mut self, keys: &[f64]) -> Result<()> {
        if self.dim == 0 || keys.len() % self.dim != 0 {
            return Err(Error::Shape(format!(
                "{} values are not rows of width {}",
                keys.len(),
                self.dim
            )));
        }
        let n = keys.len() / self.dim;
        if n > self.capacity {
            return Err(Error::Config(format!(
                "cannot enqueue {n} keys into a queue of {}",
                self.capacity
            )));
        }
        check_rows("key", keys, self.dim)?;
        for row in keys.chunks(self.dim) {
            self.data[self.head * self.dim..][..self.dim].copy_from_slice(row);
            self.head = (self.head + 1) % self.capacity;
        }
        self.filled = (self.filled + n).min(self.capacity);
        Ok(())
    }

    /// The filled rows as a `[len, dim]` tensor, in slot order.
    pub fn to_tensor(&self) -> Tensor {
        let rows = if self.is_full() { self.capacity } else { self.filled };
        let data = if self.is_full() {
            self.data.clone()
        } else {
            // before wrap-around the filled slots are a prefix
            self.data[..rows * self.dim].to_vec()
        };
        Tensor::new(&[rows, self.dim], data).expect("queue shape")
    }
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct MocoState {
    pub online: BackboneParams,
    pub momentum: BackboneParams,
    pub velocity: BackboneParams,
    pub queue: Queue,
    pub m: f64,
    pub tau: f64,
}

/// One line of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes `step,epoch,loss,lr`, plus a `fingerprint` column when given.
pub fn write_trace_csv(path: impl AsRef<Path>, trace: &[StepRecord], fingerprint: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("step,epoch,loss,lr");
    s.push_str(if fingerprint.is_some() { ",fingerprint\n" } else { "\n" });
    for r in trace {
        s.push_str(&format!("{},{},{},{}", r.step, r.epoch, r.loss, r.lr));
        match fingerprint {
            Some(f) => s.push_str(&format!(",{f}\n")),
            None => s.push('\n'),
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn l2_rows(data: &mut [f64], dim: usize) {
    for r in data.chunks_mut(dim) {
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(crate::autodiff::NORM_EPS);
        r.iter_mut().for_each(|v| *v /= n);
    }
}

/// Step-by-step MoCo trainer.
pub struct Trainer<'a> {
    ds: &'a SeriesDataset,
    spec: TrainSpec,
    seed: u64,
    state: MocoState,
    window_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    steps_per_epoch: usize,
    step: usize,
    warmed_up: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a SeriesDataset, spec: TrainSpec, master_seed: u64) -> Result<Self> {
        spec.moco.validate()?;
        spec.backbone.validate()?;
        spec.augment.validate(spec.backbone.input_len)?;
        let want_channels = match spec.channel_mode {
            ChannelMode::Independent => 1,
            ChannelMode::Mix => ds.channels(),
        };
        if spec.backbone.in_channels != want_channels {
            return Err(Error::Config(format!(
                "backbone expects {} input channels, data provides {want_channels}",
                spec.backbone.in_channels
            )));
        }
        let windows = ds.window_count(SplitName::Train, spec.backbone.input_len, spec.channel_mode);
        if windows == 0 {
            return Err(Error::WindowTooLong {
                needed: spec.backbone.input_len,
                available: ds.split.train.len(),
            });
        }
        let online = BackboneParams::init(&spec.backbone, &mut seed::rng(master_seed, "init"))?;
        let state = MocoState {
            momentum: online.clone(),
            velocity: online.zeros_like(),
            online,
            queue: Queue::new(spec.moco.queue_len(), spec.backbone.d_rep),
            m: spec.moco.momentum,
            tau: spec.moco.tau,
        };
        Ok(Trainer {
            ds,
            steps_per_epoch: windows.div_ceil(spec.moco.batch_size),
            spec,
            seed: master_seed,
            state,
            window_rng: seed::rng(master_seed, "windows"),
            augment_rng: seed::rng(master_seed, "augment"),
            step: 0,
            warmed_up: false,
        })
    }

    pub fn state(&self) -> &MocoState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Optimizer steps the configured run will take.
    pub fn total_steps(&self) -> usize {
        let full = self.steps_per_epoch * self.spec.moco.epochs;
        self.spec.moco.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.spec.backbone.clone(),
            self.seed,
            self.step as u64,
            self.state.online.clone(),
            self.state.momentum.clone(),
        )
    }

    /// Samples a batch and returns `(query periodic, query trend, key
    /// periodic, key trend)`, each `[N, L, C]`.
    fn batch(&mut self) -> Result<[Vec<f64>; 4]> {
        let n = self.spec.moco.batch_size;
        let windows = data::sample_windows(
            self.ds,
            SplitName::Train,
            n,
            self.spec.backbone.input_len,
            self.spec.channel_mode,
            &mut self.window_rng,
        )?;
        let mut out: [Vec<f64>; 4] = Default::default();
        for w in &windows {
            let pair = augment::make_view_pair_channels(
                &w.values,
                w.channels,
                &self.spec.augment,
                &mut self.augment_rng,
            )?;
            out[0].extend_from_slice(&pair.query.periodic);
            out[1].extend_from_slice(&pair.query.trend);
            out[2].extend_from_slice(&pair.key.periodic);
            out[3].extend_from_slice(&pair.key.trend);
        }
        Ok(out)
    }

    fn view_shape(&self) -> [usize; 3] {
        [
            self.spec.moco.batch_size,
            self.spec.backbone.input_len,
            self.spec.backbone.in_channels,
        ]
    }

    /// Normalized keys from the momentum encoder, `[rows, d_rep]`.
    fn keys(&self, periodic: Vec<f64>, trend: Vec<f64>) -> Result<Tensor> {
        let cfg = &self.spec.backbone;
        let shape = self.view_shape();
        let mut g = Graph::new();
        let nodes = self.state.momentum.attach(&mut g, false);
        let p = g.constant(Tensor::new(&shape, periodic)?);
        let t = g.constant(Tensor::new(&shape, trend)?);
        let steps = self.spec.moco.contrast_timesteps;
        let rep = backbone::encode_graph(&mut g, cfg, &nodes, p, t, steps)?;
        let mut k = g.value(rep).clone();
        let rows = k.data.len() / cfg.d_rep;
        k.shape = vec![rows, cfg.d_rep];
        l2_rows(&mut k.data, cfg.d_rep);
        Ok(k)
    }

    /// Last-step keys to push into the queue.
    fn last_step_keys(&self, k: &Tensor) -> Vec<f64> {
        let d = self.spec.backbone.d_rep;
        match self.spec.moco.contrast_timesteps {
            Timesteps::Last => k.data.clone(),
            Timesteps::All => {
                let len = self.spec.backbone.input_len;
                k.data
                    .chunks(len * d)
                    .flat_map(|per| per[(len - 1) * d..].iter().copied())
                    .collect()
            }
        }
    }

    /// Fills the queue from the first batches without taking steps.
    fn warm_up(&mut self) -> Result<()> {
        while !self.state.queue.is_full() {
            let [_, _, kp, kt] = self.batch()?;
            let k = self.keys(kp, kt)?;
            let last = self.last_step_keys(&k);
            self.state.queue.enqueue(&last)?;
        }
        self.warmed_up = true;
        Ok(())
    }

    /// Runs one optimizer step. Returns `None` once the configured number of
    /// steps has been taken.
    pub fn next_step(&mut self) -> Result<Option<StepRecord>> {
        if self.step >= self.total_steps() {
            return Ok(None);
        }
        if !self.warmed_up {
            self.warm_up()?;
        }
        let cfg = self.spec.backbone.clone();
        let moco = self.spec.moco.clone();
        let [qp, qt, kp, kt] = self.batch()?;
        let k = self.keys(kp, kt)?;
        let queue = self.state.queue.to_tensor();

        let shape = self.view_shape();
        let mut g = Graph::new();
        let nodes = self.state.online.attach(&mut g, true);
        let p = g.constant(Tensor::new(&shape, qp)?);
        let t = g.constant(Tensor::new(&shape, qt)?);
        let rep = backbone::encode_graph(&mut g, &cfg, &nodes, p, t, moco.contrast_timesteps)?;
        let rows = k.shape[0];
        let rep = g.reshape(rep, &[rows, cfg.d_rep])?;
        let q = g.l2_normalize(rep, 1)?;
        let loss = info_nce_graph(&mut g, q, &k, &queue, moco.tau)?;
        let loss = match moco.loss_reduction {
            LossReduction::Mean => g.scale(loss, 1.0 / rows as f64),
            LossReduction::Sum => loss,
        };
        let value = g.value(loss).item();
        self.step += 1;
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: value,
            });
        }
        let mut grads = g.backward(loss)?;

        let velocity = self.state.velocity.tensors_mut();
        let params = self.state.online.tensors_mut();
        for ((p, v), node) in params.into_iter().zip(velocity).zip(nodes.values()) {
            let Some(grad) = grads.take(node) else { continue };
            for ((pv, vv), gv) in p.data.iter_mut().zip(v.data.iter_mut()).zip(grad) {
                *vv = moco.sgd_momentum * *vv + gv;
                *pv -= moco.lr * *vv;
            }
        }
        if !self.state.online.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                loss: value,
            });
        }
        momentum_update(&self.state.online, &mut self.state.momentum, self.state.m)?;
        let last = self.last_step_keys(&k);
        self.state.queue.enqueue(&last)?;

        Ok(Some(StepRecord {
            step: self.step,
            epoch: (self.step - 1) / self.steps_per_epoch + 1,
            loss: value,
            lr: moco.lr,
        }))
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<StepRecord>,
}

/// Trains to completion. `on_step` sees every trace record as it is produced.
pub fn train(
    ds: &SeriesDataset,
    spec: &TrainSpec,
    master_seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(ds, spec.clone(), master_seed)?;
    let mut trace = Vec::with_capacity(trainer.total_steps());
    while let Some(rec) = trainer.next_step()? {
        on_step(&rec);
        trace.push(rec);
    }
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn single_positive_gives_zero() {
        let q = Tensor::new(&[1, 3], unit(&[1.0, 2.0, 3.0])).unwrap();
        let empty = Tensor::new(&[0, 3], vec![]).unwrap();
        assert_eq!(info_nce(&q, &q, &empty, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let q = Tensor::new(&[1, 5], vec![1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut neg = vec![0.0; 20];
        for j in 0..4 {
            neg[j * 5 + j + 1] = 1.0;
        }
        let queue = Tensor::new(&[4, 5], neg).unwrap();
        let loss = info_nce(&q, &q, &queue, 1.0).unwrap();
        let expect = (1.0 + 4.0 * (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 0.904_8).abs() < 1e-4);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let q = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        let k = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let empty = Tensor::new(&[0, 2], vec![]).unwrap();
        assert!(matches!(
            info_nce(&q, &k, &empty, 0.1),
            Err(Error::Normalization { which: "q", .. })
        ));
    }

    #[test]
    fn momentum_edges() {
        let cfg = BackboneConfig {
            d_model: 2,
            d_rep: 4,
            kernel_sizes: vec![1, 2],
            input_len: 8,
            ..BackboneConfig::default()
        };
        let mut rng = seed::rng(1, "init");
        let on = BackboneParams::init(&cfg, &mut rng).unwrap();
        let start = BackboneParams::init(&cfg, &mut rng).unwrap();
        let mut mo = start.clone();
        momentum_update(&on, &mut mo, 1.0).unwrap();
        assert_eq!(mo, start);
        momentum_update(&on, &mut mo, 0.0).unwrap();
        assert_eq!(mo, on);
        let mut zero = on.zeros_like();
        let mut two = on.clone();
        two.tensors_mut().into_iter().for_each(|t| t.data.fill(2.0));
        momentum_update(&two, &mut zero, 0.5).unwrap();
        assert!(zero.tensors().iter().all(|t| t.data.iter().all(|&v| v == 1.0)));
        assert!(matches!(momentum_update(&on, &mut mo, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn queue_ring_buffer() {
        let mut q = Queue::new(4, 2);
        let batch = |a: f64| vec![a.cos(), a.sin(), (a + 1.0).cos(), (a + 1.0).sin()];
        q.enqueue(&batch(0.0)).unwrap();
        assert!(!q.is_full());
        q.enqueue(&batch(2.0)).unwrap();
        assert!(q.is_full());
        q.enqueue(&batch(4.0)).unwrap();
        assert_eq!(&q.slots()[..4], batch(4.0).as_slice());
        assert_eq!(&q.slots()[4..], batch(2.0).as_slice());
        assert_eq!(q.head(), 2);
        assert!(matches!(q.enqueue(&[1.0; 10]), Err(Error::Config(_))));
    }
}
