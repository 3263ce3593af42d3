//! The domain-generalization network: a shared multi-scale convolutional
//! extractor, one branch head per source domain, a domain classifier whose
//! softmax weights fuse the branches, and a motion classifier on the fusion.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

const BN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 4] = b"EDGM";
const CHECKPOINT_VERSION: u32 = 1;

/// Extractor hyperparameters; defaults target 250 Hz, 4 s windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub temporal_kernel_lengths: Vec<usize>,
    pub filters_per_branch: usize,
    pub spatial_depth_multiplier: usize,
    pub block2_kernel_lengths: Vec<usize>,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout_p: f64,
    pub embedding_dim: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            temporal_kernel_lengths: vec![16, 32, 64, 128],
            filters_per_branch: 4,
            spatial_depth_multiplier: 2,
            block2_kernel_lengths: vec![4, 8, 16, 32],
            pool1: 4,
            pool2: 8,
            dropout_p: 0.25,
            embedding_dim: 64,
        }
    }
}

impl ExtractorConfig {
    /// Defaults with kernels and pools clamped to fit a [c,t] input, so short
    /// inputs (down to t = 1) still build.
    pub fn scaled_for(_c: usize, t: usize) -> ExtractorConfig {
        let mut cfg = ExtractorConfig::default();
        let t = t.max(1);
        for l in &mut cfg.temporal_kernel_lengths {
            *l = (*l).min(t).max(1);
        }
        cfg.pool1 = cfg.pool1.min(t).max(1);
        let t1 = (t / cfg.pool1).max(1);
        for l in &mut cfg.block2_kernel_lengths {
            *l = (*l).min(t1).max(1);
        }
        cfg.pool2 = cfg.pool2.min(t1).max(1);
        cfg
    }

    fn validate_for(&self, c: usize, t: usize) -> Result<()> {
        if c == 0 || t == 0 {
            return Err(Error::config(format!("input [{c},{t}] must be non-empty")));
        }
        if self.temporal_kernel_lengths.is_empty() || self.block2_kernel_lengths.is_empty() {
            return Err(Error::config("kernel length lists must be non-empty"));
        }
        if self.filters_per_branch == 0 || self.spatial_depth_multiplier == 0 {
            return Err(Error::config("filter counts must be at least 1"));
        }
        if self.embedding_dim == 0 {
            return Err(Error::config("embedding_dim must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} must lie in [0, 1)",
                self.dropout_p
            )));
        }
        for &l in &self.temporal_kernel_lengths {
            if l == 0 || l > t {
                return Err(Error::config(format!(
                    "temporal kernel {l} outside valid range 1..={t}"
                )));
            }
        }
        if self.pool1 == 0 || self.pool1 > t {
            return Err(Error::config(format!("pool1 {} outside 1..={t}", self.pool1)));
        }
        let t1 = t / self.pool1;
        for &l in &self.block2_kernel_lengths {
            if l == 0 || l > t1 {
                return Err(Error::config(format!(
                    "block-2 kernel {l} outside valid range 1..={t1} after pool1"
                )));
            }
        }
        if self.pool2 == 0 || self.pool2 > t1 {
            return Err(Error::config(format!("pool2 {} outside 1..={t1}", self.pool2)));
        }
        Ok(())
    }

    /// Channels after the spatial convolution.
    fn mid_channels(&self) -> usize {
        self.temporal_kernel_lengths.len() * self.filters_per_branch * self.spatial_depth_multiplier
    }

    /// Channels after block 2's concatenation.
    fn out_channels(&self) -> usize {
        self.block2_kernel_lengths.len() * self.filters_per_branch * self.spatial_depth_multiplier
    }

    /// Flattened feature count entering the embedding projection.
    fn flat_dim(&self, t: usize) -> usize {
        let t2 = (t / self.pool1) / self.pool2;
        self.out_channels() * t2
    }
}

/// Whole-network hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    /// Fully-connected layers per branch head.
    pub branch_depth: usize,
    pub branch_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            extractor: ExtractorConfig::default(),
            branch_depth: 2,
            branch_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![channels], 1.0).expect("valid shape"),
            beta: Tensor::zeros(vec![channels]).expect("valid shape"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Tensor,
    bias: Tensor,
}

/// Per-batch-norm statistics of one training forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over the batch.
    pub var: Vec<f64>,
    /// Elements averaged per channel.
    pub count: usize,
}

/// Everything the trainer needs from one training forward pass. `param_ids`
/// aligns one-to-one with `named_parameters()`.
pub struct TrainForward {
    pub param_ids: Vec<TensorId>,
    pub embedding: TensorId,
    /// Branch n's features for every sample in the batch.
    pub branch_feats: Vec<TensorId>,
    pub domain_logits: TensorId,
    pub fused_logits: TensorId,
    pub bn_stats: Vec<BnBatchStats>,
}

/// Eval-mode outputs; no dropout, batch norm uses running statistics.
pub struct EvalForward {
    pub embedding: TensorId,
    pub branch_feats: Vec<TensorId>,
    pub domain_weights: TensorId,
    pub fused: TensorId,
    pub fused_logits: TensorId,
}

#[derive(Debug, Clone)]
pub struct EegDgModel {
    pub config: ModelConfig,
    pub n_domains: usize,
    pub class_count: usize,
    pub in_channels: usize,
    pub in_timesteps: usize,
    temporal: Vec<Tensor>,
    spatial: Tensor,
    bn1: BatchNorm,
    block2_depth: Vec<Tensor>,
    block2_point: Vec<Tensor>,
    bn2: BatchNorm,
    proj: Linear,
    branches: Vec<Vec<Linear>>,
    domain_head: Linear,
    class_head: Linear,
}

/// Glorot-uniform weights: limit sqrt(6 / (fan_in + fan_out)).
fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Convolution kernels are [cout, cin_per_group, kh, kw].
fn conv_init(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let receptive = shape[2] * shape[3];
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    glorot(shape, fan_in, fan_out, rng)
}

fn linear_init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear {
        weight: glorot(vec![in_dim, out_dim], in_dim, out_dim, rng),
        bias: Tensor::zeros(vec![out_dim]).expect("valid shape"),
    }
}

/// Records a trainable tensor on the tape; insertion order defines the
/// gradient layout the trainer reads back.
fn param(tape: &mut Tape, ids: &mut Vec<TensorId>, t: &Tensor) -> TensorId {
    let id = tape.leaf(t.clone());
    ids.push(id);
    id
}

impl EegDgModel {
    pub fn init(
        config: &ModelConfig,
        n_domains: usize,
        class_count: usize,
        in_channels: usize,
        in_timesteps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.extractor.validate_for(in_channels, in_timesteps)?;
        if n_domains == 0 {
            return Err(Error::config("n_domains must be at least 1"));
        }
        if class_count < 2 {
            return Err(Error::config(format!(
                "class_count {class_count} must be at least 2"
            )));
        }
        if config.branch_depth == 0 || config.branch_dim == 0 {
            return Err(Error::config("branch_depth and branch_dim must be at least 1"));
        }
        let ex = &config.extractor;
        let f1 = ex.filters_per_branch;
        let d = ex.spatial_depth_multiplier;
        let ch1 = ex.temporal_kernel_lengths.len() * f1;
        let mid = ex.mid_channels();
        let temporal = ex
            .temporal_kernel_lengths
            .iter()
            .map(|&l| conv_init(vec![f1, 1, 1, l], rng))
            .collect();
        let spatial = conv_init(vec![mid, 1, in_channels, 1], rng);
        let _ = ch1;
        let block2_depth = ex
            .block2_kernel_lengths
            .iter()
            .map(|&l| conv_init(vec![mid, 1, 1, l], rng))
            .collect();
        let block2_point = ex
            .block2_kernel_lengths
            .iter()
            .map(|_| conv_init(vec![f1 * d, mid, 1, 1], rng))
            .collect();
        let proj = linear_init(ex.flat_dim(in_timesteps), ex.embedding_dim, rng);
        let branches = (0..n_domains)
            .map(|_| {
                (0..config.branch_depth)
                    .map(|k| {
                        let in_dim = if k == 0 { ex.embedding_dim } else { config.branch_dim };
                        linear_init(in_dim, config.branch_dim, rng)
                    })
                    .collect()
            })
            .collect();
        let domain_head = linear_init(ex.embedding_dim, n_domains, rng);
        let class_head = linear_init(config.branch_dim, class_count, rng);
        Ok(EegDgModel {
            config: config.clone(),
            n_domains,
            class_count,
            in_channels,
            in_timesteps,
            temporal,
            spatial,
            bn1: BatchNorm::new(mid),
            block2_depth,
            block2_point,
            bn2: BatchNorm::new(ex.out_channels()),
            proj,
            branches,
            domain_head,
            class_head,
        })
    }

    /// Trainable tensors in the order `TrainForward::param_ids` uses.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, t) in self.temporal.iter().enumerate() {
            out.push((format!("extractor.temporal{i}.weight"), t));
        }
        out.push(("extractor.spatial.weight".to_string(), &self.spatial));
        out.push(("extractor.bn1.gamma".to_string(), &self.bn1.gamma));
        out.push(("extractor.bn1.beta".to_string(), &self.bn1.beta));
        for (i, (dw, pw)) in self.block2_depth.iter().zip(&self.block2_point).enumerate() {
            out.push((format!("extractor.block2_{i}.depth.weight"), dw));
            out.push((format!("extractor.block2_{i}.point.weight"), pw));
        }
        out.push(("extractor.bn2.gamma".to_string(), &self.bn2.gamma));
        out.push(("extractor.bn2.beta".to_string(), &self.bn2.beta));
        out.push(("extractor.proj.weight".to_string(), &self.proj.weight));
        out.push(("extractor.proj.bias".to_string(), &self.proj.bias));
        for (n, branch) in self.branches.iter().enumerate() {
            for (k, layer) in branch.iter().enumerate() {
                out.push((format!("branch{n}.layer{k}.weight"), &layer.weight));
                out.push((format!("branch{n}.layer{k}.bias"), &layer.bias));
            }
        }
        out.push(("domain_head.weight".to_string(), &self.domain_head.weight));
        out.push(("domain_head.bias".to_string(), &self.domain_head.bias));
        out.push(("class_head.weight".to_string(), &self.class_head.weight));
        out.push(("class_head.bias".to_string(), &self.class_head.bias));
        out
    }

    /// Same order as `named_parameters`, mutable, for the optimizer.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for t in &mut self.temporal {
            out.push(t);
        }
        out.push(&mut self.spatial);
        out.push(&mut self.bn1.gamma);
        out.push(&mut self.bn1.beta);
        for (dw, pw) in self.block2_depth.iter_mut().zip(&mut self.block2_point) {
            out.push(dw);
            out.push(pw);
        }
        out.push(&mut self.bn2.gamma);
        out.push(&mut self.bn2.beta);
        out.push(&mut self.proj.weight);
        out.push(&mut self.proj.bias);
        for branch in &mut self.branches {
            for layer in branch {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out.push(&mut self.domain_head.weight);
        out.push(&mut self.domain_head.bias);
        out.push(&mut self.class_head.weight);
        out.push(&mut self.class_head.bias);
        out
    }

    /// Accepts [b,c,t] or [b,1,c,t]; returns [b,1,c,t].
    fn as_conv_input(&self, tape: &mut Tape, x: &Tensor) -> Result<TensorId> {
        let s = x.shape().to_vec();
        let (b, c, t) = match s.len() {
            3 => (s[0], s[1], s[2]),
            4 if s[1] == 1 => (s[0], s[2], s[3]),
            _ => return Err(Error::dim(format!("model input must be [b,c,t], got {:?}", s))),
        };
        if c != self.in_channels || t != self.in_timesteps {
            return Err(Error::dim(format!(
                "input [{c},{t}] does not match model built for [{},{}]",
                self.in_channels, self.in_timesteps
            )));
        }
        let id = tape.constant(x.clone());
        tape.reshape(id, vec![b, 1, c, t])
    }

    fn extract_impl(
        &self,
        tape: &mut Tape,
        x: TensorId,
        ids: &mut Vec<TensorId>,
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(TensorId, Vec<BnBatchStats>)> {
        if train && rng.is_none() {
            return Err(Error::contract("training forward needs an rng for dropout"));
        }
        let ex = &self.config.extractor;
        let same = |l: usize| {
            let lo = (l - 1) / 2;
            (0usize, 0usize, lo, l - 1 - lo)
        };
        // Block 1: parallel temporal convs, concat on channels.
        let mut t_outs = Vec::with_capacity(self.temporal.len());
        for (w, &l) in self.temporal.iter().zip(&ex.temporal_kernel_lengths) {
            let wid = param(tape, ids, w);
            t_outs.push(tape.conv2d(x, wid, 1, (1, 1), same(l))?);
        }
        let cat1 = tape.concat(&t_outs, 1)?;
        // Spatial depthwise conv collapses the channel axis.
        let sw = param(tape, ids, &self.spatial);
        let groups1 = self.temporal.len() * ex.filters_per_branch;
        let spat = tape.conv2d(cat1, sw, groups1, (1, 1), (0, 0, 0, 0))?;
        let g1 = param(tape, ids, &self.bn1.gamma);
        let b1 = param(tape, ids, &self.bn1.beta);
        let (bn1, stats1) = if train {
            let (id, mean, var) = tape.batch_norm_train(spat, g1, b1, BN_EPS)?;
            let s = tape.shape(spat).to_vec();
            let count = s[0] * s[2] * s[3];
            (id, Some(BnBatchStats { mean, var, count }))
        } else {
            (
                tape.batch_norm_eval(
                    spat,
                    g1,
                    b1,
                    &self.bn1.running_mean,
                    &self.bn1.running_var,
                    BN_EPS,
                )?,
                None,
            )
        };
        let act1 = tape.elu(bn1)?;
        let pool1 = tape.avg_pool2d(act1, 1, ex.pool1)?;
        let drop1 = if train {
            tape.dropout(pool1, ex.dropout_p, rng.as_deref_mut().expect("checked above"))?
        } else {
            pool1
        };
        // Block 2: parallel separable convs (depthwise then pointwise).
        let mid = ex.mid_channels();
        let mut s_outs = Vec::with_capacity(self.block2_depth.len());
        for ((dw, pw), &l) in self
            .block2_depth
            .iter()
            .zip(&self.block2_point)
            .zip(&ex.block2_kernel_lengths)
        {
            let dwid = param(tape, ids, dw);
            let pwid = param(tape, ids, pw);
            let depth = tape.conv2d(drop1, dwid, mid, (1, 1), same(l))?;
            s_outs.push(tape.conv2d(depth, pwid, 1, (1, 1), (0, 0, 0, 0))?);
        }
        let cat2 = tape.concat(&s_outs, 1)?;
        let g2 = param(tape, ids, &self.bn2.gamma);
        let b2 = param(tape, ids, &self.bn2.beta);
        let (bn2, stats2) = if train {
            let (id, mean, var) = tape.batch_norm_train(cat2, g2, b2, BN_EPS)?;
            let s = tape.shape(cat2).to_vec();
            let count = s[0] * s[2] * s[3];
            (id, Some(BnBatchStats { mean, var, count }))
        } else {
            (
                tape.batch_norm_eval(
                    cat2,
                    g2,
                    b2,
                    &self.bn2.running_mean,
                    &self.bn2.running_var,
                    BN_EPS,
                )?,
                None,
            )
        };
        let act2 = tape.elu(bn2)?;
        let pool2 = tape.avg_pool2d(act2, 1, ex.pool2)?;
        let drop2 = if train {
            tape.dropout(pool2, ex.dropout_p, rng.as_deref_mut().expect("checked above"))?
        } else {
            pool2
        };
        let b = tape.shape(drop2)[0];
        let flat = tape.reshape(drop2, vec![b, ex.flat_dim(self.in_timesteps)])?;
        let pw = param(tape, ids, &self.proj.weight);
        let pb = param(tape, ids, &self.proj.bias);
        let mm = tape.matmul(flat, pw)?;
        let emb = tape.add(mm, pb)?;
        let stats = match (stats1, stats2) {
            (Some(a), Some(c)) => vec![a, c],
            _ => Vec::new(),
        };
        Ok((emb, stats))
    }

    fn linear_on(
        &self,
        tape: &mut Tape,
        ids: &mut Vec<TensorId>,
        layer: &Linear,
        x: TensorId,
    ) -> Result<TensorId> {
        let w = param(tape, ids, &layer.weight);
        let b = param(tape, ids, &layer.bias);
        let mm = tape.matmul(x, w)?;
        tape.add(mm, b)
    }

    fn branch_features_impl(
        &self,
        tape: &mut Tape,
        ids: &mut Vec<TensorId>,
        z: TensorId,
    ) -> Result<Vec<TensorId>> {
        let mut outs = Vec::with_capacity(self.n_domains);
        for branch in &self.branches {
            let mut h = z;
            for (k, layer) in branch.iter().enumerate() {
                if k > 0 {
                    h = tape.elu(h)?;
                }
                h = self.linear_on(tape, ids, layer, h)?;
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// Embedding of a batch; builds fresh leaves on the given tape.
    pub fn extract(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        train: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TensorId> {
        let xin = self.as_conv_input(tape, x)?;
        let mut ids = Vec::new();
        let (emb, _) = self.extract_impl(tape, xin, &mut ids, train, rng)?;
        Ok(emb)
    }

    /// Applies every branch head to every sample of z.
    pub fn branch_features(&self, tape: &mut Tape, z: TensorId) -> Result<Vec<TensorId>> {
        let mut ids = Vec::new();
        self.branch_features_impl(tape, &mut ids, z)
    }

    /// Per-sample softmax weights over the domains.
    pub fn domain_weights(&self, tape: &mut Tape, z: TensorId) -> Result<TensorId> {
        let mut ids = Vec::new();
        let logits = self.linear_on(tape, &mut ids, &self.domain_head, z)?;
        tape.softmax(logits, 1)
    }

    /// Convex combination of branch outputs with per-sample weights [b,n].
    pub fn fuse(
        &self,
        tape: &mut Tape,
        weights: TensorId,
        branch_outs: &[TensorId],
    ) -> Result<TensorId> {
        if branch_outs.len() != self.n_domains {
            return Err(Error::contract(format!(
                "{} branch outputs for {} domains",
                branch_outs.len(),
                self.n_domains
            )));
        }
        let ws = tape.shape(weights).to_vec();
        if ws.len() != 2 || ws[1] != self.n_domains {
            return Err(Error::dim(format!(
                "weights must be [b,{}], got {:?}",
                self.n_domains, ws
            )));
        }
        let mut fused: Option<TensorId> = None;
        for (n, &out) in branch_outs.iter().enumerate() {
            let wn = tape.narrow(weights, 1, n, 1)?;
            let term = tape.mul(wn, out)?;
            fused = Some(match fused {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(fused.expect("n_domains >= 1"))
    }

    /// Motion-class logits of fused features.
    pub fn classify(&self, tape: &mut Tape, fused: TensorId) -> Result<TensorId> {
        let mut ids = Vec::new();
        self.linear_on(tape, &mut ids, &self.class_head, fused)
    }

    /// One training pass over a concatenated multi-domain batch.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainForward> {
        let xin = self.as_conv_input(tape, x)?;
        let mut ids = Vec::new();
        let (emb, bn_stats) = self.extract_impl(tape, xin, &mut ids, true, Some(rng))?;
        let branch_feats = self.branch_features_impl(tape, &mut ids, emb)?;
        let domain_logits = self.linear_on(tape, &mut ids, &self.domain_head, emb)?;
        let weights = tape.softmax(domain_logits, 1)?;
        let fused = self.fuse(tape, weights, &branch_feats)?;
        let fused_logits = self.linear_on(tape, &mut ids, &self.class_head, fused)?;
        debug_assert_eq!(ids.len(), self.named_parameters().len());
        Ok(TrainForward {
            param_ids: ids,
            embedding: emb,
            branch_feats,
            domain_logits,
            fused_logits,
            bn_stats,
        })
    }

    /// Deterministic inference pass: running-stat batch norm, no dropout.
    pub fn forward_eval(&self, tape: &mut Tape, x: &Tensor) -> Result<EvalForward> {
        let xin = self.as_conv_input(tape, x)?;
        let mut ids = Vec::new();
        let (emb, _) = self.extract_impl(tape, xin, &mut ids, false, None)?;
        let branch_feats = self.branch_features_impl(tape, &mut ids, emb)?;
        let domain_logits = self.linear_on(tape, &mut ids, &self.domain_head, emb)?;
        let weights = tape.softmax(domain_logits, 1)?;
        let fused = self.fuse(tape, weights, &branch_feats)?;
        let fused_logits = self.linear_on(tape, &mut ids, &self.class_head, fused)?;
        Ok(EvalForward {
            embedding: emb,
            branch_feats,
            domain_weights: weights,
            fused,
            fused_logits,
        })
    }

    /// Argmax class per sample; ties break to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let pass = self.forward_eval(&mut tape, x)?;
        let logits = tape.value(pass.fused_logits);
        let c = self.class_count;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// Folds one forward pass's batch statistics into the running estimates;
    /// the running variance uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats], momentum: f64) -> Result<()> {
        if stats.len() != 2 {
            return Err(Error::contract(format!(
                "expected stats for 2 batch-norm layers, got {}",
                stats.len()
            )));
        }
        for (bn, st) in [&mut self.bn1, &mut self.bn2].into_iter().zip(stats) {
            if st.mean.len() != bn.running_mean.len() {
                return Err(Error::dim(format!(
                    "stats for {} channels, layer has {}",
                    st.mean.len(),
                    bn.running_mean.len()
                )));
            }
            let correction = if st.count > 1 {
                st.count as f64 / (st.count as f64 - 1.0)
            } else {
                1.0
            };
            for c in 0..st.mean.len() {
                bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * st.mean[c];
                bn.running_var[c] =
                    (1.0 - momentum) * bn.running_var[c] + momentum * st.var[c] * correction;
            }
        }
        Ok(())
    }

    /// Applies a pre-computed update slice per parameter, in
    /// `named_parameters` order.
    pub fn apply_updates(&mut self, updates: &[Vec<f64>]) -> Result<()> {
        let mut params = self.parameters_mut();
        if updates.len() != params.len() {
            return Err(Error::contract(format!(
                "{} update slices for {} parameters",
                updates.len(),
                params.len()
            )));
        }
        for (p, u) in params.iter_mut().zip(updates) {
            if p.numel() != u.len() {
                return Err(Error::dim(format!(
                    "update of {} values for parameter of {}",
                    u.len(),
                    p.numel()
                )));
            }
            for (pv, &uv) in p.data_mut().iter_mut().zip(u) {
                *pv += uv;
            }
        }
        Ok(())
    }

    /// All tensors that belong in a checkpoint: parameters plus running stats.
    fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec(), t.data().to_vec()))
            .collect();
        out.push((
            "extractor.bn1.running_mean".to_string(),
            vec![self.bn1.running_mean.len()],
            self.bn1.running_mean.clone(),
        ));
        out.push((
            "extractor.bn1.running_var".to_string(),
            vec![self.bn1.running_var.len()],
            self.bn1.running_var.clone(),
        ));
        out.push((
            "extractor.bn2.running_mean".to_string(),
            vec![self.bn2.running_mean.len()],
            self.bn2.running_mean.clone(),
        ));
        out.push((
            "extractor.bn2.running_var".to_string(),
            vec![self.bn2.running_var.len()],
            self.bn2.running_var.clone(),
        ));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            n_domains: self.n_domains,
            class_count: self.class_count,
            in_channels: self.in_channels,
            in_timesteps: self.in_timesteps,
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, shape, data) in tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in &shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Format {
                    offset: *pos as u64,
                    message: format!("truncated while reading {what}"),
                });
            }
            let out = &buf[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        let u32_at = |pos: &mut usize, what: &str| -> Result<u32> {
            let b = take(pos, 4, what)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let magic = take(&mut pos, 4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(CHECKPOINT_MAGIC)
                ),
            });
        }
        let version = u32_at(&mut pos, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let json_len = u32_at(&mut pos, "header length")? as usize;
        let json = take(&mut pos, json_len, "header json")?;
        let header: CheckpointHeader = serde_json::from_slice(json)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = EegDgModel::init(
            &header.config,
            header.n_domains,
            header.class_count,
            header.in_channels,
            header.in_timesteps,
            &mut rng,
        )?;
        let n_tensors = u32_at(&mut pos, "tensor count")? as usize;
        let mut loaded: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u32_at(&mut pos, "name length")? as usize;
            let name = String::from_utf8(take(&mut pos, name_len, "name")?.to_vec())
                .map_err(|_| Error::Format {
                    offset: pos as u64,
                    message: "tensor name is not utf-8".to_string(),
                })?;
            let rank = u32_at(&mut pos, "rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(&mut pos, "dim")? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = take(&mut pos, count * 8, "tensor payload")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            loaded.push((name, shape, data));
        }
        if pos != buf.len() {
            return Err(Error::Format {
                offset: pos as u64,
                message: format!("{} trailing bytes", buf.len() - pos),
            });
        }
        model.load_tensors(&loaded)?;
        Ok(model)
    }

    fn load_tensors(&mut self, loaded: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let expected: Vec<String> =
            self.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        let got: Vec<&String> = loaded.iter().map(|(n, _, _)| n).collect();
        if expected.iter().collect::<Vec<_>>() != got {
            return Err(Error::format(
                0,
                format!("checkpoint tensor names do not match the configured model: got {got:?}"),
            ));
        }
        let n_params = self.named_parameters().len();
        {
            let mut params = self.parameters_mut();
            for (p, (name, shape, data)) in params.iter_mut().zip(loaded.iter().take(n_params)) {
                if p.shape() != shape.as_slice() {
                    return Err(Error::dim(format!(
                        "checkpoint tensor {name} has shape {shape:?}, model expects {:?}",
                        p.shape()
                    )));
                }
                p.data_mut().copy_from_slice(data);
            }
        }
        for (name, _, data) in loaded.iter().skip(n_params) {
            let slot = match name.as_str() {
                "extractor.bn1.running_mean" => &mut self.bn1.running_mean,
                "extractor.bn1.running_var" => &mut self.bn1.running_var,
                "extractor.bn2.running_mean" => &mut self.bn2.running_mean,
                "extractor.bn2.running_var" => &mut self.bn2.running_var,
                other => return Err(Error::format(0, format!("unexpected tensor {other}"))),
            };
            if slot.len() != data.len() {
                return Err(Error::dim(format!(
                    "running stat {name} has {} values, expected {}",
                    data.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(data);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)
            .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)
            .map_err(|e| Error::ingestion(format!("reading {}: {e}", path.display())))?;
        EegDgModel::from_bytes(&buf).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format {
                offset,
                message: format!("{}: {message}", path.display()),
            },
            other => other,
        })
    }

    #[cfg(test)]
    pub(crate) fn set_branch_identity(&mut self, n: usize) {
        let branch = &mut self.branches[n];
        for layer in branch.iter_mut() {
            let s = layer.weight.shape().to_vec();
            assert_eq!(s[0], s[1], "identity branch needs square layers");
            let d = s[0];
            let mut w = vec![0.0; d * d];
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
            layer.weight.data_mut().copy_from_slice(&w);
            layer.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[cfg(test)]
    pub(crate) fn zero_head(&mut self, which: &str) {
        let head = match which {
            "domain" => &mut self.domain_head,
            "class" => &mut self.class_head,
            _ => panic!("unknown head"),
        };
        head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        head.bias.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    #[cfg(test)]
    pub(crate) fn set_domain_bias(&mut self, bias: &[f64]) {
        self.domain_head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.domain_head.bias.data_mut().copy_from_slice(bias);
    }

    #[cfg(test)]
    pub(crate) fn copy_branch(&mut self, from: usize, to: usize) {
        let src = self.branches[from].clone();
        self.branches[to] = src;
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    n_domains: usize,
    class_count: usize,
    in_channels: usize,
    in_timesteps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            extractor: ExtractorConfig {
                temporal_kernel_lengths: vec![3, 5],
                filters_per_branch: 2,
                spatial_depth_multiplier: 1,
                block2_kernel_lengths: vec![3],
                pool1: 2,
                pool2: 2,
                dropout_p: 0.2,
                embedding_dim: 8,
            },
            branch_depth: 2,
            branch_dim: 4,
        }
    }

    fn tiny_model(n_domains: usize, classes: usize) -> EegDgModel {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        EegDgModel::init(&tiny_config(), n_domains, classes, 3, 16, &mut rng).unwrap()
    }

    fn random_input(b: usize, c: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![b, c, t],
            (0..b * c * t).map(|_| rng.gen::<f64>() - 0.5).collect(),
        )
        .unwrap()
    }

    #[test]
    fn extract_produces_embedding_rows() {
        let model = tiny_model(3, 4);
        let x = random_input(2, 3, 16, 5);
        let mut tape = Tape::new();
        let emb = model.extract(&mut tape, &x, false, None).unwrap();
        assert_eq!(tape.shape(emb), &[2, 8]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model = tiny_model(2, 3);
        let x = random_input(4, 3, 16, 6);
        let mut t1 = Tape::new();
        let a = model.forward_eval(&mut t1, &x).unwrap();
        let mut t2 = Tape::new();
        let b = model.forward_eval(&mut t2, &x).unwrap();
        let bits = |t: &Tape, id: TensorId| {
            t.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&t1, a.fused_logits), bits(&t2, b.fused_logits));
        assert_eq!(bits(&t1, a.embedding), bits(&t2, b.embedding));
    }

    #[test]
    fn extract_matches_hand_built_composition_of_the_same_primitives() {
        // Single temporal kernel, single block-2 kernel, one channel: the
        // whole extractor is writable as an explicit op chain.
        let config = ModelConfig {
            extractor: ExtractorConfig {
                temporal_kernel_lengths: vec![3],
                filters_per_branch: 1,
                spatial_depth_multiplier: 1,
                block2_kernel_lengths: vec![3],
                pool1: 2,
                pool2: 2,
                dropout_p: 0.0,
                embedding_dim: 4,
            },
            branch_depth: 1,
            branch_dim: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EegDgModel::init(&config, 1, 2, 1, 32, &mut rng).unwrap();
        let x = random_input(2, 1, 32, 9);

        let mut tape = Tape::new();
        let got = model.extract(&mut tape, &x, false, None).unwrap();
        let got_vals = tape.value(got).data().to_vec();

        // Manual composition with the same weights.
        let mut t = Tape::new();
        let xin = t.constant(x.clone());
        let xin = t.reshape(xin, vec![2, 1, 1, 32]).unwrap();
        let params = model.named_parameters();
        let by_name = |name: &str| -> Tensor {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| (*t).clone())
                .unwrap()
        };
        let w_t = t.constant(by_name("extractor.temporal0.weight"));
        let c1 = t.conv2d(xin, w_t, 1, (1, 1), (0, 0, 1, 1)).unwrap();
        let w_s = t.constant(by_name("extractor.spatial.weight"));
        let c2 = t.conv2d(c1, w_s, 1, (1, 1), (0, 0, 0, 0)).unwrap();
        let g1 = t.constant(by_name("extractor.bn1.gamma"));
        let b1 = t.constant(by_name("extractor.bn1.beta"));
        let bn1 = t
            .batch_norm_eval(c2, g1, b1, &model.bn1.running_mean, &model.bn1.running_var, BN_EPS)
            .unwrap();
        let a1 = t.elu(bn1).unwrap();
        let p1 = t.avg_pool2d(a1, 1, 2).unwrap();
        let w_d = t.constant(by_name("extractor.block2_0.depth.weight"));
        let c3 = t.conv2d(p1, w_d, 1, (1, 1), (0, 0, 1, 1)).unwrap();
        let w_p = t.constant(by_name("extractor.block2_0.point.weight"));
        let c4 = t.conv2d(c3, w_p, 1, (1, 1), (0, 0, 0, 0)).unwrap();
        let g2 = t.constant(by_name("extractor.bn2.gamma"));
        let b2 = t.constant(by_name("extractor.bn2.beta"));
        let bn2 = t
            .batch_norm_eval(c4, g2, b2, &model.bn2.running_mean, &model.bn2.running_var, BN_EPS)
            .unwrap();
        let a2 = t.elu(bn2).unwrap();
        let p2 = t.avg_pool2d(a2, 1, 2).unwrap();
        let flat = t.reshape(p2, vec![2, 8]).unwrap();
        let w_proj = t.constant(by_name("extractor.proj.weight"));
        let b_proj = t.constant(by_name("extractor.proj.bias"));
        let mm = t.matmul(flat, w_proj).unwrap();
        let want = t.add(mm, b_proj).unwrap();
        let want_vals = t.value(want).data();

        for (g, w) in got_vals.iter().zip(want_vals) {
            assert!((g - w).abs() < 1e-12, "extractor mismatch: {g} vs {w}");
        }
    }

    #[test]
    fn identical_branch_weights_give_identical_outputs() {
        let mut model = tiny_model(3, 4);
        model.copy_branch(0, 1);
        model.copy_branch(0, 2);
        let x = random_input(3, 3, 16, 8);
        let mut tape = Tape::new();
        let z = model.extract(&mut tape, &x, false, None).unwrap();
        let feats = model.branch_features(&mut tape, z).unwrap();
        let base = tape.value(feats[0]).data().to_vec();
        for &f in &feats[1..] {
            assert_eq!(tape.value(f).data(), base.as_slice());
        }
    }

    #[test]
    fn single_layer_identity_branch_returns_the_embedding() {
        let config = ModelConfig {
            extractor: ExtractorConfig {
                embedding_dim: 8,
                ..tiny_config().extractor
            },
            branch_depth: 1,
            branch_dim: 8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = EegDgModel::init(&config, 2, 3, 3, 16, &mut rng).unwrap();
        model.set_branch_identity(0);
        let x = random_input(2, 3, 16, 4);
        let mut tape = Tape::new();
        let z = model.extract(&mut tape, &x, false, None).unwrap();
        let feats = model.branch_features(&mut tape, z).unwrap();
        assert_eq!(tape.value(feats[0]).data(), tape.value(z).data());
    }

    #[test]
    fn domain_weights_form_a_simplex_row_per_sample() {
        let model = tiny_model(3, 4);
        let x = random_input(5, 3, 16, 12);
        let mut tape = Tape::new();
        let z = model.extract(&mut tape, &x, false, None).unwrap();
        let w = model.domain_weights(&mut tape, z).unwrap();
        assert_eq!(tape.shape(w), &[5, 3]);
        for row in tape.value(w).data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn zeroed_domain_head_gives_uniform_weights() {
        let mut model = tiny_model(4, 3);
        model.zero_head("domain");
        let x = random_input(2, 3, 16, 3);
        let mut tape = Tape::new();
        let z = model.extract(&mut tape, &x, false, None).unwrap();
        let w = model.domain_weights(&mut tape, z).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_logits_give_closed_form_softmax_weights() {
        let mut model = tiny_model(2, 3);
        model.set_domain_bias(&[3.0f64.ln(), 0.0]);
        let x = random_input(2, 3, 16, 3);
        let mut tape = Tape::new();
        let z = model.extract(&mut tape, &x, false, None).unwrap();
        let w = model.domain_weights(&mut tape, z).unwrap();
        for row in tape.value(w).data().chunks(2) {
            assert!((row[0] - 0.75).abs() < 1e-12, "{row:?}");
            assert!((row[1] - 0.25).abs() < 1e-12, "{row:?}");
        }
    }

    #[test]
    fn fusion_matches_direct_summation_and_selection() {
        let model = tiny_model(2, 3);
        let mut tape = Tape::new();
        let v1 = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let v2 =
            tape.constant(Tensor::new(vec![2, 3], vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]).unwrap());
        // Uniform average.
        let w = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let fused = model.fuse(&mut tape, w, &[v1, v2]).unwrap();
        assert_eq!(
            tape.value(fused).data(),
            &[5.5, 11.0, 16.5, 22.0, 27.5, 33.0]
        );
        // One-hot selection.
        let w2 = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let sel = model.fuse(&mut tape, w2, &[v1, v2]).unwrap();
        assert_eq!(tape.value(sel).data(), &[1.0, 2.0, 3.0, 40.0, 50.0, 60.0]);
        // Random weights against an explicit loop.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let wr: Vec<f64> = (0..2)
            .flat_map(|_| {
                let a: f64 = rng.gen();
                [a, 1.0 - a]
            })
            .collect();
        let wid = tape.constant(Tensor::new(vec![2, 2], wr.clone()).unwrap());
        let fr = model.fuse(&mut tape, wid, &[v1, v2]).unwrap();
        let d1 = tape.value(v1).data().to_vec();
        let d2 = tape.value(v2).data().to_vec();
        for (i, &got) in tape.value(fr).data().iter().enumerate() {
            let row = i / 3;
            let want = wr[row * 2] * d1[i] + wr[row * 2 + 1] * d2[i];
            assert!((got - want).abs() < 1e-12);
        }
        // Wrong branch count is rejected.
        assert!(model.fuse(&mut tape, w, &[v1]).is_err());
    }

    #[test]
    fn zeroed_class_head_predicts_lowest_class_everywhere() {
        let mut model = tiny_model(2, 4);
        model.zero_head("class");
        let x = random_input(3, 3, 16, 14);
        let labels = model.predict(&x).unwrap();
        assert_eq!(labels, vec![0, 0, 0]);
    }

    #[test]
    fn predict_is_invariant_to_constant_logit_shift() {
        let mut model = tiny_model(2, 3);
        let x = random_input(4, 3, 16, 15);
        let before = model.predict(&x).unwrap();
        for v in model.class_head.bias.data_mut() {
            *v += 7.5;
        }
        assert_eq!(model.predict(&x).unwrap(), before);
    }

    #[test]
    fn train_forward_records_every_parameter_once_in_order() {
        let model = tiny_model(3, 4);
        let x = random_input(6, 3, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let pass = model.forward_train(&mut tape, &x, &mut rng).unwrap();
        let names = model.named_parameters();
        assert_eq!(pass.param_ids.len(), names.len());
        for (id, (name, tensor)) in pass.param_ids.iter().zip(&names) {
            assert_eq!(tape.value(*id).shape(), tensor.shape(), "{name}");
        }
        assert_eq!(pass.bn_stats.len(), 2);
        // Every parameter receives a gradient through the combined heads.
        let ce_dom = tape.log_softmax(pass.domain_logits, 1).unwrap();
        let s1 = tape.sum_all(ce_dom).unwrap();
        let ce_cls = tape.log_softmax(pass.fused_logits, 1).unwrap();
        let s2 = tape.sum_all(ce_cls).unwrap();
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        for (id, (name, _)) in pass.param_ids.iter().zip(&names) {
            let g = tape.grad(*id).unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().all(|v| v.is_finite()), "{name}");
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut model = tiny_model(3, 4);
        // Perturb running stats so they are distinguishable from init.
        model.bn1.running_mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        model.bn2.running_var.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f64);
        let bytes = model.to_bytes().unwrap();
        let back = EegDgModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let x = random_input(2, 3, 16, 30);
        let a = model.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert_eq!(a, b);
        let mut t1 = Tape::new();
        let p1 = model.forward_eval(&mut t1, &x).unwrap();
        let mut t2 = Tape::new();
        let p2 = back.forward_eval(&mut t2, &x).unwrap();
        let bits = |t: &Tape, id: TensorId| {
            t.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&t1, p1.fused_logits), bits(&t2, p2.fused_logits));
    }

    #[test]
    fn oversized_kernel_is_a_config_error_at_build_time() {
        let mut config = tiny_config();
        config.extractor.temporal_kernel_lengths = vec![64];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = EegDgModel::init(&config, 2, 3, 3, 16, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn scaled_config_builds_for_two_features_one_timestep() {
        let config = ModelConfig {
            extractor: ExtractorConfig::scaled_for(2, 1),
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EegDgModel::init(&config, 3, 4, 2, 1, &mut rng).unwrap();
        let x = random_input(4, 2, 1, 2);
        let mut tape = Tape::new();
        let emb = model.extract(&mut tape, &x, false, None).unwrap();
        assert_eq!(tape.shape(emb), &[4, 64]);
    }
}
