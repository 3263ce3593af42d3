//! Training loop: per-domain minibatches, the combined alignment objective,
//! bias-corrected Adam, epoch metrics, and target-domain evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, Bandwidth, KernelSpec, LossBreakdown};
use crate::metrics::{self, MetricsReport};
use crate::model::{EegDgModel, ExtractorConfig, ModelConfig};
use crate::signal::DomainDataset;
use crate::tensor::{Tape, Tensor};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_per_domain: usize,
    pub epochs: usize,
    /// Weight of the separation term inside the conditional loss.
    pub alpha: f64,
    /// Weight of the marginal (MMD) alignment term.
    pub beta1: f64,
    /// Weight of the conditional (class-geometry) alignment term.
    pub beta2: f64,
    /// Weight of the domain-classification term feeding the fusion weights.
    pub beta_d: f64,
    pub adam_beta_m: f64,
    pub adam_beta_v: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub kernel: KernelSpec,
    /// None derives an architecture scaled to the input shape.
    pub architecture: Option<ModelConfig>,
    /// Checkpoint-hook interval in epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Run the per-epoch hook every epoch (reporting only; the trainer itself
    /// never sees target data).
    pub early_metrics: bool,
    /// Global-norm gradient clip; None disables.
    pub grad_clip: Option<f64>,
    pub bn_momentum: f64,
    /// Record wall-clock milliseconds per epoch; disable for byte-identical
    /// metrics logs across runs.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0005,
            batch_per_domain: 8,
            epochs: 500,
            alpha: 0.1,
            beta1: 0.1,
            beta2: 0.1,
            beta_d: 1.0,
            adam_beta_m: 0.9,
            adam_beta_v: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            kernel: KernelSpec::Rbf(Bandwidth::Median),
            architecture: None,
            checkpoint_every: 0,
            early_metrics: false,
            grad_clip: None,
            bn_momentum: 0.1,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_per_domain == 0 {
            return Err(Error::config("batch_per_domain must be at least 1"));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta_d", self.beta_d),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("adam_beta_m", self.adam_beta_m), ("adam_beta_v", self.adam_beta_v)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::config("adam_eps must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("grad_clip {c} must be positive")));
            }
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config(format!(
                "bn_momentum {} must lie in (0, 1]",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_clc: f64,
    pub l_mir: f64,
    pub l_cir: f64,
    pub l_dom: f64,
    pub total: f64,
    /// End-of-epoch eval-mode MMD over whole source domains; present while the
    /// marginal term is active.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avg_mmd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_acc: Option<f64>,
}

/// Draws per-domain minibatches without replacement inside an epoch.
pub struct BatchSampler {
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(domain_sizes: &[usize], batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if domain_sizes.is_empty() {
            return Err(Error::config("sampler needs at least one domain"));
        }
        if let Some((i, &s)) = domain_sizes.iter().enumerate().find(|(_, &s)| s < batch) {
            return Err(Error::config(format!(
                "domain {i} has {s} samples, fewer than batch size {batch}"
            )));
        }
        Ok(BatchSampler {
            orders: domain_sizes.iter().map(|&s| (0..s).collect()).collect(),
            cursors: vec![0; domain_sizes.len()],
            batch,
            rng,
        })
    }

    /// One epoch covers the smallest domain once.
    pub fn iterations_per_epoch(&self) -> usize {
        self.orders.iter().map(Vec::len).min().expect("non-empty") / self.batch
    }

    /// Reshuffles every domain and rewinds the cursors.
    pub fn start_epoch(&mut self) {
        for order in &mut self.orders {
            order.shuffle(&mut self.rng);
        }
        self.cursors.iter_mut().for_each(|c| *c = 0);
    }

    /// Next minibatch of indices per domain.
    pub fn draw(&mut self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.orders.len());
        for (order, cursor) in self.orders.iter_mut().zip(&mut self.cursors) {
            if *cursor + self.batch > order.len() {
                order.shuffle(&mut self.rng);
                *cursor = 0;
            }
            out.push(order[*cursor..*cursor + self.batch].to_vec());
            *cursor += self.batch;
        }
        out
    }
}

/// Per-parameter Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(param_lengths: &[usize]) -> Self {
        AdamState {
            m: param_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected Adam; returns the additive parameter updates. NaN or Inf
/// gradients surface as numeric errors naming the parameter index.
pub fn adam_step(
    state: &mut AdamState,
    grads: &[Vec<f64>],
    lr: f64,
    beta_m: f64,
    beta_v: f64,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    if grads.len() != state.m.len() {
        return Err(Error::contract(format!(
            "{} gradient slices for {} parameter groups",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != state.m[i].len() {
            return Err(Error::dim(format!(
                "gradient {i} has {} values, moments hold {}",
                g.len(),
                state.m[i].len()
            )));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient {bad} in parameter group {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let mc = 1.0 - beta_m.powi(t);
    let vc = 1.0 - beta_v.powi(t);
    let mut updates = Vec::with_capacity(grads.len());
    for (i, g) in grads.iter().enumerate() {
        let mut delta = vec![0.0; g.len()];
        for (j, &gj) in g.iter().enumerate() {
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = beta_m * *m + (1.0 - beta_m) * gj;
            *v = beta_v * *v + (1.0 - beta_v) * gj * gj;
            let m_hat = *m / mc;
            let v_hat = *v / vc;
            delta[j] = -lr * m_hat / (v_hat.sqrt() + eps);
        }
        updates.push(delta);
    }
    Ok(updates)
}

/// Optional callbacks; both see only the model, never target tensors.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Runs after each epoch when `early_metrics` is set; a returned value is
    /// logged as target_acc.
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &EegDgModel) -> Result<Option<f64>>>,
    /// Runs at checkpoint_every boundaries and right before a divergence stop.
    #[allow(clippy::type_complexity)]
    pub on_checkpoint: Option<&'a mut dyn FnMut(usize, &EegDgModel) -> Result<()>>,
}

/// Outcome of `train`; on divergence the model is the last finite snapshot
/// and `divergence` carries the reason.
pub struct TrainResult {
    pub model: EegDgModel,
    pub metrics: Vec<EpochMetrics>,
    pub divergence: Option<String>,
}

fn check_domains(domains: &[DomainDataset]) -> Result<(usize, usize, usize)> {
    if domains.len() < 2 {
        return Err(Error::config(format!(
            "training needs at least 2 source domains, got {}",
            domains.len()
        )));
    }
    let (c, t, k) = (
        domains[0].n_channels(),
        domains[0].n_timesteps(),
        domains[0].class_count,
    );
    for d in domains {
        if d.n_channels() != c || d.n_timesteps() != t {
            return Err(Error::contract(format!(
                "domain {} shape [{},{}] differs from [{c},{t}]",
                d.domain_id,
                d.n_channels(),
                d.n_timesteps()
            )));
        }
        if d.class_count != k {
            return Err(Error::contract(format!(
                "domain {} has {} classes, expected {k}",
                d.domain_id, d.class_count
            )));
        }
    }
    Ok((c, t, k))
}

/// Gathers the chosen rows of each domain into one [n·b, c, t] batch.
fn gather_batch(
    domains: &[DomainDataset],
    picks: &[Vec<usize>],
) -> Result<(Tensor, Vec<usize>, Vec<Vec<usize>>, Vec<usize>)> {
    let (c, t) = (domains[0].n_channels(), domains[0].n_timesteps());
    let row = c * t;
    let total: usize = picks.iter().map(Vec::len).sum();
    let mut data = Vec::with_capacity(total * row);
    let mut labels_all = Vec::with_capacity(total);
    let mut labels_per_domain = Vec::with_capacity(domains.len());
    let mut domain_labels = Vec::with_capacity(total);
    for (n, (domain, idxs)) in domains.iter().zip(picks).enumerate() {
        let mut dl = Vec::with_capacity(idxs.len());
        for &i in idxs {
            data.extend_from_slice(domain.flat_row(i));
            labels_all.push(domain.y[i]);
            dl.push(domain.y[i]);
            domain_labels.push(n);
        }
        labels_per_domain.push(dl);
    }
    Ok((
        Tensor::new(vec![total, c, t], data)?,
        labels_all,
        labels_per_domain,
        domain_labels,
    ))
}

struct StepOutput {
    breakdown: LossBreakdown,
    grads: Vec<Vec<f64>>,
    bn_stats: Vec<crate::model::BnBatchStats>,
}

fn training_step(
    model: &EegDgModel,
    x: &Tensor,
    labels_all: &[usize],
    labels_per_domain: &[Vec<usize>],
    domain_labels: &[usize],
    cfg: &TrainConfig,
    class_count: usize,
    rng_dropout: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let n = labels_per_domain.len();
    let b = labels_per_domain[0].len();
    let mut tape = Tape::new();
    let pass = model.forward_train(&mut tape, x, rng_dropout)?;

    let l_clc = losses::classification_loss(&mut tape, pass.fused_logits, labels_all)?;
    let mut total = l_clc;

    let need_slices = cfg.beta1 > 0.0 || cfg.beta2 > 0.0;
    let mut feat_slices = Vec::new();
    if need_slices {
        for (i, &feat) in pass.branch_feats.iter().enumerate() {
            feat_slices.push(tape.narrow(feat, 0, i * b, b)?);
        }
    }

    let mut l_mir_val = 0.0;
    let mut avg_mmd = None;
    if cfg.beta1 > 0.0 {
        let l_mir = losses::margin_invariant_loss(&mut tape, &feat_slices, &cfg.kernel)?;
        l_mir_val = tape.scalar_value(l_mir)?;
        avg_mmd = Some(l_mir_val);
        let scaled = tape.scale(l_mir, cfg.beta1)?;
        total = tape.add(total, scaled)?;
    }

    let mut l_cir_val = 0.0;
    let mut detail = None;
    if cfg.beta2 > 0.0 {
        let label_refs: Vec<&[usize]> =
            labels_per_domain.iter().map(|v| v.as_slice()).collect();
        let (l_cir, d) = losses::condition_invariant_loss(
            &mut tape,
            &feat_slices,
            &label_refs,
            cfg.alpha,
            class_count,
            None,
        )?;
        l_cir_val = tape.scalar_value(l_cir)?;
        detail = Some(d);
        let scaled = tape.scale(l_cir, cfg.beta2)?;
        total = tape.add(total, scaled)?;
    }

    let mut l_dom_val = 0.0;
    if cfg.beta_d > 0.0 {
        let l_dom = losses::domain_classification_loss(&mut tape, pass.domain_logits, domain_labels)?;
        l_dom_val = tape.scalar_value(l_dom)?;
        let scaled = tape.scale(l_dom, cfg.beta_d)?;
        total = tape.add(total, scaled)?;
    }
    let _ = n;

    let l_clc_val = tape.scalar_value(l_clc)?;
    let total_val = tape.scalar_value(total)?;
    if !total_val.is_finite() {
        return Err(Error::numeric(format!(
            "loss diverged: total {total_val} (clc {l_clc_val}, mir {l_mir_val}, \
             cir {l_cir_val}, dom {l_dom_val})"
        )));
    }
    tape.backward(total)?;
    let grads = pass
        .param_ids
        .iter()
        .map(|&id| match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(id).numel()],
        })
        .collect();

    let detail = detail.unwrap_or_default();
    Ok(StepOutput {
        breakdown: LossBreakdown {
            l_clc: l_clc_val,
            l_mir: l_mir_val,
            l_cir: l_cir_val,
            l_dom: l_dom_val,
            total: total_val,
            avg_mmd,
            delta_c: detail.delta_c,
            delta_s: detail.delta_s,
            center_gaps: detail.center_gaps,
        },
        grads,
        bn_stats: pass.bn_stats,
    })
}

/// Alignment diagnostic: MMD between each domain's eval-mode branch features
/// and their pooled mixture, over whole domains rather than minibatches so the
/// small-sample bias of the estimator does not floor the value.
fn epoch_avg_mmd(
    model: &EegDgModel,
    domains: &[DomainDataset],
    kernel: &KernelSpec,
) -> Result<f64> {
    const CHUNK: usize = 16;
    let mut per_domain = Vec::with_capacity(domains.len());
    for (i, ds) in domains.iter().enumerate() {
        let (c, t) = (ds.n_channels(), ds.n_timesteps());
        let row_len = c * t;
        let mut rows = Vec::new();
        let mut dim = 0;
        let mut start = 0;
        while start < ds.n_samples() {
            let len = CHUNK.min(ds.n_samples() - start);
            let data = ds.x.data()[start * row_len..(start + len) * row_len].to_vec();
            let x = Tensor::new(vec![len, c, t], data)?;
            let mut tape = Tape::new();
            let pass = model.forward_eval(&mut tape, &x)?;
            let feats = tape.value(pass.branch_feats[i]);
            dim = feats.shape()[1];
            rows.extend_from_slice(feats.data());
            start += len;
        }
        per_domain.push(Tensor::new(vec![ds.n_samples(), dim], rows)?);
    }
    let mut tape = Tape::new();
    let ids: Vec<_> = per_domain.into_iter().map(|t| tape.leaf(t)).collect();
    let loss = losses::margin_invariant_loss(&mut tape, &ids, kernel)?;
    tape.scalar_value(loss)
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Runs the full optimization; target data never enters this function.
pub fn train(
    domains: &[DomainDataset],
    cfg: &TrainConfig,
    mut hooks: TrainHooks,
) -> Result<TrainResult> {
    cfg.validate()?;
    let (c, t, class_count) = check_domains(domains)?;
    let arch = cfg.architecture.clone().unwrap_or_else(|| ModelConfig {
        extractor: ExtractorConfig::scaled_for(c, t),
        ..ModelConfig::default()
    });

    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(0);
    let mut rng_sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_sampler.set_stream(1);
    let mut rng_dropout = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_dropout.set_stream(2);

    let mut model = EegDgModel::init(&arch, domains.len(), class_count, c, t, &mut rng_init)?;
    let sizes: Vec<usize> = domains.iter().map(DomainDataset::n_samples).collect();
    let mut sampler = BatchSampler::new(&sizes, cfg.batch_per_domain, rng_sampler)?;
    let iters = sampler.iterations_per_epoch().max(1);

    let param_lengths: Vec<usize> =
        model.named_parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(&param_lengths);

    let mut last_good = model.clone();
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        sampler.start_epoch();
        let mut sums = [0.0f64; 5];
        for iter in 0..iters {
            let picks = sampler.draw();
            let (x, labels_all, labels_per_domain, domain_labels) =
                gather_batch(domains, &picks)?;
            let step = training_step(
                model_ref(&model),
                &x,
                &labels_all,
                &labels_per_domain,
                &domain_labels,
                cfg,
                class_count,
                &mut rng_dropout,
            );
            let mut step = match step {
                Ok(s) => s,
                Err(Error::Numeric(msg)) => {
                    let reason = format!("epoch {epoch}, iteration {iter}: {msg}");
                    if let Some(cb) = hooks.on_checkpoint.as_mut() {
                        cb(epoch, &last_good)?;
                    }
                    return Ok(TrainResult {
                        model: last_good,
                        metrics,
                        divergence: Some(reason),
                    });
                }
                Err(other) => return Err(other),
            };
            if let Some(max_norm) = cfg.grad_clip {
                clip_gradients(&mut step.grads, max_norm);
            }
            let updates = match adam_step(
                &mut adam,
                &step.grads,
                cfg.lr,
                cfg.adam_beta_m,
                cfg.adam_beta_v,
                cfg.adam_eps,
            ) {
                Ok(u) => u,
                Err(Error::Numeric(msg)) => {
                    let reason = format!("epoch {epoch}, iteration {iter}: {msg}");
                    if let Some(cb) = hooks.on_checkpoint.as_mut() {
                        cb(epoch, &last_good)?;
                    }
                    return Ok(TrainResult {
                        model: last_good,
                        metrics,
                        divergence: Some(reason),
                    });
                }
                Err(other) => return Err(other),
            };
            model.apply_updates(&updates)?;
            model.update_running_stats(&step.bn_stats, cfg.bn_momentum)?;
            sums[0] += step.breakdown.l_clc;
            sums[1] += step.breakdown.l_mir;
            sums[2] += step.breakdown.l_cir;
            sums[3] += step.breakdown.l_dom;
            sums[4] += step.breakdown.total;
        }
        let denom = iters as f64;
        let avg_mmd = if cfg.beta1 > 0.0 {
            Some(epoch_avg_mmd(&model, domains, &cfg.kernel)?)
        } else {
            None
        };
        let target_acc = if cfg.early_metrics {
            match hooks.on_epoch.as_mut() {
                Some(cb) => cb(epoch, &model)?,
                None => None,
            }
        } else {
            None
        };
        metrics.push(EpochMetrics {
            epoch,
            l_clc: sums[0] / denom,
            l_mir: sums[1] / denom,
            l_cir: sums[2] / denom,
            l_dom: sums[3] / denom,
            total: sums[4] / denom,
            avg_mmd,
            wall_ms: cfg
                .record_wall_time
                .then(|| started.elapsed().as_millis() as u64),
            target_acc,
        });
        last_good = model.clone();
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(cb) = hooks.on_checkpoint.as_mut() {
                cb(epoch, &model)?;
            }
        }
    }
    Ok(TrainResult { model, metrics, divergence: None })
}

/// Identity helper keeping the borrow of `model` immutable inside the loop.
fn model_ref(model: &EegDgModel) -> &EegDgModel {
    model
}

/// Scores a frozen model on one unseen domain; labels are used for scoring
/// only.
pub fn evaluate_on_target(model: &EegDgModel, target: &DomainDataset) -> Result<MetricsReport> {
    if target.n_channels() != model.in_channels || target.n_timesteps() != model.in_timesteps {
        return Err(Error::contract(format!(
            "target shape [{},{}] does not match model input [{},{}]",
            target.n_channels(),
            target.n_timesteps(),
            model.in_channels,
            model.in_timesteps
        )));
    }
    if target.class_count != model.class_count {
        return Err(Error::contract(format!(
            "target has {} classes, model was trained for {}",
            target.class_count, model.class_count
        )));
    }
    let pred = predict_in_chunks(model, target)?;
    metrics::report(&pred, &target.y, model.class_count)
}

/// Eval forward in fixed-size slabs to bound activation memory.
pub fn predict_in_chunks(model: &EegDgModel, ds: &DomainDataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 16;
    let (c, t) = (ds.n_channels(), ds.n_timesteps());
    let row = c * t;
    let mut out = Vec::with_capacity(ds.n_samples());
    let mut start = 0;
    while start < ds.n_samples() {
        let len = CHUNK.min(ds.n_samples() - start);
        let data = ds.x.data()[start * row..(start + len) * row].to_vec();
        let x = Tensor::new(vec![len, c, t], data)?;
        out.extend(model.predict(&x)?);
        start += len;
    }
    Ok(out)
}
