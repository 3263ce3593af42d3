//! Simulated multi-source experiment: Gaussian class clusters shared across
//! domains, with a per-domain rotation, translation, and axis scaling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::DomainDataset;
use crate::tensor::Tensor;

/// Generator parameters. Samples land in [samples, feature_dim, 1] tensors so
/// simulated domains flow through the same dataset plumbing as recordings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_source_domains: usize,
    pub n_target_domains: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Std of the shared class-center positions.
    pub class_center_scale: f64,
    /// Std of each domain's translation vector.
    pub domain_shift_scale: f64,
    /// Per-domain rotation angle drawn from [-max, max].
    pub domain_rotation_max_rad: f64,
    /// Per-domain axis scaling factor exp(u), u uniform in [-max, max].
    pub domain_log_scale_max: f64,
    /// Std of the within-class noise around each center.
    pub per_class_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_source_domains: 3,
            n_target_domains: 5,
            n_classes: 4,
            samples_per_class: 25,
            feature_dim: 2,
            class_center_scale: 3.0,
            domain_shift_scale: 1.0,
            domain_rotation_max_rad: 1.2,
            domain_log_scale_max: 0.5,
            per_class_std: 0.9,
            seed: 16,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_source_domains", self.n_source_domains),
            ("n_target_domains", self.n_target_domains),
            ("n_classes", self.n_classes),
            ("samples_per_class", self.samples_per_class),
            ("feature_dim", self.feature_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let scales = [
            ("class_center_scale", self.class_center_scale),
            ("domain_shift_scale", self.domain_shift_scale),
            ("domain_rotation_max_rad", self.domain_rotation_max_rad),
            ("domain_log_scale_max", self.domain_log_scale_max),
            ("per_class_std", self.per_class_std),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One domain's affine shift: x -> R (s .* x) + t, with R a product of
/// consecutive-axis plane rotations.
struct DomainShift {
    angles: Vec<f64>,
    scales: Vec<f64>,
    translation: Vec<f64>,
}

impl DomainShift {
    fn draw(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.feature_dim;
        let n_planes = d.saturating_sub(1);
        let angles = (0..n_planes)
            .map(|_| rng.gen_range(-1.0..=1.0) * cfg.domain_rotation_max_rad)
            .collect();
        let scales = (0..d)
            .map(|_| (rng.gen_range(-1.0..=1.0) * cfg.domain_log_scale_max).exp())
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let translation = (0..d)
            .map(|_| normal.sample(rng) * cfg.domain_shift_scale)
            .collect();
        DomainShift { angles, scales, translation }
    }

    fn apply(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.scales) {
            *v *= s;
        }
        for (i, &a) in self.angles.iter().enumerate() {
            let (c, s) = (a.cos(), a.sin());
            let (xi, xj) = (x[i], x[i + 1]);
            x[i] = c * xi - s * xj;
            x[i + 1] = s * xi + c * xj;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Generates source and target domains from one seeded stream: shared class
/// centers first, then per-domain shifts and samples, sources before targets.
pub fn generate(cfg: &SimConfig) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let d = cfg.feature_dim;
    let centers: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            (0..d)
                .map(|_| normal.sample(&mut rng) * cfg.class_center_scale)
                .collect()
        })
        .collect();
    let make_domain = |domain_id: usize, rng: &mut ChaCha8Rng| -> Result<DomainDataset> {
        let shift = DomainShift::draw(cfg, rng);
        let n = cfg.n_classes * cfg.samples_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (class, center) in centers.iter().enumerate() {
            for _ in 0..cfg.samples_per_class {
                let mut x: Vec<f64> = center
                    .iter()
                    .map(|&c| c + normal.sample(rng) * cfg.per_class_std)
                    .collect();
                shift.apply(&mut x);
                data.extend_from_slice(&x);
                labels.push(class);
            }
        }
        DomainDataset::new(Tensor::new(vec![n, d, 1], data)?, labels, domain_id, cfg.n_classes)
    };
    let mut sources = Vec::with_capacity(cfg.n_source_domains);
    for i in 0..cfg.n_source_domains {
        sources.push(make_domain(i, &mut rng)?);
    }
    let mut targets = Vec::with_capacity(cfg.n_target_domains);
    for i in 0..cfg.n_target_domains {
        targets.push(make_domain(i, &mut rng)?);
    }
    Ok((sources, targets))
}
