//! Feature dumps for external visualization, with an in-repo 2-D PCA.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::EegDgModel;
use crate::signal::DomainDataset;
use crate::tensor::{Tape, Tensor};

/// Two-component principal decomposition of row-major data.
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Two unit directions of length d; the second is zero when d = 1.
    pub components: [Vec<f64>; 2],
    pub projections: Vec<[f64; 2]>,
}

impl Pca2 {
    /// Maps a projection pair back into the original space.
    pub fn reconstruct(&self, p: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.components[0])
            .zip(&self.components[1])
            .map(|((m, c0), c1)| m + p[0] * c0 + p[1] * c1)
            .collect()
    }
}

/// PCA onto the top two eigenvectors of the population covariance.
pub fn pca2(x: &[f64], n: usize, d: usize) -> Result<Pca2> {
    if n == 0 || d == 0 || x.len() != n * d {
        return Err(Error::dim(format!(
            "pca needs n*d values for n={n}, d={d}, got {}",
            x.len()
        )));
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (c, (v, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - m;
        }
        for r in 0..d {
            let cr = centered[r];
            if cr == 0.0 {
                continue;
            }
            for s in r..d {
                cov[r * d + s] += cr * centered[s];
            }
        }
    }
    for r in 0..d {
        for s in 0..r {
            cov[r * d + s] = cov[s * d + r];
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64);

    let (_, vecs) = linalg::eigh(&cov, d)?;
    let mut components = [vec![0.0; d], vec![0.0; d]];
    for k in 0..2.min(d) {
        for r in 0..d {
            components[k][r] = vecs[r * d + k];
        }
    }
    let projections = x
        .chunks_exact(d)
        .map(|row| {
            let mut p = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                p[k] = row
                    .iter()
                    .zip(&mean)
                    .zip(comp)
                    .map(|((v, m), c)| (v - m) * c)
                    .sum();
            }
            p
        })
        .collect();
    Ok(Pca2 { mean, components, projections })
}

struct StageRows {
    stage: &'static str,
    dim: usize,
    /// (domain_id, label, split, features) per row.
    rows: Vec<(usize, usize, &'static str, Vec<f64>)>,
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d: usize = t.shape()[1..].iter().product();
    t.data().chunks_exact(d).map(|c| c.to_vec()).collect()
}

/// Writes one CSV covering the extractor, branch, and fused stages for every
/// sample; the last two columns append a per-stage 2-D PCA. Source rows at
/// the branch stage carry their own branch's output; target rows carry the
/// fused features, since no branch owns an unseen domain.
pub fn export_features(
    model: &EegDgModel,
    sources: &[DomainDataset],
    targets: &[DomainDataset],
    path: &Path,
) -> Result<()> {
    if sources.len() != model.n_domains {
        return Err(Error::contract(format!(
            "{} source sets for a model with {} branches",
            sources.len(),
            model.n_domains
        )));
    }
    let mut stages = [
        StageRows { stage: "extractor", dim: 0, rows: Vec::new() },
        StageRows { stage: "branch", dim: 0, rows: Vec::new() },
        StageRows { stage: "fused", dim: 0, rows: Vec::new() },
    ];
    const CHUNK: usize = 16;
    for (set_idx, ds) in sources.iter().chain(targets).enumerate() {
        let split = if set_idx < sources.len() { "source" } else { "target" };
        let (c, t) = (ds.n_channels(), ds.n_timesteps());
        if c != model.in_channels || t != model.in_timesteps {
            return Err(Error::contract(format!(
                "dataset {} shape [{c},{t}] does not match model input [{},{}]",
                ds.domain_id, model.in_channels, model.in_timesteps
            )));
        }
        let row_len = c * t;
        let mut start = 0;
        while start < ds.n_samples() {
            let len = CHUNK.min(ds.n_samples() - start);
            let data = ds.x.data()[start * row_len..(start + len) * row_len].to_vec();
            let x = Tensor::new(vec![len, c, t], data)?;
            let mut tape = Tape::new();
            let pass = model.forward_eval(&mut tape, &x)?;
            let embedding = tensor_rows(tape.value(pass.embedding));
            let fused = tensor_rows(tape.value(pass.fused));
            let branch = if split == "source" {
                tensor_rows(tape.value(pass.branch_feats[set_idx]))
            } else {
                fused.clone()
            };
            for (offset, (emb, (br, fu))) in embedding
                .into_iter()
                .zip(branch.into_iter().zip(fused))
                .enumerate()
            {
                let label = ds.y[start + offset];
                stages[0].rows.push((ds.domain_id, label, split, emb));
                stages[1].rows.push((ds.domain_id, label, split, br));
                stages[2].rows.push((ds.domain_id, label, split, fu));
            }
            start += len;
        }
    }

    let mut width = 0;
    for stage in &mut stages {
        stage.dim = stage.rows.first().map_or(0, |r| r.3.len());
        width = width.max(stage.dim);
    }

    let mut out = String::new();
    out.push_str("domain_id,label,split,stage");
    for i in 0..width {
        let _ = write!(out, ",f{i}");
    }
    out.push_str(",pca0,pca1\n");
    for stage in &stages {
        if stage.rows.is_empty() {
            continue;
        }
        let flat: Vec<f64> = stage.rows.iter().flat_map(|r| r.3.iter().copied()).collect();
        let pca = pca2(&flat, stage.rows.len(), stage.dim)?;
        for ((domain_id, label, split, feats), proj) in
            stage.rows.iter().zip(&pca.projections)
        {
            let _ = write!(out, "{domain_id},{label},{split},{}", stage.stage);
            for v in feats {
                let _ = write!(out, ",{v}");
            }
            for _ in feats.len()..width {
                out.push(',');
            }
            let _ = write!(out, ",{},{}\n", proj[0], proj[1]);
        }
    }
    std::fs::write(path, out)
        .map_err(|e| Error::ingestion(format!("writing {}: {e}", path.display())))
}
