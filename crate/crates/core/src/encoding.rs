//! Frame-descriptor encoding: PCA reduction, a diagonal-covariance GMM fitted
//! by EM, and per-frame Fisher Vectors with signed-square-root and L2
//! normalization.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor_file::{TensorFile, ENCODER_HEADER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_pca: usize,
    pub components: usize,
    pub em_iters: usize,
    pub variance_floor: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_pca: 8,
            components: 8,
            em_iters: 25,
            variance_floor: 1e-6,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_pca == 0 {
            return Err(Error::config("encoder.d_pca", "must be >= 1"));
        }
        if self.components == 0 {
            return Err(Error::config("encoder.components", "must be >= 1"));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(Error::config("encoder.variance_floor", "must be finite and > 0"));
        }
        Ok(())
    }

    pub fn fv_dim(&self) -> usize {
        2 * self.components * self.d_pca
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// D_raw × D_pca, orthonormal columns in eigenvalue-descending order.
    pub basis: Array2<f64>,
    /// All D_raw covariance eigenvalues, descending.
    pub eigenvalues: Array1<f64>,
}

impl PcaModel {
    pub fn fit(frames: ArrayView2<f64>, d_pca: usize) -> Result<Self> {
        let (n, d_raw) = frames.dim();
        if d_pca == 0 || d_pca > d_raw {
            return Err(Error::Invalid(format!("d_pca must be in 1..={d_raw}, got {d_pca}")));
        }
        if n <= d_pca {
            return Err(Error::Invalid(format!("PCA needs more than {d_pca} samples, got {n}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("PCA input contains non-finite values".into()));
        }
        let mean = frames.mean_axis(Axis(0)).expect("n > 0");
        let centered = &frames - &mean;
        let cov = centered.t().dot(&centered) / (n - 1) as f64;
        let eig = SymmetricEigen::new(DMatrix::from_fn(d_raw, d_raw, |i, j| cov[[i, j]]));

        let mut order: Vec<usize> = (0..d_raw).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let eigenvalues = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i].max(0.0)));

        let top = eigenvalues[0];
        let effective_rank = eigenvalues
            .iter()
            .filter(|&&l| top > 0.0 && l > top * 1e-12 * d_raw as f64)
            .count();
        if d_pca > effective_rank {
            return Err(Error::RankDeficient {
                requested: d_pca,
                effective_rank,
            });
        }

        let mut basis = Array2::zeros((d_raw, d_pca));
        for (col, &src) in order.iter().take(d_pca).enumerate() {
            let v = eig.eigenvectors.column(src);
            // Fix the sign so the largest-magnitude entry is positive.
            let pivot = (0..d_raw)
                .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                .expect("d_raw > 0");
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..d_raw {
                basis[[r, col]] = sign * v[r];
            }
        }
        Ok(PcaModel {
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn d_raw(&self) -> usize {
        self.basis.nrows()
    }

    pub fn d_pca(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, frame: ArrayView1<f64>) -> Result<Array1<f64>> {
        if frame.len() != self.d_raw() {
            return Err(Error::dim("pca projection", self.d_raw(), frame.len()));
        }
        let mut out = Array1::zeros(self.d_pca());
        self.project_into(frame, out.view_mut());
        Ok(out)
    }

    /// Plain per-row loop, so a frame projects to the same bits whether it
    /// is encoded alone or as part of a sequence.
    fn project_into(&self, frame: ArrayView1<f64>, mut out: ndarray::ArrayViewMut1<f64>) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..frame.len() {
                acc += (frame[j] - self.mean[j]) * self.basis[[j, c]];
            }
            *o = acc;
        }
    }

    pub fn project_rows(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        if frames.ncols() != self.d_raw() {
            return Err(Error::dim("pca projection", self.d_raw(), frames.ncols()));
        }
        let mut out = Array2::zeros((frames.nrows(), self.d_pca()));
        for (row, o) in frames.rows().into_iter().zip(out.rows_mut()) {
            self.project_into(row, o);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, coords: ArrayView1<f64>) -> Array1<f64> {
        self.basis.dot(&coords) + &self.mean
    }

    pub fn retained_variance_fraction(&self) -> f64 {
        let total: f64 = self.eigenvalues.sum();
        if total <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().take(self.d_pca()).sum::<f64>() / total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Array1<f64>,
    /// K × D
    pub means: Array2<f64>,
    /// K × D diagonal variances
    pub variances: Array2<f64>,
    pub variance_floor: f64,
}

/// Result of EM: the model plus the mean per-sample log-likelihood before
/// the first iteration and after every iteration.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood: Vec<f64>,
    pub reinitialized: usize,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    fn log_norm(&self) -> Vec<f64> {
        (0..self.components())
            .map(|k| {
                let logdet: f64 = self.variances.row(k).iter().map(|v| v.ln()).sum();
                self.weights[k].ln() - 0.5 * (self.dim() as f64 * LN_2PI + logdet)
            })
            .collect()
    }

    /// Log joint `ln w_k + ln N(x | mu_k, sigma_k^2)` for every component.
    fn log_joint(&self, x: ArrayView1<f64>, log_norm: &[f64], out: &mut [f64]) {
        for k in 0..self.components() {
            let mu = self.means.row(k);
            let var = self.variances.row(k);
            let mut q = 0.0;
            for d in 0..x.len() {
                let diff = x[d] - mu[d];
                q += diff * diff / var[d];
            }
            out[k] = log_norm[k] - 0.5 * q;
        }
    }

    /// Posterior responsibilities of each component for `x`.
    pub fn responsibilities(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let mut lj = vec![0.0; self.components()];
        self.log_joint(x, &self.log_norm(), &mut lj);
        let lse = log_sum_exp(&lj);
        Array1::from_iter(lj.iter().map(|l| (l - lse).exp()))
    }

    pub fn mean_log_likelihood(&self, frames: ArrayView2<f64>) -> f64 {
        let ln = self.log_norm();
        let mut lj = vec![0.0; self.components()];
        let mut total = 0.0;
        for x in frames.rows() {
            self.log_joint(x, &ln, &mut lj);
            total += log_sum_exp(&lj);
        }
        total / frames.nrows() as f64
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits a diagonal GMM. Initialization picks a random datum, then repeatedly
/// the datum farthest from all chosen centers; one hard assignment turns the
/// centers into means, variances and weights. EM then runs `em_iters` times.
pub fn fit_gmm(
    frames: ArrayView2<f64>,
    k: usize,
    em_iters: usize,
    variance_floor: f64,
    rng: &mut Rng,
) -> Result<GmmFit> {
    let (n, d) = frames.dim();
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("GMM needs N >= K >= 1, got N={n}, K={k}")));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("GMM input contains non-finite values".into()));
    }
    let global_var = frames
        .var_axis(Axis(0), 0.0)
        .mapv(|v| v.max(variance_floor));

    // Farthest-point centers.
    let mut centers = vec![rng.random_range(0..n)];
    let mut min_d: Vec<f64> = frames.rows().into_iter().map(|x| sq_dist(x, frames.row(centers[0]))).collect();
    while centers.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| min_d[a].total_cmp(&min_d[b]).then(b.cmp(&a)))
            .expect("n > 0");
        centers.push(next);
        for (i, x) in frames.rows().into_iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(x, frames.row(next)));
        }
    }

    let mut assign = vec![0usize; n];
    for (i, x) in frames.rows().into_iter().enumerate() {
        let mut best = (f64::INFINITY, 0);
        for (c, &ci) in centers.iter().enumerate() {
            let dd = sq_dist(x, frames.row(ci));
            if dd < best.0 {
                best = (dd, c);
            }
        }
        assign[i] = best.1;
    }
    let mut resp = Array2::<f64>::zeros((n, k));
    for (i, &a) in assign.iter().enumerate() {
        resp[[i, a]] = 1.0;
    }
    let mut model = GmmModel {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: Array2::zeros((k, d)),
        variances: Array2::ones((k, d)),
        variance_floor,
    };
    let mut reinitialized = maximize(&mut model, frames, &resp, &global_var, rng);

    let mut trace = Vec::with_capacity(em_iters + 1);
    let mut lj = vec![0.0; k];
    for _ in 0..em_iters {
        let ln = model.log_norm();
        let mut total = 0.0;
        for (i, x) in frames.rows().into_iter().enumerate() {
            model.log_joint(x, &ln, &mut lj);
            let lse = log_sum_exp(&lj);
            total += lse;
            for c in 0..k {
                resp[[i, c]] = (lj[c] - lse).exp();
            }
        }
        trace.push(total / n as f64);
        reinitialized += maximize(&mut model, frames, &resp, &global_var, rng);
    }
    trace.push(model.mean_log_likelihood(frames));
    if model.weights.iter().chain(model.means.iter()).chain(model.variances.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("EM produced non-finite GMM parameters".into()));
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        reinitialized,
    })
}

/// M-step with variance flooring. Components with vanishing mass are reset to
/// a random datum. Returns the number of resets.
fn maximize(
    model: &mut GmmModel,
    frames: ArrayView2<f64>,
    resp: &Array2<f64>,
    global_var: &Array1<f64>,
    rng: &mut Rng,
) -> usize {
    let n = frames.nrows();
    let k = model.components();
    let mass = resp.sum_axis(Axis(0));
    let sums = resp.t().dot(&frames);
    let mut resets = 0;
    for c in 0..k {
        if mass[c] <= f64::EPSILON * n as f64 {
            let pick = rng.random_range(0..n);
            log::warn!("GMM component {c} lost all mass; reinitializing from datum {pick}");
            model.means.row_mut(c).assign(&frames.row(pick));
            model.variances.row_mut(c).assign(global_var);
            model.weights[c] = 1.0 / n as f64;
            resets += 1;
            continue;
        }
        let mu = &sums.row(c) / mass[c];
        let mut var = Array1::<f64>::zeros(frames.ncols());
        for (i, x) in frames.rows().into_iter().enumerate() {
            let r = resp[[i, c]];
            if r == 0.0 {
                continue;
            }
            for d in 0..x.len() {
                let diff = x[d] - mu[d];
                var[d] += r * diff * diff;
            }
        }
        var.mapv_inplace(|v| (v / mass[c]).max(model.variance_floor));
        model.means.row_mut(c).assign(&mu);
        model.variances.row_mut(c).assign(&var);
        model.weights[c] = mass[c] / n as f64;
    }
    let total = model.weights.sum();
    model.weights /= total;
    resets
}

/// Normalized Fisher Vector of one frame: mean-gradient block (K·D) followed
/// by variance-gradient block (K·D).
#[derive(Debug, Clone, PartialEq)]
pub struct FisherVector(pub Array1<f64>);

/// Unnormalized Fisher Vector.
pub fn fisher_vector_raw(gmm: &GmmModel, frame: ArrayView1<f64>) -> Result<Array1<f64>> {
    let (k, d) = (gmm.components(), gmm.dim());
    if frame.len() != d {
        return Err(Error::dim("fisher vector input", d, frame.len()));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("fisher vector input is not finite".into()));
    }
    let gamma = gmm.responsibilities(frame);
    let mut out = Array1::zeros(2 * k * d);
    for c in 0..k {
        let w = gmm.weights[c];
        let mean_scale = gamma[c] / w.sqrt();
        let var_scale = gamma[c] / (2.0 * w).sqrt();
        for j in 0..d {
            let u = (frame[j] - gmm.means[[c, j]]) / gmm.variances[[c, j]].sqrt();
            out[c * d + j] = mean_scale * u;
            out[k * d + c * d + j] = var_scale * (u * u - 1.0);
        }
    }
    Ok(out)
}

/// Signed square root then L2 normalization. A zero vector stays zero.
pub fn normalize_fv(mut v: Array1<f64>) -> Array1<f64> {
    v.mapv_inplace(|x| x.signum() * x.abs().sqrt());
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

pub fn encode_fv(gmm: &GmmModel, frame: ArrayView1<f64>) -> Result<FisherVector> {
    Ok(FisherVector(normalize_fv(fisher_vector_raw(gmm, frame)?)))
}

/// PCA basis plus GMM: maps raw frame descriptors to Fisher Vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FvEncoder {
    pub pca: PcaModel,
    pub gmm: GmmModel,
}

impl FvEncoder {
    /// Fits PCA on the stacked frames, then the GMM on their projections.
    pub fn fit(frames: ArrayView2<f64>, config: &EncoderConfig, rng: &mut Rng) -> Result<(Self, GmmFit)> {
        config.validate()?;
        let pca = PcaModel::fit(frames, config.d_pca)?;
        let projected = pca.project_rows(frames)?;
        let fit = fit_gmm(
            projected.view(),
            config.components,
            config.em_iters,
            config.variance_floor,
            rng,
        )?;
        Ok((
            FvEncoder {
                pca,
                gmm: fit.model.clone(),
            },
            fit,
        ))
    }

    pub fn d_raw(&self) -> usize {
        self.pca.d_raw()
    }

    pub fn fv_dim(&self) -> usize {
        2 * self.gmm.components() * self.gmm.dim()
    }

    pub fn encode_frame(&self, frame: ArrayView1<f64>) -> Result<FisherVector> {
        encode_fv(&self.gmm, self.pca.project(frame)?.view())
    }

    /// One Fisher Vector row per input frame.
    pub fn encode_sequence(&self, seq: ArrayView2<f64>) -> Result<Array2<f64>> {
        if seq.ncols() != self.d_raw() {
            return Err(Error::dim("encode_sequence descriptor", self.d_raw(), seq.ncols()));
        }
        let projected = self.pca.project_rows(seq)?;
        let mut out = Array2::zeros((seq.nrows(), self.fv_dim()));
        for (z, mut row) in projected.rows().into_iter().zip(out.rows_mut()) {
            row.assign(&encode_fv(&self.gmm, z)?.0);
        }
        Ok(out)
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let mut f = TensorFile::with_role("encoder");
        f.push_meta("variance_floor", self.gmm.variance_floor);
        f.push_vector("pca.mean", &self.pca.mean);
        f.push_matrix("pca.basis", &self.pca.basis);
        f.push_vector("pca.eigenvalues", &self.pca.eigenvalues);
        f.push_vector("gmm.weights", &self.gmm.weights);
        f.push_matrix("gmm.means", &self.gmm.means);
        f.push_matrix("gmm.variances", &self.gmm.variances);
        f
    }

    pub fn from_tensor_file(f: &TensorFile, path: &Path) -> Result<Self> {
        let variance_floor = f
            .meta("variance_floor")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::format(path, "missing meta variance_floor"))?;
        let pca = PcaModel {
            mean: f.vector("pca.mean", path)?,
            basis: f.matrix("pca.basis", path)?,
            eigenvalues: f.vector("pca.eigenvalues", path)?,
        };
        let gmm = GmmModel {
            weights: f.vector("gmm.weights", path)?,
            means: f.matrix("gmm.means", path)?,
            variances: f.matrix("gmm.variances", path)?,
            variance_floor,
        };
        if pca.mean.len() != pca.basis.nrows()
            || gmm.means.ncols() != pca.basis.ncols()
            || gmm.means.dim() != gmm.variances.dim()
            || gmm.weights.len() != gmm.means.nrows()
        {
            return Err(Error::format(path, "inconsistent encoder tensor shapes"));
        }
        Ok(FvEncoder { pca, gmm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file().save(ENCODER_HEADER, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = TensorFile::load(ENCODER_HEADER, path)?;
        Self::from_tensor_file(&f, path)
    }
}

/// Segment-level descriptor: the mean of the per-frame Fisher Vectors.
pub fn mean_pool(encoded: ArrayView2<f64>) -> Result<Array1<f64>> {
    encoded
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::Invalid("cannot pool an empty sequence".into()))
}
