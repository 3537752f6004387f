//! Local similarity classifier: K cosine proxies per class, a per-class
//! softmax over proxies, and a hinged NCA loss with margin.

mod kmeans;

pub use kmeans::{kmeans, kmeans_best_of, wcss, KMeans};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Blob;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, NORM_EPS};

pub const KMEANS_ITERS: usize = 25;
pub const KMEANS_RESTARTS: usize = 32;
/// Standard deviation of the noise added to duplicated centroids.
pub const IMPRINT_JITTER: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierLoss {
    NcaHinge,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank {
    dim: usize,
    k: usize,
    classes: usize,
    /// `(classes · K, D)`, class-major. `None` until the first class is added.
    theta: Option<Tensor>,
    eta: Tensor,
    delta: f64,
}

impl ProxyBank {
    pub fn new(dim: usize, k: usize, eta: f64, delta: f64) -> Result<Self> {
        if dim == 0 || k == 0 {
            return Err(Error::Config(format!("proxy bank needs D >= 1 and K >= 1, got D={dim} K={k}")));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {eta}")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
        }
        Ok(ProxyBank {
            dim,
            k,
            classes: 0,
            theta: None,
            eta: Tensor::scalar(eta)?.with_requires_grad(true),
            delta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn eta(&self) -> f64 {
        self.eta.values()[0]
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn theta(&self) -> Option<&Tensor> {
        self.theta.as_ref()
    }

    /// The `K · D` proxy values of class `c`.
    pub fn proxies(&self, c: usize) -> &[f64] {
        let n = self.k * self.dim;
        &self.theta.as_ref().expect("empty bank").values()[c * n..(c + 1) * n]
    }

    /// Appends one class given its `(K, D)` proxies; returns its id.
    pub fn add_class(&mut self, proxies: &Tensor) -> Result<usize> {
        if proxies.shape() != [self.k, self.dim] {
            return Err(Error::shape(
                "add_class",
                format!("proxies {:?}, bank wants [{}, {}]", proxies.shape(), self.k, self.dim),
            ));
        }
        let theta = match self.theta.take() {
            None => proxies.clone(),
            Some(t) => Tensor::stack_rows(&[&t, proxies])?,
        };
        self.theta = Some(theta.with_requires_grad(true));
        self.classes += 1;
        Ok(self.classes - 1)
    }

    pub fn params_mut(&mut self) -> (Option<&mut Tensor>, &mut Tensor) {
        (self.theta.as_mut(), &mut self.eta)
    }

    /// Keeps the learned scale positive after an optimizer step.
    pub fn clamp_eta(&mut self, min: f64) {
        let v = &mut self.eta.values_mut()[0];
        *v = v.max(min);
    }

    /// Inserts `(theta, eta)` as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let theta = self
            .theta
            .as_ref()
            .ok_or_else(|| Error::contract("proxy bank has no classes"))?;
        Ok((g.leaf(theta), g.leaf(&self.eta)))
    }

    pub fn save_into(&self, blob: &mut Blob, prefix: &str) {
        if let Some(t) = &self.theta {
            blob.put_tensor(&format!("{prefix}theta"), t);
        }
        blob.put_tensor(&format!("{prefix}eta"), &self.eta);
        blob.put_f64(&format!("{prefix}delta"), self.delta);
        blob.put_ints(
            &format!("{prefix}shape"),
            &[self.dim as u64, self.k as u64, self.classes as u64],
        );
    }

    pub fn load_from(blob: &Blob, prefix: &str) -> Result<Self> {
        let shape = blob.ints(&format!("{prefix}shape"))?;
        let [dim, k, classes] = shape else {
            return Err(Error::Format("bank shape must hold [D, K, classes]".into()));
        };
        let (dim, k, classes) = (*dim as usize, *k as usize, *classes as usize);
        let mut bank = ProxyBank::new(dim, k, blob.f64(&format!("{prefix}eta"))?, blob.f64(&format!("{prefix}delta"))?)?;
        if classes > 0 {
            let t = blob.tensor(&format!("{prefix}theta"))?;
            if t.shape() != [classes * k, dim] {
                return Err(Error::Format(format!("theta shape {:?} inconsistent with bank", t.shape())));
            }
            bank.theta = Some(t.clone().with_requires_grad(true));
            bank.classes = classes;
        }
        Ok(bank)
    }
}

/// Graph form of the class scores: for each class, the proxy cosine
/// similarities weighted by their softmax over the class's K proxies.
pub fn lsc_scores_graph(g: &mut Graph, h: Var, theta: Var, k: usize) -> Result<Var> {
    let (hs, ts) = (g.value(h).shape().to_vec(), g.value(theta).shape().to_vec());
    if hs.len() != 2 || ts.len() != 2 || hs[1] != ts[1] || ts[0] % k != 0 {
        return Err(Error::shape("lsc_scores", format!("embedding {hs:?} vs proxies {ts:?} (K={k})")));
    }
    let (b, classes) = (hs[0], ts[0] / k);
    let hn = g.l2_normalize(h, NORM_EPS)?;
    let tn = g.l2_normalize(theta, NORM_EPS)?;
    let tt = g.transpose(tn)?;
    let sim = g.matmul(hn, tt)?;
    let sim = g.reshape(sim, &[b, classes, k])?;
    let weights = g.softmax(sim)?;
    let weighted = g.mul(weights, sim)?;
    g.sum_axes(weighted, &[2])
}

fn check_norms(op: &'static str, rows: &[f64], d: usize, what: &str) -> Result<()> {
    for (i, r) in rows.chunks(d).enumerate() {
        if r.iter().map(|v| v * v).sum::<f64>().sqrt() <= NORM_EPS {
            return Err(Error::numeric(op, format!("{what} {i} has zero norm; cosine undefined")));
        }
    }
    Ok(())
}

/// Class scores `(B, classes)`, each in `[-1, 1]`.
pub fn lsc_scores(h: &Tensor, bank: &ProxyBank) -> Result<Tensor> {
    let theta = bank.theta().ok_or_else(|| Error::contract("proxy bank has no classes"))?;
    if h.shape().len() != 2 || h.shape()[1] != bank.dim() {
        return Err(Error::shape("lsc_scores", format!("embedding {:?} for D={}", h.shape(), bank.dim())));
    }
    check_norms("lsc_scores", h.values(), bank.dim(), "embedding")?;
    check_norms("lsc_scores", theta.values(), bank.dim(), "proxy")?;
    let mut g = Graph::new();
    let (hv, tv) = (g.constant(h), g.constant(theta));
    let s = lsc_scores_graph(&mut g, hv, tv, bank.k())?;
    Ok(g.value(s).clone())
}

/// Single-proxy cosine classifier: `softmax_c(η · cos(θ_c, h))`.
pub fn cosine_logits(h: &Tensor, bank: &ProxyBank) -> Result<Tensor> {
    if bank.k() != 1 {
        return Err(Error::contract(format!("cosine head needs K = 1, bank has K = {}", bank.k())));
    }
    let theta = bank.theta().ok_or_else(|| Error::contract("proxy bank has no classes"))?;
    if h.shape().len() != 2 || h.shape()[1] != bank.dim() {
        return Err(Error::shape("cosine_logits", format!("embedding {:?} for D={}", h.shape(), bank.dim())));
    }
    check_norms("cosine_logits", h.values(), bank.dim(), "embedding")?;
    check_norms("cosine_logits", theta.values(), bank.dim(), "proxy")?;
    let mut g = Graph::new();
    let (hv, tv) = (g.constant(h), g.constant(theta));
    let hn = g.l2_normalize(hv, NORM_EPS)?;
    let tn = g.l2_normalize(tv, NORM_EPS)?;
    let tt = g.transpose(tn)?;
    let cos = g.matmul(hn, tt)?;
    let logits = g.scale(cos, bank.eta())?;
    let p = g.softmax(logits)?;
    Ok(g.value(p).clone())
}

/// Batch mean of `[ log Σ_{i≠y} exp(η ŷ_i) − η (ŷ_y − δ) ]_+`.
pub fn nca_hinge_graph(g: &mut Graph, yhat: Var, labels: &[usize], eta: Var, delta: f64) -> Result<Var> {
    let s = g.value(yhat).shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::contract(format!("NCA loss needs at least two classes, scores {s:?}")));
    }
    let target = g.pick(yhat, labels)?;
    let target = g.add_scalar(target, -delta)?;
    let target = g.scale_by(target, eta)?;
    let scaled = g.scale_by(yhat, eta)?;
    let others = g.logsumexp_except(scaled, labels)?;
    let l = g.sub(others, target)?;
    let l = g.relu(l)?;
    g.mean(l)
}

/// Batch mean of `−log softmax(η ŷ)_y`.
pub fn cross_entropy_graph(g: &mut Graph, yhat: Var, labels: &[usize], eta: Var) -> Result<Var> {
    let scaled = g.scale_by(yhat, eta)?;
    let p = g.softmax(scaled)?;
    let lp = g.log(p)?;
    let t = g.pick(lp, labels)?;
    let m = g.mean(t)?;
    g.scale(m, -1.0)
}

pub fn classifier_loss_graph(
    g: &mut Graph,
    kind: ClassifierLoss,
    yhat: Var,
    labels: &[usize],
    eta: Var,
    delta: f64,
) -> Result<Var> {
    match kind {
        ClassifierLoss::NcaHinge => nca_hinge_graph(g, yhat, labels, eta, delta),
        ClassifierLoss::CrossEntropy => cross_entropy_graph(g, yhat, labels, eta),
    }
}

pub fn nca_hinge_loss(yhat: &Tensor, labels: &[usize], eta: f64, delta: f64) -> Result<f64> {
    let mut g = Graph::new();
    let y = g.constant(yhat);
    let e = g.constant(&Tensor::scalar(eta)?);
    let l = nca_hinge_graph(&mut g, y, labels, e, delta)?;
    g.value(l).item()
}

/// Appends one class per entry of `features` (each `(n_c, D)`), initializing
/// its K proxies at k-means centroids of that class's embeddings.
///
/// With fewer samples than K, every sample becomes a centroid and the
/// remaining proxies are copies of those centroids plus small Gaussian noise.
pub fn imprint_new_classes(bank: &mut ProxyBank, features: &[Tensor], rng: &mut impl Rng) -> Result<Vec<usize>> {
    let jitter = Normal::new(0.0, IMPRINT_JITTER).unwrap();
    let (k, d) = (bank.k(), bank.dim());
    let mut ids = Vec::with_capacity(features.len());
    for f in features {
        if f.shape().len() != 2 || f.shape()[1] != d {
            return Err(Error::shape("imprint", format!("features {:?} for D={d}", f.shape())));
        }
        let n = f.shape()[0];
        let proxies = if n >= k {
            kmeans_best_of(f, k, KMEANS_ITERS, KMEANS_RESTARTS, rng)?.centroids
        } else {
            let base = kmeans_best_of(f, n, KMEANS_ITERS, KMEANS_RESTARTS, rng)?.centroids;
            let mut v = base.values().to_vec();
            for i in n..k {
                let src = &base.values()[(i % n) * d..(i % n + 1) * d];
                v.extend(src.iter().map(|x| x + jitter.sample(rng)));
            }
            Tensor::new(vec![k, d], v)?
        };
        ids.push(bank.add_class(&proxies)?);
    }
    Ok(ids)
}

#[cfg(test)]
pub(crate) mod oracle {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    /// Direct evaluation of the averaged class similarity.
    pub fn lsc(h: &[f64], theta: &[f64], d: usize, k: usize) -> Vec<f64> {
        let classes = theta.len() / (d * k);
        let b = h.len() / d;
        let mut out = Vec::new();
        for n in 0..b {
            let hn = &h[n * d..(n + 1) * d];
            for c in 0..classes {
                let sims: Vec<f64> = (0..k)
                    .map(|j| cos(&theta[(c * k + j) * d..(c * k + j + 1) * d], hn))
                    .collect();
                let z: f64 = sims.iter().map(|s| s.exp()).sum();
                out.push(sims.iter().map(|s| s.exp() / z * s).sum());
            }
        }
        out
    }

    pub fn cosine_softmax(h: &[f64], theta: &[f64], d: usize, eta: f64) -> Vec<f64> {
        let classes = theta.len() / d;
        let mut out = Vec::new();
        for hn in h.chunks(d) {
            let e: Vec<f64> = (0..classes)
                .map(|c| (eta * cos(&theta[c * d..(c + 1) * d], hn)).exp())
                .collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|x| x / z));
        }
        out
    }

    pub fn nca(yhat: &[f64], labels: &[usize], eta: f64, delta: f64) -> f64 {
        let c = yhat.len() / labels.len();
        let mut total = 0.0;
        for (n, &y) in labels.iter().enumerate() {
            let row = &yhat[n * c..(n + 1) * c];
            let num = (eta * (row[y] - delta)).exp();
            let den: f64 = (0..c).filter(|&i| i != y).map(|i| (eta * row[i]).exp()).sum();
            total += (-(num / den).ln()).max(0.0);
        }
        total / labels.len() as f64
    }
}
