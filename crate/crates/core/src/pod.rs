//! Pooled outputs distillation between a frozen teacher and the student.
//!
//! A stage map has layout `(B, C, W, H)`. Each mode sums a different subset
//! of the non-batch axes before the teacher and student statistics are
//! compared: the more axes pooled, the more freedom the student has to
//! rearrange its activations.

use serde::{Deserialize, Serialize};

use crate::backbone::StageVars;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PodMode {
    /// No pooling; every activation is matched.
    Pixel,
    /// Sum over channels.
    Channel,
    /// Sum over both spatial axes.
    Gap,
    /// Sum over the width axis.
    Width,
    /// Sum over the height axis.
    Height,
    /// Width loss plus height loss.
    Spatial,
}

impl PodMode {
    pub const ALL: [PodMode; 6] = [
        PodMode::Pixel,
        PodMode::Channel,
        PodMode::Gap,
        PodMode::Width,
        PodMode::Height,
        PodMode::Spatial,
    ];

    /// Axes of a `(B, C, W, H)` map summed away by this mode. `None` for the
    /// composite spatial mode.
    pub fn pooled_axes(self) -> Option<&'static [usize]> {
        match self {
            PodMode::Pixel => Some(&[]),
            PodMode::Channel => Some(&[1]),
            PodMode::Gap => Some(&[2, 3]),
            PodMode::Width => Some(&[2]),
            PodMode::Height => Some(&[3]),
            PodMode::Spatial => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PodMode::Pixel => "pixel",
            PodMode::Channel => "channel",
            PodMode::Gap => "gap",
            PodMode::Width => "width",
            PodMode::Height => "height",
            PodMode::Spatial => "spatial",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PodConfig {
    /// Weight of the intermediate-map term.
    pub lambda_c: f64,
    /// Weight of the flat-embedding term.
    pub lambda_f: f64,
    pub mode: PodMode,
    /// Square activations elementwise before pooling.
    pub squared_features: bool,
    /// L2-normalize each pooled vector before the distance.
    pub normalize_pooled: bool,
}

impl Default for PodConfig {
    fn default() -> Self {
        PodConfig {
            lambda_c: 3.0,
            lambda_f: 1.0,
            mode: PodMode::Spatial,
            squared_features: true,
            normalize_pooled: true,
        }
    }
}

impl PodConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_f", self.lambda_f)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.lambda_c == 0.0 && self.lambda_f == 0.0
    }
}

fn pooled_single(g: &mut Graph, a: Var, b: Var, axes: &[usize], cfg: &PodConfig) -> Result<Var> {
    let batch = g.value(a).shape()[0];
    let mut stats = [a, b];
    for s in stats.iter_mut() {
        let mut x = *s;
        if cfg.squared_features {
            x = g.square(x)?;
        }
        if !axes.is_empty() {
            x = g.sum_axes(x, axes)?;
        }
        let n = g.value(x).numel() / batch;
        x = g.reshape(x, &[batch, n])?;
        if cfg.normalize_pooled {
            x = g.l2_normalize(x, NORM_EPS)?;
        }
        *s = x;
    }
    let d = g.sq_dist(stats[0], stats[1])?;
    g.mean(d)
}

/// Distillation loss between two stage maps of identical `(B, C, W, H)` shape,
/// averaged over the batch. Uses `mode` rather than `cfg.mode`.
pub fn pod_pooled(g: &mut Graph, a: Var, b: Var, mode: PodMode, cfg: &PodConfig) -> Result<Var> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb || sa.len() != 4 {
        return Err(Error::shape("pod_pooled", format!("{sa:?} vs {sb:?}, expected equal (B, C, W, H)")));
    }
    match mode.pooled_axes() {
        Some(axes) => pooled_single(g, a, b, axes, cfg),
        None => {
            let w = pooled_single(g, a, b, &[2], cfg)?;
            let h = pooled_single(g, a, b, &[3], cfg)?;
            g.add(w, h)
        }
    }
}

/// Batch mean of squared distances between L2-normalized `(B, D)` embeddings; lies in `[0, 4]`.
pub fn pod_flat(g: &mut Graph, teacher: Var, student: Var) -> Result<Var> {
    let (st, ss) = (g.value(teacher).shape(), g.value(student).shape());
    if st != ss || st.len() != 2 {
        return Err(Error::shape("pod_flat", format!("{st:?} vs {ss:?}, expected equal (B, D)")));
    }
    let t = g.l2_normalize(teacher, NORM_EPS)?;
    let s = g.l2_normalize(student, NORM_EPS)?;
    let d = g.sq_dist(t, s)?;
    g.mean(d)
}

/// `scale · (λ_c / S · Σ_stages pod_pooled + λ_f · pod_flat)` with `S` the number of stage maps.
///
/// Terms whose weight is zero are not built.
pub fn pod_final(
    g: &mut Graph,
    teacher: &StageVars,
    student: &StageVars,
    cfg: &PodConfig,
    scale: f64,
) -> Result<Var> {
    cfg.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::contract(format!("pod_final scale must be positive, got {scale}")));
    }
    let stages = teacher.stage_maps.len();
    if stages != student.stage_maps.len() || stages == 0 {
        return Err(Error::shape(
            "pod_final",
            format!("{stages} teacher stages vs {} student stages", student.stage_maps.len()),
        ));
    }
    let mut terms = Vec::new();
    if cfg.lambda_c > 0.0 {
        let mut acc: Option<Var> = None;
        for (&t, &s) in teacher.stage_maps.iter().zip(&student.stage_maps) {
            let l = pod_pooled(g, t, s, cfg.mode, cfg)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        terms.push(g.scale(acc.unwrap(), cfg.lambda_c / stages as f64)?);
    }
    if cfg.lambda_f > 0.0 {
        let f = pod_flat(g, teacher.embedding, student.embedding)?;
        terms.push(g.scale(f, cfg.lambda_f)?);
    }
    let total = match terms.as_slice() {
        [] => {
            let z = g.constant(&Tensor::zeros(&[1]));
            return Ok(z);
        }
        [one] => *one,
        [a, b] => g.add(*a, *b)?,
        _ => unreachable!(),
    };
    g.scale(total, scale)
}

/// Value-only convenience wrapper around [`pod_pooled`].
pub fn pod_pooled_value(a: &Tensor, b: &Tensor, mode: PodMode, cfg: &PodConfig) -> Result<f64> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let l = pod_pooled(&mut g, av, bv, mode, cfg)?;
    g.value(l).item()
}

pub fn pod_flat_value(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (t, s) = (g.constant(teacher), g.constant(student));
    let l = pod_flat(&mut g, t, s)?;
    g.value(l).item()
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Literal index-loop evaluation of the pooled losses.

    use super::{PodConfig, PodMode};

    fn at(v: &[f64], s: &[usize], b: usize, c: usize, w: usize, h: usize) -> f64 {
        v[((b * s[1] + c) * s[2] + w) * s[3] + h]
    }

    fn normalize(v: &mut [f64]) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
        } else {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Pooled statistic vector of sample `b`.
    fn stat(v: &[f64], s: &[usize], b: usize, mode: PodMode, cfg: &PodConfig) -> Vec<f64> {
        let f = |c, w, h| {
            let x = at(v, s, b, c, w, h);
            if cfg.squared_features {
                x * x
            } else {
                x
            }
        };
        let (cn, wn, hn) = (s[1], s[2], s[3]);
        let mut out = Vec::new();
        match mode {
            PodMode::Pixel => {
                for c in 0..cn {
                    for w in 0..wn {
                        for h in 0..hn {
                            out.push(f(c, w, h));
                        }
                    }
                }
            }
            PodMode::Channel => {
                for w in 0..wn {
                    for h in 0..hn {
                        let mut acc = 0.0;
                        for c in 0..cn {
                            acc += f(c, w, h);
                        }
                        out.push(acc);
                    }
                }
            }
            PodMode::Gap => {
                for c in 0..cn {
                    let mut acc = 0.0;
                    for w in 0..wn {
                        for h in 0..hn {
                            acc += f(c, w, h);
                        }
                    }
                    out.push(acc);
                }
            }
            PodMode::Width => {
                for c in 0..cn {
                    for h in 0..hn {
                        let mut acc = 0.0;
                        for w in 0..wn {
                            acc += f(c, w, h);
                        }
                        out.push(acc);
                    }
                }
            }
            PodMode::Height => {
                for c in 0..cn {
                    for w in 0..wn {
                        let mut acc = 0.0;
                        for h in 0..hn {
                            acc += f(c, w, h);
                        }
                        out.push(acc);
                    }
                }
            }
            PodMode::Spatial => unreachable!(),
        }
        if cfg.normalize_pooled {
            normalize(&mut out);
        }
        out
    }

    pub fn pooled(a: &[f64], b: &[f64], shape: &[usize], mode: PodMode, cfg: &PodConfig) -> f64 {
        if mode == PodMode::Spatial {
            return pooled(a, b, shape, PodMode::Width, cfg) + pooled(a, b, shape, PodMode::Height, cfg);
        }
        let mut total = 0.0;
        for n in 0..shape[0] {
            let (sa, sb) = (stat(a, shape, n, mode, cfg), stat(b, shape, n, mode, cfg));
            for i in 0..sa.len() {
                total += (sa[i] - sb[i]) * (sa[i] - sb[i]);
            }
        }
        total / shape[0] as f64
    }

    pub fn flat(t: &[f64], s: &[f64], batch: usize) -> f64 {
        let d = t.len() / batch;
        let mut total = 0.0;
        for n in 0..batch {
            let mut u = t[n * d..(n + 1) * d].to_vec();
            let mut v = s[n * d..(n + 1) * d].to_vec();
            normalize(&mut u);
            normalize(&mut v);
            for i in 0..d {
                total += (u[i] - v[i]) * (u[i] - v[i]);
            }
        }
        total / batch as f64
    }
}
