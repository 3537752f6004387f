//! Small convolutional feature extractor exposing its end-of-stage maps.
//!
//! Each stage is a chain of 3×3 conv blocks; the first block of every stage
//! after the first uses stride 2. A block's trailing ReLU is applied by its
//! consumer, so the map leaving a stage is the raw (signed) conv output. The
//! flat embedding is a dense layer over the global average pool of the
//! rectified last map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Blob;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub filters: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// (channels, width, height)
    pub input_shape: (usize, usize, usize),
    pub stages: Vec<StageSpec>,
    pub embedding_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_shape: (3, 8, 8),
            stages: [8, 16, 32]
                .into_iter()
                .map(|filters| StageSpec { filters, blocks: 1 })
                .collect(),
            embedding_dim: 32,
        }
    }
}

fn strided(extent: usize) -> usize {
    // 3×3 kernel, padding 1, stride 2
    (extent - 1) / 2 + 1
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (c, w, h) = self.input_shape;
        if c == 0 || w == 0 || h == 0 {
            return Err(Error::Config(format!("input_shape {:?} has a zero extent", self.input_shape)));
        }
        if self.stages.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 stages, got {}",
                self.stages.len()
            )));
        }
        if let Some(s) = self.stages.iter().find(|s| s.filters == 0 || s.blocks == 0) {
            return Err(Error::Config(format!("stage {s:?} has zero filters or blocks")));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }

    /// `(C, W, H)` of every end-of-stage map for a single sample.
    pub fn stage_shapes(&self) -> Vec<(usize, usize, usize)> {
        let (_, mut w, mut h) = self.input_shape;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i > 0 {
                    w = strided(w);
                    h = strided(h);
                }
                (s.filters, w, h)
            })
            .collect()
    }
}

/// End-of-stage maps `(B, C, W, H)` and the flat `(B, D)` embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    pub stage_maps: Vec<Tensor>,
    pub embedding: Tensor,
}

/// Graph handles to the same quantities as [`StageOutputs`].
#[derive(Clone, Debug)]
pub struct StageVars {
    pub stage_maps: Vec<Var>,
    pub embedding: Var,
}

impl StageVars {
    pub fn to_outputs(&self, g: &Graph) -> StageOutputs {
        StageOutputs {
            stage_maps: self.stage_maps.iter().map(|&v| g.value(v).clone()).collect(),
            embedding: g.value(self.embedding).clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    /// (stage, stride) of every conv, in parameter order.
    convs: Vec<(usize, usize)>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), v).with_requires_grad(true)
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut convs = Vec::new();
        let mut in_ch = config.input_shape.0;
        for (si, stage) in config.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                names.push(format!("stage{si}.block{bi}.weight"));
                params.push(kaiming_uniform(&[stage.filters, in_ch, 3, 3], in_ch * 9, rng));
                names.push(format!("stage{si}.block{bi}.bias"));
                params.push(Tensor::zeros(&[stage.filters]).with_requires_grad(true));
                convs.push((si, stride));
                in_ch = stage.filters;
            }
        }
        names.push("embed.weight".into());
        params.push(kaiming_uniform(&[in_ch, config.embedding_dim], in_ch, rng));
        names.push("embed.bias".into());
        params.push(Tensor::zeros(&[config.embedding_dim]).with_requires_grad(true));
        Ok(Backbone {
            config,
            names,
            params,
            convs,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.requires_grad())
    }

    /// Deep copy whose parameters never require grad.
    pub fn clone_frozen(&self) -> Backbone {
        let mut c = self.clone();
        c.params.iter_mut().for_each(|p| p.set_requires_grad(false));
        c
    }

    /// Inserts the parameters as graph leaves, in `params()` order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    /// Forward pass on a graph with previously bound parameters.
    pub fn forward(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<StageVars> {
        let (c, w, h) = self.config.input_shape;
        let s = g.value(input).shape();
        if s.len() != 4 || s[1..] != [c, w, h] {
            return Err(Error::shape(
                "backbone",
                format!("batch {:?} does not match input shape {:?}", s, self.config.input_shape),
            ));
        }
        let mut x = input;
        let mut maps = Vec::with_capacity(self.config.stages.len());
        for (i, &(stage, stride)) in self.convs.iter().enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            x = g.conv2d(x, params[2 * i], Some(params[2 * i + 1]), stride, 1)?;
            let last_of_stage = self.convs.get(i + 1).is_none_or(|&(next, _)| next != stage);
            if last_of_stage {
                maps.push(x);
            }
        }
        let r = g.relu(x)?;
        let shp = g.value(r).shape().to_vec();
        let pooled = g.avg_pool2d(r, shp[2], shp[3])?;
        let flat = g.reshape(pooled, &[shp[0], shp[1]])?;
        let n = params.len();
        let e = g.matmul(flat, params[n - 2])?;
        let embedding = g.add_row(e, params[n - 1])?;
        Ok(StageVars {
            stage_maps: maps,
            embedding,
        })
    }

    pub fn forward_with_stages(&self, batch: &Tensor) -> Result<StageOutputs> {
        let mut g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p)).collect();
        let x = g.constant(batch);
        let out = self.forward(&mut g, &params, x)?;
        Ok(out.to_outputs(&g))
    }

    /// Embeddings `(N, D)` of a batch, evaluated in chunks without gradient tracking.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 128;
        let n = batch.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let chunk = batch.slice_rows(start, end)?;
            parts.push(self.forward_with_stages(&chunk)?.embedding);
            start = end;
        }
        Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
    }

    pub fn save_into(&self, blob: &mut Blob, prefix: &str) {
        for (name, p) in self.named_params() {
            blob.put_tensor(&format!("{prefix}{name}"), p);
        }
    }

    /// Restores parameter values saved by [`Backbone::save_into`] into a model of the same config.
    pub fn load_from(&mut self, blob: &Blob, prefix: &str) -> Result<()> {
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            let t = blob.tensor(&format!("{prefix}{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }
}
