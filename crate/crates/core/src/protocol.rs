//! Class-incremental training loop: schedule, per-task optimization with the
//! classification and distillation losses, memory updates and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, StageOutputs, StageVars};
use crate::checkpoint::Blob;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::lsc::{classifier_loss_graph, imprint_new_classes, lsc_scores, ClassifierLoss, ProxyBank};
use crate::memory::{herd_select, Budget, ExemplarMemory};
use crate::pod::{pod_final, PodConfig};
use crate::tensor::{Graph, Tensor, Var, NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchedule {
    class_order: Vec<usize>,
    initial_task_size: usize,
    increment: usize,
}

impl TaskSchedule {
    pub fn new(class_order: Vec<usize>, initial_task_size: usize, increment: usize) -> Result<Self> {
        let n = class_order.len();
        let mut seen = vec![false; n];
        for &c in &class_order {
            if c >= n || seen[c] {
                return Err(Error::Config(format!("class order {class_order:?} is not a permutation of 0..{n}")));
            }
            seen[c] = true;
        }
        if initial_task_size == 0 || initial_task_size > n {
            return Err(Error::Config(format!("initial task size {initial_task_size} for {n} classes")));
        }
        let rest = n - initial_task_size;
        if rest > 0 && (increment == 0 || !rest.is_multiple_of(increment)) {
            return Err(Error::Config(format!(
                "{rest} classes after the first task cannot be split into increments of {increment}"
            )));
        }
        Ok(TaskSchedule {
            class_order,
            initial_task_size,
            increment,
        })
    }

    /// Class order shuffled by `seed`; seed 0 keeps the natural order.
    pub fn seeded(num_classes: usize, initial_task_size: usize, increment: usize, seed: u64) -> Result<Self> {
        let mut order: Vec<usize> = (0..num_classes).collect();
        if seed != 0 {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0c1a_55e5));
        }
        Self::new(order, initial_task_size, increment)
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn initial_task_size(&self) -> usize {
        self.initial_task_size
    }

    pub fn increment(&self) -> usize {
        self.increment
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn num_tasks(&self) -> usize {
        let rest = self.num_classes() - self.initial_task_size;
        1 + if rest == 0 { 0 } else { rest / self.increment }
    }

    /// Classes seen once task `t` (0-based) has finished.
    pub fn seen_after(&self, t: usize) -> usize {
        self.initial_task_size + t * self.increment
    }

    /// Internal ids (positions in the class order) introduced by task `t`.
    pub fn new_ids(&self, t: usize) -> std::ops::Range<usize> {
        let start = if t == 0 { 0 } else { self.seen_after(t - 1) };
        start..self.seen_after(t)
    }

    /// Dataset labels introduced by task `t`.
    pub fn task_classes(&self, t: usize) -> &[usize] {
        &self.class_order[self.new_ids(t)]
    }
}

/// `sqrt(seen / new)`, the weight applied to the distillation term.
pub fn adaptive_scale(seen: usize, new: usize) -> f64 {
    (seen as f64 / new as f64).sqrt()
}

pub fn average_incremental_accuracy(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::contract("average of an empty accuracy list"));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint L2 norm cap on each step's gradients.
    pub grad_clip_norm: Option<f64>,
    /// Epochs of linear learning-rate warmup at the start of every task.
    pub warmup_epochs: usize,
    /// Classifier-only pass on a class-balanced exemplar set after every incremental task.
    pub balanced_finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-3,
            grad_clip_norm: Some(5.0),
            warmup_epochs: 5,
            balanced_finetune: false,
            finetune_epochs: 10,
            finetune_lr: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub backbone: BackboneConfig,
    pub pod: PodConfig,
    pub proxies_per_class: usize,
    pub delta: f64,
    pub eta_init: f64,
    /// Floor for the learned scale after every optimizer step.
    pub eta_min: f64,
    pub classifier_loss: ClassifierLoss,
    pub budget: Budget,
    pub train: TrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            backbone: BackboneConfig::default(),
            pod: PodConfig::default(),
            proxies_per_class: 10,
            delta: 0.6,
            eta_init: 1.0,
            eta_min: 1.0,
            classifier_loss: ClassifierLoss::NcaHinge,
            budget: Budget::PerClass(20),
            train: TrainConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pod.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", t.momentum)));
        }
        if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", t.weight_decay)));
        }
        if let Some(c) = t.grad_clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("grad_clip_norm must be positive, got {c}")));
            }
        }
        if t.warmup_epochs >= t.epochs {
            return Err(Error::Config("warmup_epochs must be smaller than epochs".into()));
        }
        if t.balanced_finetune && (t.finetune_epochs == 0 || !(t.finetune_lr > 0.0)) {
            return Err(Error::Config("balanced fine-tuning needs positive epochs and lr".into()));
        }
        let m = match self.budget {
            Budget::PerClass(m) | Budget::Total(m) => m,
        };
        if m == 0 {
            return Err(Error::Config("memory budget must be positive".into()));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_init) {
            return Err(Error::Config(format!(
                "eta_min must lie in (0, eta_init = {}], got {}",
                self.eta_init, self.eta_min
            )));
        }
        ProxyBank::new(self.backbone.embedding_dim, self.proxies_per_class, self.eta_init, self.delta)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Nearest mean of exemplars.
    Nme,
    /// Classifier head scores.
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// 1-based task number.
    pub task_index: usize,
    pub seen_classes: usize,
    pub nme_accuracy: f64,
    pub cnn_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tasks: Vec<TaskRecord>,
    pub avg_incremental_nme: f64,
    pub avg_incremental_cnn: f64,
    pub balanced_finetune: bool,
}

impl RunMetrics {
    pub fn from_records(tasks: Vec<TaskRecord>, balanced_finetune: bool) -> Result<Self> {
        let nme: Vec<f64> = tasks.iter().map(|r| r.nme_accuracy).collect();
        let cnn: Vec<f64> = tasks.iter().map(|r| r.cnn_accuracy).collect();
        Ok(RunMetrics {
            avg_incremental_nme: average_incremental_accuracy(&nme)?,
            avg_incremental_cnn: average_incremental_accuracy(&cnn)?,
            tasks,
            balanced_finetune,
        })
    }

    pub fn avg(&self, mode: InferenceMode) -> f64 {
        match mode {
            InferenceMode::Nme => self.avg_incremental_nme,
            InferenceMode::Cnn => self.avg_incremental_cnn,
        }
    }
}

/// Everything needed to continue a run after a finished task.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: Backbone,
    pub bank: ProxyBank,
    pub memory: ExemplarMemory,
    pub rng: ChaCha8Rng,
    pub records: Vec<TaskRecord>,
}

impl RunState {
    pub fn fresh(config: &ProtocolConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Backbone::new(config.backbone.clone(), &mut rng)?;
        let bank = ProxyBank::new(
            config.backbone.embedding_dim,
            config.proxies_per_class,
            config.eta_init,
            config.delta,
        )?;
        Ok(RunState {
            model,
            bank,
            memory: ExemplarMemory::new(config.budget),
            rng,
            records: Vec::new(),
        })
    }

    pub fn tasks_done(&self) -> usize {
        self.records.len()
    }

    pub fn to_blob(&self) -> Blob {
        let mut b = Blob::new();
        self.model.save_into(&mut b, "model.");
        self.bank.save_into(&mut b, "bank.");
        self.memory.save_into(&mut b, "memory.");
        let seed = self.rng.get_seed();
        let seed_words: Vec<u64> = seed.chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        b.put_ints("rng.seed", &seed_words);
        let pos = self.rng.get_word_pos();
        b.put_ints("rng.state", &[self.rng.get_stream(), pos as u64, (pos >> 64) as u64]);
        let rec: Vec<f64> = self
            .records
            .iter()
            .flat_map(|r| [r.task_index as f64, r.seen_classes as f64, r.nme_accuracy, r.cnn_accuracy])
            .collect();
        if !rec.is_empty() {
            b.put_tensor("records", &Tensor::from_parts(vec![self.records.len(), 4], rec));
        }
        b
    }

    pub fn from_blob(blob: &Blob, config: &ProtocolConfig) -> Result<Self> {
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut model = Backbone::new(config.backbone.clone(), &mut scratch)?;
        model.load_from(blob, "model.")?;
        let bank = ProxyBank::load_from(blob, "bank.")?;
        let memory = ExemplarMemory::load_from(blob, "memory.")?;
        let words = blob.ints("rng.seed")?;
        let state = blob.ints("rng.state")?;
        if words.len() != 4 || state.len() != 3 {
            return Err(Error::Format("malformed rng state".into()));
        }
        let mut seed = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state[0]);
        rng.set_word_pos(state[1] as u128 | ((state[2] as u128) << 64));
        let records = if blob.contains("records") {
            blob.tensor("records")?
                .values()
                .chunks(4)
                .map(|r| TaskRecord {
                    task_index: r[0] as usize,
                    seen_classes: r[1] as usize,
                    nme_accuracy: r[2],
                    cnn_accuracy: r[3],
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(RunState {
            model,
            bank,
            memory,
            rng,
            records,
        })
    }
}

/// Training and test data relabelled to internal class ids (positions in the class order).
struct Relabelled {
    train: Split,
    test: Split,
}

fn relabel(dataset: &Dataset, schedule: &TaskSchedule) -> Result<Relabelled> {
    if dataset.num_classes != schedule.num_classes() {
        return Err(Error::contract(format!(
            "dataset has {} classes, schedule covers {}",
            dataset.num_classes,
            schedule.num_classes()
        )));
    }
    let mut inv = vec![0; schedule.num_classes()];
    for (id, &label) in schedule.class_order().iter().enumerate() {
        inv[label] = id;
    }
    let map = |s: &Split| -> Result<Split> {
        let labels = s
            .labels
            .iter()
            .map(|&l| inv.get(l).copied().ok_or_else(|| Error::contract(format!("label {l} outside schedule"))))
            .collect::<Result<_>>()?;
        Ok(Split {
            images: s.images.clone(),
            labels,
        })
    };
    Ok(Relabelled {
        train: map(&dataset.train)?,
        test: map(&dataset.test)?,
    })
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let d = t.shape()[1];
    let mut v = t.values().to_vec();
    for row in v.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n <= NORM_EPS {
            return Err(Error::numeric("embedding", "zero-norm embedding"));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(t.shape().to_vec(), v)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted internal class ids for precomputed embeddings.
pub fn predict(
    embeddings: &Tensor,
    bank: &ProxyBank,
    memory: &ExemplarMemory,
    mode: InferenceMode,
) -> Result<Vec<usize>> {
    let classes = bank.num_classes();
    match mode {
        InferenceMode::Cnn => {
            let s = lsc_scores(embeddings, bank)?;
            Ok(s.values().chunks(classes).map(argmax).collect())
        }
        InferenceMode::Nme => {
            let means = memory.means();
            let table: Vec<&Vec<f64>> = (0..classes)
                .map(|c| {
                    means
                        .get(&c)
                        .ok_or_else(|| Error::contract(format!("NME needs a mean for class {c}")))
                })
                .collect::<Result<_>>()?;
            let units = unit_rows(embeddings)?;
            let d = bank.dim();
            Ok(units
                .values()
                .chunks(d)
                .map(|u| {
                    let sims: Vec<f64> = table.iter().map(|m| m.iter().zip(u).map(|(a, b)| a * b).sum()).collect();
                    argmax(&sims)
                })
                .collect())
        }
    }
}

/// Accuracy on `test` (labels are internal ids and must all be known to the bank).
pub fn evaluate(
    model: &Backbone,
    bank: &ProxyBank,
    memory: &ExemplarMemory,
    test: &Split,
    mode: InferenceMode,
) -> Result<f64> {
    check_seen(test, bank)?;
    let emb = model.embed(&test.images)?;
    accuracy(&predict(&emb, bank, memory, mode)?, &test.labels)
}

fn check_seen(test: &Split, bank: &ProxyBank) -> Result<()> {
    if test.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    if let Some(&l) = test.labels.iter().find(|&&l| l >= bank.num_classes()) {
        return Err(Error::contract(format!("test label {l} is not a seen class ({} seen)", bank.num_classes())));
    }
    Ok(())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; `decay[i]` selects weight decay.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], decay: &[bool], lr: f64) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let vel = &mut self.velocity[i];
            let wd = if decay[i] { self.weight_decay } else { 0.0 };
            for ((w, v), gv) in p.values_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                let d = gv + wd * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Linear ramp over the first `warmup` steps, cosine decay over the rest.
fn scheduled_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        cosine_lr(base, step - warmup, total - warmup)
    }
}

/// Rescales all gradients together so their joint L2 norm is at most `max`.
fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max: f64) {
    let norm = grads.iter().flatten().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max {
        let k = max / norm;
        grads.iter_mut().flatten().flatten().for_each(|x| *x *= k);
    }
}

/// Teacher outputs for every training row, computed once per task.
struct TeacherCache {
    outputs: StageOutputs,
}

impl TeacherCache {
    fn build(teacher: &Backbone, images: &Tensor) -> Result<Self> {
        const CHUNK: usize = 128;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            parts.push(teacher.forward_with_stages(&images.slice_rows(start, end)?)?);
            start = end;
        }
        let stages = parts[0].stage_maps.len();
        let stage_maps = (0..stages)
            .map(|l| Tensor::stack_rows(&parts.iter().map(|p| &p.stage_maps[l]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let embedding = Tensor::stack_rows(&parts.iter().map(|p| &p.embedding).collect::<Vec<_>>())?;
        Ok(TeacherCache {
            outputs: StageOutputs { stage_maps, embedding },
        })
    }

    fn bind(&self, g: &mut Graph, rows: &[usize]) -> Result<StageVars> {
        let stage_maps = self
            .outputs
            .stage_maps
            .iter()
            .map(|m| Ok(g.constant(&m.select_rows(rows)?)))
            .collect::<Result<_>>()?;
        Ok(StageVars {
            stage_maps,
            embedding: g.constant(&self.outputs.embedding.select_rows(rows)?),
        })
    }
}

/// One optimization phase over `rows` of `train` (indices into the split).
fn train_phase(
    state: &mut RunState,
    config: &ProtocolConfig,
    train: &Split,
    rows: &[usize],
    teacher: Option<(&TeacherCache, f64)>,
    classifier_only: bool,
) -> Result<()> {
    let tc = &config.train;
    let (epochs, base_lr) = if classifier_only {
        (tc.finetune_epochs, tc.finetune_lr)
    } else {
        (tc.epochs, tc.lr)
    };
    let batches_per_epoch = rows.len().div_ceil(tc.batch_size);
    let total_steps = epochs * batches_per_epoch;
    let warmup_steps = if classifier_only { 0 } else { tc.warmup_epochs.min(epochs) * batches_per_epoch };
    let mut sgd = Sgd::new(tc.momentum, tc.weight_decay);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(tc.batch_size) {
            let local: Vec<usize> = chunk.to_vec();
            let idx: Vec<usize> = local.iter().map(|&i| rows[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let lr = scheduled_lr(base_lr, step, total_steps, warmup_steps);
            step += 1;

            let mut g = Graph::new();
            let model_params: Vec<Var> = if classifier_only {
                state.model.params().iter().map(|p| g.constant(p)).collect()
            } else {
                state.model.bind(&mut g)
            };
            let (theta, eta) = state.bank.bind(&mut g)?;
            let x = g.constant(&train.images.select_rows(&idx)?);
            let student = state.model.forward(&mut g, &model_params, x)?;
            let yhat = crate::lsc::lsc_scores_graph(&mut g, student.embedding, theta, state.bank.k())?;
            let mut loss =
                classifier_loss_graph(&mut g, config.classifier_loss, yhat, &labels, eta, state.bank.delta())?;
            if let (Some((cache, scale)), false) = (teacher, classifier_only) {
                let t = cache.bind(&mut g, &local)?;
                let pod = pod_final(&mut g, &t, &student, &config.pod, scale)?;
                loss = g.add(loss, pod)?;
            }
            g.backward(loss)?;

            let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
            let mut decay = Vec::new();
            if !classifier_only {
                for (v, p) in model_params.iter().zip(state.model.params()) {
                    grads.push(g.grad(*v).map(<[f64]>::to_vec));
                    decay.push(p.shape().len() > 1);
                }
            }
            grads.push(g.grad(theta).map(<[f64]>::to_vec));
            decay.push(true);
            grads.push(g.grad(eta).map(<[f64]>::to_vec));
            decay.push(false);

            if let Some(max) = tc.grad_clip_norm {
                clip_global_norm(&mut grads, max);
            }
            let (model, bank) = (&mut state.model, &mut state.bank);
            let mut params: Vec<&mut Tensor> = Vec::new();
            if !classifier_only {
                params.extend(model.params_mut().iter_mut());
            }
            let (theta_t, eta_t) = bank.params_mut();
            params.push(theta_t.expect("bank bound above"));
            params.push(eta_t);
            sgd.step(&mut params, &grads, &decay, lr);
            bank.clamp_eta(config.eta_min);
        }
    }
    Ok(())
}

/// Runs task `t` (0-based) on top of `state` and returns its record.
pub fn run_task(
    state: &mut RunState,
    t: usize,
    schedule: &TaskSchedule,
    config: &ProtocolConfig,
    dataset: &Dataset,
) -> Result<TaskRecord> {
    let data = relabel(dataset, schedule)?;
    run_task_relabelled(state, t, schedule, config, &data).map_err(|e| e.at_task(t + 1))
}

fn run_task_relabelled(
    state: &mut RunState,
    t: usize,
    schedule: &TaskSchedule,
    config: &ProtocolConfig,
    data: &Relabelled,
) -> Result<TaskRecord> {
    let new_ids = schedule.new_ids(t);
    let seen = schedule.seen_after(t);
    if state.bank.num_classes() != new_ids.start {
        return Err(Error::contract(format!(
            "bank holds {} classes, task expects {}",
            state.bank.num_classes(),
            new_ids.start
        )));
    }

    // (1) teacher snapshot
    let teacher = (t > 0).then(|| state.model.clone_frozen());

    // (2) imprint new-class proxies from current features
    let class_rows: Vec<Vec<usize>> = new_ids.clone().map(|c| data.train.indices_of(c)).collect();
    let mut feats = Vec::with_capacity(class_rows.len());
    for (c, rows) in new_ids.clone().zip(&class_rows) {
        if rows.is_empty() {
            return Err(Error::contract(format!("class {c} has no training samples")));
        }
        feats.push(state.model.embed(&data.train.images.select_rows(rows)?)?);
    }
    imprint_new_classes(&mut state.bank, &feats, &mut state.rng)?;

    // (3) train on new data plus exemplars
    let mut rows: Vec<usize> = class_rows.iter().flatten().copied().collect();
    for (_, ex) in state.memory.iter() {
        rows.extend_from_slice(ex);
    }
    let cache = match &teacher {
        Some(tm) => Some(TeacherCache::build(tm, &data.train.images.select_rows(&rows)?)?),
        None => None,
    };
    let scale = adaptive_scale(seen, new_ids.len());
    train_phase(
        state,
        config,
        &data.train,
        &rows,
        cache.as_ref().map(|c| (c, scale)),
        false,
    )?;

    // (4) herding for the new classes, then budget enforcement
    for (c, rows) in new_ids.clone().zip(&class_rows) {
        let emb = unit_rows(&state.model.embed(&data.train.images.select_rows(rows)?)?)?;
        let m = state.memory.slots_for(c, seen).min(rows.len());
        let picks = if m == 0 { Vec::new() } else { herd_select(&emb, m)? };
        state.memory.insert(c, picks.iter().map(|&i| rows[i]).collect());
    }
    state.memory.rebuild(seen);

    if t > 0 && config.train.balanced_finetune {
        let balanced: Vec<usize> = state.memory.iter().flat_map(|(_, ex)| ex.iter().copied()).collect();
        if !balanced.is_empty() {
            train_phase(state, config, &data.train, &balanced, None, true)?;
        }
    }

    // (5) evaluation on every seen class
    let model = &state.model;
    let train_images = &data.train.images;
    state
        .memory
        .class_means(|idx| model.embed(&train_images.select_rows(idx)?))?;
    let test_rows: Vec<usize> = (0..data.test.len()).filter(|&i| data.test.labels[i] < seen).collect();
    if test_rows.is_empty() {
        return Err(Error::contract("no test samples for the seen classes"));
    }
    let test = Split {
        images: data.test.images.select_rows(&test_rows)?,
        labels: test_rows.iter().map(|&i| data.test.labels[i]).collect(),
    };
    check_seen(&test, &state.bank)?;
    let emb = state.model.embed(&test.images)?;
    let nme = accuracy(&predict(&emb, &state.bank, &state.memory, InferenceMode::Nme)?, &test.labels)?;
    let cnn = accuracy(&predict(&emb, &state.bank, &state.memory, InferenceMode::Cnn)?, &test.labels)?;

    // (6)
    let record = TaskRecord {
        task_index: t + 1,
        seen_classes: seen,
        nme_accuracy: nme,
        cnn_accuracy: cnn,
    };
    state.records.push(record);
    Ok(record)
}

/// Runs the remaining tasks of `state`, calling `after_task` once each task completes.
pub fn resume_schedule<F>(
    mut state: RunState,
    schedule: &TaskSchedule,
    config: &ProtocolConfig,
    dataset: &Dataset,
    mut after_task: F,
) -> Result<RunMetrics>
where
    F: FnMut(&TaskRecord, &RunState) -> Result<()>,
{
    config.validate()?;
    let (c, w, h) = dataset.image_shape();
    if config.backbone.input_shape != (c, w, h) {
        return Err(Error::Config(format!(
            "backbone input {:?} does not match dataset images {:?}",
            config.backbone.input_shape,
            (c, w, h)
        )));
    }
    let data = relabel(dataset, schedule)?;
    for t in state.tasks_done()..schedule.num_tasks() {
        let rec = run_task_relabelled(&mut state, t, schedule, config, &data).map_err(|e| e.at_task(t + 1))?;
        after_task(&rec, &state).map_err(|e| e.at_task(t + 1))?;
    }
    RunMetrics::from_records(state.records, config.train.balanced_finetune)
}

pub fn run_schedule(
    schedule: &TaskSchedule,
    config: &ProtocolConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<RunMetrics> {
    config.validate()?;
    let state = RunState::fresh(config, seed)?;
    resume_schedule(state, schedule, config, dataset, |_, _| Ok(()))
}

/// Seed-derived stream for auxiliary randomness that must not disturb the run RNG.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17)).random()
}
