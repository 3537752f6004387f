//! Exemplar rehearsal memory: herding selection, budget bookkeeping and the
//! class means used by nearest-mean inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Blob;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// At most this many exemplars for every class.
    PerClass(usize),
    /// This many exemplars shared evenly across all classes.
    Total(usize),
}

impl Budget {
    /// Slots for every class id `0..classes`. In total mode the remainder of
    /// the even split goes to the earliest classes.
    pub fn allocation(&self, classes: usize) -> Vec<usize> {
        match *self {
            Budget::PerClass(m) => vec![m; classes],
            Budget::Total(m) => {
                if classes == 0 {
                    return Vec::new();
                }
                let (base, rem) = (m / classes, m % classes);
                (0..classes).map(|c| base + usize::from(c < rem)).collect()
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Greedy herding: step k picks the unpicked row whose inclusion brings the
/// running mean of picks closest to the mean of all rows. Lowest index wins ties.
pub fn herd_select(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    if features.shape().len() != 2 {
        return Err(Error::shape("herd_select", format!("features {:?}, want (N, D)", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if m == 0 || m > n {
        return Err(Error::contract(format!("herd_select m = {m} with N = {n}")));
    }
    let rows: Vec<&[f64]> = features.values().chunks(d).collect();
    let mut mu = vec![0.0; d];
    for r in &rows {
        mu.iter_mut().zip(*r).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);

    let mut picked = vec![false; n];
    let mut running = vec![0.0; d];
    let mut order = Vec::with_capacity(m);
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let dist: f64 = mu
                .iter()
                .zip(&running)
                .zip(*r)
                .map(|((u, s), x)| {
                    let diff = u - (s + x) / k as f64;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.unwrap();
        picked[i] = true;
        running.iter_mut().zip(rows[i]).for_each(|(s, x)| *s += x);
        order.push(i);
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    budget: Budget,
    /// Class id to dataset sample indices, in herding order.
    per_class: BTreeMap<usize, Vec<usize>>,
    /// Class id to unit-norm mean exemplar embedding.
    means: BTreeMap<usize, Vec<f64>>,
}

impl ExemplarMemory {
    pub fn new(budget: Budget) -> Self {
        ExemplarMemory {
            budget,
            per_class: BTreeMap::new(),
            means: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn exemplars(&self, class: usize) -> Option<&[usize]> {
        self.per_class.get(&class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.per_class.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn means(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.means
    }

    /// Slots class `class` would receive once `classes` classes are stored.
    pub fn slots_for(&self, class: usize, classes: usize) -> usize {
        self.budget.allocation(classes).get(class).copied().unwrap_or(0)
    }

    /// Stores the herding-ordered exemplars of a new class.
    pub fn insert(&mut self, class: usize, ordered: Vec<usize>) {
        self.per_class.insert(class, ordered);
        self.means.remove(&class);
    }

    /// Truncates every list to its allocation for `class_count` classes,
    /// keeping the herding prefix.
    pub fn rebuild(&mut self, class_count: usize) {
        let alloc = self.budget.allocation(class_count);
        for (&c, list) in self.per_class.iter_mut() {
            let keep = alloc.get(c).copied().unwrap_or(0);
            list.truncate(keep);
        }
    }

    /// Recomputes the normalized mean of normalized exemplar embeddings for
    /// every class. `embed` maps a list of sample indices to `(n, D)` embeddings.
    pub fn class_means<F>(&mut self, mut embed: F) -> Result<()>
    where
        F: FnMut(&[usize]) -> Result<Tensor>,
    {
        let mut means = BTreeMap::new();
        for (&c, list) in &self.per_class {
            if list.is_empty() {
                return Err(Error::contract(format!("class {c} has no exemplars")));
            }
            means.insert(c, mean_of_normalized(&embed(list)?).map_err(|e| match e {
                Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("class {c}: {detail}") },
                other => other,
            })?);
        }
        self.means = means;
        Ok(())
    }

    pub fn save_into(&self, blob: &mut Blob, prefix: &str) {
        let budget = match self.budget {
            Budget::PerClass(m) => [0, m as u64],
            Budget::Total(m) => [1, m as u64],
        };
        blob.put_ints(&format!("{prefix}budget"), &budget);
        for (c, list) in &self.per_class {
            let idx: Vec<u64> = list.iter().map(|&i| i as u64).collect();
            blob.put_ints(&format!("{prefix}class.{c:06}"), &idx);
        }
    }

    pub fn load_from(blob: &Blob, prefix: &str) -> Result<Self> {
        let budget = match blob.ints(&format!("{prefix}budget"))? {
            [0, m] => Budget::PerClass(*m as usize),
            [1, m] => Budget::Total(*m as usize),
            other => return Err(Error::Format(format!("bad memory budget {other:?}"))),
        };
        let mut mem = ExemplarMemory::new(budget);
        let class_prefix = format!("{prefix}class.");
        for name in blob.names_with_prefix(&class_prefix) {
            let c: usize = name[class_prefix.len()..]
                .parse()
                .map_err(|_| Error::Format(format!("bad memory entry {name}")))?;
            mem.per_class.insert(c, blob.ints(name)?.iter().map(|&i| i as usize).collect());
        }
        Ok(mem)
    }
}

/// Unit-norm mean of the unit-normalized rows of `(n, D)`. A vanishing mean is a numeric fault.
pub fn mean_of_normalized(emb: &Tensor) -> Result<Vec<f64>> {
    let d = emb.shape()[1];
    let mut mean = vec![0.0; d];
    let n = emb.shape()[0] as f64;
    for row in emb.values().chunks(d) {
        let r = norm(row);
        if r <= NORM_EPS {
            return Err(Error::numeric("class_means", "exemplar embedding has zero norm"));
        }
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / r / n);
    }
    let r = norm(&mean);
    if r <= NORM_EPS {
        return Err(Error::numeric("class_means", "exemplar mean vanishes"));
    }
    mean.iter_mut().for_each(|m| *m /= r);
    Ok(mean)
}
