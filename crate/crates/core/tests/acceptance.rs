//! Acceptance suite A1..A8. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `cargo test --test acceptance -- A1 A3` runs a subset.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use pod_incremental::backbone::StageVars;
use pod_incremental::config::{ExperimentConfig, MemoryMode};
use pod_incremental::experiment::{run_config, Summary, METRICS_FILE};
use pod_incremental::lsc::{
    cosine_logits, kmeans_best_of, lsc_scores, lsc_scores_graph, nca_hinge_graph, nca_hinge_loss, ProxyBank,
    KMEANS_ITERS, KMEANS_RESTARTS,
};
use pod_incremental::memory::{herd_select, Budget, ExemplarMemory};
use pod_incremental::pod::{pod_final, pod_flat, pod_flat_value, pod_pooled, pod_pooled_value, PodConfig, PodMode};
use pod_incremental::protocol::{adaptive_scale, average_incremental_accuracy};
use pod_incremental::tensor::gradient_check;
use pod_incremental::{Graph, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_POINTS: usize = 20;
const ALGEBRA_TOL: f64 = 1e-12;
const ALGEBRA_TENSORS: usize = 50;
const ORACLE_TOL: f64 = 1e-12;
const HERD_SETS: usize = 100;
const A5_MIN_GAP: f64 = 10.0;
const A6_TIE: f64 = 1.0;
const SEEDS: [u64; 3] = [1, 2, 3];

type Check = fn() -> Result<Outcome>;
type BenchCheck = fn(&Bench) -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sum_weighted(g: &mut Graph, x: pod_incremental::Var, w: &Tensor) -> Result<pod_incremental::Var> {
    let wv = g.constant(w);
    let p = g.mul(x, wv)?;
    g.sum(p)
}

fn at(v: &[f64], s: &[usize], b: usize, c: usize, w: usize, h: usize) -> f64 {
    v[((b * s[1] + c) * s[2] + w) * s[3] + h]
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Pooled statistic of sample `n` with squared features and normalization.
fn pooled_stat(v: &[f64], s: &[usize], n: usize, mode: PodMode) -> Vec<f64> {
    let (cn, wn, hn) = (s[1], s[2], s[3]);
    let f = |c, w, h| at(v, s, n, c, w, h).powi(2);
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
                    out.push((0..cn).map(|c| f(c, w, h)).sum());
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
                    out.push((0..wn).map(|w| f(c, w, h)).sum());
                }
            }
        }
        PodMode::Height => {
            for c in 0..cn {
                for w in 0..wn {
                    out.push((0..hn).map(|h| f(c, w, h)).sum());
                }
            }
        }
        PodMode::Spatial => unreachable!(),
    }
    unit(&mut out);
    out
}

fn pod_oracle(a: &[f64], b: &[f64], s: &[usize], mode: PodMode) -> f64 {
    if mode == PodMode::Spatial {
        return pod_oracle(a, b, s, PodMode::Width) + pod_oracle(a, b, s, PodMode::Height);
    }
    let mut total = 0.0;
    for n in 0..s[0] {
        let (u, v) = (pooled_stat(a, s, n, mode), pooled_stat(b, s, n, mode));
        total += u.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    total / s[0] as f64
}

fn flat_oracle(t: &[f64], s: &[f64], batch: usize) -> f64 {
    let d = t.len() / batch;
    let mut total = 0.0;
    for n in 0..batch {
        let mut u = t[n * d..(n + 1) * d].to_vec();
        let mut v = s[n * d..(n + 1) * d].to_vec();
        unit(&mut u);
        unit(&mut v);
        total += u.iter().zip(&v).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    total / batch as f64
}

fn lsc_oracle(h: &[f64], theta: &[f64], d: usize, k: usize) -> Vec<f64> {
    let classes = theta.len() / (d * k);
    let mut out = Vec::new();
    for hn in h.chunks(d) {
        for c in 0..classes {
            let sims: Vec<f64> = (0..k).map(|j| cos(&theta[(c * k + j) * d..(c * k + j + 1) * d], hn)).collect();
            let z: f64 = sims.iter().map(|s| s.exp()).sum();
            out.push(sims.iter().map(|s| s.exp() / z * s).sum());
        }
    }
    out
}

fn nca_oracle(yhat: &[f64], labels: &[usize], eta: f64, delta: f64) -> f64 {
    let c = yhat.len() / labels.len();
    let mut total = 0.0;
    for (n, &y) in labels.iter().enumerate() {
        let row = &yhat[n * c..(n + 1) * c];
        let others: f64 = (0..c).filter(|&i| i != y).map(|i| (eta * row[i]).exp()).sum();
        total += (others.ln() - eta * (row[y] - delta)).max(0.0);
    }
    total / labels.len() as f64
}

/// Greedy herding recomputing every candidate mean from scratch.
fn herd_oracle(rows: &[Vec<f64>], m: usize) -> Vec<usize> {
    let d = rows[0].len();
    let mu: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..rows.len() {
            if chosen.contains(&i) {
                continue;
            }
            let mut set = chosen.clone();
            set.push(i);
            let dist: f64 = (0..d)
                .map(|j| {
                    let mean = set.iter().map(|&s| rows[s][j]).sum::<f64>() / set.len() as f64;
                    (mu[j] - mean).powi(2)
                })
                .sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        chosen.push(best.0);
    }
    chosen
}

/// Minimum within-cluster sum of squares over every two-way partition.
fn brute_force_wcss(pts: &[Vec<f64>]) -> f64 {
    let n = pts.len();
    let d = pts[0].len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut total = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = (0..n).filter(|&i| (mask >> i & 1 == 1) == side).map(|i| &pts[i]).collect();
            for j in 0..d {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(total);
    }
    best
}

fn a1() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = PodConfig::default();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: String, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for _ in 0..GRAD_POINTS {
        let teacher = random(&[2, 3, 4, 3], &mut rng);
        let student = random(&[2, 3, 4, 3], &mut rng);
        for mode in PodMode::ALL {
            let e = gradient_check(
                |g, x| {
                    let t = g.constant(&teacher);
                    pod_pooled(g, t, x, mode, &cfg)
                },
                &student,
                GRAD_EPS,
            )?;
            record(format!("pod_{}", mode.name()), e);
        }

        let te = random(&[3, 5], &mut rng);
        let se = random(&[3, 5], &mut rng);
        let e = gradient_check(
            |g, x| {
                let t = g.constant(&te);
                pod_flat(g, t, x)
            },
            &se,
            GRAD_EPS,
        )?;
        record("pod_flat".into(), e);

        let h = random(&[3, 4], &mut rng);
        let theta = random(&[3 * 3, 4], &mut rng);
        let w = random(&[3, 3], &mut rng);
        let e = gradient_check(
            |g, x| {
                let t = g.constant(&theta);
                let s = lsc_scores_graph(g, x, t, 3)?;
                sum_weighted(g, s, &w)
            },
            &h,
            GRAD_EPS,
        )?;
        record("lsc_scores(h)".into(), e);
        let e = gradient_check(
            |g, x| {
                let hv = g.constant(&h);
                let s = lsc_scores_graph(g, hv, x, 3)?;
                sum_weighted(g, s, &w)
            },
            &theta,
            GRAD_EPS,
        )?;
        record("lsc_scores(theta)".into(), e);

        let labels = [0usize, 2, 1, 3];
        let (yhat, eta) = loop {
            let y = random(&[4, 4], &mut rng);
            let eta = rng.random_range(0.5..3.0);
            let away = labels.iter().enumerate().all(|(n, &l)| {
                let row = &y.values()[n * 4..(n + 1) * 4];
                let others: f64 = (0..4).filter(|&i| i != l).map(|i| (eta * row[i]).exp()).sum();
                (others.ln() - eta * (row[l] - 0.6)).abs() > 1e-2
            });
            if away {
                break (y, eta);
            }
        };
        let e = gradient_check(
            |g, x| {
                let ev = g.constant(&Tensor::scalar(eta)?);
                nca_hinge_graph(g, x, &labels, ev, 0.6)
            },
            &yhat,
            GRAD_EPS,
        )?;
        record("nca(yhat)".into(), e);
        let e = gradient_check(
            |g, x| {
                let yv = g.constant(&yhat);
                nca_hinge_graph(g, yv, &labels, x, 0.6)
            },
            &Tensor::scalar(eta)?,
            GRAD_EPS,
        )?;
        record("nca(eta)".into(), e);
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let listing: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(max <= GRAD_TOL, format!("max rel err {max:.2e} <= {GRAD_TOL:.0e} [{}]", listing.join(", ")))
}

fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    let mut out = vec![0.0; t.numel()];
    for b in 0..s[0] {
        for c in 0..s[1] {
            for w in 0..s[2] {
                for h in 0..s[3] {
                    let mut src = [b, c, w, h];
                    src[axis] = perm[src[axis]];
                    out[((b * s[1] + c) * s[2] + w) * s[3] + h] = at(t.values(), &s, src[0], src[1], src[2], src[3]);
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Permutes `(w, h)` positions jointly by a permutation of the flattened grid.
fn permute_grid(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    let grid = s[2] * s[3];
    let mut out = vec![0.0; t.numel()];
    for bc in 0..s[0] * s[1] {
        for p in 0..grid {
            out[bc * grid + p] = t.values()[bc * grid + perm[p]];
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Permutes the width index independently inside every (b, c, h) line.
fn permute_within(t: &Tensor, axis: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = t.shape().to_vec();
    let mut out = t.values().to_vec();
    let (len, other) = if axis == 2 { (s[2], s[3]) } else { (s[3], s[2]) };
    for b in 0..s[0] {
        for c in 0..s[1] {
            for o in 0..other {
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(rng);
                for (i, &p) in perm.iter().enumerate() {
                    let (dst, src) = if axis == 2 { ((i, o), (p, o)) } else { ((o, i), (o, p)) };
                    out[((b * s[1] + c) * s[2] + dst.0) * s[3] + dst.1] = at(t.values(), &s, b, c, src.0, src.1);
                }
            }
        }
    }
    Tensor::new(s, out).unwrap()
}

fn a2() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = PodConfig::default();
    let shape = [2, 4, 5, 3];
    let (mut split_diff, mut zero_max, mut perm_max) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..ALGEBRA_TENSORS {
        let a = random(&shape, &mut rng);
        let b = random(&shape, &mut rng);
        let spatial = pod_pooled_value(&a, &b, PodMode::Spatial, &cfg)?;
        let sum = pod_pooled_value(&a, &b, PodMode::Width, &cfg)? + pod_pooled_value(&a, &b, PodMode::Height, &cfg)?;
        split_diff = split_diff.max((spatial - sum).abs());
        for mode in PodMode::ALL {
            zero_max = zero_max.max(pod_pooled_value(&a, &a, mode, &cfg)?.abs());
        }

        let mut cp: Vec<usize> = (0..shape[1]).collect();
        cp.shuffle(&mut rng);
        let base = pod_pooled_value(&a, &b, PodMode::Channel, &cfg)?;
        let moved = pod_pooled_value(&permute_axis(&a, 1, &cp), &permute_axis(&b, 1, &cp), PodMode::Channel, &cfg)?;
        let alone = pod_pooled_value(&permute_axis(&a, 1, &cp), &a, PodMode::Channel, &cfg)?;
        perm_max = perm_max.max((base - moved).abs()).max(alone.abs());

        let mut gp: Vec<usize> = (0..shape[2] * shape[3]).collect();
        gp.shuffle(&mut rng);
        let base = pod_pooled_value(&a, &b, PodMode::Gap, &cfg)?;
        let moved = pod_pooled_value(&permute_grid(&a, &gp), &b, PodMode::Gap, &cfg)?;
        perm_max = perm_max.max((base - moved).abs());

        for (mode, axis) in [(PodMode::Width, 2), (PodMode::Height, 3)] {
            let base = pod_pooled_value(&a, &b, mode, &cfg)?;
            let moved = pod_pooled_value(&permute_within(&a, axis, &mut rng), &b, mode, &cfg)?;
            perm_max = perm_max.max((base - moved).abs());
        }
    }
    let pass = split_diff == 0.0 && zero_max <= ALGEBRA_TOL && perm_max <= ALGEBRA_TOL;
    outcome(
        pass,
        format!(
            "{ALGEBRA_TENSORS} tensors: |spatial-(width+height)| = {split_diff:e} (exact), \
             zero-on-identical {zero_max:.1e}, permutation invariance {perm_max:.1e} <= {ALGEBRA_TOL:.0e}"
        ),
    )
}

fn a3() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let shape = [2, 2, 3, 3];
    let cfg = PodConfig::default();
    let mut loss_err = 0.0f64;
    for _ in 0..20 {
        let stages: Vec<(Tensor, Tensor)> = (0..3).map(|_| (random(&shape, &mut rng), random(&shape, &mut rng))).collect();
        for (t, s) in &stages {
            for mode in PodMode::ALL {
                let got = pod_pooled_value(t, s, mode, &cfg)?;
                loss_err = loss_err.max((got - pod_oracle(t.values(), s.values(), &shape, mode)).abs());
            }
        }
        let te = random(&[2, 4], &mut rng);
        let se = random(&[2, 4], &mut rng);
        let flat = flat_oracle(te.values(), se.values(), 2);
        loss_err = loss_err.max((pod_flat_value(&te, &se)? - flat).abs());

        let scale = rng.random_range(0.5..5.0);
        let mut g = Graph::new();
        let tv = StageVars {
            stage_maps: stages.iter().map(|(t, _)| g.constant(t)).collect(),
            embedding: g.constant(&te),
        };
        let sv = StageVars {
            stage_maps: stages.iter().map(|(_, s)| g.constant(s)).collect(),
            embedding: g.constant(&se),
        };
        let fin = pod_final(&mut g, &tv, &sv, &cfg, scale)?;
        let per_stage: f64 = stages.iter().map(|(t, s)| pod_oracle(t.values(), s.values(), &shape, cfg.mode)).sum();
        let want = scale * (cfg.lambda_c / 3.0 * per_stage + cfg.lambda_f * flat);
        loss_err = loss_err.max((g.value(fin).item()? - want).abs());

        let (d, k) = (4, 3);
        let mut bank = ProxyBank::new(d, k, 1.0, 0.6)?;
        for _ in 0..3 {
            bank.add_class(&random(&[k, d], &mut rng))?;
        }
        let h = random(&[2, d], &mut rng);
        let got = lsc_scores(&h, &bank)?;
        let want = lsc_oracle(h.values(), bank.theta().unwrap().values(), d, k);
        for (x, y) in got.values().iter().zip(&want) {
            loss_err = loss_err.max((x - y).abs());
        }
        let labels = [rng.random_range(0..3), rng.random_range(0..3)];
        let eta = rng.random_range(0.5..4.0);
        let nca = nca_hinge_loss(&got, &labels, eta, 0.6)?;
        loss_err = loss_err.max((nca - nca_oracle(got.values(), &labels, eta, 0.6)).abs());
    }

    let mut herd_mismatch = 0;
    let mut herd_cases = 0;
    for _ in 0..HERD_SETS {
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=4);
        let t = random(&[n, d], &mut rng);
        let rows: Vec<Vec<f64>> = t.values().chunks(d).map(<[f64]>::to_vec).collect();
        for m in 1..=n {
            herd_cases += 1;
            if herd_select(&t, m)? != herd_oracle(&rows, m) {
                herd_mismatch += 1;
            }
        }
    }

    let mut km_mismatch = 0;
    let km_cases = 100;
    for _ in 0..km_cases {
        let n = rng.random_range(3..=12);
        let t = random(&[n, 2], &mut rng);
        let pts: Vec<Vec<f64>> = t.values().chunks(2).map(<[f64]>::to_vec).collect();
        let got = kmeans_best_of(&t, 2, KMEANS_ITERS, KMEANS_RESTARTS, &mut rng)?.wcss();
        let want = brute_force_wcss(&pts);
        if (got - want).abs() > 1e-9 * want.max(1.0) {
            km_mismatch += 1;
        }
    }
    let pass = loss_err <= ORACLE_TOL && herd_mismatch == 0 && km_mismatch == 0;
    outcome(
        pass,
        format!(
            "losses/lsc max err {loss_err:.1e} <= {ORACLE_TOL:.0e}; herding {}/{herd_cases} match; \
             k-means WCSS {}/{km_cases} at brute-force optimum",
            herd_cases - herd_mismatch,
            km_cases - km_mismatch
        ),
    )
}

fn a4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (d, classes) = (5, 4);
    let mut sim_err = 0.0f64;
    let mut prob_err = 0.0f64;
    for _ in 0..20 {
        let eta = rng.random_range(0.5..4.0);
        let mut bank = ProxyBank::new(d, 1, eta, 0.6)?;
        for _ in 0..classes {
            bank.add_class(&random(&[1, d], &mut rng))?;
        }
        let h = random(&[3, d], &mut rng);
        let theta = bank.theta().unwrap().values().to_vec();
        let scores = lsc_scores(&h, &bank)?;
        let probs = cosine_logits(&h, &bank)?;
        for (n, hn) in h.values().chunks(d).enumerate() {
            let sims: Vec<f64> = (0..classes).map(|c| cos(&theta[c * d..(c + 1) * d], hn)).collect();
            let z: f64 = sims.iter().map(|s| (eta * s).exp()).sum();
            for (c, s) in sims.iter().enumerate() {
                sim_err = sim_err.max((scores.values()[n * classes + c] - s).abs());
                prob_err = prob_err.max((probs.values()[n * classes + c] - (eta * s).exp() / z).abs());
            }
        }
    }

    let mut nca_err = 0.0f64;
    for _ in 0..20 {
        let s = rng.random_range(-1.0..1.0);
        let eta = rng.random_range(0.5..4.0);
        let yhat = Tensor::from_slice(&[1, 2], &[s, s])?;
        nca_err = nca_err.max(nca_hinge_loss(&yhat, &[0], eta, 0.0)?.abs());
        nca_err = nca_err.max((nca_hinge_loss(&yhat, &[1], eta, 0.6)? - eta * 0.6).abs());
    }
    let pass = sim_err <= ORACLE_TOL && prob_err <= ORACLE_TOL && nca_err <= ORACLE_TOL;
    outcome(
        pass,
        format!(
            "K=1 scores vs cosine {sim_err:.1e}, softmax head {prob_err:.1e}; \
             NCA closed forms (0 at delta=0, eta*delta with margin) {nca_err:.1e} <= {ORACLE_TOL:.0e}"
        ),
    )
}

fn bench_config(dir: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        seed,
        memory_mode: MemoryMode::PerClass,
        memory_size: 5,
        ..ExperimentConfig::default()
    }
}

struct Bench {
    root: tempfile::TempDir,
    spatial: Vec<Summary>,
    baseline: Vec<Summary>,
}

fn run_variant(root: &Path, tag: &str, edit: impl Fn(&mut ExperimentConfig)) -> Result<Vec<Summary>> {
    SEEDS
        .iter()
        .map(|&seed| {
            let mut cfg = bench_config(&root.join(format!("{tag}_{seed}")), seed);
            edit(&mut cfg);
            run_config(&cfg, false)
        })
        .collect()
}

fn nme_mean(runs: &[Summary]) -> f64 {
    100.0 * runs.iter().map(|s| s.avg_incremental_nme).sum::<f64>() / runs.len() as f64
}

fn nme_list(runs: &[Summary]) -> String {
    let v: Vec<String> = runs.iter().map(|s| format!("{:.1}", 100.0 * s.avg_incremental_nme)).collect();
    format!("[{}]", v.join(", "))
}

fn bench() -> Result<Bench> {
    let root = tempfile::tempdir()?;
    let spatial = run_variant(root.path(), "spatial", |_| {})?;
    let baseline = run_variant(root.path(), "baseline", |c| {
        c.lambda_c = 0.0;
        c.lambda_f = 0.0;
        c.proxies_per_class = 1;
    })?;
    Ok(Bench { root, spatial, baseline })
}

fn a5(b: &Bench) -> Result<Outcome> {
    let (p, q) = (nme_mean(&b.spatial), nme_mean(&b.baseline));
    let gap = p - q;
    outcome(
        gap >= A5_MIN_GAP,
        format!(
            "avg incremental NME: full {} mean {p:.2}, baseline {} mean {q:.2}, gain {gap:+.2} >= {A5_MIN_GAP}",
            nme_list(&b.spatial),
            nme_list(&b.baseline)
        ),
    )
}

fn compare(hi: &str, lo: &str, d: f64) -> String {
    let verdict = if d.abs() < A6_TIE {
        "tie"
    } else if d > 0.0 {
        "holds"
    } else {
        "reversed"
    };
    format!("{hi}-{lo} {d:+.2} ({verdict})")
}

fn a6(b: &Bench) -> Result<Outcome> {
    let gap = run_variant(b.root.path(), "gap", |c| c.pod_mode = PodMode::Gap)?;
    let pixel = run_variant(b.root.path(), "pixel", |c| c.pod_mode = PodMode::Pixel)?;
    let (s, g, p) = (nme_mean(&b.spatial), nme_mean(&gap), nme_mean(&pixel));
    let first_last = s - p;
    outcome(
        first_last > -A6_TIE,
        format!(
            "spatial {s:.2} {}, gap {g:.2} {}, pixel {p:.2} {}; {}, {}; required {}",
            nme_list(&b.spatial),
            nme_list(&gap),
            nme_list(&pixel),
            compare("spatial", "gap", s - g),
            compare("gap", "pixel", g - p),
            compare("spatial", "pixel", first_last)
        ),
    )
}

fn a7() -> Result<Outcome> {
    let mut notes = Vec::new();
    let lambda = adaptive_scale(50, 1);
    let scale_ok = (lambda - 7.0711).abs() < 5e-5 && (adaptive_scale(10, 10) - 1.0).abs() < 1e-15;
    notes.push(format!("sqrt(50/1) = {lambda:.4}"));

    let avg = average_incremental_accuracy(&[0.9, 0.5, 0.4])?;
    let avg_ok = (avg - 0.6).abs() < 1e-12 && average_incremental_accuracy(&[]).is_err();
    notes.push(format!("mean of [0.9, 0.5, 0.4] = {avg:.3}"));

    let mut budget_ok = true;
    for (budget, first, step, last) in [(Budget::PerClass(20), 50, 1, 100), (Budget::Total(2000), 10, 10, 100)] {
        let mut mem = ExemplarMemory::new(budget);
        let available = 500;
        let mut seen = 0;
        let mut next = first;
        while next <= last {
            for c in seen..next {
                let slots = budget.allocation(next)[c].min(available);
                mem.insert(c, (0..slots).map(|i| c * 1000 + i).collect());
            }
            seen = next;
            mem.rebuild(seen);
            let alloc = budget.allocation(seen);
            for (c, list) in mem.iter() {
                let prefix = list.iter().enumerate().all(|(i, &x)| x == c * 1000 + i);
                budget_ok &= list.len() == alloc[c].min(available) && prefix;
            }
            budget_ok &= match budget {
                Budget::PerClass(m) => mem.total() == m * seen,
                Budget::Total(m) => mem.total() == m.min(available * seen),
            };
            next += step;
        }
        notes.push(format!("{budget:?} to {seen} classes holds {}", mem.total()));
    }
    outcome(scale_ok && avg_ok && budget_ok, notes.join("; "))
}

fn a8(b: &Bench) -> Result<Outcome> {
    let first = &b.spatial[0];
    let mut cfg = first.config.clone();
    cfg.output_dir = b.root.path().join("repeat");
    run_config(&cfg, false)?;
    let x = std::fs::read(first.config.output_dir.join(METRICS_FILE))?;
    let y = std::fs::read(cfg.output_dir.join(METRICS_FILE))?;
    outcome(x == y, format!("seed {} rerun: metrics.csv {} bytes, identical = {}", cfg.seed, x.len(), x == y))
}

fn failed_bench(id: &str, started: Instant, e: &pod_incremental::Error) {
    println!("{id} FAIL ({:.1}s): benchmark runs failed: {e}", started.elapsed().as_secs_f64());
}

fn main() -> ExitCode {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w.eq_ignore_ascii_case(id));
    let mut failed = 0;
    let mut report = |id: &str, started: Instant, r: Result<Outcome>| {
        let secs = started.elapsed().as_secs_f64();
        match r {
            Ok(o) => {
                failed += usize::from(!o.pass);
                println!("{id} {} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            }
            Err(e) => {
                failed += 1;
                println!("{id} FAIL ({secs:.1}s): error: {e}");
            }
        }
    };
    let quick: [(&str, Check); 5] = [("A1", a1), ("A2", a2), ("A3", a3), ("A4", a4), ("A7", a7)];
    for (id, f) in quick {
        if want(id) {
            let t = Instant::now();
            report(id, t, f());
        }
    }
    if want("A5") || want("A6") || want("A8") {
        let t = Instant::now();
        match bench() {
            Ok(b) => {
                let bench_secs = t.elapsed().as_secs_f64();
                if want("A5") {
                    report("A5", t, a5(&b));
                }
                let slow: [(&str, BenchCheck); 2] = [("A6", a6), ("A8", a8)];
                for (id, f) in slow {
                    if want(id) {
                        let t = Instant::now();
                        report(id, t, f(&b));
                    }
                }
                println!("benchmark runs shared by A5/A6/A8 took {bench_secs:.1}s");
            }
            Err(e) => {
                failed += 3;
                for id in ["A5", "A6", "A8"].into_iter().filter(|id| want(id)) {
                    failed_bench(id, t, &e);
                }
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
