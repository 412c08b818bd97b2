//! Evaluation: optimal-assignment clustering accuracy, the k-means++ baseline
//! on frozen features, old/new/all accuracy for the incremental head, and the
//! k-sweep harness.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::model::{argmax, Head, Model};
use crate::ndcore::Tensor;
use crate::{Error, Result};

/// Best bijection between cluster indices and class indices plus the accuracy
/// it achieves.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    /// cluster index -> class index
    pub permutation: Vec<usize>,
    pub matched_count: usize,
    pub acc: f64,
}

/// Minimum-cost assignment on a square matrix. Returns the lexicographically
/// smallest permutation among the optimal ones (row -> column).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let l = cost.len();
    if l == 0 || cost.iter().any(|row| row.len() != l) {
        return Err(Error::Argument(
            "hungarian: cost matrix must be square and nonempty".into(),
        ));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Argument(
            "hungarian: cost matrix must be finite".into(),
        ));
    }
    let total = solve_min_cost(
        cost,
        &(0..l).collect::<Vec<_>>(),
        &(0..l).collect::<Vec<_>>(),
    );
    let scale = cost.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * scale * l as f64;

    // fix rows in order to the smallest column that still admits an optimal
    // completion
    let mut perm = vec![usize::MAX; l];
    let mut used = vec![false; l];
    let mut prefix = 0.0;
    for i in 0..l {
        let rest_rows: Vec<usize> = ((i + 1)..l).collect();
        let mut chosen = None;
        for j in 0..l {
            if used[j] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..l).filter(|&c| !used[c] && c != j).collect();
            let completion = if rest_rows.is_empty() {
                0.0
            } else {
                solve_min_cost(cost, &rest_rows, &rest_cols)
            };
            if (prefix + cost[i][j] + completion - total).abs() <= tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("some unused column completes an optimal assignment");
        perm[i] = j;
        used[j] = true;
        prefix += cost[i][j];
    }
    Ok(perm)
}

/// Jonker-Volgenant style shortest augmenting path solver over a submatrix;
/// returns the optimal cost only.
fn solve_min_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    debug_assert_eq!(n, cols.len());
    if n == 0 {
        return 0.0;
    }
    let c = |r: usize, col: usize| cost[rows[r]][cols[col]];
    // job[w] = row assigned to column w (column n is a virtual start slot)
    let mut job = vec![usize::MAX; n + 1];
    let mut ys = vec![0.0; n];
    let mut yt = vec![0.0; n + 1];
    for r in 0..n {
        let mut w_cur = n;
        job[w_cur] = r;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prv = vec![usize::MAX; n + 1];
        let mut in_z = vec![false; n + 1];
        while job[w_cur] != usize::MAX {
            in_z[w_cur] = true;
            let j = job[w_cur];
            let mut delta = f64::INFINITY;
            let mut w_next = 0;
            for w in 0..n {
                if !in_z[w] {
                    let diff = c(j, w) - ys[j] - yt[w];
                    if diff < min_to[w] {
                        min_to[w] = diff;
                        prv[w] = w_cur;
                    }
                    if min_to[w] < delta {
                        delta = min_to[w];
                        w_next = w;
                    }
                }
            }
            for w in 0..=n {
                if in_z[w] {
                    ys[job[w]] += delta;
                    yt[w] -= delta;
                } else {
                    min_to[w] -= delta;
                }
            }
            w_cur = w_next;
        }
        // augment along the alternating path
        while w_cur != n {
            let w_prev = prv[w_cur];
            job[w_cur] = job[w_prev];
            w_cur = w_prev;
        }
    }
    let mut total = 0.0;
    for (w, &j) in job.iter().enumerate().take(n) {
        total += c(j, w);
    }
    total
}

/// Clustering accuracy: contingency matrix + optimal assignment over negated
/// counts.
pub fn clustering_acc(pred: &[usize], truth: &[usize], l: usize) -> Result<AssignmentResult> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "clustering_acc: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("clustering_acc: empty input".into()));
    }
    let n = pred.len();
    let mut counts = vec![vec![0usize; l]; l];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= l || t >= l {
            return Err(Error::Argument(format!(
                "clustering_acc: index out of range (pred {p}, truth {t}, L={l})"
            )));
        }
        counts[p][t] += 1;
    }
    // minimize (n - count) == maximize matches
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| (n - c) as f64).collect())
        .collect();
    let permutation = hungarian(&cost)?;
    let matched_count: usize = (0..l).map(|i| counts[i][permutation[i]]).sum();
    Ok(AssignmentResult {
        permutation,
        matched_count,
        acc: matched_count as f64 / n as f64,
    })
}

/// k-means with k-means++ seeding and Lloyd iterations on feature rows.
/// Converges when the max centroid shift drops below 1e-6 or after 300
/// iterations; empty clusters are re-seeded from the farthest point.
pub fn kmeans_baseline(features: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (m, d) = (features.rows(), features.cols());
    if m < k || k == 0 {
        return Err(Error::Argument(format!("kmeans: {m} points for k={k}")));
    }
    let mut rng = crate::rng::component_rng(seed, "kmeans");
    let mut centroids = plus_plus_init(features, k, &mut rng);
    let mut assign = vec![0usize; m];
    let mut prev_objective = f64::INFINITY;
    for _iter in 0..300 {
        // assignment step
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(features.row(i), &centroids);
        }
        // update step
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..m {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point farthest from its current centroid
                let far = (0..m)
                    .max_by(|&a, &b| {
                        let da = dist2(features.row(a), &centroids[assign[a]]);
                        let db = dist2(features.row(b), &centroids[assign[b]]);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids[c] = features.row(far).to_vec();
                shift = f64::INFINITY;
                continue;
            }
            let mut s = 0.0;
            for (j, sum) in sums[c].iter().enumerate() {
                let nv = sum / counts[c] as f64;
                s += (nv - centroids[c][j]).powi(2);
                centroids[c][j] = nv;
            }
            shift = shift.max(s.sqrt());
        }
        let objective: f64 = (0..m)
            .map(|i| dist2(features.row(i), &centroids[assign[i]]))
            .sum();
        debug_assert!(
            objective <= prev_objective + 1e-9 || shift.is_infinite(),
            "Lloyd objective must not increase"
        );
        prev_objective = objective;
        if shift < 1e-6 {
            break;
        }
    }
    for (i, a) in assign.iter_mut().enumerate() {
        *a = nearest(features.row(i), &centroids);
    }
    Ok(assign)
}

fn plus_plus_init(features: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = features.rows();
    let first = rng.gen_range(0..m);
    let mut centroids = vec![features.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..m)
        .map(|i| dist2(features.row(i), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all points coincide with existing centroids
            rng.gen_range(0..m)
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centroids.push(features.row(next).to_vec());
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(dist2(features.row(i), centroids.last().unwrap()));
        }
    }
    centroids
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = dist2(point, &centroids[0]);
    for (c, cent) in centroids.iter().enumerate().skip(1) {
        let d = dist2(point, cent);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Old/new/all accuracy of the extended (incremental) head.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IncrementalReport {
    pub old_acc: f64,
    pub new_acc: f64,
    pub all_acc: f64,
}

/// Evaluate the extended head over the joint output space: standard accuracy
/// on old classes, Hungarian-matched accuracy over the new-class slots on the
/// unlabelled test set (predictions landing in old slots count as wrong), and
/// the sample-weighted combination.
pub fn incremental_report(
    model: &Model,
    test_l: &Dataset,
    test_u: &Dataset,
) -> Result<IncrementalReport> {
    let head = model
        .incremental
        .as_ref()
        .ok_or_else(|| Error::State("incremental_report requires the incremental head".into()))?;
    let c_l = model
        .labelled
        .as_ref()
        .map(|h| h.out)
        .ok_or_else(|| Error::State("incremental_report requires the labelled head".into()))?;
    let c_u = head.out - c_l;

    let preds_l = predict_extended(model, head, test_l)?;
    let old_correct = preds_l
        .iter()
        .zip(test_l.ground_truth())
        .filter(|(&p, &t)| p == t)
        .count();
    let old_acc = old_correct as f64 / test_l.len() as f64;

    let preds_u = predict_extended(model, head, test_u)?;
    let truth_u = test_u.ground_truth();
    let in_slice: Vec<(usize, usize)> = preds_u
        .iter()
        .zip(truth_u)
        .filter(|(&p, _)| p >= c_l)
        .map(|(&p, &t)| (p - c_l, t))
        .collect();
    let new_matched = if in_slice.is_empty() {
        0
    } else {
        let pred: Vec<usize> = in_slice.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = in_slice.iter().map(|p| p.1).collect();
        clustering_acc(&pred, &truth, c_u)?.matched_count
    };
    let new_acc = new_matched as f64 / test_u.len() as f64;
    let all_acc = (old_correct + new_matched) as f64 / (test_l.len() + test_u.len()) as f64;
    Ok(IncrementalReport {
        old_acc,
        new_acc,
        all_acc,
    })
}

fn predict_extended(model: &Model, head: &Head, ds: &Dataset) -> Result<Vec<usize>> {
    let set = ds.image_set();
    let all: Vec<usize> = (0..set.len()).collect();
    let batch = crate::data::gather_flat(&set, &all);
    let z = model.backbone.forward_features(&batch)?;
    let probs = head.forward(&z)?;
    Ok((0..probs.rows()).map(|r| argmax(probs.row(r))).collect())
}

/// Unlabelled-set clustering accuracy of a discovery-trained model
/// (clean views, no augmentation at assignment time).
pub fn unlabelled_acc(model: &Model, d_u: &Dataset) -> Result<AssignmentResult> {
    let head = model
        .unlabelled
        .as_ref()
        .ok_or_else(|| Error::State("unlabelled_acc requires the unlabelled head".into()))?;
    let set = d_u.image_set();
    let all: Vec<usize> = (0..set.len()).collect();
    let batch = crate::data::gather_flat(&set, &all);
    let z = model.backbone.forward_features(&batch)?;
    let pred = crate::model::predict_unlabelled_batch(head, &z)?;
    clustering_acc(&pred, d_u.ground_truth(), head.out)
}

/// k-means++ baseline accuracy on the features of a given model.
pub fn kmeans_acc(model: &Model, d_u: &Dataset, c_u: usize, seed: u64) -> Result<AssignmentResult> {
    let set = d_u.image_set();
    let all: Vec<usize> = (0..set.len()).collect();
    let batch = crate::data::gather_flat(&set, &all);
    let z = model.backbone.forward_features(&batch)?;
    let pred = kmeans_baseline(&z, c_u, seed)?;
    clustering_acc(&pred, d_u.ground_truth(), c_u)
}

/// Run stage 3 once per k from a shared stage-2 model and collect the final
/// unlabelled accuracy for each. The k-independent stages are not re-run.
#[allow(clippy::too_many_arguments)]
pub fn sweep_k(
    stage2_model: &Model,
    d_l: &Dataset,
    d_u: &Dataset,
    c_u: usize,
    cfg: &crate::config::Stage3Config,
    augment: &crate::data::AugmentSpec,
    ablation: &crate::config::AblationFlags,
    master_seed: u64,
    config_digest: &str,
    k_values: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let d = stage2_model.feature_dim();
    for &k in k_values {
        if k == 0 || k > d {
            return Err(Error::Argument(format!(
                "sweep_k: k={k} out of range for feature_dim {d}"
            )));
        }
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut model = stage2_model.clone();
        let mut run_cfg = cfg.clone();
        run_cfg.k = k;
        let report = crate::pipeline::stage3_joint(
            &mut model,
            d_l,
            d_u,
            c_u,
            &run_cfg,
            augment,
            ablation,
            master_seed,
            config_digest.to_string(),
        )?;
        rows.push((k, report.final_acc));
    }
    Ok(rows)
}

/// CSV with one row per swept k.
pub fn write_sweep_csv(rows: &[(usize, f64)], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "k,unlabelled_acc")?;
    for (k, acc) in rows {
        writeln!(f, "{k},{acc:.17e}")?;
    }
    Ok(())
}
