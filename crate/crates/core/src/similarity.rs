//! Data-driven head grouping: attention-distribution extraction, pairwise
//! Jensen-Shannon distances, K-medoid clustering, and equal-size regrouping
//! by optimal linear sum assignment.
//!
//! Distances use base-2 logarithms so they live in [0, 1]. Attention rows are
//! compared per query position (valid causal prefix only) and averaged
//! uniformly over calibration prompts and positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PlainRunner, PreparedModel};
use crate::transforms::{CalibrationConfig, HeadGrouping};

/// Pairwise head distances within one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub layer: usize,
    pub heads: usize,
    /// Row-major h x h, symmetric, zero diagonal, entries in [0, 1].
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.heads + j]
    }
}

/// Jensen-Shannon distance sqrt(JSD) with JSD = KL(p||M)/2 + KL(q||M)/2,
/// M = (p+q)/2, base-2 logs, 0*log0 = 0. Inputs must be distributions.
pub fn js_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "distributions of length {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        if v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::NotNormalized(format!("{name} has negative entries")));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::NotNormalized(format!("{name} sums to {sum}")));
        }
    }
    let mut jsd = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        jsd += 0.5 * (term(*pi) + term(*qi));
    }
    // fp noise can push an identical pair epsilon-negative
    Ok(jsd.max(0.0).sqrt().min(1.0))
}

fn renormalize(row: &[f64]) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        let u = 1.0 / row.len() as f64;
        return vec![u; row.len()];
    }
    row.iter().map(|v| v / sum).collect()
}

/// Seeded random token prompts for calibration runs.
pub fn calibration_prompts(model: &PreparedModel, calib: &CalibrationConfig) -> Vec<Vec<u32>> {
    let mut rng = ChaCha12Rng::seed_from_u64(calib.seed);
    let len = calib.prompt_len.clamp(1, model.config.max_seq);
    (0..calib.prompts.max(1))
        .map(|_| {
            (0..len)
                .map(|_| rng.gen_range(0..model.config.vocab as u32))
                .collect()
        })
        .collect()
}

/// Average Jensen-Shannon distance between every head pair of every layer,
/// over the valid causal prefix of each attention row, aligned by position.
pub fn pairwise_distances(
    model: &PreparedModel,
    prompts: &[Vec<u32>],
) -> Result<Vec<DistanceMatrix>> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("empty calibration set".into()));
    }
    let layers = model.config.num_layers;
    let heads = model.config.num_heads;
    let mut sums = vec![vec![0.0f64; heads * heads]; layers];
    let mut count = 0usize;
    for prompt in prompts {
        let mut runner = PlainRunner::with_trace(model)?;
        runner.prefill(prompt)?;
        let trace = runner.exec.trace.take().expect("trace enabled");
        for (layer, per_head) in trace.attn_probs.iter().enumerate() {
            for pos in 0..prompt.len() {
                // fixed-point rows sum to ~1 within a few ulp; renormalize the
                // valid prefix so the distance inputs are true distributions
                let rows: Vec<Vec<f64>> = (0..heads)
                    .map(|h| renormalize(&per_head[h][pos][..=pos]))
                    .collect();
                for a in 0..heads {
                    for b in (a + 1)..heads {
                        let d = js_distance(&rows[a], &rows[b])?;
                        sums[layer][a * heads + b] += d;
                        sums[layer][b * heads + a] += d;
                    }
                }
            }
        }
        count += prompt.len();
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(layer, mut values)| {
            for v in values.iter_mut() {
                *v /= count as f64;
            }
            DistanceMatrix {
                layer,
                heads,
                values,
            }
        })
        .collect())
}

/// K-medoid clustering output.
#[derive(Clone, Debug, PartialEq)]
pub struct KMedoidResult {
    pub medoids: Vec<usize>,
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Total within-cluster distance after each iteration; never increases.
    pub objective_trace: Vec<f64>,
}

#[allow(clippy::needless_range_loop)]
fn assign_to_medoids(d: &DistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut assignment = vec![0usize; d.heads];
    let mut total = 0.0;
    for i in 0..d.heads {
        let mut best = 0usize;
        for (c, &m) in medoids.iter().enumerate() {
            if d.get(i, m) < d.get(i, medoids[best]) {
                best = c;
            }
        }
        assignment[i] = best;
        total += d.get(i, medoids[best]);
    }
    (assignment, total)
}

/// PAM-style alternation: assign points to nearest medoid, re-center each
/// cluster, repeat to a fixed point. Seeding is k-medoids++-style
/// (distance-squared weighted) from the given seed; reruns are deterministic.
#[allow(clippy::needless_range_loop)]
pub fn k_medoid(d: &DistanceMatrix, k: usize, seed: u64) -> Result<KMedoidResult> {
    let h = d.heads;
    if k == 0 || k > h {
        return Err(Error::InvalidConfig(format!(
            "cluster count {k} not in 1..={h}"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut medoids = vec![rng.gen_range(0..h)];
    while medoids.len() < k {
        let weights: Vec<f64> = (0..h)
            .map(|i| {
                let nearest = medoids
                    .iter()
                    .map(|&m| d.get(i, m))
                    .fold(f64::INFINITY, f64::min);
                nearest * nearest
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a medoid; take the lowest
            // index not yet chosen
            (0..h).find(|i| !medoids.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = h - 1;
            for (i, w) in weights.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        if !medoids.contains(&next) {
            medoids.push(next);
        } else if let Some(free) = (0..h).find(|i| !medoids.contains(i)) {
            medoids.push(free);
        }
    }
    medoids.sort_unstable();

    let (mut assignment, mut objective) = assign_to_medoids(d, &medoids);
    let mut trace = vec![objective];
    for _ in 0..100 {
        // update: each cluster's medoid becomes the member minimizing the
        // within-cluster distance sum (ties to the lowest index)
        let mut new_medoids = medoids.clone();
        for c in 0..k {
            let members: Vec<usize> = (0..h).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut best = members[0];
            let mut best_cost = f64::INFINITY;
            for &cand in &members {
                let cost: f64 = members.iter().map(|&i| d.get(i, cand)).sum();
                if cost < best_cost {
                    best_cost = cost;
                    best = cand;
                }
            }
            new_medoids[c] = best;
        }
        new_medoids.sort_unstable();
        let (new_assignment, new_objective) = assign_to_medoids(d, &new_medoids);
        trace.push(new_objective);
        let converged = new_medoids == medoids && new_assignment == assignment;
        medoids = new_medoids;
        assignment = new_assignment;
        objective = new_objective;
        if converged {
            break;
        }
    }
    Ok(KMedoidResult {
        medoids,
        assignment,
        objective,
        objective_trace: trace,
    })
}

/// O(n^3) Hungarian algorithm; returns the column assigned to each row of a
/// square cost matrix, minimizing total cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Redistribute heads into h/m equal groups by solving the heads-to-slots
/// assignment problem optimally: each medoid is replicated m times and the
/// cost of a (head, slot) pair is the distance from the head to the slot's
/// medoid.
pub fn equalize_groups(
    d: &DistanceMatrix,
    medoids: &[usize],
    m: usize,
) -> Result<HeadGrouping> {
    let h = d.heads;
    if m == 0 || !h.is_multiple_of(m) {
        return Err(Error::InvalidConfig(format!(
            "merge factor {m} does not divide {h} heads"
        )));
    }
    if medoids.len() != h / m {
        return Err(Error::InvalidConfig(format!(
            "{} medoids for {} groups",
            medoids.len(),
            h / m
        )));
    }
    let cost: Vec<Vec<f64>> = (0..h)
        .map(|head| (0..h).map(|slot| d.get(head, medoids[slot / m])).collect())
        .collect();
    let head_to_slot = hungarian(&cost);
    let mut permutation = vec![usize::MAX; h];
    for (head, slot) in head_to_slot.iter().enumerate() {
        permutation[*slot] = head;
    }
    HeadGrouping::new(m, permutation)
}

/// Total assignment cost of a grouping: per group, the best-medoid sum of
/// member distances. Comparable across grouping strategies.
pub fn grouping_cost(d: &DistanceMatrix, grouping: &HeadGrouping) -> f64 {
    grouping
        .groups()
        .map(|members| {
            members
                .iter()
                .map(|&cand| members.iter().map(|&i| d.get(i, cand)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

const GROUPING_RESTARTS: u64 = 8;

/// Grouping for one layer: seeded k-medoid restarts, each followed by
/// alternating optimal reassignment (LSA) and per-group re-centering until
/// the cost stops improving; the cheapest grouping across restarts wins.
/// Both alternation steps are non-increasing, so each restart converges.
fn grouping_for_layer(d: &DistanceMatrix, m: usize, seed: u64) -> Result<HeadGrouping> {
    let k = d.heads / m;
    let mut best: Option<(f64, HeadGrouping)> = None;
    for restart in 0..GROUPING_RESTARTS {
        let clustering = k_medoid(d, k, seed.wrapping_add(restart.wrapping_mul(7919)))?;
        let mut grouping = equalize_groups(d, &clustering.medoids, m)?;
        let mut cost = grouping_cost(d, &grouping);
        for _ in 0..20 {
            // re-center: each group's medoid becomes its best member
            let medoids: Vec<usize> = grouping
                .groups()
                .map(|members| {
                    let mut best_m = members[0];
                    let mut best_c = f64::INFINITY;
                    for &cand in members {
                        let c: f64 = members.iter().map(|&i| d.get(i, cand)).sum();
                        if c < best_c {
                            best_c = c;
                            best_m = cand;
                        }
                    }
                    best_m
                })
                .collect();
            let new_grouping = equalize_groups(d, &medoids, m)?;
            let new_cost = grouping_cost(d, &new_grouping);
            if new_cost + 1e-15 >= cost {
                break;
            }
            grouping = new_grouping;
            cost = new_cost;
        }
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, grouping));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Per-layer groupings from precomputed distance matrices: k-medoid
/// clustering into h/m groups, then optimal equal-size regrouping.
pub fn groupings_from_distances(
    distances: &[DistanceMatrix],
    m: usize,
    seed: u64,
) -> Result<Vec<HeadGrouping>> {
    distances
        .iter()
        .map(|d| {
            if m == 0 || d.heads % m != 0 {
                return Err(Error::InvalidConfig(format!(
                    "merge factor {m} does not divide {} heads",
                    d.heads
                )));
            }
            grouping_for_layer(d, m, seed)
        })
        .collect()
}

/// Full similarity pipeline: calibration prompts, per-layer distances,
/// k-medoid clustering into h/m groups, then optimal equal-size regrouping.
pub fn similar_groupings(
    model: &PreparedModel,
    m: usize,
    calib: &CalibrationConfig,
) -> Result<Vec<HeadGrouping>> {
    let h = model.config.num_heads;
    if m == 0 || !h.is_multiple_of(m) {
        return Err(Error::InvalidConfig(format!(
            "merge factor {m} does not divide {h} heads"
        )));
    }
    let prompts = calibration_prompts(model, calib);
    let distances = pairwise_distances(model, &prompts)?;
    groupings_from_distances(&distances, m, calib.seed)
}
