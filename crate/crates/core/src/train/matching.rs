use super::LossWeights;
use crate::datagen::DetectionSample;
use crate::model::normalized_points;
use crate::numeric::{sigmoid, Matrix};

/// Minimum-cost assignment of every row to a distinct column of a
/// `rows × cols` cost matrix with `rows ≤ cols`. Returns the column of each
/// row. Shortest augmenting paths with potentials, O(rows² · cols).
pub fn hungarian(cost: &Matrix) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "hungarian needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Query → ground-truth assignment minimizing
/// `λ_cls · focal class cost + λ_reg · mean |Δ point|` over the current
/// predictions.
pub fn hungarian_assignment(
    sample: &DetectionSample,
    cls_logits: &Matrix,
    reg_points: &Matrix,
    w: &LossWeights,
) -> Vec<Option<usize>> {
    let lanes = &sample.scene.lanes;
    let n_q = cls_logits.rows();
    let gt = normalized_points(&sample.scene.centerlines(), &sample.extent);
    let probs = cls_logits.map(sigmoid);
    let (a, g) = (w.focal_alpha, w.focal_gamma);
    let cost = Matrix::from_fn(lanes.len(), n_q, |l, q| {
        let p = probs.get(q, lanes[l].category.index()).clamp(1e-12, 1.0 - 1e-12);
        let pos = a * (1.0 - p).powf(g) * -p.ln();
        let neg = (1.0 - a) * p.powf(g) * -(1.0 - p).ln();
        let l1 = reg_points
            .row(q)
            .iter()
            .zip(gt.row(l))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / gt.cols() as f64;
        w.lambda_cls * (pos - neg) + w.lambda_reg * l1
    });
    let mut out = vec![None; n_q];
    if lanes.len() > n_q {
        return out;
    }
    for (l, q) in hungarian(&cost).into_iter().enumerate() {
        out[q] = Some(l);
    }
    out
}
