//! Principal-component projection of style statistics and features.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixstyle::ChannelStats;
use crate::scalar::Scalar;

/// Result of projecting `n` row vectors onto their leading principal axes.
#[derive(Clone, Debug)]
pub struct Projection {
    /// `n` rows of `dims` coordinates.
    pub coords: Vec<Vec<f64>>,
    /// Unit principal axes, strongest first.
    pub axes: Vec<Vec<f64>>,
    /// Variance captured by each axis.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Projection {
    /// Fraction of total variance captured by the kept axes.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 1.0;
        }
        self.variances.iter().sum::<f64>() / self.total_variance
    }
}

/// One projected instance as emitted by the diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProjectedRow {
    pub x: f64,
    pub y: f64,
    pub domain_id: usize,
    pub class_id: usize,
}

const MAX_ITERS: usize = 2000;
const TOLERANCE: f64 = 1e-13;

/// PCA by orthogonal (subspace) iteration on the implicit covariance
/// `X^T X / n`, so wide inputs never materialize a `D x D` matrix.
pub fn pca(rows: &[Vec<f64>], dims: usize) -> Result<Projection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::invalid(format!("projection needs >= 3 instances, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("projection rows must share a non-zero width"));
    }
    if dims == 0 {
        return Err(Error::invalid("projection needs at least one output dimension"));
    }
    let k = dims.min(d);

    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let total_variance = centered
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64;

    let cov_apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; d];
        for r in &centered {
            let dot: f64 = r.iter().zip(v).map(|(a, b)| a * b).sum();
            out.iter_mut().zip(r).for_each(|(o, a)| *o += dot * a);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        out
    };

    // Deterministic, well-spread start vectors.
    let mut basis: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            (0..d)
                .map(|i| ((i as f64 + 1.0) * 12.9898 + (j as f64 + 1.0) * 78.233).sin())
                .collect()
        })
        .collect();
    orthonormalize(&mut basis);

    for _ in 0..MAX_ITERS {
        let mut next: Vec<Vec<f64>> = basis.iter().map(|v| cov_apply(v)).collect();
        orthonormalize(&mut next);
        let delta = basis
            .iter()
            .zip(&next)
            .map(|(a, b)| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>();
                // 0 when the directions agree (up to sign) or both vanish
                (na - dot * dot).abs()
            })
            .fold(0.0, f64::max);
        basis = next;
        if delta < TOLERANCE {
            break;
        }
    }

    // Rayleigh-Ritz on the converged subspace to order and rotate the axes.
    let cb: Vec<Vec<f64>> = basis.iter().map(|v| cov_apply(v)).collect();
    let small: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| basis[i].iter().zip(&cb[j]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let (evals, evecs) = jacobi_eigen(small);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| evals[b].total_cmp(&evals[a]));

    let mut axes = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &j in &order {
        let mut axis = vec![0.0; d];
        for (i, b) in basis.iter().enumerate() {
            axis.iter_mut().zip(b).for_each(|(a, v)| *a += evecs[i][j] * v);
        }
        // sign convention: largest-magnitude loading is positive
        let pivot = axis
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            axis.iter_mut().for_each(|a| *a = -*a);
        }
        axes.push(axis);
        variances.push(evals[j].max(0.0));
    }
    while axes.len() < dims {
        axes.push(vec![0.0; d]);
        variances.push(0.0);
    }

    let coords = centered
        .iter()
        .map(|r| {
            axes.iter()
                .map(|a| a.iter().zip(r).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        coords,
        axes,
        variances,
        total_variance,
    })
}

/// Modified Gram-Schmidt; vectors that vanish stay zero.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let dot: f64 = vs[i].iter().zip(&vs[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = vs.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = vs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-150 {
            vs[i].iter_mut().for_each(|v| *v /= norm);
        } else {
            vs[i].iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and eigenvectors as columns.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = a.len();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (arp, arq) = (a[r][p], a[r][q]);
                    a[r][p] = c * arp - s * arq;
                    a[r][q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let (apr, aqr) = (a[p][r], a[q][r]);
                    a[p][r] = c * apr - s * aqr;
                    a[q][r] = s * apr + c * aqr;
                }
                for r in 0..k {
                    let (vrp, vrq) = (v[r][p], v[r][q]);
                    v[r][p] = c * vrp - s * vrq;
                    v[r][q] = s * vrp + c * vrq;
                }
            }
        }
    }
    ((0..k).map(|i| a[i][i]).collect(), v)
}

/// 2-D PCA of concatenated `(mu, sigma)` vectors, one row per instance.
///
/// `stats` may hold several batches; `domain_ids` and `class_ids` run over
/// all their instances in order.
pub fn project_style_stats<S: Scalar>(
    stats: &[ChannelStats<S>],
    domain_ids: &[usize],
    class_ids: &[usize],
) -> Result<Vec<ProjectedRow>> {
    let rows: Vec<Vec<f64>> = stats
        .iter()
        .flat_map(|s| (0..s.batch()).map(move |b| s.style_vector(b)))
        .map(|v| v.into_iter().map(Scalar::as_f64).collect())
        .collect();
    project_rows(&rows, domain_ids, class_ids)
}

/// 2-D PCA of arbitrary feature rows with their labels attached.
pub fn project_rows(
    rows: &[Vec<f64>],
    domain_ids: &[usize],
    class_ids: &[usize],
) -> Result<Vec<ProjectedRow>> {
    if rows.len() != domain_ids.len() || rows.len() != class_ids.len() {
        return Err(Error::mismatch(
            "projection labels",
            &[rows.len()],
            &[domain_ids.len(), class_ids.len()],
        ));
    }
    let p = pca(rows, 2)?;
    Ok(p.coords
        .iter()
        .zip(domain_ids.iter().zip(class_ids))
        .map(|(c, (&domain_id, &class_id))| ProjectedRow {
            x: c[0],
            y: c[1],
            domain_id,
            class_id,
        })
        .collect())
}
