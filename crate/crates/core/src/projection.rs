//! 2D layouts of pooled activation vectors: PCA and exact t-SNE.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_param, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    #[default]
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionResult {
    pub method: ProjectionMethod,
    pub seed: u64,
    pub benign: Vec<[f64; 2]>,
    pub adversarial: Vec<[f64; 2]>,
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    if points.len() < 3 {
        return Err(invalid_param("pairs", "a projection needs at least 3 points"));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
        return Err(invalid_param("points", "must be finite vectors of one common, nonzero length"));
    }
    Ok(d)
}

/// Projection onto the two leading principal components. Each component is
/// signed so that its largest-magnitude entry is positive.
pub fn pca(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let d = check_points(points)?;
    let n = points.len();
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let component = |r: usize| -> Option<Vec<f64>> {
        let &c = idx.get(r)?;
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Some(v)
    };
    let comps = [component(0), component(1)];
    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let mut out = [0.0; 2];
            for (o, comp) in out.iter_mut().zip(&comps) {
                if let Some(c) = comp {
                    *o = row.iter().zip(c).map(|(a, b)| a * b).sum();
                }
            }
            out
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / (4 · exaggeration), 50)`.
    pub learning_rate: Option<f64>,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: None,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    pub embedding: Vec<[f64; 2]>,
    /// Perplexity actually used after clamping to `(n − 1) / 3`.
    pub perplexity: f64,
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Row-conditional affinities calibrated by bisection on the precision so
/// that each row's entropy equals `ln(perplexity)`, then symmetrized.
fn joint_probabilities(dist2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &dist2[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut cond = vec![0.0; n];
        for _ in 0..100 {
            let min = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                cond[j] = if j == i { 0.0 } else { (-(row[j] - min) * beta).exp() };
                sum += cond[j];
            }
            let mut entropy = 0.0;
            for j in 0..n {
                cond[j] /= sum;
                if cond[j] > 1e-300 {
                    entropy -= cond[j] * cond[j].ln();
                }
            }
            let diff = entropy - target;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&cond);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }
    joint
}

/// Student-t similarities `1 / (1 + ‖yᵢ − yⱼ‖²)` and their sum.
fn similarities(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, sum) = similarities(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = (num[i * n + j] / sum).max(1e-12);
                kl += p[i * n + j] * (p[i * n + j] / q).ln();
            }
        }
    }
    kl
}

/// Exact t-SNE with gradient descent, momentum and adaptive gains.
pub fn tsne(points: &[Vec<f64>], config: &TsneConfig, seed: u64) -> Result<TsneResult> {
    check_points(points)?;
    if config.perplexity <= 0.0 || config.learning_rate.is_some_and(|lr| lr <= 0.0) || config.early_exaggeration < 1.0 {
        return Err(invalid_param("tsne", "perplexity and learning rate must be positive, exaggeration ≥ 1"));
    }
    let n = points.len();
    let perplexity = config.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let mut dist2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            dist2[i * n + j] = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    }
    let p = joint_probabilities(&dist2, n, perplexity);
    let learning_rate = config
        .learning_rate
        .unwrap_or_else(|| (n as f64 / (4.0 * config.early_exaggeration)).max(50.0));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let initial_kl = kl_divergence(&p, &y);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for iter in 0..config.iterations {
        let exaggerate = iter < config.exaggeration_iterations;
        let scale = if exaggerate { config.early_exaggeration } else { 1.0 };
        let momentum = if exaggerate { 0.5 } else { 0.8 };
        let (num, sum) = similarities(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = (scale * p[i * n + j] - num[i * n + j] / sum) * num[i * n + j];
                g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                g[1] += 4.0 * w * (y[i][1] - y[j][1]);
            }
            for d in 0..2 {
                let gain = &mut gains[i][d];
                *gain = if (g[d] > 0.0) != (update[i][d] > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
                *gain = gain.max(0.01);
                update[i][d] = momentum * update[i][d] - learning_rate * *gain * g[d];
            }
        }
        for (yi, u) in y.iter_mut().zip(&update) {
            yi[0] += u[0];
            yi[1] += u[1];
        }
        let cx = y.iter().map(|v| v[0]).sum::<f64>() / n as f64;
        let cy = y.iter().map(|v| v[1]).sum::<f64>() / n as f64;
        for v in y.iter_mut() {
            v[0] -= cx;
            v[1] -= cy;
        }
    }
    let final_kl = kl_divergence(&p, &y);
    Ok(TsneResult {
        embedding: y,
        perplexity,
        initial_kl,
        final_kl,
    })
}

pub fn project(points: &[Vec<f64>], method: ProjectionMethod, seed: u64) -> Result<Vec<[f64; 2]>> {
    match method {
        ProjectionMethod::Pca => pca(points),
        ProjectionMethod::Tsne => Ok(tsne(points, &TsneConfig::default(), seed)?.embedding),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn planar_data_keeps_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = [0.5, 0.5, 0.5, 0.5, 0.0, 0.0];
        let v = [0.5, -0.5, 0.0, 0.0, 0.5, -0.5];
        let offset = [1.0, -2.0, 0.3, 0.0, 5.0, 1.0];
        let points: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let (a, b): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
                (0..6).map(|k| offset[k] + a * u[k] + b * v[k]).collect()
            })
            .collect();
        let proj = pca(&points).unwrap();
        for i in 0..points.len() {
            for j in 0..points.len() {
                assert!((dist(&points[i], &points[j]) - dist(&proj[i], &proj[j])).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicates_coincide() {
        let points = vec![vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 1.0], vec![4.0, 1.0, 0.0]];
        let proj = pca(&points).unwrap();
        assert!(dist(&proj[0], &proj[1]) < 1e-12);
    }

    #[test]
    fn too_few_points() {
        assert!(pca(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn one_dimensional_input() {
        let proj = pca(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        assert!(proj.iter().all(|p| p[1] == 0.0));
        assert!((dist(&proj[0], &proj[2]) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tsne_lowers_kl_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let c = (i % 3) as f64 * 5.0;
                (0..4).map(|_| c + rng.random_range(-0.5..0.5)).collect()
            })
            .collect();
        let cfg = TsneConfig::default();
        let a = tsne(&points, &cfg, 7).unwrap();
        assert!(a.final_kl < a.initial_kl, "{} {}", a.initial_kl, a.final_kl);
        assert!((a.perplexity - 29.0 / 3.0).abs() < 1e-12);
        assert!(a.embedding.iter().all(|p| p[0].is_finite() && p[1].is_finite()));
        assert_eq!(a, tsne(&points, &cfg, 7).unwrap());
    }

    #[test]
    fn tsne_on_three_points() {
        let points = vec![vec![0.0], vec![1.0], vec![3.0]];
        let r = tsne(&points, &TsneConfig { iterations: 50, ..Default::default() }, 0).unwrap();
        assert_eq!(r.perplexity, 1.0);
        assert!(r.embedding.iter().all(|p| p[0].is_finite()));
    }
}
