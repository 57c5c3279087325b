//! Post-training objective: action-chunk MSE plus the routing regularizers
//! (distance consistency, entropy, group sparsity).
//!
//! All functions operate on graph nodes so the same code serves training
//! and gradient checking. Batched inputs are `[batch, width]`; batch-level
//! entropy and group-sparse terms are means over rows.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, Var};
use crate::error::{Error, Result};

/// Below this width the Gaussian filter collapses to the identity kernel.
pub const DELTA_KERNEL_SIGMA: f64 = 0.05;
const SIMPLEX_SUM_TOL: f64 = 1e-6;
const SIMPLEX_NEG_TOL: f64 = -1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dc: f64,
    pub lambda_h: f64,
    pub lambda_g: f64,
    /// Std-dev of the group-sparse Gaussian filter.
    pub sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dc: 1.0,
            lambda_h: 0.01,
            lambda_g: 0.01,
            sigma: 1.0,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda_dc: 0.0,
        lambda_h: 0.0,
        lambda_g: 0.0,
        sigma: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_dc, self.lambda_h, self.lambda_g];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::invalid(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Views a vector as a one-row batch.
fn as_batch(g: &mut Graph, x: Var) -> Result<Var> {
    match g.shape(x).len() {
        1 => {
            let w = g.shape(x)[0];
            g.reshape(x, &[1, w])
        }
        2 => Ok(x),
        _ => Err(Error::InvalidShape {
            shape: g.shape(x).to_vec(),
            reason: "expected a vector or a [batch, width] matrix".into(),
        }),
    }
}

/// Pairwise `1 - cos(row_i, row_j)` for a `[B, d]` batch, `B >= 2`.
pub fn cosine_distance_matrix(g: &mut Graph, rows: Var) -> Result<Var> {
    let shape = g.shape(rows).to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::InvalidShape {
            shape,
            reason: "cosine distances need at least two rows".into(),
        });
    }
    let b = shape[0];
    let norms = g.row_norm(rows)?;
    let unit = g.div(rows, norms)?;
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let ones = g.constant(Array::full(&[b, b], 1.0));
    g.sub(ones, cos)
}

/// Value-only [`cosine_distance_matrix`].
pub fn cosine_distances(rows: &Array) -> Result<Array> {
    let mut g = Graph::new();
    let x = g.constant(rows.clone());
    let d = cosine_distance_matrix(&mut g, x)?;
    Ok(g.value(d).clone())
}

/// `||D(Z) - D(P)||_F^2 / B^2`
pub fn distance_consistency_loss(g: &mut Graph, latents: Var, routing: Var) -> Result<Var> {
    let (bz, bp) = (g.shape(latents)[0], g.shape(routing)[0]);
    if g.shape(latents).len() != 2 || g.shape(routing).len() != 2 || bz != bp {
        return Err(Error::ShapeMismatch {
            op: "distance_consistency_loss",
            lhs: g.shape(latents).to_vec(),
            rhs: g.shape(routing).to_vec(),
        });
    }
    let dz = cosine_distance_matrix(g, latents)?;
    let dp = cosine_distance_matrix(g, routing)?;
    let diff = g.sub(dz, dp)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / (bz * bz) as f64)
}

fn check_simplex(p: &Array) -> Result<()> {
    if let Some(&v) = p
        .data()
        .iter()
        .find(|&&v| v < SIMPLEX_NEG_TOL || !v.is_finite())
    {
        return Err(Error::Domain {
            op: "entropy_loss",
            value: v,
        });
    }
    for row in p.data().chunks(p.last_dim()) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::invalid(format!("routing row sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Mean over rows of `-sum p ln p` (natural log, `0 ln 0 = 0`).
pub fn entropy_loss(g: &mut Graph, p: Var) -> Result<Var> {
    check_simplex(g.value(p))?;
    let p = as_batch(g, p)?;
    let rows = g.shape(p)[0];
    let logp = g.log(p)?;
    let plogp = g.mul(p, logp)?;
    let total = g.sum(plogp)?;
    g.scale(total, -1.0 / rows as f64)
}

/// Near-square grid for `n` experts: `rows = floor(sqrt n)`,
/// `cols = ceil(n / rows)`.
pub fn routing_grid(n: usize) -> (usize, usize) {
    let rows = ((n as f64).sqrt().floor() as usize).max(1);
    (rows, n.div_ceil(rows))
}

/// Normalized Gaussian kernel of extent `2 ceil(2 sigma) + 1`, or the 1x1
/// identity for `sigma < DELTA_KERNEL_SIGMA`.
pub fn gaussian_kernel(sigma: f64) -> Array {
    if sigma < DELTA_KERNEL_SIGMA {
        return Array::full(&[1, 1], 1.0);
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let size = (2 * radius + 1) as usize;
    let mut k = Array::zeros(&[size, size]);
    for u in -radius..=radius {
        for v in -radius..=radius {
            let w = (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
            k.data_mut()[(u + radius) as usize * size + (v + radius) as usize] = w;
        }
    }
    let total = k.sum();
    k.map(|w| w / total)
}

/// Mean over rows of `sum_ij sqrt((F_sigma * grid(p)^2)_ij)`, where
/// `grid` lays a routing row out row-major on a near-square grid with
/// zero padding.
pub fn group_sparse_loss(g: &mut Graph, p: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    let p = as_batch(g, p)?;
    let (batch, n) = (g.shape(p)[0], g.shape(p)[1]);
    let (rows, cols) = routing_grid(n);
    let padded = if rows * cols > n {
        let zeros = g.constant(Array::zeros(&[batch, rows * cols - n]));
        g.concat(&[p, zeros], 1)?
    } else {
        p
    };
    let sq = g.mul(padded, padded)?;
    let grid = g.reshape(sq, &[batch, rows, cols])?;
    let smoothed = g.conv2d(grid, gaussian_kernel(sigma))?;
    let roots = g.sqrt(smoothed)?;
    let total = g.sum(roots)?;
    g.scale(total, 1.0 / batch as f64)
}

/// `mean((pred - target)^2)`
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    g.mean(sq)
}

/// Graph nodes of the objective and its components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub distance_consistency: Var,
    pub entropy: Var,
    pub group_sparse: Var,
}

/// Evaluated loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub distance_consistency: f64,
    pub entropy: f64,
    pub group_sparse: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            mse: g.value(self.mse).item(),
            distance_consistency: g.value(self.distance_consistency).item(),
            entropy: g.value(self.entropy).item(),
            group_sparse: g.value(self.group_sparse).item(),
        }
    }
}

impl LossBreakdown {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.mse
            + w.lambda_dc * self.distance_consistency
            + w.lambda_h * self.entropy
            + w.lambda_g * self.group_sparse
    }
}

/// `L = L_mse + l_dc L_dc + l_h L_h + l_g L_g` over a batch.
pub fn total_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    latents: Var,
    routing: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate()?;
    let mse = mse(g, pred, target)?;
    let distance_consistency = distance_consistency_loss(g, latents, routing)?;
    let entropy = entropy_loss(g, routing)?;
    let group_sparse = group_sparse_loss(g, routing, weights.sigma)?;
    let mut total = mse;
    for (term, lambda) in [
        (distance_consistency, weights.lambda_dc),
        (entropy, weights.lambda_h),
        (group_sparse, weights.lambda_g),
    ] {
        let scaled = g.scale(term, lambda)?;
        total = g.add(total, scaled)?;
    }
    Ok(LossTerms {
        total,
        mse,
        distance_consistency,
        entropy,
        group_sparse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn rows(r: &[&[f64]]) -> Array {
        Array::from_rows(r).unwrap()
    }

    fn random_simplex(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    /// Direct double loop over `1 - x.y / (|x||y|)`.
    fn cosine_oracle(x: &Array) -> Array {
        let b = x.shape()[0];
        let mut d = Array::zeros(&[b, b]);
        for i in 0..b {
            for j in 0..b {
                let (xi, xj) = (x.row(i), x.row(j));
                let dot: f64 = xi.iter().zip(xj).map(|(a, c)| a * c).sum();
                let ni = xi.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nj = xj.iter().map(|a| a * a).sum::<f64>().sqrt();
                d.data_mut()[i * b + j] = 1.0 - dot / (ni * nj);
            }
        }
        d
    }

    #[test]
    fn cosine_fixtures() {
        let same = cosine_distances(&rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!(same.data().iter().all(|v| v.abs() < 1e-12));
        let ortho = cosine_distances(&rows(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(ortho.at2(0, 1), 1.0);
        assert_eq!(ortho.at2(1, 0), 1.0);
        let anti = cosine_distances(&rows(&[&[1.0, 0.0], &[-1.0, 0.0]])).unwrap();
        assert_eq!(anti.at2(0, 1), 2.0);
        assert!(cosine_distances(&rows(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn cosine_matches_oracle_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let x = Array::new(
                vec![5, 3],
                (0..15).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let d = cosine_distances(&x).unwrap();
            assert!(d.max_abs_diff(&cosine_oracle(&x)) < 1e-12);
            for i in 0..5 {
                assert!(d.at2(i, i).abs() < 1e-12);
                for j in 0..5 {
                    assert!((d.at2(i, j) - d.at2(j, i)).abs() < 1e-15);
                    assert!((-1e-12..=2.0 + 1e-12).contains(&d.at2(i, j)));
                }
            }
            let scaled = cosine_distances(&x.map(|v| v * 3.7)).unwrap();
            assert!(scaled.max_abs_diff(&d) < 1e-10);
        }
    }

    #[test]
    fn distance_consistency_hand_case() {
        // D(Z) off-diagonal 1, D(P) all 0: (1 + 1) / 4
        let loss = eval(|g| {
            let z = g.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
            let p = g.constant(rows(&[&[0.5, 0.5], &[0.5, 0.5]]));
            distance_consistency_loss(g, z, p)
        });
        assert!((loss - 0.5).abs() < 1e-9);
    }

    #[test]
    fn distance_consistency_zero_when_geometries_agree() {
        // Routing rows along the same directions as the latents.
        let loss = eval(|g| {
            let z = g.constant(rows(&[
                &[1.0, 0.0, 0.0],
                &[0.0, 2.0, 0.0],
                &[1.0, 1.0, 0.0],
            ]));
            let p = g.constant(rows(&[
                &[1.0, 0.0, 0.0],
                &[0.0, 1.0, 0.0],
                &[0.5, 0.5, 0.0],
            ]));
            distance_consistency_loss(g, z, p)
        });
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn distance_consistency_symmetry_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(5, &mut rng)).collect();
        let dc = |z: &[Vec<f64>], p: &[Vec<f64>]| {
            eval(|g| {
                let zv = g.constant(Array::from_rows(z).unwrap());
                let pv = g.constant(Array::from_rows(p).unwrap());
                distance_consistency_loss(g, zv, pv)
            })
        };
        let base = dc(&z, &p);
        assert!(base > 0.0);
        assert!((dc(&p, &z) - base).abs() < 1e-15);
        let perm = [2, 0, 3, 1];
        let zp: Vec<_> = perm.iter().map(|&i| z[i].clone()).collect();
        let pp: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        assert!((dc(&zp, &pp) - base).abs() < 1e-12);
        let short = vec![p[0].clone(), p[1].clone()];
        let mut g = Graph::new();
        let zv = g.constant(Array::from_rows(&z).unwrap());
        let pv = g.constant(Array::from_rows(&short).unwrap());
        assert!(distance_consistency_loss(&mut g, zv, pv).is_err());
    }

    #[test]
    fn entropy_fixtures() {
        let h = |p: Vec<f64>| {
            eval(|g| {
                let v = g.constant(Array::vector(p));
                entropy_loss(g, v)
            })
        };
        assert!(h(vec![0.0, 1.0, 0.0, 0.0]).abs() < 1e-9);
        assert!((h(vec![0.25; 4]) - 4f64.ln()).abs() < 1e-9);
        assert!((h(vec![0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-9);
        let mut g = Graph::new();
        let bad = g.constant(Array::vector(vec![1.1, -0.1]));
        assert!(matches!(
            entropy_loss(&mut g, bad),
            Err(Error::Domain { .. })
        ));
        let unnormalized = g.constant(Array::vector(vec![0.3, 0.3]));
        assert!(entropy_loss(&mut g, unnormalized).is_err());
    }

    #[test]
    fn entropy_bounded_and_maximal_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 6;
        let h = |p: Vec<f64>| {
            eval(|g| {
                let v = g.constant(Array::vector(p));
                entropy_loss(g, v)
            })
        };
        let top = h(vec![1.0 / n as f64; n]);
        for _ in 0..100 {
            let p = random_simplex(n, &mut rng);
            let e = h(p.clone());
            assert!(e >= -1e-12 && e <= (n as f64).ln() + 1e-12);
            // step from uniform toward a random simplex point
            let t = rng.random::<f64>();
            let q: Vec<f64> = p.iter().map(|v| (1.0 - t) / n as f64 + t * v).collect();
            assert!(h(q) <= top + 1e-12);
        }
    }

    #[test]
    fn grid_and_kernel_shapes() {
        assert_eq!(routing_grid(1), (1, 1));
        assert_eq!(routing_grid(4), (2, 2));
        assert_eq!(routing_grid(8), (2, 4));
        assert_eq!(routing_grid(16), (4, 4));
        assert_eq!(routing_grid(5), (2, 3));
        assert_eq!(gaussian_kernel(1.0).shape(), &[5, 5]);
        assert_eq!(gaussian_kernel(0.5).shape(), &[3, 3]);
        assert!((gaussian_kernel(1.0).sum() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.01).shape(), &[1, 1]);
    }

    #[test]
    fn group_sparse_identity_kernel_is_one_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let n = 1 + trial % 16;
            let p = random_simplex(n, &mut rng);
            let v = eval(|g| {
                let x = g.constant(Array::vector(p.clone()));
                group_sparse_loss(g, x, 0.01)
            });
            // the 1e-12 guard adds at most 1e-6 per grid cell
            let (r, c) = routing_grid(n);
            let exact: f64 =
                p.iter().map(|x| (x * x + 1e-12).sqrt()).sum::<f64>() + (r * c - n) as f64 * 1e-6;
            assert!((v - exact).abs() < 1e-12, "n={n} v={v}");
            assert!((v - 1.0).abs() <= (r * c) as f64 * 1e-6);
        }
        let onehot = eval(|g| {
            let x = g.constant(Array::vector(vec![0.0, 0.0, 1.0, 0.0]));
            group_sparse_loss(g, x, 0.01)
        });
        assert!((onehot - 1.0).abs() <= 4e-6);
    }

    /// Brute-force: explicit zero-padded convolution sum per grid cell.
    fn group_sparse_oracle(p: &[f64], sigma: f64) -> f64 {
        let (rows, cols) = routing_grid(p.len());
        let mut grid = vec![vec![0.0; cols]; rows];
        for (i, v) in p.iter().enumerate() {
            grid[i / cols][i % cols] = v * v;
        }
        let r = (2.0 * sigma).ceil() as isize;
        let mut norm = 0.0;
        for u in -r..=r {
            for v in -r..=r {
                norm += (-((u * u + v * v) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let mut total = 0.0;
        for i in 0..rows as isize {
            for j in 0..cols as isize {
                let mut acc = 0.0;
                for si in 0..rows as isize {
                    for sj in 0..cols as isize {
                        let (du, dv) = (i - si, j - sj);
                        if du.abs() <= r && dv.abs() <= r {
                            let w = (-((du * du + dv * dv) as f64) / (2.0 * sigma * sigma)).exp()
                                / norm;
                            acc += w * grid[si as usize][sj as usize];
                        }
                    }
                }
                total += (acc + 1e-12).sqrt();
            }
        }
        total
    }

    #[test]
    fn group_sparse_matches_convolution_oracle() {
        let v = eval(|g| {
            let x = g.constant(Array::vector(vec![0.25; 4]));
            group_sparse_loss(g, x, 1.0)
        });
        assert!((v - group_sparse_oracle(&[0.25; 4], 1.0)).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2, 5, 8, 9, 16] {
            for sigma in [0.5, 1.0, 1.7] {
                let p = random_simplex(n, &mut rng);
                let got = eval(|g| {
                    let x = g.constant(Array::vector(p.clone()));
                    group_sparse_loss(g, x, sigma)
                });
                assert!((got - group_sparse_oracle(&p, sigma)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn total_loss_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let pred =
            g.constant(Array::new(vec![4, 6], (0..24).map(|_| rng.random()).collect()).unwrap());
        let target =
            g.constant(Array::new(vec![4, 6], (0..24).map(|_| rng.random()).collect()).unwrap());
        let z = g.constant(
            Array::new(
                vec![4, 3],
                (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap(),
        );
        let p: Vec<Vec<f64>> = (0..4).map(|_| random_simplex(4, &mut rng)).collect();
        let p = g.constant(Array::from_rows(&p).unwrap());
        let w = LossWeights {
            lambda_dc: 0.7,
            lambda_h: 0.3,
            lambda_g: 0.2,
            sigma: 1.0,
        };
        let terms = total_loss(&mut g, pred, target, z, p, &w).unwrap();
        let v = terms.values(&g);
        assert!((v.total - v.weighted_sum(&w)).abs() < 1e-12);

        let zero = total_loss(&mut g, pred, target, z, p, &LossWeights::ZERO).unwrap();
        let v0 = zero.values(&g);
        assert_eq!(v0.total, v0.mse);
    }

    #[test]
    fn total_loss_reduces_to_group_sparse_when_matched() {
        let mut g = Graph::new();
        let chunk = g.constant(Array::full(&[2, 6], 0.3));
        let z = g.constant(rows(&[&[2.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 3.0, 0.0]]));
        let p = g.constant(rows(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 1.0, 0.0]]));
        let w = LossWeights {
            lambda_dc: 1.0,
            lambda_h: 1.0,
            lambda_g: 0.5,
            sigma: 1.0,
        };
        let v = total_loss(&mut g, chunk, chunk, z, p, &w)
            .unwrap()
            .values(&g);
        assert_eq!(v.mse, 0.0);
        assert!(v.distance_consistency.abs() < 1e-15);
        assert!(v.entropy.abs() < 1e-9);
        assert!((v.total - 0.5 * v.group_sparse).abs() < 1e-9);
    }

    #[test]
    fn regularizers_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Array::new(
            vec![4, 3],
            (0..12).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let logits = Array::new(
            vec![4, 5],
            (0..20).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let report = finite_diff_check(
            |g, v| {
                let p = g.softmax(v[1])?;
                let dc = distance_consistency_loss(g, v[0], p)?;
                let h = entropy_loss(g, p)?;
                let gs = group_sparse_loss(g, p, 1.0)?;
                let a = g.add(dc, h)?;
                g.add(a, gs)
            },
            &[z, logits],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }
}
