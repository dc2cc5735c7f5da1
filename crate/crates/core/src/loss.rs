//! Contrastive objectives over batches of paired embeddings.
//!
//! The two-sensor loss treats (x_i, y_i) as the only positive for anchor i.
//! Each direction contrasts the positive against every same-batch
//! competitor: the other N-1 embeddings of the anchor's own side and all N
//! of the other side (the matching index included, where it contributes the
//! positive term itself). The per-anchor loss is the sum of both
//! directions; reduction defaults to the batch mean.
//!
//! Inputs need not be unit-norm: rows are cosine-normalized internally and
//! gradients flow through that normalization, so finite-difference checks
//! against the raw inputs are valid.
//!
//! Exactness contract: a shared index permutation of (X, Y) permutes the
//! per-anchor losses bitwise, and swapping X with Y leaves them bitwise
//! unchanged. Pairwise similarities are computed per pair in fixed element
//! order and denominator terms are summed smallest-first, which makes both
//! properties hold to the last bit rather than to a tolerance.

use ndarray::{Array1, Array2};
#[cfg(test)]
use ndarray::Axis;

use crate::{Error, Result};

/// Softmax sharpness used by the published training setup.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Loss value with per-anchor breakdown and input-space gradients.
#[derive(Debug, Clone)]
pub struct ContrastiveOut {
    pub loss: f64,
    /// Pre-reduction per-anchor losses, both directions summed.
    pub per_sample: Array1<f64>,
    pub grad_x: Array2<f64>,
    pub grad_y: Array2<f64>,
}

fn validate_pair(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "embedding shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::Shape("empty embedding batch".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    for m in [x, y] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding contains nan or inf".into()));
        }
    }
    Ok(())
}

/// Unit rows and their original norms; zero rows are rejected.
fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, d) = m.dim();
    let mut unit = Array2::<f64>::zeros((n, d));
    let mut norms = Array1::<f64>::zeros(n);
    for i in 0..n {
        let norm = m.row(i).iter().map(|&v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Validation(format!("embedding row {i} is all zeros")));
        }
        norms[i] = norm;
        for j in 0..d {
            unit[(i, j)] = m[(i, j)] / norm;
        }
    }
    Ok((unit, norms))
}

/// Fixed-order dot product; the anchor of the bitwise-exactness contract.
#[inline]
fn dot(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let mut acc = 0.0;
    for (va, vb) in a.iter().zip(b.iter()) {
        acc += va * vb;
    }
    acc
}

/// Pairwise cosine similarities, out[i, k] = cos(x_i, y_k).
pub fn cosine_similarity_matrix(x: &Array2<f64>, y: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "dimension mismatch: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let (xu, _) = normalize_rows(x)?;
    let (yu, _) = normalize_rows(y)?;
    let mut out = Array2::<f64>::zeros((x.nrows(), y.nrows()));
    for i in 0..x.nrows() {
        for k in 0..y.nrows() {
            out[(i, k)] = dot(xu.row(i), yu.row(k));
        }
    }
    Ok(out)
}

/// Sum of exp(t - shift) over `terms`, added smallest-first so the result
/// is independent of the caller's term order.
fn sorted_exp_sum(terms: &mut Vec<f64>, shift: f64) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().map(|&t| (t - shift).exp()).sum()
}

/// Dual-direction contrastive loss with analytic gradients.
pub fn multimodal_nce(
    x: &Array2<f64>,
    y: &Array2<f64>,
    tau: f64,
    reduction: Reduction,
) -> Result<ContrastiveOut> {
    validate_pair(x, y, tau)?;
    let (n, _d) = x.dim();
    let (xu, xnorm) = normalize_rows(x)?;
    let (yu, ynorm) = normalize_rows(y)?;

    // Scaled similarities t = cos/tau for the three block matrices.
    let mut t_xy = Array2::<f64>::zeros((n, n));
    let mut t_xx = Array2::<f64>::zeros((n, n));
    let mut t_yy = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for k in 0..n {
            t_xy[(i, k)] = dot(xu.row(i), yu.row(k)) / tau;
            t_xx[(i, k)] = dot(xu.row(i), xu.row(k)) / tau;
            t_yy[(i, k)] = dot(yu.row(i), yu.row(k)) / tau;
        }
    }

    let weight = match reduction {
        Reduction::Mean => 1.0 / n as f64,
        Reduction::Sum => 1.0,
    };
    let mut per_sample = Array1::<f64>::zeros(n);
    // dL/dT for each block; diagonal of the within blocks never appears.
    let mut a = Array2::<f64>::zeros((n, n));
    let mut b = Array2::<f64>::zeros((n, n));
    let mut c = Array2::<f64>::zeros((n, n));
    let mut terms = Vec::with_capacity(2 * n - 1);

    for i in 0..n {
        // Anchor x_i against {x_k : k != i} and all y_k.
        terms.clear();
        let mut m = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                terms.push(t_xx[(i, k)]);
                m = m.max(t_xx[(i, k)]);
            }
            terms.push(t_xy[(i, k)]);
            m = m.max(t_xy[(i, k)]);
        }
        let denom = sorted_exp_sum(&mut terms, m);
        let log_denom = m + denom.ln();
        let l_xy = log_denom - t_xy[(i, i)];
        for k in 0..n {
            if k != i {
                a[(i, k)] += weight * (t_xx[(i, k)] - log_denom).exp() / tau;
            }
            let p = (t_xy[(i, k)] - log_denom).exp();
            let pos = if k == i { 1.0 } else { 0.0 };
            b[(i, k)] += weight * (p - pos) / tau;
        }

        // Anchor y_i against {y_k : k != i} and all x_k; cross similarity
        // sim(y_i, x_k) is the transposed entry t_xy[k, i].
        terms.clear();
        let mut m = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                terms.push(t_yy[(i, k)]);
                m = m.max(t_yy[(i, k)]);
            }
            terms.push(t_xy[(k, i)]);
            m = m.max(t_xy[(k, i)]);
        }
        let denom = sorted_exp_sum(&mut terms, m);
        let log_denom = m + denom.ln();
        let l_yx = log_denom - t_xy[(i, i)];
        for k in 0..n {
            if k != i {
                c[(i, k)] += weight * (t_yy[(i, k)] - log_denom).exp() / tau;
            }
            let p = (t_xy[(k, i)] - log_denom).exp();
            let pos = if k == i { 1.0 } else { 0.0 };
            b[(k, i)] += weight * (p - pos) / tau;
        }

        per_sample[i] = l_xy + l_yx;
    }

    let loss = match reduction {
        Reduction::Mean => per_sample.sum() / n as f64,
        Reduction::Sum => per_sample.sum(),
    };

    // T_xx = Xu Xu', T_xy = Xu Yu', T_yy = Yu Yu', all scaled by 1/tau; the
    // 1/tau is already inside a, b, c.
    let d_xu = (&a + &a.t()).dot(&xu) + b.dot(&yu);
    let d_yu = (&c + &c.t()).dot(&yu) + b.t().dot(&xu);
    let grad_x = backprop_row_normalize(&xu, &xnorm, &d_xu);
    let grad_y = backprop_row_normalize(&yu, &ynorm, &d_yu);

    Ok(ContrastiveOut { loss, per_sample, grad_x, grad_y })
}

/// Chain rule through u = v / |v| given the unit rows and original norms.
fn backprop_row_normalize(
    unit: &Array2<f64>,
    norms: &Array1<f64>,
    d_unit: &Array2<f64>,
) -> Array2<f64> {
    let (n, d) = unit.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let proj = dot(unit.row(i), d_unit.row(i));
        for j in 0..d {
            out[(i, j)] = (d_unit[(i, j)] - unit[(i, j)] * proj) / norms[i];
        }
    }
    out
}

/// Two-view contrastive loss over 2N anchors, positives at offset N.
///
/// With mean reduction this equals exactly half of [`multimodal_nce`] on
/// the same inputs: each of the 2N anchors sees the same competitor set as
/// the corresponding direction term there, and the mean runs over 2N
/// instead of N.
pub fn ntxent(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> Result<ContrastiveOut> {
    validate_pair(z1, z2, tau)?;
    let (n, d) = z1.dim();
    let (u1, norm1) = normalize_rows(z1)?;
    let (u2, norm2) = normalize_rows(z2)?;
    let m2 = 2 * n;
    let mut zu = Array2::<f64>::zeros((m2, d));
    for i in 0..n {
        zu.row_mut(i).assign(&u1.row(i));
        zu.row_mut(n + i).assign(&u2.row(i));
    }
    let mut t = Array2::<f64>::zeros((m2, m2));
    for a in 0..m2 {
        for k in 0..m2 {
            t[(a, k)] = dot(zu.row(a), zu.row(k)) / tau;
        }
    }
    let weight = 1.0 / m2 as f64;
    let mut per_anchor = Array1::<f64>::zeros(m2);
    let mut g = Array2::<f64>::zeros((m2, m2));
    let mut terms = Vec::with_capacity(m2 - 1);
    for a in 0..m2 {
        let pos = (a + n) % m2;
        terms.clear();
        let mut mx = f64::NEG_INFINITY;
        for k in 0..m2 {
            if k == a {
                continue;
            }
            terms.push(t[(a, k)]);
            mx = mx.max(t[(a, k)]);
        }
        let denom = sorted_exp_sum(&mut terms, mx);
        let log_denom = mx + denom.ln();
        per_anchor[a] = log_denom - t[(a, pos)];
        for k in 0..m2 {
            if k == a {
                continue;
            }
            let p = (t[(a, k)] - log_denom).exp();
            let is_pos = if k == pos { 1.0 } else { 0.0 };
            g[(a, k)] += weight * (p - is_pos) / tau;
        }
    }
    let loss = per_anchor.sum() * weight;
    let d_zu = (&g + &g.t()).dot(&zu);
    let d_u1 = d_zu.slice(ndarray::s![..n, ..]).to_owned();
    let d_u2 = d_zu.slice(ndarray::s![n.., ..]).to_owned();
    let grad_x = backprop_row_normalize(&u1, &norm1, &d_u1);
    let grad_y = backprop_row_normalize(&u2, &norm2, &d_u2);
    // Fold the 2N anchor losses to one value per pair for reporting.
    let mut per_sample = Array1::<f64>::zeros(n);
    for i in 0..n {
        per_sample[i] = per_anchor[i] + per_anchor[n + i];
    }
    Ok(ContrastiveOut { loss, per_sample, grad_x, grad_y })
}

/// Plain scalar reference: per-pair cosines, direct exponential sums, no
/// log-sum-exp shift, no shared intermediates. Mean reduction.
pub fn multimodal_nce_oracle(x: &Array2<f64>, y: &Array2<f64>, tau: f64) -> Result<f64> {
    validate_pair(x, y, tau)?;
    let n = x.nrows();
    let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for (va, vb) in a.iter().zip(b.iter()) {
            ab += va * vb;
            aa += va * va;
            bb += vb * vb;
        }
        ab / (aa.sqrt() * bb.sqrt())
    };
    let mut total = 0.0;
    for i in 0..n {
        let num = (cos(x.row(i), y.row(i)) / tau).exp();
        let mut den_xy = 0.0;
        let mut den_yx = 0.0;
        for k in 0..n {
            if k != i {
                den_xy += (cos(x.row(i), x.row(k)) / tau).exp();
                den_yx += (cos(y.row(i), y.row(k)) / tau).exp();
            }
            den_xy += (cos(x.row(i), y.row(k)) / tau).exp();
            den_yx += (cos(y.row(i), x.row(k)) / tau).exp();
        }
        total += -(num / den_xy).ln() - (num / den_yx).ln();
    }
    Ok(total / n as f64)
}

/// Mean per-anchor entropy bound: log of the competitor count, the loss of
/// an ideal uniform similarity matrix. Handy as a training sanity level.
pub fn chance_level(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        2.0 * ((2 * n - 1) as f64).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_batch(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = derive_stream(seed, "test/loss_batch");
        let x = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let y = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        (x, y)
    }

    #[test]
    fn orthogonal_pairs_match_closed_form() {
        // Matching pairs identical, the two pairs orthogonal, tau = 1:
        // each direction loses ln(2 + e) - 1 per anchor.
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        let out = multimodal_nce(&x, &y, 1.0, Reduction::Mean).unwrap();
        let half = (2.0 + std::f64::consts::E).ln() - 1.0;
        assert!((out.loss - 2.0 * half).abs() < 1e-12, "loss {}", out.loss);
        assert!((out.per_sample[0] - 2.0 * half).abs() < 1e-12);
        assert!((out.per_sample[0] - out.per_sample[1]).abs() < 1e-12);
        let oracle = multimodal_nce_oracle(&x, &y, 1.0).unwrap();
        assert!((out.loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn single_pair_collapses_to_zero() {
        let (x, y) = random_batch(1, 8, 1);
        let out = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_x.iter().all(|&v| v == 0.0));
        assert!(out.grad_y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vectorized_loss_matches_scalar_oracle() {
        let mut rng = derive_stream(2, "test/oracle_sweep");
        for trial in 0..30u64 {
            let n = rng.random_range(1..=8);
            let d = rng.random_range(1..=16);
            let tau = [0.05, 0.1, 1.0][trial as usize % 3];
            let (x, y) = random_batch(n, d, 100 + trial);
            let fast = multimodal_nce(&x, &y, tau, Reduction::Mean).unwrap().loss;
            let slow = multimodal_nce_oracle(&x, &y, tau).unwrap();
            assert!(
                (fast - slow).abs() <= 1e-9,
                "trial {trial}: n={n} d={d} tau={tau}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn modality_swap_is_bitwise_invariant() {
        for seed in 0..5 {
            let (x, y) = random_batch(6, 12, 20 + seed);
            let ab = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
            let ba = multimodal_nce(&y, &x, DEFAULT_TAU, Reduction::Mean).unwrap();
            assert_eq!(ab.loss, ba.loss);
            assert_eq!(ab.per_sample, ba.per_sample);
            // Gradient roles swap with the arguments.
            for (g1, g2) in ab.grad_x.iter().zip(ba.grad_y.iter()) {
                assert!((g1 - g2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_permutation_permutes_per_sample_bitwise() {
        let n = 7;
        let (x, y) = random_batch(n, 10, 30);
        let base = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let mut xp = Array2::<f64>::zeros((n, 10));
        let mut yp = Array2::<f64>::zeros((n, 10));
        for (dst, &src) in perm.iter().enumerate() {
            xp.row_mut(dst).assign(&x.row(src));
            yp.row_mut(dst).assign(&y.row(src));
        }
        let permuted = multimodal_nce(&xp, &yp, DEFAULT_TAU, Reduction::Mean).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                permuted.per_sample[dst], base.per_sample[src],
                "anchor {src} changed under permutation"
            );
        }
    }

    fn fd_gradcheck(
        f: &dyn Fn(&Array2<f64>, &Array2<f64>) -> f64,
        x: &mut Array2<f64>,
        y: &mut Array2<f64>,
        gx: &Array2<f64>,
        gy: &Array2<f64>,
    ) {
        let eps = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        let (n, d) = x.dim();
        for i in 0..n {
            for j in 0..d {
                let keep = x[(i, j)];
                x[(i, j)] = keep + eps;
                let up = f(x, y);
                x[(i, j)] = keep - eps;
                let dn = f(x, y);
                x[(i, j)] = keep;
                let fd = (up - dn) / (2.0 * eps);
                let an = gx[(i, j)];
                assert!(rel(fd, an) < 1e-4, "grad_x[{i},{j}]: fd {fd} vs analytic {an}");
            }
        }
        for i in 0..n {
            for j in 0..d {
                let keep = y[(i, j)];
                y[(i, j)] = keep + eps;
                let up = f(x, y);
                y[(i, j)] = keep - eps;
                let dn = f(x, y);
                y[(i, j)] = keep;
                let fd = (up - dn) / (2.0 * eps);
                let an = gy[(i, j)];
                assert!(rel(fd, an) < 1e-4, "grad_y[{i},{j}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn nce_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let (mut x, mut y) = random_batch(4, 6, 40 + seed);
            let out = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
            let f = |a: &Array2<f64>, b: &Array2<f64>| {
                multimodal_nce(a, b, DEFAULT_TAU, Reduction::Mean).unwrap().loss
            };
            fd_gradcheck(&f, &mut x, &mut y, &out.grad_x, &out.grad_y);
        }
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let (mut x, mut y) = random_batch(4, 6, 50 + seed);
            let out = ntxent(&x, &y, DEFAULT_TAU).unwrap();
            let f = |a: &Array2<f64>, b: &Array2<f64>| ntxent(a, b, DEFAULT_TAU).unwrap().loss;
            fd_gradcheck(&f, &mut x, &mut y, &out.grad_x, &out.grad_y);
        }
    }

    #[test]
    fn ntxent_is_half_the_dual_direction_loss() {
        for seed in 0..5u64 {
            let (x, y) = random_batch(5, 9, 60 + seed);
            let full = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap().loss;
            let two_view = ntxent(&x, &y, DEFAULT_TAU).unwrap().loss;
            assert!(
                (two_view - full / 2.0).abs() < 1e-12,
                "ntxent {two_view} vs half {}",
                full / 2.0
            );
        }
    }

    #[test]
    fn row_scaling_leaves_loss_unchanged_and_rescales_gradient() {
        let (x, y) = random_batch(4, 8, 70);
        let base = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        let mut xs = x.clone();
        for v in xs.row_mut(2).iter_mut() {
            *v *= 3.0;
        }
        let scaled = multimodal_nce(&xs, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        assert!((base.loss - scaled.loss).abs() < 1e-12);
        for j in 0..8 {
            assert!((scaled.grad_x[(2, j)] - base.grad_x[(2, j)] / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reductions_and_errors() {
        let (x, y) = random_batch(5, 4, 80);
        let mean = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        let sum = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Sum).unwrap();
        assert!((sum.loss - 5.0 * mean.loss).abs() < 1e-9);
        assert!(multimodal_nce(&x, &y, 0.0, Reduction::Mean).is_err());
        assert!(multimodal_nce(&x, &y, -1.0, Reduction::Mean).is_err());
        let (x3, _) = random_batch(3, 4, 81);
        assert!(multimodal_nce(&x3, &y, DEFAULT_TAU, Reduction::Mean).is_err());
        let mut xz = x.clone();
        xz.row_mut(1).fill(0.0);
        assert!(multimodal_nce(&xz, &y, DEFAULT_TAU, Reduction::Mean).is_err());
        let mut xn = x.clone();
        xn[(0, 0)] = f64::NAN;
        assert!(multimodal_nce(&xn, &y, DEFAULT_TAU, Reduction::Mean).is_err());
    }

    #[test]
    fn cosine_matrix_agrees_with_normalized_dot() {
        let (x, y) = random_batch(4, 7, 90);
        let s = cosine_similarity_matrix(&x, &y).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                let xi = x.row(i);
                let yk = y.row(k);
                let nx = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = yk.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut d = 0.0;
                for (a, b) in xi.iter().zip(yk.iter()) {
                    d += a * b;
                }
                assert!((s[(i, k)] - d / (nx * ny)).abs() < 1e-12);
            }
        }
        assert!(s.iter().all(|&v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&v)));
    }

    proptest! {
        #[test]
        fn per_sample_losses_are_nonnegative(seed in 0u64..200, n in 2usize..6, d in 1usize..8) {
            let (x, y) = random_batch(n, d, seed);
            let out = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
            // Every denominator strictly contains the positive term plus
            // more positive mass, so each direction is positive.
            for (i, &l) in out.per_sample.iter().enumerate() {
                prop_assert!(l > 0.0, "anchor {i} loss {l}");
            }
            prop_assert!(out.loss > 0.0);
        }
    }

    #[test]
    fn mean_axis_usage_matches_manual_mean() {
        // Guard for the reporting helper: per_sample mean equals the loss
        // under mean reduction.
        let (x, y) = random_batch(6, 5, 91);
        let out = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        let manual = out.per_sample.mean_axis(Axis(0)).unwrap().into_scalar();
        assert!((manual - out.loss).abs() < 1e-12);
    }

    #[test]
    fn chance_level_matches_uniform_similarity() {
        // All embeddings identical: every similarity is 1, softmax is
        // uniform over 2N-1 competitors.
        let n = 5;
        let x = Array2::<f64>::from_elem((n, 4), 0.7);
        let y = Array2::<f64>::from_elem((n, 4), 0.7);
        let out = multimodal_nce(&x, &y, DEFAULT_TAU, Reduction::Mean).unwrap();
        assert!((out.loss - chance_level(n)).abs() < 1e-9);
    }
}
