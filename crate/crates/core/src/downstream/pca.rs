use crate::error::{Error, Result};
use crate::numerics::Array;

/// Top eigenpairs of a symmetric matrix by power iteration with deflation.
/// Eigenvectors are signed so their largest-magnitude entry is positive.
pub fn top_eigenpairs(sym: &[f64], dim: usize, count: usize) -> Vec<(f64, Vec<f64>)> {
    let mut a = sym.to_vec();
    let mut out = Vec::with_capacity(count);
    for c in 0..count.min(dim) {
        // deterministic start with weight on every coordinate
        let mut v: Vec<f64> = (0..dim).map(|i| 1.0 + ((i + c) % 7) as f64 * 0.1).collect();
        normalize(&mut v);
        for _ in 0..5000 {
            let mut w = mat_vec(&a, &v, dim);
            if normalize(&mut w) == 0.0 {
                break;
            }
            let delta: f64 = w
                .iter()
                .zip(&v)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            v = w;
            if delta < 1e-13 {
                break;
            }
        }
        let lambda_signed: f64 = v.iter().zip(mat_vec(&a, &v, dim)).map(|(x, y)| x * y).sum();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] -= lambda_signed * v[i] * v[j];
            }
        }
        out.push((lambda_signed, v));
    }
    out
}

fn mat_vec(a: &[f64], v: &[f64], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            a[i * dim..(i + 1) * dim]
                .iter()
                .zip(v)
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Mean-centered covariance `[E, E]` of the rows of `features` (`[N, E]`).
pub fn covariance(features: &Array<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if features.rank() != 2 {
        return Err(Error::param("PCA expects an [N, E] feature matrix"));
    }
    let (n, e) = (features.shape()[0], features.shape()[1]);
    let x = features.data();
    let mut mean = vec![0.0; e];
    for row in x.chunks(e) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; e * e];
    for row in x.chunks(e) {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..e {
            for j in i..e {
                cov[i * e + j] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..e {
        for j in 0..i {
            cov[i * e + j] = cov[j * e + i];
        }
    }
    Ok((mean, cov))
}

/// Projects token features onto their top three principal directions and
/// min-max scales each component to `[0, 1]` over all rows jointly.
/// Components beyond the feature rank are filled with 0.5.
pub fn pca_rgb(features: &Array<f64>) -> Result<Vec<[f64; 3]>> {
    let (n, e) = match features.shape() {
        [n, e] => (*n, *e),
        _ => return Err(Error::param("PCA expects an [N, E] feature matrix")),
    };
    if n < 3 {
        return Err(Error::param(format!(
            "PCA needs at least 3 tokens, got {n}"
        )));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("PCA features".into()));
    }
    let (mean, cov) = covariance(features)?;
    let pairs = top_eigenpairs(&cov, e, 3);
    let scale = pairs
        .first()
        .map_or(0.0, |p| p.0.abs())
        .max(f64::MIN_POSITIVE);
    let mut colors = vec![[0.5; 3]; n];
    for (k, (lambda, v)) in pairs.iter().enumerate() {
        if *lambda <= 1e-12 * scale {
            continue;
        }
        let proj: Vec<f64> = features
            .data()
            .chunks(e)
            .map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(v)
                    .map(|((x, m), w)| (x - m) * w)
                    .sum()
            })
            .collect();
        let (lo, hi) = proj
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            });
        if hi > lo {
            for (c, p) in colors.iter_mut().zip(&proj) {
                c[k] = (p - lo) / (hi - lo);
            }
        }
    }
    Ok(colors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_features_permute_axes() {
        // variances: axis 1 > axis 2 > axis 0
        let rows: Vec<[f64; 3]> = vec![
            [0.1, 0.0, 0.0],
            [-0.1, 0.0, 0.0],
            [0.0, 3.0, 0.0],
            [0.0, -3.0, 0.0],
            [0.0, 0.0, 2.0],
            [0.0, 0.0, -2.0],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let pairs = top_eigenpairs(
            &covariance(&Array::new(vec![6, 3], flat.clone()).unwrap())
                .unwrap()
                .1,
            3,
            3,
        );
        let axes: Vec<usize> = pairs
            .iter()
            .map(|(_, v)| {
                (0..3)
                    .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
                    .unwrap()
            })
            .collect();
        assert_eq!(axes, vec![1, 2, 0]);
        let colors = pca_rgb(&Array::new(vec![6, 3], flat).unwrap()).unwrap();
        for (c, r) in colors.iter().zip(&rows) {
            assert!((c[0] - (r[1] + 3.0) / 6.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicates_share_colors_and_low_rank_pads() {
        let flat = vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let colors = pca_rgb(&Array::new(vec![4, 2], flat).unwrap()).unwrap();
        assert_eq!(colors[0], colors[1]);
        assert!(colors.iter().all(|c| c[1] == 0.5 && c[2] == 0.5));
        assert!(colors.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn too_few_tokens() {
        assert!(pca_rgb(&Array::new(vec![2, 3], vec![0.0; 6]).unwrap()).is_err());
    }
}
