//! Evaluation metrics: sliced Wasserstein distance, histogram distance, and
//! nearest-neighbor reconstruction error.

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// Flatten samples into row vectors and check a common dimension.
fn as_rows<R: Real>(set: &[Tensor<R>]) -> Result<(usize, Vec<Vec<f64>>)> {
    if set.is_empty() {
        return Err(CoreError::InvalidArgument("empty sample set".into()));
    }
    let dim = set[0].numel();
    let rows = set
        .iter()
        .map(|t| {
            if t.numel() != dim {
                return Err(CoreError::Shape(format!(
                    "sample dims differ: {} vs {}",
                    t.numel(),
                    dim
                )));
            }
            Ok(t.data.iter().map(|v| v.to_f64()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dim, rows))
}

/// Exact 1-D Wasserstein-1 distance between empirical distributions:
/// the integral of |F_a − F_b| over the merged support. For equal counts it
/// reduces to the mean absolute difference of sorted samples.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let wa = 1.0 / a.len() as f64;
    let wb = 1.0 / b.len() as f64;
    let mut events: Vec<(f64, f64)> = a
        .iter()
        .map(|&x| (x, wa))
        .chain(b.iter().map(|&x| (x, -wb)))
        .collect();
    events.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut acc = 0.0;
    let mut cdf_gap = 0.0;
    for w in events.windows(2) {
        cdf_gap += w[0].1;
        acc += cdf_gap.abs() * (w[1].0 - w[0].0);
    }
    acc
}

/// Sliced Wasserstein distance: the mean, over random unit projections, of
/// the 1-D Wasserstein-1 distance between the projected sets.
pub fn eval_swd<R: Real>(
    a: &[Tensor<R>],
    b: &[Tensor<R>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    let (da, ra) = as_rows(a)?;
    let (db, rb) = as_rows(b)?;
    if da != db {
        return Err(CoreError::Shape(format!(
            "sample dimension mismatch: {} vs {}",
            da, db
        )));
    }
    let mut total = 0.0;
    for l in 0..projections {
        let mut r = rng::substream(&[seed, stream::PROJECTION, l as u64]);
        // Random unit direction.
        let mut dir = rng::normal_vec::<f64>(&mut r, da);
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in dir.iter_mut() {
            *v /= norm;
        }
        let project = |rows: &[Vec<f64>]| -> Vec<f64> {
            rows.iter()
                .map(|row| row.iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        total += wasserstein1_1d(&project(&ra), &project(&rb));
    }
    Ok(total / projections as f64)
}

/// L1 distance between normalized histograms over a fixed range.
pub fn histogram_l1<R: Real>(a: &[Tensor<R>], b: &[Tensor<R>], bins: usize, lo: f64, hi: f64) -> f64 {
    let fill = |set: &[Tensor<R>]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        let mut n = 0usize;
        for t in set {
            for v in &t.data {
                let x = v.to_f64();
                let idx = (((x - lo) / (hi - lo)) * bins as f64).floor();
                let idx = (idx.max(0.0) as usize).min(bins - 1);
                h[idx] += 1.0;
                n += 1;
            }
        }
        for v in h.iter_mut() {
            *v /= n.max(1) as f64;
        }
        h
    };
    let ha = fill(a);
    let hb = fill(b);
    ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum()
}

/// Mean over samples of the squared distance to the nearest training item,
/// averaged per element.
pub fn nn_mse<R: Real>(samples: &[Tensor<R>], train: &[Tensor<R>]) -> Result<f64> {
    let (dim, rs) = as_rows(samples)?;
    let (dt, rt) = as_rows(train)?;
    if dim != dt {
        return Err(CoreError::Shape("dimension mismatch".into()));
    }
    let mut total = 0.0;
    for s in &rs {
        let mut best = f64::INFINITY;
        for t in &rt {
            let d: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d);
        }
        total += best / dim as f64;
    }
    Ok(total / rs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sets_have_zero_swd() {
        let set: Vec<Tensor<f64>> = (0..32)
            .map(|i| Tensor::new(vec![1, 2], vec![i as f64, -0.5 * i as f64]).unwrap())
            .collect();
        let d = eval_swd(&set, &set, 16, 3).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn point_masses_at_distance_d() {
        let a = vec![Tensor::new(vec![1, 1], vec![0.0f64]).unwrap()];
        let b = vec![Tensor::new(vec![1, 1], vec![2.5f64]).unwrap()];
        // In 1-D every unit projection is ±1, so the W1 distance is exactly d.
        let d = eval_swd(&a, &b, 64, 7).unwrap();
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = vec![Tensor::<f64>::zeros(&[1, 2])];
        let b = vec![Tensor::<f64>::zeros(&[1, 3])];
        assert!(eval_swd(&a, &b, 4, 0).is_err());
    }

    #[test]
    fn offset_gaussians_match_analytic_projection_average() {
        // Unit Gaussians offset by (1,0): per direction W1 = |cosθ|, whose
        // average over the circle is 2/π. Brute-force quadrature cross-check.
        let quad: f64 = {
            let n = 100_000;
            (0..n)
                .map(|i| {
                    let th = std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
                    th.cos().abs()
                })
                .sum::<f64>()
                / n as f64
        };
        assert!((quad - 2.0 / std::f64::consts::PI).abs() < 1e-6);

        let n = 50_000;
        let gen = |key: u64, dx: f64| -> Vec<Tensor<f64>> {
            (0..n)
                .map(|i| {
                    let mut r = rng::substream(&[key, i as u64]);
                    Tensor::new(
                        vec![1, 2],
                        vec![rng::normal_f64(&mut r) + dx, rng::normal_f64(&mut r)],
                    )
                    .unwrap()
                })
                .collect()
        };
        let a = gen(100, 0.0);
        let b = gen(200, 1.0);
        let d = eval_swd(&a, &b, 4096, 17).unwrap();
        assert!(
            (d - 2.0 / std::f64::consts::PI).abs() < 0.02,
            "swd {} vs {}",
            d,
            2.0 / std::f64::consts::PI
        );
    }

    #[test]
    fn wasserstein_handles_unequal_counts() {
        let a = vec![0.0, 1.0];
        let b = vec![0.0, 0.0, 1.0, 1.0];
        assert!(wasserstein1_1d(&a, &b) < 1e-9);
    }

    #[test]
    fn histogram_distance_separates_shifted_data() {
        let a: Vec<Tensor<f64>> = (0..500)
            .map(|i| {
                let mut r = rng::substream(&[300, i as u64]);
                Tensor::new(vec![1, 1], vec![rng::normal_f64(&mut r) * 0.1 - 1.0]).unwrap()
            })
            .collect();
        let b: Vec<Tensor<f64>> = (0..500)
            .map(|i| {
                let mut r = rng::substream(&[400, i as u64]);
                Tensor::new(vec![1, 1], vec![rng::normal_f64(&mut r) * 0.1 + 1.0]).unwrap()
            })
            .collect();
        let d_ab = histogram_l1(&a, &b, 64, -3.0, 3.0);
        let d_aa = histogram_l1(&a, &a, 64, -3.0, 3.0);
        assert_eq!(d_aa, 0.0);
        assert!(d_ab > 1.5, "separated modes should disagree: {}", d_ab);
    }

    #[test]
    fn nn_mse_zero_for_memorized_samples() {
        let train: Vec<Tensor<f64>> = (0..4)
            .map(|i| Tensor::full(&[2, 2], i as f64))
            .collect();
        assert_eq!(nn_mse(&train, &train).unwrap(), 0.0);
        let off: Vec<Tensor<f64>> = vec![Tensor::full(&[2, 2], 0.5)];
        let d = nn_mse(&off, &train).unwrap();
        assert!((d - 0.25).abs() < 1e-12);
    }
}
