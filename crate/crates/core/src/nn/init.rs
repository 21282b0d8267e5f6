use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Orthogonal initialisation of a tensor whose first axis is the output axis.
///
/// The weight is viewed as a `rows × cols` matrix (`cols` = product of the
/// remaining axes); rows are orthonormal when `rows ≤ cols`, columns otherwise.
pub fn orthogonal<R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let (n, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            data[r * cols + c] = gain * if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(t: &Tensor, by_rows: bool) -> Vec<f64> {
        let rows = t.shape()[0];
        let cols = t.len() / rows;
        let (n, dim) = if by_rows { (rows, cols) } else { (cols, rows) };
        let at = |a: usize, k: usize| {
            if by_rows {
                t.data()[a * cols + k]
            } else {
                t.data()[k * cols + a]
            }
        };
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = (0..dim).map(|k| at(a, k) * at(b, k)).sum();
            }
        }
        g
    }

    #[test]
    fn wide_and_tall_matrices_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (shape, by_rows) in [(vec![4, 2, 3, 3], true), (vec![10, 3], false)] {
            let t = orthogonal(&shape, 2f64.sqrt(), &mut rng);
            let g = gram(&t, by_rows);
            let n = (g.len() as f64).sqrt() as usize;
            for a in 0..n {
                for b in 0..n {
                    let want = if a == b { 2.0 } else { 0.0 };
                    assert!((g[a * n + b] - want).abs() < 1e-10);
                }
            }
        }
    }
}
