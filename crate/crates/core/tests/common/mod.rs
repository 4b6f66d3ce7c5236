//! Shared checks for the integration tests. Each returns the worst error it
//! saw so callers can both assert and print it.

#![allow(dead_code)]

use gestalt_core::cnn::{Architecture, CnnModel, BLOCK_NAMES};
use gestalt_core::dataset::GrayImage;
use gestalt_core::numerics::{pearson, sym_eig, DenseMatrix};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct EigReport {
    pub matrices: usize,
    /// max over matrices and pairs of `|S v - lambda v|_2`
    pub max_residual: f64,
    /// max `|V^T V - I|` entry
    pub max_orthogonality: f64,
    /// max `|sum(lambda) - trace| / max(1, |trace|)`
    pub max_trace_rel: f64,
}

/// 100 random symmetric matrices, sizes 1..=50 (50 always included).
pub fn eig_suite(seed: u64) -> EigReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = EigReport {
        matrices: 0,
        max_residual: 0.0,
        max_orthogonality: 0.0,
        max_trace_rel: 0.0,
    };
    for i in 0..100 {
        let n = if i < 10 { 50 } else { rng.gen_range(1..=50) };
        let mut s = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in r..n {
                let v = rng.gen_range(-1.0..1.0);
                s.set(r, c, v);
                s.set(c, r, v);
            }
        }
        let eig = sym_eig(&s).expect("symmetric input");
        for q in 0..n {
            let v = eig.vector(q);
            let sv = s.mul_vec(&v).unwrap();
            let res = sv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - eig.values[q] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            report.max_residual = report.max_residual.max(res);
        }
        let vtv = eig.vectors.transpose().matmul(&eig.vectors).unwrap();
        for r in 0..n {
            for c in 0..n {
                let target = if r == c { 1.0 } else { 0.0 };
                report.max_orthogonality = report.max_orthogonality.max((vtv.get(r, c) - target).abs());
            }
        }
        let sum: f64 = eig.values.iter().sum();
        let trace = s.trace();
        report.max_trace_rel = report.max_trace_rel.max((sum - trace).abs() / trace.abs().max(1.0));
        report.matrices += 1;
    }
    report
}

pub struct PearsonReport {
    pub pairs: usize,
    /// against the two-pass textbook formula
    pub max_direct_error: f64,
    /// `|r^2 - exact r^2|` on integer-valued inputs, computed in rationals
    pub max_exact_error: f64,
}

fn direct_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// r^2 = (n Sxy - Sx Sy)^2 / ((n Sxx - Sx^2)(n Syy - Sy^2)), exactly.
fn exact_r_squared(a: &[i64], b: &[i64]) -> Option<f64> {
    let n = BigInt::from(a.len());
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) =
        (BigInt::zero(), BigInt::zero(), BigInt::zero(), BigInt::zero(), BigInt::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (BigInt::from(x), BigInt::from(y));
        sxx += &x * &x;
        syy += &y * &y;
        sxy += &x * &y;
        sx += x;
        sy += y;
    }
    let cov = &n * sxy - &sx * &sy;
    let va = &n * sxx - &sx * &sx;
    let vb = &n * syy - &sy * &sy;
    if va.is_zero() || vb.is_zero() {
        return None;
    }
    BigRational::new(&cov * &cov, va * vb).to_f64()
}

/// 1000 random pairs: lengths 2..=600, half real-valued, half small
/// integers (which also exercises ties and near-constant inputs).
pub fn pearson_suite(seed: u64) -> PearsonReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PearsonReport {
        pairs: 0,
        max_direct_error: 0.0,
        max_exact_error: 0.0,
    };
    for i in 0..1000 {
        let n = rng.gen_range(2..=600);
        if i % 2 == 0 {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            // correlated partner so r spans the whole range
            let w: f64 = rng.gen_range(-1.0..1.0);
            let b: Vec<f64> = a.iter().map(|x| w * x + rng.gen_range(-5.0..5.0)).collect();
            let r = pearson(&a, &b).unwrap();
            assert!(!r.degenerate);
            report.max_direct_error = report.max_direct_error.max((r.value - direct_pearson(&a, &b)).abs());
        } else {
            let ai: Vec<i64> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let bi: Vec<i64> = ai.iter().map(|x| x + rng.gen_range(0..3)).collect();
            let a: Vec<f64> = ai.iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = bi.iter().map(|&x| x as f64).collect();
            let r = pearson(&a, &b).unwrap();
            match exact_r_squared(&ai, &bi) {
                None => assert!(r.degenerate, "constant input not flagged"),
                Some(r2) => {
                    assert!(!r.degenerate);
                    report.max_direct_error = report.max_direct_error.max((r.value - direct_pearson(&a, &b)).abs());
                    report.max_exact_error = report.max_exact_error.max((r.value * r.value - r2).abs());
                }
            }
        }
        report.pairs += 1;
    }
    report
}

pub struct GradientReport {
    /// `(block name, entries checked, |g - fd| / max(|g|, |fd|))`, the error
    /// measured over the checked entries of the block as vectors
    pub blocks: Vec<(&'static str, usize, f64)>,
}

impl GradientReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.2).fold(0.0, f64::max)
    }
}

/// Backprop against central differences on a random model and batch.
/// Blocks up to 200 entries are checked in full, larger ones on 60 random
/// entries.
pub fn gradient_suite(seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CnnModel::init(Architecture::default(), 1.0, &mut rng).unwrap();
    // nonzero biases so bias gradients are not trivially tied to weights
    for b in [
        &mut model.params.conv1_b,
        &mut model.params.conv2_b,
        &mut model.params.fc1_b,
        &mut model.params.fc2_b,
        &mut model.params.fc3_b,
    ] {
        b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
    }
    let batch: Vec<GrayImage> = (0..3)
        .map(|i| {
            let px = (0..784).map(|_| rng.gen()).collect();
            GrayImage::new(28, 28, px, (i * 3) as u8).unwrap()
        })
        .collect();
    let (_, grad) = model.loss_and_gradient(&batch).unwrap();
    let grads: Vec<Vec<f64>> = grad.blocks().iter().map(|b| b.to_vec()).collect();

    let h = 1e-6;
    let mut report = GradientReport { blocks: Vec::new() };
    for (bi, name) in BLOCK_NAMES.iter().enumerate() {
        let len = grads[bi].len();
        let idx: Vec<usize> = if len <= 200 {
            (0..len).collect()
        } else {
            (0..60).map(|_| rng.gen_range(0..len)).collect()
        };
        let (mut diff2, mut g2, mut fd2) = (0.0, 0.0, 0.0);
        for &j in &idx {
            let orig = model.params.blocks()[bi][j];
            model.params.blocks_mut()[bi][j] = orig + h;
            let plus = model.loss(&batch).unwrap();
            model.params.blocks_mut()[bi][j] = orig - h;
            let minus = model.loss(&batch).unwrap();
            model.params.blocks_mut()[bi][j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let g = grads[bi][j];
            diff2 += (g - fd).powi(2);
            g2 += g * g;
            fd2 += fd * fd;
        }
        let rel = diff2.sqrt() / g2.sqrt().max(fd2.sqrt()).max(1e-12);
        report.blocks.push((name, idx.len(), rel));
    }
    report
}
