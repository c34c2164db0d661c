//! Pinned-process moments by conditioning on `x_N` in rational arithmetic.
//! Every `f64` input is a dyadic rational, so the Gramians, transitions and
//! `𝖯_N⁻¹` are exact; operands of the pairwise stage are rounded to
//! `PAIR_BITS` significant bits to keep it fast (relative error ~1e-60).

use maxent_steer::{DMatrix, DVector, LinearSystemModel};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

type Q = BigRational;
type Mat = Vec<Vec<Q>>;

const PAIR_BITS: i64 = 200;

/// Nearest dyadic rational with `PAIR_BITS` significant bits.
fn round_dyadic(x: &Q) -> Q {
    if x.is_zero() {
        return x.clone();
    }
    let magnitude = x.numer().bits() as i64 - x.denom().bits() as i64;
    let shift = PAIR_BITS - magnitude;
    let scale = |e: i64| BigInt::one() << (e.unsigned_abs() as usize);
    let scaled = if shift >= 0 {
        x * Q::from_integer(scale(shift))
    } else {
        x / Q::from_integer(scale(shift))
    };
    let half = Q::new(1.into(), 2.into());
    let rounded = if scaled.is_negative() {
        (scaled - half).ceil()
    } else {
        (scaled + half).floor()
    };
    if shift >= 0 {
        rounded / Q::from_integer(scale(shift))
    } else {
        rounded * Q::from_integer(scale(shift))
    }
}

fn round_mat(m: &Mat) -> Mat {
    m.iter()
        .map(|r| r.iter().map(round_dyadic).collect())
        .collect()
}

fn q(x: f64) -> Q {
    BigRational::from_float(x).expect("finite input")
}

fn from_f64(m: &DMatrix<f64>) -> Mat {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| q(m[(i, j)])).collect())
        .collect()
}

fn to_f64(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m[0].len(), |i, j| {
        m[i][j].to_f64().expect("representable")
    })
}

fn identity(n: usize) -> Mat {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Q::from_integer(1.into())
                    } else {
                        Q::zero()
                    }
                })
                .collect()
        })
        .collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (r, inner, c) = (a.len(), b.len(), b[0].len());
    (0..r)
        .map(|i| {
            (0..c)
                .map(|j| (0..inner).fold(Q::zero(), |acc, l| acc + &a[i][l] * &b[l][j]))
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u - v).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j].clone()).collect())
        .collect()
}

/// Gauss–Jordan inverse; panics on a singular matrix.
fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut aug: Mat = a
        .iter()
        .zip(identity(n))
        .map(|(r, e)| r.iter().cloned().chain(e).collect())
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !aug[r][col].is_zero())
            .expect("singular matrix");
        aug.swap(col, pivot);
        let p = aug[col][col].clone();
        for v in aug[col].iter_mut() {
            *v = &*v / &p;
        }
        for r in 0..n {
            if r != col && !aug[r][col].is_zero() {
                let f = aug[r][col].clone();
                let pivot_row = aug[col].clone();
                for (v, w) in aug[r].iter_mut().zip(&pivot_row) {
                    *v = &*v - &f * w;
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `(ℓ_k, P̃(k,s))` with `kernel[k][s - k] = P̃(k,s)`.
pub fn exact_pinned_moments(
    sys: &LinearSystemModel,
    start: &DVector<f64>,
    target: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<Vec<DMatrix<f64>>>) {
    let (n, h) = (sys.state_dim(), sys.horizon());
    let a: Vec<Mat> = (0..h).map(|k| from_f64(sys.a(k))).collect();
    let bb: Vec<Mat> = (0..h)
        .map(|k| {
            let b = from_f64(sys.b(k));
            mul(&b, &transpose(&b))
        })
        .collect();
    let col = |v: &DVector<f64>| -> Mat { v.iter().map(|x| vec![q(*x)]).collect() };

    let mut free = vec![col(start)];
    let mut reach = vec![vec![vec![Q::zero(); n]; n]];
    for k in 0..h {
        free.push(mul(&a[k], &free[k]));
        reach.push(add(&mul(&mul(&a[k], &reach[k]), &transpose(&a[k])), &bb[k]));
    }
    let mut to_end = vec![identity(n); h + 1];
    for k in (0..h).rev() {
        to_end[k] = mul(&to_end[k + 1], &a[k]);
    }
    let weight = inverse(&reach[h]);
    // Cov(x_k, x_N)
    let with_end: Vec<Mat> = (0..=h)
        .map(|k| mul(&reach[k], &transpose(&to_end[k])))
        .collect();
    let gains: Vec<Mat> = with_end.iter().map(|c| mul(c, &weight)).collect();
    let innovation = sub(&col(target), &free[h]);

    let mean = (0..=h)
        .map(|k| {
            let l = add(&free[k], &mul(&gains[k], &innovation));
            DVector::from_iterator(n, l.iter().map(|r| r[0].to_f64().expect("representable")))
        })
        .collect();
    let gains: Vec<Mat> = gains.iter().map(round_mat).collect();
    let with_end_t: Vec<Mat> = with_end.iter().map(|c| round_mat(&transpose(c))).collect();
    let a_t: Vec<Mat> = a.iter().map(transpose).collect();
    let kernel = (0..=h)
        .map(|k| {
            let mut cross = round_mat(&reach[k]);
            (k..=h)
                .map(|s| {
                    if s > k {
                        cross = round_mat(&mul(&cross, &a_t[s - 1]));
                    }
                    to_f64(&sub(&cross, &mul(&gains[k], &with_end_t[s])))
                })
                .collect()
        })
        .collect();
    (mean, kernel)
}
