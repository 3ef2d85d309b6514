//! Dense complex/real tensors and the small-matrix linear algebra used by the
//! IVA updates: log-determinants, rank-1 row updates and the closed-form
//! generalized eigendecomposition of 2×2 Hermitian pencils.

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Pivots below this magnitude are treated as exact zeros.
pub const PIVOT_TINY: f64 = 1e-300;

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} needs {expected} entries, got {len}"
        )));
    }
    Ok(())
}

macro_rules! tensor_type {
    ($name:ident, $elem:ty, $zero:expr, $finite:expr) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            shape: Vec<usize>,
            data: Vec<$elem>,
        }

        impl $name {
            pub fn zeros(shape: &[usize]) -> Self {
                let len = shape.iter().product();
                Self { shape: shape.to_vec(), data: vec![$zero; len] }
            }

            pub fn from_vec(shape: &[usize], data: Vec<$elem>) -> Result<Self> {
                check_len(shape, data.len())?;
                Ok(Self { shape: shape.to_vec(), data })
            }

            pub fn shape(&self) -> &[usize] {
                &self.shape
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            pub fn into_vec(self) -> Vec<$elem> {
                self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn is_finite(&self) -> bool {
                self.data.iter().all($finite)
            }

            /// Contiguous block for the leading index `i`.
            pub fn outer(&self, i: usize) -> &[$elem] {
                let stride = self.data.len() / self.shape[0];
                &self.data[i * stride..(i + 1) * stride]
            }

            pub fn outer_mut(&mut self, i: usize) -> &mut [$elem] {
                let stride = self.data.len() / self.shape[0];
                &mut self.data[i * stride..(i + 1) * stride]
            }

            pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
                check_len(shape, self.data.len())?;
                self.shape = shape.to_vec();
                Ok(self)
            }
        }
    };
}

tensor_type!(CTensor, C64, C64::new(0.0, 0.0), |z: &C64| z.re.is_finite() && z.im.is_finite());
tensor_type!(RTensor, f64, 0.0, |x: &f64| x.is_finite());

impl CTensor {
    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[CTensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot stack zero tensors".into()))?;
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape() != first.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "stack: {:?} vs {:?}",
                    p.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(p.data());
        }
        Ok(Self { shape, data })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }
}

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            data[i * n + i] = C64::new(1.0, 0.0);
        }
        Self { n, data }
    }

    pub fn from_rows(n: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{n}x{n} matrix needs {} entries, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, z: C64) {
        self.data[i * self.n + j] = z;
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        let n = self.n;
        let mut out = vec![C64::new(0.0, 0.0); n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                for j in 0..n {
                    out[i * n + j] += a * other.get(k, j);
                }
            }
        }
        CMatrix { n, data: out }
    }

    /// Matrix-vector product `self · x`.
    pub fn apply(&self, x: &[C64]) -> Vec<C64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// `log |det w|` via LU with partial pivoting.
pub fn logdet_abs(w: &CMatrix) -> Result<f64> {
    let n = w.dim();
    if n == 0 {
        return Err(Error::ShapeMismatch("empty matrix".into()));
    }
    let mut a = w.data.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let (piv, mag) = (col..n)
            .map(|r| (r, a[r * n + col].norm()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(mag >= PIVOT_TINY) {
            return Err(Error::SingularMatrix(mag.max(0.0)));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
        }
        let p = a[col * n + col];
        acc += mag.ln();
        for r in col + 1..n {
            let factor = a[r * n + col] / p;
            if factor == C64::new(0.0, 0.0) {
                continue;
            }
            for j in col..n {
                let sub = factor * a[col * n + j];
                a[r * n + j] -= sub;
            }
        }
    }
    Ok(acc)
}

/// Returns `(I − v e_kᵀ) w`: every row `m` of `w` loses `v_m` times row `k`.
///
/// The determinant of the result is `(1 − v_k) det w`.
pub fn rank1_row_update(w: &CMatrix, v: &[C64], k: usize) -> Result<CMatrix> {
    let n = w.dim();
    if v.len() != n || k >= n {
        return Err(Error::ShapeMismatch(format!(
            "rank-1 update: matrix {n}x{n}, vector {}, row {k}",
            v.len()
        )));
    }
    let row_k = w.row(k).to_vec();
    let mut out = w.clone();
    for (m, vm) in v.iter().enumerate() {
        for (dst, src) in out.row_mut(m).iter_mut().zip(&row_k) {
            *dst -= vm * src;
        }
    }
    Ok(out)
}

pub type Mat2 = [[C64; 2]; 2];

fn herm_err(m: &Mat2) -> f64 {
    let mut e: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            e = e.max((m[i][j] - m[j][i].conj()).norm());
        }
    }
    e
}

fn fro(m: &Mat2) -> f64 {
    m.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// A Hermitian matrix paired with a Hermitian positive-definite one.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianPair2 {
    a: Mat2,
    b: Mat2,
}

impl HermitianPair2 {
    pub fn new(a: Mat2, b: Mat2) -> Result<Self> {
        let scale = 1.0 + fro(&a).max(fro(&b));
        if herm_err(&a) > 1e-12 * scale || herm_err(&b) > 1e-12 * scale {
            return Err(Error::Config("pencil matrices must be Hermitian".into()));
        }
        cholesky2(&b)?;
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &Mat2 {
        &self.a
    }

    pub fn b(&self) -> &Mat2 {
        &self.b
    }
}

/// Lower Cholesky factor `(l11, l21, l22)` with real positive diagonal.
fn cholesky2(b: &Mat2) -> Result<(f64, C64, f64)> {
    let b11 = b[0][0].re;
    if !(b11 > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let l11 = b11.sqrt();
    let l21 = b[1][0] / l11;
    let rem = b[1][1].re - l21.norm_sqr();
    if !(rem > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok((l11, l21, rem.sqrt()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gevd2 {
    /// Generalized eigenvalues, descending.
    pub values: [f64; 2],
    /// `vectors[i]` pairs with `values[i]`; normalized so `vᴴ b v = 1`.
    pub vectors: [[C64; 2]; 2],
    /// Set when the two eigenvalues coincide; vectors then follow the
    /// canonical basis in index order.
    pub degenerate: bool,
}

fn rotate_to_real(u: [C64; 2]) -> [C64; 2] {
    let pivot = if u[0].norm() >= u[1].norm() { u[0] } else { u[1] };
    let mag = pivot.norm();
    if mag == 0.0 {
        return u;
    }
    let phase = pivot.conj() / mag;
    [u[0] * phase, u[1] * phase]
}

/// Solves `a v = λ b v` for a 2×2 Hermitian pencil in closed form.
///
/// Reduction: `b = L Lᴴ`, `C = L⁻¹ a L⁻ᴴ`, eigenvectors `u` of `C`, then
/// `v = L⁻ᴴ u`.
pub fn gevd2(p: &HermitianPair2) -> Result<Gevd2> {
    let (l11, l21, l22) = cholesky2(&p.b)?;
    let a = &p.a;
    // L⁻¹ = [[1/l11, 0], [-l21/(l11 l22), 1/l22]]
    let i11 = 1.0 / l11;
    let i21 = -l21 / (l11 * l22);
    let i22 = 1.0 / l22;
    // T = L⁻¹ a
    let t00 = a[0][0] * i11;
    let t01 = a[0][1] * i11;
    let t10 = i21 * a[0][0] + a[1][0] * i22;
    let t11 = i21 * a[0][1] + a[1][1] * i22;
    // C = T L⁻ᴴ, L⁻ᴴ = [[i11, conj(i21)], [0, i22]]
    let c00 = (t00 * i11).re;
    let c01 = t00 * i21.conj() + t01 * i22;
    let c11 = (t10 * i21.conj() + t11 * i22).re;

    let mean = 0.5 * (c00 + c11);
    let half = 0.5 * (c00 - c11);
    let disc = (half * half + c01.norm_sqr()).sqrt();
    let (lam1, lam2) = (mean + disc, mean - disc);
    let degenerate = (lam1 - lam2).abs() < 1e-12 * lam1.abs().max(f64::MIN_POSITIVE);

    let zero = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let (u1, u2) = if degenerate {
        ([one, zero], [zero, one])
    } else {
        let cand_a = [C64::new(lam1 - c11, 0.0), c01.conj()];
        let cand_b = [c01, C64::new(lam1 - c00, 0.0)];
        let na = cand_a[0].norm_sqr() + cand_a[1].norm_sqr();
        let nb = cand_b[0].norm_sqr() + cand_b[1].norm_sqr();
        let (u, n) = if na >= nb { (cand_a, na) } else { (cand_b, nb) };
        let s = 1.0 / n.sqrt();
        let u1 = rotate_to_real([u[0] * s, u[1] * s]);
        let u2 = rotate_to_real([-u1[1].conj(), u1[0].conj()]);
        (u1, u2)
    };
    let map = |u: [C64; 2]| [u[0] * i11 + u[1] * i21.conj(), u[1] * i22];
    Ok(Gevd2 { values: [lam1, lam2], vectors: [map(u1), map(u2)], degenerate })
}

/// `xᴴ m y` for 2×2 matrices.
pub fn quad2(x: &[C64; 2], m: &Mat2, y: &[C64; 2]) -> C64 {
    let my = [m[0][0] * y[0] + m[0][1] * y[1], m[1][0] * y[0] + m[1][1] * y[1]];
    x[0].conj() * my[0] + x[1].conj() * my[1]
}
