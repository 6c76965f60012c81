//! Learnable `SO(d)` rotations of the student's shared feature and the
//! gradient-homogenization objective that trains them.
//!
//! Each branch `k` (RGB or frequency) owns a rotation `R_k`. The first `d`
//! components of every flattened backbone feature row are mapped to
//! `m_k = R_k z`; the remaining components pass through. Per-sample
//! distillation gradients `u_k = dL_k/dm_k` are pulled back to the shared
//! space as `v_k = R_kᵀ u_k`, averaged into a target `g = (v_r + v_f) / 2`,
//! and each `R_k` is moved to increase `cos(R_kᵀ u_k, g)` summed over the
//! batch. Updates use the tangent projection of the Euclidean gradient
//! followed by a Cayley retraction, so the matrices stay in `SO(d)`.

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::metrics::grad_cosine;
use crate::nn::StepLrSchedule;
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Rgb,
    Fre,
}

#[derive(Debug, Clone)]
pub struct RotationPair {
    d: usize,
    rgb: Tensor,
    fre: Tensor,
    pub schedule: StepLrSchedule,
}

impl RotationPair {
    /// Both rotations start at the identity.
    pub fn new(d: usize, schedule: StepLrSchedule) -> Result<Self> {
        if d == 0 {
            return Err(Error::Config("rotation dimension must be positive".into()));
        }
        Ok(Self { d, rgb: Tensor::identity(d), fre: Tensor::identity(d), schedule })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Rgb => &self.rgb,
            Branch::Fre => &self.fre,
        }
    }

    pub fn set(&mut self, branch: Branch, r: Tensor) -> Result<()> {
        if r.shape() != [self.d, self.d] {
            return Err(Error::Dimension(format!(
                "rotation must be {0}×{0}, got {1:?}",
                self.d,
                r.shape()
            )));
        }
        match branch {
            Branch::Rgb => self.rgb = r,
            Branch::Fre => self.fre = r,
        }
        Ok(())
    }

    /// Update one rotation with the learning rate of `epoch`.
    pub fn update(&mut self, branch: Branch, grad: &Tensor, epoch: usize) -> Result<()> {
        let lr = self.schedule.lr(epoch);
        let next = manifold_update(self.get(branch), grad, lr)?;
        self.set(branch, next)
    }
}

fn check_rotation_dims(z: &Tensor, r: &Tensor) -> Result<(usize, usize, usize)> {
    if z.rank() != 2 || r.rank() != 2 || r.dim(0) != r.dim(1) {
        return Err(Error::Dimension(format!(
            "rotate expects N×M features and a square matrix, got {:?} and {:?}",
            z.shape(),
            r.shape()
        )));
    }
    let (n, m, d) = (z.dim(0), z.dim(1), r.dim(0));
    if d > m {
        return Err(Error::Config(format!(
            "rotation dimension {d} exceeds feature length {m}"
        )));
    }
    Ok((n, m, d))
}

/// `m[n, :d] = R · z[n, :d]`, `m[n, d:] = z[n, d:]`.
pub fn rotate(z: &Tensor, r: &Tensor) -> Result<Tensor> {
    let (_, m, d) = check_rotation_dims(z, r)?;
    let mut out = z.clone();
    for (src, dst) in z.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
        for i in 0..d {
            let row = &r.data()[i * d..(i + 1) * d];
            dst[i] = row.iter().zip(&src[..d]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Pull a gradient with respect to rotated features back to the shared
/// space: `Rᵀ` on the first `d` components, identity on the rest.
pub fn rotate_backward(grad_m: &Tensor, r: &Tensor) -> Result<Tensor> {
    rotate(grad_m, &r.transpose()?)
}

/// Per-sample distillation gradients of both branches for one batch.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    /// `dL_r/dm_r` per sample, restricted to the rotated subspace (`N×d`).
    pub grad_m_rgb: Tensor,
    pub grad_m_fre: Tensor,
    /// `R_rᵀ · grad_m_rgb[n]` per sample (`N×d`).
    pub v_rgb: Tensor,
    pub v_fre: Tensor,
    /// `(v_rgb[n] + v_fre[n]) / 2`.
    pub target: Tensor,
    /// Cosine between batch means of the raw (unrotated) gradients.
    pub cos_raw: Option<f64>,
    /// Cosine between batch means of `v_rgb` and `v_fre`.
    pub cos_rotated: Option<f64>,
}

impl GradientRecord {
    /// Build from per-sample gradients with respect to `m_r` and `m_f`
    /// (`N×M`; only the first `d` columns are used).
    pub fn build(grad_m_rgb: &Tensor, grad_m_fre: &Tensor, pair: &RotationPair, normalize: bool) -> Result<Self> {
        grad_m_rgb.check_same_shape(grad_m_fre, "gradient record")?;
        let d = pair.dim();
        let u_r = leading_columns(grad_m_rgb, d)?;
        let u_f = leading_columns(grad_m_fre, d)?;
        let mut v_r = matmul(&u_r, pair.get(Branch::Rgb))?;
        let mut v_f = matmul(&u_f, pair.get(Branch::Fre))?;
        if normalize {
            normalize_rows(&mut v_r);
            normalize_rows(&mut v_f);
        }
        let target = Tensor::new(
            v_r.shape().to_vec(),
            v_r.data().iter().zip(v_f.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
        )?;
        let cos_raw = grad_cosine(&column_mean(&u_r), &column_mean(&u_f)).ok();
        let cos_rotated = grad_cosine(&column_mean(&v_r), &column_mean(&v_f)).ok();
        Ok(Self { grad_m_rgb: u_r, grad_m_fre: u_f, v_rgb: v_r, v_fre: v_f, target, cos_raw, cos_rotated })
    }

    pub fn grads(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Rgb => &self.grad_m_rgb,
            Branch::Fre => &self.grad_m_fre,
        }
    }

    pub fn batch(&self) -> usize {
        self.target.dim(0)
    }
}

fn leading_columns(x: &Tensor, d: usize) -> Result<Tensor> {
    if x.rank() != 2 || x.dim(1) < d {
        return Err(Error::Config(format!(
            "rotation dimension {d} exceeds gradient width {:?}",
            x.shape()
        )));
    }
    let m = x.dim(1);
    let data = x.data().chunks(m).flat_map(|r| r[..d].iter().cloned()).collect();
    Tensor::new(vec![x.dim(0), d], data)
}

fn column_mean(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut out = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

fn normalize_rows(x: &mut Tensor) {
    let d = x.dim(1);
    for row in x.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RotationLoss {
    pub loss: f64,
    /// Euclidean gradient of `loss` with respect to `R_k`.
    pub grad: Tensor,
    /// Samples whose cosine was undefined (zero vector) and were skipped.
    pub skipped: usize,
}

/// `L = -Σ_n cos(R_kᵀ u_n, g_n)` with `u_n` and `g_n` held constant.
pub fn rotation_loss(rec: &GradientRecord, r: &Tensor, grads_mk: &Tensor) -> Result<RotationLoss> {
    let d = r.dim(0);
    if r.shape() != [d, d] || grads_mk.rank() != 2 || grads_mk.dim(1) != d || grads_mk.dim(0) != rec.batch() {
        return Err(Error::Dimension(format!(
            "rotation loss: R {:?}, gradients {:?}, target {:?}",
            r.shape(),
            grads_mk.shape(),
            rec.target.shape()
        )));
    }
    let w_all = matmul(grads_mk, r)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; d * d];
    let mut skipped = 0;
    for ((u, w), g) in grads_mk.data().chunks(d).zip(w_all.data().chunks(d)).zip(rec.target.data().chunks(d)) {
        let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nw == 0.0 || ng == 0.0 {
            skipped += 1;
            continue;
        }
        let cos = w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (nw * ng);
        loss -= cos;
        // d cos / d w
        let dw: Vec<f64> = w.iter().zip(g).map(|(wi, gi)| gi / (nw * ng) - cos * wi / (nw * nw)).collect();
        // w_i = Σ_j R_ji u_j  =>  dL/dR_ji = -u_j dcos/dw_i
        for (j, &uj) in u.iter().enumerate() {
            let row = &mut grad[j * d..(j + 1) * d];
            for (gr, &dwi) in row.iter_mut().zip(&dw) {
                *gr -= uj * dwi;
            }
        }
    }
    if skipped > 0 {
        warn!("rotation loss: {skipped} sample(s) with zero-norm gradient or target skipped");
    }
    Ok(RotationLoss { loss, grad: Tensor::new(vec![d, d], grad)?, skipped })
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.dim(0), t.dim(1), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::new(vec![r, c], data).expect("matrix shape")
}

const MAX_CAYLEY_RETRIES: usize = 5;

/// One Riemannian descent step on `SO(d)`.
///
/// The Euclidean gradient `G` is projected to the skew generator
/// `A = (G Rᵀ - R Gᵀ) / 2` and retracted with the Cayley transform
/// `R' = (I + lr/2 A)⁻¹ (I - lr/2 A) R`. If the linear system is
/// numerically singular the step is retried with half the learning rate.
pub fn manifold_update(r: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    let d = r.dim(0);
    if r.shape() != [d, d] || grad.shape() != r.shape() {
        return Err(Error::Dimension(format!(
            "manifold update: R {:?}, gradient {:?}",
            r.shape(),
            grad.shape()
        )));
    }
    let rm = to_matrix(r);
    let gm = to_matrix(grad);
    let a = (&gm * rm.transpose() - &rm * gm.transpose()) * 0.5;
    let eye = DMatrix::<f64>::identity(d, d);
    let mut step = lr;
    for _ in 0..=MAX_CAYLEY_RETRIES {
        let lhs = &eye + &a * (step / 2.0);
        let rhs = (&eye - &a * (step / 2.0)) * &rm;
        if let Some(next) = lhs.lu().solve(&rhs) {
            if next.iter().all(|v| v.is_finite()) {
                return Ok(from_matrix(&next));
            }
        }
        warn!("Cayley system singular at lr {step}; halving");
        step /= 2.0;
    }
    Err(Error::Numeric(format!(
        "Cayley retraction failed after {MAX_CAYLEY_RETRIES} learning-rate halvings"
    )))
}

/// `‖RᵀR - I‖_F`.
pub fn orthogonality_error(r: &Tensor) -> f64 {
    let m = to_matrix(r);
    let d = m.nrows();
    (m.transpose() * &m - DMatrix::<f64>::identity(d, d)).norm()
}

pub fn determinant(r: &Tensor) -> f64 {
    to_matrix(r).determinant()
}
