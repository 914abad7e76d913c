use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64 as C64;

use super::sweep;
use super::{ApplyMethod, TensorTrain, TnError, TnResult, TruncationPolicy};

/// A matrix product operator; site tensors are `(left, out, in, right)`.
#[derive(Clone, Debug)]
pub struct OperatorTrain {
    pub(crate) sites: Vec<Array4<C64>>,
    pub(crate) log_norm: f64,
}

pub(crate) fn fuse(w: &Array4<C64>) -> Array3<C64> {
    let (l, o, i, r) = w.dim();
    Array3::from_shape_vec((l, o * i, r), w.iter().cloned().collect()).expect("shape")
}

pub(crate) fn unfuse(a: &Array3<C64>, d: usize) -> Array4<C64> {
    let (l, _, r) = a.dim();
    Array4::from_shape_vec((l, d, d, r), a.iter().cloned().collect()).expect("shape")
}

impl OperatorTrain {
    pub fn new(sites: Vec<Array4<C64>>) -> TnResult<Self> {
        if sites.iter().any(|w| w.dim().1 != w.dim().2) {
            return Err(TnError::StructurallyInvalid("out and in dimensions differ".into()));
        }
        let fused: Vec<_> = sites.iter().map(fuse).collect();
        sweep::validate(&fused)?;
        Ok(Self { sites, log_norm: 0.0 })
    }

    pub fn with_log_norm(mut self, log_norm: f64) -> Self {
        self.log_norm = log_norm;
        self
    }

    /// Tensor product of single-site matrices.
    pub fn product(locals: &[Array2<C64>]) -> TnResult<Self> {
        let sites = locals
            .iter()
            .map(|m| {
                let (o, i) = m.dim();
                Array4::from_shape_fn((1, o, i, 1), |(_, a, b, _)| m[[a, b]])
            })
            .collect();
        Self::new(sites)
    }

    pub fn identity(n: usize) -> Self {
        let eye = Array2::from_diag_elem(2, C64::new(1.0, 0.0));
        Self::product(&vec![eye; n]).expect("valid identity")
    }

    pub(crate) fn fused(&self) -> Vec<Array3<C64>> {
        self.sites.iter().map(fuse).collect()
    }

    pub(crate) fn from_fused(fused: &[Array3<C64>], log_norm: f64) -> Self {
        let d = (fused[0].dim().1 as f64).sqrt().round() as usize;
        Self { sites: fused.iter().map(|a| unfuse(a, d)).collect(), log_norm }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Array4<C64>] {
        &self.sites
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn phys_dim(&self) -> usize {
        self.sites[0].dim().1
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.sites[0].dim().0];
        dims.extend(self.sites.iter().map(|s| s.dim().3));
        dims
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Hermitian conjugate.
    pub fn dagger(&self) -> Self {
        let sites = self
            .sites
            .iter()
            .map(|w| w.clone().permuted_axes([0, 2, 1, 3]).mapv(|x| x.conj()).as_standard_layout().to_owned())
            .collect();
        Self { sites, log_norm: self.log_norm }
    }

    /// Multiply the operator by a complex factor.
    pub fn scale(&mut self, factor: C64) {
        let nrm = factor.norm();
        if nrm == 0.0 {
            self.sites[0].fill(C64::new(0.0, 0.0));
            return;
        }
        let phase = factor / nrm;
        self.sites[0].mapv_inplace(|x| x * phase);
        self.log_norm += nrm.ln();
    }

    /// Dense matrix in the computational basis, site 0 most significant.
    pub fn to_dense(&self) -> Array2<C64> {
        let d = self.phys_dim();
        // acc[(out, in), r]
        let mut acc = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        let mut dim = 1usize;
        for w in &self.sites {
            let (l, _, _, r) = w.dim();
            let mut next = Array2::<C64>::zeros((dim * d * dim * d, r));
            for ro in 0..dim {
                for ri in 0..dim {
                    let row = ro * dim + ri;
                    for a in 0..l {
                        let v = acc[[row, a]];
                        if v == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for so in 0..d {
                            for si in 0..d {
                                let o = ro * d + so;
                                let i = ri * d + si;
                                let nrow = o * dim * d + i;
                                for b in 0..r {
                                    next[[nrow, b]] += v * w[[a, so, si, b]];
                                }
                            }
                        }
                    }
                }
            }
            acc = next;
            dim *= d;
        }
        let scale = self.log_norm.exp();
        Array2::from_shape_fn((dim, dim), |(o, i)| acc[[o * dim + i, 0]] * scale)
    }

    /// Canonical compression of the operator viewed as a vector in the
    /// Hilbert-Schmidt space. Returns the relative truncation error.
    pub fn compress(&mut self, policy: &TruncationPolicy) -> TnResult<f64> {
        let mut f = self.fused();
        let err = sweep::canonical_compress(&mut f, &mut self.log_norm, policy)?;
        let d = self.phys_dim();
        self.sites = f.iter().map(|a| unfuse(a, d)).collect();
        Ok(err)
    }

    /// `ca·a + cb·b` assembled by a direct sum of the virtual spaces.
    pub fn linear_combination(a: &Self, ca: C64, b: &Self, cb: C64) -> TnResult<Self> {
        let n = a.len();
        if b.len() != n {
            return Err(TnError::LengthMismatch(n, b.len()));
        }
        let d = a.phys_dim();
        if b.phys_dim() != d {
            return Err(TnError::StructurallyInvalid("physical dimensions differ".into()));
        }
        // Scales go into the first site so the norms of each branch stay
        // separate; the common part is pulled out into log_norm.
        let common = a.log_norm.max(b.log_norm);
        let fa = ca * (a.log_norm - common).exp();
        let fb = cb * (b.log_norm - common).exp();
        if n == 1 {
            let w = Array4::from_shape_fn((1, d, d, 1), |(_, o, i, _)| {
                fa * a.sites[0][[0, o, i, 0]] + fb * b.sites[0][[0, o, i, 0]]
            });
            return Ok(Self { sites: vec![w], log_norm: common });
        }
        let mut sites = Vec::with_capacity(n);
        for k in 0..n {
            let (la, _, _, ra) = a.sites[k].dim();
            let (lb, _, _, rb) = b.sites[k].dim();
            let (l, r) = match k {
                0 => (1, ra + rb),
                _ if k == n - 1 => (la + lb, 1),
                _ => (la + lb, ra + rb),
            };
            let mut w = Array4::<C64>::zeros((l, d, d, r));
            for o in 0..d {
                for i in 0..d {
                    if k == 0 {
                        for x in 0..ra {
                            w[[0, o, i, x]] = fa * a.sites[k][[0, o, i, x]];
                        }
                        for x in 0..rb {
                            w[[0, o, i, ra + x]] = fb * b.sites[k][[0, o, i, x]];
                        }
                    } else if k == n - 1 {
                        for x in 0..la {
                            w[[x, o, i, 0]] = a.sites[k][[x, o, i, 0]];
                        }
                        for x in 0..lb {
                            w[[la + x, o, i, 0]] = b.sites[k][[x, o, i, 0]];
                        }
                    } else {
                        for x in 0..la {
                            for y in 0..ra {
                                w[[x, o, i, y]] = a.sites[k][[x, o, i, y]];
                            }
                        }
                        for x in 0..lb {
                            for y in 0..rb {
                                w[[la + x, o, i, ra + y]] = b.sites[k][[x, o, i, y]];
                            }
                        }
                    }
                }
            }
            sites.push(w);
        }
        Ok(Self { sites, log_norm: common })
    }
}

/// `op · state`, truncated per `policy`. Returns the result and its relative
/// truncation error. The output has its center at one end.
pub fn apply_mpo(op: &OperatorTrain, state: &TensorTrain, policy: &TruncationPolicy) -> TnResult<(TensorTrain, f64)> {
    let n = op.len();
    if state.len() != n {
        return Err(TnError::LengthMismatch(n, state.len()));
    }
    let d = op.phys_dim();
    let mut src = state.clone();
    if policy.method == ApplyMethod::ZipUp && src.center != Some(0) {
        src.canonicalize(0)?;
    }
    let mut sites = Vec::with_capacity(n);
    for (w, a) in op.sites.iter().zip(&src.sites) {
        let (lw, _, _, rw) = w.dim();
        let (la, _, ra) = a.dim();
        let mut out = Array3::<C64>::zeros((lw * la, d, rw * ra));
        for x in 0..lw {
            for y in 0..rw {
                for so in 0..d {
                    for si in 0..d {
                        let c = w[[x, so, si, y]];
                        if c == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for p in 0..la {
                            for q in 0..ra {
                                out[[x * la + p, so, y * ra + q]] += c * a[[p, si, q]];
                            }
                        }
                    }
                }
            }
        }
        sites.push(out);
    }
    let mut log_norm = op.log_norm + src.log_norm;
    let (err, center) = match policy.method {
        ApplyMethod::ZipUp => (sweep::single_pass_compress(&mut sites, &mut log_norm, policy)?, n - 1),
        ApplyMethod::Exact => (sweep::canonical_compress(&mut sites, &mut log_norm, policy)?, 0),
    };
    Ok((TensorTrain::from_parts(sites, Some(center), log_norm), err))
}

/// Operator product `a · b` compressed per `policy`.
pub fn mpo_multiply(a: &OperatorTrain, b: &OperatorTrain, policy: &TruncationPolicy) -> TnResult<(OperatorTrain, f64)> {
    let n = a.len();
    if b.len() != n {
        return Err(TnError::LengthMismatch(n, b.len()));
    }
    let d = a.phys_dim();
    let mut fused = Vec::with_capacity(n);
    for (wa, wb) in a.sites.iter().zip(&b.sites) {
        let (la, _, _, ra) = wa.dim();
        let (lb, _, _, rb) = wb.dim();
        let mut w = Array4::<C64>::zeros((la * lb, d, d, ra * rb));
        for x in 0..la {
            for y in 0..ra {
                for o in 0..d {
                    for k in 0..d {
                        let c = wa[[x, o, k, y]];
                        if c == C64::new(0.0, 0.0) {
                            continue;
                        }
                        for p in 0..lb {
                            for q in 0..rb {
                                for i in 0..d {
                                    w[[x * lb + p, o, i, y * rb + q]] += c * wb[[p, k, i, q]];
                                }
                            }
                        }
                    }
                }
            }
        }
        fused.push(fuse(&w));
    }
    let mut log_norm = a.log_norm + b.log_norm;
    let err = match policy.method {
        ApplyMethod::ZipUp => {
            // Zip-up needs a right-normalized input; build it from the
            // exact product so the single pass sees proper Schmidt values.
            let mut ln = 0.0;
            sweep::move_center(&mut fused, &mut ln, None, 0)?;
            let nrm = sweep::frobenius(fused[0].iter().cloned());
            if nrm == 0.0 {
                return Err(TnError::ZeroNorm);
            }
            fused[0].mapv_inplace(|x| x / nrm);
            log_norm += ln + nrm.ln();
            sweep::single_pass_compress(&mut fused, &mut log_norm, policy)?
        }
        ApplyMethod::Exact => sweep::canonical_compress(&mut fused, &mut log_norm, policy)?,
    };
    Ok((OperatorTrain::from_fused(&fused, log_norm), err))
}
