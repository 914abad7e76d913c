use ndarray::{Array2, Array3};
use num_complex::Complex64 as C64;
use rand::Rng;

use super::sweep;
use super::{TnError, TnResult, TruncationPolicy};
use crate::linalg;

/// A matrix product state on a chain of spins, basis index 0 = spin up.
///
/// Site 0 is the most significant digit of the dense basis index, so
/// `to_dense()[0]` is the amplitude of `|↑↑…↑⟩`.
#[derive(Clone, Debug)]
pub struct TensorTrain {
    pub(crate) sites: Vec<Array3<C64>>,
    pub(crate) center: Option<usize>,
    pub(crate) log_norm: f64,
}

impl TensorTrain {
    pub fn new(sites: Vec<Array3<C64>>) -> TnResult<Self> {
        sweep::validate(&sites)?;
        Ok(Self { sites, center: None, log_norm: 0.0 })
    }

    pub fn with_log_norm(mut self, log_norm: f64) -> Self {
        self.log_norm = log_norm;
        self
    }

    /// Product state from one (unnormalized) local vector per site.
    pub fn product(locals: &[[C64; 2]]) -> TnResult<Self> {
        if locals.is_empty() {
            return Err(TnError::StructurallyInvalid("empty train".into()));
        }
        let mut log_norm = 0.0;
        let mut sites = Vec::with_capacity(locals.len());
        for v in locals {
            let nrm = (v[0].norm_sqr() + v[1].norm_sqr()).sqrt();
            if nrm == 0.0 {
                return Err(TnError::ZeroNorm);
            }
            log_norm += nrm.ln();
            let mut t = Array3::zeros((1, 2, 1));
            t[[0, 0, 0]] = v[0] / nrm;
            t[[0, 1, 0]] = v[1] / nrm;
            sites.push(t);
        }
        Ok(Self { sites, center: Some(0), log_norm })
    }

    /// Computational basis state; `bits[i] = 0` is spin up on site `i`.
    pub fn basis_state(bits: &[u8]) -> TnResult<Self> {
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        let locals: Vec<[C64; 2]> =
            bits.iter().map(|&b| if b == 0 { [one, zero] } else { [zero, one] }).collect();
        Self::product(&locals)
    }

    /// Normalized random state with bonds capped at `bond`.
    pub fn random<R: Rng + ?Sized>(n: usize, bond: usize, rng: &mut R) -> TnResult<Self> {
        if n == 0 {
            return Err(TnError::StructurallyInvalid("empty train".into()));
        }
        let mut dims = vec![1usize; n + 1];
        for (i, dim) in dims.iter_mut().enumerate().take(n).skip(1) {
            let exact = 2usize.saturating_pow(i.min(n - i) as u32);
            *dim = exact.min(bond);
        }
        let sites = (0..n)
            .map(|i| {
                Array3::from_shape_fn((dims[i], 2, dims[i + 1]), |_| {
                    C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                })
            })
            .collect();
        let mut tt = Self::new(sites)?;
        tt.compress(&TruncationPolicy::lossless())?;
        tt.log_norm = 0.0;
        Ok(tt)
    }

    /// Decompose a dense vector of length `2^n` by successive SVDs.
    pub fn from_dense(vec: &[C64], n: usize, policy: &TruncationPolicy) -> TnResult<(Self, f64)> {
        if vec.len() != 1usize << n {
            return Err(TnError::StructurallyInvalid(format!("vector length {} is not 2^{}", vec.len(), n)));
        }
        let mut sites = Vec::with_capacity(n);
        let mut rest = Array2::from_shape_vec((1, vec.len()), vec.to_vec()).expect("shape");
        let mut err2 = 0.0;
        let mut log_norm = 0.0;
        for _ in 0..n - 1 {
            let l = rest.nrows();
            let cols = rest.ncols() / 2;
            let m = rest.into_shape_with_order((l * 2, cols)).expect("shape");
            let (u, s, vh) = linalg::svd(&m)?;
            let (k, disc) = sweep::truncation_rank(&s, policy);
            if k == 0 {
                return Err(TnError::ZeroNorm);
            }
            err2 += disc;
            sites.push(sweep::to_tensor(&u.slice(ndarray::s![.., ..k]).to_owned(), l, 2, k));
            let mut next = vh.slice(ndarray::s![..k, ..]).to_owned();
            for (j, mut row) in next.rows_mut().into_iter().enumerate() {
                row.mapv_inplace(|x| x * s[j]);
            }
            let nrm = sweep::frobenius(next.iter().cloned());
            next.mapv_inplace(|x| x / nrm);
            log_norm += nrm.ln();
            rest = next;
        }
        let l = rest.nrows();
        let last = rest.into_shape_with_order((l, 2, 1)).expect("shape");
        let nrm = sweep::frobenius(last.iter().cloned());
        if nrm == 0.0 {
            return Err(TnError::ZeroNorm);
        }
        log_norm += nrm.ln();
        sites.push(last.mapv(|x| x / nrm));
        Ok((Self { sites, center: Some(n - 1), log_norm }, err2.sqrt()))
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Array3<C64>] {
        &self.sites
    }

    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }

    pub fn canonical_center(&self) -> Option<usize> {
        self.center
    }

    /// Bond dimensions `χ_0 … χ_N` including the trivial boundaries.
    pub fn bond_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.sites[0].dim().0];
        dims.extend(self.sites.iter().map(|s| s.dim().2));
        dims
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Dense state vector including the `exp(log_norm)` factor.
    pub fn to_dense(&self) -> Vec<C64> {
        let mut acc = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
        for site in &self.sites {
            let (l, d, r) = site.dim();
            let m = acc.dot(&sweep::right_matrix(site));
            let rows = acc.nrows();
            debug_assert_eq!(acc.ncols(), l);
            acc = m.into_shape_with_order((rows * d, r)).expect("shape");
        }
        let scale = self.log_norm.exp();
        acc.iter().map(|x| x * scale).collect()
    }

    pub fn norm(&self) -> f64 {
        let v = super::contract::sandwich_identity(self, self);
        v.re.max(0.0).sqrt()
    }

    /// Rescale to unit norm.
    pub fn normalize(&mut self) -> TnResult<()> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(TnError::ZeroNorm);
        }
        self.log_norm -= n.ln();
        Ok(())
    }

    pub fn normalized(mut self) -> TnResult<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// In-place canonical compression; see [`canonical_compress`].
    pub fn compress(&mut self, policy: &TruncationPolicy) -> TnResult<f64> {
        let err = sweep::canonical_compress(&mut self.sites, &mut self.log_norm, policy)?;
        self.center = Some(0);
        Ok(err)
    }

    /// Move the orthogonality center to `site`.
    pub fn canonicalize(&mut self, site: usize) -> TnResult<()> {
        sweep::move_center(&mut self.sites, &mut self.log_norm, self.center, site)?;
        if self.center.is_none() {
            let nrm = sweep::frobenius(self.sites[site].iter().cloned());
            if nrm == 0.0 {
                return Err(TnError::ZeroNorm);
            }
            self.sites[site].mapv_inplace(|x| x / nrm);
            self.log_norm += nrm.ln();
        }
        self.center = Some(site);
        Ok(())
    }

    /// Max deviation from the isometry conditions around the current center.
    pub fn isometry_deviation(&self) -> Option<f64> {
        self.center.map(|c| sweep::isometry_deviation(&self.sites, c))
    }

    /// Apply a 2×2 matrix on one site. Unitary matrices keep the gauge.
    pub fn apply_one_site(&mut self, site: usize, op: &Array2<C64>) {
        sweep::apply_one_site(&mut self.sites[site], op);
        if self.center != Some(site) {
            self.center = None;
        }
    }

    pub fn conj(&self) -> Self {
        Self {
            sites: self.sites.iter().map(|s| s.mapv(|x| x.conj())).collect(),
            center: self.center,
            log_norm: self.log_norm,
        }
    }

    /// Multiply the represented state by a positive real factor.
    pub fn scale_log(&mut self, log_factor: f64) {
        self.log_norm += log_factor;
    }

    /// Multiply the represented state by a complex phase or factor.
    pub fn scale(&mut self, factor: C64) {
        let nrm = factor.norm();
        if nrm == 0.0 {
            self.sites[0].fill(C64::new(0.0, 0.0));
            return;
        }
        let phase = factor / nrm;
        let site = self.center.unwrap_or(0);
        self.sites[site].mapv_inplace(|x| x * phase);
        self.log_norm += nrm.ln();
    }

    /// Translate the physical tensors as they are; bonds, gauge and norm are
    /// carried over.
    pub(crate) fn from_parts(sites: Vec<Array3<C64>>, center: Option<usize>, log_norm: f64) -> Self {
        Self { sites, center, log_norm }
    }
}

/// Canonical compression of a state; returns the compressed copy and the
/// relative truncation error. Inputs already within the bond cap come back
/// unchanged up to gauge.
pub fn canonical_compress(tt: &TensorTrain, policy: &TruncationPolicy) -> TnResult<(TensorTrain, f64)> {
    let mut out = tt.clone();
    let err = out.compress(policy)?;
    Ok((out, err))
}
