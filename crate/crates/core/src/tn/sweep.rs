//! Gauge moves, truncating sweeps and gate application on a chain of rank-3
//! tensors `(left, phys, right)`. Operator trains reuse these kernels with the
//! `(out, in)` pair fused into one physical index of dimension 4.

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64 as C64;

use super::{TnError, TnResult, TruncationPolicy};
use crate::linalg;

pub(crate) fn left_matrix(a: &Array3<C64>) -> Array2<C64> {
    let (l, d, r) = a.dim();
    Array2::from_shape_vec((l * d, r), a.iter().cloned().collect()).expect("shape")
}

pub(crate) fn right_matrix(a: &Array3<C64>) -> Array2<C64> {
    let (l, d, r) = a.dim();
    Array2::from_shape_vec((l, d * r), a.iter().cloned().collect()).expect("shape")
}

pub(crate) fn to_tensor(m: &Array2<C64>, l: usize, d: usize, r: usize) -> Array3<C64> {
    Array3::from_shape_vec((l, d, r), m.iter().cloned().collect()).expect("shape")
}

pub(crate) fn frobenius(it: impl IntoIterator<Item = C64>) -> f64 {
    it.into_iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

pub(crate) fn validate(sites: &[Array3<C64>]) -> TnResult<()> {
    let Some(first) = sites.first() else {
        return Err(TnError::StructurallyInvalid("empty train".into()));
    };
    if first.dim().0 != 1 {
        return Err(TnError::StructurallyInvalid(format!("left boundary bond is {}", first.dim().0)));
    }
    let last = sites.last().expect("non-empty");
    if last.dim().2 != 1 {
        return Err(TnError::StructurallyInvalid(format!("right boundary bond is {}", last.dim().2)));
    }
    let d = first.dim().1;
    for (i, w) in sites.windows(2).enumerate() {
        if w[0].dim().2 != w[1].dim().0 {
            return Err(TnError::StructurallyInvalid(format!(
                "bond {} mismatch: {} vs {}",
                i,
                w[0].dim().2,
                w[1].dim().0
            )));
        }
    }
    if sites.iter().any(|s| s.dim().1 != d) {
        return Err(TnError::StructurallyInvalid("inconsistent physical dimension".into()));
    }
    Ok(())
}

/// Number of singular values to keep and the discarded weight relative to the
/// total weight. Values below `sv_cutoff * s_max` go first, then the cap.
pub(crate) fn truncation_rank(s: &[f64], policy: &TruncationPolicy) -> (usize, f64) {
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return (0, 0.0);
    }
    let smax = s[0];
    let mut k = s.iter().take_while(|&&x| x >= policy.sv_cutoff * smax && x > 0.0).count();
    k = k.clamp(1, policy.max_bond.max(1));
    let discarded: f64 = s[k..].iter().map(|x| x * x).sum();
    (k, discarded / total)
}

/// Left-isometrize site `i` and push the remainder into site `i + 1`.
pub(crate) fn qr_left(sites: &mut [Array3<C64>], i: usize) {
    let (l, d, _) = sites[i].dim();
    let (q, r) = linalg::qr(&left_matrix(&sites[i]));
    let k = q.ncols();
    sites[i] = to_tensor(&q, l, d, k);
    let (_, d2, r2) = sites[i + 1].dim();
    let next = r.dot(&right_matrix(&sites[i + 1]));
    sites[i + 1] = to_tensor(&next, k, d2, r2);
}

/// Right-isometrize site `i` and push the remainder into site `i - 1`.
pub(crate) fn lq_right(sites: &mut [Array3<C64>], i: usize) {
    let (_, d, r) = sites[i].dim();
    let m = right_matrix(&sites[i]);
    // m = R† Q† from the QR of m†.
    let (q, rr) = linalg::qr(&linalg::dagger(&m));
    let k = q.ncols();
    sites[i] = to_tensor(&linalg::dagger(&q), k, d, r);
    let (l0, d0, _) = sites[i - 1].dim();
    let prev = left_matrix(&sites[i - 1]).dot(&linalg::dagger(&rr));
    sites[i - 1] = to_tensor(&prev, l0, d0, k);
}

/// Bring the chain into mixed canonical form around `to`. With `from = None`
/// a full left sweep is done first and the center is normalized into
/// `log_norm`.
pub(crate) fn move_center(
    sites: &mut [Array3<C64>],
    log_norm: &mut f64,
    from: Option<usize>,
    to: usize,
) -> TnResult<()> {
    let n = sites.len();
    let from = match from {
        Some(f) => f,
        None => {
            for i in 0..n - 1 {
                qr_left(sites, i);
                let nrm = frobenius(sites[i + 1].iter().cloned());
                if nrm == 0.0 {
                    return Err(TnError::ZeroNorm);
                }
                sites[i + 1].mapv_inplace(|x| x / nrm);
                *log_norm += nrm.ln();
            }
            n - 1
        }
    };
    if to > from {
        for i in from..to {
            qr_left(sites, i);
        }
    } else {
        for i in (to + 1..=from).rev() {
            lq_right(sites, i);
        }
    }
    Ok(())
}

/// Left QR sweep followed by a right-to-left truncating SVD sweep. Leaves the
/// chain right-canonical (center 0) with a unit-norm center tensor and returns
/// the truncation error `sqrt(sum of discarded relative weights)`.
pub(crate) fn canonical_compress(
    sites: &mut [Array3<C64>],
    log_norm: &mut f64,
    policy: &TruncationPolicy,
) -> TnResult<f64> {
    policy.validate()?;
    validate(sites)?;
    let n = sites.len();
    move_center(sites, log_norm, None, n - 1)?;
    let nrm = frobenius(sites[n - 1].iter().cloned());
    if nrm == 0.0 {
        return Err(TnError::ZeroNorm);
    }
    sites[n - 1].mapv_inplace(|x| x / nrm);
    *log_norm += nrm.ln();

    let mut err2 = 0.0;
    for i in (1..n).rev() {
        let (_, d, r) = sites[i].dim();
        let (u, s, vh) = linalg::svd(&right_matrix(&sites[i]))?;
        let (k, disc) = truncation_rank(&s, policy);
        if k == 0 {
            return Err(TnError::ZeroNorm);
        }
        let total: f64 = s.iter().map(|x| x * x).sum();
        let kept = total * (1.0 - disc);
        let nk = kept.sqrt();
        *log_norm += if policy.renormalize { 0.5 * total.ln() } else { nk.ln() };
        err2 += disc;
        let vk = vh.slice(ndarray::s![..k, ..]).to_owned();
        sites[i] = to_tensor(&vk, k, d, r);
        let mut us = u.slice(ndarray::s![.., ..k]).to_owned();
        for (j, mut col) in us.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| x * (s[j] / nk));
        }
        let (l0, d0, _) = sites[i - 1].dim();
        let prev = left_matrix(&sites[i - 1]).dot(&us);
        sites[i - 1] = to_tensor(&prev, l0, d0, k);
    }
    Ok(err2.sqrt())
}

/// One left-to-right truncating SVD pass without a preceding orthogonalization
/// (the zip-up step). The chain ends with its center at the last site.
pub(crate) fn single_pass_compress(
    sites: &mut [Array3<C64>],
    log_norm: &mut f64,
    policy: &TruncationPolicy,
) -> TnResult<f64> {
    policy.validate()?;
    validate(sites)?;
    let n = sites.len();
    let mut err2 = 0.0;
    for i in 0..n - 1 {
        let (l, d, _) = sites[i].dim();
        let (u, s, vh) = linalg::svd(&left_matrix(&sites[i]))?;
        let (k, disc) = truncation_rank(&s, policy);
        if k == 0 {
            return Err(TnError::ZeroNorm);
        }
        let total: f64 = s.iter().map(|x| x * x).sum();
        let nk = (total * (1.0 - disc)).sqrt();
        *log_norm += if policy.renormalize { 0.5 * total.ln() } else { nk.ln() };
        err2 += disc;
        let uk = u.slice(ndarray::s![.., ..k]).to_owned();
        sites[i] = to_tensor(&uk, l, d, k);
        let mut sv = vh.slice(ndarray::s![..k, ..]).to_owned();
        for (j, mut row) in sv.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|x| x * (s[j] / nk));
        }
        let (_, d1, r1) = sites[i + 1].dim();
        let next = sv.dot(&right_matrix(&sites[i + 1]));
        sites[i + 1] = to_tensor(&next, k, d1, r1);
    }
    let nrm = frobenius(sites[n - 1].iter().cloned());
    if nrm == 0.0 {
        return Err(TnError::ZeroNorm);
    }
    sites[n - 1].mapv_inplace(|x| x / nrm);
    *log_norm += nrm.ln();
    Ok(err2.sqrt())
}

/// Apply a `d² × d²` gate on bond `(i, i + 1)`. The center must sit on `i` or
/// `i + 1`; afterwards it sits on `i + 1` when `move_right`, else on `i`.
pub(crate) fn apply_two_site(
    sites: &mut [Array3<C64>],
    log_norm: &mut f64,
    i: usize,
    gate: &Array2<C64>,
    policy: &TruncationPolicy,
    move_right: bool,
) -> TnResult<f64> {
    let (l, d, _) = sites[i].dim();
    let (_, _, r) = sites[i + 1].dim();
    let theta = left_matrix(&sites[i]).dot(&right_matrix(&sites[i + 1]));
    // theta[(l, s1), (s2, r)] -> [(s1, s2), (l, r)]
    let t4 = theta.into_shape_with_order((l, d, d, r)).expect("shape");
    let t = t4.permuted_axes([1, 2, 0, 3]);
    let tm = Array2::from_shape_vec((d * d, l * r), t.iter().cloned().collect()).expect("shape");
    let g = gate.dot(&tm);
    let g4 = g.into_shape_with_order((d, d, l, r)).expect("shape").permuted_axes([2, 0, 1, 3]);
    let m = Array2::from_shape_vec((l * d, d * r), g4.iter().cloned().collect()).expect("shape");

    let (u, s, vh) = linalg::svd(&m)?;
    let (k, disc) = truncation_rank(&s, policy);
    if k == 0 {
        return Err(TnError::ZeroNorm);
    }
    let total: f64 = s.iter().map(|x| x * x).sum();
    let nk = (total * (1.0 - disc)).sqrt();
    *log_norm += if policy.renormalize { 0.5 * total.ln() } else { nk.ln() };
    let mut uk = u.slice(ndarray::s![.., ..k]).to_owned();
    let mut vk = vh.slice(ndarray::s![..k, ..]).to_owned();
    if move_right {
        for (j, mut row) in vk.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|x| x * (s[j] / nk));
        }
    } else {
        for (j, mut col) in uk.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|x| x * (s[j] / nk));
        }
    }
    sites[i] = to_tensor(&uk, l, d, k);
    sites[i + 1] = to_tensor(&vk, k, d, r);
    Ok(disc.sqrt())
}

/// Apply a `d × d` matrix on the physical index of site `i`.
pub(crate) fn apply_one_site(site: &mut Array3<C64>, gate: &Array2<C64>) {
    let (l, d, r) = site.dim();
    let mut out = Array3::<C64>::zeros((l, d, r));
    for a in 0..l {
        for b in 0..r {
            for sp in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                for s in 0..d {
                    acc += gate[[sp, s]] * site[[a, s, b]];
                }
                out[[a, sp, b]] = acc;
            }
        }
    }
    *site = out;
}

/// Max deviation of `A†A = 1` (left) over the sites left of `center` and of
/// `AA† = 1` (right) over the sites right of it.
pub(crate) fn isometry_deviation(sites: &[Array3<C64>], center: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in sites.iter().enumerate() {
        let m = if i < center {
            let lm = left_matrix(a);
            linalg::dagger(&lm).dot(&lm)
        } else if i > center {
            let rm = right_matrix(a);
            rm.dot(&linalg::dagger(&rm))
        } else {
            continue;
        };
        for ((p, q), x) in m.indexed_iter() {
            let target = if p == q { 1.0 } else { 0.0 };
            worst = worst.max((x - C64::new(target, 0.0)).norm());
        }
    }
    worst
}
