//! Environment contractions. Every environment is rescaled to unit max-norm
//! after each site and the scale is accumulated in log space.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64 as C64;

use super::operator::fuse;
use super::{OperatorTrain, TensorTrain, TnError, TnResult};

fn rescale<D: ndarray::Dimension>(env: &mut ndarray::Array<C64, D>, log: &mut f64) {
    let m = env.iter().map(|x| x.norm()).fold(0.0, f64::max);
    if m > 0.0 && m.is_finite() {
        env.mapv_inplace(|x| x / m);
        *log += m.ln();
    }
}

fn finish(v: C64, log: f64) -> C64 {
    if v == C64::new(0.0, 0.0) {
        return v;
    }
    v * log.exp()
}

/// One environment step `E[x,p,u] → E'[y,q,v]` with bra `b`, operator `w`
/// (`None` = identity) and ket `k`.
fn env_step(env: &Array3<C64>, b: &Array3<C64>, w: Option<&Array4<C64>>, k: &Array3<C64>) -> Array3<C64> {
    let (x, p, u) = env.dim();
    let (_, d, v) = k.dim();
    let y = b.dim().2;
    // T1[x,p,s,v]
    let e2 = env.view().into_shape_with_order((x * p, u)).expect("shape").to_owned();
    let k2 = k.view().into_shape_with_order((u, d * v)).expect("shape").to_owned();
    let t1 = e2.dot(&k2).into_shape_with_order((x, p, d, v)).expect("shape");
    // T2[x,v,j,q]
    let (t2, q) = match w {
        Some(w) => {
            let (_, dj, _, q) = w.dim();
            let t1p = t1.permuted_axes([0, 3, 1, 2]);
            let t1m = Array2::from_shape_vec((x * v, p * d), t1p.iter().cloned().collect()).expect("shape");
            let w2 = w.view().permuted_axes([0, 2, 1, 3]);
            let w2m = Array2::from_shape_vec((p * d, dj * q), w2.iter().cloned().collect()).expect("shape");
            let t2 = t1m.dot(&w2m).into_shape_with_order((x, v, dj, q)).expect("shape");
            (t2, q)
        }
        None => {
            // p == 1 for the identity
            let t2 = t1.permuted_axes([0, 3, 2, 1]).as_standard_layout().to_owned();
            (t2, 1)
        }
    };
    // E'[y,q,v] = Σ_{x,j} conj(b[x,j,y]) T2[x,v,j,q]
    let t2p = t2.permuted_axes([0, 2, 3, 1]);
    let t2m = Array2::from_shape_vec((x * d, q * v), t2p.iter().cloned().collect()).expect("shape");
    let bm = b.view().into_shape_with_order((x * d, y)).expect("shape").mapv(|z| z.conj());
    bm.t().dot(&t2m).into_shape_with_order((y, q, v)).expect("shape")
}

fn sandwich_raw(bra: &[Array3<C64>], op: Option<&[Array4<C64>]>, ket: &[Array3<C64>]) -> (C64, f64) {
    let mut env = Array3::from_elem((1, 1, 1), C64::new(1.0, 0.0));
    let mut log = 0.0;
    for i in 0..ket.len() {
        env = env_step(&env, &bra[i], op.map(|o| &o[i]), &ket[i]);
        rescale(&mut env, &mut log);
    }
    (env[[0, 0, 0]], log)
}

pub(crate) fn sandwich_identity(bra: &TensorTrain, ket: &TensorTrain) -> C64 {
    let (v, log) = sandwich_raw(&bra.sites, None, &ket.sites);
    finish(v, log + bra.log_norm + ket.log_norm)
}

/// `⟨bra|op|ket⟩`, or `⟨bra|ket⟩` when `op` is `None`.
pub fn sandwich(bra: &TensorTrain, op: Option<&OperatorTrain>, ket: &TensorTrain) -> TnResult<C64> {
    let (v, log) = sandwich_log(bra, op, ket)?;
    Ok(finish(v, log))
}

/// Same as [`sandwich`] but returns `(mantissa, log_scale)` so that the value
/// is `mantissa · exp(log_scale)`.
pub fn sandwich_log(bra: &TensorTrain, op: Option<&OperatorTrain>, ket: &TensorTrain) -> TnResult<(C64, f64)> {
    let n = ket.len();
    if bra.len() != n {
        return Err(TnError::LengthMismatch(bra.len(), n));
    }
    let mut extra = 0.0;
    if let Some(o) = op {
        if o.len() != n {
            return Err(TnError::LengthMismatch(o.len(), n));
        }
        if o.phys_dim() != ket.sites[0].dim().1 {
            return Err(TnError::StructurallyInvalid("physical dimensions differ".into()));
        }
        extra = o.log_norm;
    }
    if bra.sites[0].dim().1 != ket.sites[0].dim().1 {
        return Err(TnError::StructurallyInvalid("physical dimensions differ".into()));
    }
    let (v, log) = sandwich_raw(&bra.sites, op.map(|o| o.sites.as_slice()), &ket.sites);
    Ok((v, log + bra.log_norm + ket.log_norm + extra))
}

fn trace_raw(op: &OperatorTrain, per_site: f64) -> (C64, f64) {
    let mut env = ndarray::Array1::from_elem(1, C64::new(1.0, 0.0));
    let mut log = 0.0;
    for w in &op.sites {
        let (l, d, _, r) = w.dim();
        let mut next = ndarray::Array1::<C64>::zeros(r);
        for x in 0..l {
            let e = env[x];
            for s in 0..d {
                for y in 0..r {
                    next[y] += e * w[[x, s, s, y]];
                }
            }
        }
        env = next.mapv(|z| z * per_site);
        rescale(&mut env, &mut log);
    }
    (env[0], log + op.log_norm)
}

/// `tr(op)`.
pub fn mpo_trace(op: &OperatorTrain) -> TnResult<C64> {
    let (v, log) = trace_raw(op, 1.0);
    Ok(finish(v, log))
}

/// `tr(op) / d^N`; stays O(1) for unitaries at any chain length.
pub fn mpo_trace_normalized(op: &OperatorTrain) -> TnResult<C64> {
    let d = op.phys_dim() as f64;
    let (v, log) = trace_raw(op, 1.0 / d);
    Ok(finish(v, log))
}

/// `tr(a · b) / d^N` without forming the product.
pub fn trace_product(a: &OperatorTrain, b: &OperatorTrain) -> TnResult<C64> {
    let n = a.len();
    if b.len() != n {
        return Err(TnError::LengthMismatch(n, b.len()));
    }
    let d = a.phys_dim();
    let inv_d = 1.0 / d as f64;
    let mut env = Array2::from_elem((1, 1), C64::new(1.0, 0.0));
    let mut log = 0.0;
    for (wa, wb) in a.sites.iter().zip(&b.sites) {
        let (x, _, _, y) = wa.dim();
        let (p, _, _, q) = wb.dim();
        // T[x,(o,k),q] = Σ_p E[x,p] b[p,k,o,q]
        let bp = wb.view().permuted_axes([0, 2, 1, 3]);
        let bm = Array2::from_shape_vec((p, d * d * q), bp.iter().cloned().collect()).expect("shape");
        let t = env.dot(&bm).into_shape_with_order((x * d * d, q)).expect("shape");
        let am = wa.view().into_shape_with_order((x * d * d, y)).expect("shape");
        env = am.t().dot(&t).mapv(|z| z * inv_d);
        rescale(&mut env, &mut log);
    }
    Ok(finish(env[[0, 0]], log + a.log_norm + b.log_norm))
}

/// View an operator as a state on the fused `(out, in)` index.
pub(crate) fn as_fused_state(op: &OperatorTrain) -> TensorTrain {
    TensorTrain::from_parts(op.sites.iter().map(fuse).collect(), None, op.log_norm)
}

/// `op ⊗ 1` acting on the out part of a fused `(out, in)` index.
pub(crate) fn lift_left(op: &OperatorTrain) -> OperatorTrain {
    let d = op.phys_dim();
    let sites = op
        .sites
        .iter()
        .map(|w| {
            let (l, _, _, r) = w.dim();
            Array4::from_shape_fn((l, d * d, d * d, r), |(x, jo, ki, y)| {
                let (j, i1) = (jo / d, jo % d);
                let (k, i2) = (ki / d, ki % d);
                if i1 == i2 {
                    w[[x, j, k, y]]
                } else {
                    C64::new(0.0, 0.0)
                }
            })
        })
        .collect();
    OperatorTrain { sites, log_norm: op.log_norm }
}

/// Hilbert-Schmidt sandwich `tr(a† · op · b) / d^N` (`op = None` is the
/// identity).
pub fn hs_sandwich(a: &OperatorTrain, op: Option<&OperatorTrain>, b: &OperatorTrain) -> TnResult<C64> {
    let n = b.len();
    let d = b.phys_dim() as f64;
    let sa = as_fused_state(a);
    let sb = as_fused_state(b);
    let lifted = op.map(lift_left);
    let (v, log) = sandwich_log(&sa, lifted.as_ref(), &sb)?;
    Ok(finish(v, log - n as f64 * d.ln()))
}
