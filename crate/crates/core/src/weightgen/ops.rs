//! Tape-level weight generation primitives.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `Σ_k α_k T_k`.
pub fn combine_wavg(tape: &mut Tape, templates: &[Var], alpha: Var) -> Result<Var> {
    if tape.value(alpha).len() != templates.len() {
        return Err(Error::arg(
            "combine_wavg",
            format!(
                "{} coefficients for {} templates",
                tape.value(alpha).len(),
                templates.len()
            ),
        ));
    }
    tape.weighted_sum(templates, alpha)
}

/// Template coefficients `α = W φ + b` (optionally softmax-normalized) from
/// the first `k` rows of the group projection.
pub fn emb_coefficients(
    tape: &mut Tape,
    phi: Var,
    proj_w: Var,
    proj_b: Var,
    k: usize,
    softmax: bool,
) -> Result<Var> {
    let ws = tape.shape(proj_w).to_vec();
    let e = tape.value(phi).len();
    if ws.len() != 2 || ws[1] != e || tape.value(proj_b).len() != ws[0] || k > ws[0] || k == 0 {
        return Err(Error::Dimension {
            op: "combine_emb",
            lhs: ws,
            rhs: vec![e, tape.value(proj_b).len(), k],
        });
    }
    let (w, b) = if k < ws[0] {
        let w = tape.gather_modular(proj_w, 0, k * e)?;
        (tape.reshape(w, &[k, e])?, tape.gather_modular(proj_b, 0, k)?)
    } else {
        (proj_w, proj_b)
    };
    let col = tape.reshape(phi, &[e, 1])?;
    let proj = tape.matmul(w, col)?;
    let proj = tape.reshape(proj, &[k])?;
    let mut alpha = tape.add(proj, b)?;
    if softmax {
        alpha = tape.softmax(alpha);
    }
    Ok(alpha)
}

/// Emb combination: `α = W φ + b`, then `Σ_k α_k T_k`.
pub fn combine_emb(
    tape: &mut Tape,
    templates: &[Var],
    phi: Var,
    proj_w: Var,
    proj_b: Var,
    softmax: bool,
) -> Result<Var> {
    let alpha = emb_coefficients(tape, phi, proj_w, proj_b, templates.len(), softmax)?;
    tape.weighted_sum(templates, alpha)
}

/// `templates[call_index mod K̃]`, untouched.
pub fn combine_rr(templates: &[Var], call_index: usize) -> Result<Var> {
    if templates.is_empty() {
        return Err(Error::arg("combine_rr", "no templates"));
    }
    Ok(templates[call_index % templates.len()])
}

/// Unweighted mean, computed as a weighted sum with coefficients `1/K̃` so it
/// matches [`combine_wavg`] with uniform coefficients bit for bit.
pub fn combine_avg(tape: &mut Tape, templates: &[Var]) -> Result<Var> {
    if templates.is_empty() {
        return Err(Error::arg("combine_avg", "no templates"));
    }
    if templates.len() == 1 {
        return Ok(templates[0]);
    }
    let k = templates.len();
    let coeffs = tape.constant(Tensor::full(&[k], 1.0 / k as f64));
    tape.weighted_sum(templates, coeffs)
}

/// `⌈target / |θ|⌉ `.
pub fn tile_count(theta_len: usize, target: usize) -> usize {
    target.div_ceil(theta_len)
}

fn check_upsample(op: &'static str, tape: &Tape, theta: Var, target: usize) -> Result<usize> {
    let n = tape.value(theta).len();
    if n >= target {
        return Err(Error::Contract(format!(
            "{op}: {n} parameters do not need upsampling to {target}"
        )));
    }
    Ok(n)
}

/// Tiles of θ concatenated and truncated to `target`.
pub fn upsample_repeat(tape: &mut Tape, theta: Var, target: usize) -> Result<Var> {
    check_upsample("upsample_repeat", tape, theta, target)?;
    tape.gather_modular(theta, 0, target)
}

/// Align-corners linear interpolation of θ up to `target`.
pub fn upsample_inter(tape: &mut Tape, theta: Var, target: usize) -> Result<Var> {
    check_upsample("upsample_inter", tape, theta, target)?;
    tape.linear_resize_1d(theta, target)
}

/// Tiles of θ where tile `t ≥ 1` is multiplied by `masks[t−1]` repeated over
/// consecutive windows (a trailing partial window uses the mask prefix);
/// concatenated and truncated to `target`.
pub fn upsample_mask(tape: &mut Tape, theta: Var, target: usize, masks: &[Var]) -> Result<Var> {
    let n = check_upsample("upsample_mask", tape, theta, target)?;
    let tiles = tile_count(n, target);
    if masks.len() < tiles - 1 {
        return Err(Error::Contract(format!(
            "upsample_mask: {tiles} tiles need {} masks, pool has {}",
            tiles - 1,
            masks.len()
        )));
    }
    let mut parts = Vec::with_capacity(tiles);
    parts.push(theta);
    for mask in &masks[..tiles - 1] {
        let spread = tape.gather_modular(*mask, 0, n)?;
        parts.push(tape.mul(theta, spread)?);
    }
    let joined = tape.concat(&parts)?;
    tape.gather_modular(joined, 0, target)
}
