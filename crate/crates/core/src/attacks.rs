//! Adversarial attacks in latent space: FGV, DeepFool and an untargeted
//! Carlini-Wagner variant. Each attack takes a labeled latent and returns a
//! nearby point on (or just past) the decoder's decision boundary.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::decoder::{axpy, dot, DecoderModel};
use crate::encoder::{mean_rows, EncodedSample};
use crate::error::{Error, Result};

/// Step scales tried, in order, by the FGV boundary-crossing line search.
pub const FGV_LINE_SEARCH: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

const CW_MAX_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgv,
    DeepFool,
    Cw,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgv => "fgv",
            AttackMethod::DeepFool => "deepfool",
            AttackMethod::Cw => "cw",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub fgv_lambda: f64,
    pub fgv_line_search: bool,
    pub deepfool_max_iter: usize,
    pub deepfool_overshoot: f64,
    pub cw_c: f64,
    pub cw_steps: usize,
    pub cw_step_size: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: AttackMethod::Fgv,
            fgv_lambda: 0.5,
            fgv_line_search: false,
            deepfool_max_iter: 50,
            deepfool_overshoot: 0.02,
            cw_c: 1.0,
            cw_steps: 100,
            cw_step_size: 0.05,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fgv_lambda >= 0.0) {
            return Err(Error::Config("fgv_lambda must be non-negative".into()));
        }
        if !(self.deepfool_overshoot >= 0.0) {
            return Err(Error::Config("deepfool_overshoot must be non-negative".into()));
        }
        if !(self.cw_c > 0.0) {
            return Err(Error::Config("cw_c must be positive".into()));
        }
        if !(self.cw_step_size > 0.0) {
            return Err(Error::Config("cw_step_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialPoint {
    pub origin_id: u32,
    /// Adversarial point in the pooled latent space.
    pub x_prime: Vec<f64>,
    /// `‖x' - x‖₂` with `x` the pooled origin.
    pub perturbation_norm: f64,
    /// Whether the decoder's prediction at `x'` differs from the one at `x`.
    pub success: bool,
    pub iterations: usize,
    /// DeepFool only: the accumulated perturbation before overshoot, added to `x`.
    pub boundary_point: Option<Vec<f64>>,
    /// FGV only: the step scale that was applied.
    pub lambda: Option<f64>,
    /// Zero gradient (FGV) or no usable boundary direction (DeepFool).
    pub degenerate: bool,
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn shifted(rows: &[f64], dim: usize, delta: &[f64]) -> Vec<f64> {
    let mut out = rows.to_vec();
    for r in out.chunks_exact_mut(dim) {
        for (v, d) in r.iter_mut().zip(delta) {
            *v += d;
        }
    }
    out
}

fn point(
    origin_id: u32,
    x: &[f64],
    x_prime: Vec<f64>,
    success: bool,
    iterations: usize,
) -> AdversarialPoint {
    AdversarialPoint {
        origin_id,
        perturbation_norm: l2(x, &x_prime),
        x_prime,
        success,
        iterations,
        boundary_point: None,
        lambda: None,
        degenerate: false,
    }
}

/// Fast gradient value: `x' = x + λ ∇ₓ CE(x, y)`.
///
/// `rows` holds one row (classification) or one per token (labeling); the
/// same perturbation is added to every row and `x'` lives in the pooled
/// space. With `line_search`, the scales in [`FGV_LINE_SEARCH`] are tried in
/// order and the first one that changes the prediction is kept.
pub fn fgv(
    decoder: &DecoderModel,
    origin_id: u32,
    rows: &[f64],
    targets: &[u32],
    lambda: f64,
    line_search: bool,
) -> Result<AdversarialPoint> {
    let d = decoder.input_dim();
    let x = mean_rows(rows, d);
    let (_, grad) = decoder.loss_and_input_grad(rows, targets)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite input gradient".into()));
    }
    let base_pred = decoder.predict_rows(rows)?;
    let zero_grad = grad.iter().all(|g| *g == 0.0);
    if zero_grad {
        let mut p = point(origin_id, &x, x.clone(), false, 1);
        p.lambda = Some(lambda);
        p.degenerate = lambda > 0.0;
        return Ok(p);
    }
    let try_scale = |s: f64| -> Result<(Vec<f64>, bool)> {
        let delta: Vec<f64> = grad.iter().map(|g| s * g).collect();
        let moved = shifted(rows, d, &delta);
        let success = decoder.predict_rows(&moved)? != base_pred;
        let mut xp = x.clone();
        axpy(1.0, &delta, &mut xp);
        Ok((xp, success))
    };
    let scales: &[f64] = if line_search {
        &FGV_LINE_SEARCH
    } else {
        std::slice::from_ref(&lambda)
    };
    let mut tried = 0;
    let mut chosen = None;
    for &s in scales {
        tried += 1;
        let (xp, success) = try_scale(s)?;
        chosen = Some((s, xp, success));
        if success {
            break;
        }
    }
    let (s, xp, success) = chosen.expect("at least one scale");
    let mut p = point(origin_id, &x, xp, success, tried);
    p.lambda = Some(s);
    Ok(p)
}

/// Multiclass DeepFool on a single latent row.
///
/// Each iteration linearizes every class boundary at the current point and
/// steps onto the nearest one; the returned point is `x + (1 + η) r`.
pub fn deepfool(
    decoder: &DecoderModel,
    origin_id: u32,
    x: &[f64],
    max_iter: usize,
    overshoot: f64,
) -> Result<AdversarialPoint> {
    let d = decoder.input_dim();
    if x.len() != d {
        return Err(Error::Shape {
            expected: d,
            got: x.len(),
        });
    }
    let c = decoder.outputs();
    let k0 = decoder.predict(x)?;
    let mut r_tot = vec![0.0; d];
    let mut iterations = 0;
    let mut success = false;
    let mut degenerate = false;
    let mut current = x.to_vec();
    while iterations < max_iter {
        let (z, jac) = decoder.logits_jacobian(&current)?;
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for k in 0..c {
            if k == k0 {
                continue;
            }
            let w: Vec<f64> = (0..d).map(|j| jac[k * d + j] - jac[k0 * d + j]).collect();
            let wn2 = dot(&w, &w);
            if wn2 == 0.0 {
                continue;
            }
            let f = z[k] - z[k0];
            let dist = f.abs() / wn2.sqrt();
            if best.as_ref().is_none_or(|b| dist < b.0) {
                best = Some((dist, f, w));
            }
        }
        let Some((_, f, w)) = best else {
            degenerate = true;
            break;
        };
        let wn2 = dot(&w, &w);
        axpy(f.abs() / wn2, &w, &mut r_tot);
        iterations += 1;
        current.copy_from_slice(x);
        axpy(1.0, &r_tot, &mut current);
        let mut over = x.to_vec();
        axpy(1.0 + overshoot, &r_tot, &mut over);
        if decoder.predict(&over)? != k0 {
            success = true;
            break;
        }
    }
    let mut xp = x.to_vec();
    axpy(1.0 + overshoot, &r_tot, &mut xp);
    let success = success && decoder.predict(&xp)? != k0;
    let mut p = point(origin_id, x, xp, success, iterations);
    p.boundary_point = Some(current);
    p.degenerate = degenerate;
    Ok(p)
}

/// Result of a C&W run, including the accepted objective values.
#[derive(Clone, Debug, PartialEq)]
pub struct CwOutcome {
    pub point: AdversarialPoint,
    pub objectives: Vec<f64>,
}

fn cw_margin(z: &[f64], anchor: usize) -> (f64, usize) {
    let mut other = usize::MAX;
    for (m, &v) in z.iter().enumerate() {
        if m != anchor && (other == usize::MAX || v > z[other]) {
            other = m;
        }
    }
    (z[anchor] - z[other], other)
}

/// Untargeted C&W: minimize `‖x' - x‖² + c · max(z_anchor(x') - max_{m≠anchor} z_m(x'), 0)`
/// by gradient descent with backtracking; a step is accepted only if it does
/// not increase the objective.
pub fn cw_trace(
    decoder: &DecoderModel,
    origin_id: u32,
    x: &[f64],
    anchor: u32,
    c: f64,
    steps: usize,
    step_size: f64,
) -> Result<CwOutcome> {
    let d = decoder.input_dim();
    if x.len() != d {
        return Err(Error::Shape {
            expected: d,
            got: x.len(),
        });
    }
    let anchor = anchor as usize;
    if anchor >= decoder.outputs() {
        return Err(Error::Range {
            label: anchor as u32,
            arity: decoder.outputs(),
        });
    }
    let k0 = decoder.predict(x)?;
    let objective = |p: &[f64]| -> Result<f64> {
        let z = decoder.logits(p)?;
        let g = cw_margin(&z, anchor).0.max(0.0);
        let dist2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(dist2 + c * g)
    };
    let z0 = decoder.logits(x)?;
    if cw_margin(&z0, anchor).0 <= 0.0 {
        return Ok(CwOutcome {
            point: point(origin_id, x, x.to_vec(), false, 0),
            objectives: vec![0.0],
        });
    }
    let mut cur = x.to_vec();
    let mut obj = objective(&cur)?;
    let mut objectives = vec![obj];
    let mut best_success: Option<(f64, Vec<f64>)> = None;
    let mut iterations = 0;
    for _ in 0..steps {
        let (z, jac) = decoder.logits_jacobian(&cur)?;
        let (gap, other) = cw_margin(&z, anchor);
        let mut grad: Vec<f64> = cur.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
        if gap > 0.0 {
            for j in 0..d {
                grad[j] += c * (jac[anchor * d + j] - jac[other * d + j]);
            }
        }
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let mut eta = step_size;
        let mut accepted = None;
        for _ in 0..CW_MAX_HALVINGS {
            let mut cand = cur.clone();
            axpy(-eta, &grad, &mut cand);
            let o = match objective(&cand) {
                Ok(o) if o.is_finite() => o,
                // Non-finite objective: stop this attack.
                Ok(_) | Err(Error::Numeric(_)) => {
                    return Ok(finish_cw(origin_id, x, cur, best_success, iterations, objectives, k0, decoder));
                }
                Err(e) => return Err(e),
            };
            if o <= obj {
                accepted = Some((cand, o));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, o)) = accepted else {
            break;
        };
        iterations += 1;
        cur = cand;
        obj = o;
        objectives.push(o);
        if decoder.predict(&cur)? != k0 {
            let dist = l2(&cur, x);
            if best_success.as_ref().is_none_or(|b| dist < b.0) {
                best_success = Some((dist, cur.clone()));
            }
        }
    }
    Ok(finish_cw(origin_id, x, cur, best_success, iterations, objectives, k0, decoder))
}

#[allow(clippy::too_many_arguments)]
fn finish_cw(
    origin_id: u32,
    x: &[f64],
    last: Vec<f64>,
    best_success: Option<(f64, Vec<f64>)>,
    iterations: usize,
    objectives: Vec<f64>,
    k0: usize,
    decoder: &DecoderModel,
) -> CwOutcome {
    let p = match best_success {
        Some((_, xp)) => point(origin_id, x, xp, true, iterations),
        None => {
            // Accepted iterates only decrease the objective, so the last one is the best.
            let success = decoder.predict(&last).map(|p| p != k0).unwrap_or(false);
            point(origin_id, x, last, success, iterations)
        }
    };
    CwOutcome {
        point: p,
        objectives,
    }
}

pub fn cw(
    decoder: &DecoderModel,
    origin_id: u32,
    x: &[f64],
    anchor: u32,
    config: &AttackConfig,
) -> Result<AdversarialPoint> {
    Ok(cw_trace(
        decoder,
        origin_id,
        x,
        anchor,
        config.cw_c,
        config.cw_steps,
        config.cw_step_size,
    )?
    .point)
}

/// One labeled batch member to attack.
#[derive(Clone, Copy, Debug)]
pub struct AttackItem<'a> {
    pub id: u32,
    pub sample: &'a EncodedSample,
    pub label: &'a Label,
}

/// Attacks every item with the configured method, preserving order.
/// Failed attacks are kept with `success == false`.
pub fn attack_batch(
    decoder: &DecoderModel,
    items: &[AttackItem<'_>],
    encoder_version: u64,
    config: &AttackConfig,
) -> Result<Vec<AdversarialPoint>> {
    config.validate()?;
    if let Some(stale) = items.iter().find(|i| i.sample.version != encoder_version) {
        return Err(Error::Stale {
            built: stale.sample.version,
            current: encoder_version,
        });
    }
    items
        .iter()
        .map(|item| {
            let rows = &item.sample.rows;
            let targets = item.label.targets();
            let single = item.sample.n_rows() == 1;
            match config.method {
                AttackMethod::Fgv => fgv(
                    decoder,
                    item.id,
                    rows,
                    targets,
                    config.fgv_lambda,
                    config.fgv_line_search,
                ),
                AttackMethod::DeepFool | AttackMethod::Cw if !single => Err(Error::Config(format!(
                    "{} attacks need single-row (classification) samples",
                    config.method.name()
                ))),
                AttackMethod::DeepFool => deepfool(
                    decoder,
                    item.id,
                    rows,
                    config.deepfool_max_iter,
                    config.deepfool_overshoot,
                ),
                AttackMethod::Cw => cw(decoder, item.id, rows, targets[0], config),
            }
        })
        .collect()
}
