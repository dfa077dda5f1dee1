//! Central finite-difference checking of recorded gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Phase, Var};
use crate::tensor::Tensor;

/// Default central-difference step for `f64` checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding are judged on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafError {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Coordinates whose central stencil crossed a kink and were checked
    /// with a one-sided stencil instead.
    pub one_sided: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub step: f64,
    pub leaves: Vec<LeafError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.max_rel_err))
    }

    pub fn max_abs_err(&self) -> f64 {
        self.leaves.iter().fold(0.0, |m, l| m.max(l.max_abs_err))
    }

    pub fn one_sided(&self) -> usize {
        self.leaves.iter().map(|l| l.one_sided).sum()
    }

    /// Leaf with the largest relative error.
    pub fn worst(&self) -> Option<&LeafError> {
        self.leaves
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub step: f64,
    pub phase: Phase,
    /// Check at most this many evenly spaced coordinates per leaf.
    pub max_coords: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            phase: Phase::Eval,
            max_coords: None,
        }
    }
}

fn evaluate<F>(build: &F, leaves: &[(String, Tensor)], phase: Phase) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_phase(phase, 0);
    let vars: Vec<Var> = leaves
        .iter()
        .map(|(name, t)| g.bind_param(name, t.clone(), true))
        .collect();
    let out = build(&mut g, &vars)?;
    g.check_finite()?;
    Ok((g, vars, out))
}

/// Checks the gradient of the scalar returned by `build` with respect to
/// every leaf. Leaves are bound by name, so model code reading parameters
/// through [`Graph::param`] sees the probed values.
pub fn grad_check<F>(build: F, leaves: &[(String, Tensor)], opts: CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    vjp_check(build, leaves, None, opts)
}

/// Checks `vᵀJ` for the output of `build` against central differences of
/// that output, contracted with `v` after differencing. Outputs a
/// coordinate does not reach then cancel exactly instead of adding rounding
/// noise. `cotangent = None` requires a scalar output and uses `v = 1`.
///
/// A coordinate whose stencil changes the [`Graph::branch_signature`] on
/// exactly one side is differenced one-sidedly, `(4Δ(h) - Δ(2h)) / 2h`, on
/// the side that stays on the base point's smooth piece.
pub fn vjp_check<F>(
    build: F,
    leaves: &[(String, Tensor)],
    cotangent: Option<&Tensor>,
    opts: CheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::arg("grad_check", format!("step {}", opts.step)));
    }
    let (mut g, vars, out) = evaluate(&build, leaves, opts.phase)?;
    let base_sig = g.branch_signature();
    let y0 = g.value(out).clone();
    let loss = match cotangent {
        None if y0.numel() != 1 => return Err(Error::NonScalarLoss(y0.shape().to_vec())),
        None => out,
        Some(v) => g.weighted_sum(out, v)?,
    };
    let grads = g.backward(loss)?;
    drop(g);
    // v·(y - y0)
    let delta = |y: &Tensor| -> f64 {
        match cotangent {
            None => y.item() - y0.item(),
            Some(v) => y
                .data()
                .iter()
                .zip(y0.data())
                .zip(v.data())
                .map(|((a, b), w)| w * (a - b))
                .sum(),
        }
    };

    let mut report = GradReport {
        step: opts.step,
        leaves: Vec::with_capacity(leaves.len()),
    };
    let h = opts.step;
    let mut probe: Vec<(String, Tensor)> = leaves.to_vec();
    for (li, (name, value)) in leaves.iter().enumerate() {
        let analytic = grads
            .get(vars[li])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(value));
        let n = value.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut entry = LeafError {
            name: name.clone(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            coords_checked: coords.len(),
            one_sided: 0,
        };
        for &c in &coords {
            let orig = value.data()[c];
            let mut at = |offset: f64| -> Result<(f64, bool)> {
                probe[li].1.data_mut()[c] = orig + offset;
                let r = evaluate(&build, &probe, opts.phase);
                probe[li].1.data_mut()[c] = orig;
                let (g, _, o) = r?;
                Ok((delta(g.value(o)), g.branch_signature() == base_sig))
            };
            let (dp, same_p) = at(h)?;
            let (dm, same_m) = at(-h)?;
            let numeric = if same_p == same_m {
                (dp - dm) / (2.0 * h)
            } else {
                // the central stencil crosses a kink: use the second-order
                // one-sided stencil on the base point's side
                let dir = if same_p { 1.0 } else { -1.0 };
                let (d1, d2) = if same_p { (dp, at(2.0 * h)?.0) } else { (dm, at(-2.0 * h)?.0) };
                entry.one_sided += 1;
                dir * (4.0 * d1 - d2) / (2.0 * h)
            };
            let a = analytic.data()[c];
            entry.max_abs_err = entry.max_abs_err.max((a - numeric).abs());
            entry.max_rel_err = entry.max_rel_err.max(rel_err(a, numeric));
        }
        report.leaves.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_layer_gradients_are_exact_to_rounding() {
        let leaves = vec![
            ("x".to_string(), rng::normal(1, "x", &[3, 4], 1.0)),
            ("w".to_string(), rng::normal(1, "w", &[4, 5], 1.0)),
            ("b".to_string(), rng::normal(1, "b", &[5], 1.0)),
        ];
        let weights = rng::normal(1, "proj", &[3, 5], 1.0);
        let report = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.weighted_sum(y, &weights)
            },
            &leaves,
            CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() <= 1e-7, "{report:?}");
        assert_eq!(report.leaves.len(), 3);
    }

    #[test]
    fn wrong_vjp_is_detected() {
        let leaves = vec![("x".to_string(), rng::normal(2, "x", &[4], 1.0))];
        let report = grad_check(
            |g, v| {
                let val = g.value(v[0]).map(|x| x * x);
                let y = g.record("bad_square", &[v[0]], val, Box::new(|x, _, g| vec![Some(g.zip_map(x[0], |g, x| g * x))]));
                Ok(g.sum(y))
            },
            &leaves,
            CheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err() > 0.4);
    }

    #[test]
    fn stencil_next_to_a_kink_goes_one_sided() {
        // relu at 3e-6: the central stencil would straddle zero and give 0.65
        let leaves = vec![("x".to_string(), Tensor::new(vec![2], vec![3e-6, 0.7]).unwrap())];
        let report = grad_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &leaves,
            CheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.one_sided(), 1);
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let leaves = vec![("x".to_string(), Tensor::ones(vec![1]))];
        let bad = CheckOptions { step: 0.0, ..Default::default() };
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), &leaves, bad).is_err());
        let nan = grad_check(
            |g, v| {
                let s = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &leaves,
            CheckOptions::default(),
        );
        assert!(matches!(nan, Err(Error::NonFinite { .. })));
    }
}
