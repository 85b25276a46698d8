//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            checked: self.checked + other.checked,
        }
    }
}

/// Relative error with an absolute floor so that gradients which are zero
/// on both sides do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Scalar probe `Σ yᵢ·rᵢ` with fixed random weights, so every output
/// element contributes to the checked gradient.
fn probe(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    if g.value(y).len() == 1 {
        return Ok(g.scale(y, weights.data()[0]));
    }
    let n = g.value(y).len();
    let flat = g.reshape(y, &[1, n])?;
    let w = g.constant(weights.clone().reshaped(&[n, 1])?);
    g.matmul(flat, w)
}

/// Checks `f` against central differences with step `h` on every element
/// of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> Result<(Graph<f64>, Vec<Var>, Var, Var)> {
        let mut g = Graph::with_options(true, true, seed);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = f(&mut g, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
                Tensor::randn(g.value(y).shape(), 1.0, &mut rng)
            }
        };
        let loss = probe(&mut g, y, &w)?;
        Ok((g, vars, y, loss))
    };

    let (mut g, vars, y, loss) = eval(inputs, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights = Tensor::randn(g.value(y).shape(), 1.0, &mut rng);
    g.backward(loss)?;

    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for (i, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (gp, _, _, lp) = eval(&plus, Some(&weights))?;
            let (gm, _, _, lm) = eval(&minus, Some(&weights))?;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
            let a = analytic.data()[j];
            report = report.merge(GradCheck {
                max_rel_err: rel_err(a, numeric),
                max_abs_err: (a - numeric).abs(),
                checked: 1,
            });
        }
    }
    Ok(report)
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Finite-difference audit of every differentiable primitive on `trials`
/// random small inputs each. Returns the worst result per op.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use super::{AttentionSpec, Target};

    const H: f64 = 1e-3;
    type Case = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

    let cases: Vec<Case> = vec![
        ("matmul", |r| vec![rand_t(&[3, 4], r), rand_t(&[4, 2], r)], |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", |r| vec![rand_t(&[3, 4], r), rand_t(&[2, 4], r)], |g, v| g.matmul_nt(v[0], v[1])),
        ("transpose", |r| vec![rand_t(&[3, 2], r)], |g, v| g.transpose(v[0])),
        ("add", |r| vec![rand_t(&[2, 3], r), rand_t(&[2, 3], r)], |g, v| g.add(v[0], v[1])),
        ("add_row", |r| vec![rand_t(&[3, 4], r), rand_t(&[4], r)], |g, v| g.add_row(v[0], v[1])),
        ("scale", |r| vec![rand_t(&[2, 3], r)], |g, v| Ok(g.scale(v[0], 0.37))),
        (
            "div_scalar",
            |r| {
                let mut s = rand_t(&[1], r);
                s.data_mut()[0] = s.data()[0].abs() + 0.5;
                vec![rand_t(&[2, 3], r), s]
            },
            |g, v| g.div_scalar(v[0], v[1]),
        ),
        (
            "reshape",
            |r| vec![rand_t(&[2, 6], r)],
            |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                Ok(g.gelu(y))
            },
        ),
        ("concat_rows", |r| vec![rand_t(&[2, 3], r), rand_t(&[1, 3], r)], |g, v| g.concat_rows(&[v[0], v[1], v[0]])),
        ("slice_rows", |r| vec![rand_t(&[4, 3], r)], |g, v| g.slice_rows(v[0], 1, 3)),
        ("embedding", |r| vec![rand_t(&[5, 3], r)], |g, v| g.embedding(v[0], &[4, 0, 4, 2])),
        ("gelu", |r| vec![rand_t(&[3, 4], r)], |g, v| Ok(g.gelu(v[0]))),
        ("dropout", |r| vec![rand_t(&[4, 5], r)], |g, v| Ok(g.dropout(v[0], 0.3))),
        ("softmax", |r| vec![rand_t(&[3, 5], r)], |g, v| Ok(g.softmax(v[0]))),
        (
            "layer_norm",
            |r| vec![rand_t(&[2, 4], r), rand_t(&[4], r), rand_t(&[4], r)],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12),
        ),
        (
            "masked_mean_pool",
            |r| vec![rand_t(&[6, 3], r)],
            |g, v| g.masked_mean_pool(v[0], &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0], 3),
        ),
        ("l2_normalize", |r| vec![rand_t(&[3, 4], r)], |g, v| g.l2_normalize(v[0])),
        (
            "cross_entropy",
            |r| vec![rand_t(&[4, 5], r)],
            |g, v| g.cross_entropy(v[0], &Target::Hard { classes: vec![1, 0, 4, 3], ignore: Some(0) }),
        ),
        (
            "soft_cross_entropy",
            |r| vec![rand_t(&[3, 4], r)],
            |g, v| {
                let target =
                    Tensor::from_f64(&[3, 4], &[0.1, 0.2, 0.3, 0.4, 0.0, 1.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25])?;
                g.cross_entropy(v[0], &Target::Soft(target))
            },
        ),
        (
            "attention",
            |r| vec![rand_t(&[2 * 3, 4], r), rand_t(&[2 * 4, 4], r), rand_t(&[2 * 4, 4], r)],
            |g, v| {
                let spec = AttentionSpec {
                    batch: 2,
                    q_len: 3,
                    k_len: 4,
                    heads: 2,
                    key_mask: vec![true, true, true, false, true, true, false, false],
                    causal: false,
                };
                g.attention(v[0], v[1], v[2], spec)
            },
        ),
        (
            "causal_attention",
            |r| vec![rand_t(&[4, 4], r), rand_t(&[4, 4], r), rand_t(&[4, 4], r)],
            |g, v| {
                let spec =
                    AttentionSpec { batch: 1, q_len: 4, k_len: 4, heads: 2, key_mask: vec![true; 4], causal: true };
                g.attention(v[0], v[1], v[2], spec)
            },
        ),
        ("sum", |r| vec![rand_t(&[2, 3], r)], |g, v| Ok(g.sum(v[0]))),
        ("mean", |r| vec![rand_t(&[2, 3], r)], |g, v| Ok(g.mean(v[0]))),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, make, f) in cases {
        let mut worst = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
        for t in 0..trials {
            let inputs = make(&mut rng);
            worst = worst.merge(check(&inputs, H, seed.wrapping_add(t as u64), f)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}
