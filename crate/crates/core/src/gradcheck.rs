//! Central finite-difference verification of backward rules.

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares backward-pass gradients of `f` against central differences for
/// every entry of every parameter.
///
/// `f` builds a scalar loss on a graph borrowing the parameters. It must be
/// deterministic; a function that returns different values on two identical
/// evaluations is rejected as an invalid check. The error of a tensor is
/// `max|analytic − numeric| / max(max|analytic|, max|numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    grad_check_sampled(params, f, eps, usize::MAX)
}

/// Like [`grad_check`] but probes at most `max_entries` evenly strided
/// entries per tensor.
pub fn grad_check_sampled<F>(
    params: &ParamStore,
    f: F,
    eps: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store, Mode::Eval);
        let loss = f(&mut g)?;
        Ok(g.value(loss).data()[0])
    };

    let (analytic, base) = {
        let mut g = Graph::with_params(params, Mode::Eval);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = (0..params.len())
            .map(|i| {
                grads
                    .param(i)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.tensor(i).numel()])
            })
            .collect();
        (analytic, g.value(loss).data()[0])
    };
    if eval(params)?.to_bits() != base.to_bits() {
        return Err(Error::Contract(
            "gradient check needs a deterministic function (is dropout enabled?)".into(),
        ));
    }

    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    for (p, analytic) in analytic.iter().enumerate() {
        let n = analytic.len();
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut max_diff: f64 = 0.0;
        let mut max_mag: f64 = 1e-8;
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = work.tensor(p).data()[i];
            work.tensor_mut(p).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.tensor_mut(p).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.tensor_mut(p).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            max_diff = max_diff.max((analytic[i] - numeric).abs());
            max_mag = max_mag.max(analytic[i].abs()).max(numeric.abs());
            checked += 1;
        }
        groups.push(GroupError {
            name: params.name(p).to_string(),
            checked,
            max_rel_error: max_diff / max_mag,
        });
    }
    Ok(GradCheckReport { groups })
}

#[cfg(test)]
mod tests {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Reduction, SpatialMap};
    use crate::tensor::Tensor;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, shape) in shapes {
            p.insert(*name, random(rng, shape));
        }
        p
    }

    /// Weighted sum of outputs so every output entry gets a distinct cotangent.
    fn probe(g: &mut Graph, y: Var) -> Result<Var> {
        let n = g.value(y).numel();
        let w = Tensor::new(
            g.shape(y).to_vec(),
            (0..n).map(|i| ((i as f64) * 0.713).sin() + 0.1).collect(),
        )?;
        let w = g.constant(w);
        let prod = g.mul(y, w)?;
        Ok(g.sum(prod))
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = store(&mut rng, &[("a", &[3, 4]), ("x", &[4, 2])]);
        let r = grad_check(
            &p,
            |g| {
                let (a, x) = (g.param(0), g.param(1));
                let y = g.matmul(a, x)?;
                // loss linear in each argument separately
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-9, "{r:?}");
    }

    #[test]
    fn primitives_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = store(
            &mut rng,
            &[
                ("a", &[3, 4]),
                ("b", &[4, 5]),
                ("bias", &[5]),
                ("gain", &[5]),
                ("img", &[2, 5, 5]),
                ("w3", &[3]),
            ],
        );
        let map = Rc::new(SpatialMap {
            in_h: 5,
            in_w: 5,
            out_h: 2,
            out_w: 2,
            taps: vec![vec![(0, 0.5), (6, 0.5)], vec![(3, 1.0)], vec![(20, 0.25), (12, 0.75)], vec![(24, 1.0)]],
        });
        let r = grad_check(
            &p,
            |g| {
                let (a, b, bias, gain) = (g.param(0), g.param(1), g.param(2), g.param(3));
                let (img, w3) = (g.param(4), g.param(5));
                let ab = g.matmul(a, b)?;
                let h = g.add_bias(ab, bias)?;
                let s1 = g.swish(h);
                let s2 = g.sigmoid(h);
                let m = g.mul(s1, s2)?;
                let sm = g.softmax(m, 1)?;
                let sm0 = g.softmax(m, 0)?;
                let mixed = g.add(sm, sm0)?;
                let ln = g.layer_norm(mixed, gain, bias, 1e-5)?;
                let gated = g.mul_last(ln, gain)?;
                let t = g.transpose(gated)?;
                let sl = g.slice_cols(t, 1, 2)?;
                let cat = g.concat(&[sl, sl], 1)?;
                let sc = g.scale(cat, 0.7);
                let mut acc = probe(g, sc)?;

                let patches = g.im2col(img, 3, 2, 1)?;
                let pr = probe(g, patches)?;
                acc = g.add(acc, pr)?;
                let rs = g.resample(img, map.clone())?;
                let pr = probe(g, rs)?;
                acc = g.add(acc, pr)?;

                let pos = g.relu(w3);
                let norm = g.normalize_sum(pos, 1e-4);
                let flat = g.reshape(img, &[2, 25])?;
                let parts = [
                    g.slice_cols(flat, 0, 5)?,
                    g.slice_cols(flat, 5, 5)?,
                    g.slice_cols(flat, 10, 5)?,
                ];
                let ws = g.weighted_sum(norm, &parts)?;
                let pr = probe(g, ws)?;
                acc = g.add(acc, pr)?;

                let emb = g.embedding(b, &[0, 2, 2, 3])?;
                let ce = g.cross_entropy(emb, &[1, 4, 0, 2], &[true, true, false, true], Reduction::Mean)?;
                g.add(acc, ce)
            },
            1e-5,
        )
        .unwrap();
        for grp in &r.groups {
            // relu kink is the only non-smooth point; w3 is drawn away from 0
            assert!(grp.max_rel_error < 1e-4, "{grp:?}");
        }
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = store(&mut rng, &[("x", &[4, 6]), ("w", &[6, 9])]);
        let r = grad_check(
            &p,
            |g| {
                let (x, w) = (g.param(0), g.param(1));
                let logits = g.matmul(x, w)?;
                g.cross_entropy(logits, &[8, 0, 3, 3], &[true; 4], Reduction::Mean)
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-5, "{r:?}");
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = store(
            &mut rng,
            &[("x", &[5, 3]), ("w1", &[3, 8]), ("b1", &[8]), ("w2", &[8, 2]), ("b2", &[2])],
        );
        let r = grad_check(
            &p,
            |g| {
                let x = g.param(0);
                let w1 = g.param(1);
                let h = g.matmul(x, w1)?;
                let b1 = g.param(2);
                let h = g.add_bias(h, b1)?;
                let h = g.sigmoid(h);
                let w2 = g.param(3);
                let y = g.matmul(h, w2)?;
                let b2 = g.param(4);
                let y = g.add_bias(y, b2)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }

    #[test]
    fn detects_corrupted_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = store(&mut rng, &[("a", &[2, 3]), ("b", &[3, 2])]);
        let r = grad_check(
            &p,
            |g| {
                g.set_fault(Some(crate::autodiff::Fault::MatmulLhsScale(1.5)));
                let (a, b) = (g.param(0), g.param(1));
                let c = g.matmul(a, b)?;
                let sq = g.mul(c, c)?;
                Ok(g.sum(sq))
            },
            1e-5,
        )
        .unwrap();
        assert!(r.groups[0].max_rel_error > 0.1);
        assert!(r.groups[1].max_rel_error < 1e-6);
    }

    #[test]
    fn rejects_nondeterministic_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = store(&mut rng, &[("a", &[4])]);
        let calls = std::cell::Cell::new(0u32);
        let r = grad_check(
            &p,
            |g| {
                calls.set(calls.get() + 1);
                let a = g.param(0);
                let s = g.scale(a, calls.get() as f64);
                Ok(g.sum(s))
            },
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
