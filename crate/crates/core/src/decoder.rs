//! Transformer decoder: token embedding with sinusoidal positions, then
//! post-norm layers of masked self-attention, cross-attention over the
//! encoder memory and a position-wise feed-forward block.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::config::DecoderConfig;
use crate::error::{Error, Result};
use crate::metrics::FindingLabel;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::xavier_init;

/// Sinusoidal table: `PE[p,2j] = sin(p / 10000^(2j/d))`,
/// `PE[p,2j+1] = cos(p / 10000^(2j/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = vec![0.0; max_len * d_model];
    for p in 0..max_len {
        for j in 0..d_model / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * j as f64 / d_model as f64);
            data[p * d_model + 2 * j] = angle.sin();
            data[p * d_model + 2 * j + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// Lower-triangular mask: query `i` may see keys `0..=i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

/// `softmax(P·Rᵀ/√d_r)·S`. `allowed` is a row-major `[Tq,Tk]` mask; `None`
/// lets every query see every key. Returns `(output, weights)`.
pub fn attention(
    g: &mut Graph,
    p: Var,
    r: Var,
    s: Var,
    allowed: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (d_r, tk, tv) = (g.shape(p)[1], g.shape(r)[0], g.shape(s)[0]);
    if g.shape(r)[1] != d_r || tk != tv {
        return Err(Error::dim("attention", g.shape(r), g.shape(s)));
    }
    let rt = g.transpose(r)?;
    let scores = g.matmul(p, rt)?;
    let scores = g.scale(scores, 1.0 / (d_r as f64).sqrt());
    let weights = match allowed {
        Some(mask) => g.masked_softmax(scores, mask)?,
        None => g.softmax(scores, 1)?,
    };
    let out = g.matmul(weights, s)?;
    Ok((out, weights))
}

/// Projection matrices of one multi-head attention block, each `[d,d]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
}

/// Multi-head attention. Head `i` uses columns `i·d_h .. (i+1)·d_h` of the
/// query/key/value projections; head outputs are concatenated and projected
/// by `output`. Per-head weights are appended to `trace` when given.
pub fn multi_head(
    g: &mut Graph,
    queries: Var,
    keys: Var,
    w: &HeadWeights,
    n_heads: usize,
    allowed: Option<&[bool]>,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Var> {
    let d = g.shape(queries)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let q = g.matmul(queries, w.query)?;
    let k = g.matmul(keys, w.key)?;
    let v = g.matmul(keys, w.value)?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, dh)?,
                g.slice_cols(k, h * dh, dh)?,
                g.slice_cols(v, h * dh, dh)?,
            )
        };
        let (out, weights) = attention(g, qh, kh, vh, allowed)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(g.value(weights).clone());
        }
        heads.push(out);
    }
    let joined = if n_heads == 1 { heads[0] } else { g.concat(&heads, 1)? };
    g.matmul(joined, w.output)
}

/// `relu(z·V1 + c1)·V2 + c2`, row by row.
pub fn ffn(g: &mut Graph, z: Var, v1: Var, c1: Var, v2: Var, c2: Var) -> Result<Var> {
    let h = g.matmul(z, v1)?;
    let h = g.add_bias(h, c1)?;
    let h = g.relu(h);
    let y = g.matmul(h, v2)?;
    g.add_bias(y, c2)
}

/// Every parameter handle of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerWeights {
    pub self_attn: HeadWeights,
    pub cross_attn: HeadWeights,
    pub norms: [(Var, Var); 3],
    pub ff: [Var; 4],
}

impl LayerWeights {
    pub fn from_graph(g: &mut Graph, layer: usize) -> Self {
        let mut heads = |kind: &str| HeadWeights {
            query: g.param_named(&format!("dec.{layer}.{kind}.q")),
            key: g.param_named(&format!("dec.{layer}.{kind}.k")),
            value: g.param_named(&format!("dec.{layer}.{kind}.v")),
            output: g.param_named(&format!("dec.{layer}.{kind}.o")),
        };
        let self_attn = heads("self");
        let cross_attn = heads("cross");
        let norms = [1, 2, 3].map(|i| {
            (
                g.param_named(&format!("dec.{layer}.ln{i}.g")),
                g.param_named(&format!("dec.{layer}.ln{i}.b")),
            )
        });
        let ff = ["w1", "b1", "w2", "b2"].map(|n| g.param_named(&format!("dec.{layer}.ff.{n}")));
        LayerWeights {
            self_attn,
            cross_attn,
            norms,
            ff,
        }
    }
}

/// Attention maps recorded during a forward pass, indexed `[layer][head]`.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub self_attn: Vec<Vec<Tensor>>,
    pub cross_attn: Vec<Vec<Tensor>>,
}

fn residual_norm(
    g: &mut Graph,
    x: Var,
    sub: Var,
    norm: (Var, Var),
    cfg: &DecoderConfig,
) -> Result<Var> {
    let sub = g.dropout(sub, cfg.dropout)?;
    let sum = g.add(x, sub)?;
    g.layer_norm(sum, norm.0, norm.1, cfg.layer_norm_eps)
}

/// One post-norm layer: `LN(x + Drop(Sub(x)))` for masked self-attention,
/// cross-attention over `memory`, then the feed-forward block.
pub fn decoder_layer(
    g: &mut Graph,
    x: Var,
    memory: Var,
    w: &LayerWeights,
    cfg: &DecoderConfig,
    trace: Option<&mut AttentionTrace>,
) -> Result<Var> {
    let t = g.shape(x)[0];
    if t > cfg.max_len {
        return Err(Error::Length {
            len: t,
            max_len: cfg.max_len,
        });
    }
    let (mut self_maps, mut cross_maps) = (Vec::new(), Vec::new());
    let tracing = trace.is_some();
    let mask = causal_mask(t);
    let a = multi_head(
        g,
        x,
        x,
        &w.self_attn,
        cfg.n_heads,
        Some(&mask),
        tracing.then_some(&mut self_maps),
    )?;
    let x = residual_norm(g, x, a, w.norms[0], cfg)?;
    let c = multi_head(
        g,
        x,
        memory,
        &w.cross_attn,
        cfg.n_heads,
        None,
        tracing.then_some(&mut cross_maps),
    )?;
    let x = residual_norm(g, x, c, w.norms[1], cfg)?;
    let f = ffn(g, x, w.ff[0], w.ff[1], w.ff[2], w.ff[3])?;
    let x = residual_norm(g, x, f, w.norms[2], cfg)?;
    if let Some(tr) = trace {
        tr.self_attn.push(self_maps);
        tr.cross_attn.push(cross_maps);
    }
    Ok(x)
}

/// Decoder stack plus output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    cfg: DecoderConfig,
    pe: Tensor,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(Error::Config("decoder vocab_size must be set".into()));
        }
        let pe = positional_encoding(cfg.max_len, cfg.d_model)?;
        Ok(Decoder { cfg, pe })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let (d, v, ff) = (self.cfg.d_model, self.cfg.vocab_size, self.cfg.ff_dim());
        store.insert("dec.embed", xavier_init(&[v, d], rng));
        for l in 0..self.cfg.n_layers {
            for kind in ["self", "cross"] {
                for m in ["q", "k", "v", "o"] {
                    store.insert(format!("dec.{l}.{kind}.{m}"), xavier_init(&[d, d], rng));
                }
            }
            for i in 1..=3 {
                store.insert(format!("dec.{l}.ln{i}.g"), Tensor::ones(&[d]));
                store.insert(format!("dec.{l}.ln{i}.b"), Tensor::zeros(&[d]));
            }
            store.insert(format!("dec.{l}.ff.w1"), xavier_init(&[d, ff], rng));
            store.insert(format!("dec.{l}.ff.b1"), Tensor::zeros(&[ff]));
            store.insert(format!("dec.{l}.ff.w2"), xavier_init(&[ff, d], rng));
            store.insert(format!("dec.{l}.ff.b2"), Tensor::zeros(&[d]));
        }
        store.insert("dec.out.w", xavier_init(&[d, v], rng));
        store.insert("dec.out.b", Tensor::zeros(&[v]));
        if self.cfg.finding_probe {
            let n = FindingLabel::ALL.len();
            store.insert("dec.probe.w", xavier_init(&[d, n], rng));
            store.insert("dec.probe.b", Tensor::zeros(&[n]));
        }
    }

    /// Next-token logits `[T, vocab_size]` for a token prefix starting with CLS.
    pub fn logits(&self, g: &mut Graph, tokens: &[usize], memory: Var) -> Result<Var> {
        self.forward(g, tokens, memory, None)
    }

    /// As [`Decoder::logits`], also recording every attention map.
    pub fn logits_traced(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        memory: Var,
        trace: &mut AttentionTrace,
    ) -> Result<Var> {
        self.forward(g, tokens, memory, Some(trace))
    }

    fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        memory: Var,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let (t, d) = (tokens.len(), self.cfg.d_model);
        if t > self.cfg.max_len {
            return Err(Error::Length {
                len: t,
                max_len: self.cfg.max_len,
            });
        }
        let table = g.param_named("dec.embed");
        let emb = g.embedding(table, tokens)?;
        let emb = g.scale(emb, (d as f64).sqrt());
        let pe = Tensor::new(vec![t, d], self.pe.data()[..t * d].to_vec())?;
        let pe = g.constant(pe);
        let x = g.add(emb, pe)?;
        let mut x = g.dropout(x, self.cfg.dropout)?;
        for l in 0..self.cfg.n_layers {
            let w = LayerWeights::from_graph(g, l);
            x = decoder_layer(g, x, memory, &w, &self.cfg, trace.as_deref_mut())?;
        }
        let w = g.param_named("dec.out.w");
        let b = g.param_named("dec.out.b");
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// Per-finding logits `[1, n_labels]` from mean-pooled memory. Requires
    /// the probe to be enabled in the config.
    pub fn probe_logits(&self, g: &mut Graph, memory: Var) -> Result<Var> {
        if !self.cfg.finding_probe {
            return Err(Error::Config("finding probe is disabled".into()));
        }
        let n = g.shape(memory)[0];
        let avg = g.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let pooled = g.matmul(avg, memory)?;
        let w = g.param_named("dec.probe.w");
        let b = g.param_named("dec.probe.b");
        let y = g.matmul(pooled, w)?;
        g.add_bias(y, b)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Mode;
    use crate::gradcheck::grad_check;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // plain reference helpers, independent of the graph
    fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn ref_attention(q: &[f64], k: &[f64], v: &[f64], tq: usize, tk: usize, dr: usize, dv: usize, causal: bool) -> Vec<f64> {
        let mut out = vec![0.0; tq * dv];
        for i in 0..tq {
            let lim = if causal { i + 1 } else { tk };
            let s: Vec<f64> = (0..lim)
                .map(|j| (0..dr).map(|c| q[i * dr + c] * k[j * dr + c]).sum::<f64>() / (dr as f64).sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..lim {
                for c in 0..dv {
                    out[i * dv + c] += e[j] / z * v[j * dv + c];
                }
            }
        }
        out
    }

    fn cols(x: &[f64], rows: usize, width: usize, start: usize, len: usize) -> Vec<f64> {
        (0..rows).flat_map(|r| x[r * width + start..r * width + start + len].to_vec()).collect()
    }

    fn ref_mha(x: &[f64], mem: &[f64], tq: usize, tk: usize, d: usize, heads: usize, w: [&[f64]; 4], causal: bool) -> Vec<f64> {
        let dh = d / heads;
        let q = mm(x, w[0], tq, d, d);
        let k = mm(mem, w[1], tk, d, d);
        let v = mm(mem, w[2], tk, d, d);
        let mut joined = vec![0.0; tq * d];
        for h in 0..heads {
            let o = ref_attention(
                &cols(&q, tq, d, h * dh, dh),
                &cols(&k, tk, d, h * dh, dh),
                &cols(&v, tk, d, h * dh, dh),
                tq,
                tk,
                dh,
                dh,
                causal,
            );
            for r in 0..tq {
                joined[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
        }
        mm(&joined, w[3], tq, d, d)
    }

    fn ref_ln(x: &[f64], d: usize, g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
        x.chunks(d)
            .flat_map(|row| {
                let mu = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| g[i] * (v - mu) / (var + eps).sqrt() + b[i])
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(16, 8).unwrap();
        for j in 0..4 {
            assert_eq!(pe.at(&[0, 2 * j]), 0.0);
            assert_eq!(pe.at(&[0, 2 * j + 1]), 1.0);
        }
        assert!((pe.at(&[1, 0]) - 0.841471).abs() < 1e-6);
        assert!(matches!(positional_encoding(4, 7), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn positional_pairs_lie_on_unit_circle(p in 0usize..512, half in 1usize..32) {
            let d = 2 * half;
            let pe = positional_encoding(p + 1, d).unwrap();
            for j in 0..half {
                let (s, c) = (pe.at(&[p, 2 * j]), pe.at(&[p, 2 * j + 1]));
                prop_assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_key_returns_its_value() {
        let mut g = Graph::new(Mode::Eval);
        let p = g.constant(mat(3, 2, &[1.0, -4.0, 0.5, 2.0, 9.0, 0.0]));
        let r = g.constant(mat(1, 2, &[0.3, 0.7]));
        let s = g.constant(mat(1, 3, &[5.0, 6.0, 7.0]));
        let (out, _) = attention(&mut g, p, r, s, None).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0, 5.0, 6.0, 7.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn attention_orthogonal_query_averages_values() {
        let mut g = Graph::new(Mode::Eval);
        let p = g.constant(mat(1, 2, &[0.0, 1.0]));
        let r = g.constant(mat(3, 2, &[1.0, 0.0, 2.0, 0.0, -3.0, 0.0]));
        let s = g.constant(mat(3, 2, &[1.0, 10.0, 2.0, 20.0, 6.0, 30.0]));
        let (out, _) = attention(&mut g, p, r, s, None).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 3.0).abs() < 1e-15 && (o[1] - 20.0).abs() < 1e-14);
    }

    #[test]
    fn attention_two_by_two_by_hand() {
        let mut g = Graph::new(Mode::Eval);
        let p = g.constant(mat(1, 2, &[1.0, 0.0]));
        let r = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let s = g.constant(mat(2, 2, &[2.0, -1.0, 4.0, 3.0]));
        let (out, w) = attention(&mut g, p, r, s, None).unwrap();
        let e = (1.0 / 2f64.sqrt()).exp();
        let (a, b) = (e / (e + 1.0), 1.0 / (e + 1.0));
        let wv = g.value(w).data();
        assert!((wv[0] - a).abs() < 1e-15 && (wv[1] - b).abs() < 1e-15);
        let o = g.value(out).data();
        assert!((o[0] - (2.0 * a + 4.0 * b)).abs() < 1e-14);
        assert!((o[1] - (-a + 3.0 * b)).abs() < 1e-14);
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let mut g = Graph::new(Mode::Eval);
        let p = g.constant(mat(1, 1, &[1.0]));
        let r = g.constant(mat(2, 1, &[1.0, 2.0]));
        let (_, s) = (r, r);
        assert!(matches!(attention(&mut g, p, r, s, Some(&[false, false])), Err(Error::Contract(_))));
    }

    fn heads(g: &mut Graph, t: [Tensor; 4]) -> HeadWeights {
        let [q, k, v, o] = t.map(|t| g.constant(t));
        HeadWeights {
            query: q,
            key: k,
            value: v,
            output: o,
        }
    }

    #[test]
    fn single_head_with_identity_projections_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (xt, mt) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4));
        let mut g = Graph::new(Mode::Eval);
        let (x, m) = (g.constant(xt), g.constant(mt));
        let id = Tensor::identity(4);
        let w = heads(&mut g, [id.clone(), id.clone(), id.clone(), id]);
        let y = multi_head(&mut g, x, m, &w, 1, None, None).unwrap();
        let (plain, _) = attention(&mut g, x, m, m, None).unwrap();
        assert_eq!(g.value(y), g.value(plain));

        let z = Tensor::zeros(&[4, 4]);
        let id = Tensor::identity(4);
        let w0 = heads(&mut g, [id.clone(), id.clone(), id, z]);
        let y0 = multi_head(&mut g, x, m, &w0, 1, None, None).unwrap();
        assert!(g.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_heads_match_per_head_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (xt, mt) = (random(&mut rng, 3, 4), random(&mut rng, 6, 4));
        let ws: [Tensor; 4] = std::array::from_fn(|_| random(&mut rng, 4, 4));
        let expected = ref_mha(
            xt.data(),
            mt.data(),
            3,
            6,
            4,
            2,
            [ws[0].data(), ws[1].data(), ws[2].data(), ws[3].data()],
            false,
        );
        let mut g = Graph::new(Mode::Eval);
        let (x, m) = (g.constant(xt), g.constant(mt));
        let w = heads(&mut g, ws);
        let y = multi_head(&mut g, x, m, &w, 2, None, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(multi_head(&mut g, x, m, &w, 3, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn ffn_cases() {
        let mut g = Graph::new(Mode::Eval);
        let z = g.constant(mat(2, 2, &[1.0, 2.0, -3.0, 0.5]));
        let zero = |g: &mut Graph, s: &[usize]| g.constant(Tensor::zeros(s));
        let (v1, c1, v2) = (zero(&mut g, &[2, 3]), zero(&mut g, &[3]), zero(&mut g, &[3, 2]));
        let c2 = g.constant(Tensor::new(vec![2], vec![0.25, -7.0]).unwrap());
        let y = ffn(&mut g, z, v1, c1, v2, c2).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0, 0.25, -7.0]);

        // 1x2 input, positive pre-activations: y = (z·V1 + c1)·V2 + c2
        let z = g.constant(mat(1, 2, &[1.0, 2.0]));
        let v1 = g.constant(mat(2, 2, &[1.0, 0.0, 1.0, 3.0]));
        let c1 = g.constant(Tensor::new(vec![2], vec![0.5, 1.0]).unwrap());
        let v2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let c2 = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let y = ffn(&mut g, z, v1, c1, v2, c2).unwrap();
        // hidden = [1+2+0.5, 6+1] = [3.5, 7]
        assert_eq!(g.value(y).data(), &[3.5, 15.0]);
    }

    #[test]
    fn ffn_is_row_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zt = random(&mut rng, 4, 3);
        let params: Vec<Tensor> = vec![random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 5, 3), random(&mut rng, 1, 3)];
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::new(vec![4, 3], perm.iter().flat_map(|&r| zt.row(r).to_vec()).collect()).unwrap();
        let mut g = Graph::new(Mode::Eval);
        let ps: Vec<Var> = params
            .iter()
            .map(|t| {
                let t = if t.shape()[0] == 1 { t.reshaped(&[t.numel()]).unwrap() } else { t.clone() };
                g.constant(t)
            })
            .collect();
        let z = g.constant(zt);
        let zp = g.constant(permuted);
        let y = ffn(&mut g, z, ps[0], ps[1], ps[2], ps[3]).unwrap();
        let yp = ffn(&mut g, zp, ps[0], ps[1], ps[2], ps[3]).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(g.value(yp).row(i), g.value(y).row(r));
        }
    }

    fn tiny_cfg(d: usize, layers: usize, heads: usize, vocab: usize) -> DecoderConfig {
        DecoderConfig {
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            max_len: 16,
            vocab_size: vocab,
            dropout: 0.0,
            ..DecoderConfig::default()
        }
    }

    fn tiny_store(cfg: &DecoderConfig, seed: u64) -> (Decoder, ParamStore) {
        let dec = Decoder::new(cfg.clone()).unwrap();
        let mut p = ParamStore::new();
        dec.init_params(&mut p, &mut ChaCha8Rng::seed_from_u64(seed));
        // nonzero biases and gains so every parameter is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for i in 0..p.len() {
            if p.name(i).contains(".ln") || p.name(i).ends_with(".b1") || p.name(i).ends_with(".b2") || p.name(i).ends_with(".b") {
                for v in p.tensor_mut(i).data_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
        (dec, p)
    }

    #[test]
    fn zero_sublayers_leave_three_layer_norms() {
        let cfg = tiny_cfg(4, 1, 2, 5);
        let (_, mut p) = tiny_store(&cfg, 1);
        for name in ["dec.0.self.o", "dec.0.cross.o", "dec.0.ff.w1", "dec.0.ff.b1", "dec.0.ff.w2", "dec.0.ff.b2"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (xt, mt) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4));
        let mut expected = xt.data().to_vec();
        for i in 1..=3 {
            let (gn, bn) = (p.get(&format!("dec.0.ln{i}.g")).unwrap(), p.get(&format!("dec.0.ln{i}.b")).unwrap());
            expected = ref_ln(&expected, 4, gn.data(), bn.data(), cfg.layer_norm_eps);
        }
        let mut g = Graph::with_params(&p, Mode::Eval);
        let (x, m) = (g.constant(xt), g.constant(mt));
        let w = LayerWeights::from_graph(&mut g, 0);
        let y = decoder_layer(&mut g, x, m, &w, &cfg, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_matches_scripted_composition() {
        let cfg = tiny_cfg(4, 1, 2, 5);
        let (_, p) = tiny_store(&cfg, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (xt, mt) = (random(&mut rng, 2, 4), random(&mut rng, 3, 4));
        let t = |n: &str| p.get(n).unwrap().data();
        let eps = cfg.layer_norm_eps;
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();

        let x = xt.data().to_vec();
        let sa = ref_mha(&x, &x, 2, 2, 4, 2, [t("dec.0.self.q"), t("dec.0.self.k"), t("dec.0.self.v"), t("dec.0.self.o")], true);
        let x = ref_ln(&add(&x, &sa), 4, t("dec.0.ln1.g"), t("dec.0.ln1.b"), eps);
        let ca = ref_mha(&x, mt.data(), 2, 3, 4, 2, [t("dec.0.cross.q"), t("dec.0.cross.k"), t("dec.0.cross.v"), t("dec.0.cross.o")], false);
        let x = ref_ln(&add(&x, &ca), 4, t("dec.0.ln2.g"), t("dec.0.ln2.b"), eps);
        let ff = cfg.ff_dim();
        let mut h = mm(&x, t("dec.0.ff.w1"), 2, 4, ff);
        for (i, v) in h.iter_mut().enumerate() {
            *v = (*v + t("dec.0.ff.b1")[i % ff]).max(0.0);
        }
        let mut f = mm(&h, t("dec.0.ff.w2"), 2, ff, 4);
        for (i, v) in f.iter_mut().enumerate() {
            *v += t("dec.0.ff.b2")[i % 4];
        }
        let expected = ref_ln(&add(&x, &f), 4, t("dec.0.ln3.g"), t("dec.0.ln3.b"), eps);

        let mut g = Graph::with_params(&p, Mode::Eval);
        let (x, m) = (g.constant(xt), g.constant(mt));
        let w = LayerWeights::from_graph(&mut g, 0);
        let y = decoder_layer(&mut g, x, m, &w, &cfg, None).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn run_logits(dec: &Decoder, p: &ParamStore, tokens: &[usize], mem: &Tensor) -> Tensor {
        let mut g = Graph::with_params(p, Mode::Eval);
        let m = g.constant(mem.clone());
        let y = dec.logits(&mut g, tokens, m).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn logits_shape_causality_and_determinism() {
        let cfg = tiny_cfg(8, 2, 2, 7);
        let (dec, p) = tiny_store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mem = random(&mut rng, 5, 8);
        let tokens = [1, 4, 5, 6, 2];
        let y = run_logits(&dec, &p, &tokens, &mem);
        assert_eq!(y.shape(), &[5, 7]);
        assert_eq!(y, run_logits(&dec, &p, &tokens, &mem));
        for t in 0..5 {
            let mut changed = tokens;
            for c in changed.iter_mut().skip(t + 1) {
                *c = (*c + 3) % 7;
            }
            let z = run_logits(&dec, &p, &changed, &mem);
            assert_eq!(y.data()[..(t + 1) * 7], z.data()[..(t + 1) * 7]);
        }
    }

    #[test]
    fn sublayer_one_is_causal() {
        let cfg = tiny_cfg(4, 1, 2, 5);
        let (_, p) = tiny_store(&cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xt = random(&mut rng, 4, 4);
        let first = |x: Tensor| {
            let mut g = Graph::with_params(&p, Mode::Eval);
            let x = g.constant(x);
            let w = LayerWeights::from_graph(&mut g, 0);
            let y = multi_head(&mut g, x, x, &w.self_attn, 2, Some(&causal_mask(4)), None).unwrap();
            g.value(y).clone()
        };
        let base = first(xt.clone());
        let mut changed = xt;
        changed.set(&[2, 1], 5.0);
        let after = first(changed);
        assert_eq!(base.data()[..8], after.data()[..8]);
        assert_ne!(base.data()[8..], after.data()[8..]);
    }

    #[test]
    fn attention_rows_normalised_and_causal() {
        let cfg = tiny_cfg(8, 2, 4, 9);
        let (dec, p) = tiny_store(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mem = random(&mut rng, 6, 8);
        let mut g = Graph::with_params(&p, Mode::Eval);
        let m = g.constant(mem);
        let mut trace = AttentionTrace::default();
        dec.logits_traced(&mut g, &[1, 3, 8, 4], m, &mut trace).unwrap();
        assert_eq!(trace.self_attn.len(), 2);
        for maps in trace.self_attn.iter().chain(&trace.cross_attn) {
            assert_eq!(maps.len(), 4);
            for w in maps {
                let (r, c) = w.dims2().unwrap();
                for i in 0..r {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                if c == r {
                    for i in 0..r {
                        assert!(w.row(i)[i + 1..].iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn logits_errors() {
        let cfg = tiny_cfg(4, 1, 1, 5);
        let (dec, p) = tiny_store(&cfg, 1);
        let mut g = Graph::with_params(&p, Mode::Eval);
        let m = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(dec.logits(&mut g, &[1, 9], m), Err(Error::Vocabulary(_))));
        let long = vec![1; 17];
        assert!(matches!(dec.logits(&mut g, &long, m), Err(Error::Length { len: 17, max_len: 16 })));
    }

    #[test]
    fn small_decoder_gradients() {
        let cfg = tiny_cfg(8, 1, 2, 6);
        let (dec, mut p) = tiny_store(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        p.insert("memory", random(&mut rng, 3, 8));
        let r = grad_check(
            &p,
            |g| {
                let m = g.param_named("memory");
                let y = dec.logits(g, &[1, 4, 5, 3], m)?;
                g.cross_entropy(y, &[4, 5, 3, 2], &[true; 4], crate::autodiff::Reduction::Mean)
            },
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn probe_shape_and_disabled_error() {
        let mut cfg = tiny_cfg(4, 1, 1, 5);
        let (dec, p) = tiny_store(&cfg, 1);
        let mut g = Graph::with_params(&p, Mode::Eval);
        let m = g.constant(Tensor::ones(&[3, 4]));
        assert!(dec.probe_logits(&mut g, m).is_err());
        cfg.finding_probe = true;
        let (dec, p) = tiny_store(&cfg, 1);
        let mut g = Graph::with_params(&p, Mode::Eval);
        let m = g.constant(Tensor::ones(&[3, 4]));
        let y = dec.probe_logits(&mut g, m).unwrap();
        assert_eq!(g.shape(y), &[1, FindingLabel::ALL.len()]);
    }
}
