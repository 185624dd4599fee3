use std::collections::{BTreeMap, BTreeSet};

use super::{weight_name, ModelBundle, ModelSpec, POS_EMBED, TOK_EMBED};
use crate::error::{Error, Result};
use crate::linalg::{matmul_transb, Matrix};

const LN_EPS: f64 = 1e-5;

/// Sublayer tags of the activation-site grammar `layer.<i>.<attn|mlp>.<sublayer>`.
const ATTN_SITES: [&str; 3] = ["in", "ctx", "out"];
const MLP_SITES: [&str; 4] = ["in", "pre", "act", "out"];

/// Activations of one site for one token sequence: `values` is
/// `(n_tokens × width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub site: String,
    pub tokens: Vec<u32>,
    pub values: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Matrix,
    pub traces: BTreeMap<String, ActivationTrace>,
}

/// All valid activation-site names for a spec.
///
/// * `attn.in`  – normalized block input, fed to q/k/v
/// * `attn.ctx` – concatenated head outputs, fed to `o_proj`
/// * `attn.out` – `o_proj` output added to the residual
/// * `mlp.in`   – normalized residual, fed to `fc1`
/// * `mlp.pre`  – `fc1` output before GELU
/// * `mlp.act`  – post-GELU hidden units, fed to `fc2`
/// * `mlp.out`  – `fc2` output added to the residual
pub fn valid_sites(spec: &ModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..spec.n_layers {
        out.extend(ATTN_SITES.iter().map(|s| format!("layer.{i}.attn.{s}")));
        out.extend(MLP_SITES.iter().map(|s| format!("layer.{i}.mlp.{s}")));
    }
    out
}

/// Activation site whose values are the input of a prunable linear layer.
fn input_site(layer: &str) -> String {
    let (prefix, proj) = layer.rsplit_once('.').expect("layer name");
    match proj {
        "q_proj" | "k_proj" | "v_proj" => format!("{prefix}.in"),
        "o_proj" => format!("{prefix}.ctx"),
        "fc1" => format!("{prefix}.in"),
        "fc2" => format!("{prefix}.act"),
        _ => unreachable!("not a prunable layer: {layer}"),
    }
}

fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn add_in_place(acc: &mut Matrix, delta: &Matrix) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

fn causal_attention(spec: &ModelSpec, q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let n = q.rows();
    let hd = spec.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Matrix::zeros(n, spec.d_model);
    let mut scores = vec![0.0; n];
    for h in 0..spec.n_heads {
        let cols = h * hd..(h + 1) * hd;
        for t in 0..n {
            let qt = &q.row(t)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                let ks = &k.row(s)[cols.clone()];
                *score = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*score);
            }
            let mut z = 0.0;
            for score in scores.iter_mut().take(t + 1) {
                *score = (*score - max).exp();
                z += *score;
            }
            let out = &mut ctx.row_mut(t)[cols.clone()];
            for (s, &p) in scores.iter().enumerate().take(t + 1) {
                let w = p / z;
                for (o, vv) in out.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += w * vv;
                }
            }
        }
    }
    ctx
}

/// Core pass; `visit` sees every activation site in execution order.
fn run(
    bundle: &ModelBundle,
    tokens: &[u32],
    visit: &mut dyn FnMut(&str, &Matrix),
) -> Result<Matrix> {
    let spec = bundle.spec();
    if tokens.is_empty() || tokens.len() > spec.max_seq_len {
        return Err(Error::invalid(format!(
            "forward needs 1..={} tokens, got {}",
            spec.max_seq_len,
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }
    let tok = bundle.tensor(TOK_EMBED).expect("validated");
    let pos = bundle.tensor(POS_EMBED).expect("validated");
    let mut x = Matrix::from_fn(tokens.len(), spec.d_model, |t, j| {
        tok[(tokens[t] as usize, j)] + pos[(t, j)]
    });
    let w = |name: String| bundle.tensor(&name).expect("validated");
    for i in 0..spec.n_layers {
        let a = format!("layer.{i}.attn");
        let h = layer_norm(&x);
        visit(&format!("{a}.in"), &h);
        let q = matmul_transb(&h, w(weight_name(&format!("{a}.q_proj"))))?;
        let k = matmul_transb(&h, w(weight_name(&format!("{a}.k_proj"))))?;
        let v = matmul_transb(&h, w(weight_name(&format!("{a}.v_proj"))))?;
        let ctx = causal_attention(spec, &q, &k, &v);
        visit(&format!("{a}.ctx"), &ctx);
        let out = matmul_transb(&ctx, w(weight_name(&format!("{a}.o_proj"))))?;
        visit(&format!("{a}.out"), &out);
        add_in_place(&mut x, &out);

        let m = format!("layer.{i}.mlp");
        let h = layer_norm(&x);
        visit(&format!("{m}.in"), &h);
        let pre = matmul_transb(&h, w(weight_name(&format!("{m}.fc1"))))?;
        visit(&format!("{m}.pre"), &pre);
        let act = pre.map(gelu);
        visit(&format!("{m}.act"), &act);
        let out = matmul_transb(&act, w(weight_name(&format!("{m}.fc2"))))?;
        visit(&format!("{m}.out"), &out);
        add_in_place(&mut x, &out);
    }
    matmul_transb(&layer_norm(&x), tok)
}

/// Runs the model on `tokens` and captures the requested activation sites.
pub fn forward<S: AsRef<str>>(
    bundle: &ModelBundle,
    tokens: &[u32],
    capture: &[S],
) -> Result<ForwardOutput> {
    let valid = valid_sites(bundle.spec());
    let wanted: BTreeSet<&str> = capture.iter().map(AsRef::as_ref).collect();
    if let Some(bad) = wanted.iter().find(|s| !valid.iter().any(|v| v == *s)) {
        return Err(Error::UnknownSite {
            site: bad.to_string(),
            valid,
        });
    }
    let mut traces = BTreeMap::new();
    let logits = run(bundle, tokens, &mut |site, values| {
        if wanted.contains(site) {
            traces.insert(
                site.to_string(),
                ActivationTrace {
                    site: site.to_string(),
                    tokens: tokens.to_vec(),
                    values: values.clone(),
                },
            );
        }
    })?;
    Ok(ForwardOutput { logits, traces })
}

/// Inputs of every prunable linear layer, `(n_tokens × in_features)`.
pub fn layer_linear_inputs(bundle: &ModelBundle, tokens: &[u32]) -> Result<BTreeMap<String, Matrix>> {
    let mut by_site: BTreeMap<String, Matrix> = BTreeMap::new();
    run(bundle, tokens, &mut |site, values| {
        if site.ends_with(".in") || site.ends_with(".ctx") || site.ends_with(".act") {
            by_site.insert(site.to_string(), values.clone());
        }
    })?;
    Ok(bundle
        .spec()
        .prunable_layers()
        .into_iter()
        .map(|layer| {
            let x = by_site[&input_site(&layer)].clone();
            (layer, x)
        })
        .collect())
}
