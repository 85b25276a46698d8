use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fill {
    Normal,
    Zeros,
    Ones,
}

/// Name prefixes mirrored by the momentum encoder.
pub const MOMENTUM_PREFIXES: [&str; 3] = ["embed.", "query.", "doc."];

fn attention(out: &mut Vec<(String, Vec<usize>, Fill)>, name: &str, h: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{name}.w{p}"), vec![h, h], Fill::Normal));
        out.push((format!("{name}.b{p}"), vec![h], Fill::Zeros));
    }
}

fn norm(out: &mut Vec<(String, Vec<usize>, Fill)>, name: &str, h: usize) {
    out.push((format!("{name}.g"), vec![h], Fill::Ones));
    out.push((format!("{name}.b"), vec![h], Fill::Zeros));
}

fn ffn(out: &mut Vec<(String, Vec<usize>, Fill)>, name: &str, h: usize, f: usize) {
    out.push((format!("{name}.w1"), vec![h, f], Fill::Normal));
    out.push((format!("{name}.b1"), vec![f], Fill::Zeros));
    out.push((format!("{name}.w2"), vec![f, h], Fill::Normal));
    out.push((format!("{name}.b2"), vec![h], Fill::Zeros));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Fill)> {
    let (h, f) = (cfg.hidden, cfg.ffn);
    let mut out = vec![("embed.tokens".to_string(), vec![cfg.vocab_size, h], Fill::Normal)];
    for side in ["query", "doc"] {
        out.push((format!("{side}.pos"), vec![cfg.max_positions, h], Fill::Normal));
        norm(&mut out, &format!("{side}.emb_ln"), h);
        for l in 0..cfg.layers {
            let name = format!("{side}.layer{l}");
            attention(&mut out, &format!("{name}.attn"), h);
            norm(&mut out, &format!("{name}.attn_ln"), h);
            ffn(&mut out, &format!("{name}.ffn"), h, f);
            norm(&mut out, &format!("{name}.ffn_ln"), h);
        }
    }
    for l in 0..cfg.layers {
        attention(&mut out, &format!("fusion.layer{l}.xattn"), h);
        norm(&mut out, &format!("fusion.layer{l}.xattn_ln"), h);
    }
    out.push(("decoder.pos".to_string(), vec![cfg.max_positions, h], Fill::Normal));
    norm(&mut out, "decoder.emb_ln", h);
    for l in 0..cfg.decoder_layers {
        let name = format!("decoder.layer{l}");
        attention(&mut out, &format!("{name}.attn"), h);
        norm(&mut out, &format!("{name}.attn_ln"), h);
        attention(&mut out, &format!("{name}.xattn"), h);
        norm(&mut out, &format!("{name}.xattn_ln"), h);
        ffn(&mut out, &format!("{name}.ffn"), h, f);
        norm(&mut out, &format!("{name}.ffn_ln"), h);
    }
    out.push(("decoder.out_bias".to_string(), vec![cfg.vocab_size], Fill::Zeros));
    out
}

/// Expected name and shape of every parameter, in storage order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<_> = layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect();
    v.push(("tau".to_string(), vec![1]));
    v
}

/// Random initialization: weights and embeddings normal(0, init_std),
/// biases zero, norm gains one, `tau = tau_init`. Each fusion
/// cross-attention key projection starts equal to its query projection.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamStore<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, fill) in layout(cfg) {
        let t = match fill {
            Fill::Normal => Tensor::randn(&shape, cfg.init_std, &mut rng),
            Fill::Zeros => Tensor::zeros(&shape),
            Fill::Ones => Tensor::full(&shape, S::one()),
        };
        store.insert(name, t);
    }
    for l in 0..cfg.layers {
        let wq = store.expect(&format!("fusion.layer{l}.xattn.wq")).clone();
        store.insert(format!("fusion.layer{l}.xattn.wk"), wq);
    }
    store.insert("tau", Tensor::scalar(S::from_f64_lossy(cfg.tau_init)));
    store
}

/// Copy of the bi-encoder subset.
pub fn momentum_params<S: Scalar>(params: &ParamStore<S>) -> ParamStore<S> {
    params.subset(&MOMENTUM_PREFIXES)
}
