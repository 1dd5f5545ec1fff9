//! Finite-difference verification of the reverse-mode engine, both at the
//! op level (random composed graphs via proptest) and through the full
//! model, including gradients with respect to post-softmax attention.

use crft_core::model::AttnProbe;
use crft_core::{ForwardOpts, MicroTransformer, ModelConfig, Tape};
use proptest::prelude::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn small_model(seed: u64, d: usize, heads: usize, vocab: usize) -> MicroTransformer {
    MicroTransformer::new(
        ModelConfig {
            n_layers: 2,
            n_heads: heads,
            d_model: d,
            d_ff: 2 * d,
            vocab_size: vocab,
            max_seq: 12,
            dropout: 0.0,
        },
        seed,
    )
    .unwrap()
}

fn model_loss(model: &MicroTransformer, tokens: &[u32], pairs: &[(usize, usize)]) -> f64 {
    let mut tape = Tape::new();
    let trace = model
        .forward(&mut tape, tokens, None, ForwardOpts::eval())
        .unwrap();
    let loss = tape.cross_entropy(trace.logits_id, pairs).unwrap();
    tape.data(loss)[0]
}

#[test]
fn model_parameter_gradients_match_central_differences() {
    let model = small_model(11, 8, 2, 7);
    let tokens: Vec<u32> = vec![1, 3, 5, 2, 6];
    let pairs: Vec<(usize, usize)> = (1..tokens.len())
        .map(|i| (i - 1, tokens[i] as usize))
        .collect();

    let mut tape = Tape::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let _ = &mut rng;
    let trace = model
        .forward(&mut tape, &tokens, None, {
            let mut o = ForwardOpts::eval();
            o.train_base = true;
            o
        })
        .unwrap();
    let loss = tape.cross_entropy(trace.logits_id, &pairs).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    let mut checked = 0usize;
    for (name, id) in &trace.base_ids {
        let g = grads.get(*id).unwrap().to_vec();
        let len = g.len();
        // Check a deterministic spread of entries in every tensor.
        let stride = (len / 7).max(1);
        for i in (0..len).step_by(stride) {
            let mut plus = model.clone();
            let mut minus = model.clone();
            for (n2, t) in plus.named_tensors_mut() {
                if &n2 == name {
                    t[i] += h;
                }
            }
            for (n2, t) in minus.named_tensors_mut() {
                if &n2 == name {
                    t[i] -= h;
                }
            }
            let fd = (model_loss(&plus, &tokens, &pairs) - model_loss(&minus, &tokens, &pairs))
                / (2.0 * h);
            assert!(
                rel_err(g[i], fd) < 1e-3 || (g[i].abs() < 1e-9 && fd.abs() < 1e-7),
                "{name}[{i}]: analytic {} vs fd {fd}",
                g[i]
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn attention_gradients_match_central_differences() {
    let model = small_model(13, 8, 2, 7);
    let tokens: Vec<u32> = vec![2, 4, 6, 1];
    let n = tokens.len();
    let pairs: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, tokens[i] as usize)).collect();

    let mut tape = Tape::new();
    let trace = model
        .forward(&mut tape, &tokens, None, ForwardOpts::eval())
        .unwrap();
    let loss = tape.cross_entropy(trace.logits_id, &pairs).unwrap();
    let grads = tape.backward(loss).unwrap();

    let h = 1e-5;
    for layer in 0..model.cfg.n_layers {
        for head in 0..model.cfg.n_heads {
            let analytic = grads.get(trace.attn_ids[layer][head]).unwrap().to_vec();
            for row in 0..n {
                for col in 0..n {
                    let probe = |delta: f64| -> f64 {
                        let mut t = Tape::new();
                        let mut o = ForwardOpts::eval();
                        o.attn_probe = Some(AttnProbe {
                            layer,
                            head,
                            row,
                            col,
                            delta,
                        });
                        let tr = model.forward(&mut t, &tokens, None, o).unwrap();
                        let l = t.cross_entropy(tr.logits_id, &pairs).unwrap();
                        t.data(l)[0]
                    };
                    let fd = (probe(h) - probe(-h)) / (2.0 * h);
                    let a = analytic[row * n + col];
                    assert!(
                        rel_err(a, fd) < 1e-3 || (a.abs() < 1e-9 && fd.abs() < 1e-7),
                        "layer {layer} head {head} cell ({row},{col}): {a} vs {fd}"
                    );
                }
            }
        }
    }
}

// ── op-level property tests ─────────────────────────────────────────

fn graph_a_loss(xs: &[f64], n: usize) -> (f64, Option<Vec<f64>>) {
    let mut t = Tape::new();
    let x = t.leaf(&[n, n], xs.to_vec(), true).unwrap();
    let sm = t.softmax_causal(x).unwrap();
    let g = t.gelu(sm);
    let s = t.sum(g);
    let loss = t.scale(s, 0.7);
    let v = t.data(loss)[0];
    let grads = t.backward(loss).unwrap();
    (v, grads.get(x).map(|g| g.to_vec()))
}

fn graph_b_loss(xs: &[f64], rows: usize, cols: usize) -> (f64, Option<Vec<f64>>) {
    let mut t = Tape::new();
    let x = t.leaf(&[rows, cols], xs.to_vec(), true).unwrap();
    let gamma = t
        .constant(&[cols], (0..cols).map(|i| 1.0 + 0.1 * i as f64).collect())
        .unwrap();
    let beta = t.constant(&[cols], vec![0.05; cols]).unwrap();
    let ln = t.layer_norm(x, gamma, beta).unwrap();
    let w = t
        .constant(
            &[cols, 3],
            (0..cols * 3).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect(),
        )
        .unwrap();
    let mm = t.matmul(ln, w).unwrap();
    let loss = t.cross_entropy(mm, &[(0, 1), (rows - 1, 2)]).unwrap();
    let v = t.data(loss)[0];
    let grads = t.backward(loss).unwrap();
    (v, grads.get(x).map(|g| g.to_vec()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_gelu_graph_matches_fd(
        n in 2usize..5,
        raw in proptest::collection::vec(-2.0f64..2.0, 25),
    ) {
        let xs: Vec<f64> = raw[..n * n].to_vec();
        let (_, g) = graph_a_loss(&xs, n);
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..xs.len() {
            let mut p = xs.clone();
            p[i] += h;
            let mut m = xs.clone();
            m[i] -= h;
            let fd = (graph_a_loss(&p, n).0 - graph_a_loss(&m, n).0) / (2.0 * h);
            prop_assert!(
                rel_err(g[i], fd) < 1e-3 || (g[i].abs() < 1e-8 && fd.abs() < 1e-6),
                "idx {}: {} vs {}", i, g[i], fd
            );
        }
    }

    #[test]
    fn layernorm_matmul_ce_graph_matches_fd(
        rows in 2usize..4,
        cols in 2usize..5,
        raw in proptest::collection::vec(-1.5f64..1.5, 20),
    ) {
        let xs: Vec<f64> = raw[..rows * cols].to_vec();
        let (_, g) = graph_b_loss(&xs, rows, cols);
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..xs.len() {
            let mut p = xs.clone();
            p[i] += h;
            let mut m = xs.clone();
            m[i] -= h;
            let fd = (graph_b_loss(&p, rows, cols).0 - graph_b_loss(&m, rows, cols).0) / (2.0 * h);
            prop_assert!(
                rel_err(g[i], fd) < 1e-3 || (g[i].abs() < 1e-8 && fd.abs() < 1e-6),
                "idx {}: {} vs {}", i, g[i], fd
            );
        }
    }
}
