use super::*;
use crate::numerics::ParamStore;
use proptest::prelude::*;
use rand::Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn entity_embed_examples() {
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.3, -0.2]).unwrap();
    let one = entity_embed(&mut tape, h, &[2]).unwrap();
    assert_eq!(tape.value(one), &[0.3, -0.2]);
    let twin = entity_embed(&mut tape, h, &[2, 2]).unwrap();
    assert!(close(tape.value(twin), &[0.3 + 2f64.ln(), -0.2 + 2f64.ln()], 1e-12));
    let mixed = entity_embed(&mut tape, h, &[0, 1]).unwrap();
    let v = (1f64.exp() + 1.0).ln();
    assert!(close(tape.value(mixed), &[v, v], 1e-12));
    assert!((v - 1.3133).abs() < 1e-4);
    assert!(matches!(
        entity_embed(&mut tape, h, &[]),
        Err(Error::Gega(GegaError::NoMentions))
    ));
}

#[test]
fn concentration_trivial_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1, 4], vec![0.5, -1.0, 2.0, 0.1]).unwrap();
    let w = tape.constant(vec![4, 2], vec![0.3; 8]).unwrap();
    for a in attention_concentration(&mut tape, x, &[w, w], &[w, w]).unwrap() {
        assert_eq!(tape.value(a), &[1.0]);
    }
    let x = tape.constant(vec![3, 4], (0..12).map(|i| i as f64).collect()).unwrap();
    let z = tape.constant(vec![4, 2], vec![0.0; 8]).unwrap();
    let a = attention_concentration(&mut tape, x, &[z], &[z]).unwrap();
    assert!(tape.value(a[0]).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

fn concentration_oracle(x: &[f64], wq: &[f64], wk: &[f64], n: usize, d: usize, dh: usize) -> Vec<f64> {
    let q = matmul(x, wq, n, d, dh);
    let k = matmul(x, wk, n, d, dh);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..dh).map(|t| q[i * dh + t] * k[j * dh + t]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            out[i * n + j] = (logits[j] - m).exp() / z;
        }
    }
    out
}

#[test]
fn concentration_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d, dh) = (4, 6, 3);
    let xv = rand_vec(&mut rng, n * d);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![n, d], xv.clone()).unwrap();
    let (mut wq, mut wk, mut raw) = (vec![], vec![], vec![]);
    for _ in 0..2 {
        let (q, k) = (rand_vec(&mut rng, d * dh), rand_vec(&mut rng, d * dh));
        wq.push(tape.constant(vec![d, dh], q.clone()).unwrap());
        wk.push(tape.constant(vec![d, dh], k.clone()).unwrap());
        raw.push((q, k));
    }
    let a = attention_concentration(&mut tape, x, &wq, &wk).unwrap();
    for (h, (q, k)) in raw.iter().enumerate() {
        assert!(close(tape.value(a[h]), &concentration_oracle(&xv, q, k, n, d, dh), 1e-10));
    }
}

fn eye(n: usize) -> Vec<f64> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

#[test]
fn graphconv_identity_accumulates() {
    let (n, d) = (3, 4);
    let xv: Vec<f64> = (0..n * d).map(|i| i as f64 * 0.25).collect();
    for layers in 1..=3 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![n, d], xv.clone()).unwrap();
        let adj = tape.constant(vec![n, n], eye(n)).unwrap();
        let w = tape.constant(vec![2, 2], eye(2)).unwrap();
        let wo = tape.constant(vec![d, d], eye(d)).unwrap();
        let out = multi_graphconv(&mut tape, x, &[adj, adj], &[vec![w; layers], vec![w; layers]], wo).unwrap();
        let expect: Vec<f64> = xv.iter().map(|v| v * (layers + 1) as f64).collect();
        assert_eq!(tape.value(out), expect.as_slice());
    }
}

#[test]
fn graphconv_zero_weights_is_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (3, 4);
    let xv = rand_vec(&mut rng, n * d);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![n, d], xv.clone()).unwrap();
    let adj = tape.constant(vec![n, n], vec![1.0 / 3.0; 9]).unwrap();
    let w = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let wo = tape.constant(vec![d, d], eye(d)).unwrap();
    let out = multi_graphconv(&mut tape, x, &[adj, adj], &[vec![w, w], vec![w, w]], wo).unwrap();
    assert_eq!(tape.value(out), xv.as_slice());
}

/// Nested-loop evaluation of the multi-head graph convolution.
pub(super) fn graphconv_oracle(
    x: &[f64],
    adj: &[Vec<f64>],
    w: &[Vec<Vec<f64>>],
    wo: &[f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    let heads = adj.len();
    let dh = d / heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        let xs = |i: usize, c: usize| x[i * d + h * dh + c];
        let mut prev: Vec<f64> = (0..n * dh).map(|k| xs(k / dh, k % dh)).collect();
        for wl in &w[h] {
            let mut next = vec![0.0; n * dh];
            for i in 0..n {
                for c in 0..dh {
                    let mut s = 0.0;
                    for j in 0..n {
                        for e in 0..dh {
                            s += adj[h][i * n + j] * xs(j, e) * wl[e * dh + c];
                        }
                    }
                    next[i * dh + c] = s.max(0.0) + prev[i * dh + c];
                }
            }
            prev = next;
        }
        for i in 0..n {
            for c in 0..dh {
                cat[i * d + h * dh + c] = prev[i * dh + c];
            }
        }
    }
    matmul(&cat, wo, n, d, d)
}

#[test]
fn graphconv_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, d, heads, layers) = (3, 4, 2, 2);
    let dh = d / heads;
    let xv = rand_vec(&mut rng, n * d);
    let adjv: Vec<Vec<f64>> = (0..heads).map(|_| rand_vec(&mut rng, n * n)).collect();
    let wv: Vec<Vec<Vec<f64>>> = (0..heads)
        .map(|_| (0..layers).map(|_| rand_vec(&mut rng, dh * dh)).collect())
        .collect();
    let wov = rand_vec(&mut rng, d * d);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![n, d], xv.clone()).unwrap();
    let adj: Vec<Var> = adjv.iter().map(|a| tape.constant(vec![n, n], a.clone()).unwrap()).collect();
    let w: Vec<Vec<Var>> = wv
        .iter()
        .map(|ws| ws.iter().map(|a| tape.constant(vec![dh, dh], a.clone()).unwrap()).collect())
        .collect();
    let wo = tape.constant(vec![d, d], wov.clone()).unwrap();
    let out = multi_graphconv(&mut tape, x, &adj, &w, wo).unwrap();
    assert!(close(tape.value(out), &graphconv_oracle(&xv, &adjv, &wv, &wov, n, d), 1e-10));
}

#[test]
fn graphconv_single_head_single_layer_is_gcn_plus_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, d) = (4, 3);
    let (xv, av, wv) = (rand_vec(&mut rng, n * d), rand_vec(&mut rng, n * n), rand_vec(&mut rng, d * d));
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![n, d], xv.clone()).unwrap();
    let a = tape.constant(vec![n, n], av.clone()).unwrap();
    let w = tape.constant(vec![d, d], wv.clone()).unwrap();
    let wo = tape.constant(vec![d, d], eye(d)).unwrap();
    let out = multi_graphconv(&mut tape, x, &[a], &[vec![w]], wo).unwrap();
    let ax = matmul(&av, &xv, n, n, d);
    let axw = matmul(&ax, &wv, n, d, d);
    let expect: Vec<f64> = axw.iter().zip(&xv).map(|(m, x)| m.max(0.0) + x).collect();
    assert!(close(tape.value(out), &expect, 1e-12));
}

fn enc_layers(n: usize, d: usize) -> (ParamStore<f64>, Vec<TransformerLayer>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = (0..n)
        .map(|i| TransformerLayer::new(&mut store, &mut rng, &format!("l{i}"), ParamGroup::Added, d, 2, 8, false))
        .collect();
    (store, layers)
}

#[test]
fn transformer_enc_single_token() {
    let (store, layers) = enc_layers(3, 4);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(vec![1, 4], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let out = transformer_enc(&mut tape, &b, &layers, x).unwrap();
    assert_eq!(tape.value(out.attention), &[1.0]);
}

#[test]
fn transformer_enc_averages_last_three() {
    let (store, layers) = enc_layers(4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xv = rand_vec(&mut rng, 5 * 4);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(vec![5, 4], xv.clone()).unwrap();
    let out = transformer_enc(&mut tape, &b, &layers, x).unwrap();

    // Re-run the layers by hand and capture their outputs.
    let mut h = tape.constant(vec![5, 4], xv).unwrap();
    let mut hs = Vec::new();
    let mut atts = Vec::new();
    for l in &layers {
        let (o, heads) = l.forward(&mut tape, &b, h).unwrap();
        let avg: Vec<f64> = (0..25)
            .map(|i| heads.iter().map(|&a| tape.value(a)[i]).sum::<f64>() / heads.len() as f64)
            .collect();
        atts.push(avg);
        hs.push(tape.value(o).to_vec());
        h = o;
    }
    let hid: Vec<f64> = (0..20).map(|i| (hs[1][i] + hs[2][i] + hs[3][i]) * (1.0 / 3.0)).collect();
    assert_eq!(tape.value(out.hidden), hid.as_slice());
    let mut a: Vec<f64> = (0..25).map(|i| (atts[1][i] + atts[2][i] + atts[3][i]) / 3.0).collect();
    for r in a.chunks_mut(5) {
        let s: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= s);
    }
    assert!(close(tape.value(out.attention), &a, 1e-14));
}

#[test]
fn transformer_enc_needs_three_layers() {
    let (store, layers) = enc_layers(2, 4);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
    assert!(matches!(transformer_enc(&mut tape, &b, &layers, x), Err(Error::Config(_))));
}

#[test]
fn transformer_enc_identical_final_states() {
    // Zeroed attention/FFN output maps make every layer a bare LN, which is
    // idempotent up to eps, so the three final hidden states coincide.
    let (mut store, layers) = enc_layers(3, 4);
    for l in &layers {
        for id in [l.attention.output.weight, l.attention.output.bias, l.ffn_out.weight, l.ffn_out.bias] {
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(vec![2, 4], vec![1.0, -1.0, 1.0, -1.0, 0.5, -0.5, 0.5, -0.5]).unwrap();
    let out = transformer_enc(&mut tape, &b, &layers, x).unwrap();
    let last = tape.value(out.layer_hidden[2]).to_vec();
    assert!(close(tape.value(out.hidden), &last, 1e-10));
}

fn layout_4() -> Vec<(usize, usize)> {
    // tokens: [CLS] a b | c d | [SEP] -> 6 tokens, sentences [1,3) and [3,5)
    vec![(1, 3), (3, 5)]
}

#[test]
fn pair_signals_one_hot() {
    let spans = layout_4();
    let n = 6;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + 3] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(vec![n, n], a).unwrap();
    let layout = TokenLayout {
        num_tokens: n,
        sentence_spans: &spans,
    };
    let s = pair_signals(&mut tape, av, &[vec![1], vec![4]], &[(0, 1)], layout).unwrap();
    assert_eq!(tape.value(s.q), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(tape.value(s.p), &[0.0, 1.0]);
    assert_eq!(s.degenerate, vec![false]);
}

#[test]
fn pair_signals_disjoint_is_degenerate() {
    let spans = layout_4();
    let n = 6;
    let mut a = vec![0.0; n * n];
    a[n + 1] = 1.0; // row 1 -> token 1
    a[4 * n + 4] = 1.0; // row 4 -> token 4
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(vec![n, n], a).unwrap();
    let layout = TokenLayout {
        num_tokens: n,
        sentence_spans: &spans,
    };
    let s = pair_signals(&mut tape, av, &[vec![1], vec![4]], &[(0, 1), (1, 0)], layout).unwrap();
    assert_eq!(s.degenerate, vec![true, true]);
    assert_eq!(&tape.value(s.q)[..6], &[0.0, 0.25, 0.25, 0.25, 0.25, 0.0]);
    assert_eq!(&tape.value(s.p)[..2], &[0.5, 0.5]);
}

#[test]
fn pair_signals_hand_case() {
    // 4 content tokens in 2 sentences plus boundaries.
    let spans = layout_4();
    let n = 6;
    let row_s = [0.1, 0.2, 0.3, 0.1, 0.2, 0.1];
    let row_o = [0.2, 0.4, 0.1, 0.1, 0.1, 0.1];
    let mut a = vec![1.0 / 6.0; n * n];
    a[n..2 * n].copy_from_slice(&row_s);
    a[3 * n..4 * n].copy_from_slice(&row_o);
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(vec![n, n], a).unwrap();
    let layout = TokenLayout {
        num_tokens: n,
        sentence_spans: &spans,
    };
    let s = pair_signals(&mut tape, av, &[vec![1], vec![3]], &[(0, 1)], layout).unwrap();
    let prod: Vec<f64> = (1..5).map(|t| row_s[t] * row_o[t]).collect();
    let z: f64 = prod.iter().sum();
    let p = [(prod[0] + prod[1]) / z, (prod[2] + prod[3]) / z];
    assert!(close(tape.value(s.p), &p, 1e-15));
}

#[test]
fn pair_signals_mean_over_mentions() {
    let spans = layout_4();
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let av = tape.constant(vec![n, n], a.clone()).unwrap();
    let layout = TokenLayout {
        num_tokens: n,
        sentence_spans: &spans,
    };
    let s = pair_signals(&mut tape, av, &[vec![1, 2], vec![4]], &[(0, 1)], layout).unwrap();
    let q: Vec<f64> = (0..n)
        .map(|t| {
            if t == 0 || t == 5 {
                0.0
            } else {
                (a[n + t] + a[2 * n + t]) / 2.0 * a[4 * n + t]
            }
        })
        .collect();
    let z: f64 = q.iter().sum();
    let q: Vec<f64> = q.iter().map(|v| v / z).collect();
    assert!(close(tape.value(s.q), &q, 1e-14));
}

#[test]
fn pair_context_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (4, 3);
    let hv = rand_vec(&mut rng, n * d);
    let ev = rand_vec(&mut rng, d);
    let mut tape = Tape::<f64>::new();
    let h = tape.constant(vec![n, d], hv.clone()).unwrap();
    let e = tape.constant(vec![1, d], ev.clone()).unwrap();
    let q = tape.constant(vec![1, n], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let zw = tape.constant(vec![2 * d, d], vec![0.0; 2 * d * d]).unwrap();
    let zb = tape.constant(vec![1, d], vec![0.0; d]).unwrap();
    let c = pair_context(&mut tape, e, h, q, zw, zb).unwrap();
    assert_eq!(tape.value(c), &[0.0; 3]);

    // Selection: with W = [0; I] and b = 0, c = tanh(row 2 of H).
    let mut sel = vec![0.0; 2 * d * d];
    for i in 0..d {
        sel[(d + i) * d + i] = 1.0;
    }
    let sw = tape.constant(vec![2 * d, d], sel).unwrap();
    let c = pair_context(&mut tape, e, h, q, sw, zb).unwrap();
    let expect: Vec<f64> = hv[2 * d..3 * d].iter().map(|v| v.tanh()).collect();
    assert_eq!(tape.value(c), expect.as_slice());

    // Random affine + tanh oracle.
    let (wv, bv) = (rand_vec(&mut rng, 2 * d * d), rand_vec(&mut rng, d));
    let qv = [0.1, 0.2, 0.3, 0.4];
    let w = tape.constant(vec![2 * d, d], wv.clone()).unwrap();
    let b = tape.constant(vec![1, d], bv.clone()).unwrap();
    let q = tape.constant(vec![1, n], qv.to_vec()).unwrap();
    let c = pair_context(&mut tape, e, h, q, w, b).unwrap();
    let ctx: Vec<f64> = (0..d).map(|k| (0..n).map(|t| qv[t] * hv[t * d + k]).sum()).collect();
    let cat: Vec<f64> = ev.iter().chain(&ctx).copied().collect();
    let expect: Vec<f64> = (0..d)
        .map(|k| ((0..2 * d).map(|i| cat[i] * wv[i * d + k]).sum::<f64>() + bv[k]).tanh())
        .collect();
    assert!(close(tape.value(c), &expect, 1e-12));
    assert!(tape.value(c).iter().all(|v| v.abs() < 1.0));
}

/// Dense bilinear `c_s^T W_r c_o + b_r`, with `w[r]` stored `d x d`.
pub(super) fn bilinear_oracle(cs: &[f64], co: &[f64], w: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let d = cs.len();
    w.iter()
        .zip(b)
        .map(|(wr, br)| {
            let mut s = *br;
            for i in 0..d {
                for j in 0..d {
                    s += cs[i] * wr[i * d + j] * co[j];
                }
            }
            s
        })
        .collect()
}

#[test]
fn relation_scores_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (d, c) = (4, 3);
    let (csv, cov, bv) = (rand_vec(&mut rng, d), rand_vec(&mut rng, d), rand_vec(&mut rng, c));
    let mut tape = Tape::<f64>::new();
    let cs = tape.constant(vec![1, d], csv.clone()).unwrap();
    let co = tape.constant(vec![1, d], cov.clone()).unwrap();
    let b = tape.constant(vec![1, c], bv.clone()).unwrap();
    let zw = tape.constant(vec![d * d, c], vec![0.0; d * d * c]).unwrap();
    let s = relation_scores(&mut tape, cs, co, 1, zw, b).unwrap();
    assert_eq!(tape.value(s), bv.as_slice());

    let wv = rand_vec(&mut rng, d * d * c);
    let w = tape.constant(vec![d * d, c], wv.clone()).unwrap();
    let s = relation_scores(&mut tape, cs, co, 1, w, b).unwrap();
    let per_rel: Vec<Vec<f64>> = (0..c).map(|r| (0..d * d).map(|k| wv[k * c + r]).collect()).collect();
    assert!(close(tape.value(s), &bilinear_oracle(&csv, &cov, &per_rel, &bv), 1e-12));

    // Two groups only couple coordinates within the same block.
    let w2 = tape.constant(vec![2 * 2 * 2, c], wv[..8 * c].to_vec()).unwrap();
    let s2 = relation_scores(&mut tape, cs, co, 2, w2, b).unwrap();
    let expect: Vec<f64> = (0..c)
        .map(|r| {
            let mut s = bv[r];
            for g in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        s += csv[g * 2 + i] * wv[(g * 4 + i * 2 + j) * c + r] * cov[g * 2 + j];
                    }
                }
            }
            s
        })
        .collect();
    assert!(close(tape.value(s2), &expect, 1e-12));
    assert!(relation_scores(&mut tape, cs, co, 3, w, b).is_err());
    let zero = tape.scalar_constant(0.0);
    let p = tape.sigmoid(zero);
    assert_eq!(tape.scalar(p), 0.5);
}

#[test]
fn decide_relations_examples() {
    assert_eq!(decide_relations(&[0.0, 1.0, -1.0], 4), vec![1]);
    assert!(decide_relations(&[0.0, -1.0, -2.0], 4).is_empty());
    let s = [0.0, 5.0, 1.0, 3.0, 2.0, 6.0, 4.0];
    assert_eq!(decide_relations(&s, 4), vec![1, 3, 5, 6]);
    // Ties with TH are not predicted.
    assert!(decide_relations(&[1.0, 1.0], 4).is_empty());
}

#[test]
fn select_evidence_examples() {
    assert_eq!(select_evidence(&[0.5, 0.15, 0.35], 0.2), vec![0, 2]);
    assert!(select_evidence(&[1.0 / 6.0; 6], 0.2).is_empty());
    assert_eq!(select_evidence(&[0.2, 0.8], 0.2), vec![1]);
}

#[test]
fn config_defaults() {
    let g = GegaConfig::default();
    assert_eq!((g.num_heads, g.gnn_layers, g.num_class, g.num_labels_cap), (2, 2, 97, 4));
    assert_eq!(g.evi_thresh, 0.2);
    assert_eq!(g.groups(64), 1);
    assert_eq!(g.groups(128), 2);
    assert_eq!(g.groups(32), 1);
    let bad = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        },
        gega: GegaConfig {
            bilinear_groups: Some(3),
            ..GegaConfig::default()
        },
        init_seed: 0,
    };
    let err = bad.validate().unwrap_err().to_string();
    assert!(err.contains("bilinear_groups"), "{err}");
}

proptest! {
    #[test]
    fn decide_relations_shift_invariant(
        scores in prop::collection::vec(-5.0f64..5.0, 2..12),
        shift in -100.0f64..100.0,
        cap in 1usize..6,
    ) {
        // Dyadic shift keeps every comparison exact.
        let shift = (shift * 8.0).round() / 8.0;
        let scores: Vec<f64> = scores.iter().map(|s| (s * 64.0).round() / 64.0).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        prop_assert_eq!(decide_relations(&scores, cap), decide_relations(&shifted, cap));
    }

    #[test]
    fn decide_relations_matches_sort_oracle(scores in prop::collection::vec(-5.0f64..5.0, 2..12), cap in 1usize..6) {
        let mut idx: Vec<usize> = (1..scores.len()).filter(|&r| scores[r] > scores[0]).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        idx.truncate(cap);
        idx.sort_unstable();
        prop_assert_eq!(decide_relations(&scores, cap), idx);
    }

    #[test]
    fn pair_signals_are_distributions(seed in 0u64..1000, sents in 1usize..4, per in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sents * per + 2;
        let spans: Vec<(usize, usize)> = (0..sents).map(|j| (1 + j * per, 1 + (j + 1) * per)).collect();
        let logits = rand_vec(&mut rng, n * n);
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(vec![n, n], logits.iter().map(|v| v * 5.0).collect()).unwrap();
        let a = tape.softmax(l, 1).unwrap();
        let mentions = vec![vec![rng.gen_range(1..n - 1)], vec![rng.gen_range(1..n - 1), rng.gen_range(1..n - 1)]];
        let layout = TokenLayout { num_tokens: n, sentence_spans: &spans };
        let s = pair_signals(&mut tape, a, &mentions, &[(0, 1), (1, 0)], layout).unwrap();
        for row in tape.value(s.q).chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row[0] == 0.0 && row[n - 1] == 0.0);
        }
        let q = tape.value(s.q).to_vec();
        for (r, row) in tape.value(s.p).chunks(sents).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (j, &(a, b)) in spans.iter().enumerate() {
                let direct: f64 = q[r * n + a..r * n + b].iter().sum();
                prop_assert!((row[j] - direct).abs() < 1e-12 && row[j] >= 0.0);
            }
        }
    }
}
