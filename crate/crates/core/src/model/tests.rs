use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threadsum_tensor::{Tape, Tensor};

use super::*;
use crate::conv::tests::{chain, figure_tree};
use crate::conv::Utterance;

fn jitter(model: &mut Model, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
}

fn toy() -> Model {
    let mut m = Model::new(ModelConfig::toy(30), 5).unwrap();
    jitter(&mut m, 6, 0.2);
    m
}

fn input(tree: &ConversationTree, lens: &[usize]) -> ConversationInput {
    let utts = lens
        .iter()
        .enumerate()
        .map(|(i, &l)| (0..l).map(|t| if t == 0 { 0 } else { 3 + (i * 7 + t * 5) % 27 }).collect())
        .collect();
    ConversationInput::new(tree, utts).unwrap()
}

#[test]
fn token_encoder_shapes_and_determinism() {
    let m = toy();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let out = m.token_encode(&mut tape, &[vec![0, 4, 5], vec![0, 4, 5], vec![0, 9]], &mut ctx).unwrap();
    assert_eq!(tape.value(out[0]).shape(), &[3, 16]);
    assert_eq!(tape.value(out[2]).shape(), &[2, 16]);
    assert_eq!(tape.value(out[0]).data(), tape.value(out[1]).data());
    assert!(m.token_encode(&mut tape, &[vec![0, 30]], &mut ctx).is_err());
}

#[test]
fn zero_sublayers_leave_normalised_embeddings() {
    let mut m = Model::new(ModelConfig::toy(30), 1).unwrap();
    for p in m.store_mut().iter_mut() {
        if p.name.starts_with("token_encoder.") && (p.name.contains(".o.") || p.name.contains(".out.")) {
            p.value.data_mut().fill(0.0);
        }
    }
    let ids = [0, 7, 8, 9];
    let mut tape = Tape::new();
    let h = m.token_encode_one(&mut tape, &ids, &mut ForwardCtx::eval()).unwrap();
    let e = &m.store().by_name("embed.tokens").unwrap().value;
    let pe = sinusoidal_pe(ids.len(), 16);
    for (r, &id) in ids.iter().enumerate() {
        let x: Vec<f64> = (0..16).map(|c| e.at(id, c) + pe.at(r, c)).collect();
        let mean = x.iter().sum::<f64>() / 16.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        for c in 0..16 {
            assert_abs_diff_eq!(tape.value(h).at(r, c), (x[c] - mean) / (var + 1e-5).sqrt(), epsilon = 1e-12);
        }
    }
}

#[test]
fn utterance_inputs_are_bos_plus_rank_position() {
    let m = toy();
    let tree = figure_tree();
    let inp = input(&tree, &[3, 2, 4, 1, 2]);
    let mut tape = Tape::new();
    let per = m.token_encode(&mut tape, &inp.utterances, &mut ForwardCtx::eval()).unwrap();
    let (bos, h0) = m.utterance_representations(&mut tape, &per).unwrap();
    let pe = sinusoidal_pe(5, 16);
    assert_eq!(tape.value(h0).shape(), &[5, 16]);
    for i in 0..5 {
        for c in 0..16 {
            assert_eq!(tape.value(bos).at(i, c), tape.value(per[i]).at(0, c));
            assert_abs_diff_eq!(tape.value(h0).at(i, c) - tape.value(bos).at(i, c), pe.at(i, c), epsilon = 1e-12);
        }
    }
}

/// Plain-array reference of the utterance encoder restricted to chains,
/// written in the relative-position form
/// `e_ij = (q_i.k_j + q_i.a_ij + a_ij.k_j) / sqrt(d_z)` with `a_ij = w[clip(i-j)]`.
mod reference {
    use threadsum_tensor::{ParamStore, Tensor};

    pub fn mm(a: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..w.cols()).map(|c| row.iter().enumerate().map(|(r, x)| x * w.at(r, c)).sum()).collect())
            .collect()
    }

    fn bias(a: &mut [Vec<f64>], b: &Tensor) {
        for row in a {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    fn ln(a: &[Vec<f64>], g: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mu = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(c, x)| (x - mu) / (var + 1e-5).sqrt() * g.data()[c] + b.data()[c])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn p<'a>(s: &'a ParamStore, n: &str) -> &'a Tensor {
        &s.by_name(n).unwrap().value
    }

    pub fn encode(s: &ParamStore, h0: &[Vec<f64>], layers: usize, heads: usize, k: i64) -> Vec<Vec<f64>> {
        let n = h0.len();
        let d = h0[0].len();
        let dz = d / heads;
        let w = p(s, "utterance_encoder.thread_embeddings");
        let mut x = h0.to_vec();
        for l in 0..layers {
            let pre = format!("utterance_encoder.{l}");
            let h = ln(&x, p(s, &format!("{pre}.attn_norm.gain")), p(s, &format!("{pre}.attn_norm.bias")));
            let q = mm(&h, p(s, &format!("{pre}.attn.q.weight")));
            let kk = mm(&h, p(s, &format!("{pre}.attn.k.weight")));
            let v = mm(&h, p(s, &format!("{pre}.attn.v.weight")));
            let mut z = vec![vec![0.0; d]; n];
            for m in 0..heads {
                let cols = m * dz..(m + 1) * dz;
                for i in 0..n {
                    let mut e = vec![0.0; n];
                    for (j, ej) in e.iter_mut().enumerate() {
                        let off = (i as i64 - j as i64).clamp(-k, k);
                        let a = w.row((off + k + 1) as usize);
                        let mut s = 0.0;
                        for (c, col) in cols.clone().enumerate() {
                            s += q[i][col] * kk[j][col] + q[i][col] * a[c] + a[c] * kk[j][col];
                        }
                        *ej = s / (dz as f64).sqrt();
                    }
                    let mx = e.iter().cloned().fold(f64::MIN, f64::max);
                    let ex: Vec<f64> = e.iter().map(|v| (v - mx).exp()).collect();
                    let tot: f64 = ex.iter().sum();
                    for col in cols.clone() {
                        z[i][col] = (0..n).map(|j| ex[j] / tot * v[j][col]).sum();
                    }
                }
            }
            let mut o = mm(&z, p(s, &format!("{pre}.attn.o.weight")));
            bias(&mut o, p(s, &format!("{pre}.attn.o.bias")));
            for (xr, orow) in x.iter_mut().zip(&o) {
                for (a, b) in xr.iter_mut().zip(orow) {
                    *a += b;
                }
            }
            let h = ln(&x, p(s, &format!("{pre}.ffn_norm.gain")), p(s, &format!("{pre}.ffn_norm.bias")));
            let mut f = mm(&h, p(s, &format!("{pre}.ffn.in.weight")));
            bias(&mut f, p(s, &format!("{pre}.ffn.in.bias")));
            for row in &mut f {
                for v in row.iter_mut() {
                    *v = gelu(*v);
                }
            }
            let mut g = mm(&f, p(s, &format!("{pre}.ffn.out.weight")));
            bias(&mut g, p(s, &format!("{pre}.ffn.out.bias")));
            for (xr, grow) in x.iter_mut().zip(&g) {
                for (a, b) in xr.iter_mut().zip(grow) {
                    *a += b;
                }
            }
        }
        ln(&x, p(s, "utterance_encoder.final_norm.gain"), p(s, "utterance_encoder.final_norm.bias"))
    }
}

#[test]
fn chain_matches_relative_position_reference() {
    let m = toy();
    let n = 7;
    let tree = chain(n);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h0: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut tape = Tape::new();
    let hv = tape.constant(Tensor::from_rows(&h0).unwrap());
    let out = m.utterance_encode(&mut tape, hv, &tree.relation_matrix(), &mut ForwardCtx::eval()).unwrap();
    let expected = reference::encode(m.store(), &h0, 2, 2, 3);
    for i in 0..n {
        for c in 0..16 {
            assert_abs_diff_eq!(tape.value(out).at(i, c), expected[i][c], epsilon = 1e-8);
        }
    }
}

#[test]
fn utterance_encoder_ignores_source_ids() {
    let m = toy();
    let make = |base: u64| {
        let utts = vec![
            Utterance::new(base, 1, None, "a"),
            Utterance::new(base + 10, 2, Some(base), "b"),
            Utterance::new(base + 3, 3, Some(base), "c"),
            Utterance::new(base + 99, 4, Some(base + 10), "d"),
        ];
        ConversationTree::from_utterances(utts).unwrap()
    };
    let (a, b) = (make(1), make(500));
    let mut outs = Vec::new();
    for tree in [a, b] {
        let inp = input(&tree, &[2, 3, 2, 4]);
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inp, &mut ForwardCtx::eval()).unwrap();
        assert_eq!(tape.value(enc.utterance_states).shape(), &[4, 16]);
        outs.push(tape.value(enc.utterance_states).clone());
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn token_residual_memory_adds_utterance_state() {
    let m = toy();
    let tree = figure_tree().truncated(2);
    let inp = input(&tree, &[3, 2]);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &inp, &mut ForwardCtx::eval()).unwrap();
    let (mem, tok, utt) = (tape.value(enc.memory), tape.value(enc.token_states), tape.value(enc.utterance_states));
    assert_eq!(mem.rows(), 5);
    for r in 0..5 {
        let owner = usize::from(r >= 3);
        for c in 0..16 {
            assert_eq!(mem.at(r, c), tok.at(r, c) + utt.at(owner, c));
        }
    }

    let mut tape = Tape::new();
    let t = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let mem = token_residual_memory(&mut tape, &[t], z).unwrap();
    assert_eq!(tape.value(mem), tape.value(t));
}

#[test]
fn utterance_level_memory() {
    let cfg = ModelConfig {
        decoder_memory: MemoryMode::UtteranceLevel,
        ..ModelConfig::toy(30)
    };
    let m = Model::new(cfg, 2).unwrap();
    let tree = figure_tree();
    let inp = input(&tree, &[3, 2, 4, 1, 2]);
    let mut tape = Tape::new();
    let enc = m.encode(&mut tape, &inp, &mut ForwardCtx::eval()).unwrap();
    let mem = tape.value(enc.memory).clone();
    assert_eq!(mem.shape(), &[5, 16]);
    let mut expected = tape.value(enc.utterance_states).clone();
    expected.add_assign(tape.value(enc.utterance_input));
    assert_eq!(mem, expected);
}

fn logits(m: &Model, inp: &ConversationInput, dec: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let enc = m.encode(&mut tape, inp, &mut ctx).unwrap();
    let l = m.decoder_forward(&mut tape, dec, enc.memory, &mut ctx).unwrap();
    tape.value(l).clone()
}

#[test]
fn decoder_is_causal() {
    let m = toy();
    let tree = figure_tree();
    let inp = input(&tree, &[3, 2, 4, 1, 2]);
    let a = logits(&m, &inp, &[0, 5, 6, 7, 8]);
    assert_eq!(a.shape(), &[5, 30]);
    let b = logits(&m, &inp, &[0, 5, 6, 20, 21]);
    for t in 0..3 {
        for c in 0..30 {
            assert!((a.at(t, c) - b.at(t, c)).abs() < 1e-12);
        }
    }
    assert!((0..30).any(|c| (a.at(3, c) - b.at(3, c)).abs() > 1e-6));
}

#[test]
fn embedding_is_tied() {
    let orig = toy();
    let mut m = toy();
    let e = m.embedding_id();
    for (c, v) in m.store_mut().get_mut(e).value.row_mut(11).iter_mut().enumerate() {
        *v += if c % 2 == 0 { 0.5 } else { -0.3 };
    }
    let inp = input(&chain(2), &[2, 2]);
    let (before, after) = (logits(&orig, &inp, &[0, 11]), logits(&m, &inp, &[0, 11]));
    // Output side: only column 11 moves at a position that never sees token 11.
    assert!((before.at(0, 11) - after.at(0, 11)).abs() > 1e-9);
    assert!((before.at(0, 12) - after.at(0, 12)).abs() < 1e-12);
    // Input side: the position fed token 11 changes everywhere.
    assert!((before.at(1, 12) - after.at(1, 12)).abs() > 1e-9);
}

#[test]
fn decoder_limits() {
    let m = toy();
    let inp = input(&chain(1), &[2]);
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let enc = m.encode(&mut tape, &inp, &mut ctx).unwrap();
    assert!(m.decoder_forward(&mut tape, &[0; 33], enc.memory, &mut ctx).is_err());
    assert!(m.decoder_forward(&mut tape, &[], enc.memory, &mut ctx).is_err());
}

#[test]
fn dropout_changes_training_pass_only() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..ModelConfig::toy(30)
    };
    let m = Model::new(cfg, 3).unwrap();
    let inp = input(&chain(3), &[2, 3, 2]);
    let run = |ctx: &mut ForwardCtx| {
        let mut tape = Tape::new();
        let enc = m.encode(&mut tape, &inp, ctx).unwrap();
        tape.value(enc.memory).clone()
    };
    assert_eq!(run(&mut ForwardCtx::eval()), run(&mut ForwardCtx::eval()));
    assert_eq!(run(&mut ForwardCtx::train(4)), run(&mut ForwardCtx::train(4)));
    assert_ne!(run(&mut ForwardCtx::train(4)), run(&mut ForwardCtx::eval()));
}

#[test]
fn checkpoint_round_trip() {
    let m = toy();
    let ckpt = m.to_checkpoint();
    let bytes = ckpt.encode();
    let back = Model::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.config(), m.config());
    for ((_, a), (_, b)) in m.store().iter().zip(back.store().iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn per_layer_tables_are_distinct() {
    let cfg = ModelConfig {
        thread_embeddings: ThreadEmbeddingScope::PerLayer,
        ..ModelConfig::toy(30)
    };
    let m = Model::new(cfg, 1).unwrap();
    assert_ne!(m.thread_table_id(0), m.thread_table_id(1));
    let g = Model::new(ModelConfig::toy(30), 1).unwrap();
    assert_eq!(g.thread_table_id(0), g.thread_table_id(1));
}
