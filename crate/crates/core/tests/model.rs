mod common;

use common::{max_gradient_error, rel_err, uniform, FD_STEP};
use frozenformer::data::{Padded, BOS, PAD};
use frozenformer::model::{
    self, multi_head_attention, param_specs, AttKind, AttentionWeights, DecoderSelfKind, Group,
    HeadDims, Mode, ModelConfig, ModelError, TaggedParam, Transformer,
};
use frozenformer::tensor::Tape;
use proptest::prelude::*;

fn toy(vocab: usize, d: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        d_ff: 2 * d,
        n_heads: heads,
        d_kq: None,
        d_v: None,
        n_enc_layers: 1,
        n_dec_layers: 1,
        mode: Mode::Translation,
        max_len: 16,
        decoder_self: DecoderSelfKind::Attention,
    }
}

fn lm(vocab: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: 0,
        mode: Mode::LanguageModel,
        ..toy(vocab, d, 2)
    }
}

#[test]
fn single_tied_embedding_matrix() {
    let m = Transformer::build(toy(10, 8, 2), 0).unwrap();
    let emb: Vec<_> = m
        .params()
        .iter()
        .filter(|p| p.tag().group == Group::Emb)
        .collect();
    assert_eq!(emb.len(), 1);
    assert_eq!(emb[0].shape(), &[10, 8]);
}

#[test]
fn language_model_has_no_context_attention() {
    let m = Transformer::build(lm(10, 8), 0).unwrap();
    assert!(m
        .params()
        .iter()
        .all(|p| p.tag().att_kind != Some(AttKind::Context)));
    assert!(m.params().iter().all(|p| !p.name().starts_with("enc.")));
}

#[test]
fn transformer_big_total_is_about_213m() {
    let cfg = ModelConfig {
        vocab_size: 36000,
        d_model: 1024,
        d_ff: 4096,
        n_heads: 8,
        n_enc_layers: 6,
        n_dec_layers: 6,
        max_len: 256,
        ..toy(10, 8, 2)
    };
    let total: usize = param_specs(&cfg)
        .unwrap()
        .iter()
        .map(TaggedParam::numel)
        .sum();
    assert!((total as f64 / 213e6 - 1.0).abs() < 0.02, "total {total}");
}

#[test]
fn every_tag_is_well_formed_and_groups_partition_the_total() {
    for cfg in [
        toy(10, 8, 2),
        lm(10, 8),
        ModelConfig {
            decoder_self: DecoderSelfKind::Ssru,
            ..toy(10, 8, 2)
        },
    ] {
        let m = Transformer::build(cfg, 1).unwrap();
        assert!(m.params().iter().all(|p| p.tag().is_well_formed()));
        let by_group: usize = m.params().count_by_group().values().sum();
        assert_eq!(by_group, m.params().total());
        assert!(m
            .params()
            .iter()
            .all(|p| p.trainable() == p.tensor().requires_grad()));
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = Transformer::build(toy(11, 8, 2), 42).unwrap();
    let b = Transformer::build(toy(11, 8, 2), 42).unwrap();
    let c = Transformer::build(toy(11, 8, 2), 43).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
}

#[test]
fn invalid_config_is_rejected() {
    let err = Transformer::build(
        ModelConfig {
            n_heads: 3,
            ..toy(10, 8, 2)
        },
        0,
    )
    .unwrap_err();
    assert!(matches!(err, ModelError::Config(_)));
    assert!(err.to_string().contains("divide"));
}

#[test]
fn out_of_range_token_is_an_index_error() {
    let m = Transformer::build(toy(10, 8, 2), 0).unwrap();
    let err = m.forward_seq2seq(&[4, 10], &[BOS]).unwrap_err();
    assert!(matches!(
        err,
        ModelError::TokenOutOfRange { id: 10, vocab: 10 }
    ));
    let err = m.forward_seq2seq(&[4], &[BOS; 17]).unwrap_err();
    assert!(matches!(err, ModelError::TooLong { len: 17, max: 16 }));
}

#[test]
fn empty_source_still_gives_finite_logits() {
    let m = Transformer::build(toy(10, 8, 2), 0).unwrap();
    let logits = m.forward_seq2seq(&[], &[BOS]).unwrap();
    assert_eq!(logits.shape(), &[1, 10]);
    assert!(logits.data().iter().all(|x| x.is_finite()));
}

#[test]
fn empty_source_row_in_a_batch_is_finite() {
    let m = Transformer::build(toy(10, 8, 2), 0).unwrap();
    let src = Padded::from_seqs(&[vec![], vec![4, 5, 6]]);
    let tgt = Padded::from_seqs(&[vec![BOS, 4], vec![BOS, 5]]);
    let logits = m.logits(Some(&src), &tgt).unwrap();
    assert!(logits.data().iter().all(|x| x.is_finite()));
}

#[test]
fn vocab_two_lm_distributions_sum_to_one() {
    let m = Transformer::build(lm(2, 8), 3).unwrap();
    let logits = m.forward_lm(&[0, 1, 1, 0, 1]).unwrap();
    for row in logits.data().chunks(2) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let total: f64 = row.iter().map(|x| (x - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn batched_rows_match_single_sequence_forward() {
    let m = Transformer::build(toy(12, 8, 2), 5).unwrap();
    let srcs = vec![vec![4, 5, 6, 2], vec![7, 2]];
    let tgts = vec![vec![BOS, 8, 9], vec![BOS, 10]];
    let batch = m
        .logits(Some(&Padded::from_seqs(&srcs)), &Padded::from_seqs(&tgts))
        .unwrap();
    for (r, (s, t)) in srcs.iter().zip(&tgts).enumerate() {
        let single = m.forward_seq2seq(s, t).unwrap();
        for (i, row) in single.data().chunks(12).enumerate() {
            let start = (r * 3 + i) * 12;
            for (a, b) in row.iter().zip(&batch.data()[start..start + 12]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut m = Transformer::build(
        ModelConfig {
            decoder_self: DecoderSelfKind::Ssru,
            ..toy(11, 8, 2)
        },
        9,
    )
    .unwrap();
    m.params_mut().get_mut(3).unwrap().set_trainable(false);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model::save(&m, &path).unwrap();
    let back = model::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.params(), m.params());
    for (a, b) in back.params().iter().zip(m.params()) {
        let bits = |p: &model::Parameter| p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a.trainable(), b.trainable());
    }
}

#[test]
fn checkpoint_rejects_garbage() {
    let err = model::read_checkpoint(&mut &b"not a checkpoint at all"[..]).unwrap_err();
    assert!(matches!(err, ModelError::Checkpoint(_)));
}

// Attention on its own.

fn leaf(tape: &mut Tape<'_>, shape: Vec<usize>, data: Vec<f64>) -> frozenformer::tensor::Var {
    tape.constant(shape, data).unwrap()
}

fn identity(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect()
}

#[test]
fn single_head_identity_attention_returns_value_row() {
    let d = 4;
    let mut tape = Tape::new();
    let w = AttentionWeights {
        wq: leaf(&mut tape, vec![d, d], identity(d)),
        bq: leaf(&mut tape, vec![d], vec![0.0; d]),
        wk: leaf(&mut tape, vec![d, d], identity(d)),
        bk: leaf(&mut tape, vec![d], vec![0.0; d]),
        wv: leaf(&mut tape, vec![d, d], identity(d)),
        bv: leaf(&mut tape, vec![d], vec![0.0; d]),
        wo: leaf(&mut tape, vec![d, d], identity(d)),
        bo: leaf(&mut tape, vec![d], vec![0.0; d]),
    };
    let q = leaf(&mut tape, vec![1, d], vec![0.3, -1.0, 2.0, 0.5]);
    let v = leaf(&mut tape, vec![1, d], vec![1.5, 2.5, -0.5, 4.0]);
    let dims = HeadDims {
        heads: 1,
        d_kq: d,
        d_v: d,
    };
    let out = multi_head_attention(&mut tape, q, v, &w, dims, 1, vec![true]).unwrap();
    assert_eq!(tape.value(out), &[1.5, 2.5, -0.5, 4.0]);
}

#[test]
fn attention_rejects_mask_of_wrong_size() {
    let d = 2;
    let mut tape = Tape::new();
    let mk = |tape: &mut Tape<'_>, s: Vec<usize>| {
        let n = s.iter().product();
        leaf(tape, s, vec![0.1; n])
    };
    let w = AttentionWeights {
        wq: mk(&mut tape, vec![d, d]),
        bq: mk(&mut tape, vec![d]),
        wk: mk(&mut tape, vec![d, d]),
        bk: mk(&mut tape, vec![d]),
        wv: mk(&mut tape, vec![d, d]),
        bv: mk(&mut tape, vec![d]),
        wo: mk(&mut tape, vec![d, d]),
        bo: mk(&mut tape, vec![d]),
    };
    let x = mk(&mut tape, vec![3, d]);
    let dims = HeadDims {
        heads: 1,
        d_kq: d,
        d_v: d,
    };
    assert!(multi_head_attention(&mut tape, x, x, &w, dims, 1, vec![true; 4]).is_err());
}

/// Brute-force attention: explicit loops over heads, queries and keys.
#[allow(clippy::too_many_arguments)]
fn attention_oracle(
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
    w: [&[Vec<f64>]; 4],
    b: [&[f64]; 4],
    heads: usize,
    dk: usize,
    dv: usize,
    keep: &dyn Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let proj = |x: &[Vec<f64>], w: &[Vec<f64>], b: &[f64]| -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                w.iter()
                    .zip(b)
                    .map(|(wr, bi)| bi + wr.iter().zip(row).map(|(a, c)| a * c).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let q = proj(q_in, w[0], b[0]);
    let k = proj(kv_in, w[1], b[1]);
    let v = proj(kv_in, w[2], b[2]);
    let mut cat = vec![vec![0.0; heads * dv]; q.len()];
    #[allow(clippy::needless_range_loop)]
    for h in 0..heads {
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                if keep(i, j) {
                    let dot: f64 = (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum();
                    scores.push((j, dot / (dk as f64).sqrt()));
                }
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for &(j, s) in &scores {
                let p = (s - max).exp() / z;
                for c in 0..dv {
                    cat[i][h * dv + c] += p * v[j][h * dv + c];
                }
            }
        }
    }
    proj(&cat, w[3], b[3])
}

fn rows(data: &[f64], n: usize) -> Vec<Vec<f64>> {
    data.chunks(n).map(<[f64]>::to_vec).collect()
}

#[test]
fn two_head_attention_matches_brute_force() {
    let (d, heads, dk, dv, tq, tk) = (6, 2, 2, 3, 4, 5);
    let shapes = [
        (heads * dk, d),
        (heads * dk, d),
        (heads * dv, d),
        (d, heads * dv),
    ];
    let ws: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, (r, c))| uniform(10 + i as u64, r * c))
        .collect();
    let bs: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, (r, _))| uniform(20 + i as u64, *r))
        .collect();
    let q_in = uniform(1, tq * d);
    let kv_in = uniform(2, tk * d);
    let keep_fn = |i: usize, j: usize| !(i + j).is_multiple_of(3) || j == 1;
    let keep: Vec<bool> = (0..tq)
        .flat_map(|i| (0..tk).map(move |j| keep_fn(i, j)))
        .collect();

    let mut tape = Tape::new();
    let mut vars = Vec::new();
    for ((r, c), (w, b)) in shapes.iter().zip(ws.iter().zip(&bs)) {
        vars.push(leaf(&mut tape, vec![*r, *c], w.clone()));
        vars.push(leaf(&mut tape, vec![*r], b.clone()));
    }
    let w = AttentionWeights {
        wq: vars[0],
        bq: vars[1],
        wk: vars[2],
        bk: vars[3],
        wv: vars[4],
        bv: vars[5],
        wo: vars[6],
        bo: vars[7],
    };
    let q = leaf(&mut tape, vec![tq, d], q_in.clone());
    let kv = leaf(&mut tape, vec![tk, d], kv_in.clone());
    let out = multi_head_attention(
        &mut tape,
        q,
        kv,
        &w,
        HeadDims {
            heads,
            d_kq: dk,
            d_v: dv,
        },
        1,
        keep,
    )
    .unwrap();

    let wm: Vec<Vec<Vec<f64>>> = shapes
        .iter()
        .zip(&ws)
        .map(|((_, c), w)| rows(w, *c))
        .collect();
    let expect = attention_oracle(
        &rows(&q_in, d),
        &rows(&kv_in, d),
        [&wm[0], &wm[1], &wm[2], &wm[3]],
        [&bs[0], &bs[1], &bs[2], &bs[3]],
        heads,
        dk,
        dv,
        &keep_fn,
    );
    for (a, b) in tape.value(out).iter().zip(expect.iter().flatten()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

// Whole-model forward against a straight-line reimplementation.

struct Oracle<'m> {
    m: &'m Transformer,
}

impl Oracle<'_> {
    fn mat(&self, name: &str) -> Vec<Vec<f64>> {
        let p = self
            .m
            .params()
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        rows(p.data(), p.shape()[1])
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.m.params().by_name(name).unwrap().data().to_vec()
    }

    fn linear(&self, x: &[Vec<f64>], w: &str, b: &str) -> Vec<Vec<f64>> {
        let (w, b) = (self.mat(w), self.vec(b));
        x.iter()
            .map(|row| {
                (0..w.len())
                    .map(|o| b[o] + (0..row.len()).map(|k| row[k] * w[o][k]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn norm(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let (g, b) = (
            self.vec(&format!("{prefix}.gain")),
            self.vec(&format!("{prefix}.bias")),
        );
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn embed(&self, tokens: &[usize], e: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = e[0].len();
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &t)| {
                (0..d)
                    .map(|i| {
                        let pair = (i / 2) as f64;
                        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        e[t][i] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn attention(
        &self,
        q_in: &[Vec<f64>],
        kv_in: &[Vec<f64>],
        prefix: &str,
        causal: bool,
    ) -> Vec<Vec<f64>> {
        let cfg = self.m.config();
        let ws: Vec<_> = ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|n| self.mat(&format!("{prefix}.{n}")))
            .collect();
        let bs: Vec<_> = ["bq", "bk", "bv", "bo"]
            .iter()
            .map(|n| self.vec(&format!("{prefix}.{n}")))
            .collect();
        attention_oracle(
            q_in,
            kv_in,
            [&ws[0], &ws[1], &ws[2], &ws[3]],
            [&bs[0], &bs[1], &bs[2], &bs[3]],
            cfg.n_heads,
            cfg.head_dim_kq(),
            cfg.head_dim_v(),
            &|i, j| !causal || j <= i,
        )
    }

    fn ffn(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let h: Vec<Vec<f64>> = self
            .linear(x, &format!("{prefix}.w_in"), &format!("{prefix}.b_in"))
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.linear(&h, &format!("{prefix}.w_out"), &format!("{prefix}.b_out"))
    }

    fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn logits(&self, src: &[usize], tgt: &[usize]) -> Vec<Vec<f64>> {
        let e = self.vec("emb.weight");
        self.logits_untied(src, tgt, [&e, &e, &e])
    }

    /// Forward pass where source lookup, target lookup and output
    /// projection each read their own embedding matrix.
    fn logits_untied(&self, src: &[usize], tgt: &[usize], emb: [&[f64]; 3]) -> Vec<Vec<f64>> {
        let d = self.m.config().d_model;
        let [e_src, e_tgt, e_out] = emb.map(|e| rows(e, d));
        let mut x = self.embed(src, &e_src);
        let h = self.norm(&x, "enc.0.self_norm");
        x = Self::add(&x, &self.attention(&h, &h, "enc.0.self_att", false));
        let h = self.norm(&x, "enc.0.ffn_norm");
        x = Self::add(&x, &self.ffn(&h, "enc.0.ffn"));
        let mem = self.norm(&x, "enc.norm");

        let mut y = self.embed(tgt, &e_tgt);
        let h = self.norm(&y, "dec.0.self_norm");
        y = Self::add(&y, &self.attention(&h, &h, "dec.0.self_att", true));
        let h = self.norm(&y, "dec.0.ctx_norm");
        y = Self::add(&y, &self.attention(&h, &mem, "dec.0.ctx_att", false));
        let h = self.norm(&y, "dec.0.ffn_norm");
        y = Self::add(&y, &self.ffn(&h, "dec.0.ffn"));
        let h = self.norm(&y, "dec.norm");
        h.iter()
            .map(|row| {
                e_out
                    .iter()
                    .map(|er| er.iter().zip(row).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    let m = Transformer::build(toy(13, 8, 2), 17).unwrap();
    let (src, tgt) = ([5, 9, 4, 12, 2], [BOS, 7, 8, 6]);
    let got = m.forward_seq2seq(&src, &tgt).unwrap();
    let want = Oracle { m: &m }.logits(&src, &tgt);
    assert_eq!(got.shape(), &[4, 13]);
    for (a, b) in got.data().iter().zip(want.iter().flatten()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn toy_translation_gradients_match_finite_differences() {
    let m = Transformer::build(toy(11, 8, 2), 3).unwrap();
    let src = Padded::from_seqs(&[vec![4, 5, 6, 2], vec![7, 8, 2]]);
    let tgt = Padded::from_seqs(&[vec![BOS, 9, 10], vec![BOS, 4]]);
    let out = vec![9, 10, 2, 4, 2, PAD];
    let err = max_gradient_error(m, Some(src), tgt, out);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn ssru_decoder_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        decoder_self: DecoderSelfKind::Ssru,
        ..toy(11, 8, 2)
    };
    let mut m = Transformer::build(cfg, 4).unwrap();
    // Freeze a couple of matrices so the check also covers frozen leaves.
    for name in ["enc.0.ffn.w_in", "dec.0.ssru.w_forget"] {
        let i = m.params().index_of(name).unwrap();
        m.params_mut().get_mut(i).unwrap().set_trainable(false);
    }
    let src = Padded::from_seqs(&[vec![4, 5, 2]]);
    let tgt = Padded::from_seqs(&[vec![BOS, 9, 10, 6]]);
    let err = max_gradient_error(m, Some(src), tgt, vec![9, 10, 6, 2]);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn tied_embedding_gradient_sums_its_three_uses() {
    let m = Transformer::build(toy(11, 8, 2), 8).unwrap();
    let (src, tgt, out) = ([4, 5, 2], [BOS, 6], [6, 2]);
    let idx = m.params().index_of("emb.weight").unwrap();
    let mut tape = Tape::new();
    let f = m
        .record(
            &mut tape,
            Some(&Padded::single(&src)),
            &Padded::single(&tgt),
        )
        .unwrap();
    let loss = tape.cross_entropy(f.logits, &out, PAD).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(f.bindings[idx].unwrap()).unwrap().to_vec();

    // The oracle lets each use read its own copy of the matrix, so the
    // per-use gradients can be taken separately by central differences.
    let oracle = Oracle { m: &m };
    let base = m.params().get(idx).unwrap().data().to_vec();
    let nll = |mats: &[Vec<f64>; 3]| -> f64 {
        let logits = oracle.logits_untied(&src, &tgt, [&mats[0], &mats[1], &mats[2]]);
        logits
            .iter()
            .zip(out)
            .map(|(row, y)| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() - row[y]
            })
            .sum::<f64>()
            / out.len() as f64
    };
    let mut per_use = [
        vec![0.0; base.len()],
        vec![0.0; base.len()],
        vec![0.0; base.len()],
    ];
    for (u, slot) in per_use.iter_mut().enumerate() {
        for j in 0..base.len() {
            let mut mats = [base.clone(), base.clone(), base.clone()];
            mats[u][j] += FD_STEP;
            let up = nll(&mats);
            mats[u][j] -= 2.0 * FD_STEP;
            slot[j] = (up - nll(&mats)) / (2.0 * FD_STEP);
        }
    }
    assert!(
        per_use.iter().all(|g| g.iter().any(|&x| x.abs() > 1e-6)),
        "every use contributes"
    );
    let worst = (0..base.len())
        .map(|j| rel_err(analytic[j], per_use[0][j] + per_use[1][j] + per_use[2][j]))
        .fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative error {worst}");
}

fn assert_prefix_identical(a: &[f64], b: &[f64], rows: usize, vocab: usize) {
    let bits = |x: &[f64]| {
        x[..rows * vocab]
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(a), bits(b));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decoder_is_causal(
        seed in 0u64..1000,
        src in prop::collection::vec(4usize..12, 1..6),
        tgt in prop::collection::vec(4usize..12, 1..8),
        j_frac in 0.0f64..1.0,
        replacement in 4usize..12,
        ssru in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            decoder_self: if ssru { DecoderSelfKind::Ssru } else { DecoderSelfKind::Attention },
            ..toy(12, 8, 2)
        };
        let m = Transformer::build(cfg, seed).unwrap();
        let mut tgt_in = vec![BOS];
        tgt_in.extend(&tgt);
        let j = 1 + ((j_frac * tgt.len() as f64) as usize).min(tgt.len() - 1);
        let mut perturbed = tgt_in.clone();
        perturbed[j] = replacement;
        let a = m.forward_seq2seq(&src, &tgt_in).unwrap();
        let b = m.forward_seq2seq(&src, &perturbed).unwrap();
        assert_prefix_identical(a.data(), b.data(), j, 12);
    }

    #[test]
    fn language_model_is_causal(
        seed in 0u64..1000,
        tokens in prop::collection::vec(0usize..9, 2..12),
        t_frac in 0.0f64..1.0,
        replacement in 0usize..9,
    ) {
        let m = Transformer::build(lm(9, 8), seed).unwrap();
        let t = ((t_frac * (tokens.len() - 1) as f64) as usize).min(tokens.len() - 2);
        let mut changed = tokens.clone();
        for tok in changed.iter_mut().skip(t + 1) {
            *tok = (*tok + replacement) % 9;
        }
        let a = m.forward_lm(&tokens).unwrap();
        let b = m.forward_lm(&changed).unwrap();
        assert_prefix_identical(a.data(), b.data(), t + 1, 9);
    }
}
