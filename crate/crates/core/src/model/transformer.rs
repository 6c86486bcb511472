use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{DecoderSelfKind, Mode, ModelConfig};
use super::registry::{ParamSpec, Parameter, ParameterRegistry};
use super::tag::{AttKind, ComponentTag, MatrixRole, Side};
use super::ModelError;
use crate::data::{Padded, TokenId};
use crate::freezing::glorot_init;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ssru {
    w: usize,
    w_forget: usize,
    b_forget: usize,
}

#[derive(Debug, Clone, Copy)]
enum SelfMix {
    Attention(Attention),
    Ssru(Ssru),
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    att_norm: Norm,
    att: Attention,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_mix: SelfMix,
    context: Option<(Norm, Attention)>,
    ffn_norm: Norm,
    ffn: Ffn,
}

/// Registry indices of every parameter, grouped by where it is used.
#[derive(Debug, Clone)]
struct Layout {
    embedding: usize,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Option<Norm>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
}

struct Planner<'c> {
    cfg: &'c ModelConfig,
    specs: Vec<ParamSpec>,
}

impl Planner<'_> {
    fn add(&mut self, name: String, shape: Vec<usize>, tag: ComponentTag) -> usize {
        self.specs.push(ParamSpec { name, shape, tag });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, side: Side, layer: Option<usize>) -> Norm {
        let d = self.cfg.d_model;
        Norm {
            gain: self.add(
                format!("{prefix}.gain"),
                vec![d],
                ComponentTag::other(side, layer, MatrixRole::NormGain),
            ),
            bias: self.add(
                format!("{prefix}.bias"),
                vec![d],
                ComponentTag::other(side, layer, MatrixRole::NormBias),
            ),
        }
    }

    fn attention(&mut self, prefix: &str, side: Side, kind: AttKind, layer: usize) -> Attention {
        let d = self.cfg.d_model;
        let kq = self.cfg.n_heads * self.cfg.head_dim_kq();
        let v = self.cfg.n_heads * self.cfg.head_dim_v();
        let tag = |role| ComponentTag::attention(side, kind, layer, role);
        let bias = ComponentTag::other(side, Some(layer), MatrixRole::Bias);
        Attention {
            wq: self.add(format!("{prefix}.wq"), vec![kq, d], tag(MatrixRole::Query)),
            bq: self.add(format!("{prefix}.bq"), vec![kq], bias),
            wk: self.add(format!("{prefix}.wk"), vec![kq, d], tag(MatrixRole::Key)),
            bk: self.add(format!("{prefix}.bk"), vec![kq], bias),
            wv: self.add(format!("{prefix}.wv"), vec![v, d], tag(MatrixRole::Value)),
            bv: self.add(format!("{prefix}.bv"), vec![v], bias),
            wo: self.add(format!("{prefix}.wo"), vec![d, v], tag(MatrixRole::Output)),
            bo: self.add(format!("{prefix}.bo"), vec![d], bias),
        }
    }

    fn ffn(&mut self, prefix: &str, side: Side, layer: usize) -> Ffn {
        let (d, ff) = (self.cfg.d_model, self.cfg.d_ff);
        let bias = ComponentTag::other(side, Some(layer), MatrixRole::Bias);
        Ffn {
            w_in: self.add(
                format!("{prefix}.w_in"),
                vec![ff, d],
                ComponentTag::ffn(side, layer, MatrixRole::FfnIn),
            ),
            b_in: self.add(format!("{prefix}.b_in"), vec![ff], bias),
            w_out: self.add(
                format!("{prefix}.w_out"),
                vec![d, ff],
                ComponentTag::ffn(side, layer, MatrixRole::FfnOut),
            ),
            b_out: self.add(format!("{prefix}.b_out"), vec![d], bias),
        }
    }

    fn ssru(&mut self, prefix: &str, layer: usize) -> Ssru {
        let d = self.cfg.d_model;
        let tag = |role| ComponentTag::attention(Side::Decoder, AttKind::SelfAttn, layer, role);
        Ssru {
            w: self.add(
                format!("{prefix}.w"),
                vec![d, d],
                tag(MatrixRole::RecurrentIn),
            ),
            w_forget: self.add(
                format!("{prefix}.w_forget"),
                vec![d, d],
                tag(MatrixRole::RecurrentForget),
            ),
            b_forget: self.add(
                format!("{prefix}.b_forget"),
                vec![d],
                ComponentTag::other(Side::Decoder, Some(layer), MatrixRole::Bias),
            ),
        }
    }
}

fn plan(cfg: &ModelConfig) -> Result<(Vec<ParamSpec>, Layout), ModelError> {
    cfg.validate()?;
    let mut p = Planner {
        cfg,
        specs: Vec::new(),
    };
    let embedding = p.add(
        "emb.weight".into(),
        vec![cfg.vocab_size, cfg.d_model],
        ComponentTag::embedding(),
    );
    let encoder = (0..cfg.n_enc_layers)
        .map(|i| EncoderLayer {
            att_norm: p.norm(&format!("enc.{i}.self_norm"), Side::Encoder, Some(i)),
            att: p.attention(
                &format!("enc.{i}.self_att"),
                Side::Encoder,
                AttKind::SelfAttn,
                i,
            ),
            ffn_norm: p.norm(&format!("enc.{i}.ffn_norm"), Side::Encoder, Some(i)),
            ffn: p.ffn(&format!("enc.{i}.ffn"), Side::Encoder, i),
        })
        .collect();
    let encoder_norm = (cfg.n_enc_layers > 0).then(|| p.norm("enc.norm", Side::Encoder, None));
    let decoder = (0..cfg.n_dec_layers)
        .map(|i| {
            let self_norm = p.norm(&format!("dec.{i}.self_norm"), Side::Decoder, Some(i));
            let self_mix = match cfg.decoder_self {
                DecoderSelfKind::Attention => SelfMix::Attention(p.attention(
                    &format!("dec.{i}.self_att"),
                    Side::Decoder,
                    AttKind::SelfAttn,
                    i,
                )),
                DecoderSelfKind::Ssru => SelfMix::Ssru(p.ssru(&format!("dec.{i}.ssru"), i)),
            };
            let context = (cfg.mode == Mode::Translation).then(|| {
                (
                    p.norm(&format!("dec.{i}.ctx_norm"), Side::Decoder, Some(i)),
                    p.attention(
                        &format!("dec.{i}.ctx_att"),
                        Side::Decoder,
                        AttKind::Context,
                        i,
                    ),
                )
            });
            DecoderLayer {
                self_norm,
                self_mix,
                context,
                ffn_norm: p.norm(&format!("dec.{i}.ffn_norm"), Side::Decoder, Some(i)),
                ffn: p.ffn(&format!("dec.{i}.ffn"), Side::Decoder, i),
            }
        })
        .collect();
    let decoder_norm = p.norm("dec.norm", Side::Decoder, None);
    let layout = Layout {
        embedding,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
    };
    Ok((p.specs, layout))
}

/// Every parameter the builder would create for `cfg`, in registry order,
/// without allocating any values.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    plan(cfg).map(|(specs, _)| specs)
}

/// Sinusoidal position table `[max_len, d]`.
pub fn positional_encodings(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Encoder-decoder (or decoder-only) transformer with one embedding
/// matrix shared by both input lookups and the output projection.
#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    params: ParameterRegistry,
    layout: Layout,
    positions: Vec<f64>,
}

/// Result of recording a forward pass: logits `[rows·width, vocab]` and the
/// tape variable bound to each registry entry.
pub struct Forward {
    pub logits: Var,
    pub bindings: Vec<Option<Var>>,
}

impl Transformer {
    /// Builds the model with Glorot weight matrices drawn in registry order
    /// from a generator seeded by `seed`; gains start at 1, biases at 0.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (specs, layout) = plan(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterRegistry::new();
        for spec in specs {
            let tensor = match spec.tag.role {
                Some(MatrixRole::NormGain) => Tensor::filled(spec.shape.clone(), 1.0)?,
                Some(MatrixRole::NormBias | MatrixRole::Bias) => Tensor::zeros(spec.shape.clone())?,
                _ => glorot_init(&spec.shape, &mut rng)?,
            };
            params.push(Parameter::new(spec.name, tensor, spec.tag, true))?;
        }
        Ok(Self::assemble(config, params, layout))
    }

    /// Reattaches a registry to its config, checking that names and shapes
    /// are exactly those the builder would produce.
    pub fn from_parts(config: ModelConfig, params: ParameterRegistry) -> Result<Self, ModelError> {
        let (specs, layout) = plan(&config)?;
        if specs.len() != params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            use super::registry::TaggedParam;
            if spec.name != p.name() || spec.shape != p.shape() || spec.tag != *p.tag() {
                return Err(ModelError::Layout(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name(),
                    p.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParameterRegistry, layout: Layout) -> Self {
        let positions = positional_encodings(config.max_len, config.d_model);
        Self {
            config,
            params,
            layout,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    fn check_tokens(&self, p: &Padded) -> Result<(), ModelError> {
        if p.width() > self.config.max_len {
            return Err(ModelError::TooLong {
                len: p.width(),
                max: self.config.max_len,
            });
        }
        match p.ids().iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Records the forward pass on `tape`. `src` must be given exactly in
    /// translation mode, with the same number of rows as `tgt`.
    pub fn record<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        src: Option<&Padded>,
        tgt: &Padded,
    ) -> Result<Forward, ModelError> {
        match (self.config.mode, src) {
            (Mode::Translation, None) => {
                return Err(ModelError::WrongMode {
                    op: "a forward pass without source",
                    mode: Mode::Translation,
                })
            }
            (Mode::LanguageModel, Some(_)) => {
                return Err(ModelError::WrongMode {
                    op: "a forward pass with source",
                    mode: Mode::LanguageModel,
                })
            }
            _ => {}
        }
        if tgt.width() == 0 || tgt.rows() == 0 {
            return Err(ModelError::EmptyTarget);
        }
        self.check_tokens(tgt)?;
        if let Some(src) = src {
            self.check_tokens(src)?;
            if src.rows() != tgt.rows() {
                return Err(ModelError::BatchMismatch(format!(
                    "{} source rows but {} target rows",
                    src.rows(),
                    tgt.rows()
                )));
            }
        }
        let mut rec = Recorder {
            model: self,
            tape,
            bound: vec![None; self.params.len()],
        };
        let logits = rec.forward(src, tgt)?;
        Ok(Forward {
            logits,
            bindings: rec.bound,
        })
    }

    /// Batched logits `[rows·width, vocab]` without keeping the tape.
    pub fn logits(&self, src: Option<&Padded>, tgt: &Padded) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let f = self.record(&mut tape, src, tgt)?;
        Ok(tape.to_tensor(f.logits)?)
    }

    /// Logits `[len(tgt_in), vocab]` for one source/target pair.
    pub fn forward_seq2seq(
        &self,
        src: &[TokenId],
        tgt_in: &[TokenId],
    ) -> Result<Tensor, ModelError> {
        if self.config.mode != Mode::Translation {
            return Err(ModelError::WrongMode {
                op: "forward_seq2seq",
                mode: self.config.mode,
            });
        }
        self.logits(Some(&Padded::single(src)), &Padded::single(tgt_in))
    }

    /// Logits `[len(tokens), vocab]` for a decoder-only model.
    pub fn forward_lm(&self, tokens: &[TokenId]) -> Result<Tensor, ModelError> {
        if self.config.mode != Mode::LanguageModel {
            return Err(ModelError::WrongMode {
                op: "forward_lm",
                mode: self.config.mode,
            });
        }
        self.logits(None, &Padded::single(tokens))
    }
}

struct Recorder<'m, 't> {
    model: &'m Transformer,
    tape: &'t mut Tape<'m>,
    bound: Vec<Option<Var>>,
}

type Res<T> = Result<T, ModelError>;

impl<'m> Recorder<'m, '_> {
    fn p(&mut self, idx: usize) -> Var {
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let param = self
            .model
            .params
            .get(idx)
            .expect("layout index within registry");
        let v = self.tape.leaf(param.tensor());
        self.bound[idx] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Res<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul_bt(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Res<Var> {
        let (g, b) = (self.p(n.gain), self.p(n.bias));
        Ok(self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)?)
    }

    fn embed(&mut self, tokens: &Padded) -> Res<Var> {
        let d = self.model.config.d_model;
        let e = self.p(self.model.layout.embedding);
        let looked_up = self.tape.gather_rows(e, tokens.ids())?;
        let scaled = self.tape.scale(looked_up, (d as f64).sqrt())?;
        let w = tokens.width();
        let pos: Vec<f64> = (0..tokens.rows())
            .flat_map(|_| self.model.positions[..w * d].iter().copied())
            .collect();
        let pos = self.tape.constant(vec![tokens.rows() * w, d], pos)?;
        Ok(self.tape.add(scaled, pos)?)
    }

    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        a: Attention,
        blocks: usize,
        keep: Vec<bool>,
    ) -> Res<Var> {
        let w = AttentionWeights {
            wq: self.p(a.wq),
            bq: self.p(a.bq),
            wk: self.p(a.wk),
            bk: self.p(a.bk),
            wv: self.p(a.wv),
            bv: self.p(a.bv),
            wo: self.p(a.wo),
            bo: self.p(a.bo),
        };
        let cfg = &self.model.config;
        let heads = HeadDims {
            heads: cfg.n_heads,
            d_kq: cfg.head_dim_kq(),
            d_v: cfg.head_dim_v(),
        };
        Ok(multi_head_attention(
            self.tape, q_in, kv_in, &w, heads, blocks, keep,
        )?)
    }

    fn ffn(&mut self, x: Var, f: Ffn) -> Res<Var> {
        let h = self.linear(x, f.w_in, f.b_in)?;
        let h = self.tape.relu(h)?;
        self.linear(h, f.w_out, f.b_out)
    }

    fn ssru(&mut self, x: Var, s: Ssru, seq_len: usize) -> Res<Var> {
        let w = self.p(s.w);
        let u = self.tape.matmul_bt(x, w)?;
        let f = self.linear(x, s.w_forget, s.b_forget)?;
        let f = self.tape.sigmoid(f)?;
        let c = self.tape.gated_scan(f, u, seq_len)?;
        Ok(self.tape.relu(c)?)
    }

    fn residual(&mut self, x: Var, delta: Var) -> Res<Var> {
        Ok(self.tape.add(x, delta)?)
    }

    fn encode(&mut self, src: &Padded) -> Res<Var> {
        let model = self.model;
        let (b, s) = (src.rows(), src.width());
        let key_ok: Vec<bool> = src.mask();
        let keep: Vec<bool> = (0..b)
            .flat_map(|r| {
                let row = &key_ok[r * s..(r + 1) * s];
                (0..s).flat_map(move |_| row.iter().copied())
            })
            .collect();
        let mut x = self.embed(src)?;
        for layer in &model.layout.encoder {
            let h = self.norm(x, layer.att_norm)?;
            let a = self.attention(h, h, layer.att, b, keep.clone())?;
            x = self.residual(x, a)?;
            let h = self.norm(x, layer.ffn_norm)?;
            let f = self.ffn(h, layer.ffn)?;
            x = self.residual(x, f)?;
        }
        let n = model
            .layout
            .encoder_norm
            .expect("translation models have an encoder norm");
        self.norm(x, n)
    }

    fn forward(&mut self, src: Option<&Padded>, tgt: &Padded) -> Res<Var> {
        let model = self.model;
        let (b, t) = (tgt.rows(), tgt.width());
        // An all-empty source has no rows to encode; context attention then
        // contributes nothing.
        let memory = match src {
            Some(s) if s.width() > 0 => Some((self.encode(s)?, s)),
            _ => None,
        };
        let causal: Vec<bool> = (0..b * t)
            .flat_map(|r| (0..t).map(move |j| j <= r % t))
            .collect();
        let mut x = self.embed(tgt)?;
        for layer in &model.layout.decoder {
            let h = self.norm(x, layer.self_norm)?;
            let m = match layer.self_mix {
                SelfMix::Attention(a) => self.attention(h, h, a, b, causal.clone())?,
                SelfMix::Ssru(s) => self.ssru(h, s, t)?,
            };
            x = self.residual(x, m)?;
            if let (Some((norm, att)), Some((mem, s))) = (layer.context, memory) {
                let h = self.norm(x, norm)?;
                let sw = s.width();
                let keep: Vec<bool> = (0..b * t)
                    .flat_map(|r| (0..sw).map(move |j| j < s.lens()[r / t]))
                    .collect();
                let c = self.attention(h, mem, att, b, keep)?;
                x = self.residual(x, c)?;
            }
            let h = self.norm(x, layer.ffn_norm)?;
            let f = self.ffn(h, layer.ffn)?;
            x = self.residual(x, f)?;
        }
        let h = self.norm(x, model.layout.decoder_norm)?;
        let e = self.p(model.layout.embedding);
        Ok(self.tape.matmul_bt(h, e)?)
    }
}

/// Projection weights `[out, in]` and biases of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub heads: usize,
    pub d_kq: usize,
    pub d_v: usize,
}

/// Scaled dot-product attention of `[blocks·tq, d]` queries over
/// `[blocks·tk, d]` keys/values, one softmax per head with scale
/// `1/sqrt(d_kq)`, heads concatenated and projected by `wo`.
///
/// `keep` is `[blocks·tq, tk]`, `true` where a query may attend. A query row
/// with nothing to attend to yields a zero output row.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    q_in: Var,
    kv_in: Var,
    w: &AttentionWeights,
    dims: HeadDims,
    blocks: usize,
    keep: Vec<bool>,
) -> Result<Var, TensorError> {
    let HeadDims { heads, d_kq, d_v } = dims;
    let rows = tape.shape(q_in)[0];
    let tk = tape.shape(kv_in)[0] / blocks.max(1);
    if keep.len() != rows * tk {
        return Err(TensorError::DimensionMismatch {
            op: "multi_head_attention",
            left: vec![rows, tk],
            right: vec![keep.len()],
        });
    }
    let (keep, live) = revive_dead_rows(keep, rows, tk);
    let linear = |tape: &mut Tape<'_>, x, w, b| -> Result<Var, TensorError> {
        let y = tape.matmul_bt(x, w)?;
        tape.add_row(y, b)
    };
    let q = linear(tape, q_in, w.wq, w.bq)?;
    let k = linear(tape, kv_in, w.wk, w.bk)?;
    let v = linear(tape, kv_in, w.wv, w.bv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * d_kq, d_kq)?;
        let kh = tape.slice_cols(k, h * d_kq, d_kq)?;
        let vh = tape.slice_cols(v, h * d_v, d_v)?;
        let scores = tape.block_matmul_bt(qh, kh, blocks)?;
        let scores = tape.scale(scores, 1.0 / (d_kq as f64).sqrt())?;
        let probs = tape.softmax_rows(scores, Some(&keep))?;
        outs.push(tape.block_matmul(probs, vh, blocks)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let out = linear(tape, cat, w.wo, w.bo)?;
    match live {
        None => Ok(out),
        Some(live) => {
            let d = tape.shape(out)[1];
            let m = live
                .iter()
                .flat_map(|&l| std::iter::repeat_n(if l { 1.0 } else { 0.0 }, d))
                .collect();
            let m = tape.constant(vec![rows, d], m)?;
            tape.mul(out, m)
        }
    }
}

/// Rows of `keep` with no kept entry are opened up so softmax stays
/// defined; the returned row liveness lets the caller zero their output.
fn revive_dead_rows(mut keep: Vec<bool>, rows: usize, n: usize) -> (Vec<bool>, Option<Vec<bool>>) {
    let live: Vec<bool> = (0..rows)
        .map(|r| keep[r * n..(r + 1) * n].iter().any(|&k| k))
        .collect();
    if live.iter().all(|&l| l) {
        return (keep, None);
    }
    for (r, _) in live.iter().enumerate().filter(|(_, &l)| !l) {
        keep[r * n..(r + 1) * n].iter_mut().for_each(|k| *k = true);
    }
    (keep, Some(live))
}
