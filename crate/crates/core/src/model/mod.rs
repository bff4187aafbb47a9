//! Image encoder, text encoder, fusion encoder and decoder, with the
//! contrastive projection and matching heads.

mod checkpoint;
mod config;

use std::cell::Cell;

use mvaema_tensor::init::trunc_normal;
use mvaema_tensor::{BoundParams, ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry, FORMAT_VERSION};
pub use config::{Blocks, ModelConfig, QuestionRouting, Variant};

use crate::error::{CoreError, Result};
use crate::tokenization::{Mode, TokenSequence};

/// Parameter tensors that exist only for the contrastive objective.
pub const ITC_PARAMS: [&str; 5] = ["itc.img.w", "itc.img.b", "itc.txt.w", "itc.txt.b", "itc.tau"];

#[derive(Clone, Copy)]
enum Init {
    /// Truncated normal with the configured std (embedding tables).
    Normal,
    /// Truncated normal with std 1/sqrt(fan_in) (projection matrices).
    FanIn,
    Zeros,
    Ones,
    Value(f64),
}

/// Names, shapes and initializers of every parameter, in registry order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim();
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.g"), vec![d], Init::Ones);
        push(format!("{p}.b"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.w{m}"), vec![d, d], Init::FanIn);
            push(format!("{p}.b{m}"), vec![d], Init::Zeros);
        }
        push(format!("{p}.ln.g"), vec![d], Init::Ones);
        push(format!("{p}.ln.b"), vec![d], Init::Zeros);
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, f], Init::FanIn);
        push(format!("{p}.b1"), vec![f], Init::Zeros);
        push(format!("{p}.w2"), vec![f, d], Init::FanIn);
        push(format!("{p}.b2"), vec![d], Init::Zeros);
        push(format!("{p}.ln.g"), vec![d], Init::Ones);
        push(format!("{p}.ln.b"), vec![d], Init::Zeros);
    };

    push("tok.emb".into(), vec![cfg.vocab_size, d], Init::Normal);

    push("img.patch.w".into(), vec![cfg.patch_dim, d], Init::FanIn);
    push("img.patch.b".into(), vec![d], Init::Zeros);
    push("img.cls".into(), vec![1, d], Init::Normal);
    push("img.pos".into(), vec![cfg.num_patches + 1, d], Init::Normal);
    for l in 0..cfg.layers {
        attn(&mut push, &format!("img.l{l}.sa"));
        ffn(&mut push, &format!("img.l{l}.ffn"));
    }
    ln(&mut push, "img.ln_f");

    push("txt.pos".into(), vec![cfg.max_text_len, d], Init::Normal);
    for l in 0..cfg.layers {
        attn(&mut push, &format!("txt.l{l}.sa"));
        ffn(&mut push, &format!("txt.l{l}.ffn"));
    }
    ln(&mut push, "txt.ln_f");

    push("fus.pos".into(), vec![cfg.max_text_len, d], Init::Normal);
    for l in 0..cfg.layers {
        if !cfg.share_fusion_text {
            attn(&mut push, &format!("fus.l{l}.sa"));
        }
        attn(&mut push, &format!("fus.l{l}.ca"));
        if !cfg.share_fusion_text {
            ffn(&mut push, &format!("fus.l{l}.ffn"));
        }
    }
    ln(&mut push, "fus.ln_f");

    push("dec.pos".into(), vec![cfg.decoder_positions(), d], Init::Normal);
    for l in 0..cfg.layers {
        attn(&mut push, &format!("dec.l{l}.sa"));
        attn(&mut push, &format!("dec.l{l}.ca"));
        ffn(&mut push, &format!("dec.l{l}.ffn"));
    }
    ln(&mut push, "dec.ln_f");
    push("lm.b".into(), vec![cfg.vocab_size], Init::Zeros);

    push("itc.img.w".into(), vec![d, cfg.itc_proj_dim], Init::FanIn);
    push("itc.img.b".into(), vec![cfg.itc_proj_dim], Init::Zeros);
    push("itc.txt.w".into(), vec![d, cfg.itc_proj_dim], Init::FanIn);
    push("itc.txt.b".into(), vec![cfg.itc_proj_dim], Init::Zeros);
    push("itc.tau".into(), vec![1], Init::Value(cfg.tau_init));

    push("itm.w".into(), vec![d, 1], Init::FanIn);
    push("itm.b".into(), vec![1], Init::Zeros);
    out
}

/// Expected `(name, shape)` list for a configuration, in registry order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// Parameters and configuration of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters: truncated normal weights (fan-in scaled for
    /// projections), zero biases, unit
    /// layer-norm gains, temperature at its initial value.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in layout(&config) {
            let t = match init {
                Init::Normal => trunc_normal(&mut rng, &shape, config.init_std),
                Init::FanIn => trunc_normal(&mut rng, &shape, 1.0 / (shape[0] as f64).sqrt()),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Value(v) => Tensor::full(&shape, T::of(v)),
            };
            params.insert(name, t)?;
        }
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let want = param_shapes(&config);
        if want.len() != params.len() {
            return Err(CoreError::Checkpoint(format!(
                "expected {} parameters, found {}",
                want.len(),
                params.len()
            )));
        }
        for ((name, shape), (have, t)) in want.iter().zip(params.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(CoreError::Checkpoint(format!(
                    "parameter `{have}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Clamps the stored temperature into its configured bounds.
    pub fn clamp_tau(&mut self) -> Result<()> {
        let (lo, hi) = (T::of(self.config.tau_min), T::of(self.config.tau_max));
        let tau = self.params.get_mut("itc.tau")?;
        for v in tau.data_mut() {
            *v = v.max(lo).min(hi);
        }
        Ok(())
    }

    /// Builds a net over caller-created vars, one per parameter in registry
    /// order (used by gradient checks, which own the leaves).
    pub fn bind_vars<'t, 'm>(&'m self, tape: &'t Tape<T>, vars: &[Var<'t, T>]) -> Result<Net<'t, 'm, T>> {
        if vars.len() != self.params.len() {
            return Err(CoreError::contract(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        Ok(Net {
            tape,
            p: BoundParams::from_vars(self.params.name_index(), vars.to_vec()),
            cfg: &self.config,
            emb_t: Cell::new(None),
        })
    }

    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape<T>) -> Net<'t, 'm, T> {
        Net {
            tape,
            p: self.params.bind(tape),
            cfg: &self.config,
            emb_t: Cell::new(None),
        }
    }
}

/// Output of the image encoder: the full sequence and its `<cls>` row.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t, T: Real> {
    pub seq: Var<'t, T>,
    pub cls: Var<'t, T>,
}

#[derive(Clone, Copy, Debug)]
pub struct Fused<'t, T: Real> {
    pub seq: Var<'t, T>,
    /// Hidden state at the `<encode>` position, `[1, d]`.
    pub encode: Var<'t, T>,
    /// Matching logit, `[1, 1]`.
    pub itm_logit: Var<'t, T>,
}

/// A model's parameters recorded on a tape.
pub struct Net<'t, 'm, T: Real> {
    tape: &'t Tape<T>,
    p: BoundParams<'t, T>,
    cfg: &'m ModelConfig,
    emb_t: Cell<Option<Var<'t, T>>>,
}

fn causal_mask(n: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = keys[j];
        }
    }
    m
}

fn key_mask(rows: usize, keys: &[bool]) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * keys.len());
    for _ in 0..rows {
        m.extend_from_slice(keys);
    }
    m
}

impl<'t, 'm, T: Real> Net<'t, 'm, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        Ok(self.p.get(name)?)
    }

    fn ln(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        Ok(x.layer_norm(g, b, self.cfg.ln_eps)?)
    }

    fn linear(&self, x: Var<'t, T>, w: &str, b: &str) -> Result<Var<'t, T>> {
        Ok(x.matmul(self.param(w)?)?.add_row(self.param(b)?)?)
    }

    /// Multi-head attention of `x` over `mem`. `visible[i * m + j]` says
    /// whether query `i` may see key `j`; `None` means all.
    fn attention(&self, prefix: &str, x: Var<'t, T>, mem: Var<'t, T>, visible: Option<&[bool]>) -> Result<Var<'t, T>> {
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(mem, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(mem, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let kt = k.transpose()?;
        let hd = self.cfg.head_dim();
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = q.slice(1, h * hd, hd)?;
            let kh = kt.slice(0, h * hd, hd)?;
            let s = qh.matmul(kh)?.scale(scale);
            let a = match visible {
                Some(mask) => s.masked_softmax(mask)?,
                None => s.softmax(1)?,
            };
            heads.push(a.matmul(v.slice(1, h * hd, hd)?)?);
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat(&heads, 1)?
        };
        self.linear(o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Pre-norm residual self-attention block.
    fn self_block(&self, prefix: &str, x: Var<'t, T>, visible: Option<&[bool]>) -> Result<Var<'t, T>> {
        let h = self.ln(x, &format!("{prefix}.ln"))?;
        Ok(x.add(self.attention(prefix, h, h, visible)?)?)
    }

    /// Pre-norm residual cross-attention block over `mem`.
    fn cross_block(&self, prefix: &str, x: Var<'t, T>, mem: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.ln(x, &format!("{prefix}.ln"))?;
        Ok(x.add(self.attention(prefix, h, mem, None)?)?)
    }

    fn ffn_block(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.ln(x, &format!("{prefix}.ln"))?;
        let h = self.linear(h, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?.gelu();
        Ok(x.add(self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))?)?)
    }

    fn positions(&self, table: &str, len: usize) -> Result<Var<'t, T>> {
        let pos = self.param(table)?;
        let avail = pos.shape()[0];
        if len > avail {
            return Err(CoreError::contract(
                "positions",
                format!("sequence of {len} exceeds {avail} positions of `{table}`"),
            ));
        }
        Ok(pos.slice(0, 0, len)?)
    }

    fn embed(&self, ids: &[usize], pos_table: &str) -> Result<Var<'t, T>> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(CoreError::contract(
                "embed",
                format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            ));
        }
        let tok = self.param("tok.emb")?.embedding(ids)?;
        Ok(tok.add(self.positions(pos_table, ids.len())?)?)
    }

    /// Encodes a `[patches, patch_dim]` input. The returned sequence has the
    /// image `<cls>` at row 0 followed by one row per patch.
    pub fn encode_image(&self, patches: Var<'t, T>) -> Result<Encoded<'t, T>> {
        let want = [self.cfg.num_patches, self.cfg.patch_dim];
        if patches.shape() != want {
            return Err(CoreError::contract(
                "encode_image",
                format!("patch input {:?}, expected {want:?}", patches.shape()),
            ));
        }
        let proj = self.linear(patches, "img.patch.w", "img.patch.b")?;
        let x = self.tape.concat(&[self.param("img.cls")?, proj], 0)?;
        let mut x = x.add(self.param("img.pos")?)?;
        for l in 0..self.cfg.layers {
            x = self.self_block(&format!("img.l{l}.sa"), x, None)?;
            x = self.ffn_block(&format!("img.l{l}.ffn"), x)?;
        }
        let seq = self.ln(x, "img.ln_f")?;
        Ok(Encoded { seq, cls: seq.row(0)? })
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.cfg.max_text_len {
            return Err(CoreError::contract(
                "text",
                format!("{} tokens exceed max_text_len {}", seq.len(), self.cfg.max_text_len),
            ));
        }
        Ok(())
    }

    /// Unimodal text encoder over a `<cls>`-framed sequence; pads are hidden
    /// from every query.
    pub fn encode_text(&self, seq: &TokenSequence) -> Result<Encoded<'t, T>> {
        if seq.mode != Mode::Cls {
            return Err(CoreError::Frame(format!("text encoder needs a cls sequence, got {}", seq.mode)));
        }
        seq.frame_index()?;
        self.check_len(seq)?;
        let keys: Vec<bool> = seq.mask.iter().map(|&m| m == 1).collect();
        let visible = key_mask(seq.len(), &keys);
        let mut x = self.embed(&seq.ids, "txt.pos")?;
        for l in 0..self.cfg.layers {
            if self.cfg.blocks.self_attention {
                x = self.self_block(&format!("txt.l{l}.sa"), x, Some(&visible))?;
            }
            x = self.ffn_block(&format!("txt.l{l}.ffn"), x)?;
        }
        let out = self.ln(x, "txt.ln_f")?;
        Ok(Encoded { seq: out, cls: out.row(0)? })
    }

    /// Image-grounded text encoder over an `<encode>`-framed sequence.
    pub fn fuse(&self, seq: &TokenSequence, image_seq: Var<'t, T>) -> Result<Fused<'t, T>> {
        if seq.mode != Mode::Encode {
            return Err(CoreError::Frame(format!("fusion encoder needs an encode sequence, got {}", seq.mode)));
        }
        let at = seq.frame_index()?;
        self.check_len(seq)?;
        let keys: Vec<bool> = seq.mask.iter().map(|&m| m == 1).collect();
        let visible = key_mask(seq.len(), &keys);
        let mut x = self.embed(&seq.ids, "fus.pos")?;
        let body = if self.cfg.share_fusion_text { "txt" } else { "fus" };
        for l in 0..self.cfg.layers {
            if self.cfg.blocks.self_attention {
                x = self.self_block(&format!("{body}.l{l}.sa"), x, Some(&visible))?;
            }
            if self.cfg.blocks.cross_attention {
                x = self.cross_block(&format!("fus.l{l}.ca"), x, image_seq)?;
            }
            x = self.ffn_block(&format!("{body}.l{l}.ffn"), x)?;
        }
        let out = self.ln(x, "fus.ln_f")?;
        let encode = out.row(at)?;
        let itm_logit = self.linear(encode, "itm.w", "itm.b")?;
        Ok(Fused {
            seq: out,
            encode,
            itm_logit,
        })
    }

    /// Records the shared output projection now so that later
    /// `Tape::rewind` calls past this point keep it alive.
    pub fn prepare_lm_head(&self) -> Result<()> {
        self.emb_transposed().map(|_| ())
    }

    fn emb_transposed(&self) -> Result<Var<'t, T>> {
        if let Some(v) = self.emb_t.get() {
            return Ok(v);
        }
        let v = self.param("tok.emb")?.transpose()?;
        self.emb_t.set(Some(v));
        Ok(v)
    }

    /// Causal decoder. The context is `prefix` followed by the
    /// `<decode>`-framed `seq`; cross-attention reads `memory`. Returns the
    /// hidden states of the `seq` positions, `[seq.len(), d]`.
    pub fn decode_hidden(&self, prefix: &[usize], seq: &TokenSequence, memory: Var<'t, T>) -> Result<Var<'t, T>> {
        if seq.mode != Mode::Decode {
            return Err(CoreError::Frame(format!("decoder needs a decode sequence, got {}", seq.mode)));
        }
        seq.frame_index()?;
        let mut ids = Vec::with_capacity(prefix.len() + seq.len());
        ids.extend_from_slice(prefix);
        ids.extend_from_slice(&seq.ids);
        let mut keys = vec![true; prefix.len()];
        keys.extend(seq.mask.iter().map(|&m| m == 1));
        let n = ids.len();
        let visible = causal_mask(n, &keys);
        let mut x = self.embed(&ids, "dec.pos")?;
        for l in 0..self.cfg.layers {
            if self.cfg.blocks.causal_self_attention {
                x = self.self_block(&format!("dec.l{l}.sa"), x, Some(&visible))?;
            }
            if self.cfg.blocks.cross_attention {
                x = self.cross_block(&format!("dec.l{l}.ca"), x, memory)?;
            }
            x = self.ffn_block(&format!("dec.l{l}.ffn"), x)?;
        }
        let x = if prefix.is_empty() {
            x
        } else {
            x.slice(0, prefix.len(), seq.len())?
        };
        self.ln(x, "dec.ln_f")
    }

    /// Vocabulary logits for decoder hidden states; the output projection
    /// is the transposed token embedding table plus a bias.
    pub fn lm_head(&self, hidden: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(hidden.matmul(self.emb_transposed()?)?.add_row(self.param("lm.b")?)?)
    }

    /// Logits at every `seq` position, `[seq.len(), vocab]`.
    pub fn decoder_forward(&self, prefix: &[usize], seq: &TokenSequence, memory: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.decode_hidden(prefix, seq, memory)?;
        self.lm_head(h)
    }

    /// Decoder prefix and cross-attention memory for a question, according to
    /// the configured routing.
    pub fn decoder_context(&self, question: &[usize], image_seq: Var<'t, T>) -> Result<(Vec<usize>, Var<'t, T>)> {
        let q = &question[..question.len().min(self.cfg.max_text_len)];
        match self.cfg.question_routing {
            QuestionRouting::Prefix => Ok((q.to_vec(), image_seq)),
            QuestionRouting::FusionOnly => {
                let seq = crate::tokenization::frame_ids(q, Mode::Encode, self.cfg.max_text_len)?;
                Ok((Vec::new(), self.fuse(&seq, image_seq)?.seq))
            }
        }
    }

    /// Projects `[n, d]` image and text summaries into the contrastive space
    /// and L2-normalizes each row (epsilon 1e-12 under the square root).
    pub fn itc_project(&self, image_cls: Var<'t, T>, text_cls: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let v = self.linear(image_cls, "itc.img.w", "itc.img.b")?.l2_normalize(1e-12);
        let t = self.linear(text_cls, "itc.txt.w", "itc.txt.b")?.l2_normalize(1e-12);
        Ok((v, t))
    }

    /// Learnable temperature, clamped into its bounds.
    pub fn tau(&self) -> Result<Var<'t, T>> {
        Ok(self
            .param("itc.tau")?
            .clamp(T::of(self.cfg.tau_min), T::of(self.cfg.tau_max)))
    }
}
