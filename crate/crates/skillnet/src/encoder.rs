//! Transformer encoder whose upper layers carry a bank of per-skill
//! feed-forward modules. A forward pass activates an explicit subset of the
//! bank and averages the active modules' outputs before the residual add,
//! so both compute and gradients touch only the routed modules.

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::rng::truncated_normal;
use crate::routing::SkillRegistry;
use crate::tensor::{NodeId, ParamSet, Tape, Tensor};

pub const ATTENTION_MASK_BIAS: f64 = -1e9;
pub(crate) const INIT_CUTOFF_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub type_vocab: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_inner: usize,
    pub layers: usize,
    /// How many of the top layers carry skill banks instead of one shared
    /// feed-forward module.
    pub skill_layers: usize,
    /// When nonzero, the skill layers route per token through this many
    /// gate-selected feed-forward experts instead of task-selected banks.
    #[serde(default)]
    pub moe_experts: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl EncoderConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 64,
            type_vocab: 2,
            hidden: 64,
            heads: 4,
            ffn_inner: 128,
            layers: 2,
            skill_layers: 1,
            moe_experts: 0,
            dropout: 0.0,
            ln_eps: 1e-12,
            init_std: 0.02,
        }
    }

    /// Switch the skill layers to token-routed mixture-of-experts modules.
    pub fn with_moe(mut self, experts: usize) -> Self {
        self.moe_experts = experts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.max_len == 0 || self.type_vocab == 0 {
            return Err(Error::Config("vocab, max_len, type_vocab must be positive".into()));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_inner == 0 {
            return Err(Error::Config("ffn_inner must be positive".into()));
        }
        if self.layers == 0 || self.skill_layers > self.layers {
            return Err(Error::Config(format!(
                "need 0 <= skill_layers ({}) <= layers ({}) with layers > 0",
                self.skill_layers, self.layers
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps >= 0.0) {
            return Err(Error::Config("ln_eps must be finite and non-negative".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        if self.moe_experts == 1 {
            return Err(Error::Config(
                "a token-routed mixture needs at least 2 experts (0 disables it)".into(),
            ));
        }
        Ok(())
    }
}

/// A padded batch of token sequences, ready for the encoder.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    batch: usize,
    seq_len: usize,
    tokens: Vec<usize>,
    types: Vec<usize>,
    lens: Vec<usize>,
}

impl EncodedBatch {
    pub fn new(rows: Vec<Vec<usize>>, types: Vec<Vec<usize>>, lens: Vec<usize>) -> Result<Self> {
        let batch = rows.len();
        if batch == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let seq_len = rows[0].len();
        if seq_len == 0 {
            return Err(Error::InvalidArgument("zero-length sequences".into()));
        }
        if rows.iter().any(|r| r.len() != seq_len)
            || types.len() != batch
            || types.iter().any(|r| r.len() != seq_len)
        {
            return Err(Error::ShapeMismatch {
                op: "batch",
                detail: "ragged token or type rows".into(),
            });
        }
        if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::InvalidArgument(format!(
                "lengths must be in 1..={} for every row",
                seq_len
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            tokens: rows.into_iter().flatten().collect(),
            types: types.into_iter().flatten().collect(),
            lens,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Flat row indices (b * L + t) of non-padding positions.
    pub fn real_rows(&self) -> Vec<usize> {
        let mut rows = Vec::new();
        for b in 0..self.batch {
            for t in 0..self.lens[b] {
                rows.push(b * self.seq_len + t);
            }
        }
        rows
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    skill_ids: Vec<String>,
}

impl Encoder {
    /// Create parameters for the trunk and one feed-forward module per
    /// registry skill at each skill layer. Weights draw from a truncated
    /// normal, biases start at zero, norm gains at one.
    pub fn init(
        config: EncoderConfig,
        registry: &SkillRegistry,
        params: &mut ParamSet,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        config.validate()?;
        let enc = Self::attach(config, registry)?;
        let c = &enc.config;
        let (d, f) = (c.hidden, c.ffn_inner);

        let weight = |params: &mut ParamSet, name: String, shape: &[usize], rng: &mut ChaCha20Rng| -> Result<()> {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = truncated_normal(rng, c.init_std, INIT_CUTOFF_SIGMA);
            }
            params.add(name, t)?;
            Ok(())
        };
        let zeros = |params: &mut ParamSet, name: String, shape: &[usize]| -> Result<()> {
            params.add(name, Tensor::zeros(shape))?;
            Ok(())
        };
        let norm = |params: &mut ParamSet, prefix: String| -> Result<()> {
            params.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0))?;
            params.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?;
            Ok(())
        };

        weight(params, "embed.token".into(), &[c.vocab_size, d], rng)?;
        weight(params, "embed.pos".into(), &[c.max_len, d], rng)?;
        weight(params, "embed.type".into(), &[c.type_vocab, d], rng)?;
        norm(params, "embed.norm".into())?;

        for i in 0..c.layers {
            for side in ["wq", "wk", "wv", "wo"] {
                weight(params, format!("layer.{i}.attn.{side}"), &[d, d], rng)?;
            }
            // no key bias: softmax is invariant to a per-row constant shift,
            // so a key bias could never receive gradient
            for side in ["bq", "bv", "bo"] {
                zeros(params, format!("layer.{i}.attn.{side}"), &[1, d])?;
            }
            norm(params, format!("layer.{i}.attn.norm"))?;

            if enc.is_skill_layer(i) && c.moe_experts > 0 {
                crate::moe::init_layer(
                    params,
                    &format!("layer.{i}.moe"),
                    d,
                    f,
                    c.moe_experts,
                    c.init_std,
                    INIT_CUTOFF_SIGMA,
                    rng,
                )?;
            } else if enc.is_skill_layer(i) {
                for sid in &enc.skill_ids {
                    weight(params, format!("layer.{i}.ffn.{sid}.w1"), &[d, f], rng)?;
                    zeros(params, format!("layer.{i}.ffn.{sid}.b1"), &[1, f])?;
                    weight(params, format!("layer.{i}.ffn.{sid}.w2"), &[f, d], rng)?;
                    zeros(params, format!("layer.{i}.ffn.{sid}.b2"), &[1, d])?;
                }
            } else {
                weight(params, format!("layer.{i}.ffn.w1"), &[d, f], rng)?;
                zeros(params, format!("layer.{i}.ffn.b1"), &[1, f])?;
                weight(params, format!("layer.{i}.ffn.w2"), &[f, d], rng)?;
                zeros(params, format!("layer.{i}.ffn.b2"), &[1, d])?;
            }
            norm(params, format!("layer.{i}.ffn.norm"))?;
        }
        Ok(enc)
    }

    /// Bind to an existing parameter set (e.g. after loading a checkpoint).
    pub fn attach(config: EncoderConfig, registry: &SkillRegistry) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            skill_ids: registry.ids().map(String::from).collect(),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_skills(&self) -> usize {
        self.skill_ids.len()
    }

    pub fn skill_ids(&self) -> &[String] {
        &self.skill_ids
    }

    pub fn is_skill_layer(&self, layer: usize) -> bool {
        layer >= self.config.layers - self.config.skill_layers
    }

    /// Append a feed-forward module for a newly registered skill at every
    /// skill layer, cloning the tensors of `source` bit for bit.
    pub fn add_skill_bank(
        &mut self,
        params: &mut ParamSet,
        new_id: &str,
        source_id: &str,
    ) -> Result<()> {
        if self.config.moe_experts > 0 {
            return Err(Error::Config(
                "token-routed mixture layers carry no per-skill banks".into(),
            ));
        }
        if self.skill_ids.iter().any(|s| s == new_id) {
            return Err(Error::Duplicate(new_id.to_string()));
        }
        if !self.skill_ids.iter().any(|s| s == source_id) {
            return Err(Error::UnknownSkill(source_id.to_string()));
        }
        for i in 0..self.config.layers {
            if !self.is_skill_layer(i) {
                continue;
            }
            for part in ["w1", "b1", "w2", "b2"] {
                let src = params
                    .by_name(&format!("layer.{i}.ffn.{source_id}.{part}"))?
                    .value
                    .clone();
                params.add(format!("layer.{i}.ffn.{new_id}.{part}"), src)?;
            }
        }
        self.skill_ids.push(new_id.to_string());
        Ok(())
    }

    /// All encoder parameter names, in creation order.
    pub fn param_names(&self) -> Vec<String> {
        self.named_params(None)
    }

    /// The feed-forward tensors owned by one skill, across all skill layers.
    pub fn skill_bank_names(&self, skill_id: &str) -> Result<Vec<String>> {
        if self.config.moe_experts > 0 {
            return Err(Error::Config(
                "token-routed mixture layers carry no per-skill banks".into(),
            ));
        }
        if !self.skill_ids.iter().any(|s| s == skill_id) {
            return Err(Error::UnknownSkill(skill_id.to_string()));
        }
        let mut names = Vec::new();
        for i in 0..self.config.layers {
            if self.is_skill_layer(i) {
                for part in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("layer.{i}.ffn.{skill_id}.{part}"));
                }
            }
        }
        Ok(names)
    }

    /// Trunk parameters plus the feed-forward banks of `active` only.
    pub fn active_param_names(&self, active: &[usize]) -> Result<Vec<String>> {
        self.check_active(active)?;
        Ok(self.named_params(Some(active)))
    }

    fn named_params(&self, active: Option<&[usize]>) -> Vec<String> {
        let mut names = vec![
            "embed.token".into(),
            "embed.pos".into(),
            "embed.type".into(),
            "embed.norm.gain".into(),
            "embed.norm.bias".into(),
        ];
        for i in 0..self.config.layers {
            for side in ["wq", "wk", "wv", "wo", "bq", "bv", "bo"] {
                names.push(format!("layer.{i}.attn.{side}"));
            }
            names.push(format!("layer.{i}.attn.norm.gain"));
            names.push(format!("layer.{i}.attn.norm.bias"));
            if self.is_skill_layer(i) && self.config.moe_experts > 0 {
                // every expert serves every task; routing is per token
                names.extend(crate::moe::layer_param_names(
                    &format!("layer.{i}.moe"),
                    self.config.moe_experts,
                ));
            } else if self.is_skill_layer(i) {
                let banks: Vec<usize> = match active {
                    Some(a) => a.to_vec(),
                    None => (0..self.skill_ids.len()).collect(),
                };
                for k in banks {
                    let sid = &self.skill_ids[k];
                    for part in ["w1", "b1", "w2", "b2"] {
                        names.push(format!("layer.{i}.ffn.{sid}.{part}"));
                    }
                }
            } else {
                for part in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("layer.{i}.ffn.{part}"));
                }
            }
            names.push(format!("layer.{i}.ffn.norm.gain"));
            names.push(format!("layer.{i}.ffn.norm.bias"));
        }
        names
    }

    fn check_active(&self, active: &[usize]) -> Result<()> {
        if active.is_empty() {
            return Err(Error::InvalidArgument("no active skills".into()));
        }
        if active.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "active set {:?} is not strictly ascending",
                active
            )));
        }
        if *active.last().unwrap() >= self.skill_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "active skill index {} out of range ({} banks)",
                active.last().unwrap(),
                self.skill_ids.len()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.seq_len > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds maximum {}",
                batch.seq_len, self.config.max_len
            )));
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {} outside vocabulary of {}",
                t, self.config.vocab_size
            )));
        }
        if let Some(&t) = batch.types.iter().find(|&&t| t >= self.config.type_vocab) {
            return Err(Error::InvalidArgument(format!(
                "segment id {} outside type vocabulary of {}",
                t, self.config.type_vocab
            )));
        }
        Ok(())
    }

    /// Encode a batch with the given active skill set (ascending bank
    /// indices). Returns hidden states of shape [batch, seq_len, hidden].
    /// `dropout_rng` enables dropout; pass None for deterministic inference.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        batch: &EncodedBatch,
        active: &[usize],
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        self.check_active(active)?;
        self.check_batch(batch)?;
        let c = &self.config;
        let (bs, seq, d) = (batch.batch, batch.seq_len, c.hidden);
        let heads = c.heads;
        let dh = d / heads;
        let rows = bs * seq;

        // embeddings
        let tok_table = tape.param_named(params, "embed.token")?;
        let pos_table = tape.param_named(params, "embed.pos")?;
        let typ_table = tape.param_named(params, "embed.type")?;
        let tok = tape.gather_rows(tok_table, &batch.tokens)?;
        let pos_ids: Vec<usize> = (0..rows).map(|r| r % seq).collect();
        let pos = tape.gather_rows(pos_table, &pos_ids)?;
        let typ = tape.gather_rows(typ_table, &batch.types)?;
        let mut h = tape.add(tok, pos)?;
        h = tape.add(h, typ)?;
        h = self.norm(tape, params, "embed.norm", h)?;
        h = self.maybe_dropout(tape, h, &mut dropout_rng)?;

        // additive key mask: 0 on real positions, a large negative bias on
        // padding, broadcast over query rows and heads
        let mut mask_data = vec![0.0; bs * heads * seq];
        for b in 0..bs {
            for hd in 0..heads {
                for t in batch.lens[b]..seq {
                    mask_data[(b * heads + hd) * seq + t] = ATTENTION_MASK_BIAS;
                }
            }
        }
        let mask = tape.constant_parts(vec![bs * heads, 1, seq], mask_data)?;

        for i in 0..c.layers {
            // self-attention sublayer
            let to_heads = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
                let x = tape.reshape(x, vec![bs, seq, heads, dh])?;
                let x = tape.permute_axes(x, &[0, 2, 1, 3])?;
                tape.reshape(x, vec![bs * heads, seq, dh])
            };
            let q = self.proj(tape, params, &format!("layer.{i}.attn"), "wq", "bq", h)?;
            let wk = tape.param_named(params, &format!("layer.{i}.attn.wk"))?;
            let k = tape.matmul(h, wk)?;
            let v = self.proj(tape, params, &format!("layer.{i}.attn"), "wv", "bv", h)?;
            let q = to_heads(tape, q)?;
            let k = to_heads(tape, k)?;
            let v = to_heads(tape, v)?;

            let scores = tape.batch_matmul_nt(q, k)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = tape.add(scores, mask)?;
            let mut probs = tape.softmax_rows(scores)?;
            probs = self.maybe_dropout(tape, probs, &mut dropout_rng)?;

            let ctx = tape.batch_matmul(probs, v)?;
            let ctx = tape.reshape(ctx, vec![bs, heads, seq, dh])?;
            let ctx = tape.permute_axes(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, vec![rows, d])?;
            let mut attn_out =
                self.proj(tape, params, &format!("layer.{i}.attn"), "wo", "bo", ctx)?;
            attn_out = self.maybe_dropout(tape, attn_out, &mut dropout_rng)?;
            let res = tape.add(h, attn_out)?;
            let a = self.norm(tape, params, &format!("layer.{i}.attn.norm"), res)?;

            // feed-forward sublayer: average the active modules' outputs
            // (or run the token-routed mixture), then add the residual and
            // normalize
            let ffn_out = if self.is_skill_layer(i) && c.moe_experts > 0 {
                crate::moe::moe_ffn(
                    tape,
                    params,
                    &format!("layer.{i}.moe"),
                    a,
                    c.moe_experts,
                    None,
                )?
                .out
            } else if self.is_skill_layer(i) {
                let outs: Vec<NodeId> = active
                    .iter()
                    .map(|&k| {
                        let sid = &self.skill_ids[k];
                        self.ffn(tape, params, &format!("layer.{i}.ffn.{sid}"), a)
                    })
                    .collect::<Result<_>>()?;
                tape.mean_of(&outs)?
            } else {
                self.ffn(tape, params, &format!("layer.{i}.ffn"), a)?
            };
            let ffn_out = self.maybe_dropout(tape, ffn_out, &mut dropout_rng)?;
            let res = tape.add(a, ffn_out)?;
            h = self.norm(tape, params, &format!("layer.{i}.ffn.norm"), res)?;
        }

        tape.reshape(h, vec![bs, seq, d])
    }

    fn proj(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prefix: &str,
        w: &str,
        b: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let wn = tape.param_named(params, &format!("{prefix}.{w}"))?;
        let bn = tape.param_named(params, &format!("{prefix}.{b}"))?;
        let y = tape.matmul(x, wn)?;
        tape.add(y, bn)
    }

    fn ffn(&self, tape: &mut Tape, params: &ParamSet, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param_named(params, &format!("{prefix}.w1"))?;
        let b1 = tape.param_named(params, &format!("{prefix}.b1"))?;
        let w2 = tape.param_named(params, &format!("{prefix}.w2"))?;
        let b2 = tape.param_named(params, &format!("{prefix}.b2"))?;
        let h1 = tape.matmul(x, w1)?;
        let hact = tape.add(h1, b1)?;
        let hact = tape.gelu(hact);
        let y = tape.matmul(hact, w2)?;
        tape.add(y, b2)
    }

    fn norm(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let gain = tape.param_named(params, &format!("{prefix}.gain"))?;
        let bias = tape.param_named(params, &format!("{prefix}.bias"))?;
        tape.layer_norm(x, gain, bias, self.config.ln_eps)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: NodeId,
        rng: &mut Option<&mut ChaCha20Rng>,
    ) -> Result<NodeId> {
        let p = self.config.dropout;
        if p == 0.0 {
            return Ok(x);
        }
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        use rand::Rng;
        let keep = 1.0 - p;
        let shape = tape.shape(x).to_vec();
        let data: Vec<f64> = (0..shape.iter().product())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant_parts(shape, data)?;
        tape.mul(x, mask)
    }
}
