use super::config::{ArchMode, InteractionMask, ReuseLayer, ReuseSource};
use super::mask::MaskState;
use super::params::{AttnIds, BlockIds};
use super::NatModel;
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Var};

const LN_EPS: f64 = 1e-6;

/// Result of one forward pass.
///
/// `logits` rows follow `predicted_positions` (the masked positions for the
/// disentangled model, every position for the baseline).
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub predicted_positions: Vec<usize>,
    pub visible_positions: Vec<usize>,
    /// Final encoder features of the visible tokens, in position order.
    pub visible_features: Var,
    pub masked_positions: Vec<usize>,
    /// Decoder output for the mask tokens, before the head's norm.
    pub mask_features: Var,
    /// Cache handed to the next reuse step.
    pub reuse_cache: PrevFeatures,
}

/// Features kept from the previous decoding step.
///
/// `layers` holds one `positions.len() × d` matrix per reused layer: a single
/// final-layer map for last-layer reuse, or the input of every encoder layer
/// followed by the final output for layer-to-layer reuse.
#[derive(Clone, Debug, Default)]
pub struct PrevFeatures {
    pub positions: Vec<usize>,
    pub layers: Vec<Var>,
}

impl PrevFeatures {
    pub fn empty() -> Self {
        Self::default()
    }
}

struct Mod {
    shift: Var,
    gain: Var,
}

impl<F: Float> NatModel<F> {
    fn eps() -> F {
        F::from_f64c(LN_EPS)
    }

    /// Class-conditioning vector (`1 × d`).
    pub fn condition(&self, g: &mut Graph<'_, F>, label: usize) -> Result<Var> {
        if label >= self.config.num_classes {
            return Err(Error::Model(format!(
                "class label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let table = g.param(self.ids.class_embedding);
        Ok(g.gather_rows(table, &[label])?)
    }

    fn check_tokens(&self, tokens: &[usize], mask: &MaskState) -> Result<()> {
        let n = self.config.num_tokens();
        if tokens.len() != n || mask.len() != n {
            return Err(Error::Model(format!(
                "expected {n} tokens and mask entries, got {} and {}",
                tokens.len(),
                mask.len()
            )));
        }
        let k = self.config.codebook_size;
        for (i, &t) in tokens.iter().enumerate() {
            if !mask.masked[i] && t >= k {
                return Err(Error::Model(format!(
                    "token {t} at position {i} out of range for codebook of {k}"
                )));
            }
        }
        Ok(())
    }

    /// Embeddings of the visible tokens at `positions`.
    pub fn embed_visible(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let ids: Vec<usize> = positions.iter().map(|&p| tokens[p]).collect();
        let table = g.param(self.ids.token_embedding);
        let tok = g.gather_rows(table, &ids)?;
        let pos_table = g.param(self.ids.pos_embedding);
        let pos = g.gather_rows(pos_table, positions)?;
        Ok(g.add(tok, pos)?)
    }

    /// Shared `[MASK]` embedding plus position, one row per position.
    pub fn embed_masked(&self, g: &mut Graph<'_, F>, positions: &[usize]) -> Result<Var> {
        let m = g.param(self.ids.mask_embedding);
        let tok = g.gather_rows(m, &vec![0; positions.len()])?;
        let pos_table = g.param(self.ids.pos_embedding);
        let pos = g.gather_rows(pos_table, positions)?;
        Ok(g.add(tok, pos)?)
    }

    /// Full `N × d` input: visible positions use their token embedding,
    /// masked positions the mask embedding.
    pub fn embed(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
    ) -> Result<Var> {
        self.check_tokens(tokens, mask)?;
        if label >= self.config.num_classes {
            return Err(Error::Model(format!(
                "class label {label} out of range for {} classes",
                self.config.num_classes
            )));
        }
        let k = self.config.codebook_size;
        // Row k of the combined table is the mask embedding.
        let ids: Vec<usize> = (0..tokens.len())
            .map(|i| if mask.masked[i] { k } else { tokens[i] })
            .collect();
        let tok_table = g.param(self.ids.token_embedding);
        let mask_emb = g.param(self.ids.mask_embedding);
        let table = g.concat(&[tok_table, mask_emb], 0)?;
        let tok = g.gather_rows(table, &ids)?;
        let pos = g.param(self.ids.pos_embedding);
        Ok(g.add(tok, pos)?)
    }

    fn modulations(&self, g: &mut Graph<'_, F>, b: &BlockIds, cond: Var) -> Result<Vec<Mod>> {
        let d = self.config.d_model;
        let w = g.param(b.ada_w);
        let bias = g.param(b.ada_b);
        let m = g.matmul(cond, w)?;
        let m = g.add_row(m, bias)?;
        (0..b.norm_sites())
            .map(|s| {
                let shift = g.slice(m, 1, 2 * s * d, d)?;
                let scale = g.slice(m, 1, (2 * s + 1) * d, d)?;
                let gain = g.add_scalar(scale, F::one());
                Ok(Mod { shift, gain })
            })
            .collect()
    }

    fn mod_norm(&self, g: &mut Graph<'_, F>, x: Var, m: &Mod) -> Result<Var> {
        Ok(g.layer_norm(x, m.gain, m.shift, Self::eps())?)
    }

    fn linear(&self, g: &mut Graph<'_, F>, x: Var, w: usize, b: usize) -> Result<Var> {
        let w = g.param(w);
        let b = g.param(b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    /// Multi-head attention of `q_in` rows over `kv_in` rows. `keep`, when
    /// given, is a row-major `n_q × n_kv` mask of allowed pairs; a query row
    /// with nothing allowed is an error.
    pub fn attention(
        &self,
        g: &mut Graph<'_, F>,
        ids: &AttnIds,
        q_in: Var,
        kv_in: Var,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let n_q = g.rows(q_in);
        let n_kv = g.rows(kv_in);
        if let Some(keep) = keep {
            if keep.len() != n_q * n_kv {
                return Err(Error::Model(format!(
                    "attention mask has {} entries for {n_q}×{n_kv} scores",
                    keep.len()
                )));
            }
            if let Some(row) =
                (0..n_q).find(|&i| !keep[i * n_kv..(i + 1) * n_kv].iter().any(|&k| k))
            {
                return Err(Error::EmptyAttentionRow { row });
            }
        } else if n_kv == 0 && n_q > 0 {
            return Err(Error::EmptyAttentionRow { row: 0 });
        }
        let h = self.config.n_heads;
        let dh = self.config.head_dim();
        let q = self.linear(g, q_in, ids.wq, ids.bq)?;
        let k = self.linear(g, kv_in, ids.wk, ids.bk)?;
        let v = self.linear(g, kv_in, ids.wv, ids.bv)?;
        let kt = g.transpose(k);
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let qh = g.slice(q, 1, head * dh, dh)?;
            let kh = g.slice(kt, 0, head * dh, dh)?;
            let vh = g.slice(v, 1, head * dh, dh)?;
            let s = g.matmul(qh, kh)?;
            let s = g.scale(s, scale);
            let s = match keep {
                Some(keep) => g.masked_fill(s, keep, F::neg_infinity())?,
                None => s,
            };
            let a = g.softmax(s, 1)?;
            heads.push(g.matmul(a, vh)?);
        }
        let o = if h == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        self.linear(g, o, ids.wo, ids.bo)
    }

    pub fn self_attention(&self, g: &mut Graph<'_, F>, ids: &AttnIds, x: Var) -> Result<Var> {
        self.attention(g, ids, x, x, None)
    }

    /// Queries from `x`; keys and values from `[x; context]`.
    pub fn sc_attention(
        &self,
        g: &mut Graph<'_, F>,
        ids: &AttnIds,
        x: Var,
        context: Var,
    ) -> Result<Var> {
        let kv = g.concat(&[x, context], 0)?;
        self.attention(g, ids, x, kv, None)
    }

    fn mlp(&self, g: &mut Graph<'_, F>, b: &BlockIds, x: Var) -> Result<Var> {
        let h = self.linear(g, x, b.w1, b.b1)?;
        let h = g.gelu(h);
        self.linear(g, h, b.w2, b.b2)
    }

    /// One pre-norm block. With a context, attention keys and values cover
    /// both the block's own rows and the (normalized) context rows.
    fn block(
        &self,
        g: &mut Graph<'_, F>,
        b: &BlockIds,
        cond: Var,
        x: Var,
        context: Option<Var>,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let mods = self.modulations(g, b, cond)?;
        let h = self.mod_norm(g, x, &mods[0])?;
        let x = match (&b.cross, context) {
            (Some(cross), Some(ctx)) => {
                let a = self.self_attention(g, &b.attn, h)?;
                let x = g.add(x, a)?;
                if g.rows(ctx) == 0 {
                    x
                } else {
                    let h2 = self.mod_norm(g, x, &mods[1])?;
                    let c = self.mod_norm(g, ctx, &mods[1])?;
                    let a = self.attention(g, cross, h2, c, None)?;
                    g.add(x, a)?
                }
            }
            (_, Some(ctx)) => {
                let c = self.mod_norm(g, ctx, &mods[0])?;
                let a = self.sc_attention(g, &b.attn, h, c)?;
                g.add(x, a)?
            }
            (_, None) => {
                let a = self.attention(g, &b.attn, h, h, keep)?;
                g.add(x, a)?
            }
        };
        let hm = self.mod_norm(g, x, &mods[mods.len() - 1])?;
        let m = self.mlp(g, b, hm)?;
        Ok(g.add(x, m)?)
    }

    fn head(&self, g: &mut Graph<'_, F>, y: Var) -> Result<Var> {
        let (gn, bn) = self.ids.final_norm;
        let gn = g.param(gn);
        let bn = g.param(bn);
        let y = g.layer_norm(y, gn, bn, Self::eps())?;
        self.linear(g, y, self.ids.head_w, self.ids.head_b)
    }

    fn enc_norm(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (gn, bn) = self
            .ids
            .enc_norm
            .expect("disentangled model has an encoder norm");
        let gn = g.param(gn);
        let bn = g.param(bn);
        Ok(g.layer_norm(x, gn, bn, Self::eps())?)
    }

    /// Reuse projection `z + MLP(LN(z))`; identity when disabled.
    pub fn project_reuse(&self, g: &mut Graph<'_, F>, z: Var) -> Result<Var> {
        let Some(r) = self.ids.reuse else {
            return Ok(z);
        };
        let gn = g.param(r.norm_g);
        let bn = g.param(r.norm_b);
        let h = g.layer_norm(z, gn, bn, Self::eps())?;
        let h = self.linear(g, h, r.w1, r.b1)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, r.w2, r.b2)?;
        Ok(g.add(z, h)?)
    }

    /// Mode picked by the config: shared blocks for the baseline, encoder
    /// plus decoder otherwise.
    pub fn forward(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
    ) -> Result<ForwardOutput> {
        match self.config.arch {
            ArchMode::Baseline => self.forward_baseline(g, tokens, mask, label),
            ArchMode::Disentangled => self.forward_default(g, tokens, mask, label),
        }
    }

    /// Shared blocks over all `N` tokens, restricted by the configured
    /// interaction mask.
    pub fn forward_baseline(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
    ) -> Result<ForwardOutput> {
        let im = self.config.interactions;
        self.forward_baseline_with(g, tokens, mask, label, Some(im))
    }

    /// Baseline forward with an explicit interaction mask; `None` runs the
    /// plain transformer with no attention mask at all.
    pub fn forward_baseline_with(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
        interactions: Option<InteractionMask>,
    ) -> Result<ForwardOutput> {
        if self.config.arch != ArchMode::Baseline {
            return Err(Error::Model(
                "baseline forward needs a baseline-mode model".into(),
            ));
        }
        let mut x = self.embed(g, tokens, mask, label)?;
        let cond = self.condition(g, label)?;
        let n = tokens.len();
        let keep: Option<Vec<bool>> = interactions.map(|im| {
            let mut keep = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    keep.push(im.allows(mask.masked[i], mask.masked[j]));
                }
            }
            keep
        });
        for b in &self.ids.encoder {
            x = self.block(g, b, cond, x, None, keep.as_deref())?;
        }
        let logits = self.head(g, x)?;
        let visible_positions = mask.visible_positions();
        let masked_positions = mask.masked_positions();
        let visible_features = g.gather_rows(x, &visible_positions)?;
        let mask_features = g.gather_rows(x, &masked_positions)?;
        Ok(ForwardOutput {
            logits,
            predicted_positions: (0..n).collect(),
            visible_positions,
            visible_features,
            masked_positions,
            mask_features,
            reuse_cache: PrevFeatures::empty(),
        })
    }

    fn check_disentangled(&self) -> Result<()> {
        if self.config.arch != ArchMode::Disentangled {
            return Err(Error::Model(
                "this forward mode needs a disentangled model".into(),
            ));
        }
        Ok(())
    }

    /// Encoder over the visible tokens, decoder over the mask tokens.
    pub fn forward_default(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
    ) -> Result<ForwardOutput> {
        self.check_disentangled()?;
        self.check_tokens(tokens, mask)?;
        let cond = self.condition(g, label)?;
        let visible = mask.visible_positions();
        let masked = mask.masked_positions();
        let l2l = self.config.reuse_layer == ReuseLayer::LayerToLayer;
        let mut layers = Vec::new();
        let mut x = self.embed_visible(g, tokens, &visible)?;
        for b in &self.ids.encoder {
            if l2l {
                layers.push(x);
            }
            x = self.block(g, b, cond, x, None, None)?;
        }
        let z = self.enc_norm(g, x)?;
        layers.push(z);
        self.decode(g, cond, tokens.len(), visible, masked, z, layers, None)
    }

    /// Step with cross-step reuse: only `delta` (the newly decoded tokens)
    /// is encoded, attending to the projected previous features; older
    /// visible positions take their projected previous features directly.
    pub fn forward_reuse(
        &self,
        g: &mut Graph<'_, F>,
        tokens: &[usize],
        mask: &MaskState,
        label: usize,
        prev: &PrevFeatures,
        delta: &[usize],
    ) -> Result<ForwardOutput> {
        self.check_disentangled()?;
        self.check_tokens(tokens, mask)?;
        let n = tokens.len();
        let l2l = self.config.reuse_layer == ReuseLayer::LayerToLayer;
        let expected_layers = if l2l { self.config.n_enc + 1 } else { 1 };
        if prev.layers.len() != expected_layers {
            return Err(Error::Model(format!(
                "reuse cache has {} layers, expected {expected_layers}",
                prev.layers.len()
            )));
        }
        for &l in &prev.layers {
            if g.shape(l) != (prev.positions.len(), self.config.d_model) {
                return Err(Error::Model(
                    "reuse cache layer does not match its positions".into(),
                ));
            }
        }
        let mut delta = delta.to_vec();
        delta.sort_unstable();
        delta.dedup();
        // Row of each position inside the previous cache.
        let mut prev_row = vec![usize::MAX; n];
        for (r, &p) in prev.positions.iter().enumerate() {
            if p >= n {
                return Err(Error::Model(format!(
                    "reuse cache position {p} out of range"
                )));
            }
            prev_row[p] = r;
        }
        let mut in_delta = vec![false; n];
        for &p in &delta {
            if p >= n || mask.masked[p] {
                return Err(Error::Model(format!(
                    "newly decoded position {p} is not visible"
                )));
            }
            in_delta[p] = true;
        }
        let visible = mask.visible_positions();
        if let Some(&p) = visible
            .iter()
            .find(|&&p| !in_delta[p] && prev_row[p] == usize::MAX)
        {
            return Err(Error::Model(format!(
                "visible position {p} is neither newly decoded nor in the reuse cache"
            )));
        }
        let masked = mask.masked_positions();
        let cond = self.condition(g, label)?;
        let projected: Vec<Var> = prev
            .layers
            .iter()
            .map(|&l| self.project_reuse(g, l))
            .collect::<Result<_>>()?;
        let last = projected[projected.len() - 1];

        let mut delta_layers = Vec::new();
        let mut x = self.embed_visible(g, tokens, &delta)?;
        for (l, b) in self.ids.encoder.iter().enumerate() {
            if l2l {
                delta_layers.push(x);
            }
            let ctx = if l2l { projected[l] } else { last };
            x = self.block(g, b, cond, x, Some(ctx), None)?;
        }
        let z_delta = self.enc_norm(g, x)?;
        delta_layers.push(z_delta);

        let delta_row: Vec<usize> = {
            let mut r = vec![usize::MAX; n];
            for (i, &p) in delta.iter().enumerate() {
                r[p] = i;
            }
            r
        };
        let order: Vec<usize> = visible
            .iter()
            .map(|&p| {
                if in_delta[p] {
                    delta_row[p]
                } else {
                    delta.len() + prev_row[p]
                }
            })
            .collect();
        // Per-layer visible features: delta rows fresh, the rest projected.
        let merged: Vec<Var> = delta_layers
            .iter()
            .zip(&projected)
            .map(|(&fresh, &old)| {
                let both = g.concat(&[fresh, old], 0)?;
                Ok(g.gather_rows(both, &order)?)
            })
            .collect::<Result<_>>()?;
        let z_vis = merged[merged.len() - 1];
        let extra = match self.config.reuse_source {
            ReuseSource::VisibleOnly => None,
            ReuseSource::AllTokens => {
                let rows: Vec<usize> = masked
                    .iter()
                    .filter(|&&p| prev_row[p] != usize::MAX)
                    .map(|&p| prev_row[p])
                    .collect();
                Some(g.gather_rows(last, &rows)?)
            }
        };
        self.decode(g, cond, n, visible, masked, z_vis, merged, extra)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph<'_, F>,
        cond: Var,
        n: usize,
        visible: Vec<usize>,
        masked: Vec<usize>,
        z_vis: Var,
        layers: Vec<Var>,
        extra_context: Option<Var>,
    ) -> Result<ForwardOutput> {
        let mut ctx = match extra_context {
            Some(e) => g.concat(&[z_vis, e], 0)?,
            None => z_vis,
        };
        if g.rows(ctx) == 0 {
            ctx = g.param(
                self.ids
                    .start_token
                    .expect("disentangled model has a start token"),
            );
        }
        let mut y = self.embed_masked(g, &masked)?;
        for b in &self.ids.decoder {
            y = self.block(g, b, cond, y, Some(ctx), None)?;
        }
        let logits = self.head(g, y)?;
        let reuse_cache = match self.config.reuse_source {
            ReuseSource::VisibleOnly => PrevFeatures {
                positions: visible.clone(),
                layers,
            },
            ReuseSource::AllTokens => {
                // Mask-token rows come from the decoder output.
                let both = g.concat(&[z_vis, y], 0)?;
                let mut order = vec![0; n];
                for (i, &p) in visible.iter().enumerate() {
                    order[p] = i;
                }
                for (i, &p) in masked.iter().enumerate() {
                    order[p] = visible.len() + i;
                }
                PrevFeatures {
                    positions: (0..n).collect(),
                    layers: vec![g.gather_rows(both, &order)?],
                }
            }
        };
        Ok(ForwardOutput {
            logits,
            predicted_positions: masked.clone(),
            visible_positions: visible,
            visible_features: z_vis,
            masked_positions: masked,
            mask_features: y,
            reuse_cache,
        })
    }

    /// `N × d` features in position order, assembled from an output.
    pub fn full_features(&self, g: &mut Graph<'_, F>, out: &ForwardOutput) -> Result<Var> {
        let n = out.visible_positions.len() + out.masked_positions.len();
        let both = g.concat(&[out.visible_features, out.mask_features], 0)?;
        let mut order = vec![0; n];
        for (i, &p) in out.visible_positions.iter().enumerate() {
            order[p] = i;
        }
        for (i, &p) in out.masked_positions.iter().enumerate() {
            order[p] = out.visible_positions.len() + i;
        }
        Ok(g.gather_rows(both, &order)?)
    }
}
