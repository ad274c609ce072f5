use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchMode {
    /// Visible and mask tokens share every block.
    Baseline,
    /// Visible tokens go through the encoder, mask tokens through the decoder.
    Disentangled,
}

/// Which of the four token-type interactions attention may use.
/// `m_to_v` means mask-token queries attending to visible-token keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionMask {
    pub m_to_v: bool,
    pub v_to_m: bool,
    pub v_to_v: bool,
    pub m_to_m: bool,
}

impl InteractionMask {
    pub const ALL: Self = Self {
        m_to_v: true,
        v_to_m: true,
        v_to_v: true,
        m_to_m: true,
    };

    pub fn allows(&self, query_masked: bool, key_masked: bool) -> bool {
        match (query_masked, key_masked) {
            (true, false) => self.m_to_v,
            (false, true) => self.v_to_m,
            (false, false) => self.v_to_v,
            (true, true) => self.m_to_m,
        }
    }

    pub fn is_all(&self) -> bool {
        *self == Self::ALL
    }
}

impl Default for InteractionMask {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderAttention {
    /// One fused softmax over the mask tokens and the visible context.
    SelfCross,
    /// Self-attention over mask tokens followed by a separate cross-attention.
    Stacked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReuseSource {
    VisibleOnly,
    AllTokens,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReuseLayer {
    /// Previous final-layer features feed every encoder layer.
    LastLayer,
    /// Layer `l` reuses the previous step's layer-`l` features.
    LayerToLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub codebook_size: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub num_classes: usize,
    pub arch: ArchMode,
    pub interactions: InteractionMask,
    pub decoder_attention: DecoderAttention,
    pub reuse_projection: bool,
    pub reuse_source: ReuseSource,
    pub reuse_layer: ReuseLayer,
}

impl ModelConfig {
    pub fn disentangled(n_enc: usize, n_dec: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_enc,
            n_dec,
            d_model,
            n_heads,
            mlp_ratio: 4,
            codebook_size: 64,
            grid_height: 8,
            grid_width: 8,
            num_classes: 10,
            arch: ArchMode::Disentangled,
            interactions: InteractionMask::ALL,
            decoder_attention: DecoderAttention::SelfCross,
            reuse_projection: true,
            reuse_source: ReuseSource::VisibleOnly,
            reuse_layer: ReuseLayer::LastLayer,
        }
    }

    pub fn baseline(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_dec: 0,
            arch: ArchMode::Baseline,
            reuse_projection: false,
            ..Self::disentangled(n_layers, 0, d_model, n_heads)
        }
    }

    /// Desk-scale default: 6 encoder layers, 1 decoder layer, width 128.
    pub fn tiny() -> Self {
        Self::disentangled(6, 1, 128, 4)
    }

    /// Paper-scale shapes over a 16×16 grid with a 1024-entry codebook.
    pub fn enat_s() -> Self {
        Self::paper_scale(15, 1, 366, 6)
    }

    pub fn enat_b() -> Self {
        Self::paper_scale(15, 1, 768, 8)
    }

    pub fn enat_l() -> Self {
        Self::paper_scale(22, 2, 1024, 16)
    }

    pub fn paper_scale(n_enc: usize, n_dec: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            codebook_size: 1024,
            grid_height: 16,
            grid_width: 16,
            num_classes: 1000,
            ..Self::disentangled(n_enc, n_dec, d_model, n_heads)
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc == 0 {
            return fail("n_enc must be at least 1".into());
        }
        if self.arch == ArchMode::Disentangled && self.n_dec == 0 {
            return fail("n_dec must be at least 1 in disentangled mode".into());
        }
        if self.arch == ArchMode::Baseline && self.n_dec != 0 {
            return fail("baseline mode uses n_enc shared blocks; set n_dec = 0".into());
        }
        if self.arch == ArchMode::Disentangled && !self.interactions.is_all() {
            return fail("interaction masks apply to baseline mode only".into());
        }
        if self.codebook_size == 0
            || self.num_tokens() == 0
            || self.num_classes == 0
            || self.mlp_ratio == 0
        {
            return fail("codebook_size, grid, num_classes and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}
