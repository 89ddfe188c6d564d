//! Condition encoders: pose-mask residual, caption tokens, music spectrogram
//! transformer, and the beat lookup embedding.

use candle_core::{DType, Device, Tensor};

use crate::audio::{LogMel, Waveform, N_MELS};
use crate::beats::BeatVector;
use crate::error::{param_err, shape_err, Result};
use crate::frame::PoseMask;
use crate::nn::{Attention, Builder, Conv3x3, Downsample, Init, LayerNorm, Linear, Param};
use crate::tensor::tensor_from_f32;

/// Spectrogram frames per music token.
pub const MUSIC_PATCH: usize = 8;
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `(N, D_c)`.
    pub tokens: Tensor,
    pub is_null: bool,
}

#[derive(Debug, Clone)]
pub struct MusicEmbedding {
    /// `(L, d)`.
    pub tokens: Tensor,
    pub is_null: bool,
}

impl MusicEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BeatEmbedding {
    /// `(K, d)`; row `i` depends only on beat bit `i`.
    pub rows: Tensor,
}

impl BeatEmbedding {
    pub fn frames(&self) -> usize {
        self.rows.dims()[0]
    }
}

/// Lowercased whitespace tokenisation.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Caption vocabulary; id 0 is the unknown-token row.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut out = vec![UNK.to_string()];
        for w in words {
            let w = w.into();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        Self { words: out }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(param_err!("vocabulary must start with {UNK}"));
        }
        Ok(Self { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.words.iter().position(|w| w == token).unwrap_or(0) as u32
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(b: &mut Builder, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&mut b.pp("ln1"), dim)?,
            attn: Attention::new(&mut b.pp("attn"), dim, dim, heads, false)?,
            ln2: LayerNorm::new(&mut b.pp("ln2"), dim)?,
            fc1: Linear::new(&mut b.pp("fc1"), dim, 2 * dim)?,
            fc2: Linear::new(&mut b.pp("fc2"), 2 * dim, dim)?,
        })
    }

    /// `(B, N, dim)` → `(B, N, dim)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.silu()?)?;
        Ok((x + h)?)
    }
}

/// Strided convolution stack from pixel-resolution masks to latent layout.
#[derive(Debug, Clone)]
pub struct MaskEncoder {
    conv_in: Conv3x3,
    downs: Vec<Downsample>,
    out: Linear,
    patch: usize,
}

impl MaskEncoder {
    /// The final projection is zero-initialised, so the residual starts at 0.
    pub fn new(b: &mut Builder, patch: usize, latent_channels: usize) -> Result<Self> {
        if !patch.is_power_of_two() {
            return Err(param_err!("mask encoder needs a power-of-two patch factor, got {patch}"));
        }
        let mut width = 16;
        let conv_in = Conv3x3::new(&mut b.pp("conv_in"), 1, width)?;
        let mut downs = Vec::new();
        for i in 0..patch.trailing_zeros() as usize {
            let next = 32;
            downs.push(Downsample::new(&mut b.pp(&format!("down{i}")), width, next)?);
            width = next;
        }
        let out = Linear::zeros(&mut b.pp("out"), width, latent_channels)?;
        Ok(Self {
            conv_in,
            downs,
            out,
            patch,
        })
    }

    /// `(B, H, W, 1)` masks → `(B, H/p, W/p, C_z)` features.
    pub fn forward(&self, masks: &Tensor) -> Result<Tensor> {
        let (_, h, w, c) = masks.dims4()?;
        if c != 1 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(shape_err!("mask tensor {:?} incompatible with patch {}", masks.dims(), self.patch));
        }
        let mut x = self.conv_in.forward(masks)?.silu()?;
        for d in &self.downs {
            x = d.forward(&x)?.silu()?;
        }
        self.out.forward(&x)
    }

    pub fn encode(&self, masks: &[&PoseMask], dtype: DType) -> Result<Tensor> {
        let ts = masks.iter().map(|m| m.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
        self.forward(&Tensor::stack(&ts, 0)?)
    }
}

/// Token lookup, learned positions, one self-attention block.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vocab,
    table: Param,
    positions: Param,
    block: TransformerBlock,
    null: Param,
    max_tokens: usize,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, vocab: Vocab, dim: usize, max_tokens: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            table: b.param("token_embedding", &[vocab.len(), dim], Init::Normal(1.0))?,
            positions: b.param("positions", &[max_tokens, dim], Init::Normal(0.1))?,
            block: TransformerBlock::new(&mut b.pp("block"), dim, heads)?,
            null: b.param("null", &[1, dim], Init::Normal(1.0))?,
            vocab,
            max_tokens,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn null_embedding(&self) -> TextEmbedding {
        TextEmbedding {
            tokens: self.null.t(),
            is_null: true,
        }
    }

    /// Embeds a tokenised caption; an empty caption yields the null embedding.
    pub fn embed(&self, tokens: &[String]) -> Result<TextEmbedding> {
        if tokens.is_empty() {
            return Ok(self.null_embedding());
        }
        if tokens.len() > self.max_tokens {
            return Err(param_err!("caption has {} tokens, limit is {}", tokens.len(), self.max_tokens));
        }
        let ids: Vec<u32> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let ids = Tensor::from_vec(ids, tokens.len(), &Device::Cpu)?;
        let x = self
            .table
            .t()
            .index_select(&ids, 0)?
            .add(&self.positions.t().narrow(0, 0, tokens.len())?)?;
        let x = self.block.forward(&x.unsqueeze(0)?)?.squeeze(0)?;
        Ok(TextEmbedding {
            tokens: x,
            is_null: false,
        })
    }
}

/// Number of music tokens for a waveform of `n_samples`.
pub fn music_token_count(n_samples: usize) -> usize {
    LogMel::new().frame_count(n_samples).div_ceil(MUSIC_PATCH)
}

/// Log-mel patches of 8 frames, linear projection, learned positions, two
/// self-attention blocks.
#[derive(Debug, Clone)]
pub struct MusicEncoder {
    proj: Linear,
    positions: Param,
    blocks: Vec<TransformerBlock>,
    null: Param,
    max_tokens: usize,
}

impl MusicEncoder {
    pub fn new(b: &mut Builder, dim: usize, max_tokens: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(&mut b.pp("proj"), MUSIC_PATCH * N_MELS, dim)?,
            positions: b.param("positions", &[max_tokens, dim], Init::Normal(0.1))?,
            blocks: (0..2)
                .map(|i| TransformerBlock::new(&mut b.pp(&format!("block{i}")), dim, heads))
                .collect::<Result<_>>()?,
            null: b.param("null", &[1, dim], Init::Normal(1.0))?,
            max_tokens,
        })
    }

    pub fn null_embedding(&self) -> MusicEmbedding {
        MusicEmbedding {
            tokens: self.null.t(),
            is_null: true,
        }
    }

    /// Patches a log-mel spectrogram into `(L, 8·N_MELS)` rows, padding the
    /// last patch with the floor value and rescaling to roughly unit range.
    pub fn patches(spec: &[[f32; N_MELS]], dtype: DType) -> Result<Tensor> {
        let l = spec.len().div_ceil(MUSIC_PATCH);
        let mut data = vec![crate::audio::LOG_FLOOR; l * MUSIC_PATCH * N_MELS];
        for (i, row) in spec.iter().enumerate() {
            data[i * N_MELS..(i + 1) * N_MELS].copy_from_slice(row);
        }
        let data = data.into_iter().map(|v| (v + 5.0) / 5.0).collect();
        tensor_from_f32(data, &[l, MUSIC_PATCH * N_MELS], dtype)
    }

    /// Embeds `span_s` seconds of `w` starting at `start_s`.
    pub fn encode(&self, w: &Waveform, start_s: f64, span_s: f64, dtype: DType) -> Result<MusicEmbedding> {
        let slack = 1.0 / crate::audio::SAMPLE_RATE as f64;
        if start_s < 0.0 || start_s + span_s > w.duration_s() + slack {
            return Err(param_err!(
                "music span [{start_s:.3}, {:.3}) s not covered by {:.3} s waveform",
                start_s + span_s,
                w.duration_s()
            ));
        }
        let seg = w.segment(start_s, span_s);
        let spec = LogMel::new().compute(&seg)?;
        self.encode_patches(&Self::patches(&spec, dtype)?)
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<MusicEmbedding> {
        let l = patches.dim(0)?;
        if l > self.max_tokens {
            return Err(param_err!("{l} music tokens exceed the limit of {}", self.max_tokens));
        }
        let mut x = self
            .proj
            .forward(patches)?
            .add(&self.positions.t().narrow(0, 0, l)?)?
            .unsqueeze(0)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(MusicEmbedding {
            tokens: x.squeeze(0)?,
            is_null: false,
        })
    }
}

/// Row `i` of the result is `table[bits[i]]`.
pub fn embed_beats(b: &BeatVector, table: &Tensor) -> Result<BeatEmbedding> {
    let (rows, _) = table.dims2()?;
    if rows != 2 {
        return Err(shape_err!("beat table must have 2 rows, got {rows}"));
    }
    if b.is_empty() {
        return Err(param_err!("empty beat vector"));
    }
    let ids: Vec<u32> = b.bits().iter().map(|&x| x as u32).collect();
    let ids = Tensor::from_vec(ids, b.len(), &Device::Cpu)?;
    Ok(BeatEmbedding {
        rows: table.index_select(&ids, 0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamGroup, ParamStore};

    #[test]
    fn vocab_maps_unknown_to_zero() {
        let v = Vocab::new(["the", "figure", "spins"]);
        assert_eq!(v.id("figure"), 2);
        assert_eq!(v.id("purple"), 0);
        assert_eq!(v.words()[0], UNK);
    }

    #[test]
    fn token_count_for_four_seconds() {
        assert_eq!(music_token_count(64_000), 32);
    }

    #[test]
    fn beat_lookup_locality() {
        let table = Tensor::new(&[[1f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let a = embed_beats(&BeatVector::new(vec![0, 0, 0]).unwrap(), &table).unwrap();
        assert_eq!(a.rows.to_vec2::<f32>().unwrap(), vec![vec![1.0, 2.0]; 3]);
        let b = embed_beats(&BeatVector::new(vec![0, 1, 0]).unwrap(), &table).unwrap();
        let (ra, rb) = (a.rows.to_vec2::<f32>().unwrap(), b.rows.to_vec2::<f32>().unwrap());
        assert_eq!(ra[0], rb[0]);
        assert_eq!(ra[2], rb[2]);
        assert_ne!(ra[1], rb[1]);
        assert_eq!(b.rows.dims(), &[3, 2]);
    }

    #[test]
    fn text_encoder_contracts() {
        let mut store = ParamStore::new(DType::F32, 4);
        let enc = TextEncoder::new(
            &mut store.root(ParamGroup::TextEncoder),
            Vocab::new(["a", "b", "c"]),
            16,
            4,
            2,
        )
        .unwrap();
        let toks = tokenize("a b");
        let e1 = enc.embed(&toks).unwrap().tokens.to_vec2::<f32>().unwrap();
        let e2 = enc.embed(&toks).unwrap().tokens.to_vec2::<f32>().unwrap();
        assert_eq!(e1, e2);
        let e3 = enc.embed(&tokenize("a c")).unwrap().tokens.to_vec2::<f32>().unwrap();
        assert_ne!(e1, e3);
        assert!(enc.embed(&tokenize("zebra")).is_ok());
        assert!(enc.embed(&[]).unwrap().is_null);
        assert!(enc.embed(&tokenize("a a a a a")).is_err());
    }
}
