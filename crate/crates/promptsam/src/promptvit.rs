//! Prompted ViT-style image encoder with a frozen base.
//!
//! Patch tokens are produced by a linear patch projection plus positional
//! embeddings. A small matrix of learnable prompt tokens is appended after
//! the patch tokens before the first transformer block; prompts attend in
//! every block but are excluded from the per-block feature taps and the final
//! image embedding. All base parameters are frozen; the prompts are the only
//! encoder-owned trainable tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensorcore::{Graph, ParamRegistry, Real, Result, TensorData, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub prompt_count: usize,
    /// Re-inject a fresh prompt tensor before every block instead of only
    /// before block 1.
    pub deep_prompts: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            img_size: 64,
            patch_size: 8,
            depth: 4,
            dim: 32,
            heads: 4,
            prompt_count: 4,
            deep_prompts: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.img_size % self.patch_size == 0
            && self.dim % self.heads == 0
            && self.depth >= 1
            && self.patch_size >= 1;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "encoder_config",
                lhs: vec![self.img_size, self.patch_size],
                rhs: vec![self.dim, self.heads],
            });
        }
        Ok(())
    }

    /// Patch grid side length.
    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Seeded standard normal via Box-Muller, so initialization is reproducible
/// without extra dependencies.
pub(crate) fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn gaussian_tensor<T: Real>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    sigma: f64,
) -> TensorData<T> {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(gauss(rng) * sigma))
        .collect();
    TensorData::new(shape.to_vec(), data).expect("shape/data agree")
}

/// The prompted encoder: parameter naming, initialization, freezing, and the
/// forward pass.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub cfg: EncoderConfig,
}

pub const PROMPTS: &str = "encoder.prompts";

impl PromptEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    fn prompt_name(&self, block: usize) -> String {
        if self.cfg.deep_prompts {
            format!("encoder.prompts.{block}")
        } else {
            PROMPTS.to_owned()
        }
    }

    /// Names of all frozen base parameters (everything except prompts).
    pub fn base_param_names(&self) -> Vec<String> {
        let mut names = vec![
            "encoder.patch_proj.w".into(),
            "encoder.patch_proj.b".into(),
            "encoder.pos_embed".into(),
        ];
        for i in 0..self.cfg.depth {
            for p in [
                "ln1.gamma", "ln1.beta", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bq",
                "attn.bk", "attn.bv", "attn.bo", "ln2.gamma", "ln2.beta", "mlp.w1", "mlp.b1",
                "mlp.w2", "mlp.b2",
            ] {
                names.push(format!("encoder.block{i}.{p}"));
            }
        }
        names
    }

    pub fn prompt_param_names(&self) -> Vec<String> {
        if self.cfg.prompt_count == 0 {
            return vec![];
        }
        if self.cfg.deep_prompts {
            (0..self.cfg.depth).map(|i| self.prompt_name(i)).collect()
        } else {
            vec![PROMPTS.to_owned()]
        }
    }

    /// Seeded Gaussian initialization (sigma = 0.02) standing in for
    /// pretrained weights; layer-norm gains start at 1, biases at 0.
    pub fn init<T: Real>(&self, registry: &mut ParamRegistry<T>, seed: u64) {
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let sigma = 0.02;
        registry.insert(
            "encoder.patch_proj.w",
            gaussian_tensor(&mut rng, &[patch_in, cfg.dim], sigma),
        );
        registry.insert("encoder.patch_proj.b", TensorData::zeros(&[cfg.dim]));
        registry.insert(
            "encoder.pos_embed",
            gaussian_tensor(&mut rng, &[cfg.n_patches(), cfg.dim], sigma),
        );
        for i in 0..cfg.depth {
            let block = |p: &str| format!("encoder.block{i}.{p}");
            registry.insert(&block("ln1.gamma"), TensorData::filled(&[cfg.dim], T::one()));
            registry.insert(&block("ln1.beta"), TensorData::zeros(&[cfg.dim]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                registry.insert(
                    &block(w),
                    gaussian_tensor(&mut rng, &[cfg.dim, cfg.dim], sigma),
                );
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                registry.insert(&block(b), TensorData::zeros(&[cfg.dim]));
            }
            registry.insert(&block("ln2.gamma"), TensorData::filled(&[cfg.dim], T::one()));
            registry.insert(&block("ln2.beta"), TensorData::zeros(&[cfg.dim]));
            registry.insert(
                &block("mlp.w1"),
                gaussian_tensor(&mut rng, &[cfg.dim, 4 * cfg.dim], sigma),
            );
            registry.insert(&block("mlp.b1"), TensorData::zeros(&[4 * cfg.dim]));
            registry.insert(
                &block("mlp.w2"),
                gaussian_tensor(&mut rng, &[4 * cfg.dim, cfg.dim], sigma),
            );
            registry.insert(&block("mlp.b2"), TensorData::zeros(&[cfg.dim]));
        }
        for name in self.prompt_param_names() {
            registry.insert(
                &name,
                gaussian_tensor(&mut rng, &[cfg.prompt_count, cfg.dim], sigma),
            );
        }
    }

    /// Freeze every base parameter; prompts stay trainable. Idempotent.
    pub fn freeze_base<T: Real>(&self, registry: &mut ParamRegistry<T>) -> Result<()> {
        for name in self.base_param_names() {
            registry.freeze(&name)?;
        }
        Ok(())
    }

    /// Linear patch projection plus positional embedding:
    /// `[3, s, s] -> [n_patches, dim]`.
    pub fn patch_embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        image: Var,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let shape = g.shape(image).to_vec();
        if shape != [3, cfg.img_size, cfg.img_size] {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: shape,
                rhs: vec![3, cfg.img_size, cfg.img_size],
            });
        }
        let patches = g.im2patches(image, cfg.patch_size)?;
        let w = registry.leaf(g, "encoder.patch_proj.w")?;
        let b = registry.leaf(g, "encoder.patch_proj.b")?;
        let proj = g.matmul(patches, w)?;
        let proj = g.add_bias(proj, b)?;
        let pos = registry.leaf(g, "encoder.pos_embed")?;
        g.add(proj, pos)
    }

    /// Append prompt rows after the patch tokens: `[e_i || e_p]`.
    pub fn inject_prompts<T: Real>(
        &self,
        g: &mut Graph<T>,
        tokens: Var,
        prompts: Var,
    ) -> Result<Var> {
        let pshape = g.shape(prompts).to_vec();
        if pshape.len() != 2 || pshape[1] != self.cfg.dim {
            return Err(TensorError::ShapeMismatch {
                op: "inject_prompts",
                lhs: pshape,
                rhs: vec![self.cfg.prompt_count, self.cfg.dim],
            });
        }
        if pshape[0] == 0 {
            return Ok(tokens);
        }
        g.concat_rows(tokens, prompts)
    }

    /// Full forward pass: returns the image embedding `[dim, g, g]` and one
    /// feature tap per block, each `[dim, g, g]`, prompts excluded.
    pub fn encode_with_taps<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        image: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.cfg;
        let n = cfg.n_patches();
        let grid = cfg.grid();
        let mut x = self.patch_embed(g, registry, image)?;
        let mut taps = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            if cfg.prompt_count > 0 && (i == 0 || cfg.deep_prompts) {
                let patch_tokens = if i == 0 { x } else { g.slice_rows(x, 0, n)? };
                let prompts = registry.leaf(g, &self.prompt_name(i))?;
                x = self.inject_prompts(g, patch_tokens, prompts)?;
            }
            x = self.block(g, registry, x, i)?;
            let patch_tokens = g.slice_rows(x, 0, n)?;
            taps.push(g.tokens_to_map(patch_tokens, grid, grid)?);
        }
        let y = g.slice_rows(x, 0, n)?;
        let y = g.tokens_to_map(y, grid, grid)?;
        Ok((y, taps))
    }

    /// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
    fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        registry: &ParamRegistry<T>,
        x: Var,
        i: usize,
    ) -> Result<Var> {
        let name = |p: &str| format!("encoder.block{i}.{p}");
        let linear = |g: &mut Graph<T>, x: Var, w: &str, b: &str| -> Result<Var> {
            let w = registry.leaf(g, &name(w))?;
            let b = registry.leaf(g, &name(b))?;
            let y = g.matmul(x, w)?;
            g.add_bias(y, b)
        };

        let ln1g = registry.leaf(g, &name("ln1.gamma"))?;
        let ln1b = registry.leaf(g, &name("ln1.beta"))?;
        let h = g.layer_norm(x, ln1g, ln1b, 1e-5)?;
        let q = linear(g, h, "attn.wq", "attn.bq")?;
        let k = linear(g, h, "attn.wk", "attn.bk")?;
        let v = linear(g, h, "attn.wv", "attn.bv")?;
        let attn = g.multi_head_attention(q, k, v, self.cfg.heads)?;
        let attn = linear(g, attn, "attn.wo", "attn.bo")?;
        let x = g.add(x, attn)?;

        let ln2g = registry.leaf(g, &name("ln2.gamma"))?;
        let ln2b = registry.leaf(g, &name("ln2.beta"))?;
        let h = g.layer_norm(x, ln2g, ln2b, 1e-5)?;
        let h = linear(g, h, "mlp.w1", "mlp.b1")?;
        let h = g.gelu(h)?;
        let h = linear(g, h, "mlp.w2", "mlp.b2")?;
        g.add(x, h)
    }
}

/// Image pixels as a `[3, s, s]` tensor in [0, 1]; grayscale inputs are
/// channel-replicated.
pub fn image_to_tensor<T: Real>(
    pixels: &[u8],
    width: usize,
    height: usize,
    channels: usize,
) -> TensorData<T> {
    let mut data = vec![T::zero(); 3 * width * height];
    let scale = T::from_f64(1.0 / 255.0);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let src = if channels == 1 {
                    pixels[y * width + x]
                } else {
                    pixels[(y * width + x) * channels + c]
                };
                data[(c * height + y) * width + x] = T::from_f64(src as f64) * scale;
            }
        }
    }
    TensorData::new(vec![3, height, width], data).expect("shape/data agree")
}
