//! CLIP patch-transformer adapter with a hand-written backward pass.
//!
//! Reads checkpoints in the Hugging Face `CLIPModel` safetensors layout.
//! Only input gradients are computed; weights stay frozen. Hyperparameters
//! (width, depth, patch size, context length) are inferred from tensor
//! shapes, with a fixed head width of 64 as in every published CLIP model.

use std::collections::HashMap;
use std::path::Path;

use safetensors::{Dtype, SafeTensors};

use super::clip_tokenizer::ClipTokenizer;
use super::registry::EncoderRegistryEntry;
use super::{
    normalization_vjp, normalize_with_jacobian, DualEncoder, ImagePullback, InputPipeline,
    Preprocessing,
};
use crate::canvas::PixelCanvas;
use crate::error::{Error, Result};
use crate::objective::EmbeddingVector;

const HEAD_DIM: usize = 64;
const LN_EPS: f64 = 1e-5;

/// `c = a * b (+ c)` for strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(
        k == 0 || last(m, k, rsa, csa) < a.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        k == 0 || last(k, n, rsb, csb) < b.len(),
        "gemm: rhs out of bounds"
    );
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Clone, Debug)]
struct Linear {
    /// Row-major `out x in`.
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    input: usize,
    output: usize,
}

impl Linear {
    /// `y = x W^T + b` for `n` rows.
    fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * self.output];
        if let Some(b) = &self.b {
            for row in y.chunks_exact_mut(self.output) {
                row.copy_from_slice(b);
            }
        }
        gemm(
            n,
            self.input,
            self.output,
            x,
            (self.input, 1),
            &self.w,
            (1, self.input),
            &mut y,
            (self.output, 1),
            self.b.is_some(),
        );
        y
    }

    /// `dx = dy W`.
    fn backward_into(&self, dy: &[f64], n: usize, dx: &mut [f64], accumulate: bool) {
        gemm(
            n,
            self.output,
            self.input,
            dy,
            (self.output, 1),
            &self.w,
            (self.input, 1),
            dx,
            (self.input, 1),
            accumulate,
        );
    }

    fn backward(&self, dy: &[f64], n: usize) -> Vec<f64> {
        let mut dx = vec![0.0; n * self.input];
        self.backward_into(dy, n, &mut dx, false);
        dx
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    fn forward(&self, x: &[f64], n: usize) -> (Vec<f64>, LnCache) {
        let d = self.gamma.len();
        let mut y = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = s;
            for i in 0..d {
                let h = (row[i] - mean) * s;
                xhat[r * d + i] = h;
                y[r * d + i] = h * self.gamma[i] + self.beta[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    fn backward(&self, dy: &[f64], cache: &LnCache, n: usize) -> Vec<f64> {
        let d = self.gamma.len();
        let mut dx = vec![0.0; n * d];
        for r in 0..n {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let g: Vec<f64> = (0..d).map(|i| dy[r * d + i] * self.gamma[i]).collect();
            let mean_g = g.iter().sum::<f64>() / d as f64;
            let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for i in 0..d {
                dx[r * d + i] = cache.rstd[r] * (g[i] - mean_g - xh[i] * mean_gx);
            }
        }
        dx
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn quick_gelu(v: f64) -> f64 {
    v * sigmoid(1.702 * v)
}

fn quick_gelu_grad(v: f64) -> f64 {
    let s = sigmoid(1.702 * v);
    s + 1.702 * v * s * (1.0 - s)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

struct BlockTape {
    ln1: LnCache,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x n x n` attention weights.
    probs: Vec<f64>,
    ln2: LnCache,
    pre_act: Vec<f64>,
}

impl Block {
    fn width(&self) -> usize {
        self.ln1.gamma.len()
    }

    fn heads(&self) -> usize {
        self.width() / HEAD_DIM
    }

    fn forward(&self, x: &[f64], n: usize, causal: bool) -> (Vec<f64>, BlockTape) {
        let d = self.width();
        let heads = self.heads();
        let scale = 1.0 / (HEAD_DIM as f64).sqrt();
        let (h1, ln1) = self.ln1.forward(x, n);
        let mut q = self.q.forward(&h1, n);
        q.iter_mut().for_each(|v| *v *= scale);
        let k = self.k.forward(&h1, n);
        let v = self.v.forward(&h1, n);

        let mut probs = vec![0.0; heads * n * n];
        let mut ctx = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * HEAD_DIM;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(
                n,
                HEAD_DIM,
                n,
                &q[off..],
                (d, 1),
                &k[off..],
                (1, d),
                p,
                (n, 1),
                false,
            );
            for r in 0..n {
                let row = &mut p[r * n..(r + 1) * n];
                let limit = if causal { r + 1 } else { n };
                let max = row[..limit]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if j < limit { (*s - max).exp() } else { 0.0 };
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            gemm(
                n,
                n,
                HEAD_DIM,
                p,
                (n, 1),
                &v[off..],
                (d, 1),
                &mut ctx[off..],
                (d, 1),
                false,
            );
        }
        let attn = self.out.forward(&ctx, n);
        let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let (h2, ln2) = self.ln2.forward(&x1, n);
        let pre_act = self.fc1.forward(&h2, n);
        let act: Vec<f64> = pre_act.iter().map(|&v| quick_gelu(v)).collect();
        let mlp = self.fc2.forward(&act, n);
        let out = x1.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        (
            out,
            BlockTape {
                ln1,
                q,
                k,
                v,
                probs,
                ln2,
                pre_act,
            },
        )
    }

    fn backward(&self, dout: &[f64], tape: &BlockTape, n: usize) -> Vec<f64> {
        let d = self.width();
        let heads = self.heads();
        let scale = 1.0 / (HEAD_DIM as f64).sqrt();

        // MLP branch
        let mut dpre = self.fc2.backward(dout, n);
        for (g, &p) in dpre.iter_mut().zip(&tape.pre_act) {
            *g *= quick_gelu_grad(p);
        }
        let dh2 = self.fc1.backward(&dpre, n);
        let mut dx1 = self.ln2.backward(&dh2, &tape.ln2, n);
        for (a, b) in dx1.iter_mut().zip(dout) {
            *a += b;
        }

        // attention branch
        let dctx = self.out.backward(&dx1, n);
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n * n];
        for h in 0..heads {
            let off = h * HEAD_DIM;
            let p = &tape.probs[h * n * n..(h + 1) * n * n];
            gemm(
                n,
                HEAD_DIM,
                n,
                &dctx[off..],
                (d, 1),
                &tape.v[off..],
                (1, d),
                &mut dp,
                (n, 1),
                false,
            );
            gemm(
                n,
                n,
                HEAD_DIM,
                p,
                (1, n),
                &dctx[off..],
                (d, 1),
                &mut dv[off..],
                (d, 1),
                false,
            );
            for r in 0..n {
                let pr = &p[r * n..(r + 1) * n];
                let dr = &mut dp[r * n..(r + 1) * n];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(
                n,
                n,
                HEAD_DIM,
                &dp,
                (n, 1),
                &tape.k[off..],
                (d, 1),
                &mut dq[off..],
                (d, 1),
                false,
            );
            gemm(
                n,
                n,
                HEAD_DIM,
                &dp,
                (1, n),
                &tape.q[off..],
                (d, 1),
                &mut dk[off..],
                (d, 1),
                false,
            );
        }
        dq.iter_mut().for_each(|v| *v *= scale);
        let mut dh1 = self.q.backward(&dq, n);
        self.k.backward_into(&dk, n, &mut dh1, true);
        self.v.backward_into(&dv, n, &mut dh1, true);
        let mut dx = self.ln1.backward(&dh1, &tape.ln1, n);
        for (a, b) in dx.iter_mut().zip(&dx1) {
            *a += b;
        }
        dx
    }
}

#[derive(Clone, Debug)]
struct VisionTower {
    patch: usize,
    grid: usize,
    patch_embed: Linear,
    class_embed: Vec<f64>,
    pos_embed: Vec<f64>,
    pre_ln: LayerNorm,
    blocks: Vec<Block>,
    post_ln: LayerNorm,
    projection: Linear,
}

struct VisionTape {
    pre_ln: LnCache,
    blocks: Vec<BlockTape>,
    post_ln: LnCache,
}

impl VisionTower {
    fn width(&self) -> usize {
        self.class_embed.len()
    }

    fn resolution(&self) -> usize {
        self.patch * self.grid
    }

    /// `(grid^2) x (3 * patch^2)` patch matrix, each row ordered (c, ky, kx).
    fn patches(&self, x: &PixelCanvas) -> Vec<f64> {
        let p = self.patch;
        let cols = 3 * p * p;
        let mut out = vec![0.0; self.grid * self.grid * cols];
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = &mut out[(gy * self.grid + gx) * cols..][..cols];
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            row[(c * p + ky) * p + kx] = x.get(c, gy * p + ky, gx * p + kx);
                        }
                    }
                }
            }
        }
        out
    }

    fn unpatch(&self, dpatches: &[f64]) -> PixelCanvas {
        let p = self.patch;
        let cols = 3 * p * p;
        let r = self.resolution();
        let mut g = PixelCanvas::filled(3, r, r, 0.0);
        for gy in 0..self.grid {
            for gx in 0..self.grid {
                let row = &dpatches[(gy * self.grid + gx) * cols..][..cols];
                for c in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            g.set(c, gy * p + ky, gx * p + kx, row[(c * p + ky) * p + kx]);
                        }
                    }
                }
            }
        }
        g
    }

    fn forward(&self, x: &PixelCanvas) -> (Vec<f64>, VisionTape) {
        let d = self.width();
        let n = self.grid * self.grid + 1;
        let emb = self.patch_embed.forward(&self.patches(x), n - 1);
        let mut tokens = Vec::with_capacity(n * d);
        tokens.extend_from_slice(&self.class_embed);
        tokens.extend_from_slice(&emb);
        for (t, p) in tokens.iter_mut().zip(&self.pos_embed) {
            *t += p;
        }
        let (mut h, pre_ln) = self.pre_ln.forward(&tokens, n);
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, tape) = b.forward(&h, n, false);
            h = next;
            tapes.push(tape);
        }
        let (pooled, post_ln) = self.post_ln.forward(&h[..d], 1);
        let features = self.projection.forward(&pooled, 1);
        (
            features,
            VisionTape {
                pre_ln,
                blocks: tapes,
                post_ln,
            },
        )
    }

    fn backward(&self, dfeatures: &[f64], tape: &VisionTape) -> PixelCanvas {
        let d = self.width();
        let n = self.grid * self.grid + 1;
        let dpooled = self.projection.backward(dfeatures, 1);
        let mut dh = vec![0.0; n * d];
        dh[..d].copy_from_slice(&self.post_ln.backward(&dpooled, &tape.post_ln, 1));
        for (b, t) in self.blocks.iter().zip(&tape.blocks).rev() {
            dh = b.backward(&dh, t, n);
        }
        let dtokens = self.pre_ln.backward(&dh, &tape.pre_ln, n);
        let dpatches = self.patch_embed.backward(&dtokens[d..], n - 1);
        self.unpatch(&dpatches)
    }
}

#[derive(Clone, Debug)]
struct TextTower {
    token_embed: Vec<f64>,
    vocab: usize,
    pos_embed: Vec<f64>,
    context: usize,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: Linear,
}

impl TextTower {
    fn width(&self) -> usize {
        self.final_ln.gamma.len()
    }

    /// Features at the last position, which holds the end-of-text token.
    /// The causal mask makes padding unnecessary.
    fn forward(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let d = self.width();
        let n = ids.len();
        if n == 0 || n > self.context {
            return Err(Error::Shape(format!(
                "token sequence of length {n} for context {}",
                self.context
            )));
        }
        let mut x = vec![0.0; n * d];
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.vocab {
                return Err(Error::Shape(format!(
                    "token id {id} outside vocabulary of {}",
                    self.vocab
                )));
            }
            for j in 0..d {
                x[i * d + j] = self.token_embed[id * d + j] + self.pos_embed[i * d + j];
            }
        }
        for b in &self.blocks {
            x = b.forward(&x, n, true).0;
        }
        let (pooled, _) = self.final_ln.forward(&x[(n - 1) * d..], 1);
        Ok(self.projection.forward(&pooled, 1))
    }
}

/// Named tensors converted to `f64`.
struct TensorStore {
    tensors: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorStore {
    fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Integrity(format!("unreadable safetensors: {e}")))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            let data = view.data();
            let values: Vec<f64> = match view.dtype() {
                Dtype::F32 => data
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect(),
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
                Dtype::F16 => data
                    .chunks_exact(2)
                    .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f64())
                    .collect(),
                Dtype::BF16 => data
                    .chunks_exact(2)
                    .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f64())
                    .collect(),
                other => {
                    // position ids and similar integer buffers are not needed
                    tracing::debug!(tensor = %name, dtype = ?other, "skipping non-float tensor");
                    continue;
                }
            };
            tensors.insert(name, (view.shape().to_vec(), values));
        }
        Ok(Self { tensors })
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint is missing tensor `{name}`")))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>> {
        Ok(self.take(name)?.1)
    }

    fn linear(&mut self, prefix: &str, bias: bool) -> Result<Linear> {
        let (shape, w) = self.take(&format!("{prefix}.weight"))?;
        if shape.len() != 2 {
            return Err(Error::Integrity(format!(
                "{prefix}.weight has shape {shape:?}"
            )));
        }
        let b = if bias {
            Some(self.vector(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            input: shape[1],
            output: shape[0],
        })
    }

    fn layer_norm(&mut self, prefix: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.vector(&format!("{prefix}.weight"))?,
            beta: self.vector(&format!("{prefix}.bias"))?,
        })
    }

    fn blocks(&mut self, prefix: &str) -> Result<Vec<Block>> {
        let mut blocks = Vec::new();
        loop {
            let p = format!("{prefix}.encoder.layers.{}", blocks.len());
            if !self
                .tensors
                .contains_key(&format!("{p}.layer_norm1.weight"))
            {
                break;
            }
            blocks.push(Block {
                ln1: self.layer_norm(&format!("{p}.layer_norm1"))?,
                q: self.linear(&format!("{p}.self_attn.q_proj"), true)?,
                k: self.linear(&format!("{p}.self_attn.k_proj"), true)?,
                v: self.linear(&format!("{p}.self_attn.v_proj"), true)?,
                out: self.linear(&format!("{p}.self_attn.out_proj"), true)?,
                ln2: self.layer_norm(&format!("{p}.layer_norm2"))?,
                fc1: self.linear(&format!("{p}.mlp.fc1"), true)?,
                fc2: self.linear(&format!("{p}.mlp.fc2"), true)?,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Integrity(format!(
                "no transformer layers under `{prefix}`"
            )));
        }
        if blocks.iter().any(|b| b.width() % HEAD_DIM != 0) {
            return Err(Error::Integrity(format!(
                "`{prefix}` width is not a multiple of {HEAD_DIM}"
            )));
        }
        Ok(blocks)
    }

    fn vision(&mut self) -> Result<VisionTower> {
        let class_embed = self.vector("vision_model.embeddings.class_embedding")?;
        let d = class_embed.len();
        let (pshape, pw) = self.take("vision_model.embeddings.patch_embedding.weight")?;
        if pshape.len() != 4 || pshape[0] != d || pshape[1] != 3 || pshape[2] != pshape[3] {
            return Err(Error::Integrity(format!(
                "patch embedding has shape {pshape:?}"
            )));
        }
        let patch = pshape[2];
        let (pos_shape, pos_embed) =
            self.take("vision_model.embeddings.position_embedding.weight")?;
        let tokens = pos_shape[0];
        let grid = ((tokens - 1) as f64).sqrt().round() as usize;
        if grid * grid + 1 != tokens || pos_shape[1] != d {
            return Err(Error::Integrity(format!(
                "position embedding has shape {pos_shape:?}"
            )));
        }
        Ok(VisionTower {
            patch,
            grid,
            patch_embed: Linear {
                w: pw,
                b: None,
                input: 3 * patch * patch,
                output: d,
            },
            class_embed,
            pos_embed,
            pre_ln: self.layer_norm("vision_model.pre_layrnorm")?,
            blocks: self.blocks("vision_model")?,
            post_ln: self.layer_norm("vision_model.post_layernorm")?,
            projection: self.linear("visual_projection", false)?,
        })
    }

    fn text(&mut self) -> Result<TextTower> {
        let (tshape, token_embed) = self.take("text_model.embeddings.token_embedding.weight")?;
        let (pshape, pos_embed) = self.take("text_model.embeddings.position_embedding.weight")?;
        Ok(TextTower {
            token_embed,
            vocab: tshape[0],
            pos_embed,
            context: pshape[0],
            blocks: self.blocks("text_model")?,
            final_ln: self.layer_norm("text_model.final_layer_norm")?,
            projection: self.linear("text_projection", false)?,
        })
    }
}

pub struct ClipVitEncoder {
    id: String,
    vision: VisionTower,
    text: TextTower,
    tokenizer: ClipTokenizer,
    preprocessing: Preprocessing,
}

impl ClipVitEncoder {
    pub const WEIGHTS_FILE: &'static str = "model.safetensors";

    /// Loads `model.safetensors`, `vocab.json` and `merges.txt` from `dir`.
    pub fn load(dir: &Path, entry: &EncoderRegistryEntry) -> Result<Self> {
        let path = dir.join(Self::WEIGHTS_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut store = TensorStore::from_safetensors(&bytes)?;
        drop(bytes);
        let vision = store.vision()?;
        let text = store.text()?;
        let tokenizer = ClipTokenizer::from_files(dir, text.context)?;
        let enc = Self {
            id: entry.encoder_id.clone(),
            vision,
            text,
            tokenizer,
            preprocessing: Preprocessing::clip(),
        };
        if enc.vision.projection.output != enc.text.projection.output {
            return Err(Error::Integrity(
                "image and text projections disagree on embedding size".into(),
            ));
        }
        if enc.embedding_dim() != entry.embedding_dim
            || enc.native_resolution() != entry.native_resolution
        {
            return Err(Error::Integrity(format!(
                "checkpoint for `{}` has dim {} at {}px, registry expects dim {} at {}px",
                entry.encoder_id,
                enc.embedding_dim(),
                enc.native_resolution(),
                entry.embedding_dim,
                entry.native_resolution
            )));
        }
        Ok(enc)
    }

    fn features(&self, image: &PixelCanvas) -> Result<(InputPipeline, Vec<f64>, VisionTape)> {
        let pipe = InputPipeline::new(image, self.native_resolution(), &self.preprocessing)?;
        let (f, tape) = self.vision.forward(&pipe.forward(image));
        Ok((pipe, f, tape))
    }
}

impl DualEncoder for ClipVitEncoder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn embedding_dim(&self) -> usize {
        self.vision.projection.output
    }

    fn native_resolution(&self) -> usize {
        self.vision.resolution()
    }

    fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    fn encode_image(&self, images: &[PixelCanvas]) -> Result<Vec<EmbeddingVector>> {
        images
            .iter()
            .map(|img| Ok(normalize_with_jacobian(self.features(img)?.1)?.0))
            .collect()
    }

    /// The forward tape of a full-size tower is large, so the pullback
    /// recomputes it one image at a time instead of holding all of them.
    fn encode_image_with_pullback<'a>(
        &'a self,
        images: &[PixelCanvas],
    ) -> Result<(Vec<EmbeddingVector>, ImagePullback<'a>)> {
        let embeddings = self.encode_image(images)?;
        let images = images.to_vec();
        let pullback: ImagePullback<'a> = Box::new(move |cotangents: &[EmbeddingVector]| {
            if cotangents.len() != images.len() {
                return Err(Error::Shape(format!(
                    "{} cotangents for {} images",
                    cotangents.len(),
                    images.len()
                )));
            }
            images
                .iter()
                .zip(cotangents)
                .map(|(img, c)| {
                    let (pipe, f, tape) = self.features(img)?;
                    let (e, norm) = normalize_with_jacobian(f)?;
                    let df = normalization_vjp(&e, norm, c);
                    Ok(pipe.backward(&self.vision.backward(&df, &tape)))
                })
                .collect()
        });
        Ok((embeddings, pullback))
    }

    fn encode_text(&self, prompts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        prompts
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let ids = self
                    .tokenizer
                    .encode(p)
                    .map_err(|reason| Error::Tokenizer { index, reason })?;
                EmbeddingVector::new(self.text.forward(&ids)?)?.normalized()
            })
            .collect()
    }
}

/// Writes a randomly initialized checkpoint in the same layout as the
/// published ones, plus a matching tokenizer. Used to exercise the adapter
/// without downloading weights.
#[doc(hidden)]
pub mod synthetic {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use safetensors::tensor::TensorView;

    use super::*;
    use crate::encoders::clip_tokenizer::reference_vocab;
    use crate::encoders::registry::AdapterKind;

    #[derive(Clone, Debug)]
    pub struct SyntheticClip {
        pub width: usize,
        pub layers: usize,
        pub patch: usize,
        pub grid: usize,
        pub text_width: usize,
        pub text_layers: usize,
        pub context: usize,
        pub embedding_dim: usize,
        pub mlp_ratio: usize,
    }

    impl Default for SyntheticClip {
        fn default() -> Self {
            Self {
                width: 64,
                layers: 2,
                patch: 4,
                grid: 3,
                text_width: 64,
                text_layers: 1,
                context: 16,
                embedding_dim: 16,
                mlp_ratio: 2,
            }
        }
    }

    const MERGES: &[(&str, &str)] = &[
        ("d", "o"),
        ("do", "g</w>"),
        ("c", "a"),
        ("ca", "t</w>"),
        ("m", "a"),
        ("ma", "n</w>"),
    ];

    impl SyntheticClip {
        pub fn registry_entry(&self, id: &str) -> EncoderRegistryEntry {
            EncoderRegistryEntry {
                encoder_id: id.into(),
                aliases: vec![],
                architecture: "patch-transformer".into(),
                corpus: "none".into(),
                locator: "synthetic".into(),
                checksum: None,
                license: "Apache-2.0".into(),
                embedding_dim: self.embedding_dim,
                native_resolution: self.patch * self.grid,
                adapter: AdapterKind::ClipVit,
                provenance: "random weights".into(),
            }
        }

        pub fn write(&self, dir: &Path, seed: u64) -> Result<()> {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let merges: Vec<(String, String)> = MERGES
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect();
            let vocab = reference_vocab(&merges);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
            let mut put = |name: String, shape: Vec<usize>, std: f64, mean: f64| {
                let n: usize = shape.iter().product();
                let dist = Normal::new(mean, std).unwrap();
                let v = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
                tensors.insert(name, (shape, v));
            };
            let blocks = |put: &mut dyn FnMut(String, Vec<usize>, f64, f64),
                          prefix: &str,
                          d: usize,
                          layers: usize,
                          ratio: usize| {
                for l in 0..layers {
                    let p = format!("{prefix}.encoder.layers.{l}");
                    for ln in ["layer_norm1", "layer_norm2"] {
                        put(format!("{p}.{ln}.weight"), vec![d], 0.1, 1.0);
                        put(format!("{p}.{ln}.bias"), vec![d], 0.1, 0.0);
                    }
                    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                        put(
                            format!("{p}.self_attn.{proj}.weight"),
                            vec![d, d],
                            1.0 / (d as f64).sqrt(),
                            0.0,
                        );
                        put(format!("{p}.self_attn.{proj}.bias"), vec![d], 0.05, 0.0);
                    }
                    put(
                        format!("{p}.mlp.fc1.weight"),
                        vec![ratio * d, d],
                        1.0 / (d as f64).sqrt(),
                        0.0,
                    );
                    put(format!("{p}.mlp.fc1.bias"), vec![ratio * d], 0.05, 0.0);
                    put(
                        format!("{p}.mlp.fc2.weight"),
                        vec![d, ratio * d],
                        1.0 / ((ratio * d) as f64).sqrt(),
                        0.0,
                    );
                    put(format!("{p}.mlp.fc2.bias"), vec![d], 0.05, 0.0);
                }
            };
            let (d, td) = (self.width, self.text_width);
            put(
                "vision_model.embeddings.class_embedding".into(),
                vec![d],
                0.5,
                0.0,
            );
            put(
                "vision_model.embeddings.patch_embedding.weight".into(),
                vec![d, 3, self.patch, self.patch],
                0.3,
                0.0,
            );
            put(
                "vision_model.embeddings.position_embedding.weight".into(),
                vec![self.grid * self.grid + 1, d],
                0.2,
                0.0,
            );
            for ln in [
                "vision_model.pre_layrnorm",
                "vision_model.post_layernorm",
                "text_model.final_layer_norm",
            ] {
                let w = if ln.starts_with("text") { td } else { d };
                put(format!("{ln}.weight"), vec![w], 0.1, 1.0);
                put(format!("{ln}.bias"), vec![w], 0.1, 0.0);
            }
            blocks(&mut put, "vision_model", d, self.layers, self.mlp_ratio);
            blocks(&mut put, "text_model", td, self.text_layers, self.mlp_ratio);
            put(
                "visual_projection.weight".into(),
                vec![self.embedding_dim, d],
                1.0 / (d as f64).sqrt(),
                0.0,
            );
            put(
                "text_projection.weight".into(),
                vec![self.embedding_dim, td],
                1.0 / (td as f64).sqrt(),
                0.0,
            );
            put(
                "text_model.embeddings.token_embedding.weight".into(),
                vec![vocab.len(), td],
                0.5,
                0.0,
            );
            put(
                "text_model.embeddings.position_embedding.weight".into(),
                vec![self.context, td],
                0.2,
                0.0,
            );

            let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
                .into_iter()
                .map(|(name, (shape, v))| {
                    (
                        name,
                        v.iter().flat_map(|f| f.to_le_bytes()).collect(),
                        shape,
                    )
                })
                .collect();
            let views: Vec<(String, TensorView<'_>)> = bytes
                .iter()
                .map(|(name, data, shape)| {
                    (
                        name.clone(),
                        TensorView::new(Dtype::F32, shape.clone(), data).expect("consistent view"),
                    )
                })
                .collect();
            let path = dir.join(ClipVitEncoder::WEIGHTS_FILE);
            safetensors::serialize_to_file(views, None, &path)
                .map_err(|e| Error::Integrity(format!("writing synthetic checkpoint: {e}")))?;
            let vocab_path = dir.join("vocab.json");
            std::fs::write(&vocab_path, serde_json::to_string(&vocab)?)
                .map_err(|e| Error::io(&vocab_path, e))?;
            let merges_path = dir.join("merges.txt");
            let mut text = String::from("#version: 0.2\n");
            for (a, b) in MERGES {
                text.push_str(&format!("{a} {b}\n"));
            }
            std::fs::write(&merges_path, text).map_err(|e| Error::io(&merges_path, e))?;
            Ok(())
        }
    }
}
