//! Visual-text dual prompt.
//!
//! Two small frozen vision transformers encode the patch under restoration
//! (`x_local`) and its surrounding context patches (`x_global`). Class
//! tokens of both encoders form the pooled embedding; hidden states of the
//! first encoder become prompt tokens. A frozen word table stands in for
//! the text encoder. Token order is text, then global, then local.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PromptVars;
use crate::corpus;
use crate::degradation::{resize, ResizeMode};
use crate::error::{invalid, shape_mismatch, Result};
use crate::numerics::{LayerNorm, Linear, ParamId, ParamStore, Tape, Tensor, Var};

pub const VISUAL_GROUP: &str = "visual";
pub const VISUAL_HEAD_GROUP: &str = "visual_head";
pub const TEXT_GROUP: &str = "text";
pub const PROMPT_GROUP: &str = "prompt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Text, global, and local tokens.
    #[default]
    Dual,
    /// Text tokens only; pooled embedding from the caption.
    TextOnly,
    /// Global and local tokens, no text.
    VisualOnly,
    /// Text and local tokens, no global context.
    LocalOnly,
}

impl PromptMode {
    pub fn uses_text(self) -> bool {
        !matches!(self, PromptMode::VisualOnly)
    }

    pub fn uses_local(self) -> bool {
        !matches!(self, PromptMode::TextOnly)
    }

    pub fn uses_global(self) -> bool {
        matches!(self, PromptMode::Dual | PromptMode::VisualOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl VitConfig {
    pub fn tokens(&self, res: usize) -> usize {
        (res / self.patch) * (res / self.patch)
    }
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            dim: 32,
            heads: 2,
            depth: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub mode: PromptMode,
    /// Side length of the context neighbourhood in patches.
    pub grid: usize,
    /// Encoder input resolution.
    pub encoder_res: usize,
    pub enc1: VitConfig,
    pub enc2: VitConfig,
    pub max_text_tokens: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Dual,
            grid: 3,
            encoder_res: 16,
            enc1: VitConfig::default(),
            enc2: VitConfig {
                patch: 8,
                dim: 16,
                heads: 2,
                depth: 1,
            },
            max_text_tokens: 8,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        for e in [&self.enc1, &self.enc2] {
            if e.patch == 0
                || self.encoder_res % e.patch != 0
                || e.heads == 0
                || e.dim % e.heads != 0
            {
                return Err(invalid(format!(
                    "visual encoder {e:?} does not fit resolution {}",
                    self.encoder_res
                )));
            }
        }
        if self.grid == 0 || self.grid % 2 == 0 {
            return Err(invalid("context grid must be odd and positive"));
        }
        Ok(())
    }
}

/// Pixel rectangle `(y, x, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

pub fn crop(img: &Tensor, r: Rect) -> Result<Tensor> {
    let &[c, h, w] = img.shape() else {
        return Err(invalid("crop expects a c×h×w tensor"));
    };
    if r.y + r.h > h || r.x + r.w > w || r.h == 0 || r.w == 0 {
        return Err(invalid(format!("rectangle {r:?} outside {h}×{w}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(c * r.h * r.w);
    for ch in 0..c {
        for y in r.y..r.y + r.h {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&d[row + r.x..row + r.x + r.w]);
        }
    }
    Tensor::new(&[c, r.h, r.w], out)
}

/// Resize to the encoder resolution: box averaging for integer reductions,
/// bicubic otherwise.
pub fn to_encoder_res(patch: &Tensor, res: usize) -> Result<Tensor> {
    let &[c, h, w] = patch.shape() else {
        return Err(invalid("expected a c×h×w patch"));
    };
    if h == res && w == res {
        return Ok(patch.clone());
    }
    if h % res == 0 && w % res == 0 && h / res == w / res {
        let k = h / res;
        let norm = 1.0 / (k * k) as f32;
        let d = patch.data();
        let mut out = vec![0.0; c * res * res];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ch * res * res + (y / k) * res + x / k] += d[ch * h * w + y * w + x] * norm;
                }
            }
        }
        return Tensor::new(&[c, res, res], out);
    }
    resize(patch, res, res, ResizeMode::Bicubic)
}

/// Patches handed to the visual encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchContext {
    pub x_local: Tensor,
    pub x_global: Vec<Tensor>,
    pub local_rect: Rect,
}

impl PatchContext {
    pub fn is_fallback(&self) -> bool {
        self.x_global.len() == 1 && self.x_global[0] == self.x_local
    }
}

/// Rectangles of the `grid×grid` neighbourhood around `local`, row-major,
/// clamped to the image. Returns just `[local]` when no neighbour differs
/// from it.
pub fn context_rects(h: usize, w: usize, local: Rect, grid: usize) -> Result<Vec<Rect>> {
    if local.y + local.h > h || local.x + local.w > w || local.h == 0 || local.w == 0 {
        return Err(invalid(format!(
            "local patch {local:?} outside {h}×{w} image"
        )));
    }
    let r = (grid / 2) as i64;
    let mut rects = Vec::with_capacity(grid * grid);
    for dy in -r..=r {
        for dx in -r..=r {
            let y = (local.y as i64 + dy * local.h as i64).clamp(0, (h - local.h) as i64) as usize;
            let x = (local.x as i64 + dx * local.w as i64).clamp(0, (w - local.w) as i64) as usize;
            rects.push(Rect { y, x, ..local });
        }
    }
    if rects.iter().all(|q| *q == local) {
        return Ok(vec![local]);
    }
    Ok(rects)
}

/// Crop `x_local` and its context from `image`, resized to `res`.
pub fn crop_global_context(
    image: &Tensor,
    local_rect: Rect,
    grid: usize,
    res: usize,
) -> Result<PatchContext> {
    let &[_, h, w] = image.shape() else {
        return Err(invalid("context source must be c×h×w"));
    };
    let x_local = to_encoder_res(&crop(image, local_rect)?, res)?;
    let rects = context_rects(h, w, local_rect, grid)?;
    let x_global = if rects.len() == 1 {
        vec![x_local.clone()]
    } else {
        rects
            .iter()
            .map(|&r| to_encoder_res(&crop(image, r)?, res))
            .collect::<Result<_>>()?
    };
    Ok(PatchContext {
        x_local,
        x_global,
        local_rect,
    })
}

#[derive(Clone, Debug)]
struct VitBlock {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
}

/// Small vision transformer with a class token and learned positions.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub config: VitConfig,
    pub res: usize,
    patch_embed: Linear,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    ln_f: LayerNorm,
}

impl VisualEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: &VitConfig,
        res: usize,
        rng: &mut R,
    ) -> Self {
        let g = VISUAL_GROUP;
        let d = config.dim;
        let pw = 3 * config.patch * config.patch;
        let patch_embed = Linear::new(store, g, &format!("{name}.patch_embed"), pw, d, true, rng);
        let cls = store.add(g, &format!("{name}.cls"), Tensor::randn(&[1, d], 0.02, rng));
        let pos = store.add(
            g,
            &format!("{name}.pos"),
            Tensor::randn(&[1 + config.tokens(res), d], 0.02, rng),
        );
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("{name}.block{i}");
                VitBlock {
                    ln1: LayerNorm::new(store, g, &format!("{n}.ln1"), d),
                    q: Linear::new(store, g, &format!("{n}.q"), d, d, true, rng),
                    k: Linear::new(store, g, &format!("{n}.k"), d, d, true, rng),
                    v: Linear::new(store, g, &format!("{n}.v"), d, d, true, rng),
                    out: Linear::new(store, g, &format!("{n}.out"), d, d, true, rng),
                    ln2: LayerNorm::new(store, g, &format!("{n}.ln2"), d),
                    mlp1: Linear::new(store, g, &format!("{n}.mlp1"), d, 2 * d, true, rng),
                    mlp2: Linear::new(store, g, &format!("{n}.mlp2"), 2 * d, d, true, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, g, &format!("{name}.ln_f"), d);
        Self {
            config: config.clone(),
            res,
            patch_embed,
            cls,
            pos,
            blocks,
            ln_f,
        }
    }

    /// `[1 + tokens, dim]`: class token first, then patch hidden states.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<Var> {
        let s = tape.shape(img);
        if s != [3, self.res, self.res] {
            return Err(invalid(format!(
                "visual encoder expects 3×{}×{}, got {:?}",
                self.res, self.res, s
            )));
        }
        let raw = crate::backbone::patchify(tape, img, self.config.patch)?;
        let x = self.patch_embed.forward(tape, store, raw)?;
        let cls = tape.param(store, self.cls);
        let x = tape.concat_rows(&[cls, x])?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add(x, pos)?;
        for b in &self.blocks {
            let h = b.ln1.forward(tape, store, x)?;
            let q = b.q.forward(tape, store, h)?;
            let k = b.k.forward(tape, store, h)?;
            let v = b.v.forward(tape, store, h)?;
            let a = tape.attention(q, k, v, self.config.heads)?;
            let a = b.out.forward(tape, store, a)?;
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, store, x)?;
            let h = b.mlp1.forward(tape, store, h)?;
            let h = tape.gelu(h);
            let h = b.mlp2.forward(tape, store, h)?;
            x = tape.add(x, h)?;
        }
        self.ln_f.forward(tape, store, x)
    }

    /// Patch hidden states only, `[tokens, dim]`.
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, img: Var) -> Result<Var> {
        let all = self.forward(tape, store, img)?;
        let n = tape.shape(all)[0] - 1;
        tape.slice_rows(all, 1, n)
    }
}

/// Frozen caption word table.
#[derive(Clone, Debug)]
pub struct TextTokenTable {
    pub words: Vec<String>,
    tokens: ParamId,
    pooled: ParamId,
    pub max_tokens: usize,
}

pub const UNKNOWN_WORD: &str = "<unk>";

impl TextTokenTable {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prompt_dim: usize,
        pooled_dim: usize,
        max_tokens: usize,
        rng: &mut R,
    ) -> Self {
        let mut words: Vec<String> = corpus::vocabulary().into_iter().map(String::from).collect();
        words.push(UNKNOWN_WORD.into());
        let v = words.len();
        let tokens = store.add(
            TEXT_GROUP,
            "text.tokens",
            Tensor::randn(&[v, prompt_dim], 1.0, rng),
        );
        let pooled = store.add(
            TEXT_GROUP,
            "text.pooled",
            Tensor::randn(&[v, pooled_dim], 1.0, rng),
        );
        Self {
            words,
            tokens,
            pooled,
            max_tokens,
        }
    }

    /// Lower-cased whitespace tokenization, capped at `max_tokens`.
    pub fn token_ids(&self, caption: &str) -> Vec<u32> {
        let unk = self.words.len() - 1;
        caption
            .split_whitespace()
            .take(self.max_tokens)
            .map(|w| {
                let w = w.to_lowercase();
                self.words.iter().position(|v| *v == w).unwrap_or(unk) as u32
            })
            .collect()
    }

    /// `[len, prompt_dim]` embeddings.
    pub fn embed(&self, store: &ParamStore, caption: &str) -> Tensor {
        rows(store.tensor(self.tokens), &self.token_ids(caption))
    }

    /// Mean of the pooled rows of the caption words; zero when empty.
    pub fn pooled(&self, store: &ParamStore, caption: &str) -> Tensor {
        let table = store.tensor(self.pooled);
        let d = table.shape()[1];
        let ids = self.token_ids(caption);
        let mut out = vec![0.0f32; d];
        for &i in &ids {
            for (o, v) in out
                .iter_mut()
                .zip(&table.data()[i as usize * d..(i as usize + 1) * d])
            {
                *o += v / ids.len() as f32;
            }
        }
        Tensor::from_parts(vec![d], out)
    }
}

fn rows(table: &Tensor, ids: &[u32]) -> Tensor {
    let d = table.shape()[1];
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&table.data()[i as usize * d..(i as usize + 1) * d]);
    }
    Tensor::from_parts(vec![ids.len(), d], out)
}

/// Pooled embedding and token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPrompt {
    pub pooled: Tensor,
    pub tokens: Tensor,
}

/// Frozen encoder outputs for one context (before projection).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedContext {
    /// Concatenated class tokens of both encoders.
    pub cls: Tensor,
    /// enc1 hidden states of `x_local`.
    pub local: Tensor,
    /// enc1 hidden states of the context patches, stacked in list order.
    pub global: Tensor,
}

/// Encoders, projector MLPs, and the text table.
#[derive(Clone, Debug)]
pub struct DualPrompting {
    pub config: PromptConfig,
    pub prompt_dim: usize,
    pub pooled_dim: usize,
    pub enc1: VisualEncoder,
    pub enc2: VisualEncoder,
    pub text: TextTokenTable,
    token_mlp: (Linear, Linear),
    pooled_mlp: (Linear, Linear),
}

impl DualPrompting {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        config: &PromptConfig,
        prompt_dim: usize,
        pooled_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let res = config.encoder_res;
        let enc1 = VisualEncoder::new(store, "enc1", &config.enc1, res, rng);
        let enc2 = VisualEncoder::new(store, "enc2", &config.enc2, res, rng);
        let text = TextTokenTable::new(store, prompt_dim, pooled_dim, config.max_text_tokens, rng);
        let (e1, e2) = (config.enc1.dim, config.enc2.dim);
        let g = PROMPT_GROUP;
        let token_mlp = (
            Linear::new(store, g, "prompt.token.fc1", e1, prompt_dim, true, rng),
            Linear::new(
                store,
                g,
                "prompt.token.fc2",
                prompt_dim,
                prompt_dim,
                true,
                rng,
            ),
        );
        let pooled_mlp = (
            Linear::new(
                store,
                g,
                "prompt.pooled.fc1",
                e1 + e2,
                pooled_dim,
                true,
                rng,
            ),
            Linear::new(
                store,
                g,
                "prompt.pooled.fc2",
                pooled_dim,
                pooled_dim,
                true,
                rng,
            ),
        );
        Ok(Self {
            config: config.clone(),
            prompt_dim,
            pooled_dim,
            enc1,
            enc2,
            text,
            token_mlp,
            pooled_mlp,
        })
    }

    pub fn local_tokens(&self) -> usize {
        self.config.enc1.tokens(self.config.encoder_res)
    }

    fn check_patch(&self, p: &Tensor) -> Result<()> {
        let r = self.config.encoder_res;
        if p.shape() != [3, r, r] {
            return Err(invalid(format!(
                "patch must be 3×{r}×{r}, got {:?}",
                p.shape()
            )));
        }
        Ok(())
    }

    /// Class tokens of both encoders and enc1 hidden states, without grad.
    fn encode_patch(&self, store: &ParamStore, p: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_patch(p)?;
        let mut tape = Tape::no_grad();
        let x = tape.constant(p.clone());
        let a = self.enc1.forward(&mut tape, store, x)?;
        let b = self.enc2.forward(&mut tape, store, x)?;
        let (ta, tb) = (tape.value(a), tape.value(b));
        let mut cls = ta.rows(0, 1).into_data();
        cls.extend_from_slice(tb.rows(0, 1).data());
        let n = ta.shape()[0] - 1;
        Ok((Tensor::from_parts(vec![cls.len()], cls), ta.rows(1, n)))
    }

    /// Frozen encoder pass over a whole context.
    pub fn encode_context(&self, store: &ParamStore, ctx: &PatchContext) -> Result<EncodedContext> {
        if ctx.x_global.is_empty() {
            return Err(invalid("global context list is empty"));
        }
        let (cls, local) = self.encode_patch(store, &ctx.x_local)?;
        let mut parts = Vec::with_capacity(ctx.x_global.len());
        for g in &ctx.x_global {
            parts.push(if *g == ctx.x_local {
                local.clone()
            } else {
                self.encode_patch(store, g)?.1
            });
        }
        let global = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        Ok(EncodedContext { cls, local, global })
    }

    fn project_tokens(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let h = self.token_mlp.0.forward(tape, store, hidden)?;
        let h = tape.gelu(h);
        self.token_mlp.1.forward(tape, store, h)
    }

    fn project_pooled(&self, tape: &mut Tape, store: &ParamStore, cls: Var) -> Result<Var> {
        let h = self.pooled_mlp.0.forward(tape, store, cls)?;
        let h = tape.silu(h);
        self.pooled_mlp.1.forward(tape, store, h)
    }

    /// Projected prompt on a tape for the given mode. `enc` may be `None`
    /// only in text-only mode.
    pub fn build(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        enc: Option<&EncodedContext>,
        caption: &str,
        mode: PromptMode,
    ) -> Result<PromptVars> {
        let mut parts = Vec::new();
        if mode.uses_text() {
            let t = self.text.embed(store, caption);
            if !t.is_empty() {
                parts.push(tape.constant(t));
            }
        }
        let pooled = if mode == PromptMode::TextOnly {
            tape.constant(self.text.pooled(store, caption))
        } else {
            let enc = enc.ok_or_else(|| invalid("visual prompt modes need encoded context"))?;
            if mode.uses_global() {
                let g = tape.constant(enc.global.clone());
                parts.push(self.project_tokens(tape, store, g)?);
            }
            let l = tape.constant(enc.local.clone());
            parts.push(self.project_tokens(tape, store, l)?);
            let cls = tape.constant(enc.cls.clone());
            self.project_pooled(tape, store, cls)?
        };
        let tokens = match parts.len() {
            0 => None,
            1 => Some(parts[0]),
            _ => Some(tape.concat_rows(&parts)?),
        };
        Ok(PromptVars { tokens, pooled })
    }

    /// `(c_pool, c_vis_local)` of one patch.
    pub fn encode_local(&self, store: &ParamStore, x_local: &Tensor) -> Result<(Tensor, Tensor)> {
        let (cls, hidden) = self.encode_patch(store, x_local)?;
        let mut tape = Tape::no_grad();
        let c = tape.constant(cls);
        let h = tape.constant(hidden);
        let pooled = self.project_pooled(&mut tape, store, c)?;
        let tokens = self.project_tokens(&mut tape, store, h)?;
        Ok((tape.value(pooled).clone(), tape.value(tokens).clone()))
    }

    /// Projected enc1 hidden states of each context patch in list order.
    pub fn encode_global(&self, store: &ParamStore, x_global: &[Tensor]) -> Result<Tensor> {
        if x_global.is_empty() {
            return Err(invalid("global context list is empty"));
        }
        let mut parts = Vec::with_capacity(x_global.len());
        for g in x_global {
            parts.push(self.encode_patch(store, g)?.1);
        }
        let stacked = Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?;
        let mut tape = Tape::no_grad();
        let h = tape.constant(stacked);
        let t = self.project_tokens(&mut tape, store, h)?;
        Ok(tape.value(t).clone())
    }

    /// `tokens = [text; global; local]`, `pooled = c_pool`.
    pub fn assemble_dual_prompt(
        &self,
        store: &ParamStore,
        c_pool: &Tensor,
        c_vis_local: &Tensor,
        c_vis_global: &Tensor,
        caption: &str,
    ) -> Result<DualPrompt> {
        for t in [c_vis_local, c_vis_global] {
            if t.ndim() != 2 || t.shape()[1] != self.prompt_dim {
                return Err(shape_mismatch(
                    "assemble_dual_prompt",
                    t.shape(),
                    &[0, self.prompt_dim],
                ));
            }
        }
        let text = self.text.embed(store, caption);
        let tokens = Tensor::concat_rows(&[&text, c_vis_global, c_vis_local])?;
        Ok(DualPrompt {
            pooled: c_pool.clone(),
            tokens,
        })
    }
}

/// Self-supervised heads used to give the frozen encoders some structure:
/// each encoder reconstructs clean patch pixels from a degraded input and
/// its class token predicts per-channel mean and standard deviation.
#[derive(Clone, Debug)]
pub struct VisualPretrainHeads {
    rec1: Linear,
    stat1: Linear,
    rec2: Linear,
    stat2: Linear,
}

impl VisualPretrainHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &PromptConfig, rng: &mut R) -> Self {
        let g = VISUAL_HEAD_GROUP;
        let (p1, p2) = (cfg.enc1.patch, cfg.enc2.patch);
        Self {
            rec1: Linear::new(
                store,
                g,
                "visual_head.rec1",
                cfg.enc1.dim,
                3 * p1 * p1,
                true,
                rng,
            ),
            stat1: Linear::new(store, g, "visual_head.stat1", cfg.enc1.dim, 6, true, rng),
            rec2: Linear::new(
                store,
                g,
                "visual_head.rec2",
                cfg.enc2.dim,
                3 * p2 * p2,
                true,
                rng,
            ),
            stat2: Linear::new(store, g, "visual_head.stat2", cfg.enc2.dim, 6, true, rng),
        }
    }

    /// Loss for one `(degraded, clean)` pair at encoder resolution.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        dp: &DualPrompting,
        degraded: &Tensor,
        clean: &Tensor,
    ) -> Result<Var> {
        let x = tape.constant(degraded.clone());
        let stats = tape.constant(channel_stats(clean));
        let mut total = None;
        for (enc, rec, stat) in [
            (&dp.enc1, &self.rec1, &self.stat1),
            (&dp.enc2, &self.rec2, &self.stat2),
        ] {
            let all = enc.forward(tape, store, x)?;
            let n = tape.shape(all)[0] - 1;
            let cls = tape.slice_rows(all, 0, 1)?;
            let hidden = tape.slice_rows(all, 1, n)?;
            let target_v = tape.constant(clean.clone());
            let target = crate::backbone::patchify(tape, target_v, enc.config.patch)?;
            let pred = rec.forward(tape, store, hidden)?;
            let l_rec = tape.mse(pred, target)?;
            let s = stat.forward(tape, store, cls)?;
            let s = tape.reshape(s, &[6])?;
            let l_stat = tape.mse(s, stats)?;
            let l = tape.add(l_rec, l_stat)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        Ok(total.expect("two encoders"))
    }
}

fn channel_stats(img: &Tensor) -> Tensor {
    let n = img.len() / 3;
    let mut out = vec![0.0; 6];
    for c in 0..3 {
        let p = &img.data()[c * n..(c + 1) * n];
        let m = p.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
        out[c] = m as f32;
        out[3 + c] = v.sqrt() as f32;
    }
    Tensor::from_parts(vec![6], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> (ParamStore, DualPrompting) {
        let mut store = ParamStore::new();
        let dp = DualPrompting::new(
            &mut store,
            &PromptConfig::default(),
            24,
            48,
            &mut rng::stream(0, &[]),
        )
        .unwrap();
        (store, dp)
    }

    fn rect(y: usize, x: usize, s: usize) -> Rect {
        Rect { y, x, h: s, w: s }
    }

    #[test]
    fn exact_tiling_of_a_centred_patch() {
        let rects = context_rects(96, 96, rect(32, 32, 32), 3).unwrap();
        assert_eq!(rects.len(), 9);
        let mut seen: Vec<(usize, usize)> = rects.iter().map(|r| (r.y, r.x)).collect();
        seen.sort();
        let want: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (32 * i, 32 * j)))
            .collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn corner_patch_clamps_to_border() {
        let rects = context_rects(96, 96, rect(0, 0, 32), 3).unwrap();
        let got: Vec<(usize, usize)> = rects.iter().map(|r| (r.y, r.x)).collect();
        let want = vec![
            (0, 0),
            (0, 0),
            (0, 32),
            (0, 0),
            (0, 0),
            (0, 32),
            (32, 0),
            (32, 0),
            (32, 32),
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn small_image_falls_back_to_local() {
        let img = crate::corpus::procedural_image(1, 32, 32).0;
        let ctx = crop_global_context(&img, rect(0, 0, 32), 3, 16).unwrap();
        assert!(ctx.is_fallback());
        assert!(crop_global_context(&img, rect(8, 8, 32), 3, 16).is_err());
    }

    #[test]
    fn pooled_width_and_determinism() {
        let (store, dp) = model();
        let black = Tensor::zeros(&[3, 16, 16]);
        let white = Tensor::ones(&[3, 16, 16]);
        let (p1, t1) = dp.encode_local(&store, &black).unwrap();
        let (p2, t2) = dp.encode_local(&store, &black).unwrap();
        assert_eq!((p1.clone(), t1.clone()), (p2, t2));
        assert_eq!(p1.shape(), &[48]);
        assert_eq!(t1.shape(), &[16, 24]);
        let (pw, _) = dp.encode_local(&store, &white).unwrap();
        assert!(p1.max_abs_diff(&pw) > 0.0);
        assert!(dp.encode_local(&store, &Tensor::zeros(&[3, 8, 8])).is_err());
    }

    #[test]
    fn global_blocks_follow_list_order() {
        let (store, dp) = model();
        let patches: Vec<Tensor> = (0..3)
            .map(|s| crate::corpus::procedural_image(s, 16, 16).0)
            .collect();
        let g = dp.encode_global(&store, &patches).unwrap();
        assert_eq!(g.shape(), &[48, 24]);
        let rev: Vec<Tensor> = patches.iter().rev().cloned().collect();
        let gr = dp.encode_global(&store, &rev).unwrap();
        for i in 0..3 {
            assert_eq!(g.rows(16 * i, 16), gr.rows(16 * (2 - i), 16));
        }
        assert!(dp.encode_global(&store, &[]).is_err());
    }

    #[test]
    fn assembled_lengths() {
        let (store, dp) = model();
        let local = Tensor::zeros(&[16, 24]);
        let global = Tensor::zeros(&[144, 24]);
        let pool = Tensor::zeros(&[48]);
        let cap = "red stripes on blue with many extra words";
        let p = dp
            .assemble_dual_prompt(&store, &pool, &local, &global, cap)
            .unwrap();
        assert_eq!(p.tokens.shape(), &[168, 24]);
        let p = dp
            .assemble_dual_prompt(&store, &pool, &local, &global, "")
            .unwrap();
        assert_eq!(p.tokens.shape(), &[160, 24]);
        assert!(dp
            .assemble_dual_prompt(&store, &pool, &Tensor::zeros(&[16, 8]), &global, "")
            .is_err());
    }

    #[test]
    fn mode_lengths() {
        let (store, dp) = model();
        let img = crate::corpus::procedural_image(2, 96, 96).0;
        let ctx = crop_global_context(&img, rect(32, 32, 32), 3, 16).unwrap();
        let enc = dp.encode_context(&store, &ctx).unwrap();
        let cap = "red stripes on blue";
        for (mode, len) in [
            (PromptMode::Dual, 4 + 144 + 16),
            (PromptMode::TextOnly, 4),
            (PromptMode::VisualOnly, 144 + 16),
            (PromptMode::LocalOnly, 4 + 16),
        ] {
            let mut tape = Tape::no_grad();
            let p = dp.build(&mut tape, &store, Some(&enc), cap, mode).unwrap();
            assert_eq!(tape.shape(p.tokens.unwrap())[0], len, "{mode:?}");
            assert_eq!(tape.shape(p.pooled), &[48]);
        }
        let mut tape = Tape::no_grad();
        let p = dp
            .build(&mut tape, &store, None, "", PromptMode::TextOnly)
            .unwrap();
        assert!(p.tokens.is_none());
        assert!(tape.value(p.pooled).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_words_and_case() {
        let (store, dp) = model();
        let a = dp.text.token_ids("Red zebra");
        assert_eq!(a[0], dp.text.token_ids("red")[0]);
        assert_eq!(a[1] as usize, dp.text.words.len() - 1);
        assert_eq!(
            dp.text.embed(&store, "blue dots"),
            dp.text.embed(&store, "blue dots")
        );
    }
}
