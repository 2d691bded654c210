//! Hierarchical shifted-window Transformer encoder.
//!
//! Token maps are `[h*w, c]` tensors in row-major grid order. Windowed
//! attention is expressed as a row gather (cyclic shift composed with window
//! partition), batched attention over windows, and the inverse gather.

use crate::error::{Error, Result, ResultExt};
use crate::nn::{Init, LayerNorm, Linear, ParamBuilder, ParamId, Session};
use crate::tensor::{Real, Tensor, Var};

/// Logit added to attention pairs that must not interact.
pub const MASK_NEG: f64 = -1e9;

/// Side of the square pixel patch embedded into one token.
pub const PATCH: usize = 4;

/// A token tensor paired with its grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    pub x: Var,
    pub grid: (usize, usize),
}

impl TokenMap {
    pub fn new(x: Var, grid: (usize, usize)) -> Self {
        TokenMap { x, grid }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub img_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            img_size: 64,
            embed_dim: 16,
            depths: [1, 1, 2, 1],
            heads: [1, 2, 4, 8],
            window: 4,
            mlp_ratio: 4,
            rel_pos_bias: true,
        }
    }
}

/// Shape of one encoder output level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub tokens: usize,
    pub channels: usize,
    pub grid: (usize, usize),
}

impl EncoderConfig {
    /// The 352-pixel, C=128, (2,2,18,2) backbone. Window 11 is the largest
    /// size dividing every stage grid (88, 44, 22, 11).
    pub fn base_352() -> Self {
        EncoderConfig {
            img_size: 352,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            window: 11,
            mlp_ratio: 4,
            rel_pos_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size == 0 || !self.img_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "encoder.img_size {} must be a positive multiple of 32",
                self.img_size
            )));
        }
        if self.window == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder window, embed_dim and mlp_ratio must be positive".into()));
        }
        for (k, lv) in self.stage_shapes().iter().enumerate() {
            if self.depths[k] == 0 {
                return Err(Error::Config(format!("encoder stage {} has depth 0", k + 1)));
            }
            let h = self.heads[k];
            if h == 0 || lv.channels % h != 0 {
                return Err(Error::Config(format!(
                    "encoder stage {}: {} channels not divisible by {h} heads",
                    k + 1,
                    lv.channels
                )));
            }
            effective_window(lv.grid.0, self.window)
                .map_err(|e| e.context(format!("encoder stage {}", k + 1)))?;
        }
        Ok(())
    }

    /// Stage outputs in encoder order: stage 1 (H/4, C) to stage 4 (H/32, 8C).
    pub fn stage_shapes(&self) -> [LevelShape; 4] {
        std::array::from_fn(|k| {
            let g = self.img_size / (PATCH << k);
            LevelShape {
                tokens: g * g,
                channels: self.embed_dim << k,
                grid: (g, g),
            }
        })
    }
}

/// Window actually used on a `grid`-sized axis: the whole grid when it is
/// not larger than the configured window (shifting then disabled),
/// otherwise the configured window, which must divide the grid.
pub fn effective_window(grid: usize, window: usize) -> Result<(usize, bool)> {
    if grid <= window {
        Ok((grid, false))
    } else if grid.is_multiple_of(window) {
        Ok((window, true))
    } else {
        Err(Error::Config(format!("grid {grid} is not divisible by window {window}")))
    }
}

/// Source row for every windowed position: windows in row-major order,
/// tokens row-major within each window.
pub fn partition_index(grid: (usize, usize), win: usize) -> Result<Vec<usize>> {
    let (h, w) = grid;
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::shape("window_partition", format!("grid {grid:?} with window {win}")));
    }
    let mut idx = Vec::with_capacity(h * w);
    for wy in 0..h / win {
        for wx in 0..w / win {
            for ty in 0..win {
                for tx in 0..win {
                    idx.push((wy * win + ty) * w + wx * win + tx);
                }
            }
        }
    }
    Ok(idx)
}

/// Source row for a cyclic shift by `(-shift, -shift)`: position `(i, j)` of
/// the shifted map holds `((i + shift) mod h, (j + shift) mod w)`.
pub fn roll_index(grid: (usize, usize), shift: usize) -> Vec<usize> {
    let (h, w) = grid;
    (0..h)
        .flat_map(|i| (0..w).map(move |j| ((i + shift) % h) * w + (j + shift) % w))
        .collect()
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (k, &src) in p.iter().enumerate() {
        inv[src] = k;
    }
    inv
}

/// Region label of every position of the shifted map. Positions with
/// different labels came from non-adjacent parts of the original map.
pub fn region_ids(grid: (usize, usize), win: usize, shift: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - win {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (h, w) = grid;
    (0..h)
        .flat_map(|i| (0..w).map(move |j| 3 * band(i, h) + band(j, w)))
        .collect()
}

/// Additive mask `[n_windows, win², win²]` for shifted windows.
pub fn shift_mask(grid: (usize, usize), win: usize, shift: usize) -> Result<Tensor<f64>> {
    let ids = region_ids(grid, win, shift);
    let part = partition_index(grid, win)?;
    let t = win * win;
    let nw = part.len() / t;
    let mut m = vec![0.0; nw * t * t];
    for wi in 0..nw {
        let rows = &part[wi * t..(wi + 1) * t];
        for a in 0..t {
            for b in 0..t {
                if ids[rows[a]] != ids[rows[b]] {
                    m[(wi * t + a) * t + b] = MASK_NEG;
                }
            }
        }
    }
    Tensor::new(&[nw, t, t], m)
}

/// Index into the `(2·win-1)²` bias table for every `(query, key)` pair.
pub fn relative_position_index(win: usize) -> Vec<usize> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for a in 0..t {
        for b in 0..t {
            let dy = a / win + win - 1 - b / win;
            let dx = a % win + win - 1 - b % win;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Precomputed index plumbing for one block's attention pattern.
#[derive(Clone, Debug)]
pub struct WindowLayout {
    pub grid: (usize, usize),
    pub win: usize,
    pub shift: usize,
    /// Gather into windowed order; `None` when it is the identity.
    gather: Option<Vec<usize>>,
    scatter: Option<Vec<usize>>,
    mask: Option<Tensor<f64>>,
}

impl WindowLayout {
    /// `shift` must be 0 or `win / 2`.
    pub fn new(grid: (usize, usize), win: usize, shift: usize) -> Result<Self> {
        if shift != 0 && shift != win / 2 {
            return Err(Error::Config(format!("shift {shift} with window {win}")));
        }
        let part = partition_index(grid, win)?;
        let gather = if shift == 0 {
            part
        } else {
            let roll = roll_index(grid, shift);
            part.iter().map(|&k| roll[k]).collect()
        };
        let identity = gather.iter().enumerate().all(|(k, &s)| k == s);
        let mask = if shift > 0 { Some(shift_mask(grid, win, shift)?) } else { None };
        Ok(WindowLayout {
            grid,
            win,
            shift,
            scatter: (!identity).then(|| invert_permutation(&gather)),
            gather: (!identity).then_some(gather),
            mask,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1 / (self.win * self.win)
    }

    pub fn mask(&self) -> Option<&Tensor<f64>> {
        self.mask.as_ref()
    }
}

/// Multi-head self-attention inside windows, with optional relative
/// position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub win: usize,
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: Option<ParamId>,
    rel_index: Vec<usize>,
}

impl WindowAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize, heads: usize, win: usize, rel_pos_bias: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: {dim} channels not divisible by {heads} heads")));
        }
        let span = 2 * win - 1;
        Ok(WindowAttention {
            dim,
            heads,
            win,
            qkv: Linear::new(b, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(b, &format!("{name}.proj"), dim, dim, true),
            bias_table: rel_pos_bias
                .then(|| b.param(&format!("{name}.rel_bias"), &[span * span, heads], Init::Zeros)),
            rel_index: relative_position_index(win),
        })
    }

    /// Attention over `x: [h*w, dim]` with the given layout.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, layout: &WindowLayout) -> Result<Var> {
        self.forward_with_probs(s, x, layout).map(|(y, _)| y)
    }

    /// Also returns the attention probabilities `[n_windows, heads, t, t]`.
    pub fn forward_with_probs<T: Real>(&self, s: &mut Session<T>, x: Var, layout: &WindowLayout) -> Result<(Var, Var)> {
        let n = layout.grid.0 * layout.grid.1;
        if s.g.shape(x) != [n, self.dim] || layout.win != self.win {
            return Err(Error::shape(
                "window_attention",
                format!("input {:?} for grid {:?}, dim {}, window {}", s.g.shape(x), layout.grid, self.dim, layout.win),
            ));
        }
        let (nw, t, hd) = (layout.num_windows(), self.win * self.win, self.dim / self.heads);
        let xw = match &layout.gather {
            Some(idx) => s.g.gather_rows(x, idx)?,
            None => x,
        };
        let qkv = self.qkv.forward(s, xw)?;
        let qkv = s.g.reshape(qkv, &[nw, t, 3, self.heads, hd])?;
        let qkv = s.g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = s.g.reshape(qkv, &[3, nw * self.heads, t, hd])?;
        let parts = s.g.split(qkv, 0, &[1, 1, 1])?;
        let q = s.g.reshape(parts[0], &[nw * self.heads, t, hd])?;
        let k = s.g.reshape(parts[1], &[nw * self.heads, t, hd])?;
        let v = s.g.reshape(parts[2], &[nw * self.heads, t, hd])?;

        let q = s.g.scale(q, 1.0 / (hd as f64).sqrt())?;
        let kt = s.g.transpose_last(k)?;
        let logits = s.g.matmul(q, kt)?;
        let mut logits = s.g.reshape(logits, &[nw, self.heads, t, t])?;
        if let Some(table) = self.bias_table {
            let table = s.p(table);
            let bias = s.g.gather_rows(table, &self.rel_index)?;
            let bias = s.g.reshape(bias, &[t, t, self.heads])?;
            let bias = s.g.permute(bias, &[2, 0, 1])?;
            logits = s.g.add(logits, bias)?;
        }
        if let Some(mask) = &layout.mask {
            let m = s.g.constant(mask.cast::<T>().reshaped(&[nw, 1, t, t])?);
            logits = s.g.add(logits, m)?;
        }
        let probs = s.g.softmax_lastdim(logits)?;
        let pv = s.g.reshape(probs, &[nw * self.heads, t, t])?;
        let out = s.g.matmul(pv, v)?;
        let out = s.g.reshape(out, &[nw, self.heads, t, hd])?;
        let out = s.g.permute(out, &[0, 2, 1, 3])?;
        let out = s.g.reshape(out, &[n, self.dim])?;
        let out = self.proj.forward(s, out)?;
        let out = match &layout.scatter {
            Some(idx) => s.g.gather_rows(out, idx)?,
            None => out,
        };
        Ok((out, probs))
    }
}

/// Geometry and width of a block.
#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub rel_pos_bias: bool,
}

/// Pre-norm residual block: `x + attn(LN(x))`, then `+ MLP(LN(.))`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub layout: WindowLayout,
}

impl SwinBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, grid: (usize, usize), spec: BlockSpec, shifted: bool) -> Result<Self> {
        let (win, can_shift) = effective_window(grid.0.min(grid.1), spec.window)?;
        let shift = if shifted && can_shift { win / 2 } else { 0 };
        let layout = WindowLayout::new(grid, win, shift).ctx(|| name.to_string())?;
        let hidden = spec.dim * spec.mlp_ratio;
        Ok(SwinBlock {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), spec.dim),
            attn: WindowAttention::new(b, &format!("{name}.attn"), spec.dim, spec.heads, win, spec.rel_pos_bias)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), spec.dim),
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), spec.dim, hidden, true),
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), hidden, spec.dim, true),
            layout,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(s, x)?;
        let a = self.attn.forward(s, h, &self.layout)?;
        let x = s.g.add(x, a)?;
        let h = self.norm2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.g.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.g.add(x, h)
    }
}

/// Consecutive blocks on one grid, alternating unshifted and shifted windows.
#[derive(Clone, Debug)]
pub struct SwinStack {
    pub blocks: Vec<SwinBlock>,
    pub grid: (usize, usize),
}

impl SwinStack {
    pub fn new(b: &mut ParamBuilder, name: &str, grid: (usize, usize), spec: BlockSpec, depth: usize) -> Result<Self> {
        let blocks = (0..depth)
            .map(|j| SwinBlock::new(b, &format!("{name}.block{j}"), grid, spec, j % 2 == 1))
            .collect::<Result<_>>()?;
        Ok(SwinStack { blocks, grid })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        for blk in &self.blocks {
            x = blk.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Linear projection of non-overlapping 4×4×3 patches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(b, &format!("{name}.proj"), PATCH * PATCH * 3, dim, true),
        }
    }

    /// `rgb: [H, W, 3]`. Patch vectors are laid out `(dy, dx, channel)`.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, rgb: &Tensor<T>) -> Result<TokenMap> {
        let patches = extract_patches(rgb)?;
        let grid = (rgb.shape()[0] / PATCH, rgb.shape()[1] / PATCH);
        let x = s.g.constant(patches);
        Ok(TokenMap::new(self.proj.forward(s, x)?, grid))
    }
}

/// Rearrange `[H, W, 3]` into `[(H/4)·(W/4), 48]` patch rows.
pub fn extract_patches<T: Real>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let sh = rgb.shape();
    if sh.len() != 3 || sh[2] != 3 || !sh[0].is_multiple_of(PATCH) || !sh[1].is_multiple_of(PATCH) {
        return Err(Error::shape("patch_embed", format!("image {sh:?} must be [H, W, 3] with H, W divisible by {PATCH}")));
    }
    let (h, w) = (sh[0], sh[1]);
    let (gh, gw) = (h / PATCH, w / PATCH);
    let src = rgb.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..PATCH {
                let row = (py * PATCH + dy) * w + px * PATCH;
                out.extend_from_slice(&src[row * 3..(row + PATCH) * 3]);
            }
        }
    }
    Tensor::new(&[gh * gw, PATCH * PATCH * 3], out)
}

/// 2×2 neighbor concatenation, LayerNorm over `4c`, then `4c -> 2c` without bias.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
    pub grid: (usize, usize),
    taps: [Vec<usize>; 4],
}

impl PatchMerge {
    pub fn new(b: &mut ParamBuilder, name: &str, grid: (usize, usize), dim: usize) -> Result<Self> {
        let (h, w) = grid;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("patch_merge", format!("odd grid {grid:?}")));
        }
        // Neighbor order: (2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1).
        let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
        let taps = offsets.map(|(dy, dx)| {
            (0..h / 2)
                .flat_map(|i| (0..w / 2).map(move |j| (2 * i + dy) * w + 2 * j + dx))
                .collect()
        });
        Ok(PatchMerge {
            norm: LayerNorm::new(b, &format!("{name}.norm"), 4 * dim),
            reduce: Linear::new(b, &format!("{name}.reduction"), 4 * dim, 2 * dim, false),
            grid,
            taps,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: TokenMap) -> Result<TokenMap> {
        if x.grid != self.grid {
            return Err(Error::shape("patch_merge", format!("grid {:?}, expected {:?}", x.grid, self.grid)));
        }
        let parts = self
            .taps
            .iter()
            .map(|idx| s.g.gather_rows(x.x, idx))
            .collect::<Result<Vec<_>>>()?;
        let cat = s.g.concat(&parts, 1)?;
        let y = self.norm.forward(s, cat)?;
        let y = self.reduce.forward(s, y)?;
        Ok(TokenMap::new(y, (self.grid.0 / 2, self.grid.1 / 2)))
    }
}

/// Four-level pyramid, finest first: `[F4, F3, F2, F1]` at H/4 .. H/32.
pub type Pyramid = [TokenMap; 4];

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<SwinStack>,
    pub merges: Vec<PatchMerge>,
    /// LayerNorm on each consumed pyramid output (`None` for levels nobody
    /// reads); the merge chain sees the raw tokens.
    pub out_norms: Vec<Option<LayerNorm>>,
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        Self::with_outputs(b, cfg, [true; 4])
    }

    /// Encoder whose pyramid levels flagged in `used` (finest first) get an
    /// output norm. Unused levels are returned un-normalized.
    pub fn with_outputs(b: &mut ParamBuilder, cfg: &EncoderConfig, used: [bool; 4]) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.stage_shapes();
        let embed = PatchEmbed::new(b, "encoder.embed", cfg.embed_dim);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        let mut out_norms = Vec::new();
        for (k, lv) in shapes.iter().enumerate() {
            let spec = BlockSpec {
                dim: lv.channels,
                heads: cfg.heads[k],
                window: cfg.window,
                mlp_ratio: cfg.mlp_ratio,
                rel_pos_bias: cfg.rel_pos_bias,
            };
            stages.push(SwinStack::new(b, &format!("encoder.stage{}", k + 1), lv.grid, spec, cfg.depths[k])?);
            out_norms.push(used[k].then(|| LayerNorm::new(b, &format!("encoder.out_norm{}", k + 1), lv.channels)));
            if k < 3 {
                merges.push(PatchMerge::new(b, &format!("encoder.merge{}", k + 1), lv.grid, lv.channels)?);
            }
        }
        Ok(Encoder {
            cfg: cfg.clone(),
            embed,
            stages,
            merges,
            out_norms,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, rgb: &Tensor<T>) -> Result<Pyramid> {
        let side = self.cfg.img_size;
        if rgb.shape() != [side, side, 3] {
            return Err(Error::shape("encode", format!("image {:?}, model expects [{side}, {side}, 3]", rgb.shape())));
        }
        let mut x = self.embed.forward(s, rgb)?;
        let mut outs = Vec::with_capacity(4);
        for (k, stage) in self.stages.iter().enumerate() {
            x.x = stage.forward(s, x.x).ctx(|| format!("encoder stage {}", k + 1))?;
            let mut out = x;
            if let Some(norm) = &self.out_norms[k] {
                out.x = norm.forward(s, x.x)?;
            }
            outs.push(out);
            if k < 3 {
                x = self.merges[k].forward(s, x)?;
            }
        }
        Ok([outs[0], outs[1], outs[2], outs[3]])
    }
}
