//! Two-stream decoder: per-stream channel reduction, cascaded multi-scale
//! aggregation (MFA), cross-stream fusion (MFF), multi-level saliency heads
//! and the final saliency / depth heads.
//!
//! Levels are numbered coarse to fine: level 1 is the H/32 map, level 4 the
//! H/4 map. Internally pyramids from the encoder are finest-first, so level
//! `i` is `pyramid[4 - i]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result, ResultExt};
use crate::nn::{Linear, ParamBuilder, ParamGroup, ParamStore, Session};
use crate::swin::{BlockSpec, Encoder, EncoderConfig, LevelShape, SwinStack, TokenMap};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub down: usize,
    pub block_depth: usize,
    pub use_mfa: bool,
    pub use_depth_stream: bool,
    pub use_mff: bool,
    pub use_mls: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            down: 8,
            block_depth: 1,
            use_mfa: true,
            use_depth_stream: true,
            use_mff: true,
            use_mls: true,
        }
    }
}

/// The five component combinations of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Linear-GELU-linear head on the coarsest features.
    A,
    /// MFA decoder.
    B,
    /// MFA plus depth supervision.
    C,
    /// MFA, depth supervision and MFF.
    D,
    /// Everything, including multi-level supervision.
    E,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::A, Ablation::B, Ablation::C, Ablation::D, Ablation::E];

    /// `(use_mfa, use_depth_stream, use_mff, use_mls)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Ablation::A => (false, false, false, false),
            Ablation::B => (true, false, false, false),
            Ablation::C => (true, true, false, false),
            Ablation::D => (true, true, true, false),
            Ablation::E => (true, true, true, true),
        }
    }

    pub fn apply(self, cfg: &mut DecoderConfig) {
        (cfg.use_mfa, cfg.use_depth_stream, cfg.use_mff, cfg.use_mls) = self.flags();
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Ablation::A),
            "b" | "B" => Ok(Ablation::B),
            "c" | "C" => Ok(Ablation::C),
            "d" | "D" => Ok(Ablation::D),
            "e" | "E" => Ok(Ablation::E),
            _ => Err(Error::Config(format!("unknown ablation `{s}` (expected a-e)"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Ablation::A => 'a',
            Ablation::B => 'b',
            Ablation::C => 'c',
            Ablation::D => 'd',
            Ablation::E => 'e',
        };
        write!(f, "{c}")
    }
}

/// Heads for a decoder block of width `ch`: `max(1, ch / 8)`, lowered until
/// it divides `ch`.
pub fn decoder_heads(ch: usize) -> usize {
    let mut h = (ch / 8).max(1);
    while !ch.is_multiple_of(h) {
        h -= 1;
    }
    h
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.down == 0 || self.block_depth == 0 {
            return Err(Error::Config("decoder.down and decoder.block_depth must be positive".into()));
        }
        if !self.use_mfa && (self.use_depth_stream || self.use_mff || self.use_mls) {
            return Err(Error::Config(
                "decoder flags other than use_mfa require use_mfa = true".into(),
            ));
        }
        if self.use_mff && !self.use_depth_stream {
            return Err(Error::Config("decoder.use_mff requires decoder.use_depth_stream".into()));
        }
        if self.use_mfa {
            for lv in enc.stage_shapes() {
                if lv.channels % self.down != 0 {
                    return Err(Error::Config(format!(
                        "{} encoder channels not divisible by decoder.down = {}",
                        lv.channels, self.down
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reduced shapes per level, coarse to fine (level 1 first).
    pub fn level_shapes(&self, enc: &EncoderConfig) -> [LevelShape; 4] {
        let st = enc.stage_shapes();
        std::array::from_fn(|i| {
            let lv = st[3 - i];
            LevelShape {
                channels: lv.channels / self.down,
                ..lv
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

fn spec(enc: &EncoderConfig, dim: usize) -> BlockSpec {
    BlockSpec {
        dim,
        heads: decoder_heads(dim),
        window: enc.window,
        mlp_ratio: enc.mlp_ratio,
        rel_pos_bias: enc.rel_pos_bias,
    }
}

/// Aggregates a coarse map `(h, w, 2D)` into the next finer level `(2h, 2w, D)`.
#[derive(Clone, Debug)]
pub struct Mfa {
    pub fine_block: SwinStack,
    pub expand: Linear,
    pub cat_block: SwinStack,
    pub reduce: Linear,
    pub fine: LevelShape,
}

impl Mfa {
    pub fn new(b: &mut ParamBuilder, name: &str, enc: &EncoderConfig, fine: LevelShape, depth: usize) -> Result<Self> {
        let d = fine.channels;
        Ok(Mfa {
            fine_block: SwinStack::new(b, &format!("{name}.fine"), fine.grid, spec(enc, d), depth)?,
            expand: Linear::fan_in(b, &format!("{name}.expand"), d, 2 * d, true),
            cat_block: SwinStack::new(b, &format!("{name}.cat"), fine.grid, spec(enc, 6 * d), depth)?,
            reduce: Linear::fan_in(b, &format!("{name}.reduce"), 6 * d, d, true),
            fine,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, coarse: TokenMap, fine: TokenMap) -> Result<TokenMap> {
        let d = self.fine.channels;
        let (gh, gw) = fine.grid;
        if fine.grid != self.fine.grid
            || coarse.grid != (gh / 2, gw / 2)
            || s.g.shape(fine.x) != [gh * gw, d]
            || s.g.shape(coarse.x) != [gh * gw / 4, 2 * d]
        {
            return Err(Error::shape(
                "mfa",
                format!(
                    "coarse {:?} on {:?}, fine {:?} on {:?}",
                    s.g.shape(coarse.x),
                    coarse.grid,
                    s.g.shape(fine.x),
                    fine.grid
                ),
            ));
        }
        let up = s.g.upsample2x(coarse.x, coarse.grid)?;
        let mid = self.fine_block.forward(s, fine.x)?;
        let mid = self.expand.forward(s, mid)?;
        let prod = s.g.mul(up, mid)?;
        let cat = s.g.concat(&[up, mid, prod], 1)?;
        let z = self.cat_block.forward(s, cat)?;
        let z = self.reduce.forward(s, z)?;
        Ok(TokenMap::new(z, fine.grid))
    }
}

/// Fuses the two streams at one level and splits them again.
#[derive(Clone, Debug)]
pub struct Mff {
    pub fuse_block: SwinStack,
    pub reduce: Linear,
    pub sal_block: SwinStack,
    pub depth_block: SwinStack,
    pub level: LevelShape,
}

impl Mff {
    pub fn new(b: &mut ParamBuilder, name: &str, enc: &EncoderConfig, level: LevelShape, depth: usize) -> Result<Self> {
        let d = level.channels;
        Ok(Mff {
            fuse_block: SwinStack::new(b, &format!("{name}.fuse"), level.grid, spec(enc, 3 * d), depth)?,
            reduce: Linear::fan_in(b, &format!("{name}.reduce"), 3 * d, d, true),
            sal_block: SwinStack::new(b, &format!("{name}.sal"), level.grid, spec(enc, d), depth)?,
            depth_block: SwinStack::new(b, &format!("{name}.depth"), level.grid, spec(enc, d), depth)?,
            level,
        })
    }

    /// Returns `(saliency, depth)` maps.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, zs: TokenMap, zd: TokenMap) -> Result<(TokenMap, TokenMap)> {
        let want = [self.level.tokens, self.level.channels];
        if zs.grid != zd.grid || s.g.shape(zs.x) != want || s.g.shape(zd.x) != want {
            return Err(Error::shape(
                "mff",
                format!("saliency {:?} vs depth {:?}, expected {want:?}", s.g.shape(zs.x), s.g.shape(zd.x)),
            ));
        }
        let fused = self.fuse(s, zs, zd)?;
        let fs = self.sal_block.forward(s, fused)?;
        let fd = self.depth_block.forward(s, fused)?;
        Ok((TokenMap::new(fs, zs.grid), TokenMap::new(fd, zs.grid)))
    }

    /// The shared fused map before the two output blocks.
    pub fn fuse<T: Real>(&self, s: &mut Session<T>, zs: TokenMap, zd: TokenMap) -> Result<Var> {
        let prod = s.g.mul(zd.x, zs.x)?;
        let cat = s.g.concat(&[zd.x, zs.x, prod], 1)?;
        let f = self.fuse_block.forward(s, cat)?;
        self.reduce.forward(s, f)
    }
}

/// Token-wise linear to one channel, resized to the output image.
#[derive(Clone, Debug)]
pub struct MapHead {
    pub proj: Linear,
}

impl MapHead {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        MapHead {
            proj: Linear::fan_in(b, name, dim, 1, true),
        }
    }

    /// `[H, W]` logits.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: TokenMap, out: (usize, usize)) -> Result<Var> {
        let y = self.proj.forward(s, x.x)?;
        let y = s.g.resize_bilinear(y, x.grid, out)?;
        s.g.reshape(y, &[out.0, out.1])
    }
}

/// Per-stream parameters.
#[derive(Clone, Debug)]
pub struct Stream {
    pub reduce: Vec<Linear>,
    /// `mfa[i]` produces level `i + 2`.
    pub mfa: Vec<Mfa>,
}

impl Stream {
    fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let enc_levels = cfg.encoder.stage_shapes();
        let levels = cfg.decoder.level_shapes(&cfg.encoder);
        let reduce = (0..4)
            .map(|i| {
                let full = enc_levels[3 - i].channels;
                Linear::fan_in(b, &format!("{name}.reduce{}", i + 1), full, levels[i].channels, true)
            })
            .collect();
        let mfa = (1..4)
            .map(|i| Mfa::new(b, &format!("{name}.mfa{}", i + 1), &cfg.encoder, levels[i], cfg.decoder.block_depth))
            .collect::<Result<_>>()?;
        Ok(Stream { reduce, mfa })
    }
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub baseline: Option<Baseline>,
    pub sal: Option<Stream>,
    pub depth: Option<Stream>,
    /// `mff[i]` fuses level `i + 2`.
    pub mff: Vec<Mff>,
    /// Heads on levels 2, 3, 4 of the saliency stream.
    pub mls: Vec<MapHead>,
    pub sal_head: Option<MapHead>,
    pub depth_head: Option<MapHead>,
}

/// Traced intermediate maps of one stream, indexed by level `1..=4` at
/// position `level - 1`. `z[0]` is absent: level 1 is not aggregated.
#[derive(Clone, Debug, Default)]
pub struct StreamTrace {
    pub reduced: Vec<TokenMap>,
    pub z: Vec<Option<TokenMap>>,
    pub out: Vec<TokenMap>,
}

#[derive(Clone, Debug, Default)]
pub struct StreamFeatures {
    pub sal: StreamTrace,
    pub depth: Option<StreamTrace>,
}

impl StreamFeatures {
    /// Every level doubles the grid and halves the channels of the level
    /// before it, in every traced map of both streams.
    pub fn check_ladder<T: Real>(&self, s: &Session<T>, levels: &[LevelShape; 4]) -> Result<()> {
        for (name, tr) in std::iter::once(("s", &self.sal)).chain(self.depth.as_ref().map(|d| ("d", d))) {
            let mut maps: Vec<(usize, TokenMap)> = tr.reduced.iter().copied().enumerate().collect();
            maps.extend(tr.out.iter().copied().enumerate());
            maps.extend(tr.z.iter().enumerate().filter_map(|(i, z)| z.map(|z| (i, z))));
            for (i, m) in maps {
                let lv = levels[i];
                if m.grid != lv.grid || s.g.shape(m.x) != [lv.tokens, lv.channels] {
                    return Err(Error::shape(
                        "stream ladder",
                        format!("{name}-stream level {}: {:?} on {:?}, expected {lv:?}", i + 1, s.g.shape(m.x), m.grid),
                    ));
                }
            }
        }
        for i in 1..4 {
            let (a, b) = (levels[i - 1], levels[i]);
            if b.grid != (2 * a.grid.0, 2 * a.grid.1) || 2 * b.channels != a.channels {
                return Err(Error::shape("stream ladder", format!("level {} -> {}: {a:?} -> {b:?}", i, i + 1)));
            }
        }
        Ok(())
    }
}

/// Output maps, each `[H, W]`.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub saliency: Var,
    pub depth: Option<Var>,
    /// Logits from levels 2, 3, 4 (coarse to fine).
    pub mls: Vec<Var>,
}

impl Decoder {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dc = &cfg.decoder;
        let levels = dc.level_shapes(&cfg.encoder);
        if !dc.use_mfa {
            let ch = cfg.encoder.stage_shapes()[3].channels;
            return Ok(Decoder {
                cfg: dc.clone(),
                baseline: Some(Baseline {
                    fc1: Linear::fan_in(b, "decoder.baseline.fc1", ch, ch, true),
                    fc2: Linear::fan_in(b, "decoder.baseline.fc2", ch, 1, true),
                }),
                sal: None,
                depth: None,
                mff: Vec::new(),
                mls: Vec::new(),
                sal_head: None,
                depth_head: None,
            });
        }
        let sal = Stream::new(b, "decoder.s", cfg)?;
        let depth = dc.use_depth_stream.then(|| Stream::new(b, "decoder.d", cfg)).transpose()?;
        let mff = if dc.use_mff {
            (1..4)
                .map(|i| Mff::new(b, &format!("decoder.mff{}", i + 1), &cfg.encoder, levels[i], dc.block_depth))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mls = if dc.use_mls {
            (1..4)
                .map(|i| MapHead::new(b, &format!("decoder.s.mls{}", i + 1), levels[i].channels))
                .collect()
        } else {
            Vec::new()
        };
        let d4 = levels[3].channels;
        Ok(Decoder {
            cfg: dc.clone(),
            baseline: None,
            sal: Some(sal),
            depth_head: depth.as_ref().map(|_| MapHead::new(b, "decoder.d.head", d4)),
            depth,
            mff,
            mls,
            sal_head: Some(MapHead::new(b, "decoder.s.head", d4)),
        })
    }

    /// `pyramid` is finest-first as returned by the encoder.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        pyramid: &[TokenMap; 4],
        out: (usize, usize),
    ) -> Result<(Predictions, StreamFeatures)> {
        if let Some(base) = &self.baseline {
            let f1 = pyramid[3];
            let h = base.fc1.forward(s, f1.x)?;
            let h = s.g.gelu(h)?;
            let y = base.fc2.forward(s, h)?;
            let y = s.g.resize_bilinear(y, f1.grid, out)?;
            let y = s.g.reshape(y, &[out.0, out.1])?;
            return Ok((
                Predictions {
                    saliency: y,
                    depth: None,
                    mls: Vec::new(),
                },
                StreamFeatures::default(),
            ));
        }
        let sal = self.sal.as_ref().expect("saliency stream");
        let mut ts = reduce_stream(s, sal, pyramid).ctx(|| "s-stream".into())?;
        let mut td = match &self.depth {
            Some(d) => Some(reduce_stream(s, d, pyramid).ctx(|| "d-stream".into())?),
            None => None,
        };
        for i in 1..4 {
            let zs = sal.mfa[i - 1]
                .forward(s, ts.out[i - 1], ts.reduced[i])
                .ctx(|| format!("level {} / s-stream", i + 1))?;
            ts.z[i] = Some(zs);
            let zd = match (&self.depth, td.as_mut()) {
                (Some(d), Some(tr)) => {
                    let z = d.mfa[i - 1]
                        .forward(s, tr.out[i - 1], tr.reduced[i])
                        .ctx(|| format!("level {} / d-stream", i + 1))?;
                    tr.z[i] = Some(z);
                    Some(z)
                }
                _ => None,
            };
            let (fs, fd) = match (self.mff.get(i - 1), zd) {
                (Some(m), Some(zd)) => {
                    let (a, b) = m.forward(s, zs, zd).ctx(|| format!("level {} / fusion", i + 1))?;
                    (a, Some(b))
                }
                _ => (zs, zd),
            };
            ts.out.push(fs);
            if let (Some(tr), Some(fd)) = (td.as_mut(), fd) {
                tr.out.push(fd);
            }
        }
        let mls = self
            .mls
            .iter()
            .zip(&ts.out[1..])
            .map(|(h, &f)| h.forward(s, f, out))
            .collect::<Result<Vec<_>>>()?;
        let saliency = self.sal_head.as_ref().expect("saliency head").forward(s, ts.out[3], out)?;
        let depth = match (&self.depth_head, &td) {
            (Some(h), Some(tr)) => {
                let d = h.forward(s, tr.out[3], out)?;
                Some(s.g.sigmoid(d)?)
            }
            _ => None,
        };
        Ok((Predictions { saliency, depth, mls }, StreamFeatures { sal: ts, depth: td }))
    }
}

fn reduce_stream<T: Real>(s: &mut Session<T>, st: &Stream, pyramid: &[TokenMap; 4]) -> Result<StreamTrace> {
    let reduced = (0..4)
        .map(|i| {
            let f = pyramid[3 - i];
            Ok(TokenMap::new(st.reduce[i].forward(s, f.x)?, f.grid))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StreamTrace {
        out: vec![reduced[0]],
        z: vec![None; 4],
        reduced,
    })
}

/// Encoder plus decoder.
#[derive(Clone, Debug)]
pub struct Dftr {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Dftr {
    /// Build the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        b.set_group(ParamGroup::Backbone);
        // The baseline decoder reads only the coarsest level.
        let used = if cfg.decoder.use_mfa { [true; 4] } else { [false, false, false, true] };
        let encoder = Encoder::with_outputs(&mut b, &cfg.encoder, used)?;
        b.set_group(ParamGroup::Other);
        let decoder = Decoder::new(&mut b, cfg)?;
        Ok((
            Dftr {
                cfg: cfg.clone(),
                encoder,
                decoder,
            },
            b.finish(),
        ))
    }

    pub fn input_side(&self) -> usize {
        self.cfg.encoder.img_size
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, rgb: &Tensor<T>) -> Result<Predictions> {
        self.forward_traced(s, rgb).map(|(p, _)| p)
    }

    pub fn forward_traced<T: Real>(&self, s: &mut Session<T>, rgb: &Tensor<T>) -> Result<(Predictions, StreamFeatures)> {
        let pyramid = self.encoder.forward(s, rgb)?;
        let side = self.input_side();
        let (p, feats) = self.decoder.forward(s, &pyramid, (side, side))?;
        if self.cfg.decoder.use_mfa {
            feats.check_ladder(s, &self.cfg.decoder.level_shapes(&self.cfg.encoder))?;
        }
        Ok((p, feats))
    }
}
