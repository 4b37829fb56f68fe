use serde::{Deserialize, Serialize};

use super::layers::{
    conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, linear, linear_backward,
    offset_aggregate, offset_aggregate_backward, pixel_shuffle, pixel_unshuffle, upsample_nearest,
    upsample_nearest_backward, ConvGeom, Im2Col, LnCache,
};
use super::params::{Init, ParamSpec, ParamStore};
use super::tensor::{matmul_a_bt_acc, matmul_at_b_acc, Fmap};
use crate::error::{Error, Result};
use crate::patching::PatchConfig;

/// Stride of the stem and factor of the output pixel shuffle.
pub const STEM_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenEmbed {
    /// Tokens pass through unchanged; only `pe` is added.
    Identity,
    /// Shared `d × d` projection per token.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub n_vars: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub patch: PatchConfig,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    /// One block type per stage: `A` offset aggregation, `B` plain 3×3 conv.
    pub pattern: String,
    pub kernel: usize,
    pub ffn_ratio: usize,
    pub decoder_width: usize,
    pub token_embed: TokenEmbed,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            n_vars: 8,
            height: 96,
            width: 64,
            n_classes: 3,
            patch: PatchConfig::default(),
            widths: vec![16, 32, 48, 64],
            depths: vec![1, 1, 1, 1],
            pattern: "AABA".into(),
            kernel: 3,
            ffn_ratio: 2,
            decoder_width: 16,
            token_embed: TokenEmbed::Identity,
        }
    }
}

impl ArchConfig {
    pub fn n_stages(&self) -> usize {
        self.widths.len()
    }

    /// Total down-sampling factor of the deepest stage.
    pub fn max_stride(&self) -> usize {
        STEM_STRIDE << self.n_stages().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        let s = self.n_stages();
        if s == 0 || self.depths.len() != s || self.pattern.chars().count() != s {
            return bad(format!(
                "{} widths, {} depths and pattern {:?} must agree in length",
                s,
                self.depths.len(),
                self.pattern
            ));
        }
        if let Some(c) = self.pattern.chars().find(|c| !matches!(c, 'A' | 'B')) {
            return bad(format!("unknown block type {c:?}"));
        }
        if self.widths.contains(&0) || self.depths.contains(&0) {
            return bad("stage widths and depths must be positive".into());
        }
        if self.kernel % 2 == 0 || self.ffn_ratio == 0 || self.decoder_width == 0 {
            return bad("kernel must be odd; ffn ratio and decoder width positive".into());
        }
        if self.n_vars == 0 || self.n_classes < 2 {
            return bad("need at least one variable and two classes".into());
        }
        let m = self.max_stride();
        if self.height % m != 0 || self.width % m != 0 || self.height == 0 || self.width == 0 {
            return bad(format!("input {}x{} is not divisible by {m}", self.height, self.width));
        }
        self.patch.check(self.n_vars, self.height, self.width)
    }

    fn block_kind(&self, stage: usize) -> char {
        self.pattern.chars().nth(stage).unwrap_or('A')
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Reconstruction decoder, `n_vars` outputs.
    Rec,
    /// Segmentation decoder, `n_classes` logits.
    Seg,
}

impl Head {
    pub fn prefix(&self) -> &'static str {
        match self {
            Head::Rec => "rec.",
            Head::Seg => "seg.",
        }
    }
}

/// Encoder outputs at strides 4, 8, 16, ...
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Fmap>,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, zero: bool) -> LinearP {
        let init = if zero { Init::Zeros } else { Init::FanIn(cin) };
        LinearP {
            w: self.add(format!("{name}.w"), vec![cout, cin], init),
            b: self.add(format!("{name}.b"), vec![cout], Init::Zeros),
            cout,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, g: ConvGeom) -> ConvP {
        ConvP {
            w: self.add(format!("{name}.w"), vec![cout, cin, g.k, g.k], Init::FanIn(cin * g.k * g.k)),
            b: self.add(format!("{name}.b"), vec![cout], Init::Zeros),
            cin,
            cout,
            g,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            g: self.add(format!("{name}.g"), vec![c], Init::Ones),
            b: self.add(format!("{name}.b"), vec![c], Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LinearP {
    w: usize,
    b: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
    g: ConvGeom,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    g: usize,
    b: usize,
}

/// Mutable views of two distinct gradient tensors.
fn pair(g: &mut ParamStore, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = g.tensors.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl LinearP {
    fn fwd(&self, ps: &ParamStore, x: &Fmap) -> Fmap {
        linear(x, ps.get(self.w), ps.get(self.b), self.cout)
    }

    fn bwd(&self, ps: &ParamStore, x: &Fmap, dy: &Fmap, g: &mut ParamStore) -> Fmap {
        let (dw, db) = pair(g, self.w, self.b);
        linear_backward(x, ps.get(self.w), dy, dw, db)
    }
}

impl ConvP {
    fn fwd(&self, ps: &ParamStore, x: &Fmap) -> Result<(Fmap, Im2Col)> {
        conv2d(x, ps.get(self.w), ps.get(self.b), self.cout, self.g)
    }

    fn bwd(&self, ps: &ParamStore, shape: (usize, usize, usize), col: &Im2Col, dy: &Fmap, g: &mut ParamStore) -> Fmap {
        debug_assert_eq!(shape.0, self.cin);
        let (dw, db) = pair(g, self.w, self.b);
        conv2d_backward(shape, col, ps.get(self.w), dy, self.g, dw, db)
    }
}

impl NormP {
    fn fwd(&self, ps: &ParamStore, x: &Fmap) -> (Fmap, LnCache) {
        layer_norm(x, ps.get(self.g), ps.get(self.b))
    }

    fn bwd(&self, ps: &ParamStore, c: &LnCache, dy: &Fmap, g: &mut ParamStore) -> Fmap {
        let (dg, db) = pair(g, self.g, self.b);
        layer_norm_backward(c, ps.get(self.g), dy, dg, db)
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    A { offset: LinearP, agg: usize, proj: LinearP },
    B { conv: ConvP },
}

#[derive(Debug, Clone)]
struct Block {
    ln1: NormP,
    mixer: Mixer,
    ln2: NormP,
    fc1: LinearP,
    fc2: LinearP,
}

enum MixerCache {
    A { off: Fmap, agg: Fmap },
    B { col: Im2Col },
}

struct BlockCache {
    ln1: LnCache,
    h1: Fmap,
    mixer: MixerCache,
    ln2: LnCache,
    h2: Fmap,
    f1: Fmap,
    a: Fmap,
}

impl Block {
    fn fwd(&self, ps: &ParamStore, x: &Fmap, k: usize) -> Result<(Fmap, BlockCache)> {
        let (h1, ln1) = self.ln1.fwd(ps, x);
        let (m, mixer) = match &self.mixer {
            Mixer::A { offset, agg, proj } => {
                let off = offset.fwd(ps, &h1);
                let a = offset_aggregate(&h1, &off, ps.get(*agg), k)?;
                (proj.fwd(ps, &a), MixerCache::A { off, agg: a })
            }
            Mixer::B { conv } => {
                let (m, col) = conv.fwd(ps, &h1)?;
                (m, MixerCache::B { col })
            }
        };
        let mut xm = x.clone();
        xm.add_assign(&m);
        let (h2, ln2) = self.ln2.fwd(ps, &xm);
        let f1 = self.fc1.fwd(ps, &h2);
        let a = gelu(&f1);
        let mut out = self.fc2.fwd(ps, &a);
        out.add_assign(&xm);
        Ok((out, BlockCache { ln1, h1, mixer, ln2, h2, f1, a }))
    }

    fn bwd(&self, ps: &ParamStore, c: &BlockCache, dout: &Fmap, k: usize, g: &mut ParamStore) -> Result<Fmap> {
        let da = self.fc2.bwd(ps, &c.a, dout, g);
        let df1 = gelu_backward(&c.f1, &da);
        let dh2 = self.fc1.bwd(ps, &c.h2, &df1, g);
        let mut dxm = self.ln2.bwd(ps, &c.ln2, &dh2, g);
        dxm.add_assign(dout);
        let dh1 = match (&self.mixer, &c.mixer) {
            (Mixer::A { offset, agg, proj }, MixerCache::A { off, agg: a }) => {
                let dagg = proj.bwd(ps, a, &dxm, g);
                let (mut dh1, doff) = offset_aggregate_backward(&c.h1, off, ps.get(*agg), k, &dagg, g.get_mut(*agg))?;
                dh1.add_assign(&offset.bwd(ps, &c.h1, &doff, g));
                dh1
            }
            (Mixer::B { conv }, MixerCache::B { col }) => conv.bwd(ps, (c.h1.c, c.h1.h, c.h1.w), col, &dxm, g),
            _ => unreachable!("cache does not match block"),
        };
        let mut dx = self.ln1.bwd(ps, &c.ln1, &dh1, g);
        dx.add_assign(&dxm);
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<(ConvP, NormP)>,
    blocks: Vec<Block>,
}

struct StageCache {
    down: Option<((usize, usize, usize), Im2Col, LnCache)>,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
struct Decoder {
    laterals: Vec<LinearP>,
    norm: NormP,
    fuse: LinearP,
    head: LinearP,
}

pub struct DecodeCache {
    ln: LnCache,
    n: Fmap,
    f: Fmap,
    gl: Fmap,
}

pub struct EncodeCache {
    tokens: Option<Vec<f64>>,
    grid: Fmap,
    stem_col: Im2Col,
    stem_ln: LnCache,
    stages: Vec<StageCache>,
}

/// Hierarchical encoder with reconstruction and segmentation decoders.
#[derive(Debug, Clone)]
pub struct TinyNet {
    pub arch: ArchConfig,
    specs: Vec<ParamSpec>,
    embed: Option<LinearP>,
    pe: usize,
    stem: ConvP,
    stem_norm: NormP,
    stages: Vec<Stage>,
    rec: Decoder,
    seg: Decoder,
    gather: Vec<usize>,
}

impl TinyNet {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let a = arch;
        let mut b = Builder { specs: Vec::new() };
        let d = a.patch.token_dim();
        let n_tok = a.patch.n_tokens(a.n_vars, a.height, a.width);
        let embed = (a.token_embed == TokenEmbed::Linear).then(|| b.linear("embed", d, d, false));
        let pe = b.add("pe".into(), vec![n_tok, d], Init::Uniform(0.02));
        let stem_geom = ConvGeom { k: STEM_STRIDE, stride: STEM_STRIDE, pad: 0 };
        let stem = b.conv("stem.conv", a.n_vars, a.widths[0], stem_geom);
        let stem_norm = b.norm("stem.norm", a.widths[0]);
        let kk = a.kernel * a.kernel;
        let mut stages = Vec::new();
        for (s, &c) in a.widths.iter().enumerate() {
            let down = (s > 0).then(|| {
                let g = ConvGeom { k: 2, stride: 2, pad: 0 };
                (b.conv(&format!("s{s}.down"), a.widths[s - 1], c, g), b.norm(&format!("s{s}.down_norm"), c))
            });
            let blocks = (0..a.depths[s])
                .map(|i| {
                    let p = format!("s{s}.b{i}");
                    let ln1 = b.norm(&format!("{p}.ln1"), c);
                    let mixer = if a.block_kind(s) == 'A' {
                        Mixer::A {
                            offset: b.linear(&format!("{p}.offset"), c, 2 * kk, true),
                            agg: b.add(format!("{p}.agg.w"), vec![c, kk], Init::FanIn(kk)),
                            proj: b.linear(&format!("{p}.proj"), c, c, false),
                        }
                    } else {
                        let g = ConvGeom { k: a.kernel, stride: 1, pad: a.kernel / 2 };
                        Mixer::B { conv: b.conv(&format!("{p}.conv"), c, c, g) }
                    };
                    let ln2 = b.norm(&format!("{p}.ln2"), c);
                    let fc1 = b.linear(&format!("{p}.fc1"), c, c * a.ffn_ratio, false);
                    let fc2 = b.linear(&format!("{p}.fc2"), c * a.ffn_ratio, c, false);
                    Block { ln1, mixer, ln2, fc1, fc2 }
                })
                .collect();
            stages.push(Stage { down, blocks });
        }
        let mut decoder = |name: &str, out: usize| {
            let dw = a.decoder_width;
            Decoder {
                laterals: a.widths.iter().enumerate().map(|(s, &c)| b.linear(&format!("{name}.lat{s}"), c, dw, false)).collect(),
                norm: b.norm(&format!("{name}.norm"), dw),
                fuse: b.linear(&format!("{name}.fuse"), dw, dw, false),
                head: b.linear(&format!("{name}.head"), dw, out * STEM_STRIDE * STEM_STRIDE, false),
            }
        };
        let rec = decoder("rec", a.n_vars);
        let seg = decoder("seg", a.n_classes);
        Ok(TinyNet {
            arch: arch.clone(),
            specs: b.specs,
            embed,
            pe,
            stem,
            stem_norm,
            stages,
            rec,
            seg,
            gather: a.patch.gather_index(a.n_vars, a.height, a.width)?,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        ParamStore::init(&self.specs, seed)
    }

    /// Confirms `ps` has this network's layout.
    pub fn check_params(&self, ps: &ParamStore) -> Result<()> {
        let same = ps.specs.len() == self.specs.len()
            && ps.specs.iter().zip(&self.specs).all(|(a, b)| a.name == b.name && a.shape == b.shape)
            && ps.tensors.iter().zip(&self.specs).all(|(t, s)| t.len() == s.numel());
        if same {
            Ok(())
        } else {
            Err(Error::Argument("parameter layout does not match architecture".into()))
        }
    }

    /// Flags parameters whose names satisfy `pred`.
    pub fn param_mask(&self, pred: impl Fn(&str) -> bool) -> Vec<bool> {
        self.specs.iter().map(|s| pred(&s.name)).collect()
    }

    pub fn is_offset_param(name: &str) -> bool {
        name.contains(".offset.")
    }

    pub fn is_encoder_param(name: &str) -> bool {
        !name.starts_with(Head::Rec.prefix()) && !name.starts_with(Head::Seg.prefix())
    }

    fn decoder(&self, head: Head) -> &Decoder {
        match head {
            Head::Rec => &self.rec,
            Head::Seg => &self.seg,
        }
    }

    fn check_input(&self, x: &Fmap) -> Result<()> {
        let a = &self.arch;
        if (x.c, x.h, x.w) != (a.n_vars, a.height, a.width) {
            return Err(Error::Argument(format!(
                "input {}x{}x{} does not match architecture {}x{}x{}",
                x.c, x.h, x.w, a.n_vars, a.height, a.width
            )));
        }
        Ok(())
    }

    pub fn encode(&self, ps: &ParamStore, x: &Fmap) -> Result<(FeaturePyramid, EncodeCache)> {
        self.check_input(x)?;
        let pe = ps.get(self.pe);
        let mut grid = Fmap::zeros(x.c, x.h, x.w);
        let tokens = match self.embed {
            None => {
                for (k, &i) in self.gather.iter().enumerate() {
                    grid.data[i] = x.data[i] + pe[k];
                }
                None
            }
            Some(e) => {
                let d = self.arch.patch.token_dim();
                let n = self.gather.len() / d;
                let t: Vec<f64> = self.gather.iter().map(|&i| x.data[i]).collect();
                let mut emb = pe.to_vec();
                let bias = ps.get(e.b);
                for row in emb.chunks_mut(d) {
                    row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
                }
                matmul_a_bt_acc(&t, ps.get(e.w), &mut emb, n, d, d);
                for (k, &i) in self.gather.iter().enumerate() {
                    grid.data[i] = emb[k];
                }
                Some(t)
            }
        };
        let (s0, stem_col) = self.stem.fwd(ps, &grid)?;
        let (mut h, stem_ln) = self.stem_norm.fwd(ps, &s0);
        let k = self.arch.kernel;
        let mut levels = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let down = match &st.down {
                Some((conv, norm)) => {
                    let shape = (h.c, h.h, h.w);
                    let (y, col) = conv.fwd(ps, &h)?;
                    let (y, ln) = norm.fwd(ps, &y);
                    h = y;
                    Some((shape, col, ln))
                }
                None => None,
            };
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let (y, c) = b.fwd(ps, &h, k)?;
                h = y;
                blocks.push(c);
            }
            levels.push(h.clone());
            caches.push(StageCache { down, blocks });
        }
        let pyramid = FeaturePyramid { levels };
        let cache = EncodeCache {
            tokens,
            grid,
            stem_col,
            stem_ln,
            stages: caches,
        };
        Ok((pyramid, cache))
    }

    /// Accumulates encoder gradients given gradients at each pyramid level.
    pub fn encode_backward(&self, ps: &ParamStore, cache: &EncodeCache, dz: &[Fmap], g: &mut ParamStore) -> Result<()> {
        let k = self.arch.kernel;
        let mut d: Option<Fmap> = None;
        for (s, st) in self.stages.iter().enumerate().rev() {
            let mut cur = dz[s].clone();
            if let Some(up) = d.take() {
                cur.add_assign(&up);
            }
            let sc = &cache.stages[s];
            for (b, bc) in st.blocks.iter().zip(&sc.blocks).rev() {
                cur = b.bwd(ps, bc, &cur, k, g)?;
            }
            if let (Some((conv, norm)), Some((shape, col, ln))) = (&st.down, &sc.down) {
                let dy = norm.bwd(ps, ln, &cur, g);
                cur = conv.bwd(ps, *shape, col, &dy, g);
            }
            d = Some(cur);
        }
        let d0 = d.expect("at least one stage");
        let ds0 = self.stem_norm.bwd(ps, &cache.stem_ln, &d0, g);
        let grid = &cache.grid;
        let dgrid = self.stem.bwd(ps, (grid.c, grid.h, grid.w), &cache.stem_col, &ds0, g);
        let demb: Vec<f64> = self.gather.iter().map(|&i| dgrid.data[i]).collect();
        for (p, v) in g.get_mut(self.pe).iter_mut().zip(&demb) {
            *p += v;
        }
        if let (Some(e), Some(t)) = (self.embed, &cache.tokens) {
            let d = self.arch.patch.token_dim();
            let n = demb.len() / d;
            let (dw, db) = pair(g, e.w, e.b);
            for row in demb.chunks(d) {
                db.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            matmul_at_b_acc(&demb, t, dw, n, d, d);
        }
        Ok(())
    }

    pub fn decode(&self, ps: &ParamStore, head: Head, z: &FeaturePyramid) -> Result<(Fmap, DecodeCache)> {
        let dec = self.decoder(head);
        if z.levels.len() != dec.laterals.len() {
            return Err(Error::Argument(format!("pyramid has {} levels, expected {}", z.levels.len(), dec.laterals.len())));
        }
        let mut f: Option<Fmap> = None;
        for (lat, zl) in dec.laterals.iter().zip(&z.levels).rev() {
            let mut l = lat.fwd(ps, zl);
            if let Some(prev) = f.take() {
                l.add_assign(&upsample_nearest(&prev, 2));
            }
            f = Some(l);
        }
        let f = f.expect("at least one level");
        let (n, ln) = dec.norm.fwd(ps, &f);
        let fused = dec.fuse.fwd(ps, &n);
        let gl = gelu(&fused);
        let y = pixel_shuffle(&dec.head.fwd(ps, &gl), STEM_STRIDE);
        Ok((y, DecodeCache { ln, n, f: fused, gl }))
    }

    /// Accumulates decoder gradients and returns gradients per pyramid level.
    pub fn decode_backward(
        &self,
        ps: &ParamStore,
        head: Head,
        z: &FeaturePyramid,
        cache: &DecodeCache,
        dy: &Fmap,
        g: &mut ParamStore,
    ) -> Vec<Fmap> {
        let dec = self.decoder(head);
        let dh = pixel_unshuffle(dy, STEM_STRIDE);
        let dgl = dec.head.bwd(ps, &cache.gl, &dh, g);
        let dfused = gelu_backward(&cache.f, &dgl);
        let dn = dec.fuse.bwd(ps, &cache.n, &dfused, g);
        let mut df = dec.norm.bwd(ps, &cache.ln, &dn, g);
        let mut dz = Vec::with_capacity(z.levels.len());
        for (s, (lat, zl)) in dec.laterals.iter().zip(&z.levels).enumerate() {
            dz.push(lat.bwd(ps, zl, &df, g));
            if s + 1 < z.levels.len() {
                df = upsample_nearest_backward(&df, 2);
            }
        }
        dz
    }

    /// Inference pass.
    pub fn forward(&self, ps: &ParamStore, x: &Fmap, head: Head) -> Result<Fmap> {
        let (z, _) = self.encode(ps, x)?;
        Ok(self.decode(ps, head, &z)?.0)
    }

    /// Loss and parameter gradients for one sample; `loss` maps the
    /// decoder output to `(value, d value / d output)`.
    pub fn loss_and_grad(
        &self,
        ps: &ParamStore,
        x: &Fmap,
        head: Head,
        loss: impl FnOnce(&Fmap) -> Result<(f64, Fmap)>,
    ) -> Result<(f64, ParamStore)> {
        let (z, ec) = self.encode(ps, x)?;
        let (y, dc) = self.decode(ps, head, &z)?;
        let (l, dy) = loss(&y)?;
        let mut g = ps.zeros_like();
        let dz = self.decode_backward(ps, head, &z, &dc, &dy, &mut g);
        self.encode_backward(ps, &ec, &dz, &mut g)?;
        Ok((l, g))
    }
}
