//! Tiny ViT classifier over variable-length token sequences.
//!
//! Videos with different numbers of retained tokens are concatenated into one
//! packed batch without padding; attention is confined to each video's own
//! segment by a block-diagonal mask, and each video is classified from the
//! mean of its own final token states.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{NnError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::tokenizer::{GridDims, TokenCoord, TokenSequence};

/// Positional tables start on the same scale as projected patches so that
/// token positions are visible from the first step.
const POS_STD: f64 = 1.0;
/// Classifier head init.
const HEAD_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token ({t}, {x}, {y}) outside grid {dims:?}")]
    TokenOutOfRange { t: usize, x: usize, y: usize, dims: GridDims },
    #[error("segment {index} has {len} tokens, fewer than the first-slice minimum {min}")]
    ShortSegment { index: usize, len: usize, min: usize },
    #[error("batch is empty or malformed: {0}")]
    Batch(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub patch: usize,
    pub tubelet: usize,
    pub channels: usize,
    pub grid: GridDims,
    pub dropout: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
            n_classes: 8,
            patch: 16,
            tubelet: 2,
            channels: 3,
            grid: GridDims::new(8, 4, 4),
            dropout: 0.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err("embed_dim must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 || self.n_classes == 0 {
            return err("n_layers, mlp_ratio and n_classes must be positive");
        }
        if self.patch == 0 || self.tubelet == 0 || self.channels == 0 || self.grid.is_empty() {
            return err("patch geometry must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.tubelet * self.channels * self.patch * self.patch
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// `key=value` lines for checkpoint metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("model.embed_dim", self.embed_dim.to_string()),
            ("model.n_layers", self.n_layers.to_string()),
            ("model.n_heads", self.n_heads.to_string()),
            ("model.mlp_ratio", self.mlp_ratio.to_string()),
            ("model.n_classes", self.n_classes.to_string()),
            ("model.patch", self.patch.to_string()),
            ("model.tubelet", self.tubelet.to_string()),
            ("model.channels", self.channels.to_string()),
            ("model.n_t", self.grid.n_t.to_string()),
            ("model.n_x", self.grid.n_x.to_string()),
            ("model.n_y", self.grid.n_y.to_string()),
            ("model.dropout", self.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self, ModelError> {
        let num = |k: &str| -> Result<usize, ModelError> {
            get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::Config(format!("missing or invalid `{k}`")))
        };
        let cfg = Self {
            embed_dim: num("model.embed_dim")?,
            n_layers: num("model.n_layers")?,
            n_heads: num("model.n_heads")?,
            mlp_ratio: num("model.mlp_ratio")?,
            n_classes: num("model.n_classes")?,
            patch: num("model.patch")?,
            tubelet: num("model.tubelet")?,
            channels: num("model.channels")?,
            grid: GridDims::new(num("model.n_t")?, num("model.n_x")?, num("model.n_y")?),
            dropout: get("model.dropout")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::Config("missing or invalid `model.dropout`".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Block-diagonal attention pattern over a packed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockDiagonalMask {
    segments: Vec<usize>,
    segment_of: Vec<usize>,
}

impl BlockDiagonalMask {
    pub fn new(lengths: &[usize]) -> Result<Self, ModelError> {
        if lengths.is_empty() {
            return Err(ModelError::Batch("no segments".into()));
        }
        if let Some(i) = lengths.iter().position(|&l| l == 0) {
            return Err(ModelError::Batch(format!("segment {i} is empty")));
        }
        let segment_of = lengths.iter().enumerate().flat_map(|(s, &l)| std::iter::repeat_n(s, l)).collect();
        Ok(Self {
            segments: lengths.to_vec(),
            segment_of,
        })
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segment_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segment_of.is_empty()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.segment_of[i] == self.segment_of[j]
    }

    pub fn allowed_pairs(&self) -> usize {
        self.segments.iter().map(|l| l * l).sum()
    }

    /// Dense additive bias: `0` inside a block, `−∞` elsewhere.
    pub fn additive_bias(&self) -> Vec<f64> {
        let n = self.len();
        (0..n * n)
            .map(|k| if self.allowed(k / n, k % n) { 0.0 } else { f64::NEG_INFINITY })
            .collect()
    }
}

/// Several videos' retained tokens concatenated row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedBatch<S> {
    pub block_len: usize,
    patches: Vec<S>,
    pub coords: Vec<TokenCoord>,
    pub mask: BlockDiagonalMask,
    pub labels: Option<Vec<usize>>,
}

impl<S: Scalar> PackedBatch<S> {
    pub fn pack(sequences: &[&TokenSequence<S>], labels: Option<Vec<usize>>) -> Result<Self, ModelError> {
        let first = sequences.first().ok_or_else(|| ModelError::Batch("no videos".into()))?;
        let block_len = first.block_len;
        if sequences.iter().any(|s| s.block_len != block_len) {
            return Err(ModelError::Batch("videos disagree on tubelet size".into()));
        }
        if let Some(l) = &labels {
            if l.len() != sequences.len() {
                return Err(ModelError::Batch(format!("{} labels for {} videos", l.len(), sequences.len())));
            }
        }
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        let mask = BlockDiagonalMask::new(&lengths)?;
        let total = mask.len();
        let mut patches = Vec::with_capacity(total * block_len);
        let mut coords = Vec::with_capacity(total);
        for s in sequences {
            patches.extend_from_slice(s.patches());
            coords.extend_from_slice(&s.coords);
        }
        Ok(Self {
            block_len,
            patches,
            coords,
            mask,
            labels,
        })
    }

    pub fn videos(&self) -> usize {
        self.mask.segments().len()
    }

    pub fn tokens(&self) -> usize {
        self.coords.len()
    }

    pub fn patches(&self) -> &[S] {
        &self.patches
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct VitIds {
    patch_w: ParamId,
    pos_t: ParamId,
    pos_x: ParamId,
    pos_y: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl VitIds {
    fn lookup<S: Scalar>(store: &ParamStore<S>, n_layers: usize) -> Result<Self, ModelError> {
        let f = |n: String| store.find(&n).ok_or(ModelError::MissingParam(n));
        let layers = (0..n_layers)
            .map(|l| {
                let p = |s: &str| f(format!("block{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: p("ln1.gamma")?,
                    ln1_b: p("ln1.beta")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.gamma")?,
                    ln2_b: p("ln2.beta")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            patch_w: f("embed.patch".into())?,
            pos_t: f("embed.pos_t".into())?,
            pos_x: f("embed.pos_x".into())?,
            pos_y: f("embed.pos_y".into())?,
            layers,
            lnf_g: f("final_ln.gamma".into())?,
            lnf_b: f("final_ln.beta".into())?,
            head_w: f("head.w".into())?,
            head_b: f("head.b".into())?,
        })
    }
}

/// Model parameters plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit<S> {
    pub config: ViTConfig,
    pub params: ParamStore<S>,
    ids: VitIds,
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<S: Scalar> Vit<S> {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hd = config.hidden_dim();
        let mut store = ParamStore::new();
        let mut randn = |store: &mut ParamStore<S>, name: &str, shape: &[usize], std: f64| {
            store.add(name, Tensor::randn(shape, std, &mut rng));
        };
        randn(&mut store, "embed.patch", &[config.block_len(), d], (1.0 / config.block_len() as f64).sqrt());
        randn(&mut store, "embed.pos_t", &[config.grid.n_t, d], POS_STD);
        randn(&mut store, "embed.pos_x", &[config.grid.n_x, d], POS_STD);
        randn(&mut store, "embed.pos_y", &[config.grid.n_y, d], POS_STD);
        for l in 0..config.n_layers {
            let n = |s: &str| format!("block{l}.{s}");
            store.add(n("ln1.gamma"), Tensor::full(&[d], S::one()));
            store.add(n("ln1.beta"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                randn(&mut store, &n(&format!("attn.w{w}")), &[d, d], (1.0 / d as f64).sqrt());
                store.add(n(&format!("attn.b{w}")), Tensor::zeros(&[d]));
            }
            store.add(n("ln2.gamma"), Tensor::full(&[d], S::one()));
            store.add(n("ln2.beta"), Tensor::zeros(&[d]));
            randn(&mut store, &n("mlp.w1"), &[d, hd], (1.0 / d as f64).sqrt());
            store.add(n("mlp.b1"), Tensor::zeros(&[hd]));
            randn(&mut store, &n("mlp.w2"), &[hd, d], (1.0 / hd as f64).sqrt());
            store.add(n("mlp.b2"), Tensor::zeros(&[d]));
        }
        store.add("final_ln.gamma", Tensor::full(&[d], S::one()));
        store.add("final_ln.beta", Tensor::zeros(&[d]));
        randn(&mut store, "head.w", &[d, config.n_classes], HEAD_STD);
        store.add("head.b", Tensor::zeros(&[config.n_classes]));
        Self::from_params(config, store)
    }

    /// Rebinds a parameter store (e.g. from a checkpoint), validating shapes.
    pub fn from_params(config: ViTConfig, params: ParamStore<S>) -> Result<Self, ModelError> {
        config.validate()?;
        let ids = VitIds::lookup(&params, config.n_layers)?;
        let d = config.embed_dim;
        let expect = |id: ParamId, shape: &[usize]| -> Result<(), ModelError> {
            if params.get(id).shape() != shape {
                return Err(ModelError::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    params.name(id),
                    params.get(id).shape(),
                    shape
                )));
            }
            Ok(())
        };
        expect(ids.patch_w, &[config.block_len(), d])?;
        expect(ids.pos_t, &[config.grid.n_t, d])?;
        expect(ids.pos_x, &[config.grid.n_x, d])?;
        expect(ids.pos_y, &[config.grid.n_y, d])?;
        expect(ids.head_w, &[d, config.n_classes])?;
        for l in &ids.layers {
            expect(l.wq, &[d, d])?;
            expect(l.w1, &[d, config.hidden_dim()])?;
            expect(l.w2, &[config.hidden_dim(), d])?;
        }
        Ok(Self { config, params, ids })
    }

    pub fn cast<T: Scalar>(&self) -> Vit<T> {
        Vit {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn p(&self, tape: &mut Tape<S>, id: ParamId, mode: Mode) -> Var {
        match mode {
            Mode::Train => tape.param(&self.params, id),
            Mode::Eval => tape.frozen_param(&self.params, id),
        }
    }

    fn check_batch(&self, batch: &PackedBatch<S>) -> Result<(), ModelError> {
        if batch.block_len != self.config.block_len() {
            return Err(ModelError::Batch(format!(
                "token blocks have {} values, model expects {}",
                batch.block_len,
                self.config.block_len()
            )));
        }
        let g = self.config.grid;
        if let Some(c) = batch.coords.iter().find(|c| c.t >= g.n_t || c.x >= g.n_x || c.y >= g.n_y) {
            return Err(ModelError::TokenOutOfRange {
                t: c.t,
                x: c.x,
                y: c.y,
                dims: g,
            });
        }
        let min = g.slice_len();
        if let Some((index, &len)) = batch.mask.segments().iter().enumerate().find(|(_, &l)| l < min) {
            return Err(ModelError::ShortSegment { index, len, min });
        }
        Ok(())
    }

    /// Patch projection plus factorised positional embedding looked up by
    /// each token's original grid coordinate. Returns `[tokens × embed_dim]`.
    pub fn embed_tokens(&self, tape: &mut Tape<S>, batch: &PackedBatch<S>, mode: Mode) -> Result<Var, ModelError> {
        self.check_batch(batch)?;
        let x = tape.input(Tensor::new(vec![batch.tokens(), batch.block_len], batch.patches().to_vec())?);
        let w = self.p(tape, self.ids.patch_w, mode);
        let e = tape.matmul(x, w)?;
        let (pt, px, py) = (self.p(tape, self.ids.pos_t, mode), self.p(tape, self.ids.pos_x, mode), self.p(tape, self.ids.pos_y, mode));
        let ti: Vec<usize> = batch.coords.iter().map(|c| c.t).collect();
        let xi: Vec<usize> = batch.coords.iter().map(|c| c.x).collect();
        let yi: Vec<usize> = batch.coords.iter().map(|c| c.y).collect();
        let gt = tape.gather_rows(pt, &ti)?;
        let gx = tape.gather_rows(px, &xi)?;
        let gy = tape.gather_rows(py, &yi)?;
        let pos = tape.add(gt, gx)?;
        let pos = tape.add(pos, gy)?;
        Ok(tape.add(e, pos)?)
    }

    fn dropout<R: Rng + ?Sized>(&self, tape: &mut Tape<S>, x: Var, rng: Option<&mut R>) -> Result<Var, ModelError> {
        let rate = self.config.dropout;
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = S::lit(1.0 / (1.0 - rate));
        let shape = tape.value(x).shape().to_vec();
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < rate { S::zero() } else { keep });
        let m = tape.input(mask);
        Ok(tape.mul(x, m)?)
    }

    /// Per-video logits `[videos × n_classes]`. Dropout is applied only when
    /// an RNG is supplied.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<S>, batch: &PackedBatch<S>, mode: Mode, mut rng: Option<&mut R>) -> Result<Var, ModelError> {
        let segments = batch.mask.segments().to_vec();
        let heads = self.config.n_heads;
        let mut h = self.embed_tokens(tape, batch, mode)?;
        for l in &self.ids.layers {
            let mut p = |id| self.p(tape, id, mode);
            let (g1, b1) = (p(l.ln1_g), p(l.ln1_b));
            let (wq, bq, wk, bk, wv, bv, wo, bo) = (p(l.wq), p(l.bq), p(l.wk), p(l.bk), p(l.wv), p(l.bv), p(l.wo), p(l.bo));
            let (g2, b2) = (p(l.ln2_g), p(l.ln2_b));
            let (w1, mb1, w2, mb2) = (p(l.w1), p(l.b1), p(l.w2), p(l.b2));

            let a = tape.layernorm(h, g1, b1)?;
            let q = tape.linear(a, wq, Some(bq))?;
            let k = tape.linear(a, wk, Some(bk))?;
            let v = tape.linear(a, wv, Some(bv))?;
            let att = tape.segment_attention(q, k, v, &segments, heads)?;
            let o = tape.linear(att, wo, Some(bo))?;
            let o = self.dropout(tape, o, rng.as_deref_mut())?;
            h = tape.add(h, o)?;

            let m = tape.layernorm(h, g2, b2)?;
            let m = tape.linear(m, w1, Some(mb1))?;
            let m = tape.gelu(m)?;
            let m = tape.linear(m, w2, Some(mb2))?;
            let m = self.dropout(tape, m, rng.as_deref_mut())?;
            h = tape.add(h, m)?;
        }
        let (gf, bf) = (self.p(tape, self.ids.lnf_g, mode), self.p(tape, self.ids.lnf_b, mode));
        let h = tape.layernorm(h, gf, bf)?;
        let pooled = tape.segment_mean(h, &segments)?;
        let (hw, hb) = (self.p(tape, self.ids.head_w, mode), self.p(tape, self.ids.head_b, mode));
        Ok(tape.linear(pooled, hw, Some(hb))?)
    }

    /// Inference-only logits.
    pub fn forward_classify(&self, batch: &PackedBatch<S>) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let logits = self.forward::<ChaCha8Rng>(&mut tape, batch, Mode::Eval, None)?;
        Ok(tape.value(logits).clone())
    }
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{gather_tokens, partition_video, SelectionMask, VideoTensor};

    fn tiny_config() -> ViTConfig {
        ViTConfig {
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            n_classes: 3,
            patch: 2,
            tubelet: 1,
            channels: 1,
            grid: GridDims::new(3, 2, 2),
            dropout: 0.0,
        }
    }

    fn sequence(seed: u64, keep: &[bool]) -> TokenSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = VideoTensor::new(3, 1, 4, 4, (0..48).map(|_| rng.random::<f64>()).collect()).unwrap();
        let g = partition_video(&v, 2, 1).unwrap();
        let m = SelectionMask::from_bits(g.dims, keep.to_vec()).unwrap();
        gather_tokens(&g, &m, "v").unwrap()
    }

    #[test]
    fn mask_counts() {
        let one = BlockDiagonalMask::new(&[4]).unwrap();
        assert_eq!(one.allowed_pairs(), 16);
        let two = BlockDiagonalMask::new(&[2, 3]).unwrap();
        assert_eq!(two.allowed_pairs(), 13);
        assert!(two.allowed(0, 1) && !two.allowed(1, 2) && two.allowed(4, 2));
        let bias = two.additive_bias();
        assert_eq!(bias.iter().filter(|v| **v == 0.0).count(), 13);
        let diag = BlockDiagonalMask::new(&[1, 1, 1]).unwrap();
        assert_eq!(diag.allowed_pairs(), 3);
        assert!(BlockDiagonalMask::new(&[2, 0]).is_err());
        assert!(BlockDiagonalMask::new(&[]).is_err());
    }

    #[test]
    fn zero_patch_zero_positions_embed_to_zero() {
        let mut vit = Vit::<f64>::new(tiny_config(), 1).unwrap();
        for name in ["embed.pos_t", "embed.pos_x", "embed.pos_y"] {
            let id = vit.params.find(name).unwrap();
            let shape = vit.params.get(id).shape().to_vec();
            vit.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let seq = sequence(1, &[true; 12]);
        let zeros = vec![0.0; seq.patches().len()];
        let batch = PackedBatch {
            block_len: seq.block_len,
            patches: zeros,
            coords: seq.coords.clone(),
            mask: BlockDiagonalMask::new(&[seq.len()]).unwrap(),
            labels: None,
        };
        let mut tape = Tape::new();
        let e = vit.embed_tokens(&mut tape, &batch, Mode::Eval).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positions_distinguish_identical_patches_and_survive_pruning() {
        let vit = Vit::<f64>::new(tiny_config(), 2).unwrap();
        let full = sequence(3, &[true; 12]);
        let mut keep = [true; 12];
        keep[5] = false;
        keep[9] = false;
        let pruned = sequence(3, &keep);
        let embed = |s: &TokenSequence<f64>| {
            let b = PackedBatch::pack(&[s], None).unwrap();
            let mut tape = Tape::new();
            let e = vit.embed_tokens(&mut tape, &b, Mode::Eval).unwrap();
            tape.value(e).clone()
        };
        let (ef, ep) = (embed(&full), embed(&pruned));
        for (i, c) in pruned.coords.iter().enumerate() {
            let j = full.coords.iter().position(|f| f == c).unwrap();
            assert_eq!(ef.row(j), ep.row(i));
        }
        // same content at two positions
        let mut same = full.clone();
        let blk = same.block(0).to_vec();
        let n = same.block_len;
        same.patches[n..2 * n].copy_from_slice(&blk);
        let es = embed(&same);
        assert_ne!(es.row(0), es.row(1));
    }

    #[test]
    fn short_segment_and_out_of_range_rejected() {
        let vit = Vit::<f64>::new(tiny_config(), 2).unwrap();
        let mut keep = [false; 12];
        keep[0] = true;
        keep[1] = true;
        keep[2] = true;
        let short = sequence(4, &keep);
        let b = PackedBatch::pack(&[&short], None).unwrap();
        assert!(matches!(vit.forward_classify(&b), Err(ModelError::ShortSegment { len: 3, min: 4, .. })));
        let mut bad = sequence(4, &[true; 12]);
        bad.coords[0].t = 7;
        let b = PackedBatch::pack(&[&bad], None).unwrap();
        assert!(matches!(vit.forward_classify(&b), Err(ModelError::TokenOutOfRange { .. })));
    }

    #[test]
    fn config_round_trip() {
        let c = ViTConfig::default();
        let pairs = c.to_pairs();
        let back = ViTConfig::from_pairs(|k| pairs.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone())).unwrap();
        assert_eq!(back, c);
        assert!(ViTConfig { n_heads: 3, ..c }.validate().is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let t = Tensor::new(vec![2, 3], vec![1.0f64, 3.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
