//! Plain ViT encoder: patch embedding, learned positional table, pre-norm
//! transformer layers, and the stage partition used for token pruning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{HeadKind, HeadWeights};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    #[serde(default)]
    pub stage_boundaries: Vec<usize>,
}

fn default_channels() -> usize {
    3
}

fn default_ffn_ratio() -> usize {
    4
}

impl BackboneConfig {
    /// 32×32 images, 4-pixel patches, 6 layers split at {3, 4}.
    pub fn desk() -> Self {
        BackboneConfig {
            image_h: 32,
            image_w: 32,
            patch: 4,
            channels: 3,
            dim: 64,
            layers: 6,
            heads: 4,
            ffn_ratio: 4,
            stage_boundaries: vec![3, 4],
        }
    }

    /// ViT-Base at 512×512 with boundaries {6, 8}. Only used for cost accounting.
    pub fn full_size() -> Self {
        BackboneConfig {
            image_h: 512,
            image_w: 512,
            patch: 16,
            channels: 3,
            dim: 768,
            layers: 12,
            heads: 12,
            ffn_ratio: 4,
            stage_boundaries: vec![6, 8],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return bad(format!(
                "image {}x{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.layers == 0 || self.ffn_ratio == 0 {
            return bad("layers and ffn_ratio must be positive".into());
        }
        let mut prev = 0;
        for &b in &self.stage_boundaries {
            if b <= prev || b >= self.layers {
                return bad(format!(
                    "stage boundaries {:?} must be strictly increasing within [1, {}]",
                    self.stage_boundaries,
                    self.layers - 1
                ));
            }
            prev = b;
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    /// Token count `HW/P²`.
    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn stages(&self) -> usize {
        self.stage_boundaries.len() + 1
    }

    /// Half-open layer range `[start, end)` (0-based) executed by stage `m` (1-based).
    pub fn stage_layers(&self, m: usize) -> Result<std::ops::Range<usize>> {
        if m == 0 || m > self.stages() {
            return Err(Error::Config(format!(
                "stage {m} outside [1, {}]",
                self.stages()
            )));
        }
        let start = if m == 1 { 0 } else { self.stage_boundaries[m - 2] };
        let end = if m == self.stages() {
            self.layers
        } else {
            self.stage_boundaries[m - 1]
        };
        Ok(start..end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    #[serde(default)]
    pub aux_head: HeadKind,
    #[serde(default)]
    pub decode_head: HeadKind,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            classes: 4,
            aux_head: HeadKind::Atm,
            decode_head: HeadKind::Atm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        Ok(())
    }

    /// Head kind used at stage `m` (1-based). The last stage uses the decode head.
    pub fn head_kind(&self, m: usize) -> HeadKind {
        if m == self.backbone.stages() {
            self.decode_head
        } else {
            self.aux_head
        }
    }
}

// ---- parameters --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter storage. Names are dotted paths such as
/// `backbone.layers.0.attn.q.weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormWeights,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct BackboneWeights {
    pub patch: Linear,
    pub pos: ParamId,
    pub layers: Vec<LayerWeights>,
}

/// Deterministic parameter initializer.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("consistent shape")
    }

    /// Xavier-uniform `[fan_in × fan_out]` matrix.
    pub(crate) fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a);
        let data = (0..fan_in * fan_out)
            .map(|_| T::c(dist.sample(&mut self.rng)))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
    }
}

pub(crate) fn add_linear<T: Real>(
    params: &mut ParamSet<T>,
    init: &mut Init,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Linear {
    Linear {
        weight: params.add(format!("{prefix}.weight"), init.xavier(fan_in, fan_out)),
        bias: params.add(format!("{prefix}.bias"), Tensor::zeros(&[fan_out])),
    }
}

fn add_ln<T: Real>(params: &mut ParamSet<T>, prefix: &str, d: usize) -> LayerNormWeights {
    LayerNormWeights {
        gamma: params.add(format!("{prefix}.gamma"), Tensor::filled(&[d], T::one())),
        beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[d])),
    }
}

impl BackboneWeights {
    pub(crate) fn build<T: Real>(
        cfg: &BackboneConfig,
        params: &mut ParamSet<T>,
        init: &mut Init,
    ) -> Self {
        let c = cfg.dim;
        let patch = add_linear(params, init, "backbone.patch", cfg.patch_dim(), c);
        let pos = params.add("backbone.pos", init.normal(&[cfg.tokens(), c], 0.02));
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("backbone.layers.{l}");
                LayerWeights {
                    ln1: add_ln(params, &format!("{p}.ln1"), c),
                    q: add_linear(params, init, &format!("{p}.attn.q"), c, c),
                    k: add_linear(params, init, &format!("{p}.attn.k"), c, c),
                    v: add_linear(params, init, &format!("{p}.attn.v"), c, c),
                    o: add_linear(params, init, &format!("{p}.attn.o"), c, c),
                    ln2: add_ln(params, &format!("{p}.ln2"), c),
                    fc1: add_linear(params, init, &format!("{p}.ffn.fc1"), c, c * cfg.ffn_ratio),
                    fc2: add_linear(params, init, &format!("{p}.ffn.fc2"), c * cfg.ffn_ratio, c),
                }
            })
            .collect();
        BackboneWeights { patch, pos, layers }
    }
}

/// Backbone plus one head per stage (`heads[m - 1]` serves stage `m`).
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    pub backbone: BackboneWeights,
    pub heads: Vec<HeadWeights>,
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init::new(seed);
        let backbone = BackboneWeights::build(&config.backbone, &mut params, &mut init);
        let heads = (1..=config.backbone.stages())
            .map(|m| {
                HeadWeights::build(
                    config.head_kind(m),
                    &format!("heads.{m}"),
                    config.backbone.dim,
                    config.classes,
                    &mut params,
                    &mut init,
                )
            })
            .collect();
        Ok(Model {
            config,
            params,
            backbone,
            heads,
        })
    }

    pub fn is_backbone_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("backbone.")
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamSet::default();
        for (name, value) in self.params.iter() {
            params.add(name, value.cast());
        }
        Model {
            config: self.config.clone(),
            params,
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
        }
    }
}

// ---- forward session ---------------------------------------------------

/// One tape bound to a model. Parameters are copied onto the tape lazily,
/// as leaves that require grad only when marked trainable.
pub struct Session<'m, T: Real> {
    pub tape: Tape<T>,
    model: &'m Model<T>,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn inference(model: &'m Model<T>) -> Self {
        Self::with_trainable(model, vec![false; model.params.len()])
    }

    pub fn with_trainable(model: &'m Model<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), model.params.len());
        Session {
            tape: Tape::new(),
            model,
            bound: vec![None; model.params.len()],
            trainable,
        }
    }

    pub fn model(&self) -> &'m Model<T> {
        self.model
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.model.params.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter, indexed by [`ParamId`].
    pub fn take_param_grads(&mut self) -> Vec<Option<Tensor<T>>> {
        let bound = self.bound.clone();
        bound
            .into_iter()
            .map(|b| b.and_then(|v| self.tape.take_grad(v)))
            .collect()
    }

    pub fn linear(&mut self, x: Var, w: Linear) -> Result<Var> {
        let wv = self.param(w.weight);
        let bv = self.param(w.bias);
        let y = self.tape.matmul(x, wv)?;
        self.tape.add_row_bias(y, bv)
    }

    pub fn layer_norm(&mut self, x: Var, w: LayerNormWeights) -> Result<Var> {
        let g = self.param(w.gamma);
        let b = self.param(w.beta);
        self.tape.layer_norm(x, g, b, LN_EPS)
    }
}

// ---- tokens ------------------------------------------------------------

/// Active token sequence of one image.
///
/// Rows `0..origin.len()` are real tokens, row `i` sitting at grid
/// position `origin[i]`. Any further rows are synthetic context tokens
/// (see the `average` pruning method); they have no grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenState {
    pub features: Var,
    pub origin: Vec<usize>,
    pub synthetic: usize,
    pub grid: usize,
}

impl TokenState {
    pub fn real(&self) -> usize {
        self.origin.len()
    }

    pub fn rows(&self) -> usize {
        self.origin.len() + self.synthetic
    }
}

/// Flattens an image `[channels×H×W]` into `[N × channels·P²]` patch rows,
/// grid positions in row-major order, each row ordered (channel, y, x).
pub fn extract_patches<T: Real>(image: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let expected = [cfg.channels, cfg.image_h, cfg.image_w];
    if image.shape() != expected {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config {:?}",
            image.shape(),
            expected
        )));
    }
    let p = cfg.patch;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let src = image.data();
    let mut data = Vec::with_capacity(cfg.tokens() * cfg.patch_dim());
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..cfg.channels {
                for py in 0..p {
                    let row = (ch * cfg.image_h + gy * p + py) * cfg.image_w + gx * p;
                    data.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(vec![cfg.tokens(), cfg.patch_dim()], data)
}

/// Linear projection of every patch. The returned state covers all `N`
/// grid positions with identity origin.
pub fn patch_embed<T: Real>(s: &mut Session<T>, image: &Tensor<T>) -> Result<TokenState> {
    let cfg = &s.model().config.backbone;
    let patches = extract_patches(image, cfg)?;
    let n = cfg.tokens();
    let x = s.tape.constant(patches);
    let features = s.linear(x, s.model().backbone.patch)?;
    Ok(TokenState {
        features,
        origin: (0..n).collect(),
        synthetic: 0,
        grid: n,
    })
}

/// Adds `pos_table[origin[i]]` to real row `i`. Synthetic rows get zero.
pub fn add_positional<T: Real>(
    tape: &mut Tape<T>,
    tokens: TokenState,
    pos_table: Var,
) -> Result<TokenState> {
    let mut pos = tape.gather_rows(pos_table, &tokens.origin)?;
    if tokens.synthetic > 0 {
        let c = tape.shape(pos_table)[1];
        let zeros = tape.constant(Tensor::zeros(&[tokens.synthetic, c]));
        pos = tape.concat_rows(&[pos, zeros])?;
    }
    let features = tape.add(tokens.features, pos)?;
    Ok(TokenState { features, ..tokens })
}

/// Patch embedding plus positional encoding, i.e. `Z_0`.
pub fn embed<T: Real>(s: &mut Session<T>, image: &Tensor<T>) -> Result<TokenState> {
    let tokens = patch_embed(s, image)?;
    let pos = s.param(s.model().backbone.pos);
    add_positional(&mut s.tape, tokens, pos)
}

/// Multi-head scaled dot-product self-attention over exactly the rows of `x`.
pub fn self_attention<T: Real>(s: &mut Session<T>, x: Var, w: &LayerWeights) -> Result<Var> {
    let cfg = &s.model().config.backbone;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let q = s.linear(x, w.q)?;
    let k = s.linear(x, w.k)?;
    let v = s.linear(x, w.v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.tape.slice_cols(q, h * dh, dh)?;
        let qh = s.tape.scale(qh, scale)?;
        let kh = s.tape.slice_cols(k, h * dh, dh)?;
        let kt = s.tape.transpose(kh)?;
        let vh = s.tape.slice_cols(v, h * dh, dh)?;
        let scores = s.tape.matmul(qh, kt)?;
        let attn = s.tape.softmax_rows(scores)?;
        outs.push(s.tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        s.tape.concat_cols(&outs)?
    };
    s.linear(cat, w.o)
}

/// `Z' = MHSA(LN(Z)) + Z`, then `FFN(LN(Z')) + Z'`.
pub fn layer_forward<T: Real>(
    s: &mut Session<T>,
    tokens: TokenState,
    w: &LayerWeights,
) -> Result<TokenState> {
    let x = tokens.features;
    let h = s.layer_norm(x, w.ln1)?;
    let attn = self_attention(s, h, w)?;
    let z_mid = s.tape.add(attn, x)?;
    let h2 = s.layer_norm(z_mid, w.ln2)?;
    let f1 = s.linear(h2, w.fc1)?;
    let act = s.tape.gelu(f1)?;
    let f2 = s.linear(act, w.fc2)?;
    let features = s.tape.add(f2, z_mid)?;
    Ok(TokenState { features, ..tokens })
}

/// Runs the layers of stage `m` (1-based). An empty token state passes
/// through untouched, since no layer executes on zero tokens.
pub fn run_stage<T: Real>(s: &mut Session<T>, tokens: TokenState, m: usize) -> Result<TokenState> {
    let model = s.model();
    let range = model.config.backbone.stage_layers(m)?;
    if tokens.rows() == 0 {
        return Ok(tokens);
    }
    let mut tokens = tokens;
    for l in range {
        tokens = layer_forward(s, tokens, &model.backbone.layers[l])?;
    }
    Ok(tokens)
}

/// All `L` layers in sequence, without stage structure.
pub fn run_all_layers<T: Real>(s: &mut Session<T>, tokens: TokenState) -> Result<TokenState> {
    let model = s.model();
    let mut tokens = tokens;
    for layer in &model.backbone.layers {
        tokens = layer_forward(s, tokens, layer)?;
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_counts() {
        assert_eq!(BackboneConfig::full_size().tokens(), 1024);
        assert_eq!(BackboneConfig::desk().tokens(), 64);
    }

    #[test]
    fn stage_ranges_follow_boundaries() {
        let mut cfg = BackboneConfig::full_size();
        let ranges: Vec<_> = (1..=3).map(|m| cfg.stage_layers(m).unwrap()).collect();
        assert_eq!(ranges, vec![0..6, 6..8, 8..12]);
        assert!(cfg.stage_layers(0).is_err());
        assert!(cfg.stage_layers(4).is_err());
        cfg.stage_boundaries.clear();
        assert_eq!(cfg.stage_layers(1).unwrap(), 0..12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::desk();
        cfg.validate().unwrap();
        cfg.patch = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk();
        cfg.stage_boundaries = vec![4, 3];
        assert!(cfg.validate().is_err());
        cfg.stage_boundaries = vec![6];
        assert!(cfg.validate().is_err());
        cfg.stage_boundaries = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn patch_extraction_order() {
        let cfg = BackboneConfig {
            image_h: 4,
            image_w: 4,
            patch: 2,
            channels: 1,
            dim: 2,
            layers: 1,
            heads: 1,
            ffn_ratio: 1,
            stage_boundaries: vec![],
        };
        let img = Tensor::<f64>::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let mut cfg = ModelConfig::desk();
        cfg.backbone.image_h = 32;
        let model = Model::<f64>::init(cfg.clone(), 3).unwrap();
        let mut s = Session::inference(&model);
        let img = Tensor::zeros(&[3, 32, 32]);
        let t = patch_embed(&mut s, &img).unwrap();
        assert_eq!(t.real(), 64);
        assert!(s.tape.value(t.features).data().iter().all(|&v| v == 0.0));
        let wrong = Tensor::zeros(&[3, 16, 32]);
        assert!(matches!(patch_embed(&mut s, &wrong), Err(Error::Config(_))));
    }
}
