//! Per-modality encoders and the attention-based fusion module.
//!
//! Fusion computes a joint representation from the concatenated embeddings,
//! predicts one excitation vector `E` from it, and gates both embeddings by
//! `gate(E)`:
//!
//! ```text
//! Z = [v, a] · W_sᵀ + b_s        (c_u = (dim v + dim a) / 2)
//! E = Z · W_eᵀ + b_e
//! f_v = gate(E) ⊙ v,  f_a = gate(E) ⊙ a
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateFn {
    Relu,
    Sigmoid,
}

/// How a mel spectrogram becomes the audio encoder's input vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioInput {
    /// Time-averaged magnitude per mel band (`n_bands` inputs).
    BandMeans,
    /// The whole matrix, row-major (`n_bands × frames` inputs).
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Embedding size `c`, shared by both modalities.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub gate_fn: GateFn,
    pub audio_input: AudioInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            embed_dim: 64,
            encoder_layers: 3,
            gate_fn: GateFn::Sigmoid,
            audio_input: AudioInput::BandMeans,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.embed_dim == 0 || self.encoder_layers == 0 {
            return Err(Error::Config(
                "model.hidden_dim, model.embed_dim and model.encoder_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Dense layer `y = x · Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights and bias drawn from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let weight = Tensor::new(&[fan_out, fan_in], draw(fan_out * fan_in)).expect("shape");
        let bias = Tensor::new(&[fan_out], draw(fan_out)).expect("shape");
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub layers: Vec<Linear>,
}

impl Encoder {
    pub fn init(in_dim: usize, hidden: usize, embed: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden, n_layers - 1));
        dims.push(embed);
        let layers = dims.windows(2).map(|d| Linear::init(d[0], d[1], rng)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Contract("encoder needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [l.out_dim()] {
                return Err(Error::dim("encoder bias", l.weight.shape(), l.bias.shape()));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(Error::dim("encoder chain", l.weight.shape(), next.weight.shape()));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = bind_encoder(&tape, self, false);
        let out = encode(tape.constant(x.clone()), &bound)?;
        Ok((*out.value()).clone())
    }
}

/// Fusion parameters: `W_s[c_u × 2c]`, `b_s[c_u]`, `W_e[c × c_u]`, `b_e[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmfmParams {
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub w_e: Tensor,
    pub b_e: Tensor,
}

impl AmfmParams {
    /// Uniform fan-in initialization, except `b_e = 1` so every gate starts open.
    pub fn init(embed: usize, rng: &mut impl Rng) -> Self {
        let joint = Linear::init(2 * embed, embed, rng);
        let excite = Linear::init(embed, embed, rng);
        Self {
            w_s: joint.weight,
            b_s: joint.bias,
            w_e: excite.weight,
            b_e: Tensor::ones(&[embed]),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w_e.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim();
        let cu = self.w_s.rows();
        let ok = self.w_s.shape() == [cu, 2 * c]
            && cu == c
            && self.b_s.shape() == [cu]
            && self.w_e.shape() == [c, cu]
            && self.b_e.shape() == [c];
        if ok {
            Ok(())
        } else {
            Err(Error::dim("amfm params", self.w_s.shape(), self.w_e.shape()))
        }
    }
}

/// Both encoders plus fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct AvclModel {
    pub visual: Encoder,
    pub audio: Encoder,
    pub amfm: AmfmParams,
    pub gate_fn: GateFn,
    pub fusion_enabled: bool,
}

impl AvclModel {
    /// Seeded initialization. Each parameter group draws from its own ChaCha
    /// stream so changing one group's shape leaves the others untouched.
    pub fn init(cfg: &ModelConfig, visual_in: usize, audio_in: usize, fusion: bool, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if visual_in == 0 || audio_in == 0 {
            return Err(Error::Config("encoder input dimensions must be positive".into()));
        }
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        let (h, c, n) = (cfg.hidden_dim, cfg.embed_dim, cfg.encoder_layers);
        Ok(Self {
            visual: Encoder::init(visual_in, h, c, n, &mut stream(1)),
            audio: Encoder::init(audio_in, h, c, n, &mut stream(2)),
            amfm: AmfmParams::init(c, &mut stream(3)),
            gate_fn: cfg.gate_fn,
            fusion_enabled: fusion,
        })
    }

    /// Parameters in canonical order: visual layers, audio layers, fusion.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, enc) in [("visual", &self.visual), ("audio", &self.audio)] {
            for (i, l) in enc.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
        }
        out.push(("amfm.w_s".into(), &self.amfm.w_s));
        out.push(("amfm.b_s".into(), &self.amfm.b_s));
        out.push(("amfm.w_e".into(), &self.amfm.w_e));
        out.push(("amfm.b_e".into(), &self.amfm.b_e));
        out
    }

    /// Same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in [&mut self.visual, &mut self.audio] {
            for l in enc.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.amfm.w_s);
        out.push(&mut self.amfm.b_s);
        out.push(&mut self.amfm.w_e);
        out.push(&mut self.amfm.b_e);
        out
    }

    /// How many leading entries of [`Self::named_params`] the forward pass
    /// reads: the fusion parameters sit idle while fusion is disabled.
    pub fn active_param_len(&self) -> usize {
        let n = 2 * (self.visual.layers.len() + self.audio.layers.len());
        if self.fusion_enabled {
            n + 4
        } else {
            n
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.embed_dim()
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t> {
        BoundModel {
            visual: bind_encoder(tape, &self.visual, trainable),
            audio: bind_encoder(tape, &self.audio, trainable),
            amfm: BoundAmfm {
                w_s: bind(tape, &self.amfm.w_s, trainable),
                b_s: bind(tape, &self.amfm.b_s, trainable),
                w_e: bind(tape, &self.amfm.w_e, trainable),
                b_e: bind(tape, &self.amfm.b_e, trainable),
            },
            gate_fn: self.gate_fn,
            fusion_enabled: self.fusion_enabled,
        }
    }

    /// Embeddings without gradient tracking: fused features when fusion is
    /// enabled, raw encoder outputs otherwise.
    pub fn embed(&self, visual: &Tensor, audio: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let m = self.bind(&tape, false);
        let (fv, fa) = m.forward(tape.constant(visual.clone()), tape.constant(audio.clone()))?;
        Ok(((*fv.value()).clone(), (*fa.value()).clone()))
    }
}

fn bind<'t>(tape: &'t Tape, t: &Tensor, trainable: bool) -> Var<'t> {
    if trainable {
        tape.param(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct BoundAmfm<'t> {
    pub w_s: Var<'t>,
    pub b_s: Var<'t>,
    pub w_e: Var<'t>,
    pub b_e: Var<'t>,
}

pub struct BoundModel<'t> {
    pub visual: Vec<BoundLinear<'t>>,
    pub audio: Vec<BoundLinear<'t>>,
    pub amfm: BoundAmfm<'t>,
    pub gate_fn: GateFn,
    pub fusion_enabled: bool,
}

impl<'t> BoundModel<'t> {
    /// Tape handles in the order of [`AvclModel::named_params`].
    pub fn params(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for l in self.visual.iter().chain(&self.audio) {
            out.push(l.weight);
            out.push(l.bias);
        }
        out.extend([self.amfm.w_s, self.amfm.b_s, self.amfm.w_e, self.amfm.b_e]);
        out
    }

    pub fn encode_visual(&self, x: Var<'t>) -> Result<Var<'t>> {
        encode(x, &self.visual)
    }

    pub fn encode_audio(&self, x: Var<'t>) -> Result<Var<'t>> {
        encode(x, &self.audio)
    }

    /// Encoders followed by fusion (if enabled).
    pub fn forward(&self, visual: Var<'t>, audio: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let v = self.encode_visual(visual)?;
        let a = self.encode_audio(audio)?;
        if self.fusion_enabled {
            amfm_forward(v, a, &self.amfm, self.gate_fn)
        } else {
            Ok((v, a))
        }
    }
}

pub fn bind_encoder<'t>(tape: &'t Tape, enc: &Encoder, trainable: bool) -> Vec<BoundLinear<'t>> {
    enc.layers
        .iter()
        .map(|l| BoundLinear {
            weight: bind(tape, &l.weight, trainable),
            bias: bind(tape, &l.bias, trainable),
        })
        .collect()
}

/// `x · Wᵀ + 1 · bᵀ` for a batch `x[B × in]`. The bias is spread over rows
/// with a ones column, which keeps the tape free of general broadcasting.
pub fn affine<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::dim("affine", &xs, &ws));
    }
    let tape = x.tape();
    let ones = tape.constant(Tensor::ones(&[xs[0], 1]));
    let row = bias.reshape(&[1, ws[0]])?;
    x.matmul(&weight.transpose()?)?.add(&ones.matmul(&row)?)
}

/// Encoder forward: affine layers with ReLU between them.
pub fn encode<'t>(x: Var<'t>, layers: &[BoundLinear<'t>]) -> Result<Var<'t>> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = affine(h, l.weight, l.bias)?;
        if i + 1 < layers.len() {
            h = h.relu();
        }
    }
    Ok(h)
}

/// Fusion forward on a batch: returns `(f_v, f_a)`.
pub fn amfm_forward<'t>(
    v: Var<'t>,
    a: Var<'t>,
    p: &BoundAmfm<'t>,
    gate: GateFn,
) -> Result<(Var<'t>, Var<'t>)> {
    let (vs, as_) = (v.shape(), a.shape());
    if vs != as_ || vs.len() != 2 {
        return Err(Error::Contract(format!(
            "fusion gates both modalities with one excitation vector, so their \
             embeddings must have equal shapes; got {vs:?} and {as_:?}"
        )));
    }
    let joint = affine(v.concat_cols(&a)?, p.w_s, p.b_s)?;
    let excitation = affine(joint, p.w_e, p.b_e)?;
    let g = match gate {
        GateFn::Relu => excitation.relu(),
        GateFn::Sigmoid => excitation.sigmoid(),
    };
    Ok((g.mul(&v)?, g.mul(&a)?))
}
