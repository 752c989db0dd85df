//! Stage 1: feature-disentangled style transfer.
//!
//! A shared encoder maps an image to a content code and a shared decoder
//! renders a content code in a domain's style. The style of each domain is
//! a single learned vector per adaptive-normalisation site, produced by an
//! MLP from the domain's one-hot label; it conditions the encoder and the
//! decoder alike. A domain-conditional Markovian discriminator scores
//! patches for realism.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::DomainLabel;
use crate::error::{Error, Result};
use crate::nn::{self, adain, bce_with_logits, instance_normalize, l1, leaky_relu, upsample2x_nearest, Conv2d, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArch {
    pub base_channels: usize,
    /// Stride-2 blocks in the encoder (mirrored by upsampling in the decoder).
    pub n_down: usize,
    pub n_res: usize,
    pub style_hidden: usize,
    pub disc_channels: usize,
    /// Stride-2 layers in the patch discriminator.
    pub disc_layers: usize,
}

impl Default for SynthArch {
    fn default() -> Self {
        Self {
            base_channels: 8,
            n_down: 2,
            n_res: 1,
            style_hidden: 32,
            disc_channels: 8,
            disc_layers: 3,
        }
    }
}

impl SynthArch {
    /// Encoder/decoder channel count at the content-code resolution.
    pub fn content_channels(&self) -> usize {
        self.base_channels << self.n_down
    }
}

/// One (gamma, beta) pair per adaptive-normalisation site, in network order
/// (encoder sites first, then decoder sites).
#[derive(Debug, Clone)]
pub struct StyleParams {
    pub sites: Vec<(Tensor, Tensor)>,
}

/// Domain-invariant content representation, (B, C, h, w).
#[derive(Debug, Clone)]
pub struct ContentCode(pub Tensor);

/// Raw per-patch realness scores, (B, 1, h_d, w_d).
#[derive(Debug, Clone)]
pub struct PatchScoreMap(pub Tensor);

#[derive(Debug, Clone)]
struct StyleMapper {
    hidden: Linear,
    out: Linear,
    site_channels: Vec<usize>,
}

impl StyleMapper {
    fn forward(&self, d: DomainLabel, dtype: DType, device: &candle_core::Device) -> Result<StyleParams> {
        let onehot = Tensor::new(&[d.one_hot()], device)?.to_dtype(dtype)?;
        let h = self.hidden.forward(&onehot)?.relu()?;
        let raw = self.out.forward(&h)?.squeeze(0)?;
        let mut sites = Vec::with_capacity(self.site_channels.len());
        let mut offset = 0;
        for &c in &self.site_channels {
            // gamma is parameterised around 1 so a fresh mapper starts near plain instance norm
            let gamma = (raw.narrow(0, offset, c)? + 1.0)?;
            let beta = raw.narrow(0, offset + c, c)?;
            sites.push((gamma, beta));
            offset += 2 * c;
        }
        Ok(StyleParams { sites })
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, ch: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            conv1: store.conv2d(&format!("{name}.conv1"), ch, ch, 3, 1, 1, rng)?,
            conv2: store.conv2d(&format!("{name}.conv2"), ch, ch, 3, 1, 1, rng)?,
        })
    }

    fn forward(&self, x: &Tensor, s1: &(Tensor, Tensor), s2: &(Tensor, Tensor)) -> Result<Tensor> {
        let h = adain(&self.conv1.forward(x)?, &s1.0, &s1.1)?.relu()?;
        let h = adain(&self.conv2.forward(&h)?, &s2.0, &s2.1)?;
        Ok((x + h)?)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<ResBlock>,
}

impl Encoder {
    fn site_count(&self) -> usize {
        1 + self.downs.len() + 2 * self.res.len()
    }

    fn forward(&self, x: &Tensor, sites: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let mut it = sites.iter();
        let mut next = || it.next().expect("site count matches architecture");
        let s = next();
        let mut h = adain(&self.stem.forward(x)?, &s.0, &s.1)?.relu()?;
        for conv in &self.downs {
            let s = next();
            h = adain(&conv.forward(&h)?, &s.0, &s.1)?.relu()?;
        }
        for block in &self.res {
            let (a, b) = (next(), next());
            h = block.forward(&h, a, b)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    res: Vec<ResBlock>,
    ups: Vec<Conv2d>,
    out: Conv2d,
}

impl Decoder {
    fn forward(&self, c: &Tensor, sites: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let mut it = sites.iter();
        let mut next = || it.next().expect("site count matches architecture");
        let mut h = c.clone();
        for block in &self.res {
            let (a, b) = (next(), next());
            h = block.forward(&h, a, b)?;
        }
        for conv in &self.ups {
            h = upsample2x_nearest(&h)?;
            let s = next();
            h = adain(&conv.forward(&h)?, &s.0, &s.1)?.relu()?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchDiscriminator {
    /// Two output channels, one per domain; `d` selects the judging head.
    fn forward(&self, x: &Tensor, d: DomainLabel) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(&h)?;
            if i > 0 {
                h = instance_normalize(&h)?;
            }
            h = leaky_relu(&h, 0.2)?;
        }
        let scores = self.head.forward(&h)?;
        Ok(scores.narrow(1, d.index(), 1)?)
    }
}

/// Encoder/decoder pair seen by the stage-1 losses.
pub trait StyleGenerator {
    fn encode(&self, x: &Tensor, d: DomainLabel) -> Result<ContentCode>;
    fn decode(&self, c: &ContentCode, d: DomainLabel) -> Result<Tensor>;

    fn translate(&self, x: &Tensor, from: DomainLabel, to: DomainLabel) -> Result<Tensor> {
        self.decode(&self.encode(x, from)?, to)
    }
}

/// Domain-conditional image discriminator seen by the stage-1 losses.
pub trait ImageCritic {
    fn discriminate_image(&self, x: &Tensor, d: DomainLabel) -> Result<PatchScoreMap>;
}

#[derive(Debug, Clone)]
pub struct SynthesisNet {
    pub arch: SynthArch,
    mapper: StyleMapper,
    encoder: Encoder,
    decoder: Decoder,
    disc: PatchDiscriminator,
    generator_params: ParamStore,
    discriminator_params: ParamStore,
}

impl SynthesisNet {
    pub fn new(arch: &SynthArch, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        if arch.base_channels == 0 || arch.disc_channels == 0 || arch.style_hidden == 0 {
            return Err(Error::config("model.synthesis", "channel counts must be positive"));
        }
        if arch.disc_layers == 0 {
            return Err(Error::config("model.synthesis.disc_layers", "must be positive"));
        }
        let mut g = ParamStore::new(dtype);
        let c0 = arch.base_channels;
        let stem = g.conv2d("enc.stem", 1, c0, 3, 1, 1, rng)?;
        let mut site_channels = vec![c0];
        let mut downs = Vec::new();
        let mut ch = c0;
        for i in 0..arch.n_down {
            downs.push(g.conv2d(&format!("enc.down{i}"), ch, ch * 2, 3, 2, 1, rng)?);
            ch *= 2;
            site_channels.push(ch);
        }
        let mut enc_res = Vec::new();
        for i in 0..arch.n_res {
            enc_res.push(ResBlock::new(&mut g, &format!("enc.res{i}"), ch, rng)?);
            site_channels.extend([ch, ch]);
        }
        let mut dec_res = Vec::new();
        for i in 0..arch.n_res {
            dec_res.push(ResBlock::new(&mut g, &format!("dec.res{i}"), ch, rng)?);
            site_channels.extend([ch, ch]);
        }
        let mut ups = Vec::new();
        for i in 0..arch.n_down {
            ups.push(g.conv2d(&format!("dec.up{i}"), ch, ch / 2, 3, 1, 1, rng)?);
            ch /= 2;
            site_channels.push(ch);
        }
        let out = g.conv2d("dec.out", ch, 1, 3, 1, 1, rng)?;
        let total: usize = site_channels.iter().map(|c| 2 * c).sum();
        let hidden = g.linear("style.hidden", 2, arch.style_hidden, rng)?;
        let style_out = g.linear("style.out", arch.style_hidden, total, rng)?;
        // small initial style offsets: start close to gamma = 1, beta = 0
        style_out.weight.set(&(style_out.weight.as_tensor() * 0.1)?)?;

        let mut d = ParamStore::new(dtype);
        let mut layers = Vec::new();
        let mut in_ch = 1;
        let mut out_ch = arch.disc_channels;
        for i in 0..arch.disc_layers {
            layers.push(d.conv2d(&format!("disc.conv{i}"), in_ch, out_ch, 3, 2, 1, rng)?);
            in_ch = out_ch;
            out_ch *= 2;
        }
        let head = d.conv2d("disc.head", in_ch, 2, 3, 1, 1, rng)?;

        Ok(Self {
            arch: arch.clone(),
            mapper: StyleMapper {
                hidden,
                out: style_out,
                site_channels,
            },
            encoder: Encoder {
                stem,
                downs,
                res: enc_res,
            },
            decoder: Decoder { res: dec_res, ups, out },
            disc: PatchDiscriminator { layers, head },
            generator_params: g,
            discriminator_params: d,
        })
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.generator_params
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.discriminator_params
    }

    /// Every parameter under `generator/` and `discriminator/` prefixes.
    pub fn all_params(&self) -> ParamStore {
        let mut all = ParamStore::new(self.generator_params.dtype());
        all.extend_prefixed("generator/", &self.generator_params);
        all.extend_prefixed("discriminator/", &self.discriminator_params);
        all
    }

    pub fn dtype(&self) -> DType {
        self.generator_params.dtype()
    }

    pub fn style_params(&self, d: DomainLabel) -> Result<StyleParams> {
        self.mapper
            .forward(d, self.generator_params.dtype(), self.generator_params.device())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let f = 1usize << self.arch.n_down;
        if c != 1 {
            return Err(Error::config("model.synthesis", format!("expected 1 input channel, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::config(
                "model.synthesis.n_down",
                format!("input {h}x{w} is not divisible by the encoder stride {f}"),
            ));
        }
        Ok(())
    }
}

impl StyleGenerator for SynthesisNet {
    fn encode(&self, x: &Tensor, d: DomainLabel) -> Result<ContentCode> {
        self.check_input(x)?;
        let style = self.style_params(d)?;
        let n = self.encoder.site_count();
        Ok(ContentCode(self.encoder.forward(x, &style.sites[..n])?))
    }

    fn decode(&self, c: &ContentCode, d: DomainLabel) -> Result<Tensor> {
        let channels = c.0.dim(1)?;
        if channels != self.arch.content_channels() {
            return Err(Error::config(
                "model.synthesis",
                format!("content code has {channels} channels, decoder expects {}", self.arch.content_channels()),
            ));
        }
        let style = self.style_params(d)?;
        let n = self.encoder.site_count();
        self.decoder.forward(&c.0, &style.sites[n..])
    }
}

impl ImageCritic for SynthesisNet {
    fn discriminate_image(&self, x: &Tensor, d: DomainLabel) -> Result<PatchScoreMap> {
        Ok(PatchScoreMap(self.disc.forward(x, d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec_im: f64,
    pub rec_c: f64,
    pub cyc: f64,
    pub adv: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec_im: 20.0,
            rec_c: 1.0,
            cyc: 20.0,
            adv: 1.0,
            d1: 0.01,
            d2: 0.01,
        }
    }
}

impl LossWeights {
    pub fn total_g(&self, rec_im: f64, rec_c: f64, cyc: f64, adv_g: f64) -> f64 {
        self.rec_im * rec_im + self.rec_c * rec_c + self.cyc * cyc + self.adv * adv_g
    }
}

/// Scalar loss values of one stage-1 step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthLossBundle {
    pub rec_im: f64,
    pub rec_c: f64,
    pub cyc: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
}

impl SynthLossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("rec_im", self.rec_im),
            ("rec_c", self.rec_c),
            ("cyc", self.cyc),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("total_g", self.total_g),
        ]
    }
}

/// Differentiable stage-1 losses. `total_g` drives the encoder, decoder and
/// style mapper; `adv_d` (computed on detached translations) drives the
/// discriminator.
#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub rec_im: Tensor,
    pub rec_c: Tensor,
    pub cyc: Tensor,
    pub adv_g: Tensor,
    pub adv_d: Tensor,
    pub total_g: Tensor,
}

impl Stage1Losses {
    pub fn bundle(&self, iteration: usize) -> Result<SynthLossBundle> {
        let get = |t: &Tensor, term: &str| -> Result<f64> {
            let v = nn::scalar(t)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    iteration,
                    term: term.into(),
                })
            }
        };
        Ok(SynthLossBundle {
            rec_im: get(&self.rec_im, "rec_im")?,
            rec_c: get(&self.rec_c, "rec_c")?,
            cyc: get(&self.cyc, "cyc")?,
            adv_g: get(&self.adv_g, "adv_g")?,
            adv_d: get(&self.adv_d, "adv_d")?,
            total_g: get(&self.total_g, "total_g")?,
        })
    }
}

/// Reconstruction, content-reconstruction, cycle and adversarial terms over
/// both translation directions. Each term is the mean of its two directions.
pub fn stage1_losses<G: StyleGenerator, D: ImageCritic>(
    generator: &G,
    critic: &D,
    batch_s: &Tensor,
    batch_t: &Tensor,
    weights: &LossWeights,
) -> Result<Stage1Losses> {
    let mut rec_im = Vec::with_capacity(2);
    let mut rec_c = Vec::with_capacity(2);
    let mut cyc = Vec::with_capacity(2);
    let mut adv_g = Vec::with_capacity(2);
    let mut adv_d = Vec::with_capacity(2);
    for (di, x_i, x_j) in [
        (DomainLabel::Source, batch_s, batch_t),
        (DomainLabel::Target, batch_t, batch_s),
    ] {
        let dj = di.other();
        let c_i = generator.encode(x_i, di)?;
        let x_ii = generator.decode(&c_i, di)?;
        let x_ij = generator.decode(&c_i, dj)?;
        let c_ij = generator.encode(&x_ij, dj)?;
        let x_iji = generator.decode(&c_ij, di)?;
        rec_im.push(l1(&x_ii, x_i)?);
        rec_c.push(l1(&c_ij.0, &c_i.0)?);
        cyc.push(l1(&x_iji, x_i)?);
        adv_g.push(bce_with_logits(&critic.discriminate_image(&x_ij, dj)?.0, 1.0)?);
        let real = bce_with_logits(&critic.discriminate_image(x_j, dj)?.0, 1.0)?;
        let fake = bce_with_logits(&critic.discriminate_image(&x_ij.detach(), dj)?.0, 0.0)?;
        adv_d.push(((real + fake)? * 0.5)?);
    }
    let mean2 = |v: Vec<Tensor>| -> Result<Tensor> { Ok(((&v[0] + &v[1])? * 0.5)?) };
    let rec_im = mean2(rec_im)?;
    let rec_c = mean2(rec_c)?;
    let cyc = mean2(cyc)?;
    let adv_g = mean2(adv_g)?;
    let adv_d = mean2(adv_d)?;
    let total_g = ((((&rec_im * weights.rec_im)? + (&rec_c * weights.rec_c)?)? + (&cyc * weights.cyc)?)?
        + (&adv_g * weights.adv)?)?;
    Ok(Stage1Losses {
        rec_im,
        rec_c,
        cyc,
        adv_g,
        adv_d,
        total_g,
    })
}
