//! Stage 2: segmentor with dual discriminators and the local feature mask.
//!
//! The feature discriminator D1 scores every feature location for domain
//! membership. On target images its raw score magnitude is the local feature
//! mask: locations it can confidently tell apart are the ones with a large
//! remaining domain gap, and their features are amplified before prediction.
//! The output discriminator D2 compares softmax predictions of both flows.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::{ImageBatch, SliceRecord};
use crate::error::{Error, Result};
use crate::nn::{self, bce_with_logits, leaky_relu, softmax_channels, upsample2x_nearest, Conv2d, ParamStore};
use crate::synthesis::{LossWeights, PatchScoreMap};

/// Discriminator label for translated-source inputs.
pub const SOURCE_LABEL: f64 = 1.0;
/// Discriminator label for real target inputs.
pub const TARGET_LABEL: f64 = 0.0;

/// Soft-Dice smoothing.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Lower clamp on probabilities inside the cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegArch {
    pub base_channels: usize,
    /// Stride-2 stages in the feature extractor; feature stride is 2^n_down.
    pub n_down: usize,
    pub d1_channels: usize,
    pub d2_channels: usize,
    pub d2_layers: usize,
}

impl Default for SegArch {
    fn default() -> Self {
        Self {
            base_channels: 16,
            n_down: 2,
            d1_channels: 32,
            d2_channels: 16,
            d2_layers: 3,
        }
    }
}

impl SegArch {
    pub fn feature_channels(&self) -> usize {
        self.base_channels << self.n_down
    }

    pub fn stride(&self) -> usize {
        1 << self.n_down
    }
}

/// Encoder features, (B, C_f, H / stride, W / stride).
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

/// Non-negative (B, 1, h, w) mask over feature locations.
#[derive(Debug, Clone)]
pub struct LocalFeatureMask(pub Tensor);

#[derive(Debug, Clone)]
pub struct SegPrediction {
    /// (B, C + 1, H, W)
    pub logits: Tensor,
    /// Softmax of `logits` over the class axis.
    pub probabilities: Tensor,
}

impl SegPrediction {
    pub fn from_logits(logits: Tensor) -> Result<Self> {
        let probabilities = softmax_channels(&logits)?;
        Ok(Self { logits, probabilities })
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Result<Array3<u8>> {
        let (b, k, h, w) = self.logits.dims4()?;
        let v = self.logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for c in 0..k {
                let val = v[((bi * k + c) * h + y) * w + x];
                if val > best_v {
                    best_v = val;
                    best = c;
                }
            }
            best as u8
        }))
    }
}

#[derive(Debug, Clone)]
struct ResidualStage {
    down: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct FeatureExtractor {
    stem: Conv2d,
    stages: Vec<ResidualStage>,
}

impl FeatureExtractor {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?.relu()?;
        for s in &self.stages {
            h = s.down.forward(&h)?.relu()?;
            let r = s.conv2.forward(&s.conv1.forward(&h)?.relu()?)?;
            h = (h + r)?.relu()?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct Predictor {
    ups: Vec<Conv2d>,
    head: Conv2d,
}

impl Predictor {
    fn forward(&self, f: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
        let mut h = f.clone();
        for conv in &self.ups {
            h = conv.forward(&upsample2x_nearest(&h)?)?.relu()?;
        }
        let logits = self.head.forward(&h)?;
        let (_, _, hh, ww) = logits.dims4()?;
        if (hh, ww) != out_hw {
            return Ok(logits.upsample_nearest2d(out_hw.0, out_hw.1)?);
        }
        Ok(logits)
    }
}

/// Pixel-wise feature-space discriminator (same spatial size as its input).
#[derive(Debug, Clone)]
struct FeatureDiscriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

impl FeatureDiscriminator {
    fn forward(&self, f: &Tensor, detach_params: bool) -> Result<Tensor> {
        let run = |c: &Conv2d, x: &Tensor| if detach_params { c.forward_detached(x) } else { c.forward(x) };
        let h = leaky_relu(&run(&self.conv1, f)?, 0.2)?;
        let h = leaky_relu(&run(&self.conv2, &h)?, 0.2)?;
        run(&self.head, &h)
    }
}

/// Patch discriminator over class-probability maps.
#[derive(Debug, Clone)]
struct OutputDiscriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

impl OutputDiscriminator {
    fn forward(&self, p: &Tensor) -> Result<Tensor> {
        let mut h = p.clone();
        for conv in &self.layers {
            h = leaky_relu(&conv.forward(&h)?, 0.2)?;
        }
        self.head.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationNet {
    pub arch: SegArch,
    pub num_classes: usize,
    extractor: FeatureExtractor,
    predictor: Predictor,
    d1: FeatureDiscriminator,
    d2: OutputDiscriminator,
    segmentor_params: ParamStore,
    d1_params: ParamStore,
    d2_params: ParamStore,
}

impl SegmentationNet {
    /// `num_classes` counts foreground classes; the predictor emits
    /// `num_classes + 1` channels.
    pub fn new(arch: &SegArch, num_classes: usize, dtype: DType, rng: &mut impl Rng) -> Result<Self> {
        if arch.base_channels == 0 || arch.d1_channels == 0 || arch.d2_channels == 0 {
            return Err(Error::config("model.segmentation", "channel counts must be positive"));
        }
        if num_classes == 0 {
            return Err(Error::validation("num_classes", "must be positive"));
        }
        let k = num_classes + 1;
        let mut s = ParamStore::new(dtype);
        let c0 = arch.base_channels;
        let stem = s.conv2d("extractor.stem", 1, c0, 3, 1, 1, rng)?;
        let mut ch = c0;
        let mut stages = Vec::new();
        for i in 0..arch.n_down {
            let down = s.conv2d(&format!("extractor.stage{i}.down"), ch, ch * 2, 3, 2, 1, rng)?;
            ch *= 2;
            let conv1 = s.conv2d(&format!("extractor.stage{i}.conv1"), ch, ch, 3, 1, 1, rng)?;
            let conv2 = s.conv2d(&format!("extractor.stage{i}.conv2"), ch, ch, 3, 1, 1, rng)?;
            stages.push(ResidualStage { down, conv1, conv2 });
        }
        let feat = ch;
        let mut ups = Vec::new();
        for i in 0..arch.n_down {
            ups.push(s.conv2d(&format!("predictor.up{i}"), ch, ch / 2, 3, 1, 1, rng)?);
            ch /= 2;
        }
        let head = s.conv2d("predictor.head", ch, k, 1, 1, 0, rng)?;

        let mut p1 = ParamStore::new(dtype);
        let d1 = FeatureDiscriminator {
            conv1: p1.conv2d("d1.conv1", feat, arch.d1_channels, 3, 1, 1, rng)?,
            conv2: p1.conv2d("d1.conv2", arch.d1_channels, arch.d1_channels, 3, 1, 1, rng)?,
            head: p1.conv2d("d1.head", arch.d1_channels, 1, 1, 1, 0, rng)?,
        };

        let mut p2 = ParamStore::new(dtype);
        let mut layers = Vec::new();
        let (mut cin, mut cout) = (k, arch.d2_channels);
        for i in 0..arch.d2_layers {
            layers.push(p2.conv2d(&format!("d2.conv{i}"), cin, cout, 3, 2, 1, rng)?);
            cin = cout;
            cout *= 2;
        }
        let d2_head = p2.conv2d("d2.head", cin, 1, 3, 1, 1, rng)?;

        Ok(Self {
            arch: arch.clone(),
            num_classes,
            extractor: FeatureExtractor { stem, stages },
            predictor: Predictor { ups, head },
            d1,
            d2: OutputDiscriminator { layers, head: d2_head },
            segmentor_params: s,
            d1_params: p1,
            d2_params: p2,
        })
    }

    pub fn segmentor_params(&self) -> &ParamStore {
        &self.segmentor_params
    }

    pub fn d1_params(&self) -> &ParamStore {
        &self.d1_params
    }

    pub fn d2_params(&self) -> &ParamStore {
        &self.d2_params
    }

    pub fn discriminator_params(&self) -> ParamStore {
        let mut all = ParamStore::new(self.segmentor_params.dtype());
        all.extend_prefixed("", &self.d1_params);
        all.extend_prefixed("", &self.d2_params);
        all
    }

    pub fn all_params(&self) -> ParamStore {
        let mut all = ParamStore::new(self.segmentor_params.dtype());
        all.extend_prefixed("segmentor/", &self.segmentor_params);
        all.extend_prefixed("discriminator/", &self.d1_params);
        all.extend_prefixed("discriminator/", &self.d2_params);
        all
    }

    pub fn dtype(&self) -> DType {
        self.segmentor_params.dtype()
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = x.dims4()?;
        let stride = self.arch.stride();
        if c != 1 || h % stride != 0 || w % stride != 0 {
            return Err(Error::config(
                "model.segmentation.n_down",
                format!("input {c}x{h}x{w} is incompatible with feature stride {stride}"),
            ));
        }
        Ok(FeatureMap(self.extractor.forward(x)?))
    }

    /// m = |D1(f_t)|, cut from the graph: segmentation gradients reach
    /// neither D1's parameters nor the features through this path.
    pub fn feature_mask(&self, f_t: &FeatureMap) -> Result<LocalFeatureMask> {
        let raw = self.d1.forward(&f_t.0.detach(), true)?;
        Ok(LocalFeatureMask(raw.abs()?.detach()))
    }

    pub fn predict(&self, f: &FeatureMap, out_hw: (usize, usize)) -> Result<SegPrediction> {
        SegPrediction::from_logits(self.predictor.forward(&f.0, out_hw)?)
    }

    pub fn discriminate_features(&self, f: &FeatureMap) -> Result<PatchScoreMap> {
        Ok(PatchScoreMap(self.d1.forward(&f.0, false)?))
    }

    pub fn discriminate_prediction(&self, p: &SegPrediction) -> Result<PatchScoreMap> {
        Ok(PatchScoreMap(self.d2.forward(&p.probabilities)?))
    }

    /// Inference on a batch. Target-domain inputs go through the mask when
    /// `use_mask` is set, mirroring the target training flow.
    pub fn infer(&self, x: &Tensor, use_mask: bool) -> Result<(SegPrediction, Option<LocalFeatureMask>)> {
        let (_, _, h, w) = x.dims4()?;
        let f = self.extract_features(x)?;
        if use_mask {
            let m = self.feature_mask(&f)?;
            let f_hat = reweight(&f, &m)?;
            Ok((self.predict(&f_hat, (h, w))?, Some(m)))
        } else {
            Ok((self.predict(&f, (h, w))?, None))
        }
    }
}

impl SegmentationNet {
    /// Per-slice argmax labels for preprocessed records, in input order.
    pub fn predict_records(&self, records: &[SliceRecord], use_mask: bool) -> Result<Vec<Array2<u8>>> {
        const CHUNK: usize = 16;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let refs: Vec<&SliceRecord> = chunk.iter().collect();
            let (batch, _) = ImageBatch::from_records(&refs)?;
            let (b, c, h, w) = batch.images.dim();
            let x = Tensor::from_vec(batch.images.iter().copied().collect::<Vec<f32>>(), (b, c, h, w), &Device::Cpu)?
                .to_dtype(self.dtype())?;
            let (p, _) = self.infer(&x, use_mask)?;
            let labels = p.argmax()?;
            out.extend(labels.outer_iter().map(|l| l.to_owned()));
        }
        Ok(out)
    }

    /// Mask values upsampled (nearest) to the input resolution, one array per
    /// record.
    pub fn mask_records(&self, records: &[SliceRecord]) -> Result<Vec<Array2<f32>>> {
        const CHUNK: usize = 16;
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(CHUNK) {
            let refs: Vec<&SliceRecord> = chunk.iter().collect();
            let (batch, _) = ImageBatch::from_records(&refs)?;
            let (b, c, h, w) = batch.images.dim();
            let x = Tensor::from_vec(batch.images.iter().copied().collect::<Vec<f32>>(), (b, c, h, w), &Device::Cpu)?
                .to_dtype(self.dtype())?;
            let m = self.feature_mask(&self.extract_features(&x)?)?;
            let up = m.0.upsample_nearest2d(h, w)?.to_dtype(DType::F32)?;
            let flat = up.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..b {
                out.push(Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("sized"));
            }
        }
        Ok(out)
    }
}

/// f_hat = f + f * expand(tanh(m)), `m` broadcast across channels.
pub fn reweight(f: &FeatureMap, m: &LocalFeatureMask) -> Result<FeatureMap> {
    let (b, _, h, w) = f.0.dims4()?;
    let (mb, mc, mh, mw) = m.0.dims4()?;
    if (mb, mc, mh, mw) != (b, 1, h, w) {
        return Err(Error::Contract(format!(
            "mask shape {:?} does not match features {:?}",
            m.0.dims(),
            f.0.dims()
        )));
    }
    let gate = m.0.tanh()?;
    Ok(FeatureMap((&f.0 + f.0.broadcast_mul(&gate)?)?))
}

/// One-hot (B, K, H, W) encoding of integer labels.
pub fn one_hot(labels: &Array3<u8>, num_outputs: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let (b, h, w) = labels.dim();
    if let Some(&bad) = labels.iter().find(|&&v| v as usize >= num_outputs) {
        return Err(Error::Contract(format!(
            "label value {bad} outside 0..{num_outputs}"
        )));
    }
    let mut v = vec![0f32; b * num_outputs * h * w];
    for ((bi, y, x), &c) in labels.indexed_iter() {
        v[((bi * num_outputs + c as usize) * h + y) * w + x] = 1.0;
    }
    Ok(Tensor::from_vec(v, (b, num_outputs, h, w), device)?.to_dtype(dtype)?)
}

/// Cross-entropy plus soft-Dice loss over all `C + 1` classes.
///
/// CE = -mean log(clamp(p_y, 1e-7, 1)); Dice is computed over the whole batch
/// per class as (2 sum p y + d) / (sum p + sum y + d) with d = 1e-5, and the
/// loss uses one minus its class mean.
pub fn seg_loss(probabilities: &Tensor, labels: &Array3<u8>) -> Result<Tensor> {
    let (b, k, h, w) = probabilities.dims4()?;
    if labels.dim() != (b, h, w) {
        return Err(Error::Contract(format!(
            "labels {:?} do not match prediction {:?}",
            labels.dim(),
            probabilities.dims()
        )));
    }
    let y = one_hot(labels, k, probabilities.dtype(), probabilities.device())?;
    let log_p = probabilities.clamp(CE_CLAMP, 1.0)?.log()?;
    let ce = ((&y * log_p)?.sum(1)?.mean_all()? * -1.0)?;
    let per_class = |t: &Tensor| -> Result<Tensor> { Ok(t.transpose(0, 1)?.reshape((k, b * h * w))?.sum(1)?) };
    let inter = per_class(&(probabilities * &y)?)?;
    let denom = ((per_class(probabilities)? + per_class(&y)?)? + DICE_SMOOTH)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    let dice_loss = dice.mean_all()?.affine(-1.0, 1.0)?;
    Ok((ce + dice_loss)?)
}

/// Which adversarial branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarialFlags {
    pub d1: bool,
    pub d2: bool,
}

impl Default for AdversarialFlags {
    fn default() -> Self {
        Self { d1: true, d2: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossBundle {
    pub seg: f64,
    pub adv_d1_g: f64,
    pub adv_d1_d: f64,
    pub adv_d2_g: f64,
    pub adv_d2_d: f64,
    pub total_seg: f64,
}

impl SegLossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("seg", self.seg),
            ("adv_d1_g", self.adv_d1_g),
            ("adv_d1_d", self.adv_d1_d),
            ("adv_d2_g", self.adv_d2_g),
            ("adv_d2_d", self.adv_d2_d),
            ("total_seg", self.total_seg),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Losses {
    pub seg: Tensor,
    pub adv_d1_g: Tensor,
    pub adv_d1_d: Tensor,
    pub adv_d2_g: Tensor,
    pub adv_d2_d: Tensor,
    /// seg + l_d1 * adv_d1_g + l_d2 * adv_d2_g; drives the segmentor.
    pub total_seg: Tensor,
    /// adv_d1_d + adv_d2_d; drives the discriminators.
    pub total_disc: Tensor,
    pub mask: Option<LocalFeatureMask>,
}

impl Stage2Losses {
    pub fn bundle(&self, iteration: usize) -> Result<SegLossBundle> {
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
        Ok(SegLossBundle {
            seg: get(&self.seg, "seg")?,
            adv_d1_g: get(&self.adv_d1_g, "adv_d1_g")?,
            adv_d1_d: get(&self.adv_d1_d, "adv_d1_d")?,
            adv_d2_g: get(&self.adv_d2_g, "adv_d2_g")?,
            adv_d2_d: get(&self.adv_d2_d, "adv_d2_d")?,
            total_seg: get(&self.total_seg, "total_seg")?,
        })
    }
}

/// Discriminator and generator adversarial terms for one discriminator:
/// the discriminator labels source 1 and target 0, the segmentor is scored
/// against the inverted labels.
fn adversarial_pair(
    score_source: &Tensor,
    score_target: &Tensor,
    score_source_detached: &Tensor,
    score_target_detached: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let gen = ((bce_with_logits(score_source, TARGET_LABEL)? + bce_with_logits(score_target, SOURCE_LABEL)?)? * 0.5)?;
    let disc = ((bce_with_logits(score_source_detached, SOURCE_LABEL)?
        + bce_with_logits(score_target_detached, TARGET_LABEL)?)?
        * 0.5)?;
    Ok((gen, disc))
}

/// Stage-2 losses for one pair of batches: supervised loss on the translated
/// source flow, mask-reweighted target flow, and both adversarial branches.
pub fn stage2_losses(
    net: &SegmentationNet,
    x_st: &Tensor,
    y_s: &Array3<u8>,
    x_t: &Tensor,
    weights: &LossWeights,
    flags: AdversarialFlags,
) -> Result<Stage2Losses> {
    stage2_losses_with_mask(net, x_st, y_s, x_t, None, weights, flags)
}

/// As [`stage2_losses`], but with the target mask supplied by the caller
/// instead of computed from D1. The mask is a constant of the graph either
/// way; this entry point lets it be held fixed across several evaluations.
pub fn stage2_losses_with_mask(
    net: &SegmentationNet,
    x_st: &Tensor,
    y_s: &Array3<u8>,
    x_t: &Tensor,
    fixed_mask: Option<LocalFeatureMask>,
    weights: &LossWeights,
    flags: AdversarialFlags,
) -> Result<Stage2Losses> {
    let (_, _, h, w) = x_st.dims4()?;
    let (_, _, ht, wt) = x_t.dims4()?;
    let f_s = net.extract_features(x_st)?;
    let p_s = net.predict(&f_s, (h, w))?;
    let seg = seg_loss(&p_s.probabilities, y_s)?;

    let f_t = net.extract_features(x_t)?;
    let mask = match (flags.d1, fixed_mask) {
        (false, _) => None,
        (true, Some(m)) => Some(LocalFeatureMask(m.0.detach())),
        (true, None) => Some(net.feature_mask(&f_t)?),
    };
    let f_t_hat = match &mask {
        Some(m) => reweight(&f_t, m)?,
        None => f_t.clone(),
    };
    let p_t = net.predict(&f_t_hat, (ht, wt))?;

    let zero = Tensor::zeros((), seg.dtype(), seg.device())?;
    let (adv_d1_g, adv_d1_d) = if flags.d1 {
        let s = net.discriminate_features(&f_s)?.0;
        let t = net.discriminate_features(&f_t)?.0;
        let sd = net.discriminate_features(&FeatureMap(f_s.0.detach()))?.0;
        let td = net.discriminate_features(&FeatureMap(f_t.0.detach()))?.0;
        adversarial_pair(&s, &t, &sd, &td)?
    } else {
        (zero.clone(), zero.clone())
    };
    let (adv_d2_g, adv_d2_d) = if flags.d2 {
        let s = net.discriminate_prediction(&p_s)?.0;
        let t = net.discriminate_prediction(&p_t)?.0;
        let detached = |p: &SegPrediction| SegPrediction {
            logits: p.logits.detach(),
            probabilities: p.probabilities.detach(),
        };
        let sd = net.discriminate_prediction(&detached(&p_s))?.0;
        let td = net.discriminate_prediction(&detached(&p_t))?.0;
        adversarial_pair(&s, &t, &sd, &td)?
    } else {
        (zero.clone(), zero.clone())
    };
    let total_seg = ((&seg + (&adv_d1_g * weights.d1)?)? + (&adv_d2_g * weights.d2)?)?;
    let total_disc = (&adv_d1_d + &adv_d2_d)?;
    Ok(Stage2Losses {
        seg,
        adv_d1_g,
        adv_d1_d,
        adv_d2_g,
        adv_d2_d,
        total_seg,
        total_disc,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(arch: &SegArch) -> SegmentationNet {
        SegmentationNet::new(arch, 2, DType::F64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn input(b: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..b * hw * hw).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (b, 1, hw, hw), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn stride_eight_feature_shape() {
        let arch = SegArch {
            n_down: 3,
            base_channels: 4,
            ..SegArch::default()
        };
        let n = net(&arch);
        let f = n.extract_features(&input(1, 64, 1)).unwrap();
        assert_eq!(f.0.dims(), &[1, 32, 8, 8]);
    }

    #[test]
    fn zero_input_gives_finite_features() {
        let n = net(&SegArch::default());
        let x = Tensor::zeros((1, 1, 16, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(values(&n.extract_features(&x).unwrap().0).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prediction_is_normalised_and_full_resolution() {
        let n = net(&SegArch::default());
        let x = input(2, 16, 2);
        let (p, _) = n.infer(&x, true).unwrap();
        assert_eq!(p.probabilities.dims(), &[2, 3, 16, 16]);
        let sums = values(&p.probabilities.sum(1).unwrap());
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_index() {
        let logits = Tensor::zeros((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let p = SegPrediction::from_logits(logits).unwrap();
        assert!(p.argmax().unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn discriminators_emit_single_channel() {
        let n = net(&SegArch::default());
        let x = input(2, 16, 3);
        let f = n.extract_features(&x).unwrap();
        let s1 = n.discriminate_features(&f).unwrap();
        assert_eq!(s1.0.dims(), &[2, 1, 4, 4]);
        let p = n.predict(&f, (16, 16)).unwrap();
        let s2 = n.discriminate_prediction(&p).unwrap();
        assert_eq!(s2.0.dim(1).unwrap(), 1);
        assert_eq!(values(&s1.0), values(&n.discriminate_features(&f).unwrap().0));
    }

    #[test]
    fn zeroed_d1_gives_zero_mask() {
        let n = net(&SegArch::default());
        for var in n.d1_params().vars().values() {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let f = n.extract_features(&input(1, 16, 4)).unwrap();
        let m = n.feature_mask(&f).unwrap();
        assert!(values(&m.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_is_absolute_raw_score() {
        let n = net(&SegArch::default());
        let f = n.extract_features(&input(1, 16, 5)).unwrap();
        let raw = values(&n.discriminate_features(&f).unwrap().0);
        let m = values(&n.feature_mask(&f).unwrap().0);
        for (r, v) in raw.iter().zip(&m) {
            assert_eq!(r.abs(), *v);
        }
    }

    #[test]
    fn reweight_identity_limit_and_probe() {
        let dev = Device::Cpu;
        let f = FeatureMap(Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap());
        let zero = LocalFeatureMask(Tensor::zeros((2, 1, 4, 4), DType::F64, &dev).unwrap());
        assert_eq!(values(&reweight(&f, &zero).unwrap().0), values(&f.0));
        let big = LocalFeatureMask(Tensor::full(50f64, (2, 1, 4, 4), &dev).unwrap());
        let doubled = values(&reweight(&f, &big).unwrap().0);
        for (a, b) in doubled.iter().zip(values(&f.0)) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
        let probe_f = FeatureMap(Tensor::full(2.0f64, (1, 1, 1, 1), &dev).unwrap());
        let probe_m = LocalFeatureMask(Tensor::full(0.5f64, (1, 1, 1, 1), &dev).unwrap());
        let v = values(&reweight(&probe_f, &probe_m).unwrap().0)[0];
        assert!((v - 2.0 * (1.0 + 0.5f64.tanh())).abs() < 1e-12);
        assert!((v - 2.92423).abs() < 1e-5);
    }

    #[test]
    fn reweight_rejects_shape_mismatch() {
        let dev = Device::Cpu;
        let f = FeatureMap(Tensor::zeros((1, 3, 4, 4), DType::F64, &dev).unwrap());
        let m = LocalFeatureMask(Tensor::zeros((1, 1, 2, 4), DType::F64, &dev).unwrap());
        assert!(matches!(reweight(&f, &m), Err(Error::Contract(_))));
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let dev = Device::Cpu;
        let labels = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| ((y + x) % 3) as u8);
        let eps = 1e-7;
        let mut v = vec![eps / 2.0; 3 * 16];
        for ((_, y, x), &c) in labels.indexed_iter() {
            v[(c as usize * 4 + y) * 4 + x] = 1.0 - eps;
        }
        let p = Tensor::from_vec(v, (1, 3, 4, 4), &dev).unwrap();
        let l = nn::scalar(&seg_loss(&p, &labels).unwrap()).unwrap();
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn uniform_two_class_loss_matches_hand_value() {
        // 2x2 image, two classes, two pixels each; p = 0.5 everywhere.
        let labels = Array3::from_shape_vec((1, 2, 2), vec![0u8, 1, 1, 0]).unwrap();
        let p = Tensor::full(0.5f64, (1, 2, 2, 2), &Device::Cpu).unwrap();
        let ce = std::f64::consts::LN_2;
        // per class: (2 * 1 + d) / (2 + 2 + d)
        let dice = 1.0 - (2.0 + DICE_SMOOTH) / (4.0 + DICE_SMOOTH);
        let l = nn::scalar(&seg_loss(&p, &labels).unwrap()).unwrap();
        assert!((l - (ce + dice)).abs() < 1e-12, "{l} vs {}", ce + dice);
    }

    #[test]
    fn empty_class_with_empty_prediction_contributes_nothing() {
        // class 2 absent from both labels and probabilities
        let labels = Array3::from_shape_vec((1, 1, 2), vec![0u8, 1]).unwrap();
        let p = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0, 0.0, 0.0], (1, 3, 1, 2), &Device::Cpu).unwrap();
        let l = nn::scalar(&seg_loss(&p, &labels).unwrap()).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn seg_loss_rejects_out_of_range_labels() {
        let labels = Array3::from_elem((1, 2, 2), 5u8);
        let p = Tensor::full(1.0 / 3.0, (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(seg_loss(&p, &labels), Err(Error::Contract(_))));
    }
}
