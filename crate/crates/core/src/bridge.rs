//! Per-domain mappers into the edge-like bridge domain and their losses.

use std::path::Path;

use edgebridge_tensor::{fan_in_uniform, Float, Graph, ParamSet, SgdConfig, SgdState, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edges::{canny, gaussian_blur, EdgeMap, CANNY_HIGH, CANNY_LOW};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, images_to_tensor, Cursor};
use crate::rng;
use crate::store::Store;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    /// No bridge: the "bridge view" is the raw view and no mapper loss applies.
    None,
    CannyFixed,
    HedFixed,
    Learned,
    LearnedNoPretrain,
}

impl BridgeMode {
    pub const ALL: [BridgeMode; 5] = [
        BridgeMode::None,
        BridgeMode::CannyFixed,
        BridgeMode::HedFixed,
        BridgeMode::Learned,
        BridgeMode::LearnedNoPretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BridgeMode::None => "none",
            BridgeMode::CannyFixed => "canny_fixed",
            BridgeMode::HedFixed => "hed_fixed",
            BridgeMode::Learned => "learned",
            BridgeMode::LearnedNoPretrain => "learned_no_pretrain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn is_learned(self) -> bool {
        matches!(self, BridgeMode::Learned | BridgeMode::LearnedNoPretrain)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeVariant {
    /// MSE against a frozen edge network.
    L2Hed,
    /// MSE against blurred Canny edges.
    L2CannyBlur,
    /// Mean absolute error between the stretched output and blurred Canny edges.
    L1CannyBlurStretch,
}

impl BridgeVariant {
    pub const ALL: [BridgeVariant; 3] = [BridgeVariant::L2Hed, BridgeVariant::L2CannyBlur, BridgeVariant::L1CannyBlurStretch];

    pub fn name(self) -> &'static str {
        match self {
            BridgeVariant::L2Hed => "l2_hed",
            BridgeVariant::L2CannyBlur => "l2_canny_blur",
            BridgeVariant::L1CannyBlurStretch => "l1_canny_blur_stretch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeLossConfig {
    pub variant: BridgeVariant,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub canny_low: f32,
    pub canny_high: f32,
}

impl Default for BridgeLossConfig {
    fn default() -> Self {
        Self {
            variant: BridgeVariant::L1CannyBlurStretch,
            blur_kernel: 5,
            blur_sigma: 0.15,
            canny_low: CANNY_LOW,
            canny_high: CANNY_HIGH,
        }
    }
}

/// Multi-stage side-output edge network. Each stage is a stack of 3x3
/// conv+ReLU layers followed by 2x2 max pooling before the next stage; every
/// stage emits a 1x1 side map upsampled to input size, and a learned 1x1
/// fusion of the side maps goes through a sigmoid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeNetArch {
    pub widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
}

impl EdgeNetArch {
    /// Reduced three-stage network for small images.
    pub fn desk() -> Self {
        Self {
            widths: vec![8, 16, 32],
            convs_per_stage: vec![2, 2, 2],
        }
    }

    /// The original five-stage layout.
    pub fn full() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 512],
            convs_per_stage: vec![2, 2, 3, 3, 3],
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != 3 {
            return Err(Error::ChannelCount { expected: 3, got: channels });
        }
        let m = self.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::SpatialSize {
                height: h,
                width: w,
                multiple: m,
                padded_height: h.div_ceil(m) * m,
                padded_width: w.div_ceil(m) * m,
            });
        }
        Ok(())
    }

    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        assert_eq!(self.widths.len(), self.convs_per_stage.len(), "edge net arch lists differ in length");
        let mut ps = ParamSet::new();
        let mut inp = 3;
        for (s, (&w, &n)) in self.widths.iter().zip(&self.convs_per_stage).enumerate() {
            for j in 0..n {
                nn::push_conv(&mut ps, &format!("s{s}.conv{j}"), w, inp, 3, true, rng);
                inp = w;
            }
            ps.push(format!("s{s}.side.w"), fan_in_uniform(&[1, w, 1, 1], w, rng));
            ps.push(format!("s{s}.side.b"), Tensor::zeros(&[1]));
        }
        let k = self.stages();
        ps.push("fuse.w", Tensor::full(&[1, k, 1, 1], T::of(1.0 / k as f64)));
        ps.push("fuse.b", Tensor::zeros(&[1]));
        ps
    }

    /// Fused logits `[n, 1, H, W]`.
    pub fn forward_logits<T: Float>(&self, g: &mut Graph<T>, params: &edgebridge_tensor::Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        self.check_input(s[1], s[2], s[3])?;
        let (h, w) = (s[2], s[3]);
        let mut cur = Cursor::new(params);
        let mut feat = x;
        let mut sides = Vec::with_capacity(self.stages());
        for (stage, &n) in self.convs_per_stage.iter().enumerate() {
            if stage > 0 {
                feat = g.max_pool2d(feat, 2);
            }
            for _ in 0..n {
                let y = nn::conv(g, &mut cur, feat, 1, 1, true);
                feat = g.relu(y);
            }
            let side = nn::conv(g, &mut cur, feat, 1, 0, true);
            sides.push(if stage > 0 { g.resize_bilinear(side, h, w) } else { side });
        }
        let stacked = g.concat(&sides, 1);
        let fused = nn::conv(g, &mut cur, stacked, 1, 0, true);
        cur.finish();
        Ok(fused)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, params: &edgebridge_tensor::Bound, x: Var) -> Result<Var> {
        let logits = self.forward_logits(g, params, x)?;
        Ok(g.sigmoid(logits))
    }

    /// Inference on a batch of images with frozen parameters.
    pub fn infer(&self, params: &ParamSet<f32>, images: &[&Image]) -> Result<Vec<EdgeMap>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        self.check_input(first.channels(), first.height(), first.width())?;
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(images));
        let y = self.forward(&mut g, &b, x)?;
        let (h, w) = (first.height(), first.width());
        Ok(g.value(y)
            .data()
            .chunks(h * w)
            .map(|c| EdgeMap::new(h, w, c.to_vec()))
            .collect())
    }
}

/// One domain's mapper. Parameters live in the training state; this binds
/// them to the domain they may process.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeMapper {
    pub domain_id: usize,
    pub arch: EdgeNetArch,
    pub params: ParamSet<f32>,
    pub trainable: bool,
}

impl BridgeMapper {
    pub fn new(domain_id: usize, arch: EdgeNetArch, params: ParamSet<f32>, trainable: bool) -> Self {
        Self {
            domain_id,
            arch,
            params,
            trainable,
        }
    }

    pub fn random(domain_id: usize, arch: EdgeNetArch, seed: u64) -> Self {
        let params = arch.init(&mut rng::stream(&[seed, 0xB1D, domain_id as u64]));
        Self::new(domain_id, arch, params, true)
    }
}

/// `Ψ_n(view)` for a view known to come from `view_domain`.
pub fn map_to_bridge(mapper: &BridgeMapper, view: &Image, view_domain: usize) -> Result<EdgeMap> {
    if mapper.domain_id != view_domain {
        return Err(Error::MapperDomain {
            mapper: mapper.domain_id,
            image: view_domain,
        });
    }
    Ok(mapper.arch.infer(&mapper.params, &[view])?.remove(0))
}

/// Frozen edge network used as a fixed oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct HedOracle {
    pub arch: EdgeNetArch,
    pub params: ParamSet<f32>,
}

const EDGE_NET_KIND: &str = "edge_net";

impl HedOracle {
    pub fn new(arch: EdgeNetArch, params: ParamSet<f32>) -> Self {
        Self { arch, params }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = Store::load(path)?;
        if store.meta.get("kind").and_then(|k| k.as_str()) != Some(EDGE_NET_KIND) {
            return Err(Error::CorruptCheckpoint(format!("{} is not an edge network weights file", path.display())));
        }
        let arch: EdgeNetArch = serde_json::from_value(store.meta["arch"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("edge net arch: {e}")))?;
        let template = arch.init::<f32>(&mut rng::stream(&[0]));
        let params = store.params("net", &template)?;
        Ok(Self { arch, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = Store::new(serde_json::json!({"kind": EDGE_NET_KIND, "arch": self.arch}));
        store.put_params("net", &self.params);
        store.save(path)
    }

    pub fn edge_map(&self, image: &Image) -> Result<EdgeMap> {
        Ok(self.arch.infer(&self.params, &[image])?.remove(0))
    }

    pub fn edge_maps(&self, images: &[&Image]) -> Result<Vec<EdgeMap>> {
        self.arch.infer(&self.params, images)
    }
}

/// The fixed target each variant compares the mapper output against.
pub fn bridge_target(view: &Image, cfg: &BridgeLossConfig, oracle: Option<&HedOracle>) -> Result<EdgeMap> {
    match cfg.variant {
        BridgeVariant::L2Hed => oracle
            .ok_or_else(|| Error::MissingOracle(cfg.variant.name().into()))?
            .edge_map(view),
        BridgeVariant::L2CannyBlur | BridgeVariant::L1CannyBlurStretch => {
            gaussian_blur(&canny(view, cfg.canny_low, cfg.canny_high), cfg.blur_kernel, cfg.blur_sigma)
        }
    }
}

/// Batched targets, running the oracle once for the whole batch.
pub fn bridge_targets(views: &[&Image], cfg: &BridgeLossConfig, oracle: Option<&HedOracle>) -> Result<Vec<EdgeMap>> {
    match cfg.variant {
        BridgeVariant::L2Hed => oracle
            .ok_or_else(|| Error::MissingOracle(cfg.variant.name().into()))?
            .edge_maps(views),
        _ => views.iter().map(|v| bridge_target(v, cfg, None)).collect(),
    }
}

/// Scalar loss between one mapper output and the variant's target.
pub fn bridge_loss(mapper_out: &EdgeMap, view: &Image, cfg: &BridgeLossConfig, oracle: Option<&HedOracle>) -> Result<f64> {
    if mapper_out.height() != view.height() || mapper_out.width() != view.width() {
        return Err(Error::InvalidArgument(format!(
            "mapper output {}x{} does not match view {}x{}",
            mapper_out.height(),
            mapper_out.width(),
            view.height(),
            view.width()
        )));
    }
    let target = bridge_target(view, cfg, oracle)?;
    let mut g = Graph::<f32>::new();
    let out = g.constant(Tensor::new(&[1, 1, view.height(), view.width()], mapper_out.values().to_vec()));
    let l = bridge_loss_graph(&mut g, out, &[&target], cfg.variant);
    Ok(g.value(l).item() as f64)
}

/// Mean-reduced loss of `out` (`[n, 1, H, W]`) against per-item targets.
pub fn bridge_loss_graph<T: Float>(g: &mut Graph<T>, out: Var, targets: &[&EdgeMap], variant: BridgeVariant) -> Var {
    let s = g.shape(out).to_vec();
    assert_eq!(s[0], targets.len(), "bridge targets per item");
    let data: Vec<T> = targets
        .iter()
        .flat_map(|t| t.values().iter().map(|&v| T::of(v as f64)))
        .collect();
    let t = g.constant(Tensor::new(&s, data));
    let residual = match variant {
        BridgeVariant::L2Hed | BridgeVariant::L2CannyBlur => {
            let d = g.sub(out, t);
            g.square(d)
        }
        BridgeVariant::L1CannyBlurStretch => {
            let st = g.stretch_to_unit(out);
            let d = g.sub(st, t);
            g.abs(d)
        }
    };
    g.mean(residual)
}

/// Fits an edge network to blurred Canny maps of `images` with a plain L2
/// objective. This stands in for pretrained edge weights when none are
/// available.
pub fn distill_from_canny(
    arch: &EdgeNetArch,
    images: &[&Image],
    cfg: &BridgeLossConfig,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamSet<f32>> {
    let mut params: ParamSet<f32> = arch.init(&mut rng::stream(&[seed, 0xD15]));
    if images.is_empty() || steps == 0 {
        return Ok(params);
    }
    let targets: Vec<EdgeMap> = images
        .iter()
        .map(|im| bridge_target(im, &BridgeLossConfig { variant: BridgeVariant::L2CannyBlur, ..*cfg }, None))
        .collect::<Result<_>>()?;
    let mut opt = SgdState::new(&params);
    let sgd = SgdConfig::default();
    let mut r = rng::stream(&[seed, 0xD15, 1]);
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch.min(images.len())).map(|_| r.random_range(0..images.len())).collect();
        let xs: Vec<&Image> = idx.iter().map(|&i| images[i]).collect();
        let ts: Vec<&EdgeMap> = idx.iter().map(|&i| &targets[i]).collect();
        let mut g = Graph::new();
        let b = params.bind(&mut g, true);
        let x = g.constant(images_to_tensor(&xs));
        let y = arch.forward(&mut g, &b, x)?;
        let loss = bridge_loss_graph(&mut g, y, &ts, BridgeVariant::L2CannyBlur);
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite("edge distillation loss"));
        }
        let grads = g.backward(loss);
        opt.step(&mut params, &b.grads(&grads), lr, &sgd);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render, Style};

    fn tiny_arch() -> EdgeNetArch {
        EdgeNetArch {
            widths: vec![4, 6],
            convs_per_stage: vec![1, 1],
        }
    }

    #[test]
    fn saturated_bias_gives_all_ones() {
        let mut m = BridgeMapper::random(0, tiny_arch(), 1);
        let n = m.params.len();
        m.params.tensors_mut()[n - 2] = Tensor::zeros(&[1, 2, 1, 1]);
        m.params.tensors_mut()[n - 1] = Tensor::full(&[1], 20.0);
        let out = map_to_bridge(&m, &render(Style::Photo, 0, 0, 16, 0), 0).unwrap();
        assert!(out.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn random_mapper_is_deterministic_and_open_unit() {
        let m = BridgeMapper::random(1, EdgeNetArch::desk(), 3);
        let img = render(Style::Clipart, 2, 0, 32, 0);
        let a = map_to_bridge(&m, &img, 1).unwrap();
        assert_eq!(a, map_to_bridge(&m, &img, 1).unwrap());
        assert!(a.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!((a.height(), a.width()), (32, 32));
    }

    #[test]
    fn wrong_domain_is_rejected() {
        let m = BridgeMapper::random(0, tiny_arch(), 1);
        assert!(matches!(
            map_to_bridge(&m, &Image::filled(3, 8, 8, 0.5), 1),
            Err(Error::MapperDomain { mapper: 0, image: 1 })
        ));
    }

    #[test]
    fn indivisible_size_reports_padding() {
        let m = BridgeMapper::random(0, EdgeNetArch::desk(), 1);
        match map_to_bridge(&m, &Image::filled(3, 30, 33, 0.5), 0) {
            Err(Error::SpatialSize {
                multiple: 4,
                padded_height: 32,
                padded_width: 36,
                ..
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_zero_and_unit_cases() {
        let view = render(Style::Sketch, 1, 2, 16, 0);
        let oracle = HedOracle::new(tiny_arch(), tiny_arch().init(&mut rng::stream(&[5])));
        for variant in BridgeVariant::ALL {
            let cfg = BridgeLossConfig { variant, ..Default::default() };
            let target = bridge_target(&view, &cfg, Some(&oracle)).unwrap();
            assert_eq!(bridge_loss(&target, &view, &cfg, Some(&oracle)).unwrap(), 0.0, "{variant:?}");
        }
        let blank = Image::filled(3, 16, 16, 0.5);
        let cfg = BridgeLossConfig {
            variant: BridgeVariant::L2CannyBlur,
            ..Default::default()
        };
        assert_eq!(bridge_loss(&EdgeMap::filled(16, 16, 1.0), &blank, &cfg, None).unwrap(), 1.0);
    }

    #[test]
    fn hed_variant_needs_an_oracle() {
        let cfg = BridgeLossConfig {
            variant: BridgeVariant::L2Hed,
            ..Default::default()
        };
        assert!(matches!(
            bridge_loss(&EdgeMap::filled(8, 8, 0.0), &Image::filled(3, 8, 8, 0.1), &cfg, None),
            Err(Error::MissingOracle(_))
        ));
    }

    #[test]
    fn l1_variant_matches_elementwise_recomputation() {
        let mut r = rng::stream(&[42]);
        let view = Image::from_fn(3, 8, 8, |_, y, x| if (x + y) % 5 < 2 { 0.9 } else { 0.1 });
        let out = EdgeMap::new(8, 8, (0..64).map(|_| r.random_range(0.05f32..0.95)).collect());
        let cfg = BridgeLossConfig::default();
        let got = bridge_loss(&out, &view, &cfg, None).unwrap();
        // Oracle: stretch by hand, then blur and compare pixel by pixel.
        let vals = out.values();
        let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
        let target = gaussian_blur(&canny(&view, CANNY_LOW, CANNY_HIGH), 5, 0.15).unwrap();
        let want: f64 = vals
            .iter()
            .zip(target.values())
            .map(|(&v, &t)| ((v as f64 - lo) / (hi - lo) - t as f64).abs())
            .sum::<f64>()
            / 64.0;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn toy_mapper_gradient_matches_finite_differences() {
        // Two-parameter mapper: sigmoid(a * luma + b), trained against blurred Canny.
        let view = render(Style::Clipart, 3, 1, 16, 2);
        let luma: Vec<f64> = view.luma().iter().map(|&v| v as f64).collect();
        for variant in [BridgeVariant::L2CannyBlur, BridgeVariant::L1CannyBlurStretch] {
            let cfg = BridgeLossConfig { variant, ..Default::default() };
            let target = bridge_target(&view, &cfg, None).unwrap();
            let eval = |a: f64, b: f64, want_grad: bool| {
                let mut g = Graph::<f64>::new();
                let pa = g.variable(Tensor::new(&[1], vec![a]));
                let pb = g.variable(Tensor::new(&[1], vec![b]));
                let x = g.constant(Tensor::new(&[1, 1, 16, 16], luma.clone()));
                let ax = g.mul_channel(x, pa);
                let z = g.add_channel(ax, pb);
                let y = g.sigmoid(z);
                let l = bridge_loss_graph(&mut g, y, &[&target], variant);
                let v = g.value(l).item();
                if want_grad {
                    let gr = g.backward(l);
                    (v, gr.get(pa).unwrap().item(), gr.get(pb).unwrap().item())
                } else {
                    (v, 0.0, 0.0)
                }
            };
            let (a, b) = (2.3, -1.1);
            let (_, ga, gb) = eval(a, b, true);
            let h = 1e-6;
            let fa = (eval(a + h, b, false).0 - eval(a - h, b, false).0) / (2.0 * h);
            let fb = (eval(a, b + h, false).0 - eval(a, b - h, false).0) / (2.0 * h);
            for (an, fd) in [(ga, fa), (gb, fb)] {
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-3, "{variant:?}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn oracle_weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hed.bin");
        let o = HedOracle::new(tiny_arch(), tiny_arch().init(&mut rng::stream(&[8])));
        o.save(&p).unwrap();
        assert_eq!(HedOracle::load(&p).unwrap(), o);
        std::fs::write(&p, b"garbage").unwrap();
        assert!(HedOracle::load(&p).is_err());
        assert!(HedOracle::load(&dir.path().join("missing.bin")).is_err());
    }
}
