//! Shared backbone, projection head and their momentum copies.

use edgebridge_tensor::{Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, images_to_tensor, Cursor};

/// Normalization guard added to the norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneArch {
    /// Residual CNN: a stem conv then one basic block per stage; every stage
    /// after the first halves resolution. Feature dim is the last width.
    Resnet {
        widths: Vec<usize>,
        stem_stride: usize,
        groups: usize,
    },
    /// Plain conv / group-norm / ReLU stack, stride 2 after the first layer.
    Conv { widths: Vec<usize>, groups: usize },
    /// Flatten then one bias-free linear map. Used for tests and probes.
    Linear { input: [usize; 3], dim: usize },
}

impl BackboneArch {
    pub fn desk() -> Self {
        BackboneArch::Resnet {
            widths: vec![16, 32, 64, 128],
            stem_stride: 2,
            groups: 8,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneArch::Resnet { widths, .. } | BackboneArch::Conv { widths, .. } => *widths.last().expect("non-empty widths"),
            BackboneArch::Linear { dim, .. } => *dim,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            BackboneArch::Resnet { widths, .. } => format!("resnet-{}", join(widths)),
            BackboneArch::Conv { widths, .. } => format!("conv-{}", join(widths)),
            BackboneArch::Linear { input, dim } => format!("linear-{}x{}x{}-{dim}", input[0], input[1], input[2]),
        }
    }

    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        match self {
            BackboneArch::Resnet { widths, .. } => {
                nn::push_conv(&mut ps, "stem", widths[0], 3, 3, false, rng);
                nn::push_norm(&mut ps, "stem.gn", widths[0]);
                let mut inp = widths[0];
                for (s, &w) in widths.iter().enumerate() {
                    let stride = if s == 0 { 1 } else { 2 };
                    nn::push_conv(&mut ps, &format!("b{s}.conv1"), w, inp, 3, false, rng);
                    nn::push_norm(&mut ps, &format!("b{s}.gn1"), w);
                    nn::push_conv(&mut ps, &format!("b{s}.conv2"), w, w, 3, false, rng);
                    nn::push_norm(&mut ps, &format!("b{s}.gn2"), w);
                    if stride != 1 || inp != w {
                        nn::push_conv(&mut ps, &format!("b{s}.down"), w, inp, 1, false, rng);
                        nn::push_norm(&mut ps, &format!("b{s}.down.gn"), w);
                    }
                    inp = w;
                }
            }
            BackboneArch::Conv { widths, .. } => {
                let mut inp = 3;
                for (i, &w) in widths.iter().enumerate() {
                    nn::push_conv(&mut ps, &format!("c{i}"), w, inp, 3, false, rng);
                    nn::push_norm(&mut ps, &format!("c{i}.gn"), w);
                    inp = w;
                }
            }
            BackboneArch::Linear { input, dim } => {
                nn::push_linear(&mut ps, "fc", *dim, input.iter().product(), false, rng);
            }
        }
        ps
    }

    /// Features `[n, d]` for NCHW input.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s[1] != 3 {
            return Err(Error::ChannelCount { expected: 3, got: s[1] });
        }
        let mut cur = Cursor::new(p);
        let out = match self {
            BackboneArch::Resnet {
                widths,
                stem_stride,
                groups,
            } => {
                let y = nn::conv(g, &mut cur, x, *stem_stride, 1, false);
                let y = nn::norm(g, &mut cur, y, nn::groups_for(widths[0], *groups));
                let mut h = g.relu(y);
                let mut inp = widths[0];
                for (si, &w) in widths.iter().enumerate() {
                    let stride = if si == 0 { 1 } else { 2 };
                    let gr = nn::groups_for(w, *groups);
                    let y = nn::conv(g, &mut cur, h, stride, 1, false);
                    let y = nn::norm(g, &mut cur, y, gr);
                    let y = g.relu(y);
                    let y = nn::conv(g, &mut cur, y, 1, 1, false);
                    let y = nn::norm(g, &mut cur, y, gr);
                    let short = if stride != 1 || inp != w {
                        let d = nn::conv(g, &mut cur, h, stride, 0, false);
                        nn::norm(g, &mut cur, d, gr)
                    } else {
                        h
                    };
                    let sum = g.add(y, short);
                    h = g.relu(sum);
                    inp = w;
                }
                g.global_avg_pool(h)
            }
            BackboneArch::Conv { widths, groups } => {
                let mut h = x;
                for (i, &w) in widths.iter().enumerate() {
                    let stride = if i == 0 { 1 } else { 2 };
                    let y = nn::conv(g, &mut cur, h, stride, 1, false);
                    let y = nn::norm(g, &mut cur, y, nn::groups_for(w, *groups));
                    h = g.relu(y);
                }
                g.global_avg_pool(h)
            }
            BackboneArch::Linear { input, .. } => {
                if s[1..] != input[..] {
                    return Err(Error::InvalidArgument(format!("linear backbone expects {input:?}, got {:?}", &s[1..])));
                }
                let flat = g.reshape(x, &[s[0], input.iter().product()]);
                nn::linear(g, &mut cur, flat, false)
            }
        };
        cur.finish();
        Ok(out)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
}

/// Two-layer MLP `d -> hidden -> p` with ReLU, then row L2 normalization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorArch {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub bias: bool,
}

impl ProjectorArch {
    pub fn init<T: Float>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut ps = ParamSet::new();
        nn::push_linear(&mut ps, "fc1", self.hidden, self.input, self.bias, rng);
        nn::push_linear(&mut ps, "fc2", self.output, self.hidden, self.bias, rng);
        ps
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, f: Var) -> Var {
        let mut cur = Cursor::new(p);
        let h = nn::linear(g, &mut cur, f, self.bias);
        let h = g.relu(h);
        let z = nn::linear(g, &mut cur, h, self.bias);
        cur.finish();
        g.l2_normalize_rows(z, T::of(NORM_EPS))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: BackboneArch,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub proj_bias: bool,
}

impl EncoderConfig {
    pub fn projector(&self) -> ProjectorArch {
        ProjectorArch {
            input: self.backbone.feature_dim(),
            hidden: self.proj_hidden,
            output: self.proj_dim,
            bias: self.proj_bias,
        }
    }
}

/// Online `B`, `P` and their EMA copies `B^m`, `P^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState<T> {
    pub config: EncoderConfig,
    pub backbone: ParamSet<T>,
    pub projector: ParamSet<T>,
    pub momentum_backbone: ParamSet<T>,
    pub momentum_projector: ParamSet<T>,
}

impl<T: Float> EncoderState<T> {
    /// Fresh online weights; momentum copies start equal to them.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let backbone = config.backbone.init(rng);
        let projector = config.projector().init(rng);
        Self {
            momentum_backbone: backbone.clone(),
            momentum_projector: projector.clone(),
            backbone,
            projector,
            config,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.backbone.feature_dim()
    }

    pub fn cast<U: Float>(&self) -> EncoderState<U> {
        EncoderState {
            config: self.config.clone(),
            backbone: self.backbone.cast(),
            projector: self.projector.cast(),
            momentum_backbone: self.momentum_backbone.cast(),
            momentum_projector: self.momentum_projector.cast(),
        }
    }

    /// `θ^m <- m θ^m + (1 - m) θ` for backbone and projector.
    pub fn ema_update(&mut self, m: f64) {
        assert!((0.0..=1.0).contains(&m), "EMA momentum {m} outside [0, 1]");
        self.momentum_backbone.ema_toward(&self.backbone, T::of(m));
        self.momentum_projector.ema_toward(&self.projector, T::of(m));
    }
}

/// Backbone features for a batch, as rows of a `[n, d]` tensor.
pub fn encode<T: Float>(arch: &BackboneArch, backbone: &ParamSet<T>, images: &[&Image]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Ok(Tensor::zeros(&[0, arch.feature_dim()]));
    }
    let mut g = Graph::new();
    let p = backbone.bind(&mut g, false);
    let x = g.constant(images_to_tensor(images));
    let f = arch.forward(&mut g, &p, x)?;
    Ok(g.value(f).clone())
}

/// Encodes in chunks to bound peak memory.
pub fn encode_all(arch: &BackboneArch, backbone: &ParamSet<f32>, images: &[&Image], chunk: usize) -> Result<Tensor<f32>> {
    let d = arch.feature_dim();
    let mut data = Vec::with_capacity(images.len() * d);
    for part in images.chunks(chunk.max(1)) {
        data.extend_from_slice(encode(arch, backbone, part)?.data());
    }
    Ok(Tensor::new(&[images.len(), d], data))
}

/// Unit-norm embeddings `[n, p]` from features `[n, d]`.
pub fn project<T: Float>(arch: &ProjectorArch, projector: &ParamSet<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.dim(1) != arch.input {
        return Err(Error::InvalidArgument(format!(
            "projector expects [n, {}] features, got {:?}",
            arch.input,
            features.shape()
        )));
    }
    let mut g = Graph::new();
    let p = projector.bind(&mut g, false);
    let f = g.constant(features.clone());
    let z = arch.forward(&mut g, &p, f);
    Ok(g.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn linear_cfg(dim: usize, p: usize) -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneArch::Linear { input: [3, 4, 4], dim },
            proj_hidden: 8,
            proj_dim: p,
            proj_bias: false,
        }
    }

    #[test]
    fn zero_image_through_zeroed_linear_stub() {
        let arch = BackboneArch::Linear { input: [3, 4, 4], dim: 5 };
        let ps: ParamSet<f64> = arch.init(&mut rng::stream(&[0])).map(|_| 0.0);
        let f = encode(&arch, &ps, &[&Image::filled(3, 4, 4, 0.0)]).unwrap();
        assert_eq!(f.data(), &[0.0; 5]);
    }

    #[test]
    fn resnet_shapes_and_determinism() {
        let arch = BackboneArch::desk();
        let ps: ParamSet<f32> = arch.init(&mut rng::stream(&[1]));
        let imgs: Vec<Image> = (0..4).map(|i| Image::filled(3, 16, 16, 0.1 * i as f32)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let a = encode(&arch, &ps, &refs).unwrap();
        assert_eq!(a.shape(), &[4, 128]);
        assert_eq!(a, encode(&arch, &ps, &refs).unwrap());
    }

    #[test]
    fn wrong_channel_count() {
        let arch = BackboneArch::desk();
        let ps: ParamSet<f32> = arch.init(&mut rng::stream(&[1]));
        assert!(matches!(
            encode(&arch, &ps, &[&Image::filled(1, 8, 8, 0.0)]),
            Err(Error::ChannelCount { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn projection_is_unit_norm_and_scale_invariant() {
        let cfg = linear_cfg(6, 128);
        let st: EncoderState<f64> = EncoderState::new(cfg.clone(), &mut rng::stream(&[2]));
        let mut r = rng::stream(&[3]);
        let f = Tensor::from_fn(&[5, 6], |_| r.random_range(-1.0..1.0));
        let z = project(&cfg.projector(), &st.projector, &f).unwrap();
        assert_eq!(z.shape(), &[5, 128]);
        for i in 0..5 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let z10 = project(&cfg.projector(), &st.projector, &f.map(|v| 10.0 * v)).unwrap();
        for (a, b) in z.data().iter().zip(z10.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_feature_does_not_produce_nan() {
        let cfg = linear_cfg(6, 4);
        let st: EncoderState<f64> = EncoderState::new(cfg.clone(), &mut rng::stream(&[2]));
        let z = project(&cfg.projector(), &st.projector, &Tensor::zeros(&[1, 6])).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn ema_fixed_points_and_convex_step() {
        let cfg = linear_cfg(2, 2);
        let mut st: EncoderState<f64> = EncoderState::new(cfg, &mut rng::stream(&[4]));
        st.backbone = st.backbone.map(|_| 2.0);
        st.momentum_backbone = st.momentum_backbone.map(|_| 4.0);
        let before = st.momentum_backbone.clone();
        st.ema_update(1.0);
        assert_eq!(st.momentum_backbone, before);
        st.ema_update(0.5);
        assert!(st.momentum_backbone.tensors()[0].data().iter().all(|&v| v == 3.0));
        st.ema_update(0.0);
        assert_eq!(st.momentum_backbone, st.backbone);
    }
}
