//! Four-stage convolutional backbone, hierarchical fusion of stages 2 and 3,
//! and the attribute-classification branch built on block 4.
//!
//! Two profiles share one contract:
//!
//! * `resnet50`: torchvision-compatible ResNet-50 (bottleneck blocks with
//!   frozen batch-norm statistics). Parameter names follow the torchvision
//!   `state_dict` keys under a `backbone.` prefix so converted ImageNet weights
//!   can be loaded by name.
//! * `tinynet`: one stride-2 3x3 convolution plus ReLU per stage, default
//!   channels 16/32/64/128. A 64x64 input gives F2 = [32, 16, 16] and
//!   F3 = [64, 8, 8].

use ndarray::{concatenate, Array1, Array2, Array3, ArrayView3, Axis, Ix1, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AgmanError, Result};
use crate::ops::{self, ConvCache};
use crate::params::{Grads, Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneProfile {
    #[default]
    Tinynet,
    Resnet50,
}

impl BackboneProfile {
    pub fn default_input_size(self) -> usize {
        match self {
            BackboneProfile::Tinynet => 64,
            BackboneProfile::Resnet50 => 224,
        }
    }

    /// Output channels of stages 1 to 4.
    pub fn default_channels(self) -> [usize; 4] {
        match self {
            BackboneProfile::Tinynet => [16, 32, 64, 128],
            BackboneProfile::Resnet50 => [256, 512, 1024, 2048],
        }
    }

    pub fn default_embedding_size(self) -> usize {
        match self {
            BackboneProfile::Tinynet => 64,
            BackboneProfile::Resnet50 => 1024,
        }
    }

    pub fn default_asa_channels(self) -> usize {
        match self {
            BackboneProfile::Tinynet => 32,
            BackboneProfile::Resnet50 => 512,
        }
    }

    pub fn default_ca_reduction(self) -> usize {
        match self {
            BackboneProfile::Tinynet => 4,
            BackboneProfile::Resnet50 => 16,
        }
    }

    pub fn default_normalization(self) -> ([f64; 3], [f64; 3]) {
        match self {
            BackboneProfile::Tinynet => ([0.0; 3], [1.0; 3]),
            BackboneProfile::Resnet50 => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }
}

/// Which point of the network a [`FeatureMap`] was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    F2,
    F3,
    /// Projected F2 added to F3.
    Fused,
    /// Channel concatenation of the fused map and F3, the attention input.
    AttentionInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stage: Stage,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, stage: Stage) -> Self {
        Self { data, stage }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[out_c, in_c, kernel, kernel],
            Init::FanInUniform { fan_in },
            true,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_c], Init::Zeros, true, rng));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn in_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let w = store.get(self.weight).view().into_dimensionality::<Ix4>().expect("conv weight rank");
        let b = self
            .bias
            .map(|b| store.get(b).view().into_dimensionality::<Ix1>().expect("conv bias rank"));
        ops::conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn backward(&self, store: &ParamStore, cache: &ConvCache, dy: ArrayView3<f64>, grads: &mut Grads) -> Array3<f64> {
        let w = store.get(self.weight).view().into_dimensionality::<Ix4>().expect("conv weight rank");
        let (dx, dw, db) = ops::conv2d_backward(dy, cache, w);
        *grads.get_mut(self.weight) += &dw.into_dyn();
        if let Some(b) = self.bias {
            *grads.get_mut(b) += &db.into_dyn();
        }
        dx
    }
}

/// Batch normalization in inference form: running statistics are buffers,
/// only the affine scale and shift train.
#[derive(Clone, Debug)]
pub struct FrozenNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

const NORM_EPS: f64 = 1e-5;

impl FrozenNorm {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), &[c], Init::Ones, true, rng),
            beta: store.add(format!("{name}.bias"), &[c], Init::Zeros, true, rng),
            mean: store.add(format!("{name}.running_mean"), &[c], Init::Zeros, false, rng),
            var: store.add(format!("{name}.running_var"), &[c], Init::Ones, false, rng),
        }
    }

    fn vectors<'a>(&self, store: &'a ParamStore) -> [ndarray::ArrayView1<'a, f64>; 4] {
        [self.gamma, self.beta, self.mean, self.var]
            .map(|id| store.get(id).view().into_dimensionality::<Ix1>().expect("norm rank"))
    }

    fn forward(&self, store: &ParamStore, x: ArrayView3<f64>) -> Array3<f64> {
        let [g, b, m, v] = self.vectors(store);
        let mut y = x.to_owned();
        for (c, mut plane) in y.axis_iter_mut(Axis(0)).enumerate() {
            let scale = g[c] / (v[c] + NORM_EPS).sqrt();
            let shift = b[c] - m[c] * scale;
            plane.mapv_inplace(|t| t * scale + shift);
        }
        y
    }

    fn backward(&self, store: &ParamStore, x: &Array3<f64>, dy: ArrayView3<f64>, grads: &mut Grads) -> Array3<f64> {
        let [g, _, m, v] = self.vectors(store);
        let c = g.len();
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        let mut dx = dy.to_owned();
        for ch in 0..c {
            let inv = 1.0 / (v[ch] + NORM_EPS).sqrt();
            let dplane = dy.index_axis(Axis(0), ch);
            let xplane = x.index_axis(Axis(0), ch);
            dbeta[ch] = dplane.sum();
            dgamma[ch] = dplane
                .iter()
                .zip(xplane.iter())
                .map(|(d, xv)| d * (xv - m[ch]) * inv)
                .sum();
            dx.index_axis_mut(Axis(0), ch).mapv_inplace(|d| d * g[ch] * inv);
        }
        *grads.get_mut(self.gamma) += &dgamma.into_dyn();
        *grads.get_mut(self.beta) += &dbeta.into_dyn();
        dx
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    main: Sequential,
    shortcut: Option<Sequential>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv),
    Norm(FrozenNorm),
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    Bottleneck(Box<Bottleneck>),
}

#[derive(Clone, Debug)]
enum LayerCache {
    Conv(ConvCache),
    Norm(Array3<f64>),
    Relu(Array3<f64>),
    MaxPool { argmax: Vec<usize>, shape: (usize, usize, usize) },
    Bottleneck {
        main: Vec<LayerCache>,
        shortcut: Option<Vec<LayerCache>>,
        output: Array3<f64>,
    },
}

/// A chain of layers with a matching backward pass.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub struct SequentialCache(Vec<LayerCache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView3<f64>) -> (Array3<f64>, SequentialCache) {
        let (y, caches) = forward_layers(&self.layers, store, x);
        (y, SequentialCache(caches))
    }

    pub fn backward(&self, store: &ParamStore, cache: &SequentialCache, dy: Array3<f64>, grads: &mut Grads) -> Array3<f64> {
        backward_layers(&self.layers, store, &cache.0, dy, grads)
    }
}

fn forward_layers(layers: &[Layer], store: &ParamStore, x: ArrayView3<f64>) -> (Array3<f64>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.to_owned();
    for layer in layers {
        let (next, cache) = match layer {
            Layer::Conv(conv) => {
                let (y, c) = conv.forward(store, cur.view());
                (y, LayerCache::Conv(c))
            }
            Layer::Norm(norm) => {
                let y = norm.forward(store, cur.view());
                (y, LayerCache::Norm(cur))
            }
            Layer::Relu => {
                cur.mapv_inplace(|v| v.max(0.0));
                (cur.clone(), LayerCache::Relu(cur))
            }
            Layer::MaxPool { kernel, stride, pad } => {
                let shape = cur.dim();
                let (y, argmax) = ops::max_pool(cur.view(), *kernel, *stride, *pad);
                (y, LayerCache::MaxPool { argmax, shape })
            }
            Layer::Bottleneck(block) => {
                let (m, main) = forward_layers(&block.main.layers, store, cur.view());
                let (s, shortcut) = match &block.shortcut {
                    Some(sc) => {
                        let (s, c) = forward_layers(&sc.layers, store, cur.view());
                        (s, Some(c))
                    }
                    None => (cur, None),
                };
                let mut out = m + s;
                out.mapv_inplace(|v| v.max(0.0));
                (
                    out.clone(),
                    LayerCache::Bottleneck {
                        main,
                        shortcut,
                        output: out,
                    },
                )
            }
        };
        caches.push(cache);
        cur = next;
    }
    (cur, caches)
}

fn backward_layers(
    layers: &[Layer],
    store: &ParamStore,
    caches: &[LayerCache],
    dy: Array3<f64>,
    grads: &mut Grads,
) -> Array3<f64> {
    let mut grad = dy;
    for (layer, cache) in layers.iter().zip(caches).rev() {
        grad = match (layer, cache) {
            (Layer::Conv(conv), LayerCache::Conv(c)) => conv.backward(store, c, grad.view(), grads),
            (Layer::Norm(norm), LayerCache::Norm(x)) => norm.backward(store, x, grad.view(), grads),
            (Layer::Relu, LayerCache::Relu(out)) => {
                ndarray::Zip::from(&mut grad)
                    .and(out)
                    .for_each(|g, &o| {
                        if o <= 0.0 {
                            *g = 0.0
                        }
                    });
                grad
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax, shape }) => {
                ops::max_pool_backward(grad.view(), argmax, *shape)
            }
            (
                Layer::Bottleneck(block),
                LayerCache::Bottleneck {
                    main,
                    shortcut,
                    output,
                },
            ) => {
                ndarray::Zip::from(&mut grad)
                    .and(output)
                    .for_each(|g, &o| {
                        if o <= 0.0 {
                            *g = 0.0
                        }
                    });
                let dmain = backward_layers(&block.main.layers, store, main, grad.clone(), grads);
                let dshort = match (&block.shortcut, shortcut) {
                    (Some(sc), Some(c)) => backward_layers(&sc.layers, store, c, grad, grads),
                    _ => grad,
                };
                dmain + dshort
            }
            _ => unreachable!("layer/cache mismatch"),
        };
    }
    grad
}

/// Backbone stages 1 to 3. Block 4 lives in [`ClassificationHead`].
#[derive(Clone, Debug)]
pub struct Backbone {
    profile: BackboneProfile,
    input_size: usize,
    channels: [usize; 4],
    mean: [f64; 3],
    std: [f64; 3],
    stages: [Sequential; 3],
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    stages: Vec<SequentialCache>,
}

/// Declared shape of each stage output for a given profile and input size.
pub fn stage_dims(profile: BackboneProfile, input_size: usize, channels: [usize; 4]) -> [(usize, usize, usize); 4] {
    let conv_out = |s: usize, k: usize, stride: usize, pad: usize| (s + 2 * pad - k) / stride + 1;
    let mut dims = [(0, 0, 0); 4];
    match profile {
        BackboneProfile::Tinynet => {
            let mut s = input_size;
            for (i, d) in dims.iter_mut().enumerate() {
                s = conv_out(s, 3, 2, 1);
                *d = (channels[i], s, s);
            }
        }
        BackboneProfile::Resnet50 => {
            let mut s = conv_out(input_size, 7, 2, 3);
            s = conv_out(s, 3, 2, 1);
            dims[0] = (channels[0], s, s);
            for (i, d) in dims.iter_mut().enumerate().skip(1) {
                s = conv_out(s, 3, 2, 1);
                *d = (channels[i], s, s);
            }
        }
    }
    dims
}

const RESNET50_BLOCKS: [usize; 4] = [3, 4, 6, 3];

fn resnet_layer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    index: usize,
    in_c: usize,
    out_c: usize,
    stride: usize,
) -> Sequential {
    let width = out_c / 4;
    let mut blocks = Vec::new();
    let mut c = in_c;
    for b in 0..RESNET50_BLOCKS[index] {
        let name = format!("backbone.layer{}.{b}", index + 1);
        let s = if b == 0 { stride } else { 1 };
        let main = Sequential::new(vec![
            Layer::Conv(Conv::register(store, rng, &format!("{name}.conv1"), c, width, 1, 1, 0, false)),
            Layer::Norm(FrozenNorm::register(store, rng, &format!("{name}.bn1"), width)),
            Layer::Relu,
            Layer::Conv(Conv::register(store, rng, &format!("{name}.conv2"), width, width, 3, s, 1, false)),
            Layer::Norm(FrozenNorm::register(store, rng, &format!("{name}.bn2"), width)),
            Layer::Relu,
            Layer::Conv(Conv::register(store, rng, &format!("{name}.conv3"), width, out_c, 1, 1, 0, false)),
            Layer::Norm(FrozenNorm::register(store, rng, &format!("{name}.bn3"), out_c)),
        ]);
        let shortcut = (b == 0 && (s != 1 || c != out_c)).then(|| {
            Sequential::new(vec![
                Layer::Conv(Conv::register(store, rng, &format!("{name}.downsample.0"), c, out_c, 1, s, 0, false)),
                Layer::Norm(FrozenNorm::register(store, rng, &format!("{name}.downsample.1"), out_c)),
            ])
        });
        blocks.push(Layer::Bottleneck(Box::new(Bottleneck { main, shortcut })));
        c = out_c;
    }
    Sequential::new(blocks)
}

impl Backbone {
    /// Registers the backbone parameters and returns it together with block 4.
    pub fn build(
        profile: BackboneProfile,
        input_size: usize,
        channels: [usize; 4],
        normalization: ([f64; 3], [f64; 3]),
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, Sequential)> {
        if channels.contains(&0) {
            return Err(AgmanError::Config("backbone channels must be positive".into()));
        }
        let dims = stage_dims(profile, input_size, channels);
        if dims[1].1 != 2 * dims[2].1 || dims[2].1 == 0 {
            return Err(AgmanError::Config(format!(
                "input size {input_size} gives F2 {:?} and F3 {:?}; spatial sizes must differ by exactly 2",
                dims[1], dims[2]
            )));
        }
        let (stages, block4) = match profile {
            BackboneProfile::Tinynet => {
                let stage = |i: usize, in_c: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
                    Sequential::new(vec![
                        Layer::Conv(Conv::register(
                            store,
                            rng,
                            &format!("backbone.stage{}", i + 1),
                            in_c,
                            channels[i],
                            3,
                            2,
                            1,
                            true,
                        )),
                        Layer::Relu,
                    ])
                };
                let s1 = stage(0, 3, store, rng);
                let s2 = stage(1, channels[0], store, rng);
                let s3 = stage(2, channels[1], store, rng);
                let b4 = stage(3, channels[2], store, rng);
                ([s1, s2, s3], b4)
            }
            BackboneProfile::Resnet50 => {
                let mut stem = vec![
                    Layer::Conv(Conv::register(store, rng, "backbone.conv1", 3, 64, 7, 2, 3, false)),
                    Layer::Norm(FrozenNorm::register(store, rng, "backbone.bn1", 64)),
                    Layer::Relu,
                    Layer::MaxPool {
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    },
                ];
                stem.extend(resnet_layer(store, rng, 0, 64, channels[0], 1).layers);
                let s2 = resnet_layer(store, rng, 1, channels[0], channels[1], 2);
                let s3 = resnet_layer(store, rng, 2, channels[1], channels[2], 2);
                let b4 = resnet_layer(store, rng, 3, channels[2], channels[3], 2);
                ([Sequential::new(stem), s2, s3], b4)
            }
        };
        let (mean, std) = normalization;
        if std.iter().any(|s| *s <= 0.0) {
            return Err(AgmanError::Config("normalization std must be positive".into()));
        }
        Ok((
            Self {
                profile,
                input_size,
                channels,
                mean,
                std,
                stages,
            },
            block4,
        ))
    }

    pub fn profile(&self) -> BackboneProfile {
        self.profile
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn stage_dims(&self) -> [(usize, usize, usize); 4] {
        stage_dims(self.profile, self.input_size, self.channels)
    }

    fn check_image(&self, image: ArrayView3<f64>) -> Result<()> {
        let expected = (3, self.input_size, self.input_size);
        if image.dim() != expected {
            return Err(AgmanError::Argument(format!(
                "image shape {:?} does not match the configured input {:?}",
                image.dim(),
                expected
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(AgmanError::Argument("image contains non-finite values".into()));
        }
        Ok(())
    }

    /// Runs stages 1 to 3 and returns `(F2, F3)`.
    pub fn extract_stages(&self, store: &ParamStore, image: ArrayView3<f64>) -> Result<(FeatureMap, FeatureMap)> {
        let (f2, f3, _) = self.forward(store, image)?;
        Ok((f2, f3))
    }

    pub fn forward(&self, store: &ParamStore, image: ArrayView3<f64>) -> Result<(FeatureMap, FeatureMap, BackboneCache)> {
        self.check_image(image)?;
        let mut x = image.to_owned();
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        let (f1, c1) = self.stages[0].forward(store, x.view());
        let (f2, c2) = self.stages[1].forward(store, f1.view());
        let (f3, c3) = self.stages[2].forward(store, f2.view());
        Ok((
            FeatureMap::new(f2, Stage::F2),
            FeatureMap::new(f3, Stage::F3),
            BackboneCache {
                stages: vec![c1, c2, c3],
            },
        ))
    }

    /// Accumulates parameter gradients given the gradients reaching F2 and F3.
    pub fn backward(&self, store: &ParamStore, cache: &BackboneCache, d_f2: Array3<f64>, d_f3: Array3<f64>, grads: &mut Grads) {
        let d2_from3 = self.stages[2].backward(store, &cache.stages[2], d_f3, grads);
        let d_f2 = d_f2 + d2_from3;
        let d_f1 = self.stages[1].backward(store, &cache.stages[1], d_f2, grads);
        self.stages[0].backward(store, &cache.stages[0], d_f1, grads);
    }
}

/// Learned 1x1 projection of F2 to F3's channel count, followed by 2x2
/// average pooling, so the two maps can be added.
#[derive(Clone, Debug)]
pub struct Fusion {
    projection: Conv,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    conv: ConvCache,
    f2_hw: (usize, usize),
}

impl Fusion {
    pub fn build(c2: usize, c3: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        Self {
            projection: Conv::register(store, rng, "fusion.projection", c2, c3, 1, 1, 0, true),
        }
    }

    pub fn projection(&self) -> &Conv {
        &self.projection
    }

    /// Returns `(F23, f_I)` with `F23 = pool(proj(F2)) + F3` and
    /// `f_I = [F23; F3]` along channels.
    pub fn fuse_hierarchical(
        &self,
        store: &ParamStore,
        f2: &FeatureMap,
        f3: &FeatureMap,
    ) -> Result<(FeatureMap, FeatureMap, FusionCache)> {
        let (c2, h2, w2) = f2.dim();
        let (c3, h3, w3) = f3.dim();
        let proj_in = self.projection.in_channels(store);
        let proj_out = store.get(self.projection.weight).shape()[0];
        if c2 != proj_in || c3 != proj_out || h2 / 2 != h3 || w2 / 2 != w3 {
            return Err(AgmanError::Argument(format!(
                "cannot fuse F2 {:?} with F3 {:?} through a {proj_in}->{proj_out} projection",
                f2.dim(),
                f3.dim()
            )));
        }
        let (projected, conv) = self.projection.forward(store, f2.data.view());
        let fused = ops::avg_pool2(projected.view()) + &f3.data;
        let attention_input = concatenate(Axis(0), &[fused.view(), f3.data.view()]).expect("same spatial dims");
        Ok((
            FeatureMap::new(fused, Stage::Fused),
            FeatureMap::new(attention_input, Stage::AttentionInput),
            FusionCache { conv, f2_hw: (h2, w2) },
        ))
    }

    /// Maps the gradient w.r.t. the fused map onto `(dF2, dF3)`.
    pub fn backward(&self, store: &ParamStore, cache: &FusionCache, d_fused: &Array3<f64>, grads: &mut Grads) -> (Array3<f64>, Array3<f64>) {
        let d_projected = ops::avg_pool2_backward(d_fused.view(), cache.f2_hw.0, cache.f2_hw.1);
        let d_f2 = self.projection.backward(store, &cache.conv, d_projected.view(), grads);
        (d_f2, d_fused.clone())
    }
}

/// Block 4, global average pooling and a fully connected layer producing one
/// logit per attribute.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    block4: Sequential,
    fc_weight: ParamId,
    fc_bias: ParamId,
    in_channels: usize,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    block4: SequentialCache,
    pooled: Array1<f64>,
    hw: (usize, usize),
}

impl ClassificationHead {
    pub fn build(block4: Sequential, in_channels: usize, c4: usize, n: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        Self {
            block4,
            fc_weight: store.add("head.fc.weight", &[n, c4], Init::FanInUniform { fan_in: c4 }, true, rng),
            fc_bias: store.add("head.fc.bias", &[n], Init::Zeros, true, rng),
            in_channels,
        }
    }

    pub fn fc_weight(&self) -> ParamId {
        self.fc_weight
    }

    pub fn fc_bias(&self) -> ParamId {
        self.fc_bias
    }

    /// Attribute logits for a fused feature map.
    pub fn classify_attributes(&self, store: &ParamStore, fused: &FeatureMap) -> Result<Array1<f64>> {
        Ok(self.forward(store, fused)?.0)
    }

    pub fn forward(&self, store: &ParamStore, fused: &FeatureMap) -> Result<(Array1<f64>, HeadCache)> {
        let (c, _, _) = fused.dim();
        if c != self.in_channels {
            return Err(AgmanError::Argument(format!(
                "classification head expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (b4, block4) = self.block4.forward(store, fused.data.view());
        let (_, h, w) = b4.dim();
        let pooled = ops::global_avg_pool(b4.view());
        let wmat = store.get(self.fc_weight).view().into_dimensionality::<Ix2>().expect("fc rank");
        let bias = store.get(self.fc_bias).view().into_dimensionality::<Ix1>().expect("fc rank");
        let logits = wmat.dot(&pooled) + bias;
        Ok((logits, HeadCache { block4, pooled, hw: (h, w) }))
    }

    /// Returns the gradient w.r.t. the fused map.
    pub fn backward(&self, store: &ParamStore, cache: &HeadCache, d_logits: &Array1<f64>, grads: &mut Grads) -> Array3<f64> {
        let wmat = store.get(self.fc_weight).view().into_dimensionality::<Ix2>().expect("fc rank");
        let dw: Array2<f64> = d_logits
            .view()
            .insert_axis(Axis(1))
            .dot(&cache.pooled.view().insert_axis(Axis(0)));
        *grads.get_mut(self.fc_weight) += &dw.into_dyn();
        *grads.get_mut(self.fc_bias) += &d_logits.clone().into_dyn();
        let d_pooled = wmat.t().dot(d_logits);
        let d_b4 = ops::global_avg_pool_backward(d_pooled.view(), cache.hw.0, cache.hw.1);
        self.block4.backward(store, &cache.block4, d_b4, grads)
    }
}
