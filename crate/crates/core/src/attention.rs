//! Attribute-guided attention: attribute-guided spatial attention (ASA),
//! spatial attention (SA), attribute-guided channel attention (ACA) and
//! channel attention (CA), applied in that order to the fused backbone map.
//!
//! Each stage is a pure function of a `[c, h, w]` map and borrowed weight
//! views, with a matching backward function. [`Aga`] wires the stages to the
//! parameter store and adds the input projection and the final pooling.

use ndarray::{concatenate, s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix4};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Conv;
use crate::error::{AgmanError, Result};
use crate::ops::{self, sigmoid, ConvCache};
use crate::params::{Grads, Init, ParamId, ParamStore};

/// `sigma(z) * z`, the self-gated attribute transform.
fn self_gate(z: f64) -> f64 {
    sigmoid(z) * z
}

fn self_gate_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

fn check_one_hot(a: &[f64], n: usize) -> Result<()> {
    let ones = a.iter().filter(|&&v| v == 1.0).count();
    let zeros = a.iter().filter(|&&v| v == 0.0).count();
    if a.len() != n || ones != 1 || ones + zeros != n {
        return Err(AgmanError::Argument(format!(
            "attribute vector must be one-hot of length {n}, got {a:?}"
        )));
    }
    Ok(())
}

fn flatten(f: ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = f.dim();
    f.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous map")
}

fn unflatten(x: Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = x.nrows();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("contiguous map")
}

fn outer(a: &Array1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.view().insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

// ---------------------------------------------------------------------------
// ASA

pub struct AsaWeights<'a> {
    /// `[c', c]` 1x1 convolution producing p(I) before tanh.
    pub conv_weight: ArrayView2<'a, f64>,
    pub conv_bias: ArrayView1<'a, f64>,
    /// `W_a`, `[c', n]`.
    pub attr_transform: ArrayView2<'a, f64>,
    /// `W_1`, a spatial gain `[h, w]`.
    pub spatial_gain: ArrayView2<'a, f64>,
}

#[derive(Clone, Debug)]
pub struct AsaCache {
    x: Array2<f64>,
    u: Array2<f64>,
    e: Array1<f64>,
    p: Array1<f64>,
    attn: Vec<f64>,
    a: Array1<f64>,
    hw: (usize, usize),
}

pub struct AsaGrads {
    pub conv_weight: Array2<f64>,
    pub conv_bias: Array1<f64>,
    pub attr_transform: Array2<f64>,
    pub spatial_gain: Array2<f64>,
}

/// Returns the attended map, the `[h, w]` softmax map and the backward cache.
///
/// `p(I) = tanh(conv(f))`, `p(a) = sigma(W_a a) * W_a a` replicated at every
/// position, softmax over positions of the per-position inner products,
/// scaled elementwise by `W_1` and broadcast over channels onto `f`.
pub fn attribute_spatial_attention(
    f: ArrayView3<f64>,
    a: &[f64],
    w: &AsaWeights<'_>,
) -> Result<(Array3<f64>, Array2<f64>, AsaCache)> {
    let (c, h, wd) = f.dim();
    let (cp, n) = w.attr_transform.dim();
    check_one_hot(a, n)?;
    if w.conv_weight.dim() != (cp, c) || w.conv_bias.len() != cp || w.spatial_gain.dim() != (h, wd) {
        return Err(AgmanError::Argument(format!(
            "ASA weights do not match a [{c}, {h}, {wd}] map with c' = {cp}"
        )));
    }
    let x = flatten(f);
    let mut u = w.conv_weight.dot(&x) + &w.conv_bias.insert_axis(Axis(1));
    u.mapv_inplace(f64::tanh);
    let a = Array1::from_vec(a.to_vec());
    let e = w.attr_transform.dot(&a);
    let p = e.mapv(self_gate);
    let scores = p.dot(&u);
    let attn = ops::softmax(scores.as_slice().expect("contiguous"));
    let gain = w.spatial_gain.iter();
    let gate: Array1<f64> = attn.iter().zip(gain).map(|(s, g)| s * g).collect();
    let y = &x * &gate.view().insert_axis(Axis(0));
    let map = Array2::from_shape_vec((h, wd), attn.clone()).expect("h*w entries");
    Ok((
        unflatten(y, h, wd),
        map,
        AsaCache {
            x,
            u,
            e,
            p,
            attn,
            a,
            hw: (h, wd),
        },
    ))
}

pub fn attribute_spatial_attention_backward(
    dy: ArrayView3<f64>,
    cache: &AsaCache,
    w: &AsaWeights<'_>,
) -> (Array3<f64>, AsaGrads) {
    let (h, wd) = cache.hw;
    let dy = flatten(dy);
    let gain: Vec<f64> = w.spatial_gain.iter().copied().collect();
    let hw = h * wd;
    let mut dx = dy.clone();
    let mut d_gate = vec![0.0; hw];
    for k in 0..hw {
        let g = cache.attn[k] * gain[k];
        let mut acc = 0.0;
        for ch in 0..dy.nrows() {
            acc += dy[[ch, k]] * cache.x[[ch, k]];
            dx[[ch, k]] *= g;
        }
        d_gate[k] = acc;
    }
    let d_gain: Vec<f64> = (0..hw).map(|k| d_gate[k] * cache.attn[k]).collect();
    let d_attn: Vec<f64> = (0..hw).map(|k| d_gate[k] * gain[k]).collect();
    let d_scores = Array1::from_vec(ops::softmax_backward(&cache.attn, &d_attn));
    // scores = p^T u
    let d_u = outer(&cache.p, d_scores.view());
    let d_p = cache.u.dot(&d_scores);
    let d_e = &d_p * &cache.e.mapv(self_gate_grad);
    let d_attr = outer(&d_e, cache.a.view());
    let d_pre = &d_u * &cache.u.mapv(|t| 1.0 - t * t);
    let d_conv_w = d_pre.dot(&cache.x.t());
    let d_conv_b = d_pre.sum_axis(Axis(1));
    dx += &w.conv_weight.t().dot(&d_pre);
    (
        unflatten(dx, h, wd),
        AsaGrads {
            conv_weight: d_conv_w,
            conv_bias: d_conv_b,
            attr_transform: d_attr,
            spatial_gain: Array2::from_shape_vec((h, wd), d_gain).expect("h*w entries"),
        },
    )
}

// ---------------------------------------------------------------------------
// SA

pub struct SaWeights<'a> {
    /// Weights of the 1x1 convolution over `[avg, max]`.
    pub conv_weight: ArrayView1<'a, f64>,
    pub conv_bias: f64,
}

#[derive(Clone, Debug)]
pub struct SaCache {
    x: Array2<f64>,
    avg: Vec<f64>,
    max: Vec<f64>,
    argmax: Vec<usize>,
    gate: Vec<f64>,
    hw: (usize, usize),
}

pub struct SaGrads {
    pub conv_weight: Array1<f64>,
    pub conv_bias: f64,
}

/// Channel-wise average and max maps, a 1x1 convolution to one channel, a
/// sigmoid gate broadcast over channels. Returns the gated map and the gate.
pub fn spatial_attention(f: ArrayView3<f64>, w: &SaWeights<'_>) -> Result<(Array3<f64>, Array2<f64>, SaCache)> {
    let (c, h, wd) = f.dim();
    if w.conv_weight.len() != 2 {
        return Err(AgmanError::Argument("SA convolution needs exactly 2 input weights".into()));
    }
    let x = flatten(f);
    let hw = h * wd;
    let mut avg = vec![0.0; hw];
    let mut max = vec![f64::NEG_INFINITY; hw];
    let mut argmax = vec![0; hw];
    for ch in 0..c {
        for k in 0..hw {
            let v = x[[ch, k]];
            avg[k] += v / c as f64;
            if v > max[k] {
                max[k] = v;
                argmax[k] = ch;
            }
        }
    }
    let gate: Vec<f64> = (0..hw)
        .map(|k| sigmoid(w.conv_weight[0] * avg[k] + w.conv_weight[1] * max[k] + w.conv_bias))
        .collect();
    let gate_row = Array1::from_vec(gate.clone());
    let y = &x * &gate_row.view().insert_axis(Axis(0));
    Ok((
        unflatten(y, h, wd),
        gate_row.into_shape_with_order((h, wd)).expect("h*w entries"),
        SaCache {
            x,
            avg,
            max,
            argmax,
            gate,
            hw: (h, wd),
        },
    ))
}

pub fn spatial_attention_backward(dy: ArrayView3<f64>, cache: &SaCache, w: &SaWeights<'_>) -> (Array3<f64>, SaGrads) {
    let (h, wd) = cache.hw;
    let dy = flatten(dy);
    let c = dy.nrows();
    let mut dx = dy.clone();
    let mut dw = Array1::zeros(2);
    let mut db = 0.0;
    for k in 0..h * wd {
        let g = cache.gate[k];
        let mut d_gate = 0.0;
        for ch in 0..c {
            d_gate += dy[[ch, k]] * cache.x[[ch, k]];
            dx[[ch, k]] *= g;
        }
        let dt = d_gate * g * (1.0 - g);
        dw[0] += dt * cache.avg[k];
        dw[1] += dt * cache.max[k];
        db += dt;
        for ch in 0..c {
            dx[[ch, k]] += dt * w.conv_weight[0] / c as f64;
        }
        dx[[cache.argmax[k], k]] += dt * w.conv_weight[1];
    }
    (
        unflatten(dx, h, wd),
        SaGrads {
            conv_weight: dw,
            conv_bias: db,
        },
    )
}

// ---------------------------------------------------------------------------
// ACA

pub struct AcaWeights<'a> {
    /// `W_a'`, `[c, n]`.
    pub attr_transform: ArrayView2<'a, f64>,
    /// `W_c1`, `[hidden, 2c]` applied to `[q(a); pooled]`.
    pub fc1_weight: ArrayView2<'a, f64>,
    pub fc1_bias: ArrayView1<'a, f64>,
    /// `W_c2`, `[c, hidden]`.
    pub fc2_weight: ArrayView2<'a, f64>,
    pub fc2_bias: ArrayView1<'a, f64>,
    /// `W_2`, a per-channel gain `[c]`.
    pub channel_gain: ArrayView1<'a, f64>,
}

#[derive(Clone, Debug)]
pub struct AcaCache {
    x: Array2<f64>,
    a: Array1<f64>,
    e: Array1<f64>,
    joint: Array1<f64>,
    hidden: Array1<f64>,
    gate: Array1<f64>,
    hw: (usize, usize),
}

pub struct AcaGrads {
    pub attr_transform: Array2<f64>,
    pub fc1_weight: Array2<f64>,
    pub fc1_bias: Array1<f64>,
    pub fc2_weight: Array2<f64>,
    pub fc2_bias: Array1<f64>,
    pub channel_gain: Array1<f64>,
}

/// `q(a) = sigma(W_a' a) * W_a' a` is concatenated with the globally pooled
/// map, passed through `W_c1 -> ReLU -> W_c2 -> sigmoid`, and the resulting
/// gate times `W_2` scales each channel. Returns the map and the gate.
pub fn attribute_channel_attention(
    f: ArrayView3<f64>,
    a: &[f64],
    w: &AcaWeights<'_>,
) -> Result<(Array3<f64>, Array1<f64>, AcaCache)> {
    let (c, h, wd) = f.dim();
    let (ca, n) = w.attr_transform.dim();
    check_one_hot(a, n)?;
    let hidden = w.fc1_weight.nrows();
    if ca != c
        || w.fc1_weight.ncols() != 2 * c
        || w.fc1_bias.len() != hidden
        || w.fc2_weight.dim() != (c, hidden)
        || w.fc2_bias.len() != c
        || w.channel_gain.len() != c
    {
        return Err(AgmanError::Argument(format!(
            "ACA weights do not match a map with {c} channels"
        )));
    }
    let x = flatten(f);
    let a = Array1::from_vec(a.to_vec());
    let e = w.attr_transform.dot(&a);
    let q = e.mapv(self_gate);
    let pooled = x.mean_axis(Axis(1)).expect("non-empty map");
    let joint = concatenate(Axis(0), &[q.view(), pooled.view()]).expect("1-d concat");
    let hidden_pre = w.fc1_weight.dot(&joint) + w.fc1_bias;
    let hidden_act = hidden_pre.mapv(|v| v.max(0.0));
    let gate = (w.fc2_weight.dot(&hidden_act) + w.fc2_bias).mapv(sigmoid);
    let scale = &gate * &w.channel_gain;
    let y = &x * &scale.view().insert_axis(Axis(1));
    Ok((
        unflatten(y, h, wd),
        gate.clone(),
        AcaCache {
            x,
            a,
            e,
            joint,
            hidden: hidden_act,
            gate,
            hw: (h, wd),
        },
    ))
}

pub fn attribute_channel_attention_backward(
    dy: ArrayView3<f64>,
    cache: &AcaCache,
    w: &AcaWeights<'_>,
) -> (Array3<f64>, AcaGrads) {
    let (h, wd) = cache.hw;
    let dy = flatten(dy);
    let c = dy.nrows();
    let scale = &cache.gate * &w.channel_gain;
    let d_scale = (&dy * &cache.x).sum_axis(Axis(1));
    let mut dx = &dy * &scale.view().insert_axis(Axis(1));
    let d_gain = &d_scale * &cache.gate;
    let d_gate = &d_scale * &w.channel_gain;
    let d_h2 = &d_gate * &cache.gate.mapv(|g| g * (1.0 - g));
    let d_fc2 = outer(&d_h2, cache.hidden.view());
    let d_hidden = w.fc2_weight.t().dot(&d_h2) * cache.hidden.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_fc1 = outer(&d_hidden, cache.joint.view());
    let d_joint = w.fc1_weight.t().dot(&d_hidden);
    let d_q = d_joint.slice(s![..c]).to_owned();
    let d_pooled = d_joint.slice(s![c..]).to_owned();
    let area = (h * wd) as f64;
    dx += &(d_pooled / area).insert_axis(Axis(1));
    let d_e = d_q * cache.e.mapv(self_gate_grad);
    (
        unflatten(dx, h, wd),
        AcaGrads {
            attr_transform: outer(&d_e, cache.a.view()),
            fc1_weight: d_fc1,
            fc1_bias: d_hidden,
            fc2_weight: d_fc2,
            fc2_bias: d_h2,
            channel_gain: d_gain,
        },
    )
}

// ---------------------------------------------------------------------------
// CA

pub struct CaWeights<'a> {
    /// Reduction `[c / r, c]`.
    pub reduce_weight: ArrayView2<'a, f64>,
    pub reduce_bias: ArrayView1<'a, f64>,
    /// Expansion `[c, c / r]`.
    pub expand_weight: ArrayView2<'a, f64>,
    pub expand_bias: ArrayView1<'a, f64>,
}

#[derive(Clone, Debug)]
pub struct CaCache {
    x: Array2<f64>,
    pooled: Array1<f64>,
    hidden: Array1<f64>,
    gate: Array1<f64>,
    hw: (usize, usize),
}

pub struct CaGrads {
    pub reduce_weight: Array2<f64>,
    pub reduce_bias: Array1<f64>,
    pub expand_weight: Array2<f64>,
    pub expand_bias: Array1<f64>,
}

/// Squeeze-and-excitation gate: pool, reduce, ReLU, expand, sigmoid.
pub fn channel_attention(f: ArrayView3<f64>, w: &CaWeights<'_>) -> Result<(Array3<f64>, Array1<f64>, CaCache)> {
    let (c, h, wd) = f.dim();
    let r = w.reduce_weight.nrows();
    if w.reduce_weight.ncols() != c || w.reduce_bias.len() != r || w.expand_weight.dim() != (c, r) || w.expand_bias.len() != c {
        return Err(AgmanError::Argument(format!(
            "CA weights do not match a map with {c} channels"
        )));
    }
    let x = flatten(f);
    let pooled = x.mean_axis(Axis(1)).expect("non-empty map");
    let hidden = (w.reduce_weight.dot(&pooled) + w.reduce_bias).mapv(|v| v.max(0.0));
    let gate = (w.expand_weight.dot(&hidden) + w.expand_bias).mapv(sigmoid);
    let y = &x * &gate.view().insert_axis(Axis(1));
    Ok((
        unflatten(y, h, wd),
        gate.clone(),
        CaCache {
            x,
            pooled,
            hidden,
            gate,
            hw: (h, wd),
        },
    ))
}

pub fn channel_attention_backward(dy: ArrayView3<f64>, cache: &CaCache, w: &CaWeights<'_>) -> (Array3<f64>, CaGrads) {
    let (h, wd) = cache.hw;
    let dy = flatten(dy);
    let d_gate = (&dy * &cache.x).sum_axis(Axis(1));
    let mut dx = &dy * &cache.gate.view().insert_axis(Axis(1));
    let d_pre2 = &d_gate * &cache.gate.mapv(|g| g * (1.0 - g));
    let d_expand = outer(&d_pre2, cache.hidden.view());
    let d_hidden = w.expand_weight.t().dot(&d_pre2) * cache.hidden.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let d_reduce = outer(&d_hidden, cache.pooled.view());
    let d_pooled = w.reduce_weight.t().dot(&d_hidden);
    dx += &(d_pooled / (h * wd) as f64).insert_axis(Axis(1));
    (
        unflatten(dx, h, wd),
        CaGrads {
            reduce_weight: d_reduce,
            reduce_bias: d_hidden,
            expand_weight: d_expand,
            expand_bias: d_pre2,
        },
    )
}

// ---------------------------------------------------------------------------
// Full module

/// Independent on/off switches for the four stages. A disabled stage is the
/// identity on the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub asa: bool,
    pub sa: bool,
    pub aca: bool,
    pub ca: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            asa: true,
            sa: true,
            aca: true,
            ca: true,
        }
    }
}

/// Intermediate attention maps of one embedding call. Entries of disabled
/// stages are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    /// `[h, w]`, non-negative, sums to one.
    pub spatial_softmax_map: Option<Array2<f64>>,
    /// `[h, w]`, in `(0, 1)`.
    pub sa_gate: Option<Array2<f64>>,
    /// `[c]`, in `(0, 1)`.
    pub aca_gate: Option<Array1<f64>>,
    /// `[c]`, in `(0, 1)`.
    pub ca_gate: Option<Array1<f64>>,
}

/// Dimensions of the attention module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgaDims {
    /// Channels entering the input projection.
    pub in_channels: usize,
    /// `c`, the embedding size.
    pub channels: usize,
    /// `c'`, channels of the ASA transform.
    pub asa_channels: usize,
    pub attributes: usize,
    pub height: usize,
    pub width: usize,
    pub aca_hidden: usize,
    pub ca_reduction: usize,
}

/// Parameter handles of the attention module.
#[derive(Clone, Debug)]
pub struct Aga {
    dims: AgaDims,
    toggles: StageToggles,
    projection: Conv,
    asa_conv_weight: ParamId,
    asa_conv_bias: ParamId,
    asa_attr: ParamId,
    asa_gain: ParamId,
    sa_weight: ParamId,
    sa_bias: ParamId,
    aca_attr: ParamId,
    aca_fc1_weight: ParamId,
    aca_fc1_bias: ParamId,
    aca_fc2_weight: ParamId,
    aca_fc2_bias: ParamId,
    aca_gain: ParamId,
    ca_reduce_weight: ParamId,
    ca_reduce_bias: ParamId,
    ca_expand_weight: ParamId,
    ca_expand_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct AgaCache {
    projection: ConvCache,
    asa: Option<AsaCache>,
    sa: Option<SaCache>,
    aca: Option<AcaCache>,
    ca: Option<CaCache>,
}

fn view2(store: &ParamStore, id: ParamId) -> ArrayView2<'_, f64> {
    store.get(id).view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
}

fn view1(store: &ParamStore, id: ParamId) -> ArrayView1<'_, f64> {
    store.get(id).view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
}

impl Aga {
    pub fn build(dims: AgaDims, toggles: StageToggles, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let AgaDims {
            in_channels,
            channels: c,
            asa_channels: cp,
            attributes: n,
            height: h,
            width: w,
            aca_hidden,
            ca_reduction: r,
        } = dims;
        if [in_channels, c, cp, n, h, w, aca_hidden, r].contains(&0) {
            return Err(AgmanError::Config(format!("attention dimensions must be positive: {dims:?}")));
        }
        if c % r != 0 {
            return Err(AgmanError::Config(format!(
                "channel-attention reduction ratio {r} does not divide {c} channels"
            )));
        }
        let fan = |fan_in| Init::FanInUniform { fan_in };
        let mut add = |name: &str, shape: &[usize], init: Init| store.add(format!("aga.{name}"), shape, init, true, rng);
        let asa_conv_weight = add("asa.conv.weight", &[cp, c], fan(c));
        let asa_conv_bias = add("asa.conv.bias", &[cp], Init::Zeros);
        // scaled by the output width: a one-hot input selects a single column
        let asa_attr = add("asa.attr_transform", &[cp, n], fan(cp));
        let asa_gain = add("asa.spatial_gain", &[h, w], Init::Ones);
        let sa_weight = add("sa.conv.weight", &[2], fan(2));
        let sa_bias = add("sa.conv.bias", &[1], Init::Zeros);
        let aca_attr = add("aca.attr_transform", &[c, n], fan(n));
        let aca_fc1_weight = add("aca.fc1.weight", &[aca_hidden, 2 * c], fan(2 * c));
        let aca_fc1_bias = add("aca.fc1.bias", &[aca_hidden], Init::Zeros);
        let aca_fc2_weight = add("aca.fc2.weight", &[c, aca_hidden], fan(aca_hidden));
        let aca_fc2_bias = add("aca.fc2.bias", &[c], Init::Zeros);
        let aca_gain = add("aca.channel_gain", &[c], Init::Ones);
        let ca_reduce_weight = add("ca.reduce.weight", &[c / r, c], fan(c));
        let ca_reduce_bias = add("ca.reduce.bias", &[c / r], Init::Zeros);
        let ca_expand_weight = add("ca.expand.weight", &[c, c / r], fan(c / r));
        let ca_expand_bias = add("ca.expand.bias", &[c], Init::Zeros);
        let projection = Conv::register(store, rng, "aga.projection", in_channels, c, 1, 1, 0, true);
        Ok(Self {
            dims,
            toggles,
            projection,
            asa_conv_weight,
            asa_conv_bias,
            asa_attr,
            asa_gain,
            sa_weight,
            sa_bias,
            aca_attr,
            aca_fc1_weight,
            aca_fc1_bias,
            aca_fc2_weight,
            aca_fc2_bias,
            aca_gain,
            ca_reduce_weight,
            ca_reduce_bias,
            ca_expand_weight,
            ca_expand_bias,
        })
    }

    pub fn dims(&self) -> AgaDims {
        self.dims
    }

    pub fn toggles(&self) -> StageToggles {
        self.toggles
    }

    pub fn projection(&self) -> &Conv {
        &self.projection
    }

    /// Handles of the ASA attribute transform `W_a` and the ACA attribute transform `W_a'`.
    pub fn attribute_transforms(&self) -> (ParamId, ParamId) {
        (self.asa_attr, self.aca_attr)
    }

    pub fn asa_weights<'a>(&self, store: &'a ParamStore) -> AsaWeights<'a> {
        AsaWeights {
            conv_weight: view2(store, self.asa_conv_weight),
            conv_bias: view1(store, self.asa_conv_bias),
            attr_transform: view2(store, self.asa_attr),
            spatial_gain: view2(store, self.asa_gain),
        }
    }

    pub fn sa_weights<'a>(&self, store: &'a ParamStore) -> SaWeights<'a> {
        SaWeights {
            conv_weight: view1(store, self.sa_weight),
            conv_bias: view1(store, self.sa_bias)[0],
        }
    }

    pub fn aca_weights<'a>(&self, store: &'a ParamStore) -> AcaWeights<'a> {
        AcaWeights {
            attr_transform: view2(store, self.aca_attr),
            fc1_weight: view2(store, self.aca_fc1_weight),
            fc1_bias: view1(store, self.aca_fc1_bias),
            fc2_weight: view2(store, self.aca_fc2_weight),
            fc2_bias: view1(store, self.aca_fc2_bias),
            channel_gain: view1(store, self.aca_gain),
        }
    }

    pub fn ca_weights<'a>(&self, store: &'a ParamStore) -> CaWeights<'a> {
        CaWeights {
            reduce_weight: view2(store, self.ca_reduce_weight),
            reduce_bias: view1(store, self.ca_reduce_bias),
            expand_weight: view2(store, self.ca_expand_weight),
            expand_bias: view1(store, self.ca_expand_bias),
        }
    }

    /// Projects the attention input, applies the enabled stages and pools to
    /// an embedding of length `c`.
    pub fn forward(
        &self,
        store: &ParamStore,
        input: ArrayView3<f64>,
        a: &[f64],
    ) -> Result<(Array1<f64>, AttentionTrace, AgaCache)> {
        check_one_hot(a, self.dims.attributes)?;
        let expected = (self.dims.in_channels, self.dims.height, self.dims.width);
        if input.dim() != expected {
            return Err(AgmanError::Argument(format!(
                "attention input {:?} does not match {expected:?}",
                input.dim()
            )));
        }
        let (mut x, projection) = self.projection.forward(store, input);
        let mut trace = AttentionTrace::default();
        let mut cache = AgaCache {
            projection,
            asa: None,
            sa: None,
            aca: None,
            ca: None,
        };
        if self.toggles.asa {
            let (y, map, c) = attribute_spatial_attention(x.view(), a, &self.asa_weights(store))?;
            x = y;
            trace.spatial_softmax_map = Some(map);
            cache.asa = Some(c);
        }
        if self.toggles.sa {
            let (y, gate, c) = spatial_attention(x.view(), &self.sa_weights(store))?;
            x = y;
            trace.sa_gate = Some(gate);
            cache.sa = Some(c);
        }
        if self.toggles.aca {
            let (y, gate, c) = attribute_channel_attention(x.view(), a, &self.aca_weights(store))?;
            x = y;
            trace.aca_gate = Some(gate);
            cache.aca = Some(c);
        }
        if self.toggles.ca {
            let (y, gate, c) = channel_attention(x.view(), &self.ca_weights(store))?;
            x = y;
            trace.ca_gate = Some(gate);
            cache.ca = Some(c);
        }
        Ok((ops::global_avg_pool(x.view()), trace, cache))
    }

    /// Accumulates gradients and returns the gradient w.r.t. the attention input.
    pub fn backward(&self, store: &ParamStore, cache: &AgaCache, d_embedding: ArrayView1<f64>, grads: &mut Grads) -> Array3<f64> {
        let (h, w) = (self.dims.height, self.dims.width);
        let mut d = ops::global_avg_pool_backward(d_embedding, h, w);
        let mut put = |id: ParamId, g: ndarray::ArrayD<f64>| *grads.get_mut(id) += &g;
        if let Some(c) = &cache.ca {
            let (dx, g) = channel_attention_backward(d.view(), c, &self.ca_weights(store));
            put(self.ca_reduce_weight, g.reduce_weight.into_dyn());
            put(self.ca_reduce_bias, g.reduce_bias.into_dyn());
            put(self.ca_expand_weight, g.expand_weight.into_dyn());
            put(self.ca_expand_bias, g.expand_bias.into_dyn());
            d = dx;
        }
        if let Some(c) = &cache.aca {
            let (dx, g) = attribute_channel_attention_backward(d.view(), c, &self.aca_weights(store));
            put(self.aca_attr, g.attr_transform.into_dyn());
            put(self.aca_fc1_weight, g.fc1_weight.into_dyn());
            put(self.aca_fc1_bias, g.fc1_bias.into_dyn());
            put(self.aca_fc2_weight, g.fc2_weight.into_dyn());
            put(self.aca_fc2_bias, g.fc2_bias.into_dyn());
            put(self.aca_gain, g.channel_gain.into_dyn());
            d = dx;
        }
        if let Some(c) = &cache.sa {
            let (dx, g) = spatial_attention_backward(d.view(), c, &self.sa_weights(store));
            put(self.sa_weight, g.conv_weight.into_dyn());
            put(self.sa_bias, Array1::from_elem(1, g.conv_bias).into_dyn());
            d = dx;
        }
        if let Some(c) = &cache.asa {
            let (dx, g) = attribute_spatial_attention_backward(d.view(), c, &self.asa_weights(store));
            put(self.asa_conv_weight, g.conv_weight.into_dyn());
            put(self.asa_conv_bias, g.conv_bias.into_dyn());
            put(self.asa_attr, g.attr_transform.into_dyn());
            put(self.asa_gain, g.spatial_gain.into_dyn());
            d = dx;
        }
        self.projection.backward(store, &cache.projection, d.view(), grads)
    }

    pub fn projection_weight_view<'a>(&self, store: &'a ParamStore) -> ndarray::ArrayView4<'a, f64> {
        store.get(self.projection.weight()).view().into_dimensionality::<Ix4>().expect("rank-4")
    }
}
