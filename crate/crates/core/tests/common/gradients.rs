//! Analytic gradients against central finite differences in f64.

use agman::attention::{Aga, AgaDims, StageToggles};
use agman::backbone::BackboneProfile;
use agman::data::{generate_synthetic, sample_triplets, AttributeSpace};
use agman::loss::{classification_loss, classification_loss_grad, combined_loss_grad, triplet_loss, triplet_loss_grad, TripletMode};
use agman::model::{AgmanModel, ModelSpec};
use agman::params::{Grads, ParamId, ParamStore};
use agman::train::{batch_objective, PixelCache, TrainConfig};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)` over a whole parameter group.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

/// Tracks the worst relative error seen so far.
struct Worst(f64);

impl Worst {
    fn record(&mut self, err: f64, what: impl FnOnce() -> String) -> Result<(), String> {
        self.0 = self.0.max(err);
        ensure(err < TOL, || format!("{}: relative error {err:.3e}", what()))
    }

    fn done(self) -> Check {
        Ok(format!("max relative error {:.2e}", self.0))
    }
}

/// Numeric gradient of every trainable group of `store` under `f`.
fn check_groups(
    store: &mut ParamStore,
    grads: &Grads,
    mut f: impl FnMut(&ParamStore) -> f64,
    worst: &mut Worst,
    what: &str,
) -> Result<(), String> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    ensure(!ids.is_empty(), || "no trainable parameters".into())?;
    for id in ids {
        let analytic: Vec<f64> = grads.get(id).iter().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..analytic.len() {
            let orig = store.get(id).as_slice().unwrap()[k];
            numeric.push(central(
                |v| {
                    store.get_mut(id).as_slice_mut().unwrap()[k] = v;
                    f(store)
                },
                orig,
            ));
            store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
        }
        let err = rel_err(&analytic, &numeric);
        worst.record(err, || format!("{what}: group `{}`", store.name(id)))?;
    }
    Ok(())
}

/// The tiny attention configuration: c = 4, c' = 2, h = w = 2, n = 2.
pub fn tiny_dims() -> AgaDims {
    AgaDims {
        in_channels: 3,
        channels: 4,
        asa_channels: 2,
        attributes: 2,
        height: 2,
        width: 2,
        aca_hidden: 2,
        ca_reduction: 2,
    }
}

fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-scale..scale));
    }
}

/// Every parameter group and the input of the attention stack, for a random
/// linear functional of the embedding.
pub fn attention_stack() -> Check {
    let mut worst = Worst(0.0);
    for (seed, toggles) in [
        (1, StageToggles::default()),
        (2, StageToggles::default()),
        (3, StageToggles { asa: false, ..StageToggles::default() }),
        (4, StageToggles { aca: false, ca: false, ..StageToggles::default() }),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let aga = Aga::build(tiny_dims(), toggles, &mut store, &mut rng).map_err(|e| e.to_string())?;
        // move gains and biases off their symmetric starting points
        perturb_all(&mut store, &mut rng, 0.3);
        let input = Array3::from_shape_fn((3, 2, 2), |_| rng.random_range(-1.0..1.0));
        let r = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        for attribute in 0..2 {
            let mut a = vec![0.0; 2];
            a[attribute] = 1.0;
            let (_, _, cache) = aga.forward(&store, input.view(), &a).map_err(|e| e.to_string())?;
            let mut grads = store.zeros_like();
            let d_input = aga.backward(&store, &cache, r.view(), &mut grads);
            let f = |s: &ParamStore| aga.forward(s, input.view(), &a).unwrap().0.dot(&r);
            let what = format!("seed {seed} attribute {attribute}");
            check_groups(&mut store, &grads, f, &mut worst, &what)?;

            let mut x = input.clone();
            let mut numeric = Vec::new();
            for k in 0..x.len() {
                let orig = x.as_slice().unwrap()[k];
                numeric.push(central(
                    |v| {
                        x.as_slice_mut().unwrap()[k] = v;
                        aga.forward(&store, x.view(), &a).unwrap().0.dot(&r)
                    },
                    orig,
                ));
                x.as_slice_mut().unwrap()[k] = orig;
            }
            let err = rel_err(d_input.as_slice().unwrap(), &numeric);
            worst.record(err, || format!("{what}: input gradient"))?;
        }
    }
    worst.done()
}

pub fn classification() -> Check {
    let mut worst = Worst(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = Array1::from_shape_fn(2, |_| rng.random_range(-4.0..4.0));
        let y = Array1::from_shape_fn(2, |_| f64::from(rng.random_bool(0.5)));
        let w = Array1::from_shape_fn(2, |_| rng.random_range(0.1..2.0));
        let (_, g) = classification_loss_grad(x.view(), y.view(), w.view()).map_err(|e| e.to_string())?;
        let numeric: Vec<f64> = (0..2)
            .map(|i| {
                central(
                    |v| {
                        let mut xx = x.clone();
                        xx[i] = v;
                        classification_loss(xx.view(), y.view(), w.view()).unwrap()
                    },
                    x[i],
                )
            })
            .collect();
        worst.record(rel_err(g.as_slice().unwrap(), &numeric), || format!("logits {x}"))?;
    }
    worst.done()
}

pub fn triplet_both_modes() -> Check {
    let mut worst = Worst(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut active = 0;
    for mode in [TripletMode::SimilarityCorrected, TripletMode::AsWritten] {
        for _ in 0..40 {
            let v: Vec<Array1<f64>> = (0..3)
                .map(|_| Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)))
                .collect();
            let margin = 0.5;
            let (loss, grads) =
                triplet_loss_grad(v[0].view(), v[1].view(), v[2].view(), margin, mode).map_err(|e| e.to_string())?;
            // the hinge kink is not differentiable
            if loss > 0.0 && loss < 1e-3 {
                continue;
            }
            if loss > 0.0 {
                active += 1;
            }
            for which in 0..3 {
                let numeric: Vec<f64> = (0..4)
                    .map(|i| {
                        central(
                            |x| {
                                let mut w = v.clone();
                                w[which][i] = x;
                                triplet_loss(w[0].view(), w[1].view(), w[2].view(), margin, mode).unwrap()
                            },
                            v[which][i],
                        )
                    })
                    .collect();
                let err = rel_err(grads[which].as_slice().unwrap(), &numeric);
                worst.record(err, || format!("{mode:?} input {which}"))?;
            }
        }
    }
    ensure(active > 20, || format!("only {active} draws had an active hinge"))?;
    worst.done()
}

/// Derivatives of the combined loss in both losses and both weights.
pub fn combined_in_weights() -> Check {
    let mut worst = Worst(0.0);
    for &(lc, lt, w0, w1) in &[(0.7, 0.2, 0.0, 0.0), (1.3, 0.05, -0.4, 0.9), (0.0, 2.0, 3.0, -2.0)] {
        let g = combined_loss_grad(lc, lt, w0, w1);
        let d0 = central(|v| combined_loss_grad(lc, lt, v, w1).value, w0);
        let d1 = central(|v| combined_loss_grad(lc, lt, w0, v).value, w1);
        let dc = central(|v| combined_loss_grad(v, lt, w0, w1).value, lc);
        let dt = central(|v| combined_loss_grad(lc, v, w0, w1).value, lt);
        let err = rel_err(&[g.d_w0, g.d_w1, g.d_classification, g.d_triplet], &[d0, d1, dc, dt]);
        worst.record(err, || format!("L_c {lc}, L_t {lt}, w0 {w0}, w1 {w1}"))?;
        let closed = 0.5 * w0.exp() * lc + 1.0;
        ensure((g.d_w0 - closed).abs() < 1e-12, || format!("d/dw0 {} is not {closed}", g.d_w0))?;
        ensure(g.d_w0 > 0.0 && g.d_w1 > 0.0, || "weight derivatives must be positive".into())?;
    }
    worst.done()
}

fn tiny_model(seed: u64, fusion: bool) -> AgmanModel {
    let mut spec = ModelSpec::for_profile(BackboneProfile::Tinynet, 2);
    spec.input_size = 16;
    spec.channels = [2, 3, 4, 4];
    spec.embedding_size = 4;
    spec.asa_channels = 2;
    spec.aca_hidden = 2;
    spec.ca_reduction = 2;
    spec.fusion = fusion;
    spec.seed = seed;
    AgmanModel::new(spec).unwrap()
}

/// The batch training objective through backbone, fusion, head and attention.
pub fn full_objective() -> Check {
    let mut worst = Worst(0.0);
    let space = AttributeSpace::new(vec!["x".into(), "y".into()], vec![2, 3]).unwrap();
    let split = generate_synthetic(&space, 2, 16, 3).unwrap();
    let pixels = PixelCache::load(&split, &space, 16).unwrap();
    let mut batch = sample_triplets(&split, 0, 1, 4).unwrap();
    batch.extend(sample_triplets(&split, 1, 1, 4).unwrap());
    for (seed, fusion, use_c) in [(1, true, true), (2, false, true), (3, true, false)] {
        let mut model = tiny_model(seed, fusion);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perturb_all(model.store_mut(), &mut rng, 0.05);
        let config = TrainConfig {
            // keeps the hinge active for every draw
            margin: 2.5,
            use_classification_loss: use_c,
            ..TrainConfig::default()
        };
        let out = batch_objective(&model, &pixels, &batch, &config).map_err(|e| e.to_string())?;
        ensure(out.l_triplet > 0.0, || "inactive hinge".into())?;
        let grads = out.grads;
        let mut probe = model.clone();
        let ids: Vec<ParamId> = model.store().ids().filter(|&id| model.store().is_trainable(id)).collect();
        let (w0, _) = model.loss_weight_ids();
        for id in ids {
            let analytic: Vec<f64> = grads.get(id).iter().copied().collect();
            if id == w0 && !use_c {
                // frozen along with the disabled classification term
                ensure(analytic == [0.0], || format!("frozen w0 received gradient {analytic:?}"))?;
                continue;
            }
            let mut numeric = Vec::with_capacity(analytic.len());
            for k in 0..analytic.len() {
                let orig = model.store().get(id).as_slice().unwrap()[k];
                numeric.push(central(
                    |v| {
                        probe.store_mut().get_mut(id).as_slice_mut().unwrap()[k] = v;
                        batch_objective(&probe, &pixels, &batch, &config).unwrap().total
                    },
                    orig,
                ));
                probe.store_mut().get_mut(id).as_slice_mut().unwrap()[k] = orig;
            }
            let err = rel_err(&analytic, &numeric);
            worst.record(err, || {
                format!("seed {seed} fusion {fusion}: group `{}`", model.store().name(id))
            })?;
        }
    }
    worst.done()
}
