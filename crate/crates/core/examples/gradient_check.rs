//! Compares the hand-written backward pass of the attention stack with central
//! finite differences, group by group.

use agman::attention::{Aga, AgaDims, StageToggles};
use agman::params::ParamStore;
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn main() -> agman::Result<()> {
    let dims = AgaDims {
        in_channels: 6,
        channels: 8,
        asa_channels: 4,
        attributes: 3,
        height: 3,
        width: 3,
        aca_hidden: 4,
        ca_reduction: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let aga = Aga::build(dims, StageToggles::default(), &mut store, &mut rng)?;
    let input = Array3::from_shape_fn((6, 3, 3), |_| rng.random_range(-1.0..1.0));
    let probe = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
    let a = [0.0, 1.0, 0.0];

    let (_, _, cache) = aga.forward(&store, input.view(), &a)?;
    let mut grads = store.zeros_like();
    aga.backward(&store, &cache, probe.view(), &mut grads);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let mut worst = 0.0f64;
        for k in 0..store.get(id).len() {
            let orig = store.get(id).as_slice().unwrap()[k];
            let mut at = |v: f64| {
                store.get_mut(id).as_slice_mut().unwrap()[k] = v;
                aga.forward(&store, input.view(), &a).unwrap().0.dot(&probe)
            };
            let numeric = (at(orig + STEP) - at(orig - STEP)) / (2.0 * STEP);
            store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
            let analytic = grads.get(id).as_slice().unwrap()[k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
        }
        println!("{:<24} max relative error {worst:.2e}", store.name(id));
    }
    Ok(())
}
