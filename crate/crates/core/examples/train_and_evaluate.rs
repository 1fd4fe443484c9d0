//! Trains the tinynet model on synthetic data and reports held-out retrieval
//! MAP and triplet accuracy after every epoch.
//!
//! `cargo run --release --example train_and_evaluate -- [EPOCHS]`

use agman::backbone::BackboneProfile;
use agman::data::{generate_synthetic, sample_triplets, AttributeSpace};
use agman::eval::{evaluate_map_with_pixels, evaluate_triplets};
use agman::model::{AgmanModel, ModelSpec};
use agman::train::{train_with_pixels, EpochStats, PixelCache, TrainConfig};

fn main() -> agman::Result<()> {
    let epochs = std::env::args().nth(1).map_or(6, |s| s.parse().expect("EPOCHS is an integer"));
    let space = AttributeSpace::new(vec!["collar".into(), "sleeve".into(), "length".into()], vec![4, 3, 2])?;
    let train = generate_synthetic(&space, 12, 64, 1)?;
    let test = generate_synthetic(&space, 12, 64, 101)?.with_query_partition(0.2, 3)?;
    let train_pixels = PixelCache::load(&train, &space, 64)?;
    let test_pixels = PixelCache::load(&test, &space, 64)?;

    let mut spec = ModelSpec::for_profile(BackboneProfile::Tinynet, space.n());
    spec.seed = 1;
    let mut model = AgmanModel::new(spec)?;
    let config = TrainConfig {
        epochs,
        triplets_per_epoch: 480,
        ..TrainConfig::default()
    };

    let mut report = |m: &AgmanModel, s: &EpochStats| {
        let r = evaluate_map_with_pixels(m, &test, &space, &test_pixels)?;
        println!(
            "epoch {:>2}  L_c {:.4}  L_triplet {:.4}  w0 {:+.4}  w1 {:+.4}  held-out MAP {:.3}",
            s.epoch,
            s.l_c,
            s.l_triplet,
            s.w0,
            s.w1,
            r.overall_map.unwrap_or(f64::NAN)
        );
        Ok(())
    };
    train_with_pixels(&mut model, &train, &space, &config, &train_pixels, Some(&mut report))?;

    let final_map = evaluate_map_with_pixels(&model, &test, &space, &test_pixels)?;
    for (name, map) in &final_map.per_attribute {
        println!("{name:>7}: MAP {:.3}", map.unwrap_or(f64::NAN));
    }
    let mut triplets = Vec::new();
    for a in 0..space.n() {
        triplets.extend(sample_triplets(&test, a, 100, 7)?);
    }
    let tr = evaluate_triplets(&model, &test_pixels, &triplets, config.margin, config.triplet_mode)?;
    println!("triplet accuracy {:.3}", tr.triplet_accuracy.unwrap());
    Ok(())
}
