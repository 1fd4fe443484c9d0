//! Trains one model per disabled attention stage and compares held-out MAP.
//!
//! `cargo run --release --example ablation -- [EPOCHS]`

use agman::attention::StageToggles;
use agman::backbone::BackboneProfile;
use agman::data::{generate_synthetic, AttributeSpace};
use agman::eval::evaluate_map_with_pixels;
use agman::model::{AgmanModel, ModelSpec};
use agman::train::{train_with_pixels, PixelCache, TrainConfig};

fn main() -> agman::Result<()> {
    let epochs = std::env::args().nth(1).map_or(8, |s| s.parse().expect("EPOCHS is an integer"));
    let space = AttributeSpace::new(vec!["collar".into(), "sleeve".into(), "length".into()], vec![4, 3, 2])?;
    let train = generate_synthetic(&space, 12, 64, 1)?;
    let test = generate_synthetic(&space, 12, 64, 101)?.with_query_partition(0.2, 3)?;
    let train_pixels = PixelCache::load(&train, &space, 64)?;
    let test_pixels = PixelCache::load(&test, &space, 64)?;
    let config = TrainConfig {
        epochs,
        triplets_per_epoch: 480,
        ..TrainConfig::default()
    };

    let on = StageToggles::default();
    let variants = [
        ("full", on),
        ("no ASA", StageToggles { asa: false, ..on }),
        ("no SA", StageToggles { sa: false, ..on }),
        ("no ACA", StageToggles { aca: false, ..on }),
        ("no CA", StageToggles { ca: false, ..on }),
    ];
    for (name, toggles) in variants {
        let mut spec = ModelSpec::for_profile(BackboneProfile::Tinynet, space.n());
        spec.seed = 1;
        spec.toggles = toggles;
        let mut model = AgmanModel::new(spec)?;
        train_with_pixels(&mut model, &train, &space, &config, &train_pixels, None)?;
        let r = evaluate_map_with_pixels(&model, &test, &space, &test_pixels)?;
        let per: Vec<String> = r.per_attribute.iter().map(|(k, v)| format!("{k} {:.3}", v.unwrap_or(f64::NAN))).collect();
        println!("{name:<7} mean MAP {:.3}  ({})", r.attribute_mean_map.unwrap_or(f64::NAN), per.join(", "));
    }
    Ok(())
}
