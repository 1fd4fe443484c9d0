//! Trains briefly, then prints the top-ranked candidates for one query under
//! each attribute. Relevant candidates share the query's sub-class.

use agman::backbone::BackboneProfile;
use agman::data::{generate_synthetic, AttributeSpace};
use agman::eval::retrieve;
use agman::model::{AgmanModel, ModelSpec};
use agman::train::{train_with_pixels, PixelCache, TrainConfig};

fn main() -> agman::Result<()> {
    let space = AttributeSpace::new(vec!["collar".into(), "sleeve".into(), "length".into()], vec![4, 3, 2])?;
    let train = generate_synthetic(&space, 12, 64, 1)?;
    let gallery = generate_synthetic(&space, 6, 64, 50)?.with_query_partition(0.1, 0)?;
    let mut model = AgmanModel::new(ModelSpec::for_profile(BackboneProfile::Tinynet, space.n()))?;
    let config = TrainConfig {
        epochs: 4,
        triplets_per_epoch: 480,
        ..TrainConfig::default()
    };
    train_with_pixels(&mut model, &train, &space, &config, &PixelCache::load(&train, &space, 64)?, None)?;

    let pixels = PixelCache::load(&gallery, &space, 64)?;
    let query = &gallery.query_ids[0];
    let labels = &gallery.get(query).unwrap().labels;
    for a in 0..space.n() {
        let ranking = retrieve(&model, &gallery, &space, &pixels, query, a, 8)?;
        let marks: String = ranking.entries.iter().map(|e| if e.relevant { '+' } else { '-' }).collect();
        println!("{:>7} (query sub-class {}): {marks}", space.name(a), labels[&a]);
        for (rank, e) in ranking.entries.iter().take(3).enumerate() {
            println!("         {}. {} {:.4}", rank + 1, e.id, e.score);
        }
    }
    Ok(())
}
