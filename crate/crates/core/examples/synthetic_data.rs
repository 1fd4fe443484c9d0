//! Generates a small synthetic split and writes its manifest and PNG images.
//!
//! `cargo run --example synthetic_data -- [OUT_DIR]`

use std::path::PathBuf;

use agman::data::{generate_synthetic, save_manifest, save_png, AttributeSpace, ImageRecord, PixelSource};

fn main() -> agman::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic-out".into()));
    std::fs::create_dir_all(out.join("images")).expect("output directory is writable");

    let space = AttributeSpace::new(vec!["collar".into(), "sleeve".into(), "length".into()], vec![4, 3, 2])?;
    let split = generate_synthetic(&space, 3, 64, 7)?;

    let mut records = Vec::with_capacity(split.len());
    for record in &split.records {
        let pixels = split.pixels(record, &space, 64)?;
        let file = format!("images/{}.png", record.id);
        save_png(&out.join(&file), &pixels)?;
        records.push(ImageRecord {
            source: PixelSource::File(file.into()),
            ..record.clone()
        });
    }
    let on_disk = agman::data::DatasetSplit::new(records, split.role);
    save_manifest(&out.join("manifest.jsonl"), &on_disk, &space)?;

    println!("{} images in {}", split.len(), out.display());
    for a in 0..space.n() {
        let mut counts = vec![0; space.sub_class_count(a)];
        for r in &split.records {
            counts[r.label(a).unwrap()] += 1;
        }
        println!("{:>7}: images per sub-class {counts:?}", space.name(a));
    }
    Ok(())
}
