//! Embeds one synthetic image under every attribute and prints the
//! attribute-aware spatial attention map next to the gate statistics.

use agman::backbone::BackboneProfile;
use agman::data::{generate_synthetic, AttributeSpace};
use agman::model::{AgmanModel, ModelSpec};

fn main() -> agman::Result<()> {
    let space = AttributeSpace::new(vec!["collar".into(), "sleeve".into(), "length".into()], vec![4, 3, 2])?;
    let split = generate_synthetic(&space, 1, 64, 3)?;
    let record = &split.records[0];
    let image = split.pixels(record, &space, 64)?;

    let model = AgmanModel::new(ModelSpec::for_profile(BackboneProfile::Tinynet, space.n()))?;
    println!("image {} with labels {:?}", record.id, record.labels);
    for a in 0..space.n() {
        let (embedding, trace) = model.embed(image.view(), a)?;
        let map = trace.spatial_softmax_map.expect("ASA is enabled");
        println!("\n{} (embedding length {}, map sums to {:.6})", space.name(a), embedding.len(), map.sum());
        let peak = map.iter().cloned().fold(0.0, f64::max);
        for row in map.rows() {
            let line: String = row.iter().map(|v| shade(v / peak)).collect();
            println!("  {line}");
        }
        let range = |g: &ndarray::Array1<f64>| {
            let lo = g.iter().cloned().fold(1.0, f64::min);
            let hi = g.iter().cloned().fold(0.0, f64::max);
            format!("[{lo:.3}, {hi:.3}]")
        };
        println!(
            "  ACA gate {}  CA gate {}",
            range(trace.aca_gate.as_ref().unwrap()),
            range(trace.ca_gate.as_ref().unwrap())
        );
    }
    Ok(())
}

fn shade(v: f64) -> char {
    [' ', '.', ':', '+', '#'][((v * 4.0).round() as usize).min(4)]
}
