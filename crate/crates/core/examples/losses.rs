//! The three training losses on hand-picked inputs.

use agman::loss::{classification_loss, combined_loss_grad, triplet_loss, TripletMode};
use ndarray::arr1;

fn main() -> agman::Result<()> {
    let logits = arr1(&[2.0, -1.0, 0.0]);
    let target = arr1(&[1.0, 0.0, 0.0]);
    let weights = arr1(&[1.0, 1.0, 1.0]);
    let lc = classification_loss(logits.view(), target.view(), weights.view())?;
    println!("classification loss {lc:.6}");

    let anchor = arr1(&[1.0, 0.0]);
    let positive = arr1(&[0.5, 0.75f64.sqrt()]);
    let negative = arr1(&[0.6, 0.8]);
    for mode in [TripletMode::SimilarityCorrected, TripletMode::AsWritten] {
        let lt = triplet_loss(anchor.view(), positive.view(), negative.view(), 0.2, mode)?;
        println!("triplet loss ({mode:?}) {lt:.6}");
    }

    // the weight derivatives are positive for any losses, so both weights drift down
    let lt = triplet_loss(anchor.view(), positive.view(), negative.view(), 0.2, TripletMode::SimilarityCorrected)?;
    for (w0, w1) in [(0.0, 0.0), (-1.0, -1.0), (-5.0, -5.0)] {
        let g = combined_loss_grad(lc, lt, w0, w1);
        println!(
            "w = ({w0:+.1}, {w1:+.1}): total {:.4}, d/dw0 {:.4}, d/dw1 {:.4}",
            g.value, g.d_w0, g.d_w1
        );
    }
    Ok(())
}
