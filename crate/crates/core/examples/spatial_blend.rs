//! Blends two attention maps under a left-to-right spatial ramp.

use adapedit::dps::{blend_maps, SpatialScales};
use adapedit::tensor::{softmax_rows, Matrix};

fn main() -> adapedit::Result<()> {
    let pixels = 8;
    let original = softmax_rows(&Matrix::from_vec(
        pixels,
        3,
        (0..pixels * 3).map(|i| (i % 3) as f32).collect(),
    )?)?;
    let edited = softmax_rows(&Matrix::from_vec(
        pixels,
        3,
        (0..pixels * 3).map(|i| (2 - i % 3) as f32).collect(),
    )?)?;
    let ramp: Vec<f32> = (0..pixels).map(|p| p as f32 / (pixels - 1) as f32).collect();

    for lambda_s in [0.0, 0.5, 1.0] {
        let s = SpatialScales::new(ramp.clone(), (1, pixels), 1.0, lambda_s)?;
        let c = blend_maps(&original, &edited, &s)?;
        println!("lambda_s = {lambda_s}  |C - M| = {:.4}", c.distance(&original)?);
        for p in [0, pixels / 2, pixels - 1] {
            println!("  pixel {p}: {:?}", c.row(p));
        }
    }
    Ok(())
}
