//! Per-word attention heatmaps at the final step, raw and masked.

use adapedit::backend::toy::ToyBackend;
use adapedit::backend::{Branch, FEATURE_GRID};
use adapedit::controller::{collect_pass, EditParams, Prompts};
use adapedit::output::write_heatmap;
use adapedit::tensor::{mask_below, MaskThreshold};
use adapedit::Backend;

fn main() -> adapedit::Result<()> {
    let params = EditParams::default();
    let mut backend = ToyBackend::new();
    let prompts = Prompts::new(
        "a dog standing on the grass",
        "a dog sitting on the grass",
        backend.vocabulary(),
    )?;
    let pass = collect_pass(&prompts, &params, &mut backend)?;

    let maps = pass.record.word_maps(1, Branch::Edit)?;
    let masked = mask_below(&maps, MaskThreshold::default());
    let grid = (FEATURE_GRID, FEATURE_GRID);
    for (i, w) in prompts.edit.words.iter().enumerate() {
        write_heatmap(maps.row(i), grid, format!("attn_{w}_t1.png").as_ref())?;
        write_heatmap(masked.row(i), grid, format!("attn_{w}_t1_masked.png").as_ref())?;
        let kept = masked.row(i).iter().filter(|v| **v > 0.0).count();
        println!("{w:<10} {kept:>5} of {} pixels above the mask", maps.cols());
    }
    Ok(())
}
