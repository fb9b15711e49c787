//! One collecting pass, then a λ_S sweep of the editing pass.

use adapedit::backend::toy::ToyBackend;
use adapedit::controller::{analyze, collect_pass, edit_pass, EditParams, Prompts};
use adapedit::Backend;

fn main() -> adapedit::Result<()> {
    let base = EditParams {
        steps: 20,
        ..EditParams::default()
    };
    let mut backend = ToyBackend::new();
    let prompts = Prompts::new("a red car on a road", "a blue car on a road", backend.vocabulary())?;
    let pass = collect_pass(&prompts, &base, &mut backend)?;

    println!("{:>8} {:>14}", "lambda_s", "map_divergence");
    for lambda_s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let params = EditParams {
            lambda_s,
            ..base.clone()
        };
        let analysis = analyze(&pass, &prompts, &params)?;
        let out = edit_pass(&pass, &prompts, &analysis, &params, &mut ToyBackend::new(), &mut |_| {})?;
        println!("{lambda_s:>8} {:>14.4}", out.map_divergence);
    }
    Ok(())
}
