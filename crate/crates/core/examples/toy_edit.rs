//! Edits a prompt on the toy backend and writes both images.
//!
//!     cargo run --example toy_edit -- "a cat on a sofa" "a cat on a red sofa"

use adapedit::backend::toy::ToyBackend;
use adapedit::controller::{run_edit, EditParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let prompt = args.next().unwrap_or_else(|| "a dog standing on the grass".into());
    let edit = args.next().unwrap_or_else(|| "a dog sitting on the grass".into());

    let params = EditParams::default();
    let out = run_edit(&prompt, &edit, &params, &mut ToyBackend::new())?;
    out.original.save("x.png")?;
    out.edited.save("x_star.png")?;

    if let Some(a) = &out.analysis {
        println!("{:<12} {:>8} {:>8} {:>9}", "word", "A", "tau", "preserve");
        for (i, w) in out.prompts.edit.words.iter().enumerate() {
            println!(
                "{:<12} {:>8.4} {:>8.4} {:>9}",
                w,
                a.fwt.correlation[i],
                a.fwt.scales.tau[i],
                a.schedule.preserve_steps(i)
            );
        }
    }
    println!("map divergence {:.3}", out.map_divergence);
    Ok(())
}
