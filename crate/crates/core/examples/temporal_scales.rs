//! Temporal scale as a function of word correlation, for a few λ_τ.

use adapedit::fwt::temporal_scale;

fn main() {
    let lambdas = [0.25f32, 0.5, 1.0, 1.5];
    print!("{:>5}", "A");
    for l in lambdas {
        print!(" {:>9}", format!("λ={l}"));
    }
    println!();
    for i in 0..=10 {
        let a = i as f32 / 10.0;
        print!("{a:>5.1}");
        for l in lambdas {
            print!(" {:>9.6}", temporal_scale(a, l));
        }
        println!();
    }
}
