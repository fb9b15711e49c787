//! Runs an edit through the wire protocol against an in-process host that
//! serves the toy backend, and checks it matches the local run.

use adapedit::backend::loopback::spawn_host;
use adapedit::backend::remote::RemoteBackend;
use adapedit::backend::toy::ToyBackend;
use adapedit::controller::{run_edit, EditParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (addr, _host) = spawn_host("127.0.0.1:0", ToyBackend::with_word_vocab)?;
    let params = EditParams {
        steps: 10,
        ..EditParams::default()
    };
    let (c, cs) = ("a bowl of apples", "a bowl of oranges");

    let remote = run_edit(c, cs, &params, &mut RemoteBackend::new(addr.to_string()))?;
    let local = run_edit(c, cs, &params, &mut ToyBackend::with_word_vocab())?;
    println!("host at {addr}");
    println!("remote divergence {:.4}", remote.map_divergence);
    println!("local  divergence {:.4}", local.map_divergence);
    println!("images identical: {}", remote.edited == local.edited);
    Ok(())
}
