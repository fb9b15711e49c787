//! Word alignment and key words between two prompts.
//!
//!     cargo run --example align_prompts -- "a photo of a cake" "a photo of a chocolate cake"

use adapedit::align::{align, tokenize, WordMatch};
use adapedit::backend::toy::ToyVocab;

fn main() -> adapedit::Result<()> {
    let mut args = std::env::args().skip(1);
    let c = args.next().unwrap_or_else(|| "a photo of a cake".into());
    let cs = args.next().unwrap_or_else(|| "a photo of a chocolate cake".into());
    let (c, cs) = (tokenize(&c, &ToyVocab)?, tokenize(&cs, &ToyVocab)?);
    let a = align(&c, &cs);
    for (t, m) in a.pairs.iter().enumerate() {
        let how = match m {
            WordMatch::Kept(s) => format!("kept from `{}`", c.words[*s]),
            WordMatch::Substituted(s) => format!("replaces `{}`", c.words[*s]),
            WordMatch::Inserted => "inserted".into(),
        };
        let key = if a.is_key(t) { "*" } else { " " };
        println!("{key} {:<12} tokens {:?}  {how}", cs.words[t], cs.word_spans[t]);
    }
    for s in &a.dropped {
        println!("  (dropped `{}`)", c.words[*s]);
    }
    Ok(())
}
