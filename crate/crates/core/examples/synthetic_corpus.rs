//! Writes a synthetic dialogue corpus in the blank-line-separated format
//! that `currseq prepare` reads.
//!
//! cargo run --release --example synthetic_corpus -- <path> [conversations] [seed]

use std::path::PathBuf;

use currseq::synthetic::SyntheticGrammar;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = PathBuf::from(args.next().ok_or("usage: synthetic_corpus <path> [conversations] [seed]")?);
    let grammar = SyntheticGrammar {
        conversations: args.next().map(|a| a.parse()).transpose()?.unwrap_or(1_000),
        seed: args.next().map(|a| a.parse()).transpose()?.unwrap_or(0),
        ..SyntheticGrammar::default()
    };
    grammar.write_corpus(&path)?;
    println!(
        "wrote {} conversations (about {} pairs) to {}",
        grammar.conversations,
        grammar.expected_pairs(),
        path.display()
    );
    Ok(())
}
