//! Runs the finite-difference gradient check over a few model shapes and
//! seeds and prints the worst coordinate of each.
//!
//! cargo run --release --example gradient_sweep -- [seeds]

use currseq::commands::{cmd_gradcheck, GradcheckConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(3);
    for (vocab_size, embed_dim, hidden_dim) in [(6, 2, 3), (20, 8, 12), (40, 6, 16)] {
        for seed in 0..seeds {
            let cfg = GradcheckConfig {
                vocab_size,
                embed_dim,
                hidden_dim,
                seed,
                ..Default::default()
            };
            let out = cmd_gradcheck(&cfg)?;
            let worst = out.worst.map(|w| format!("{}[{}]", w.array, w.index)).unwrap_or_default();
            println!(
                "V={vocab_size} d={embed_dim} h={hidden_dim} seed={seed} coords={} max_rel={:.2e} worst={worst}",
                out.coordinates, out.max_rel_error
            );
        }
    }
    Ok(())
}
