//! Runs the desk experiment and prints its tables.
//!
//! `cargo run --release -p poe-core --example desk -- [config.json] [report.json]`

use poe_core::eval::{render_table, run_desk, DeskConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let cfg: DeskConfig = match args.next() {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => DeskConfig::default(),
    };
    let report = run_desk(&cfg)?;
    for s in &report.seeds {
        println!(
            "seed {} ({:.0}s): oracle {:.3} (task {:.3}), student {:.3}",
            s.seed, s.seconds, s.oracle_accuracy, s.oracle_task_accuracy, s.student_accuracy
        );
        print!("{}", render_table(&s.primitive));
        print!("{}", render_table(&s.ablation));
        print!("{}", render_table(&s.joint));
        for (m, h) in &s.ood {
            println!("ood {m:<10} mode {} {:?}", h.mode(), h.counts);
        }
        for t in &s.timing {
            println!("time {:<10} n={} {:.3}s acc {:.3}", t.method, t.n_q, t.seconds, t.final_accuracy);
        }
    }
    if let Some(p) = args.next() {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(())
}
