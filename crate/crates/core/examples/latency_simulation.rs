// Schedules the conventional and fused operator graphs of a Llama-7B-like
// block on the two-engine cost model and prints where the cycles went.

use normfuse::block::{build_graph, BlockConfig, Variant};
use normfuse::simulator::{compare, CostModel, LatencyReport};

pub fn run_example() -> normfuse::Result<LatencyReport> {
    let cfg = BlockConfig {
        d_model: 4096,
        n_heads: 32,
        seq_len: 2048,
        mlp_hidden: 11008,
        variant: Variant::LlamaSwiglu,
        epsilon_ln: 1e-6,
    };
    let cm = CostModel::default_calibrated();
    let report = compare(&build_graph(&cfg, false)?, &build_graph(&cfg, true)?, &cm)?;

    println!("conventional {:>10} cycles", report.conventional_total);
    println!("fused        {:>10} cycles", report.fused_total);
    for s in &report.per_site_savings {
        println!(
            "  {:<14} collective {:>8}  matmul {:>8}  hidden {:>8}",
            s.site.name(),
            s.collective_cycles,
            s.matmul_cycles,
            s.hidden_cycles
        );
    }
    println!("speedup {:.2}%", report.speedup_percent);
    Ok(report)
}

#[allow(dead_code)]
fn main() -> normfuse::Result<()> {
    run_example().map(|_| ())
}
