// Why the best plan wins: memory and communication bars plus the effect of
// bumping each component.

use longseq_plan::{explain, search, BandwidthProfile, ClusterConfig, ComputeModel, Preset, SearchOptions};

fn run_example() -> longseq_plan::Result<()> {
    let model = Preset::B7.config(262_144, 4_194_304);
    let cluster = ClusterConfig::new(64, 8, 80_000_000_000);
    let report = search(
        &model,
        &cluster,
        &BandwidthProfile::synthetic_a100(),
        &ComputeModel::a100(),
        &SearchOptions { top_k: 3, ..SearchOptions::default() },
    )?;
    if report.is_empty() {
        println!("no feasible plan");
        return Ok(());
    }
    print!("{}", explain(&report, 0)?);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
