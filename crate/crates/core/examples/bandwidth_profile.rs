// Bandwidth lookups on the synthetic A100 profile. Pass a path to also write
// the profile as CSV.

use longseq_plan::{Axis, BandwidthProfile, Collective};

fn run_example(out: Option<&str>) -> longseq_plan::Result<()> {
    let profile = BandwidthProfile::synthetic_a100();
    for axis in Axis::ALL {
        for bytes in [64e3, 1e6, 16e6, 256e6] {
            let w = profile.lookup_bandwidth(Collective::AllGather, 8, axis, bytes)?;
            let t = profile.collective_time(Collective::AllGather, bytes, 8, axis)?;
            println!("all-gather x8 {axis:<6} {:>8.0} KB: {:>7.1} GB/s, {:>9.1} us", bytes / 1e3, w / 1e9, t * 1e6);
        }
    }
    if let Some(path) = out {
        profile.write_csv(std::fs::File::create(path)?)?;
        println!("wrote {path}");
    }
    Ok(())
}

fn main() {
    let path = std::env::args().nth(1);
    if let Err(e) = run_example(path.as_deref()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
