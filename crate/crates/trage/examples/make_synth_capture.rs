//! Generate a synthetic labeled capture for smoke-testing the CLI.
//!
//! Writes `traffic.pcap` (two fictional TCP application protocols) and a
//! matching `flows.csv` manifest into the given directory:
//!
//! ```sh
//! cargo run --release -p trage --example make_synth_capture -- /tmp/demo 40 7
//! trage pretrain --pcap /tmp/demo/traffic.pcap --output-dir /tmp/demo/run
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use trage::synth::two_protocol_dataset;

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let (dir, flows_per_class, seed) = match (args.next(), args.next(), args.next()) {
        (Some(d), f, s) => {
            let flows = f.as_deref().unwrap_or("40").parse::<usize>();
            let seed = s.as_deref().unwrap_or("7").parse::<u64>();
            match (flows, seed) {
                (Ok(f), Ok(s)) => (PathBuf::from(d), f, s),
                _ => return usage("FLOWS_PER_CLASS and SEED must be unsigned integers"),
            }
        }
        _ => return usage("missing output directory"),
    };

    let ds = two_protocol_dataset(flows_per_class, seed);
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("cannot create {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    let mut manifest = String::from("pcap,flow,label\n");
    for (flow, label) in ds.labels.iter().enumerate() {
        writeln!(manifest, "traffic.pcap,{flow},{label}").unwrap();
    }
    let pcap = dir.join("traffic.pcap");
    let csv = dir.join("flows.csv");
    if let Err(e) = fs::write(&pcap, &ds.pcap).and_then(|()| fs::write(&csv, manifest)) {
        eprintln!("cannot write into {}: {e}", dir.display());
        return ExitCode::FAILURE;
    }
    println!(
        "wrote {} ({} flows, 2 classes) and {}",
        pcap.display(),
        ds.labels.len(),
        csv.display()
    );
    ExitCode::SUCCESS
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("{msg}\nusage: make_synth_capture <DIR> [FLOWS_PER_CLASS=40] [SEED=7]");
    ExitCode::FAILURE
}
