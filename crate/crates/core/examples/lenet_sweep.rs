//! Compiles the LeNet fixture and prints simulated latency for a range of
//! convolution replica counts, with and without instruction reordering.
//!
//! cargo run --release -p snnc-core --example lenet_sweep

use std::path::PathBuf;

use snnc_core::design::DesignVars;
use snnc_core::model::load_model;
use snnc_core::pipeline::{compile, read_tensors};
use snnc_core::Network;

fn main() -> snnc_core::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures");
    let net: Network = load_model(fixtures.join("lenet"))?;
    let samples = read_tensors(fixtures.join("calibration"), net.input_shape)?;
    let base = DesignVars::load(fixtures.join("lenet.toml"))?;
    let input = read_tensors::<f32>(fixtures.join("inputs"), net.input_shape)?.remove(0);
    println!("replicas  cycles(reorder)  cycles(plain)  reduction  ipc    us");
    for r in 1..=10 {
        let mut with = base.clone().with_replicas(r);
        with.reorder = true;
        let mut without = with.clone();
        without.reorder = false;
        let a = compile(&net, &samples, &with)?;
        let b = compile(&net, &samples, &without)?;
        let x = a.encode(&input)?;
        let va = a.verify(&x)?;
        let vb = b.verify(&x)?;
        assert!(va.passed() && vb.passed(), "simulator disagrees with the oracle");
        let (ca, cb) = (va.sim.report.total_cycles, vb.sim.report.total_cycles);
        println!(
            "{r:>8}  {ca:>15}  {cb:>13}  {:>8.1}%  {:.3}  {:.1}",
            100.0 * (cb - ca) as f64 / cb as f64,
            va.sim.report.instructions_per_clock,
            va.sim.report.latency_us
        );
        if r == 1 {
            print!("{}", va.sim.report.to_text());
        }
    }
    Ok(())
}
