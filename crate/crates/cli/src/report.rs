//! Plain-text summaries printed by `compile` and `report`.

use std::fmt::Write;

use snnc_core::pipeline::Compiled;
use snnc_core::planner::Storage;
use snnc_core::simulator::SimReport;

fn windows(c: &Compiled, layer: usize) -> String {
    match c.plan.assignment(layer) {
        Some((_, a)) => a.windows.iter().map(|w| format!("{}-{}", w.start, w.end)).collect::<Vec<_>>().join(","),
        None => "-".into(),
    }
}

/// Per-layer table of parallel channels, utilization, memories and, when a
/// simulation report is given, predicted cycles.
pub fn plan_table(c: &Compiled, sim: Option<&SimReport>) -> String {
    let plan = &c.plan;
    let mut s = String::new();
    writeln!(
        s,
        "design: B={} T={} r={} replicas={} reorder={} intra-MP={}",
        plan.design.bits,
        plan.design.time_steps,
        plan.design.clamp_range,
        plan.design.conv_replicas,
        plan.design.reorder,
        plan.design.intra_parallel
    )
    .unwrap();
    writeln!(
        s,
        "{:>5}  {:<7} {:>5} {:>7} {:>7}  {:<14} {:>5} {:>6}  {:<22} {:>8} {:>9}",
        "layer", "type", "Para.", "Util%", "Util1%", "S/E", "r_act", "shift", "weights WxH", "cycles", "Time[us]"
    )
    .unwrap();
    for (l, q) in c.quantized.layers.iter().enumerate() {
        let (para, util, util1) = match plan.assignment(l) {
            Some((_, a)) => (a.parallel.to_string(), format!("{:.1}", a.utilization), format!("{:.1}", a.utilization_single)),
            None => {
                let pf = plan.pm_1d.as_ref().map_or(1, |p| p.parallel_features);
                (pf.to_string(), "-".into(), "-".into())
            }
        };
        let weights = match plan.weight_mem(l) {
            Some(w) => format!(
                "{}x{} {}",
                w.width_bits,
                w.rows,
                match w.storage {
                    Storage::OnChipRom => "rom",
                    Storage::ExternalStaged => "ext",
                }
            ),
            None => "-".into(),
        };
        let (cycles, time) = match sim.and_then(|r| r.layers.iter().find(|x| x.layer == l)) {
            Some(x) => (x.cycles.to_string(), format!("{:.1}", x.latency_us)),
            None => ("-".into(), "-".into()),
        };
        let mut win = windows(c, l);
        if win.len() > 14 {
            win.truncate(11);
            win.push_str("...");
        }
        writeln!(
            s,
            "{:>5}  {:<7} {:>5} {:>7} {:>7}  {:<14} {:>5} {:>6}  {:<22} {:>8} {:>9}",
            l,
            q.spec.notation(),
            para,
            util,
            util1,
            win,
            q.r_act,
            q.shift,
            weights,
            cycles,
            time
        )
        .unwrap();
    }
    let b = &plan.buffers;
    writeln!(
        s,
        "buffers: ping {}x{}, pong {}x{}, ping1d {}x{}, pong1d {}x{}",
        b.ping.width, b.ping.height, b.pong.width, b.pong.height, b.ping1d.width, b.ping1d.height, b.pong1d.width, b.pong1d.height
    )
    .unwrap();
    for pm in &plan.pms_2d {
        writeln!(
            s,
            "module {:?} {}x{} replicas {} (ids {}..{})",
            pm.kind,
            pm.rows,
            pm.cols,
            pm.replicas,
            pm.first_module,
            pm.first_module + pm.replicas
        )
        .unwrap();
    }
    if let Some(p) = &plan.pm_1d {
        writeln!(s, "module linear id {} with {} parallel features", p.module, p.parallel_features).unwrap();
    }
    writeln!(s, "modules {}, on-chip memory {} bits, program {} words", plan.module_count, plan.onchip_bits, c.program.len())
        .unwrap();
    if let Some(r) = sim {
        writeln!(
            s,
            "predicted {} cycles, {:.1} us @ {} MHz, {:.3} instructions per clock",
            r.total_cycles, r.latency_us, r.clock_mhz, r.instructions_per_clock
        )
        .unwrap();
    }
    s
}

pub fn quant_table(c: &Compiled) -> String {
    let mut s = String::new();
    writeln!(s, "{:>5}  {:<7} {:>6} {:>6} {:>10} {:>6} {:>8} {:>8}", "layer", "type", "R_wgt", "R_act", "v_hat", "shift", "weights", "clamped")
        .unwrap();
    for l in &c.quant_report.layers {
        writeln!(
            s,
            "{:>5}  {:<7} {:>6} {:>6} {:>10.4} {:>6} {:>8} {:>8}",
            l.layer,
            l.notation,
            l.r_wgt.map_or("-".into(), |r| r.to_string()),
            l.r_act,
            l.v_hat,
            l.shift,
            l.weights,
            l.clamped
        )
        .unwrap();
    }
    s
}
