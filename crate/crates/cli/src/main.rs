use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snnc_core::design::DesignVars;
use snnc_core::encoder::SpikeTrainPlane;
use snnc_core::isa::{disassemble, disassemble_annotated, read_program};
use snnc_core::model::{load_model, FloatTensor};
use snnc_core::oracle::argmax;
use snnc_core::pipeline::{compile, read_bundle, read_tensor, read_tensors, write_bundle, Compiled, Verification};
use snnc_core::simulator::format_trace;
use snnc_core::Network;

mod report;

#[derive(Parser)]
#[command(name = "snnc", version, about = "Compiler and simulator for radix-encoded SNN accelerators")]
struct Cli {
    /// More log output (repeat for debug and trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize, plan and generate code, writing an artifact bundle.
    Compile(CompileArgs),
    /// Simulate a bundle on one input.
    Run(RunArgs),
    /// Compare the simulator with the integer oracle.
    Verify(VerifyArgs),
    /// Print the assembly listing of a program.
    Disasm(DisasmArgs),
    /// Summarize a bundle: parallelism, utilization, memories, predicted cycles.
    Report(ReportArgs),
}

#[derive(Args)]
struct CompileArgs {
    /// Model directory (manifest plus weight blobs).
    #[arg(long)]
    model: PathBuf,
    /// Design variables file; defaults apply when omitted.
    #[arg(long)]
    design: Option<PathBuf>,
    /// Calibration tensor file or directory of `*.bin` tensors.
    #[arg(long)]
    calibration: PathBuf,
    /// Output bundle directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Override the number of convolution module replicas.
    #[arg(long)]
    replicas: Option<usize>,
    /// Override the on-chip weight capacity in bits.
    #[arg(long)]
    capacity_bits: Option<u64>,
    /// Disable instruction reordering.
    #[arg(long)]
    no_reorder: bool,
    /// Disable packing several channels into one module.
    #[arg(long)]
    no_intra_parallel: bool,
}

#[derive(Args)]
struct RunArgs {
    bundle: PathBuf,
    /// Raw float tensor in the model blob encoding.
    input: PathBuf,
    /// Directory for logits.txt, report.txt, report.json and trace.txt.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Record a per-instruction trace (written to trace.txt).
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct VerifyArgs {
    bundle: PathBuf,
    /// Tensor file or directory of tensors.
    input: Option<PathBuf>,
    /// Verify on N random inputs instead.
    #[arg(long, conflicts_with = "input")]
    random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parallel simulations; results are reported in input order.
    #[arg(long, short, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct DisasmArgs {
    /// Program file, or a bundle directory.
    program: PathBuf,
    /// Prefix each line with its address and word.
    #[arg(long)]
    annotate: bool,
}

#[derive(Args)]
struct ReportArgs {
    bundle: PathBuf,
    /// Also print the quantization table.
    #[arg(long)]
    quant: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).init();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<snnc_core::Error>()).map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Compile(a) => cmd_compile(a),
        Command::Run(a) => cmd_run(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Disasm(a) => cmd_disasm(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_compile(a: CompileArgs) -> anyhow::Result<()> {
    let mut dv = match &a.design {
        Some(p) => DesignVars::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => DesignVars::default(),
    };
    if let Some(r) = a.replicas {
        dv = dv.with_replicas(r);
    }
    if let Some(c) = a.capacity_bits {
        dv.onchip_capacity_bits = c;
    }
    dv.reorder &= !a.no_reorder;
    dv.intra_parallel &= !a.no_intra_parallel;
    let net: Network = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let samples = read_tensors(&a.calibration, net.input_shape).context("reading calibration set")?;
    log::info!("{} layers, {} calibration samples", net.layers.len(), samples.len());
    let c = compile(&net, &samples, &dv)?;
    write_bundle(&c, Some(&net), &a.out)?;
    print!("{}", report::plan_table(&c, None));
    println!("bundle written to {}", a.out.display());
    Ok(())
}

fn bundle(path: &Path) -> anyhow::Result<Compiled> {
    read_bundle(path).with_context(|| format!("reading bundle {}", path.display()))
}

fn format_logits(v: &[i64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_run(a: RunArgs) -> anyhow::Result<()> {
    let c = bundle(&a.bundle)?;
    let x: FloatTensor<f32> = read_tensor(&a.input, c.quantized.input_shape)?;
    let input = c.encode(&x)?;
    let mut opts = c.sim_options();
    opts.trace = a.trace;
    let res = c.simulate_with(&input, opts)?;
    println!("logits {}", format_logits(&res.output));
    if let Some(k) = argmax(&res.output) {
        println!("class {k}");
    }
    print!("{}", res.report.to_text());
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        let mut logits: String = res.output.iter().map(|v| format!("{v}\n")).collect();
        if logits.is_empty() {
            logits.push('\n');
        }
        fs::write(out.join("logits.txt"), logits)?;
        fs::write(out.join("report.txt"), res.report.to_text())?;
        fs::write(out.join("report.json"), res.report.to_json() + "\n")?;
        if a.trace {
            fs::write(out.join("trace.txt"), format_trace(&res.trace))?;
        }
    } else if a.trace {
        print!("{}", format_trace(&res.trace));
    }
    Ok(())
}

fn random_inputs(c: &Compiled, n: usize, seed: u64) -> anyhow::Result<Vec<(String, FloatTensor<f32>)>> {
    let shape = c.quantized.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let values: Vec<f32> = (0..shape.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t = FloatTensor::new(vec![shape.channels, shape.height, shape.width], values)?;
            Ok((format!("random{i}"), t))
        })
        .collect()
}

fn named_inputs(c: &Compiled, path: &Path) -> anyhow::Result<Vec<(String, FloatTensor<f32>)>> {
    let tensors = read_tensors(path, c.quantized.input_shape)?;
    if path.is_file() {
        return Ok(vec![(path.display().to_string(), tensors.into_iter().next().expect("one tensor"))]);
    }
    let mut names: Vec<String> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    names.sort();
    Ok(names.into_iter().zip(tensors).collect())
}

fn verify_all(c: &Compiled, inputs: &[SpikeTrainPlane], jobs: usize) -> Vec<snnc_core::Result<Verification>> {
    let jobs = jobs.clamp(1, inputs.len().max(1));
    if jobs == 1 {
        return inputs.iter().map(|x| c.verify(x)).collect();
    }
    let chunk = inputs.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = inputs.chunks(chunk).map(|part| s.spawn(move || part.iter().map(|x| c.verify(x)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("verify worker panicked")).collect()
    })
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<()> {
    let c = bundle(&a.bundle)?;
    let named = match (&a.input, a.random) {
        (Some(p), None) => named_inputs(&c, p)?,
        (None, Some(n)) => random_inputs(&c, n, a.seed)?,
        _ => bail!("give an input path or --random N"),
    };
    let inputs = named.iter().map(|(_, x)| c.encode(x)).collect::<snnc_core::Result<Vec<_>>>()?;
    let results = verify_all(&c, &inputs, a.jobs);
    let mut passed = 0;
    for ((name, _), res) in named.iter().zip(results) {
        let v = res?;
        match v.mismatch {
            None => {
                passed += 1;
                println!("{name}: ok ({} cycles)", v.sim.report.total_cycles);
            }
            Some(i) => println!(
                "{name}: MISMATCH at output {i}: simulator {:?} oracle {:?}",
                v.sim.output.get(i),
                v.oracle.get(i)
            ),
        }
    }
    println!("{passed}/{} bit-exact", named.len());
    if passed != named.len() {
        return Err(snnc_core::Error::Mismatch(format!("{} of {} inputs differ", named.len() - passed, named.len())).into());
    }
    Ok(())
}

fn cmd_disasm(a: DisasmArgs) -> anyhow::Result<()> {
    let path = if a.program.is_dir() { a.program.join("program.bin") } else { a.program.clone() };
    let p = read_program(&path).with_context(|| format!("reading {}", path.display()))?;
    let text = if a.annotate { disassemble_annotated(&p)? } else { disassemble(&p) };
    // A closed pipe (e.g. `| head`) is not an error for a listing.
    match std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let c = bundle(&a.bundle)?;
    // The instruction stream is static, so a zero input predicts the cycle
    // count for every input.
    let shape = c.quantized.input_shape;
    let zeros = SpikeTrainPlane::zeros(c.quantized.cfg.time_steps, shape.channels, shape.height);
    let sim = c.simulate(&c.quantized.shape_input(zeros))?;
    print!("{}", report::plan_table(&c, Some(&sim.report)));
    if a.quant {
        print!("{}", report::quant_table(&c));
    }
    Ok(())
}
