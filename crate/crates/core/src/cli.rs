//! The `widthfold` command-line front end.
//!
//! Every command prints one JSON report on stdout and diagnostics on stderr.
//! Exit codes: 0 success, 1 verification failed, 2 usage or data error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blockdiag::{mac_report, MacReport};
use crate::error::Error;
use crate::fold::{FoldFactor, FoldReason, DEFAULT_ALIGN};
use crate::ir::{
    cost, infer_shapes, interpret_with, load_model, save_model, width_fold_pass, Decision,
    Execution, Graph, Lowering, NodeKind, Op, PassOptions, RewriteReport,
};
use crate::synth::{self, Values};
use crate::tensor::{max_abs_diff, read_bundle, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Name of the rewrite report written next to a transformed model.
pub const REPORT_FILE: &str = "rewrite_report.json";

#[derive(Debug, Parser)]
#[command(name = "widthfold", version, about = "Fold the width axis of narrow-channel layers into channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the folding pass on a model directory and write the result.
    Apply {
        model_in: PathBuf,
        model_out: PathBuf,
        /// Folding factor, or `auto` for the smallest aligning factor.
        #[arg(long, default_value = "auto")]
        factor: FoldFactor,
        #[arg(long, default_value_t = DEFAULT_ALIGN)]
        align: usize,
        #[arg(long, value_enum, default_value_t = LoweringArg::Grouped)]
        lowering: LoweringArg,
    },
    /// Check that two models compute the same outputs.
    Verify {
        model_a: PathBuf,
        model_b: PathBuf,
        /// Tensor bundle with one tensor per graph input.
        #[arg(long, conflicts_with_all = ["random", "trials"])]
        inputs: Option<PathBuf>,
        /// Seed for random inputs.
        #[arg(long)]
        random: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, default_value_t = 1e-5)]
        atol: f32,
        /// Draw random inputs from [-1, 1) instead of small integers.
        #[arg(long)]
        float_data: bool,
    },
    /// Report channel alignment and fold opportunities per node.
    Inspect {
        model: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALIGN)]
        align: usize,
    },
    /// Time the original model against its folded lowerings.
    Bench {
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = PathArg::All)]
        path: PathArg,
        #[arg(long, default_value = "auto")]
        factor: FoldFactor,
        #[arg(long, default_value_t = DEFAULT_ALIGN)]
        align: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a sample model directory.
    Example {
        #[arg(value_enum)]
        name: ExampleArg,
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Uniform float weights instead of small integers.
        #[arg(long)]
        float_data: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LoweringArg {
    Dense,
    Grouped,
}

impl From<LoweringArg> for Lowering {
    fn from(l: LoweringArg) -> Self {
        match l {
            LoweringArg::Dense => Lowering::Dense,
            LoweringArg::Grouped => Lowering::Grouped,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathArg {
    All,
    Dense,
    Grouped,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExampleArg {
    /// 1x32x64x1 input, 5x1 kernel, one output channel.
    Golden,
    /// Same with width 7.
    Fallback,
    /// 3-channel input, 7x1 kernel, 16 output channels.
    Rgb,
    /// 8-channel input.
    Aligned,
    /// Two convolution branches with separate outputs.
    TwoBranch,
    /// 64x3 by 3x4 projection.
    Matmul,
}

/// A failed command: exit code plus message for stderr.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

/// Parses `std::env::args` and runs the command. Returns the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Apply {
            model_in,
            model_out,
            factor,
            align,
            lowering,
        } => cmd_apply(&model_in, &model_out, factor, align, lowering.into()),
        Command::Verify {
            model_a,
            model_b,
            inputs,
            random,
            trials,
            atol,
            float_data,
        } => {
            let source = match inputs {
                Some(dir) => InputSource::Bundle(dir),
                None => InputSource::Random {
                    seed: random.unwrap_or(0),
                    trials: trials.unwrap_or(10),
                    values: if float_data { Values::Uniform } else { Values::SmallIntegers },
                },
            };
            cmd_verify(&model_a, &model_b, &source, atol)
        }
        Command::Inspect { model, align } => cmd_inspect(&model, align),
        Command::Bench {
            model,
            reps,
            path,
            factor,
            align,
            seed,
        } => cmd_bench(&model, reps, path, factor, align, seed),
        Command::Example {
            name,
            dir,
            seed,
            float_data,
        } => cmd_example(name, &dir, seed, float_data),
    };
    match result {
        Ok((json, code)) => {
            use std::io::Write;
            // a closed pipe is not worth a panic
            let _ = writeln!(std::io::stdout().lock(), "{json}");
            code
        }
        Err(f) => {
            eprintln!("widthfold: {}", f.message);
            f.code
        }
    }
}

type Outcome = Result<(String, i32), Failure>;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

fn check_align(align: usize) -> Result<(), Failure> {
    if align == 0 {
        return Err(usage("--align must be at least 1"));
    }
    Ok(())
}

fn cmd_apply(input: &Path, output: &Path, factor: FoldFactor, align: usize, lowering: Lowering) -> Outcome {
    check_align(align)?;
    let g = load_model(input)?;
    let (folded, report) = width_fold_pass(&g, PassOptions { factor, align, lowering })?;
    save_model(&folded, output)?;
    let json = to_json(&report);
    let path = output.join(REPORT_FILE);
    fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    for d in &report.nodes {
        match &d.decision {
            Decision::Applied { plan, .. } => eprintln!("{}: folded with F={}", d.node, plan.factor),
            Decision::Skipped { reason } => eprintln!("{}: skipped ({reason})", d.node),
        }
    }
    Ok((json, EXIT_OK))
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone)]
enum InputSource {
    Bundle(PathBuf),
    Random { seed: u64, trials: usize, values: Values },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputDiff {
    pub name: String,
    /// Largest `|a - b|` over all trials; `null` if a NaN was involved.
    pub max_abs_diff: Option<f32>,
    pub bitwise_equal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub atol: f32,
    pub trials: usize,
    pub seed: Option<u64>,
    /// Every input value was an integer.
    pub integer_data: bool,
    pub outputs: Vec<OutputDiff>,
    /// With integer data: whether every output matched bitwise. `null` otherwise.
    pub exact_on_integer_data: Option<bool>,
    /// The rewrite report stored with the second model, if any.
    pub pass_report: Option<RewriteReport>,
    pub verdict: Verdict,
}

/// Named shapes of the inputs and of the outputs.
type Signature = (Vec<(String, Vec<usize>)>, Vec<(String, Vec<usize>)>);

fn signature(g: &Graph) -> Result<Signature, Failure> {
    let shapes = infer_shapes(g)?;
    let inputs = g.inputs().into_iter().map(|(id, s)| (id.to_string(), s.to_vec())).collect();
    let outputs = g.outputs().into_iter().map(|id| (id.to_string(), shapes[id].clone())).collect();
    Ok((inputs, outputs))
}

fn run_model(g: &Graph, inputs: &BTreeMap<String, Tensor>, exec: Execution) -> Result<BTreeMap<String, Tensor>, Failure> {
    interpret_with(g, inputs, exec).map_err(|e| match e {
        Error::LoweringMismatch(_) => Failure {
            code: EXIT_VERIFY_FAILED,
            message: e.to_string(),
        },
        e => e.into(),
    })
}

fn cmd_verify(a_dir: &Path, b_dir: &Path, source: &InputSource, atol: f32) -> Outcome {
    if atol.is_nan() || atol < 0.0 {
        return Err(usage("--atol must be a non-negative number"));
    }
    let a = load_model(a_dir)?;
    let b = load_model(b_dir)?;
    let (sig_a, sig_b) = (signature(&a)?, signature(&b)?);
    if sig_a != sig_b {
        return Err(usage(format!(
            "signature mismatch: {} has inputs {:?} and outputs {:?}, {} has inputs {:?} and outputs {:?}",
            a_dir.display(),
            sig_a.0,
            sig_a.1,
            b_dir.display(),
            sig_b.0,
            sig_b.1
        )));
    }
    let pass_report = read_pass_report(b_dir)?;

    let trials: Vec<BTreeMap<String, Tensor>> = match source {
        InputSource::Bundle(dir) => {
            let bundle = read_bundle(dir)?;
            vec![bundle.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()]
        }
        InputSource::Random { seed, trials, values } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            (0..*trials).map(|_| synth::random_inputs(&a, *values, &mut rng)).collect()
        }
    };
    let integer_data = trials
        .iter()
        .flat_map(|t| t.values())
        .all(|t| t.data().iter().all(|v| v.fract() == 0.0));

    let exec = Execution {
        lowering: None,
        cross_check: true,
    };
    let mut outputs: Vec<OutputDiff> = sig_a
        .1
        .iter()
        .map(|(name, _)| OutputDiff {
            name: name.clone(),
            max_abs_diff: Some(0.0),
            bitwise_equal: true,
        })
        .collect();
    for inputs in &trials {
        let ya = run_model(&a, inputs, exec)?;
        let yb = run_model(&b, inputs, exec)?;
        for out in &mut outputs {
            let (ta, tb) = (&ya[&out.name], &yb[&out.name]);
            let d = max_abs_diff(ta, tb)?;
            out.max_abs_diff = match out.max_abs_diff {
                Some(m) if !d.is_nan() => Some(m.max(d)),
                _ => None,
            };
            out.bitwise_equal &= ta.bitwise_eq(tb);
        }
    }
    let pass = outputs.iter().all(|o| o.max_abs_diff.is_some_and(|d| d <= atol));
    for o in &outputs {
        match o.max_abs_diff {
            Some(d) if d <= atol => {}
            Some(d) => eprintln!("{}: max_abs_diff {d:e} exceeds {atol:e}", o.name),
            None => eprintln!("{}: NaN in outputs", o.name),
        }
    }
    let report = VerifyReport {
        atol,
        trials: trials.len(),
        seed: match source {
            InputSource::Random { seed, .. } => Some(*seed),
            InputSource::Bundle(_) => None,
        },
        integer_data,
        exact_on_integer_data: integer_data.then(|| outputs.iter().all(|o| o.bitwise_equal)),
        outputs,
        pass_report,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
    };
    let code = if pass { EXIT_OK } else { EXIT_VERIFY_FAILED };
    Ok((to_json(&report), code))
}

fn read_pass_report(dir: &Path) -> Result<Option<RewriteReport>, Failure> {
    let path = dir.join(REPORT_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------- inspect

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Suggestion {
    pub factor: usize,
    pub folded_channels: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeAlignment {
    pub node: String,
    pub kind: NodeKind,
    pub in_channels: usize,
    pub aligned: bool,
    /// `"aligned"` or `"not a multiple of N"`.
    pub status: String,
    pub suggestion: Option<Suggestion>,
    /// Why a misaligned node cannot be folded.
    pub blocked_by: Option<FoldReason>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InspectReport {
    pub align: usize,
    pub nodes: Vec<NodeAlignment>,
    pub suggestions: usize,
}

fn cmd_inspect(model: &Path, align: usize) -> Outcome {
    check_align(align)?;
    let g = load_model(model)?;
    let shapes = infer_shapes(&g)?;
    let (_, report) = width_fold_pass(
        &g,
        PassOptions {
            factor: FoldFactor::Auto,
            align,
            lowering: Lowering::Grouped,
        },
    )?;
    let nodes: Vec<NodeAlignment> = report
        .nodes
        .iter()
        .map(|d| {
            let node = g.node(&d.node).expect("reported nodes exist");
            let x = &shapes[&node.inputs[0]];
            let in_channels = match d.kind {
                NodeKind::Conv2d => x[3],
                NodeKind::Matmul => x[1],
            };
            let aligned = in_channels % align == 0;
            let (suggestion, blocked_by) = match &d.decision {
                Decision::Applied { plan, .. } => (
                    Some(Suggestion {
                        factor: plan.factor,
                        folded_channels: plan.folded_input_shape[3],
                    }),
                    None,
                ),
                Decision::Skipped { .. } if aligned => (None, None),
                Decision::Skipped { reason } => (None, Some(*reason)),
            };
            NodeAlignment {
                node: d.node.clone(),
                kind: d.kind,
                in_channels,
                aligned,
                status: if aligned {
                    "aligned".into()
                } else {
                    format!("not a multiple of {align}")
                },
                suggestion,
                blocked_by,
            }
        })
        .collect();
    for n in &nodes {
        match (&n.suggestion, n.blocked_by) {
            (Some(s), _) => eprintln!(
                "{}: {} input channels, {}; fold with F={} for {} channels",
                n.node, n.in_channels, n.status, s.factor, s.folded_channels
            ),
            (None, Some(r)) => eprintln!("{}: {} input channels, {}; cannot fold: {r}", n.node, n.in_channels, n.status),
            (None, None) => eprintln!("{}: {} input channels, {}", n.node, n.in_channels, n.status),
        }
    }
    let report = InspectReport {
        align,
        suggestions: nodes.iter().filter(|n| n.suggestion.is_some()).count(),
        nodes,
    };
    Ok((to_json(&report), EXIT_OK))
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchPath {
    Original,
    FoldedDense,
    FoldedGrouped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeMacs {
    pub node: String,
    pub factor: usize,
    pub macs: MacReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathStats {
    pub path: BenchPath,
    /// Multiply-accumulates per run.
    pub macs: u64,
    /// Activation, weight and result floats read or written by compute nodes per run.
    pub floats_moved: u64,
    pub min_ms: f64,
    pub median_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub factor: String,
    pub align: usize,
    pub reps: usize,
    pub seed: u64,
    /// MAC accounting of every folded node.
    pub nodes: Vec<NodeMacs>,
    pub paths: Vec<PathStats>,
}

fn floats_moved(g: &Graph, grouped: bool) -> Result<u64, Failure> {
    let shapes = infer_shapes(g)?;
    let len = |id: &String| shapes[id].iter().product::<usize>() as u64;
    let mut total = 0;
    for n in g.nodes() {
        total += match &n.op {
            Op::Conv2d { fold, .. } => {
                let w = match fold {
                    Some(attr) if grouped => len(&n.inputs[1]) / attr.factor as u64,
                    _ => len(&n.inputs[1]),
                };
                len(&n.inputs[0]) + w + len(&n.id)
            }
            Op::Matmul => len(&n.inputs[0]) + len(&n.inputs[1]) + len(&n.id),
            Op::BiasAdd => 2 * len(&n.inputs[0]) + len(&n.inputs[1]),
            _ => 0,
        };
    }
    Ok(total)
}

fn time_runs(
    g: &Graph,
    inputs: &BTreeMap<String, Tensor>,
    exec: Execution,
    reps: usize,
) -> Result<(f64, f64), Failure> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = interpret_with(g, inputs, exec)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        (times[reps / 2 - 1] + times[reps / 2]) / 2.0
    };
    Ok((times[0], median))
}

fn cmd_bench(model: &Path, reps: usize, path: PathArg, factor: FoldFactor, align: usize, seed: u64) -> Outcome {
    check_align(align)?;
    if reps == 0 {
        return Err(usage("--reps must be at least 1"));
    }
    let g = load_model(model)?;
    let (folded, report) = width_fold_pass(
        &g,
        PassOptions {
            factor,
            align,
            lowering: Lowering::Grouped,
        },
    )?;

    let nodes: Vec<NodeMacs> = report
        .nodes
        .iter()
        .filter_map(|d| match &d.decision {
            Decision::Applied { plan, .. } => Some(NodeMacs {
                node: d.node.clone(),
                factor: plan.factor,
                macs: mac_report(plan, align),
            }),
            Decision::Skipped { .. } => None,
        })
        .collect();
    let original = cost(&g, align)?.macs;
    let extra = |field: fn(&MacReport) -> u64| -> u64 {
        nodes.iter().map(|n| field(&n.macs) - n.macs.original.0).sum()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = synth::random_inputs(&g, Values::Uniform, &mut rng);

    let mut paths = Vec::new();
    let mut measure = |which: BenchPath, graph: &Graph, exec: Execution, macs: u64, grouped: bool| -> Result<(), Failure> {
        let (min_ms, median_ms) = time_runs(graph, &inputs, exec, reps)?;
        paths.push(PathStats {
            path: which,
            macs,
            floats_moved: floats_moved(graph, grouped)?,
            min_ms,
            median_ms,
        });
        Ok(())
    };
    measure(BenchPath::Original, &g, Execution::default(), original, false)?;
    if path != PathArg::Grouped {
        let exec = Execution {
            lowering: Some(Lowering::Dense),
            cross_check: false,
        };
        measure(BenchPath::FoldedDense, &folded, exec, original + extra(|m| m.dense_folded.0), false)?;
    }
    if path != PathArg::Dense {
        let exec = Execution {
            lowering: Some(Lowering::Grouped),
            cross_check: false,
        };
        measure(BenchPath::FoldedGrouped, &folded, exec, original + extra(|m| m.grouped_folded.0), true)?;
    }
    let report = BenchReport {
        factor: report.factor.clone(),
        align,
        reps,
        seed,
        nodes,
        paths,
    };
    Ok((to_json(&report), EXIT_OK))
}

// ---------------------------------------------------------------- example

fn cmd_example(name: ExampleArg, dir: &Path, seed: u64, float_data: bool) -> Outcome {
    let values = if float_data { Values::Uniform } else { Values::SmallIntegers };
    let g = match name {
        ExampleArg::Golden => synth::golden_model(values, seed),
        ExampleArg::Fallback => synth::indivisible_width_model(values, seed),
        ExampleArg::Rgb => synth::rgb_model(values, seed),
        ExampleArg::Aligned => synth::aligned_model(values, seed),
        ExampleArg::TwoBranch => synth::two_branch_model(values, seed),
        ExampleArg::Matmul => synth::matmul_model(64, 3, 4, values, seed),
    };
    save_model(&g, dir)?;
    let summary = serde_json::json!({
        "model": dir.display().to_string(),
        "inputs": g.inputs().into_iter().map(|(id, s)| serde_json::json!({"name": id, "shape": s})).collect::<Vec<_>>(),
        "outputs": g.outputs(),
        "nodes": g.nodes().len(),
    });
    Ok((to_json(&summary), EXIT_OK))
}
