//! `obbkit` command line: IoU queries, codec checks, loss sweeps, label
//! assignment, detection evaluation, a head forward demo, and the oracle
//! suites.
//!
//! Exit codes: 0 success, 1 failed oracle or invariant checks, 2 usage or
//! input errors. Angles are radians unless `--degrees` is given. Outputs are
//! deterministic for a fixed argv and seed; `OBBKIT_THREADS` caps internal
//! parallelism without affecting results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use obbkit::assign::{cdla_assign, sample};
use obbkit::codec::{canonicalize, decode, encode};
use obbkit::dataio::{
    self, AssignOutput, ClassTable,
};
use obbkit::eval::{evaluate_classes, mean_ap, ApMode, GtRecord};
use obbkit::geometry::{iou_matrix, rotated_iou, IoUMatrix, OBB};
use obbkit::head::{conformer_forward, conformer_fused, conv2d, mhsa_attention, ConvParams, FeatureMap, HeadParams};
use obbkit::loss::{loss_sweep, reg_loss_grad};
use obbkit::oracle::{assignment_suite, geometry_suite, gradient_suite, SuiteReport};
use obbkit::DeltaOffsets;

#[derive(Parser)]
#[command(name = "obbkit", version, about = "Oriented bounding box toolkit")]
struct Cli {
    /// Seed for every randomized subcommand
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Interpret input angles as degrees
    #[arg(long, global = true)]
    degrees: bool,

    /// Also write the primary output to this path
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rotated IoU of two boxes given as cx,cy,w,h,theta
    Iou {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Offsets of a ground-truth box relative to an anchor
    Encode {
        #[arg(long)]
        gt: String,
        #[arg(long)]
        anchor: String,
    },
    /// Box recovered from offsets tx,ty,tw,th,tsin,tcos and an anchor
    Decode {
        #[arg(long)]
        offsets: String,
        #[arg(long)]
        anchor: String,
    },
    /// Angle-loss and 1-IoU curves over a predicted-angle grid (CSV)
    LossSweep {
        #[arg(long = "theta-g", allow_hyphen_values = true)]
        theta_g: String,
        #[arg(long)]
        ar: f64,
        #[arg(long)]
        grid: usize,
    },
    /// Label a scene and sample the training subset
    Assign {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        budget: usize,
    },
    /// Re-sample a previous assignment output under a new budget or seed
    Sample {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        budget: usize,
    },
    /// Per-class AP and mAP of detections against DOTA-format ground truth
    Eval {
        #[arg(long)]
        dets: PathBuf,
        /// Directory of annotation .txt files; file stem = image id
        #[arg(long)]
        gts: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = Mode::Voc07)]
        mode: Mode,
        /// Class-name table, one name per line (line number = class id)
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Seeded forward pass of the conformer head with invariant checks
    HeadDemo {
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, default_value_t = 16)]
        h: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 1)]
        anchors: usize,
        /// Load head parameters from a JSON tensor bundle instead of seeding
        /// (--c/--heads/--anchors are then taken from the bundle)
        #[arg(long)]
        params: Option<PathBuf>,
        /// Write the head parameters used to a JSON tensor bundle
        #[arg(long = "dump-params")]
        dump_params: Option<PathBuf>,
    },
    /// Run the geometry, gradient and assignment oracle suites
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Voc07,
    Voc12,
}

impl From<Mode> for ApMode {
    fn from(m: Mode) -> ApMode {
        match m {
            Mode::Voc07 => ApMode::Voc07,
            Mode::Voc12 => ApMode::Voc12,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(err) = init_thread_pool() {
        eprintln!("error: {err:#}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn init_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("OBBKIT_THREADS") {
        let threads: usize = raw
            .parse()
            .with_context(|| format!("OBBKIT_THREADS must be a positive integer, got {raw:?}"))?;
        if threads == 0 {
            bail!("OBBKIT_THREADS must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("failed to configure thread pool")?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Iou { a, b } => {
            let a = parse_box(a, cli.degrees).context("--a")?;
            let b = parse_box(b, cli.degrees).context("--b")?;
            emit(cli, &format!("{:.6}\n", rotated_iou(&a, &b)))?;
            Ok(0)
        }
        Command::Encode { gt, anchor } => {
            let gt = parse_box(gt, cli.degrees).context("--gt")?;
            let anchor = parse_box(anchor, cli.degrees).context("--anchor")?;
            let offsets = encode(&gt, &anchor);
            emit(cli, &format!("{}\n", serde_json::to_string(&offsets)?))?;
            Ok(0)
        }
        Command::Decode { offsets, anchor } => {
            let offsets = parse_offsets(offsets).context("--offsets")?;
            let anchor = parse_box(anchor, cli.degrees).context("--anchor")?;
            let six = decode(&offsets, &anchor);
            let canonical = canonicalize(&six).context("decoded box cannot be canonicalized")?;
            let payload = serde_json::json!({ "obb6": six, "canonical": canonical });
            emit(cli, &format!("{payload}\n"))?;
            Ok(0)
        }
        Command::LossSweep { theta_g, ar, grid } => {
            let theta_g = parse_angle(theta_g, cli.degrees).context("--theta-g")?;
            let out = cli.out.as_ref().context("loss-sweep requires --out")?;
            let rows = loss_sweep(theta_g, *ar, *grid)?;
            dataio::write_curve_csv(&rows, out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} rows", rows.len());
            Ok(0)
        }
        Command::Assign { scene, budget } => {
            let out = cli.out.as_ref().context("assign requires --out")?;
            let text = fs::read_to_string(scene)
                .with_context(|| format!("reading {}", scene.display()))?;
            let scene = dataio::read_scene_json(&text)?;
            let proposals = scene.proposal_boxes();
            if proposals.is_empty() {
                bail!("scene has no proposals");
            }
            let gts = scene.gt_boxes();
            let ious = if gts.is_empty() {
                IoUMatrix::from_values(proposals.len(), 0, vec![])?
            } else {
                iou_matrix(&proposals, &gts)?
            };
            let scores = scene.score_records()?;
            let result = cdla_assign(&ious, scores.as_deref(), &scene.gt_classes())?;
            let sampled = sample(&result, *budget, cli.seed)?;
            let output = AssignOutput::new(&result, sampled);
            fs::write(out, serde_json::to_string_pretty(&output)?)
                .with_context(|| format!("writing {}", out.display()))?;
            let count = |name: &str| output.labels.iter().filter(|l| *l == name).count();
            println!(
                "labels: {} positive, {} neg_normal, {} neg_focus, {} ignore",
                count("positive"),
                count("neg_normal"),
                count("neg_focus"),
                count("ignore")
            );
            println!(
                "sampled: {} positives, {} focus, {} normal (budget {})",
                output.sample.positives.len(),
                output.sample.focus_negatives.len(),
                output.sample.normal_negatives.len(),
                output.sample.budget
            );
            Ok(0)
        }
        Command::Sample { labels, budget } => {
            let text = fs::read_to_string(labels)
                .with_context(|| format!("reading {}", labels.display()))?;
            let output: AssignOutput = serde_json::from_str(&text)?;
            let assignment = output.to_assignment()?;
            let sampled = sample(&assignment, *budget, cli.seed)?;
            emit(cli, &format!("{}\n", serde_json::to_string_pretty(&sampled)?))?;
            Ok(0)
        }
        Command::Eval { dets, gts, iou, mode, classes } => {
            if !(*iou > 0.0 && *iou < 1.0) {
                bail!("--iou must lie in (0, 1), got {iou}");
            }
            let det_text =
                fs::read_to_string(dets).with_context(|| format!("reading {}", dets.display()))?;
            let detections = dataio::read_detections_jsonl(&det_text)?;
            let (gt_records, table) = load_gt_dir(gts, classes.as_deref())?;
            let mut report = String::new();
            if classes.is_none() {
                for (id, name) in table.names().iter().enumerate() {
                    writeln!(report, "class {id} = {name}")?;
                }
            }
            let per_class = evaluate_classes(&detections, &gt_records, *iou, (*mode).into());
            for (class_id, ap) in &per_class {
                let name = table
                    .name_of(*class_id)
                    .map_or_else(|| class_id.to_string(), str::to_string);
                writeln!(report, "AP[{name}] = {ap:.6}")?;
            }
            writeln!(report, "mAP = {:.6}", mean_ap(&per_class)?)?;
            emit(cli, &report)?;
            Ok(0)
        }
        Command::HeadDemo { c, h, w, heads, anchors, params, dump_params } => {
            let head_params = match params {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing parameter bundle {}", path.display()))?
                }
                None => HeadParams::seeded(*c, *heads, *anchors, cli.seed)?,
            };
            if let Some(path) = dump_params {
                fs::write(path, serde_json::to_string(&head_params)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let (report, ok) = head_demo(&head_params, *h, *w, cli.seed)?;
            emit(cli, &report)?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::OracleCheck { trials } => {
            if *trials == 0 {
                bail!("--trials must be >= 1");
            }
            let (report, ok) = oracle_check(*trials, cli.seed);
            emit(cli, &report)?;
            Ok(if ok { 0 } else { 1 })
        }
    }
}

/// Print to stdout and mirror to `--out` when given.
fn emit(cli: &Cli, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(path) = &cli.out {
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn parse_floats(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != expected {
        bail!("{what} needs {expected} comma-separated numbers, got {}", parts.len());
    }
    parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {p:?} in {what}"))
        })
        .collect()
}

fn parse_box(s: &str, degrees: bool) -> Result<OBB> {
    let v = parse_floats(s, 5, "box")?;
    let theta = if degrees { v[4].to_radians() } else { v[4] };
    OBB::canonical(v[0], v[1], v[2], v[3], theta).map_err(Into::into)
}

fn parse_offsets(s: &str) -> Result<DeltaOffsets> {
    let v = parse_floats(s, 6, "offsets")?;
    Ok(DeltaOffsets::new(v[0], v[1], v[2], v[3], v[4], v[5]))
}

fn parse_angle(s: &str, degrees: bool) -> Result<f64> {
    let v: f64 = s.trim().parse().with_context(|| format!("bad angle {s:?}"))?;
    Ok(if degrees { v.to_radians() } else { v })
}

/// Ground truths from a directory of DOTA annotation files. Without an
/// explicit table the classes are the sorted category names found in the
/// files, and the derived mapping is echoed in the report.
fn load_gt_dir(dir: &Path, classes: Option<&Path>) -> Result<(Vec<GtRecord>, ClassTable)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .txt annotation files in {}", dir.display());
    }
    let mut parsed = Vec::new();
    for path in &files {
        let image_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .context("annotation file has no stem")?
            .to_string();
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let anns = dataio::parse_dota(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        parsed.push((image_id, anns));
    }
    let table = match classes {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            ClassTable::from_text(&text)
        }
        None => {
            let mut names: Vec<String> = parsed
                .iter()
                .flat_map(|(_, anns)| anns.iter().map(|a| a.category.clone()))
                .collect();
            names.sort();
            names.dedup();
            ClassTable::from_names(names)
        }
    };
    let mut gts = Vec::new();
    for (image_id, anns) in &parsed {
        gts.extend(dataio::annotations_to_gts(anns, image_id, &table)?);
    }
    Ok((gts, table))
}

fn head_demo(params: &HeadParams, h: usize, w: usize, seed: u64) -> Result<(String, bool)> {
    let c = params.conv_vanilla.c_in();
    let anchors = params.cls_proj.c_out();
    let input = FeatureMap::random(1, c, h, w, seed.wrapping_add(1));
    let fused = conformer_fused(&input, params)?;
    let (cls, reg) = conformer_forward(&input, params)?;

    let mut report = String::new();
    writeln!(report, "input:  {:?}", input.dim())?;
    writeln!(report, "fused:  {:?}", fused.dim())?;
    writeln!(report, "cls:    {:?}", cls.dim())?;
    writeln!(report, "reg:    {:?}", reg.dim())?;

    let mut all_ok = true;
    let mut check = |report: &mut String, name: &str, ok: bool| -> Result<()> {
        writeln!(report, "check {name}: {}", if ok { "ok" } else { "FAIL" })?;
        all_ok &= ok;
        Ok(())
    };

    // channel budget and slice recovery
    let budget_ok = fused.dim().1 == c && cls.dim().1 == anchors && reg.dim().1 == 6 * anchors;
    check(&mut report, "channel budget C/4 + C/4 + C/2", budget_ok)?;
    let vanilla = conv2d(&input, &params.conv_vanilla)?;
    let slices_ok = fused
        .data()
        .slice(ndarray::s![.., 0..c / 4, .., ..])
        .iter()
        .zip(vanilla.data().iter())
        .all(|(a, b)| a == b);
    check(&mut report, "fused slice recovers vanilla branch", slices_ok)?;

    // attention rows are a distribution
    let attn = mhsa_attention(&input, &params.mhsa)?;
    let max_dev = attn
        .rows()
        .into_iter()
        .map(|row| (row.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    writeln!(report, "attention row sums: max |sum - 1| = {max_dev:.3e}")?;
    check(&mut report, "attention rows sum to 1", max_dev < 1e-9)?;

    // dilated sampling grid
    let mut impulse = ndarray::Array4::zeros((1, 1, 9, 9));
    impulse[[0, 0, 4, 4]] = 1.0;
    let impulse = FeatureMap::new(impulse)?;
    let probe = ConvParams::new(ndarray::Array4::ones((1, 1, 3, 3)), vec![0.0], 2)?;
    let response = conv2d(&impulse, &probe)?;
    let impulse_ok = (0..9).all(|y| {
        (0..9).all(|x| {
            let hit = [2usize, 4, 6].contains(&y) && [2usize, 4, 6].contains(&x);
            response.data()[[0, 0, y, x]] == if hit { 1.0 } else { 0.0 }
        })
    });
    check(&mut report, "dilated impulse response on {-2,0,2}^2", impulse_ok)?;

    // repeatability
    let (cls2, reg2) = conformer_forward(&input, params)?;
    check(&mut report, "deterministic forward", cls == cls2 && reg == reg2)?;

    writeln!(report, "head-demo: {}", if all_ok { "PASS" } else { "FAIL" })?;
    Ok((report, all_ok))
}

fn oracle_check(trials: usize, seed: u64) -> (String, bool) {
    let mut report = String::new();
    let line = |report: &mut String, name: &str, r: &SuiteReport| {
        writeln!(
            report,
            "{name}: {} trials, {} failures, max error {:.3e}",
            r.trials, r.failures, r.max_error
        )
        .expect("write to string");
        r.passed()
    };
    let geometry = geometry_suite(trials, seed, 1024, rotated_iou);
    let gradient = gradient_suite(trials, seed.wrapping_add(1), reg_loss_grad);
    let assignment = assignment_suite(trials, seed.wrapping_add(2), cdla_assign);
    let mut ok = true;
    ok &= line(&mut report, "geometry", &geometry);
    ok &= line(&mut report, "gradient", &gradient);
    ok &= line(&mut report, "assignment", &assignment);
    writeln!(report, "oracle-check: {}", if ok { "PASS" } else { "FAIL" }).expect("write");
    (report, ok)
}
