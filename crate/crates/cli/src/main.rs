//! Command-line harness: single runs, experiment sweeps, report
//! generation, a perception gradient check, and the emergency-braking
//! calibration suite.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use accsim_core::attack::AttackKind;
use accsim_core::config::{
    parse_config_file, resolve_out_dir, ConfigMap, ExperimentMatrix, RunConfig,
};
use accsim_core::defense::DefenseKind;
use accsim_core::harness::{run_single, run_sweep, summarize, write_run_jsonl, write_summary_csv};
use accsim_core::metrics::Outcome;
use accsim_core::perception::PerceptionModel;
use accsim_core::safety::AebsSetting;
use accsim_core::sensor::{render_frame, RenderParams};
use accsim_core::world::{ScenarioId, WorldState};

#[derive(Parser)]
#[command(
    name = "accsim",
    about = "Closed-loop simulator for runtime perception attacks on a camera-based cruise-control stack",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Parser, Debug, Clone)]
struct RunOverrides {
    /// Config file (key = value dialect, see README).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (env ACCSIM_OUT overrides the default `out/`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Attack kind: none|ca-opt|ca-apgd|ca-random|random-opt|maxout|strategicout|dnnout.
    #[arg(long)]
    attack: Option<String>,
    /// Scenario id: SC1..SC4 or UN152-1..UN152-5.
    #[arg(long)]
    scenario: Option<String>,
    /// Emergency-braking feed: independent|shared|disabled.
    #[arg(long)]
    safety: Option<String>,
    /// Driver noticeability threshold on the mean displayed perturbation.
    #[arg(long)]
    driver_threshold: Option<f64>,
    /// Disable the driver model entirely.
    #[arg(long)]
    no_driver: bool,
    /// Defense transform, e.g. none, gaussian:0.02, bit_depth:3, median:3.
    #[arg(long)]
    defense: Option<String>,
    /// Dump every perception frame as PGM into the output directory.
    #[arg(long)]
    dump_frames: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one closed-loop run and write its JSONL log.
    Run(RunOverrides),
    /// Expand the experiment matrix from the config and run every cell.
    Sweep(RunOverrides),
    /// Aggregate existing run logs into a summary CSV (and optional plots).
    Report {
        /// Directory of run-*.jsonl files.
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write an SVG distance-trajectory plot per run.
        #[arg(long)]
        plots: bool,
    },
    /// Verify perception gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 100)]
        pixels: usize,
    },
    /// Run the emergency-braking calibration suite (UN152-1..5).
    Calibrate {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn apply_overrides(cfg: &mut RunConfig, o: &RunOverrides) -> Result<()> {
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &o.attack {
        cfg.attack = AttackKind::parse(a)?;
    }
    if let Some(s) = &o.scenario {
        cfg.scenario = ScenarioId::parse(s)?;
    }
    if let Some(s) = &o.safety {
        cfg.aebs = AebsSetting::parse(s)?;
    }
    if let Some(t) = o.driver_threshold {
        cfg.driver_enabled = true;
        cfg.driver_threshold = t;
    }
    if o.no_driver {
        cfg.driver_enabled = false;
    }
    if let Some(d) = &o.defense {
        cfg.defense = DefenseKind::parse(d)?;
    }
    Ok(())
}

fn load_map(o: &RunOverrides) -> Result<ConfigMap> {
    match &o.config {
        Some(path) => Ok(parse_config_file(path)?),
        None => Ok(ConfigMap::new()),
    }
}

fn init_pool(jobs: Option<usize>) {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .ok();
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(o) => cmd_run(o),
        Command::Sweep(o) => cmd_sweep(o),
        Command::Report { logs, out, plots } => cmd_report(&logs, out, plots),
        Command::Gradcheck { frames, pixels } => cmd_gradcheck(frames, pixels),
        Command::Calibrate { seeds, jobs } => cmd_calibrate(seeds, jobs),
    }
}

fn cmd_run(o: RunOverrides) -> Result<()> {
    let map = load_map(&o)?;
    let mut cfg = RunConfig::from_map(&map).context("building run config")?;
    apply_overrides(&mut cfg, &o)?;
    let out_dir = resolve_out_dir(o.out.clone());
    std::fs::create_dir_all(&out_dir)?;

    if o.dump_frames {
        dump_frames(&cfg, &out_dir)?;
    }
    let art = run_single(&cfg).context("run failed")?;
    let path = out_dir.join(cfg.run_file_name());
    write_run_jsonl(&art.record, &path)?;
    println!(
        "{} seed {} -> {:?} (cycles {}, min rd {:.2} m), log: {}",
        cfg.cell_label(),
        cfg.seed,
        art.record.outcome,
        art.record.cycles_run,
        art.record.min_rd_true,
        path.display()
    );
    if art.attack_ms_mean > 0.0 {
        println!(
            "mean attack computation: {:.3} ms per perception cycle",
            art.attack_ms_mean
        );
    }
    if art.record.outcome == Outcome::Hazard {
        println!("forward collision at cycle {:?}", art.record.collision_cycle);
    }
    Ok(())
}

fn cmd_sweep(o: RunOverrides) -> Result<()> {
    init_pool(o.jobs);
    let map = load_map(&o)?;
    if map.is_empty() {
        bail!("sweep requires --config with a [matrix] section");
    }
    let matrix = ExperimentMatrix::from_map(&map)?;
    let mut cells = matrix.expand();
    for cfg in cells.iter_mut() {
        let mut ov = o.clone();
        ov.scenario = None; // matrix axes win over per-run flags
        ov.attack = None;
        ov.safety = None;
        apply_overrides(cfg, &ov)?;
    }
    let out_dir = resolve_out_dir(o.out.clone());
    let t0 = std::time::Instant::now();
    let sweep = run_sweep(&cells, Some(&out_dir))?;
    println!(
        "{} runs in {:.1} s -> {}",
        cells.len(),
        t0.elapsed().as_secs_f64(),
        out_dir.join("summary.csv").display()
    );
    println!(
        "mean attack computation: {:.3} ms per perception cycle",
        sweep.mean_attack_ms
    );
    for f in &sweep.failures {
        eprintln!("FAILED: {f}");
    }
    for row in &sweep.rows {
        println!(
            "{:8} {:13} {:12} {:14} {:14} success {:5.1}% activation {:5.1}%{}",
            row.scenario,
            row.attack,
            row.safety,
            row.driver,
            row.defense,
            100.0 * row.success_rate,
            100.0 * row.activation_rate,
            row.prevention_rate
                .map(|p| format!(" prevention {:.1}%", 100.0 * p))
                .unwrap_or_default()
        );
    }
    if sweep.failures.is_empty() {
        Ok(())
    } else {
        bail!("{} run(s) failed", sweep.failures.len())
    }
}

fn cmd_report(logs: &PathBuf, out: Option<PathBuf>, plots: bool) -> Result<()> {
    let out_dir = resolve_out_dir(out);
    std::fs::create_dir_all(&out_dir)?;
    let mut records = Vec::new();
    for entry in std::fs::read_dir(logs)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "jsonl").unwrap_or(false) {
            match read_record(&path) {
                Ok(r) => records.push(r),
                Err(e) => eprintln!("skipping {}: {e}", path.display()),
            }
        }
    }
    if records.is_empty() {
        bail!("no run logs found in {}", logs.display());
    }
    let rows = summarize(&records);
    write_summary_csv(&rows, &out_dir.join("summary.csv"))?;
    println!(
        "{} runs -> {} summary rows -> {}",
        records.len(),
        rows.len(),
        out_dir.join("summary.csv").display()
    );
    if plots {
        for r in &records {
            if !r.rows.is_empty() {
                let name = format!(
                    "plot-{}-{}-{}-seed{}.svg",
                    r.scenario, r.attack, r.safety, r.seed
                );
                write_trajectory_svg(r, &out_dir.join(name))?;
            }
        }
        println!("trajectory plots written to {}", out_dir.display());
    }
    Ok(())
}

fn read_record(path: &std::path::Path) -> Result<accsim_core::metrics::RunRecord> {
    use accsim_core::metrics::{LogRow, RunRecord};
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<LogRow> = Vec::new();
    let mut record: Option<RunRecord> = None;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("kind").and_then(|k| k.as_str()) == Some("summary") {
            record = Some(serde_json::from_value(v["record"].clone())?);
        } else if v.get("t_step").is_some() {
            rows.push(serde_json::from_value(v)?);
        }
    }
    let mut record = record.context("log has no summary line")?;
    record.rows = rows;
    Ok(record)
}

/// Minimal polyline SVG of true vs predicted distance over the run.
fn write_trajectory_svg(
    r: &accsim_core::metrics::RunRecord,
    path: &std::path::Path,
) -> Result<()> {
    let w = 720.0;
    let h = 300.0;
    let t_max = r.rows.last().map(|x| x.t_step as f64).unwrap_or(1.0).max(1.0);
    let rd_max = r
        .rows
        .iter()
        .flat_map(|x| [Some(x.rd_true), x.rd_pred].into_iter().flatten())
        .fold(1.0f64, f64::max)
        .min(160.0);
    let pt = |t: f64, rd: f64| {
        (
            40.0 + (w - 60.0) * t / t_max,
            h - 30.0 - (h - 60.0) * (rd.min(rd_max) / rd_max),
        )
    };
    let poly = |get: &dyn Fn(&accsim_core::metrics::LogRow) -> Option<f64>| {
        r.rows
            .iter()
            .filter_map(|row| get(row).map(|rd| pt(row.t_step as f64, rd)))
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"40\" y=\"20\" font-size=\"13\">{title}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1a6fb0\" stroke-width=\"1.5\" points=\"{true_pts}\"/>\n",
            "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"1.2\" points=\"{pred_pts}\"/>\n",
            "<text x=\"40\" y=\"{legend_y}\" font-size=\"11\" fill=\"#1a6fb0\">true distance</text>\n",
            "<text x=\"160\" y=\"{legend_y}\" font-size=\"11\" fill=\"#c0392b\">predicted</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        title = format!(
            "{} / {} / {} seed {} -> {:?}",
            r.scenario, r.attack, r.safety, r.seed, r.outcome
        ),
        true_pts = poly(&|row| Some(row.rd_true)),
        pred_pts = poly(&|row| row.rd_pred),
        legend_y = h - 8.0,
    );
    std::fs::write(path, svg)?;
    Ok(())
}

fn cmd_gradcheck(frames: usize, pixels: usize) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let render = RenderParams {
        sigma_img: 0.0,
        ..RenderParams::default()
    };
    let model = PerceptionModel::calibrated(&render);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    let t0 = std::time::Instant::now();
    for k in 0..frames {
        let rd = 12.0 + 88.0 * (k as f64 / frames.max(1) as f64);
        let world = WorldState::new(rd, 25.0, 20.0);
        let frame = render_frame(&world, &render, k as u64, &mut rng.clone());
        let pass = model.forward(&frame);
        let grad = model.gradient_raw(&frame, &pass);
        let gmax = grad.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let body = render.project(rd).pixel_box(frame.h, frame.w);
        for _ in 0..pixels {
            let r = body.y0.saturating_sub(2) + rng.gen_range(0..body.h + 4);
            let c = body.x0.saturating_sub(2) + rng.gen_range(0..body.w + 4);
            if r >= frame.h || c >= frame.w {
                continue;
            }
            let idx = r * frame.w + c;
            let h_step = 1e-4;
            let mut fp = frame.clone();
            fp.px[idx] += h_step;
            let mut fm = frame.clone();
            fm.px[idx] -= h_step;
            let num = (model.forward(&fp).rd_raw - model.forward(&fm).rd_raw) / (2.0 * h_step);
            let denom = grad[idx].abs().max(num.abs()).max(1e-4 * gmax);
            worst = worst.max((grad[idx] - num).abs() / denom);
        }
    }
    println!(
        "gradcheck: {} frames x {} pixels, max relative error {:.3e} ({:.2} s)",
        frames,
        pixels,
        worst,
        t0.elapsed().as_secs_f64()
    );
    if worst > 1e-4 {
        bail!("gradient check failed: {worst:.3e} > 1e-4");
    }
    Ok(())
}

fn cmd_calibrate(seeds: u64, jobs: Option<usize>) -> Result<()> {
    init_pool(jobs);
    let mut cells = Vec::new();
    for n in 1..=5u8 {
        for seed in 0..seeds {
            let mut cfg = RunConfig::new(ScenarioId::Un152(n), seed);
            cfg.aebs = AebsSetting::Independent;
            cfg.driver_enabled = true;
            cfg.log_rows = false;
            cells.push(cfg);
        }
    }
    let sweep = run_sweep(&cells, None)?;
    let mut collisions = 0usize;
    let mut activated = 0usize;
    let mut fb_runs = 0usize;
    let mut stop_sum = 0.0;
    let mut stop_n = 0usize;
    for r in &sweep.records {
        if r.outcome == Outcome::Hazard {
            collisions += 1;
        }
        if r.fcw_fired && r.aeb_fired {
            activated += 1;
        }
        if let Some(fb) = r.fb_engaged_cycle {
            fb_runs += 1;
            if let Some(stop) = r.standstill_cycle {
                if stop >= fb {
                    stop_sum += (stop - fb) as f64 * 0.01;
                    stop_n += 1;
                }
            }
        }
    }
    let n = sweep.records.len();
    println!("calibration over {n} runs:");
    println!("  collisions:            {collisions}");
    println!(
        "  warning+brake fired:   {activated}/{n} ({:.1}%)",
        100.0 * activated as f64 / n as f64
    );
    println!("  full-brake engaged in: {fb_runs} runs");
    if stop_n > 0 {
        println!(
            "  mean full-brake-to-stop: {:.2} s over {stop_n} stopping runs",
            stop_sum / stop_n as f64
        );
    }
    if collisions > 0 || activated < n {
        bail!("calibration failed");
    }
    Ok(())
}

fn dump_frames(cfg: &RunConfig, out_dir: &std::path::Path) -> Result<()> {
    // Renders the benign frame sequence for visual inspection.
    use rand::SeedableRng;
    let dir = out_dir.join(format!("frames-{}-seed{}", cfg.cell_label(), cfg.seed));
    std::fs::create_dir_all(&dir)?;
    let scenario = cfg.scenario_config()?;
    let mut world = scenario.initial_state();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..40u64 {
        let frame = render_frame(&world, &cfg.render, k, &mut rng);
        frame.write_pgm(&dir.join(format!("frame-{k:04}.pgm")))?;
        for _ in 0..25 {
            let cmd = accsim_core::control::ControlCommand {
                a_cmd: 0.0,
                source: accsim_core::control::CommandSource::Acc,
                issue_cycle: 0,
            };
            world = accsim_core::world::step_world(
                &world,
                &cmd,
                accsim_core::world::lead_profile(&scenario, world.time()),
                accsim_core::world::DT,
            )?;
        }
    }
    println!("frames dumped to {}", dir.display());
    Ok(())
}
