//! The five subcommands and the pipeline stages they share.

use formset_core::closedloop::ClosedLoop;
use formset_core::gainsynth::{feasible, spec_for_formation, synthesize_formation};
use formset_core::invariants::{
    rpi_check_sampled, ultimate_bounds, volume_exact, volume_paper, RpiOptions, RpiReport, UltimateBounds,
};
use formset_core::matcore::{to_rows, Vector};
use formset_core::simkit::{invariance_batch, simulate, LeaderReference, SimOptions, SimSetup};
use formset_core::tightform::{solve, verify, TightFormationProblem, TightFormationSolution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ScenarioConfig;
use crate::report::{
    finite, AnchorSimulation, DemoReport, FormationReport, GainSource, GainsReport, RpiRun, SimulationReport,
    UbReport, Verification, ZonotopeRecord,
};
use crate::svg::{color, Canvas, Frame};
use crate::{CliError, RunOptions};

const TRAJECTORY_POINTS: usize = 400;

fn rows(v: &Vector, width: usize) -> Vec<Vec<f64>> {
    v.as_slice().chunks(width).map(<[f64]>::to_vec).collect()
}

/// Bounds, volumes and a sampled invariance check of the `lti` section.
pub fn ub_stage(cfg: &ScenarioConfig, seed: u64) -> Result<(UltimateBounds, RpiReport, UbReport), CliError> {
    let lti = cfg.lti()?;
    let (a, dist) = lti.system()?;
    let ub = ultimate_bounds(&a, &dist)?;
    let steps = (lti.check.horizon / lti.check.dt).round() as usize;
    let opts = RpiOptions {
        dt: lti.check.dt,
        horizon: lti.check.horizon,
        n_points: lti.check.n_points,
        seed,
        policy: lti.check.policy,
        record_every: (steps / TRAJECTORY_POINTS).max(1),
        ..RpiOptions::default()
    };
    let rpi = rpi_check_sampled(&a, &dist, &ub, &opts)?;
    let omega = ub.zonotope();
    let volume_formula = volume_paper(&ub);
    let exact = volume_exact(&omega).ok();
    let report = UbReport {
        scenario: cfg.name.clone(),
        eigenvalues: ub.spectral.values.iter().copied().collect(),
        eigenvectors: to_rows(&ub.spectral.vectors),
        bound: ub.bound.iter().copied().collect(),
        box_half_widths: ub.bounding_box().half_widths.iter().copied().collect(),
        omega: ZonotopeRecord {
            center: omega.center.iter().copied().collect(),
            generators: to_rows(&omega.generators),
        },
        volume_formula,
        volume_exact: exact,
        volume_ratio: exact.filter(|v| *v > 0.0).map(|v| volume_formula / v),
        settling_horizon: finite(rpi.settling_horizon),
        all_passed: rpi.all_passed(),
        runs: rpi
            .trajectories
            .iter()
            .map(|t| RpiRun {
                start: t.start.clone(),
                policy: t.policy,
                entry_time: t.entry_time,
                exits_after_entry: t.exits_after_entry,
                final_inside: t.final_inside,
                max_excess_after_entry: finite(t.max_excess_after_entry),
            })
            .collect(),
    };
    Ok((ub, rpi, report))
}

fn ub_svg(ub: &UltimateBounds, rpi: &RpiReport, stamp: Option<u64>) -> Option<String> {
    if ub.dim() != 2 {
        return None;
    }
    let hw = ub.bounding_box().half_widths;
    let corners = [[-hw[0], -hw[1]], [hw[0], hw[1]]];
    let paths: Vec<Vec<[f64; 2]>> = rpi
        .trajectories
        .iter()
        .map(|t| {
            let mut p: Vec<[f64; 2]> = t.path.iter().map(|x| [x[0], x[1]]).collect();
            p.push([t.final_state[0], t.final_state[1]]);
            p
        })
        .collect();
    let frame = Frame::around(corners.iter().chain(paths.iter().flatten()), 0.08, 640.0);
    let mut c = Canvas::new(frame);
    c.rect(corners[0], corners[1], r##"fill="none" stroke="#222" stroke-width="1.5""##);
    if let Some(v) = ub.zonotope().vertices_2d() {
        c.polygon(&v, r##"fill="#cfe3f5" stroke="#1f77b4" stroke-width="1.5""##);
    }
    for (k, p) in paths.iter().enumerate() {
        let style = format!(r#"stroke="{}" stroke-width="1""#, color(k + 1));
        c.polyline(p, &style);
        if let Some(&s) = p.first() {
            c.circle(s, 3.0, &format!(r#"fill="{}""#, color(k + 1)));
        }
    }
    c.text(corners[1], "B_UB", r#"font-size="12" text-anchor="end" dy="-4""#);
    Some(c.finish("ultimate bounds", stamp))
}

pub fn cmd_ub(cfg: &ScenarioConfig, run: &RunOptions) -> Result<UbReport, CliError> {
    run.prepare()?;
    let (ub, rpi, report) = ub_stage(cfg, run.seed.unwrap_or(cfg.seed))?;
    run.write_json("ub.json", &report)?;
    if let Some(svg) = ub_svg(&ub, &rpi, run.stamp()) {
        run.write("ub.svg", svg.as_bytes())?;
    }
    Ok(report)
}

/// Gains (synthesized unless fixed in the config) and the resulting closed loop.
pub fn gains_stage(cfg: &ScenarioConfig) -> Result<(ClosedLoop, GainsReport), CliError> {
    let f = cfg.formation()?;
    let graph = f.graph()?;
    let noise = f.noise()?;
    if let Some(gains) = f.gains {
        let spec = spec_for_formation(&graph, f.alpha, f.dimension, &noise, f.corridor(), f.synthesis.clone())?;
        let feas = feasible(gains, &spec);
        let cl = ClosedLoop::analyze_with_margin(&graph, f.alpha, gains, f.dimension, &noise, spec.options.margin)?;
        let report = GainsReport {
            scenario: cfg.name.clone(),
            source: GainSource::Fixed,
            gains,
            corridor: f.corridor(),
            feasible: feas.feasible,
            active: feas.margins.active(1e-6),
            margins: feas.margins,
            log_objective: spec.log_volume(gains)?,
            log_volume: formset_core::invariants::log_volume_paper(&cl.bounds),
            grid_best: None,
            feasible_grid_points: None,
            closed_loop: cl.summary(),
        };
        return Ok((cl, report));
    }
    let s = synthesize_formation(&graph, f.alpha, f.dimension, &noise, f.corridor(), f.synthesis.clone())?;
    if !s.result.feasible {
        return Err(CliError::Infeasible("synthesis found no gains inside the corridor".into()));
    }
    let report = GainsReport {
        scenario: cfg.name.clone(),
        source: GainSource::Synthesized,
        gains: s.result.gains,
        corridor: f.corridor(),
        feasible: s.result.feasible,
        margins: s.result.margins.clone(),
        active: s.result.active.clone(),
        log_objective: s.result.log_volume,
        log_volume: s.direct_log_volume,
        grid_best: Some(s.result.grid_best.clone()),
        feasible_grid_points: Some(s.result.feasible_grid_points),
        closed_loop: s.closed_loop.summary(),
    };
    Ok((s.closed_loop, report))
}

pub fn cmd_gains(cfg: &ScenarioConfig, run: &RunOptions) -> Result<GainsReport, CliError> {
    run.prepare()?;
    let (_, report) = gains_stage(cfg)?;
    run.write_json("gains.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FormationOutcome {
    pub problem: TightFormationProblem,
    pub solution: TightFormationSolution,
    pub report: FormationReport,
}

/// Tight formation for one configured anchor (0-based `k`).
pub fn formation_for_anchor(cfg: &ScenarioConfig, cl: &ClosedLoop, k: usize) -> Result<FormationOutcome, CliError> {
    let f = cfg.formation()?;
    let problem = TightFormationProblem::from_closed_loop(
        cl,
        f.anchor(k),
        f.q_z()?,
        f.obstacles.clone(),
        f.workspace()?,
        f.options.clone(),
    )?;
    let solution = solve(&problem)?;
    let check = verify(&solution, &problem);
    let n = problem.n;
    let report = FormationReport {
        anchor_index: k + 1,
        anchor: f.anchors[k].clone(),
        positions: solution.p_star.clone(),
        displacements: solution.z_star.clone(),
        radii: rows(&problem.r_p, n),
        thresholds: rows(&problem.thresholds, n),
        objective: solution.objective,
        status: solution.status,
        nodes: solution.nodes,
        gap: finite(solution.gap),
        binaries: solution.binaries.clone(),
        verification: Verification::from(&check),
    };
    Ok(FormationOutcome {
        problem,
        solution,
        report,
    })
}

fn formation_svg(cfg: &ScenarioConfig, outcomes: &[FormationOutcome], stamp: Option<u64>) -> Result<Option<String>, CliError> {
    let f = cfg.formation()?;
    if f.dimension != 2 {
        return Ok(None);
    }
    let ws = f.workspace()?;
    let lo = [ws.lo[0], ws.lo[1]];
    let hi = [ws.hi[0], ws.hi[1]];
    let mut c = Canvas::new(Frame::fit(lo, hi, 960.0));
    c.rect(lo, hi, r##"fill="none" stroke="#222" stroke-width="1.5""##);
    for o in &f.obstacles {
        c.polygon(
            &o.vertices_2d(),
            r##"fill="#eeeeee" stroke="#555" stroke-width="1.2" stroke-dasharray="6 4""##,
        );
    }
    let graph = f.graph()?;
    for out in outcomes {
        let p = &out.report.positions;
        for &(head, tail) in graph.edges() {
            c.arrow([p[head][0], p[head][1]], [p[tail][0], p[tail][1]], r##"stroke="#333" stroke-width="1""##);
        }
        for (i, (pos, r)) in p.iter().zip(&out.report.radii).enumerate() {
            let col = color(i);
            c.rect(
                [pos[0] - r[0], pos[1] - r[1]],
                [pos[0] + r[0], pos[1] + r[1]],
                &format!(r#"fill="{col}" fill-opacity="0.12" stroke="{col}" stroke-width="1""#),
            );
            c.circle([pos[0], pos[1]], 3.5, &format!(r#"fill="{col}""#));
        }
        let a = &out.report.anchor;
        c.text(
            [a[0], a[1]],
            &format!("anchor {}", out.report.anchor_index),
            r#"font-size="11" dx="6" dy="-6""#,
        );
    }
    Ok(Some(c.finish("tight formations", stamp)))
}

/// Solves every anchor, writes the per-anchor reports of those that
/// succeed, and fails with the first error afterwards.
fn formations_written(
    cfg: &ScenarioConfig,
    cl: &ClosedLoop,
    run: &RunOptions,
) -> Result<Vec<FormationOutcome>, CliError> {
    let f = cfg.formation()?;
    if f.anchors.is_empty() {
        return Err(CliError::Config("no leader anchors configured".into()));
    }
    let mut done = Vec::new();
    let mut first_err = None;
    for k in 0..f.anchors.len() {
        match formation_for_anchor(cfg, cl, k) {
            Ok(o) => {
                run.write_json(&format!("formation_{}.json", k + 1), &o.report)?;
                done.push(o);
            }
            Err(e) => {
                eprintln!("anchor {}: {e}", k + 1);
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(svg) = formation_svg(cfg, &done, run.stamp())? {
        run.write("formation.svg", svg.as_bytes())?;
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some(bad) = done.iter().find(|o| !o.report.verification.passed) {
        return Err(CliError::Numerical(format!(
            "formation for anchor {} fails verification",
            bad.report.anchor_index
        )));
    }
    Ok(done)
}

pub fn cmd_formation(cfg: &ScenarioConfig, run: &RunOptions) -> Result<Vec<FormationReport>, CliError> {
    run.prepare()?;
    let (cl, gains) = gains_stage(cfg)?;
    run.write_json("gains.json", &gains)?;
    Ok(formations_written(cfg, &cl, run)?.into_iter().map(|o| o.report).collect())
}

/// Seeded runs per anchor; CSVs for the first few.
pub fn simulation_stage(
    cfg: &ScenarioConfig,
    cl: &ClosedLoop,
    formations: &[FormationOutcome],
    run: &RunOptions,
) -> Result<SimulationReport, CliError> {
    let sim = &cfg.simulation;
    let base = run.seed.unwrap_or(cfg.seed);
    let runs: Vec<_> = sim
        .policies
        .iter()
        .flat_map(|&policy| (0..sim.seeds as u64).map(move |s| (base + s, policy)))
        .collect();
    let opts = SimOptions {
        horizon: sim.horizon,
        dt: sim.dt,
        ..SimOptions::default()
    };
    let mut anchors = Vec::new();
    let mut csv_files = Vec::new();
    for out in formations {
        let k = out.report.anchor_index;
        let z = Vector::from_iterator(
            out.solution.z_star.iter().map(Vec::len).sum(),
            out.solution.z_star.iter().flatten().copied(),
        );
        let setup = SimSetup::from_closed_loop(cl, &z, LeaderReference::constant(&out.problem.anchor))?;
        let target = setup.target_state(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(base ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x0 = target.map(|v| v + sim.initial_offset * rng.random_range(-1.0..=1.0));
        let batch = invariance_batch(&setup, cl, &x0, &opts, &runs, sim.settle_fraction)?;
        for &(seed, policy) in runs.iter().take(sim.csv_runs) {
            let o = SimOptions {
                seed,
                policy,
                record_every: sim.csv_every,
                ..opts.clone()
            };
            let traj = simulate(&setup, &x0, &o)?;
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).map_err(|e| CliError::Numerical(e.to_string()))?;
            let name = format!("trajectory_a{k}_{}_s{seed}.csv", policy.name());
            run.write(&name, &buf)?;
            csv_files.push(name);
        }
        anchors.push(AnchorSimulation {
            anchor_index: k,
            anchor: out.report.anchor.clone(),
            initial_error_norm: (&x0 - &target).norm(),
            contained: batch.iter().all(|r| r.report.passed()),
            runs: batch,
        });
    }
    Ok(SimulationReport {
        scenario: cfg.name.clone(),
        gains: cl.factorization.gains,
        horizon: sim.horizon,
        dt: sim.dt,
        settle_fraction: sim.settle_fraction,
        all_contained: anchors.iter().all(|a| a.contained),
        anchors,
        csv_files,
    })
}

fn check_contained(report: &SimulationReport) -> Result<(), CliError> {
    if report.all_contained {
        return Ok(());
    }
    let bad = report
        .anchors
        .iter()
        .flat_map(|a| a.runs.iter().map(move |r| (a.anchor_index, r)))
        .find(|(_, r)| !r.report.passed());
    Err(CliError::Numerical(match bad {
        Some((k, r)) => format!(
            "anchor {k}, seed {}, {} noise: {:?} ({} of {} samples inside)",
            r.seed,
            r.policy.name(),
            r.report.status,
            r.report.inside,
            r.report.samples
        ),
        None => "invariance check failed".into(),
    }))
}

pub fn cmd_simulate(cfg: &ScenarioConfig, run: &RunOptions) -> Result<SimulationReport, CliError> {
    run.prepare()?;
    let (cl, gains) = gains_stage(cfg)?;
    run.write_json("gains.json", &gains)?;
    let formations = formations_written(cfg, &cl, run)?;
    let report = simulation_stage(cfg, &cl, &formations, run)?;
    run.write_json("simulation.json", &report)?;
    check_contained(&report)?;
    Ok(report)
}

/// Every stage in sequence; the `lti` section, when present, adds the
/// invariant-set figure.
pub fn cmd_demo(cfg: &ScenarioConfig, run: &RunOptions) -> Result<DemoReport, CliError> {
    run.prepare()?;
    let ub = match cfg.lti {
        Some(_) => Some(cmd_ub(cfg, run)?),
        None => None,
    };
    let (cl, gains) = gains_stage(cfg)?;
    run.write_json("gains.json", &gains)?;
    let formations = formations_written(cfg, &cl, run)?;
    let simulation = simulation_stage(cfg, &cl, &formations, run)?;
    run.write_json("simulation.json", &simulation)?;
    let report = DemoReport {
        ub,
        gains,
        formations: formations.into_iter().map(|o| o.report).collect(),
        simulation,
    };
    run.write_json("demo.json", &report)?;
    check_contained(&report.simulation)?;
    Ok(report)
}
