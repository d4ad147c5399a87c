//! Command implementations. Every input is loaded and checked before the
//! first file is written.

use std::path::{Path, PathBuf};

use pionm::exec::Exec;
use pionm::fbsde::{train_fixed, FixedConfig, FixedSolution};
use pionm::flow::DensityFlow;
use pionm::io::write_atomic;
use pionm::metrics::{collision_success_rate, flow_volume_invariance, timed, MetricsReport};
use pionm::mfg::{build_crowd_motion_with, BoundaryCode, CodeLayout, MfgProblem, ScenarioFile};
use pionm::operator::{
    infer_equilibrium, train_pionm, warm_start_from, NfTeacher, OperatorModel, OracleTeacher, Teacher,
};
use pionm::scenarios::{toy_1d_settings, FamilyId, ScenarioSampler, UniformSampler};
use serde_json::json;

use crate::config::{Command, RunConfig, SamplerKind, TeacherKind};
use crate::error::CliError;
use crate::plot;

/// One scenario to run, named after its file stem or family slot.
pub struct Target {
    pub name: String,
    pub file: ScenarioFile,
}

impl Target {
    fn problem(&self, layout: CodeLayout) -> Result<(BoundaryCode, MfgProblem), CliError> {
        Ok(self.file.problem(layout)?)
    }

    fn natural(&self) -> Result<(BoundaryCode, MfgProblem), CliError> {
        self.problem(self.file.natural_layout())
    }
}

pub fn targets(cfg: &RunConfig) -> Result<Vec<Target>, CliError> {
    if let Some(path) = &cfg.scenario {
        let file = ScenarioFile::load(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
        return Ok(vec![Target { name, file }]);
    }
    let Some(id) = cfg.family.as_deref() else {
        return Ok(Vec::new());
    };
    let id = FamilyId::parse(id).ok_or_else(|| CliError::Schema(format!("unknown family {id:?}")))?;
    let family = id.build();
    Ok(family
        .files()?
        .into_iter()
        .enumerate()
        .map(|(i, file)| Target {
            name: format!("{}-{i}", id.name()),
            file,
        })
        .collect())
}

/// A loaded `--checkpoint`.
enum Checkpoint {
    Operator(OperatorModel),
    /// Directory holding `<name>/solution.json` per scenario.
    Solutions(PathBuf),
    Solution(DensityFlow),
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, exec: Exec) -> Result<Checkpoint, CliError> {
    if path.is_dir() {
        return Ok(Checkpoint::Solutions(path.to_path_buf()));
    }
    let text = read(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    if v.get("flow").is_some() {
        let (flow, _) = FixedSolution::parts_from_json(&text)?;
        Ok(Checkpoint::Solution(flow.with_exec(exec)))
    } else {
        Ok(Checkpoint::Operator(OperatorModel::from_json(&text)?.with_exec(exec)))
    }
}

fn solution_flow(path: &Path, exec: Exec) -> Result<DensityFlow, CliError> {
    let (flow, _) = FixedSolution::parts_from_json(&read(path)?)?;
    Ok(flow.with_exec(exec))
}

fn json_bytes(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

pub struct Run {
    pub command: Command,
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Run {
    pub fn execute(&self) -> Result<(), CliError> {
        let targets = targets(&self.cfg)?;
        let checkpoint = match &self.cfg.checkpoint {
            Some(p) if matches!(self.command, Command::Infer | Command::Eval | Command::Plot) => Some(load_checkpoint(p, self.exec)?),
            _ => None,
        };
        match self.command {
            Command::TrainFixed => self.train_fixed(&targets),
            Command::TrainOperator => self.train_operator(),
            Command::Oracle => self.oracle(&targets),
            Command::Infer => self.infer(&targets, checkpoint.expect("validated")),
            Command::Eval => self.eval(&targets, checkpoint.expect("validated")),
            Command::Plot => self.plot(&targets, checkpoint.expect("validated")),
        }
    }

    fn seed(&self) -> u64 {
        self.cfg.seed.unwrap_or(self.cfg.fixed.seed)
    }

    fn fixed_config(&self) -> FixedConfig {
        FixedConfig {
            seed: self.seed(),
            exec: self.exec,
            ..self.cfg.fixed.clone()
        }
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        Ok(write_atomic(&self.out.join(rel), bytes)?)
    }

    fn write_config(&self) -> Result<(), CliError> {
        let v = serde_json::to_value(&self.cfg).expect("config serializes");
        self.write("run_config.json", &json_bytes(&v))
    }

    fn train_fixed(&self, targets: &[Target]) -> Result<(), CliError> {
        let problems = targets.iter().map(Target::natural).collect::<Result<Vec<_>, _>>()?;
        self.write_config()?;
        let cfg = self.fixed_config();
        let mut stalled = Vec::new();
        for (t, (_, problem)) in targets.iter().zip(&problems) {
            let (sol, seconds) = timed(|| train_fixed(problem, None, &cfg));
            let sol = sol?;
            let mut csv = String::from(pionm::fbsde::RoundRecord::CSV_HEADER);
            csv.push('\n');
            for r in &sol.trace {
                csv.push_str(&r.csv_fields().join(","));
                csv.push('\n');
            }
            self.write(Path::new(&t.name).join("rounds.csv"), csv.as_bytes())?;
            self.write(Path::new(&t.name).join("scenario.json"), t.file.to_json().as_bytes())?;
            self.write(Path::new(&t.name).join("solution.json"), sol.to_json().as_bytes())?;
            let summary = json!({
                "scenario": t.name,
                "rounds": sol.rounds(),
                "converged": sol.converged,
                "best_round": sol.best_round,
                "best_l_nf": sol.best_l_nf(),
                "seconds": seconds,
            });
            self.write(Path::new(&t.name).join("summary.json"), &json_bytes(&summary))?;
            if !sol.converged {
                stalled.push(t.name.clone());
            }
        }
        if stalled.is_empty() {
            Ok(())
        } else {
            Err(CliError::NonConvergence(format!("fixed solves stopped at max_rounds: {}", stalled.join(", "))))
        }
    }

    fn train_operator(&self) -> Result<(), CliError> {
        let op = &self.cfg.operator;
        let train = pionm::operator::OperatorTrainConfig {
            seed: self.cfg.seed.unwrap_or(op.train.seed),
            exec: self.exec,
            ..op.train.clone()
        };
        let steps = train.arch.steps;
        let (sampler, settings, horizon) = match op.sampler {
            SamplerKind::Crowd2d => (UniformSampler::crowd_2d(), op.settings.clone(), op.horizon),
            SamplerKind::Toy1d => {
                let (s, h, _) = toy_1d_settings();
                (UniformSampler::toy_1d(), s, h)
            }
        };
        let build = move |code: &BoundaryCode| build_crowd_motion_with(code, steps, horizon, &settings);
        let teacher: Box<dyn Teacher> = match op.teacher {
            TeacherKind::Nf => Box::new(NfTeacher {
                config: self.fixed_config(),
                uniform: 0.2,
            }),
            TeacherKind::Oracle => Box::new(OracleTeacher {
                points: self.cfg.oracle.points,
                levels_per_step: self.cfg.oracle.levels_per_step,
                config: self.cfg.oracle.solver,
                ..Default::default()
            }),
        };
        // Fail on an unusable sampler before writing anything.
        build(&sampler.draw(&mut pionm::exec::stream_rng(train.seed, u64::MAX)))?;
        self.write_config()?;
        let session = train_pionm(&sampler, &build, teacher.as_ref(), &train)?;
        self.write("operator.json", session.model.to_json().as_bytes())?;
        self.write("operator_best.json", session.best.to_json().as_bytes())?;
        self.write("session.csv", session.report.to_csv().as_bytes())?;
        let summary = json!({
            "codes": train.codes,
            "skipped": session.report.skipped(),
            "layout": sampler.layout().describe(),
            "seconds": session.report.seconds,
        });
        self.write("summary.json", &json_bytes(&summary))?;
        if train.codes > 0 && session.report.skipped() == train.codes {
            return Err(CliError::NonConvergence("every inner solve was skipped".into()));
        }
        Ok(())
    }

    fn oracle(&self, targets: &[Target]) -> Result<(), CliError> {
        let problems = targets.iter().map(Target::natural).collect::<Result<Vec<_>, _>>()?;
        let teacher = OracleTeacher {
            points: self.cfg.oracle.points,
            levels_per_step: self.cfg.oracle.levels_per_step,
            config: self.cfg.oracle.solver,
            ..Default::default()
        };
        let grids = problems.iter().map(|(_, p)| teacher.grid(p)).collect::<Result<Vec<_>, _>>()?;
        self.write_config()?;
        let mut stalled = Vec::new();
        for ((t, (_, problem)), grid) in targets.iter().zip(&problems).zip(&grids) {
            let (sol, seconds) = timed(|| pionm::oracle::solve_fixed_point(problem, grid, &teacher.config));
            let sol = sol?;
            sol.save_csv(&self.out.join(&t.name).join("fields.csv"))?;
            let summary = json!({
                "scenario": t.name,
                "converged": sol.converged,
                "iterations": sol.iterations(),
                "mass_drift": sol.mass_drift,
                "boundary_mass": sol.boundary_mass,
                "points": grid.points,
                "levels": grid.levels,
                "seconds": seconds,
            });
            self.write(Path::new(&t.name).join("oracle.json"), &json_bytes(&summary))?;
            if !sol.converged {
                stalled.push(t.name.clone());
            }
        }
        if stalled.is_empty() {
            Ok(())
        } else {
            Err(CliError::NonConvergence(format!("fixed point not reached: {}", stalled.join(", "))))
        }
    }

    fn infer(&self, targets: &[Target], checkpoint: Checkpoint) -> Result<(), CliError> {
        let Checkpoint::Operator(model) = checkpoint else {
            return Err(CliError::Schema("infer needs an operator checkpoint".into()));
        };
        let problems = targets.iter().map(|t| t.problem(*model.layout())).collect::<Result<Vec<_>, _>>()?;
        self.write_config()?;
        for (t, (code, problem)) in targets.iter().zip(&problems) {
            let per_axis = vec![self.cfg.eval.lattice; problem.dim];
            let inf = infer_equilibrium(&model, code, &problem.working_box, &per_axis)?;
            let d = problem.dim;
            let mut csv = String::from("step,t");
            for k in 0..d {
                csv.push_str(&format!(",x{k}"));
            }
            csv.push_str(",density\n");
            for (n, field) in inf.fields.iter().enumerate() {
                let t_n = problem.horizon * (n + 1) as f64 / inf.steps() as f64;
                for (j, v) in field.iter().enumerate() {
                    csv.push_str(&format!("{},{t_n}", n + 1));
                    for x in &inf.points[j * d..(j + 1) * d] {
                        csv.push_str(&format!(",{x}"));
                    }
                    csv.push_str(&format!(",{v:e}\n"));
                }
            }
            self.write(Path::new(&t.name).join("fields.csv"), csv.as_bytes())?;
            let summary = json!({
                "scenario": t.name,
                "code_digest": code.digest(),
                "points_per_axis": inf.points_per_axis,
                "working_box": inf.working_box,
                "masses": inf.masses,
                "seconds": inf.seconds,
            });
            self.write(Path::new(&t.name).join("inference.json"), &json_bytes(&summary))?;
        }
        Ok(())
    }

    /// Flow used for agent sampling, with the time spent producing it. An
    /// operator checkpoint supplies a warm start for a fixed solve.
    fn flow_for(&self, t: &Target, checkpoint: &Checkpoint) -> Result<(DensityFlow, MfgProblem, f64), CliError> {
        match checkpoint {
            Checkpoint::Operator(model) => {
                let (code, problem) = t.problem(*model.layout())?;
                let cfg = self.fixed_config();
                let (sol, seconds) = timed(|| -> Result<FixedSolution, CliError> {
                    let warm = warm_start_from(model, &problem, &code, self.cfg.operator.train.warm_points.max(8), 1.0)?;
                    Ok(train_fixed(&problem, Some(&warm), &cfg)?)
                });
                Ok((sol?.flow.with_exec(self.exec), problem, seconds))
            }
            Checkpoint::Solutions(dir) => {
                let (_, problem) = t.natural()?;
                Ok((solution_flow(&dir.join(&t.name).join("solution.json"), self.exec)?, problem, 0.0))
            }
            Checkpoint::Solution(flow) => {
                let (_, problem) = t.natural()?;
                Ok((flow.clone(), problem, 0.0))
            }
        }
    }

    fn check_single(&self, targets: &[Target], checkpoint: &Checkpoint) -> Result<(), CliError> {
        if matches!(checkpoint, Checkpoint::Solution(_)) && targets.len() != 1 {
            return Err(CliError::Schema("a single solution checkpoint serves one scenario; pass the train-fixed output directory".into()));
        }
        if let Checkpoint::Solutions(dir) = checkpoint {
            for t in targets {
                let p = dir.join(&t.name).join("solution.json");
                if !p.is_file() {
                    return Err(CliError::Io(format!("{} not found", p.display())));
                }
            }
        }
        Ok(())
    }

    fn eval(&self, targets: &[Target], checkpoint: Checkpoint) -> Result<(), CliError> {
        self.check_single(targets, &checkpoint)?;
        let e = &self.cfg.eval;
        let mut reports = Vec::with_capacity(targets.len());
        for t in targets {
            let (flow, problem, seconds) = self.flow_for(t, &checkpoint)?;
            let base = flow.sample_base(e.agents, pionm::exec::derive_seed(self.seed(), 7));
            let traj = flow.trajectories(&base);
            let obstacles = t.file.scenario.obstacles.clone();
            let success = collision_success_rate(&traj, e.agents, problem.dim, &obstacles, e.pair_radius, self.exec)?;
            let volume = flow_volume_invariance(&flow, &problem.working_box, e.quadrature)?;
            reports.push(MetricsReport {
                scenario: t.name.clone(),
                success_rate: success,
                pair_radius: e.pair_radius,
                agents: e.agents,
                volume_diff: volume.log10_max,
                volume,
                solve_seconds: seconds,
            });
        }
        self.write_config()?;
        MetricsReport::save_all(&reports, &self.out.join("metrics.csv"), &self.out.join("metrics.json"))?;
        Ok(())
    }

    fn plot(&self, targets: &[Target], checkpoint: Checkpoint) -> Result<(), CliError> {
        self.check_single(targets, &checkpoint)?;
        let p = &self.cfg.plot;
        let mut images = Vec::with_capacity(targets.len());
        for t in targets {
            let (flow, problem, _) = self.flow_for(t, &checkpoint)?;
            let base = flow.sample_base(p.agents, pionm::exec::derive_seed(self.seed(), 7));
            let traj = flow.trajectories(&base);
            let img = plot::snapshot_grid(&traj, p.agents, &problem, &t.file.scenario.obstacles, p.panel)?;
            images.push(plot::encode_png(&img)?);
        }
        self.write_config()?;
        for (t, png) in targets.iter().zip(images) {
            self.write(Path::new(&t.name).join("snapshots.png"), &png)?;
        }
        Ok(())
    }
}
