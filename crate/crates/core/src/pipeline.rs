//! The command implementations behind the CLI. Each command reads its
//! inputs, writes its outputs and returns a [`RunReport`] that records the
//! full configuration, so a run can be replayed from its report alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::Serialize;

use crate::bcd::{solve_bcd, BcdReport};
use crate::config::{RunConfig, SolveMode};
use crate::dict::{align_corpus, learn_dictionary, DictLearnReport};
use crate::em::{solve_em, EmReport};
use crate::error::{Error, Result};
use crate::init::{init_from_heatmaps, init_given_2d};
use crate::io;
use crate::metrics::{evaluate, EvalReport};
use crate::objective::{self, ObjectiveBreakdown};
use crate::synth::{generate_scene, synthetic_dictionary};
use crate::types::{Pose2DSequence, PoseDictionary, SequenceEstimate};

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait Staged<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Staged<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub joints: usize,
    pub atoms: usize,
    pub dictionary_generated: bool,
    pub clamped_joints: usize,
    pub corrupted_maps: usize,
    pub swapped_pairs: usize,
    pub truth_body_scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub mode: SolveMode,
    pub initial_objective: ObjectiveBreakdown,
    pub final_objective: ObjectiveBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bcd: Option<BcdReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<EmReport>,
}

/// Machine-readable record of one command.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dictionary: Option<DictLearnReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    /// Files written. Commands with an output directory list names inside
    /// it, so reports do not depend on where the run was placed.
    pub outputs: Vec<String>,
}

impl RunReport {
    fn new(command: &str, config: &RunConfig) -> Self {
        RunReport {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            dictionary: None,
            synth: None,
            solve: None,
            eval: None,
            outputs: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        // non-finite floats serialize as null, so this cannot fail
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes the report as JSON to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    fn output(&mut self, entry: impl Into<String>) {
        self.outputs.push(entry.into());
    }
}

/// File names used inside output directories.
pub mod files {
    pub const DICTIONARY: &str = "dictionary.bin";
    pub const TRUTH_3D: &str = "truth3d.bin";
    pub const TRUTH_2D: &str = "truth2d.bin";
    pub const HEATMAPS: &str = "heatmaps.bin";
    pub const TRUTH_ESTIMATE: &str = "truth_estimate.bin";
    pub const ESTIMATE: &str = "estimate.bin";
    pub const POSES_3D: &str = "poses3d.bin";
    pub const POSES_2D: &str = "poses2d.bin";
    pub const EXPECTED_2D: &str = "expected2d.bin";
    pub const REPORT: &str = "report.json";
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Aligns a 3D pose corpus and learns a dictionary from it.
pub fn learn_dict_command(config: &RunConfig, corpus: &Path, out: &Path) -> StageResult<RunReport> {
    let mut report = RunReport::new("learn-dict", config);
    let poses = io::read_pose3d(corpus).stage("read corpus")?;
    let skeleton = config.skeleton_for(poses.joint_count()).stage("read corpus")?;
    let aligned = align_corpus(&poses, &skeleton).stage("align corpus")?;
    let (dict, learn) = learn_dictionary(&aligned, &skeleton, &config.dict_config()).stage("learn dictionary")?;
    io::write_dictionary(out, &dict).stage("write dictionary")?;
    report.output(out.display().to_string());
    report.dictionary = Some(learn);
    Ok(report)
}

/// Dictionary from `path`, or a generated one when no path is given.
fn dictionary_or_generated(config: &RunConfig, path: Option<&Path>) -> Result<(PoseDictionary, bool)> {
    match path {
        Some(p) => Ok((io::read_dictionary(p)?, false)),
        None => Ok((
            synthetic_dictionary(config.synth_atom_count, config.synth_atom_angle_std, config.seed)?,
            true,
        )),
    }
}

/// Generates a ground-truthed sequence and writes every artifact to `out`.
pub fn synth_command(config: &RunConfig, dict: Option<&Path>, out: &Path) -> StageResult<RunReport> {
    let mut report = RunReport::new("synth", config);
    ensure_dir(out).stage("synth")?;
    let (dict, generated) = dictionary_or_generated(config, dict).stage("load dictionary")?;
    let scene = generate_scene(&config.synth_config(), &dict).stage("synth")?;
    let truth3d = scene.truth.camera_frame_poses();
    let writes: [(&str, Box<dyn Fn(&Path) -> Result<()>>); 5] = [
        (files::DICTIONARY, Box::new(|p| io::write_dictionary(p, &dict))),
        (files::TRUTH_3D, Box::new(|p| io::write_pose3d(p, &truth3d))),
        (files::TRUTH_2D, Box::new(|p| io::write_pose2d(p, &scene.observations))),
        (files::HEATMAPS, Box::new(|p| io::write_heatmaps(p, &scene.heatmaps))),
        (
            files::TRUTH_ESTIMATE,
            Box::new(|p| io::write_estimate(p, &scene.truth.coeffs, &scene.truth.camera)),
        ),
    ];
    for (name, write) in writes {
        let path = out.join(name);
        write(&path).stage("write synthetic data")?;
        report.output(name);
    }
    report.synth = Some(SynthSummary {
        frames: scene.observations.len(),
        joints: dict.joint_count(),
        atoms: dict.atom_count(),
        dictionary_generated: generated,
        clamped_joints: scene.clamped.len(),
        corrupted_maps: scene.corrupted.len(),
        swapped_pairs: scene.swapped.len(),
        truth_body_scale: truth3d.mean_body_scale(),
    });
    Ok(report)
}

/// Output of a solve: the estimate and, for heat-map input, the final
/// expected 2D locations.
pub struct Solution {
    pub estimate: SequenceEstimate,
    pub expected: Option<Pose2DSequence>,
    pub summary: SolveSummary,
}

/// Initializes and solves from 2D poses (`given-2d`) or heat maps.
pub fn solve_from_input(
    config: &RunConfig,
    dict: Arc<PoseDictionary>,
    mode: SolveMode,
    input: &Path,
) -> StageResult<Solution> {
    let params = config.model_params();
    let init_config = config.init_config();
    match mode {
        SolveMode::Given2d => {
            let obs = io::read_pose2d(input).stage("read observations")?;
            let initial = init_given_2d(&obs, dict, &params, &init_config).stage("initialize")?;
            let initial_objective = objective::evaluate(&initial, &obs, &params).stage("initialize")?;
            let (estimate, bcd) = solve_bcd(&initial, &obs, &params).stage("solve")?;
            let final_objective = objective::evaluate(&estimate, &obs, &params).stage("solve")?;
            Ok(Solution {
                estimate,
                expected: None,
                summary: SolveSummary {
                    mode,
                    initial_objective,
                    final_objective,
                    bcd: Some(bcd),
                    em: None,
                },
            })
        }
        SolveMode::Heatmaps => {
            let maps = io::read_heatmaps(input).stage("read heat maps")?;
            let initial = init_from_heatmaps(&maps, dict, &params, &init_config).stage("initialize")?;
            let argmax = maps.argmax_poses();
            let initial_objective = objective::evaluate(&initial, &argmax, &params).stage("initialize")?;
            let (estimate, expected, em) = solve_em(&maps, &initial, &params).stage("solve")?;
            let final_objective = objective::evaluate(&estimate, &expected, &params).stage("solve")?;
            Ok(Solution {
                estimate,
                expected: Some(expected),
                summary: SolveSummary {
                    mode,
                    initial_objective,
                    final_objective,
                    bcd: None,
                    em: Some(em),
                },
            })
        }
    }
}

fn write_solution(solution: &Solution, out: &Path, report: &mut RunReport) -> StageResult<()> {
    ensure_dir(out).stage("write estimate")?;
    let est = &solution.estimate;
    let path = out.join(files::ESTIMATE);
    io::write_estimate(&path, &est.coeffs, &est.camera).stage("write estimate")?;
    report.output(files::ESTIMATE);
    let path = out.join(files::POSES_3D);
    io::write_pose3d(&path, &est.camera_frame_poses()).stage("write estimate")?;
    report.output(files::POSES_3D);
    let path = out.join(files::POSES_2D);
    io::write_pose2d(&path, &est.project_all()).stage("write estimate")?;
    report.output(files::POSES_2D);
    if let Some(expected) = &solution.expected {
        let path = out.join(files::EXPECTED_2D);
        io::write_pose2d(&path, expected).stage("write estimate")?;
        report.output(files::EXPECTED_2D);
    }
    Ok(())
}

pub fn solve_command(
    config: &RunConfig,
    dict: &Path,
    input: &Path,
    out: &Path,
) -> StageResult<RunReport> {
    let mut report = RunReport::new("solve", config);
    let dict = Arc::new(io::read_dictionary(dict).stage("load dictionary")?);
    let solution = solve_from_input(config, dict, config.mode, input)?;
    write_solution(&solution, out, &mut report)?;
    report.solve = Some(solution.summary);
    Ok(report)
}

/// Scores estimated poses against ground truth.
pub fn eval_command(
    config: &RunConfig,
    est3d: &Path,
    truth3d: &Path,
    est2d: &Path,
    truth2d: &Path,
) -> StageResult<RunReport> {
    let mut report = RunReport::new("eval", config);
    let e3 = io::read_pose3d(est3d).stage("read estimate")?;
    let t3 = io::read_pose3d(truth3d).stage("read ground truth")?;
    let e2 = io::read_pose2d(est2d).stage("read estimate")?;
    let t2 = io::read_pose2d(truth2d).stage("read ground truth")?;
    let skeleton = config.skeleton_for(t3.joint_count()).stage("evaluate")?;
    report.eval = Some(evaluate(&e3, &t3, &e2, &t2, &skeleton, &config.eval_options()).stage("evaluate")?);
    Ok(report)
}

/// Synthesizes a sequence, solves it in the configured mode and scores the
/// result. Intermediate files go to `out`.
pub fn pipeline_command(config: &RunConfig, out: &Path) -> StageResult<RunReport> {
    let mut report = RunReport::new("pipeline", config);
    let synth = synth_command(config, None, out)?;
    report.synth = synth.synth;
    report.outputs = synth.outputs;

    let dict = Arc::new(io::read_dictionary(&out.join(files::DICTIONARY)).stage("load dictionary")?);
    let input: PathBuf = match config.mode {
        SolveMode::Given2d => out.join(files::TRUTH_2D),
        SolveMode::Heatmaps => out.join(files::HEATMAPS),
    };
    let solution = solve_from_input(config, dict, config.mode, &input)?;
    write_solution(&solution, out, &mut report)?;

    let truth3d = io::read_pose3d(&out.join(files::TRUTH_3D)).stage("read ground truth")?;
    let truth2d = io::read_pose2d(&out.join(files::TRUTH_2D)).stage("read ground truth")?;
    let est3d = solution.estimate.camera_frame_poses();
    // heat-map runs are scored on the expected locations, 2D runs on the
    // model projection
    let est2d = solution.expected.clone().unwrap_or_else(|| solution.estimate.project_all());
    let skeleton = solution.estimate.dictionary.skeleton.clone();
    let eval = evaluate(&est3d, &truth3d, &est2d, &truth2d, &skeleton, &config.eval_options())
        .stage("evaluate")?;
    info!(
        "pipeline: Procrustes error {:.4e} ({:.3e} of body scale)",
        eval.mpjpe_procrustes, eval.relative_mpjpe_procrustes
    );
    report.solve = Some(solution.summary);
    report.eval = Some(eval);
    Ok(report)
}
