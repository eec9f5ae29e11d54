//! Declarative end-to-end runs.
//!
//! A [`PipelineConfig`] selects stages from
//! emulate → ingest → average → fit → segment → rates → psd → physics → report.
//! Every stage reads its inputs from files in the output directory (or from
//! explicit paths) and writes its results back there, so any suffix of the
//! chain can be re-run on cached upstream outputs. Each run leaves a
//! `manifest.json` with SHA-256 digests of every input and output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{blocks_from_gaps, fixed_window_average, gaussian_average};
use crate::emulator::{emulate_experiment, ExperimentPlan, NoiseSchedule, RtnHierarchy, RtnMode, RtnProcessSpec};
use crate::hdfa::{level_rates, run_hierarchy, HdfaOptions, LevelSummary, RateEstimate};
use crate::io::{self, col, ColumnKind, RecordMetadata};
use crate::noisefit::{fit_series, FitConfig, NoiseTrace, ProbabilityModel};
use crate::physics::{self, TlsObservation, TlsRanges};
use crate::rng::{derive_seed, Purpose};
use crate::spectral::{fit_psd_model, welch_psd_irregular, PsdFitOptions, PsdModel, WelchOptions};
use crate::{stats, Error, Result};

/// Environment variable that overrides the default output directory.
pub const CACHE_DIR_ENV: &str = "NOISETRACK_CACHE_DIR";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Emulate,
    Ingest,
    Average,
    Fit,
    Segment,
    Rates,
    Psd,
    Physics,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Emulate,
        Stage::Ingest,
        Stage::Average,
        Stage::Fit,
        Stage::Segment,
        Stage::Rates,
        Stage::Psd,
        Stage::Physics,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Emulate => "emulate",
            Stage::Ingest => "ingest",
            Stage::Average => "average",
            Stage::Fit => "fit",
            Stage::Segment => "segment",
            Stage::Rates => "rates",
            Stage::Psd => "psd",
            Stage::Physics => "physics",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

/// One qubit: how to emulate it and what is known about the device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitConfig {
    pub name: String,
    /// Noise schedule for the emulate stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<NoiseSchedule>,
    /// Gaussian window width W_G in repetitions; the global value applies
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_g: Option<f64>,
    /// Qubit frequency, Hz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0: Option<f64>,
    /// Anharmonicity, Hz (negative).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AverageConfig {
    pub w_g: f64,
    /// Use a uniform window of half-width `round(w_g)` instead.
    pub fixed: bool,
    /// Gaps longer than this multiple of the median step split the windows.
    pub gap_factor: f64,
}

impl Default for AverageConfig {
    fn default() -> Self {
        Self {
            w_g: 2.0,
            fixed: false,
            gap_factor: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsdConfig {
    /// Trace columns to analyse: any of `delta_f`, `gamma_1`, `gamma_phi`.
    pub parameters: Vec<String>,
    pub welch: WelchOptions,
    pub fit: PsdFitOptions,
}

impl Default for PsdConfig {
    fn default() -> Self {
        Self {
            parameters: vec!["gamma_1".into(), "delta_f".into()],
            welch: WelchOptions::default(),
            fit: PsdFitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    /// Junction thickness range, m.
    pub x_range: [f64; 2],
    /// Defect environment temperature range, K.
    pub t_range: [f64; 2],
    /// Grid points per range in the parameter sweep.
    pub steps: usize,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            x_range: [1e-9, 2e-9],
            t_range: [0.01, 0.1],
            steps: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stages: Vec<Stage>,
    /// Record file for the ingest stage; defaults to the emulate output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<PathBuf>,
    pub average: AverageConfig,
    pub fit: FitConfig,
    pub hdfa: HdfaOptions,
    pub psd: PsdConfig,
    pub physics: PhysicsConfig,
    pub plan: ExperimentPlan,
    pub qubits: Vec<QubitConfig>,
}

impl Default for PipelineConfig {
    /// One emulated qubit switching between +2 and −28 kHz with probability
    /// 1/20 per repetition, the device values of qubit 0 and all stages.
    fn default() -> Self {
        let telegraph = RtnHierarchy {
            centre: -13e3,
            gamma_1: 8e3,
            gamma_phi: 8e3,
            levels: vec![RtnProcessSpec {
                mode: RtnMode::SwitchProbability { q: 0.05 },
                amplitude: 30e3,
                centre_offset: 0.0,
                seed: 1,
            }],
        };
        Self {
            seed: 0,
            output_dir: std::env::var_os(CACHE_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("noisetrack-out")),
            stages: Stage::ALL.to_vec(),
            records: None,
            average: AverageConfig::default(),
            fit: FitConfig::default(),
            hdfa: HdfaOptions::default(),
            psd: PsdConfig::default(),
            physics: PhysicsConfig::default(),
            plan: ExperimentPlan::uniform(33, 68.3e-6, 20_000, 1),
            qubits: vec![QubitConfig {
                name: "q0".into(),
                schedule: Some(NoiseSchedule::Telegraph { hierarchy: telegraph }),
                w_g: None,
                f0: Some(5.030e9),
                alpha: Some(-0.336e9),
            }],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go and
    /// which stages a particular invocation runs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.stages.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.qubits.iter().map(|q| q.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("qubit names must be unique"));
        }
        if self.qubits.iter().any(|q| q.name.is_empty() || q.name.contains(['/', '\\', '\t'])) {
            return Err(Error::config("qubit names must be non-empty and free of path separators and tabs"));
        }
        if self.stages.contains(&Stage::Emulate) {
            self.plan.validate()?;
            if self.qubits.iter().all(|q| q.schedule.is_none()) {
                return Err(Error::config("the emulate stage needs at least one qubit with a schedule"));
            }
        }
        Ok(())
    }

    fn qubit(&self, name: &str) -> Option<&QubitConfig> {
        self.qubits.iter().find(|q| q.name == name)
    }

    fn w_g(&self, name: &str) -> f64 {
        self.qubit(name).and_then(|q| q.w_g).unwrap_or(self.average.w_g)
    }

    fn records_path(&self) -> PathBuf {
        self.records.clone().unwrap_or_else(|| self.output_dir.join("records.tsv"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Paths inside the output directory are recorded relative to it, so
    /// outputs do not depend on where the directory lives.
    fn display_path(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.output_dir).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_seconds: f64,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn succeeded(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

#[derive(Default)]
struct StageOutput {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl StageOutput {
    fn output(&mut self, path: PathBuf) {
        // Schema and metadata sidecars travel with their table.
        for side in [io::schema_path(&path), io::meta_path(&path)] {
            if side.exists() {
                self.outputs.push(side);
            }
        }
        self.outputs.push(path);
    }
}

/// Run the selected stages in order, writing `manifest.json` into the
/// output directory. A failing stage stops the run; its error is returned
/// after the manifest has been written with the failure recorded.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let mut stages = config.stages.clone();
    stages.sort_unstable();
    stages.dedup();
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config.hash(),
        stages: Vec::new(),
        warnings: Vec::new(),
    };
    if stages.is_empty() {
        return Ok(manifest);
    }
    std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let manifest_path = config.out("manifest.json");
    let mut failure = None;
    for (i, &stage) in stages.iter().enumerate() {
        info!("stage {}", stage.name());
        let started = Instant::now();
        let result = run_stage(stage, config);
        let wall_seconds = started.elapsed().as_secs_f64();
        let record = match result {
            Ok(out) => {
                let digests = |paths: &[PathBuf]| paths.iter().map(|p| digest_file(p)).collect::<Result<Vec<_>>>();
                manifest.warnings.extend(out.warnings.iter().map(|w| format!("{}: {w}", stage.name())));
                StageRecord {
                    stage,
                    status: StageStatus::Ok,
                    inputs: digests(&out.inputs)?,
                    outputs: digests(&out.outputs)?,
                    wall_seconds,
                    warnings: out.warnings,
                    error: None,
                }
            }
            Err(e) => {
                warn!("stage {} failed: {e}", stage.name());
                let record = StageRecord {
                    stage,
                    status: StageStatus::Failed,
                    inputs: Vec::new(),
                    outputs: Vec::new(),
                    wall_seconds,
                    warnings: Vec::new(),
                    error: Some(e.to_string()),
                };
                failure = Some((i, e));
                record
            }
        };
        manifest.stages.push(record);
        if failure.is_some() {
            break;
        }
    }
    if let Some((i, _)) = &failure {
        for &stage in &stages[i + 1..] {
            manifest.stages.push(StageRecord {
                stage,
                status: StageStatus::Skipped,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_seconds: 0.0,
                warnings: Vec::new(),
                error: None,
            });
        }
    }
    io::write_json(&manifest_path, &manifest)?;
    match failure {
        Some((_, e)) => Err(e),
        None => Ok(manifest),
    }
}

fn run_stage(stage: Stage, c: &PipelineConfig) -> Result<StageOutput> {
    match stage {
        Stage::Emulate => emulate_stage(c),
        Stage::Ingest => ingest_stage(c),
        Stage::Average => average_stage(c),
        Stage::Fit => fit_stage(c),
        Stage::Segment => segment_stage(c),
        Stage::Rates => rates_stage(c),
        Stage::Psd => psd_stage(c),
        Stage::Physics => physics_stage(c),
        Stage::Report => report_stage(c),
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "{} is missing; run the {stage} stage first or point the config at an existing file",
            path.display()
        )))
    }
}

fn emulate_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let mut runs = Vec::new();
    let mut schedules = Vec::new();
    for (qi, q) in c.qubits.iter().enumerate() {
        let Some(schedule) = &q.schedule else { continue };
        let em = emulate_experiment(&c.plan, schedule, derive_seed(c.seed, Purpose::Outcomes, qi as u64))?;
        let truth_path = c.out(&format!("truth_{}.tsv", q.name));
        let t = &em.times.t;
        let cols: Vec<Vec<f64>> = vec![
            t.clone(),
            em.truth.params.iter().map(|p| p.delta_f).collect(),
            em.truth.params.iter().map(|p| p.gamma_1).collect(),
            em.truth.params.iter().map(|p| p.gamma_phi).collect(),
        ];
        let states: Vec<Vec<f64>> = em.truth.states.iter().map(|s| s.iter().map(|&v| f64::from(v)).collect()).collect();
        let mut spec = vec![
            (col("t_s", ColumnKind::Float, "s", ""), cols[0].as_slice()),
            (col("delta_f_hz", ColumnKind::Float, "Hz", "true detuning"), cols[1].as_slice()),
            (col("gamma_1", ColumnKind::Float, "1/s", "true relaxation rate"), cols[2].as_slice()),
            (col("gamma_phi", ColumnKind::Float, "1/s", "true dephasing rate"), cols[3].as_slice()),
        ];
        let names: Vec<String> = (1..=states.len()).map(|l| format!("state_{l}")).collect();
        for (name, s) in names.iter().zip(&states) {
            spec.push((col(name, ColumnKind::Float, "", "telegraph state of this level"), s.as_slice()));
        }
        io::write_columns(&truth_path, &spec, serde_json::Value::Null)?;
        out.output(truth_path);
        schedules.push(schedule.clone());
        runs.push((q.name.as_str(), em));
    }
    let meta = RecordMetadata {
        plan: c.plan.clone(),
        qubits: runs.iter().map(|(n, _)| n.to_string()).collect(),
        schedules,
        seed: Some(c.seed),
    };
    let path = c.out("records.tsv");
    let refs: Vec<(&str, &crate::emulator::Emulation)> = runs.iter().map(|(n, e)| (*n, e)).collect();
    io::write_records(&path, &refs, &meta)?;
    out.output(path);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IngestSummary {
    records: PathBuf,
    qubits: Vec<String>,
    n_repetitions: usize,
    n_circuits: usize,
    uniform_fallback: bool,
    warnings: Vec<String>,
}

fn ingest_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let records = c.records_path();
    require(&records, "emulate")?;
    let ing = io::ingest_records(&records, None)?;
    let summary = IngestSummary {
        records: c.display_path(&records),
        qubits: ing.streams.iter().map(|s| s.name.clone()).collect(),
        n_repetitions: ing.plan.total_repetitions(),
        n_circuits: ing.plan.n_circuits(),
        uniform_fallback: ing.streams.first().is_some_and(|s| s.times.uniform_fallback),
        warnings: ing.warnings.clone(),
    };
    let path = c.out("ingest.json");
    io::write_json(&path, &summary)?;
    Ok(StageOutput {
        inputs: vec![records.clone(), io::meta_path(&records)],
        outputs: vec![path],
        warnings: ing.warnings,
    })
}

fn ingest_summary(c: &PipelineConfig) -> Result<IngestSummary> {
    let path = c.out("ingest.json");
    require(&path, "ingest")?;
    io::read_json(&path)
}

fn record_plan(records: &Path) -> Result<ExperimentPlan> {
    let meta: RecordMetadata = io::read_json(&io::meta_path(records))?;
    Ok(meta.plan)
}

fn average_stage(c: &PipelineConfig) -> Result<StageOutput> {
    ingest_summary(c)?;
    let records = c.records_path();
    let ing = io::ingest_records(&records, None)?;
    let mut out = StageOutput {
        inputs: vec![records],
        ..Default::default()
    };
    for s in &ing.streams {
        let blocks = blocks_from_gaps(&s.times.t, c.average.gap_factor);
        let w = c.w_g(&s.name);
        let series = if c.average.fixed {
            fixed_window_average(&s.outcomes, w.round().max(0.0) as usize, &blocks)?
        } else {
            gaussian_average(&s.outcomes, w, &blocks)?
        };
        let path = c.out(&format!("prob_{}.tsv", s.name));
        io::write_probabilities(&path, &ing.plan, &s.times.t, &series)?;
        out.output(path);
    }
    Ok(out)
}

fn fit_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let summary = ingest_summary(c)?;
    let plan = record_plan(&c.records_path())?;
    let model = ProbabilityModel::new(&plan);
    let mut out = StageOutput::default();
    for (qi, name) in summary.qubits.iter().enumerate() {
        let prob = c.out(&format!("prob_{name}.tsv"));
        require(&prob, "average")?;
        let (times, series) = io::read_probabilities(&prob, &plan)?;
        let mut fc = c.fit.clone();
        fc.seed = derive_seed(c.seed ^ c.fit.seed, Purpose::Optimizer, qi as u64);
        let trace = fit_series(&series, &model, &times, &fc)?;
        let degraded = trace.points.iter().filter(|p| p.flags.degraded).count();
        if degraded > 0 {
            out.warnings.push(format!("{name}: {degraded} slices flagged degraded"));
        }
        let path = c.out(&format!("trace_{name}.tsv"));
        io::write_trace(&path, &trace)?;
        out.inputs.push(prob);
        out.output(path);
    }
    Ok(out)
}

fn read_qubit_trace(c: &PipelineConfig, name: &str) -> Result<(PathBuf, NoiseTrace)> {
    let path = c.out(&format!("trace_{name}.tsv"));
    require(&path, "fit")?;
    let trace = io::read_trace(&path)?;
    Ok((path, trace))
}

fn steps_path(c: &PipelineConfig, name: &str, level: usize) -> PathBuf {
    c.out(&format!("hdfa_{name}_level{level}_steps.tsv"))
}

fn segment_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let summary = ingest_summary(c)?;
    let mut out = StageOutput::default();
    for name in &summary.qubits {
        let (trace_path, trace) = read_qubit_trace(c, name)?;
        out.inputs.push(trace_path);
        let times = trace.times();
        let values = trace.column(|p| p.delta_f);
        let sigmas = trace.column(|p| p.sigma_delta_f);
        let levels = run_hierarchy(&values, &sigmas, &times, &c.hdfa)?;
        for l in &levels {
            let seg_path = c.out(&format!("hdfa_{name}_level{}_segments.tsv", l.level));
            let segs = &l.segmentation.segments;
            let end_t = |s: &crate::hdfa::Segment| times[s.end - 1];
            let columns: Vec<(io::Column, Vec<f64>)> = vec![
                (col("start_t_s", ColumnKind::Float, "s", "first step"), segs.iter().map(|s| times[s.start]).collect()),
                (col("end_t_s", ColumnKind::Float, "s", "last step"), segs.iter().map(end_t).collect()),
                (col("start", ColumnKind::Float, "", "first index"), segs.iter().map(|s| s.start as f64).collect()),
                (col("end", ColumnKind::Float, "", "one past the last index"), segs.iter().map(|s| s.end as f64).collect()),
                (col("f_c_hz", ColumnKind::Float, "Hz", ""), segs.iter().map(|s| s.summary.f_c).collect()),
                (col("f_delta_hz", ColumnKind::Float, "Hz", ""), segs.iter().map(|s| s.summary.f_delta).collect()),
                (col("sigma_f_c_hz", ColumnKind::Float, "Hz", "total"), segs.iter().map(|s| l.sigma_f_c[s.start]).collect()),
                (col("sigma_f_delta_hz", ColumnKind::Float, "Hz", "total"), segs.iter().map(|s| l.sigma_f_delta[s.start]).collect()),
                (col("mean_log10_likelihood", ColumnKind::Float, "", ""), segs.iter().map(|s| s.mean_log10_likelihood).collect()),
            ];
            let refs: Vec<(io::Column, &[f64])> = columns.iter().map(|(c, v)| (c.clone(), v.as_slice())).collect();
            io::write_columns(&seg_path, &refs, serde_json::Value::Null)?;
            out.output(seg_path);

            let st_path = steps_path(c, name, l.level);
            let states: Vec<f64> = l.states.iter().map(|&s| f64::from(s)).collect();
            io::write_columns(
                &st_path,
                &[
                    (col("t_s", ColumnKind::Float, "s", ""), times.as_slice()),
                    (col("input_hz", ColumnKind::Float, "Hz", "series segmented at this level"), l.input.as_slice()),
                    (col("f_c_hz", ColumnKind::Float, "Hz", ""), l.f_c.as_slice()),
                    (col("f_delta_hz", ColumnKind::Float, "Hz", ""), l.f_delta.as_slice()),
                    (col("sigma_f_c_hz", ColumnKind::Float, "Hz", ""), l.sigma_f_c.as_slice()),
                    (col("sigma_f_delta_hz", ColumnKind::Float, "Hz", ""), l.sigma_f_delta.as_slice()),
                    (col("state", ColumnKind::Float, "", "+1 upper, -1 lower"), states.as_slice()),
                ],
                serde_json::Value::Null,
            )?;
            out.output(st_path);
            if let Some(note) = &l.note {
                out.warnings.push(format!("{name} level {}: {note}", l.level));
            }
        }
        let summaries: Vec<LevelSummary> = levels.iter().map(LevelSummary::from).collect();
        let path = c.out(&format!("hdfa_{name}.json"));
        io::write_json(&path, &summaries)?;
        out.output(path);
    }
    Ok(out)
}

fn hdfa_summary(c: &PipelineConfig, name: &str) -> Result<(PathBuf, Vec<LevelSummary>)> {
    let path = c.out(&format!("hdfa_{name}.json"));
    require(&path, "segment")?;
    let s = io::read_json(&path)?;
    Ok((path, s))
}

struct LevelSteps {
    t: Vec<f64>,
    f_delta: Vec<f64>,
    sigma_f_delta: Vec<f64>,
    states: Vec<i8>,
}

fn read_steps(path: &Path) -> Result<LevelSteps> {
    let table = io::read_table(path)?;
    Ok(LevelSteps {
        t: table.f64_column("t_s")?,
        f_delta: table.f64_column("f_delta_hz")?,
        sigma_f_delta: table.f64_column("sigma_f_delta_hz")?,
        states: table.f64_column("state")?.iter().map(|&s| if s > 0.0 { 1 } else { -1 }).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRates {
    pub level: usize,
    pub tau_min: f64,
    pub nu_01: RateEstimate,
    pub nu_10: RateEstimate,
    #[serde(with = "crate::io::nonfinite")]
    pub null_fraction: f64,
}

fn rates_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let summary = ingest_summary(c)?;
    let mut out = StageOutput::default();
    for name in &summary.qubits {
        let (sum_path, levels) = hdfa_summary(c, name)?;
        out.inputs.push(sum_path);
        let mut table = Vec::new();
        for l in &levels {
            let sp = steps_path(c, name, l.level);
            require(&sp, "segment")?;
            let st = read_steps(&sp)?;
            out.inputs.push(sp);
            let (rates, null_fraction) = level_rates(l.level, &st.states, &st.f_delta, &st.sigma_f_delta, &st.t, l.l_min, &c.hdfa)?;
            if let Some(run) = &rates.running {
                let path = c.out(&format!("rates_{name}_level{}.tsv", l.level));
                io::write_columns(
                    &path,
                    &[
                        (col("t_s", ColumnKind::Float, "s", ""), st.t.as_slice()),
                        (col("nu_01", ColumnKind::Float, "1/s", "corrected, lower to upper"), run.nu_01.as_slice()),
                        (col("nu_10", ColumnKind::Float, "1/s", "corrected, upper to lower"), run.nu_10.as_slice()),
                        (col("nu_01_raw", ColumnKind::Float, "1/s", ""), run.nu_01_raw.as_slice()),
                        (col("nu_10_raw", ColumnKind::Float, "1/s", ""), run.nu_10_raw.as_slice()),
                    ],
                    serde_json::json!({ "window_s": run.window }),
                )?;
                out.output(path);
            }
            table.push(LevelRates {
                level: l.level,
                tau_min: rates.tau_min,
                nu_01: rates.nu_01,
                nu_10: rates.nu_10,
                null_fraction,
            });
        }
        let path = c.out(&format!("rates_{name}.json"));
        io::write_json(&path, &table)?;
        out.output(path);
    }
    Ok(out)
}

fn trace_column(trace: &NoiseTrace, parameter: &str) -> Result<Vec<f64>> {
    Ok(match parameter {
        "delta_f" => trace.column(|p| p.delta_f),
        "gamma_1" => trace.column(|p| p.gamma_1),
        "gamma_phi" => trace.column(|p| p.gamma_phi),
        other => return Err(Error::config(format!("unknown PSD parameter '{other}'"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdResult {
    pub parameter: String,
    pub segment_length: usize,
    pub n_segments: usize,
    pub model: Option<PsdModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn psd_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let summary = ingest_summary(c)?;
    let mut out = StageOutput::default();
    for name in &summary.qubits {
        let (trace_path, trace) = read_qubit_trace(c, name)?;
        out.inputs.push(trace_path);
        let times = trace.times();
        let mut opts = c.psd.welch;
        // Keep at least eight segments on short traces.
        let fit_len = (times.len() / 8).max(16);
        if opts.segment_length > fit_len {
            let shorter = 1usize << (usize::BITS - 1 - fit_len.leading_zeros());
            out.warnings.push(format!("{name}: Welch segment length reduced from {} to {shorter}", opts.segment_length));
            opts.segment_length = shorter;
        }
        let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        let dt = stats::median(&steps);
        let mut results = Vec::new();
        for parameter in &c.psd.parameters {
            let values = trace_column(&trace, parameter)?;
            let psd = welch_psd_irregular(&times, &values, &opts)?;
            let (model, note) = match fit_psd_model(&psd, dt, c.w_g(name), &c.psd.fit) {
                Ok(m) => (Some(m), None),
                Err(e) => {
                    out.warnings.push(format!("{name} {parameter}: {e}"));
                    (None, Some(e.to_string()))
                }
            };
            let path = c.out(&format!("psd_{name}_{parameter}.tsv"));
            io::write_columns(
                &path,
                &[
                    (col("f_hz", ColumnKind::Float, "Hz", ""), psd.freqs.as_slice()),
                    (col("psd", ColumnKind::Float, "unit^2/Hz", "one-sided density"), psd.power.as_slice()),
                ],
                serde_json::json!({ "model": model, "window": psd.window }),
            )?;
            out.output(path);
            results.push(PsdResult {
                parameter: parameter.clone(),
                segment_length: psd.segment_length,
                n_segments: psd.n_segments,
                model,
                note,
            });
        }
        let path = c.out(&format!("psd_{name}.json"));
        io::write_json(&path, &results)?;
        out.output(path);
    }
    Ok(out)
}

/// One row of the charge-dispersion comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionRow {
    pub qubit: String,
    pub f0: f64,
    pub alpha: f64,
    pub e_c: f64,
    pub e_j: f64,
    pub xi: f64,
    pub analytic: f64,
    pub numerical: f64,
    /// Largest resolved level-1 amplitude and its uncertainty, Hz.
    pub f_delta_max: Option<(f64, f64)>,
}

/// One column of the defect-model table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TlsRow {
    pub qubit: String,
    pub delta_n_g: f64,
    pub sigma_delta_n_g: f64,
    pub low_statistics: bool,
    pub f_delta_2: f64,
    pub nu_01: f64,
    pub nu_10: f64,
    pub n01: f64,
    pub ranges: TlsRanges,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsReport {
    pub dispersion: Vec<DispersionRow>,
    pub tls: Vec<TlsRow>,
    /// Input files behind every row, by qubit.
    pub provenance: BTreeMap<String, Vec<PathBuf>>,
    pub notes: Vec<String>,
}

fn physics_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let mut out = StageOutput::default();
    let mut report = PhysicsReport {
        dispersion: Vec::new(),
        tls: Vec::new(),
        provenance: BTreeMap::new(),
        notes: Vec::new(),
    };
    for q in &c.qubits {
        let (Some(f0), Some(alpha)) = (q.f0, q.alpha) else { continue };
        let spec = physics::calibrate_ec_ej(f0, alpha)?;
        let mut sources = Vec::new();
        let hdfa = c.out(&format!("hdfa_{}.json", q.name));
        let levels: Option<Vec<LevelSummary>> = if hdfa.exists() {
            sources.push(hdfa.clone());
            Some(io::read_json(&hdfa)?)
        } else {
            None
        };
        let f_delta_max = levels.as_ref().and_then(|l| l.first()).and_then(|l| l.max_f_delta);
        report.dispersion.push(DispersionRow {
            qubit: q.name.clone(),
            f0,
            alpha,
            e_c: spec.e_c,
            e_j: spec.e_j,
            xi: spec.xi(),
            analytic: physics::charge_dispersion_analytic(spec.e_c, spec.xi()),
            numerical: physics::charge_dispersion_numerical(spec.e_c, spec.e_j)?,
            f_delta_max,
        });
        match (&levels, f_delta_max) {
            (Some(levels), Some((fmax, _))) if levels.len() >= 2 && levels[0].active && levels[1].active => {
                let l1_path = steps_path(c, &q.name, 1);
                let l2_path = steps_path(c, &q.name, 2);
                let l1 = read_steps(&l1_path)?;
                let l2 = read_steps(&l2_path)?;
                sources.extend([l1_path, l2_path]);
                let n_g = physics::extract_charge_offset(&l1.f_delta, fmax)?;
                let transitions: Vec<usize> = (1..l2.states.len()).filter(|&k| l2.states[k] != l2.states[k - 1]).collect();
                let jumps = physics::charge_jump_statistics(&n_g.n_g, &transitions)?;
                let hist = c.out(&format!("ng_jumps_{}.tsv", q.name));
                let lo: Vec<f64> = jumps.bin_edges[..jumps.counts.len()].to_vec();
                let hi: Vec<f64> = jumps.bin_edges[1..=jumps.counts.len()].to_vec();
                let counts: Vec<f64> = jumps.counts.iter().map(|&n| n as f64).collect();
                io::write_columns(
                    &hist,
                    &[
                        (col("bin_lo", ColumnKind::Float, "2e", ""), lo.as_slice()),
                        (col("bin_hi", ColumnKind::Float, "2e", ""), hi.as_slice()),
                        (col("count", ColumnKind::Float, "", ""), counts.as_slice()),
                    ],
                    serde_json::json!({ "estimate": jumps.estimate, "uncertainty": jumps.uncertainty }),
                )?;
                out.output(hist);
                let l2s = &levels[1];
                let f_delta_2 = l2s.mean_f_delta.ok_or_else(|| Error::data("level 2 has no resolved amplitude"))?;
                let obs = TlsObservation {
                    delta_n_g: jumps.estimate,
                    f_delta_2,
                    nu_01: l2s.nu_01.corrected,
                    nu_10: l2s.nu_10.corrected,
                };
                let n01 = physics::diagonalize_transmon(spec.e_c, spec.e_j, 0.0, physics::DEFAULT_CUTOFF)?.n01;
                let pc = &c.physics;
                match physics::tls_parameter_ranges(&obs, &spec, n01, (pc.x_range[0], pc.x_range[1]), (pc.t_range[0], pc.t_range[1]), pc.steps) {
                    Ok(ranges) => report.tls.push(TlsRow {
                        qubit: q.name.clone(),
                        delta_n_g: jumps.estimate,
                        sigma_delta_n_g: jumps.uncertainty,
                        low_statistics: jumps.low_statistics,
                        f_delta_2,
                        nu_01: obs.nu_01,
                        nu_10: obs.nu_10,
                        n01,
                        ranges,
                    }),
                    Err(e) => {
                        let msg = format!("{}: defect model not evaluated: {e}", q.name);
                        out.warnings.push(msg.clone());
                        report.notes.push(msg);
                    }
                }
            }
            _ => report.notes.push(format!("{}: fewer than two active levels; defect model skipped", q.name)),
        }
        report.provenance.insert(q.name.clone(), sources.iter().map(|p| c.display_path(p)).collect());
        out.inputs.extend(sources);
    }
    let path = c.out("physics.json");
    io::write_json(&path, &report)?;
    out.output(path);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub n_points: usize,
    pub median_delta_f: f64,
    pub median_gamma_1: f64,
    pub median_gamma_phi: f64,
    pub degraded: usize,
    pub low_sensitivity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QubitReport {
    pub trace: Option<TraceSummary>,
    pub hierarchy: Vec<LevelSummary>,
    pub rates: Vec<LevelRates>,
    pub psd: Vec<PsdResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub qubits: BTreeMap<String, QubitReport>,
    pub physics: Option<PhysicsReport>,
    /// Plot-data files by figure.
    pub plots: BTreeMap<String, Vec<PathBuf>>,
}

fn read_opt<T: for<'de> Deserialize<'de>>(path: &Path, inputs: &mut Vec<PathBuf>) -> Result<Option<T>> {
    if path.exists() {
        inputs.push(path.to_path_buf());
        io::read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Freedman–Diaconis histogram written as `(bin_lo, bin_hi, count)`.
fn write_histogram(path: &Path, values: &[f64], unit: &str) -> Result<()> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let iqr = if v.is_empty() { 0.0 } else { stats::quantile(&v, 0.75) - stats::quantile(&v, 0.25) };
    let mut width = 2.0 * iqr / (v.len().max(1) as f64).cbrt();
    if !(width > 0.0) {
        width = if hi > lo { (hi - lo) / 10.0 } else { 1.0 };
    }
    let bins = if v.is_empty() { 0 } else { (((hi - lo) / width).floor() as usize + 1).min(10_000) };
    let mut counts = vec![0.0; bins];
    for &x in &v {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1.0;
    }
    let edges_lo: Vec<f64> = (0..bins).map(|k| lo + k as f64 * width).collect();
    let edges_hi: Vec<f64> = (0..bins).map(|k| lo + (k + 1) as f64 * width).collect();
    io::write_columns(
        path,
        &[
            (col("bin_lo", ColumnKind::Float, unit, ""), edges_lo.as_slice()),
            (col("bin_hi", ColumnKind::Float, unit, ""), edges_hi.as_slice()),
            (col("count", ColumnKind::Float, "", ""), counts.as_slice()),
        ],
        serde_json::Value::Null,
    )
}

fn report_stage(c: &PipelineConfig) -> Result<StageOutput> {
    let summary = ingest_summary(c)?;
    let mut out = StageOutput::default();
    let mut report = Report {
        config_hash: c.hash(),
        qubits: BTreeMap::new(),
        physics: None,
        plots: BTreeMap::new(),
    };
    let mut plot = |figure: &str, path: PathBuf| report.plots.entry(figure.to_string()).or_default().push(c.display_path(&path));
    for name in &summary.qubits {
        let trace_path = c.out(&format!("trace_{name}.tsv"));
        let trace = if trace_path.exists() {
            let t = io::read_trace(&trace_path)?;
            out.inputs.push(trace_path.clone());
            plot("noise_trace", trace_path);
            Some(TraceSummary {
                n_points: t.len(),
                median_delta_f: stats::median(&t.column(|p| p.delta_f)),
                median_gamma_1: stats::median(&t.column(|p| p.gamma_1)),
                median_gamma_phi: stats::median(&t.column(|p| p.gamma_phi)),
                degraded: t.points.iter().filter(|p| p.flags.degraded).count(),
                low_sensitivity: t.points.iter().filter(|p| p.flags.low_sensitivity).count(),
            })
        } else {
            None
        };
        let hierarchy: Vec<LevelSummary> = read_opt(&c.out(&format!("hdfa_{name}.json")), &mut out.inputs)?.unwrap_or_default();
        for l in &hierarchy {
            let sp = steps_path(c, name, l.level);
            if sp.exists() {
                plot("hierarchy", sp);
            }
            let seg = c.out(&format!("hdfa_{name}_level{}_segments.tsv", l.level));
            if seg.exists() {
                let table = io::read_table(&seg)?;
                out.inputs.push(seg);
                for (column, unit, tag) in [("f_c_hz", "Hz", "f_c"), ("f_delta_hz", "Hz", "f_delta")] {
                    let path = c.out(&format!("hist_{name}_level{}_{tag}.tsv", l.level));
                    write_histogram(&path, &table.f64_column(column)?, unit)?;
                    out.output(path.clone());
                    plot("histograms", path);
                }
            }
            let rp = c.out(&format!("rates_{name}_level{}.tsv", l.level));
            if rp.exists() {
                plot("rate_traces", rp);
            }
        }
        let rates: Vec<LevelRates> = read_opt(&c.out(&format!("rates_{name}.json")), &mut out.inputs)?.unwrap_or_default();
        let psd: Vec<PsdResult> = read_opt(&c.out(&format!("psd_{name}.json")), &mut out.inputs)?.unwrap_or_default();
        for p in &psd {
            plot("psd", c.out(&format!("psd_{name}_{}.tsv", p.parameter)));
        }
        let ng = c.out(&format!("ng_jumps_{name}.tsv"));
        if ng.exists() {
            plot("histograms", ng);
        }
        report.qubits.insert(name.clone(), QubitReport { trace, hierarchy, rates, psd });
    }
    report.physics = read_opt(&c.out("physics.json"), &mut out.inputs)?;
    let path = c.out("report.json");
    io::write_json(&path, &report)?;
    out.output(path);
    Ok(out)
}
