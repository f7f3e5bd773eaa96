//! Experiment orchestration: configuration, the training loop, and drivers
//! that sweep the generative settings behind each reproducible table or
//! figure, emitting CSV reports with provenance columns.
//!
//! Independent (config, seed) cells run in parallel worker threads; each
//! cell owns its seed-derived RNG streams, so reports are byte-identical
//! across reruns regardless of scheduling.

pub mod config;
pub mod train;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{
    elbow_by_second_difference, evaluate_intervention, IdentReport, ScoreType,
};
use crate::objective::{sym_info_nce, ObjectiveConfig};
use crate::rng::{stream_rng, Stream};

pub use config::{artifact_version, ExperimentConfig, Scale};
pub use train::{train, train_encoders, RunRecord, TracePoint, TrainedRun};

use crate::latent::sample_batch_with_rng;

/// One row of the generative-process grid: style-change probability plus
/// statistical and causal dependence switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerativeSetting {
    pub p_change: f64,
    pub statistical: bool,
    pub causal: bool,
}

impl GenerativeSetting {
    pub fn label(&self) -> String {
        format!(
            "p{}_stat{}_caus{}",
            self.p_change,
            self.statistical as u8,
            self.causal as u8
        )
    }
}

/// The five generative settings of the main simulation table.
pub fn table_settings() -> Vec<GenerativeSetting> {
    vec![
        GenerativeSetting { p_change: 1.0, statistical: false, causal: false },
        GenerativeSetting { p_change: 0.75, statistical: false, causal: false },
        GenerativeSetting { p_change: 0.75, statistical: true, causal: false },
        GenerativeSetting { p_change: 0.75, statistical: false, causal: true },
        GenerativeSetting { p_change: 0.75, statistical: true, causal: true },
    ]
}

/// The independent-factors setting (`p(chg.) = 0.75`, no dependencies).
pub fn independent_setting() -> GenerativeSetting {
    GenerativeSetting { p_change: 0.75, statistical: false, causal: false }
}

/// Single-mechanism setting (`f1 = f2`, one encoder, no modality-specific
/// latents) versus the full multimodal setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Original,
    Multimodal,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::Original => "original",
            Family::Multimodal => "multimodal",
        }
    }
}

/// Specializes a base config to one grid cell.
pub fn cell_config(
    base: &ExperimentConfig,
    family: Family,
    setting: GenerativeSetting,
    zero_modality: bool,
) -> ExperimentConfig {
    let mut config = base.clone();
    config.perturb_prob = setting.p_change;
    config.statistical_dependence = setting.statistical;
    config.causal_dependence = setting.causal;
    match family {
        Family::Original => {
            config.n_m1 = 0;
            config.n_m2 = 0;
            config.shared_mixer = true;
            config.shared_encoder = true;
        }
        Family::Multimodal => {
            if zero_modality {
                config.n_m1 = 0;
                config.n_m2 = 0;
            }
        }
    }
    config
}

/// Outcome of one (family, setting, seed) cell.
#[derive(Debug, Clone)]
pub struct SettingCell {
    pub family: Family,
    pub setting: GenerativeSetting,
    pub seed: u64,
    pub config_hash: String,
    pub trace: Vec<TracePoint>,
    pub final_loss: f64,
    /// Standard block scores, when requested.
    pub report: Option<IdentReport>,
    /// Test-time intervention scores, when requested.
    pub intervention: Option<IdentReport>,
}

/// Trains and evaluates every cell of `families x settings x seeds` in
/// parallel. `zero_modality` drops the modality-specific blocks from both
/// families; `with_blocks` / `with_interventions` pick which evaluations run
/// on the trained encoders.
pub fn run_setting_grid(
    base: &ExperimentConfig,
    families: &[Family],
    settings: &[GenerativeSetting],
    zero_modality: bool,
    with_blocks: bool,
    with_interventions: bool,
) -> Result<Vec<SettingCell>> {
    base.validate()?;
    if !with_blocks && !with_interventions {
        return Err(Error::InvalidArgument("no evaluation requested for grid".into()));
    }
    let mut cells = Vec::new();
    for &family in families {
        for &setting in settings {
            for &seed in &base.seeds {
                cells.push((family, setting, seed));
            }
        }
    }
    cells
        .into_par_iter()
        .map(|(family, setting, seed)| -> Result<SettingCell> {
            let config = cell_config(base, family, setting, zero_modality);
            let started = std::time::Instant::now();
            let run = train_encoders(&config, seed)?;
            let report = if with_blocks { Some(run.evaluate(&config)?) } else { None };
            let intervention = if with_interventions {
                Some(evaluate_intervention(
                    &run.encoder_1,
                    &run.encoder_2,
                    &run.mixer_1,
                    &run.mixer_2,
                    &run.spec,
                    &train::eval_settings(&config),
                    seed,
                    &run.config_hash,
                )?)
            } else {
                None
            };
            eprintln!(
                "[grid] {} {} seed={} done in {:.1}s (final loss {:.4})",
                family.label(),
                setting.label(),
                seed,
                started.elapsed().as_secs_f64(),
                run.final_loss
            );
            Ok(SettingCell {
                family,
                setting,
                seed,
                config_hash: run.config_hash.clone(),
                trace: run.trace.clone(),
                final_loss: run.final_loss,
                report,
                intervention,
            })
        })
        .collect()
}

fn create_out_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("traces"))?;
    Ok(())
}

fn write_traces(prefix: &str, out_dir: &Path, rows: &[(String, &[TracePoint])]) -> Result<()> {
    for (key, trace) in rows {
        let path = out_dir.join("traces").join(format!("{prefix}_{key}.csv"));
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "iteration,loss")?;
        for point in trace.iter() {
            writeln!(file, "{},{:.6}", point.iteration, point.loss)?;
        }
    }
    Ok(())
}

/// Aggregates `(key -> scores over seeds)` into `mean,std,n` rows with the
/// population standard deviation, ordered by key.
fn summarize(groups: &BTreeMap<String, Vec<f64>>) -> Vec<String> {
    groups
        .iter()
        .map(|(key, scores)| {
            let n = scores.len() as f64;
            let mean = scores.iter().sum::<f64>() / n;
            let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
            format!("{key},{mean:.6},{:.6},{}", var.sqrt(), scores.len())
        })
        .collect()
}

fn setting_csv_fields(family: Family, setting: GenerativeSetting) -> String {
    format!(
        "{},{},{},{}",
        family.label(),
        setting.p_change,
        setting.statistical,
        setting.causal
    )
}

/// Writes the per-run and aggregated CSVs for a slice of setting cells,
/// pulling rows from the block reports (`intervention = false`) or the
/// intervention reports.
fn write_setting_outputs(
    name: &str,
    cells: &[SettingCell],
    out_dir: &Path,
    intervention: bool,
) -> Result<()> {
    create_out_dir(out_dir)?;
    let version = artifact_version();
    let runs_path = out_dir.join(format!("{name}_runs.csv"));
    let mut runs = std::io::BufWriter::new(std::fs::File::create(&runs_path)?);
    writeln!(
        runs,
        "family,p_change,statistical,causal,{}",
        IdentReport::csv_header()
    )?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut traces: Vec<(String, &[TracePoint])> = Vec::new();
    for cell in cells {
        let report = if intervention { &cell.intervention } else { &cell.report };
        let report = report.as_ref().ok_or_else(|| {
            Error::State("cell lacks the requested report kind".into())
        })?;
        let prefix = setting_csv_fields(cell.family, cell.setting);
        let mut buf = Vec::new();
        report.write_csv_rows(&mut buf, version)?;
        for line in String::from_utf8(buf).expect("utf8").lines() {
            writeln!(runs, "{prefix},{line}")?;
        }
        for score in &report.scores {
            let key = format!(
                "{prefix},{},{},{}",
                score.side,
                score.block.label(),
                score.score_type.label()
            );
            groups.entry(key).or_default().push(score.score);
        }
        traces.push((
            format!("{}_{}_{}", cell.family.label(), cell.setting.label(), cell.seed),
            &cell.trace,
        ));
    }
    runs.flush()?;

    let summary_path = out_dir.join(format!("{name}_summary.csv"));
    let mut summary = std::io::BufWriter::new(std::fs::File::create(&summary_path)?);
    writeln!(
        summary,
        "family,p_change,statistical,causal,side,block,score_type,mean,std,n_seeds"
    )?;
    for row in summarize(&groups) {
        writeln!(summary, "{row}")?;
    }
    summary.flush()?;
    write_traces(name, out_dir, &traces)?;
    Ok(())
}

/// The main simulation table: five generative settings in the original
/// (single-mechanism) and multimodal families, block scores averaged over
/// seeds.
pub fn run_table1(base: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SettingCell>> {
    let cells = run_setting_grid(
        base,
        &[Family::Original, Family::Multimodal],
        &table_settings(),
        false,
        true,
        false,
    )?;
    write_setting_outputs("table1", &cells, out_dir, false)?;
    Ok(cells)
}

/// The same grid without modality-specific latent variables.
pub fn run_ablation_no_modality_latents(
    base: &ExperimentConfig,
    out_dir: &Path,
) -> Result<Vec<SettingCell>> {
    let cells = run_setting_grid(
        base,
        &[Family::Original, Family::Multimodal],
        &table_settings(),
        true,
        true,
        false,
    )?;
    write_setting_outputs("no_modality", &cells, out_dir, false)?;
    Ok(cells)
}

/// Test-time intervention evaluation over the given settings (multimodal
/// family): content is permuted batch-wise on the holdout and both the
/// original and intervened content are scored.
pub fn run_intervention_eval(
    base: &ExperimentConfig,
    settings: &[GenerativeSetting],
    out_dir: &Path,
) -> Result<Vec<SettingCell>> {
    let cells = run_setting_grid(
        base,
        &[Family::Multimodal],
        settings,
        false,
        false,
        true,
    )?;
    write_setting_outputs("intervention", &cells, out_dir, true)?;
    Ok(cells)
}

/// Which block a discrete sweep replaces with categorical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteSweep {
    Style,
    Modality,
    Content,
}

impl DiscreteSweep {
    pub fn label(self) -> &'static str {
        match self {
            DiscreteSweep::Style => "discrete_style",
            DiscreteSweep::Modality => "discrete_modality",
            DiscreteSweep::Content => "discrete_content",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteCell {
    pub sweep: DiscreteSweep,
    pub k: usize,
    pub seed: u64,
    pub config_hash: String,
    pub final_loss: f64,
    pub report: IdentReport,
}

/// Discrete-factor sweeps: one block becomes a uniform multinomial with `k`
/// classes while the others stay continuous. Runs use the extended discrete
/// budget (`discrete_iterations`) and the independent multimodal setting.
pub fn run_discrete_ablation(
    base: &ExperimentConfig,
    k_values: &[usize],
    sweeps: &[DiscreteSweep],
    out_dir: &Path,
) -> Result<Vec<DiscreteCell>> {
    base.validate()?;
    if k_values.is_empty() || sweeps.is_empty() {
        return Err(Error::InvalidArgument("empty discrete sweep".into()));
    }
    for &k in k_values {
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "discrete sweeps need k >= 2, got {k}"
            )));
        }
    }
    let mut cells = Vec::new();
    for &sweep in sweeps {
        for &k in k_values {
            for &seed in &base.seeds {
                cells.push((sweep, k, seed));
            }
        }
    }
    let results: Vec<DiscreteCell> = cells
        .into_par_iter()
        .map(|(sweep, k, seed)| -> Result<DiscreteCell> {
            let mut config = cell_config(base, Family::Multimodal, independent_setting(), false);
            config.iterations = config.resolved_discrete_iterations();
            match sweep {
                DiscreteSweep::Style => config.discrete_style = k,
                DiscreteSweep::Modality => config.discrete_modality = k,
                DiscreteSweep::Content => config.discrete_content = k,
            }
            let started = std::time::Instant::now();
            let run = train_encoders(&config, seed)?;
            let report = run.evaluate(&config)?;
            eprintln!(
                "[discrete] {} k={} seed={} done in {:.1}s",
                sweep.label(),
                k,
                seed,
                started.elapsed().as_secs_f64()
            );
            Ok(DiscreteCell {
                sweep,
                k,
                seed,
                config_hash: run.config_hash.clone(),
                final_loss: run.final_loss,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_out_dir(out_dir)?;
    let version = artifact_version();
    let mut runs = std::io::BufWriter::new(std::fs::File::create(out_dir.join("discrete_runs.csv"))?);
    writeln!(runs, "sweep,k,{}", IdentReport::csv_header())?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for cell in &results {
        let mut buf = Vec::new();
        cell.report.write_csv_rows(&mut buf, version)?;
        for line in String::from_utf8(buf).expect("utf8").lines() {
            writeln!(runs, "{},{},{line}", cell.sweep.label(), cell.k)?;
        }
        for score in &cell.report.scores {
            let key = format!(
                "{},{},{},{},{}",
                cell.sweep.label(),
                cell.k,
                score.side,
                score.block.label(),
                score.score_type.label()
            );
            groups.entry(key).or_default().push(score.score);
        }
    }
    runs.flush()?;
    let mut summary =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("discrete_summary.csv"))?);
    writeln!(summary, "sweep,k,side,block,score_type,mean,std,n_seeds")?;
    for row in summarize(&groups) {
        writeln!(summary, "{row}")?;
    }
    summary.flush()?;
    Ok(results)
}

/// Which dimensionality a sweep varies while content stays fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariedBlock {
    Style,
    Modality,
}

impl VariedBlock {
    pub fn label(self) -> &'static str {
        match self {
            VariedBlock::Style => "style",
            VariedBlock::Modality => "modality",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DimCell {
    pub varied: VariedBlock,
    pub size: usize,
    pub seed: u64,
    pub config_hash: String,
    pub trace: Vec<TracePoint>,
    pub report: IdentReport,
}

/// Dimensionality ablation: content dimension fixed, style or
/// modality-specific dimension swept; emits block scores per size plus the
/// training-loss traces for the learning-curve comparison.
pub fn run_dim_ablation(
    base: &ExperimentConfig,
    varied: VariedBlock,
    sizes: &[usize],
    out_dir: &Path,
) -> Result<Vec<DimCell>> {
    base.validate()?;
    if sizes.is_empty() {
        return Err(Error::InvalidArgument("empty size sweep".into()));
    }
    let mut cells = Vec::new();
    for &size in sizes {
        for &seed in &base.seeds {
            cells.push((size, seed));
        }
    }
    let results: Vec<DimCell> = cells
        .into_par_iter()
        .map(|(size, seed)| -> Result<DimCell> {
            let mut config = cell_config(base, Family::Multimodal, independent_setting(), false);
            match varied {
                VariedBlock::Style => config.n_s = size,
                VariedBlock::Modality => {
                    config.n_m1 = size;
                    config.n_m2 = size;
                }
            }
            let started = std::time::Instant::now();
            let run = train_encoders(&config, seed)?;
            let report = run.evaluate(&config)?;
            eprintln!(
                "[dims] {}={} seed={} done in {:.1}s",
                varied.label(),
                size,
                seed,
                started.elapsed().as_secs_f64()
            );
            Ok(DimCell {
                varied,
                size,
                seed,
                config_hash: run.config_hash.clone(),
                trace: run.trace.clone(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_out_dir(out_dir)?;
    let version = artifact_version();
    let mut runs = std::io::BufWriter::new(std::fs::File::create(out_dir.join("dims_runs.csv"))?);
    writeln!(runs, "varied,size,{}", IdentReport::csv_header())?;
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut traces: Vec<(String, &[TracePoint])> = Vec::new();
    for cell in &results {
        let mut buf = Vec::new();
        cell.report.write_csv_rows(&mut buf, version)?;
        for line in String::from_utf8(buf).expect("utf8").lines() {
            writeln!(runs, "{},{},{line}", cell.varied.label(), cell.size)?;
        }
        for score in &cell.report.scores {
            let key = format!(
                "{},{},{},{},{}",
                cell.varied.label(),
                cell.size,
                score.side,
                score.block.label(),
                score.score_type.label()
            );
            groups.entry(key).or_default().push(score.score);
        }
        traces.push((
            format!("{}_{}_{}", cell.varied.label(), cell.size, cell.seed),
            &cell.trace,
        ));
    }
    runs.flush()?;
    let mut summary =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("dims_summary.csv"))?);
    writeln!(summary, "varied,size,side,block,score_type,mean,std,n_seeds")?;
    for row in summarize(&groups) {
        writeln!(summary, "{row}")?;
    }
    summary.flush()?;
    write_traces("dims", out_dir, &traces)?;
    Ok(results)
}

/// Validation loss for model selection: SymInfoNCE over one holdout pool.
fn validation_loss(run: &TrainedRun, config: &ExperimentConfig, n_val: usize) -> Result<f64> {
    let mut rng = stream_rng(run.seed, Stream::Evaluation);
    let latents = sample_batch_with_rng(&run.spec, n_val, &mut rng)?;
    let x1 = run.mixer_1.apply(&latents.z1())?;
    let x2 = run.mixer_2.apply(&latents.z2())?;
    let e1 = run.encoder_1.encode(&x1)?;
    let e2 = run.encoder_2.encode(&x2)?;
    let objective = ObjectiveConfig::new(config.temperature, config.similarity()?, n_val)?;
    Ok(sym_info_nce(&e1, &e2, &objective)?.0)
}

/// Number of validation samples for the model-selection loss curve.
pub const MODEL_SELECTION_VAL_SAMPLES: usize = 2000;

#[derive(Debug, Clone)]
pub struct ContentDimEstimate {
    pub curve: Vec<(usize, f64)>,
    pub elbow: usize,
    pub low_confidence: bool,
}

/// Trains one model per candidate encoding size and locates the elbow of the
/// validation-loss curve; the estimate of the number of content factors.
pub fn estimate_content_dim(
    base: &ExperimentConfig,
    candidate_sizes: &[usize],
    seed: u64,
) -> Result<ContentDimEstimate> {
    if candidate_sizes.len() < 3 {
        return Err(Error::InvalidArgument(
            "content-dimension estimation needs at least 3 candidate sizes".into(),
        ));
    }
    for pair in candidate_sizes.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidArgument(
                "candidate sizes must be strictly increasing".into(),
            ));
        }
    }
    let mut curve = Vec::with_capacity(candidate_sizes.len());
    for &size in candidate_sizes {
        let mut config = base.clone();
        config.encoding_size = size;
        let run = train_encoders(&config, seed)?;
        curve.push((size, validation_loss(&run, &config, MODEL_SELECTION_VAL_SAMPLES)?));
    }
    let (elbow, low_confidence) = elbow_by_second_difference(&curve)?;
    Ok(ContentDimEstimate {
        curve,
        elbow,
        low_confidence,
    })
}

#[derive(Debug, Clone)]
pub struct ModelSelectionOutcome {
    pub seed: u64,
    pub estimate: ContentDimEstimate,
}

/// Runs the content-dimension estimation once per seed, parallelizing over
/// all (seed, size) cells, and writes the loss curves and elbow estimates.
pub fn run_model_selection(
    base: &ExperimentConfig,
    candidate_sizes: &[usize],
    out_dir: &Path,
) -> Result<Vec<ModelSelectionOutcome>> {
    base.validate()?;
    if candidate_sizes.len() < 3 {
        return Err(Error::InvalidArgument(
            "content-dimension estimation needs at least 3 candidate sizes".into(),
        ));
    }
    for pair in candidate_sizes.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidArgument(
                "candidate sizes must be strictly increasing".into(),
            ));
        }
    }
    let mut cells = Vec::new();
    for &seed in &base.seeds {
        for &size in candidate_sizes {
            cells.push((seed, size));
        }
    }
    let losses: Vec<(u64, usize, f64)> = cells
        .into_par_iter()
        .map(|(seed, size)| -> Result<(u64, usize, f64)> {
            let mut config = base.clone();
            config.encoding_size = size;
            let started = std::time::Instant::now();
            let run = train_encoders(&config, seed)?;
            let loss = validation_loss(&run, &config, MODEL_SELECTION_VAL_SAMPLES)?;
            eprintln!(
                "[select-dim] size={size} seed={seed} val_loss={loss:.4} ({:.1}s)",
                started.elapsed().as_secs_f64()
            );
            Ok((seed, size, loss))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outcomes = Vec::new();
    for &seed in &base.seeds {
        let curve: Vec<(usize, f64)> = losses
            .iter()
            .filter(|(s, _, _)| *s == seed)
            .map(|(_, size, loss)| (*size, *loss))
            .collect();
        let (elbow, low_confidence) = elbow_by_second_difference(&curve)?;
        outcomes.push(ModelSelectionOutcome {
            seed,
            estimate: ContentDimEstimate {
                curve,
                elbow,
                low_confidence,
            },
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut curve_file =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("dimselect_curve.csv"))?);
    writeln!(curve_file, "seed,encoding_size,val_loss")?;
    for outcome in &outcomes {
        for (size, loss) in &outcome.estimate.curve {
            writeln!(curve_file, "{},{},{:.6}", outcome.seed, size, loss)?;
        }
    }
    curve_file.flush()?;
    let mut elbow_file =
        std::io::BufWriter::new(std::fs::File::create(out_dir.join("dimselect_elbow.csv"))?);
    writeln!(elbow_file, "seed,elbow,low_confidence")?;
    for outcome in &outcomes {
        writeln!(
            elbow_file,
            "{},{},{}",
            outcome.seed, outcome.estimate.elbow, outcome.estimate.low_confidence
        )?;
    }
    elbow_file.flush()?;
    Ok(outcomes)
}

/// Concatenates CSV files that share a header into one, keeping input order
/// and writing the header once.
pub fn merge_csv_files(inputs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no csv files to merge".into()));
    }
    let mut expected_header: Option<String> = None;
    for path in inputs {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::ConfigParse(format!("{} is empty", path.display())))?;
        match &expected_header {
            None => {
                writeln!(out, "{header}")?;
                expected_header = Some(header.to_string());
            }
            Some(expect) if expect == header => {}
            Some(expect) => {
                return Err(Error::ConfigParse(format!(
                    "{}: header '{header}' does not match '{expect}'",
                    path.display()
                )));
            }
        }
        for line in lines {
            if !line.is_empty() {
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

/// Convenience accessor: mean score over cells for one (side, block).
pub fn mean_score(
    cells: &[SettingCell],
    family: Family,
    setting: GenerativeSetting,
    side: u8,
    block: crate::eval::ReportBlock,
    intervention: bool,
) -> Option<f64> {
    let mut scores = Vec::new();
    for cell in cells {
        if cell.family != family || cell.setting != setting {
            continue;
        }
        let report = if intervention { cell.intervention.as_ref() } else { cell.report.as_ref() };
        if let Some(score) = report.and_then(|r| r.score(side, block)) {
            scores.push(score);
        }
    }
    if scores.is_empty() {
        None
    } else {
        Some(scores.iter().sum::<f64>() / scores.len() as f64)
    }
}

/// Score type recorded for a block in a report, if present.
pub fn score_type_of(report: &IdentReport, side: u8, block: crate::eval::ReportBlock) -> Option<ScoreType> {
    report.get(side, block).map(|s| s.score_type)
}
