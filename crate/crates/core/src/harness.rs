//! Synthetic teacher generation, the frozen-layer replacement experiment,
//! and latency benchmarking with break-even accounting.
//!
//! Every non-timing number in a report is a pure function of the config:
//! cases are drawn from keyed deterministic streams, fit and eval partitions
//! use disjoint stream tags, and accumulation order is fixed by case index.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use crate::calibration::{
    build_fit_dataset, fit_kl, fit_ls, CompiledLayer, FitObjective, FitStats,
};
use crate::ctransform::{head_output, transform_passes, ReconstructionMode};
use crate::error::{Error, Result};
use crate::metrics::{generalized_kl, marginal_errors, teacher_agreement, CaseReport};
use crate::sinkhorn::{
    matrix_scaling_attention, sinkhorn_run, AttentionCase, KeyMask, TeacherConfig,
};
use crate::sliced::SliceBank;

const TAG_FIT: u64 = 0xf17;
const TAG_EVAL: u64 = 0xe7a1;
const TAG_BENCH: u64 = 0xbe7c;
const TAG_Q: u64 = 1;
const TAG_K: u64 = 2;
const TAG_V: u64 = 3;

/// Per-dimension token scales: a few dominant directions over a low-variance
/// tail, the anisotropy profile of trained attention activations. Isotropic
/// tokens make every finite budget nearly equivalent and the replacement
/// study degenerate.
const SPIKE_SCALES: [f64; 4] = [4.0, 3.0, 2.0, 1.5];
const TAIL_SCALE: f64 = 0.5;

fn dim_scale(t: usize) -> f64 {
    if t < SPIKE_SCALES.len() {
        SPIKE_SCALES[t]
    } else {
        TAIL_SCALE
    }
}

/// Deterministic synthetic head: Q, K entries are independent Gaussians
/// scaled per dimension by the fixed spectrum above; V entries are standard
/// normal. `mask_fraction` in [0, 1) pads the trailing ceil(frac * N) keys.
pub fn gen_case(
    seed: u64,
    n: usize,
    d_h: usize,
    d_v: usize,
    mask_fraction: f64,
) -> Result<AttentionCase> {
    if !(0.0..1.0).contains(&mask_fraction) {
        return Err(Error::InvalidConfig(format!(
            "mask_fraction must lie in [0, 1), got {mask_fraction}"
        )));
    }
    if n == 0 || d_h == 0 || d_v == 0 {
        return Err(Error::InvalidConfig("case dimensions must be positive".into()));
    }
    let draw = |tag: u64, rows: usize, cols: usize, spectrum: bool| {
        let raw = crate::numerics::gaussian_vector(seed, &[tag], rows * cols);
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let scale = if spectrum { dim_scale(j) } else { 1.0 };
            raw[i * cols + j] * scale
        })
    };
    let q = draw(TAG_Q, n, d_h, true);
    let k = draw(TAG_K, n, d_h, true);
    let v = draw(TAG_V, n, d_v, false);
    let padded = (mask_fraction * n as f64).ceil() as usize;
    let mask = if padded == 0 {
        None
    } else {
        Some(KeyMask::trailing(n, n - padded)?)
    };
    AttentionCase::new(q, k, v, mask)
}

/// Full run configuration; one JSON document, all fields overridable by CLI
/// flags. Defaults are the replacement-study settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub heads: usize,
    pub teacher: TeacherConfig,
    /// Reduced-budget normalizer baselines to evaluate alongside the
    /// compiled operators.
    pub normalizer_budgets: Vec<u32>,
    pub slices: usize,
    pub fit_examples: usize,
    pub eval_examples: usize,
    pub lambda: f64,
    pub mask_fraction: f64,
    pub objectives: Vec<FitObjective>,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub bench_lengths: Vec<usize>,
    pub bench_fit_examples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n: 128,
            d_h: 16,
            d_v: 16,
            heads: 4,
            teacher: TeacherConfig::default(),
            normalizer_budgets: vec![3],
            slices: 32,
            fit_examples: 512,
            eval_examples: 64,
            lambda: 1e-3,
            mask_fraction: 0.0,
            objectives: vec![FitObjective::LeastSquares],
            warmup_runs: 3,
            timed_runs: 10,
            bench_lengths: vec![512, 2048, 4096],
            bench_fit_examples: 8,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        if self.heads == 0 || self.fit_examples == 0 || self.eval_examples == 0 {
            return Err(Error::InvalidConfig(
                "heads, fit_examples and eval_examples must be positive".into(),
            ));
        }
        if self.slices == 0 {
            return Err(Error::InvalidConfig("slices must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidConfig("mask_fraction must lie in [0, 1)".into()));
        }
        if self.objectives.is_empty() {
            return Err(Error::InvalidConfig("at least one fit objective".into()));
        }
        if self.timed_runs == 0 {
            return Err(Error::InvalidConfig("timed_runs must be positive".into()));
        }
        Ok(())
    }

    fn fit_case(&self, m: usize, h: usize) -> Result<AttentionCase> {
        let s = crate::numerics::stream_key(self.seed, &[TAG_FIT, m as u64, h as u64]);
        gen_case(s, self.n, self.d_h, self.d_v, self.mask_fraction)
    }

    fn eval_case(&self, e: usize, h: usize) -> Result<AttentionCase> {
        let s = crate::numerics::stream_key(self.seed, &[TAG_EVAL, e as u64, h as u64]);
        gen_case(s, self.n, self.d_h, self.d_v, self.mask_fraction)
    }
}

/// Aggregated statistics for one operator over all eval cases.
#[derive(Debug, Clone)]
pub struct OperatorSummary {
    pub operator: String,
    pub cases: usize,
    pub mean_output_rmse: f64,
    pub median_output_rmse: f64,
    pub mean_attention_rel_l2: f64,
    pub std_attention_rel_l2: f64,
    pub median_attention_rel_l2: f64,
    pub mean_row_err: f64,
    pub mean_col_err: f64,
    pub mean_plan_kl: f64,
    pub median_latency_ns: f64,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub layer: String,
    pub stats: FitStats,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub machine: String,
    pub case_rows: Vec<CaseReport>,
    pub summaries: Vec<OperatorSummary>,
    pub fits: Vec<FitSummary>,
}

impl RunReport {
    pub fn summary_for(&self, operator: &str) -> Option<&OperatorSummary> {
        self.summaries.iter().find(|s| s.operator == operator)
    }

    pub fn write_case_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(CaseReport::csv_header());
        out.push('\n');
        for row in &self.case_rows {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Operator labels used in reports and CSV rows.
pub fn teacher_label(cfg: &TeacherConfig) -> String {
    format!("teacher_s{}", cfg.budget)
}

pub fn normalizer_label(budget: u32) -> String {
    format!("normalizer_s{budget}")
}

pub fn compiled_label(objective: FitObjective, mode: ReconstructionMode) -> String {
    let side = match mode {
        ReconstructionMode::OneSided => "one_sided",
        ReconstructionMode::TwoSided => "two_sided",
    };
    format!("compiled_{}_{}", objective.label(), side)
}

struct MetricAccumulator {
    output_rmse: Vec<f64>,
    rel_l2: Vec<f64>,
    row_err: Vec<f64>,
    col_err: Vec<f64>,
    plan_kl: Vec<f64>,
    latency_ns: Vec<f64>,
}

impl MetricAccumulator {
    fn new() -> Self {
        Self {
            output_rmse: Vec::new(),
            rel_l2: Vec::new(),
            row_err: Vec::new(),
            col_err: Vec::new(),
            plan_kl: Vec::new(),
            latency_ns: Vec::new(),
        }
    }
}

/// Fit one compiled layer per configured objective on the fit partition.
pub fn fit_layers(cfg: &ExperimentConfig) -> Result<Vec<CompiledLayer>> {
    cfg.validate()?;
    let bank = SliceBank::sample(cfg.seed, cfg.slices, cfg.d_h);
    let mut fit_cases = Vec::with_capacity(cfg.fit_examples * cfg.heads);
    for m in 0..cfg.fit_examples {
        for h in 0..cfg.heads {
            fit_cases.push(cfg.fit_case(m, h)?);
        }
    }
    let with_kl = cfg.objectives.contains(&FitObjective::Kl);
    let dataset = build_fit_dataset(&fit_cases, &bank, &cfg.teacher, with_kl)?;
    drop(fit_cases);

    let mut layers = Vec::new();
    for objective in &cfg.objectives {
        layers.push(match objective {
            FitObjective::LeastSquares => fit_ls(&dataset, &bank, &cfg.teacher, cfg.lambda)?,
            FitObjective::Kl => fit_kl(&dataset, &bank, &cfg.teacher, cfg.lambda)?,
        });
    }
    Ok(layers)
}

/// Frozen-layer replacement study: fit compiled layers on the fit partition,
/// then run the teacher, each reduced-budget normalizer, and each compiled
/// operator on identical eval inputs, reporting teacher-relative fidelity
/// and marginal errors averaged over heads within a case.
pub fn run_replacement(cfg: &ExperimentConfig) -> Result<RunReport> {
    let layers = fit_layers(cfg)?;
    evaluate_layers(cfg, &layers)
}

/// Evaluation half of the replacement study, usable with layers loaded from
/// disk. Teacher conventions of the layers must match the config's teacher.
pub fn evaluate_layers(cfg: &ExperimentConfig, layers: &[CompiledLayer]) -> Result<RunReport> {
    cfg.validate()?;
    for layer in layers {
        if layer.teacher_cfg != cfg.teacher {
            return Err(Error::InvalidConfig(format!(
                "layer was compiled against {:?}, config evaluates {:?}",
                layer.teacher_cfg, cfg.teacher
            )));
        }
    }
    let fits: Vec<FitSummary> = layers
        .iter()
        .map(|layer| FitSummary {
            layer: format!("compiled_{}", layer.objective.label()),
            stats: layer.fit_stats.clone(),
        })
        .collect();

    // Operator list: teacher, each normalizer, each (objective x mode).
    let mut operators: Vec<String> = vec![teacher_label(&cfg.teacher)];
    for &b in &cfg.normalizer_budgets {
        operators.push(normalizer_label(b));
    }
    for layer in layers {
        for mode in [ReconstructionMode::OneSided, ReconstructionMode::TwoSided] {
            operators.push(compiled_label(layer.objective, mode));
        }
    }

    let mut case_rows: Vec<CaseReport> = Vec::new();
    let mut accum: Vec<MetricAccumulator> =
        operators.iter().map(|_| MetricAccumulator::new()).collect();

    for e in 0..cfg.eval_examples {
        // Per-head metric sums for this eval case, one slot per operator.
        let mut sums = vec![[0.0f64; 5]; operators.len()];
        let mut lat = vec![0u64; operators.len()];
        for h in 0..cfg.heads {
            let case = cfg.eval_case(e, h)?;
            let t0 = Instant::now();
            let trace = sinkhorn_run(&case, &cfg.teacher)?;
            let _y_teacher = head_output(&trace.final_plan, &case.v);
            let teacher_ns = t0.elapsed().as_nanos() as u64;
            let a_ref = &trace.final_plan.attention;
            let p_ref = &trace.final_plan.coupling;

            let mut op_idx = 0;
            // teacher row: self comparison
            {
                let (row_err, col_err) = marginal_errors(a_ref, case.key_mask.as_ref());
                sums[op_idx][2] += row_err;
                sums[op_idx][3] += col_err;
                lat[op_idx] += teacher_ns;
                op_idx += 1;
            }
            for &b in &cfg.normalizer_budgets {
                let ncfg = TeacherConfig::new(cfg.teacher.epsilon, b, cfg.teacher.kernel);
                let t0 = Instant::now();
                let (a, _passes) = matrix_scaling_attention(&case, &ncfg);
                let _y = a.dot(&case.v);
                lat[op_idx] += t0.elapsed().as_nanos() as u64;
                let (rmse, rel) = teacher_agreement(&a, a_ref, &case.v);
                let (row_err, col_err) = marginal_errors(&a, case.key_mask.as_ref());
                let kl = generalized_kl(&(&a / cfg.n as f64), p_ref);
                sums[op_idx][0] += rmse;
                sums[op_idx][1] += rel;
                sums[op_idx][2] += row_err;
                sums[op_idx][3] += col_err;
                sums[op_idx][4] += kl;
                op_idx += 1;
            }
            for layer in layers {
                for mode in [ReconstructionMode::OneSided, ReconstructionMode::TwoSided] {
                    let t0 = Instant::now();
                    let plan = layer.apply(&case, mode);
                    let _y = head_output(&plan, &case.v);
                    lat[op_idx] += t0.elapsed().as_nanos() as u64;
                    let (rmse, rel) = teacher_agreement(&plan.attention, a_ref, &case.v);
                    let (row_err, col_err) =
                        marginal_errors(&plan.attention, case.key_mask.as_ref());
                    let kl = generalized_kl(&plan.coupling, p_ref);
                    sums[op_idx][0] += rmse;
                    sums[op_idx][1] += rel;
                    sums[op_idx][2] += row_err;
                    sums[op_idx][3] += col_err;
                    sums[op_idx][4] += kl;
                    op_idx += 1;
                }
            }
        }
        let inv_h = 1.0 / cfg.heads as f64;
        for (idx, op) in operators.iter().enumerate() {
            let report = CaseReport {
                operator: op.clone(),
                case_index: e,
                output_rmse: sums[idx][0] * inv_h,
                attention_rel_l2: sums[idx][1] * inv_h,
                row_err: sums[idx][2] * inv_h,
                col_err: sums[idx][3] * inv_h,
                plan_kl: sums[idx][4] * inv_h,
                latency_ns: (lat[idx] as f64 * inv_h) as u64,
            };
            debug_assert!(report.is_sane(), "metric row has NaN or negative values");
            accum[idx].output_rmse.push(report.output_rmse);
            accum[idx].rel_l2.push(report.attention_rel_l2);
            accum[idx].row_err.push(report.row_err);
            accum[idx].col_err.push(report.col_err);
            accum[idx].plan_kl.push(report.plan_kl);
            accum[idx].latency_ns.push(report.latency_ns as f64);
            case_rows.push(report);
        }
    }

    let summaries = operators
        .iter()
        .zip(accum.iter())
        .map(|(op, acc)| OperatorSummary {
            operator: op.clone(),
            cases: acc.rel_l2.len(),
            mean_output_rmse: mean(&acc.output_rmse),
            median_output_rmse: median(&acc.output_rmse),
            mean_attention_rel_l2: mean(&acc.rel_l2),
            std_attention_rel_l2: std_dev(&acc.rel_l2),
            median_attention_rel_l2: median(&acc.rel_l2),
            mean_row_err: mean(&acc.row_err),
            mean_col_err: mean(&acc.col_err),
            mean_plan_kl: mean(&acc.plan_kl),
            median_latency_ns: median(&acc.latency_ns),
        })
        .collect();

    Ok(RunReport { machine: machine_descriptor(), case_rows, summaries, fits })
}

/// Measurement boundary of a latency row.
///
/// `FullForward` times (Q, K, V) -> y, including score formation and the
/// value multiply, which both operators share. `NormalizerStage` times only
/// the component the compiled operators replace: score-kernel tensors in,
/// attention-scale matrix out (kernel exponentiation plus S scaling passes
/// for the normalizer; sliced features, dual prediction and the entropic
/// closures for the compiled operators).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchStage {
    FullForward,
    NormalizerStage,
}

impl BenchStage {
    pub fn label(&self) -> &'static str {
        match self {
            BenchStage::FullForward => "full_forward",
            BenchStage::NormalizerStage => "normalizer_stage",
        }
    }
}

/// One latency row of the benchmark table.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n: usize,
    pub operator: String,
    pub stage: BenchStage,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Instrumented normalization/transform passes for one forward call.
    pub passes: u64,
    /// This row's median divided by the compiled one-sided median of the
    /// same stage: the baseline/compiled ratio convention of latency tables.
    pub speedup_vs_compiled_one_sided: f64,
    /// Forward evaluations after which the offline fit time is amortized
    /// against the full-budget normalizer of the same stage; infinite when
    /// there is no saving.
    pub break_even_evals: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub machine: String,
    pub fit_seconds: Vec<(usize, f64)>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, n: usize, operator: &str, stage: BenchStage) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.operator == operator && r.stage == stage)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "n,operator,stage,median_ms,mean_ms,min_ms,max_ms,normalization_passes,\
             speedup_vs_compiled_one_sided,break_even_evals,machine\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{},{:.4},{},{}\n",
                r.n,
                r.operator,
                r.stage.label(),
                r.median_ms,
                r.mean_ms,
                r.min_ms,
                r.max_ms,
                r.passes,
                r.speedup_vs_compiled_one_sided,
                if r.break_even_evals.is_finite() {
                    format!("{:.1}", r.break_even_evals)
                } else {
                    "inf".to_string()
                },
                self.machine.replace(',', ";"),
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Warmup then timed runs; the closure must consume its own result (e.g.
/// via `black_box`) before returning. Returns (median, mean, min, max) ms.
fn time_runs<F: FnMut()>(warmup: usize, timed: usize, mut f: F) -> (f64, f64, f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let mut samples = Vec::with_capacity(timed);
    for _ in 0..timed {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    (median(&samples), mean(&samples), samples.iter().cloned().fold(f64::INFINITY, f64::min),
     samples.iter().cloned().fold(0.0f64, f64::max))
}

/// Forward-latency benchmark: for each sequence length, fit one compiled
/// layer offline, then time the full-budget normalizer, each reduced-budget
/// normalizer, and the compiled one/two-sided operators, single-threaded,
/// with the configured warmup and timed run counts — once over the full
/// forward pipeline and once over the normalizer stage alone. Fit time is
/// reported separately and never timed into forwards.
pub fn bench_latency(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut fit_seconds = Vec::new();

    for &n in &cfg.bench_lengths {
        let bank = SliceBank::sample(cfg.seed, cfg.slices, cfg.d_h);
        let mut fit_cases = Vec::new();
        for m in 0..cfg.bench_fit_examples {
            let s = crate::numerics::stream_key(cfg.seed, &[TAG_BENCH, n as u64, m as u64]);
            fit_cases.push(gen_case(s, n, cfg.d_h, cfg.d_v, 0.0)?);
        }
        let dataset = build_fit_dataset(&fit_cases, &bank, &cfg.teacher, false)?;
        let layer = fit_ls(&dataset, &bank, &cfg.teacher, cfg.lambda)?;
        fit_seconds.push((n, layer.fit_stats.fit_seconds));
        drop(dataset);

        let s = crate::numerics::stream_key(cfg.seed, &[TAG_BENCH, n as u64, 0xca5e]);
        let case = gen_case(s, n, cfg.d_h, cfg.d_v, 0.0)?;
        // Shared score-kernel tensors, formed once outside the
        // normalizer-stage timing region.
        let scores = crate::sinkhorn::score_matrix(&case.q, &case.k);
        let query_shift = crate::sinkhorn::shift_vector(&case.q);
        let key_shift = crate::sinkhorn::shift_vector(&case.k);
        let exponent = match cfg.teacher.kernel {
            crate::sinkhorn::KernelKind::Score => scores.clone(),
            crate::sinkhorn::KernelKind::QuadraticCost => {
                crate::sinkhorn::build_kernels(&case.q, &case.k).cost.mapv(|c| -c)
            }
        };

        struct Timed {
            operator: String,
            stage: BenchStage,
            stats: (f64, f64, f64, f64),
            passes: u64,
        }
        let mut timed: Vec<Timed> = Vec::new();

        // Steady-state workspace for the normalizer-stage rows: operators in
        // a serving loop reuse output buffers, and a fresh N x N allocation
        // costs a page-fault sweep that would be charged to both sides.
        let mut workspace = Array2::<f64>::zeros((n, n));

        let mut budgets = vec![cfg.teacher.budget];
        budgets.extend(cfg.normalizer_budgets.iter().copied());
        for b in budgets {
            let ncfg = TeacherConfig::new(cfg.teacher.epsilon, b, cfg.teacher.kernel);
            let stats = time_runs(cfg.warmup_runs, cfg.timed_runs, || {
                let (a, _) = matrix_scaling_attention(&case, &ncfg);
                black_box(a.dot(&case.v));
            });
            let (_, passes) = matrix_scaling_attention(&case, &ncfg);
            timed.push(Timed {
                operator: normalizer_label(b),
                stage: BenchStage::FullForward,
                stats,
                passes: passes as u64,
            });
            let stats = time_runs(cfg.warmup_runs, cfg.timed_runs, || {
                crate::sinkhorn::matrix_scaling_into(
                    &exponent,
                    ncfg.epsilon,
                    b,
                    None,
                    &mut workspace,
                );
                black_box(&workspace);
            });
            timed.push(Timed {
                operator: normalizer_label(b),
                stage: BenchStage::NormalizerStage,
                stats,
                passes: passes as u64,
            });
        }
        for mode in [ReconstructionMode::OneSided, ReconstructionMode::TwoSided] {
            let stats = time_runs(cfg.warmup_runs, cfg.timed_runs, || {
                black_box(layer.head_forward(&case, mode));
            });
            let before = transform_passes();
            let _ = layer.head_forward(&case, mode);
            let passes = transform_passes() - before;
            timed.push(Timed {
                operator: compiled_label(FitObjective::LeastSquares, mode),
                stage: BenchStage::FullForward,
                stats,
                passes,
            });
            let kernel = crate::ctransform::ScoreKernel {
                scores: &scores,
                query_shift: &query_shift,
                key_shift: &key_shift,
            };
            let stats = time_runs(cfg.warmup_runs, cfg.timed_runs, || {
                let feats =
                    crate::sliced::feature_matrix(&case.q, &case.k, &layer.bank, None);
                let f_hat = layer.predict_dual(&feats);
                crate::ctransform::compiled_attention_into(
                    &kernel,
                    &f_hat,
                    &layer.teacher_cfg,
                    None,
                    mode,
                    &mut workspace,
                );
                black_box(&workspace);
            });
            timed.push(Timed {
                operator: compiled_label(FitObjective::LeastSquares, mode),
                stage: BenchStage::NormalizerStage,
                stats,
                passes,
            });
        }

        let fit_s = fit_seconds.last().unwrap().1;
        for stage in [BenchStage::FullForward, BenchStage::NormalizerStage] {
            let one_sided_median = timed
                .iter()
                .find(|t| t.stage == stage && t.operator.ends_with("one_sided"))
                .map(|t| t.stats.0)
                .unwrap();
            let baseline_median = timed
                .iter()
                .find(|t| t.stage == stage && t.operator == normalizer_label(cfg.teacher.budget))
                .map(|t| t.stats.0)
                .unwrap();
            for t in timed.iter().filter(|t| t.stage == stage) {
                let saving_ms = baseline_median - t.stats.0;
                let break_even = if t.operator.starts_with("compiled_") && saving_ms > 0.0 {
                    fit_s / (saving_ms * 1e-3)
                } else {
                    f64::INFINITY
                };
                rows.push(BenchRow {
                    n,
                    operator: t.operator.clone(),
                    stage,
                    median_ms: t.stats.0,
                    mean_ms: t.stats.1,
                    min_ms: t.stats.2,
                    max_ms: t.stats.3,
                    passes: t.passes,
                    speedup_vs_compiled_one_sided: t.stats.0 / one_sided_median,
                    break_even_evals: break_even,
                });
            }
        }
    }

    Ok(BenchReport { machine: machine_descriptor(), fit_seconds, rows })
}

/// Host description for report headers: CPU model when readable, always the
/// arch/OS pair.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".to_string());
    format!("{} ({}-{})", cpu, std::env::consts::ARCH, std::env::consts::OS)
}

pub fn save_layer(layer: &CompiledLayer, path: &Path) -> Result<()> {
    std::fs::write(path, layer.to_json())?;
    Ok(())
}

pub fn load_layer(path: &Path) -> Result<CompiledLayer> {
    let text = std::fs::read_to_string(path)?;
    CompiledLayer::from_json(&text)
}

pub const CASE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CaseDoc {
    schema_version: u32,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    active_keys: Option<Vec<bool>>,
}

pub fn save_case(case: &AttentionCase, path: &Path) -> Result<()> {
    let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    };
    let doc = CaseDoc {
        schema_version: CASE_SCHEMA_VERSION,
        q: rows(&case.q),
        k: rows(&case.k),
        v: rows(&case.v),
        active_keys: case.key_mask.as_ref().map(|m| m.flags().to_vec()),
    };
    std::fs::write(path, serde_json::to_string(&doc)?)?;
    Ok(())
}

pub fn load_case(path: &Path) -> Result<AttentionCase> {
    let doc: CaseDoc = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if doc.schema_version != CASE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: CASE_SCHEMA_VERSION,
            found: doc.schema_version,
        });
    }
    let to_mat = |rows: &Vec<Vec<f64>>, name: &str| -> Result<Array2<f64>> {
        if rows.is_empty() {
            return Err(Error::MalformedLayer(format!("{name} matrix is empty")));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::MalformedLayer(format!("{name} matrix is ragged")));
        }
        Ok(Array2::from_shape_vec(
            (rows.len(), cols),
            rows.iter().flatten().copied().collect(),
        )
        .expect("shape checked above"))
    };
    let q = to_mat(&doc.q, "q")?;
    let k = to_mat(&doc.k, "k")?;
    let v = to_mat(&doc.v, "v")?;
    let mask = doc.active_keys.map(KeyMask::new).transpose()?;
    AttentionCase::new(q, k, v, mask)
}
