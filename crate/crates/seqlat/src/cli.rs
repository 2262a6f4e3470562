//! Subcommand implementations. Exit codes: 0 success, 1 failed checks,
//! 2 usage errors, 3 data errors.

use crate::alignment::AlignmentLattice;
use crate::checks;
use crate::config::RunConfig;
use crate::context::ContextDependency;
use crate::inference;
use crate::oracle::{build_explicit, LatticeMode};
use crate::presets::{expand, Preset, PresetSizes};
use crate::semiring::Semiring;
use crate::weights::{Normalization, OmegaTable, WeightFunction};
use crate::{Error, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Usage(_) => 2,
        Error::Config(_) | Error::Data(_) | Error::Io(_) => 3,
        _ => 1,
    }
}

fn history_name(ctx: &ContextDependency, state: usize) -> String {
    let h = ctx.history_of(state);
    if h.is_empty() {
        "(empty)".to_string()
    } else {
        h.iter()
            .map(|&y| char::from(b'a' + y as u8).to_string())
            .collect()
    }
}

/// Worked walkthrough on the two-letter alphabet: prints the context
/// automaton, one alignment path with its symbolic weights, and verifies
/// the vectorized totals against explicit enumeration. Returns the process
/// exit code.
pub fn cmd_demo(seed: u64, inject_fault: bool) -> Result<i32> {
    let vocab = 2;
    let order = 2;
    let frames = 4;
    let ctx = ContextDependency::new(order, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let wf = WeightFunction::unshared(&mut rng, ctx.num_states(), vocab, dim);
    let prepared = wf.prepare(&ctx)?;
    let encoder = crate::weights::Encoder::causal(&mut rng, 2, dim);
    let x = Array2::from_shape_fn((frames, 2), |_| rng.gen_range(-1.0..1.0_f64));
    let (h, _) = encoder.encode(&x.view())?;
    let omega = OmegaTable::new(&wf, &prepared, &ctx, &h, Normalization::Global);
    let lattice = AlignmentLattice::frame(frames);

    println!("Alphabet {{a, b}}, label histories up to length {order}.");
    println!();
    println!("Context states, indexed by history length then lexicographically:");
    for q in 0..ctx.num_states() {
        print!("  {q}: {}", history_name(&ctx, q));
    }
    println!();
    println!();
    println!("All {} label transitions:", ctx.num_states() * vocab);
    for q in 0..ctx.num_states() {
        for y in 0..vocab {
            let dst = ctx.next_state(q, y);
            println!(
                "  {:<7} --{}--> {}",
                history_name(&ctx, q),
                char::from(b'a' + y as u8),
                history_name(&ctx, dst)
            );
        }
    }
    println!();
    println!("Alignment lattice: {frames} frames; each frame consumes one label or eps.");
    println!("Weight function: per-state linear projection over a causal RNN");
    println!("encoder, activation width {dim}, seeded random parameters (seed {seed}).");
    println!();

    // The walkthrough path: eps a eps b.
    println!("One alignment path, eps a eps b, through the product lattice:");
    let path: [(usize, Option<usize>); 4] = [(0, None), (1, Some(0)), (2, None), (3, Some(1))];
    let mut qc = ctx.initial();
    let mut path_weight = 0.0;
    for (t, label) in path {
        let w = omega.normalized(t, crate::weights::MaskKind::Full)?;
        let (col, label_text) = match label {
            Some(y) => (y, char::from(b'a' + y as u8).to_string()),
            None => (vocab, "eps".to_string()),
        };
        let weight = w[[qc, col]];
        path_weight += weight;
        let next_qc = match label {
            Some(y) => ctx.next_state(qc, y),
            None => qc,
        };
        println!(
            "  ({t}, {:<7}) --{label_text:>3}--> ({}, {:<7})  w = -(W[{}][{label_text}] . h[{t}] + b[{}][{label_text}]) = {weight:+.6}",
            history_name(&ctx, qc),
            t + 1,
            history_name(&ctx, next_qc),
            history_name(&ctx, qc),
            history_name(&ctx, qc),
        );
        qc = next_qc;
    }
    println!("  path weight (log domain): {path_weight:+.6}");
    println!();

    let mut explicit = build_explicit(&lattice, &ctx, &omega, LatticeMode::Plain)?;
    if inject_fault {
        println!("(fault injection: corrupting one explicit arc weight)");
        explicit.arcs[0].weight += 1e-3;
    }
    let paths = explicit.enumerate_paths(1_000)?;
    let oracle_den = explicit.weight_by_enumeration(Semiring::Log, 1_000)?;
    let (den, _) =
        inference::shortest_distance(&lattice, &omega, LatticeMode::Plain, Semiring::Log)?;
    println!(
        "Denominator over all {} alignment paths ({} product states):",
        paths.len(),
        explicit.num_states
    );
    println!("  explicit enumeration (log): {oracle_den:+.12}");
    println!("  vectorized sweep (log):     {den:+.12}");

    let target = [0usize, 1];
    let ab_paths = paths.iter().filter(|p| p.emitted == target).count();
    let oracle_num = explicit.string_weight(Semiring::Log, &target, 1_000)?;
    let num = inference::numerator(&lattice, &omega, LatticeMode::Plain, &target, Semiring::Log)?;
    println!();
    println!("Numerator for y = ab, summing its {ab_paths} alignments:");
    println!("  explicit enumeration (log): {oracle_num:+.12}");
    println!("  vectorized sweep (log):     {num:+.12}");
    println!();

    let mut ok = true;
    ok &= explicit.num_states == 35;
    ok &= paths.len() == 81;
    ok &= ab_paths == 6;
    ok &= (den - oracle_den).abs() <= 1e-9 * (1.0 + oracle_den.abs());
    ok &= (num - oracle_num).abs() <= 1e-9 * (1.0 + oracle_num.abs());
    if ok {
        println!("All checks passed: 81 paths, 6 alignments of ab, sweeps match enumeration.");
        Ok(0)
    } else {
        println!("MISMATCH between the vectorized sweeps and explicit enumeration.");
        Ok(1)
    }
}

/// Run the property suites. `scope` picks one of them or `all`.
pub fn cmd_check(scope: &str, seed: u64, inject_fault: bool) -> Result<i32> {
    let mut reports = Vec::new();
    let known = ["all", "golden", "z1", "oracle", "grad", "dedup"];
    if !known.contains(&scope) {
        return Err(Error::Usage(format!(
            "unknown scope {scope:?}; expected one of {known:?}"
        )));
    }
    let want = |name: &str| scope == "all" || scope == name;
    if want("golden") {
        reports.push(checks::golden_overview_suite(seed, inject_fault)?);
    }
    if want("z1") {
        reports.push(checks::z1_suite(100)?);
    }
    if want("oracle") {
        reports.push(checks::oracle_suite(10)?);
    }
    if want("grad") {
        reports.push(checks::grad_suite(inject_fault)?);
    }
    if want("dedup") {
        reports.push(checks::dedup_suite()?);
    }
    let mut all_passed = true;
    for report in &reports {
        println!("{}", report.line());
        all_passed &= report.passed;
    }
    Ok(if all_passed { 0 } else { 1 })
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub preset: Option<&'a str>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub out: &'a Path,
}

fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    seed: Option<u64>,
    steps: Option<usize>,
) -> Result<RunConfig> {
    let mut config = match (config, preset) {
        (Some(path), None) => RunConfig::from_path(path)?,
        (None, Some(name)) => {
            let preset = Preset::parse(name).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown preset {name:?}; expected one of ce, ctc, rnnt, hat, las_bounded, gnat"
                ))
            })?;
            expand(preset, PresetSizes::default())?
        }
        (Some(path), Some(name)) => {
            // Preset quadruple applied on top of the file's sizes.
            let base = RunConfig::from_path(path)?;
            let preset = Preset::parse(name)
                .ok_or_else(|| Error::Usage(format!("unknown preset {name:?}")))?;
            let sizes = PresetSizes {
                vocab: base.vocab,
                frames: base.lattice.frames,
                label_count: base.lattice.labels_per_frame.max(base.lattice.max_labels),
                order: base.context.order,
                dim: base.weights.dim,
                hidden: base.weights.hidden,
                input_dim: base.encoder.input_dim,
                seed: base.seed,
            };
            let mut expanded = expand(preset, sizes)?;
            expanded.train = base.train;
            expanded
        }
        (None, None) => {
            return Err(Error::Usage(
                "either --config or --preset is required".into(),
            ))
        }
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(s) = steps {
        config.train.steps = s;
    }
    config.validate()?;
    Ok(config)
}

pub fn cmd_train(args: TrainArgs) -> Result<i32> {
    let config = resolve_config(args.config, args.preset, args.seed, args.steps)?;
    println!(
        "training: {} steps, batch {}",
        config.train.steps, config.train.batch_size
    );
    let (model, report) = crate::harness::train(&config)?;
    crate::model_io::save_model(args.out, &config, &model)?;
    let report_path = args.out.with_extension("report.txt");
    let mut text = String::new();
    use std::fmt::Write;
    writeln!(text, "label_error_rate {:.6}", report.label_error_rate).unwrap();
    writeln!(
        text,
        "eval_edits {} eval_ref_len {}",
        report.eval_edits, report.eval_ref_len
    )
    .unwrap();
    for (step, loss) in &report.loss_curve {
        writeln!(text, "loss {step} {loss:.9}").unwrap();
    }
    std::fs::write(&report_path, &text)?;
    println!("final label error rate: {:.4}", report.label_error_rate);
    println!("model: {}", args.out.display());
    println!("report: {}", report_path.display());
    Ok(0)
}

fn read_features(path: &Path, expect_cols: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let row = row.map_err(|e| {
            Error::Data(format!(
                "{}:{}: not a number: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        if row.len() != expect_cols {
            return Err(Error::Data(format!(
                "{}:{}: expected {expect_cols} values per frame, found {}",
                path.display(),
                lineno + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    let mut features = Array2::zeros((rows.len(), expect_cols));
    for (t, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            features[[t, c]] = *v;
        }
    }
    Ok(features)
}

pub fn cmd_decode(model_path: &Path, features_path: &Path) -> Result<i32> {
    let (config, model) = crate::model_io::load_model(model_path)?;
    let features = read_features(features_path, config.encoder.input_dim)?;
    let ctx = config.build_context()?;
    let prepared = model.wf.prepare(&ctx)?;
    let (h, _) = model.encoder.encode(&features.view())?;
    let lattice = config.build_lattice(features.nrows())?;
    let omega = OmegaTable::new(&model.wf, &prepared, &ctx, &h, config.normalization());
    let (labels, score) = inference::decode_max_path(&lattice, &omega, config.mode())?;
    let rendered: Vec<String> = labels.iter().map(|y| y.to_string()).collect();
    println!("labels: {}", rendered.join(" "));
    println!("score: {score:.9}");
    Ok(0)
}

pub fn cmd_gap(config_path: &Path, seeds: usize, out: Option<&Path>) -> Result<i32> {
    let base = RunConfig::from_path(config_path)?;
    if seeds < 3 {
        return Err(Error::Usage("gap experiment needs at least 3 seeds".into()));
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base.seed + i).collect();
    let report = crate::harness::run_gap_experiment(&base, &seed_list)?;
    print!("{}", report.text_table());
    println!();
    println!(
        "streaming: global helps by >= 10% of the local error: {}",
        if report.streaming_gain_holds() {
            "yes"
        } else {
            "NO"
        }
    );
    println!(
        "non-streaming: normalization within seed spread: {}",
        if report.non_streaming_parity_holds() {
            "yes"
        } else {
            "NO"
        }
    );
    if let Some(path) = out {
        std::fs::write(path, report.tsv())?;
        println!("table: {}", path.display());
    }
    Ok(0)
}

pub fn cmd_bench(frames: usize, vocab: usize, dim: usize, reps: usize, seed: u64) -> Result<i32> {
    let rows = crate::bench::run(crate::bench::BenchSettings {
        frames,
        vocab,
        dim,
        reps,
        seed,
    })?;
    print!("{}", crate::bench::table(&rows));
    let mono = crate::bench::monotonicity(&rows);
    println!();
    println!(
        "order 2 slower than order 0:          {}",
        if mono.order2_slower_than_order0 {
            "yes"
        } else {
            "no"
        }
    );
    println!(
        "label-frame at least frame:           {}",
        if mono.label_frame_at_least_frame {
            "yes"
        } else {
            "no"
        }
    );
    println!(
        "global at least local (order 2):      {}",
        if mono.global_at_least_local_at_order2 {
            "yes"
        } else {
            "no"
        }
    );
    Ok(0)
}
