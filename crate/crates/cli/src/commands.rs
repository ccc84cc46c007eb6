use feedcap::capacity::{asymptotic_rate_estimate, optimize_strategy, steady_state_riccati};
use feedcap::export::{fmt_num, matrix_header, push_matrix, vector_header};
use feedcap::mc_sim::{
    check_orthogonality, empirical_power, empirical_rate, simulate as run_simulation,
    TRACE_EXPORT_LIMIT,
};
use feedcap::model::{assemble_noise_covariance, ChannelConfig, PoSsRealization};
use feedcap::noise_filter::{noise_entropy, run_noise_filter};
use feedcap::oracle::{
    cp_objective, cp_optimize, cp_to_innovations_form, joint_covariance, unroll_sequential,
};
use feedcap::{load_model, run_output_filter, Error, Result, SequentialStrategy};
use serde_json::{json, Value};

use crate::output::{header, nums, OutputDir, Units};
use crate::{AsymptoticArgs, CapacityArgs, Common, FilterArgs, SimulateArgs, SteadyStateArgs};

fn load(common: &Common) -> Result<PoSsRealization> {
    let r = load_model(&common.model)?;
    match common.n {
        None => Ok(r),
        Some(0) => Err(Error::InvalidConfig("--n must be >= 1".into())),
        Some(n) if n <= r.horizon => r.truncate(n),
        Some(n) => match r.as_time_invariant() {
            Some(ti) => Ok(ti.realize(n)),
            None => Err(Error::InvalidConfig(format!(
                "--n {n} exceeds the horizon {} of a time-varying model",
                r.horizon
            ))),
        },
    }
}

fn config(kappa: f64, n: usize) -> Result<ChannelConfig> {
    ChannelConfig::new(kappa, n)
}

fn to_json<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn rows_of(m: &feedcap::nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn filter(args: &FilterArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let trace = run_noise_filter(&r)?;
    let entropy = noise_entropy(&trace);
    let out = OutputDir::create(&common.out)?;
    trace.write_csv(std::fs::File::create(out.path("results.csv"))?)?;

    let mut plot = Vec::new();
    for t in 0..r.horizon {
        plot.push(step_row(
            t,
            &[trace.innovation_var[t], units.rate(entropy.per_step[t])],
        ));
    }
    out.table("plotdata.csv", &header(&["t", "K_Ihat", "entropy"]), &plot)?;

    out.summary(&json!({
        "command": "filter",
        "units": units.name(),
        "n": r.horizon,
        "noise_entropy": units.rate(entropy.total),
        "log_det_noise_cov": trace.log_det(),
        "innovation_var": trace.innovation_var,
        "sigma_final": rows_of(trace.sigma.last().expect("n >= 1")),
    }))?;
    println!(
        "H(V^n) = {:.10} {} over n = {}",
        units.rate(entropy.total),
        units.name(),
        r.horizon
    );
    Ok(())
}

/// Header, rows and per-step rates.
type StrategyTable = (Vec<String>, Vec<Vec<String>>, Vec<f64>);

/// Per-step table shared by `capacity` and `simulate`.
fn strategy_table(
    r: &PoSsRealization,
    s: &SequentialStrategy,
    units: Units,
) -> Result<StrategyTable> {
    let noise = run_noise_filter(r)?;
    let out = run_output_filter(r, &noise, s)?;
    let rates = out.rates(&noise);
    let ns = r.state_dim;
    let mut cols = vec!["t".to_string()];
    cols.extend(vector_header("Lambda", ns));
    cols.push("K_Z".into());
    cols.extend(matrix_header("K", ns, ns));
    cols.extend(header(&["K_I", "K_Ihat", "rate", "power"]));
    let mut rows = Vec::with_capacity(r.horizon);
    for t in 0..r.horizon {
        let mut row = vec![(t + 1).to_string()];
        row.extend(nums(&s.lambda[t]));
        row.push(fmt_num(s.dither_var[t]));
        push_matrix(&mut row, &out.k[t]);
        row.extend(nums(&[
            out.innovation_var[t],
            noise.innovation_var[t],
            units.rate(rates[t]),
            out.power[t],
        ]));
        rows.push(row);
    }
    Ok((cols, rows, rates))
}

/// One-based step index followed by the values.
fn step_row(t: usize, values: &[f64]) -> Vec<String> {
    let mut row = vec![(t + 1).to_string()];
    row.extend(nums(values));
    row
}

fn rate_plot(rates: &[f64], units: Units) -> Vec<Vec<String>> {
    let mut acc = 0.0;
    rates
        .iter()
        .enumerate()
        .map(|(t, &x)| {
            acc += x;
            step_row(
                t,
                &[
                    units.rate(x),
                    units.rate(acc),
                    units.rate(acc / (t + 1) as f64),
                ],
            )
        })
        .collect()
}

const RATE_PLOT_COLS: [&str; 4] = ["t", "rate", "cumulative_rate", "cumulative_rate_per_step"];

pub fn capacity(args: &CapacityArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let cfg = config(args.kappa, r.horizon)?;
    let opts = args.optim.options();
    let best = optimize_strategy(&r, &cfg, &opts)?;
    let out = OutputDir::create(&common.out)?;
    let (cols, rows, rates) = strategy_table(&r, &best.strategy, units)?;
    out.table("results.csv", &cols, &rows)?;
    out.table(
        "plotdata.csv",
        &header(&RATE_PLOT_COLS),
        &rate_plot(&rates, units),
    )?;
    out.summary(&json!({
        "command": "capacity",
        "units": units.name(),
        "n": r.horizon,
        "kappa": args.kappa,
        "value": units.rate(best.value),
        "value_per_step": units.rate(best.value / r.horizon as f64),
        "avg_power": best.avg_power,
        "rate_per_step": best.rate_per_step.iter().map(|&x| units.rate(x)).collect::<Vec<_>>(),
        "power_per_step": best.power_per_step,
        "strategy": to_json(&best.strategy),
        "diagnostics": to_json(&best.diagnostics),
        "optimizer": to_json(&opts),
    }))?;
    println!(
        "C_n = {:.10} {} (n = {}, kappa = {}, avg power {:.6})",
        units.rate(best.value),
        units.name(),
        r.horizon,
        args.kappa,
        best.avg_power
    );
    Ok(())
}

pub fn oracle_compare(args: &CapacityArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let cfg = config(args.kappa, r.horizon)?;
    let opts = args.optim.options();
    let k_v = assemble_noise_covariance(&r)?;
    let cp = cp_optimize(&k_v, &cfg, &opts)?;
    let seq = optimize_strategy(&r, &cfg, &opts)?;
    let noise = run_noise_filter(&r)?;
    let unrolled = unroll_sequential(&r, &seq.strategy, &noise)?;
    let unrolled_value = cp_objective(&k_v, &unrolled)?;
    let conv = cp_to_innovations_form(&k_v, &cp.strategy)?;
    let round_trip =
        (joint_covariance(&k_v, &cp.strategy)? - joint_covariance(&k_v, &conv.strategy)?).amax();
    let delta = (seq.value - cp.value).abs();

    let out = OutputDir::create(&common.out)?;
    let cols = header(&[
        "engine",
        "value",
        "avg_power",
        "iterations",
        "restarts_converged",
    ]);
    let diag_row = |name: &str, value: f64, power: f64, d: &feedcap::OptimizerDiagnostics| {
        vec![
            name.to_string(),
            fmt_num(units.rate(value)),
            fmt_num(power),
            d.iterations.to_string(),
            d.restarts_converged.to_string(),
        ]
    };
    let seq_diag = seq.diagnostics.clone().expect("optimizer output");
    out.table(
        "results.csv",
        &cols,
        &[
            diag_row("sequential", seq.value, seq.avg_power, &seq_diag),
            diag_row("matrix_form", cp.value, cp.avg_power, &cp.diagnostics),
        ],
    )?;
    out.table(
        "plotdata.csv",
        &header(&RATE_PLOT_COLS),
        &rate_plot(&seq.rate_per_step, units),
    )?;
    cp.strategy
        .write_csv(std::fs::File::create(out.path("matrix_form_strategy.csv"))?)?;
    out.summary(&json!({
        "command": "oracle-compare",
        "units": units.name(),
        "n": r.horizon,
        "kappa": args.kappa,
        "sequential": {
            "value": units.rate(seq.value),
            "avg_power": seq.avg_power,
            "diagnostics": to_json(&seq_diag),
        },
        "matrix_form": {
            "value": units.rate(cp.value),
            "avg_power": cp.avg_power,
            "diagnostics": to_json(&cp.diagnostics),
        },
        "abs_delta": units.rate(delta),
        "unrolled_sequential_value": units.rate(unrolled_value.value),
        "unroll_abs_delta": units.rate((unrolled_value.value - seq.value).abs()),
        "innovations_round_trip_max_cov_delta": round_trip,
        "ridged_steps": conv.ridged_steps,
    }))?;
    println!(
        "sequential {:.10}, matrix form {:.10}, |delta| = {:.3e} {}",
        units.rate(seq.value),
        units.rate(cp.value),
        units.rate(delta),
        units.name()
    );
    Ok(())
}

/// Longest finite-horizon trajectory written next to a steady-state result.
const STEADY_PLOT_MAX: usize = 2000;

pub fn steady_state(args: &SteadyStateArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let model = r.as_time_invariant().ok_or_else(|| {
        Error::InvalidConfig("steady-state needs a time-invariant model with n >= 2".into())
    })?;
    let lambda = args
        .lambda
        .clone()
        .unwrap_or_else(|| vec![0.0; model.state_dim()]);
    let ss = steady_state_riccati(&model, &lambda, args.dither)?;

    let out = OutputDir::create(&common.out)?;
    let ns = model.state_dim();
    let mut cols = header(&["quantity"]);
    cols.extend((1..=ns).map(|j| format!("col_{j}")));
    let mut rows = Vec::new();
    for (name, m) in [("Sigma", &ss.sigma), ("K", &ss.k)] {
        for row in m {
            let mut rec = vec![name.to_string()];
            rec.extend(nums(row));
            rows.push(rec);
        }
    }
    out.table("results.csv", &cols, &rows)?;

    // the finite-horizon recursion from t = 1 traces the approach to the fixed point
    let mut plot = Vec::new();
    let mut steady_rate = None;
    if ss.converged {
        let horizon = (ss.iterations + 1).clamp(2, STEADY_PLOT_MAX);
        let rn = model.realize(horizon);
        let s = SequentialStrategy::constant(horizon, &lambda, args.dither);
        let noise = run_noise_filter(&rn)?;
        let trace = run_output_filter(&rn, &noise, &s)?;
        let rates = trace.rates(&noise);
        for t in 0..horizon {
            plot.push(step_row(
                t,
                &[
                    noise.innovation_var[t],
                    trace.innovation_var[t],
                    units.rate(rates[t]),
                ],
            ));
        }
        steady_rate = rates.last().map(|&x| units.rate(x));
    }
    out.table(
        "plotdata.csv",
        &header(&["t", "K_Ihat", "K_I", "rate"]),
        &plot,
    )?;
    out.summary(&json!({
        "command": "steady-state",
        "units": units.name(),
        "lambda": lambda,
        "dither_var": args.dither,
        "sigma": ss.sigma,
        "k": ss.k,
        "converged": ss.converged,
        "diverged": ss.diverged,
        "iterations": ss.iterations,
        "steady_rate_per_step": steady_rate,
    }))?;
    if ss.converged {
        println!(
            "converged in {} iterations, Sigma = {:?}",
            ss.iterations, ss.sigma
        );
    } else if ss.diverged {
        println!("diverged after {} iterations", ss.iterations);
    } else {
        println!("not converged after {} iterations", ss.iterations);
    }
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let cfg = config(args.kappa, r.horizon)?;
    if args.samples == 0 {
        return Err(Error::InvalidConfig("--samples must be >= 1".into()));
    }
    if args.trace && args.samples > TRACE_EXPORT_LIMIT {
        return Err(Error::InvalidConfig(format!(
            "--trace is limited to {TRACE_EXPORT_LIMIT} samples"
        )));
    }
    let opts = args.optim.options();
    let best = optimize_strategy(&r, &cfg, &opts)?;
    let trace = run_simulation(&r, &best.strategy, args.samples, args.optim.seed)?;
    let report = check_orthogonality(&trace);
    let rate = empirical_rate(&trace);
    let power = empirical_power(&trace);

    let out = OutputDir::create(&common.out)?;
    let noise = run_noise_filter(&r)?;
    let filt = run_output_filter(&r, &noise, &best.strategy)?;
    let m = trace.n_samples as f64;
    let second = |p: &feedcap::mc_sim::Paths, t: usize| {
        (0..trace.n_samples)
            .map(|i| p.value(i, t).powi(2))
            .sum::<f64>()
            / m
    };
    let mut rows = Vec::new();
    for t in 0..r.horizon {
        rows.push(step_row(
            t,
            &[
                noise.innovation_var[t],
                second(&trace.noise_innovation, t),
                filt.innovation_var[t],
                second(&trace.output_innovation, t),
                units.rate(best.rate_per_step[t]),
                units.rate(rate.per_step[t]),
                best.power_per_step[t],
                power.per_step[t],
            ],
        ));
    }
    out.table(
        "results.csv",
        &header(&[
            "t",
            "K_Ihat",
            "K_Ihat_empirical",
            "K_I",
            "K_I_empirical",
            "rate",
            "rate_empirical",
            "power",
            "power_empirical",
        ]),
        &rows,
    )?;
    let plot: Vec<Vec<String>> = (0..r.horizon)
        .map(|t| {
            step_row(
                t,
                &[
                    units.rate(best.rate_per_step[t]),
                    units.rate(rate.per_step[t]),
                ],
            )
        })
        .collect();
    out.table(
        "plotdata.csv",
        &header(&["t", "rate", "rate_empirical"]),
        &plot,
    )?;
    if args.trace {
        trace.write_csv(
            std::fs::File::create(out.path("trace.csv"))?,
            TRACE_EXPORT_LIMIT,
        )?;
    }
    let rate_ok = rate.within(best.value, 3.0);
    let power_ok = power.within(best.avg_power, 3.0);
    out.summary(&json!({
        "command": "simulate",
        "units": units.name(),
        "n": r.horizon,
        "kappa": args.kappa,
        "samples": args.samples,
        "seed": args.optim.seed,
        "value": units.rate(best.value),
        "empirical_rate": units.rate(rate.value),
        "empirical_rate_std_error": units.rate(rate.std_error),
        "rate_within_3se": rate_ok,
        "avg_power": best.avg_power,
        "empirical_power": power.value,
        "empirical_power_std_error": power.std_error,
        "power_within_3se": power_ok,
        "orthogonality": to_json(&report),
        "orthogonality_passed": report.passed(),
    }))?;
    println!(
        "rate {:.6} +/- {:.6} (exact {:.6}) {}; orthogonality {}",
        units.rate(rate.value),
        units.rate(rate.std_error),
        units.rate(best.value),
        units.name(),
        if report.passed() { "passed" } else { "FAILED" }
    );
    Ok(())
}

pub fn asymptotic(args: &AsymptoticArgs) -> Result<()> {
    let common = &args.common;
    let units = Units { bits: common.bits };
    let r = load(common)?;
    let model = r.as_time_invariant().ok_or_else(|| {
        Error::InvalidConfig("asymptotic needs a time-invariant model with n >= 2".into())
    })?;
    if args.horizons.is_empty() || args.horizons.contains(&0) {
        return Err(Error::InvalidConfig("--horizons must be positive".into()));
    }
    let rows = asymptotic_rate_estimate(&model, args.kappa, &args.horizons, &args.optim.options())?;
    let out = OutputDir::create(&common.out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            vec![
                row.n.to_string(),
                fmt_num(units.rate(row.capacity)),
                fmt_num(units.rate(row.per_step)),
                row.delta.map_or(String::new(), |d| fmt_num(units.rate(d))),
                fmt_num(row.avg_power),
            ]
        })
        .collect();
    out.table(
        "results.csv",
        &header(&["n", "capacity", "capacity_per_step", "delta", "avg_power"]),
        &table,
    )?;
    let plot: Vec<Vec<String>> = rows
        .iter()
        .map(|row| vec![row.n.to_string(), fmt_num(units.rate(row.per_step))])
        .collect();
    out.table("plotdata.csv", &header(&["n", "capacity_per_step"]), &plot)?;
    let last = rows.last().expect("non-empty horizons");
    out.summary(&json!({
        "command": "asymptotic",
        "units": units.name(),
        "kappa": args.kappa,
        "horizons": args.horizons,
        "capacity_per_step": rows.iter().map(|row| units.rate(row.per_step)).collect::<Vec<_>>(),
        "estimate": units.rate(last.per_step),
        "last_delta": last.delta.map(|d| units.rate(d)),
    }))?;
    for row in &rows {
        println!(
            "n = {:>4}  C_n/n = {:.10} {}",
            row.n,
            units.rate(row.per_step),
            units.name()
        );
    }
    Ok(())
}
