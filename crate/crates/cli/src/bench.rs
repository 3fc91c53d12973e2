//! Benchmark suites. Each suite writes one CSV (rows = configurations).

use std::path::Path;
use std::sync::Mutex;

use moeflow_core::compile::{compile_moe, CompileOptions, MoeGraphKind};
use moeflow_core::graph::ShapeConfig;
use moeflow_core::routing::balanced_plan;
use moeflow_core::scenarios::{
    alltoall_cost_model, alltoall_sscs, cache_cost_model, chain_scenario, overhead_cost_model,
    DestOrder,
};
use moeflow_core::sim::{simulate, CostModel, DispatchMode, SimMode};
use moeflow_core::{Error, Result};

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Suite {
    #[value(name = "cache_interleave")]
    CacheInterleave,
    #[value(name = "sched_overhead")]
    SchedOverhead,
    #[value(name = "ratr")]
    Ratr,
    #[value(name = "overlap")]
    Overlap,
}

impl Suite {
    fn file_name(self) -> &'static str {
        match self {
            Suite::CacheInterleave => "cache_interleave.csv",
            Suite::SchedOverhead => "sched_overhead.csv",
            Suite::Ratr => "ratr.csv",
            Suite::Overlap => "overlap.csv",
        }
    }
}

/// Map rows 0..n with up to `jobs` threads, preserving row order.
fn parallel_rows<F>(n: usize, jobs: usize, f: F) -> Result<Vec<String>>
where
    F: Fn(usize) -> Result<String> + Sync,
{
    let jobs = jobs.max(1).min(n.max(1));
    if jobs <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = Mutex::new(0usize);
    let rows: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= n {
                        return;
                    }
                    let i = *guard;
                    *guard += 1;
                    i
                };
                let row = f(i);
                rows.lock().unwrap()[i] = Some(row);
            });
        }
    });
    rows.into_inner().unwrap().into_iter().map(|r| r.expect("row computed")).collect()
}

fn run_pipelined(sscs: &[moeflow_core::sched::Ssc], cm: &CostModel) -> Result<(f64, f64)> {
    let out = simulate(sscs, cm, SimMode::Pipelined, DispatchMode::Static)?;
    let hit = out.per_rank.iter().map(|m| m.l2_hit_rate).fold(0.0f64, f64::max);
    Ok((out.makespan(), hit))
}

fn cache_interleave_csv(jobs: usize) -> Result<String> {
    const MS: [usize; 4] = [2048, 8192, 16384, 32768];
    const HIDDEN: usize = 512;
    const BLOCK: usize = 1024;
    let cm = cache_cost_model(*MS.last().unwrap(), HIDDEN);
    let rows = parallel_rows(MS.len(), jobs, |i| {
        let m = MS[i];
        let plain = chain_scenario(m, HIDDEN, BLOCK, false)?;
        let inter = chain_scenario(m, HIDDEN, BLOCK, true)?;
        let (mk_p, hit_p) = run_pipelined(&plain.sscs(), &cm)?;
        let (mk_i, hit_i) = run_pipelined(&inter.sscs(), &cm)?;
        Ok(format!("{m},{mk_p:.6},{mk_i:.6},{hit_p:.6},{hit_i:.6},{:.6}", mk_p / mk_i))
    })?;
    Ok(format!(
        "m,serial_makespan_us,interleaved_makespan_us,serial_l2_hit_rate,interleaved_l2_hit_rate,speedup\n{}\n",
        rows.join("\n")
    ))
}

fn sched_overhead_csv(jobs: usize) -> Result<String> {
    // same M axis as the cache suite; compute costs are zeroed so the
    // per-task dispatch overhead dominates
    const MS: [usize; 4] = [2048, 8192, 16384, 32768];
    let cm = overhead_cost_model();
    let rows = parallel_rows(MS.len(), jobs, |i| {
        let m = MS[i];
        let compiled = chain_scenario(m, 64, 1024, false)?;
        let sscs = compiled.sscs();
        let n: usize = sscs.iter().map(|s| s.tds.len()).sum();
        let st = simulate(&sscs, &cm, SimMode::Pipelined, DispatchMode::Static)?.makespan();
        let dy = simulate(&sscs, &cm, SimMode::Pipelined, DispatchMode::Dynamic)?.makespan();
        Ok(format!("{m},{n},{st:.6},{dy:.6},{:.6},{:.6}", dy / st, dy - st))
    })?;
    Ok(format!(
        "m,n_tasks,static_makespan_us,dynamic_makespan_us,ratio,gap_us\n{}\n",
        rows.join("\n")
    ))
}

fn ratr_csv(jobs: usize) -> Result<String> {
    const PS: [usize; 7] = [2, 3, 4, 5, 6, 7, 8];
    const BYTES: usize = 1 << 16;
    let cm = alltoall_cost_model();
    let rows = parallel_rows(PS.len(), jobs, |i| {
        let p = PS[i];
        let naive = simulate(
            &alltoall_sscs(p, BYTES, &DestOrder::Naive),
            &cm,
            SimMode::Pipelined,
            DispatchMode::Static,
        )?
        .makespan();
        let ratr = simulate(
            &alltoall_sscs(p, BYTES, &DestOrder::Ratr),
            &cm,
            SimMode::Pipelined,
            DispatchMode::Static,
        )?
        .makespan();
        Ok(format!("{p},{naive:.6},{ratr:.6},{:.6}", naive / ratr))
    })?;
    Ok(format!("p,naive_makespan_us,ratr_makespan_us,speedup\n{}\n", rows.join("\n")))
}

fn overlap_config(ep: usize) -> ShapeConfig {
    ShapeConfig {
        seq_len: 32,
        microbatch: 1,
        hidden: 64,
        intermediate: 32,
        top_k: 2,
        total_experts: 2 * ep,
        ep_size: ep,
        local_experts: 2,
        rank_id: 0,
    }
}

fn overlap_csv(jobs: usize) -> Result<String> {
    const EPS: [usize; 3] = [2, 4, 8];
    let cases: Vec<(MoeGraphKind, usize)> = [MoeGraphKind::Forward, MoeGraphKind::Backward]
        .into_iter()
        .flat_map(|k| EPS.iter().map(move |&ep| (k, ep)))
        .collect();
    let cm = CostModel::default();
    let rows = parallel_rows(cases.len(), jobs, |i| {
        let (kind, ep) = cases[i];
        let cfg = overlap_config(ep);
        let plan = balanced_plan(&cfg)?;
        let compiled = compile_moe(kind, &cfg, &plan, &CompileOptions::default())?;
        let sscs = compiled.sscs();
        let serial =
            simulate(&sscs, &cm, SimMode::SerialBaseline, DispatchMode::Static)?.makespan();
        let piped = simulate(&sscs, &cm, SimMode::Pipelined, DispatchMode::Static)?.makespan();
        let name = match kind {
            MoeGraphKind::Forward => "forward",
            MoeGraphKind::Backward => "backward",
        };
        Ok(format!("{name},{ep},{serial:.6},{piped:.6},{:.6}", serial / piped))
    })?;
    Ok(format!(
        "graph,ep,serial_makespan_us,pipelined_makespan_us,speedup\n{}\n",
        rows.join("\n")
    ))
}

pub fn run(suite: Suite, output_dir: &Path, jobs: usize) -> Result<()> {
    let csv = match suite {
        Suite::CacheInterleave => cache_interleave_csv(jobs)?,
        Suite::SchedOverhead => sched_overhead_csv(jobs)?,
        Suite::Ratr => ratr_csv(jobs)?,
        Suite::Overlap => overlap_csv(jobs)?,
    };
    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::ConfigError(format!("cannot create {}: {e}", output_dir.display())))?;
    let path = output_dir.join(suite.file_name());
    std::fs::write(&path, csv)
        .map_err(|e| Error::ConfigError(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}
