//! Evaluation of trained runs: held-out objectives, sample quality and
//! parameter/FLOP accounting.

use std::io::Write;

use crate::data::{gauss8_centers, DatasetKind};
use crate::dpi::count_overhead;
use crate::error::{Error, Result};
use crate::eval::{energy_distance, heldout_diffusion_objective, heldout_flow_objective, mode_coverage, uniform_steps, uniform_times, Coverage};
use crate::interp::MonotoneInterpolant;
use crate::networks::{Arch, ArchSpec, Model, ModelSpec};
use crate::params::Scope;
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;
use crate::train::{LoadedRun, RunConfig};

/// Size and resolution of a held-out objective estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeldoutSpec {
    pub n_test: usize,
    pub seeds: usize,
    /// Diffusion steps or flow times averaged over.
    pub grid: usize,
    pub eval_seed: u64,
}

impl Default for HeldoutSpec {
    fn default() -> Self {
        Self {
            n_test: 1000,
            seeds: 2,
            grid: 100,
            eval_seed: 12345,
        }
    }
}

/// `n` test samples for `cfg`'s dataset, independent of every training draw.
pub fn test_set(cfg: &RunConfig, n: usize, eval_seed: u64) -> Tensor {
    cfg.dataset_spec().sample(n, &mut stream(eval_seed, Domain::Eval, 0))
}

/// Training objective on held-out data with shared noise: ε-MSE averaged
/// over evenly spaced steps, or velocity MSE over evenly spaced times.
pub fn heldout_objective(run: &LoadedRun, spec: &HeldoutSpec) -> Result<f64> {
    let test = test_set(&run.config, spec.n_test, spec.eval_seed);
    match &run.sched {
        Some(sched) => {
            let steps = uniform_steps(sched.steps(), spec.grid);
            heldout_diffusion_objective(&run.predictor, sched, &test, &steps, spec.seeds, spec.eval_seed)
        }
        None => heldout_flow_objective(&run.predictor, &test, &uniform_times(spec.grid), spec.seeds, spec.eval_seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    /// Energy distance from the samples to a reference draw.
    pub energy_distance: f64,
    /// Energy distance between two independent reference draws of the
    /// same size.
    pub reference_baseline: f64,
    /// Mode coverage for `gauss8`, radius three component deviations.
    pub coverage: Option<Coverage>,
}

pub fn sample_metrics(samples: &Tensor, cfg: &RunConfig, eval_seed: u64) -> Result<SampleMetrics> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to score".into()));
    }
    let n = samples.shape()[0];
    let spec = cfg.dataset_spec();
    let reference = spec.sample(n, &mut stream(eval_seed, Domain::Eval, 1));
    let other = spec.sample(n, &mut stream(eval_seed, Domain::Eval, 2));
    let coverage = if cfg.dataset == DatasetKind::Gauss8 {
        Some(mode_coverage(samples, &gauss8_centers(), 3.0 * cfg.gauss8_std)?)
    } else {
        None
    };
    Ok(SampleMetrics {
        energy_distance: energy_distance(samples, &reference)?,
        reference_baseline: energy_distance(&other, &reference)?,
        coverage,
    })
}

pub const SAMPLE_METRICS_HEADER: &str = "metric,value";

pub fn write_sample_metrics_csv(m: &SampleMetrics, mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", SAMPLE_METRICS_HEADER)?;
    writeln!(out, "energy_distance,{:?}", m.energy_distance)?;
    writeln!(out, "reference_baseline,{:?}", m.reference_baseline)?;
    if let Some(c) = &m.coverage {
        writeln!(out, "mode_coverage,{:?}", c.covered)?;
        for (k, s) in c.shares().iter().enumerate() {
            writeln!(out, "mode_share_{},{:?}", k, s)?;
        }
    }
    Ok(())
}

/// Writes point samples as `x,y,...` rows with a header.
pub fn write_points_csv(samples: &Tensor, mut out: impl Write) -> Result<()> {
    if samples.rank() != 2 {
        return Err(Error::Shape(format!("point CSV needs [N, d] samples, got {:?}", samples.shape())));
    }
    let d = samples.shape()[1];
    let names = ["x", "y", "z"];
    let header: Vec<String> = (0..d)
        .map(|j| names.get(j).map_or_else(|| format!("x{}", j), |s| s.to_string()))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for row in samples.data().chunks(d.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{:?}", v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// One row of the efficiency table.
#[derive(Clone, Debug, PartialEq)]
pub struct OverheadRow {
    pub arch: String,
    pub scope: Scope,
    pub base_params: usize,
    pub dpi_params: usize,
    pub blended_params: usize,
    pub phi_len: usize,
    /// Base forward FLOPs for one batch.
    pub forward_flops: usize,
    /// One blend per batch.
    pub blend_flops: usize,
    pub batch: usize,
}

impl OverheadRow {
    pub fn blend_fraction(&self) -> f64 {
        self.blend_flops as f64 / self.forward_flops as f64
    }
}

/// Scopes are written with `+` between parts.
pub const OVERHEAD_HEADER: &str =
    "arch,scope,base_params,dpi_params,blended_params,phi_len,param_ratio,forward_flops,blend_flops,blend_fraction,batch";

/// Accounting for `spec`'s architecture under `scope`, with one blend
/// amortized over a batch of `batch` samples.
pub fn overhead_row(spec: &ModelSpec, scope: Scope, batch: usize) -> Result<OverheadRow> {
    let mut base = spec.clone();
    base.strategy = crate::conditioning::Strategy::None;
    let model = Model::init(base)?;
    let manifest = model.param_manifest();
    let phi_len = MonotoneInterpolant::new(spec.lambda_mode, spec.grid_size, spec.s_range.0, spec.s_range.1)?.logit_len();
    let o = count_overhead(&manifest, scope, phi_len);
    let arch = match (&spec.arch, model.arch()) {
        (ArchSpec::Mlp { hidden }, Arch::Mlp(_)) => format!("mlp[{}]", join(hidden)),
        (ArchSpec::UNet { width, .. }, Arch::UNet(_)) => format!("unet[w{}]", width),
        _ => "unknown".into(),
    };
    Ok(OverheadRow {
        arch,
        scope,
        base_params: o.base_params,
        dpi_params: o.param_count,
        blended_params: o.blended_params,
        phi_len: o.param_count - o.base_params - o.blended_params,
        forward_flops: model.forward_flops(batch),
        blend_flops: o.blend_flops,
        batch,
    })
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

pub fn write_overhead_csv(rows: &[OverheadRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", OVERHEAD_HEADER)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:?},{},{},{:e},{}",
            r.arch,
            r.scope.to_string().replace(',', "+"),
            r.base_params,
            r.dpi_params,
            r.blended_params,
            r.phi_len,
            r.dpi_params as f64 / r.base_params as f64,
            r.forward_flops,
            r.blend_flops,
            r.blend_fraction(),
            r.batch
        )?;
    }
    Ok(())
}
