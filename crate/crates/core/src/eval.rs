//! Evaluation: the shared-noise denoising sweep, held-out objectives,
//! energy distance, mode coverage and a small SVG line-plot writer.

use std::fmt::Write as _;
use std::io::Write;

use crate::diffusion::{corrupt, mean_square_diff, EpsModel, VpSchedule};
use crate::error::{Error, Result};
use crate::flow::{path_point, velocity_target, VelocityModel};
use crate::rng::{normal_tensor, stream, Domain};
use crate::tensor::Tensor;

/// Default sweep grid: ten evenly spaced steps from 0 to 999, which
/// contains the anchors 0, 333, 666 and 999.
pub const DEFAULT_SWEEP_STEPS: [usize; 10] = [0, 111, 222, 333, 444, 555, 666, 777, 888, 999];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub t: usize,
    pub sigma: f64,
    pub eps_mse: f64,
    pub noise_scaled_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub strategy: String,
    pub seeds: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn mean_eps_mse(&self) -> f64 {
        self.rows.iter().map(|r| r.eps_mse).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

pub const SWEEP_HEADER: &str = "t,sigma,eps_mse,noise_scaled_mse,strategy,seeds";

pub fn write_sweep_csv(reports: &[SweepReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", SWEEP_HEADER)?;
    for rep in reports {
        for r in &rep.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{},{}",
                r.t, r.sigma, r.eps_mse, r.noise_scaled_mse, rep.strategy, rep.seeds
            )?;
        }
    }
    Ok(())
}

/// Noise for sample `i` of realization `r` at grid point `key`. Depends on
/// nothing else, so every model sees the same realizations.
fn shared_noise(noise_seed: u64, key: u64, r: usize, i: usize, shape: &[usize]) -> Tensor {
    let seed = noise_seed ^ (r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = stream(seed, Domain::Sweep, (key << 32) | i as u64);
    normal_tensor(shape, &mut rng)
}

fn batch_noise(noise_seed: u64, key: u64, r: usize, test: &Tensor) -> Result<Tensor> {
    let n = test.shape()[0];
    let per = &test.shape()[1..];
    let mut data = Vec::with_capacity(test.len());
    for i in 0..n {
        data.extend(shared_noise(noise_seed, key, r, i, per).into_data());
    }
    Tensor::new(test.shape().to_vec(), data)
}

/// Plain and σ²-scaled ε-MSE of `model` on `test` at every step in `steps`,
/// averaged over `seeds` noise realizations shared across models.
pub fn denoise_sweep(
    model: &impl EpsModel,
    label: &str,
    sched: &VpSchedule,
    test: &Tensor,
    steps: &[usize],
    seeds: usize,
    noise_seed: u64,
) -> Result<SweepReport> {
    if test.rank() < 2 || test.shape()[0] == 0 || seeds == 0 {
        return Err(Error::Config("sweep needs a non-empty test batch and at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(steps.len());
    for &t in steps {
        if t >= sched.steps() {
            return Err(Error::Config(format!("sweep step {} outside the schedule", t)));
        }
        let mut total = 0.0;
        for r in 0..seeds {
            let eps = batch_noise(noise_seed, t as u64, r, test)?;
            let xt = corrupt(test, t, &eps, sched)?;
            let pred = model.predict_eps(&xt, t, sched)?;
            total += mean_square_diff(&pred, &eps)?;
        }
        let eps_mse = total / seeds as f64;
        let sigma = sched.sigma()[t];
        rows.push(SweepRow {
            t,
            sigma,
            eps_mse,
            noise_scaled_mse: sigma * sigma * eps_mse,
        });
    }
    Ok(SweepReport {
        strategy: label.to_string(),
        seeds,
        rows,
    })
}

/// `count` evenly spaced steps over `[0, T−1]` including both ends.
pub fn uniform_steps(total: usize, count: usize) -> Vec<usize> {
    if count <= 1 || total <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..count)
        .map(|k| ((k * (total - 1)) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

/// Held-out ε-MSE averaged uniformly over `steps`: an estimate of the
/// expected diffusion objective with shared noise.
pub fn heldout_diffusion_objective(
    model: &impl EpsModel,
    sched: &VpSchedule,
    test: &Tensor,
    steps: &[usize],
    seeds: usize,
    noise_seed: u64,
) -> Result<f64> {
    Ok(denoise_sweep(model, "", sched, test, steps, seeds, noise_seed)?.mean_eps_mse())
}

/// `count` midpoints of a uniform partition of `[0, 1]`.
pub fn uniform_times(count: usize) -> Vec<f64> {
    (0..count).map(|k| (k as f64 + 0.5) / count as f64).collect()
}

/// Held-out velocity MSE averaged over `times`, with noise endpoints
/// shared across models.
pub fn heldout_flow_objective(
    model: &impl VelocityModel,
    test: &Tensor,
    times: &[f64],
    seeds: usize,
    noise_seed: u64,
) -> Result<f64> {
    if test.rank() < 2 || test.shape()[0] == 0 || seeds == 0 || times.is_empty() {
        return Err(Error::Config("flow objective needs data, times and at least one seed".into()));
    }
    let mut total = 0.0;
    for (k, &t) in times.iter().enumerate() {
        for r in 0..seeds {
            let x0 = batch_noise(noise_seed, k as u64, r, test)?;
            let xt = path_point(test, &x0, t)?;
            let pred = model.predict_velocity(&xt, t)?;
            total += mean_square_diff(&pred, &velocity_target(test, &x0)?)?;
        }
    }
    Ok(total / (times.len() * seeds) as f64)
}

fn as_rows(x: &Tensor) -> Result<(usize, usize)> {
    if x.rank() < 1 || x.shape()[0] == 0 {
        return Err(Error::Shape(format!("need a non-empty sample batch, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    Ok((n, x.len() / n))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_cross(a: &[f64], na: usize, b: &[f64], nb: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..na {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..nb {
            s += dist(ai, &b[j * d..(j + 1) * d]);
        }
    }
    s / (na * nb) as f64
}

fn mean_within(a: &[f64], n: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        let ai = &a[i * d..(i + 1) * d];
        for j in i + 1..n {
            s += dist(ai, &a[j * d..(j + 1) * d]);
        }
    }
    2.0 * s / (n * n) as f64
}

/// V-statistic `2·E‖a − b‖ − E‖a − a′‖ − E‖b − b′‖` over all pairs.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (na, da) = as_rows(a)?;
    let (nb, db) = as_rows(b)?;
    if da != db {
        return Err(Error::Shape(format!("sample dimensions differ: {} vs {}", da, db)));
    }
    let cross = mean_cross(a.data(), na, b.data(), nb, da);
    let ed = 2.0 * cross - mean_within(a.data(), na, da) - mean_within(b.data(), nb, db);
    Ok(ed.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coverage {
    /// Samples whose nearest center is this one and lie within the radius.
    pub counts: Vec<usize>,
    pub total: usize,
    /// Fraction of centers holding at least 1% of the samples.
    pub covered: f64,
}

impl Coverage {
    pub fn shares(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.total.max(1) as f64).collect()
    }
}

/// Nearest-center assignment of 2-D samples.
pub fn mode_coverage(samples: &Tensor, centers: &[[f64; 2]], radius: f64) -> Result<Coverage> {
    if !(radius > 0.0) {
        return Err(Error::Domain(format!("coverage radius must be positive, got {}", radius)));
    }
    if centers.is_empty() {
        return Err(Error::Config("mode coverage needs at least one center".into()));
    }
    let n = if samples.is_empty() { 0 } else { samples.shape()[0] };
    if n > 0 && samples.len() != 2 * n {
        return Err(Error::Shape(format!("mode coverage needs N×2 samples, got {:?}", samples.shape())));
    }
    let mut counts = vec![0; centers.len()];
    for p in samples.data().chunks(2) {
        let (k, d) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, dist(p, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("centers non-empty");
        if d <= radius {
            counts[k] += 1;
        }
    }
    let need = 0.01 * n as f64;
    let hit = counts.iter().filter(|&&c| n > 0 && c as f64 >= need).count();
    Ok(Coverage {
        counts,
        total: n,
        covered: hit as f64 / centers.len() as f64,
    })
}

/// One named polyline for [`svg_line_plot`].
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line plot on a fixed 800×500 canvas. With `log_y`, non-positive values
/// are dropped.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h) = (800.0, 500.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_y || p.1 > 0.0))
        .map(|(x, y)| (x, ty(y)))
        .collect();
    let span = |v: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(&mut pts.iter().map(|p| p.0));
    let (y0, y1) = span(&mut pts.iter().map(|p| p.1));
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let ylab = if log_y { format!("1e{:.1}", fy) } else { format!("{:.3}", fy) };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.3}</text>"#,
            px(fx),
            h - bottom + 16.0,
            fx
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            ylab
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        left + (w - left - right) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        for (x, y) in ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite() && (!log_y || p.1 > 0.0))
        {
            let cmd = if d.is_empty() { 'M' } else { 'L' };
            let _ = write!(d, "{}{:.2} {:.2} ", cmd, px(*x), py(ty(*y)));
        }
        if !d.is_empty() {
            let _ = writeln!(s, r#"<path d="{}" stroke="{}" stroke-width="2" fill="none"/>"#, d.trim_end(), color);
        }
        let ly = top + 20.0 * k as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<path d="M{:.1} {:.1} L{:.1} {:.1}" stroke="{}" stroke-width="2"/>"#,
            w - right + 10.0,
            ly,
            w - right + 30.0,
            ly,
            color
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            w - right + 36.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
