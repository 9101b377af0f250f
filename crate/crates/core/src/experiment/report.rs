use std::path::PathBuf;

use super::evaluate::{load_results, ModeResults};
use super::svg::{color, extent, Scale, Svg};
use super::{write_atomic, Experiment, Filter, Result, TOOL_VERSION};
use crate::stats::bootstrap_ci;
use crate::util::derive_seed;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 45.0;

/// Renders SVG figures for every evaluated mode selected by `filter`.
pub fn report(exp: &Experiment, filter: &Filter) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &mode in &exp.manifest.modes {
        if !filter.modes.is_empty() && !filter.modes.contains(&mode) {
            continue;
        }
        let res = load_results(exp, mode)?;
        let dir = exp.figures_dir(mode);
        let stamp = format!("predcomp {TOOL_VERSION} manifest={}", exp.checksum);
        let mut figs = vec![("loss_curves.svg", loss_curves(exp, &res, &stamp)?)];
        if let Some(h) = heatmap(&res, &stamp) {
            figs.push(("heatmap.svg", h));
        }
        if let Some(m) = mds_projection(&res, &stamp) {
            figs.push(("mds.svg", m));
        }
        if !res.summary.special.is_empty() {
            figs.push(("attribution.svg", attribution(&res, &stamp)));
        }
        for (name, svg) in figs {
            let path = dir.join(name);
            write_atomic(&path, svg.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}

/// One panel per model author: held-out loss on each author's text across
/// epochs, seed mean with a bootstrap interval ribbon.
fn loss_curves(exp: &Experiment, res: &ModeResults, stamp: &str) -> Result<String> {
    let authors = &res.summary.authors;
    let seeds = &res.summary.seeds;
    let cols = authors.len().clamp(1, 4);
    let rows = authors.len().div_ceil(cols).max(1);
    let legend_h = 20.0 * (authors.len() + 1) as f64;
    let mut svg = Svg::new(cols as f64 * PANEL_W, rows as f64 * PANEL_H + legend_h).with_comment(stamp);
    let analysis = exp.manifest.analysis;

    for (p, model) in authors.iter().enumerate() {
        let (ox, oy) = ((p % cols) as f64 * PANEL_W, (p / cols) as f64 * PANEL_H);
        // series[eval author] = (epoch, mean, lo, hi)
        let mut series: Vec<Vec<(f64, f64, f64, f64)>> = Vec::new();
        for eval in authors {
            let mut epochs: Vec<usize> = seeds
                .iter()
                .filter_map(|&s| res.records.get(&(model.clone(), s)))
                .flatten()
                .filter(|r| r.heldout.contains_key(eval))
                .map(|r| r.epoch)
                .collect();
            epochs.sort_unstable();
            epochs.dedup();
            let mut pts = Vec::new();
            for e in epochs {
                let vals: Vec<f64> = seeds
                    .iter()
                    .filter_map(|&s| res.records.get(&(model.clone(), s)))
                    .filter_map(|recs| recs.iter().find(|r| r.epoch == e)?.heldout.get(eval).copied())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let seed = derive_seed(e as u64, &["ribbon", model, eval]);
                let (lo, hi) = bootstrap_ci(&vals, analysis.bootstrap_level, analysis.bootstrap_resamples, seed)?;
                pts.push((e as f64, mean, lo, hi));
            }
            series.push(pts);
        }
        let all = series.iter().flatten();
        let xs = extent(all.clone().map(|p| p.0));
        let ys = extent(all.flat_map(|p| [p.2, p.3]));
        svg.text(ox + PANEL_W / 2.0, oy + 16.0, 12.0, "middle", &format!("{model} model"));
        svg.line(ox + MARGIN, oy + PANEL_H - MARGIN, ox + PANEL_W - 10.0, oy + PANEL_H - MARGIN, "black");
        svg.line(ox + MARGIN, oy + 25.0, ox + MARGIN, oy + PANEL_H - MARGIN, "black");
        svg.text(ox + PANEL_W / 2.0, oy + PANEL_H - 12.0, 10.0, "middle", "epoch");
        let (Some((x0, x1)), Some((y0, y1))) = (xs, ys) else {
            svg.text(ox + PANEL_W / 2.0, oy + PANEL_H / 2.0, 10.0, "middle", "no held-out records");
            continue;
        };
        let sx = Scale::new(x0, x1, ox + MARGIN, ox + PANEL_W - 10.0);
        let sy = Scale::new(y0, y1, oy + PANEL_H - MARGIN, oy + 25.0);
        svg.text(ox + MARGIN - 4.0, oy + 30.0, 9.0, "end", &format!("{y1:.2}"));
        svg.text(ox + MARGIN - 4.0, oy + PANEL_H - MARGIN, 9.0, "end", &format!("{y0:.2}"));
        for (k, pts) in series.iter().enumerate() {
            if pts.is_empty() {
                continue;
            }
            let mut ribbon: Vec<(f64, f64)> = pts.iter().map(|p| (sx.map(p.0), sy.map(p.3))).collect();
            ribbon.extend(pts.iter().rev().map(|p| (sx.map(p.0), sy.map(p.2))));
            svg.polygon(&ribbon, color(k), 0.2);
            let line: Vec<(f64, f64)> = pts.iter().map(|p| (sx.map(p.0), sy.map(p.1))).collect();
            svg.polyline(&line, color(k));
        }
    }
    let ly = rows as f64 * PANEL_H + 14.0;
    for (k, a) in authors.iter().enumerate() {
        let y = ly + 20.0 * k as f64;
        svg.rect(10.0, y - 9.0, 10.0, 10.0, color(k), "");
        svg.text(26.0, y, 10.0, "start", &format!("held-out text of {a}"));
    }
    let missing = &res.summary.missing_cells;
    let note = if missing.is_empty() { "ribbons: bootstrap interval over seeds".to_string() } else { format!("missing runs: {}", missing.join(", ")) };
    svg.text(10.0, ly + 20.0 * authors.len() as f64, 10.0, "start", &note);
    Ok(svg.finish())
}

/// Native-baseline-subtracted loss heatmap; each cell carries its exact value.
fn heatmap(res: &ModeResults, stamp: &str) -> Option<String> {
    let m = res.summary.normalized_loss.as_ref()?;
    let authors = &res.summary.authors;
    let n = authors.len();
    let cell = 60.0;
    let left = 110.0;
    let top = 40.0;
    let mut svg = Svg::new(left + cell * n as f64 + 20.0, top + cell * n as f64 + 110.0).with_comment(stamp);
    let max = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let t = (v / max).clamp(-1.0, 1.0);
            // Blue for negative, red for positive.
            let (r, g, b) = if t >= 0.0 {
                (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
            } else {
                (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
            };
            let fill = format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8);
            let x = left + cell * j as f64;
            let y = top + cell * i as f64;
            svg.rect(x, y, cell, cell, &fill, &format!(r#" data-row="{}" data-col="{}" data-value="{v}""#, authors[i], authors[j]));
            svg.text(x + cell / 2.0, y + cell / 2.0 + 4.0, 10.0, "middle", &format!("{v:.3}"));
        }
    }
    for (k, a) in authors.iter().enumerate() {
        svg.text(left - 6.0, top + cell * k as f64 + cell / 2.0 + 4.0, 10.0, "end", a);
        svg.text(left + cell * k as f64 + cell / 2.0, top + cell * n as f64 + 16.0, 10.0, "middle", a);
    }
    svg.text(left, 20.0, 12.0, "start", "loss minus the model's native baseline");
    svg.text(left, top + cell * n as f64 + 40.0, 10.0, "start", "rows: held-out author; columns: model author");
    Some(svg.finish())
}

/// Orthographic view of the MDS coordinates from a fixed camera
/// (yaw 30°, pitch 20°).
fn mds_projection(res: &ModeResults, stamp: &str) -> Option<String> {
    let mds = res.summary.mds.as_ref()?;
    let (yaw, pitch) = (30f64.to_radians(), 20f64.to_radians());
    let pts: Vec<(f64, f64)> = mds
        .coords
        .iter()
        .map(|c| {
            let (x, y, z) = (c.first().copied().unwrap_or(0.0), c.get(1).copied().unwrap_or(0.0), c.get(2).copied().unwrap_or(0.0));
            let xr = x * yaw.cos() - y * yaw.sin();
            let yr = x * yaw.sin() + y * yaw.cos();
            (xr, z * pitch.cos() - yr * pitch.sin())
        })
        .collect();
    let (x0, x1) = extent(pts.iter().map(|p| p.0))?;
    let (y0, y1) = extent(pts.iter().map(|p| p.1))?;
    let size = 400.0;
    let sx = Scale::new(x0, x1, 40.0, size - 40.0);
    let sy = Scale::new(y0, y1, size - 40.0, 40.0);
    let mut svg = Svg::new(size, size + 30.0).with_comment(stamp);
    for (k, ((x, y), a)) in pts.iter().zip(&res.summary.authors).enumerate() {
        svg.circle(sx.map(*x), sy.map(*y), 5.0, color(k));
        svg.text(sx.map(*x) + 8.0, sy.map(*y) + 4.0, 10.0, "start", a);
    }
    svg.text(10.0, size + 15.0, 10.0, "start", &format!("stress {:.4}, {} dimension(s)", mds.stress, mds.effective_dim));
    Some(svg.finish())
}

/// One bar panel per special evaluation: seed-averaged loss per candidate.
fn attribution(res: &ModeResults, stamp: &str) -> String {
    let specials = &res.summary.special;
    let mut svg = Svg::new(PANEL_W * specials.len() as f64, PANEL_H + 20.0).with_comment(stamp);
    for (p, sp) in specials.iter().enumerate() {
        let ox = PANEL_W * p as f64;
        svg.text(ox + PANEL_W / 2.0, 16.0, 12.0, "middle", &sp.name);
        let Some((lo, hi)) = extent(sp.mean_losses.iter().map(|l| l.1)) else { continue };
        let sy = Scale::new(lo.min(0.0), hi, PANEL_H - MARGIN, 30.0);
        let w = (PANEL_W - MARGIN - 20.0) / sp.mean_losses.len() as f64;
        for (k, (c, l)) in sp.mean_losses.iter().enumerate() {
            let x = ox + MARGIN + w * k as f64 + 4.0;
            let y = sy.map(*l);
            svg.rect(x, y, w - 8.0, PANEL_H - MARGIN - y, color(k), "");
            svg.text(x + (w - 8.0) / 2.0, y - 4.0, 9.0, "middle", &format!("{l:.3}"));
            let label = if sp.winners.contains(c) { format!("{c} *") } else { c.clone() };
            svg.text(x + (w - 8.0) / 2.0, PANEL_H - MARGIN + 14.0, 10.0, "middle", &label);
        }
        if sp.ambiguous {
            svg.text(ox + PANEL_W / 2.0, PANEL_H + 10.0, 10.0, "middle", "ambiguous: tied minimum");
        }
    }
    svg.finish()
}
