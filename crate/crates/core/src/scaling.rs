//! Closed-loop experiment harness and the model-size sweep.
//!
//! The loop: train the autoencoder on location profiles, embed a real corpus
//! day by day, fit the denoiser, sample a synthetic corpus for the same (or an
//! unseen) city, decode it and score it against the real corpus. The scaling
//! sweep repeats the denoiser-and-after part per preset and reports mean KS
//! against parameter count.

use std::path::Path;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autoencoder::{train_autoencoder, AeConfig, AutoencoderParams, TrainConfig};
use crate::codec::{dense_day, embed_day, location_embeddings, DaySequence, EmbeddingSequence, Trajectory};
use crate::diffusion::{
    ddim_generate, train_diffusion, DenoiserParams, DiffusionConfig, GenerationConfig,
    NoiseSchedule, StandardizationStats,
};
use crate::features::{FeatureTable, ODMatrix};
use crate::geo::CityGrid;
use crate::matcher::{build_embedding_index, decode_sequence};
use crate::metrics::{build_report, ReportDetail};
use crate::oracle::{derive_od, OdWindow};
use crate::rng::{stream, Domain};
use crate::{Error, Result};

/// Every knob of one closed-loop run.
#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub ae_cfg: AeConfig,
    pub ae_train: TrainConfig,
    pub model: DiffusionConfig,
    pub diff_train: TrainConfig,
    pub schedule: NoiseSchedule,
    /// Collaborative-prior mix weight at generation time.
    pub lambda: f64,
    /// Fraction of the embedded day sequences the denoiser trains on; the
    /// corpus is highly redundant, so a subsample buys a lot of wall time.
    pub train_fraction: f64,
    /// Generated users (one sample per user per day label).
    pub users: usize,
    pub gen_seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            ae_cfg: AeConfig::default(),
            ae_train: TrainConfig::default(),
            model: DiffusionConfig::default(),
            diff_train: TrainConfig { lr: 1e-3, batch: 32, epochs: 30, seed: 0 },
            schedule: NoiseSchedule::default(),
            lambda: 0.5,
            train_fraction: 0.25,
            users: 2000,
            gen_seed: 0,
        }
    }
}

/// Trained pieces shared by generation targets.
#[derive(Debug, Clone)]
pub struct TrainedStack {
    pub ae: AutoencoderParams,
    pub params: DenoiserParams,
    pub stats: StandardizationStats,
}

/// Embed every trajectory of a corpus with the given per-location embeddings.
pub fn embed_corpus(
    trajs: &[Trajectory],
    loc_emb: &ArrayView2<f64>,
) -> Result<Vec<EmbeddingSequence>> {
    let mut out = Vec::with_capacity(trajs.len());
    for t in trajs {
        let Some(locations) = dense_day(t) else { continue };
        let day = DaySequence { locations, day_of_week: t.day_of_week };
        out.push(embed_day(&day, loc_emb)?);
    }
    if out.is_empty() {
        return Err(Error::data("no non-empty trajectories to embed"));
    }
    Ok(out)
}

/// Deterministic subsample (without replacement) of the training sequences.
fn subsample(seqs: Vec<EmbeddingSequence>, fraction: f64, seed: u64) -> Vec<EmbeddingSequence> {
    let keep = ((seqs.len() as f64 * fraction).round() as usize).clamp(1, seqs.len());
    if keep == seqs.len() {
        return seqs;
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    // offset the stream index far past any epoch counter
    order.shuffle(&mut stream(seed, Domain::DiffusionTrain, 1 << 40));
    let mut keep_flag = vec![false; seqs.len()];
    for &i in &order[..keep] {
        keep_flag[i] = true;
    }
    seqs.into_iter().zip(keep_flag).filter_map(|(s, k)| k.then_some(s)).collect()
}

/// Train the autoencoder on one or more cities and the denoiser on their
/// pooled embedded corpora. Each corpus embeds through its own city's table.
pub fn train_stack(
    tables: &[&FeatureTable],
    corpora: &[&[Trajectory]],
    cfg: &LoopConfig,
) -> Result<TrainedStack> {
    if tables.len() != corpora.len() || tables.is_empty() {
        return Err(Error::data("train_stack needs one corpus per feature table"));
    }
    let (ae, _) = train_autoencoder(tables, &cfg.ae_cfg, &cfg.ae_train)?;
    let mut seqs = Vec::new();
    for (table, trajs) in tables.iter().zip(corpora) {
        let emb = location_embeddings(&ae, table);
        seqs.extend(embed_corpus(trajs, &emb.view())?);
    }
    let seqs = subsample(seqs, cfg.train_fraction, cfg.diff_train.seed);
    let (params, stats, _) = train_diffusion(&seqs, &cfg.schedule, &cfg.model, &cfg.diff_train)?;
    Ok(TrainedStack { ae, params, stats })
}

/// Sample `users` synthetic users for each day label and decode them.
///
/// User `i` keeps one collaborative anchor across all days (same generation
/// seed), so a pooled week behaves like one person with a home.
pub fn generate_corpus(
    stack: &TrainedStack,
    table: &FeatureTable,
    schedule: &NoiseSchedule,
    od: &ODMatrix,
    users: usize,
    days: &[u8],
    lambda: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let loc_emb = location_embeddings(&stack.ae, table);
    let idx = build_embedding_index(table, &stack.ae, &stack.stats)?;
    let mut out = Vec::with_capacity(users * days.len());
    for &d in days {
        let cfg = GenerationConfig {
            n_samples: users,
            day_of_week: d,
            lambda,
            seed,
            population_ratio: 0.0,
        };
        let seqs = ddim_generate(&stack.params, &stack.stats, schedule, &cfg, od, &loc_emb.view())?;
        for (i, y) in seqs.iter().enumerate() {
            let mut t = decode_sequence(&idx, y, 0)?;
            t.user_id = format!("s{i:05}_d{d}");
            out.push(t);
        }
    }
    Ok(out)
}

/// Day labels present in a corpus, ascending.
pub fn day_labels(trajs: &[Trajectory]) -> Vec<u8> {
    let mut days: Vec<u8> = trajs.iter().map(|t| t.day_of_week).collect();
    days.sort_unstable();
    days.dedup();
    days
}

/// Full in-sample loop for one city: train on the corpus, generate an
/// equal-shape corpus, score synthetic against real.
pub fn run_closed_loop(
    grid: &CityGrid,
    table: &FeatureTable,
    real: &[Trajectory],
    od_real: &ODMatrix,
    cfg: &LoopConfig,
) -> Result<(TrainedStack, Vec<Trajectory>, ReportDetail)> {
    let stack = train_stack(&[table], &[real], cfg)?;
    let days = day_labels(real);
    let synth =
        generate_corpus(&stack, table, &cfg.schedule, od_real, cfg.users, &days, cfg.lambda, cfg.gen_seed)?;
    let od_synth = derive_od(&synth, grid.len(), OdWindow::All)?;
    let detail = build_report(grid, real, &synth, od_real, &od_synth)?;
    Ok((stack, synth, detail))
}

/// One row of the model-size table.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub preset: String,
    pub params: usize,
    pub mean_ks: f64,
}

/// Mean of the four distributional KS columns.
pub fn mean_ks(detail: &ReportDetail) -> f64 {
    let r = &detail.report;
    (r.radius.ks + r.distance.ks + r.duration.ks + r.daily_loc.ks) / 4.0
}

/// Sweep model presets over the same corpus and budget. The autoencoder and
/// the embedded corpus are shared; only the denoiser is retrained.
pub fn run_scaling(
    grid: &CityGrid,
    table: &FeatureTable,
    real: &[Trajectory],
    od_real: &ODMatrix,
    cfg: &LoopConfig,
    presets: &[&str],
) -> Result<Vec<ScalingRow>> {
    let (ae, _) = train_autoencoder(&[table], &cfg.ae_cfg, &cfg.ae_train)?;
    let emb = location_embeddings(&ae, table);
    let all = embed_corpus(real, &emb.view())?;
    let seqs = subsample(all, cfg.train_fraction, cfg.diff_train.seed);
    let days = day_labels(real);

    let mut rows = Vec::with_capacity(presets.len());
    for name in presets {
        let model = DiffusionConfig::preset(name, cfg.model.seed)?;
        let (params, stats, _) = train_diffusion(&seqs, &cfg.schedule, &model, &cfg.diff_train)?;
        let stack = TrainedStack { ae: ae.clone(), params, stats };
        let synth = generate_corpus(
            &stack,
            table,
            &cfg.schedule,
            od_real,
            cfg.users,
            &days,
            cfg.lambda,
            cfg.gen_seed,
        )?;
        let od_synth = derive_od(&synth, grid.len(), OdWindow::All)?;
        let detail = build_report(grid, real, &synth, od_real, &od_synth)?;
        rows.push(ScalingRow {
            preset: name.to_string(),
            params: stack.params.n_params(),
            mean_ks: mean_ks(&detail),
        });
        log::info!("scaling: {name} ({} params) mean KS {:.4}", rows.last().unwrap().params, rows.last().unwrap().mean_ks);
    }
    Ok(rows)
}

/// `preset,params,mean_ks` with 4-decimal KS.
pub fn write_scaling_csv(path: &Path, rows: &[ScalingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    w.write_record(["preset", "params", "mean_ks"]).map_err(|e| Error::data(e.to_string()))?;
    for r in rows {
        w.write_record([r.preset.clone(), r.params.to_string(), format!("{:.4}", r.mean_ks)])
            .map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_is_deterministic_and_sized() {
        let seqs: Vec<EmbeddingSequence> = (0..40)
            .map(|i| EmbeddingSequence {
                x: ndarray::Array2::from_elem((crate::SLOT_COUNT, crate::EMBED_DIM), i as f64),
                day_of_week: (i % 7) as u8,
            })
            .collect();
        let a = subsample(seqs.clone(), 0.25, 7);
        let b = subsample(seqs.clone(), 0.25, 7);
        assert_eq!(a.len(), 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x, y.x);
        }
        let c = subsample(seqs.clone(), 1.0, 7);
        assert_eq!(c.len(), 40);
        let d = subsample(seqs, 0.0, 7);
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn day_labels_sorted_unique() {
        let t = |d| Trajectory { user_id: format!("u_{d}"), tokens: vec![(0, 0)], day_of_week: d };
        assert_eq!(day_labels(&[t(3), t(0), t(3), t(6)]), vec![0, 3, 6]);
    }

    #[test]
    fn scaling_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaling.csv");
        let rows = vec![
            ScalingRow { preset: "small".into(), params: 710171, mean_ks: 0.21 },
            ScalingRow { preset: "medium".into(), params: 4010000, mean_ks: 0.19 },
        ];
        write_scaling_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("preset,params,mean_ks"));
        assert_eq!(lines.next(), Some("small,710171,0.2100"));
        assert_eq!(lines.next(), Some("medium,4010000,0.1900"));
    }
}
