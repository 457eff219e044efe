//! Masking coverage analysis, PCA color export and dataset generation.

use std::path::PathBuf;

use point2vec::data::{synthetic_dataset, write_dataset};
use point2vec::downstream::{eval_view, pca_rgb};
use point2vec::geometry::{fps_resample, tokenize};
use point2vec::numerics::Array;
use point2vec::pretraining::{generate_mask, mask_count, mask_coverage, point_tags, MaskCoverage};
use point2vec::{Checkpoint, ForwardCtx, MaskStrategy, PointEncoder, Result, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::finetune::initial_encoder;
use crate::output::{write_colored, write_json, TsvLog};
use crate::run::Run;

pub const MASK_HEADER: &str =
    "strategy\tratio\tmasked_tokens\tpoints\tmasked_only\tvisible_only\tboth\tuncovered";

pub const MASKED_ONLY_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const VISIBLE_ONLY_COLOR: [f64; 3] = [0.0, 0.0, 1.0];
pub const BOTH_COLOR: [f64; 3] = [1.0, 0.0, 1.0];
pub const UNCOVERED_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskRow {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub masked_tokens: usize,
    /// Totals over every analyzed sample.
    pub coverage: MaskCoverage,
    pub per_sample: Vec<MaskCoverage>,
}

impl MaskRow {
    pub fn tsv(&self) -> String {
        let c = &self.coverage;
        let strategy = match self.strategy {
            MaskStrategy::Random => "random",
            MaskStrategy::Block => "block",
        };
        format!(
            "{strategy}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.ratio,
            self.masked_tokens,
            c.points,
            c.fraction(c.masked_only),
            c.fraction(c.visible_only),
            c.fraction(c.both),
            c.fraction(c.uncovered)
        )
    }
}

/// For every configured strategy and ratio, tokenizes the first samples of
/// the dataset, masks them, and counts how input points fall under masked
/// and visible patches. The first few samples are also written as colored
/// point files.
pub fn analyze_mask(run: &Run) -> Result<Vec<MaskRow>> {
    let cfg = &run.config.analyze_mask;
    let dataset = run.dataset()?;
    let samples: Vec<_> = dataset.samples.iter().take(cfg.samples).collect();
    if samples.is_empty() {
        return Err(run.data_error("no samples to analyze"));
    }
    let mut clouds = Vec::with_capacity(samples.len());
    let mut sets = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let cloud = fps_resample(&s.cloud, cfg.points, run.seed.wrapping_add(i as u64))
            .map_err(|e| run.data_error(format!("sample {i}: {e}")))?;
        sets.push(tokenize(
            &cloud,
            cfg.centers,
            cfg.group_size,
            run.seed.wrapping_add(i as u64),
        )?);
        clouds.push(cloud);
    }
    let mut log = TsvLog::open(&run.path("mask_analysis.tsv"), MASK_HEADER)?;
    let mut rows = Vec::new();
    for &strategy in &cfg.strategies {
        for &ratio in &cfg.ratios {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            let mut total = MaskCoverage::default();
            let mut per_sample = Vec::with_capacity(sets.len());
            for (i, (cloud, set)) in clouds.iter().zip(&sets).enumerate() {
                let layout = generate_mask(&set.centers, strategy, ratio, &mut rng)?;
                let cov = mask_coverage(cloud.len(), &set.group_indices, set.group_size, &layout)?;
                if i < cfg.exports {
                    let colors: Vec<[f64; 3]> =
                        point_tags(cloud.len(), &set.group_indices, set.group_size, &layout)?
                            .into_iter()
                            .map(|t| match t {
                                (true, false) => MASKED_ONLY_COLOR,
                                (false, true) => VISIBLE_ONLY_COLOR,
                                (true, true) => BOTH_COLOR,
                                (false, false) => UNCOVERED_COLOR,
                            })
                            .collect();
                    let name = format!("mask_{}_{ratio}_{i:03}.xyz", strategy_name(strategy));
                    write_colored(&run.path(&name), &cloud.points, &colors)?;
                }
                total.merge(&cov);
                per_sample.push(cov);
            }
            let row = MaskRow {
                strategy,
                ratio,
                masked_tokens: mask_count(cfg.centers, ratio)?,
                coverage: total,
                per_sample,
            };
            log.row(row.tsv())?;
            rows.push(row);
        }
    }
    write_json(&run.path("mask_analysis.json"), &rows)?;
    Ok(rows)
}

fn strategy_name(s: MaskStrategy) -> &'static str {
    match s {
        MaskStrategy::Random => "random",
        MaskStrategy::Block => "block",
    }
}

/// Token features of the final encoder layer, `[n, E]` per cloud.
pub fn token_features(
    encoder: &PointEncoder<f32>,
    set: &point2vec::PatchSet,
) -> Result<Array<f64>> {
    let layers = encoder.forward(std::slice::from_ref(set), &mut ForwardCtx::eval())?;
    let out = encoder.encoder.norm.forward(layers.last())?;
    let e = encoder.config.dim();
    Array::new(vec![set.len(), e], out.to_array().cast::<f64>().into_data())
}

/// Writes one `x y z r g b` file per test shape (the first `count`), one
/// line per token center, colored by the top three principal components of
/// the token features.
pub fn export_pca(run: &Run, ckpt: Option<&Checkpoint>, count: usize) -> Result<Vec<PathBuf>> {
    let encoder = initial_encoder(run, ckpt)?;
    let dataset = run.dataset()?;
    let test = run.split(&dataset, Split::Test)?;
    let recipe = run.config.classification.recipe(ckpt.is_some());
    let mut written = Vec::new();
    for (i, s) in test.iter().take(count).enumerate() {
        let view = eval_view(&s.cloud, &recipe, i)?;
        let set = tokenize(&view, recipe.centers, recipe.group_size, i as u64)?;
        let colors = pca_rgb(&token_features(&encoder, &set)?)?;
        let path = run.path(&format!("pca_{i:04}.xyz"));
        write_colored(&path, &set.centers, &colors)?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the configured synthetic dataset under `run.out`; `seed`
/// replaces the generator seed when given.
pub fn gen_data(run: &Run, seed: Option<u64>) -> Result<PathBuf> {
    let mut spec = run.config.data.synthetic;
    if let Some(s) = seed {
        spec.seed = s;
    }
    write_dataset(&synthetic_dataset(&spec)?, &run.out)
}
