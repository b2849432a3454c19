//! Embedding-table training: the desk-scale stand-in for backbone training.
//!
//! The trainable surface is a free unit-norm vector per image. Each
//! iteration draws six sub-batches, computes the multi-similarity loss per
//! sub-batch, accumulates gradients either one sub-batch at a time
//! (bounding transient memory) or fused (all sub-batch workspaces live at
//! once), then applies one decoupled-weight-decay adaptive update followed
//! by re-normalization of the embeddings.

mod memory;

use std::collections::HashMap;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::batch::{BatchSource, SubBatch, TrainingIteration};
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::knn::{self, DescriptorStore};
use crate::metrics::{recall_at_k, VprGroundTruth, VPR_POSITIVE_THRESHOLD};
use crate::msloss::{mine_pairs, ms_loss_and_grad_given_pairs, MsParams};
use crate::rng::{rng_for, streams};
use crate::samplers::{CliqueBatchPlan, SamplerSettings, SamplingContext};
use crate::worldgen::{query_database_split, World};

pub use memory::{AllocGuard, BufferAccountant, MemoryReport};

/// Memory budget used for the periodic in-training retrieval evaluation.
const EVAL_MEMORY_BUDGET: u64 = 256 << 20;

/// How gradients of the six sub-batch losses are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumulationMode {
    /// All sub-batch workspaces are held live until one combined backward
    /// completes; peak transient memory scales with the sub-batch count.
    Fused,
    /// One sub-batch backward at a time, each workspace released before the
    /// next; the accumulated gradient is identical to fused mode.
    PerSubBatch,
}

/// Adaptive-moment hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Full training configuration. Defaults are the desk-scale setup: 64-dim
/// embeddings, 500 iterations, lr 1e-2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub ms_params: MsParams,
    pub seed: u64,
    pub accumulation_mode: AccumulationMode,
    pub embed_dim: usize,
    pub adam: AdamParams,
    pub sampler: SamplerSettings,
    /// Evaluate recall@1 every this many iterations (0 = start and end only).
    pub eval_every: usize,
    /// Held-out queries per scene for the periodic evaluation.
    pub queries_per_scene: usize,
    /// Sources to draw each iteration; all six by default. Ablations may
    /// train on a subset.
    pub enabled_sources: Vec<BatchSource>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ms_params: MsParams::default(),
            seed: 0,
            accumulation_mode: AccumulationMode::PerSubBatch,
            embed_dim: 64,
            adam: AdamParams::default(),
            sampler: SamplerSettings::default(),
            eval_every: 100,
            queries_per_scene: 1,
            enabled_sources: BatchSource::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidInput("embed_dim must be positive".into()));
        }
        if self.queries_per_scene == 0 {
            return Err(Error::InvalidInput(
                "queries_per_scene must be positive".into(),
            ));
        }
        if self.enabled_sources.is_empty() {
            return Err(Error::InvalidInput(
                "enabled_sources must not be empty".into(),
            ));
        }
        let mut seen = self.enabled_sources.clone();
        seen.sort_by_key(|s| s.as_str());
        seen.dedup();
        if seen.len() != self.enabled_sources.len() {
            return Err(Error::InvalidInput(
                "enabled_sources contains duplicates".into(),
            ));
        }
        self.ms_params.validate()?;
        self.sampler.validate()?;
        Ok(())
    }

    /// Stable FNV-1a hash of the serialized config; stored in checkpoints so
    /// a resumed run can detect config drift.
    pub fn content_hash(&self) -> u64 {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for byte in text.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        hash
    }
}

/// Learnable per-image embeddings plus first/second-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    ids: Vec<u64>,
    index: HashMap<u64, usize>,
    embeddings: Array2<f64>,
    first_moment: Array2<f64>,
    second_moment: Array2<f64>,
    step: u64,
}

impl EmbeddingTable {
    /// Seeded random unit-norm initialization.
    pub fn random_unit(mut ids: Vec<u64>, dim: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dim must be positive".into()));
        }
        ids.sort_unstable();
        let mut rng = rng_for(seed, streams::TABLE_INIT, 0);
        let n = ids.len();
        let mut embeddings = Array2::<f64>::zeros((n, dim));
        for i in 0..n {
            loop {
                let mut norm2 = 0.0;
                for d in 0..dim {
                    let v = rng.random::<f64>() * 2.0 - 1.0;
                    embeddings[(i, d)] = v;
                    norm2 += v * v;
                }
                if norm2 > 1e-12 {
                    let norm = norm2.sqrt();
                    for d in 0..dim {
                        embeddings[(i, d)] /= norm;
                    }
                    break;
                }
            }
        }
        let first = Array2::zeros((n, dim));
        let second = Array2::zeros((n, dim));
        Self::from_parts(ids, embeddings, first, second, 0)
    }

    /// Reassembles a table (e.g. from a checkpoint).
    pub fn from_parts(
        ids: Vec<u64>,
        embeddings: Array2<f64>,
        first_moment: Array2<f64>,
        second_moment: Array2<f64>,
        step: u64,
    ) -> Result<Self> {
        let n = ids.len();
        if embeddings.nrows() != n
            || first_moment.dim() != embeddings.dim()
            || second_moment.dim() != embeddings.dim()
        {
            return Err(Error::InvalidInput(
                "embedding/optimizer state shapes do not match".into(),
            ));
        }
        if embeddings.iter().any(|v| !v.is_finite())
            || first_moment.iter().any(|v| !v.is_finite())
            || second_moment.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "table state must be finite".into(),
            ));
        }
        let mut index = HashMap::with_capacity(n);
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate table id {id}")));
            }
        }
        Ok(Self {
            ids,
            index,
            embeddings,
            first_moment,
            second_moment,
            step,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn moments(&self) -> (&Array2<f64>, &Array2<f64>) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn row_of(&self, id: u64) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("image {id} not in embedding table")))
    }

    pub fn embedding(&self, id: u64) -> Result<ArrayView1<'_, f64>> {
        Ok(self.embeddings.row(self.row_of(id)?))
    }

    /// Rows for the given ids, cloned into a dense batch matrix.
    pub fn gather(&self, ids: &[u64]) -> Result<Array2<f64>> {
        let rows = ids
            .iter()
            .map(|&id| self.row_of(id))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.gather_rows(&rows))
    }

    fn gather_rows(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (local, &row) in rows.iter().enumerate() {
            out.row_mut(local).assign(&self.embeddings.row(row));
        }
        out
    }

    /// Projects every row back to unit norm. Rows already within 1e-13 of
    /// unit norm are left untouched so that no-op optimizer steps keep the
    /// table bit-identical.
    pub fn renormalize(&mut self) {
        for mut row in self.embeddings.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > 1e-13 {
                row.mapv_inplace(|v| v / norm);
            }
        }
    }

    /// Embeddings as f32 descriptors (in id order), for evaluation/export.
    pub fn to_descriptors(&self) -> Result<Vec<Descriptor>> {
        self.embeddings
            .rows()
            .into_iter()
            .map(|row| Descriptor::from_raw(row.iter().map(|&v| v as f32).collect()))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn moments_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        (&mut self.first_moment, &mut self.second_moment)
    }
}

/// Result of one gradient accumulation pass.
#[derive(Debug)]
pub struct AccumulationOutput {
    /// Gradient aligned with the table's rows (zeros for untouched images).
    pub gradient: Array2<f64>,
    pub total_loss: f64,
    pub per_sub_batch_loss: Vec<f64>,
    pub memory: MemoryReport,
}

/// One sub-batch's backward workspace. In fused mode every workspace stays
/// live until the combined accumulation; in per-sub-batch mode each is
/// dropped before the next sub-batch starts.
struct Workspace<'a> {
    rows: Vec<usize>,
    local_grad: Array2<f64>,
    // Held so the dense intermediates stay both allocated and accounted.
    _embeddings: Array2<f64>,
    _similarity: Array2<f64>,
    _guards: Vec<AllocGuard<'a>>,
}

fn sub_batch_backward<'a>(
    sub_batch: &SubBatch,
    table: &EmbeddingTable,
    params: &MsParams,
    accountant: &'a BufferAccountant,
) -> Result<(f64, Workspace<'a>)> {
    let ids: Vec<u64> = sub_batch.image_ids().collect();
    let rows = ids
        .iter()
        .map(|&id| table.row_of(id))
        .collect::<Result<Vec<_>>>()?;
    let b = rows.len();
    let dim = table.dim();

    let embeddings = table.gather_rows(&rows);
    let g_embed = accountant.track((b * dim * 8) as u64);
    let similarity = embeddings.dot(&embeddings.t());
    let g_sim = accountant.track((b * b * 8) as u64);
    let labels = sub_batch.labels();
    let pairs = mine_pairs(similarity.view(), &labels, params)?;
    let (loss, local_grad) =
        ms_loss_and_grad_given_pairs(embeddings.view(), similarity.view(), &pairs, params)?;
    let g_grad = accountant.track((b * dim * 8) as u64);

    Ok((
        loss,
        Workspace {
            rows,
            local_grad,
            _embeddings: embeddings,
            _similarity: similarity,
            _guards: vec![g_embed, g_sim, g_grad],
        },
    ))
}

fn scatter_add(gradient: &mut Array2<f64>, workspace: &Workspace<'_>) {
    for (local, &row) in workspace.rows.iter().enumerate() {
        for d in 0..gradient.ncols() {
            gradient[(row, d)] += workspace.local_grad[(local, d)];
        }
    }
}

/// Backward over an ordered list of sub-batches. Both modes perform the
/// identical float operations in the identical order; they differ only in
/// workspace lifetime, so the accumulated gradients match exactly.
pub fn accumulate_sub_batches(
    sub_batches: &[SubBatch],
    table: &EmbeddingTable,
    params: &MsParams,
    mode: AccumulationMode,
) -> Result<AccumulationOutput> {
    let accountant = BufferAccountant::new();
    let mut gradient = Array2::<f64>::zeros((table.len(), table.dim()));
    let mut per_sub_batch_loss = Vec::with_capacity(sub_batches.len());

    match mode {
        AccumulationMode::PerSubBatch => {
            for sb in sub_batches {
                let (loss, workspace) = sub_batch_backward(sb, table, params, &accountant)?;
                per_sub_batch_loss.push(loss);
                scatter_add(&mut gradient, &workspace);
            }
        }
        AccumulationMode::Fused => {
            let mut workspaces = Vec::with_capacity(sub_batches.len());
            for sb in sub_batches {
                let (loss, workspace) = sub_batch_backward(sb, table, params, &accountant)?;
                per_sub_batch_loss.push(loss);
                workspaces.push(workspace);
            }
            for workspace in &workspaces {
                scatter_add(&mut gradient, workspace);
            }
        }
    }

    Ok(AccumulationOutput {
        gradient,
        total_loss: per_sub_batch_loss.iter().sum(),
        per_sub_batch_loss,
        memory: MemoryReport {
            peak_transient_bytes: accountant.peak_bytes(),
        },
    })
}

/// Gradient accumulation over a full six-sub-batch iteration, with the
/// instrumented peak-working-set report.
pub fn accumulate_gradients(
    iteration: &TrainingIteration,
    table: &EmbeddingTable,
    params: &MsParams,
    mode: AccumulationMode,
) -> Result<AccumulationOutput> {
    accumulate_sub_batches(iteration.sub_batches(), table, params, mode)
}

/// One decoupled-weight-decay adaptive update with bias correction, applied
/// to every parameter. Clears nothing: the caller owns the accumulator and
/// drops/zeroes it after the step.
pub fn optimizer_step(
    table: &mut EmbeddingTable,
    gradient: &ArrayView2<'_, f64>,
    config: &TrainConfig,
    iteration: usize,
) -> Result<()> {
    if gradient.dim() != table.embeddings.dim() {
        return Err(Error::InvalidInput(format!(
            "gradient shape {:?} does not match table shape {:?}",
            gradient.dim(),
            table.embeddings.dim()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::TrainingDivergence {
            iteration,
            reason: "non-finite gradient".into(),
        });
    }

    let t = table.step + 1;
    let beta1 = config.adam.beta1;
    let beta2 = config.adam.beta2;
    let bias1 = 1.0 - beta1.powi(t as i32);
    let bias2 = 1.0 - beta2.powi(t as i32);
    let lr = config.learning_rate;
    let wd = config.weight_decay;

    for ((i, d), &g) in gradient.indexed_iter() {
        let m = &mut table.first_moment[(i, d)];
        *m = beta1 * *m + (1.0 - beta1) * g;
        let v = &mut table.second_moment[(i, d)];
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        let p = &mut table.embeddings[(i, d)];
        *p -= lr * wd * *p + lr * m_hat / (v_hat.sqrt() + config.adam.epsilon);
    }
    table.step = t;

    if table.embeddings.iter().any(|p| !p.is_finite()) {
        return Err(Error::TrainingDivergence {
            iteration,
            reason: "non-finite parameters after update".into(),
        });
    }
    Ok(())
}

/// Loss record for one training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub total_loss: f64,
    pub per_source: Vec<(BatchSource, f64)>,
}

/// A periodic retrieval evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub iteration: usize,
    pub recall_at_1: f64,
    pub excluded_queries: usize,
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainOutcome {
    pub table: EmbeddingTable,
    pub history: Vec<IterationStats>,
    pub evals: Vec<EvalPoint>,
}

/// Recall@1 of the current table embeddings: the held-out queries search
/// the remaining images, a hit being a neighbor within the standard
/// positive radius.
pub fn evaluate_recall1(
    table: &EmbeddingTable,
    world: &World,
    query_ids: &[u64],
    database_ids: &[u64],
) -> Result<(f64, usize)> {
    let descriptor_of = |id: u64| -> Result<Descriptor> {
        let row = table.embedding(id)?;
        Descriptor::from_raw(row.iter().map(|&v| v as f32).collect())
    };
    let db: Vec<Descriptor> = database_ids
        .iter()
        .map(|&id| descriptor_of(id))
        .collect::<Result<_>>()?;
    let queries: Vec<Descriptor> = query_ids
        .iter()
        .map(|&id| descriptor_of(id))
        .collect::<Result<_>>()?;
    let store = DescriptorStore::from_descriptors(&db)?;
    let output = knn::search(&store, &queries, 1, EVAL_MEMORY_BUDGET)?;

    let pose_of = |id: u64| -> Result<_> {
        world
            .record(id)
            .map(|r| r.pose)
            .ok_or_else(|| Error::NotFound(format!("image {id}")))
    };
    let gt = VprGroundTruth::new(
        query_ids.iter().map(|&id| pose_of(id)).collect::<Result<_>>()?,
        database_ids
            .iter()
            .map(|&id| pose_of(id))
            .collect::<Result<_>>()?,
        VPR_POSITIVE_THRESHOLD,
    )?;
    let report = recall_at_k(&output.result, &gt, &[1])?;
    Ok((report.recalls[&1], report.excluded_queries))
}

/// Runs the full training loop on a synthetic world.
///
/// Deterministic given the config seed: sampling, initialization, and the
/// update sequence all derive from it. The history records total and
/// per-source losses every iteration; evaluations run before the first
/// update, every `eval_every` iterations, and after the last one.
pub fn train(world: &World, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ids: Vec<u64> = world.images().iter().map(|r| r.id).collect();
    let mut table = EmbeddingTable::random_unit(ids, config.embed_dim, config.seed)?;
    let context = SamplingContext::build(world, &config.sampler)?;
    let (query_ids, database_ids) = query_database_split(world, config.queries_per_scene);

    let sources: Vec<BatchSource> = BatchSource::ALL
        .iter()
        .copied()
        .filter(|s| config.enabled_sources.contains(s))
        .collect();
    let wants_cliques = sources.contains(&BatchSource::Msls);

    let mut evals = Vec::new();
    let (recall0, excluded) = evaluate_recall1(&table, world, &query_ids, &database_ids)?;
    evals.push(EvalPoint {
        iteration: 0,
        recall_at_1: recall0,
        excluded_queries: excluded,
    });

    let mut plan: Option<CliqueBatchPlan> = None;
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        if wants_cliques
            && (plan.is_none() || iteration % config.sampler.clique_refresh_every == 0)
        {
            plan = Some(context.build_clique_plan(&table)?);
        }

        let mut sub_batches = Vec::with_capacity(sources.len());
        for source in &sources {
            let stream_index = (iteration as u64) * BatchSource::ALL.len() as u64
                + BatchSource::ALL.iter().position(|s| s == source).unwrap() as u64;
            let mut rng = rng_for(config.seed, streams::SAMPLER, stream_index);
            let sb = context.sample(*source, plan.as_ref(), &mut rng)?;
            sub_batches.push(sb);
        }

        let output = accumulate_sub_batches(
            &sub_batches,
            &table,
            &config.ms_params,
            config.accumulation_mode,
        )?;
        optimizer_step(&mut table, &output.gradient.view(), config, iteration)?;
        table.renormalize();

        history.push(IterationStats {
            iteration,
            total_loss: output.total_loss,
            per_source: sources
                .iter()
                .copied()
                .zip(output.per_sub_batch_loss.iter().copied())
                .collect(),
        });

        let done = iteration + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done != config.iterations {
            let (recall, excluded) = evaluate_recall1(&table, world, &query_ids, &database_ids)?;
            evals.push(EvalPoint {
                iteration: done,
                recall_at_1: recall,
                excluded_queries: excluded,
            });
        }
    }

    let (recall, excluded) = evaluate_recall1(&table, world, &query_ids, &database_ids)?;
    evals.push(EvalPoint {
        iteration: config.iterations,
        recall_at_1: recall,
        excluded_queries: excluded,
    });

    Ok(TrainOutcome {
        table,
        history,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::tests_support::make_iteration;
    use crate::worldgen::{generate_world, WorldConfig};
    use ndarray::array;

    fn test_world() -> World {
        generate_world(&WorldConfig {
            n_places: 40,
            images_per_place: 8,
            area_side: 1500.0,
            embed_dim: 16,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn table_for(iteration: &TrainingIteration, dim: usize, seed: u64) -> EmbeddingTable {
        let mut ids: Vec<u64> = iteration
            .sub_batches()
            .iter()
            .flat_map(|sb| sb.image_ids())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        EmbeddingTable::random_unit(ids, dim, seed).unwrap()
    }

    #[test]
    fn per_sub_batch_equals_fused_exactly() {
        let iteration = make_iteration(0);
        let table = table_for(&iteration, 16, 1);
        let params = MsParams::default();
        let per = accumulate_gradients(&iteration, &table, &params, AccumulationMode::PerSubBatch)
            .unwrap();
        let fused =
            accumulate_gradients(&iteration, &table, &params, AccumulationMode::Fused).unwrap();
        let max_diff = per
            .gradient
            .iter()
            .zip(fused.gradient.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
        assert_eq!(per.total_loss, fused.total_loss);
    }

    #[test]
    fn fused_uses_six_times_the_transient_memory() {
        let iteration = make_iteration(1);
        let table = table_for(&iteration, 16, 2);
        let params = MsParams::default();
        let per = accumulate_gradients(&iteration, &table, &params, AccumulationMode::PerSubBatch)
            .unwrap();
        let fused =
            accumulate_gradients(&iteration, &table, &params, AccumulationMode::Fused).unwrap();
        let ratio =
            fused.memory.peak_transient_bytes as f64 / per.memory.peak_transient_bytes as f64;
        assert!((ratio - 6.0).abs() <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn image_in_two_sub_batches_accumulates_both_contributions() {
        let iteration = make_iteration(2);
        let table = table_for(&iteration, 8, 3);
        let params = MsParams::default();

        // The synthetic iteration reuses ids across sub-batches by
        // construction; verify at least one does, then compare the summed
        // gradient against isolated per-sub-batch gradients.
        let all = accumulate_gradients(&iteration, &table, &params, AccumulationMode::PerSubBatch)
            .unwrap();
        let mut expected = Array2::<f64>::zeros((table.len(), table.dim()));
        for sb in iteration.sub_batches() {
            let single =
                accumulate_sub_batches(std::slice::from_ref(sb), &table, &params, AccumulationMode::PerSubBatch)
                    .unwrap();
            expected += &single.gradient;
        }
        let max_diff = all
            .gradient
            .iter()
            .zip(expected.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff <= 1e-12, "max diff {max_diff}");
    }

    #[test]
    fn missing_id_is_not_found() {
        let iteration = make_iteration(3);
        let table = EmbeddingTable::random_unit(vec![1, 2, 3], 8, 0).unwrap();
        assert!(matches!(
            accumulate_gradients(
                &iteration,
                &table,
                &MsParams::default(),
                AccumulationMode::PerSubBatch
            ),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut table = EmbeddingTable::random_unit(vec![0, 1, 2], 8, 7).unwrap();
        let before = table.embeddings().clone();
        let gradient = Array2::<f64>::zeros((3, 8));
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        optimizer_step(&mut table, &gradient.view(), &config, 0).unwrap();
        assert_eq!(table.embeddings(), &before);
        assert_eq!(table.step(), 1);
    }

    #[test]
    fn single_step_matches_closed_form() {
        // Constant gradient from zero state: the update direction is
        // -sign(g) * lr / (1 + eps/|g|), per the bias-corrected formulas.
        let mut table = EmbeddingTable::random_unit(vec![0], 4, 9).unwrap();
        let before = table.embeddings().clone();
        let g = array![[0.5, -0.25, 1.5, -2.0]];
        let config = TrainConfig {
            learning_rate: 1e-2,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        optimizer_step(&mut table, &g.view(), &config, 0).unwrap();
        for d in 0..4 {
            let grad = g[(0, d)];
            let expected = before[(0, d)]
                - config.learning_rate * grad / (grad.abs() + config.adam.epsilon);
            assert!((table.embeddings()[(0, d)] - expected).abs() <= 1e-15);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut table = EmbeddingTable::random_unit(vec![0, 1], 4, 11).unwrap();
        let before = table.embeddings().clone();
        let gradient = Array2::<f64>::zeros((2, 4));
        let config = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        optimizer_step(&mut table, &gradient.view(), &config, 0).unwrap();
        let factor = 1.0 - 0.1 * 0.5;
        for (a, b) in table.embeddings().iter().zip(before.iter()) {
            assert!((a - b * factor).abs() <= 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_reports_divergence_with_iteration() {
        let mut table = EmbeddingTable::random_unit(vec![0], 2, 0).unwrap();
        let gradient = array![[f64::NAN, 0.0]];
        let err = optimizer_step(&mut table, &gradient.view(), &TrainConfig::default(), 17)
            .unwrap_err();
        match err {
            Error::TrainingDivergence { iteration, .. } => assert_eq!(iteration, 17),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_learning_rate_training_is_identity() {
        let world = test_world();
        let config = TrainConfig {
            iterations: 3,
            learning_rate: 0.0,
            embed_dim: 16,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let ids: Vec<u64> = world.images().iter().map(|r| r.id).collect();
        let initial = EmbeddingTable::random_unit(ids, config.embed_dim, config.seed).unwrap();
        let outcome = train(&world, &config).unwrap();
        assert_eq!(outcome.table.embeddings(), initial.embeddings());
        // Frozen table + frozen sampler seeds: loss history is constant.
        for stats in &outcome.history {
            assert_eq!(stats.total_loss, outcome.history[0].total_loss);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let world = test_world();
        let config = TrainConfig {
            iterations: 5,
            embed_dim: 16,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let a = train(&world, &config).unwrap();
        let b = train(&world, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.table.embeddings(), b.table.embeddings());
        assert_eq!(a.evals, b.evals);
    }

    #[test]
    fn training_improves_recall() {
        let world = test_world();
        let config = TrainConfig {
            iterations: 60,
            embed_dim: 16,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let outcome = train(&world, &config).unwrap();
        let first = outcome.evals.first().unwrap();
        let last = outcome.evals.last().unwrap();
        assert!(
            last.recall_at_1 > first.recall_at_1,
            "recall did not improve: {} -> {}",
            first.recall_at_1,
            last.recall_at_1
        );
    }

    #[test]
    fn table_gather_and_renormalize() {
        let mut table = EmbeddingTable::random_unit(vec![3, 1, 2], 4, 0).unwrap();
        assert_eq!(table.ids(), &[1, 2, 3]);
        let gathered = table.gather(&[2, 2, 3]).unwrap();
        assert_eq!(gathered.nrows(), 3);
        assert!(table.gather(&[99]).is_err());

        table.embeddings.row_mut(0).mapv_inplace(|v| v * 3.0);
        table.renormalize();
        let norm = table.embeddings.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }
}
