//! A small deterministic decoder-only transformer with an explicit KV cache.
//!
//! Pre-norm residual blocks (RMS norm, no biases), multi-head causal
//! attention, SiLU MLP. Sinusoidal positions are added at the input and are
//! keyed by each token's original position id, so pruned sequences keep their
//! temporal geometry. All weights come from one [`Rng64`] seed.

use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::io::{RunConfig, TextEmbedding, DEFAULT_VOCAB};
use crate::par;
use crate::rng::Rng64;
use crate::schedule::{
    select_at_boundary, token_importance, AttentionMaps, Group, GroupCounts, KvKeepMask, PruneSchedule, ScheduleError,
};
use crate::tensor::{argmax, dot, softmax_row, vec_mat};
use crate::vision::TokenStream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("heads ({heads}) must divide d_model ({d_model})")]
    HeadsDoNotDivide { heads: usize, d_model: usize },
    #[error("model dimensions must be positive")]
    ZeroDimension,
    #[error("visual tokens have dim {got}, projector expects {expected}")]
    VisualDim { expected: usize, got: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("prompt needs at least one text token")]
    NoText,
    #[error("decode needs at least one step")]
    NoSteps,
    #[error("schedule covers {schedule} layers, model has {model}")]
    LayerMismatch { schedule: usize, model: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub mlp_ratio: usize,
    pub vocab: usize,
    /// Embedding dim of incoming visual tokens.
    pub visual_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, visual_dim: usize) -> Self {
        Self {
            layers: cfg.layers,
            heads: cfg.heads,
            d_model: cfg.d_model,
            mlp_ratio: cfg.mlp_ratio,
            vocab: DEFAULT_VOCAB as usize,
            visual_dim,
            seed: cfg.seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}

struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    w_in: Vec<f64>,
    w_out: Vec<f64>,
}

pub struct ToyModel {
    cfg: ModelConfig,
    layers: Vec<LayerWeights>,
    embed: Vec<f64>,
    unembed: Vec<f64>,
    projector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Text,
    Generated,
}

/// The concatenated prompt `[visual; text]` ready for prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillInput {
    d_model: usize,
    hidden: Vec<f64>,
    positions: Vec<usize>,
    modality: Vec<Modality>,
    groups: Vec<Option<Group>>,
}

impl PrefillInput {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn groups(&self) -> &[Option<Group>] {
        &self.groups
    }

    pub fn text_len(&self) -> usize {
        self.modality.iter().filter(|m| **m == Modality::Text).count()
    }

    pub fn visual_counts(&self) -> GroupCounts {
        let key = self.groups.iter().filter(|g| **g == Some(Group::Key)).count();
        let non_key = self.groups.iter().filter(|g| **g == Some(Group::NonKey)).count();
        GroupCounts { key, non_key }
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.select(Modality::Text)
    }

    pub fn visual_positions(&self) -> Vec<usize> {
        self.select(Modality::Visual)
    }

    fn select(&self, m: Modality) -> Vec<usize> {
        self.positions
            .iter()
            .zip(&self.modality)
            .filter(|(_, mm)| **mm == m)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Cached keys and values of one layer, with the position id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    d_model: usize,
    positions: Vec<usize>,
    modality: Vec<Modality>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerCache {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn retain(&self, keep: impl Fn(usize) -> bool) -> LayerCache {
        let d = self.d_model;
        let mut out = LayerCache {
            d_model: d,
            positions: Vec::new(),
            modality: Vec::new(),
            keys: Vec::new(),
            values: Vec::new(),
        };
        for (i, &p) in self.positions.iter().enumerate() {
            if keep(p) {
                out.positions.push(p);
                out.modality.push(self.modality[i]);
                out.keys.extend_from_slice(&self.keys[i * d..(i + 1) * d]);
                out.values.extend_from_slice(&self.values[i * d..(i + 1) * d]);
            }
        }
        out
    }

    fn push(&mut self, position: usize, modality: Modality, key: &[f64], value: &[f64]) {
        self.positions.push(position);
        self.modality.push(modality);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    next_position: usize,
}

impl KvCache {
    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l]
    }

    /// Entries per layer.
    pub fn entry_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    /// Drop every entry the mask rejects.
    pub fn apply_mask(&self, mask: &KvKeepMask) -> KvCache {
        KvCache {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, c)| c.retain(|p| mask.keeps(l, p)))
                .collect(),
            next_position: self.next_position,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: KvCache,
    /// Hidden state of the last prompt position after the final norm.
    pub last_hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// Sequence length processed by each layer.
    pub lengths: Vec<usize>,
    pub origin: GroupCounts,
    pub text_len: usize,
    pub elapsed: Duration,
}

/// Attention mass one head put on cached prompt positions during one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttentionSample {
    pub visual: f64,
    pub text: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    /// Logits each token was chosen from.
    pub logits: Vec<Vec<f64>>,
    /// `[step][layer][head]`.
    pub attention: Vec<Vec<Vec<AttentionSample>>>,
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

pub fn sinusoidal(position: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = position as f64 / freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn init_matrix(rng: &mut Rng64, rows: usize, cols: usize) -> Vec<f64> {
    // uniform with variance 1/rows
    rng.fill_unit(rows * cols, (3.0 / rows as f64).sqrt())
}

/// Weighted sum of one head's value rows.
#[allow(clippy::too_many_arguments)]
fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n: usize,
    d: usize,
    offset: usize,
    scale: f64,
    blocked: impl Fn(usize) -> bool,
) -> (Vec<f64>, Vec<f64>) {
    let hd = q.len();
    let scores: Vec<f64> = (0..n)
        .map(|j| {
            if blocked(j) {
                f64::NEG_INFINITY
            } else {
                dot(q, &keys[j * d + offset..j * d + offset + hd]) * scale
            }
        })
        .collect();
    let probs = softmax_row(&scores).expect("the query always sees itself");
    let mut out = vec![0.0; hd];
    for (j, p) in probs.iter().enumerate() {
        let v = &values[j * d + offset..j * d + offset + hd];
        out.iter_mut().zip(v).for_each(|(o, x)| *o += p * x);
    }
    (out, probs)
}

/// Normed input row and its query, key and value projections.
type RowProjection = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

struct Projected {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        if cfg.layers == 0 || cfg.heads == 0 || cfg.d_model == 0 || cfg.mlp_ratio == 0 || cfg.vocab == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if cfg.visual_dim == 0 {
            return Err(ModelError::ZeroDimension);
        }
        if !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(ModelError::HeadsDoNotDivide {
                heads: cfg.heads,
                d_model: cfg.d_model,
            });
        }
        let d = cfg.d_model;
        let hidden = cfg.hidden_dim();
        let mut root = Rng64::new(cfg.seed);
        let layers = (0..cfg.layers)
            .map(|l| {
                let mut rng = root.fork(l as u64);
                LayerWeights {
                    wq: init_matrix(&mut rng, d, d),
                    wk: init_matrix(&mut rng, d, d),
                    wv: init_matrix(&mut rng, d, d),
                    wo: init_matrix(&mut rng, d, d),
                    w_in: init_matrix(&mut rng, d, hidden),
                    w_out: init_matrix(&mut rng, hidden, d),
                }
            })
            .collect();
        let mut rng = root.fork(u64::MAX);
        let embed = rng.fill_unit(cfg.vocab * d, 1.0);
        let unembed = init_matrix(&mut rng, d, cfg.vocab);
        let projector = init_matrix(&mut rng, cfg.visual_dim, d);
        Ok(Self {
            cfg,
            layers,
            embed,
            unembed,
            projector,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Order-sensitive hash over every weight's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |xs: &[f64]| {
            for x in xs {
                h ^= x.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3).rotate_left(7);
            }
        };
        for w in &self.layers {
            for m in [&w.wq, &w.wk, &w.wv, &w.wo, &w.w_in, &w.w_out] {
                eat(m);
            }
        }
        eat(&self.embed);
        eat(&self.unembed);
        eat(&self.projector);
        h
    }

    fn token_row(&self, id: u32, position: usize) -> Result<Vec<f64>, ModelError> {
        let d = self.cfg.d_model;
        let idx = id as usize;
        if idx >= self.cfg.vocab {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.cfg.vocab,
            });
        }
        let mut row = self.embed[idx * d..(idx + 1) * d].to_vec();
        add_assign(&mut row, &sinusoidal(position, d));
        Ok(row)
    }

    /// Project the visual stream into model space and append the prompt.
    /// Visual tokens take positions `0..V`, text tokens `V..V+M`.
    pub fn build_input(&self, stream: &TokenStream, text: &TextEmbedding) -> Result<PrefillInput, ModelError> {
        if stream.dim() != self.cfg.visual_dim && !stream.is_empty() {
            return Err(ModelError::VisualDim {
                expected: self.cfg.visual_dim,
                got: stream.dim(),
            });
        }
        if text.prompt_ids().is_empty() {
            return Err(ModelError::NoText);
        }
        let d = self.cfg.d_model;
        let n = stream.len() + text.prompt_ids().len();
        let mut input = PrefillInput {
            d_model: d,
            hidden: Vec::with_capacity(n * d),
            positions: (0..n).collect(),
            modality: Vec::with_capacity(n),
            groups: Vec::with_capacity(n),
        };
        let rows = par::map_range(stream.len(), |i| {
            let mut row = vec_mat(stream.token(i), &self.projector, d);
            add_assign(&mut row, &sinusoidal(i, d));
            row
        });
        for (row, prov) in rows.into_iter().zip(stream.provenance()) {
            input.hidden.extend(row);
            input.modality.push(Modality::Visual);
            input
                .groups
                .push(Some(if prov.key_event { Group::Key } else { Group::NonKey }));
        }
        for (j, &id) in text.prompt_ids().iter().enumerate() {
            input.hidden.extend(self.token_row(id, stream.len() + j)?);
            input.modality.push(Modality::Text);
            input.groups.push(None);
        }
        Ok(input)
    }

    fn project(&self, l: usize, x: &[f64], n: usize) -> (Vec<Vec<f64>>, Projected) {
        let d = self.cfg.d_model;
        let w = &self.layers[l];
        let rows: Vec<RowProjection> = par::map_range(n, |i| {
            let h = rms_norm(&x[i * d..(i + 1) * d]);
            let q = vec_mat(&h, &w.wq, d);
            let k = vec_mat(&h, &w.wk, d);
            let v = vec_mat(&h, &w.wv, d);
            (h, q, k, v)
        });
        let mut p = Projected {
            q: Vec::with_capacity(n * d),
            k: Vec::with_capacity(n * d),
            v: Vec::with_capacity(n * d),
        };
        let mut normed = Vec::with_capacity(n);
        for (h, q, k, v) in rows {
            normed.push(h);
            p.q.extend(q);
            p.k.extend(k);
            p.v.extend(v);
        }
        (normed, p)
    }

    fn scale(&self) -> f64 {
        1.0 / (self.cfg.head_dim() as f64).sqrt()
    }

    /// Output projection, residual and MLP for one row.
    fn finish_row(&self, l: usize, x: &[f64], attn: &[f64]) -> Vec<f64> {
        let d = self.cfg.d_model;
        let w = &self.layers[l];
        let mut out = x.to_vec();
        add_assign(&mut out, &vec_mat(attn, &w.wo, d));
        let h = rms_norm(&out);
        let mid: Vec<f64> = vec_mat(&h, &w.w_in, self.cfg.hidden_dim())
            .into_iter()
            .map(silu)
            .collect();
        add_assign(&mut out, &vec_mat(&mid, &w.w_out, d));
        out
    }

    /// Full causal layer over `n` rows. Returns the new hidden rows plus the
    /// keys and values to cache.
    fn layer_forward(&self, l: usize, x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let (_, p) = self.project(l, x, n);
        let scale = self.scale();
        let per_head: Vec<Vec<f64>> = par::map_range(self.cfg.heads, |h| {
            let mut out = Vec::with_capacity(n * hd);
            for i in 0..n {
                let q = &p.q[i * d + h * hd..i * d + (h + 1) * hd];
                let (o, _) = attend(q, &p.k, &p.v, i + 1, d, h * hd, scale, |_| false);
                out.extend(o);
            }
            out
        });
        let rows = par::map_range(n, |i| {
            let mut attn = Vec::with_capacity(d);
            for head in &per_head {
                attn.extend_from_slice(&head[i * hd..(i + 1) * hd]);
            }
            self.finish_row(l, &x[i * d..(i + 1) * d], &attn)
        });
        (rows.concat(), p.k, p.v)
    }

    /// Attention rows of `queries` at layer `l`, `[head][query][key]` over all `n` keys.
    fn attention_rows(&self, l: usize, x: &[f64], n: usize, queries: &[usize]) -> AttentionMaps {
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let (_, p) = self.project(l, x, n);
        let scale = self.scale();
        let per_head: Vec<Vec<f64>> = par::map_range(self.cfg.heads, |h| {
            let mut out = vec![0.0; queries.len() * n];
            for (qi, &i) in queries.iter().enumerate() {
                let q = &p.q[i * d + h * hd..i * d + (h + 1) * hd];
                let (_, probs) = attend(q, &p.k, &p.v, i + 1, d, h * hd, scale, |_| false);
                out[qi * n..qi * n + probs.len()].copy_from_slice(&probs);
            }
            out
        });
        AttentionMaps::new(self.cfg.heads, queries.len(), n, per_head.concat()).expect("shape by construction")
    }

    fn logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = rms_norm(x);
        let logits = vec_mat(&h, &self.unembed, self.cfg.vocab);
        (h, logits)
    }

    /// Prefill with layer-wise visual pruning.
    ///
    /// At every boundary layer inside the model, visual tokens are scored by
    /// the attention text queries give them in that layer over its incoming
    /// sequence, then each group is cut to its scheduled count before the
    /// layer runs. Text tokens are never pruned.
    pub fn prefill(&self, input: &PrefillInput, sched: &PruneSchedule) -> Result<PrefillOutput, ModelError> {
        if sched.layers != self.cfg.layers {
            return Err(ModelError::LayerMismatch {
                schedule: sched.layers,
                model: self.cfg.layers,
            });
        }
        if input.text_len() == 0 {
            return Err(ModelError::NoText);
        }
        let start = Instant::now();
        let d = self.cfg.d_model;
        let origin = input.visual_counts();
        let mut x = input.hidden.clone();
        let mut idx: Vec<usize> = (0..input.len()).collect();
        let mut lengths = Vec::with_capacity(self.cfg.layers);
        let mut layers = Vec::with_capacity(self.cfg.layers);

        for l in 0..self.cfg.layers {
            let has_visual = idx.iter().any(|&i| input.groups[i].is_some());
            if sched.is_boundary(l) && has_visual {
                let keep = self.prune(l, &x, &idx, input, sched, origin)?;
                let mut nx = Vec::with_capacity(keep.len() * d);
                for &ci in &keep {
                    nx.extend_from_slice(&x[ci * d..(ci + 1) * d]);
                }
                idx = keep.iter().map(|&ci| idx[ci]).collect();
                x = nx;
            }
            lengths.push(idx.len());
            let (nx, k, v) = self.layer_forward(l, &x, idx.len());
            layers.push(LayerCache {
                d_model: d,
                positions: idx.iter().map(|&i| input.positions[i]).collect(),
                modality: idx.iter().map(|&i| input.modality[i]).collect(),
                keys: k,
                values: v,
            });
            x = nx;
        }
        let n = idx.len();
        let (last_hidden, logits) = self.logits(&x[(n - 1) * d..n * d]);
        let next_position = input.positions.iter().max().map_or(0, |p| p + 1);
        Ok(PrefillOutput {
            cache: KvCache { layers, next_position },
            last_hidden,
            logits,
            lengths,
            origin,
            text_len: input.text_len(),
            elapsed: start.elapsed(),
        })
    }

    /// Rows (current-sequence indices) that survive the boundary at layer `l`.
    fn prune(
        &self,
        l: usize,
        x: &[f64],
        idx: &[usize],
        input: &PrefillInput,
        sched: &PruneSchedule,
        origin: GroupCounts,
    ) -> Result<Vec<usize>, ModelError> {
        let text_rows: Vec<usize> = (0..idx.len()).filter(|&ci| input.groups[idx[ci]].is_none()).collect();
        let visual_rows: Vec<usize> = (0..idx.len()).filter(|&ci| input.groups[idx[ci]].is_some()).collect();
        let maps = self.attention_rows(l, x, idx.len(), &text_rows);
        let query_ids: Vec<usize> = (0..text_rows.len()).collect();
        let scores = token_importance(&maps, &query_ids, &visual_rows)?;

        let mut keep: Vec<usize> = text_rows;
        for group in [Group::Key, Group::NonKey] {
            let (rows, group_scores): (Vec<usize>, Vec<f64>) = visual_rows
                .iter()
                .zip(&scores)
                .filter(|(ci, _)| input.groups[idx[**ci]] == Some(group))
                .map(|(ci, s)| (*ci, *s))
                .unzip();
            let ratio = sched.retention_ratio(l, group)?;
            keep.extend(select_at_boundary(&rows, &group_scores, origin.get(group), ratio)?);
        }
        keep.sort_unstable();
        Ok(keep)
    }

    /// One decode step for `token` at `position`, appending to `cache`.
    fn step(
        &self,
        cache: &mut KvCache,
        token: u32,
        exclusion: Option<&KvKeepMask>,
    ) -> Result<(Vec<f64>, Vec<Vec<AttentionSample>>), ModelError> {
        let d = self.cfg.d_model;
        let hd = self.cfg.head_dim();
        let position = cache.next_position;
        let mut x = self.token_row(token, position)?;
        let mut samples = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let w = &self.layers[l];
            let h = rms_norm(&x);
            let q = vec_mat(&h, &w.wq, d);
            let layer = &mut cache.layers[l];
            layer.push(
                position,
                Modality::Generated,
                &vec_mat(&h, &w.wk, d),
                &vec_mat(&h, &w.wv, d),
            );
            let layer = &cache.layers[l];
            let n = layer.len();
            let blocked = |j: usize| exclusion.is_some_and(|m| !m.keeps(l, layer.positions[j]));
            let mut attn = Vec::with_capacity(d);
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let (o, probs) = attend(
                    &q[head * hd..(head + 1) * hd],
                    &layer.keys,
                    &layer.values,
                    n,
                    d,
                    head * hd,
                    self.scale(),
                    blocked,
                );
                attn.extend(o);
                let mut sample = AttentionSample { visual: 0.0, text: 0.0 };
                for (p, m) in probs.iter().zip(&layer.modality) {
                    match m {
                        Modality::Visual => sample.visual += p,
                        Modality::Text => sample.text += p,
                        Modality::Generated => {}
                    }
                }
                heads.push(sample);
            }
            samples.push(heads);
            x = self.finish_row(l, &x, &attn);
        }
        cache.next_position += 1;
        Ok((self.logits(&x).1, samples))
    }

    /// Greedy decoding from a prefilled cache.
    ///
    /// `first_logits` are the prefill logits of the last prompt position.
    /// With `exclusion`, entries the mask rejects stay in the cache but get
    /// `-inf` attention logits instead of being removed.
    pub fn decode(
        &self,
        mut cache: KvCache,
        first_logits: &[f64],
        steps: usize,
        exclusion: Option<&KvKeepMask>,
    ) -> Result<DecodeOutput, ModelError> {
        if steps == 0 {
            return Err(ModelError::NoSteps);
        }
        let mut out = DecodeOutput {
            tokens: Vec::with_capacity(steps),
            logits: Vec::with_capacity(steps),
            attention: Vec::with_capacity(steps),
        };
        let mut logits = first_logits.to_vec();
        for _ in 0..steps {
            let token = argmax(&logits) as u32;
            let (next, samples) = self.step(&mut cache, token, exclusion)?;
            out.tokens.push(token);
            out.logits.push(std::mem::replace(&mut logits, next));
            out.attention.push(samples);
        }
        Ok(out)
    }

    /// Cache-free greedy generation: every step reruns the whole causal
    /// forward pass over prompt plus generated tokens. No pruning.
    pub fn reference_generate(
        &self,
        input: &PrefillInput,
        steps: usize,
    ) -> Result<(Vec<u32>, Vec<Vec<f64>>), ModelError> {
        if steps == 0 {
            return Err(ModelError::NoSteps);
        }
        let d = self.cfg.d_model;
        let mut hidden = input.hidden.clone();
        let first = input.positions.iter().max().map_or(0, |p| p + 1);
        let mut tokens = Vec::with_capacity(steps);
        let mut all_logits = Vec::with_capacity(steps);
        for next_position in first..first + steps {
            let n = hidden.len() / d;
            let mut x = hidden.clone();
            for l in 0..self.cfg.layers {
                x = self.layer_forward(l, &x, n).0;
            }
            let (_, logits) = self.logits(&x[(n - 1) * d..n * d]);
            let token = argmax(&logits) as u32;
            tokens.push(token);
            all_logits.push(logits);
            hidden.extend(self.token_row(token, next_position)?);
        }
        Ok((tokens, all_logits))
    }
}

/// Per-layer `(visual_ratio, text_ratio)` averaged over steps and heads.
///
/// Each (step, head) sample is normalised over prompt positions first, so
/// the two ratios of a layer sum to 1.
pub fn attention_ratio_trace(out: &DecodeOutput) -> Result<Vec<(f64, f64)>, AttentionRatioError> {
    let first = out.attention.first().ok_or(AttentionRatioError::NoSteps)?;
    let layers = first.len();
    (0..layers)
        .map(|l| {
            let mut vis = 0.0;
            let mut txt = 0.0;
            let mut count = 0usize;
            for step in &out.attention {
                for s in &step[l] {
                    let total = s.visual + s.text;
                    if total <= 0.0 {
                        return Err(AttentionRatioError::NoPromptMass { layer: l });
                    }
                    vis += s.visual / total;
                    txt += s.text / total;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(AttentionRatioError::NoPromptMass { layer: l });
            }
            Ok((vis / count as f64, txt / count as f64))
        })
        .collect()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionRatioError {
    #[error("no decode steps recorded")]
    NoSteps,
    #[error("layer {layer} has no attention mass on prompt positions")]
    NoPromptMass { layer: usize },
}
