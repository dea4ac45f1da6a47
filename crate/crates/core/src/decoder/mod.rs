//! Miniature DETR-style transformer decoder with grouped object queries.
//!
//! The decoder runs `G` concatenated groups of `N` object queries against a
//! shared image-feature sequence. An inter-group self-attention mask (realized
//! as a `-inf` additive bias before the attention normalization) keeps every
//! group's computation isolated, so one joint pass produces `G` independent
//! detection sets. The `batched_groups` layout exploits that isolation
//! directly: it processes groups as separate batch entries with no mask and
//! shares the per-layer feature key/value projections across groups, which is
//! what makes the single pass cheaper than sequential repetition.
//!
//! Weights are untrained: every projection is drawn from `weight_seed`
//! uniformly in `[-1/sqrt(d), 1/sqrt(d)]`. Layer-norm affine parameters are
//! fixed at identity. Dropout (for Monte-Carlo modes) draws its masks from a
//! counter-based generator keyed by `(layer, sub-block, group)`, so every
//! layout sees identical per-group masks.

pub mod linalg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use linalg::{layer_norm_rows, relu_in_place, sigmoid, softmax_row, Matrix};

/// Decoder shapeatom and seeding configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub queries_per_group: usize,
    pub num_groups: usize,
    pub num_classes: usize,
    pub feature_tokens: usize,
    pub dropout_prob: f64,
    pub weight_seed: u64,
    pub dropout_seed: u64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Configuration(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0
            || self.queries_per_group == 0
            || self.num_groups == 0
            || self.num_classes == 0
            || self.feature_tokens == 0
        {
            return Err(Error::Configuration(
                "layers, queries, groups, classes, and feature tokens must all be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Configuration(format!(
                "dropout probability must lie in [0,1), got {}",
                self.dropout_prob
            )));
        }
        Ok(())
    }

    /// Total query count `W = G * N` of the joint pass.
    pub fn total_queries(&self) -> usize {
        self.num_groups * self.queries_per_group
    }
}

/// Stand-in for encoder output: an `F x d` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    mat: Matrix,
}

impl ImageFeatures {
    /// Seeded uniform features in `[-1, 1)`.
    pub fn seeded(tokens: usize, dim: usize, seed: u64) -> Self {
        let mat = seeded_matrix(mix_seed(seed, &[TAG_FEATURES]), tokens, dim, 1.0);
        Self { mat }
    }

    pub fn from_matrix(mat: Matrix) -> Result<Self> {
        if mat.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("non-finite feature entries".into()));
        }
        Ok(Self { mat })
    }

    pub fn tokens(&self) -> usize {
        self.mat.rows()
    }

    pub fn dim(&self) -> usize {
        self.mat.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }
}

/// `G` groups of `N x d` query embeddings, group identities preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroups {
    pub groups: Vec<Matrix>,
}

impl QueryGroups {
    pub fn new(groups: Vec<Matrix>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Configuration("at least one query group required".into()));
        }
        let (n, d) = (groups[0].rows(), groups[0].cols());
        if groups.iter().any(|g| g.rows() != n || g.cols() != d) {
            return Err(Error::Dimension("ragged query group shapes".into()));
        }
        Ok(Self { groups })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn queries_per_group(&self) -> usize {
        self.groups[0].rows()
    }
}

/// Binary `W x W` self-attention mask; entry 1 blocks attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    num_groups: usize,
    per_group: usize,
    blocked: Vec<bool>,
}

/// Builds the inter-group mask: `m_ij = 1` iff `floor(i/N) != floor(j/N)`.
pub fn build_group_mask(num_groups: usize, per_group: usize) -> AttentionMask {
    let w = num_groups * per_group;
    let mut blocked = vec![false; w * w];
    for i in 0..w {
        for j in 0..w {
            blocked[i * w + j] = i / per_group != j / per_group;
        }
    }
    AttentionMask {
        num_groups,
        per_group,
        blocked,
    }
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.num_groups * self.per_group
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn per_group(&self) -> usize {
        self.per_group
    }

    pub fn blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size() + j]
    }

    /// Entry as 0/1, matching the mask's matrix definition.
    pub fn entry(&self, i: usize, j: usize) -> u8 {
        u8::from(self.blocked(i, j))
    }
}

/// One raw prediction emitted by the task heads.
///
/// `class`, `group_index`, and `query_index` are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub confidence: f64,
    pub group_index: usize,
    pub query_index: usize,
}

impl Detection {
    pub fn new(
        bbox: BBox,
        class: usize,
        confidence: f64,
        group_index: usize,
        query_index: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Validation(format!(
                "confidence {confidence} outside [0,1]"
            )));
        }
        Ok(Self {
            bbox,
            class,
            confidence,
            group_index,
            query_index,
        })
    }
}

/// The per-group detection sets produced by one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSetGroup {
    pub groups: Vec<Vec<Detection>>,
}

impl DetectionSetGroup {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn pooled(&self) -> Vec<Detection> {
        self.groups.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    Deterministic,
    /// Dropout active, masks keyed from this seed.
    Dropout { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// One joint `W x d` pass with the inter-group mask.
    MaskedJoint,
    /// Groups processed as batch entries, no mask; feature key/value
    /// projections computed once per layer and shared across groups.
    BatchedGroups,
    /// Each group alone through the unmasked decoder, one after another.
    SequentialGroups,
}

/// Inference-time ensembling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// First query group only, dropout off.
    Deterministic,
    /// `G` distinct seeded query groups, dropout off.
    GroupEnsemble,
    /// First group duplicated `G` times, dropout on with independent
    /// per-group masks.
    McDropout,
    /// `G` distinct groups plus active dropout.
    McGroupEnsemble,
}

const TAG_QUERY: u64 = 0x51;
const TAG_LAYER: u64 = 0x4C;
const TAG_HEADS: u64 = 0x48;
const TAG_FEATURES: u64 = 0x46;

const SUB_SELF: u64 = 0;
const SUB_CROSS: u64 = 1;
const SUB_FFN: u64 = 2;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream-key derivation.
pub(crate) fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    acc
}

fn seeded_matrix(seed: u64, rows: usize, cols: usize, bound: f64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect();
    Matrix::from_flat(rows, cols, data).expect("seeded matrix shape")
}

fn seeded_vec(seed: u64, len: usize, bound: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
        .collect()
}

#[derive(Debug, Clone)]
struct AttnWeights {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    bq: Vec<f64>,
    bk: Vec<f64>,
    bv: Vec<f64>,
    bo: Vec<f64>,
}

impl AttnWeights {
    fn seeded(seed: u64, comp_base: u64, d: usize, bound: f64) -> Self {
        Self {
            wq: seeded_matrix(mix_seed(seed, &[comp_base]), d, d, bound),
            wk: seeded_matrix(mix_seed(seed, &[comp_base + 1]), d, d, bound),
            wv: seeded_matrix(mix_seed(seed, &[comp_base + 2]), d, d, bound),
            wo: seeded_matrix(mix_seed(seed, &[comp_base + 3]), d, d, bound),
            bq: seeded_vec(mix_seed(seed, &[comp_base + 4]), d, bound),
            bk: seeded_vec(mix_seed(seed, &[comp_base + 5]), d, bound),
            bv: seeded_vec(mix_seed(seed, &[comp_base + 6]), d, bound),
            bo: seeded_vec(mix_seed(seed, &[comp_base + 7]), d, bound),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    self_attn: AttnWeights,
    cross_attn: AttnWeights,
    ffn_w1: Matrix,
    ffn_b1: Vec<f64>,
    ffn_w2: Matrix,
    ffn_b2: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadWeights {
    class_w: Matrix,
    class_b: Vec<f64>,
    box_w1: Matrix,
    box_b1: Vec<f64>,
    box_w2: Matrix,
    box_b2: Vec<f64>,
    box_w3: Matrix,
    box_b3: Vec<f64>,
}

/// Decoder with runtime-generated weights and a bank of `G` query groups.
#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    layers: Vec<LayerWeights>,
    heads: HeadWeights,
    query_bank: Vec<Matrix>,
}

impl Decoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let ffn = 4 * d;
        let bound = 1.0 / (d as f64).sqrt();
        let seed = config.weight_seed;
        let layers = (0..config.num_layers)
            .map(|l| {
                let ls = mix_seed(seed, &[TAG_LAYER, l as u64]);
                LayerWeights {
                    self_attn: AttnWeights::seeded(ls, 0, d, bound),
                    cross_attn: AttnWeights::seeded(ls, 8, d, bound),
                    ffn_w1: seeded_matrix(mix_seed(ls, &[16]), d, ffn, bound),
                    ffn_b1: seeded_vec(mix_seed(ls, &[17]), ffn, bound),
                    ffn_w2: seeded_matrix(mix_seed(ls, &[18]), ffn, d, bound),
                    ffn_b2: seeded_vec(mix_seed(ls, &[19]), d, bound),
                }
            })
            .collect();
        let hs = mix_seed(seed, &[TAG_HEADS]);
        let heads = HeadWeights {
            class_w: seeded_matrix(mix_seed(hs, &[0]), d, config.num_classes, bound),
            class_b: seeded_vec(mix_seed(hs, &[1]), config.num_classes, bound),
            box_w1: seeded_matrix(mix_seed(hs, &[2]), d, d, bound),
            box_b1: seeded_vec(mix_seed(hs, &[3]), d, bound),
            box_w2: seeded_matrix(mix_seed(hs, &[4]), d, d, bound),
            box_b2: seeded_vec(mix_seed(hs, &[5]), d, bound),
            box_w3: seeded_matrix(mix_seed(hs, &[6]), d, 4, bound),
            box_b3: seeded_vec(mix_seed(hs, &[7]), 4, bound),
        };
        let query_bank = (0..config.num_groups)
            .map(|g| {
                seeded_matrix(
                    mix_seed(seed, &[TAG_QUERY, g as u64]),
                    config.queries_per_group,
                    d,
                    bound,
                )
            })
            .collect();
        Ok(Self {
            config,
            layers,
            heads,
            query_bank,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// The seeded query-group bank (group `g` is stable across `G`).
    pub fn query_bank(&self) -> &[Matrix] {
        &self.query_bank
    }

    /// Query groups for an ensembling mode.
    pub fn ensemble_queries(&self, mode: EnsembleMode) -> QueryGroups {
        let groups = match mode {
            EnsembleMode::Deterministic => vec![self.query_bank[0].clone()],
            EnsembleMode::GroupEnsemble | EnsembleMode::McGroupEnsemble => {
                self.query_bank.to_vec()
            }
            EnsembleMode::McDropout => {
                vec![self.query_bank[0].clone(); self.config.num_groups]
            }
        };
        QueryGroups { groups }
    }

    fn feature_kv(&self, layer: usize, features: &Matrix) -> (Matrix, Matrix) {
        let aw = &self.layers[layer].cross_attn;
        (
            project(features, &aw.wk, &aw.bk),
            project(features, &aw.wv, &aw.bv),
        )
    }

    fn self_attention(&self, layer: usize, x: &Matrix, mask: Option<&AttentionMask>) -> Matrix {
        let aw = &self.layers[layer].self_attn;
        let k = project(x, &aw.wk, &aw.bk);
        let v = project(x, &aw.wv, &aw.bv);
        multi_head_attention(aw, self.config.num_heads, x, &k, &v, mask)
    }

    fn cross_attention(&self, layer: usize, x: &Matrix, kf: &Matrix, vf: &Matrix) -> Matrix {
        let aw = &self.layers[layer].cross_attn;
        multi_head_attention(aw, self.config.num_heads, x, kf, vf, None)
    }

    /// Transforms query groups through the decoder.
    ///
    /// All three layouts compute the same function in deterministic mode;
    /// they differ in how the inter-group isolation is realized (mask bias,
    /// batch axis, or explicit repetition).
    pub fn forward(
        &self,
        features: &ImageFeatures,
        queries: &QueryGroups,
        mask: &AttentionMask,
        mode: ForwardMode,
        layout: Layout,
    ) -> Result<Vec<Matrix>> {
        let d = self.config.embed_dim;
        let n = self.config.queries_per_group;
        if features.dim() != d || features.tokens() != self.config.feature_tokens {
            return Err(Error::Dimension(format!(
                "features {}x{} incompatible with config (F={}, d={})",
                features.tokens(),
                features.dim(),
                self.config.feature_tokens,
                d
            )));
        }
        if queries.groups.iter().any(|g| g.rows() != n || g.cols() != d) {
            return Err(Error::Dimension(format!(
                "query groups must be {n}x{d} matrices"
            )));
        }
        let g_count = queries.num_groups();
        if mask.num_groups != g_count || mask.per_group != n {
            return Err(Error::Configuration(format!(
                "mask for ({}, {}) does not match {} groups of {}",
                mask.num_groups, mask.per_group, g_count, n
            )));
        }
        let dropout = match mode {
            ForwardMode::Deterministic => DropoutPlan::off(),
            ForwardMode::Dropout { seed } => DropoutPlan::new(self.config.dropout_prob, seed),
        };
        match layout {
            Layout::MaskedJoint => self.forward_masked_joint(features, queries, mask, &dropout),
            Layout::BatchedGroups => self.forward_batched(features, queries, &dropout),
            Layout::SequentialGroups => self.forward_sequential(features, queries, &dropout),
        }
    }

    fn forward_masked_joint(
        &self,
        features: &ImageFeatures,
        queries: &QueryGroups,
        mask: &AttentionMask,
        dropout: &DropoutPlan,
    ) -> Result<Vec<Matrix>> {
        let n = self.config.queries_per_group;
        let g_count = queries.num_groups();
        let refs: Vec<&Matrix> = queries.groups.iter().collect();
        let mut x = Matrix::vconcat(&refs);
        for l in 0..self.config.num_layers {
            let mut sa = self.self_attention(l, &x, Some(mask));
            for g in 0..g_count {
                dropout.apply_block(&mut sa, g * n, n, l, SUB_SELF, g);
            }
            x.add_assign(&sa);
            layer_norm_rows(&mut x);

            let (kf, vf) = self.feature_kv(l, features.matrix());
            let mut ca = self.cross_attention(l, &x, &kf, &vf);
            for g in 0..g_count {
                dropout.apply_block(&mut ca, g * n, n, l, SUB_CROSS, g);
            }
            x.add_assign(&ca);
            layer_norm_rows(&mut x);

            let mut hidden = project(&x, &self.layers[l].ffn_w1, &self.layers[l].ffn_b1);
            relu_in_place(&mut hidden);
            for g in 0..g_count {
                dropout.apply_block(&mut hidden, g * n, n, l, SUB_FFN, g);
            }
            let out = project(&hidden, &self.layers[l].ffn_w2, &self.layers[l].ffn_b2);
            x.add_assign(&out);
            layer_norm_rows(&mut x);
        }
        Ok((0..g_count).map(|g| x.row_block(g * n, n)).collect())
    }

    fn forward_batched(
        &self,
        features: &ImageFeatures,
        queries: &QueryGroups,
        dropout: &DropoutPlan,
    ) -> Result<Vec<Matrix>> {
        let n = self.config.queries_per_group;
        let mut xs: Vec<Matrix> = queries.groups.clone();
        for l in 0..self.config.num_layers {
            for (g, x) in xs.iter_mut().enumerate() {
                let mut sa = self.self_attention(l, x, None);
                dropout.apply_block(&mut sa, 0, n, l, SUB_SELF, g);
                x.add_assign(&sa);
                layer_norm_rows(x);
            }
            // Shared feature projections: computed once per layer for the
            // whole batch of groups.
            let (kf, vf) = self.feature_kv(l, features.matrix());
            for (g, x) in xs.iter_mut().enumerate() {
                let mut ca = self.cross_attention(l, x, &kf, &vf);
                dropout.apply_block(&mut ca, 0, n, l, SUB_CROSS, g);
                x.add_assign(&ca);
                layer_norm_rows(x);
            }
            for (g, x) in xs.iter_mut().enumerate() {
                let mut hidden = project(x, &self.layers[l].ffn_w1, &self.layers[l].ffn_b1);
                relu_in_place(&mut hidden);
                dropout.apply_block(&mut hidden, 0, n, l, SUB_FFN, g);
                let out = project(&hidden, &self.layers[l].ffn_w2, &self.layers[l].ffn_b2);
                x.add_assign(&out);
                layer_norm_rows(x);
            }
        }
        Ok(xs)
    }

    fn forward_sequential(
        &self,
        features: &ImageFeatures,
        queries: &QueryGroups,
        dropout: &DropoutPlan,
    ) -> Result<Vec<Matrix>> {
        let n = self.config.queries_per_group;
        let mut outputs = Vec::with_capacity(queries.num_groups());
        for (g, group) in queries.groups.iter().enumerate() {
            let mut x = group.clone();
            for l in 0..self.config.num_layers {
                let mut sa = self.self_attention(l, &x, None);
                dropout.apply_block(&mut sa, 0, n, l, SUB_SELF, g);
                x.add_assign(&sa);
                layer_norm_rows(&mut x);

                // Recomputed for every group: the cost of sequential passes.
                let (kf, vf) = self.feature_kv(l, features.matrix());
                let mut ca = self.cross_attention(l, &x, &kf, &vf);
                dropout.apply_block(&mut ca, 0, n, l, SUB_CROSS, g);
                x.add_assign(&ca);
                layer_norm_rows(&mut x);

                let mut hidden = project(&x, &self.layers[l].ffn_w1, &self.layers[l].ffn_b1);
                relu_in_place(&mut hidden);
                dropout.apply_block(&mut hidden, 0, n, l, SUB_FFN, g);
                let out = project(&hidden, &self.layers[l].ffn_w2, &self.layers[l].ffn_b2);
                x.add_assign(&out);
                layer_norm_rows(&mut x);
            }
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Maps transformed queries to `N` detections for one group.
    ///
    /// Classification: affine map to `K` logits, per-class sigmoid, class =
    /// argmax (lowest index on ties). Box: 2-hidden-layer MLP to 4 values,
    /// logistic-squashed into `(0,1)`, interpreted as normalized cx/cy/w/h.
    pub fn task_heads(&self, transformed: &Matrix, group_index: usize) -> Vec<Detection> {
        let mut logits = transformed.matmul(&self.heads.class_w);
        logits.add_bias(&self.heads.class_b);

        let mut h1 = transformed.matmul(&self.heads.box_w1);
        h1.add_bias(&self.heads.box_b1);
        relu_in_place(&mut h1);
        let mut h2 = h1.matmul(&self.heads.box_w2);
        h2.add_bias(&self.heads.box_b2);
        relu_in_place(&mut h2);
        let mut raw_box = h2.matmul(&self.heads.box_w3);
        raw_box.add_bias(&self.heads.box_b3);

        (0..transformed.rows())
            .map(|q| {
                let (mut best_class, mut best_conf) = (1usize, f64::NEG_INFINITY);
                for (k, &logit) in logits.row(q).iter().enumerate() {
                    let p = sigmoid(logit);
                    if p > best_conf {
                        best_conf = p;
                        best_class = k + 1;
                    }
                }
                let b = raw_box.row(q);
                let squash = |v: f64| sigmoid(v).clamp(1e-12, 1.0 - 1e-12);
                let bbox = BBox::cxcywh_norm(squash(b[0]), squash(b[1]), squash(b[2]), squash(b[3]))
                    .expect("logistic-squashed box is valid");
                Detection {
                    bbox,
                    class: best_class,
                    confidence: best_conf,
                    group_index,
                    query_index: q + 1,
                }
            })
            .collect()
    }

    /// One full ensemble pass: queries per `mode`, group mask, batched
    /// layout, task heads per group.
    pub fn run_ensemble(
        &self,
        features: &ImageFeatures,
        mode: EnsembleMode,
    ) -> Result<DetectionSetGroup> {
        let queries = self.ensemble_queries(mode);
        let mask = build_group_mask(queries.num_groups(), self.config.queries_per_group);
        let fmode = match mode {
            EnsembleMode::Deterministic | EnsembleMode::GroupEnsemble => {
                ForwardMode::Deterministic
            }
            EnsembleMode::McDropout | EnsembleMode::McGroupEnsemble => ForwardMode::Dropout {
                seed: self.config.dropout_seed,
            },
        };
        let transformed = self.forward(features, &queries, &mask, fmode, Layout::BatchedGroups)?;
        Ok(DetectionSetGroup {
            groups: transformed
                .iter()
                .enumerate()
                .map(|(g, t)| self.task_heads(t, g + 1))
                .collect(),
        })
    }

    #[cfg(test)]
    pub(crate) fn zero_heads_for_test(&mut self) {
        for m in [
            &mut self.heads.class_w,
            &mut self.heads.box_w1,
            &mut self.heads.box_w2,
            &mut self.heads.box_w3,
        ] {
            *m = Matrix::zeros(m.rows(), m.cols());
        }
        self.heads.class_b.fill(0.0);
        self.heads.box_b1.fill(0.0);
        self.heads.box_b2.fill(0.0);
        self.heads.box_b3.fill(0.0);
    }
}

/// `G` detection sets (1 for deterministic) from a freshly built decoder.
pub fn run_ensemble_pass(
    features: &ImageFeatures,
    config: &DecoderConfig,
    mode: EnsembleMode,
) -> Result<DetectionSetGroup> {
    Decoder::new(*config)?.run_ensemble(features, mode)
}

fn project(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut m = x.matmul(w);
    m.add_bias(b);
    m
}

/// Scaled dot-product attention over pre-projected keys/values, with the
/// optional blocking mask applied as a `-inf` score before the softmax.
fn multi_head_attention(
    aw: &AttnWeights,
    num_heads: usize,
    x_q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: Option<&AttentionMask>,
) -> Matrix {
    let q = project(x_q, &aw.wq, &aw.bq);
    let (n, m, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Matrix::zeros(n, d);
    let mut scores = vec![0.0f64; m];
    for h in 0..num_heads {
        let off = h * dh;
        for i in 0..n {
            let qrow = &q.row(i)[off..off + dh];
            for j in 0..m {
                let blocked = mask.is_some_and(|mk| mk.blocked(i, j));
                scores[j] = if blocked {
                    f64::NEG_INFINITY
                } else {
                    let krow = &k.row(j)[off..off + dh];
                    let mut s = 0.0;
                    for (a, b) in qrow.iter().zip(krow) {
                        s += a * b;
                    }
                    s * scale
                };
            }
            softmax_row(&mut scores);
            let crow = &mut ctx.row_mut(i)[off..off + dh];
            for (j, &p) in scores.iter().enumerate() {
                if p != 0.0 {
                    let vrow = &v.row(j)[off..off + dh];
                    for (c, vv) in crow.iter_mut().zip(vrow) {
                        *c += p * vv;
                    }
                }
            }
        }
    }
    project(&ctx, &aw.wo, &aw.bo)
}

/// Inverted-scaling dropout keyed by `(layer, sub-block, group)`.
struct DropoutPlan {
    p: f64,
    seed: Option<u64>,
}

impl DropoutPlan {
    fn off() -> Self {
        Self { p: 0.0, seed: None }
    }

    fn new(p: f64, seed: u64) -> Self {
        Self { p, seed: Some(seed) }
    }

    fn apply_block(
        &self,
        m: &mut Matrix,
        row_start: usize,
        n_rows: usize,
        layer: usize,
        sub: u64,
        group: usize,
    ) {
        let Some(seed) = self.seed else { return };
        if self.p == 0.0 {
            return;
        }
        let key = mix_seed(seed, &[layer as u64, sub, group as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let scale = 1.0 / (1.0 - self.p);
        for r in row_start..row_start + n_rows {
            for val in m.row_mut(r) {
                if rng.random::<f64>() < self.p {
                    *val = 0.0;
                } else {
                    *val *= scale;
                }
            }
        }
    }
}

// --- weight dump/load -------------------------------------------------------

/// JSON weight-dump schema: config plus row-major matrices as decimal arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightsFile {
    pub config: DecoderConfig,
    /// `G` entries, each `N*d` row-major.
    pub queries: Vec<Vec<f64>>,
    pub layers: Vec<LayerWeightsFile>,
    pub heads: HeadsFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnWeightsFile {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bq: Vec<f64>,
    pub bk: Vec<f64>,
    pub bv: Vec<f64>,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeightsFile {
    pub self_attn: AttnWeightsFile,
    pub cross_attn: AttnWeightsFile,
    pub ffn_w1: Vec<f64>,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Vec<f64>,
    pub ffn_b2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadsFile {
    pub class_w: Vec<f64>,
    pub class_b: Vec<f64>,
    pub box_w1: Vec<f64>,
    pub box_b1: Vec<f64>,
    pub box_w2: Vec<f64>,
    pub box_b2: Vec<f64>,
    pub box_w3: Vec<f64>,
    pub box_b3: Vec<f64>,
}

impl Decoder {
    pub fn to_weights_file(&self) -> WeightsFile {
        let attn = |a: &AttnWeights| AttnWeightsFile {
            wq: a.wq.data().to_vec(),
            wk: a.wk.data().to_vec(),
            wv: a.wv.data().to_vec(),
            wo: a.wo.data().to_vec(),
            bq: a.bq.clone(),
            bk: a.bk.clone(),
            bv: a.bv.clone(),
            bo: a.bo.clone(),
        };
        WeightsFile {
            config: self.config,
            queries: self.query_bank.iter().map(|q| q.data().to_vec()).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeightsFile {
                    self_attn: attn(&l.self_attn),
                    cross_attn: attn(&l.cross_attn),
                    ffn_w1: l.ffn_w1.data().to_vec(),
                    ffn_b1: l.ffn_b1.clone(),
                    ffn_w2: l.ffn_w2.data().to_vec(),
                    ffn_b2: l.ffn_b2.clone(),
                })
                .collect(),
            heads: HeadsFile {
                class_w: self.heads.class_w.data().to_vec(),
                class_b: self.heads.class_b.clone(),
                box_w1: self.heads.box_w1.data().to_vec(),
                box_b1: self.heads.box_b1.clone(),
                box_w2: self.heads.box_w2.data().to_vec(),
                box_b2: self.heads.box_b2.clone(),
                box_w3: self.heads.box_w3.data().to_vec(),
                box_b3: self.heads.box_b3.clone(),
            },
        }
    }

    /// Rebuilds a decoder from a dump, validating every shape.
    pub fn from_weights_file(wf: &WeightsFile) -> Result<Self> {
        wf.config.validate()?;
        let d = wf.config.embed_dim;
        let ffn = 4 * d;
        let k = wf.config.num_classes;
        let n = wf.config.queries_per_group;
        let shaped = |name: &str, data: &[f64], rows: usize, cols: usize| -> Result<Matrix> {
            Matrix::from_flat(rows, cols, data.to_vec()).ok_or_else(|| {
                Error::Dimension(format!(
                    "{name}: expected {rows}x{cols} = {} values, got {}",
                    rows * cols,
                    data.len()
                ))
            })
        };
        let vec_shaped = |name: &str, data: &[f64], len: usize| -> Result<Vec<f64>> {
            if data.len() != len {
                return Err(Error::Dimension(format!(
                    "{name}: expected {len} values, got {}",
                    data.len()
                )));
            }
            Ok(data.to_vec())
        };
        let attn = |name: &str, a: &AttnWeightsFile| -> Result<AttnWeights> {
            Ok(AttnWeights {
                wq: shaped(&format!("{name}.wq"), &a.wq, d, d)?,
                wk: shaped(&format!("{name}.wk"), &a.wk, d, d)?,
                wv: shaped(&format!("{name}.wv"), &a.wv, d, d)?,
                wo: shaped(&format!("{name}.wo"), &a.wo, d, d)?,
                bq: vec_shaped(&format!("{name}.bq"), &a.bq, d)?,
                bk: vec_shaped(&format!("{name}.bk"), &a.bk, d)?,
                bv: vec_shaped(&format!("{name}.bv"), &a.bv, d)?,
                bo: vec_shaped(&format!("{name}.bo"), &a.bo, d)?,
            })
        };
        if wf.layers.len() != wf.config.num_layers {
            return Err(Error::Dimension(format!(
                "expected {} layers, got {}",
                wf.config.num_layers,
                wf.layers.len()
            )));
        }
        if wf.queries.len() != wf.config.num_groups {
            return Err(Error::Dimension(format!(
                "expected {} query groups, got {}",
                wf.config.num_groups,
                wf.queries.len()
            )));
        }
        let layers = wf
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(LayerWeights {
                    self_attn: attn(&format!("layer{i}.self"), &l.self_attn)?,
                    cross_attn: attn(&format!("layer{i}.cross"), &l.cross_attn)?,
                    ffn_w1: shaped(&format!("layer{i}.ffn_w1"), &l.ffn_w1, d, ffn)?,
                    ffn_b1: vec_shaped(&format!("layer{i}.ffn_b1"), &l.ffn_b1, ffn)?,
                    ffn_w2: shaped(&format!("layer{i}.ffn_w2"), &l.ffn_w2, ffn, d)?,
                    ffn_b2: vec_shaped(&format!("layer{i}.ffn_b2"), &l.ffn_b2, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = HeadWeights {
            class_w: shaped("heads.class_w", &wf.heads.class_w, d, k)?,
            class_b: vec_shaped("heads.class_b", &wf.heads.class_b, k)?,
            box_w1: shaped("heads.box_w1", &wf.heads.box_w1, d, d)?,
            box_b1: vec_shaped("heads.box_b1", &wf.heads.box_b1, d)?,
            box_w2: shaped("heads.box_w2", &wf.heads.box_w2, d, d)?,
            box_b2: vec_shaped("heads.box_b2", &wf.heads.box_b2, d)?,
            box_w3: shaped("heads.box_w3", &wf.heads.box_w3, d, 4)?,
            box_b3: vec_shaped("heads.box_b3", &wf.heads.box_b3, 4)?,
        };
        let query_bank = wf
            .queries
            .iter()
            .enumerate()
            .map(|(g, q)| shaped(&format!("queries[{g}]"), q, n, d))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: wf.config,
            layers,
            heads,
            query_bank,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            embed_dim: 16,
            num_heads: 4,
            num_layers: 2,
            queries_per_group: 3,
            num_groups: 3,
            num_classes: 5,
            feature_tokens: 7,
            dropout_prob: 0.1,
            weight_seed: 7,
            dropout_seed: 11,
        }
    }

    #[test]
    fn mask_single_group_all_zeros() {
        let m = build_group_mask(1, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.entry(i, j), 0);
            }
        }
    }

    #[test]
    fn mask_two_groups_of_two() {
        let m = build_group_mask(2, 2);
        let expected = [[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0], [1, 1, 0, 0]];
        for (i, row) in expected.iter().enumerate() {
            for (j, &want) in row.iter().enumerate() {
                assert_eq!(m.entry(i, j), want, "({i},{j})");
            }
        }
    }

    #[test]
    fn mask_zero_diagonal_and_symmetric() {
        for (g, n) in [(1, 1), (2, 3), (4, 5), (9, 2)] {
            let m = build_group_mask(g, n);
            let w = g * n;
            for i in 0..w {
                assert_eq!(m.entry(i, i), 0);
                for j in 0..w {
                    assert_eq!(m.entry(i, j), m.entry(j, i));
                    assert_eq!(m.entry(i, j), u8::from(i / n != j / n));
                }
            }
        }
    }

    #[test]
    fn layouts_agree_in_deterministic_mode() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 3);
        let queries = dec.ensemble_queries(EnsembleMode::GroupEnsemble);
        let mask = build_group_mask(cfg.num_groups, cfg.queries_per_group);
        let joint = dec
            .forward(&feats, &queries, &mask, ForwardMode::Deterministic, Layout::MaskedJoint)
            .unwrap();
        let batched = dec
            .forward(&feats, &queries, &mask, ForwardMode::Deterministic, Layout::BatchedGroups)
            .unwrap();
        let sequential = dec
            .forward(
                &feats,
                &queries,
                &mask,
                ForwardMode::Deterministic,
                Layout::SequentialGroups,
            )
            .unwrap();
        for g in 0..cfg.num_groups {
            assert!(joint[g].max_abs_diff(&sequential[g]) < 1e-6);
            assert!(batched[g].max_abs_diff(&joint[g]) < 1e-6);
        }
    }

    #[test]
    fn layouts_agree_in_dropout_mode() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 3);
        let queries = dec.ensemble_queries(EnsembleMode::GroupEnsemble);
        let mask = build_group_mask(cfg.num_groups, cfg.queries_per_group);
        let mode = ForwardMode::Dropout { seed: 99 };
        let joint = dec
            .forward(&feats, &queries, &mask, mode, Layout::MaskedJoint)
            .unwrap();
        let batched = dec
            .forward(&feats, &queries, &mask, mode, Layout::BatchedGroups)
            .unwrap();
        for g in 0..cfg.num_groups {
            assert!(joint[g].max_abs_diff(&batched[g]) < 1e-12);
        }
    }

    #[test]
    fn duplicated_groups_identical_outputs() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 5);
        let queries = dec.ensemble_queries(EnsembleMode::McDropout);
        let mask = build_group_mask(cfg.num_groups, cfg.queries_per_group);
        let out = dec
            .forward(&feats, &queries, &mask, ForwardMode::Deterministic, Layout::MaskedJoint)
            .unwrap();
        for g in 1..cfg.num_groups {
            assert!(out[0].max_abs_diff(&out[g]) < 1e-12);
        }
    }

    #[test]
    fn group_isolation_under_masked_joint() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 5);
        let base = dec.ensemble_queries(EnsembleMode::GroupEnsemble);
        let mut perturbed = base.clone();
        for v in 0..cfg.embed_dim {
            let old = perturbed.groups[1].get(0, v);
            perturbed.groups[1].set(0, v, old + 0.25);
        }
        let mask = build_group_mask(cfg.num_groups, cfg.queries_per_group);
        let a = dec
            .forward(&feats, &base, &mask, ForwardMode::Deterministic, Layout::MaskedJoint)
            .unwrap();
        let b = dec
            .forward(&feats, &perturbed, &mask, ForwardMode::Deterministic, Layout::MaskedJoint)
            .unwrap();
        assert!(a[0].max_abs_diff(&b[0]) <= 1e-12);
        assert!(a[2].max_abs_diff(&b[2]) <= 1e-12);
        assert!(a[1].max_abs_diff(&b[1]) > 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 1);
        let a = run_ensemble_pass(&feats, &cfg, EnsembleMode::McGroupEnsemble).unwrap();
        let b = run_ensemble_pass(&feats, &cfg, EnsembleMode::McGroupEnsemble).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_mode_single_set() {
        let cfg = small_config();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 1);
        let sets = run_ensemble_pass(&feats, &cfg, EnsembleMode::Deterministic).unwrap();
        assert_eq!(sets.num_groups(), 1);
        assert_eq!(sets.groups[0].len(), cfg.queries_per_group);
    }

    #[test]
    fn mc_dropout_p_zero_duplicates_exactly() {
        let mut cfg = small_config();
        cfg.dropout_prob = 0.0;
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 2);
        let sets = run_ensemble_pass(&feats, &cfg, EnsembleMode::McDropout).unwrap();
        for g in 1..sets.num_groups() {
            for (a, b) in sets.groups[0].iter().zip(&sets.groups[g]) {
                assert_eq!((a.bbox, a.class, a.confidence), (b.bbox, b.class, b.confidence));
            }
        }
    }

    #[test]
    fn mc_dropout_produces_diverse_groups() {
        // Independent per-group dropout masks should perturb at least one
        // group pair for nearly every seed; check several.
        let mut diverse = 0;
        for seed in 0..5u64 {
            let mut cfg = small_config();
            cfg.embed_dim = 32;
            cfg.num_heads = 4;
            cfg.dropout_seed = seed;
            let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, seed);
            let sets = run_ensemble_pass(&feats, &cfg, EnsembleMode::McDropout).unwrap();
            let differs = (1..sets.num_groups()).any(|g| {
                sets.groups[g]
                    .iter()
                    .zip(&sets.groups[0])
                    .any(|(a, b)| (a.bbox, a.class, a.confidence) != (b.bbox, b.class, b.confidence))
            });
            diverse += usize::from(differs);
        }
        assert_eq!(diverse, 5, "dropout failed to diversify duplicated groups");
    }

    #[test]
    fn arity_is_exact() {
        let cfg = small_config();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 4);
        let sets = run_ensemble_pass(&feats, &cfg, EnsembleMode::GroupEnsemble).unwrap();
        assert_eq!(sets.num_groups(), cfg.num_groups);
        for g in &sets.groups {
            assert_eq!(g.len(), cfg.queries_per_group);
        }
        assert_eq!(sets.pooled().len(), cfg.total_queries());
    }

    #[test]
    fn zeroed_heads_yield_midpoint_outputs() {
        let cfg = small_config();
        let mut dec = Decoder::new(cfg).unwrap();
        dec.zero_heads_for_test();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 1);
        let queries = dec.ensemble_queries(EnsembleMode::Deterministic);
        let mask = build_group_mask(1, cfg.queries_per_group);
        let out = dec
            .forward(&feats, &queries, &mask, ForwardMode::Deterministic, Layout::BatchedGroups)
            .unwrap();
        let dets = dec.task_heads(&out[0], 1);
        for d in dets {
            assert_eq!(d.confidence, 0.5);
            assert_eq!(d.class, 1);
            assert_eq!(d.bbox.coords(), [0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let bad_feats = ImageFeatures::seeded(cfg.feature_tokens + 1, cfg.embed_dim, 1);
        let queries = dec.ensemble_queries(EnsembleMode::GroupEnsemble);
        let mask = build_group_mask(cfg.num_groups, cfg.queries_per_group);
        assert!(matches!(
            dec.forward(&bad_feats, &queries, &mask, ForwardMode::Deterministic, Layout::MaskedJoint),
            Err(Error::Dimension(_))
        ));
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 1);
        let wrong_mask = build_group_mask(cfg.num_groups + 1, cfg.queries_per_group);
        assert!(matches!(
            dec.forward(&feats, &queries, &wrong_mask, ForwardMode::Deterministic, Layout::MaskedJoint),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config();
        cfg.embed_dim = 15; // not divisible by 4 heads
        assert!(Decoder::new(cfg).is_err());
        let mut cfg = small_config();
        cfg.dropout_prob = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn weights_round_trip_through_json() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let json = serde_json::to_string(&dec.to_weights_file()).unwrap();
        let wf: WeightsFile = serde_json::from_str(&json).unwrap();
        let restored = Decoder::from_weights_file(&wf).unwrap();
        let feats = ImageFeatures::seeded(cfg.feature_tokens, cfg.embed_dim, 9);
        let a = dec.run_ensemble(&feats, EnsembleMode::GroupEnsemble).unwrap();
        let b = restored
            .run_ensemble(&feats, EnsembleMode::GroupEnsemble)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_load_validates_shapes() {
        let cfg = small_config();
        let dec = Decoder::new(cfg).unwrap();
        let mut wf = dec.to_weights_file();
        wf.layers[0].ffn_w1.pop();
        assert!(matches!(
            Decoder::from_weights_file(&wf),
            Err(Error::Dimension(_))
        ));
    }
}
