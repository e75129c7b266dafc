//! Similarity backends: learned relation networks (plain concatenation and
//! the concatenation-plus-product input), relation scoring against a bank of
//! global speaker prototypes, and the cosine / prototypical baseline.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{Mode, SpeakerEmbedding};
use crate::error::{Error, Result};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a (query, reference) pair is turned into relation-network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationInput {
    /// `[query ‖ reference]`, width `2M`.
    Vanilla,
    /// `[query ‖ reference ‖ query ⊙ reference]`, width `3M`.
    Improved,
}

impl RelationInput {
    pub fn width(self, embedding_dim: usize) -> usize {
        match self {
            RelationInput::Vanilla => 2 * embedding_dim,
            RelationInput::Improved => 3 * embedding_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelationNetConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
    pub negative_slope: f64,
}

impl Default for RelationNetConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![256, 64],
            dropout_rate: 0.2,
            negative_slope: 0.01,
        }
    }
}

impl RelationNetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// A relation score in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct RelationScore(f64);

impl RelationScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Builds the relation-network input vector for one pair.
pub fn relation_input(query: &SpeakerEmbedding, reference: &SpeakerEmbedding, kind: RelationInput) -> Result<Vec<f64>> {
    check_dims(query, reference)?;
    let mut v = Vec::with_capacity(kind.width(query.dim()));
    v.extend_from_slice(&query.values);
    v.extend_from_slice(&reference.values);
    if kind == RelationInput::Improved {
        v.extend(query.values.iter().zip(&reference.values).map(|(a, b)| a * b));
    }
    Ok(v)
}

fn check_dims(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean of the support embeddings of one class.
pub fn aggregate_support(support: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let Some(first) = support.first() else {
        return Err(Error::InvalidInput("cannot aggregate an empty support set".into()));
    };
    let mut acc = vec![0.0; first.dim()];
    for e in support {
        check_dims(first, e)?;
        for (a, v) in acc.iter_mut().zip(&e.values) {
            *a += v;
        }
    }
    let k = support.len() as f64;
    Ok(SpeakerEmbedding::new(acc.into_iter().map(|a| a / k).collect()))
}

fn embeddings_tensor(rows: &[&SpeakerEmbedding]) -> Tensor {
    let m = rows[0].dim();
    let mut data = Vec::with_capacity(rows.len() * m);
    for r in rows {
        data.extend_from_slice(&r.values);
    }
    Tensor::from_vec(&[rows.len(), m], data)
}

#[derive(Clone, Debug)]
pub struct RelationNet {
    pub kind: RelationInput,
    pub embedding_dim: usize,
    pub config: RelationNetConfig,
    /// `(weight [in, out], bias [out])` per layer; the last layer has one
    /// output.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl RelationNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: RelationInput,
        embedding_dim: usize,
        config: RelationNetConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut dims = vec![kind.width(embedding_dim)];
        dims.extend_from_slice(&config.hidden_dims);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let weight = store.add(
                    format!("{name}.fc{}.weight", i + 1),
                    uniform_fan_in(&[w[0], w[1]], w[0], rng),
                    true,
                );
                let bias = store.add(format!("{name}.fc{}.bias", i + 1), Tensor::zeros(&[w[1]]), true);
                (weight, bias)
            })
            .collect();
        Ok(Self {
            kind,
            embedding_dim,
            config,
            layers,
        })
    }

    pub fn input_width(&self) -> usize {
        self.kind.width(self.embedding_dim)
    }

    /// All (query, reference) pair inputs, row `q * R + r`, for `[Q, M]`
    /// queries and `[R, M]` references.
    pub fn pair_inputs(&self, g: &mut Graph, queries: Var, refs: Var) -> Var {
        let (nq, nr) = (g.shape(queries)[0], g.shape(refs)[0]);
        let qi: Vec<usize> = (0..nq).flat_map(|q| std::iter::repeat(q).take(nr)).collect();
        let ri: Vec<usize> = (0..nq).flat_map(|_| 0..nr).collect();
        let q = g.gather_rows(queries, &qi);
        let r = g.gather_rows(refs, &ri);
        match self.kind {
            RelationInput::Vanilla => g.concat(&[q, r], 1),
            RelationInput::Improved => {
                let p = g.mul(q, r);
                g.concat(&[q, r, p], 1)
            }
        }
    }

    /// Runs the MLP on `[P, input_width]` rows, returning `[P, 1]` sigmoid
    /// scores. Dropout is active only in train mode with an rng supplied.
    pub fn score_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mode: Mode,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Var {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let rows = g.shape(h)[0];
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            let y = g.matmul(h, wv);
            let bt = g.tile(bv, rows);
            h = g.add(y, bt);
            if i < last {
                h = g.leaky_relu(h, self.config.negative_slope);
                let p = self.config.dropout_rate;
                if let (Mode::Train, Some(rng), true) = (mode, dropout_rng.as_deref_mut(), p > 0.0) {
                    let shape = g.shape(h).to_vec();
                    let n: usize = shape.iter().product();
                    let keep = 1.0 / (1.0 - p);
                    let mask = (0..n)
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let m = g.constant(Tensor::from_vec(&shape, mask));
                    h = g.mul(h, m);
                }
            }
        }
        g.sigmoid(h)
    }

    /// Relation scores `[Q, R]` between every query and every reference.
    pub fn score_matrix(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        refs: Var,
        mode: Mode,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Var {
        let (nq, nr) = (g.shape(queries)[0], g.shape(refs)[0]);
        let input = self.pair_inputs(g, queries, refs);
        let s = self.score_rows(g, store, input, mode, dropout_rng);
        g.reshape(s, &[nq, nr])
    }

    /// Eval-mode relation of one pair.
    pub fn relation(&self, store: &ParamStore, query: &SpeakerEmbedding, reference: &SpeakerEmbedding) -> Result<RelationScore> {
        Ok(self.relation_many(store, &[(query, reference)])?[0])
    }

    /// Eval-mode relations of many pairs in one batched pass.
    pub fn relation_many(
        &self,
        store: &ParamStore,
        pairs: &[(&SpeakerEmbedding, &SpeakerEmbedding)],
    ) -> Result<Vec<RelationScore>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(pairs.len() * self.input_width());
        for (q, r) in pairs {
            if q.dim() != self.embedding_dim {
                return Err(Error::Shape(format!(
                    "relation net expects {}-d embeddings, got {}",
                    self.embedding_dim,
                    q.dim()
                )));
            }
            data.extend(relation_input(q, r, self.kind)?);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[pairs.len(), self.input_width()], data));
        let s = self.score_rows(&mut g, store, x, Mode::Eval, None);
        Ok(g.value(s).data().iter().map(|&v| RelationScore(v)).collect())
    }

    /// Relation of `query` against every prototype in the bank.
    pub fn relation_global(
        &self,
        store: &ParamStore,
        query: &SpeakerEmbedding,
        bank: &GlobalPrototypeBank,
    ) -> Result<Vec<RelationScore>> {
        if bank.len(store) == 0 {
            return Err(Error::InvalidInput("global prototype bank is empty".into()));
        }
        if query.dim() != bank.dim(store) {
            return Err(Error::Shape(format!(
                "query has {} dims, bank rows have {}",
                query.dim(),
                bank.dim(store)
            )));
        }
        let mut g = Graph::new();
        let q = g.constant(embeddings_tensor(&[query]));
        let w = g.param(store, bank.param);
        let s = self.score_matrix(&mut g, store, q, w, Mode::Eval, None);
        Ok(g.value(s).data().iter().map(|&v| RelationScore(v)).collect())
    }
}

/// Learnable prototypes for every training speaker, stored as one `[N', M]`
/// parameter. Row `C - 1` belongs to global class `C`.
#[derive(Clone, Debug)]
pub struct GlobalPrototypeBank {
    pub param: ParamId,
}

impl GlobalPrototypeBank {
    pub const PARAM_NAME: &'static str = "bank.prototypes";

    pub fn new(store: &mut ParamStore, prototypes: &[SpeakerEmbedding]) -> Result<Self> {
        let Some(first) = prototypes.first() else {
            return Err(Error::InvalidInput("global prototype bank needs at least one speaker".into()));
        };
        let mut rows = Vec::with_capacity(prototypes.len() * first.dim());
        for p in prototypes {
            check_dims(first, p)?;
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Degenerate("non-finite prototype".into()));
            }
            rows.extend_from_slice(&p.values);
        }
        let t = Tensor::from_vec(&[prototypes.len(), first.dim()], rows);
        let param = match store.find(Self::PARAM_NAME) {
            Some(id) => {
                *store.value_mut(id) = t;
                store.get_mut(id).grad = Tensor::zeros(&[prototypes.len(), first.dim()]);
                id
            }
            None => store.add(Self::PARAM_NAME, t, true),
        };
        Ok(Self { param })
    }

    pub fn len(&self, store: &ParamStore) -> usize {
        store.value(self.param).dim(0)
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.param).dim(1)
    }

    pub fn prototype(&self, store: &ParamStore, class: usize) -> SpeakerEmbedding {
        SpeakerEmbedding::new(store.value(self.param).row(class - 1).to_vec())
    }
}

pub fn cosine_similarity(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(format!(
            "cosine similarity of a zero-norm embedding (norms {na}, {nb})"
        )));
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Softmax over cosine similarities between a query and class prototypes.
pub fn prototypical_posterior(query: &SpeakerEmbedding, prototypes: &[SpeakerEmbedding]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::InvalidInput("no prototypes".into()));
    }
    let sims = prototypes
        .iter()
        .map(|p| cosine_similarity(query, p))
        .collect::<Result<Vec<_>>>()?;
    let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Row-wise cosine similarity matrix `[Q, R]` on the tape.
pub fn cosine_matrix(g: &mut Graph, queries: Var, refs: Var) -> Var {
    let qn = l2_normalize_rows(g, queries);
    let rn = l2_normalize_rows(g, refs);
    let rt = g.transpose(rn);
    g.matmul(qn, rt)
}

fn l2_normalize_rows(g: &mut Graph, x: Var) -> Var {
    let m = g.shape(x)[1];
    let sq = g.square(x);
    let s = g.sum_last(sq);
    let norm = g.sqrt_floor(s, 1e-12);
    let ne = g.expand_inner(norm, m);
    g.div(x, ne)
}

/// Scores a verification trial from two embeddings.
pub trait VerificationBackend {
    fn score(&self, enroll: &SpeakerEmbedding, test: &SpeakerEmbedding) -> Result<f64>;

    fn score_batch(&self, pairs: &[(&SpeakerEmbedding, &SpeakerEmbedding)]) -> Result<Vec<f64>> {
        pairs.iter().map(|(a, b)| self.score(a, b)).collect()
    }

    fn name(&self) -> &str;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CosineBackend;

impl VerificationBackend for CosineBackend {
    fn score(&self, enroll: &SpeakerEmbedding, test: &SpeakerEmbedding) -> Result<f64> {
        cosine_similarity(enroll, test)
    }

    fn name(&self) -> &str {
        "cosine"
    }
}

/// Relation-network scoring, symmetrised over argument order.
pub struct RelationBackend<'a> {
    pub net: &'a RelationNet,
    pub store: &'a ParamStore,
}

impl VerificationBackend for RelationBackend<'_> {
    fn score(&self, enroll: &SpeakerEmbedding, test: &SpeakerEmbedding) -> Result<f64> {
        Ok(self.score_batch(&[(enroll, test)])?[0])
    }

    fn score_batch(&self, pairs: &[(&SpeakerEmbedding, &SpeakerEmbedding)]) -> Result<Vec<f64>> {
        let mut both = Vec::with_capacity(2 * pairs.len());
        for &(a, b) in pairs {
            both.push((a, b));
            both.push((b, a));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in both.chunks(4096) {
            let s = self.net.relation_many(self.store, chunk)?;
            out.extend(s.chunks(2).map(|p| 0.5 * (p[0].value() + p[1].value())));
        }
        Ok(out)
    }

    fn name(&self) -> &str {
        match self.net.kind {
            RelationInput::Vanilla => "relation-vanilla",
            RelationInput::Improved => "relation-improved",
        }
    }
}

pub fn verification_score(
    e1: &SpeakerEmbedding,
    e2: &SpeakerEmbedding,
    backend: &dyn VerificationBackend,
) -> Result<f64> {
    check_dims(e1, e2)?;
    backend.score(e1, e2)
}
