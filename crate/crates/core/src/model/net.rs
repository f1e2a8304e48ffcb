//! The micro transformer: embeddings, attention blocks with residuals
//! and a ReLU feed-forward (no layer normalization), a tied set of
//! LoRA adapters, a language-model head, and an optional CLS head.
//! Forward and backward passes are written out by hand.

use super::attention::{softmax_rows_masked, softmax_vec, AttnMode};
use super::lora::{merge_adapter, LoraAdapter, ProjectionKind};
use super::ModelError;
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    pub cls_token_id: usize,
}

impl ModelDims {
    pub fn desk_default(vocab_size: usize, cls_token_id: usize) -> Self {
        ModelDims {
            vocab_size,
            d_model: 64,
            head_dim: 16,
            n_heads: 2,
            n_layers: 2,
            max_seq: 64,
            d_ff: 128,
            cls_token_id,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all_positive = self.vocab_size > 0
            && self.d_model > 0
            && self.head_dim > 0
            && self.n_heads > 0
            && self.n_layers > 0
            && self.max_seq > 0
            && self.d_ff > 0;
        if !all_positive {
            return Err(ModelError::ShapeMismatch {
                op: "ModelDims",
                expected: "positive dimensions".into(),
                got: format!("{self:?}"),
            });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::ShapeMismatch {
                op: "ModelDims",
                expected: format!("d_model divisible by {} heads", self.n_heads),
                got: format!("d_model {}", self.d_model),
            });
        }
        if self.cls_token_id >= self.vocab_size {
            return Err(ModelError::IndexOutOfRange {
                id: self.cls_token_id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub w_o: Array2<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsHead {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl ClsHead {
    pub fn zeros(categories: usize, d_model: usize) -> Self {
        ClsHead {
            w: Array2::zeros((categories, d_model)),
            b: Array1::zeros(categories),
        }
    }

    pub fn categories(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroTransformer {
    pub dims: ModelDims,
    pub token_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub w_lm: Array2<f64>,
    pub b_lm: Array1<f64>,
    pub adapters: Vec<LoraAdapter>,
    pub cls_head: Option<ClsHead>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| gaussian(rng) * std)
}

pub(super) struct HeadCache {
    eff: HeadWeights,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Array2<f64>,
}

pub(super) struct LayerCache {
    x_in: Array2<f64>,
    heads: Vec<HeadCache>,
    concat: Array2<f64>,
    x_mid: Array2<f64>,
    ff_pre: Array2<f64>,
}

pub(super) struct ForwardCache {
    tokens: Vec<u32>,
    layers: Vec<LayerCache>,
    pub(super) x_final: Array2<f64>,
}

/// Gradients shaped exactly like the model's tensors. Base gradients
/// are always computed; which of them get applied is the optimizer's
/// decision.
pub struct Gradients {
    pub token_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub w_lm: Array2<f64>,
    pub b_lm: Array1<f64>,
    pub adapters: Vec<(Array2<f64>, Array2<f64>)>,
    pub cls: Option<ClsHead>,
}

impl Gradients {
    pub fn zeros_like(model: &MicroTransformer) -> Self {
        let zero_layer = |l: &LayerWeights| LayerWeights {
            heads: l
                .heads
                .iter()
                .map(|h| HeadWeights {
                    w_q: Array2::zeros(h.w_q.dim()),
                    w_k: Array2::zeros(h.w_k.dim()),
                    w_v: Array2::zeros(h.w_v.dim()),
                })
                .collect(),
            w_o: Array2::zeros(l.w_o.dim()),
            w_ff1: Array2::zeros(l.w_ff1.dim()),
            b_ff1: Array1::zeros(l.b_ff1.len()),
            w_ff2: Array2::zeros(l.w_ff2.dim()),
            b_ff2: Array1::zeros(l.b_ff2.len()),
        };
        Gradients {
            token_embed: Array2::zeros(model.token_embed.dim()),
            pos_embed: Array2::zeros(model.pos_embed.dim()),
            layers: model.layers.iter().map(zero_layer).collect(),
            w_lm: Array2::zeros(model.w_lm.dim()),
            b_lm: Array1::zeros(model.b_lm.len()),
            adapters: model
                .adapters
                .iter()
                .map(|a| (Array2::zeros(a.a.dim()), Array2::zeros(a.b.dim())))
                .collect(),
            cls: model.cls_head.as_ref().map(|h| ClsHead {
                w: Array2::zeros(h.w.dim()),
                b: Array1::zeros(h.b.len()),
            }),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.token_embed *= factor;
        self.pos_embed *= factor;
        for l in &mut self.layers {
            for h in &mut l.heads {
                h.w_q *= factor;
                h.w_k *= factor;
                h.w_v *= factor;
            }
            l.w_o *= factor;
            l.w_ff1 *= factor;
            l.b_ff1 *= factor;
            l.w_ff2 *= factor;
            l.b_ff2 *= factor;
        }
        self.w_lm *= factor;
        self.b_lm *= factor;
        for (a, b) in &mut self.adapters {
            *a *= factor;
            *b *= factor;
        }
        if let Some(c) = &mut self.cls {
            c.w *= factor;
            c.b *= factor;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        self.token_embed += &other.token_embed;
        self.pos_embed += &other.pos_embed;
        for (l, ol) in self.layers.iter_mut().zip(&other.layers) {
            for (h, oh) in l.heads.iter_mut().zip(&ol.heads) {
                h.w_q += &oh.w_q;
                h.w_k += &oh.w_k;
                h.w_v += &oh.w_v;
            }
            l.w_o += &ol.w_o;
            l.w_ff1 += &ol.w_ff1;
            l.b_ff1 += &ol.b_ff1;
            l.w_ff2 += &ol.w_ff2;
            l.b_ff2 += &ol.b_ff2;
        }
        self.w_lm += &other.w_lm;
        self.b_lm += &other.b_lm;
        for ((a, b), (oa, ob)) in self.adapters.iter_mut().zip(&other.adapters) {
            *a += oa;
            *b += ob;
        }
        if let (Some(c), Some(oc)) = (&mut self.cls, &other.cls) {
            c.w += &oc.w;
            c.b += &oc.b;
        }
    }
}

/// −log softmax(logits)[target], computed with a max shift.
pub fn cross_entropy_loss(logits: &Array1<f64>, target: usize) -> Result<f64, ModelError> {
    if target >= logits.len() {
        return Err(ModelError::IndexOutOfRange {
            id: target,
            vocab: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.mapv(|z| (z - max).exp()).sum().ln();
    Ok(lse - logits[target])
}

impl MicroTransformer {
    /// Randomly initialized model, deterministic per seed. Weight scales
    /// are chosen so activations stay order-one without normalization
    /// layers.
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let k = dims.head_dim;
        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..dims.n_layers)
            .map(|_| LayerWeights {
                heads: (0..dims.n_heads)
                    .map(|_| HeadWeights {
                        w_q: random_matrix(d, k, proj_std, &mut rng),
                        w_k: random_matrix(d, k, proj_std, &mut rng),
                        w_v: random_matrix(d, k, proj_std, &mut rng),
                    })
                    .collect(),
                w_o: random_matrix(
                    dims.n_heads * k,
                    d,
                    1.0 / ((dims.n_heads * k) as f64).sqrt(),
                    &mut rng,
                ),
                w_ff1: random_matrix(d, dims.d_ff, proj_std, &mut rng),
                b_ff1: Array1::zeros(dims.d_ff),
                w_ff2: random_matrix(dims.d_ff, d, 1.0 / (dims.d_ff as f64).sqrt(), &mut rng),
                b_ff2: Array1::zeros(d),
            })
            .collect();
        Ok(MicroTransformer {
            dims,
            token_embed: random_matrix(dims.vocab_size, d, 0.5, &mut rng),
            pos_embed: random_matrix(dims.max_seq, d, 0.5, &mut rng),
            layers,
            w_lm: random_matrix(d, dims.vocab_size, proj_std, &mut rng),
            b_lm: Array1::zeros(dims.vocab_size),
            adapters: Vec::new(),
            cls_head: None,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.dims.validate()?;
        let d = self.dims.d_model;
        let k = self.dims.head_dim;
        let check = |cond: bool, op: &'static str, expected: String, got: String| {
            if cond {
                Ok(())
            } else {
                Err(ModelError::ShapeMismatch { op, expected, got })
            }
        };
        check(
            self.token_embed.dim() == (self.dims.vocab_size, d),
            "token_embed",
            format!("({}, {d})", self.dims.vocab_size),
            format!("{:?}", self.token_embed.dim()),
        )?;
        check(
            self.pos_embed.dim() == (self.dims.max_seq, d),
            "pos_embed",
            format!("({}, {d})", self.dims.max_seq),
            format!("{:?}", self.pos_embed.dim()),
        )?;
        check(
            self.layers.len() == self.dims.n_layers,
            "layers",
            format!("{}", self.dims.n_layers),
            format!("{}", self.layers.len()),
        )?;
        for l in &self.layers {
            check(
                l.heads.len() == self.dims.n_heads,
                "heads",
                format!("{}", self.dims.n_heads),
                format!("{}", l.heads.len()),
            )?;
            for h in &l.heads {
                for w in [&h.w_q, &h.w_k, &h.w_v] {
                    check(
                        w.dim() == (d, k),
                        "projection",
                        format!("({d}, {k})"),
                        format!("{:?}", w.dim()),
                    )?;
                }
            }
            check(
                l.w_o.dim() == (self.dims.n_heads * k, d),
                "w_o",
                format!("({}, {d})", self.dims.n_heads * k),
                format!("{:?}", l.w_o.dim()),
            )?;
        }
        check(
            self.w_lm.dim() == (d, self.dims.vocab_size),
            "w_lm",
            format!("({d}, {})", self.dims.vocab_size),
            format!("{:?}", self.w_lm.dim()),
        )?;
        for a in &self.adapters {
            if a.layer >= self.dims.n_layers || a.head >= self.dims.n_heads {
                return Err(ModelError::AdapterOutOfRange {
                    layer: a.layer,
                    head: a.head,
                    layers: self.dims.n_layers,
                    heads: self.dims.n_heads,
                });
            }
        }
        Ok(())
    }

    /// Installs one fresh adapter per (layer, head, projection) triple
    /// for the requested projections, replacing whatever was installed.
    pub fn install_adapters(
        &mut self,
        projections: &[ProjectionKind],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<(), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapters = Vec::new();
        for layer in 0..self.dims.n_layers {
            for head in 0..self.dims.n_heads {
                for kind in projections {
                    adapters.push(LoraAdapter::init(
                        layer,
                        head,
                        *kind,
                        self.dims.d_model,
                        self.dims.head_dim,
                        rank,
                        alpha,
                        &mut rng,
                    )?);
                }
            }
        }
        self.adapters = adapters;
        Ok(())
    }

    pub fn lora_param_count(&self) -> usize {
        self.adapters.iter().map(|a| a.param_count()).sum()
    }

    /// Projection weights for one head with every matching adapter's
    /// update added in.
    fn effective_head(&self, layer: usize, head: usize) -> Result<HeadWeights, ModelError> {
        let base = &self.layers[layer].heads[head];
        let mut eff = base.clone();
        for a in &self.adapters {
            if a.layer != layer || a.head != head {
                continue;
            }
            let target = match a.kind {
                ProjectionKind::Q => &mut eff.w_q,
                ProjectionKind::K => &mut eff.w_k,
                ProjectionKind::V => &mut eff.w_v,
            };
            *target = merge_adapter(target, a)?;
        }
        Ok(eff)
    }

    /// Returns a copy with all adapter updates folded into the base
    /// projections and the adapter list emptied.
    pub fn merge_all_adapters(&self) -> Result<MicroTransformer, ModelError> {
        let mut merged = self.clone();
        for layer in 0..self.dims.n_layers {
            for head in 0..self.dims.n_heads {
                merged.layers[layer].heads[head] = self.effective_head(layer, head)?;
            }
        }
        merged.adapters.clear();
        Ok(merged)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::ShapeMismatch {
                op: "forward",
                expected: "non-empty token sequence".into(),
                got: "0 tokens".into(),
            });
        }
        if tokens.len() > self.dims.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.dims.max_seq,
            });
        }
        for &t in tokens {
            if t as usize >= self.dims.vocab_size {
                return Err(ModelError::IndexOutOfRange {
                    id: t as usize,
                    vocab: self.dims.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Array2<f64> {
        let n = tokens.len();
        let d = self.dims.d_model;
        let mut x = Array2::zeros((n, d));
        for (i, &t) in tokens.iter().enumerate() {
            let row = &self.token_embed.row(t as usize) + &self.pos_embed.row(i);
            x.row_mut(i).assign(&row);
        }
        x
    }

    pub(super) fn forward_cached(
        &self,
        tokens: &[u32],
        mode: AttnMode,
    ) -> Result<ForwardCache, ModelError> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let k = self.dims.head_dim;
        let mut x = self.embed(tokens);
        let mut layers = Vec::with_capacity(self.dims.n_layers);
        for li in 0..self.dims.n_layers {
            let layer = &self.layers[li];
            let x_in = x.clone();
            let mut heads = Vec::with_capacity(self.dims.n_heads);
            let mut concat = Array2::zeros((n, self.dims.n_heads * k));
            for hi in 0..self.dims.n_heads {
                let eff = self.effective_head(li, hi)?;
                let q = x_in.dot(&eff.w_q);
                let key = x_in.dot(&eff.w_k);
                let v = x_in.dot(&eff.w_v);
                let scores = q.dot(&key.t()) / (k as f64).sqrt();
                let probs = softmax_rows_masked(&scores, mode);
                let out = probs.dot(&v);
                concat
                    .slice_mut(ndarray::s![.., hi * k..(hi + 1) * k])
                    .assign(&out);
                heads.push(HeadCache {
                    eff,
                    q,
                    k: key,
                    v,
                    probs,
                });
            }
            let x_mid = &x_in + &concat.dot(&layer.w_o);
            let ff_pre = &x_mid.dot(&layer.w_ff1) + &layer.b_ff1;
            let ff = ff_pre.mapv(|z| z.max(0.0));
            x = &x_mid + &ff.dot(&layer.w_ff2) + &layer.b_ff2;
            layers.push(LayerCache {
                x_in,
                heads,
                concat,
                x_mid,
                ff_pre,
            });
        }
        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            x_final: x,
        })
    }

    /// Final-position vocabulary logits under the causal mask.
    pub fn lm_logits(&self, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        let cache = self.forward_cached(tokens, AttnMode::Causal)?;
        let last = cache.x_final.row(cache.tokens.len() - 1);
        Ok(&last.dot(&self.w_lm) + &self.b_lm)
    }

    /// Softmax over the whole vocabulary at the final step.
    pub fn predict_distribution(&self, tokens: &[u32]) -> Result<Array1<f64>, ModelError> {
        Ok(softmax_vec(&self.lm_logits(tokens)?))
    }

    /// Label-constrained mode: probability mass renormalized over the
    /// allowed token ids only; everything else is exactly zero.
    pub fn predict_constrained(
        &self,
        tokens: &[u32],
        allowed: &[u32],
    ) -> Result<Array1<f64>, ModelError> {
        let logits = self.lm_logits(tokens)?;
        for &a in allowed {
            if a as usize >= logits.len() {
                return Err(ModelError::IndexOutOfRange {
                    id: a as usize,
                    vocab: logits.len(),
                });
            }
        }
        let restricted: Array1<f64> =
            Array1::from_iter(allowed.iter().map(|&a| logits[a as usize]));
        let local = softmax_vec(&restricted);
        let mut out = Array1::zeros(logits.len());
        for (i, &a) in allowed.iter().enumerate() {
            out[a as usize] = local[i];
        }
        Ok(out)
    }

    /// Argmax of the constrained distribution: the generated label
    /// token id.
    pub fn generate_label(&self, tokens: &[u32], allowed: &[u32]) -> Result<u32, ModelError> {
        let dist = self.predict_constrained(tokens, allowed)?;
        let best = allowed
            .iter()
            .copied()
            .max_by(|&a, &b| {
                dist[a as usize]
                    .partial_cmp(&dist[b as usize])
                    .expect("finite probabilities")
            })
            .expect("non-empty allowed set");
        Ok(best)
    }

    /// Encoder-mode category distribution from the CLS position. The
    /// sequence must begin with the designated CLS token.
    pub fn cls_forward(&self, tokens: &[u32], head: &ClsHead) -> Result<Array1<f64>, ModelError> {
        if tokens.first() != Some(&(self.dims.cls_token_id as u32)) {
            return Err(ModelError::MissingClsToken);
        }
        let cache = self.forward_cached(tokens, AttnMode::Bidirectional)?;
        let h = cache.x_final.row(0);
        Ok(softmax_vec(&(&head.w.dot(&h) + &head.b)))
    }

    /// Loss and full gradient set for one example. In decoder mode the
    /// target is a vocabulary token id; in encoder mode it is a category
    /// index into the CLS head.
    pub fn loss_and_grads(
        &self,
        tokens: &[u32],
        target: usize,
        mode: AttnMode,
    ) -> Result<(f64, Gradients), ModelError> {
        let mut grads = Gradients::zeros_like(self);
        let loss = self.accumulate_grads(tokens, target, mode, &mut grads)?;
        Ok((loss, grads))
    }

    pub(super) fn accumulate_grads(
        &self,
        tokens: &[u32],
        target: usize,
        mode: AttnMode,
        grads: &mut Gradients,
    ) -> Result<f64, ModelError> {
        let cache = self.forward_cached(tokens, mode)?;
        let n = cache.tokens.len();
        let mut dx_final = Array2::zeros(cache.x_final.dim());
        let loss;
        match mode {
            AttnMode::Causal => {
                let last = cache.x_final.row(n - 1);
                let logits = &last.dot(&self.w_lm) + &self.b_lm;
                loss = cross_entropy_loss(&logits, target)?;
                let mut dz = softmax_vec(&logits);
                dz[target] -= 1.0;
                grads
                    .w_lm
                    .scaled_add(1.0, &outer(&last.to_owned(), &dz));
                grads.b_lm += &dz;
                dx_final.row_mut(n - 1).assign(&self.w_lm.dot(&dz));
            }
            AttnMode::Bidirectional => {
                if tokens.first() != Some(&(self.dims.cls_token_id as u32)) {
                    return Err(ModelError::MissingClsToken);
                }
                let head = self.cls_head.as_ref().ok_or(ModelError::ShapeMismatch {
                    op: "cls training",
                    expected: "a CLS head".into(),
                    got: "none installed".into(),
                })?;
                let h = cache.x_final.row(0).to_owned();
                let logits = &head.w.dot(&h) + &head.b;
                loss = cross_entropy_loss(&logits, target)?;
                let mut du = softmax_vec(&logits);
                du[target] -= 1.0;
                let cls_grads = grads.cls.as_mut().expect("cls grads mirror cls head");
                cls_grads.w.scaled_add(1.0, &outer(&du, &h));
                cls_grads.b += &du;
                dx_final.row_mut(0).assign(&head.w.t().dot(&du));
            }
        }
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: 0, loss });
        }

        let mut dx = dx_final;
        let k = self.dims.head_dim;
        let scale = 1.0 / (k as f64).sqrt();
        for li in (0..self.dims.n_layers).rev() {
            let layer = &self.layers[li];
            let lc = &cache.layers[li];
            let lg = &mut grads.layers[li];

            let ff = lc.ff_pre.mapv(|z| z.max(0.0));
            let d_ff_out = dx.dot(&layer.w_ff2.t());
            lg.w_ff2 += &ff.t().dot(&dx);
            lg.b_ff2 += &dx.sum_axis(Axis(0));
            let d_ff_pre = &d_ff_out * &lc.ff_pre.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 });
            lg.w_ff1 += &lc.x_mid.t().dot(&d_ff_pre);
            lg.b_ff1 += &d_ff_pre.sum_axis(Axis(0));
            let dx_mid = &dx + &d_ff_pre.dot(&layer.w_ff1.t());

            let dconcat = dx_mid.dot(&layer.w_o.t());
            lg.w_o += &lc.concat.t().dot(&dx_mid);
            let mut dx_in = dx_mid.clone();
            for hi in 0..self.dims.n_heads {
                let hc = &lc.heads[hi];
                let hg = &mut lg.heads[hi];
                let d_out = dconcat.slice(ndarray::s![.., hi * k..(hi + 1) * k]);
                let dprobs = d_out.dot(&hc.v.t());
                let dv = hc.probs.t().dot(&d_out);
                let weighted = &hc.probs * &dprobs;
                let row_dot = weighted.sum_axis(Axis(1));
                let mut ds = dprobs;
                for i in 0..n {
                    for j in 0..n {
                        ds[[i, j]] = hc.probs[[i, j]] * (ds[[i, j]] - row_dot[i]);
                    }
                }
                let dq = ds.dot(&hc.k) * scale;
                let dk = ds.t().dot(&hc.q) * scale;
                let dwq = lc.x_in.t().dot(&dq);
                let dwk = lc.x_in.t().dot(&dk);
                let dwv = lc.x_in.t().dot(&dv);
                dx_in += &dq.dot(&hc.eff.w_q.t());
                dx_in += &dk.dot(&hc.eff.w_k.t());
                dx_in += &dv.dot(&hc.eff.w_v.t());
                hg.w_q += &dwq;
                hg.w_k += &dwk;
                hg.w_v += &dwv;
                for (ai, a) in self.adapters.iter().enumerate() {
                    if a.layer != li || a.head != hi {
                        continue;
                    }
                    let dw_eff = match a.kind {
                        ProjectionKind::Q => &dwq,
                        ProjectionKind::K => &dwk,
                        ProjectionKind::V => &dwv,
                    };
                    let (da, db) = &mut grads.adapters[ai];
                    da.scaled_add(a.scale(), &dw_eff.dot(&a.b.t()));
                    db.scaled_add(a.scale(), &a.a.t().dot(dw_eff));
                }
            }
            dx = dx_in;
        }

        for (i, &t) in cache.tokens.iter().enumerate() {
            let row = dx.row(i);
            let mut e = grads.token_embed.row_mut(t as usize);
            e += &row;
            let mut p = grads.pos_embed.row_mut(i);
            p += &row;
        }
        Ok(loss)
    }

    /// SHA-256 over the dimension record and every base tensor, in a
    /// fixed order. Adapters and the CLS head are deliberately outside
    /// the base: this hash is the frozen-base witness.
    pub fn base_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let dims = self.dims;
        for v in [
            dims.vocab_size,
            dims.d_model,
            dims.head_dim,
            dims.n_heads,
            dims.n_layers,
            dims.max_seq,
            dims.d_ff,
            dims.cls_token_id,
        ] {
            hasher.update((v as u64).to_le_bytes());
        }
        let feed2 = |m: &Array2<f64>, hasher: &mut Sha256| {
            for &x in m.iter() {
                hasher.update(x.to_le_bytes());
            }
        };
        feed2(&self.token_embed, &mut hasher);
        feed2(&self.pos_embed, &mut hasher);
        for l in &self.layers {
            for h in &l.heads {
                feed2(&h.w_q, &mut hasher);
                feed2(&h.w_k, &mut hasher);
                feed2(&h.w_v, &mut hasher);
            }
            feed2(&l.w_o, &mut hasher);
            feed2(&l.w_ff1, &mut hasher);
            for &x in l.b_ff1.iter() {
                hasher.update(x.to_le_bytes());
            }
            feed2(&l.w_ff2, &mut hasher);
            for &x in l.b_ff2.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        feed2(&self.w_lm, &mut hasher);
        for &x in self.b_lm.iter() {
            hasher.update(x.to_le_bytes());
        }
        format!("{:x}", hasher.finalize())
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MicroTransformer {
        let dims = ModelDims {
            vocab_size: 12,
            d_model: 8,
            head_dim: 4,
            n_heads: 2,
            n_layers: 2,
            max_seq: 6,
            d_ff: 8,
            cls_token_id: 2,
        };
        MicroTransformer::new(dims, 42).unwrap()
    }

    #[test]
    fn dims_validation() {
        let mut dims = ModelDims::desk_default(100, 2);
        assert!(dims.validate().is_ok());
        dims.n_heads = 3;
        assert!(dims.validate().is_err());
        dims.n_heads = 2;
        dims.cls_token_id = 100;
        assert!(dims.validate().is_err());
    }

    #[test]
    fn distribution_sums_to_one_and_respects_constraint() {
        let m = tiny();
        let tokens = [1u32, 3, 5];
        let dist = m.predict_distribution(&tokens).unwrap();
        assert!((dist.sum() - 1.0).abs() < 1e-9);
        let allowed = [2u32, 7, 9];
        let constrained = m.predict_constrained(&tokens, &allowed).unwrap();
        assert!((constrained.sum() - 1.0).abs() < 1e-9);
        for (i, &p) in constrained.iter().enumerate() {
            if allowed.contains(&(i as u32)) {
                assert!(p > 0.0);
            } else {
                assert_eq!(p, 0.0);
            }
        }
        let label = m.generate_label(&tokens, &allowed).unwrap();
        let best = allowed
            .iter()
            .copied()
            .max_by(|&a, &b| constrained[a as usize].partial_cmp(&constrained[b as usize]).unwrap())
            .unwrap();
        assert_eq!(label, best);
    }

    #[test]
    fn uniform_logits_give_uniform_distribution() {
        let logits = Array1::zeros(4);
        let p = softmax_vec(&logits);
        for &x in p.iter() {
            assert!((x - 0.25).abs() < 1e-12);
        }
        let loss = cross_entropy_loss(&logits, 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_monotone_in_target_logit() {
        let mut prev = f64::INFINITY;
        for boost in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let mut logits = Array1::zeros(5);
            logits[1] = boost;
            let loss = cross_entropy_loss(&logits, 1).unwrap();
            assert!(loss < prev);
            assert!(loss >= 0.0);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_two_pass_oracle() {
        let logits = Array1::from(vec![0.3, -2.0, 5.5, 1.1, -0.7]);
        let loss = cross_entropy_loss(&logits, 3).unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.mapv(|z| (z - max).exp()).sum().ln();
        let oracle = lse - logits[3];
        assert!((loss - oracle).abs() < 1e-12);
        assert!(matches!(
            cross_entropy_loss(&logits, 5),
            Err(ModelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn sequence_limits_enforced() {
        let m = tiny();
        assert!(matches!(
            m.predict_distribution(&[1; 7]),
            Err(ModelError::SequenceTooLong { len: 7, max: 6 })
        ));
        assert!(matches!(
            m.predict_distribution(&[99]),
            Err(ModelError::IndexOutOfRange { .. })
        ));
        assert!(m.predict_distribution(&[]).is_err());
    }

    #[test]
    fn cls_forward_contract() {
        let m = tiny();
        let head = ClsHead::zeros(7, 8);
        let uniform = m.cls_forward(&[2, 1, 3], &head).unwrap();
        for &p in uniform.iter() {
            assert!((p - 1.0 / 7.0).abs() < 1e-12);
        }
        assert!((uniform.sum() - 1.0).abs() < 1e-9);
        assert!(matches!(
            m.cls_forward(&[1, 2, 3], &head),
            Err(ModelError::MissingClsToken)
        ));
    }

    #[test]
    fn merged_path_matches_adapter_path() {
        let mut m = tiny();
        m.install_adapters(
            &[ProjectionKind::Q, ProjectionKind::K, ProjectionKind::V],
            2,
            16.0,
            9,
        )
        .unwrap();
        for a in &mut m.adapters {
            a.b.mapv_inplace(|_| 0.03);
        }
        let merged = m.merge_all_adapters().unwrap();
        assert!(merged.adapters.is_empty());
        let tokens = [1u32, 4, 7, 2];
        let via_adapters = m.lm_logits(&tokens).unwrap();
        let via_merged = merged.lm_logits(&tokens).unwrap();
        for (a, b) in via_adapters.iter().zip(via_merged.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checksum_ignores_adapters_but_sees_base_changes() {
        let mut m = tiny();
        let before = m.base_checksum();
        m.install_adapters(&[ProjectionKind::Q], 2, 16.0, 3).unwrap();
        for a in &mut m.adapters {
            a.b.fill(1.0);
        }
        m.cls_head = Some(ClsHead::zeros(4, 8));
        assert_eq!(m.base_checksum(), before);
        m.layers[0].heads[0].w_q[[0, 0]] += 1e-12;
        assert_ne!(m.base_checksum(), before);
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a, b);
        let c = MicroTransformer::new(a.dims, 43).unwrap();
        assert_ne!(a, c);
    }
}
