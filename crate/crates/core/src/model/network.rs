use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::{edge_presence, neighbor_sums};
use super::{AgentInput, ModelConfig, ModelError, ModelVariant, Normalizer, Predictor, Window, EDGE_TYPES};
use crate::nn::{
    blend, read_checkpoint, write_checkpoint, AdditiveAttention, BiLstm, Dense, Gaussian2, GaussianMixture2D,
    Gradients, Graph, GruCell, LstmCell, Mlp, ParamId, ParamSet, Tensor, Var,
};
use crate::scene::Point2;

/// Bounds applied to the mixture head: |log σ| < 7, |ρ| ≤ tanh(3).
const LOG_SIGMA_BOUND: f64 = 7.0;
const CORR_BOUND: f64 = 3.0;

const HISTORY_FEATURES: usize = 9;
const EDGE_FEATURES: usize = 12;
const FUTURE_FEATURES: usize = 4;

/// Categorical over latent modes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub probs: Vec<f64>,
}

impl LatentDistribution {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Per-mode, per-step Gaussians in world coordinates plus the prior weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrediction {
    pub weights: Vec<f64>,
    pub modes: Vec<Vec<Gaussian2>>,
}

impl GmmPrediction {
    /// Predictive mixture over latent modes at `step` (0-based).
    pub fn mixture_at(&self, step: usize) -> GaussianMixture2D {
        let comps = self.modes.iter().map(|m| m[step]).collect();
        GaussianMixture2D::new(self.weights.clone(), comps).expect("prediction invariants")
    }

    pub fn mode_means(&self, z: usize) -> Vec<Point2> {
        self.modes[z].iter().map(|g| Point2::new(g.mean[0], g.mean[1])).collect()
    }
}

#[derive(Debug, Clone)]
struct Layers {
    history: LstmCell,
    edges: Vec<LstmCell>,
    no_neighbor: Vec<ParamId>,
    attention: AdditiveAttention,
    position: Option<Mlp>,
    combine: Mlp,
    prior: Dense,
    future: BiLstm,
    posterior: Dense,
    init_z: ParamId,
    init: Dense,
    step_z: ParamId,
    step_ctx: ParamId,
    decoder: GruCell,
    head: Dense,
}

impl Layers {
    fn new(c: &ModelConfig, ps: &mut ParamSet, rng: &mut impl Rng) -> Self {
        let position = match c.variant {
            ModelVariant::Improved => Some(Mlp::new(
                ps,
                "position",
                &[5 + c.num_clusters + 3, c.position_hidden, c.position_dim],
                true,
                rng,
            )),
            ModelVariant::Baseline => None,
        };
        let p_dim = position.as_ref().map_or(0, Mlp::output);
        let (e, d) = (c.encoding_dim, c.decoder_hidden);
        Layers {
            history: LstmCell::new(ps, "history", HISTORY_FEATURES, c.history_hidden, rng),
            edges: (0..EDGE_TYPES)
                .map(|k| LstmCell::new(ps, &format!("edge{k}"), EDGE_FEATURES, c.edge_hidden, rng))
                .collect(),
            no_neighbor: (0..EDGE_TYPES)
                .map(|k| ps.add_zeros(&format!("edge{k}.empty"), 1, c.edge_hidden))
                .collect(),
            attention: AdditiveAttention::new(ps, "attention", c.edge_hidden, c.history_hidden, c.attention_dim, rng),
            position,
            combine: Mlp::new(ps, "combine", &[c.history_hidden + c.edge_hidden + p_dim, e, e], true, rng),
            prior: Dense::new(ps, "prior", e, c.latent, rng),
            future: BiLstm::new(ps, "future", FUTURE_FEATURES, c.future_hidden, rng),
            posterior: Dense::new(ps, "posterior", e + 2 * c.future_hidden, c.latent, rng),
            init_z: ps.add_glorot("decoder.init_z", c.latent, d, rng),
            init: Dense::new(ps, "decoder.init", e, d, rng),
            step_z: ps.add_glorot("decoder.step_z", c.latent, 3 * d, rng),
            step_ctx: ps.add_glorot("decoder.step_ctx", e, 3 * d, rng),
            decoder: GruCell::new(ps, "decoder.gru", 2, d, rng),
            head: Dense::new(ps, "decoder.head", d, 5, rng),
        }
    }
}

/// How the decoder's previous-offset input is produced.
pub(crate) enum Feedback<'a> {
    /// Ground-truth normalized offsets, one `[rows, 2]` tensor per step.
    Teacher(&'a [Tensor]),
    /// The previous step's predicted mean.
    Mean,
    /// A draw from the previous step's Gaussian; draws are recorded.
    Sample(&'a mut ChaCha8Rng, &'a mut Vec<Tensor>),
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    normalizer: Normalizer,
    cluster_ids: Vec<String>,
}

/// The trajectory model: layers, parameters, and input standardization.
#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub normalizer: Normalizer,
    pub cluster_ids: Vec<String>,
    layers: Layers,
}

impl CvaeModel {
    pub fn new(config: ModelConfig, cluster_ids: Vec<String>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if cluster_ids.len() != config.num_clusters {
            return Err(ModelError::ClusterMismatch {
                expected: config.num_clusters,
                found: cluster_ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers = Layers::new(&config, &mut params, &mut rng);
        Ok(CvaeModel {
            config,
            params,
            normalizer: Normalizer::default(),
            cluster_ids,
            layers,
        })
    }

    pub fn save(&self, w: impl std::io::Write) -> Result<(), ModelError> {
        let meta = Metadata {
            config: self.config.clone(),
            normalizer: self.normalizer.clone(),
            cluster_ids: self.cluster_ids.clone(),
        };
        let text = serde_json::to_string(&meta).map_err(|e| ModelError::Metadata(e.to_string()))?;
        write_checkpoint(w, &self.params, &text)?;
        Ok(())
    }

    pub fn load(r: impl std::io::Read) -> Result<Self, ModelError> {
        let (params, text) = read_checkpoint(r)?;
        let meta: Metadata = serde_json::from_str(&text).map_err(|e| ModelError::Metadata(e.to_string()))?;
        let mut model = CvaeModel::new(meta.config, meta.cluster_ids, 0)?;
        model.params.load_from(&params)?;
        model.normalizer = meta.normalizer;
        Ok(model)
    }

    /// Fails unless the checkpoint's cluster list matches `ids`.
    pub fn check_clusters(&self, ids: &[String]) -> Result<(), ModelError> {
        if self.cluster_ids.len() != ids.len() {
            return Err(ModelError::ClusterMismatch {
                expected: ids.len(),
                found: self.cluster_ids.len(),
            });
        }
        if self.cluster_ids != ids {
            return Err(ModelError::Metadata(format!(
                "checkpoint clusters {:?} differ from geometry clusters {:?}",
                self.cluster_ids, ids
            )));
        }
        Ok(())
    }

    // ---- encoders ----

    pub(crate) fn encode_history(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&AgentInput]) -> Var {
        let b = inputs.len();
        let h = self.config.history;
        let mut xs = Vec::with_capacity(h);
        let mut masks = Vec::with_capacity(h);
        for t in 0..h {
            let mut x = Vec::with_capacity(b * HISTORY_FEATURES);
            let mut m = Vec::with_capacity(b);
            for inp in inputs {
                match &inp.history[t] {
                    Some(s) => {
                        x.extend(self.normalizer.state(s));
                        x.extend(inp.signals[t]);
                        m.push(1.0);
                    }
                    None => {
                        x.extend([0.0; HISTORY_FEATURES]);
                        m.push(0.0);
                    }
                }
            }
            xs.push(g.input(Tensor::matrix(b, HISTORY_FEATURES, x)));
            masks.push(g.input(Tensor::matrix(b, 1, m)));
        }
        self.layers
            .history
            .run(g, ps, &xs, Some(&masks))
            .expect("history shapes")
    }

    /// Attention-pooled edge encoding and the attention weights.
    pub(crate) fn encode_neighbors(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        inputs: &[&AgentInput],
        h_hist: Var,
    ) -> (Var, Var) {
        let b = inputs.len();
        let h = self.config.history;
        let sums: Vec<Vec<Vec<[f64; 6]>>> = inputs
            .iter()
            .map(|i| neighbor_sums(i, &self.normalizer, EDGE_TYPES))
            .collect();
        let presence: Vec<Vec<bool>> = inputs.iter().map(|i| edge_presence(i, EDGE_TYPES)).collect();
        let mut keys = Vec::with_capacity(EDGE_TYPES);
        let mut masks = Vec::with_capacity(h);
        for t in 0..h {
            let m = inputs
                .iter()
                .map(|i| if i.history[t].is_some() { 1.0 } else { 0.0 })
                .collect();
            masks.push(g.input(Tensor::matrix(b, 1, m)));
        }
        for k in 0..EDGE_TYPES {
            let mut xs = Vec::with_capacity(h);
            for t in 0..h {
                let mut x = Vec::with_capacity(b * EDGE_FEATURES);
                for (bi, inp) in inputs.iter().enumerate() {
                    match &inp.history[t] {
                        Some(s) => x.extend(self.normalizer.state(s)),
                        None => x.extend([0.0; 6]),
                    }
                    x.extend(sums[bi][k][t]);
                }
                xs.push(g.input(Tensor::matrix(b, EDGE_FEATURES, x)));
            }
            let enc = self.layers.edges[k]
                .run(g, ps, &xs, Some(&masks))
                .expect("edge shapes");
            let empty = g.param(ps, self.layers.no_neighbor[k]);
            let empty = g.broadcast_rows(empty, b);
            let has = g.input(Tensor::matrix(
                b,
                1,
                presence.iter().map(|p| if p[k] { 1.0 } else { 0.0 }).collect(),
            ));
            keys.push(blend(g, has, enc, empty));
        }
        self.layers
            .attention
            .forward(g, ps, &keys, h_hist)
            .expect("attention shapes")
    }

    pub(crate) fn position_features(&self, inp: &AgentInput) -> Vec<f64> {
        let c = &inp.position;
        let mut f = Vec::with_capacity(5 + self.config.num_clusters + 3);
        f.extend(self.normalizer.point(c.pos));
        f.extend(self.normalizer.point(c.static_point));
        f.push(c.distance / self.normalizer.distance_std);
        f.extend((0..self.config.num_clusters).map(|i| if i == inp.cluster { 1.0 } else { 0.0 }));
        f.extend((0..3).map(|i| if i == c.region.index() { 1.0 } else { 0.0 }));
        f
    }

    pub(crate) fn encode_position(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&AgentInput]) -> Option<Var> {
        let mlp = self.layers.position.as_ref()?;
        let feats: Vec<f64> = inputs.iter().flat_map(|i| self.position_features(i)).collect();
        let n = feats.len() / inputs.len();
        let x = g.input(Tensor::matrix(inputs.len(), n, feats));
        Some(mlp.forward(g, ps, x).expect("position shapes"))
    }

    pub(crate) fn combine(&self, g: &mut Graph, ps: &ParamSet, h_hist: Var, h_edges: Var, p: Option<Var>) -> Var {
        let mut parts = vec![h_hist, h_edges];
        parts.extend(p);
        let x = g.concat_cols(&parts);
        self.layers.combine.forward(g, ps, x).expect("combine shapes")
    }

    pub(crate) fn encode(&self, g: &mut Graph, ps: &ParamSet, inputs: &[&AgentInput]) -> Var {
        let hh = self.encode_history(g, ps, inputs);
        let (he, _) = self.encode_neighbors(g, ps, inputs, hh);
        let p = self.encode_position(g, ps, inputs);
        self.combine(g, ps, hh, he, p)
    }

    /// Width of the combine MLP's input.
    pub fn combine_input_width(&self) -> usize {
        self.layers.combine.layers[0].input
    }

    // ---- latent ----

    pub(crate) fn prior_logits(&self, g: &mut Graph, ps: &ParamSet, h_enc: Var) -> Var {
        let l = self.layers.prior.forward(g, ps, h_enc).expect("prior shapes");
        g.log_softmax_rows(l)
    }

    fn future_features(&self, windows: &[&Window]) -> Vec<Tensor> {
        let b = windows.len();
        (0..self.config.future)
            .map(|k| {
                let mut x = Vec::with_capacity(b * FUTURE_FEATURES);
                for w in windows {
                    let p0 = w.input.position.pos;
                    let cur = self.normalizer.offset(p0, w.future[k]);
                    let prev = if k == 0 { [0.0; 2] } else { self.normalizer.offset(p0, w.future[k - 1]) };
                    x.extend(cur);
                    x.extend([cur[0] - prev[0], cur[1] - prev[1]]);
                }
                Tensor::matrix(b, FUTURE_FEATURES, x)
            })
            .collect()
    }

    pub(crate) fn posterior_logits(&self, g: &mut Graph, ps: &ParamSet, h_enc: Var, windows: &[&Window]) -> Var {
        let xs: Vec<Var> = self
            .future_features(windows)
            .into_iter()
            .map(|t| g.input(t))
            .collect();
        let nfe = self.layers.future.run(g, ps, &xs).expect("future shapes");
        let x = g.concat_cols(&[h_enc, nfe]);
        let l = self.layers.posterior.forward(g, ps, x).expect("posterior shapes");
        g.log_softmax_rows(l)
    }

    /// Prior and, when futures are supplied, posterior distributions.
    pub fn latent_distributions(
        &self,
        inputs: &[&AgentInput],
        futures: Option<&[&Window]>,
    ) -> (Vec<LatentDistribution>, Option<Vec<LatentDistribution>>) {
        let mut g = Graph::new();
        let ps = &self.params;
        let h = self.encode(&mut g, ps, inputs);
        let lp = self.prior_logits(&mut g, ps, h);
        let to_dist = |g: &Graph, v: Var| {
            let t = g.value(v);
            (0..t.rows())
                .map(|r| LatentDistribution {
                    probs: t.row(r).iter().map(|x| x.exp()).collect(),
                })
                .collect::<Vec<_>>()
        };
        let prior = to_dist(&g, lp);
        let post = futures.map(|w| {
            let lq = self.posterior_logits(&mut g, ps, h, w);
            to_dist(&g, lq)
        });
        (prior, post)
    }

    // ---- decoder ----

    /// Bounded mixture parameters from the raw head output.
    fn head(&self, g: &mut Graph, ps: &ParamSet, h: Var) -> Var {
        let raw = self.layers.head.forward(g, ps, h).expect("head shapes");
        let mu = g.slice_cols(raw, 0, 2);
        let ls = g.slice_cols(raw, 2, 2);
        let ls = g.affine(ls, 1.0 / LOG_SIGMA_BOUND, 0.0);
        let ls = g.tanh(ls);
        let ls = g.affine(ls, LOG_SIGMA_BOUND, 0.0);
        let r = g.slice_cols(raw, 4, 1);
        let r = g.affine(r, 1.0 / CORR_BOUND, 0.0);
        let r = g.tanh(r);
        let r = g.affine(r, CORR_BOUND, 0.0);
        g.concat_cols(&[mu, ls, r])
    }

    /// Rolls the decoder for rows `(source row of h_enc, mode)`. Returns one
    /// `[rows, 5]` parameter node per step in normalized offset units.
    pub(crate) fn decode_rows(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        h_enc: Var,
        rows: &[(usize, usize)],
        steps: usize,
        mut feedback: Feedback<'_>,
    ) -> Vec<Var> {
        let d = self.config.decoder_hidden;
        let src: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let modes: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let n = rows.len();

        let init = self.layers.init.forward(g, ps, h_enc).expect("init shapes");
        let init = g.take_rows(init, &src);
        let iz = g.param(ps, self.layers.init_z);
        let iz = g.take_rows(iz, &modes);
        let h0 = g.add(init, iz);
        let mut h = g.tanh(h0);

        let wc = g.param(ps, self.layers.step_ctx);
        let ctx = g.matmul(h_enc, wc);
        let ctx = g.take_rows(ctx, &src);
        let wz = g.param(ps, self.layers.step_z);
        let wz = g.take_rows(wz, &modes);
        let extra = g.add(ctx, wz);

        let mut out = Vec::with_capacity(steps);
        let mut prev = g.input(Tensor::zeros(n, 2));
        for k in 0..steps {
            h = self
                .layers
                .decoder
                .step_with_extra(g, ps, prev, h, Some(extra))
                .expect("decoder shapes");
            debug_assert_eq!(g.shape(h), (n, d));
            let p = self.head(g, ps, h);
            out.push(p);
            if k + 1 == steps {
                break;
            }
            prev = match &mut feedback {
                Feedback::Teacher(t) => g.input(t[k].clone()),
                Feedback::Mean => g.slice_cols(p, 0, 2),
                Feedback::Sample(rng, draws) => {
                    let v = g.value(p);
                    let data = (0..n)
                        .flat_map(|r| Gaussian2::from_raw(v.row(r)).sample(&mut **rng))
                        .collect();
                    let d = Tensor::matrix(n, 2, data);
                    draws.push(d.clone());
                    g.input(d)
                }
            };
        }
        out
    }

    fn to_world(&self, origin: Point2, p: &[f64]) -> Gaussian2 {
        let n = &self.normalizer;
        let c = Gaussian2::from_raw(p);
        Gaussian2 {
            mean: [origin.x + c.mean[0] * n.offset_std[0], origin.y + c.mean[1] * n.offset_std[1]],
            log_sigma: [c.log_sigma[0] + n.offset_std[0].ln(), c.log_sigma[1] + n.offset_std[1].ln()],
            rho: c.rho,
        }
    }

    // ---- objective ----

    /// Sum over the batch of `-(E_q log p(y|x,z) - beta KL(q || p))`, with the
    /// expectation enumerated over every latent mode.
    pub(crate) fn elbo_sum(&self, g: &mut Graph, ps: &ParamSet, windows: &[&Window], beta: f64) -> Var {
        let z = self.config.latent;
        let t = self.config.future;
        let b = windows.len();
        let inputs: Vec<&AgentInput> = windows.iter().map(|w| &w.input).collect();
        let h = self.encode(g, ps, &inputs);
        let lp = self.prior_logits(g, ps, h);
        let lq = self.posterior_logits(g, ps, h, windows);

        let rows: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..z).map(move |m| (i, m))).collect();
        let targets: Vec<Tensor> = (0..t)
            .map(|k| {
                let data = windows
                    .iter()
                    .flat_map(|w| {
                        let o = self.normalizer.offset(w.input.position.pos, w.future[k]);
                        std::iter::repeat_n(o, z).flatten()
                    })
                    .collect();
                Tensor::matrix(b * z, 2, data)
            })
            .collect();
        let params = self.decode_rows(g, ps, h, &rows, t, Feedback::Teacher(&targets));
        let mut logpy = None;
        for (k, p) in params.into_iter().enumerate() {
            let l = g.binormal_logpdf(p, targets[k].clone());
            logpy = Some(match logpy {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let logpy = g.reshape(logpy.expect("T >= 1"), b, z);
        let q = g.exp(lq);
        let eq = g.mul(q, logpy);
        let eq = g.row_sum(eq);
        let diff = g.sub(lq, lp);
        let kl = g.mul(q, diff);
        let kl = g.row_sum(kl);
        let kl = g.affine(kl, beta, 0.0);
        let elbo = g.sub(eq, kl);
        let total = g.sum_all(elbo);
        g.neg(total)
    }

    /// Mean negative ELBO over `windows` and its gradient.
    pub fn elbo_loss(&self, ps: &ParamSet, windows: &[&Window], beta: f64) -> (f64, Gradients) {
        let mut g = Graph::new();
        let s = self.elbo_sum(&mut g, ps, windows, beta);
        let loss = g.affine(s, 1.0 / windows.len() as f64, 0.0);
        (g.value(loss).item(), g.backward(loss, ps))
    }

    /// Mean negative ELBO without gradients.
    pub fn elbo_value(&self, windows: &[&Window], beta: f64) -> f64 {
        let mut g = Graph::new();
        let s = self.elbo_sum(&mut g, &self.params, windows, beta);
        g.value(s).item() / windows.len() as f64
    }

    /// Per-row log-likelihood of the future under each mode, `[b][z]`, and
    /// the prior and posterior log-probabilities. Used to cross-check the
    /// enumerated objective.
    pub fn elbo_terms(&self, windows: &[&Window]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let ps = &self.params;
        let z = self.config.latent;
        let t = self.config.future;
        let inputs: Vec<&AgentInput> = windows.iter().map(|w| &w.input).collect();
        let h = self.encode(&mut g, ps, &inputs);
        let lp = self.prior_logits(&mut g, ps, h);
        let lq = self.posterior_logits(&mut g, ps, h, windows);
        let rows: Vec<(usize, usize)> = (0..windows.len()).flat_map(|i| (0..z).map(move |m| (i, m))).collect();
        let targets: Vec<Tensor> = (0..t)
            .map(|k| {
                let data = windows
                    .iter()
                    .flat_map(|w| {
                        let o = self.normalizer.offset(w.input.position.pos, w.future[k]);
                        std::iter::repeat_n(o, z).flatten()
                    })
                    .collect();
                Tensor::matrix(windows.len() * z, 2, data)
            })
            .collect();
        let params = self.decode_rows(&mut g, ps, h, &rows, t, Feedback::Teacher(&targets));
        let mut ll = vec![vec![0.0; z]; windows.len()];
        for (k, p) in params.iter().enumerate() {
            let v = g.value(*p);
            for (r, &(b, m)) in rows.iter().enumerate() {
                let tk = targets[k].row(r);
                ll[b][m] += Gaussian2::from_raw(v.row(r)).log_pdf([tk[0], tk[1]]);
            }
        }
        let rows_of = |v: Var| {
            let t = g.value(v);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>()
        };
        (ll, rows_of(lp), rows_of(lq))
    }

    // ---- prediction ----

    /// Full predictive distribution: prior weights and free-running
    /// per-mode Gaussians for every step.
    pub fn predict_distribution(&self, inputs: &[&AgentInput]) -> Vec<GmmPrediction> {
        let z = self.config.latent;
        let t = self.config.future;
        let mut g = Graph::new();
        let ps = &self.params;
        let h = self.encode(&mut g, ps, inputs);
        let lp = self.prior_logits(&mut g, ps, h);
        let rows: Vec<(usize, usize)> = (0..inputs.len()).flat_map(|i| (0..z).map(move |m| (i, m))).collect();
        let params = self.decode_rows(&mut g, ps, h, &rows, t, Feedback::Mean);
        inputs
            .iter()
            .enumerate()
            .map(|(b, inp)| {
                let weights = normalize_simplex(g.value(lp).row(b).iter().map(|x| x.exp()).collect());
                let origin = inp.position.pos;
                let modes = (0..z)
                    .map(|m| {
                        (0..t)
                            .map(|k| self.to_world(origin, g.value(params[k]).row(b * z + m)))
                            .collect()
                    })
                    .collect();
                GmmPrediction { weights, modes }
            })
            .collect()
    }

    /// Means of the most probable prior mode, decoding only that mode.
    pub fn most_likely(&self, inputs: &[&AgentInput], steps: usize) -> Vec<Vec<Point2>> {
        if inputs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let ps = &self.params;
        let h = self.encode(&mut g, ps, inputs);
        let lp = self.prior_logits(&mut g, ps, h);
        let rows: Vec<(usize, usize)> = (0..inputs.len())
            .map(|b| {
                let d = LatentDistribution {
                    probs: g.value(lp).row(b).to_vec(),
                };
                (b, d.argmax())
            })
            .collect();
        let params = self.decode_rows(&mut g, ps, h, &rows, steps, Feedback::Mean);
        inputs
            .iter()
            .enumerate()
            .map(|(b, inp)| {
                params
                    .iter()
                    .map(|p| {
                        let v = g.value(*p).row(b);
                        self.normalizer.unoffset(inp.position.pos, [v[0], v[1]])
                    })
                    .collect()
            })
            .collect()
    }

    /// One mean trajectory per latent mode.
    pub fn per_mode(&self, inputs: &[&AgentInput]) -> Vec<Vec<Vec<Point2>>> {
        self.predict_distribution(inputs)
            .iter()
            .map(|p| (0..self.config.latent).map(|m| p.mode_means(m)).collect())
            .collect()
    }

    /// `n` stochastic trajectories per input: a mode from the prior, then
    /// per-step draws fed back into the decoder.
    pub fn sample(&self, inputs: &[&AgentInput], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<Point2>>> {
        if inputs.is_empty() || n == 0 {
            return vec![Vec::new(); inputs.len()];
        }
        let t = self.config.future;
        let mut g = Graph::new();
        let ps = &self.params;
        let h = self.encode(&mut g, ps, inputs);
        let lp = self.prior_logits(&mut g, ps, h);
        let mut rows = Vec::with_capacity(inputs.len() * n);
        for b in 0..inputs.len() {
            let probs: Vec<f64> = g.value(lp).row(b).iter().map(|x| x.exp()).collect();
            for _ in 0..n {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut m = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        m = i;
                        break;
                    }
                }
                rows.push((b, m));
            }
        }
        let mut draws = Vec::with_capacity(t);
        let params = self.decode_rows(&mut g, ps, h, &rows, t, Feedback::Sample(rng, &mut draws));
        let last = g.value(params[t - 1]);
        let data = (0..rows.len())
            .flat_map(|r| Gaussian2::from_raw(last.row(r)).sample(rng))
            .collect();
        draws.push(Tensor::matrix(rows.len(), 2, data));
        let mut out = vec![Vec::with_capacity(n); inputs.len()];
        for (r, &(b, _)) in rows.iter().enumerate() {
            let origin = inputs[b].position.pos;
            let traj = draws
                .iter()
                .map(|d| {
                    let o = d.row(r);
                    self.normalizer.unoffset(origin, [o[0], o[1]])
                })
                .collect();
            out[b].push(traj);
        }
        out
    }
}

fn normalize_simplex(mut p: Vec<f64>) -> Vec<f64> {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

impl Predictor for CvaeModel {
    fn predict_positions(&self, inputs: &[AgentInput], steps: usize) -> Vec<Vec<Point2>> {
        let refs: Vec<&AgentInput> = inputs.iter().collect();
        self.most_likely(&refs, steps)
    }
}
