use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NnError;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Glorot-uniform weights.
    pub fn add_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Every value multiplied by `s`; used for zero-parameter checks.
    pub fn scaled(&self, s: f64) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.map(|v| v * s)).collect(),
        }
    }

    /// Replace values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), NnError> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .id(name)
                .map(|i| other.get(i))
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter {name}")))?;
            if !src.same_shape(t) {
                return Err(NnError::Shape(format!(
                    "parameter {name}: expected {:?}, found {:?}",
                    t.shape(),
                    src.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

fn check_cols(g: &Graph, v: Var, want: usize, what: &str) -> Result<usize, NnError> {
    let (r, c) = g.shape(v);
    if c != want {
        return Err(NnError::Shape(format!("{what}: expected {want} columns, got {c}")));
    }
    Ok(r)
}

fn check_rows(g: &Graph, v: Var, want: usize, what: &str) -> Result<(), NnError> {
    let (r, _) = g.shape(v);
    if r != want {
        return Err(NnError::Shape(format!("{what}: expected {want} rows, got {r}")));
    }
    Ok(())
}

/// `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: ps.add_glorot(&format!("{name}.w"), input, output, rng),
            b: ps.add_zeros(&format!("{name}.b"), 1, output),
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var, NnError> {
        check_cols(g, x, self.input, "dense input")?;
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let xw = g.matmul(x, w);
        Ok(g.add_row(xw, b))
    }
}

/// Dense layers with tanh between them; the last layer is linear unless
/// `tanh_output` is set.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub tanh_output: bool,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, sizes: &[usize], tanh_output: bool, rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, tanh_output }
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, mut x: Var) -> Result<Var, NnError> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, ps, x)?;
            if i + 1 < n || self.tanh_output {
                x = g.tanh(x);
            }
        }
        Ok(x)
    }
}

/// LSTM cell with gates ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        LstmCell {
            w: ps.add_glorot(&format!("{name}.w"), input + hidden, 4 * hidden, rng),
            b: ps.add_zeros(&format!("{name}.b"), 1, 4 * hidden),
            input,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, ps: &ParamSet, x: Var, h: Var, c: Var) -> Result<(Var, Var), NnError> {
        let m = check_cols(g, x, self.input, "lstm input")?;
        check_cols(g, h, self.hidden, "lstm hidden")?;
        check_cols(g, c, self.hidden, "lstm cell")?;
        check_rows(g, h, m, "lstm hidden")?;
        check_rows(g, c, m, "lstm cell")?;
        let n = self.hidden;
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let xh = g.concat_cols(&[x, h]);
        let z = g.matmul(xh, w);
        let z = g.add_row(z, b);
        let zi = g.slice_cols(z, 0, n);
        let zf = g.slice_cols(z, n, n);
        let zg = g.slice_cols(z, 2 * n, n);
        let zo = g.slice_cols(z, 3 * n, n);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c);
        let ig = g.mul(i, cand);
        let c_new = g.add(fc, ig);
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc);
        Ok((h_new, c_new))
    }

    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> (Var, Var) {
        let h = g.input(Tensor::zeros(rows, self.hidden));
        let c = g.input(Tensor::zeros(rows, self.hidden));
        (h, c)
    }

    /// Runs over a sequence. `masks[t]` (`[m,1]`, 0 or 1) keeps the previous
    /// state on rows where the step is absent.
    pub fn run(&self, g: &mut Graph, ps: &ParamSet, xs: &[Var], masks: Option<&[Var]>) -> Result<Var, NnError> {
        let m = xs.first().map(|&x| g.shape(x).0).unwrap_or(1);
        let (mut h, mut c) = self.zero_state(g, m);
        for (t, &x) in xs.iter().enumerate() {
            let (hn, cn) = self.step(g, ps, x, h, c)?;
            match masks {
                Some(ms) => {
                    h = blend(g, ms[t], hn, h);
                    c = blend(g, ms[t], cn, c);
                }
                None => {
                    h = hn;
                    c = cn;
                }
            }
        }
        Ok(h)
    }
}

/// `mask * new + (1 - mask) * old`, row-wise.
pub fn blend(g: &mut Graph, mask: Var, new: Var, old: Var) -> Var {
    let d = g.sub(new, old);
    let d = g.mul_col(d, mask);
    g.add(old, d)
}

/// GRU cell: reset, update and candidate gates, hidden bias inside the reset
/// product.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        GruCell {
            wx: ps.add_glorot(&format!("{name}.wx"), input, 3 * hidden, rng),
            wh: ps.add_glorot(&format!("{name}.wh"), hidden, 3 * hidden, rng),
            bx: ps.add_zeros(&format!("{name}.bx"), 1, 3 * hidden),
            bh: ps.add_zeros(&format!("{name}.bh"), 1, 3 * hidden),
            input,
            hidden,
        }
    }

    pub fn step(&self, g: &mut Graph, ps: &ParamSet, x: Var, h: Var) -> Result<Var, NnError> {
        self.step_with_extra(g, ps, x, h, None)
    }

    /// As [`GruCell::step`], with `extra` (`[m, 3*hidden]`) added to the
    /// input projection. Lets callers precompute input terms that do not
    /// change between steps.
    pub fn step_with_extra(&self, g: &mut Graph, ps: &ParamSet, x: Var, h: Var, extra: Option<Var>) -> Result<Var, NnError> {
        let m = check_cols(g, x, self.input, "gru input")?;
        check_cols(g, h, self.hidden, "gru hidden")?;
        check_rows(g, h, m, "gru hidden")?;
        let n = self.hidden;
        let (wx, wh) = (g.param(ps, self.wx), g.param(ps, self.wh));
        let (bx, bh) = (g.param(ps, self.bx), g.param(ps, self.bh));
        let gx = g.matmul(x, wx);
        let mut gx = g.add_row(gx, bx);
        if let Some(e) = extra {
            check_cols(g, e, 3 * n, "gru extra")?;
            check_rows(g, e, m, "gru extra")?;
            gx = g.add(gx, e);
        }
        let gh = g.matmul(h, wh);
        let gh = g.add_row(gh, bh);
        let (xr, hr) = (g.slice_cols(gx, 0, n), g.slice_cols(gh, 0, n));
        let (xz, hz) = (g.slice_cols(gx, n, n), g.slice_cols(gh, n, n));
        let (xn, hn) = (g.slice_cols(gx, 2 * n, n), g.slice_cols(gh, 2 * n, n));
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let cand = g.add(xn, rh);
        let cand = g.tanh(cand);
        // h' = cand + z * (h - cand)
        let d = g.sub(h, cand);
        let zd = g.mul(z, d);
        Ok(g.add(cand, zd))
    }
}

/// Forward and backward LSTMs over a sequence; output is both final hidden
/// states concatenated.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn new(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        BiLstm {
            fwd: LstmCell::new(ps, &format!("{name}.fwd"), input, hidden, rng),
            bwd: LstmCell::new(ps, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    pub fn run(&self, g: &mut Graph, ps: &ParamSet, xs: &[Var]) -> Result<Var, NnError> {
        let hf = self.fwd.run(g, ps, xs, None)?;
        let rev: Vec<Var> = xs.iter().rev().copied().collect();
        let hb = self.bwd.run(g, ps, &rev, None)?;
        Ok(g.concat_cols(&[hf, hb]))
    }
}

/// Additive attention: `s_k = vᵀ tanh(W1 e_k + W2 q)`, softmax over k,
/// weighted sum of the `e_k`.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub w_key: ParamId,
    pub w_query: ParamId,
    pub v: ParamId,
    pub key: usize,
    pub query: usize,
}

impl AdditiveAttention {
    pub fn new(ps: &mut ParamSet, name: &str, key: usize, query: usize, att: usize, rng: &mut impl Rng) -> Self {
        AdditiveAttention {
            w_key: ps.add_glorot(&format!("{name}.w_key"), key, att, rng),
            w_query: ps.add_glorot(&format!("{name}.w_query"), query, att, rng),
            v: ps.add_glorot(&format!("{name}.v"), att, 1, rng),
            key,
            query,
        }
    }

    /// Returns the pooled `[m,key]` vector and the `[m,K]` attention weights.
    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, keys: &[Var], query: Var) -> Result<(Var, Var), NnError> {
        let m = check_cols(g, query, self.query, "attention query")?;
        for &k in keys {
            check_cols(g, k, self.key, "attention key")?;
            check_rows(g, k, m, "attention key")?;
        }
        let wk = g.param(ps, self.w_key);
        let wq = g.param(ps, self.w_query);
        let v = g.param(ps, self.v);
        let qp = g.matmul(query, wq);
        let scores: Vec<Var> = keys
            .iter()
            .map(|&k| {
                let kp = g.matmul(k, wk);
                let s = g.add(kp, qp);
                let s = g.tanh(s);
                g.matmul(s, v)
            })
            .collect();
        let s = g.concat_cols(&scores);
        let logw = g.log_softmax_rows(s);
        let w = g.exp(logw);
        let mut pooled = None;
        for (i, &k) in keys.iter().enumerate() {
            let wi = g.slice_cols(w, i, 1);
            let term = g.mul_col(k, wi);
            pooled = Some(match pooled {
                None => term,
                Some(p) => g.add(p, term),
            });
        }
        Ok((pooled.expect("at least one key"), w))
    }
}
