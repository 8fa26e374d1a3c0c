use serde::{Deserialize, Serialize};
use specret_core::{Error, Result};

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Swish,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Swish => g.swish(x),
            Activation::Tanh => g.tanh(x),
            Activation::Linear => x,
        }
    }
}

fn check_cols(g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
    let got = g.shape(x).1;
    if got != want {
        return Err(Error::Shape(format!(
            "{what}: expected width {want}, got {got}"
        )));
    }
    Ok(())
}

/// x·W + b with W stored in×out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}/w"), in_dim, out_dim, Init::FanIn(in_dim));
        let b = bias.then(|| store.add(&format!("{name}/b"), 1, out_dim, Init::Zeros));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => y,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data.fill(0.0);
        if let Some(b) = self.b {
            store.get_mut(b).data.fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub activation: Activation,
    pub residual: bool,
}

impl MlpConfig {
    pub fn new(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        n_layers: usize,
        activation: Activation,
    ) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden_dim,
            n_layers,
            activation,
            residual: false,
        }
    }

    pub fn residual(mut self) -> Self {
        self.residual = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.in_dim == 0
            || self.out_dim == 0
            || (self.n_layers > 1 && self.hidden_dim == 0)
        {
            return Err(Error::Domain(format!("invalid MLP config {self:?}")));
        }
        Ok(())
    }
}

/// Affine layers with the activation between them; the last layer is affine only.
/// A residual MLP adds a bias-free linear projection of its input.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub cfg: MlpConfig,
    pub layers: Vec<Linear>,
    pub skip: Option<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let i = if l == 0 { cfg.in_dim } else { cfg.hidden_dim };
            let o = if l + 1 == cfg.n_layers {
                cfg.out_dim
            } else {
                cfg.hidden_dim
            };
            layers.push(Linear::new(store, &format!("{name}/l{l}"), i, o, true));
        }
        let skip = cfg.residual.then(|| {
            Linear::new(
                store,
                &format!("{name}/skip"),
                cfg.in_dim,
                cfg.out_dim,
                false,
            )
        });
        Ok(Self { cfg, layers, skip })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_cols(g, x, self.cfg.in_dim, "mlp input")?;
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if l + 1 < self.layers.len() {
                h = self.cfg.activation.apply(g, h);
            }
        }
        if let Some(skip) = &self.skip {
            let s = skip.forward(g, store, x);
            h = g.add(h, s);
        }
        Ok(h)
    }

    /// Zeroes the output layer (and skip), so the network starts as the zero map.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.layers.last().expect("n_layers ≥ 1").zero(store);
        if let Some(s) = &self.skip {
            s.zero(store);
        }
    }

    pub fn zero_all(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.zero(store);
        }
        if let Some(s) = &self.skip {
            s.zero(store);
        }
    }
}

/// Learned truncated-mode Fourier convolution of length-`len` rows.
#[derive(Debug, Clone)]
pub struct SpectralConv {
    pub len: usize,
    pub n_modes: usize,
    pub wr: ParamId,
    pub wi: ParamId,
}

impl SpectralConv {
    pub fn new(store: &mut ParamStore, name: &str, len: usize, n_modes: usize) -> Result<Self> {
        if n_modes == 0 || n_modes > len / 2 + 1 {
            return Err(Error::Domain(format!(
                "{n_modes} Fourier modes invalid for length {len}"
            )));
        }
        let sd = (1.0 / n_modes as f64).sqrt();
        let wr = store.add(&format!("{name}/wr"), n_modes, n_modes, Init::Normal(sd));
        let wi = store.add(&format!("{name}/wi"), n_modes, n_modes, Init::Normal(sd));
        Ok(Self {
            len,
            n_modes,
            wr,
            wi,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        check_cols(g, x, self.len, "spectral conv input")?;
        let wr = g.param(store, self.wr);
        let wi = g.param(store, self.wi);
        Ok(g.spectral_conv(x, wr, wi))
    }

    /// Sets R to the identity on every retained mode.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let m = self.n_modes;
        let wr = store.get_mut(self.wr);
        wr.data.fill(0.0);
        for k in 0..m {
            wr.data[k * m + k] = 1.0;
        }
        store.get_mut(self.wi).data.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnoBlockConfig {
    pub in_len: usize,
    pub out_len: usize,
    pub n_modes: usize,
    pub mlp: MlpConfig,
}

impl FnoBlockConfig {
    /// Block with a residual MLP of `n_layers` layers, hidden width max(in, out), and as many
    /// modes as the input supports up to `max_modes`.
    pub fn new(
        in_len: usize,
        out_len: usize,
        max_modes: usize,
        n_layers: usize,
        activation: Activation,
    ) -> Self {
        let n_modes = max_modes.min(in_len / 2 + 1).max(1);
        let mlp =
            MlpConfig::new(in_len, in_len.max(out_len), out_len, n_layers, activation).residual();
        Self {
            in_len,
            out_len,
            n_modes,
            mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_modes == 0 || self.n_modes > self.in_len / 2 + 1 {
            return Err(Error::Domain(format!(
                "FNO block modes {} invalid for length {}",
                self.n_modes, self.in_len
            )));
        }
        if self.mlp.in_dim != self.in_len || self.mlp.out_dim != self.out_len {
            return Err(Error::Shape(
                "FNO block MLP dims must match in_len → out_len".into(),
            ));
        }
        self.mlp.validate()
    }
}

/// Q(x) = p(x) + m(𝒰(x)).
#[derive(Debug, Clone)]
pub struct FnoBlock {
    pub cfg: FnoBlockConfig,
    pub conv: SpectralConv,
    pub mlp: Mlp,
    pub proj: Linear,
}

impl FnoBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: FnoBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let conv = SpectralConv::new(store, &format!("{name}/conv"), cfg.in_len, cfg.n_modes)?;
        let mlp = Mlp::new(store, &format!("{name}/mlp"), cfg.mlp)?;
        let proj = Linear::new(
            store,
            &format!("{name}/proj"),
            cfg.in_len,
            cfg.out_len,
            true,
        );
        Ok(Self {
            cfg,
            conv,
            mlp,
            proj,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let u = self.conv.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, u)?;
        let p = self.proj.forward(g, store, x);
        Ok(g.add(p, m))
    }
}

/// Block lengths for `n` blocks moving geometrically from `from` to `to`.
pub fn geometric_lengths(from: usize, to: usize, n: usize) -> Vec<usize> {
    let (a, b) = (from as f64, to as f64);
    (0..=n)
        .map(|i| {
            if i == 0 {
                from
            } else if i == n {
                to
            } else {
                (a * (b / a).powf(i as f64 / n as f64)).round().max(1.0) as usize
            }
        })
        .collect()
}

/// A stack of FNO blocks with an activation after every block but the last.
#[derive(Debug, Clone)]
pub struct FnoStack {
    pub blocks: Vec<FnoBlock>,
    pub activation: Activation,
}

impl FnoStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        lengths: &[usize],
        max_modes: usize,
        n_layers: usize,
        activation: Activation,
    ) -> Result<Self> {
        let blocks = lengths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                FnoBlock::new(
                    store,
                    &format!("{name}/b{i}"),
                    FnoBlockConfig::new(w[0], w[1], max_modes, n_layers, activation),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, activation })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, store, h)?;
            if i + 1 < self.blocks.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }

    pub fn out_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.cfg.out_len)
    }

    /// Makes the stack output identically zero (last block's projection and MLP output).
    pub fn zero_output(&self, store: &mut ParamStore) {
        if let Some(b) = self.blocks.last() {
            b.proj.zero(store);
            b.mlp.zero_output(store);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub query_dim: usize,
    pub key_dim: usize,
    pub model_dim: usize,
    pub aggregate_mean: bool,
}

/// Single-head scaled dot-product cross-attention softmax(QKᵀ/√d_m)·V.
///
/// Tokens are passed as separate B×d matrices so a batch of B independent query/key sets is
/// processed at once; a 1×d key token is shared by the whole batch.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig) -> Result<Self> {
        if cfg.query_dim == 0 || cfg.key_dim == 0 || cfg.model_dim == 0 {
            return Err(Error::Domain(format!("invalid attention config {cfg:?}")));
        }
        let wq = store.add(
            &format!("{name}/wq"),
            cfg.query_dim,
            cfg.model_dim,
            Init::FanIn(cfg.query_dim),
        );
        let wk = store.add(
            &format!("{name}/wk"),
            cfg.key_dim,
            cfg.model_dim,
            Init::FanIn(cfg.key_dim),
        );
        let wv = store.add(
            &format!("{name}/wv"),
            cfg.key_dim,
            cfg.model_dim,
            Init::FanIn(cfg.key_dim),
        );
        Ok(Self { cfg, wq, wk, wv })
    }

    /// Attention weights (B×k per query) and outputs (B×d_m per query).
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: &[Var],
        keys: &[Var],
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        if keys.is_empty() {
            return Err(Error::Domain(
                "cross-attention needs at least one key".into(),
            ));
        }
        if queries.is_empty() {
            return Err(Error::Domain(
                "cross-attention needs at least one query".into(),
            ));
        }
        for &q in queries {
            check_cols(g, q, self.cfg.query_dim, "attention query")?;
        }
        for &k in keys {
            check_cols(g, k, self.cfg.key_dim, "attention key")?;
        }
        let (wq, wk, wv) = (
            g.param(store, self.wq),
            g.param(store, self.wk),
            g.param(store, self.wv),
        );
        let inv_sqrt = 1.0 / (self.cfg.model_dim as f64).sqrt();
        let ks: Vec<Var> = keys.iter().map(|&k| g.matmul(k, wk)).collect();
        let vs: Vec<Var> = keys.iter().map(|&k| g.matmul(k, wv)).collect();
        let mut weights = Vec::with_capacity(queries.len());
        let mut outs = Vec::with_capacity(queries.len());
        for &q in queries {
            let qp = g.matmul(q, wq);
            let scores: Vec<Var> = ks
                .iter()
                .map(|&k| {
                    let p = g.mul(qp, k);
                    let s = g.sum_cols(p);
                    g.scale(s, inv_sqrt)
                })
                .collect();
            let s = g.concat_cols(&scores);
            let w = g.softmax_rows(s);
            let mut acc = None;
            for (j, &v) in vs.iter().enumerate() {
                let wj = g.slice_cols(w, j, 1);
                let t = g.mul(wj, v);
                acc = Some(match acc {
                    None => t,
                    Some(a) => g.add(a, t),
                });
            }
            weights.push(w);
            outs.push(acc.expect("nonempty keys"));
        }
        Ok((weights, outs))
    }

    /// Per-query outputs, or their mean when `aggregate_mean` is set.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: &[Var],
        keys: &[Var],
    ) -> Result<Vec<Var>> {
        let (_, outs) = self.attend(g, store, queries, keys)?;
        if !self.cfg.aggregate_mean {
            return Ok(outs);
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = g.add(acc, o);
        }
        Ok(vec![g.scale(acc, 1.0 / outs.len() as f64)])
    }

    /// Unbatched form: queries q×d_q and keys k×d_k as matrices; returns q×d_m or 1×d_m.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
    ) -> Result<Var> {
        let (nq, _) = g.shape(queries);
        let (nk, _) = g.shape(keys);
        if nk == 0 {
            return Err(Error::Domain(
                "cross-attention needs at least one key".into(),
            ));
        }
        let qs: Vec<Var> = (0..nq).map(|i| g.slice_rows(queries, i, 1)).collect();
        let ks: Vec<Var> = (0..nk).map(|i| g.slice_rows(keys, i, 1)).collect();
        let outs = self.forward_tokens(g, store, &qs, &ks)?;
        Ok(if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)
        })
    }
}
