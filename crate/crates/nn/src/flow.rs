//! RealNVP affine coupling flow on latent rows.

use serde::{Deserialize, Serialize};
use specret_core::{Error, Result};

use crate::graph::{Graph, Var};
use crate::layers::{Activation, Mlp, MlpConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub d_z: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// s = scale_bound·tanh(s_net(·)).
    pub scale_bound: f64,
    /// Start every coupling as the identity map.
    pub zero_init: bool,
}

impl FlowConfig {
    pub fn new(d_z: usize) -> Self {
        Self {
            d_z,
            n_layers: 4,
            hidden: 64,
            hidden_layers: 2,
            scale_bound: 2.0,
            zero_init: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    FirstHalfFrozen,
    SecondHalfFrozen,
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub s_net: Mlp,
    pub t_net: Mlp,
    pub parity: Parity,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub cfg: FlowConfig,
    pub layers: Vec<CouplingLayer>,
}

impl FlowModel {
    pub fn new(store: &mut ParamStore, name: &str, cfg: FlowConfig) -> Result<Self> {
        if cfg.d_z == 0 || cfg.d_z % 2 != 0 {
            return Err(Error::Domain(format!(
                "flow latent dimension {} must be even and positive",
                cfg.d_z
            )));
        }
        let half = cfg.d_z / 2;
        let net = MlpConfig::new(
            half,
            cfg.hidden,
            half,
            cfg.hidden_layers + 1,
            Activation::Swish,
        );
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for k in 0..cfg.n_layers {
            let s_net = Mlp::new(store, &format!("{name}/c{k}/s"), net)?;
            let t_net = Mlp::new(store, &format!("{name}/c{k}/t"), net)?;
            if cfg.zero_init {
                s_net.zero_output(store);
                t_net.zero_output(store);
            }
            let parity = if k % 2 == 0 {
                Parity::FirstHalfFrozen
            } else {
                Parity::SecondHalfFrozen
            };
            layers.push(CouplingLayer {
                s_net,
                t_net,
                parity,
            });
        }
        Ok(Self { cfg, layers })
    }

    fn split(&self, g: &mut Graph, z: Var, parity: Parity) -> (Var, Var) {
        let h = self.cfg.d_z / 2;
        let first = g.slice_cols(z, 0, h);
        let second = g.slice_cols(z, h, h);
        match parity {
            Parity::FirstHalfFrozen => (first, second),
            Parity::SecondHalfFrozen => (second, first),
        }
    }

    fn join(&self, g: &mut Graph, frozen: Var, moved: Var, parity: Parity) -> Var {
        match parity {
            Parity::FirstHalfFrozen => g.concat_cols(&[frozen, moved]),
            Parity::SecondHalfFrozen => g.concat_cols(&[moved, frozen]),
        }
    }

    fn scale_shift(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: &CouplingLayer,
        a: Var,
    ) -> Result<(Var, Var)> {
        let s_raw = layer.s_net.forward(g, store, a)?;
        let s_t = g.tanh(s_raw);
        let s = g.scale(s_t, self.cfg.scale_bound);
        let t = layer.t_net.forward(g, store, a)?;
        Ok((s, t))
    }

    /// z_K for every row of `z0` (B×d_z) and the per-row Σ_k Σ_i s_i^(k) (B×1).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z0: Var) -> Result<(Var, Var)> {
        let (b, d) = g.shape(z0);
        if d != self.cfg.d_z {
            return Err(Error::Shape(format!(
                "flow input width {d}, expected {}",
                self.cfg.d_z
            )));
        }
        let mut z = z0;
        let mut log_det = g.constant(Tensor::zeros(b, 1));
        for layer in &self.layers {
            let (a, x) = self.split(g, z, layer.parity);
            let (s, t) = self.scale_shift(g, store, layer, a)?;
            let es = g.exp(s);
            let xs = g.mul(x, es);
            let moved = g.add(xs, t);
            z = self.join(g, a, moved, layer.parity);
            let ls = g.sum_cols(s);
            log_det = g.add(log_det, ls);
        }
        Ok((z, log_det))
    }

    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, zk: Var) -> Result<Var> {
        let (_, d) = g.shape(zk);
        if d != self.cfg.d_z {
            return Err(Error::Shape(format!(
                "flow input width {d}, expected {}",
                self.cfg.d_z
            )));
        }
        let mut z = zk;
        for layer in self.layers.iter().rev() {
            let (a, y) = self.split(g, z, layer.parity);
            let (s, t) = self.scale_shift(g, store, layer, a)?;
            let ns = g.neg(s);
            let ens = g.exp(ns);
            let yt = g.sub(y, t);
            let moved = g.mul(yt, ens);
            z = self.join(g, a, moved, layer.parity);
        }
        Ok(z)
    }

    pub fn forward_vec(&self, store: &ParamStore, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(z0));
        let (z, ld) = self.forward(&mut g, store, x)?;
        Ok((g.value(z).data.clone(), g.value(ld).item()))
    }

    pub fn inverse_vec(&self, store: &ParamStore, zk: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(zk));
        let z = self.inverse(&mut g, store, x)?;
        Ok(g.value(z).data.clone())
    }
}

/// log q_K(z_K) = log q_0(z_0) − Σ log-det.
pub fn transformed_log_density(q0_logp: f64, sum_log_det: f64) -> f64 {
    q0_logp - sum_log_det
}
