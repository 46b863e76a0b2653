//! Per-sample layer router.
//!
//! Input is the channel-averaged mimic features concatenated with the
//! channel-averaged student magnitude spectrum, one token per segment.
//! A kernel-3 convolution over segments fuses it to `d_r`, a transformer
//! block mixes segments, and a mean-pooled linear head emits one logit per
//! teacher layer. Weights are `softmax(logits / tau)`.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_last, softmax_last, Graph, Var};
use crate::checkpoint;
use crate::error::{DlinkError, Result};
use crate::nn::{Binding, Complexity, Linear, ParamStore, TransformerBlock};
use crate::spectral::{num_bins, PsdScores};

/// Segment-axis kernel of the channel fuser.
pub const FUSER_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub layers: usize,
    pub fused_dim: usize,
    pub temperature: f64,
    pub encoder_blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Replace per-sample PSD scores by their batch mean.
    pub batch_mean_scores: bool,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            fused_dim: 32,
            temperature: 1.0,
            encoder_blocks: 1,
            heads: 4,
            ffn_dim: 64,
            batch_mean_scores: false,
            seed: 0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlinkError::Config(m));
        if self.layers < 2 {
            return bad(format!("router needs at least 2 layers, got {}", self.layers));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.fused_dim == 0 || self.ffn_dim == 0 || self.heads == 0 || self.fused_dim % self.heads != 0 {
            return bad(format!(
                "fused_dim {} must be positive and divisible by {} heads",
                self.fused_dim, self.heads
            ));
        }
        Ok(())
    }
}

/// Logits and weights `(B, L)` of one routing pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub logits: Array2<f64>,
    pub weights: Array2<f64>,
    pub temperature: f64,
}

impl RoutingDecision {
    pub fn from_logits(logits: Array2<f64>, temperature: f64) -> Self {
        let weights = softmax_last(&(&logits / temperature).into_dyn())
            .into_dimensionality()
            .expect("2-D weights");
        Self {
            logits,
            weights,
            temperature,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.ncols()
    }

    /// Weights averaged over the batch.
    pub fn mean_weights(&self) -> Vec<f64> {
        self.weights.mean_axis(Axis(0)).expect("non-empty batch").to_vec()
    }
}

/// Graph-side routing outputs.
#[derive(Clone, Copy, Debug)]
pub struct RoutingVars<'g> {
    pub logits: Var<'g>,
    pub weights: Var<'g>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedRoute {
    Last,
    Avg,
}

impl FromStr for FixedRoute {
    type Err = DlinkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(FixedRoute::Last),
            "avg" => Ok(FixedRoute::Avg),
            other => Err(DlinkError::Config(format!("unknown fixed route {other:?}, expected last or avg"))),
        }
    }
}

/// Constant routing for `batch` samples over `layers` layers. One-hot
/// routes carry `-inf` logits on the unused layers so that
/// `softmax(logits)` reproduces the weights.
pub fn fixed_route(strategy: FixedRoute, layers: usize, batch: usize) -> Result<RoutingDecision> {
    if layers == 0 {
        return Err(DlinkError::Usage("fixed route needs at least one layer".into()));
    }
    let logits = match strategy {
        FixedRoute::Avg => Array2::zeros((batch, layers)),
        FixedRoute::Last => Array2::from_shape_fn((batch, layers), |(_, l)| {
            if l + 1 == layers {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }),
    };
    Ok(RoutingDecision::from_logits(logits, 1.0))
}

/// Concatenates the channel means of `f_mimic (B, C, S, T)` and
/// `m_s (B, C, S, F)` into `(B, S, T + F)`.
pub fn build_router_input<'g>(f_mimic: Var<'g>, m_s: Var<'g>) -> Result<Var<'g>> {
    let (fs, ms) = (f_mimic.shape(), m_s.shape());
    if fs.len() != 4 || ms.len() != 4 {
        return Err(DlinkError::Usage("router inputs must be (B, C, S, *)".into()));
    }
    if fs[1] == 0 {
        return Err(DlinkError::Usage("router input has no channels".into()));
    }
    if fs[..3] != ms[..3] {
        return Err(DlinkError::Usage(format!(
            "mimic features {fs:?} and spectrum {ms:?} disagree on (B, C, S)"
        )));
    }
    Ok(f_mimic.mean_axis(1).concat_last(m_s.mean_axis(1)))
}

/// Array form of [`build_router_input`].
pub fn build_router_input_array(f_mimic: &ndarray::Array4<f64>, m_s: &ndarray::Array4<f64>) -> Result<Array3<f64>> {
    let g = Graph::new();
    let z = build_router_input(g.constant(f_mimic.clone().into_dyn()), g.constant(m_s.clone().into_dyn()))?;
    Ok((*z.value()).clone().into_dimensionality().expect("3-D router input"))
}

#[derive(Clone, Debug)]
pub struct Router {
    pub config: RouterConfig,
    pub store: ParamStore,
    pub feature_dim: usize,
    fuser: Linear,
    blocks: Vec<TransformerBlock>,
    head: Linear,
}

impl Router {
    /// Router for student features of width `feature_dim` (`T`).
    pub fn new(config: RouterConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        if feature_dim < 2 {
            return Err(DlinkError::Config("router feature_dim must be >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let in_dim = feature_dim + num_bins(feature_dim);
        let fuser = Linear::new(&mut store, "fuser", FUSER_KERNEL * in_dim, config.fused_dim, &mut rng);
        let blocks = (0..config.encoder_blocks)
            .map(|i| {
                TransformerBlock::new(
                    &mut store,
                    &format!("enc{i}"),
                    config.fused_dim,
                    config.heads,
                    config.ffn_dim,
                    &mut rng,
                )
            })
            .collect();
        let head = Linear::new(&mut store, "head", config.fused_dim, config.layers, &mut rng);
        Ok(Self {
            config,
            store,
            feature_dim,
            fuser,
            blocks,
            head,
        })
    }

    /// Zeroes the routing head so every sample starts with uniform weights.
    pub fn zero_head(&mut self) {
        self.store.get_mut(self.head.weight).fill(0.0);
        self.store.get_mut(self.head.bias.unwrap()).fill(0.0);
    }

    /// Logits `(B, L)` for `z_in (B, S, T + F)`.
    pub fn logits<'g>(&self, p: &Binding<'g>, z_in: Var<'g>) -> Var<'g> {
        let mut h = self.fuser.forward(p, z_in.unfold_seq(FUSER_KERNEL)).gelu();
        for block in &self.blocks {
            h = block.forward(p, h);
        }
        self.head.forward(p, h.mean_axis(1))
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, z_in: Var<'g>) -> RoutingVars<'g> {
        let logits = self.logits(p, z_in);
        let weights = logits.scale(1.0 / self.config.temperature).softmax_last();
        RoutingVars { logits, weights }
    }

    /// Routing decision for a concrete input.
    pub fn route(&self, z_in: &Array3<f64>) -> Result<RoutingDecision> {
        if z_in.iter().any(|v| !v.is_finite()) {
            return Err(DlinkError::Numeric("non-finite router input".into()));
        }
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let logits = self.logits(&p, g.constant(z_in.clone().into_dyn()));
        let logits: Array2<f64> = (*logits.value()).clone().into_dimensionality().expect("2-D logits");
        Ok(RoutingDecision::from_logits(logits, self.config.temperature))
    }

    /// Cost per sample for `segments` tokens.
    pub fn complexity(&self, segments: usize) -> Complexity {
        self.fuser.complexity(segments)
            + self.blocks.iter().map(|b| b.complexity(segments)).sum::<Complexity>()
            + self.head.complexity(1)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = RouterHeader {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
        };
        checkpoint::save(path, "router", &header, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors): (RouterHeader, _) = checkpoint::load(path, "router")?;
        let mut router = Router::new(header.config, header.feature_dim)?;
        checkpoint::restore(&mut router.store, tensors)?;
        Ok(router)
    }
}

#[derive(Serialize, Deserialize)]
struct RouterHeader {
    config: RouterConfig,
    feature_dim: usize,
}

/// `KL(softmax(a / tau) || softmax(s / tau))`, averaged over the batch.
pub fn psd_supervision_loss(decision: &RoutingDecision, scores: &PsdScores, tau: f64) -> Result<f64> {
    let g = Graph::new();
    let a = g.constant(decision.logits.clone().into_dyn());
    Ok(psd_supervision_loss_var(a, &scores.per_sample, tau)?.item())
}

/// Graph form of [`psd_supervision_loss`]; gradients reach the logits only.
pub fn psd_supervision_loss_var<'g>(logits: Var<'g>, scores: &Array2<f64>, tau: f64) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[..] != scores.shape()[..] {
        return Err(DlinkError::Usage(format!(
            "logits {shape:?} and scores {:?} must both be (B, L)",
            scores.shape()
        )));
    }
    let g = logits.graph();
    let log_q = g.constant(log_softmax_last(&(scores / tau).into_dyn()));
    let scaled = logits.scale(1.0 / tau);
    let log_p = scaled.log_softmax_last();
    let p = scaled.softmax_last();
    Ok(p.mul(log_p.sub(log_q)).sum_all().scale(1.0 / shape[0] as f64))
}

/// Writes `epoch,w_1..w_L` rows.
pub fn write_routing_csv(path: impl AsRef<Path>, rows: &[(usize, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let layers = rows.first().map_or(0, |r| r.1.len());
    let mut out = String::from("epoch");
    for l in 1..=layers {
        out.push_str(&format!(",w_{l}"));
    }
    out.push('\n');
    for (epoch, w) in rows {
        out.push_str(&epoch.to_string());
        for v in w {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| DlinkError::io(path, e))
}

/// Parses a file written by [`write_routing_csv`].
pub fn read_routing_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<f64>)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DlinkError::io(path, e))?;
    let bad = |line: usize| DlinkError::Format(format!("{}: malformed line {line}", path.display()));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let mut fields = line.split(',');
        let epoch = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad(i + 1))?;
        let w = fields
            .map(|f| f.parse::<f64>().map_err(|_| bad(i + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push((epoch, w));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn input_matches_mean_and_concat_oracle() {
        let f = rand4((2, 3, 4, 6), 0);
        let m = rand4((2, 3, 4, 4), 1);
        let z = build_router_input_array(&f, &m).unwrap();
        assert_eq!(z.dim(), (2, 4, 10));
        for b in 0..2 {
            for s in 0..4 {
                for k in 0..10 {
                    let oracle = (0..3)
                        .map(|c| if k < 6 { f[[b, c, s, k]] } else { m[[b, c, s, k - 6]] })
                        .sum::<f64>()
                        / 3.0;
                    assert!((z[[b, s, k]] - oracle).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_channel_is_plain_concat_and_cancellation_is_asymmetric() {
        let f = rand4((1, 1, 2, 4), 2);
        let m = rand4((1, 1, 2, 3), 3);
        let z = build_router_input_array(&f, &m).unwrap();
        assert_eq!(z[[0, 1, 2]], f[[0, 0, 1, 2]]);
        assert_eq!(z[[0, 1, 5]], m[[0, 0, 1, 1]]);

        let x = rand4((1, 1, 1, 4), 4);
        let mut pair = Array4::zeros((1, 2, 1, 4));
        pair.slice_mut(ndarray::s![.., 0..1, .., ..]).assign(&x);
        pair.slice_mut(ndarray::s![.., 1..2, .., ..]).assign(&x.mapv(|v| -v));
        let spec = crate::spectral::spectrum(&pair).unwrap();
        let z = build_router_input_array(&pair, &spec.magnitude).unwrap();
        assert!(z.slice(ndarray::s![0, 0, ..4]).iter().all(|v| v.abs() < 1e-15));
        assert!(z.slice(ndarray::s![0, 0, 4..]).iter().any(|&v| v > 0.0));
    }

    #[test]
    fn empty_channels_are_a_usage_error() {
        let g = Graph::new();
        let f = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 0, 2, 4])));
        let m = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 0, 2, 3])));
        assert!(matches!(build_router_input(f, m), Err(DlinkError::Usage(_))));
    }

    #[test]
    fn zero_head_routes_uniformly() {
        let mut router = Router::new(RouterConfig { layers: 5, ..Default::default() }, 8).unwrap();
        router.zero_head();
        let z = Array3::from_shape_fn((3, 4, 13), |(b, s, k)| (b + s * k) as f64 * 0.1);
        let d = router.route(&z).unwrap();
        assert!(d.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
    }

    #[test]
    fn fixed_routes() {
        let last = fixed_route(FixedRoute::Last, 4, 2).unwrap();
        assert_eq!(last.weights.row(1).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
        let avg = fixed_route(FixedRoute::Avg, 4, 1).unwrap();
        assert_eq!(avg.weights.row(0).to_vec(), vec![0.25; 4]);
        assert!(matches!("first".parse::<FixedRoute>(), Err(DlinkError::Config(_))));
    }

    #[test]
    fn kl_matches_explicit_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-2.0f64..2.0));
        let s = Array2::from_shape_fn((3, 4), |_| rng.random_range(0.0f64..3.0));
        let tau = 0.7;
        let mut oracle = 0.0;
        for b in 0..3 {
            let p: Vec<f64> = (0..4).map(|l| (a[[b, l]] / tau).exp()).collect();
            let q: Vec<f64> = (0..4).map(|l| (s[[b, l]] / tau).exp()).collect();
            let (zp, zq) = (p.iter().sum::<f64>(), q.iter().sum::<f64>());
            for l in 0..4 {
                let (pl, ql) = (p[l] / zp, q[l] / zq);
                oracle += pl * (pl / ql).ln();
            }
        }
        oracle /= 3.0;
        let d = RoutingDecision::from_logits(a, tau);
        let got = psd_supervision_loss(&d, &PsdScores { per_sample: s }, tau).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn routing_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let rows = vec![(1, vec![0.25, 0.75]), (2, vec![0.5, 0.5])];
        write_routing_csv(&path, &rows).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("epoch,w_1,w_2\n"));
        assert_eq!(read_routing_csv(&path).unwrap(), rows);
    }

    #[test]
    fn complexity_matches_store() {
        let router = Router::new(RouterConfig::default(), 200).unwrap();
        assert_eq!(router.complexity(10).params, router.store.num_scalars() as u64);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let router = Router::new(RouterConfig { layers: 3, seed: 5, ..RouterConfig::default() }, 16).unwrap();
        router.save(&path).unwrap();
        let back = Router::load(&path).unwrap();
        assert_eq!(back.config, router.config);
        assert_eq!(back.store.checksum(), router.store.checksum());
    }
}
