//! Approximate posteriors, auxiliary cold-start encoders, priors and
//! reparameterized sampling.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttentionSpec, Graph, Mat, Var};
use crate::corpus::Domain;
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::seqenc::SequenceRep;

/// Lower bound added to every standard deviation after the softplus mapping.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Hidden widths of every perceptron head.
pub const HIDDEN: [usize; 3] = [32, 64, 32];

/// Value-level diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianParams {
    pub fn standard(d: usize) -> Self {
        Self {
            mu: vec![0.0; d],
            sigma: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_valid(&self) -> bool {
        self.mu.len() == self.sigma.len()
            && self.mu.iter().all(|m| m.is_finite())
            && self.sigma.iter().all(|s| s.is_finite() && *s > 0.0)
    }

    /// `mu + sigma ⊙ noise` in training mode, `mu` otherwise.
    pub fn reparameterize(&self, noise: &[f64], train_mode: bool) -> Vec<f64> {
        assert_eq!(noise.len(), self.dim(), "noise dimension");
        if !train_mode {
            return self.mu.clone();
        }
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(noise)
            .map(|((m, s), e)| m + s * e)
            .collect()
    }

    /// Row `r` of batched graph values.
    pub fn from_rows(mu: &Mat, sigma: &Mat, r: usize) -> Self {
        Self {
            mu: mu.row(r).to_vec(),
            sigma: sigma.row(r).to_vec(),
        }
    }
}

/// Batched Gaussian parameters on the tape (`batch × d` each, or `1 × d` for
/// priors).
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn values(&self, g: &Graph, r: usize) -> GaussianParams {
        GaussianParams::from_rows(g.value(self.mu), g.value(self.sigma), r)
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mu).nrows()
    }

    pub fn is_finite(&self, g: &Graph) -> bool {
        g.value(self.mu).iter().all(|v| v.is_finite()) && g.value(self.sigma).iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

/// `softplus(x) + SIGMA_FLOOR`.
pub fn positive(g: &mut Graph, x: Var) -> Var {
    let s = g.softplus(x);
    g.add_scalar(s, SIGMA_FLOOR)
}

/// Pre-activation whose positive mapping equals `sigma`.
pub fn inverse_positive(sigma: f64) -> f64 {
    let y = sigma - SIGMA_FLOOR;
    y + (-(-y).exp_m1()).ln()
}

/// Two perceptron heads producing the mean and the standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Mlp,
    pub sigma: Mlp,
}

impl GaussianHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            mu: Mlp::new(store, &format!("{name}.mu"), input, &HIDDEN, d, rng),
            sigma: Mlp::new(store, &format!("{name}.sigma"), input, &HIDDEN, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> GaussianVars {
        let mu = self.mu.forward(g, store, x);
        let pre = self.sigma.forward(g, store, x);
        GaussianVars {
            mu,
            sigma: positive(g, pre),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrossMode {
    #[default]
    Attention,
    Mlp,
}

impl std::str::FromStr for CrossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attention" => Ok(Self::Attention),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown cross-encoder mode `{other}` (attention|mlp)")),
        }
    }
}

/// Direction of a cross-domain latent. `YtoX` produces `z_t^y`, which carries
/// domain-Y knowledge into domain X's decoder; its queries come from X.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    YtoX,
    XtoY,
}

impl Direction {
    /// Domain decoded with this latent (the query side).
    pub fn target(self) -> Domain {
        match self {
            Self::YtoX => Domain::X,
            Self::XtoY => Domain::Y,
        }
    }

    /// Domain the knowledge comes from (keys/values, auxiliary encoder input).
    pub fn source(self) -> Domain {
        self.target().other()
    }
}

/// Projections of the cross-attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

/// Cross-domain encoder `q(z_t | x, y)`; the attention layer exists only in
/// attention mode.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossEncoder {
    pub mode: CrossMode,
    pub attention: Option<CrossAttention>,
    pub head: GaussianHead,
}

impl CrossEncoder {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, mode: CrossMode, rng: &mut Rng) -> Self {
        let (attention, input) = match mode {
            CrossMode::Attention => (
                Some(CrossAttention {
                    heads,
                    query: Linear::new(store, &format!("{name}.query"), d, d, rng),
                    key: Linear::new(store, &format!("{name}.key"), d, d, rng),
                    value: Linear::new(store, &format!("{name}.value"), d, d, rng),
                    out: Linear::new(store, &format!("{name}.out"), d, d, rng),
                }),
                d,
            ),
            CrossMode::Mlp => (None, 2 * d),
        };
        Self {
            mode,
            attention,
            head: GaussianHead::new(store, &format!("{name}.head"), input, d, rng),
        }
    }

    /// Pooled cross representation fed to the heads: the query-masked mean of
    /// non-causal attention from the query sequence over the key/value
    /// sequence, or the concatenated pooled sequences in MLP mode.
    pub fn pooled(&self, g: &mut Graph, store: &ParamStore, query: &SequenceRep, kv: &SequenceRep) -> Var {
        let Some(a) = &self.attention else {
            return g.concat_cols(&[query.pooled, kv.pooled]);
        };
        assert_eq!(query.batch, kv.batch, "cross attention batch sizes");
        let q = a.query.forward(g, store, query.matrix);
        let k = a.key.forward(g, store, kv.matrix);
        let v = a.value.forward(g, store, kv.matrix);
        let spec = AttentionSpec {
            batch: query.batch,
            len_q: query.len,
            len_k: kv.len,
            heads: a.heads,
            key_mask: kv.mask.clone(),
            causal: false,
        };
        let att = g.attention(q, k, v, spec);
        let att = a.out.forward(g, store, att);
        g.masked_mean(att, &query.mask, query.len)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, query: &SequenceRep, kv: &SequenceRep) -> GaussianVars {
        let pooled = self.pooled(g, store, query, kv);
        self.head.forward(g, store, pooled)
    }
}

/// Learnable diagonal Gaussian prior; the standard deviation is stored as a
/// softplus pre-activation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnablePrior {
    pub mu: ParamId,
    pub raw_sigma: ParamId,
}

impl LearnablePrior {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            mu: store.add(format!("{name}.mu"), Mat::zeros((1, d))),
            raw_sigma: store.add(
                format!("{name}.raw_sigma"),
                Mat::from_elem((1, d), inverse_positive(1.0)),
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore) -> GaussianVars {
        let mu = g.param(store, self.mu);
        let raw = g.param(store, self.raw_sigma);
        GaussianVars {
            mu,
            sigma: positive(g, raw),
        }
    }
}

/// Priors over the six latents: learnable per domain for the domain-specific
/// and pseudo latents, fixed standard normal for the cross-domain latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Priors {
    pub d: usize,
    pub z_x: LearnablePrior,
    pub z_y: LearnablePrior,
    pub z_a_x: LearnablePrior,
    pub z_a_y: LearnablePrior,
}

impl Priors {
    pub fn new(store: &mut ParamStore, d: usize) -> Self {
        Self {
            d,
            z_x: LearnablePrior::new(store, "prior.z_x", d),
            z_y: LearnablePrior::new(store, "prior.z_y", d),
            z_a_x: LearnablePrior::new(store, "prior.z_a_x", d),
            z_a_y: LearnablePrior::new(store, "prior.z_a_y", d),
        }
    }

    pub fn domain(&self, domain: Domain) -> &LearnablePrior {
        match domain {
            Domain::X => &self.z_x,
            Domain::Y => &self.z_y,
        }
    }

    pub fn pseudo(&self, domain: Domain) -> &LearnablePrior {
        match domain {
            Domain::X => &self.z_a_x,
            Domain::Y => &self.z_a_y,
        }
    }

    /// Fixed `N(0, I)` used for both cross-domain latents.
    pub fn cross(&self, g: &mut Graph) -> GaussianVars {
        GaussianVars {
            mu: g.constant(Mat::zeros((1, self.d))),
            sigma: g.constant(Mat::ones((1, self.d))),
        }
    }
}

/// `mu + sigma ⊙ noise` on the tape; `None` noise (evaluation) returns `mu`.
pub fn reparameterize(g: &mut Graph, params: GaussianVars, noise: Option<Mat>) -> Var {
    match noise {
        None => params.mu,
        Some(eps) => {
            let e = g.constant(eps);
            let s = g.mul(params.sigma, e);
            g.add(params.mu, s)
        }
    }
}

/// All encoders of the inference network.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet {
    pub domain_x: GaussianHead,
    pub domain_y: GaussianHead,
    pub pseudo_x: GaussianHead,
    pub pseudo_y: GaussianHead,
    /// Produces `z_t^y` (queries from X, keys/values from Y).
    pub cross_yx: CrossEncoder,
    /// Produces `z_t^x` (queries from Y, keys/values from X).
    pub cross_xy: CrossEncoder,
    /// `r^y(z_t^y | y)`.
    pub aux_y: GaussianHead,
    /// `r^x(z_t^x | x)`.
    pub aux_x: GaussianHead,
    pub priors: Priors,
}

impl InferenceNet {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, mode: CrossMode, rng: &mut Rng) -> Self {
        Self {
            domain_x: GaussianHead::new(store, "q.z_x", d, d, rng),
            domain_y: GaussianHead::new(store, "q.z_y", d, d, rng),
            pseudo_x: GaussianHead::new(store, "q.z_a_x", d, d, rng),
            pseudo_y: GaussianHead::new(store, "q.z_a_y", d, d, rng),
            cross_yx: CrossEncoder::new(store, "q.z_t_y", d, heads, mode, rng),
            cross_xy: CrossEncoder::new(store, "q.z_t_x", d, heads, mode, rng),
            aux_y: GaussianHead::new(store, "r.z_t_y", d, d, rng),
            aux_x: GaussianHead::new(store, "r.z_t_x", d, d, rng),
            priors: Priors::new(store, d),
        }
    }

    /// `q(z | ·)` from a domain's pooled real sequence.
    pub fn encode_domain(&self, g: &mut Graph, store: &ParamStore, pooled: Var, domain: Domain) -> GaussianVars {
        match domain {
            Domain::X => self.domain_x.forward(g, store, pooled),
            Domain::Y => self.domain_y.forward(g, store, pooled),
        }
    }

    /// `q(z_a | ·)` from a domain's pooled pseudo-sequence.
    pub fn encode_pseudo(&self, g: &mut Graph, store: &ParamStore, pooled: Var, domain: Domain) -> GaussianVars {
        match domain {
            Domain::X => self.pseudo_x.forward(g, store, pooled),
            Domain::Y => self.pseudo_y.forward(g, store, pooled),
        }
    }

    /// `q(z_t | x, y)`; `query` is the target domain's encoded sequence and
    /// `kv` the source domain's.
    pub fn encode_cross(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: &SequenceRep,
        kv: &SequenceRep,
        direction: Direction,
    ) -> GaussianVars {
        match direction {
            Direction::YtoX => self.cross_yx.encode(g, store, query, kv),
            Direction::XtoY => self.cross_xy.encode(g, store, query, kv),
        }
    }

    /// `r(z_t | source)` from the source domain's pooled real sequence.
    pub fn encode_aux(&self, g: &mut Graph, store: &ParamStore, pooled: Var, direction: Direction) -> GaussianVars {
        match direction {
            Direction::YtoX => self.aux_y.forward(g, store, pooled),
            Direction::XtoY => self.aux_x.forward(g, store, pooled),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dropout;
    use crate::rng::stream;
    use crate::seqenc::{EmbeddingTables, SelfAttentionBlock, SeqKind, SequenceEncoder};
    use rand_distr::{Distribution, StandardNormal};

    fn net(mode: CrossMode) -> (ParamStore, InferenceNet, SequenceEncoder) {
        let mut r = stream(11, "test", 0);
        let mut store = ParamStore::new();
        let tables = EmbeddingTables::new(&mut store, 9, 9, 8, 5, 5, &mut r);
        let block_x = SelfAttentionBlock::new(&mut store, "bx", 8, 4, &mut r);
        let block_y = SelfAttentionBlock::new(&mut store, "by", 8, 4, &mut r);
        let enc = SequenceEncoder {
            tables,
            block_x,
            block_y,
        };
        let net = InferenceNet::new(&mut store, 8, 4, mode, &mut r);
        (store, net, enc)
    }

    #[test]
    fn positive_mapping_inverts() {
        for s in [1e-3, 0.5, 1.0, 7.0] {
            let mut g = Graph::new();
            let x = g.constant(Mat::from_elem((1, 1), inverse_positive(s)));
            let y = positive(&mut g, x);
            assert!((g.scalar(y) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn priors_start_standard_normal() {
        let (store, net, _) = net(CrossMode::Attention);
        let mut g = Graph::new();
        let p = net.priors.z_x.forward(&mut g, &store);
        let v = p.values(&g, 0);
        assert!(v.mu.iter().all(|m| *m == 0.0));
        assert!(v.sigma.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_input_gives_bias_path_and_positive_sigma() {
        let (store, net, _) = net(CrossMode::Attention);
        let mut g = Graph::new();
        let z = g.constant(Mat::zeros((2, 8)));
        for p in [
            net.encode_domain(&mut g, &store, z, Domain::X),
            net.encode_pseudo(&mut g, &store, z, Domain::Y),
            net.encode_aux(&mut g, &store, z, Direction::YtoX),
        ] {
            // biases are zero at initialization, so the mean is exactly zero
            assert!(g.value(p.mu).iter().all(|v| *v == 0.0));
            assert!(p.is_finite(&g));
            assert_eq!(p.values(&g, 0), p.values(&g, 1));
        }
    }

    #[test]
    fn heads_are_lipschitz_under_small_perturbations() {
        let (store, net, _) = net(CrossMode::Attention);
        let mut r = stream(2, "x", 0);
        let base = crate::params::normal(1, 8, 1.0, &mut r);
        let dir = crate::params::normal(1, 8, 1.0, &mut r);
        let run = |delta: f64| {
            let mut g = Graph::new();
            let x = g.constant(&base + &(&dir * delta));
            let p = net.encode_pseudo(&mut g, &store, x, Domain::X);
            g.value(p.mu).clone()
        };
        let m0 = run(0.0);
        let d1 = (&run(1e-4) - &m0).mapv(f64::abs).sum();
        let d2 = (&run(2e-4) - &m0).mapv(f64::abs).sum();
        assert!(d1 > 0.0 && d1 < 1e-2);
        assert!((d2 / d1 - 2.0).abs() < 1e-2, "first-order scaling: {}", d2 / d1);
    }

    fn rep(enc: &SequenceEncoder, store: &ParamStore, g: &mut Graph, seq: &[u32], domain: Domain) -> SequenceRep {
        enc.encode(g, store, &[seq], domain, SeqKind::Real, &mut Dropout::eval())
            .unwrap()
    }

    #[test]
    fn cross_directions_have_separate_parameters() {
        let (store, net, enc) = net(CrossMode::Attention);
        let mut g = Graph::new();
        let x = rep(&enc, &store, &mut g, &[0, 1, 2, 3, 4], Domain::X);
        let y = rep(&enc, &store, &mut g, &[0, 0, 5, 6, 7], Domain::Y);
        let a = net.encode_cross(&mut g, &store, &x, &y, Direction::YtoX);
        let b = net.encode_cross(&mut g, &store, &x, &y, Direction::XtoY);
        assert_ne!(g.value(a.mu), g.value(b.mu));
    }

    #[test]
    fn mlp_mode_with_zero_inputs_is_bias_determined() {
        let (store, net, _) = net(CrossMode::Mlp);
        let mut g = Graph::new();
        let zero = g.constant(Mat::zeros((1, 8)));
        let s = SequenceRep {
            matrix: zero,
            mask: vec![false],
            pooled: zero,
            batch: 1,
            len: 1,
        };
        let p = net.encode_cross(&mut g, &store, &s, &s, Direction::YtoX);
        assert!(g.value(p.mu).iter().all(|v| *v == 0.0));
        assert!(p.is_finite(&g));
    }

    #[test]
    fn attention_pool_invariant_to_key_permutation() {
        let (store, net, _) = net(CrossMode::Attention);
        let mut r = stream(5, "k", 0);
        let query = crate::params::normal(4, 8, 1.0, &mut r);
        // key/value rows move together; the padded position 0 stays in place
        let kv = crate::params::normal(4, 8, 1.0, &mut r);
        let perm = [0usize, 3, 1, 2];
        let kv_perm = ndarray::Array2::from_shape_fn((4, 8), |(i, j)| kv[[perm[i], j]]);
        let pooled = |kvm: &Mat| {
            let mut g = Graph::new();
            let q = g.constant(query.clone());
            let k = g.constant(kvm.clone());
            let qs = SequenceRep {
                matrix: q,
                mask: vec![false, true, true, true],
                pooled: q,
                batch: 1,
                len: 4,
            };
            let ks = SequenceRep {
                matrix: k,
                mask: vec![false, true, true, true],
                pooled: k,
                batch: 1,
                len: 4,
            };
            let p = net.cross_yx.pooled(&mut g, &store, &qs, &ks);
            g.value(p).clone()
        };
        let a = pooled(&kv);
        let b = pooled(&kv_perm);
        assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn factorization_domain_posteriors_ignore_other_domain() {
        let (store, net, enc) = net(CrossMode::Attention);
        let params = |y_seq: &[u32]| {
            let mut g = Graph::new();
            let x = rep(&enc, &store, &mut g, &[0, 1, 2, 3, 4], Domain::X);
            let _y = rep(&enc, &store, &mut g, y_seq, Domain::Y);
            let q = net.encode_domain(&mut g, &store, x.pooled, Domain::X);
            q.values(&g, 0)
        };
        assert_eq!(params(&[0, 0, 1, 2, 3]), params(&[8, 7, 6, 5, 4]));
    }

    #[test]
    fn reparameterize_contracts() {
        let p = GaussianParams {
            mu: vec![0.5, -1.0],
            sigma: vec![1.0, 1.0],
        };
        assert_eq!(p.reparameterize(&[0.0, 0.0], true), p.mu);
        assert_eq!(p.reparameterize(&[3.0, 3.0], false), p.mu);

        let p = GaussianParams {
            mu: vec![0.3, -2.0, 5.0],
            sigma: vec![0.5, 2.0, 0.1],
        };
        let mut r = stream(7, "mc", 0);
        let n = 10_000;
        let mut sum = [0.0; 3];
        for _ in 0..n {
            let e: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut r)).collect();
            for (s, z) in sum.iter_mut().zip(p.reparameterize(&e, true)) {
                *s += z;
            }
        }
        for (i, s) in sum.iter().enumerate() {
            let mean = s / n as f64;
            assert!((mean - p.mu[i]).abs() < 4.0 * p.sigma[i] / (n as f64).sqrt());
        }
    }

    #[test]
    fn reparameterize_gradients_match_finite_differences() {
        let mu0 = ndarray::array![[0.2, -0.7, 1.1]];
        let s0 = ndarray::array![[0.9, 0.4, 1.7]];
        let eps = ndarray::array![[0.3, -1.2, 0.8]];
        let w = ndarray::array![[1.0, -2.0, 0.5]];
        let f = |mu: &Mat, s: &Mat| ((mu + &(s * &eps)) * &w).sum();
        let mut g = Graph::new();
        let mu = g.input(mu0.clone());
        let sg = g.input(s0.clone());
        let z = reparameterize(&mut g, GaussianVars { mu, sigma: sg }, Some(eps.clone()));
        let grads = g.backward_with(z, w.clone());
        let h = 1e-6;
        for i in 0..3 {
            let mut a = mu0.clone();
            a[[0, i]] += h;
            let mut b = mu0.clone();
            b[[0, i]] -= h;
            let fd = (f(&a, &s0) - f(&b, &s0)) / (2.0 * h);
            let an = grads.of(mu).unwrap()[[0, i]];
            assert!((fd - an).abs() / an.abs().max(1e-12) < 1e-4);
            // dz/dmu is the identity
            assert_eq!(an, w[[0, i]]);
            let mut a = s0.clone();
            a[[0, i]] += h;
            let mut b = s0.clone();
            b[[0, i]] -= h;
            let fd = (f(&mu0, &a) - f(&mu0, &b)) / (2.0 * h);
            let an = grads.of(sg).unwrap()[[0, i]];
            assert!((fd - an).abs() / an.abs().max(1e-12) < 1e-4);
            // dz/dsigma is diag(noise)
            assert!((an - w[[0, i]] * eps[[0, i]]).abs() < 1e-15);
        }
    }
}
