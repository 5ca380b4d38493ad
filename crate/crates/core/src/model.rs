//! The two-headed model: a functional network predicting `û` and, in
//! Bayesian mode, a surrogate network predicting `r = log σ²`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::basis::{BasisSpec, KanLayer, KanNetwork, LayerNodes, LayerParams};
use crate::bayes::{
    sample_network_nodes, AuxiliaryPosterior, BayesianKan, BayesianLayer, BayesianLayerParams, FlowStack,
    NetworkDraw, PlanarStep, VariationalGaussian, WeightPosterior, DEFAULT_FLOW_STEPS,
};
use crate::error::{Error, Result};
use crate::hexfloat;
use crate::likelihood::{LikelihoodKind, DEFAULT_NU};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Bayesian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodChoice {
    Gaussian,
    StudentT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: Vec<usize>,
    pub grid: usize,
    pub span: usize,
    pub order: u32,
    pub input_domain: (f64, f64),
    /// Surrogate structure; copies `width` when absent.
    pub surrogate_width: Option<Vec<usize>>,
    pub flow_steps: usize,
    pub mode: Mode,
    pub likelihood: LikelihoodChoice,
}

impl ModelConfig {
    pub fn new(width: Vec<usize>, grid: usize, span: usize, order: u32, input_domain: (f64, f64)) -> Self {
        Self {
            width,
            grid,
            span,
            order,
            input_domain,
            surrogate_width: None,
            flow_steps: DEFAULT_FLOW_STEPS,
            mode: Mode::Bayesian,
            likelihood: LikelihoodChoice::Gaussian,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FunctionalNet {
    Deterministic(KanNetwork),
    Bayesian(BayesianKan),
}

impl FunctionalNet {
    pub fn width(&self) -> Vec<usize> {
        match self {
            Self::Deterministic(n) => n.width(),
            Self::Bayesian(n) => n.width(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BhrKanModel {
    pub functional: FunctionalNet,
    pub surrogate: Option<BayesianKan>,
    pub likelihood: LikelihoodKind,
}

/// Posterior noise for both heads; `None` for deterministic parts.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDraw {
    pub functional: Option<NetworkDraw>,
    pub surrogate: Option<NetworkDraw>,
}

/// Concrete networks for one draw.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedModel {
    pub functional: KanNetwork,
    pub surrogate: Option<KanNetwork>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub u_hat: f64,
    pub r_hat: Option<f64>,
    pub nu: Option<f64>,
}

/// Tape handles for a bound model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    /// Leaves in [`BhrKanModel::parameter_slices_mut`] order.
    pub leaves: Vec<NodeId>,
    pub functional: Vec<LayerNodes>,
    pub surrogate: Option<Vec<LayerNodes>>,
    pub kl: Option<NodeId>,
    pub nu_rho: Option<NodeId>,
}

impl BhrKanModel {
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let likelihood = match config.likelihood {
            LikelihoodChoice::Gaussian => LikelihoodKind::Gaussian,
            LikelihoodChoice::StudentT => LikelihoodKind::student_t(DEFAULT_NU)?,
        };
        let (width, grid, span, order, domain) =
            (&config.width, config.grid, config.span, config.order, config.input_domain);
        match config.mode {
            Mode::Deterministic => Ok(Self {
                functional: FunctionalNet::Deterministic(KanNetwork::new(width, grid, span, order, domain, rng)?),
                surrogate: None,
                likelihood,
            }),
            Mode::Bayesian => {
                let sw = config.surrogate_width.as_ref().unwrap_or(width);
                if sw.first() != width.first() {
                    return Err(Error::Config(format!(
                        "surrogate input width {:?} differs from functional input width {:?}",
                        sw.first(),
                        width.first()
                    )));
                }
                let functional = BayesianKan::new(width, grid, span, order, domain, config.flow_steps, rng)?;
                let surrogate = BayesianKan::new(sw, grid, span, order, domain, config.flow_steps, rng)?;
                Ok(Self {
                    functional: FunctionalNet::Bayesian(functional),
                    surrogate: Some(surrogate),
                    likelihood,
                })
            }
        }
    }

    pub fn mode(&self) -> Mode {
        match self.functional {
            FunctionalNet::Deterministic(_) => Mode::Deterministic,
            FunctionalNet::Bayesian(_) => Mode::Bayesian,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.functional.width()[0]
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelDraw {
        let functional = match &self.functional {
            FunctionalNet::Bayesian(n) => Some(n.draw(rng)),
            FunctionalNet::Deterministic(_) => None,
        };
        ModelDraw {
            functional,
            surrogate: self.surrogate.as_ref().map(|s| s.draw(rng)),
        }
    }

    pub fn zero_draw(&self) -> ModelDraw {
        ModelDraw {
            functional: match &self.functional {
                FunctionalNet::Bayesian(n) => Some(n.zero_draw()),
                FunctionalNet::Deterministic(_) => None,
            },
            surrogate: self.surrogate.as_ref().map(|s| s.zero_draw()),
        }
    }

    pub fn realize(&self, draw: &ModelDraw) -> Result<RealizedModel> {
        let functional = match (&self.functional, &draw.functional) {
            (FunctionalNet::Deterministic(n), _) => n.clone(),
            (FunctionalNet::Bayesian(n), Some(d)) => n.realize(d),
            (FunctionalNet::Bayesian(_), None) => return Err(Error::Config("bayesian functional needs a draw".into())),
        };
        let surrogate = match (&self.surrogate, &draw.surrogate) {
            (Some(s), Some(d)) => Some(s.realize(d)),
            (None, _) => None,
            (Some(_), None) => return Err(Error::Config("surrogate needs a draw".into())),
        };
        Ok(RealizedModel { functional, surrogate })
    }

    /// Point prediction; `sampling` draws fresh posterior noise, otherwise the
    /// posterior means are used.
    pub fn predict<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, sampling: bool) -> Result<Prediction> {
        let draw = if sampling { self.draw(rng) } else { self.zero_draw() };
        let realized = self.realize(&draw)?;
        let u_hat = realized.functional.network_forward(x)?[0];
        let r_hat = match &realized.surrogate {
            Some(s) => Some(s.network_forward(x)?[0]),
            None => None,
        };
        Ok(Prediction {
            u_hat,
            r_hat,
            nu: self.likelihood.nu(),
        })
    }

    /// Every trainable array: functional, then surrogate, then `nu_rho`.
    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mode = self.mode();
        let mut out: Vec<&mut [f64]> = match &mut self.functional {
            FunctionalNet::Deterministic(n) => n.parameters_mut().into_iter().map(|t| t.data_mut()).collect(),
            FunctionalNet::Bayesian(n) => n.parameters_mut().into_iter().map(|t| t.data_mut()).collect(),
        };
        if let Some(s) = &mut self.surrogate {
            out.extend(s.parameters_mut().into_iter().map(|t| t.data_mut()));
        }
        if let (Mode::Bayesian, LikelihoodKind::StudentT { nu_rho }) = (mode, &mut self.likelihood) {
            out.push(std::slice::from_mut(nu_rho));
        }
        out
    }

    pub fn parameter_values(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = match &self.functional {
            FunctionalNet::Deterministic(n) => n.parameters().iter().map(|t| t.data().to_vec()).collect(),
            FunctionalNet::Bayesian(n) => n.parameters().iter().map(|t| t.data().to_vec()).collect(),
        };
        if let Some(s) = &self.surrogate {
            out.extend(s.parameters().iter().map(|t| t.data().to_vec()));
        }
        if let (Mode::Bayesian, LikelihoodKind::StudentT { nu_rho }) = (self.mode(), &self.likelihood) {
            out.push(vec![*nu_rho]);
        }
        out
    }

    /// Binds parameters to the tape and samples every Bayesian layer with `draw`.
    pub fn bind(&self, tape: &mut Tape, draw: &ModelDraw, include_basis_kl: bool) -> Result<BoundModel> {
        let mut leaves = Vec::new();
        let mut kl: Option<NodeId> = None;
        let mut add_kl = |tape: &mut Tape, k: NodeId| -> Result<()> {
            kl = Some(match kl {
                Some(prev) => tape.add(prev, k)?,
                None => k,
            });
            Ok(())
        };
        let functional = match (&self.functional, &draw.functional) {
            (FunctionalNet::Deterministic(n), _) => n.bind(tape, &mut leaves),
            (FunctionalNet::Bayesian(n), Some(d)) => {
                let nodes = n.bind(tape, &mut leaves);
                let (layers, k) = sample_network_nodes(tape, &nodes, d, include_basis_kl)?;
                add_kl(tape, k)?;
                layers
            }
            (FunctionalNet::Bayesian(_), None) => return Err(Error::Config("bayesian functional needs a draw".into())),
        };
        let surrogate = match (&self.surrogate, &draw.surrogate) {
            (Some(s), Some(d)) => {
                let nodes = s.bind(tape, &mut leaves);
                let (layers, k) = sample_network_nodes(tape, &nodes, d, include_basis_kl)?;
                add_kl(tape, k)?;
                Some(layers)
            }
            (None, _) => None,
            (Some(_), None) => return Err(Error::Config("surrogate needs a draw".into())),
        };
        let nu_rho = match (self.mode(), self.likelihood) {
            (Mode::Bayesian, LikelihoodKind::StudentT { nu_rho }) => {
                let id = tape.leaf(Tensor::scalar(nu_rho));
                leaves.push(id);
                Some(id)
            }
            _ => None,
        };
        Ok(BoundModel {
            leaves,
            functional,
            surrogate,
            kl,
            nu_rho,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDoc::from_model(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<ModelDoc>(text)?.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    functional: NetworkDoc,
    surrogate: Option<NetworkDoc>,
    likelihood: LikelihoodDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LikelihoodDoc {
    kind: LikelihoodChoice,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex")]
    nu_rho: Option<f64>,
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => crate::hexfloat::scalar::serialize(x, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| crate::hexfloat::parse(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainDoc {
    #[serde(with = "hexfloat::scalar")]
    low: f64,
    #[serde(with = "hexfloat::scalar")]
    high: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    #[serde(with = "hexfloat::vec")]
    s: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    e: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    w: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepDoc {
    #[serde(with = "hexfloat::vec")]
    u: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    w: Vec<f64>,
    #[serde(with = "hexfloat::scalar")]
    b: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuxDoc {
    #[serde(with = "hexfloat::scalar")]
    mean_slope: f64,
    #[serde(with = "hexfloat::scalar")]
    mean_bias: f64,
    #[serde(with = "hexfloat::scalar")]
    std_slope: f64,
    #[serde(with = "hexfloat::scalar")]
    std_bias: f64,
    flow: Vec<StepDoc>,
}

/// Posterior state beyond the means stored in [`LayerDoc`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BayesDoc {
    #[serde(with = "hexfloat::vec")]
    s_rho: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    e_rho: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    w_rho: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    z_mu: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    z_rho: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    s_prior: Vec<f64>,
    #[serde(with = "hexfloat::vec")]
    e_prior: Vec<f64>,
    flow: Vec<StepDoc>,
    aux: AuxDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    width: Vec<usize>,
    grid: usize,
    span: usize,
    order: u32,
    domains: Vec<DomainDoc>,
    layers: Vec<LayerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bayes: Option<Vec<BayesDoc>>,
}

fn steps_doc(flow: &FlowStack) -> Vec<StepDoc> {
    flow.steps
        .iter()
        .map(|s| StepDoc {
            u: s.u.data().to_vec(),
            w: s.w.data().to_vec(),
            b: s.b.item(),
        })
        .collect()
}

fn steps_from_doc(docs: &[StepDoc], dim: usize) -> Result<FlowStack> {
    let steps = docs
        .iter()
        .map(|d| {
            if d.u.len() != dim || d.w.len() != dim {
                return Err(Error::Length {
                    what: "flow step dimension",
                    left: d.u.len().max(d.w.len()),
                    right: dim,
                });
            }
            Ok(PlanarStep {
                u: Tensor::vector(d.u.clone()),
                w: Tensor::vector(d.w.clone()),
                b: Tensor::scalar(d.b),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FlowStack { steps, z_dim: dim })
}

fn first_spec(specs: &[BasisSpec]) -> Result<&BasisSpec> {
    specs.first().ok_or_else(|| Error::Config("network has no layers".into()))
}

impl NetworkDoc {
    fn header(specs: &[BasisSpec], width: Vec<usize>) -> Result<Self> {
        let s = first_spec(specs)?;
        Ok(Self {
            width,
            grid: s.grid,
            span: s.span,
            order: s.order,
            domains: specs
                .iter()
                .map(|s| DomainDoc {
                    low: s.domain_low,
                    high: s.domain_high,
                })
                .collect(),
            layers: Vec::new(),
            bayes: None,
        })
    }

    fn from_kan(net: &KanNetwork) -> Self {
        let specs: Vec<BasisSpec> = net.layers.iter().map(|l| l.spec).collect();
        let mut doc = Self::header(&specs, net.width()).expect("network has layers");
        doc.layers = net
            .layers
            .iter()
            .map(|l| LayerDoc {
                s: l.params.starts.data().to_vec(),
                e: l.params.ends.data().to_vec(),
                w: l.params.weights.data().to_vec(),
            })
            .collect();
        doc
    }

    fn from_bayes(net: &BayesianKan) -> Self {
        let specs: Vec<BasisSpec> = net.layers.iter().map(|l| l.spec).collect();
        let mut doc = Self::header(&specs, net.width()).expect("network has layers");
        doc.layers = net
            .layers
            .iter()
            .map(|l| LayerDoc {
                s: l.params.starts.mu.data().to_vec(),
                e: l.params.ends.mu.data().to_vec(),
                w: l.params.weights.w_mean.data().to_vec(),
            })
            .collect();
        doc.bayes = Some(
            net.layers
                .iter()
                .map(|l| {
                    let p = &l.params;
                    let a = &p.weights.aux;
                    BayesDoc {
                        s_rho: p.starts.rho.data().to_vec(),
                        e_rho: p.ends.rho.data().to_vec(),
                        w_rho: p.weights.w_rho.data().to_vec(),
                        z_mu: p.weights.z_base.mu.data().to_vec(),
                        z_rho: p.weights.z_base.rho.data().to_vec(),
                        s_prior: p.start_prior.clone(),
                        e_prior: p.end_prior.clone(),
                        flow: steps_doc(&p.weights.flow),
                        aux: AuxDoc {
                            mean_slope: a.mean_slope.item(),
                            mean_bias: a.mean_bias.item(),
                            std_slope: a.std_slope.item(),
                            std_bias: a.std_bias.item(),
                            flow: steps_doc(&a.flow),
                        },
                    }
                })
                .collect(),
        );
        doc
    }

    fn specs(&self) -> Result<Vec<BasisSpec>> {
        if self.width.len() < 2 || self.domains.len() + 1 != self.width.len() || self.layers.len() + 1 != self.width.len()
        {
            return Err(Error::Config(format!(
                "network document with width {:?} has {} domains and {} layers",
                self.width,
                self.domains.len(),
                self.layers.len()
            )));
        }
        self.domains
            .iter()
            .map(|d| BasisSpec::new(self.grid, self.span, self.order, d.low, d.high))
            .collect()
    }

    fn shapes(&self, i: usize, spec: &BasisSpec) -> ([usize; 2], [usize; 2]) {
        let k = spec.num_basis();
        let (n_in, n_out) = (self.width[i], self.width[i + 1]);
        ([n_in, k], [n_out, n_in * k])
    }

    fn into_kan(self) -> Result<KanNetwork> {
        let specs = self.specs()?;
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (se, ws) = self.shapes(i, spec);
                let l = &self.layers[i];
                Ok(KanLayer {
                    spec: *spec,
                    params: LayerParams {
                        starts: Tensor::new(l.s.clone(), se.to_vec())?,
                        ends: Tensor::new(l.e.clone(), se.to_vec())?,
                        weights: Tensor::new(l.w.clone(), ws.to_vec())?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        KanNetwork::from_layers(layers)
    }

    fn into_bayes(self) -> Result<BayesianKan> {
        let specs = self.specs()?;
        let bayes = self
            .bayes
            .as_ref()
            .ok_or_else(|| Error::Config("bayesian network document lacks posterior state".into()))?;
        if bayes.len() != specs.len() {
            return Err(Error::Length {
                what: "posterior layers",
                left: bayes.len(),
                right: specs.len(),
            });
        }
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (se, ws) = self.shapes(i, spec);
                let (l, b) = (&self.layers[i], &bayes[i]);
                let n_out = ws[0];
                let gaussian = |mu: &[f64], rho: &[f64], shape: &[usize]| -> Result<VariationalGaussian> {
                    Ok(VariationalGaussian {
                        mu: Tensor::new(mu.to_vec(), shape.to_vec())?,
                        rho: Tensor::new(rho.to_vec(), shape.to_vec())?,
                    })
                };
                let starts = gaussian(&l.s, &b.s_rho, &se)?;
                let ends = gaussian(&l.e, &b.e_rho, &se)?;
                for prior in [&b.s_prior, &b.e_prior] {
                    if prior.len() != starts.mu.len() {
                        return Err(Error::Length {
                            what: "support prior",
                            left: prior.len(),
                            right: starts.mu.len(),
                        });
                    }
                }
                let weights = WeightPosterior {
                    w_mean: Tensor::new(l.w.clone(), ws.to_vec())?,
                    w_rho: Tensor::new(b.w_rho.clone(), ws.to_vec())?,
                    z_base: gaussian(&b.z_mu, &b.z_rho, &[n_out])?,
                    flow: steps_from_doc(&b.flow, n_out)?,
                    aux: AuxiliaryPosterior {
                        mean_slope: Tensor::scalar(b.aux.mean_slope),
                        mean_bias: Tensor::scalar(b.aux.mean_bias),
                        std_slope: Tensor::scalar(b.aux.std_slope),
                        std_bias: Tensor::scalar(b.aux.std_bias),
                        flow: steps_from_doc(&b.aux.flow, n_out)?,
                    },
                };
                Ok(BayesianLayer {
                    spec: *spec,
                    params: BayesianLayerParams {
                        starts,
                        ends,
                        weights,
                        start_prior: b.s_prior.clone(),
                        end_prior: b.e_prior.clone(),
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(BayesianKan { layers })
    }
}

impl ModelDoc {
    fn from_model(model: &BhrKanModel) -> Self {
        let functional = match &model.functional {
            FunctionalNet::Deterministic(n) => NetworkDoc::from_kan(n),
            FunctionalNet::Bayesian(n) => NetworkDoc::from_bayes(n),
        };
        let likelihood = match model.likelihood {
            LikelihoodKind::Gaussian => LikelihoodDoc {
                kind: LikelihoodChoice::Gaussian,
                nu_rho: None,
            },
            LikelihoodKind::StudentT { nu_rho } => LikelihoodDoc {
                kind: LikelihoodChoice::StudentT,
                nu_rho: Some(nu_rho),
            },
        };
        Self {
            functional,
            surrogate: model.surrogate.as_ref().map(NetworkDoc::from_bayes),
            likelihood,
        }
    }

    fn into_model(self) -> Result<BhrKanModel> {
        let functional = if self.functional.bayes.is_some() {
            FunctionalNet::Bayesian(self.functional.into_bayes()?)
        } else {
            FunctionalNet::Deterministic(self.functional.into_kan()?)
        };
        let surrogate = self.surrogate.map(NetworkDoc::into_bayes).transpose()?;
        let likelihood = match (self.likelihood.kind, self.likelihood.nu_rho) {
            (LikelihoodChoice::Gaussian, _) => LikelihoodKind::Gaussian,
            (LikelihoodChoice::StudentT, Some(nu_rho)) => LikelihoodKind::StudentT { nu_rho },
            (LikelihoodChoice::StudentT, None) => {
                return Err(Error::Config("student-t likelihood document lacks nu_rho".into()))
            }
        };
        let model = BhrKanModel {
            functional,
            surrogate,
            likelihood,
        };
        if let Some(s) = &model.surrogate {
            if s.input_dim() != model.input_dim() {
                return Err(Error::Config("surrogate and functional input widths differ".into()));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::softplus_inv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn build_copies_structure() {
        let cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
        let m = BhrKanModel::build(&cfg, &mut rng(0)).unwrap();
        assert_eq!(m.functional.width(), vec![2, 2, 1]);
        assert_eq!(m.surrogate.as_ref().unwrap().width(), vec![2, 2, 1]);

        let cfg = ModelConfig::new(vec![1, 1], 5, 3, 2, (0.0, 1.0));
        let m = BhrKanModel::build(&cfg, &mut rng(0)).unwrap();
        assert_eq!(m.functional.width(), vec![1, 1]);

        let mut cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
        cfg.surrogate_width = Some(vec![2, 4, 1]);
        let m = BhrKanModel::build(&cfg, &mut rng(0)).unwrap();
        assert_eq!(m.surrogate.as_ref().unwrap().width(), vec![2, 4, 1]);
        cfg.surrogate_width = Some(vec![3, 1]);
        assert!(BhrKanModel::build(&cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn deterministic_mode_has_no_variance_head() {
        let mut cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
        cfg.mode = Mode::Deterministic;
        let m = BhrKanModel::build(&cfg, &mut rng(1)).unwrap();
        let p = m.predict(&[0.1, 0.2], &mut rng(2), true).unwrap();
        assert_eq!(p.r_hat, None);
    }

    #[test]
    fn frozen_prediction_is_fixed_point() {
        let cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
        let m = BhrKanModel::build(&cfg, &mut rng(3)).unwrap();
        let a = m.predict(&[0.1, 0.2], &mut rng(4), false).unwrap();
        let b = m.predict(&[0.1, 0.2], &mut rng(5), false).unwrap();
        assert_eq!(a, b);
        let c = m.predict(&[0.1, 0.2], &mut rng(6), true).unwrap();
        assert_ne!(a.u_hat, c.u_hat);
    }

    #[test]
    fn collapsed_posterior_matches_deterministic_network() {
        let cfg = ModelConfig::new(vec![2, 2, 1], 5, 3, 4, (-1.0, 1.0));
        let mut m = BhrKanModel::build(&cfg, &mut rng(7)).unwrap();
        let FunctionalNet::Bayesian(net) = &mut m.functional else { unreachable!() };
        for layer in &mut net.layers {
            let p = &mut layer.params;
            for rho in [&mut p.starts.rho, &mut p.ends.rho, &mut p.weights.w_rho, &mut p.weights.z_base.rho] {
                rho.data_mut().fill(softplus_inv(1e-300));
            }
        }
        let mean = net.mean_network();
        let x = [0.4, -0.3];
        let expected = mean.network_forward(&x).unwrap()[0];
        for seed in 0..5 {
            let p = m.predict(&x, &mut rng(seed), true).unwrap();
            assert!((p.u_hat - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        for (mode, lik) in [
            (Mode::Bayesian, LikelihoodChoice::StudentT),
            (Mode::Bayesian, LikelihoodChoice::Gaussian),
            (Mode::Deterministic, LikelihoodChoice::Gaussian),
        ] {
            let mut cfg = ModelConfig::new(vec![2, 2, 1], 3, 2, 4, (-1.0, 1.0));
            cfg.mode = mode;
            cfg.likelihood = lik;
            let m = BhrKanModel::build(&cfg, &mut rng(8)).unwrap();
            let back = BhrKanModel::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m);
        }
        assert!(BhrKanModel::from_json("{\"functional\": 1}").is_err());
    }

    #[test]
    fn bind_leaf_order_matches_slices() {
        let mut cfg = ModelConfig::new(vec![2, 2, 1], 3, 2, 4, (-1.0, 1.0));
        cfg.likelihood = LikelihoodChoice::StudentT;
        let mut m = BhrKanModel::build(&cfg, &mut rng(9)).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, &m.zero_draw(), true).unwrap();
        let ids = bound.leaves.clone();
        let slices = m.parameter_slices_mut();
        assert_eq!(ids.len(), slices.len());
        for (id, s) in ids.iter().zip(slices) {
            assert_eq!(tape.value(*id).data(), &*s);
        }
        assert!(bound.kl.is_some() && bound.nu_rho.is_some());
    }
}
