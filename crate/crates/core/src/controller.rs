//! Recurrent controller cell with its interface and output heads.
//!
//! Every head sees the concatenation `[x, h, r]` of the external input, a
//! hidden state and the current read vector. The hidden update and the
//! interface head use the previous hidden state; the output head uses the
//! freshly computed one.

use crate::autodiff::{AdError, AdResult, Graph};
use crate::memory::ShiftOffsets;
use crate::params::{ParamError, ParamId, ParameterStore};
use rand::Rng;

/// Bits per sequence item.
pub const ITEM_BITS: usize = 8;

/// Init range for weight matrices; biases start at zero.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputSpec {
    /// Encoders produce no output.
    None,
    Linear {
        out: usize,
    },
    /// One ReLU hidden layer.
    Mlp {
        hidden: usize,
        out: usize,
    },
}

impl OutputSpec {
    pub fn width(&self) -> usize {
        match self {
            OutputSpec::None => 0,
            OutputSpec::Linear { out } | OutputSpec::Mlp { out, .. } => *out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControllerConfig {
    /// Width of the external input `x`; zero for solvers without auxiliary input.
    pub input_size: usize,
    pub hidden_size: usize,
    /// Memory word size `M`.
    pub read_size: usize,
    pub shift: ShiftOffsets,
    pub output: OutputSpec,
}

impl ControllerConfig {
    /// 8-bit input, 5 hidden units, 10-wide words, `±1` shifts, no output.
    pub fn encoder() -> Self {
        Self {
            input_size: ITEM_BITS,
            hidden_size: 5,
            read_size: 10,
            shift: ShiftOffsets::unit(),
            output: OutputSpec::None,
        }
    }

    pub fn concat_size(&self) -> usize {
        self.input_size + self.hidden_size + self.read_size
    }

    /// Raw interface width: add, erase, shift logits, sharpening.
    pub fn interface_size(&self) -> usize {
        2 * self.read_size + self.shift.len() + 1
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.hidden_size == 0 || self.read_size == 0 {
            return Err(ControllerError::Config("hidden and read sizes must be positive".into()));
        }
        if self.hidden_size >= ITEM_BITS {
            return Err(ControllerError::Config(format!(
                "hidden size {} must be smaller than an item ({ITEM_BITS} bits)",
                self.hidden_size
            )));
        }
        if let OutputSpec::Mlp { hidden: 0, .. } | OutputSpec::Linear { out: 0 } | OutputSpec::Mlp { out: 0, .. } =
            self.output
        {
            return Err(ControllerError::Config("output widths must be positive".into()));
        }
        Ok(())
    }

    /// Scalar count of the parameters [`Controller::build`] allocates.
    pub fn param_count(&self) -> usize {
        let c = self.concat_size();
        let h = self.hidden_size;
        let p = self.interface_size();
        let out = match self.output {
            OutputSpec::None => 0,
            OutputSpec::Linear { out } => out * c + out,
            OutputSpec::Mlp { hidden, out } => hidden * c + hidden + out * hidden + out,
        };
        h + h * c + h + p * c + p + out
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("invalid controller config: {0}")]
    Config(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("controller `{0}` has no output head")]
    NoOutputHead(String),
}

#[derive(Debug, Clone, PartialEq)]
enum OutputParams {
    None,
    Linear {
        w: ParamId,
        b: ParamId,
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

/// Parameter handles of one controller inside a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub name: String,
    pub config: ControllerConfig,
    h0: ParamId,
    w_h: ParamId,
    b_h: ParamId,
    w_p: ParamId,
    b_p: ParamId,
    out: OutputParams,
}

/// Interface parameters for one step.
#[derive(Debug, Clone)]
pub struct InterfaceParams<V> {
    pub add: V,
    pub erase: V,
    pub shift: V,
    pub gamma: V,
}

/// A controller's parameters materialized on a graph for one rollout.
#[derive(Debug, Clone)]
pub struct Bound<V> {
    h0: V,
    w_h: V,
    b_h: V,
    w_p: V,
    b_p: V,
    out: Vec<V>,
}

impl Controller {
    /// Allocates all parameters under group `name`, names prefixed `name.`.
    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        config: ControllerConfig,
        rng: &mut R,
    ) -> Result<Self, ControllerError> {
        config.validate()?;
        let c = config.concat_size();
        let h = config.hidden_size;
        let p = config.interface_size();
        let n = |s: &str| format!("{name}.{s}");
        let h0 = store.insert_zeros(name, &n("h0"), &[h])?;
        let w_h = store.insert_uniform(name, &n("w_h"), &[h, c], INIT_SCALE, rng)?;
        let b_h = store.insert_zeros(name, &n("b_h"), &[h])?;
        let w_p = store.insert_uniform(name, &n("w_p"), &[p, c], INIT_SCALE, rng)?;
        let b_p = store.insert_zeros(name, &n("b_p"), &[p])?;
        let out = match config.output {
            OutputSpec::None => OutputParams::None,
            OutputSpec::Linear { out } => OutputParams::Linear {
                w: store.insert_uniform(name, &n("w_out"), &[out, c], INIT_SCALE, rng)?,
                b: store.insert_zeros(name, &n("b_out"), &[out])?,
            },
            OutputSpec::Mlp { hidden, out } => OutputParams::Mlp {
                w1: store.insert_uniform(name, &n("w_out1"), &[hidden, c], INIT_SCALE, rng)?,
                b1: store.insert_zeros(name, &n("b_out1"), &[hidden])?,
                w2: store.insert_uniform(name, &n("w_out2"), &[out, hidden], INIT_SCALE, rng)?,
                b2: store.insert_zeros(name, &n("b_out2"), &[out])?,
            },
        };
        Ok(Self {
            name: name.to_string(),
            config,
            h0,
            w_h,
            b_h,
            w_p,
            b_p,
            out,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.h0, self.w_h, self.b_h, self.w_p, self.b_p];
        match self.out {
            OutputParams::None => {}
            OutputParams::Linear { w, b } => ids.extend([w, b]),
            OutputParams::Mlp { w1, b1, w2, b2 } => ids.extend([w1, b1, w2, b2]),
        }
        ids
    }

    pub fn has_output(&self) -> bool {
        self.out != OutputParams::None
    }

    pub fn bind<G: Graph>(&self, g: &mut G, store: &ParameterStore) -> Bound<G::V> {
        let out = match self.out {
            OutputParams::None => vec![],
            OutputParams::Linear { w, b } => vec![g.param(store, w), g.param(store, b)],
            OutputParams::Mlp { w1, b1, w2, b2 } => vec![
                g.param(store, w1),
                g.param(store, b1),
                g.param(store, w2),
                g.param(store, b2),
            ],
        };
        Bound {
            h0: g.param(store, self.h0),
            w_h: g.param(store, self.w_h),
            b_h: g.param(store, self.b_h),
            w_p: g.param(store, self.w_p),
            b_p: g.param(store, self.b_p),
            out,
        }
    }

    /// Initial hidden state, squashed into (0, 1) like every later state.
    pub fn initial_hidden<G: Graph>(&self, g: &mut G, b: &Bound<G::V>) -> G::V {
        g.sigmoid(&b.h0)
    }

    /// `h = σ(W_h [x, h_prev, r] + b_h)` given the concatenated input.
    pub fn rnn_step<G: Graph>(&self, g: &mut G, b: &Bound<G::V>, xhr: &G::V) -> AdResult<G::V> {
        let z = g.affine(&b.w_h, &b.b_h, xhr)?;
        Ok(g.sigmoid(&z))
    }

    /// Splits `W_P [x, h_prev, r] + b_P` into activated interface parameters.
    pub fn interface_head<G: Graph>(&self, g: &mut G, b: &Bound<G::V>, xhr: &G::V) -> AdResult<InterfaceParams<G::V>> {
        let m = self.config.read_size;
        let k = self.config.shift.len();
        let raw = g.affine(&b.w_p, &b.b_p, xhr)?;
        let add = g.slice(&raw, 0, m)?;
        let erase = g.slice(&raw, m, m)?;
        let shift = g.slice(&raw, 2 * m, k)?;
        let gamma = g.slice(&raw, 2 * m + k, 1)?;
        let add = g.tanh(&add);
        let erase = g.sigmoid(&erase);
        let shift = g.softmax(&shift)?;
        let gamma = g.softplus(&gamma);
        let gamma = g.add_scalar(&gamma, 1.0);
        Ok(InterfaceParams {
            add,
            erase,
            shift,
            gamma,
        })
    }

    /// Logits from `[x, h, r]`.
    pub fn output_head<G: Graph>(&self, g: &mut G, b: &Bound<G::V>, xhr: &G::V) -> Result<G::V, ControllerError> {
        match self.out {
            OutputParams::None => Err(ControllerError::NoOutputHead(self.name.clone())),
            OutputParams::Linear { .. } => Ok(g.affine(&b.out[0], &b.out[1], xhr)?),
            OutputParams::Mlp { .. } => {
                let z = g.affine(&b.out[0], &b.out[1], xhr)?;
                let a = g.relu(&z);
                Ok(g.affine(&b.out[2], &b.out[3], &a)?)
            }
        }
    }
}

/// Concatenates `[x, h, r]`, skipping `x` for controllers without external input.
pub fn concat_inputs<G: Graph>(g: &mut G, x: Option<&G::V>, h: &G::V, r: &G::V) -> AdResult<G::V> {
    match x {
        Some(x) => g.concat(&[x, h, r]),
        None => g.concat(&[h, r]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{sigmoid_f, Eager};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(cfg: ControllerConfig) -> (ParameterStore, Controller) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Controller::build(&mut store, "c", cfg, &mut rng).unwrap();
        for id in c.param_ids() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        (store, c)
    }

    fn input(cfg: &ControllerConfig, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::vector((0..cfg.concat_size()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_params_give_half_hidden() {
        let (store, c) = zeroed(ControllerConfig::encoder());
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let h = c.rnn_step(&mut g, &b, &input(&c.config, 1)).unwrap();
        assert_eq!(h.data(), &[0.5; 5]);
    }

    #[test]
    fn large_bias_saturates_hidden() {
        let (mut store, c) = zeroed(ControllerConfig::encoder());
        store.value_mut(store.id("c.b_h").unwrap()).data_mut().fill(40.0);
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let h = c.rnn_step(&mut g, &b, &input(&c.config, 1)).unwrap();
        assert!(h.data().iter().all(|&v| v > 1.0 - 1e-12));
    }

    #[test]
    fn rnn_step_matches_direct_arithmetic() {
        let cfg = ControllerConfig::encoder();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = Controller::build(&mut store, "c", cfg, &mut rng).unwrap();
        let b_id = store.id("c.b_h").unwrap();
        store
            .value_mut(b_id)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 0.05]);
        let x = input(&c.config, 9);
        let mut g = Eager;
        let bound = c.bind(&mut g, &store);
        let h = c.rnn_step(&mut g, &bound, &x).unwrap();
        let w = store.value(store.id("c.w_h").unwrap());
        let bias = store.value(b_id);
        for i in 0..5 {
            let mut z = bias.data()[i];
            for j in 0..x.len() {
                z += w.data()[i * x.len() + j] * x.data()[j];
            }
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((h.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_interface_activations() {
        let (store, c) = zeroed(ControllerConfig::encoder());
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let p = c.interface_head(&mut g, &b, &input(&c.config, 2)).unwrap();
        assert_eq!(p.erase.data(), &[0.5; 10]);
        assert_eq!(p.add.data(), &[0.0; 10]);
        for v in p.shift.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((p.gamma.item() - (1.0 + std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn gamma_asymptote() {
        let (mut store, c) = zeroed(ControllerConfig::encoder());
        let id = store.id("c.b_p").unwrap();
        let last = c.config.interface_size() - 1;
        store.value_mut(id).data_mut()[last] = 20.0;
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let p = c.interface_head(&mut g, &b, &input(&c.config, 2)).unwrap();
        assert!((p.gamma.item() - 21.0).abs() < 1e-8);
    }

    #[test]
    fn interface_split_matches_hand_oracle() {
        let cfg = ControllerConfig::encoder();
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = Controller::build(&mut store, "c", cfg, &mut rng).unwrap();
        let x = input(&c.config, 4);
        let w = store.value(store.id("c.w_p").unwrap()).clone();
        let raw: Vec<f64> = w
            .data()
            .chunks(x.len())
            .map(|row| row.iter().zip(x.data()).map(|(a, b)| a * b).sum())
            .collect();
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let p = c.interface_head(&mut g, &b, &x).unwrap();
        for j in 0..10 {
            assert!((p.add.data()[j] - raw[j].tanh()).abs() < 1e-15);
            assert!((p.erase.data()[j] - sigmoid_f(raw[10 + j])).abs() < 1e-15);
        }
        let ex: Vec<f64> = raw[20..23].iter().map(|v| v.exp()).collect();
        let s: f64 = ex.iter().sum();
        for (k, e) in ex.iter().enumerate() {
            assert!((p.shift.data()[k] - e / s).abs() < 1e-15);
        }
        assert!((p.gamma.item() - (1.0 + raw[23].exp().ln_1p())).abs() < 1e-15);
    }

    #[test]
    fn output_head_zero_params() {
        for spec in [OutputSpec::Linear { out: 8 }, OutputSpec::Mlp { hidden: 10, out: 1 }] {
            let cfg = ControllerConfig {
                output: spec.clone(),
                ..ControllerConfig::encoder()
            };
            let (store, c) = zeroed(cfg);
            let mut g = Eager;
            let b = c.bind(&mut g, &store);
            let y = c.output_head(&mut g, &b, &input(&c.config, 3)).unwrap();
            assert_eq!(y.len(), spec.width());
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mlp_head_matches_two_layer_oracle() {
        let cfg = ControllerConfig {
            output: OutputSpec::Mlp { hidden: 10, out: 1 },
            ..ControllerConfig::encoder()
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = Controller::build(&mut store, "c", cfg, &mut rng).unwrap();
        store.value_mut(store.id("c.b_out1").unwrap()).data_mut()[3] = 0.07;
        store.value_mut(store.id("c.b_out2").unwrap()).data_mut()[0] = -0.02;
        let x = input(&c.config, 6);
        let w1 = store.value(store.id("c.w_out1").unwrap());
        let b1 = store.value(store.id("c.b_out1").unwrap());
        let w2 = store.value(store.id("c.w_out2").unwrap());
        let b2 = store.value(store.id("c.b_out2").unwrap());
        let mut expect = b2.data()[0];
        for i in 0..10 {
            let mut z = b1.data()[i];
            for j in 0..x.len() {
                z += w1.data()[i * x.len() + j] * x.data()[j];
            }
            expect += w2.data()[i] * z.max(0.0);
        }
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        let y = c.output_head(&mut g, &b, &x).unwrap();
        assert!((y.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn encoder_output_head_rejected() {
        let (store, c) = zeroed(ControllerConfig::encoder());
        let mut g = Eager;
        let b = c.bind(&mut g, &store);
        assert!(matches!(
            c.output_head(&mut g, &b, &input(&c.config, 1)),
            Err(ControllerError::NoOutputHead(_))
        ));
    }

    #[test]
    fn param_count_matches_allocation() {
        for cfg in [
            ControllerConfig::encoder(),
            ControllerConfig {
                input_size: 0,
                output: OutputSpec::Linear { out: 8 },
                ..ControllerConfig::encoder()
            },
            ControllerConfig {
                shift: ShiftOffsets::symmetric(2),
                output: OutputSpec::Mlp { hidden: 10, out: 1 },
                ..ControllerConfig::encoder()
            },
        ] {
            let mut store = ParameterStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            Controller::build(&mut store, "c", cfg.clone(), &mut rng).unwrap();
            assert_eq!(store.scalar_count(), cfg.param_count());
        }
    }

    #[test]
    fn hidden_must_be_smaller_than_item() {
        let cfg = ControllerConfig {
            hidden_size: 8,
            ..ControllerConfig::encoder()
        };
        assert!(cfg.validate().is_err());
    }
}
