//! Variable spiking neurons.
//!
//! Each neuron integrates its direct-encoded input into a leaky membrane,
//! fires when the membrane reaches its threshold, resets to zero on firing,
//! and emits `act(z * spike)`: the analog input passes through on a spike
//! and nothing is sent otherwise (`act(0) = 0`). Threshold and leakage are
//! per-feature trainable vectors; leakage is stored unconstrained and
//! squashed through a sigmoid. Spikes are differentiated with a
//! fast-sigmoid surrogate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default fast-sigmoid slope.
pub const DEFAULT_SURROGATE_SLOPE: f64 = 25.0;
/// Initial threshold per feature.
pub const DEFAULT_THETA: f64 = 0.1;
/// Initial (squashed) leakage per feature.
pub const DEFAULT_BETA: f64 = 0.5;

/// Fast-sigmoid pseudo-derivative `1 / (1 + slope |x|)^2`.
pub fn surrogate_grad(membrane_minus_theta: f64, slope: f64) -> f64 {
    let d = 1.0 + slope * membrane_minus_theta.abs();
    1.0 / (d * d)
}

/// Backward rule for the spike nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surrogate {
    FastSigmoid { slope: f64 },
    /// The almost-everywhere derivative of the step: zero. Used to check the
    /// non-spike gradient paths against finite differences.
    Exact,
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::FastSigmoid {
            slope: DEFAULT_SURROGATE_SLOPE,
        }
    }
}

impl Surrogate {
    pub fn grad(&self, membrane_minus_theta: f64) -> f64 {
        match *self {
            Surrogate::FastSigmoid { slope } => surrogate_grad(membrane_minus_theta, slope),
            Surrogate::Exact => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => crate::autodiff::gelu_scalar(x),
            Activation::Identity => x,
        }
    }
}

/// Maps a squashed leakage in (0, 1) to its stored unconstrained value.
pub fn beta_to_raw(beta: f64) -> f64 {
    (beta / (1.0 - beta)).ln()
}

/// Parameter values of one spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct VsnLayer {
    pub theta: Vec<f64>,
    /// Unconstrained leakage; applied as `sigmoid(beta_raw)`.
    pub beta_raw: Vec<f64>,
    pub activation: Activation,
    pub surrogate: Surrogate,
}

impl VsnLayer {
    pub fn new(feature_dim: usize, activation: Activation) -> Self {
        VsnLayer {
            theta: vec![DEFAULT_THETA; feature_dim],
            beta_raw: vec![beta_to_raw(DEFAULT_BETA); feature_dim],
            activation,
            surrogate: Surrogate::default(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        self.beta_raw.iter().map(|&b| crate::autodiff::sigmoid_scalar(b)).collect()
    }

    /// Registers threshold and leakage as trainable leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundVsn> {
        let d = self.feature_dim();
        let theta = tape.param(Tensor::new(vec![1, d], self.theta.clone())?)?;
        let beta_raw = tape.param(Tensor::new(vec![1, d], self.beta_raw.clone())?)?;
        BoundVsn::new(tape, theta, beta_raw, self.activation, self.surrogate)
    }
}

/// A spiking layer whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundVsn {
    pub theta: Var,
    pub beta_raw: Var,
    /// `sigmoid(beta_raw)`
    pub beta: Var,
    pub feature_dim: usize,
    pub activation: Activation,
    pub surrogate: Surrogate,
}

impl BoundVsn {
    pub fn new(
        tape: &mut Tape,
        theta: Var,
        beta_raw: Var,
        activation: Activation,
        surrogate: Surrogate,
    ) -> Result<Self> {
        let (_, d) = tape.value(theta).dims2()?;
        let beta = tape.sigmoid(beta_raw)?;
        Ok(BoundVsn {
            theta,
            beta_raw,
            beta,
            feature_dim: d,
            activation,
            surrogate,
        })
    }
}

/// Membrane and counters of one layer during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct VsnState {
    /// Post-reset membrane carried into the next step; `None` is all-zero.
    membrane: Option<Var>,
    spike_count: u64,
    opportunity_count: u64,
    /// Running spike total on the tape, for the differentiable rate.
    spike_total: Option<Var>,
}

impl VsnState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn spike_count(&self) -> u64 {
        self.spike_count
    }

    pub fn opportunity_count(&self) -> u64 {
        self.opportunity_count
    }

    pub fn membrane(&self) -> Option<Var> {
        self.membrane
    }

    /// Membrane values, all-zero when nothing has been integrated yet.
    pub fn membrane_values(&self, tape: &Tape, n: usize, d: usize) -> Vec<f64> {
        match self.membrane {
            Some(m) => tape.value(m).values().to_vec(),
            None => vec![0.0; n * d],
        }
    }

    /// Differentiable spike rate `spikes / opportunities` on the tape.
    pub fn rate_var(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match self.spike_total {
            Some(total) if self.opportunity_count > 0 => {
                Ok(Some(tape.scale(total, 1.0 / self.opportunity_count as f64)?))
            }
            _ => Ok(None),
        }
    }
}

pub fn spike_rate(state: &VsnState) -> Result<f64> {
    if state.opportunity_count == 0 {
        return Err(Error::NoObservations);
    }
    Ok(state.spike_count as f64 / state.opportunity_count as f64)
}

pub fn reset_state(_state: VsnState) -> VsnState {
    VsnState::default()
}

/// One spike step: integrate `z` (n x d), fire, reset, emit.
pub fn vsn_forward(
    tape: &mut Tape,
    layer: &BoundVsn,
    z: Var,
    state: &mut VsnState,
) -> Result<Var> {
    let (n, d) = tape.value(z).dims2()?;
    if d != layer.feature_dim {
        return Err(Error::ShapeMismatch(format!(
            "VSN with {} features applied to {d} columns",
            layer.feature_dim
        )));
    }
    let membrane = match state.membrane {
        Some(prev) => {
            let beta = tape.broadcast_row(layer.beta, n)?;
            let leaked = tape.elementwise_mul(prev, beta)?;
            tape.add(leaked, z)?
        }
        None => z,
    };
    let spikes = tape.spike(membrane, layer.theta, layer.surrogate)?;
    let fired: Vec<f64> = tape.value(spikes).values().to_vec();
    let gated = tape.elementwise_mul(z, spikes)?;
    let y = layer.activation.apply(tape, gated)?;

    // reset is detached from the surrogate path
    let keep = Tensor::new(vec![n, d], fired.iter().map(|s| 1.0 - s).collect())?;
    let keep = tape.constant(keep)?;
    state.membrane = Some(tape.elementwise_mul(membrane, keep)?);

    let count = fired.iter().filter(|&&s| s > 0.0).count() as u64;
    let step_total = tape.sum_all(spikes)?;
    state.spike_total = Some(match state.spike_total {
        Some(t) => tape.add(t, step_total)?,
        None => step_total,
    });
    state.spike_count += count;
    state.opportunity_count += (n * d) as u64;
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(theta: f64, beta: f64, activation: Activation) -> VsnLayer {
        VsnLayer {
            theta: vec![theta],
            beta_raw: vec![beta_to_raw(beta)],
            activation,
            surrogate: Surrogate::default(),
        }
    }

    fn run(layer: &VsnLayer, zs: &[f64]) -> (Vec<f64>, VsnState, Tape) {
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let mut state = VsnState::new();
        let mut out = Vec::new();
        for &z in zs {
            let zv = tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap()).unwrap();
            let y = vsn_forward(&mut tape, &bound, zv, &mut state).unwrap();
            out.push(tape.value(y).values()[0]);
        }
        (out, state, tape)
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(surrogate_grad(0.0, 25.0), 1.0);
        assert!((surrogate_grad(0.04, 25.0) - 0.25).abs() < 1e-15);
        let mut last = 1.0;
        for k in 1..50 {
            let g = surrogate_grad(k as f64 * 0.1, 25.0);
            assert!(g < last);
            last = g;
        }
        assert!(last < 1e-3);
        assert_eq!(Surrogate::Exact.grad(0.0), 0.0);
    }

    #[test]
    fn zero_input_never_spikes() {
        let (out, state, _) = run(&scalar_layer(0.1, 0.5, Activation::Gelu), &[0.0; 5]);
        assert!(out.iter().all(|&y| y == 0.0));
        assert_eq!(state.spike_count(), 0);
        assert_eq!(spike_rate(&state).unwrap(), 0.0);
    }

    #[test]
    fn three_step_trace() {
        // M = 0.6, 0.9, 1.05 -> spike only at step 3
        let layer = scalar_layer(1.0, 0.5, Activation::Gelu);
        let (out, state, tape) = run(&layer, &[0.6, 0.6, 0.6]);
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], crate::autodiff::gelu_scalar(0.6));
        assert_eq!(state.membrane_values(&tape, 1, 1), vec![0.0]);
        assert_eq!(state.spike_count(), 1);
        assert!((spike_rate(&state).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_step_pass_through() {
        let (out, state, _) = run(&scalar_layer(0.5, 0.3, Activation::Identity), &[1.0]);
        assert_eq!(out, vec![1.0]);
        assert_eq!(spike_rate(&state).unwrap(), 1.0);
    }

    #[test]
    fn inclusive_threshold() {
        let (out, _, _) = run(&scalar_layer(0.75, 0.5, Activation::Identity), &[0.75]);
        assert_eq!(out, vec![0.75]);
    }

    #[test]
    fn rate_requires_observations() {
        assert!(matches!(spike_rate(&VsnState::new()), Err(Error::NoObservations)));
    }

    #[test]
    fn reset_is_idempotent_and_matches_fresh() {
        let layer = scalar_layer(0.3, 0.999, Activation::Identity);
        let (_, state, _) = run(&layer, &[0.2, 0.2]);
        assert!(state.spike_count() > 0);
        let once = reset_state(state);
        assert_eq!(once.spike_count(), 0);
        assert_eq!(once.opportunity_count(), 0);
        assert!(once.membrane().is_none());
        let twice = reset_state(once);
        assert!(twice.membrane().is_none());
        assert_eq!((twice.spike_count(), twice.opportunity_count()), (0, 0));
    }

    #[test]
    fn rejects_wrong_width() {
        let layer = VsnLayer::new(3, Activation::Gelu);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let z = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let mut st = VsnState::new();
        assert!(matches!(
            vsn_forward(&mut tape, &bound, z, &mut st),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn threshold_and_leak_receive_gradient() {
        let layer = scalar_layer(0.5, 0.5, Activation::Identity);
        let mut tape = Tape::new();
        let bound = layer.bind(&mut tape).unwrap();
        let mut state = VsnState::new();
        let mut outs = Vec::new();
        for z in [0.3, 0.3, 0.3] {
            let zv = tape.constant(Tensor::new(vec![1, 1], vec![z]).unwrap()).unwrap();
            outs.push(vsn_forward(&mut tape, &bound, zv, &mut state).unwrap());
        }
        let mean = tape.mean_over(&outs).unwrap();
        let loss = tape.sum_all(mean).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(bound.theta).unwrap()[0] != 0.0);
        assert!(g.get(bound.beta_raw).unwrap()[0] != 0.0);
    }
}
