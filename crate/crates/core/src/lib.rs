//! Deep spiking Q-network engine.
//!
//! A spiking Q-network stacks synaptic layers (convolution, dense) each
//! followed by a neuronal layer. Hidden neurons are leaky integrate-and-fire
//! (LIF); the output layer is a non-spiking leaky integrator (LI) whose
//! membrane-voltage history over `T` simulation steps is decoded into one
//! Q-value per action. Training uses surrogate-gradient backpropagation
//! through time inside a standard DQN loop, and [`attack`] measures how the
//! trained policy degrades under iterative FGSM perturbations.
//!
//! Module map:
//! - [`neuron`]: LIF/LI discrete dynamics
//! - [`network`]: layer stack, `T`-step forward with trace recording, decoders
//! - [`grad`]: arctangent surrogate, explicit BPTT recursion, tape oracle,
//!   relaxed finite-difference checker
//! - [`qlearn`]: replay, TD targets, loss gradient, Adam, training loop
//! - [`envs`]: Catch and GridWorld, preprocessing, evaluation protocol
//! - [`attack`]: FGSM perturbation, iterative attack, decay-rate report
//! - [`runtime`]: config, checkpoints, metrics sinks, seeding

pub mod attack;
pub mod envs;
pub mod error;
pub mod grad;
pub mod network;
pub mod neuron;
pub mod qlearn;
pub mod real;
pub mod runtime;

pub use error::{Error, Result};
pub use real::Real;
