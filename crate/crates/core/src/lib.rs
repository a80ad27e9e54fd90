//! f-divergence reinforcement learning.
//!
//! The learning policy is trained to minimize a χ²-type f-divergence to a
//! sampling policy. Writing the divergence through its Fenchel conjugate turns
//! the problem into a saddle point between the policy and a Q function; the
//! two gradients of that saddle are the policy-improvement and
//! policy-evaluation steps of an actor-critic.
//!
//! Modules, bottom-up:
//!
//! - [`convex`]: convex generators, conjugates, divergences and witnesses.
//! - [`mdp`]: exact tabular MDP solvers and trajectory enumeration.
//! - [`envs`]: small discrete environments with branch stepping.
//! - [`nn`]: a shared-trunk MLP with manual backprop and RMSProp.
//! - [`frl`]: the saddle objective, its gradients and the trainer.
//! - [`a2c`]: a synchronous advantage actor-critic baseline.
//! - [`diagnostics`]: overestimation metric and gradient/identity checkers.
//! - [`config`]: experiment configuration.
//! - [`cli`]: the command-line driver behind the `frl` binary.

pub mod a2c;
pub mod cli;
pub mod config;
pub mod convex;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod frl;
pub mod mdp;
pub mod nn;
pub mod policy;

pub use error::{Error, Result};
