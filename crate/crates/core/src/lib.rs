//! Core library for the DAVID edge-AI smart-toy platform.
//!
//! The platform is a battery-powered hub surrounded by low-power sensor and
//! actuator nodes. This crate provides the pieces needed to model it end to
//! end in software:
//!
//! - [`tensor`], [`graph`], [`exec`]: a small quantization-aware inference
//!   core over explicit layer graphs, with a windowed execution mode that
//!   makes chunked (streaming) inference bit-exact with offline inference.
//! - [`analyzer`]: static analysis of receptive field, lookahead, per-second
//!   compute, and power against a deployment budget, plus the float-to-int8
//!   porting pipeline.
//! - [`dsp`], [`wav`]: log-mel front end, feature normalization, mu-law
//!   companding, and WAV I/O.
//! - [`ctc`], [`asr`]: CTC decoding/scoring and the multi-scale streaming
//!   speech recognizer.
//! - [`tts`]: the duration-regulated text-to-speech pipeline with a
//!   sliding-window neural vocoder.
//! - [`bus`]: the framed node-to-hub wire protocol, taint-checked egress
//!   guard, and the simulated-strength secure streaming channel.
//! - [`sim`]: a discrete-event simulator for the whole platform with an
//!   exact integer-time energy ledger.

pub mod analyzer;
pub mod asr;
// pub mod bus;
pub mod ctc;
pub mod dsp;
pub mod exec;
pub mod graph;
pub mod rng;
// pub mod sim;
pub mod tensor;
pub mod tts;
pub mod wav;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
