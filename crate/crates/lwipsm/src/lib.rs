//! LWIPSM: a lightweight incentive-based privacy-preserving smart-metering
//! protocol, implemented end to end as a library plus a discrete-event
//! simulator.
//!
//! Smart meters enroll in incentive programs published by a utility
//! provider, obtain a blind signature over a hash-chain credential anchor,
//! then report coarse-grained (optionally noised) consumption values under a
//! pseudonym through an anonymous relay overlay. Accepted reports earn a
//! signed token redeemable once. The simulator drives the full protocol over
//! real or synthetic datasets and reproduces the analytical computation,
//! memory, and communication overhead models.
//!
//! Module map:
//! - [`codec`]: canonical length-prefixed binary encoding
//! - [`crypto`]: blind RSA, FDH signatures, envelopes, MACs, hash chains
//! - [`catalog`]: incentive programs and reward calculation
//! - [`meter`]: the smart-meter state machine
//! - [`provider`]: the utility provider (verification, archiving, tokens)
//! - [`overlay`]: aggregator, anonymous relay paths, delivery bloom filter
//! - [`net`]: link framing and transmission-time model
//! - [`counters`]: per-entity operation accounting
//! - [`sim`]: scenarios, datasets, the event loop, metrics, benchmarks

pub mod catalog;
pub mod codec;
pub mod counters;
pub mod crypto;
pub mod meter;
pub mod net;
pub mod overlay;
pub mod provider;
pub mod sim;
