//! Control plane and data-plane model for deterministic networking across a
//! fixed switched network joined to a 5G segment.
//!
//! The central network manager ([`admission`]) routes each flow over one of
//! the VLAN spanning trees ([`topology`]), picks a strict-priority class and
//! proves the end-to-end deadline with the per-hop bounds from [`calculus`].
//! The 5G system is folded in as a transit node with a slot-level delay
//! contract ([`transit5g`]); the network-side translator ([`nwtt`]) tags,
//! routes and optionally de-jitters its egress traffic. [`sim`] replays
//! everything packet by packet and checks each bound.

pub mod admission;
pub mod calculus;
pub mod cli;
pub mod nwtt;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod transit5g;
pub mod units;
