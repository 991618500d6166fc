//! Discrete-event model of a network node: PCI device, e1000-style NIC,
//! cache hierarchy with DCA, kernel and poll-mode stacks, and a load generator.

pub mod config;
pub mod experiment;
pub mod frame;
pub mod loadgen;
pub mod memory;
pub mod nic;
pub mod pci;
pub mod sim;
pub mod stack;
