//! Discrete-event simulator of an RDMA cluster: NIC state caching and
//! processing units, a verbs transport, a coroutine dataplane with RPC and
//! one-sided reads, a distributed hash table, optimistic transactions, and
//! the workload drivers and reporting used to study them.

pub mod dataplane;
pub mod harness;
pub mod kvstore;
pub mod nic;
pub mod oracle;
pub mod sim;
pub mod txengine;
pub mod verbs;
pub mod workloads;
