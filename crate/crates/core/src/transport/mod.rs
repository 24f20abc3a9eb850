//! Message transport between the server and the clients, with byte
//! accounting, and the analytical per-round cost model.

pub mod cost;
pub mod link;
pub mod wire;

pub use cost::{cost_csv, cost_sweep, predict_cost, CostModel, CostPrediction};
pub use link::{
    ByteCounter, CountingLink, DirectionBytes, Endpoint, Link, LocalLink, SocketLink, ThreadedLink,
    Traffic,
};
pub use wire::{decode, encode, Control, ControlKind, WireMessage};
