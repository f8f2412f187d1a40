pub mod codec;
pub mod crypto;
pub mod error;
pub mod types;
pub mod datasource;
pub mod smr;
pub mod protocol;
pub mod netsim;
pub mod analysis;
pub mod replay;
