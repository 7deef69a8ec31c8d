pub mod agent;
pub mod gateway;
pub mod harness;
pub mod protocol;
pub mod reasoner;
pub mod tools;

use sha2::{Digest, Sha256};

/// `sha256:<hex>` of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}
