//! Shared helpers for the fuzz targets.

use sha2::{Digest, Sha256};

/// `body` followed by its SHA-256, so container decoders get past the
/// checksum and exercise the field parser.
pub fn sealed(body: &[u8]) -> Vec<u8> {
    let mut out = body.to_vec();
    out.extend_from_slice(&Sha256::digest(body));
    out
}
