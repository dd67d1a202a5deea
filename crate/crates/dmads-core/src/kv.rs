//! Flat `key=value` text parsing shared by the model config (checkpoint
//! digests) and the CLI run config, plus the FNV-1a hash both use.

/// Parse section-less `key=value` lines. Blank lines and `#` comments are
/// skipped; keys and values are trimmed. Returns `(key, value)` pairs in file
/// order; duplicate keys are reported as errors.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value, got '{line}'", lineno + 1));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(format!("line {}: empty key", lineno + 1));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(format!("line {}: duplicate key '{key}'", lineno + 1));
        }
        out.push((key, value));
    }
    Ok(out)
}

/// FNV-1a 64-bit hash. Used for the checkpoint body checksum and the config
/// digest; any single-byte substitution or truncation changes the result.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
