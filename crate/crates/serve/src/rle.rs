//! Run-length code for binary slices: alternating run lengths, row-major,
//! always starting with a (possibly empty) run of zeros.

pub fn encode(mask: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for &v in mask {
        let v = u8::from(v != 0);
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

/// Fails when the runs do not add up to `expected` values.
pub fn decode(runs: &[u32], expected: usize) -> Result<Vec<u8>, String> {
    let total: u64 = runs.iter().map(|r| u64::from(*r)).sum();
    if total != expected as u64 {
        return Err(format!("runs cover {total} values, expected {expected}"));
    }
    let mut out = Vec::with_capacity(expected);
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
    }
    Ok(out)
}
