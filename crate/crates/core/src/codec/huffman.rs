//! Canonical Huffman codes.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::bits::{BitReader, BitWriter};
use crate::error::{Error, Result};

pub const MAX_CODE_LEN: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct HuffmanCode {
    lengths: Vec<u32>,
    codes: Vec<u32>,
    // decoding tables, indexed by code length
    first_code: Vec<u64>,
    first_index: Vec<usize>,
    count: Vec<usize>,
    sorted: Vec<u32>,
}

#[derive(PartialEq)]
struct Node {
    weight: f64,
    id: usize,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight.total_cmp(&other.weight).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Optimal prefix-code lengths for positive `weights`, limited to
/// [`MAX_CODE_LEN`]. Ties merge the lower node id first, so the result
/// is deterministic.
pub fn code_lengths(weights: &[f64]) -> Vec<u32> {
    let n = weights.len();
    if n == 1 {
        return vec![1];
    }
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<Node>> = weights
        .iter()
        .enumerate()
        .map(|(id, &weight)| Reverse(Node { weight, id }))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse(a) = heap.pop().unwrap();
        let Reverse(b) = heap.pop().unwrap();
        parent[a.id] = next;
        parent[b.id] = next;
        heap.push(Reverse(Node {
            weight: a.weight + b.weight,
            id: next,
        }));
        next += 1;
    }
    let root = next - 1;
    let mut depth = vec![0u32; 2 * n - 1];
    for id in (0..root).rev() {
        depth[id] = depth[parent[id]] + 1;
    }
    let mut lengths = depth[..n].to_vec();
    limit_lengths(&mut lengths, weights);
    lengths
}

/// Rebalances an over-long code (JPEG-style length-count adjustment) and
/// hands the shortest lengths to the heaviest symbols.
fn limit_lengths(lengths: &mut [u32], weights: &[f64]) {
    let max = *lengths.iter().max().unwrap();
    if max <= MAX_CODE_LEN {
        return;
    }
    let mut bl_count = vec![0usize; max as usize + 1];
    for &l in lengths.iter() {
        bl_count[l as usize] += 1;
    }
    for i in (MAX_CODE_LEN as usize + 1..=max as usize).rev() {
        while bl_count[i] > 0 {
            let mut j = i - 2;
            while bl_count[j] == 0 {
                j -= 1;
            }
            bl_count[i] -= 2;
            bl_count[i - 1] += 1;
            bl_count[j + 1] += 2;
            bl_count[j] -= 1;
        }
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut lens = (1..=MAX_CODE_LEN as usize).flat_map(|l| std::iter::repeat_n(l as u32, bl_count[l]));
    for s in order {
        lengths[s] = lens.next().unwrap();
    }
}

impl HuffmanCode {
    pub fn from_weights(weights: &[f64]) -> Self {
        Self::from_lengths(code_lengths(weights))
    }

    /// Canonical code for the given lengths: symbols sorted by
    /// (length, index) receive consecutive code values.
    pub fn from_lengths(lengths: Vec<u32>) -> Self {
        let max = *lengths.iter().max().unwrap_or(&0) as usize;
        let mut sorted: Vec<u32> = (0..lengths.len() as u32).collect();
        sorted.sort_by_key(|&s| (lengths[s as usize], s));
        let mut count = vec![0usize; max + 1];
        for &l in &lengths {
            count[l as usize] += 1;
        }
        let mut first_code = vec![0u64; max + 1];
        let mut first_index = vec![0usize; max + 1];
        let mut code = 0u64;
        let mut index = 0;
        for l in 1..=max {
            // no symbol has length 0, so count[0] only matters when empty
            let prev = if l == 1 { 0 } else { count[l - 1] as u64 };
            code = (code + prev) << 1;
            first_code[l] = code;
            first_index[l] = index;
            index += count[l];
        }
        let mut codes = vec![0u32; lengths.len()];
        let mut next = first_code.clone();
        for &s in &sorted {
            let l = lengths[s as usize] as usize;
            codes[s as usize] = next[l] as u32;
            next[l] += 1;
        }
        Self {
            lengths,
            codes,
            first_code,
            first_index,
            count,
            sorted,
        }
    }

    pub fn lengths(&self) -> &[u32] {
        &self.lengths
    }

    pub fn code(&self, symbol: u32) -> (u32, u32) {
        (self.codes[symbol as usize], self.lengths[symbol as usize])
    }

    pub fn encode(&self, symbol: u32, w: &mut BitWriter) {
        let (code, len) = self.code(symbol);
        w.write(code as u64, len);
    }

    pub fn decode(&self, r: &mut BitReader) -> Result<u32> {
        let mut code = 0u64;
        for l in 1..self.count.len() {
            code = (code << 1) | r.read_bit()? as u64;
            let offset = code.wrapping_sub(self.first_code[l]);
            if code >= self.first_code[l] && offset < self.count[l] as u64 {
                return Ok(self.sorted[self.first_index[l] + offset as usize]);
            }
        }
        Err(Error::malformed("TLUC payload", "invalid Huffman code"))
    }

    /// Expected code length in bits under `probs`.
    pub fn mean_length(&self, probs: &[f64]) -> f64 {
        probs.iter().zip(&self.lengths).map(|(p, &l)| p * l as f64).sum()
    }
}
