//! Binary genomes and choice keys.
//!
//! A choice key selects one branch per choice block. Each branch index is
//! written as two bits, most significant bit first, so `[1, 0]` is branch 2.
//! A supernet with `B` choice blocks therefore has `2B`-bit genomes and
//! `4^B` distinct sub-models.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits used to encode one branch index.
pub const BITS_PER_CHOICE: usize = 2;

/// Candidate operation inside a choice block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Branch {
    Identity = 0,
    Residual = 1,
    InvertedResidual = 2,
    DepthwiseSeparable = 3,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::Identity,
        Branch::Residual,
        Branch::InvertedResidual,
        Branch::DepthwiseSeparable,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::Identity => "identity",
            Branch::Residual => "residual",
            Branch::InvertedResidual => "inverted_residual",
            Branch::DepthwiseSeparable => "depthwise_separable",
        }
    }
}

impl TryFrom<u8> for Branch {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        Branch::ALL
            .get(value as usize)
            .copied()
            .ok_or_else(|| Error::Encoding(format!("branch index {value} is not in 0..4")))
    }
}

impl From<Branch> for u8 {
    fn from(b: Branch) -> u8 {
        b.index()
    }
}

/// Binary string of `2 × block_count` bits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Genome(Vec<u8>);

impl Genome {
    /// Wraps a bit vector. Every element must be 0 or 1.
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some((i, b)) = bits.iter().enumerate().find(|(_, &b)| b > 1) {
            return Err(Error::Encoding(format!("bit {i} has non-binary value {b}")));
        }
        Ok(Genome(bits))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Genome {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Encoding(format!(
                    "invalid genome character {other:?}"
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Genome::from_bits(bits)
    }
}

/// One branch per choice block.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoiceKey(Vec<Branch>);

impl ChoiceKey {
    pub fn new(branches: Vec<Branch>) -> Self {
        ChoiceKey(branches)
    }

    pub fn from_indices(indices: &[u8]) -> Result<Self> {
        indices
            .iter()
            .map(|&i| Branch::try_from(i))
            .collect::<Result<Vec<_>>>()
            .map(ChoiceKey)
    }

    /// Same branch in every block.
    pub fn uniform(block_count: usize, branch: Branch) -> Self {
        ChoiceKey(vec![branch; block_count])
    }

    pub fn branches(&self) -> &[Branch] {
        &self.0
    }

    pub fn indices(&self) -> Vec<u8> {
        self.0.iter().map(|b| b.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, block: usize) -> Option<Branch> {
        self.0.get(block).copied()
    }

    pub fn with_branch(&self, block: usize, branch: Branch) -> Self {
        let mut out = self.clone();
        out.0[block] = branch;
        out
    }
}

impl fmt::Display for ChoiceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", b.index())?;
        }
        Ok(())
    }
}

impl FromStr for ChoiceKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let indices = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Encoding(format!("invalid branch index {t:?}")))
            })
            .collect::<Result<Vec<u8>>>()?;
        ChoiceKey::from_indices(&indices)
    }
}

pub fn decode(genome: &Genome) -> Result<ChoiceKey> {
    let bits = genome.bits();
    if bits.len() % BITS_PER_CHOICE != 0 {
        return Err(Error::Encoding(format!(
            "genome length {} is not a multiple of {BITS_PER_CHOICE}",
            bits.len()
        )));
    }
    bits.chunks_exact(BITS_PER_CHOICE)
        .map(|pair| Branch::try_from(2 * pair[0] + pair[1]))
        .collect::<Result<Vec<_>>>()
        .map(ChoiceKey)
}

/// Like [`decode`], but also checks the genome against the supernet's block count.
pub fn decode_for(genome: &Genome, block_count: usize) -> Result<ChoiceKey> {
    if genome.len() != BITS_PER_CHOICE * block_count {
        return Err(Error::Encoding(format!(
            "genome has {} bits, expected {} for {block_count} blocks",
            genome.len(),
            BITS_PER_CHOICE * block_count
        )));
    }
    decode(genome)
}

pub fn encode(key: &ChoiceKey) -> Genome {
    let mut bits = Vec::with_capacity(key.len() * BITS_PER_CHOICE);
    for b in key.branches() {
        let i = b.index();
        bits.push(i >> 1);
        bits.push(i & 1);
    }
    Genome(bits)
}

/// Uniform key over all four branches.
pub fn random_key<R: Rng + ?Sized>(block_count: usize, rng: &mut R) -> ChoiceKey {
    random_key_from(block_count, &Branch::ALL, rng)
}

/// Uniform key over a restricted branch set. `allowed` must be non-empty.
pub fn random_key_from<R: Rng + ?Sized>(
    block_count: usize,
    allowed: &[Branch],
    rng: &mut R,
) -> ChoiceKey {
    assert!(!allowed.is_empty(), "empty branch set");
    ChoiceKey(
        (0..block_count)
            .map(|_| allowed[rng.random_range(0..allowed.len())])
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    const FIG5_BITS: [u8; 24] = [
        0, 1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0,
    ];
    const FIG5_KEY: [u8; 12] = [1, 0, 2, 2, 1, 3, 2, 1, 3, 0, 3, 0];

    #[test]
    fn decodes_reference_genome() {
        let g = Genome::from_bits(FIG5_BITS.to_vec()).unwrap();
        assert_eq!(decode(&g).unwrap().indices(), FIG5_KEY);
        let k = ChoiceKey::from_indices(&FIG5_KEY).unwrap();
        assert_eq!(encode(&k).bits(), FIG5_BITS);
    }

    #[test]
    fn saturation_cases() {
        let zeros = Genome::from_bits(vec![0; 24]).unwrap();
        assert_eq!(
            decode(&zeros).unwrap(),
            ChoiceKey::uniform(12, Branch::Identity)
        );
        let ones = Genome::from_bits(vec![1; 24]).unwrap();
        assert_eq!(
            decode(&ones).unwrap(),
            ChoiceKey::uniform(12, Branch::DepthwiseSeparable)
        );
        assert_eq!(
            encode(&ChoiceKey::uniform(12, Branch::Identity)).bits(),
            [0; 24]
        );
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(
            decode(&Genome::from_bits(vec![0, 1, 1]).unwrap()),
            Err(Error::Encoding(_))
        ));
        assert!(matches!(
            Genome::from_bits(vec![0, 2]),
            Err(Error::Encoding(_))
        ));
        assert!(matches!(
            ChoiceKey::from_indices(&[0, 4]),
            Err(Error::Encoding(_))
        ));
        assert!(decode_for(&Genome::from_bits(vec![0; 8]).unwrap(), 12).is_err());
    }

    #[test]
    fn two_block_space_is_a_bijection() {
        let mut keys = std::collections::BTreeSet::new();
        for a in 0..4u8 {
            for b in 0..4u8 {
                let k = ChoiceKey::from_indices(&[a, b]).unwrap();
                let g = encode(&k);
                assert_eq!(decode(&g).unwrap(), k);
                keys.insert(g.to_string());
            }
        }
        assert_eq!(keys.len(), 16);
    }

    #[test]
    fn text_forms_round_trip() {
        let k = ChoiceKey::from_indices(&FIG5_KEY).unwrap();
        assert_eq!(k.to_string(), "1,0,2,2,1,3,2,1,3,0,3,0");
        assert_eq!(k.to_string().parse::<ChoiceKey>().unwrap(), k);
        let g = encode(&k);
        assert_eq!(g.to_string(), "010010100111100111001100");
        assert_eq!(g.to_string().parse::<Genome>().unwrap(), g);
    }

    #[test]
    fn random_key_is_seeded() {
        let a = random_key(12, &mut stream(3, Stream::KeySampling, &[]));
        let b = random_key(12, &mut stream(3, Stream::KeySampling, &[]));
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn random_key_branch_frequencies_are_uniform() {
        let mut rng = stream(11, Stream::KeySampling, &[]);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[random_key(1, &mut rng).branches()[0].index() as usize] += 1;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.001
        assert!(chi2 < 16.27, "chi2 = {chi2}");
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn random_genomes_round_trip() {
        let mut rng = stream(5, Stream::Variation, &[]);
        for _ in 0..1000 {
            let bits: Vec<u8> = (0..24).map(|_| rng.random_range(0..2)).collect();
            let g = Genome::from_bits(bits).unwrap();
            assert_eq!(encode(&decode(&g).unwrap()), g);
        }
    }

    proptest! {
        #[test]
        fn key_round_trip(indices in proptest::collection::vec(0u8..4, 1..20)) {
            let k = ChoiceKey::from_indices(&indices).unwrap();
            prop_assert_eq!(decode(&encode(&k)).unwrap(), k);
        }
    }
}
