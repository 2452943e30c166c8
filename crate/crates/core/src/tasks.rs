//! The five working-memory tasks: generators, reference oracle and the
//! binary fixture format.
//!
//! Items are 8-bit words stored one per byte; bit `j` of an item is
//! `(byte >> j) & 1`.

use crate::controller::ITEM_BITS;
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Serial,
    Reverse,
    Odd,
    Comparison,
    Equality,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Serial, Task::Reverse, Task::Odd, Task::Comparison, Task::Equality];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Task> {
        Task::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Serial => "serial",
            Task::Reverse => "reverse",
            Task::Odd => "odd",
            Task::Comparison => "comparison",
            Task::Equality => "equality",
        }
    }

    pub fn has_aux(self) -> bool {
        matches!(self, Task::Comparison | Task::Equality)
    }

    /// Bits per target step.
    pub fn target_width(self) -> usize {
        if self.has_aux() {
            1
        } else {
            ITEM_BITS
        }
    }

    /// Number of solver steps for a main sequence of length `len`.
    pub fn target_len(self, len: usize) -> usize {
        match self {
            Task::Odd => len.div_ceil(2),
            _ => len,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown task `{0}` (expected serial, reverse, odd, comparison or equality)")]
    UnknownTask(String),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("fixture: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a comparison position or an equality pair is "equal".
    pub positive_rate: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 20,
            positive_rate: 0.5,
        }
    }
}

impl GenConfig {
    pub fn fixed(len: usize) -> Self {
        Self {
            min_len: len,
            max_len: len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(TaskError::Config(format!(
                "length range [{}, {}] must satisfy 1 <= min <= max",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > u16::MAX as usize {
            return Err(TaskError::Config("max length exceeds 65535".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(TaskError::Config("positive rate outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn sample_len<R: Rng>(&self, rng: &mut R) -> usize {
        rng.gen_range(self.min_len..=self.max_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSample {
    pub task: Task,
    pub main: Vec<u8>,
    pub aux: Option<Vec<u8>>,
    /// One byte per target step; width-1 targets use the low bit.
    pub target: Vec<u8>,
    /// Per target step, 1 where the loss applies.
    pub mask: Vec<u8>,
}

/// The 8 bits of `item` as 0/1 reals, least significant first.
pub fn item_bits(item: u8) -> Vec<f64> {
    (0..ITEM_BITS).map(|j| ((item >> j) & 1) as f64).collect()
}

/// Inverse of [`item_bits`] for exact 0/1 vectors.
pub fn bits_to_item(bits: &[f64]) -> Option<u8> {
    if bits.len() != ITEM_BITS {
        return None;
    }
    let mut b = 0u8;
    for (j, &v) in bits.iter().enumerate() {
        if v == 1.0 {
            b |= 1 << j;
        } else if v != 0.0 {
            return None;
        }
    }
    Some(b)
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn main_bits(&self) -> Vec<Vec<f64>> {
        self.main.iter().map(|&b| item_bits(b)).collect()
    }

    pub fn aux_bits(&self) -> Option<Vec<Vec<f64>>> {
        self.aux.as_ref().map(|a| a.iter().map(|&b| item_bits(b)).collect())
    }

    /// Target bits of step `t` as a tensor of the task's width.
    pub fn target_tensor(&self, t: usize) -> Tensor {
        let byte = self.target[t];
        let w = self.task.target_width();
        Tensor::vector((0..w).map(|j| ((byte >> j) & 1) as f64).collect())
    }

    /// Mask of step `t` broadcast to the task's width.
    pub fn mask_tensor(&self, t: usize) -> Tensor {
        let w = self.task.target_width();
        Tensor::vector(vec![self.mask[t] as f64; w])
    }

    /// Number of masked target bits.
    pub fn masked_bits(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count() * self.task.target_width()
    }

    /// Checks the per-task structural invariants and the oracle.
    pub fn check(&self) -> Result<(), TaskError> {
        let bad = |m: &str| Err(TaskError::Format(format!("{} sample: {m}", self.task)));
        let l = self.main.len();
        if l == 0 {
            return bad("empty main sequence");
        }
        if self.task.has_aux() != self.aux.is_some() {
            return bad("aux presence does not match task");
        }
        if let Some(a) = &self.aux {
            if a.len() != l {
                return bad("aux length differs from main");
            }
        }
        if self.target.len() != self.task.target_len(l) || self.mask.len() != self.target.len() {
            return bad("target/mask length");
        }
        if self.mask.iter().any(|&m| m > 1) {
            return bad("mask not 0/1");
        }
        let (target, mask) = oracle(self.task, &self.main, self.aux.as_deref());
        if target != self.target || mask != self.mask {
            return bad("target disagrees with oracle");
        }
        Ok(())
    }
}

/// Reference definition of every task's target and mask.
pub fn oracle(task: Task, main: &[u8], aux: Option<&[u8]>) -> (Vec<u8>, Vec<u8>) {
    let l = main.len();
    match task {
        Task::Serial => (main.to_vec(), vec![1; l]),
        Task::Reverse => (main.iter().rev().copied().collect(), vec![1; l]),
        Task::Odd => {
            let t: Vec<u8> = main.iter().step_by(2).copied().collect();
            let n = t.len();
            (t, vec![1; n])
        }
        Task::Comparison => {
            let aux = aux.expect("comparison requires aux");
            let t = main.iter().zip(aux).map(|(a, b)| u8::from(a == b)).collect();
            (t, vec![1; l])
        }
        Task::Equality => {
            let aux = aux.expect("equality requires aux");
            let mut t = vec![0; l];
            let mut m = vec![0; l];
            t[l - 1] = u8::from(main == aux);
            m[l - 1] = 1;
            (t, m)
        }
    }
}

/// A random byte different from `b`.
fn corrupt<R: Rng>(b: u8, rng: &mut R) -> u8 {
    b ^ rng.gen_range(1..=255u8)
}

fn random_items<R: Rng>(len: usize, rng: &mut R) -> Vec<u8> {
    (0..len).map(|_| rng.gen()).collect()
}

/// Generates one sample of `task` with main length `len`.
pub fn generate_with_len<R: Rng>(task: Task, len: usize, cfg: &GenConfig, rng: &mut R) -> TaskSample {
    assert!(len >= 1, "sequence length must be positive");
    let main = random_items(len, rng);
    let aux = match task {
        Task::Comparison => Some(
            main.iter()
                .map(|&b| {
                    if rng.gen_bool(cfg.positive_rate) {
                        b
                    } else {
                        corrupt(b, rng)
                    }
                })
                .collect::<Vec<u8>>(),
        ),
        Task::Equality => {
            let mut aux = main.clone();
            if !rng.gen_bool(cfg.positive_rate) {
                // Uniform over non-empty position subsets.
                let positions = loop {
                    let p: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
                    if p.iter().any(|&x| x) {
                        break p;
                    }
                };
                for (a, hit) in aux.iter_mut().zip(positions) {
                    if hit {
                        *a = corrupt(*a, rng);
                    }
                }
            }
            Some(aux)
        }
        _ => None,
    };
    let (target, mask) = oracle(task, &main, aux.as_deref());
    TaskSample {
        task,
        main,
        aux,
        target,
        mask,
    }
}

/// Draws a length from `cfg` and generates one sample.
pub fn generate<R: Rng>(task: Task, cfg: &GenConfig, rng: &mut R) -> TaskSample {
    let len = cfg.sample_len(rng);
    generate_with_len(task, len, cfg, rng)
}

pub fn gen_serial<R: Rng>(cfg: &GenConfig, rng: &mut R) -> TaskSample {
    generate(Task::Serial, cfg, rng)
}

pub fn gen_reverse<R: Rng>(cfg: &GenConfig, rng: &mut R) -> TaskSample {
    generate(Task::Reverse, cfg, rng)
}

pub fn gen_odd<R: Rng>(cfg: &GenConfig, rng: &mut R) -> TaskSample {
    generate(Task::Odd, cfg, rng)
}

pub fn gen_comparison<R: Rng>(cfg: &GenConfig, rng: &mut R) -> TaskSample {
    generate(Task::Comparison, cfg, rng)
}

pub fn gen_equality<R: Rng>(cfg: &GenConfig, rng: &mut R) -> TaskSample {
    generate(Task::Equality, cfg, rng)
}

// ---------------------------------------------------------------------------
// Fixture files.

pub const FIXTURE_MAGIC: &[u8; 4] = b"MAES";
pub const FIXTURE_VERSION: u16 = 1;

/// Writes the header and every sample; all samples must share `task`.
pub fn write_fixtures<W: Write>(mut out: W, task: Task, samples: &[TaskSample]) -> Result<(), TaskError> {
    out.write_all(FIXTURE_MAGIC)?;
    out.write_all(&FIXTURE_VERSION.to_le_bytes())?;
    out.write_all(&[task.id()])?;
    for s in samples {
        if s.task != task {
            return Err(TaskError::Format(format!(
                "sample of task {} in {task} fixture",
                s.task
            )));
        }
        let len = u16::try_from(s.main.len()).map_err(|_| TaskError::Format("sequence longer than 65535".into()))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(&s.main)?;
        match &s.aux {
            Some(a) => {
                out.write_all(&[1])?;
                out.write_all(a)?;
            }
            None => out.write_all(&[0])?,
        }
        let tlen = u16::try_from(s.target.len()).map_err(|_| TaskError::Format("target longer than 65535".into()))?;
        out.write_all(&tlen.to_le_bytes())?;
        out.write_all(&s.target)?;
        out.write_all(&s.mask)?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), TaskError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TaskError::Format(format!("truncated while reading {what}")),
        _ => TaskError::Io(e),
    })
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> Result<u16, TaskError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

/// Reads a fixture stream, validating every record against the oracle.
pub fn read_fixtures<R: Read>(mut input: R) -> Result<(Task, Vec<TaskSample>), TaskError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, "magic")?;
    if &magic != FIXTURE_MAGIC {
        return Err(TaskError::Format("bad magic".into()));
    }
    let version = read_u16(&mut input, "version")?;
    if version != FIXTURE_VERSION {
        return Err(TaskError::Format(format!("unsupported version {version}")));
    }
    let mut id = [0u8; 1];
    read_exact_or(&mut input, &mut id, "task id")?;
    let task = Task::from_id(id[0]).ok_or_else(|| TaskError::Format(format!("unknown task id {}", id[0])))?;

    let mut samples = Vec::new();
    loop {
        let mut first = [0u8; 1];
        if input.read(&mut first)? == 0 {
            break;
        }
        let mut second = [0u8; 1];
        read_exact_or(&mut input, &mut second, "record length")?;
        let len = u16::from_le_bytes([first[0], second[0]]) as usize;
        let mut main = vec![0u8; len];
        read_exact_or(&mut input, &mut main, "main sequence")?;
        let mut flag = [0u8; 1];
        read_exact_or(&mut input, &mut flag, "aux flag")?;
        let aux = match flag[0] {
            0 => None,
            1 => {
                let mut a = vec![0u8; len];
                read_exact_or(&mut input, &mut a, "aux sequence")?;
                Some(a)
            }
            f => return Err(TaskError::Format(format!("bad aux flag {f}"))),
        };
        let tlen = read_u16(&mut input, "target length")? as usize;
        let mut target = vec![0u8; tlen];
        read_exact_or(&mut input, &mut target, "target")?;
        let mut mask = vec![0u8; tlen];
        read_exact_or(&mut input, &mut mask, "mask")?;
        let s = TaskSample {
            task,
            main,
            aux,
            target,
            mask,
        };
        s.check()?;
        samples.push(s);
    }
    Ok((task, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: u8 = 0x11;
    const B: u8 = 0x22;
    const C: u8 = 0x33;
    const D: u8 = 0x44;
    const E: u8 = 0x55;

    #[test]
    fn recall_oracles() {
        assert_eq!(oracle(Task::Serial, &[A, B, C], None).0, vec![A, B, C]);
        assert_eq!(oracle(Task::Reverse, &[A, B, C], None).0, vec![C, B, A]);
        assert_eq!(oracle(Task::Odd, &[A, B, C, D, E], None).0, vec![A, C, E]);
        assert_eq!(oracle(Task::Odd, &[A], None).0, vec![A]);
        assert_eq!(oracle(Task::Reverse, &[A], None).0, vec![A]);
    }

    #[test]
    fn odd_length_arithmetic() {
        for k in 1..10 {
            assert_eq!(Task::Odd.target_len(2 * k), k);
            assert_eq!(Task::Odd.target_len(2 * k + 1), k + 1);
        }
    }

    #[test]
    fn comparison_and_equality_oracles() {
        let m = [A, B, C];
        assert_eq!(oracle(Task::Comparison, &m, Some(&m)).0, vec![1, 1, 1]);
        assert_eq!(oracle(Task::Comparison, &m, Some(&[B, C, A])).0, vec![0, 0, 0]);
        let (t, mask) = oracle(Task::Equality, &m, Some(&m));
        assert_eq!((t[2], mask), (1, vec![0, 0, 1]));
        let (t, _) = oracle(Task::Equality, &m, Some(&[A, B, D]));
        assert_eq!(t[2], 0);
    }

    #[test]
    fn generated_samples_respect_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = GenConfig::default();
        for task in Task::ALL {
            for _ in 0..200 {
                let s = generate(task, &cfg, &mut rng);
                s.check().unwrap();
                assert!((3..=20).contains(&s.len()));
            }
        }
    }

    #[test]
    fn item_bit_round_trip() {
        for b in 0..=255u8 {
            assert_eq!(bits_to_item(&item_bits(b)), Some(b));
        }
        assert_eq!(bits_to_item(&[0.5; 8]), None);
    }

    #[test]
    fn invalid_length_range() {
        let cfg = GenConfig {
            min_len: 5,
            max_len: 4,
            ..GenConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(GenConfig {
            min_len: 0,
            ..GenConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn fixtures_reject_truncation_and_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<_> = (0..3)
            .map(|_| generate(Task::Comparison, &GenConfig::default(), &mut rng))
            .collect();
        let mut buf = Vec::new();
        write_fixtures(&mut buf, Task::Comparison, &samples).unwrap();
        let (task, back) = read_fixtures(&buf[..]).unwrap();
        assert_eq!(task, Task::Comparison);
        assert_eq!(back, samples);
        assert!(read_fixtures(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_fixtures(&bad[..]).is_err());
    }

    #[test]
    fn fixture_header_layout() {
        let s = TaskSample {
            task: Task::Equality,
            main: vec![A, B],
            aux: Some(vec![A, B]),
            target: vec![0, 1],
            mask: vec![0, 1],
        };
        let mut buf = Vec::new();
        write_fixtures(&mut buf, Task::Equality, &[s]).unwrap();
        assert_eq!(
            buf,
            vec![
                b'M', b'A', b'E', b'S', 1, 0, 4, // header
                2, 0, A, B, 1, A, B, // main + aux
                2, 0, 0, 1, 0, 1, // target + mask
            ]
        );
    }
}
