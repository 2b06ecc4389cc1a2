//! Deterministic synthetic tasks: everything is a pure function of the
//! spec's seed, and eval examples are disjoint from training by
//! construction (pair/string/region splits, not resampling).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DloError, Result};
use crate::trainer::Sequence;

/// Self-authored filler prose for the char-lm task; deliberately repetitive
/// so a tiny model has structure to latch onto.
const CHAR_LM_TEXT: &str = include_str!("char_lm.txt");

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// One of `modular-addition`, `sequence-copy`, `char-lm`.
    pub kind: String,
    /// Modulus for modular-addition.
    pub modulus: Option<usize>,
    /// Alphabet size for sequence-copy.
    pub alphabet: Option<usize>,
    /// Copied-prefix length for sequence-copy.
    pub copy_len: Option<usize>,
    /// Window length for char-lm.
    pub seq_len: Option<usize>,
    pub n_train: usize,
    pub n_eval: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn modular_addition(modulus: usize, n_train: usize, n_eval: usize, seed: u64) -> Self {
        TaskSpec {
            kind: "modular-addition".into(),
            modulus: Some(modulus),
            alphabet: None,
            copy_len: None,
            seq_len: None,
            n_train,
            n_eval,
            seed,
        }
    }

    /// Structural checks only; size-dependent constraints (e.g. enough
    /// distinct pairs for the eval split) are enforced by [`generate`].
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(DloError::Config("split sizes must be positive".into()));
        }
        let require = |field: Option<usize>, name: &str| {
            field.map(|_| ()).ok_or_else(|| {
                DloError::Config(format!("task '{}' requires `{name}`", self.kind))
            })
        };
        match self.kind.as_str() {
            "modular-addition" => require(self.modulus, "modulus"),
            "sequence-copy" => {
                require(self.alphabet, "alphabet")?;
                require(self.copy_len, "copy_len")
            }
            "char-lm" => require(self.seq_len, "seq_len"),
            other => Err(DloError::Config(format!(
                "unknown task kind '{other}' (expected modular-addition|sequence-copy|char-lm)"
            ))),
        }
    }
}

/// Generated splits plus the vocabulary the model must cover.
pub struct TaskData {
    pub vocab: usize,
    pub seq_len: usize,
    pub train: Vec<Sequence>,
    pub eval: Vec<Sequence>,
}

pub fn generate(spec: &TaskSpec) -> Result<TaskData> {
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(DloError::Config("split sizes must be positive".into()));
    }
    match spec.kind.as_str() {
        "modular-addition" => modular_addition(spec),
        "sequence-copy" => sequence_copy(spec),
        "char-lm" => char_lm(spec),
        other => Err(DloError::Config(format!(
            "unknown task kind '{other}' (expected modular-addition|sequence-copy|char-lm)"
        ))),
    }
}

/// `[BOS, a, +, b, =, c]` with the task loss only on predicting `c`.
/// Token ids: digits `0..m`, then BOS = m, PLUS = m+1, EQ = m+2.
/// Train/eval draw from a disjoint shuffle of all m^2 (a, b) pairs;
/// training repeats pairs if n_train exceeds its share.
fn modular_addition(spec: &TaskSpec) -> Result<TaskData> {
    let m = spec
        .modulus
        .ok_or_else(|| DloError::Config("modular-addition requires `modulus`".into()))?;
    if m < 2 {
        return Err(DloError::Config(format!("modulus {m} too small")));
    }
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (0..m).map(move |b| (a, b)))
        .collect();
    if spec.n_eval >= pairs.len() {
        return Err(DloError::Config(format!(
            "n_eval {} leaves no training pairs out of {}",
            spec.n_eval,
            pairs.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    pairs.shuffle(&mut rng);
    let (eval_pairs, train_pairs) = pairs.split_at(spec.n_eval);

    let (bos, plus, eq) = (m, m + 1, m + 2);
    let build = |&(a, b): &(usize, usize)| {
        let c = (a + b) % m;
        Sequence {
            tokens: vec![bos, a, plus, b, eq, c],
            targets: vec![a, plus, b, eq, c, bos],
            loss_mask: vec![false, false, false, false, true, false],
            valid: vec![true; 6],
        }
    };
    let train: Vec<Sequence> = (0..spec.n_train)
        .map(|i| build(&train_pairs[i % train_pairs.len()]))
        .collect();
    Ok(TaskData {
        vocab: m + 3,
        seq_len: 6,
        train,
        eval: eval_pairs.iter().map(build).collect(),
    })
}

/// `[BOS, x_1..x_n, SEP, x_1..x_n]` with loss on the copied half.
/// Token ids: alphabet `0..k`, BOS = k, SEP = k+1. Train and eval strings
/// are drawn from a disjoint shuffle of distinct strings.
fn sequence_copy(spec: &TaskSpec) -> Result<TaskData> {
    let k = spec
        .alphabet
        .ok_or_else(|| DloError::Config("sequence-copy requires `alphabet`".into()))?;
    let n = spec
        .copy_len
        .ok_or_else(|| DloError::Config("sequence-copy requires `copy_len`".into()))?;
    if k < 2 || n == 0 {
        return Err(DloError::Config(format!(
            "sequence-copy needs alphabet >= 2 and copy_len >= 1, got {k}/{n}"
        )));
    }
    let total = spec.n_train + spec.n_eval;
    if (k as f64).powi(n as i32) < 2.0 * total as f64 {
        return Err(DloError::Config(format!(
            "alphabet^copy_len too small for {total} distinct strings"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut seen = std::collections::HashSet::new();
    let mut strings: Vec<Vec<usize>> = Vec::with_capacity(total);
    while strings.len() < total {
        let s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        if seen.insert(s.clone()) {
            strings.push(s);
        }
    }
    let (bos, sep) = (k, k + 1);
    let build = |s: &Vec<usize>| {
        let mut tokens = vec![bos];
        tokens.extend(s);
        tokens.push(sep);
        tokens.extend(s);
        // next-token targets; only the copied half counts
        let mut targets = tokens[1..].to_vec();
        targets.push(bos);
        let len = tokens.len();
        let mut loss_mask = vec![false; len];
        // positions SEP..end-1 predict x_1..x_n
        loss_mask[(n + 1)..(2 * n + 1)].fill(true);
        Sequence {
            tokens,
            targets,
            loss_mask,
            valid: vec![true; len],
        }
    };
    let (eval_strs, train_strs) = strings.split_at(spec.n_eval);
    Ok(TaskData {
        vocab: k + 2,
        seq_len: 2 * n + 2,
        train: train_strs.iter().map(build).collect(),
        eval: eval_strs.iter().map(build).collect(),
    })
}

/// Next-character modeling over a bundled text. The eval split samples
/// windows from the final tenth of the text; training windows come from
/// the rest, clipped so no window crosses into the eval region.
fn char_lm(spec: &TaskSpec) -> Result<TaskData> {
    let s = spec
        .seq_len
        .ok_or_else(|| DloError::Config("char-lm requires `seq_len`".into()))?;
    let mut alphabet: Vec<char> = CHAR_LM_TEXT.chars().collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    alphabet.sort_unstable();
    let index = |c: char| alphabet.binary_search(&c).unwrap();
    let text: Vec<usize> = CHAR_LM_TEXT.chars().map(index).collect();
    if s + 1 >= text.len() / 10 {
        return Err(DloError::Config(format!(
            "seq_len {s} too long for the bundled text ({} chars)",
            text.len()
        )));
    }
    let eval_start = text.len() * 9 / 10;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let window = |start: usize| {
        let tokens = text[start..start + s].to_vec();
        let targets = text[start + 1..start + s + 1].to_vec();
        Sequence {
            tokens,
            targets,
            loss_mask: vec![true; s],
            valid: vec![true; s],
        }
    };
    let train = (0..spec.n_train)
        .map(|_| window(rng.gen_range(0..eval_start - s - 1)))
        .collect();
    let eval = (0..spec.n_eval)
        .map(|_| window(rng.gen_range(eval_start..text.len() - s - 1)))
        .collect();
    Ok(TaskData {
        vocab: alphabet.len(),
        seq_len: s,
        train,
        eval,
    })
}
