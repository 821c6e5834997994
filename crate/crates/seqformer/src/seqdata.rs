//! Binary sequence tasks, SOS/EOS framing, padding and the teacher-forcing
//! shift that turns framed targets into (input, expected-output) pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{causal_mask, key_padding_mask, CausalMask, KeyPaddingMask, TokenId};

/// Token ids of the fixed vocabulary. PAD sits one past the regular tokens,
/// so models without padding use ids 0..NUM_TOKENS only.
pub mod vocab {
    use super::TokenId;

    pub const ZERO: TokenId = 0;
    pub const ONE: TokenId = 1;
    pub const SOS: TokenId = 2;
    pub const EOS: TokenId = 3;
    pub const PAD: TokenId = 4;

    /// Vocabulary size without the padding token.
    pub const NUM_TOKENS: usize = 4;
}

/// Dense [seq_len × batch] matrix of token ids, sequence-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    seq_len: usize,
    batch: usize,
    ids: Vec<TokenId>,
}

impl TokenMatrix {
    /// Builds the matrix from per-sample sequences (one column each).
    /// All columns must share one length.
    pub fn from_columns(columns: &[Vec<TokenId>]) -> Result<Self> {
        let batch = columns.len();
        if batch == 0 {
            return Err(Error::contract("TokenMatrix::from_columns", "at least one column", "0"));
        }
        let seq_len = columns[0].len();
        if columns.iter().any(|c| c.len() != seq_len) {
            return Err(Error::contract(
                "TokenMatrix::from_columns",
                format!("uniform column length {seq_len}"),
                "ragged columns".to_string(),
            ));
        }
        let mut ids = vec![0; seq_len * batch];
        for (b, col) in columns.iter().enumerate() {
            for (s, &id) in col.iter().enumerate() {
                ids[s * batch + b] = id;
            }
        }
        Ok(TokenMatrix { seq_len, batch, ids })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn get(&self, seq_pos: usize, batch_index: usize) -> TokenId {
        self.ids[seq_pos * self.batch + batch_index]
    }

    /// Row-major [seq × batch] ids.
    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn column(&self, batch_index: usize) -> Vec<TokenId> {
        (0..self.seq_len).map(|s| self.get(s, batch_index)).collect()
    }

    /// Rows first..last along the sequence dimension.
    fn slice_rows(&self, start: usize, len: usize) -> TokenMatrix {
        let ids = self.ids[start * self.batch..(start + len) * self.batch].to_vec();
        TokenMatrix {
            seq_len: len,
            batch: self.batch,
            ids,
        }
    }
}

/// One input→output pattern of the task roster.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub input: Vec<TokenId>,
    pub output: Vec<TokenId>,
}

impl TaskSpec {
    fn new(name: &str, input: &[TokenId], output: &[TokenId]) -> Self {
        TaskSpec {
            name: name.to_string(),
            input: input.to_vec(),
            output: output.to_vec(),
        }
    }
}

/// Constant sequences repeated in the output: 0000→0000, 1111→1111.
pub fn copy_constant_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("copy_zeros", &[0, 0, 0, 0], &[0, 0, 0, 0]),
        TaskSpec::new("copy_ones", &[1, 1, 1, 1], &[1, 1, 1, 1]),
    ]
}

/// Constant sequences answered by their inversion: 0000→1111, 1111→0000.
pub fn invert_constant_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("invert_zeros", &[0, 0, 0, 0], &[1, 1, 1, 1]),
        TaskSpec::new("invert_ones", &[1, 1, 1, 1], &[0, 0, 0, 0]),
    ]
}

/// Three equal inputs map to one inverted output: 000→1, 111→0.
pub fn three_to_one_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("three_zeros_to_one", &[0, 0, 0], &[1]),
        TaskSpec::new("three_ones_to_zero", &[1, 1, 1], &[0]),
    ]
}

/// One input maps to three inverted outputs: 0→111, 1→000.
pub fn one_to_three_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("one_to_three_ones", &[0], &[1, 1, 1]),
        TaskSpec::new("one_to_three_zeros", &[1], &[0, 0, 0]),
    ]
}

/// Alternating sequences copied to the output: 0101→0101, 1010→1010.
pub fn alternating_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new("alternating_01", &[0, 1, 0, 1], &[0, 1, 0, 1]),
        TaskSpec::new("alternating_10", &[1, 0, 1, 0], &[1, 0, 1, 0]),
    ]
}

/// The full eight-task roster for joint training. `invert_constant`
/// swaps the two copy tasks for their inversion variant.
pub fn all_tasks(invert_constant: bool) -> Vec<TaskSpec> {
    let mut tasks = if invert_constant {
        invert_constant_tasks()
    } else {
        copy_constant_tasks()
    };
    tasks.extend(three_to_one_tasks());
    tasks.extend(one_to_three_tasks());
    tasks.extend(alternating_tasks());
    tasks
}

/// Duplicates every task `copies_per_task` times and shuffles the result
/// deterministically.
pub fn generate_dataset(
    tasks: &[TaskSpec],
    copies_per_task: usize,
    rng_seed: u64,
) -> Result<Vec<(Vec<TokenId>, Vec<TokenId>)>> {
    if tasks.is_empty() {
        return Err(Error::contract("generate_dataset", "non-empty task list", "empty"));
    }
    if copies_per_task == 0 {
        return Err(Error::contract("generate_dataset", "copies >= 1", "0"));
    }
    let mut pairs = Vec::with_capacity(tasks.len() * copies_per_task);
    for task in tasks {
        for _ in 0..copies_per_task {
            pairs.push((task.input.clone(), task.output.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Wraps a payload as [SOS, payload…, EOS] and pads to `len`.
pub fn frame(payload: &[TokenId], len: usize) -> Result<Vec<TokenId>> {
    let framed_len = payload.len() + 2;
    if len < framed_len {
        return Err(Error::Capacity {
            what: "framed sequence length",
            actual: framed_len,
            limit: len,
        });
    }
    let mut out = Vec::with_capacity(len);
    out.push(vocab::SOS);
    out.extend_from_slice(payload);
    out.push(vocab::EOS);
    out.resize(len, vocab::PAD);
    Ok(out)
}

/// Removes the SOS/EOS frame and trailing padding, recovering the payload.
pub fn strip_frame(framed: &[TokenId]) -> Vec<TokenId> {
    framed
        .iter()
        .copied()
        .skip_while(|&t| t == vocab::SOS)
        .take_while(|&t| t != vocab::EOS && t != vocab::PAD)
        .collect()
}

/// Padded source/target matrices plus the masks one training step needs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: TokenMatrix,
    pub tgt_in: TokenMatrix,
    pub tgt_out: TokenMatrix,
    pub src_key_padding: KeyPaddingMask,
    pub tgt_key_padding: KeyPaddingMask,
    pub causal: CausalMask,
}

impl Batch {
    /// The decoder memory mask is the source mask: it hides the same PAD
    /// positions from cross-attention.
    pub fn memory_key_padding(&self) -> &KeyPaddingMask {
        &self.src_key_padding
    }

    pub fn batch_size(&self) -> usize {
        self.src.batch()
    }
}

/// Frames every pair, pads to a common length and derives all masks.
///
/// With `pad_to` absent, sources and targets are padded to their own batch
/// maxima (a uniform-length batch therefore gains no PAD at all). With
/// `pad_to` given, both sides are padded to exactly that length.
pub fn frame_and_pad(
    pairs: &[(Vec<TokenId>, Vec<TokenId>)],
    pad_to: Option<usize>,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::contract("frame_and_pad", "non-empty batch", "empty"));
    }
    let max_src = pairs.iter().map(|(s, _)| s.len() + 2).max().unwrap();
    let max_tgt = pairs.iter().map(|(_, t)| t.len() + 2).max().unwrap();
    let (src_len, tgt_len) = match pad_to {
        Some(len) => {
            let longest = max_src.max(max_tgt);
            if len < longest {
                return Err(Error::Capacity {
                    what: "pad_to",
                    actual: longest,
                    limit: len,
                });
            }
            (len, len)
        }
        None => (max_src, max_tgt),
    };

    let src_cols: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|(s, _)| frame(s, src_len))
        .collect::<Result<_>>()?;
    let tgt_cols: Vec<Vec<TokenId>> = pairs
        .iter()
        .map(|(_, t)| frame(t, tgt_len))
        .collect::<Result<_>>()?;

    let src = TokenMatrix::from_columns(&src_cols)?;
    let tgt_framed = TokenMatrix::from_columns(&tgt_cols)?;
    let t = tgt_framed.seq_len() - 1;
    let tgt_in = tgt_framed.slice_rows(0, t);
    let tgt_out = tgt_framed.slice_rows(1, t);

    let src_key_padding = key_padding_mask(&src, vocab::PAD);
    let tgt_key_padding = key_padding_mask(&tgt_in, vocab::PAD);
    let causal = causal_mask(t)?;

    Ok(Batch {
        src,
        tgt_in,
        tgt_out,
        src_key_padding,
        tgt_key_padding,
        causal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_sizes_match_task_times_copies() {
        assert_eq!(generate_dataset(&copy_constant_tasks(), 50, 0).unwrap().len(), 100);
        assert_eq!(generate_dataset(&all_tasks(false), 25, 0).unwrap().len(), 200);
    }

    #[test]
    fn dataset_shuffle_is_deterministic() {
        let a = generate_dataset(&all_tasks(false), 3, 7).unwrap();
        let b = generate_dataset(&all_tasks(false), 3, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&all_tasks(false), 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_task_list_is_rejected() {
        assert!(generate_dataset(&[], 5, 0).is_err());
    }

    #[test]
    fn framing_pads_after_eos() {
        assert_eq!(frame(&[0, 0, 0], 6).unwrap(), vec![2, 0, 0, 0, 3, 4]);
    }

    #[test]
    fn teacher_forcing_shift() {
        let batch = frame_and_pad(&[(vec![1], vec![0, 0])], None).unwrap();
        // framed target [2,0,0,3]
        assert_eq!(batch.tgt_in.column(0), vec![2, 0, 0]);
        assert_eq!(batch.tgt_out.column(0), vec![0, 0, 3]);
    }

    #[test]
    fn shorter_row_gains_padding_and_mask_trues() {
        let pairs = vec![
            (vec![0, 0, 0, 0], vec![0, 0, 0, 0]), // framed 6
            (vec![1], vec![0, 0, 0]),             // framed 3 and 5
        ];
        let batch = frame_and_pad(&pairs, Some(6)).unwrap();
        assert_eq!(batch.src.column(1), vec![2, 1, 3, 4, 4, 4]);
        let trues = batch.src_key_padding.row(1).iter().filter(|&&b| b).count();
        assert_eq!(trues, 3);
        assert!(batch.src_key_padding.row(0).iter().all(|&b| !b));
    }

    #[test]
    fn pad_to_too_small_is_a_capacity_error() {
        let pairs = vec![(vec![0, 0, 0, 0], vec![0, 0, 0, 0])];
        assert!(matches!(
            frame_and_pad(&pairs, Some(4)),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn uniform_batches_gain_no_padding() {
        let pairs = vec![(vec![0, 0, 0], vec![1]), (vec![1, 1, 1], vec![0])];
        let batch = frame_and_pad(&pairs, None).unwrap();
        assert!(batch.src_key_padding.is_empty());
        assert!(batch.tgt_key_padding.is_empty());
    }

    #[test]
    fn memory_mask_is_the_source_mask() {
        let pairs = vec![(vec![1], vec![0, 0, 0]), (vec![0, 1, 0, 1], vec![0, 1, 0, 1])];
        let batch = frame_and_pad(&pairs, Some(6)).unwrap();
        assert!(std::ptr::eq(batch.memory_key_padding(), &batch.src_key_padding));
    }

    #[test]
    fn round_trip_strips_frame_for_all_tasks() {
        for task in all_tasks(false) {
            let framed = frame(&task.input, task.input.len() + 4).unwrap();
            assert_eq!(strip_frame(&framed), task.input, "task {}", task.name);
        }
    }

    #[test]
    fn framed_sequences_have_one_sos_and_one_eos() {
        for task in all_tasks(true) {
            let framed = frame(&task.output, task.output.len() + 3).unwrap();
            assert_eq!(framed.iter().filter(|&&t| t == vocab::SOS).count(), 1);
            assert_eq!(framed.iter().filter(|&&t| t == vocab::EOS).count(), 1);
            assert_eq!(framed[0], vocab::SOS);
        }
    }
}
