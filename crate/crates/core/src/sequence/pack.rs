//! Packing delayed sequences into fixed-length context rows.
//!
//! Sequences packed into one row never attend to each other: the model resets
//! attention and positions at every segment boundary, so a packed row is
//! equivalent to running its segments separately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Task, TrainExample};
use crate::error::{Error, Result};

/// One context row: indices into the example table, in order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedRow {
    pub segments: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub rows: Vec<PackedRow>,
    /// Delayed frames in the batch.
    pub frames: usize,
    /// Delayed frames drawn from text-only sequences.
    pub text_frames: usize,
}

fn check_len(ex: &TrainExample, context_len: usize) -> Result<()> {
    if ex.len() > context_len {
        return Err(Error::SequenceTooLong {
            id: ex.id.clone(),
            len: ex.len(),
            context_len,
        });
    }
    Ok(())
}

/// Packs `order` (indices into `examples`) greedily, in order, into rows of
/// at most `context_len` delayed frames.
pub fn pack_rows(examples: &[TrainExample], order: &[usize], context_len: usize) -> Result<Vec<PackedRow>> {
    let mut rows: Vec<PackedRow> = Vec::new();
    for &i in order {
        let ex = &examples[i];
        check_len(ex, context_len)?;
        match rows.last_mut() {
            Some(row) if row.len + ex.len() <= context_len => {
                row.segments.push(i);
                row.len += ex.len();
            }
            _ => rows.push(PackedRow {
                segments: vec![i],
                len: ex.len(),
            }),
        }
    }
    Ok(rows)
}

/// Endless seeded sampler that mixes text-only and speech sequences so that
/// text-only sequences make up `text_fraction` of all delayed frames drawn.
///
/// The pool for each draw is picked by comparing the running text share with
/// the requested fraction, so the measured share converges at rate `1/n`.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    text_pool: Vec<usize>,
    other_pool: Vec<usize>,
    text_fraction: f64,
    context_len: usize,
    batch_frames: usize,
    rng: ChaCha8Rng,
    text_frames: u64,
    total_frames: u64,
    carry: Option<usize>,
}

impl BatchSampler {
    pub fn new(
        examples: &[TrainExample],
        context_len: usize,
        batch_frames: usize,
        text_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&text_fraction) {
            return Err(Error::Config(format!("text_fraction {text_fraction} outside [0, 1]")));
        }
        if batch_frames == 0 {
            return Err(Error::Config("batch_frames must be >= 1".into()));
        }
        let mut text_pool = Vec::new();
        let mut other_pool = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            check_len(ex, context_len)?;
            if ex.task == Task::TextLm {
                text_pool.push(i);
            } else {
                other_pool.push(i);
            }
        }
        if text_pool.is_empty() && other_pool.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        Ok(BatchSampler {
            text_pool,
            other_pool,
            text_fraction,
            context_len,
            batch_frames,
            rng: ChaCha8Rng::seed_from_u64(seed),
            text_frames: 0,
            total_frames: 0,
            carry: None,
        })
    }

    fn draw(&mut self) -> usize {
        let want_text = if self.text_fraction <= 0.0 || self.text_pool.is_empty() {
            false
        } else if self.text_fraction >= 1.0 || self.other_pool.is_empty() {
            true
        } else {
            (self.text_frames as f64) < self.text_fraction * self.total_frames as f64
        };
        let pool = if want_text { &self.text_pool } else { &self.other_pool };
        pool[self.rng.random_range(0..pool.len())]
    }

    pub fn next_batch(&mut self, examples: &[TrainExample]) -> Batch {
        let mut order = Vec::new();
        let mut frames = 0usize;
        let mut text_frames = 0usize;
        loop {
            let i = match self.carry.take() {
                Some(i) => i,
                None => {
                    let i = self.draw();
                    let len = examples[i].len() as u64;
                    self.total_frames += len;
                    if examples[i].task == Task::TextLm {
                        self.text_frames += len;
                    }
                    i
                }
            };
            let len = examples[i].len();
            if !order.is_empty() && frames + len > self.batch_frames {
                self.carry = Some(i);
                break;
            }
            order.push(i);
            frames += len;
            if examples[i].task == Task::TextLm {
                text_frames += len;
            }
            if frames >= self.batch_frames {
                break;
            }
        }
        let rows = pack_rows(examples, &order, self.context_len).expect("lengths checked at construction");
        Batch {
            rows,
            frames,
            text_frames,
        }
    }
}

/// Draws `n_batches` batches from a fresh [`BatchSampler`].
pub fn pack_batches(
    examples: &[TrainExample],
    context_len: usize,
    batch_frames: usize,
    text_fraction: f64,
    seed: u64,
    n_batches: usize,
) -> Result<Vec<Batch>> {
    let mut sampler = BatchSampler::new(examples, context_len, batch_frames, text_fraction, seed)?;
    Ok((0..n_batches).map(|_| sampler.next_batch(examples)).collect())
}
