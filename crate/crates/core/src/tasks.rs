//! Synthetic sequence tasks whose labels live purely in temporal order.
//!
//! The moving bar task draws a two-pixel-wide bar sweeping across a torus in
//! one of four directions. Per step the bar emits one positive and one
//! negative event per covered pixel, and because stride equals width the bar
//! tiles the grid exactly once per sweep: the time-summed frame stack is
//! identical for every sample, and clips from opposite directions hold the
//! same frames in reversed order. Any model that sums per-frame features
//! before its readout can separate horizontal from vertical sweeps but can
//! only guess the sign, capping it at 50 percent.
//!
//! The cued recall task shows 20 tokens from an 8-token vocabulary (four
//! appear three times, four twice) with a one-hot flag marking one step;
//! the label is the token shown at the flagged step. A per-step linear map
//! summed over time sees only the token counts plus a constant, so its best
//! play is naming a thrice-shown token: 3 in 20.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::events::{bin_events, AccumMode, Clip, Event};
use crate::tensor::Tensor;

pub const BAR_T: usize = 8;
pub const BAR_SIDE: usize = 16;
pub const BAR_WIDTH: usize = 2;
pub const BAR_WINDOW: u32 = 10;
pub const BAR_CLASSES: usize = 4;

/// Sweep directions, also the class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Right = 0,
    Left = 1,
    Up = 2,
    Down = 3,
}

impl Direction {
    pub fn from_index(i: usize) -> Direction {
        match i % BAR_CLASSES {
            0 => Direction::Right,
            1 => Direction::Left,
            2 => Direction::Up,
            _ => Direction::Down,
        }
    }
}

/// Event stream for one sweep starting at `offset`. One +1 event and one -1
/// event per covered pixel per step, both inside the step's time window.
pub fn moving_bar_events(direction: Direction, offset: usize) -> Vec<Event> {
    let side = BAR_SIDE as isize;
    let mut events = Vec::with_capacity(BAR_T * BAR_SIDE * BAR_WIDTH * 2);
    for t in 0..BAR_T {
        let shift = (BAR_WIDTH * t) as isize;
        let p = match direction {
            Direction::Right | Direction::Down => (offset as isize + shift).rem_euclid(side),
            Direction::Left | Direction::Up => (offset as isize - shift).rem_euclid(side),
        } as usize;
        let ts = (BAR_WINDOW as usize * t) as u32;
        for lane in 0..BAR_SIDE {
            for wv in 0..BAR_WIDTH {
                let pos = (p + wv) % BAR_SIDE;
                let (x, y) = match direction {
                    Direction::Right | Direction::Left => (pos, lane),
                    Direction::Up | Direction::Down => (lane, pos),
                };
                events.push(Event {
                    ts: ts + 2,
                    x: x as u16,
                    y: y as u16,
                    pol: 1,
                });
                events.push(Event {
                    ts: ts + 7,
                    x: x as u16,
                    y: y as u16,
                    pol: -1,
                });
            }
        }
    }
    events
}

pub fn moving_bar_clip(direction: Direction, offset: usize) -> Result<Clip> {
    let events = moving_bar_events(direction, offset);
    let frames = bin_events(&events, BAR_WINDOW, BAR_SIDE, BAR_SIDE, AccumMode::Count)?;
    Ok(Clip {
        frames,
        label: direction as u32,
    })
}

/// `n` clips with directions cycling for exact class balance and random
/// start offsets.
pub fn moving_bar_dataset(n: usize, seed: u64) -> Result<Vec<Clip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let offset = rng.gen_range(0..BAR_SIDE);
            moving_bar_clip(Direction::from_index(i), offset)
        })
        .collect()
}

pub const RECALL_T: usize = 20;
pub const RECALL_VOCAB: usize = 8;
/// vocabulary one-hot plus the cue flag
pub const RECALL_WIDTH: usize = RECALL_VOCAB + 1;

/// One cued-recall draw. The label is the token at the cued step.
#[derive(Debug, Clone)]
pub struct RecallSample {
    pub tokens: Vec<usize>,
    pub cue: usize,
}

impl RecallSample {
    pub fn label(&self) -> usize {
        self.tokens[self.cue]
    }

    /// Clip shaped (T, 1, 1, vocab + 1): one-hot tokens plus the cue flag.
    pub fn clip(&self) -> Result<Clip> {
        let mut frames = Tensor::zeros(&[RECALL_T, 1, 1, RECALL_WIDTH])?;
        for (t, &tok) in self.tokens.iter().enumerate() {
            let idx = frames.index_of(&[t, 0, 0, tok])?;
            frames.data_mut()[idx] = 1.0;
        }
        let flag = frames.index_of(&[self.cue, 0, 0, RECALL_VOCAB])?;
        frames.data_mut()[flag] = 1.0;
        Ok(Clip {
            frames,
            label: self.label() as u32,
        })
    }

    /// Text line `label tok tok ...`. The cue has to ride along in band, so
    /// the cued step writes its token offset by the vocabulary size.
    pub fn line(&self) -> String {
        let mut out = self.label().to_string();
        for (t, &tok) in self.tokens.iter().enumerate() {
            let id = if t == self.cue { tok + RECALL_VOCAB } else { tok };
            out.push(' ');
            out.push_str(&id.to_string());
        }
        out
    }
}

pub fn delayed_recall_sample(rng: &mut ChaCha8Rng) -> RecallSample {
    let mut vocab: Vec<usize> = (0..RECALL_VOCAB).collect();
    vocab.shuffle(rng);
    let mut tokens = Vec::with_capacity(RECALL_T);
    for (i, &tok) in vocab.iter().enumerate() {
        let copies = if i < RECALL_VOCAB / 2 { 3 } else { 2 };
        tokens.extend(std::iter::repeat(tok).take(copies));
    }
    tokens.shuffle(rng);
    let cue = rng.gen_range(0..RECALL_T);
    RecallSample { tokens, cue }
}

/// One cued-recall clip shaped (T, 1, 1, vocab + 1).
pub fn delayed_recall_clip(rng: &mut ChaCha8Rng) -> Result<Clip> {
    delayed_recall_sample(rng).clip()
}

pub fn delayed_recall_dataset(n: usize, seed: u64) -> Result<Vec<Clip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| delayed_recall_clip(&mut rng)).collect()
}

/// Leading/trailing split at a 4:1 ratio. Generation is i.i.d., so no
/// shuffle is needed.
pub fn split_dataset(clips: Vec<Clip>) -> (Vec<Clip>, Vec<Clip>) {
    let val = clips.len() / 5;
    let mut train = clips;
    let rest = train.split_off(train.len() - val);
    (train, rest)
}
