//! Token id layout. Ranges are contiguous so dataset and checkpoint files can
//! be read without a side table.
//!
//! | range     | contents                          |
//! |-----------|-----------------------------------|
//! | 0..16     | structural tokens                 |
//! | 16..256   | grammar tokens of the text corpus |
//! | 256..300  | shape / attribute / task tokens   |
//! | 400..500  | coordinate digits 0..=99          |

use crate::backbone::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const BOX_OPEN: TokenId = 4;
pub const BOX_CLOSE: TokenId = 5;
pub const NONE: TokenId = 6;
pub const FAM_ARITH: TokenId = 8;
pub const FAM_REPEAT: TokenId = 9;

pub const GRAMMAR_BASE: TokenId = 16;
pub const GRAMMAR_SIZE: u32 = 240;

pub const SHAPE_BASE: TokenId = 256;
pub const BAND_BASE: TokenId = 260;
pub const CELL_BASE: TokenId = 264;
pub const COUNT_BASE: TokenId = 280;

pub const TASK_DESCRIBE: TokenId = 288;
pub const TASK_COUNT: TokenId = 289;
pub const TASK_SHAPE_AT: TokenId = 290;
pub const TASK_BAND_AT: TokenId = 291;
pub const TASK_WHERE: TokenId = 292;
pub const TASK_LOCATE: TokenId = 293;
pub const TASK_LOCATE_ALL: TokenId = 294;

pub const DIGIT_BASE: TokenId = 400;
pub const DIGITS: u32 = 100;

/// Smallest vocabulary that holds every reserved range.
pub const MIN_VOCAB: usize = (DIGIT_BASE + DIGITS) as usize;

pub fn grammar(i: u32) -> TokenId {
    GRAMMAR_BASE + i % GRAMMAR_SIZE
}

pub fn digit(q: u32) -> TokenId {
    debug_assert!(q < DIGITS);
    DIGIT_BASE + q
}

pub fn as_digit(t: TokenId) -> Option<u32> {
    (DIGIT_BASE..DIGIT_BASE + DIGITS)
        .contains(&t)
        .then(|| t - DIGIT_BASE)
}
