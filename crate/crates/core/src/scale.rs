//! Integer rating scales and their single-digit token encoding.
//!
//! Ratings live on an inclusive integer range such as 1..=5 or 1..=10.
//! The decoder reads the rating out of a single generated token, so each
//! rating must map to one ASCII digit 0-9. `token_offset` is the shift
//! applied on the way out: `digit = rating + token_offset`. A 1..=10
//! scale uses offset -1 so the prompt asks for "0 to 9", while a 1..=5
//! scale uses offset 0 and asks for "1 to 5" directly.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// An inclusive integer rating range plus the digit-token shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingScale {
    pub min: i64,
    pub max: i64,
    /// Shift from rating to generated digit: `digit = rating + token_offset`.
    pub token_offset: i64,
}

impl RatingScale {
    /// 1..=10 ratings emitted as digits 0-9.
    pub fn one_to_ten() -> Self {
        RatingScale {
            min: 1,
            max: 10,
            token_offset: -1,
        }
    }

    /// 1..=5 ratings emitted as digits 1-5.
    pub fn one_to_five() -> Self {
        RatingScale {
            min: 1,
            max: 5,
            token_offset: 0,
        }
    }

    /// Checks the scale is non-empty and every rating maps into 0..=9.
    pub fn validate(&self) -> Result<()> {
        if self.min > self.max {
            return Err(Error::Config(format!(
                "rating scale min {} exceeds max {}",
                self.min, self.max
            )));
        }
        let lo = self.min + self.token_offset;
        let hi = self.max + self.token_offset;
        if lo < 0 || hi > 9 {
            return Err(Error::Config(format!(
                "rating scale {}..={} with offset {} maps outside single digits 0-9",
                self.min, self.max, self.token_offset
            )));
        }
        Ok(())
    }

    /// Number of ratings on the scale.
    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    /// All ratings, ascending.
    pub fn ratings(&self) -> impl Iterator<Item = i64> + '_ {
        self.min..=self.max
    }

    /// True when `rating` lies on the scale.
    pub fn contains(&self, rating: i64) -> bool {
        (self.min..=self.max).contains(&rating)
    }

    /// Digit token text for a rating. Errors when the rating is off-scale.
    pub fn digit_for(&self, rating: i64) -> Result<char> {
        if !self.contains(rating) {
            return Err(Error::Config(format!(
                "rating {} outside scale {}..={}",
                rating, self.min, self.max
            )));
        }
        let d = rating + self.token_offset;
        debug_assert!((0..=9).contains(&d));
        Ok((b'0' + d as u8) as char)
    }

    /// Rating for a generated digit. Errors when the digit maps off-scale.
    pub fn rating_for(&self, digit: char) -> Result<i64> {
        let d = digit
            .to_digit(10)
            .ok_or_else(|| Error::Parse {
                message: "rating token is not a decimal digit".to_string(),
                raw: digit.to_string(),
            })? as i64;
        let rating = d - self.token_offset;
        if !self.contains(rating) {
            return Err(Error::Parse {
                message: format!(
                    "digit {} maps to rating {} outside scale {}..={}",
                    digit, rating, self.min, self.max
                ),
                raw: digit.to_string(),
            });
        }
        Ok(rating)
    }

    /// Digits for all ratings, ascending, e.g. `['0', '1', ..., '9']`.
    pub fn digits(&self) -> Vec<char> {
        self.ratings()
            .map(|r| (b'0' + (r + self.token_offset) as u8) as char)
            .collect()
    }

    /// Lowest digit as prompt text, e.g. `"0"`.
    pub fn min_digit_text(&self) -> String {
        ((b'0' + (self.min + self.token_offset) as u8) as char).to_string()
    }

    /// Highest digit as prompt text, e.g. `"9"`.
    pub fn max_digit_text(&self) -> String {
        ((b'0' + (self.max + self.token_offset) as u8) as char).to_string()
    }

    /// Comma-separated digit list for prompts, e.g.
    /// `"0, 1, 2, 3, 4, 5, 6, 7, 8, 9"`.
    pub fn digit_list_text(&self) -> String {
        self.digits()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Clamps a continuous prediction onto the scale bounds.
    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.min as f64, self.max as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_point_scale_shifts_down_one() {
        let s = RatingScale::one_to_ten();
        s.validate().unwrap();
        assert_eq!(s.digit_for(1).unwrap(), '0');
        assert_eq!(s.digit_for(10).unwrap(), '9');
        assert_eq!(s.rating_for('7').unwrap(), 8);
        assert_eq!(s.digit_list_text(), "0, 1, 2, 3, 4, 5, 6, 7, 8, 9");
        assert_eq!(s.min_digit_text(), "0");
        assert_eq!(s.max_digit_text(), "9");
    }

    #[test]
    fn five_point_scale_is_identity() {
        let s = RatingScale::one_to_five();
        s.validate().unwrap();
        assert_eq!(s.digit_for(3).unwrap(), '3');
        assert_eq!(s.rating_for('5').unwrap(), 5);
        assert_eq!(s.digit_list_text(), "1, 2, 3, 4, 5");
    }

    #[test]
    fn off_scale_digit_rejected() {
        let s = RatingScale::one_to_five();
        assert!(s.rating_for('0').is_err());
        assert!(s.rating_for('6').is_err());
        assert!(s.rating_for('x').is_err());
    }

    #[test]
    fn invalid_scales_rejected() {
        assert!(RatingScale {
            min: 5,
            max: 1,
            token_offset: 0
        }
        .validate()
        .is_err());
        // 1..=10 with no offset would need two-digit tokens.
        assert!(RatingScale {
            min: 1,
            max: 10,
            token_offset: 0
        }
        .validate()
        .is_err());
        assert!(RatingScale {
            min: 1,
            max: 5,
            token_offset: -2
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clamp_respects_bounds() {
        let s = RatingScale::one_to_ten();
        assert_eq!(s.clamp(11.2), 10.0);
        assert_eq!(s.clamp(-3.0), 1.0);
        assert_eq!(s.clamp(6.4), 6.4);
    }
}
