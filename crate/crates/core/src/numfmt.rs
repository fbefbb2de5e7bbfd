//! Decimal rendering with a fixed number of significant digits.
//!
//! JSON and Newick output use 17 digits, which round-trips every `f64`;
//! CSV output uses 12.

use std::io;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};

pub const JSON_DIGITS: usize = 17;
pub const CSV_DIGITS: usize = 12;

/// Renders `v` with at most `digits` significant digits. Trailing zeros are
/// trimmed, integral values keep a `.0` suffix, and very large or small
/// magnitudes switch to exponent form.
pub fn format_sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".to_string()
        } else if v > 0.0 {
            "inf".to_string()
        } else {
            "-inf".to_string()
        };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let mantissa_digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let sign = if negative { "-" } else { "" };

    if !(-5..21).contains(&exp) {
        let m = trim_fraction(&format!(
            "{}.{}",
            &mantissa_digits[..1],
            &mantissa_digits[1..]
        ));
        return format!("{sign}{m}e{exp}");
    }
    let body = if exp < 0 {
        let zeros = "0".repeat((-exp - 1) as usize);
        format!("0.{zeros}{mantissa_digits}")
    } else {
        let int_len = exp as usize + 1;
        if mantissa_digits.len() <= int_len {
            let pad = "0".repeat(int_len - mantissa_digits.len());
            format!("{mantissa_digits}{pad}.0")
        } else {
            format!(
                "{}.{}",
                &mantissa_digits[..int_len],
                &mantissa_digits[int_len..]
            )
        }
    };
    format!("{sign}{}", trim_fraction(&body))
}

fn trim_fraction(s: &str) -> String {
    if !s.contains('.') {
        return format!("{s}.0");
    }
    let t = s.trim_end_matches('0');
    if t.ends_with('.') {
        format!("{t}0")
    } else {
        t.to_string()
    }
}

/// `serde_json` formatter that writes floats with [`JSON_DIGITS`] significant
/// digits and non-finite floats as `null`.
pub struct SigFormatter<F> {
    inner: F,
}

impl<F: Formatter> Formatter for SigFormatter<F> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_sig(value, JSON_DIGITS).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_array(w)
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array(w)
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_array_value(w)
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }
    fn end_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_key(w)
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Serializes `value` as JSON with 17-significant-digit floats.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T, pretty: bool) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    if pretty {
        let fmt = SigFormatter { inner: PrettyFormatter::new() };
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
        value.serialize(&mut ser)?;
    } else {
        let fmt = SigFormatter { inner: CompactFormatter };
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
        value.serialize(&mut ser)?;
    }
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn renders_common_values() {
        assert_eq!(format_sig(9.0, 17), "9.0");
        assert_eq!(format_sig(0.25, 17), "0.25");
        assert_eq!(format_sig(-16.0, 17), "-16.0");
        assert_eq!(format_sig(1.0 / 9.0, 17), "0.1111111111111111");
        assert_eq!(format_sig(1.0 / 3.0, 12), "0.333333333333");
        assert_eq!(format_sig(1e-7, 12), "1.0e-7");
        assert_eq!(format_sig(0.0, 17), "0.0");
        assert_eq!(format_sig(123456.0, 3), "123000.0");
    }

    #[test]
    fn json_uses_sig_digits() {
        let s = to_json_string(&vec![1.0 / 9.0, f64::NAN, 2.0], false).unwrap();
        assert_eq!(s, "[0.1111111111111111,null,2.0]");
    }

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL) {
            let s = format_sig(v, 17);
            let back: f64 = s.parse().unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
