//! Text formatting for floating-point values written to CSV files.

/// Formats `v` like C's `%.17g`: 17 significant digits, positional notation
/// for decimal exponents in `[-5, 17)`, scientific otherwise, trailing zeros
/// removed. Every finite `f64` survives a parse/format round trip unchanged.
pub fn sig17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.16e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        trim_zeros(format!("{:.*}", decimals, v))
    } else {
        let m = trim_zeros(mantissa.to_string());
        format!("{m}e{exp}")
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}
