//! Number formatting for CSV outputs.

/// Formats `x` with 7 significant digits in the style of C's `%.7g`:
/// fixed notation for decimal exponents in `[-5, 7)`, scientific otherwise,
/// trailing zeros trimmed.
pub fn sig7(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if x == 0.0 {
        return "0".to_string();
    }
    // the exponent after rounding to 7 significant digits
    let sci = format!("{:.6e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..7).contains(&exp) {
        let decimals = (6 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" {
        "0".to_string()
    } else {
        t.to_string()
    }
}

/// `sig7` for optional cells; `None` renders as an empty cell.
pub fn sig7_opt(x: Option<f64>) -> String {
    x.map(sig7).unwrap_or_default()
}
