use crate::tensor::{Result, Tensor, TensorError};

/// Sinusoidal position table of shape `[seq_len, d_model]`:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
/// The table is added to (not concatenated with) embedded inputs.
pub fn positional_encoding(seq_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(TensorError::Invalid(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    if seq_len == 0 {
        return Err(TensorError::Invalid("positional encoding of length 0".into()));
    }
    let mut data = vec![0.0; seq_len * d_model];
    for pos in 0..seq_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[seq_len, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_row_alternates_zero_one() {
        let pe = positional_encoding(4, 8).unwrap();
        for i in 0..8 {
            assert_eq!(pe.at(&[0, i]), if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn second_row_first_entry_is_sin_one() {
        let pe = positional_encoding(2, 16).unwrap();
        assert!((pe.at(&[1, 0]) - 0.841_470_984_807_896_5).abs() < 1e-15);
    }

    #[test]
    fn bounded_and_rejects_odd_width() {
        let pe = positional_encoding(100, 32).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }
}
