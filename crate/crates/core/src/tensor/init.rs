use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamSet};
use super::{Tensor4, TensorError};

/// Uniform Xavier initialization for weights of dims `(out, in, kh, kw)`.
///
/// Fan-in is `in·kh·kw` and fan-out `out·kh·kw`; values are drawn from
/// `U(−a, a)` with `a = √(6 / (fan_in + fan_out))`.
pub fn xavier_init(seed: u64, dims: [usize; 4]) -> Result<Tensor4, TensorError> {
    let rf = dims[2] * dims[3];
    let (fan_in, fan_out) = (dims[1] * rf, dims[0] * rf);
    if fan_in == 0 || fan_out == 0 {
        return Err(TensorError::ZeroFan(dims));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..dims.iter().product::<usize>())
        .map(|_| rng.gen_range(-a..a))
        .collect();
    Tensor4::from_vec(dims, data)
}

/// Seeds parameter `name` from `base`, so initial values depend only on the
/// seed and the parameter's name, not on construction order.
pub fn name_seed(base: u64, name: &str) -> u64 {
    // FNV-1a
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Adds a Xavier-initialized weight to `params`.
pub fn add_xavier(
    params: &mut ParamSet,
    name: &str,
    dims: [usize; 4],
    seed: u64,
) -> Result<ParamId, TensorError> {
    let value = xavier_init(name_seed(seed, name), dims)?;
    Ok(params.add(name, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = xavier_init(7, [8, 4, 3, 3]).unwrap();
        let b = xavier_init(7, [8, 4, 3, 3]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, xavier_init(8, [8, 4, 3, 3]).unwrap());
    }

    #[test]
    fn variance_matches() {
        let dims = [100, 1000, 1, 1];
        let t = xavier_init(1, dims).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let expect = 2.0 / 1100.0;
        assert!(((var - expect) / expect).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_fan() {
        assert_eq!(
            xavier_init(0, [0, 3, 1, 1]),
            Err(TensorError::ZeroFan([0, 3, 1, 1]))
        );
    }
}
