//! Fixed high-pass kernel banks: SRM, KV and Gabor.
//!
//! Every bank stores 5x5 kernels; smaller sources are zero-padded around
//! the center.

use std::f64::consts::PI;
use std::fmt::Write as _;

use mcnet_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KERNEL_SIZE: usize = 5;
const KERNEL_LEN: usize = KERNEL_SIZE * KERNEL_SIZE;

const SRM_DATA: &str = include_str!("../data/srm30.txt");
const SRM_SHA256: &str = "b3aeef496093021d173a1f6b383dbcb73a834302f5d809d524ec2a4ac5f741e7";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankSource {
    Srm,
    Kv,
    Gabor,
    Learned,
}

impl BankSource {
    fn as_str(self) -> &'static str {
        match self {
            BankSource::Srm => "srm",
            BankSource::Kv => "kv",
            BankSource::Gabor => "gabor",
            BankSource::Learned => "learned",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "srm" => BankSource::Srm,
            "kv" => BankSource::Kv,
            "gabor" => BankSource::Gabor,
            "learned" => BankSource::Learned,
            _ => return None,
        })
    }
}

/// An ordered set of named 5x5 kernels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    pub source: BankSource,
    pub names: Vec<String>,
    pub kernels: Vec<[f64; KERNEL_LEN]>,
}

impl KernelBank {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    /// `[K, 1, 5, 5]` convolution weights.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .kernels
            .iter()
            .flatten()
            .map(|&v| T::from_f64_lossy(v))
            .collect();
        Tensor::new([self.len(), 1, KERNEL_SIZE, KERNEL_SIZE], data).expect("bank shape")
    }

    /// Plain-text form: a `bank` header line, then per kernel a `kernel`
    /// line and five rows of shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut s = format!("bank {} {} {KERNEL_SIZE}\n", self.source.as_str(), self.len());
        for (name, k) in self.names.iter().zip(&self.kernels) {
            writeln!(s, "kernel {name}").unwrap();
            for row in k.chunks(KERNEL_SIZE) {
                let row: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(s, "{}", row.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Bank(format!("line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (n, header) = lines.next().ok_or_else(|| Error::Bank("empty input".into()))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        let (source, count) = match head.as_slice() {
            ["bank", src, count, size] if *size == KERNEL_SIZE.to_string() => (
                BankSource::parse(src).ok_or_else(|| bad(n, "unknown bank source"))?,
                count.parse::<usize>().map_err(|_| bad(n, "bad kernel count"))?,
            ),
            _ => return Err(bad(n, "expected `bank <source> <count> 5`")),
        };
        let mut bank = KernelBank {
            source,
            names: Vec::with_capacity(count),
            kernels: Vec::with_capacity(count),
        };
        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| Error::Bank("truncated bank".into()))?;
            let name = line
                .strip_prefix("kernel ")
                .ok_or_else(|| bad(n, "expected `kernel <name>`"))?;
            let mut k = [0.0; KERNEL_LEN];
            for r in 0..KERNEL_SIZE {
                let (n, line) = lines.next().ok_or_else(|| Error::Bank("truncated kernel".into()))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(n, "bad number"))?;
                if vals.len() != KERNEL_SIZE {
                    return Err(bad(n, "expected 5 values"));
                }
                k[r * KERNEL_SIZE..(r + 1) * KERNEL_SIZE].copy_from_slice(&vals);
            }
            bank.names.push(name.trim().to_string());
            bank.kernels.push(k);
        }
        if let Some((n, _)) = lines.next() {
            return Err(bad(n, "trailing content"));
        }
        Ok(bank)
    }
}

/// Zero-pads an odd `size x size` kernel to 5x5, keeping it centered.
fn pad_to_5(values: &[f64], size: usize) -> [f64; KERNEL_LEN] {
    let off = (KERNEL_SIZE - size) / 2;
    let mut k = [0.0; KERNEL_LEN];
    for r in 0..size {
        for c in 0..size {
            k[(r + off) * KERNEL_SIZE + c + off] = values[r * size + c];
        }
    }
    k
}

/// The 30 SRM residual filters (first, second and third order, SQUARE and
/// EDGE variants), each divided by its normalization constant.
pub fn srm_bank() -> Result<KernelBank> {
    let digest = Sha256::digest(SRM_DATA.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    if hex != SRM_SHA256 {
        return Err(Error::Bank(format!("SRM data checksum mismatch: {hex}")));
    }
    parse_srm(SRM_DATA)
}

fn parse_srm(text: &str) -> Result<KernelBank> {
    let mut bank = KernelBank {
        source: BankSource::Srm,
        names: vec![],
        kernels: vec![],
    };
    let mut lines = text.lines();
    while let Some(header) = lines.next() {
        let parts: Vec<&str> = header.split_whitespace().collect();
        let ["kernel", name, size, divisor] = parts.as_slice() else {
            return Err(Error::Bank(format!("bad SRM header {header:?}")));
        };
        let size: usize = size.parse().map_err(|_| Error::Bank("bad size".into()))?;
        let divisor: f64 = divisor.parse().map_err(|_| Error::Bank("bad divisor".into()))?;
        let mut vals = Vec::with_capacity(size * size);
        for _ in 0..size {
            let row = lines.next().ok_or_else(|| Error::Bank("truncated SRM data".into()))?;
            for v in row.split_whitespace() {
                let v: i32 = v.parse().map_err(|_| Error::Bank(format!("bad value {v:?}")))?;
                vals.push(v as f64 / divisor);
            }
        }
        if vals.len() != size * size || size % 2 == 0 || size > KERNEL_SIZE {
            return Err(Error::Bank(format!("kernel {name}: bad shape")));
        }
        bank.names.push(name.to_string());
        bank.kernels.push(pad_to_5(&vals, size));
    }
    Ok(bank)
}

/// The KV kernel, a single 5x5 second-order predictor residual.
pub fn kv_kernel() -> KernelBank {
    let k: [i32; KERNEL_LEN] = [
        -1, 2, -2, 2, -1, //
        2, -6, 8, -6, 2, //
        -2, 8, -12, 8, -2, //
        2, -6, 8, -6, 2, //
        -1, 2, -2, 2, -1,
    ];
    KernelBank {
        source: BankSource::Kv,
        names: vec!["kv".into()],
        kernels: vec![k.map(|v| v as f64 / 12.0)],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaborParams {
    pub sigmas: Vec<f64>,
    pub gamma: f64,
    pub orientations: usize,
    /// Wavelength is `sigma / lambda_ratio`.
    pub lambda_ratio: f64,
    pub psi: f64,
    pub mean_subtract: bool,
}

impl Default for GaborParams {
    fn default() -> Self {
        GaborParams {
            sigmas: vec![0.5, 1.0],
            gamma: 0.5,
            orientations: 15,
            lambda_ratio: 0.56,
            psi: 0.0,
            mean_subtract: true,
        }
    }
}

/// Gabor function sampled on the integer grid `x, y in [-2, 2]`, with
/// `kernel[row][col] = g(col - 2, row - 2)`.
pub fn gabor_kernel(sigma: f64, theta: f64, lambda: f64, gamma: f64, psi: f64) -> [f64; KERNEL_LEN] {
    let half = (KERNEL_SIZE / 2) as i32;
    let mut k = [0.0; KERNEL_LEN];
    for row in 0..KERNEL_SIZE {
        for col in 0..KERNEL_SIZE {
            let x = (col as i32 - half) as f64;
            let y = (row as i32 - half) as f64;
            let xr = x * theta.cos() + y * theta.sin();
            let yr = -x * theta.sin() + y * theta.cos();
            let env = (-(xr * xr + gamma * gamma * yr * yr) / (2.0 * sigma * sigma)).exp();
            k[row * KERNEL_SIZE + col] = env * (2.0 * PI * xr / lambda + psi).cos();
        }
    }
    k
}

/// Scales in the outer loop, orientations `k * pi / orientations` inner.
pub fn gabor_bank(p: &GaborParams) -> KernelBank {
    let mut bank = KernelBank {
        source: BankSource::Gabor,
        names: vec![],
        kernels: vec![],
    };
    for &sigma in &p.sigmas {
        for o in 0..p.orientations {
            let theta = o as f64 * PI / p.orientations as f64;
            let mut k = gabor_kernel(sigma, theta, sigma / p.lambda_ratio, p.gamma, p.psi);
            if p.mean_subtract {
                let mean = k.iter().sum::<f64>() / KERNEL_LEN as f64;
                k.iter_mut().for_each(|v| *v -= mean);
            }
            bank.names.push(format!("gabor_s{sigma}_o{o}"));
            bank.kernels.push(k);
        }
    }
    bank
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_keeps_center() {
        let k = pad_to_5(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], 3);
        assert_eq!(k[12], 5.0);
        assert_eq!(k[6], 1.0);
        assert_eq!(k[0], 0.0);
    }

    #[test]
    fn corrupted_srm_data_is_rejected_by_parser() {
        assert!(parse_srm("kernel x 4 1\n1 2 3 4\n").is_err());
        assert!(parse_srm("nonsense").is_err());
    }
}
