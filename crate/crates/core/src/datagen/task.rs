use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::modring::Modulus;

/// Which function of the input vector the model learns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    /// `Σ a_i mod q`.
    ModAdd,
    /// Modular addition where sparse slots hold `k` instead of zero.
    ModAddSparseK { k: u64 },
    /// `(Σ a_i^j)² + a_1^k mod q`; depends on position through `a_1`.
    Asymmetric { j: u32, k: u32 },
    /// `Π a_i mod q`.
    ModMul,
    /// `Σ_{i<half} a_i · a_{i+half} mod q`.
    ScalarProduct { half_len: usize },
    /// `a · s mod q` for a binary secret `s`.
    LweDot { secret: Vec<u8> },
}

impl TaskKind {
    /// Value written into the sparse (padding) slots.
    pub fn pad_value(&self) -> u64 {
        match self {
            TaskKind::ModAddSparseK { k } => *k,
            _ => 0,
        }
    }

    /// Checks the task's own parameters against `(N, q)`.
    pub fn validate(&self, n_terms: usize, q: Modulus) -> Result<()> {
        match self {
            TaskKind::ModAdd | TaskKind::ModMul => Ok(()),
            TaskKind::ModAddSparseK { k } => {
                q.check(*k)?;
                Ok(())
            }
            TaskKind::Asymmetric { j, k } => {
                if *j == 0 || *k == 0 {
                    return domain("asymmetric task needs j >= 1 and k >= 1");
                }
                Ok(())
            }
            TaskKind::ScalarProduct { half_len } => {
                if *half_len == 0 || 2 * half_len != n_terms {
                    return domain(format!(
                        "scalar product with half length {half_len} needs N = {}, got {n_terms}",
                        2 * half_len
                    ));
                }
                Ok(())
            }
            TaskKind::LweDot { secret } => {
                if secret.len() != n_terms {
                    return domain(format!(
                        "secret has length {} but N = {n_terms}",
                        secret.len()
                    ));
                }
                if secret.iter().any(|&s| s > 1) {
                    return domain("LWE secret must be binary");
                }
                Ok(())
            }
        }
    }

    /// Short human-readable name.
    pub fn name(&self) -> String {
        match self {
            TaskKind::ModAdd => "mod_add".into(),
            TaskKind::ModAddSparseK { k } => format!("mod_add_k{k}"),
            TaskKind::Asymmetric { j, k } => format!("asym_j{j}_k{k}"),
            TaskKind::ModMul => "mod_mul".into(),
            TaskKind::ScalarProduct { half_len } => format!("scalar_product_{half_len}"),
            TaskKind::LweDot { secret } => {
                format!("lwe_h{}", secret.iter().filter(|&&s| s == 1).count())
            }
        }
    }
}

/// The label of `a` under `task`.
pub fn label(task: &TaskKind, a: &[u64], q: Modulus) -> Result<u64> {
    let expected_len = match task {
        TaskKind::ScalarProduct { half_len } => Some(2 * half_len),
        TaskKind::LweDot { secret } => Some(secret.len()),
        _ => None,
    };
    if let Some(len) = expected_len {
        if a.len() != len {
            return domain(format!("input has length {} but the task needs {len}", a.len()));
        }
    }
    if a.is_empty() {
        return domain("empty input vector");
    }
    for &x in a {
        q.check(x)?;
    }
    Ok(label_unchecked(task, a, q))
}

pub(crate) fn label_unchecked(task: &TaskKind, a: &[u64], q: Modulus) -> u64 {
    match task {
        TaskKind::ModAdd | TaskKind::ModAddSparseK { .. } => sum_mod(a, q),
        TaskKind::Asymmetric { j, k } => {
            let inner = a.iter().fold(0, |acc, &x| q.add(acc, q.pow(x, *j)));
            q.add(q.mul(inner, inner), q.pow(a[0], *k))
        }
        TaskKind::ModMul => a.iter().fold(1 % q.get(), |acc, &x| q.mul(acc, x)),
        TaskKind::ScalarProduct { half_len } => {
            let (left, right) = a.split_at(*half_len);
            left.iter()
                .zip(right)
                .fold(0, |acc, (&x, &y)| q.add(acc, q.mul(x, y)))
        }
        TaskKind::LweDot { secret } => a
            .iter()
            .zip(secret)
            .filter(|(_, &s)| s == 1)
            .fold(0, |acc, (&x, _)| q.add(acc, x)),
    }
}

fn sum_mod(a: &[u64], q: Modulus) -> u64 {
    let total: u128 = a.iter().map(|&x| x as u128).sum();
    (total % q.get() as u128) as u64
}
