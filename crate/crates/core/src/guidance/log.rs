use std::io::Write;

/// Diagnostics of one guided reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub terminal_loss: f64,
    pub u_norm: f64,
    pub score_dev: f64,
    pub gamma: f64,
    pub inner_lr: f64,
    /// Leading 8 bytes of the SHA-256 of the accepted `x̂_t` row, hex.
    pub x_hat_hash: String,
    pub descent_ok: bool,
    pub non_finite: bool,
}

/// Per-chain log, one record per guided step in decreasing `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,terminal_loss,u_norm,score_dev,gamma,inner_lr")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.9e},{:.9e},{:.9e},{},{:.9e}",
                r.t, r.terminal_loss, r.u_norm, r.score_dev, r.gamma, r.inner_lr
            )?;
        }
        Ok(())
    }

    pub fn final_terminal_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.terminal_loss)
    }

    pub fn descent_violations(&self) -> usize {
        self.records.iter().filter(|r| !r.descent_ok).count()
    }
}

pub(crate) fn row_hash(row: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in row {
        h.update(v.to_le_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let log = TrajectoryLog {
            records: vec![TrajectoryRecord {
                t: 3,
                terminal_loss: 0.5,
                u_norm: 0.0,
                score_dev: 0.0,
                gamma: 2.0,
                inner_lr: 1e-3,
                x_hat_hash: row_hash(&[1.0]),
                descent_ok: true,
                non_finite: false,
            }],
        };
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,terminal_loss,u_norm,score_dev,gamma,inner_lr");
        assert!(lines[1].starts_with("3,5.000000000e-1,"));
        assert_eq!(row_hash(&[1.0]).len(), 16);
    }
}
