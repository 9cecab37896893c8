use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ablation::{AblationMatrix, RobustnessSummary};
use super::bootstrap::SignificanceResult;
use crate::error::{Error, Result};
use crate::model::write_atomic;
use crate::numfmt::g6;

pub const HEADLINE_CSV: &str = "headline.csv";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const ABLATION_DIR: &str = "ablation";
pub const HEATMAP_DIR: &str = "heatmaps";

/// Bootstrap comparison of two systems on one test domain under matched labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub system_a: String,
    pub system_b: String,
    pub domain: String,
    pub result: SignificanceResult,
}

/// Long-format table: one row per (system, test domain) with the matched-label
/// score, plus the bootstrap result where that system is side A.
pub fn headline_csv(matrices: &[AblationMatrix], comparisons: &[Comparison]) -> Result<String> {
    let mut s = String::from("system,domain,bleu,compared_to,win_fraction,significant\n");
    for m in matrices {
        for (d, score) in m.test_domains.iter().zip(m.diagonal()?) {
            let _ = write!(s, "{},{},{}", m.system, d, g6(score));
            match comparisons.iter().find(|c| c.system_a == m.system && &c.domain == d) {
                Some(c) => {
                    let _ = writeln!(
                        s,
                        ",{},{},{}",
                        c.system_b,
                        g6(c.result.win_fraction),
                        u8::from(c.result.significant)
                    );
                }
                None => s.push_str(",,,\n"),
            }
        }
    }
    Ok(s)
}

/// One row per system, one column per test domain.
pub fn robustness_csv(summaries: &[RobustnessSummary]) -> Result<String> {
    let Some(first) = summaries.first() else {
        return Err(Error::Empty("no robustness summaries".into()));
    };
    let domains = &first.test_domains;
    let mut s = String::from("system");
    for d in domains {
        s.push(',');
        s.push_str(d);
    }
    s.push('\n');
    for r in summaries {
        s.push_str(&r.system);
        for d in domains {
            let v = r
                .get(d)
                .ok_or_else(|| Error::format("robustness summary", format!("{} lacks domain `{d}`", r.system)))?;
            let _ = write!(s, ",{}", g6(v));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Parses [`robustness_csv`] output into `(system, values)` rows.
pub fn parse_robustness_csv(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let bad = |d: String| Error::format("robustness CSV", d);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let domains: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        let mut f = line.split(',').map(str::trim);
        let system = f.next().unwrap_or_default().to_string();
        let vals = f
            .map(|x| x.parse::<f64>().map_err(|_| bad(format!("bad number `{x}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != domains.len() {
            return Err(bad(format!("row `{system}` has {} values", vals.len())));
        }
        rows.push((system, vals));
    }
    Ok((domains, rows))
}

const CELL_W: usize = 72;
const CELL_H: usize = 28;
const LEFT: usize = 110;
const TOP: usize = 48;

fn shade(score: f64) -> (u8, u8, u8, bool) {
    let t = (score / 100.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0), t > 0.5)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap of one ablation matrix: rows are test domains, columns are
/// provided labels, fill darkens linearly with the score on a 0..100 scale.
pub fn heatmap_svg(m: &AblationMatrix) -> String {
    let width = LEFT + CELL_W * m.labels.len() + 10;
    let height = TOP + CELL_H * m.test_domains.len() + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="16" font-weight="bold">{}</text>"#,
        escape(&m.system)
    );
    for (j, l) in m.labels.iter().enumerate() {
        let x = LEFT + CELL_W * j + CELL_W / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#,
            TOP - 8,
            escape(l)
        );
    }
    for (i, (d, row)) in m.test_domains.iter().zip(&m.cells).enumerate() {
        let y = TOP + CELL_H * i;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LEFT - 6,
            y + CELL_H / 2 + 4,
            escape(d)
        );
        for (j, &v) in row.iter().enumerate() {
            let x = LEFT + CELL_W * j;
            let (r, g, b, dark) = shade(v);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="#{r:02x}{g:02x}{b:02x}" stroke="#ffffff"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{}">{:.1}</text>"#,
                x + CELL_W / 2,
                y + CELL_H / 2 + 4,
                if dark { "white" } else { "black" },
                v
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the full report bundle under `dir` and returns the written paths
/// in a fixed order.
pub fn emit_reports(
    dir: &Path,
    matrices: &[AblationMatrix],
    summaries: &[RobustnessSummary],
    comparisons: &[Comparison],
) -> Result<Vec<PathBuf>> {
    if matrices.is_empty() {
        return Err(Error::Empty("no ablation matrices to report".into()));
    }
    let abl = dir.join(ABLATION_DIR);
    let maps = dir.join(HEATMAP_DIR);
    for d in [&abl, &maps] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<()> {
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
        Ok(())
    };
    put(dir.join(HEADLINE_CSV), headline_csv(matrices, comparisons)?)?;
    put(dir.join(ROBUSTNESS_CSV), robustness_csv(summaries)?)?;
    for m in matrices {
        put(abl.join(format!("{}.csv", m.system)), m.to_csv())?;
        put(maps.join(format!("{}.svg", m.system)), heatmap_svg(m))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ablation::NONE_LABEL;

    fn flat(system: &str) -> AblationMatrix {
        AblationMatrix::new(
            system,
            vec!["A".into(), "B".into()],
            vec!["A".into(), "B".into(), NONE_LABEL.into()],
            vec![vec![40.0; 3], vec![75.5; 3]],
        )
        .unwrap()
    }

    #[test]
    fn uniform_rows_render_uniformly() {
        let svg = heatmap_svg(&flat("base"));
        let fills: Vec<&str> = svg
            .lines()
            .filter(|l| l.starts_with("<rect"))
            .map(|l| l.split("fill=").nth(1).unwrap())
            .collect();
        assert_eq!(fills.len(), 6);
        assert!(fills[..3].iter().all(|f| *f == fills[0]));
        assert!(fills[3..].iter().all(|f| *f == fills[3]));
        assert_ne!(fills[0], fills[3]);
    }

    #[test]
    fn headline_and_robustness_tables() {
        let m = flat("sys");
        let c = Comparison {
            system_a: "sys".into(),
            system_b: "other".into(),
            domain: "B".into(),
            result: SignificanceResult {
                score_a: 75.5,
                score_b: 70.0,
                win_fraction: 0.97,
                iterations: 100,
                significant: true,
            },
        };
        let h = headline_csv(std::slice::from_ref(&m), &[c]).unwrap();
        assert_eq!(
            h,
            "system,domain,bleu,compared_to,win_fraction,significant\nsys,A,40,,,\nsys,B,75.5,other,0.97,1\n"
        );
        let r = robustness_csv(&[RobustnessSummary::of(&m).unwrap()]).unwrap();
        assert_eq!(r, "system,A,B\nsys,0,0\n");
        let (d, rows) = parse_robustness_csv(&r).unwrap();
        assert_eq!(d, vec!["A", "B"]);
        assert_eq!(rows[0].1, vec![0.0, 0.0]);
    }

    #[test]
    fn bundle_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = flat("sys");
        let files = emit_reports(
            dir.path(),
            std::slice::from_ref(&m),
            &[RobustnessSummary::of(&m).unwrap()],
            &[],
        )
        .unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.strip_prefix(dir.path()).unwrap().display().to_string())
            .collect();
        assert_eq!(
            names,
            ["headline.csv", "robustness.csv", "ablation/sys.csv", "heatmaps/sys.svg"]
        );
        let back = AblationMatrix::load("sys", &files[2]).unwrap();
        assert_eq!(back, m);
    }
}
